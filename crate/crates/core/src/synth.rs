//! Deterministic synthetic-defect benchmark: procedural normal textures,
//! parametric defects with ground-truth masks, and an MVTec-style folder
//! writer.

use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::img::Image;
use crate::util::{derive_seed, rng_from_seed};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Procedural texture families standing in for object categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureFamily {
    Stripes,
    Blobs,
    Grid,
}

impl TextureFamily {
    pub fn all() -> [TextureFamily; 3] {
        [TextureFamily::Stripes, TextureFamily::Blobs, TextureFamily::Grid]
    }

    pub fn name(&self) -> &'static str {
        match self {
            TextureFamily::Stripes => "stripes",
            TextureFamily::Blobs => "blobs",
            TextureFamily::Grid => "grid",
        }
    }
}

/// Parametric defect kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Scratch,
    Spot,
    Occlusion,
}

impl DefectKind {
    pub fn all() -> [DefectKind; 3] {
        [DefectKind::Scratch, DefectKind::Spot, DefectKind::Occlusion]
    }

    pub fn name(&self) -> &'static str {
        match self {
            DefectKind::Scratch => "scratch",
            DefectKind::Spot => "spot",
            DefectKind::Occlusion => "occlusion",
        }
    }
}

/// Generator parameters for one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub texture_family: TextureFamily,
    pub image_size: (usize, usize),
    pub defect_kinds: Vec<DefectKind>,
    /// Upper bound on mask area as a fraction of the image; masks cover
    /// between 0.5x and 1.0x of this.
    pub defect_area_frac: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(
        texture_family: TextureFamily,
        image_size: (usize, usize),
        defect_kinds: Vec<DefectKind>,
        defect_area_frac: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(defect_area_frac > 0.0 && defect_area_frac <= 0.2) {
            return Err(Error::InvalidParameter {
                name: "defect_area_frac",
                reason: format!("must lie in (0, 0.2], got {defect_area_frac}"),
            });
        }
        if defect_kinds.is_empty() {
            return Err(Error::EmptyInput("defect kinds"));
        }
        if image_size.0 < 16 || image_size.1 < 16 {
            return Err(Error::InvalidParameter {
                name: "image_size",
                reason: "benchmark images must be at least 16x16".into(),
            });
        }
        Ok(Self {
            texture_family,
            image_size,
            defect_kinds,
            defect_area_frac,
            seed,
        })
    }

    /// The default desk-scale category spec.
    pub fn default_for(family: TextureFamily, seed: u64) -> Self {
        Self::new(family, (32, 32), DefectKind::all().to_vec(), 0.06, seed).unwrap()
    }
}

/// Deterministic normal texture for (spec, index). Within-family variation
/// comes from small jitters of frequency, phase, and placement.
pub fn make_normal(spec: &SyntheticSpec, index: u64) -> Image {
    let (h, w) = spec.image_size;
    let mut rng = rng_from_seed(derive_seed(spec.seed, "normal", index));
    match spec.texture_family {
        TextureFamily::Stripes => {
            let freq = 3.1 + 0.6 * rng.random::<f64>();
            let theta: f64 = 0.35 + 0.12 * (rng.random::<f64>() - 0.5);
            let phase = 1.0 * (rng.random::<f64>() - 0.5);
            let amp = 0.26 + 0.12 * rng.random::<f64>();
            let bias = 0.46 + 0.08 * rng.random::<f64>();
            Image::from_fn(h, w, 1, |y, x, _| {
                let u = (x as f64 * theta.cos() + y as f64 * theta.sin()) / w as f64;
                bias + amp * (2.0 * std::f64::consts::PI * freq * u + phase).sin()
            })
            .expect("finite texture")
        }
        TextureFamily::Blobs => {
            let mut centers = Vec::new();
            for i in 0..3 {
                for j in 0..3 {
                    let cy = (i as f64 + 0.5) * h as f64 / 3.0 + 3.2 * (rng.random::<f64>() - 0.5);
                    let cx = (j as f64 + 0.5) * w as f64 / 3.0 + 3.2 * (rng.random::<f64>() - 0.5);
                    let sigma = 2.0 + 1.0 * rng.random::<f64>();
                    let amp = 0.28 + 0.32 * rng.random::<f64>();
                    centers.push((cy, cx, sigma, amp));
                }
            }
            let background = 0.14 + 0.14 * rng.random::<f64>();
            Image::from_fn(h, w, 1, |y, x, _| {
                let mut v = background;
                for &(cy, cx, sigma, amp) in &centers {
                    let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    v += amp * (-r2 / (2.0 * sigma * sigma)).exp();
                }
                v
            })
            .expect("finite texture")
        }
        TextureFamily::Grid => {
            let pitch = 8usize;
            let offset = rng.random_range(0..4usize);
            let dark = 0.16 + 0.28 * rng.random::<f64>();
            let light = 0.6 + 0.32 * rng.random::<f64>();
            Image::from_fn(h, w, 1, |y, x, _| {
                let on_line = (x + offset) % pitch < 2 || (y + offset) % pitch < 2;
                if on_line {
                    dark
                } else {
                    light
                }
            })
            .expect("finite texture")
        }
    }
}

fn mask_area_bounds(spec: &SyntheticSpec) -> (usize, usize) {
    let total = (spec.image_size.0 * spec.image_size.1) as f64;
    let hi = (spec.defect_area_frac * total).floor().max(1.0) as usize;
    let lo = ((0.5 * spec.defect_area_frac * total).ceil() as usize).max(1);
    (lo, hi)
}

fn rasterize_segment(h: usize, w: usize, cy: f64, cx: f64, angle: f64, half_len: f64, thickness: f64) -> Array2<bool> {
    let (dy, dx) = (angle.sin(), angle.cos());
    let mut mask = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let py = y as f64 - cy;
            let px = x as f64 - cx;
            let along = (py * dy + px * dx).clamp(-half_len, half_len);
            let (qy, qx) = (along * dy, along * dx);
            let dist2 = (py - qy).powi(2) + (px - qx).powi(2);
            if dist2.sqrt() <= thickness / 2.0 {
                mask[(y, x)] = true;
            }
        }
    }
    mask
}

/// Inject one defect. Pixels outside the returned mask are untouched; the
/// defect value is pushed to whichever extreme is farther from the local
/// texture mean, so defects always carry strong contrast.
pub fn inject_defect(
    img: &Image,
    kind: DefectKind,
    spec: &SyntheticSpec,
    index: u64,
) -> Result<(Image, Array2<bool>)> {
    if !spec.defect_kinds.contains(&kind) {
        return Err(Error::InvalidParameter {
            name: "kind",
            reason: format!("{} not enabled in this spec", kind.name()),
        });
    }
    let (h, w) = spec.image_size;
    if img.shape() != (h, w, 1) && img.shape() != (h, w, 3) {
        return Err(Error::ShapeMismatch {
            context: "inject_defect",
            expected: format!("{h}x{w}"),
            actual: format!("{}x{}", img.height(), img.width()),
        });
    }
    let (lo, hi) = mask_area_bounds(spec);
    let mut rng = rng_from_seed(derive_seed(spec.seed, "defect", index * 31 + kind as u64));

    for _attempt in 0..64 {
        let target = lo as f64 + (hi - lo) as f64 * rng.random::<f64>();
        let mask = match kind {
            DefectKind::Scratch => {
                let thickness = if target < 12.0 { 1.2 } else { 2.0 };
                let len = (target / thickness).clamp(3.0, (w.min(h) - 4) as f64);
                let margin = len / 2.0 + 2.0;
                let cy = margin + (h as f64 - 2.0 * margin).max(1.0) * rng.random::<f64>();
                let cx = margin + (w as f64 - 2.0 * margin).max(1.0) * rng.random::<f64>();
                let angle = std::f64::consts::PI * rng.random::<f64>();
                rasterize_segment(h, w, cy, cx, angle, len / 2.0, thickness)
            }
            DefectKind::Spot => {
                let r = (target / std::f64::consts::PI).sqrt();
                let margin = r + 1.5;
                let cy = margin + (h as f64 - 2.0 * margin).max(1.0) * rng.random::<f64>();
                let cx = margin + (w as f64 - 2.0 * margin).max(1.0) * rng.random::<f64>();
                let mut mask = Array2::from_elem((h, w), false);
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        if d2.sqrt() <= r {
                            mask[(y, x)] = true;
                        }
                    }
                }
                mask
            }
            DefectKind::Occlusion => {
                let aspect = 0.6 + 1.0 * rng.random::<f64>();
                let a = ((target * aspect).sqrt().round() as usize).clamp(2, h - 4);
                let b = ((target / a as f64).round() as usize).clamp(2, w - 4);
                let y0 = 2 + rng.random_range(0..(h - a - 3).max(1));
                let x0 = 2 + rng.random_range(0..(w - b - 3).max(1));
                let mut mask = Array2::from_elem((h, w), false);
                for y in y0..y0 + a {
                    for x in x0..x0 + b {
                        mask[(y, x)] = true;
                    }
                }
                mask
            }
        };
        let area = mask.iter().filter(|m| **m).count();
        if area < lo || area > hi {
            continue;
        }
        // Push masked pixels a fixed contrast away from the local mean, in
        // whichever direction has more headroom.
        let lum = img.luminance();
        let mut mean = 0.0;
        for y in 0..h {
            for x in 0..w {
                if mask[(y, x)] {
                    mean += lum[(y, x)];
                }
            }
        }
        mean /= area as f64;
        let value = if mean > 0.5 {
            (mean - 0.38).clamp(0.03, 0.97)
        } else {
            (mean + 0.38).clamp(0.03, 0.97)
        };
        let mut data = img.data().clone();
        for y in 0..h {
            for x in 0..w {
                if mask[(y, x)] {
                    for c in 0..img.channels() {
                        data[(y, x, c)] = value;
                    }
                }
            }
        }
        return Ok((Image::new(data)?, mask));
    }
    Err(Error::InvalidParameter {
        name: "defect_area_frac",
        reason: "no defect geometry satisfied the area bounds".into(),
    })
}

fn save_mask(mask: &Array2<bool>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let img = Image::from_fn(h, w, 1, |y, x, _| if mask[(y, x)] { 1.0 } else { 0.0 })?;
    img.save_png(path)
}

/// Load a mask written by [`write_dataset`].
pub fn load_mask(path: &Path) -> Result<Array2<bool>> {
    let img = Image::load_png(path)?;
    let lum = img.luminance();
    Ok(lum.mapv(|v| v > 0.5))
}

/// Manifest written at the dataset root.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: SyntheticSpec,
    pub n_train_normal: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    /// (file, generator index) pairs for every emitted image.
    pub entries: Vec<(String, u64)>,
}

/// Write one category as an MVTec-style tree:
/// `train/good`, `test/good`, `test/<kind>`, `ground_truth/<kind>`.
pub fn write_dataset(
    spec: &SyntheticSpec,
    n_train_normal: usize,
    n_test_normal: usize,
    n_test_anom: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    let train_dir = out_dir.join("train/good");
    let test_good = out_dir.join("test/good");
    std::fs::create_dir_all(&train_dir).map_err(|e| Error::io(&train_dir, e))?;
    std::fs::create_dir_all(&test_good).map_err(|e| Error::io(&test_good, e))?;

    for i in 0..n_train_normal {
        let img = make_normal(spec, i as u64);
        let rel = format!("train/good/{i:03}.png");
        img.save_png(&out_dir.join(&rel))?;
        entries.push((rel, i as u64));
    }
    for i in 0..n_test_normal {
        let index = 10_000 + i as u64;
        let img = make_normal(spec, index);
        let rel = format!("test/good/{i:03}.png");
        img.save_png(&out_dir.join(&rel))?;
        entries.push((rel, index));
    }
    for i in 0..n_test_anom {
        let kind = spec.defect_kinds[i % spec.defect_kinds.len()];
        let index = 20_000 + i as u64;
        let normal = make_normal(spec, index);
        let (defective, mask) = inject_defect(&normal, kind, spec, index)?;
        let rel = format!("test/{}/{i:03}.png", kind.name());
        let mask_rel = format!("ground_truth/{}/{i:03}_mask.png", kind.name());
        let img_path = out_dir.join(&rel);
        let mask_path = out_dir.join(&mask_rel);
        std::fs::create_dir_all(img_path.parent().unwrap()).map_err(|e| Error::io(&img_path, e))?;
        std::fs::create_dir_all(mask_path.parent().unwrap()).map_err(|e| Error::io(&mask_path, e))?;
        defective.save_png(&img_path)?;
        save_mask(&mask, &mask_path)?;
        entries.push((rel, index));
    }

    let manifest = DatasetManifest {
        spec: spec.clone(),
        n_train_normal,
        n_test_normal,
        n_test_anomalous: n_test_anom,
        entries,
    };
    let bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&out_dir.join("manifest.json"), &bytes)?;
    Ok(manifest)
}

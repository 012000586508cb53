//! Multi-level grid features and text features for the scoring branches.
//!
//! The encoder contract is pluggable: anything that emits unit-norm cell
//! vectors on strictly coarsening grids plus a unit global vector can drive
//! the scorer. The reference implementation is a fixed (untrained)
//! multi-scale patch descriptor: per-cell mean/variance/gradient-orientation
//! statistics pushed through a seeded random projection. Each cell reads
//! only its own pixel block, so its receptive field is exactly that block.

use crate::error::{Error, Result};
use crate::img::Image;
use crate::prompts::embed_prompt_dim;
use crate::util::{derive_seed, rng_from_seed, ContentHasher};
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

const ORIENT_BINS: usize = 8;
const NORM_TOL: f64 = 1e-6;

/// Per-level grids of unit-norm cell vectors plus one unit global vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    /// Level l has shape (h_l, w_l, d) with h strictly coarsening in l.
    pub levels: Vec<Array3<f64>>,
    pub global_vec: Array1<f64>,
    pub encoder_hash: String,
}

impl FeatureStack {
    pub fn dim(&self) -> usize {
        self.global_vec.len()
    }

    pub fn level_shapes(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|l| (l.dim().0, l.dim().1)).collect()
    }

    /// Validate the type invariants: at least two levels, coarsening grids,
    /// unit-norm cells and global vector.
    pub fn validate(&self) -> Result<()> {
        if self.levels.len() < 2 {
            return Err(Error::InvalidParameter {
                name: "levels",
                reason: format!("need at least 2 levels, got {}", self.levels.len()),
            });
        }
        let d = self.dim();
        let mut prev: Option<(usize, usize)> = None;
        for level in &self.levels {
            let (h, w, ld) = level.dim();
            if ld != d {
                return Err(Error::ShapeMismatch {
                    context: "feature stack",
                    expected: format!("cell dim {d}"),
                    actual: format!("{ld}"),
                });
            }
            if let Some((ph, pw)) = prev {
                if h > ph || w > pw {
                    return Err(Error::InvalidParameter {
                        name: "levels",
                        reason: "grids must coarsen with level".into(),
                    });
                }
            }
            prev = Some((h, w));
            for y in 0..h {
                for x in 0..w {
                    let norm: f64 = (0..d).map(|k| level[(y, x, k)].powi(2)).sum::<f64>().sqrt();
                    if (norm - 1.0).abs() > NORM_TOL {
                        return Err(Error::InvalidParameter {
                            name: "cell_norm",
                            reason: format!("cell ({y},{x}) has norm {norm}"),
                        });
                    }
                }
            }
        }
        let gnorm = self.global_vec.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (gnorm - 1.0).abs() > NORM_TOL {
            return Err(Error::InvalidParameter {
                name: "global_norm",
                reason: format!("global vector has norm {gnorm}"),
            });
        }
        Ok(())
    }
}

/// Mean text embeddings for the normal and abnormal prompt pools,
/// renormalized to unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures {
    pub normal_vec: Array1<f64>,
    pub abnormal_vec: Array1<f64>,
}

/// Average the unit embeddings of each polarity's prompts and renormalize.
pub fn encode_texts(normal_prompts: &[String], abnormal_prompts: &[String], dim: usize) -> Result<TextFeatures> {
    let mean_vec = |prompts: &[String]| -> Result<Array1<f64>> {
        if prompts.is_empty() {
            return Err(Error::EmptyInput("prompt list"));
        }
        let mut acc = Array1::<f64>::zeros(dim);
        for p in prompts {
            let e = embed_prompt_dim(p, dim)?;
            acc += &Array1::from(e.vector().to_vec());
        }
        acc /= prompts.len() as f64;
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidParameter {
                name: "prompts",
                reason: "prompt embeddings cancel to the zero vector".into(),
            });
        }
        Ok(acc / norm)
    };
    Ok(TextFeatures {
        normal_vec: mean_vec(normal_prompts)?,
        abnormal_vec: mean_vec(abnormal_prompts)?,
    })
}

/// The pluggable image-encoder contract.
pub trait ImageEncoder: Send + Sync {
    /// Encode an image into a feature stack satisfying the stack invariants.
    fn encode_image(&self, img: &Image) -> Result<FeatureStack>;
    /// Hash of the encoder configuration; stacks and banks only mix when
    /// hashes match.
    fn config_hash(&self) -> &str;
    fn dim(&self) -> usize;
    fn num_levels(&self) -> usize;
}

/// Configuration of the reference encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefEncoderConfig {
    /// Pixels per cell side at each level, finest first.
    pub cell_sizes: Vec<usize>,
    /// Output feature width d.
    pub dim: usize,
    /// Channels the encoder accepts (1 or 3).
    pub channels: usize,
    /// Seed of the random projection.
    pub seed: u64,
}

impl RefEncoderConfig {
    /// Levels with cell sides 4, 8, ..., doubling per level.
    pub fn with_levels(levels: usize, dim: usize, channels: usize, seed: u64) -> Self {
        Self {
            cell_sizes: (0..levels).map(|l| 4 << l).collect(),
            dim,
            channels,
            seed,
        }
    }
}

impl Default for RefEncoderConfig {
    fn default() -> Self {
        Self::with_levels(3, 64, 1, 40)
    }
}

/// Fixed multi-scale patch descriptor. Raw per-cell statistics are
/// [bias, mean, variance, 8 orientation bins, per-channel means] projected
/// to `dim` through a seeded Gaussian matrix and normalized.
pub struct RefEncoder {
    config: RefEncoderConfig,
    projection: Array2<f64>,
    hash: String,
}

impl RefEncoder {
    pub fn new(config: RefEncoderConfig) -> Result<Self> {
        if config.cell_sizes.len() < 2 {
            return Err(Error::InvalidParameter {
                name: "cell_sizes",
                reason: "need at least 2 levels".into(),
            });
        }
        if config.dim == 0 {
            return Err(Error::InvalidParameter {
                name: "dim",
                reason: "feature width must be positive".into(),
            });
        }
        if config.channels != 1 && config.channels != 3 {
            return Err(Error::InvalidParameter {
                name: "channels",
                reason: format!("expected 1 or 3, got {}", config.channels),
            });
        }
        for w in config.cell_sizes.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidParameter {
                    name: "cell_sizes",
                    reason: "cell sizes must strictly increase (grids coarsen)".into(),
                });
            }
        }
        let raw_dim = 3 + ORIENT_BINS + config.channels;
        let mut rng = rng_from_seed(derive_seed(config.seed, "ref-encoder-projection", 0));
        let projection = Array2::from_shape_fn((config.dim, raw_dim), |_| {
            let z: f64 = rng.sample(StandardNormal);
            z
        });
        let mut hasher = ContentHasher::new("ref-encoder-v1");
        hasher.update(serde_json::to_string(&config).unwrap().as_bytes());
        let hash = hasher.finish_hex();
        Ok(Self {
            config,
            projection,
            hash,
        })
    }

    pub fn config(&self) -> &RefEncoderConfig {
        &self.config
    }

    /// Raw descriptor of one cell block: reads only pixels inside
    /// [y0, y0+size) x [x0, x0+size).
    fn cell_descriptor(&self, img: &Image, lum: &Array2<f64>, y0: usize, x0: usize, size: usize) -> Vec<f64> {
        let n = (size * size) as f64;
        let mut mean = 0.0;
        for y in y0..y0 + size {
            for x in x0..x0 + size {
                mean += lum[(y, x)];
            }
        }
        mean /= n;
        let mut var = 0.0;
        for y in y0..y0 + size {
            for x in x0..x0 + size {
                let d = lum[(y, x)] - mean;
                var += d * d;
            }
        }
        var /= n;

        // Within-block forward differences keep the receptive field local.
        let mut hist = [0.0_f64; ORIENT_BINS];
        for y in y0..y0 + size - 1 {
            for x in x0..x0 + size - 1 {
                let gx = lum[(y, x + 1)] - lum[(y, x)];
                let gy = lum[(y + 1, x)] - lum[(y, x)];
                let mag = (gx * gx + gy * gy).sqrt();
                if mag > 0.0 {
                    let angle = gy.atan2(gx); // (-pi, pi]
                    let frac = (angle + std::f64::consts::PI) / (2.0 * std::f64::consts::PI);
                    let bin = ((frac * ORIENT_BINS as f64) as usize).min(ORIENT_BINS - 1);
                    hist[bin] += mag;
                }
            }
        }
        for h in &mut hist {
            *h /= n;
        }

        let mut raw = Vec::with_capacity(3 + ORIENT_BINS + self.config.channels);
        // Intensities are centered so a shared brightness offset does not
        // flatten cosine contrast; the anchor keeps low-signal cells (smooth
        // background) directionally stable and nonzero.
        raw.push(0.15);
        raw.push(mean - 0.5);
        raw.push(var.sqrt());
        raw.extend_from_slice(&hist);
        for c in 0..self.config.channels {
            let mut cm = 0.0;
            for y in y0..y0 + size {
                for x in x0..x0 + size {
                    cm += img.data()[(y, x, c)];
                }
            }
            raw.push(cm / n - 0.5);
        }
        raw
    }

    fn project_normalize(&self, raw: &[f64]) -> Array1<f64> {
        let raw = Array1::from(raw.to_vec());
        let mut v = self.projection.dot(&raw);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // The constant bias entry keeps the projection away from zero for
        // any real input.
        v /= norm;
        v
    }
}

impl ImageEncoder for RefEncoder {
    fn encode_image(&self, img: &Image) -> Result<FeatureStack> {
        let (h, w, c) = img.shape();
        if c != self.config.channels {
            return Err(Error::ShapeMismatch {
                context: "encode_image channels",
                expected: self.config.channels.to_string(),
                actual: c.to_string(),
            });
        }
        let coarsest = *self.config.cell_sizes.last().unwrap();
        if h % coarsest != 0 || w % coarsest != 0 || h < coarsest || w < coarsest {
            return Err(Error::InvalidParameter {
                name: "image_shape",
                reason: format!("{h}x{w} not divisible by the coarsest cell size {coarsest}"),
            });
        }
        let lum = img.luminance();
        let mut levels = Vec::with_capacity(self.config.cell_sizes.len());
        for &size in &self.config.cell_sizes {
            let (gh, gw) = (h / size, w / size);
            let mut grid = Array3::zeros((gh, gw, self.config.dim));
            for gy in 0..gh {
                for gx in 0..gw {
                    let raw = self.cell_descriptor(img, &lum, gy * size, gx * size, size);
                    let v = self.project_normalize(&raw);
                    for k in 0..self.config.dim {
                        grid[(gy, gx, k)] = v[k];
                    }
                }
            }
            levels.push(grid);
        }
        // Global vector: normalized mean of the coarsest level's cells.
        let coarsest_level = levels.last().unwrap();
        let (gh, gw, d) = coarsest_level.dim();
        let mut global = Array1::<f64>::zeros(d);
        for y in 0..gh {
            for x in 0..gw {
                for k in 0..d {
                    global[k] += coarsest_level[(y, x, k)];
                }
            }
        }
        let norm = global.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidParameter {
                name: "global_vec",
                reason: "coarsest cells cancelled to zero".into(),
            });
        }
        global /= norm;
        Ok(FeatureStack {
            levels,
            global_vec: global,
            encoder_hash: self.hash.clone(),
        })
    }

    fn config_hash(&self) -> &str {
        &self.hash
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn num_levels(&self) -> usize {
        self.config.cell_sizes.len()
    }
}

/// Trivial alternative encoder: per-cell channel means, zero-padded to `dim`
/// and normalized (with a bias entry so constants stay well-defined).
/// Exists to exercise the encoder contract with a second implementation.
pub struct AvgPoolEncoder {
    cell_sizes: Vec<usize>,
    dim: usize,
    hash: String,
}

impl AvgPoolEncoder {
    pub fn new(cell_sizes: Vec<usize>, dim: usize) -> Result<Self> {
        if cell_sizes.len() < 2 || dim < 2 {
            return Err(Error::InvalidParameter {
                name: "avgpool_config",
                reason: "need >= 2 levels and dim >= 2".into(),
            });
        }
        let mut hasher = ContentHasher::new("avgpool-encoder-v1");
        for s in &cell_sizes {
            hasher.update(&(*s as u64).to_le_bytes());
        }
        hasher.update(&(dim as u64).to_le_bytes());
        let hash = hasher.finish_hex();
        Ok(Self {
            cell_sizes,
            dim,
            hash,
        })
    }
}

impl ImageEncoder for AvgPoolEncoder {
    fn encode_image(&self, img: &Image) -> Result<FeatureStack> {
        let (h, w, c) = img.shape();
        let coarsest = *self.cell_sizes.last().unwrap();
        if h % coarsest != 0 || w % coarsest != 0 {
            return Err(Error::InvalidParameter {
                name: "image_shape",
                reason: format!("{h}x{w} not divisible by cell size {coarsest}"),
            });
        }
        let mut levels = Vec::new();
        for &size in &self.cell_sizes {
            let (gh, gw) = (h / size, w / size);
            let mut grid = Array3::zeros((gh, gw, self.dim));
            for gy in 0..gh {
                for gx in 0..gw {
                    let mut v = vec![0.0; self.dim];
                    v[0] = 1.0;
                    for ch in 0..c.min(self.dim - 1) {
                        let mut m = 0.0;
                        for y in gy * size..(gy + 1) * size {
                            for x in gx * size..(gx + 1) * size {
                                m += img.data()[(y, x, ch)];
                            }
                        }
                        v[1 + ch] = m / (size * size) as f64;
                    }
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    for k in 0..self.dim {
                        grid[(gy, gx, k)] = v[k] / norm;
                    }
                }
            }
            levels.push(grid);
        }
        let coarsest_level = levels.last().unwrap();
        let (gh, gw, d) = coarsest_level.dim();
        let mut global = Array1::<f64>::zeros(d);
        for y in 0..gh {
            for x in 0..gw {
                for k in 0..d {
                    global[k] += coarsest_level[(y, x, k)];
                }
            }
        }
        let norm = global.iter().map(|v| v * v).sum::<f64>().sqrt();
        global /= norm;
        Ok(FeatureStack {
            levels,
            global_vec: global,
            encoder_hash: self.hash.clone(),
        })
    }

    fn config_hash(&self) -> &str {
        &self.hash
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn num_levels(&self) -> usize {
        self.cell_sizes.len()
    }
}

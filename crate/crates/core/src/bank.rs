//! Anomaly-free sample pool and its feature memory bank.
//!
//! The pool mixes the raw references with samples generated by the
//! customized model (references noised gently and denoised under the
//! customization prompt). References are never evicted; generated samples
//! top the bank up to capacity.

use crate::container;
use crate::denoiser::Denoiser;
use crate::encoder::{FeatureStack, ImageEncoder};
use crate::error::{Error, Result};
use crate::img::Image;
use crate::personalization::t_for_ratio;
use crate::prompts::{embed_prompt_dim, PromptCatalog};
use crate::schedule::{denoise_from, forward_noise, sample_noise};
use crate::util::derive_seed;
use ndarray::{Array1, Array3, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

const BANK_VERSION: u32 = 1;
const POOL_VERSION: u32 = 1;

/// Where a pool entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Reference,
    Generated,
}

/// Fixed pool of per-image feature stacks compared against queries.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    entries: Vec<FeatureStack>,
    provenance: Vec<Provenance>,
    capacity: usize,
    encoder_hash: String,
}

impl MemoryBank {
    pub fn entries(&self) -> &[FeatureStack] {
        &self.entries
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn encoder_hash(&self) -> &str {
        &self.encoder_hash
    }
}

/// Draw fresh normal samples from the customized model: each one noises a
/// randomly chosen reference to `t_ratio_bank` (gentler than the query
/// setting) and denoises it under the customization prompt.
pub fn generate_normals(
    model: &Denoiser,
    catalog: &PromptCatalog,
    count: usize,
    refs: &crate::customization::ReferenceSet,
    t_ratio_bank: f64,
    rng_seed: u64,
) -> Result<Vec<Image>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let sched = model.schedule().clone();
    let t_used = t_for_ratio(t_ratio_bank, sched.num_steps())?;
    let cond = embed_prompt_dim(&catalog.customization_prompt(), model.cond_dim())?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let pick_seed = derive_seed(rng_seed, "bank-pick", i as u64);
        let mut rng = crate::util::rng_from_seed(pick_seed);
        let idx = rng.random_range(0..refs.images.len());
        let source = &refs.images[idx];
        let eps = sample_noise(source.shape(), derive_seed(rng_seed, "bank-eps", i as u64));
        let x_t = forward_noise(source, t_used, &eps, &sched)?;
        let img = denoise_from(
            &x_t,
            t_used,
            &cond,
            model,
            &sched,
            derive_seed(rng_seed, "bank-chain", i as u64),
        )?;
        out.push(img);
    }
    Ok(out)
}

/// Encode references plus generated samples into a bank. References are all
/// kept; generated samples fill the remaining capacity in order.
pub fn build_bank(
    references: &[Image],
    generated: &[Image],
    encoder: &dyn ImageEncoder,
    capacity: usize,
) -> Result<MemoryBank> {
    if capacity < references.len() {
        return Err(Error::InvalidParameter {
            name: "capacity",
            reason: format!(
                "capacity {capacity} cannot hold the {} references",
                references.len()
            ),
        });
    }
    let mut entries = Vec::new();
    let mut provenance = Vec::new();
    for img in references {
        entries.push(encoder.encode_image(img)?);
        provenance.push(Provenance::Reference);
    }
    for img in generated {
        if entries.len() >= capacity {
            break;
        }
        entries.push(encoder.encode_image(img)?);
        provenance.push(Provenance::Generated);
    }
    if let Some(first) = entries.first() {
        let shapes = first.level_shapes();
        for e in &entries[1..] {
            if e.level_shapes() != shapes {
                return Err(Error::ShapeMismatch {
                    context: "bank entry geometry",
                    expected: format!("{shapes:?}"),
                    actual: format!("{:?}", e.level_shapes()),
                });
            }
        }
    }
    Ok(MemoryBank {
        entries,
        provenance,
        capacity,
        encoder_hash: encoder.config_hash().to_string(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct BankManifest {
    format_version: u32,
    encoder_hash: String,
    capacity: usize,
    dim: usize,
    provenance: Vec<Provenance>,
    num_levels: usize,
}

/// Serialize a bank to container bytes (deterministic).
pub fn bank_to_bytes(bank: &MemoryBank) -> Vec<u8> {
    let manifest = BankManifest {
        format_version: BANK_VERSION,
        encoder_hash: bank.encoder_hash.clone(),
        capacity: bank.capacity,
        dim: bank.entries.first().map(|e| e.dim()).unwrap_or(0),
        provenance: bank.provenance.clone(),
        num_levels: bank.entries.first().map(|e| e.levels.len()).unwrap_or(0),
    };
    let manifest_bytes = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut arrays: Vec<(String, ArrayD<f64>)> = Vec::new();
    for (i, entry) in bank.entries.iter().enumerate() {
        for (l, level) in entry.levels.iter().enumerate() {
            arrays.push((format!("entry_{i:04}.level_{l}"), level.clone().into_dyn()));
        }
        arrays.push((format!("entry_{i:04}.global"), entry.global_vec.clone().into_dyn()));
    }
    container::to_bytes(&manifest_bytes, &arrays)
}

pub fn save_bank(bank: &MemoryBank, path: &Path) -> Result<()> {
    container::write_atomic(path, &bank_to_bytes(bank))
}

pub fn load_bank(path: &Path) -> Result<MemoryBank> {
    let (manifest_bytes, arrays) = container::load(path)?;
    let manifest: BankManifest = serde_json::from_slice(&manifest_bytes).map_err(|e| Error::Format {
        what: "bank",
        reason: e.to_string(),
    })?;
    if manifest.format_version != BANK_VERSION {
        return Err(Error::Format {
            what: "bank",
            reason: format!("unsupported format version {}", manifest.format_version),
        });
    }
    let lookup = |name: &str| -> Result<&ArrayD<f64>> {
        arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::Format {
                what: "bank",
                reason: format!("missing array `{name}`"),
            })
    };
    let mut entries = Vec::with_capacity(manifest.provenance.len());
    for i in 0..manifest.provenance.len() {
        let mut levels = Vec::with_capacity(manifest.num_levels);
        for l in 0..manifest.num_levels {
            let arr = lookup(&format!("entry_{i:04}.level_{l}"))?;
            let level: Array3<f64> = arr
                .clone()
                .into_dimensionality()
                .map_err(|e| Error::Format {
                    what: "bank",
                    reason: e.to_string(),
                })?;
            levels.push(level);
        }
        let global: Array1<f64> = lookup(&format!("entry_{i:04}.global"))?
            .clone()
            .into_dimensionality()
            .map_err(|e| Error::Format {
                what: "bank",
                reason: e.to_string(),
            })?;
        entries.push(FeatureStack {
            levels,
            global_vec: global,
            encoder_hash: manifest.encoder_hash.clone(),
        });
    }
    Ok(MemoryBank {
        entries,
        provenance: manifest.provenance,
        capacity: manifest.capacity,
        encoder_hash: manifest.encoder_hash,
    })
}

/// Manifest written next to an exported sample pool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolManifest {
    pub format_version: u32,
    pub seed: u64,
    pub model_hash: String,
    pub files: Vec<PoolFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolFile {
    pub file: String,
    pub provenance: Provenance,
}

/// Write pool images as lossless PNG files plus a JSON manifest. Pixel
/// values are snapped to the 16-bit grid by the PNG encoding, so a re-import
/// reproduces `image.quantized()` exactly.
pub fn export_pool(
    images: &[Image],
    provenance: &[Provenance],
    seed: u64,
    model_hash: &str,
    out_dir: &Path,
) -> Result<PoolManifest> {
    if images.len() != provenance.len() {
        return Err(Error::ShapeMismatch {
            context: "export_pool",
            expected: images.len().to_string(),
            actual: provenance.len().to_string(),
        });
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let name = format!("pool_{i:04}.png");
        img.save_png(&out_dir.join(&name))?;
        files.push(PoolFile {
            file: name,
            provenance: provenance[i],
        });
    }
    let manifest = PoolManifest {
        format_version: POOL_VERSION,
        seed,
        model_hash: model_hash.to_string(),
        files,
    };
    let bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    container::write_atomic(&out_dir.join("manifest.json"), &bytes)?;
    Ok(manifest)
}

/// Read back an exported pool in manifest order.
pub fn import_pool(dir: &Path) -> Result<(Vec<Image>, PoolManifest)> {
    let text = std::fs::read(dir.join("manifest.json")).map_err(|e| Error::io(dir.join("manifest.json"), e))?;
    let manifest: PoolManifest = serde_json::from_slice(&text).map_err(|e| Error::Format {
        what: "pool manifest",
        reason: e.to_string(),
    })?;
    if manifest.format_version != POOL_VERSION {
        return Err(Error::Format {
            what: "pool manifest",
            reason: format!("unsupported format version {}", manifest.format_version),
        });
    }
    let mut images = Vec::with_capacity(manifest.files.len());
    for f in &manifest.files {
        images.push(Image::load_png(&dir.join(&f.file))?);
    }
    Ok((images, manifest))
}

//! Few-shot evaluation protocol: episodes, AUROC/AUPRC, and the branch
//! ablation suite.
//!
//! An episode samples k references by seed, customizes the base model,
//! builds the bank, scores every test image, and reports both metrics.
//! Branches disabled by the mask contribute zero to the fused score; an
//! episode that needs neither the personalized nor the bank branch skips
//! diffusion entirely.

use crate::bank::{build_bank, generate_normals, MemoryBank};
use crate::config::RunConfig;
use crate::customization::{customize, pretrain_base, CustomizeConfig, ReferenceSet};
use crate::dataset::{load_category, CategoryData};
use crate::denoiser::Denoiser;
use crate::encoder::{encode_texts, ImageEncoder, RefEncoder, RefEncoderConfig, TextFeatures};
use crate::error::{Error, Result};
use crate::personalization::personalize;
use crate::prompts::{Polarity, PromptCatalog};
use crate::schedule::NoiseSchedule;
use crate::scorer::{score_bank, score_personalized, score_text};
use crate::util::{derive_seed, hash_bytes_u64, rng_from_seed, ContentHasher};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

/// Which scoring branches participate in the fused score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchMask {
    pub p: bool,
    pub n: bool,
    pub text: bool,
}

impl BranchMask {
    pub const FULL: BranchMask = BranchMask {
        p: true,
        n: true,
        text: true,
    };

    /// The six useful non-empty masks, single branches first.
    pub fn ablation_masks() -> [BranchMask; 6] {
        [
            BranchMask { p: false, n: false, text: true },
            BranchMask { p: false, n: true, text: false },
            BranchMask { p: true, n: false, text: false },
            BranchMask { p: false, n: true, text: true },
            BranchMask { p: true, n: false, text: true },
            BranchMask { p: true, n: true, text: true },
        ]
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.p {
            parts.push("P");
        }
        if self.n {
            parts.push("N");
        }
        if self.text {
            parts.push("text");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    fn needs_model(&self) -> bool {
        self.p || self.n
    }
}

/// One scored query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub label: bool,
    pub a_score: f64,
}

/// Result of one evaluation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub dataset_id: String,
    pub shots: usize,
    pub seed: u64,
    pub auroc: f64,
    pub auprc: f64,
    pub per_query: Vec<QueryRecord>,
    pub branch_mask: BranchMask,
    /// Hash of the customized checkpoint driving this episode, when one was
    /// needed.
    pub checkpoint_hash: Option<String>,
    /// Mean per-query wall-clock in milliseconds (only with `timing`).
    pub timing_ms: Option<f64>,
}

impl EpisodeResult {
    /// Canonical serialized bytes for determinism comparisons.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("episode result serializes")
    }
}

/// AUROC by the rank statistic: the probability that a random positive
/// outscores a random negative, ties counted half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "auroc",
            expected: scores.len().to_string(),
            actual: labels.len().to_string(),
        });
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Average ranks across tie groups (1-based ranks).
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(l, _)| **l)
        .map(|(_, r)| *r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Area under the precision-recall step curve with a descending-score
/// sweep and no interpolation.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "auprc",
            expected: scores.len().to_string(),
            actual: labels.len().to_string(),
        });
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if labels[idx] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(area)
}

/// Everything an episode needs beyond the raw test images.
struct EpisodeArtifacts {
    refs: ReferenceSet,
    model: Option<Denoiser>,
    bank: Option<MemoryBank>,
    text: Option<TextFeatures>,
    encoder: RefEncoder,
    catalog: PromptCatalog,
    checkpoint_hash: Option<String>,
}

fn cached_or_build(cache_path: Option<std::path::PathBuf>, build: impl FnOnce() -> Result<Denoiser>) -> Result<Denoiser> {
    if let Some(path) = &cache_path {
        if path.exists() {
            return Denoiser::load_checkpoint(path);
        }
    }
    let model = build()?;
    if let Some(path) = &cache_path {
        model.save_checkpoint(path)?;
    }
    Ok(model)
}

/// Seed of the internal pretraining corpus.
const BASE_CORPUS_SEED: u64 = 0xBA5E;
/// Images per texture family in the pretraining corpus.
const BASE_CORPUS_PER_FAMILY: usize = 20;

/// The generic pretraining corpus: a procedural mixture over all texture
/// families at the requested shape, independent of any user dataset.
pub fn internal_base_corpus(shape: (usize, usize, usize)) -> Result<Vec<crate::img::Image>> {
    let (h, w, c) = shape;
    let mut corpus = Vec::new();
    for family in crate::synth::TextureFamily::all() {
        let spec = crate::synth::SyntheticSpec::new(
            family,
            (h, w),
            crate::synth::DefectKind::all().to_vec(),
            0.06,
            BASE_CORPUS_SEED,
        )?;
        for i in 0..BASE_CORPUS_PER_FAMILY {
            let img = crate::synth::make_normal(&spec, i as u64);
            if c == 1 {
                corpus.push(img);
            } else {
                let lum = img.luminance();
                corpus.push(crate::img::Image::from_fn(h, w, c, |y, x, _| lum[(y, x)])?);
            }
        }
    }
    Ok(corpus)
}

/// Train (or load from cache) the generic base prior for an image shape.
/// The base depends only on the shape and training knobs, so one model
/// serves every category and seed.
pub fn base_model_for(shape: (usize, usize, usize), config: &RunConfig) -> Result<Denoiser> {
    let key = {
        let mut h = ContentHasher::new("base-cache");
        h.update(&(shape.0 as u64).to_le_bytes());
        h.update(&(shape.1 as u64).to_le_bytes());
        h.update(&(shape.2 as u64).to_le_bytes());
        h.update(config.artifact_hash().as_bytes());
        h.finish_hex()
    };
    let cache_path = config.cache_dir.as_ref().map(|d| d.join(format!("base_{key}.ckpt")));
    cached_or_build(cache_path, || {
        let corpus = internal_base_corpus(shape)?;
        let sched = NoiseSchedule::from_params(config.schedule)?;
        pretrain_base(
            &corpus,
            crate::prompts::EMBED_DIM,
            config.train.base_channels,
            config.train.temb_dim,
            sched,
            config.train.base_epochs,
            config.train.base_learning_rate,
            derive_seed(BASE_CORPUS_SEED, "pretrain", hash_bytes_u64(key.as_bytes())),
        )
    })
}

/// Sample k references deterministically from the training pool.
pub fn sample_references(category: &CategoryData, k: usize, seed: u64) -> Result<ReferenceSet> {
    if category.train_normal.len() < k {
        return Err(Error::InsufficientData {
            what: "train/good images",
            needed: k,
            available: category.train_normal.len(),
        });
    }
    let mut rng = rng_from_seed(derive_seed(seed, "refs", 0));
    let mut indices: Vec<usize> = (0..category.train_normal.len()).collect();
    indices.shuffle(&mut rng);
    let images = indices[..k]
        .iter()
        .map(|&i| category.train_normal[i].1.clone())
        .collect();
    ReferenceSet::new(category.name.clone(), images)
}

fn prepare_artifacts(
    category: &CategoryData,
    k: usize,
    seed: u64,
    config: &RunConfig,
    need: BranchMask,
) -> Result<EpisodeArtifacts> {
    let catalog = PromptCatalog::builtin(&category.name);
    let refs = sample_references(category, k, seed)?;
    let channels = refs.image_shape().2;
    let encoder = RefEncoder::new(RefEncoderConfig::with_levels(
        config.encoder.levels,
        config.encoder.dim,
        channels,
        config.encoder.seed,
    ))?;

    let model = if need.needs_model() {
        let base = base_model_for(refs.image_shape(), config)?;
        let cust_cfg = CustomizeConfig {
            per_image: config.train.per_image,
            prior_count: (config.train.prior_count > 0).then_some(config.train.prior_count),
            epochs: config.train.customize_epochs,
            learning_rate: config.train.customize_learning_rate,
        };
        let key = {
            let mut h = ContentHasher::new("customize-cache");
            h.update(base.model_hash().as_bytes());
            for img in &refs.images {
                h.update(&img.content_hash().to_le_bytes());
            }
            h.update(refs.object_name.as_bytes());
            h.update(config.artifact_hash().as_bytes());
            h.update(&seed.to_le_bytes());
            h.finish_hex()
        };
        let cache_path = config.cache_dir.as_ref().map(|d| d.join(format!("cust_{key}.ckpt")));
        Some(cached_or_build(cache_path, || {
            customize(&base, &refs, &catalog, &cust_cfg, derive_seed(seed, "customize", 0))
        })?)
    } else {
        None
    };

    let bank = if need.n {
        let model = model.as_ref().expect("bank requires the model");
        if config.bank_capacity < k {
            return Err(Error::InvalidParameter {
                name: "bank_capacity",
                reason: format!("capacity {} below shot count {k}", config.bank_capacity),
            });
        }
        let generated = generate_normals(
            model,
            &catalog,
            config.bank_capacity.saturating_sub(k),
            &refs,
            config.t_ratio_bank,
            derive_seed(seed, "bank", 0),
        )?;
        Some(build_bank(&refs.images, &generated, &encoder, config.bank_capacity)?)
    } else {
        None
    };

    let text = if need.text {
        Some(encode_texts(
            &catalog.render_prompts(Polarity::Normal),
            &catalog.render_prompts(Polarity::Abnormal),
            config.encoder.dim,
        )?)
    } else {
        None
    };

    let checkpoint_hash = model.as_ref().map(|m| m.model_hash());
    Ok(EpisodeArtifacts {
        refs,
        model,
        bank,
        text,
        encoder,
        catalog,
        checkpoint_hash,
    })
}

/// Raw branch scores for one query.
#[derive(Debug, Clone)]
struct QueryScores {
    query_id: String,
    label: bool,
    s_p: f64,
    s_n: f64,
    s_text: f64,
    elapsed_ms: f64,
}

fn score_queries(
    category: &CategoryData,
    artifacts: &EpisodeArtifacts,
    seed: u64,
    config: &RunConfig,
    need: BranchMask,
) -> Result<Vec<QueryScores>> {
    let _ = &artifacts.refs;
    category
        .test
        .par_iter()
        .map(|sample| {
            let start = Instant::now();
            let fq = artifacts.encoder.encode_image(&sample.image)?;
            let mut s_p = 0.0;
            if need.p {
                let model = artifacts.model.as_ref().expect("p branch requires the model");
                let q_seed = derive_seed(seed, "query", hash_bytes_u64(sample.id.as_bytes()));
                let personalized =
                    personalize(&sample.image, model, &artifacts.catalog, config.t_ratio, q_seed)?;
                let fp = artifacts.encoder.encode_image(&personalized.personalized)?;
                s_p = score_personalized(&fq, &fp)?;
            }
            let mut s_n = 0.0;
            if need.n {
                s_n = score_bank(&fq, artifacts.bank.as_ref().expect("n branch requires the bank"))?;
            }
            let mut s_text = 0.0;
            if need.text {
                s_text = score_text(
                    &fq.global_vec,
                    artifacts.text.as_ref().expect("text branch requires text features"),
                    config.temperature,
                )?;
            }
            Ok(QueryScores {
                query_id: sample.id.clone(),
                label: sample.label,
                s_p,
                s_n,
                s_text,
                elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
            })
        })
        .collect()
}

fn assemble_result(
    dataset_id: &str,
    shots: usize,
    seed: u64,
    scores: &[QueryScores],
    mask: BranchMask,
    config: &RunConfig,
    checkpoint_hash: Option<String>,
) -> Result<EpisodeResult> {
    let per_query: Vec<QueryRecord> = scores
        .iter()
        .map(|q| QueryRecord {
            query_id: q.query_id.clone(),
            label: q.label,
            a_score: crate::scorer::combine(
                if mask.p { q.s_p } else { 0.0 },
                if mask.n { q.s_n } else { 0.0 },
                if mask.text { q.s_text } else { 0.0 },
                config.alpha,
                config.beta,
            ),
        })
        .collect();
    let values: Vec<f64> = per_query.iter().map(|q| q.a_score).collect();
    let labels: Vec<bool> = per_query.iter().map(|q| q.label).collect();
    let timing_ms = config
        .timing
        .then(|| scores.iter().map(|q| q.elapsed_ms).sum::<f64>() / scores.len().max(1) as f64);
    Ok(EpisodeResult {
        dataset_id: dataset_id.to_string(),
        shots,
        seed,
        auroc: auroc(&values, &labels)?,
        auprc: auprc(&values, &labels)?,
        per_query,
        branch_mask: mask,
        checkpoint_hash,
        timing_ms,
    })
}

/// Run one episode on a category directory.
pub fn run_episode(
    dataset: &Path,
    k: usize,
    seed: u64,
    config: &RunConfig,
    mask: BranchMask,
) -> Result<EpisodeResult> {
    config.validate()?;
    let category = load_category(dataset)?;
    run_episode_loaded(&category, k, seed, config, mask)
}

/// Episode on an already-loaded category (saves repeated directory reads).
pub fn run_episode_loaded(
    category: &CategoryData,
    k: usize,
    seed: u64,
    config: &RunConfig,
    mask: BranchMask,
) -> Result<EpisodeResult> {
    if !(mask.p || mask.n || mask.text) {
        return Err(Error::InvalidParameter {
            name: "branch_mask",
            reason: "at least one branch must be enabled".into(),
        });
    }
    let artifacts = prepare_artifacts(category, k, seed, config, mask)?;
    let scores = score_queries(category, &artifacts, seed, config, mask)?;
    assemble_result(
        &category.name,
        k,
        seed,
        &scores,
        mask,
        config,
        artifacts.checkpoint_hash.clone(),
    )
}

/// Run all six ablation masks for each seed, sharing the customized model,
/// bank, and per-query branch scores within a seed.
pub fn ablation_suite(dataset: &Path, k: usize, seeds: &[u64], config: &RunConfig) -> Result<Vec<EpisodeResult>> {
    config.validate()?;
    let category = load_category(dataset)?;
    ablation_suite_loaded(&category, k, seeds, config)
}

pub fn ablation_suite_loaded(
    category: &CategoryData,
    k: usize,
    seeds: &[u64],
    config: &RunConfig,
) -> Result<Vec<EpisodeResult>> {
    let mut out = Vec::with_capacity(6 * seeds.len());
    for &seed in seeds {
        let artifacts = prepare_artifacts(category, k, seed, config, BranchMask::FULL)?;
        let scores = score_queries(category, &artifacts, seed, config, BranchMask::FULL)?;
        for mask in BranchMask::ablation_masks() {
            out.push(assemble_result(
                &category.name,
                k,
                seed,
                &scores,
                mask,
                config,
                artifacts.checkpoint_hash.clone(),
            )?);
        }
    }
    Ok(out)
}

/// Mean and (population) standard deviation of a metric over episodes.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn auroc_handles_perfect_and_degenerate_cases() {
        let labels = [false, false, true, true];
        assert_abs_diff_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(auroc(&[0.5, 0.5, 0.5, 0.5], &labels).unwrap(), 0.5, epsilon = 1e-12);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn auroc_counts_pairs_like_the_hand_example() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [false, false, true, true];
        assert_abs_diff_eq!(auroc(&scores, &labels).unwrap(), 0.75, epsilon = 1e-12);
    }

    #[test]
    fn auroc_is_invariant_under_monotone_transforms_and_reflects_negation() {
        let scores = [0.3, 1.2, 0.7, 2.5, 0.9, 0.1];
        let labels = [false, true, false, true, true, false];
        let base = auroc(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
        assert_abs_diff_eq!(auroc(&warped, &labels).unwrap(), base, epsilon = 1e-12);
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        assert_abs_diff_eq!(auroc(&negated, &labels).unwrap() + base, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn auprc_closed_forms() {
        let labels = [false, false, true, true];
        assert_abs_diff_eq!(auprc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0, epsilon = 1e-12);
        // Single positive ranked last among N = 4.
        let labels2 = [false, false, false, true];
        assert_abs_diff_eq!(
            auprc(&[0.9, 0.8, 0.7, 0.1], &labels2).unwrap(),
            0.25,
            epsilon = 1e-12
        );
    }

    #[test]
    fn auprc_matches_brute_force_threshold_sweep() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [false, false, true, true];
        let fast = auprc(&scores, &labels).unwrap();

        // Exhaustive sweep over unique thresholds, descending.
        let mut uniq: Vec<f64> = scores.to_vec();
        uniq.sort_by(|a, b| b.partial_cmp(a).unwrap());
        uniq.dedup();
        let n_pos = labels.iter().filter(|l| **l).count() as f64;
        let mut prev_recall = 0.0;
        let mut area = 0.0;
        for &threshold in &uniq {
            let mut tp = 0.0;
            let mut fp = 0.0;
            for (s, l) in scores.iter().zip(&labels) {
                if *s >= threshold {
                    if *l {
                        tp += 1.0;
                    } else {
                        fp += 1.0;
                    }
                }
            }
            let recall = tp / n_pos;
            let precision = tp / (tp + fp);
            area += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        assert_abs_diff_eq!(fast, area, epsilon = 1e-12);
    }

    #[test]
    fn branch_mask_labels_and_ablation_set() {
        let masks = BranchMask::ablation_masks();
        assert_eq!(masks.len(), 6);
        assert_eq!(masks[0].label(), "text");
        assert_eq!(masks[5].label(), "P+N+text");
        let labels: std::collections::HashSet<String> = masks.iter().map(|m| m.label()).collect();
        assert_eq!(labels.len(), 6, "masks must be distinct");
    }

    #[test]
    fn mean_std_basic() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_abs_diff_eq!(m, 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s, (1.25f64).sqrt(), epsilon = 1e-12);
    }
}

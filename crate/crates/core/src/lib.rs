//! Few-shot anomaly detection built on a small conditional diffusion model.
//!
//! The pipeline: customize the model on a handful of normal references,
//! transform each query image one-to-normal under automatically selected
//! prompts, and fuse three contrastive comparisons (personalized image,
//! anomaly-free memory bank, text prompts) into an anomaly score. A
//! synthetic-defect benchmark and AUROC/AUPRC evaluation close the loop.

pub mod bank;
pub mod config;
pub mod container;
pub mod customization;
pub mod dataset;
pub mod denoiser;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod img;
pub mod nn;
pub mod personalization;
pub mod prompts;
pub mod schedule;
pub mod scorer;
pub mod synth;
pub mod util;

pub use bank::{build_bank, generate_normals, MemoryBank, Provenance};
pub use config::RunConfig;
pub use customization::{augment, customize, pretrain_base, CustomizeConfig, ReferenceSet};
pub use eval::{ablation_suite, auprc, auroc, run_episode, BranchMask, EpisodeResult};
pub use denoiser::{denoising_loss, train, DemoPair, Denoiser};
pub use encoder::{encode_texts, FeatureStack, ImageEncoder, RefEncoder, RefEncoderConfig, TextFeatures};
pub use error::{Error, Result};
pub use img::{Image, Latent};
pub use personalization::{personalize, ssim, PersonalizationResult};
pub use prompts::{embed_prompt, ConditionEmbedding, Polarity, PromptCatalog};
pub use schedule::{denoise_from, forward_noise, sample_noise, NoiseSchedule, ScheduleParams, X0Model};
pub use scorer::{anomaly_map, combine, score_bank, score_personalized, score_text, AnomalyReport};

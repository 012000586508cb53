//! Customizing the base model on few-shot normal references: augmentation,
//! demonstration building with a prior-preservation set, and the fine-tune
//! loop that yields the anomaly-free customized model.

use crate::denoiser::{denoising_loss, train, DemoPair, Denoiser};
use crate::error::{Error, Result};
use crate::img::Image;
use crate::prompts::{embed_prompt_dim, PromptCatalog};
use crate::schedule::{denoise_from, sample_noise, NoiseSchedule};
use crate::util::{derive_seed, rng_from_seed};
use rand::Rng;

/// The k-shot normal references for one object category.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub object_name: String,
    pub images: Vec<Image>,
}

impl ReferenceSet {
    pub fn new(object_name: impl Into<String>, images: Vec<Image>) -> Result<Self> {
        if images.is_empty() || images.len() > 64 {
            return Err(Error::InvalidParameter {
                name: "references",
                reason: format!("need between 1 and 64 references, got {}", images.len()),
            });
        }
        let shape = images[0].shape();
        if images.iter().any(|img| img.shape() != shape) {
            return Err(Error::ShapeMismatch {
                context: "reference set",
                expected: format!("{shape:?}"),
                actual: "mixed shapes".into(),
            });
        }
        Ok(Self {
            object_name: object_name.into(),
            images,
        })
    }

    pub fn shot_count(&self) -> usize {
        self.images.len()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.images[0].shape()
    }
}

/// Training knobs for customization.
#[derive(Debug, Clone, PartialEq)]
pub struct CustomizeConfig {
    /// Extra augmented copies per reference.
    pub per_image: usize,
    /// Size of the prior-preservation set; `None` means twice the demo count.
    pub prior_count: Option<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for CustomizeConfig {
    fn default() -> Self {
        Self {
            per_image: 4,
            prior_count: None,
            epochs: 60,
            learning_rate: 0.05,
        }
    }
}

/// One sampled augmentation: flip, quarter rotation, brightness jitter.
fn augment_one(img: &Image, seed: u64) -> Image {
    let mut rng = rng_from_seed(seed);
    let flip: bool = rng.random_bool(0.5);
    let square = img.height() == img.width();
    let turns = if square {
        rng.random_range(0..4usize)
    } else {
        2 * rng.random_range(0..2usize)
    };
    let factor = 0.9 + 0.2 * rng.random::<f64>();
    let mut out = if flip { img.flip_horizontal() } else { img.clone() };
    out = out.rotate(turns).expect("rotation validated by squareness");
    out.scale_brightness(factor)
}

/// Expand references with label-free augmentations; originals come first for
/// each reference, so the output holds k*(per_image+1) images.
pub fn augment(refs: &ReferenceSet, per_image: usize, rng_seed: u64) -> Vec<Image> {
    let mut out = Vec::with_capacity(refs.images.len() * (per_image + 1));
    for (i, img) in refs.images.iter().enumerate() {
        out.push(img.clone());
        for j in 0..per_image {
            let seed = derive_seed(rng_seed, "augment", (i * 1_000_003 + j) as u64);
            out.push(augment_one(img, seed));
        }
    }
    out
}

/// Sample one image from the model by running the full reverse chain from
/// pure noise under the given prompt.
pub fn sample_from_model(model: &Denoiser, prompt: &str, rng_seed: u64) -> Result<Image> {
    let sched = model.schedule().clone();
    let t_start = sched.num_steps() - 1;
    let init = sample_noise(model.image_shape(), derive_seed(rng_seed, "sample-init", 0));
    let cond = embed_prompt_dim(prompt, model.cond_dim())?;
    denoise_from(&init, t_start, &cond, model, &sched, derive_seed(rng_seed, "sample-chain", 0))
}

/// Build the demonstration set (augmented references with the canonical
/// prompt) and the prior-preservation set (base-model samples under the
/// class-generic prompt).
pub fn build_demos(
    refs: &ReferenceSet,
    catalog: &PromptCatalog,
    per_image: usize,
    prior_count: usize,
    base_model: &Denoiser,
    rng_seed: u64,
) -> Result<(Vec<DemoPair>, Vec<DemoPair>)> {
    let prompt = catalog.customization_prompt();
    let demos = augment(refs, per_image, derive_seed(rng_seed, "demos", 0))
        .into_iter()
        .map(|img| DemoPair::new(img, prompt.clone()))
        .collect::<Result<Vec<_>>>()?;

    let generic = PromptCatalog::class_generic_prompt();
    let mut prior_demos = Vec::with_capacity(prior_count);
    for i in 0..prior_count {
        let img = sample_from_model(base_model, &generic, derive_seed(rng_seed, "prior", i as u64))?;
        prior_demos.push(DemoPair::new(img, generic.clone())?);
    }
    Ok((demos, prior_demos))
}

/// Fine-tune the base model on one category's references. The base is left
/// untouched; the returned model carries its loss history and must end with
/// a lower demo loss than it started with.
pub fn customize(
    base_model: &Denoiser,
    refs: &ReferenceSet,
    catalog: &PromptCatalog,
    config: &CustomizeConfig,
    rng_seed: u64,
) -> Result<Denoiser> {
    if refs.image_shape() != base_model.image_shape() {
        return Err(Error::ShapeMismatch {
            context: "customize references",
            expected: format!("{:?}", base_model.image_shape()),
            actual: format!("{:?}", refs.image_shape()),
        });
    }
    let (demos, prior_demos) = build_demos(
        refs,
        catalog,
        config.per_image,
        config
            .prior_count
            .unwrap_or(2 * refs.shot_count() * (config.per_image + 1)),
        base_model,
        derive_seed(rng_seed, "build-demos", 0),
    )?;

    // Paired multi-draw probe: the same (t, eps) draws before and after
    // training, averaged over several probe seeds to beat draw variance.
    let sched = base_model.schedule().clone();
    let probe = |model: &Denoiser| -> Result<f64> {
        let mut total = 0.0;
        for r in 0..8u64 {
            total += denoising_loss(model, &demos, &[], &sched, derive_seed(rng_seed, "loss-probe", r))?;
        }
        Ok(total / 8.0)
    };
    let initial = probe(base_model)?;

    let (mut trained, history) = train(
        base_model,
        &demos,
        &prior_demos,
        config.epochs,
        config.learning_rate,
        derive_seed(rng_seed, "train", 0),
    )?;
    let final_loss = probe(&trained)?;
    if final_loss >= initial {
        return Err(Error::Divergence {
            epoch: config.epochs,
            loss: final_loss,
        });
    }
    trained.meta.kind = "customized".into();
    trained.meta.object_name = Some(refs.object_name.clone());
    trained.meta.loss_history = history;
    Ok(trained)
}

/// Train the generative prior on a corpus of normal images under the
/// class-generic prompt. This stands in for an external pretrained backbone
/// at desk scale.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_base(
    corpus: &[Image],
    cond_dim: usize,
    base_channels: usize,
    temb_dim: usize,
    schedule: NoiseSchedule,
    epochs: usize,
    learning_rate: f64,
    rng_seed: u64,
) -> Result<Denoiser> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("pretraining corpus"));
    }
    let shape = corpus[0].shape();
    if corpus.iter().any(|img| img.shape() != shape) {
        return Err(Error::ShapeMismatch {
            context: "pretraining corpus",
            expected: format!("{shape:?}"),
            actual: "mixed shapes".into(),
        });
    }
    let fresh = Denoiser::new(
        shape,
        cond_dim,
        base_channels,
        temb_dim,
        schedule,
        derive_seed(rng_seed, "init", 0),
    )?;
    let generic = PromptCatalog::class_generic_prompt();
    let demos = corpus
        .iter()
        .map(|img| DemoPair::new(img.clone(), generic.clone()))
        .collect::<Result<Vec<_>>>()?;
    let (mut base, history) = train(
        &fresh,
        &demos,
        &[],
        epochs,
        learning_rate,
        derive_seed(rng_seed, "train", 0),
    )?;
    base.meta.kind = "base".into();
    base.meta.loss_history = history;
    Ok(base)
}

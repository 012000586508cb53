//! Noise schedule, forward noising, and the reverse ancestral sampler.

use crate::error::{Error, Result};
use crate::img::{Image, Latent};
use crate::prompts::ConditionEmbedding;
use crate::util::rng_from_seed;
use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Per-step beta/alpha tables with the cumulative alpha product.
///
/// Index `t` counts applied noising steps, so `alpha_bar(t)` is the product
/// of `alphas[0..=t]` and is strictly decreasing in `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// The (num_steps, beta range) triple a schedule is built from; stored in
/// checkpoints so a model always travels with its schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        // Desk-scale default: T=200 with a beta range wide enough that the
        // full forward pass erases nearly all of the input.
        Self {
            num_steps: 200,
            beta_start: 1e-4,
            beta_end: 0.05,
        }
    }
}

impl NoiseSchedule {
    /// Build a linear-beta schedule with `num_steps` steps and betas
    /// interpolated from `beta_start` to `beta_end` inclusive.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidParameter {
                name: "num_steps",
                reason: "must be at least 1".into(),
            });
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidParameter {
                name: "beta_range",
                reason: format!("need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"),
            });
        }
        let betas: Vec<f64> = if num_steps == 1 {
            vec![beta_start]
        } else {
            (0..num_steps)
                .map(|t| {
                    let frac = t as f64 / (num_steps - 1) as f64;
                    beta_start + (beta_end - beta_start) * frac
                })
                .collect()
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(num_steps);
        let mut product = 1.0;
        for a in &alphas {
            product *= a;
            alpha_bars.push(product);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn from_params(params: ScheduleParams) -> Result<Self> {
        Self::linear(params.num_steps, params.beta_start, params.beta_end)
    }

    pub fn params(&self) -> ScheduleParams {
        ScheduleParams {
            num_steps: self.num_steps(),
            beta_start: self.betas[0],
            beta_end: *self.betas.last().unwrap(),
        }
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.num_steps() {
            return Err(Error::StepOutOfRange {
                t,
                num_steps: self.num_steps(),
            });
        }
        Ok(())
    }
}

/// Apply `t+1` noising steps in closed form:
/// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
///
/// The output is a latent and may leave [0, 1].
pub fn forward_noise(x0: &Image, t: usize, eps: &Latent, sched: &NoiseSchedule) -> Result<Latent> {
    sched.check_step(t)?;
    if eps.dim() != x0.data().dim() {
        return Err(Error::ShapeMismatch {
            context: "forward_noise",
            expected: format!("{:?}", x0.data().dim()),
            actual: format!("{:?}", eps.dim()),
        });
    }
    let ab = sched.alpha_bar(t);
    let signal = ab.sqrt();
    let noise = (1.0 - ab).sqrt();
    Ok(x0.data() * signal + eps * noise)
}

/// Standard-normal noise field with the given shape, drawn from a seeded
/// stream.
pub fn sample_noise(shape: (usize, usize, usize), seed: u64) -> Latent {
    let mut rng = rng_from_seed(seed);
    let mut out = Array3::zeros(shape);
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    out
}

/// Anything that predicts the clean image from a noised latent under a
/// condition. Implemented by the trainable denoiser and by test oracles.
pub trait X0Model {
    fn image_shape(&self) -> (usize, usize, usize);
    fn cond_dim(&self) -> usize;
    fn predict_x0_latent(&self, x_t: &Latent, t: usize, cond: &ConditionEmbedding) -> Result<Latent>;
}

/// Run the reverse ancestral chain from `t_start` down to 0 and clamp the
/// result into image range.
///
/// Each step forms the DDPM posterior mean from the model's x0 prediction
/// and adds `sqrt(beta_t)` noise except at the final step. With
/// `t_start == 0` the chain is empty and the input comes back clamped,
/// untouched by the model.
pub fn denoise_from<M: X0Model + ?Sized>(
    x_t: &Latent,
    t_start: usize,
    cond: &ConditionEmbedding,
    model: &M,
    sched: &NoiseSchedule,
    rng_seed: u64,
) -> Result<Image> {
    sched.check_step(t_start)?;
    if x_t.dim() != model.image_shape() {
        return Err(Error::ShapeMismatch {
            context: "denoise_from",
            expected: format!("{:?}", model.image_shape()),
            actual: format!("{:?}", x_t.dim()),
        });
    }
    if cond.dim() != model.cond_dim() {
        return Err(Error::ShapeMismatch {
            context: "denoise_from condition",
            expected: model.cond_dim().to_string(),
            actual: cond.dim().to_string(),
        });
    }
    let mut rng = rng_from_seed(rng_seed);
    let mut x = x_t.clone();
    for t in (1..=t_start).rev() {
        let x0_pred = model.predict_x0_latent(&x, t, cond)?;
        let ab_t = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar(t - 1);
        let beta_t = sched.beta(t);
        let alpha_t = sched.alpha(t);
        // Posterior mean coefficients for q(x_{t-1} | x_t, x0).
        let coef_x0 = ab_prev.sqrt() * beta_t / (1.0 - ab_t);
        let coef_xt = alpha_t.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let mut next = &x0_pred * coef_x0 + &x * coef_xt;
        if t > 1 {
            let sigma = beta_t.sqrt();
            for v in next.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += sigma * z;
            }
        }
        x = next;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            epoch: t_start,
            loss: f64::NAN,
        });
    }
    Image::from_latent(x)
}

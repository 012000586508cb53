//! One-to-normal personalization: reconstruct the query under each normal
//! prompt, pick the prompt whose reconstruction is structurally closest to
//! the query, and emit the final personalized image.

use crate::error::{Error, Result};
use crate::img::Image;
use crate::prompts::{embed_prompt_dim, PromptCatalog};
use crate::schedule::{denoise_from, forward_noise, sample_noise, NoiseSchedule, X0Model};
use crate::util::derive_seed;
use ndarray::Array2;

const SSIM_WINDOW: usize = 8;
const SSIM_STRIDE: usize = 4;
const SSIM_C1: f64 = 1e-4; // (0.01)^2 on the [0,1] range
const SSIM_C2: f64 = 9e-4; // (0.03)^2

/// Output of [`personalize`]: the transformed query plus the selection
/// record.
#[derive(Debug, Clone)]
pub struct PersonalizationResult {
    pub personalized: Image,
    pub chosen_prompt: String,
    pub candidate_scores: Vec<(String, f64)>,
    pub t_used: usize,
}

fn window_ssim(a: &Array2<f64>, b: &Array2<f64>, y0: usize, x0: usize, wh: usize, ww: usize) -> f64 {
    let n = (wh * ww) as f64;
    let (mut sa, mut sb) = (0.0, 0.0);
    for y in y0..y0 + wh {
        for x in x0..x0 + ww {
            sa += a[(y, x)];
            sb += b[(y, x)];
        }
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for y in y0..y0 + wh {
        for x in x0..x0 + ww {
            let da = a[(y, x)] - ma;
            let db = b[(y, x)] - mb;
            va += da * da;
            vb += db * db;
            cov += da * db;
        }
    }
    va /= n;
    vb /= n;
    cov /= n;
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// Structural similarity in [-1, 1]: 8x8 windows at stride 4, averaged.
/// RGB inputs are compared on their luminance plane. Images smaller than a
/// window are compared as a single full-image window.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            context: "ssim",
            expected: format!("{:?}", a.shape()),
            actual: format!("{:?}", b.shape()),
        });
    }
    let la = a.luminance();
    let lb = b.luminance();
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Ok(window_ssim(&la, &lb, 0, 0, h, w));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut y = 0;
    while y + SSIM_WINDOW <= h {
        let mut x = 0;
        while x + SSIM_WINDOW <= w {
            total += window_ssim(&la, &lb, y, x, SSIM_WINDOW, SSIM_WINDOW);
            count += 1;
            x += SSIM_STRIDE;
        }
        y += SSIM_STRIDE;
    }
    Ok(total / count as f64)
}

/// The partial-noising depth for a ratio: round(t_ratio * T) clipped into
/// [1, T-1].
pub fn t_for_ratio(t_ratio: f64, num_steps: usize) -> Result<usize> {
    if !(t_ratio > 0.0 && t_ratio < 1.0) {
        return Err(Error::InvalidParameter {
            name: "t_ratio",
            reason: format!("must lie strictly inside (0, 1), got {t_ratio}"),
        });
    }
    if num_steps < 2 {
        return Err(Error::InvalidParameter {
            name: "num_steps",
            reason: "partial noising needs a schedule with at least 2 steps".into(),
        });
    }
    let t = (t_ratio * num_steps as f64).round() as usize;
    Ok(t.clamp(1, num_steps - 1))
}

/// Reconstruct the query once per prompt. All candidates share one noised
/// latent and one reverse-noise stream, so they differ only through the
/// conditioning.
pub fn reconstruct_candidates<M: X0Model + ?Sized>(
    x_q: &Image,
    prompts: &[String],
    model: &M,
    sched: &NoiseSchedule,
    t_ratio: f64,
    rng_seed: u64,
) -> Result<Vec<Image>> {
    if prompts.is_empty() {
        return Err(Error::EmptyInput("prompts"));
    }
    let t_used = t_for_ratio(t_ratio, sched.num_steps())?;
    let eps = sample_noise(x_q.shape(), derive_seed(rng_seed, "candidate-eps", 0));
    let x_t = forward_noise(x_q, t_used, &eps, sched)?;
    let chain_seed = derive_seed(rng_seed, "candidate-chain", 0);
    let mut out = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let cond = embed_prompt_dim(prompt, model.cond_dim())?;
        out.push(denoise_from(&x_t, t_used, &cond, model, sched, chain_seed)?);
    }
    Ok(out)
}

/// Pick the prompt whose candidate maximizes SSIM against the query; ties
/// break toward the lowest index.
pub fn select_prompt(x_q: &Image, prompts: &[String], candidates: &[Image]) -> Result<(String, usize)> {
    if prompts.is_empty() || candidates.is_empty() {
        return Err(Error::EmptyInput("prompt candidates"));
    }
    if prompts.len() != candidates.len() {
        return Err(Error::ShapeMismatch {
            context: "select_prompt",
            expected: prompts.len().to_string(),
            actual: candidates.len().to_string(),
        });
    }
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (i, candidate) in candidates.iter().enumerate() {
        let score = ssim(x_q, candidate)?;
        if score > best_score {
            best_score = score;
            best = i;
        }
    }
    Ok((prompts[best].clone(), best))
}

/// Full personalization against an explicit prompt pool and schedule.
/// Candidate generation reuses one latent; the final pass draws fresh noise
/// from the same run seed.
pub fn personalize_with<M: X0Model + ?Sized>(
    x_q: &Image,
    prompts: &[String],
    model: &M,
    sched: &NoiseSchedule,
    t_ratio: f64,
    rng_seed: u64,
) -> Result<PersonalizationResult> {
    let t_used = t_for_ratio(t_ratio, sched.num_steps())?;
    let candidates = reconstruct_candidates(x_q, prompts, model, sched, t_ratio, rng_seed)?;
    let mut candidate_scores = Vec::with_capacity(prompts.len());
    for (prompt, candidate) in prompts.iter().zip(&candidates) {
        candidate_scores.push((prompt.clone(), ssim(x_q, candidate)?));
    }
    let (chosen_prompt, index) = select_prompt(x_q, prompts, &candidates)?;

    let eps = sample_noise(x_q.shape(), derive_seed(rng_seed, "final-eps", 0));
    let x_t = forward_noise(x_q, t_used, &eps, sched)?;
    let cond = embed_prompt_dim(&prompts[index], model.cond_dim())?;
    let personalized = denoise_from(&x_t, t_used, &cond, model, sched, derive_seed(rng_seed, "final-chain", 0))?;

    Ok(PersonalizationResult {
        personalized,
        chosen_prompt,
        candidate_scores,
        t_used,
    })
}

/// One-to-normal personalization of a query under the catalog's normal-state
/// prompt pool (default `t_ratio` 0.3 comes from the run configuration).
pub fn personalize(
    x_q: &Image,
    model: &crate::denoiser::Denoiser,
    catalog: &PromptCatalog,
    t_ratio: f64,
    rng_seed: u64,
) -> Result<PersonalizationResult> {
    let prompts = catalog.personalization_prompts();
    let sched = model.schedule().clone();
    personalize_with(x_q, &prompts, model, &sched, t_ratio, rng_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{train, DemoPair, Denoiser};
    use crate::img::Latent;
    use crate::prompts::ConditionEmbedding;
    use approx::assert_abs_diff_eq;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn ssim_of_image_with_itself_is_one() {
        let img = Image::from_fn(16, 16, 1, |y, x, _| ((y * 16 + x) % 11) as f64 / 11.0).unwrap();
        assert_abs_diff_eq!(ssim(&img, &img).unwrap(), 1.0, epsilon = 1e-12);
        let rgb = Image::from_fn(16, 16, 3, |y, x, c| ((y + x + c) % 5) as f64 / 5.0).unwrap();
        assert_abs_diff_eq!(ssim(&rgb, &rgb).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ssim_of_two_constants_matches_hand_evaluation() {
        let a = Image::constant(16, 16, 1, 0.2).unwrap();
        let b = Image::constant(16, 16, 1, 0.8).unwrap();
        // Constant windows: variances and covariance vanish.
        let expected = ((2.0 * 0.2 * 0.8 + SSIM_C1) * SSIM_C2)
            / ((0.04 + 0.64 + SSIM_C1) * SSIM_C2);
        let got = ssim(&a, &b).unwrap();
        assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(got, 0.4707, epsilon = 1e-3);
    }

    #[test]
    fn ssim_of_inverted_checkerboard_is_negative() {
        let a = Image::from_fn(16, 16, 1, |y, x, _| ((y + x) % 2) as f64).unwrap();
        let b = Image::from_fn(16, 16, 1, |y, x, _| 1.0 - ((y + x) % 2) as f64).unwrap();
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn ssim_rejects_shape_mismatch() {
        let a = Image::zeros(8, 8, 1).unwrap();
        let b = Image::zeros(8, 9, 1).unwrap();
        assert!(ssim(&a, &b).is_err());
    }

    #[test]
    fn ssim_handles_images_smaller_than_a_window() {
        let a = Image::constant(4, 4, 1, 0.5).unwrap();
        assert_abs_diff_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn t_for_ratio_clips_into_valid_range() {
        assert_eq!(t_for_ratio(0.3, 200).unwrap(), 60);
        assert_eq!(t_for_ratio(0.001, 200).unwrap(), 1);
        assert_eq!(t_for_ratio(0.999, 200).unwrap(), 199);
        assert!(t_for_ratio(0.0, 200).is_err());
        assert!(t_for_ratio(1.0, 200).is_err());
    }

    fn blend(base: &Image, noise_seed: u64, weight: f64) -> Image {
        let noise = sample_noise(base.shape(), noise_seed);
        let mixed = base.data() * (1.0 - weight) + noise.mapv(|v| 0.5 + 0.25 * v) * weight;
        Image::from_latent(mixed).unwrap()
    }

    #[test]
    fn select_prompt_prefers_the_exact_copy() {
        let x_q = Image::from_fn(16, 16, 1, |y, x, _| ((y * 3 + x) % 9) as f64 / 9.0).unwrap();
        let prompts: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let candidates = vec![blend(&x_q, 1, 0.8), x_q.clone(), blend(&x_q, 2, 0.6)];
        let (chosen, idx) = select_prompt(&x_q, &prompts, &candidates).unwrap();
        assert_eq!(idx, 1);
        assert_eq!(chosen, "b");
    }

    #[test]
    fn select_prompt_breaks_ties_toward_lowest_index() {
        let x_q = Image::constant(8, 8, 1, 0.5).unwrap();
        let prompts: Vec<String> = ["p0", "p1", "p2"].iter().map(|s| s.to_string()).collect();
        let candidates = vec![x_q.clone(), x_q.clone(), x_q.clone()];
        let (_, idx) = select_prompt(&x_q, &prompts, &candidates).unwrap();
        assert_eq!(idx, 0);
    }

    #[test]
    fn select_prompt_ranking_matches_the_ssim_oracle() {
        let x_q = Image::from_fn(16, 16, 1, |y, x, _| ((y ^ x) % 7) as f64 / 7.0).unwrap();
        let prompts: Vec<String> = ["p0", "p1", "p2"].iter().map(|s| s.to_string()).collect();
        let candidates = vec![blend(&x_q, 3, 0.7), blend(&x_q, 4, 0.05), blend(&x_q, 5, 0.4)];
        let scores: Vec<f64> = candidates.iter().map(|c| ssim(&x_q, c).unwrap()).collect();
        let oracle_best = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let (_, idx) = select_prompt(&x_q, &prompts, &candidates).unwrap();
        assert_eq!(idx, oracle_best);
        assert_eq!(idx, 1, "lightest perturbation should win");
    }

    #[test]
    fn select_prompt_rejects_misaligned_lists() {
        let x_q = Image::zeros(8, 8, 1).unwrap();
        let prompts = vec!["a".to_string()];
        assert!(select_prompt(&x_q, &prompts, &[]).is_err());
    }

    #[test]
    fn selection_is_invariant_under_affine_rescaling_of_scores() {
        // argmax over SSIM equals argmax over a*SSIM+b for a > 0; verified on
        // explicit score lists rather than images.
        let scores = [0.31, 0.87, 0.49, 0.86];
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let rescaled: Vec<f64> = scores.iter().map(|s| 3.7 * s + 0.2).collect();
        assert_eq!(argmax(&scores), argmax(&rescaled));
    }

    fn trained_constant_model() -> (Denoiser, Image) {
        let sched = NoiseSchedule::linear(20, 1e-4, 0.2).unwrap();
        let model = Denoiser::new((8, 8, 1), 16, 3, 8, sched, 11).unwrap();
        let target = Image::constant(8, 8, 1, 0.6).unwrap();
        let demo = DemoPair::new(target.clone(), "a photo of normal widget").unwrap();
        let (trained, _) = train(&model, &[demo], &[], 1500, 0.1, 5).unwrap();
        (trained, target)
    }

    #[test]
    fn near_zero_t_ratio_keeps_candidates_close_to_the_query() {
        let (model, target) = trained_constant_model();
        let prompts = vec![
            "a photo of a widget without flaw.".to_string(),
            "a photo of a widget without defect.".to_string(),
        ];
        let sched = model.schedule().clone();
        let candidates = reconstruct_candidates(&target, &prompts, &model, &sched, 0.01, 9).unwrap();
        assert_eq!(candidates.len(), 2);
        for c in &candidates {
            let linf = c
                .data()
                .iter()
                .zip(target.data().iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0_f64, f64::max);
            assert!(linf < 0.1, "candidate drifted by {linf}");
        }
    }

    #[test]
    fn single_prompt_yields_single_candidate() {
        let (model, target) = trained_constant_model();
        let sched = model.schedule().clone();
        let prompts = vec!["a photo of a widget without flaw.".to_string()];
        let candidates = reconstruct_candidates(&target, &prompts, &model, &sched, 0.3, 9).unwrap();
        assert_eq!(candidates.len(), 1);
    }

    #[test]
    fn reconstruction_is_deterministic_per_seed() {
        let (model, target) = trained_constant_model();
        let sched = model.schedule().clone();
        let prompts = vec![
            "a photo of a widget without flaw.".to_string(),
            "a photo of a widget without damage.".to_string(),
        ];
        let a = reconstruct_candidates(&target, &prompts, &model, &sched, 0.3, 9).unwrap();
        let b = reconstruct_candidates(&target, &prompts, &model, &sched, 0.3, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn personalize_records_scores_and_the_argmax_prompt() {
        let (model, target) = trained_constant_model();
        let catalog = PromptCatalog::builtin("widget");
        let result = personalize(&target, &model, &catalog, 0.3, 21).unwrap();
        assert_eq!(result.candidate_scores.len(), 3);
        assert_eq!(result.t_used, 6); // round(0.3 * 20)
        let best = result
            .candidate_scores
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        assert_eq!(result.chosen_prompt, best.0);

        let again = personalize(&target, &model, &catalog, 0.3, 21).unwrap();
        assert_eq!(result.personalized, again.personalized);
        assert_eq!(result.chosen_prompt, again.chosen_prompt);
    }

    /// Counting oracle: tracks reverse-chain invocations through predict
    /// calls at a fixed t marker.
    struct CountingModel {
        calls: AtomicUsize,
    }

    impl X0Model for CountingModel {
        fn image_shape(&self) -> (usize, usize, usize) {
            (8, 8, 1)
        }
        fn cond_dim(&self) -> usize {
            16
        }
        fn predict_x0_latent(&self, x: &Latent, _t: usize, _c: &ConditionEmbedding) -> crate::error::Result<Latent> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            Ok(x.clone())
        }
    }

    #[test]
    fn chain_invocations_scale_linearly_with_prompt_count() {
        let sched = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let x_q = Image::constant(8, 8, 1, 0.5).unwrap();
        for n_prompts in [1usize, 3, 5] {
            let prompts: Vec<String> = (0..n_prompts).map(|i| format!("prompt {i}")).collect();
            let model = CountingModel {
                calls: AtomicUsize::new(0),
            };
            let t_used = t_for_ratio(0.5, 10).unwrap();
            personalize_with(&x_q, &prompts, &model, &sched, 0.5, 3).unwrap();
            // Each chain from t_used makes t_used predict calls; candidates
            // plus one final pass.
            assert_eq!(model.calls.load(Ordering::Relaxed), (n_prompts + 1) * t_used);
        }
    }
}

//! The conditional denoising network, its training objective, and
//! checkpoint I/O.
//!
//! The network predicts the clean image directly (an x0-predictor): a three
//! scale convolutional encoder-decoder with skip connections, a sinusoidal
//! timestep embedding, and the prompt embedding injected as a per-channel
//! shift at the bottleneck. Training minimizes the mean squared error of the
//! x0 prediction over a pooled set of demonstrations and prior-preservation
//! demonstrations, weighted equally.
//!
//! All forward/backward passes are hand-rolled f64 (see [`crate::nn`]), so
//! gradients can be checked against central finite differences.

use crate::container;
use crate::error::{Error, Result};
use crate::img::{Image, Latent};
use crate::nn::{silu, silu_backward, timestep_embedding, upsample2, upsample2_backward, Conv2d, Linear};
use crate::prompts::{embed_prompt_dim, embed_table_hash, ConditionEmbedding};
use crate::schedule::{forward_noise, NoiseSchedule, ScheduleParams, X0Model};
use crate::util::{derive_seed, hash_bytes_hex, rng_from_seed, ContentHasher};
use ndarray::{Array1, Array3, ArrayD, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

const CHECKPOINT_VERSION: u32 = 1;
const MOMENTUM: f64 = 0.9;

/// One training demonstration: an image paired with its prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoPair {
    pub image: Image,
    pub prompt: String,
}

impl DemoPair {
    pub fn new(image: Image, prompt: impl Into<String>) -> Result<Self> {
        let prompt = prompt.into();
        if prompt.trim().is_empty() {
            return Err(Error::EmptyInput("demo prompt"));
        }
        Ok(Self { image, prompt })
    }

    /// Content hash over exact pixel bits and prompt text; keys the per-item
    /// (t, eps) draws so the loss is invariant to batch order.
    pub fn content_hash(&self) -> u64 {
        let mut h = ContentHasher::new("demo-pair");
        h.update(&self.image.content_hash().to_le_bytes());
        h.update(self.prompt.as_bytes());
        h.finish_u64()
    }
}

/// All trainable arrays, in a fixed block order.
#[derive(Debug, Clone, PartialEq)]
struct NetParams {
    conv_in: Conv2d,
    down1: Conv2d,
    down2: Conv2d,
    t_lin: Linear,
    c_lin: Linear,
    mid: Conv2d,
    up1: Conv2d,
    up2: Conv2d,
    conv_out: Conv2d,
}

impl NetParams {
    fn seeded(channels: usize, base: usize, cond_dim: usize, temb_dim: usize, seed: u64) -> Self {
        let s = |i: u64| derive_seed(seed, "init", i);
        Self {
            conv_in: Conv2d::new_seeded(base, channels, 1.0, s(0)),
            down1: Conv2d::new_seeded(2 * base, base, 1.0, s(1)),
            down2: Conv2d::new_seeded(4 * base, 2 * base, 1.0, s(2)),
            t_lin: Linear::new_seeded(4 * base, temb_dim, s(3)),
            c_lin: Linear::new_seeded(4 * base, cond_dim, s(4)),
            mid: Conv2d::new_seeded(4 * base, 4 * base, 1.0, s(5)),
            up1: Conv2d::new_seeded(2 * base, 4 * base, 1.0, s(6)),
            up2: Conv2d::new_seeded(base, 2 * base, 1.0, s(7)),
            conv_out: Conv2d::new_seeded(channels, base, 0.2, s(8)),
        }
    }

    fn zeros(channels: usize, base: usize, cond_dim: usize, temb_dim: usize) -> Self {
        Self {
            conv_in: Conv2d::zeros(base, channels),
            down1: Conv2d::zeros(2 * base, base),
            down2: Conv2d::zeros(4 * base, 2 * base),
            t_lin: Linear {
                w: ndarray::Array2::zeros((4 * base, temb_dim)),
                b: Array1::zeros(4 * base),
            },
            c_lin: Linear {
                w: ndarray::Array2::zeros((4 * base, cond_dim)),
                b: Array1::zeros(4 * base),
            },
            mid: Conv2d::zeros(4 * base, 4 * base),
            up1: Conv2d::zeros(2 * base, 4 * base),
            up2: Conv2d::zeros(base, 2 * base),
            conv_out: Conv2d::zeros(channels, base),
        }
    }

    fn block_slices(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("conv_in.w", self.conv_in.w.as_slice().unwrap()),
            ("conv_in.b", self.conv_in.b.as_slice().unwrap()),
            ("down1.w", self.down1.w.as_slice().unwrap()),
            ("down1.b", self.down1.b.as_slice().unwrap()),
            ("down2.w", self.down2.w.as_slice().unwrap()),
            ("down2.b", self.down2.b.as_slice().unwrap()),
            ("t_lin.w", self.t_lin.w.as_slice().unwrap()),
            ("t_lin.b", self.t_lin.b.as_slice().unwrap()),
            ("c_lin.w", self.c_lin.w.as_slice().unwrap()),
            ("c_lin.b", self.c_lin.b.as_slice().unwrap()),
            ("mid.w", self.mid.w.as_slice().unwrap()),
            ("mid.b", self.mid.b.as_slice().unwrap()),
            ("up1.w", self.up1.w.as_slice().unwrap()),
            ("up1.b", self.up1.b.as_slice().unwrap()),
            ("up2.w", self.up2.w.as_slice().unwrap()),
            ("up2.b", self.up2.b.as_slice().unwrap()),
            ("conv_out.w", self.conv_out.w.as_slice().unwrap()),
            ("conv_out.b", self.conv_out.b.as_slice().unwrap()),
        ]
    }

    fn block_slices_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("conv_in.w", self.conv_in.w.as_slice_mut().unwrap()),
            ("conv_in.b", self.conv_in.b.as_slice_mut().unwrap()),
            ("down1.w", self.down1.w.as_slice_mut().unwrap()),
            ("down1.b", self.down1.b.as_slice_mut().unwrap()),
            ("down2.w", self.down2.w.as_slice_mut().unwrap()),
            ("down2.b", self.down2.b.as_slice_mut().unwrap()),
            ("t_lin.w", self.t_lin.w.as_slice_mut().unwrap()),
            ("t_lin.b", self.t_lin.b.as_slice_mut().unwrap()),
            ("c_lin.w", self.c_lin.w.as_slice_mut().unwrap()),
            ("c_lin.b", self.c_lin.b.as_slice_mut().unwrap()),
            ("mid.w", self.mid.w.as_slice_mut().unwrap()),
            ("mid.b", self.mid.b.as_slice_mut().unwrap()),
            ("up1.w", self.up1.w.as_slice_mut().unwrap()),
            ("up1.b", self.up1.b.as_slice_mut().unwrap()),
            ("up2.w", self.up2.w.as_slice_mut().unwrap()),
            ("up2.b", self.up2.b.as_slice_mut().unwrap()),
            ("conv_out.w", self.conv_out.w.as_slice_mut().unwrap()),
            ("conv_out.b", self.conv_out.b.as_slice_mut().unwrap()),
        ]
    }

    fn named_arrays(&self) -> Vec<(String, ArrayD<f64>)> {
        vec![
            ("conv_in.w".into(), self.conv_in.w.clone().into_dyn()),
            ("conv_in.b".into(), self.conv_in.b.clone().into_dyn()),
            ("down1.w".into(), self.down1.w.clone().into_dyn()),
            ("down1.b".into(), self.down1.b.clone().into_dyn()),
            ("down2.w".into(), self.down2.w.clone().into_dyn()),
            ("down2.b".into(), self.down2.b.clone().into_dyn()),
            ("t_lin.w".into(), self.t_lin.w.clone().into_dyn()),
            ("t_lin.b".into(), self.t_lin.b.clone().into_dyn()),
            ("c_lin.w".into(), self.c_lin.w.clone().into_dyn()),
            ("c_lin.b".into(), self.c_lin.b.clone().into_dyn()),
            ("mid.w".into(), self.mid.w.clone().into_dyn()),
            ("mid.b".into(), self.mid.b.clone().into_dyn()),
            ("up1.w".into(), self.up1.w.clone().into_dyn()),
            ("up1.b".into(), self.up1.b.clone().into_dyn()),
            ("up2.w".into(), self.up2.w.clone().into_dyn()),
            ("up2.b".into(), self.up2.b.clone().into_dyn()),
            ("conv_out.w".into(), self.conv_out.w.clone().into_dyn()),
            ("conv_out.b".into(), self.conv_out.b.clone().into_dyn()),
        ]
    }

    fn fill_from_arrays(&mut self, arrays: &[(String, ArrayD<f64>)]) -> Result<()> {
        let expected = self.named_arrays();
        if arrays.len() != expected.len() {
            return Err(Error::Format {
                what: "checkpoint",
                reason: format!("expected {} parameter blocks, found {}", expected.len(), arrays.len()),
            });
        }
        for (name, template) in &expected {
            let found = arrays
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Format {
                    what: "checkpoint",
                    reason: format!("missing parameter block `{name}`"),
                })?;
            if found.1.shape() != template.shape() {
                return Err(Error::Format {
                    what: "checkpoint",
                    reason: format!(
                        "block `{name}` has shape {:?}, expected {:?}",
                        found.1.shape(),
                        template.shape()
                    ),
                });
            }
        }
        for (name, slot) in self.block_slices_mut() {
            let (_, arr) = arrays.iter().find(|(n, _)| n == name).unwrap();
            let flat = arr.as_standard_layout();
            slot.copy_from_slice(flat.as_slice().unwrap());
        }
        Ok(())
    }

    fn for_each_pair_mut(&mut self, other: &Self, mut f: impl FnMut(&mut f64, f64)) {
        let theirs = other.block_slices();
        for ((_, mine), (_, other_slice)) in self.block_slices_mut().into_iter().zip(theirs) {
            for (m, o) in mine.iter_mut().zip(other_slice.iter()) {
                f(m, *o);
            }
        }
    }

    fn add(&mut self, other: &Self) {
        self.for_each_pair_mut(other, |m, o| *m += o);
    }

    fn scale(&mut self, s: f64) {
        for (_, slice) in self.block_slices_mut() {
            for v in slice {
                *v *= s;
            }
        }
    }
}

/// Intermediate activations kept for the backward pass.
struct Caches {
    x: Array3<f64>,
    a1_pre: Array3<f64>,
    a1: Array3<f64>,
    a2_pre: Array3<f64>,
    a2: Array3<f64>,
    a3_pre: Array3<f64>,
    f: Array3<f64>,
    m_pre: Array3<f64>,
    u1_in: Array3<f64>,
    u1_sum: Array3<f64>,
    u2_in: Array3<f64>,
    u2_sum: Array3<f64>,
    u2: Array3<f64>,
    temb: Array1<f64>,
    cond: Array1<f64>,
}

/// Metadata carried inside a checkpoint next to the arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelMeta {
    pub kind: String,
    pub object_name: Option<String>,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    kind: String,
    object_name: Option<String>,
    image_shape: (usize, usize, usize),
    cond_dim: usize,
    base_channels: usize,
    temb_dim: usize,
    schedule: ScheduleParams,
    embed_table_hash: String,
    loss_history: Vec<f64>,
}

/// The conditional x0-predicting denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    params: NetParams,
    image_shape: (usize, usize, usize),
    cond_dim: usize,
    base_channels: usize,
    temb_dim: usize,
    schedule: NoiseSchedule,
    pub meta: ModelMeta,
}

impl Denoiser {
    /// Freshly initialized model for the given image shape.
    ///
    /// Height and width must be multiples of 4 (two downsampling stages).
    pub fn new(
        image_shape: (usize, usize, usize),
        cond_dim: usize,
        base_channels: usize,
        temb_dim: usize,
        schedule: NoiseSchedule,
        init_seed: u64,
    ) -> Result<Self> {
        let (h, w, c) = image_shape;
        if h % 4 != 0 || w % 4 != 0 || h < 4 || w < 4 {
            return Err(Error::InvalidParameter {
                name: "image_shape",
                reason: format!("height and width must be multiples of 4 and >= 4, got {h}x{w}"),
            });
        }
        if c != 1 && c != 3 {
            return Err(Error::InvalidParameter {
                name: "image_shape",
                reason: format!("channels must be 1 or 3, got {c}"),
            });
        }
        if cond_dim == 0 || base_channels == 0 {
            return Err(Error::InvalidParameter {
                name: "model_dims",
                reason: "cond_dim and base_channels must be positive".into(),
            });
        }
        if temb_dim % 2 != 0 || temb_dim == 0 {
            return Err(Error::InvalidParameter {
                name: "temb_dim",
                reason: "timestep embedding width must be even and positive".into(),
            });
        }
        Ok(Self {
            params: NetParams::seeded(c, base_channels, cond_dim, temb_dim, init_seed),
            image_shape,
            cond_dim,
            base_channels,
            temb_dim,
            schedule,
            meta: ModelMeta {
                kind: "fresh".into(),
                object_name: None,
                loss_history: Vec::new(),
            },
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.image_shape
    }

    pub fn base_channels(&self) -> usize {
        self.base_channels
    }

    fn check_inputs(&self, x_t: &Latent, cond: &ConditionEmbedding) -> Result<()> {
        if x_t.dim() != self.image_shape {
            return Err(Error::ShapeMismatch {
                context: "predict_x0",
                expected: format!("{:?}", self.image_shape),
                actual: format!("{:?}", x_t.dim()),
            });
        }
        if cond.dim() != self.cond_dim {
            return Err(Error::ShapeMismatch {
                context: "predict_x0 condition",
                expected: self.cond_dim.to_string(),
                actual: cond.dim().to_string(),
            });
        }
        Ok(())
    }

    /// Predict the clean image from a noised latent (unclamped output).
    pub fn predict_x0(&self, x_t: &Latent, t: usize, cond: &ConditionEmbedding) -> Result<Latent> {
        self.check_inputs(x_t, cond)?;
        let (y, _) = self.forward(x_t, t, cond);
        Ok(y)
    }

    fn forward(&self, x: &Latent, t: usize, cond: &ConditionEmbedding) -> (Array3<f64>, Caches) {
        let p = &self.params;
        let temb = timestep_embedding(t, self.temb_dim);
        let cond_arr = Array1::from(cond.vector().to_vec());

        let a1_pre = p.conv_in.forward(x, 1);
        let a1 = silu(&a1_pre);
        let a2_pre = p.down1.forward(&a1, 2);
        let a2 = silu(&a2_pre);
        let a3_pre = p.down2.forward(&a2, 2);
        let a3 = silu(&a3_pre);

        let shift = p.t_lin.forward(&temb) + p.c_lin.forward(&cond_arr);
        let mut f = a3;
        for mut lane in f.lanes_mut(Axis(2)) {
            lane += &shift;
        }

        let m_pre = p.mid.forward(&f, 1);
        let m = silu(&m_pre);

        let u1_in = upsample2(&m);
        let u1_sum = p.up1.forward(&u1_in, 1) + &a2;
        let u1 = silu(&u1_sum);

        let u2_in = upsample2(&u1);
        let u2_sum = p.up2.forward(&u2_in, 1) + &a1;
        let u2 = silu(&u2_sum);

        let y = p.conv_out.forward(&u2, 1);
        let caches = Caches {
            x: x.clone(),
            a1_pre,
            a1,
            a2_pre,
            a2,
            a3_pre,
            f,
            m_pre,
            u1_in,
            u1_sum,
            u2_in,
            u2_sum,
            u2,
            temb,
            cond: cond_arr,
        };
        (y, caches)
    }

    /// Backward pass; returns parameter gradients shaped like the params.
    fn backward(&self, c: &Caches, dy: &Array3<f64>) -> NetParams {
        let p = &self.params;
        let (ic, bc) = (self.image_shape.2, self.base_channels);
        let mut g = NetParams::zeros(ic, bc, self.cond_dim, self.temb_dim);

        let (du2, dw_out, db_out) = p.conv_out.backward(&c.u2, dy, 1);
        g.conv_out.w = dw_out;
        g.conv_out.b = db_out;

        let du2_sum = silu_backward(&c.u2_sum, &du2);
        // du2_sum splits into the up2 path and the a1 skip.
        let (du2_in, dw_up2, db_up2) = p.up2.backward(&c.u2_in, &du2_sum, 1);
        g.up2.w = dw_up2;
        g.up2.b = db_up2;
        let du1 = upsample2_backward(&du2_in);

        let du1_sum = silu_backward(&c.u1_sum, &du1);
        let (du1_in, dw_up1, db_up1) = p.up1.backward(&c.u1_in, &du1_sum, 1);
        g.up1.w = dw_up1;
        g.up1.b = db_up1;
        let dm = upsample2_backward(&du1_in);

        let dm_pre = silu_backward(&c.m_pre, &dm);
        let (df, dw_mid, db_mid) = p.mid.backward(&c.f, &dm_pre, 1);
        g.mid.w = dw_mid;
        g.mid.b = db_mid;

        // FiLM shift: gradient sums over the spatial grid.
        let dshift = df.sum_axis(Axis(0)).sum_axis(Axis(0));
        let (_, dw_t, db_t) = p.t_lin.backward(&c.temb, &dshift);
        g.t_lin.w = dw_t;
        g.t_lin.b = db_t;
        let (_, dw_c, db_c) = p.c_lin.backward(&c.cond, &dshift);
        g.c_lin.w = dw_c;
        g.c_lin.b = db_c;

        let da3_pre = silu_backward(&c.a3_pre, &df);
        let (da2_conv, dw_d2, db_d2) = p.down2.backward(&c.a2, &da3_pre, 2);
        g.down2.w = dw_d2;
        g.down2.b = db_d2;

        let da2_total = da2_conv + &du1_sum; // conv path + skip into u1_sum
        let da2_pre = silu_backward(&c.a2_pre, &da2_total);
        let (da1_conv, dw_d1, db_d1) = p.down1.backward(&c.a1, &da2_pre, 2);
        g.down1.w = dw_d1;
        g.down1.b = db_d1;

        let da1_total = da1_conv + &du2_sum; // conv path + skip into u2_sum
        let da1_pre = silu_backward(&c.a1_pre, &da1_total);
        let (_, dw_in, db_in) = p.conv_in.backward(&c.x, &da1_pre, 1);
        g.conv_in.w = dw_in;
        g.conv_in.b = db_in;

        g
    }

    /// Names of the parameter blocks, in storage order.
    pub fn param_block_names(&self) -> Vec<&'static str> {
        self.params.block_slices().into_iter().map(|(n, _)| n).collect()
    }

    pub fn param_block_len(&self, name: &str) -> Option<usize> {
        self.params
            .block_slices()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, s)| s.len())
    }

    /// Copy of the model with one parameter scalar shifted by `delta`
    /// (used by finite-difference checks).
    pub fn with_perturbed_param(&self, block: &str, index: usize, delta: f64) -> Result<Denoiser> {
        let mut out = self.clone();
        let mut found = false;
        for (name, slice) in out.params.block_slices_mut() {
            if name == block {
                if index >= slice.len() {
                    return Err(Error::InvalidParameter {
                        name: "index",
                        reason: format!("block `{block}` has {} entries", slice.len()),
                    });
                }
                slice[index] += delta;
                found = true;
            }
        }
        if !found {
            return Err(Error::InvalidParameter {
                name: "block",
                reason: format!("unknown parameter block `{block}`"),
            });
        }
        Ok(out)
    }

    /// Zero every parameter (test helper: the zero model predicts all-zeros).
    pub fn zeroed(&self) -> Denoiser {
        let mut out = self.clone();
        for (_, slice) in out.params.block_slices_mut() {
            for v in slice {
                *v = 0.0;
            }
        }
        out
    }

    /// Serialize to container bytes (manifest + named arrays), bit-exact.
    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            kind: self.meta.kind.clone(),
            object_name: self.meta.object_name.clone(),
            image_shape: self.image_shape,
            cond_dim: self.cond_dim,
            base_channels: self.base_channels,
            temb_dim: self.temb_dim,
            schedule: self.schedule.params(),
            embed_table_hash: embed_table_hash(self.cond_dim),
            loss_history: self.meta.loss_history.clone(),
        };
        let manifest_bytes = serde_json::to_vec(&manifest).expect("manifest serializes");
        container::to_bytes(&manifest_bytes, &self.params.named_arrays())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Denoiser> {
        let (manifest_bytes, arrays) = container::from_bytes(bytes)?;
        let manifest: CheckpointManifest =
            serde_json::from_slice(&manifest_bytes).map_err(|e| Error::Format {
                what: "checkpoint",
                reason: e.to_string(),
            })?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                what: "checkpoint",
                reason: format!("unsupported format version {}", manifest.format_version),
            });
        }
        if manifest.embed_table_hash != embed_table_hash(manifest.cond_dim) {
            return Err(Error::Format {
                what: "checkpoint",
                reason: "prompt-embedding table hash does not match this build".into(),
            });
        }
        let schedule = NoiseSchedule::from_params(manifest.schedule)?;
        let mut model = Denoiser::new(
            manifest.image_shape,
            manifest.cond_dim,
            manifest.base_channels,
            manifest.temb_dim,
            schedule,
            0,
        )?;
        model.params.fill_from_arrays(&arrays)?;
        model.meta = ModelMeta {
            kind: manifest.kind,
            object_name: manifest.object_name,
            loss_history: manifest.loss_history,
        };
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        container::write_atomic(path, &self.to_bytes())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Denoiser> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Denoiser::from_bytes(&bytes)
    }

    /// Content hash of the full checkpoint (params + manifest).
    pub fn model_hash(&self) -> String {
        hash_bytes_hex(&self.to_bytes())
    }
}

impl X0Model for Denoiser {
    fn image_shape(&self) -> (usize, usize, usize) {
        self.image_shape
    }
    fn cond_dim(&self) -> usize {
        self.cond_dim
    }
    fn predict_x0_latent(&self, x_t: &Latent, t: usize, cond: &ConditionEmbedding) -> Result<Latent> {
        self.predict_x0(x_t, t, cond)
    }
}

/// Draw the per-item (t, eps) pair from a seeded stream: first the step,
/// then the noise field.
fn draw_t_eps(seed: u64, num_steps: usize, shape: (usize, usize, usize)) -> (usize, Latent) {
    let mut rng = rng_from_seed(seed);
    let t = rng.random_range(0..num_steps);
    let mut eps = Array3::zeros(shape);
    for v in eps.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    (t, eps)
}

/// Pool demos and prior demos into a canonical content-sorted order.
fn pooled_sorted<'a>(demos: &'a [DemoPair], prior_demos: &'a [DemoPair]) -> Vec<(u64, &'a DemoPair)> {
    let mut items: Vec<(u64, &DemoPair)> = demos
        .iter()
        .chain(prior_demos.iter())
        .map(|d| (d.content_hash(), d))
        .collect();
    items.sort_by_key(|(h, _)| *h);
    items
}

/// Mean squared error of the x0 prediction over the pooled demo set, with
/// one fresh (t, eps) draw per item keyed by the item's content hash.
///
/// `prior_demos` may be empty, in which case the objective reduces to the
/// plain denoising term.
pub fn denoising_loss<M: X0Model + ?Sized>(
    model: &M,
    demos: &[DemoPair],
    prior_demos: &[DemoPair],
    sched: &NoiseSchedule,
    rng_seed: u64,
) -> Result<f64> {
    if demos.is_empty() {
        return Err(Error::EmptyInput("demos"));
    }
    let items = pooled_sorted(demos, prior_demos);
    let mut total = 0.0;
    for (hash, demo) in &items {
        let seed = derive_seed(rng_seed, "loss-item", *hash);
        let (t, eps) = draw_t_eps(seed, sched.num_steps(), demo.image.shape());
        let x_t = forward_noise(&demo.image, t, &eps, sched)?;
        let cond = embed_prompt_dim(&demo.prompt, model.cond_dim())?;
        let pred = model.predict_x0_latent(&x_t, t, &cond)?;
        let resid = &pred - demo.image.data();
        total += resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64;
    }
    Ok(total / items.len() as f64)
}

/// Loss together with analytic parameter gradients, as named flat blocks.
/// Uses the same draws as [`denoising_loss`], so finite differences of that
/// function validate these gradients.
pub fn denoising_loss_and_grads(
    model: &Denoiser,
    demos: &[DemoPair],
    prior_demos: &[DemoPair],
    rng_seed: u64,
) -> Result<(f64, Vec<(&'static str, Vec<f64>)>)> {
    let (loss, grads) = loss_and_grads_internal(model, demos, prior_demos, rng_seed)?;
    let named = grads
        .block_slices()
        .into_iter()
        .map(|(n, s)| (n, s.to_vec()))
        .collect();
    Ok((loss, named))
}

fn loss_and_grads_internal(
    model: &Denoiser,
    demos: &[DemoPair],
    prior_demos: &[DemoPair],
    rng_seed: u64,
) -> Result<(f64, NetParams)> {
    if demos.is_empty() {
        return Err(Error::EmptyInput("demos"));
    }
    let sched = model.schedule.clone();
    let items = pooled_sorted(demos, prior_demos);
    let n = items.len() as f64;
    let (h, w, c) = model.image_shape;
    let numel = (h * w * c) as f64;

    let mut total = 0.0;
    let mut grads = NetParams::zeros(c, model.base_channels, model.cond_dim, model.temb_dim);
    for (hash, demo) in &items {
        if demo.image.shape() != model.image_shape {
            return Err(Error::ShapeMismatch {
                context: "train demo",
                expected: format!("{:?}", model.image_shape),
                actual: format!("{:?}", demo.image.shape()),
            });
        }
        let seed = derive_seed(rng_seed, "loss-item", *hash);
        let (t, eps) = draw_t_eps(seed, sched.num_steps(), demo.image.shape());
        let x_t = forward_noise(&demo.image, t, &eps, &sched)?;
        let cond = embed_prompt_dim(&demo.prompt, model.cond_dim)?;
        let (pred, caches) = model.forward(&x_t, t, &cond);
        let resid = &pred - demo.image.data();
        total += resid.iter().map(|r| r * r).sum::<f64>() / numel;
        let dpred = resid.mapv(|r| 2.0 * r / (numel * n));
        let item_grads = model.backward(&caches, &dpred);
        grads.add(&item_grads);
    }
    Ok((total / n, grads))
}

/// Train with full-batch gradient descent and momentum 0.9, returning the
/// updated model and the per-epoch mean loss history. The input model is
/// untouched.
pub fn train(
    model: &Denoiser,
    demos: &[DemoPair],
    prior_demos: &[DemoPair],
    epochs: usize,
    learning_rate: f64,
    rng_seed: u64,
) -> Result<(Denoiser, Vec<f64>)> {
    if epochs == 0 {
        return Err(Error::InvalidParameter {
            name: "epochs",
            reason: "must be at least 1".into(),
        });
    }
    if demos.is_empty() {
        return Err(Error::EmptyInput("demos"));
    }
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "learning_rate",
            reason: format!("must be positive and finite, got {learning_rate}"),
        });
    }

    let mut trained = model.clone();
    let mut velocity = NetParams::zeros(
        model.image_shape.2,
        model.base_channels,
        model.cond_dim,
        model.temb_dim,
    );
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let epoch_seed = derive_seed(rng_seed, "epoch", epoch as u64);
        let (loss, grads) = loss_and_grads_internal(&trained, demos, prior_demos, epoch_seed)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, loss });
        }
        velocity.for_each_pair_mut(&grads, |v, g| *v = MOMENTUM * *v + g);
        trained.params.for_each_pair_mut(&velocity, |p, v| *p -= learning_rate * v);
        history.push(loss);
    }
    trained.meta.loss_history = history.clone();
    Ok((trained, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::embed_prompt;
    use crate::schedule::sample_noise;

    fn tiny_model(seed: u64) -> Denoiser {
        let sched = NoiseSchedule::linear(8, 0.02, 0.2).unwrap();
        Denoiser::new((4, 4, 1), 8, 2, 4, sched, seed).unwrap()
    }

    fn full_cond() -> ConditionEmbedding {
        embed_prompt("a photo of an object").unwrap()
    }

    #[test]
    fn fresh_model_output_is_finite_and_shaped() {
        let sched = NoiseSchedule::linear(10, 0.01, 0.1).unwrap();
        let model = Denoiser::new((8, 8, 1), crate::prompts::EMBED_DIM, 3, 8, sched, 1).unwrap();
        let x = sample_noise((8, 8, 1), 2);
        let y = model.predict_x0(&x, 3, &full_cond()).unwrap();
        assert_eq!(y.dim(), (8, 8, 1));
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn predict_is_pure() {
        let model = tiny_model(3);
        let cond = embed_prompt_dim("a photo of an object", 8).unwrap();
        let x = sample_noise((4, 4, 1), 5);
        let a = model.predict_x0(&x, 2, &cond).unwrap();
        let b = model.predict_x0(&x, 2, &cond).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predict_rejects_bad_shapes() {
        let model = tiny_model(3);
        let cond = embed_prompt_dim("a photo of an object", 8).unwrap();
        assert!(model.predict_x0(&sample_noise((4, 2, 1), 5), 2, &cond).is_err());
        let bad_cond = embed_prompt_dim("a photo of an object", 9).unwrap();
        assert!(model.predict_x0(&sample_noise((4, 4, 1), 5), 2, &bad_cond).is_err());
    }

    #[test]
    fn invalid_model_dims_rejected() {
        let sched = NoiseSchedule::linear(8, 0.02, 0.2).unwrap();
        assert!(Denoiser::new((6, 6, 1), 8, 2, 4, sched.clone(), 0).is_err());
        assert!(Denoiser::new((8, 8, 2), 8, 2, 4, sched.clone(), 0).is_err());
        assert!(Denoiser::new((8, 8, 1), 8, 2, 3, sched, 0).is_err());
    }

    #[test]
    fn zero_model_all_ones_demo_gives_unit_loss() {
        let model = tiny_model(0).zeroed();
        let demo = DemoPair::new(Image::constant(4, 4, 1, 1.0).unwrap(), "a photo of an object").unwrap();
        let loss = denoising_loss(&model, &[demo], &[], &model.schedule().clone(), 11).unwrap();
        assert!((loss - 1.0).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn identity_oracle_with_near_unit_alpha_bar_has_near_zero_loss() {
        struct Identity;
        impl X0Model for Identity {
            fn image_shape(&self) -> (usize, usize, usize) {
                (4, 4, 1)
            }
            fn cond_dim(&self) -> usize {
                8
            }
            fn predict_x0_latent(&self, x: &Latent, _t: usize, _c: &ConditionEmbedding) -> Result<Latent> {
                Ok(x.clone())
            }
        }
        // Near-zero betas keep alpha_bar at 1 to machine precision, so the
        // noised latent equals x0 and the identity prediction is exact.
        let sched = NoiseSchedule::linear(8, 1e-15, 1e-15).unwrap();
        let demo = DemoPair::new(Image::constant(4, 4, 1, 0.7).unwrap(), "p").unwrap();
        let loss = denoising_loss(&Identity, &[demo], &[], &sched, 3).unwrap();
        assert!(loss < 1e-9, "loss {loss}");
    }

    #[test]
    fn loss_matches_straight_line_oracle() {
        let model = tiny_model(9);
        let mut demos = Vec::new();
        for i in 0..3 {
            let img = Image::from_fn(4, 4, 1, |y, x, _| ((y * 4 + x + i) % 7) as f64 / 7.0).unwrap();
            demos.push(DemoPair::new(img, format!("prompt number {i}")).unwrap());
        }
        let priors =
            vec![DemoPair::new(Image::constant(4, 4, 1, 0.25).unwrap(), "a photo of an object").unwrap()];
        let seed = 21;
        let fast = denoising_loss(&model, &demos, &priors, &model.schedule().clone(), seed).unwrap();

        // Straight-line reimplementation: iterate in raw order, no pooling
        // helper, explicit arithmetic.
        let mut all: Vec<&DemoPair> = demos.iter().chain(priors.iter()).collect();
        all.sort_by_key(|d| d.content_hash());
        let mut total = 0.0;
        for d in &all {
            let seed_i = derive_seed(seed, "loss-item", d.content_hash());
            let (t, eps) = draw_t_eps(seed_i, model.schedule().num_steps(), (4, 4, 1));
            let ab = model.schedule().alpha_bar(t);
            let mut x_t = Array3::<f64>::zeros((4, 4, 1));
            for y in 0..4 {
                for x in 0..4 {
                    x_t[(y, x, 0)] =
                        ab.sqrt() * d.image.data()[(y, x, 0)] + (1.0 - ab).sqrt() * eps[(y, x, 0)];
                }
            }
            let cond = embed_prompt_dim(&d.prompt, 8).unwrap();
            let pred = model.predict_x0(&x_t, t, &cond).unwrap();
            let mut sq = 0.0;
            for y in 0..4 {
                for x in 0..4 {
                    let r = pred[(y, x, 0)] - d.image.data()[(y, x, 0)];
                    sq += r * r;
                }
            }
            total += sq / 16.0;
        }
        let oracle = total / all.len() as f64;
        assert!((fast - oracle).abs() < 1e-6, "fast {fast} oracle {oracle}");
    }

    #[test]
    fn loss_is_invariant_to_batch_order() {
        let model = tiny_model(13);
        let mk = |v: f64, p: &str| DemoPair::new(Image::constant(4, 4, 1, v).unwrap(), p).unwrap();
        let a = vec![mk(0.1, "one"), mk(0.5, "two"), mk(0.9, "three")];
        let b = vec![a[2].clone(), a[0].clone(), a[1].clone()];
        let sched = model.schedule().clone();
        let la = denoising_loss(&model, &a, &[], &sched, 5).unwrap();
        let lb = denoising_loss(&model, &b, &[], &sched, 5).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
    }

    #[test]
    fn empty_demos_and_zero_epochs_rejected() {
        let model = tiny_model(1);
        let sched = model.schedule().clone();
        assert!(denoising_loss(&model, &[], &[], &sched, 0).is_err());
        let demo = DemoPair::new(Image::constant(4, 4, 1, 0.5).unwrap(), "p").unwrap();
        assert!(train(&model, &[demo], &[], 0, 0.1, 0).is_err());
    }

    #[test]
    fn empty_prompt_rejected() {
        assert!(DemoPair::new(Image::constant(4, 4, 1, 0.5).unwrap(), "  ").is_err());
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let model = tiny_model(17);
        let demos = vec![
            DemoPair::new(
                Image::from_fn(4, 4, 1, |y, x, _| ((y + x) % 3) as f64 / 3.0).unwrap(),
                "a photo of normal thing",
            )
            .unwrap(),
            DemoPair::new(Image::constant(4, 4, 1, 0.8).unwrap(), "a photo of an object").unwrap(),
        ];
        let seed = 7;
        let (_, grads) = denoising_loss_and_grads(&model, &demos, &[], seed).unwrap();
        let sched = model.schedule().clone();
        let h = 1e-4;
        let mut max_rel = 0.0_f64;
        for (block, g) in &grads {
            for idx in 0..g.len() {
                let plus = model.with_perturbed_param(block, idx, h).unwrap();
                let minus = model.with_perturbed_param(block, idx, -h).unwrap();
                let lp = denoising_loss(&plus, &demos, &[], &sched, seed).unwrap();
                let lm = denoising_loss(&minus, &demos, &[], &sched, seed).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let denom = g[idx].abs().max(fd.abs()).max(1e-6);
                max_rel = max_rel.max((g[idx] - fd).abs() / denom);
            }
        }
        assert!(max_rel < 1e-3, "max relative gradient error {max_rel}");
    }

    #[test]
    fn training_reduces_loss_on_a_constant_image() {
        let sched = NoiseSchedule::linear(16, 0.01, 0.25).unwrap();
        let model = Denoiser::new((16, 16, 1), 16, 3, 8, sched, 4).unwrap();
        let demo = DemoPair::new(Image::constant(16, 16, 1, 0.5).unwrap(), "a photo of an object").unwrap();
        let (_, history) = train(&model, &[demo], &[], 200, 0.05, 2).unwrap();
        assert!(
            history[199] < 0.1 * history[0],
            "first {} last {}",
            history[0],
            history[199]
        );
    }

    #[test]
    fn training_is_seed_reproducible() {
        let model = tiny_model(5);
        let demo = DemoPair::new(Image::constant(4, 4, 1, 0.3).unwrap(), "p").unwrap();
        let (m1, h1) = train(&model, &[demo.clone()], &[], 5, 0.05, 9).unwrap();
        let (m2, h2) = train(&model, &[demo], &[], 5, 0.05, 9).unwrap();
        assert_eq!(m1.to_bytes(), m2.to_bytes());
        assert_eq!(h1, h2);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(23);
        let demo = DemoPair::new(Image::constant(4, 4, 1, 0.4).unwrap(), "p").unwrap();
        let (trained, _) = train(&model, &[demo], &[], 3, 0.05, 1).unwrap();
        let path = dir.path().join("model.ckpt");
        trained.save_checkpoint(&path).unwrap();
        let loaded = Denoiser::load_checkpoint(&path).unwrap();
        assert_eq!(trained.to_bytes(), loaded.to_bytes());
        assert_eq!(trained.meta, loaded.meta);

        let x = sample_noise((4, 4, 1), 3);
        let cond = embed_prompt_dim("p", 8).unwrap();
        let a = trained.predict_x0(&x, 1, &cond).unwrap();
        let b = loaded.predict_x0(&x, 1, &cond).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overfit_single_constant_image_predicts_it_everywhere() {
        let sched = NoiseSchedule::linear(12, 0.02, 0.3).unwrap();
        let model = Denoiser::new((8, 8, 1), 16, 3, 8, sched, 6).unwrap();
        let target = Image::constant(8, 8, 1, 0.6).unwrap();
        let demo = DemoPair::new(target.clone(), "a photo of normal widget").unwrap();
        let (trained, _) = train(&model, &[demo], &[], 3000, 0.12, 3).unwrap();
        let cond = embed_prompt_dim("a photo of normal widget", 16).unwrap();
        // Arbitrary latents, arbitrary steps: prediction stays near target.
        for (i, t) in [(0u64, 1usize), (1, 5), (2, 11)] {
            let x_t = sample_noise((8, 8, 1), 100 + i);
            let pred = trained.predict_x0(&x_t, t, &cond).unwrap();
            let linf = pred
                .iter()
                .map(|v| (v - 0.6).abs())
                .fold(0.0_f64, f64::max);
            assert!(linf < 0.1, "t={t} L_inf={linf}");
        }
    }
}

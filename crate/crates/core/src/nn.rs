//! Minimal neural-net layers used by the denoiser: 3x3 convolutions
//! (im2col + GEMM), nearest-neighbor upsampling, SiLU, and dense layers.
//!
//! Everything is f64 and allocation-per-call; backward passes return fresh
//! gradient arrays. Activations use (H, W, C) layout.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::util::rng_from_seed;

/// 3x3 convolution with zero padding 1 and stride 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// Weights, shape (out_c, in_c, 3, 3).
    pub w: Array4<f64>,
    pub b: Array1<f64>,
}

fn out_len(n: usize, stride: usize) -> usize {
    (n + 2 - 3) / stride + 1
}

fn pad1(x: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let mut padded = Array3::zeros((h + 2, w + 2, c));
    padded
        .slice_mut(ndarray::s![1..h + 1, 1..w + 1, ..])
        .assign(x);
    padded
}

/// Gather 3x3 receptive fields into a (Ho*Wo, 9*Cin) matrix. Column order is
/// (ky, kx, ic) so each kernel tap occupies a contiguous Cin block.
fn im2col(padded: &Array3<f64>, ho: usize, wo: usize, stride: usize) -> Array2<f64> {
    let (_, _, cin) = padded.dim();
    let mut m = Array2::zeros((ho * wo, 9 * cin));
    let src = padded.as_slice().expect("standard layout");
    let (ph, pw) = (padded.dim().0, padded.dim().1);
    debug_assert_eq!(src.len(), ph * pw * cin);
    let dst = m.as_slice_mut().expect("standard layout");
    let row_len = 9 * cin;
    for oy in 0..ho {
        for ky in 0..3 {
            let sy = oy * stride + ky;
            for kx in 0..3 {
                let col0 = (ky * 3 + kx) * cin;
                for ox in 0..wo {
                    let sx = ox * stride + kx;
                    let s = (sy * pw + sx) * cin;
                    let d = (oy * wo + ox) * row_len + col0;
                    dst[d..d + cin].copy_from_slice(&src[s..s + cin]);
                }
            }
        }
    }
    m
}

/// Scatter-add the im2col gradient back onto the padded input grid.
fn col2im(dm: &Array2<f64>, ph: usize, pw: usize, cin: usize, ho: usize, wo: usize, stride: usize) -> Array3<f64> {
    let mut dpadded = Array3::zeros((ph, pw, cin));
    // `dot` may hand back a reversed-axes result; normalize before slicing.
    let dm = dm.as_standard_layout();
    let src = dm.as_slice().expect("standard layout");
    let dst = dpadded.as_slice_mut().expect("standard layout");
    let row_len = 9 * cin;
    for oy in 0..ho {
        for ky in 0..3 {
            let sy = oy * stride + ky;
            for kx in 0..3 {
                let col0 = (ky * 3 + kx) * cin;
                for ox in 0..wo {
                    let sx = ox * stride + kx;
                    let d = (sy * pw + sx) * cin;
                    let s = (oy * wo + ox) * row_len + col0;
                    for i in 0..cin {
                        dst[d + i] += src[s + i];
                    }
                }
            }
        }
    }
    dpadded
}

impl Conv2d {
    /// He-style seeded init; `gain` rescales the weight std.
    pub fn new_seeded(out_c: usize, in_c: usize, gain: f64, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let std = gain * (2.0 / (9.0 * in_c as f64)).sqrt();
        let w = Array4::from_shape_fn((out_c, in_c, 3, 3), |_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        });
        Self {
            w,
            b: Array1::zeros(out_c),
        }
    }

    pub fn zeros(out_c: usize, in_c: usize) -> Self {
        Self {
            w: Array4::zeros((out_c, in_c, 3, 3)),
            b: Array1::zeros(out_c),
        }
    }

    fn weight_matrix(&self) -> Array2<f64> {
        let (oc, ic, _, _) = self.w.dim();
        let mut m = Array2::zeros((9 * ic, oc));
        for o in 0..oc {
            for i in 0..ic {
                for ky in 0..3 {
                    for kx in 0..3 {
                        m[((ky * 3 + kx) * ic + i, o)] = self.w[(o, i, ky, kx)];
                    }
                }
            }
        }
        m
    }

    pub fn forward(&self, x: &Array3<f64>, stride: usize) -> Array3<f64> {
        let (h, w, cin) = x.dim();
        let (oc, wc_in, _, _) = self.w.dim();
        assert_eq!(cin, wc_in, "conv input channels");
        let (ho, wo) = (out_len(h, stride), out_len(w, stride));
        let padded = pad1(x);
        let m = im2col(&padded, ho, wo, stride);
        let mut y = m.dot(&self.weight_matrix());
        for mut row in y.rows_mut() {
            row += &self.b;
        }
        y.into_shape_with_order((ho, wo, oc)).expect("conv output shape")
    }

    /// Returns (d_input, d_weights, d_bias).
    pub fn backward(
        &self,
        x: &Array3<f64>,
        dy: &Array3<f64>,
        stride: usize,
    ) -> (Array3<f64>, Array4<f64>, Array1<f64>) {
        let (h, w, cin) = x.dim();
        let (oc, _, _, _) = self.w.dim();
        let (ho, wo, dyc) = dy.dim();
        assert_eq!(dyc, oc, "conv dy channels");
        assert_eq!((ho, wo), (out_len(h, stride), out_len(w, stride)));

        let dy_flat = dy
            .to_owned()
            .into_shape_with_order((ho * wo, oc))
            .expect("dy flat");
        let padded = pad1(x);
        let m = im2col(&padded, ho, wo, stride);

        let db = dy_flat.sum_axis(ndarray::Axis(0));
        let dwmat = m.t().dot(&dy_flat); // (9*Cin, Cout)
        let mut dw = Array4::zeros(self.w.dim());
        for o in 0..oc {
            for i in 0..cin {
                for ky in 0..3 {
                    for kx in 0..3 {
                        dw[(o, i, ky, kx)] = dwmat[((ky * 3 + kx) * cin + i, o)];
                    }
                }
            }
        }

        let dm = dy_flat.dot(&self.weight_matrix().t()); // (Ho*Wo, 9*Cin)
        let dpadded = col2im(&dm, h + 2, w + 2, cin, ho, wo, stride);
        let dx = dpadded.slice(ndarray::s![1..h + 1, 1..w + 1, ..]).to_owned();
        (dx, dw, db)
    }
}

/// Dense layer: y = W x + b with W of shape (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new_seeded(out_dim: usize, in_dim: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let std = 1.0 / (in_dim as f64).sqrt();
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        });
        Self {
            w,
            b: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.w.dot(x) + &self.b
    }

    /// Returns (d_input, d_weights, d_bias).
    pub fn backward(&self, x: &Array1<f64>, dy: &Array1<f64>) -> (Array1<f64>, Array2<f64>, Array1<f64>) {
        let dx = self.w.t().dot(dy);
        let dw = Array2::from_shape_fn(self.w.dim(), |(o, i)| dy[o] * x[i]);
        (dx, dw, dy.clone())
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SiLU activation x * sigmoid(x), applied elementwise.
pub fn silu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v * sigmoid(v))
}

/// Gradient of SiLU given the pre-activation and upstream gradient.
pub fn silu_backward(x_pre: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x_pre).for_each(|d, &v| {
        let s = sigmoid(v);
        *d *= s * (1.0 + v * (1.0 - s));
    });
    dx
}

/// Nearest-neighbor 2x upsample.
pub fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = x.dim();
    Array3::from_shape_fn((2 * h, 2 * w, c), |(y, xx, ch)| x[(y / 2, xx / 2, ch)])
}

/// Gradient of the 2x upsample: sum over each 2x2 block.
pub fn upsample2_backward(dy: &Array3<f64>) -> Array3<f64> {
    let (h2, w2, c) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::zeros((h, w, c));
    for y in 0..h2 {
        for x in 0..w2 {
            for ch in 0..c {
                dx[(y / 2, x / 2, ch)] += dy[(y, x, ch)];
            }
        }
    }
    dx
}

/// Sinusoidal timestep embedding of even width `dim`.
pub fn timestep_embedding(t: usize, dim: usize) -> Array1<f64> {
    assert!(dim % 2 == 0, "embedding width must be even");
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        let angle = t as f64 * freq;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    out
}

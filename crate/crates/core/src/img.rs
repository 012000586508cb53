//! The universal pixel carrier: an H×W×C grid of intensities in [0, 1].
//!
//! Diffusion latents are plain `Array3<f64>` and may leave [0, 1]; an
//! [`Image`] is always finite and clamped. File round trips go through
//! 16-bit PNG, so values loaded from disk sit exactly on the `k / 65535`
//! grid.

use crate::error::{Error, Result};
use crate::util::ContentHasher;
use ndarray::{Array2, Array3};
use std::path::Path;

/// Latent pixel grid: same storage as an image, but unclamped.
pub type Latent = Array3<f64>;

/// An image with pixels clamped to [0, 1]. Shape is (height, width, channels)
/// with channels 1 (gray) or 3 (RGB).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    /// Wrap a pixel grid, clamping values into [0, 1]. Non-finite pixels and
    /// unsupported channel counts are rejected.
    pub fn new(mut data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::InvalidParameter {
                name: "image_shape",
                reason: format!("height and width must be positive, got {h}x{w}"),
            });
        }
        if c != 1 && c != 3 {
            return Err(Error::InvalidParameter {
                name: "channels",
                reason: format!("expected 1 or 3 channels, got {c}"),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "pixels",
                reason: "non-finite pixel value".into(),
            });
        }
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Ok(Self { data })
    }

    /// Clamp a latent into image range. Errors on non-finite values.
    pub fn from_latent(latent: Latent) -> Result<Self> {
        Self::new(latent)
    }

    pub fn from_fn(h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        Self::new(Array3::from_shape_fn((h, w, c), |(y, x, ch)| f(y, x, ch)))
    }

    pub fn constant(h: usize, w: usize, c: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((h, w, c), value))
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Result<Self> {
        Self::constant(h, w, c, 0.0)
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    /// Copy of the pixel grid as an unclamped latent.
    pub fn to_latent(&self) -> Latent {
        self.data.clone()
    }

    pub fn mean(&self) -> f64 {
        self.data.mean().unwrap_or(0.0)
    }

    /// Single-channel luminance plane (Rec. 601 weights for RGB).
    pub fn luminance(&self) -> Array2<f64> {
        let (h, w, c) = self.data.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            if c == 1 {
                self.data[(y, x, 0)]
            } else {
                0.299 * self.data[(y, x, 0)] + 0.587 * self.data[(y, x, 1)] + 0.114 * self.data[(y, x, 2)]
            }
        })
    }

    /// Snap every pixel to the 16-bit grid used by PNG export, so that a
    /// save/load round trip reproduces the image exactly.
    pub fn quantized(&self) -> Image {
        let data = self
            .data
            .mapv(|v| (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0);
        Image { data }
    }

    /// Hash of shape and exact pixel bits.
    pub fn content_hash(&self) -> u64 {
        let (h, w, c) = self.data.dim();
        let mut hasher = ContentHasher::new("image");
        hasher.update(&(h as u64).to_le_bytes());
        hasher.update(&(w as u64).to_le_bytes());
        hasher.update(&(c as u64).to_le_bytes());
        hasher.update_f64s(self.data.as_slice().expect("standard layout"));
        hasher.finish_u64()
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Image {
        let (h, w, c) = self.data.dim();
        let data = Array3::from_shape_fn((h, w, c), |(y, x, ch)| self.data[(y, w - 1 - x, ch)]);
        Image { data }
    }

    /// Rotate clockwise by a multiple of 90 degrees. Quarter turns require a
    /// square image.
    pub fn rotate(&self, quarter_turns: usize) -> Result<Image> {
        let (h, w, c) = self.data.dim();
        let turns = quarter_turns % 4;
        if turns % 2 == 1 && h != w {
            return Err(Error::InvalidParameter {
                name: "quarter_turns",
                reason: "quarter rotations need a square image".into(),
            });
        }
        let data = match turns {
            0 => self.data.clone(),
            1 => Array3::from_shape_fn((w, h, c), |(y, x, ch)| self.data[(h - 1 - x, y, ch)]),
            2 => Array3::from_shape_fn((h, w, c), |(y, x, ch)| self.data[(h - 1 - y, w - 1 - x, ch)]),
            _ => Array3::from_shape_fn((w, h, c), |(y, x, ch)| self.data[(x, w - 1 - y, ch)]),
        };
        Ok(Image { data })
    }

    /// Multiply intensities by a factor, clamping back into range.
    pub fn scale_brightness(&self, factor: f64) -> Image {
        let data = self.data.mapv(|v| (v * factor).clamp(0.0, 1.0));
        Image { data }
    }

    /// Write as 16-bit PNG (grayscale for 1 channel, RGB for 3).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w, c) = self.data.dim();
        let quant = |v: f64| (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        let result = if c == 1 {
            let buf: Vec<u16> = self.data.iter().map(|&v| quant(v)).collect();
            let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w as u32, h as u32, buf)
                .expect("buffer sized from dims");
            img.save(path)
        } else {
            let buf: Vec<u16> = self.data.iter().map(|&v| quant(v)).collect();
            let img = image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(w as u32, h as u32, buf)
                .expect("buffer sized from dims");
            img.save(path)
        };
        result.map_err(|e| Error::Format {
            what: "png",
            reason: format!("{}: {e}", path.display()),
        })
    }

    /// Load a PNG written by [`Image::save_png`] (or any PNG; non-gray inputs
    /// decode to 3 channels).
    pub fn load_png(path: &Path) -> Result<Image> {
        let dynimg = image::open(path).map_err(|e| Error::Format {
            what: "png",
            reason: format!("{}: {e}", path.display()),
        })?;
        let gray = matches!(
            dynimg.color(),
            image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
        );
        let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
        let data = if gray {
            let plane = dynimg.to_luma16();
            Array3::from_shape_fn((h, w, 1), |(y, x, _)| {
                plane.get_pixel(x as u32, y as u32)[0] as f64 / 65535.0
            })
        } else {
            let plane = dynimg.to_rgb16();
            Array3::from_shape_fn((h, w, 3), |(y, x, ch)| {
                plane.get_pixel(x as u32, y as u32)[ch] as f64 / 65535.0
            })
        };
        Image::new(data)
    }
}

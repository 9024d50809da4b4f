//! Images, grayscale conversion, file IO and quality metrics.

mod io;
pub mod metrics;

pub use io::{decode_image, encode_pfm, encode_pgm, encode_ppm, read_image, write_image};
pub use metrics::{mse, psnr, psnr_star, ssim, PSNR_CAP_DB};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// ITU-R BT.601 luma weights.
pub const GRAY_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// An `[H, W, C]` image with `C` of 1 or 3. Values are nominally in `[0, 1]`
/// but are only clamped when written out.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        t.expect_rank("ImageTensor", 3)?;
        let c = t.shape()[2];
        if c != 1 && c != 3 {
            return Err(Error::dim("ImageTensor", "2 (channels)", 3, c));
        }
        Ok(Self(t))
    }

    pub fn from_fn(h: usize, w: usize, c: usize, f: impl FnMut(usize) -> f64) -> Result<Self> {
        Self::new(Tensor::from_fn(&[h, w, c], f))
    }

    pub fn filled(h: usize, w: usize, c: usize, v: f64) -> Result<Self> {
        Self::new(Tensor::full(&[h, w, c], v))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn clamped(&self) -> Self {
        Self(self.0.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self(self.0.map(|v| v * k))
    }
}

/// Luma of a 3-channel image; a 1-channel image is returned unchanged.
pub fn to_gray(img: &ImageTensor) -> Result<ImageTensor> {
    match img.channels() {
        3 => {
            let data = img
                .data()
                .chunks_exact(3)
                .map(|p| GRAY_WEIGHTS[0] * p[0] + GRAY_WEIGHTS[1] * p[1] + GRAY_WEIGHTS[2] * p[2])
                .collect();
            ImageTensor::new(Tensor::new(vec![img.height(), img.width(), 1], data)?)
        }
        c => Err(Error::dim("to_gray", "2 (channels)", 3, c)),
    }
}

/// Grayscale view used by metrics: converts RGB, passes single-channel through.
pub(crate) fn luma(img: &ImageTensor) -> Result<ImageTensor> {
    if img.channels() == 1 {
        Ok(img.clone())
    } else {
        to_gray(img)
    }
}

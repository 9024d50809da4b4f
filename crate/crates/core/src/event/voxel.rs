use super::EventStream;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::spatial::SpatialOp;

pub const DEFAULT_BINS: usize = 32;

/// `[B, H, W]` temporal histogram of event polarity.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    data: Tensor,
}

impl VoxelGrid {
    pub fn new(data: Tensor) -> Result<Self> {
        data.expect_rank("VoxelGrid", 3)?;
        if data.shape()[0] < 2 {
            return Err(Error::invalid("a voxel grid needs at least two bins"));
        }
        Ok(Self { data })
    }

    pub fn zeros(bins: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[bins, height, width]))
    }

    pub fn bins(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn get(&self, bin: usize, y: usize, x: usize) -> f64 {
        self.data.get(&[bin, y, x])
    }

    /// Channels-last copy, `[H, W, B]`, as consumed by convolutions.
    pub fn to_hwc(&self) -> Tensor {
        let (b, h, w) = (self.bins(), self.height(), self.width());
        let src = self.data.data();
        let mut out = vec![0.0; b * h * w];
        for k in 0..b {
            for p in 0..h * w {
                out[p * b + k] = src[k * h * w + p];
            }
        }
        Tensor::new(vec![h, w, b], out).expect("same numel")
    }

    /// Inverse of [`VoxelGrid::to_hwc`].
    pub fn from_hwc(t: &Tensor) -> Result<Self> {
        t.expect_rank("VoxelGrid::from_hwc", 3)?;
        let (h, w, b) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let src = t.data();
        let mut out = vec![0.0; b * h * w];
        for p in 0..h * w {
            for k in 0..b {
                out[k * h * w + p] = src[p * b + k];
            }
        }
        Self::new(Tensor::new(vec![b, h, w], out)?)
    }
}

/// Accumulates each event's polarity into the two temporally nearest bins.
///
/// Event time is mapped to `t* = (t - t0) / (t1 - t0) · (B - 1)`; bins
/// `floor(t*)` and `floor(t*) + 1` receive `p·(1 - |b - t*|)`. Events outside
/// the closed window `[t0, t1]` are skipped.
pub fn voxelize(stream: &EventStream, bins: usize, t0: u64, t1: u64) -> Result<VoxelGrid> {
    if t1 <= t0 {
        return Err(Error::invalid(format!("voxel window needs t1 > t0, got [{t0}, {t1}]")));
    }
    if bins < 2 {
        return Err(Error::invalid(format!("voxelize needs at least 2 bins, got {bins}")));
    }
    let (h, w) = (stream.height() as usize, stream.width() as usize);
    let mut data = vec![0.0; bins * h * w];
    let span = (t1 - t0) as f64;
    let last = (bins - 1) as f64;
    for e in stream.events() {
        if e.t < t0 || e.t > t1 {
            continue;
        }
        let ts = (e.t - t0) as f64 * last / span;
        let lo = (ts.floor() as usize).min(bins - 1);
        let frac = ts - lo as f64;
        let p = e.p as f64;
        let pix = e.y as usize * w + e.x as usize;
        data[lo * h * w + pix] += p * (1.0 - frac);
        if lo + 1 < bins && frac > 0.0 {
            data[(lo + 1) * h * w + pix] += p * frac;
        }
    }
    VoxelGrid::new(Tensor::new(vec![bins, h, w], data)?)
}

/// Applies a spatial transform identically to every bin.
pub fn transform_grid(grid: &VoxelGrid, op: SpatialOp) -> Result<VoxelGrid> {
    VoxelGrid::new(op.apply(&grid.data, 1)?)
}

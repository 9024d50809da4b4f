use rand::Rng;

use crate::error::{Error, Result};
use crate::event::{transform_grid, VoxelGrid};
use crate::image::ImageTensor;
use crate::spatial::SpatialOp;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentConfig {
    pub crop: Option<usize>,
    pub hflip: bool,
    pub rotate: bool,
}

impl AugmentConfig {
    pub const NONE: Self = Self {
        crop: None,
        hflip: false,
        rotate: false,
    };
}

/// Low image, voxel grid and ground truth, spatially aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub low: ImageTensor,
    pub grid: VoxelGrid,
    pub gt: ImageTensor,
}

impl Sample {
    pub fn new(low: ImageTensor, grid: VoxelGrid, gt: ImageTensor) -> Result<Self> {
        let hw = (low.height(), low.width());
        if (gt.height(), gt.width()) != hw || (grid.height(), grid.width()) != hw {
            return Err(Error::invalid(format!(
                "sample extents disagree: low {}x{}, grid {}x{}, gt {}x{}",
                hw.0,
                hw.1,
                grid.height(),
                grid.width(),
                gt.height(),
                gt.width()
            )));
        }
        Ok(Self { low, grid, gt })
    }

    pub fn height(&self) -> usize {
        self.low.height()
    }

    pub fn width(&self) -> usize {
        self.low.width()
    }

    fn crop(&self, y: usize, x: usize, size: usize) -> Result<Self> {
        let img = |i: &ImageTensor| ImageTensor::new(i.tensor().crop_hw(y, x, size, size)?);
        let grid = VoxelGrid::from_hwc(&self.grid.to_hwc().crop_hw(y, x, size, size)?)?;
        Ok(Self {
            low: img(&self.low)?,
            grid,
            gt: img(&self.gt)?,
        })
    }

    /// The same spatial op on all three members.
    pub fn transform(&self, op: SpatialOp) -> Result<Self> {
        let img = |i: &ImageTensor| ImageTensor::new(op.apply(i.tensor(), 0)?);
        Ok(Self {
            low: img(&self.low)?,
            grid: transform_grid(&self.grid, op)?,
            gt: img(&self.gt)?,
        })
    }
}

/// Random square crop, then a coin-flip horizontal flip, then a rotation drawn
/// uniformly from {0°, 90°, 180°, 270°}. Non-square samples only rotate by 0° or 180°.
pub fn augment<R: Rng>(sample: &Sample, config: &AugmentConfig, rng: &mut R) -> Result<Sample> {
    let mut out = match config.crop {
        Some(size) => {
            if size == 0 || size > sample.height() || size > sample.width() {
                return Err(Error::invalid(format!(
                    "crop {size} does not fit a {}x{} sample",
                    sample.height(),
                    sample.width()
                )));
            }
            let y = rng.random_range(0..=sample.height() - size);
            let x = rng.random_range(0..=sample.width() - size);
            sample.crop(y, x, size)?
        }
        None => sample.clone(),
    };
    if config.hflip && rng.random_bool(0.5) {
        out = out.transform(SpatialOp::HFlip)?;
    }
    if config.rotate {
        let op = if out.height() == out.width() {
            [SpatialOp::Identity, SpatialOp::Rot90, SpatialOp::Rot180, SpatialOp::Rot270][rng.random_range(0..4)]
        } else {
            [SpatialOp::Identity, SpatialOp::Rot180][rng.random_range(0..2)]
        };
        if op != SpatialOp::Identity {
            out = out.transform(op)?;
        }
    }
    Ok(out)
}

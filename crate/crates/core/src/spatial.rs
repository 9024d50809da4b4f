//! Right-angle rotations and flips over two spatial axes of a tensor.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpatialOp {
    Identity,
    /// Counter-clockwise quarter turn.
    Rot90,
    Rot180,
    Rot270,
    HFlip,
}

impl SpatialOp {
    pub const ROTATIONS: [SpatialOp; 3] = [SpatialOp::Rot90, SpatialOp::Rot180, SpatialOp::Rot270];

    fn swaps_axes(self) -> bool {
        matches!(self, SpatialOp::Rot90 | SpatialOp::Rot270)
    }

    /// Source `(row, col)` in an `h × w` input for output position `(r, c)`.
    #[inline]
    fn source(self, r: usize, c: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            SpatialOp::Identity => (r, c),
            SpatialOp::Rot90 => (c, w - 1 - r),
            SpatialOp::Rot180 => (h - 1 - r, w - 1 - c),
            SpatialOp::Rot270 => (h - 1 - c, r),
            SpatialOp::HFlip => (r, w - 1 - c),
        }
    }

    /// Applies the op to the spatial axes `(row_axis, row_axis + 1)`.
    pub fn apply(self, t: &Tensor, row_axis: usize) -> Result<Tensor> {
        if t.rank() < row_axis + 2 {
            return Err(Error::dim("spatial transform", "rank", row_axis + 2, t.rank()));
        }
        let s = t.shape();
        let (h, w) = (s[row_axis], s[row_axis + 1]);
        if self.swaps_axes() && h != w {
            return Err(Error::invalid(format!(
                "{self:?} needs a square spatial extent, got {h}x{w}"
            )));
        }
        let outer: usize = s[..row_axis].iter().product();
        let inner: usize = s[row_axis + 2..].iter().product();
        let (oh, ow) = if self.swaps_axes() { (w, h) } else { (h, w) };
        let src = t.data();
        let mut out = Vec::with_capacity(t.numel());
        for o in 0..outer {
            let plane = &src[o * h * w * inner..][..h * w * inner];
            for r in 0..oh {
                for c in 0..ow {
                    let (sr, sc) = self.source(r, c, h, w);
                    out.extend_from_slice(&plane[(sr * w + sc) * inner..][..inner]);
                }
            }
        }
        let mut shape = s.to_vec();
        shape[row_axis] = oh;
        shape[row_axis + 1] = ow;
        Tensor::new(shape, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rot90_is_counter_clockwise() {
        // [[1, 2], [3, 4]] -> [[2, 4], [1, 3]]
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(SpatialOp::Rot90.apply(&t, 0).unwrap().data(), &[2.0, 4.0, 1.0, 3.0]);
        assert_eq!(SpatialOp::HFlip.apply(&t, 0).unwrap().data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn rot270_undoes_rot90_on_channels_last() {
        let t = Tensor::from_fn(&[3, 3, 2], |i| i as f64);
        let r = SpatialOp::Rot90.apply(&t, 0).unwrap();
        assert_eq!(SpatialOp::Rot270.apply(&r, 0).unwrap(), t);
    }

    #[test]
    fn non_square_rotation_is_error() {
        let t = Tensor::zeros(&[2, 3, 4]);
        assert!(SpatialOp::Rot90.apply(&t, 1).is_err());
        assert!(SpatialOp::Rot180.apply(&t, 1).is_ok());
    }
}

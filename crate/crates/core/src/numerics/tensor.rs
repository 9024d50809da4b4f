use crate::error::{Error, Result};

/// Dense row-major `f64` tensor. Images and feature maps use `[H, W, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("tensor extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("Tensor::new", "data", n, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("reshape", "numel", self.data.len(), n));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_shape("zip_map", other.shape())?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_shape("max_abs_diff", other.shape())?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Errors naming the first axis whose extent differs from `expected`.
    pub fn expect_shape(&self, op: &'static str, expected: &[usize]) -> Result<()> {
        if self.shape.len() != expected.len() {
            return Err(Error::dim(op, "rank", expected.len(), self.shape.len()));
        }
        for (axis, (&e, &f)) in expected.iter().zip(&self.shape).enumerate() {
            if e != f {
                return Err(Error::dim(op, axis, e, f));
            }
        }
        Ok(())
    }

    pub fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::dim(op, "rank", rank, self.shape.len()));
        }
        Ok(())
    }

    /// Copies the `[h0..h0+h, w0..w0+w]` window of a tensor whose first two axes are spatial.
    pub fn crop_hw(&self, h0: usize, w0: usize, h: usize, w: usize) -> Result<Self> {
        if self.rank() < 2 || h0 + h > self.shape[0] || w0 + w > self.shape[1] {
            return Err(Error::invalid(format!(
                "crop {h}x{w}@({h0},{w0}) outside tensor of shape {:?}",
                self.shape
            )));
        }
        let inner: usize = self.shape[2..].iter().product();
        let row = self.shape[1] * inner;
        let mut data = Vec::with_capacity(h * w * inner);
        for y in h0..h0 + h {
            let start = y * row + w0 * inner;
            data.extend_from_slice(&self.data[start..start + w * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = h;
        shape[1] = w;
        Tensor::new(shape, data)
    }

    /// Reflect-pads the first two (spatial) axes at the bottom and right edge.
    pub fn reflect_pad_hw(&self, pad_h: usize, pad_w: usize) -> Result<Self> {
        if self.rank() < 2 {
            return Err(Error::invalid("reflect_pad_hw needs a spatial tensor"));
        }
        let (h, w) = (self.shape[0], self.shape[1]);
        if (pad_h > 0 && pad_h >= h) || (pad_w > 0 && pad_w >= w) {
            return Err(Error::invalid(format!(
                "reflective padding of {pad_h}x{pad_w} needs more than that many rows/cols, got {h}x{w}"
            )));
        }
        let inner: usize = self.shape[2..].iter().product();
        let (nh, nw) = (h + pad_h, w + pad_w);
        let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
        let mut data = Vec::with_capacity(nh * nw * inner);
        for y in 0..nh {
            let sy = reflect(y, h);
            for x in 0..nw {
                let sx = reflect(x, w);
                let s = (sy * w + sx) * inner;
                data.extend_from_slice(&self.data[s..s + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[0] = nh;
        shape[1] = nw;
        Tensor::new(shape, data)
    }
}

/// Splits `shape` around `axis` into `(outer, extent, inner)` element counts.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_data_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn shape_error_names_axis() {
        let t = Tensor::zeros(&[4, 5, 3]);
        let err = t.expect_shape("op", &[4, 6, 3]).unwrap_err();
        assert!(err.to_string().contains("axis 1"), "{err}");
    }

    #[test]
    fn reflect_pad_then_crop_restores() {
        let t = Tensor::from_fn(&[3, 5, 2], |i| i as f64);
        let p = t.reflect_pad_hw(1, 3).unwrap();
        assert_eq!(p.shape(), &[4, 8, 2]);
        // row 3 mirrors row 1
        assert_eq!(p.get(&[3, 0, 1]), t.get(&[1, 0, 1]));
        assert_eq!(p.get(&[0, 5, 0]), t.get(&[0, 3, 0]));
        assert_eq!(p.crop_hw(0, 0, 3, 5).unwrap(), t);
    }
}

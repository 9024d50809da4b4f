//! Parameterised layers: parameter ids plus the hyper-parameters needed to apply them.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Graph, ParamBuilder, ParamId, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let fan_in = kernel * kernel * cin;
        Ok(Self {
            weight: b.uniform("weight", &[kernel, kernel, cin, cout], fan_in)?,
            bias: b.uniform("bias", &[cout], fan_in)?,
            kernel,
            stride,
            pad,
        })
    }

    /// Odd kernel, stride 1, extent-preserving padding.
    pub fn same<R: Rng>(b: &mut ParamBuilder<'_, R>, cin: usize, cout: usize, kernel: usize) -> Result<Self> {
        Self::new(b, cin, cout, kernel, 1, kernel / 2)
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        x.conv2d(g.param(store, self.weight), g.param(store, self.bias), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Depthwise {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl Depthwise {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, channels: usize, kernel: usize) -> Result<Self> {
        let fan_in = kernel * kernel;
        Ok(Self {
            weight: b.uniform("weight", &[kernel, kernel, channels], fan_in)?,
            bias: b.uniform("bias", &[channels], fan_in)?,
            kernel,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        x.depthwise_conv2d(g.param(store, self.weight), g.param(store, self.bias), self.kernel / 2)
    }
}

/// 2×2, stride-2 transposed convolution.
#[derive(Clone, Debug)]
pub struct Deconv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Deconv {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, cin: usize, cout: usize) -> Result<Self> {
        let fan_in = cin;
        Ok(Self {
            weight: b.uniform("weight", &[2, 2, cin, cout], fan_in)?,
            bias: b.uniform("bias", &[cout], fan_in)?,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        x.deconv2d(g.param(store, self.weight), g.param(store, self.bias), 2)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.constant("gamma", &[channels], 1.0)?,
            beta: b.constant("beta", &[channels], 0.0)?,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(g.param(store, self.gamma), g.param(store, self.beta))
    }
}

/// Sets every listed parameter to `value`.
pub fn fill(store: &mut ParamStore, ids: &[ParamId], value: f64) {
    for &id in ids {
        for v in store.get_mut(id).tensor.data_mut() {
            *v = value;
        }
    }
}

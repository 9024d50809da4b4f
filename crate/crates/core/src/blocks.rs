//! Network blocks: ECA residual, regional selection, holistic attention, and fusion.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Conv, Depthwise, LayerNorm};
use crate::numerics::{concat, Graph, ParamBuilder, ParamId, ParamStore, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;
const QK_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub base_channels: usize,
    pub heads: usize,
    pub eca_kernel: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            heads: 2,
            eca_kernel: 3,
        }
    }
}

impl BlockConfig {
    pub const SCALES: usize = 3;

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.heads == 0 || self.base_channels % self.heads != 0 {
            return Err(Error::invalid(format!(
                "base channels {} must be a positive multiple of the head count {}",
                self.base_channels, self.heads
            )));
        }
        if self.eca_kernel % 2 == 0 {
            return Err(Error::invalid("ECA kernel must be odd"));
        }
        Ok(())
    }

    /// Channels at scale `s`.
    pub fn channels(&self, s: usize) -> usize {
        self.base_channels << s
    }
}

/// `x + ECA(conv(act(conv(x))))`.
#[derive(Clone, Debug)]
pub struct EcaResidual {
    pub conv1: Conv,
    pub conv2: Conv,
    pub eca: ParamId,
}

impl EcaResidual {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, channels: usize, eca_kernel: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv::same(&mut b.sub("conv1"), channels, channels, 3)?,
            conv2: Conv::same(&mut b.sub("conv2"), channels, channels, 3)?,
            eca: b.uniform("eca", &[eca_kernel], eca_kernel)?,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let y = self.conv1.forward(g, store, x)?.leaky_relu(LEAKY_SLOPE)?;
        let y = self.conv2.forward(g, store, y)?;
        let gate = y.global_avg_pool()?.channel_conv1d(g.param(store, self.eca))?.sigmoid()?;
        y.scale_channels(gate)?.add(x)
    }
}

/// Two residual blocks followed by a spatial mask; the image branch keeps `M̂`,
/// the event branch keeps `1 − M̂`.
#[derive(Clone, Debug)]
pub struct RegionalSelection {
    pub blocks: [EcaResidual; 2],
}

impl RegionalSelection {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, channels: usize, eca_kernel: usize) -> Result<Self> {
        Ok(Self {
            blocks: [
                EcaResidual::new(&mut b.sub(0), channels, eca_kernel)?,
                EcaResidual::new(&mut b.sub(1), channels, eca_kernel)?,
            ],
        })
    }

    /// Unmasked `F̂`.
    pub fn features<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let y = self.blocks[0].forward(g, store, x)?;
        self.blocks[1].forward(g, store, y)
    }

    fn masked<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>, mask: Tensor) -> Result<Var<'g>> {
        let s = x.shape();
        if s.len() != 3 || mask.shape()[..2] != s[..2] {
            return Err(Error::dim("regional selection", "0..2 (spatial)", s.first().copied().unwrap_or(0), mask.shape()[0]));
        }
        // adding +0 turns the -0 of masked negative features into +0
        self.features(g, store, x)?.mul_spatial(g.constant(mask))?.add_scalar(0.0)
    }

    /// `M̂ ⊙ F̂`; `binary` is `[H, W]` or `[H, W, 1]`.
    pub fn irfs<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>, binary: &Tensor) -> Result<Var<'g>> {
        self.masked(g, store, x, as_mask(binary)?)
    }

    /// `(1 − M̂) ⊙ F̂`.
    pub fn erfs<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>, binary: &Tensor) -> Result<Var<'g>> {
        self.masked(g, store, x, as_mask(binary)?.map(|v| 1.0 - v))
    }
}

fn as_mask(binary: &Tensor) -> Result<Tensor> {
    match binary.shape() {
        &[h, w] => binary.clone().reshape(&[h, w, 1]),
        &[_, _, 1] => Ok(binary.clone()),
        s => Err(Error::invalid(format!("mask must be [H, W] or [H, W, 1], got {s:?}"))),
    }
}

/// Channel-wise multi-head self-attention followed by a feed-forward, each residual.
#[derive(Clone, Debug)]
pub struct Hfe {
    pub heads: usize,
    pub qkv: Conv,
    pub qkv_dw: Depthwise,
    pub temperature: ParamId,
    pub proj: Conv,
    pub norm: LayerNorm,
    pub ffn_in: Conv,
    pub ffn_out: Conv,
}

impl Hfe {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::invalid(format!("{channels} channels do not split into {heads} heads")));
        }
        Ok(Self {
            heads,
            qkv: Conv::same(&mut b.sub("qkv"), channels, 3 * channels, 1)?,
            qkv_dw: Depthwise::new(&mut b.sub("qkv_dw"), 3 * channels, 3)?,
            temperature: b.constant("temperature", &[heads], 1.0)?,
            proj: Conv::same(&mut b.sub("proj"), channels, channels, 1)?,
            norm: LayerNorm::new(&mut b.sub("norm"), channels)?,
            ffn_in: Conv::same(&mut b.sub("ffn_in"), channels, 2 * channels, 1)?,
            ffn_out: Conv::same(&mut b.sub("ffn_out"), 2 * channels, channels, 1)?,
        })
    }

    /// Attention output (before the residual) and the per-head `d × d` attention maps.
    pub fn attention<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        x: Var<'g>,
    ) -> Result<(Var<'g>, Vec<Var<'g>>)> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::dim("hfe", "rank", 3, s.len()));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        if c % self.heads != 0 {
            return Err(Error::invalid(format!("{c} channels do not split into {} heads", self.heads)));
        }
        let d = c / self.heads;
        let qkv = self.qkv.forward(g, store, x)?;
        let qkv = self.qkv_dw.forward(g, store, qkv)?.reshape(&[h * w, 3 * c])?;
        let temp = g.param(store, self.temperature);
        let mut outs = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let part = |k: usize| -> Result<Var<'g>> { qkv.narrow(1, k * c + head * d, d)?.transpose() };
            let q = part(0)?.l2_normalize(1, QK_NORM_EPS)?;
            let k = part(1)?.l2_normalize(1, QK_NORM_EPS)?;
            let v = part(2)?;
            let attn = q
                .matmul(k.transpose()?)?
                .div_scalar_var(temp.narrow(0, head, 1)?)?
                .softmax(1)?;
            outs.push(attn.matmul(v)?.transpose()?);
            maps.push(attn);
        }
        let merged = concat(&outs, 1)?.reshape(&[h, w, c])?;
        Ok((self.proj.forward(g, store, merged)?, maps))
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let mid = self.attention(g, store, x)?.0.add(x)?;
        let y = self.norm.forward(g, store, mid)?;
        let y = self.ffn_in.forward(g, store, y)?.gelu()?;
        self.ffn_out.forward(g, store, y)?.add(mid)
    }
}

/// Fuses selected image, selected event and holistic features with a single-channel spatial gate.
#[derive(Clone, Debug)]
pub struct Hrf {
    pub gate: Conv,
    pub transform: Conv,
    pub reduce: Conv,
}

impl Hrf {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, channels: usize) -> Result<Self> {
        let c3 = 3 * channels;
        Ok(Self {
            gate: Conv::same(&mut b.sub("gate"), c3, 1, 3)?,
            transform: Conv::same(&mut b.sub("transform"), c3, c3, 3)?,
            reduce: Conv::same(&mut b.sub("reduce"), c3, channels, 3)?,
        })
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        img: Var<'g>,
        ev: Var<'g>,
        holistic: Var<'g>,
    ) -> Result<Var<'g>> {
        let cat = concat(&[img, ev, holistic], 2)?;
        let gate = self.gate.forward(g, store, cat)?.sigmoid()?;
        let y = self.transform.forward(g, store, cat)?.mul_spatial(gate)?.add(cat)?;
        self.reduce.forward(g, store, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::fill;
    use crate::numerics::gradcheck;
    use proptest::prelude::{prop_assert_eq, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build<T>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_, ChaCha8Rng>) -> Result<T>) -> (ParamStore, T) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = f(&mut ParamBuilder::new(&mut store, &mut rng)).unwrap();
        (store, block)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn run(x: &Tensor, f: impl for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>) -> Tensor {
        let g = Graph::new();
        let out = f(&g, g.constant(x.clone())).unwrap();
        (*out.value()).clone()
    }

    fn half_mask(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[h, w], |i| if i % w < w / 2 { 1.0 } else { 0.0 })
    }

    #[test]
    fn eca_with_zero_weights_is_identity() {
        let (mut store, blk) = build(1, |b| EcaResidual::new(b, 4, 3));
        let ids = [blk.conv1.weight, blk.conv1.bias, blk.conv2.weight, blk.conv2.bias];
        fill(&mut store, &ids, 0.0);
        let x = random(&[6, 6, 4], 2);
        assert_eq!(run(&x, |g, v| blk.forward(g, &store, v)), x);
    }

    #[test]
    fn eca_with_open_gate_is_plain_residual() {
        // a huge positive kernel saturates the gate at one for positive pooled inputs
        let (mut store, blk) = build(3, |b| EcaResidual::new(b, 4, 3));
        fill(&mut store, &[blk.conv2.bias], 1.0);
        fill(&mut store, &[blk.conv2.weight], 0.0);
        fill(&mut store, &[blk.eca], 100.0);
        let x = random(&[5, 5, 4], 4);
        let out = run(&x, |g, v| blk.forward(g, &store, v));
        assert!(out.max_abs_diff(&x.map(|v| v + 1.0)).unwrap() < 1e-12);
    }

    #[test]
    fn eca_gradients() {
        let (store, blk) = build(5, |b| EcaResidual::new(b, 4, 3));
        let r = gradcheck::check(&store, &[random(&[8, 8, 4], 6)], 1e-5, |g, s, x| blk.forward(g, s, x[0])).unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }

    #[test]
    fn selection_masks() {
        let (store, sel) = build(7, |b| RegionalSelection::new(b, 4, 3));
        let x = random(&[6, 8, 4], 8);
        let feats = run(&x, |g, v| sel.features(g, &store, v));
        let ones = Tensor::ones(&[6, 8]);
        let zeros = Tensor::zeros(&[6, 8]);
        assert_eq!(run(&x, |g, v| sel.irfs(g, &store, v, &ones)), feats);
        assert!(run(&x, |g, v| sel.irfs(g, &store, v, &zeros)).data().iter().all(|&v| v == 0.0));
        assert!(run(&x, |g, v| sel.erfs(g, &store, v, &ones)).data().iter().all(|&v| v == 0.0));
        assert_eq!(run(&x, |g, v| sel.erfs(g, &store, v, &zeros)), feats);

        let m = half_mask(6, 8);
        let kept = run(&x, |g, v| sel.irfs(g, &store, v, &m));
        let rest = run(&x, |g, v| sel.erfs(g, &store, v, &m));
        for (i, (&a, &b)) in kept.data().iter().zip(rest.data()).enumerate() {
            let on = m.data()[i / 4] == 1.0;
            if on {
                assert_eq!(a, feats.data()[i]);
                assert_eq!(b.to_bits(), 0.0f64.to_bits());
            } else {
                assert_eq!(a.to_bits(), 0.0f64.to_bits());
                assert_eq!(b, feats.data()[i]);
            }
            // partition completeness with tied weights
            assert_eq!(a + b, feats.data()[i]);
        }
        assert!(sel.irfs(&Graph::new(), &store, Graph::new().constant(x.clone()), &half_mask(6, 6)).is_err());
    }

    #[test]
    fn hfe_shape_and_softmax_rows() {
        let (store, hfe) = build(9, |b| Hfe::new(b, 8, 2));
        let g = Graph::new();
        let x = g.constant(random(&[4, 12, 8], 10));
        let (_, maps) = hfe.attention(&g, &store, x).unwrap();
        assert_eq!(maps.len(), 2);
        for m in &maps {
            let v = m.value();
            assert_eq!(v.shape(), &[4, 4]);
            for row in v.data().chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(hfe.forward(&g, &store, x).unwrap().shape(), vec![4, 12, 8]);
        let mut store2 = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Hfe::new(&mut ParamBuilder::new(&mut store2, &mut rng), 6, 4).is_err());
    }

    #[test]
    fn hfe_with_zeroed_outputs_is_identity() {
        let (mut store, hfe) = build(11, |b| Hfe::new(b, 4, 2));
        let ids = [hfe.proj.weight, hfe.proj.bias, hfe.ffn_out.weight, hfe.ffn_out.bias];
        fill(&mut store, &ids, 0.0);
        let x = random(&[6, 6, 4], 12);
        assert_eq!(run(&x, |g, v| hfe.forward(g, &store, v)), x);
    }

    #[test]
    fn hfe_gradients() {
        let (store, hfe) = build(13, |b| Hfe::new(b, 4, 2));
        let r = gradcheck::check(&store, &[random(&[8, 8, 4], 14)], 1e-5, |g, s, x| hfe.forward(g, s, x[0])).unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }

    #[test]
    fn hrf_saturated_gate() {
        let (mut store, hrf) = build(15, |b| Hrf::new(b, 2));
        fill(&mut store, &[hrf.gate.weight], 0.0);
        fill(&mut store, &[hrf.gate.bias], 20.0);
        let parts = [random(&[6, 6, 2], 16), random(&[6, 6, 2], 17), random(&[6, 6, 2], 18)];
        let g = Graph::new();
        let v: Vec<Var> = parts.iter().map(|t| g.constant(t.clone())).collect();
        let out = hrf.forward(&g, &store, v[0], v[1], v[2]).unwrap();
        let cat = concat(&v, 2).unwrap();
        let want = hrf
            .reduce
            .forward(&g, &store, hrf.transform.forward(&g, &store, cat).unwrap().add(cat).unwrap())
            .unwrap();
        assert!(out.value().max_abs_diff(&want.value()).unwrap() < 1e-6);
    }

    #[test]
    fn hrf_zero_in_zero_out() {
        let (mut store, hrf) = build(19, |b| Hrf::new(b, 2));
        fill(&mut store, &[hrf.gate.bias, hrf.transform.bias, hrf.reduce.bias], 0.0);
        let g = Graph::new();
        let z = || g.constant(Tensor::zeros(&[4, 4, 2]));
        let out = hrf.forward(&g, &store, z(), z(), z()).unwrap();
        assert!(out.value().data().iter().all(|&v| v == 0.0));
        assert!(hrf.forward(&g, &store, z(), z(), g.constant(Tensor::zeros(&[4, 2, 2]))).is_err());
    }

    #[test]
    fn hrf_gradients() {
        let (store, hrf) = build(21, |b| Hrf::new(b, 2));
        let inputs = [random(&[8, 8, 2], 22), random(&[8, 8, 2], 23), random(&[8, 8, 2], 24)];
        let r = gradcheck::check(&store, &inputs, 1e-5, |g, s, x| hrf.forward(g, s, x[0], x[1], x[2])).unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn blocks_preserve_shape(hq in 1usize..4, wq in 1usize..4, seed in 0u64..1000) {
            let (h, w) = (4 * hq, 4 * wq);
            let (store, (sel, hfe, hrf)) = build(seed, |b| {
                Ok((
                    RegionalSelection::new(&mut b.sub("sel"), 4, 3)?,
                    Hfe::new(&mut b.sub("hfe"), 4, 2)?,
                    Hrf::new(&mut b.sub("hrf"), 4)?,
                ))
            });
            let g = Graph::new();
            let x = g.constant(random(&[h, w, 4], seed));
            let m = half_mask(h, w);
            prop_assert_eq!(sel.irfs(&g, &store, x, &m).unwrap().shape(), vec![h, w, 4]);
            prop_assert_eq!(sel.erfs(&g, &store, x, &m).unwrap().shape(), vec![h, w, 4]);
            prop_assert_eq!(hfe.forward(&g, &store, x).unwrap().shape(), vec![h, w, 4]);
            prop_assert_eq!(hrf.forward(&g, &store, x, x, x).unwrap().shape(), vec![h, w, 4]);
        }
    }
}

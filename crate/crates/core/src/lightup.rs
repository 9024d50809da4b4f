//! Illumination prior, the learned light-up estimator, and SNR maps.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{ImageTensor, GRAY_WEIGHTS};
use crate::layers::{Conv, Depthwise};
use crate::numerics::{avg_pool2, concat, Graph, ParamBuilder, ParamStore, Tensor, Var};

pub const DEFAULT_SNR_KERNEL: usize = 5;
pub const DEFAULT_TAU: f64 = 0.5;
/// Floor on the noise estimate in the SNR denominator.
pub const SNR_EPS: f64 = 1e-4;
const ESTIMATOR_HIDDEN: usize = 16;

/// Per-pixel max over channels, `[H, W, 1]`.
pub fn illumination_prior(img: &Tensor) -> Result<Tensor> {
    img.expect_rank("illumination_prior", 3)?;
    let s = img.shape();
    if s[2] != 3 {
        return Err(Error::dim("illumination_prior", "2 (channels)", 3, s[2]));
    }
    let data = img
        .data()
        .chunks_exact(3)
        .map(|p| p[0].max(p[1]).max(p[2]))
        .collect();
    Tensor::new(vec![s[0], s[1], 1], data)
}

/// Maps `concat(I, prior)` to a 3-channel illumination `L`.
#[derive(Clone, Debug)]
pub struct Estimator {
    pub expand: Conv,
    pub spatial: Depthwise,
    pub project: Conv,
}

impl Estimator {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>) -> Result<Self> {
        let expand = Conv::same(&mut b.sub("expand"), 4, ESTIMATOR_HIDDEN, 1)?;
        let spatial = Depthwise::new(&mut b.sub("spatial"), ESTIMATOR_HIDDEN, 5)?;
        let mut pb = b.sub("project");
        // bias of one starts the estimate near the identity illumination
        let project = Conv {
            weight: pb.uniform("weight", &[1, 1, ESTIMATOR_HIDDEN, 3], ESTIMATOR_HIDDEN)?,
            bias: pb.constant("bias", &[3], 1.0)?,
            kernel: 1,
            stride: 1,
            pad: 0,
        };
        Ok(Self { expand, spatial, project })
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, img: Var<'g>) -> Result<Var<'g>> {
        let prior = g.constant(illumination_prior(&img.value())?);
        let x = concat(&[img, prior], 2)?;
        let x = self.expand.forward(g, store, x)?;
        let x = self.spatial.forward(g, store, x)?;
        self.project.forward(g, store, x)
    }
}

/// `(I_lu, L)` with `I_lu = I ⊙ L`, left unclamped.
pub fn light_up<'g>(
    g: &'g Graph,
    store: &ParamStore,
    estimator: &Estimator,
    img: Var<'g>,
) -> Result<(Var<'g>, Var<'g>)> {
    let l = estimator.forward(g, store, img)?;
    Ok((img.mul(l)?, l))
}

/// Signal-to-noise map of a lit-up image with its normalised and binarised forms.
#[derive(Clone, Debug, PartialEq)]
pub struct SnrMap {
    pub raw: Tensor,
    pub norm: Tensor,
    pub binary: Tensor,
    pub tau: f64,
}

impl SnrMap {
    fn from_norm(raw: Tensor, norm: Tensor, tau: f64) -> Self {
        let binary = norm.map(|v| if v >= tau { 1.0 } else { 0.0 });
        Self { raw, norm, binary, tau }
    }

    /// Every pixel trusted to the image branch.
    pub fn all_ones(height: usize, width: usize, tau: f64) -> Self {
        let ones = Tensor::ones(&[height, width]);
        Self::from_norm(ones.clone(), ones, tau)
    }

    pub fn height(&self) -> usize {
        self.norm.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.norm.shape()[1]
    }

    /// `M̂` as `[H, W, 1]`.
    pub fn mask(&self) -> Tensor {
        self.binary.clone().reshape(&[self.height(), self.width(), 1]).expect("same numel")
    }

    /// `1 − M̂` as `[H, W, 1]`.
    pub fn complement(&self) -> Tensor {
        self.mask().map(|v| 1.0 - v)
    }
}

/// Box mean with edge replication.
fn mean_filter(plane: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let norm = (k * k) as f64;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in -r..=r {
                let yy = clamp(y as isize + dy, h);
                for dx in -r..=r {
                    s += plane[yy * w + clamp(x as isize + dx, w)];
                }
            }
            out[y * w + x] = s / norm;
        }
    }
    out
}

/// SNR map of an `[H, W, C]` image (C of 1 or 3). The result carries no gradient.
pub fn snr_map(img: &Tensor, kernel: usize, tau: f64) -> Result<SnrMap> {
    img.expect_rank("snr_map", 3)?;
    if kernel < 3 || kernel % 2 == 0 {
        return Err(Error::invalid(format!("SNR mean filter needs an odd kernel of at least 3, got {kernel}")));
    }
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::invalid(format!("SNR threshold must lie in [0, 1), got {tau}")));
    }
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let gray: Vec<f64> = match c {
        1 => img.data().to_vec(),
        3 => img
            .data()
            .chunks_exact(3)
            .map(|p| GRAY_WEIGHTS[0] * p[0] + GRAY_WEIGHTS[1] * p[1] + GRAY_WEIGHTS[2] * p[2])
            .collect(),
        _ => return Err(Error::dim("snr_map", "2 (channels)", 3, c)),
    };
    let smooth = mean_filter(&gray, h, w, kernel);
    let raw: Vec<f64> = gray
        .iter()
        .zip(&smooth)
        .map(|(&g, &s)| s.max(0.0) / (g - s).abs().max(SNR_EPS))
        .collect();
    let max = raw.iter().cloned().fold(0.0, f64::max);
    let norm: Vec<f64> = if max > 0.0 {
        raw.iter().map(|v| v / max).collect()
    } else {
        vec![1.0; h * w]
    };
    Ok(SnrMap::from_norm(
        Tensor::new(vec![h, w], raw)?,
        Tensor::new(vec![h, w], norm)?,
        tau,
    ))
}

/// Convenience wrapper over [`snr_map`] with the default kernel.
pub fn snr_map_of(img: &ImageTensor, tau: f64) -> Result<SnrMap> {
    snr_map(img.tensor(), DEFAULT_SNR_KERNEL, tau)
}

/// Level 0 is `map`; each further level average-pools the previous `norm` and re-binarises.
pub fn snr_pyramid(map: &SnrMap, levels: usize) -> Result<Vec<SnrMap>> {
    let f = 1usize << levels.saturating_sub(1);
    let (h, w) = (map.height(), map.width());
    if h % f != 0 || w % f != 0 {
        return Err(Error::invalid(format!(
            "SNR pyramid of {levels} levels needs extents divisible by {f}, got {h}x{w}; pad the input first"
        )));
    }
    let mut out = vec![map.clone()];
    for _ in 1..levels {
        let prev = out.last().unwrap();
        let pool = |t: &Tensor| -> Result<Tensor> {
            let (h, w) = (t.shape()[0], t.shape()[1]);
            avg_pool2(&t.clone().reshape(&[h, w, 1])?)?.reshape(&[h / 2, w / 2])
        };
        out.push(SnrMap::from_norm(pool(&prev.raw)?, pool(&prev.norm)?, map.tau));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::fill;
    use crate::numerics::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn estimator(seed: u64) -> (ParamStore, Estimator) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = Estimator::new(&mut ParamBuilder::new(&mut store, &mut rng).sub("est")).unwrap();
        (store, e)
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[h, w, 3], |_| rng.random::<f64>())
    }

    #[test]
    fn prior_is_channel_max() {
        let t = Tensor::new(vec![1, 1, 3], vec![0.2, 0.5, 0.1]).unwrap();
        assert_eq!(illumination_prior(&t).unwrap().data(), &[0.5]);
        let img = random_image(6, 5, 1);
        let p = illumination_prior(&img).unwrap();
        for (i, px) in img.data().chunks(3).enumerate() {
            assert_eq!(p.data()[i], px.iter().cloned().fold(f64::MIN, f64::max));
        }
        let gray = Tensor::from_fn(&[2, 2, 3], |i| (i / 3) as f64 * 0.1);
        let p = illumination_prior(&gray).unwrap();
        assert_eq!(p.data(), &[0.0, 0.1, 0.2, 0.30000000000000004]);
    }

    #[test]
    fn constant_illumination_scales_image() {
        let (mut store, e) = estimator(2);
        fill(&mut store, &[e.project.weight], 0.0);
        let img = random_image(8, 8, 3).map(|v| v * 0.5);
        for c in [1.0, 2.0] {
            fill(&mut store, &[e.project.bias], c);
            let g = Graph::new();
            let (lu, l) = light_up(&g, &store, &e, g.constant(img.clone())).unwrap();
            assert!(l.value().data().iter().all(|&v| v == c));
            assert_eq!(*lu.value(), img.map(|v| v * c));
        }
    }

    #[test]
    fn light_up_gradients() {
        let (store, e) = estimator(4);
        let img = random_image(8, 8, 5);
        // the prior is a constant of the data, so only the estimator is checked
        let r = gradcheck::check(&store, &[], 1e-5, |g, s, _| Ok(light_up(g, s, &e, g.constant(img.clone()))?.0))
            .unwrap();
        assert!(r.checked > 300);
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }

    #[test]
    fn constant_image_trusts_everything() {
        let img = Tensor::full(&[6, 7, 3], 0.3);
        let m = snr_map(&img, 5, 0.5).unwrap();
        assert!(m.raw.data().iter().all(|&v| (v - 0.3 / SNR_EPS).abs() < 1e-6));
        assert!(m.norm.data().iter().all(|&v| v == 1.0));
        assert!(m.binary.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn impulse_center_value() {
        let mut img = Tensor::zeros(&[5, 5, 1]);
        img.set(&[2, 2, 0], 1.0);
        let m = snr_map(&img, 3, 0.5).unwrap();
        assert!((m.raw.get(&[2, 2]) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn threshold_extremes_and_kernel_errors() {
        let img = random_image(8, 8, 6);
        let m = snr_map(&img, 5, 0.0).unwrap();
        assert!(m.binary.data().iter().all(|&v| v == 1.0));
        assert!(snr_map(&img, 4, 0.5).is_err());
        assert!(snr_map(&img, 1, 0.5).is_err());
        assert!(snr_map(&img, 5, 1.0).is_err());
    }

    #[test]
    fn partition_and_range() {
        let m = snr_map(&random_image(12, 12, 7), 5, 0.5).unwrap();
        let sum = m.mask().zip_map(&m.complement(), |a, b| a + b).unwrap();
        assert!(sum.data().iter().all(|&v| v == 1.0));
        assert!(m.norm.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(m.raw.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn raw_is_scale_invariant() {
        let img = random_image(16, 16, 8);
        let a = snr_map(&img, 5, 0.5).unwrap();
        let b = snr_map(&img.map(|v| v * 3.0), 5, 0.5).unwrap();
        let gray: Vec<f64> = img.data().chunks(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect();
        let smooth = mean_filter(&gray, 16, 16, 5);
        let mut checked = 0;
        for i in 0..256 {
            if (gray[i] - smooth[i]).abs() > 10.0 * SNR_EPS {
                let (ra, rb) = (a.raw.data()[i], b.raw.data()[i]);
                assert!((ra - rb).abs() <= 1e-9 * ra.max(1.0), "{ra} {rb}");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn snr_is_gradient_isolated() {
        let (mut store, e) = estimator(9);
        let img = random_image(8, 8, 10);
        let g = Graph::new();
        let (lu, _) = light_up(&g, &store, &e, g.constant(img.clone())).unwrap();
        let before = snr_map(&lu.value(), 5, 0.5).unwrap();
        // a parameter update after the map is built cannot reach it
        fill(&mut store, &[e.project.bias], 7.0);
        assert_eq!(snr_map(&lu.value(), 5, 0.5).unwrap(), before);
    }

    #[test]
    fn pyramid_levels() {
        let ones = SnrMap::all_ones(8, 8, 0.5);
        for (s, m) in snr_pyramid(&ones, 3).unwrap().iter().enumerate() {
            assert_eq!(m.norm.shape(), &[8 >> s, 8 >> s]);
            assert!(m.binary.data().iter().all(|&v| v == 1.0));
        }
        let checker = Tensor::from_fn(&[8, 8], |i| ((i / 8 + i % 8) % 2) as f64);
        let m = SnrMap::from_norm(checker.clone(), checker, 0.5);
        let p = snr_pyramid(&m, 3).unwrap();
        assert!(p[1].norm.data().iter().all(|&v| v == 0.5));
        assert!(p[1].binary.data().iter().all(|&v| v == 1.0));
        assert!(snr_pyramid(&SnrMap::all_ones(6, 8, 0.5), 3).is_err());
    }

    #[test]
    fn pyramid_matches_pooling_oracle() {
        let m = snr_map(&random_image(8, 12, 11), 5, 0.4).unwrap();
        let p = snr_pyramid(&m, 3).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                let n = |yy: usize, xx: usize| m.norm.get(&[yy, xx]);
                let want = (n(2 * y, 2 * x) + n(2 * y, 2 * x + 1) + n(2 * y + 1, 2 * x) + n(2 * y + 1, 2 * x + 1)) / 4.0;
                assert!((p[1].norm.get(&[y, x]) - want).abs() < 1e-15);
                assert_eq!(p[1].binary.get(&[y, x]), if p[1].norm.get(&[y, x]) >= 0.4 { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(p[2].norm.shape(), &[2, 3]);
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

pub const CHARBONNIER_EPS: f64 = 1e-4;

/// `sqrt(mean((en - gt)^2) + eps^2)`.
pub fn charbonnier<'g>(en: Var<'g>, gt: Var<'g>) -> Result<Var<'g>> {
    let d = en.sub(gt)?;
    d.mul(d)?.mean()?.add_scalar(CHARBONNIER_EPS * CHARBONNIER_EPS)?.sqrt()
}

#[derive(Clone, Debug)]
enum Stage {
    Identity,
    Conv { weight: Tensor, bias: Tensor },
}

/// Frozen feature pyramid standing in for a pretrained perceptual network.
///
/// Each stage after the first sees the 2× average-pooled output of the one
/// before; pooling stops once an extent turns odd.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    stages: Vec<Stage>,
}

pub const PERCEPTUAL_CHANNELS: [usize; 3] = [8, 16, 16];

impl FeatureExtractor {
    /// Three random 3×3 conv + ReLU stages drawn from `seed`.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let stages = PERCEPTUAL_CHANNELS
            .iter()
            .map(|&cout| {
                let bound = (6.0 / (9 * cin) as f64).sqrt();
                let weight = Tensor::from_fn(&[3, 3, cin, cout], |_| rng.random_range(-bound..bound));
                let bias = Tensor::zeros(&[cout]);
                cin = cout;
                Stage::Conv { weight, bias }
            })
            .collect();
        Self { stages }
    }

    /// One pass-through stage; the loss becomes `mean |en - gt|`.
    pub fn identity() -> Self {
        Self {
            stages: vec![Stage::Identity],
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    fn features<'g>(&self, x: Var<'g>) -> Result<Vec<Var<'g>>> {
        let g = x.graph();
        let mut out: Vec<Var<'g>> = Vec::with_capacity(self.stages.len());
        let mut cur = x;
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                let s = cur.shape();
                if s[0] % 2 != 0 || s[1] % 2 != 0 {
                    break;
                }
                cur = cur.avg_pool2()?;
            }
            cur = match stage {
                Stage::Identity => cur,
                Stage::Conv { weight, bias } => cur
                    .conv2d(g.constant(weight.clone()), g.constant(bias.clone()), 1, 1)?
                    .relu()?,
            };
            out.push(cur);
        }
        Ok(out)
    }
}

/// Sum over stages of the mean absolute feature difference.
pub fn perceptual<'g>(en: Var<'g>, gt: Var<'g>, phi: &FeatureExtractor) -> Result<Var<'g>> {
    let fa = phi.features(en)?;
    let fb = phi.features(gt)?;
    let mut total: Option<Var<'g>> = None;
    for (a, b) in fa.into_iter().zip(fb) {
        let term = a.sub(b)?.abs()?.mean()?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::invalid("feature extractor has no stages"))
}

/// A total loss and its two terms as plain numbers.
pub struct LossParts<'g> {
    pub total: Var<'g>,
    pub charbonnier: f64,
    pub perceptual: f64,
}

/// `charbonnier + lambda · perceptual`.
pub fn total_loss<'g>(en: Var<'g>, gt: Var<'g>, lambda: f64, phi: &FeatureExtractor) -> Result<LossParts<'g>> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    let c = charbonnier(en, gt)?;
    let p = perceptual(en, gt, phi)?;
    Ok(LossParts {
        total: c.add(p.mul_scalar(lambda)?)?,
        charbonnier: c.value().item(),
        perceptual: p.value().item(),
    })
}

/// Graph-free evaluation of [`total_loss`].
pub fn total_loss_value(en: &Tensor, gt: &Tensor, lambda: f64, phi: &FeatureExtractor) -> Result<f64> {
    let g = Graph::new();
    let parts = total_loss(g.constant(en.clone()), g.constant(gt.clone()), lambda, phi)?;
    Ok(parts.total.value().item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gradcheck, ParamStore};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random::<f64>())
    }

    #[test]
    fn charbonnier_values() {
        let g = Graph::new();
        let x = g.constant(random(&[4, 4, 3], 1));
        assert_eq!(charbonnier(x, x).unwrap().value().item(), CHARBONNIER_EPS);
        let y = g.constant(x.value().map(|v| v + 0.3));
        let want = (0.3f64 * 0.3 + CHARBONNIER_EPS * CHARBONNIER_EPS).sqrt();
        assert!((charbonnier(y, x).unwrap().value().item() - want).abs() < 1e-12);
    }

    #[test]
    fn charbonnier_gradients() {
        let inputs = [random(&[4, 4, 3], 2), random(&[4, 4, 3], 3)];
        let r = gradcheck::check(&ParamStore::new(), &inputs, 1e-6, |_, _, x| charbonnier(x[0], x[1])).unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn perceptual_identity_and_seeds() {
        let g = Graph::new();
        let a = g.constant(random(&[8, 8, 3], 4));
        let b = g.constant(random(&[8, 8, 3], 5));
        for seed in [1, 2] {
            assert_eq!(perceptual(a, a, &FeatureExtractor::random(seed)).unwrap().value().item(), 0.0);
        }
        let p1 = perceptual(a, b, &FeatureExtractor::random(1)).unwrap().value().item();
        let p2 = perceptual(a, b, &FeatureExtractor::random(2)).unwrap().value().item();
        assert!(p1 > 0.0 && p2 > 0.0 && p1 != p2);

        let id = perceptual(a, b, &FeatureExtractor::identity()).unwrap().value().item();
        let want = a.value().zip_map(&b.value(), |x, y| (x - y).abs()).unwrap().mean();
        assert!((id - want).abs() < 1e-15);
    }

    #[test]
    fn perceptual_gradients() {
        let inputs = [random(&[8, 8, 3], 6), random(&[8, 8, 3], 7)];
        let phi = FeatureExtractor::random(3);
        let r = gradcheck::check(&ParamStore::new(), &inputs, 1e-6, |_, _, x| perceptual(x[0], x[1], &phi)).unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }

    #[test]
    fn total_loss_parts() {
        let g = Graph::new();
        let a = g.constant(random(&[8, 8, 3], 8));
        let b = g.constant(random(&[8, 8, 3], 9));
        let phi = FeatureExtractor::random(4);
        let zero = total_loss(a, b, 0.0, &phi).unwrap();
        assert_eq!(zero.total.value().item(), charbonnier(a, b).unwrap().value().item());
        let same = total_loss(a, a, 0.1, &phi).unwrap();
        assert_eq!(same.total.value().item(), CHARBONNIER_EPS);
        let parts = total_loss(a, b, 0.1, &phi).unwrap();
        let want = parts.charbonnier + 0.1 * parts.perceptual;
        assert!((parts.total.value().item() - want).abs() < 1e-15);
        assert!(parts.total.value().item() >= CHARBONNIER_EPS);
        assert!(total_loss(a, b, -1.0, &phi).is_err());
    }
}

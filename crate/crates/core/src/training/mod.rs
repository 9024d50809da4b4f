//! Losses, the optimizer, augmentation and the training loop.

mod adam;
mod augment;
mod config;
mod loss;

pub use adam::{clip_grad_norm, grad_norm, Adam, AdamConfig};
pub use augment::{augment, AugmentConfig, Sample};
pub use config::TrainConfig;
pub use loss::{
    charbonnier, perceptual, total_loss, total_loss_value, FeatureExtractor, LossParts, CHARBONNIER_EPS,
    PERCEPTUAL_CHANNELS,
};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::event::{read_events, voxelize};
use crate::image::read_image;
use crate::model::EvLightModel;
use crate::numerics::{checkpoint, Graph, ParamStore};

/// Seed of the frozen perceptual feature extractor, fixed across runs.
pub const PERCEPTUAL_SEED: u64 = 0x00A1_E7;

/// One manifest line: `low<TAB>events<TAB>gt<TAB>t0<TAB>t1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplePair {
    pub low: PathBuf,
    pub events: PathBuf,
    pub gt: PathBuf,
    pub t0: u64,
    pub t1: u64,
}

/// Parses a manifest; relative paths are taken relative to `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<SamplePair>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len() as u64;
        let body = line.trim_end_matches(['\n', '\r']);
        if body.trim().is_empty() || body.trim_start().starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            what: "manifest",
            offset: start,
            message,
        };
        let fields: Vec<&str> = body.split('\t').collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 tab-separated fields, found {}", fields.len())));
        }
        let time = |s: &str| s.trim().parse::<u64>().map_err(|_| err(format!("invalid timestamp `{s}`")));
        let (t0, t1) = (time(fields[3])?, time(fields[4])?);
        if t1 <= t0 {
            return Err(err(format!("window [{t0}, {t1}] is empty")));
        }
        let path = |s: &str| base.join(s.trim());
        out.push(SamplePair {
            low: path(fields[0]),
            events: path(fields[1]),
            gt: path(fields[2]),
            t0,
            t1,
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<SamplePair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new("")))
}

/// Loads the images and voxelizes the events over the pair's window.
pub fn load_sample(pair: &SamplePair, bins: usize) -> Result<Sample> {
    let low = read_image(&pair.low)?;
    let gt = read_image(&pair.gt)?;
    let events = read_events(&pair.events)?.stream;
    let grid = voxelize(&events, bins, pair.t0, pair.t1)?;
    Sample::new(low, grid, gt)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub step: usize,
    pub loss: f64,
    pub charbonnier: f64,
    pub perceptual: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,loss,charbonnier,perceptual";

pub fn loss_csv(curve: &[StepLoss]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for r in curve {
        let _ = writeln!(s, "{},{},{},{}", r.step, r.loss, r.charbonnier, r.perceptual);
    }
    s
}

pub struct TrainOutcome {
    pub model: EvLightModel,
    pub store: ParamStore,
    pub curve: Vec<StepLoss>,
}

/// Trains from scratch. With `out_dir`, rewrites `latest.evlt` after every
/// epoch and finally writes `model.evlt` and `loss.csv`.
pub fn train(samples: &[Sample], config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("the training manifest is empty"));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (model, mut store) = EvLightModel::seeded(config.model(), config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let phi = FeatureExtractor::random(PERCEPTUAL_SEED);
    let aug = config.augment();
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), &store);
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();

    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch) {
            if config.max_steps.is_some_and(|m| curve.len() >= m) {
                break 'epochs;
            }
            let mut rec = StepLoss {
                step: curve.len(),
                loss: 0.0,
                charbonnier: 0.0,
                perceptual: 0.0,
            };
            let k = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = augment(&samples[i], &aug, &mut rng)?;
                let g = Graph::new();
                let out = model.forward(&g, &store, &s.low, &s.grid, None)?;
                let gt = g.constant(s.gt.tensor().clone());
                let parts = total_loss(out.enhanced, gt, config.lambda, &phi)?;
                let value = parts.total.value().item();
                if !value.is_finite() {
                    return Err(Error::NonFinite { op: "training loss" });
                }
                rec.loss += k * value;
                rec.charbonnier += k * parts.charbonnier;
                rec.perceptual += k * parts.perceptual;
                g.backward_into(parts.total.mul_scalar(k)?, &mut store)?;
            }
            let norm = clip_grad_norm(&mut store, config.clip);
            if norm > config.clip {
                log::info!("step {}: gradient norm {norm:.4} clipped to {}", rec.step, config.clip);
            }
            adam.step(&mut store);
            store.zero_grad();
            log::debug!("epoch {epoch} step {} loss {:.6}", rec.step, rec.loss);
            curve.push(rec);
        }
        if let Some(dir) = out_dir {
            checkpoint::save(&store, &dir.join("latest.evlt"))?;
        }
    }
    if let Some(dir) = out_dir {
        checkpoint::save(&store, &dir.join("model.evlt"))?;
        let p = dir.join("loss.csv");
        fs::write(&p, loss_csv(&curve)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(TrainOutcome { model, store, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::VoxelGrid;
    use crate::image::ImageTensor;
    use crate::numerics::Tensor;
    use rand::Rng;

    fn samples(n: usize, size: usize, bins: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let gt = ImageTensor::from_fn(size, size, 3, |_| rng.random::<f64>()).unwrap();
                let low = gt.scaled(0.125);
                let grid =
                    VoxelGrid::new(Tensor::from_fn(&[bins, size, size], |_| rng.random_range(-1.0..1.0))).unwrap();
                Sample::new(low, grid, gt).unwrap()
            })
            .collect()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            crop: 8,
            channels: 4,
            bins: 4,
            epochs: 2,
            batch: 2,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn manifest_parsing() {
        let m = parse_manifest("# pairs\na.ppm\tb.evst\tc.ppm\t0\t100\n\n/x/d.ppm\te.csv\tf.ppm\t5\t9\n", Path::new("/data"))
            .unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].low, Path::new("/data/a.ppm"));
        assert_eq!(m[1].low, Path::new("/x/d.ppm"));
        assert_eq!((m[1].t0, m[1].t1), (5, 9));
        let err = parse_manifest("a\tb\tc\t0\t1\na\tb\tc\t5\n", Path::new("")).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 10, .. }), "{err}");
        assert!(parse_manifest("a\tb\tc\t5\t5\n", Path::new("")).is_err());
    }

    #[test]
    fn empty_manifest_is_error() {
        assert!(train(&[], &tiny_config(), None).is_err());
    }

    #[test]
    fn seeded_runs_are_identical() {
        let data = samples(3, 12, 4, 1);
        let a = train(&data, &tiny_config(), None).unwrap();
        let b = train(&data, &tiny_config(), None).unwrap();
        assert_eq!(loss_csv(&a.curve), loss_csv(&b.curve));
        assert_eq!(a.curve.len(), 4);
    }

    #[test]
    fn lambda_changes_the_curve() {
        let data = samples(2, 8, 4, 2);
        let with = train(&data, &tiny_config(), None).unwrap();
        let without = train(&data, &TrainConfig { lambda: 0.0, ..tiny_config() }, None).unwrap();
        assert_ne!(with.curve[1].loss, without.curve[1].loss);
        assert_eq!(with.curve[0].charbonnier, without.curve[0].charbonnier);
    }

    #[test]
    fn writes_artifacts_and_honours_max_steps() {
        let dir = tempfile::tempdir().unwrap();
        let data = samples(2, 8, 4, 3);
        let cfg = TrainConfig {
            batch: 1,
            epochs: 5,
            max_steps: Some(3),
            ..tiny_config()
        };
        let out = train(&data, &cfg, Some(dir.path())).unwrap();
        assert_eq!(out.curve.len(), 3);
        let csv = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert!(csv.starts_with(LOSS_CSV_HEADER));
        assert_eq!(csv.lines().count(), 4);
        let mut store = out.store.clone();
        checkpoint::load_into(&mut store, &dir.path().join("model.evlt")).unwrap();
        assert!(dir.path().join("latest.evlt").exists());
    }
}

//! Synthetic low-light corpus: moving gradient squares over a gradient background.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::event::{simulate_events, write_events, Event, EventStream};
use crate::image::{write_image, ImageTensor};
use crate::training::SamplePair;

/// Exposure of the low-light frame relative to the normal one.
pub const LOW_LIGHT_SCALE: f64 = 0.125;
pub const LOW_LIGHT_NOISE_SIGMA: f64 = 0.02;
pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixtureConfig {
    pub pairs: usize,
    pub size: usize,
    pub seed: u64,
    /// Squares stay put, so no events are emitted.
    pub static_scene: bool,
    pub theta: f64,
    /// Window length in microseconds.
    pub span: u64,
    /// Intermediate frames rendered for the event simulator.
    pub substeps: usize,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            pairs: 2,
            size: 64,
            seed: 7,
            static_scene: false,
            theta: 0.15,
            span: 10_000,
            substeps: 8,
        }
    }
}

#[derive(Clone, Debug)]
struct Square {
    y: f64,
    x: f64,
    side: f64,
    vy: f64,
    vx: f64,
    c0: [f64; 3],
    c1: [f64; 3],
}

/// A scene description; frames are rendered at a time fraction in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Scene {
    size: usize,
    bg0: [f64; 3],
    bg1: [f64; 3],
    bg_dir: (f64, f64),
    squares: Vec<Square>,
}

fn color<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

impl Scene {
    pub fn random<R: Rng>(rng: &mut R, size: usize, moving: bool) -> Self {
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let n = rng.random_range(2..=3);
        let s = size as f64;
        let squares = (0..n)
            .map(|_| {
                let side = rng.random_range(s / 6.0..s / 3.0);
                let speed = if moving { rng.random_range(s / 16.0..s / 8.0) } else { 0.0 };
                let dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                Square {
                    y: rng.random_range(0.0..s - side),
                    x: rng.random_range(0.0..s - side),
                    side,
                    vy: speed * dir.sin(),
                    vx: speed * dir.cos(),
                    c0: color(rng, 0.3, 0.9),
                    c1: color(rng, 0.3, 0.9),
                }
            })
            .collect();
        Self {
            size,
            bg0: color(rng, 0.1, 0.35),
            bg1: color(rng, 0.1, 0.35),
            bg_dir: (angle.sin(), angle.cos()),
            squares,
        }
    }

    pub fn render(&self, t: f64) -> ImageTensor {
        let n = self.size;
        let s = n as f64;
        let mut data = vec![0.0; n * n * 3];
        for y in 0..n {
            for x in 0..n {
                let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
                let u = (((fy / s - 0.5) * self.bg_dir.0 + (fx / s - 0.5) * self.bg_dir.1) + 0.71) / 1.42;
                let mut px = lerp(self.bg0, self.bg1, u.clamp(0.0, 1.0));
                for sq in &self.squares {
                    let (sy, sx) = (sq.y + sq.vy * t, sq.x + sq.vx * t);
                    if fy >= sy && fy < sy + sq.side && fx >= sx && fx < sx + sq.side {
                        px = lerp(sq.c0, sq.c1, (fx - sx) / sq.side);
                    }
                }
                data[(y * n + x) * 3..][..3].copy_from_slice(&px);
            }
        }
        ImageTensor::from_fn(n, n, 3, |i| data[i]).expect("valid extent")
    }
}

fn lerp(a: [f64; 3], b: [f64; 3], u: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * u, a[1] + (b[1] - a[1]) * u, a[2] + (b[2] - a[2]) * u]
}

/// Scaled exposure before noise.
pub fn darken(img: &ImageTensor) -> ImageTensor {
    img.scaled(LOW_LIGHT_SCALE)
}

/// One generated pair held in memory.
#[derive(Clone, Debug)]
pub struct FixturePair {
    pub low: ImageTensor,
    pub gt: ImageTensor,
    pub events: EventStream,
    pub t0: u64,
    pub t1: u64,
}

/// Renders pair `index` of the corpus described by `config`.
pub fn make_pair(config: &FixtureConfig, index: usize) -> Result<FixturePair> {
    if config.size < 4 || config.substeps == 0 || config.span < config.substeps as u64 {
        return Err(Error::invalid("fixture size, substeps or span too small"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let scene = Scene::random(&mut rng, config.size, !config.static_scene);
    let t0 = index as u64 * config.span * 2;
    let t1 = t0 + config.span;
    let mut events: Vec<Event> = Vec::new();
    let mut prev = scene.render(0.0);
    for k in 1..=config.substeps {
        let frac = k as f64 / config.substeps as f64;
        let next = scene.render(frac);
        let ta = t0 + (k as u64 - 1) * config.span / config.substeps as u64;
        let tb = t0 + k as u64 * config.span / config.substeps as u64;
        events.extend_from_slice(simulate_events(&prev, &next, ta, tb, config.theta)?.events());
        prev = next;
    }
    let gt = prev;
    let noise = Normal::new(0.0, LOW_LIGHT_NOISE_SIGMA).expect("valid sigma");
    let dark = darken(&gt);
    let d = dark.data();
    let low = ImageTensor::from_fn(config.size, config.size, 3, |i| d[i] + noise.sample(&mut rng))?.clamped();
    let n = config.size as u16;
    Ok(FixturePair {
        low,
        gt,
        events: EventStream::new(n, n, events)?,
        t0,
        t1,
    })
}

/// Writes the corpus into `dir` and returns the manifest path and its entries.
pub fn generate(dir: &Path, config: &FixtureConfig) -> Result<(PathBuf, Vec<SamplePair>)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    let mut pairs = Vec::with_capacity(config.pairs);
    for i in 0..config.pairs {
        let p = make_pair(config, i)?;
        let names = [format!("pair{i:02}_low.pfm"), format!("pair{i:02}_events.evst"), format!("pair{i:02}_gt.pfm")];
        write_image(&p.low, &dir.join(&names[0]))?;
        write_events(&p.events, &dir.join(&names[1]))?;
        write_image(&p.gt, &dir.join(&names[2]))?;
        manifest.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", names[0], names[1], names[2], p.t0, p.t1));
        log::info!("fixture pair {i}: {} events", p.events.len());
        pairs.push(SamplePair {
            low: dir.join(&names[0]),
            events: dir.join(&names[1]),
            gt: dir.join(&names[2]),
            t0: p.t0,
            t1: p.t1,
        });
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok((path, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn darkening_scales_channel_means() {
        let p = make_pair(&FixtureConfig::default(), 0).unwrap();
        let d = darken(&p.gt);
        for c in 0..3 {
            let mean = |img: &ImageTensor| img.data().iter().skip(c).step_by(3).sum::<f64>();
            assert!((mean(&d) / mean(&p.gt) - 0.125).abs() < 1e-6);
        }
    }

    #[test]
    fn moving_scenes_emit_events_static_do_not() {
        let cfg = FixtureConfig::default();
        for i in 0..cfg.pairs {
            assert!(make_pair(&cfg, i).unwrap().events.len() > 0);
        }
        let still = FixtureConfig {
            static_scene: true,
            ..cfg
        };
        assert!(make_pair(&still, 0).unwrap().events.is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = FixtureConfig {
            size: 16,
            ..FixtureConfig::default()
        };
        generate(a.path(), &cfg).unwrap();
        generate(b.path(), &cfg).unwrap();
        let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert_eq!(names.len(), 7);
        for n in names {
            assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap());
        }
    }

    #[test]
    fn pairs_differ() {
        let cfg = FixtureConfig::default();
        assert_ne!(make_pair(&cfg, 0).unwrap().gt, make_pair(&cfg, 1).unwrap().gt);
    }
}

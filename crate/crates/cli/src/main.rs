use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use evlight::alignment::{align_report, match_scenes, matches_csv, parse_meta_csv};
use evlight::eval::{eval_csv, evaluate, metrics};
use evlight::event::{read_events, simulate_events, voxelize, write_events};
use evlight::fixtures::{generate, FixtureConfig};
use evlight::image::{read_image, write_image, ImageTensor};
use evlight::lightup::{light_up, snr_map, DEFAULT_SNR_KERNEL};
use evlight::model::{enhance_file, EvLightModel};
use evlight::numerics::{checkpoint, Graph, Tensor};
use evlight::training::{load_sample, read_manifest, train, Sample, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "evlight", version, about = "Event-guided low-light image enhancement")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// `key = value` file with training and model settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Voxel bins [default: 32].
    #[arg(long, global = true)]
    bins: Option<usize>,
    /// SNR threshold [default: 0.5].
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    crop: Option<usize>,
    /// Weight of the perceptual loss [default: 0.1].
    #[arg(long, global = true)]
    lambda: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Accumulate an event file into a voxel grid (single-tensor EVLT file).
    Voxelize {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Window start; defaults to the first event.
        #[arg(long)]
        t0: Option<u64>,
        /// Window end; defaults to the last event.
        #[arg(long)]
        t1: Option<u64>,
    },
    /// Emit events from the log-luma change between two frames.
    SimulateEvents {
        #[arg(long)]
        frame_a: PathBuf,
        #[arg(long)]
        frame_b: PathBuf,
        #[arg(long)]
        t_a: u64,
        #[arg(long)]
        t_b: u64,
        #[arg(long, default_value_t = 0.2)]
        theta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the illumination estimator.
    Lightup {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the normalised SNR map (PFM) and its binarisation (PGM).
    SnrMap {
        #[arg(long)]
        image: PathBuf,
        /// Light the image up with this model first.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SNR_KERNEL)]
        kernel: usize,
        #[arg(long)]
        out_norm: PathBuf,
        #[arg(long)]
        out_binary: PathBuf,
    },
    /// Enhance one image with its events.
    Enhance {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a manifest; writes checkpoints and loss.csv into the output directory.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Score a model (or the ground truth itself) on a manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, required_unless_present = "gt_as_prediction")]
        ckpt: Option<PathBuf>,
        /// Score each ground truth against itself.
        #[arg(long)]
        gt_as_prediction: bool,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pair low- and normal-light sequences per scene.
    AlignMatch {
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10.0)]
        threshold_ms: f64,
    },
    /// Generate the synthetic corpus and its manifest.
    Fixtures {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 2)]
        pairs: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long = "static")]
        static_scene: bool,
    },
    /// PSNR, PSNR* and SSIM of a prediction against a reference.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
}

fn resolve(global: &Global) -> Result<TrainConfig> {
    let mut c = match &global.config {
        Some(p) => TrainConfig::read(p).with_context(|| format!("reading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(v) = global.seed {
        c.seed = v;
    }
    if let Some(v) = global.bins {
        c.bins = v;
    }
    if let Some(v) = global.tau {
        c.tau = v;
    }
    if let Some(v) = global.crop {
        c.crop = v;
    }
    if let Some(v) = global.lambda {
        c.lambda = v;
    }
    Ok(c)
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn model_with(config: &TrainConfig, ckpt: Option<&Path>) -> Result<(EvLightModel, evlight::numerics::ParamStore)> {
    let (model, mut store) = EvLightModel::seeded(config.model(), config.seed)?;
    if let Some(p) = ckpt {
        checkpoint::load_into(&mut store, p).with_context(|| format!("loading checkpoint {}", p.display()))?;
    }
    Ok((model, store))
}

fn lit_image(config: &TrainConfig, ckpt: Option<&Path>, img: &ImageTensor) -> Result<Tensor> {
    let (model, store) = model_with(config, ckpt)?;
    let g = Graph::new();
    let (lit, _) = light_up(&g, &store, &model.estimator, g.constant(img.tensor().clone()))?;
    let t = (*lit.value()).clone();
    Ok(t)
}

/// Exit code 2 signals row-level failures in an otherwise completed run.
fn run(cli: Cli) -> Result<u8> {
    let config = resolve(&cli.global)?;
    eprintln!("# resolved config\n{config}");
    match cli.command {
        Command::Voxelize { events, out, t0, t1 } => {
            let stream = read_events(&events)?.stream;
            let first = stream.events().first().map_or(0, |e| e.t);
            let last = stream.events().last().map_or(1, |e| e.t);
            let t0 = t0.unwrap_or(first);
            let t1 = t1.unwrap_or(last.max(t0 + 1));
            let grid = voxelize(&stream, config.bins, t0, t1)?;
            let bytes = checkpoint::encode(&[("voxels", grid.tensor())])?;
            fs::write(&out, bytes).with_context(|| format!("writing {}", out.display()))?;
            log::info!("{} events into {} bins over [{t0}, {t1}]", stream.len(), config.bins);
        }
        Command::SimulateEvents {
            frame_a,
            frame_b,
            t_a,
            t_b,
            theta,
            out,
        } => {
            let s = simulate_events(&read_image(&frame_a)?, &read_image(&frame_b)?, t_a, t_b, theta)?;
            write_events(&s, &out)?;
            log::info!("{} events", s.len());
        }
        Command::Lightup { image, ckpt, out } => {
            let img = read_image(&image)?;
            let lit = lit_image(&config, ckpt.as_deref(), &img)?;
            write_image(&ImageTensor::new(lit)?.clamped(), &out)?;
        }
        Command::SnrMap {
            image,
            ckpt,
            kernel,
            out_norm,
            out_binary,
        } => {
            let img = read_image(&image)?;
            let src = match &ckpt {
                Some(p) => lit_image(&config, Some(p), &img)?,
                None => img.tensor().clone(),
            };
            let m = snr_map(&src, kernel, config.tau)?;
            let (h, w) = (m.height(), m.width());
            write_image(&ImageTensor::new(m.norm.clone().reshape(&[h, w, 1])?)?, &out_norm)?;
            write_image(&ImageTensor::new(m.mask())?, &out_binary)?;
            let kept = m.binary.sum() / (h * w) as f64;
            log::info!("{:.1}% of pixels at or above tau {}", 100.0 * kept, config.tau);
        }
        Command::Enhance {
            image,
            events,
            ckpt,
            out,
        } => {
            enhance_file(config.model(), &image, &events, &ckpt, &out)?;
        }
        Command::Train {
            manifest,
            out_dir,
            epochs,
            max_steps,
            lr,
        } => {
            let mut config = config;
            if let Some(v) = epochs {
                config.epochs = v;
            }
            if max_steps.is_some() {
                config.max_steps = max_steps;
            }
            if let Some(v) = lr {
                config.lr = v;
            }
            let pairs = read_manifest(&manifest)?;
            let samples: Vec<Sample> = pairs
                .iter()
                .map(|p| load_sample(p, config.bins).with_context(|| format!("loading {}", p.low.display())))
                .collect::<Result<_>>()?;
            let out = train(&samples, &config, Some(&out_dir))?;
            if let (Some(first), Some(last)) = (out.curve.first(), out.curve.last()) {
                log::info!("{} steps, loss {:.6} -> {:.6}", out.curve.len(), first.loss, last.loss);
            }
        }
        Command::Eval {
            manifest,
            ckpt,
            gt_as_prediction,
            out,
        } => {
            let pairs = read_manifest(&manifest)?;
            if pairs.is_empty() {
                bail!("manifest {} lists no samples", manifest.display());
            }
            let rows = if gt_as_prediction {
                evaluate(&pairs, config.bins, |s| Ok(s.gt.clone()))
            } else {
                let (model, store) = model_with(&config, ckpt.as_deref())?;
                evaluate(&pairs, config.bins, |s| model.enhance(&store, &s.low, &s.grid))
            };
            write_text(out.as_deref(), &eval_csv(&rows))?;
            let failed = rows.iter().filter(|r| r.metrics.is_err()).count();
            if failed > 0 {
                log::error!("{failed} of {} rows failed", rows.len());
                return Ok(2);
            }
        }
        Command::AlignMatch {
            meta,
            out,
            threshold_ms,
        } => {
            let text = fs::read_to_string(&meta).with_context(|| format!("reading {}", meta.display()))?;
            let scenes = match_scenes(&parse_meta_csv(&text)?)?;
            write_text(out.as_deref(), &matches_csv(&scenes))?;
            let threshold = (threshold_ms * 1000.0).round() as u64;
            let r = align_report(scenes.iter().map(|s| &s.1), threshold);
            eprintln!(
                "{} pairs, {:.1}% below {threshold_ms} ms, max error {} us",
                r.pairs,
                100.0 * r.fraction_below,
                r.max_error
            );
        }
        Command::Fixtures {
            out_dir,
            pairs,
            size,
            static_scene,
        } => {
            let fc = FixtureConfig {
                pairs,
                size,
                seed: config.seed,
                static_scene,
                ..FixtureConfig::default()
            };
            let (manifest, _) = generate(&out_dir, &fc)?;
            eprintln!("wrote {}", manifest.display());
        }
        Command::Metrics { pred, gt } => {
            let m = metrics(&read_image(&pred)?, &read_image(&gt)?)?;
            println!("path,psnr,psnr_star,ssim\n{},{:.6},{:.6},{:.6}", pred.display(), m.psnr, m.psnr_star, m.ssim);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EVLIGHT_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

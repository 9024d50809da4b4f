//! Per-sample quality metrics over a manifest.

use std::fmt::Write as _;

use crate::error::Result;
use crate::image::{psnr, psnr_star, ssim, ImageTensor};
use crate::training::{load_sample, Sample, SamplePair};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub path: String,
    pub metrics: std::result::Result<Metrics, String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub psnr: f64,
    pub psnr_star: f64,
    pub ssim: f64,
}

pub fn metrics(pred: &ImageTensor, gt: &ImageTensor) -> Result<Metrics> {
    Ok(Metrics {
        psnr: psnr(pred, gt)?,
        psnr_star: psnr_star(pred, gt)?,
        ssim: ssim(pred, gt)?,
    })
}

/// Loads every pair in order, predicts, and scores against the ground truth.
/// Failures are recorded on their row instead of aborting.
pub fn evaluate(
    pairs: &[SamplePair],
    bins: usize,
    mut predict: impl FnMut(&Sample) -> Result<ImageTensor>,
) -> Vec<EvalRow> {
    pairs
        .iter()
        .map(|pair| {
            let m = load_sample(pair, bins).and_then(|s| {
                let pred = predict(&s)?;
                metrics(&pred, &s.gt)
            });
            EvalRow {
                path: pair.low.display().to_string(),
                metrics: m.map_err(|e| e.to_string()),
            }
        })
        .collect()
}

/// Mean over rows without errors, if any.
pub fn mean(rows: &[EvalRow]) -> Option<Metrics> {
    let ok: Vec<&Metrics> = rows.iter().filter_map(|r| r.metrics.as_ref().ok()).collect();
    if ok.is_empty() {
        return None;
    }
    let n = ok.len() as f64;
    Some(Metrics {
        psnr: ok.iter().map(|m| m.psnr).sum::<f64>() / n,
        psnr_star: ok.iter().map(|m| m.psnr_star).sum::<f64>() / n,
        ssim: ok.iter().map(|m| m.ssim).sum::<f64>() / n,
    })
}

pub const EVAL_CSV_HEADER: &str = "path,psnr,psnr_star,ssim,error";

fn quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("# ssim: per-channel mean, gaussian window 11x11 sigma 1.5\n");
    s.push_str(EVAL_CSV_HEADER);
    s.push('\n');
    let line = |s: &mut String, path: &str, m: Option<&Metrics>, err: &str| {
        let _ = match m {
            Some(m) => writeln!(s, "{},{:.6},{:.6},{:.6},{}", quote(path), m.psnr, m.psnr_star, m.ssim, quote(err)),
            None => writeln!(s, "{},,,,{}", quote(path), quote(err)),
        };
    };
    for r in rows {
        match &r.metrics {
            Ok(m) => line(&mut s, &r.path, Some(m), ""),
            Err(e) => line(&mut s, &r.path, None, e),
        }
    }
    line(&mut s, "mean", mean(rows).as_ref(), "");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{generate, FixtureConfig};
    use std::path::PathBuf;

    #[test]
    fn ground_truth_scores_perfectly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = FixtureConfig {
            size: 16,
            ..FixtureConfig::default()
        };
        let (_, pairs) = generate(dir.path(), &cfg).unwrap();
        let rows = evaluate(&pairs, 8, |s| Ok(s.gt.clone()));
        for r in &rows {
            let m = r.metrics.as_ref().unwrap();
            assert_eq!(m.psnr, 100.0);
            assert!((m.ssim - 1.0).abs() < 1e-12);
        }
        let csv = eval_csv(&rows);
        assert!(csv.lines().last().unwrap().starts_with("mean,100.000000,100.000000,1.000000,"));
    }

    #[test]
    fn missing_files_become_row_errors() {
        let pair = SamplePair {
            low: PathBuf::from("/nonexistent/low.ppm"),
            events: PathBuf::from("/nonexistent/e.evst"),
            gt: PathBuf::from("/nonexistent/gt.ppm"),
            t0: 0,
            t1: 1,
        };
        let rows = evaluate(&[pair], 8, |s| Ok(s.gt.clone()));
        assert!(rows[0].metrics.is_err());
        let csv = eval_csv(&rows);
        assert!(csv.contains("/nonexistent/low.ppm,,,,"));
        assert!(csv.ends_with("mean,,,,\n"));
    }
}

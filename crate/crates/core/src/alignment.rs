//! Pairing low-light and normal-light captures by their start-to-first-frame intervals.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Largest side the exhaustive matcher accepts.
pub const MAX_EXHAUSTIVE: usize = 8;
/// Default report threshold, 10 ms in microseconds.
pub const DEFAULT_THRESHOLD_US: u64 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Condition {
    Low,
    Normal,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceMeta {
    pub id: String,
    pub condition: Condition,
    pub trajectory_start: u64,
    pub first_frame: u64,
    pub frame_interval: u64,
}

impl SequenceMeta {
    /// Microseconds from trajectory start to the first frame.
    pub fn interval(&self) -> Result<u64> {
        self.first_frame.checked_sub(self.trajectory_start).ok_or_else(|| {
            Error::invalid(format!(
                "sequence {}: first frame {} precedes trajectory start {}",
                self.id, self.first_frame, self.trajectory_start
            ))
        })
    }

    /// Part of the id before the first `/`, or the whole id.
    pub fn scene(&self) -> &str {
        self.id.split('/').next().unwrap_or(&self.id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `(low id, normal id, |interval difference|)`, ordered by low id.
    pub pairs: Vec<(String, String, u64)>,
    pub max_error: u64,
    pub mean_error: f64,
}

fn canonical(metas: &[SequenceMeta], side: &str) -> Result<Vec<(String, u64)>> {
    let mut v = metas
        .iter()
        .map(|m| Ok((m.id.clone(), m.interval()?)))
        .collect::<Result<Vec<_>>>()?;
    v.sort();
    if let Some(w) = v.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::invalid(format!("duplicate {side} sequence id `{}`", w[0].0)));
    }
    Ok(v)
}

/// Calls `f` with every injective map from `0..k` into `0..n`.
fn for_each_injection(k: usize, n: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(k: usize, used: &mut [bool], cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(k, used, cur, f);
                cur.pop();
                used[j] = false;
            }
        }
    }
    rec(k, &mut vec![false; n], &mut Vec::with_capacity(k), f);
}

/// One-to-one assignment minimising the largest interval error, then the
/// total error, then the id pairs in lexicographic order. The result does not
/// depend on the order of either input.
pub fn match_sequences(lows: &[SequenceMeta], normals: &[SequenceMeta]) -> Result<MatchResult> {
    if lows.is_empty() || normals.is_empty() {
        return Err(Error::invalid("matching needs at least one low-light and one normal-light sequence"));
    }
    if lows.len() > MAX_EXHAUSTIVE || normals.len() > MAX_EXHAUSTIVE {
        return Err(Error::invalid(format!(
            "exhaustive matching supports at most {MAX_EXHAUSTIVE} sequences per side, got {} and {}",
            lows.len(),
            normals.len()
        )));
    }
    let lo = canonical(lows, "low-light")?;
    let no = canonical(normals, "normal-light")?;
    let swap = lo.len() > no.len();
    let (small, large) = if swap { (&no, &lo) } else { (&lo, &no) };

    type Key = (u64, u64, Vec<(usize, usize)>);
    let mut best: Option<Key> = None;
    for_each_injection(small.len(), large.len(), &mut |map| {
        let mut max = 0;
        let mut sum = 0;
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(map.len());
        for (i, &j) in map.iter().enumerate() {
            let e = small[i].1.abs_diff(large[j].1);
            max = max.max(e);
            sum += e;
            pairs.push(if swap { (j, i) } else { (i, j) });
        }
        pairs.sort();
        let better = match &best {
            None => true,
            Some((bm, bs, bp)) => (max, sum).cmp(&(*bm, *bs)).then_with(|| pairs.cmp(bp)) == Ordering::Less,
        };
        if better {
            best = Some((max, sum, pairs));
        }
    });
    let (max_error, sum, idx) = best.expect("both sides are non-empty");
    let pairs: Vec<(String, String, u64)> = idx
        .into_iter()
        .map(|(l, n)| (lo[l].0.clone(), no[n].0.clone(), lo[l].1.abs_diff(no[n].1)))
        .collect();
    let mean_error = sum as f64 / pairs.len() as f64;
    Ok(MatchResult {
        pairs,
        max_error,
        mean_error,
    })
}

/// Splits by condition and matches within every scene, in scene order.
pub fn match_scenes(metas: &[SequenceMeta]) -> Result<Vec<(String, MatchResult)>> {
    let mut scenes: BTreeMap<&str, (Vec<SequenceMeta>, Vec<SequenceMeta>)> = BTreeMap::new();
    for m in metas {
        let e = scenes.entry(m.scene()).or_default();
        match m.condition {
            Condition::Low => e.0.push(m.clone()),
            Condition::Normal => e.1.push(m.clone()),
        }
    }
    scenes
        .into_iter()
        .map(|(scene, (l, n))| {
            let r = match_sequences(&l, &n).map_err(|e| Error::invalid(format!("scene `{scene}`: {e}")))?;
            Ok((scene.to_string(), r))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignReport {
    pub pairs: usize,
    /// Share of pairs whose error is strictly below the threshold.
    pub fraction_below: f64,
    pub max_error: u64,
    pub threshold: u64,
}

pub fn align_report<'a>(results: impl IntoIterator<Item = &'a MatchResult>, threshold: u64) -> AlignReport {
    let errors: Vec<u64> = results.into_iter().flat_map(|r| r.pairs.iter().map(|p| p.2)).collect();
    let below = errors.iter().filter(|&&e| e < threshold).count();
    AlignReport {
        pairs: errors.len(),
        fraction_below: if errors.is_empty() { 0.0 } else { below as f64 / errors.len() as f64 },
        max_error: errors.iter().copied().max().unwrap_or(0),
        threshold,
    }
}

/// Reads `id,condition,trajectory_start,first_frame,frame_interval` rows; a header row is optional.
pub fn parse_meta_csv(text: &str) -> Result<Vec<SequenceMeta>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len() as u64;
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') || body.starts_with("id,") {
            continue;
        }
        let err = |message: String| Error::Parse {
            what: "sequence metadata",
            offset: start,
            message,
        };
        let f: Vec<&str> = body.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", f.len())));
        }
        let condition = match f[1].to_ascii_lowercase().as_str() {
            "low" => Condition::Low,
            "normal" => Condition::Normal,
            other => return Err(err(format!("condition must be low or normal, got `{other}`"))),
        };
        let num = |s: &str| s.parse::<u64>().map_err(|_| err(format!("invalid microsecond value `{s}`")));
        let meta = SequenceMeta {
            id: f[0].to_string(),
            condition,
            trajectory_start: num(f[2])?,
            first_frame: num(f[3])?,
            frame_interval: num(f[4])?,
        };
        meta.interval().map_err(|e| err(e.to_string()))?;
        out.push(meta);
    }
    Ok(out)
}

/// `scene,low,normal,error_us` rows.
pub fn matches_csv(results: &[(String, MatchResult)]) -> String {
    let mut s = String::from("scene,low,normal,error_us\n");
    for (scene, r) in results {
        for (l, n, e) in &r.pairs {
            let _ = writeln!(s, "{scene},{l},{n},{e}");
        }
    }
    s
}

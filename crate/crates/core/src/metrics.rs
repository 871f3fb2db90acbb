//! Displacement, miss and ranking metrics over top-k mixture modes.
//!
//! Predictions and groundtruth are both expected in the agent frame.

use std::f64::consts::FRAC_PI_6;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{ModeTrajectory, Trajectory, TrajectoryGMM};

pub const DEFAULT_MISS_THRESHOLD: f64 = 2.0;
pub const DEFAULT_K: usize = 6;
/// Total displacement below which a future counts as stationary.
pub const STATIONARY_DISPLACEMENT: f64 = 2.0;

/// Mode indices ordered by weight, highest first; ties keep the lower index.
pub fn top_k_indices(gmm: &TrajectoryGMM, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > gmm.num_modes() {
        return Err(Error::InvalidInput(format!("k = {k} with {} modes", gmm.num_modes())));
    }
    let w = gmm.weights();
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// The `k` most probable modes with their (unrenormalized) weights.
pub fn top_k(gmm: &TrajectoryGMM, k: usize) -> Result<Vec<(f64, &ModeTrajectory)>> {
    let w = gmm.weights();
    Ok(top_k_indices(gmm, k)?.into_iter().map(|i| (w[i], gmm.mode(i))).collect())
}

fn check(gmm: &TrajectoryGMM, gt: &Trajectory) -> Result<usize> {
    if gt.len() != gmm.horizon() || gt.valid.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "groundtruth has {} steps, prediction {}",
            gt.len(),
            gmm.horizon()
        )));
    }
    gt.last_valid().ok_or_else(|| Error::InvalidInput("groundtruth has no valid step".into()))
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mean Euclidean error over the valid steps of `gt`.
pub fn ade(means: &[[f64; 2]], gt: &Trajectory) -> f64 {
    let (s, n) = gt
        .valid_steps()
        .fold((0.0, 0usize), |(s, n), t| (s + dist(means[t], gt.states[t]), n + 1));
    s / n as f64
}

/// Error at the last valid step of `gt`.
pub fn fde(means: &[[f64; 2]], gt: &Trajectory) -> f64 {
    gt.last_valid().map_or(f64::NAN, |t| dist(means[t], gt.states[t]))
}

pub fn min_ade(pred: &TrajectoryGMM, gt: &Trajectory, k: usize) -> Result<f64> {
    check(pred, gt)?;
    Ok(top_k_indices(pred, k)?
        .into_iter()
        .map(|i| ade(&pred.mode(i).means, gt))
        .fold(f64::INFINITY, f64::min))
}

pub fn min_fde(pred: &TrajectoryGMM, gt: &Trajectory, k: usize) -> Result<f64> {
    Ok(best_final(pred, gt, k)?.1)
}

/// Top-k mode with the smallest final error (first in rank order on ties).
fn best_final(pred: &TrajectoryGMM, gt: &Trajectory, k: usize) -> Result<(usize, f64)> {
    check(pred, gt)?;
    let mut best = (usize::MAX, f64::INFINITY);
    for i in top_k_indices(pred, k)? {
        let e = fde(&pred.mode(i).means, gt);
        if e < best.1 {
            best = (i, e);
        }
    }
    Ok(best)
}

/// Fraction of agents whose best top-k final error exceeds `threshold`.
pub fn miss_rate(preds: &[TrajectoryGMM], gts: &[Trajectory], k: usize, threshold: f64) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidInput(format!("{} predictions for {} agents", preds.len(), gts.len())));
    }
    if !(threshold > 0.0) {
        return Err(Error::InvalidInput("miss threshold must be positive".into()));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let errs = preds
        .par_iter()
        .zip(gts)
        .map(|(p, g)| min_fde(p, g, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(errs.iter().filter(|&&e| e > threshold).count() as f64 / errs.len() as f64)
}

/// Weight-averaged ADE over all modes.
pub fn w_ade(pred: &TrajectoryGMM, gt: &Trajectory) -> Result<f64> {
    check(pred, gt)?;
    Ok(pred
        .weights()
        .iter()
        .zip(pred.modes())
        .map(|(w, m)| w * ade(&m.means, gt))
        .sum())
}

/// `minFDE + (1 - π*)²` with `π*` the weight of the mode achieving minFDE.
pub fn brier_min_fde(pred: &TrajectoryGMM, gt: &Trajectory, k: usize) -> Result<f64> {
    let (i, e) = best_final(pred, gt, k)?;
    let p = pred.weights()[i];
    Ok(e + (1.0 - p) * (1.0 - p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Maneuver {
    Straight,
    Left,
    Right,
    Stationary,
}

impl Maneuver {
    pub const ALL: [Maneuver; 4] = [Maneuver::Straight, Maneuver::Left, Maneuver::Right, Maneuver::Stationary];

    pub fn as_str(self) -> &'static str {
        match self {
            Maneuver::Straight => "straight",
            Maneuver::Left => "left",
            Maneuver::Right => "right",
            Maneuver::Stationary => "stationary",
        }
    }
}

/// Bucket an agent-frame future by its geometry: stationary when the final
/// valid point is within 2 m of the origin, otherwise by the heading of the
/// last valid segment against ±π/6.
pub fn classify_maneuver(gt: &Trajectory) -> Maneuver {
    let steps: Vec<usize> = gt.valid_steps().collect();
    let Some(&last) = steps.last() else { return Maneuver::Stationary };
    let end = gt.states[last];
    if end[0].hypot(end[1]) < STATIONARY_DISPLACEMENT {
        return Maneuver::Stationary;
    }
    let from = if steps.len() >= 2 { gt.states[steps[steps.len() - 2]] } else { [0.0, 0.0] };
    let mut d = [end[0] - from[0], end[1] - from[1]];
    if d[0].hypot(d[1]) < 1e-6 {
        d = end;
    }
    let h = d[1].atan2(d[0]);
    if h > FRAC_PI_6 {
        Maneuver::Left
    } else if h < -FRAC_PI_6 {
        Maneuver::Right
    } else {
        Maneuver::Straight
    }
}

/// Average precision of one bucket. `entries` are `(weight, agent, hit)`
/// for every top-k mode; `agents` is the bucket size.
pub fn average_precision(entries: &[(f64, usize, bool)], agents: usize) -> f64 {
    if agents == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| {
        let (ea, eb) = (entries[a], entries[b]);
        eb.0.total_cmp(&ea.0).then(ea.1.cmp(&eb.1)).then(a.cmp(&b))
    });
    let mut matched = std::collections::HashSet::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let (mut r0, mut p0, mut area) = (0.0, 1.0, 0.0);
    for i in order {
        let (_, agent, hit) = entries[i];
        seen += 1;
        if hit && matched.insert(agent) {
            tp += 1;
        }
        let (r, p) = (tp as f64 / agents as f64, tp as f64 / seen as f64);
        area += (r - r0) * (p + p0) / 2.0;
        (r0, p0) = (r, p);
    }
    area
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketAp {
    pub maneuver: Maneuver,
    pub agents: usize,
    pub ap: f64,
}

/// Mean over non-empty maneuver buckets of the bucket average precision.
pub fn mean_ap(preds: &[TrajectoryGMM], gts: &[Trajectory], k: usize, threshold: f64) -> Result<(f64, Vec<BucketAp>)> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidInput(format!("{} predictions for {} agents", preds.len(), gts.len())));
    }
    let per_agent = preds
        .par_iter()
        .zip(gts)
        .map(|(p, g)| -> Result<(Maneuver, Vec<(f64, bool)>)> {
            check(p, g)?;
            let w = p.weights();
            let modes = top_k_indices(p, k)?
                .into_iter()
                .map(|i| (w[i], fde(&p.mode(i).means, g) <= threshold))
                .collect();
            Ok((classify_maneuver(g), modes))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut buckets = Vec::new();
    for m in Maneuver::ALL {
        let mut entries = Vec::new();
        let mut agents = 0;
        for (a, (bucket, modes)) in per_agent.iter().enumerate() {
            if *bucket == m {
                agents += 1;
                entries.extend(modes.iter().map(|&(w, hit)| (w, a, hit)));
            }
        }
        if agents > 0 {
            buckets.push(BucketAp {
                maneuver: m,
                agents,
                ap: average_precision(&entries, agents),
            });
        }
    }
    let map = if buckets.is_empty() {
        0.0
    } else {
        buckets.iter().map(|b| b.ap).sum::<f64>() / buckets.len() as f64
    };
    Ok((map, buckets))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub dataset: String,
    pub model: String,
    pub method: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: RunMeta,
    pub k: usize,
    pub miss_threshold: f64,
    pub n_agents: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub w_ade: f64,
    pub brier_min_fde: f64,
    pub map: f64,
    pub ap_buckets: Vec<BucketAp>,
}

/// All metrics averaged over agents.
pub fn evaluate(preds: &[TrajectoryGMM], gts: &[Trajectory], k: usize, threshold: f64, meta: RunMeta) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidInput(format!("{} predictions for {} agents", preds.len(), gts.len())));
    }
    let rows = preds
        .par_iter()
        .zip(gts)
        .map(|(p, g)| Ok([min_ade(p, g, k)?, min_fde(p, g, k)?, w_ade(p, g)?, brier_min_fde(p, g, k)?]))
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len();
    let mean = |c: usize| if n == 0 { 0.0 } else { rows.iter().map(|r| r[c]).sum::<f64>() / n as f64 };
    let (map, ap_buckets) = mean_ap(preds, gts, k, threshold)?;
    Ok(MetricsReport {
        meta,
        k,
        miss_threshold: threshold,
        n_agents: n,
        min_ade: mean(0),
        min_fde: mean(1),
        miss_rate: miss_rate(preds, gts, k, threshold)?,
        w_ade: mean(2),
        brier_min_fde: mean(3),
        map,
        ap_buckets,
    })
}

pub const CSV_HEADER: [&str; 12] = [
    "run_id",
    "dataset",
    "model",
    "method",
    "k",
    "minADE",
    "minFDE",
    "MR",
    "wADE",
    "brier_minFDE",
    "mAP",
    "n_agents",
];

/// Write reports as CSV with six decimals per metric.
pub fn write_metrics_csv<W: Write>(out: W, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in reports {
        let f = |v: f64| format!("{v:.6}");
        w.write_record([
            r.meta.run_id.clone(),
            r.meta.dataset.clone(),
            r.meta.model.clone(),
            r.meta.method.clone(),
            r.k.to_string(),
            f(r.min_ade),
            f(r.min_fde),
            f(r.miss_rate),
            f(r.w_ade),
            f(r.brier_min_fde),
            f(r.map),
            r.n_agents.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

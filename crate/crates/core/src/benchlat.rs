//! Inference latency and scaling harness for the agent-centric teacher and
//! the scene-centric student.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::PointSet2;
use crate::models::{count_flops, ModelKind, ModelParams};
use crate::scenegen::{
    stream, Agent, HistoryStep, PolylineKind, RoadPolyline, Scene, SignalState, TrafficSignal, HISTORY_DT, SCHEMA_VERSION,
    TARGET_EXTENT,
};

pub const WARMUP_ITERS: usize = 3;
pub const MIN_REPS: usize = 5;
pub const BENCH_CSV_HEADER: [&str; 7] = ["n", "m", "model", "median_s", "p10_s", "p90_s", "flops"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub n: usize,
    pub m: usize,
    pub model: ModelKind,
    pub median_s: f64,
    pub p10_s: f64,
    pub p90_s: f64,
    pub reps: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub model: ModelKind,
    pub exponent: f64,
    pub r2: f64,
    pub points: usize,
}

/// A synthetic scene with exactly `n` prediction targets and `m` road
/// polylines, every agent inside the student raster.
pub fn bench_scene(n: usize, m: usize, history_len: usize, future_len: usize, seed: u64) -> Scene {
    let mut rng = stream(seed, (n as u64) << 32 | m as u64, "bench");
    let half = TARGET_EXTENT - 1.0;
    let roadgraph = (0..m)
        .map(|i| {
            let (x0, y0) = (rng.random_range(-half..half), rng.random_range(-half..half));
            let a: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let points = (0..8).map(|k| [x0 + a.cos() * k as f64 * 3.0, y0 + a.sin() * k as f64 * 3.0]).collect();
            RoadPolyline {
                id: i as u32,
                kind: PolylineKind::LaneCenter,
                speed_limit_mps: 12.0,
                points: PointSet2(points),
            }
        })
        .collect();
    let agents = (0..n)
        .map(|i| {
            let (x, y) = (rng.random_range(-half..half), rng.random_range(-half..half));
            let heading: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let speed = rng.random_range(0.0..10.0);
            let (vx, vy) = (speed * heading.cos(), speed * heading.sin());
            let history = (0..history_len)
                .map(|k| {
                    let back = (history_len - 1 - k) as f64 * HISTORY_DT;
                    HistoryStep {
                        x: (x - vx * back).clamp(-half, half),
                        y: (y - vy * back).clamp(-half, half),
                        heading,
                        vx,
                        vy,
                        valid: true,
                    }
                })
                .collect();
            Agent {
                id: i as u32,
                history,
                future: vec![[x, y]; future_len],
                is_prediction_target: true,
                intent: None,
            }
        })
        .collect();
    Scene {
        schema_version: SCHEMA_VERSION,
        scene_id: format!("bench-n{n}-m{m}"),
        history_len,
        future_len,
        roadgraph,
        signals: vec![TrafficSignal {
            id: 0,
            position: [0.0, 0.0],
            states: vec![SignalState::Green; history_len],
        }],
        agents,
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Time full-scene inference of each model at each agent count. The timed
/// region runs on the calling thread only.
pub fn run_bench(agent_counts: &[usize], m: usize, reps: usize, models: &[&ModelParams], seed: u64) -> Result<Vec<BenchPoint>> {
    if reps < MIN_REPS {
        return Err(Error::Config(format!("reps must be at least {MIN_REPS}, got {reps}")));
    }
    let mut out = Vec::with_capacity(agent_counts.len() * models.len());
    for params in models {
        let cfg = &params.config;
        for &n in agent_counts {
            let scene = bench_scene(n, m, cfg.history_len(), cfg.horizon(), seed);
            let targets = scene.target_ids();
            for _ in 0..WARMUP_ITERS {
                params.predict(&scene, &targets)?;
            }
            let mut times = Vec::with_capacity(reps);
            for _ in 0..reps {
                let t = Instant::now();
                let preds = params.predict(&scene, &targets)?;
                let dt = t.elapsed().as_secs_f64();
                std::hint::black_box(preds);
                times.push(dt.max(f64::MIN_POSITIVE));
            }
            times.sort_by(f64::total_cmp);
            out.push(BenchPoint {
                n,
                m,
                model: params.kind(),
                median_s: percentile(&times, 0.5),
                p10_s: percentile(&times, 0.1),
                p90_s: percentile(&times, 0.9),
                reps,
                flops: count_flops(params.kind(), n, m, cfg),
            });
        }
    }
    Ok(out)
}

/// Least-squares slope and R² of `ln t` against `ln n`.
pub fn fit_exponent(ns: &[usize], times: &[f64]) -> Result<(f64, f64)> {
    if ns.len() != times.len() || ns.len() < 2 {
        return Err(Error::InvalidInput("need at least two (n, time) pairs".into()));
    }
    if ns.iter().any(|&n| n == 0) || times.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::InvalidInput("agent counts and times must be positive".into()));
    }
    let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput("agent counts must not all be equal".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy <= 1e-24 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    Ok((if syy <= 1e-24 { 0.0 } else { slope }, r2))
}

/// Fit the time-vs-n exponent per model over the upper half of its
/// agent counts.
pub fn fit_scaling(points: &[BenchPoint]) -> Result<Vec<ScalingFit>> {
    let mut fits = Vec::new();
    for kind in [ModelKind::Teacher, ModelKind::Student] {
        let mut pts: Vec<&BenchPoint> = points.iter().filter(|p| p.model == kind).collect();
        if pts.is_empty() {
            continue;
        }
        if pts.len() < 4 {
            return Err(Error::InvalidInput(format!("{} needs at least 4 bench points, got {}", kind.as_str(), pts.len())));
        }
        pts.sort_by_key(|p| p.n);
        let tail = &pts[pts.len() / 2..];
        let ns: Vec<usize> = tail.iter().map(|p| p.n).collect();
        let ts: Vec<f64> = tail.iter().map(|p| p.median_s).collect();
        let (exponent, r2) = fit_exponent(&ns, &ts)?;
        fits.push(ScalingFit {
            model: kind,
            exponent,
            r2,
            points: tail.len(),
        });
    }
    Ok(fits)
}

pub fn write_bench_csv(points: &[BenchPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(BENCH_CSV_HEADER).map_err(csv_err)?;
    for p in points {
        w.write_record([
            p.n.to_string(),
            p.m.to_string(),
            p.model.as_str().to_string(),
            format!("{:.9}", p.median_s),
            format!("{:.9}", p.p10_s),
            format!("{:.9}", p.p90_s),
            p.flops.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidInput(format!("csv: {other:?}")),
    }
}

/// Log-log plot of median time against agent count, one polyline per model.
pub fn bench_svg(points: &[BenchPoint]) -> String {
    let (w, h, pad) = (640.0, 420.0, 60.0);
    let pos: Vec<&BenchPoint> = points.iter().filter(|p| p.n > 0 && p.median_s > 0.0).collect();
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M {pad} {pad} L {pad} {b} L {r} {b}" stroke="black" fill="none"/>"#,
        b = h - pad,
        r = w - pad / 2.0
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="14" text-anchor="middle">agents n (log)</text>"#, w / 2.0, h - 15.0);
    let _ = writeln!(
        s,
        r#"<text x="18" y="{y}" font-size="14" text-anchor="middle" transform="rotate(-90 18 {y})">median seconds (log)</text>"#,
        y = h / 2.0
    );
    if !pos.is_empty() {
        let lx: Vec<f64> = pos.iter().map(|p| (p.n as f64).log10()).collect();
        let ly: Vec<f64> = pos.iter().map(|p| p.median_s.log10()).collect();
        let range = |v: &[f64]| {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi - lo < 1e-9 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        let ((x0, x1), (y0, y1)) = (range(&lx), range(&ly));
        let px = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 1.5 * pad);
        let py = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
        for (kind, color) in [(ModelKind::Teacher, "#c0392b"), (ModelKind::Student, "#2c7bb6")] {
            let mut pts: Vec<&BenchPoint> = pos.iter().copied().filter(|p| p.model == kind).collect();
            if pts.is_empty() {
                continue;
            }
            pts.sort_by_key(|p| p.n);
            let coords: Vec<String> = pts
                .iter()
                .map(|p| format!("{:.2},{:.2}", px((p.n as f64).log10()), py(p.median_s.log10())))
                .collect();
            let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#, coords.join(" "));
            for c in &coords {
                let (cx, cy) = c.split_once(',').unwrap_or(("0", "0"));
                let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
            }
            let last = coords.last().map(String::as_str).unwrap_or("0,0");
            let (lx_, ly_) = last.split_once(',').unwrap_or(("0", "0"));
            let _ = writeln!(
                s,
                r#"<text x="{lx_}" y="{ly_}" dx="6" dy="-6" font-size="12" fill="{color}">{}</text>"#,
                kind.as_str()
            );
        }
        for p in pos.iter().filter(|p| p.model == pos[0].model) {
            let x = px((p.n as f64).log10());
            let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" font-size="11" text-anchor="middle">{}</text>"#, h - pad + 16.0, p.n);
        }
    }
    s.push_str("</svg>\n");
    s
}

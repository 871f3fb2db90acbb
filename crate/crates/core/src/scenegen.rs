//! Synthetic intersection scenes with a known generative process.
//!
//! Each scene is a 3- or 4-arm intersection (one incoming and one outgoing
//! lane per arm, turn connectors, road edges, crosswalks and one signal per
//! arm). Vehicles follow lanes under a latent intent drawn from a prior
//! restricted to the maneuvers their lane allows. Every scene is a pure
//! function of `(seed, scene_index)`.
//!
//! Datasets are JSON lines: a header line, then one scene per line.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geom::{PointSet2, Pose2};
use crate::gmm::Trajectory;

pub const SCHEMA_VERSION: u32 = 1;
pub const HISTORY_DT: f64 = 0.1;
pub const FUTURE_DT: f64 = 0.2;

const LANE_WIDTH: f64 = 3.6;
/// Distance from the intersection center to each stop line.
const STOP_DIST: f64 = 8.0;
const ARM_LENGTH: f64 = 30.0;
const LANE_SPEED: f64 = 13.9;
const TURN_SPEED: f64 = 8.0;
const MAX_LATERAL: f64 = 1.5;
const SIGNAL_CYCLE: f64 = 20.0;
/// Prediction targets have their current position inside this half-width box.
pub const TARGET_EXTENT: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolylineKind {
    LaneCenter,
    Boundary,
    Crosswalk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadPolyline {
    pub id: u32,
    pub kind: PolylineKind,
    pub speed_limit_mps: f64,
    pub points: PointSet2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalState {
    Red,
    Yellow,
    Green,
    Unknown,
}

impl SignalState {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficSignal {
    pub id: u32,
    pub position: [f64; 2],
    pub states: Vec<SignalState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryStep {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub vx: f64,
    pub vy: f64,
    pub valid: bool,
}

impl HistoryStep {
    const INVALID: HistoryStep = HistoryStep {
        x: 0.0,
        y: 0.0,
        heading: 0.0,
        vx: 0.0,
        vy: 0.0,
        valid: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntentKind {
    Straight,
    Left,
    Right,
    Stop,
}

impl IntentKind {
    pub const ALL: [IntentKind; 4] = [IntentKind::Straight, IntentKind::Left, IntentKind::Right, IntentKind::Stop];

    pub fn as_str(self) -> &'static str {
        match self {
            IntentKind::Straight => "straight",
            IntentKind::Left => "left",
            IntentKind::Right => "right",
            IntentKind::Stop => "stop",
        }
    }
}

/// Latent intent: the exact conditional distribution used by the generator
/// and the maneuver it drew.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentRecord {
    pub labels: Vec<String>,
    pub probs: Vec<f64>,
    pub realized: IntentKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: u32,
    pub history: Vec<HistoryStep>,
    pub future: Vec<[f64; 2]>,
    pub is_prediction_target: bool,
    pub intent: Option<IntentRecord>,
}

impl Agent {
    pub fn current(&self) -> Option<&HistoryStep> {
        self.history.last().filter(|s| s.valid)
    }

    /// Pose at the last history step (the prediction anchor).
    pub fn current_pose(&self) -> Result<Pose2> {
        let s = self.current().ok_or(Error::EmptyHistory(self.id))?;
        Pose2::new(s.x, s.y, s.heading)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub schema_version: u32,
    pub scene_id: String,
    pub history_len: usize,
    pub future_len: usize,
    pub roadgraph: Vec<RoadPolyline>,
    pub signals: Vec<TrafficSignal>,
    pub agents: Vec<Agent>,
}

impl Scene {
    pub fn agent(&self, id: u32) -> Result<&Agent> {
        self.agents.iter().find(|a| a.id == id).ok_or(Error::UnknownAgent(id))
    }

    pub fn target_ids(&self) -> Vec<u32> {
        self.agents.iter().filter(|a| a.is_prediction_target).map(|a| a.id).collect()
    }

    /// Groundtruth future of `id` expressed in its own agent frame.
    pub fn future_in_agent_frame(&self, id: u32) -> Result<Trajectory> {
        let a = self.agent(id)?;
        let pose = a.current_pose()?;
        Ok(Trajectory::fully_valid(a.future.iter().map(|&p| pose.apply_inverse(p)).collect()))
    }

    /// Apply a rigid transform to every spatial quantity in the scene.
    pub fn transformed(&self, g: &Pose2) -> Scene {
        let mut s = self.clone();
        for pl in &mut s.roadgraph {
            pl.points.0.iter_mut().for_each(|p| *p = g.apply(*p));
        }
        for sig in &mut s.signals {
            sig.position = g.apply(sig.position);
        }
        for a in &mut s.agents {
            for h in a.history.iter_mut().filter(|h| h.valid) {
                let p = g.apply([h.x, h.y]);
                let v = g.rotate([h.vx, h.vy]);
                *h = HistoryStep {
                    x: p[0],
                    y: p[1],
                    heading: crate::geom::normalize_angle(h.heading + g.heading()),
                    vx: v[0],
                    vy: v[1],
                    valid: true,
                };
            }
            a.future.iter_mut().for_each(|p| *p = g.apply(*p));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(format!("scene {}: {msg}", self.scene_id)));
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema {
                what: "scene",
                found: self.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        for pl in &self.roadgraph {
            if pl.points.len() < 2 {
                return bad(format!("polyline {} has fewer than 2 points", pl.id));
            }
            if pl.points.0.windows(2).any(|w| w[0] == w[1]) {
                return bad(format!("polyline {} repeats a point", pl.id));
            }
            if pl.points.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) || !pl.speed_limit_mps.is_finite() {
                return bad(format!("polyline {} is not finite", pl.id));
            }
        }
        for sig in &self.signals {
            if sig.states.len() != self.history_len {
                return bad(format!("signal {} has {} states", sig.id, sig.states.len()));
            }
            if !(sig.position[0].is_finite() && sig.position[1].is_finite()) {
                return bad(format!("signal {} is not finite", sig.id));
            }
        }
        let mut ids: Vec<u32> = self.agents.iter().map(|a| a.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate agent id".into());
        }
        for a in &self.agents {
            if a.history.len() != self.history_len {
                return bad(format!("agent {} history length {}", a.id, a.history.len()));
            }
            let finite = a.history.iter().all(|h| {
                [h.x, h.y, h.heading, h.vx, h.vy].iter().all(|v| v.is_finite())
            }) && a.future.iter().all(|p| p[0].is_finite() && p[1].is_finite());
            if !finite {
                return bad(format!("agent {} is not finite", a.id));
            }
            if a.is_prediction_target {
                if a.current().is_none() {
                    return bad(format!("target {} has no current state", a.id));
                }
                if a.future.len() != self.future_len {
                    return bad(format!("target {} future length {}", a.id, a.future.len()));
                }
            }
            if let Some(intent) = &a.intent {
                let s: f64 = intent.probs.iter().sum();
                if intent.labels.len() != intent.probs.len() || (s - 1.0).abs() > 1e-9 {
                    return bad(format!("agent {} intent distribution is invalid", a.id));
                }
            }
        }
        Ok(())
    }
}

/// Exact conditional intent probabilities for a target, ordered
/// straight, left, right, stop.
pub fn true_intent_distribution(scene: &Scene, agent_id: u32) -> Result<[f64; 4]> {
    let a = scene.agent(agent_id)?;
    let rec = a
        .intent
        .as_ref()
        .ok_or_else(|| Error::InvalidInput(format!("agent {agent_id} has no intent record")))?;
    let mut out = [0.0; 4];
    for (label, p) in rec.labels.iter().zip(&rec.probs) {
        if let Some(i) = IntentKind::ALL.iter().position(|k| k.as_str() == label) {
            out[i] = *p;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub num_scenes: usize,
    pub seed: u64,
    /// Inclusive range of agents per scene.
    pub agents_per_scene: [usize; 2],
    pub max_targets: usize,
    pub arm_choices: Vec<usize>,
    /// Prior over straight, left, right, stop.
    pub intent_prior: [f64; 4],
    pub accel_sigma: f64,
    pub lateral_sigma: f64,
    pub incoming_fraction: f64,
    pub history_len: usize,
    pub future_len: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_scenes: 1000,
            seed: 17,
            agents_per_scene: [4, 10],
            max_targets: 8,
            arm_choices: vec![3, 4],
            intent_prior: [0.4, 0.2, 0.2, 0.2],
            accel_sigma: 0.5,
            lateral_sigma: 0.3,
            incoming_fraction: 0.75,
            history_len: 10,
            future_len: 16,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.arm_choices.is_empty() || self.arm_choices.iter().any(|&a| !(3..=4).contains(&a)) {
            return Err(Error::Config(format!("arm choices must be 3 or 4, got {:?}", self.arm_choices)));
        }
        if self.agents_per_scene[0] > self.agents_per_scene[1] || self.agents_per_scene[1] == 0 {
            return Err(Error::Config(format!("bad agent range {:?}", self.agents_per_scene)));
        }
        let s: f64 = self.intent_prior.iter().sum();
        if self.intent_prior.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("intent prior must be a distribution, got {:?}", self.intent_prior)));
        }
        if !(self.accel_sigma >= 0.0 && self.lateral_sigma >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.incoming_fraction) {
            return Err(Error::Config("incoming_fraction must lie in [0, 1]".into()));
        }
        if self.history_len < 2 || self.future_len == 0 {
            return Err(Error::Config("history_len ≥ 2 and future_len ≥ 1 required".into()));
        }
        Ok(())
    }
}

/// Independent generator stream for `(seed, index, purpose)`.
pub(crate) fn stream(seed: u64, index: u64, purpose: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

// ---------------------------------------------------------------------------
// Paths
// ---------------------------------------------------------------------------

/// Arc-length parameterized polyline; extrapolates linearly past either end.
#[derive(Debug, Clone)]
struct Path2 {
    pts: Vec<[f64; 2]>,
    cum: Vec<f64>,
}

impl Path2 {
    fn new(raw: Vec<[f64; 2]>) -> Self {
        let mut pts: Vec<[f64; 2]> = Vec::with_capacity(raw.len());
        for p in raw {
            if pts.last().is_none_or(|q| dist(*q, p) > 1e-9) {
                pts.push(p);
            }
        }
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            cum.push(cum.last().unwrap() + dist(w[0], w[1]));
        }
        Self { pts, cum }
    }

    fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Position and unit tangent at arc length `s`.
    fn at(&self, s: f64) -> ([f64; 2], [f64; 2]) {
        let n = self.pts.len();
        let i = match self.cum.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.clamp(1, n - 1) - 1,
        };
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        let len = self.cum[i + 1] - self.cum[i];
        let t = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
        let u = s - self.cum[i];
        ([a[0] + t[0] * u, a[1] + t[1] * u], t)
    }

    /// Arc length of the point on the path nearest `p`.
    fn project(&self, p: [f64; 2]) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..self.pts.len() - 1 {
            let (a, b) = (self.pts[i], self.pts[i + 1]);
            let len = self.cum[i + 1] - self.cum[i];
            let u = (((p[0] - a[0]) * (b[0] - a[0]) + (p[1] - a[1]) * (b[1] - a[1])) / len).clamp(0.0, len);
            let q = [a[0] + (b[0] - a[0]) * u / len, a[1] + (b[1] - a[1]) * u / len];
            let d = dist(p, q);
            if d < best.0 {
                best = (d, self.cum[i] + u);
            }
        }
        best.1
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn add(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] + b[0], a[1] + b[1]]
}

fn scale(a: [f64; 2], c: f64) -> [f64; 2] {
    [a[0] * c, a[1] * c]
}

/// Right-hand normal of a heading vector.
fn right_of(h: [f64; 2]) -> [f64; 2] {
    [h[1], -h[0]]
}

fn left_of(h: [f64; 2]) -> [f64; 2] {
    [-h[1], h[0]]
}

fn line(a: [f64; 2], b: [f64; 2], spacing: f64) -> Vec<[f64; 2]> {
    let n = (dist(a, b) / spacing).ceil().max(1.0) as usize;
    (0..=n).map(|i| add(a, scale([b[0] - a[0], b[1] - a[1]], i as f64 / n as f64))).collect()
}

fn bezier(p0: [f64; 2], h0: [f64; 2], p3: [f64; 2], h3: [f64; 2], n: usize) -> Vec<[f64; 2]> {
    let k = 0.45 * dist(p0, p3);
    let p1 = add(p0, scale(h0, k));
    let p2 = add(p3, scale(h3, -k));
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            let u = 1.0 - t;
            let w = [u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t];
            [
                w[0] * p0[0] + w[1] * p1[0] + w[2] * p2[0] + w[3] * p3[0],
                w[0] * p0[1] + w[1] * p1[1] + w[2] * p2[1] + w[3] * p3[1],
            ]
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Arm {
    /// Outward unit direction from the intersection center.
    dir: [f64; 2],
    incoming: Path2,
    outgoing: Path2,
    signal: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    arms: Vec<Arm>,
    /// `connectors[a][m]`: path from arm `a` for maneuver `m` (straight,
    /// left, right), with the destination arm.
    connectors: Vec<[Option<(Path2, usize)>; 3]>,
    roadgraph: Vec<RoadPolyline>,
    signals: Vec<TrafficSignal>,
}

fn signal_state(t: f64, phase: usize) -> SignalState {
    let u = (t + phase as f64 * SIGNAL_CYCLE / 2.0).rem_euclid(SIGNAL_CYCLE);
    if u < 8.0 {
        SignalState::Green
    } else if u < 10.0 {
        SignalState::Yellow
    } else {
        SignalState::Red
    }
}

fn build_layout(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Layout {
    let n_arms = cfg.arm_choices[rng.random_range(0..cfg.arm_choices.len())];
    let rot = rng.random_range(-PI..PI);
    let center = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
    let dropped = if n_arms == 3 { Some(rng.random_range(0..4)) } else { None };
    let cycle_offset = rng.random_range(0.0..SIGNAL_CYCLE);
    let dark = rng.random_bool(0.05);

    let mut roadgraph = Vec::new();
    let mut next_id = 0u32;
    let mut push = |roadgraph: &mut Vec<RoadPolyline>, kind, speed, pts: Vec<[f64; 2]>| {
        roadgraph.push(RoadPolyline {
            id: next_id,
            kind,
            speed_limit_mps: speed,
            points: PointSet2(pts),
        });
        next_id += 1;
    };

    let mut arms = Vec::new();
    let mut signals = Vec::new();
    for q in (0..4).filter(|&q| Some(q) != dropped) {
        let a = rot + q as f64 * PI / 2.0;
        let dir = [a.cos(), a.sin()];
        let inward = scale(dir, -1.0);
        let off_in = scale(right_of(inward), LANE_WIDTH / 2.0);
        let off_out = scale(right_of(dir), LANE_WIDTH / 2.0);
        let far = add(center, scale(dir, STOP_DIST + ARM_LENGTH));
        let near = add(center, scale(dir, STOP_DIST));
        let inc = line(add(far, off_in), add(near, off_in), 3.0);
        let out = line(add(near, off_out), add(far, off_out), 3.0);
        push(&mut roadgraph, PolylineKind::LaneCenter, LANE_SPEED, inc.clone());
        push(&mut roadgraph, PolylineKind::LaneCenter, LANE_SPEED, out.clone());
        for side in [-1.0, 1.0] {
            let off = scale(left_of(dir), side * (LANE_WIDTH + 0.5));
            push(&mut roadgraph, PolylineKind::Boundary, LANE_SPEED, line(add(near, off), add(far, off), 5.0));
        }
        let cw = add(center, scale(dir, STOP_DIST + 2.0));
        let half = scale(left_of(dir), LANE_WIDTH + 0.5);
        push(&mut roadgraph, PolylineKind::Crosswalk, 0.0, vec![add(cw, scale(half, -1.0)), add(cw, half)]);

        let phase = q % 2;
        let states = (0..cfg.history_len)
            .map(|k| {
                if dark {
                    SignalState::Unknown
                } else {
                    signal_state(cycle_offset + k as f64 * HISTORY_DT, phase)
                }
            })
            .collect();
        signals.push(TrafficSignal {
            id: signals.len() as u32,
            position: add(near, off_in),
            states,
        });
        arms.push(Arm {
            dir,
            incoming: Path2::new(inc),
            outgoing: Path2::new(out),
            signal: signals.len() - 1,
        });
    }

    let mut connectors = Vec::new();
    for a in 0..arms.len() {
        let heading = scale(arms[a].dir, -1.0);
        let start = *arms[a].incoming.pts.last().unwrap();
        let mut slots: [Option<(Path2, usize)>; 3] = [None, None, None];
        for (b, arm_b) in arms.iter().enumerate() {
            if b == a {
                continue;
            }
            let cross = heading[0] * arm_b.dir[1] - heading[1] * arm_b.dir[0];
            let dot = heading[0] * arm_b.dir[0] + heading[1] * arm_b.dir[1];
            let m = if dot > 0.5 {
                0
            } else if cross > 0.0 {
                1
            } else {
                2
            };
            let end = arm_b.outgoing.pts[0];
            let pts = bezier(start, heading, end, arm_b.dir, 12);
            let speed = if m == 0 { LANE_SPEED } else { TURN_SPEED };
            push(&mut roadgraph, PolylineKind::LaneCenter, speed, pts.clone());
            slots[m] = Some((Path2::new(pts), b));
        }
        connectors.push(slots);
    }

    Layout {
        arms,
        connectors,
        roadgraph,
        signals,
    }
}

// ---------------------------------------------------------------------------
// Agents
// ---------------------------------------------------------------------------

/// Everything about an agent that is fixed before its intent is drawn.
#[derive(Debug, Clone)]
struct Latent {
    arm: usize,
    incoming: bool,
    /// Arc length of the history start along the lane.
    s0: f64,
    v0: f64,
    e0: f64,
    probs: [f64; 4],
    invalid_prefix: usize,
}

fn intent_probs(cfg: &GenConfig, layout: &Layout, arm: usize, incoming: bool) -> [f64; 4] {
    if !incoming {
        return [1.0, 0.0, 0.0, 0.0];
    }
    let mut p = cfg.intent_prior;
    for m in 0..3 {
        if layout.connectors[arm][m].is_none() {
            p[m] = 0.0;
        }
    }
    let sig = &layout.signals[layout.arms[arm].signal];
    match sig.states.last() {
        Some(SignalState::Red) => p[3] *= 4.0,
        Some(SignalState::Yellow) => p[3] *= 2.0,
        _ => {}
    }
    let z: f64 = p.iter().sum();
    if z <= 0.0 {
        return [0.0, 0.0, 0.0, 1.0];
    }
    p.map(|v| v / z)
}

fn draw_intent(probs: &[f64; 4], rng: &mut ChaCha8Rng) -> IntentKind {
    IntentKind::ALL[crate::gmm::sample_index(probs, rng)]
}

fn place_agents(cfg: &GenConfig, layout: &Layout, rng: &mut ChaCha8Rng) -> Vec<Latent> {
    let n = rng.random_range(cfg.agents_per_scene[0]..=cfg.agents_per_scene[1]);
    let mut placed: Vec<Latent> = Vec::with_capacity(n);
    let mut attempts = 0;
    while placed.len() < n && attempts < 50 * n {
        attempts += 1;
        let arm = rng.random_range(0..layout.arms.len());
        let incoming = rng.random_bool(cfg.incoming_fraction);
        let lane = if incoming { &layout.arms[arm].incoming } else { &layout.arms[arm].outgoing };
        // Distances below are from the intersection center.
        let d0 = if incoming { rng.random_range(14.0..30.0) } else { rng.random_range(STOP_DIST..12.0) };
        let s0 = if incoming {
            lane.length() - (d0 - STOP_DIST)
        } else {
            d0 - STOP_DIST
        };
        if placed.iter().any(|o| o.arm == arm && o.incoming == incoming && (o.s0 - s0).abs() < 7.0) {
            continue;
        }
        let v0 = rng.random_range(0.4..if incoming { 1.0 } else { 0.8 }) * LANE_SPEED;
        let e0 = (0.3 * rng.sample::<f64, _>(StandardNormal)).clamp(-0.8, 0.8);
        let invalid_prefix = if rng.random_bool(0.15) { rng.random_range(1..=4) } else { 0 };
        placed.push(Latent {
            arm,
            incoming,
            s0,
            v0,
            e0,
            probs: intent_probs(cfg, layout, arm, incoming),
            invalid_prefix,
        });
    }
    placed
}

/// Route along which an agent with `intent` travels, its speed profile
/// target, and (for stops) the arc length of the stop line.
fn route(layout: &Layout, lat: &Latent, intent: IntentKind) -> (Path2, Option<f64>, Vec<(f64, f64)>) {
    let arm = &layout.arms[lat.arm];
    if !lat.incoming {
        return (arm.outgoing.clone(), None, vec![(f64::INFINITY, LANE_SPEED)]);
    }
    let lane = &arm.incoming;
    match intent {
        IntentKind::Stop => (lane.clone(), Some(lane.length()), vec![(f64::INFINITY, LANE_SPEED)]),
        _ => {
            let m = match intent {
                IntentKind::Straight => 0,
                IntentKind::Left => 1,
                _ => 2,
            };
            let (conn, dest) = layout.connectors[lat.arm][m].as_ref().expect("drawn maneuver is feasible");
            let mut pts = lane.pts.clone();
            pts.extend_from_slice(&conn.pts[1..]);
            pts.extend_from_slice(&layout.arms[*dest].outgoing.pts[1..]);
            let speed = if m == 0 { LANE_SPEED } else { TURN_SPEED };
            let profile = vec![
                (lane.length() - 12.0, LANE_SPEED),
                (lane.length() + conn.length(), speed),
                (f64::INFINITY, LANE_SPEED),
            ];
            (Path2::new(pts), None, profile)
        }
    }
}

struct Rollout {
    history: Vec<HistoryStep>,
    future: Vec<[f64; 2]>,
}

fn target_speed(profile: &[(f64, f64)], s: f64) -> f64 {
    // look ahead so that speed drops before a turn is entered
    profile.iter().find(|(end, _)| s + 10.0 < *end).map_or(LANE_SPEED, |p| p.1).min(
        profile.iter().find(|(end, _)| s < *end).map_or(LANE_SPEED, |p| p.1),
    )
}

fn roll_out(cfg: &GenConfig, layout: &Layout, lat: &Latent, intent: IntentKind, rng: &mut ChaCha8Rng) -> Rollout {
    let (path, stop_at, profile) = route(layout, lat, intent);
    let steps = cfg.history_len + 2 * cfg.future_len;
    let dt = HISTORY_DT;
    let (mut s, mut v, mut e) = (lat.s0, lat.v0, lat.e0);
    let mut positions = Vec::with_capacity(steps + 1);
    let mut tangents = Vec::with_capacity(steps + 1);
    let place = |s: f64, e: f64| {
        let (p, t) = path.at(s);
        (add(p, scale(left_of(t), e)), t)
    };
    // one step before the history start, for velocity differencing
    let (p, t) = place(s - v * dt, e);
    positions.push(p);
    tangents.push(t);
    for _ in 0..steps {
        let (p, t) = place(s, e);
        positions.push(p);
        tangents.push(t);
        let desired = match stop_at {
            Some(stop) => (2.0 * 2.5 * (stop - s - 1.0).max(0.0)).sqrt().min(LANE_SPEED),
            None => target_speed(&profile, s),
        };
        let noise: f64 = rng.sample(StandardNormal);
        let a = (1.2 * (desired - v) + cfg.accel_sigma * noise).clamp(-6.0, 3.0);
        v = (v + a * dt).clamp(0.0, 1.2 * LANE_SPEED);
        s += v * dt;
        if let Some(stop) = stop_at {
            s = s.min(stop);
        }
        let lat_noise: f64 = rng.sample(StandardNormal);
        let moving = (v / 3.0).min(1.0);
        e += (-0.5 * e * dt + cfg.lateral_sigma * dt.sqrt() * lat_noise) * moving;
        e = e.clamp(-MAX_LATERAL, MAX_LATERAL);
    }
    let history = (0..cfg.history_len)
        .map(|k| {
            if k < lat.invalid_prefix {
                return HistoryStep::INVALID;
            }
            let p = positions[k + 1];
            let q = positions[k];
            let t = tangents[k + 1];
            HistoryStep {
                x: p[0],
                y: p[1],
                heading: t[1].atan2(t[0]),
                vx: (p[0] - q[0]) / dt,
                vy: (p[1] - q[1]) / dt,
                valid: true,
            }
        })
        .collect();
    let now = cfg.history_len;
    let future = (1..=cfg.future_len).map(|j| positions[now + 2 * j]).collect();
    Rollout { history, future }
}

fn intent_record(lat: &Latent, realized: IntentKind) -> IntentRecord {
    IntentRecord {
        labels: IntentKind::ALL.iter().map(|k| k.as_str().to_string()).collect(),
        probs: lat.probs.to_vec(),
        realized,
    }
}

pub fn generate_scene(cfg: &GenConfig, scene_index: u64) -> Result<Scene> {
    cfg.validate()?;
    let layout = build_layout(cfg, &mut stream(cfg.seed, scene_index, "layout"));
    let latents = place_agents(cfg, &layout, &mut stream(cfg.seed, scene_index, "agents"));
    let mut intent_rng = stream(cfg.seed, scene_index, "intent");
    let mut motion_rng = stream(cfg.seed, scene_index, "motion");
    let mut targets = 0;
    let agents = latents
        .iter()
        .enumerate()
        .map(|(i, lat)| {
            let intent = draw_intent(&lat.probs, &mut intent_rng);
            let r = roll_out(cfg, &layout, lat, intent, &mut motion_rng);
            let inside = r.history.last().is_some_and(|s| s.valid && s.x.abs() <= TARGET_EXTENT && s.y.abs() <= TARGET_EXTENT);
            let is_target = inside && targets < cfg.max_targets;
            targets += is_target as usize;
            Agent {
                id: i as u32,
                history: r.history,
                future: r.future,
                is_prediction_target: is_target,
                intent: Some(intent_record(lat, intent)),
            }
        })
        .collect();
    Ok(Scene {
        schema_version: SCHEMA_VERSION,
        scene_id: format!("s{}-{:06}", cfg.seed, scene_index),
        history_len: cfg.history_len,
        future_len: cfg.future_len,
        roadgraph: layout.roadgraph,
        signals: layout.signals,
        agents,
    })
}

/// Redraw the intent and future of one agent `draws` times from fresh
/// streams, keeping the latent state of scene `scene_index` fixed. Returns
/// the realized-intent frequencies (straight, left, right, stop).
pub fn resample_intent_frequencies(cfg: &GenConfig, scene_index: u64, agent_id: u32, draws: usize, seed: u64) -> Result<[f64; 4]> {
    cfg.validate()?;
    let layout = build_layout(cfg, &mut stream(cfg.seed, scene_index, "layout"));
    let latents = place_agents(cfg, &layout, &mut stream(cfg.seed, scene_index, "agents"));
    let lat = latents.get(agent_id as usize).ok_or(Error::UnknownAgent(agent_id))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        let intent = draw_intent(&lat.probs, &mut rng);
        let r = roll_out(cfg, &layout, lat, intent, &mut rng);
        counts[classify_realized(&layout, lat, &r)] += 1;
    }
    Ok(counts.map(|c| c as f64 / draws as f64))
}

/// Recover the maneuver from where a rollout ends: short of the stop line
/// means a stop, otherwise the nearest turn connector or exit lane.
fn classify_realized(layout: &Layout, lat: &Latent, r: &Rollout) -> usize {
    if !lat.incoming {
        return 0;
    }
    let end = *r.future.last().unwrap();
    let lane = &layout.arms[lat.arm].incoming;
    let stop_line = *lane.pts.last().unwrap();
    if lane.project(end) < lane.length() - 1e-6 || dist(end, stop_line) <= 2.5 {
        return 3;
    }
    let mut best = (f64::INFINITY, 3);
    for (m, slot) in layout.connectors[lat.arm].iter().enumerate() {
        if let Some((conn, dest)) = slot {
            let out = &layout.arms[*dest].outgoing;
            let d = dist(end, out.at(out.project(end)).0).min(dist(end, conn.at(conn.project(end)).0));
            if d < best.0 {
                best = (d, m);
            }
        }
    }
    best.1
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub num_scenes: usize,
    pub history_len: usize,
    pub future_len: usize,
    pub generator: Option<GenConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub num_scenes: usize,
    pub num_targets: usize,
    /// Fraction of targets with at least two intents of probability ≥ 0.2.
    pub multimodal_fraction: f64,
    /// Hex SHA-256 of the file bytes.
    pub sha256: String,
}

pub fn is_multimodal(probs: &[f64]) -> bool {
    probs.iter().filter(|&&p| p >= 0.2).count() >= 2
}

/// Generate `cfg.num_scenes` scenes and write them as JSON lines.
pub fn write_dataset(cfg: &GenConfig, path: &Path) -> Result<DatasetSummary> {
    cfg.validate()?;
    let header = DatasetHeader {
        schema_version: SCHEMA_VERSION,
        num_scenes: cfg.num_scenes,
        history_len: cfg.history_len,
        future_len: cfg.future_len,
        generator: Some(cfg.clone()),
    };
    let file = File::create(path)?;
    let mut w = HashingWriter::new(BufWriter::new(file));
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let (mut targets, mut multimodal) = (0usize, 0usize);
    const CHUNK: usize = 128;
    for start in (0..cfg.num_scenes).step_by(CHUNK) {
        let end = (start + CHUNK).min(cfg.num_scenes);
        let lines = (start..end)
            .into_par_iter()
            .map(|i| {
                let scene = generate_scene(cfg, i as u64)?;
                let t: Vec<bool> = scene
                    .agents
                    .iter()
                    .filter(|a| a.is_prediction_target)
                    .map(|a| a.intent.as_ref().is_some_and(|r| is_multimodal(&r.probs)))
                    .collect();
                Ok((serde_json::to_string(&scene)?, t))
            })
            .collect::<Result<Vec<_>>>()?;
        for (line, t) in lines {
            w.write_all(line.as_bytes())?;
            w.write_all(b"\n")?;
            targets += t.len();
            multimodal += t.iter().filter(|&&m| m).count();
        }
    }
    let sha256 = w.finish()?;
    Ok(DatasetSummary {
        num_scenes: cfg.num_scenes,
        num_targets: targets,
        multimodal_fraction: if targets == 0 { 0.0 } else { multimodal as f64 / targets as f64 },
        sha256,
    })
}

struct HashingWriter<W: Write> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> HashingWriter<W> {
    fn new(inner: W) -> Self {
        Self {
            inner,
            hasher: Sha256::new(),
        }
    }

    fn finish(mut self) -> Result<String> {
        self.inner.flush()?;
        Ok(hex_digest(self.hasher.finalize().as_slice()))
    }
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = BufReader::new(File::open(path)?);
    let mut h = Sha256::new();
    loop {
        let buf = f.fill_buf()?;
        if buf.is_empty() {
            break;
        }
        h.update(buf);
        let n = buf.len();
        f.consume(n);
    }
    Ok(hex_digest(h.finalize().as_slice()))
}

/// Streaming reader over a dataset file. Each scene is validated as it is
/// read; errors carry the 1-based line number.
pub struct DatasetReader {
    path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
    header: DatasetHeader,
}

impl DatasetReader {
    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }
}

fn check_schema(value: &serde_json::Value, what: &'static str) -> Result<()> {
    let found = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::InvalidInput(format!("{what} lacks schema_version")))?;
    if found != SCHEMA_VERSION as u64 {
        return Err(Error::Schema {
            what,
            found: found.min(u32::MAX as u64) as u32,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<DatasetReader> {
    let file = File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let malformed = |line, msg: String| Error::Malformed {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let first = lines
        .next()
        .ok_or_else(|| malformed(1, "missing header line".into()))??;
    let value: serde_json::Value = serde_json::from_str(&first).map_err(|e| malformed(1, e.to_string()))?;
    check_schema(&value, "dataset")?;
    let header: DatasetHeader = serde_json::from_value(value).map_err(|e| malformed(1, e.to_string()))?;
    Ok(DatasetReader {
        path: path.to_path_buf(),
        lines,
        line_no: 1,
        header,
    })
}

impl Iterator for DatasetReader {
    type Item = Result<Scene>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |msg: String| Error::Malformed {
                path: self.path.clone(),
                line: self.line_no,
                msg,
            };
            let value: serde_json::Value = match serde_json::from_str(&line) {
                Ok(v) => v,
                Err(e) => return Some(Err(malformed(e.to_string()))),
            };
            if let Err(e) = check_schema(&value, "scene") {
                return Some(Err(e));
            }
            let scene: Scene = match serde_json::from_value(value) {
                Ok(s) => s,
                Err(e) => return Some(Err(malformed(e.to_string()))),
            };
            if scene.history_len != self.header.history_len || scene.future_len != self.header.future_len {
                return Some(Err(malformed("scene lengths disagree with header".into())));
            }
            return Some(scene.validate().map(|_| scene).map_err(|e| malformed(e.to_string())));
        }
    }
}

/// Read a whole dataset into memory.
pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Scene>)> {
    let reader = read_dataset(path)?;
    let header = reader.header().clone();
    let scenes = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, scenes))
}

/// Write already-built scenes (no generator record in the header).
pub fn write_scenes(scenes: &[Scene], history_len: usize, future_len: usize, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = DatasetHeader {
        schema_version: SCHEMA_VERSION,
        num_scenes: scenes.len(),
        history_len,
        future_len,
        generator: None,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for s in scenes {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

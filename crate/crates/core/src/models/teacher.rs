//! Agent-centric teacher: every target re-encodes its own view of the scene.

use crate::diffcore::Tape;
use crate::error::{Error, Result};
use crate::geom::{normalize_angle, Pose2};
use crate::gmm::{GmmVars, TrajectoryGMM};
use crate::scenegen::{Agent, PolylineKind, Scene};

use super::nn::{add_where, linear, linear_relu, lstm};
use super::{resample_polyline, split_output, ModelConfig, ModelParams, ParamVars, TeacherConfig};

/// `[x, y, cos, sin, vx, vy, valid]`
pub const TEACHER_HISTORY_FEATURES: usize = 7;
/// `[x, y, dx, dy, lane, boundary, crosswalk, speed]`
pub const TEACHER_ROAD_FEATURES: usize = 8;
/// `[red, yellow, green, unknown, x, y]`
pub(crate) const TEACHER_SIGNAL_FEATURES: usize = 6;

const POS_SCALE: f64 = 0.1;

/// History features of `agent` in the frame of `anchor`, one row per step.
fn history_rows(agent: &Agent, anchor: &Pose2, len: usize) -> Vec<[f64; TEACHER_HISTORY_FEATURES]> {
    let skip = agent.history.len().saturating_sub(len);
    let mut rows = vec![[0.0; TEACHER_HISTORY_FEATURES]; len];
    let pad = len.saturating_sub(agent.history.len());
    for (t, h) in agent.history.iter().skip(skip).enumerate() {
        if !h.valid {
            continue;
        }
        let p = anchor.apply_inverse([h.x, h.y]);
        let v = anchor.rotate_inverse([h.vx, h.vy]);
        let dh = normalize_angle(h.heading - anchor.heading());
        rows[pad + t] = [
            p[0] * POS_SCALE,
            p[1] * POS_SCALE,
            dh.cos(),
            dh.sin(),
            v[0] * POS_SCALE,
            v[1] * POS_SCALE,
            1.0,
        ];
    }
    rows
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Other agents with a current state inside the radius, nearest first.
pub(crate) fn select_neighbors<'a>(scene: &'a Scene, target: &Agent, cfg: &TeacherConfig) -> Vec<&'a Agent> {
    let Some(c) = target.current() else { return Vec::new() };
    let mut cands: Vec<(f64, &Agent)> = scene
        .agents
        .iter()
        .filter(|a| a.id != target.id)
        .filter_map(|a| a.current().map(|s| (dist([s.x, s.y], [c.x, c.y]), a)))
        .filter(|(d, _)| *d <= cfg.neighbor_radius)
        .collect();
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)));
    cands.into_iter().take(cfg.max_neighbors).map(|(_, a)| a).collect()
}

/// Polyline indices ordered by closest point to `origin`.
pub(crate) fn select_polylines(scene: &Scene, origin: [f64; 2], max: usize) -> Vec<usize> {
    let mut cands: Vec<(f64, u32, usize)> = scene
        .roadgraph
        .iter()
        .enumerate()
        .map(|(i, pl)| {
            let d = pl.points.iter().map(|&p| dist(p, origin)).fold(f64::INFINITY, f64::min);
            (d, pl.id, i)
        })
        .collect();
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cands.into_iter().take(max).map(|c| c.2).collect()
}

fn kind_onehot(kind: PolylineKind) -> [f64; 3] {
    match kind {
        PolylineKind::LaneCenter => [1.0, 0.0, 0.0],
        PolylineKind::Boundary => [0.0, 1.0, 0.0],
        PolylineKind::Crosswalk => [0.0, 0.0, 1.0],
    }
}

/// Build the teacher forward pass for `targets` on `tape`; outputs are in
/// each target's agent frame.
pub fn teacher_forward_vars(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &TeacherConfig,
    scene: &Scene,
    targets: &[u32],
) -> Result<Vec<GmmVars>> {
    let b = targets.len();
    if b == 0 {
        return Ok(Vec::new());
    }
    let (l, h) = (cfg.history_len, cfg.hidden);
    let agents: Vec<&Agent> = targets.iter().map(|&id| scene.agent(id)).collect::<Result<_>>()?;
    let anchors: Vec<Pose2> = agents.iter().map(|a| a.current_pose()).collect::<Result<_>>()?;

    // Own history.
    let mut feats = vec![0.0; l * b * TEACHER_HISTORY_FEATURES];
    for (j, (a, anchor)) in agents.iter().zip(&anchors).enumerate() {
        for (t, row) in history_rows(a, anchor, l).iter().enumerate() {
            let at = (t * b + j) * TEACHER_HISTORY_FEATURES;
            feats[at..at + TEACHER_HISTORY_FEATURES].copy_from_slice(row);
        }
    }
    let xs = tape.constant(feats, &[l * b, TEACHER_HISTORY_FEATURES])?;
    let own = lstm(tape, &pv.lstm("history")?, xs, l, b)?;

    // Neighbors.
    let per_target: Vec<Vec<&Agent>> = agents.iter().map(|a| select_neighbors(scene, a, cfg)).collect();
    let total: usize = per_target.iter().map(Vec::len).sum();
    let mut offsets = vec![0usize];
    let mut feats = vec![0.0; l * total * TEACHER_HISTORY_FEATURES];
    let mut col = 0;
    for (nbs, anchor) in per_target.iter().zip(&anchors) {
        for nb in nbs {
            for (t, row) in history_rows(nb, anchor, l).iter().enumerate() {
                let at = (t * total + col) * TEACHER_HISTORY_FEATURES;
                feats[at..at + TEACHER_HISTORY_FEATURES].copy_from_slice(row);
            }
            col += 1;
        }
        offsets.push(col);
    }
    let nb_enc = if total == 0 {
        tape.constant(vec![0.0; b * h], &[b, h])?
    } else {
        let xs = tape.constant(feats, &[l * total, TEACHER_HISTORY_FEATURES])?;
        let enc = lstm(tape, &pv.lstm("neighbor")?, xs, l, total)?;
        tape.reduce_max_over_set(enc, &offsets)?
    };
    let lonely: Vec<bool> = per_target.iter().map(Vec::is_empty).collect();
    let nb_enc = add_where(tape, nb_enc, pv.get("neighbor.empty")?, &lonely)?;

    // Road polylines.
    let p = cfg.points_per_polyline;
    let mut point_feats = Vec::new();
    let mut poly_offsets = vec![0usize];
    let mut target_offsets = vec![0usize];
    for anchor in &anchors {
        for i in select_polylines(scene, anchor.position(), cfg.max_polylines) {
            let pl = &scene.roadgraph[i];
            let onehot = kind_onehot(pl.kind);
            for (pt, d) in resample_polyline(&pl.points.0, p) {
                let q = anchor.apply_inverse(pt);
                let dq = anchor.rotate_inverse(d);
                point_feats.extend_from_slice(&[q[0] * POS_SCALE, q[1] * POS_SCALE, dq[0], dq[1]]);
                point_feats.extend_from_slice(&onehot);
                point_feats.push(pl.speed_limit_mps * POS_SCALE);
            }
            poly_offsets.push(poly_offsets.last().unwrap() + p);
        }
        target_offsets.push(poly_offsets.len() - 1);
    }
    let polys = poly_offsets.len() - 1;
    let road_enc = if polys == 0 {
        tape.constant(vec![0.0; b * h], &[b, h])?
    } else {
        let x = tape.constant(point_feats, &[polys * p, TEACHER_ROAD_FEATURES])?;
        let (w, bb) = pv.linear("road.point1")?;
        let x = linear_relu(tape, x, w, bb)?;
        let (w, bb) = pv.linear("road.point2")?;
        let x = linear_relu(tape, x, w, bb)?;
        let x = tape.reduce_max_over_set(x, &poly_offsets)?;
        let (w, bb) = pv.linear("road.poly")?;
        let x = linear_relu(tape, x, w, bb)?;
        tape.reduce_max_over_set(x, &target_offsets)?
    };
    let roadless: Vec<bool> = target_offsets.windows(2).map(|w| w[0] == w[1]).collect();
    let road_enc = add_where(tape, road_enc, pv.get("road.empty")?, &roadless)?;

    // Traffic signals.
    let sig_h = cfg.signal_hidden;
    let ns = scene.signals.len();
    let sig_enc = if ns == 0 {
        tape.constant(vec![0.0; b * sig_h], &[b, sig_h])?
    } else {
        let batch = ns * b;
        let mut feats = vec![0.0; l * batch * TEACHER_SIGNAL_FEATURES];
        for (j, anchor) in anchors.iter().enumerate() {
            for (s, sig) in scene.signals.iter().enumerate() {
                let q = anchor.apply_inverse(sig.position);
                let skip = sig.states.len().saturating_sub(l);
                let pad = l.saturating_sub(sig.states.len());
                for (t, st) in sig.states.iter().skip(skip).enumerate() {
                    let at = ((pad + t) * batch + j * ns + s) * TEACHER_SIGNAL_FEATURES;
                    feats[at + st.index()] = 1.0;
                    feats[at + 4] = q[0] * POS_SCALE;
                    feats[at + 5] = q[1] * POS_SCALE;
                }
            }
        }
        let xs = tape.constant(feats, &[l * batch, TEACHER_SIGNAL_FEATURES])?;
        let enc = lstm(tape, &pv.lstm("signal")?, xs, l, batch)?;
        let offs: Vec<usize> = (0..=b).map(|j| j * ns).collect();
        tape.reduce_max_over_set(enc, &offs)?
    };

    let z = tape.concat(&[own, nb_enc, road_enc, sig_enc], 1)?;
    let (w, bb) = pv.linear("decoder.hidden")?;
    let z = linear_relu(tape, z, w, bb)?;
    let (w, bb) = pv.linear("decoder.out")?;
    let raw = linear(tape, z, w, bb)?;
    split_output(tape, raw, cfg.modes, cfg.horizon, cfg.output_scale, None)
}

/// Teacher prediction for one agent, in that agent's frame.
pub fn teacher_forward(scene: &Scene, agent_id: u32, params: &ModelParams) -> Result<TrajectoryGMM> {
    if !matches!(params.config, ModelConfig::Teacher(_)) {
        return Err(Error::Incompatible("teacher_forward needs teacher parameters".into()));
    }
    let agent = scene.agent(agent_id)?;
    if agent.current().is_none() {
        return Err(Error::EmptyHistory(agent_id));
    }
    Ok(params.predict(scene, &[agent_id])?.remove(0))
}

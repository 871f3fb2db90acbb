//! Scene-centric student: one pillar grid per scene, one patch decode per
//! agent.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use crate::diffcore::{Tape, Var, PAD};
use crate::error::{Error, Result};
use crate::gmm::{GmmVars, TrajectoryGMM};
use crate::scenegen::{PolylineKind, Scene, HISTORY_DT};

use super::nn::{linear, linear_relu};
use super::{resample_polyline, split_output, ModelConfig, ModelParams, ParamVars, StudentConfig};

/// `[lane, boundary, crosswalk, agent, signal, dx, dy, cos, sin, speed, vx,
/// vy, time, red, yellow, green, unknown]`
pub const STUDENT_POINT_FEATURES: usize = 17;

pub(crate) const BOX_LENGTH: f64 = 4.5;
pub(crate) const BOX_WIDTH: f64 = 1.8;
const VALUE_SCALE: f64 = 0.1;

thread_local! {
    static ENCODE_CALLS: Cell<u64> = const { Cell::new(0) };
    static IM2COL: RefCell<HashMap<(usize, usize, usize), Arc<[usize]>>> = RefCell::new(HashMap::new());
}

/// Number of scene encodes run on the current thread so far.
pub fn scene_encode_count() -> u64 {
    ENCODE_CALLS.with(|c| c.get())
}

/// Dense scene features, stored cell-major: `values[(i * w + j) * c + ch]`
/// for row `i` (y axis) and column `j` (x axis).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl FeatureGrid {
    /// `[channels, h, w]`
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.h, self.w]
    }

    pub fn at(&self, ch: usize, i: usize, j: usize) -> f64 {
        self.values[(i * self.w + j) * self.channels + ch]
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let at = (i * self.w + j) * self.channels;
        &self.values[at..at + self.channels]
    }
}

/// Row and column of the cell containing `(x, y)`, if inside the grid.
pub(crate) fn cell_of(cfg: &StudentConfig, x: f64, y: f64) -> Option<(usize, usize, [f64; 2])> {
    let fx = (x + cfg.grid_w as f64 * cfg.cell_size / 2.0) / cfg.cell_size;
    let fy = (y + cfg.grid_h as f64 * cfg.cell_size / 2.0) / cfg.cell_size;
    let (j, i) = (fx.floor(), fy.floor());
    if !(j >= 0.0 && i >= 0.0 && (j as usize) < cfg.grid_w && (i as usize) < cfg.grid_h) {
        return None;
    }
    Some((i as usize, j as usize, [fx - j - 0.5, fy - i - 0.5]))
}

fn road_onehot(kind: PolylineKind) -> usize {
    match kind {
        PolylineKind::LaneCenter => 0,
        PolylineKind::Boundary => 1,
        PolylineKind::Crosswalk => 2,
    }
}

/// Cell-tagged point features of a scene.
pub(crate) fn scene_points(cfg: &StudentConfig, scene: &Scene) -> Vec<(usize, [f64; STUDENT_POINT_FEATURES])> {
    let mut pts = Vec::new();
    let mut push = |x: f64, y: f64, mut f: [f64; STUDENT_POINT_FEATURES]| {
        if let Some((i, j, off)) = cell_of(cfg, x, y) {
            f[5] = off[0];
            f[6] = off[1];
            pts.push((i * cfg.grid_w + j, f));
        }
    };
    for pl in &scene.roadgraph {
        for (p, d) in resample_polyline(&pl.points.0, cfg.road_samples) {
            let mut f = [0.0; STUDENT_POINT_FEATURES];
            f[road_onehot(pl.kind)] = 1.0;
            f[7] = d[0];
            f[8] = d[1];
            f[9] = pl.speed_limit_mps * VALUE_SCALE;
            push(p[0], p[1], f);
        }
    }
    let l = cfg.history_len;
    let corners = [[0.0, 0.0], [0.5, 0.5], [0.5, -0.5], [-0.5, 0.5], [-0.5, -0.5]];
    for a in &scene.agents {
        let skip = a.history.len().saturating_sub(l);
        let n = a.history.len() - skip;
        for (k, s) in a.history.iter().skip(skip).enumerate().filter(|(_, s)| s.valid) {
            let (c, sn) = (s.heading.cos(), s.heading.sin());
            let mut f = [0.0; STUDENT_POINT_FEATURES];
            f[3] = 1.0;
            f[7] = c;
            f[8] = sn;
            f[9] = s.vx.hypot(s.vy) * VALUE_SCALE;
            f[10] = s.vx * VALUE_SCALE;
            f[11] = s.vy * VALUE_SCALE;
            f[12] = (k as f64 - (n as f64 - 1.0)) * HISTORY_DT;
            for q in corners {
                let (lx, ly) = (q[0] * BOX_LENGTH, q[1] * BOX_WIDTH);
                push(s.x + c * lx - sn * ly, s.y + sn * lx + c * ly, f);
            }
        }
    }
    for sig in &scene.signals {
        let mut f = [0.0; STUDENT_POINT_FEATURES];
        f[4] = 1.0;
        if let Some(st) = sig.states.last() {
            f[13 + st.index()] = 1.0;
        }
        push(sig.position[0], sig.position[1], f);
    }
    pts
}

/// Gather index turning a `[h*w, c]` map into `[h*w, 9*c]` 3×3 neighborhoods,
/// zero outside the grid.
fn im2col_index(h: usize, w: usize, c: usize) -> Arc<[usize]> {
    IM2COL.with(|m| {
        m.borrow_mut()
            .entry((h, w, c))
            .or_insert_with(|| {
                let mut idx = Vec::with_capacity(h * w * 9 * c);
                for i in 0..h as isize {
                    for j in 0..w as isize {
                        for di in -1..=1 {
                            for dj in -1..=1 {
                                let (y, x) = (i + di, j + dj);
                                let inside = y >= 0 && x >= 0 && y < h as isize && x < w as isize;
                                if inside {
                                    let base = (y as usize * w + x as usize) * c;
                                    idx.extend(base..base + c);
                                } else {
                                    idx.extend(std::iter::repeat_n(PAD, c));
                                }
                            }
                        }
                    }
                }
                idx.into()
            })
            .clone()
    })
}

/// Encode the whole scene into a `[grid_h * grid_w, channels]` map.
pub fn student_encode_vars(tape: &mut Tape, pv: &ParamVars, cfg: &StudentConfig, scene: &Scene) -> Result<Var> {
    ENCODE_CALLS.with(|c| c.set(c.get() + 1));
    let cells = cfg.grid_h * cfg.grid_w;
    let mut pts = scene_points(cfg, scene);
    pts.sort_by_key(|p| p.0);
    let mut offsets = Vec::with_capacity(cells + 1);
    offsets.push(0);
    let mut at = 0;
    for cell in 0..cells {
        while at < pts.len() && pts[at].0 == cell {
            at += 1;
        }
        offsets.push(at);
    }
    let e = cfg.pillar_embed;
    let mut x = if pts.is_empty() {
        tape.constant(vec![0.0; cells * e], &[cells, e])?
    } else {
        let feats: Vec<f64> = pts.iter().flat_map(|p| p.1).collect();
        let f = tape.constant(feats, &[pts.len(), STUDENT_POINT_FEATURES])?;
        let (w, b) = pv.linear("pillar")?;
        let f = linear_relu(tape, f, w, b)?;
        tape.reduce_max_over_set(f, &offsets)?
    };
    let mut ch = e;
    for i in 0..cfg.conv_channels.len() {
        let cols = tape.gather(x, im2col_index(cfg.grid_h, cfg.grid_w, ch), &[cells, 9 * ch])?;
        let (w, b) = pv.linear(&format!("conv{i}"))?;
        x = linear_relu(tape, cols, w, b)?;
        ch = cfg.conv_channels[i];
    }
    Ok(x)
}

/// Decode `targets` from an encoded grid; outputs are in each target's
/// agent frame.
pub fn student_decode_vars(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &StudentConfig,
    grid: Var,
    scene: &Scene,
    targets: &[u32],
) -> Result<Vec<GmmVars>> {
    if targets.is_empty() {
        return Ok(Vec::new());
    }
    let ch = tape.shape(grid)[1];
    let (p, half) = (cfg.patch, (cfg.patch / 2) as isize);
    let mut idx = Vec::with_capacity(targets.len() * p * p * ch);
    let mut rot = Vec::with_capacity(targets.len());
    for &id in targets {
        let s = *scene.agent(id)?.current().ok_or(Error::EmptyHistory(id))?;
        let (ci, cj, _) = cell_of(cfg, s.x, s.y).ok_or(Error::OutOfExtent { agent: id, x: s.x, y: s.y })?;
        for di in -half..=half {
            for dj in -half..=half {
                let (y, x) = (ci as isize + di, cj as isize + dj);
                let inside = y >= 0 && x >= 0 && (y as usize) < cfg.grid_h && (x as usize) < cfg.grid_w;
                if inside {
                    let base = (y as usize * cfg.grid_w + x as usize) * ch;
                    idx.extend(base..base + ch);
                } else {
                    idx.extend(std::iter::repeat_n(PAD, ch));
                }
            }
        }
        rot.push((s.heading.cos(), s.heading.sin()));
    }
    let z = tape.gather(grid, idx.into(), &[targets.len(), p * p * ch])?;
    let (w, b) = pv.linear("decoder.hidden")?;
    let z = linear_relu(tape, z, w, b)?;
    let (w, b) = pv.linear("decoder.out")?;
    let raw = linear(tape, z, w, b)?;
    split_output(tape, raw, cfg.modes, cfg.horizon, cfg.output_scale, Some(&rot))
}

fn student_config(params: &ModelParams) -> Result<&StudentConfig> {
    match &params.config {
        ModelConfig::Student(c) => Ok(c),
        _ => Err(Error::Incompatible("student model needs student parameters".into())),
    }
}

/// Run the scene encoder once.
pub fn student_forward_scene(scene: &Scene, params: &ModelParams) -> Result<FeatureGrid> {
    let cfg = student_config(params)?;
    let mut tape = Tape::new();
    let pv = params.to_tape(&mut tape, false)?;
    let g = student_encode_vars(&mut tape, &pv, cfg, scene)?;
    Ok(FeatureGrid {
        h: cfg.grid_h,
        w: cfg.grid_w,
        channels: tape.shape(g)[1],
        values: tape.value(g).to_vec(),
    })
}

/// Decode one agent from a precomputed grid.
pub fn student_decode_agent(grid: &FeatureGrid, scene: &Scene, agent_id: u32, params: &ModelParams) -> Result<TrajectoryGMM> {
    let cfg = student_config(params)?;
    if grid.h != cfg.grid_h || grid.w != cfg.grid_w {
        return Err(Error::Incompatible(format!(
            "grid {}x{} does not match config {}x{}",
            grid.h, grid.w, cfg.grid_h, cfg.grid_w
        )));
    }
    let anchor = scene.agent(agent_id)?.current_pose()?;
    let mut tape = Tape::new();
    let pv = params.to_tape(&mut tape, false)?;
    let g = tape.constant(grid.values.clone(), &[grid.h * grid.w, grid.channels])?;
    let out = student_decode_vars(&mut tape, &pv, cfg, g, scene, &[agent_id])?;
    out[0].to_gmm(&tape, anchor)
}

//! Agent-centric teacher and scene-centric student forecasters.
//!
//! Both models map a [`Scene`] and a set of target agents to one
//! [`TrajectoryGMM`] per target, expressed in that target's agent frame.
//! The teacher re-encodes the scene around every target; the student
//! rasterizes the scene once into a feature grid and decodes each target
//! from a patch of it.

pub mod nn;
mod student;
mod teacher;

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::gmm::{GmmVars, TrajectoryGMM};
use crate::scenegen::Scene;

pub use student::{
    scene_encode_count, student_decode_agent, student_decode_vars, student_encode_vars, student_forward_scene, FeatureGrid,
    STUDENT_POINT_FEATURES,
};
pub use teacher::{teacher_forward, teacher_forward_vars, TEACHER_HISTORY_FEATURES, TEACHER_ROAD_FEATURES};

pub const PARAMS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub history_len: usize,
    pub horizon: usize,
    pub modes: usize,
    pub hidden: usize,
    pub signal_hidden: usize,
    pub neighbor_radius: f64,
    pub max_neighbors: usize,
    pub max_polylines: usize,
    pub points_per_polyline: usize,
    pub output_scale: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            history_len: 10,
            horizon: 16,
            modes: 6,
            hidden: 64,
            signal_hidden: 16,
            neighbor_radius: 100.0,
            max_neighbors: 128,
            max_polylines: 24,
            points_per_polyline: 8,
            output_scale: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    pub history_len: usize,
    pub horizon: usize,
    pub modes: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub cell_size: f64,
    pub pillar_embed: usize,
    pub conv_channels: Vec<usize>,
    pub patch: usize,
    pub hidden: usize,
    pub road_samples: usize,
    pub output_scale: f64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            history_len: 10,
            horizon: 16,
            modes: 6,
            grid_h: 64,
            grid_w: 64,
            cell_size: 1.0,
            pillar_embed: 32,
            conv_channels: vec![16, 16],
            patch: 7,
            hidden: 64,
            road_samples: 24,
            output_scale: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Teacher,
    Student,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Teacher => "teacher",
            ModelKind::Student => "student",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(ModelKind::Teacher),
            "student" => Ok(ModelKind::Student),
            _ => Err(Error::Config(format!("unknown model kind '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Teacher(TeacherConfig),
    Student(StudentConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Teacher(_) => ModelKind::Teacher,
            ModelConfig::Student(_) => ModelKind::Student,
        }
    }

    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Teacher => ModelConfig::Teacher(TeacherConfig::default()),
            ModelKind::Student => ModelConfig::Student(StudentConfig::default()),
        }
    }

    pub fn modes(&self) -> usize {
        match self {
            ModelConfig::Teacher(c) => c.modes,
            ModelConfig::Student(c) => c.modes,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            ModelConfig::Teacher(c) => c.horizon,
            ModelConfig::Student(c) => c.horizon,
        }
    }

    pub fn history_len(&self) -> usize {
        match self {
            ModelConfig::Teacher(c) => c.history_len,
            ModelConfig::Student(c) => c.history_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.modes() == 0 || self.horizon() == 0 || self.history_len() == 0 {
            return bad("modes, horizon and history_len must be positive");
        }
        match self {
            ModelConfig::Teacher(c) => {
                if c.hidden == 0 || c.signal_hidden == 0 || c.points_per_polyline < 2 || !(c.neighbor_radius > 0.0) {
                    return bad("teacher widths must be positive and points_per_polyline ≥ 2");
                }
            }
            ModelConfig::Student(c) => {
                if c.grid_h == 0 || c.grid_w == 0 || c.pillar_embed == 0 || c.hidden == 0 || c.road_samples < 2 {
                    return bad("student widths must be positive");
                }
                if c.conv_channels.is_empty() || c.conv_channels.contains(&0) {
                    return bad("conv_channels must be non-empty and positive");
                }
                if c.patch == 0 || c.patch % 2 == 0 || c.grid_h * c.grid_w < c.patch * c.patch {
                    return bad("patch must be odd and fit inside the grid");
                }
                if !(c.cell_size > 0.0) {
                    return bad("cell_size must be positive");
                }
            }
        }
        Ok(())
    }

    /// Width of the raw decoder output: `K*T*5 + K`.
    pub fn output_width(&self) -> usize {
        self.modes() * self.horizon() * 5 + self.modes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    Uniform(usize),
    Zero,
    /// Zero except the forget-gate block, which is one.
    LstmBias(usize),
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn spec(name: &str, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec {
        name: name.to_string(),
        shape: shape.to_vec(),
        init,
    }
}

fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, d_in: usize, d_out: usize) {
    out.push(spec(&format!("{prefix}.w"), &[d_in, d_out], Init::Uniform(d_in)));
    out.push(spec(&format!("{prefix}.b"), &[d_out], Init::Zero));
}

fn lstm_specs(out: &mut Vec<ParamSpec>, prefix: &str, d_in: usize, hidden: usize) {
    out.push(spec(&format!("{prefix}.wx"), &[d_in, 4 * hidden], Init::Uniform(d_in)));
    out.push(spec(&format!("{prefix}.wh"), &[hidden, 4 * hidden], Init::Uniform(hidden)));
    out.push(spec(&format!("{prefix}.b"), &[4 * hidden], Init::LstmBias(hidden)));
    out.push(spec(&format!("{prefix}.h0"), &[hidden], Init::Zero));
    out.push(spec(&format!("{prefix}.c0"), &[hidden], Init::Zero));
}

fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    let out = config.output_width();
    match config {
        ModelConfig::Teacher(c) => {
            let h = c.hidden;
            lstm_specs(&mut s, "history", TEACHER_HISTORY_FEATURES, h);
            lstm_specs(&mut s, "neighbor", TEACHER_HISTORY_FEATURES, h);
            s.push(spec("neighbor.empty", &[h], Init::Zero));
            linear_specs(&mut s, "road.point1", TEACHER_ROAD_FEATURES, h);
            linear_specs(&mut s, "road.point2", h, h);
            linear_specs(&mut s, "road.poly", h, h);
            s.push(spec("road.empty", &[h], Init::Zero));
            lstm_specs(&mut s, "signal", teacher::TEACHER_SIGNAL_FEATURES, c.signal_hidden);
            let d = 3 * h + c.signal_hidden;
            linear_specs(&mut s, "decoder.hidden", d, 2 * h);
            linear_specs(&mut s, "decoder.out", 2 * h, out);
        }
        ModelConfig::Student(c) => {
            linear_specs(&mut s, "pillar", STUDENT_POINT_FEATURES, c.pillar_embed);
            let mut ch = c.pillar_embed;
            for (i, &co) in c.conv_channels.iter().enumerate() {
                linear_specs(&mut s, &format!("conv{i}"), 9 * ch, co);
                ch = co;
            }
            linear_specs(&mut s, "decoder.hidden", c.patch * c.patch * ch, c.hidden);
            linear_specs(&mut s, "decoder.out", c.hidden, out);
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBuffer {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Named, shaped parameter buffers of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub buffers: Vec<ParamBuffer>,
}

impl ModelParams {
    pub fn kind(&self) -> ModelKind {
        self.config.kind()
    }

    pub fn num_values(&self) -> usize {
        self.buffers.iter().map(|b| b.values.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ParamBuffer> {
        self.buffers.iter().find(|b| b.name == name)
    }

    /// Assemble from buffers, checking names and shapes against `config`.
    pub fn from_buffers(config: ModelConfig, buffers: Vec<ParamBuffer>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != buffers.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameter buffers, found {}",
                specs.len(),
                buffers.len()
            )));
        }
        for (s, b) in specs.iter().zip(&buffers) {
            if s.name != b.name || s.shape != b.shape {
                return Err(Error::Incompatible(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    b.name, b.shape, s.name, s.shape
                )));
            }
            if b.values.len() != b.shape.iter().product::<usize>() {
                return Err(Error::Corrupt(format!("parameter {} has {} values", b.name, b.values.len())));
            }
            if b.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Corrupt(format!("parameter {} is not finite", b.name)));
            }
        }
        Ok(Self {
            schema_version: PARAMS_SCHEMA_VERSION,
            config,
            buffers,
        })
    }

    /// Flattened values in buffer order.
    pub fn flat(&self) -> Vec<f32> {
        self.buffers.iter().flat_map(|b| b.values.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f32]) -> Result<()> {
        if values.len() != self.num_values() {
            return Err(Error::InvalidInput(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_values()
            )));
        }
        let mut at = 0;
        for b in &mut self.buffers {
            let n = b.values.len();
            b.values.copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Put every buffer on the tape as a leaf.
    pub fn to_tape(&self, tape: &mut Tape, requires_grad: bool) -> Result<ParamVars> {
        let vars = self
            .buffers
            .iter()
            .map(|b| {
                let v = tape.leaf(b.values.iter().map(|&x| x as f64).collect(), &b.shape, requires_grad)?;
                Ok((b.name.clone(), v))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamVars {
            index: vars.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect(),
            vars: vars.into_iter().map(|(_, v)| v).collect(),
        })
    }

    /// Forward pass for `targets` of `scene`, building on `tape`.
    pub fn forward_vars(&self, tape: &mut Tape, pv: &ParamVars, scene: &Scene, targets: &[u32]) -> Result<Vec<GmmVars>> {
        match &self.config {
            ModelConfig::Teacher(c) => teacher_forward_vars(tape, pv, c, scene, targets),
            ModelConfig::Student(c) => {
                let grid = student_encode_vars(tape, pv, c, scene)?;
                student_decode_vars(tape, pv, c, grid, scene, targets)
            }
        }
    }

    /// Inference without gradients.
    pub fn predict(&self, scene: &Scene, targets: &[u32]) -> Result<Vec<TrajectoryGMM>> {
        let mut tape = Tape::new();
        let pv = self.to_tape(&mut tape, false)?;
        let out = self.forward_vars(&mut tape, &pv, scene, targets)?;
        out.iter()
            .zip(targets)
            .map(|(g, &id)| g.to_gmm(&tape, scene.agent(id)?.current_pose()?))
            .collect()
    }
}

/// Parameter leaves on a tape, addressable by name.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Incompatible(format!("missing parameter {name}")))
    }

    /// Leaves in buffer order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub(crate) fn lstm(&self, prefix: &str) -> Result<nn::LstmVars> {
        Ok(nn::LstmVars {
            wx: self.get(&format!("{prefix}.wx"))?,
            wh: self.get(&format!("{prefix}.wh"))?,
            b: self.get(&format!("{prefix}.b"))?,
            h0: self.get(&format!("{prefix}.h0"))?,
            c0: self.get(&format!("{prefix}.c0"))?,
        })
    }

    pub(crate) fn linear(&self, prefix: &str) -> Result<(Var, Var)> {
        Ok((self.get(&format!("{prefix}.w"))?, self.get(&format!("{prefix}.b"))?))
    }
}

/// Fan-in scaled uniform initialization; a pure function of the generator
/// state.
pub fn init_params<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<ModelParams> {
    config.validate()?;
    let buffers = param_specs(config)
        .into_iter()
        .map(|s| {
            let n: usize = s.shape.iter().product();
            let values = match s.init {
                Init::Uniform(fan_in) => {
                    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-a..a) as f32).collect()
                }
                Init::Zero => vec![0.0; n],
                Init::LstmBias(h) => (0..n).map(|i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 }).collect(),
            };
            ParamBuffer {
                name: s.name,
                shape: s.shape,
                values,
            }
        })
        .collect();
    ModelParams::from_buffers(config.clone(), buffers)
}

/// Split a `[B, K*T*5 + K]` decoder output into per-row mixtures. Means are
/// multiplied by `scale`; `rotate` optionally maps world-axis offsets into
/// each row's agent frame via `(cos h, sin h)`.
pub(crate) fn split_output(
    tape: &mut Tape,
    raw: Var,
    modes: usize,
    horizon: usize,
    scale: f64,
    rotate: Option<&[(f64, f64)]>,
) -> Result<Vec<GmmVars>> {
    let (rows, width) = (tape.shape(raw)[0], tape.shape(raw)[1]);
    let kt = modes * horizon;
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let base = r * width;
        let mut means = tape.gather(raw, (base..base + 2 * kt).collect(), &[kt, 2])?;
        if let Some(rot) = rotate {
            let (c, s) = rot[r];
            let mx = tape.gather(means, (0..kt).map(|i| 2 * i).collect(), &[kt, 1])?;
            let my = tape.gather(means, (0..kt).map(|i| 2 * i + 1).collect(), &[kt, 1])?;
            let a = tape.scale(mx, c)?;
            let b = tape.scale(my, s)?;
            let x = tape.add(a, b)?;
            let a = tape.scale(mx, -s)?;
            let b = tape.scale(my, c)?;
            let y = tape.add(a, b)?;
            means = tape.concat(&[x, y], 1)?;
        }
        let means = tape.scale(means, scale)?;
        let mut covs = tape.gather(raw, (base + 2 * kt..base + 5 * kt).collect(), &[kt, 3])?;
        if let Some(rot) = rotate {
            let (c, s) = rot[r];
            covs = crate::gmm::rotate_cov_rows(tape, covs, c, s)?;
        }
        let logits = tape.gather(raw, (base + 5 * kt..base + 5 * kt + modes).collect(), &[modes])?;
        out.push(GmmVars {
            means,
            covs,
            logits,
            modes,
            horizon,
        });
    }
    Ok(out)
}

/// Analytic multiply-add count of full-scene inference with `n` agents and
/// `m` road polylines (no signals).
///
/// Teacher: per agent, history LSTM + one LSTM per neighbor + per-polyline
/// point network + decoder, so the total grows like `n·(n + m)`.
/// Student: point encoding of road samples, the convolution backbone over
/// the whole grid, then per agent its box-point encoding and patch decoder.
pub fn count_flops(kind: ModelKind, n: usize, m: usize, config: &ModelConfig) -> u64 {
    let out = config.output_width() as u64;
    match (kind, config) {
        (ModelKind::Teacher, ModelConfig::Teacher(c)) => {
            let (h, l) = (c.hidden as u64, c.history_len as u64);
            let lstm = l * 4 * h * (TEACHER_HISTORY_FEATURES as u64 + h);
            let neighbors = n.saturating_sub(1).min(c.max_neighbors) as u64;
            let polylines = m.min(c.max_polylines) as u64;
            let p = c.points_per_polyline as u64;
            let road = polylines * (p * (TEACHER_ROAD_FEATURES as u64 * h + h * h) + h * h);
            let decoder = (3 * h + c.signal_hidden as u64) * 2 * h + 2 * h * out;
            n as u64 * (lstm + neighbors * lstm + road + decoder)
        }
        (ModelKind::Student, ModelConfig::Student(c)) => {
            let (f, e) = (STUDENT_POINT_FEATURES as u64, c.pillar_embed as u64);
            let road = m as u64 * c.road_samples as u64 * f * e;
            let mut ch = e;
            let mut conv = 0;
            for &co in &c.conv_channels {
                conv += (c.grid_h * c.grid_w) as u64 * 9 * ch * co as u64;
                ch = co as u64;
            }
            n as u64 * student_per_agent_flops(c) + road + conv
        }
        _ => 0,
    }
}

/// Box-point encoding plus patch decoding of one agent.
pub fn student_per_agent_flops(c: &StudentConfig) -> u64 {
    let (f, e) = (STUDENT_POINT_FEATURES as u64, c.pillar_embed as u64);
    let points = 5 * c.history_len as u64 * f * e;
    let last = *c.conv_channels.last().unwrap_or(&c.pillar_embed) as u64;
    let patch = (c.patch * c.patch) as u64 * last;
    let out = (c.modes * c.horizon * 5 + c.modes) as u64;
    points + patch * c.hidden as u64 + c.hidden as u64 * out
}

/// Resample a polyline to `n` points evenly spaced by arc length, each with
/// the unit tangent of the segment it lies on.
pub(crate) fn resample_polyline(points: &[[f64; 2]], n: usize) -> Vec<([f64; 2], [f64; 2])> {
    if points.len() < 2 || n == 0 {
        return points.iter().take(n).map(|&p| (p, [1.0, 0.0])).collect();
    }
    let seg: Vec<f64> = points.windows(2).map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1])).collect();
    let total: f64 = seg.iter().sum();
    let mut out = Vec::with_capacity(n);
    let (mut i, mut start) = (0usize, 0.0f64);
    for q in 0..n {
        let s = if n == 1 { 0.0 } else { total * q as f64 / (n - 1) as f64 };
        while i + 1 < seg.len() && start + seg[i] < s {
            start += seg[i];
            i += 1;
        }
        let (a, b) = (points[i], points[i + 1]);
        let u = if seg[i] > 0.0 { ((s - start) / seg[i]).clamp(0.0, 1.0) } else { 0.0 };
        let d = if seg[i] > 0.0 {
            [(b[0] - a[0]) / seg[i], (b[1] - a[1]) / seg[i]]
        } else {
            [1.0, 0.0]
        };
        out.push(([a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])], d));
    }
    out
}

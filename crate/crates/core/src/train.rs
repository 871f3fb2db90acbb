//! Optimization: Adam with global-norm clipping, teacher training, student
//! baselines and distillation from a frozen teacher, checkpoints and logs.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tape;
use crate::error::{Error, Result};
use crate::gmm::{Trajectory, TrajectoryGMM};
use crate::losses::{example_loss, lambda_schedule, LambdaMode, LossBreakdown, LossOptions, Method};
use crate::metrics::{self, MetricsReport, RunMeta};
use crate::models::{init_params, ModelConfig, ModelKind, ModelParams, ParamBuffer, StudentConfig, TeacherConfig};
use crate::scenegen::{stream, Scene};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Scenes per optimizer step; every prediction target of a scene is used.
    pub batch_size: usize,
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub clip_norm: f64,
    pub lambda_mode: LambdaMode,
    pub method: Method,
    pub modes: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Loss records are written every `log_every` steps and at the last step.
    pub log_every: usize,
    /// Validation metrics are attached every `eval_every` steps and at the
    /// last step, when validation scenes are supplied.
    pub eval_every: usize,
    /// Cap on validation scenes used for in-training evaluation.
    pub eval_scenes: usize,
    pub loss: LossOptions,
    /// Architecture override; defaults to the standard config of the
    /// trained model kind with `modes` and `horizon` applied.
    pub model: Option<ModelConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 1,
            lr: 5e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            clip_norm: 10.0,
            lambda_mode: LambdaMode::Constant,
            method: Method::None,
            modes: 6,
            horizon: 16,
            seed: 1,
            log_every: 50,
            eval_every: 1000,
            eval_scenes: 100,
            loss: LossOptions::default(),
            model: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 || self.eval_every == 0 {
            return bad("steps, batch_size, log_every and eval_every must be positive");
        }
        if !(self.clip_norm > 0.0) || !(self.lr > 0.0) || !(self.eps > 0.0) {
            return bad("clip_norm, lr and eps must be positive");
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return bad("betas must lie in [0, 1)");
        }
        if self.modes == 0 || self.horizon == 0 {
            return bad("modes and horizon must be positive");
        }
        Ok(())
    }

    /// Architecture for a model of `kind` trained under this config.
    pub fn model_config(&self, kind: ModelKind) -> Result<ModelConfig> {
        let cfg = match &self.model {
            Some(m) => m.clone(),
            None => match kind {
                ModelKind::Teacher => ModelConfig::Teacher(TeacherConfig {
                    modes: self.modes,
                    horizon: self.horizon,
                    ..TeacherConfig::default()
                }),
                ModelKind::Student => ModelConfig::Student(StudentConfig {
                    modes: self.modes,
                    horizon: self.horizon,
                    ..StudentConfig::default()
                }),
            },
        };
        if cfg.modes() != self.modes || cfg.horizon() != self.horizon {
            return Err(Error::Config(format!(
                "model has K={} T={}, training config K={} T={}",
                cfg.modes(),
                cfg.horizon(),
                self.modes,
                self.horizon
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Scale `grads` so their global L2 norm is at most `threshold`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], threshold: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > threshold {
        let s = threshold / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::InvalidInput(format!(
            "adam sizes differ: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    /// Loss breakdown of this step, averaged over its examples.
    pub loss: LossBreakdown,
    /// Mean total loss over the steps since the previous record.
    pub window_loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub examples: usize,
    pub val: Option<ValMetrics>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: TrainRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            records.push(r);
        }
        Ok(Self { records })
    }
}

/// Frozen-teacher predictions keyed by scene and agent.
#[derive(Debug, Default)]
pub struct TeacherCache {
    entries: HashMap<(String, u32), TrajectoryGMM>,
    pub hits: usize,
    pub misses: usize,
}

impl TeacherCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Predictions for every target of `scene`, computing missing ones.
    pub fn scene(&mut self, teacher: &ModelParams, scene: &Scene) -> Result<Vec<TrajectoryGMM>> {
        let ids = scene.target_ids();
        let missing: Vec<u32> = ids
            .iter()
            .copied()
            .filter(|&id| !self.entries.contains_key(&(scene.scene_id.clone(), id)))
            .collect();
        if !missing.is_empty() {
            self.misses += missing.len();
            for (id, g) in missing.iter().zip(teacher.predict(scene, &missing)?) {
                self.entries.insert((scene.scene_id.clone(), *id), g);
            }
        }
        self.hits += ids.len() - missing.len();
        Ok(ids
            .iter()
            .map(|&id| self.entries[&(scene.scene_id.clone(), id)].clone())
            .collect())
    }
}

/// Loss breakdown and flat parameter gradient of one batch of scenes.
pub struct StepResult {
    pub loss: LossBreakdown,
    pub grads: Vec<f64>,
    pub examples: usize,
}

/// Mean example loss over all targets of `scenes` and its gradient.
pub fn batch_gradients(
    params: &ModelParams,
    scenes: &[&Scene],
    teacher_out: &[Vec<TrajectoryGMM>],
    method: Method,
    lambda: u8,
    opts: &LossOptions,
    sample_rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<StepResult> {
    let mut tape = Tape::new();
    let pv = params.to_tape(&mut tape, true)?;
    let mut terms = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        let ids = scene.target_ids();
        let out = params.forward_vars(&mut tape, &pv, scene, &ids)?;
        for (j, (g, &id)) in out.iter().zip(&ids).enumerate() {
            let gt = scene.future_in_agent_frame(id)?;
            let teacher = teacher_out.get(si).and_then(|t| t.get(j));
            terms.push(example_loss(&mut tape, method, g, teacher, &gt, lambda, opts, sample_rng)?);
        }
    }
    let n = terms.len();
    if n == 0 {
        return Ok(StepResult {
            loss: LossBreakdown {
                active_lambda: lambda,
                ..LossBreakdown::default()
            },
            grads: vec![0.0; params.num_values()],
            examples: 0,
        });
    }
    let mut loss = Vec::with_capacity(n);
    let mut total = terms[0].total;
    loss.push(terms[0].breakdown(&tape)?);
    for t in &terms[1..] {
        total = tape.add(total, t.total)?;
        loss.push(t.breakdown(&tape)?);
    }
    let mean = tape.scale(total, 1.0 / n as f64)?;
    let grads = tape.backward(mean)?;
    let flat = pv
        .vars()
        .iter()
        .zip(&params.buffers)
        .flat_map(|(&v, b)| grads.get_or_zero(v, b.values.len()))
        .collect();
    let mut lb = LossBreakdown::mean(&loss);
    lb.active_lambda = terms[0].active_lambda;
    Ok(StepResult {
        loss: lb,
        grads: flat,
        examples: n,
    })
}

/// Predictions and agent-frame groundtruth for every target of `scenes`.
pub fn predict_targets(params: &ModelParams, scenes: &[Scene]) -> Result<(Vec<TrajectoryGMM>, Vec<Trajectory>)> {
    let per_scene = scenes
        .par_iter()
        .map(|s| {
            let ids = s.target_ids();
            let preds = params.predict(s, &ids)?;
            let gts = ids.iter().map(|&id| s.future_in_agent_frame(id)).collect::<Result<Vec<_>>>()?;
            Ok((preds, gts))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for (p, g) in per_scene {
        preds.extend(p);
        gts.extend(g);
    }
    Ok((preds, gts))
}

/// Full metric report of a model over `scenes`.
pub fn evaluate_model(params: &ModelParams, scenes: &[Scene], k: usize, threshold: f64, meta: RunMeta) -> Result<MetricsReport> {
    let (preds, gts) = predict_targets(params, scenes)?;
    metrics::evaluate(&preds, &gts, k.min(params.config.modes()), threshold, meta)
}

fn check_data(data: &[Scene], horizon: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidInput("training data is empty".into()));
    }
    if let Some(s) = data.iter().find(|s| s.future_len != horizon) {
        return Err(Error::Incompatible(format!(
            "scene {} has horizon {}, model horizon {horizon}",
            s.scene_id, s.future_len
        )));
    }
    if data.iter().all(|s| s.target_ids().is_empty()) {
        return Err(Error::InvalidInput("training data has no prediction targets".into()));
    }
    Ok(())
}

/// Seeded initial parameters for `config`.
pub fn seeded_init(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    init_params(config, &mut stream(seed, 0, "init"))
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: TrainLog,
}

/// The shared optimization loop. `teacher` is required for every method
/// except `none`.
pub fn train_model(
    data: &[Scene],
    val: Option<&[Scene]>,
    cfg: &TrainConfig,
    init: ModelParams,
    teacher: Option<&ModelParams>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(data, cfg.horizon)?;
    if init.config.modes() != cfg.modes || init.config.horizon() != cfg.horizon {
        return Err(Error::Incompatible(format!(
            "model K={} T={} but training config K={} T={}",
            init.config.modes(),
            init.config.horizon(),
            cfg.modes,
            cfg.horizon
        )));
    }
    let teacher = match (cfg.method, teacher) {
        (Method::None, _) => None,
        (_, None) => return Err(Error::Config(format!("method {} needs a teacher", cfg.method.as_str()))),
        (_, Some(t)) => {
            if t.config.modes() != cfg.modes || t.config.horizon() != cfg.horizon {
                return Err(Error::Incompatible(format!(
                    "teacher K={} T={} but student K={} T={}",
                    t.config.modes(),
                    t.config.horizon(),
                    cfg.modes,
                    cfg.horizon
                )));
            }
            Some(t)
        }
    };
    let usable: Vec<&Scene> = data.iter().filter(|s| !s.target_ids().is_empty()).collect();
    let val: Vec<Scene> = val.map(|v| v.iter().take(cfg.eval_scenes).cloned().collect()).unwrap_or_default();

    let mut params = init;
    let mut flat: Vec<f64> = params.flat().iter().map(|&v| v as f64).collect();
    let mut state = AdamState::new(flat.len());
    let adam = AdamConfig {
        lr: cfg.lr,
        beta1: cfg.betas[0],
        beta2: cfg.betas[1],
        eps: cfg.eps,
    };
    let mut cache = TeacherCache::new();
    let mut order: Vec<usize> = Vec::new();
    let (mut epoch, mut cursor) = (0u64, 0usize);
    let mut log = TrainLog::default();
    let (mut window_sum, mut window_n) = (0.0, 0usize);

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..usable.len()).collect();
                order.shuffle(&mut stream(cfg.seed, epoch, "shuffle"));
                epoch += 1;
                cursor = 0;
            }
            batch.push(usable[order[cursor]]);
            cursor += 1;
        }
        let teacher_out = match teacher {
            Some(t) => batch.iter().map(|s| cache.scene(t, s)).collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        let lambda = lambda_schedule(step, cfg.steps, cfg.lambda_mode);
        let mut sample_rng = stream(cfg.seed, step as u64, "sample");
        let mut r = batch_gradients(&params, &batch, &teacher_out, cfg.method, lambda, &cfg.loss, &mut sample_rng)?;
        let grad_norm = clip_global_norm(&mut r.grads, cfg.clip_norm);
        adam_step(&mut flat, &r.grads, &mut state, &adam)?;
        // Parameters live in f32; keep the master copy on the same grid.
        let rounded: Vec<f32> = flat.iter().map(|&v| v as f32).collect();
        flat.iter_mut().zip(&rounded).for_each(|(m, &r)| *m = r as f64);
        params.set_flat(&rounded)?;

        window_sum += r.loss.total;
        window_n += 1;
        let last = step + 1 == cfg.steps;
        if step % cfg.log_every == 0 || last {
            let val_metrics = if !val.is_empty() && (step % cfg.eval_every == 0 || last) {
                let rep = evaluate_model(&params, &val, metrics::DEFAULT_K, metrics::DEFAULT_MISS_THRESHOLD, RunMeta::default())?;
                Some(ValMetrics {
                    min_ade: rep.min_ade,
                    min_fde: rep.min_fde,
                    miss_rate: rep.miss_rate,
                })
            } else {
                None
            };
            log.records.push(TrainRecord {
                step,
                loss: r.loss,
                window_loss: window_sum / window_n as f64,
                grad_norm,
                examples: r.examples,
                val: val_metrics,
            });
            window_sum = 0.0;
            window_n = 0;
        }
    }
    Ok(TrainOutcome { params, log })
}

/// Train a teacher on the base loss.
pub fn train_teacher(data: &[Scene], val: Option<&[Scene]>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.method = Method::None;
    let init = seeded_init(&cfg.model_config(ModelKind::Teacher)?, cfg.seed)?;
    train_model(data, val, &cfg, init, None)
}

/// Train a student baseline on the base loss.
pub fn train_student(data: &[Scene], val: Option<&[Scene]>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.method = Method::None;
    let init = seeded_init(&cfg.model_config(ModelKind::Student)?, cfg.seed)?;
    train_model(data, val, &cfg, init, None)
}

/// Train a student with `cfg.method` against a frozen teacher.
pub fn distill_student(data: &[Scene], val: Option<&[Scene]>, teacher: &ModelParams, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if teacher.config.modes() != cfg.modes || teacher.config.horizon() != cfg.horizon {
        return Err(Error::Incompatible(format!(
            "teacher K={} T={} but student K={} T={}",
            teacher.config.modes(),
            teacher.config.horizon(),
            cfg.modes,
            cfg.horizon
        )));
    }
    let init = seeded_init(&cfg.model_config(ModelKind::Student)?, cfg.seed)?;
    train_model(data, val, cfg, init, Some(teacher))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
}

/// Write `manifest.json` and `params.bin` (little-endian f32) into `dir`.
pub fn save_checkpoint(params: &ModelParams, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        kind: params.kind(),
        config: params.config.clone(),
        params: params
            .buffers
            .iter()
            .map(|b| ParamEntry {
                name: b.name.clone(),
                shape: b.shape.clone(),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    let mut w = BufWriter::new(File::create(dir.join(PARAMS_FILE))?);
    for b in &params.buffers {
        for v in &b.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelParams> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let version = raw.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Schema {
            what: "checkpoint",
            found: version,
            expected: CHECKPOINT_SCHEMA_VERSION,
        });
    }
    let manifest: CheckpointManifest = serde_json::from_value(raw)?;
    if manifest.kind != manifest.config.kind() {
        return Err(Error::Corrupt(format!(
            "manifest kind {} disagrees with config kind {}",
            manifest.kind.as_str(),
            manifest.config.kind().as_str()
        )));
    }
    let bytes = fs::read(dir.join(PARAMS_FILE))?;
    let expected: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::Corrupt(format!(
            "{} holds {} bytes, manifest describes {expected}",
            PARAMS_FILE,
            bytes.len()
        )));
    }
    let mut at = 0;
    let buffers = manifest
        .params
        .into_iter()
        .map(|p| {
            let n: usize = p.shape.iter().product();
            let values = bytes[at..at + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            at += 4 * n;
            ParamBuffer {
                name: p.name,
                shape: p.shape,
                values,
            }
        })
        .collect();
    ModelParams::from_buffers(manifest.config, buffers).map_err(|e| match e {
        Error::Incompatible(m) => Error::Corrupt(m),
        e => e,
    })
}

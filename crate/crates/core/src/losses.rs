//! Likelihood and distillation objectives.
//!
//! Every loss is assembled on a [`Tape`] from the student's [`GmmVars`];
//! teacher outputs enter only as constants. The plain functions taking two
//! [`TrajectoryGMM`]s evaluate the same graphs and are what tests and tools
//! use when no gradient is needed.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::gmm::{self, GmmVars, Trajectory, TrajectoryGMM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    None,
    Set,
    Sample,
    Distribution,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Set => "set",
            Method::Sample => "sample",
            Method::Distribution => "distribution",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Method::None),
            "set" => Ok(Method::Set),
            "sample" => Ok(Method::Sample),
            "distribution" => Ok(Method::Distribution),
            _ => Err(Error::Config(format!("unknown method '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LambdaMode {
    #[default]
    Constant,
    Warmup25,
}

impl std::str::FromStr for LambdaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LambdaMode::Constant),
            "warmup25" => Ok(LambdaMode::Warmup25),
            _ => Err(Error::Config(format!("unknown lambda mode '{s}'"))),
        }
    }
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossOptions {
    /// Weight the mode cross-entropy by K (one copy per mode).
    pub ce_per_mode: bool,
    /// Use KL(teacher ‖ student) instead of KL(student ‖ teacher).
    pub kl_reverse: bool,
    /// Sample distillation draws only a mode index, no Gaussian noise.
    pub mode_only: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            ce_per_mode: false,
            kl_reverse: false,
            mode_only: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub nll_term: f64,
    pub ce_term: f64,
    pub kl_term: f64,
    pub active_lambda: u8,
}

impl LossBreakdown {
    /// Element-wise mean.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = LossBreakdown::default();
        for b in items {
            out.total += b.total;
            out.nll_term += b.nll_term;
            out.ce_term += b.ce_term;
            out.kl_term += b.kl_term;
        }
        out.total /= n;
        out.nll_term /= n;
        out.ce_term /= n;
        out.kl_term /= n;
        out.active_lambda = items.first().map_or(0, |b| b.active_lambda);
        out
    }
}

/// Loss terms of one example living on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub nll: Var,
    pub ce: Var,
    pub kl: Var,
    pub active_lambda: u8,
}

impl LossTerms {
    fn assemble(tape: &mut Tape, nll: Var, ce: Var, kl: Var, active_lambda: u8) -> Result<Self> {
        let s = tape.add(nll, ce)?;
        let total = tape.add(s, kl)?;
        Ok(Self {
            total,
            nll,
            ce,
            kl,
            active_lambda,
        })
    }

    pub fn breakdown(&self, tape: &Tape) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            total: tape.scalar_value(self.total),
            nll_term: tape.scalar_value(self.nll),
            ce_term: tape.scalar_value(self.ce),
            kl_term: tape.scalar_value(self.kl),
            active_lambda: self.active_lambda,
        })
    }
}

/// `1` for constant mode; warm-up mode is `0` for the first quarter.
pub fn lambda_schedule(step: usize, total_steps: usize, mode: LambdaMode) -> u8 {
    match mode {
        LambdaMode::Constant => 1,
        LambdaMode::Warmup25 => u8::from(step >= total_steps / 4),
    }
}

/// `-Σ Π_k ln π_k`.
pub fn mode_cross_entropy(student_w: &[f64], teacher_w: &[f64]) -> f64 {
    -student_w
        .iter()
        .zip(teacher_w)
        .map(|(&p, &t)| if t == 0.0 { 0.0 } else { t * p.ln() })
        .sum::<f64>()
}

fn check_pair(student: &GmmVars, teacher: &TrajectoryGMM) -> Result<()> {
    if student.modes != teacher.num_modes() || student.horizon != teacher.horizon() {
        return Err(Error::Incompatible(format!(
            "student K={} T={} vs teacher K={} T={}",
            student.modes,
            student.horizon,
            teacher.num_modes(),
            teacher.horizon()
        )));
    }
    Ok(())
}

/// `-log π_k̂ - Σ_t log N(gt_t | μ_k̂t, Σ_k̂t)` with `k̂` the closest mode.
pub fn base_nll(tape: &mut Tape, s: &GmmVars, gt: &Trajectory) -> Result<Var> {
    if gt.len() != s.horizon {
        return Err(Error::InvalidInput(format!(
            "groundtruth length {} vs horizon {}",
            gt.len(),
            s.horizon
        )));
    }
    let steps: Vec<usize> = gt.valid_steps().collect();
    if steps.is_empty() {
        return Err(Error::InvalidInput("groundtruth has no valid step".into()));
    }
    let means = s.mode_means(tape);
    let k = gmm::closest_by_means(means.iter().map(|m| m.as_slice()), gt);
    let rows: Vec<usize> = steps.iter().map(|&t| k * s.horizon + t).collect();
    let mu = gmm::select_rows(tape, s.means, &rows)?;
    let cov = gmm::select_rows(tape, s.covs, &rows)?;
    let target = tape.constant(steps.iter().flat_map(|&t| gt.states[t]).collect(), &[steps.len(), 2])?;
    let r = tape.sub(target, mu)?;
    let lp = gmm::logpdf_rows(tape, r, cov)?;
    let ll = tape.sum_all(lp)?;
    let lw = gmm::log_weights(tape, s.logits)?;
    let lw_k = tape.gather(lw, Arc::from([k]), &[])?;
    let sum = tape.add(ll, lw_k)?;
    tape.neg(sum)
}

/// Mode cross-entropy against constant teacher weights.
pub fn mode_ce(tape: &mut Tape, logits: Var, teacher_w: &[f64], per_mode: bool) -> Result<Var> {
    let lw = gmm::log_weights(tape, logits)?;
    let tw = tape.constant(teacher_w.to_vec(), &[teacher_w.len()])?;
    let p = tape.mul(lw, tw)?;
    let s = tape.sum_all(p)?;
    let scale = if per_mode { -(teacher_w.len() as f64) } else { -1.0 };
    tape.scale(s, scale)
}

/// `-Σ_k Σ_t log N(ξ_kt | μ_kt, Σ_kt)` with teacher means as targets.
pub fn set_nll(tape: &mut Tape, s: &GmmVars, teacher: &TrajectoryGMM) -> Result<Var> {
    check_pair(s, teacher)?;
    let target = tape.constant(teacher.flat_means(), &[s.modes * s.horizon, 2])?;
    let r = tape.sub(target, s.means)?;
    let lp = gmm::logpdf_rows(tape, r, s.covs)?;
    let ll = tape.sum_all(lp)?;
    tape.neg(ll)
}

/// `Σ_k Σ_t KL(student_kt ‖ teacher_kt)`, or the reverse direction.
pub fn kl_sum(tape: &mut Tape, s: &GmmVars, teacher: &TrajectoryGMM, reverse: bool) -> Result<Var> {
    check_pair(s, teacher)?;
    let rows = s.modes * s.horizon;
    let tm = tape.constant(teacher.flat_means(), &[rows, 2])?;
    let tc = tape.constant(teacher.flat_covs(), &[rows, 3])?;
    let kl = if reverse {
        gmm::kl_rows(tape, tm, tc, s.means, s.covs)?
    } else {
        gmm::kl_rows(tape, s.means, s.covs, tm, tc)?
    };
    tape.sum_all(kl)
}

/// Training objective of one example under `method`.
///
/// * `none`: base loss on `gt`.
/// * `set`: set NLL + CE + λ·base.
/// * `sample`: base loss on a proxy drawn from the teacher.
/// * `distribution`: λ·base + CE + KL.
#[allow(clippy::too_many_arguments)]
pub fn example_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    method: Method,
    s: &GmmVars,
    teacher: Option<&TrajectoryGMM>,
    gt: &Trajectory,
    lambda: u8,
    opts: &LossOptions,
    rng: &mut R,
) -> Result<LossTerms> {
    let zero = |tape: &mut Tape| tape.scalar(0.0);
    let need_teacher = || {
        teacher.ok_or_else(|| Error::InvalidInput(format!("method {} needs teacher outputs", method.as_str())))
    };
    match method {
        Method::None => {
            let nll = base_nll(tape, s, gt)?;
            let (ce, kl) = (zero(tape)?, zero(tape)?);
            LossTerms::assemble(tape, nll, ce, kl, 1)
        }
        Method::Set => {
            let t = need_teacher()?;
            let mut nll = set_nll(tape, s, t)?;
            if lambda == 1 {
                let b = base_nll(tape, s, gt)?;
                nll = tape.add(nll, b)?;
            }
            let ce = mode_ce(tape, s.logits, &t.weights(), opts.ce_per_mode)?;
            let kl = zero(tape)?;
            LossTerms::assemble(tape, nll, ce, kl, lambda)
        }
        Method::Sample => {
            let t = need_teacher()?;
            check_pair(s, t)?;
            let proxy = gmm::sample(t, rng, opts.mode_only);
            let nll = base_nll(tape, s, &proxy)?;
            let (ce, kl) = (zero(tape)?, zero(tape)?);
            LossTerms::assemble(tape, nll, ce, kl, 0)
        }
        Method::Distribution => {
            let t = need_teacher()?;
            let nll = if lambda == 1 { base_nll(tape, s, gt)? } else { zero(tape)? };
            let ce = mode_ce(tape, s.logits, &t.weights(), opts.ce_per_mode)?;
            let kl = kl_sum(tape, s, t, opts.kl_reverse)?;
            LossTerms::assemble(tape, nll, ce, kl, lambda)
        }
    }
}

/// Methods other than `sample` never draw from the generator.
fn idle_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

fn eval_with(student: &TrajectoryGMM, f: impl FnOnce(&mut Tape, &GmmVars) -> Result<LossTerms>) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let s = GmmVars::from_gmm(&mut tape, student, false)?;
    let terms = f(&mut tape, &s)?;
    terms.breakdown(&tape)
}

pub fn base_loss(pred: &TrajectoryGMM, gt: &Trajectory) -> Result<LossBreakdown> {
    eval_with(pred, |tape, s| {
        let nll = base_nll(tape, s, gt)?;
        let (ce, kl) = (tape.scalar(0.0)?, tape.scalar(0.0)?);
        LossTerms::assemble(tape, nll, ce, kl, 1)
    })
}

pub fn distill_set_loss(student: &TrajectoryGMM, teacher: &TrajectoryGMM) -> Result<LossBreakdown> {
    distill_set_loss_with(student, teacher, &LossOptions::default())
}

pub fn distill_set_loss_with(student: &TrajectoryGMM, teacher: &TrajectoryGMM, opts: &LossOptions) -> Result<LossBreakdown> {
    eval_with(student, |tape, s| {
        let nll = set_nll(tape, s, teacher)?;
        let ce = mode_ce(tape, s.logits, &teacher.weights(), opts.ce_per_mode)?;
        let kl = tape.scalar(0.0)?;
        LossTerms::assemble(tape, nll, ce, kl, 0)
    })
}

/// Set distillation plus `lambda` times the base loss.
pub fn combined_loss(student: &TrajectoryGMM, teacher: &TrajectoryGMM, gt: &Trajectory, lambda: u8) -> Result<LossBreakdown> {
    eval_with(student, |tape, s| {
        example_loss(tape, Method::Set, s, Some(teacher), gt, lambda, &LossOptions::default(), &mut idle_rng())
    })
}

pub fn distill_sample_loss<R: Rng + ?Sized>(
    student: &TrajectoryGMM,
    teacher: &TrajectoryGMM,
    rng: &mut R,
    mode_only: bool,
) -> Result<LossBreakdown> {
    let opts = LossOptions {
        mode_only,
        ..LossOptions::default()
    };
    let gt = Trajectory::fully_valid(vec![[0.0, 0.0]; student.horizon()]);
    eval_with(student, |tape, s| example_loss(tape, Method::Sample, s, Some(teacher), &gt, 0, &opts, rng))
}

pub fn distill_distribution_loss(student: &TrajectoryGMM, teacher: &TrajectoryGMM, gt: &Trajectory) -> Result<LossBreakdown> {
    distill_distribution_loss_with(student, teacher, gt, &LossOptions::default())
}

pub fn distill_distribution_loss_with(
    student: &TrajectoryGMM,
    teacher: &TrajectoryGMM,
    gt: &Trajectory,
    opts: &LossOptions,
) -> Result<LossBreakdown> {
    eval_with(student, |tape, s| {
        example_loss(tape, Method::Distribution, s, Some(teacher), gt, 1, opts, &mut idle_rng())
    })
}

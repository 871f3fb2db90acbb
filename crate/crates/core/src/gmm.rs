//! Trajectory-level Gaussian mixtures.
//!
//! Each of `K` modes is a mean trajectory with one 2D Gaussian per step;
//! the modes are mixed by `softmax(logits)`. Covariances are parameterized
//! as `(log σx, log σy, ρ_raw)` with `ρ = tanh(ρ_raw)`, which keeps every
//! `Σ` positive definite.
//!
//! Plain `f64` functions serve evaluation and sampling. The `*_rows`
//! functions build the same quantities on a [`Tape`] for training.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{column_index, Tape, Var};
use crate::error::{Error, Result};
use crate::geom::Pose2;

pub const LOG_SIGMA_MIN: f64 = -6.0;
pub const LOG_SIGMA_MAX: f64 = 4.0;
/// Bound on `ρ_raw`; keeps `1 - ρ²` well away from zero.
pub const RHO_RAW_LIMIT: f64 = 5.0;
/// Determinant below which a KL reference covariance is rejected.
pub const MIN_KL_DET: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovParams {
    log_sigma_x: f64,
    log_sigma_y: f64,
    rho_raw: f64,
}

impl CovParams {
    /// Raw parameters are clamped into their valid ranges.
    pub fn new(log_sigma_x: f64, log_sigma_y: f64, rho_raw: f64) -> Self {
        Self {
            log_sigma_x: log_sigma_x.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX),
            log_sigma_y: log_sigma_y.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX),
            rho_raw: rho_raw.clamp(-RHO_RAW_LIMIT, RHO_RAW_LIMIT),
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn from_sigmas(sigma_x: f64, sigma_y: f64, rho: f64) -> Self {
        Self::new(sigma_x.ln(), sigma_y.ln(), rho.atanh())
    }

    pub fn log_sigma_x(&self) -> f64 {
        self.log_sigma_x
    }

    pub fn log_sigma_y(&self) -> f64 {
        self.log_sigma_y
    }

    pub fn rho_raw(&self) -> f64 {
        self.rho_raw
    }

    pub fn sigma_x(&self) -> f64 {
        self.log_sigma_x.exp()
    }

    pub fn sigma_y(&self) -> f64 {
        self.log_sigma_y.exp()
    }

    pub fn rho(&self) -> f64 {
        self.rho_raw.tanh()
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.log_sigma_x, self.log_sigma_y, self.rho_raw]
    }

    pub fn matrix(&self) -> [[f64; 2]; 2] {
        let (sx, sy, r) = (self.sigma_x(), self.sigma_y(), self.rho());
        [[sx * sx, r * sx * sy], [r * sx * sy, sy * sy]]
    }

    pub fn det(&self) -> f64 {
        let r = self.rho();
        (2.0 * (self.log_sigma_x + self.log_sigma_y)).exp() * (1.0 - r * r)
    }

    /// Lower Cholesky factor of `Σ`.
    pub fn cholesky(&self) -> [[f64; 2]; 2] {
        let (sx, sy, r) = (self.sigma_x(), self.sigma_y(), self.rho());
        [[sx, 0.0], [r * sy, sy * (1.0 - r * r).sqrt()]]
    }

    fn is_finite(&self) -> bool {
        self.log_sigma_x.is_finite() && self.log_sigma_y.is_finite() && self.rho_raw.is_finite()
    }
}

impl Default for CovParams {
    fn default() -> Self {
        Self::identity()
    }
}

/// A (possibly partially observed) future: positions plus per-step validity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl Trajectory {
    pub fn new(states: Vec<[f64; 2]>, valid: Vec<bool>) -> Result<Self> {
        if states.len() != valid.len() {
            return Err(Error::InvalidInput(format!(
                "{} states but {} validity flags",
                states.len(),
                valid.len()
            )));
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::InvalidInput("trajectory has no valid step".into()));
        }
        Ok(Self { states, valid })
    }

    pub fn fully_valid(states: Vec<[f64; 2]>) -> Self {
        let valid = vec![true; states.len()];
        Self { states, valid }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn valid_steps(&self) -> impl Iterator<Item = usize> + '_ {
        self.valid.iter().enumerate().filter(|(_, &v)| v).map(|(t, _)| t)
    }

    pub fn last_valid(&self) -> Option<usize> {
        self.valid.iter().rposition(|&v| v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeTrajectory {
    pub means: Vec<[f64; 2]>,
    pub covs: Vec<CovParams>,
}

impl ModeTrajectory {
    pub fn with_unit_cov(means: Vec<[f64; 2]>) -> Self {
        let covs = vec![CovParams::identity(); means.len()];
        Self { means, covs }
    }
}

/// Mixture over mode trajectories, expressed in the frame of `anchor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryGMM {
    modes: Vec<ModeTrajectory>,
    logits: Vec<f64>,
    anchor: Pose2,
}

impl TrajectoryGMM {
    pub fn new(modes: Vec<ModeTrajectory>, logits: Vec<f64>, anchor: Pose2) -> Result<Self> {
        if modes.is_empty() || modes.len() != logits.len() {
            return Err(Error::InvalidInput(format!(
                "{} modes with {} logits",
                modes.len(),
                logits.len()
            )));
        }
        let horizon = modes[0].means.len();
        for m in &modes {
            if m.means.len() != horizon || m.covs.len() != horizon {
                return Err(Error::InvalidInput("modes disagree on horizon".into()));
            }
            if m.means.iter().any(|p| !(p[0].is_finite() && p[1].is_finite()))
                || m.covs.iter().any(|c| !c.is_finite())
            {
                return Err(Error::InvalidInput("non-finite mode parameters".into()));
            }
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidInput("non-finite logits".into()));
        }
        Ok(Self {
            modes,
            logits,
            anchor,
        })
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn horizon(&self) -> usize {
        self.modes[0].means.len()
    }

    pub fn modes(&self) -> &[ModeTrajectory] {
        &self.modes
    }

    pub fn mode(&self, k: usize) -> &ModeTrajectory {
        &self.modes[k]
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn anchor(&self) -> Pose2 {
        self.anchor
    }

    pub fn weights(&self) -> Vec<f64> {
        mode_weights(&self.logits)
    }

    /// Flattened `[K*T, 2]` means, `[K*T, 3]` covariance parameters.
    pub fn flat_means(&self) -> Vec<f64> {
        self.modes.iter().flat_map(|m| m.means.iter().flatten().copied()).collect()
    }

    pub fn flat_covs(&self) -> Vec<f64> {
        self.modes.iter().flat_map(|m| m.covs.iter().flat_map(|c| c.as_array())).collect()
    }

    /// Rebuild from flat buffers (as produced by a model head).
    pub fn from_flat(means: &[f64], covs: &[f64], logits: &[f64], horizon: usize, anchor: Pose2) -> Result<Self> {
        let k = logits.len();
        if means.len() != k * horizon * 2 || covs.len() != k * horizon * 3 {
            return Err(Error::InvalidInput("flat GMM buffers have wrong length".into()));
        }
        let modes = (0..k)
            .map(|m| ModeTrajectory {
                means: (0..horizon)
                    .map(|t| {
                        let i = (m * horizon + t) * 2;
                        [means[i], means[i + 1]]
                    })
                    .collect(),
                covs: (0..horizon)
                    .map(|t| {
                        let i = (m * horizon + t) * 3;
                        CovParams::new(covs[i], covs[i + 1], covs[i + 2])
                    })
                    .collect(),
            })
            .collect();
        Self::new(modes, logits.to_vec(), anchor)
    }
}

fn check_finite2(p: [f64; 2]) -> Result<()> {
    if p[0].is_finite() && p[1].is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("non-finite vector {p:?}")))
    }
}

/// `log N(residual | 0, Σ)`.
pub fn gaussian2d_logpdf(residual: [f64; 2], cov: &CovParams) -> Result<f64> {
    check_finite2(residual)?;
    if !cov.is_finite() {
        return Err(Error::InvalidInput("non-finite covariance".into()));
    }
    let rho = cov.rho();
    let omr = 1.0 - rho * rho;
    let zx = residual[0] / cov.sigma_x();
    let zy = residual[1] / cov.sigma_y();
    let q = (zx * zx + zy * zy - 2.0 * rho * zx * zy) / omr;
    Ok(-LN_2PI - cov.log_sigma_x - cov.log_sigma_y - 0.5 * omr.ln() - 0.5 * q)
}

/// Numerically stable softmax.
pub fn mode_weights(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn log_mode_weights(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

fn check_horizon(gmm: &TrajectoryGMM, traj: &Trajectory) -> Result<()> {
    if traj.len() != gmm.horizon() {
        return Err(Error::InvalidInput(format!(
            "trajectory length {} vs horizon {}",
            traj.len(),
            gmm.horizon()
        )));
    }
    Ok(())
}

/// Sum of per-step log densities of `traj` under mode `k`; invalid steps
/// contribute nothing.
pub fn mode_loglik(gmm: &TrajectoryGMM, k: usize, traj: &Trajectory) -> Result<f64> {
    if k >= gmm.num_modes() {
        return Err(Error::IndexOutOfRange {
            index: k,
            len: gmm.num_modes(),
        });
    }
    check_horizon(gmm, traj)?;
    let mode = gmm.mode(k);
    traj.valid_steps().try_fold(0.0, |acc, t| {
        let r = [traj.states[t][0] - mode.means[t][0], traj.states[t][1] - mode.means[t][1]];
        Ok(acc + gaussian2d_logpdf(r, &mode.covs[t])?)
    })
}

/// `log Σ_k π_k Π_t N(...)`, evaluated with a max shift.
pub fn gmm_loglik(gmm: &TrajectoryGMM, traj: &Trajectory) -> Result<f64> {
    let lw = log_mode_weights(gmm.logits());
    let terms = (0..gmm.num_modes())
        .map(|k| Ok(lw[k] + mode_loglik(gmm, k, traj)?))
        .collect::<Result<Vec<f64>>>()?;
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(m + terms.iter().map(|&v| (v - m).exp()).sum::<f64>().ln())
}

/// Mean per-valid-step Euclidean distance between a mode's means and `traj`.
pub fn mean_displacement(means: &[[f64; 2]], traj: &Trajectory) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in traj.valid_steps() {
        sum += (means[t][0] - traj.states[t][0]).hypot(means[t][1] - traj.states[t][1]);
        n += 1;
    }
    sum / n as f64
}

/// Mode whose mean trajectory is nearest `traj`; ties go to the lower index.
pub fn closest_mode(gmm: &TrajectoryGMM, traj: &Trajectory) -> Result<usize> {
    check_horizon(gmm, traj)?;
    if traj.last_valid().is_none() {
        return Err(Error::InvalidInput("trajectory has no valid step".into()));
    }
    Ok(closest_by_means(gmm.modes().iter().map(|m| m.means.as_slice()), traj))
}

pub(crate) fn closest_by_means<'a>(modes: impl Iterator<Item = &'a [[f64; 2]]>, traj: &Trajectory) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, means) in modes.enumerate() {
        let d = mean_displacement(means, traj);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Draw a mode index from `weights` with one uniform variate.
pub fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    // u landed in the rounding gap above the cumulative sum
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Draw one trajectory. With `mode_only` the sampled mode's means are
/// returned as-is; otherwise per-step Gaussian noise is added.
pub fn sample<R: Rng + ?Sized>(gmm: &TrajectoryGMM, rng: &mut R, mode_only: bool) -> Trajectory {
    let k = sample_index(&gmm.weights(), rng);
    let mode = gmm.mode(k);
    if mode_only {
        return Trajectory::fully_valid(mode.means.clone());
    }
    let states = mode
        .means
        .iter()
        .zip(&mode.covs)
        .map(|(mu, cov)| {
            let l = cov.cholesky();
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            [mu[0] + l[0][0] * z0, mu[1] + l[1][0] * z0 + l[1][1] * z1]
        })
        .collect();
    Trajectory::fully_valid(states)
}

/// Closed-form `KL(N(mu_a, Σ_a) ‖ N(mu_b, Σ_b))`.
pub fn gaussian_kl(mu_a: [f64; 2], cov_a: &CovParams, mu_b: [f64; 2], cov_b: &CovParams) -> Result<f64> {
    check_finite2(mu_a)?;
    check_finite2(mu_b)?;
    let det_b = cov_b.det();
    if !(det_b >= MIN_KL_DET) {
        return Err(Error::SingularCovariance { det: det_b });
    }
    let (ra, rb) = (cov_a.rho(), cov_b.rho());
    let omr_b = 1.0 - rb * rb;
    let sxr = (cov_a.log_sigma_x - cov_b.log_sigma_x).exp();
    let syr = (cov_a.log_sigma_y - cov_b.log_sigma_y).exp();
    let trace = (sxr * sxr + syr * syr - 2.0 * ra * rb * sxr * syr) / omr_b;
    let zx = (mu_b[0] - mu_a[0]) / cov_b.sigma_x();
    let zy = (mu_b[1] - mu_a[1]) / cov_b.sigma_y();
    let maha = (zx * zx + zy * zy - 2.0 * rb * zx * zy) / omr_b;
    let log_det_ratio = 2.0 * (cov_b.log_sigma_x + cov_b.log_sigma_y - cov_a.log_sigma_x - cov_a.log_sigma_y)
        + omr_b.ln()
        - (1.0 - ra * ra).ln();
    Ok((0.5 * (trace + maha - 2.0 + log_det_ratio)).max(0.0))
}

// ---------------------------------------------------------------------------
// Tape versions
// ---------------------------------------------------------------------------

/// Mixture parameters living on a tape: means `[K*T, 2]`, raw covariance
/// parameters `[K*T, 3]`, logits `[K]`.
#[derive(Debug, Clone, Copy)]
pub struct GmmVars {
    pub means: Var,
    pub covs: Var,
    pub logits: Var,
    pub modes: usize,
    pub horizon: usize,
}

impl GmmVars {
    /// Put a plain mixture on the tape as leaves.
    pub fn from_gmm(tape: &mut Tape, gmm: &TrajectoryGMM, requires_grad: bool) -> Result<Self> {
        let (k, t) = (gmm.num_modes(), gmm.horizon());
        Ok(Self {
            means: tape.leaf(gmm.flat_means(), &[k * t, 2], requires_grad)?,
            covs: tape.leaf(gmm.flat_covs(), &[k * t, 3], requires_grad)?,
            logits: tape.leaf(gmm.logits().to_vec(), &[k], requires_grad)?,
            modes: k,
            horizon: t,
        })
    }

    /// Read the current values back into a plain mixture.
    pub fn to_gmm(&self, tape: &Tape, anchor: Pose2) -> Result<TrajectoryGMM> {
        TrajectoryGMM::from_flat(
            tape.value(self.means),
            tape.value(self.covs),
            tape.value(self.logits),
            self.horizon,
            anchor,
        )
    }

    pub fn mode_means(&self, tape: &Tape) -> Vec<Vec<[f64; 2]>> {
        let v = tape.value(self.means);
        (0..self.modes)
            .map(|k| (0..self.horizon).map(|t| [v[(k * self.horizon + t) * 2], v[(k * self.horizon + t) * 2 + 1]]).collect())
            .collect()
    }
}

/// `lo + relu(x - lo) - relu(x - hi)`.
pub fn clamp(tape: &mut Tape, x: Var, lo: f64, hi: f64) -> Result<Var> {
    let a = tape.offset(x, -lo)?;
    let a = tape.relu(a)?;
    let b = tape.offset(x, -hi)?;
    let b = tape.relu(b)?;
    let d = tape.sub(a, b)?;
    tape.offset(d, lo)
}

fn column(tape: &mut Tape, x: Var, c: usize) -> Result<Var> {
    let (rows, cols) = (tape.shape(x)[0], tape.shape(x)[1]);
    tape.gather(x, column_index(rows, cols, c, 1), &[rows])
}

struct CovCols {
    lsx: Var,
    lsy: Var,
    rho: Var,
    /// `log(1 - ρ²)`
    log_omr: Var,
}

fn cov_columns(tape: &mut Tape, cov: Var) -> Result<CovCols> {
    let lsx = column(tape, cov, 0)?;
    let lsx = clamp(tape, lsx, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
    let lsy = column(tape, cov, 1)?;
    let lsy = clamp(tape, lsy, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
    let r = column(tape, cov, 2)?;
    let r = clamp(tape, r, -RHO_RAW_LIMIT, RHO_RAW_LIMIT)?;
    let rho = tape.tanh(r)?;
    let rho2 = tape.square(rho)?;
    let omr = tape.scale(rho2, -1.0)?;
    let omr = tape.offset(omr, 1.0)?;
    let log_omr = tape.log(omr)?;
    Ok(CovCols { lsx, lsy, rho, log_omr })
}

/// `(zx² + zy² - 2ρ zx zy) / (1 - ρ²)`
fn quad_form(tape: &mut Tape, zx: Var, zy: Var, c: &CovCols) -> Result<Var> {
    let a = tape.square(zx)?;
    let b = tape.square(zy)?;
    let cross = tape.mul(zx, zy)?;
    let cross = tape.mul(cross, c.rho)?;
    let cross = tape.scale(cross, -2.0)?;
    let s = tape.add(a, b)?;
    let s = tape.add(s, cross)?;
    let inv = tape.neg(c.log_omr)?;
    let inv = tape.exp(inv)?;
    tape.mul(s, inv)
}

/// Re-express `[N,3]` covariance rows given in world axes in a frame with
/// heading `(cos, sin)`: `Σ' = R Σ Rᵀ` with `R = [[c, s], [-s, c]]`. Inputs
/// are clamped first, outputs are raw parameters of `Σ'`.
pub fn rotate_cov_rows(tape: &mut Tape, cov: Var, cos: f64, sin: f64) -> Result<Var> {
    let rows = tape.shape(cov)[0];
    let c = cov_columns(tape, cov)?;
    let l2x = tape.scale(c.lsx, 2.0)?;
    let sxx = tape.exp(l2x)?;
    let l2y = tape.scale(c.lsy, 2.0)?;
    let syy = tape.exp(l2y)?;
    let lxy = tape.add(c.lsx, c.lsy)?;
    let sxy = tape.exp(lxy)?;
    let sxy = tape.mul(sxy, c.rho)?;

    let (cc, ss, cs) = (cos * cos, sin * sin, cos * sin);
    let combo = |tape: &mut Tape, wx: f64, wy: f64, wxy: f64| -> Result<Var> {
        let a = tape.scale(sxx, wx)?;
        let b = tape.scale(syy, wy)?;
        let d = tape.scale(sxy, wxy)?;
        let s = tape.add(a, b)?;
        tape.add(s, d)
    };
    let vx = combo(tape, cc, ss, 2.0 * cs)?;
    let vy = combo(tape, ss, cc, -2.0 * cs)?;
    let cxy = combo(tape, -cs, cs, cc - ss)?;

    let lvx = tape.log(vx)?;
    let lsx = tape.scale(lvx, 0.5)?;
    let lvy = tape.log(vy)?;
    let lsy = tape.scale(lvy, 0.5)?;
    let norm = tape.add(lsx, lsy)?;
    let norm = tape.neg(norm)?;
    let norm = tape.exp(norm)?;
    let rho = tape.mul(cxy, norm)?;
    // atanh(ρ) = ½ (ln(1 + ρ) - ln(1 - ρ))
    let up = tape.offset(rho, 1.0)?;
    let up = tape.log(up)?;
    let down = tape.neg(rho)?;
    let down = tape.offset(down, 1.0)?;
    let down = tape.log(down)?;
    let r = tape.sub(up, down)?;
    let r = tape.scale(r, 0.5)?;

    let cols: Vec<Var> = [lsx, lsy, r]
        .into_iter()
        .map(|v| tape.reshape(v, &[rows, 1]))
        .collect::<Result<_>>()?;
    tape.concat(&cols, 1)
}

/// Row-wise `log N(residual_i | 0, Σ_i)`: `[N,2] × [N,3] -> [N]`.
pub fn logpdf_rows(tape: &mut Tape, residual: Var, cov: Var) -> Result<Var> {
    let c = cov_columns(tape, cov)?;
    let dx = column(tape, residual, 0)?;
    let dy = column(tape, residual, 1)?;
    let ex = tape.neg(c.lsx)?;
    let ex = tape.exp(ex)?;
    let ey = tape.neg(c.lsy)?;
    let ey = tape.exp(ey)?;
    let zx = tape.mul(dx, ex)?;
    let zy = tape.mul(dy, ey)?;
    let q = quad_form(tape, zx, zy, &c)?;
    // -ln2π - lsx - lsy - ½ log(1-ρ²) - ½ q
    let s = tape.add(c.lsx, c.lsy)?;
    let h = tape.scale(c.log_omr, 0.5)?;
    let s = tape.add(s, h)?;
    let hq = tape.scale(q, 0.5)?;
    let s = tape.add(s, hq)?;
    let s = tape.neg(s)?;
    tape.offset(s, -LN_2PI)
}

/// Row-wise `KL(N(mu_a, Σ_a) ‖ N(mu_b, Σ_b))`, `[N]`.
pub fn kl_rows(tape: &mut Tape, mu_a: Var, cov_a: Var, mu_b: Var, cov_b: Var) -> Result<Var> {
    let a = cov_columns(tape, cov_a)?;
    let b = cov_columns(tape, cov_b)?;
    {
        let (lx, ly, lo) = (tape.value(b.lsx), tape.value(b.lsy), tape.value(b.log_omr));
        for i in 0..lx.len() {
            let det = (2.0 * (lx[i] + ly[i]) + lo[i]).exp();
            if !(det >= MIN_KL_DET) {
                return Err(Error::SingularCovariance { det });
            }
        }
    }
    let dlx = tape.sub(a.lsx, b.lsx)?;
    let dly = tape.sub(a.lsy, b.lsy)?;
    let sxr = tape.exp(dlx)?;
    let syr = tape.exp(dly)?;
    // trace term: (sxr² + syr² - 2 ρa ρb sxr syr) / (1 - ρb²)
    let t1 = tape.square(sxr)?;
    let t2 = tape.square(syr)?;
    let t3 = tape.mul(sxr, syr)?;
    let t3 = tape.mul(t3, a.rho)?;
    let t3 = tape.mul(t3, b.rho)?;
    let t3 = tape.scale(t3, -2.0)?;
    let tr = tape.add(t1, t2)?;
    let tr = tape.add(tr, t3)?;
    let inv_b = tape.neg(b.log_omr)?;
    let inv_b = tape.exp(inv_b)?;
    let tr = tape.mul(tr, inv_b)?;
    // Mahalanobis term under Σ_b
    let d = tape.sub(mu_b, mu_a)?;
    let dx = column(tape, d, 0)?;
    let dy = column(tape, d, 1)?;
    let ex = tape.neg(b.lsx)?;
    let ex = tape.exp(ex)?;
    let ey = tape.neg(b.lsy)?;
    let ey = tape.exp(ey)?;
    let zx = tape.mul(dx, ex)?;
    let zy = tape.mul(dy, ey)?;
    let maha = quad_form(tape, zx, zy, &b)?;
    // log det ratio
    let lb = tape.add(b.lsx, b.lsy)?;
    let la = tape.add(a.lsx, a.lsy)?;
    let ld = tape.sub(lb, la)?;
    let ld = tape.scale(ld, 2.0)?;
    let ld = tape.add(ld, b.log_omr)?;
    let ld = tape.sub(ld, a.log_omr)?;
    let s = tape.add(tr, maha)?;
    let s = tape.add(s, ld)?;
    let s = tape.offset(s, -2.0)?;
    tape.scale(s, 0.5)
}

/// `log softmax(logits)` over the last axis.
pub fn log_weights(tape: &mut Tape, logits: Var) -> Result<Var> {
    let lse = tape.logsumexp(logits)?;
    tape.sub(logits, lse)
}

/// Rows `k*T + t` for the given `(k, t)` pairs of a `[K*T, d]` buffer.
pub fn select_rows(tape: &mut Tape, x: Var, rows: &[usize]) -> Result<Var> {
    let d = tape.shape(x)[1];
    let idx: Arc<[usize]> = rows.iter().flat_map(|&r| (0..d).map(move |c| r * d + c)).collect();
    tape.gather(x, idx, &[rows.len(), d])
}

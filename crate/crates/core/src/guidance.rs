//! Score composition for classifier-free guidance (CFG) and noise awareness
//! guidance (NAG).
//!
//! Both guidance axes extrapolate away from a branch that drops exactly one
//! condition: CFG drops the class, classifier-free NAG drops the noise level
//! (null noise token, velocity-to-score conversion still at the trajectory
//! time). Classifier-based NAG instead adds the input gradient of a
//! Gaussian posterior around the noise estimator's prediction.
//!
//! Every score here is affine in the velocity, `s = a(t) v + b(t) x`, and the
//! mixing coefficients of CFG/NAG sum to one, so the guided velocity is the
//! same affine mix of branch velocities. The sampler uses that form because
//! it stays finite at `t = T` where `alpha_t = 0`.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::estimator::NoiseEstimator;
use crate::model::VelocityModel;
use crate::oracle::{MixtureSpec, TimePrior};
use crate::schedule::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NagMode {
    Off,
    ClassifierFree,
    ClassifierBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSpec {
    pub w_cfg: f64,
    pub w_nag: f64,
    pub nag_mode: NagMode,
    /// Posterior width for classifier-based NAG.
    pub tau: f64,
}

/// CFG weight used for CFG-only baselines.
pub const DEFAULT_W_CFG: f64 = 1.5;
/// NAG weight when NAG is used without CFG.
pub const DEFAULT_W_NAG: f64 = 3.0;
/// Weights when NAG and CFG are combined.
pub const DEFAULT_JOINT_W_CFG: f64 = 1.2;
pub const DEFAULT_JOINT_W_NAG: f64 = 2.0;
pub const DEFAULT_TAU: f64 = 0.05;

impl Default for GuidanceSpec {
    fn default() -> Self {
        GuidanceSpec::bare()
    }
}

impl GuidanceSpec {
    pub fn bare() -> Self {
        GuidanceSpec { w_cfg: 0.0, w_nag: 0.0, nag_mode: NagMode::Off, tau: DEFAULT_TAU }
    }

    pub fn cfg(w_cfg: f64) -> Self {
        GuidanceSpec { w_cfg, ..Self::bare() }
    }

    pub fn nag(w_nag: f64) -> Self {
        GuidanceSpec { w_nag, nag_mode: NagMode::ClassifierFree, ..Self::bare() }
    }

    pub fn cfg_nag(w_cfg: f64, w_nag: f64) -> Self {
        GuidanceSpec { w_cfg, w_nag, nag_mode: NagMode::ClassifierFree, ..Self::bare() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w_cfg >= 0.0 && self.w_cfg.is_finite()) || !(self.w_nag >= 0.0 && self.w_nag.is_finite()) {
            return Err(Error::Argument("guidance weights must be finite and >= 0".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Argument("tau must be positive".into()));
        }
        Ok(())
    }

    fn uses_class_branch(&self) -> bool {
        self.w_cfg != 0.0
    }

    fn uses_noise_branch(&self) -> bool {
        self.nag_mode == NagMode::ClassifierFree && self.w_nag != 0.0
    }
}

/// `(1 + w) s_cond - w s_uncond`, evaluated as `s_cond + w (s_cond - s_uncond)`
/// so that `w = 0` and `s_cond == s_uncond` both return `s_cond` exactly.
pub fn cfg_mix(s_cond: &[f64], s_uncond: &[f64], w: f64) -> Vec<f64> {
    s_cond.iter().zip(s_uncond).map(|(&c, &u)| c + w * (c - u)).collect()
}

/// `(w_nag + 1) s(x | t) - w_nag s(x)`, in the same anchored form as [`cfg_mix`].
pub fn nag_mix(s_t_cond: &[f64], s_t_uncond: &[f64], w_nag: f64) -> Vec<f64> {
    s_t_cond.iter().zip(s_t_uncond).map(|(&c, &u)| c + w_nag * (c - u)).collect()
}

/// Both corrections anchored at the fully conditioned branch:
/// `s + w_cfg (s - s_no_class) + w_nag (s - s_no_noise)`.
pub fn joint_mix(s_full: &[f64], s_no_class: &[f64], s_no_noise: &[f64], w_cfg: f64, w_nag: f64) -> Vec<f64> {
    s_full
        .iter()
        .zip(s_no_class)
        .zip(s_no_noise)
        .map(|((&f, &c), &n)| f + w_cfg * (f - c) + w_nag * (f - n))
        .collect()
}

/// Mixing rule for one guidance spec, given the three branches (absent branches unused).
fn mix(spec: &GuidanceSpec, full: &[f64], no_class: Option<&[f64]>, no_noise: Option<&[f64]>) -> Vec<f64> {
    match (no_class, no_noise) {
        (None, None) => full.to_vec(),
        (Some(c), None) => cfg_mix(full, c, spec.w_cfg),
        (None, Some(n)) => nag_mix(full, n, spec.w_nag),
        (Some(c), Some(n)) => joint_mix(full, c, n, spec.w_cfg, spec.w_nag),
    }
}

/// A velocity predictor exposing the branches guidance needs.
pub trait VelocityField: Sync {
    fn state_dim(&self) -> usize;
    fn schedule(&self) -> Schedule;
    /// Velocities for a batch at trajectory time `t`. With `t_present = false`
    /// the noise-unconditional branch is evaluated.
    fn velocity_batch(
        &self,
        x: ArrayView2<'_, f64>,
        t: f64,
        t_present: bool,
        labels: &[Option<usize>],
    ) -> Result<Array2<f64>>;

    fn score_of(&self, x: &[f64], t: f64, y: Option<usize>, t_present: bool) -> Result<Vec<f64>> {
        let xv = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|_| Error::Shape { expected: self.state_dim(), got: x.len() })?;
        let v = self.velocity_batch(xv, t, t_present, &[y])?;
        self.schedule().score_from_velocity(x, v.as_slice().expect("row"), t)
    }
}

impl VelocityField for VelocityModel {
    fn state_dim(&self) -> usize {
        self.arch.state_dim
    }

    fn schedule(&self) -> Schedule {
        self.schedule
    }

    fn velocity_batch(
        &self,
        x: ArrayView2<'_, f64>,
        t: f64,
        t_present: bool,
        labels: &[Option<usize>],
    ) -> Result<Array2<f64>> {
        self.predict_batch(x, t_present.then_some(t), labels)
    }
}

/// Exact velocities of a Gaussian mixture standing in for a trained model.
/// The noise-unconditional branch is what a perfectly trained null-token
/// network regresses to: the velocity averaged over `p(t | x)`.
#[derive(Debug, Clone)]
pub struct OracleField {
    pub mixture: MixtureSpec,
    pub schedule: Schedule,
    pub prior: TimePrior,
}

impl OracleField {
    pub fn new(mixture: MixtureSpec, schedule: Schedule) -> Self {
        OracleField { mixture, schedule, prior: TimePrior::Uniform01 }
    }
}

impl VelocityField for OracleField {
    fn state_dim(&self) -> usize {
        self.mixture.dim()
    }

    fn schedule(&self) -> Schedule {
        self.schedule
    }

    fn velocity_batch(
        &self,
        x: ArrayView2<'_, f64>,
        t: f64,
        t_present: bool,
        labels: &[Option<usize>],
    ) -> Result<Array2<f64>> {
        check_len(self.mixture.dim(), x.ncols())?;
        check_len(x.nrows(), labels.len())?;
        let mut out = Array2::zeros(x.raw_dim());
        for (i, row) in x.rows().into_iter().enumerate() {
            let xi = row.to_vec();
            let v = if t_present {
                self.mixture.oracle_velocity(&xi, t, &self.schedule, labels[i])?
            } else {
                self.mixture.noise_marginal_velocity(&xi, &self.prior, &self.schedule, labels[i])?
            };
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&v));
        }
        Ok(out)
    }
}

/// `((t - g(x)) / tau^2) grad_x g(x)`: the input gradient of
/// `-(t - g(x))^2 / (2 tau^2)`.
pub fn classifier_nag_grad(est: &NoiseEstimator, x: &[f64], t: f64, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Argument("tau must be positive".into()));
    }
    let (g, grad) = est.value_and_input_grad(x)?;
    let k = (t - g) / (tau * tau);
    Ok(grad.iter().map(|d| k * d).collect())
}

fn require_estimator<'a>(spec: &GuidanceSpec, est: Option<&'a NoiseEstimator>) -> Result<Option<&'a NoiseEstimator>> {
    match (spec.nag_mode, est) {
        (NagMode::ClassifierBased, None) => {
            Err(Error::Argument("classifier-based NAG needs a noise estimator".into()))
        }
        (NagMode::ClassifierBased, Some(e)) => Ok(Some(e)),
        _ => Ok(None),
    }
}

/// Guided score at one point.
pub fn combined_score<F: VelocityField + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    y: Option<usize>,
    spec: &GuidanceSpec,
    estimator: Option<&NoiseEstimator>,
) -> Result<Vec<f64>> {
    spec.validate()?;
    let est = require_estimator(spec, estimator)?;
    let full = field.score_of(x, t, y, true)?;
    let no_class = if spec.uses_class_branch() { Some(field.score_of(x, t, None, true)?) } else { None };
    let no_noise = if spec.uses_noise_branch() { Some(field.score_of(x, t, y, false)?) } else { None };
    let mut s = mix(spec, &full, no_class.as_deref(), no_noise.as_deref());
    if let Some(est) = est {
        let g = classifier_nag_grad(est, x, t, spec.tau)?;
        s.iter_mut().zip(&g).for_each(|(a, b)| *a += spec.w_nag * b);
    }
    Ok(s)
}

/// Guided velocity and score for a batch sharing trajectory time `t`.
pub struct GuidedBatch {
    pub velocity: Array2<f64>,
    pub score: Array2<f64>,
}

pub fn guided_batch<F: VelocityField + ?Sized>(
    field: &F,
    x: ArrayView2<'_, f64>,
    t: f64,
    labels: &[Option<usize>],
    spec: &GuidanceSpec,
    estimator: Option<&NoiseEstimator>,
) -> Result<GuidedBatch> {
    let est = require_estimator(spec, estimator)?;
    let schedule = field.schedule();
    let full = field.velocity_batch(x, t, true, labels)?;
    let no_class = if spec.uses_class_branch() {
        Some(field.velocity_batch(x, t, true, &vec![None; labels.len()])?)
    } else {
        None
    };
    let no_noise = if spec.uses_noise_branch() { Some(field.velocity_batch(x, t, false, labels)?) } else { None };

    let mut velocity = full.clone();
    for (i, mut row) in velocity.rows_mut().into_iter().enumerate() {
        let f = full.row(i).to_vec();
        let c = no_class.as_ref().map(|m| m.row(i).to_vec());
        let n = no_noise.as_ref().map(|m| m.row(i).to_vec());
        let mixed = mix(spec, &f, c.as_deref(), n.as_deref());
        row.assign(&ndarray::ArrayView1::from(&mixed));
    }

    let (a, b) = schedule.score_coefficients(t);
    let mut score = Array2::zeros(x.raw_dim());
    Zip::from(&mut score).and(&velocity).and(x).for_each(|s, &v, &xi| *s = a * v + b * xi);

    if let Some(est) = est {
        let e = schedule.eval_unchecked(t);
        // Velocity change for a score change ds is -(sigma * W / alpha) ds, singular at alpha = 0.
        let to_velocity = if e.alpha > crate::schedule::MIN_SIGMA_TIME {
            Some(-e.sigma * e.wronskian() / e.alpha)
        } else {
            None
        };
        for (i, row) in x.rows().into_iter().enumerate() {
            let g = classifier_nag_grad(est, row.as_slice().expect("contiguous row"), t, spec.tau)?;
            for (j, gj) in g.iter().enumerate() {
                score[[i, j]] += spec.w_nag * gj;
                if let Some(k) = to_velocity {
                    velocity[[i, j]] += k * spec.w_nag * gj;
                }
            }
        }
    }
    Ok(GuidedBatch { velocity, score })
}

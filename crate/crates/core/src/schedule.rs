//! Interpolant schedules `x_t = alpha_t x0 + sigma_t eps` on `t in [0, 1]`,
//! the score/velocity algebra built on them, and the noise-shift law that
//! maps an additive state error onto an equivalent later noise level.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Time horizon. Every schedule runs from data at `t = 0` to pure noise at `t = T`.
pub const T_MAX: f64 = 1.0;

/// Operations that divide by `sigma_t` refuse times below this instead of clamping.
pub const MIN_SIGMA_TIME: f64 = 1e-6;

const BISECTION_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `alpha = 1 - t`, `sigma = t`.
    Linear,
    /// `alpha = cos(pi t / 2)`, `sigma = sin(pi t / 2)`.
    TrigVp,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::TrigVp => "trig_vp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
}

/// The four schedule coefficients at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleEval {
    pub alpha: f64,
    pub sigma: f64,
    pub alpha_dot: f64,
    pub sigma_dot: f64,
}

impl ScheduleEval {
    /// `alpha sigma_dot - alpha_dot sigma`, strictly positive on `[0, T]`.
    pub fn wronskian(&self) -> f64 {
        self.alpha * self.sigma_dot - self.alpha_dot * self.sigma
    }
}

/// Noise shift implied by an additive isotropic error of standard deviation `sigma_e`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseShift {
    pub t: f64,
    pub sigma_e: f64,
    pub delta_first_order: f64,
    pub delta_exact: f64,
}

impl Schedule {
    pub const LINEAR: Schedule = Schedule { kind: ScheduleKind::Linear };
    pub const TRIG_VP: Schedule = Schedule { kind: ScheduleKind::TrigVp };

    pub fn new(kind: ScheduleKind) -> Self {
        Schedule { kind }
    }

    pub fn horizon(&self) -> f64 {
        T_MAX
    }

    fn check_time(t: f64) -> Result<()> {
        if (0.0..=T_MAX).contains(&t) {
            Ok(())
        } else {
            Err(Error::Domain { t, lo: 0.0, hi: T_MAX })
        }
    }

    fn check_positive_sigma(t: f64) -> Result<()> {
        Self::check_time(t)?;
        if t < MIN_SIGMA_TIME {
            return Err(Error::Singularity { t, what: "sigma_t = 0" });
        }
        Ok(())
    }

    /// Unchecked `sigma(t)`; callers validate the domain.
    pub fn sigma(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Linear => t,
            ScheduleKind::TrigVp => (FRAC_PI_2 * t).sin(),
        }
    }

    /// Unchecked `alpha(t)`.
    pub fn alpha(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Linear => 1.0 - t,
            ScheduleKind::TrigVp => (FRAC_PI_2 * t).cos(),
        }
    }

    pub fn eval(&self, t: f64) -> Result<ScheduleEval> {
        Self::check_time(t)?;
        Ok(self.eval_unchecked(t))
    }

    pub(crate) fn eval_unchecked(&self, t: f64) -> ScheduleEval {
        match self.kind {
            ScheduleKind::Linear => ScheduleEval {
                alpha: 1.0 - t,
                sigma: t,
                alpha_dot: -1.0,
                sigma_dot: 1.0,
            },
            ScheduleKind::TrigVp => {
                let (s, c) = (FRAC_PI_2 * t).sin_cos();
                ScheduleEval {
                    alpha: c,
                    sigma: s,
                    alpha_dot: -FRAC_PI_2 * s,
                    sigma_dot: FRAC_PI_2 * c,
                }
            }
        }
    }

    /// `alpha_t x0 + sigma_t eps`.
    pub fn forward_sample(&self, x0: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
        check_len(x0.len(), eps.len())?;
        let e = self.eval(t)?;
        Ok(x0
            .iter()
            .zip(eps)
            .map(|(&a, &b)| e.alpha * a + e.sigma * b)
            .collect())
    }

    /// Regression target of the velocity objective, `alpha_dot x0 + sigma_dot eps`.
    pub fn velocity_target(&self, x0: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
        check_len(x0.len(), eps.len())?;
        let e = self.eval(t)?;
        Ok(x0
            .iter()
            .zip(eps)
            .map(|(&a, &b)| e.alpha_dot * a + e.sigma_dot * b)
            .collect())
    }

    /// Score implied by a velocity:
    /// `s = -(alpha v - alpha_dot x) / (sigma (alpha sigma_dot - alpha_dot sigma))`.
    ///
    /// The denominator carries the opposite sign of the commonly printed
    /// form; this is the orientation under which `s` agrees with
    /// `-E[eps | x] / sigma` on analytic Gaussian data.
    pub fn score_from_velocity(&self, x: &[f64], v: &[f64], t: f64) -> Result<Vec<f64>> {
        check_len(x.len(), v.len())?;
        Self::check_positive_sigma(t)?;
        let (a, b) = self.score_coefficients(t);
        Ok(x.iter().zip(v).map(|(&xi, &vi)| a * vi + b * xi).collect())
    }

    /// Coefficients `(a, b)` with `score = a v + b x`. Requires `sigma_t > 0`.
    pub(crate) fn score_coefficients(&self, t: f64) -> (f64, f64) {
        let e = self.eval_unchecked(t);
        let denom = e.sigma * e.wronskian();
        (-e.alpha / denom, e.alpha_dot / denom)
    }

    /// Inverse of [`Schedule::score_from_velocity`]; singular where `alpha_t = 0`.
    pub fn velocity_from_score(&self, x: &[f64], s: &[f64], t: f64) -> Result<Vec<f64>> {
        check_len(x.len(), s.len())?;
        Self::check_positive_sigma(t)?;
        let e = self.eval_unchecked(t);
        if e.alpha < MIN_SIGMA_TIME {
            return Err(Error::Singularity { t, what: "alpha_t = 0" });
        }
        let w = e.sigma * e.wronskian();
        Ok(x.iter()
            .zip(s)
            .map(|(&xi, &si)| (e.alpha_dot * xi - w * si) / e.alpha)
            .collect())
    }

    /// `-eps_hat / sigma_t`.
    pub fn score_from_eps(&self, eps_hat: &[f64], t: f64) -> Result<Vec<f64>> {
        Self::check_positive_sigma(t)?;
        let sigma = self.sigma(t);
        Ok(eps_hat.iter().map(|&e| -e / sigma).collect())
    }

    /// Linearized shift `(sqrt(sigma_t^2 + sigma_e^2) - sigma_t) / sigma_dot_t`.
    pub fn shift_first_order(&self, t: f64, sigma_e: f64) -> Result<f64> {
        if sigma_e < 0.0 || !sigma_e.is_finite() {
            return Err(Error::Argument(format!("sigma_e must be >= 0, got {sigma_e}")));
        }
        let e = self.eval(t)?;
        if e.sigma_dot <= 1e-12 {
            return Err(Error::Singularity { t, what: "sigma_dot_t = 0" });
        }
        Ok((e.sigma.hypot(sigma_e) - e.sigma) / e.sigma_dot)
    }

    /// Exact shift `delta = t' - t` with `sigma(t')^2 = sigma_t^2 + sigma_e^2`,
    /// found by bisection on `[t, T]`.
    pub fn shift_exact(&self, t: f64, sigma_e: f64) -> Result<f64> {
        if sigma_e < 0.0 || !sigma_e.is_finite() {
            return Err(Error::Argument(format!("sigma_e must be >= 0, got {sigma_e}")));
        }
        Self::check_time(t)?;
        if sigma_e == 0.0 {
            return Ok(0.0);
        }
        let target = self.sigma(t).powi(2) + sigma_e * sigma_e;
        let top = self.sigma(T_MAX).powi(2);
        if target > top {
            return Err(Error::OutOfRange(format!(
                "sigma_t^2 + sigma_e^2 = {target} exceeds sigma_T^2 = {top}"
            )));
        }
        let (mut lo, mut hi) = (t, T_MAX);
        while hi - lo > BISECTION_TOL {
            let mid = 0.5 * (lo + hi);
            if self.sigma(mid).powi(2) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi) - t)
    }

    pub fn noise_shift(&self, t: f64, sigma_e: f64) -> Result<NoiseShift> {
        Ok(NoiseShift {
            t,
            sigma_e,
            delta_first_order: self.shift_first_order(t, sigma_e)?,
            delta_exact: self.shift_exact(t, sigma_e)?,
        })
    }
}

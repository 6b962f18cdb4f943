//! Closed-form ground truth for diagonal Gaussian-mixture data.
//!
//! Under `x_t = alpha_t x0 + sigma_t eps` every mixture component stays
//! Gaussian, so marginals, scores, posterior means and velocities are all
//! available exactly. Responsibilities are computed in log space: near
//! `t = 0` with narrow components the density ratios span hundreds of
//! orders of magnitude.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::schedule::{Schedule, T_MAX};

/// Default Gauss-Legendre order for integrals over the noise level.
pub const DEFAULT_QUADRATURE_NODES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    #[serde(default)]
    pub name: String,
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Diagonal of the covariance.
    pub var: Vec<f64>,
    #[serde(default)]
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub components: Vec<MixtureComponent>,
}

/// Prior over the noise level, used when marginalizing `t` out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimePrior {
    /// Uniform on `[0, 1]`, the sampling law of `t` during training.
    Uniform01,
    /// Finite support `(t, weight)`.
    DiscreteGrid { grid: Vec<(f64, f64)> },
}

impl Default for TimePrior {
    fn default() -> Self {
        TimePrior::Uniform01
    }
}

impl TimePrior {
    pub fn point_mass(t: f64) -> Self {
        TimePrior::DiscreteGrid { grid: vec![(t, 1.0)] }
    }

    /// Quadrature nodes and weights representing the prior.
    pub fn nodes(&self, order: usize) -> Result<Vec<(f64, f64)>> {
        match self {
            TimePrior::Uniform01 => {
                if order == 0 {
                    return Err(Error::Argument("quadrature order must be positive".into()));
                }
                let (x, w) = gauss_legendre(order);
                Ok(x.iter()
                    .zip(&w)
                    .map(|(&xi, &wi)| (0.5 * (xi + 1.0) * T_MAX, 0.5 * wi))
                    .collect())
            }
            TimePrior::DiscreteGrid { grid } => {
                if grid.is_empty() {
                    return Err(Error::Argument("time prior has empty support".into()));
                }
                let total: f64 = grid.iter().map(|p| p.1).sum();
                if grid.iter().any(|&(t, w)| !(0.0..=T_MAX).contains(&t) || w < 0.0)
                    || (total - 1.0).abs() > 1e-9
                {
                    return Err(Error::Argument(
                        "time prior needs points in [0, T] with non-negative weights summing to 1"
                            .into(),
                    ));
                }
                Ok(grid.iter().copied().filter(|p| p.1 > 0.0).collect())
            }
        }
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]` via Newton iteration on `P_n`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = nf * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|&a| (a - m).exp()).sum::<f64>().ln()
}

/// Normalized weights from log-weights.
fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|&a| (a - lse).exp()).collect()
}

/// Per-component quantities at one `(x, t)`.
struct ComponentTerms {
    /// `log w_k + log N(x; alpha mu_k, alpha^2 var_k + sigma^2)`
    log_joint: Vec<f64>,
    /// Per-component marginal variance, flattened `k * dim + j`.
    var_t: Vec<f64>,
}

impl MixtureSpec {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        let m = MixtureSpec { components };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .components
            .first()
            .ok_or_else(|| Error::Argument("mixture has no components".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::Argument("mixture dimension must be positive".into()));
        }
        let mut total = 0.0;
        for (k, c) in self.components.iter().enumerate() {
            check_len(dim, c.mean.len())?;
            check_len(dim, c.var.len())?;
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::Argument(format!("component {k}: weight must be positive")));
            }
            if c.var.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::Argument(format!("component {k}: variances must be positive")));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::Argument(format!("component {k}: non-finite mean")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Argument(format!("weights sum to {total}, expected 1")));
        }
        let n = self.num_classes();
        for y in 0..n {
            if !self.components.iter().any(|c| c.label == y) {
                return Err(Error::Argument(format!(
                    "class labels must cover 0..{n} contiguously; {y} is missing"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn num_classes(&self) -> usize {
        self.components.iter().map(|c| c.label).max().map_or(0, |m| m + 1)
    }

    /// Total probability of each class label.
    pub fn class_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.num_classes()];
        for c in &self.components {
            w[c.label] += c.weight;
        }
        w
    }

    /// Pushforward of the mixture through the forward process at time `t`.
    pub fn marginal_at(&self, t: f64, schedule: &Schedule) -> Result<MixtureSpec> {
        let e = schedule.eval(t)?;
        let components = self
            .components
            .iter()
            .map(|c| MixtureComponent {
                name: c.name.clone(),
                weight: c.weight,
                mean: c.mean.iter().map(|m| e.alpha * m).collect(),
                var: c
                    .var
                    .iter()
                    .map(|v| e.alpha * e.alpha * v + e.sigma * e.sigma)
                    .collect(),
                label: c.label,
            })
            .collect();
        Ok(MixtureSpec { components })
    }

    fn check_filter(&self, class_filter: Option<usize>) -> Result<()> {
        if let Some(y) = class_filter {
            if !self.components.iter().any(|c| c.label == y) {
                return Err(Error::Argument(format!("no component carries class label {y}")));
            }
        }
        Ok(())
    }

    fn terms(&self, x: &[f64], t: f64, schedule: &Schedule, class_filter: Option<usize>) -> Result<ComponentTerms> {
        check_len(self.dim(), x.len())?;
        self.check_filter(class_filter)?;
        let e = schedule.eval(t)?;
        let dim = self.dim();
        let mut log_joint = Vec::with_capacity(self.components.len());
        let mut var_t = Vec::with_capacity(self.components.len() * dim);
        for c in &self.components {
            if class_filter.is_some_and(|y| y != c.label) {
                log_joint.push(f64::NEG_INFINITY);
                var_t.extend(std::iter::repeat_n(1.0, dim));
                continue;
            }
            let mut lp = c.weight.ln();
            for j in 0..dim {
                let v = e.alpha * e.alpha * c.var[j] + e.sigma * e.sigma;
                let d = x[j] - e.alpha * c.mean[j];
                lp -= 0.5 * ((2.0 * PI * v).ln() + d * d / v);
                var_t.push(v);
            }
            log_joint.push(lp);
        }
        Ok(ComponentTerms { log_joint, var_t })
    }

    /// `log p_t(x)`, or `log p_t(x | y)` when `class_filter` is set.
    pub fn log_density(&self, x: &[f64], t: f64, schedule: &Schedule, class_filter: Option<usize>) -> Result<f64> {
        let terms = self.terms(x, t, schedule, class_filter)?;
        let lse = log_sum_exp(&terms.log_joint);
        match class_filter {
            None => Ok(lse),
            Some(y) => Ok(lse - self.class_weights()[y].ln()),
        }
    }

    /// `log p_t(y | x)`.
    pub fn log_class_posterior(&self, x: &[f64], t: f64, schedule: &Schedule, y: usize) -> Result<f64> {
        let all = self.terms(x, t, schedule, None)?;
        let cls = self.terms(x, t, schedule, Some(y))?;
        Ok(log_sum_exp(&cls.log_joint) - log_sum_exp(&all.log_joint))
    }

    /// `grad_x log p_t(x)` (restricted to one class when `class_filter` is set).
    pub fn oracle_score(&self, x: &[f64], t: f64, schedule: &Schedule, class_filter: Option<usize>) -> Result<Vec<f64>> {
        let terms = self.terms(x, t, schedule, class_filter)?;
        let e = schedule.eval_unchecked(t);
        let resp = softmax(&terms.log_joint);
        let dim = self.dim();
        let mut s = vec![0.0; dim];
        for (k, c) in self.components.iter().enumerate() {
            if resp[k] == 0.0 {
                continue;
            }
            for j in 0..dim {
                s[j] -= resp[k] * (x[j] - e.alpha * c.mean[j]) / terms.var_t[k * dim + j];
            }
        }
        Ok(s)
    }

    /// `(E[x0 | x_t = x], E[eps | x_t = x])`.
    pub fn posterior_means(
        &self,
        x: &[f64],
        t: f64,
        schedule: &Schedule,
        class_filter: Option<usize>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let terms = self.terms(x, t, schedule, class_filter)?;
        let e = schedule.eval_unchecked(t);
        let resp = softmax(&terms.log_joint);
        let dim = self.dim();
        let mut mx0 = vec![0.0; dim];
        let mut meps = vec![0.0; dim];
        for (k, c) in self.components.iter().enumerate() {
            if resp[k] == 0.0 {
                continue;
            }
            for j in 0..dim {
                let v = terms.var_t[k * dim + j];
                let r = x[j] - e.alpha * c.mean[j];
                mx0[j] += resp[k] * (c.mean[j] + e.alpha * c.var[j] / v * r);
                meps[j] += resp[k] * (e.sigma / v * r);
            }
        }
        Ok((mx0, meps))
    }

    /// `alpha_dot E[x0 | x] + sigma_dot E[eps | x]`.
    pub fn oracle_velocity(&self, x: &[f64], t: f64, schedule: &Schedule, class_filter: Option<usize>) -> Result<Vec<f64>> {
        let (mx0, meps) = self.posterior_means(x, t, schedule, class_filter)?;
        let e = schedule.eval_unchecked(t);
        Ok(mx0
            .iter()
            .zip(&meps)
            .map(|(&a, &b)| e.alpha_dot * a + e.sigma_dot * b)
            .collect())
    }

    /// Per-node log weights `log p(t_j) + log p_{t_j}(x)` for the noise-level marginal.
    fn marginal_log_weights(
        &self,
        x: &[f64],
        nodes: &[(f64, f64)],
        schedule: &Schedule,
        class_filter: Option<usize>,
    ) -> Result<Vec<f64>> {
        nodes
            .iter()
            .map(|&(t, w)| Ok(w.ln() + self.log_density(x, t, schedule, class_filter)?))
            .collect()
    }

    /// `grad_x log integral p_t(x) p(t) dt` with the default quadrature order.
    pub fn noise_marginal_score(
        &self,
        x: &[f64],
        prior: &TimePrior,
        schedule: &Schedule,
        class_filter: Option<usize>,
    ) -> Result<Vec<f64>> {
        self.noise_marginal_score_with(x, prior, schedule, class_filter, DEFAULT_QUADRATURE_NODES)
    }

    pub fn noise_marginal_score_with(
        &self,
        x: &[f64],
        prior: &TimePrior,
        schedule: &Schedule,
        class_filter: Option<usize>,
        order: usize,
    ) -> Result<Vec<f64>> {
        let nodes = prior.nodes(order)?;
        let post = softmax(&self.marginal_log_weights(x, &nodes, schedule, class_filter)?);
        let mut s = vec![0.0; x.len()];
        for (&(t, _), &p) in nodes.iter().zip(&post) {
            if p == 0.0 {
                continue;
            }
            let st = self.oracle_score(x, t, schedule, class_filter)?;
            for (a, b) in s.iter_mut().zip(&st) {
                *a += p * b;
            }
        }
        Ok(s)
    }

    /// What a perfectly trained noise-unconditional branch regresses to:
    /// `E_{t | x}[v(x, t)]` with `t` drawn from `prior`.
    pub fn noise_marginal_velocity(
        &self,
        x: &[f64],
        prior: &TimePrior,
        schedule: &Schedule,
        class_filter: Option<usize>,
    ) -> Result<Vec<f64>> {
        let nodes = prior.nodes(DEFAULT_QUADRATURE_NODES)?;
        let post = softmax(&self.marginal_log_weights(x, &nodes, schedule, class_filter)?);
        let mut v = vec![0.0; x.len()];
        for (&(t, _), &p) in nodes.iter().zip(&post) {
            if p == 0.0 {
                continue;
            }
            let vt = self.oracle_velocity(x, t, schedule, class_filter)?;
            for (a, b) in v.iter_mut().zip(&vt) {
                *a += p * b;
            }
        }
        Ok(v)
    }

    /// `E[t | x]` under `prior`: the Bayes-optimal squared-loss noise-level regressor.
    pub fn posterior_mean_time(&self, x: &[f64], prior: &TimePrior, schedule: &Schedule, order: usize) -> Result<f64> {
        let nodes = prior.nodes(order)?;
        let post = softmax(&self.marginal_log_weights(x, &nodes, schedule, None)?);
        Ok(nodes.iter().zip(&post).map(|(n, p)| n.0 * p).sum())
    }

    /// Draws `n` i.i.d. points and their class labels.
    pub fn sample_data(&self, n: usize, seed: u64) -> Result<(Array2<f64>, Vec<usize>)> {
        if n == 0 {
            return Err(Error::Argument("sample count must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self.sample_with(&mut rng, n))
    }

    pub(crate) fn sample_with<R: Rng>(&self, rng: &mut R, n: usize) -> (Array2<f64>, Vec<usize>) {
        let dim = self.dim();
        let mut x = Array2::zeros((n, dim));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = self.pick_component(rng.random::<f64>());
            for j in 0..dim {
                let z: f64 = rng.sample(StandardNormal);
                x[[i, j]] = c.mean[j] + c.var[j].sqrt() * z;
            }
            labels.push(c.label);
        }
        (x, labels)
    }

    fn pick_component(&self, u: f64) -> &MixtureComponent {
        let mut acc = 0.0;
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                return c;
            }
        }
        self.components.last().expect("validated mixture is nonempty")
    }

    /// Projection of the mixture onto a unit direction: a 1-D mixture `(weight, mean, var)`.
    pub fn project(&self, dir: &[f64]) -> Vec<(f64, f64, f64)> {
        self.components
            .iter()
            .map(|c| {
                let m = c.mean.iter().zip(dir).map(|(a, b)| a * b).sum();
                let v = c.var.iter().zip(dir).map(|(a, b)| a * b * b).sum();
                (c.weight, m, v)
            })
            .collect()
    }
}

/// Named datasets, all realized as Gaussian mixtures so the oracle applies.
pub mod presets {
    use super::{MixtureComponent, MixtureSpec};

    fn comp(name: String, weight: f64, mean: [f64; 2], var: f64, label: usize) -> MixtureComponent {
        MixtureComponent { name, weight, mean: mean.to_vec(), var: vec![var, var], label }
    }

    /// `N(0, I)` in `dim` dimensions.
    pub fn standard_normal(dim: usize) -> MixtureSpec {
        isotropic(dim, 1.0)
    }

    pub fn isotropic(dim: usize, var: f64) -> MixtureSpec {
        MixtureSpec {
            components: vec![MixtureComponent {
                name: "blob".into(),
                weight: 1.0,
                mean: vec![0.0; dim],
                var: vec![var; dim],
                label: 0,
            }],
        }
    }

    /// 3x3 grid of narrow Gaussians, spacing 1.2; class = row.
    pub fn grid_mixture() -> MixtureSpec {
        let mut components = Vec::new();
        for (row, y) in [-1.2, 0.0, 1.2].into_iter().enumerate() {
            for (col, x) in [-1.2, 0.0, 1.2].into_iter().enumerate() {
                components.push(comp(format!("g{row}{col}"), 1.0 / 9.0, [x, y], 0.01, row));
            }
        }
        MixtureSpec { components }
    }

    /// 4x4 checkerboard on `[-2, 2]^2`; each dark cell is four Gaussians.
    /// Class 0 is the left half, class 1 the right half.
    pub fn checkerboard() -> MixtureSpec {
        let mut components = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                if (i + j) % 2 != 0 {
                    continue;
                }
                let (x0, y0) = (-2.0 + i as f64, -2.0 + j as f64);
                for (dx, dy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                    components.push(comp(
                        format!("c{i}{j}"),
                        1.0 / 32.0,
                        [x0 + dx, y0 + dy],
                        0.02,
                        usize::from(i >= 2),
                    ));
                }
            }
        }
        MixtureSpec { components }
    }

    /// Two interleaved half circles of radius 1, eight Gaussians each; class = moon.
    pub fn two_moons() -> MixtureSpec {
        let mut components = Vec::new();
        let per = 8;
        for k in 0..per {
            let a = std::f64::consts::PI * k as f64 / (per - 1) as f64;
            components.push(comp(format!("upper{k}"), 1.0 / 16.0, [a.cos() - 0.5, a.sin() - 0.25], 0.01, 0));
            components.push(comp(format!("lower{k}"), 1.0 / 16.0, [0.5 - a.cos(), 0.25 - a.sin()], 0.01, 1));
        }
        MixtureSpec { components }
    }
}

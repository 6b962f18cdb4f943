//! Noise-level regressor `g(x) ~ E[t | x]`, shift measurement along sampling
//! trajectories, and kernel density reports.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{check_len, Error, Result};
use crate::model::DEFAULT_HIDDEN;
use crate::net::{Activation, AdamWConfig, DenseNet, OptimState};
use crate::oracle::MixtureSpec;
use crate::sampler::{Trajectory, TrajectoryMeta};
use crate::schedule::{Schedule, ScheduleKind, T_MAX};

pub const ESTIMATOR_KIND: &str = "noise_estimator";
/// Loss above which training is declared divergent.
const DIVERGENCE_LOSS: f64 = 1e6;
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub optimizer: AdamWConfig,
    /// Number of trailing steps averaged into the reported final loss.
    pub loss_window: usize,
    pub seed: u64,
}

impl Default for EstimatorTrainConfig {
    fn default() -> Self {
        EstimatorTrainConfig {
            steps: 20_000,
            batch_size: 256,
            hidden: DEFAULT_HIDDEN.to_vec(),
            optimizer: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
            loss_window: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMeta {
    pub kind: String,
    pub dims: Vec<usize>,
    pub schedule: ScheduleKind,
    pub dataset: String,
    pub steps: usize,
    pub final_loss: f64,
    pub config_hash: String,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEstimator {
    pub net: DenseNet,
    pub meta: EstimatorMeta,
}

impl NoiseEstimator {
    pub fn state_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// `(clamped to [0, T], raw)`.
    pub fn estimate_t(&self, x: &[f64]) -> Result<(f64, f64)> {
        let raw = self.net.apply(x)?[0];
        Ok((raw.clamp(0.0, T_MAX), raw))
    }

    /// Raw predictions for each row.
    pub fn predict_batch(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        check_len(self.state_dim(), x.ncols())?;
        let chunks: Vec<Result<Array2<f64>>> = x
            .axis_chunks_iter(Axis(0), EVAL_CHUNK)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|c| self.net.forward(c))
            .collect();
        let mut out = Vec::with_capacity(x.nrows());
        for c in chunks {
            out.extend(c?.iter().copied());
        }
        Ok(out)
    }

    /// Raw prediction and its input gradient.
    pub fn value_and_input_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let g = self.net.apply(x)?[0];
        let (_, dx) = self.net.grad(x, &[1.0])?;
        Ok((g, dx))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        container::encode(&self.meta, self.net.params())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, params): (EstimatorMeta, Vec<f64>) = container::decode(bytes)?;
        Self::from_parts(meta, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.meta, self.net.params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params): (EstimatorMeta, Vec<f64>) = container::read_file(path)?;
        Self::from_parts(meta, params)
    }

    fn from_parts(meta: EstimatorMeta, params: Vec<f64>) -> Result<Self> {
        if meta.kind != ESTIMATOR_KIND {
            return Err(Error::Format(format!("expected {ESTIMATOR_KIND}, found {}", meta.kind)));
        }
        let net = DenseNet::from_params(&meta.dims, Activation::Silu, params)?;
        if net.output_dim() != 1 {
            return Err(Error::Format("estimator output must be scalar".into()));
        }
        Ok(NoiseEstimator { net, meta })
    }
}

/// Regress `t` from `x_t = alpha_t x0 + sigma_t eps` with `t ~ U(0, T)`.
pub fn train_estimator(
    data: &MixtureSpec,
    schedule: Schedule,
    cfg: &EstimatorTrainConfig,
    dataset: &str,
) -> Result<NoiseEstimator> {
    data.validate()?;
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::Argument("steps and batch_size must be positive".into()));
    }
    let d = data.dim();
    let mut dims = vec![d];
    dims.extend(&cfg.hidden);
    dims.push(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = DenseNet::init(&dims, Activation::Silu, &mut rng)?;
    let mut opt = OptimState::new(cfg.optimizer, net.num_params());
    let window = cfg.loss_window.clamp(1, cfg.steps);
    let mut recent = std::collections::VecDeque::with_capacity(window);

    let b = cfg.batch_size;
    let mut input = Array2::zeros((b, d));
    let mut target = Array2::zeros((b, 1));
    for step in 0..cfg.steps {
        let (x0, _) = data.sample_with(&mut rng, b);
        for i in 0..b {
            let t: f64 = rng.random::<f64>() * T_MAX;
            let e = schedule.eval_unchecked(t);
            for j in 0..d {
                let eps: f64 = rng.sample(StandardNormal);
                input[[i, j]] = e.alpha * x0[[i, j]] + e.sigma * eps;
            }
            target[[i, 0]] = t;
        }
        let (out, cache) = net.forward_cached(input.view())?;
        let resid = out - &target;
        let loss = resid.iter().map(|r| r * r).sum::<f64>() / b as f64;
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::NonFinite(format!("estimator loss {loss} diverged at step {}", step + 1)));
        }
        let (grads, _) = net.backward(&cache, (resid * (2.0 / b as f64)).view())?;
        opt.step(net.params_mut(), &grads)?;
        if recent.len() == window {
            recent.pop_front();
        }
        recent.push_back(loss);
    }
    let final_loss = recent.iter().sum::<f64>() / recent.len() as f64;
    Ok(NoiseEstimator {
        net,
        meta: EstimatorMeta {
            kind: ESTIMATOR_KIND.into(),
            dims,
            schedule: schedule.kind,
            dataset: dataset.into(),
            steps: cfg.steps,
            final_loss,
            config_hash: String::new(),
            tool_version: String::new(),
        },
    })
}

/// Shared draws for forward-process batches: the same `x0` and `eps` are
/// reused at every time, so curves over `t` are smooth.
#[derive(Debug, Clone)]
pub struct ForwardDraws {
    pub x0: Array2<f64>,
    pub eps: Array2<f64>,
}

impl ForwardDraws {
    pub fn new(data: &MixtureSpec, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Argument("forward batch must be nonempty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x0, _) = data.sample_with(&mut rng, n);
        let eps = Array2::from_shape_simple_fn(x0.raw_dim(), || rng.sample(StandardNormal));
        Ok(ForwardDraws { x0, eps })
    }

    pub fn len(&self) -> usize {
        self.x0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.nrows() == 0
    }

    /// `alpha_t x0 + sigma_t eps`.
    pub fn states(&self, schedule: &Schedule, t: f64) -> Result<Array2<f64>> {
        let e = schedule.eval(t)?;
        Ok(&self.x0 * e.alpha + &self.eps * e.sigma)
    }

    /// Forward states with an additional `N(0, sigma_e^2 I)` error.
    pub fn states_with_error(&self, schedule: &Schedule, t: f64, sigma_e: f64, seed: u64) -> Result<Array2<f64>> {
        let mut x = self.states(schedule, t)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        x.mapv_inplace(|v| v + sigma_e * rng.sample::<f64, _>(StandardNormal));
        Ok(x)
    }

    /// Forward trajectories on `times`, optionally with a fresh injected error per time.
    pub fn trajectories(&self, schedule: &Schedule, times: &[f64], sigma_e: f64, seed: u64) -> Result<Vec<Trajectory>> {
        let n = self.len();
        let d = self.x0.ncols();
        let mut trajs: Vec<Trajectory> = (0..n)
            .map(|i| Trajectory {
                times: times.to_vec(),
                states: Array2::zeros((times.len(), d)),
                meta: TrajectoryMeta {
                    guidance: Default::default(),
                    seed,
                    model_id: "forward".into(),
                    index: i,
                    label: None,
                },
            })
            .collect();
        for (k, &t) in times.iter().enumerate() {
            let x = if sigma_e > 0.0 {
                self.states_with_error(schedule, t, sigma_e, seed.wrapping_add(k as u64))?
            } else {
                self.states(schedule, t)?
            };
            for (i, tr) in trajs.iter_mut().enumerate() {
                tr.states.row_mut(k).assign(&x.row(i));
            }
        }
        Ok(trajs)
    }
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRecord {
    pub t: f64,
    pub mean_t_hat_sampled: f64,
    pub mean_t_hat_forward: f64,
    pub delta_raw: f64,
    pub delta_normalized: f64,
    pub se_sampled: f64,
    pub se_forward: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub prior_t: f64,
    pub arm: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub records: Vec<ShiftRecord>,
    pub n_trajectories: usize,
    pub n_ref: usize,
    pub kde: Vec<KdeCurve>,
}

impl ShiftReport {
    pub fn to_csv(&self, header: &[String]) -> String {
        let mut s = comment_block(header);
        s.push_str("t,mean_t_hat_sampled,mean_t_hat_forward,delta_raw,delta_normalized,n\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.t, r.mean_t_hat_sampled, r.mean_t_hat_forward, r.delta_raw, r.delta_normalized, r.n
            );
        }
        s
    }

    pub fn kde_csv(&self, header: &[String]) -> String {
        let mut s = comment_block(header);
        s.push_str("t_hat,density,prior_t,arm\n");
        for c in &self.kde {
            for (x, y) in &c.points {
                let _ = writeln!(s, "{x},{y},{},{}", c.prior_t, c.arm);
            }
        }
        s
    }

    /// Mean of `delta_normalized` over records with `t` in `[lo, hi]`.
    pub fn mean_normalized_delta(&self, lo: f64, hi: f64) -> Option<f64> {
        let v: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.t >= lo && r.t <= hi)
            .map(|r| r.delta_normalized)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub(crate) fn comment_block(header: &[String]) -> String {
    header.iter().map(|h| format!("# {h}\n")).collect()
}

/// Options for [`measure_shift`].
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftOptions {
    pub n_ref: usize,
    pub seed: u64,
    /// Grid times at which KDE curves of both arms are emitted.
    pub kde_times: Vec<f64>,
    pub kde_grid: Vec<f64>,
}

impl Default for ShiftOptions {
    fn default() -> Self {
        ShiftOptions {
            n_ref: 5000,
            seed: 0,
            kde_times: Vec::new(),
            kde_grid: (0..=300).map(|i| -0.25 + 1.5 * i as f64 / 300.0).collect(),
        }
    }
}

/// Mean `t_hat` of sampled states against a fresh forward reference at each grid time.
pub fn measure_shift(
    trajs: &[Trajectory],
    est: &NoiseEstimator,
    forward_ref: &MixtureSpec,
    schedule: &Schedule,
    opts: &ShiftOptions,
) -> Result<ShiftReport> {
    let first = trajs.first().ok_or_else(|| Error::Argument("no trajectories to measure".into()))?;
    if trajs.iter().any(|t| t.times != first.times) {
        return Err(Error::Argument("trajectories do not share a time grid".into()));
    }
    check_len(est.state_dim(), first.dim())?;
    check_len(forward_ref.dim(), first.dim())?;
    let draws = ForwardDraws::new(forward_ref, opts.n_ref, opts.seed)?;
    let mut report = ShiftReport { records: Vec::new(), n_trajectories: trajs.len(), n_ref: opts.n_ref, kde: Vec::new() };
    let mut sampled = Array2::zeros((trajs.len(), first.dim()));
    for (k, &t) in first.times.iter().enumerate() {
        for (i, tr) in trajs.iter().enumerate() {
            sampled.row_mut(i).assign(&tr.states.row(k));
        }
        let hat_s = est.predict_batch(sampled.view())?;
        let hat_f = est.predict_batch(draws.states(schedule, t)?.view())?;
        let (ms, ses) = mean_se(&hat_s);
        let (mf, sef) = mean_se(&hat_f);
        let delta_raw = ms - t;
        let delta_normalized = ms - mf;
        debug_assert!((delta_normalized - (delta_raw - (mf - t))).abs() <= 1e-12 * (1.0 + ms.abs() + mf.abs()));
        report.records.push(ShiftRecord {
            t,
            mean_t_hat_sampled: ms,
            mean_t_hat_forward: mf,
            delta_raw,
            delta_normalized,
            se_sampled: ses,
            se_forward: sef,
            n: trajs.len(),
        });
        if opts.kde_times.iter().any(|&kt| (kt - t).abs() < 1e-9) {
            for (arm, v) in [("sampled", &hat_s), ("forward", &hat_f)] {
                let clamped: Vec<f64> = v.iter().map(|x| x.clamp(0.0, T_MAX)).collect();
                report.kde.push(KdeCurve { prior_t: t, arm: arm.into(), points: kde(&clamped, &opts.kde_grid, None)? });
            }
        }
    }
    Ok(report)
}

/// Mean forward-arm `t_hat` at time `t` for shared draws.
pub fn forward_mean(est: &NoiseEstimator, draws: &ForwardDraws, schedule: &Schedule, t: f64) -> Result<f64> {
    Ok(mean_se(&est.predict_batch(draws.states(schedule, t)?.view())?).0)
}

/// The time whose forward-arm mean `t_hat` equals `target`, by bisection on
/// `[0, T]`. Reads a measured mean `t_hat` back on the time axis, removing the
/// estimator's regression toward the prior mean. Clamps at the ends when
/// `target` is out of the curve's range.
pub fn calibrated_time(
    est: &NoiseEstimator,
    draws: &ForwardDraws,
    schedule: &Schedule,
    target: f64,
    tol: f64,
) -> Result<f64> {
    let (mut lo, mut hi) = (0.0, T_MAX);
    let (f_lo, f_hi) = (forward_mean(est, draws, schedule, lo)?, forward_mean(est, draws, schedule, hi)?);
    if f_lo >= f_hi {
        return Err(Error::Argument("forward calibration curve is not increasing".into()));
    }
    if target <= f_lo {
        return Ok(lo);
    }
    if target >= f_hi {
        return Ok(hi);
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if forward_mean(est, draws, schedule, mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Silverman bandwidth `1.06 std n^(-1/5)`.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let m = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    1.06 * var.sqrt() * n.powf(-0.2)
}

/// Trapezoidal integral of `(x, y)` pairs.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1)).sum()
}

/// Gaussian-kernel density on `grid`, rescaled to unit trapezoidal mass.
pub fn kde(samples: &[f64], grid: &[f64], bandwidth: Option<f64>) -> Result<Vec<(f64, f64)>> {
    if samples.is_empty() {
        return Err(Error::Argument("kde needs at least one sample".into()));
    }
    if grid.len() < 2 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Argument("kde grid must be strictly increasing with >= 2 points".into()));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::Argument(format!("bandwidth {h} must be positive"))),
        None => {
            let h = silverman_bandwidth(samples);
            if !(h > 0.0) {
                return Err(Error::Argument("zero-variance samples need an explicit bandwidth".into()));
            }
            h
        }
    };
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let mut pts: Vec<(f64, f64)> = grid
        .par_iter()
        .map(|&g| {
            let s: f64 = samples.iter().map(|&x| (-0.5 * ((g - x) / h).powi(2)).exp()).sum();
            (g, s * norm)
        })
        .collect();
    let mass = trapezoid(&pts);
    if !(mass > 0.0) {
        return Err(Error::Argument("kde grid carries no mass".into()));
    }
    pts.iter_mut().for_each(|p| p.1 /= mass);
    Ok(pts)
}

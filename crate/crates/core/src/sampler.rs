//! Reverse-time Euler ODE and Euler-Maruyama SDE integrators.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{check_len, Error, Result};
use crate::estimator::NoiseEstimator;
use crate::guidance::{guided_batch, GuidanceSpec, VelocityField};
use crate::schedule::T_MAX;

/// Trajectories integrated together in one batched network call. Fixed so
/// that the result does not depend on the thread count.
pub const BLOCK: usize = 64;
pub const DEFAULT_STEPS: usize = 250;
pub const DEFAULT_LAST_STEP: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    EulerOde,
    EulerMaruyamaSde,
}

/// Diffusion coefficient rule for the SDE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionRule {
    /// `w_t = sigma_t`.
    SigmaT,
    /// `w_t = 0`; reduces the SDE to the ODE.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    pub last_step_size: f64,
    pub w_choice: DiffusionRule,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            kind: SamplerKind::EulerMaruyamaSde,
            steps: DEFAULT_STEPS,
            last_step_size: DEFAULT_LAST_STEP,
            w_choice: DiffusionRule::SigmaT,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::Argument(format!("steps must be >= 2, got {}", self.steps)));
        }
        if !(self.last_step_size > 0.0 && self.last_step_size < T_MAX) {
            return Err(Error::Argument(format!(
                "last_step_size must lie in (0, {T_MAX}), got {}",
                self.last_step_size
            )));
        }
        Ok(())
    }
}

/// `steps - 1` uniform intervals from `T` down to `last_step_size`, then one
/// final interval to 0. Returns `steps + 1` strictly decreasing times.
pub fn time_grid(cfg: &SamplerConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let m = cfg.steps - 1;
    let h = (T_MAX - cfg.last_step_size) / m as f64;
    let mut grid: Vec<f64> = (0..m).map(|i| T_MAX - i as f64 * h).collect();
    grid.push(cfg.last_step_size);
    grid.push(0.0);
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub guidance: GuidanceSpec,
    pub seed: u64,
    pub model_id: String,
    pub index: usize,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// One row per entry of `times`.
    pub states: Array2<f64>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn final_state(&self) -> Vec<f64> {
        self.states.row(self.states.nrows() - 1).to_vec()
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }
}

/// Sampling stopped on a non-finite state. `partial` holds every trajectory
/// up to and including the offending step.
#[derive(Debug, thiserror::Error)]
#[error("sampling aborted at step {step} (t = {t}): {source}")]
pub struct SampleAbort {
    pub step: usize,
    pub t: f64,
    pub source: Error,
    pub partial: Vec<Trajectory>,
}

impl From<SampleAbort> for Error {
    fn from(a: SampleAbort) -> Self {
        Error::NonFinite(a.to_string())
    }
}

/// Everything fixed across one sampling call.
pub struct SampleRequest<'a, F: VelocityField + ?Sized> {
    pub field: &'a F,
    pub guidance: GuidanceSpec,
    pub config: SamplerConfig,
    pub estimator: Option<&'a NoiseEstimator>,
    pub model_id: String,
}

impl<'a, F: VelocityField + ?Sized> SampleRequest<'a, F> {
    pub fn new(field: &'a F, guidance: GuidanceSpec, config: SamplerConfig) -> Self {
        SampleRequest { field, guidance, config, estimator: None, model_id: String::new() }
    }
}

/// `n` trajectories sharing one optional class label.
pub fn sample<F: VelocityField + ?Sized>(
    req: &SampleRequest<'_, F>,
    y: Option<usize>,
    n: usize,
) -> std::result::Result<Vec<Trajectory>, SampleAbort> {
    sample_labeled(req, &vec![y; n])
}

/// One trajectory per label. Trajectory `i` draws from its own RNG stream
/// `(seed, i)`, so the result is independent of scheduling.
pub fn sample_labeled<F: VelocityField + ?Sized>(
    req: &SampleRequest<'_, F>,
    labels: &[Option<usize>],
) -> std::result::Result<Vec<Trajectory>, SampleAbort> {
    let early = |e: Error| SampleAbort { step: 0, t: T_MAX, source: e, partial: Vec::new() };
    if labels.is_empty() {
        return Err(early(Error::Argument("number of trajectories must be positive".into())));
    }
    req.guidance.validate().map_err(early)?;
    let times = time_grid(&req.config).map_err(early)?;

    let starts: Vec<usize> = (0..labels.len()).step_by(BLOCK).collect();
    let blocks: Vec<BlockResult> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + BLOCK).min(labels.len());
            run_block(req, &times, start, &labels[start..end])
        })
        .collect();

    let mut out = Vec::with_capacity(labels.len());
    let mut failure: Option<(usize, Error)> = None;
    for b in blocks {
        if let Some((step, e)) = b.failure {
            if failure.as_ref().is_none_or(|(s, _)| step < *s) {
                failure = Some((step, e));
            }
        }
        out.extend(b.trajectories);
    }
    match failure {
        None => Ok(out),
        Some((step, source)) => {
            for tr in &mut out {
                let keep = (step + 1).min(tr.times.len());
                tr.times.truncate(keep);
                tr.states = tr.states.slice(ndarray::s![..keep, ..]).to_owned();
            }
            Err(SampleAbort { step, t: times[step], source, partial: out })
        }
    }
}

struct BlockResult {
    trajectories: Vec<Trajectory>,
    failure: Option<(usize, Error)>,
}

fn run_block<F: VelocityField + ?Sized>(
    req: &SampleRequest<'_, F>,
    times: &[f64],
    start: usize,
    labels: &[Option<usize>],
) -> BlockResult {
    let d = req.field.state_dim();
    let b = labels.len();
    let schedule = req.field.schedule();
    let cfg = &req.config;
    let mut rngs: Vec<ChaCha8Rng> = (0..b)
        .map(|k| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream((start + k) as u64);
            r
        })
        .collect();

    let mut x = Array2::<f64>::zeros((b, d));
    for (k, rng) in rngs.iter_mut().enumerate() {
        for j in 0..d {
            x[[k, j]] = rng.sample(StandardNormal);
        }
    }
    let mut history = vec![Array2::<f64>::zeros((times.len(), d)); b];
    record(&mut history, &x, 0);

    let mut failure = None;
    let mut recorded = 1;
    for step in 0..times.len() - 1 {
        let (t, t_next) = (times[step], times[step + 1]);
        let dt = t - t_next;
        let last = step + 2 == times.len();
        match euler_step(req, &mut x, t, dt, last, labels, &mut rngs, schedule) {
            Ok(()) => {
                record(&mut history, &x, step + 1);
                recorded = step + 2;
                if let Some(k) = first_non_finite(x.view()) {
                    failure = Some((
                        step + 1,
                        Error::NonFinite(format!("trajectory {} at t = {t_next}", start + k)),
                    ));
                    break;
                }
            }
            Err(e) => {
                failure = Some((step, e));
                break;
            }
        }
    }

    let trajectories = history
        .into_iter()
        .enumerate()
        .map(|(k, states)| Trajectory {
            times: times[..recorded].to_vec(),
            states: states.slice(ndarray::s![..recorded, ..]).to_owned(),
            meta: TrajectoryMeta {
                guidance: req.guidance,
                seed: cfg.seed,
                model_id: req.model_id.clone(),
                index: start + k,
                label: labels[k],
            },
        })
        .collect();
    BlockResult { trajectories, failure }
}

#[allow(clippy::too_many_arguments)]
fn euler_step<F: VelocityField + ?Sized>(
    req: &SampleRequest<'_, F>,
    x: &mut Array2<f64>,
    t: f64,
    dt: f64,
    last: bool,
    labels: &[Option<usize>],
    rngs: &mut [ChaCha8Rng],
    schedule: crate::schedule::Schedule,
) -> Result<()> {
    let g = guided_batch(req.field, x.view(), t, labels, &req.guidance, req.estimator)?;
    let w = match (req.config.kind, req.config.w_choice) {
        (SamplerKind::EulerOde, _) | (_, DiffusionRule::Zero) => 0.0,
        (SamplerKind::EulerMaruyamaSde, DiffusionRule::SigmaT) => schedule.sigma(t),
    };
    if w == 0.0 {
        *x -= &(g.velocity * dt);
        return Ok(());
    }
    let drift = g.velocity - g.score * (0.5 * w);
    *x -= &(drift * dt);
    if !last {
        let amp = (w * dt).sqrt();
        for (k, rng) in rngs.iter_mut().enumerate() {
            for j in 0..x.ncols() {
                let xi: f64 = rng.sample(StandardNormal);
                x[[k, j]] += amp * xi;
            }
        }
    }
    Ok(())
}

fn record(history: &mut [Array2<f64>], x: &Array2<f64>, step: usize) {
    for (k, h) in history.iter_mut().enumerate() {
        h.row_mut(step).assign(&x.row(k));
    }
}

fn first_non_finite(x: ArrayView2<'_, f64>) -> Option<usize> {
    x.rows().into_iter().position(|r| r.iter().any(|v| !v.is_finite()))
}

/// Final states stacked into an `n x d` matrix.
pub fn final_states(trajs: &[Trajectory]) -> Result<Array2<f64>> {
    let d = trajs.first().map_or(0, Trajectory::dim);
    let mut out = Array2::zeros((trajs.len(), d));
    for (i, tr) in trajs.iter().enumerate() {
        check_len(d, tr.dim())?;
        out.row_mut(i).assign(&tr.states.row(tr.states.nrows() - 1));
    }
    Ok(out)
}

/// Columnar CSV: `trajectory_id,step,t,x_0,...`. `header` lines are emitted
/// first, each prefixed with `# `.
pub fn trajectories_to_csv(trajs: &[Trajectory], header: &[String]) -> String {
    let mut s = String::new();
    for h in header {
        let _ = writeln!(s, "# {h}");
    }
    let d = trajs.first().map_or(0, Trajectory::dim);
    s.push_str("trajectory_id,step,t");
    for j in 0..d {
        let _ = write!(s, ",x_{j}");
    }
    s.push('\n');
    for tr in trajs {
        for (step, (&t, row)) in tr.times.iter().zip(tr.states.rows()).enumerate() {
            let _ = write!(s, "{},{step},{t}", tr.meta.index);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFileMeta {
    pub kind: String,
    pub dim: usize,
    pub times: Vec<f64>,
    pub trajectories: Vec<TrajectoryMeta>,
    pub config_hash: String,
    pub tool_version: String,
}

pub const TRAJECTORY_KIND: &str = "trajectories";

/// Binary form: the checkpoint container with states laid out
/// trajectory-major, then time, then dimension.
pub fn encode_trajectories(trajs: &[Trajectory], config_hash: &str, tool_version: &str) -> Result<Vec<u8>> {
    let first = trajs.first().ok_or_else(|| Error::Argument("no trajectories to encode".into()))?;
    let mut payload = Vec::with_capacity(trajs.len() * first.states.len());
    for tr in trajs {
        if tr.times != first.times {
            return Err(Error::Argument("trajectories do not share a time grid".into()));
        }
        check_len(first.dim(), tr.dim())?;
        payload.extend(tr.states.iter().copied());
    }
    let meta = TrajectoryFileMeta {
        kind: TRAJECTORY_KIND.into(),
        dim: first.dim(),
        times: first.times.clone(),
        trajectories: trajs.iter().map(|t| t.meta.clone()).collect(),
        config_hash: config_hash.into(),
        tool_version: tool_version.into(),
    };
    container::encode(&meta, &payload)
}

pub fn decode_trajectories(bytes: &[u8]) -> Result<(Vec<Trajectory>, TrajectoryFileMeta)> {
    let (meta, payload): (TrajectoryFileMeta, Vec<f64>) = container::decode(bytes)?;
    if meta.kind != TRAJECTORY_KIND {
        return Err(Error::Format(format!("expected {TRAJECTORY_KIND}, found {}", meta.kind)));
    }
    let per = meta.times.len() * meta.dim;
    check_len(per * meta.trajectories.len(), payload.len())?;
    let trajs = meta
        .trajectories
        .iter()
        .zip(payload.chunks_exact(per.max(1)))
        .map(|(m, chunk)| {
            Ok(Trajectory {
                times: meta.times.clone(),
                states: Array2::from_shape_vec((meta.times.len(), meta.dim), chunk.to_vec())
                    .map_err(|e| Error::Format(e.to_string()))?,
                meta: m.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((trajs, meta))
}

pub fn write_trajectories(path: &Path, trajs: &[Trajectory], config_hash: &str, tool_version: &str) -> Result<()> {
    std::fs::write(path, encode_trajectories(trajs, config_hash, tool_version)?)?;
    Ok(())
}

pub fn read_trajectories(path: &Path) -> Result<(Vec<Trajectory>, TrajectoryFileMeta)> {
    decode_trajectories(&std::fs::read(path)?)
}

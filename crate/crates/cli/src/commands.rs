//! The command implementations behind the `nsl` binary. Each command reads
//! a validated [`RunConfig`] and writes into its output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use ndarray::Array2;
use nsl_core::estimator::{
    measure_shift, train_estimator, ForwardDraws, NoiseEstimator, ShiftOptions, ShiftReport,
};
use nsl_core::guidance::{
    GuidanceSpec, NagMode, OracleField, VelocityField, DEFAULT_JOINT_W_CFG, DEFAULT_JOINT_W_NAG, DEFAULT_W_CFG,
    DEFAULT_W_NAG,
};
use nsl_core::metrics::sliced_w2_to_mixture;
use nsl_core::model::{train_model, VelocityModel};
use nsl_core::sampler::{
    final_states, sample_labeled, time_grid, trajectories_to_csv, write_trajectories, SampleRequest, Trajectory,
};
use nsl_core::MixtureSpec;

use crate::config::{RunConfig, TOOL_VERSION};
use crate::svg::{line_chart, Chart, Series};

pub const MODEL_FILE: &str = "model.nsl";
pub const EMA_FILE: &str = "model_ema.nsl";
pub const LOSS_FILE: &str = "loss.csv";
pub const ESTIMATOR_FILE: &str = "estimator.nsl";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const SHIFT_FILE: &str = "shift.csv";
pub const CONTROL_FILE: &str = "shift_control.csv";

/// Measurement window for the headline shift statistic.
pub const SHIFT_WINDOW: (f64, f64) = (0.2, 0.7);

fn comment_block(header: &[String]) -> String {
    header.iter().map(|h| format!("# {h}\n")).collect()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub struct TrainSummary {
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub model_path: PathBuf,
    pub ema_path: PathBuf,
}

pub fn cmd_train(cfg: &RunConfig, progress: impl FnMut(usize, f64)) -> Result<TrainSummary> {
    let data = cfg.dataset.mixture()?;
    let header = cfg.header()?;
    let hash = cfg.hash()?;
    ensure_dir(&cfg.output_dir)?;
    let tc = cfg.train_config();
    let out = train_model(&data, cfg.arch()?, cfg.schedule(), &tc, progress)?;

    let mut meta = out.model.meta(tc.dropout, tc.steps as u64);
    meta.config_hash = hash;
    meta.tool_version = TOOL_VERSION.into();
    let model_path = cfg.output_dir.join(MODEL_FILE);
    let ema_path = cfg.output_dir.join(EMA_FILE);
    out.model.save(&model_path, &meta)?;
    out.ema.save(&ema_path, &meta)?;

    let mut csv = comment_block(&header);
    csv.push_str("step,loss\n");
    for (i, l) in out.losses.iter().enumerate() {
        let _ = writeln!(csv, "{},{l}", i + 1);
    }
    write(&cfg.output_dir.join(LOSS_FILE), csv)?;
    if !out.losses.is_empty() {
        let smoothed = smooth(&out.losses, 200);
        let top = smoothed.iter().copied().fold(0.0, f64::max) * 1.1;
        let svg = line_chart(
            &Chart {
                title: "training loss (moving average)",
                x_label: "step",
                y_label: "loss",
                x_range: (0.0, out.losses.len() as f64),
                y_range: (0.0, top.max(1e-12)),
            },
            &[Series { name: "loss".into(), points: smoothed.iter().enumerate().map(|(i, &l)| ((i + 1) as f64, l)).collect() }],
            &header,
        );
        write(&cfg.output_dir.join("loss.svg"), svg)?;
    }
    Ok(TrainSummary {
        initial_loss: out.losses.first().copied(),
        final_loss: out.losses.last().copied(),
        model_path,
        ema_path,
    })
}

fn smooth(v: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len());
    let mut acc = 0.0;
    for i in 0..v.len() {
        acc += v[i];
        if i >= window {
            acc -= v[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

pub fn cmd_train_estimator(cfg: &RunConfig, force: bool) -> Result<PathBuf> {
    let path = cfg.output_dir.join(ESTIMATOR_FILE);
    if path.exists() && !force {
        bail!("{} exists; pass --force to overwrite", path.display());
    }
    let data = cfg.dataset.mixture()?;
    ensure_dir(&cfg.output_dir)?;
    let mut est = train_estimator(&data, cfg.schedule(), &cfg.estimator, &cfg.dataset.id())?;
    est.meta.config_hash = cfg.hash()?;
    est.meta.tool_version = TOOL_VERSION.into();
    est.save(&path)?;
    Ok(path)
}

/// Where sampling velocities come from.
pub enum FieldSource {
    Checkpoint(PathBuf),
    /// The exact mixture velocities of the configured dataset.
    Oracle,
}

pub enum LoadedField {
    Model(Box<VelocityModel>),
    Oracle(OracleField),
}

impl LoadedField {
    pub fn as_field(&self) -> &dyn VelocityField {
        match self {
            LoadedField::Model(m) => m.as_ref(),
            LoadedField::Oracle(o) => o,
        }
    }
}

pub fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join(if cfg.train.sample_from_ema { EMA_FILE } else { MODEL_FILE })
}

pub fn load_field(cfg: &RunConfig, source: &FieldSource) -> Result<LoadedField> {
    match source {
        FieldSource::Oracle => Ok(LoadedField::Oracle(OracleField::new(cfg.dataset.mixture()?, cfg.schedule()))),
        FieldSource::Checkpoint(path) => {
            let (model, meta) =
                VelocityModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            let arch = cfg.arch()?;
            ensure!(meta.arch == arch, "checkpoint architecture {:?} does not match config {:?}", meta.arch, arch);
            ensure!(meta.schedule == cfg.schedule, "checkpoint schedule differs from config");
            Ok(LoadedField::Model(Box::new(model)))
        }
    }
}

pub fn load_estimator(path: &Path) -> Result<NoiseEstimator> {
    NoiseEstimator::load(path).with_context(|| format!("loading estimator {}", path.display()))
}

fn labels(cfg: &RunConfig, data: &MixtureSpec, n: usize) -> Vec<Option<usize>> {
    match cfg.sample.class {
        Some(c) => vec![Some(c); n],
        None => (0..n).map(|i| Some(i % data.num_classes())).collect(),
    }
}

fn run_sampler(
    cfg: &RunConfig,
    field: &dyn VelocityField,
    guidance: GuidanceSpec,
    estimator: Option<&NoiseEstimator>,
    n: usize,
    model_id: &str,
) -> Result<Vec<Trajectory>> {
    ensure!(n > 0, "the number of samples must be positive");
    let data = cfg.dataset.mixture()?;
    if let Some(c) = cfg.sample.class {
        ensure!(c < data.num_classes(), "class {c} out of range");
    }
    let mut req = SampleRequest::new(field, guidance, cfg.sampler);
    req.estimator = estimator;
    req.model_id = model_id.to_string();
    sample_labeled(&req, &labels(cfg, &data, n)).map_err(|a| {
        anyhow!("{a}; {} partial trajectories reached step {}", a.partial.len(), a.step)
    })
}

pub struct SampleOutput {
    pub samples: Array2<f64>,
    pub samples_path: PathBuf,
}

pub fn samples_csv(trajs: &[Trajectory], header: &[String]) -> String {
    let mut s = comment_block(header);
    let d = trajs.first().map_or(0, Trajectory::dim);
    s.push_str("index,label");
    for j in 0..d {
        let _ = write!(s, ",x_{j}");
    }
    s.push('\n');
    for tr in trajs {
        let label = tr.meta.label.map_or(String::new(), |l| l.to_string());
        let _ = write!(s, "{},{label}", tr.meta.index);
        for v in tr.states.row(tr.states.nrows() - 1) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn cmd_sample(cfg: &RunConfig, source: &FieldSource, estimator: Option<&Path>) -> Result<SampleOutput> {
    let guidance = cfg.guidance.resolve();
    let est = match (guidance.nag_mode, estimator) {
        (NagMode::ClassifierBased, Some(p)) => Some(load_estimator(p)?),
        (NagMode::ClassifierBased, None) => bail!("classifier-based NAG needs --estimator"),
        _ => None,
    };
    let loaded = load_field(cfg, source)?;
    let id = match source {
        FieldSource::Checkpoint(p) => p.display().to_string(),
        FieldSource::Oracle => "oracle".to_string(),
    };
    let trajs = run_sampler(cfg, loaded.as_field(), guidance, est.as_ref(), cfg.sample.n, &id)?;
    let header = cfg.header()?;
    ensure_dir(&cfg.output_dir)?;
    let samples_path = cfg.output_dir.join(SAMPLES_FILE);
    write(&samples_path, samples_csv(&trajs, &header))?;
    if cfg.sample.write_trajectories {
        write(&cfg.output_dir.join("trajectories.csv"), trajectories_to_csv(&trajs, &header))?;
        write_trajectories(&cfg.output_dir.join("trajectories.nsl"), &trajs, &cfg.hash()?, TOOL_VERSION)?;
    }
    Ok(SampleOutput { samples: final_states(&trajs)?, samples_path })
}

/// The four guidance settings compared by `diagnose`.
pub fn diagnose_arms(cfg: &RunConfig) -> Vec<(&'static str, GuidanceSpec)> {
    let mode = match cfg.guidance.nag_mode {
        NagMode::Off => NagMode::ClassifierFree,
        m => m,
    };
    let tau = cfg.guidance.tau;
    let spec = |w_cfg, w_nag, nag_mode| GuidanceSpec { w_cfg, w_nag, nag_mode, tau };
    vec![
        ("bare", spec(0.0, 0.0, NagMode::Off)),
        ("cfg", spec(DEFAULT_W_CFG, 0.0, NagMode::Off)),
        ("nag", spec(0.0, DEFAULT_W_NAG, mode)),
        ("cfg_nag", spec(DEFAULT_JOINT_W_CFG, DEFAULT_JOINT_W_NAG, mode)),
    ]
}

pub struct DiagnoseOutput {
    pub arms: Vec<(String, ShiftReport)>,
    pub control: ShiftReport,
}

pub fn shift_options(cfg: &RunConfig) -> ShiftOptions {
    ShiftOptions {
        n_ref: cfg.diagnose.n_ref,
        seed: cfg.sampler.seed ^ 0x5eed_f0a1,
        kde_times: snap_to_grid(cfg, &cfg.diagnose.kde_times),
        ..ShiftOptions::default()
    }
}

/// Requested KDE times moved to the nearest sampler grid node.
fn snap_to_grid(cfg: &RunConfig, times: &[f64]) -> Vec<f64> {
    let grid = time_grid(&cfg.sampler).unwrap_or_default();
    times
        .iter()
        .filter_map(|&t| grid.iter().copied().min_by(|a, b| (a - t).abs().total_cmp(&(b - t).abs())))
        .collect()
}

fn shift_rows(arm: &str, rep: &ShiftReport, out: &mut String) {
    for r in &rep.records {
        let _ = writeln!(
            out,
            "{arm},{},{},{},{},{},{}",
            r.t, r.mean_t_hat_sampled, r.mean_t_hat_forward, r.delta_raw, r.delta_normalized, r.n
        );
    }
}

pub fn cmd_diagnose(cfg: &RunConfig, source: &FieldSource, estimator: &Path) -> Result<DiagnoseOutput> {
    let est = load_estimator(estimator)?;
    let loaded = load_field(cfg, source)?;
    let data = cfg.dataset.mixture()?;
    let schedule = cfg.schedule();
    let header = cfg.header()?;
    ensure_dir(&cfg.output_dir)?;
    let opts = shift_options(cfg);

    let mut arms = Vec::new();
    for (name, spec) in diagnose_arms(cfg) {
        let trajs = run_sampler(cfg, loaded.as_field(), spec, Some(&est), cfg.diagnose.n, name)?;
        let rep = measure_shift(&trajs, &est, &data, &schedule, &opts)?;
        write(&cfg.output_dir.join(format!("kde_{name}.csv")), rep.kde_csv(&header))?;
        arms.push((name.to_string(), rep));
    }

    let times = time_grid(&cfg.sampler)?;
    let draws = ForwardDraws::new(&data, cfg.diagnose.n, cfg.sampler.seed.wrapping_add(1))?;
    let fwd = draws.trajectories(&schedule, &times, 0.0, cfg.sampler.seed)?;
    let control = measure_shift(&fwd, &est, &data, &schedule, &ShiftOptions { kde_times: Vec::new(), ..opts })?;
    write(&cfg.output_dir.join(CONTROL_FILE), control.to_csv(&header))?;

    let mut csv = comment_block(&header);
    csv.push_str("arm,t,mean_t_hat_sampled,mean_t_hat_forward,delta_raw,delta_normalized,n\n");
    for (name, rep) in &arms {
        shift_rows(name, rep, &mut csv);
    }
    write(&cfg.output_dir.join(SHIFT_FILE), csv)?;

    let series: Vec<Series> = arms
        .iter()
        .map(|(name, rep)| Series {
            name: name.clone(),
            points: rep.records.iter().map(|r| (r.t, r.delta_normalized)).collect(),
        })
        .collect();
    let svg = line_chart(
        &Chart {
            title: "mean-normalized noise shift",
            x_label: "prior t",
            y_label: "t_hat(sampled) - t_hat(forward)",
            x_range: (0.0, 1.0),
            y_range: (-0.2, 0.2),
        },
        &series,
        &header,
    );
    write(&cfg.output_dir.join("shift.svg"), svg)?;
    Ok(DiagnoseOutput { arms, control })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    WNag,
    Steps,
}

impl std::str::FromStr for SweepAxis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w_nag" | "w-nag" => Ok(SweepAxis::WNag),
            "steps" => Ok(SweepAxis::Steps),
            _ => bail!("unknown sweep axis {s:?}; expected w_nag or steps"),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::WNag => "w_nag",
            SweepAxis::Steps => "steps",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis_value: f64,
    pub sw2_mean: f64,
    pub sw2_se: f64,
    pub shift_mean: f64,
    pub shift_se: f64,
    pub n: usize,
    pub seeds: usize,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, f64::NAN);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Configuration for one sweep point.
pub fn sweep_point(cfg: &RunConfig, axis: SweepAxis, value: f64) -> Result<RunConfig> {
    let mut c = cfg.clone();
    match axis {
        SweepAxis::WNag => {
            ensure!(value >= 0.0 && value.is_finite(), "w_nag values must be finite and >= 0");
            if c.guidance.nag_mode == NagMode::Off {
                c.guidance.nag_mode = NagMode::ClassifierFree;
            }
            c.guidance.w_nag = Some(value);
        }
        SweepAxis::Steps => {
            ensure!(value.fract() == 0.0 && value >= 2.0, "steps values must be integers >= 2");
            c.sampler.steps = value as usize;
        }
    }
    c.validate()?;
    Ok(c)
}

pub fn cmd_sweep(
    cfg: &RunConfig,
    source: &FieldSource,
    axis: SweepAxis,
    values: &[f64],
    estimator: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    ensure!(!values.is_empty(), "sweep needs at least one value");
    ensure!(cfg.sweep.seeds > 0, "sweep.seeds must be positive");
    let est = estimator.map(load_estimator).transpose()?;
    let loaded = load_field(cfg, source)?;
    let data = cfg.dataset.mixture()?;
    let schedule = cfg.schedule();
    let mut rows = Vec::new();
    for &value in values {
        let point = sweep_point(cfg, axis, value)?;
        let guidance = point.guidance.resolve();
        let (mut sw2, mut shift) = (Vec::new(), Vec::new());
        for s in 0..cfg.sweep.seeds {
            let mut run = point.clone();
            run.sampler.seed = cfg.sampler.seed.wrapping_add(s as u64);
            let trajs = run_sampler(&run, loaded.as_field(), guidance, est.as_ref(), cfg.sweep.n, "sweep")?;
            let fin = final_states(&trajs)?;
            sw2.push(sliced_w2_to_mixture(fin.view(), &data, cfg.sweep.projections, 0)?);
            if let Some(e) = &est {
                let rep = measure_shift(&trajs, e, &data, &schedule, &shift_options(&run))?;
                shift.push(rep.mean_normalized_delta(SHIFT_WINDOW.0, SHIFT_WINDOW.1).unwrap_or(f64::NAN));
            }
        }
        let (sw2_mean, sw2_se) = mean_se(&sw2);
        let (shift_mean, shift_se) = if shift.is_empty() { (f64::NAN, f64::NAN) } else { mean_se(&shift) };
        rows.push(SweepRow { axis_value: value, sw2_mean, sw2_se, shift_mean, shift_se, n: cfg.sweep.n, seeds: cfg.sweep.seeds });
    }

    let header = cfg.header()?;
    ensure_dir(&cfg.output_dir)?;
    let mut csv = comment_block(&header);
    csv.push_str("axis_value,sw2_mean,sw2_se,shift_mean,shift_se,n,seeds\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.axis_value, r.sw2_mean, r.sw2_se, r.shift_mean, r.shift_se, r.n, r.seeds
        );
    }
    write(&cfg.output_dir.join(format!("sweep_{}.csv", axis.name())), csv)?;
    let lo = rows.iter().map(|r| r.axis_value).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.axis_value).fold(f64::NEG_INFINITY, f64::max);
    let top = rows.iter().map(|r| r.sw2_mean).fold(0.0, f64::max) * 1.2;
    let svg = line_chart(
        &Chart {
            title: "sliced W2 to the data distribution",
            x_label: axis.name(),
            y_label: "SW2",
            x_range: if hi > lo { (lo, hi) } else { (lo - 1.0, hi + 1.0) },
            y_range: (0.0, if top > 0.0 { top } else { 1.0 }),
        },
        &[Series { name: "sw2".into(), points: rows.iter().map(|r| (r.axis_value, r.sw2_mean)).collect() }],
        &header,
    );
    write(&cfg.output_dir.join(format!("sweep_{}.svg", axis.name())), svg)?;
    Ok(rows)
}

pub fn cmd_show_config(cfg: &RunConfig) -> Result<String> {
    Ok(format!("# config_hash = {}\n# tool_version = {TOOL_VERSION}\n{}", cfg.hash()?, cfg.to_toml()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arms_use_documented_weights() {
        let arms = diagnose_arms(&RunConfig::default());
        let names: Vec<_> = arms.iter().map(|a| a.0).collect();
        assert_eq!(names, ["bare", "cfg", "nag", "cfg_nag"]);
        assert_eq!((arms[1].1.w_cfg, arms[2].1.w_nag), (1.5, 3.0));
        assert_eq!((arms[3].1.w_cfg, arms[3].1.w_nag), (1.2, 2.0));
        assert_eq!(arms[0].1, GuidanceSpec::bare());
    }

    #[test]
    fn sweep_points_validate_values() {
        let cfg = RunConfig::default();
        assert_eq!(sweep_point(&cfg, SweepAxis::Steps, 25.0).unwrap().sampler.steps, 25);
        assert!(sweep_point(&cfg, SweepAxis::Steps, 2.5).is_err());
        assert!(sweep_point(&cfg, SweepAxis::WNag, -1.0).is_err());
        assert_eq!(sweep_point(&cfg, SweepAxis::WNag, 4.0).unwrap().guidance.resolve().w_nag, 4.0);
        assert!("nope".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn moving_average() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0], 2), vec![1.0, 2.0, 4.0]);
    }
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nsl_cli::commands::{self, FieldSource, SweepAxis};
use nsl_cli::RunConfig;
use nsl_core::guidance::GuidanceSpec;
use nsl_core::metrics::sliced_w2_to_mixture;
use nsl_core::model::VelocityModel;
use nsl_core::sampler::{sample_labeled, SampleRequest};
use tempfile::TempDir;

const SMALL: &str = r#"
[model]
hidden = [16, 16]
fourier_bands = 4

[train]
steps = 60
batch_size = 32

[estimator]
steps = 60
batch_size = 32
hidden = [16, 16]

[sampler]
steps = 20

[sample]
n = 150

[diagnose]
n = 64
n_ref = 64
kde_times = [0.5]

[sweep]
n = 100
seeds = 2
projections = 16
"#;

fn setup() -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    (dir, cfg)
}

fn nsl(cfg: &Path, out: &Path, args: &[&str], threads: usize) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nsl"))
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(args)
        .env("NSL_THREADS", threads.to_string())
        .output()
        .unwrap()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn small_config(out: &Path) -> RunConfig {
    let mut c = RunConfig::from_toml(SMALL).unwrap();
    c.output_dir = out.to_path_buf();
    c
}

#[test]
fn reruns_are_bytewise_identical_and_threads_do_not_matter() {
    let (dir, cfg) = setup();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(nsl(&cfg, &a, &["train", "--seed", "3"], 1));
    ok(nsl(&cfg, &b, &["train", "--seed", "3"], 1));
    for f in [commands::MODEL_FILE, commands::EMA_FILE, commands::LOSS_FILE, "loss.svg"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    ok(nsl(&cfg, &a, &["train-estimator", "--seed", "4"], 1));
    ok(nsl(&cfg, &b, &["train-estimator", "--seed", "4"], 1));
    assert_eq!(read(a.join(commands::ESTIMATOR_FILE)), read(b.join(commands::ESTIMATOR_FILE)));

    // Both sample runs read the same checkpoint so trajectory metadata agrees.
    let ckpt = a.join(commands::MODEL_FILE);
    let ckpt = ckpt.to_str().unwrap();
    let args = ["sample", "--checkpoint", ckpt, "--seed", "5", "--trajectories"];
    ok(nsl(&cfg, &a, &args, 1));
    ok(nsl(&cfg, &b, &args, 4));
    for f in [commands::SAMPLES_FILE, "trajectories.csv", "trajectories.nsl"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    let other = dir.path().join("c");
    ok(nsl(&cfg, &other, &["sample", "--checkpoint", ckpt, "--seed", "6"], 1));
    assert_ne!(read(a.join(commands::SAMPLES_FILE)), read(other.join(commands::SAMPLES_FILE)));
}

#[test]
fn zero_samples_are_rejected() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    let o = nsl(&cfg, &out, &["sample", "--oracle", "--n", "0"], 1);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("positive"));
}

#[test]
fn unknown_config_keys_fail_the_command() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[guidance]\nw_ngx = 2.0\n").unwrap();
    let o = nsl(&cfg, &dir.path().join("run"), &["show-config"], 1);
    assert!(!o.status.success());
}

#[test]
fn show_config_round_trips() {
    let (dir, cfg) = setup();
    let o = ok(nsl(&cfg, &dir.path().join("run"), &["show-config"], 1));
    let shown = RunConfig::from_toml(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(shown.hash().unwrap(), small_config(Path::new("")).hash().unwrap());
}

#[test]
fn guidance_off_flags_reproduce_bare_sampling() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    ok(nsl(&cfg, &out, &["train"], 1));
    ok(nsl(&cfg, &out, &["sample", "--w-cfg", "0", "--nag-mode", "off", "--seed", "2"], 1));
    let cli_bytes = read(out.join(commands::SAMPLES_FILE));

    let mut c = small_config(&out);
    c.sampler.seed = 2;
    c.guidance.w_cfg = Some(0.0);
    c.guidance.nag_mode = nsl_core::guidance::NagMode::Off;
    let (model, _) = VelocityModel::load(&out.join(commands::MODEL_FILE)).unwrap();
    let k = c.dataset.mixture().unwrap().num_classes();
    let labels: Vec<Option<usize>> = (0..c.sample.n).map(|i| Some(i % k)).collect();
    let req = SampleRequest::new(&model, GuidanceSpec::bare(), c.sampler);
    let trajs = sample_labeled(&req, &labels).unwrap();
    let expect = commands::samples_csv(&trajs, &c.header().unwrap());
    assert_eq!(cli_bytes, expect.into_bytes());
}

#[test]
fn zero_step_training_writes_the_initialization() {
    let dir = TempDir::new().unwrap();
    let mut c = small_config(dir.path());
    c.train.steps = 0;
    c.train.seed = 12;
    let summary = commands::cmd_train(&c, |_, _| {}).unwrap();
    assert!(summary.initial_loss.is_none());
    let (trained, meta) = VelocityModel::load(&summary.model_path).unwrap();
    let init = VelocityModel::new(c.arch().unwrap(), c.schedule(), 12).unwrap();
    assert_eq!(trained.flat_params(), init.flat_params());
    assert_eq!(meta.config_hash, c.hash().unwrap());
    let (ema, _) = VelocityModel::load(&summary.ema_path).unwrap();
    assert_eq!(ema.flat_params(), init.flat_params());
}

#[test]
fn estimator_is_not_overwritten_without_force() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    ok(nsl(&cfg, &out, &["train-estimator", "--seed", "1"], 1));
    let first = read(out.join(commands::ESTIMATOR_FILE));
    let o = nsl(&cfg, &out, &["train-estimator", "--seed", "2"], 1);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
    assert_eq!(read(out.join(commands::ESTIMATOR_FILE)), first);
    ok(nsl(&cfg, &out, &["train-estimator", "--seed", "2", "--force"], 1));
    assert_ne!(read(out.join(commands::ESTIMATOR_FILE)), first);
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    ok(nsl(&cfg, &out, &["train"], 1));
    let other = dir.path().join("other.toml");
    std::fs::write(&other, SMALL.replace("hidden = [16, 16]\nfourier_bands = 4", "hidden = [8]\nfourier_bands = 4")).unwrap();
    let o = nsl(&other, &out, &["sample"], 1);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("architecture"));
}

fn data_lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).collect()
}

#[test]
fn diagnose_writes_four_arms_and_a_null_control() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    ok(nsl(&cfg, &out, &["train"], 1));
    ok(nsl(&cfg, &out, &["train-estimator"], 1));
    let mut c = small_config(&out);
    c.diagnose.n = 400;
    let header = c.header().unwrap();
    ok(nsl(&cfg, &out, &["diagnose", "--n", "400"], 1));

    let shift = String::from_utf8(read(out.join(commands::SHIFT_FILE))).unwrap();
    assert!(shift.starts_with(&format!("# {}\n", header[0])));
    let rows = data_lines(&shift);
    assert_eq!(rows[0], "arm,t,mean_t_hat_sampled,mean_t_hat_forward,delta_raw,delta_normalized,n");
    let grid = c.sampler.steps + 1;
    assert_eq!(rows.len() - 1, 4 * grid);
    for arm in ["bare", "cfg", "nag", "cfg_nag"] {
        assert_eq!(rows.iter().filter(|r| r.starts_with(&format!("{arm},"))).count(), grid);
        assert!(out.join(format!("kde_{arm}.csv")).exists());
    }
    let svg = String::from_utf8(read(out.join("shift.svg"))).unwrap();
    assert!(svg.starts_with(&format!("<!-- {} -->", header[0])));
    assert_eq!(svg.matches("<polyline").count(), 4);

    let control = String::from_utf8(read(out.join(commands::CONTROL_FILE))).unwrap();
    assert_eq!(data_lines(&control).len() - 1, grid);

    for entry in std::fs::read_dir(&out).unwrap() {
        let path = entry.unwrap().path();
        let text = match path.extension().and_then(|e| e.to_str()) {
            Some("csv" | "svg") => String::from_utf8(read(&path)).unwrap(),
            _ => continue,
        };
        let first = text.lines().next().unwrap();
        assert!(first.contains("config_hash=") && first.contains(nsl_cli::config::TOOL_VERSION), "{}", path.display());
    }

    // Forward-versus-forward control, averaged over the grid. Common random
    // numbers make the per-t errors positively correlated, so the averaged
    // standard error is a conservative bound.
    let diag = commands::cmd_diagnose(&c, &FieldSource::Checkpoint(out.join(commands::MODEL_FILE)), &out.join(commands::ESTIMATOR_FILE)).unwrap();
    let recs = &diag.control.records;
    let m = recs.iter().map(|r| r.delta_normalized).sum::<f64>() / recs.len() as f64;
    let se = recs.iter().map(|r| r.se_sampled.hypot(r.se_forward)).sum::<f64>() / recs.len() as f64;
    assert!(m.abs() <= 2.0 * se, "control mean delta {m}, se {se}");
}

#[test]
fn sweep_schema_and_single_value_agrees_with_sample() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    ok(nsl(&cfg, &out, &["train"], 1));
    ok(nsl(&cfg, &out, &["sweep", "--axis", "steps", "--values", "10,20", "--seed", "7"], 1));
    let csv = String::from_utf8(read(out.join("sweep_steps.csv"))).unwrap();
    let rows = data_lines(&csv);
    assert_eq!(rows[0], "axis_value,sw2_mean,sw2_se,shift_mean,shift_se,n,seeds");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("10,") && rows[1].ends_with(",100,2"));
    assert!(out.join("sweep_steps.svg").exists());

    // One seed at one value is a plain sample followed by the metric.
    let mut c = small_config(&out);
    c.sweep.seeds = 1;
    c.sample.n = c.sweep.n;
    c.sampler.seed = 7;
    let src = FieldSource::Checkpoint(out.join(commands::MODEL_FILE));
    let rows = commands::cmd_sweep(&c, &src, SweepAxis::Steps, &[20.0], None).unwrap();
    let s = commands::cmd_sample(&c, &src, None).unwrap();
    let data = c.dataset.mixture().unwrap();
    let sw2 = sliced_w2_to_mixture(s.samples.view(), &data, c.sweep.projections, 0).unwrap();
    assert_eq!(rows[0].sw2_mean, sw2);
}

#[test]
fn more_oracle_steps_do_not_hurt() {
    let dir = TempDir::new().unwrap();
    let mut c = small_config(dir.path());
    c.sweep.n = 2000;
    c.sweep.seeds = 2;
    c.sweep.projections = 64;
    c.guidance.w_cfg = Some(0.0);
    c.guidance.nag_mode = nsl_core::guidance::NagMode::Off;
    let rows = commands::cmd_sweep(&c, &FieldSource::Oracle, SweepAxis::Steps, &[25.0, 250.0], None).unwrap();
    assert!(rows[1].sw2_mean <= rows[0].sw2_mean + 0.005, "{rows:?}");
}

#[test]
fn sweep_rejects_bad_values() {
    let dir = TempDir::new().unwrap();
    let c = small_config(dir.path());
    assert!(commands::cmd_sweep(&c, &FieldSource::Oracle, SweepAxis::Steps, &[], None).is_err());
    assert!(commands::cmd_sweep(&c, &FieldSource::Oracle, SweepAxis::Steps, &[2.5], None).is_err());
    assert!(commands::cmd_sweep(&c, &FieldSource::Oracle, SweepAxis::WNag, &[-1.0], None).is_err());
}

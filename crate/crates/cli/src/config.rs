//! Run configuration, read from TOML. Every field has a default and unknown
//! keys are rejected.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use nsl_core::estimator::EstimatorTrainConfig;
use nsl_core::guidance::{
    GuidanceSpec, NagMode, DEFAULT_JOINT_W_CFG, DEFAULT_JOINT_W_NAG, DEFAULT_TAU, DEFAULT_W_CFG, DEFAULT_W_NAG,
};
use nsl_core::model::{DropoutPolicy, ModelArch, TrainConfig, DEFAULT_FOURIER_BANDS, DEFAULT_HIDDEN};
use nsl_core::net::AdamWConfig;
use nsl_core::oracle::presets;
use nsl_core::sampler::SamplerConfig;
use nsl_core::{MixtureComponent, MixtureSpec, Schedule, ScheduleKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    GridMixture,
    Checkerboard,
    TwoMoons,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::GridMixture => "grid_mixture",
            Preset::Checkerboard => "checkerboard",
            Preset::TwoMoons => "two_moons",
        }
    }

    pub fn mixture(self) -> MixtureSpec {
        match self {
            Preset::GridMixture => presets::grid_mixture(),
            Preset::Checkerboard => presets::checkerboard(),
            Preset::TwoMoons => presets::two_moons(),
        }
    }
}

/// Either a named preset or inline mixture components; `grid_mixture` when
/// neither is given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub preset: Option<Preset>,
    pub components: Option<Vec<MixtureComponent>>,
}

impl DatasetConfig {
    pub fn mixture(&self) -> Result<MixtureSpec> {
        match (&self.preset, &self.components) {
            (Some(p), None) => Ok(p.mixture()),
            (None, Some(c)) => Ok(MixtureSpec::new(c.clone())?),
            (None, None) => Ok(Preset::GridMixture.mixture()),
            (Some(_), Some(_)) => bail!("dataset: give either `preset` or `components`, not both"),
        }
    }

    pub fn id(&self) -> String {
        match (self.preset, &self.components) {
            (Some(p), _) => p.name().to_string(),
            (None, Some(_)) => "inline".to_string(),
            (None, None) => Preset::GridMixture.name().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub fourier_bands: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: DEFAULT_HIDDEN.to_vec(), fourier_bands: DEFAULT_FOURIER_BANDS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub ema_decay: f64,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub dropout: DropoutPolicy,
    /// Sample from the EMA weights instead of the raw weights.
    pub sample_from_ema: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            steps: t.steps,
            batch_size: t.batch_size,
            ema_decay: t.ema_decay,
            seed: t.seed,
            optimizer: t.optimizer,
            dropout: t.dropout,
            sample_from_ema: false,
        }
    }
}

/// Guidance weights; absent weights resolve to the documented defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub w_cfg: Option<f64>,
    pub w_nag: Option<f64>,
    pub nag_mode: NagMode,
    pub tau: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { w_cfg: None, w_nag: None, nag_mode: NagMode::ClassifierFree, tau: DEFAULT_TAU }
    }
}

impl GuidanceConfig {
    /// Defaults: `w_cfg` 1.5 alone or 1.2 with NAG; `w_nag` 3.0 alone or 2.0 with CFG.
    pub fn resolve(&self) -> GuidanceSpec {
        let nag_on = self.nag_mode != NagMode::Off;
        let w_cfg = self.w_cfg.unwrap_or(if nag_on { DEFAULT_JOINT_W_CFG } else { DEFAULT_W_CFG });
        let w_nag = if nag_on {
            self.w_nag.unwrap_or(if w_cfg == 0.0 { DEFAULT_W_NAG } else { DEFAULT_JOINT_W_NAG })
        } else {
            0.0
        };
        GuidanceSpec { w_cfg, w_nag, nag_mode: self.nag_mode, tau: self.tau }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub n: usize,
    /// Fixed class for every trajectory; classes are cycled when absent.
    pub class: Option<usize>,
    pub write_trajectories: bool,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection { n: 1000, class: None, write_trajectories: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseSection {
    pub n: usize,
    pub n_ref: usize,
    pub kde_times: Vec<f64>,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        DiagnoseSection { n: 1000, n_ref: 5000, kde_times: vec![0.2, 0.5, 0.8] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub n: usize,
    pub seeds: usize,
    pub projections: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { n: 2000, seeds: 5, projections: nsl_core::metrics::DEFAULT_PROJECTIONS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub schedule: ScheduleKind,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub estimator: EstimatorTrainConfig,
    pub sampler: SamplerConfig,
    pub guidance: GuidanceConfig,
    pub sample: SampleSection,
    pub diagnose: DiagnoseSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs/default"),
            schedule: ScheduleKind::Linear,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            estimator: EstimatorTrainConfig::default(),
            sampler: SamplerConfig::default(),
            guidance: GuidanceConfig::default(),
            sample: SampleSection::default(),
            diagnose: DiagnoseSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("parsing run config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.mixture()?;
        self.train.dropout.validate()?;
        self.sampler.validate()?;
        self.guidance.resolve().validate()?;
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            bail!("model.hidden must list positive widths");
        }
        Ok(())
    }

    /// First 16 hex digits of SHA-256 over the canonical TOML rendering,
    /// with `output_dir` blanked so a run hashes the same wherever it lands.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let digest = Sha256::digest(c.to_toml()?.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::new(self.schedule)
    }

    pub fn arch(&self) -> Result<ModelArch> {
        let mix = self.dataset.mixture()?;
        Ok(ModelArch {
            state_dim: mix.dim(),
            num_classes: mix.num_classes(),
            hidden: self.model.hidden.clone(),
            fourier_bands: self.model.fourier_bands,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            optimizer: self.train.optimizer,
            dropout: self.train.dropout,
            ema_decay: self.train.ema_decay,
            seed: self.train.seed,
        }
    }

    /// Comment lines opening every emitted text file.
    pub fn header(&self) -> Result<Vec<String>> {
        Ok(vec![format!("nsl {TOOL_VERSION} config_hash={}", self.hash()?)])
    }
}

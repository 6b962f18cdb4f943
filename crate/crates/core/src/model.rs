//! Velocity model conditioned on the noise level and an optional class.
//!
//! The trunk always sees `[x, t-slot, class-slot]`. The t-slot holds
//! Fourier features of `t`, or a learned null token when the noise level
//! is withheld; the class-slot holds a learned class embedding, whose last
//! row is the class-null token. Training drops each condition
//! independently per example so a single network also provides the
//! noise-unconditional and class-unconditional branches.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{check_len, Error, Result};
use crate::net::{Activation, DenseNet, OptimState};
use crate::schedule::{Schedule, ScheduleKind, T_MAX};

pub const DEFAULT_FOURIER_BANDS: usize = 32;
pub const DEFAULT_HIDDEN: [usize; 4] = [128; 4];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArch {
    pub state_dim: usize,
    pub num_classes: usize,
    pub hidden: Vec<usize>,
    pub fourier_bands: usize,
}

impl ModelArch {
    pub fn new(state_dim: usize, num_classes: usize) -> Self {
        ModelArch {
            state_dim,
            num_classes,
            hidden: DEFAULT_HIDDEN.to_vec(),
            fourier_bands: DEFAULT_FOURIER_BANDS,
        }
    }

    pub fn embed_dim(&self) -> usize {
        2 * self.fourier_bands
    }

    pub fn trunk_dims(&self) -> Vec<usize> {
        let mut d = vec![self.state_dim + 2 * self.embed_dim()];
        d.extend(&self.hidden);
        d.push(self.state_dim);
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropoutPolicy {
    pub p_drop_noise: f64,
    pub p_drop_class: f64,
}

impl Default for DropoutPolicy {
    fn default() -> Self {
        DropoutPolicy { p_drop_noise: 0.1, p_drop_class: 0.1 }
    }
}

impl DropoutPolicy {
    pub fn validate(&self) -> Result<()> {
        for p in [self.p_drop_noise, self.p_drop_class] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Argument(format!("dropout probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Independent per-example draws `(drop_noise, drop_class)`.
    pub fn draw(&self, rng: &mut impl Rng) -> (bool, bool) {
        let a = rng.random::<f64>() < self.p_drop_noise;
        let b = rng.random::<f64>() < self.p_drop_class;
        (a, b)
    }
}

/// Sinusoidal features of `t` at frequencies `pi * 2^(7k / (bands - 1))`.
pub fn fourier_features(t: f64, bands: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), 2 * bands);
    for k in 0..bands {
        let exp = if bands > 1 { 7.0 * k as f64 / (bands - 1) as f64 } else { 0.0 };
        let f = std::f64::consts::PI * exp.exp2();
        let (s, c) = (f * t).sin_cos();
        out[k] = s;
        out[bands + k] = c;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    pub bands: usize,
    /// `(num_classes + 1) x embed_dim`, row `num_classes` is the class-null token.
    pub class_table: Vec<f64>,
    pub noise_null: Vec<f64>,
}

impl ConditionEmbedding {
    fn init(arch: &ModelArch, rng: &mut impl Rng) -> Self {
        let e = arch.embed_dim();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let class_table = draw((arch.num_classes + 1) * e);
        let noise_null = draw(e);
        ConditionEmbedding { bands: arch.fourier_bands, class_table, noise_null }
    }

    pub fn embed_dim(&self) -> usize {
        2 * self.bands
    }

    pub fn null_class(&self) -> usize {
        self.class_table.len() / self.embed_dim() - 1
    }

    fn write_time_slot(&self, t: Option<f64>, out: &mut [f64]) {
        match t {
            Some(t) => fourier_features(t, self.bands, out),
            None => out.copy_from_slice(&self.noise_null),
        }
    }

    fn write_class_slot(&self, y: Option<usize>, out: &mut [f64]) {
        let e = self.embed_dim();
        let row = y.unwrap_or(self.null_class());
        out.copy_from_slice(&self.class_table[row * e..(row + 1) * e]);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    pub arch: ModelArch,
    pub schedule: Schedule,
    pub embed: ConditionEmbedding,
    pub trunk: DenseNet,
}

/// Metadata block of a velocity-model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: String,
    pub arch: ModelArch,
    pub schedule: ScheduleKind,
    pub dropout: DropoutPolicy,
    pub step: u64,
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub tool_version: String,
}

pub const MODEL_KIND: &str = "velocity_model";

impl VelocityModel {
    pub fn new(arch: ModelArch, schedule: Schedule, seed: u64) -> Result<Self> {
        if arch.state_dim == 0 || arch.fourier_bands == 0 {
            return Err(Error::Argument("state_dim and fourier_bands must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = DenseNet::init(&arch.trunk_dims(), Activation::Silu, &mut rng)?;
        let embed = ConditionEmbedding::init(&arch, &mut rng);
        Ok(VelocityModel { arch, schedule, embed, trunk })
    }

    pub fn state_dim(&self) -> usize {
        self.arch.state_dim
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn check_class(&self, y: Option<usize>) -> Result<()> {
        match y {
            Some(c) if c >= self.arch.num_classes => Err(Error::Argument(format!(
                "class {c} out of range for a model with {} classes",
                self.arch.num_classes
            ))),
            _ => Ok(()),
        }
    }

    fn check_t(t: Option<f64>) -> Result<()> {
        match t {
            Some(t) if !(0.0..=T_MAX).contains(&t) => Err(Error::Domain { t, lo: 0.0, hi: T_MAX }),
            _ => Ok(()),
        }
    }

    /// Trunk input rows for a batch sharing one noise condition.
    fn build_input(&self, x: ArrayView2<'_, f64>, t_cond: Option<f64>, labels: &[Option<usize>]) -> Array2<f64> {
        let d = self.arch.state_dim;
        let e = self.arch.embed_dim();
        let mut input = Array2::zeros((x.nrows(), d + 2 * e));
        let mut tslot = vec![0.0; e];
        self.embed.write_time_slot(t_cond, &mut tslot);
        let mut cslot = vec![0.0; e];
        for (i, row) in x.rows().into_iter().enumerate() {
            let mut dst = input.row_mut(i);
            dst.slice_mut(s![..d]).assign(&row);
            dst.slice_mut(s![d..d + e]).assign(&ndarray::ArrayView1::from(&tslot));
            self.embed.write_class_slot(labels[i], &mut cslot);
            dst.slice_mut(s![d + e..]).assign(&ndarray::ArrayView1::from(&cslot));
        }
        input
    }

    /// Batched velocity prediction; every row shares the noise condition.
    pub fn predict_batch(
        &self,
        x: ArrayView2<'_, f64>,
        t_cond: Option<f64>,
        labels: &[Option<usize>],
    ) -> Result<Array2<f64>> {
        check_len(self.arch.state_dim, x.ncols())?;
        check_len(x.nrows(), labels.len())?;
        Self::check_t(t_cond)?;
        for &y in labels {
            self.check_class(y)?;
        }
        self.trunk.forward(self.build_input(x, t_cond, labels).view())
    }

    pub fn predict_velocity(&self, x: &[f64], t_cond: Option<f64>, y_cond: Option<usize>) -> Result<Vec<f64>> {
        let xv = ArrayView2::from_shape((1, x.len()), x).map_err(|_| Error::Shape {
            expected: self.arch.state_dim,
            got: x.len(),
        })?;
        Ok(self.predict_batch(xv, t_cond, &[y_cond])?.into_raw_vec_and_offset().0)
    }

    /// Score at trajectory time `t`. The velocity comes from the network with
    /// the noise slot filled by `t` or by the null token; the velocity-to-score
    /// coefficients always use `t`.
    pub fn score_of(&self, x: &[f64], t: f64, y_cond: Option<usize>, t_cond_present: bool) -> Result<Vec<f64>> {
        let v = self.predict_velocity(x, t_cond_present.then_some(t), y_cond)?;
        self.schedule.score_from_velocity(x, &v, t)
    }

    pub fn num_params(&self) -> usize {
        self.trunk.num_params() + self.embed.class_table.len() + self.embed.noise_null.len()
    }

    /// Parameter segments in checkpoint order.
    pub fn param_segments(&self) -> [&[f64]; 3] {
        [self.trunk.params(), &self.embed.class_table, &self.embed.noise_null]
    }

    pub fn param_segments_mut(&mut self) -> [&mut [f64]; 3] {
        [self.trunk.params_mut(), &mut self.embed.class_table, &mut self.embed.noise_null]
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.param_segments().concat()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        check_len(self.num_params(), flat.len())?;
        let mut off = 0;
        for seg in self.param_segments_mut() {
            seg.copy_from_slice(&flat[off..off + seg.len()]);
            off += seg.len();
        }
        Ok(())
    }

    /// One optimizer step on the velocity objective with per-example
    /// condition dropout. Returns the loss before the update.
    pub fn train_step(
        &mut self,
        x0: ArrayView2<'_, f64>,
        labels: &[usize],
        policy: &DropoutPolicy,
        opt: &mut OptimState,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        let b = x0.nrows();
        if b == 0 {
            return Err(Error::Argument("empty training batch".into()));
        }
        check_len(self.arch.state_dim, x0.ncols())?;
        check_len(b, labels.len())?;
        let d = self.arch.state_dim;
        let e = self.arch.embed_dim();
        let null_class = self.embed.null_class();

        let mut input = Array2::zeros((b, d + 2 * e));
        let mut target = Array2::zeros((b, d));
        let mut drop_t = vec![false; b];
        let mut class_rows = vec![0usize; b];
        let mut slot = vec![0.0; e];
        for i in 0..b {
            if labels[i] >= self.arch.num_classes {
                return Err(Error::Argument(format!("label {} out of range", labels[i])));
            }
            let t: f64 = rng.random::<f64>() * T_MAX;
            let se = self.schedule.eval_unchecked(t);
            for j in 0..d {
                let eps: f64 = rng.sample(StandardNormal);
                let a = x0[[i, j]];
                input[[i, j]] = se.alpha * a + se.sigma * eps;
                target[[i, j]] = se.alpha_dot * a + se.sigma_dot * eps;
            }
            let (dt, dy) = policy.draw(rng);
            drop_t[i] = dt;
            class_rows[i] = if dy { null_class } else { labels[i] };
            self.embed.write_time_slot((!dt).then_some(t), &mut slot);
            input.slice_mut(s![i, d..d + e]).assign(&ndarray::ArrayView1::from(&slot));
            let row = class_rows[i];
            input
                .slice_mut(s![i, d + e..])
                .assign(&ndarray::ArrayView1::from(&self.embed.class_table[row * e..(row + 1) * e]));
        }

        let (out, cache) = self.trunk.forward_cached(input.view())?;
        let resid = out - &target;
        let loss = resid.iter().map(|r| r * r).sum::<f64>() / b as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss {loss} at step {}", opt.step_count + 1)));
        }
        let upstream = resid * (2.0 / b as f64);
        let (g_trunk, g_input) = self.trunk.backward(&cache, upstream.view())?;

        let mut g_class = vec![0.0; self.embed.class_table.len()];
        let mut g_null = vec![0.0; e];
        for i in 0..b {
            if drop_t[i] {
                for k in 0..e {
                    g_null[k] += g_input[[i, d + k]];
                }
            }
            let row = class_rows[i];
            for k in 0..e {
                g_class[row * e + k] += g_input[[i, d + e + k]];
            }
        }
        let [p_trunk, p_class, p_null] = self.param_segments_mut();
        opt.step_segments(&mut [p_trunk, p_class, p_null], &[&g_trunk, &g_class, &g_null])?;
        Ok(loss)
    }

    pub fn meta(&self, dropout: DropoutPolicy, step: u64) -> ModelMeta {
        ModelMeta {
            kind: MODEL_KIND.into(),
            arch: self.arch.clone(),
            schedule: self.schedule.kind,
            dropout,
            step,
            config_hash: String::new(),
            tool_version: String::new(),
        }
    }

    pub fn save(&self, path: &Path, meta: &ModelMeta) -> Result<()> {
        container::write_file(path, meta, &self.flat_params())
    }

    pub fn to_bytes(&self, meta: &ModelMeta) -> Result<Vec<u8>> {
        container::encode(meta, &self.flat_params())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, ModelMeta)> {
        let (meta, payload): (ModelMeta, Vec<f64>) = container::decode(bytes)?;
        Self::from_parts(meta, payload)
    }

    pub fn load(path: &Path) -> Result<(Self, ModelMeta)> {
        let (meta, payload): (ModelMeta, Vec<f64>) = container::read_file(path)?;
        Self::from_parts(meta, payload)
    }

    fn from_parts(meta: ModelMeta, payload: Vec<f64>) -> Result<(Self, ModelMeta)> {
        if meta.kind != MODEL_KIND {
            return Err(Error::Format(format!("expected a {MODEL_KIND} checkpoint, found {}", meta.kind)));
        }
        let mut model = VelocityModel::new(meta.arch.clone(), Schedule::new(meta.schedule), 0)?;
        model.set_flat_params(&payload)?;
        Ok((model, meta))
    }
}

/// Settings for [`train_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: crate::net::AdamWConfig,
    pub dropout: DropoutPolicy,
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 256,
            optimizer: crate::net::AdamWConfig::default(),
            dropout: DropoutPolicy::default(),
            ema_decay: 0.9999,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: VelocityModel,
    /// The same architecture carrying the EMA weights.
    pub ema: VelocityModel,
    /// Per-step pre-update losses.
    pub losses: Vec<f64>,
}

/// Train from scratch on fresh mixture draws each step. Initialization,
/// data and per-example noise all derive from `cfg.seed`.
pub fn train_model(
    data: &crate::oracle::MixtureSpec,
    arch: ModelArch,
    schedule: Schedule,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    data.validate()?;
    check_len(arch.state_dim, data.dim())?;
    if data.num_classes() > arch.num_classes {
        return Err(Error::Argument(format!(
            "dataset has {} classes, model {}",
            data.num_classes(),
            arch.num_classes
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Argument("batch_size must be positive".into()));
    }
    cfg.dropout.validate()?;
    let mut model = VelocityModel::new(arch, schedule, cfg.seed)?;
    let mut opt = OptimState::new(cfg.optimizer, model.num_params());
    let mut ema = crate::net::EmaState::new(cfg.ema_decay, &model.param_segments())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (x0, labels) = data.sample_with(&mut rng, cfg.batch_size);
        let loss = model.train_step(x0.view(), &labels, &cfg.dropout, &mut opt, &mut rng)?;
        ema.update(&model.param_segments())?;
        losses.push(loss);
        progress(step + 1, loss);
    }
    let mut ema_model = model.clone();
    for (dst, src) in ema_model.param_segments_mut().into_iter().zip(&ema.shadow) {
        dst.copy_from_slice(src);
    }
    Ok(TrainOutcome { model, ema: ema_model, losses })
}

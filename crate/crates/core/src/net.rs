//! Dense networks with hand-written reverse-mode gradients, AdamW and EMA.
//!
//! Parameters live in one flat buffer, layer by layer: the `out x in`
//! weight matrix in row-major order followed by the bias. The checkpoint
//! payload is exactly this buffer.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Identity,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_prime(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => silu(z),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => silu_prime(z),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

/// Per-layer values kept from the forward pass for the backward pass.
pub struct ForwardCache {
    /// Input to each layer (the network input first).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
}

impl DenseNet {
    /// `dims = [input, hidden.., output]`; hidden layers use `hidden`, the last layer is linear.
    pub fn zeros(dims: &[usize], hidden: Activation) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Argument(format!("invalid layer dims {dims:?}")));
        }
        let layers = dims.len() - 1;
        let activations = (0..layers)
            .map(|l| if l + 1 == layers { Activation::Identity } else { hidden })
            .collect();
        let count = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(DenseNet { dims: dims.to_vec(), activations, params: vec![0.0; count] })
    }

    /// Uniform `+-sqrt(6 / (fan_in + fan_out))` weights, zero biases.
    pub fn init(dims: &[usize], hidden: Activation, rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(dims, hidden)?;
        let mut off = 0;
        for l in 0..net.num_layers() {
            let (fan_in, fan_out) = (net.dims[l], net.dims[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut net.params[off..off + fan_in * fan_out] {
                *w = rng.random_range(-bound..bound);
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn seeded(dims: &[usize], hidden: Activation, seed: u64) -> Result<Self> {
        Self::init(dims, hidden, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_params(dims: &[usize], hidden: Activation, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(dims, hidden)?;
        check_len(net.params.len(), params.len())?;
        net.params = params;
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("at least two dims")
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn hidden_activation(&self) -> Activation {
        self.activations[0]
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let off: usize = self.dims[..=l].windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        (off, off + self.dims[l] * self.dims[l + 1])
    }

    fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let (w, _) = self.layer_offsets(l);
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        ArrayView2::from_shape((o, i), &self.params[w..w + o * i]).expect("layout")
    }

    fn bias(&self, l: usize) -> ArrayView1<'_, f64> {
        let (_, b) = self.layer_offsets(l);
        ArrayView1::from(&self.params[b..b + self.dims[l + 1]])
    }

    /// Batched forward pass, one row per example.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_len(self.input_dim(), x.ncols())?;
        let mut h = x.to_owned();
        for l in 0..self.num_layers() {
            let mut z = h.dot(&self.weight(l).t());
            z += &self.bias(l);
            let act = self.activations[l];
            if act != Activation::Identity {
                z.mapv_inplace(|v| act.apply(v));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        check_len(self.input_dim(), x.ncols())?;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut h = x.to_owned();
        for l in 0..self.num_layers() {
            let mut z = h.dot(&self.weight(l).t());
            z += &self.bias(l);
            let act = self.activations[l];
            let out = if act == Activation::Identity { z.clone() } else { z.mapv(|v| act.apply(v)) };
            inputs.push(h);
            pre.push(z);
            h = out;
        }
        Ok((h, ForwardCache { inputs, pre }))
    }

    /// Gradients of `sum_rows <upstream_row, output_row>` with respect to the
    /// parameters (accumulated over the batch) and to each input row.
    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView2<'_, f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        check_len(self.output_dim(), upstream.ncols())?;
        check_len(cache.inputs[0].nrows(), upstream.nrows())?;
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = upstream.to_owned();
        for l in (0..self.num_layers()).rev() {
            let act = self.activations[l];
            if act != Activation::Identity {
                delta.zip_mut_with(&cache.pre[l], |d, &z| *d *= act.derivative(z));
            }
            let gw = delta.t().dot(&cache.inputs[l]);
            let gb = delta.sum_axis(Axis(0));
            let (w, b) = self.layer_offsets(l);
            grads[w..w + gw.len()].copy_from_slice(gw.as_slice().expect("standard layout"));
            grads[b..b + gb.len()].copy_from_slice(gb.as_slice().expect("contiguous"));
            delta = delta.dot(&self.weight(l));
        }
        Ok((grads, delta))
    }

    /// Single-input forward pass.
    pub fn apply(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_len(self.input_dim(), input.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row");
        Ok(self.forward(x)?.into_raw_vec_and_offset().0)
    }

    /// Single-input gradients of `<upstream, apply(input)>`: `(param_grads, input_grad)`.
    pub fn grad(&self, input: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len(self.input_dim(), input.len())?;
        check_len(self.output_dim(), upstream.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row");
        let u = ArrayView2::from_shape((1, upstream.len()), upstream).expect("row");
        let (_, cache) = self.forward_cached(x)?;
        let (g, dx) = self.backward(&cache, u)?;
        Ok((g, dx.into_raw_vec_and_offset().0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// AdamW state over a list of parameter segments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step_count: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl OptimState {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        OptimState {
            config,
            step_count: 0,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.step_segments(&mut [params], &[grads])
    }

    /// One decoupled-weight-decay Adam update. Segments are treated as one
    /// concatenated parameter vector.
    pub fn step_segments(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        check_len(params.len(), grads.len())?;
        let total: usize = params.iter().map(|p| p.len()).sum();
        check_len(self.first_moment.len(), total)?;
        for (p, g) in params.iter().zip(grads) {
            check_len(p.len(), g.len())?;
        }
        if let Some((seg, i)) = grads
            .iter()
            .enumerate()
            .find_map(|(s, g)| g.iter().position(|v| !v.is_finite()).map(|i| (s, i)))
        {
            return Err(Error::NonFinite(format!(
                "gradient segment {seg} index {i} at optimizer step {}",
                self.step_count + 1
            )));
        }
        let c = self.config;
        self.step_count += 1;
        let k = self.step_count as i32;
        let bc1 = 1.0 - c.beta1.powi(k);
        let bc2 = 1.0 - c.beta2.powi(k);
        let shrink = 1.0 - c.lr * c.weight_decay;
        let mut idx = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            for (pi, &gi) in p.iter_mut().zip(g.iter()) {
                let m = &mut self.first_moment[idx];
                let v = &mut self.second_moment[idx];
                *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *pi = *pi * shrink - c.lr * m_hat / (v_hat.sqrt() + c.eps);
                idx += 1;
            }
        }
        Ok(())
    }

    pub fn reset_moments(&mut self) {
        self.first_moment.iter_mut().for_each(|m| *m = 0.0);
        self.second_moment.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Exponential moving average of parameter segments.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: Vec<Vec<f64>>,
}

impl EmaState {
    pub fn new(decay: f64, params: &[&[f64]]) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Argument(format!("EMA decay {decay} outside [0, 1]")));
        }
        Ok(EmaState { decay, shadow: params.iter().map(|p| p.to_vec()).collect() })
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`.
    pub fn update(&mut self, params: &[&[f64]]) -> Result<()> {
        check_len(self.shadow.len(), params.len())?;
        for (s, p) in self.shadow.iter().zip(params) {
            check_len(s.len(), p.len())?;
        }
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            for (a, &b) in s.iter_mut().zip(p.iter()) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
        Ok(())
    }
}

/// Row-wise helper for callers building batches by hand.
pub fn row_matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let cols = rows.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((rows.len(), cols));
    for (i, r) in rows.iter().enumerate() {
        check_len(cols, r.len())?;
        out.row_mut(i).assign(&Array1::from(r.clone()));
    }
    Ok(out)
}

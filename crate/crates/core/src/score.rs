//! Parametric score model.
//!
//! An MLP over one-hot token encodings that produces a `D×N` matrix per
//! configuration. Two output heads share the same trunk:
//!
//! - [`ScoreModel::forward`] applies a per-site softmax and returns
//!   row-stochastic conditionals (the masked-diffusion score);
//! - [`ScoreModel::forward_rates`] exponentiates the logits and returns
//!   unnormalized positive rate multipliers (the uniform-diffusion score,
//!   which approximates probability ratios and is all-ones at init).
//!
//! Parameters are stored as little-endian `f32` in one flat buffer (the
//! checkpoint unit); all forward/backward arithmetic is carried out in
//! `f64` so losses and weights accumulate at full precision. The reverse
//! pass is an explicit vector-Jacobian product at the model output, which is
//! sufficient for every objective in this crate because they are all
//! functions of forward outputs only.
//!
//! The activation is SiLU (`u·sigmoid(u)`); the final layer is
//! zero-initialized so a fresh model scores exactly uniform `1/N` rows
//! (softmax head) and exactly all-ones rates (exp head).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{conditional_logits, delta_energy, MaskedSeq, ModelKind, ModelSpec, TokenSeq};

/// Architecture descriptor; the parameter count is a deterministic function
/// of this struct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    /// Number of sites `D`.
    pub sites: usize,
    /// Vocabulary size `N`.
    pub vocab: usize,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    /// Append `(sin πt, cos πt)` features and require a time argument.
    pub time_conditioned: bool,
    /// Add analytically computed single-site conditional logits (softmax
    /// head) or a learned `σ(t)`-scaled log-ratio bias (rate head).
    pub preconditioned: bool,
}

impl Arch {
    pub fn new(spec: &ModelSpec, hidden: Vec<usize>) -> Self {
        Self {
            sites: spec.sites(),
            vocab: spec.n,
            hidden,
            time_conditioned: false,
            preconditioned: false,
        }
    }

    pub fn with_time(mut self) -> Self {
        self.time_conditioned = true;
        self
    }

    pub fn with_precondition(mut self) -> Self {
        self.preconditioned = true;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.sites * (self.vocab + 1) + if self.time_conditioned { 2 } else { 0 }
    }

    pub fn output_dim(&self) -> usize {
        self.sites * self.vocab
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim();
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim()));
        dims
    }

    /// σ-net (rate-head precondition scale): t ↦ scalar, hidden 32/32/32.
    fn sigma_dims(&self) -> Vec<(usize, usize)> {
        if self.preconditioned && self.time_conditioned {
            vec![(1, 32), (32, 32), (32, 32), (32, 1)]
        } else {
            Vec::new()
        }
    }
}

/// Offsets of one linear layer inside the flat parameter buffer.
/// Weights are input-major: `w[i * fan_out + o]`.
#[derive(Debug, Clone, Copy)]
struct LayerShape {
    fan_in: usize,
    fan_out: usize,
    w_off: usize,
    b_off: usize,
}

/// Shape record for the checkpoint header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Dense `D×N` matrix returned by the forward passes.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl ScoreMatrix {
    pub fn from_parts(data: Vec<f64>, rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix shape mismatch");
        Self { data, rows, cols }
    }

    pub fn row(&self, d: usize) -> &[f64] {
        &self.data[d * self.cols..(d + 1) * self.cols]
    }

    pub fn get(&self, d: usize, n: usize) -> f64 {
        self.data[d * self.cols + n]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Row-stochastic score source for the masked-diffusion sampler.
pub trait Score {
    /// `D×N` matrix whose row at each masked site is the conditional
    /// distribution used to unmask that site. Rows at unmasked sites carry
    /// no contract.
    fn score(&self, x: &MaskedSeq) -> ScoreMatrix;

    /// Single row of [`score`](Self::score); sources that can answer a row
    /// query cheaper than the full matrix override this.
    fn score_row(&self, x: &MaskedSeq, site: usize) -> Vec<f64> {
        self.score(x).row(site).to_vec()
    }
}

/// Gradient accumulation buffer matching the flat parameter layout, `f64`.
#[derive(Debug, Clone)]
pub struct GradBuffer {
    values: Vec<f64>,
}

impl GradBuffer {
    pub fn zeros(model: &ScoreModel) -> Self {
        Self { values: vec![0.0; model.param_count()] }
    }

    pub fn zero(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }
}

#[derive(Debug, Clone)]
pub struct ScoreModel {
    arch: Arch,
    spec: ModelSpec,
    params: Vec<f32>,
    main: Vec<LayerShape>,
    sigma: Vec<LayerShape>,
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn silu(u: f64) -> f64 {
    u * sigmoid(u)
}

fn silu_prime(u: f64) -> f64 {
    let s = sigmoid(u);
    s * (1.0 + u * (1.0 - s))
}

impl ScoreModel {
    /// Fresh model: hidden layers fan-in-scaled uniform, final layer zero.
    pub fn init(arch: Arch, spec: &ModelSpec, seed: u64) -> Result<Self> {
        if arch.sites != spec.sites() || arch.vocab != spec.n {
            return Err(Error::ShapeMismatch(format!(
                "arch is {}x{} but spec needs {}x{}",
                arch.sites,
                arch.vocab,
                spec.sites(),
                spec.n
            )));
        }
        if arch.preconditioned && spec.kind != ModelKind::Ising {
            return Err(Error::Unsupported(
                "preconditioning implements the Ising closed form only".into(),
            ));
        }
        let (main, sigma, total) = Self::layout(&arch);
        let mut params = vec![0.0f32; total];
        let mut rng = crate::rng::stream(seed, "init", 0);
        // Hidden layers get fan-in-scaled uniform weights; every final layer
        // stays zero so the initial score is exactly uniform.
        for (li, layer) in main.iter().enumerate() {
            if li + 1 < main.len() {
                let bound = 1.0 / (layer.fan_in as f64).sqrt();
                for k in 0..layer.fan_in * layer.fan_out {
                    params[layer.w_off + k] = (rng.random_range(-bound..bound)) as f32;
                }
            }
        }
        for (li, layer) in sigma.iter().enumerate() {
            if li + 1 < sigma.len() {
                let bound = 1.0 / (layer.fan_in as f64).sqrt();
                for k in 0..layer.fan_in * layer.fan_out {
                    params[layer.w_off + k] = (rng.random_range(-bound..bound)) as f32;
                }
            }
        }
        Ok(Self { arch, spec: *spec, params, main, sigma })
    }

    fn layout(arch: &Arch) -> (Vec<LayerShape>, Vec<LayerShape>, usize) {
        let mut off = 0;
        let mut place = |dims: &[(usize, usize)]| {
            let mut shapes = Vec::new();
            for &(fan_in, fan_out) in dims {
                let w_off = off;
                off += fan_in * fan_out;
                let b_off = off;
                off += fan_out;
                shapes.push(LayerShape { fan_in, fan_out, w_off, b_off });
            }
            shapes
        };
        let main = place(&arch.layer_dims());
        let sigma = place(&arch.sigma_dims());
        (main, sigma, off)
    }

    /// Rebuild a model from its flat parameter buffer (checkpoint loading).
    pub fn from_params(arch: Arch, spec: &ModelSpec, params: Vec<f32>) -> Result<Self> {
        if arch.sites != spec.sites() || arch.vocab != spec.n {
            return Err(Error::ShapeMismatch("arch does not match spec".into()));
        }
        let (main, sigma, total) = Self::layout(&arch);
        if params.len() != total {
            return Err(Error::ShapeMismatch(format!(
                "expected {total} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self { arch, spec: *spec, params, main, sigma })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn param(&self, index: usize) -> f32 {
        self.params[index]
    }

    pub fn set_param(&mut self, index: usize, value: f32) {
        self.params[index] = value;
    }

    /// Tensor names and shapes in flat-buffer order.
    pub fn tensors(&self) -> Vec<TensorInfo> {
        let mut infos = Vec::new();
        for (group, shapes) in [("net", &self.main), ("sigma", &self.sigma)] {
            for (li, s) in shapes.iter().enumerate() {
                infos.push(TensorInfo {
                    name: format!("{group}.{li}.weight"),
                    rows: s.fan_in,
                    cols: s.fan_out,
                });
                infos.push(TensorInfo { name: format!("{group}.{li}.bias"), rows: 1, cols: s.fan_out });
            }
        }
        infos
    }

    /// Active input feature indices for a configuration: one one-hot slot per
    /// site (mask slot 0, token `n` slot `n`), as (index, value) pairs,
    /// followed by the time features when enabled.
    fn features(&self, tokens: &[u8], t: Option<f64>) -> Vec<(usize, f64)> {
        let width = self.arch.vocab + 1;
        let mut feats: Vec<(usize, f64)> = tokens
            .iter()
            .enumerate()
            .map(|(d, &tok)| (d * width + tok as usize, 1.0))
            .collect();
        if let Some(t) = t {
            let base = self.arch.sites * width;
            feats.push((base, (std::f64::consts::PI * t).sin()));
            feats.push((base + 1, (std::f64::consts::PI * t).cos()));
        }
        feats
    }

    /// Trunk forward; returns pre-activations of every hidden layer plus the
    /// output logits.
    fn trunk(&self, feats: &[(usize, f64)]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut pre_acts = Vec::with_capacity(self.main.len() - 1);
        let mut current: Option<Vec<f64>> = None;
        for (li, layer) in self.main.iter().enumerate() {
            let mut out: Vec<f64> = self.params
                [layer.b_off..layer.b_off + layer.fan_out]
                .iter()
                .map(|&b| b as f64)
                .collect();
            match &current {
                None => {
                    for &(idx, v) in feats {
                        let row = &self.params[layer.w_off + idx * layer.fan_out
                            ..layer.w_off + (idx + 1) * layer.fan_out];
                        for (o, &w) in row.iter().enumerate() {
                            out[o] += v * w as f64;
                        }
                    }
                }
                Some(act) => {
                    for (i, &a) in act.iter().enumerate() {
                        let row = &self.params[layer.w_off + i * layer.fan_out
                            ..layer.w_off + (i + 1) * layer.fan_out];
                        for (o, &w) in row.iter().enumerate() {
                            out[o] += a * w as f64;
                        }
                    }
                }
            }
            if li + 1 < self.main.len() {
                let act: Vec<f64> = out.iter().map(|&u| silu(u)).collect();
                pre_acts.push(out);
                current = Some(act);
            } else {
                return (pre_acts, out);
            }
        }
        unreachable!("model has at least one layer")
    }

    fn check_time(&self, t: Option<f64>) -> Result<()> {
        match (self.arch.time_conditioned, t) {
            (false, Some(_)) => Err(Error::InvalidArgument(
                "time supplied to a non-time-conditioned model".into(),
            )),
            (true, None) => Err(Error::InvalidArgument(
                "time-conditioned model requires t".into(),
            )),
            (true, Some(t)) if !(0.0..=1.0).contains(&t) => Err(Error::InvalidArgument(
                format!("t={t} outside [0, 1]"),
            )),
            _ => Ok(()),
        }
    }

    /// Row-stochastic `D×N` score (softmax head).
    pub fn forward(&self, x: &MaskedSeq, t: Option<f64>) -> Result<ScoreMatrix> {
        self.check_time(t)?;
        let feats = self.features(x.tokens(), t);
        let (_, mut logits) = self.trunk(&feats);
        if self.arch.preconditioned && !self.arch.time_conditioned {
            self.add_conditional_bias(x, &mut logits);
        }
        let n = self.arch.vocab;
        for d in 0..self.arch.sites {
            let row = &mut logits[d * n..(d + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(ScoreMatrix { data: logits, rows: self.arch.sites, cols: n })
    }

    /// Parameter-free additive bias: closed-form single-site conditional
    /// logits at every masked site (masked neighbors contribute zero).
    fn add_conditional_bias(&self, x: &MaskedSeq, logits: &mut [f64]) {
        let n = self.arch.vocab;
        for d in x.masked_sites() {
            let bias = conditional_logits(&self.spec, x, d);
            for (k, &b) in bias.iter().enumerate() {
                logits[d * n + k] += b;
            }
        }
    }

    /// Positive unnormalized `D×N` rate multipliers (exp head), for the
    /// uniform-diffusion sampler. All-ones at init.
    pub fn forward_rates(&self, x: &TokenSeq, t: f64) -> Result<ScoreMatrix> {
        if !self.arch.time_conditioned {
            return Err(Error::InvalidArgument(
                "rate head requires a time-conditioned model".into(),
            ));
        }
        self.check_time(Some(t))?;
        let feats = self.features(x.tokens(), Some(t));
        let (_, mut logits) = self.trunk(&feats);
        if !self.sigma.is_empty() {
            let sigma_t = self.sigma_forward(t).1;
            let n = self.arch.vocab;
            for d in 0..self.arch.sites {
                for k in 0..n {
                    let log_ratio = -self.spec.beta
                        * delta_energy(&self.spec, x, d, (k + 1) as u8);
                    logits[d * n + k] += sigma_t * log_ratio;
                }
            }
        }
        let data: Vec<f64> = logits.into_iter().map(f64::exp).collect();
        Ok(ScoreMatrix { data, rows: self.arch.sites, cols: self.arch.vocab })
    }

    fn sigma_forward(&self, t: f64) -> (Vec<Vec<f64>>, f64) {
        let mut pre_acts = Vec::new();
        let mut current = vec![t];
        for (li, layer) in self.sigma.iter().enumerate() {
            let mut out: Vec<f64> = self.params
                [layer.b_off..layer.b_off + layer.fan_out]
                .iter()
                .map(|&b| b as f64)
                .collect();
            for (i, &a) in current.iter().enumerate() {
                let row = &self.params
                    [layer.w_off + i * layer.fan_out..layer.w_off + (i + 1) * layer.fan_out];
                for (o, &w) in row.iter().enumerate() {
                    out[o] += a * w as f64;
                }
            }
            if li + 1 < self.sigma.len() {
                current = out.iter().map(|&u| silu(u)).collect();
                pre_acts.push(out);
            } else {
                return (pre_acts, out[0]);
            }
        }
        unreachable!("sigma net has at least one layer")
    }

    /// Accumulate `∂(Σ_{d,n} adjoint_{d,n} · s(x)_{d,n}) / ∂θ` into `grads`,
    /// where `s` is the softmax head. The forward pass is replayed internally.
    pub fn backward(
        &self,
        x: &MaskedSeq,
        t: Option<f64>,
        adjoint: &[f64],
        grads: &mut GradBuffer,
    ) -> Result<()> {
        self.check_time(t)?;
        self.check_adjoint(adjoint, grads)?;
        let feats = self.features(x.tokens(), t);
        let (pre_acts, mut logits) = self.trunk(&feats);
        if self.arch.preconditioned && !self.arch.time_conditioned {
            self.add_conditional_bias(x, &mut logits);
        }
        // softmax rows and their VJP: dz_n = s_n (a_n - Σ_m a_m s_m)
        let n = self.arch.vocab;
        let mut dlogits = vec![0.0; logits.len()];
        for d in 0..self.arch.sites {
            let row = &logits[d * n..(d + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let s: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
            let a = &adjoint[d * n..(d + 1) * n];
            let dot: f64 = a.iter().zip(&s).map(|(&ai, &si)| ai * si).sum();
            for k in 0..n {
                dlogits[d * n + k] = s[k] * (a[k] - dot);
            }
        }
        self.trunk_backward(&feats, &pre_acts, &dlogits, grads);
        Ok(())
    }

    /// Same as [`backward`](Self::backward) for the exp head, including the
    /// σ-net gradient when rate preconditioning is enabled.
    pub fn backward_rates(
        &self,
        x: &TokenSeq,
        t: f64,
        adjoint: &[f64],
        grads: &mut GradBuffer,
    ) -> Result<()> {
        if !self.arch.time_conditioned {
            return Err(Error::InvalidArgument(
                "rate head requires a time-conditioned model".into(),
            ));
        }
        self.check_time(Some(t))?;
        self.check_adjoint(adjoint, grads)?;
        let feats = self.features(x.tokens(), Some(t));
        let (pre_acts, mut logits) = self.trunk(&feats);
        let n = self.arch.vocab;

        let mut sigma_cache = None;
        if !self.sigma.is_empty() {
            let (sigma_pre, sigma_t) = self.sigma_forward(t);
            for d in 0..self.arch.sites {
                for k in 0..n {
                    let log_ratio =
                        -self.spec.beta * delta_energy(&self.spec, x, d, (k + 1) as u8);
                    logits[d * n + k] += sigma_t * log_ratio;
                }
            }
            sigma_cache = Some(sigma_pre);
        }

        // s = exp(y): dy = a ⊙ s; dσ = Σ a s · log_ratio
        let mut dlogits = vec![0.0; logits.len()];
        let mut dsigma = 0.0;
        for d in 0..self.arch.sites {
            for k in 0..n {
                let s = logits[d * n + k].exp();
                let g = adjoint[d * n + k] * s;
                dlogits[d * n + k] = g;
                if sigma_cache.is_some() {
                    let log_ratio =
                        -self.spec.beta * delta_energy(&self.spec, x, d, (k + 1) as u8);
                    dsigma += g * log_ratio;
                }
            }
        }
        self.trunk_backward(&feats, &pre_acts, &dlogits, grads);
        if let Some(sigma_pre) = sigma_cache {
            self.sigma_backward(t, &sigma_pre, dsigma, grads);
        }
        Ok(())
    }

    fn check_adjoint(&self, adjoint: &[f64], grads: &GradBuffer) -> Result<()> {
        if adjoint.len() != self.arch.output_dim() {
            return Err(Error::ShapeMismatch(format!(
                "adjoint length {} != D*N = {}",
                adjoint.len(),
                self.arch.output_dim()
            )));
        }
        if grads.values.len() != self.params.len() {
            return Err(Error::ShapeMismatch("gradient buffer size mismatch".into()));
        }
        Ok(())
    }

    fn trunk_backward(
        &self,
        feats: &[(usize, f64)],
        pre_acts: &[Vec<f64>],
        dlogits: &[f64],
        grads: &mut GradBuffer,
    ) {
        let mut delta = dlogits.to_vec();
        for li in (0..self.main.len()).rev() {
            let layer = &self.main[li];
            // bias gradient
            for (o, &g) in delta.iter().enumerate() {
                grads.values[layer.b_off + o] += g;
            }
            if li == 0 {
                for &(idx, v) in feats {
                    let w_row = layer.w_off + idx * layer.fan_out;
                    for (o, &g) in delta.iter().enumerate() {
                        grads.values[w_row + o] += v * g;
                    }
                }
                return;
            }
            let act: Vec<f64> = pre_acts[li - 1].iter().map(|&u| silu(u)).collect();
            let mut prev_delta = vec![0.0; layer.fan_in];
            for i in 0..layer.fan_in {
                let w_row = &self.params
                    [layer.w_off + i * layer.fan_out..layer.w_off + (i + 1) * layer.fan_out];
                let mut acc = 0.0;
                let a = act[i];
                let w_grad =
                    &mut grads.values[layer.w_off + i * layer.fan_out..layer.w_off + (i + 1) * layer.fan_out];
                for (o, &g) in delta.iter().enumerate() {
                    w_grad[o] += a * g;
                    acc += w_row[o] as f64 * g;
                }
                prev_delta[i] = acc * silu_prime(pre_acts[li - 1][i]);
            }
            delta = prev_delta;
        }
    }

    fn sigma_backward(&self, t: f64, pre_acts: &[Vec<f64>], dsigma: f64, grads: &mut GradBuffer) {
        let mut delta = vec![dsigma];
        for li in (0..self.sigma.len()).rev() {
            let layer = &self.sigma[li];
            for (o, &g) in delta.iter().enumerate() {
                grads.values[layer.b_off + o] += g;
            }
            let inputs: Vec<f64> = if li == 0 {
                vec![t]
            } else {
                pre_acts[li - 1].iter().map(|&u| silu(u)).collect()
            };
            let mut prev_delta = vec![0.0; layer.fan_in];
            for i in 0..layer.fan_in {
                let w_row = &self.params
                    [layer.w_off + i * layer.fan_out..layer.w_off + (i + 1) * layer.fan_out];
                let mut acc = 0.0;
                let w_grad = &mut grads.values
                    [layer.w_off + i * layer.fan_out..layer.w_off + (i + 1) * layer.fan_out];
                for (o, &g) in delta.iter().enumerate() {
                    w_grad[o] += inputs[i] * g;
                    acc += w_row[o] as f64 * g;
                }
                prev_delta[i] = acc;
            }
            if li > 0 {
                for (i, v) in prev_delta.iter_mut().enumerate() {
                    *v *= silu_prime(pre_acts[li - 1][i]);
                }
            }
            delta = prev_delta;
        }
    }
}

impl Score for ScoreModel {
    fn score(&self, x: &MaskedSeq) -> ScoreMatrix {
        self.forward(x, None).expect("masked score on a time-conditioned model")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{softmax, MASK};
    use approx::assert_relative_eq;

    fn spec3() -> ModelSpec {
        ModelSpec::ising(3, 1.0, 0.1, 0.28).unwrap()
    }

    fn small_model(seed: u64) -> ScoreModel {
        let spec = spec3();
        ScoreModel::init(Arch::new(&spec, vec![16, 16]), &spec, seed).unwrap()
    }

    /// Fill the final layer with small pseudo-random values so gradients
    /// reach the hidden layers in finite-difference checks.
    fn randomize_all(model: &mut ScoreModel, seed: u64) {
        let mut rng = crate::rng::stream(seed, "test-randomize", 0);
        for k in 0..model.param_count() {
            let v = model.param(k);
            if v == 0.0 {
                model.set_param(k, (rng.random_range(-0.3..0.3)) as f32);
            }
        }
    }

    #[test]
    fn fresh_model_is_uniform() {
        let model = small_model(0);
        let x = MaskedSeq::fully_masked(9);
        let s = model.forward(&x, None).unwrap();
        for d in 0..9 {
            for n in 0..2 {
                assert_relative_eq!(s.get(d, n), 0.5);
            }
        }
    }

    #[test]
    fn same_seed_bit_identical_two_seeds_differ() {
        let a = small_model(1);
        let b = small_model(1);
        let c = small_model(2);
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn rows_sum_to_one_for_generic_params() {
        let mut model = small_model(3);
        randomize_all(&mut model, 3);
        let spec = spec3();
        let mut tokens = vec![2u8; 9];
        tokens[4] = MASK;
        tokens[7] = 1;
        let x = MaskedSeq::new(tokens, &spec).unwrap();
        let s = model.forward(&x, None).unwrap();
        for d in 0..9 {
            let sum: f64 = s.row(d).iter().sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-6);
            assert!(s.row(d).iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn time_argument_validation() {
        let model = small_model(4);
        let x = MaskedSeq::fully_masked(9);
        assert!(model.forward(&x, Some(0.5)).is_err());

        let spec = spec3();
        let timed =
            ScoreModel::init(Arch::new(&spec, vec![8]).with_time(), &spec, 0).unwrap();
        assert!(timed.forward(&x, None).is_err());
        assert!(timed.forward(&x, Some(1.5)).is_err());
        assert!(timed.forward(&x, Some(0.25)).is_ok());
    }

    #[test]
    fn precondition_fresh_model_reduces_to_closed_form() {
        let spec = spec3();
        let model =
            ScoreModel::init(Arch::new(&spec, vec![16]).with_precondition(), &spec, 0).unwrap();
        let mut tokens = vec![2u8; 9];
        tokens[4] = MASK;
        let x = MaskedSeq::new(tokens, &spec).unwrap();
        let s = model.forward(&x, None).unwrap();
        let expected = softmax(&conditional_logits(&spec, &x, 4));
        for n in 0..2 {
            assert_relative_eq!(s.get(4, n), expected[n], epsilon = 1e-12);
        }
    }

    #[test]
    fn precondition_fully_masked_no_field_contributes_nothing() {
        let spec = ModelSpec::ising(3, 1.0, 0.0, 0.28).unwrap();
        let model =
            ScoreModel::init(Arch::new(&spec, vec![16]).with_precondition(), &spec, 0).unwrap();
        let x = MaskedSeq::fully_masked(9);
        let s = model.forward(&x, None).unwrap();
        for d in 0..9 {
            assert_relative_eq!(s.get(d, 0), 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn precondition_rejected_for_potts() {
        let spec = ModelSpec::potts(3, 3, 1.0, 0.5).unwrap();
        let arch = Arch::new(&spec, vec![16]).with_precondition();
        assert!(ScoreModel::init(arch, &spec, 0).is_err());
    }

    #[test]
    fn precondition_shifts_nonzero_phi() {
        let spec = spec3();
        let mut plain =
            ScoreModel::init(Arch::new(&spec, vec![16]), &spec, 5).unwrap();
        randomize_all(&mut plain, 5);
        let pre = {
            let arch = Arch::new(&spec, vec![16]).with_precondition();
            let mut m = ScoreModel::init(arch, &spec, 5).unwrap();
            for k in 0..m.param_count() {
                m.set_param(k, plain.param(k));
            }
            m
        };
        let mut tokens = vec![2u8; 9];
        tokens[4] = MASK;
        let x = MaskedSeq::new(tokens, &spec).unwrap();
        let a = plain.forward(&x, None).unwrap();
        let b = pre.forward(&x, None).unwrap();
        assert!((a.get(4, 0) - b.get(4, 0)).abs() > 1e-6);
    }

    #[test]
    fn zero_adjoint_leaves_grads_unchanged() {
        let model = small_model(6);
        let mut grads = GradBuffer::zeros(&model);
        let x = MaskedSeq::fully_masked(9);
        model.backward(&x, None, &vec![0.0; 18], &mut grads).unwrap();
        assert!(grads.values().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn adjoint_shape_mismatch_is_error() {
        let model = small_model(6);
        let mut grads = GradBuffer::zeros(&model);
        let x = MaskedSeq::fully_masked(9);
        assert!(model.backward(&x, None, &vec![0.0; 7], &mut grads).is_err());
    }

    #[test]
    fn adjoint_linearity() {
        let mut model = small_model(7);
        randomize_all(&mut model, 7);
        let x = MaskedSeq::fully_masked(9);
        let mut adjoint = vec![0.0; 18];
        adjoint[5] = 1.0;
        let mut g1 = GradBuffer::zeros(&model);
        model.backward(&x, None, &adjoint, &mut g1).unwrap();
        adjoint[5] = 2.5;
        let mut g2 = GradBuffer::zeros(&model);
        model.backward(&x, None, &adjoint, &mut g2).unwrap();
        for (&a, &b) in g1.values().iter().zip(g2.values()) {
            assert_relative_eq!(b, 2.5 * a, epsilon = 1e-12);
        }
    }

    /// Central finite difference of `f` w.r.t. parameter `k`, using the
    /// realized (f32-quantized) parameter displacement as the denominator.
    fn fd_grad<F: FnMut(&ScoreModel) -> f64>(
        model: &mut ScoreModel,
        k: usize,
        step: f32,
        mut f: F,
    ) -> f64 {
        let orig = model.param(k);
        model.set_param(k, orig + step);
        let fp = f(model);
        let xp = model.param(k) as f64;
        model.set_param(k, orig - step);
        let fm = f(model);
        let xm = model.param(k) as f64;
        model.set_param(k, orig);
        (fp - fm) / (xp - xm)
    }

    #[test]
    fn gradient_matches_finite_differences_softmax_head() {
        let mut model = small_model(8);
        randomize_all(&mut model, 8);
        let spec = spec3();
        let mut tokens = vec![MASK; 9];
        tokens[2] = 2;
        tokens[6] = 1;
        let x = MaskedSeq::new(tokens, &spec).unwrap();
        let mut rng = crate::rng::stream(8, "test-adjoint", 0);
        let adjoint: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut grads = GradBuffer::zeros(&model);
        model.backward(&x, None, &adjoint, &mut grads).unwrap();

        let objective = |m: &ScoreModel| {
            let s = m.forward(&x, None).unwrap();
            adjoint.iter().zip(s.data()).map(|(a, v)| a * v).sum::<f64>()
        };
        let picks = [0usize, 33, 170, 301, model.param_count() - 2];
        for &k in &picks {
            let fd = fd_grad(&mut model, k, 1e-4, objective);
            let an = grads.values()[k];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < 1e-4,
                "param {k}: fd={fd:.10e} analytic={an:.10e}"
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences_rate_head() {
        let spec = spec3();
        let arch = Arch::new(&spec, vec![16]).with_time().with_precondition();
        let mut model = ScoreModel::init(arch, &spec, 9).unwrap();
        randomize_all(&mut model, 9);
        let x = TokenSeq::new(vec![1, 2, 2, 1, 1, 2, 1, 2, 1], &spec).unwrap();
        let t = 0.37;
        let mut rng = crate::rng::stream(9, "test-adjoint-rate", 0);
        let adjoint: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut grads = GradBuffer::zeros(&model);
        model.backward_rates(&x, t, &adjoint, &mut grads).unwrap();

        let objective = |m: &ScoreModel| {
            let s = m.forward_rates(&x, t).unwrap();
            adjoint.iter().zip(s.data()).map(|(a, v)| a * v).sum::<f64>()
        };
        // include σ-net parameters (they sit at the end of the buffer)
        let picks = [
            0usize,
            57,
            200,
            model.param_count() - 1,
            model.param_count() - 40,
            model.param_count() - 700,
        ];
        for &k in &picks {
            let fd = fd_grad(&mut model, k, 1e-4, objective);
            let an = grads.values()[k];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < 1e-4,
                "param {k}: fd={fd:.10e} analytic={an:.10e}"
            );
        }
    }

    #[test]
    fn rate_head_is_all_ones_at_init() {
        let spec = spec3();
        let arch = Arch::new(&spec, vec![16]).with_time().with_precondition();
        let model = ScoreModel::init(arch, &spec, 10).unwrap();
        let x = TokenSeq::constant(2, &spec).unwrap();
        let s = model.forward_rates(&x, 0.5).unwrap();
        for &v in s.data() {
            assert_relative_eq!(v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn encoding_is_sitewise_local() {
        let spec = spec3();
        let model = small_model(11);
        let mut a = vec![2u8; 9];
        a[0] = MASK;
        let fa = model.features(&a, None);
        let mut b = a.clone();
        b[3] = 1;
        let fb = model.features(&b, None);
        for d in 0..9 {
            if d != 3 {
                assert_eq!(fa[d], fb[d], "site {d} block changed");
            }
        }
        let _ = spec;
    }

    #[test]
    fn param_count_deterministic_from_arch() {
        let spec = spec3();
        let arch = Arch::new(&spec, vec![16, 16]);
        let m1 = ScoreModel::init(arch.clone(), &spec, 1).unwrap();
        let m2 = ScoreModel::init(arch, &spec, 99).unwrap();
        assert_eq!(m1.param_count(), m2.param_count());
        // 27 inputs ->16 ->16 -> 18 outputs, plus biases
        let expected = 27 * 16 + 16 + 16 * 16 + 16 + 16 * 18 + 18;
        assert_eq!(m1.param_count(), expected);
    }
}

//! Learning objectives.
//!
//! Each objective returns its scalar value together with an adjoint plan:
//! one `(state, adjoint matrix)` entry per forward call required by the
//! gradient, to be fed to the score model's reverse pass. Trajectories
//! always come from the current detached model, so recorded weights play
//! the detached role (coefficients, baselines, softmax weights) while the
//! θ-tracked weight is recomputed from the model during replay; at the
//! sampling parameters the two coincide.
//!
//! Path-weight conventions: `W_i` denotes the trajectory log-weight, with
//! `∂W_i/∂s = -1/s` at each chosen score entry. The detached coefficient
//! `c_i = ∂F/∂W_i` is
//!
//! - RERF: `(W_i - b)/B` (baseline `b` configurable),
//! - LV:   `2(W_i - W̄)/(B-1)` (detached batch mean; the centering term's
//!   gradient vanishes identically since `Σ(W_i - W̄) = 0`),
//! - CE:   `ω_i = softmax(W)_i` (the in-batch normalizing-constant
//!   estimate).

use rand::Rng;

use crate::error::{Error, Result};
use crate::exact::logsumexp;
use crate::lattice::{MaskedSeq, TokenSeq};
use crate::mdns::{remask, replay, TrajectoryRecord, WeightedSample};
use crate::score::ScoreModel;

/// Weight function `w(λ)` of the denoising cross-entropy losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WScheme {
    /// `w(λ) = 1`: bounded per-replicate variance (default).
    Unit,
    /// `w(λ) = 1/λ`: the any-order autoregressive weighting.
    InverseLambda,
}

impl WScheme {
    fn eval(self, lambda: f64) -> f64 {
        match self {
            WScheme::Unit => 1.0,
            WScheme::InverseLambda => 1.0 / lambda,
        }
    }
}

/// Baseline constant subtracted from the detached weight in RERF.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerfBaseline {
    /// Batch mean of the detached weights (default control variate).
    BatchMean,
    /// The in-batch log-normalizing-constant estimate.
    LogZEstimate,
    /// No baseline.
    Zero,
}

/// One reverse-pass invocation: the input state and the dense `D×N` adjoint.
#[derive(Debug, Clone)]
pub enum AdjointTerm {
    /// Differentiates the row-stochastic (softmax) head.
    Softmax { state: MaskedSeq, adjoint: Vec<f64> },
    /// Differentiates the positive rate (exp) head at time `t`.
    Rates { state: TokenSeq, t: f64, adjoint: Vec<f64> },
}

/// Scalar loss value plus the adjoint plan that realizes its gradient.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub terms: Vec<AdjointTerm>,
}

/// `log((1/B) Σ e^{W_i})`: in-batch estimate of the log-normalizing constant.
pub fn estimate_log_z(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::InvalidArgument("empty weight batch".into()));
    }
    Ok(logsumexp(weights) - (weights.len() as f64).ln())
}

/// Median of [`estimate_log_z`] over `groups` contiguous groups.
pub fn median_log_z(weights: &[f64], groups: usize) -> Result<f64> {
    if groups == 0 || weights.len() % groups != 0 {
        return Err(Error::InvalidArgument(format!(
            "batch of {} not divisible into {groups} groups",
            weights.len()
        )));
    }
    let size = weights.len() / groups;
    let mut estimates: Vec<f64> = weights
        .chunks(size)
        .map(|chunk| estimate_log_z(chunk))
        .collect::<Result<_>>()?;
    estimates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = estimates.len() / 2;
    Ok(if estimates.len() % 2 == 1 {
        estimates[mid]
    } else {
        0.5 * (estimates[mid - 1] + estimates[mid])
    })
}

/// Normalized `softmax(W)`, the self-normalized importance weights.
pub fn softmax_weights(weights: &[f64]) -> Vec<f64> {
    let m = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = weights.iter().map(|&w| (w - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Unbiased sample variance of the weights: the LV objective value given a
/// weight batch (value-only form, used with oracle scores).
pub fn lv_value(weights: &[f64]) -> Result<f64> {
    if weights.len() < 2 {
        return Err(Error::InvalidArgument("LV requires a batch of at least 2".into()));
    }
    let b = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / b;
    Ok(weights.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / (b - 1.0))
}

#[derive(Debug, Clone, Copy)]
enum PathObjective {
    Rerf(RerfBaseline),
    Lv,
    Ce,
}

/// Detached per-trajectory coefficients `c_i = ∂F/∂W_i` and the baseline
/// required to recombine the value from tracked weights.
fn path_coeffs(objective: PathObjective, weights: &[f64]) -> Result<Vec<f64>> {
    let b = weights.len() as f64;
    match objective {
        PathObjective::Rerf(baseline) => {
            let base = match baseline {
                RerfBaseline::BatchMean => weights.iter().sum::<f64>() / b,
                RerfBaseline::LogZEstimate => estimate_log_z(weights)?,
                RerfBaseline::Zero => 0.0,
            };
            Ok(weights.iter().map(|w| (w - base) / b).collect())
        }
        PathObjective::Lv => {
            if weights.len() < 2 {
                return Err(Error::InvalidArgument(
                    "LV requires a batch of at least 2".into(),
                ));
            }
            let mean = weights.iter().sum::<f64>() / b;
            Ok(weights.iter().map(|w| 2.0 * (w - mean) / (b - 1.0)).collect())
        }
        PathObjective::Ce => Ok(softmax_weights(weights)),
    }
}

/// Shared path-loss evaluation: replays every trajectory through the model,
/// recomputes the tracked weights, and emits one sparse-in-content adjoint
/// matrix per step with entry `-c_i / s` at the chosen (position, token).
fn path_loss(
    objective: PathObjective,
    batch: &[TrajectoryRecord],
    model: &ScoreModel,
) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory batch".into()));
    }
    let detached: Vec<f64> = batch.iter().map(|r| r.log_weight).collect();
    let coeffs = path_coeffs(objective, &detached)?;
    let n = model.arch().vocab;
    let out_dim = model.arch().output_dim();
    let log_inv_n = -(n as f64).ln();

    let mut terms = Vec::with_capacity(batch.len() * model.arch().sites);
    let mut tracked = Vec::with_capacity(batch.len());
    for (i, rec) in batch.iter().enumerate() {
        let mut path_term = 0.0;
        let mut err: Option<Error> = None;
        replay(rec, |state, pos, tok| {
            if err.is_some() {
                return;
            }
            match model.forward(state, None) {
                Ok(s) => {
                    let sv = s.get(pos, (tok - 1) as usize);
                    path_term += log_inv_n - sv.ln();
                    let mut adjoint = vec![0.0; out_dim];
                    adjoint[pos * n + (tok - 1) as usize] = -coeffs[i] / sv;
                    terms.push(AdjointTerm::Softmax { state: state.clone(), adjoint });
                }
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        tracked.push(rec.reward + path_term);
    }

    let value = match objective {
        PathObjective::Rerf(baseline) => {
            let b = detached.len() as f64;
            let base = match baseline {
                RerfBaseline::BatchMean => detached.iter().sum::<f64>() / b,
                RerfBaseline::LogZEstimate => estimate_log_z(&detached)?,
                RerfBaseline::Zero => 0.0,
            };
            detached
                .iter()
                .zip(&tracked)
                .map(|(&wd, &wt)| (wd - base) * wt)
                .sum::<f64>()
                / b
        }
        PathObjective::Lv => lv_value(&tracked)?,
        PathObjective::Ce => softmax_weights(&detached)
            .iter()
            .zip(&tracked)
            .map(|(&o, &wt)| o * wt)
            .sum(),
    };
    if !value.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite loss value {value}")));
    }
    Ok(LossOutput { value, terms })
}

/// REINFORCE-estimated relative entropy: `E[(W^ū - b) · W^u]`.
pub fn rerf(
    batch: &[TrajectoryRecord],
    model: &ScoreModel,
    baseline: RerfBaseline,
) -> Result<LossOutput> {
    path_loss(PathObjective::Rerf(baseline), batch, model)
}

/// Log-variance of the path weights over the detached sampling measure.
pub fn lv(batch: &[TrajectoryRecord], model: &ScoreModel) -> Result<LossOutput> {
    path_loss(PathObjective::Lv, batch, model)
}

/// Importance-weighted cross-entropy: `Σ softmax(W)_i · W^u_i`.
pub fn ce(batch: &[TrajectoryRecord], model: &ScoreModel) -> Result<LossOutput> {
    path_loss(PathObjective::Ce, batch, model)
}

/// Weighted denoising cross-entropy over remasked finals.
///
/// For each buffer sample `i` and replicate: draw `λ ~ Unif(0,1)`, remask the
/// final, and accumulate `ω_i · w(λ)/R · Σ_{d masked} -log s(x̃)_{d, final^d}`
/// with matching adjoint entries `-ω_i w(λ)/(R s)`.
pub fn wdce<R: Rng>(
    buffer: &[WeightedSample],
    model: &ScoreModel,
    replicates: usize,
    scheme: WScheme,
    rng: &mut R,
) -> Result<LossOutput> {
    if buffer.is_empty() {
        return Err(Error::InvalidArgument("empty replay buffer".into()));
    }
    if replicates == 0 {
        return Err(Error::InvalidArgument("replicates must be >= 1".into()));
    }
    let omegas = softmax_weights(&buffer.iter().map(|s| s.log_weight).collect::<Vec<_>>());
    let n = model.arch().vocab;
    let out_dim = model.arch().output_dim();

    let mut value = 0.0;
    let mut terms = Vec::new();
    for (i, sample) in buffer.iter().enumerate() {
        for _ in 0..replicates {
            let lambda: f64 = rng.random();
            let masked = remask(&sample.final_state, lambda, rng)?;
            if masked.masked_count() == 0 {
                continue;
            }
            let coeff = omegas[i] * scheme.eval(lambda) / replicates as f64;
            let s = model.forward(&masked, None)?;
            let mut adjoint = vec![0.0; out_dim];
            for d in masked.masked_sites() {
                let tok = (sample.final_state.tokens()[d] - 1) as usize;
                let sv = s.get(d, tok);
                value += coeff * (-sv.ln());
                adjoint[d * n + tok] = -coeff / sv;
            }
            terms.push(AdjointTerm::Softmax { state: masked, adjoint });
        }
    }
    if !value.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite loss value {value}")));
    }
    Ok(LossOutput { value, terms })
}

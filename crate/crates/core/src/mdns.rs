//! Masked-diffusion trajectory sampling.
//!
//! Trajectories are simulated with the exact random-order autoregressive
//! scheme: draw a uniform permutation of the sites, then unmask one position
//! per step with the token drawn from the score row at that position. The
//! noise schedule never appears numerically, so the path weight
//!
//! `W = Σ_d log((1/N) / s(state)_{pos_d, tok_d}) + r(final)`
//!
//! is computed without discretization error. A trajectory is stored as
//! `(perm, final, W)`; intermediate masked states are recomputed on demand
//! by replaying the permutation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exact::ExactTable;
use crate::lattice::{reward, MaskedSeq, ModelSpec, TokenSeq, MASK};
use crate::score::{Score, ScoreMatrix};

/// Compact trajectory: the trajectory is fully determined by the unmasking
/// permutation and the final sample. The final reward is cached so losses
/// can recombine the θ-tracked weight without access to the reward function.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub perm: Vec<u32>,
    pub final_state: TokenSeq,
    pub log_weight: f64,
    pub reward: f64,
}

impl TrajectoryRecord {
    pub fn to_weighted(&self) -> WeightedSample {
        WeightedSample { final_state: self.final_state.clone(), log_weight: self.log_weight }
    }
}

/// Replay-buffer entry: a final sample with its accumulated log-weight.
#[derive(Debug, Clone)]
pub struct WeightedSample {
    pub final_state: TokenSeq,
    pub log_weight: f64,
}

fn uniform_permutation<R: Rng>(d: usize, rng: &mut R) -> Vec<u32> {
    let mut perm: Vec<u32> = (0..d as u32).collect();
    for i in (1..d).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

fn sample_row<R: Rng>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (n, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return n;
        }
    }
    row.len() - 1
}

/// Sample a batch of trajectories from the masked-diffusion process driven
/// by `score`, accumulating the exact path weights against `spec`'s reward.
///
/// Trajectory `i` draws from the stream `(seed, "mdns-traj", stream_offset + i)`.
pub fn sample_trajectories<S: Score>(
    score: &S,
    spec: &ModelSpec,
    batch: usize,
    seed: u64,
    stream_offset: u64,
) -> Result<Vec<TrajectoryRecord>> {
    sample_trajectories_with(
        score,
        spec.sites(),
        spec.n,
        |x| reward(spec, x),
        batch,
        seed,
        stream_offset,
    )
}

/// Generic form of [`sample_trajectories`] over an arbitrary reward on
/// `{1..N}^D`; the lattice-free entry point used by tests and estimators.
pub fn sample_trajectories_with<S: Score, F: Fn(&TokenSeq) -> f64>(
    score: &S,
    sites: usize,
    vocab: usize,
    reward_fn: F,
    batch: usize,
    seed: u64,
    stream_offset: u64,
) -> Result<Vec<TrajectoryRecord>> {
    let mut out = Vec::with_capacity(batch);
    for i in 0..batch {
        let mut rng = crate::rng::stream(seed, "mdns-traj", stream_offset + i as u64);
        out.push(sample_one(score, sites, vocab, &reward_fn, &mut rng, i)?);
    }
    Ok(out)
}

fn sample_one<S: Score, F: Fn(&TokenSeq) -> f64>(
    score: &S,
    sites: usize,
    vocab: usize,
    reward_fn: &F,
    rng: &mut ChaCha8Rng,
    index: usize,
) -> Result<TrajectoryRecord> {
    let perm = uniform_permutation(sites, rng);
    let mut state = MaskedSeq::fully_masked(sites);
    let log_inv_n = -(vocab as f64).ln();
    let mut w = 0.0;
    for &pos in &perm {
        let pos = pos as usize;
        let row = score.score_row(&state, pos);
        let tok = sample_row(&row, rng);
        w += log_inv_n - row[tok].ln();
        state.set(pos, tok as u8 + 1);
    }
    let final_state = state.to_token_seq()?;
    let reward = reward_fn(&final_state);
    w += reward;
    if !w.is_finite() {
        return Err(Error::NonFiniteWeight { index });
    }
    Ok(TrajectoryRecord { perm, final_state, log_weight: w, reward })
}

/// Visit the `D` steps of a trajectory in order: the masked state before the
/// step, the position unmasked, and the token chosen.
pub fn replay<F: FnMut(&MaskedSeq, usize, u8)>(record: &TrajectoryRecord, mut f: F) {
    let mut state = MaskedSeq::fully_masked(record.perm.len());
    for &pos in &record.perm {
        let pos = pos as usize;
        let tok = record.final_state.tokens()[pos];
        f(&state, pos, tok);
        state.set(pos, tok);
    }
}

/// Materialized form of [`replay`].
pub fn reconstruct_states(record: &TrajectoryRecord) -> Vec<(MaskedSeq, usize, u8)> {
    let mut steps = Vec::with_capacity(record.perm.len());
    replay(record, |state, pos, tok| steps.push((state.clone(), pos, tok)));
    steps
}

/// Recompute `Σ_d log((1/N)/s)` over the reconstructed states with the given
/// score, i.e. `log_weight - r(final)` when the score matches the sampler's.
pub fn recompute_path_term<S: Score>(score: &S, vocab: usize, record: &TrajectoryRecord) -> f64 {
    let log_inv_n = -(vocab as f64).ln();
    let mut w = 0.0;
    replay(record, |state, pos, tok| {
        let row = score.score_row(state, pos);
        w += log_inv_n - row[(tok - 1) as usize].ln();
    });
    w
}

/// Independently replace each entry of `x` with the mask token with
/// probability `lambda`.
pub fn remask<R: Rng>(x: &TokenSeq, lambda: f64, rng: &mut R) -> Result<MaskedSeq> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "masking probability {lambda} outside [0, 1]"
        )));
    }
    let tokens = x
        .tokens()
        .iter()
        .map(|&t| if rng.random::<f64>() < lambda { MASK } else { t })
        .collect();
    Ok(MaskedSeq::new_unchecked(tokens))
}

/// Score source that queries the exact-enumeration oracle for the true
/// conditional marginals; the optimal score. Rows at unmasked sites are
/// uniform placeholders. Panics if a conditional exceeds the completion cap.
pub struct ExactConditionalScore<'a> {
    pub table: &'a ExactTable,
}

impl Score for ExactConditionalScore<'_> {
    fn score(&self, x: &MaskedSeq) -> ScoreMatrix {
        let spec = self.table.spec();
        let n = spec.n;
        let mut data = vec![1.0 / n as f64; spec.sites() * n];
        for d in x.masked_sites() {
            let p = self
                .table
                .exact_conditional(x, d)
                .expect("exact conditional within completion cap");
            data[d * n..(d + 1) * n].copy_from_slice(&p);
        }
        ScoreMatrix::from_parts(data, spec.sites(), n)
    }

    fn score_row(&self, x: &MaskedSeq, site: usize) -> Vec<f64> {
        if x.is_masked(site) {
            self.table
                .exact_conditional(x, site)
                .expect("exact conditional within completion cap")
        } else {
            vec![1.0 / self.table.spec().n as f64; self.table.spec().n]
        }
    }
}

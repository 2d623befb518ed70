//! Brute-force enumeration oracle.
//!
//! Enumerates all `N^D` configurations to obtain the exact partition
//! function, the exact distribution `π`, exact conditional marginals given a
//! partially masked configuration, the exact value function, and divergences
//! of empirical histograms against `π`.
//!
//! States are indexed lexicographically base `N` over sites in row-major
//! order with site 0 most significant: `index = Σ_d (x^d - 1) · N^{D-1-d}`.
//! All log-domain arithmetic is 64-bit.

use rand::Rng;

use crate::error::{Error, Result};
use crate::lattice::{energy, reward, ModelSpec, MaskedSeq, TokenSeq, MASK};

/// Default cap on the number of enumerated states (`N^D`).
pub const DEFAULT_STATE_CAP: u64 = 1 << 24;
/// Default cap on the number of enumerated completions of a masked state.
pub const DEFAULT_COMPLETION_CAP: u64 = 1 << 20;

/// Numerically stable `log Σ e^{v}` (subtracts the max before exponentiating).
pub fn logsumexp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let sum: f64 = values.iter().map(|&v| (v - m).exp()).sum();
    m + sum.ln()
}

/// Exact enumeration of a lattice target distribution.
#[derive(Debug, Clone)]
pub struct ExactTable {
    spec: ModelSpec,
    /// `-β H(x)` per lexicographically indexed state.
    log_weights: Vec<f64>,
    log_z: f64,
}

/// `Σ_d (x^d - 1) · N^{D-1-d}` for an unmasked configuration.
pub fn state_index(spec: &ModelSpec, x: &TokenSeq) -> usize {
    let n = spec.n;
    x.tokens().iter().fold(0usize, |acc, &t| acc * n + (t - 1) as usize)
}

/// Inverse of [`state_index`].
pub fn state_from_index(spec: &ModelSpec, mut index: usize) -> TokenSeq {
    let d = spec.sites();
    let n = spec.n;
    let mut tokens = vec![0u8; d];
    for site in (0..d).rev() {
        tokens[site] = (index % n) as u8 + 1;
        index /= n;
    }
    TokenSeq::from_raw(tokens)
}

fn checked_pow(n: usize, d: usize, cap: u64, completions: bool) -> Result<usize> {
    let mut count: u128 = 1;
    for _ in 0..d {
        count *= n as u128;
        if count > cap as u128 {
            return Err(if completions {
                Error::CompletionCapExceeded { required: (n as u128).pow(d as u32), cap }
            } else {
                Error::StateCapExceeded { required: (n as u128).pow(d as u32), cap }
            });
        }
    }
    Ok(count as usize)
}

pub fn build_exact(spec: &ModelSpec) -> Result<ExactTable> {
    build_exact_with_cap(spec, DEFAULT_STATE_CAP)
}

pub fn build_exact_with_cap(spec: &ModelSpec, cap: u64) -> Result<ExactTable> {
    let count = checked_pow(spec.n, spec.sites(), cap, false)?;
    let mut log_weights = Vec::with_capacity(count);
    let mut x = TokenSeq::from_raw(vec![1u8; spec.sites()]);
    for index in 0..count {
        if index > 0 {
            advance(&mut x, spec.n);
        }
        log_weights.push(-spec.beta * energy(spec, &x));
    }
    let log_z = logsumexp(&log_weights);
    Ok(ExactTable { spec: *spec, log_weights, log_z })
}

/// Odometer increment in lexicographic order (last site fastest).
fn advance(x: &mut TokenSeq, n: usize) {
    let d = x.len();
    for site in (0..d).rev() {
        let t = x.tokens()[site];
        if (t as usize) < n {
            x.set(site, t + 1);
            return;
        }
        x.set(site, 1);
    }
}

impl ExactTable {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    pub fn state_count(&self) -> usize {
        self.log_weights.len()
    }

    /// `log π(x)` by state index.
    pub fn log_prob_index(&self, index: usize) -> f64 {
        self.log_weights[index] - self.log_z
    }

    /// `π(x)`.
    pub fn prob(&self, x: &TokenSeq) -> f64 {
        self.log_prob_index(state_index(&self.spec, x)).exp()
    }

    /// Iterator over `(state index, -βH)` pairs, for external verification.
    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Exact conditional marginal `P_{X~π}(X^site = n | X^um = x^um)`.
    ///
    /// Sums `e^{-βH}` over all completions of the masked entries, grouped by
    /// the token placed at `site`.
    pub fn exact_conditional(&self, x: &MaskedSeq, site: usize) -> Result<Vec<f64>> {
        self.exact_conditional_with_cap(x, site, DEFAULT_COMPLETION_CAP)
    }

    pub fn exact_conditional_with_cap(
        &self,
        x: &MaskedSeq,
        site: usize,
        cap: u64,
    ) -> Result<Vec<f64>> {
        if !x.is_masked(site) {
            return Err(Error::InvalidArgument(format!(
                "site {site} is not masked"
            )));
        }
        let n = self.spec.n;
        let masked: Vec<usize> = x.masked_sites().collect();
        checked_pow(n, masked.len(), cap, true)?;

        // Per-token streaming logsumexp accumulators.
        let mut max = vec![f64::NEG_INFINITY; n];
        let mut acc = vec![0.0f64; n];
        self.for_each_completion(x, &masked, |full| {
            let lw = -self.spec.beta * energy(&self.spec, full);
            let tok = (full.tokens()[site] - 1) as usize;
            if lw > max[tok] {
                acc[tok] = acc[tok] * (max[tok] - lw).exp() + 1.0;
                max[tok] = lw;
            } else {
                acc[tok] += (lw - max[tok]).exp();
            }
        });
        let logs: Vec<f64> = (0..n)
            .map(|tok| if acc[tok] > 0.0 { max[tok] + acc[tok].ln() } else { f64::NEG_INFINITY })
            .collect();
        let total = logsumexp(&logs);
        Ok(logs.into_iter().map(|lw| (lw - total).exp()).collect())
    }

    /// Value function `V(x)`: `e^{V(x)} = N^{-#masked} Σ_{completions} e^{r}`.
    ///
    /// Fully masked input gives `log Z`; fully unmasked gives `r(x)`.
    pub fn exact_value(&self, x: &MaskedSeq) -> Result<f64> {
        self.exact_value_with_cap(x, DEFAULT_COMPLETION_CAP)
    }

    pub fn exact_value_with_cap(&self, x: &MaskedSeq, cap: u64) -> Result<f64> {
        let masked: Vec<usize> = x.masked_sites().collect();
        checked_pow(self.spec.n, masked.len(), cap, true)?;
        let mut max = f64::NEG_INFINITY;
        let mut acc = 0.0f64;
        self.for_each_completion(x, &masked, |full| {
            let r = reward(&self.spec, full);
            if r > max {
                acc = acc * (max - r).exp() + 1.0;
                max = r;
            } else {
                acc += (r - max).exp();
            }
        });
        Ok(max + acc.ln() - masked.len() as f64 * (self.spec.n as f64).ln())
    }

    fn for_each_completion<F: FnMut(&TokenSeq)>(
        &self,
        x: &MaskedSeq,
        masked: &[usize],
        mut f: F,
    ) {
        let n = self.spec.n as u8;
        let mut full = TokenSeq::from_raw(
            x.tokens().iter().map(|&t| if t == MASK { 1 } else { t }).collect(),
        );
        let m = masked.len();
        if m == 0 {
            f(&full);
            return;
        }
        let mut digits = vec![1u8; m];
        loop {
            f(&full);
            // odometer over the masked positions, last fastest
            let mut k = m;
            loop {
                if k == 0 {
                    return;
                }
                k -= 1;
                if digits[k] < n {
                    digits[k] += 1;
                    full.set(masked[k], digits[k]);
                    break;
                }
                digits[k] = 1;
                full.set(masked[k], 1);
            }
        }
    }

    /// i.i.d. samples from `π` by inverse CDF.
    pub fn sample<R: Rng>(&self, rng: &mut R, count: usize) -> Vec<TokenSeq> {
        let cdf = self.cdf();
        (0..count)
            .map(|_| {
                let u: f64 = rng.random();
                let idx = match cdf.binary_search_by(|p| p.partial_cmp(&u).unwrap()) {
                    Ok(i) => i + 1,
                    Err(i) => i,
                };
                state_from_index(&self.spec, idx.min(self.log_weights.len() - 1))
            })
            .collect()
    }

    fn cdf(&self) -> Vec<f64> {
        let mut cdf = Vec::with_capacity(self.log_weights.len());
        let mut acc = 0.0;
        for &lw in &self.log_weights {
            acc += (lw - self.log_z).exp();
            cdf.push(acc);
        }
        cdf
    }
}

/// Histogram over the unmasked state space, indexed like the exact table.
#[derive(Debug, Clone)]
pub struct Histogram {
    counts: Vec<u64>,
    total: u64,
}

impl Histogram {
    pub fn new(state_count: usize) -> Self {
        Self { counts: vec![0; state_count], total: 0 }
    }

    pub fn from_samples(spec: &ModelSpec, state_count: usize, samples: &[TokenSeq]) -> Self {
        let mut h = Self::new(state_count);
        for x in samples {
            h.add_index(state_index(spec, x));
        }
        h
    }

    pub fn add_index(&mut self, index: usize) {
        self.counts[index] += 1;
        self.total += 1;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }
}

/// TV distance, KL divergence, and χ² divergence of `p̂ = counts/total`
/// against the exact `π`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Divergences {
    pub tv: f64,
    pub kl: f64,
    pub chi2: f64,
}

pub fn divergences(counts: &Histogram, table: &ExactTable) -> Result<Divergences> {
    if counts.total == 0 {
        return Err(Error::InvalidArgument("empty histogram".into()));
    }
    if counts.counts.len() != table.state_count() {
        return Err(Error::ShapeMismatch(format!(
            "histogram over {} states vs table over {}",
            counts.counts.len(),
            table.state_count()
        )));
    }
    let total = counts.total as f64;
    let mut tv = 0.0;
    let mut kl = 0.0;
    let mut chi2 = 0.0;
    for (i, &c) in counts.counts.iter().enumerate() {
        let p_hat = c as f64 / total;
        let pi = table.log_prob_index(i).exp();
        tv += (p_hat - pi).abs();
        if p_hat > 0.0 {
            kl += p_hat * (p_hat.ln() - table.log_prob_index(i));
        }
        chi2 += (p_hat - pi) * (p_hat - pi) / pi;
    }
    Ok(Divergences { tv: 0.5 * tv, kl, chi2 })
}

//! Target distributions on periodic square lattices.
//!
//! Supports the Ising model (`H(x) = -J Σ_{i~j} s_i s_j - h Σ_i s_i`) and the
//! q-state Potts model (`H(x) = -J Σ_{i~j} 1[x_i = x_j]`), both with periodic
//! boundary conditions in the horizontal and vertical directions. Sites are
//! stored row-major; tokens are 1-based with `MASK = 0` as the mask sentinel.
//!
//! Edge counting enumerates the right and down neighbor of every site, which
//! yields `2L²` edge slots. For `L >= 3` these are exactly the distinct
//! undirected edges; for `L = 2` each geometric pair arises twice through the
//! wrap-around and is counted twice, matching the literal adjacency sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mask sentinel, outside the token range `1..=N`.
pub const MASK: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ising,
    Potts,
}

/// Definition of a lattice target distribution `π ∝ e^{-β H}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Lattice side; the configuration has `D = L²` sites.
    #[serde(rename = "L")]
    pub l: usize,
    /// Vocabulary size: 2 for Ising, q for Potts.
    #[serde(rename = "N")]
    pub n: usize,
    /// Interaction strength.
    #[serde(rename = "J")]
    pub j: f64,
    /// External field (Ising only; must be 0 for Potts).
    pub h: f64,
    /// Inverse temperature.
    pub beta: f64,
}

impl ModelSpec {
    pub fn ising(l: usize, j: f64, h: f64, beta: f64) -> Result<Self> {
        Self::new(ModelKind::Ising, l, 2, j, h, beta)
    }

    pub fn potts(l: usize, q: usize, j: f64, beta: f64) -> Result<Self> {
        Self::new(ModelKind::Potts, l, q, j, 0.0, beta)
    }

    pub fn new(kind: ModelKind, l: usize, n: usize, j: f64, h: f64, beta: f64) -> Result<Self> {
        if l < 2 {
            return Err(Error::InvalidSpec(format!(
                "lattice side L={l} is degenerate (self-adjacent sites); L >= 2 required"
            )));
        }
        if n < 2 {
            return Err(Error::InvalidSpec(format!("vocabulary size N={n} < 2")));
        }
        if kind == ModelKind::Ising && n != 2 {
            return Err(Error::InvalidSpec(format!("Ising requires N=2, got {n}")));
        }
        if kind == ModelKind::Potts && h != 0.0 {
            return Err(Error::InvalidSpec(format!(
                "Potts model does not define an external field; h={h} must be 0"
            )));
        }
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidSpec(format!("beta={beta} must be positive and finite")));
        }
        if !j.is_finite() || !h.is_finite() {
            return Err(Error::InvalidSpec("J and h must be finite".into()));
        }
        Ok(Self { kind, l, n, j, h, beta })
    }

    /// Number of sites `D = L²`.
    pub fn sites(&self) -> usize {
        self.l * self.l
    }

    /// Same target at a different inverse temperature (warm-up phases).
    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        Self::new(self.kind, self.l, self.n, self.j, self.h, beta)
    }

    /// The 4 neighbors of `site` (up, down, left, right) with wrap-around.
    /// At `L = 2` opposite directions coincide; the duplicates are kept so
    /// neighbor multiplicity matches the edge counting of [`energy`].
    pub fn neighbors(&self, site: usize) -> [usize; 4] {
        let l = self.l;
        let (row, col) = (site / l, site % l);
        [
            ((row + l - 1) % l) * l + col,
            ((row + 1) % l) * l + col,
            row * l + (col + l - 1) % l,
            row * l + (col + 1) % l,
        ]
    }
}

/// A fully unmasked configuration: `D` tokens, each in `1..=N`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<u8>);

impl TokenSeq {
    pub fn new(tokens: Vec<u8>, spec: &ModelSpec) -> Result<Self> {
        if tokens.len() != spec.sites() {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} does not match D={}",
                tokens.len(),
                spec.sites()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t < 1 || t as usize > spec.n) {
            return Err(Error::InvalidArgument(format!(
                "token {t} outside 1..={}",
                spec.n
            )));
        }
        Ok(Self(tokens))
    }

    /// All sites set to the same token.
    pub fn constant(token: u8, spec: &ModelSpec) -> Result<Self> {
        Self::new(vec![token; spec.sites()], spec)
    }

    pub(crate) fn from_raw(tokens: Vec<u8>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn set(&mut self, site: usize, token: u8) {
        self.0[site] = token;
    }
}

/// A configuration that may contain mask sentinels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskedSeq(Vec<u8>);

impl MaskedSeq {
    pub fn new(tokens: Vec<u8>, spec: &ModelSpec) -> Result<Self> {
        if tokens.len() != spec.sites() {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} does not match D={}",
                tokens.len(),
                spec.sites()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize > spec.n) {
            return Err(Error::InvalidArgument(format!(
                "token {t} outside mask/1..={}",
                spec.n
            )));
        }
        Ok(Self(tokens))
    }

    pub fn fully_masked(sites: usize) -> Self {
        Self(vec![MASK; sites])
    }

    /// Internal constructor for callers that uphold the range invariant.
    pub(crate) fn new_unchecked(tokens: Vec<u8>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_masked(&self, site: usize) -> bool {
        self.0[site] == MASK
    }

    pub fn masked_sites(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &t)| t == MASK).map(|(d, _)| d)
    }

    pub fn masked_count(&self) -> usize {
        self.0.iter().filter(|&&t| t == MASK).count()
    }

    pub fn set(&mut self, site: usize, token: u8) {
        self.0[site] = token;
    }

    /// Interpret a fully unmasked sequence as a `TokenSeq`.
    pub fn to_token_seq(&self) -> Result<TokenSeq> {
        if self.0.iter().any(|&t| t == MASK) {
            return Err(Error::InvalidArgument(
                "sequence still contains mask tokens".into(),
            ));
        }
        Ok(TokenSeq(self.0.clone()))
    }
}

impl From<TokenSeq> for MaskedSeq {
    fn from(x: TokenSeq) -> Self {
        Self(x.0)
    }
}

impl From<&TokenSeq> for MaskedSeq {
    fn from(x: &TokenSeq) -> Self {
        Self(x.0.clone())
    }
}

fn spin(token: u8) -> f64 {
    // token 1 ↔ spin -1, token 2 ↔ spin +1
    (2 * token as i32 - 3) as f64
}

/// Energy `H(x)` with each of the `2L²` edge slots counted once.
pub fn energy(spec: &ModelSpec, x: &TokenSeq) -> f64 {
    assert_eq!(x.len(), spec.sites(), "sequence length mismatch");
    let l = spec.l;
    let t = x.tokens();
    let mut pair = 0.0;
    let mut field = 0.0;
    for row in 0..l {
        for col in 0..l {
            let site = row * l + col;
            let right = row * l + (col + 1) % l;
            let down = ((row + 1) % l) * l + col;
            match spec.kind {
                ModelKind::Ising => {
                    let s = spin(t[site]);
                    pair += s * (spin(t[right]) + spin(t[down]));
                    field += s;
                }
                ModelKind::Potts => {
                    pair += (t[site] == t[right]) as u32 as f64
                        + (t[site] == t[down]) as u32 as f64;
                }
            }
        }
    }
    -spec.j * pair - spec.h * field
}

/// `H(x^{site←new_token}) - H(x)` in O(1) via the 4 neighbors.
pub fn delta_energy(spec: &ModelSpec, x: &TokenSeq, site: usize, new_token: u8) -> f64 {
    assert!(site < spec.sites(), "site out of range");
    assert!(new_token >= 1 && new_token as usize <= spec.n, "token out of range");
    let old = x.tokens()[site];
    if old == new_token {
        return 0.0;
    }
    let nbrs = spec.neighbors(site);
    match spec.kind {
        ModelKind::Ising => {
            let nbr_sum: f64 = nbrs.iter().map(|&j| spin(x.tokens()[j])).sum();
            let ds = spin(new_token) - spin(old);
            -spec.j * ds * nbr_sum - spec.h * ds
        }
        ModelKind::Potts => {
            let mut dpair = 0.0;
            for &j in &nbrs {
                let nj = x.tokens()[j];
                dpair += (new_token == nj) as u32 as f64 - (old == nj) as u32 as f64;
            }
            -spec.j * dpair
        }
    }
}

/// Reward `r(x) = -β H(x) + D log N`, so that `E_{p_unif} e^r = Z` exactly.
pub fn reward(spec: &ModelSpec, x: &TokenSeq) -> f64 {
    -spec.beta * energy(spec, x) + spec.sites() as f64 * (spec.n as f64).ln()
}

/// Unnormalized logits of the single-site conditional `π(x^site = n | neighbors)`,
/// with masked neighbors contributing zero to every class.
///
/// Ising: `l_{±1} = ±(βJ Σ_{unmasked nbrs} s_j + βh)`. Potts: each unmasked
/// neighbor adds `βJ` to the logit of its own color.
pub fn conditional_logits(spec: &ModelSpec, x: &MaskedSeq, site: usize) -> Vec<f64> {
    assert!(site < spec.sites(), "site out of range");
    let nbrs = spec.neighbors(site);
    match spec.kind {
        ModelKind::Ising => {
            let field: f64 = nbrs
                .iter()
                .filter(|&&j| !x.is_masked(j))
                .map(|&j| spin(x.tokens()[j]))
                .sum();
            let a = spec.beta * (spec.j * field + spec.h);
            vec![-a, a]
        }
        ModelKind::Potts => {
            let mut logits = vec![0.0; spec.n];
            for &j in &nbrs {
                let t = x.tokens()[j];
                if t != MASK {
                    logits[(t - 1) as usize] += spec.beta * spec.j;
                }
            }
            logits
        }
    }
}

/// Softmax of a logit vector (stable).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn ising4(h: f64) -> ModelSpec {
        ModelSpec::ising(4, 1.0, h, 0.28).unwrap()
    }

    #[test]
    fn rejects_degenerate_lattice() {
        assert!(ModelSpec::ising(1, 1.0, 0.0, 0.28).is_err());
    }

    #[test]
    fn rejects_potts_with_field() {
        assert!(ModelSpec::new(ModelKind::Potts, 3, 3, 1.0, 0.1, 1.0).is_err());
    }

    #[test]
    fn rejects_nonpositive_beta() {
        assert!(ModelSpec::ising(3, 1.0, 0.0, 0.0).is_err());
        assert!(ModelSpec::ising(3, 1.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn all_up_energy() {
        let spec = ising4(0.0);
        let x = TokenSeq::constant(2, &spec).unwrap();
        assert_relative_eq!(energy(&spec, &x), -32.0);
        let spec = ising4(0.1);
        assert_relative_eq!(energy(&spec, &x), -33.6, epsilon = 1e-12);
    }

    #[test]
    fn potts_all_same_energy() {
        let spec = ModelSpec::potts(3, 3, 1.0, 1.0).unwrap();
        let x = TokenSeq::constant(1, &spec).unwrap();
        assert_relative_eq!(energy(&spec, &x), -18.0);
    }

    #[test]
    fn delta_energy_all_up_flip() {
        let spec = ising4(0.0);
        let x = TokenSeq::constant(2, &spec).unwrap();
        for site in 0..spec.sites() {
            assert_relative_eq!(delta_energy(&spec, &x, site, 1), 8.0);
        }
    }

    #[test]
    fn delta_energy_identity() {
        let spec = ising4(0.1);
        let x = TokenSeq::constant(2, &spec).unwrap();
        assert_eq!(delta_energy(&spec, &x, 5, 2), 0.0);
    }

    #[test]
    fn delta_energy_matches_recomputation() {
        let mut rng = crate::rng::stream(11, "test-delta", 0);
        for kind in [ModelKind::Ising, ModelKind::Potts] {
            let spec = match kind {
                ModelKind::Ising => ModelSpec::ising(3, 1.3, -0.2, 0.7).unwrap(),
                ModelKind::Potts => ModelSpec::potts(3, 4, 0.8, 0.5).unwrap(),
            };
            for _ in 0..200 {
                let tokens: Vec<u8> =
                    (0..spec.sites()).map(|_| rng.random_range(1..=spec.n as u8)).collect();
                let x = TokenSeq::new(tokens, &spec).unwrap();
                let site = rng.random_range(0..spec.sites());
                let tok = rng.random_range(1..=spec.n as u8);
                let mut y = x.clone();
                y.set(site, tok);
                assert_relative_eq!(
                    delta_energy(&spec, &x, site, tok),
                    energy(&spec, &y) - energy(&spec, &x),
                    epsilon = 1e-10
                );
            }
        }
    }

    #[test]
    fn delta_energy_matches_recomputation_l2() {
        // L=2 has doubled wrap-around edges; the neighbor multiset must agree
        // with the edge-slot counting.
        let spec = ModelSpec::ising(2, 1.0, 0.3, 0.5).unwrap();
        let mut rng = crate::rng::stream(11, "test-delta-l2", 0);
        for _ in 0..100 {
            let tokens: Vec<u8> = (0..4).map(|_| rng.random_range(1..=2)).collect();
            let x = TokenSeq::new(tokens, &spec).unwrap();
            let site = rng.random_range(0..4);
            let tok = rng.random_range(1..=2);
            let mut y = x.clone();
            y.set(site, tok);
            assert_relative_eq!(
                delta_energy(&spec, &x, site, tok),
                energy(&spec, &y) - energy(&spec, &x),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn reward_all_up() {
        let spec = ising4(0.0);
        let x = TokenSeq::constant(2, &spec).unwrap();
        let expected = 0.28 * 32.0 + 16.0 * 2.0_f64.ln();
        assert_relative_eq!(reward(&spec, &x), expected, epsilon = 1e-12);
    }

    #[test]
    fn reward_differences_track_energy() {
        let spec = ModelSpec::potts(3, 3, 1.0, 0.5).unwrap();
        let mut rng = crate::rng::stream(12, "test-reward", 0);
        for _ in 0..50 {
            let xa: Vec<u8> = (0..9).map(|_| rng.random_range(1..=3)).collect();
            let xb: Vec<u8> = (0..9).map(|_| rng.random_range(1..=3)).collect();
            let a = TokenSeq::new(xa, &spec).unwrap();
            let b = TokenSeq::new(xb, &spec).unwrap();
            assert_relative_eq!(
                reward(&spec, &a) - reward(&spec, &b),
                -spec.beta * (energy(&spec, &a) - energy(&spec, &b)),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn energy_translation_invariance_and_global_flip() {
        let spec = ModelSpec::ising(4, 1.0, 0.0, 0.44).unwrap();
        let mut rng = crate::rng::stream(13, "test-sym", 0);
        for _ in 0..50 {
            let tokens: Vec<u8> = (0..16).map(|_| rng.random_range(1..=2)).collect();
            let x = TokenSeq::new(tokens.clone(), &spec).unwrap();
            let e = energy(&spec, &x);

            // cyclic row shift
            let mut shifted = vec![0u8; 16];
            for row in 0..4 {
                for col in 0..4 {
                    shifted[((row + 1) % 4) * 4 + col] = tokens[row * 4 + col];
                }
            }
            let xs = TokenSeq::new(shifted, &spec).unwrap();
            assert_relative_eq!(energy(&spec, &xs), e, epsilon = 1e-12);

            // cyclic column shift
            let mut cshift = vec![0u8; 16];
            for row in 0..4 {
                for col in 0..4 {
                    cshift[row * 4 + (col + 1) % 4] = tokens[row * 4 + col];
                }
            }
            let xc = TokenSeq::new(cshift, &spec).unwrap();
            assert_relative_eq!(energy(&spec, &xc), e, epsilon = 1e-12);

            // global spin flip at h = 0
            let flipped: Vec<u8> = tokens.iter().map(|&t| 3 - t).collect();
            let xf = TokenSeq::new(flipped, &spec).unwrap();
            assert_relative_eq!(energy(&spec, &xf), e, epsilon = 1e-12);
        }
    }

    #[test]
    fn neighbor_relation_symmetric_and_degree_four() {
        for l in [2usize, 3, 4, 5] {
            let spec = ModelSpec::ising(l, 1.0, 0.0, 1.0).unwrap();
            for site in 0..spec.sites() {
                let nbrs = spec.neighbors(site);
                assert_eq!(nbrs.len(), 4);
                for &j in &nbrs {
                    let count_back =
                        spec.neighbors(j).iter().filter(|&&k| k == site).count();
                    let count_fwd = nbrs.iter().filter(|&&k| k == j).count();
                    assert_eq!(count_back, count_fwd, "L={l} site={site} nbr={j}");
                }
            }
        }
    }

    #[test]
    fn conditional_logits_all_masked_is_uniform() {
        let spec = ising4(0.0);
        let x = MaskedSeq::fully_masked(16);
        let logits = conditional_logits(&spec, &x, 5);
        assert_eq!(logits, vec![0.0, 0.0]);
        assert_eq!(softmax(&logits), vec![0.5, 0.5]);
    }

    #[test]
    fn conditional_logits_all_up_neighbors() {
        let spec = ising4(0.0);
        let x: MaskedSeq = (&TokenSeq::constant(2, &spec).unwrap()).into();
        let mut x = x;
        x.set(5, MASK);
        let p = softmax(&conditional_logits(&spec, &x, 5));
        let expected = (1.12f64).exp() / ((1.12f64).exp() + (-1.12f64).exp());
        assert_relative_eq!(p[1], expected, epsilon = 1e-12);
        assert_relative_eq!(expected, 0.9037, epsilon = 1e-4);
    }

    #[test]
    fn conditional_logits_balanced_neighbors_cancel() {
        let spec = ising4(0.0);
        // site 5 has neighbors 1, 9, 4, 6: make two up, two down
        let mut tokens = vec![2u8; 16];
        tokens[1] = 1;
        tokens[4] = 1;
        tokens[5] = MASK;
        let x = MaskedSeq::new(tokens, &spec).unwrap();
        let p = softmax(&conditional_logits(&spec, &x, 5));
        assert_relative_eq!(p[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = ising4(0.1);
        let s = serde_json::to_string(&spec).unwrap();
        assert!(s.contains("\"kind\":\"ising\""));
        assert!(s.contains("\"L\":4"));
        assert!(s.contains("\"N\":2"));
        let back: ModelSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, spec);
    }
}

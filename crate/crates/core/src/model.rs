//! Domain types shared by every module.

use std::collections::BTreeMap;
use std::fmt;
use std::io;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance on `Σ_k ρ_k = 1`.
pub const RHO_SUM_TOL: f64 = 1e-12;

/// The set of features a client observes, as sorted 0-based indices into
/// `[0, dim)`. The missing set is the complement.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeaturePattern {
    dim: usize,
    observed: Vec<usize>,
}

impl FeaturePattern {
    /// Build from 0-based indices. Indices may come in any order but must be
    /// distinct and `< dim`.
    pub fn new(dim: usize, observed: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut observed: Vec<usize> = observed.into_iter().collect();
        observed.sort_unstable();
        if let Some(w) = observed.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidPattern(format!("duplicate index {}", w[0] + 1)));
        }
        if let Some(&j) = observed.iter().find(|&&j| j >= dim) {
            return Err(Error::InvalidPattern(format!(
                "index {} outside [1, {dim}]",
                j + 1
            )));
        }
        Ok(FeaturePattern { dim, observed })
    }

    /// Build from 1-based indices, as written in configuration files.
    pub fn from_one_based(dim: usize, observed: &[usize]) -> Result<Self> {
        if observed.contains(&0) {
            return Err(Error::InvalidPattern(
                "feature indices are 1-based; got 0".into(),
            ));
        }
        Self::new(dim, observed.iter().map(|j| j - 1))
    }

    pub fn from_mask(mask: &[bool]) -> Self {
        FeaturePattern {
            dim: mask.len(),
            observed: (0..mask.len()).filter(|&j| mask[j]).collect(),
        }
    }

    pub fn full(dim: usize) -> Self {
        FeaturePattern {
            dim,
            observed: (0..dim).collect(),
        }
    }

    pub fn empty(dim: usize) -> Self {
        FeaturePattern {
            dim,
            observed: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub fn missing(&self) -> Vec<usize> {
        let mask = self.mask();
        (0..self.dim).filter(|&j| !mask[j]).collect()
    }

    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.observed.len() == self.dim
    }

    pub fn contains(&self, j: usize) -> bool {
        self.observed.binary_search(&j).is_ok()
    }

    /// Bitmask view (`true` = observed).
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.dim];
        for &j in &self.observed {
            m[j] = true;
        }
        m
    }

    pub fn one_based(&self) -> Vec<usize> {
        self.observed.iter().map(|j| j + 1).collect()
    }

    /// Packed bitmask, 64 features per word, feature `j` at bit `j % 64` of
    /// word `j / 64`.
    pub fn mask_words(&self) -> Vec<u64> {
        let mut words = vec![0u64; self.dim.div_ceil(64)];
        for &j in &self.observed {
            words[j / 64] |= 1u64 << (j % 64);
        }
        words
    }

    /// Single-float identifier of the pattern. Exact bitmask for `dim <= 52`,
    /// otherwise a 52-bit FNV-1a digest of the mask words.
    pub fn tag(&self) -> f64 {
        let words = self.mask_words();
        if self.dim <= 52 {
            return words.first().copied().unwrap_or(0) as f64;
        }
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for w in words {
            for b in w.to_le_bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
            }
        }
        (h & ((1u64 << 52) - 1)) as f64
    }

    pub fn is_subset_of(&self, other: &FeaturePattern) -> bool {
        self.dim == other.dim && self.observed.iter().all(|&j| other.contains(j))
    }
}

impl fmt::Display for FeaturePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner: Vec<String> = self.one_based().iter().map(|j| j.to_string()).collect();
        write!(f, "{{{}}}", inner.join(","))
    }
}

/// Restrict a `dim`-vector to the observed coordinates of `pattern`.
pub fn crop_vector(v: &DVector<f64>, pattern: &FeaturePattern) -> Result<DVector<f64>> {
    if v.len() != pattern.dim() {
        return Err(Error::DimensionMismatch {
            expected: pattern.dim(),
            got: v.len(),
        });
    }
    Ok(linalg::subvector(v, pattern.observed()))
}

/// Restrict a `dim × dim` matrix to `rows.observed × cols.observed`.
pub fn crop_matrix(
    a: &DMatrix<f64>,
    rows: &FeaturePattern,
    cols: &FeaturePattern,
) -> Result<DMatrix<f64>> {
    for p in [rows, cols] {
        if a.nrows() != p.dim() || a.ncols() != p.dim() {
            return Err(Error::DimensionMismatch {
                expected: p.dim(),
                got: a.nrows().max(a.ncols()),
            });
        }
    }
    Ok(linalg::submatrix(a, rows.observed(), cols.observed()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientSpec {
    pub id: usize,
    pub pattern: FeaturePattern,
    /// `P(H = id)`.
    pub rho: f64,
}

impl ClientSpec {
    pub fn new(id: usize, pattern: FeaturePattern, rho: f64) -> Self {
        ClientSpec { id, pattern, rho }
    }
}

/// A validated set of clients: distinct ids, a common dimension, and
/// proportions in `(0, 1]` summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Federation {
    dim: usize,
    clients: Vec<ClientSpec>,
}

impl Federation {
    pub fn new(mut clients: Vec<ClientSpec>) -> Result<Self> {
        let first = clients
            .first()
            .ok_or_else(|| Error::param("clients", "at least one client is required"))?;
        let dim = first.pattern.dim();
        clients.sort_by_key(|c| c.id);
        if let Some(w) = clients.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::param("clients.id", format!("duplicate id {}", w[0].id)));
        }
        for c in &clients {
            if c.pattern.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: c.pattern.dim(),
                });
            }
            if !(c.rho > 0.0 && c.rho <= 1.0) {
                return Err(Error::param(
                    "clients.rho",
                    format!("client {} has rho = {} outside (0, 1]", c.id, c.rho),
                ));
            }
        }
        let total: f64 = clients.iter().map(|c| c.rho).sum();
        if (total - 1.0).abs() > RHO_SUM_TOL {
            return Err(Error::ProportionsDoNotSumToOne(total));
        }
        Ok(Federation { dim, clients })
    }

    /// Clients `0..patterns.len()` with uniform proportions.
    pub fn uniform(patterns: Vec<FeaturePattern>) -> Result<Self> {
        let k = patterns.len();
        Self::with_rho(patterns, &vec![1.0 / k as f64; k])
    }

    pub fn with_rho(patterns: Vec<FeaturePattern>, rho: &[f64]) -> Result<Self> {
        if patterns.len() != rho.len() {
            return Err(Error::DimensionMismatch {
                expected: patterns.len(),
                got: rho.len(),
            });
        }
        Self::new(
            patterns
                .into_iter()
                .zip(rho)
                .enumerate()
                .map(|(id, (p, &r))| ClientSpec::new(id, p, r))
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn clients(&self) -> &[ClientSpec] {
        &self.clients
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClientSpec> {
        self.clients.iter()
    }

    pub fn get(&self, id: usize) -> Result<&ClientSpec> {
        self.clients
            .binary_search_by_key(&id, |c| c.id)
            .map(|i| &self.clients[i])
            .map_err(|_| Error::UnknownClient(id))
    }

    pub fn position(&self, id: usize) -> Result<usize> {
        self.clients
            .binary_search_by_key(&id, |c| c.id)
            .map_err(|_| Error::UnknownClient(id))
    }

    pub fn rhos(&self) -> Vec<f64> {
        self.clients.iter().map(|c| c.rho).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSample {
    pub client_id: usize,
    /// Observed coordinates, in ascending feature order.
    pub x_obs: Vec<f64>,
    pub y: f64,
}

/// Training data as seen by the federation: client index, observed
/// coordinates, outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    federation: Federation,
    samples: Vec<MaskedSample>,
}

impl Dataset {
    pub fn new(federation: Federation, samples: Vec<MaskedSample>) -> Result<Self> {
        for s in &samples {
            let c = federation.get(s.client_id)?;
            if s.x_obs.len() != c.pattern.len() {
                return Err(Error::DimensionMismatch {
                    expected: c.pattern.len(),
                    got: s.x_obs.len(),
                });
            }
        }
        Ok(Dataset {
            federation,
            samples,
        })
    }

    pub fn federation(&self) -> &Federation {
        &self.federation
    }

    pub fn samples(&self) -> &[MaskedSample] {
        &self.samples
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.federation.dim()
    }

    /// Sample indices grouped by client, in federation order.
    pub fn indices_by_client(&self) -> Vec<(usize, Vec<usize>)> {
        let mut groups: BTreeMap<usize, Vec<usize>> =
            self.federation.iter().map(|c| (c.id, Vec::new())).collect();
        for (i, s) in self.samples.iter().enumerate() {
            groups.get_mut(&s.client_id).expect("validated").push(i);
        }
        groups.into_iter().collect()
    }

    pub fn client_samples(&self, id: usize) -> impl Iterator<Item = &MaskedSample> {
        self.samples.iter().filter(move |s| s.client_id == id)
    }

    pub fn client_counts(&self) -> Vec<usize> {
        self.indices_by_client()
            .into_iter()
            .map(|(_, v)| v.len())
            .collect()
    }

    /// `n_k / n` per client, in federation order.
    pub fn empirical_rho(&self) -> Vec<f64> {
        let n = self.n().max(1) as f64;
        self.client_counts()
            .into_iter()
            .map(|c| c as f64 / n)
            .collect()
    }

    /// Observed coordinates of sample `i` embedded in `dim` with zeros.
    pub fn zero_filled(&self, i: usize) -> DVector<f64> {
        let s = &self.samples[i];
        let pattern = &self.federation.get(s.client_id).expect("validated").pattern;
        let mut x = DVector::zeros(self.dim());
        for (&j, &v) in pattern.observed().iter().zip(&s.x_obs) {
            x[j] = v;
        }
        x
    }

    /// Rows permuted by `perm` (`new[i] = old[perm[i]]`).
    pub fn permuted(&self, perm: &[usize]) -> Dataset {
        Dataset {
            federation: self.federation.clone(),
            samples: perm.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

/// Where a moment estimate came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    ZeroImputed,
    Debiased,
    ComponentWise,
    ImputedData,
    Population,
}

/// Which feature pairs an estimate actually covers. Uncovered entries are
/// zero-filled in the estimate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coverage {
    dim: usize,
    covered: Vec<bool>,
}

impl Coverage {
    pub fn from_fn(dim: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut covered = Vec::with_capacity(dim * dim);
        for l in 0..dim {
            for j in 0..dim {
                covered.push(f(l, j));
            }
        }
        Coverage { dim, covered }
    }

    pub fn is_covered(&self, l: usize, j: usize) -> bool {
        self.covered[l * self.dim + j]
    }

    /// First uncovered pair inside `pattern`, if any.
    pub fn first_gap(&self, pattern: &FeaturePattern) -> Option<(usize, usize)> {
        let obs = pattern.observed();
        for (a, &l) in obs.iter().enumerate() {
            for &j in &obs[a..] {
                if !self.is_covered(l, j) {
                    return Some((l, j));
                }
            }
        }
        None
    }

    pub fn is_complete(&self) -> bool {
        self.covered.iter().all(|&c| c)
    }

    pub fn uncovered_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for l in 0..self.dim {
            for j in l..self.dim {
                if !self.is_covered(l, j) {
                    out.push((l, j));
                }
            }
        }
        out
    }
}

/// An estimate `(Σ̂, γ̂)` of the second moments `E[XXᵀ]`, `E[XY]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPair {
    sigma: DMatrix<f64>,
    gamma: DVector<f64>,
    provenance: Provenance,
    coverage: Option<Coverage>,
}

impl MomentPair {
    /// `sigma` is symmetrised as `(A + Aᵀ)/2`.
    pub fn new(sigma: DMatrix<f64>, gamma: DVector<f64>, provenance: Provenance) -> Result<Self> {
        let d = gamma.len();
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: sigma.nrows(),
            });
        }
        Ok(MomentPair {
            sigma: linalg::symmetrize(&sigma),
            gamma,
            provenance,
            coverage: None,
        })
    }

    pub fn with_coverage(mut self, coverage: Coverage) -> Self {
        self.coverage = if coverage.is_complete() {
            None
        } else {
            Some(coverage)
        };
        self
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn gamma(&self) -> &DVector<f64> {
        &self.gamma
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// `None` means every pair is covered.
    pub fn coverage(&self) -> Option<&Coverage> {
        self.coverage.as_ref()
    }

    pub fn covers(&self, pattern: &FeaturePattern) -> bool {
        self.first_gap(pattern).is_none()
    }

    pub fn first_gap(&self, pattern: &FeaturePattern) -> Option<(usize, usize)> {
        self.coverage.as_ref().and_then(|c| c.first_gap(pattern))
    }
}

/// Anything that predicts an outcome from a client's observed coordinates.
pub trait Predict {
    fn predict(&self, client: usize, x_obs: &[f64]) -> Result<f64>;
}

/// Clip `t` to `[-m, m]`.
pub fn truncate(t: f64, m: f64) -> f64 {
    t.clamp(-m, m)
}

/// An element of the client-wise linear class: one coefficient vector per
/// client over that client's observed coordinates, optionally truncated.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientwisePredictor {
    entries: BTreeMap<usize, (FeaturePattern, DVector<f64>)>,
    trunc: Option<f64>,
}

impl ClientwisePredictor {
    pub fn new(trunc: Option<f64>) -> Result<Self> {
        if let Some(m) = trunc {
            if !(m >= 0.0) {
                return Err(Error::param("trunc_M", "must be >= 0"));
            }
        }
        Ok(ClientwisePredictor {
            entries: BTreeMap::new(),
            trunc,
        })
    }

    pub fn insert(&mut self, client: usize, pattern: FeaturePattern, theta: DVector<f64>) -> Result<()> {
        if theta.len() != pattern.len() {
            return Err(Error::DimensionMismatch {
                expected: pattern.len(),
                got: theta.len(),
            });
        }
        self.entries.insert(client, (pattern, theta));
        Ok(())
    }

    pub fn theta(&self, client: usize) -> Result<&DVector<f64>> {
        self.entries
            .get(&client)
            .map(|(_, t)| t)
            .ok_or(Error::UnknownClient(client))
    }

    pub fn pattern(&self, client: usize) -> Result<&FeaturePattern> {
        self.entries
            .get(&client)
            .map(|(p, _)| p)
            .ok_or(Error::UnknownClient(client))
    }

    pub fn clients(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn trunc(&self) -> Option<f64> {
        self.trunc
    }

    pub fn set_trunc(&mut self, trunc: Option<f64>) {
        self.trunc = trunc;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Predict for ClientwisePredictor {
    fn predict(&self, client: usize, x_obs: &[f64]) -> Result<f64> {
        let (_, theta) = self
            .entries
            .get(&client)
            .ok_or(Error::UnknownClient(client))?;
        if x_obs.len() != theta.len() {
            return Err(Error::DimensionMismatch {
                expected: theta.len(),
                got: x_obs.len(),
            });
        }
        let raw: f64 = theta.iter().zip(x_obs).map(|(a, b)| a * b).sum();
        Ok(match self.trunc {
            Some(m) => truncate(raw, m),
            None => raw,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommDirection {
    /// Client to server.
    Up,
    /// Server to client(s).
    Down,
}

impl fmt::Display for CommDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CommDirection::Up => "up",
            CommDirection::Down => "down",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommEntry {
    pub round: usize,
    pub direction: CommDirection,
    pub floats: u64,
    pub description: String,
}

/// Record of floats exchanged between clients and server. Pattern
/// registration is tracked separately in bits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommLog {
    entries: Vec<CommEntry>,
    registration_bits: u64,
}

impl CommLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, round: usize, direction: CommDirection, floats: u64, description: impl Into<String>) {
        self.entries.push(CommEntry {
            round,
            direction,
            floats,
            description: description.into(),
        });
    }

    pub fn record_registration(&mut self, bits: u64) {
        self.registration_bits += bits;
    }

    pub fn entries(&self) -> &[CommEntry] {
        &self.entries
    }

    pub fn registration_bits(&self) -> u64 {
        self.registration_bits
    }

    pub fn total_up(&self) -> u64 {
        self.total_in(CommDirection::Up)
    }

    pub fn total_down(&self) -> u64 {
        self.total_in(CommDirection::Down)
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.floats).sum()
    }

    fn total_in(&self, dir: CommDirection) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.direction == dir)
            .map(|e| e.floats)
            .sum()
    }

    pub fn extend(&mut self, other: &CommLog) {
        self.entries.extend(other.entries.iter().cloned());
        self.registration_bits += other.registration_bits;
    }

    /// CSV with header `round,direction,floats,description`.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["round", "direction", "floats", "description"])?;
        for e in &self.entries {
            w.write_record([
                e.round.to_string(),
                e.direction.to_string(),
                e.floats.to_string(),
                e.description.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

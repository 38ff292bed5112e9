//! Exchangeable imputers: zero filling, optimal linear imputation from a
//! covariance (population or component-wise estimate) and federated ICE.
//!
//! Every imputer here is linear per pattern: the missing block of a row at
//! client `k` is `S_k x_obs`, and observed entries are copied verbatim.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{self, Inversion};
use crate::model::{CommDirection, CommLog, Dataset, FeaturePattern, Federation};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceSource {
    Population,
    ComponentWise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImputerKind {
    Zero,
    OptimalLinear(CovarianceSource),
    /// Map induced by the covariance broadcast in the given ICE round.
    Ice { round: usize },
}

/// `S_k`, of shape `|mis(k)| × |obs(k)|`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternMap {
    pub pattern: FeaturePattern,
    pub s: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputationMap {
    kind: ImputerKind,
    maps: BTreeMap<usize, PatternMap>,
    /// Covariance the maps were derived from, kept to extend to new patterns.
    sigma: Option<DMatrix<f64>>,
    inversion: Inversion,
    /// Clients that fell back to zeros (empty observed set) or to the
    /// pseudoinverse.
    flagged: Vec<usize>,
}

/// `S = Σ_mis,obs Σ_obs^†`. An empty observed set yields the `|mis| × 0`
/// map, i.e. zeros; the flag is raised for it and for pseudoinverse
/// fallbacks.
pub fn optimal_map(sigma: &DMatrix<f64>, pattern: &FeaturePattern, inversion: Inversion) -> Result<(DMatrix<f64>, bool)> {
    let d = pattern.dim();
    if sigma.nrows() != d || sigma.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: sigma.nrows(),
        });
    }
    let obs = pattern.observed();
    let mis = pattern.missing();
    if obs.is_empty() {
        return Ok((DMatrix::zeros(mis.len(), 0), true));
    }
    if mis.is_empty() {
        return Ok((DMatrix::zeros(0, obs.len()), false));
    }
    let s_obs = linalg::submatrix(sigma, obs, obs);
    let s_mis_obs = linalg::submatrix(sigma, &mis, obs);
    let (inv, flag) = match inversion {
        Inversion::PseudoInverse { rel_tol } => (linalg::pinv(&s_obs, rel_tol)?, false),
        Inversion::Ridged { eps } => {
            let shifted = &s_obs + DMatrix::identity(obs.len(), obs.len()) * eps;
            match shifted.clone().try_inverse() {
                Some(inv) if inv.iter().all(|v| v.is_finite()) => (inv, false),
                _ => (linalg::pinv(&shifted, linalg::DEFAULT_PINV_RTOL)?, true),
            }
        }
    };
    Ok((s_mis_obs * inv, flag))
}

impl ImputationMap {
    pub fn kind(&self) -> ImputerKind {
        self.kind
    }

    pub fn get(&self, client: usize) -> Result<&PatternMap> {
        self.maps.get(&client).ok_or(Error::UnknownClient(client))
    }

    pub fn clients(&self) -> impl Iterator<Item = usize> + '_ {
        self.maps.keys().copied()
    }

    pub fn source_sigma(&self) -> Option<&DMatrix<f64>> {
        self.sigma.as_ref()
    }

    pub fn flagged(&self) -> &[usize] {
        &self.flagged
    }

    /// Add a map for a client absent from training, derived the same way as
    /// the existing ones.
    pub fn extend(&mut self, client: usize, pattern: &FeaturePattern) -> Result<()> {
        let (s, flag) = match &self.sigma {
            None => (DMatrix::zeros(pattern.dim() - pattern.len(), pattern.len()), false),
            Some(sigma) => optimal_map(sigma, pattern, self.inversion)?,
        };
        if flag {
            self.flagged.push(client);
        }
        self.maps.insert(
            client,
            PatternMap {
                pattern: pattern.clone(),
                s,
            },
        );
        Ok(())
    }

    fn build(kind: ImputerKind, sigma: Option<DMatrix<f64>>, federation: &Federation, inversion: Inversion) -> Result<Self> {
        Self::for_clients(kind, sigma, federation.iter().map(|c| (c.id, &c.pattern)), inversion)
    }

    /// Maps for the given `(client id, pattern)` pairs, derived from `sigma`
    /// (zero maps when `sigma` is `None`).
    pub fn for_clients<'a>(
        kind: ImputerKind,
        sigma: Option<DMatrix<f64>>,
        clients: impl IntoIterator<Item = (usize, &'a FeaturePattern)>,
        inversion: Inversion,
    ) -> Result<Self> {
        let mut map = ImputationMap {
            kind,
            maps: BTreeMap::new(),
            sigma,
            inversion,
            flagged: Vec::new(),
        };
        for (id, pattern) in clients {
            map.extend(id, pattern)?;
        }
        Ok(map)
    }

    /// Complete one row: observed entries verbatim, missing ones `S_k x_obs`.
    pub fn impute_row(&self, client: usize, x_obs: &[f64]) -> Result<DVector<f64>> {
        let pm = self.get(client)?;
        let obs = pm.pattern.observed();
        if x_obs.len() != obs.len() {
            return Err(Error::DimensionMismatch {
                expected: obs.len(),
                got: x_obs.len(),
            });
        }
        let mut out = DVector::zeros(pm.pattern.dim());
        for (a, &j) in obs.iter().enumerate() {
            out[j] = x_obs[a];
        }
        for (r, j) in pm.pattern.missing().into_iter().enumerate() {
            let mut acc = 0.0;
            for (a, &v) in x_obs.iter().enumerate() {
                acc += pm.s[(r, a)] * v;
            }
            out[j] = acc;
        }
        Ok(out)
    }

    /// `θ_obs + S_kᵀ θ_mis`: the coefficients on observed features of the
    /// composed predictor `x ↦ θᵀ φ(x, k)`.
    pub fn effective_coefficients(&self, client: usize, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let pm = self.get(client)?;
        if theta.len() != pm.pattern.dim() {
            return Err(Error::DimensionMismatch {
                expected: pm.pattern.dim(),
                got: theta.len(),
            });
        }
        let theta_obs = linalg::subvector(theta, pm.pattern.observed());
        let theta_mis = linalg::subvector(theta, &pm.pattern.missing());
        Ok(theta_obs + pm.s.transpose() * theta_mis)
    }
}

pub fn fit_zero_imputer(federation: &Federation) -> ImputationMap {
    ImputationMap::build(ImputerKind::Zero, None, federation, Inversion::default()).expect("zero maps cannot fail")
}

pub fn fit_optimal_imputer(
    sigma: &DMatrix<f64>,
    federation: &Federation,
    inversion: Inversion,
    source: CovarianceSource,
) -> Result<ImputationMap> {
    inversion.validate()?;
    if sigma.nrows() != federation.dim() || sigma.ncols() != federation.dim() {
        return Err(Error::DimensionMismatch {
            expected: federation.dim(),
            got: sigma.nrows(),
        });
    }
    ImputationMap::build(
        ImputerKind::OptimalLinear(source),
        Some(linalg::symmetrize(sigma)),
        federation,
        inversion,
    )
}

/// Completed design matrix with outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputedDataset {
    pub rows: DMatrix<f64>,
    pub y: DVector<f64>,
    pub client_ids: Vec<usize>,
    pub federation: Federation,
    pub kind: ImputerKind,
}

/// One client's portion of an imputed dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputedShard {
    pub client_id: usize,
    pub rows: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl ImputedShard {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// `(Σ x̃x̃ᵀ, Σ x̃y)` over the shard.
    pub fn sums(&self) -> (DMatrix<f64>, DVector<f64>) {
        (self.rows.tr_mul(&self.rows), self.rows.tr_mul(&self.y))
    }
}

impl ImputedDataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// Empirical `(Σ̂^I, γ̂^I)`.
    pub fn moments(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        if self.n() == 0 {
            return Err(Error::EmptyDataset);
        }
        let inv = 1.0 / self.n() as f64;
        Ok((linalg::symmetrize(&self.rows.tr_mul(&self.rows)) * inv, self.rows.tr_mul(&self.y) * inv))
    }

    /// Split rows by client, in federation order.
    pub fn shards(&self) -> Vec<ImputedShard> {
        self.federation
            .iter()
            .map(|c| {
                let idx: Vec<usize> = (0..self.n()).filter(|&i| self.client_ids[i] == c.id).collect();
                ImputedShard {
                    client_id: c.id,
                    rows: self.rows.select_rows(&idx),
                    y: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i])),
                }
            })
            .collect()
    }
}

pub fn apply_imputer(map: &ImputationMap, dataset: &Dataset) -> Result<ImputedDataset> {
    let d = dataset.dim();
    let rows: Vec<DVector<f64>> = dataset
        .samples()
        .par_iter()
        .map(|s| map.impute_row(s.client_id, &s.x_obs))
        .collect::<Result<_>>()?;
    let n = rows.len();
    Ok(ImputedDataset {
        rows: DMatrix::from_fn(n, d, |i, j| rows[i][j]),
        y: DVector::from_iterator(n, dataset.samples().iter().map(|s| s.y)),
        client_ids: dataset.samples().iter().map(|s| s.client_id).collect(),
        federation: dataset.federation().clone(),
        kind: map.kind(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IceOutcome {
    pub imputed: ImputedDataset,
    pub map: ImputationMap,
    /// `Σ̂_t` broadcast in each executed round.
    pub sigma_trace: Vec<DMatrix<f64>>,
    /// RMS change of the imputed entries in each executed round.
    pub rms_changes: Vec<f64>,
    pub comm: CommLog,
    pub rounds_run: usize,
}

/// Packed upper triangle of a `d × d` second-moment sum.
pub fn second_moment_floats(d: usize) -> u64 {
    (d * (d + 1) / 2) as u64
}

fn rms_missing_change(before: &DMatrix<f64>, after: &DMatrix<f64>, dataset: &Dataset) -> f64 {
    let fed = dataset.federation();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, s) in dataset.samples().iter().enumerate() {
        let pattern = &fed.get(s.client_id).expect("validated").pattern;
        for j in pattern.missing() {
            let diff = after[(i, j)] - before[(i, j)];
            sum += diff * diff;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).sqrt()
    }
}

fn canonical_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    a.len().cmp(&b.len())
}

/// Federated ICE. Each round, every client uploads the second-moment sum of
/// its currently imputed rows; the server broadcasts `Σ̂_t = Σ_k S_k / n` and
/// every client re-imputes with `S_k = (Σ̂_t)_{mis,obs} (Σ̂_t)_{obs}^†`.
///
/// With `early_stop_tol`, iteration stops after the first round whose RMS
/// change of imputed entries falls below the tolerance.
pub fn federated_ice(
    dataset: &Dataset,
    rounds: usize,
    init: &ImputationMap,
    inversion: Inversion,
    early_stop_tol: Option<f64>,
) -> Result<IceOutcome> {
    inversion.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = dataset.dim();
    let federation = dataset.federation();
    let mut imputed = apply_imputer(init, dataset)?;
    let mut map = init.clone();
    let mut comm = CommLog::new();
    let mut sigma_trace = Vec::new();
    let mut rms_changes = Vec::new();
    // Rows are summed in a canonical order (by observed values) so that
    // Σ̂_t does not depend on the order in which samples were listed.
    let by_client: Vec<Vec<usize>> = dataset
        .indices_by_client()
        .into_iter()
        .map(|(_, mut idx)| {
            idx.sort_by(|&a, &b| canonical_cmp(&dataset.samples()[a].x_obs, &dataset.samples()[b].x_obs));
            idx
        })
        .collect();
    let tri = second_moment_floats(d);

    for round in 1..=rounds {
        // Uplink: per-client sums, folded in client-id order.
        let mut total = DMatrix::zeros(d, d);
        for idx in &by_client {
            let rows = imputed.rows.select_rows(idx);
            total += rows.tr_mul(&rows);
        }
        comm.record(round, CommDirection::Up, tri * federation.len() as u64, "imputed second-moment sums");
        let sigma_t = linalg::symmetrize(&total) * (1.0 / dataset.n() as f64);
        comm.record(round, CommDirection::Down, tri, "second-moment broadcast");

        let next = ImputationMap::build(ImputerKind::Ice { round }, Some(sigma_t.clone()), federation, inversion)?;
        let updated = apply_imputer(&next, dataset)?;
        let change = rms_missing_change(&imputed.rows, &updated.rows, dataset);
        imputed = updated;
        map = next;
        sigma_trace.push(sigma_t);
        rms_changes.push(change);
        if early_stop_tol.is_some_and(|tol| change < tol) {
            break;
        }
    }
    let rounds_run = sigma_trace.len();
    Ok(IceOutcome {
        imputed,
        map,
        sigma_trace,
        rms_changes,
        comm,
        rounds_run,
    })
}

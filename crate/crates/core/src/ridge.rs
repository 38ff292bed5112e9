//! Regression stage: ridge on imputed data (closed form or FedAvg),
//! truncated deployment through the imputer, and the local-learning
//! baseline.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::impute::{apply_imputer, ImputationMap, ImputedDataset, ImputedShard};
use crate::linalg;
use crate::model::{truncate, ClientwisePredictor, CommDirection, CommLog, Dataset, FeaturePattern, Predict};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Truncation {
    None,
    Fixed(f64),
    /// `M̂ = max_i |Y_i|` on the training set.
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FedAvgOptions {
    pub rounds: usize,
    pub local_steps: usize,
    /// Defaults to `1/(λ_max(Σ̂^I) + λ)`.
    pub step_size: Option<f64>,
    /// Stop early once an update moves θ by less than this (Euclidean).
    pub tol: Option<f64>,
}

impl Default for FedAvgOptions {
    fn default() -> Self {
        FedAvgOptions {
            rounds: 1000,
            local_steps: 1,
            step_size: None,
            tol: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RidgeSolver {
    ClosedForm,
    FedAvg(FedAvgOptions),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RidgeConfig {
    pub lambda: f64,
    pub trunc: Truncation,
    pub solver: RidgeSolver,
}

impl RidgeConfig {
    pub fn closed_form(lambda: f64) -> Self {
        RidgeConfig {
            lambda,
            trunc: Truncation::None,
            solver: RidgeSolver::ClosedForm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::param("lambda", "must be finite and >= 0"));
        }
        if let Truncation::Fixed(m) = self.trunc {
            if !(m >= 0.0) {
                return Err(Error::param("trunc_M", "must be >= 0"));
            }
        }
        if let RidgeSolver::FedAvg(o) = self.solver {
            if o.rounds == 0 {
                return Err(Error::param("rounds", "must be >= 1"));
            }
            if o.local_steps == 0 {
                return Err(Error::param("local_steps", "must be >= 1"));
            }
            if let Some(s) = o.step_size {
                if !(s > 0.0) {
                    return Err(Error::param("step_size", "must be > 0"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    pub theta: DVector<f64>,
    /// `λ = 0` with a singular `Σ̂^I`: the minimum-norm solution was used.
    pub pinv_fallback: bool,
}

/// `θ̂_λ = (Σ̂^I + λI)^{-1} γ̂^I` on the imputed sample.
pub fn ridge_closed_form(data: &ImputedDataset, lambda: f64) -> Result<RidgeFit> {
    if !(lambda >= 0.0) {
        return Err(Error::param("lambda", "must be >= 0"));
    }
    let (s, g) = data.moments()?;
    let solved = linalg::ridge_solve(&s, &g, lambda)?;
    Ok(RidgeFit {
        theta: solved.x,
        pinv_fallback: solved.pinv_fallback,
    })
}

/// Training objective `(1/2n) Σ (Y_i − θᵀX̃_i)² + (λ/2)‖θ‖²` from sums.
fn ridge_objective(xx: &DMatrix<f64>, xy: &DVector<f64>, yy: f64, n: f64, lambda: f64, theta: &DVector<f64>) -> f64 {
    0.5 * (theta.dot(&(xx * theta)) - 2.0 * xy.dot(theta) + yy) / n + 0.5 * lambda * theta.norm_squared()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedAvgOutcome {
    pub theta: DVector<f64>,
    /// Objective after each executed round, preceded by its value at θ = 0.
    pub objective_trace: Vec<f64>,
    pub comm: CommLog,
    pub rounds_run: usize,
    pub diverged: bool,
    pub step_size: f64,
}

const DIVERGENCE_ROUNDS: usize = 10;

struct LocalState {
    n: usize,
    /// Local averages; zero for an empty shard.
    sigma: DMatrix<f64>,
    gamma: DVector<f64>,
}

/// FedAvg on the ridge objective. Each round the server sends θ to every
/// client; clients take `local_steps` full-batch steps on
/// `Σ̂_k θ − γ̂_k + λθ` and return their iterate; the server averages with
/// weights `n_k / n`. One local step per round is exact gradient descent on
/// the global objective. Divergence (objective rising for 10 consecutive
/// rounds) aborts with a flag.
pub fn fedavg_ridge(shards: &[ImputedShard], lambda: f64, opt: FedAvgOptions) -> Result<FedAvgOutcome> {
    RidgeConfig {
        lambda,
        trunc: Truncation::None,
        solver: RidgeSolver::FedAvg(FedAvgOptions {
            rounds: opt.rounds.max(1),
            ..opt
        }),
    }
    .validate()?;
    let first = shards.first().ok_or_else(|| Error::param("shards", "no clients"))?;
    let d = first.rows.ncols();
    let n: usize = shards.iter().map(|s| s.n()).sum();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut xx = DMatrix::zeros(d, d);
    let mut xy = DVector::zeros(d);
    let mut yy = 0.0;
    let locals: Vec<LocalState> = shards
        .iter()
        .map(|s| {
            if s.rows.ncols() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: s.rows.ncols(),
                });
            }
            let (sx, sy) = s.sums();
            xx += &sx;
            xy += &sy;
            yy += s.y.norm_squared();
            let inv = if s.n() > 0 { 1.0 / s.n() as f64 } else { 0.0 };
            Ok(LocalState {
                n: s.n(),
                sigma: linalg::symmetrize(&sx) * inv,
                gamma: sy * inv,
            })
        })
        .collect::<Result<_>>()?;
    let xx = linalg::symmetrize(&xx);
    let nf = n as f64;
    let step = match opt.step_size {
        Some(s) => s,
        None => 1.0 / (linalg::max_abs_eigenvalue(&(&xx / nf)) + lambda).max(f64::MIN_POSITIVE),
    };

    let mut theta = DVector::zeros(d);
    let mut comm = CommLog::new();
    let mut trace = vec![ridge_objective(&xx, &xy, yy, nf, lambda, &theta)];
    let mut rising = 0;
    let mut diverged = false;
    let k = shards.len() as u64;
    for round in 1..=opt.rounds {
        comm.record(round, CommDirection::Down, k * d as u64, "global parameters");
        let updates: Vec<DVector<f64>> = locals
            .par_iter()
            .map(|c| {
                let mut t = theta.clone();
                if c.n > 0 {
                    for _ in 0..opt.local_steps {
                        let grad = &c.sigma * &t - &c.gamma + &t * lambda;
                        t -= grad * step;
                    }
                }
                t
            })
            .collect();
        comm.record(round, CommDirection::Up, k * d as u64, "local parameters");
        let mut next = DVector::zeros(d);
        for (c, t) in locals.iter().zip(&updates) {
            next += t * (c.n as f64 / nf);
        }
        let moved = (&next - &theta).norm();
        theta = next;
        let obj = ridge_objective(&xx, &xy, yy, nf, lambda, &theta);
        if obj > trace[trace.len() - 1] || !obj.is_finite() {
            rising += 1;
        } else {
            rising = 0;
        }
        trace.push(obj);
        if rising >= DIVERGENCE_ROUNDS || !obj.is_finite() {
            diverged = true;
            break;
        }
        if opt.tol.is_some_and(|tol| moved <= tol) {
            break;
        }
    }
    Ok(FedAvgOutcome {
        theta,
        rounds_run: trace.len() - 1,
        objective_trace: trace,
        comm,
        diverged,
        step_size: step,
    })
}

/// `M̂ = max_i |Y_i|`.
pub fn estimate_m(dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(dataset.samples().iter().fold(0.0_f64, |m, s| m.max(s.y.abs())))
}

fn resolve_trunc(trunc: Truncation, dataset: &Dataset) -> Result<Option<f64>> {
    match trunc {
        Truncation::None => Ok(None),
        Truncation::Fixed(m) => Ok(Some(m)),
        Truncation::Estimated => estimate_m(dataset).map(Some),
    }
}

/// Ridge predictor composed with an imputer: at client `k`,
/// `x_obs ↦ T_M(θᵀ φ(x_obs, k))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ItrPredictor {
    map: ImputationMap,
    theta: DVector<f64>,
    m: Option<f64>,
    coeffs: BTreeMap<usize, DVector<f64>>,
}

impl ItrPredictor {
    pub fn new(map: ImputationMap, theta: DVector<f64>, m: Option<f64>) -> Result<Self> {
        if let Some(m) = m {
            if !(m >= 0.0) {
                return Err(Error::param("trunc_M", "must be >= 0"));
            }
        }
        let coeffs = map
            .clients()
            .map(|c| Ok((c, map.effective_coefficients(c, &theta)?)))
            .collect::<Result<_>>()?;
        Ok(ItrPredictor { map, theta, m, coeffs })
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn imputer(&self) -> &ImputationMap {
        &self.map
    }

    pub fn trunc(&self) -> Option<f64> {
        self.m
    }

    /// `θ_obs + S_kᵀ θ_mis` for client `k`.
    pub fn effective_coefficients(&self, client: usize) -> Result<&DVector<f64>> {
        self.coeffs.get(&client).ok_or(Error::UnknownClient(client))
    }

    /// Deploy to a client that was not in training.
    pub fn add_client(&mut self, client: usize, pattern: &FeaturePattern) -> Result<()> {
        self.map.extend(client, pattern)?;
        let c = self.map.effective_coefficients(client, &self.theta)?;
        self.coeffs.insert(client, c);
        Ok(())
    }

    /// The same predictor expressed in the client-wise linear class.
    pub fn to_clientwise(&self) -> Result<ClientwisePredictor> {
        let mut out = ClientwisePredictor::new(self.m)?;
        for (&c, coef) in &self.coeffs {
            out.insert(c, self.map.get(c)?.pattern.clone(), coef.clone())?;
        }
        Ok(out)
    }
}

impl Predict for ItrPredictor {
    fn predict(&self, client: usize, x_obs: &[f64]) -> Result<f64> {
        let coef = self.effective_coefficients(client)?;
        if coef.len() != x_obs.len() {
            return Err(Error::DimensionMismatch {
                expected: coef.len(),
                got: x_obs.len(),
            });
        }
        let raw: f64 = coef.iter().zip(x_obs).map(|(a, b)| a * b).sum();
        Ok(match self.m {
            Some(m) => truncate(raw, m),
            None => raw,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItrFit {
    pub predictor: ItrPredictor,
    pub pinv_fallback: bool,
    /// Present for the FedAvg solver.
    pub fedavg: Option<FedAvgOutcome>,
}

/// Impute with `map`, fit ridge with the configured solver, compose.
pub fn fit_itr(dataset: &Dataset, map: &ImputationMap, cfg: &RidgeConfig) -> Result<ItrFit> {
    cfg.validate()?;
    let imputed = apply_imputer(map, dataset)?;
    let m = resolve_trunc(cfg.trunc, dataset)?;
    match cfg.solver {
        RidgeSolver::ClosedForm => {
            let fit = ridge_closed_form(&imputed, cfg.lambda)?;
            Ok(ItrFit {
                predictor: ItrPredictor::new(map.clone(), fit.theta, m)?,
                pinv_fallback: fit.pinv_fallback,
                fedavg: None,
            })
        }
        RidgeSolver::FedAvg(opt) => {
            let out = fedavg_ridge(&imputed.shards(), cfg.lambda, opt)?;
            Ok(ItrFit {
                predictor: ItrPredictor::new(map.clone(), out.theta.clone(), m)?,
                pinv_fallback: false,
                fedavg: Some(out),
            })
        }
    }
}

/// Where the local penalty `λ_k = λ/ρ_k` takes `ρ_k` from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RhoSource {
    True,
    Empirical,
}

/// Each client fits ridge on its own samples only, with `λ_k = λ/ρ_k`.
/// Clients without samples get the zero predictor. An estimated `M` is the
/// largest `|Y_i|` over the whole training set.
pub fn local_learning(dataset: &Dataset, lambda: f64, rho_source: RhoSource, trunc: Truncation) -> Result<ClientwisePredictor> {
    if !(lambda >= 0.0) {
        return Err(Error::param("lambda", "must be >= 0"));
    }
    let m = match trunc {
        Truncation::Estimated if dataset.is_empty() => None,
        t => resolve_trunc(t, dataset)?,
    };
    let mut out = ClientwisePredictor::new(m)?;
    let n = dataset.n();
    for (id, idx) in dataset.indices_by_client() {
        let spec = dataset.federation().get(id)?;
        let p = spec.pattern.len();
        if idx.is_empty() || p == 0 {
            out.insert(id, spec.pattern.clone(), DVector::zeros(p))?;
            continue;
        }
        let mut xx = DMatrix::zeros(p, p);
        let mut xy = DVector::zeros(p);
        for &i in &idx {
            let s = &dataset.samples()[i];
            let x = DVector::from_column_slice(&s.x_obs);
            xx += &x * x.transpose();
            xy += x * s.y;
        }
        let nk = idx.len() as f64;
        let rho = match rho_source {
            RhoSource::True => spec.rho,
            RhoSource::Empirical => nk / n as f64,
        };
        let solved = linalg::ridge_solve(&linalg::symmetrize(&(xx / nk)), &(xy / nk), lambda / rho)?;
        out.insert(id, spec.pattern.clone(), solved.x)?;
    }
    Ok(out)
}

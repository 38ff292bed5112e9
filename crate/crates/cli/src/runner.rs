//! Scenario execution.
//!
//! A run is a grid of work items `(replicate, tau, n)`. Every random stream of
//! an item is derived from the replicate seed along a fixed label path, so the
//! output does not depend on thread count or scheduling:
//!
//! ```text
//! replicate seed  s_r = derive(root, [label("replicate"), r])
//! patterns        rng(s_r, [label("patterns"), tau_idx])
//! training data   rng(s_r, [label("data"), tau_idx, n_idx])
//! test draws      derive(s_r, [label("mc"), tau_idx])        shared by methods and n
//! validation      derive(s_r, [label("validation"), tau_idx, n_idx])
//! random θ★       rng(root, [label("theta")])
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use fedmismatch_core::fedsim::{
    replay_comm_schedule, run_protocol, CommTotals, ProtocolKind, ProtocolResult, ProtocolSpec, ServerConfig,
    SimClient,
};
use fedmismatch_core::impute::{
    federated_ice, fit_optimal_imputer, fit_zero_imputer, CovarianceSource, ImputationMap,
};
use fedmismatch_core::linalg::{self, Inversion};
use fedmismatch_core::model::{ClientSpec, ClientwisePredictor, Dataset, FeaturePattern, Federation, Predict};
use fedmismatch_core::moments::{cw_moments_from_dataset, debias_moments, zero_imputed_from_dataset};
use fedmismatch_core::oracle::{
    best_local_coefficients, clientwise_linear_risk, imputed_population_covariance, itr_bound, local_bound_terms,
    monte_carlo_risk, oracle_global_risk, ridge_bias, typical_case_lambda_prime, PopulationImputer,
};
use fedmismatch_core::plugin::{build_clientwise_plugin, PgdOptions, PluginConfig};
use fedmismatch_core::popgen::{
    co_observation_matrix, draw_bernoulli_patterns, equicorrelated_covariance, identity_covariance,
    sample_dataset, toeplitz_covariance, Design, Noise, PopulationSpec,
};
use fedmismatch_core::ridge::{
    estimate_m, fit_itr, local_learning, FedAvgOptions, ItrPredictor, RhoSource, RidgeConfig, RidgeSolver,
    Truncation,
};
use fedmismatch_core::seed::{self, label};
use fedmismatch_core::Error as CoreError;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::config::{
    ConfigError, DesignSpec, ExperimentConfig, NoiseSpec, Scenario, SigmaSpec, SolverSpec, ThetaSpec,
    TruncationSpec, ValidationReport,
};
use crate::method::Method;
use crate::output::{write_csv, Row, RowKey};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("replicate {replicate}, tau #{tau_idx}, n #{n_idx}, {method}: {source}")]
    Method {
        replicate: usize,
        tau_idx: usize,
        n_idx: usize,
        method: String,
        #[source]
        source: CoreError,
    },
    #[error("{method}: logged communication {logged:?} differs from the schedule {predicted:?}")]
    CommMismatch {
        method: String,
        logged: CommTotals,
        predicted: CommTotals,
    },
    #[error("cannot build thread pool: {0}")]
    ThreadPool(String),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl RunError {
    /// Process exit status: 1 for configuration problems, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Replaces `seeds.root`.
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    let mut report = ValidationReport::default();
    report.issues.push(crate::config::Issue {
        field: field.to_string(),
        message: message.into(),
    });
    ConfigError::Invalid(report)
}

fn read_matrix(path: &Path, d: usize) -> Result<DMatrix<f64>, ConfigError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| invalid("population.sigma.path", e.to_string()))?;
    let mut values = Vec::with_capacity(d * d);
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| invalid("population.sigma.path", e.to_string()))?;
        if record.len() != d {
            return Err(invalid(
                "population.sigma.path",
                format!("row {} has {} entries, expected {d}", rows + 1, record.len()),
            ));
        }
        for field in record.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| invalid("population.sigma.path", format!("'{field}' is not a number")))?;
            values.push(v);
        }
        rows += 1;
    }
    if rows != d {
        return Err(invalid("population.sigma.path", format!("{rows} rows, expected {d}")));
    }
    Ok(DMatrix::from_row_slice(d, d, &values))
}

/// Ground-truth population described by the configuration.
pub fn build_population(cfg: &ExperimentConfig, root: u64) -> Result<PopulationSpec, ConfigError> {
    let p = &cfg.population;
    let d = p.d;
    let sigma = match &p.sigma {
        SigmaSpec::Identity => identity_covariance(d),
        SigmaSpec::Equicorrelated { r } => equicorrelated_covariance(d, *r),
        SigmaSpec::Toeplitz { r } => toeplitz_covariance(d, *r),
        SigmaSpec::File { path } => read_matrix(&cfg.base_dir.join(path), d)?,
    };
    let theta = match &p.theta {
        ThetaSpec::Constant { value } => DVector::from_element(d, *value),
        ThetaSpec::Decay { scale, rate } => DVector::from_fn(d, |j, _| scale * rate.powi(j as i32)),
        ThetaSpec::Explicit { values } => DVector::from_column_slice(values),
        ThetaSpec::Random { scale } => {
            let mut rng = seed::rng_from(root, &[label("theta")]);
            DVector::from_fn(d, |_, _| scale * (2.0 * rng.random::<f64>() - 1.0))
        }
    };
    let noise = match p.noise {
        NoiseSpec::Gaussian { variance } => Noise::Gaussian { variance },
        NoiseSpec::Uniform { half_width } => Noise::UniformBounded { half_width },
    };
    let design = match p.design {
        DesignSpec::Gaussian => Design::Gaussian,
        DesignSpec::BoundedSphere => Design::BoundedSphere,
    };
    PopulationSpec::new(sigma, theta, noise, design).map_err(|e| invalid("population", e.to_string()))
}

fn parse_patterns(d: usize, patterns: &[Vec<usize>], field: &str) -> Result<Vec<FeaturePattern>, ConfigError> {
    patterns
        .iter()
        .map(|p| FeaturePattern::from_one_based(d, p).map_err(|e| invalid(field, e.to_string())))
        .collect()
}

struct Plan {
    cfg: ExperimentConfig,
    pop: PopulationSpec,
    methods: Vec<Method>,
    root: u64,
    inversion: Inversion,
    explicit: Option<Vec<FeaturePattern>>,
    new_clients: Option<Vec<FeaturePattern>>,
    k: usize,
}

#[derive(Debug, Clone, Copy)]
struct Item {
    replicate: usize,
    tau_idx: usize,
    n_idx: usize,
}

impl Plan {
    fn new(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Self, ConfigError> {
        let report = cfg.validate();
        if !report.is_ok() {
            return Err(ConfigError::Invalid(report));
        }
        let root = opts.seed.unwrap_or(cfg.seeds.root);
        let pop = build_population(cfg, root)?;
        let d = cfg.population.d;
        let explicit = cfg
            .clients
            .patterns
            .as_deref()
            .map(|p| parse_patterns(d, p, "clients.patterns"))
            .transpose()?;
        let new_clients = cfg
            .clients
            .new_patterns
            .as_deref()
            .map(|p| parse_patterns(d, p, "clients.new_patterns"))
            .transpose()?;
        let k = explicit.as_ref().map(Vec::len).or(cfg.clients.k).unwrap_or(0);
        Ok(Plan {
            cfg: cfg.clone(),
            pop,
            methods: cfg.parsed_methods(),
            root,
            inversion: cfg.options.plugin.inversion(),
            explicit,
            new_clients,
            k,
        })
    }

    fn replicate_seed(&self, r: usize) -> u64 {
        seed::derive(self.root, &[label("replicate"), r as u64])
    }

    fn federation(&self, item: Item) -> Result<Federation, CoreError> {
        let patterns = match &self.explicit {
            Some(p) => p.clone(),
            None => {
                let mut rng =
                    seed::rng_from(self.replicate_seed(item.replicate), &[label("patterns"), item.tau_idx as u64]);
                draw_bernoulli_patterns(self.k, self.cfg.population.d, self.cfg.grid.tau[item.tau_idx], &mut rng)?
            }
        };
        match &self.cfg.clients.rho {
            Some(rho) => Federation::with_rho(patterns, rho),
            None => Federation::uniform(patterns),
        }
    }

    /// Clients the predictors are scored on.
    fn evaluation_federation(&self, training: &Federation) -> Result<Federation, CoreError> {
        match (&self.new_clients, self.cfg.scenario) {
            (Some(p), Scenario::NewClientGeneralization) => {
                let k = training.len();
                let rho = 1.0 / p.len() as f64;
                Federation::new(
                    p.iter()
                        .enumerate()
                        .map(|(i, pat)| ClientSpec::new(k + i, pat.clone(), rho))
                        .collect(),
                )
            }
            _ => Ok(training.clone()),
        }
    }

    fn items(&self) -> Vec<Item> {
        let n_len = if self.cfg.scenario == Scenario::TypicalCaseSweep {
            1
        } else {
            self.cfg.grid.n.len()
        };
        let mut out = Vec::new();
        for replicate in 0..self.cfg.seeds.replicates {
            for tau_idx in 0..self.cfg.grid.tau.len() {
                for n_idx in 0..n_len {
                    out.push(Item {
                        replicate,
                        tau_idx,
                        n_idx,
                    });
                }
            }
        }
        out
    }

    fn tau_value(&self, tau_idx: usize) -> Option<f64> {
        match self.explicit {
            Some(_) => None,
            None => Some(self.cfg.grid.tau[tau_idx]),
        }
    }
}

/// Everything shared by the methods of one work item.
struct Ctx<'a> {
    plan: &'a Plan,
    item: Item,
    seed: u64,
    fed: Federation,
    eval: Federation,
    is_new: bool,
    data: Dataset,
    n: usize,
    oracle_risk: f64,
    trunc: Option<f64>,
    m_bound: f64,
    mc_seed: u64,
    validation_seed: u64,
}

/// A fitted method, ready to be scored.
struct Fitted {
    predictor: Box<dyn Predict + Sync>,
    /// The same predictor in the client-wise linear class, when untruncated.
    linear: Option<ClientwisePredictor>,
    bound: Option<f64>,
    comm: (u64, u64),
}

impl Fitted {
    fn clientwise(p: ClientwisePredictor, bound: Option<f64>, comm: (u64, u64)) -> Self {
        let linear = p.trunc().is_none().then(|| p.clone());
        Fitted {
            predictor: Box::new(p),
            linear,
            bound,
            comm,
        }
    }
}

/// Method state that does not depend on λ.
enum Prepared {
    Fixed(Fitted),
    Itr { map: ImputationMap, comm: (u64, u64) },
    Local,
}

fn totals(t: CommTotals) -> (u64, u64) {
    (t.up, t.down)
}

fn add(a: (u64, u64), b: (u64, u64)) -> (u64, u64) {
    (a.0 + b.0, a.1 + b.1)
}

impl Ctx<'_> {
    fn k(&self) -> usize {
        self.fed.len()
    }

    fn d(&self) -> usize {
        self.plan.cfg.population.d
    }

    fn plugin_config(&self) -> PluginConfig {
        let o = &self.plan.cfg.options.plugin;
        PluginConfig {
            inversion: self.plan.inversion,
            psd_projection: o.psd_projection,
            constraint_radius: o.constraint_radius,
            pgd: PgdOptions::default(),
        }
    }

    fn moments_comm(&self) -> (u64, u64) {
        totals(replay_comm_schedule(
            &ProtocolSpec::new(ProtocolKind::OneShotMoments),
            self.k(),
            self.d(),
        ))
    }

    fn plugin(&self, method: Method) -> Result<Fitted, CoreError> {
        let moments = match method {
            Method::PluginCw => cw_moments_from_dataset(&self.data)?,
            Method::PluginDebiased => {
                debias_moments(&zero_imputed_from_dataset(&self.data)?, &co_observation_matrix(&self.fed))?
            }
            _ => zero_imputed_from_dataset(&self.data)?,
        };
        let cfg = self.plugin_config();
        let mut fit = build_clientwise_plugin(&moments, &self.fed, &cfg)?;
        for c in self.eval.iter() {
            if fit.predictor.theta(c.id).is_ok() {
                continue;
            }
            match fit.add_client(&moments, c.id, &c.pattern, &cfg) {
                Err(CoreError::Unidentifiable { .. }) => {}
                other => other?,
            }
            if fit.predictor.theta(c.id).is_err() {
                // Unidentifiable clients predict zero.
                fit.predictor.insert(c.id, c.pattern.clone(), DVector::zeros(c.pattern.len()))?;
            }
        }
        fit.predictor.set_trunc(self.trunc);
        Ok(Fitted::clientwise(fit.predictor, None, self.moments_comm()))
    }

    fn oracle(&self) -> Result<Fitted, CoreError> {
        let mut p = ClientwisePredictor::new(None)?;
        for c in self.eval.iter() {
            p.insert(c.id, c.pattern.clone(), best_local_coefficients(&self.plan.pop, &c.pattern)?)?;
        }
        Ok(Fitted::clientwise(p, None, (0, 0)))
    }

    fn prepare(&self, method: Method) -> Result<Prepared, CoreError> {
        let inv = self.plan.inversion;
        Ok(match method {
            Method::PluginCw | Method::PluginDebiased | Method::PluginZero => Prepared::Fixed(self.plugin(method)?),
            Method::Oracle => Prepared::Fixed(self.oracle()?),
            Method::ItrZero => Prepared::Itr {
                map: fit_zero_imputer(&self.fed),
                comm: (0, 0),
            },
            Method::ItrOptPop => Prepared::Itr {
                map: fit_optimal_imputer(self.plan.pop.sigma(), &self.fed, inv, CovarianceSource::Population)?,
                comm: (0, 0),
            },
            Method::ItrOptCw => {
                let cw = cw_moments_from_dataset(&self.data)?;
                Prepared::Itr {
                    map: fit_optimal_imputer(cw.sigma(), &self.fed, inv, CovarianceSource::ComponentWise)?,
                    comm: self.moments_comm(),
                }
            }
            Method::ItrIce => {
                let out = federated_ice(
                    &self.data,
                    self.plan.cfg.options.ice_rounds,
                    &fit_zero_imputer(&self.fed),
                    inv,
                    None,
                )?;
                Prepared::Itr {
                    map: out.map,
                    comm: totals(CommTotals::of(&out.comm)),
                }
            }
            Method::Local => Prepared::Local,
            _ => unreachable!("protocols are handled by the audit"),
        })
    }

    fn core_trunc(&self) -> Truncation {
        match self.trunc {
            Some(m) => Truncation::Fixed(m),
            None => Truncation::None,
        }
    }

    fn solver(&self) -> RidgeSolver {
        let o = &self.plan.cfg.options;
        match o.solver {
            SolverSpec::ClosedForm => RidgeSolver::ClosedForm,
            SolverSpec::Fedavg => RidgeSolver::FedAvg(FedAvgOptions {
                rounds: o.fedavg.rounds,
                local_steps: o.fedavg.local_steps,
                step_size: o.fedavg.step_size,
                tol: None,
            }),
        }
    }

    fn fit_lambda(&self, method: Method, prepared: &Prepared, lambda: f64) -> Result<Fitted, CoreError> {
        match prepared {
            Prepared::Fixed(_) => unreachable!("λ-independent"),
            Prepared::Itr { map, comm } => {
                let cfg = RidgeConfig {
                    lambda,
                    trunc: self.core_trunc(),
                    solver: self.solver(),
                };
                let fit = fit_itr(&self.data, map, &cfg)?;
                let ridge_comm = match &fit.fedavg {
                    Some(out) => totals(CommTotals::of(&out.comm)),
                    None => totals(replay_comm_schedule(
                        &ProtocolSpec::new(ProtocolKind::OneShotRidge { lambda }),
                        self.k(),
                        self.d(),
                    )),
                };
                let mut predictor: ItrPredictor = fit.predictor;
                for c in self.eval.iter() {
                    if predictor.effective_coefficients(c.id).is_err() {
                        predictor.add_client(c.id, &c.pattern)?;
                    }
                }
                let kind = match method {
                    Method::ItrZero => Some(PopulationImputer::Zero),
                    Method::ItrOptPop => Some(PopulationImputer::OptimalLinear),
                    _ => None,
                };
                let bound = match kind {
                    Some(kind) if !self.is_new => {
                        Some(itr_bound(&self.plan.pop, &self.fed, kind, lambda, self.n, self.m_bound)?.bound_value)
                    }
                    _ => None,
                };
                let linear = match predictor.trunc() {
                    None => Some(predictor.to_clientwise()?),
                    Some(_) => None,
                };
                Ok(Fitted {
                    predictor: Box::new(predictor),
                    linear,
                    bound,
                    comm: add(*comm, ridge_comm),
                })
            }
            Prepared::Local => {
                let mut p = local_learning(&self.data, lambda, RhoSource::True, self.core_trunc())?;
                for c in self.eval.iter() {
                    if p.theta(c.id).is_err() {
                        p.insert(c.id, c.pattern.clone(), DVector::zeros(c.pattern.len()))?;
                    }
                }
                let bound = if self.is_new {
                    None
                } else {
                    Some(local_bound_terms(&self.plan.pop, &self.fed, lambda, self.n, self.m_bound)?.upper)
                };
                Ok(Fitted::clientwise(p, bound, (0, 0)))
            }
        }
    }

    fn row(&self, method: Method, method_idx: usize, lambda: Option<(usize, f64)>) -> Row {
        Row {
            key: RowKey {
                replicate: self.item.replicate,
                tau_idx: self.item.tau_idx,
                n_idx: self.item.n_idx,
                lambda_idx: lambda.map_or(0, |l| l.0),
                method_idx,
            },
            scenario: self.plan.cfg.scenario.name(),
            seed: self.seed,
            n: Some(self.n),
            d: self.d(),
            k: self.k(),
            tau: self.plan.tau_value(self.item.tau_idx),
            lambda: lambda.map(|l| l.1),
            method: method.name(),
            mc_risk: None,
            mc_stderr: None,
            oracle_risk: None,
            bound_value: None,
            excess_risk: None,
            comm_floats_up: 0,
            comm_floats_down: 0,
            wall_ms: None,
        }
    }

    fn score(&self, fitted: &Fitted, mut row: Row) -> Result<Row, CoreError> {
        let opts = &self.plan.cfg.options;
        let mc = monte_carlo_risk(fitted.predictor.as_ref(), &self.plan.pop, &self.eval, opts.mc_draws, self.mc_seed)?;
        let excess = match &fitted.linear {
            Some(p) => clientwise_linear_risk(&self.plan.pop, &self.eval, p)?.1,
            None => mc.risk - self.oracle_risk,
        };
        row.mc_risk = Some(mc.risk);
        row.mc_stderr = Some(mc.stderr);
        row.oracle_risk = Some(self.oracle_risk);
        row.bound_value = fitted.bound;
        row.excess_risk = Some(excess);
        row.comm_floats_up = fitted.comm.0;
        row.comm_floats_down = fitted.comm.1;
        Ok(row)
    }

    fn validation_risk(&self, fitted: &Fitted) -> Result<f64, CoreError> {
        let draws = self.plan.cfg.options.validation_draws;
        Ok(monte_carlo_risk(fitted.predictor.as_ref(), &self.plan.pop, &self.fed, draws, self.validation_seed)?.risk)
    }

    fn run_method(&self, method: Method, method_idx: usize) -> Result<Vec<Row>, CoreError> {
        let timing = self.plan.cfg.options.timing;
        let start = Instant::now();
        let prepared = self.prepare(method)?;
        let prep_ms = start.elapsed().as_secs_f64() * 1e3;
        let lambdas = &self.plan.cfg.grid.lambda;
        let mut rows = Vec::new();
        match &prepared {
            Prepared::Fixed(fitted) => {
                let mut row = self.score(fitted, self.row(method, method_idx, None))?;
                if timing {
                    row.wall_ms = Some(start.elapsed().as_secs_f64() * 1e3);
                }
                rows.push(row);
            }
            _ if self.plan.cfg.options.tune_lambda => {
                let mut best: Option<(usize, f64, Fitted, f64)> = None;
                for (i, &lambda) in lambdas.iter().enumerate() {
                    let fitted = self.fit_lambda(method, &prepared, lambda)?;
                    let v = self.validation_risk(&fitted)?;
                    if best.as_ref().is_none_or(|b| v < b.1) {
                        best = Some((i, v, fitted, lambda));
                    }
                }
                let (i, _, fitted, lambda) = best.expect("non-empty λ grid");
                let mut row = self.score(&fitted, self.row(method, method_idx, Some((i, lambda))))?;
                if timing {
                    row.wall_ms = Some(start.elapsed().as_secs_f64() * 1e3);
                }
                rows.push(row);
            }
            _ => {
                for (i, &lambda) in lambdas.iter().enumerate() {
                    let t = Instant::now();
                    let fitted = self.fit_lambda(method, &prepared, lambda)?;
                    let mut row = self.score(&fitted, self.row(method, method_idx, Some((i, lambda))))?;
                    if timing {
                        row.wall_ms = Some(prep_ms + t.elapsed().as_secs_f64() * 1e3);
                    }
                    rows.push(row);
                }
            }
        }
        Ok(rows)
    }

    fn protocol_spec(&self, method: Method, lambda: f64) -> Result<ProtocolSpec, CoreError> {
        let o = &self.plan.cfg.options;
        let kind = match method {
            Method::OneShotMoments => ProtocolKind::OneShotMoments,
            Method::OneShotRidge => ProtocolKind::OneShotRidge { lambda },
            Method::FederatedIce => ProtocolKind::FederatedIce { rounds: o.ice_rounds },
            Method::FedavgRidge => {
                let step_size = match o.fedavg.step_size {
                    Some(s) => s,
                    None => {
                        let zero = zero_imputed_from_dataset(&self.data)?;
                        1.0 / (linalg::max_abs_eigenvalue(zero.sigma()) + lambda)
                    }
                };
                ProtocolKind::FedAvgRidge {
                    lambda,
                    rounds: o.fedavg.rounds,
                    local_steps: o.fedavg.local_steps,
                    step_size,
                }
            }
            _ => unreachable!("not a protocol"),
        };
        Ok(ProtocolSpec::new(kind))
    }

    /// Run one protocol over simulated clients and check its log against the
    /// closed-form schedule.
    fn audit(&self, method: Method, method_idx: usize, lambda: Option<(usize, f64)>) -> Result<Row, RunError> {
        let start = Instant::now();
        let wrap = |source| self.wrap(method, source);
        let spec = self.protocol_spec(method, lambda.map_or(0.0, |l| l.1)).map_err(wrap)?;
        let mut clients = SimClient::from_dataset(&self.data).map_err(wrap)?;
        let cfg = ServerConfig {
            inversion: self.plan.inversion,
            imputer: None,
        };
        let run = run_protocol(&spec, &mut clients, &cfg);
        let logged = CommTotals::of(run.comm());
        let predicted = replay_comm_schedule(&spec, self.k(), self.d());
        let result = run.result.map_err(wrap)?;
        if logged != predicted {
            return Err(RunError::CommMismatch {
                method: method.name().to_string(),
                logged,
                predicted,
            });
        }
        let fitted = match result {
            ProtocolResult::Moments { component_wise, .. } => {
                let mut fit = build_clientwise_plugin(&component_wise, &self.fed, &self.plugin_config()).map_err(wrap)?;
                for c in self.fed.iter() {
                    if fit.predictor.theta(c.id).is_err() {
                        fit.predictor
                            .insert(c.id, c.pattern.clone(), DVector::zeros(c.pattern.len()))
                            .map_err(wrap)?;
                    }
                }
                Some(Fitted::clientwise(fit.predictor, None, (0, 0)))
            }
            ProtocolResult::Ridge { theta } | ProtocolResult::FedAvg { theta } => {
                let p = ItrPredictor::new(fit_zero_imputer(&self.fed), theta, None).map_err(wrap)?;
                let linear = Some(p.to_clientwise().map_err(wrap)?);
                Some(Fitted {
                    predictor: Box::new(p),
                    linear,
                    bound: None,
                    comm: (0, 0),
                })
            }
            ProtocolResult::Ice { .. } => None,
        };
        let mut row = self.row(method, method_idx, lambda);
        if let Some(f) = fitted {
            row = self.score(&f, row).map_err(wrap)?;
        }
        row.comm_floats_up = logged.up;
        row.comm_floats_down = logged.down;
        if self.plan.cfg.options.timing {
            row.wall_ms = Some(start.elapsed().as_secs_f64() * 1e3);
        }
        Ok(row)
    }

    fn wrap(&self, method: Method, source: CoreError) -> RunError {
        RunError::Method {
            replicate: self.item.replicate,
            tau_idx: self.item.tau_idx,
            n_idx: self.item.n_idx,
            method: method.name().to_string(),
            source,
        }
    }
}

fn run_item(plan: &Plan, item: Item) -> Result<Vec<Row>, RunError> {
    let seed = plan.replicate_seed(item.replicate);
    let core = |method: &str, source| RunError::Method {
        replicate: item.replicate,
        tau_idx: item.tau_idx,
        n_idx: item.n_idx,
        method: method.to_string(),
        source,
    };
    let fed = plan.federation(item).map_err(|e| core("federation", e))?;
    if plan.cfg.scenario == Scenario::TypicalCaseSweep {
        return typical_case_rows(plan, item, seed, &fed).map_err(|e| core("itr-zero", e));
    }
    let eval = plan.evaluation_federation(&fed).map_err(|e| core("federation", e))?;
    let n = plan.cfg.grid.n[item.n_idx];
    let t = item.tau_idx as u64;
    let mut rng = seed::rng_from(seed, &[label("data"), t, item.n_idx as u64]);
    let data = sample_dataset(&plan.pop, &fed, n, &mut rng).map_err(|e| core("sampling", e))?;
    let trunc = match plan.cfg.options.truncation {
        TruncationSpec::None => None,
        TruncationSpec::Estimated => Some(estimate_m(&data).map_err(|e| core("truncation", e))?),
        TruncationSpec::Population => plan.pop.m_bound(),
        TruncationSpec::Fixed(m) => Some(m),
    };
    let m_bound = match trunc.or(plan.pop.m_bound()) {
        Some(m) => m,
        None => estimate_m(&data).map_err(|e| core("truncation", e))?,
    };
    let ctx = Ctx {
        plan,
        item,
        seed,
        is_new: plan.cfg.scenario == Scenario::NewClientGeneralization,
        oracle_risk: oracle_global_risk(&plan.pop, &eval).map_err(|e| core("oracle", e))?,
        fed,
        eval,
        data,
        n,
        trunc,
        m_bound,
        mc_seed: seed::derive(seed, &[label("mc"), t]),
        validation_seed: seed::derive(seed, &[label("validation"), t, item.n_idx as u64]),
    };
    let mut rows = Vec::new();
    for (idx, &method) in plan.methods.iter().enumerate() {
        if method.is_protocol() {
            if method.uses_lambda() {
                for (i, &l) in plan.cfg.grid.lambda.iter().enumerate() {
                    rows.push(ctx.audit(method, idx, Some((i, l)))?);
                }
            } else {
                rows.push(ctx.audit(method, idx, None)?);
            }
        } else {
            rows.extend(ctx.run_method(method, idx).map_err(|e| ctx.wrap(method, e))?);
        }
    }
    Ok(rows)
}

/// Population-level comparison of zero-imputed ridge against the
/// missingness-rate bound, one row per λ.
fn typical_case_rows(plan: &Plan, item: Item, seed: u64, fed: &Federation) -> Result<Vec<Row>, CoreError> {
    let pop = &plan.pop;
    let tau = plan.cfg.grid.tau[item.tau_idx];
    let imp = imputed_population_covariance(pop, fed, PopulationImputer::Zero)?;
    let mut rows = Vec::new();
    for (idx, &method) in plan.methods.iter().enumerate() {
        for (i, &lambda) in plan.cfg.grid.lambda.iter().enumerate() {
            let start = Instant::now();
            let risk = imp.r_star + ridge_bias(&imp.sigma, &imp.theta_prime, lambda)?;
            let lambda_prime = typical_case_lambda_prime(lambda, tau)?;
            let bound = pop.sigma2() + ridge_bias(pop.sigma(), pop.theta_star(), lambda_prime)?;
            rows.push(Row {
                key: RowKey {
                    replicate: item.replicate,
                    tau_idx: item.tau_idx,
                    n_idx: 0,
                    lambda_idx: i,
                    method_idx: idx,
                },
                scenario: plan.cfg.scenario.name(),
                seed,
                n: None,
                d: pop.dim(),
                k: fed.len(),
                tau: Some(tau),
                lambda: Some(lambda),
                method: method.name(),
                mc_risk: None,
                mc_stderr: None,
                oracle_risk: Some(risk),
                bound_value: Some(bound),
                excess_risk: None,
                comm_floats_up: 0,
                comm_floats_down: 0,
                wall_ms: plan.cfg.options.timing.then(|| start.elapsed().as_secs_f64() * 1e3),
            });
        }
    }
    Ok(rows)
}

/// Execute every work item and return the rows in canonical order.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<Row>, RunError> {
    let plan = Plan::new(cfg, opts)?;
    let items = plan.items();
    let work = || -> Result<Vec<Row>, RunError> {
        let chunks: Vec<Vec<Row>> = items
            .par_iter()
            .map(|&item| run_item(&plan, item))
            .collect::<Result<_, _>>()?;
        let mut rows: Vec<Row> = chunks.into_iter().flatten().collect();
        rows.sort_by_key(|r| r.key);
        Ok(rows)
    };
    match opts.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| RunError::ThreadPool(e.to_string()))?
            .install(work),
        None => work(),
    }
}

/// Run and write `<out_dir>/<output.file>`; returns the written path.
pub fn run_to_dir(cfg: &ExperimentConfig, out_dir: &Path, opts: &RunOptions) -> Result<PathBuf, RunError> {
    let mut rows = run_experiment(cfg, opts)?;
    let path = out_dir.join(cfg.output_file());
    let mut write = || -> csv::Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let file = std::fs::File::create(&path)?;
        write_csv(std::io::BufWriter::new(file), &mut rows)
    };
    write().map_err(|source| RunError::Write {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

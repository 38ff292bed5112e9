//! Experiment configuration: TOML schema, loading and validation.

use std::fmt;
use std::path::{Path, PathBuf};

use fedmismatch_core::linalg::{Inversion, DEFAULT_PINV_RTOL};
use fedmismatch_core::model::RHO_SUM_TOL;
use serde::{Deserialize, Serialize};

use crate::method::Method;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    ConsistencySweep,
    NewClientGeneralization,
    BoundVerification,
    LocalVsFederated,
    TypicalCaseSweep,
    CommAudit,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::ConsistencySweep => "consistency-sweep",
            Scenario::NewClientGeneralization => "new-client-generalization",
            Scenario::BoundVerification => "bound-verification",
            Scenario::LocalVsFederated => "local-vs-federated",
            Scenario::TypicalCaseSweep => "typical-case-sweep",
            Scenario::CommAudit => "comm-audit",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SigmaSpec {
    Identity,
    Equicorrelated { r: f64 },
    Toeplitz { r: f64 },
    /// Comma-separated `d × d` matrix, path relative to the config file.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ThetaSpec {
    Constant { value: f64 },
    /// `θ_j = scale · rate^(j-1)`.
    Decay { scale: f64, rate: f64 },
    Explicit { values: Vec<f64> },
    /// Entries uniform on `[-scale, scale]`, drawn once from the root seed.
    Random { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseSpec {
    Gaussian { variance: f64 },
    Uniform { half_width: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignSpec {
    Gaussian,
    BoundedSphere,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationConfig {
    pub d: usize,
    pub sigma: SigmaSpec,
    pub theta: ThetaSpec,
    pub noise: NoiseSpec,
    #[serde(default = "default_design")]
    pub design: DesignSpec,
}

fn default_design() -> DesignSpec {
    DesignSpec::Gaussian
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientsConfig {
    /// Number of clients; required when patterns are drawn from `tau`.
    pub k: Option<usize>,
    /// Mixture weights; uniform when absent.
    pub rho: Option<Vec<f64>>,
    /// Explicit 1-based observed sets, one per client.
    pub patterns: Option<Vec<Vec<usize>>>,
    /// Patterns of clients absent from training (1-based).
    pub new_patterns: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub n: Vec<usize>,
    #[serde(default = "default_lambda")]
    pub lambda: Vec<f64>,
    #[serde(default = "default_tau")]
    pub tau: Vec<f64>,
}

fn default_lambda() -> Vec<f64> {
    vec![0.0]
}

fn default_tau() -> Vec<f64> {
    vec![1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsConfig {
    #[serde(default)]
    pub root: u64,
    #[serde(default = "one")]
    pub replicates: usize,
}

impl Default for SeedsConfig {
    fn default() -> Self {
        SeedsConfig { root: 0, replicates: 1 }
    }
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruncationSpec {
    None,
    Estimated,
    /// Use the almost-sure bound of the generating population.
    Population,
    #[serde(untagged)]
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverSpec {
    ClosedForm,
    Fedavg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedAvgConfig {
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "one")]
    pub local_steps: usize,
    /// Defaults to `1/(λ_max(Σ̂^I) + λ)` computed on the imputed sample.
    pub step_size: Option<f64>,
}

fn default_rounds() -> usize {
    500
}

impl Default for FedAvgConfig {
    fn default() -> Self {
        FedAvgConfig {
            rounds: default_rounds(),
            local_steps: 1,
            step_size: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InversionKind {
    Pinv,
    Ridged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginOptions {
    #[serde(default = "default_inversion")]
    pub inversion: InversionKind,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub psd_projection: bool,
    pub constraint_radius: Option<f64>,
}

fn default_inversion() -> InversionKind {
    InversionKind::Pinv
}

fn default_tol() -> f64 {
    DEFAULT_PINV_RTOL
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for PluginOptions {
    fn default() -> Self {
        PluginOptions {
            inversion: default_inversion(),
            tol: default_tol(),
            eps: default_eps(),
            psd_projection: false,
            constraint_radius: None,
        }
    }
}

impl PluginOptions {
    pub fn inversion(&self) -> Inversion {
        match self.inversion {
            InversionKind::Pinv => Inversion::PseudoInverse { rel_tol: self.tol },
            InversionKind::Ridged => Inversion::Ridged { eps: self.eps },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Options {
    #[serde(default = "default_mc")]
    pub mc_draws: usize,
    /// Pick λ from `grid.lambda` per method by Monte Carlo risk on an
    /// independent validation draw.
    #[serde(default)]
    pub tune_lambda: bool,
    #[serde(default = "default_mc")]
    pub validation_draws: usize,
    #[serde(default = "default_trunc")]
    pub truncation: TruncationSpec,
    #[serde(default = "default_solver")]
    pub solver: SolverSpec,
    #[serde(default)]
    pub fedavg: FedAvgConfig,
    #[serde(default = "default_ice_rounds")]
    pub ice_rounds: usize,
    #[serde(default)]
    pub plugin: PluginOptions,
    /// Fill the `wall_ms` column; timings make CSVs non-reproducible.
    #[serde(default)]
    pub timing: bool,
}

fn default_mc() -> usize {
    20_000
}

fn default_trunc() -> TruncationSpec {
    TruncationSpec::None
}

fn default_solver() -> SolverSpec {
    SolverSpec::ClosedForm
}

fn default_ice_rounds() -> usize {
    5
}

impl Default for Options {
    fn default() -> Self {
        Options {
            mc_draws: default_mc(),
            tune_lambda: false,
            validation_draws: default_mc(),
            truncation: default_trunc(),
            solver: default_solver(),
            fedavg: FedAvgConfig::default(),
            ice_rounds: default_ice_rounds(),
            plugin: PluginOptions::default(),
            timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// File name of the CSV, placed in the output directory. Defaults to
    /// `<scenario>.csv`.
    pub file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub description: Option<String>,
    pub methods: Vec<String>,
    pub population: PopulationConfig,
    #[serde(default)]
    pub clients: ClientsConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub seeds: SeedsConfig,
    #[serde(default)]
    pub options: Options,
    #[serde(default)]
    pub output: OutputConfig,
    /// Directory relative paths are resolved against; not part of the file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// One violated constraint, named by its dotted field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }

    fn push(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.issues.push(Issue {
            field: field.into(),
            message: message.into(),
        });
    }

    pub fn mentions(&self, field: &str) -> bool {
        self.issues.iter().any(|i| i.field == field)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for issue in &self.issues {
            writeln!(f, "{issue}")?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration:\n{0}")]
    Invalid(ValidationReport),
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.base_dir = origin.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, path)
    }

    pub fn parsed_methods(&self) -> Vec<Method> {
        self.methods.iter().filter_map(|m| Method::parse(m)).collect()
    }

    pub fn output_file(&self) -> String {
        self.output
            .file
            .clone()
            .unwrap_or_else(|| format!("{}.csv", self.scenario.name()))
    }

    /// Every violated invariant; empty for a runnable configuration.
    pub fn validate(&self) -> ValidationReport {
        let mut r = ValidationReport::default();
        let d = self.population.d;
        if d == 0 {
            r.push("population.d", "must be >= 1");
        }

        // Methods.
        if self.methods.is_empty() {
            r.push("methods", "at least one method is required");
        }
        for (i, m) in self.methods.iter().enumerate() {
            match Method::parse(m) {
                None => r.push(format!("methods[{i}]"), format!("unknown method '{m}'")),
                Some(method) => {
                    if let Some(why) = method.unsupported_in(self.scenario) {
                        r.push(format!("methods[{i}]"), format!("'{m}': {why}"));
                    }
                }
            }
        }

        self.validate_population(&mut r);
        self.validate_clients(&mut r);

        // Grids.
        if self.scenario != Scenario::TypicalCaseSweep {
            if self.grid.n.is_empty() {
                r.push("grid.n", "must not be empty");
            }
            if self.grid.n.contains(&0) {
                r.push("grid.n", "sample sizes must be >= 1");
            }
        }
        if self.grid.lambda.is_empty() {
            r.push("grid.lambda", "must not be empty");
        }
        if self.grid.lambda.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            r.push("grid.lambda", "values must be finite and >= 0");
        }
        if self.grid.tau.is_empty() {
            r.push("grid.tau", "must not be empty");
        }
        if self.grid.tau.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            r.push("tau", "values must lie in (0, 1]");
        }
        if self.seeds.replicates == 0 {
            r.push("seeds.replicates", "must be >= 1");
        }

        // Options.
        let o = &self.options;
        if o.mc_draws < 2 {
            r.push("options.mc_draws", "must be >= 2");
        }
        if o.tune_lambda && o.validation_draws < 2 {
            r.push("options.validation_draws", "must be >= 2");
        }
        if let TruncationSpec::Fixed(m) = o.truncation {
            if !(m >= 0.0) {
                r.push("options.truncation", "a fixed bound must be >= 0");
            }
        }
        if o.truncation == TruncationSpec::Population
            && !(self.population.design == DesignSpec::BoundedSphere
                && matches!(self.population.noise, NoiseSpec::Uniform { .. }))
        {
            r.push(
                "options.truncation",
                "'population' needs the bounded-sphere design with uniform noise",
            );
        }
        if o.fedavg.rounds == 0 {
            r.push("options.fedavg.rounds", "must be >= 1");
        }
        if o.fedavg.local_steps == 0 {
            r.push("options.fedavg.local_steps", "must be >= 1");
        }
        if let Some(s) = o.fedavg.step_size {
            if !(s > 0.0) {
                r.push("options.fedavg.step_size", "must be > 0");
            }
        }
        if !(o.plugin.tol > 0.0) {
            r.push("options.plugin.tol", "must be > 0");
        }
        if !(o.plugin.eps > 0.0) {
            r.push("options.plugin.eps", "must be > 0");
        }
        if let Some(l) = o.plugin.constraint_radius {
            if !(l > 0.0) {
                r.push("options.plugin.constraint_radius", "must be > 0");
            }
        }
        if let Some(f) = &self.output.file {
            if f.is_empty() || f.contains(std::path::MAIN_SEPARATOR) || f.contains('/') {
                r.push("output.file", "must be a plain file name");
            }
        }
        r
    }

    fn validate_population(&self, r: &mut ValidationReport) {
        let p = &self.population;
        match &p.sigma {
            SigmaSpec::Identity => {}
            SigmaSpec::Equicorrelated { r: rho } => {
                let lower = if p.d > 1 { -1.0 / (p.d as f64 - 1.0) } else { -1.0 };
                if !(*rho >= lower && *rho <= 1.0) {
                    r.push("population.sigma.r", format!("must lie in [{lower}, 1] for a PSD matrix"));
                }
            }
            SigmaSpec::Toeplitz { r: rho } => {
                if !(rho.abs() < 1.0) {
                    r.push("population.sigma.r", "must satisfy |r| < 1");
                }
            }
            SigmaSpec::File { path } => {
                let full = self.base_dir.join(path);
                if !full.is_file() {
                    r.push("population.sigma.path", format!("{} does not exist", full.display()));
                }
            }
        }
        match &p.theta {
            ThetaSpec::Explicit { values } if values.len() != p.d => {
                r.push("population.theta.values", format!("expected {} entries, got {}", p.d, values.len()));
            }
            ThetaSpec::Random { scale } if !(*scale >= 0.0) => {
                r.push("population.theta.scale", "must be >= 0");
            }
            _ => {}
        }
        match p.noise {
            NoiseSpec::Gaussian { variance } if !(variance >= 0.0) => {
                r.push("population.noise.variance", "must be >= 0");
            }
            NoiseSpec::Uniform { half_width } if !(half_width >= 0.0) => {
                r.push("population.noise.half_width", "must be >= 0");
            }
            _ => {}
        }
    }

    fn validate_clients(&self, r: &mut ValidationReport) {
        let c = &self.clients;
        let d = self.population.d;
        let k = match (&c.patterns, c.k) {
            (Some(p), Some(k)) if p.len() != k => {
                r.push("clients.k", format!("{k} clients but {} patterns", p.len()));
                Some(p.len())
            }
            (Some(p), _) => Some(p.len()),
            (None, Some(k)) => Some(k),
            (None, None) => {
                r.push("clients.k", "required when patterns are drawn from tau");
                None
            }
        };
        if k == Some(0) {
            r.push("clients.k", "must be >= 1");
        }
        let check_patterns = |r: &mut ValidationReport, field: &str, patterns: &[Vec<usize>]| {
            for (i, p) in patterns.iter().enumerate() {
                let mut seen = p.clone();
                seen.sort_unstable();
                seen.dedup();
                if seen.len() != p.len() {
                    r.push(format!("{field}[{i}]"), "duplicate feature index");
                }
                if p.iter().any(|&j| j == 0 || j > d) {
                    r.push(format!("{field}[{i}]"), format!("indices are 1-based and must lie in 1..={d}"));
                }
            }
        };
        if let Some(p) = &c.patterns {
            check_patterns(r, "clients.patterns", p);
            if self.grid.tau != default_tau() {
                r.push("tau", "explicit patterns cannot be combined with a tau grid");
            }
        }
        if let Some(p) = &c.new_patterns {
            check_patterns(r, "clients.new_patterns", p);
            if p.is_empty() {
                r.push("clients.new_patterns", "must not be empty when given");
            }
        } else if self.scenario == Scenario::NewClientGeneralization {
            r.push("clients.new_patterns", "required by new-client-generalization");
        }
        if let Some(rho) = &c.rho {
            if let Some(k) = k {
                if rho.len() != k {
                    r.push("clients.rho", format!("expected {k} weights, got {}", rho.len()));
                }
            }
            if rho.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
                r.push("clients.rho", "weights must lie in (0, 1]");
            }
            let sum: f64 = rho.iter().sum();
            if (sum - 1.0).abs() > RHO_SUM_TOL.max(1e-9) {
                r.push("clients.rho", format!("weights sum to {sum}, not 1"));
            }
        }
    }
}

//! Cropped plug-in predictors: `θ̂^(k) = (Σ̂_obs)^{-1} γ̂_obs` for each
//! client pattern, and the norm-constrained variant solved by projected
//! gradient descent.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, Inversion};
use crate::model::{ClientwisePredictor, FeaturePattern, Federation, MomentPair};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PluginConfig {
    pub inversion: Inversion,
    /// Eigen-clip the cropped covariance at zero before inverting.
    pub psd_projection: bool,
    /// Solve the norm-constrained program on the ball of this radius instead.
    pub constraint_radius: Option<f64>,
    pub pgd: PgdOptions,
}

impl PluginConfig {
    pub fn validate(&self) -> Result<()> {
        self.inversion.validate()?;
        if let Some(l) = self.constraint_radius {
            if !(l > 0.0) {
                return Err(Error::param("constraint_L", "must be > 0"));
            }
        }
        self.pgd.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgdOptions {
    pub max_iter: usize,
    /// Stop once the gradient-mapping norm falls below this.
    pub tol: f64,
}

impl Default for PgdOptions {
    fn default() -> Self {
        PgdOptions {
            max_iter: 10_000,
            tol: 1e-9,
        }
    }
}

impl PgdOptions {
    fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::param("pgd.max_iter", "must be >= 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::param("pgd.tol", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropFit {
    pub theta: DVector<f64>,
    /// The requested inversion failed and the pseudoinverse was used.
    pub pinv_fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedFit {
    pub theta: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_mapping_norm: f64,
}

fn cropped(moments: &MomentPair, pattern: &FeaturePattern, psd_projection: bool) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if pattern.dim() != moments.dim() {
        return Err(Error::DimensionMismatch {
            expected: moments.dim(),
            got: pattern.dim(),
        });
    }
    let obs = pattern.observed();
    let mut s = linalg::submatrix(moments.sigma(), obs, obs);
    if psd_projection {
        s = linalg::clip_psd(&linalg::symmetrize(&s));
    }
    Ok((s, linalg::subvector(moments.gamma(), obs)))
}

/// Plug-in coefficients for `pattern`, which need not belong to any
/// training client.
pub fn crop_predictor(moments: &MomentPair, pattern: &FeaturePattern, cfg: &PluginConfig) -> Result<CropFit> {
    cfg.validate()?;
    if let Some(radius) = cfg.constraint_radius {
        let fit = constrained_crop_predictor(moments, pattern, radius, cfg.pgd, cfg.psd_projection)?;
        return Ok(CropFit {
            theta: fit.theta,
            pinv_fallback: false,
        });
    }
    let (s, g) = cropped(moments, pattern, cfg.psd_projection)?;
    let solved = linalg::solve_sym(&s, &g, cfg.inversion)?;
    Ok(CropFit {
        theta: solved.x,
        pinv_fallback: solved.pinv_fallback,
    })
}

fn objective(a: &DMatrix<f64>, b: &DVector<f64>, theta: &DVector<f64>) -> f64 {
    theta.dot(&(a * theta)) - 2.0 * b.dot(theta)
}

fn project(theta: &mut DVector<f64>, radius: f64) {
    let norm = theta.norm();
    if norm > radius {
        *theta *= radius / norm;
    }
}

fn pgd_from(a: &DMatrix<f64>, b: &DVector<f64>, radius: f64, start: DVector<f64>, step: f64, opt: PgdOptions) -> ConstrainedFit {
    let mut theta = start;
    project(&mut theta, radius);
    let mut best = theta.clone();
    let mut best_obj = objective(a, b, &theta);
    let mut gm = f64::INFINITY;
    let mut iterations = 0;
    while iterations < opt.max_iter {
        let grad = a * &theta - b;
        let mut next = &theta - &grad * step;
        project(&mut next, radius);
        gm = (&theta - &next).norm() / step;
        iterations += 1;
        theta = next;
        let obj = objective(a, b, &theta);
        if obj <= best_obj {
            best_obj = obj;
            best = theta.clone();
        }
        if gm <= opt.tol {
            break;
        }
    }
    let converged = gm <= opt.tol;
    ConstrainedFit {
        theta: if converged { theta.clone() } else { best },
        objective: if converged { objective(a, b, &theta) } else { best_obj },
        iterations,
        converged,
        grad_mapping_norm: gm,
    }
}

/// Minimise `θᵀΣ̂_obs θ − 2γ̂_obsᵀθ` over `‖θ‖₂ ≤ radius`.
///
/// When `Σ̂_obs` is indefinite the program is nonconvex, so besides the
/// origin the descent is also started from both ends of the most negative
/// eigendirection and the best stationary point is kept.
pub fn constrained_crop_predictor(
    moments: &MomentPair,
    pattern: &FeaturePattern,
    radius: f64,
    opt: PgdOptions,
    psd_projection: bool,
) -> Result<ConstrainedFit> {
    if !(radius > 0.0) {
        return Err(Error::param("constraint_L", "must be > 0"));
    }
    opt.validate()?;
    let (a, b) = cropped(moments, pattern, psd_projection)?;
    minimize_on_ball(&a, &b, radius, opt)
}

pub fn minimize_on_ball(a: &DMatrix<f64>, b: &DVector<f64>, radius: f64, opt: PgdOptions) -> Result<ConstrainedFit> {
    let p = b.len();
    if p == 0 {
        return Ok(ConstrainedFit {
            theta: DVector::zeros(0),
            objective: 0.0,
            iterations: 0,
            converged: true,
            grad_mapping_norm: 0.0,
        });
    }
    let (vals, vecs) = linalg::sym_eigen(a);
    let lmax = vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if lmax == 0.0 {
        // Linear objective: the minimiser is radius · b / ‖b‖.
        let nb = b.norm();
        let theta = if nb > 0.0 { b * (radius / nb) } else { DVector::zeros(p) };
        return Ok(ConstrainedFit {
            objective: objective(a, b, &theta),
            theta,
            iterations: 0,
            converged: true,
            grad_mapping_norm: 0.0,
        });
    }
    let step = 1.0 / lmax;
    let mut starts = vec![DVector::zeros(p)];
    if vals[p - 1] < 0.0 {
        let v = vecs.column(p - 1).into_owned();
        starts.push(&v * radius);
        starts.push(&v * -radius);
    }
    let mut best: Option<ConstrainedFit> = None;
    for s in starts {
        let fit = pgd_from(a, b, radius, s, step, opt);
        let better = match &best {
            None => true,
            Some(cur) => fit.objective < cur.objective - 1e-14 * (1.0 + cur.objective.abs()),
        };
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one start"))
}

/// Outcome of fitting one plug-in predictor per client.
#[derive(Debug, Clone, PartialEq)]
pub struct PluginFit {
    pub predictor: ClientwisePredictor,
    /// Clients whose pattern contains a pair never co-observed: `(client, l, j)`.
    pub unidentifiable: Vec<(usize, usize, usize)>,
    /// Clients whose solve fell back to the pseudoinverse.
    pub pinv_fallbacks: Vec<usize>,
}

impl PluginFit {
    /// Fit a predictor for a client that was not part of training.
    pub fn add_client(
        &mut self,
        moments: &MomentPair,
        id: usize,
        pattern: &FeaturePattern,
        cfg: &PluginConfig,
    ) -> Result<()> {
        if let Some((l, j)) = moments.first_gap(pattern) {
            return Err(Error::Unidentifiable { client: id, l, j });
        }
        let fit = crop_predictor(moments, pattern, cfg)?;
        if fit.pinv_fallback {
            self.pinv_fallbacks.push(id);
        }
        self.predictor.insert(id, pattern.clone(), fit.theta)
    }
}

/// One plug-in predictor per federation client. Unidentifiable clients are
/// reported and left out of the predictor.
pub fn build_clientwise_plugin(moments: &MomentPair, federation: &Federation, cfg: &PluginConfig) -> Result<PluginFit> {
    cfg.validate()?;
    let mut out = PluginFit {
        predictor: ClientwisePredictor::new(None)?,
        unidentifiable: Vec::new(),
        pinv_fallbacks: Vec::new(),
    };
    for c in federation.iter() {
        match out.add_client(moments, c.id, &c.pattern, cfg) {
            Err(Error::Unidentifiable { client, l, j }) => out.unidentifiable.push((client, l, j)),
            other => other?,
        }
    }
    Ok(out)
}

//! Exact population quantities: best local coefficients, Schur-complement
//! risks, effective dimension, ridge bias, covariances of imputed features,
//! the resulting risk bounds, and Monte Carlo risk estimation.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::impute::ImputationMap;
use crate::linalg;
use crate::model::{ClientwisePredictor, FeaturePattern, Federation, Predict};
use crate::popgen::{co_observation_matrix, PopulationSpec};
use crate::seed;

const PINV_TOL: f64 = 1e-12;

/// `θ★^(k) = Σ_obs^{-1} γ_obs`. When `Σ_obs` is well conditioned the second
/// representation `θ★_obs + Σ_obs^{-1} Σ_obs,mis θ★_mis` is also evaluated
/// and the two must agree.
pub fn best_local_coefficients(pop: &PopulationSpec, pattern: &FeaturePattern) -> Result<DVector<f64>> {
    check_dim(pop, pattern)?;
    let obs = pattern.observed();
    if obs.is_empty() {
        return Ok(DVector::zeros(0));
    }
    let mis = pattern.missing();
    let sigma = pop.sigma();
    let s_obs = linalg::submatrix(sigma, obs, obs);
    let inv = linalg::pinv(&s_obs, PINV_TOL)?;
    let first = &inv * linalg::subvector(&pop.gamma(), obs);
    let (vals, _) = linalg::sym_eigen(&s_obs);
    let cond = vals[0] / vals[vals.len() - 1].max(f64::MIN_POSITIVE);
    if cond < 1e6 {
        let theta = pop.theta_star();
        let second = linalg::subvector(theta, obs)
            + &inv * linalg::submatrix(sigma, obs, &mis) * linalg::subvector(theta, &mis);
        let scale = 1.0 + first.amax();
        if (&first - &second).amax() > 1e-10 * scale {
            return Err(Error::Numerical(format!(
                "best local coefficients disagree across representations for {pattern}"
            )));
        }
    }
    Ok(first)
}

fn check_dim(pop: &PopulationSpec, pattern: &FeaturePattern) -> Result<()> {
    if pattern.dim() != pop.dim() {
        return Err(Error::DimensionMismatch {
            expected: pop.dim(),
            got: pattern.dim(),
        });
    }
    Ok(())
}

/// `V_k = Σ_mis − Σ_mis,obs Σ_obs^† Σ_obs,mis`, of size `|mis| × |mis|`.
pub fn schur_complement(sigma: &DMatrix<f64>, pattern: &FeaturePattern) -> Result<DMatrix<f64>> {
    let obs = pattern.observed();
    let mis = pattern.missing();
    let s_mis = linalg::submatrix(sigma, &mis, &mis);
    if obs.is_empty() {
        return Ok(s_mis);
    }
    let inv = linalg::pinv(&linalg::submatrix(sigma, obs, obs), PINV_TOL)?;
    let cross = linalg::submatrix(sigma, &mis, obs);
    Ok(linalg::symmetrize(&(s_mis - &cross * inv * cross.transpose())))
}

/// `R★^(k) = σ² + θ★_misᵀ V_k θ★_mis`.
pub fn oracle_local_risk(pop: &PopulationSpec, pattern: &FeaturePattern) -> Result<f64> {
    check_dim(pop, pattern)?;
    let v = schur_complement(pop.sigma(), pattern)?;
    let t = linalg::subvector(pop.theta_star(), &pattern.missing());
    Ok(pop.sigma2() + t.dot(&(v * &t)))
}

/// `R★(F_lin) = Σ_k ρ_k R★^(k)`.
pub fn oracle_global_risk(pop: &PopulationSpec, federation: &Federation) -> Result<f64> {
    federation
        .iter()
        .map(|c| Ok(c.rho * oracle_local_risk(pop, &c.pattern)?))
        .sum()
}

/// Relative eigenvalue cutoff used for the rank at `λ = 0`.
const RANK_TOL: f64 = 1e-10;

/// `Tr(Σ(Σ+λI)^{-1}) = Σ_j μ_j/(μ_j+λ)`; negative eigenvalues are clipped.
/// At `λ = 0` this is the numerical rank.
pub fn effective_dimension(sigma: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::param("lambda", "must be >= 0"));
    }
    let (vals, _) = linalg::sym_eigen(sigma);
    let top = vals.iter().fold(0.0_f64, |m, v| m.max(*v));
    Ok(vals
        .iter()
        .map(|&mu| {
            let mu = mu.max(0.0);
            if lambda == 0.0 {
                if top > 0.0 && mu > RANK_TOL * top {
                    1.0
                } else {
                    0.0
                }
            } else {
                mu / (mu + lambda)
            }
        })
        .sum())
}

/// `inf_θ {‖θ − θ_ref‖²_Σ + λ‖θ‖²} = λ θ_refᵀ Σ(Σ+λI)^{-1} θ_ref`.
pub fn ridge_bias(sigma: &DMatrix<f64>, theta_ref: &DVector<f64>, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::param("lambda", "must be >= 0"));
    }
    if theta_ref.len() != sigma.nrows() {
        return Err(Error::DimensionMismatch {
            expected: sigma.nrows(),
            got: theta_ref.len(),
        });
    }
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let (vals, vecs) = linalg::sym_eigen(sigma);
    Ok(vals
        .iter()
        .enumerate()
        .map(|(j, &mu)| {
            let mu = mu.max(0.0);
            let c = vecs.column(j).dot(theta_ref);
            lambda * mu / (mu + lambda) * c * c
        })
        .sum())
}

/// Imputers whose population covariance has a closed form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PopulationImputer {
    Zero,
    OptimalLinear,
    Ice,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputedPopulation {
    /// `Σ^I = E[X̃X̃ᵀ]`.
    pub sigma: DMatrix<f64>,
    /// `γ^I = E[X̃Y]`.
    pub gamma: DVector<f64>,
    /// Best linear coefficients on the imputed features.
    pub theta_prime: DVector<f64>,
    /// `R★(F_I) = E Y² − θ′ᵀ Σ^I θ′`.
    pub r_star: f64,
}

/// `(Σ^I, γ^I)` for an arbitrary per-client linear imputation map:
/// `Σ_k ρ_k A_k Σ A_kᵀ` and `Σ_k ρ_k A_k γ`, with `A_k x = (x_obs, S_k x_obs)`.
pub fn imputed_moments_for_map(pop: &PopulationSpec, federation: &Federation, map: &ImputationMap) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let d = pop.dim();
    let gamma = pop.gamma();
    let mut sigma_i = DMatrix::zeros(d, d);
    let mut gamma_i = DVector::zeros(d);
    for c in federation.iter() {
        let pm = map.get(c.id)?;
        let a = lift_matrix(&pm.pattern, &pm.s);
        sigma_i += (&a * pop.sigma() * a.transpose()) * c.rho;
        gamma_i += (&a * &gamma) * c.rho;
    }
    Ok((linalg::symmetrize(&sigma_i), gamma_i))
}

/// `d × d` matrix `A` with `A x = φ(x_obs)`: identity rows on observed
/// coordinates, `S` rows (placed on observed columns) on missing ones.
fn lift_matrix(pattern: &FeaturePattern, s: &DMatrix<f64>) -> DMatrix<f64> {
    let d = pattern.dim();
    let obs = pattern.observed();
    let mut a = DMatrix::zeros(d, d);
    for &j in obs {
        a[(j, j)] = 1.0;
    }
    for (r, j) in pattern.missing().into_iter().enumerate() {
        for (c, &o) in obs.iter().enumerate() {
            a[(j, o)] = s[(r, c)];
        }
    }
    a
}

pub fn imputed_population_covariance(
    pop: &PopulationSpec,
    federation: &Federation,
    kind: PopulationImputer,
) -> Result<ImputedPopulation> {
    let d = pop.dim();
    if federation.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: federation.dim(),
        });
    }
    let ey2 = pop.expected_y2();
    match kind {
        PopulationImputer::Zero => {
            let pi = co_observation_matrix(federation);
            let sigma = pi.component_mul(pop.sigma());
            let gamma = pi.diagonal().component_mul(&pop.gamma());
            let theta_prime = linalg::pinv(&sigma, PINV_TOL)? * &gamma;
            let r_star = ey2 - theta_prime.dot(&(&sigma * &theta_prime));
            Ok(ImputedPopulation {
                sigma,
                gamma,
                theta_prime,
                r_star,
            })
        }
        PopulationImputer::OptimalLinear => {
            let mut sigma = DMatrix::zeros(d, d);
            let mut gamma = DVector::zeros(d);
            let full = pop.sigma();
            let g = pop.gamma();
            for c in federation.iter() {
                let obs = c.pattern.observed();
                let mis = c.pattern.missing();
                let mut block = DMatrix::zeros(d, d);
                let mut gb = DVector::zeros(d);
                for &l in obs {
                    gb[l] = g[l];
                    for &j in obs {
                        block[(l, j)] = full[(l, j)];
                    }
                    for &j in &mis {
                        block[(l, j)] = full[(l, j)];
                        block[(j, l)] = full[(j, l)];
                    }
                }
                if !obs.is_empty() && !mis.is_empty() {
                    let inv = linalg::pinv(&linalg::submatrix(full, obs, obs), PINV_TOL)?;
                    let cross = linalg::submatrix(full, &mis, obs);
                    let mm = &cross * &inv * cross.transpose();
                    let gm = &cross * &inv * linalg::subvector(&g, obs);
                    for (a, &l) in mis.iter().enumerate() {
                        gb[l] = gm[a];
                        for (b, &j) in mis.iter().enumerate() {
                            block[(l, j)] = mm[(a, b)];
                        }
                    }
                } else if obs.is_empty() {
                    block.fill(0.0);
                }
                sigma += block * c.rho;
                gamma += gb * c.rho;
            }
            let sigma = linalg::symmetrize(&sigma);
            let theta_prime = pop.theta_star().clone();
            let r_star = ey2 - theta_prime.dot(&(&sigma * &theta_prime));
            Ok(ImputedPopulation {
                sigma,
                gamma,
                theta_prime,
                r_star,
            })
        }
        PopulationImputer::Ice => Err(Error::Unsupported(
            "the population covariance of ICE-imputed features has no closed form".into(),
        )),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub r_star_global: f64,
    pub per_client_r_star: Vec<(usize, f64)>,
    /// `R★(F_I)`, the reference the excess risk is measured against.
    pub r_star_imputed: f64,
    pub b_lambda: f64,
    pub d_lambda: f64,
    pub bound_value: f64,
    pub mc_risk: Option<f64>,
    pub mc_stderr: Option<f64>,
    pub satisfied: Option<bool>,
}

impl BoundReport {
    /// Attach a Monte Carlo risk; satisfied iff `risk ≤ bound + 3·stderr`.
    pub fn with_mc(mut self, risk: f64, stderr: f64) -> Self {
        self.mc_risk = Some(risk);
        self.mc_stderr = Some(stderr);
        self.satisfied = Some(risk <= self.bound_value + 3.0 * stderr);
        self
    }
}

/// Risk bound for impute-then-regress ridge:
/// `R★(F_I) + B_λ^I + (8M²/n) d_λ^I`.
pub fn itr_bound(
    pop: &PopulationSpec,
    federation: &Federation,
    kind: PopulationImputer,
    lambda: f64,
    n: usize,
    m: f64,
) -> Result<BoundReport> {
    if n == 0 {
        return Err(Error::param("n", "must be >= 1"));
    }
    let imp = imputed_population_covariance(pop, federation, kind)?;
    let b_lambda = ridge_bias(&imp.sigma, &imp.theta_prime, lambda)?;
    let d_lambda = effective_dimension(&imp.sigma, lambda)?;
    let per_client_r_star = federation
        .iter()
        .map(|c| Ok((c.id, oracle_local_risk(pop, &c.pattern)?)))
        .collect::<Result<Vec<_>>>()?;
    let r_star_global = per_client_r_star
        .iter()
        .zip(federation.iter())
        .map(|((_, r), c)| c.rho * r)
        .sum();
    Ok(BoundReport {
        r_star_global,
        per_client_r_star,
        r_star_imputed: imp.r_star,
        b_lambda,
        d_lambda,
        bound_value: imp.r_star + b_lambda + 8.0 * m * m * d_lambda / n as f64,
        mc_risk: None,
        mc_stderr: None,
        satisfied: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalBoundTerms {
    /// `Σ_k ρ_k (1−ρ_k)^n E Y²`.
    pub e0: f64,
    /// `Σ_k d^(k)_{λ_k}`.
    pub sum_d: f64,
    /// `Σ_k ρ_k (R★^(k) + B^(k)_{λ_k})`.
    pub risk_plus_bias: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Terms of the local-learning risk bounds with `λ_k = λ/ρ_k`, where
/// `B^(k)` and `d^(k)` are computed on `Σ_obs(k)` with reference `θ★^(k)`.
pub fn local_bound_terms(pop: &PopulationSpec, federation: &Federation, lambda: f64, n: usize, m: f64) -> Result<LocalBoundTerms> {
    if !(lambda >= 0.0) {
        return Err(Error::param("lambda", "must be >= 0"));
    }
    if n == 0 {
        return Err(Error::param("n", "must be >= 1"));
    }
    let ey2 = pop.expected_y2();
    let mut e0 = 0.0;
    let mut sum_d = 0.0;
    let mut risk_plus_bias = 0.0;
    for c in federation.iter().filter(|c| c.rho > 0.0) {
        e0 += c.rho * (1.0 - c.rho).powi(n as i32) * ey2;
        let lambda_k = lambda / c.rho;
        let obs = c.pattern.observed();
        let s_obs = linalg::submatrix(pop.sigma(), obs, obs);
        let theta_k = best_local_coefficients(pop, &c.pattern)?;
        sum_d += effective_dimension(&s_obs, lambda_k)?;
        risk_plus_bias += c.rho * (oracle_local_risk(pop, &c.pattern)? + ridge_bias(&s_obs, &theta_k, lambda_k)?);
    }
    Ok(LocalBoundTerms {
        e0,
        sum_d,
        risk_plus_bias,
        lower: e0,
        upper: e0 + 16.0 * m * m / n as f64 * sum_d + risk_plus_bias,
    })
}

/// `λ′ = λ/τ² + (1−τ)/τ`.
pub fn typical_case_lambda_prime(lambda: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::param("tau", "must lie in (0, 1]"));
    }
    if !(lambda >= 0.0) {
        return Err(Error::param("lambda", "must be >= 0"));
    }
    Ok(lambda / (tau * tau) + (1.0 - tau) / tau)
}

/// Exact risk of an untruncated client-wise linear predictor:
/// `Σ_k ρ_k (R★^(k) + ‖θ^(k) − θ★^(k)‖²_{Σ_obs(k)})`. Returns the risk and the
/// excess part.
pub fn clientwise_linear_risk(pop: &PopulationSpec, federation: &Federation, predictor: &ClientwisePredictor) -> Result<(f64, f64)> {
    let mut risk = 0.0;
    let mut excess = 0.0;
    for c in federation.iter() {
        let theta = predictor.theta(c.id)?;
        let best = best_local_coefficients(pop, &c.pattern)?;
        let obs = c.pattern.observed();
        let diff = theta - best;
        let e = diff.dot(&(linalg::submatrix(pop.sigma(), obs, obs) * &diff));
        excess += c.rho * e;
        risk += c.rho * (oracle_local_risk(pop, &c.pattern)? + e);
    }
    Ok((risk, excess))
}

#[derive(Debug, Clone, PartialEq)]
pub struct McRisk {
    pub risk: f64,
    pub stderr: f64,
    /// `(client, conditional risk, stderr)` in federation order.
    pub per_client: Vec<(usize, f64, f64)>,
}

const MC_CHUNK: usize = 4096;

#[derive(Clone)]
struct Accum {
    global: f64,
    global_sq: f64,
    client: Vec<f64>,
    client_sq: Vec<f64>,
}

/// Monte Carlo estimate of `R(f) = Σ_k ρ_k E[(Y − f^(k)(X_obs(k)))²]`.
///
/// Each population draw `(X, Y)` is scored at every client, and the global
/// loss of the draw is the `ρ`-weighted sum of those losses. Averaging over
/// the client index analytically keeps the estimator unbiased, lowers its
/// variance, and makes the global estimate equal the `ρ`-weighted average of
/// the per-client estimates on the same draws. Draws are generated in fixed
/// chunks with per-chunk seeds and reduced in chunk order.
pub fn monte_carlo_risk<P: Predict + Sync + ?Sized>(
    predictor: &P,
    pop: &PopulationSpec,
    federation: &Federation,
    n_mc: usize,
    seed: u64,
) -> Result<McRisk> {
    if n_mc < 2 {
        return Err(Error::param("n_mc", "must be >= 2"));
    }
    let d = pop.dim();
    let k = federation.len();
    let chunks = n_mc.div_ceil(MC_CHUNK);
    let rhos = federation.rhos();
    let partials: Vec<Accum> = (0..chunks)
        .into_par_iter()
        .map(|c| -> Result<Accum> {
            let mut rng = seed::rng_from(seed, &[seed::label("mc-risk"), c as u64]);
            let count = MC_CHUNK.min(n_mc - c * MC_CHUNK);
            let mut acc = Accum {
                global: 0.0,
                global_sq: 0.0,
                client: vec![0.0; k],
                client_sq: vec![0.0; k],
            };
            let mut z = vec![0.0; d];
            let mut x = vec![0.0; d];
            let mut buf = Vec::with_capacity(d);
            for _ in 0..count {
                let y = pop.draw_into(&mut rng, &mut z, &mut x);
                let mut g = 0.0;
                for (i, spec) in federation.iter().enumerate() {
                    buf.clear();
                    buf.extend(spec.pattern.observed().iter().map(|&j| x[j]));
                    let r = y - predictor.predict(spec.id, &buf)?;
                    let loss = r * r;
                    acc.client[i] += loss;
                    acc.client_sq[i] += loss * loss;
                    g += rhos[i] * loss;
                }
                acc.global += g;
                acc.global_sq += g * g;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = Accum {
        global: 0.0,
        global_sq: 0.0,
        client: vec![0.0; k],
        client_sq: vec![0.0; k],
    };
    for p in &partials {
        total.global += p.global;
        total.global_sq += p.global_sq;
        for i in 0..k {
            total.client[i] += p.client[i];
            total.client_sq[i] += p.client_sq[i];
        }
    }
    let nf = n_mc as f64;
    let stderr = |sum: f64, sq: f64| {
        let mean = sum / nf;
        let var = ((sq - nf * mean * mean) / (nf - 1.0)).max(0.0);
        (var / nf).sqrt()
    };
    let per_client: Vec<(usize, f64, f64)> = federation
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id, total.client[i] / nf, stderr(total.client[i], total.client_sq[i])))
        .collect();
    Ok(McRisk {
        risk: total.global / nf,
        stderr: stderr(total.global, total.global_sq),
        per_client,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::impute::{fit_optimal_imputer, fit_zero_imputer, CovarianceSource};
    use crate::linalg::Inversion;
    use crate::popgen::{Design, Noise};
    use crate::seed::rng_from;
    use rand::Rng;

    fn pat(d: usize, one: &[usize]) -> FeaturePattern {
        FeaturePattern::from_one_based(d, one).unwrap()
    }

    fn pop2(r: f64, theta: [f64; 2]) -> PopulationSpec {
        PopulationSpec::new(
            DMatrix::from_row_slice(2, 2, &[1.0, r, r, 1.0]),
            DVector::from_vec(theta.to_vec()),
            Noise::Gaussian { variance: 1.0 },
            Design::Gaussian,
        )
        .unwrap()
    }

    #[test]
    fn best_local_coefficient_examples() {
        let p = pop2(0.0, [1.0, 2.0]);
        assert_eq!(best_local_coefficients(&p, &pat(2, &[1])).unwrap().as_slice(), &[1.0]);
        let p = pop2(0.5, [1.0, 1.0]);
        assert!((best_local_coefficients(&p, &pat(2, &[1])).unwrap()[0] - 1.5).abs() < 1e-14);
        let full = best_local_coefficients(&p, &FeaturePattern::full(2)).unwrap();
        assert!((full - p.theta_star()).amax() < 1e-14);
    }

    #[test]
    fn schur_and_local_risk_examples() {
        let i2 = DMatrix::identity(2, 2);
        assert_eq!(schur_complement(&i2, &pat(2, &[1])).unwrap(), DMatrix::from_element(1, 1, 1.0));
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        assert!((schur_complement(&s, &pat(2, &[1])).unwrap()[(0, 0)] - 0.75).abs() < 1e-15);
        assert_eq!(schur_complement(&s, &FeaturePattern::full(2)).unwrap().nrows(), 0);

        assert!((oracle_local_risk(&pop2(0.0, [1.0, 2.0]), &pat(2, &[1])).unwrap() - 5.0).abs() < 1e-14);
        let p = pop2(0.5, [1.0, 1.0]);
        assert!((oracle_local_risk(&p, &FeaturePattern::full(2)).unwrap() - 1.0).abs() < 1e-15);
        assert!((oracle_local_risk(&p, &pat(2, &[1])).unwrap() - 1.75).abs() < 1e-14);
    }

    #[test]
    fn global_risk_examples() {
        let p = pop2(0.5, [1.0, 1.0]);
        let one = Federation::uniform(vec![FeaturePattern::full(2)]).unwrap();
        assert!((oracle_global_risk(&p, &one).unwrap() - 1.0).abs() < 1e-15);
        let two = Federation::uniform(vec![pat(2, &[1]), FeaturePattern::full(2)]).unwrap();
        assert!((oracle_global_risk(&p, &two).unwrap() - 1.375).abs() < 1e-14);
        let empty = Federation::uniform(vec![FeaturePattern::empty(2)]).unwrap();
        assert!((oracle_global_risk(&p, &empty).unwrap() - p.expected_y2()).abs() < 1e-14);
    }

    #[test]
    fn effective_dimension_examples() {
        assert_eq!(effective_dimension(&DMatrix::identity(3, 3), 0.0).unwrap(), 3.0);
        assert!((effective_dimension(&DMatrix::identity(4, 4), 1.0).unwrap() - 2.0).abs() < 1e-15);
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        assert!(effective_dimension(&s, 1e9 * 2.1).unwrap() <= 1e-6);
        let rank_one = DMatrix::from_element(3, 3, 1.0);
        assert_eq!(effective_dimension(&rank_one, 0.0).unwrap(), 1.0);
        assert!(effective_dimension(&s, -1.0).is_err());
    }

    #[test]
    fn ridge_bias_examples() {
        let s = DMatrix::identity(1, 1);
        let t = DVector::from_vec(vec![1.0]);
        assert_eq!(ridge_bias(&s, &t, 0.0).unwrap(), 0.0);
        assert!((ridge_bias(&s, &t, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(ridge_bias(&s, &DVector::zeros(1), 1.0).unwrap(), 0.0);
    }

    #[test]
    fn imputed_covariance_examples() {
        let p = pop2(0.5, [1.0, 1.0]);
        let full = Federation::uniform(vec![FeaturePattern::full(2)]).unwrap();
        let z = imputed_population_covariance(&p, &full, PopulationImputer::Zero).unwrap();
        assert!((z.sigma - p.sigma()).amax() < 1e-15);
        let one = Federation::uniform(vec![pat(2, &[1])]).unwrap();
        let opt = imputed_population_covariance(&p, &one, PopulationImputer::OptimalLinear).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 0.25]);
        assert!((opt.sigma - expect).amax() < 1e-15);
        assert!(matches!(
            imputed_population_covariance(&p, &one, PopulationImputer::Ice),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn block_formula_matches_generic_lift() {
        let mut rng = rng_from(31, &[]);
        for _ in 0..20 {
            let d = 5;
            let a = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
            let sigma = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
            let theta = DVector::from_fn(d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let p = PopulationSpec::new(sigma.clone(), theta, Noise::Gaussian { variance: 0.3 }, Design::Gaussian).unwrap();
            let fed = Federation::uniform(vec![pat(d, &[1, 2]), pat(d, &[2, 4, 5]), pat(d, &[3]), FeaturePattern::empty(d)]).unwrap();
            let opt = imputed_population_covariance(&p, &fed, PopulationImputer::OptimalLinear).unwrap();
            let map = fit_optimal_imputer(&sigma, &fed, Inversion::default(), CovarianceSource::Population).unwrap();
            let (s2, g2) = imputed_moments_for_map(&p, &fed, &map).unwrap();
            assert!((&opt.sigma - s2).amax() < 1e-10);
            assert!((&opt.gamma - g2).amax() < 1e-10);
            let zero = imputed_population_covariance(&p, &fed, PopulationImputer::Zero).unwrap();
            let (s0, g0) = imputed_moments_for_map(&p, &fed, &fit_zero_imputer(&fed)).unwrap();
            assert!((&zero.sigma - s0).amax() < 1e-12);
            assert!((&zero.gamma - g0).amax() < 1e-12);
        }
    }

    #[test]
    fn lambda_prime_examples() {
        assert_eq!(typical_case_lambda_prime(0.7, 1.0).unwrap(), 0.7);
        assert_eq!(typical_case_lambda_prime(0.0, 0.5).unwrap(), 1.0);
        assert_eq!(typical_case_lambda_prime(1.0, 0.5).unwrap(), 5.0);
        assert!(typical_case_lambda_prime(1.0, 0.0).is_err());
    }

    #[test]
    fn local_bound_examples() {
        let p = pop2(0.0, [1.0, 1.0]);
        let one = Federation::uniform(vec![FeaturePattern::full(2)]).unwrap();
        let t = local_bound_terms(&p, &one, 0.0, 1000, 1.0).unwrap();
        assert_eq!(t.e0, 0.0);
        let two = Federation::uniform(vec![pat(2, &[1]), FeaturePattern::full(2)]).unwrap();
        let t = local_bound_terms(&p, &two, 0.0, 4, 1.0).unwrap();
        assert!((t.e0 - 0.0625 * p.expected_y2()).abs() < 1e-15);
        assert_eq!(t.sum_d, 3.0);
    }

    #[test]
    fn bound_components_for_full_identity() {
        let d = 3;
        let p = PopulationSpec::new(
            DMatrix::identity(d, d),
            DVector::from_element(d, 0.5),
            Noise::Gaussian { variance: 1.0 },
            Design::Gaussian,
        )
        .unwrap();
        let fed = Federation::uniform(vec![FeaturePattern::full(d)]).unwrap();
        let r = itr_bound(&p, &fed, PopulationImputer::Zero, 0.0, 100, 2.0).unwrap();
        assert!((r.bound_value - (1.0 + 8.0 * 4.0 * 3.0 / 100.0)).abs() < 1e-12);
        let r = r.with_mc(1.2, 0.01);
        assert_eq!(r.satisfied, Some(true));
    }

    #[test]
    fn mc_zero_predictor_and_oracle() {
        let p = PopulationSpec::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            Noise::Gaussian { variance: 1.0 },
            Design::Gaussian,
        )
        .unwrap();
        let fed = Federation::uniform(vec![pat(2, &[1]), pat(2, &[2])]).unwrap();
        let mut zero = ClientwisePredictor::new(None).unwrap();
        for c in fed.iter() {
            zero.insert(c.id, c.pattern.clone(), DVector::zeros(1)).unwrap();
        }
        let mc = monte_carlo_risk(&zero, &p, &fed, 20_000, 1).unwrap();
        assert!((mc.risk - 1.0).abs() <= 3.0 * mc.stderr);
        let again = monte_carlo_risk(&zero, &p, &fed, 20_000, 1).unwrap();
        assert_eq!(mc, again);

        let p = pop2(0.5, [1.0, -0.5]);
        let mut oracle = ClientwisePredictor::new(None).unwrap();
        for c in fed.iter() {
            oracle.insert(c.id, c.pattern.clone(), best_local_coefficients(&p, &c.pattern).unwrap()).unwrap();
        }
        let mc = monte_carlo_risk(&oracle, &p, &fed, 20_000, 2).unwrap();
        let r = oracle_global_risk(&p, &fed).unwrap();
        assert!((mc.risk - r).abs() <= 3.0 * mc.stderr, "{} vs {r}", mc.risk);
        let recombined: f64 = mc.per_client.iter().zip(fed.iter()).map(|((_, r, _), c)| c.rho * r).sum();
        assert!((recombined - mc.risk).abs() <= 1e-12);
    }

    #[test]
    fn mc_rejects_missing_client() {
        let p = pop2(0.0, [1.0, 1.0]);
        let fed = Federation::uniform(vec![pat(2, &[1])]).unwrap();
        let empty = ClientwisePredictor::new(None).unwrap();
        assert!(matches!(monte_carlo_risk(&empty, &p, &fed, 10, 0), Err(Error::UnknownClient(0))));
        assert!(monte_carlo_risk(&empty, &p, &fed, 1, 0).is_err());
    }

    #[test]
    fn exact_linear_risk_of_oracle_is_global_optimum() {
        let p = pop2(0.3, [1.0, 2.0]);
        let fed = Federation::with_rho(vec![pat(2, &[1]), pat(2, &[2])], &[0.4, 0.6]).unwrap();
        let mut oracle = ClientwisePredictor::new(None).unwrap();
        for c in fed.iter() {
            oracle.insert(c.id, c.pattern.clone(), best_local_coefficients(&p, &c.pattern).unwrap()).unwrap();
        }
        let (risk, excess) = clientwise_linear_risk(&p, &fed, &oracle).unwrap();
        assert!(excess.abs() < 1e-14);
        assert!((risk - oracle_global_risk(&p, &fed).unwrap()).abs() < 1e-14);
    }
}

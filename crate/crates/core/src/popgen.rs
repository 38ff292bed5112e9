//! Synthetic populations, client observation patterns and masked datasets.
//!
//! A population is `Y = Xᵀθ★ + ε` with `E[XXᵀ] = Σ` and `ε` independent of
//! `X`. Two designs are available: Gaussian `X = Σ^{1/2} Z` with standard
//! normal `Z`, and a bounded design where `Z` is uniform on the sphere of
//! radius `√d` (so that `E[ZZᵀ] = I`). With bounded design and uniform noise
//! on `[-a, a]` the outcome satisfies `|Y| ≤ √d ‖θ★‖_Σ + a` almost surely.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Dataset, FeaturePattern, Federation, MaskedSample, MomentPair, Provenance};

/// Smallest eigenvalue tolerated for a covariance matrix.
pub const PSD_TOL: f64 = -1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Noise {
    Gaussian { variance: f64 },
    /// Uniform on `[-half_width, half_width]`.
    UniformBounded { half_width: f64 },
}

impl Noise {
    pub fn variance(&self) -> f64 {
        match *self {
            Noise::Gaussian { variance } => variance,
            Noise::UniformBounded { half_width } => half_width * half_width / 3.0,
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Noise::Gaussian { variance } => {
                let z: f64 = StandardNormal.sample(rng);
                variance.sqrt() * z
            }
            Noise::UniformBounded { half_width } => {
                half_width * (2.0 * rng.random::<f64>() - 1.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Design {
    Gaussian,
    /// `X = Σ^{1/2} Z`, `Z` uniform on the sphere of radius `√d`.
    BoundedSphere,
}

/// Ground truth `(Σ, θ★, noise law)` of the data distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSpec {
    sigma: DMatrix<f64>,
    sigma_sqrt: DMatrix<f64>,
    theta_star: DVector<f64>,
    noise: Noise,
    design: Design,
    m_bound: Option<f64>,
}

impl PopulationSpec {
    pub fn new(sigma: DMatrix<f64>, theta_star: DVector<f64>, noise: Noise, design: Design) -> Result<Self> {
        let d = theta_star.len();
        if d == 0 {
            return Err(Error::param("d", "dimension must be >= 1"));
        }
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: sigma.nrows(),
            });
        }
        let asym = (&sigma - sigma.transpose()).amax();
        if asym > 1e-10 * sigma.amax().max(1.0) {
            return Err(Error::param("sigma", "covariance must be symmetric"));
        }
        let sigma = linalg::symmetrize(&sigma);
        let min_eig = linalg::min_eigenvalue(&sigma);
        if min_eig < PSD_TOL {
            return Err(Error::NotPsd(min_eig));
        }
        match noise {
            Noise::Gaussian { variance } if !(variance >= 0.0) => {
                return Err(Error::param("noise.variance", "must be >= 0"))
            }
            Noise::UniformBounded { half_width } if !(half_width >= 0.0) => {
                return Err(Error::param("noise.half_width", "must be >= 0"))
            }
            _ => {}
        }
        let sigma_sqrt = linalg::psd_sqrt(&sigma);
        let m_bound = match (design, noise) {
            (Design::BoundedSphere, Noise::UniformBounded { half_width }) => {
                let signal = theta_star.dot(&(&sigma * &theta_star)).max(0.0).sqrt();
                Some((d as f64).sqrt() * signal + half_width)
            }
            _ => None,
        };
        Ok(PopulationSpec {
            sigma,
            sigma_sqrt,
            theta_star,
            noise,
            design,
            m_bound,
        })
    }

    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn theta_star(&self) -> &DVector<f64> {
        &self.theta_star
    }

    pub fn noise(&self) -> Noise {
        self.noise
    }

    pub fn design(&self) -> Design {
        self.design
    }

    /// `σ² = E[ε²]`.
    pub fn sigma2(&self) -> f64 {
        self.noise.variance()
    }

    /// Almost-sure bound on `|Y|`, available for the bounded design with
    /// bounded noise.
    pub fn m_bound(&self) -> Option<f64> {
        self.m_bound
    }

    /// `γ = E[XY] = Σθ★`.
    pub fn gamma(&self) -> DVector<f64> {
        population_gamma(self)
    }

    /// `E[Y²] = σ² + ‖θ★‖²_Σ`.
    pub fn expected_y2(&self) -> f64 {
        self.sigma2() + self.theta_star.dot(&(&self.sigma * &self.theta_star))
    }

    /// Draw a complete `(X, Y)` pair; `x` is overwritten.
    pub fn draw_into<R: Rng + ?Sized>(&self, rng: &mut R, z: &mut [f64], x: &mut [f64]) -> f64 {
        let d = self.dim();
        debug_assert!(z.len() == d && x.len() == d);
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(rng);
        }
        if self.design == Design::BoundedSphere {
            let mut norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            while norm == 0.0 {
                for zi in z.iter_mut() {
                    *zi = StandardNormal.sample(rng);
                }
                norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            let scale = (d as f64).sqrt() / norm;
            z.iter_mut().for_each(|v| *v *= scale);
        }
        let mut y = 0.0;
        for (i, xi) in x.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, zj) in z.iter().enumerate() {
                acc += self.sigma_sqrt[(i, j)] * zj;
            }
            *xi = acc;
            y += acc * self.theta_star[i];
        }
        y + self.noise.sample(rng)
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (DVector<f64>, f64) {
        let d = self.dim();
        let mut z = vec![0.0; d];
        let mut x = vec![0.0; d];
        let y = self.draw_into(rng, &mut z, &mut x);
        (DVector::from_vec(x), y)
    }
}

/// `γ = Σθ★`.
pub fn population_gamma(pop: &PopulationSpec) -> DVector<f64> {
    pop.sigma() * pop.theta_star()
}

/// The exact population pair `(Σ, Σθ★)`.
pub fn population_moments(pop: &PopulationSpec) -> MomentPair {
    MomentPair::new(pop.sigma().clone(), pop.gamma(), Provenance::Population)
        .expect("population covariance is square and matches θ★")
}

pub fn identity_covariance(d: usize) -> DMatrix<f64> {
    DMatrix::identity(d, d)
}

/// Unit diagonal, constant off-diagonal `r`. PSD iff `-1/(d-1) ≤ r ≤ 1`.
pub fn equicorrelated_covariance(d: usize, r: f64) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { r })
}

/// `Σ_ij = r^{|i-j|}`.
pub fn toeplitz_covariance(d: usize, r: f64) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| r.powi(i.abs_diff(j) as i32))
}

/// `K` patterns where every (client, feature) pair is observed
/// independently with probability `tau`. Empty patterns are kept.
pub fn draw_bernoulli_patterns<R: Rng + ?Sized>(
    k: usize,
    d: usize,
    tau: f64,
    rng: &mut R,
) -> Result<Vec<FeaturePattern>> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::param("tau", format!("{tau} is outside (0, 1]")));
    }
    if k == 0 {
        return Err(Error::param("K", "at least one client is required"));
    }
    Ok((0..k)
        .map(|_| {
            let mask: Vec<bool> = (0..d).map(|_| rng.random_bool(tau)).collect();
            FeaturePattern::from_mask(&mask)
        })
        .collect())
}

/// Draw `n` i.i.d. masked samples: `H ~ Categorical(ρ)` independently of
/// `(X, Y)`, and only `[X]_{obs(H)}` is kept.
pub fn sample_dataset<R: Rng + ?Sized>(
    pop: &PopulationSpec,
    federation: &Federation,
    n: usize,
    rng: &mut R,
) -> Result<Dataset> {
    if federation.dim() != pop.dim() {
        return Err(Error::DimensionMismatch {
            expected: pop.dim(),
            got: federation.dim(),
        });
    }
    let chooser = WeightedIndex::new(federation.rhos())
        .map_err(|e| Error::param("clients.rho", e.to_string()))?;
    let d = pop.dim();
    let mut z = vec![0.0; d];
    let mut x = vec![0.0; d];
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let client = &federation.clients()[chooser.sample(rng)];
        let y = pop.draw_into(rng, &mut z, &mut x);
        samples.push(MaskedSample {
            client_id: client.id,
            x_obs: client.pattern.observed().iter().map(|&j| x[j]).collect(),
            y,
        });
    }
    Dataset::new(federation.clone(), samples)
}

/// `Π_lj = Σ_k ρ_k 1{l ∈ obs(k)} 1{j ∈ obs(k)}`.
pub fn co_observation_matrix(federation: &Federation) -> DMatrix<f64> {
    let d = federation.dim();
    let mut pi = DMatrix::zeros(d, d);
    for c in federation.iter() {
        for &l in c.pattern.observed() {
            for &j in c.pattern.observed() {
                pi[(l, j)] += c.rho;
            }
        }
    }
    pi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    fn pat(d: usize, one: &[usize]) -> FeaturePattern {
        FeaturePattern::from_one_based(d, one).unwrap()
    }

    fn gaussian_pop(sigma: DMatrix<f64>, theta: Vec<f64>, var: f64) -> PopulationSpec {
        PopulationSpec::new(
            sigma,
            DVector::from_vec(theta),
            Noise::Gaussian { variance: var },
            Design::Gaussian,
        )
        .unwrap()
    }

    #[test]
    fn tau_one_gives_full_patterns() {
        let mut rng = rng_from(1, &[]);
        let pats = draw_bernoulli_patterns(3, 4, 1.0, &mut rng).unwrap();
        assert!(pats.iter().all(|p| p.is_full() && p.dim() == 4));
    }

    #[test]
    fn tau_out_of_range_is_rejected() {
        let mut rng = rng_from(1, &[]);
        assert!(draw_bernoulli_patterns(3, 4, 0.0, &mut rng).is_err());
        assert!(draw_bernoulli_patterns(3, 4, 1.5, &mut rng).is_err());
        assert!(draw_bernoulli_patterns(0, 4, 0.5, &mut rng).is_err());
    }

    #[test]
    fn bernoulli_inclusion_frequency() {
        // Binomial oracle: each (k, j) frequency over K = 2000 clients lies in
        // 0.5 ± 3 sqrt(0.25 / 2000).
        let mut rng = rng_from(2, &[]);
        let pats = draw_bernoulli_patterns(2000, 10, 0.5, &mut rng).unwrap();
        let band = 3.0 * (0.25f64 / 2000.0).sqrt();
        for j in 0..10 {
            let freq = pats.iter().filter(|p| p.contains(j)).count() as f64 / 2000.0;
            assert!((freq - 0.5).abs() <= band, "feature {j}: {freq}");
        }
    }

    #[test]
    fn single_feature_pattern_over_seeds() {
        let trials = 10_000;
        let hits = (0..trials)
            .filter(|&s| {
                let mut rng = rng_from(s, &[]);
                draw_bernoulli_patterns(1, 1, 0.5, &mut rng).unwrap()[0].is_full()
            })
            .count();
        let freq = hits as f64 / trials as f64;
        assert!((freq - 0.5).abs() <= 3.0 * (0.25f64 / trials as f64).sqrt());
    }

    #[test]
    fn empty_dataset_when_n_zero() {
        let pop = gaussian_pop(identity_covariance(2), vec![1.0, 0.0], 1.0);
        let fed = Federation::uniform(vec![pat(2, &[1, 2])]).unwrap();
        let ds = sample_dataset(&pop, &fed, 0, &mut rng_from(0, &[])).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn outcome_second_moment_matches_noise() {
        // E[Y²] = σ² = 1 when θ★ = 0; stderr of the mean of Y² is sqrt(2/n).
        let pop = gaussian_pop(identity_covariance(2), vec![0.0, 0.0], 1.0);
        let fed = Federation::uniform(vec![pat(2, &[1, 2])]).unwrap();
        let ds = sample_dataset(&pop, &fed, 100_000, &mut rng_from(3, &[])).unwrap();
        let m = ds.samples().iter().map(|s| s.y * s.y).sum::<f64>() / ds.n() as f64;
        assert!((m - 1.0).abs() <= 0.03, "{m}");
    }

    #[test]
    fn client_shares_follow_rho() {
        let pop = gaussian_pop(identity_covariance(2), vec![1.0, 1.0], 1.0);
        let fed = Federation::with_rho(vec![pat(2, &[1]), pat(2, &[2])], &[0.3, 0.7]).unwrap();
        let ds = sample_dataset(&pop, &fed, 100_000, &mut rng_from(4, &[])).unwrap();
        let share = ds.client_counts()[0] as f64 / ds.n() as f64;
        assert!((share - 0.3).abs() <= 0.005, "{share}");
    }

    #[test]
    fn same_seed_same_dataset() {
        let pop = gaussian_pop(toeplitz_covariance(3, 0.5), vec![1.0, -1.0, 0.5], 0.5);
        let fed = Federation::uniform(vec![pat(3, &[1, 2]), pat(3, &[2, 3])]).unwrap();
        let a = sample_dataset(&pop, &fed, 500, &mut rng_from(5, &[1])).unwrap();
        let b = sample_dataset(&pop, &fed, 500, &mut rng_from(5, &[1])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn co_observation_on_illustration_patterns() {
        let fed = Federation::uniform(vec![pat(4, &[1, 3]), pat(4, &[2, 3, 4])]).unwrap();
        let pi = co_observation_matrix(&fed);
        let diag: Vec<f64> = (0..4).map(|i| pi[(i, i)]).collect();
        assert_eq!(diag, vec![0.5, 0.5, 1.0, 0.5]);
        assert_eq!(pi[(0, 2)], 0.5);
        assert_eq!(pi[(0, 1)], 0.0);
        assert_eq!(pi[(1, 3)], 0.5);
        assert_eq!(pi[(2, 3)], 0.5);
        assert_eq!(pi, pi.transpose());
    }

    #[test]
    fn co_observation_edge_cases() {
        let full = Federation::uniform(vec![FeaturePattern::full(3)]).unwrap();
        assert_eq!(co_observation_matrix(&full), DMatrix::from_element(3, 3, 1.0));
        let disjoint = Federation::uniform(vec![pat(2, &[1]), pat(2, &[2])]).unwrap();
        assert_eq!(co_observation_matrix(&disjoint)[(0, 1)], 0.0);
    }

    #[test]
    fn co_observation_matches_mask_outer_products() {
        // Π = E[MMᵀ]: Monte Carlo over client draws, each entry within 3 stderr.
        let fed = Federation::with_rho(
            vec![pat(4, &[1, 3]), pat(4, &[2, 3, 4]), pat(4, &[1, 2])],
            &[0.2, 0.5, 0.3],
        )
        .unwrap();
        let pi = co_observation_matrix(&fed);
        let pop = gaussian_pop(identity_covariance(4), vec![0.0; 4], 1.0);
        let n = 20_000;
        let ds = sample_dataset(&pop, &fed, n, &mut rng_from(6, &[])).unwrap();
        let mut mean = DMatrix::<f64>::zeros(4, 4);
        for s in ds.samples() {
            let mask = fed.get(s.client_id).unwrap().pattern.mask();
            for l in 0..4 {
                for j in 0..4 {
                    if mask[l] && mask[j] {
                        mean[(l, j)] += 1.0 / n as f64;
                    }
                }
            }
        }
        for l in 0..4 {
            for j in 0..4 {
                let p = pi[(l, j)];
                let se = (p * (1.0 - p) / n as f64).sqrt();
                assert!((mean[(l, j)] - p).abs() <= 3.0 * se + 1e-12);
            }
        }
    }

    #[test]
    fn population_gamma_examples() {
        let p = gaussian_pop(identity_covariance(2), vec![1.0, 2.0], 1.0);
        assert_eq!(population_gamma(&p).as_slice(), &[1.0, 2.0]);
        let p = gaussian_pop(equicorrelated_covariance(2, 0.5), vec![1.0, 1.0], 1.0);
        assert_eq!(population_gamma(&p).as_slice(), &[1.5, 1.5]);
        let p = gaussian_pop(equicorrelated_covariance(2, 0.5), vec![0.0, 0.0], 1.0);
        assert_eq!(population_gamma(&p).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn bounded_design_respects_m_bound() {
        let pop = PopulationSpec::new(
            toeplitz_covariance(6, 0.6),
            DVector::from_vec(vec![1.0, -0.5, 0.25, 0.0, 0.8, -1.0]),
            Noise::UniformBounded { half_width: 0.5 },
            Design::BoundedSphere,
        )
        .unwrap();
        let m = pop.m_bound().unwrap();
        let fed = Federation::uniform(vec![FeaturePattern::full(6)]).unwrap();
        for seed in 0..5 {
            let ds = sample_dataset(&pop, &fed, 5000, &mut rng_from(seed, &[7])).unwrap();
            assert!(ds.samples().iter().all(|s| s.y.abs() <= m));
        }
    }

    #[test]
    fn bounded_design_has_target_covariance() {
        let sigma = toeplitz_covariance(3, 0.5);
        let pop = PopulationSpec::new(
            sigma.clone(),
            DVector::zeros(3),
            Noise::UniformBounded { half_width: 1.0 },
            Design::BoundedSphere,
        )
        .unwrap();
        let mut rng = rng_from(8, &[]);
        let n = 100_000;
        let mut acc = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..n {
            let (x, _) = pop.draw(&mut rng);
            acc += &x * x.transpose();
        }
        acc /= n as f64;
        assert!((acc - sigma).amax() < 0.02);
    }

    #[test]
    fn rejects_indefinite_covariance() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = PopulationSpec::new(
            bad,
            DVector::zeros(2),
            Noise::Gaussian { variance: 1.0 },
            Design::Gaussian,
        );
        assert!(matches!(err, Err(Error::NotPsd(_))));
    }
}

//! Federated estimation of `(Σ, γ)`.
//!
//! Each client zero-fills its missing coordinates and reports *sums*
//! `Σ_i x̃_i x̃_iᵀ`, `Σ_i x̃_i y_i` together with its count `n_k`. Summation is
//! exact and order-independent up to floating-point rounding, and the
//! server folds clients in id order so results are reproducible.
//!
//! Three estimators are derived from the aggregate:
//!
//! * zero-imputed: `Σ̂^{I0} = S / n`, biased towards `Π ⊙ Σ`;
//! * debiased (inverse propensity): `Σ̂^{I0} ⊘ Π` with the true `Π`;
//! * component-wise: `Σ̂^{cw}_lj = S_lj / N_lj`, the average over the samples
//!   that co-observe `l` and `j`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Coverage, Dataset, FeaturePattern, MaskedSample, MomentPair, Provenance};

/// Version tag of the [`MomentPayload`] float layout.
pub const PAYLOAD_LAYOUT_VERSION: u32 = 1;

/// Zero-filled sufficient statistics of one client, as sums.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalStats {
    pub pattern: FeaturePattern,
    pub n: usize,
    /// `Σ_i (M ⊙ X_i)(M ⊙ X_i)ᵀ`, exactly symmetric.
    pub xx_sum: DMatrix<f64>,
    /// `Σ_i (M ⊙ X_i) Y_i`.
    pub xy_sum: DVector<f64>,
}

impl LocalStats {
    pub fn zeros(pattern: FeaturePattern) -> Self {
        let d = pattern.dim();
        LocalStats {
            pattern,
            n: 0,
            xx_sum: DMatrix::zeros(d, d),
            xy_sum: DVector::zeros(d),
        }
    }

    pub fn push(&mut self, x_obs: &[f64], y: f64) {
        let obs = self.pattern.observed();
        for (a, &l) in obs.iter().enumerate() {
            self.xy_sum[l] += x_obs[a] * y;
            for (b, &j) in obs.iter().enumerate().skip(a) {
                let v = x_obs[a] * x_obs[b];
                self.xx_sum[(l, j)] += v;
                if l != j {
                    self.xx_sum[(j, l)] += v;
                }
            }
        }
        self.n += 1;
    }

    /// Local averages `(Σ̂_k, γ̂_k)`; zeros when the client has no samples.
    pub fn means(&self) -> (DMatrix<f64>, DVector<f64>) {
        if self.n == 0 {
            return (self.xx_sum.clone(), self.xy_sum.clone());
        }
        let inv = 1.0 / self.n as f64;
        (&self.xx_sum * inv, &self.xy_sum * inv)
    }

    pub fn to_payload(&self) -> MomentPayload {
        MomentPayload {
            version: PAYLOAD_LAYOUT_VERSION,
            n: self.n as f64,
            xx_upper: linalg::upper_tri(&self.xx_sum),
            xy: self.xy_sum.as_slice().to_vec(),
            pattern_tag: self.pattern.tag(),
        }
    }
}

/// Wire layout of a one-shot moment upload:
/// `[n_k][upper-tri Σ row-major][γ][pattern tag]`, i.e.
/// `d(d+1)/2 + d + 2` floats.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPayload {
    pub version: u32,
    pub n: f64,
    pub xx_upper: Vec<f64>,
    pub xy: Vec<f64>,
    pub pattern_tag: f64,
}

impl MomentPayload {
    pub fn float_count(&self) -> u64 {
        (1 + self.xx_upper.len() + self.xy.len() + 1) as u64
    }

    pub fn floats_for_dim(d: usize) -> u64 {
        (d * (d + 1) / 2 + d + 2) as u64
    }

    pub fn to_floats(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.float_count() as usize);
        out.push(self.n);
        out.extend_from_slice(&self.xx_upper);
        out.extend_from_slice(&self.xy);
        out.push(self.pattern_tag);
        out
    }

    /// Decode the sums; the pattern itself is known to the server from
    /// registration and is checked against the tag.
    pub fn decode(&self, pattern: &FeaturePattern) -> Result<LocalStats> {
        if self.version != PAYLOAD_LAYOUT_VERSION {
            return Err(Error::Protocol(format!(
                "payload layout version {} (expected {PAYLOAD_LAYOUT_VERSION})",
                self.version
            )));
        }
        if self.pattern_tag != pattern.tag() {
            return Err(Error::Protocol("pattern tag does not match registration".into()));
        }
        let d = pattern.dim();
        if self.xy.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: self.xy.len(),
            });
        }
        Ok(LocalStats {
            pattern: pattern.clone(),
            n: self.n as usize,
            xx_sum: linalg::from_upper_tri(d, &self.xx_upper)?,
            xy_sum: DVector::from_column_slice(&self.xy),
        })
    }
}

/// Zero-imputed statistics of one client's samples.
pub fn local_zero_imputed_moments<'a>(
    samples: impl IntoIterator<Item = &'a MaskedSample>,
    pattern: &FeaturePattern,
) -> Result<LocalStats> {
    let mut stats = LocalStats::zeros(pattern.clone());
    for s in samples {
        if s.x_obs.len() != pattern.len() {
            return Err(Error::DimensionMismatch {
                expected: pattern.len(),
                got: s.x_obs.len(),
            });
        }
        stats.push(&s.x_obs, s.y);
    }
    Ok(stats)
}

/// Per-client statistics of a whole dataset, in federation order.
pub fn local_stats_by_client(dataset: &Dataset) -> Vec<LocalStats> {
    dataset
        .indices_by_client()
        .into_iter()
        .map(|(id, idx)| {
            let pattern = &dataset.federation().get(id).expect("validated").pattern;
            let mut stats = LocalStats::zeros(pattern.clone());
            for i in idx {
                let s = &dataset.samples()[i];
                stats.push(&s.x_obs, s.y);
            }
            stats
        })
        .collect()
}

/// Server-side state: summed statistics plus co-observation counts.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedMoments {
    pub n: usize,
    pub xx_sum: DMatrix<f64>,
    pub xy_sum: DVector<f64>,
    pub counts: CoObservationCounts,
}

/// `N_lj = #{i : l, j ∈ obs(H_i)}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoObservationCounts {
    dim: usize,
    counts: Vec<u64>,
    n: u64,
}

impl CoObservationCounts {
    pub fn zeros(dim: usize) -> Self {
        CoObservationCounts {
            dim,
            counts: vec![0; dim * dim],
            n: 0,
        }
    }

    /// Add `n_k` samples that all observe `pattern`.
    pub fn add_pattern(&mut self, pattern: &FeaturePattern, n_k: u64) {
        for &l in pattern.observed() {
            for &j in pattern.observed() {
                self.counts[l * self.dim + j] += n_k;
            }
        }
        self.n += n_k;
    }

    pub fn get(&self, l: usize, j: usize) -> u64 {
        self.counts[l * self.dim + j]
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coverage(&self) -> Coverage {
        Coverage::from_fn(self.dim, |l, j| self.get(l, j) > 0)
    }

    /// `Π̂ = N / n`.
    pub fn frequencies(&self) -> DMatrix<f64> {
        let n = self.n.max(1) as f64;
        DMatrix::from_fn(self.dim, self.dim, |l, j| self.get(l, j) as f64 / n)
    }
}

/// Fold client statistics in the given order.
pub fn aggregate(locals: &[LocalStats]) -> Result<AggregatedMoments> {
    let first = locals
        .first()
        .ok_or_else(|| Error::param("locals", "no client statistics"))?;
    let d = first.pattern.dim();
    let mut agg = AggregatedMoments {
        n: 0,
        xx_sum: DMatrix::zeros(d, d),
        xy_sum: DVector::zeros(d),
        counts: CoObservationCounts::zeros(d),
    };
    for s in locals {
        if s.pattern.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: s.pattern.dim(),
            });
        }
        agg.n += s.n;
        agg.xx_sum += &s.xx_sum;
        agg.xy_sum += &s.xy_sum;
        agg.counts.add_pattern(&s.pattern, s.n as u64);
    }
    Ok(agg)
}

impl AggregatedMoments {
    pub fn zero_imputed(&self) -> Result<MomentPair> {
        if self.n == 0 {
            return Err(Error::EmptyDataset);
        }
        let inv = 1.0 / self.n as f64;
        MomentPair::new(&self.xx_sum * inv, &self.xy_sum * inv, Provenance::ZeroImputed)
    }

    /// Average of each entry over the samples that co-observe it; entries
    /// with `N_lj = 0` are zero and marked uncovered.
    pub fn component_wise(&self) -> Result<MomentPair> {
        if self.n == 0 {
            return Err(Error::EmptyDataset);
        }
        let d = self.xy_sum.len();
        let c = &self.counts;
        let sigma = DMatrix::from_fn(d, d, |l, j| match c.get(l, j) {
            0 => 0.0,
            m => self.xx_sum[(l, j)] / m as f64,
        });
        let gamma = DVector::from_fn(d, |l, _| match c.get(l, l) {
            0 => 0.0,
            m => self.xy_sum[l] / m as f64,
        });
        Ok(MomentPair::new(sigma, gamma, Provenance::ComponentWise)?.with_coverage(c.coverage()))
    }
}

/// Weighted average of local zero-imputed moments, weights `n_k / n`.
pub fn aggregate_zero_imputed(locals: &[LocalStats]) -> Result<MomentPair> {
    aggregate(locals)?.zero_imputed()
}

/// Inverse-propensity correction with known co-observation probabilities:
/// `Σ̂ ⊘ Π`, `γ̂ ⊘ diag(Π)`. Entries with `Π_lj = 0` are zeroed and marked
/// uncovered.
pub fn debias_moments(zero: &MomentPair, pi: &DMatrix<f64>) -> Result<MomentPair> {
    let d = zero.dim();
    if pi.nrows() != d || pi.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: pi.nrows(),
        });
    }
    let sigma = DMatrix::from_fn(d, d, |l, j| {
        if pi[(l, j)] > 0.0 {
            zero.sigma()[(l, j)] / pi[(l, j)]
        } else {
            0.0
        }
    });
    let gamma = DVector::from_fn(d, |l, _| {
        if pi[(l, l)] > 0.0 {
            zero.gamma()[l] / pi[(l, l)]
        } else {
            0.0
        }
    });
    Ok(MomentPair::new(sigma, gamma, Provenance::Debiased)?
        .with_coverage(Coverage::from_fn(d, |l, j| pi[(l, j)] > 0.0)))
}

/// Empirical co-observation frequencies `Π̂ = N / n`, counted per sample.
pub fn empirical_coobservation(dataset: &Dataset) -> Result<(DMatrix<f64>, CoObservationCounts)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut counts = CoObservationCounts::zeros(dataset.dim());
    for s in dataset.samples() {
        let pattern = &dataset.federation().get(s.client_id)?.pattern;
        counts.add_pattern(pattern, 1);
    }
    Ok((counts.frequencies(), counts))
}

/// Component-wise moments by rescaling zero-imputed moments:
/// `Σ̂^{cw}_lj = (n / N_lj) Σ̂^{I0}_lj`.
pub fn cw_moments(zero: &MomentPair, counts: &CoObservationCounts) -> Result<MomentPair> {
    let d = zero.dim();
    if counts.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: counts.dim(),
        });
    }
    let n = counts.n() as f64;
    let sigma = DMatrix::from_fn(d, d, |l, j| match counts.get(l, j) {
        0 => 0.0,
        m => n / m as f64 * zero.sigma()[(l, j)],
    });
    let gamma = DVector::from_fn(d, |l, _| match counts.get(l, l) {
        0 => 0.0,
        m => n / m as f64 * zero.gamma()[l],
    });
    Ok(MomentPair::new(sigma, gamma, Provenance::ComponentWise)?.with_coverage(counts.coverage()))
}

/// Component-wise moments of a pooled dataset (co-observing averages).
pub fn cw_moments_from_dataset(dataset: &Dataset) -> Result<MomentPair> {
    aggregate(&local_stats_by_client(dataset))?.component_wise()
}

pub fn zero_imputed_from_dataset(dataset: &Dataset) -> Result<MomentPair> {
    aggregate(&local_stats_by_client(dataset))?.zero_imputed()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Federation;
    use crate::popgen::{co_observation_matrix, sample_dataset, toeplitz_covariance, Design, Noise, PopulationSpec};
    use crate::seed::rng_from;
    use proptest::prelude::*;

    fn pat(d: usize, one: &[usize]) -> FeaturePattern {
        FeaturePattern::from_one_based(d, one).unwrap()
    }

    fn sample(client: usize, x: &[f64], y: f64) -> MaskedSample {
        MaskedSample {
            client_id: client,
            x_obs: x.to_vec(),
            y,
        }
    }

    fn illustration_pop() -> PopulationSpec {
        PopulationSpec::new(
            toeplitz_covariance(4, 0.5),
            DVector::from_vec(vec![1.0, -0.5, 0.5, 1.0]),
            Noise::Gaussian { variance: 1.0 },
            Design::Gaussian,
        )
        .unwrap()
    }

    #[test]
    fn single_sample_local_moments() {
        let p = pat(2, &[1]);
        let stats = local_zero_imputed_moments([&sample(0, &[2.0], 3.0)], &p).unwrap();
        let (s, g) = stats.means();
        assert_eq!(s, DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 0.0]));
        assert_eq!(g.as_slice(), &[6.0, 0.0]);
        assert_eq!(stats.n, 1);
    }

    #[test]
    fn zero_samples_give_zero_moments() {
        let stats = local_zero_imputed_moments(std::iter::empty(), &pat(3, &[1, 2])).unwrap();
        let (s, g) = stats.means();
        assert_eq!(stats.n, 0);
        assert_eq!(s, DMatrix::zeros(3, 3));
        assert_eq!(g, DVector::zeros(3));
    }

    #[test]
    fn full_pattern_moments_approach_identity() {
        let pop = PopulationSpec::new(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, 0.0]),
            Noise::Gaussian { variance: 1.0 },
            Design::Gaussian,
        )
        .unwrap();
        let fed = Federation::uniform(vec![FeaturePattern::full(2)]).unwrap();
        let ds = sample_dataset(&pop, &fed, 100_000, &mut rng_from(10, &[])).unwrap();
        let stats = local_zero_imputed_moments(ds.samples(), &FeaturePattern::full(2)).unwrap();
        let (s, _) = stats.means();
        assert!((s - DMatrix::<f64>::identity(2, 2)).amax() <= 0.02);
    }

    #[test]
    fn aggregation_weights_by_counts() {
        let p = pat(2, &[1, 2]);
        let a = local_zero_imputed_moments([&sample(0, &[1.0, 0.0], 1.0)], &p).unwrap();
        let b = local_zero_imputed_moments([&sample(1, &[0.0, 2.0], 1.0)], &p).unwrap();
        let agg = aggregate_zero_imputed(&[a.clone(), b.clone()]).unwrap();
        let (sa, ga) = a.means();
        let (sb, gb) = b.means();
        assert_eq!(agg.sigma(), &((sa + sb) * 0.5));
        assert_eq!(agg.gamma(), &((ga + gb) * 0.5));
        let single = aggregate_zero_imputed(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.sigma(), &a.means().0);
        let empty = LocalStats::zeros(p);
        assert!(matches!(aggregate_zero_imputed(&[empty]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn debias_examples() {
        let mut s = DMatrix::zeros(4, 4);
        s[(0, 2)] = 0.2;
        s[(2, 0)] = 0.2;
        let zero = MomentPair::new(s.clone(), DVector::from_element(4, 1.0), Provenance::ZeroImputed).unwrap();
        let ones = DMatrix::from_element(4, 4, 1.0);
        let same = debias_moments(&zero, &ones).unwrap();
        assert_eq!(same.sigma(), zero.sigma());
        assert_eq!(same.gamma(), zero.gamma());
        assert!(same.coverage().is_none());

        let fed = Federation::uniform(vec![pat(4, &[1, 3]), pat(4, &[2, 3, 4])]).unwrap();
        let pi = co_observation_matrix(&fed);
        let deb = debias_moments(&zero, &pi).unwrap();
        assert!((deb.sigma()[(0, 2)] - 0.4).abs() < 1e-15);
        assert!(!deb.covers(&pat(4, &[1, 2])));
        assert!(deb.covers(&pat(4, &[3, 4])));
    }

    #[test]
    fn empirical_coobservation_examples() {
        let full = Federation::uniform(vec![FeaturePattern::full(3)]).unwrap();
        let ds = Dataset::new(full, vec![sample(0, &[1.0, 2.0, 3.0], 0.0); 3]).unwrap();
        let (pi_hat, _) = empirical_coobservation(&ds).unwrap();
        assert_eq!(pi_hat, DMatrix::from_element(3, 3, 1.0));

        let fed = Federation::uniform(vec![pat(2, &[2])]).unwrap();
        let ds = Dataset::new(fed.clone(), vec![sample(0, &[1.0], 0.0)]).unwrap();
        let (pi_hat, counts) = empirical_coobservation(&ds).unwrap();
        assert_eq!(pi_hat, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]));
        assert_eq!(counts.get(1, 1), 1);

        let empty = Dataset::new(fed, vec![]).unwrap();
        assert!(matches!(empirical_coobservation(&empty), Err(Error::EmptyDataset)));
    }

    #[test]
    fn empirical_coobservation_with_balanced_assignment() {
        // Counting oracle: 500 samples on each illustration client.
        let fed = Federation::uniform(vec![pat(4, &[1, 3]), pat(4, &[2, 3, 4])]).unwrap();
        let mut samples = vec![sample(0, &[0.0, 0.0], 0.0); 500];
        samples.extend(vec![sample(1, &[0.0, 0.0, 0.0], 0.0); 500]);
        let ds = Dataset::new(fed, samples).unwrap();
        let (pi_hat, counts) = empirical_coobservation(&ds).unwrap();
        assert_eq!(pi_hat[(0, 2)], 0.5);
        assert_eq!(pi_hat[(2, 2)], 1.0);
        assert_eq!(counts.get(0, 1), 0);
    }

    #[test]
    fn cw_on_complete_data_is_plain_empirical() {
        let pop = illustration_pop();
        let fed = Federation::uniform(vec![FeaturePattern::full(4)]).unwrap();
        let ds = sample_dataset(&pop, &fed, 300, &mut rng_from(11, &[])).unwrap();
        let zero = zero_imputed_from_dataset(&ds).unwrap();
        let cw = cw_moments_from_dataset(&ds).unwrap();
        assert!((zero.sigma() - cw.sigma()).amax() < 1e-14);
        assert!((zero.gamma() - cw.gamma()).amax() < 1e-14);
        assert!(cw.coverage().is_none());
    }

    #[test]
    fn cw_zero_fills_uncovered_pairs() {
        let pop = illustration_pop();
        let fed = Federation::uniform(vec![pat(4, &[1, 3]), pat(4, &[2, 3, 4])]).unwrap();
        let ds = sample_dataset(&pop, &fed, 200, &mut rng_from(12, &[])).unwrap();
        let cw = cw_moments_from_dataset(&ds).unwrap();
        assert_eq!(cw.sigma()[(0, 1)], 0.0);
        assert!(!cw.coverage().unwrap().is_covered(0, 1));
        assert_eq!(cw.coverage().unwrap().uncovered_pairs(), vec![(0, 1), (0, 3)]);
    }

    #[test]
    fn cw_matches_direct_resummation() {
        // Brute-force oracle: average X_l X_j over samples that observe both,
        // and the n/N rescaling route, agree with the co-observing sums.
        let pop = illustration_pop();
        let fed = Federation::with_rho(
            vec![pat(4, &[1, 3]), pat(4, &[2, 3, 4]), pat(4, &[1, 2, 4])],
            &[0.3, 0.3, 0.4],
        )
        .unwrap();
        let ds = sample_dataset(&pop, &fed, 2_000, &mut rng_from(13, &[])).unwrap();
        let cw = cw_moments_from_dataset(&ds).unwrap();
        let (_, counts) = empirical_coobservation(&ds).unwrap();
        let rescaled = cw_moments(&zero_imputed_from_dataset(&ds).unwrap(), &counts).unwrap();
        for l in 0..4 {
            for j in 0..4 {
                let mut sum = 0.0;
                let mut m = 0usize;
                for i in 0..ds.n() {
                    let pattern = &fed.get(ds.samples()[i].client_id).unwrap().pattern;
                    if pattern.contains(l) && pattern.contains(j) {
                        let x = ds.zero_filled(i);
                        sum += x[l] * x[j];
                        m += 1;
                    }
                }
                assert_eq!(m as u64, counts.get(l, j));
                if m > 0 {
                    let direct = sum / m as f64;
                    assert!((cw.sigma()[(l, j)] - direct).abs() < 1e-12);
                    assert!((rescaled.sigma()[(l, j)] - direct).abs() < 1e-12);
                }
            }
        }
        assert!((cw.gamma() - rescaled.gamma()).amax() < 1e-12);
    }

    #[test]
    fn cw_can_be_indefinite() {
        // Witness: samples co-observing (1,2) are anti-aligned, while each
        // diagonal entry is averaged over a separate, small-valued sample set.
        let fed = Federation::uniform(vec![pat(2, &[1, 2]), pat(2, &[1]), pat(2, &[2])]).unwrap();
        let mut samples = vec![sample(0, &[1.0, -1.0], 0.0); 10];
        samples.extend(vec![sample(1, &[0.1], 0.0); 90]);
        samples.extend(vec![sample(2, &[0.1], 0.0); 90]);
        let ds = Dataset::new(fed, samples).unwrap();
        let cw = cw_moments_from_dataset(&ds).unwrap();
        assert!(linalg::min_eigenvalue(cw.sigma()) < 0.0);
        let zero = zero_imputed_from_dataset(&ds).unwrap();
        assert!(linalg::min_eigenvalue(zero.sigma()) >= -1e-12);
    }

    #[test]
    fn payload_round_trip_and_layout() {
        let pop = illustration_pop();
        let p = pat(4, &[2, 3, 4]);
        let fed = Federation::uniform(vec![p.clone()]).unwrap();
        let ds = sample_dataset(&pop, &fed, 50, &mut rng_from(14, &[])).unwrap();
        let stats = local_zero_imputed_moments(ds.samples(), &p).unwrap();
        let payload = stats.to_payload();
        assert_eq!(payload.float_count(), MomentPayload::floats_for_dim(4));
        assert_eq!(payload.float_count(), 10 + 4 + 2);
        assert_eq!(payload.to_floats().len(), 16);
        assert_eq!(payload.decode(&p).unwrap(), stats);
        assert!(payload.decode(&pat(4, &[1])).is_err());
    }

    proptest! {
        #[test]
        fn zero_imputed_is_psd(xs in proptest::collection::vec(-3.0..3.0f64, 3..60)) {
            let fed = Federation::uniform(vec![pat(3, &[1, 2, 3]), pat(3, &[1]), pat(3, &[2, 3])]).unwrap();
            let samples: Vec<MaskedSample> = xs
                .chunks(3)
                .enumerate()
                .map(|(i, c)| {
                    let k = i % 3;
                    let len = fed.get(k).unwrap().pattern.len();
                    let mut x = c.to_vec();
                    x.resize(3, 0.5);
                    sample(k, &x[..len], 1.0)
                })
                .collect();
            let ds = Dataset::new(fed, samples).unwrap();
            let zero = zero_imputed_from_dataset(&ds).unwrap();
            prop_assert!(linalg::min_eigenvalue(zero.sigma()) >= -1e-10);
        }

        #[test]
        fn cw_is_permutation_invariant(seed in 0u64..1000) {
            let pop = illustration_pop();
            let fed = Federation::uniform(vec![pat(4, &[1, 3]), pat(4, &[2, 3, 4]), pat(4, &[1, 4])]).unwrap();
            let ds = sample_dataset(&pop, &fed, 60, &mut rng_from(seed, &[])).unwrap();
            let mut perm: Vec<usize> = (0..ds.n()).collect();
            perm.reverse();
            perm.rotate_left((seed % 60) as usize);
            let a = cw_moments_from_dataset(&ds).unwrap();
            let b = cw_moments_from_dataset(&ds.permuted(&perm)).unwrap();
            prop_assert!((a.sigma() - b.sigma()).amax() < 1e-12);
            prop_assert!((a.gamma() - b.gamma()).amax() < 1e-12);

            // client relabelling: reverse ids
            let relabelled = Federation::new(
                fed.iter()
                    .map(|c| crate::model::ClientSpec::new(2 - c.id, c.pattern.clone(), c.rho))
                    .collect(),
            )
            .unwrap();
            let samples = ds
                .samples()
                .iter()
                .map(|s| MaskedSample { client_id: 2 - s.client_id, ..s.clone() })
                .collect();
            let c = cw_moments_from_dataset(&Dataset::new(relabelled, samples).unwrap()).unwrap();
            prop_assert!((a.sigma() - c.sigma()).amax() < 1e-12);
        }
    }
}

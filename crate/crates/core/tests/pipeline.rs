use fedmismatch_core::fedsim::{replay_comm_schedule, run_protocol, CommTotals, ProtocolKind, ProtocolSpec, ServerConfig, SimClient};
use fedmismatch_core::impute::{apply_imputer, fit_optimal_imputer, fit_zero_imputer, CovarianceSource};
use fedmismatch_core::linalg::Inversion;
use fedmismatch_core::moments::{cw_moments_from_dataset, debias_moments, zero_imputed_from_dataset};
use fedmismatch_core::oracle::{
    best_local_coefficients, effective_dimension, imputed_population_covariance, local_bound_terms,
    monte_carlo_risk, oracle_global_risk, oracle_local_risk, ridge_bias, typical_case_lambda_prime,
    PopulationImputer,
};
use fedmismatch_core::plugin::{build_clientwise_plugin, PluginConfig};
use fedmismatch_core::popgen::{co_observation_matrix, sample_dataset, toeplitz_covariance, Design, Noise, PopulationSpec};
use fedmismatch_core::ridge::{fit_itr, ridge_closed_form, RidgeConfig};
use fedmismatch_core::seed::rng_from;
use fedmismatch_core::{ClientwisePredictor, FeaturePattern, Federation, MomentPair, Provenance};
use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use proptest::prelude::*;

fn pattern(d: usize, one_based: &[usize]) -> FeaturePattern {
    FeaturePattern::from_one_based(d, one_based).unwrap()
}

fn illustration_federation() -> Federation {
    Federation::with_rho(vec![pattern(4, &[1, 3]), pattern(4, &[2, 3, 4])], &[0.5, 0.5]).unwrap()
}

fn pop(sigma: DMatrix<f64>, theta: DVector<f64>, variance: f64) -> PopulationSpec {
    PopulationSpec::new(sigma, theta, Noise::Gaussian { variance }, Design::Gaussian).unwrap()
}

#[test]
fn co_observation_of_illustration_patterns() {
    let pi = co_observation_matrix(&illustration_federation());
    let diag: Vec<f64> = (0..4).map(|j| pi[(j, j)]).collect();
    assert_eq!(diag, vec![0.5, 0.5, 1.0, 0.5]);
    assert_eq!(pi[(0, 2)], 0.5);
    assert_eq!(pi[(0, 1)], 0.0);
    assert_eq!(pi[(1, 3)], 0.5);
    assert_eq!(pi[(2, 3)], 0.5);
}

#[test]
fn plugin_flags_pair_never_co_observed() {
    let fed = illustration_federation();
    let p = pop(toeplitz_covariance(4, 0.3), dvector![1.0, -1.0, 0.5, 2.0], 0.5);
    let data = sample_dataset(&p, &fed, 2000, &mut rng_from(1, &[])).unwrap();
    let cw = cw_moments_from_dataset(&data).unwrap();
    let mut fit = build_clientwise_plugin(&cw, &fed, &PluginConfig::default()).unwrap();
    assert!(fit.unidentifiable.is_empty());
    assert!(fit.add_client(&cw, 7, &pattern(4, &[1, 2]), &PluginConfig::default()).is_err());
    fit.add_client(&cw, 8, &pattern(4, &[3, 4]), &PluginConfig::default()).unwrap();
}

#[test]
fn plugin_on_population_moments_is_the_oracle() {
    let p = pop(toeplitz_covariance(5, 0.6), dvector![1.0, 0.0, -2.0, 0.5, 1.5], 1.0);
    let fed = Federation::uniform(vec![pattern(5, &[1, 2, 3]), pattern(5, &[2, 4, 5]), pattern(5, &[1, 3, 4, 5])]).unwrap();
    let moments = MomentPair::new(p.sigma().clone(), p.gamma(), Provenance::Population).unwrap();
    let fit = build_clientwise_plugin(&moments, &fed, &PluginConfig::default()).unwrap();
    for c in fed.iter() {
        let want = best_local_coefficients(&p, &c.pattern).unwrap();
        assert!((fit.predictor.theta(c.id).unwrap() - want).amax() < 1e-10);
    }
}

#[test]
fn closed_form_oracle_values() {
    let sigma = dmatrix![1.0, 0.5; 0.5, 1.0];
    let p = pop(sigma.clone(), dvector![1.0, 1.0], 1.0);
    let first = pattern(2, &[1]);
    assert!((best_local_coefficients(&p, &first).unwrap()[0] - 1.5).abs() < 1e-14);
    assert!((oracle_local_risk(&p, &first).unwrap() - 1.75).abs() < 1e-14);
    let id = pop(DMatrix::identity(2, 2), dvector![1.0, 2.0], 1.0);
    assert!((oracle_local_risk(&id, &first).unwrap() - 5.0).abs() < 1e-14);
    assert!((effective_dimension(&DMatrix::identity(4, 4), 1.0).unwrap() - 2.0).abs() < 1e-14);
    assert!((ridge_bias(&DMatrix::identity(1, 1), &dvector![1.0], 1.0).unwrap() - 0.5).abs() < 1e-14);

    let fed = Federation::uniform(vec![first]).unwrap();
    let opt = imputed_population_covariance(&p, &fed, PopulationImputer::OptimalLinear).unwrap();
    assert!((opt.sigma - dmatrix![1.0, 0.5; 0.5, 0.25]).amax() < 1e-14);
}

#[test]
fn empty_client_term_and_lambda_prime() {
    let p = pop(DMatrix::identity(2, 2), dvector![1.0, 1.0], 1.0);
    let fed = Federation::uniform(vec![pattern(2, &[1]), pattern(2, &[2])]).unwrap();
    let terms = local_bound_terms(&p, &fed, 0.0, 4, 1.0).unwrap();
    assert!((terms.e0 - 0.0625 * p.expected_y2()).abs() < 1e-14);
    assert!((terms.sum_d - 2.0).abs() < 1e-14);
    assert_eq!(typical_case_lambda_prime(0.0, 0.5).unwrap(), 1.0);
    assert_eq!(typical_case_lambda_prime(1.0, 0.5).unwrap(), 5.0);
    assert_eq!(typical_case_lambda_prime(0.3, 1.0).unwrap(), 0.3);
}

#[test]
fn optimal_imputation_reaches_global_optimum() {
    let p = pop(toeplitz_covariance(4, 0.7), dvector![0.5, -1.0, 2.0, 1.0], 0.2);
    let fed = Federation::with_rho(vec![pattern(4, &[1, 2]), pattern(4, &[2, 3, 4]), pattern(4, &[4])], &[0.2, 0.5, 0.3]).unwrap();
    let opt = imputed_population_covariance(&p, &fed, PopulationImputer::OptimalLinear).unwrap();
    assert!((opt.r_star - oracle_global_risk(&p, &fed).unwrap()).abs() < 1e-10);
}

#[test]
fn debiased_moments_approach_population() {
    let fed = illustration_federation();
    let p = pop(toeplitz_covariance(4, 0.5), dvector![1.0, 1.0, 1.0, 1.0], 0.5);
    let data = sample_dataset(&p, &fed, 200_000, &mut rng_from(2, &[])).unwrap();
    let zero = zero_imputed_from_dataset(&data).unwrap();
    let debiased = debias_moments(&zero, &co_observation_matrix(&fed)).unwrap();
    let cw = cw_moments_from_dataset(&data).unwrap();
    for (l, j) in [(0, 0), (0, 2), (1, 3), (2, 2), (3, 3)] {
        assert!((debiased.sigma()[(l, j)] - p.sigma()[(l, j)]).abs() < 0.05, "({l},{j})");
        assert!((cw.sigma()[(l, j)] - debiased.sigma()[(l, j)]).abs() < 0.05, "({l},{j})");
    }
}

#[test]
fn itr_with_optimal_imputer_fits_population_optimum() {
    let p = pop(toeplitz_covariance(3, 0.5), dvector![1.0, -1.0, 2.0], 0.1);
    let fed = Federation::uniform(vec![pattern(3, &[1, 2]), pattern(3, &[2, 3]), pattern(3, &[1, 2, 3])]).unwrap();
    let data = sample_dataset(&p, &fed, 50_000, &mut rng_from(3, &[])).unwrap();
    let map = fit_optimal_imputer(p.sigma(), &fed, Inversion::default(), CovarianceSource::Population).unwrap();
    let fit = fit_itr(&data, &map, &RidgeConfig::closed_form(0.0)).unwrap();
    for c in fed.iter() {
        let eff = fit.predictor.effective_coefficients(c.id).unwrap();
        let want = best_local_coefficients(&p, &c.pattern).unwrap();
        assert!((eff - want).amax() < 0.05, "client {}", c.id);
    }
}

#[test]
fn monte_carlo_matches_analytic_oracle() {
    let p = pop(toeplitz_covariance(3, 0.4), dvector![1.0, 0.5, -1.0], 1.0);
    let fed = Federation::uniform(vec![pattern(3, &[1]), pattern(3, &[2, 3])]).unwrap();
    let mut oracle = ClientwisePredictor::new(None).unwrap();
    for c in fed.iter() {
        oracle.insert(c.id, c.pattern.clone(), best_local_coefficients(&p, &c.pattern).unwrap()).unwrap();
    }
    let mc = monte_carlo_risk(&oracle, &p, &fed, 100_000, 11).unwrap();
    let exact = oracle_global_risk(&p, &fed).unwrap();
    assert!((mc.risk - exact).abs() <= 4.0 * mc.stderr, "{} vs {exact} (se {})", mc.risk, mc.stderr);
    let again = monte_carlo_risk(&oracle, &p, &fed, 100_000, 11).unwrap();
    assert_eq!(mc.risk.to_bits(), again.risk.to_bits());
}

#[test]
fn protocols_agree_with_centralised_fits() {
    let fed = illustration_federation();
    let p = pop(toeplitz_covariance(4, 0.3), dvector![1.0, 2.0, 0.0, -1.0], 0.5);
    let data = sample_dataset(&p, &fed, 400, &mut rng_from(4, &[])).unwrap();
    let cfg = ServerConfig::default();

    let spec = ProtocolSpec::new(ProtocolKind::OneShotMoments);
    let run = run_protocol(&spec, &mut SimClient::from_dataset(&data).unwrap(), &cfg);
    assert_eq!(CommTotals::of(run.comm()), replay_comm_schedule(&spec, 2, 4));
    match run.result.unwrap() {
        fedmismatch_core::fedsim::ProtocolResult::Moments { component_wise, .. } => {
            let central = cw_moments_from_dataset(&data).unwrap();
            assert!((component_wise.sigma() - central.sigma()).amax() < 1e-12);
        }
        other => panic!("unexpected artifact {other:?}"),
    }

    let spec = ProtocolSpec::new(ProtocolKind::OneShotRidge { lambda: 0.3 });
    let run = run_protocol(&spec, &mut SimClient::from_dataset(&data).unwrap(), &cfg);
    let central = ridge_closed_form(&apply_imputer(&fit_zero_imputer(&fed), &data).unwrap(), 0.3).unwrap();
    match run.result.unwrap() {
        fedmismatch_core::fedsim::ProtocolResult::Ridge { theta } => assert!((theta - central.theta).amax() < 1e-12),
        other => panic!("unexpected artifact {other:?}"),
    }
}

fn spd_strategy(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, d * d).prop_map(move |v| {
        let a = DMatrix::from_vec(d, d, v);
        &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.1
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn optimal_imputation_dominates_full_covariance(
        (sigma, theta, masks, lambda) in (2usize..6).prop_flat_map(|d| (
            spd_strategy(d),
            prop::collection::vec(-2.0..2.0f64, d),
            prop::collection::vec(prop::collection::vec(any::<bool>(), d), 1..4),
            0.01..2.0f64,
        ))
    ) {
        let d = sigma.nrows();
        let p = pop(sigma, DVector::from_vec(theta), 0.5);
        let patterns: Vec<FeaturePattern> = masks.iter().map(|m| FeaturePattern::from_mask(m)).collect();
        let fed = Federation::uniform(patterns).unwrap();
        let opt = imputed_population_covariance(&p, &fed, PopulationImputer::OptimalLinear).unwrap();
        let zero = imputed_population_covariance(&p, &fed, PopulationImputer::Zero).unwrap();
        prop_assert!(effective_dimension(&opt.sigma, lambda).unwrap() <= effective_dimension(p.sigma(), lambda).unwrap() + 1e-9);
        prop_assert!(ridge_bias(&opt.sigma, &opt.theta_prime, lambda).unwrap()
            <= ridge_bias(p.sigma(), p.theta_star(), lambda).unwrap() + 1e-9);
        prop_assert!(opt.r_star <= zero.r_star + 1e-9);
        prop_assert!(effective_dimension(&zero.sigma, lambda).unwrap() <= d as f64 + 1e-12);
    }
}

use std::sync::Arc;

use nlmesel_core::data::{Observation, Subject};
use nlmesel_core::selection::{stepwise_select, SearchStart, StepwiseOptions};
use nlmesel_core::sim::{mc_selection_study, oral_design, oral_spec, oral_theta, Candidate, McConfig};
use nlmesel_core::structural::{OneCptInfusion, OneCptOral, PolynomialTime};
use nlmesel_core::*;
use proptest::prelude::*;
use proptest::test_runner::Config;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn pattern_strategy(max_d: usize) -> impl Strategy<Value = CovariancePattern> {
    (1..=max_d).prop_flat_map(|d| {
        (prop::collection::vec(any::<bool>(), d), prop::collection::vec(any::<bool>(), d * d)).prop_map(
            move |(diag, bits)| {
                let mut p = CovariancePattern::diagonal(diag.clone());
                for k in 0..d {
                    for l in k + 1..d {
                        if diag[k] && diag[l] && bits[k * d + l] {
                            p.set_correlation(k, l, true);
                        }
                    }
                }
                p
            },
        )
    })
}

fn poly_spec(pattern: CovariancePattern, covmap: CovariateMap) -> ModelSpec {
    let d = pattern.d();
    ModelSpec::new(
        Arc::new(PolynomialTime::new(d)),
        vec![Transform::Identity; d],
        covmap,
        pattern,
        ErrorKind::Additive,
    )
    .unwrap()
}

/// Random-intercept-and-slope data with two subject covariates `x1`, `x2`.
fn linear_data(seed: u64, n_sub: usize, x1_effect: f64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects = (0..n_sub)
        .map(|i| {
            let x1: f64 = StandardNormal.sample(&mut rng);
            let x2: f64 = StandardNormal.sample(&mut rng);
            let b0: f64 = 0.7 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            let b1: f64 = 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            let observations = (0..5)
                .map(|j| {
                    let t = j as f64 * 0.5;
                    let e: f64 = StandardNormal.sample(&mut rng);
                    Observation {
                        time: t,
                        regressors: vec![],
                        y: 2.0 + x1_effect * x1 + b0 + (-0.5 + b1) * t + 0.3 * e,
                    }
                })
                .collect();
            Subject {
                id: format!("s{i:03}"),
                observations,
                covariates: vec![x1, x2],
            }
        })
        .collect();
    Dataset::new(vec![], vec!["x1".into(), "x2".into()], subjects).unwrap()
}

fn oral_case(seed: u64) -> (Dataset, ModelSpec, ThetaVector) {
    let spec = oral_spec(CovariancePattern::all_random(3).with_correlation(0, 2)).unwrap();
    let theta = oral_theta(&spec, &[(0, 2, 0.4)]).unwrap();
    let data = sim::simulate_dataset(&spec, &theta, &oral_design(seed)).unwrap();
    (data, spec, theta)
}

fn fast_fit() -> FitOptions {
    FitOptions {
        compute_se: false,
        ..FitOptions::default()
    }
}

proptest! {
    #[test]
    fn dims_partition_the_parameter_vector(pattern in pattern_strategy(4), cov_bits in prop::collection::vec(any::<bool>(), 8)) {
        let d = pattern.d();
        let per_param: Vec<Vec<String>> = (0..d)
            .map(|k| ["x1", "x2"].iter().enumerate().filter(|(j, _)| cov_bits[2 * k + j]).map(|(_, n)| n.to_string()).collect())
            .collect();
        let spec = poly_spec(pattern.clone(), CovariateMap::new(per_param).unwrap());
        let dims = theta_dims(&spec);
        prop_assert_eq!(dims.dim_theta_r() + dims.dim_theta_f(), spec.n_params());
        prop_assert_eq!(dims.dim_theta(), spec.n_params());
        prop_assert_eq!(dims.dim_vec_omega, count_vec_omega(&pattern));
        let theta = default_init(&linear_data(1, 4, 0.0), &spec).unwrap();
        prop_assert_eq!(pack(&theta, &spec).unwrap().len(), spec.n_params());
    }

    #[test]
    fn each_added_variance_or_pair_counts_once(pattern in pattern_strategy(5), k in 0usize..5, l in 0usize..5) {
        let d = pattern.d();
        let (k, l) = (k % d, l % d);
        let base = count_vec_omega(&pattern);
        if !pattern.is_random(k) {
            let mut more = pattern.clone();
            more.set_random(k, true);
            prop_assert_eq!(count_vec_omega(&more), base + 1);
        }
        if k != l && pattern.is_random(k) && pattern.is_random(l) && !pattern.is_correlated(k, l) {
            let more = pattern.clone().with_correlation(k, l);
            prop_assert!(validate_pattern(more.clone()).is_ok());
            prop_assert_eq!(count_vec_omega(&more), base + 1);
        }
    }

    #[test]
    fn infusion_is_continuous_at_the_joints(
        dose in 1.0f64..1000.0,
        t_d in 0.0f64..5.0,
        tinf in 0.05f64..3.0,
        k in 0.01f64..2.0,
        v in 1.0f64..100.0,
    ) {
        let m = OneCptInfusion;
        let r = [dose, t_d, tinf];
        let scale = dose / v;
        // times before the dose are outside the domain, so the start joint is one-sided
        let h = 1e-9 * t_d.max(1.0);
        let at = m.predict(t_d, &r, &[k, v]).unwrap();
        prop_assert_eq!(at, 0.0);
        prop_assert!(m.predict(t_d + h, &r, &[k, v]).unwrap().abs() <= 1e-6 * scale);
        let end = t_d + tinf;
        let h = 1e-9 * end.max(1.0);
        let left = m.predict(end - h, &r, &[k, v]).unwrap();
        let right = m.predict(end + h, &r, &[k, v]).unwrap();
        prop_assert!((left - right).abs() <= 1e-6 * scale, "jump {} at {}", left - right, end);
        prop_assert!(m.predict(t_d + 0.5 * tinf, &r, &[k, v]).unwrap() > 0.0);
        prop_assert!(m.predict(t_d + tinf + 1.0, &r, &[k, v]).unwrap() > 0.0);
    }

    #[test]
    fn oral_concentration_is_positive_after_the_dose(
        dose in 1.0f64..1000.0,
        t in 1e-3f64..100.0,
        ka in 0.05f64..5.0,
        k in 0.01f64..1.0,
        v in 1.0f64..100.0,
    ) {
        prop_assert!(OneCptOral.predict(t, &[dose], &[ka, k, v]).unwrap() > 0.0);
        // ka == k has a removable singularity
        prop_assert!(OneCptOral.predict(t, &[dose], &[k, k, v]).unwrap() > 0.0);
    }
}

proptest! {
    #![proptest_config(Config::with_cases(12))]

    #[test]
    fn marginal_loglik_adds_over_subjects(seed in any::<u64>()) {
        let (data, spec, theta) = oral_case(seed);
        let total = marginal_loglik_laplace(&data, &theta, &spec).unwrap();
        let parts: f64 = (0..data.n_subjects())
            .map(|i| marginal_loglik_laplace(&data.select_subjects(&[i]).unwrap(), &theta, &spec).unwrap())
            .sum();
        prop_assert!((total - parts).abs() <= 1e-9 * total.abs().max(1.0), "{total} vs {parts}");
        let agq = marginal_loglik_agq(&data, &theta, &spec, 3).unwrap();
        let agq_parts: f64 = (0..data.n_subjects())
            .map(|i| marginal_loglik_agq(&data.select_subjects(&[i]).unwrap(), &theta, &spec, 3).unwrap())
            .sum();
        prop_assert!((agq - agq_parts).abs() <= 1e-9 * agq.abs().max(1.0));
    }

    #[test]
    fn row_order_does_not_change_the_likelihood(seed in any::<u64>(), shuffle in any::<u64>()) {
        let (data, spec, theta) = oral_case(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle);
        let mut subjects = data.subjects().to_vec();
        subjects.shuffle(&mut rng);
        for s in &mut subjects {
            s.observations.shuffle(&mut rng);
        }
        let permuted = Dataset::new(data.regressor_names().to_vec(), data.covariate_names().to_vec(), subjects).unwrap();
        let a = marginal_loglik_laplace(&data, &theta, &spec).unwrap();
        let b = marginal_loglik_laplace(&permuted, &theta, &spec).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        let a = marginal_loglik_agq(&data, &theta, &spec, 5).unwrap();
        let b = marginal_loglik_agq(&permuted, &theta, &spec, 5).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn eb_mode_does_not_depend_on_the_start(seed in any::<u64>(), subject in 0usize..20, start in prop::collection::vec(-0.5f64..0.5, 3)) {
        let (data, spec, theta) = oral_case(seed);
        let cold = eb_mode(&data, subject, &theta, &spec).unwrap();
        let warm = eb_mode_from(&data, subject, &theta, &spec, &start).unwrap();
        prop_assert!(cold.converged && warm.converged);
        let diff = (&cold.eta_hat - &warm.eta_hat).amax();
        prop_assert!(diff < 1e-6, "modes differ by {diff}");
        prop_assert!((cold.joint_log_density - warm.joint_log_density).abs() < 1e-9);
    }

    #[test]
    fn covariate_rescaling_is_absorbed_by_the_coefficient(seed in any::<u64>(), c in 0.1f64..10.0) {
        let data = linear_data(seed, 15, 0.4);
        let mut covmap = CovariateMap::empty(2);
        covmap = covmap.with_added(0, "x1");
        let spec = poly_spec(CovariancePattern::all_random(2), covmap);
        let mut theta = default_init(&data, &spec).unwrap();
        theta.beta[1] = 0.4;
        let base = marginal_loglik_laplace(&data, &theta, &spec).unwrap();

        let subjects = data
            .subjects()
            .iter()
            .map(|s| Subject { covariates: vec![s.covariates[0] * c, s.covariates[1]], ..s.clone() })
            .collect();
        let scaled = Dataset::new(vec![], data.covariate_names().to_vec(), subjects).unwrap();
        theta.beta[1] = 0.4 / c;
        let rescaled = marginal_loglik_laplace(&scaled, &theta, &spec).unwrap();
        prop_assert!((base - rescaled).abs() <= 1e-9 * base.abs().max(1.0), "{base} vs {rescaled}");
    }
}

proptest! {
    #![proptest_config(Config::with_cases(4))]

    #[test]
    fn fitted_loglik_matches_a_fresh_evaluation(seed in any::<u64>()) {
        let (data, _, _) = oral_case(seed);
        let spec = oral_spec(CovariancePattern::diagonal(vec![true, false, true])).unwrap();
        let fit = fit_ml(&data, &spec, &fast_fit()).unwrap();
        let again = marginal_loglik_laplace(&data, &fit.theta, &spec).unwrap();
        prop_assert!((fit.loglik - again).abs() <= 1e-10 * fit.loglik.abs().max(1.0), "{} vs {again}", fit.loglik);
    }

    #[test]
    fn fitted_loglik_is_invariant_to_covariate_units(seed in any::<u64>(), c in 0.1f64..10.0) {
        let data = linear_data(seed, 25, 0.4);
        let spec = poly_spec(CovariancePattern::all_random(2), CovariateMap::empty(2).with_added(0, "x1"));
        let subjects = data
            .subjects()
            .iter()
            .map(|s| Subject { covariates: vec![s.covariates[0] * c, s.covariates[1]], ..s.clone() })
            .collect();
        let scaled = Dataset::new(vec![], data.covariate_names().to_vec(), subjects).unwrap();
        let a = fit_ml(&data, &spec, &fast_fit()).unwrap();
        let b = fit_ml(&scaled, &spec, &fast_fit()).unwrap();
        prop_assert!((a.loglik - b.loglik).abs() < 1e-6, "{} vs {}", a.loglik, b.loglik);
        prop_assert!((a.theta.beta[1] - c * b.theta.beta[1]).abs() < 1e-4);
    }

    #[test]
    fn a_larger_covariate_map_fits_at_least_as_well(seed in any::<u64>()) {
        let data = linear_data(seed, 25, 0.4);
        let small = poly_spec(CovariancePattern::all_random(2), CovariateMap::empty(2).with_added(0, "x1"));
        let large = small.with_covmap(small.covmap().with_added(0, "x2").with_added(1, "x1")).unwrap();
        let a = fit_ml(&data, &small, &fast_fit()).unwrap();
        let b = fit_ml(&data, &large, &fast_fit()).unwrap();
        prop_assert!(b.loglik >= a.loglik - 1e-6, "{} < {}", b.loglik, a.loglik);
    }
}

fn search_options(start: SearchStart) -> StepwiseOptions {
    StepwiseOptions {
        start,
        max_steps: 10,
        ..StepwiseOptions::default()
    }
}

proptest! {
    #![proptest_config(Config::with_cases(3))]

    #[test]
    fn selection_ignores_the_response_unit(seed in any::<u64>(), c in 0.2f64..5.0) {
        let data = linear_data(seed, 20, 0.6);
        let subjects = data
            .subjects()
            .iter()
            .map(|s| Subject {
                observations: s.observations.iter().map(|o| Observation { y: o.y * c, ..o.clone() }).collect(),
                ..s.clone()
            })
            .collect();
        let scaled = Dataset::new(vec![], data.covariate_names().to_vec(), subjects).unwrap();
        let spec = poly_spec(CovariancePattern::diagonal(vec![true, false]), CovariateMap::empty(2));
        let pool = ["x1".to_string(), "x2".to_string()];
        let opts = search_options(SearchStart::Forward);
        let a = stepwise_select(&data, &spec, &pool, CriterionKind::BicJoint, &opts).unwrap();
        let b = stepwise_select(&scaled, &spec, &pool, CriterionKind::BicJoint, &opts).unwrap();
        prop_assert_eq!(&a.final_summary, &b.final_summary);
        // log L shifts by -n_tot log c for every candidate
        let shift = 2.0 * data.n_total() as f64 * c.ln();
        prop_assert!((b.final_value - a.final_value - shift).abs() < 1e-4);
    }

    #[test]
    fn accepted_models_never_repeat(seed in any::<u64>(), backward in any::<bool>()) {
        let data = linear_data(seed, 20, 0.6);
        let spec = poly_spec(CovariancePattern::diagonal(vec![true, false]), CovariateMap::empty(2));
        let pool = ["x1".to_string(), "x2".to_string()];
        let start = if backward { SearchStart::Backward } else { SearchStart::Forward };
        let trace = stepwise_select(&data, &spec, &pool, CriterionKind::BicJoint, &search_options(start)).unwrap();
        let mut seen = std::collections::HashSet::new();
        for step in &trace.steps {
            if let Some(a) = step.accepted {
                prop_assert!(seen.insert(step.candidates[a].summary.clone()), "{} accepted twice", step.candidates[a].summary);
            }
        }
    }
}

fn small_study(seed: u64) -> McConfig {
    let truth_spec = oral_spec(CovariancePattern::diagonal(vec![false, false, true])).unwrap();
    let truth = oral_theta(&truth_spec, &[]).unwrap();
    let names = truth_spec.parameter_names();
    let candidates = [vec![false, false, true], vec![false, true, true], vec![true, false, true]]
        .into_iter()
        .map(|d| Candidate::from_pattern(&names, CovariancePattern::diagonal(d)))
        .collect();
    let mut design = oral_design(0);
    design.n_subjects = 12;
    McConfig {
        replicates: 5,
        seed,
        criterion: CriterionKind::BicV,
        design,
        truth_spec,
        truth,
        candidates,
        fit: fast_fit(),
    }
}

proptest! {
    #![proptest_config(Config::with_cases(2))]

    #[test]
    fn study_frequencies_account_for_every_replicate(seed in any::<u64>()) {
        let cfg = small_study(seed);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| mc_selection_study(&cfg).unwrap())
        };
        let one = run(1);
        let three = run(3);
        prop_assert_eq!(&one, &three);
        let counted: usize = one.frequencies.iter().map(|f| f.selected_count).sum();
        prop_assert_eq!(counted + one.failed, cfg.replicates);
        let total: f64 = one.frequencies.iter().map(|f| f.frequency).sum::<f64>() + one.failed as f64 / cfg.replicates as f64;
        prop_assert!((total - 1.0).abs() < 1e-12);
    }
}

use std::sync::Arc;

use canova_core::nuisance::cellmean::CellMeanModel;
use canova_core::nuisance::{
    block_value, conditional_mean_excluding, conditional_moment_given_factor, fit_all_folds,
    fit_nuisances, fit_on_indices, Integrand, IntegrationMode,
};
use canova_core::simulation::{generate, DgpKind, DgpSpec};
use canova_core::{
    make_fold_plan, BuildingBlock, Dataset, Error, Factor, FactorSet, LearnerConfig, NuisanceFit,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn set(ix: &[usize]) -> FactorSet {
    ix.iter().copied().collect()
}

fn table_fit(levels: Vec<usize>, probs: Vec<Vec<f64>>, mu: Vec<f64>, nu: Vec<f64>) -> NuisanceFit {
    let model = CellMeanModel::from_table(levels, probs, mu, nu).unwrap();
    NuisanceFit::from_model(
        Arc::new(model),
        "table",
        IntegrationMode::ExactEnumeration,
        Vec::new(),
    )
}

fn discrete(levels: &[usize], codes: &[Vec<usize>], y: Vec<f64>) -> Dataset {
    let factors = levels
        .iter()
        .zip(codes)
        .enumerate()
        .map(|(k, (&l, c))| Factor::discrete_codes(format!("F{}", k + 1), l, c))
        .collect();
    Dataset::new("y", y, factors).unwrap()
}

#[test]
fn fold_plan_contract() {
    assert_eq!(make_fold_plan(10, 5, 7).unwrap().fold_sizes(), vec![2; 5]);
    let mut sizes = make_fold_plan(11, 5, 7).unwrap().fold_sizes();
    sizes.sort();
    assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
    assert!(matches!(
        make_fold_plan(3, 5, 1),
        Err(Error::TooFewObservations { .. })
    ));
}

#[test]
fn saturated_cells_reproduce_cell_means() {
    let a: Vec<usize> = (0..40).map(|i| i % 2).collect();
    let b: Vec<usize> = (0..40).map(|i| (i / 2) % 2).collect();
    let y: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(&u, &v)| 3.0 * u as f64 - v as f64 + 0.5)
        .collect();
    let data = discrete(&[2, 2], &[a, b], y.clone());
    let plan = make_fold_plan(40, 4, 3).unwrap();
    for fit in fit_all_folds(&data, &plan, &LearnerConfig::cellmean()).unwrap() {
        for i in 0..40 {
            let w = data.row(i);
            assert_eq!(fit.mu(&w), y[i]);
            assert_eq!(fit.nu(&w), y[i] * y[i]);
        }
    }
}

#[test]
fn linear_fit_matches_ordinary_least_squares() {
    let kind = DgpKind::Custom {
        factors: vec![canova_core::simulation::FactorDist::Uniform; 2],
        terms: vec![
            canova_core::simulation::CustomTerm {
                coef: 1.0,
                exponents: vec![1, 0],
            },
            canova_core::simulation::CustomTerm {
                coef: 1.0,
                exponents: vec![0, 1],
            },
        ],
        noise: canova_core::simulation::NoiseSpec::Variance(1.0),
    };
    let data = generate(&DgpSpec {
        kind,
        n: 400,
        seed: 5,
    })
    .unwrap()
    .data;
    let train: Vec<usize> = (0..400).collect();
    let fit = fit_on_indices(&data, &train, 0, &LearnerConfig::polyls(1)).unwrap();

    let x = DMatrix::from_fn(
        400,
        3,
        |i, j| if j == 0 { 1.0 } else { data.column(j - 1)[i] },
    );
    let y = DVector::from_column_slice(data.outcome());
    let xtx = x.transpose() * &x;
    let inv = xtx.clone().try_inverse().unwrap();
    let beta = &inv * x.transpose() * &y;
    let resid = &y - &x * &beta;
    let s2 = resid.norm_squared() / (400.0 - 3.0);
    for (j, target) in [0.0, 1.0, 1.0].iter().enumerate() {
        let se = (s2 * inv[(j, j)]).sqrt();
        assert!(
            (beta[j] - target).abs() <= 3.0 * se,
            "coef {j}: {} vs {target}",
            beta[j]
        );
    }
    for w in [[0.0, 0.0], [0.5, -0.25], [-0.9, 0.8]] {
        let ols = beta[0] + beta[1] * w[0] + beta[2] * w[1];
        assert!((fit.mu(&w) - ols).abs() < 1e-8);
    }
}

#[test]
fn empty_cell_falls_back_to_training_mean() {
    let a = vec![0, 0, 1, 1, 0, 1, 1, 0];
    let b = vec![0, 1, 0, 1, 0, 0, 1, 1];
    let y = vec![1.0, 2.0, 3.0, 10.0, 1.5, 2.5, 11.0, 2.5];
    let data = discrete(&[2, 2], &[a, b], y.clone());
    // rows 3 and 6 are the only (1,1) cells
    let train = vec![0, 1, 2, 4, 5, 7];
    let fit = fit_on_indices(&data, &train, 0, &LearnerConfig::cellmean()).unwrap();
    let mean: f64 = train.iter().map(|&i| y[i]).sum::<f64>() / train.len() as f64;
    assert!((fit.mu(&[1.0, 1.0]) - mean).abs() < 1e-15);
    assert!(fit.diagnostics.iter().any(|d| d.contains("EmptyCell")));
    assert!(!fit.model().in_support(&[1.0, 1.0]));
}

#[test]
fn no_exclusion_is_the_fitted_mean() {
    let fit = table_fit(
        vec![2, 2],
        vec![vec![0.5, 0.5]; 2],
        vec![0.0, 1.0, 2.0, 3.0],
        vec![1.0, 2.0, 5.0, 10.0],
    );
    for w in [[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]] {
        assert_eq!(
            conditional_mean_excluding(&fit, FactorSet::empty(), &w),
            fit.mu(&w)
        );
    }
    assert_eq!(
        conditional_mean_excluding(&fit, set(&[0]), &[1.0, 0.0]),
        1.0
    );
    assert_eq!(
        conditional_mean_excluding(&fit, set(&[0, 1]), &[1.0, 0.0]),
        1.5
    );
    assert_eq!(
        block_value(&fit, BuildingBlock::new(set(&[0])))
            .unwrap()
            .numerator,
        2.5
    );
}

#[test]
fn constant_mean_gives_squared_constant() {
    let c = 1.7;
    let fit = table_fit(
        vec![3, 2],
        vec![vec![0.2, 0.3, 0.5], vec![0.6, 0.4]],
        vec![c; 6],
        vec![c * c + 1.0; 6],
    );
    for bits in 0..4 {
        let v = block_value(&fit, BuildingBlock::new(FactorSet::from_bits(bits))).unwrap();
        assert!((v.numerator - c * c).abs() < 1e-14);
    }
}

#[test]
fn constant_outcome_is_degenerate() {
    let a: Vec<usize> = (0..20).map(|i| i % 2).collect();
    let b: Vec<usize> = (0..20).map(|i| (i / 3) % 2).collect();
    let data = discrete(&[2, 2], &[a, b], vec![4.0; 20]);
    let plan = make_fold_plan(20, 2, 0).unwrap();
    let fit = fit_nuisances(&data, &plan, 0, &LearnerConfig::cellmean()).unwrap();
    let err = fit.var_y().unwrap_err();
    assert!(matches!(err, Error::DegenerateVariance { .. }));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn single_factor_needs_no_integration() {
    let fit = table_fit(
        vec![3],
        vec![vec![0.2, 0.3, 0.5]],
        vec![1.0, -2.0, 4.0],
        vec![2.0, 5.0, 17.0],
    );
    let mean_mu = 0.2 * 1.0 + 0.3 * -2.0 + 0.5 * 4.0;
    for (a, mu) in [1.0, -2.0, 4.0].iter().enumerate() {
        let w = a as f64;
        let sq = conditional_moment_given_factor(
            &fit,
            Integrand::MuExclSquared(FactorSet::empty()),
            0,
            w,
        );
        assert!((sq - mu * mu).abs() < 1e-14);
        let cross =
            conditional_moment_given_factor(&fit, Integrand::MuTimesMuExcl(set(&[0])), 0, w);
        assert!((cross - mu * mean_mu).abs() < 1e-14);
    }
}

#[test]
fn integrand_already_a_function_of_the_factor() {
    let fit = table_fit(
        vec![2, 2],
        vec![vec![0.5, 0.5]; 2],
        vec![0.0, 1.0, 2.0, 3.0],
        vec![1.0, 2.0, 5.0, 10.0],
    );
    for w2 in [0.0, 1.0] {
        let m = conditional_mean_excluding(&fit, set(&[0]), &[0.0, w2]);
        let g = conditional_moment_given_factor(&fit, Integrand::MuExclSquared(set(&[0])), 1, w2);
        assert_eq!(g, m * m);
    }
    for w1 in [0.0, 1.0] {
        let g = conditional_moment_given_factor(&fit, Integrand::MuExclSquared(set(&[0])), 0, w1);
        assert_eq!(g, 2.5);
    }
}

#[test]
fn monte_carlo_agrees_with_enumeration() {
    let n = 600;
    let levels = [3, 4, 2];
    let codes: Vec<Vec<usize>> = levels
        .iter()
        .enumerate()
        .map(|(k, &l)| (0..n).map(|i| (i * (k + 2) + i / (k + 3)) % l).collect())
        .collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b, c) = (codes[0][i] as f64, codes[1][i] as f64, codes[2][i] as f64);
            a * b - c + 0.3 * ((i * 17) % 11) as f64
        })
        .collect();
    let data = discrete(&levels, &codes, y);
    let train: Vec<usize> = (0..n).collect();
    let exact = fit_on_indices(&data, &train, 0, &LearnerConfig::cellmean()).unwrap();
    let mc_cfg = LearnerConfig {
        force_monte_carlo: true,
        mc_draws: 200_000,
        mc_seed: 9,
        ..LearnerConfig::cellmean()
    };
    let mc = fit_on_indices(&data, &train, 0, &mc_cfg).unwrap();
    assert!(matches!(mc.integration, IntegrationMode::MonteCarlo { .. }));
    for bits in 0..8 {
        let block = BuildingBlock::new(FactorSet::from_bits(bits));
        let e = block_value(&exact, block).unwrap();
        let m = block_value(&mc, block).unwrap();
        let se = m.numerator_std_error.unwrap_or(0.0);
        assert!(
            (e.numerator - m.numerator).abs() <= 3.0 * se + 1e-9,
            "block {bits}: {} vs {} (se {se})",
            e.numerator,
            m.numerator
        );
    }
}

#[test]
fn held_out_outcomes_do_not_move_the_fit() {
    let gen = generate(&DgpSpec {
        kind: DgpKind::paper(1.0),
        n: 200,
        seed: 8,
    })
    .unwrap();
    let plan = make_fold_plan(200, 4, 2).unwrap();
    let mut y = gen.data.outcome().to_vec();
    for i in plan.test_indices(1) {
        y[i] += 100.0;
    }
    let shifted = gen.data.with_outcome(y).unwrap();
    let learner = LearnerConfig::polyls(3);
    let a = fit_nuisances(&gen.data, &plan, 1, &learner).unwrap();
    let b = fit_nuisances(&shifted, &plan, 1, &learner).unwrap();
    for i in 0..200 {
        let w = gen.data.row(i);
        assert_eq!(a.mu(&w), b.mu(&w));
        assert_eq!(a.nu(&w), b.nu(&w));
    }
    let c = fit_nuisances(&shifted, &plan, 2, &learner).unwrap();
    assert_ne!(a.mu(&gen.data.row(0)), c.mu(&gen.data.row(0)));
}

#[test]
fn polynomial_tower_property_over_training_marginals() {
    let gen = generate(&DgpSpec {
        kind: DgpKind::paper(1.0),
        n: 120,
        seed: 21,
    })
    .unwrap();
    let train: Vec<usize> = (0..120).collect();
    let fit = fit_on_indices(&gen.data, &train, 0, &LearnerConfig::polyls(3)).unwrap();
    let var = fit.var_y().unwrap();
    for bits in 0..8u64 {
        let s = FactorSet::from_bits(bits);
        let theta = block_value(&fit, BuildingBlock::new(s)).unwrap().numerator;
        for k in 0..3 {
            let col = gen.data.column(k);
            let avg = |g: Integrand| {
                col.iter()
                    .map(|&w| conditional_moment_given_factor(&fit, g, k, w))
                    .sum::<f64>()
                    / 120.0
            };
            let tol = 1e-9 * theta.abs().max(1.0);
            assert!((avg(Integrand::MuExclSquared(s)) - theta).abs() < tol);
            assert!((avg(Integrand::MuTimesMuExcl(s)) - theta).abs() < tol);
            assert!((avg(Integrand::YSquaredCentered) - var).abs() < 1e-9 * var.max(1.0));
        }
    }
}

fn arb_table() -> impl Strategy<Value = (Vec<usize>, Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    prop::collection::vec(1usize..=3, 1..=3).prop_flat_map(|levels| {
        let cells: usize = levels.iter().product();
        let probs = levels
            .iter()
            .map(|&l| prop::collection::vec(0.05f64..1.0, l))
            .collect::<Vec<_>>();
        (
            Just(levels),
            probs,
            prop::collection::vec(-3.0f64..3.0, cells),
            prop::collection::vec(0.1f64..2.0, cells),
        )
    })
}

proptest! {
    #[test]
    fn fold_plans_partition(n in 4usize..300, folds in 2usize..8, seed in any::<u64>()) {
        prop_assume!(n >= 2 * folds);
        let plan = make_fold_plan(n, folds, seed).unwrap();
        let mut seen = vec![false; n];
        for l in 0..folds {
            for i in plan.test_indices(l) {
                prop_assert!(!seen[i]);
                seen[i] = true;
                prop_assert_eq!(plan.fold_of(i), l);
            }
            let train = plan.train_indices(l);
            prop_assert_eq!(train.len() + plan.test_indices(l).len(), n);
            prop_assert!(train.iter().all(|&i| plan.fold_of(i) != l));
        }
        prop_assert!(seen.iter().all(|&s| s));
        let sizes = plan.fold_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(make_fold_plan(n, folds, seed).unwrap(), plan);
    }

    #[test]
    fn tower_property_on_tables((levels, raw_probs, mu, extra) in arb_table(), bits in 0u64..8) {
        let k = levels.len();
        let s = FactorSet::from_bits(bits & ((1 << k) - 1));
        let probs: Vec<Vec<f64>> = raw_probs
            .iter()
            .map(|p| {
                let t: f64 = p.iter().sum();
                p.iter().map(|x| x / t).collect()
            })
            .collect();
        let nu: Vec<f64> = mu.iter().zip(&extra).map(|(m, e)| m * m + e).collect();
        let fit = table_fit(levels.clone(), probs.clone(), mu, nu);
        let theta = block_value(&fit, BuildingBlock::new(s)).unwrap().numerator;
        let var = fit.var_y().unwrap();
        for j in 0..k {
            let avg = |g: Integrand| -> f64 {
                (0..levels[j]).map(|a| probs[j][a] * conditional_moment_given_factor(&fit, g, j, a as f64)).sum()
            };
            prop_assert!((avg(Integrand::MuExclSquared(s)) - theta).abs() < 1e-12);
            prop_assert!((avg(Integrand::MuTimesMuExcl(s)) - theta).abs() < 1e-12);
            prop_assert!((avg(Integrand::YSquaredCentered) - var).abs() < 1e-12);
        }
        // more exclusion never increases the numerator
        let full = block_value(&fit, BuildingBlock::new(FactorSet::full(k))).unwrap().numerator;
        let none = block_value(&fit, BuildingBlock::new(FactorSet::empty())).unwrap().numerator;
        prop_assert!(full <= theta + 1e-12 && theta <= none + 1e-12);
    }
}

#[test]
fn auto_learner_depends_on_cell_density() {
    let n = 120;
    let dense: Vec<Vec<usize>> = vec![
        (0..n).map(|i| i % 2).collect(),
        (0..n).map(|i| (i / 2) % 3).collect(),
    ];
    let y: Vec<f64> = (0..n).map(|i| (i % 7) as f64).collect();
    let rows: Vec<usize> = (0..n).collect();
    let fit = fit_on_indices(
        &discrete(&[2, 3], &dense, y.clone()),
        &rows,
        0,
        &LearnerConfig::default(),
    )
    .unwrap();
    assert_eq!(fit.learner_tag, "cellmean");
    // 4^4 cells for 120 rows is too sparse for cell means
    let sparse: Vec<Vec<usize>> = (0..4)
        .map(|k| (0..n).map(|i| (i / (k + 1) + k) % 4).collect())
        .collect();
    let fit = fit_on_indices(
        &discrete(&[4; 4], &sparse, y),
        &rows,
        0,
        &LearnerConfig::default(),
    )
    .unwrap();
    assert_eq!(fit.learner_tag, "polyls(degree=3, order=2)");
}

//! Empirical likelihood weights against a brute-force one-dimensional search,
//! and constraint satisfaction of penalized fits.

mod common;

use common::grid_weights;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stdr_core::elopt::{fit_propensity_el_problem, select_lambda_bic, solve_inner_weights, ElOptions, PropensityProblem};
use stdr_core::propensity::{score, ScadPenalty};
use stdr_core::synthdgp::{generate, DgpConfig};

#[test]
fn dual_newton_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    while checked < 50 {
        let n = rng.gen_range(3..=12);
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        // Zero must be strictly inside the hull of the moments.
        if g.iter().all(|v| *v > 0.0) || g.iter().all(|v| *v < 0.0) {
            continue;
        }
        let sol = solve_inner_weights(&DMatrix::from_column_slice(n, 1, &g)).unwrap();
        let oracle = grid_weights(&g);
        for (a, b) in sol.weights.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-4, "n={n}: newton {a} vs grid {b}");
        }
        checked += 1;
    }
}

fn check_constraints(problem: &PropensityProblem, sol: &stdr_core::elopt::ElSolution) {
    let w = &sol.weights;
    let total: f64 = w.iter().sum();
    assert!((total - 1.0).abs() < 1e-10, "weights sum to {total}");
    let (n, d) = problem.design.shape();
    let mut worst: f64 = 0.0;
    for j in 0..d {
        let mut s = 0.0;
        for i in 0..n {
            let x: Vec<f64> = problem.design.row(i).iter().skip(usize::from(problem.intercept)).copied().collect();
            let e = score(&sol.model, &x).unwrap();
            s += w[i] * (problem.treatment[i] - e) * problem.design[(i, j)];
        }
        worst = worst.max(s.abs());
    }
    assert!(worst < 1e-8, "moment residual {worst}");
}

#[test]
fn penalized_fits_satisfy_the_constraints() {
    let cfg = DgpConfig { n: 300, p: 20, seed: 4, ..Default::default() };
    let ds = generate(&cfg).unwrap();
    let problem = PropensityProblem::from_dataset(&ds, true).unwrap();
    let opts = ElOptions::default();
    for lambda in [0.0, 0.02, 0.1, 0.3] {
        let sol = fit_propensity_el_problem(&problem, &ScadPenalty::with_lambda(lambda).unwrap(), None, &opts).unwrap();
        assert!(sol.converged, "lambda {lambda} did not converge");
        check_constraints(&problem, &sol);
    }
    let (best, path) = select_lambda_bic(&problem, &[0.01, 0.05, 0.1, 0.2], 3.7, &opts).unwrap();
    assert_eq!(path.len(), 4);
    check_constraints(&problem, &best);
}

#[test]
fn objective_trace_never_decreases() {
    let ds = generate(&DgpConfig { n: 200, p: 15, seed: 9, ..Default::default() }).unwrap();
    let problem = PropensityProblem::from_dataset(&ds, true).unwrap();
    let sol = fit_propensity_el_problem(&problem, &ScadPenalty::with_lambda(0.05).unwrap(), None, &ElOptions::default()).unwrap();
    for w in sol.objective_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inner_weights_are_a_balanced_distribution(
        g in proptest::collection::vec(-3.0f64..3.0, 4..30).prop_filter("mixed signs", |v| v.iter().any(|x| *x > 0.1) && v.iter().any(|x| *x < -0.1))
    ) {
        let n = g.len();
        let sol = solve_inner_weights(&DMatrix::from_column_slice(n, 1, &g)).unwrap();
        let total: f64 = sol.weights.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-10);
        prop_assert!(sol.weights.iter().all(|w| *w > 0.0));
        let moment: f64 = sol.weights.iter().zip(&g).map(|(w, x)| w * x).sum();
        prop_assert!(moment.abs() < 1e-8);
        // Uniform weights are feasible only when the mean is zero, so the
        // EL objective can never exceed the uniform one.
        let ll: f64 = sol.weights.iter().map(|w| (n as f64 * w).ln()).sum();
        prop_assert!(ll <= 1e-12);
    }
}

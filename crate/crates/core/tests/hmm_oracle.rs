//! Forward–backward, Viterbi and Baum–Welch checked against exhaustive path
//! enumeration and a recovery study.

mod common;

use common::{enumerate, random_model, simulate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stdr_core::hmm::{baum_welch, forward_backward, quantile_init, viterbi, BaumWelchOptions, HmmModel};

#[test]
fn forward_backward_and_viterbi_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (k, h) in [(2usize, 8usize), (3, 6), (4, 5), (3, 8), (10, 4)] {
        assert!(k.pow(h as u32) <= 10_000);
        for _ in 0..5 {
            let model = random_model(&mut rng, k);
            let obs: Vec<f64> = (0..h).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let oracle = enumerate(&model, &obs);
            let post = forward_backward(&model, &obs).unwrap();
            assert!((post.loglik - oracle.loglik).abs() < 1e-10, "loglik {} vs {}", post.loglik, oracle.loglik);
            for t in 0..h {
                for s in 0..k {
                    assert!((post.smoothed[(t, s)] - oracle.marginals[t][s]).abs() < 1e-10);
                }
            }
            assert_eq!(viterbi(&model, &obs).unwrap(), oracle.best_path);
        }
    }
}

#[test]
fn filtered_last_row_equals_smoothed_last_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = random_model(&mut rng, 3);
    let obs: Vec<f64> = (0..7).map(|_| rng.sample(StandardNormal)).collect();
    let post = forward_backward(&model, &obs).unwrap();
    for s in 0..3 {
        assert!((post.filtered[(6, s)] - post.smoothed[(6, s)]).abs() < 1e-12);
    }
}

#[test]
fn baum_welch_loglik_is_monotone() {
    let truth = HmmModel::new(
        vec![0.3, 0.3, 0.4],
        vec![vec![0.8, 0.1, 0.1], vec![0.1, 0.8, 0.1], vec![0.1, 0.1, 0.8]],
        vec![-1.0, 0.5, 2.0],
        vec![0.7, 0.7, 0.7],
    )
    .unwrap();
    let obs = simulate(&truth, 80, 10, 3);
    let init = quantile_init(&obs, 3, 0.6).unwrap();
    let fit = baum_welch(&init, &obs, &BaumWelchOptions { max_iter: 150, tol: 0.0, ..Default::default() }).unwrap();
    assert_eq!(fit.reinitialized, 0);
    assert!(fit.loglik_trace.len() > 10);
    for w in fit.loglik_trace.windows(2) {
        assert!(w[1] - w[0] >= -1e-9, "loglik fell from {} to {}", w[0], w[1]);
    }
}

#[test]
fn baum_welch_recovers_two_state_transitions() {
    let truth = HmmModel::new(vec![0.5, 0.5], vec![vec![0.85, 0.15], vec![0.25, 0.75]], vec![0.0, 2.5], vec![1.0, 1.0]).unwrap();
    let obs = simulate(&truth, 300, 20, 17);
    let init = quantile_init(&obs, 2, 0.8).unwrap();
    let fit = baum_welch(&init, &obs, &BaumWelchOptions::default()).unwrap();
    assert!(fit.converged);
    for i in 0..2 {
        for j in 0..2 {
            let err = (fit.model.trans[i][j] - truth.trans[i][j]).abs();
            assert!(err < 0.1, "A[{i}][{j}] = {} vs {}", fit.model.trans[i][j], truth.trans[i][j]);
        }
        assert!((fit.model.emit_mean[i] - truth.emit_mean[i]).abs() < 0.2);
    }
}

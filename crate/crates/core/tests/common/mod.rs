//! Brute-force oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stdr_core::hmm::{sample_paths, HmmModel};

pub fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

pub fn random_model(rng: &mut ChaCha8Rng, k: usize) -> HmmModel {
    HmmModel::new(
        random_simplex(rng, k),
        (0..k).map(|_| random_simplex(rng, k)).collect(),
        (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        (0..k).map(|_| rng.gen_range(0.5..1.5)).collect(),
    )
    .unwrap()
}

pub fn normal_pdf(y: f64, m: f64, s: f64) -> f64 {
    (-0.5 * ((y - m) / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
}

pub struct Enumeration {
    pub loglik: f64,
    pub marginals: Vec<Vec<f64>>,
    pub best_path: Vec<usize>,
}

/// Visits all K^h paths, accumulating joint probabilities directly.
pub fn enumerate(model: &HmmModel, obs: &[f64]) -> Enumeration {
    let k = model.k();
    let h = obs.len();
    let total = k.pow(h as u32);
    let mut z = 0.0;
    let mut marg = vec![vec![0.0; k]; h];
    let mut best = (f64::NEG_INFINITY, vec![]);
    for code in 0..total {
        let mut path = Vec::with_capacity(h);
        let mut c = code;
        for _ in 0..h {
            path.push(c % k);
            c /= k;
        }
        path.reverse();
        let mut p = model.pi0[path[0]] * normal_pdf(obs[0], model.emit_mean[path[0]], model.emit_sd[path[0]]);
        for t in 1..h {
            p *= model.trans[path[t - 1]][path[t]] * normal_pdf(obs[t], model.emit_mean[path[t]], model.emit_sd[path[t]]);
        }
        z += p;
        for t in 0..h {
            marg[t][path[t]] += p;
        }
        // Paths are visited in lexicographic order, so a strict comparison
        // keeps the smallest among ties.
        if p > best.0 {
            best = (p, path.iter().map(|s| s + 1).collect());
        }
    }
    for row in &mut marg {
        row.iter_mut().for_each(|m| *m /= z);
    }
    Enumeration { loglik: z.ln(), marginals: marg, best_path: best.1 }
}

pub fn simulate(model: &HmmModel, n: usize, h: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let paths = sample_paths(model, n, h, &mut rng).unwrap();
    (0..n)
        .map(|i| {
            (0..h)
                .map(|t| {
                    let s = paths[(i, t)] - 1;
                    let e: f64 = rng.sample(StandardNormal);
                    model.emit_mean[s] + model.emit_sd[s] * e
                })
                .collect()
        })
        .collect()
}

/// With a single moment the weights are `1/(n(1 + λg_i))` and λ maximises
/// the concave `Σ log(1 + λg_i)` over the interval keeping every weight
/// positive. A grid over that interval, refined once around the best cell,
/// locates λ without using derivatives.
pub fn grid_weights(g: &[f64]) -> Vec<f64> {
    let n = g.len() as f64;
    let gmax = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let gmin = g.iter().cloned().fold(f64::INFINITY, f64::min);
    // 1 + λg_i > 1/n keeps every weight below 1.
    let lo = (1.0 / n - 1.0) / gmax;
    let hi = (1.0 / n - 1.0) / gmin;
    let obj = |l: f64| g.iter().map(|gi| (1.0 + l * gi).ln()).sum::<f64>();
    let search = |lo: f64, hi: f64| {
        let pts = 100_000;
        let step = (hi - lo) / pts as f64;
        let mut best = (f64::NEG_INFINITY, lo);
        for k in 1..pts {
            let l = lo + step * k as f64;
            let v = obj(l);
            if v > best.0 {
                best = (v, l);
            }
        }
        (best.1, step)
    };
    let (l1, step) = search(lo, hi);
    let (l2, _) = search(l1 - step, l1 + step);
    g.iter().map(|gi| 1.0 / (n * (1.0 + l2 * gi))).collect()
}

/// Least squares with an intercept via the normal equations.
pub fn normal_equations(x: &DMatrix<f64>, y: &[f64]) -> (f64, Vec<f64>) {
    let (n, q) = x.shape();
    let design = DMatrix::from_fn(n, q + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let xtx = design.tr_mul(&design);
    let xty = design.tr_mul(&DVector::from_column_slice(y));
    let sol = xtx.cholesky().expect("full rank design").solve(&xty);
    (sol[0], sol.iter().skip(1).copied().collect())
}


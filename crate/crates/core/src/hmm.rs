//! Discrete-state hidden Markov model with Gaussian emissions.
//!
//! States are 1-based in everything returned to callers (sampled paths,
//! Viterbi paths); matrices of per-state quantities are indexed 0-based.
//! Forward and backward recursions use per-step scaling, and the
//! log-likelihood is the sum of log scale factors.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

const SUM_TOL: f64 = 1e-12;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmModel {
    pub pi0: Vec<f64>,
    /// Row-stochastic K×K transition matrix, stored row-major.
    pub trans: Vec<Vec<f64>>,
    pub emit_mean: Vec<f64>,
    pub emit_sd: Vec<f64>,
}

impl HmmModel {
    pub fn new(pi0: Vec<f64>, trans: Vec<Vec<f64>>, emit_mean: Vec<f64>, emit_sd: Vec<f64>) -> Result<Self> {
        let m = Self { pi0, trans, emit_mean, emit_sd };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.pi0.len();
        if k == 0 {
            return invalid("HMM needs at least one state");
        }
        if self.trans.len() != k || self.emit_mean.len() != k || self.emit_sd.len() != k {
            return invalid("HMM parameter dimensions disagree");
        }
        check_simplex(&self.pi0, "pi0")?;
        for (i, row) in self.trans.iter().enumerate() {
            if row.len() != k {
                return invalid(format!("transition row {i} has length {}", row.len()));
            }
            check_simplex(row, &format!("transition row {i}"))?;
        }
        if self.emit_sd.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return invalid("emission sds must be positive and finite");
        }
        if self.emit_mean.iter().any(|m| !m.is_finite()) {
            return invalid("emission means must be finite");
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.pi0.len()
    }

    pub fn trans_matrix(&self) -> DMatrix<f64> {
        let k = self.k();
        DMatrix::from_fn(k, k, |i, j| self.trans[i][j])
    }

    fn log_emission(&self, state: usize, y: f64) -> f64 {
        let z = (y - self.emit_mean[state]) / self.emit_sd[state];
        -0.5 * z * z - self.emit_sd[state].ln() - LN_SQRT_2PI
    }

    fn emission(&self, state: usize, y: f64) -> f64 {
        self.log_emission(state, y).exp()
    }

    /// State distribution after `steps` transitions from `pi0`.
    pub fn marginal(&self, steps: usize) -> Vec<f64> {
        let mut dist = self.pi0.clone();
        for _ in 0..steps {
            dist = propagate(&dist, &self.trans);
        }
        dist
    }

    /// Permutes states so emission means are ascending.
    pub fn relabel_by_mean(&self) -> HmmModel {
        let mut order: Vec<usize> = (0..self.k()).collect();
        order.sort_by(|&a, &b| self.emit_mean[a].total_cmp(&self.emit_mean[b]));
        HmmModel {
            pi0: order.iter().map(|&i| self.pi0[i]).collect(),
            trans: order
                .iter()
                .map(|&i| order.iter().map(|&j| self.trans[i][j]).collect())
                .collect(),
            emit_mean: order.iter().map(|&i| self.emit_mean[i]).collect(),
            emit_sd: order.iter().map(|&i| self.emit_sd[i]).collect(),
        }
    }
}

fn check_simplex(v: &[f64], name: &str) -> Result<()> {
    if v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return invalid(format!("{name} has negative or non-finite entries"));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return invalid(format!("{name} sums to {s}, not 1"));
    }
    Ok(())
}

fn propagate(dist: &[f64], trans: &[Vec<f64>]) -> Vec<f64> {
    let k = dist.len();
    let mut out = vec![0.0; k];
    for (i, &d) in dist.iter().enumerate() {
        for j in 0..k {
            out[j] += d * trans[i][j];
        }
    }
    out
}

/// Samples `n` independent state paths (1-based labels), one per row.
pub fn sample_paths<R: Rng + ?Sized>(model: &HmmModel, n: usize, horizon: usize, rng: &mut R) -> Result<DMatrix<usize>> {
    model.validate()?;
    let init = WeightedIndex::new(&model.pi0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let rows = model
        .trans
        .iter()
        .map(|r| WeightedIndex::new(r).map_err(|e| Error::InvalidArgument(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let mut out = DMatrix::from_element(n, horizon, 0usize);
    for i in 0..n {
        let mut z = 0;
        for t in 0..horizon {
            z = if t == 0 { init.sample(rng) } else { rows[z].sample(rng) };
            out[(i, t)] = z + 1;
        }
    }
    Ok(out)
}

/// Output of [`forward_backward`]. Rows are time points, columns states.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    /// `P(Z_t = k | y_1..y_T)`.
    pub smoothed: DMatrix<f64>,
    /// `P(Z_t = k | y_1..y_t)`.
    pub filtered: DMatrix<f64>,
    pub loglik: f64,
}

impl Posterior {
    /// One-step predictive distributions `P(Z_t = k | y_1..y_{t−1})`; the
    /// first row is `pi0`.
    pub fn predictive(&self, model: &HmmModel) -> DMatrix<f64> {
        let (h, k) = self.filtered.shape();
        let mut out = DMatrix::zeros(h, k);
        for t in 0..h {
            let row = if t == 0 {
                model.pi0.clone()
            } else {
                let prev: Vec<f64> = self.filtered.row(t - 1).iter().copied().collect();
                propagate(&prev, &model.trans)
            };
            for j in 0..k {
                out[(t, j)] = row[j];
            }
        }
        out
    }
}

struct Passes {
    alpha: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
    scale: Vec<f64>,
    emis: Vec<Vec<f64>>,
}

fn scaled_passes(model: &HmmModel, obs: &[f64]) -> Result<Passes> {
    let k = model.k();
    let h = obs.len();
    if h == 0 {
        return invalid("empty observation sequence");
    }
    if obs.iter().any(|y| !y.is_finite()) {
        return invalid("observations must be finite");
    }
    let emis: Vec<Vec<f64>> = obs
        .iter()
        .map(|&y| (0..k).map(|s| model.emission(s, y)).collect())
        .collect();
    let mut alpha = vec![vec![0.0; k]; h];
    let mut scale = vec![0.0; h];
    for t in 0..h {
        for j in 0..k {
            let prior = if t == 0 {
                model.pi0[j]
            } else {
                (0..k).map(|i| alpha[t - 1][i] * model.trans[i][j]).sum()
            };
            alpha[t][j] = prior * emis[t][j];
        }
        let c: f64 = alpha[t].iter().sum();
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::Degenerate(format!("zero likelihood at time {}", t + 1)));
        }
        alpha[t].iter_mut().for_each(|a| *a /= c);
        scale[t] = c;
    }
    let mut beta = vec![vec![1.0; k]; h];
    for t in (0..h.saturating_sub(1)).rev() {
        for i in 0..k {
            beta[t][i] = (0..k)
                .map(|j| model.trans[i][j] * emis[t + 1][j] * beta[t + 1][j])
                .sum::<f64>()
                / scale[t + 1];
        }
    }
    Ok(Passes { alpha, beta, scale, emis })
}

/// Smoothed and filtered state marginals plus the sequence log-likelihood.
pub fn forward_backward(model: &HmmModel, obs: &[f64]) -> Result<Posterior> {
    let p = scaled_passes(model, obs)?;
    Ok(posterior_from(&p, model.k()))
}

fn posterior_from(p: &Passes, k: usize) -> Posterior {
    let h = p.alpha.len();
    let mut smoothed = DMatrix::zeros(h, k);
    let mut filtered = DMatrix::zeros(h, k);
    for t in 0..h {
        let raw: Vec<f64> = (0..k).map(|i| p.alpha[t][i] * p.beta[t][i]).collect();
        let s: f64 = raw.iter().sum();
        for i in 0..k {
            smoothed[(t, i)] = raw[i] / s;
            filtered[(t, i)] = p.alpha[t][i];
        }
    }
    Posterior { smoothed, filtered, loglik: p.scale.iter().map(|c| c.ln()).sum() }
}

/// Most probable state path (1-based).
///
/// Among several optimal paths the lexicographically smallest is returned:
/// a backward max-product pass gives the best continuation score from every
/// (time, state), and the path is then built forward choosing the lowest
/// state index that attains the optimum.
pub fn viterbi(model: &HmmModel, obs: &[f64]) -> Result<Vec<usize>> {
    model.validate()?;
    let k = model.k();
    let h = obs.len();
    if h == 0 {
        return invalid("empty observation sequence");
    }
    if obs.iter().any(|y| !y.is_finite()) {
        return invalid("observations must be finite");
    }
    let ln = |x: f64| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY };
    let log_a: Vec<Vec<f64>> = model.trans.iter().map(|r| r.iter().map(|&x| ln(x)).collect()).collect();
    let log_b: Vec<Vec<f64>> = obs
        .iter()
        .map(|&y| (0..k).map(|s| model.log_emission(s, y)).collect())
        .collect();
    // best[t][i]: best log score of y_{t+1..} given Z_t = i.
    let mut best = vec![vec![0.0; k]; h];
    for t in (0..h - 1).rev() {
        for i in 0..k {
            best[t][i] = (0..k)
                .map(|j| log_a[i][j] + log_b[t + 1][j] + best[t + 1][j])
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let pick = |scores: Vec<f64>| -> Result<usize> {
        let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if top == f64::NEG_INFINITY {
            return Err(Error::Degenerate("every path has zero probability".into()));
        }
        let tol = 1e-12 * top.abs().max(1.0);
        Ok(scores.iter().position(|&s| s >= top - tol).unwrap_or(0))
    };
    let mut path = Vec::with_capacity(h);
    let mut z = pick((0..k).map(|i| ln(model.pi0[i]) + log_b[0][i] + best[0][i]).collect())?;
    path.push(z + 1);
    for t in 1..h {
        z = pick((0..k).map(|j| log_a[z][j] + log_b[t][j] + best[t][j]).collect())?;
        path.push(z + 1);
    }
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaumWelchOptions {
    pub max_iter: usize,
    /// Stop once the log-likelihood improves by less than this (absolute).
    pub tol: f64,
    /// Emission sds are floored at this fraction of the pooled sd.
    pub sd_floor_frac: f64,
}

impl Default for BaumWelchOptions {
    fn default() -> Self {
        Self { max_iter: 200, tol: 1e-8, sd_floor_frac: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaumWelchFit {
    /// Fitted model, states relabelled by ascending emission mean.
    pub model: HmmModel,
    /// Log-likelihood of each successive parameter iterate; the last entry
    /// belongs to `model`.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// How many times a state with no posterior mass was re-seeded.
    pub reinitialized: usize,
}

struct Accum {
    loglik: f64,
    first: Vec<f64>,
    trans: Vec<Vec<f64>>,
    occ: Vec<f64>,
    sum_y: Vec<f64>,
    sum_y2: Vec<f64>,
}

fn e_step(model: &HmmModel, obs_set: &[Vec<f64>]) -> Result<Accum> {
    let k = model.k();
    let mut acc = Accum {
        loglik: 0.0,
        first: vec![0.0; k],
        trans: vec![vec![0.0; k]; k],
        occ: vec![0.0; k],
        sum_y: vec![0.0; k],
        sum_y2: vec![0.0; k],
    };
    for obs in obs_set {
        let p = scaled_passes(model, obs)?;
        let post = posterior_from(&p, k);
        acc.loglik += post.loglik;
        for i in 0..k {
            acc.first[i] += post.smoothed[(0, i)];
        }
        for (t, &y) in obs.iter().enumerate() {
            for i in 0..k {
                let g = post.smoothed[(t, i)];
                acc.occ[i] += g;
                acc.sum_y[i] += g * y;
                acc.sum_y2[i] += g * y * y;
            }
        }
        for t in 0..obs.len() - 1 {
            let mut xi = vec![vec![0.0; k]; k];
            let mut total = 0.0;
            for i in 0..k {
                for j in 0..k {
                    let v = p.alpha[t][i] * model.trans[i][j] * p.emis[t + 1][j] * p.beta[t + 1][j];
                    xi[i][j] = v;
                    total += v;
                }
            }
            for i in 0..k {
                for j in 0..k {
                    acc.trans[i][j] += xi[i][j] / total;
                }
            }
        }
    }
    Ok(acc)
}

/// Baum–Welch EM over a collection of sequences.
///
/// A state whose total posterior occupancy drops below `1e-8` is re-seeded:
/// its mean moves to `pooled_mean + pooled_sd·(2k/(K−1) − 1)` (spreading
/// starved states across ±1 pooled sd), its sd to the pooled sd and its
/// transition row to uniform. Re-seeding is the only step that can lower the
/// log-likelihood.
pub fn baum_welch(init: &HmmModel, obs_set: &[Vec<f64>], opts: &BaumWelchOptions) -> Result<BaumWelchFit> {
    init.validate()?;
    if obs_set.is_empty() || obs_set.iter().any(|s| s.is_empty()) {
        return invalid("Baum-Welch needs at least one non-empty sequence");
    }
    let k = init.k();
    let all: Vec<f64> = obs_set.iter().flatten().copied().collect();
    let pooled_mean = all.iter().sum::<f64>() / all.len() as f64;
    let pooled_sd = (all.iter().map(|y| (y - pooled_mean).powi(2)).sum::<f64>() / all.len() as f64)
        .sqrt()
        .max(1e-12);
    let sd_floor = opts.sd_floor_frac * pooled_sd;

    let mut model = init.clone();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut reinitialized = 0;
    let mut iterations = 0;
    loop {
        let acc = e_step(&model, obs_set)?;
        if let Some(&prev) = trace.last() {
            if acc.loglik - prev < opts.tol {
                trace.push(acc.loglik);
                converged = true;
                break;
            }
        }
        trace.push(acc.loglik);
        if iterations == opts.max_iter {
            break;
        }
        iterations += 1;

        let seqs = obs_set.len() as f64;
        let mut next = model.clone();
        next.pi0 = acc.first.iter().map(|f| f / seqs).collect();
        for i in 0..k {
            let row_total: f64 = acc.trans[i].iter().sum();
            if acc.occ[i] < 1e-8 {
                reinitialized += 1;
                let spread = if k > 1 { 2.0 * i as f64 / (k - 1) as f64 - 1.0 } else { 0.0 };
                next.emit_mean[i] = pooled_mean + pooled_sd * spread;
                next.emit_sd[i] = pooled_sd;
                next.trans[i] = vec![1.0 / k as f64; k];
                continue;
            }
            if row_total > 0.0 {
                next.trans[i] = acc.trans[i].iter().map(|x| x / row_total).collect();
            }
            let mean = acc.sum_y[i] / acc.occ[i];
            let var = (acc.sum_y2[i] / acc.occ[i] - mean * mean).max(0.0);
            next.emit_mean[i] = mean;
            next.emit_sd[i] = var.sqrt().max(sd_floor);
        }
        normalize(&mut next.pi0);
        next.trans.iter_mut().for_each(|r| normalize(r));
        model = next;
    }
    let model = model.relabel_by_mean();
    Ok(BaumWelchFit { model, loglik_trace: trace, iterations, converged, reinitialized })
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
}

/// Starting point for Baum–Welch: emission means at evenly spaced quantiles
/// of the pooled observations, sticky transitions, uniform `pi0`.
pub fn quantile_init(obs_set: &[Vec<f64>], k: usize, stay: f64) -> Result<HmmModel> {
    if k == 0 {
        return invalid("need at least one state");
    }
    let mut all: Vec<f64> = obs_set.iter().flatten().copied().collect();
    if all.is_empty() {
        return invalid("no observations");
    }
    all.sort_by(f64::total_cmp);
    let n = all.len();
    let mean = all.iter().sum::<f64>() / n as f64;
    let sd = (all.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-6);
    let means = (0..k)
        .map(|i| all[(((i as f64 + 0.5) / k as f64) * n as f64).floor().min((n - 1) as f64) as usize])
        .collect();
    let off = if k > 1 { (1.0 - stay) / (k - 1) as f64 } else { 0.0 };
    let trans = (0..k)
        .map(|i| (0..k).map(|j| if i == j { if k > 1 { stay } else { 1.0 } } else { off }).collect())
        .collect();
    HmmModel::new(vec![1.0 / k as f64; k], trans, means, vec![sd / k as f64 * 1.5; k])
}

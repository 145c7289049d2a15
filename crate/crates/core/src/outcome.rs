//! Per-arm SCAD-penalized outcome regressions with latent state features.
//!
//! Feature rows are `[x_1..x_p | state block (K) | t]`. The state block is a
//! one-hot encoding of a hard state or a row of posterior probabilities; `t`
//! is the 1-based time index. Only the covariate block is penalized.
//!
//! Fitting minimises `½·mean(residual²) + Σ_k P_SCAD(β_k; λ₂)`. The
//! intercept, state and time coefficients are unpenalized, so they are
//! profiled out by projection: penalized columns and the response are
//! residualised on the unpenalized block (via its pseudo-inverse, which
//! tolerates the one-hot block summing to the intercept), coordinate descent
//! runs on the residualised problem, and the unpenalized coefficients are
//! recovered by least squares at the end.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datamodel::{one_hot_state, Dataset};
use crate::error::{invalid, Error, Result};
use crate::propensity::{scad_univariate_min, scad_value, ScadPenalty};

/// Latent information available to the feature builder.
#[derive(Debug, Clone, Copy)]
pub enum Latent<'a> {
    /// Covariates and time only.
    None,
    /// 1-based states, n×horizon.
    Hard { states: &'a DMatrix<usize>, k: usize },
    /// One horizon×K probability matrix per individual.
    Soft(&'a [DMatrix<f64>]),
}

impl Latent<'_> {
    pub fn k(&self) -> usize {
        match self {
            Latent::None => 0,
            Latent::Hard { k, .. } => *k,
            Latent::Soft(rows) => rows.first().map_or(0, |m| m.ncols()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StateMode {
    None,
    Hard,
    Soft,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FeatureSpec {
    pub p: usize,
    pub k: usize,
    pub mode: StateMode,
}

impl FeatureSpec {
    pub fn q(&self) -> usize {
        self.p + self.k + 1
    }

    pub fn penalized(&self) -> Vec<bool> {
        (0..self.q()).map(|j| j < self.p).collect()
    }
}

fn spec_for(p: usize, latent: &Latent) -> FeatureSpec {
    let mode = match latent {
        Latent::None => StateMode::None,
        Latent::Hard { .. } => StateMode::Hard,
        Latent::Soft(_) => StateMode::Soft,
    };
    FeatureSpec { p, k: latent.k(), mode }
}

fn state_block(latent: &Latent, i: usize, t: usize) -> Result<Vec<f64>> {
    match latent {
        Latent::None => Ok(Vec::new()),
        Latent::Hard { states, k } => {
            if i >= states.nrows() || t >= states.ncols() {
                return invalid(format!("no latent state for individual {i} at time {}", t + 1));
            }
            one_hot_state(states[(i, t)], *k)
        }
        Latent::Soft(post) => {
            let m = post
                .get(i)
                .ok_or_else(|| Error::InvalidArgument(format!("no posterior for individual {i}")))?;
            if t >= m.nrows() {
                return invalid(format!("posterior for individual {i} has no time {}", t + 1));
            }
            Ok(m.row(t).iter().copied().collect())
        }
    }
}

/// n×q feature matrix `[X | state features at time t | t]`; `t` is 1-based.
pub fn build_features(covariates: &DMatrix<f64>, latent: &Latent, t: usize) -> Result<DMatrix<f64>> {
    if t == 0 {
        return invalid("time index is 1-based");
    }
    let (n, p) = covariates.shape();
    let spec = spec_for(p, latent);
    let mut out = DMatrix::zeros(n, spec.q());
    for i in 0..n {
        for j in 0..p {
            out[(i, j)] = covariates[(i, j)];
        }
        for (j, v) in state_block(latent, i, t - 1)?.into_iter().enumerate() {
            out[(i, p + j)] = v;
        }
        out[(i, spec.q() - 1)] = t as f64;
    }
    Ok(out)
}

/// Rows for every (individual, time) pair, stacked individual-major.
#[derive(Debug, Clone)]
pub struct PooledDesign {
    pub features: DMatrix<f64>,
    pub y: Vec<f64>,
    pub arm: Vec<u8>,
    pub individual: Vec<usize>,
    pub time: Vec<usize>,
    pub spec: FeatureSpec,
}

pub fn pooled_design(ds: &Dataset, latent: &Latent, times: &[usize]) -> Result<PooledDesign> {
    let spec = spec_for(ds.p(), latent);
    let rows = ds.n() * times.len();
    let mut features = DMatrix::zeros(rows, spec.q());
    let mut y = Vec::with_capacity(rows);
    let mut arm = Vec::with_capacity(rows);
    let mut individual = Vec::with_capacity(rows);
    let mut time = Vec::with_capacity(rows);
    let mut r = 0;
    for i in 0..ds.n() {
        for &t in times {
            if t == 0 || t > ds.horizon() {
                return invalid(format!("time {t} outside 1..={}", ds.horizon()));
            }
            for j in 0..ds.p() {
                features[(r, j)] = ds.covariates()[(i, j)];
            }
            for (j, v) in state_block(latent, i, t - 1)?.into_iter().enumerate() {
                features[(r, ds.p() + j)] = v;
            }
            features[(r, spec.q() - 1)] = t as f64;
            y.push(ds.outcomes()[(i, t - 1)]);
            arm.push(ds.treatment()[i]);
            individual.push(i);
            time.push(t);
            r += 1;
        }
    }
    Ok(PooledDesign { features, y, arm, individual, time, spec })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmFit {
    pub intercept: f64,
    /// Length q; penalized entries under the hard threshold are exactly zero.
    pub coef: Vec<f64>,
    pub lambda: f64,
    pub sweeps: usize,
    /// Penalized objective after each coordinate-descent sweep.
    pub objective_trace: Vec<f64>,
    /// Rank of the unpenalized block falls short of its column count.
    pub rank_deficient: bool,
    pub rss: f64,
    pub rows: usize,
}

impl ArmFit {
    pub fn support(&self, p: usize) -> Vec<usize> {
        (0..p).filter(|&j| self.coef[j] != 0.0).collect()
    }

    fn predict_row(&self, row: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(row).map(|(c, x)| c * x).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CdOptions {
    pub max_sweeps: usize,
    pub tol: f64,
    pub zero_threshold: f64,
}

impl Default for CdOptions {
    fn default() -> Self {
        Self { max_sweeps: 10_000, tol: 1e-12, zero_threshold: 1e-8 }
    }
}

fn pinv(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * (m.nrows().max(m.ncols()) as f64);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let p = svd.pseudo_inverse(tol).expect("both SVD factors were requested");
    (p, rank)
}

/// Fits one arm on the rows where `mask` is true.
pub fn fit_arm(
    features: &DMatrix<f64>,
    y: &[f64],
    mask: &[bool],
    penalized: &[bool],
    pen: &ScadPenalty,
    opts: &CdOptions,
    warm: Option<&[f64]>,
) -> Result<ArmFit> {
    let q = features.ncols();
    if y.len() != features.nrows() || mask.len() != features.nrows() || penalized.len() != q {
        return invalid("feature, response, mask and penalty dimensions disagree");
    }
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let n = rows.len();
    if n == 0 {
        return Err(Error::Estimation("arm has no observations".into()));
    }
    let pen_cols: Vec<usize> = (0..q).filter(|&j| penalized[j]).collect();
    let free_cols: Vec<usize> = (0..q).filter(|&j| !penalized[j]).collect();
    let u = DMatrix::from_fn(n, free_cols.len() + 1, |r, c| if c == 0 { 1.0 } else { features[(rows[r], free_cols[c - 1])] });
    let xp = DMatrix::from_fn(n, pen_cols.len(), |r, c| features[(rows[r], pen_cols[c])]);
    let yv = DVector::from_iterator(n, rows.iter().map(|&r| y[r]));
    let (u_pinv, rank) = pinv(&u);
    let resid_on_u = |m: &DMatrix<f64>| -> DMatrix<f64> { m - &u * (&u_pinv * m) };
    let xt = resid_on_u(&xp);
    let yt_mat = resid_on_u(&DMatrix::from_column_slice(n, 1, yv.as_slice()));
    let yt = yt_mat.column(0).clone_owned();

    let m = pen_cols.len();
    let nf = n as f64;
    let gram = xt.tr_mul(&xt) / nf;
    let c = xt.tr_mul(&yt) / nf;
    let yy = yt.dot(&yt) / nf;
    let mut beta = match warm {
        Some(w) if w.len() == q => pen_cols.iter().map(|&j| w[j]).collect::<Vec<_>>(),
        _ => vec![0.0; m],
    };
    let mut gb: Vec<f64> = (0..m).map(|j| (0..m).map(|k| gram[(j, k)] * beta[k]).sum()).collect();
    let objective = |beta: &[f64], gb: &[f64]| -> f64 {
        let quad: f64 = beta.iter().zip(gb).map(|(b, g)| b * g).sum();
        let lin: f64 = beta.iter().zip(c.iter()).map(|(b, c)| b * c).sum();
        0.5 * (yy - 2.0 * lin + quad) + beta.iter().map(|b| scad_value(*b, pen)).sum::<f64>()
    };
    let mut trace = vec![objective(&beta, &gb)];
    let mut sweeps = 0;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..m {
            let gjj = gram[(j, j)];
            if gjj <= 1e-12 {
                if beta[j] != 0.0 {
                    let d = -beta[j];
                    for k in 0..m {
                        gb[k] += gram[(k, j)] * d;
                    }
                    beta[j] = 0.0;
                }
                continue;
            }
            let u_j = (c[j] - (gb[j] - gjj * beta[j])) / gjj;
            let b = scad_univariate_min(u_j, gjj, pen);
            let d = b - beta[j];
            if d != 0.0 {
                for k in 0..m {
                    gb[k] += gram[(k, j)] * d;
                }
                beta[j] = b;
                max_change = max_change.max(d.abs());
            }
        }
        trace.push(objective(&beta, &gb));
        if max_change <= opts.tol {
            break;
        }
    }
    for b in beta.iter_mut() {
        if b.abs() < opts.zero_threshold {
            *b = 0.0;
        }
    }
    let active = beta.iter().filter(|b| **b != 0.0).count();
    if n <= active + rank {
        return Err(Error::Estimation(format!(
            "{n} observations cannot support {} active coefficients",
            active + rank
        )));
    }
    let bvec = DVector::from_vec(beta.clone());
    let partial = &yv - &xp * &bvec;
    let gamma = &u_pinv * &partial;
    let fitted = &u * &gamma + &xp * &bvec;
    let rss = (&yv - fitted).norm_squared();
    let mut coef = vec![0.0; q];
    for (idx, &j) in pen_cols.iter().enumerate() {
        coef[j] = beta[idx];
    }
    for (idx, &j) in free_cols.iter().enumerate() {
        coef[j] = gamma[idx + 1];
    }
    Ok(ArmFit {
        intercept: gamma[0],
        coef,
        lambda: pen.lambda,
        sweeps,
        objective_trace: trace,
        rank_deficient: rank < u.ncols(),
        rss,
        rows: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutcomeFit {
    /// Control arm.
    pub beta0: ArmFit,
    /// Treated arm.
    pub beta1: ArmFit,
    pub feature_spec: FeatureSpec,
}

impl OutcomeFit {
    pub fn arm(&self, arm: u8) -> &ArmFit {
        if arm == 1 {
            &self.beta1
        } else {
            &self.beta0
        }
    }

    /// Latent-state coefficients per arm, aligned with the state block.
    pub fn gamma_hat(&self, arm: u8) -> &[f64] {
        let s = &self.feature_spec;
        &self.arm(arm).coef[s.p..s.p + s.k]
    }

    /// Union of the covariate supports of both arms.
    pub fn covariate_support(&self) -> Vec<usize> {
        let p = self.feature_spec.p;
        (0..p).filter(|&j| self.beta0.coef[j] != 0.0 || self.beta1.coef[j] != 0.0).collect()
    }
}

/// Linear prediction with one arm's coefficients.
pub fn predict(fit: &OutcomeFit, features: &DMatrix<f64>, arm: u8) -> Result<Vec<f64>> {
    if features.ncols() != fit.feature_spec.q() {
        return invalid(format!("expected {} feature columns, got {}", fit.feature_spec.q(), features.ncols()));
    }
    let a = fit.arm(arm);
    Ok((0..features.nrows())
        .map(|i| {
            let row: Vec<f64> = features.row(i).iter().copied().collect();
            a.predict_row(&row)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutcomeBicPoint {
    pub arm: u8,
    pub lambda: f64,
    pub bic: f64,
    pub df: usize,
}

/// Per-arm fit over a λ grid, choosing λ by
/// `m·ln(RSS/N) + ln(m)·df`, where `m` counts distinct individuals in the
/// arm and `N` counts rows. Repeated rows of one individual share their
/// covariates, so the individual is the sampling unit for the penalty and
/// the log-likelihood scale.
pub fn fit_outcome_bic(design: &PooledDesign, grid: &[f64], a: f64, opts: &CdOptions) -> Result<(OutcomeFit, Vec<OutcomeBicPoint>)> {
    if grid.is_empty() {
        return invalid("empty lambda grid");
    }
    let mut lambdas = grid.to_vec();
    lambdas.sort_by(f64::total_cmp);
    let penalized = design.spec.penalized();
    let mut path = Vec::new();
    let mut arms = Vec::with_capacity(2);
    for arm in [0u8, 1] {
        let mask: Vec<bool> = design.arm.iter().map(|&t| t == arm).collect();
        let mut ids: Vec<usize> = design.individual.iter().zip(&mask).filter(|(_, &m)| m).map(|(i, _)| *i).collect();
        ids.dedup();
        let clusters = ids.len().max(1) as f64;
        let mut best: Option<(f64, ArmFit)> = None;
        let mut warm: Option<Vec<f64>> = None;
        let mut last_err = None;
        for &lambda in lambdas.iter().rev() {
            let pen = ScadPenalty::new(lambda, a)?;
            match fit_arm(&design.features, &design.y, &mask, &penalized, &pen, opts, warm.as_deref()) {
                Ok(fit) => {
                    let df = fit.coef.iter().filter(|c| **c != 0.0).count() + 1;
                    let bic = clusters * (fit.rss / fit.rows as f64).max(1e-300).ln() + clusters.ln() * df as f64;
                    path.push(OutcomeBicPoint { arm, lambda, bic, df });
                    warm = Some(fit.coef.clone());
                    if best.as_ref().map_or(true, |(b, _)| bic < *b) {
                        best = Some((bic, fit));
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
        let (_, fit) = best.ok_or_else(|| last_err.unwrap_or_else(|| Error::Estimation("no outcome fit".into())))?;
        arms.push(fit);
    }
    let beta1 = arms.pop().expect("two arms");
    let beta0 = arms.pop().expect("two arms");
    Ok((OutcomeFit { beta0, beta1, feature_spec: design.spec.clone() }, path))
}

/// Per-arm fit at a single λ.
pub fn fit_outcome(design: &PooledDesign, pen: &ScadPenalty, opts: &CdOptions) -> Result<OutcomeFit> {
    let penalized = design.spec.penalized();
    let fit = |arm: u8| {
        let mask: Vec<bool> = design.arm.iter().map(|&t| t == arm).collect();
        fit_arm(&design.features, &design.y, &mask, &penalized, pen, opts, None)
    };
    Ok(OutcomeFit { beta0: fit(0)?, beta1: fit(1)?, feature_spec: design.spec.clone() })
}

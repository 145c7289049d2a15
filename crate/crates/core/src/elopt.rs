//! Penalized empirical likelihood for covariate-balancing propensity scores.
//!
//! For a coefficient vector θ the balancing moments are
//! `g_i(θ) = (T_i − e(x_i; θ))·x̃_i`. The inner problem maximises `Σ log p_i`
//! subject to `Σ p_i = 1` and `Σ p_i g_i = 0`; its solution is
//! `p_i = 1 / (n (1 + λᵀg_i))` where the multiplier λ maximises the concave
//! dual `Σ log(1 + λᵀg_i)`. The dual is solved by Newton's method on the
//! pseudo-logarithm `log*`, which replaces `log z` by its second-order Taylor
//! expansion below `z = 1/n` so the dual is finite everywhere.
//!
//! The outer problem maximises the profile objective
//!
//! ```text
//! ℓ(θ) = Σ log p_i(θ) − n · Σ_j P_SCAD(θ_j; λ₁)
//! ```
//!
//! over θ (the intercept is never penalized). Each outer step builds a
//! Gauss–Newton quadratic model of the profile log-likelihood, minimises
//! that model plus the exact SCAD penalty by coordinate descent, and
//! backtracks on the true objective.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datamodel::Dataset;
use crate::error::{invalid, Error, Result};
use crate::propensity::{
    clip_propensity, design_matrix, fit_logistic_mle, logistic, scad_univariate_min, scad_value, PropensityModel,
    ScadPenalty, EPS_CLIP,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElOptions {
    pub inner_max_iter: usize,
    pub outer_max_iter: usize,
    /// Accepted outer steps may not lower the objective by more than this.
    pub line_search_tol: f64,
    /// Outer loop stops once an accepted step gains less than `outer_tol · n`.
    pub outer_tol: f64,
    /// Penalized coefficients below this magnitude are set to exactly zero.
    pub zero_threshold: f64,
    pub cd_max_sweeps: usize,
    pub intercept: bool,
}

impl Default for ElOptions {
    fn default() -> Self {
        Self {
            inner_max_iter: 100,
            outer_max_iter: 100,
            line_search_tol: 1e-10,
            outer_tol: 1e-10,
            zero_threshold: 1e-8,
            cd_max_sweeps: 1000,
            intercept: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolution {
    pub weights: Vec<f64>,
    pub lagrange: Vec<f64>,
    pub iterations: usize,
    /// `max_j |Σ_i p_i g_ij|` after normalising the weights.
    pub constraint_residual: f64,
}

impl InnerSolution {
    pub fn sum_log_weights(&self) -> f64 {
        self.weights.iter().map(|p| p.ln()).sum()
    }
}

fn log_star(z: f64, eps: f64) -> (f64, f64, f64) {
    if z >= eps {
        (z.ln(), 1.0 / z, -1.0 / (z * z))
    } else {
        let r = z / eps;
        (eps.ln() - 1.5 + 2.0 * r - 0.5 * r * r, 2.0 / eps - z / (eps * eps), -1.0 / (eps * eps))
    }
}

fn weighted_gram(g: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut gw = g.clone();
    for (i, wi) in w.iter().enumerate() {
        let s = wi.sqrt();
        gw.row_mut(i).scale_mut(s);
    }
    gw.tr_mul(&gw)
}

fn solve_spd(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(c) = h.clone().cholesky() {
        return Some(c.solve(rhs));
    }
    let scale = h.diagonal().amax().max(1e-300);
    let mut reg = h.clone();
    for ridge in [1e-12, 1e-10, 1e-8, 1e-6] {
        for j in 0..h.nrows() {
            reg[(j, j)] = h[(j, j)] + ridge * scale;
        }
        if let Some(c) = reg.clone().cholesky() {
            return Some(c.solve(rhs));
        }
    }
    None
}

/// Empirical likelihood weights under `Σ p_i g_i = 0` for the rows of `g`.
pub fn solve_inner_weights(g: &DMatrix<f64>) -> Result<InnerSolution> {
    solve_inner_weights_from(g, None, ElOptions::default().inner_max_iter)
}

/// Same as [`solve_inner_weights`], starting the dual Newton iteration at
/// `warm` when given.
pub fn solve_inner_weights_from(g: &DMatrix<f64>, warm: Option<&[f64]>, max_iter: usize) -> Result<InnerSolution> {
    let (n, d) = g.shape();
    if n == 0 {
        return invalid("no moment rows");
    }
    if g.iter().any(|v| !v.is_finite()) {
        return invalid("moment matrix has non-finite entries");
    }
    let eps = 1.0 / n as f64;
    let gscale = g.amax().max(1e-300);
    let grad_tol = 1e-13 * gscale * n as f64;
    let mut lam = match warm {
        Some(w) if w.len() == d && w.iter().all(|v| v.is_finite()) => DVector::from_column_slice(w),
        _ => DVector::zeros(d),
    };
    let dual = |lam: &DVector<f64>| -> f64 { (g * lam).iter().map(|&v| log_star(1.0 + v, eps).0).sum() };
    let mut value = dual(&lam);
    // A warm start can land in the log-star region; fall back to zero if it
    // is worse than the origin.
    if warm.is_some() && value < 0.0 {
        lam = DVector::zeros(d);
        value = 0.0;
    }
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let z = g * &lam;
        let mut d1 = Vec::with_capacity(n);
        let mut d2 = Vec::with_capacity(n);
        for &v in z.iter() {
            let (_, a, b) = log_star(1.0 + v, eps);
            d1.push(a);
            d2.push(-b);
        }
        let grad = g.tr_mul(&DVector::from_vec(d1));
        if grad.amax() <= grad_tol {
            converged = true;
            break;
        }
        let h = weighted_gram(g, &d2);
        let step = solve_spd(&h, &grad).ok_or_else(|| Error::Degenerate("singular dual Hessian".into()))?;
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand = &lam + &step * t;
            let v = dual(&cand);
            if v >= value {
                let gain = v - value;
                lam = cand;
                value = v;
                moved = true;
                if gain <= 1e-15 * value.abs().max(1.0) && step.amax() * t <= 1e-14 * (1.0 + lam.amax()) {
                    converged = true;
                }
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        if !moved || converged {
            converged = true;
            break;
        }
        if lam.amax() > 1e12 {
            break;
        }
    }
    let z = g * &lam;
    let lam_norm = lam.norm();
    let infeasible = |reason: &str| Error::Infeasible {
        reason: reason.to_string(),
        direction: if lam_norm > 0.0 { (&lam / lam_norm).iter().copied().collect() } else { vec![0.0; d] },
    };
    if z.iter().any(|&v| 1.0 + v < eps) {
        return Err(infeasible("dual optimum outside the log domain; zero is not inside the moment hull"));
    }
    let mut weights: Vec<f64> = z.iter().map(|&v| 1.0 / (n as f64 * (1.0 + v))).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let residual = moment_residual(g, &weights);
    if residual > 1e-8 * gscale.max(1.0) {
        let why = if converged { "moment residual stays above tolerance" } else { "dual Newton did not converge" };
        return Err(infeasible(why));
    }
    Ok(InnerSolution { weights, lagrange: lam.iter().copied().collect(), iterations, constraint_residual: residual })
}

fn moment_residual(g: &DMatrix<f64>, w: &[f64]) -> f64 {
    g.tr_mul(&DVector::from_column_slice(w)).amax()
}

/// Design matrix, treatment vector and which columns carry the penalty.
#[derive(Debug, Clone)]
pub struct PropensityProblem {
    pub design: DMatrix<f64>,
    pub treatment: Vec<f64>,
    pub penalized: Vec<bool>,
    pub intercept: bool,
}

impl PropensityProblem {
    pub fn new(covariates: &DMatrix<f64>, treatment: &[u8], intercept: bool) -> Result<Self> {
        if covariates.nrows() != treatment.len() {
            return invalid("covariate rows and treatment length differ");
        }
        let n1 = treatment.iter().filter(|&&t| t == 1).count();
        if n1 == 0 || n1 == treatment.len() {
            return invalid("both treatment arms must be present");
        }
        let design = design_matrix(covariates, intercept);
        let mut penalized = vec![true; design.ncols()];
        if intercept {
            penalized[0] = false;
        }
        Ok(Self { design, treatment: treatment.iter().map(|&t| f64::from(t)).collect(), penalized, intercept })
    }

    pub fn from_dataset(ds: &Dataset, intercept: bool) -> Result<Self> {
        Self::new(ds.covariates(), ds.treatment(), intercept)
    }

    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    pub fn dim(&self) -> usize {
        self.design.ncols()
    }

    /// Clipped propensities and the moment matrix at `coef`.
    pub fn moments(&self, coef: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let eta = &self.design * DVector::from_column_slice(coef);
        let e: Vec<f64> = eta.iter().map(|&z| clip_propensity(logistic(z))).collect();
        let mut g = self.design.clone();
        for i in 0..self.n() {
            g.row_mut(i).scale_mut(self.treatment[i] - e[i]);
        }
        (e, g)
    }

    fn penalty(&self, coef: &[f64], pen: &ScadPenalty) -> f64 {
        coef.iter()
            .zip(&self.penalized)
            .filter(|(_, &p)| p)
            .map(|(c, _)| scad_value(*c, pen))
            .sum()
    }
}

/// `Σ log p_i(θ) − n·Σ_j P_SCAD(θ_j; λ₁)` with the weights profiled out.
pub fn profile_objective(model: &PropensityModel, problem: &PropensityProblem, pen: &ScadPenalty) -> Result<f64> {
    if model.coef.len() != problem.dim() || model.intercept != problem.intercept {
        return invalid("model does not match the problem design");
    }
    let (_, g) = problem.moments(&model.coef);
    let inner = solve_inner_weights(&g)?;
    Ok(inner.sum_log_weights() - problem.n() as f64 * problem.penalty(&model.coef, pen))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ElSolution {
    pub weights: Vec<f64>,
    pub lagrange: Vec<f64>,
    pub model: PropensityModel,
    pub lambda1: f64,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub constraint_residual: f64,
    /// Objective after each accepted outer step, starting with the initial point.
    pub objective_trace: Vec<f64>,
}

impl ElSolution {
    /// Nonzero penalized coefficients, as covariate indices (intercept excluded).
    pub fn support(&self) -> Vec<usize> {
        self.model
            .slopes()
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != 0.0)
            .map(|(j, _)| j)
            .collect()
    }

    /// Nonzero coefficients including the intercept.
    pub fn df(&self) -> usize {
        self.model.coef.iter().filter(|c| **c != 0.0).count()
    }

    /// `Σ log(n p_i)`, zero when the weights are uniform.
    pub fn log_el_ratio(&self) -> f64 {
        let n = self.weights.len() as f64;
        self.weights.iter().map(|p| (n * p).ln()).sum()
    }
}

struct Eval {
    coef: Vec<f64>,
    e: Vec<f64>,
    g: DMatrix<f64>,
    inner: InnerSolution,
    objective: f64,
}

fn evaluate(problem: &PropensityProblem, coef: Vec<f64>, pen: &ScadPenalty, warm: Option<&[f64]>, opts: &ElOptions) -> Result<Eval> {
    let (e, g) = problem.moments(&coef);
    let inner = solve_inner_weights_from(&g, warm, opts.inner_max_iter)?;
    let objective = inner.sum_log_weights() - problem.n() as f64 * problem.penalty(&coef, pen);
    Ok(Eval { coef, e, g, inner, objective })
}

/// Gradient (per observation) of `Σ log(n p_i)` and its Gauss–Newton
/// curvature `J̄ᵀ S⁻¹ J̄`.
fn quadratic_model(problem: &PropensityProblem, ev: &Eval) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = problem.n();
    let x = &problem.design;
    let lam = DVector::from_column_slice(&ev.inner.lagrange);
    let xl = x * &lam;
    let mut slope = Vec::with_capacity(n);
    for i in 0..n {
        let e = ev.e[i];
        let clipped = e <= EPS_CLIP || e >= 1.0 - EPS_CLIP;
        slope.push(if clipped { 0.0 } else { e * (1.0 - e) });
    }
    let p = &ev.inner.weights;
    let coef_grad: Vec<f64> = (0..n).map(|i| p[i] * slope[i] * xl[i]).collect();
    let grad = x.tr_mul(&DVector::from_vec(coef_grad));
    let jw: Vec<f64> = (0..n).map(|i| p[i] * slope[i]).collect();
    let jbar = weighted_gram(x, &jw);
    let s = weighted_gram(&ev.g, p);
    let sinv_j = match s.clone().cholesky() {
        Some(c) => c.solve(&jbar),
        None => {
            let mut reg = s.clone();
            let scale = s.diagonal().amax().max(1e-300);
            for j in 0..reg.nrows() {
                reg[(j, j)] += 1e-10 * scale;
            }
            reg.cholesky()
                .ok_or_else(|| Error::Degenerate("moment covariance is singular".into()))?
                .solve(&jbar)
        }
    };
    Ok((grad, jbar.tr_mul(&sinv_j)))
}

/// Minimises `−gᵀδ + ½δᵀMδ + Σ P(θ_j + δ_j)` over `θ + δ` by cyclic
/// coordinate descent with exact one-dimensional SCAD minimisation.
fn penalized_quadratic_step(
    theta: &[f64],
    grad: &DVector<f64>,
    m: &DMatrix<f64>,
    penalized: &[bool],
    pen: &ScadPenalty,
    max_sweeps: usize,
) -> Vec<f64> {
    let d = theta.len();
    let mut new = theta.to_vec();
    let mut md = vec![0.0; d];
    for _ in 0..max_sweeps {
        let mut max_change: f64 = 0.0;
        for j in 0..d {
            let mjj = m[(j, j)];
            if !(mjj > 0.0) {
                continue;
            }
            let delta_j = new[j] - theta[j];
            let rest = md[j] - mjj * delta_j;
            let u = theta[j] + (grad[j] - rest) / mjj;
            let b = if penalized[j] { scad_univariate_min(u, mjj, pen) } else { u };
            let change = b - new[j];
            if change != 0.0 {
                for k in 0..d {
                    md[k] += m[(k, j)] * change;
                }
                new[j] = b;
                max_change = max_change.max(change.abs());
            }
        }
        if max_change <= 1e-12 * (1.0 + new.iter().fold(0.0f64, |a, v| a.max(v.abs()))) {
            break;
        }
    }
    new
}

/// SCAD-penalized empirical likelihood fit of the propensity coefficients.
///
/// Starts from `init`, or from the unpenalized logistic MLE (which balances
/// the moments exactly with uniform weights) when `init` is `None`.
pub fn fit_propensity_el_problem(
    problem: &PropensityProblem,
    pen: &ScadPenalty,
    init: Option<&[f64]>,
    opts: &ElOptions,
) -> Result<ElSolution> {
    let n = problem.n();
    let start: Vec<f64> = match init {
        Some(c) if c.len() == problem.dim() => c.to_vec(),
        Some(_) => return invalid("initial coefficients have the wrong length"),
        None => fit_logistic_mle(&problem.design, &problem.treatment, 100)?.iter().copied().collect(),
    };
    let mut cur = evaluate(problem, start, pen, None, opts)?;
    let mut trace = vec![cur.objective];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.outer_max_iter {
        iterations += 1;
        let (grad, m) = quadratic_model(problem, &cur)?;
        let proposal = penalized_quadratic_step(&cur.coef, &grad, &m, &problem.penalized, pen, opts.cd_max_sweeps);
        let step: Vec<f64> = proposal.iter().zip(&cur.coef).map(|(a, b)| a - b).collect();
        let step_size = step.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if step_size <= 1e-10 {
            converged = true;
            break;
        }
        let mut accepted = None;
        let mut t = 1.0;
        for _ in 0..30 {
            let cand: Vec<f64> = if t == 1.0 {
                proposal.clone()
            } else {
                cur.coef.iter().zip(&step).map(|(c, s)| c + t * s).collect()
            };
            if let Ok(ev) = evaluate(problem, cand, pen, Some(&cur.inner.lagrange), opts) {
                if ev.objective >= cur.objective - opts.line_search_tol {
                    accepted = Some(ev);
                    break;
                }
            }
            t *= 0.5;
        }
        let Some(next) = accepted else {
            converged = true;
            break;
        };
        let gain = next.objective - cur.objective;
        cur = next;
        trace.push(cur.objective);
        if gain.abs() <= opts.outer_tol * n as f64 && step_size * t <= 1e-6 {
            converged = true;
            break;
        }
    }

    let mut coef = cur.coef.clone();
    let mut thresholded = false;
    for (c, &p) in coef.iter_mut().zip(&problem.penalized) {
        if p && *c != 0.0 && c.abs() < opts.zero_threshold {
            *c = 0.0;
            thresholded = true;
        }
    }
    if thresholded {
        cur = evaluate(problem, coef, pen, Some(&cur.inner.lagrange), opts)?;
        trace.push(cur.objective);
    }
    let model = PropensityModel::new(cur.coef.clone(), problem.intercept)?;
    let residual = moment_residual(&cur.g, &cur.inner.weights);
    Ok(ElSolution {
        weights: cur.inner.weights,
        lagrange: cur.inner.lagrange,
        model,
        lambda1: pen.lambda,
        objective: cur.objective,
        converged,
        iterations,
        constraint_residual: residual,
        objective_trace: trace,
    })
}

/// Fits on a (training) dataset using `opts.intercept`.
pub fn fit_propensity_el(ds: &Dataset, pen: &ScadPenalty, opts: &ElOptions) -> Result<ElSolution> {
    let problem = PropensityProblem::from_dataset(ds, opts.intercept)?;
    fit_propensity_el_problem(&problem, pen, None, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BicPoint {
    pub lambda: f64,
    pub bic: f64,
    pub df: usize,
    pub converged: bool,
}

/// Fits every λ in `grid` (warm-starting along the sorted grid) and returns
/// the fit minimising `−2 Σ log(n p_i) + ln(n)·df`.
pub fn select_lambda_bic(
    problem: &PropensityProblem,
    grid: &[f64],
    a: f64,
    opts: &ElOptions,
) -> Result<(ElSolution, Vec<BicPoint>)> {
    if grid.is_empty() {
        return invalid("empty lambda grid");
    }
    let mut lambdas = grid.to_vec();
    lambdas.sort_by(f64::total_cmp);
    let ln_n = (problem.n() as f64).ln();
    let mut best: Option<(f64, ElSolution)> = None;
    let mut path = Vec::new();
    let mut warm: Option<Vec<f64>> = None;
    let mut last_err = None;
    for &lambda in &lambdas {
        let pen = ScadPenalty::new(lambda, a)?;
        match fit_propensity_el_problem(problem, &pen, warm.as_deref(), opts) {
            Ok(sol) => {
                let bic = -2.0 * sol.log_el_ratio() + ln_n * sol.df() as f64;
                path.push(BicPoint { lambda, bic, df: sol.df(), converged: sol.converged });
                warm = Some(sol.model.coef.clone());
                if best.as_ref().map_or(true, |(b, _)| bic < *b) {
                    best = Some((bic, sol));
                }
            }
            Err(e) => {
                path.push(BicPoint { lambda, bic: f64::INFINITY, df: 0, converged: false });
                last_err = Some(e);
            }
        }
    }
    match best {
        Some((_, sol)) => Ok((sol, path)),
        None => Err(last_err.unwrap_or_else(|| Error::Estimation("no lambda produced a fit".into()))),
    }
}

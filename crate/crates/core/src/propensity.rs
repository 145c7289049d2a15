//! SCAD penalty primitives, the logistic propensity score and the covariate
//! balancing moment `g(x, t; θ) = (t − e(x)) x`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Propensities are clamped to `[EPS_CLIP, 1 − EPS_CLIP]` before any division.
pub const EPS_CLIP: f64 = 1e-6;

pub const DEFAULT_SCAD_A: f64 = 3.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScadPenalty {
    pub lambda: f64,
    pub a: f64,
}

impl ScadPenalty {
    pub fn new(lambda: f64, a: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return invalid(format!("SCAD lambda must be finite and >= 0, got {lambda}"));
        }
        if !(a > 2.0) {
            return invalid(format!("SCAD a must exceed 2, got {a}"));
        }
        Ok(Self { lambda, a })
    }

    pub fn with_lambda(lambda: f64) -> Result<Self> {
        Self::new(lambda, DEFAULT_SCAD_A)
    }

    pub fn value(&self, x: f64) -> f64 {
        scad_value(x, self)
    }

    pub fn deriv(&self, x: f64) -> f64 {
        scad_deriv(x, self)
    }
}

/// Derivative of the SCAD penalty as a function of `|x|`.
pub fn scad_deriv(x: f64, pen: &ScadPenalty) -> f64 {
    let (l, a) = (pen.lambda, pen.a);
    let ax = x.abs();
    if ax <= l {
        l
    } else if ax <= a * l {
        (a * l - ax) / (a - 1.0)
    } else {
        0.0
    }
}

/// SCAD penalty value, the integral of [`scad_deriv`] from 0 to `|x|`.
pub fn scad_value(x: f64, pen: &ScadPenalty) -> f64 {
    let (l, a) = (pen.lambda, pen.a);
    let ax = x.abs();
    if ax <= l {
        l * ax
    } else if ax <= a * l {
        (2.0 * a * l * ax - ax * ax - l * l) / (2.0 * (a - 1.0))
    } else {
        (a + 1.0) * l * l / 2.0
    }
}

/// Global minimiser of `½·v·(b − u)² + P_SCAD(b)` over `b`.
///
/// Each branch of the penalty is quadratic in `b`, so the minimum is found by
/// comparing branch stationary points and branch endpoints. This stays exact
/// when `v < 1/(a − 1)` and the middle branch is concave. Ties go to the
/// smaller magnitude, so an exact zero wins when it is optimal.
pub fn scad_univariate_min(u: f64, v: f64, pen: &ScadPenalty) -> f64 {
    debug_assert!(v > 0.0);
    let (l, a) = (pen.lambda, pen.a);
    let s = u.abs();
    if l == 0.0 {
        return u;
    }
    let f = |b: f64| 0.5 * v * (b - s) * (b - s) + scad_value(b, pen);
    let mut cands = vec![0.0, l, a * l];
    cands.push((s - l / v).clamp(0.0, l));
    let curv = v - 1.0 / (a - 1.0);
    if curv > 0.0 {
        let b = (v * s - a * l / (a - 1.0)) / curv;
        cands.push(b.clamp(l, a * l));
    }
    cands.push(s.max(a * l));
    let mut best = 0.0;
    let mut best_f = f(0.0);
    for &b in &cands {
        let fb = f(b);
        if fb < best_f - 1e-15 * best_f.abs().max(1.0) {
            best = b;
            best_f = fb;
        }
    }
    best.copysign(u)
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let ez = z.exp();
        ez / (1.0 + ez)
    }
}

pub fn clip_propensity(e: f64) -> f64 {
    e.clamp(EPS_CLIP, 1.0 - EPS_CLIP)
}

/// Logistic propensity model. With `intercept` set, `coef[0]` is the
/// intercept and `coef[1..]` multiply the covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub coef: Vec<f64>,
    pub intercept: bool,
}

impl PropensityModel {
    pub fn new(coef: Vec<f64>, intercept: bool) -> Result<Self> {
        if coef.iter().any(|c| !c.is_finite()) {
            return invalid("propensity coefficients must be finite");
        }
        if intercept && coef.is_empty() {
            return invalid("intercept model needs at least one coefficient");
        }
        Ok(Self { coef, intercept })
    }

    pub fn zeros(p: usize, intercept: bool) -> Self {
        Self { coef: vec![0.0; p + usize::from(intercept)], intercept }
    }

    /// Number of covariates the model expects.
    pub fn p(&self) -> usize {
        self.coef.len() - usize::from(self.intercept)
    }

    /// Slope coefficients (intercept excluded).
    pub fn slopes(&self) -> &[f64] {
        &self.coef[usize::from(self.intercept)..]
    }

    pub fn linear_index(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.p() {
            return invalid(format!("covariate length {} != model dimension {}", x.len(), self.p()));
        }
        let off = usize::from(self.intercept);
        let mut z = if self.intercept { self.coef[0] } else { 0.0 };
        for (c, xv) in self.coef[off..].iter().zip(x) {
            z += c * xv;
        }
        Ok(z)
    }

    /// The row of the design matrix this model multiplies.
    pub fn design_row(&self, x: &[f64]) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.coef.len());
        if self.intercept {
            row.push(1.0);
        }
        row.extend_from_slice(x);
        row
    }
}

/// Clipped logistic propensity `e(x)`.
pub fn score(model: &PropensityModel, x: &[f64]) -> Result<f64> {
    Ok(clip_propensity(logistic(model.linear_index(x)?)))
}

/// Balancing moment `(t − e(x))·x̃`, where `x̃` is `x` with a leading 1 when
/// the model carries an intercept.
pub fn cbps_moment(model: &PropensityModel, x: &[f64], t: u8) -> Result<Vec<f64>> {
    if t > 1 {
        return invalid(format!("treatment must be 0 or 1, got {t}"));
    }
    let e = score(model, x)?;
    let r = f64::from(t) - e;
    Ok(model.design_row(x).into_iter().map(|v| r * v).collect())
}

/// Design matrix `[1 | X]` (or just `X`).
pub fn design_matrix(x: &DMatrix<f64>, intercept: bool) -> DMatrix<f64> {
    if !intercept {
        return x.clone();
    }
    let (n, p) = x.shape();
    DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] })
}

/// Unpenalised logistic maximum likelihood by damped Newton (IRLS).
///
/// `design` already contains the intercept column if one is wanted. A ridge
/// of `1e-8·n` keeps the Hessian invertible under quasi-separation.
pub fn fit_logistic_mle(design: &DMatrix<f64>, t: &[f64], max_iter: usize) -> Result<DVector<f64>> {
    let (n, d) = design.shape();
    if t.len() != n {
        return invalid("treatment length does not match design rows");
    }
    if n == 0 {
        return invalid("empty design");
    }
    let loglik = |beta: &DVector<f64>| -> f64 {
        let eta = design * beta;
        eta.iter()
            .zip(t)
            .map(|(&z, &y)| y * z - softplus(z))
            .sum::<f64>()
    };
    let ridge = 1e-8 * n as f64;
    let mut beta = DVector::zeros(d);
    let mut ll = loglik(&beta);
    for _ in 0..max_iter {
        let eta = design * &beta;
        let mu: Vec<f64> = eta.iter().map(|&z| logistic(z)).collect();
        let w: Vec<f64> = mu.iter().map(|m| (m * (1.0 - m)).max(1e-12)).collect();
        let resid = DVector::from_iterator(n, mu.iter().zip(t).map(|(m, y)| y - m));
        let grad = design.tr_mul(&resid);
        let wx = DMatrix::from_fn(n, d, |i, j| design[(i, j)] * w[i].sqrt());
        let mut h = wx.tr_mul(&wx);
        for j in 0..d {
            h[(j, j)] += ridge;
        }
        let step = h
            .cholesky()
            .ok_or_else(|| Error::Estimation("logistic Hessian not positive definite".into()))?
            .solve(&grad);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &beta + &step * scale;
            let cll = loglik(&cand);
            if cll >= ll - 1e-12 * ll.abs() {
                let gain = cll - ll;
                beta = cand;
                ll = cll;
                accepted = true;
                if gain.abs() < 1e-10 * (1.0 + ll.abs()) {
                    return Ok(beta);
                }
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(beta)
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

//! Doubly robust ATE estimation with Wald and bootstrap intervals.
//!
//! Two per-unit influence forms are available:
//!
//! * [`DrFormula::Paper`]: `T·Y/e − (1−T)·Y/(1−e) + m₁ − m₀`, plain inverse
//!   weighting plus the regression difference. It is consistent when both
//!   pieces are, but is not doubly robust in general.
//! * [`DrFormula::Aipw`]: `T·(Y−m₁)/e − (1−T)·(Y−m₀)/(1−e) + m₁ − m₀`, the
//!   augmented form, consistent if either the propensity or the outcome
//!   model is right.
//!
//! τ̂ is the (weighted) mean of the influence values. The standard error is
//! the weighted standard deviation of the influence values divided by the
//! square root of the effective sample size `1/Σw²`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::propensity::{design_matrix, fit_logistic_mle, logistic, EPS_CLIP};
use crate::synthdgp::{generate, DgpConfig};
use crate::{datamodel::Dataset, seed};

pub const Z_975: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrFormula {
    Paper,
    Aipw,
}

/// Which nuisance components the caller actually estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Components {
    Both,
    PropensityOnly,
    OutcomeOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DrEstimate {
    pub tau_hat: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Weighted mean of the inverse-weighting terms.
    pub ipw_part: f64,
    /// Weighted mean of `m₁ − m₀`.
    pub reg_part: f64,
    pub mode: Components,
    pub formula: DrFormula,
    pub n: usize,
    #[serde(skip)]
    pub influence: Vec<f64>,
}

impl DrEstimate {
    pub fn covers(&self, tau: f64) -> bool {
        self.ci_low <= tau && tau <= self.ci_high
    }
}

/// Inputs on one evaluation sample, all of equal length.
#[derive(Debug, Clone, Copy)]
pub struct DrInput<'a> {
    pub y: &'a [f64],
    pub t: &'a [u8],
    pub e: &'a [f64],
    pub m0: &'a [f64],
    pub m1: &'a [f64],
}

impl DrInput<'_> {
    fn validate(&self) -> Result<usize> {
        let n = self.y.len();
        if [self.t.len(), self.e.len(), self.m0.len(), self.m1.len()].iter().any(|&l| l != n) {
            return invalid("outcome, treatment, propensity and prediction vectors differ in length");
        }
        if n == 0 {
            return invalid("empty evaluation sample");
        }
        if let Some(e) = self.e.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
            return Err(Error::InvalidArgument(format!("propensity {e} outside (0, 1) after clipping")));
        }
        Ok(n)
    }
}

/// Per-unit inverse-weighting and regression terms.
pub fn influence_terms(input: &DrInput, formula: DrFormula) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = input.validate()?;
    let mut ipw = Vec::with_capacity(n);
    let mut reg = Vec::with_capacity(n);
    for i in 0..n {
        let (y, e, m0, m1) = (input.y[i], input.e[i], input.m0[i], input.m1[i]);
        let (r1, r0) = match formula {
            DrFormula::Paper => (y, y),
            DrFormula::Aipw => (y - m1, y - m0),
        };
        ipw.push(if input.t[i] == 1 { r1 / e } else { -r0 / (1.0 - e) });
        reg.push(m1 - m0);
    }
    Ok((ipw, reg))
}

fn check_weights(w: &[f64], n: usize) -> Result<()> {
    if w.len() != n {
        return invalid(format!("{} weights for {n} units", w.len()));
    }
    if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return invalid("weights must be positive and finite");
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-8 {
        return invalid(format!("weights sum to {s}, not 1"));
    }
    Ok(())
}

/// Weighted standard deviation of `phi` (bias-corrected by `1 − Σw²`)
/// divided by `√n_eff` with `n_eff = 1/Σw²`. With uniform weights this is
/// the sample standard deviation over `√n`. A single unit carrying all the
/// weight leaves the variance unidentified and gives `+∞`.
pub fn standard_error(phi: &[f64], weights: &[f64]) -> Result<f64> {
    if phi.len() < 2 {
        return invalid("standard error needs at least two units");
    }
    check_weights(weights, phi.len())?;
    let mean: f64 = phi.iter().zip(weights).map(|(p, w)| p * w).sum();
    let sum_w2: f64 = weights.iter().map(|w| w * w).sum();
    let ss: f64 = phi.iter().zip(weights).map(|(p, w)| w * (p - mean) * (p - mean)).sum();
    if 1.0 - sum_w2 <= 1e-15 {
        return Ok(if ss == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok((ss / (1.0 - sum_w2) * sum_w2).sqrt())
}

fn assemble(ipw: Vec<f64>, reg: Vec<f64>, w: &[f64], formula: DrFormula, mode: Components) -> Result<DrEstimate> {
    let influence: Vec<f64> = ipw.iter().zip(&reg).map(|(a, b)| a + b).collect();
    let tau_hat: f64 = influence.iter().zip(w).map(|(p, w)| p * w).sum();
    let ipw_part: f64 = ipw.iter().zip(w).map(|(p, w)| p * w).sum();
    let reg_part: f64 = reg.iter().zip(w).map(|(p, w)| p * w).sum();
    let se = standard_error(&influence, w)?;
    Ok(DrEstimate {
        tau_hat,
        se,
        ci_low: tau_hat - Z_975 * se,
        ci_high: tau_hat + Z_975 * se,
        ipw_part,
        reg_part,
        mode,
        formula,
        n: influence.len(),
        influence,
    })
}

/// Equal-weight estimator.
pub fn estimate(input: &DrInput, formula: DrFormula, mode: Components) -> Result<DrEstimate> {
    let (ipw, reg) = influence_terms(input, formula)?;
    let w = vec![1.0 / ipw.len() as f64; ipw.len()];
    assemble(ipw, reg, &w, formula, mode)
}

/// Same estimator with the average replaced by `Σ p̂_i φ_i`.
pub fn estimate_weighted(input: &DrInput, weights: &[f64], formula: DrFormula, mode: Components) -> Result<DrEstimate> {
    let (ipw, reg) = influence_terms(input, formula)?;
    check_weights(weights, ipw.len())?;
    assemble(ipw, reg, weights, formula, mode)
}

/// Bootstrap standard error of the weighted mean of `phi`: units are
/// resampled with replacement and their weights renormalised.
pub fn bootstrap_se(phi: &[f64], weights: &[f64], resamples: usize, seed: u64) -> Result<f64> {
    if phi.len() < 2 || resamples < 2 {
        return invalid("bootstrap needs at least two units and two resamples");
    }
    check_weights(weights, phi.len())?;
    let n = phi.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let (mut num, mut den) = (0.0, 0.0);
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            num += weights[i] * phi[i];
            den += weights[i];
        }
        draws.push(num / den);
    }
    let m = draws.iter().sum::<f64>() / resamples as f64;
    Ok((draws.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / (resamples - 1) as f64).sqrt())
}

/// Replaces the Wald interval with one built from a bootstrap standard error.
pub fn with_bootstrap(mut est: DrEstimate, weights: &[f64], resamples: usize, seed: u64) -> Result<DrEstimate> {
    let se = bootstrap_se(&est.influence, weights, resamples, seed)?;
    est.se = se;
    est.ci_low = est.tau_hat - Z_975 * se;
    est.ci_high = est.tau_hat + Z_975 * se;
    Ok(est)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Misspecified {
    None,
    Propensity,
    Outcome,
    Both,
}

/// Nuisance values evaluated on a dataset from a known DGP at the final time.
#[derive(Debug, Clone)]
pub struct Nuisance {
    pub e: Vec<f64>,
    pub m0: Vec<f64>,
    pub m1: Vec<f64>,
}

/// True propensities and conditional means at `t = horizon`.
pub fn oracle_nuisance(cfg: &DgpConfig, ds: &Dataset) -> Result<Nuisance> {
    let mut out = Nuisance { e: Vec::with_capacity(ds.n()), m0: Vec::new(), m1: Vec::new() };
    for i in 0..ds.n() {
        let x: Vec<f64> = ds.covariates().row(i).iter().copied().collect();
        out.e.push(cfg.true_propensity(&x).clamp(EPS_CLIP, 1.0 - EPS_CLIP));
        out.m0.push(cfg.true_outcome_mean(&x, 0, ds.horizon())?);
        out.m1.push(cfg.true_outcome_mean(&x, 1, ds.horizon())?);
    }
    Ok(out)
}

/// Logistic fit on covariate rows shuffled against treatment, so the fitted
/// propensity carries no information about confounding.
pub fn permuted_propensity(ds: &Dataset, seed: u64) -> Result<Vec<f64>> {
    let n = ds.n();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let shuffled = ds.covariates().select_rows(&perm);
    let design = design_matrix(&shuffled, true);
    let coef = fit_logistic_mle(&design, &ds.treatment_f64(), 100)?;
    Ok((&design * coef).iter().map(|z| logistic(*z).clamp(EPS_CLIP, 1.0 - EPS_CLIP)).collect())
}

/// Arm means of the final outcome, ignoring covariates.
pub fn intercept_only_outcome(ds: &Dataset) -> Result<(f64, f64)> {
    let y = ds.final_outcome();
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for (v, &t) in y.iter().zip(ds.treatment()) {
        sums[t as usize] += v;
        counts[t as usize] += 1;
    }
    if counts.contains(&0) {
        return Err(Error::Estimation("one arm is empty".into()));
    }
    Ok((sums[0] / counts[0] as f64, sums[1] / counts[1] as f64))
}

/// One AIPW estimate on a fresh dataset with the requested components
/// replaced by their misspecified versions.
pub fn stress_estimate(cfg: &DgpConfig, which_wrong: Misspecified, formula: DrFormula) -> Result<DrEstimate> {
    let ds = generate(cfg)?;
    let mut nu = oracle_nuisance(cfg, &ds)?;
    if matches!(which_wrong, Misspecified::Propensity | Misspecified::Both) {
        nu.e = permuted_propensity(&ds, seed::derive(cfg.seed, seed::tag("permute")))?;
    }
    if matches!(which_wrong, Misspecified::Outcome | Misspecified::Both) {
        let (a0, a1) = intercept_only_outcome(&ds)?;
        nu.m0 = vec![a0; ds.n()];
        nu.m1 = vec![a1; ds.n()];
    }
    let y = ds.final_outcome();
    let input = DrInput { y: &y, t: ds.treatment(), e: &nu.e, m0: &nu.m0, m1: &nu.m1 };
    estimate(&input, formula, Components::Both)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasReport {
    pub which_wrong: Misspecified,
    pub replications: usize,
    pub tau_true: f64,
    pub mean_tau_hat: f64,
    pub bias: f64,
    /// Monte Carlo standard error of `bias`.
    pub mc_se: f64,
    pub coverage: f64,
    pub failures: usize,
}

/// Monte Carlo bias of the AIPW estimator over `replications` datasets whose
/// seeds derive from `cfg.seed`.
pub fn double_robustness_check(cfg: &DgpConfig, which_wrong: Misspecified, replications: usize) -> Result<BiasReport> {
    if replications == 0 {
        return invalid("at least one replication is required");
    }
    let mut taus = Vec::with_capacity(replications);
    let mut covered = 0usize;
    let mut failures = 0;
    for r in 0..replications {
        let rep_cfg = DgpConfig { seed: seed::derive(cfg.seed, r as u64), ..cfg.clone() };
        match stress_estimate(&rep_cfg, which_wrong, DrFormula::Aipw) {
            Ok(est) => {
                covered += usize::from(est.covers(cfg.treatment_effect));
                taus.push(est.tau_hat);
            }
            Err(_) => failures += 1,
        }
    }
    if taus.is_empty() {
        return Err(Error::Estimation("every replication failed".into()));
    }
    let m = taus.len() as f64;
    let mean = taus.iter().sum::<f64>() / m;
    let var = taus.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (m - 1.0).max(1.0);
    Ok(BiasReport {
        which_wrong,
        replications: taus.len(),
        tau_true: cfg.treatment_effect,
        mean_tau_hat: mean,
        bias: mean - cfg.treatment_effect,
        mc_se: (var / m).sqrt(),
        coverage: covered as f64 / m,
        failures,
    })
}

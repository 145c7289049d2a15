//! Synthetic longitudinal cohorts with a known average treatment effect.
//!
//! Each individual gets block-equicorrelated Gaussian covariates, a treatment
//! drawn from a nonlinear logistic mechanism
//! `h(x) = sin(x₁) + ln(|x₂| + 1) + 0.5·x₃²`, a latent state path from a
//! K-state Markov chain, and outcomes
//!
//! ```text
//! Y_i(t) = onehot(Z_it)·Γ + X_i·β + τ·T_i + ε_it,   ε_it ~ N(0, σ²)
//! ```
//!
//! The effect `τ` is additive and constant, so the true ATE is exactly `τ`.
//!
//! Defaults: n=500, p=100, horizon=5, K=3, blocks of 10 with ρ=0.5,
//! Γ=(1,2,3), A with 0.8 on the diagonal and 0.1 elsewhere, uniform π₀,
//! σ=1, τ=1, and β with ten nonzero entries ±1 (alternating, starting +1) at
//! indices 0..9.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datamodel::Dataset;
use crate::error::{invalid, Error, Result};
use crate::hmm::{sample_paths, HmmModel};
use crate::propensity::logistic;

/// How treatment depends on covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreatmentMechanism {
    /// `h(x) = sin(x₁) + ln(|x₂| + 1) + 0.5·x₃²`.
    Nonlinear,
    /// Linear logistic index `intercept + x·coef`.
    Linear { intercept: f64, coef: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub n: usize,
    pub p: usize,
    pub horizon: usize,
    pub block_size: usize,
    pub within_block_rho: f64,
    pub pi0: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    pub gamma: Vec<f64>,
    /// Length-p outcome coefficients; `None` selects the default sparse pattern.
    pub beta: Option<Vec<f64>>,
    pub treatment_effect: f64,
    pub noise_sd: f64,
    pub treatment: TreatmentMechanism,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            n: 500,
            p: 100,
            horizon: 5,
            block_size: 10,
            within_block_rho: 0.5,
            pi0: vec![1.0 / 3.0; 3],
            transition: vec![vec![0.8, 0.1, 0.1], vec![0.1, 0.8, 0.1], vec![0.1, 0.1, 0.8]],
            gamma: vec![1.0, 2.0, 3.0],
            beta: None,
            treatment_effect: 1.0,
            noise_sd: 1.0,
            treatment: TreatmentMechanism::Nonlinear,
            seed: 0,
        }
    }
}

/// Ten alternating ±1 entries at the front, zeros elsewhere.
pub fn default_sparse_beta(p: usize) -> Vec<f64> {
    (0..p)
        .map(|j| if j < 10 { if j % 2 == 0 { 1.0 } else { -1.0 } } else { 0.0 })
        .collect()
}

impl DgpConfig {
    pub fn k(&self) -> usize {
        self.pi0.len()
    }

    pub fn beta(&self) -> Vec<f64> {
        self.beta.clone().unwrap_or_else(|| default_sparse_beta(self.p))
    }

    /// Markov chain for the latent states. Emission parameters are unused by
    /// the generator and set to `Γ` with unit sds.
    pub fn hmm(&self) -> Result<HmmModel> {
        HmmModel::new(self.pi0.clone(), self.transition.clone(), self.gamma.clone(), vec![1.0; self.k()])
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 || self.horizon == 0 {
            return Err(Error::Config("n, p and horizon must be positive".into()));
        }
        if self.block_size == 0 {
            return Err(Error::Config("block_size must be positive".into()));
        }
        if !(self.within_block_rho > -1.0 && self.within_block_rho < 1.0) {
            return Err(Error::Config(format!("within_block_rho {} not in (-1, 1)", self.within_block_rho)));
        }
        if !(self.noise_sd > 0.0) {
            return Err(Error::Config("noise_sd must be > 0".into()));
        }
        if self.gamma.len() != self.k() {
            return Err(Error::Config(format!("gamma has {} entries for {} states", self.gamma.len(), self.k())));
        }
        if self.beta().len() != self.p {
            return Err(Error::Config(format!("beta has {} entries, p = {}", self.beta().len(), self.p)));
        }
        if let TreatmentMechanism::Linear { coef, .. } = &self.treatment {
            if coef.len() != self.p {
                return Err(Error::Config("linear treatment coefficients must have length p".into()));
            }
        }
        self.hmm()?;
        Ok(())
    }

    /// Probability of treatment given a covariate row.
    pub fn true_propensity(&self, x: &[f64]) -> f64 {
        match &self.treatment {
            TreatmentMechanism::Nonlinear => logistic(nonlinear_index(x)),
            TreatmentMechanism::Linear { intercept, coef } => {
                logistic(intercept + coef.iter().zip(x).map(|(c, v)| c * v).sum::<f64>())
            }
        }
    }

    /// `E[Y(time) | X = x, T = arm]`, with `time` 1-based.
    pub fn true_outcome_mean(&self, x: &[f64], arm: u8, time: usize) -> Result<f64> {
        let dist = self.hmm()?.marginal(time.saturating_sub(1));
        let state_part: f64 = dist.iter().zip(&self.gamma).map(|(d, g)| d * g).sum();
        let beta = self.beta();
        let lin: f64 = beta.iter().zip(x).map(|(b, v)| b * v).sum();
        Ok(state_part + lin + self.treatment_effect * f64::from(arm))
    }
}

fn nonlinear_index(x: &[f64]) -> f64 {
    x[0].sin() + (x[1].abs() + 1.0).ln() + 0.5 * x[2] * x[2]
}

/// Lower Cholesky factor of a `size × size` equicorrelation block.
fn block_factor(size: usize, rho: f64) -> Result<DMatrix<f64>> {
    let sigma = DMatrix::from_fn(size, size, |i, j| if i == j { 1.0 } else { rho });
    sigma
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Config(format!("block covariance with rho={rho}, size={size} is not positive definite")))
}

/// n×p matrix with i.i.d. rows from `N(0, Σ)`, Σ block-diagonal with
/// equicorrelated blocks of `block_size` (the last block may be shorter).
pub fn gen_covariates<R: Rng + ?Sized>(cfg: &DgpConfig, rng: &mut R) -> Result<DMatrix<f64>> {
    let (n, p, b) = (cfg.n, cfg.p, cfg.block_size);
    if b == 0 {
        return Err(Error::Config("block_size must be positive".into()));
    }
    let full = block_factor(b.min(p), cfg.within_block_rho)?;
    let tail_len = p % b;
    let tail = if tail_len > 0 && p > b { Some(block_factor(tail_len, cfg.within_block_rho)?) } else { None };
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        let mut start = 0;
        while start < p {
            let len = b.min(p - start);
            let l = if len == full.nrows() { &full } else { tail.as_ref().unwrap_or(&full) };
            let z = DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal));
            let v = l * z;
            for j in 0..len {
                x[(i, start + j)] = v[j];
            }
            start += len;
        }
    }
    Ok(x)
}

/// Bernoulli treatment draws from the nonlinear mechanism.
pub fn assign_treatment<R: Rng + ?Sized>(x: &DMatrix<f64>, rng: &mut R) -> Result<Vec<u8>> {
    if x.ncols() < 3 {
        return invalid(format!("nonlinear treatment mechanism needs p >= 3, got {}", x.ncols()));
    }
    Ok((0..x.nrows())
        .map(|i| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            u8::from(rng.gen::<f64>() < logistic(nonlinear_index(&row)))
        })
        .collect())
}

fn assign_with<R: Rng + ?Sized>(cfg: &DgpConfig, x: &DMatrix<f64>, rng: &mut R) -> Result<Vec<u8>> {
    match cfg.treatment {
        TreatmentMechanism::Nonlinear => assign_treatment(x, rng),
        TreatmentMechanism::Linear { .. } => Ok((0..x.nrows())
            .map(|i| {
                let row: Vec<f64> = x.row(i).iter().copied().collect();
                u8::from(rng.gen::<f64>() < cfg.true_propensity(&row))
            })
            .collect()),
    }
}

pub fn gen_outcomes<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    z: &DMatrix<usize>,
    t: &[u8],
    cfg: &DgpConfig,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    let beta = cfg.beta();
    if z.nrows() != n || t.len() != n || beta.len() != x.ncols() {
        return invalid("dimension mismatch between covariates, states, treatment and beta");
    }
    let k = cfg.gamma.len();
    if let Some(bad) = z.iter().find(|&&s| s == 0 || s > k) {
        return invalid(format!("latent state {bad} outside 1..={k}"));
    }
    let lin = x * DVector::from_vec(beta);
    let mut y = DMatrix::zeros(n, z.ncols());
    for i in 0..n {
        for s in 0..z.ncols() {
            let eps: f64 = rng.sample(StandardNormal);
            y[(i, s)] = cfg.gamma[z[(i, s)] - 1] + lin[i] + cfg.treatment_effect * f64::from(t[i]) + cfg.noise_sd * eps;
        }
    }
    Ok(y)
}

/// Full cohort, deterministic in `cfg.seed`. Draw order: covariates,
/// treatment, latent paths, outcome noise.
pub fn generate(cfg: &DgpConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x = gen_covariates(cfg, &mut rng)?;
    let t = assign_with(cfg, &x, &mut rng)?;
    let z = sample_paths(&cfg.hmm()?, cfg.n, cfg.horizon, &mut rng)?;
    let y = gen_outcomes(&x, &z, &t, cfg, &mut rng)?;
    Ok(Dataset::new(x, t, y)?
        .with_latent_states(z, cfg.k())?
        .with_true_ate(cfg.treatment_effect))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_small() -> DgpConfig {
        DgpConfig { n: 50, p: 10, seed: 9, ..Default::default() }
    }

    #[test]
    fn defaults_match_design() {
        let c = DgpConfig::default();
        assert_eq!((c.n, c.p, c.horizon, c.k()), (500, 100, 5, 3));
        let b = c.beta();
        assert_eq!(b.iter().filter(|v| **v != 0.0).count(), 10);
        assert_eq!(&b[..4], &[1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn generate_shapes_and_truth() {
        let ds = generate(&cfg_small()).unwrap();
        assert_eq!((ds.n(), ds.p(), ds.horizon()), (50, 10, 5));
        assert_eq!(ds.true_ate(), Some(1.0));
        assert!(ds.latent_states().unwrap().iter().all(|z| (1..=3).contains(z)));
    }

    #[test]
    fn generate_is_deterministic() {
        assert_eq!(generate(&cfg_small()).unwrap(), generate(&cfg_small()).unwrap());
        let other = DgpConfig { seed: 10, ..cfg_small() };
        assert_ne!(generate(&cfg_small()).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn treatment_probabilities() {
        let c = DgpConfig::default();
        assert_eq!(c.true_propensity(&[0.0; 5]), 0.5);
        let p = c.true_propensity(&[std::f64::consts::FRAC_PI_2, 0.0, 0.0]);
        assert!((p - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn treatment_needs_three_covariates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(assign_treatment(&DMatrix::zeros(4, 2), &mut rng).is_err());
        let x = DMatrix::from_fn(30, 4, |i, j| (i + j) as f64 * 0.1);
        let a = assign_treatment(&x, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = assign_treatment(&x, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_free_outcomes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = DMatrix::from_element(2, 3, 0.7);
        let cfg = DgpConfig {
            p: 3,
            gamma: vec![0.0; 3],
            beta: Some(vec![0.0; 3]),
            treatment_effect: 2.0,
            noise_sd: 1e-300,
            ..Default::default()
        };
        let z = DMatrix::from_element(2, 4, 1usize);
        let y = gen_outcomes(&x, &z, &[1, 1], &cfg, &mut rng).unwrap();
        assert!(y.iter().all(|v| (v - 2.0).abs() < 1e-12));

        let cfg = DgpConfig { gamma: vec![1.0, 5.0, 9.0], treatment_effect: 0.0, ..cfg };
        let z = DMatrix::from_element(2, 4, 2usize);
        let y = gen_outcomes(&x, &z, &[0, 1], &cfg, &mut rng).unwrap();
        assert!(y.iter().all(|v| (v - 5.0).abs() < 1e-12));
        assert!(gen_outcomes(&x, &DMatrix::from_element(2, 4, 4usize), &[0, 1], &cfg, &mut rng).is_err());
    }

    #[test]
    fn rejects_non_pd_blocks() {
        let cfg = DgpConfig { p: 10, block_size: 5, within_block_rho: -0.5, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(gen_covariates(&cfg, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn rows_have_length_p() {
        let cfg = DgpConfig { n: 3, ..Default::default() };
        let x = gen_covariates(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(x.ncols(), 100);
    }

    #[test]
    fn true_outcome_mean_uses_state_marginal() {
        let c = DgpConfig { p: 3, beta: Some(vec![0.0; 3]), ..Default::default() };
        // Uniform pi0 is stationary for the symmetric chain, so E[Γ_Z] = 2.
        let m = c.true_outcome_mean(&[0.0; 3], 1, 5).unwrap();
        assert!((m - 3.0).abs() < 1e-12);
    }
}

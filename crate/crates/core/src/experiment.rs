//! Seeded Monte Carlo runner for the method comparison.
//!
//! Replication `r` draws its dataset from seed `derive(master, r)`; every
//! method in that replication sees the same data and split, and draws any
//! randomness of its own from a stream keyed by its name. Model fits shared
//! by several methods (the propensity fit, the static and latent outcome
//! fits) are computed once per replication.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Method};
use crate::datamodel::{split, Dataset};
use crate::dr::{estimate, estimate_weighted, with_bootstrap, Components, DrEstimate, DrFormula, DrInput};
use crate::elopt::{select_lambda_bic, solve_inner_weights, ElSolution, PropensityProblem};
use crate::error::{Error, Result};
use crate::hmm::{baum_welch, forward_backward, quantile_init, HmmModel};
use crate::metrics::{aggregate_values, MetricTable};
use crate::mtgcn::{self, build_graphs, GraphSpec, MtgcnModel, Samples, Scaling, TrainReport};
use crate::outcome::{build_features, fit_outcome_bic, pooled_design, predict, Latent, OutcomeFit};
use crate::propensity::score;
use crate::seed::{derive, tag};
use crate::synthdgp::{generate, DgpConfig};

/// Propensity fit on the training split, evaluated on the test split.
#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub solution: ElSolution,
    pub e_test: Vec<f64>,
    /// EL weights re-solved on the test split under the active moments.
    pub w_test: Vec<f64>,
    /// The test-split EL problem was infeasible and uniform weights were used.
    pub uniform_fallback: bool,
}

/// Propensity fit by SCAD-penalized EL with BIC-selected λ₁.
pub fn fit_propensity(train: &Dataset, test: &Dataset, cfg: &ExperimentConfig) -> Result<PropensityFit> {
    let problem = PropensityProblem::from_dataset(train, cfg.el.intercept)?;
    let (solution, _) = select_lambda_bic(&problem, &cfg.lambda_grid, cfg.scad_a, &cfg.el)?;
    let model = &solution.model;
    let offset = usize::from(model.intercept);
    let active: Vec<usize> = (0..model.coef.len()).filter(|&j| (offset == 1 && j == 0) || model.coef[j] != 0.0).collect();
    let n = test.n();
    let mut e_test = Vec::with_capacity(n);
    let mut g = DMatrix::zeros(n, active.len());
    for i in 0..n {
        let x: Vec<f64> = test.covariates().row(i).iter().copied().collect();
        let e = score(model, &x)?;
        let row = model.design_row(&x);
        let r = f64::from(test.treatment()[i]) - e;
        for (c, &j) in active.iter().enumerate() {
            g[(i, c)] = r * row[j];
        }
        e_test.push(e);
    }
    let (w_test, uniform_fallback) = match solve_inner_weights(&g) {
        Ok(sol) => (sol.weights, false),
        Err(_) => (vec![1.0 / n as f64; n], true),
    };
    Ok(PropensityFit { solution, e_test, w_test, uniform_fallback })
}

/// Per-arm pooled outcome fit over all time points.
pub fn fit_outcome_model(train: &Dataset, latent: &Latent, cfg: &ExperimentConfig) -> Result<OutcomeFit> {
    let times: Vec<usize> = (1..=train.horizon()).collect();
    let design = pooled_design(train, latent, &times)?;
    Ok(fit_outcome_bic(&design, &cfg.outcome_lambda_grid, cfg.scad_a, &cfg.outcome)?.0)
}

/// Predictions for every individual at time `t` under each arm's
/// coefficients: `(m0, m1)`.
pub fn arm_predictions(fit: &OutcomeFit, ds: &Dataset, latent: &Latent, t: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let f = build_features(ds.covariates(), latent, t)?;
    Ok((predict(fit, &f, 0)?, predict(fit, &f, 1)?))
}

fn own_arm(m: &(Vec<f64>, Vec<f64>), t: &[u8]) -> Vec<f64> {
    t.iter().enumerate().map(|(i, &a)| if a == 1 { m.1[i] } else { m.0[i] }).collect()
}

/// Latent-state side: an HMM on residuals of the static outcome model, and
/// one-step predictive state probabilities for every individual.
#[derive(Debug, Clone)]
pub struct LatentFit {
    pub hmm: HmmModel,
    /// `horizon × K`, row `t` is `P(Z_{t+1} | r_1..r_t)` (0-based rows).
    pub predictive_train: Vec<DMatrix<f64>>,
    pub predictive_test: Vec<DMatrix<f64>>,
    pub outcome: OutcomeFit,
}

fn residual_paths(fit: &OutcomeFit, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    let mut paths = vec![Vec::with_capacity(ds.horizon()); ds.n()];
    for t in 1..=ds.horizon() {
        let m = own_arm(&arm_predictions(fit, ds, &Latent::None, t)?, ds.treatment());
        for (i, path) in paths.iter_mut().enumerate() {
            path.push(ds.outcomes()[(i, t - 1)] - m[i]);
        }
    }
    Ok(paths)
}

pub fn fit_latent(train: &Dataset, test: &Dataset, static_fit: &OutcomeFit, cfg: &ExperimentConfig) -> Result<LatentFit> {
    let r_train = residual_paths(static_fit, train)?;
    let r_test = residual_paths(static_fit, test)?;
    let init = quantile_init(&r_train, cfg.latent_states, 0.8)?;
    let hmm = baum_welch(&init, &r_train, &cfg.hmm)?.model;
    let predictive = |paths: &[Vec<f64>]| -> Result<Vec<DMatrix<f64>>> {
        paths.iter().map(|r| Ok(forward_backward(&hmm, r)?.predictive(&hmm))).collect()
    };
    let predictive_train = predictive(&r_train)?;
    let predictive_test = predictive(&r_test)?;
    let outcome = fit_outcome_model(train, &Latent::Soft(&predictive_train), cfg)?;
    Ok(LatentFit { hmm, predictive_train, predictive_test, outcome })
}

/// Next-step samples `(i, t) → Y_{i,t+1}` for `t = 1..horizon−1`, ordered
/// individual-major. `signal(i, t)` gives the node values.
fn transition_samples(ds: &Dataset, offset: Option<&dyn Fn(usize, usize) -> f64>, signal: &dyn Fn(usize, usize) -> Vec<f64>) -> Result<Samples> {
    let h = ds.horizon();
    let rows = ds.n() * (h - 1);
    let mut sig = Vec::with_capacity(rows);
    let mut target = Vec::with_capacity(rows);
    let mut off = Vec::with_capacity(rows);
    for i in 0..ds.n() {
        for t in 1..h {
            sig.push(signal(i, t));
            target.push(ds.outcomes()[(i, t)]);
            off.push(offset.map_or(0.0, |f| f(i, t)));
        }
    }
    let nodes = sig.first().map_or(0, Vec::len);
    let signals = DMatrix::from_fn(rows, nodes, |r, j| sig[r][j]);
    Samples::new(signals, DMatrix::from_column_slice(rows, 1, &target), Some(off))
}

/// Own-arm latent-model predictions of `Y_{i,t+1}`, indexed `[t-1][i]`.
fn latent_next_step(fit: &LatentFit, ds: &Dataset, predictive: &[DMatrix<f64>]) -> Result<Vec<Vec<f64>>> {
    (2..=ds.horizon())
        .map(|t| Ok(own_arm(&arm_predictions(&fit.outcome, ds, &Latent::Soft(predictive), t)?, ds.treatment())))
        .collect()
}

fn proposed_signal<'a>(ds: &'a Dataset, support: &'a [usize], predictive: &'a [DMatrix<f64>], arm: Option<u8>) -> impl Fn(usize, usize) -> Vec<f64> + 'a {
    move |i, t| {
        let mut s: Vec<f64> = support.iter().map(|&j| ds.covariates()[(i, j)]).collect();
        s.push(f64::from(arm.unwrap_or(ds.treatment()[i])));
        s.extend(predictive[i].row(t).iter());
        s
    }
}

fn argmax_states(samples: &Samples, k: usize) -> Vec<usize> {
    let n = samples.signals.ncols();
    (0..samples.len())
        .map(|r| {
            (0..k)
                .max_by(|&a, &b| samples.signals[(r, n - k + a)].total_cmp(&samples.signals[(r, n - k + b)]).then(b.cmp(&a)))
                .unwrap_or(0)
        })
        .collect()
}

fn train_mtgcn(train: &Samples, strata: Option<&[usize]>, cfg: &ExperimentConfig, seed: u64) -> Result<(MtgcnModel, GraphSpec, TrainReport)> {
    let graphs = build_graphs(&train.signals, strata, cfg.edge_threshold)?;
    let hyper = mtgcn::MtgcnHyper { seed, ..cfg.mtgcn.clone() };
    let mut model = MtgcnModel::new(graphs.node_count, graphs.views(), hyper, Scaling::fit(train))?;
    let report = mtgcn::train(&mut model, &graphs, train)?;
    Ok((model, graphs, report))
}

/// Result of one method on one replication.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    pub method: String,
    pub status: String,
    pub tau_true: f64,
    pub tau_hat: Option<f64>,
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub covered: Option<bool>,
    pub pe: Option<f64>,
    pub lambda_propensity: Option<f64>,
    pub propensity_support: Option<usize>,
    pub outcome_support: Option<usize>,
    pub el_uniform_fallback: Option<bool>,
    pub mtgcn_epochs: Option<usize>,
    pub message: String,
}

struct Replication<'a> {
    cfg: &'a ExperimentConfig,
    index: usize,
    seed: u64,
    train: Dataset,
    test: Dataset,
    propensity: Option<std::result::Result<PropensityFit, String>>,
    static_fit: Option<std::result::Result<OutcomeFit, String>>,
    latent: Option<std::result::Result<LatentFit, String>>,
}

fn cached<T: Clone>(slot: &mut Option<std::result::Result<T, String>>, f: impl FnOnce() -> Result<T>) -> Result<T> {
    if slot.is_none() {
        *slot = Some(f().map_err(|e| e.to_string()));
    }
    match slot.as_ref().expect("slot filled above") {
        Ok(v) => Ok(v.clone()),
        Err(m) => Err(Error::Estimation(m.clone())),
    }
}

impl<'a> Replication<'a> {
    fn new(cfg: &'a ExperimentConfig, index: usize) -> Result<Self> {
        let seed = derive(cfg.seed, index as u64);
        let dgp = DgpConfig { seed: derive(seed, tag("dgp")), ..cfg.dgp.clone() };
        let ds = generate(&dgp)?;
        let s = split(&ds, cfg.train_fraction, derive(seed, tag("split")))?;
        Ok(Self {
            cfg,
            index,
            seed,
            train: ds.subset(&s.train_ids)?,
            test: ds.subset(&s.test_ids)?,
            propensity: None,
            static_fit: None,
            latent: None,
        })
    }

    fn propensity(&mut self) -> Result<PropensityFit> {
        let (train, test, cfg) = (&self.train, &self.test, self.cfg);
        cached(&mut self.propensity, || fit_propensity(train, test, cfg))
    }

    fn static_fit(&mut self) -> Result<OutcomeFit> {
        let (train, cfg) = (&self.train, self.cfg);
        cached(&mut self.static_fit, || fit_outcome_model(train, &Latent::None, cfg))
    }

    fn latent(&mut self) -> Result<LatentFit> {
        let st = self.static_fit()?;
        let (train, test, cfg) = (&self.train, &self.test, self.cfg);
        cached(&mut self.latent, || fit_latent(train, test, &st, cfg))
    }

    fn dr(&self, e: &[f64], w: Option<&[f64]>, m: &(Vec<f64>, Vec<f64>), formula: DrFormula, mode: Components, method: Method) -> Result<DrEstimate> {
        let y = self.test.final_outcome();
        let input = DrInput { y: &y, t: self.test.treatment(), e, m0: &m.0, m1: &m.1 };
        let uniform;
        let w = match w {
            Some(w) => w,
            None => {
                uniform = vec![1.0 / y.len() as f64; y.len()];
                &uniform
            }
        };
        let est = match w.iter().all(|v| *v == w[0]) {
            true => estimate(&input, formula, mode)?,
            false => estimate_weighted(&input, w, formula, mode)?,
        };
        if self.cfg.bootstrap > 0 {
            with_bootstrap(est, w, self.cfg.bootstrap, derive(self.seed, tag(method.name()) ^ tag("bootstrap")))
        } else {
            Ok(est)
        }
    }

    /// PE of a linear predictor that ignores the past: own-arm static fit.
    fn static_pe(&mut self) -> Result<f64> {
        let fit = self.static_fit()?;
        let mut pred = Vec::new();
        let mut target = Vec::new();
        for t in 2..=self.test.horizon() {
            let m = own_arm(&arm_predictions(&fit, &self.test, &Latent::None, t)?, self.test.treatment());
            for i in 0..self.test.n() {
                pred.push((i, t, m[i]));
            }
        }
        pred.sort_by_key(|&(i, t, _)| (i, t));
        for &(i, t, _) in &pred {
            target.push(self.test.outcomes()[(i, t - 1)]);
        }
        mtgcn::rmse(pred.into_iter().map(|p| p.2), target)
    }

    fn run_method(&mut self, method: Method, rec: &mut ReplicationRecord) -> Result<()> {
        let cfg = self.cfg;
        let h = self.test.horizon();
        match method {
            Method::Proposed => {
                let prop = self.propensity()?;
                let lat = self.latent()?;
                let support = lat.outcome.covariate_support();
                let k = lat.hmm.k();
                let off_train = latent_next_step(&lat, &self.train, &lat.predictive_train)?;
                let off_test = latent_next_step(&lat, &self.test, &lat.predictive_test)?;
                let train_s = transition_samples(
                    &self.train,
                    Some(&|i, t| off_train[t - 1][i]),
                    &proposed_signal(&self.train, &support, &lat.predictive_train, None),
                )?;
                let test_s = transition_samples(
                    &self.test,
                    Some(&|i, t| off_test[t - 1][i]),
                    &proposed_signal(&self.test, &support, &lat.predictive_test, None),
                )?;
                let strata = argmax_states(&train_s, k);
                let (model, graphs, report) = train_mtgcn(&train_s, Some(&strata), cfg, derive(self.seed, tag(method.name())))?;
                rec.pe = Some(mtgcn::predictive_error(&model, &graphs, &test_s)?);
                rec.mtgcn_epochs = Some(report.epochs);
                let mut m = arm_predictions(&lat.outcome, &self.test, &Latent::Soft(&lat.predictive_test), h)?;
                if cfg.mtgcn_outcome {
                    for arm in [0u8, 1] {
                        let base = if arm == 1 { &m.1 } else { &m.0 };
                        let s = transition_samples(&self.test, None, &proposed_signal(&self.test, &support, &lat.predictive_test, Some(arm)))?;
                        let rows: Vec<usize> = (0..self.test.n()).map(|i| i * (h - 1) + h - 2).collect();
                        let corr = mtgcn::forward(&model, &graphs, &s.signals.select_rows(&rows), Some(base))?;
                        let new: Vec<f64> = corr.column(0).iter().copied().collect();
                        if arm == 1 {
                            m.1 = new;
                        } else {
                            m.0 = new;
                        }
                    }
                }
                let est = self.dr(&prop.e_test, Some(&prop.w_test), &m, cfg.formula, Components::Both, method)?;
                record_estimate(rec, &est);
                rec.lambda_propensity = Some(prop.solution.lambda1);
                rec.propensity_support = Some(prop.solution.support().len());
                rec.outcome_support = Some(support.len());
                rec.el_uniform_fallback = Some(prop.uniform_fallback);
            }
            Method::IpwOnly => {
                let prop = self.propensity()?;
                let zeros = vec![0.0; self.test.n()];
                let est = self.dr(&prop.e_test, Some(&prop.w_test), &(zeros.clone(), zeros), cfg.formula, Components::PropensityOnly, method)?;
                record_estimate(rec, &est);
                rec.pe = Some(arm_mean_pe(&self.train, &self.test)?);
                rec.lambda_propensity = Some(prop.solution.lambda1);
                rec.propensity_support = Some(prop.solution.support().len());
                rec.el_uniform_fallback = Some(prop.uniform_fallback);
            }
            Method::OutcomeOnly => {
                let fit = self.static_fit()?;
                let m = arm_predictions(&fit, &self.test, &Latent::None, h)?;
                let half = vec![0.5; self.test.n()];
                let est = self.dr(&half, None, &m, DrFormula::Aipw, Components::OutcomeOnly, method)?;
                record_estimate(rec, &est);
                rec.pe = Some(self.static_pe()?);
                rec.outcome_support = Some(fit.covariate_support().len());
            }
            Method::CbpsScadStatic => {
                let prop = self.propensity()?;
                let fit = self.static_fit()?;
                let m = arm_predictions(&fit, &self.test, &Latent::None, h)?;
                let est = self.dr(&prop.e_test, Some(&prop.w_test), &m, cfg.formula, Components::Both, method)?;
                record_estimate(rec, &est);
                rec.pe = Some(self.static_pe()?);
                rec.lambda_propensity = Some(prop.solution.lambda1);
                rec.propensity_support = Some(prop.solution.support().len());
                rec.outcome_support = Some(fit.covariate_support().len());
                rec.el_uniform_fallback = Some(prop.uniform_fallback);
            }
            Method::MtgcnOnly => {
                let keep = screen_covariates(&self.train, cfg.screen_top);
                let signal = |ds: &Dataset| {
                    let keep = keep.clone();
                    let ds = ds.clone();
                    move |i: usize, _t: usize| {
                        let mut s: Vec<f64> = keep.iter().map(|&j| ds.covariates()[(i, j)]).collect();
                        s.push(f64::from(ds.treatment()[i]));
                        s
                    }
                };
                let train_s = transition_samples(&self.train, None, &signal(&self.train))?;
                let test_s = transition_samples(&self.test, None, &signal(&self.test))?;
                let arms: Vec<usize> = (0..train_s.len()).map(|r| train_s.signals[(r, keep.len())] as usize).collect();
                let (model, graphs, report) = train_mtgcn(&train_s, Some(&arms), cfg, derive(self.seed, tag(method.name())))?;
                rec.pe = Some(mtgcn::predictive_error(&model, &graphs, &test_s)?);
                rec.mtgcn_epochs = Some(report.epochs);
            }
        }
        Ok(())
    }
}

fn record_estimate(rec: &mut ReplicationRecord, est: &DrEstimate) {
    rec.tau_hat = Some(est.tau_hat);
    rec.se = Some(est.se);
    rec.ci_low = Some(est.ci_low);
    rec.ci_high = Some(est.ci_high);
    rec.covered = Some(est.covers(rec.tau_true));
}

/// PE of the per-arm, per-time training mean.
fn arm_mean_pe(train: &Dataset, test: &Dataset) -> Result<f64> {
    let h = train.horizon();
    let mut sums = vec![[0.0; 2]; h];
    let mut counts = vec![[0usize; 2]; h];
    for i in 0..train.n() {
        let a = usize::from(train.treatment()[i]);
        for t in 0..h {
            sums[t][a] += train.outcomes()[(i, t)];
            counts[t][a] += 1;
        }
    }
    let mut pred = Vec::new();
    let mut target = Vec::new();
    for i in 0..test.n() {
        let a = usize::from(test.treatment()[i]);
        for t in 1..h {
            if counts[t][a] == 0 {
                return Err(Error::Estimation("an arm is empty in the training split".into()));
            }
            pred.push(sums[t][a] / counts[t][a] as f64);
            target.push(test.outcomes()[(i, t)]);
        }
    }
    mtgcn::rmse(pred, target)
}

/// Indices of the `top` covariates most correlated (in absolute value) with
/// the pooled outcome, ties broken by index.
pub fn screen_covariates(train: &Dataset, top: usize) -> Vec<usize> {
    let (n, p) = train.covariates().shape();
    let ybar: Vec<f64> = (0..n).map(|i| train.outcomes().row(i).mean()).collect();
    let ym = ybar.iter().sum::<f64>() / n as f64;
    let mut scored: Vec<(usize, f64)> = (0..p)
        .map(|j| {
            let col = train.covariates().column(j);
            let xm = col.mean();
            let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
            for i in 0..n {
                let (dx, dy) = (col[i] - xm, ybar[i] - ym);
                sxy += dx * dy;
                sxx += dx * dx;
                syy += dy * dy;
            }
            let c = if sxx > 0.0 && syy > 0.0 { (sxy / (sxx * syy).sqrt()).abs() } else { 0.0 };
            (j, c)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut keep: Vec<usize> = scored.into_iter().take(top.min(p)).map(|(j, _)| j).collect();
    keep.sort_unstable();
    keep
}

/// Runs every configured method on replication `index`. Failures (errors or
/// panics) become failed records; they never abort the run.
pub fn run_replication(cfg: &ExperimentConfig, index: usize) -> Vec<ReplicationRecord> {
    let seed = derive(cfg.seed, index as u64);
    let base = |method: Method| ReplicationRecord {
        replication: index,
        seed,
        method: method.name().to_string(),
        status: "ok".into(),
        tau_true: cfg.dgp.treatment_effect,
        ..Default::default()
    };
    let mut rep = match Replication::new(cfg, index) {
        Ok(r) => r,
        Err(e) => {
            return cfg
                .methods
                .iter()
                .map(|&m| ReplicationRecord { status: "failed".into(), message: format!("data generation: {e}"), ..base(m) })
                .collect();
        }
    };
    if let Some(ate) = rep.test.true_ate() {
        debug_assert_eq!(ate, cfg.dgp.treatment_effect);
    }
    cfg.methods
        .iter()
        .map(|&m| {
            let mut rec = base(m);
            let outcome = catch_unwind(AssertUnwindSafe(|| rep.run_method(m, &mut rec)));
            let failure = match outcome {
                Ok(Ok(())) => None,
                Ok(Err(e)) => Some(e.to_string()),
                Err(p) => Some(format!(
                    "panic: {}",
                    p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned()).unwrap_or_default()
                )),
            };
            if let Some(msg) = failure {
                log::warn!("replication {} method {} failed: {msg}", rep.index, m);
                rec = ReplicationRecord { status: "failed".into(), message: msg, ..base(m) };
            }
            rec
        })
        .collect()
}

/// Aggregates successful records per method, in configured method order.
pub fn summarize(cfg: &ExperimentConfig, records: &[ReplicationRecord]) -> Result<MetricTable> {
    let mut table = MetricTable::default();
    for m in &cfg.methods {
        let ok: Vec<&ReplicationRecord> = records.iter().filter(|r| r.method == m.name() && r.status == "ok").collect();
        let taus: Vec<f64> = ok.iter().filter_map(|r| r.tau_hat).collect();
        let covered = ok.iter().filter(|r| r.covered == Some(true)).count();
        let pes: Vec<f64> = ok.iter().filter_map(|r| r.pe).collect();
        if taus.is_empty() && pes.is_empty() {
            continue;
        }
        table.rows.push(aggregate_values(m.name(), cfg.dgp.treatment_effect, &taus, covered, &pes)?);
    }
    Ok(table)
}

#[derive(Debug, Clone, Serialize)]
pub struct Failure {
    pub replication: usize,
    pub seed: u64,
    pub method: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    package: &'static str,
    version: &'static str,
    seed_rule: &'static str,
    config: &'a ExperimentConfig,
    replication_seeds: Vec<u64>,
    failures: &'a [Failure],
    files: [&'static str; 4],
}

pub const REPLICATIONS_FILE: &str = "replications.csv";
pub const METRICS_CSV_FILE: &str = "metrics.csv";
pub const METRICS_TEXT_FILE: &str = "metrics.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub table: MetricTable,
    pub records: Vec<ReplicationRecord>,
    pub failures: Vec<Failure>,
    pub output_dir: PathBuf,
}

/// Runs all replications (in parallel up to `cfg.workers`), then writes
/// `replications.csv`, `metrics.csv`, `metrics.txt` and `manifest.json`.
/// Output is independent of the worker count.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let nested: Vec<Vec<ReplicationRecord>> =
        pool.install(|| (0..cfg.replications).into_par_iter().map(|r| run_replication(cfg, r)).collect());
    let records: Vec<ReplicationRecord> = nested.into_iter().flatten().collect();
    let failures: Vec<Failure> = records
        .iter()
        .filter(|r| r.status != "ok")
        .map(|r| Failure { replication: r.replication, seed: r.seed, method: r.method.clone(), message: r.message.clone() })
        .collect();
    let table = summarize(cfg, &records)?;
    write_outputs(cfg, &records, &table, &failures)?;
    Ok(RunOutput { table, records, failures, output_dir: cfg.output_dir.clone() })
}

fn write_outputs(cfg: &ExperimentConfig, records: &[ReplicationRecord], table: &MetricTable, failures: &[Failure]) -> Result<()> {
    let dir: &Path = &cfg.output_dir;
    let mut w = csv::Writer::from_path(dir.join(REPLICATIONS_FILE))?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    table.write_csv(&dir.join(METRICS_CSV_FILE))?;
    let mut text = table.to_text();
    if !failures.is_empty() {
        text.push_str(&format!("# failed method runs: {}\n", failures.len()));
    }
    std::fs::write(dir.join(METRICS_TEXT_FILE), text)?;
    let manifest = Manifest {
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        seed_rule: "replication seed = derive(seed, r); dataset seed = derive(rep, tag(\"dgp\")); split seed = derive(rep, tag(\"split\")); method seed = derive(rep, tag(name))",
        config: cfg,
        replication_seeds: (0..cfg.replications).map(|r| derive(cfg.seed, r as u64)).collect(),
        failures,
        files: [REPLICATIONS_FILE, METRICS_CSV_FILE, METRICS_TEXT_FILE, MANIFEST_FILE],
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(())
}

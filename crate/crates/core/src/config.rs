//! Experiment configuration, read from TOML.
//!
//! Top-level keys configure the run; `[dgp]`, `[el]`, `[outcome]`, `[hmm]`
//! and `[mtgcn]` tables address every data-generating and solver field.
//! Unknown keys are rejected and omitted keys take their defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dr::DrFormula;
use crate::elopt::ElOptions;
use crate::error::{Error, Result};
use crate::hmm::BaumWelchOptions;
use crate::mtgcn::MtgcnHyper;
use crate::outcome::CdOptions;
use crate::propensity::DEFAULT_SCAD_A;
use crate::synthdgp::DgpConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Proposed,
    IpwOnly,
    OutcomeOnly,
    CbpsScadStatic,
    MtgcnOnly,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Proposed, Method::IpwOnly, Method::OutcomeOnly, Method::CbpsScadStatic, Method::MtgcnOnly];

    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::IpwOnly => "ipw_only",
            Method::OutcomeOnly => "outcome_only",
            Method::CbpsScadStatic => "cbps_scad_static",
            Method::MtgcnOnly => "mtgcn_only",
        }
    }

    /// Whether the method produces a treatment effect estimate.
    pub fn estimates_effect(self) -> bool {
        self != Method::MtgcnOnly
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method '{s}'")))
    }
}

/// Parses a comma-separated method list.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub replications: usize,
    pub seed: u64,
    /// Worker threads; 0 uses all available cores.
    pub workers: usize,
    pub output_dir: PathBuf,
    pub train_fraction: f64,
    /// λ₁ candidates for the propensity fit.
    pub lambda_grid: Vec<f64>,
    /// λ₂ candidates for the outcome fits.
    pub outcome_lambda_grid: Vec<f64>,
    pub scad_a: f64,
    pub formula: DrFormula,
    /// Latent states assumed at estimation time.
    pub latent_states: usize,
    /// Bootstrap resamples for the interval; 0 keeps the Wald interval.
    pub bootstrap: usize,
    /// Experimental: use MTGCN-corrected predictions as m₀, m₁ in the proposed estimator.
    pub mtgcn_outcome: bool,
    /// Covariates kept by correlation screening for the graph-only predictor.
    pub screen_top: usize,
    pub edge_threshold: f64,
    pub dgp: DgpConfig,
    pub el: ElOptions,
    pub outcome: CdOptions,
    pub hmm: BaumWelchOptions,
    pub mtgcn: MtgcnHyper,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            replications: 100,
            seed: 20240601,
            workers: 1,
            output_dir: PathBuf::from("results"),
            train_fraction: crate::datamodel::DEFAULT_TRAIN_FRACTION,
            lambda_grid: vec![0.01, 0.02, 0.03, 0.05, 0.075, 0.1, 0.15, 0.2, 0.3, 0.5],
            outcome_lambda_grid: vec![0.01, 0.02, 0.05, 0.1, 0.15, 0.2, 0.3, 0.5],
            scad_a: DEFAULT_SCAD_A,
            formula: DrFormula::Aipw,
            latent_states: 3,
            bootstrap: 0,
            mtgcn_outcome: false,
            screen_top: 20,
            edge_threshold: crate::mtgcn::DEFAULT_EDGE_THRESHOLD,
            dgp: DgpConfig::default(),
            el: ElOptions::default(),
            outcome: CdOptions::default(),
            hmm: BaumWelchOptions::default(),
            mtgcn: MtgcnHyper::default(),
        }
    }
}

impl ExperimentConfig {
    /// Small, fast preset for smoke runs.
    pub fn quick() -> Self {
        let mut cfg = Self::default();
        cfg.replications = 2;
        cfg.dgp.n = 120;
        cfg.dgp.p = 10;
        cfg.dgp.block_size = 5;
        cfg.dgp.beta = None;
        cfg.mtgcn.epochs = 40;
        cfg.mtgcn.hidden = 8;
        cfg.screen_top = 5;
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        if self.methods.is_empty() {
            return bad("at least one method is required".into());
        }
        for (name, grid) in [("lambda_grid", &self.lambda_grid), ("outcome_lambda_grid", &self.outcome_lambda_grid)] {
            if grid.is_empty() || grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
                return bad(format!("{name} must be a nonempty list of finite values >= 0"));
            }
        }
        if !(self.scad_a > 2.0) {
            return bad(format!("scad_a must exceed 2, got {}", self.scad_a));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction));
        }
        if self.latent_states == 0 {
            return bad("latent_states must be positive".into());
        }
        if self.dgp.horizon < 2 {
            return bad("horizon must be at least 2 to form next-step prediction pairs".into());
        }
        if self.bootstrap == 1 {
            return bad("bootstrap needs at least 2 resamples (or 0 to disable)".into());
        }
        if self.mtgcn.hidden == 0 || self.mtgcn.heads == 0 {
            return bad("mtgcn hidden width and heads must be positive".into());
        }
        self.dgp.validate()
    }
}

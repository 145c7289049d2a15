//! Longitudinal data containers and the train/test split.
//!
//! A [`Dataset`] holds baseline covariates `X` (n×p), a binary treatment per
//! individual, an n×horizon outcome panel and, for synthetic data, the true
//! latent state paths and the true average treatment effect.
//!
//! Latent states are stored 1-based (`1..=K`) to match how states are
//! labelled in model output; everything that indexes arrays converts to
//! 0-based at the call site.
//!
//! ## CSV layout
//!
//! Outcomes file, one row per (individual, time):
//!
//! ```text
//! id,t,T,Y,Z
//! 0,1,1,2.31,3
//! ```
//!
//! `t` runs `1..=horizon`. The `Z` column is omitted entirely when the
//! dataset has no latent states. The covariate sidecar has one row per
//! individual with columns `id,x1,...,xp`.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

pub const OUTCOME_COLUMNS: [&str; 5] = ["id", "t", "T", "Y", "Z"];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    covariates: DMatrix<f64>,
    treatment: Vec<u8>,
    outcomes: DMatrix<f64>,
    latent_states: Option<DMatrix<usize>>,
    state_count: Option<usize>,
    true_ate: Option<f64>,
}

impl Dataset {
    pub fn new(covariates: DMatrix<f64>, treatment: Vec<u8>, outcomes: DMatrix<f64>) -> Result<Self> {
        let n = covariates.nrows();
        if treatment.len() != n || outcomes.nrows() != n {
            return invalid(format!(
                "row mismatch: covariates {n}, treatment {}, outcomes {}",
                treatment.len(),
                outcomes.nrows()
            ));
        }
        if outcomes.ncols() == 0 {
            return invalid("outcome panel has no time points");
        }
        if let Some(bad) = treatment.iter().find(|&&t| t > 1) {
            return invalid(format!("treatment entries must be 0 or 1, found {bad}"));
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return invalid("covariates contain non-finite values");
        }
        if outcomes.iter().any(|v| !v.is_finite()) {
            return invalid("outcomes contain non-finite values");
        }
        Ok(Self {
            covariates,
            treatment,
            outcomes,
            latent_states: None,
            state_count: None,
            true_ate: None,
        })
    }

    /// Attach latent state paths (entries in `1..=k`).
    pub fn with_latent_states(mut self, states: DMatrix<usize>, k: usize) -> Result<Self> {
        if states.nrows() != self.n() || states.ncols() != self.horizon() {
            return invalid("latent state matrix must be n×horizon");
        }
        if let Some(bad) = states.iter().find(|&&z| z == 0 || z > k) {
            return invalid(format!("latent state {bad} outside 1..={k}"));
        }
        self.latent_states = Some(states);
        self.state_count = Some(k);
        Ok(self)
    }

    pub fn with_true_ate(mut self, ate: f64) -> Self {
        self.true_ate = Some(ate);
        self
    }

    pub fn n(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn horizon(&self) -> usize {
        self.outcomes.ncols()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn treatment(&self) -> &[u8] {
        &self.treatment
    }

    pub fn treatment_f64(&self) -> Vec<f64> {
        self.treatment.iter().map(|&t| f64::from(t)).collect()
    }

    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    /// Outcome at the final observed time.
    pub fn final_outcome(&self) -> Vec<f64> {
        let last = self.horizon() - 1;
        (0..self.n()).map(|i| self.outcomes[(i, last)]).collect()
    }

    pub fn latent_states(&self) -> Option<&DMatrix<usize>> {
        self.latent_states.as_ref()
    }

    pub fn state_count(&self) -> Option<usize> {
        self.state_count
    }

    pub fn true_ate(&self) -> Option<f64> {
        self.true_ate
    }

    /// Rows `ids` in the given order, carrying latent states and true ATE along.
    pub fn subset(&self, ids: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.n()) {
            return invalid(format!("index {bad} out of range for n={}", self.n()));
        }
        let covariates = self.covariates.select_rows(ids);
        let outcomes = self.outcomes.select_rows(ids);
        let treatment = ids.iter().map(|&i| self.treatment[i]).collect();
        let mut out = Dataset::new(covariates, treatment, outcomes)?;
        if let (Some(z), Some(k)) = (&self.latent_states, self.state_count) {
            out = out.with_latent_states(z.select_rows(ids), k)?;
        }
        out.true_ate = self.true_ate;
        Ok(out)
    }

    pub fn write_csv(&self, outcomes_path: &Path, covariates_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(outcomes_path)?;
        let cols: &[&str] = if self.latent_states.is_some() {
            &OUTCOME_COLUMNS
        } else {
            &OUTCOME_COLUMNS[..4]
        };
        w.write_record(cols)?;
        for i in 0..self.n() {
            for t in 0..self.horizon() {
                let mut rec = vec![
                    i.to_string(),
                    (t + 1).to_string(),
                    self.treatment[i].to_string(),
                    self.outcomes[(i, t)].to_string(),
                ];
                if let Some(z) = &self.latent_states {
                    rec.push(z[(i, t)].to_string());
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(covariates_path)?;
        let mut header = vec!["id".to_string()];
        header.extend((1..=self.p()).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.covariates.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the two-file CSV layout. Individuals must be numbered `0..n` and
    /// every (id, t) pair must appear exactly once.
    pub fn read_csv(outcomes_path: &Path, covariates_path: &Path, state_count: Option<usize>) -> Result<Dataset> {
        let mut r = csv::Reader::from_path(covariates_path)?;
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let id = parse_field::<usize>(&rec, 0, "id")?;
            let xs = (1..rec.len())
                .map(|j| parse_field::<f64>(&rec, j, "x"))
                .collect::<Result<Vec<_>>>()?;
            rows.push((id, xs));
        }
        rows.sort_by_key(|r| r.0);
        let n = rows.len();
        if rows.iter().enumerate().any(|(i, r)| r.0 != i) {
            return invalid("covariate ids must be exactly 0..n");
        }
        let p = rows.first().map_or(0, |r| r.1.len());
        if rows.iter().any(|r| r.1.len() != p) {
            return invalid("ragged covariate rows");
        }
        let covariates = DMatrix::from_fn(n, p, |i, j| rows[i].1[j]);

        let mut r = csv::Reader::from_path(outcomes_path)?;
        let headers = r.headers()?.clone();
        let expected: Vec<&str> = headers.iter().collect();
        let has_z = match expected.as_slice() {
            ["id", "t", "T", "Y"] => false,
            ["id", "t", "T", "Y", "Z"] => true,
            other => return invalid(format!("unexpected outcome columns {other:?}")),
        };
        let mut obs: Vec<(usize, usize, u8, f64, usize)> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let z = if has_z { parse_field::<usize>(&rec, 4, "Z")? } else { 0 };
            obs.push((
                parse_field(&rec, 0, "id")?,
                parse_field(&rec, 1, "t")?,
                parse_field(&rec, 2, "T")?,
                parse_field(&rec, 3, "Y")?,
                z,
            ));
        }
        let horizon = obs.iter().map(|o| o.1).max().unwrap_or(0);
        if horizon == 0 || obs.len() != n * horizon {
            return invalid("outcome file must hold one row per (id, t) for t in 1..=horizon");
        }
        let mut outcomes = DMatrix::from_element(n, horizon, f64::NAN);
        let mut states = DMatrix::from_element(n, horizon, 0usize);
        let mut treatment: Vec<Option<u8>> = vec![None; n];
        for (id, t, tr, y, z) in obs {
            if id >= n || t == 0 {
                return invalid(format!("bad (id, t) = ({id}, {t})"));
            }
            match treatment[id] {
                Some(prev) if prev != tr => return invalid(format!("treatment varies over time for id {id}")),
                _ => treatment[id] = Some(tr),
            }
            outcomes[(id, t - 1)] = y;
            states[(id, t - 1)] = z;
        }
        let treatment = treatment
            .into_iter()
            .map(|t| t.ok_or_else(|| Error::InvalidArgument("individual without outcome rows".into())))
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset::new(covariates, treatment, outcomes)?;
        if has_z {
            let k = state_count.unwrap_or_else(|| states.iter().copied().max().unwrap_or(1));
            ds.with_latent_states(states, k)
        } else {
            Ok(ds)
        }
    }
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, name: &str) -> Result<T> {
    rec.get(idx)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::InvalidArgument(format!("cannot parse column {name} in record {rec:?}")))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndex {
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.70;

/// Uniformly random partition with `round(train_fraction * n)` training rows.
/// Both index lists come back sorted.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<SplitIndex> {
    split_n(ds.n(), train_fraction, seed)
}

pub fn split_n(n: usize, train_fraction: f64, seed: u64) -> Result<SplitIndex> {
    if n < 2 {
        return invalid(format!("need at least 2 individuals to split, got {n}"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return invalid(format!("train fraction {train_fraction} not in (0, 1)"));
    }
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return invalid(format!("fraction {train_fraction} leaves an empty side at n={n}"));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut train_ids = ids[..n_train].to_vec();
    let mut test_ids = ids[n_train..].to_vec();
    train_ids.sort_unstable();
    test_ids.sort_unstable();
    Ok(SplitIndex { train_ids, test_ids })
}

/// One-hot encoding of a 1-based state label.
pub fn one_hot_state(z: usize, k: usize) -> Result<Vec<f64>> {
    if z == 0 || z > k {
        return invalid(format!("state {z} outside 1..={k}"));
    }
    let mut v = vec![0.0; k];
    v[z - 1] = 1.0;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let x = DMatrix::from_fn(n, 2, |i, j| (i * 2 + j) as f64);
        let t = (0..n).map(|i| (i % 2) as u8).collect();
        let y = DMatrix::from_fn(n, 3, |i, t| (i + t) as f64 * 0.5);
        Dataset::new(x, t, y).unwrap()
    }

    #[test]
    fn split_sizes() {
        let s = split(&toy(10), 0.7, 3).unwrap();
        assert_eq!((s.train_ids.len(), s.test_ids.len()), (7, 3));
        let s = split_n(500, 0.7, 11).unwrap();
        assert_eq!((s.train_ids.len(), s.test_ids.len()), (350, 150));
    }

    #[test]
    fn split_deterministic() {
        let ds = toy(40);
        assert_eq!(split(&ds, 0.7, 42).unwrap(), split(&ds, 0.7, 42).unwrap());
        assert_ne!(split(&ds, 0.7, 42).unwrap(), split(&ds, 0.7, 43).unwrap());
    }

    #[test]
    fn split_rejects_degenerate() {
        assert!(split_n(1, 0.5, 0).is_err());
        assert!(split_n(10, 0.01, 0).is_err());
        assert!(split_n(10, 0.99, 0).is_err());
        assert!(split_n(10, 1.0, 0).is_err());
    }

    #[test]
    fn one_hot() {
        assert_eq!(one_hot_state(2, 3).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(one_hot_state(1, 1).unwrap(), vec![1.0]);
        assert_eq!(one_hot_state(3, 3).unwrap(), vec![0.0, 0.0, 1.0]);
        assert!(one_hot_state(0, 3).is_err());
        assert!(one_hot_state(4, 3).is_err());
    }

    #[test]
    fn constructor_rejects_bad_values() {
        let x = DMatrix::from_element(2, 1, 0.0);
        let y = DMatrix::from_element(2, 1, 0.0);
        assert!(Dataset::new(x.clone(), vec![0, 2], y.clone()).is_err());
        let mut y_bad = y.clone();
        y_bad[(1, 0)] = f64::NAN;
        assert!(Dataset::new(x.clone(), vec![0, 1], y_bad).is_err());
        let ds = Dataset::new(x, vec![0, 1], y).unwrap();
        assert!(ds.clone().with_latent_states(DMatrix::from_element(2, 1, 4), 3).is_err());
        assert!(ds.with_latent_states(DMatrix::from_element(2, 1, 0), 3).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy(6)
            .with_latent_states(DMatrix::from_fn(6, 3, |i, t| 1 + (i + t) % 3), 3)
            .unwrap();
        let (o, c) = (dir.path().join("y.csv"), dir.path().join("x.csv"));
        ds.write_csv(&o, &c).unwrap();
        let header = std::fs::read_to_string(&o).unwrap();
        assert!(header.starts_with("id,t,T,Y,Z\n"));
        let back = Dataset::read_csv(&o, &c, Some(3)).unwrap();
        assert_eq!(back, ds);
    }

    proptest::proptest! {
        #[test]
        fn split_is_partition(n in 2usize..300, frac in 0.05f64..0.95, seed in 0u64..1000) {
            if let Ok(s) = split_n(n, frac, seed) {
                let mut all: Vec<usize> = s.train_ids.iter().chain(&s.test_ids).copied().collect();
                all.sort_unstable();
                proptest::prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
        }
    }
}

//! Multi-graph convolutional next-step predictor.
//!
//! Each sample is one graph signal: a scalar value on each of `N` nodes.
//! Layer `l` maps `H ↦ act(Σ_v Â_v H W_{l,v} + 1 b_lᵀ)` where `Â_v` is the
//! self-loop-augmented, symmetrically normalised adjacency of view `v`.
//! Each task head reads out `Σ_{n,j} R[n,j] H_L[n,j] + Σ_n c_n s_n + b`, and
//! predictions are produced in standardised units and mapped back, plus an
//! optional per-sample offset supplied by the caller.
//!
//! Activations for a batch of `B` samples are stored as a `(B·N)×d` matrix
//! with row `b·N + n`. Each column is then an `N×B` block in column-major
//! order, so node mixing is a single product per channel.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct GraphSpec {
    pub node_count: usize,
    /// Raw symmetric, non-negative adjacencies with zero diagonal.
    pub adjacencies: Vec<DMatrix<f64>>,
}

impl GraphSpec {
    pub fn new(node_count: usize, adjacencies: Vec<DMatrix<f64>>) -> Result<Self> {
        if adjacencies.is_empty() {
            return invalid("at least one graph view is required");
        }
        for a in &adjacencies {
            if a.shape() != (node_count, node_count) {
                return invalid(format!("adjacency is {:?}, expected {node_count}x{node_count}", a.shape()));
            }
            for i in 0..node_count {
                if a[(i, i)] != 0.0 {
                    return invalid("adjacency diagonal must be zero");
                }
                for j in 0..node_count {
                    let v = a[(i, j)];
                    if !v.is_finite() || v < 0.0 || v != a[(j, i)] {
                        return invalid("adjacency must be finite, non-negative and symmetric");
                    }
                }
            }
        }
        Ok(Self { node_count, adjacencies })
    }

    /// Identity views: no edges, so each node only sees itself.
    pub fn isolated(node_count: usize, views: usize) -> Self {
        Self { node_count, adjacencies: vec![DMatrix::zeros(node_count, node_count); views.max(1)] }
    }

    pub fn views(&self) -> usize {
        self.adjacencies.len()
    }

    pub fn normalized(&self) -> Vec<DMatrix<f64>> {
        self.adjacencies.iter().map(normalize_adjacency).collect()
    }

    /// Relabels nodes: new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.node_count;
        let adjacencies = self.adjacencies.iter().map(|a| DMatrix::from_fn(n, n, |i, j| a[(perm[i], perm[j])])).collect();
        Self { node_count: n, adjacencies }
    }
}

/// `D^{-1/2}(A + I)D^{-1/2}` with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let aug = a + DMatrix::identity(n, n);
    let d: Vec<f64> = (0..n).map(|i| aug.row(i).sum().sqrt().recip()).collect();
    DMatrix::from_fn(n, n, |i, j| d[i] * aug[(i, j)] * d[j])
}

fn abs_correlation(rows: &[usize], signals: &DMatrix<f64>) -> DMatrix<f64> {
    let n = signals.ncols();
    let m = rows.len() as f64;
    let mut out = DMatrix::zeros(n, n);
    if rows.len() < 2 {
        return out;
    }
    let mean: Vec<f64> = (0..n).map(|j| rows.iter().map(|&r| signals[(r, j)]).sum::<f64>() / m).collect();
    let centered = DMatrix::from_fn(rows.len(), n, |r, j| signals[(rows[r], j)] - mean[j]);
    let cov = centered.tr_mul(&centered);
    for i in 0..n {
        for j in 0..n {
            let den = (cov[(i, i)] * cov[(j, j)]).sqrt();
            if i != j && den > 1e-12 * m {
                out[(i, j)] = (cov[(i, j)] / den).abs().min(1.0);
            }
        }
    }
    out
}

/// Absolute correlation graph across all rows, with entries below
/// `threshold` pruned. Constant nodes get no edges.
pub fn correlation_graph(signals: &DMatrix<f64>, threshold: f64) -> DMatrix<f64> {
    let rows: Vec<usize> = (0..signals.nrows()).collect();
    prune(abs_correlation(&rows, signals), threshold)
}

/// Size-weighted average of within-stratum absolute correlations, pruned.
pub fn stratified_correlation_graph(signals: &DMatrix<f64>, strata: &[usize], threshold: f64) -> Result<DMatrix<f64>> {
    if strata.len() != signals.nrows() {
        return invalid("one stratum label per signal row is required");
    }
    let n = signals.ncols();
    let mut labels: Vec<usize> = strata.to_vec();
    labels.sort_unstable();
    labels.dedup();
    let mut acc = DMatrix::zeros(n, n);
    let mut total = 0.0;
    for s in labels {
        let rows: Vec<usize> = (0..strata.len()).filter(|&r| strata[r] == s).collect();
        if rows.len() < 2 {
            continue;
        }
        acc += abs_correlation(&rows, signals) * rows.len() as f64;
        total += rows.len() as f64;
    }
    if total > 0.0 {
        acc /= total;
    }
    Ok(prune(acc, threshold))
}

fn prune(mut a: DMatrix<f64>, threshold: f64) -> DMatrix<f64> {
    a.apply(|v| {
        if *v < threshold {
            *v = 0.0
        }
    });
    a.fill_diagonal(0.0);
    a
}

/// Temporal view from correlations across all stacked (individual, time)
/// rows; state view from correlations within latent-state strata when
/// strata are supplied.
pub fn build_graphs(signals: &DMatrix<f64>, strata: Option<&[usize]>, threshold: f64) -> Result<GraphSpec> {
    if signals.nrows() == 0 {
        return invalid("cannot build graphs from an empty training set");
    }
    let mut views = vec![correlation_graph(signals, threshold)];
    if let Some(s) = strata {
        views.push(stratified_correlation_graph(signals, s, threshold)?);
    }
    GraphSpec::new(signals.ncols(), views)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - 2.0 / (1.0 + (2.0 * x).exp()),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn deriv_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MtgcnHyper {
    pub layers: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Stop once the relative loss decrease over an accepted step falls below this.
    pub tol: f64,
    pub heads: usize,
    pub seed: u64,
}

impl Default for MtgcnHyper {
    fn default() -> Self {
        Self { layers: 2, hidden: 16, activation: Activation::Tanh, learning_rate: 0.05, epochs: 100, tol: 1e-9, heads: 1, seed: 0 }
    }
}

/// Per-node input and per-head target standardisation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scaling {
    pub input_mean: Vec<f64>,
    pub input_sd: Vec<f64>,
    pub target_mean: f64,
    pub target_sd: f64,
}

impl Scaling {
    pub fn identity(nodes: usize) -> Self {
        Self { input_mean: vec![0.0; nodes], input_sd: vec![1.0; nodes], target_mean: 0.0, target_sd: 1.0 }
    }

    /// Statistics from training samples; targets are taken net of offsets.
    pub fn fit(samples: &Samples) -> Self {
        let (b, n) = samples.signals.shape();
        let bf = b.max(1) as f64;
        let mut input_mean = vec![0.0; n];
        let mut input_sd = vec![1.0; n];
        for j in 0..n {
            let col = samples.signals.column(j);
            let m = col.sum() / bf;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / bf;
            input_mean[j] = m;
            input_sd[j] = if v > 1e-24 { v.sqrt() } else { 1.0 };
        }
        let resid: Vec<f64> = (0..b)
            .flat_map(|i| (0..samples.targets.ncols()).map(move |h| (i, h)))
            .filter_map(|(i, h)| {
                let y = samples.targets[(i, h)];
                y.is_finite().then(|| y - samples.offset[i])
            })
            .collect();
        let (target_mean, target_sd) = if resid.is_empty() {
            (0.0, 1.0)
        } else {
            let m = resid.iter().sum::<f64>() / resid.len() as f64;
            let v = resid.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / resid.len() as f64;
            (m, if v > 1e-24 { v.sqrt() } else { 1.0 })
        };
        Self { input_mean, input_sd, target_mean, target_sd }
    }
}

/// Graph signals (B×N), targets (B×heads, NaN where unavailable) and
/// per-sample offsets added to every head's prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub signals: DMatrix<f64>,
    pub targets: DMatrix<f64>,
    pub offset: Vec<f64>,
}

impl Samples {
    pub fn new(signals: DMatrix<f64>, targets: DMatrix<f64>, offset: Option<Vec<f64>>) -> Result<Self> {
        let b = signals.nrows();
        if targets.nrows() != b {
            return invalid("signals and targets must have the same number of rows");
        }
        let offset = offset.unwrap_or_else(|| vec![0.0; b]);
        if offset.len() != b {
            return invalid("one offset per sample is required");
        }
        Ok(Self { signals, targets, offset })
    }

    pub fn len(&self) -> usize {
        self.signals.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.nrows() == 0
    }

    fn subset(&self, rows: &[usize]) -> Samples {
        Samples {
            signals: self.signals.select_rows(rows),
            targets: self.targets.select_rows(rows),
            offset: rows.iter().map(|&r| self.offset[r]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Layer {
    /// One `d_in × d_out` matrix per graph view.
    pub weights: Vec<DMatrix<f64>>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Head {
    pub readout: DMatrix<f64>,
    pub skip: DVector<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Params {
    pub layers: Vec<Layer>,
    pub heads: Vec<Head>,
}

impl Params {
    fn zeros_like(&self) -> Params {
        let mut p = self.clone();
        p.for_each_mut(|v| *v = 0.0);
        p
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for l in &mut self.layers {
            for w in &mut l.weights {
                w.iter_mut().for_each(&mut f);
            }
            l.bias.iter_mut().for_each(&mut f);
        }
        for h in &mut self.heads {
            h.readout.iter_mut().for_each(&mut f);
            h.skip.iter_mut().for_each(&mut f);
            f(&mut h.bias);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.clone().for_each_mut(|v| out.push(*v));
        out
    }

    pub fn assign(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        self.for_each_mut(|v| *v = *it.next().expect("parameter vector length"));
    }

    /// Index ranges of the flattened vector: one group per layer, then one
    /// for all heads.
    pub fn groups(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        let mut start = 0;
        for (i, l) in self.layers.iter().enumerate() {
            let len = l.weights.iter().map(|w| w.len()).sum::<usize>() + l.bias.len();
            out.push((format!("layer{}", i + 1), start..start + len));
            start += len;
        }
        let len: usize = self.heads.iter().map(|h| h.readout.len() + h.skip.len() + 1).sum();
        out.push(("readout".to_string(), start..start + len));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MtgcnModel {
    pub hyper: MtgcnHyper,
    pub node_count: usize,
    pub views: usize,
    pub params: Params,
    pub scaling: Scaling,
}

impl MtgcnModel {
    /// Glorot-uniform initialisation seeded from `hyper.seed`.
    pub fn new(node_count: usize, views: usize, hyper: MtgcnHyper, scaling: Scaling) -> Result<Self> {
        if node_count == 0 || views == 0 || hyper.hidden == 0 || hyper.heads == 0 {
            return invalid("node count, views, hidden width and heads must be positive");
        }
        if scaling.input_mean.len() != node_count || scaling.input_sd.len() != node_count {
            return invalid("scaling does not match node count");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let mut layers = Vec::with_capacity(hyper.layers);
        let mut d_in = 1;
        for _ in 0..hyper.layers {
            let bound = (6.0 / (d_in + hyper.hidden) as f64).sqrt();
            let weights = (0..views)
                .map(|_| DMatrix::from_fn(d_in, hyper.hidden, |_, _| rng.gen_range(-bound..bound)))
                .collect();
            layers.push(Layer { weights, bias: DVector::zeros(hyper.hidden) });
            d_in = hyper.hidden;
        }
        let bound = (6.0 / (node_count * d_in + 1) as f64).sqrt();
        let heads = (0..hyper.heads)
            .map(|_| Head {
                readout: DMatrix::from_fn(node_count, d_in, |_, _| rng.gen_range(-bound..bound)),
                skip: DVector::zeros(node_count),
                bias: 0.0,
            })
            .collect();
        Ok(Self { hyper, node_count, views, params: Params { layers, heads }, scaling })
    }

    fn check(&self, graphs: &GraphSpec, signals: &DMatrix<f64>) -> Result<()> {
        if graphs.node_count != self.node_count || graphs.views() != self.views {
            return invalid(format!(
                "model expects {} nodes and {} views, graphs have {} and {}",
                self.node_count,
                self.views,
                graphs.node_count,
                graphs.views()
            ));
        }
        if signals.ncols() != self.node_count {
            return invalid(format!("expected {} node signals, got {}", self.node_count, signals.ncols()));
        }
        Ok(())
    }

    fn standardize(&self, signals: &DMatrix<f64>) -> DMatrix<f64> {
        let s = &self.scaling;
        DMatrix::from_fn(signals.nrows(), signals.ncols(), |i, j| (signals[(i, j)] - s.input_mean[j]) / s.input_sd[j])
    }
}

/// Nonzero entries `(row, col, value)` of a normalised adjacency.
#[derive(Debug, Clone)]
struct SparseAdj {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SparseAdj {
    fn from_dense(a: &DMatrix<f64>) -> Self {
        let n = a.nrows();
        let entries = (0..n)
            .flat_map(|k| (0..n).map(move |i| (i, k)))
            .filter_map(|(i, k)| (a[(i, k)] != 0.0).then(|| (i, k, a[(i, k)])))
            .collect();
        Self { n, entries }
    }
}

fn sparse_views(graphs: &GraphSpec) -> Vec<SparseAdj> {
    graphs.normalized().iter().map(SparseAdj::from_dense).collect()
}

/// `out[:, j] = Â · m[:, j]` with each column viewed as an `N×B` block.
/// Column-major storage makes the whole matrix one `N×(B·d)` block, so the
/// product runs over consecutive length-`N` chunks.
fn node_mix(a: &SparseAdj, m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.n;
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (src, dst) in m.as_slice().chunks_exact(n).zip(out.as_mut_slice().chunks_exact_mut(n)) {
        for &(i, k, w) in &a.entries {
            dst[i] += w * src[k];
        }
    }
    out
}

struct Trace {
    /// Standardised input signals, B×N.
    input: DMatrix<f64>,
    /// Activations per layer including the input as `(B·N)×1`.
    acts: Vec<DMatrix<f64>>,
    /// Per layer, the mixed inputs `[Â_1 H | Â_2 H | …]`.
    mixed: Vec<DMatrix<f64>>,
    /// Standardised outputs, B×heads.
    out: DMatrix<f64>,
}

/// Views side by side: `[Â_1 m | Â_2 m | …]`.
fn mix_views(norm: &[SparseAdj], m: &DMatrix<f64>) -> DMatrix<f64> {
    let d = m.ncols();
    let mut out = DMatrix::zeros(m.nrows(), d * norm.len());
    for (v, a) in norm.iter().enumerate() {
        out.columns_mut(v * d, d).copy_from(&node_mix(a, m));
    }
    out
}

/// Per-view weights stacked vertically so one product covers every view.
fn stacked(weights: &[DMatrix<f64>]) -> DMatrix<f64> {
    let (d_in, d_out) = weights[0].shape();
    let mut out = DMatrix::zeros(d_in * weights.len(), d_out);
    for (v, w) in weights.iter().enumerate() {
        out.rows_mut(v * d_in, d_in).copy_from(w);
    }
    out
}

fn forward_trace(params: &Params, act: Activation, norm: &[SparseAdj], input: DMatrix<f64>) -> Trace {
    let (b, n) = input.shape();
    let h0 = DMatrix::from_column_slice(b * n, 1, input.transpose().as_slice());
    let mut acts = vec![h0];
    let mut mixed = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let c = mix_views(norm, acts.last().expect("input activation"));
        let mut s = &c * stacked(&layer.weights);
        for j in 0..s.ncols() {
            let bj = layer.bias[j];
            s.column_mut(j).apply(|v| *v = act.apply(*v + bj));
        }
        mixed.push(c);
        acts.push(s);
    }
    let hl = acts.last().expect("final activation");
    let mut out = DMatrix::zeros(b, params.heads.len());
    for (k, head) in params.heads.iter().enumerate() {
        for i in 0..b {
            let mut v = head.bias;
            for jcol in 0..hl.ncols() {
                let col = &hl.as_slice()[jcol * b * n + i * n..jcol * b * n + (i + 1) * n];
                v += col.iter().zip(head.readout.column(jcol).iter()).map(|(x, r)| x * r).sum::<f64>();
            }
            v += (0..n).map(|node| head.skip[node] * input[(i, node)]).sum::<f64>();
            out[(i, k)] = v;
        }
    }
    Trace { input, acts, mixed, out }
}

/// Predictions in original units, offsets included. Output is B×heads.
pub fn forward(model: &MtgcnModel, graphs: &GraphSpec, signals: &DMatrix<f64>, offset: Option<&[f64]>) -> Result<DMatrix<f64>> {
    model.check(graphs, signals)?;
    if let Some(o) = offset {
        if o.len() != signals.nrows() {
            return invalid("one offset per sample is required");
        }
    }
    let norm = sparse_views(graphs);
    let tr = forward_trace(&model.params, model.hyper.activation, &norm, model.standardize(signals));
    let s = &model.scaling;
    Ok(DMatrix::from_fn(tr.out.nrows(), tr.out.ncols(), |i, k| {
        tr.out[(i, k)] * s.target_sd + s.target_mean + offset.map_or(0.0, |o| o[i])
    }))
}

fn standardized_targets(model: &MtgcnModel, samples: &Samples) -> DMatrix<f64> {
    let s = &model.scaling;
    let heads = model.params.heads.len();
    DMatrix::from_fn(samples.len(), heads, |i, k| {
        let y = if k < samples.targets.ncols() { samples.targets[(i, k)] } else { f64::NAN };
        (y - samples.offset[i] - s.target_mean) / s.target_sd
    })
}

/// Mean squared error in standardised units, and its gradient.
fn loss_and_grad(model: &MtgcnModel, norm: &[SparseAdj], samples: &Samples, want_grad: bool) -> (f64, Option<Params>) {
    let params = &model.params;
    let act = model.hyper.activation;
    let n = model.node_count;
    let tr = forward_trace(params, act, norm, model.standardize(&samples.signals));
    let y = standardized_targets(model, samples);
    let b = samples.len();
    let mut count = 0usize;
    let mut sse = 0.0;
    let mut resid = DMatrix::zeros(b, params.heads.len());
    for i in 0..b {
        for k in 0..params.heads.len() {
            if y[(i, k)].is_finite() {
                let r = tr.out[(i, k)] - y[(i, k)];
                resid[(i, k)] = r;
                sse += r * r;
                count += 1;
            }
        }
    }
    let loss = if count == 0 { 0.0 } else { sse / count as f64 };
    if !want_grad {
        return (loss, None);
    }
    let mut grad = params.zeros_like();
    if count == 0 {
        return (loss, Some(grad));
    }
    let g_out = resid * (2.0 / count as f64);
    let hl = tr.acts.last().expect("final activation");
    let width = hl.ncols();
    let mut d_h = DMatrix::zeros(b * n, width);
    for (k, head) in params.heads.iter().enumerate() {
        let gh = &mut grad.heads[k];
        for i in 0..b {
            let g = g_out[(i, k)];
            if g == 0.0 {
                continue;
            }
            gh.bias += g;
            for node in 0..n {
                gh.skip[node] += g * tr.input[(i, node)];
                for j in 0..width {
                    gh.readout[(node, j)] += g * hl[(i * n + node, j)];
                    d_h[(i * n + node, j)] += g * head.readout[(node, j)];
                }
            }
        }
    }
    for l in (0..params.layers.len()).rev() {
        let out = &tr.acts[l + 1];
        let d_in = tr.acts[l].ncols();
        let mut d_s = d_h;
        d_s.zip_apply(out, |d, o| *d *= act.deriv_from_output(o));
        for j in 0..d_s.ncols() {
            grad.layers[l].bias[j] = d_s.column(j).sum();
        }
        let d_w = tr.mixed[l].tr_mul(&d_s);
        let d_c = &d_s * stacked(&params.layers[l].weights).transpose();
        let mut d_prev = DMatrix::zeros(tr.acts[l].nrows(), d_in);
        for (v, a) in norm.iter().enumerate() {
            grad.layers[l].weights[v] = d_w.rows(v * d_in, d_in).into_owned();
            d_prev += node_mix(a, &d_c.columns(v * d_in, d_in).into_owned());
        }
        d_h = d_prev;
    }
    (loss, Some(grad))
}

/// Training loss (standardised units) at the current parameters.
pub fn loss(model: &MtgcnModel, graphs: &GraphSpec, samples: &Samples) -> Result<f64> {
    model.check(graphs, &samples.signals)?;
    Ok(loss_and_grad(model, &sparse_views(graphs), samples, false).0)
}

/// Analytic gradient of [`loss`], flattened in [`Params::flatten`] order.
pub fn gradient(model: &MtgcnModel, graphs: &GraphSpec, samples: &Samples) -> Result<Vec<f64>> {
    model.check(graphs, &samples.signals)?;
    Ok(loss_and_grad(model, &sparse_views(graphs), samples, true).1.expect("gradient requested").flatten())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    /// Worst relative error per parameter group.
    pub groups: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub probes: usize,
}

/// Compares the analytic gradient with central differences at
/// `probes_per_group` random coordinates of every layer and of the readout.
/// Relative error is `|a − f| / max(|a|, |f|, 1e-6)`.
pub fn gradient_check(model: &MtgcnModel, graphs: &GraphSpec, samples: &Samples, probes_per_group: usize, h: f64, seed: u64) -> Result<GradCheck> {
    model.check(graphs, &samples.signals)?;
    let norm = sparse_views(graphs);
    let analytic = loss_and_grad(model, &norm, samples, true).1.expect("gradient requested").flatten();
    let base = model.params.flatten();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut groups = Vec::new();
    let mut probes = 0;
    for (name, range) in model.params.groups() {
        let mut worst: f64 = 0.0;
        for _ in 0..probes_per_group {
            let idx = rng.gen_range(range.clone());
            let mut theta = base.clone();
            theta[idx] = base[idx] + h;
            probe.params.assign(&theta);
            let up = loss_and_grad(&probe, &norm, samples, false).0;
            theta[idx] = base[idx] - h;
            probe.params.assign(&theta);
            let down = loss_and_grad(&probe, &norm, samples, false).0;
            let fd = (up - down) / (2.0 * h);
            let a = analytic[idx];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
            probes += 1;
        }
        groups.push((name, worst));
    }
    let max_rel_error = groups.iter().map(|g| g.1).fold(0.0, f64::max);
    Ok(GradCheck { groups, max_rel_error, probes })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// Loss before training, then after every accepted step.
    pub loss_trace: Vec<f64>,
    pub epochs: usize,
    pub rejected_steps: usize,
    pub final_learning_rate: f64,
    pub grad_check: GradCheck,
}

const GRAD_CHECK_TOL: f64 = 1e-4;
const GRAD_CHECK_ROWS: usize = 64;

/// Full-batch gradient descent with step-size control: a step that raises
/// the loss is rejected and the rate halved; an accepted step grows the rate
/// by 5%. The analytic gradient is checked against finite differences on a
/// subsample before any update.
pub fn train(model: &mut MtgcnModel, graphs: &GraphSpec, samples: &Samples) -> Result<TrainReport> {
    model.check(graphs, &samples.signals)?;
    if samples.is_empty() {
        return invalid("no training samples");
    }
    let check_rows: Vec<usize> = (0..samples.len().min(GRAD_CHECK_ROWS)).collect();
    let grad_check = gradient_check(model, graphs, &samples.subset(&check_rows), 20, 1e-5, model.hyper.seed ^ 0x9e37)?;
    if grad_check.max_rel_error >= GRAD_CHECK_TOL {
        return Err(Error::Estimation(format!(
            "gradient self-check failed: relative error {:.3e}",
            grad_check.max_rel_error
        )));
    }
    let norm = sparse_views(graphs);
    let (mut current, mut grad) = loss_and_grad(model, &norm, samples, true);
    let mut trace = vec![current];
    let mut lr = model.hyper.learning_rate;
    let mut rejected = 0;
    let mut epochs = 0;
    let mut theta = model.params.flatten();
    let mut trial = model.clone();
    while epochs < model.hyper.epochs {
        let g = grad.as_ref().expect("gradient requested").flatten();
        let step: Vec<f64> = theta.iter().zip(&g).map(|(t, g)| t - lr * g).collect();
        trial.params.assign(&step);
        let (candidate, cand_grad) = loss_and_grad(&trial, &norm, samples, true);
        if !candidate.is_finite() || candidate > 1e6 {
            if lr < 1e-12 {
                return Err(Error::Divergence(format!("loss {candidate} at epoch {epochs}")));
            }
            lr *= 0.5;
            rejected += 1;
            continue;
        }
        if candidate > current {
            lr *= 0.5;
            rejected += 1;
            if lr < 1e-14 {
                break;
            }
            continue;
        }
        epochs += 1;
        let improvement = (current - candidate) / current.max(1e-300);
        theta = step;
        current = candidate;
        grad = cand_grad;
        trace.push(current);
        lr *= 1.05;
        if improvement < model.hyper.tol {
            break;
        }
    }
    model.params.assign(&theta);
    Ok(TrainReport { loss_trace: trace, epochs, rejected_steps: rejected, final_learning_rate: lr, grad_check })
}

/// Root mean squared error of head 0 in original units.
pub fn predictive_error(model: &MtgcnModel, graphs: &GraphSpec, samples: &Samples) -> Result<f64> {
    if samples.is_empty() {
        return invalid("no evaluation samples");
    }
    let pred = forward(model, graphs, &samples.signals, Some(&samples.offset))?;
    rmse(pred.column(0).iter().copied(), samples.targets.column(0).iter().copied())
}

/// RMSE over pairs whose target is finite.
pub fn rmse(pred: impl IntoIterator<Item = f64>, target: impl IntoIterator<Item = f64>) -> Result<f64> {
    let mut sse = 0.0;
    let mut count = 0usize;
    for (p, y) in pred.into_iter().zip(target) {
        if y.is_finite() {
            sse += (p - y) * (p - y);
            count += 1;
        }
    }
    if count == 0 {
        return invalid("no evaluation targets");
    }
    Ok((sse / count as f64).sqrt())
}

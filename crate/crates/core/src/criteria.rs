//! Importance criteria over prunable units, with window means and an EMA across pruning steps.
//!
//! Score vectors are indexed like [`NetworkGraph::prunable_units`].

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::Unit;
use crate::graph::{GateId, NetworkGraph, NodeId, Op};
use crate::tensor::{Scalar, Tensor};

/// EMA coefficient applied across pruning iterations.
pub const EMA_MOMENTUM: f64 = 0.9;

/// Default central-difference step on unit-valued gates.
pub const FD_STEP: f64 = 1e-3;

pub type Batch<T> = (Tensor<T>, Vec<usize>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Oracle,
    TaylorSo,
    TaylorFo,
    /// First-order gate criterion from per-sample gradients.
    TaylorFoFg,
    TaylorFoWeightGroup,
    TaylorFoWeightSum,
    Obd,
    WeightMagnitude,
    BnScale,
    TaylorOutput,
    Random,
}

impl Criterion {
    pub const ALL: [Criterion; 11] = [
        Criterion::Oracle,
        Criterion::TaylorSo,
        Criterion::TaylorFo,
        Criterion::TaylorFoFg,
        Criterion::TaylorFoWeightGroup,
        Criterion::TaylorFoWeightSum,
        Criterion::Obd,
        Criterion::WeightMagnitude,
        Criterion::BnScale,
        Criterion::TaylorOutput,
        Criterion::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Oracle => "oracle",
            Criterion::TaylorSo => "taylor_so",
            Criterion::TaylorFo => "taylor_fo",
            Criterion::TaylorFoFg => "taylor_fo_fg",
            Criterion::TaylorFoWeightGroup => "taylor_fo_weight_group",
            Criterion::TaylorFoWeightSum => "taylor_fo_weight_sum",
            Criterion::Obd => "obd",
            Criterion::WeightMagnitude => "weight_magnitude",
            Criterion::BnScale => "bn_scale",
            Criterion::TaylorOutput => "taylor_output",
            Criterion::Random => "random",
        }
    }

    /// Accumulated from every training backward pass.
    pub fn is_per_batch(self) -> bool {
        matches!(
            self,
            Criterion::TaylorFo
                | Criterion::TaylorFoFg
                | Criterion::TaylorFoWeightGroup
                | Criterion::TaylorFoWeightSum
                | Criterion::TaylorOutput
        )
    }

    /// Needs the Hessian diagonal on the window's batches.
    pub fn is_second_order(self) -> bool {
        matches!(self, Criterion::TaylorSo | Criterion::Obd)
    }

    /// Averaged over minibatches and smoothed by the EMA; the rest use current values.
    pub fn is_gradient_based(self) -> bool {
        self.is_per_batch() || self.is_second_order()
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown criterion `{s}`")))
    }
}

/// Per-unit scores with a running window mean and an EMA across windows.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    pub criterion: Criterion,
    pub units: Vec<Unit>,
    sum: Vec<f64>,
    /// Accumulations in the open window.
    pub n_batches: usize,
    /// Mean of the last closed window.
    pub window_mean: Vec<f64>,
    pub ema: Option<Vec<f64>>,
    /// Closed windows so far.
    pub iteration: usize,
}

impl ImportanceTable {
    pub fn new(criterion: Criterion, units: Vec<Unit>) -> Self {
        let n = units.len();
        ImportanceTable {
            criterion,
            units,
            sum: vec![0.0; n],
            n_batches: 0,
            window_mean: vec![0.0; n],
            ema: None,
            iteration: 0,
        }
    }

    pub fn for_graph<T: Scalar>(criterion: Criterion, graph: &NetworkGraph<T>) -> Self {
        Self::new(criterion, graph.prunable_units())
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn accumulate(&mut self, scores: &[f64]) -> Result<()> {
        if scores.len() != self.units.len() {
            return Err(Error::shape(
                "ImportanceTable::accumulate",
                &[self.units.len()],
                &[scores.len()],
            ));
        }
        for (s, &v) in self.sum.iter_mut().zip(scores) {
            *s += v;
        }
        self.n_batches += 1;
        Ok(())
    }

    /// Mean over the open window.
    pub fn running_mean(&self) -> Vec<f64> {
        let n = self.n_batches.max(1) as f64;
        self.sum.iter().map(|s| s / n).collect()
    }

    /// Closes the window: stores its mean and folds it into the EMA (initialized to the first window mean).
    pub fn end_window(&mut self) -> Result<()> {
        if self.n_batches == 0 {
            return Err(Error::InvalidArgument(format!(
                "{} window is empty",
                self.criterion
            )));
        }
        let mut mean = self.running_mean();
        if self.criterion == Criterion::TaylorOutput {
            normalize_per_gate(&self.units, &mut mean);
        }
        self.ema = Some(match self.ema.take() {
            None => mean.clone(),
            // e + (1 - b)(m - e) == b e + (1 - b) m, and stays exactly e when m == e
            Some(prev) => prev
                .iter()
                .zip(&mean)
                .map(|(&e, &m)| e + (1.0 - EMA_MOMENTUM) * (m - e))
                .collect(),
        });
        self.window_mean = mean;
        self.sum.iter_mut().for_each(|s| *s = 0.0);
        self.n_batches = 0;
        self.iteration += 1;
        Ok(())
    }

    /// One-shot window holding `scores`.
    pub fn set_window(&mut self, scores: &[f64]) -> Result<()> {
        self.sum.iter_mut().for_each(|s| *s = 0.0);
        self.n_batches = 0;
        self.accumulate(scores)?;
        self.end_window()
    }

    /// Scores used for ranking: the EMA when requested and available, else the last window mean.
    pub fn scores(&self, use_ema: bool) -> &[f64] {
        match (&self.ema, use_ema) {
            (Some(e), true) => e,
            _ => &self.window_mean,
        }
    }

    pub fn score(&self, unit: Unit, use_ema: bool) -> Option<f64> {
        self.units
            .iter()
            .position(|&u| u == unit)
            .map(|i| self.scores(use_ema)[i])
    }

    /// Appends CSV rows `(iteration, gate_id, channel, criterion, window_mean, ema)`.
    pub fn write_csv_rows<W: Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        for (i, u) in self.units.iter().enumerate() {
            let ema = self.ema.as_ref().map_or(f64::NAN, |e| e[i]);
            w.serialize(ImportanceRow {
                iteration: self.iteration,
                gate_id: u.gate,
                channel: u.channel,
                criterion: self.criterion.name().to_string(),
                window_mean: self.window_mean[i],
                ema,
            })?;
        }
        Ok(())
    }
}

/// One row of the importance CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub iteration: usize,
    pub gate_id: usize,
    pub channel: usize,
    pub criterion: String,
    pub window_mean: f64,
    pub ema: f64,
}

/// Writes the tables to `path` with a header row.
pub fn write_importance_csv(path: &Path, tables: &[&ImportanceTable]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for t in tables {
        t.write_csv_rows(&mut w)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn normalize_per_gate(units: &[Unit], scores: &mut [f64]) {
    let gates = units.iter().map(|u| u.gate).max().map_or(0, |g| g + 1);
    let mut norms = vec![0.0f64; gates];
    for (u, &s) in units.iter().zip(scores.iter()) {
        norms[u.gate] += s * s;
    }
    for (u, s) in units.iter().zip(scores.iter_mut()) {
        let n = norms[u.gate].sqrt();
        if n > 0.0 {
            *s /= n;
        }
    }
}

fn require_gates<T: Scalar>(graph: &NetworkGraph<T>) -> Result<()> {
    if graph.gates().is_empty() {
        return Err(Error::Graph(
            "criterion needs gates; none are inserted".into(),
        ));
    }
    Ok(())
}

/// `(dE/dz_m)^2` from the last backward pass.
pub fn taylor_fo_gate<T: Scalar>(graph: &NetworkGraph<T>) -> Result<Vec<f64>> {
    require_gates(graph)?;
    Ok(graph
        .gates()
        .iter()
        .flat_map(|g| g.grad.iter().map(|v| v.to_f64c().powi(2)))
        .collect())
}

/// Mean over samples of the squared per-sample gate gradient (full-gradient mode).
pub fn taylor_fo_fg<T: Scalar>(graph: &NetworkGraph<T>) -> Result<Vec<f64>> {
    require_gates(graph)?;
    let mut out = Vec::new();
    for g in graph.gates() {
        let ps = g.per_sample_grad.as_ref().ok_or_else(|| {
            Error::InvalidArgument("full-gradient criterion needs full_gradient mode".into())
        })?;
        let c = g.channels();
        let n = ps.dim0() as f64;
        let mut acc = vec![0.0; c];
        for row in ps.data().chunks(c) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v.to_f64c().powi(2);
            }
        }
        out.extend(acc.into_iter().map(|a| a / n));
    }
    Ok(out)
}

/// `(sum_s g_s w_s)^2`.
pub fn group_contribution(w: &[f64], g: &[f64]) -> f64 {
    w.iter().zip(g).map(|(w, g)| w * g).sum::<f64>().powi(2)
}

/// `sum_s (g_s w_s)^2`.
pub fn individual_contribution(w: &[f64], g: &[f64]) -> f64 {
    w.iter().zip(g).map(|(w, g)| (w * g).powi(2)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Group,
    IndividualSum,
}

/// Weights and gradients of output channel `c` of every filter behind `gate` (weights then bias).
fn filter_slices<T: Scalar>(
    graph: &NetworkGraph<T>,
    gate: GateId,
    c: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut w = Vec::new();
    let mut g = Vec::new();
    for &f in &graph.gate(gate).filters {
        let (Op::Conv2d { weight, bias, .. } | Op::Linear { weight, bias, .. }) = graph.node(f).op
        else {
            continue;
        };
        let wp = graph.param(weight);
        let row = wp.value.row_len();
        w.extend(
            wp.value.data()[c * row..(c + 1) * row]
                .iter()
                .map(|v| v.to_f64c()),
        );
        g.extend(
            wp.grad.data()[c * row..(c + 1) * row]
                .iter()
                .map(|v| v.to_f64c()),
        );
        w.push(graph.param(bias).value.data()[c].to_f64c());
        g.push(graph.param(bias).grad.data()[c].to_f64c());
    }
    (w, g)
}

/// Weight-space first-order score of each gated filter, from the last backward pass.
pub fn taylor_fo_weight<T: Scalar>(
    graph: &NetworkGraph<T>,
    aggregation: Aggregation,
) -> Result<Vec<f64>> {
    require_gates(graph)?;
    Ok(graph
        .prunable_units()
        .into_iter()
        .map(|u| {
            let (w, g) = filter_slices(graph, u.gate, u.channel);
            match aggregation {
                Aggregation::Group => group_contribution(&w, &g),
                Aggregation::IndividualSum => individual_contribution(&w, &g),
            }
        })
        .collect())
}

/// `(g - H/2)^2`: the squared second-order estimate of the loss change for `z: 1 -> 0`.
pub fn taylor_so_score(g: f64, h: f64) -> f64 {
    (g - 0.5 * h).powi(2)
}

/// Window-mean second-order scores from per-batch gate gradients and a diagonal Hessian.
pub fn taylor_so_gate(batch_grads: &[Vec<f64>], hdiag: &HessianDiag) -> Result<Vec<f64>> {
    let n = hdiag.values.len();
    if batch_grads.is_empty() {
        return Err(Error::InvalidArgument(
            "second-order scores need at least one batch".into(),
        ));
    }
    let mut out = vec![0.0; n];
    for g in batch_grads {
        if g.len() != n {
            return Err(Error::InvalidArgument(format!(
                "Hessian diagonal has {n} entries, gradients {}",
                g.len()
            )));
        }
        for ((o, &g), &h) in out.iter_mut().zip(g).zip(&hdiag.values) {
            *o += taylor_so_score(g, h);
        }
    }
    let b = batch_grads.len() as f64;
    Ok(out.into_iter().map(|v| v / b).collect())
}

/// OBD saliency on unit gates: `H/2`, or its square.
pub fn obd(hdiag: &HessianDiag, signed: bool) -> Vec<f64> {
    hdiag
        .values
        .iter()
        .map(|&h| if signed { 0.5 * h } else { (0.5 * h).powi(2) })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMethod {
    FdOfGrad,
    DoubleBackward,
}

/// Diagonal of the gate Hessian, averaged over a window of batches.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianDiag {
    pub units: Vec<Unit>,
    /// Zero for pruned units.
    pub values: Vec<f64>,
    pub method: HessianMethod,
}

/// Runs `f` with running-statistic updates disabled.
fn frozen<T: Scalar, R>(
    graph: &mut NetworkGraph<T>,
    f: impl FnOnce(&mut NetworkGraph<T>) -> Result<R>,
) -> Result<R> {
    let prev = graph.update_running_stats;
    graph.update_running_stats = false;
    let r = f(graph);
    graph.update_running_stats = prev;
    r
}

fn gate_grads<T: Scalar>(graph: &NetworkGraph<T>) -> Vec<f64> {
    graph
        .gates()
        .iter()
        .flat_map(|g| g.grad.iter().map(|v| v.to_f64c()))
        .collect()
}

/// Per-batch gate gradients and the window-mean Hessian diagonal, with running statistics frozen.
pub fn second_order_window<T: Scalar>(
    graph: &mut NetworkGraph<T>,
    batches: &[Batch<T>],
    method: HessianMethod,
    step: f64,
) -> Result<(Vec<Vec<f64>>, HessianDiag)> {
    require_gates(graph)?;
    if batches.is_empty() {
        return Err(Error::InvalidArgument("Hessian window is empty".into()));
    }
    frozen(graph, |graph| {
        let units = graph.prunable_units();
        let mut values = vec![0.0; units.len()];
        let mut grads = Vec::with_capacity(batches.len());
        // probing passes must not count as accumulated batches
        let accum: Vec<_> = graph.gates().iter().map(|g| g.accum.clone()).collect();
        for (x, y) in batches {
            graph.forward(x, y)?;
            graph.backward()?;
            grads.push(gate_grads(graph));
            for (i, u) in units.iter().enumerate() {
                if !graph.gate(u.gate).is_active(u.channel) {
                    continue;
                }
                let h = match method {
                    HessianMethod::DoubleBackward => {
                        graph.gate_hessian_diag_entry(u.gate, u.channel)?.to_f64c()
                    }
                    HessianMethod::FdOfGrad => fd_entry(graph, x, y, *u, step)?,
                };
                if !h.is_finite() {
                    return Err(Error::NonFinite {
                        layer: graph.gate(u.gate).name.clone(),
                    });
                }
                values[i] += h;
            }
        }
        for (g, a) in accum.into_iter().enumerate() {
            graph.gate_mut(g).accum = a;
        }
        let b = batches.len() as f64;
        values.iter_mut().for_each(|v| *v /= b);
        Ok((
            grads,
            HessianDiag {
                units,
                values,
                method,
            },
        ))
    })
}

/// Diagonal Hessian alone; see [`second_order_window`].
pub fn hessian_diag<T: Scalar>(
    graph: &mut NetworkGraph<T>,
    batches: &[Batch<T>],
    method: HessianMethod,
) -> Result<HessianDiag> {
    Ok(second_order_window(graph, batches, method, FD_STEP)?.1)
}

/// Central difference of dE/dz_m around the current gate value.
fn fd_entry<T: Scalar>(
    graph: &mut NetworkGraph<T>,
    x: &Tensor<T>,
    y: &[usize],
    u: Unit,
    step: f64,
) -> Result<f64> {
    let z0 = graph.gate(u.gate).z()[u.channel];
    let mut grad_at = |v: T| -> Result<f64> {
        graph.gate_mut(u.gate).z[u.channel] = v;
        graph.invalidate();
        graph.forward(x, y)?;
        graph.backward()?;
        Ok(graph.gate(u.gate).grad[u.channel].to_f64c())
    };
    let h = T::from_f64c(step);
    let plus = grad_at(z0 + h);
    let minus = plus.and_then(|p| grad_at(z0 - h).map(|m| (p, m)));
    graph.gate_mut(u.gate).z[u.channel] = z0;
    graph.invalidate();
    let (p, m) = minus?;
    // restore the cache of the unperturbed batch
    graph.forward(x, y)?;
    graph.backward()?;
    Ok((p - m) / (2.0 * step))
}

/// l2 norm of each gated filter's weights and bias.
pub fn weight_magnitude<T: Scalar>(graph: &NetworkGraph<T>) -> Result<Vec<f64>> {
    require_gates(graph)?;
    Ok(graph
        .prunable_units()
        .into_iter()
        .map(|u| {
            filter_slices(graph, u.gate, u.channel)
                .0
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// The batch norm whose channels a gate scales: the one in front of it, else the one right behind it.
fn gate_batchnorm<T: Scalar>(graph: &NetworkGraph<T>, gate: GateId) -> Option<NodeId> {
    let state = graph.gate(gate);
    if let Some(&b) = state.bns.first() {
        return Some(b);
    }
    let node = *graph.gate_nodes(gate).first()?;
    graph
        .consumers(node)
        .into_iter()
        .find(|&c| matches!(graph.node(c).op, Op::BatchNorm { .. }))
}

/// `|gamma_m|` of the batch norm attached to each gate.
pub fn bn_scale<T: Scalar>(graph: &NetworkGraph<T>) -> Result<Vec<f64>> {
    require_gates(graph)?;
    let mut out = Vec::new();
    for (g, state) in graph.gates().iter().enumerate() {
        let bn = gate_batchnorm(graph, g).ok_or_else(|| {
            Error::Graph(format!(
                "gate `{}` has no batch norm for the bn_scale criterion",
                state.name
            ))
        })?;
        let Op::BatchNorm { gamma, .. } = graph.node(bn).op else {
            unreachable!()
        };
        out.extend(
            graph
                .param(gamma)
                .value
                .data()
                .iter()
                .map(|v| v.to_f64c().abs()),
        );
    }
    Ok(out)
}

/// Per-batch mean over samples of `|mean_hw(a * dE_i/da)|` at each gate's output.
///
/// The per-layer l2 rescaling happens when the window closes.
pub fn taylor_output<T: Scalar>(graph: &NetworkGraph<T>) -> Result<Vec<f64>> {
    require_gates(graph)?;
    let mut out = Vec::new();
    for g in 0..graph.gates().len() {
        let c = graph.gate(g).channels();
        let mut acc = vec![0.0; c];
        let mut per_sample: Option<Vec<f64>> = None;
        for node in graph.gate_nodes(g) {
            let a = graph.activation(node).ok_or(Error::NoForward)?;
            let d = graph.adjoint(node).ok_or_else(|| {
                Error::InvalidArgument("taylor_output needs backward first".into())
            })?;
            let n = a.dim0();
            let hw = a.row_len() / c;
            let ps = per_sample.get_or_insert_with(|| vec![0.0; n * c]);
            for (i, v) in ps.iter_mut().enumerate() {
                let base = i * hw;
                let s: f64 = (base..base + hw)
                    .map(|k| a.data()[k].to_f64c() * d.data()[k].to_f64c())
                    .sum();
                // adjoints are of the batch mean; scale back to per-sample derivatives
                *v += s * n as f64 / hw as f64;
            }
        }
        if let Some(ps) = per_sample {
            let n = ps.len() / c;
            for row in ps.chunks(c) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v.abs() / n as f64;
                }
            }
        }
        out.extend(acc);
    }
    Ok(out)
}

/// Seeded uniform scores in `[0, 1)`.
pub fn random_scores(n_units: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_units).map(|_| rng.random::<f64>()).collect()
}

/// Relative deviation `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        d / s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BnDecompositionReport {
    /// No gate sits directly behind a batch norm.
    pub skipped: bool,
    pub units_checked: usize,
    pub max_rel_dev: f64,
}

/// Compares each after-BN gate score with `(gamma dE/dgamma + beta dE/dbeta)^2` from the last backward pass.
pub fn bn_gate_decomposition_check<T: Scalar>(
    graph: &NetworkGraph<T>,
) -> Result<BnDecompositionReport> {
    let mut checked = 0;
    let mut worst = 0.0f64;
    for state in graph.gates() {
        let [bn] = state.bns[..] else { continue };
        let Op::BatchNorm { gamma, beta, .. } = graph.node(bn).op else {
            continue;
        };
        let (gp, bp) = (graph.param(gamma), graph.param(beta));
        for c in 0..state.channels() {
            let gate = state.grad[c].to_f64c().powi(2);
            let decomposed = (gp.value.data()[c].to_f64c() * gp.grad.data()[c].to_f64c()
                + bp.value.data()[c].to_f64c() * bp.grad.data()[c].to_f64c())
            .powi(2);
            worst = worst.max(rel_err(gate, decomposed));
            checked += 1;
        }
    }
    Ok(BnDecompositionReport {
        skipped: checked == 0,
        units_checked: checked,
        max_rel_dev: worst,
    })
}

/// Per-gate statistics of per-sample gate gradients `h`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FisherGate {
    pub gate: String,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub second_moment: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FisherReport {
    pub gates: Vec<FisherGate>,
    pub samples: usize,
    /// max over units of `|E(h^2) - (Var + mean^2)| / E(h^2)`.
    pub max_identity_dev: f64,
    /// mean over units of `mean^2 / E(h^2)`.
    pub mean_sq_ratio: f64,
}

/// Sample mean, variance and second moment of per-sample gate gradients over a window.
pub fn fisher_diagnostic<T: Scalar>(
    graph: &mut NetworkGraph<T>,
    batches: &[Batch<T>],
) -> Result<FisherReport> {
    require_gates(graph)?;
    if !graph.full_gradient {
        return Err(Error::InvalidArgument(
            "fisher diagnostic needs full_gradient mode".into(),
        ));
    }
    let rows: Vec<Vec<Vec<f64>>> = frozen(graph, |graph| {
        let mut per_gate: Vec<Vec<Vec<f64>>> = vec![Vec::new(); graph.gates().len()];
        for (x, y) in batches {
            graph.forward(x, y)?;
            graph.backward()?;
            for (g, state) in graph.gates().iter().enumerate() {
                let ps = state.per_sample_grad.as_ref().expect("full-gradient mode");
                per_gate[g].extend(
                    ps.data()
                        .chunks(state.channels())
                        .map(|r| r.iter().map(|v| v.to_f64c()).collect()),
                );
            }
        }
        Ok(per_gate)
    })?;
    let mut gates = Vec::new();
    let mut worst = 0.0f64;
    let (mut ratio_sum, mut ratio_n) = (0.0, 0usize);
    let mut samples = 0;
    for (g, h) in rows.iter().enumerate() {
        let c = graph.gate(g).channels();
        let n = h.len() as f64;
        samples = h.len();
        let mean: Vec<f64> = (0..c)
            .map(|k| h.iter().map(|r| r[k]).sum::<f64>() / n)
            .collect();
        let variance: Vec<f64> = (0..c)
            .map(|k| h.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n)
            .collect();
        let second: Vec<f64> = (0..c)
            .map(|k| h.iter().map(|r| r[k] * r[k]).sum::<f64>() / n)
            .collect();
        for k in 0..c {
            if second[k] > 0.0 {
                worst =
                    worst.max((second[k] - (variance[k] + mean[k] * mean[k])).abs() / second[k]);
                ratio_sum += mean[k] * mean[k] / second[k];
                ratio_n += 1;
            }
        }
        gates.push(FisherGate {
            gate: graph.gate(g).name.clone(),
            mean,
            variance,
            second_moment: second,
        });
    }
    Ok(FisherReport {
        gates,
        samples,
        max_identity_dev: worst,
        mean_sq_ratio: if ratio_n > 0 {
            ratio_sum / ratio_n as f64
        } else {
            0.0
        },
    })
}

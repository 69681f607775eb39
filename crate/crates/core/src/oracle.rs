//! Ground-truth importance by direct loss evaluation.
//!
//! Every evaluation runs batch norm in eval mode with frozen parameters, so an
//! ablation is a pure function of the gate vector. Activations in front of the
//! ablated gate are cached per batch and only the suffix is recomputed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::criteria::Batch;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::gates::Unit;
use crate::graph::{GateId, Mode, NetworkGraph, NodeId, Snapshot};
use crate::kernels;
use crate::tensor::Scalar;

/// Default cap on `C(n, k)` for the combinatorial search.
pub const COMBINATORIAL_BUDGET: u128 = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleScores {
    /// Active units at evaluation time, in lexicographic order.
    pub units: Vec<Unit>,
    /// `E(z_m = 0) - E`.
    pub delta_loss: Vec<f64>,
    pub squared: Vec<f64>,
    pub baseline: f64,
    pub split: Split,
    pub n_batches: usize,
    /// Loss evaluations performed, baseline included.
    pub evaluations: usize,
}

impl OracleScores {
    /// Signed deltas laid out like `graph.prunable_units()`; pruned units get `+inf`.
    pub fn dense_signed(&self, all_units: &[Unit]) -> Vec<f64> {
        all_units
            .iter()
            .map(|u| match self.units.binary_search(u) {
                Ok(i) => self.delta_loss[i],
                Err(_) => f64::INFINITY,
            })
            .collect()
    }

    /// Writes `(unit, delta_loss, squared, split, n_batches)` rows; the `baseline` row holds the unablated loss.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let split = match self.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        w.serialize(OracleRow {
            unit: "baseline".into(),
            delta_loss: self.baseline,
            squared: 0.0,
            split: split.into(),
            n_batches: self.n_batches,
        })?;
        for (i, u) in self.units.iter().enumerate() {
            w.serialize(OracleRow {
                unit: u.to_string(),
                delta_loss: self.delta_loss[i],
                squared: self.squared[i],
                split: split.into(),
                n_batches: self.n_batches,
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub unit: String,
    pub delta_loss: f64,
    pub squared: f64,
    pub split: String,
    pub n_batches: usize,
}

/// Eval-mode loss evaluator over a fixed batch set.
pub struct Evaluator<'a, T: Scalar> {
    graph: NetworkGraph<T>,
    batches: &'a [Batch<T>],
    snaps: Vec<Snapshot<T>>,
    total: usize,
    pub evaluations: usize,
}

impl<'a, T: Scalar> Evaluator<'a, T> {
    pub fn new(graph: &NetworkGraph<T>, batches: &'a [Batch<T>]) -> Result<Self> {
        if batches.is_empty() {
            return Err(Error::InvalidArgument(
                "oracle needs at least one batch".into(),
            ));
        }
        let mut g = graph.clone();
        g.mode = Mode::Eval;
        g.invalidate();
        let total = batches.iter().map(|b| b.1.len()).sum();
        let mut ev = Evaluator {
            graph: g,
            batches,
            snaps: Vec::new(),
            total,
            evaluations: 0,
        };
        ev.refresh()?;
        Ok(ev)
    }

    pub fn graph(&self) -> &NetworkGraph<T> {
        &self.graph
    }

    /// Recaptures activations after a permanent gate change.
    fn refresh(&mut self) -> Result<()> {
        self.snaps = self
            .batches
            .iter()
            .map(|(x, _)| self.graph.snapshot(x))
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// Sample-weighted mean loss of the current gate vector; recomputes from `start`.
    fn loss_from(&mut self, start: NodeId) -> Result<f64> {
        self.evaluations += 1;
        let mut sum = 0.0;
        for (snap, (_, y)) in self.snaps.iter().zip(self.batches) {
            let logits = self.graph.predict_from(snap, start)?;
            let (loss, _) = kernels::softmax_xent_forward(&logits, y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    layer: "loss".into(),
                });
            }
            sum += loss.to_f64c() * y.len() as f64;
        }
        Ok(sum / self.total as f64)
    }

    pub fn baseline(&mut self) -> Result<f64> {
        let out = self.graph.output();
        self.loss_from(out + 1)
    }

    fn first_node(&self, gate: GateId) -> Result<NodeId> {
        self.graph
            .gate_nodes(gate)
            .first()
            .copied()
            .ok_or_else(|| Error::Graph(format!("gate {gate} is not placed in the graph")))
    }

    /// Loss with `units` zeroed; the gates are restored afterwards.
    pub fn loss_without(&mut self, units: &[Unit]) -> Result<f64> {
        let mut start = self.graph.output() + 1;
        for u in units {
            start = start.min(self.first_node(u.gate)?);
        }
        let old: Vec<T> = units
            .iter()
            .map(|u| self.graph.gate(u.gate).z()[u.channel])
            .collect();
        for u in units {
            self.graph.set_gate(u.gate, u.channel, false);
        }
        let loss = self.loss_from(start);
        for (u, v) in units.iter().zip(old) {
            self.graph.set_gate_value(u.gate, u.channel, v);
        }
        loss
    }

    /// Zeroes `unit` for good and refreshes the cached activations.
    pub fn remove(&mut self, unit: Unit) -> Result<()> {
        self.graph.set_gate(unit.gate, unit.channel, false);
        self.refresh()
    }
}

/// Signed and squared loss change of zeroing each active unit in turn.
pub fn ablation_scores<T: Scalar>(
    graph: &NetworkGraph<T>,
    batches: &[Batch<T>],
    split: Split,
) -> Result<OracleScores> {
    if graph.gates().is_empty() {
        return Err(Error::Graph("oracle needs gates; none are inserted".into()));
    }
    let pruned = graph.pruned_units();
    if !pruned.is_empty() {
        log::warn!("oracle skips {} already pruned units", pruned.len());
    }
    let mut ev = Evaluator::new(graph, batches)?;
    let baseline = ev.baseline()?;
    let units = graph.active_units();
    let mut delta = Vec::with_capacity(units.len());
    for &u in &units {
        delta.push(ev.loss_without(&[u])? - baseline);
    }
    Ok(OracleScores {
        squared: delta.iter().map(|d| d * d).collect(),
        units,
        delta_loss: delta,
        baseline,
        split,
        n_batches: batches.len(),
        evaluations: ev.evaluations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GreedyResult {
    pub order: Vec<Unit>,
    /// Loss after each removal.
    pub losses: Vec<f64>,
    pub baseline: f64,
    pub evaluations: usize,
}

/// Removes, `k` times, the candidate whose removal yields the lowest loss.
///
/// `candidates` defaults to every active unit. Each gate keeps one active channel.
pub fn greedy_oracle_prune<T: Scalar>(
    graph: &NetworkGraph<T>,
    batches: &[Batch<T>],
    k: usize,
    candidates: Option<&[Unit]>,
) -> Result<GreedyResult> {
    let mut ev = Evaluator::new(graph, batches)?;
    let mut pool: Vec<Unit> = match candidates {
        Some(c) => c
            .iter()
            .copied()
            .filter(|u| graph.gate(u.gate).is_active(u.channel))
            .collect(),
        None => graph.active_units(),
    };
    pool.sort_unstable();
    let mut active: Vec<usize> = graph.gates().iter().map(|g| g.active_count()).collect();
    let mut order = Vec::with_capacity(k);
    let mut losses = Vec::with_capacity(k);
    let mut baseline = f64::NAN;
    for step in 0..k {
        let b = ev.baseline()?;
        if step == 0 {
            baseline = b;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, &u) in pool.iter().enumerate() {
            if active[u.gate] <= 1 {
                continue;
            }
            let l = ev.loss_without(&[u])?;
            if best.is_none_or(|(_, bl)| l < bl) {
                best = Some((i, l));
            }
        }
        let Some((i, l)) = best else {
            return Err(Error::InvalidArgument(format!(
                "only {step} of {k} units can be removed"
            )));
        };
        let u = pool.remove(i);
        active[u.gate] -= 1;
        ev.remove(u)?;
        order.push(u);
        losses.push(l);
    }
    if k == 0 {
        baseline = ev.baseline()?;
    }
    Ok(GreedyResult {
        order,
        losses,
        baseline,
        evaluations: ev.evaluations,
    })
}

/// Binomial coefficient, saturating.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    r
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CombinatorialResult {
    /// Channels removed by the best mask, ascending.
    pub channels: Vec<usize>,
    pub loss: f64,
    pub masks_evaluated: u128,
}

/// Evaluates every way to remove `k` active channels of one gate and returns the best.
pub fn combinatorial_oracle<T: Scalar>(
    graph: &NetworkGraph<T>,
    batches: &[Batch<T>],
    gate: GateId,
    k: usize,
    budget: u128,
) -> Result<CombinatorialResult> {
    if gate >= graph.gates().len() {
        return Err(Error::InvalidArgument(format!(
            "gate {gate} does not exist"
        )));
    }
    let channels: Vec<usize> = (0..graph.gate(gate).channels())
        .filter(|&c| graph.gate(gate).is_active(c))
        .collect();
    let n = channels.len();
    if k >= n {
        return Err(Error::InvalidArgument(format!(
            "cannot remove {k} of {n} active channels; one must remain"
        )));
    }
    let count = binomial(n, k);
    if count > budget {
        return Err(Error::Budget {
            n,
            k,
            count,
            budget,
        });
    }
    let mut ev = Evaluator::new(graph, batches)?;
    if k == 0 {
        return Ok(CombinatorialResult {
            channels: vec![],
            loss: ev.baseline()?,
            masks_evaluated: 1,
        });
    }
    let mut idx: Vec<usize> = (0..k).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut evaluated = 0u128;
    loop {
        let units: Vec<Unit> = idx.iter().map(|&i| Unit::new(gate, channels[i])).collect();
        let l = ev.loss_without(&units)?;
        evaluated += 1;
        if best.as_ref().is_none_or(|(_, bl)| l < *bl) {
            best = Some((idx.iter().map(|&i| channels[i]).collect(), l));
        }
        // next combination in lexicographic order
        let Some(p) = (0..k).rev().find(|&p| idx[p] < n - k + p) else {
            break;
        };
        idx[p] += 1;
        for q in p + 1..k {
            idx[q] = idx[q - 1] + 1;
        }
    }
    let (channels, loss) = best.expect("at least one mask");
    Ok(CombinatorialResult {
        channels,
        loss,
        masks_evaluated: evaluated,
    })
}

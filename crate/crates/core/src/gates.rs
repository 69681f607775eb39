//! Gate insertion and enumeration of prunable units.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GateAccumulator, GateId, GateState, NetworkGraph, NodeId, Op, Placement};
use crate::tensor::Scalar;

/// One prunable output channel, identified by its gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Unit {
    pub gate: GateId,
    pub channel: usize,
}

impl Unit {
    pub fn new(gate: GateId, channel: usize) -> Self {
        Unit { gate, channel }
    }
}

impl std::fmt::Display for Unit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.gate, self.channel)
    }
}

impl<T: Scalar> NetworkGraph<T> {
    /// Every (gate, channel) pair, pruned or not, in lexicographic order.
    pub fn prunable_units(&self) -> Vec<Unit> {
        self.gates
            .iter()
            .enumerate()
            .flat_map(|(g, s)| (0..s.channels()).map(move |c| Unit::new(g, c)))
            .collect()
    }

    pub fn active_units(&self) -> Vec<Unit> {
        self.prunable_units()
            .into_iter()
            .filter(|u| self.gates[u.gate].is_active(u.channel))
            .collect()
    }

    pub fn pruned_units(&self) -> Vec<Unit> {
        self.prunable_units()
            .into_iter()
            .filter(|u| !self.gates[u.gate].is_active(u.channel))
            .collect()
    }

    pub fn has_batchnorm(&self) -> bool {
        self.nodes
            .iter()
            .any(|n| matches!(n.op, Op::BatchNorm { .. }))
    }

    fn gated_filters(&self) -> Vec<NodeId> {
        self.gates
            .iter()
            .filter(|g| g.placement != Placement::SkipConnection)
            .flat_map(|g| g.filters.iter().copied())
            .collect()
    }

    /// Walks back through channelwise ops to the conv/linear that produced `node`'s channels.
    pub(crate) fn producing_filter(&self, mut node: NodeId) -> Option<NodeId> {
        loop {
            let n = &self.nodes[node];
            if n.op.is_filter() {
                return Some(node);
            }
            if !n.op.is_channelwise() || n.inputs.len() != 1 {
                return None;
            }
            node = n.inputs[0];
        }
    }
}

pub(crate) fn new_gate<T: Scalar>(
    name: String,
    placement: Placement,
    channels: usize,
    filters: Vec<NodeId>,
    bns: Vec<NodeId>,
) -> GateState<T> {
    GateState {
        name,
        placement,
        z: vec![T::one(); channels],
        grad: vec![T::zero(); channels],
        per_sample_grad: None,
        filters,
        bns,
        accum: GateAccumulator::default(),
    }
}

/// Inserts multiplicative identity gates at `placement`.
///
/// `after_bn` gates every prunable filter behind its batch norm (or directly
/// behind the filter when no batch norm follows); `before_bn` and
/// `after_conv` gate directly behind the filter; `skip_connection` gates the
/// residual stream, with one gate shared by every position of equal width.
pub fn insert_gates<T: Scalar>(
    mut graph: NetworkGraph<T>,
    placement: Placement,
) -> Result<NetworkGraph<T>> {
    if matches!(placement, Placement::AfterBn | Placement::BeforeBn) && !graph.has_batchnorm() {
        return Err(Error::Graph(format!(
            "placement {placement} requires batch-norm layers"
        )));
    }
    if placement == Placement::SkipConnection {
        return insert_skip_gates(graph);
    }
    let already = graph.gated_filters();
    let filters: Vec<NodeId> = graph
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| {
            matches!(
                n.op,
                Op::Conv2d { prunable: true, .. } | Op::Linear { prunable: true, .. }
            )
        })
        .map(|(i, _)| i)
        .collect();
    if filters.is_empty() {
        return Err(Error::Graph("graph has no prunable layers".into()));
    }
    if let Some(&f) = filters.iter().find(|f| already.contains(f)) {
        return Err(Error::Graph(format!(
            "layer `{}` already has a gate",
            graph.nodes[f].name
        )));
    }
    // insert from the back so earlier ids stay valid; gates are numbered front to back
    let mut plan = Vec::new();
    for &f in &filters {
        let consumers = graph.consumers(f);
        let bn = match consumers.as_slice() {
            [c] if matches!(graph.nodes[*c].op, Op::BatchNorm { .. }) => Some(*c),
            _ => None,
        };
        let (target, bns) = match (placement, bn) {
            (Placement::AfterBn, Some(b)) => (b, vec![b]),
            _ => (f, vec![]),
        };
        plan.push((f, target, bns));
    }
    let first_gate = graph.gates.len();
    for (f, _, bns) in &plan {
        let name = graph.nodes[*f].name.clone();
        let channels = graph.nodes[*f].channels();
        graph.push_gate(new_gate(name, placement, channels, vec![*f], bns.clone()));
    }
    for (k, (_, target, _)) in plan.iter().enumerate().rev() {
        let gate = first_gate + k;
        let name = format!("{}.gate", graph.gates[gate].name);
        graph.insert_after(*target, name, Op::Gate { gate });
    }
    Ok(graph)
}

fn insert_skip_gates<T: Scalar>(mut graph: NetworkGraph<T>) -> Result<NetworkGraph<T>> {
    let adds: Vec<NodeId> = graph
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| matches!(n.op, Op::Add { .. }))
        .map(|(i, _)| i)
        .collect();
    if adds.is_empty() {
        return Err(Error::Graph(
            "skip_connection placement requires residual additions".into(),
        ));
    }
    if graph
        .gates
        .iter()
        .any(|g| g.placement == Placement::SkipConnection)
    {
        return Err(Error::Graph(
            "skip-connection gates already inserted".into(),
        ));
    }
    let mut positions: Vec<NodeId> = Vec::new();
    for &a in &adds {
        let lhs = graph.nodes[a].inputs[0];
        if !matches!(graph.nodes[lhs].op, Op::Add { .. }) && !positions.contains(&lhs) {
            positions.push(lhs);
        }
        positions.push(a);
    }
    positions.sort_unstable();
    // one gate per stream width, numbered by first appearance
    let mut by_width: BTreeMap<usize, GateId> = BTreeMap::new();
    let mut order = Vec::new();
    for &p in &positions {
        let w = graph.nodes[p].channels();
        if !by_width.contains_key(&w) {
            order.push(w);
            by_width.insert(w, usize::MAX);
        }
    }
    for &w in &order {
        let mut filters = Vec::new();
        for &p in &positions {
            if graph.nodes[p].channels() != w {
                continue;
            }
            let srcs: Vec<NodeId> = match graph.nodes[p].op {
                Op::Add { .. } => graph.nodes[p].inputs.clone(),
                _ => vec![p],
            };
            for s in srcs {
                if let Some(f) = graph.producing_filter(s) {
                    if !filters.contains(&f) {
                        filters.push(f);
                    }
                }
            }
        }
        filters.sort_unstable();
        let gate = graph.push_gate(new_gate(
            format!("skip{w}"),
            Placement::SkipConnection,
            w,
            filters,
            vec![],
        ));
        by_width.insert(w, gate);
    }
    let mut counts: BTreeMap<GateId, usize> = BTreeMap::new();
    let labelled: Vec<(NodeId, GateId, usize)> = positions
        .iter()
        .map(|&p| {
            let g = by_width[&graph.nodes[p].channels()];
            let k = counts.entry(g).or_insert(0);
            *k += 1;
            (p, g, *k - 1)
        })
        .collect();
    for &(p, gate, k) in labelled.iter().rev() {
        let name = format!("{}.gate{}", graph.gates[gate].name, k);
        graph.insert_after(p, name, Op::Gate { gate });
    }
    Ok(graph)
}

/// One recorded removal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub unit: Unit,
    pub iteration: usize,
    pub score: f64,
}

/// Units removed so far, in removal order, with per-gate active counts.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PruneMask {
    pub removed: Vec<Removal>,
    pub active_per_gate: Vec<usize>,
}

impl PruneMask {
    /// Mask reflecting the graph's currently zeroed gates.
    pub fn from_graph<T: Scalar>(graph: &NetworkGraph<T>) -> Self {
        PruneMask {
            removed: graph
                .pruned_units()
                .into_iter()
                .map(|unit| Removal {
                    unit,
                    iteration: 0,
                    score: f64::NAN,
                })
                .collect(),
            active_per_gate: graph.gates().iter().map(|g| g.active_count()).collect(),
        }
    }

    pub fn contains(&self, unit: Unit) -> bool {
        self.removed.iter().any(|r| r.unit == unit)
    }

    pub fn len(&self) -> usize {
        self.removed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.removed.is_empty()
    }

    pub fn units(&self) -> Vec<Unit> {
        self.removed.iter().map(|r| r.unit).collect()
    }

    /// Records a removal and zeroes the gate. Rejects duplicates and emptying a layer.
    pub fn apply<T: Scalar>(
        &mut self,
        graph: &mut NetworkGraph<T>,
        unit: Unit,
        iteration: usize,
        score: f64,
    ) -> Result<()> {
        if self.active_per_gate.len() != graph.gates().len() {
            self.active_per_gate = graph.gates().iter().map(|g| g.active_count()).collect();
        }
        if self.contains(unit) || !graph.gate(unit.gate).is_active(unit.channel) {
            return Err(Error::InvalidArgument(format!(
                "unit {unit} already pruned"
            )));
        }
        if self.active_per_gate[unit.gate] <= 1 {
            return Err(Error::InvalidArgument(format!(
                "unit {unit} is the last active channel of its layer"
            )));
        }
        graph.set_gate(unit.gate, unit.channel, false);
        self.active_per_gate[unit.gate] -= 1;
        self.removed.push(Removal {
            unit,
            iteration,
            score,
        });
        Ok(())
    }
}

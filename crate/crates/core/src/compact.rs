//! Physical removal of gated-off channels.
//!
//! A channel is kept when some consumer still reads it and it is not
//! identically zero. Per-channel layers keep the same set on input and output;
//! conv/linear layers slice both weight axes.

use crate::error::{Error, Result};
use crate::gates::PruneMask;
use crate::graph::{GateAccumulator, NetworkGraph, Node, Op, Parameter};
use crate::tensor::{Scalar, Tensor};

/// Per-node kept channels (or features, for flattened nodes).
///
/// With `strict`, rejects graphs that cannot be compacted exactly; otherwise
/// returns the analysis as is, which is what FLOP counting needs.
pub(crate) fn kept_channels<T: Scalar>(
    graph: &NetworkGraph<T>,
    strict: bool,
) -> Result<Vec<Vec<bool>>> {
    let nodes = graph.nodes();
    let n = nodes.len();
    // forward: channels that are identically zero for every input
    let mut dead: Vec<Vec<bool>> = Vec::with_capacity(n);
    for node in nodes {
        let c = node.channels();
        let d = match &node.op {
            Op::Input | Op::Conv2d { .. } | Op::Linear { .. } | Op::BatchNorm { .. } => {
                vec![false; c]
            }
            Op::Relu | Op::MaxPool2d { .. } | Op::GlobalAvgPool => dead[node.inputs[0]].clone(),
            Op::Gate { gate } => {
                let z = graph.gate(*gate).z();
                dead[node.inputs[0]]
                    .iter()
                    .zip(z)
                    .map(|(&d, &v)| d || v == T::zero())
                    .collect()
            }
            Op::Add { maps } => {
                let mut live = vec![false; c];
                for (slot, &src) in node.inputs.iter().enumerate() {
                    for (j, &dj) in dead[src].iter().enumerate() {
                        if !dj {
                            live[route(&maps[slot], j)] = true;
                        }
                    }
                }
                live.iter().map(|l| !l).collect()
            }
            Op::Flatten => {
                let src = &nodes[node.inputs[0]];
                let hw = src.shape[1..].iter().product::<usize>();
                (0..c).map(|f| dead[node.inputs[0]][f / hw]).collect()
            }
        };
        dead.push(d);
    }
    // backward: channels some consumer still reads
    let mut needed: Vec<Vec<bool>> = nodes.iter().map(|nd| vec![false; nd.channels()]).collect();
    let mut kept: Vec<Vec<bool>> = needed.clone();
    for id in (0..n).rev() {
        if id == graph.output() {
            needed[id] = vec![true; nodes[id].channels()];
        }
        kept[id] = if id == graph.output() || id == 0 {
            vec![true; nodes[id].channels()]
        } else {
            needed[id]
                .iter()
                .zip(&dead[id])
                .map(|(&nd, &d)| nd && !d)
                .collect()
        };
        let node = &nodes[id];
        match &node.op {
            Op::Input => {}
            Op::Conv2d { .. } | Op::Linear { .. } => {
                let src = node.inputs[0];
                for (c, need) in needed[src].iter_mut().enumerate() {
                    *need |= !dead[src][c];
                }
            }
            Op::Relu
            | Op::MaxPool2d { .. }
            | Op::BatchNorm { .. }
            | Op::Gate { .. }
            | Op::GlobalAvgPool => {
                let src = node.inputs[0];
                for (c, need) in needed[src].iter_mut().enumerate() {
                    *need |= kept[id][c];
                }
            }
            Op::Add { maps } => {
                for (slot, &src) in node.inputs.iter().enumerate() {
                    for j in 0..needed[src].len() {
                        needed[src][j] |= kept[id][route(&maps[slot], j)] && !dead[src][j];
                    }
                }
            }
            Op::Flatten => {
                let src = node.inputs[0];
                let hw = nodes[src].shape[1..].iter().product::<usize>();
                for (f, &k) in kept[id].iter().enumerate() {
                    needed[src][f / hw] |= k;
                }
            }
        }
    }
    if !strict {
        return Ok(kept);
    }
    // per-channel layers must keep matching sets on both sides
    for (id, node) in nodes.iter().enumerate() {
        if node.op.is_channelwise() {
            let src = node.inputs[0];
            if kept[src] != kept[id] {
                return Err(Error::Unsupported(format!(
                    "layer `{}` produces a nonzero constant on a removed channel and cannot be compacted",
                    node.name
                )));
            }
        }
        if id != 0 && !kept[id].iter().any(|&k| k) {
            return Err(Error::Graph(format!(
                "compaction would leave layer `{}` with zero channels",
                node.name
            )));
        }
    }
    Ok(kept)
}

fn route(map: &Option<Vec<usize>>, j: usize) -> usize {
    map.as_ref().map_or(j, |m| m[j])
}

fn indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter(|(_, &k)| k)
        .map(|(i, _)| i)
        .collect()
}

/// Slices axis 0 and, when given, axis 1 of `t`.
fn slice2<T: Scalar>(t: &Tensor<T>, rows: &[usize], cols: Option<&[usize]>) -> Tensor<T> {
    let shape = t.shape();
    let inner: usize = shape.iter().skip(2).product();
    let ncols = if shape.len() > 1 { shape[1] } else { 1 };
    let all: Vec<usize> = (0..ncols).collect();
    let cols = if shape.len() > 1 {
        cols.unwrap_or(&all)
    } else {
        &all[..1]
    };
    let mut data = Vec::with_capacity(rows.len() * cols.len() * inner);
    for &r in rows {
        for &c in cols {
            let off = (r * ncols + c) * inner;
            data.extend_from_slice(&t.data()[off..off + inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[0] = rows.len();
    if shape.len() > 1 {
        new_shape[1] = cols.len();
    }
    Tensor::from_vec(&new_shape, data).expect("sliced length matches shape")
}

/// Returns a physically smaller graph without the channels removed by `mask`.
///
/// Every unit in `mask` must be gated off in `graph`. Surviving gates are kept
/// (all ones) so the result can be pruned further. On eval-mode inputs the
/// compacted graph reproduces the masked graph's outputs.
pub fn compact<T: Scalar>(graph: &NetworkGraph<T>, mask: &PruneMask) -> Result<NetworkGraph<T>> {
    for r in &mask.removed {
        if r.unit.gate >= graph.gates().len()
            || r.unit.channel >= graph.gate(r.unit.gate).channels()
        {
            return Err(Error::InvalidArgument(format!(
                "mask unit {} is not in the graph",
                r.unit
            )));
        }
        if graph.gate(r.unit.gate).is_active(r.unit.channel) {
            return Err(Error::InvalidArgument(format!(
                "mask unit {} is still active",
                r.unit
            )));
        }
    }
    let kept = kept_channels(graph, true)?;
    let nodes = graph.nodes();
    let mut params: Vec<Parameter<T>> = graph.params().to_vec();
    let mut new_nodes: Vec<Node> = Vec::with_capacity(nodes.len());
    for (id, node) in nodes.iter().enumerate() {
        let keep = indices(&kept[id]);
        let mut op = node.op.clone();
        match &mut op {
            Op::Conv2d { weight, bias, .. } | Op::Linear { weight, bias, .. } => {
                let cols = indices(&kept[node.inputs[0]]);
                let w = slice2(&params[*weight].value, &keep, Some(&cols));
                let b = slice2(&params[*bias].value, &keep, None);
                params[*weight] = Parameter::new(params[*weight].name.clone(), w, true);
                params[*bias] = Parameter::new(params[*bias].name.clone(), b, true);
            }
            Op::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                for p in [*gamma, *beta, *running_mean, *running_var] {
                    let v = slice2(&params[p].value, &keep, None);
                    params[p] = Parameter::new(params[p].name.clone(), v, params[p].trainable);
                }
            }
            Op::Add { maps } => {
                let pos = |orig: usize| keep.iter().position(|&k| k == orig);
                for (slot, &src) in node.inputs.iter().enumerate() {
                    let src_keep = indices(&kept[src]);
                    let mut m = Vec::with_capacity(src_keep.len());
                    for &j in &src_keep {
                        let o = route(&maps[slot], j);
                        m.push(pos(o).ok_or_else(|| {
                            Error::Graph(format!("`{}` lost a routed channel", node.name))
                        })?);
                    }
                    let identity =
                        m.len() == keep.len() && m.iter().enumerate().all(|(i, &o)| i == o);
                    maps[slot] = if identity { None } else { Some(m) };
                }
            }
            _ => {}
        }
        let mut shape = node.shape.clone();
        shape[0] = keep.len();
        new_nodes.push(Node {
            name: node.name.clone(),
            op,
            inputs: node.inputs.clone(),
            shape,
        });
    }
    let mut gates = Vec::with_capacity(graph.gates().len());
    for (g, state) in graph.gates().iter().enumerate() {
        let at = graph.gate_nodes(g);
        let keep = at.first().map(|&id| indices(&kept[id])).unwrap_or_default();
        let mut s = state.clone();
        s.z = keep.iter().map(|&c| state.z()[c]).collect();
        s.grad = vec![T::zero(); keep.len()];
        s.per_sample_grad = None;
        s.accum = GateAccumulator::default();
        gates.push(s);
    }
    let mut out = NetworkGraph::from_parts(new_nodes, params, gates, graph.output());
    out.mode = graph.mode;
    out.update_running_stats = graph.update_running_stats;
    out.full_gradient = graph.full_gradient;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::{insert_gates, Unit};
    use crate::graph::{Mode, Placement};
    use crate::models::{build_lenet3_with, build_tiny_resnet, ResNetConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn lenet_compaction_preserves_outputs() {
        let g = build_lenet3_with::<f64>(32, 10, 3).unwrap();
        let mut g = insert_gates(g, Placement::AfterConv).unwrap();
        g.mode = Mode::Eval;
        let mut mask = PruneMask::from_graph(&g);
        for u in [
            Unit::new(0, 3),
            Unit::new(0, 7),
            Unit::new(1, 0),
            Unit::new(2, 50),
            Unit::new(3, 83),
        ] {
            mask.apply(&mut g, u, 0, 0.0).unwrap();
        }
        let x = batch(&[2, 3, 32, 32], 1);
        let before = g.predict(&x).unwrap();
        let c = compact(&g, &mask).unwrap();
        assert_eq!(c.node(c.gate_nodes(0)[0]).channels(), 14);
        assert_eq!(c.param(0).value.shape(), &[14, 3, 5, 5]);
        let after = c.predict(&x).unwrap();
        assert!(max_diff(&before, &after) < 1e-12);
    }

    #[test]
    fn resnet_after_bn_compaction_preserves_eval_outputs() {
        let cfg = ResNetConfig {
            blocks: 4,
            base_width: 8,
            image_size: 8,
            in_channels: 3,
            classes: 5,
        };
        let g = build_tiny_resnet::<f64>(&cfg, 2).unwrap();
        let mut g = insert_gates(g, Placement::AfterBn).unwrap();
        g.mode = Mode::Eval;
        let mut mask = PruneMask::from_graph(&g);
        for gate in 0..g.gates().len() {
            mask.apply(&mut g, Unit::new(gate, 1), 0, 0.0).unwrap();
        }
        let x = batch(&[3, 3, 8, 8], 5);
        let before = g.predict(&x).unwrap();
        let c = compact(&g, &mask).unwrap();
        let after = c.predict(&x).unwrap();
        assert!(max_diff(&before, &after) < 1e-12);
        let full = insert_gates(
            build_tiny_resnet::<f64>(&cfg, 2).unwrap(),
            Placement::AfterBn,
        )
        .unwrap();
        let counts = crate::flops::count_flops_params(&c);
        assert_eq!(crate::flops::count_flops_params(&g), counts);
        assert!(counts.0 < crate::flops::count_flops_params(&full).0);
    }

    #[test]
    fn skip_gate_compaction_is_unsupported() {
        let cfg = ResNetConfig {
            blocks: 4,
            base_width: 8,
            image_size: 8,
            in_channels: 3,
            classes: 5,
        };
        let g = build_tiny_resnet::<f64>(&cfg, 4).unwrap();
        let mut g = insert_gates(g, Placement::SkipConnection).unwrap();
        g.mode = Mode::Eval;
        let mut mask = PruneMask::from_graph(&g);
        mask.apply(&mut g, Unit::new(0, 2), 0, 0.0).unwrap();
        mask.apply(&mut g, Unit::new(1, 9), 0, 0.0).unwrap();
        // a pre-activation batch norm turns the removed stream channel into a constant
        assert!(matches!(compact(&g, &mask), Err(Error::Unsupported(_))));
        let (f0, _) = crate::flops::count_flops_params(
            &insert_gates(
                build_tiny_resnet::<f64>(&cfg, 4).unwrap(),
                Placement::SkipConnection,
            )
            .unwrap(),
        );
        let (f1, _) = crate::flops::count_flops_params(&g);
        assert!(f1 < f0);
    }

    #[test]
    fn active_mask_unit_is_rejected() {
        let g = insert_gates(
            build_lenet3_with::<f64>(32, 10, 0).unwrap(),
            Placement::AfterConv,
        )
        .unwrap();
        let mut mask = PruneMask::default();
        mask.removed.push(crate::gates::Removal {
            unit: Unit::new(0, 0),
            iteration: 0,
            score: 0.0,
        });
        assert!(compact(&g, &mask).is_err());
    }

    #[test]
    fn zeroed_layer_is_rejected() {
        let mut g = insert_gates(
            build_lenet3_with::<f64>(32, 10, 0).unwrap(),
            Placement::AfterConv,
        )
        .unwrap();
        for c in 0..16 {
            g.set_gate(0, c, false);
        }
        let mask = PruneMask::from_graph(&g);
        assert!(matches!(compact(&g, &mask), Err(Error::Graph(_))));
    }
}

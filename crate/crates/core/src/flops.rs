//! FLOP and parameter counts of the effective (masked) network.
//!
//! Counts are per input sample. A multiply-add is two FLOPs. Conv:
//! `2*kh*kw*Cin*Cout*Ho*Wo`; linear: `2*in*out`; batch norm, ReLU, pooling and
//! addition cost one FLOP per output element; global average pooling one per
//! input element. Gates, flattening and biases are free. Parameters are the
//! trainable scalars of conv, linear and batch-norm layers; gates and running
//! statistics are not counted.

use crate::compact::kept_channels;
use crate::graph::{NetworkGraph, Op};
use crate::tensor::Scalar;

/// `(flops, params)` of the network with zeroed gates treated as removed.
pub fn count_flops_params<T: Scalar>(graph: &NetworkGraph<T>) -> (u64, u64) {
    let kept = kept_channels(graph, false).expect("lenient analysis does not fail");
    let count = |id: usize| kept[id].iter().filter(|&&k| k).count() as u64;
    let mut flops = 0u64;
    let mut params = 0u64;
    for (id, node) in graph.nodes().iter().enumerate() {
        let spatial: u64 = node.shape[1..].iter().product::<usize>() as u64;
        let out = count(id);
        match &node.op {
            Op::Conv2d { kernel, .. } => {
                let cin = count(node.inputs[0]);
                let k2 = (kernel * kernel) as u64;
                flops += 2 * k2 * cin * out * spatial;
                params += k2 * cin * out + out;
            }
            Op::Linear { .. } => {
                let cin = count(node.inputs[0]);
                flops += 2 * cin * out;
                params += cin * out + out;
            }
            Op::BatchNorm { .. } => {
                flops += out * spatial;
                params += 2 * out;
            }
            Op::Relu | Op::MaxPool2d { .. } | Op::Add { .. } => flops += out * spatial,
            Op::GlobalAvgPool => {
                let src = &graph.nodes()[node.inputs[0]];
                flops += count(node.inputs[0]) * src.shape[1..].iter().product::<usize>() as u64;
            }
            Op::Input | Op::Gate { .. } | Op::Flatten => {}
        }
    }
    (flops, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::insert_gates;
    use crate::graph::Placement;
    use crate::models::build_lenet3;

    // hand count for 3x32x32 inputs
    fn lenet_closed_form(c1: u64, c2: u64, f1: u64, f2: u64) -> (u64, u64) {
        let flops = 2 * 25 * 3 * c1 * 28 * 28
            + c1 * 28 * 28
            + c1 * 14 * 14
            + 2 * 25 * c1 * c2 * 10 * 10
            + c2 * 10 * 10
            + c2 * 5 * 5
            + 2 * (c2 * 25) * f1
            + f1
            + 2 * f1 * f2
            + f2
            + 2 * f2 * 10;
        let params = (25 * 3 * c1 + c1)
            + (25 * c1 * c2 + c2)
            + (c2 * 25 * f1 + f1)
            + (f1 * f2 + f2)
            + (f2 * 10 + 10);
        (flops, params)
    }

    #[test]
    fn lenet_counts_match_closed_form() {
        let g = build_lenet3::<f32>(0);
        assert_eq!(count_flops_params(&g), lenet_closed_form(16, 32, 120, 84));
        assert_eq!(count_flops_params(&g).1, 121_182);
    }

    #[test]
    fn masked_counts_shrink_like_smaller_lenet() {
        let mut g = insert_gates(build_lenet3::<f32>(0), Placement::AfterConv).unwrap();
        for c in 0..4 {
            g.set_gate(0, c, false);
        }
        for c in 0..10 {
            g.set_gate(1, c, false);
        }
        g.set_gate(3, 0, false);
        assert_eq!(count_flops_params(&g), lenet_closed_form(12, 22, 120, 83));
    }
}

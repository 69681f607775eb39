//! Layer DAG with cached forward activations and reverse-mode gradients.
//!
//! Nodes are stored in topological order; a node id is its index. The graph
//! ends in a single logits node followed by an implicit mean softmax
//! cross-entropy loss.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, BnCache, Window};
use crate::tensor::{Scalar, Tensor};

pub type NodeId = usize;
pub type ParamId = usize;
pub type GateId = usize;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Op {
    Input,
    Conv2d {
        weight: ParamId,
        bias: ParamId,
        kernel: usize,
        stride: usize,
        pad: usize,
        prunable: bool,
    },
    Linear {
        weight: ParamId,
        bias: ParamId,
        prunable: bool,
    },
    Relu,
    MaxPool2d {
        size: usize,
        stride: usize,
    },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    },
    Gate {
        gate: GateId,
    },
    /// Sum of two inputs. `maps[i]` routes input `i`'s channels into output channels.
    Add {
        maps: [Option<Vec<usize>>; 2],
    },
    Flatten,
    GlobalAvgPool,
}

impl Op {
    /// Ops that act independently on each channel and keep channel count.
    pub fn is_channelwise(&self) -> bool {
        matches!(
            self,
            Op::Relu
                | Op::MaxPool2d { .. }
                | Op::BatchNorm { .. }
                | Op::Gate { .. }
                | Op::GlobalAvgPool
        )
    }

    pub fn is_filter(&self) -> bool {
        matches!(self, Op::Conv2d { .. } | Op::Linear { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    /// Per-sample output shape (no batch dimension).
    pub shape: Vec<usize>,
}

impl Node {
    pub fn channels(&self) -> usize {
        self.shape[0]
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Running statistics are stored as non-trainable parameters.
    pub trainable: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
            trainable,
        }
    }
}

/// Where gates are inserted relative to the layers they measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    AfterBn,
    BeforeBn,
    AfterConv,
    SkipConnection,
}

impl std::str::FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "after_bn" => Ok(Placement::AfterBn),
            "before_bn" => Ok(Placement::BeforeBn),
            "after_conv" => Ok(Placement::AfterConv),
            "skip_connection" => Ok(Placement::SkipConnection),
            _ => Err(Error::Config(format!("unknown gate placement `{s}`"))),
        }
    }
}

impl std::fmt::Display for Placement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Placement::AfterBn => "after_bn",
            Placement::BeforeBn => "before_bn",
            Placement::AfterConv => "after_conv",
            Placement::SkipConnection => "skip_connection",
        })
    }
}

/// Running means of gate gradients across backward passes.
#[derive(Debug, Clone, Default)]
pub struct GateAccumulator {
    pub batches: usize,
    pub samples: usize,
    /// Mean over minibatches of dE/dz.
    pub grad_mean: Vec<f64>,
    /// Mean over samples of (dE_i/dz)^2; populated only in full-gradient mode.
    pub per_sample_sq_mean: Vec<f64>,
}

/// A per-channel multiplicative gate. Values are 1 (active) or 0 (pruned) and are never optimized.
#[derive(Debug, Clone)]
pub struct GateState<T> {
    pub name: String,
    pub placement: Placement,
    pub(crate) z: Vec<T>,
    pub grad: Vec<T>,
    /// `[N, C]` per-sample contributions with `grad = mean over samples`; full-gradient mode only.
    pub per_sample_grad: Option<Tensor<T>>,
    /// Conv/linear layers whose output channels this gate removes.
    pub filters: Vec<NodeId>,
    /// Batch norms whose outputs feed this gate directly.
    pub bns: Vec<NodeId>,
    pub accum: GateAccumulator,
}

impl<T: Scalar> GateState<T> {
    pub fn z(&self) -> &[T] {
        &self.z
    }

    pub fn channels(&self) -> usize {
        self.z.len()
    }

    pub fn is_active(&self, channel: usize) -> bool {
        self.z[channel] != T::zero()
    }

    pub fn active_count(&self) -> usize {
        self.z.iter().filter(|&&v| v != T::zero()).count()
    }

    pub fn reset_accumulators(&mut self) {
        self.accum = GateAccumulator::default();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
enum Aux<T> {
    None,
    Pool(Vec<u32>),
    BnTrain(BnCache<T>),
    BnEval(Tensor<T>),
}

#[derive(Debug, Clone)]
struct Cache<T> {
    outputs: Vec<Tensor<T>>,
    aux: Vec<Aux<T>>,
    probs: Tensor<T>,
    labels: Vec<usize>,
    /// Adjoints dE/d(output) of every node, filled by backward.
    adjoints: Option<Vec<Option<Tensor<T>>>>,
}

/// Ordered DAG of layers with parameters, gates and cached activations.
#[derive(Debug, Clone)]
pub struct NetworkGraph<T> {
    pub(crate) nodes: Vec<Node>,
    pub(crate) params: Vec<Parameter<T>>,
    pub(crate) gates: Vec<GateState<T>>,
    pub(crate) output: NodeId,
    pub mode: Mode,
    /// Whether training-mode forwards update batch-norm running statistics.
    pub update_running_stats: bool,
    /// Record per-sample gate gradients (the "full gradient" variant).
    pub full_gradient: bool,
    cache: Option<Cache<T>>,
}

fn he_normal<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let len = shape.iter().product();
    let data = (0..len).map(|_| T::from_f64c(normal.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

impl<T: Scalar> NetworkGraph<T> {
    /// Empty graph with one input node of per-sample shape `input_shape`.
    pub fn new(input_shape: &[usize]) -> Self {
        NetworkGraph {
            nodes: vec![Node {
                name: "input".into(),
                op: Op::Input,
                inputs: vec![],
                shape: input_shape.to_vec(),
            }],
            params: vec![],
            gates: vec![],
            output: 0,
            mode: Mode::Train,
            update_running_stats: true,
            full_gradient: false,
            cache: None,
        }
    }

    pub fn from_parts(
        nodes: Vec<Node>,
        params: Vec<Parameter<T>>,
        gates: Vec<GateState<T>>,
        output: NodeId,
    ) -> Self {
        NetworkGraph {
            nodes,
            params,
            gates,
            output,
            mode: Mode::Train,
            update_running_stats: true,
            full_gradient: false,
            cache: None,
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        self.cache = None;
        &mut self.params
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id]
    }

    pub fn gates(&self) -> &[GateState<T>] {
        &self.gates
    }

    pub fn gate(&self, id: GateId) -> &GateState<T> {
        &self.gates[id]
    }

    pub fn gate_mut(&mut self, id: GateId) -> &mut GateState<T> {
        &mut self.gates[id]
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.nodes[0].shape
    }

    pub fn num_classes(&self) -> usize {
        self.nodes[self.output].shape[0]
    }

    pub fn set_output(&mut self, node: NodeId) {
        self.output = node;
    }

    pub fn invalidate(&mut self) {
        self.cache = None;
    }

    /// Node ids at which gate `gate` is applied (more than one for tied gates).
    pub fn gate_nodes(&self, gate: GateId) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Gate { gate: g } if g == gate))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn gate_by_name(&self, name: &str) -> Option<GateId> {
        self.gates.iter().position(|g| g.name == name)
    }

    pub fn consumers(&self, node: NodeId) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.inputs.contains(&node))
            .map(|(i, _)| i)
            .collect()
    }

    /// Sets one gate entry to 0 (pruned) or 1 (active).
    pub fn set_gate(&mut self, gate: GateId, channel: usize, active: bool) {
        self.gates[gate].z[channel] = if active { T::one() } else { T::zero() };
        self.cache = None;
    }

    /// Overwrites a gate entry with an arbitrary value; perturbation studies only.
    pub(crate) fn set_gate_value(&mut self, gate: GateId, channel: usize, value: T) {
        self.gates[gate].z[channel] = value;
        self.cache = None;
    }

    pub(crate) fn gate_value(&self, gate: GateId, channel: usize) -> T {
        self.gates[gate].z[channel]
    }

    // ----- construction --------------------------------------------------

    fn push(
        &mut self,
        name: impl Into<String>,
        op: Op,
        inputs: Vec<NodeId>,
        shape: Vec<usize>,
    ) -> NodeId {
        self.nodes.push(Node {
            name: name.into(),
            op,
            inputs,
            shape,
        });
        self.cache = None;
        let id = self.nodes.len() - 1;
        self.output = id;
        id
    }

    fn add_param(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        self.params.push(Parameter::new(name, value, trainable));
        self.params.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        name: &str,
        input: NodeId,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        prunable: bool,
        rng: &mut impl Rng,
    ) -> Result<NodeId> {
        let s = self.nodes[input].shape.clone();
        if s.len() != 3 {
            return Err(Error::Graph(format!(
                "{name}: conv2d needs a [C,H,W] input, got {s:?}"
            )));
        }
        let win = Window {
            kh: kernel,
            kw: kernel,
            stride,
            pad,
        };
        let (ho, wo) = win.output_hw(s[1], s[2])?;
        let fan_in = s[0] * kernel * kernel;
        let weight = self.add_param(
            format!("{name}.weight"),
            he_normal(rng, &[out_channels, s[0], kernel, kernel], fan_in),
            true,
        );
        let bias = self.add_param(format!("{name}.bias"), Tensor::zeros(&[out_channels]), true);
        Ok(self.push(
            name,
            Op::Conv2d {
                weight,
                bias,
                kernel,
                stride,
                pad,
                prunable,
            },
            vec![input],
            vec![out_channels, ho, wo],
        ))
    }

    pub fn linear(
        &mut self,
        name: &str,
        input: NodeId,
        out_features: usize,
        prunable: bool,
        rng: &mut impl Rng,
    ) -> Result<NodeId> {
        let s = self.nodes[input].shape.clone();
        if s.len() != 1 {
            return Err(Error::Graph(format!(
                "{name}: linear needs a flat input, got {s:?}"
            )));
        }
        let weight = self.add_param(
            format!("{name}.weight"),
            he_normal(rng, &[out_features, s[0]], s[0]),
            true,
        );
        let bias = self.add_param(format!("{name}.bias"), Tensor::zeros(&[out_features]), true);
        Ok(self.push(
            name,
            Op::Linear {
                weight,
                bias,
                prunable,
            },
            vec![input],
            vec![out_features],
        ))
    }

    pub fn relu(&mut self, name: &str, input: NodeId) -> NodeId {
        let shape = self.nodes[input].shape.clone();
        self.push(name, Op::Relu, vec![input], shape)
    }

    pub fn maxpool2d(
        &mut self,
        name: &str,
        input: NodeId,
        size: usize,
        stride: usize,
    ) -> Result<NodeId> {
        let s = self.nodes[input].shape.clone();
        let (ho, wo) = Window {
            kh: size,
            kw: size,
            stride,
            pad: 0,
        }
        .output_hw(s[1], s[2])?;
        Ok(self.push(
            name,
            Op::MaxPool2d { size, stride },
            vec![input],
            vec![s[0], ho, wo],
        ))
    }

    pub fn batchnorm(&mut self, name: &str, input: NodeId) -> NodeId {
        let shape = self.nodes[input].shape.clone();
        let c = shape[0];
        let gamma = self.add_param(format!("{name}.gamma"), Tensor::full(&[c], T::one()), true);
        let beta = self.add_param(format!("{name}.beta"), Tensor::zeros(&[c]), true);
        let running_mean =
            self.add_param(format!("{name}.running_mean"), Tensor::zeros(&[c]), false);
        let running_var = self.add_param(
            format!("{name}.running_var"),
            Tensor::full(&[c], T::one()),
            false,
        );
        self.push(
            name,
            Op::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            },
            vec![input],
            shape,
        )
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.nodes[a].shape.clone(), self.nodes[b].shape.clone());
        if sa != sb {
            return Err(Error::shape(format!("{name}: add operands"), &sa, &sb));
        }
        Ok(self.push(name, Op::Add { maps: [None, None] }, vec![a, b], sa))
    }

    pub fn flatten(&mut self, name: &str, input: NodeId) -> NodeId {
        let n: usize = self.nodes[input].shape.iter().product();
        self.push(name, Op::Flatten, vec![input], vec![n])
    }

    pub fn global_avg_pool(&mut self, name: &str, input: NodeId) -> NodeId {
        let c = self.nodes[input].shape[0];
        self.push(name, Op::GlobalAvgPool, vec![input], vec![c])
    }

    /// Inserts `op` directly after `target`, rewiring every consumer of `target` to the new node.
    pub(crate) fn insert_after(&mut self, target: NodeId, name: String, op: Op) -> NodeId {
        let new_id = target + 1;
        let remap = |id: NodeId| if id > target { id + 1 } else { id };
        for node in self.nodes.iter_mut() {
            for inp in node.inputs.iter_mut() {
                *inp = if *inp == target { new_id } else { remap(*inp) };
            }
        }
        for gate in self.gates.iter_mut() {
            gate.filters.iter_mut().for_each(|f| *f = remap(*f));
            gate.bns.iter_mut().for_each(|f| *f = remap(*f));
        }
        self.output = if self.output == target {
            new_id
        } else {
            remap(self.output)
        };
        let shape = self.nodes[target].shape.clone();
        self.nodes.insert(
            new_id,
            Node {
                name,
                op,
                inputs: vec![target],
                shape,
            },
        );
        self.cache = None;
        new_id
    }

    pub(crate) fn push_gate(&mut self, gate: GateState<T>) -> GateId {
        self.gates.push(gate);
        self.gates.len() - 1
    }

    // ----- execution -----------------------------------------------------

    fn compute_node(
        &self,
        id: NodeId,
        inputs: &[&Tensor<T>],
        mode: Mode,
    ) -> Result<(Tensor<T>, Aux<T>)> {
        let node = &self.nodes[id];
        let p = |pid: ParamId| &self.params[pid].value;
        let eps = T::from_f64c(BN_EPS);
        Ok(match &node.op {
            Op::Input => unreachable!("input node is never computed"),
            Op::Conv2d {
                weight,
                bias,
                kernel,
                stride,
                pad,
                ..
            } => {
                let win = Window {
                    kh: *kernel,
                    kw: *kernel,
                    stride: *stride,
                    pad: *pad,
                };
                (
                    kernels::conv2d_forward(inputs[0], p(*weight), Some(p(*bias)), &win)?,
                    Aux::None,
                )
            }
            Op::Linear { weight, bias, .. } => {
                let x = inputs[0];
                let flat = if x.shape().len() != 2 {
                    x.clone().reshape(&[x.dim0(), x.row_len()])?
                } else {
                    x.clone()
                };
                (
                    kernels::linear_forward(&flat, p(*weight), Some(p(*bias)))?,
                    Aux::None,
                )
            }
            Op::Relu => (kernels::relu_forward(inputs[0]), Aux::None),
            Op::MaxPool2d { size, stride } => {
                let (y, arg) = kernels::maxpool2d_forward(inputs[0], *size, *stride)?;
                (y, Aux::Pool(arg))
            }
            Op::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => match mode {
                Mode::Train => {
                    let (y, cache) = kernels::batchnorm_train_forward(
                        inputs[0],
                        p(*gamma).data(),
                        p(*beta).data(),
                        eps,
                    )?;
                    (y, Aux::BnTrain(cache))
                }
                Mode::Eval => {
                    let (y, xhat) = kernels::batchnorm_eval_forward(
                        inputs[0],
                        p(*gamma).data(),
                        p(*beta).data(),
                        p(*running_mean).data(),
                        p(*running_var).data(),
                        eps,
                    )?;
                    (y, Aux::BnEval(xhat))
                }
            },
            Op::Gate { gate } => (
                kernels::channel_scale(inputs[0], &self.gates[*gate].z)?,
                Aux::None,
            ),
            Op::Add { maps } => {
                let n = inputs[0].dim0();
                let mut shape = vec![n];
                shape.extend_from_slice(&node.shape);
                let mut y = Tensor::zeros(&shape);
                kernels::add_mapped(&mut y, inputs[0], maps[0].as_deref())?;
                kernels::add_mapped(&mut y, inputs[1], maps[1].as_deref())?;
                (y, Aux::None)
            }
            Op::Flatten => {
                let x = inputs[0];
                (x.clone().reshape(&[x.dim0(), x.row_len()])?, Aux::None)
            }
            Op::GlobalAvgPool => (kernels::gap_forward(inputs[0])?, Aux::None),
        })
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        let s = batch.shape();
        if s.len() < 2 || s[1..] != self.nodes[0].shape[..] {
            let mut expected = vec![s.first().copied().unwrap_or(0)];
            expected.extend_from_slice(&self.nodes[0].shape);
            return Err(Error::shape("network input", &expected, s));
        }
        Ok(())
    }

    /// Runs every node from `start`, reusing `prefix` outputs for earlier nodes.
    fn run_from(
        &self,
        start: NodeId,
        prefix: &[Tensor<T>],
        mode: Mode,
    ) -> Result<(Vec<Tensor<T>>, Vec<Aux<T>>)> {
        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len() - start);
        let mut aux = Vec::with_capacity(self.nodes.len() - start);
        for id in start..self.nodes.len() {
            let node = &self.nodes[id];
            let inputs: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|&i| {
                    if i < start {
                        &prefix[i]
                    } else {
                        &outs[i - start]
                    }
                })
                .collect();
            let (y, a) = self.compute_node(id, &inputs, mode)?;
            if !y.all_finite() {
                return Err(Error::NonFinite {
                    layer: node.name.clone(),
                });
            }
            outs.push(y);
            aux.push(a);
        }
        Ok((outs, aux))
    }

    /// Mean softmax cross-entropy over the batch. Caches activations for [`backward`](Self::backward).
    pub fn forward(&mut self, batch: &Tensor<T>, labels: &[usize]) -> Result<T> {
        self.check_input(batch)?;
        if labels.len() != batch.dim0() {
            return Err(Error::shape("labels", &[batch.dim0()], &[labels.len()]));
        }
        let mode = self.mode;
        let (rest, rest_aux) = self.run_from(1, std::slice::from_ref(batch), mode)?;
        let mut outputs = Vec::with_capacity(self.nodes.len());
        outputs.push(batch.clone());
        outputs.extend(rest);
        let mut aux = vec![Aux::None];
        aux.extend(rest_aux);
        let (loss, probs) = kernels::softmax_xent_forward(&outputs[self.output], labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                layer: "softmax_xent".into(),
            });
        }
        if mode == Mode::Train && self.update_running_stats {
            self.update_bn_stats(&aux);
        }
        self.cache = Some(Cache {
            outputs,
            aux,
            probs,
            labels: labels.to_vec(),
            adjoints: None,
        });
        Ok(loss)
    }

    /// Logits without touching the cache or running statistics.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(batch)?;
        let (outs, _) = self.run_from(1, std::slice::from_ref(batch), self.mode)?;
        Ok(outs[self.output - 1].clone())
    }

    /// Loss without touching the cache or running statistics.
    pub fn loss(&self, batch: &Tensor<T>, labels: &[usize]) -> Result<T> {
        let logits = self.predict(batch)?;
        Ok(kernels::softmax_xent_forward(&logits, labels)?.0)
    }

    fn update_bn_stats(&mut self, aux: &[Aux<T>]) {
        let m = T::from_f64c(BN_MOMENTUM);
        for (id, node) in self.nodes.iter().enumerate() {
            if let (
                Op::BatchNorm {
                    running_mean,
                    running_var,
                    ..
                },
                Aux::BnTrain(cache),
            ) = (&node.op, &aux[id])
            {
                let count = cache.xhat.len() / cache.mean.len();
                // running variance tracks the unbiased estimate
                let unbias = if count > 1 {
                    T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
                } else {
                    T::one()
                };
                let (rm, rv) = (*running_mean, *running_var);
                for c in 0..cache.mean.len() {
                    let v = &mut self.params[rm].value.data_mut()[c];
                    *v = (T::one() - m) * *v + m * cache.mean[c];
                    let v = &mut self.params[rv].value.data_mut()[c];
                    *v = (T::one() - m) * *v + m * cache.var[c] * unbias;
                }
            }
        }
    }

    pub fn has_forward(&self) -> bool {
        self.cache.is_some()
    }

    /// Cached logits of the last forward pass.
    pub fn logits(&self) -> Option<&Tensor<T>> {
        self.cache.as_ref().map(|c| &c.outputs[self.output])
    }

    /// Cached output of any node from the last forward pass.
    pub fn activation(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.cache.as_ref().map(|c| &c.outputs[node])
    }

    /// Cached dE/d(output) of any node from the last backward pass.
    pub fn adjoint(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.cache.as_ref()?.adjoints.as_ref()?[node].as_ref()
    }

    pub fn cached_probs(&self) -> Option<&Tensor<T>> {
        self.cache.as_ref().map(|c| &c.probs)
    }

    /// Fills every parameter and gate gradient with dE/d(value) for the last forward pass.
    pub fn backward(&mut self) -> Result<()> {
        let cache = self.cache.take().ok_or(Error::NoForward)?;
        let result = self.backward_inner(&cache);
        let adjoints = result?;
        let mut cache = cache;
        cache.adjoints = Some(adjoints);
        self.cache = Some(cache);
        Ok(())
    }

    fn backward_inner(&mut self, cache: &Cache<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let n_nodes = self.nodes.len();
        let batch = cache.outputs[0].dim0();
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; n_nodes];
        adj[self.output] = Some(kernels::softmax_xent_backward(&cache.probs, &cache.labels));
        for p in self.params.iter_mut() {
            p.grad.fill(T::zero());
        }
        let full = self.full_gradient;
        for g in self.gates.iter_mut() {
            g.grad.iter_mut().for_each(|v| *v = T::zero());
            g.per_sample_grad = if full {
                Some(Tensor::zeros(&[batch, g.z.len()]))
            } else {
                None
            };
        }
        let eps = T::from_f64c(BN_EPS);
        let n_t = T::from_usize(batch).unwrap();
        for id in (1..n_nodes).rev() {
            let Some(dy) = adj[id].take() else { continue };
            let node = self.nodes[id].clone();
            let x = &cache.outputs[node.inputs[0]];
            let need_dx = node.inputs[0] != 0;
            let mut dxs: Vec<Option<Tensor<T>>> = vec![None; node.inputs.len()];
            match &node.op {
                Op::Input => {}
                Op::Conv2d {
                    weight,
                    bias,
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    let win = Window {
                        kh: *kernel,
                        kw: *kernel,
                        stride: *stride,
                        pad: *pad,
                    };
                    let (dx, dw, db) = kernels::conv2d_backward(
                        x,
                        &self.params[*weight].value,
                        &dy,
                        &win,
                        need_dx,
                    )?;
                    self.params[*weight].grad.add_assign(&dw);
                    self.params[*bias].grad.add_assign(&db);
                    dxs[0] = dx;
                }
                Op::Linear { weight, bias, .. } => {
                    let flat = x.clone().reshape(&[x.dim0(), x.row_len()])?;
                    let (dx, dw, db) =
                        kernels::linear_backward(&flat, &self.params[*weight].value, &dy, need_dx)?;
                    self.params[*weight].grad.add_assign(&dw);
                    self.params[*bias].grad.add_assign(&db);
                    dxs[0] = dx.map(|d| d.reshape(x.shape())).transpose()?;
                }
                Op::Relu => dxs[0] = Some(kernels::relu_backward(x, &dy)),
                Op::MaxPool2d { .. } => {
                    let Aux::Pool(arg) = &cache.aux[id] else {
                        unreachable!()
                    };
                    dxs[0] = Some(kernels::maxpool2d_backward(x.shape(), arg, &dy));
                }
                Op::BatchNorm {
                    gamma,
                    beta,
                    running_var,
                    ..
                } => {
                    let g = self.params[*gamma].value.data().to_vec();
                    let (dx, dg, db) = match &cache.aux[id] {
                        Aux::BnTrain(c) => kernels::batchnorm_train_backward(c, &g, &dy),
                        Aux::BnEval(xhat) => kernels::batchnorm_eval_backward(
                            xhat,
                            &g,
                            self.params[*running_var].value.data(),
                            eps,
                            &dy,
                        ),
                        _ => unreachable!(),
                    };
                    for (a, b) in self.params[*gamma].grad.data_mut().iter_mut().zip(&dg) {
                        *a = *a + *b;
                    }
                    for (a, b) in self.params[*beta].grad.data_mut().iter_mut().zip(&db) {
                        *a = *a + *b;
                    }
                    dxs[0] = Some(dx);
                }
                Op::Gate { gate } => {
                    let c = self.gates[*gate].z.len();
                    let per = kernels::channel_dot_per_sample(&dy, x);
                    let total = kernels::sum_over_batch(&per, c);
                    let g = &mut self.gates[*gate];
                    for (a, b) in g.grad.iter_mut().zip(&total) {
                        *a = *a + *b;
                    }
                    if let Some(ps) = g.per_sample_grad.as_mut() {
                        for (a, &b) in ps.data_mut().iter_mut().zip(&per) {
                            *a = *a + b * n_t;
                        }
                    }
                    dxs[0] = Some(kernels::channel_scale(&dy, &g.z)?);
                }
                Op::Add { maps } => {
                    for (slot, &inp) in node.inputs.iter().enumerate() {
                        let c = self.nodes[inp].shape[0];
                        dxs[slot] = Some(kernels::gather_channels(&dy, maps[slot].as_deref(), c));
                    }
                }
                Op::Flatten => dxs[0] = Some(dy.clone().reshape(x.shape())?),
                Op::GlobalAvgPool => dxs[0] = Some(kernels::gap_backward(x.shape(), &dy)),
            }
            for (slot, dx) in dxs.into_iter().enumerate() {
                let (Some(dx), inp) = (dx, node.inputs[slot]) else {
                    continue;
                };
                if inp == 0 {
                    continue;
                }
                match adj[inp].as_mut() {
                    Some(acc) => acc.add_assign(&dx),
                    None => adj[inp] = Some(dx),
                }
            }
            adj[id] = Some(dy);
        }
        for g in self.gates.iter_mut() {
            let acc = &mut g.accum;
            let c = g.z.len();
            if acc.grad_mean.len() != c {
                acc.grad_mean = vec![0.0; c];
                acc.per_sample_sq_mean = vec![0.0; c];
            }
            acc.batches += 1;
            let nb = acc.batches as f64;
            for (m, v) in acc.grad_mean.iter_mut().zip(&g.grad) {
                *m += (v.to_f64c() - *m) / nb;
            }
            if let Some(ps) = &g.per_sample_grad {
                for row in ps.data().chunks(c) {
                    acc.samples += 1;
                    let ns = acc.samples as f64;
                    for (m, v) in acc.per_sample_sq_mean.iter_mut().zip(row) {
                        let v = v.to_f64c();
                        *m += (v * v - *m) / ns;
                    }
                }
            }
        }
        Ok(adj)
    }

    // ----- second order ----------------------------------------------------

    /// Exact d^2E/dz^2 for one gate channel via a forward-over-reverse pass.
    ///
    /// Requires `forward` and `backward` on the current batch.
    pub fn gate_hessian_diag_entry(&self, gate: GateId, channel: usize) -> Result<T> {
        let cache = self.cache.as_ref().ok_or(Error::NoForward)?;
        let adj = cache.adjoints.as_ref().ok_or_else(|| {
            Error::InvalidArgument("second-order pass needs backward first".into())
        })?;
        let gate_nodes = self.gate_nodes(gate);
        let first = *gate_nodes
            .first()
            .ok_or_else(|| Error::Graph(format!("gate {gate} is not placed in the graph")))?;
        let n_nodes = self.nodes.len();
        let batch = cache.outputs[0].dim0();
        let eps = T::from_f64c(BN_EPS);

        // forward tangents for nodes >= first
        let mut tan: Vec<Option<Tensor<T>>> = vec![None; n_nodes];
        for id in first..n_nodes {
            let node = &self.nodes[id];
            let is_target = matches!(node.op, Op::Gate { gate: g } if g == gate);
            let tin: Vec<Option<&Tensor<T>>> =
                node.inputs.iter().map(|&i| tan[i].as_ref()).collect();
            if !is_target && tin.iter().all(|t| t.is_none()) {
                continue;
            }
            let x = &cache.outputs[node.inputs[0]];
            let t = match &node.op {
                Op::Input => unreachable!(),
                Op::Conv2d {
                    weight,
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    let win = Window {
                        kh: *kernel,
                        kw: *kernel,
                        stride: *stride,
                        pad: *pad,
                    };
                    kernels::conv2d_forward(
                        tin[0].unwrap(),
                        &self.params[*weight].value,
                        None,
                        &win,
                    )?
                }
                Op::Linear { weight, .. } => {
                    let t = tin[0].unwrap();
                    let flat = t.clone().reshape(&[t.dim0(), t.row_len()])?;
                    kernels::linear_forward(&flat, &self.params[*weight].value, None)?
                }
                Op::Relu => {
                    let mut t = tin[0].unwrap().clone();
                    for (v, &xv) in t.data_mut().iter_mut().zip(x.data()) {
                        if xv <= T::zero() {
                            *v = T::zero();
                        }
                    }
                    t
                }
                Op::MaxPool2d { .. } => {
                    let Aux::Pool(arg) = &cache.aux[id] else {
                        unreachable!()
                    };
                    let src = tin[0].unwrap();
                    let mut shape = vec![batch];
                    shape.extend_from_slice(&node.shape);
                    let data = arg.iter().map(|&a| src.data()[a as usize]).collect();
                    Tensor::from_vec(&shape, data)?
                }
                Op::BatchNorm {
                    gamma, running_var, ..
                } => {
                    let g = self.params[*gamma].value.data();
                    match &cache.aux[id] {
                        Aux::BnTrain(c) => bn_tangent(c, g, tin[0].unwrap()),
                        Aux::BnEval(_) => {
                            let rv = self.params[*running_var].value.data();
                            let k: Vec<T> = g
                                .iter()
                                .zip(rv)
                                .map(|(&g, &v)| g / (v + eps).sqrt())
                                .collect();
                            kernels::channel_scale(tin[0].unwrap(), &k)?
                        }
                        _ => unreachable!(),
                    }
                }
                Op::Gate { gate: g } => {
                    let mut t = match tin[0] {
                        Some(t) => kernels::channel_scale(t, &self.gates[*g].z)?,
                        None => Tensor::zeros(x.shape()),
                    };
                    if is_target {
                        add_channel(&mut t, x, channel, T::one());
                    }
                    t
                }
                Op::Add { maps } => {
                    let mut shape = vec![batch];
                    shape.extend_from_slice(&node.shape);
                    let mut y = Tensor::zeros(&shape);
                    for slot in 0..2 {
                        if let Some(t) = tin[slot] {
                            kernels::add_mapped(&mut y, t, maps[slot].as_deref())?;
                        }
                    }
                    y
                }
                Op::Flatten => {
                    let t = tin[0].unwrap();
                    t.clone().reshape(&[t.dim0(), t.row_len()])?
                }
                Op::GlobalAvgPool => kernels::gap_forward(tin[0].unwrap())?,
            };
            tan[id] = Some(t);
        }

        // tangent of the logits adjoint: softmax Jacobian applied to the logits tangent, over N
        let Some(lt) = tan[self.output].as_ref() else {
            return Ok(T::zero());
        };
        let c = lt.row_len();
        let inv_n = T::one() / T::from_usize(batch).unwrap();
        let mut top = Tensor::zeros(lt.shape());
        for ((out, p), l) in top
            .data_mut()
            .chunks_mut(c)
            .zip(cache.probs.data().chunks(c))
            .zip(lt.data().chunks(c))
        {
            let dot = p.iter().zip(l).fold(T::zero(), |a, (&p, &l)| a + p * l);
            for i in 0..c {
                out[i] = p[i] * (l[i] - dot) * inv_n;
            }
        }

        let mut adt: Vec<Option<Tensor<T>>> = vec![None; n_nodes];
        adt[self.output] = Some(top);
        let mut h = T::zero();
        for id in (first..n_nodes).rev() {
            let node = &self.nodes[id];
            let is_target = matches!(node.op, Op::Gate { gate: g } if g == gate);
            let a_dot = adt[id].take();
            // training-mode batch norm has input-dependent gradients, so an input tangent alone matters
            let bn_curvature =
                matches!(cache.aux[id], Aux::BnTrain(_)) && tan[node.inputs[0]].is_some();
            if a_dot.is_none() && !is_target && !bn_curvature {
                continue;
            }
            let x = &cache.outputs[node.inputs[0]];
            let dy = adj[id].as_ref();
            let mut dxs: Vec<Option<Tensor<T>>> = vec![None; node.inputs.len()];
            match &node.op {
                Op::Input => {}
                Op::Conv2d {
                    weight,
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    if let Some(a) = &a_dot {
                        let win = Window {
                            kh: *kernel,
                            kw: *kernel,
                            stride: *stride,
                            pad: *pad,
                        };
                        dxs[0] = Some(kernels::conv2d_backward_input(
                            x.shape(),
                            &self.params[*weight].value,
                            a,
                            &win,
                        )?);
                    }
                }
                Op::Linear { weight, .. } => {
                    if let Some(a) = &a_dot {
                        dxs[0] = Some(kernels::linear_backward_input(
                            x.shape(),
                            &self.params[*weight].value,
                            a,
                        ));
                    }
                }
                Op::Relu => dxs[0] = a_dot.as_ref().map(|a| kernels::relu_backward(x, a)),
                Op::MaxPool2d { .. } => {
                    let Aux::Pool(arg) = &cache.aux[id] else {
                        unreachable!()
                    };
                    dxs[0] = a_dot
                        .as_ref()
                        .map(|a| kernels::maxpool2d_backward(x.shape(), arg, a));
                }
                Op::BatchNorm {
                    gamma, running_var, ..
                } => {
                    let g = self.params[*gamma].value.data();
                    match &cache.aux[id] {
                        Aux::BnTrain(c) => {
                            let zero = Tensor::zeros(x.shape());
                            let a = a_dot.as_ref().unwrap_or(&zero);
                            let dy = dy.unwrap_or(&zero);
                            let xt = tan[node.inputs[0]].as_ref();
                            dxs[0] = Some(bn_backward_tangent(c, g, dy, a, xt));
                        }
                        Aux::BnEval(_) => {
                            if let Some(a) = &a_dot {
                                let rv = self.params[*running_var].value.data();
                                let k: Vec<T> = g
                                    .iter()
                                    .zip(rv)
                                    .map(|(&g, &v)| g / (v + eps).sqrt())
                                    .collect();
                                dxs[0] = Some(kernels::channel_scale(a, &k)?);
                            }
                        }
                        _ => unreachable!(),
                    }
                }
                Op::Gate { gate: g } => {
                    let z = &self.gates[*g].z;
                    let mut dx = match &a_dot {
                        Some(a) => kernels::channel_scale(a, z)?,
                        None => Tensor::zeros(x.shape()),
                    };
                    if is_target {
                        if let Some(dy) = dy {
                            add_channel(&mut dx, dy, channel, T::one());
                        }
                        // d(dE/dz_c) = sum over channel c of (a_dot * x + dy * x_dot)
                        let xt = tan[node.inputs[0]].as_ref();
                        h = h
                            + channel_sum_product(a_dot.as_ref(), x, channel)
                            + match (dy, xt) {
                                (Some(dy), Some(xt)) => channel_sum_product(Some(dy), xt, channel),
                                _ => T::zero(),
                            };
                    }
                    dxs[0] = Some(dx);
                }
                Op::Add { maps } => {
                    if let Some(a) = &a_dot {
                        for (slot, &inp) in node.inputs.iter().enumerate() {
                            let c = self.nodes[inp].shape[0];
                            dxs[slot] = Some(kernels::gather_channels(a, maps[slot].as_deref(), c));
                        }
                    }
                }
                Op::Flatten => dxs[0] = a_dot.map(|a| a.reshape(x.shape())).transpose()?,
                Op::GlobalAvgPool => {
                    dxs[0] = a_dot.as_ref().map(|a| kernels::gap_backward(x.shape(), a))
                }
            }
            for (slot, dx) in dxs.into_iter().enumerate() {
                let (Some(dx), inp) = (dx, node.inputs[slot]) else {
                    continue;
                };
                if inp < first {
                    continue;
                }
                match adt[inp].as_mut() {
                    Some(acc) => acc.add_assign(&dx),
                    None => adt[inp] = Some(dx),
                }
            }
        }
        Ok(h)
    }

    /// Loss with `gates[gate].z[channel]` temporarily set to `value`; nothing is cached.
    pub fn loss_at_gate_value(
        &mut self,
        batch: &Tensor<T>,
        labels: &[usize],
        gate: GateId,
        channel: usize,
        value: T,
    ) -> Result<T> {
        let old = self.gate_value(gate, channel);
        self.set_gate_value(gate, channel, value);
        let loss = self.loss(batch, labels);
        self.set_gate_value(gate, channel, old);
        loss
    }

    // ----- cached evaluation -----------------------------------------------

    /// Activations of every node for a fixed batch, for repeated suffix re-evaluation.
    pub fn snapshot(&self, batch: &Tensor<T>) -> Result<Snapshot<T>> {
        self.check_input(batch)?;
        let (rest, _) = self.run_from(1, std::slice::from_ref(batch), self.mode)?;
        let mut outputs = vec![batch.clone()];
        outputs.extend(rest);
        Ok(Snapshot { outputs })
    }

    /// Logits recomputed from node `start` onwards, reading earlier activations from `snap`.
    pub fn predict_from(&self, snap: &Snapshot<T>, start: NodeId) -> Result<Tensor<T>> {
        let start = start.max(1);
        if start > self.output {
            return Ok(snap.outputs[self.output].clone());
        }
        let (outs, _) = self.run_from(start, &snap.outputs, self.mode)?;
        Ok(outs[self.output - start].clone())
    }
}

/// Cached per-node activations of one batch.
#[derive(Debug, Clone)]
pub struct Snapshot<T> {
    pub outputs: Vec<Tensor<T>>,
}

fn channel_geometry(shape: &[usize]) -> (usize, usize, usize) {
    match *shape {
        [n, c] => (n, c, 1),
        [n, c, h, w] => (n, c, h * w),
        _ => panic!("channel tensor expected, got {shape:?}"),
    }
}

/// `t[:, channel] += s * src[:, channel]`
fn add_channel<T: Scalar>(t: &mut Tensor<T>, src: &Tensor<T>, channel: usize, s: T) {
    let (n, c, hw) = channel_geometry(src.shape());
    for ni in 0..n {
        let base = (ni * c + channel) * hw;
        for i in base..base + hw {
            t.data_mut()[i] = t.data()[i] + s * src.data()[i];
        }
    }
}

fn channel_sum_product<T: Scalar>(a: Option<&Tensor<T>>, b: &Tensor<T>, channel: usize) -> T {
    let Some(a) = a else { return T::zero() };
    let (n, c, hw) = channel_geometry(b.shape());
    let mut s = T::zero();
    for ni in 0..n {
        let base = (ni * c + channel) * hw;
        for i in base..base + hw {
            s = s + a.data()[i] * b.data()[i];
        }
    }
    s
}

/// Per-channel means of `f(i)` over `(n, spatial)`.
fn channel_means<T: Scalar>(shape: &[usize], f: impl Fn(usize) -> T) -> Vec<T> {
    let (n, c, hw) = channel_geometry(shape);
    let count = T::from_usize(n * hw).unwrap();
    (0..c)
        .map(|ci| {
            let mut s = T::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for i in base..base + hw {
                    s = s + f(i);
                }
            }
            s / count
        })
        .collect()
}

fn channel_of(shape: &[usize], i: usize) -> usize {
    let (_, c, hw) = channel_geometry(shape);
    (i / hw) % c
}

/// Tangent of the normalized output: (x_dot - mean(x_dot) - xhat * mean(xhat * x_dot)) / sigma.
fn xhat_tangent<T: Scalar>(cache: &BnCache<T>, xt: &Tensor<T>) -> Tensor<T> {
    let xh = cache.xhat.data();
    let xd = xt.data();
    let shape = xt.shape();
    let m1 = channel_means(shape, |i| xd[i]);
    let m2 = channel_means(shape, |i| xh[i] * xd[i]);
    let mut out = Tensor::zeros(shape);
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let c = channel_of(shape, i);
        *o = (xd[i] - m1[c] - xh[i] * m2[c]) * cache.inv_std[c];
    }
    out
}

fn bn_tangent<T: Scalar>(cache: &BnCache<T>, gamma: &[T], xt: &Tensor<T>) -> Tensor<T> {
    let mut t = xhat_tangent(cache, xt);
    let shape = t.shape().to_vec();
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = *v * gamma[channel_of(&shape, i)];
    }
    t
}

/// Tangent of the training-mode batch-norm input gradient.
///
/// With `a = gamma * dy`, `dx = (a - m1 - xhat * m2) / sigma` where `m1 = mean(a)` and
/// `m2 = mean(a * xhat)`; differentiating along the input tangent gives the expression below.
fn bn_backward_tangent<T: Scalar>(
    cache: &BnCache<T>,
    gamma: &[T],
    dy: &Tensor<T>,
    a_dot: &Tensor<T>,
    xt: Option<&Tensor<T>>,
) -> Tensor<T> {
    let shape = dy.shape().to_vec();
    let xh = cache.xhat.data();
    let a: Vec<T> = dy
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| gamma[channel_of(&shape, i)] * v)
        .collect();
    let ad: Vec<T> = a_dot
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| gamma[channel_of(&shape, i)] * v)
        .collect();
    let m1 = channel_means(&shape, |i| a[i]);
    let m2 = channel_means(&shape, |i| a[i] * xh[i]);
    let md1 = channel_means(&shape, |i| ad[i]);
    let mut out = Tensor::zeros(&shape);
    match xt {
        None => {
            let md2 = channel_means(&shape, |i| ad[i] * xh[i]);
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                let c = channel_of(&shape, i);
                *o = (ad[i] - md1[c] - xh[i] * md2[c]) * cache.inv_std[c];
            }
        }
        Some(xt) => {
            let xht = xhat_tangent(cache, xt);
            let xhd = xht.data();
            let sig_dot = channel_means(&shape, |i| xh[i] * xt.data()[i]);
            let md2 = channel_means(&shape, |i| ad[i] * xh[i] + a[i] * xhd[i]);
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                let c = channel_of(&shape, i);
                let k = cache.inv_std[c];
                let dx = (a[i] - m1[c] - xh[i] * m2[c]) * k;
                *o = (ad[i] - md1[c] - xhd[i] * m2[c] - xh[i] * md2[c]) * k - dx * sig_dot[c] * k;
            }
        }
    }
    out
}

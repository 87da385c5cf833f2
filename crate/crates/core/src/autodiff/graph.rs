//! Static computation graphs over a fixed op vocabulary.
//!
//! Graphs are built once through the builder methods (which infer and check
//! per-sample shapes), then evaluated on batches: values carry a leading
//! batch axis at run time, except the scalar loss reductions.

use std::fmt;

use crate::autodiff::kernels::{self, ConvGeom};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value (graph input or node output).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Conv2d { stride: usize, pad: usize, kernel: usize },
    LeakyRelu { slope: f64 },
    MaxPool2d,
    UpsampleNearest,
    ConcatChannels,
    Linear,
    Softmax,
    Sigmoid,
    GlobalAvgPool,
    MseReduce,
    CrossEntropyReduce { floor: f64 },
    NegEntropyReduce,
}

impl OpKind {
    pub fn tag(&self) -> &'static str {
        match self {
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::LeakyRelu { .. } => "leaky_relu",
            OpKind::MaxPool2d => "max_pool2d",
            OpKind::UpsampleNearest => "upsample_nearest",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::Linear => "linear",
            OpKind::Softmax => "softmax",
            OpKind::Sigmoid => "sigmoid",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::MseReduce => "mse_reduce",
            OpKind::CrossEntropyReduce { .. } => "cross_entropy_reduce",
            OpKind::NegEntropyReduce => "neg_entropy_reduce",
        }
    }

    fn is_reduce(&self) -> bool {
        matches!(
            self,
            OpKind::MseReduce | OpKind::CrossEntropyReduce { .. } | OpKind::NegEntropyReduce
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight { fan_in: usize },
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub role: ParamRole,
    pub tensor: Tensor<T>,
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamRegistry<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamRegistry<T> {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn at(&self, idx: usize) -> &Param<T> {
        &self.params[idx]
    }

    pub fn at_mut(&mut self, idx: usize) -> &mut Param<T> {
        &mut self.params[idx]
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Largest absolute gradient entry (zero when no gradient was produced).
    pub fn max_abs_grad(&self) -> T {
        self.params
            .iter()
            .filter_map(|p| p.tensor.grad())
            .flat_map(|g| g.iter())
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }

    fn push(&mut self, name: String, role: ParamRole, shape: &[usize]) -> usize {
        self.params.push(Param {
            name,
            role,
            tensor: Tensor::zeros(shape),
        });
        self.params.len() - 1
    }
}

#[derive(Debug, Clone)]
struct ValueInfo {
    name: String,
    /// Per-sample shape; empty for batch-level scalars.
    shape: Vec<usize>,
}

impl ValueInfo {
    fn per_sample(&self) -> usize {
        self.shape.iter().product()
    }

    fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }
}

#[derive(Debug, Clone)]
struct Node {
    name: String,
    kind: OpKind,
    inputs: Vec<ValueId>,
    params: Vec<usize>,
    output: ValueId,
}

#[derive(Debug, Clone)]
enum Aux<T> {
    None,
    Cols(Vec<T>),
    Argmax(Vec<u32>),
}

#[derive(Debug, Clone)]
struct Activations<T> {
    batch: usize,
    values: Vec<Vec<T>>,
    aux: Vec<Aux<T>>,
    branch: u64,
}

/// A topologically ordered network with its parameters and the activations
/// of the most recent forward pass.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    name: String,
    values: Vec<ValueInfo>,
    inputs: Vec<ValueId>,
    nodes: Vec<Node>,
    outputs: Vec<(String, ValueId)>,
    params: ParamRegistry<T>,
    trainable: bool,
    track_branches: bool,
    sign_flip: Option<usize>,
    acts: Option<Activations<T>>,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv(mut h: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

impl<T: Scalar> Graph<T> {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            values: Vec::new(),
            inputs: Vec::new(),
            nodes: Vec::new(),
            outputs: Vec::new(),
            params: ParamRegistry::default(),
            trainable: true,
            track_branches: false,
            sign_flip: None,
            acts: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    // ---- construction -------------------------------------------------

    fn add_value(&mut self, name: String, shape: Vec<usize>) -> ValueId {
        self.values.push(ValueInfo { name, shape });
        ValueId(self.values.len() - 1)
    }

    fn shape_of(&self, v: ValueId) -> &[usize] {
        &self.values[v.0].shape
    }

    fn qualified(&self, node: &str) -> String {
        format!("{}.{}", self.name, node)
    }

    fn push_node(
        &mut self,
        name: &str,
        kind: OpKind,
        inputs: Vec<ValueId>,
        params: Vec<usize>,
        shape: Vec<usize>,
    ) -> ValueId {
        let output = self.add_value(name.to_string(), shape);
        self.nodes.push(Node {
            name: name.to_string(),
            kind,
            inputs,
            params,
            output,
        });
        output
    }

    /// Declare an input binding with per-sample `shape`.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> ValueId {
        let id = self.add_value(name.to_string(), shape.to_vec());
        self.inputs.push(id);
        id
    }

    fn expect_rank(&self, node: &str, v: ValueId, rank: usize) -> Result<Vec<usize>> {
        let s = self.shape_of(v).to_vec();
        if s.len() != rank {
            return Err(Error::shape(
                self.qualified(node),
                format!("expected rank-{rank} input, got {s:?}"),
            ));
        }
        Ok(s)
    }

    pub fn conv2d(
        &mut self,
        name: &str,
        x: ValueId,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        let s = self.expect_rank(name, x, 3)?;
        let g = ConvGeom::new(s[0], s[1], s[2], out_channels, kernel, stride, pad).ok_or_else(|| {
            Error::shape(
                self.qualified(name),
                format!("kernel {kernel} stride {stride} pad {pad} does not fit input {s:?}"),
            )
        })?;
        let fan_in = s[0] * kernel * kernel;
        let w = self.params.push(
            format!("{}.{name}.weight", self.name),
            ParamRole::Weight { fan_in },
            &[out_channels, s[0], kernel, kernel],
        );
        let b = self
            .params
            .push(format!("{}.{name}.bias", self.name), ParamRole::Bias, &[out_channels]);
        Ok(self.push_node(
            name,
            OpKind::Conv2d { stride, pad, kernel },
            vec![x],
            vec![w, b],
            vec![out_channels, g.ho, g.wo],
        ))
    }

    pub fn leaky_relu(&mut self, name: &str, x: ValueId, slope: f64) -> Result<ValueId> {
        let s = self.shape_of(x).to_vec();
        Ok(self.push_node(name, OpKind::LeakyRelu { slope }, vec![x], vec![], s))
    }

    pub fn relu(&mut self, name: &str, x: ValueId) -> Result<ValueId> {
        self.leaky_relu(name, x, 0.0)
    }

    pub fn sigmoid(&mut self, name: &str, x: ValueId) -> Result<ValueId> {
        let s = self.shape_of(x).to_vec();
        Ok(self.push_node(name, OpKind::Sigmoid, vec![x], vec![], s))
    }

    pub fn max_pool2d(&mut self, name: &str, x: ValueId) -> Result<ValueId> {
        let s = self.expect_rank(name, x, 3)?;
        if s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::shape(
                self.qualified(name),
                format!("2x2 pooling needs even spatial dims, got {s:?}"),
            ));
        }
        Ok(self.push_node(name, OpKind::MaxPool2d, vec![x], vec![], vec![s[0], s[1] / 2, s[2] / 2]))
    }

    pub fn upsample_nearest(&mut self, name: &str, x: ValueId) -> Result<ValueId> {
        let s = self.expect_rank(name, x, 3)?;
        Ok(self.push_node(
            name,
            OpKind::UpsampleNearest,
            vec![x],
            vec![],
            vec![s[0], s[1] * 2, s[2] * 2],
        ))
    }

    pub fn concat_channels(&mut self, name: &str, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::shape(self.qualified(name), "nothing to concatenate"));
        }
        let first = self.expect_rank(name, parts[0], 3)?;
        let mut channels = 0;
        for p in parts {
            let s = self.expect_rank(name, *p, 3)?;
            if s[1..] != first[1..] {
                return Err(Error::shape(
                    self.qualified(name),
                    format!("spatial dims differ: {s:?} vs {first:?}"),
                ));
            }
            channels += s[0];
        }
        Ok(self.push_node(
            name,
            OpKind::ConcatChannels,
            parts.to_vec(),
            vec![],
            vec![channels, first[1], first[2]],
        ))
    }

    pub fn global_avg_pool(&mut self, name: &str, x: ValueId) -> Result<ValueId> {
        let s = self.expect_rank(name, x, 3)?;
        Ok(self.push_node(name, OpKind::GlobalAvgPool, vec![x], vec![], vec![s[0]]))
    }

    pub fn linear(&mut self, name: &str, x: ValueId, out_features: usize) -> Result<ValueId> {
        let s = self.expect_rank(name, x, 1)?;
        let w = self.params.push(
            format!("{}.{name}.weight", self.name),
            ParamRole::Weight { fan_in: s[0] },
            &[out_features, s[0]],
        );
        let b = self
            .params
            .push(format!("{}.{name}.bias", self.name), ParamRole::Bias, &[out_features]);
        Ok(self.push_node(name, OpKind::Linear, vec![x], vec![w, b], vec![out_features]))
    }

    pub fn softmax(&mut self, name: &str, x: ValueId) -> Result<ValueId> {
        let s = self.expect_rank(name, x, 1)?;
        Ok(self.push_node(name, OpKind::Softmax, vec![x], vec![], s))
    }

    pub fn mse(&mut self, name: &str, pred: ValueId, target: ValueId) -> Result<ValueId> {
        if self.shape_of(pred) != self.shape_of(target) {
            return Err(Error::shape(
                self.qualified(name),
                format!("{:?} vs {:?}", self.shape_of(pred), self.shape_of(target)),
            ));
        }
        Ok(self.push_node(name, OpKind::MseReduce, vec![pred, target], vec![], vec![]))
    }

    /// Batch-mean cross entropy against a target distribution, with
    /// probabilities floored at `floor` before the logarithm.
    pub fn cross_entropy(&mut self, name: &str, probs: ValueId, target: ValueId, floor: f64) -> Result<ValueId> {
        let s = self.expect_rank(name, probs, 1)?;
        if self.shape_of(target) != s.as_slice() {
            return Err(Error::shape(
                self.qualified(name),
                format!("target {:?} vs probabilities {s:?}", self.shape_of(target)),
            ));
        }
        Ok(self.push_node(
            name,
            OpKind::CrossEntropyReduce { floor },
            vec![probs, target],
            vec![],
            vec![],
        ))
    }

    /// Batch-mean of `sum_c p_c ln p_c`.
    pub fn neg_entropy(&mut self, name: &str, probs: ValueId) -> Result<ValueId> {
        self.expect_rank(name, probs, 1)?;
        Ok(self.push_node(name, OpKind::NegEntropyReduce, vec![probs], vec![], vec![]))
    }

    pub fn mark_output(&mut self, name: &str, v: ValueId) {
        self.outputs.push((name.to_string(), v));
    }

    // ---- introspection ------------------------------------------------

    pub fn params(&self) -> &ParamRegistry<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamRegistry<T> {
        &mut self.params
    }

    pub fn replace_params(&mut self, params: ParamRegistry<T>) -> Result<()> {
        if params.len() != self.params.len()
            || params
                .iter()
                .zip(self.params.iter())
                .any(|(a, b)| a.name != b.name || a.tensor.shape() != b.tensor.shape())
        {
            return Err(Error::shape(&self.name, "parameter registry does not match graph"));
        }
        self.params = params;
        self.acts = None;
        Ok(())
    }

    pub fn input_ids(&self) -> &[ValueId] {
        &self.inputs
    }

    pub fn input_shape(&self, idx: usize) -> &[usize] {
        self.shape_of(self.inputs[idx])
    }

    pub fn output_id(&self, name: &str) -> Result<ValueId> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::shape(&self.name, format!("no output named {name:?}")))
    }

    pub fn value_shape(&self, v: ValueId) -> &[usize] {
        self.shape_of(v)
    }

    pub fn value_name(&self, v: ValueId) -> &str {
        &self.values[v.0].name
    }

    /// Op kinds present in the graph, in first-use order.
    pub fn op_kinds(&self) -> Vec<&OpKind> {
        let mut seen: Vec<&OpKind> = Vec::new();
        for n in &self.nodes {
            if !seen.iter().any(|k| k.tag() == n.kind.tag()) {
                seen.push(&n.kind);
            }
        }
        seen
    }

    pub fn node_names(&self) -> impl Iterator<Item = (&str, &OpKind)> {
        self.nodes.iter().map(|n| (n.name.as_str(), &n.kind))
    }

    /// When false, backward propagates through the graph to its inputs but
    /// leaves every parameter gradient untouched.
    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Record a fingerprint of every piecewise branch taken (activation
    /// signs, pooling winners, probability floors) during forward.
    pub fn set_track_branches(&mut self, on: bool) {
        self.track_branches = on;
    }

    pub fn branch_fingerprint(&self) -> Option<u64> {
        self.acts.as_ref().map(|a| a.branch)
    }

    /// Negate the input gradients of the named node during backward.
    /// Only used to build negative controls for gradient verification.
    #[doc(hidden)]
    pub fn inject_sign_flip(&mut self, node: &str) -> Result<()> {
        let idx = self
            .nodes
            .iter()
            .position(|n| n.name == node)
            .ok_or_else(|| Error::shape(&self.name, format!("no node named {node:?}")))?;
        self.sign_flip = Some(idx);
        Ok(())
    }

    pub fn batch_size(&self) -> Option<usize> {
        self.acts.as_ref().map(|a| a.batch)
    }

    // ---- evaluation ---------------------------------------------------

    /// Evaluate every node on a batch. `inputs` follow declaration order and
    /// carry a leading batch axis.
    pub fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<()> {
        self.acts = None;
        if inputs.len() != self.inputs.len() {
            return Err(Error::shape(
                &self.name,
                format!("expected {} inputs, got {}", self.inputs.len(), inputs.len()),
            ));
        }
        let batch = inputs.first().and_then(|t| t.shape().first().copied()).unwrap_or(0);
        if batch == 0 {
            return Err(Error::shape(&self.name, "empty batch"));
        }
        let mut values: Vec<Vec<T>> = vec![Vec::new(); self.values.len()];
        for (id, t) in self.inputs.iter().zip(inputs) {
            let info = &self.values[id.0];
            if t.shape().len() != info.shape.len() + 1 || t.shape()[0] != batch || t.shape()[1..] != info.shape[..] {
                return Err(Error::shape(
                    self.qualified(&info.name),
                    format!("expected [{batch}, {:?}], got {:?}", info.shape, t.shape()),
                ));
            }
            values[id.0] = t.data().to_vec();
        }
        let mut aux = Vec::with_capacity(self.nodes.len());
        let mut branch = FNV_OFFSET;
        for node in &self.nodes {
            let (out, a) = self.eval_node(node, &values, batch, &mut branch)?;
            values[node.output.0] = out;
            aux.push(a);
        }
        self.acts = Some(Activations {
            batch,
            values,
            aux,
            branch,
        });
        Ok(())
    }

    fn eval_node(&self, node: &Node, values: &[Vec<T>], batch: usize, branch: &mut u64) -> Result<(Vec<T>, Aux<T>)> {
        let x = &values[node.inputs[0].0];
        let in_shape = self.shape_of(node.inputs[0]);
        let track = self.track_branches;
        Ok(match &node.kind {
            OpKind::Conv2d { stride, pad, kernel } => {
                let g = self.conv_geom(node, *kernel, *stride, *pad);
                let w = self.params.at(node.params[0]).tensor.data();
                let b = self.params.at(node.params[1]).tensor.data();
                let (out, cols) = kernels::conv_forward(x, w, b, &g, batch);
                (out, Aux::Cols(cols))
            }
            OpKind::LeakyRelu { slope } => {
                let s = T::lit(*slope);
                if track {
                    let bits: Vec<u8> = x.iter().map(|v| (*v > T::zero()) as u8).collect();
                    *branch = fnv(*branch, &bits);
                }
                (
                    x.iter().map(|v| if *v > T::zero() { *v } else { s * *v }).collect(),
                    Aux::None,
                )
            }
            OpKind::Sigmoid => (
                x.iter().map(|v| T::one() / (T::one() + (-*v).exp())).collect(),
                Aux::None,
            ),
            OpKind::MaxPool2d => {
                let (out, arg) = kernels::max_pool_forward(x, batch * in_shape[0], in_shape[1], in_shape[2]);
                if track {
                    let bytes: Vec<u8> = arg.iter().flat_map(|a| a.to_le_bytes()).collect();
                    *branch = fnv(*branch, &bytes);
                }
                (out, Aux::Argmax(arg))
            }
            OpKind::UpsampleNearest => (
                kernels::upsample_forward(x, batch * in_shape[0], in_shape[1], in_shape[2]),
                Aux::None,
            ),
            OpKind::ConcatChannels => {
                let out_len = self.values[node.output.0].per_sample();
                let mut out = Vec::with_capacity(batch * out_len);
                for n in 0..batch {
                    for p in &node.inputs {
                        let len = self.values[p.0].per_sample();
                        out.extend_from_slice(&values[p.0][n * len..(n + 1) * len]);
                    }
                }
                (out, Aux::None)
            }
            OpKind::GlobalAvgPool => {
                let plane = in_shape[1] * in_shape[2];
                let inv = T::one() / T::lit(plane as f64);
                (
                    x.chunks_exact(plane)
                        .map(|c| c.iter().copied().sum::<T>() * inv)
                        .collect(),
                    Aux::None,
                )
            }
            OpKind::Linear => {
                let fout = self.values[node.output.0].shape[0];
                let w = self.params.at(node.params[0]).tensor.data();
                let b = self.params.at(node.params[1]).tensor.data();
                (kernels::linear_forward(x, w, b, batch, in_shape[0], fout), Aux::None)
            }
            OpKind::Softmax => (kernels::softmax_rows(x, in_shape[0]), Aux::None),
            OpKind::MseReduce => {
                let t = &values[node.inputs[1].0];
                let sum: T = x.iter().zip(t).map(|(a, b)| (*a - *b) * (*a - *b)).sum();
                (vec![sum / T::lit(x.len() as f64)], Aux::None)
            }
            OpKind::CrossEntropyReduce { floor } => {
                let t = &values[node.inputs[1].0];
                let fl = T::lit(*floor);
                if track {
                    let bits: Vec<u8> = x.iter().map(|p| (*p > fl) as u8).collect();
                    *branch = fnv(*branch, &bits);
                }
                let sum: T = x
                    .iter()
                    .zip(t)
                    .filter(|(_, y)| **y != T::zero())
                    .map(|(p, y)| -*y * p.max(fl).ln())
                    .sum();
                (vec![sum / T::lit(batch as f64)], Aux::None)
            }
            OpKind::NegEntropyReduce => {
                let sum: T = x.iter().filter(|p| **p > T::zero()).map(|p| *p * p.ln()).sum();
                (vec![sum / T::lit(batch as f64)], Aux::None)
            }
        })
    }

    fn conv_geom(&self, node: &Node, kernel: usize, stride: usize, pad: usize) -> ConvGeom {
        let s = self.shape_of(node.inputs[0]);
        let cout = self.values[node.output.0].shape[0];
        ConvGeom::new(s[0], s[1], s[2], cout, kernel, stride, pad).expect("validated at build")
    }

    fn acts(&self) -> Result<&Activations<T>> {
        self.acts
            .as_ref()
            .ok_or_else(|| Error::State(format!("graph {:?} has no forward activations", self.name)))
    }

    /// Activation of `v` from the last forward pass, with its batch axis.
    pub fn value(&self, v: ValueId) -> Result<Tensor<T>> {
        let acts = self.acts()?;
        let info = &self.values[v.0];
        let mut shape = if info.is_scalar() { vec![1] } else { vec![acts.batch] };
        shape.extend_from_slice(&info.shape);
        Tensor::new(&shape, acts.values[v.0].clone())
    }

    pub fn value_data(&self, v: ValueId) -> Result<&[T]> {
        Ok(&self.acts()?.values[v.0])
    }

    pub fn output(&self, name: &str) -> Result<Tensor<T>> {
        self.value(self.output_id(name)?)
    }

    /// Scalar value of a reduction output.
    pub fn scalar_output(&self, name: &str) -> Result<T> {
        let id = self.output_id(name)?;
        let data = self.value_data(id)?;
        if data.len() != 1 {
            return Err(Error::shape(&self.name, format!("output {name:?} is not a scalar")));
        }
        Ok(data[0])
    }

    /// Reverse-mode pass seeded with `seeds` (value, cotangent). Parameter
    /// gradients accumulate into the registry when the graph is trainable;
    /// the returned vector holds the gradient of each input binding, `None`
    /// where no seed reaches it.
    pub fn backward(&mut self, seeds: &[(ValueId, &[T])]) -> Result<Vec<Option<Tensor<T>>>> {
        let acts = self
            .acts
            .take()
            .ok_or_else(|| Error::State(format!("backward on graph {:?} before forward", self.name)))?;
        let result = self.backward_inner(&acts, seeds);
        self.acts = Some(acts);
        result
    }

    fn backward_inner(&mut self, acts: &Activations<T>, seeds: &[(ValueId, &[T])]) -> Result<Vec<Option<Tensor<T>>>> {
        let batch = acts.batch;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.values.len()];
        for (v, g) in seeds {
            if g.len() != acts.values[v.0].len() {
                return Err(Error::shape(
                    self.qualified(&self.values[v.0].name),
                    format!(
                        "seed of length {} for value of length {}",
                        g.len(),
                        acts.values[v.0].len()
                    ),
                ));
            }
            accumulate(&mut grads[v.0], g.to_vec());
        }
        if self.trainable {
            for p in self.params.iter_mut() {
                p.tensor.grad_mut();
            }
        }
        for (ni, node) in self.nodes.iter().enumerate().rev() {
            let Some(dy) = grads[node.output.0].take() else {
                continue;
            };
            let x = &acts.values[node.inputs[0].0];
            let in_shape = self.values[node.inputs[0].0].shape.clone();
            let mut input_grads: Vec<Option<Vec<T>>> = match &node.kind {
                OpKind::Conv2d { stride, pad, kernel } => {
                    let g = self.conv_geom(node, *kernel, *stride, *pad);
                    let Aux::Cols(cols) = &acts.aux[ni] else {
                        unreachable!("conv node without column buffer")
                    };
                    let want_dx = true;
                    let (wi, bi) = (node.params[0], node.params[1]);
                    let weight = self.params.at(wi).tensor.data().to_vec();
                    let dx = if self.trainable {
                        let mut dw = self.params.at_mut(wi).tensor.grad_mut().to_vec();
                        let mut db = self.params.at_mut(bi).tensor.grad_mut().to_vec();
                        let dx =
                            kernels::conv_backward(&dy, x, cols, &weight, &g, batch, Some((&mut dw, &mut db)), want_dx);
                        self.params.at_mut(wi).tensor.grad_mut().copy_from_slice(&dw);
                        self.params.at_mut(bi).tensor.grad_mut().copy_from_slice(&db);
                        dx
                    } else {
                        kernels::conv_backward(&dy, x, cols, &weight, &g, batch, None, want_dx)
                    };
                    vec![dx]
                }
                OpKind::LeakyRelu { slope } => {
                    let s = T::lit(*slope);
                    vec![Some(
                        x.iter()
                            .zip(&dy)
                            .map(|(v, d)| if *v > T::zero() { *d } else { s * *d })
                            .collect(),
                    )]
                }
                OpKind::Sigmoid => {
                    let y = &acts.values[node.output.0];
                    vec![Some(
                        y.iter().zip(&dy).map(|(y, d)| *d * *y * (T::one() - *y)).collect(),
                    )]
                }
                OpKind::MaxPool2d => {
                    let Aux::Argmax(arg) = &acts.aux[ni] else {
                        unreachable!("pool node without argmax buffer")
                    };
                    let mut dx = vec![T::zero(); x.len()];
                    for (a, d) in arg.iter().zip(&dy) {
                        dx[*a as usize] += *d;
                    }
                    vec![Some(dx)]
                }
                OpKind::UpsampleNearest => vec![Some(kernels::upsample_backward(
                    &dy,
                    batch * in_shape[0],
                    in_shape[1],
                    in_shape[2],
                ))],
                OpKind::ConcatChannels => {
                    let out_len = self.values[node.output.0].per_sample();
                    let mut parts: Vec<Vec<T>> = node
                        .inputs
                        .iter()
                        .map(|p| Vec::with_capacity(batch * self.values[p.0].per_sample()))
                        .collect();
                    for n in 0..batch {
                        let mut off = n * out_len;
                        for (pi, p) in node.inputs.iter().enumerate() {
                            let len = self.values[p.0].per_sample();
                            parts[pi].extend_from_slice(&dy[off..off + len]);
                            off += len;
                        }
                    }
                    parts.into_iter().map(Some).collect()
                }
                OpKind::GlobalAvgPool => {
                    let plane = in_shape[1] * in_shape[2];
                    let inv = T::one() / T::lit(plane as f64);
                    let mut dx = Vec::with_capacity(x.len());
                    for d in &dy {
                        dx.extend(std::iter::repeat(*d * inv).take(plane));
                    }
                    vec![Some(dx)]
                }
                OpKind::Linear => {
                    let fin = in_shape[0];
                    let fout = self.values[node.output.0].shape[0];
                    let (wi, bi) = (node.params[0], node.params[1]);
                    let weight = self.params.at(wi).tensor.data().to_vec();
                    let dx = if self.trainable {
                        let mut dw = self.params.at_mut(wi).tensor.grad_mut().to_vec();
                        let mut db = self.params.at_mut(bi).tensor.grad_mut().to_vec();
                        let dx =
                            kernels::linear_backward(&dy, x, &weight, batch, fin, fout, Some((&mut dw, &mut db)), true);
                        self.params.at_mut(wi).tensor.grad_mut().copy_from_slice(&dw);
                        self.params.at_mut(bi).tensor.grad_mut().copy_from_slice(&db);
                        dx
                    } else {
                        kernels::linear_backward(&dy, x, &weight, batch, fin, fout, None, true)
                    };
                    vec![dx]
                }
                OpKind::Softmax => {
                    let p = &acts.values[node.output.0];
                    vec![Some(kernels::softmax_backward(p, &dy, in_shape[0]))]
                }
                OpKind::MseReduce => {
                    let t = &acts.values[node.inputs[1].0];
                    let scale = dy[0] * T::lit(2.0) / T::lit(x.len() as f64);
                    let dp: Vec<T> = x.iter().zip(t).map(|(a, b)| (*a - *b) * scale).collect();
                    let dt: Vec<T> = dp.iter().map(|v| -*v).collect();
                    vec![Some(dp), Some(dt)]
                }
                OpKind::CrossEntropyReduce { floor } => {
                    let t = &acts.values[node.inputs[1].0];
                    let fl = T::lit(*floor);
                    let scale = dy[0] / T::lit(batch as f64);
                    let dp: Vec<T> = x
                        .iter()
                        .zip(t)
                        .map(|(p, y)| if *p > fl { -*y / *p * scale } else { T::zero() })
                        .collect();
                    let dt: Vec<T> = x.iter().map(|p| -p.max(fl).ln() * scale).collect();
                    vec![Some(dp), Some(dt)]
                }
                OpKind::NegEntropyReduce => {
                    let scale = dy[0] / T::lit(batch as f64);
                    vec![Some(
                        x.iter()
                            .map(|p| {
                                if *p > T::zero() {
                                    (p.ln() + T::one()) * scale
                                } else {
                                    T::zero()
                                }
                            })
                            .collect(),
                    )]
                }
            };
            if self.sign_flip == Some(ni) {
                for g in input_grads.iter_mut().flatten() {
                    g.iter_mut().for_each(|v| *v = -*v);
                }
            }
            for (inp, g) in node.inputs.iter().zip(input_grads) {
                if let Some(g) = g {
                    accumulate(&mut grads[inp.0], g);
                }
            }
        }
        Ok(self
            .inputs
            .iter()
            .map(|id| {
                grads[id.0].take().map(|g| {
                    let mut shape = vec![batch];
                    shape.extend_from_slice(&self.values[id.0].shape);
                    Tensor::new(&shape, g).expect("gradient matches input shape")
                })
            })
            .collect())
    }

    /// Whether any node is a scalar reduction (a loss head).
    pub fn has_loss(&self) -> bool {
        self.nodes.iter().any(|n| n.kind.is_reduce())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

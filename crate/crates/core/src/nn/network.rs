//! Declarative layer graph with parameters, forward caching and backward passes.
//!
//! Both networks are small DAGs (a shared trunk with branches, or parallel
//! paths joined by a channel concat), so a [`Network`] is an ordered list of
//! [`Node`]s where every node only reads from earlier nodes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::activation::{relu, relu_backward, relu_in_place, softmax_backward, softmax_channels};
use super::concat::{concat_channels, split_channels};
use super::conv::{conv2d_backward, conv2d_forward, ConvSpec};
use super::linear::{fc_backward, fc_forward, fc_weight_shape};
use super::pool::{
    adaptive_max_pool, adaptive_max_pool_backward, global_avg_pool, global_avg_pool_backward,
    pool_backward, pool_forward, PoolSpec,
};
use crate::error::{Error, Result};
use crate::geometry::RfLayer;
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerSpec {
    Input { channels: usize },
    Conv(ConvSpec),
    Pool(PoolSpec),
    AdaptiveMaxPool { height: usize, width: usize },
    GlobalAvgPool,
    Relu,
    Softmax,
    FullyConnected { in_features: usize, out_features: usize },
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub layer: LayerSpec,
    pub inputs: Vec<NodeId>,
    /// Output channel count.
    pub channels: usize,
}

/// Weight and optional bias of one parametrised layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn numel(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    fn zeros_like(&self) -> Param<T> {
        Param {
            weight: Tensor::zeros(self.weight.shape()).expect("valid shape"),
            bias: self
                .bias
                .as_ref()
                .map(|b| Tensor::zeros(b.shape()).expect("valid shape")),
        }
    }

    fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(Tensor::cast),
        }
    }

    fn all_finite(&self) -> bool {
        self.weight.all_finite() && self.bias.as_ref().is_none_or(Tensor::all_finite)
    }
}

/// Weight initialisation. Biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum InitScheme {
    /// Zero-mean normal with a fixed standard deviation.
    Gaussian { std: f64 },
    /// Zero-mean normal with `std = sqrt(2 / fan_in)`.
    He,
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::Gaussian { std: 0.01 }
    }
}

impl InitScheme {
    fn std(&self, fan_in: usize) -> f64 {
        match *self {
            InitScheme::Gaussian { std } => std,
            InitScheme::He => (2.0 / fan_in as f64).sqrt(),
        }
    }
}

/// Incrementally assembles a [`Network`] in topological order.
#[derive(Debug, Default)]
pub struct NetworkBuilder {
    nodes: Vec<Node>,
}

impl NetworkBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: &str, layer: LayerSpec, inputs: Vec<NodeId>, channels: usize) -> NodeId {
        self.nodes.push(Node {
            name: name.to_string(),
            layer,
            inputs,
            channels,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn channels(&self, id: NodeId) -> usize {
        self.nodes[id.0].channels
    }

    pub fn input(&mut self, name: &str, channels: usize) -> NodeId {
        self.push(name, LayerSpec::Input { channels }, vec![], channels)
    }

    pub fn conv(&mut self, name: &str, from: NodeId, spec: ConvSpec) -> NodeId {
        self.push(name, LayerSpec::Conv(spec), vec![from], spec.out_channels)
    }

    pub fn pool(&mut self, name: &str, from: NodeId, spec: PoolSpec) -> NodeId {
        let c = self.channels(from);
        self.push(name, LayerSpec::Pool(spec), vec![from], c)
    }

    pub fn adaptive_max_pool(&mut self, name: &str, from: NodeId, height: usize, width: usize) -> NodeId {
        let c = self.channels(from);
        self.push(name, LayerSpec::AdaptiveMaxPool { height, width }, vec![from], c)
    }

    pub fn global_avg_pool(&mut self, name: &str, from: NodeId) -> NodeId {
        let c = self.channels(from);
        self.push(name, LayerSpec::GlobalAvgPool, vec![from], c)
    }

    pub fn relu(&mut self, name: &str, from: NodeId) -> NodeId {
        let c = self.channels(from);
        self.push(name, LayerSpec::Relu, vec![from], c)
    }

    pub fn softmax(&mut self, name: &str, from: NodeId) -> NodeId {
        let c = self.channels(from);
        self.push(name, LayerSpec::Softmax, vec![from], c)
    }

    /// Fully-connected layer over a `(C, 1, 1)` input.
    pub fn fc(&mut self, name: &str, from: NodeId, out_features: usize) -> NodeId {
        let in_features = self.channels(from);
        self.push(
            name,
            LayerSpec::FullyConnected {
                in_features,
                out_features,
            },
            vec![from],
            out_features,
        )
    }

    pub fn concat(&mut self, name: &str, inputs: &[NodeId]) -> NodeId {
        let c = inputs.iter().map(|&i| self.channels(i)).sum();
        self.push(name, LayerSpec::Concat, inputs.to_vec(), c)
    }

    /// Convolution followed by ReLU; returns the ReLU node.
    pub fn conv_relu(&mut self, name: &str, from: NodeId, spec: ConvSpec) -> NodeId {
        let c = self.conv(name, from, spec);
        self.relu(&format!("{name}_relu"), c)
    }

    pub fn build(self, init: InitScheme, seed: u64) -> Result<Network<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let p = match &node.layer {
                LayerSpec::Conv(spec) => {
                    let c_in = self.nodes[node.inputs[0].0].channels;
                    let shape = spec.weight_shape(c_in);
                    let fan_in = c_in * spec.kernel.0 * spec.kernel.1;
                    Some(Param {
                        weight: Tensor::gaussian_with(shape, 0.0, init.std(fan_in), &mut rng)?,
                        bias: spec
                            .has_bias
                            .then(|| Tensor::zeros(spec.bias_shape()))
                            .transpose()?,
                    })
                }
                LayerSpec::FullyConnected {
                    in_features,
                    out_features,
                } => Some(Param {
                    weight: Tensor::gaussian_with(
                        fc_weight_shape(*in_features, *out_features),
                        0.0,
                        init.std(*in_features),
                        &mut rng,
                    )?,
                    bias: Some(Tensor::zeros(Shape::new(1, *out_features, 1, 1))?),
                }),
                _ => None,
            };
            params.push(p);
        }
        Network::from_parts(self.nodes, params)
    }
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Activations<T> {
    values: Vec<Option<Tensor<T>>>,
    argmax: Vec<Option<Vec<usize>>>,
}

impl<T: Scalar> Activations<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.values.get_mut(id.0).and_then(Option::take)
    }
}

/// Parameter gradients; `None` marks a layer that received no gradient (frozen).
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: Vec<Option<Param<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Param<T>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// `self += other`, treating missing entries as zero.
    pub fn accumulate(&mut self, other: Gradients<T>) -> Result<()> {
        for (mine, theirs) in self.params.iter_mut().zip(other.params) {
            match (mine.as_mut(), theirs) {
                (_, None) => {}
                (None, Some(t)) => *mine = Some(t),
                (Some(m), Some(t)) => {
                    m.weight.add_assign(&t.weight)?;
                    if let (Some(mb), Some(tb)) = (m.bias.as_mut(), t.bias.as_ref()) {
                        mb.add_assign(tb)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for p in self.params.iter_mut().flatten() {
            p.weight = p.weight.mul_scalar(s);
            if let Some(b) = p.bias.as_mut() {
                *b = b.mul_scalar(s);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().flatten().all(Param::all_finite)
    }
}

/// Layer graph with parameters and SGD momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f32> {
    nodes: Vec<Node>,
    params: Vec<Option<Param<T>>>,
    velocity: Vec<Option<Param<T>>>,
}

impl<T: Scalar> Network<T> {
    pub fn from_parts(nodes: Vec<Node>, params: Vec<Option<Param<T>>>) -> Result<Self> {
        if nodes.len() != params.len() {
            return Err(Error::Format("parameter list does not match node list".into()));
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.inputs.iter().any(|inp| inp.0 >= i) {
                return Err(Error::Format(format!(
                    "node `{}` reads from a later node",
                    node.name
                )));
            }
            let arity_ok = match node.layer {
                LayerSpec::Input { .. } => node.inputs.is_empty(),
                LayerSpec::Concat => !node.inputs.is_empty(),
                _ => node.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(Error::Format(format!("node `{}` has wrong arity", node.name)));
            }
            let has_param = matches!(
                node.layer,
                LayerSpec::Conv(_) | LayerSpec::FullyConnected { .. }
            );
            if has_param != params[i].is_some() {
                return Err(Error::Format(format!(
                    "node `{}` parameter presence mismatch",
                    node.name
                )));
            }
            if let (LayerSpec::Conv(spec), Some(p)) = (&node.layer, &params[i]) {
                let c_in = nodes[node.inputs[0].0].channels;
                if p.weight.shape() != spec.weight_shape(c_in)
                    || p.bias.is_some() != spec.has_bias
                {
                    return Err(Error::Format(format!(
                        "node `{}` weights do not match its spec",
                        node.name
                    )));
                }
            }
        }
        let velocity = params
            .iter()
            .map(|p| p.as_ref().map(Param::zeros_like))
            .collect();
        Ok(Self {
            nodes,
            params,
            velocity,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name).map(NodeId)
    }

    pub fn require(&self, name: &str) -> Result<NodeId> {
        self.find(name)
            .ok_or_else(|| Error::Format(format!("network has no node named `{name}`")))
    }

    pub fn param(&self, id: NodeId) -> Option<&Param<T>> {
        self.params[id.0].as_ref()
    }

    pub fn param_mut(&mut self, id: NodeId) -> Option<&mut Param<T>> {
        self.params[id.0].as_mut()
    }

    pub fn velocity(&self, id: NodeId) -> Option<&Param<T>> {
        self.velocity[id.0].as_ref()
    }

    pub(crate) fn params_and_velocity_mut(
        &mut self,
    ) -> impl Iterator<Item = (NodeId, &mut Param<T>, &mut Param<T>)> {
        self.params
            .iter_mut()
            .zip(self.velocity.iter_mut())
            .enumerate()
            .filter_map(|(i, (p, v))| Some((NodeId(i), p.as_mut()?, v.as_mut()?)))
    }

    /// Total learned scalars: weights plus biases of every layer.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().flatten().map(Param::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().flatten().all(Param::all_finite)
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            nodes: self.nodes.clone(),
            params: self.params.iter().map(|p| p.as_ref().map(Param::cast)).collect(),
            velocity: self.velocity.iter().map(|p| p.as_ref().map(Param::cast)).collect(),
        }
    }

    /// Nodes that `outputs` depend on, including themselves.
    fn ancestors(&self, outputs: &[NodeId]) -> Vec<bool> {
        let mut needed = vec![false; self.nodes.len()];
        for o in outputs {
            needed[o.0] = true;
        }
        for i in (0..self.nodes.len()).rev() {
            if needed[i] {
                for inp in &self.nodes[i].inputs {
                    needed[inp.0] = true;
                }
            }
        }
        needed
    }

    /// Evaluates the nodes needed for `outputs`; everything else stays empty.
    ///
    /// A ReLU whose input feeds nothing else and was not requested rectifies
    /// that tensor in place, so the pre-activation is not kept. No backward
    /// pass reads it.
    pub fn forward(&self, input: &Tensor<T>, outputs: &[NodeId]) -> Result<Activations<T>> {
        let needed = self.ancestors(outputs);
        let n = self.nodes.len();
        let mut consumers = vec![0usize; n];
        for (i, node) in self.nodes.iter().enumerate() {
            if needed[i] {
                for inp in &node.inputs {
                    consumers[inp.0] += 1;
                }
            }
        }
        for o in outputs {
            consumers[o.0] += 1;
        }
        let mut values: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut argmax: Vec<Option<Vec<usize>>> = vec![None; n];
        for i in 0..n {
            if !needed[i] {
                continue;
            }
            let node = &self.nodes[i];
            if matches!(node.layer, LayerSpec::Relu) {
                let src = node.inputs[0].0;
                if consumers[src] == 1 && !matches!(self.nodes[src].layer, LayerSpec::Input { .. }) {
                    let mut t = values[src].take().expect("inputs are evaluated first");
                    relu_in_place(&mut t);
                    values[i] = Some(t);
                    continue;
                }
            }
            let arg = |k: usize| -> &Tensor<T> {
                values[node.inputs[k].0]
                    .as_ref()
                    .expect("inputs are evaluated first")
            };
            let out = match &node.layer {
                LayerSpec::Input { channels } => {
                    if input.shape().channels != *channels {
                        return Err(Error::shape(format!(
                            "network expects {channels} input channels, got {}",
                            input.shape()
                        )));
                    }
                    input.clone()
                }
                LayerSpec::Conv(spec) => {
                    let p = self.params[i].as_ref().expect("conv has params");
                    conv2d_forward(arg(0), spec, &p.weight, p.bias.as_ref())?
                }
                LayerSpec::Pool(spec) => {
                    let (y, a) = pool_forward(arg(0), spec)?;
                    argmax[i] = a;
                    y
                }
                LayerSpec::AdaptiveMaxPool { height, width } => {
                    let (y, a) = adaptive_max_pool(arg(0), *height, *width)?;
                    argmax[i] = Some(a);
                    y
                }
                LayerSpec::GlobalAvgPool => global_avg_pool(arg(0)),
                LayerSpec::Relu => relu(arg(0)),
                LayerSpec::Softmax => softmax_channels(arg(0))?,
                LayerSpec::FullyConnected { .. } => {
                    let p = self.params[i].as_ref().expect("fc has params");
                    fc_forward(arg(0), &p.weight, p.bias.as_ref())?
                }
                LayerSpec::Concat => {
                    let parts: Vec<&Tensor<T>> = (0..node.inputs.len()).map(arg).collect();
                    concat_channels(&parts)?
                }
            };
            values[i] = Some(out);
        }
        Ok(Activations { values, argmax })
    }

    /// Back-propagates `seeds` (gradients at chosen nodes) through the cached forward pass.
    ///
    /// Layers the gradient never reaches get `None` in the result.
    pub fn backward(
        &self,
        acts: &Activations<T>,
        seeds: Vec<(NodeId, Tensor<T>)>,
    ) -> Result<Gradients<T>> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        for (id, g) in seeds {
            accumulate(&mut grads[id.0], g)?;
        }
        let mut param_grads: Vec<Option<Param<T>>> = vec![None; n];
        let value = |id: NodeId| -> Result<&Tensor<T>> {
            acts.values[id.0]
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("node `{}` was not evaluated", self.nodes[id.0].name)))
        };
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let wants = |id: NodeId| !matches!(self.nodes[id.0].layer, LayerSpec::Input { .. });
            match &node.layer {
                LayerSpec::Input { .. } => {}
                LayerSpec::Conv(spec) => {
                    let src = node.inputs[0];
                    let p = self.params[i].as_ref().expect("conv has params");
                    let cg = conv2d_backward(&g, value(src)?, spec, &p.weight, wants(src))?;
                    if let Some(gi) = cg.input {
                        accumulate(&mut grads[src.0], gi)?;
                    }
                    param_grads[i] = Some(Param {
                        weight: cg.weights,
                        bias: cg.bias,
                    });
                }
                LayerSpec::Pool(spec) => {
                    let src = node.inputs[0];
                    if wants(src) {
                        let gi = pool_backward(
                            &g,
                            value(src)?.shape(),
                            spec,
                            acts.argmax[i].as_deref(),
                        )?;
                        accumulate(&mut grads[src.0], gi)?;
                    }
                }
                LayerSpec::AdaptiveMaxPool { .. } => {
                    let src = node.inputs[0];
                    if wants(src) {
                        let arg = acts.argmax[i]
                            .as_deref()
                            .ok_or_else(|| Error::invalid("missing adaptive pool argmax"))?;
                        let gi = adaptive_max_pool_backward(&g, value(src)?.shape(), arg)?;
                        accumulate(&mut grads[src.0], gi)?;
                    }
                }
                LayerSpec::GlobalAvgPool => {
                    let src = node.inputs[0];
                    if wants(src) {
                        let gi = global_avg_pool_backward(&g, value(src)?.shape())?;
                        accumulate(&mut grads[src.0], gi)?;
                    }
                }
                LayerSpec::Relu => {
                    let src = node.inputs[0];
                    if wants(src) {
                        let gi = relu_backward(&g, value(NodeId(i))?)?;
                        accumulate(&mut grads[src.0], gi)?;
                    }
                }
                LayerSpec::Softmax => {
                    let src = node.inputs[0];
                    if wants(src) {
                        let gi = softmax_backward(&g, value(NodeId(i))?)?;
                        accumulate(&mut grads[src.0], gi)?;
                    }
                }
                LayerSpec::FullyConnected { .. } => {
                    let src = node.inputs[0];
                    let p = self.params[i].as_ref().expect("fc has params");
                    let (gi, gw, gb) = fc_backward(&g, value(src)?, &p.weight)?;
                    if wants(src) {
                        accumulate(&mut grads[src.0], gi)?;
                    }
                    param_grads[i] = Some(Param {
                        weight: gw,
                        bias: Some(gb),
                    });
                }
                LayerSpec::Concat => {
                    let counts: Vec<usize> = node
                        .inputs
                        .iter()
                        .map(|&j| value(j).map(|v| v.shape().channels))
                        .collect::<Result<_>>()?;
                    for (&src, part) in node.inputs.iter().zip(split_channels(&g, &counts)?) {
                        if wants(src) {
                            accumulate(&mut grads[src.0], part)?;
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            params: param_grads,
        })
    }

    /// Spatial output size of every node for an `h x w` input; `None` where a
    /// layer does not fit.
    pub fn spatial_sizes(&self, h: usize, w: usize) -> Vec<Option<(usize, usize)>> {
        let mut sizes: Vec<Option<(usize, usize)>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let src = node.inputs.first().and_then(|i| sizes[i.0]);
            let out = match &node.layer {
                LayerSpec::Input { .. } => Some((h, w)),
                LayerSpec::Conv(spec) => src.and_then(|(h, w)| spec.output_size(h, w).ok()),
                LayerSpec::Pool(spec) => src.and_then(|(h, w)| spec.output_size(h, w).ok()),
                LayerSpec::AdaptiveMaxPool { height, width } => src
                    .filter(|&(h, w)| *height <= h && *width <= w)
                    .map(|_| (*height, *width)),
                LayerSpec::GlobalAvgPool | LayerSpec::FullyConnected { .. } => src.map(|_| (1, 1)),
                LayerSpec::Relu | LayerSpec::Softmax => src,
                LayerSpec::Concat => {
                    let all: Option<Vec<_>> = node.inputs.iter().map(|i| sizes[i.0]).collect();
                    all.filter(|v| v.windows(2).all(|p| p[0] == p[1]))
                        .and_then(|v| v.first().copied())
                }
            };
            sizes.push(out);
        }
        sizes
    }

    /// The conv/pool chain from the input to `node`, following first inputs.
    pub fn receptive_chain(&self, node: NodeId) -> Result<Vec<RfLayer>> {
        let mut chain = Vec::new();
        let mut cur = node;
        loop {
            let n = &self.nodes[cur.0];
            match &n.layer {
                LayerSpec::Input { .. } => break,
                LayerSpec::Conv(spec) => {
                    if spec.kernel.0 != spec.kernel.1 {
                        return Err(Error::invalid("receptive field needs square kernels"));
                    }
                    chain.push(RfLayer {
                        kernel: spec.kernel.0,
                        stride: spec.stride,
                        dilation: spec.dilation,
                        pad: spec.pad,
                    });
                }
                LayerSpec::Pool(spec) => chain.push(RfLayer {
                    kernel: spec.kernel,
                    stride: spec.stride,
                    dilation: 1,
                    pad: spec.pad,
                }),
                LayerSpec::Relu | LayerSpec::Softmax => {}
                other => {
                    return Err(Error::invalid(format!(
                        "no fixed receptive field through {other:?}"
                    )))
                }
            }
            cur = n.inputs[0];
        }
        chain.reverse();
        Ok(chain)
    }

    /// Sets every momentum buffer to zero.
    pub fn reset_velocity(&mut self) {
        for v in self.velocity.iter_mut().flatten() {
            *v = v.zeros_like();
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

const MODEL_MAGIC: &[u8; 4] = b"TSRM";
const STATE_MAGIC: &[u8; 4] = b"TSRS";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Text manifest stored at the head of a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub kind: String,
    pub nodes: Vec<Node>,
}

/// Optimiser and sampler state saved next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub iteration: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

fn write_container<W: Write>(w: &mut W, magic: &[u8; 4], header: &[u8], tensors: &[&Tensor<f32>]) -> std::io::Result<()> {
    w.write_all(magic)?;
    w.write_all(&MODEL_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(header)?;
    for t in tensors {
        t.write_snapshot(w)?;
    }
    Ok(())
}

fn read_container_header<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<Vec<u8>> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head)
        .map_err(|e| Error::Format(format!("truncated model header: {e}")))?;
    if &head[..4] != magic {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported model format version {version}")));
    }
    let len = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)
        .map_err(|e| Error::Format(format!("truncated model manifest: {e}")))?;
    Ok(header)
}

impl Network<f32> {
    /// Writes the manifest (layer specs as JSON) followed by every parameter tensor.
    pub fn write_model<W: Write>(&self, w: &mut W, kind: &str) -> Result<()> {
        let manifest = ModelManifest {
            format_version: MODEL_FORMAT_VERSION,
            kind: kind.to_string(),
            nodes: self.nodes.clone(),
        };
        let header = serde_json::to_vec_pretty(&manifest)
            .map_err(|e| Error::Format(e.to_string()))?;
        let tensors: Vec<&Tensor<f32>> = self
            .params
            .iter()
            .flatten()
            .flat_map(|p| std::iter::once(&p.weight).chain(p.bias.as_ref()))
            .collect();
        write_container(w, MODEL_MAGIC, &header, &tensors).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn read_model<R: Read>(r: &mut R) -> Result<(Self, ModelManifest)> {
        let header = read_container_header(r, MODEL_MAGIC)?;
        let manifest: ModelManifest = serde_json::from_slice(&header)
            .map_err(|e| Error::Format(format!("bad model manifest: {e}")))?;
        let mut params = Vec::with_capacity(manifest.nodes.len());
        for node in &manifest.nodes {
            let p = match &node.layer {
                LayerSpec::Conv(spec) => Some(Param {
                    weight: Tensor::read_snapshot(r)?,
                    bias: spec.has_bias.then(|| Tensor::read_snapshot(r)).transpose()?,
                }),
                LayerSpec::FullyConnected { .. } => Some(Param {
                    weight: Tensor::read_snapshot(r)?,
                    bias: Some(Tensor::read_snapshot(r)?),
                }),
                _ => None,
            };
            params.push(p);
        }
        let net = Network::from_parts(manifest.nodes.clone(), params)?;
        Ok((net, manifest))
    }

    pub fn save(&self, path: &Path, kind: &str) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_model(&mut w, kind)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, ModelManifest)> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_model(&mut BufReader::new(f))
    }

    /// Writes the training-state sidecar: iteration, sampler state and momentum buffers.
    pub fn save_state(&self, path: &Path, state: &TrainingState) -> Result<()> {
        let header = serde_json::to_vec_pretty(state).map_err(|e| Error::Format(e.to_string()))?;
        let tensors: Vec<&Tensor<f32>> = self
            .velocity
            .iter()
            .flatten()
            .flat_map(|p| std::iter::once(&p.weight).chain(p.bias.as_ref()))
            .collect();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        write_container(&mut w, STATE_MAGIC, &header, &tensors)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Restores momentum buffers from a sidecar and returns the saved state.
    pub fn load_state(&mut self, path: &Path) -> Result<TrainingState> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let header = read_container_header(&mut r, STATE_MAGIC)?;
        let state: TrainingState = serde_json::from_slice(&header)
            .map_err(|e| Error::Format(format!("bad training state: {e}")))?;
        for v in self.velocity.iter_mut().flatten() {
            let w = Tensor::read_snapshot(&mut r)?;
            if w.shape() != v.weight.shape() {
                return Err(Error::Format("momentum buffer shape mismatch".into()));
            }
            v.weight = w;
            if let Some(b) = v.bias.as_mut() {
                let nb = Tensor::read_snapshot(&mut r)?;
                if nb.shape() != b.shape() {
                    return Err(Error::Format("momentum buffer shape mismatch".into()));
                }
                *b = nb;
            }
        }
        Ok(state)
    }
}

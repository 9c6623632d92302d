//! A small define-then-run reverse-mode graph over the layer kernels.
//!
//! A [`Graph`] is built once per image, evaluated with [`Graph::forward`] and
//! differentiated with [`Graph::backward`], which accumulates into the
//! gradients held by a [`ParamStore`]. Depth maps enter depth-aware nodes as
//! constants and never receive a gradient.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::nnops::{
    self, conv_backward_saved, conv_forward_saved, pool_avg_backward_weighted,
    pool_avg_forward_weighted, window_similarity, ConvSaved, ConvSpec, MaxPoolIndices, PoolSpec,
};
use crate::similarity::{DepthMap, SimilaritySpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Owns every parameter of a model together with its gradient buffer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape()).expect("value has a valid shape");
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }
}

/// Free-function form of [`ParamStore::zero_grad`].
pub fn zero_grad(params: &mut ParamStore) {
    params.zero_grad();
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Depth map and similarity consumed by a depth-aware node.
#[derive(Clone, Debug)]
pub struct DepthInput {
    pub depth: Arc<DepthMap>,
    pub sim: SimilaritySpec,
}

#[derive(Clone, Debug)]
pub enum Op {
    /// Externally supplied tensor; never differentiated.
    Input,
    Param(ParamId),
    /// Inputs `[x, weights]` or `[x, weights, bias]`.
    Conv {
        spec: ConvSpec,
        depth: Option<DepthInput>,
    },
    /// Average (or depth-aware average when `depth` is set) pooling.
    AvgPool {
        spec: PoolSpec,
        depth: Option<DepthInput>,
    },
    MaxPool(PoolSpec),
    Relu,
    GlobalConcat,
    UpsampleNearest {
        height: usize,
        width: usize,
    },
    Add,
    Sum,
    /// Mean softmax cross-entropy against fixed labels; scalar output.
    CrossEntropy {
        labels: Arc<LabelMap>,
        ignore: u8,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
}

#[derive(Debug)]
enum Saved {
    None,
    Conv(ConvSaved),
    Similarity(Option<Vec<f64>>),
    MaxPool(MaxPoolIndices),
    Grad(Tensor),
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: Vec<Option<Tensor>>,
    values: Vec<Option<Tensor>>,
    saved: Vec<Saved>,
    order: Vec<usize>,
    evaluated: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Appends a node. Inputs are validated when the graph is evaluated.
    pub fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        self.nodes.push(Node { op, inputs });
        self.inputs.push(None);
        self.evaluated = false;
        NodeId(self.nodes.len() - 1)
    }

    /// Replaces the inputs of an existing node.
    pub fn rewire(&mut self, node: NodeId, inputs: Vec<NodeId>) -> Result<()> {
        let n = self
            .nodes
            .get_mut(node.0)
            .ok_or_else(|| Error::Graph(format!("node {} does not exist", node.0)))?;
        n.inputs = inputs;
        self.evaluated = false;
        Ok(())
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Input, Vec::new());
        self.inputs[id.0] = Some(value);
        id
    }

    pub fn set_input(&mut self, node: NodeId, value: Tensor) -> Result<()> {
        match self.nodes.get(node.0) {
            Some(Node { op: Op::Input, .. }) => {
                self.inputs[node.0] = Some(value);
                self.evaluated = false;
                Ok(())
            }
            _ => Err(Error::Graph(format!("node {} is not an input", node.0))),
        }
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.push(Op::Param(id), Vec::new())
    }

    pub fn conv(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, spec: ConvSpec) -> NodeId {
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Op::Conv { spec, depth: None }, inputs)
    }

    pub fn depth_conv(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: ConvSpec,
        depth: DepthInput,
    ) -> NodeId {
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            Op::Conv {
                spec,
                depth: Some(depth),
            },
            inputs,
        )
    }

    pub fn avg_pool(&mut self, x: NodeId, spec: PoolSpec) -> NodeId {
        self.push(Op::AvgPool { spec, depth: None }, vec![x])
    }

    pub fn depth_avg_pool(&mut self, x: NodeId, spec: PoolSpec, depth: DepthInput) -> NodeId {
        self.push(
            Op::AvgPool {
                spec,
                depth: Some(depth),
            },
            vec![x],
        )
    }

    pub fn max_pool(&mut self, x: NodeId, spec: PoolSpec) -> NodeId {
        self.push(Op::MaxPool(spec), vec![x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu, vec![x])
    }

    pub fn global_concat(&mut self, x: NodeId) -> NodeId {
        self.push(Op::GlobalConcat, vec![x])
    }

    pub fn upsample_nearest(&mut self, x: NodeId, height: usize, width: usize) -> NodeId {
        self.push(Op::UpsampleNearest { height, width }, vec![x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum, vec![x])
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: Arc<LabelMap>, ignore: u8) -> NodeId {
        self.push(Op::CrossEntropy { labels, ignore }, vec![logits])
    }

    /// Value computed by the last forward pass.
    pub fn value(&self, node: NodeId) -> Result<&Tensor> {
        if !self.evaluated {
            return Err(Error::State("graph has not been evaluated".into()));
        }
        self.values
            .get(node.0)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Graph(format!("node {} has no value", node.0)))
    }

    /// Identifies the linear region the last forward pass landed in: ReLU
    /// input signs and max-pool winners. Two evaluations with equal
    /// patterns lie on the same smooth piece of the network.
    pub fn activation_pattern(&self) -> Result<Vec<usize>> {
        if !self.evaluated {
            return Err(Error::State("graph has not been evaluated".into()));
        }
        let mut pattern = Vec::new();
        for &i in &self.order {
            match (&self.nodes[i].op, &self.saved[i]) {
                (Op::Relu, _) => {
                    let x = self.values[self.nodes[i].inputs[0].0]
                        .as_ref()
                        .expect("evaluated");
                    pattern.extend(x.data().iter().map(|&v| (v > 0.0) as usize));
                }
                (Op::MaxPool(_), Saved::MaxPool(idx)) => pattern.extend_from_slice(idx.argmax()),
                _ => {}
            }
        }
        Ok(pattern)
    }

    /// Topological order via Kahn's algorithm; rejects dangling ids and cycles.
    fn topo_order(&self) -> Result<Vec<usize>> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut users: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, node) in self.nodes.iter().enumerate() {
            for &NodeId(j) in &node.inputs {
                if j >= n {
                    return Err(Error::Graph(format!(
                        "node {i} references missing node {j}"
                    )));
                }
                indegree[i] += 1;
                users[j].push(i);
            }
        }
        let mut ready: Vec<usize> = (0..n).rev().filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop() {
            order.push(i);
            for &u in users[i].iter().rev() {
                indegree[u] -= 1;
                if indegree[u] == 0 {
                    ready.push(u);
                }
            }
        }
        if order.len() != n {
            return Err(Error::Graph("cycle detected".into()));
        }
        Ok(order)
    }

    fn arity(&self, i: usize) -> Result<()> {
        let node = &self.nodes[i];
        let ok = match &node.op {
            Op::Input | Op::Param(_) => node.inputs.is_empty(),
            Op::Conv { spec, .. } => node.inputs.len() == if spec.has_bias { 3 } else { 2 },
            Op::Add => node.inputs.len() == 2,
            _ => node.inputs.len() == 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Graph(format!(
                "node {i} ({:?}) has {} inputs",
                node.op,
                node.inputs.len()
            )))
        }
    }

    /// Evaluates every node.
    pub fn forward(&mut self, params: &ParamStore) -> Result<()> {
        self.evaluated = false;
        let order = self.topo_order()?;
        let n = self.nodes.len();
        let mut values: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut saved: Vec<Saved> = (0..n).map(|_| Saved::None).collect();
        for &i in &order {
            self.arity(i)?;
            let node = &self.nodes[i];
            let arg = |k: usize| -> &Tensor {
                values[node.inputs[k].0]
                    .as_ref()
                    .expect("inputs precede users in topological order")
            };
            let (value, keep) = match &node.op {
                Op::Input => {
                    let v = self.inputs[i]
                        .clone()
                        .ok_or_else(|| Error::State(format!("input node {i} has no value")))?;
                    (v, Saved::None)
                }
                Op::Param(id) => {
                    if id.0 >= params.len() {
                        return Err(Error::Graph(format!("unknown parameter {}", id.0)));
                    }
                    (params.get(*id).value.clone(), Saved::None)
                }
                Op::Conv { spec, depth } => {
                    let x = arg(0);
                    let table = match depth {
                        Some(d) => {
                            let (_, h, w) = x.chw()?;
                            Some(window_similarity(&spec.geometry(h, w)?, &d.depth, &d.sim)?)
                        }
                        None => None,
                    };
                    let bias = spec.has_bias.then(|| arg(2));
                    let (y, s) = conv_forward_saved(spec, arg(1), bias, x, table)?;
                    (y, Saved::Conv(s))
                }
                Op::AvgPool { spec, depth } => {
                    let x = arg(0);
                    let table = match depth {
                        Some(d) => {
                            let (_, h, w) = x.chw()?;
                            Some(window_similarity(&spec.geometry(h, w)?, &d.depth, &d.sim)?)
                        }
                        None => None,
                    };
                    let y = pool_avg_forward_weighted(spec, x, table.as_deref())?;
                    (y, Saved::Similarity(table))
                }
                Op::MaxPool(spec) => {
                    let (y, idx) = nnops::max_pool_forward(spec, arg(0))?;
                    (y, Saved::MaxPool(idx))
                }
                Op::Relu => (nnops::relu_forward(arg(0)), Saved::None),
                Op::GlobalConcat => (nnops::global_pool_concat(arg(0))?, Saved::None),
                Op::UpsampleNearest { height, width } => (
                    nnops::upsample_nearest(arg(0), *height, *width)?,
                    Saved::None,
                ),
                Op::Add => (arg(0).add(arg(1))?, Saved::None),
                Op::Sum => (Tensor::scalar(arg(0).sum()), Saved::None),
                Op::CrossEntropy { labels, ignore } => {
                    let ce = nnops::softmax_cross_entropy(arg(0), labels, *ignore)?;
                    (Tensor::scalar(ce.loss), Saved::Grad(ce.grad_logits))
                }
            };
            values[i] = Some(value);
            saved[i] = keep;
        }
        self.values = values;
        self.saved = saved;
        self.order = order;
        self.evaluated = true;
        Ok(())
    }

    /// Which nodes lie on a path from a trainable parameter.
    fn needs_grad(&self, params: &ParamStore) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for &i in &self.order {
            let node = &self.nodes[i];
            needs[i] = match node.op {
                Op::Input => false,
                Op::Param(id) => params.get(id).trainable,
                _ => node.inputs.iter().any(|j| needs[j.0]),
            };
        }
        needs
    }

    /// Back-propagates from a scalar node, adding into `params` gradients.
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamStore) -> Result<()> {
        if !self.evaluated {
            return Err(Error::State("backward called before forward".into()));
        }
        let root = self.value(loss)?;
        if root.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, node {} has shape {:?}",
                loss.0,
                root.shape()
            )));
        }
        let needs = self.needs_grad(params);
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        let accumulate = |grads: &mut Vec<Option<Tensor>>, j: NodeId, g: Tensor| -> Result<()> {
            match &mut grads[j.0] {
                Some(acc) => acc.add_assign(&g),
                slot => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        };

        for &i in self.order.iter().rev() {
            let Some(g) = grads[i].take() else { continue };
            if !needs[i] {
                continue;
            }
            let node = &self.nodes[i];
            let input = |k: usize| node.inputs[k];
            let value = |k: usize| self.values[node.inputs[k].0].as_ref().expect("evaluated");
            let wants = |k: usize| needs[node.inputs[k].0];
            match (&node.op, &self.saved[i]) {
                (Op::Input, _) => {}
                (Op::Param(id), _) => {
                    params.get_mut(*id).grad.add_assign(&g)?;
                }
                (Op::Conv { spec, .. }, Saved::Conv(s)) => {
                    let (gx, gw, gb) = conv_backward_saved(spec, value(1), s, &g, wants(0))?;
                    if let Some(gx) = gx {
                        accumulate(&mut grads, input(0), gx)?;
                    }
                    if wants(1) {
                        accumulate(&mut grads, input(1), gw)?;
                    }
                    if let (Some(gb), true) = (gb, spec.has_bias && wants(2)) {
                        accumulate(&mut grads, input(2), gb)?;
                    }
                }
                (Op::AvgPool { spec, .. }, Saved::Similarity(table)) => {
                    if wants(0) {
                        let gx = pool_avg_backward_weighted(
                            spec,
                            value(0).shape(),
                            table.as_deref(),
                            &g,
                        )?;
                        accumulate(&mut grads, input(0), gx)?;
                    }
                }
                (Op::MaxPool(_), Saved::MaxPool(idx)) => {
                    if wants(0) {
                        accumulate(&mut grads, input(0), nnops::max_pool_backward(idx, &g)?)?;
                    }
                }
                (Op::Relu, _) => {
                    if wants(0) {
                        accumulate(&mut grads, input(0), nnops::relu_backward(value(0), &g)?)?;
                    }
                }
                (Op::GlobalConcat, _) => {
                    if wants(0) {
                        let gx = nnops::global_pool_concat_backward(value(0).shape(), &g)?;
                        accumulate(&mut grads, input(0), gx)?;
                    }
                }
                (Op::UpsampleNearest { .. }, _) => {
                    if wants(0) {
                        let gx = nnops::upsample_nearest_backward(value(0).shape(), &g)?;
                        accumulate(&mut grads, input(0), gx)?;
                    }
                }
                (Op::Add, _) => {
                    if wants(0) {
                        accumulate(&mut grads, input(0), g.clone())?;
                    }
                    if wants(1) {
                        accumulate(&mut grads, input(1), g)?;
                    }
                }
                (Op::Sum, _) => {
                    if wants(0) {
                        let up = g.data()[0];
                        accumulate(&mut grads, input(0), Tensor::fill(value(0).shape(), up)?)?;
                    }
                }
                (Op::CrossEntropy { .. }, Saved::Grad(grad_logits)) => {
                    if wants(0) {
                        accumulate(&mut grads, input(0), grad_logits.scale(g.data()[0]))?;
                    }
                }
                (op, _) => {
                    return Err(Error::State(format!(
                        "node {i} ({op:?}) is missing its saved forward state"
                    )))
                }
            }
        }
        Ok(())
    }
}

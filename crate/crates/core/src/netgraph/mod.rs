//! Layer-graph models: an immutable DAG of typed layers, forward evaluation
//! with full activation recording, batch-norm folding and the on-disk model
//! formats.
//!
//! Dense blocks are written as explicit `concat` nodes joining earlier
//! feature maps along the channel axis.

mod fold;
mod format;
mod forward;

pub use fold::fold_batchnorm;
pub use format::{
    load_model, load_model_files, model_digest, save_model_files, to_document, to_weights_blob,
    FORMAT_VERSION, WEIGHTS_MAGIC,
};
pub use forward::{eval_layer, ForwardTrace, NodeOutput};
pub(crate) use forward::{per_channel_affine, softmax};

use std::collections::{HashMap, HashSet, VecDeque};

use thiserror::Error;

use crate::tensor::{conv2d_output_extent, Element, Tensor, TensorError};

/// Reserved id through which nodes consume the model input.
pub const INPUT_ID: &str = "input";

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("duplicate node id `{0}`")]
    DuplicateId(String),
    #[error("node `{node}` references unknown input `{input}`")]
    UnknownInput { node: String, input: String },
    #[error("graph contains a cycle through nodes {0:?}")]
    Cycle(Vec<String>),
    #[error("node `{node}` has unknown op `{op}`")]
    UnknownOp { node: String, op: String },
    #[error("node `{node}` is missing weight `{slot}`")]
    MissingWeight { node: String, slot: String },
    #[error("weight `{0}` does not belong to any declared node slot")]
    UnexpectedWeight(String),
    #[error("node `{node}`: inconsistent shapes, {detail}")]
    ShapeInconsistency { node: String, detail: String },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("invalid graph structure: {0}")]
    Structure(String),
    #[error("model document parse error: {0}")]
    Document(String),
    #[error("weights blob is malformed: {0}")]
    Blob(String),
    #[error("input shape {got:?} does not match model input {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("node `{node}` failed: {source}")]
    Node {
        node: String,
        #[source]
        source: TensorError,
    },
    #[error("node `{node}` produced a non-finite value")]
    NonFinite { node: String },
    #[error("batch-norm node `{node}` cannot be folded: {detail}")]
    Unfoldable { node: String, detail: String },
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

/// Operation vocabulary of a [`LayerNode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Conv2d,
    Dense,
    Relu,
    BatchNorm,
    MaxPool,
    AvgPool,
    GlobalAvgPool,
    Concat,
    Softmax,
}

impl OpKind {
    pub const ALL: [OpKind; 9] = [
        OpKind::Conv2d,
        OpKind::Dense,
        OpKind::Relu,
        OpKind::BatchNorm,
        OpKind::MaxPool,
        OpKind::AvgPool,
        OpKind::GlobalAvgPool,
        OpKind::Concat,
        OpKind::Softmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::Dense => "dense",
            OpKind::Relu => "relu",
            OpKind::BatchNorm => "batchnorm",
            OpKind::MaxPool => "maxpool",
            OpKind::AvgPool => "avgpool",
            OpKind::GlobalAvgPool => "globalavgpool",
            OpKind::Concat => "concat",
            OpKind::Softmax => "softmax",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Named weight slots, in file order.
    pub fn weight_slots(self) -> &'static [&'static str] {
        match self {
            OpKind::Conv2d => &["kernel", "bias"],
            OpKind::Dense => &["weight", "bias"],
            OpKind::BatchNorm => &["gamma", "beta", "running_mean", "running_var"],
            _ => &[],
        }
    }
}

/// Inference-mode batch normalization over axis 0.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T: Element = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub epsilon: f64,
}

impl<T: Element> BatchNorm<T> {
    /// Per-channel `(scale, shift)` such that `y = scale * x + shift`.
    pub fn affine(&self) -> (Vec<T>, Vec<T>) {
        let eps = T::lit(self.epsilon);
        let scale: Vec<T> = self
            .gamma
            .data()
            .iter()
            .zip(self.running_var.data())
            .map(|(&g, &v)| g / (v + eps).sqrt())
            .collect();
        let shift = self
            .beta
            .data()
            .iter()
            .zip(self.running_mean.data())
            .zip(&scale)
            .map(|((&b, &m), &s)| b - m * s)
            .collect();
        (scale, shift)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T: Element = f32> {
    Conv2d {
        kernel: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        padding: usize,
    },
    Dense {
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    Relu,
    BatchNorm(BatchNorm<T>),
    MaxPool {
        window: usize,
        stride: usize,
    },
    AvgPool {
        window: usize,
        stride: usize,
    },
    /// `[C,H,W] -> [C]`
    GlobalAvgPool,
    /// Concatenation along axis 0 (channels).
    Concat,
    Softmax,
}

impl<T: Element> Layer<T> {
    pub fn kind(&self) -> OpKind {
        match self {
            Layer::Conv2d { .. } => OpKind::Conv2d,
            Layer::Dense { .. } => OpKind::Dense,
            Layer::Relu => OpKind::Relu,
            Layer::BatchNorm(_) => OpKind::BatchNorm,
            Layer::MaxPool { .. } => OpKind::MaxPool,
            Layer::AvgPool { .. } => OpKind::AvgPool,
            Layer::GlobalAvgPool => OpKind::GlobalAvgPool,
            Layer::Concat => OpKind::Concat,
            Layer::Softmax => OpKind::Softmax,
        }
    }

    /// Weight tensors paired with their slot names, in file order.
    pub fn weights(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Layer::Conv2d { kernel, bias, .. } => vec![("kernel", kernel), ("bias", bias)],
            Layer::Dense { weight, bias } => vec![("weight", weight), ("bias", bias)],
            Layer::BatchNorm(bn) => vec![
                ("gamma", &bn.gamma),
                ("beta", &bn.beta),
                ("running_mean", &bn.running_mean),
                ("running_var", &bn.running_var),
            ],
            _ => Vec::new(),
        }
    }

    pub fn cast<U: Element>(&self) -> Layer<U> {
        match self {
            Layer::Conv2d {
                kernel,
                bias,
                stride,
                padding,
            } => Layer::Conv2d {
                kernel: kernel.cast(),
                bias: bias.cast(),
                stride: *stride,
                padding: *padding,
            },
            Layer::Dense { weight, bias } => Layer::Dense {
                weight: weight.cast(),
                bias: bias.cast(),
            },
            Layer::Relu => Layer::Relu,
            Layer::BatchNorm(bn) => Layer::BatchNorm(BatchNorm {
                gamma: bn.gamma.cast(),
                beta: bn.beta.cast(),
                running_mean: bn.running_mean.cast(),
                running_var: bn.running_var.cast(),
                epsilon: bn.epsilon,
            }),
            Layer::MaxPool { window, stride } => Layer::MaxPool {
                window: *window,
                stride: *stride,
            },
            Layer::AvgPool { window, stride } => Layer::AvgPool {
                window: *window,
                stride: *stride,
            },
            Layer::GlobalAvgPool => Layer::GlobalAvgPool,
            Layer::Concat => Layer::Concat,
            Layer::Softmax => Layer::Softmax,
        }
    }

    /// Output shape for the given input shapes, checking weight geometry.
    pub fn infer_shape(&self, inputs: &[&[usize]]) -> std::result::Result<Vec<usize>, String> {
        let single = || -> std::result::Result<&[usize], String> {
            match inputs {
                [one] => Ok(one),
                _ => Err(format!("expects exactly one input, got {}", inputs.len())),
            }
        };
        match self {
            Layer::Conv2d {
                kernel,
                bias,
                stride,
                padding,
            } => {
                let x = single()?;
                let &[c, h, w] = x else {
                    return Err(format!("conv2d input must be [C,H,W], got {x:?}"));
                };
                let &[co, ci, kh, kw] = kernel.shape() else {
                    return Err(format!("kernel must be rank 4, got {:?}", kernel.shape()));
                };
                if ci != c {
                    return Err(format!("kernel has {ci} input channels, input has {c}"));
                }
                if bias.shape() != [co] {
                    return Err(format!(
                        "bias {:?} does not match {co} outputs",
                        bias.shape()
                    ));
                }
                let oh = conv2d_output_extent(h, kh, *stride, *padding);
                let ow = conv2d_output_extent(w, kw, *stride, *padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok(vec![co, oh, ow]),
                    _ => Err(format!(
                        "kernel {kh}x{kw} stride {stride} padding {padding} invalid for {h}x{w}"
                    )),
                }
            }
            Layer::Dense { weight, bias } => {
                let x = single()?;
                let n: usize = x.iter().product();
                let &[m, wn] = weight.shape() else {
                    return Err(format!("weight must be rank 2, got {:?}", weight.shape()));
                };
                if wn != n {
                    return Err(format!("weight expects {wn} inputs, input {x:?} has {n}"));
                }
                if bias.shape() != [m] {
                    return Err(format!(
                        "bias {:?} does not match {m} outputs",
                        bias.shape()
                    ));
                }
                Ok(vec![m])
            }
            Layer::Relu | Layer::Softmax => Ok(single()?.to_vec()),
            Layer::BatchNorm(bn) => {
                let x = single()?;
                let c = x[0];
                for (name, t) in [
                    ("gamma", &bn.gamma),
                    ("beta", &bn.beta),
                    ("running_mean", &bn.running_mean),
                    ("running_var", &bn.running_var),
                ] {
                    if t.shape() != [c] {
                        return Err(format!(
                            "{name} {:?} does not match {c} channels",
                            t.shape()
                        ));
                    }
                }
                if bn.running_var.data().iter().any(|&v| v < T::zero()) {
                    return Err("running_var must be non-negative".into());
                }
                if !(bn.epsilon >= 0.0 && bn.epsilon.is_finite()) {
                    return Err(format!("epsilon {} must be non-negative", bn.epsilon));
                }
                Ok(x.to_vec())
            }
            Layer::MaxPool { window, stride } | Layer::AvgPool { window, stride } => {
                let x = single()?;
                let &[c, h, w] = x else {
                    return Err(format!("pooling input must be [C,H,W], got {x:?}"));
                };
                if *window == 0 || *stride == 0 || *window > h || *window > w {
                    return Err(format!(
                        "window {window} stride {stride} invalid for {h}x{w}"
                    ));
                }
                Ok(vec![
                    c,
                    (h - window) / stride + 1,
                    (w - window) / stride + 1,
                ])
            }
            Layer::GlobalAvgPool => {
                let x = single()?;
                match x {
                    [c, _, _] => Ok(vec![*c]),
                    _ => Err(format!("globalavgpool input must be [C,H,W], got {x:?}")),
                }
            }
            Layer::Concat => {
                if inputs.len() < 2 {
                    return Err(format!(
                        "concat needs at least 2 inputs, got {}",
                        inputs.len()
                    ));
                }
                let first = inputs[0];
                let mut channels = 0;
                for s in inputs {
                    if s.len() != first.len() || s[1..] != first[1..] {
                        return Err(format!(
                            "concat inputs disagree on non-channel extents: {first:?} vs {s:?}"
                        ));
                    }
                    channels += s[0];
                }
                let mut out = first.to_vec();
                out[0] = channels;
                Ok(out)
            }
        }
    }
}

/// Where a node reads one of its inputs from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Input,
    Node(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode<T: Element = f32> {
    pub id: String,
    pub inputs: Vec<String>,
    pub layer: Layer<T>,
}

impl<T: Element> LayerNode<T> {
    pub fn new(id: impl Into<String>, inputs: &[&str], layer: Layer<T>) -> Self {
        Self {
            id: id.into(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            layer,
        }
    }
}

/// Validated, topologically ordered layer graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T: Element = f32> {
    input_shape: Vec<usize>,
    nodes: Vec<LayerNode<T>>,
    sources: Vec<Vec<Source>>,
    shapes: Vec<Vec<usize>>,
    index: HashMap<String, usize>,
    output: usize,
    prelogits: usize,
}

impl<T: Element> ModelGraph<T> {
    /// Validates and topologically sorts `nodes`.
    ///
    /// Sorting is stable: nodes already in dependency order keep their order.
    pub fn new(
        input_shape: Vec<usize>,
        nodes: Vec<LayerNode<T>>,
        output_id: &str,
        prelogits_id: &str,
    ) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(GraphError::Structure(format!(
                "input shape {input_shape:?} must be non-empty with positive extents"
            )));
        }
        let nodes = topo_sort(nodes)?;
        let index: HashMap<String, usize> = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.clone(), i))
            .collect();
        let sources: Vec<Vec<Source>> = nodes
            .iter()
            .map(|n| {
                n.inputs
                    .iter()
                    .map(|s| {
                        if s == INPUT_ID {
                            Source::Input
                        } else {
                            Source::Node(index[s])
                        }
                    })
                    .collect()
            })
            .collect();

        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            let ins: Vec<&[usize]> = sources[i]
                .iter()
                .map(|s| match *s {
                    Source::Input => input_shape.as_slice(),
                    Source::Node(j) => shapes[j].as_slice(),
                })
                .collect();
            let shape =
                node.layer
                    .infer_shape(&ins)
                    .map_err(|detail| GraphError::ShapeInconsistency {
                        node: node.id.clone(),
                        detail,
                    })?;
            shapes.push(shape);
        }

        let lookup = |id: &str, what: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| GraphError::Structure(format!("{what} `{id}` is not a node")))
        };
        let output = lookup(output_id, "output_id")?;
        let prelogits = lookup(prelogits_id, "prelogits_id")?;

        for (i, node) in nodes.iter().enumerate() {
            if node.layer.kind() == OpKind::Softmax {
                if i != output {
                    return Err(GraphError::Structure(format!(
                        "softmax node `{}` must be the terminal output node",
                        node.id
                    )));
                }
                if sources[i] != [Source::Node(prelogits)] {
                    return Err(GraphError::Structure(format!(
                        "prelogits_id `{prelogits_id}` must be the sole input of softmax `{}`",
                        node.id
                    )));
                }
            }
        }
        if nodes[prelogits].layer.kind() == OpKind::Softmax {
            return Err(GraphError::Structure(
                "prelogits node cannot be a softmax".into(),
            ));
        }
        if nodes[output].layer.kind() != OpKind::Softmax && prelogits != output {
            return Err(GraphError::Structure(format!(
                "without a softmax terminal, prelogits_id must equal output_id `{output_id}`"
            )));
        }
        for (i, node) in nodes.iter().enumerate() {
            let consumed = sources.iter().flatten().any(|s| *s == Source::Node(i));
            if i != output && !consumed {
                return Err(GraphError::Structure(format!(
                    "node `{}` is neither consumed nor the output",
                    node.id
                )));
            }
        }

        Ok(Self {
            input_shape,
            nodes,
            sources,
            shapes,
            index,
            output,
            prelogits,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn nodes(&self) -> &[LayerNode<T>] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, idx: usize) -> &LayerNode<T> {
        &self.nodes[idx]
    }

    pub fn sources(&self, idx: usize) -> &[Source] {
        &self.sources[idx]
    }

    /// Statically inferred output shape of node `idx`.
    pub fn shape(&self, idx: usize) -> &[usize] {
        &self.shapes[idx]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn require(&self, id: &str) -> Result<usize> {
        self.index_of(id)
            .ok_or_else(|| GraphError::UnknownNode(id.to_string()))
    }

    pub fn output_index(&self) -> usize {
        self.output
    }

    pub fn prelogits_index(&self) -> usize {
        self.prelogits
    }

    pub fn output_id(&self) -> &str {
        &self.nodes[self.output].id
    }

    pub fn prelogits_id(&self) -> &str {
        &self.nodes[self.prelogits].id
    }

    pub fn num_classes(&self) -> usize {
        self.shapes[self.prelogits].iter().product()
    }

    /// Indices of the nodes that read node `idx`.
    pub fn consumers(&self, idx: usize) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&j| self.sources[j].contains(&Source::Node(idx)))
            .collect()
    }

    pub fn cast<U: Element>(&self) -> ModelGraph<U> {
        ModelGraph {
            input_shape: self.input_shape.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| LayerNode {
                    id: n.id.clone(),
                    inputs: n.inputs.clone(),
                    layer: n.layer.cast(),
                })
                .collect(),
            sources: self.sources.clone(),
            shapes: self.shapes.clone(),
            index: self.index.clone(),
            output: self.output,
            prelogits: self.prelogits,
        }
    }

    /// Same topology with every layer replaced; re-validated.
    pub fn with_layers(&self, layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.len() != self.nodes.len() {
            return Err(GraphError::Structure(format!(
                "expected {} layers, got {}",
                self.nodes.len(),
                layers.len()
            )));
        }
        let nodes = self
            .nodes
            .iter()
            .zip(layers)
            .map(|(n, layer)| LayerNode {
                id: n.id.clone(),
                inputs: n.inputs.clone(),
                layer,
            })
            .collect();
        Self::new(
            self.input_shape.clone(),
            nodes,
            self.output_id(),
            self.prelogits_id(),
        )
    }

    /// The same model truncated at its pre-softmax layer.
    pub fn without_softmax(&self) -> Result<Self> {
        if self.output == self.prelogits {
            return Ok(self.clone());
        }
        let nodes = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != self.output)
            .map(|(_, n)| n.clone())
            .collect();
        let id = self.prelogits_id().to_string();
        Self::new(self.input_shape.clone(), nodes, &id, &id)
    }

    /// Class index with the largest pre-softmax activation (ties → lowest)
    /// together with the pre-softmax activations.
    pub fn predict(&self, x: &Tensor<T>) -> Result<(usize, Tensor<T>)> {
        let trace = self.forward(x)?;
        let prelogits = trace.output(self.prelogits).clone();
        Ok((prelogits.argmax(), prelogits))
    }
}

fn topo_sort<T: Element>(nodes: Vec<LayerNode<T>>) -> Result<Vec<LayerNode<T>>> {
    let mut seen = HashSet::new();
    for n in &nodes {
        if n.id == INPUT_ID {
            return Err(GraphError::Structure(format!(
                "`{INPUT_ID}` is reserved for the model input"
            )));
        }
        if !seen.insert(n.id.as_str()) {
            return Err(GraphError::DuplicateId(n.id.clone()));
        }
    }
    let pos: HashMap<&str, usize> = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.id.as_str(), i))
        .collect();
    let mut indegree = vec![0usize; nodes.len()];
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for (i, n) in nodes.iter().enumerate() {
        if n.inputs.is_empty() {
            return Err(GraphError::Structure(format!(
                "node `{}` has no inputs",
                n.id
            )));
        }
        for input in &n.inputs {
            if input == INPUT_ID {
                continue;
            }
            let Some(&j) = pos.get(input.as_str()) else {
                return Err(GraphError::UnknownInput {
                    node: n.id.clone(),
                    input: input.clone(),
                });
            };
            indegree[i] += 1;
            users[j].push(i);
        }
    }
    // Kahn's algorithm, always releasing the lowest original position first.
    let mut ready: VecDeque<usize> = (0..nodes.len()).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(i) = pop_min(&mut ready) {
        order.push(i);
        for &u in &users[i] {
            indegree[u] -= 1;
            if indegree[u] == 0 {
                ready.push_back(u);
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck = (0..nodes.len())
            .filter(|&i| indegree[i] > 0)
            .map(|i| nodes[i].id.clone())
            .collect();
        return Err(GraphError::Cycle(stuck));
    }
    let mut slots: Vec<Option<LayerNode<T>>> = nodes.into_iter().map(Some).collect();
    Ok(order
        .into_iter()
        .map(|i| slots[i].take().unwrap())
        .collect())
}

fn pop_min(queue: &mut VecDeque<usize>) -> Option<usize> {
    let (pos, _) = queue.iter().enumerate().min_by_key(|(_, &v)| v)?;
    queue.remove(pos)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn dense(w: &[f64], rows: usize, b: &[f64]) -> Layer<f64> {
        Layer::Dense {
            weight: Tensor::from_f64(vec![rows, w.len() / rows], w).unwrap(),
            bias: Tensor::from_f64(vec![b.len()], b).unwrap(),
        }
    }

    #[test]
    fn sorts_out_of_order_nodes() {
        let nodes = vec![
            LayerNode::new("b", &["a"], Layer::Relu),
            LayerNode::new("a", &[INPUT_ID], dense(&[2., -1.], 1, &[0.])),
        ];
        let g = ModelGraph::new(vec![2], nodes, "b", "b").unwrap();
        assert_eq!(g.node(0).id, "a");
        assert_eq!(g.node(1).id, "b");
        assert_eq!(g.shape(1), &[1]);
    }

    #[test]
    fn detects_cycles() {
        let nodes = vec![
            LayerNode::new("a", &["b"], Layer::<f64>::Relu),
            LayerNode::new("b", &["a"], Layer::Relu),
        ];
        assert!(matches!(
            ModelGraph::new(vec![2], nodes, "b", "b"),
            Err(GraphError::Cycle(_))
        ));
    }

    #[test]
    fn rejects_duplicate_and_unknown_ids() {
        let dup = vec![
            LayerNode::new("a", &[INPUT_ID], Layer::<f64>::Relu),
            LayerNode::new("a", &["a"], Layer::Relu),
        ];
        assert!(matches!(
            ModelGraph::new(vec![2], dup, "a", "a"),
            Err(GraphError::DuplicateId(_))
        ));
        let unknown = vec![LayerNode::new("a", &["zzz"], Layer::<f64>::Relu)];
        assert!(matches!(
            ModelGraph::new(vec![2], unknown, "a", "a"),
            Err(GraphError::UnknownInput { .. })
        ));
    }

    #[test]
    fn softmax_must_be_terminal_with_prelogits_input() {
        let nodes = vec![
            LayerNode::new("fc", &[INPUT_ID], dense(&[1., 0., 0., 1.], 2, &[0., 0.])),
            LayerNode::new("sm", &["fc"], Layer::Softmax),
            LayerNode::new("after", &["sm"], Layer::Relu),
        ];
        assert!(ModelGraph::new(vec![2], nodes, "after", "fc").is_err());

        let nodes = vec![
            LayerNode::new("fc", &[INPUT_ID], dense(&[1., 0., 0., 1.], 2, &[0., 0.])),
            LayerNode::new("r", &["fc"], Layer::Relu),
            LayerNode::new("sm", &["r"], Layer::Softmax),
        ];
        assert!(ModelGraph::new(vec![2], nodes.clone(), "sm", "fc").is_err());
        let g = ModelGraph::new(vec![2], nodes, "sm", "r").unwrap();
        assert_eq!(g.prelogits_id(), "r");
        assert_eq!(g.num_classes(), 2);
    }

    #[test]
    fn concat_requires_matching_spatial_extent() {
        let conv = |co: usize, k: usize| Layer::<f64>::Conv2d {
            kernel: Tensor::zeros(vec![co, 1, k, k]).unwrap(),
            bias: Tensor::zeros(vec![co]).unwrap(),
            stride: 1,
            padding: 0,
        };
        let nodes = vec![
            LayerNode::new("a", &[INPUT_ID], conv(2, 1)),
            LayerNode::new("b", &[INPUT_ID], conv(3, 3)),
            LayerNode::new("cat", &["a", "b"], Layer::Concat),
        ];
        assert!(matches!(
            ModelGraph::new(vec![1, 4, 4], nodes, "cat", "cat"),
            Err(GraphError::ShapeInconsistency { .. })
        ));
        let nodes = vec![
            LayerNode::new("a", &[INPUT_ID], conv(2, 1)),
            LayerNode::new("b", &[INPUT_ID], conv(3, 1)),
            LayerNode::new("cat", &["a", "b"], Layer::Concat),
        ];
        let g = ModelGraph::new(vec![1, 4, 4], nodes, "cat", "cat").unwrap();
        assert_eq!(g.shape(2), &[5, 4, 4]);
    }

    #[test]
    fn weight_shape_inconsistency_is_reported() {
        let nodes = vec![LayerNode::new(
            "fc",
            &[INPUT_ID],
            dense(&[1., 2., 3.], 1, &[0.]),
        )];
        let err = ModelGraph::new(vec![2], nodes, "fc", "fc").unwrap_err();
        assert!(matches!(err, GraphError::ShapeInconsistency { ref node, .. } if node == "fc"));
    }

    #[test]
    fn without_softmax_keeps_prelogits() {
        let nodes = vec![
            LayerNode::new("fc", &[INPUT_ID], dense(&[1., 0., 0., 1.], 2, &[0., 0.])),
            LayerNode::new("sm", &["fc"], Layer::Softmax),
        ];
        let g = ModelGraph::new(vec![2], nodes, "sm", "fc").unwrap();
        let h = g.without_softmax().unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(h.output_id(), "fc");
    }
}

use std::collections::HashMap;

use super::{GraphError, Layer, ModelGraph, Result, Source};
use crate::tensor::{
    conv2d_forward, dense_forward, pool_forward, Element, PoolKind, Tensor, TensorError,
};

/// Output of a single layer evaluation plus the routing records that its
/// backward rules need.
#[derive(Debug, Clone)]
pub struct NodeOutput<T: Element> {
    pub output: Tensor<T>,
    /// Flat input index chosen by each max-pool output element.
    pub argmax: Option<Vec<usize>>,
    /// ReLU activity (`input > 0`) per element.
    pub relu_mask: Option<Vec<bool>>,
}

impl<T: Element> NodeOutput<T> {
    fn plain(output: Tensor<T>) -> Self {
        Self {
            output,
            argmax: None,
            relu_mask: None,
        }
    }
}

/// Evaluates one layer on already computed inputs (inference mode).
pub fn eval_layer<T: Element>(
    layer: &Layer<T>,
    inputs: &[&Tensor<T>],
) -> std::result::Result<NodeOutput<T>, TensorError> {
    let x = inputs[0];
    Ok(match layer {
        Layer::Conv2d {
            kernel,
            bias,
            stride,
            padding,
        } => NodeOutput::plain(conv2d_forward(x, kernel, Some(bias), *stride, *padding)?),
        Layer::Dense { weight, bias } => NodeOutput::plain(dense_forward(x, weight, Some(bias))?),
        Layer::Relu => {
            let mask: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
            let out = x.map(|v| if v > T::zero() { v } else { T::zero() })?;
            NodeOutput {
                output: out,
                argmax: None,
                relu_mask: Some(mask),
            }
        }
        Layer::BatchNorm(bn) => {
            let (scale, shift) = bn.affine();
            NodeOutput::plain(per_channel_affine(x, &scale, &shift)?)
        }
        Layer::MaxPool { window, stride } => {
            let p = pool_forward(x, PoolKind::Max, *window, *stride)?;
            NodeOutput {
                output: p.output,
                argmax: p.argmax,
                relu_mask: None,
            }
        }
        Layer::AvgPool { window, stride } => {
            NodeOutput::plain(pool_forward(x, PoolKind::Average, *window, *stride)?.output)
        }
        Layer::GlobalAvgPool => {
            let (c, h, w) = x.chw()?;
            let inv = T::one() / T::lit((h * w) as f64);
            let means = x
                .data()
                .chunks(h * w)
                .map(|plane| {
                    let mut acc = T::zero();
                    for &v in plane {
                        acc += v;
                    }
                    acc * inv
                })
                .collect();
            NodeOutput::plain(Tensor::new(vec![c], means)?)
        }
        Layer::Concat => {
            let mut shape = x.shape().to_vec();
            shape[0] = inputs.iter().map(|t| t.shape()[0]).sum();
            let mut data = Vec::with_capacity(shape.iter().product());
            for t in inputs {
                data.extend_from_slice(t.data());
            }
            NodeOutput::plain(Tensor::new(shape, data)?)
        }
        Layer::Softmax => NodeOutput::plain(softmax(x)?),
    })
}

/// `y[c, ...] = scale[c] * x[c, ...] + shift[c]` over axis 0.
pub(crate) fn per_channel_affine<T: Element>(
    x: &Tensor<T>,
    scale: &[T],
    shift: &[T],
) -> std::result::Result<Tensor<T>, TensorError> {
    let c = x.shape()[0];
    let inner = x.len() / c;
    let data = x
        .data()
        .chunks(inner)
        .enumerate()
        .flat_map(|(ch, plane)| plane.iter().map(move |&v| scale[ch] * v + shift[ch]))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Numerically stable softmax over all elements.
pub(crate) fn softmax<T: Element>(x: &Tensor<T>) -> std::result::Result<Tensor<T>, TensorError> {
    let max = x.data().iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = x.data().iter().map(|&v| (v - max).exp()).collect();
    let mut total = T::zero();
    for &e in &exps {
        total += e;
    }
    Tensor::new(
        x.shape().to_vec(),
        exps.into_iter().map(|e| e / total).collect(),
    )
}

/// Activations recorded by one forward pass, one entry per node.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T: Element> {
    input: Tensor<T>,
    nodes: Vec<NodeOutput<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> ForwardTrace<T> {
    pub fn input(&self) -> &Tensor<T> {
        &self.input
    }

    pub fn output(&self, idx: usize) -> &Tensor<T> {
        &self.nodes[idx].output
    }

    pub fn node(&self, idx: usize) -> &NodeOutput<T> {
        &self.nodes[idx]
    }

    pub fn get(&self, id: &str) -> Option<&Tensor<T>> {
        self.index.get(id).map(|&i| &self.nodes[i].output)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tensor feeding `source`.
    pub fn source(&self, source: Source) -> &Tensor<T> {
        match source {
            Source::Input => &self.input,
            Source::Node(j) => &self.nodes[j].output,
        }
    }
}

impl<T: Element> ModelGraph<T> {
    /// Runs the model on `x`, recording every node's activation.
    pub fn forward(&self, x: &Tensor<T>) -> Result<ForwardTrace<T>> {
        if x.shape() != self.input_shape() {
            return Err(GraphError::InputShape {
                expected: self.input_shape().to_vec(),
                got: x.shape().to_vec(),
            });
        }
        let mut nodes: Vec<NodeOutput<T>> = Vec::with_capacity(self.len());
        for (i, node) in self.nodes().iter().enumerate() {
            let inputs: Vec<&Tensor<T>> = self
                .sources(i)
                .iter()
                .map(|s| match *s {
                    Source::Input => x,
                    Source::Node(j) => &nodes[j].output,
                })
                .collect();
            let out = eval_layer(&node.layer, &inputs).map_err(|e| match e {
                TensorError::NonFinite { .. } => GraphError::NonFinite {
                    node: node.id.clone(),
                },
                other => GraphError::Node {
                    node: node.id.clone(),
                    source: other,
                },
            })?;
            debug_assert_eq!(out.output.shape(), self.shape(i));
            nodes.push(out);
        }
        Ok(ForwardTrace {
            input: x.clone(),
            nodes,
            index: self
                .nodes()
                .iter()
                .enumerate()
                .map(|(i, n)| (n.id.clone(), i))
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{LayerNode, INPUT_ID};
    use super::*;
    use proptest::prelude::*;

    fn one_dense() -> ModelGraph<f64> {
        let nodes = vec![LayerNode::new(
            "fc",
            &[INPUT_ID],
            Layer::Dense {
                weight: Tensor::<f64>::from_f64(vec![1, 2], &[2., -1.]).unwrap(),
                bias: Tensor::<f64>::from_f64(vec![1], &[0.]).unwrap(),
            },
        )];
        ModelGraph::new(vec![2], nodes, "fc", "fc").unwrap()
    }

    #[test]
    fn one_dense_prelogits() {
        let m = one_dense();
        let x = Tensor::<f64>::from_f64(vec![2], &[3., 4.]).unwrap();
        let trace = m.forward(&x).unwrap();
        assert_eq!(trace.get("fc").unwrap().data(), &[2.]);
        assert_eq!(trace.len(), 1);
    }

    #[test]
    fn concat_appends_channels() {
        let a = Tensor::<f64>::from_f64(vec![2], &[1., 2.]).unwrap();
        let b = Tensor::<f64>::from_f64(vec![1], &[3.]).unwrap();
        let out = eval_layer(&Layer::Concat, &[&a, &b]).unwrap().output;
        assert_eq!(out.data(), &[1., 2., 3.]);
    }

    #[test]
    fn softmax_of_equal_logits() {
        let z = Tensor::<f64>::from_f64(vec![2], &[0., 0.]).unwrap();
        assert_eq!(softmax(&z).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn predict_argmax_and_ties() {
        let nodes = |w: &[f64]| {
            vec![
                LayerNode::new(
                    "fc",
                    &[INPUT_ID],
                    Layer::Dense {
                        weight: Tensor::<f64>::from_f64(vec![w.len(), 1], w).unwrap(),
                        bias: Tensor::<f64>::zeros(vec![w.len()]).unwrap(),
                    },
                ),
                LayerNode::new("sm", &["fc"], Layer::Softmax),
            ]
        };
        let one = Tensor::<f64>::from_f64(vec![1], &[1.]).unwrap();
        let g = ModelGraph::new(vec![1], nodes(&[0.1, 2.3, -1.0]), "sm", "fc").unwrap();
        assert_eq!(g.predict(&one).unwrap().0, 1);
        let g = ModelGraph::new(vec![1], nodes(&[5., 5.]), "sm", "fc").unwrap();
        assert_eq!(g.predict(&one).unwrap().0, 0);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let m = one_dense();
        let x = Tensor::<f64>::from_f64(vec![3], &[3., 4., 5.]).unwrap();
        assert!(matches!(m.forward(&x), Err(GraphError::InputShape { .. })));
    }

    #[test]
    fn non_finite_intermediate_names_node() {
        let nodes = vec![LayerNode::new(
            "huge",
            &[INPUT_ID],
            Layer::Dense {
                weight: Tensor::<f64>::from_f64(vec![1, 1], &[f32::MAX as f64]).unwrap(),
                bias: Tensor::<f64>::zeros(vec![1]).unwrap(),
            },
        )];
        let m = ModelGraph::new(vec![1], nodes, "huge", "huge")
            .unwrap()
            .cast::<f32>();
        let x = Tensor::<f32>::from_f64(vec![1], &[10.]).unwrap();
        match m.forward(&x) {
            Err(GraphError::NonFinite { node }) => assert_eq!(node, "huge"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn softmax_argmax_matches_prelogits(v in proptest::collection::vec(-20.0f64..20.0, 1..10)) {
            let z = Tensor::<f64>::from_f64(vec![v.len()], &v).unwrap();
            let p = softmax(&z).unwrap();
            let total: f64 = p.data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-5);
            prop_assert!(p.data().iter().all(|&q| (0.0..=1.0).contains(&q)));
            prop_assert_eq!(p.argmax(), z.argmax());
        }
    }
}

use super::{GraphError, Layer, LayerNode, ModelGraph, Result, Source};
use crate::tensor::{Element, Tensor};

/// Removes every batch-norm node by rescaling the conv/dense layer feeding it.
///
/// With `s = γ / √(running_var + ε)` the producer becomes `w' = w·s` and
/// `b' = (b − running_mean)·s + β`. Consumers of the batch-norm node are
/// rewired to the producer, which keeps its id.
pub fn fold_batchnorm<T: Element>(model: &ModelGraph<T>) -> Result<ModelGraph<T>> {
    let mut layers: Vec<Option<Layer<T>>> = model
        .nodes()
        .iter()
        .map(|n| Some(n.layer.clone()))
        .collect();
    // bn node index -> producer index
    let mut replaced: Vec<Option<usize>> = vec![None; model.len()];

    for (i, node) in model.nodes().iter().enumerate() {
        let Layer::BatchNorm(bn) = &node.layer else {
            continue;
        };
        let unfoldable = |detail: String| GraphError::Unfoldable {
            node: node.id.clone(),
            detail,
        };
        let &[Source::Node(p)] = model.sources(i) else {
            return Err(unfoldable("its input is not a conv2d or dense node".into()));
        };
        if model.consumers(p).len() != 1 {
            return Err(unfoldable(format!(
                "producer `{}` feeds other nodes besides the batch-norm",
                model.node(p).id
            )));
        }
        let (scale, _) = bn.affine();
        let producer = layers[p].take().expect("producer folded twice");
        let folded = match producer {
            Layer::Conv2d {
                kernel,
                bias,
                stride,
                padding,
            } => {
                let per_out = kernel.len() / scale.len();
                let kernel = Tensor::new(
                    kernel.shape().to_vec(),
                    kernel
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, &w)| w * scale[k / per_out])
                        .collect(),
                )
                .map_err(|e| unfoldable(e.to_string()))?;
                Layer::Conv2d {
                    kernel,
                    bias: fold_bias(&bias, bn.running_mean.data(), &scale, bn.beta.data())
                        .map_err(|e| unfoldable(e.to_string()))?,
                    stride,
                    padding,
                }
            }
            Layer::Dense { weight, bias } => {
                let n = weight.shape()[1];
                let weight = Tensor::new(
                    weight.shape().to_vec(),
                    weight
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, &w)| w * scale[k / n])
                        .collect(),
                )
                .map_err(|e| unfoldable(e.to_string()))?;
                Layer::Dense {
                    weight,
                    bias: fold_bias(&bias, bn.running_mean.data(), &scale, bn.beta.data())
                        .map_err(|e| unfoldable(e.to_string()))?,
                }
            }
            other => {
                return Err(unfoldable(format!(
                    "its input `{}` is a {} node, not conv2d or dense",
                    model.node(p).id,
                    other.kind().name()
                )))
            }
        };
        layers[p] = Some(folded);
        layers[i] = None;
        replaced[i] = Some(p);
    }

    let rename = |id: &str| -> String {
        match model.index_of(id).and_then(|j| replaced[j]) {
            Some(p) => model.node(p).id.clone(),
            None => id.to_string(),
        }
    };
    let nodes: Vec<LayerNode<T>> = model
        .nodes()
        .iter()
        .zip(layers)
        .filter_map(|(node, layer)| {
            layer.map(|layer| LayerNode {
                id: node.id.clone(),
                inputs: node.inputs.iter().map(|s| rename(s)).collect(),
                layer,
            })
        })
        .collect();
    ModelGraph::new(
        model.input_shape().to_vec(),
        nodes,
        &rename(model.output_id()),
        &rename(model.prelogits_id()),
    )
}

fn fold_bias<T: Element>(
    bias: &Tensor<T>,
    mean: &[T],
    scale: &[T],
    beta: &[T],
) -> crate::tensor::Result<Tensor<T>> {
    Tensor::new(
        bias.shape().to_vec(),
        bias.data()
            .iter()
            .enumerate()
            .map(|(c, &b)| (b - mean[c]) * scale[c] + beta[c])
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::super::{BatchNorm, INPUT_ID};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    fn bn(gamma: f64, beta: f64, mean: f64, var: f64, eps: f64) -> Layer<f64> {
        Layer::BatchNorm(BatchNorm {
            gamma: t(&[1], &[gamma]),
            beta: t(&[1], &[beta]),
            running_mean: t(&[1], &[mean]),
            running_var: t(&[1], &[var]),
            epsilon: eps,
        })
    }

    fn conv_bn(bn_layer: Layer<f64>) -> ModelGraph<f64> {
        let nodes = vec![
            LayerNode::new(
                "conv",
                &[INPUT_ID],
                Layer::Conv2d {
                    kernel: t(&[1, 1, 1, 1], &[2.]),
                    bias: t(&[1], &[0.]),
                    stride: 1,
                    padding: 0,
                },
            ),
            LayerNode::new("bn", &["conv"], bn_layer),
        ];
        ModelGraph::new(vec![1, 2, 2], nodes, "bn", "bn").unwrap()
    }

    #[test]
    fn direct_formula() {
        let folded = fold_batchnorm(&conv_bn(bn(3., 1., 0., 4., 0.))).unwrap();
        assert_eq!(folded.len(), 1);
        assert_eq!(folded.output_id(), "conv");
        let Layer::Conv2d { kernel, bias, .. } = &folded.node(0).layer else {
            panic!("expected conv");
        };
        assert_eq!(kernel.data(), &[3.]);
        assert_eq!(bias.data(), &[1.]);
    }

    #[test]
    fn identity_bn_leaves_weights() {
        let model = conv_bn(bn(1., 0., 0., 1., 0.));
        let folded = fold_batchnorm(&model).unwrap();
        assert_eq!(folded.node(0), model.node(0));
    }

    #[test]
    fn rejects_bn_after_relu() {
        let nodes = vec![
            LayerNode::new("r", &[INPUT_ID], Layer::Relu),
            LayerNode::new("bn", &["r"], bn(1., 0., 0., 1., 0.)),
        ];
        let m = ModelGraph::new(vec![1, 2, 2], nodes, "bn", "bn").unwrap();
        assert!(matches!(
            fold_batchnorm(&m),
            Err(GraphError::Unfoldable { .. })
        ));

        let nodes = vec![LayerNode::new("bn", &[INPUT_ID], bn(1., 0., 0., 1., 0.))];
        let m = ModelGraph::new(vec![1, 2, 2], nodes, "bn", "bn").unwrap();
        assert!(matches!(
            fold_batchnorm(&m),
            Err(GraphError::Unfoldable { .. })
        ));
    }

    #[test]
    fn random_conv_bn_net_agrees_with_unfolded() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut rnd = |shape: &[usize], lo: f64, hi: f64| {
            let n: usize = shape.iter().product();
            Tensor::<f64>::new(
                shape.to_vec(),
                (0..n).map(|_| rng.random_range(lo..hi)).collect(),
            )
            .unwrap()
        };
        let nodes = vec![
            LayerNode::new(
                "c1",
                &[INPUT_ID],
                Layer::Conv2d {
                    kernel: rnd(&[4, 2, 3, 3], -1., 1.),
                    bias: rnd(&[4], -0.5, 0.5),
                    stride: 1,
                    padding: 1,
                },
            ),
            LayerNode::new(
                "bn1",
                &["c1"],
                Layer::BatchNorm(BatchNorm {
                    gamma: rnd(&[4], 0.5, 2.),
                    beta: rnd(&[4], -1., 1.),
                    running_mean: rnd(&[4], -1., 1.),
                    running_var: rnd(&[4], 0.1, 3.),
                    epsilon: 1e-5,
                }),
            ),
            LayerNode::new("r1", &["bn1"], Layer::Relu),
            LayerNode::new(
                "fc",
                &["r1"],
                Layer::Dense {
                    weight: rnd(&[3, 4 * 5 * 5], -0.3, 0.3),
                    bias: rnd(&[3], -0.1, 0.1),
                },
            ),
            LayerNode::new(
                "bn2",
                &["fc"],
                Layer::BatchNorm(BatchNorm {
                    gamma: rnd(&[3], 0.5, 2.),
                    beta: rnd(&[3], -1., 1.),
                    running_mean: rnd(&[3], -1., 1.),
                    running_var: rnd(&[3], 0.1, 3.),
                    epsilon: 1e-3,
                }),
            ),
            LayerNode::new("sm", &["bn2"], Layer::Softmax),
        ];
        let model = ModelGraph::new(vec![2, 5, 5], nodes, "sm", "bn2").unwrap();
        let folded = fold_batchnorm(&model).unwrap();
        assert_eq!(folded.prelogits_id(), "fc");
        assert_eq!(folded.len(), 4);
        for _ in 0..100 {
            let x = rnd(&[2, 5, 5], -1., 1.);
            let (ca, pa) = model.predict(&x).unwrap();
            let (cb, pb) = folded.predict(&x).unwrap();
            assert_eq!(ca, cb);
            for (a, b) in pa.data().iter().zip(pb.data()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }
}

use super::{
    AttributionError, BatchNormRule, DeepTaylorParams, ExplanationMap, InputDomain, LrpParams,
    Method, Result,
};
use crate::autodiff::{node_vjp, ReluBackward, Target};
use crate::netgraph::{per_channel_affine, ForwardTrace, Layer, ModelGraph, Source};
use crate::tensor::{
    conv2d_forward, conv2d_input_vjp, dense_forward, dense_input_vjp, Element, Tensor,
};

/// Local redistribution rule used at every linear node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RelevanceRule {
    /// `R_i = Σ_j a_i w_ij / (z_j + ε·sign(z_j)) · R_j` with the bias
    /// absorbed into `z_j` and `sign(0) = +1`.
    Z { epsilon: f64 },
    /// z⁺ rule on hidden layers and the given domain rule at the input.
    DeepTaylor(InputDomain),
}

/// Relevance reaching every node output and the input.
#[derive(Debug, Clone)]
pub struct RelevanceTrace<T: Element> {
    /// Relevance of each node's output, indexed like the model's nodes;
    /// `None` for nodes the target does not depend on.
    pub nodes: Vec<Option<Tensor<T>>>,
    pub input: Tensor<T>,
    /// Relevance placed on the target neuron.
    pub initial: T,
}

/// Runs relevance propagation from `target` back to the input.
pub fn propagate_relevance<T: Element>(
    model: &ModelGraph<T>,
    x: &Tensor<T>,
    target: &Target,
    rule: RelevanceRule,
    batchnorm: BatchNormRule,
) -> Result<RelevanceTrace<T>> {
    let target_idx = target.resolve(model)?;
    if let RelevanceRule::DeepTaylor(InputDomain::Bounded { low, high }) = rule {
        let outside = x
            .data()
            .iter()
            .position(|v| !(low..=high).contains(&v.as_f64()));
        if let Some(index) = outside {
            return Err(AttributionError::OutsideDomain {
                index,
                value: x.data()[index].as_f64(),
                low,
                high,
            });
        }
    }
    let trace = model.forward(x)?;
    let activation = trace.output(target_idx).data()[target.neuron];
    let initial = match rule {
        RelevanceRule::Z { .. } => activation,
        RelevanceRule::DeepTaylor(_) => activation.max(T::zero()),
    };
    let shape = model.shape(target_idx).to_vec();
    let mut seed = vec![T::zero(); shape.iter().product()];
    seed[target.neuron] = initial;

    let mut pending: Vec<Option<Tensor<T>>> = vec![None; model.len()];
    pending[target_idx] = Some(Tensor::new(shape, seed)?);
    let mut nodes: Vec<Option<Tensor<T>>> = vec![None; model.len()];
    let mut input: Option<Tensor<T>> = None;

    for idx in (0..=target_idx).rev() {
        let Some(r) = pending[idx].take() else {
            continue;
        };
        let parts = redistribute(model, &trace, idx, &r, rule, batchnorm)?;
        for (src, part) in model.sources(idx).iter().zip(parts) {
            let slot = match *src {
                Source::Input => &mut input,
                Source::Node(j) => &mut pending[j],
            };
            *slot = Some(match slot.take() {
                Some(acc) => acc.add(&part)?,
                None => part,
            });
        }
        nodes[idx] = Some(r);
    }
    let input = match input {
        Some(r) => r,
        None => Tensor::zeros(model.input_shape().to_vec())?,
    };
    Ok(RelevanceTrace {
        nodes,
        input,
        initial,
    })
}

/// Layer-wise relevance propagation with the z-rule (`epsilon = 0`) or the
/// ε-rule.
pub fn lrp<T: Element>(
    model: &ModelGraph<T>,
    x: &Tensor<T>,
    target: &Target,
    params: &LrpParams,
) -> Result<ExplanationMap<T>> {
    let eps = params.epsilon;
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(AttributionError::Param(format!(
            "lrp epsilon must be non-negative, got {eps}"
        )));
    }
    let trace = propagate_relevance(
        model,
        x,
        target,
        RelevanceRule::Z { epsilon: eps },
        params.batchnorm,
    )?;
    let method = if eps == 0.0 {
        Method::LrpZ
    } else {
        Method::LrpEpsilon
    };
    ExplanationMap::new(
        trace.input,
        method,
        target.clone(),
        serde_json::json!(params),
    )
}

/// Deep Taylor decomposition: z⁺ rule on hidden layers and the domain rule
/// at the input layer, starting from the clamped positive target activation.
pub fn deep_taylor<T: Element>(
    model: &ModelGraph<T>,
    x: &Tensor<T>,
    target: &Target,
    params: &DeepTaylorParams,
) -> Result<ExplanationMap<T>> {
    let trace = propagate_relevance(
        model,
        x,
        target,
        RelevanceRule::DeepTaylor(params.domain),
        BatchNormRule::Reject,
    )?;
    ExplanationMap::new(
        trace.input,
        Method::DeepTaylor,
        target.clone(),
        serde_json::json!(params),
    )
}

/// Relevance of node `idx`'s inputs given the relevance `r` of its output.
fn redistribute<T: Element>(
    model: &ModelGraph<T>,
    trace: &ForwardTrace<T>,
    idx: usize,
    r: &Tensor<T>,
    rule: RelevanceRule,
    batchnorm: BatchNormRule,
) -> Result<Vec<Tensor<T>>> {
    let node = model.node(idx);
    let sources = model.sources(idx);
    let a = trace.source(sources[0]);
    let z = trace.output(idx);
    let vjp = |s: &Tensor<T>| node_vjp(model, trace, idx, s, ReluBackward::Plain);
    // z-rule on the layer as it is: R_in = a ⊙ Jᵀ (R / z)
    let proportional = |s: Tensor<T>| -> Result<Vec<Tensor<T>>> {
        let c = vjp(&s)?.remove(0);
        Ok(vec![a.mul(&c)?])
    };
    let ratio = |r: &Tensor<T>, z: &Tensor<T>| match rule {
        RelevanceRule::Z { epsilon } => stabilized_ratio(r, z, epsilon, &node.id),
        RelevanceRule::DeepTaylor(_) => Ok(dropping_ratio(r, z)?),
    };

    match &node.layer {
        Layer::Relu => Ok(vec![r.clone()]),
        Layer::MaxPool { .. } | Layer::Concat => Ok(vjp(r)?),
        Layer::AvgPool { .. } | Layer::GlobalAvgPool => proportional(ratio(r, z)?),
        Layer::Conv2d {
            kernel,
            stride,
            padding,
            ..
        } => {
            let op = Linear::Conv {
                stride: *stride,
                padding: *padding,
            };
            match rule {
                RelevanceRule::Z { .. } => proportional(ratio(r, z)?),
                RelevanceRule::DeepTaylor(domain) => {
                    deep_taylor_linear(op, kernel, a, r, domain, sources[0] == Source::Input)
                }
            }
        }
        Layer::Dense { weight, .. } => match rule {
            RelevanceRule::Z { .. } => proportional(ratio(r, z)?),
            RelevanceRule::DeepTaylor(domain) => deep_taylor_linear(
                Linear::Dense,
                weight,
                a,
                r,
                domain,
                sources[0] == Source::Input,
            ),
        },
        Layer::BatchNorm(bn) if batchnorm == BatchNormRule::Linear => match rule {
            RelevanceRule::Z { .. } => proportional(ratio(r, z)?),
            RelevanceRule::DeepTaylor(_) => {
                let (scale, _) = bn.affine();
                let pos: Vec<T> = scale.iter().map(|&s| s.max(T::zero())).collect();
                let zeros = vec![T::zero(); pos.len()];
                let zp = per_channel_affine(a, &pos, &zeros)?;
                let s = dropping_ratio(r, &zp)?;
                let c = per_channel_affine(&s, &pos, &zeros)?;
                Ok(vec![a.mul(&c)?])
            }
        },
        layer => Err(AttributionError::Unsupported {
            node: node.id.clone(),
            op: layer.kind().name(),
        }),
    }
}

#[derive(Clone, Copy)]
enum Linear {
    Conv { stride: usize, padding: usize },
    Dense,
}

impl Linear {
    fn forward<T: Element>(self, a: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(match self {
            Linear::Conv { stride, padding } => conv2d_forward(a, w, None, stride, padding)?,
            Linear::Dense => dense_forward(a, w, None)?,
        })
    }

    fn transpose<T: Element>(
        self,
        s: &Tensor<T>,
        w: &Tensor<T>,
        shape: &[usize],
    ) -> Result<Tensor<T>> {
        Ok(match self {
            Linear::Conv { stride, padding } => conv2d_input_vjp(s, w, shape, stride, padding)?,
            Linear::Dense => dense_input_vjp(s, w, shape)?,
        })
    }
}

fn deep_taylor_linear<T: Element>(
    op: Linear,
    w: &Tensor<T>,
    a: &Tensor<T>,
    r: &Tensor<T>,
    domain: InputDomain,
    at_input: bool,
) -> Result<Vec<Tensor<T>>> {
    let wp = w.map(|v| v.max(T::zero()))?;
    match domain {
        InputDomain::Bounded { low, high } if at_input => {
            // z^B: z_j = Σ_i x_i w_ij − l_i w⁺_ij − h_i w⁻_ij
            let wn = w.map(|v| v.min(T::zero()))?;
            let lo = Tensor::full(a.shape().to_vec(), T::lit(low))?;
            let hi = Tensor::full(a.shape().to_vec(), T::lit(high))?;
            let z = op
                .forward(a, w)?
                .sub(&op.forward(&lo, &wp)?)?
                .sub(&op.forward(&hi, &wn)?)?;
            let s = dropping_ratio(r, &z)?;
            let shape = a.shape();
            let rx = a.mul(&op.transpose(&s, w, shape)?)?;
            let rl = lo.mul(&op.transpose(&s, &wp, shape)?)?;
            let rh = hi.mul(&op.transpose(&s, &wn, shape)?)?;
            Ok(vec![rx.sub(&rl)?.sub(&rh)?])
        }
        _ => {
            let z = op.forward(a, &wp)?;
            let s = dropping_ratio(r, &z)?;
            Ok(vec![a.mul(&op.transpose(&s, &wp, a.shape())?)?])
        }
    }
}

/// `r / (z + ε·sign(z))` with `sign(0) = +1`. A zero denominator is only
/// possible with `ε = 0`; it is an error unless the relevance is also zero.
fn stabilized_ratio<T: Element>(
    r: &Tensor<T>,
    z: &Tensor<T>,
    epsilon: f64,
    node: &str,
) -> Result<Tensor<T>> {
    let eps = T::lit(epsilon);
    let data = r
        .data()
        .iter()
        .zip(z.data())
        .map(|(&rj, &zj)| {
            let den = if zj >= T::zero() { zj + eps } else { zj - eps };
            if den != T::zero() {
                Ok(rj / den)
            } else if rj == T::zero() {
                Ok(T::zero())
            } else {
                Err(AttributionError::Degenerate {
                    node: node.to_string(),
                })
            }
        })
        .collect::<Result<Vec<T>>>()?;
    Ok(Tensor::new(r.shape().to_vec(), data)?)
}

/// `r / z`, dropping the relevance of neurons with `z = 0`.
fn dropping_ratio<T: Element>(
    r: &Tensor<T>,
    z: &Tensor<T>,
) -> std::result::Result<Tensor<T>, crate::tensor::TensorError> {
    r.zip_map(
        z,
        |rj, zj| if zj == T::zero() { T::zero() } else { rj / zj },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{BatchNorm, LayerNode, INPUT_ID};

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    fn dense(id: &str, input: &str, w: &[f64], rows: usize, b: &[f64]) -> LayerNode<f64> {
        LayerNode::new(
            id,
            &[input],
            Layer::Dense {
                weight: t(&[rows, w.len() / rows], w),
                bias: t(&[b.len()], b),
            },
        )
    }

    fn linear() -> ModelGraph<f64> {
        ModelGraph::new(
            vec![2],
            vec![dense("fc", INPUT_ID, &[2., -1.], 1, &[0.])],
            "fc",
            "fc",
        )
        .unwrap()
    }

    fn lrp_eps(eps: f64) -> LrpParams {
        LrpParams {
            epsilon: eps,
            batchnorm: BatchNormRule::Reject,
        }
    }

    #[test]
    fn linear_closed_forms() {
        let m = linear();
        let x = t(&[2], &[3., 4.]);
        let tgt = Target::new("fc", 0);
        let z = lrp(&m, &x, &tgt, &lrp_eps(0.0)).unwrap();
        assert_eq!(z.method, Method::LrpZ);
        assert_eq!(z.raw.data(), &[6., -4.]);

        let e = lrp(&m, &x, &tgt, &lrp_eps(0.1)).unwrap();
        assert_eq!(e.method, Method::LrpEpsilon);
        assert!((e.raw.data()[0] - 6. * 2. / 2.1).abs() < 1e-12);
        assert!((e.raw.data()[1] + 4. * 2. / 2.1).abs() < 1e-12);

        let dtd = deep_taylor(
            &m,
            &x,
            &tgt,
            &DeepTaylorParams {
                domain: InputDomain::NonNegative,
            },
        )
        .unwrap();
        assert!((dtd.raw.data()[0] - 2.).abs() < 1e-12);
        assert_eq!(dtd.raw.data()[1], 0.);
    }

    #[test]
    fn bounded_domain_rule() {
        let m = linear();
        let tgt = Target::new("fc", 0);
        let params = DeepTaylorParams::default();
        assert!(matches!(
            deep_taylor(&m, &t(&[2], &[3., 4.]), &tgt, &params),
            Err(AttributionError::OutsideDomain { index: 0, .. })
        ));
        // x = [1, 0.5]: F = 1.5, z = (x-l)w⁺ + (x-h)w⁻ = [2, 0.5], sum 2.5
        let dtd = deep_taylor(&m, &t(&[2], &[1., 0.5]), &tgt, &params).unwrap();
        assert!((dtd.raw.data()[0] - 1.5 * 2. / 2.5).abs() < 1e-12);
        assert!((dtd.raw.data()[1] - 1.5 * 0.5 / 2.5).abs() < 1e-12);
    }

    #[test]
    fn negative_target_gives_zero_dtd() {
        let m = linear();
        let dtd = deep_taylor(
            &m,
            &t(&[2], &[1., 4.]),
            &Target::new("fc", 0),
            &DeepTaylorParams {
                domain: InputDomain::NonNegative,
            },
        )
        .unwrap();
        assert_eq!(dtd.raw.data(), &[0., 0.]);
    }

    #[test]
    fn zero_denominator_handling() {
        let m = linear();
        let tgt = Target::new("fc", 0);
        // z = 2*1 - 2 = 0 and R = 0: nothing to distribute
        let r = lrp(&m, &t(&[2], &[1., 2.]), &tgt, &lrp_eps(0.0)).unwrap();
        assert_eq!(r.raw.data(), &[0., 0.]);
    }

    #[test]
    fn ratio_rules() {
        let r = t(&[3], &[1., 0., 2.]);
        let z = t(&[3], &[0.5, 0., -1.]);
        assert!(matches!(
            stabilized_ratio(&t(&[1], &[1.]), &t(&[1], &[0.]), 0.0, "n"),
            Err(AttributionError::Degenerate { .. })
        ));
        assert_eq!(
            stabilized_ratio(&r, &z, 0.0, "n").unwrap().data(),
            &[2., 0., -2.]
        );
        // sign(0) = +1
        assert_eq!(
            stabilized_ratio(&t(&[1], &[1.]), &t(&[1], &[0.]), 0.5, "n")
                .unwrap()
                .data(),
            &[2.]
        );
        assert_eq!(
            stabilized_ratio(&r, &z, 1.0, "n").unwrap().data(),
            &[1. / 1.5, 0., -1.]
        );
        assert_eq!(
            dropping_ratio(&t(&[2], &[1., 3.]), &t(&[2], &[0., 2.]))
                .unwrap()
                .data(),
            &[0., 1.5]
        );
    }

    #[test]
    fn conservation_through_relu_pool_and_concat() {
        let nodes = vec![
            LayerNode::new(
                "c",
                &[INPUT_ID],
                Layer::Conv2d {
                    kernel: t(&[2, 1, 1, 1], &[1., -0.5]),
                    bias: t(&[2], &[0., 0.]),
                    stride: 1,
                    padding: 0,
                },
            ),
            LayerNode::new("r", &["c"], Layer::Relu),
            LayerNode::new(
                "mp",
                &["r"],
                Layer::MaxPool {
                    window: 2,
                    stride: 2,
                },
            ),
            LayerNode::new(
                "ap",
                &["r"],
                Layer::AvgPool {
                    window: 2,
                    stride: 2,
                },
            ),
            LayerNode::new("cat", &["mp", "ap"], Layer::Concat),
            LayerNode::new("g", &["cat"], Layer::GlobalAvgPool),
            dense("out", "g", &[1., 2., 0.5, -1.], 1, &[0.]),
        ];
        let m = ModelGraph::new(vec![1, 2, 2], nodes, "out", "out").unwrap();
        let x = t(&[1, 2, 2], &[0.5, 2., -1., 1.5]);
        let trace = propagate_relevance(
            &m,
            &x,
            &Target::new("out", 0),
            RelevanceRule::Z { epsilon: 0.0 },
            BatchNormRule::Reject,
        )
        .unwrap();
        let total = trace.initial;
        let sum = |id: &str| trace.nodes[m.index_of(id).unwrap()].as_ref().unwrap().sum();
        // the two pools split the relevance; "r" collects both shares
        for id in ["out", "g", "cat", "r", "c"] {
            assert!((sum(id) - total).abs() < 1e-12, "{id}");
        }
        assert!((sum("mp") + sum("ap") - total).abs() < 1e-12);
        assert!((trace.input.sum() - total).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_requires_fold_or_linear_rule() {
        let bn = Layer::BatchNorm(BatchNorm {
            gamma: t(&[1], &[2.]),
            beta: t(&[1], &[0.]),
            running_mean: t(&[1], &[0.]),
            running_var: t(&[1], &[1.]),
            epsilon: 0.0,
        });
        let nodes = vec![
            dense("fc", INPUT_ID, &[2., -1.], 1, &[0.]),
            LayerNode::new("bn", &["fc"], bn),
        ];
        let m = ModelGraph::new(vec![2], nodes, "bn", "bn").unwrap();
        let x = t(&[2], &[3., 4.]);
        let tgt = Target::new("bn", 0);
        let err = lrp(&m, &x, &tgt, &lrp_eps(0.0)).unwrap_err();
        assert!(err.to_string().contains("fold_batchnorm"));
        let linear = LrpParams {
            epsilon: 0.0,
            batchnorm: BatchNormRule::Linear,
        };
        let r = lrp(&m, &x, &tgt, &linear).unwrap();
        assert_eq!(r.raw.data(), &[12., -8.]);
    }
}

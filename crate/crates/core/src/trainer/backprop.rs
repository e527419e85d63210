//! Training-mode forward and backward passes over a batch of samples.

use rayon::prelude::*;

use super::{Result, TrainError};
use crate::autodiff::{layer_vjp, ReluBackward};
use crate::netgraph::{eval_layer, softmax, BatchNorm, Layer, ModelGraph, NodeOutput, Source};
use crate::tensor::{
    conv2d_bias_vjp, conv2d_weight_vjp, dense_weight_vjp, Element, Tensor, TensorError,
};

/// Batch statistics of one training-mode batch-norm node.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats<T: Element> {
    pub mean: Vec<T>,
    /// Biased (population) variance over batch and spatial positions.
    pub var: Vec<T>,
    /// Number of values per channel the statistics were taken over.
    pub count: usize,
}

/// Loss, accuracy and parameter gradients of one batch.
#[derive(Debug, Clone)]
pub struct BatchResult<T: Element> {
    /// Mean softmax cross-entropy over the batch.
    pub loss: f64,
    pub correct: usize,
    /// Per node, the gradients of its trainable slots in
    /// [`trainable_slots`] order.
    pub grads: Vec<Vec<Tensor<T>>>,
    /// Per node, the batch statistics of training-mode batch-norm.
    pub bn_stats: Vec<Option<BnBatchStats<T>>>,
}

/// Names of the parameters the optimizer updates for a layer.
pub fn trainable_slots<T: Element>(layer: &Layer<T>) -> &'static [&'static str] {
    match layer {
        Layer::Conv2d { .. } => &["kernel", "bias"],
        Layer::Dense { .. } => &["weight", "bias"],
        Layer::BatchNorm(_) => &["gamma", "beta"],
        _ => &[],
    }
}

/// The trainable tensors of a layer, in [`trainable_slots`] order.
pub fn trainable_params<T: Element>(layer: &Layer<T>) -> Vec<&Tensor<T>> {
    match layer {
        Layer::Conv2d { kernel, bias, .. } => vec![kernel, bias],
        Layer::Dense { weight, bias } => vec![weight, bias],
        Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
        _ => vec![],
    }
}

/// Softmax cross-entropy of `logits` against `label`, and its gradient
/// `softmax(logits) − onehot(label)`.
pub fn cross_entropy<T: Element>(
    logits: &Tensor<T>,
    label: usize,
) -> std::result::Result<(f64, Tensor<T>), TensorError> {
    let z = logits.to_f64_vec();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    let mut grad = softmax(logits)?.into_data();
    grad[label] -= T::one();
    Ok((lse - z[label], Tensor::new(logits.shape().to_vec(), grad)?))
}

struct BnCache<T: Element> {
    normalized: Vec<Tensor<T>>,
    inv_std: Vec<T>,
    stats: BnBatchStats<T>,
}

/// Per node, per sample forward records.
struct BatchTrace<T: Element> {
    records: Vec<Vec<NodeOutput<T>>>,
    bn: Vec<Option<BnCache<T>>>,
}

fn node_err(node: &str) -> impl Fn(TensorError) -> TrainError + '_ {
    move |source| TrainError::Node {
        node: node.to_string(),
        source,
    }
}

fn inputs_of<'a, T: Element>(
    model: &ModelGraph<T>,
    trace: &'a [Vec<NodeOutput<T>>],
    xs: &'a [&'a Tensor<T>],
    idx: usize,
    b: usize,
) -> Vec<&'a Tensor<T>> {
    model
        .sources(idx)
        .iter()
        .map(|&s| match s {
            Source::Input => xs[b],
            Source::Node(j) => &trace[j][b].output,
        })
        .collect()
}

fn bn_train_forward<T: Element>(
    bn: &BatchNorm<T>,
    inputs: &[&Tensor<T>],
) -> std::result::Result<(Vec<NodeOutput<T>>, BnCache<T>), TensorError> {
    // channels are axis 0 for both [C,H,W] and [C]
    let c = inputs[0].shape()[0];
    let plane = inputs[0].len() / c;
    let count = inputs.len() * plane;
    let n = T::lit(count as f64);
    let mut mean = vec![T::zero(); c];
    for x in inputs {
        for (ch, m) in mean.iter_mut().enumerate() {
            for &v in &x.data()[ch * plane..(ch + 1) * plane] {
                *m += v;
            }
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![T::zero(); c];
    for x in inputs {
        for (ch, s) in var.iter_mut().enumerate() {
            for &v in &x.data()[ch * plane..(ch + 1) * plane] {
                let d = v - mean[ch];
                *s += d * d;
            }
        }
    }
    for s in &mut var {
        *s /= n;
    }
    let eps = T::lit(bn.epsilon);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (gamma, beta) = (bn.gamma.data(), bn.beta.data());
    let mut normalized = Vec::with_capacity(inputs.len());
    let mut outputs = Vec::with_capacity(inputs.len());
    for x in inputs {
        let xhat: Vec<T> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = i / plane;
                (v - mean[ch]) * inv_std[ch]
            })
            .collect();
        let y: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| gamma[i / plane] * v + beta[i / plane])
            .collect();
        normalized.push(Tensor::new(x.shape().to_vec(), xhat)?);
        outputs.push(NodeOutput {
            output: Tensor::new(x.shape().to_vec(), y)?,
            argmax: None,
            relu_mask: None,
        });
    }
    Ok((
        outputs,
        BnCache {
            normalized,
            inv_std,
            stats: BnBatchStats { mean, var, count },
        },
    ))
}

fn forward_batch<T: Element>(model: &ModelGraph<T>, xs: &[&Tensor<T>]) -> Result<BatchTrace<T>> {
    let last = model.prelogits_index();
    let mut records: Vec<Vec<NodeOutput<T>>> = Vec::with_capacity(last + 1);
    let mut bn = Vec::with_capacity(last + 1);
    for idx in 0..=last {
        let node = model.node(idx);
        let err = node_err(&node.id);
        match &node.layer {
            Layer::BatchNorm(layer) => {
                let inputs: Vec<&Tensor<T>> = (0..xs.len())
                    .map(|b| inputs_of(model, &records, xs, idx, b)[0])
                    .collect();
                let (outs, cache) = bn_train_forward(layer, &inputs).map_err(&err)?;
                records.push(outs);
                bn.push(Some(cache));
            }
            layer => {
                let outs = (0..xs.len())
                    .into_par_iter()
                    .map(|b| eval_layer(layer, &inputs_of(model, &records, xs, idx, b)))
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(&err)?;
                records.push(outs);
                bn.push(None);
            }
        }
    }
    Ok(BatchTrace { records, bn })
}

fn sum_ordered<T: Element>(parts: &[Tensor<T>]) -> std::result::Result<Tensor<T>, TensorError> {
    let mut acc = parts[0].data().to_vec();
    for p in &parts[1..] {
        for (a, &v) in acc.iter_mut().zip(p.data()) {
            *a += v;
        }
    }
    Tensor::new(parts[0].shape().to_vec(), acc)
}

/// Mean cross-entropy of a batch with batch-norm in training mode.
pub fn batch_loss<T: Element>(
    model: &ModelGraph<T>,
    xs: &[&Tensor<T>],
    labels: &[usize],
) -> Result<f64> {
    check_batch(model, xs, labels)?;
    let trace = forward_batch(model, xs)?;
    let last = model.prelogits_index();
    let mut total = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let (l, _) = cross_entropy(&trace.records[last][b].output, y)
            .map_err(node_err(model.prelogits_id()))?;
        total += l;
    }
    Ok(total / xs.len() as f64)
}

fn check_batch<T: Element>(
    model: &ModelGraph<T>,
    xs: &[&Tensor<T>],
    labels: &[usize],
) -> Result<()> {
    if xs.is_empty() || xs.len() != labels.len() {
        return Err(TrainError::Config(format!(
            "batch of {} inputs and {} labels",
            xs.len(),
            labels.len()
        )));
    }
    let classes = model.num_classes();
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(TrainError::Config(format!(
            "label {y} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Forward and backward pass of one batch with batch-norm in training mode.
///
/// Per-sample gradients are computed in parallel and reduced in sample
/// order, so the result does not depend on thread scheduling.
pub fn batch_gradients<T: Element>(
    model: &ModelGraph<T>,
    xs: &[&Tensor<T>],
    labels: &[usize],
) -> Result<BatchResult<T>> {
    check_batch(model, xs, labels)?;
    let batch = xs.len();
    let trace = forward_batch(model, xs)?;
    let last = model.prelogits_index();
    let inv_batch = T::one() / T::lit(batch as f64);

    let mut loss = 0.0;
    let mut correct = 0;
    let mut seeds = Vec::with_capacity(batch);
    for (b, &y) in labels.iter().enumerate() {
        let logits = &trace.records[last][b].output;
        let (l, g) = cross_entropy(logits, y).map_err(node_err(model.prelogits_id()))?;
        loss += l;
        if logits.argmax() == y {
            correct += 1;
        }
        seeds.push(g.scale(inv_batch).map_err(node_err(model.prelogits_id()))?);
    }
    loss /= batch as f64;

    let mut pending: Vec<Option<Vec<Tensor<T>>>> = vec![None; last + 1];
    pending[last] = Some(seeds);
    let mut grads: Vec<Vec<Tensor<T>>> = vec![Vec::new(); model.len()];

    for idx in (0..=last).rev() {
        let Some(g) = pending[idx].take() else {
            continue;
        };
        let node = model.node(idx);
        let err = node_err(&node.id);
        let input_grads: Vec<Vec<Tensor<T>>> = match (&node.layer, &trace.bn[idx]) {
            (Layer::BatchNorm(bn), Some(cache)) => {
                let (dx, dgamma, dbeta) = bn_train_backward(bn, cache, &g).map_err(&err)?;
                grads[idx] = vec![dgamma, dbeta];
                dx.into_iter().map(|t| vec![t]).collect()
            }
            (layer, _) => {
                let per_sample = (0..batch)
                    .into_par_iter()
                    .map(|b| {
                        let inputs = inputs_of(model, &trace.records, xs, idx, b);
                        let record = &trace.records[idx][b];
                        let dx = layer_vjp(layer, &inputs, record, &g[b], ReluBackward::Plain)?;
                        let dparams = match layer {
                            Layer::Conv2d {
                                kernel,
                                stride,
                                padding,
                                ..
                            } => vec![
                                conv2d_weight_vjp(
                                    inputs[0],
                                    &g[b],
                                    kernel.shape(),
                                    *stride,
                                    *padding,
                                )?,
                                conv2d_bias_vjp(&g[b])?,
                            ],
                            Layer::Dense { .. } => {
                                vec![dense_weight_vjp(inputs[0], &g[b])?, g[b].clone()]
                            }
                            _ => Vec::new(),
                        };
                        Ok((dx, dparams))
                    })
                    .collect::<std::result::Result<Vec<_>, TensorError>>()
                    .map_err(&err)?;
                let slots = trainable_slots(layer).len();
                grads[idx] = (0..slots)
                    .map(|k| {
                        let parts: Vec<Tensor<T>> =
                            per_sample.iter().map(|(_, p)| p[k].clone()).collect();
                        sum_ordered(&parts)
                    })
                    .collect::<std::result::Result<_, _>>()
                    .map_err(&err)?;
                per_sample.into_iter().map(|(dx, _)| dx).collect()
            }
        };
        // input_grads[b][k]: gradient for sample b, k-th input
        for (k, src) in model.sources(idx).iter().enumerate() {
            let Source::Node(j) = *src else { continue };
            let incoming: Vec<Tensor<T>> =
                input_grads.iter().map(|parts| parts[k].clone()).collect();
            pending[j] = Some(match pending[j].take() {
                Some(acc) => acc
                    .iter()
                    .zip(&incoming)
                    .map(|(a, b)| a.add(b))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(&err)?,
                None => incoming,
            });
        }
    }
    let bn_stats = (0..model.len())
        .map(|i| {
            trace
                .bn
                .get(i)
                .and_then(|c| c.as_ref())
                .map(|c| c.stats.clone())
        })
        .collect();
    Ok(BatchResult {
        loss,
        correct,
        grads,
        bn_stats,
    })
}

/// Backward through training-mode batch-norm:
/// `dx = γ/σ · (g − mean(g) − x̂·mean(g·x̂))` per channel.
#[allow(clippy::type_complexity)]
fn bn_train_backward<T: Element>(
    bn: &BatchNorm<T>,
    cache: &BnCache<T>,
    g: &[Tensor<T>],
) -> std::result::Result<(Vec<Tensor<T>>, Tensor<T>, Tensor<T>), TensorError> {
    let c = cache.inv_std.len();
    let plane = g[0].len() / c;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (gb, xb) in g.iter().zip(&cache.normalized) {
        for (i, (&gv, &xv)) in gb.data().iter().zip(xb.data()).enumerate() {
            dbeta[i / plane] += gv;
            dgamma[i / plane] += gv * xv;
        }
    }
    let n = T::lit(cache.stats.count as f64);
    let gamma = bn.gamma.data();
    let dx = g
        .iter()
        .zip(&cache.normalized)
        .map(|(gb, xb)| {
            let data = gb
                .data()
                .iter()
                .zip(xb.data())
                .enumerate()
                .map(|(i, (&gv, &xv))| {
                    let ch = i / plane;
                    gamma[ch] * cache.inv_std[ch] * (gv - dbeta[ch] / n - xv * dgamma[ch] / n)
                })
                .collect();
            Tensor::new(gb.shape().to_vec(), data)
        })
        .collect::<std::result::Result<_, _>>()?;
    Ok((
        dx,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

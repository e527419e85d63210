//! Reverse-mode input gradients over a recorded forward trace, and a
//! central-difference oracle that uses forward passes only.

use rayon::prelude::*;
use thiserror::Error;

use crate::netgraph::{ForwardTrace, GraphError, Layer, ModelGraph, NodeOutput, Source};
use crate::tensor::{
    avg_pool_input_vjp, conv2d_input_vjp, dense_input_vjp, max_pool_input_vjp, Element, Tensor,
    TensorError,
};

#[derive(Debug, Error)]
pub enum GradError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("backward through node `{node}` failed: {source}")]
    Node {
        node: String,
        #[source]
        source: TensorError,
    },
    #[error("non-finite gradient produced at node `{node}`")]
    NonFinite { node: String },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
}

pub type Result<T, E = GradError> = std::result::Result<T, E>;

/// A single neuron of a layer: the scalar being differentiated.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Target {
    pub layer: String,
    pub neuron: usize,
}

impl Target {
    pub fn new(layer: impl Into<String>, neuron: usize) -> Self {
        Self {
            layer: layer.into(),
            neuron,
        }
    }

    /// The pre-softmax neuron with the largest activation on `x`.
    pub fn predicted<T: Element>(model: &ModelGraph<T>, x: &Tensor<T>) -> Result<Self> {
        let (class, _) = model.predict(x)?;
        Ok(Self::new(model.prelogits_id(), class))
    }

    /// Checks the target against `model` and returns the node index.
    pub fn resolve<T: Element>(&self, model: &ModelGraph<T>) -> Result<usize> {
        let idx = model
            .index_of(&self.layer)
            .ok_or_else(|| GradError::InvalidTarget(format!("no layer `{}`", self.layer)))?;
        if matches!(model.node(idx).layer, Layer::Softmax) {
            return Err(GradError::InvalidTarget(format!(
                "`{}` is a softmax node; target the pre-softmax layer instead",
                self.layer
            )));
        }
        let n: usize = model.shape(idx).iter().product();
        if self.neuron >= n {
            return Err(GradError::InvalidTarget(format!(
                "neuron {} out of range for layer `{}` with {n} elements",
                self.neuron, self.layer
            )));
        }
        Ok(idx)
    }
}

/// How gradients pass backwards through a ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReluBackward {
    /// Exact derivative: gate by the forward activity mask.
    #[default]
    Plain,
    /// Guided backpropagation: gate by the activity mask and also zero
    /// every negative incoming gradient value.
    Guided,
}

#[derive(Debug, Clone)]
pub struct GradientRequest<'a, T: Element> {
    pub model: &'a ModelGraph<T>,
    pub input: &'a Tensor<T>,
    pub target: Target,
    pub rule: ReluBackward,
}

/// `∂A_target / ∂x`, shaped like the input.
pub fn input_gradient<T: Element>(req: &GradientRequest<'_, T>) -> Result<Tensor<T>> {
    let target = req.target.resolve(req.model)?;
    let trace = req.model.forward(req.input)?;
    backward(
        req.model,
        &trace,
        target,
        req.target.neuron,
        req.rule,
        |_, _| {},
    )
}

/// Backpropagates a one-hot seed at `(target, neuron)` through `trace`.
///
/// `observe` is called with each node index and the gradient leaving that
/// node towards its inputs, after the node's local rule has been applied.
/// For ReLU nodes this is the gated gradient.
pub fn backward<T: Element>(
    model: &ModelGraph<T>,
    trace: &ForwardTrace<T>,
    target: usize,
    neuron: usize,
    rule: ReluBackward,
    mut observe: impl FnMut(usize, &Tensor<T>),
) -> Result<Tensor<T>> {
    let seed_shape = model.shape(target).to_vec();
    let mut seed = vec![T::zero(); seed_shape.iter().product()];
    seed[neuron] = T::one();
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; model.len()];
    grads[target] = Some(Tensor::new(seed_shape, seed).expect("one-hot seed"));
    let mut input_grad: Option<Tensor<T>> = None;

    for idx in (0..=target).rev() {
        let Some(g) = grads[idx].take() else {
            continue;
        };
        let node = model.node(idx);
        let wrap = |source: TensorError| match source {
            TensorError::NonFinite { .. } => GradError::NonFinite {
                node: node.id.clone(),
            },
            source => GradError::Node {
                node: node.id.clone(),
                source,
            },
        };
        let parts = node_vjp(model, trace, idx, &g, rule).map_err(wrap)?;
        if let Layer::Relu = node.layer {
            observe(idx, &parts[0]);
        }
        for (src, part) in model.sources(idx).iter().zip(parts) {
            let slot = match *src {
                Source::Input => &mut input_grad,
                Source::Node(j) => &mut grads[j],
            };
            *slot = Some(match slot.take() {
                Some(acc) => acc.add(&part).map_err(wrap)?,
                None => part,
            });
        }
    }
    match input_grad {
        Some(g) => Ok(g),
        // target does not depend on the input
        None => Ok(Tensor::zeros(model.input_shape().to_vec()).expect("valid input shape")),
    }
}

/// Inference-mode vector-Jacobian product of one node, one tensor per input.
pub(crate) fn node_vjp<T: Element>(
    model: &ModelGraph<T>,
    trace: &ForwardTrace<T>,
    idx: usize,
    grad_out: &Tensor<T>,
    rule: ReluBackward,
) -> std::result::Result<Vec<Tensor<T>>, TensorError> {
    let inputs: Vec<&Tensor<T>> = model
        .sources(idx)
        .iter()
        .map(|&s| trace.source(s))
        .collect();
    layer_vjp(
        &model.node(idx).layer,
        &inputs,
        trace.node(idx),
        grad_out,
        rule,
    )
}

/// Vector-Jacobian product of `layer` evaluated on `inputs`, where `record`
/// is what the forward pass produced. Batch-norm uses inference statistics.
pub(crate) fn layer_vjp<T: Element>(
    layer: &Layer<T>,
    inputs: &[&Tensor<T>],
    record: &NodeOutput<T>,
    grad_out: &Tensor<T>,
    rule: ReluBackward,
) -> std::result::Result<Vec<Tensor<T>>, TensorError> {
    let input = |k: usize| inputs[k];
    Ok(match layer {
        Layer::Conv2d {
            kernel,
            stride,
            padding,
            ..
        } => vec![conv2d_input_vjp(
            grad_out,
            kernel,
            input(0).shape(),
            *stride,
            *padding,
        )?],
        Layer::Dense { weight, .. } => vec![dense_input_vjp(grad_out, weight, input(0).shape())?],
        Layer::Relu => {
            let mask = record.relu_mask.as_ref().expect("relu records its mask");
            vec![relu_vjp(grad_out, mask, rule)?]
        }
        Layer::BatchNorm(bn) => {
            let (scale, _) = bn.affine();
            let zeros = vec![T::zero(); scale.len()];
            vec![crate::netgraph::per_channel_affine(
                grad_out, &scale, &zeros,
            )?]
        }
        Layer::MaxPool { .. } => {
            let argmax = record.argmax.as_ref().expect("max-pool records argmax");
            vec![max_pool_input_vjp(grad_out, argmax, input(0).shape())?]
        }
        Layer::AvgPool { window, stride } => {
            vec![avg_pool_input_vjp(
                grad_out,
                input(0).shape(),
                *window,
                *stride,
            )?]
        }
        Layer::GlobalAvgPool => {
            let shape = input(0).shape();
            let plane = shape[1] * shape[2];
            let inv = T::one() / T::lit(plane as f64);
            let data = grad_out
                .data()
                .iter()
                .flat_map(|&g| std::iter::repeat_n(g * inv, plane))
                .collect();
            vec![Tensor::new(shape.to_vec(), data)?]
        }
        Layer::Concat => {
            let mut offset = 0;
            let mut parts = Vec::with_capacity(inputs.len());
            for k in 0..inputs.len() {
                let shape = input(k).shape();
                let n = shape.iter().product::<usize>();
                parts.push(Tensor::new(
                    shape.to_vec(),
                    grad_out.data()[offset..offset + n].to_vec(),
                )?);
                offset += n;
            }
            parts
        }
        Layer::Softmax => {
            // J = diag(p) - p pᵀ
            let p = &record.output;
            let mut dot = T::zero();
            for (&pi, &gi) in p.data().iter().zip(grad_out.data()) {
                dot += pi * gi;
            }
            vec![p.zip_map(grad_out, |pi, gi| pi * (gi - dot))?]
        }
    })
}

pub(crate) fn relu_vjp<T: Element>(
    grad_out: &Tensor<T>,
    mask: &[bool],
    rule: ReluBackward,
) -> std::result::Result<Tensor<T>, TensorError> {
    let data = grad_out
        .data()
        .iter()
        .zip(mask)
        .map(|(&g, &active)| match rule {
            ReluBackward::Plain if active => g,
            ReluBackward::Guided if active && g > T::zero() => g,
            _ => T::zero(),
        })
        .collect();
    Tensor::new(grad_out.shape().to_vec(), data)
}

/// Central differences `(F(x + h·eᵢ) − F(x − h·eᵢ)) / 2h` of the target
/// activation, evaluated in f64 with forward passes only.
pub fn finite_difference<T: Element>(
    model: &ModelGraph<T>,
    x: &Tensor<T>,
    target: &Target,
    h: f64,
) -> Result<Tensor<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(GradError::InvalidStep(h));
    }
    let model = model.cast::<f64>();
    let idx = target.resolve(&model)?;
    let x = x.cast::<f64>();
    let eval = |data: Vec<f64>| -> Result<f64> {
        let probe = Tensor::new(x.shape().to_vec(), data).map_err(|source| GradError::Node {
            node: "input".into(),
            source,
        })?;
        Ok(model.forward(&probe)?.output(idx).data()[target.neuron])
    };
    let diffs = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let mut plus = x.data().to_vec();
            plus[i] += h;
            let mut minus = x.data().to_vec();
            minus[i] -= h;
            Ok((eval(plus)? - eval(minus)?) / (2.0 * h))
        })
        .collect::<Result<Vec<f64>>>()?;
    Tensor::new(x.shape().to_vec(), diffs).map_err(|source| GradError::Node {
        node: target.layer.clone(),
        source,
    })
}

/// Smallest distance of any ReLU pre-activation from zero, and of any
/// max-pool winner from its runner-up. Finite differences straddle a kink
/// when this is below the step.
pub fn kink_margin<T: Element>(model: &ModelGraph<T>, trace: &ForwardTrace<T>) -> f64 {
    let mut margin = f64::INFINITY;
    for (idx, node) in model.nodes().iter().enumerate() {
        match &node.layer {
            Layer::Relu => {
                let pre = trace.source(model.sources(idx)[0]);
                for &v in pre.data() {
                    margin = margin.min(v.as_f64().abs());
                }
            }
            Layer::MaxPool { window, stride } => {
                let x = trace.source(model.sources(idx)[0]);
                let argmax = trace.node(idx).argmax.as_ref().expect("argmax");
                let &[_, h, w] = x.shape() else { continue };
                let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
                for (o, &best) in argmax.iter().enumerate() {
                    let ch = o / (oh * ow);
                    let (oy, ox) = ((o / ow) % oh, o % ow);
                    for dy in 0..*window {
                        for dx in 0..*window {
                            let i = ch * h * w + (oy * stride + dy) * w + ox * stride + dx;
                            // two ReLU-dead zeros stay tied under perturbation
                            if i != best
                                && !(x.data()[best] == T::zero() && x.data()[i] == T::zero())
                            {
                                let gap = (x.data()[best] - x.data()[i]).as_f64();
                                margin = margin.min(gap);
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    margin
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{
    AttributionError, ExplanationMap, IntegratedGradientsParams, Method, Result, SmoothGradParams,
};
use crate::autodiff::{input_gradient, GradientRequest, ReluBackward, Target};
use crate::netgraph::ModelGraph;
use crate::tensor::{Element, Tensor};

fn gradient<T: Element>(
    model: &ModelGraph<T>,
    x: &Tensor<T>,
    target: &Target,
    rule: ReluBackward,
) -> Result<Tensor<T>> {
    Ok(input_gradient(&GradientRequest {
        model,
        input: x,
        target: target.clone(),
        rule,
    })?)
}

/// `∂A_target / ∂x`.
pub fn saliency<T: Element>(
    model: &ModelGraph<T>,
    x: &Tensor<T>,
    target: &Target,
) -> Result<ExplanationMap<T>> {
    let g = gradient(model, x, target, ReluBackward::Plain)?;
    ExplanationMap::new(g, Method::Saliency, target.clone(), serde_json::json!({}))
}

/// `x ⊙ ∂A_target / ∂x`.
pub fn gradient_times_input<T: Element>(
    model: &ModelGraph<T>,
    x: &Tensor<T>,
    target: &Target,
) -> Result<ExplanationMap<T>> {
    let g = gradient(model, x, target, ReluBackward::Plain)?;
    ExplanationMap::new(
        x.mul(&g)?,
        Method::GradientTimesInput,
        target.clone(),
        serde_json::json!({}),
    )
}

/// Backpropagation where every ReLU passes only positive gradients through
/// its active units.
pub fn guided_backprop<T: Element>(
    model: &ModelGraph<T>,
    x: &Tensor<T>,
    target: &Target,
) -> Result<ExplanationMap<T>> {
    let g = gradient(model, x, target, ReluBackward::Guided)?;
    ExplanationMap::new(
        g,
        Method::GuidedBackprop,
        target.clone(),
        serde_json::json!({}),
    )
}

/// The noisy inputs SmoothGrad averages over.
///
/// A `ChaCha8Rng` seeded with `seed` yields standard normals `z` in sample
/// then element order, and each noisy element is `x + T::lit(sigma * z)`.
pub fn smoothgrad_sample<T: Element>(
    x: &Tensor<T>,
    sigma: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Tensor<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_samples)
        .map(|_| {
            let data = x
                .data()
                .iter()
                .map(|&v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v + T::lit(sigma * z)
                })
                .collect();
            Ok(Tensor::new(x.shape().to_vec(), data)?)
        })
        .collect()
}

/// Mean saliency over `n_samples` Gaussian perturbations of `x`.
///
/// The mean is accumulated as `m_k = m_{k-1} + (g_k − m_{k-1}) / k`, so with
/// `sigma = 0` the result equals [`saliency`] bit for bit.
pub fn smoothgrad<T: Element>(
    model: &ModelGraph<T>,
    x: &Tensor<T>,
    target: &Target,
    params: &SmoothGradParams,
) -> Result<ExplanationMap<T>> {
    if params.n_samples == 0 {
        return Err(AttributionError::Param(
            "smoothgrad n_samples must be at least 1".into(),
        ));
    }
    let sigma = match params.sigma {
        Some(s) => s,
        None => {
            let values = x.to_f64_vec();
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            0.15 * (hi - lo)
        }
    };
    let noisy = smoothgrad_sample(x, sigma, params.n_samples, params.seed)?;
    let grads = noisy
        .par_iter()
        .map(|xi| gradient(model, xi, target, ReluBackward::Plain))
        .collect::<Result<Vec<_>>>()?;
    let mut mean = vec![T::zero(); x.len()];
    for (k, g) in grads.iter().enumerate() {
        let k = T::lit((k + 1) as f64);
        for (m, &gi) in mean.iter_mut().zip(g.data()) {
            *m += (gi - *m) / k;
        }
    }
    let used = SmoothGradParams {
        sigma: Some(sigma),
        ..params.clone()
    };
    ExplanationMap::new(
        Tensor::new(x.shape().to_vec(), mean)?,
        Method::SmoothGrad,
        target.clone(),
        serde_json::json!(used),
    )
}

/// Path integral of the gradient from a baseline to `x`, by the midpoint
/// rule with `steps` points `α_k = (k − ½) / steps`, times `x − baseline`.
pub fn integrated_gradients<T: Element>(
    model: &ModelGraph<T>,
    x: &Tensor<T>,
    target: &Target,
    params: &IntegratedGradientsParams,
) -> Result<ExplanationMap<T>> {
    let m = params.steps;
    if m == 0 {
        return Err(AttributionError::Param(
            "integrated gradients steps must be at least 1".into(),
        ));
    }
    let baseline = params.baseline.materialize(x)?;
    let delta = x.sub(&baseline)?;
    let grads = (0..m)
        .into_par_iter()
        .map(|k| {
            let alpha = T::lit((k as f64 + 0.5) / m as f64);
            let point = baseline.zip_map(&delta, |b, d| b + alpha * d)?;
            gradient(model, &point, target, ReluBackward::Plain)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum = vec![T::zero(); x.len()];
    for g in &grads {
        for (s, &gi) in sum.iter_mut().zip(g.data()) {
            *s += gi;
        }
    }
    let steps = T::lit(m as f64);
    let data = sum
        .iter()
        .zip(delta.data())
        .map(|(&s, &d)| s / steps * d)
        .collect();
    ExplanationMap::new(
        Tensor::new(x.shape().to_vec(), data)?,
        Method::IntegratedGradients,
        target.clone(),
        serde_json::json!(params),
    )
}

//! Explanation methods mapping `(model, input, target neuron)` to a signed
//! per-input importance map.
//!
//! Gradient family: [`saliency`], [`gradient_times_input`],
//! [`guided_backprop`], [`smoothgrad`], [`integrated_gradients`].
//! Relevance family: [`lrp`] (z and ε rules) and [`deep_taylor`].
//!
//! Relevance methods are defined on conv/dense, ReLU, pooling and concat
//! nodes; run [`crate::netgraph::fold_batchnorm`] first on models with
//! batch-norm, or opt into [`BatchNormRule::Linear`].

mod expl_file;
mod gradient;
mod relevance;

pub use expl_file::{
    from_expl_bytes, read_explanation, to_expl_bytes, write_explanation, EXPL_MAGIC, EXPL_VERSION,
};
pub use gradient::{
    gradient_times_input, guided_backprop, integrated_gradients, saliency, smoothgrad,
    smoothgrad_sample,
};
pub use relevance::{deep_taylor, lrp, propagate_relevance, RelevanceRule, RelevanceTrace};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{GradError, Target};
use crate::evalkit::{reduce_channels, Reduction};
use crate::netgraph::{GraphError, ModelGraph};
use crate::tensor::{Element, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error(
        "node `{node}` ({op}) is not supported by relevance propagation; \
         run fold_batchnorm on the model first"
    )]
    Unsupported { node: String, op: &'static str },
    #[error("zero denominator at node `{node}` with epsilon = 0; use LRP-ε")]
    Degenerate { node: String },
    #[error("input value {value} at index {index} lies outside the DTD domain [{low}, {high}]")]
    OutsideDomain {
        index: usize,
        value: f64,
        low: f64,
        high: f64,
    },
    #[error("unknown method `{0}`; valid names: {names}", names = Method::names().join(", "))]
    UnknownMethod(String),
    #[error("explanation file: {0}")]
    File(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = AttributionError> = std::result::Result<T, E>;

/// The eight explanation methods, in canonical panel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "saliency")]
    Saliency,
    #[serde(rename = "gi")]
    GradientTimesInput,
    #[serde(rename = "gbp")]
    GuidedBackprop,
    #[serde(rename = "smoothgrad")]
    SmoothGrad,
    #[serde(rename = "ig")]
    IntegratedGradients,
    #[serde(rename = "dtd")]
    DeepTaylor,
    #[serde(rename = "lrp-z")]
    LrpZ,
    #[serde(rename = "lrp-eps")]
    LrpEpsilon,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Saliency,
        Method::GradientTimesInput,
        Method::GuidedBackprop,
        Method::SmoothGrad,
        Method::IntegratedGradients,
        Method::DeepTaylor,
        Method::LrpZ,
        Method::LrpEpsilon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Saliency => "saliency",
            Method::GradientTimesInput => "gi",
            Method::GuidedBackprop => "gbp",
            Method::SmoothGrad => "smoothgrad",
            Method::IntegratedGradients => "ig",
            Method::DeepTaylor => "dtd",
            Method::LrpZ => "lrp-z",
            Method::LrpEpsilon => "lrp-eps",
        }
    }

    pub fn names() -> Vec<&'static str> {
        Self::ALL.iter().map(|m| m.name()).collect()
    }

    /// Position in the canonical panel order.
    pub fn rank(self) -> usize {
        Self::ALL.iter().position(|&m| m == self).unwrap()
    }

    /// Whether the method propagates relevance (and so needs a BN-free graph).
    pub fn is_relevance(self) -> bool {
        matches!(self, Method::DeepTaylor | Method::LrpZ | Method::LrpEpsilon)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = AttributionError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| AttributionError::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothGradParams {
    pub n_samples: usize,
    /// Noise standard deviation in input units. `None` uses 0.15 × the
    /// input's value range.
    pub sigma: Option<f64>,
    pub seed: u64,
}

impl Default for SmoothGradParams {
    fn default() -> Self {
        Self {
            n_samples: 50,
            sigma: None,
            seed: 0,
        }
    }
}

/// Reference input for integrated gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// All-zeros (black) image.
    Zeros,
    Constant(f64),
    Custom(Vec<f64>),
}

impl Baseline {
    pub fn materialize<T: Element>(&self, like: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Baseline::Zeros => Ok(Tensor::zeros(like.shape().to_vec())?),
            Baseline::Constant(v) => Ok(Tensor::full(like.shape().to_vec(), T::lit(*v))?),
            Baseline::Custom(values) => {
                if values.len() != like.len() {
                    return Err(AttributionError::Param(format!(
                        "baseline has {} values, input has {}",
                        values.len(),
                        like.len()
                    )));
                }
                Ok(Tensor::from_f64(like.shape().to_vec(), values)?)
            }
        }
    }
}

impl FromStr for Baseline {
    type Err = AttributionError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeros" | "black" => Ok(Baseline::Zeros),
            "white" => Ok(Baseline::Constant(1.0)),
            other => other.parse::<f64>().map(Baseline::Constant).map_err(|_| {
                AttributionError::Param(format!(
                    "baseline `{other}` is not zeros, black, white or a number"
                ))
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratedGradientsParams {
    pub steps: usize,
    pub baseline: Baseline,
}

impl Default for IntegratedGradientsParams {
    fn default() -> Self {
        Self {
            steps: 300,
            baseline: Baseline::Zeros,
        }
    }
}

/// How relevance passes through batch-norm nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchNormRule {
    /// Refuse; the model must be folded first.
    #[default]
    Reject,
    /// Treat inference batch-norm as a per-channel linear map and apply the
    /// same stabilized z-rule as other linear layers.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrpParams {
    /// Stabilizer used by LRP-ε; LRP-z always uses 0.
    pub epsilon: f64,
    pub batchnorm: BatchNormRule,
}

impl Default for LrpParams {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            batchnorm: BatchNormRule::Reject,
        }
    }
}

/// Input domain assumed by deep Taylor decomposition at the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputDomain {
    /// Unbounded non-negative inputs: z⁺ rule at the input layer too.
    NonNegative,
    /// Box-constrained inputs: z^B rule at the input layer.
    Bounded { low: f64, high: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepTaylorParams {
    pub domain: InputDomain,
}

impl Default for DeepTaylorParams {
    fn default() -> Self {
        Self {
            domain: InputDomain::Bounded {
                low: 0.0,
                high: 1.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MethodParams {
    pub smoothgrad: SmoothGradParams,
    pub integrated_gradients: IntegratedGradientsParams,
    pub lrp: LrpParams,
    pub dtd: DeepTaylorParams,
}

impl MethodParams {
    pub fn validate(&self) -> Result<()> {
        let p = |msg: String| Err(AttributionError::Param(msg));
        if self.smoothgrad.n_samples == 0 {
            return p("smoothgrad n_samples must be at least 1".into());
        }
        if let Some(s) = self.smoothgrad.sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return p(format!("smoothgrad sigma must be non-negative, got {s}"));
            }
        }
        if self.integrated_gradients.steps == 0 {
            return p("integrated gradients steps must be at least 1".into());
        }
        let e = self.lrp.epsilon;
        if !(e >= 0.0 && e.is_finite()) {
            return p(format!("lrp epsilon must be non-negative, got {e}"));
        }
        if let InputDomain::Bounded { low, high } = self.dtd.domain {
            if low.partial_cmp(&high) != Some(std::cmp::Ordering::Less) {
                return p(format!("dtd bounds need low < high, got [{low}, {high}]"));
            }
        }
        Ok(())
    }

    /// The parameters that influence `method`, as recorded in metadata.
    pub fn describe(&self, method: Method) -> serde_json::Value {
        use serde_json::json;
        match method {
            Method::SmoothGrad => json!(self.smoothgrad),
            Method::IntegratedGradients => json!(self.integrated_gradients),
            Method::LrpZ => json!({ "epsilon": 0.0, "batchnorm": self.lrp.batchnorm }),
            Method::LrpEpsilon => json!(self.lrp),
            Method::DeepTaylor => json!(self.dtd),
            _ => json!({}),
        }
    }
}

/// Signed importance scores for one decision.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationMap<T: Element = f32> {
    /// Same shape as the model input.
    pub raw: Tensor<T>,
    /// `[H, W]` sum of absolute values over channels.
    pub reduced: Tensor<T>,
    pub method: Method,
    pub target: Target,
    pub params: serde_json::Value,
    pub model_digest: Option<String>,
}

impl<T: Element> ExplanationMap<T> {
    pub fn new(
        raw: Tensor<T>,
        method: Method,
        target: Target,
        params: serde_json::Value,
    ) -> Result<Self> {
        let reduced = reduce_channels(&raw, Reduction::AbsSum)?;
        Ok(Self {
            raw,
            reduced,
            method,
            target,
            params,
            model_digest: None,
        })
    }

    pub fn with_digest(mut self, digest: impl Into<String>) -> Self {
        self.model_digest = Some(digest.into());
        self
    }

    pub fn cast<U: Element>(&self) -> ExplanationMap<U> {
        ExplanationMap {
            raw: self.raw.cast(),
            reduced: self.reduced.cast(),
            method: self.method,
            target: self.target.clone(),
            params: self.params.clone(),
            model_digest: self.model_digest.clone(),
        }
    }
}

/// Runs `method` with the matching parameters from `params`.
pub fn explain<T: Element>(
    model: &ModelGraph<T>,
    x: &Tensor<T>,
    target: &Target,
    method: Method,
    params: &MethodParams,
) -> Result<ExplanationMap<T>> {
    params.validate()?;
    match method {
        Method::Saliency => saliency(model, x, target),
        Method::GradientTimesInput => gradient_times_input(model, x, target),
        Method::GuidedBackprop => guided_backprop(model, x, target),
        Method::SmoothGrad => smoothgrad(model, x, target, &params.smoothgrad),
        Method::IntegratedGradients => {
            integrated_gradients(model, x, target, &params.integrated_gradients)
        }
        Method::DeepTaylor => deep_taylor(model, x, target, &params.dtd),
        Method::LrpZ => lrp(
            model,
            x,
            target,
            &LrpParams {
                epsilon: 0.0,
                batchnorm: params.lrp.batchnorm,
            },
        ),
        Method::LrpEpsilon => lrp(model, x, target, &params.lrp),
    }
}

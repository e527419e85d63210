//! Adam training with early stopping, and a seeded synthetic lesion-image
//! dataset.

mod adam;
mod backprop;
mod data;
mod synthetic;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use backprop::{
    batch_gradients, batch_loss, cross_entropy, trainable_params, trainable_slots, BatchResult,
    BnBatchStats,
};
pub use data::{load_image, read_manifest, save_image, write_dataset, ManifestRow};
pub use synthetic::{
    generate_synthetic, ClassSpec, ColorParams, Dataset, Pattern, Sample, SyntheticDatasetSpec,
};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netgraph::{BatchNorm, GraphError, Layer, LayerNode, ModelGraph, INPUT_ID};
use crate::tensor::{Element, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("node `{node}`: {source}")]
    Node {
        node: String,
        #[source]
        source: TensorError,
    },
    #[error("training diverged in epoch {epoch}: non-finite values at node `{node}`")]
    Diverged { epoch: usize, node: String },
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Eval(#[from] crate::evalkit::EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Share of the data held out for early stopping, in (0, 1).
    pub validation_fraction: f64,
    /// Epochs without a validation improvement before stopping.
    pub early_stop_patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Draw a fresh validation split at the start of every epoch instead of
    /// fixing it once.
    pub resample_validation: bool,
    /// Weight of the current batch in running batch-norm statistics.
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 200,
            validation_fraction: 0.10,
            early_stop_patience: 20,
            seed: 0,
            adam: AdamConfig::default(),
            resample_validation: false,
            bn_momentum: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!(
                "validation_fraction must be in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad(format!(
                "bn_momentum must be in [0, 1], got {}",
                self.bn_momentum
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose weights were returned; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
}

impl History {
    /// CSV with header `epoch,train_loss,train_acc,val_loss,val_acc`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.train_acc.to_string(),
                e.val_loss.to_string(),
                e.val_acc.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fresh parameters for every layer of `template` drawn from `rng`:
/// conv/dense weights `U(±√(6 / fan_in))`, zero biases, and identity
/// batch-norm (γ = 1, β = 0, running mean 0, running variance 1).
pub fn initialize<T: Element>(
    template: &ModelGraph<T>,
    rng: &mut impl Rng,
) -> Result<ModelGraph<T>> {
    let mut uniform = |shape: &[usize], fan_in: usize| -> Result<Tensor<T>> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(rng.random_range(-bound..bound)))
            .collect();
        Ok(Tensor::new(shape.to_vec(), data)?)
    };
    let layers = template
        .nodes()
        .iter()
        .map(|node| {
            Ok(match &node.layer {
                Layer::Conv2d {
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let s = kernel.shape();
                    Layer::Conv2d {
                        kernel: uniform(s, s[1] * s[2] * s[3])?,
                        bias: Tensor::zeros(bias.shape().to_vec())?,
                        stride: *stride,
                        padding: *padding,
                    }
                }
                Layer::Dense { weight, bias } => Layer::Dense {
                    weight: uniform(weight.shape(), weight.shape()[1])?,
                    bias: Tensor::zeros(bias.shape().to_vec())?,
                },
                Layer::BatchNorm(bn) => {
                    let c = bn.gamma.shape().to_vec();
                    Layer::BatchNorm(BatchNorm {
                        gamma: Tensor::full(c.clone(), T::one())?,
                        beta: Tensor::zeros(c.clone())?,
                        running_mean: Tensor::zeros(c.clone())?,
                        running_var: Tensor::full(c, T::one())?,
                        epsilon: bn.epsilon,
                    })
                }
                other => other.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(template.with_layers(layers)?)
}

/// A small densely connected conv net:
/// `conv→bn→relu`, a second `conv→bn→relu` whose output is concatenated
/// with the first, max-pool, a third `conv→bn→relu`, global average pool,
/// dense pre-softmax layer `fc` and softmax. Weights are placeholders; call
/// [`initialize`] (as [`train`] does) before use.
pub fn reference_net(input_shape: [usize; 3], classes: usize) -> Result<ModelGraph<f32>> {
    if classes < 2 {
        return Err(TrainError::Config(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    let [c_in, _, _] = input_shape;
    let conv = |co: usize, ci: usize| -> Result<Layer<f32>> {
        Ok(Layer::Conv2d {
            kernel: Tensor::zeros(vec![co, ci, 3, 3])?,
            bias: Tensor::zeros(vec![co])?,
            stride: 1,
            padding: 1,
        })
    };
    let bn = |c: usize| -> Result<Layer<f32>> {
        Ok(Layer::BatchNorm(BatchNorm {
            gamma: Tensor::full(vec![c], 1.0)?,
            beta: Tensor::zeros(vec![c])?,
            running_mean: Tensor::zeros(vec![c])?,
            running_var: Tensor::full(vec![c], 1.0)?,
            epsilon: 1e-5,
        }))
    };
    let nodes = vec![
        LayerNode::new("conv1", &[INPUT_ID], conv(8, c_in)?),
        LayerNode::new("bn1", &["conv1"], bn(8)?),
        LayerNode::new("relu1", &["bn1"], Layer::Relu),
        LayerNode::new("conv2", &["relu1"], conv(8, 8)?),
        LayerNode::new("bn2", &["conv2"], bn(8)?),
        LayerNode::new("relu2", &["bn2"], Layer::Relu),
        LayerNode::new("concat1", &["relu1", "relu2"], Layer::Concat),
        LayerNode::new(
            "pool1",
            &["concat1"],
            Layer::MaxPool {
                window: 2,
                stride: 2,
            },
        ),
        LayerNode::new("conv3", &["pool1"], conv(16, 16)?),
        LayerNode::new("bn3", &["conv3"], bn(16)?),
        LayerNode::new("relu3", &["bn3"], Layer::Relu),
        LayerNode::new("gap", &["relu3"], Layer::GlobalAvgPool),
        LayerNode::new(
            "fc",
            &["gap"],
            Layer::Dense {
                weight: Tensor::zeros(vec![classes, 16])?,
                bias: Tensor::zeros(vec![classes])?,
            },
        ),
        LayerNode::new("softmax", &["fc"], Layer::Softmax),
    ];
    Ok(ModelGraph::new(
        input_shape.to_vec(),
        nodes,
        "softmax",
        "fc",
    )?)
}

/// Mean cross-entropy and accuracy with inference-mode batch-norm.
pub fn evaluate<T: Element>(
    model: &ModelGraph<T>,
    xs: &[&Tensor<T>],
    labels: &[usize],
) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(TrainError::Dataset(
            "cannot evaluate on zero samples".into(),
        ));
    }
    let per = xs
        .par_iter()
        .zip(labels)
        .map(|(x, &y)| {
            let (class, logits) = model.predict(x)?;
            let (loss, _) = cross_entropy(&logits, y).map_err(|source| TrainError::Node {
                node: model.prelogits_id().to_string(),
                source,
            })?;
            Ok((loss, class == y))
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / xs.len() as f64;
    let acc = per.iter().filter(|p| p.1).count() as f64 / xs.len() as f64;
    Ok((loss, acc))
}

fn diverged(epoch: usize) -> impl Fn(TrainError) -> TrainError {
    move |e| match e {
        TrainError::Node {
            node,
            source: TensorError::NonFinite { .. },
        } => TrainError::Diverged { epoch, node },
        TrainError::Graph(GraphError::NonFinite { node }) => TrainError::Diverged { epoch, node },
        other => other,
    }
}

struct Optimizer<T: Element> {
    states: Vec<Vec<AdamState<T>>>,
}

impl<T: Element> Optimizer<T> {
    fn new(model: &ModelGraph<T>) -> Self {
        let states = model
            .nodes()
            .iter()
            .map(|n| {
                trainable_params(&n.layer)
                    .into_iter()
                    .map(|p| AdamState::new(p.len()))
                    .collect()
            })
            .collect();
        Self { states }
    }

    fn step(
        &mut self,
        model: &ModelGraph<T>,
        res: &BatchResult<T>,
        config: &TrainConfig,
    ) -> Result<ModelGraph<T>> {
        let lr = config.learning_rate;
        let momentum = T::lit(config.bn_momentum);
        let mut layers = Vec::with_capacity(model.len());
        for (idx, node) in model.nodes().iter().enumerate() {
            let states = &mut self.states[idx];
            let grads = &res.grads[idx];
            let mut upd = |k: usize, p: &Tensor<T>| -> Result<Tensor<T>> {
                adam_step(p, &grads[k], &mut states[k], lr, &config.adam).map_err(|e| match e {
                    TrainError::Tensor(source) => TrainError::Node {
                        node: node.id.clone(),
                        source,
                    },
                    other => other,
                })
            };
            layers.push(match &node.layer {
                // nodes after the pre-softmax layer receive no gradient
                layer if grads.is_empty() => layer.clone(),
                Layer::Conv2d {
                    kernel,
                    bias,
                    stride,
                    padding,
                } => Layer::Conv2d {
                    kernel: upd(0, kernel)?,
                    bias: upd(1, bias)?,
                    stride: *stride,
                    padding: *padding,
                },
                Layer::Dense { weight, bias } => Layer::Dense {
                    weight: upd(0, weight)?,
                    bias: upd(1, bias)?,
                },
                Layer::BatchNorm(bn) => {
                    let stats = res.bn_stats[idx].as_ref().expect("training-mode stats");
                    let n = stats.count as f64;
                    let unbias = T::lit(if stats.count > 1 { n / (n - 1.0) } else { 1.0 });
                    let blend = |running: &Tensor<T>, batch: &[T], factor: T| {
                        running.zip_map(
                            &Tensor::new(running.shape().to_vec(), batch.to_vec())?,
                            |r, b| (T::one() - momentum) * r + momentum * b * factor,
                        )
                    };
                    Layer::BatchNorm(BatchNorm {
                        gamma: upd(0, &bn.gamma)?,
                        beta: upd(1, &bn.beta)?,
                        running_mean: blend(&bn.running_mean, &stats.mean, T::one())?,
                        running_var: blend(&bn.running_var, &stats.var, unbias)?,
                        epsilon: bn.epsilon,
                    })
                }
                other => other.clone(),
            });
        }
        Ok(model.with_layers(layers)?)
    }
}

fn split(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_val = (n as f64 * fraction).floor() as usize;
    let val = order[..n_val].to_vec();
    let train = order[n_val..].to_vec();
    (train, val)
}

/// Trains `template` on `(xs, labels)` and returns the weights with the best
/// validation accuracy (lower validation loss breaks ties).
///
/// Everything random (initialization, split, batch order) comes from one
/// `ChaCha8Rng` seeded with `config.seed`, in that order. When the
/// validation share rounds down to zero samples the training set doubles as
/// the validation set.
pub fn train<T: Element>(
    template: &ModelGraph<T>,
    xs: &[Tensor<T>],
    labels: &[usize],
    config: &TrainConfig,
) -> Result<(ModelGraph<T>, History)> {
    config.validate()?;
    if xs.is_empty() || xs.len() != labels.len() {
        return Err(TrainError::Dataset(format!(
            "{} inputs and {} labels",
            xs.len(),
            labels.len()
        )));
    }
    let classes = template.num_classes();
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(TrainError::Dataset(format!(
            "sample {i}: label {y} out of range for {classes} classes"
        )));
    }
    if let Some(i) = xs.iter().position(|x| x.shape() != template.input_shape()) {
        return Err(TrainError::Dataset(format!(
            "sample {i} has shape {:?}, model expects {:?}",
            xs[i].shape(),
            template.input_shape()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = initialize(template, &mut rng)?;
    let mut history = History::default();
    if config.max_epochs == 0 {
        return Ok((model, history));
    }
    let (mut train_idx, mut val_idx) = split(xs.len(), config.validation_fraction, &mut rng);
    let mut optimizer = Optimizer::new(&model);
    let mut best: Option<((f64, f64), ModelGraph<T>)> = None;
    let mut stale = 0;

    for epoch in 1..=config.max_epochs {
        let wrap = diverged(epoch);
        if config.resample_validation && epoch > 1 {
            (train_idx, val_idx) = split(xs.len(), config.validation_fraction, &mut rng);
        }
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for chunk in order.chunks(config.batch_size) {
            let bx: Vec<&Tensor<T>> = chunk.iter().map(|&i| &xs[i]).collect();
            let by: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let res = batch_gradients(&model, &bx, &by).map_err(&wrap)?;
            loss_sum += res.loss * chunk.len() as f64;
            correct += res.correct;
            model = optimizer.step(&model, &res, config).map_err(&wrap)?;
        }
        let eval_idx = if val_idx.is_empty() {
            &train_idx
        } else {
            &val_idx
        };
        let vx: Vec<&Tensor<T>> = eval_idx.iter().map(|&i| &xs[i]).collect();
        let vy: Vec<usize> = eval_idx.iter().map(|&i| labels[i]).collect();
        let (val_loss, val_acc) = evaluate(&model, &vx, &vy).map_err(&wrap)?;
        history.epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            train_acc: correct as f64 / order.len() as f64,
            val_loss,
            val_acc,
        });
        let key = (val_acc, -val_loss);
        let improved = match &best {
            None => true,
            Some((k, _)) => key.0 > k.0 || (key.0 == k.0 && key.1 > k.1),
        };
        if improved {
            best = Some((key, model.clone()));
            history.best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.early_stop_patience {
                break;
            }
        }
    }
    let (_, best_model) = best.expect("at least one epoch ran");
    Ok((best_model, history))
}

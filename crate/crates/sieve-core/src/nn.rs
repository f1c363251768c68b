//! Classifier construction, supervised training, prediction, and
//! checkpointing for target, substitute, and adversary models.
//!
//! Two architectures cover the desk-scale tasks: `mlp` is
//! dense(256)-relu-dense(K); `lenet_lite` is the classic
//! conv(6@5x5)-pool-conv(16@5x5)-pool-dense(120)-dense(84)-dense(K) stack.
//! Parameters initialize from seeded uniform He-style ranges, and training
//! with identical seed, data order, and config is bit-reproducible.

use crate::checkpoint::Checkpoint;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Mlp,
    LenetLite,
}

impl Arch {
    pub fn tag(&self) -> &'static str {
        match self {
            Arch::Mlp => "mlp",
            Arch::LenetLite => "lenet_lite",
        }
    }

    fn code(&self) -> f32 {
        match self {
            Arch::Mlp => 0.0,
            Arch::LenetLite => 1.0,
        }
    }

    fn from_code(code: f32) -> Result<Arch> {
        match code as i64 {
            0 => Ok(Arch::Mlp),
            1 => Ok(Arch::LenetLite),
            other => Err(Error::InvalidArg {
                op: "Arch::from_code",
                msg: format!("unknown architecture code {other}"),
            }),
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Arch> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "lenet_lite" => Ok(Arch::LenetLite),
            other => Err(Error::InvalidArg {
                op: "build_model",
                msg: format!("unknown architecture tag '{other}'"),
            }),
        }
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Dense { name: String, w: Tensor, b: Tensor },
    Conv { name: String, w: Tensor, b: Tensor, stride: usize, pad: usize },
    Relu,
    MaxPool2,
    Flatten,
}

/// A feed-forward classifier with named parameter tensors.
#[derive(Debug, Clone)]
pub struct Model {
    arch: Arch,
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<Layer>,
}

/// Immutable view marking a model as frozen: its parameters enter tapes as
/// constants and receive no gradients. Required by the noise-map and
/// suppression-value trainers.
#[derive(Clone, Copy)]
pub struct FrozenModel<'a> {
    model: &'a Model,
}

impl<'a> FrozenModel<'a> {
    pub fn model(&self) -> &'a Model {
        self.model
    }

    /// Forward pass on a tape with frozen parameters; gradients flow through
    /// the network into `x` but never into the weights.
    pub fn logits_on_tape(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        self.model.forward_on_tape(tape, x, false).map(|(id, _)| id)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            lr: 1e-3,
            batch_size: 64,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArg {
                op: "TrainConfig",
                msg: "epochs must be >= 1".into(),
            });
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArg {
                op: "TrainConfig",
                msg: format!("learning rate must be positive, got {}", self.lr),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArg {
                op: "TrainConfig",
                msg: "batch size must be >= 1".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub loss: f32,
    pub accuracy: f32,
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt() as f32;
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_raw(shape.to_vec(), data)
}

fn dense(rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Layer {
    Layer::Dense {
        name: name.to_string(),
        w: he_uniform(rng, &[fan_in, fan_out], fan_in),
        b: Tensor::zeros(&[fan_out]),
    }
}

fn conv(rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_out: usize, k: usize) -> Layer {
    Layer::Conv {
        name: name.to_string(),
        w: he_uniform(rng, &[c_out, c_in, k, k], c_in * k * k),
        b: Tensor::zeros(&[c_out]),
        stride: 1,
        pad: 0,
    }
}

/// Build a model with seeded deterministic initialization.
pub fn build_model(arch: Arch, input_shape: &[usize], num_classes: usize, seed: u64) -> Result<Model> {
    if num_classes == 0 {
        return Err(Error::InvalidArg {
            op: "build_model",
            msg: "class count must be >= 1".into(),
        });
    }
    if input_shape.is_empty() {
        return Err(Error::InvalidArg {
            op: "build_model",
            msg: "input shape must be non-empty".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = match arch {
        Arch::Mlp => {
            let d: usize = input_shape.iter().product();
            vec![
                Layer::Flatten,
                dense(&mut rng, "fc1", d, 256),
                Layer::Relu,
                dense(&mut rng, "fc2", 256, num_classes),
            ]
        }
        Arch::LenetLite => {
            if input_shape.len() != 3 {
                return Err(Error::InvalidArg {
                    op: "build_model",
                    msg: format!("lenet_lite needs [c,h,w] input, got {:?}", input_shape),
                });
            }
            let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
            // conv 5x5 / pool 2 twice
            let after = |s: usize| -> Option<usize> {
                let conv = s.checked_sub(4)?;
                if conv < 2 {
                    return None;
                }
                Some(conv / 2)
            };
            let (h1, w1) = match (after(h), after(w)) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::InvalidArg {
                        op: "build_model",
                        msg: format!("input {h}x{w} too small for lenet_lite"),
                    })
                }
            };
            let (h2, w2) = match (after(h1), after(w1)) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::InvalidArg {
                        op: "build_model",
                        msg: format!("input {h}x{w} too small for lenet_lite"),
                    })
                }
            };
            let flat = 16 * h2 * w2;
            vec![
                conv(&mut rng, "c1", c, 6, 5),
                Layer::Relu,
                Layer::MaxPool2,
                conv(&mut rng, "c2", 6, 16, 5),
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Flatten,
                dense(&mut rng, "fc1", flat, 120),
                Layer::Relu,
                dense(&mut rng, "fc2", 120, 84),
                Layer::Relu,
                dense(&mut rng, "fc3", 84, num_classes),
            ]
        }
    };
    Ok(Model {
        arch,
        input_shape: input_shape.to_vec(),
        num_classes,
        layers,
    })
}

impl Model {
    /// A single dense layer (multinomial logistic regression). On linearly
    /// separable data, cross-entropy training drives its weights toward the
    /// max-margin direction, so coordinates that carry no label signal keep
    /// their initialization scale while informative ones grow past it.
    pub fn linear(input_shape: &[usize], num_classes: usize, seed: u64) -> Result<Model> {
        if num_classes == 0 {
            return Err(Error::InvalidArg {
                op: "Model::linear",
                msg: "class count must be >= 1".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d: usize = input_shape.iter().product();
        let layers = vec![Layer::Flatten, dense(&mut rng, "fc1", d, num_classes)];
        Ok(Model {
            arch: Arch::Mlp,
            input_shape: input_shape.to_vec(),
            num_classes,
            layers,
        })
    }

    /// A dense(hidden)-relu-dense(K) network with an arbitrary hidden width;
    /// handy for gradient checks on tiny graphs.
    pub fn mlp_with_hidden(input_shape: &[usize], hidden: usize, num_classes: usize, seed: u64) -> Result<Model> {
        if num_classes == 0 || hidden == 0 {
            return Err(Error::InvalidArg {
                op: "mlp_with_hidden",
                msg: "hidden width and class count must be >= 1".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d: usize = input_shape.iter().product();
        let layers = vec![
            Layer::Flatten,
            dense(&mut rng, "fc1", d, hidden),
            Layer::Relu,
            dense(&mut rng, "fc2", hidden, num_classes),
        ];
        Ok(Model {
            arch: Arch::Mlp,
            input_shape: input_shape.to_vec(),
            num_classes,
            layers,
        })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn freeze(&self) -> FrozenModel<'_> {
        FrozenModel { model: self }
    }

    /// Named parameters in layer order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense { name, w, b } | Layer::Conv { name, w, b, .. } => {
                    out.push((format!("{name}.w"), w));
                    out.push((format!("{name}.b"), b));
                }
                _ => {}
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        for layer in &mut self.layers {
            match layer {
                Layer::Dense { name: n, w, b } | Layer::Conv { name: n, w, b, .. } => {
                    if format!("{n}.w") == name {
                        return Some(w);
                    }
                    if format!("{n}.b") == name {
                        return Some(b);
                    }
                }
                _ => {}
            }
        }
        None
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() < 2 || batch.shape()[1..] != self.input_shape[..] {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: batch.shape().to_vec(),
                rhs: self.input_shape.clone(),
            });
        }
        Ok(())
    }

    /// Pure forward pass to logits, no tape.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let n = batch.shape()[0];
        let mut x = batch.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Flatten => x.reshape(&[n, x.len() / n])?,
                Layer::Relu => x.relu(),
                Layer::MaxPool2 => crate::tensor::maxpool2(&x)?.0,
                Layer::Dense { w, b, .. } => x.matmul(w)?.add_rowwise(b)?,
                Layer::Conv { w, b, stride, pad, .. } => {
                    crate::tensor::conv2d(&x, w, b, *stride, *pad)?
                }
            };
        }
        Ok(x)
    }

    /// Class probabilities `[batch, K]`; each row sums to 1.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.logits(batch)?.softmax_rows()
    }

    /// Forward pass on a tape. With `trainable` the parameters become leaves
    /// and their node ids are returned in `parameters()` order; otherwise
    /// they are constants.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: NodeId, trainable: bool) -> Result<(NodeId, Vec<NodeId>)> {
        let n = tape.value(x).shape()[0];
        let mut param_ids = Vec::new();
        let mut cur = x;
        for layer in &self.layers {
            cur = match layer {
                Layer::Flatten => {
                    let len = tape.value(cur).len();
                    tape.reshape(cur, &[n, len / n])?
                }
                Layer::Relu => tape.relu(cur),
                Layer::MaxPool2 => tape.maxpool2(cur)?,
                Layer::Dense { w, b, .. } => {
                    let (wid, bid) = if trainable {
                        let ids = (tape.leaf(w.clone()), tape.leaf(b.clone()));
                        param_ids.push(ids.0);
                        param_ids.push(ids.1);
                        ids
                    } else {
                        (tape.constant(w.clone()), tape.constant(b.clone()))
                    };
                    let mm = tape.matmul(cur, wid)?;
                    tape.add_rowwise(mm, bid)?
                }
                Layer::Conv { w, b, stride, pad, .. } => {
                    let (wid, bid) = if trainable {
                        let ids = (tape.leaf(w.clone()), tape.leaf(b.clone()));
                        param_ids.push(ids.0);
                        param_ids.push(ids.1);
                        ids
                    } else {
                        (tape.constant(w.clone()), tape.constant(b.clone()))
                    };
                    tape.conv2d(cur, wid, bid, *stride, *pad)?
                }
            };
        }
        Ok((cur, param_ids))
    }

    fn set_parameters_in_order(&mut self, values: &[Tensor]) {
        let mut it = values.iter();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense { w, b, .. } | Layer::Conv { w, b, .. } => {
                    *w = it.next().expect("parameter list length").clone();
                    *b = it.next().expect("parameter list length").clone();
                }
                _ => {}
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push_scalar("arch", self.arch.code());
        ck.push_scalar("num_classes", self.num_classes as f32);
        ck.push(
            "input_shape",
            Tensor::from_vec(self.input_shape.iter().map(|&d| d as f32).collect()),
        );
        for (name, t) in self.parameters() {
            ck.push(name, t.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Model> {
        let arch = Arch::from_code(ck.require_scalar("arch")?)?;
        let num_classes = ck.require_scalar("num_classes")? as usize;
        let input_shape: Vec<usize> = ck
            .require("input_shape")?
            .data()
            .iter()
            .map(|&v| v as usize)
            .collect();
        // Rebuild the skeleton, then overwrite parameters. For mlp the layer
        // widths come from the stored tensors rather than the defaults, which
        // also covers the single-layer linear variant.
        let mut model = match arch {
            Arch::Mlp => {
                if ck.get("fc2.w").is_some() {
                    let hidden = ck.require("fc1.w")?.shape()[1];
                    Model::mlp_with_hidden(&input_shape, hidden, num_classes, 0)?
                } else {
                    Model::linear(&input_shape, num_classes, 0)?
                }
            }
            Arch::LenetLite => build_model(arch, &input_shape, num_classes, 0)?,
        };
        let mut values = Vec::new();
        for (name, expected) in model.parameters() {
            let stored = ck.require(&name)?;
            if stored.shape() != expected.shape() {
                return Err(Error::ShapeMismatch {
                    op: "model checkpoint",
                    lhs: stored.shape().to_vec(),
                    rhs: expected.shape().to_vec(),
                });
            }
            values.push(stored.clone());
        }
        model.set_parameters_in_order(&values);
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Model> {
        Model::from_checkpoint(&Checkpoint::read(path)?)
    }
}

/// Minibatch cross-entropy training. Updates the model in place and returns
/// per-epoch loss/accuracy measured on the training data as seen.
pub fn train_classifier(
    model: &mut Model,
    dataset: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArg {
            op: "train_classifier",
            msg: "dataset is empty".into(),
        });
    }
    if let Some(&bad) = dataset.labels.iter().find(|&&l| l as usize >= model.num_classes) {
        return Err(Error::InvalidArg {
            op: "train_classifier",
            msg: format!("label {bad} out of range for {} classes", model.num_classes),
        });
    }
    let sizes: Vec<usize> = model.parameters().iter().map(|(_, t)| t.len()).collect();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _epoch in 0..cfg.epochs {
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = dataset.batch_features(chunk);
            let labels = dataset.batch_labels(chunk);
            let mut tape = Tape::new();
            let x = tape.constant(batch);
            let (logits, param_ids) = model.forward_on_tape(&mut tape, x, true)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            tape.backward(loss)?;
            loss_sum += tape.value(loss).scalar_value()? as f64 * chunk.len() as f64;
            let preds = tape.value(logits).argmax_rows()?;
            correct += preds
                .iter()
                .zip(labels.iter())
                .filter(|(&p, &l)| p as u32 == l)
                .count();
            let grads: Vec<Tensor> = param_ids.iter().map(|&id| tape.grad(id)).collect();
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            let mut values: Vec<Tensor> = param_ids
                .iter()
                .map(|&id| tape.value(id).clone())
                .collect();
            {
                let mut refs: Vec<&mut Tensor> = values.iter_mut().collect();
                opt.step(&mut refs, &grad_refs);
            }
            model.set_parameters_in_order(&values);
        }
        history.push(EpochStats {
            loss: (loss_sum / n as f64) as f32,
            accuracy: correct as f32 / n as f32,
        });
    }
    Ok(history)
}

/// Fraction of items whose argmax prediction matches the label.
pub fn accuracy(model: &Model, features: &Tensor, labels: &[u32]) -> Result<f64> {
    let preds = model.logits(features)?.argmax_rows()?;
    let correct = preds
        .iter()
        .zip(labels.iter())
        .filter(|(&p, &l)| p as u32 == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

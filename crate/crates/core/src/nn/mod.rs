//! The classifier: three blocks of conv → ReLU → 2×2 max-pool → dropout →
//! batch norm, then flatten, two ReLU dense layers with dropout, and a
//! softmax output layer. Forward and backward are written out by hand so the
//! last convolutional feature map and its gradient are available to
//! explainability code.

mod checkpoint;
pub mod linalg;
mod net;
mod train;

pub use checkpoint::{checkpoint_bytes, checkpoint_digest, load_checkpoint, model_from_bytes, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use linalg::Scalar;
pub use net::{Batch, FeatureMapGrad, ForwardTrace, Grads, Mode};
pub use train::{
    argmax, predict, train, train_step, EpochRecord, History, OptimizerState, TrainOutcome,
};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binviz::InputTensor;
use crate::error::{Error, Result};
use crate::rng;

pub const BN_EPS: f64 = 1e-5;
/// Weight of the old value in running-statistic updates.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub kernel_first_conv: usize,
    /// Kernel size of the second and third conv layers.
    pub kernel_size: usize,
    pub filters: Vec<usize>,
    pub lambda_norm: bool,
    pub dense1: usize,
    pub dense2: usize,
    pub dropout_conv: f64,
    pub dropout_dense: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a validation-accuracy gain.
    pub patience: Option<usize>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            kernel_first_conv: 5,
            kernel_size: 3,
            filters: vec![32, 64, 128],
            lambda_norm: true,
            dense1: 1024,
            dense2: 256,
            dropout_conv: 0.1,
            dropout_dense: 0.3,
            learning_rate: 0.0003,
            momentum: 0.95,
            batch_size: 32,
            epochs: 12,
            patience: None,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (name, r) in [("dropout_conv", self.dropout_conv), ("dropout_dense", self.dropout_dense)] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("{name} must be in [0,1), got {r}"));
            }
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0,1), got {}", self.momentum));
        }
        if self.filters.is_empty() || self.filters.contains(&0) {
            return bad("filters must be non-empty and positive".into());
        }
        for k in [self.kernel_first_conv, self.kernel_size] {
            if k % 2 == 0 {
                return bad(format!("kernel sizes must be odd, got {k}"));
            }
        }
        if self.dense1 == 0 || self.dense2 == 0 || self.batch_size == 0 {
            return bad("dense sizes and batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn kernel(&self, block: usize) -> usize {
        if block == 0 {
            self.kernel_first_conv
        } else {
            self.kernel_size
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hyper: Hyperparams,
    pub input_side: usize,
    pub classes: Vec<String>,
    pub seed: u64,
}

impl ModelConfig {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let blocks = self.hyper.filters.len();
        if self.input_side == 0 || self.input_side % (1 << blocks) != 0 {
            return Err(Error::InvalidConfig(format!(
                "input side {} must be a positive multiple of {}",
                self.input_side,
                1 << blocks
            )));
        }
        if self.classes.len() < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        Ok(())
    }

    /// Spatial side at the input of block `i`.
    pub fn block_side(&self, i: usize) -> usize {
        self.input_side >> i
    }

    pub fn flat_len(&self) -> usize {
        let b = self.hyper.filters.len();
        let s = self.input_side >> b;
        self.hyper.filters[b - 1] * s * s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    /// `[out_ch, in_ch * kernel * kernel]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// `[outputs, inputs]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub blocks: Vec<ConvBlock<T>>,
    /// Two hidden layers followed by the output layer.
    pub dense: Vec<Dense<T>>,
}

impl<T: Scalar> Model<T> {
    /// He-initialized model; deterministic in `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, "init");
        let mut he = |n: usize, fan_in: usize| -> Vec<T> {
            let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            (0..n).map(|_| T::of(d.sample(&mut r))).collect()
        };
        let h = &config.hyper;
        let mut blocks = Vec::new();
        let mut in_ch = 1;
        for (i, &out_ch) in h.filters.iter().enumerate() {
            let k = h.kernel(i);
            let fan = in_ch * k * k;
            blocks.push(ConvBlock {
                in_ch,
                out_ch,
                kernel: k,
                weight: he(out_ch * fan, fan),
                bias: vec![T::zero(); out_ch],
                gamma: vec![T::one(); out_ch],
                beta: vec![T::zero(); out_ch],
                running_mean: vec![T::zero(); out_ch],
                running_var: vec![T::one(); out_ch],
            });
            in_ch = out_ch;
        }
        let sizes = [config.flat_len(), h.dense1, h.dense2, config.num_classes()];
        let dense = sizes
            .windows(2)
            .map(|w| Dense {
                inputs: w[0],
                outputs: w[1],
                weight: he(w[0] * w[1], w[0]),
                bias: vec![T::zero(); w[1]],
            })
            .collect();
        Ok(Model {
            config,
            blocks,
            dense,
        })
    }

    /// Every learnable tensor set to zero (normalization scales included).
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        let mut m = Self::new(config)?;
        for p in m.params_mut() {
            p.iter_mut().for_each(|v| *v = T::zero());
        }
        Ok(m)
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes()
    }

    pub fn input_side(&self) -> usize {
        self.config.input_side
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut n = Vec::new();
        for i in 0..self.blocks.len() {
            for s in ["conv.weight", "conv.bias", "bn.gamma", "bn.beta"] {
                n.push(format!("block{i}.{s}"));
            }
        }
        for j in 0..self.dense.len() {
            n.push(format!("dense{j}.weight"));
            n.push(format!("dense{j}.bias"));
        }
        n
    }

    pub fn params(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = Vec::new();
        for b in &self.blocks {
            v.extend([&b.weight[..], &b.bias[..], &b.gamma[..], &b.beta[..]]);
        }
        for d in &self.dense {
            v.extend([&d.weight[..], &d.bias[..]]);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut v = Vec::new();
        for b in &mut self.blocks {
            v.push(&mut b.weight);
            v.push(&mut b.bias);
            v.push(&mut b.gamma);
            v.push(&mut b.beta);
        }
        for d in &mut self.dense {
            v.push(&mut d.weight);
            v.push(&mut d.bias);
        }
        v
    }

    /// Non-learned state saved with checkpoints.
    pub fn buffer_names(&self) -> Vec<String> {
        (0..self.blocks.len())
            .flat_map(|i| [format!("block{i}.bn.running_mean"), format!("block{i}.bn.running_var")])
            .collect()
    }

    pub fn buffers(&self) -> Vec<&[T]> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.running_mean[..], &b.running_var[..]])
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut v = Vec::new();
        for b in &mut self.blocks {
            v.push(&mut b.running_mean);
            v.push(&mut b.running_var);
        }
        v
    }

    pub fn is_finite(&self) -> bool {
        self.params()
            .iter()
            .chain(self.buffers().iter())
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Precision conversion (used to run f64 gradient checks on f32 models).
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::of(x.f64())).collect::<Vec<U>>();
        Model {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlock {
                    in_ch: b.in_ch,
                    out_ch: b.out_ch,
                    kernel: b.kernel,
                    weight: c(&b.weight),
                    bias: c(&b.bias),
                    gamma: c(&b.gamma),
                    beta: c(&b.beta),
                    running_mean: c(&b.running_mean),
                    running_var: c(&b.running_var),
                })
                .collect(),
            dense: self
                .dense
                .iter()
                .map(|d| Dense {
                    inputs: d.inputs,
                    outputs: d.outputs,
                    weight: c(&d.weight),
                    bias: c(&d.bias),
                })
                .collect(),
        }
    }
}

/// Anything that maps inputs to class probabilities.
pub trait Classifier {
    fn num_classes(&self) -> usize;
    fn input_side(&self) -> usize;
    fn predict_proba(&self, inputs: &[InputTensor]) -> Result<Vec<Vec<f64>>>;
}

/// Classifiers that expose their last convolutional feature map and the
/// gradient of a pre-softmax class score with respect to it.
pub trait FeatureMapModel: Classifier {
    fn feature_map_grad(&self, input: &InputTensor, class: usize) -> Result<FeatureMapGrad>;
}

const INFER_CHUNK: usize = 64;

impl<T: Scalar> Classifier for Model<T> {
    fn num_classes(&self) -> usize {
        self.config.num_classes()
    }

    fn input_side(&self) -> usize {
        self.config.input_side
    }

    fn predict_proba(&self, inputs: &[InputTensor]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(INFER_CHUNK) {
            let batch = Batch::from_inputs(chunk, self.config.input_side)?;
            let trace = self.forward_eval(&batch, false)?;
            out.extend(trace.probabilities());
        }
        Ok(out)
    }
}

impl<T: Scalar> FeatureMapModel for Model<T> {
    fn feature_map_grad(&self, input: &InputTensor, class: usize) -> Result<FeatureMapGrad> {
        let batch = Batch::from_inputs(std::slice::from_ref(input), self.config.input_side)?;
        let trace = self.forward_eval(&batch, true)?;
        self.class_score_feature_grad(&trace, class)
    }
}

#[cfg(test)]
pub(crate) fn tiny_config(classes: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        hyper: Hyperparams {
            filters: vec![4, 8, 8],
            dense1: 32,
            dense2: 16,
            batch_size: 4,
            ..Hyperparams::default()
        },
        input_side: 16,
        classes: (0..classes).map(|i| format!("c{i}")).collect(),
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hyperparameter_defaults() {
        let h = Hyperparams::default();
        assert_eq!(h.kernel_first_conv, 5);
        assert!(h.lambda_norm);
        assert_eq!((h.dense1, h.dense2), (1024, 256));
        assert_eq!((h.dropout_conv, h.dropout_dense), (0.1, 0.3));
        assert_eq!(h.learning_rate, 0.0003);
        assert_eq!(h.momentum, 0.95);
        assert_eq!(h.filters, vec![32, 64, 128]);
        assert_eq!(h.batch_size, 32);
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        for h in [
            Hyperparams { dropout_conv: 1.0, ..Default::default() },
            Hyperparams { learning_rate: 0.0, ..Default::default() },
            Hyperparams { momentum: 1.0, ..Default::default() },
            Hyperparams { kernel_size: 4, ..Default::default() },
        ] {
            assert!(h.validate().is_err());
        }
    }

    #[test]
    fn shapes_follow_config() {
        let m: Model<f32> = Model::new(tiny_config(3, 1)).unwrap();
        assert_eq!(m.blocks[0].weight.len(), 4 * 25);
        assert_eq!(m.blocks[1].weight.len(), 8 * 4 * 9);
        assert_eq!(m.config.flat_len(), 8 * 2 * 2);
        assert_eq!(m.dense.len(), 3);
        assert_eq!(m.dense[2].outputs, 3);
        assert_eq!(m.params().len(), m.param_names().len());
        assert_eq!(m.buffers().len(), m.buffer_names().len());
    }

    #[test]
    fn init_is_seeded() {
        let a: Model<f32> = Model::new(tiny_config(3, 1)).unwrap();
        let b: Model<f32> = Model::new(tiny_config(3, 1)).unwrap();
        let c: Model<f32> = Model::new(tiny_config(3, 2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn bad_side_rejected() {
        let mut c = tiny_config(3, 1);
        c.input_side = 12;
        assert!(Model::<f32>::new(c).is_err());
    }
}

//! Temporal-convolution acoustic model with hand-written backprop.
//!
//! `num_layers` same-length 1-D convolutions (zero padding, ReLU after each)
//! followed by a per-frame linear projection to `alphabet_size + 1` logits,
//! the last of which is the CTC blank.
//!
//! Parameters are stored as `f32`; all arithmetic runs in `f64` on a
//! [`Network`] working copy.

mod checkpoint;
mod network;

use std::ops::Range;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alphabet;
use crate::error::{invalid, shape, Error, Result};
use crate::seed;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use network::{BackwardSignals, Network, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub kernel_width: usize,
    pub num_layers: usize,
    pub alphabet_size: usize,
    pub init_seed: u64,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            hidden_dim: 48,
            kernel_width: 5,
            num_layers: 3,
            alphabet_size: alphabet::SIZE,
            init_seed: 17,
            init_scale: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("kernel_width", self.kernel_width),
            ("num_layers", self.num_layers),
            ("alphabet_size", self.alphabet_size),
        ] {
            if v == 0 {
                return Err(invalid(format!("{name} must be at least 1")));
            }
        }
        if self.kernel_width % 2 == 0 {
            return Err(invalid("kernel_width must be odd"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(invalid("init_scale must be finite and non-negative"));
        }
        Ok(())
    }

    /// Output classes per frame, blank included.
    pub fn classes(&self) -> usize {
        self.alphabet_size + 1
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.feature_dim
        } else {
            self.hidden_dim
        }
    }

    pub fn layout(&self) -> ParamLayout {
        let mut tensors = Vec::with_capacity(2 * self.num_layers + 2);
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            tensors.push(TensorSpec {
                name,
                shape,
                offset,
            });
            offset += len;
        };
        for l in 0..self.num_layers {
            push(
                format!("conv{l}.weight"),
                vec![self.layer_input(l), self.hidden_dim, self.kernel_width],
            );
            push(format!("conv{l}.bias"), vec![self.hidden_dim]);
        }
        push("proj.weight".into(), vec![self.hidden_dim, self.classes()]);
        push("proj.bias".into(), vec![self.classes()]);
        ParamLayout {
            tensors,
            len: offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn is_bias(&self) -> bool {
        self.name.ends_with(".bias")
    }
}

/// Tensor names, shapes and offsets in declaration order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub tensors: Vec<TensorSpec>,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    config: ModelConfig,
    values: Vec<f32>,
}

impl Params {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn flatten(&self) -> Vec<f32> {
        self.values.clone()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn unflatten(config: ModelConfig, values: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let expected = config.layout().len;
        if values.len() != expected {
            return Err(shape(format!(
                "expected {expected} parameters, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("parameters must be finite".into()));
        }
        Ok(Self { config, values })
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.config
            .layout()
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.values[t.range()])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `p <- p - lr * step`, rounded back to `f32` storage.
    pub fn apply_update(&mut self, step: &Gradient, lr: f64) -> Result<()> {
        if step.len() != self.values.len() {
            return Err(shape("update does not match parameter count"));
        }
        for (p, g) in self.values.iter_mut().zip(step.as_slice()) {
            *p = (*p as f64 - lr * g) as f32;
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("parameter update produced a non-finite value".into()));
        }
        Ok(())
    }
}

/// Weights uniform in `[-init_scale, init_scale]`, drawn in declaration
/// order from one seeded stream; biases zero.
pub fn init_params(cfg: &ModelConfig) -> Result<Params> {
    cfg.validate()?;
    let layout = cfg.layout();
    let mut rng = seed::rng(cfg.init_seed);
    let mut values = vec![0f32; layout.len];
    for t in layout.tensors.iter().filter(|t| !t.is_bias()) {
        for v in &mut values[t.range()] {
            let u: f64 = rng.random_range(-1.0..=1.0);
            *v = (u * cfg.init_scale) as f32;
        }
    }
    Ok(Params {
        config: *cfg,
        values,
    })
}

/// Flat gradient in the parameter layout's order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    values: Vec<f64>,
}

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.scale(factor);
        self
    }

    pub fn add_assign(&mut self, other: &Gradient) -> Result<()> {
        if other.len() != self.len() {
            return Err(shape(format!(
                "gradient lengths differ: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }
}

pub fn forward(params: &Params, features: ArrayView2<f32>) -> Result<(Array2<f64>, Tape)> {
    Network::from_params(params).forward(features)
}

/// Gradient of `<logits, dlogits>` with respect to every parameter.
pub fn backward(params: &Params, tape: &Tape, dlogits: ArrayView2<f64>) -> Result<Gradient> {
    let net = Network::from_params(params);
    let signals = net.backward_signals(tape, dlogits)?;
    Ok(net.weight_gradient(tape, &signals, 0..tape.frames()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            feature_dim: 3,
            hidden_dim: 4,
            kernel_width: 3,
            num_layers: 2,
            alphabet_size: 4,
            init_seed: 5,
            init_scale: 0.5,
        }
    }

    #[test]
    fn layout_shapes() {
        let l = tiny().layout();
        let names: Vec<_> = l.tensors.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(
            names,
            ["conv0.weight", "conv0.bias", "conv1.weight", "conv1.bias", "proj.weight", "proj.bias"]
        );
        assert_eq!(l.tensors[0].shape, [3, 4, 3]);
        assert_eq!(l.tensors[2].shape, [4, 4, 3]);
        assert_eq!(l.tensors[4].shape, [4, 5]);
        assert_eq!(l.len, 36 + 4 + 48 + 4 + 20 + 5);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_params(&tiny()).unwrap();
        let b = init_params(&tiny()).unwrap();
        assert_eq!(
            a.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        for t in tiny().layout().tensors.iter().filter(|t| t.is_bias()) {
            assert!(a.as_slice()[t.range()].iter().all(|&v| v == 0.0));
        }
        assert!(a.as_slice().iter().all(|v| v.abs() <= 0.5));
        assert!(a.as_slice().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn flatten_round_trip_is_bitwise() {
        let p = init_params(&tiny()).unwrap();
        let q = Params::unflatten(tiny(), p.flatten()).unwrap();
        assert_eq!(p, q);
        assert!(Params::unflatten(tiny(), vec![0.0; 3]).is_err());
    }

    #[test]
    fn invalid_configs() {
        let mut c = tiny();
        c.kernel_width = 4;
        assert!(c.validate().is_err());
        c.kernel_width = 3;
        c.hidden_dim = 0;
        assert!(init_params(&c).is_err());
    }
}

//! Conditional generator and patch discriminator.

mod checkpoint;
mod discriminator;
mod generator;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use discriminator::{build_discriminator, discriminator_score, DiscriminatorNet};
pub use generator::{build_generator, generator_predict, GeneratorNet};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("image side {side} must be divisible by {divisor}")]
    IndivisibleSide { side: usize, divisor: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How the anatomical mask is fed to the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GuideMode {
    /// One channel holding the gray-level rendering of the mask.
    #[default]
    Gray,
    /// One channel per class.
    OneHot,
}

impl GuideMode {
    pub fn channels(self) -> usize {
        match self {
            GuideMode::Gray => 1,
            GuideMode::OneHot => 4,
        }
    }
}

impl fmt::Display for GuideMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GuideMode::Gray => "gray",
            GuideMode::OneHot => "one-hot",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_side: usize,
    pub latent_dim: usize,
    pub gen_widths: [usize; 3],
    pub disc_widths: [usize; 4],
    /// Fine-step count `T`; the step plane holds `t / T`.
    pub total_steps: usize,
    pub guide_mode: GuideMode,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_side: 64,
            latent_dim: 8,
            gen_widths: [32, 64, 128],
            disc_widths: [32, 64, 128, 256],
            total_steps: 1000,
            guide_mode: GuideMode::Gray,
            init_std: 0.02,
            seed: 7,
        }
    }
}

impl ModelConfig {
    fn validate(&self) -> Result<(), ModelError> {
        if self.latent_dim == 0 || self.total_steps == 0 {
            return Err(ModelError::Config("latent_dim and total_steps must be positive".into()));
        }
        if self.gen_widths.contains(&0) || self.disc_widths.contains(&0) {
            return Err(ModelError::Config("layer widths must be positive".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(ModelError::Config(format!("init_std {} must be positive", self.init_std)));
        }
        Ok(())
    }
}

/// Named parameter tensors in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> ParamSet<F> {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor<F>) -> usize {
        self.names.push(name);
        self.tensors.push(t.with_requires_grad(true));
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `g`; `track` controls gradient tracking.
    pub fn bind(&self, g: &mut Graph<F>, track: bool) -> Result<Vec<Var>, TensorError> {
        self.tensors
            .iter()
            .map(|t| if track { g.leaf(t) } else { g.constant(t.shape(), t.data().to_vec()) })
            .collect()
    }

    /// Copies gradients of the bound parameters from `g` into the tensors.
    pub fn collect_grads(&mut self, g: &Graph<F>, vars: &[Var]) -> Result<(), TensorError> {
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            g.write_grad(v, t)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replaces all values, checking every shape.
    pub fn load_values(&mut self, blocks: &[Vec<F>]) -> Result<(), ModelError> {
        if blocks.len() != self.tensors.len() {
            return Err(ModelError::Shape {
                what: "parameter block count",
                expected: vec![self.tensors.len()],
                got: vec![blocks.len()],
            });
        }
        for (t, b) in self.tensors.iter_mut().zip(blocks) {
            if b.len() != t.numel() {
                return Err(ModelError::Shape {
                    what: "parameter block",
                    expected: t.shape().to_vec(),
                    got: vec![b.len()],
                });
            }
            t.data_mut().copy_from_slice(b);
        }
        Ok(())
    }
}

/// Convolution with per-channel bias; indices point into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvLayer {
    weight: usize,
    bias: Option<usize>,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn declare<F: Scalar, R: rand::Rng + ?Sized>(
        params: &mut ParamSet<F>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = params.push(format!("{name}.weight"), Tensor::randn(&[cout, cin, kernel, kernel], std, rng));
        let bias = Some(params.push(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self { weight, bias, stride, pad }
    }

    /// A layer feeding an instance norm, where a bias would cancel out.
    #[allow(clippy::too_many_arguments)]
    fn declare_unbiased<F: Scalar, R: rand::Rng + ?Sized>(
        params: &mut ParamSet<F>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = params.push(format!("{name}.weight"), Tensor::randn(&[cout, cin, kernel, kernel], std, rng));
        Self {
            weight,
            bias: None,
            stride,
            pad,
        }
    }

    fn apply<F: Scalar>(&self, g: &mut Graph<F>, p: &[Var], x: Var) -> Result<Var, TensorError> {
        let y = g.conv2d(x, p[self.weight], self.stride, self.pad)?;
        match self.bias {
            Some(b) => g.add_channel_bias(y, p[b]),
            None => Ok(y),
        }
    }
}

/// `[n, 1, h, w]` stack of planes, sample `i` filled with `ts[i] / T`.
fn step_plane<F: Scalar>(g: &mut Graph<F>, ts: &[usize], h: usize, w: usize, total: usize) -> Result<Var, TensorError> {
    let data = ts
        .iter()
        .flat_map(|&t| std::iter::repeat_n(F::from_f64_lossy(t as f64 / total as f64), h * w))
        .collect();
    g.constant(&[ts.len(), 1, h, w], data)
}

fn check_steps(ts: &[usize], n: usize) -> Result<(), ModelError> {
    if ts.len() != n {
        return Err(ModelError::Shape {
            what: "step indices",
            expected: vec![n],
            got: vec![ts.len()],
        });
    }
    Ok(())
}

fn expect_shape(what: &'static str, got: &[usize], expected: &[usize]) -> Result<(), ModelError> {
    if got != expected {
        return Err(ModelError::Shape {
            what,
            expected: expected.to_vec(),
            got: got.to_vec(),
        });
    }
    Ok(())
}

//! The encoder: token and column-position embeddings, a stack of layers in
//! which row attention and column attention read the same normalized input
//! and are summed, a feed-forward block per layer, then a sum over rows and
//! a dense / layer-norm / classifier head producing one distribution over
//! the vocabulary per column.

mod archive;
mod network;
mod ops;

use std::fmt::Debug;

use ndarray::{Array1, Array2};
use num_traits::{Float, FromPrimitive, NumAssign};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use archive::{load_archive, save_archive, ArchiveError, CONFIG_FILE, VOCAB_FILE, WEIGHTS_FILE};
pub use network::{forward, loss, loss_and_gradients, predict_ids};

/// Floating point type the network can run in (`f32` for training, `f64`
/// for gradient checks).
pub trait Real:
    ndarray::LinalgScalar + ndarray::ScalarOperand + Float + FromPrimitive + NumAssign + Debug + Send + Sync
{
}

impl<T> Real for T where
    T: ndarray::LinalgScalar + ndarray::ScalarOperand + Float + FromPrimitive + NumAssign + Debug + Send + Sync
{
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("WidthExceeded: grid width {width} exceeds max_row_positions {max}")]
    WidthExceeded { width: usize, max: usize },
    #[error("TokenOutOfRange: token id {id} is outside a vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("LabelMismatch: {labels} labels for {width} columns")]
    LabelMismatch { labels: usize, width: usize },
    #[error("NoSupervisedPositions: batch has no labelled position")]
    NoSupervisedPositions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub vocab_size: usize,
    pub max_row_positions: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizePreset {
    Tiny,
    Small,
}

impl std::str::FromStr for SizePreset {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny" => Ok(SizePreset::Tiny),
            "small" => Ok(SizePreset::Small),
            other => Err(ModelError::InvalidConfig(format!("unknown size preset `{other}`"))),
        }
    }
}

pub const DEFAULT_MAX_ROW_POSITIONS: usize = 256;
pub const DEFAULT_DROPOUT: f64 = 0.1;

impl ModelConfig {
    /// 128 hidden, 256 intermediate, 2 heads, 2 layers.
    pub fn tiny(vocab_size: usize) -> Self {
        Self::preset(SizePreset::Tiny, vocab_size)
    }

    /// 256 hidden, 512 intermediate, 4 heads, 4 layers.
    pub fn small(vocab_size: usize) -> Self {
        Self::preset(SizePreset::Small, vocab_size)
    }

    pub fn preset(size: SizePreset, vocab_size: usize) -> Self {
        let (hidden_size, intermediate_size, num_heads, num_layers) = match size {
            SizePreset::Tiny => (128, 256, 2, 2),
            SizePreset::Small => (256, 512, 4, 4),
        };
        ModelConfig {
            hidden_size,
            intermediate_size,
            num_heads,
            num_layers,
            vocab_size,
            max_row_positions: DEFAULT_MAX_ROW_POSITIONS,
            dropout: DEFAULT_DROPOUT,
        }
    }

    pub fn with_vocab_size(mut self, vocab_size: usize) -> Self {
        self.vocab_size = vocab_size;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.hidden_size == 0
            || self.intermediate_size == 0
            || self.num_heads == 0
            || self.num_layers == 0
            || self.vocab_size == 0
            || self.max_row_positions == 0
        {
            return bad("all sizes must be positive");
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return bad("hidden_size must be divisible by num_heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Number of scalar parameters, computed from shapes alone.
    pub fn param_count(&self) -> usize {
        let h = self.hidden_size;
        let i = self.intermediate_size;
        let linear = |a: usize, b: usize| a * b + b;
        let layer = 2 * h + 8 * linear(h, h) + 2 * h + linear(h, i) + linear(i, h);
        self.vocab_size * h
            + self.max_row_positions * h
            + self.num_layers * layer
            + linear(h, h)
            + 2 * h
            + linear(h, self.vocab_size)
    }
}

/// Affine map `x W + b`, `W` stored (in, out).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<F> {
    pub scale: Array1<F>,
    pub offset: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<F> {
    pub query: Linear<F>,
    pub key: Linear<F>,
    pub value: Linear<F>,
    pub output: Linear<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<F> {
    pub attn_norm: Norm<F>,
    pub row_attn: Attention<F>,
    pub col_attn: Attention<F>,
    pub ffn_norm: Norm<F>,
    pub ffn_in: Linear<F>,
    pub ffn_out: Linear<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    pub config: ModelConfig,
    pub token_embedding: Array2<F>,
    pub position_embedding: Array2<F>,
    pub layers: Vec<Layer<F>>,
    pub head_dense: Linear<F>,
    pub head_norm: Norm<F>,
    pub classifier: Linear<F>,
}

/// Read-only view of one named tensor.
pub struct TensorView<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [F],
}

/// Mutable view of one named tensor.
pub struct TensorViewMut<'a, F> {
    pub name: String,
    pub data: &'a mut [F],
}

impl<F: Real> Linear<F> {
    fn build(inp: usize, out: usize, mut draw: impl FnMut() -> F) -> Self {
        Linear {
            weight: Array2::from_shape_simple_fn((inp, out), &mut draw),
            bias: Array1::zeros(out),
        }
    }
}

impl<F: Real> Norm<F> {
    fn build(n: usize) -> Self {
        Norm {
            scale: Array1::ones(n),
            offset: Array1::zeros(n),
        }
    }
}

impl<F: Real> Attention<F> {
    fn build(h: usize, mut draw: impl FnMut() -> F) -> Self {
        Attention {
            query: Linear::build(h, h, &mut draw),
            key: Linear::build(h, h, &mut draw),
            value: Linear::build(h, h, &mut draw),
            output: Linear::build(h, h, &mut draw),
        }
    }
}

pub const INIT_STD: f64 = 0.02;

/// Normal(0, 0.02) weights and embeddings, zero biases, unit norm scales.
/// Draws happen in `f64` so `f32` and `f64` parameter sets from one seed
/// agree up to rounding.
pub fn init_params<F: Real>(config: &ModelConfig, seed: u64) -> Result<Params<F>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("positive std");
    let mut draw = || F::from_f64(normal.sample(&mut rng)).expect("finite draw");
    let (h, i) = (config.hidden_size, config.intermediate_size);

    let token_embedding = Array2::from_shape_simple_fn((config.vocab_size, h), &mut draw);
    let position_embedding = Array2::from_shape_simple_fn((config.max_row_positions, h), &mut draw);
    let layers = (0..config.num_layers)
        .map(|_| Layer {
            attn_norm: Norm::build(h),
            row_attn: Attention::build(h, &mut draw),
            col_attn: Attention::build(h, &mut draw),
            ffn_norm: Norm::build(h),
            ffn_in: Linear::build(h, i, &mut draw),
            ffn_out: Linear::build(i, h, &mut draw),
        })
        .collect();
    let head_dense = Linear::build(h, h, &mut draw);
    let classifier = Linear::build(h, config.vocab_size, &mut draw);
    Ok(Params {
        config: *config,
        token_embedding,
        position_embedding,
        layers,
        head_dense,
        head_norm: Norm::build(h),
        classifier,
    })
}

impl<F: Real> Attention<F> {
    fn parts(&self) -> [(&'static str, &Linear<F>); 4] {
        [("query", &self.query), ("key", &self.key), ("value", &self.value), ("output", &self.output)]
    }

    fn parts_mut(&mut self) -> [(&'static str, &mut Linear<F>); 4] {
        [
            ("query", &mut self.query),
            ("key", &mut self.key),
            ("value", &mut self.value),
            ("output", &mut self.output),
        ]
    }
}

fn push_view<'a, F: Real, D: ndarray::Dimension>(
    out: &mut Vec<TensorView<'a, F>>,
    name: String,
    a: &'a ndarray::Array<F, D>,
) {
    out.push(TensorView {
        name,
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("standard layout"),
    });
}

fn push_view_mut<'a, F: Real, D: ndarray::Dimension>(
    out: &mut Vec<TensorViewMut<'a, F>>,
    name: String,
    a: &'a mut ndarray::Array<F, D>,
) {
    out.push(TensorViewMut {
        name,
        data: a.as_slice_mut().expect("standard layout"),
    });
}

impl<F: Real> Params<F> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Every tensor with its stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<TensorView<'_, F>> {
        let mut out = Vec::new();
        push_view(&mut out, "embed.tokens".into(), &self.token_embedding);
        push_view(&mut out, "embed.positions".into(), &self.position_embedding);
        for (n, layer) in self.layers.iter().enumerate() {
            push_view(&mut out, format!("layers.{n}.attn_norm.scale"), &layer.attn_norm.scale);
            push_view(&mut out, format!("layers.{n}.attn_norm.offset"), &layer.attn_norm.offset);
            for (kind, attn) in [("row_attn", &layer.row_attn), ("col_attn", &layer.col_attn)] {
                for (part, lin) in attn.parts() {
                    push_view(&mut out, format!("layers.{n}.{kind}.{part}.weight"), &lin.weight);
                    push_view(&mut out, format!("layers.{n}.{kind}.{part}.bias"), &lin.bias);
                }
            }
            push_view(&mut out, format!("layers.{n}.ffn_norm.scale"), &layer.ffn_norm.scale);
            push_view(&mut out, format!("layers.{n}.ffn_norm.offset"), &layer.ffn_norm.offset);
            push_view(&mut out, format!("layers.{n}.ffn_in.weight"), &layer.ffn_in.weight);
            push_view(&mut out, format!("layers.{n}.ffn_in.bias"), &layer.ffn_in.bias);
            push_view(&mut out, format!("layers.{n}.ffn_out.weight"), &layer.ffn_out.weight);
            push_view(&mut out, format!("layers.{n}.ffn_out.bias"), &layer.ffn_out.bias);
        }
        push_view(&mut out, "head.dense.weight".into(), &self.head_dense.weight);
        push_view(&mut out, "head.dense.bias".into(), &self.head_dense.bias);
        push_view(&mut out, "head.norm.scale".into(), &self.head_norm.scale);
        push_view(&mut out, "head.norm.offset".into(), &self.head_norm.offset);
        push_view(&mut out, "classifier.weight".into(), &self.classifier.weight);
        push_view(&mut out, "classifier.bias".into(), &self.classifier.bias);
        out
    }

    /// Mutable counterpart of [`Params::tensors`], same names and order.
    pub fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_, F>> {
        let mut out = Vec::new();
        push_view_mut(&mut out, "embed.tokens".into(), &mut self.token_embedding);
        push_view_mut(&mut out, "embed.positions".into(), &mut self.position_embedding);
        for (n, layer) in self.layers.iter_mut().enumerate() {
            push_view_mut(&mut out, format!("layers.{n}.attn_norm.scale"), &mut layer.attn_norm.scale);
            push_view_mut(&mut out, format!("layers.{n}.attn_norm.offset"), &mut layer.attn_norm.offset);
            for (kind, attn) in [("row_attn", &mut layer.row_attn), ("col_attn", &mut layer.col_attn)] {
                for (part, lin) in attn.parts_mut() {
                    push_view_mut(&mut out, format!("layers.{n}.{kind}.{part}.weight"), &mut lin.weight);
                    push_view_mut(&mut out, format!("layers.{n}.{kind}.{part}.bias"), &mut lin.bias);
                }
            }
            push_view_mut(&mut out, format!("layers.{n}.ffn_norm.scale"), &mut layer.ffn_norm.scale);
            push_view_mut(&mut out, format!("layers.{n}.ffn_norm.offset"), &mut layer.ffn_norm.offset);
            push_view_mut(&mut out, format!("layers.{n}.ffn_in.weight"), &mut layer.ffn_in.weight);
            push_view_mut(&mut out, format!("layers.{n}.ffn_in.bias"), &mut layer.ffn_in.bias);
            push_view_mut(&mut out, format!("layers.{n}.ffn_out.weight"), &mut layer.ffn_out.weight);
            push_view_mut(&mut out, format!("layers.{n}.ffn_out.bias"), &mut layer.ffn_out.bias);
        }
        push_view_mut(&mut out, "head.dense.weight".into(), &mut self.head_dense.weight);
        push_view_mut(&mut out, "head.dense.bias".into(), &mut self.head_dense.bias);
        push_view_mut(&mut out, "head.norm.scale".into(), &mut self.head_norm.scale);
        push_view_mut(&mut out, "head.norm.offset".into(), &mut self.head_norm.offset);
        push_view_mut(&mut out, "classifier.weight".into(), &mut self.classifier.weight);
        push_view_mut(&mut out, "classifier.bias".into(), &mut self.classifier.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Same shapes, every entry zero (gradient accumulator).
    pub fn zeros_like(&self) -> Params<F> {
        self.map(|_| F::zero())
    }

    pub fn map<G: Real>(&self, f: impl Fn(F) -> G) -> Params<G> {
        let lin = |l: &Linear<F>| Linear {
            weight: l.weight.mapv(&f),
            bias: l.bias.mapv(&f),
        };
        let norm = |n: &Norm<F>| Norm {
            scale: n.scale.mapv(&f),
            offset: n.offset.mapv(&f),
        };
        let attn = |a: &Attention<F>| Attention {
            query: lin(&a.query),
            key: lin(&a.key),
            value: lin(&a.value),
            output: lin(&a.output),
        };
        Params {
            config: self.config,
            token_embedding: self.token_embedding.mapv(&f),
            position_embedding: self.position_embedding.mapv(&f),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    attn_norm: norm(&l.attn_norm),
                    row_attn: attn(&l.row_attn),
                    col_attn: attn(&l.col_attn),
                    ffn_norm: norm(&l.ffn_norm),
                    ffn_in: lin(&l.ffn_in),
                    ffn_out: lin(&l.ffn_out),
                })
                .collect(),
            head_dense: lin(&self.head_dense),
            head_norm: norm(&self.head_norm),
            classifier: lin(&self.classifier),
        }
    }

    pub fn cast<G: Real>(&self) -> Params<G> {
        self.map(|x| G::from_f64(x.to_f64().expect("finite")).expect("representable"))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

/// Biases and normalization parameters are exempt from weight decay.
pub fn is_decayed(name: &str) -> bool {
    !(name.ends_with(".bias") || name.contains("norm."))
}

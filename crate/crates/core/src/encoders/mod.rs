//! Toy image encoders, the class-prompt table standing in for a text encoder,
//! contrastive pretraining and the parameter checkpoint format.

mod checkpoint;
mod convnet;
mod pretrain;
mod prompts;
mod tinyvit;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use robustsim_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{contract, Error, Result};
use crate::image::{ImageBatch, LabeledImages};
use crate::par::Execution;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub(crate) use pretrain::mixed_batches;
pub use pretrain::{contrastive_pretrain, infonce_loss, PretrainConfig, PretrainOutcome};
pub use prompts::PromptTable;

/// Images per graph when embedding a batch without gradients.
const EMBED_CHUNK: usize = 16;

/// Anything that maps `[N, C, H, W]` images to `[N, D]` embeddings on a graph.
///
/// The parameters of implementors enter the graph as constants, so gradients
/// flow only to the images.
pub trait ImageEncoder: Sync {
    fn embed_dim(&self) -> usize;

    fn forward<'g>(&self, g: &'g Graph, images: Var<'g>) -> Result<Var<'g>>;

    /// Unnormalized embeddings of every image in the batch.
    fn embed_images(&self, images: &ImageBatch) -> Result<Vec<Embedding>> {
        embed_with(self, images, Execution::Parallel)
    }
}

/// Embeds a batch in fixed-size chunks scheduled by `exec`.
impl<T: ImageEncoder + ?Sized> ImageEncoder for &T {
    fn embed_dim(&self) -> usize {
        (**self).embed_dim()
    }

    fn forward<'g>(&self, g: &'g Graph, images: Var<'g>) -> Result<Var<'g>> {
        (**self).forward(g, images)
    }
}

pub fn embed_with<E: ImageEncoder + ?Sized>(
    encoder: &E,
    images: &ImageBatch,
    exec: Execution,
) -> Result<Vec<Embedding>> {
    let starts: Vec<usize> = (0..images.len()).step_by(EMBED_CHUNK).collect();
    let chunks = exec.try_map(&starts, |_, &start| {
        let end = (start + EMBED_CHUNK).min(images.len());
        let g = Graph::new();
        let x = g.constant(images.slice(start, end).into_tensor())?;
        let out = encoder.forward(&g, x)?.value();
        let d = encoder.embed_dim();
        Ok::<_, Error>(
            out.data()
                .chunks(d)
                .map(|row| Embedding::new(row.to_vec()))
                .collect::<Vec<_>>(),
        )
    })?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Embedding of a single `[1, C, H, W]` image.
pub fn embed_one<E: ImageEncoder + ?Sized>(encoder: &E, image: &Tensor) -> Result<Embedding> {
    let g = Graph::new();
    let x = g.constant(image.clone())?;
    Ok(Embedding::new(encoder.forward(&g, x)?.value().into_data()))
}

/// Class with the most similar prompt, per image (ties to the lowest class).
pub fn zero_shot_predict<E: ImageEncoder + ?Sized>(
    encoder: &E,
    prompts: &PromptTable,
    images: &ImageBatch,
    exec: Execution,
) -> Result<Vec<usize>> {
    let table: Vec<Embedding> = prompts.embeddings().iter().map(Embedding::normalize).collect::<Result<_>>()?;
    let embs = embed_with(encoder, images, exec)?;
    embs.iter()
        .map(|e| {
            let u = e.normalize()?;
            let mut best = (0, f64::NEG_INFINITY);
            for (k, p) in table.iter().enumerate() {
                let s = u.dot(p);
                if s > best.1 {
                    best = (k, s);
                }
            }
            Ok(best.0)
        })
        .collect()
}

/// Fraction of images whose zero-shot prediction matches the label.
pub fn zero_shot_accuracy<E: ImageEncoder + ?Sized>(
    encoder: &E,
    prompts: &PromptTable,
    data: &LabeledImages,
    exec: Execution,
) -> Result<f64> {
    if data.is_empty() {
        return contract("zero-shot accuracy of an empty set");
    }
    let pred = zero_shot_predict(encoder, prompts, &data.images, exec)?;
    let hits = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Toy architecture family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Three blocks of 3x3 conv, GELU, 2x2 average pool; global pool; linear head.
    ConvNet,
    /// 4x4 patch embedding, two pre-norm transformer blocks, class-token readout.
    TinyVit,
}

impl Architecture {
    pub fn tag(&self) -> &'static str {
        match self {
            Architecture::ConvNet => "convnet",
            Architecture::TinyVit => "tinyvit",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convnet" => Ok(Architecture::ConvNet),
            "tinyvit" => Ok(Architecture::TinyVit),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Sizes shared by both architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub channels: usize,
    pub image_size: usize,
    pub embed_dim: usize,
}

impl Default for EncoderShape {
    fn default() -> Self {
        Self {
            channels: 3,
            image_size: 32,
            embed_dim: 64,
        }
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Weights of a toy encoder, stored in a fixed per-architecture order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    arch: Architecture,
    params: Vec<NamedTensor>,
}

impl EncoderParams {
    /// Deterministic random initialization.
    pub fn init(arch: Architecture, shape: EncoderShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = match arch {
            Architecture::ConvNet => convnet::init(&shape, &mut rng),
            Architecture::TinyVit => tinyvit::init(&shape, &mut rng),
        };
        Self { arch, params }
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against the architecture's layout.
    pub fn from_tensors(arch: Architecture, params: Vec<NamedTensor>) -> Result<Self> {
        let expected = match arch {
            Architecture::ConvNet => convnet::PARAM_NAMES.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            Architecture::TinyVit => tinyvit::param_names(),
        };
        let names: Vec<&str> = params.iter().map(|p| p.name.as_str()).collect();
        if names != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return contract(format!("{arch} expects parameters {expected:?}, got {names:?}"));
        }
        let out = Self { arch, params };
        out.validate()?;
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        for p in &self.params {
            if !p.tensor.all_finite() {
                return contract(format!("parameter {} is not finite", p.name));
            }
        }
        match self.arch {
            Architecture::ConvNet => convnet::validate(&self.params),
            Architecture::TinyVit => tinyvit::validate(&self.params),
        }
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().map(|p| &p.tensor)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Same architecture with every weight set to zero.
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for p in &mut out.params {
            p.tensor = Tensor::zeros(p.tensor.shape());
        }
        out
    }

    /// Replaces every tensor; `update` receives parameters in layout order.
    pub(crate) fn set_tensors(&mut self, tensors: Vec<Tensor>) {
        debug_assert_eq!(tensors.len(), self.params.len());
        for (p, t) in self.params.iter_mut().zip(tensors) {
            debug_assert_eq!(p.tensor.shape(), t.shape());
            p.tensor = t;
        }
    }

    /// Records parameters on `g` as differentiable leaves, returning them in
    /// layout order.
    pub fn bind_trainable<'g>(&self, g: &'g Graph) -> Result<Vec<Var<'g>>> {
        self.params
            .iter()
            .map(|p| g.input(p.tensor.clone()).map_err(Error::from))
            .collect()
    }

    fn bind_constant<'g>(&self, g: &'g Graph) -> Result<Vec<Var<'g>>> {
        self.params
            .iter()
            .map(|p| g.constant(p.tensor.clone()).map_err(Error::from))
            .collect()
    }

    /// Forward pass with caller-bound parameters (see [`Self::bind_trainable`]).
    pub fn forward_with<'g>(&self, params: &[Var<'g>], images: Var<'g>) -> Result<Var<'g>> {
        match self.arch {
            Architecture::ConvNet => convnet::forward(params, images),
            Architecture::TinyVit => tinyvit::forward(params, images),
        }
    }

    /// Whether `[N, C, H, W]` inputs of this shape fit the architecture.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let ok = shape.len() == 4
            && match self.arch {
                Architecture::ConvNet => convnet::accepts(&self.params, &shape[1..]),
                Architecture::TinyVit => tinyvit::accepts(&self.params, &shape[1..]),
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Tape(robustsim_autodiff::TapeError::Shape {
                op: "encode_image",
                detail: format!("{} cannot encode input of shape {shape:?}", self.arch),
            }))
        }
    }
}

impl ImageEncoder for EncoderParams {
    fn embed_dim(&self) -> usize {
        self.params.last().map_or(0, |p| p.tensor.len())
    }

    fn forward<'g>(&self, g: &'g Graph, images: Var<'g>) -> Result<Var<'g>> {
        self.check_input(&images.shape())?;
        let params = self.bind_constant(g)?;
        self.forward_with(&params, images)
    }
}

/// Uniform initialization with variance `gain / fan_in`.
pub(crate) fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    use rand::Rng;
    let bound = (3.0 * gain / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("sized")
}

pub(crate) fn named(name: impl Into<String>, tensor: Tensor) -> NamedTensor {
    NamedTensor {
        name: name.into(),
        tensor,
    }
}

/// Maps `[0, 1]` pixels to `[-1, 1]`.
pub(crate) fn center_pixels<'g>(images: Var<'g>) -> Result<Var<'g>> {
    Ok(images.scale(2.0)?.add_scalar(-1.0)?)
}

/// `x [N, T, in] -> [N, T, out]` through a dense layer.
pub(crate) fn dense_tokens<'g>(x: Var<'g>, w: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    let s = x.shape();
    let out = w.shape()[1];
    let flat = x.reshape(&[s[0] * s[1], s[2]])?;
    Ok(flat.matmul(w)?.add_bias(b)?.reshape(&[s[0], s[1], out])?)
}

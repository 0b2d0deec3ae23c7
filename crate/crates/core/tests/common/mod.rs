#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robustsim::encoders::{Architecture, EncoderParams, EncoderShape};
use robustsim::{Embedding, ImageBatch};
use robustsim_autodiff::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn images(rng: &mut ChaCha8Rng, n: usize) -> ImageBatch {
    ImageBatch::new(uniform(rng, &[n, 3, 32, 32], 0.0, 1.0)).unwrap()
}

pub fn embedding(rng: &mut ChaCha8Rng, dim: usize) -> Embedding {
    Embedding::new((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

pub fn encoder(arch: Architecture, seed: u64) -> EncoderParams {
    EncoderParams::init(arch, EncoderShape::default(), seed)
}

pub const ARCHS: [Architecture; 2] = [Architecture::ConvNet, Architecture::TinyVit];

/// Cosine computed from scratch, independent of the library's metric code.
pub fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

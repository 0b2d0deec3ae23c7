use rand_chacha::ChaCha8Rng;
use robustsim_autodiff::{Padding, Tensor, Var};

use super::{center_pixels, init_uniform, named, EncoderShape, NamedTensor};
use crate::error::{contract, Result};

pub(super) const WIDTHS: [usize; 3] = [8, 16, 32];

pub(super) const PARAM_NAMES: [&str; 8] = [
    "conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w", "conv3.b", "head.w", "head.b",
];

pub(super) fn init(shape: &EncoderShape, rng: &mut ChaCha8Rng) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    let mut cin = shape.channels;
    for (i, &cout) in WIDTHS.iter().enumerate() {
        let fan_in = cin * 9;
        out.push(named(format!("conv{}.w", i + 1), init_uniform(rng, &[cout, cin, 3, 3], fan_in, 2.0)));
        out.push(named(format!("conv{}.b", i + 1), Tensor::zeros(&[cout])));
        cin = cout;
    }
    out.push(named("head.w", init_uniform(rng, &[cin, shape.embed_dim], cin, 1.0)));
    out.push(named("head.b", Tensor::zeros(&[shape.embed_dim])));
    out
}

pub(super) fn validate(params: &[NamedTensor]) -> Result<()> {
    let mut cin = params[0].tensor.shape().get(1).copied().unwrap_or(0);
    for block in 0..3 {
        let w = params[2 * block].tensor.shape();
        let b = params[2 * block + 1].tensor.shape();
        if w.len() != 4 || w[1] != cin || w[2] != 3 || w[3] != 3 || b != [w[0]] {
            return contract(format!("conv{} has shape {w:?} / {b:?}", block + 1));
        }
        cin = w[0];
    }
    let hw = params[6].tensor.shape();
    let hb = params[7].tensor.shape();
    if hw.len() != 2 || hw[0] != cin || hb != [hw[1]] {
        return contract(format!("head has shape {hw:?} / {hb:?}"));
    }
    Ok(())
}

/// Any spatial size that survives three 2x2 pools.
pub(super) fn accepts(params: &[NamedTensor], chw: &[usize]) -> bool {
    chw[0] == params[0].tensor.shape()[1] && chw[1].is_multiple_of(8) && chw[2].is_multiple_of(8) && chw[1] > 0 && chw[2] > 0
}

pub(super) fn forward<'g>(p: &[Var<'g>], images: Var<'g>) -> Result<Var<'g>> {
    let mut h = center_pixels(images)?;
    for block in 0..3 {
        h = h
            .conv2d(p[2 * block], Some(p[2 * block + 1]), 1, Padding::Same)?
            .gelu()?
            .avg_pool2d(2)?;
    }
    let s = h.shape();
    let pooled = h.reshape(&[s[0], s[1], s[2] * s[3]])?.mean_last()?;
    Ok(pooled.matmul(p[6])?.add_bias(p[7])?)
}

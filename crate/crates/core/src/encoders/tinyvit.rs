use rand_chacha::ChaCha8Rng;
use robustsim_autodiff::{Padding, Tensor, Var};

use super::{center_pixels, dense_tokens, init_uniform, named, EncoderShape, NamedTensor};
use crate::error::{contract, Result};

pub(super) const PATCH: usize = 4;
pub(super) const WIDTH: usize = 64;
pub(super) const HEADS: usize = 2;
pub(super) const BLOCKS: usize = 2;
pub(super) const MLP_WIDTH: usize = 128;

const BLOCK_PARAMS: [&str; 12] = [
    "ln1.g", "ln1.b", "qkv.w", "qkv.b", "proj.w", "proj.b", "ln2.g", "ln2.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b",
];

// index of the first block parameter and of the final norm
const FIRST_BLOCK: usize = 4;
const FINAL: usize = FIRST_BLOCK + BLOCKS * BLOCK_PARAMS.len();

pub(super) fn param_names() -> Vec<String> {
    let mut names: Vec<String> = ["patch.w", "patch.b", "cls", "pos"].iter().map(|s| s.to_string()).collect();
    for b in 0..BLOCKS {
        names.extend(BLOCK_PARAMS.iter().map(|p| format!("block{b}.{p}")));
    }
    names.extend(["ln.g", "ln.b", "head.w", "head.b"].iter().map(|s| s.to_string()));
    names
}

pub(super) fn init(shape: &EncoderShape, rng: &mut ChaCha8Rng) -> Vec<NamedTensor> {
    let w = WIDTH;
    let side = shape.image_size / PATCH;
    let tokens = side * side + 1;
    let names = param_names();
    let mut tensors = vec![
        init_uniform(rng, &[w, shape.channels, PATCH, PATCH], shape.channels * PATCH * PATCH, 1.0),
        Tensor::zeros(&[w]),
        init_uniform(rng, &[1, 1, w], 1, 0.02),
        init_uniform(rng, &[tokens, w], 1, 0.02),
    ];
    for _ in 0..BLOCKS {
        tensors.extend([
            Tensor::ones(&[w]),
            Tensor::zeros(&[w]),
            init_uniform(rng, &[w, 3 * w], w, 1.0),
            Tensor::zeros(&[3 * w]),
            init_uniform(rng, &[w, w], w, 0.5),
            Tensor::zeros(&[w]),
            Tensor::ones(&[w]),
            Tensor::zeros(&[w]),
            init_uniform(rng, &[w, MLP_WIDTH], w, 2.0),
            Tensor::zeros(&[MLP_WIDTH]),
            init_uniform(rng, &[MLP_WIDTH, w], MLP_WIDTH, 0.5),
            Tensor::zeros(&[w]),
        ]);
    }
    tensors.extend([
        Tensor::ones(&[w]),
        Tensor::zeros(&[w]),
        init_uniform(rng, &[w, shape.embed_dim], w, 1.0),
        Tensor::zeros(&[shape.embed_dim]),
    ]);
    names.into_iter().zip(tensors).map(|(n, t)| named(n, t)).collect()
}

pub(super) fn validate(params: &[NamedTensor]) -> Result<()> {
    let pw = params[0].tensor.shape();
    if pw.len() != 4 || pw[2] != PATCH || pw[3] != PATCH {
        return contract(format!("patch embedding has shape {pw:?}"));
    }
    let w = pw[0];
    if !w.is_multiple_of(HEADS) {
        return contract(format!("width {w} not divisible by {HEADS} heads"));
    }
    let pos = params[3].tensor.shape();
    let side = pos.first().map_or(0, |t| ((t.saturating_sub(1)) as f64).sqrt() as usize);
    if pos.len() != 2 || pos[1] != w || side * side + 1 != pos[0] {
        return contract(format!("position table has shape {pos:?}"));
    }
    let hidden = params[FIRST_BLOCK + 8].tensor.shape().get(1).copied().unwrap_or(0);
    let d = params[FINAL + 2].tensor.shape().get(1).copied().unwrap_or(0);
    let mut expected: Vec<Vec<usize>> = vec![vec![w, pw[1], PATCH, PATCH], vec![w], vec![1, 1, w], pos.to_vec()];
    for _ in 0..BLOCKS {
        expected.extend([
            vec![w],
            vec![w],
            vec![w, 3 * w],
            vec![3 * w],
            vec![w, w],
            vec![w],
            vec![w],
            vec![w],
            vec![w, hidden],
            vec![hidden],
            vec![hidden, w],
            vec![w],
        ]);
    }
    expected.extend([vec![w], vec![w], vec![w, d], vec![d]]);
    for (p, e) in params.iter().zip(&expected) {
        if p.tensor.shape() != e.as_slice() {
            return contract(format!("{} has shape {:?}, expected {e:?}", p.name, p.tensor.shape()));
        }
    }
    Ok(())
}

pub(super) fn accepts(params: &[NamedTensor], chw: &[usize]) -> bool {
    let tokens = params[3].tensor.shape()[0] - 1;
    let side = (tokens as f64).sqrt() as usize;
    chw[0] == params[0].tensor.shape()[1] && chw[1] == side * PATCH && chw[2] == side * PATCH
}

fn layer_norm<'g>(x: Var<'g>, g: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    Ok(x.layer_norm()?.mul_bias(g)?.add_bias(b)?)
}

fn attention<'g>(x: Var<'g>, p: &[Var<'g>]) -> Result<Var<'g>> {
    let w = x.shape()[2];
    let hd = w / HEADS;
    let qkv = dense_tokens(x, p[2], p[3])?;
    let mut heads = Vec::with_capacity(HEADS);
    for h in 0..HEADS {
        let q = qkv.slice(2, h * hd, hd)?;
        let k = qkv.slice(2, w + h * hd, hd)?;
        let v = qkv.slice(2, 2 * w + h * hd, hd)?;
        let scores = q.matmul(k.transpose()?)?.scale(1.0 / (hd as f64).sqrt())?;
        heads.push(scores.softmax()?.matmul(v)?);
    }
    dense_tokens(Var::concat(&heads, 2)?, p[4], p[5])
}

fn block<'g>(x: Var<'g>, p: &[Var<'g>]) -> Result<Var<'g>> {
    let x = x.add(attention(layer_norm(x, p[0], p[1])?, p)?)?;
    let hidden = dense_tokens(layer_norm(x, p[6], p[7])?, p[8], p[9])?.gelu()?;
    Ok(x.add(dense_tokens(hidden, p[10], p[11])?)?)
}

pub(super) fn forward<'g>(p: &[Var<'g>], images: Var<'g>) -> Result<Var<'g>> {
    let n = images.shape()[0];
    let patches = center_pixels(images)?.conv2d(p[0], Some(p[1]), PATCH, Padding::Valid)?;
    let s = patches.shape();
    let tokens = patches.reshape(&[n, s[1], s[2] * s[3]])?.transpose()?;
    let cls = Var::concat(&vec![p[2]; n], 0)?;
    let mut x = Var::concat(&[cls, tokens], 1)?.add_bias(p[3])?;
    for b in 0..BLOCKS {
        let start = FIRST_BLOCK + b * BLOCK_PARAMS.len();
        x = block(x, &p[start..start + BLOCK_PARAMS.len()])?;
    }
    let x = layer_norm(x, p[FINAL], p[FINAL + 1])?;
    let w = x.shape()[2];
    let readout = x.slice(1, 0, 1)?.reshape(&[n, w])?;
    Ok(readout.matmul(p[FINAL + 2])?.add_bias(p[FINAL + 3])?)
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use robustsim_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::{EncoderParams, PromptTable};
use crate::error::{contract, Result};
use crate::image::LabeledImages;
use crate::optim::MomentumSgd;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            temperature: 0.07,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub encoder: EncoderParams,
    pub prompts: PromptTable,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn one_hot(rows: usize, cols: usize, hot: impl Iterator<Item = (usize, usize)>) -> Tensor {
    let mut t = Tensor::zeros(&[rows, cols]);
    for (r, c) in hot {
        t.data_mut()[r * cols + c] = 1.0;
    }
    t
}

/// Symmetric InfoNCE between image embeddings `[B, D]` and the prompt table
/// `[K, D]`, both normalized here. The image side is cross-entropy over the
/// `K` prompts; the prompt side is, for each image, cross-entropy over the
/// batch within its class's column.
pub fn infonce_loss<'g>(
    g: &'g Graph,
    image_emb: Var<'g>,
    prompts: Var<'g>,
    labels: &[usize],
    temperature: f64,
) -> Result<Var<'g>> {
    let b = labels.len();
    let k = prompts.shape()[0];
    if labels.iter().any(|&l| l >= k) {
        return contract(format!("label outside the {k}-class prompt table"));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return contract("contrastive loss needs at least two classes in a batch");
    }
    let u = image_emb.normalize_last()?;
    let p = prompts.normalize_last()?;
    let logits = u.matmul(p.transpose()?)?.scale(1.0 / temperature)?;
    let img_mask = g.constant(one_hot(b, k, labels.iter().copied().enumerate()))?;
    let img_side = logits.log_softmax()?.mul(img_mask)?.sum()?;
    let txt_mask = g.constant(one_hot(k, b, labels.iter().enumerate().map(|(i, &l)| (l, i))))?;
    let txt_side = logits.transpose()?.log_softmax()?.mul(txt_mask)?.sum()?;
    Ok(img_side.add(txt_side)?.scale(-0.5 / b as f64)?)
}

/// Shuffled batches that interleave classes, so every batch of two or more
/// images sees at least two classes whenever the data does. A short tail is
/// folded into the last batch.
pub(crate) fn mixed_batches(labels: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for c in &mut by_class {
        c.shuffle(rng);
    }
    let mut order = Vec::with_capacity(labels.len());
    let longest = by_class.iter().map(Vec::len).max().unwrap_or(0);
    for r in 0..longest {
        let mut round: Vec<usize> = by_class.iter().filter_map(|c| c.get(r).copied()).collect();
        round.shuffle(rng);
        order.extend(round);
    }
    let bs = batch_size.max(1);
    let mut batches: Vec<Vec<usize>> = order.chunks(bs).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < bs) {
        let tail = batches.pop().unwrap_or_default();
        if let Some(last) = batches.last_mut() {
            last.extend(tail);
        }
    }
    batches
}

/// Trains encoder and prompt table jointly. Runs on the calling thread.
pub fn contrastive_pretrain(
    encoder: &EncoderParams,
    prompts: &PromptTable,
    data: &LabeledImages,
    config: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if data.num_classes() > prompts.classes() {
        return contract(format!(
            "data has {} classes, prompt table {}",
            data.num_classes(),
            prompts.classes()
        ));
    }
    let mut enc = encoder.clone();
    let mut table = prompts.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = MomentumSgd::new(config.learning_rate, config.momentum);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let batches = mixed_batches(&data.labels, config.batch_size, &mut rng);
        let mut total = 0.0;
        for batch in &batches {
            let sub = data.select(batch);
            let g = Graph::new();
            let params = enc.bind_trainable(&g)?;
            let p = g.input(table.tensor().clone())?;
            let x = g.constant(sub.images.into_tensor())?;
            let emb = enc.forward_with(&params, x)?;
            let loss = infonce_loss(&g, emb, p, &sub.labels, config.temperature)?;
            total += loss.item()?;
            let mut grads = g.backward(loss)?;
            let mut tensors: Vec<Tensor> = enc.tensors().cloned().collect();
            tensors.push(table.tensor().clone());
            let mut all_grads: Vec<Tensor> = params.iter().map(|&v| grads.take(v).expect("leaf")).collect();
            all_grads.push(grads.take(p).expect("leaf"));
            opt.step(&mut tensors, &all_grads);
            let t = tensors.pop().expect("table");
            table.set_tensor(t);
            enc.set_tensors(tensors);
        }
        epoch_losses.push(total / batches.len().max(1) as f64);
    }
    Ok(PretrainOutcome {
        encoder: enc,
        prompts: table,
        epoch_losses,
    })
}

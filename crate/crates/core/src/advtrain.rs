//! Adversarial fine-tuning of the image encoder: supervised cross-entropy over
//! cosine logits against the prompt table (TeCoA) and unsupervised embedding
//! distortion against a frozen copy of the starting encoder (FARE).

use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use robustsim_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::attacks::{Norm, ThreatModel};
use crate::encoders::{mixed_batches, EncoderParams, ImageEncoder, PromptTable};
use crate::error::{contract, Error, Result};
use crate::image::{ImageBatch, LabeledImages};
use crate::optim::{Optimizer, OptimizerKind};

/// Inverse temperature on the cosine logits of the supervised loss.
pub const TECOA_LOGIT_SCALE: f64 = 100.0;

/// Default inner step as a multiple of `epsilon / steps`.
pub const INNER_STEP_SCALE: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fare,
    Tecoa,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fare" => Ok(Method::Fare),
            "tecoa" => Ok(Method::Tecoa),
            other => Err(Error::Config(format!("unknown fine-tuning method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvTrainConfig {
    pub method: Method,
    pub threat: ThreatModel,
    pub inner_steps: usize,
    /// Inner step size as a multiple of `epsilon / inner_steps`.
    pub inner_step_scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Heavy-ball coefficient, used by SGD only.
    pub momentum: f64,
    /// Maximum l2 norm of each outer gradient, SGD only.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for AdvTrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Fare,
            threat: ThreatModel::linf(4.0 / 255.0),
            inner_steps: 10,
            inner_step_scale: INNER_STEP_SCALE,
            epochs: 2,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: 0.9,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl AdvTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(Error::Config("inner maximization needs at least one step".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        ThreatModel::new(self.threat.norm, self.threat.epsilon)?;
        Ok(())
    }

    fn inner_step(&self) -> f64 {
        self.inner_step_scale * self.threat.epsilon / self.inner_steps as f64
    }
}

/// A deep, immutable copy of an encoder taken before fine-tuning.
#[derive(Debug, Clone)]
pub struct FrozenEncoder(Arc<EncoderParams>);

impl FrozenEncoder {
    pub fn snapshot(params: &EncoderParams) -> Self {
        Self(Arc::new(params.clone()))
    }

    pub fn params(&self) -> &EncoderParams {
        &self.0
    }

    /// `phi_orig(x)` as an `[N, D]` tensor.
    pub fn targets(&self, x: &ImageBatch) -> Result<Tensor> {
        let g = Graph::new();
        Ok(self.0.forward(&g, g.constant(x.tensor().clone())?)?.value())
    }
}

/// Result of an inner maximization over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerResult {
    pub adversarial: ImageBatch,
    /// Mean loss over the batch at `delta = 0`.
    pub clean_loss: f64,
    /// Mean loss over the batch at the returned perturbation.
    pub adv_loss: f64,
    pub clean_losses: Vec<f64>,
    pub adv_losses: Vec<f64>,
}

/// Per-image loss `[N]` of embeddings `[N, D]`.
type RowLoss<'a> = dyn for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>> + Sync + 'a;

fn tecoa_rows<'g>(g: &'g Graph, emb: Var<'g>, prompt_t: &Tensor, onehot: &Tensor) -> Result<Var<'g>> {
    let logits = emb
        .normalize_last()?
        .matmul(g.constant(prompt_t.clone())?)?
        .scale(TECOA_LOGIT_SCALE)?;
    Ok(logits.log_softmax()?.mul(g.constant(onehot.clone())?)?.sum_last()?.neg()?)
}

fn fare_rows<'g>(g: &'g Graph, emb: Var<'g>, targets: &Tensor) -> Result<Var<'g>> {
    Ok(g.constant(targets.clone())?.sub(emb)?.square()?.sum_last()?)
}

/// Unit-normalized prompt table transposed to `[D, K]`.
fn prompt_columns(prompts: &PromptTable) -> Result<Tensor> {
    let (k, d) = (prompts.classes(), prompts.dim());
    let mut data = vec![0.0; k * d];
    for (c, e) in prompts.embeddings().iter().enumerate() {
        for (i, &v) in e.normalize()?.values().iter().enumerate() {
            data[i * k + c] = v;
        }
    }
    Ok(Tensor::new(vec![d, k], data)?)
}

fn onehot(labels: &[usize], k: usize) -> Result<Tensor> {
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return contract(format!("label {l} outside the {k}-class prompt table"));
    }
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * k + l] = 1.0;
    }
    Ok(t)
}

fn row_losses_and_grad(encoder: &EncoderParams, x: &Tensor, loss: &RowLoss<'_>) -> Result<(Vec<f64>, Tensor)> {
    let g = Graph::new();
    let v = g.input(x.clone())?;
    let rows = loss(&g, encoder.forward(&g, v)?)?;
    let values = rows.value().into_data();
    let mut grads = g.backward(rows.sum()?)?;
    Ok((values, grads.take(v).expect("input leaf")))
}

fn random_delta(shape: &[usize], threat: &ThreatModel, rng: &mut ChaCha8Rng) -> Tensor {
    let per = shape[1..].iter().product::<usize>();
    let mut t = Tensor::zeros(shape);
    match threat.norm {
        Norm::Linf => t
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = threat.epsilon * rng.gen_range(-1.0..=1.0)),
        Norm::L2 => {
            for row in t.data_mut().chunks_mut(per) {
                row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                let r = threat.epsilon * rng.gen_range(0.0..=1.0);
                row.iter_mut().for_each(|v| *v *= r / n);
            }
        }
    }
    t
}

/// Steps each image of `x` along its own gradient, then projects each
/// row onto the ball around `origin` and the box.
fn pga_step(x: &Tensor, grad: &Tensor, origin: &Tensor, threat: &ThreatModel, step: f64) -> Tensor {
    let per = x.shape()[1..].iter().product::<usize>();
    let mut out = x.clone();
    let eps = threat.epsilon;
    for ((xr, gr), or) in out
        .data_mut()
        .chunks_mut(per)
        .zip(grad.data().chunks(per))
        .zip(origin.data().chunks(per))
    {
        let gn = gr.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (xv, &gv) in xr.iter_mut().zip(gr) {
            *xv += match threat.norm {
                Norm::Linf => step * if gv > 0.0 { 1.0 } else if gv < 0.0 { -1.0 } else { 0.0 },
                Norm::L2 if gn > 0.0 => step * gv / gn,
                Norm::L2 => 0.0,
            };
        }
        project_row(xr, or, threat.norm, eps);
    }
    out
}

fn project_row(x: &mut [f64], origin: &[f64], norm: Norm, eps: f64) {
    match norm {
        Norm::Linf => {
            for (xv, &o) in x.iter_mut().zip(origin) {
                *xv = (o + (*xv - o).clamp(-eps, eps)).clamp(0.0, 1.0);
            }
        }
        Norm::L2 => {
            let n = x.iter().zip(origin).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let mut s = if n > eps { eps / n } else { 1.0 };
            loop {
                let d: Vec<f64> = x.iter().zip(origin).map(|(a, b)| (a - b) * s).collect();
                if d.iter().map(|v| v * v).sum::<f64>().sqrt() <= eps {
                    for ((xv, &o), dv) in x.iter_mut().zip(origin).zip(d) {
                        *xv = (o + dv).clamp(0.0, 1.0);
                    }
                    break;
                }
                s *= 1.0 - 1e-15;
            }
        }
    }
}

/// Batched projected gradient ascent with a random start. Each image keeps
/// the best perturbation it has seen, the unperturbed image included, so
/// the adversarial loss never falls below the clean loss.
fn inner_max(
    encoder: &EncoderParams,
    x: &ImageBatch,
    threat: &ThreatModel,
    steps: usize,
    step: f64,
    rng: &mut ChaCha8Rng,
    loss: &RowLoss<'_>,
) -> Result<InnerResult> {
    let origin = x.tensor();
    let per = origin.shape()[1..].iter().product::<usize>();
    let (clean_losses, _) = row_losses_and_grad(encoder, origin, loss)?;
    let mut best_x = origin.clone();
    let mut best = clean_losses.clone();
    let mut cur = origin.zip_map(&random_delta(origin.shape(), threat, rng), |a, b| a + b)?;
    for (xr, or) in cur.data_mut().chunks_mut(per).zip(origin.data().chunks(per)) {
        project_row(xr, or, threat.norm, threat.epsilon);
    }
    for s in 0..=steps {
        let (values, grad) = row_losses_and_grad(encoder, &cur, loss)?;
        for (i, &v) in values.iter().enumerate() {
            if v > best[i] {
                best[i] = v;
                best_x.data_mut()[i * per..(i + 1) * per].copy_from_slice(&cur.data()[i * per..(i + 1) * per]);
            }
        }
        if s < steps {
            cur = pga_step(&cur, &grad, origin, threat, step);
        }
    }
    let n = best.len() as f64;
    Ok(InnerResult {
        adversarial: ImageBatch::new(best_x)?,
        clean_loss: clean_losses.iter().sum::<f64>() / n,
        adv_loss: best.iter().sum::<f64>() / n,
        clean_losses,
        adv_losses: best,
    })
}

/// Inner maximization of the supervised loss: cross-entropy over
/// `TECOA_LOGIT_SCALE * cos(phi(x + delta), psi_k)`.
pub fn tecoa_inner(
    encoder: &EncoderParams,
    prompts: &PromptTable,
    x: &ImageBatch,
    labels: &[usize],
    threat: &ThreatModel,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<InnerResult> {
    if labels.len() != x.len() {
        return contract(format!("{} images but {} labels", x.len(), labels.len()));
    }
    let cols = prompt_columns(prompts)?;
    let hot = onehot(labels, prompts.classes())?;
    let step = INNER_STEP_SCALE * threat.epsilon / steps.max(1) as f64;
    inner_max(encoder, x, threat, steps, step, rng, &|g, e| tecoa_rows(g, e, &cols, &hot))
}

/// Inner maximization of `||phi_orig(x) - phi(x + delta)||^2` on
/// unnormalized embeddings.
pub fn fare_inner(
    encoder: &EncoderParams,
    frozen: &FrozenEncoder,
    x: &ImageBatch,
    threat: &ThreatModel,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<InnerResult> {
    let targets = frozen.targets(x)?;
    let step = INNER_STEP_SCALE * threat.epsilon / steps.max(1) as f64;
    inner_max(encoder, x, threat, steps, step, rng, &|g, e| fare_rows(g, e, &targets))
}

/// Per-epoch training curve entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub clean_loss: f64,
    pub adv_loss: f64,
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    pub encoder: EncoderParams,
    pub epochs: Vec<EpochRecord>,
}

/// Fine-tunes the image encoder only. `prompts` is required for TeCoA and
/// `frozen` for FARE; neither is modified.
pub fn adversarial_finetune(
    encoder: &EncoderParams,
    data: &LabeledImages,
    prompts: Option<&PromptTable>,
    frozen: Option<&FrozenEncoder>,
    config: &AdvTrainConfig,
) -> Result<FineTuneOutcome> {
    config.validate()?;
    let supervision = match config.method {
        Method::Tecoa => {
            let p = prompts.ok_or_else(|| Error::Contract("TeCoA needs a prompt table".into()))?;
            Supervision::Tecoa(prompt_columns(p)?, p.classes())
        }
        Method::Fare => Supervision::Fare(
            frozen
                .ok_or_else(|| Error::Contract("FARE needs a frozen snapshot of the original encoder".into()))?
                .clone(),
        ),
    };
    let mut enc = encoder.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, config.momentum, config.clip_norm);
    let step = config.inner_step();
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let batches = mixed_batches(&data.labels, config.batch_size, &mut rng);
        let (mut clean_sum, mut adv_sum) = (0.0, 0.0);
        for batch in &batches {
            let sub = data.select(batch);
            let (inner, rows): (InnerResult, Box<RowLoss<'_>>) = match &supervision {
                Supervision::Tecoa(cols, k) => {
                    let hot = onehot(&sub.labels, *k)?;
                    let cols = cols.clone();
                    let loss: Box<RowLoss<'_>> = Box::new(move |g, e| tecoa_rows(g, e, &cols, &hot));
                    (
                        inner_max(&enc, &sub.images, &config.threat, config.inner_steps, step, &mut rng, &*loss)?,
                        loss,
                    )
                }
                Supervision::Fare(frozen) => {
                    let targets = frozen.targets(&sub.images)?;
                    let loss: Box<RowLoss<'_>> = Box::new(move |g, e| fare_rows(g, e, &targets));
                    (
                        inner_max(&enc, &sub.images, &config.threat, config.inner_steps, step, &mut rng, &*loss)?,
                        loss,
                    )
                }
            };
            clean_sum += inner.clean_loss;
            adv_sum += inner.adv_loss;
            let g = Graph::new();
            let params = enc.bind_trainable(&g)?;
            let x = g.constant(inner.adversarial.into_tensor())?;
            let emb = enc.forward_with(&params, x)?;
            let loss = rows(&g, emb)?.mean()?;
            let mut grads = g.backward(loss)?;
            let grads: Vec<Tensor> = params.iter().map(|&p| grads.take(p).expect("leaf")).collect();
            let mut tensors: Vec<Tensor> = enc.tensors().cloned().collect();
            opt.step(&mut tensors, &grads);
            enc.set_tensors(tensors);
        }
        let nb = batches.len().max(1) as f64;
        records.push(EpochRecord {
            epoch: epoch + 1,
            clean_loss: clean_sum / nb,
            adv_loss: adv_sum / nb,
        });
    }
    Ok(FineTuneOutcome {
        encoder: enc,
        epochs: records,
    })
}

enum Supervision {
    Tecoa(Tensor, usize),
    Fare(FrozenEncoder),
}

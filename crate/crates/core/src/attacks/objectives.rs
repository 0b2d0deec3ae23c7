use robustsim_autodiff::{Graph, Tensor, Var};

use super::{apgd, AttackConfig, AttackResult, Objective, ThreatModel};
use crate::embedding::Embedding;
use crate::encoders::{embed_one, ImageEncoder};
use crate::error::{contract, Result};
use crate::image::ImageBatch;
use crate::par::Execution;
use crate::percept::{predict, AfcLabel, TwoAfcTriplet};

/// A scalar loss on the embeddings of the attacked images, differentiated
/// through `encoder` with respect to the pixels only.
pub struct EncoderObjective<'a, L> {
    encoder: &'a dyn ImageEncoder,
    loss: L,
    success_above: Option<f64>,
}

impl<'a, L> EncoderObjective<'a, L>
where
    L: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>> + Sync,
{
    pub fn new(encoder: &'a dyn ImageEncoder, loss: L) -> Self {
        Self {
            encoder,
            loss,
            success_above: None,
        }
    }

    /// Values strictly above `threshold` count as a successful attack.
    pub fn with_success_above(mut self, threshold: f64) -> Self {
        self.success_above = Some(threshold);
        self
    }
}

impl<L> Objective for EncoderObjective<'_, L>
where
    L: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>> + Sync,
{
    fn value_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        let g = Graph::new();
        let v = g.input(x.clone())?;
        let emb = self.encoder.forward(&g, v)?;
        let out = (self.loss)(&g, emb)?;
        let value = out.item()?;
        let mut grads = g.backward(out)?;
        Ok((value, grads.take(v).expect("input leaf")))
    }

    fn is_success(&self, value: f64) -> bool {
        self.success_above.is_some_and(|t| value > t)
    }
}

/// Unit rows of `embeddings` as a `[D, M]` matrix.
fn unit_columns(embeddings: &[&Embedding]) -> Result<Tensor> {
    let d = embeddings[0].dim();
    let m = embeddings.len();
    let mut data = vec![0.0; d * m];
    for (j, e) in embeddings.iter().enumerate() {
        if e.dim() != d {
            return contract("embeddings differ in dimension");
        }
        let u = e.normalize()?;
        for (i, &v) in u.values().iter().enumerate() {
            data[i * m + j] = v;
        }
    }
    Ok(Tensor::new(vec![d, m], data)?)
}

/// Result of attacking the reference image of one triplet.
#[derive(Debug, Clone)]
pub struct TwoAfcOutcome {
    pub clean_prediction: AfcLabel,
    pub robust_prediction: AfcLabel,
    pub label: AfcLabel,
    pub result: AttackResult,
}

impl TwoAfcOutcome {
    pub fn clean_correct(&self) -> bool {
        self.clean_prediction == self.label
    }

    pub fn robust_correct(&self) -> bool {
        self.robust_prediction == self.label
    }
}

fn afc_logits<'g>(emb: Var<'g>, cols: Var<'g>) -> Result<Var<'g>> {
    Ok(emb.normalize_last()?.matmul(cols)?)
}

/// Maximizes the cross-entropy of the 2AFC classifier
/// `(sim(ref, x1), sim(ref, x2))` against the label over perturbations of
/// `triplet.reference` only. The result's success flag is set when the
/// judge errs on the returned reference, which includes triplets it already
/// got wrong without any perturbation.
pub fn attack_2afc<E: ImageEncoder>(
    triplet: &TwoAfcTriplet,
    encoder: &E,
    threat: &ThreatModel,
    cfg: &AttackConfig,
) -> Result<TwoAfcOutcome> {
    let e1 = embed_one(encoder, &triplet.first)?;
    let e2 = embed_one(encoder, &triplet.second)?;
    let cols = unit_columns(&[&e1, &e2])?;
    let label_idx = usize::from(triplet.label == AfcLabel::Second);
    let mask = Tensor::new(vec![1, 2], (0..2).map(|i| f64::from(u8::from(i == label_idx))).collect())?;
    let objective = EncoderObjective::new(encoder, |g: &Graph, emb: Var<'_>| {
        let logits = afc_logits(emb, g.constant(cols.clone())?)?;
        Ok(logits.log_softmax()?.mul(g.constant(mask.clone())?)?.sum()?.neg()?)
    })
    // two-way cross-entropy above ln 2 means the wrong candidate scores higher
    .with_success_above(std::f64::consts::LN_2);
    let judge = |img: &Tensor| -> Result<AfcLabel> {
        let g = Graph::new();
        let x = g.constant(img.clone())?;
        let logits = afc_logits(encoder.forward(&g, x)?, g.constant(cols.clone())?)?.value();
        Ok(predict([logits.data()[0], logits.data()[1]]))
    };
    let clean_prediction = judge(&triplet.reference)?;
    let mut result = apgd(&objective, &ImageBatch::new(triplet.reference.clone())?, threat, cfg)?;
    let robust_prediction = judge(result.adversarial.tensor())?;
    result.success = robust_prediction != triplet.label;
    Ok(TwoAfcOutcome {
        clean_prediction,
        robust_prediction,
        label: triplet.label,
        result,
    })
}

/// [`attack_2afc`] over a dataset; triplet `i` uses seed `cfg.seed + i`.
pub fn attack_2afc_all<E: ImageEncoder>(
    triplets: &[TwoAfcTriplet],
    encoder: &E,
    threat: &ThreatModel,
    cfg: &AttackConfig,
    exec: Execution,
) -> Result<Vec<TwoAfcOutcome>> {
    exec.try_map(triplets, |i, t| {
        let cfg = AttackConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        attack_2afc(t, encoder, threat, &cfg)
    })
}

/// Clean and robust accuracy over attack outcomes.
pub fn robust_2afc_accuracy(outcomes: &[TwoAfcOutcome]) -> Result<(f64, f64)> {
    if outcomes.is_empty() {
        return contract("accuracy over zero triplets");
    }
    let n = outcomes.len() as f64;
    let clean = outcomes.iter().filter(|o| o.clean_correct()).count() as f64 / n;
    let robust = outcomes.iter().filter(|o| o.robust_correct()).count() as f64 / n;
    Ok((clean, robust))
}

/// Pulls the normalized embeddings of `x` towards the targets by
/// minimizing `sum_y ||u - y||^2` (maximizing its negation). Every image
/// of the batch is attacked jointly; pass single images for per-image
/// step-size control.
pub fn attack_targeted_embedding<E: ImageEncoder>(
    x: &ImageBatch,
    targets: &[Embedding],
    encoder: &E,
    threat: &ThreatModel,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    if targets.is_empty() {
        return contract("targeted attack needs at least one target");
    }
    let m = targets.len() as f64;
    let units: Vec<Embedding> = targets.iter().map(Embedding::normalize).collect::<Result<_>>()?;
    let d = units[0].dim();
    let mut ysum = vec![0.0; d];
    let mut ysq = 0.0;
    for u in &units {
        if u.dim() != d {
            return contract("targets differ in dimension");
        }
        for (s, v) in ysum.iter_mut().zip(u.values()) {
            *s += v;
        }
        ysq += u.dot(u);
    }
    let ycol = Tensor::new(vec![d, 1], ysum)?;
    let n = x.len() as f64;
    let objective = EncoderObjective::new(encoder, |g: &Graph, emb: Var<'_>| {
        let u = emb.normalize_last()?;
        let quad = u.square()?.sum()?.scale(m)?;
        let cross = u.matmul(g.constant(ycol.clone())?)?.sum()?.scale(-2.0)?;
        Ok(quad.add(cross)?.add_scalar(n * ysq)?.neg()?)
    });
    apgd(&objective, x, threat, cfg)
}

/// Maximizes `||u(x + delta) - u(x)||^2` over the ball. The gradient is zero
/// at `delta = 0`, so the search always starts from a random point.
pub fn attack_untargeted_embedding<E: ImageEncoder>(
    x: &ImageBatch,
    encoder: &E,
    threat: &ThreatModel,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let g = Graph::new();
    let clean = encoder.forward(&g, g.constant(x.tensor().clone())?)?.normalize_last()?.value();
    let objective = EncoderObjective::new(encoder, |g: &Graph, emb: Var<'_>| {
        let diff = emb.normalize_last()?.sub(g.constant(clean.clone())?)?;
        Ok(diff.square()?.sum()?)
    });
    let cfg = AttackConfig {
        random_start: true,
        ..cfg.clone()
    };
    apgd(&objective, x, threat, &cfg)
}

//! Cosine similarity, the induced distance, 2AFC judgments and odd-one-out.

use robustsim_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::encoders::{embed_one, ImageEncoder};
use crate::error::{contract, Result};
use crate::par::Execution;

fn check_dims(a: &Embedding, b: &Embedding) -> Result<()> {
    if a.dim() != b.dim() {
        return contract(format!("embedding dimensions differ: {} vs {}", a.dim(), b.dim()));
    }
    Ok(())
}

/// Inner product of the unit-normalized embeddings, clamped to `[-1, 1]`.
pub fn cosine_sim(a: &Embedding, b: &Embedding) -> Result<f64> {
    check_dims(a, b)?;
    let (ua, ub) = (a.normalize()?, b.normalize()?);
    Ok(ua.dot(&ub).clamp(-1.0, 1.0))
}

/// `sqrt(1 - cos)`, in `[0, sqrt 2]`.
pub fn perceptual_distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    Ok((1.0 - cosine_sim(a, b)?).max(0.0).sqrt())
}

/// Which of the two candidates is closer to the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AfcLabel {
    First,
    Second,
}

impl AfcLabel {
    /// From the 1/2 convention.
    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(AfcLabel::First),
            2 => Ok(AfcLabel::Second),
            other => contract(format!("2AFC label must be 1 or 2, got {other}")),
        }
    }

    pub fn index(self) -> u8 {
        match self {
            AfcLabel::First => 1,
            AfcLabel::Second => 2,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            AfcLabel::First => AfcLabel::Second,
            AfcLabel::Second => AfcLabel::First,
        }
    }
}

/// Argmax of `(s1, s2)`; an exact tie goes to the first candidate.
pub fn predict(logits: [f64; 2]) -> AfcLabel {
    if logits[1] > logits[0] {
        AfcLabel::Second
    } else {
        AfcLabel::First
    }
}

/// A 2AFC instance over `[1, C, H, W]` images.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoAfcTriplet {
    pub reference: Tensor,
    pub first: Tensor,
    pub second: Tensor,
    pub label: AfcLabel,
}

impl TwoAfcTriplet {
    pub fn swapped(&self) -> Self {
        Self {
            reference: self.reference.clone(),
            first: self.second.clone(),
            second: self.first.clone(),
            label: self.label.flipped(),
        }
    }
}

/// A 2AFC instance over precomputed embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedTriplet {
    pub reference: Embedding,
    pub first: Embedding,
    pub second: Embedding,
    pub label: AfcLabel,
}

impl EmbeddedTriplet {
    pub fn logits(&self) -> Result<[f64; 2]> {
        Ok([
            cosine_sim(&self.reference, &self.first)?,
            cosine_sim(&self.reference, &self.second)?,
        ])
    }

    pub fn prediction(&self) -> Result<AfcLabel> {
        Ok(predict(self.logits()?))
    }

    pub fn is_correct(&self) -> Result<bool> {
        Ok(self.prediction()? == self.label)
    }
}

pub fn embed_triplet<E: ImageEncoder + ?Sized>(t: &TwoAfcTriplet, encoder: &E) -> Result<EmbeddedTriplet> {
    Ok(EmbeddedTriplet {
        reference: embed_one(encoder, &t.reference)?,
        first: embed_one(encoder, &t.first)?,
        second: embed_one(encoder, &t.second)?,
        label: t.label,
    })
}

pub fn embed_triplets<E: ImageEncoder + ?Sized>(
    triplets: &[TwoAfcTriplet],
    encoder: &E,
    exec: Execution,
) -> Result<Vec<EmbeddedTriplet>> {
    exec.try_map(triplets, |_, t| embed_triplet(t, encoder))
}

/// `sim(ref, x1), sim(ref, x2)` under `encoder`.
pub fn twoafc_logits<E: ImageEncoder + ?Sized>(t: &TwoAfcTriplet, encoder: &E) -> Result<[f64; 2]> {
    embed_triplet(t, encoder)?.logits()
}

/// Fraction of correctly judged triplets.
pub fn twoafc_accuracy_embedded(triplets: &[EmbeddedTriplet]) -> Result<f64> {
    if triplets.is_empty() {
        return contract("2AFC accuracy of an empty dataset");
    }
    let mut correct = 0usize;
    for t in triplets {
        correct += usize::from(t.is_correct()?);
    }
    Ok(correct as f64 / triplets.len() as f64)
}

pub fn twoafc_accuracy<E: ImageEncoder + ?Sized>(
    triplets: &[TwoAfcTriplet],
    encoder: &E,
    exec: Execution,
) -> Result<f64> {
    if triplets.is_empty() {
        return contract("2AFC accuracy of an empty dataset");
    }
    twoafc_accuracy_embedded(&embed_triplets(triplets, encoder, exec)?)
}

/// Zero-based index of the embedding least similar to the other two, by
/// summed cosine similarity. Ties go to the lowest index.
pub fn odd_one_out(embeddings: [&Embedding; 3]) -> Result<usize> {
    let s01 = cosine_sim(embeddings[0], embeddings[1])?;
    let s02 = cosine_sim(embeddings[0], embeddings[2])?;
    let s12 = cosine_sim(embeddings[1], embeddings[2])?;
    let scores = [s01 + s02, s01 + s12, s02 + s12];
    let mut best = 0;
    for i in 1..3 {
        if scores[i] < scores[best] {
            best = i;
        }
    }
    Ok(best)
}

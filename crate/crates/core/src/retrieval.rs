//! Nearest-neighbour retrieval over an embedding pool: classification with a
//! buffer class, detection reports under targeted attack, mAP, and the OR
//! rule for stacking detectors.

use serde::{Deserialize, Serialize};

use crate::attacks::{attack_targeted_embedding, attack_untargeted_embedding, AttackConfig, ThreatModel};
use crate::embedding::Embedding;
use crate::encoders::{embed_with, ImageEncoder};
use crate::error::{contract, Error, Result};
use crate::image::{ImageBatch, LabeledImages};
use crate::par::Execution;

/// Unit-normalized embeddings with one declared class per member.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalPool {
    embeddings: Vec<Embedding>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl RetrievalPool {
    /// Normalizes every embedding. Fails on an empty pool, mixed dimensions,
    /// or a label with no class name.
    pub fn new(embeddings: Vec<Embedding>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if embeddings.is_empty() {
            return contract("retrieval pool is empty");
        }
        if embeddings.len() != labels.len() {
            return contract(format!("{} embeddings but {} labels", embeddings.len(), labels.len()));
        }
        let dim = embeddings[0].dim();
        if let Some(e) = embeddings.iter().find(|e| e.dim() != dim) {
            return contract(format!("pool mixes dimensions {dim} and {}", e.dim()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Lookup(format!(
                "label {l} but only {} classes declared",
                class_names.len()
            )));
        }
        let embeddings = embeddings.iter().map(Embedding::normalize).collect::<Result<_>>()?;
        Ok(Self {
            embeddings,
            labels,
            class_names,
        })
    }

    /// Embeds labelled images with `encoder`.
    pub fn from_images(
        encoder: &dyn ImageEncoder,
        data: &LabeledImages,
        class_names: Vec<String>,
        exec: Execution,
    ) -> Result<Self> {
        let embeddings = embed_with(encoder, &data.images, exec)?;
        Self::new(embeddings, data.labels.clone(), class_names)
    }

    /// Keeps only members of `classes`; class ids and names are unchanged.
    /// Used for the two-class comparison without the buffer class.
    pub fn restrict(&self, classes: &[usize]) -> Result<Self> {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        Self::new(
            keep.iter().map(|&i| self.embeddings[i].clone()).collect(),
            keep.iter().map(|&i| self.labels[i]).collect(),
            self.class_names.clone(),
        )
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].dim()
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Cosine similarity of `query` to every member, in pool order.
    pub fn similarities(&self, query: &Embedding) -> Result<Vec<f64>> {
        if query.dim() != self.dim() {
            return contract(format!("query has dimension {}, pool {}", query.dim(), self.dim()));
        }
        let q = query.normalize()?;
        Ok(self.embeddings.iter().map(|e| q.dot(e)).collect())
    }

    /// Whether any exemplar coincides with a pool member up to `1e-12`.
    fn overlaps(&self, exemplars: &[Embedding]) -> Result<bool> {
        for x in exemplars {
            let u = x.normalize()?;
            let hit = self.embeddings.iter().any(|e| {
                e.dim() == u.dim() && e.values().iter().zip(u.values()).all(|(a, b)| (a - b).abs() <= 1e-12)
            });
            if hit {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// Pool index of the most similar member; ties go to the lowest index.
pub fn nearest_index(query: &Embedding, pool: &RetrievalPool) -> Result<usize> {
    let sims = pool.similarities(query)?;
    let mut best = 0;
    for (i, &s) in sims.iter().enumerate().skip(1) {
        if s > sims[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Class of the nearest pool member.
pub fn nn_classify(query: &Embedding, pool: &RetrievalPool) -> Result<usize> {
    Ok(pool.labels[nearest_index(query, pool)?])
}

/// Targeted grey-box attack pulling each query towards exemplars of one
/// class. The exemplars must not come from the pool.
#[derive(Debug, Clone)]
pub struct DetectionAttack {
    pub threat: ThreatModel,
    pub target_class: usize,
    pub targets: Vec<Embedding>,
    pub config: AttackConfig,
}

impl DetectionAttack {
    /// `linf` at 8/255 with 200 iterations.
    pub fn new(target_class: usize, targets: Vec<Embedding>) -> Self {
        Self {
            threat: ThreatModel::linf(8.0 / 255.0),
            target_class,
            targets,
            config: AttackConfig::with_iterations(200),
        }
    }
}

/// Assignment fractions for the queries of one true class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub true_class: usize,
    pub count: usize,
    /// Indexed by predicted class.
    pub clean: Vec<f64>,
    pub attacked: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub class_names: Vec<String>,
    /// Only classes that occur among the queries get a row.
    pub rows: Vec<DetectionRow>,
    pub target_class: Option<usize>,
}

impl DetectionReport {
    pub fn row(&self, true_class: usize) -> Option<&DetectionRow> {
        self.rows.iter().find(|r| r.true_class == true_class)
    }

    /// Fraction of queries of `true_class` sent to `predicted`.
    pub fn fraction(&self, true_class: usize, predicted: usize, attacked: bool) -> Option<f64> {
        let row = self.row(true_class)?;
        let v = if attacked { row.attacked.as_ref()? } else { &row.clean };
        v.get(predicted).copied()
    }
}

fn tally(true_labels: &[usize], predicted: &[usize], k: usize) -> Vec<(usize, usize, Vec<f64>)> {
    let mut rows = Vec::new();
    for c in 0..k {
        let picks: Vec<usize> = true_labels
            .iter()
            .zip(predicted)
            .filter_map(|(&t, &p)| (t == c).then_some(p))
            .collect();
        if picks.is_empty() {
            continue;
        }
        let mut counts = vec![0usize; k];
        picks.iter().for_each(|&p| counts[p] += 1);
        let n = picks.len();
        rows.push((c, n, counts.iter().map(|&x| x as f64 / n as f64).collect()));
    }
    rows
}

/// Classifies every query by nearest neighbour, clean and optionally after
/// a targeted attack. Query `i` is attacked with seed `config.seed + i`.
pub fn detection_experiment(
    queries: &LabeledImages,
    pool: &RetrievalPool,
    encoder: &(dyn ImageEncoder + '_),
    attack: Option<&DetectionAttack>,
    exec: Execution,
) -> Result<DetectionReport> {
    let k = pool.num_classes();
    if queries.is_empty() {
        return contract("detection experiment needs at least one query");
    }
    if let Some(&l) = queries.labels.iter().find(|&&l| l >= k) {
        return Err(Error::Lookup(format!("query label {l} but pool declares {k} classes")));
    }
    if let Some(a) = attack {
        if a.targets.is_empty() {
            return contract("attack needs target exemplars");
        }
        if a.target_class >= k {
            return Err(Error::Lookup(format!("target class {} out of range", a.target_class)));
        }
        if pool.overlaps(&a.targets)? {
            return contract("target exemplars overlap the retrieval pool");
        }
    }
    let clean_emb = embed_with(encoder, &queries.images, exec)?;
    let clean_pred = clean_emb.iter().map(|e| nn_classify(e, pool)).collect::<Result<Vec<_>>>()?;
    let attacked_pred = match attack {
        None => None,
        Some(a) => {
            let images = queries.images.images();
            let preds = exec.try_map(&images, |i, img| {
                let cfg = AttackConfig {
                    seed: a.config.seed.wrapping_add(i as u64),
                    ..a.config.clone()
                };
                let x = ImageBatch::new(img.clone())?;
                let adv = attack_targeted_embedding(&x, &a.targets, &encoder, &a.threat, &cfg)?;
                let e = crate::encoders::embed_one(encoder, adv.adversarial.tensor())?;
                nn_classify(&e, pool)
            })?;
            Some(preds)
        }
    };
    let clean_rows = tally(&queries.labels, &clean_pred, k);
    let attacked_rows = attacked_pred.map(|p| tally(&queries.labels, &p, k));
    let rows = clean_rows
        .into_iter()
        .enumerate()
        .map(|(j, (c, n, clean))| DetectionRow {
            true_class: c,
            count: n,
            clean,
            attacked: attacked_rows.as_ref().map(|r| r[j].2.clone()),
        })
        .collect();
    Ok(DetectionReport {
        class_names: pool.class_names.clone(),
        rows,
        target_class: attack.map(|a| a.target_class),
    })
}

/// Mean of precision-at-rank over the ranks of the relevant items.
pub fn average_precision(ranking: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in ranking.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return contract("ranking has no relevant items");
    }
    Ok(sum / hits as f64)
}

/// Relevance list of the pool ranked by decreasing similarity to `query`,
/// ties in pool order.
pub fn rank_pool(query: &Embedding, pool: &RetrievalPool, query_label: usize) -> Result<Vec<bool>> {
    let sims = pool.similarities(query)?;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
    Ok(order.into_iter().map(|i| pool.labels[i] == query_label).collect())
}

/// Untargeted embedding attack applied to every query before ranking.
#[derive(Debug, Clone)]
pub struct MapAttack {
    pub threat: ThreatModel,
    pub config: AttackConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    pub per_query: Vec<f64>,
}

/// Mean average precision of `queries` against `pool`, where pool members
/// sharing the query's label are relevant.
pub fn map_evaluate(
    queries: &LabeledImages,
    pool: &RetrievalPool,
    encoder: &(dyn ImageEncoder + '_),
    attack: Option<&MapAttack>,
    exec: Execution,
) -> Result<MapReport> {
    if queries.is_empty() {
        return contract("mAP over zero queries");
    }
    let embeddings = match attack {
        None => embed_with(encoder, &queries.images, exec)?,
        Some(a) => {
            let images = queries.images.images();
            exec.try_map(&images, |i, img| {
                let cfg = AttackConfig {
                    seed: a.config.seed.wrapping_add(i as u64),
                    ..a.config.clone()
                };
                let adv = attack_untargeted_embedding(&ImageBatch::new(img.clone())?, &encoder, &a.threat, &cfg)?;
                crate::encoders::embed_one(encoder, adv.adversarial.tensor())
            })?
        }
    };
    let per_query = embeddings
        .iter()
        .zip(&queries.labels)
        .map(|(e, &l)| average_precision(&rank_pool(e, pool, l)?))
        .collect::<Result<Vec<_>>>()?;
    let map = per_query.iter().sum::<f64>() / per_query.len() as f64;
    Ok(MapReport { map, per_query })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Safe,
    Unsafe,
}

impl Verdict {
    /// `Unsafe` when `class` is one of `unsafe_classes`.
    pub fn of_class(class: usize, unsafe_classes: &[usize]) -> Self {
        if unsafe_classes.contains(&class) {
            Verdict::Unsafe
        } else {
            Verdict::Safe
        }
    }
}

/// Rejects when either detector rejects.
pub fn or_combine(a: Verdict, b: Verdict) -> Verdict {
    if a == Verdict::Unsafe || b == Verdict::Unsafe {
        Verdict::Unsafe
    } else {
        Verdict::Safe
    }
}

/// Share of truly unsafe items flagged `Unsafe`.
pub fn unsafe_recall(verdicts: &[Verdict], truly_unsafe: &[bool]) -> Result<f64> {
    if verdicts.len() != truly_unsafe.len() {
        return contract("verdicts and ground truth differ in length");
    }
    let positives = truly_unsafe.iter().filter(|&&u| u).count();
    if positives == 0 {
        return contract("no unsafe items to recall");
    }
    let caught = verdicts
        .iter()
        .zip(truly_unsafe)
        .filter(|(v, &u)| u && **v == Verdict::Unsafe)
        .count();
    Ok(caught as f64 / positives as f64)
}

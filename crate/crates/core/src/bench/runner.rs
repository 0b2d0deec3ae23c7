//! Config-driven experiments. Each run reads one JSON config, resolves its
//! paths against an output root, writes artifacts there and emits a JSON
//! report echoing the config.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::pemb::{pemb_write, write_sidecar, EmbeddingFile, Sidecar};
use super::synth::{gen_2afc, gen_labeled_images, SyntheticSpec};
use crate::advtrain::{adversarial_finetune, AdvTrainConfig, FrozenEncoder, Method};
use crate::attacks::{attack_2afc_all, robust_2afc_accuracy, AttackConfig, ThreatModel};
use crate::encoders::{
    contrastive_pretrain, embed_with, read_checkpoint, write_checkpoint, zero_shot_accuracy, Architecture,
    Checkpoint, EncoderParams, EncoderShape, PretrainConfig, PromptTable,
};
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::inversion::{cross_judge, feature_invert, text_invert, write_png, InversionConfig, InversionRecord};
use crate::par::{with_threads, Execution};
use crate::percept::twoafc_accuracy;
use crate::retrieval::{
    detection_experiment, map_evaluate, nn_classify, DetectionAttack, MapAttack, RetrievalPool,
};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// The report schema shipped with the crate.
pub const REPORT_SCHEMA: &str = include_str!("../../schema/report.schema.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Pretrain,
    Advtune,
    #[serde(rename = "eval-2afc")]
    Eval2afc,
    EvalRetrieval,
    Nsfw,
    Invert,
    CrossJudge,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::Pretrain,
        ExperimentKind::Advtune,
        ExperimentKind::Eval2afc,
        ExperimentKind::EvalRetrieval,
        ExperimentKind::Nsfw,
        ExperimentKind::Invert,
        ExperimentKind::CrossJudge,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ExperimentKind::Pretrain => "pretrain",
            ExperimentKind::Advtune => "advtune",
            ExperimentKind::Eval2afc => "eval-2afc",
            ExperimentKind::EvalRetrieval => "eval-retrieval",
            ExperimentKind::Nsfw => "nsfw",
            ExperimentKind::Invert => "invert",
            ExperimentKind::CrossJudge => "cross-judge",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment kind {s:?}")))
    }
}

/// One experiment. `params` holds the kind-specific fields; anything left
/// out takes its default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; `1` runs everything on the calling thread.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub record_wall_time: bool,
    /// Defaults to the four-class spec, or the three-class one for `nsfw`.
    #[serde(default)]
    pub data: Option<SyntheticSpec>,
    /// Report file name, relative to the output root.
    #[serde(default)]
    pub report: Option<String>,
    #[serde(default)]
    pub params: Value,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            seed: 0,
            threads: 0,
            record_wall_time: false,
            data: None,
            report: None,
            params: Value::Null,
        }
    }

    /// Parses a config, reporting an unknown kind as a config error rather
    /// than a generic JSON one.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        let kind = v
            .get("kind")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Config("config has no \"kind\" string".into()))?;
        ExperimentKind::parse(kind)?;
        Ok(serde_json::from_value(v)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Sets `params.<key>` to `value`, for CLI flag overrides.
    pub fn set_param(&mut self, key: &str, value: Value) {
        if !self.params.is_object() {
            self.params = json!({});
        }
        self.params[key] = value;
    }

    fn spec(&self) -> SyntheticSpec {
        self.data.clone().unwrap_or_else(|| match self.kind {
            ExperimentKind::Nsfw => SyntheticSpec::three_class(),
            _ => SyntheticSpec::default(),
        })
    }

    fn exec(&self) -> Execution {
        if self.threads == 1 {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    fn params<T: for<'de> Deserialize<'de> + Default>(&self) -> Result<T> {
        if self.params.is_null() {
            return Ok(T::default());
        }
        serde_json::from_value(self.params.clone())
            .map_err(|e| Error::Config(format!("bad params for {}: {e}", self.kind.tag())))
    }

    pub fn report_name(&self) -> String {
        self.report.clone().unwrap_or_else(|| format!("{}.report.json", self.kind.tag()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub kind: ExperimentKind,
    pub toolkit_version: String,
    pub seed: u64,
    pub config: Value,
    pub metrics: Value,
    /// Files written, relative to the output root.
    pub artifacts: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_seconds: Option<f64>,
}

/// Independent sub-streams of one experiment seed.
fn stream(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(k)
}

const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;
const PROMPT_STREAM: u64 = 4;
const TRIPLET_STREAM: u64 = 5;
const POOL_STREAM: u64 = 6;
const QUERY_STREAM: u64 = 7;
const TARGET_STREAM: u64 = 8;
const TUNE_STREAM: u64 = 9;

struct Ctx<'a> {
    root: &'a Path,
    artifacts: Vec<String>,
}

impl Ctx<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn record(&mut self, rel: &str) {
        self.artifacts.push(rel.to_string());
    }

    fn encoder(&self, rel: &str) -> Result<EncoderParams> {
        read_checkpoint(self.path(rel))?.into_encoder()
    }

    fn prompts(&self, rel: &str) -> Result<PromptTable> {
        read_checkpoint(self.path(rel))?.into_prompts()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainParams {
    pub arch: Architecture,
    pub embed_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub config: PretrainConfig,
    pub encoder_out: String,
    pub prompts_out: String,
}

impl Default for PretrainParams {
    fn default() -> Self {
        Self {
            arch: Architecture::ConvNet,
            embed_dim: 64,
            train_per_class: 64,
            test_per_class: 25,
            config: PretrainConfig::default(),
            encoder_out: "encoder.prpt".into(),
            prompts_out: "prompts.prpt".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvtuneParams {
    pub encoder: String,
    /// Only read by TeCoA.
    pub prompts: String,
    pub per_class: usize,
    pub config: AdvTrainConfig,
    pub encoder_out: String,
}

impl Default for AdvtuneParams {
    fn default() -> Self {
        Self {
            encoder: "encoder.prpt".into(),
            prompts: "prompts.prpt".into(),
            per_class: 64,
            config: AdvTrainConfig::default(),
            encoder_out: "robust.prpt".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Eval2afcParams {
    pub encoder: String,
    pub count: usize,
    /// Threat models such as `linf:4/255`; empty evaluates clean only.
    pub attacks: Vec<String>,
    pub attack: AttackConfig,
}

impl Default for Eval2afcParams {
    fn default() -> Self {
        Self {
            encoder: "encoder.prpt".into(),
            count: 100,
            attacks: vec!["linf:4/255".into()],
            attack: AttackConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalParams {
    pub encoder: String,
    pub pool_per_class: usize,
    pub query_per_class: usize,
    pub attack: Option<String>,
    pub config: AttackConfig,
    /// Also export the pool as PEMB plus sidecar.
    pub pool_out: Option<String>,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            encoder: "encoder.prpt".into(),
            pool_per_class: 20,
            query_per_class: 5,
            attack: Some("linf:4/255".into()),
            config: AttackConfig::default(),
            pool_out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NsfwParams {
    pub encoder: String,
    pub pool_per_class: usize,
    pub query_per_class: usize,
    /// Class whose images are attacked.
    pub query_class: usize,
    pub target_class: usize,
    /// Exemplars of the target class, generated apart from the pool.
    pub targets: usize,
    pub attack: String,
    pub config: AttackConfig,
}

impl Default for NsfwParams {
    fn default() -> Self {
        Self {
            encoder: "encoder.prpt".into(),
            pool_per_class: 30,
            query_per_class: 30,
            query_class: 2,
            target_class: 0,
            targets: 10,
            attack: "linf:8/255".into(),
            config: AttackConfig::with_iterations(200),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InvertMode {
    Feature,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InvertParams {
    pub mode: InvertMode,
    pub encoder: String,
    pub prompts: String,
    /// Images to reconstruct, or classes to synthesize.
    pub count: usize,
    /// Labelled pool used to classify text inversions.
    pub pool_per_class: usize,
    pub config: InversionConfig,
    pub out_dir: String,
}

impl Default for InvertParams {
    fn default() -> Self {
        Self {
            mode: InvertMode::Feature,
            encoder: "robust.prpt".into(),
            prompts: "prompts.prpt".into(),
            count: 4,
            pool_per_class: 20,
            config: InversionConfig::default(),
            out_dir: "inversions".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossJudgeParams {
    pub generators: Vec<String>,
    /// Defaults to the generators.
    pub judges: Vec<String>,
    pub count: usize,
    pub config: InversionConfig,
}

impl Default for CrossJudgeParams {
    fn default() -> Self {
        Self {
            generators: vec!["encoder.prpt".into(), "robust.prpt".into()],
            judges: Vec::new(),
            count: 4,
            config: InversionConfig::default(),
        }
    }
}

/// Runs one experiment and writes its report under `root`.
pub fn run_experiment(config: &ExperimentConfig, root: &Path) -> Result<Report> {
    std::fs::create_dir_all(root)?;
    let start = Instant::now();
    let mut ctx = Ctx {
        root,
        artifacts: Vec::new(),
    };
    let metrics = with_threads(config.threads, || dispatch(config, &mut ctx))?;
    let report = Report {
        kind: config.kind,
        toolkit_version: TOOLKIT_VERSION.to_string(),
        seed: config.seed,
        config: serde_json::to_value(config)?,
        metrics,
        artifacts: ctx.artifacts,
        wall_time_seconds: config.record_wall_time.then(|| start.elapsed().as_secs_f64()),
    };
    std::fs::write(root.join(config.report_name()), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

fn dispatch(config: &ExperimentConfig, ctx: &mut Ctx<'_>) -> Result<Value> {
    match config.kind {
        ExperimentKind::Pretrain => run_pretrain(config, ctx),
        ExperimentKind::Advtune => run_advtune(config, ctx),
        ExperimentKind::Eval2afc => run_eval_2afc(config, ctx),
        ExperimentKind::EvalRetrieval => run_retrieval(config, ctx),
        ExperimentKind::Nsfw => run_nsfw(config, ctx),
        ExperimentKind::Invert => run_invert(config, ctx),
        ExperimentKind::CrossJudge => run_cross_judge(config, ctx),
    }
}

fn run_pretrain(config: &ExperimentConfig, ctx: &mut Ctx<'_>) -> Result<Value> {
    let p: PretrainParams = config.params()?;
    let spec = config.spec();
    spec.validate()?;
    let train = gen_labeled_images(&spec, p.train_per_class, stream(config.seed, TRAIN_STREAM))?;
    let test = gen_labeled_images(&spec, p.test_per_class, stream(config.seed, TEST_STREAM))?;
    let shape = EncoderShape {
        image_size: spec.image_size,
        embed_dim: p.embed_dim,
        ..EncoderShape::default()
    };
    let encoder = EncoderParams::init(p.arch, shape, stream(config.seed, INIT_STREAM));
    let prompts = PromptTable::init(spec.num_classes(), p.embed_dim, stream(config.seed, PROMPT_STREAM));
    let cfg = PretrainConfig {
        seed: config.seed,
        ..p.config.clone()
    };
    let out = contrastive_pretrain(&encoder, &prompts, &train, &cfg)?;
    let accuracy = zero_shot_accuracy(&out.encoder, &out.prompts, &test, config.exec())?;
    write_checkpoint(ctx.path(&p.encoder_out), &Checkpoint::from_encoder(&out.encoder))?;
    ctx.record(&p.encoder_out);
    write_checkpoint(ctx.path(&p.prompts_out), &Checkpoint::from_prompts(&out.prompts))?;
    ctx.record(&p.prompts_out);
    Ok(json!({
        "epoch_losses": out.epoch_losses,
        "zero_shot_accuracy": accuracy,
        "num_parameters": out.encoder.num_parameters(),
    }))
}

fn run_advtune(config: &ExperimentConfig, ctx: &mut Ctx<'_>) -> Result<Value> {
    let p: AdvtuneParams = config.params()?;
    let spec = config.spec();
    spec.validate()?;
    let encoder = ctx.encoder(&p.encoder)?;
    let data = gen_labeled_images(&spec, p.per_class, stream(config.seed, TUNE_STREAM))?;
    let cfg = AdvTrainConfig {
        seed: config.seed,
        ..p.config.clone()
    };
    let out = match cfg.method {
        Method::Fare => {
            let frozen = FrozenEncoder::snapshot(&encoder);
            adversarial_finetune(&encoder, &data, None, Some(&frozen), &cfg)?
        }
        Method::Tecoa => {
            let prompts = ctx.prompts(&p.prompts)?;
            adversarial_finetune(&encoder, &data, Some(&prompts), None, &cfg)?
        }
    };
    write_checkpoint(ctx.path(&p.encoder_out), &Checkpoint::from_encoder(&out.encoder))?;
    ctx.record(&p.encoder_out);
    Ok(json!({ "method": cfg.method, "epochs": out.epochs }))
}

fn run_eval_2afc(config: &ExperimentConfig, ctx: &mut Ctx<'_>) -> Result<Value> {
    let p: Eval2afcParams = config.params()?;
    let spec = config.spec();
    spec.validate()?;
    let encoder = ctx.encoder(&p.encoder)?;
    let triplets = gen_2afc(&spec, p.count, stream(config.seed, TRIPLET_STREAM))?;
    let clean = twoafc_accuracy(&triplets, &encoder, config.exec())?;
    let mut attacks = Vec::new();
    for t in &p.attacks {
        let threat: ThreatModel = t.parse()?;
        let cfg = AttackConfig {
            seed: config.seed,
            ..p.attack.clone()
        };
        let outcomes = attack_2afc_all(&triplets, &encoder, &threat, &cfg, config.exec())?;
        let (c, r) = robust_2afc_accuracy(&outcomes)?;
        attacks.push(json!({
            "threat": threat.to_string(),
            "epsilon": threat.epsilon,
            "iterations": cfg.iterations,
            "clean_accuracy": c,
            "robust_accuracy": r,
        }));
    }
    Ok(json!({ "count": triplets.len(), "clean_accuracy": clean, "attacks": attacks }))
}

fn run_retrieval(config: &ExperimentConfig, ctx: &mut Ctx<'_>) -> Result<Value> {
    let p: RetrievalParams = config.params()?;
    let spec = config.spec();
    spec.validate()?;
    let encoder = ctx.encoder(&p.encoder)?;
    let exec = config.exec();
    let pool_data = gen_labeled_images(&spec, p.pool_per_class, stream(config.seed, POOL_STREAM))?;
    let queries = gen_labeled_images(&spec, p.query_per_class, stream(config.seed, QUERY_STREAM))?;
    let pool = RetrievalPool::from_images(&encoder, &pool_data, spec.class_names(), exec)?;
    if let Some(rel) = &p.pool_out {
        let file = EmbeddingFile::from_embeddings(pool.embeddings(), pool.labels())?;
        pemb_write(&ctx.path(rel), &file)?;
        write_sidecar(&ctx.path(rel), &Sidecar::with_classes(spec.class_names()))?;
        ctx.record(rel);
    }
    let query_emb = embed_with(&encoder, &queries.images, exec)?;
    let hits = query_emb
        .iter()
        .zip(&queries.labels)
        .map(|(e, &l)| Ok(nn_classify(e, &pool)? == l))
        .collect::<Result<Vec<_>>>()?;
    let nn_accuracy = hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
    let clean = map_evaluate(&queries, &pool, &encoder, None, exec)?;
    let robust = match &p.attack {
        None => None,
        Some(t) => {
            let attack = MapAttack {
                threat: t.parse()?,
                config: AttackConfig {
                    seed: config.seed,
                    ..p.config.clone()
                },
            };
            Some(map_evaluate(&queries, &pool, &encoder, Some(&attack), exec)?.map)
        }
    };
    Ok(json!({
        "pool_size": pool.len(),
        "queries": queries.len(),
        "nn_accuracy": nn_accuracy,
        "clean_map": clean.map,
        "robust_map": robust,
        "attack": p.attack,
    }))
}

fn run_nsfw(config: &ExperimentConfig, ctx: &mut Ctx<'_>) -> Result<Value> {
    let p: NsfwParams = config.params()?;
    let spec = config.spec();
    spec.validate()?;
    let encoder = ctx.encoder(&p.encoder)?;
    let exec = config.exec();
    let pool_data = gen_labeled_images(&spec, p.pool_per_class, stream(config.seed, POOL_STREAM))?;
    let pool = RetrievalPool::from_images(&encoder, &pool_data, spec.class_names(), exec)?;
    let all_queries = gen_labeled_images(&spec, p.query_per_class, stream(config.seed, QUERY_STREAM))?;
    let queries = all_queries.select(&all_queries.indices_of(p.query_class));
    let exemplar_data = gen_labeled_images(&spec, p.targets, stream(config.seed, TARGET_STREAM))?;
    let exemplars = exemplar_data.select(&exemplar_data.indices_of(p.target_class));
    let targets = embed_with(&encoder, &exemplars.images, exec)?;
    let attack = DetectionAttack {
        threat: p.attack.parse()?,
        target_class: p.target_class,
        targets,
        config: AttackConfig {
            seed: config.seed,
            ..p.config.clone()
        },
    };
    let report = detection_experiment(&queries, &pool, &encoder, Some(&attack), exec)?;
    let clean_retention = report.fraction(p.query_class, p.query_class, false).unwrap_or(0.0);
    let attacked_retention = report.fraction(p.query_class, p.query_class, true).unwrap_or(0.0);
    Ok(json!({
        "threat": attack.threat.to_string(),
        "iterations": attack.config.iterations,
        "clean_retention": clean_retention,
        "attacked_retention": attacked_retention,
        "report": report,
    }))
}

fn run_invert(config: &ExperimentConfig, ctx: &mut Ctx<'_>) -> Result<Value> {
    let p: InvertParams = config.params()?;
    let spec = config.spec();
    spec.validate()?;
    let encoder = ctx.encoder(&p.encoder)?;
    let exec = config.exec();
    let shape = [3, spec.image_size, spec.image_size];
    std::fs::create_dir_all(ctx.path(&p.out_dir))?;
    let cfg = InversionConfig {
        seed: config.seed,
        ..p.config.clone()
    };
    let (targets, kind) = match p.mode {
        InvertMode::Feature => {
            let data = gen_labeled_images(&spec, p.count.div_ceil(spec.num_classes()), stream(config.seed, TEST_STREAM))?;
            let take: Vec<usize> = (0..p.count.min(data.len())).collect();
            let originals = data.images.select(&take);
            (embed_with(&encoder, &originals, exec)?, "feature")
        }
        InvertMode::Text => {
            let prompts = ctx.prompts(&p.prompts)?;
            let k = p.count.min(prompts.classes());
            ((0..k).map(|c| prompts.embed(c)).collect::<Result<Vec<_>>>()?, "text")
        }
    };
    let results = exec.try_map(&targets, |i, t| {
        let cfg = InversionConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        match p.mode {
            InvertMode::Feature => feature_invert(t, &encoder, shape, &cfg),
            InvertMode::Text => text_invert(t, &encoder, shape, &cfg),
        }
    })?;
    let mut records = Vec::new();
    for (i, r) in results.iter().enumerate() {
        let rel = format!("{}/{kind}_{i:03}.png", p.out_dir);
        write_png(&ctx.path(&rel), r.image.tensor())?;
        ctx.record(&rel);
        records.push(InversionRecord {
            kind: kind.into(),
            target: i,
            seed: cfg.seed.wrapping_add(i as u64),
            similarity: r.similarity,
            file: rel,
        });
    }
    let rel = format!("{}/{kind}_records.json", p.out_dir);
    std::fs::write(ctx.path(&rel), serde_json::to_string_pretty(&records)? + "\n")?;
    ctx.record(&rel);
    let sims: Vec<f64> = results.iter().map(|r| r.similarity).collect();
    let mean = sims.iter().sum::<f64>() / sims.len().max(1) as f64;
    let mut metrics = json!({ "mode": p.mode, "similarities": sims, "mean_similarity": mean });
    if p.mode == InvertMode::Text {
        let pool_data = gen_labeled_images(&spec, p.pool_per_class, stream(config.seed, POOL_STREAM))?;
        let pool = RetrievalPool::from_images(&encoder, &pool_data, spec.class_names(), exec)?;
        let images = ImageBatch::stack(&results.iter().map(|r| r.image.tensor().clone()).collect::<Vec<_>>())?;
        let emb = embed_with(&encoder, &images, exec)?;
        let classes = emb.iter().map(|e| nn_classify(e, &pool)).collect::<Result<Vec<_>>>()?;
        let hits = classes.iter().enumerate().filter(|(k, &c)| *k == c).count();
        metrics["nn_classes"] = json!(classes);
        metrics["class_hit_rate"] = json!(hits as f64 / classes.len().max(1) as f64);
    }
    Ok(metrics)
}

fn run_cross_judge(config: &ExperimentConfig, ctx: &mut Ctx<'_>) -> Result<Value> {
    let p: CrossJudgeParams = config.params()?;
    let spec = config.spec();
    spec.validate()?;
    let exec = config.exec();
    let shape = [3, spec.image_size, spec.image_size];
    let generators = p.generators.iter().map(|g| ctx.encoder(g)).collect::<Result<Vec<_>>>()?;
    let judge_paths = if p.judges.is_empty() { &p.generators } else { &p.judges };
    let judges = judge_paths.iter().map(|j| ctx.encoder(j)).collect::<Result<Vec<_>>>()?;
    let data = gen_labeled_images(&spec, p.count.div_ceil(spec.num_classes()), stream(config.seed, TEST_STREAM))?;
    let take: Vec<usize> = (0..p.count.min(data.len())).collect();
    let originals = data.images.select(&take);
    let mut reconstructions = Vec::new();
    for gen in &generators {
        let targets = embed_with(gen, &originals, exec)?;
        let recs = exec.try_map(&targets, |i, t| {
            let cfg = InversionConfig {
                seed: config.seed.wrapping_add(i as u64),
                ..p.config.clone()
            };
            Ok::<_, Error>(feature_invert(t, gen, shape, &cfg)?.image.into_tensor())
        })?;
        reconstructions.push(ImageBatch::stack(&recs)?);
    }
    let judge_refs: Vec<&dyn crate::encoders::ImageEncoder> =
        judges.iter().map(|j| j as &dyn crate::encoders::ImageEncoder).collect();
    let matrix = cross_judge(&originals, &reconstructions, &judge_refs, exec)?;
    Ok(json!({ "generators": p.generators, "judges": judge_paths, "matrix": matrix }))
}

/// Checks a JSON value against the subset of JSON Schema used by the
/// shipped report schema: `type`, `required`, `properties`, `items`,
/// `enum` and `minimum`.
pub fn validate_schema(value: &Value, schema: &Value) -> std::result::Result<(), String> {
    check(value, schema, "$")
}

fn type_matches(v: &Value, t: &str) -> bool {
    match t {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "number" => v.is_number(),
        "integer" => v.is_u64() || v.is_i64(),
        "boolean" => v.is_boolean(),
        "null" => v.is_null(),
        _ => false,
    }
}

fn check(v: &Value, s: &Value, at: &str) -> std::result::Result<(), String> {
    if let Some(t) = s.get("type") {
        let ok = match t {
            Value::String(t) => type_matches(v, t),
            Value::Array(ts) => ts.iter().filter_map(Value::as_str).any(|t| type_matches(v, t)),
            _ => false,
        };
        if !ok {
            return Err(format!("{at}: expected type {t}, got {v}"));
        }
    }
    if let Some(Value::Array(options)) = s.get("enum") {
        if !options.contains(v) {
            return Err(format!("{at}: {v} not in {options:?}"));
        }
    }
    if let (Some(min), Some(x)) = (s.get("minimum").and_then(Value::as_f64), v.as_f64()) {
        if x < min {
            return Err(format!("{at}: {x} below minimum {min}"));
        }
    }
    if let Some(obj) = v.as_object() {
        if let Some(Value::Array(req)) = s.get("required") {
            for k in req.iter().filter_map(Value::as_str) {
                if !obj.contains_key(k) {
                    return Err(format!("{at}: missing {k:?}"));
                }
            }
        }
        if let Some(Value::Object(props)) = s.get("properties") {
            for (k, sub) in props {
                if let Some(child) = obj.get(k) {
                    check(child, sub, &format!("{at}.{k}"))?;
                }
            }
        }
    }
    if let (Some(items), Some(arr)) = (s.get("items"), v.as_array()) {
        for (i, child) in arr.iter().enumerate() {
            check(child, items, &format!("{at}[{i}]"))?;
        }
    }
    Ok(())
}

pub fn validate_report(report: &Value) -> Result<()> {
    let schema: Value = serde_json::from_str(REPORT_SCHEMA)?;
    validate_schema(report, &schema).map_err(|e| Error::Contract(format!("report fails schema: {e}")))
}

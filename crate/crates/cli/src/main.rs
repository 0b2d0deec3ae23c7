use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use robustsim::bench::runner::{run_experiment, validate_report, ExperimentConfig, ExperimentKind};
use robustsim::bench::synth::{gen_2afc, gen_labeled_images, SyntheticSpec};
use robustsim::inversion::write_png;
use robustsim::{Error, Result};

#[derive(Parser)]
#[command(name = "robustsim", version, about = "Robust perceptual similarity toolkit on synthetic data")]
struct Cli {
    /// Directory that receives reports, checkpoints and images.
    #[arg(long, env = "ROBUSTSIM_OUT", default_value = "out", global = true)]
    root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON). Flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 runs sequentially and is bit-reproducible.
    #[arg(long)]
    threads: Option<usize>,
    /// Record wall time in the report.
    #[arg(long)]
    wall_time: bool,
    /// Report file name inside the root.
    #[arg(long)]
    report: Option<String>,
    /// Encoder checkpoint, relative to the root.
    #[arg(long)]
    encoder: Option<String>,
    /// Built-in synthetic layout; `nsfw` defaults to three-class, the rest to four-class.
    #[arg(long, value_enum)]
    data: Option<Preset>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    FourClass,
    ThreeClass,
}

impl Preset {
    fn spec(self) -> SyntheticSpec {
        match self {
            Preset::FourClass => SyntheticSpec::default(),
            Preset::ThreeClass => SyntheticSpec::three_class(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Fare,
    Tecoa,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic labeled images and 2AFC triplets as PNG files.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        triplets: usize,
        /// Synthetic spec (JSON); overrides `--data`.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "four-class")]
        data: Preset,
        #[arg(long, default_value = "data")]
        out: String,
    },
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// convnet or tinyvit
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    Advtune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Training radius, e.g. linf:4/255.
        #[arg(long)]
        threat: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    #[command(name = "eval-2afc")]
    Eval2afc {
        #[command(flatten)]
        common: Common,
        /// Threat model, repeatable: linf:4/255 or l2:R.
        #[arg(long)]
        attack: Vec<String>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
    },
    EvalRetrieval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        attack: Option<String>,
        /// Evaluate clean retrieval only.
        #[arg(long, conflicts_with = "attack")]
        clean_only: bool,
        #[arg(long)]
        iters: Option<usize>,
        /// Also export the pool embeddings as PEMB.
        #[arg(long)]
        pool_out: Option<String>,
    },
    Nsfw {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        attack_target: Option<usize>,
        /// l-infinity radius, e.g. 8/255.
        #[arg(long)]
        eps: Option<String>,
        #[arg(long)]
        iters: Option<usize>,
    },
    InvertFeature {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out_dir: Option<String>,
    },
    InvertText {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompts: Option<String>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out_dir: Option<String>,
    },
    CrossJudge {
        #[command(flatten)]
        common: Common,
        /// Generator checkpoints, repeatable.
        #[arg(long)]
        generator: Vec<String>,
        /// Judge checkpoints, repeatable; defaults to the generators.
        #[arg(long)]
        judge: Vec<String>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Validate a report against the schema and print its metrics.
    Report { file: PathBuf },
}

/// Sets `a.b.c` inside `root`, creating objects along the way.
fn set_path(root: &mut Value, path: &str, value: Value) {
    let mut cur = root;
    for key in path.split('.') {
        if !cur.is_object() {
            *cur = json!({});
        }
        cur = cur.as_object_mut().unwrap().entry(key).or_insert(Value::Null);
    }
    *cur = value;
}

fn base_config(kind: ExperimentKind, common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let cfg = ExperimentConfig::load(path)?;
            if cfg.kind != kind {
                return Err(Error::Config(format!(
                    "{} holds a {} config, expected {}",
                    path.display(),
                    cfg.kind.tag(),
                    kind.tag()
                )));
            }
            cfg
        }
        None => ExperimentConfig::new(kind),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    cfg.record_wall_time |= common.wall_time;
    if common.report.is_some() {
        cfg.report.clone_from(&common.report);
    }
    if let Some(e) = &common.encoder {
        cfg.set_param("encoder", json!(e));
    }
    if let Some(p) = common.data {
        cfg.data = Some(p.spec());
    }
    Ok(cfg)
}

fn set_opt<T: Into<Value>>(cfg: &mut ExperimentConfig, path: &str, value: Option<T>) {
    if let Some(v) = value {
        if !cfg.params.is_object() {
            cfg.params = json!({});
        }
        set_path(&mut cfg.params, path, v.into());
    }
}

fn experiment(command: Command) -> Result<Option<ExperimentConfig>> {
    use ExperimentKind as K;
    let cfg = match command {
        Command::GenData { .. } | Command::Report { .. } => return Ok(None),
        Command::Pretrain { common, arch, epochs } => {
            let mut cfg = base_config(K::Pretrain, &common)?;
            set_opt(&mut cfg, "arch", arch);
            set_opt(&mut cfg, "config.epochs", epochs);
            cfg
        }
        Command::Advtune {
            common,
            method,
            threat,
            epochs,
        } => {
            let mut cfg = base_config(K::Advtune, &common)?;
            let method = method.map(|m| match m {
                MethodArg::Fare => "fare",
                MethodArg::Tecoa => "tecoa",
            });
            set_opt(&mut cfg, "config.method", method);
            if let Some(t) = threat {
                let t: robustsim::attacks::ThreatModel = t.parse()?;
                set_opt(&mut cfg, "config.threat", Some(serde_json::to_value(t)?));
            }
            set_opt(&mut cfg, "config.epochs", epochs);
            cfg
        }
        Command::Eval2afc {
            common,
            attack,
            iters,
            count,
        } => {
            let mut cfg = base_config(K::Eval2afc, &common)?;
            if !attack.is_empty() {
                set_opt(&mut cfg, "attacks", Some(json!(attack)));
            }
            set_opt(&mut cfg, "attack.iterations", iters);
            set_opt(&mut cfg, "count", count);
            cfg
        }
        Command::EvalRetrieval {
            common,
            attack,
            clean_only,
            iters,
            pool_out,
        } => {
            let mut cfg = base_config(K::EvalRetrieval, &common)?;
            if clean_only {
                set_opt(&mut cfg, "attack", Some(Value::Null));
            }
            set_opt(&mut cfg, "attack", attack);
            set_opt(&mut cfg, "config.iterations", iters);
            set_opt(&mut cfg, "pool_out", pool_out);
            cfg
        }
        Command::Nsfw {
            common,
            attack_target,
            eps,
            iters,
        } => {
            let mut cfg = base_config(K::Nsfw, &common)?;
            set_opt(&mut cfg, "target_class", attack_target);
            set_opt(&mut cfg, "attack", eps.map(|e| format!("linf:{e}")));
            set_opt(&mut cfg, "config.iterations", iters);
            cfg
        }
        Command::InvertFeature {
            common,
            count,
            iters,
            out_dir,
        } => {
            let mut cfg = base_config(K::Invert, &common)?;
            set_opt(&mut cfg, "mode", Some("feature"));
            set_opt(&mut cfg, "count", count);
            set_opt(&mut cfg, "config.iterations", iters);
            set_opt(&mut cfg, "out_dir", out_dir);
            cfg
        }
        Command::InvertText {
            common,
            prompts,
            iters,
            out_dir,
        } => {
            let mut cfg = base_config(K::Invert, &common)?;
            set_opt(&mut cfg, "mode", Some("text"));
            set_opt(&mut cfg, "prompts", prompts);
            set_opt(&mut cfg, "config.iterations", iters);
            set_opt(&mut cfg, "out_dir", out_dir);
            cfg
        }
        Command::CrossJudge {
            common,
            generator,
            judge,
            count,
            iters,
        } => {
            let mut cfg = base_config(K::CrossJudge, &common)?;
            if !generator.is_empty() {
                set_opt(&mut cfg, "generators", Some(json!(generator)));
            }
            if !judge.is_empty() {
                set_opt(&mut cfg, "judges", Some(json!(judge)));
            }
            set_opt(&mut cfg, "count", count);
            set_opt(&mut cfg, "config.iterations", iters);
            cfg
        }
    };
    Ok(Some(cfg))
}

fn gen_data(root: &Path, seed: u64, per_class: usize, triplets: usize, spec: Option<&Path>, preset: Preset, out: &str) -> Result<()> {
    let spec: SyntheticSpec = match spec {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => preset.spec(),
    };
    let dir = root.join(out);
    std::fs::create_dir_all(dir.join("labeled"))?;
    std::fs::create_dir_all(dir.join("2afc"))?;
    std::fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&spec)?)?;

    let names = spec.class_names();
    let data = gen_labeled_images(&spec, per_class, seed)?;
    let mut entries = Vec::with_capacity(data.len());
    for (i, &label) in data.labels.iter().enumerate() {
        let file = format!("labeled/{i:05}.png");
        write_png(&dir.join(&file), &data.images.image(i))?;
        entries.push(json!({ "file": file, "label": label, "class": names[label] }));
    }
    std::fs::write(dir.join("labeled.json"), serde_json::to_string_pretty(&entries)?)?;

    let trip = gen_2afc(&spec, triplets, seed)?;
    let mut labels = Vec::with_capacity(trip.len());
    for (i, t) in trip.iter().enumerate() {
        write_png(&dir.join(format!("2afc/{i:05}_ref.png")), &t.reference)?;
        write_png(&dir.join(format!("2afc/{i:05}_1.png")), &t.first)?;
        write_png(&dir.join(format!("2afc/{i:05}_2.png")), &t.second)?;
        labels.push(t.label.index());
    }
    std::fs::write(dir.join("2afc.json"), serde_json::to_string(&json!({ "labels": labels }))?)?;
    println!("wrote {} labeled images and {} triplets to {}", data.len(), trip.len(), dir.display());
    Ok(())
}

fn show_report(file: &Path) -> Result<()> {
    let v: Value = serde_json::from_str(&std::fs::read_to_string(file)?)?;
    validate_report(&v)?;
    println!("{} report, seed {}", v["kind"].as_str().unwrap_or("?"), v["seed"]);
    println!("{}", serde_json::to_string_pretty(&v["metrics"])?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData {
            seed,
            per_class,
            triplets,
            spec,
            data,
            out,
        } => return gen_data(&cli.root, *seed, *per_class, *triplets, spec.as_deref(), *data, out),
        Command::Report { file } => return show_report(file),
        _ => {}
    }
    let root = cli.root;
    let cfg = experiment(cli.command)?.expect("experiment subcommand");
    let report = run_experiment(&cfg, &root)?;
    println!("{}", serde_json::to_string_pretty(&report.metrics)?);
    println!("report: {}", root.join(cfg.report_name()).display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

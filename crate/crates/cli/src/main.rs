use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use spikeprune::io::{archive, config, dataset, masks};
use spikeprune::io::{MaskRecorder, RunConfig};
use spikeprune::metrics::{energy_report, throughput};
use spikeprune::model::{Pruning, RunOptions, SpikingTransformer};
use spikeprune::pruning::PruneSchedule;
use spikeprune::search::search;
use spikeprune::training::{evaluate, finetune_pruned, metrics_csv, train, Dataset, SyntheticSpec};

#[derive(Parser)]
#[command(name = "spikeprune", version, about = "Spiking transformer with token pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct WithWeights {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    weights: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Batch {
    Train,
    Eval,
    Search,
}

#[derive(Subcommand)]
enum Command {
    /// Train the unpruned baseline.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch metrics CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Accuracy and per-class report.
    Eval {
        #[command(flatten)]
        w: WithWeights,
        /// `none`, ratios (`0.9,0.5` or `[0.9,0.5]`) or a JSON file.
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long, value_enum, default_value = "eval")]
        batch: Batch,
    },
    /// Fine-tune with pruning at the reduced rate.
    Finetune {
        #[command(flatten)]
        w: WithWeights,
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Grid search over per-block ratios on the search batch.
    Search {
        #[command(flatten)]
        w: WithWeights,
        #[arg(long)]
        target_avg: Option<f64>,
        #[arg(long)]
        tolerance: Option<f64>,
        /// Ranked schedules as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Per-layer SOPs and energy.
    Energy {
        #[command(flatten)]
        w: WithWeights,
        #[arg(long)]
        schedule: Option<String>,
        /// Eval images to average over.
        #[arg(long, default_value_t = 16)]
        images: usize,
    },
    /// Keep masks and score heatmaps per (block, step).
    Masks {
        #[command(flatten)]
        w: WithWeights,
        #[arg(long)]
        schedule: Option<String>,
        /// Raw f32 image or a split manifest (`.json`).
        #[arg(long)]
        input: PathBuf,
        /// Image index when `--input` is a manifest.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Throughput in images per second.
    Bench {
        #[command(flatten)]
        w: WithWeights,
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long, default_value_t = 32)]
        images: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Write synthetic splits.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Generator spec (JSON file or inline object); writes one split.
        /// Without it the config's train/eval/search splits are written.
        #[arg(long)]
        spec: Option<String>,
        #[arg(long, default_value = "data")]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_cfg(common: &Common) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(p) => {
            if !p.is_file() {
                bail!("config file not found: {}", p.display());
            }
            config::load_config(p)?
        }
        None => {
            let mut c = RunConfig::default();
            c.apply_env()?;
            c
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(w: &WithWeights, cfg: &RunConfig) -> Result<SpikingTransformer> {
    if !w.weights.is_file() {
        bail!("weights file not found: {}", w.weights.display());
    }
    Ok(archive::load_weights(&w.weights, &cfg.model)?)
}

fn split(cfg: &RunConfig, batch: Batch) -> Result<Dataset> {
    let (name, spec) = match batch {
        Batch::Train => ("train", &cfg.data.train),
        Batch::Eval => ("eval", &cfg.data.eval),
        Batch::Search => ("search", &cfg.data.search),
    };
    let data = match &cfg.paths.data {
        Some(dir) => dataset::load_split(dir, name).with_context(|| format!("loading {name} split"))?,
        None => spec.generate()?,
    };
    let m = &cfg.model;
    if (data.height, data.width, data.channels) != (m.input_height, m.input_width, m.input_channels)
        || data.num_classes != m.num_classes
    {
        bail!(
            "{name} split is {}x{}x{} with {} classes, model expects {}x{}x{} with {}",
            data.height,
            data.width,
            data.channels,
            data.num_classes,
            m.input_height,
            m.input_width,
            m.input_channels,
            m.num_classes
        );
    }
    Ok(data)
}

/// `--schedule` if given, else the config's.
fn resolve_schedule(arg: Option<&str>, cfg: &RunConfig) -> Result<Option<PruneSchedule>> {
    let s = match arg {
        Some(a) => config::parse_schedule_arg(a)?,
        None => cfg.schedule.clone(),
    };
    if let Some(s) = &s {
        s.check_blocks(cfg.model.num_blocks)?;
    }
    Ok(s)
}

fn emit(report: &Value, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    println!("{text}");
    if let Some(p) = path {
        write_file(p, text + "\n")?;
    }
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn schedule_json(s: &Option<PruneSchedule>) -> Value {
    match s {
        Some(s) => json!(s.ratios),
        None => json!("none"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, out, metrics } => {
            let cfg = load_cfg(&common)?;
            let data = split(&cfg, Batch::Train)?;
            let eval = split(&cfg, Batch::Eval)?;
            let model = SpikingTransformer::new(cfg.model.clone(), cfg.train.seed)?;
            let (model, history) = train(model, &data, Some(&eval), &cfg.train, &cfg.scorer)?;
            archive::save_weights(&model, &out)?;
            if let Some(p) = metrics {
                write_file(&p, metrics_csv(&history))?;
            }
            let last = history.last();
            emit(
                &json!({
                    "command": "train",
                    "weights": out,
                    "epochs": history.len(),
                    "train_loss": last.map(|m| m.train_loss),
                    "train_acc": last.map(|m| m.train_acc),
                    "eval_acc": last.and_then(|m| m.eval_acc),
                    "config_fingerprint": cfg.fingerprint(),
                }),
                common.report.as_deref(),
            )
        }
        Command::Eval { w, schedule, batch } => {
            let cfg = load_cfg(&w.common)?;
            let model = load_model(&w, &cfg)?;
            let schedule = resolve_schedule(schedule.as_deref(), &cfg)?;
            let data = split(&cfg, batch)?;
            let pruning = schedule.as_ref().map(|s| Pruning {
                scorer: &cfg.scorer,
                schedule: s,
            });
            let r = evaluate(&model, &data, pruning)?;
            let per_class: Vec<Value> = r
                .per_class
                .iter()
                .enumerate()
                .map(|(c, &(ok, n))| {
                    json!({
                        "class": c,
                        "correct": ok,
                        "total": n,
                        "accuracy": if n > 0 { ok as f64 / n as f64 } else { 0.0 },
                    })
                })
                .collect();
            emit(
                &json!({
                    "command": "eval",
                    "schedule": schedule_json(&schedule),
                    "batch": batch_name(batch),
                    "accuracy": r.accuracy,
                    "correct": r.correct,
                    "total": r.total,
                    "per_class": per_class,
                    "config_fingerprint": cfg.fingerprint(),
                }),
                w.common.report.as_deref(),
            )
        }
        Command::Finetune {
            w,
            schedule,
            out,
            epochs,
            metrics,
        } => {
            let mut cfg = load_cfg(&w.common)?;
            let model = load_model(&w, &cfg)?;
            let Some(schedule) = resolve_schedule(schedule.as_deref(), &cfg)? else {
                bail!("finetune needs a schedule (--schedule or config `schedule`)");
            };
            if let Some(e) = epochs {
                cfg.train.finetune_epochs = e;
            }
            let data = split(&cfg, Batch::Train)?;
            let eval = split(&cfg, Batch::Eval)?;
            let (model, history) = finetune_pruned(model, &data, Some(&eval), &schedule, &cfg.scorer, &cfg.train)?;
            archive::save_weights(&model, &out)?;
            if let Some(p) = metrics {
                write_file(&p, metrics_csv(&history))?;
            }
            let last = history.last();
            emit(
                &json!({
                    "command": "finetune",
                    "weights": out,
                    "schedule": schedule.ratios,
                    "learning_rate": cfg.train.finetune_rate(),
                    "epochs": history.len(),
                    "train_acc": last.map(|m| m.train_acc),
                    "eval_acc": last.and_then(|m| m.eval_acc),
                    "config_fingerprint": cfg.fingerprint(),
                }),
                w.common.report.as_deref(),
            )
        }
        Command::Search {
            w,
            target_avg,
            tolerance,
            csv,
        } => {
            let mut cfg = load_cfg(&w.common)?;
            if let Some(t) = target_avg {
                cfg.search.target_avg = t;
            }
            if let Some(t) = tolerance {
                cfg.search.tolerance = t;
            }
            cfg.validate()?;
            let model = load_model(&w, &cfg)?;
            let batch = split(&cfg, Batch::Search)?;
            let res = search(&model, &batch, &cfg.search, &cfg.scorer)?;
            if let Some(p) = csv {
                write_file(&p, res.to_csv())?;
            }
            let ranked: Vec<Value> = res
                .ranked
                .iter()
                .map(|e| {
                    json!({
                        "schedule": e.schedule.ratios,
                        "mean_ratio": e.mean_ratio,
                        "batch_accuracy": e.batch_accuracy,
                        "correct": e.correct,
                    })
                })
                .collect();
            emit(
                &json!({
                    "command": "search",
                    "best": res.best.ratios,
                    "best_accuracy": res.best_accuracy,
                    "mean_ratio": res.best.mean(),
                    "target_avg": cfg.search.target_avg,
                    "tolerance": cfg.search.tolerance,
                    "batch": "search",
                    "batch_size": batch.len(),
                    "ranked": ranked,
                    "config_fingerprint": cfg.fingerprint(),
                }),
                w.common.report.as_deref(),
            )
        }
        Command::Energy { w, schedule, images } => {
            let cfg = load_cfg(&w.common)?;
            let model = load_model(&w, &cfg)?;
            let schedule = resolve_schedule(schedule.as_deref(), &cfg)?;
            let data = split(&cfg, Batch::Eval)?;
            let n = images.min(data.len());
            let pruning = schedule.as_ref().map(|s| Pruning {
                scorer: &cfg.scorer,
                schedule: s,
            });
            let mut report = energy_report(&model, &data.images[..n], pruning, &cfg.energy)?;
            report.config_fingerprint = Some(cfg.fingerprint());
            emit(&serde_json::to_value(&report)?, w.common.report.as_deref())
        }
        Command::Masks {
            w,
            schedule,
            input,
            index,
            out,
        } => {
            let cfg = load_cfg(&w.common)?;
            let model = load_model(&w, &cfg)?;
            let Some(schedule) = resolve_schedule(schedule.as_deref(), &cfg)? else {
                bail!("masks needs a schedule (--schedule or config `schedule`)");
            };
            if !input.is_file() {
                bail!("input not found: {}", input.display());
            }
            let m = &cfg.model;
            let image = if input.extension().is_some_and(|e| e == "json") {
                let data = dataset::load_split_manifest(&input)?;
                match data.images.get(index) {
                    Some(img) => img.clone(),
                    None => bail!("--index {index} out of range for {} images", data.len()),
                }
            } else {
                dataset::load_raw_image(&input, [m.input_height, m.input_width, m.input_channels])?
            };
            let opts = RunOptions {
                pruning: Some(Pruning {
                    scorer: &cfg.scorer,
                    schedule: &schedule,
                }),
                ..Default::default()
            };
            let mut rec = MaskRecorder::default();
            let outp = model.run(&image, &opts, &mut rec)?;
            let files = masks::write_masks(&rec.records, &out)?;
            let records: Vec<Value> = rec
                .records
                .iter()
                .map(|r| {
                    json!({
                        "block": r.block,
                        "step": r.step,
                        "kept": r.partition.informative.len(),
                        "tokens": r.partition.height * r.partition.width,
                        "stem": r.stem(),
                    })
                })
                .collect();
            let report = json!({
                "command": "masks",
                "schedule": schedule.ratios,
                "prediction": spikeprune::model::argmax(&outp.logits),
                "records": records,
                "files": files.len(),
                "config_fingerprint": cfg.fingerprint(),
            });
            write_file(&out.join("index.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            emit(&report, w.common.report.as_deref())
        }
        Command::Bench {
            w,
            schedule,
            images,
            reps,
        } => {
            let cfg = load_cfg(&w.common)?;
            let model = load_model(&w, &cfg)?;
            let schedule = resolve_schedule(schedule.as_deref(), &cfg)?;
            let data = split(&cfg, Batch::Eval)?;
            let n = images.min(data.len());
            let pruning = schedule.as_ref().map(|s| Pruning {
                scorer: &cfg.scorer,
                schedule: s,
            });
            let t = throughput(&model, &data.images[..n], pruning, reps)?;
            emit(
                &json!({
                    "command": "bench",
                    "schedule": schedule_json(&schedule),
                    "images": n,
                    "images_per_second": t.images_per_second,
                    "samples": t.samples,
                    "config_fingerprint": cfg.fingerprint(),
                }),
                w.common.report.as_deref(),
            )
        }
        Command::GenData {
            common,
            spec,
            name,
            out,
        } => {
            let cfg = load_cfg(&common)?;
            let mut written = Vec::new();
            match spec {
                Some(s) => {
                    let text = if s.trim_start().starts_with('{') {
                        s.clone()
                    } else {
                        std::fs::read_to_string(&s).with_context(|| format!("reading spec {s}"))?
                    };
                    let spec: SyntheticSpec = serde_json::from_str(&text).context("invalid generator spec")?;
                    let data = spec.generate()?;
                    written.push(dataset::save_split(&out, &name, &data, Some(&spec))?);
                }
                None => {
                    for (n, spec) in [
                        ("train", &cfg.data.train),
                        ("eval", &cfg.data.eval),
                        ("search", &cfg.data.search),
                    ] {
                        written.push(dataset::save_split(&out, n, &spec.generate()?, Some(spec))?);
                    }
                }
            }
            emit(
                &json!({
                    "command": "gen-data",
                    "manifests": written,
                    "config_fingerprint": cfg.fingerprint(),
                }),
                common.report.as_deref(),
            )
        }
    }
}

fn batch_name(b: Batch) -> &'static str {
    match b {
        Batch::Train => "train",
        Batch::Eval => "eval",
        Batch::Search => "search",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("spikeprune: {}", first.trim_start_matches("error: ").trim_end());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("spikeprune: error: {msg}");
            ExitCode::FAILURE
        }
    }
}

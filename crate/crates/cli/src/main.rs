//! `medpred`: synthetic data generation, preprocessing, training,
//! evaluation and prediction from the command line.
//!
//! Every subcommand writes into a run directory (`--out`, default `run`)
//! and records its effective configuration and output digests in
//! `manifest.json` there.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use medpred::config::RunConfig;
use medpred::dataset::Dataset;
use medpred::ehr::ingest_events;
use medpred::models::Checkpoint;
use medpred::pipeline;
use medpred::predict::predict_history;
use medpred::preprocess::SplitPart;
use medpred::synth::{bayes_ceiling, generate};

#[derive(Parser, Debug)]
#[command(
    name = "medpred",
    version,
    about = "Medication prediction from longitudinal EHR event logs"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for every output.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic events.csv and its truth.json.
    Synth {
        #[arg(long)]
        patients: Option<usize>,
    },
    /// Build a dataset file from an events log.
    Preprocess {
        #[arg(long)]
        events: PathBuf,
        /// with_prev | without_prev
        #[arg(long)]
        mode: Option<String>,
        /// Also write a JSONL export of the dataset.
        #[arg(long)]
        jsonl: bool,
    },
    /// Train a model on a dataset's training split.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// prev | lr | rnn | hrnn1 | hrnn2
        #[arg(long)]
        model: Option<String>,
        /// dc | dcc
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train | validation | test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Rank drug classes or combinations for one patient's history.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// events.csv holding one patient; its last date is the day to predict.
        #[arg(long)]
        history: PathBuf,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Preprocess { .. } => "preprocess",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Predict { .. } => "predict",
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes one output file and remembers its digest for the manifest.
struct RunDir {
    root: PathBuf,
    outputs: BTreeMap<String, Value>,
}

impl RunDir {
    fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating run directory {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            outputs: BTreeMap::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.insert(
            name.to_string(),
            json!({"bytes": bytes.len(), "sha256": sha256_hex(bytes)}),
        );
        Ok(path)
    }

    /// Files whose content varies between identical runs (timings).
    fn write_unhashed(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.insert(name.to_string(), json!({"bytes": bytes.len()}));
        Ok(path)
    }

    /// Merges this command's entry into `manifest.json`.
    fn finish(self, command: &str, cfg: &RunConfig, inputs: BTreeMap<String, Value>) -> Result<()> {
        let path = self.root.join("manifest.json");
        let mut manifest: Value = match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_else(|_| json!({})),
            Err(_) => json!({}),
        };
        if !manifest.is_object() {
            manifest = json!({});
        }
        manifest["tool"] = json!("medpred");
        manifest["version"] = json!(env!("CARGO_PKG_VERSION"));
        if !manifest["commands"].is_object() {
            manifest["commands"] = json!({});
        }
        manifest["commands"][command] = json!({
            "config": cfg.to_text(),
            "inputs": inputs,
            "outputs": self.outputs,
        });
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn input_digest(path: &Path) -> Result<Value> {
    let bytes = fs::read(path).map_err(|e| medpred::Error::io(path, e))?;
    Ok(json!({"path": path.display().to_string(), "sha256": sha256_hex(&bytes)}))
}

/// Config file (or `base`), then `--seed`, then subcommand flags, then `--set`.
fn effective_config(common: &Common, base: Option<RunConfig>, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = base.unwrap_or_default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| medpred::Error::io(path, e))?;
        for (k, v) in medpred::codec::parse_kv(&text)? {
            cfg.set(&k, &v)?;
        }
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| medpred::Error::Config(format!("--set {kv:?} is not key=value")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let name = cli.command.name();
    let mut inputs = BTreeMap::new();
    match &cli.command {
        Command::Synth { patients } => {
            let cfg = effective_config(common, None, &[("patients", patients.map(|p| p.to_string()))])?;
            let gen = cfg.gen_config();
            let (events, truth) = generate(&gen)?;
            let ceiling = bayes_ceiling(&gen)?;
            let mut dir = RunDir::create(&common.out)?;
            let path = dir.write("events.csv", &pipeline::events_to_csv(&events)?)?;
            dir.write("truth.json", truth.to_json().as_bytes())?;
            println!(
                "{} events for {} patients -> {}",
                events.len(),
                gen.patients,
                path.display()
            );
            println!(
                "stay rate {:.4} (target {}), accuracy ceiling of the generating rule {:.4} on repeat steps, {:.4} on first steps",
                truth.stay_rate(),
                gen.p_stay,
                ceiling.transition,
                ceiling.head
            );
            dir.finish(name, &cfg, inputs)
        }
        Command::Preprocess { events, mode, jsonl } => {
            let cfg = effective_config(common, None, &[("mode", mode.clone())])?;
            inputs.insert("events".into(), input_digest(events)?);
            let mut ing = ingest_events(events)?;
            for d in &ing.diagnostics {
                log::warn!("{d}");
            }
            let timelines = std::mem::take(&mut ing.timelines);
            let ds = medpred::dataset::build_dataset(timelines, &cfg)?;
            let mut dir = RunDir::create(&common.out)?;
            let path = dir.write("dataset.bin", &ds.to_bytes()?)?;
            if *jsonl {
                dir.write("dataset.jsonl", ds.to_jsonl().as_bytes())?;
            }
            let stats = ds.stats();
            println!("ingested {} rows, {} rejected", ing.rows, ing.rejected);
            print!("{}", stats.to_table());
            println!(
                "vocabularies: {} ICD codes, {} measurement channels, {} combinations; input width {}",
                ds.vocabs.icd.len(),
                ds.vocabs.meas.len(),
                ds.vocabs.combos.len(),
                ds.vocabs.visit_width() + ds.mode.prev_width()
            );
            println!("dataset -> {}", path.display());
            dir.write("cohort_stats.txt", stats.to_table().as_bytes())?;
            dir.finish(name, &cfg, inputs)
        }
        Command::Train {
            dataset,
            model,
            task,
            epochs,
        } => {
            inputs.insert("dataset".into(), input_digest(dataset)?);
            let ds = Dataset::load(dataset)?;
            let base = RunConfig::from_text(&ds.run_config)?;
            let cfg = effective_config(
                common,
                Some(base),
                &[
                    ("model", model.clone()),
                    ("task", task.clone()),
                    ("epochs", epochs.map(|e| e.to_string())),
                ],
            )?;
            let (ckpt, log) = pipeline::fit(&ds, &cfg)?;
            let mut dir = RunDir::create(&common.out)?;
            let file = format!("{}_{}.ckpt", cfg.model.as_str(), cfg.task.as_str());
            let path = dir.write(&file, &ckpt.to_bytes()?)?;
            dir.write_unhashed(
                &format!("{}_{}.train_log.jsonl", cfg.model.as_str(), cfg.task.as_str()),
                log.to_jsonl().as_bytes(),
            )?;
            println!(
                "{} {}: {} epochs, best epoch {} -> {}",
                cfg.model.as_str(),
                cfg.task.as_str(),
                log.epochs.len(),
                log.best_epoch,
                path.display()
            );
            dir.finish(name, &cfg, inputs)
        }
        Command::Eval {
            dataset,
            checkpoint,
            split,
        } => {
            inputs.insert("dataset".into(), input_digest(dataset)?);
            inputs.insert("checkpoint".into(), input_digest(checkpoint)?);
            let ds = Dataset::load(dataset)?;
            let ckpt = Checkpoint::load(checkpoint)?;
            let part: SplitPart = split.parse()?;
            let report = pipeline::report(&ds, &ckpt, part)?;
            let cfg = RunConfig::from_text(&ckpt.run_config)?;
            let mut dir = RunDir::create(&common.out)?;
            let stem = format!("report_{}_{}_{}", report.model, report.task, part.as_str());
            dir.write(&format!("{stem}.json"), report.to_json().as_bytes())?;
            dir.write(&format!("{stem}.txt"), report.to_table().as_bytes())?;
            print!("{}", report.to_table());
            dir.finish(name, &cfg, inputs)
        }
        Command::Predict {
            checkpoint,
            history,
            top_k,
        } => {
            inputs.insert("checkpoint".into(), input_digest(checkpoint)?);
            inputs.insert("history".into(), input_digest(history)?);
            let ckpt = Checkpoint::load(checkpoint)?;
            let ing = ingest_events(history)?;
            if ing.rejected > 0 {
                return Err(medpred::Error::Data(format!("{} malformed history rows", ing.rejected)).into());
            }
            let events: Vec<_> = ing
                .timelines
                .iter()
                .flat_map(|t| t.days.iter().flat_map(|d| d.events.iter().cloned()))
                .collect();
            let out = predict_history(&ckpt, &events, *top_k)?;
            let cfg = RunConfig::from_text(&ckpt.run_config)?;
            let mut dir = RunDir::create(&common.out)?;
            let mut text = serde_json::to_string_pretty(&out)?;
            text.push('\n');
            dir.write("prediction.json", text.as_bytes())?;
            print!("{}", out.to_text());
            dir.finish(name, &cfg, inputs)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<medpred::Error>())
        .map_or(3, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

mod manifest;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, Parser, Subcommand};
use dsc_core::data::embeddings::{apply_embeddings, load_embeddings};
use dsc_core::data::{load_dataset, synth_dataset, Dataset, SynthConfig};
use dsc_core::decoding::{default_max_len, predict, write_predictions, CaptionModel};
use dsc_core::gradcheck::GradCheckSetup;
use dsc_core::metrics::{load_references, references_from_dataset, triplet_average};
use dsc_core::model::{Checkpoint, DualStreamModel};
use dsc_core::training::train_model;

use manifest::Recorder;
use settings::Settings;

/// Pass threshold for `grad-check`.
const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "dsc", version, about = "Dual-stream event boundary captioner")]
struct Cli {
    /// Worker threads (default: one per core). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

// Parsed once per process, so variant size is irrelevant.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset file.
    SynthData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train a model; writes a checkpoint and a loss CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.loss.csv`.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// JSON settings, or a previous run manifest.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pretrained word vectors (whitespace-separated text, width d_emb).
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Greedy captions from one checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Word-level ensemble captions from two or more checkpoints.
    EnsembleGenerate {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score predictions with ROUGE-L and CIDEr-D.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        /// Reference JSONL file.
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        references: Option<PathBuf>,
        /// Use a dataset's own captions as references.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Compare backprop gradients with central differences on a tiny model.
    GradCheck {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 1)]
        layers: usize,
        #[arg(long, default_value_t = 20)]
        vocab: usize,
        #[arg(long, default_value_t = 3)]
        appearance_frames: usize,
        #[arg(long, default_value_t = 2)]
        motion_frames: usize,
        #[arg(long, default_value_t = 4)]
        regions: usize,
        /// Decoder prefix length including the start and field tokens.
        #[arg(long, default_value_t = 4)]
        prefix_len: usize,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn manifest_path(explicit: Option<PathBuf>, out: &Path) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn seed_or_env(seed: Option<u64>) -> Result<u64> {
    Settings {
        seed,
        ..Settings::default()
    }
    .resolve_seed()
}

fn load_data(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn synth_data(seed: Option<u64>, n: usize, out: PathBuf, manifest: Option<PathBuf>) -> Result<()> {
    let mut rec = Recorder::new("synth-data");
    let seed = seed_or_env(seed)?;
    let config = SynthConfig::default();
    write(&out, synth_dataset(seed, n, &config)?)?;
    rec.resolved(serde_json::json!({ "seed": seed, "n": n }))?;
    rec.seed("seed", seed);
    rec.output("dataset", &out);
    rec.write(&manifest_path(manifest, &out))
}

#[allow(clippy::too_many_arguments)]
fn train(
    data: PathBuf,
    out: PathBuf,
    loss_csv: Option<PathBuf>,
    config: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    manifest: Option<PathBuf>,
    flags: Settings,
) -> Result<()> {
    let mut rec = Recorder::new("train");
    let ds = load_data(&data)?;
    rec.input("dataset", &data);
    let settings = match &config {
        Some(p) => {
            rec.input("config", p);
            Settings::from_file(p)?.overlay(&flags)
        }
        None => flags,
    };
    let (model_cfg, train_cfg) = settings
        .resolve(&ds.header, ds.vocab.len())
        .context("resolving configuration")?;
    let mut model = DualStreamModel::new(model_cfg.clone(), train_cfg.seed)?;
    if let Some(p) = &embeddings {
        let vectors = load_embeddings(p, model_cfg.d_emb)?;
        let id = model
            .params
            .store
            .find("embed.token")
            .context("token embedding table")?;
        let hits = apply_embeddings(model.params.store.get_mut(id), &ds.vocab, &vectors)?;
        eprintln!("pretrained vectors for {hits} of {} tokens", ds.vocab.len());
        rec.input("embeddings", p);
    }
    let report = train_model(&mut model, &ds, &train_cfg).context("training")?;
    let loss_csv = loss_csv.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".loss.csv");
        PathBuf::from(s)
    });
    let ck = Checkpoint::new(model, ds.vocab.clone(), ds.header.boundary_types.clone())?;
    ck.save(&out)?;
    write(&loss_csv, report.loss_csv())?;
    if let Some(last) = report.epoch_losses.last() {
        eprintln!("{} steps, final epoch mean loss {last:.6}", report.steps.len());
    }
    rec.resolved(Settings::from_resolved(settings.profile(), &model_cfg, &train_cfg))?;
    rec.seed("seed", train_cfg.seed);
    rec.output("checkpoint", &out);
    rec.output("loss_csv", &loss_csv);
    rec.write(&manifest_path(manifest, &out))
}

fn generate(
    command: &str,
    checkpoints: &[PathBuf],
    data: &Path,
    out: &Path,
    max_len: Option<usize>,
    manifest: Option<PathBuf>,
) -> Result<()> {
    let mut rec = Recorder::new(command);
    let cks = checkpoints
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<Vec<_>>>()?;
    let ds = load_data(data)?;
    let first = &cks[0];
    for (ck, p) in cks.iter().zip(checkpoints) {
        if ck.vocabulary != first.vocabulary {
            bail!(
                "{} has a different vocabulary from {}",
                p.display(),
                checkpoints[0].display()
            );
        }
        if ck.boundary_types != ds.header.boundary_types {
            bail!(
                "{} was trained with boundary types that differ from {}",
                p.display(),
                data.display()
            );
        }
        rec.input("checkpoint", p);
    }
    rec.input("dataset", data);
    let limit = cks.iter().map(|c| c.model.config.max_caption_len).min().unwrap_or(0);
    let max_len = max_len.unwrap_or_else(|| default_max_len(limit));
    let models: Vec<&dyn CaptionModel> = cks.iter().map(|c| &c.model as &dyn CaptionModel).collect();
    let preds = predict(&models, &first.vocabulary, &ds.samples, max_len).context("decoding")?;
    write(out, write_predictions(&preds)?)?;
    rec.resolved(serde_json::json!({ "max_len": max_len, "models": cks.len() }))?;
    rec.output("predictions", out);
    rec.write(&manifest_path(manifest, out))
}

fn evaluate(
    predictions: PathBuf,
    references: Option<PathBuf>,
    data: Option<PathBuf>,
    out: PathBuf,
    manifest: Option<PathBuf>,
) -> Result<()> {
    let mut rec = Recorder::new("evaluate");
    let preds = dsc_core::decoding::load_predictions(&predictions)
        .with_context(|| format!("loading predictions {}", predictions.display()))?;
    rec.input("predictions", &predictions);
    let refs = match (references, data) {
        (Some(r), _) => {
            rec.input("references", &r);
            load_references(&r).with_context(|| format!("loading references {}", r.display()))?
        }
        (None, Some(d)) => {
            rec.input("dataset", &d);
            references_from_dataset(&load_data(&d)?)
        }
        (None, None) => bail!("one of --references or --data is required"),
    };
    let report = triplet_average(&preds, &refs).context("evaluation")?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write(&out, text)?;
    eprintln!(
        "ROUGE-L {:.4}  CIDEr-D {:.4}  (n = {})",
        report.rouge_l.average, report.cider_d.average, report.corpus_size
    );
    rec.resolved(serde_json::Value::Null)?;
    rec.output("report", &out);
    rec.write(&manifest_path(manifest, &out))
}

fn grad_check(setup: GradCheckSetup, manifest: Option<PathBuf>) -> Result<bool> {
    let mut rec = Recorder::new("grad-check");
    let report = setup.run().context("gradient check")?;
    for g in &report.groups {
        println!("{:<36} {:>8} {:.3e}", g.group, g.entries, g.max_rel_error);
    }
    let worst = report.max_rel_error();
    let pass = worst < GRAD_CHECK_TOLERANCE;
    println!(
        "max relative error {worst:.3e} ({})",
        if pass { "pass" } else { "FAIL" }
    );
    if let Some(p) = manifest {
        rec.resolved(serde_json::json!({
            "seed": setup.seed, "d": setup.d, "heads": setup.heads, "layers": setup.layers,
            "vocab": setup.vocab_size, "appearance_frames": setup.appearance_frames,
            "motion_frames": setup.motion_frames, "regions": setup.regions, "prefix_len": setup.prefix_len,
            "max_rel_error": worst,
        }))?;
        rec.seed("seed", setup.seed);
        rec.write(&p)?;
    }
    Ok(pass)
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("starting worker pool")?;
    }
    match cli.command {
        Command::SynthData { seed, n, out, manifest } => synth_data(seed, n, out, manifest)?,
        Command::Train {
            data,
            out,
            loss_csv,
            config,
            embeddings,
            manifest,
            settings,
        } => train(data, out, loss_csv, config, embeddings, manifest, settings)?,
        Command::Generate {
            checkpoint,
            data,
            out,
            max_len,
            manifest,
        } => generate("generate", &[checkpoint], &data, &out, max_len, manifest)?,
        Command::EnsembleGenerate {
            checkpoints,
            data,
            out,
            max_len,
            manifest,
        } => {
            if checkpoints.len() < 2 {
                Cli::command()
                    .error(
                        clap::error::ErrorKind::TooFewValues,
                        "ensemble-generate needs at least two --checkpoint values",
                    )
                    .exit();
            }
            generate("ensemble-generate", &checkpoints, &data, &out, max_len, manifest)?
        }
        Command::Evaluate {
            predictions,
            references,
            data,
            out,
            manifest,
        } => evaluate(predictions, references, data, out, manifest)?,
        Command::GradCheck {
            seed,
            d,
            heads,
            layers,
            vocab,
            appearance_frames,
            motion_frames,
            regions,
            prefix_len,
            manifest,
        } => {
            let setup = GradCheckSetup {
                seed: seed_or_env(seed)?,
                d,
                heads,
                layers,
                vocab_size: vocab,
                appearance_frames,
                motion_frames,
                regions,
                prefix_len,
            };
            if !grad_check(setup, manifest)? {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

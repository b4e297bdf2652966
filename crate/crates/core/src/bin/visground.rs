use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use visground::data::{generate_synthetic, load_dataset_with_vocab, Split, SyntheticConfig};
use visground::evaluation::{evaluate, write_jsonl, DistributionMode, EvalOptions};
use visground::model::{Model, ModelConfig};
use visground::training::{load_checkpoint, train, TrainConfig, CHECKPOINT_FILE, METRICS_FILE};
use visground::Error;

const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Parser)]
#[command(name = "visground", version, about = "Prior/posterior visual grounding for visual dialog")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic grounding dataset.
    GenSynth(GenSynthArgs),
    /// Train a model and write checkpoints plus a metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint using the prior only.
    Eval(EvalArgs),
}

/// Fills every unset field of `self` from `file`.
macro_rules! merge_fields {
    ($self:ident, $file:ident; $($f:ident),+ $(,)?) => {
        $( if $self.$f.is_none() { $self.$f = $file.$f; } )+
    };
}

#[derive(Args, Default, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
struct GenSynthArgs {
    /// JSON file with any of these flags as keys; flags win.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    val_images: Option<usize>,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    colors: Option<usize>,
    #[arg(long)]
    shapes: Option<usize>,
    #[arg(long)]
    materials: Option<usize>,
    #[arg(long)]
    sizes: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Default, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Dataset JSON with `train` and `val` dialogs.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// gen, disc or multitask.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    kl_weight: Option<f64>,
    /// attn_kl, attn_mse, image_kl, image_mse or attn_kl_image_mse.
    #[arg(long)]
    bridge: Option<String>,
    #[arg(long)]
    detach_posterior: Option<bool>,
    /// columns or rows.
    #[arg(long)]
    axis_mode: Option<String>,
    /// post-train or always-prior.
    #[arg(long)]
    decoder_features: Option<String>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    decay_factor: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Default, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// train, val or test.
    #[arg(long)]
    split: Option<String>,
    /// mean, random or oracle.
    #[arg(long)]
    ablate: Option<String>,
    /// Write one grounding record per (image, round) here.
    #[arg(long)]
    export_attention: Option<PathBuf>,
    /// Write one candidate-score record per (image, round) here.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Also write the report JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Pipeline(#[from] Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Pipeline(e) => match e {
                Error::Divergence { .. } | Error::NonFiniteGradient(_) => 4,
                Error::Contract(_) | Error::Unsatisfiable(_) => 2,
                _ => 3,
            },
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Serialize)]
struct RunManifest {
    command: &'static str,
    config: serde_json::Value,
    seed: u64,
    code_version: &'static str,
    started_unix: u64,
    finished_unix: u64,
    artifacts: Vec<PathBuf>,
}

impl RunManifest {
    fn write(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(RUN_MANIFEST);
        let mut text = serde_json::to_string_pretty(self).map_err(Error::from)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::File { path, source: e })?;
        Ok(())
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Parses a flag value through the type's serde string form.
fn parse_enum<T: DeserializeOwned>(flag: &str, value: &str) -> CliResult<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| CliError::Usage(format!("invalid value `{value}` for --{flag}")))
}

fn required<T>(value: Option<T>, flag: &str) -> CliResult<T> {
    value.ok_or_else(|| CliError::Usage(format!("missing required flag --{flag}")))
}

fn gen_synth(mut args: GenSynthArgs) -> CliResult<()> {
    let file: GenSynthArgs = read_config(args.config.as_deref())?;
    merge_fields!(args, file; out, images, val_images, objects, colors, shapes, materials, sizes,
        rounds, candidates, noise, feature_dim, seed);
    let out = required(args.out, "out")?;
    let d = SyntheticConfig::default();
    let cfg = SyntheticConfig {
        num_images: args.images.unwrap_or(d.num_images),
        val_images: args.val_images.unwrap_or(d.val_images),
        objects: args.objects.unwrap_or(d.objects),
        colors: args.colors.unwrap_or(d.colors),
        shapes: args.shapes.unwrap_or(d.shapes),
        materials: args.materials.unwrap_or(d.materials),
        sizes: args.sizes.unwrap_or(d.sizes),
        rounds: args.rounds.unwrap_or(d.rounds),
        candidates: args.candidates.unwrap_or(d.candidates),
        noise: args.noise.unwrap_or(d.noise),
        feature_dim: args.feature_dim.unwrap_or(d.feature_dim),
        seed: args.seed.unwrap_or(d.seed),
        ..d
    };
    cfg.validate()?;
    let started = unix_now();
    let corpus = generate_synthetic(&cfg)?;
    let json = corpus.save(&out)?;
    let features = out.join(corpus.file.features.as_deref().unwrap_or("features.bin"));
    println!("wrote {} and {}", json.display(), features.display());
    RunManifest {
        command: "gen-synth",
        config: serde_json::to_value(&cfg).map_err(Error::from)?,
        seed: cfg.seed,
        code_version: env!("CARGO_PKG_VERSION"),
        started_unix: started,
        finished_unix: unix_now(),
        artifacts: vec![json, features],
    }
    .write(&out)
}

fn train_cmd(mut args: TrainArgs) -> CliResult<()> {
    let file: TrainArgs = read_config(args.config.as_deref())?;
    merge_fields!(args, file; data, out, loss, kl_weight, bridge, detach_posterior, axis_mode,
        decoder_features, batch, epochs, lr, decay_factor, seed);
    let data = required(args.data, "data")?;
    let out = required(args.out, "out")?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        loss_mode: args.loss.as_deref().map(|v| parse_enum("loss", v)).transpose()?.unwrap_or(d.loss_mode),
        kl_weight: args.kl_weight.unwrap_or(d.kl_weight),
        bridge_variant: args.bridge.as_deref().map(|v| parse_enum("bridge", v)).transpose()?.unwrap_or(d.bridge_variant),
        detach_posterior: args.detach_posterior.unwrap_or(d.detach_posterior),
        decoder_features: args
            .decoder_features
            .as_deref()
            .map(|v| parse_enum("decoder-features", v))
            .transpose()?
            .unwrap_or(d.decoder_features),
        base_lr: args.lr.unwrap_or(d.base_lr),
        decay_factor: args.decay_factor.unwrap_or(d.decay_factor),
        max_epochs: args.epochs.unwrap_or(d.max_epochs),
        batch_size: args.batch.unwrap_or(d.batch_size),
        seed: args.seed.unwrap_or(d.seed),
        ..d
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut model_cfg = ModelConfig::default();
    if let Some(v) = args.axis_mode.as_deref() {
        model_cfg.axis_mode = parse_enum("axis-mode", v)?;
    }

    let started = unix_now();
    let train_ds = load_dataset_with_vocab(&data, Split::Train, None)?;
    let val_ds = load_dataset_with_vocab(&data, Split::Val, Some(train_ds.vocab.clone()))?;
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::Contract(format!("{} needs both train and val dialogs", data.display())).into());
    }
    model_cfg.vocab_size = train_ds.vocab.len();
    let mut model = Model::new(model_cfg.clone(), cfg.seed)?;
    let report = train(&mut model, &train_ds, &val_ds, &cfg, Some(&out))?;
    for e in &report.epochs {
        println!("epoch {:2}  lr {:.6}  L_KL {:.4}  val mrr {:.4}", e.epoch, e.lr, e.l_kl, e.val.mrr);
    }
    println!("best epoch {} (val mrr {:.4})", report.best_epoch, report.best_val_mrr);
    RunManifest {
        command: "train",
        config: serde_json::json!({ "data": data, "train": cfg, "model": model_cfg }),
        seed: cfg.seed,
        code_version: env!("CARGO_PKG_VERSION"),
        started_unix: started,
        finished_unix: unix_now(),
        artifacts: vec![out.join(METRICS_FILE), out.join(CHECKPOINT_FILE)],
    }
    .write(&out)
}

fn eval_cmd(mut args: EvalArgs) -> CliResult<()> {
    let file: EvalArgs = read_config(args.config.as_deref())?;
    merge_fields!(args, file; ckpt, data, split, ablate, export_attention, predictions, report, seed);
    let ckpt = required(args.ckpt, "ckpt")?;
    let data = required(args.data, "data")?;
    let split: Split = args.split.as_deref().map(|v| parse_enum("split", v)).transpose()?.unwrap_or(Split::Val);
    let distribution = match args.ablate.as_deref() {
        None => DistributionMode::Learned,
        Some(v @ ("mean" | "random" | "oracle")) => parse_enum("ablate", v)?,
        Some(v) => return Err(CliError::Usage(format!("invalid value `{v}` for --ablate"))),
    };

    let (model, manifest) = load_checkpoint(&ckpt)?;
    let ds = load_dataset_with_vocab(&data, split, Some(Arc::new(manifest.vocab.clone())))?;
    let opts = EvalOptions {
        loss_mode: manifest.train.loss_mode,
        distribution,
        seed: args.seed.unwrap_or(manifest.train.seed),
        ..EvalOptions::default()
    };
    let result = evaluate(&model, &ds, &opts)?;
    if let Some(path) = &args.export_attention {
        write_jsonl(path, &result.attention)?;
    }
    if let Some(path) = &args.predictions {
        write_jsonl(path, &result.predictions)?;
    }
    let text = serde_json::to_string_pretty(&result.report).map_err(Error::from)?;
    if let Some(path) = &args.report {
        std::fs::write(path, format!("{text}\n")).map_err(|e| Error::File {
            path: path.clone(),
            source: e,
        })?;
    }
    println!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

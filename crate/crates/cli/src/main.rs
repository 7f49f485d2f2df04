use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::warn;

use binaural_intel::corpus::{load_audiograms, load_binaural_wav, load_manifest, write_mono_wav, Ear};
use binaural_intel::evaluation::{evaluate, export_scatter, read_predictions, scored_records, write_predictions};
use binaural_intel::features::{provider_from_name, EmbeddingProvider, FrontendConfig};
use binaural_intel::model::checkpoint::read_meta;
use binaural_intel::model::{load_checkpoint, FusionMode};
use binaural_intel::pipeline::{simulate_ear, write_feature_cache, FeatureContext, FeatureSource};
use binaural_intel::synth::{generate, SynthConfig};
use binaural_intel::training::{train, train_single_branch, TrainConfig};
use binaural_intel::{Error, Result};

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Intelligibility prediction for binaural hearing-aid listeners.
#[derive(Parser, Debug)]
#[command(name = "bintel", version)]
struct Cli {
    /// Random seed; overrides the `seed` key of any config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a small synthetic corpus (WAVs, manifest, audiograms).
    Synth(SynthArgs),
    /// Apply a listener's hearing loss to one ear of a binaural WAV.
    SimulateHl(SimulateArgs),
    /// Extract and cache per-ear features for every manifest row.
    Features(FeaturesArgs),
    /// Train a model and write a checkpoint plus a JSON training report.
    Train(TrainArgs),
    /// Predict scores for every manifest row.
    Predict(PredictArgs),
    /// Compute RMSE, STDERR and LCC from a predictions file.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out_dir: PathBuf,
    /// Number of training utterances.
    #[arg(long, default_value_t = 8)]
    train: usize,
    /// Number of dev utterances.
    #[arg(long, default_value_t = 2)]
    dev: usize,
    /// Number of unlabelled test utterances.
    #[arg(long, default_value_t = 2)]
    test: usize,
    /// Utterance length in seconds.
    #[arg(long, default_value_t = 0.5)]
    duration: f64,
    /// Sample rate of the generated WAVs.
    #[arg(long, default_value_t = 16_000)]
    rate: u32,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Two-channel input WAV.
    #[arg(long = "in")]
    input: PathBuf,
    /// Audiogram JSON file.
    #[arg(long)]
    audiogram: PathBuf,
    /// Listener whose audiogram to apply.
    #[arg(long)]
    listener: String,
    /// Ear to process.
    #[arg(long)]
    ear: Ear,
    /// Output mono WAV (16-bit).
    #[arg(long)]
    out: PathBuf,
    /// Enable spectral smearing.
    #[arg(long)]
    smearing: bool,
}

#[derive(Args, Debug)]
struct SourceArgs {
    /// Manifest CSV (utterance_id,wav_path,listener_id,correctness,split).
    #[arg(long)]
    manifest: PathBuf,
    /// Audiogram JSON file.
    #[arg(long)]
    audiograms: PathBuf,
    /// Embedding provider: `mel-proxy` or `precomputed`.
    #[arg(long)]
    provider: String,
    /// Embedding archive directory for the `precomputed` provider.
    #[arg(long)]
    archive: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FeaturesArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Directory for the `<utterance>.<ear>.feat` files.
    #[arg(long)]
    out_dir: PathBuf,
    /// Training config (frame geometry and smearing are read from it).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Rewrite files even when up to date.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Training config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to write (best dev RMSE).
    #[arg(long)]
    out: PathBuf,
    /// Training report path; defaults to the checkpoint path with `.report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Read cached features written by `features` instead of extracting.
    #[arg(long)]
    features_dir: Option<PathBuf>,
    /// Train a single-ear model instead of the two-branch model.
    #[arg(long)]
    single_ear: Option<Ear>,
    /// Overrides `fusion_mode`.
    #[arg(long)]
    fusion_mode: Option<FusionMode>,
    /// Overrides `max_epochs`.
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Overrides `learning_rate`.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Overrides `batch_size`.
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Checkpoint to load.
    #[arg(long)]
    ckpt: PathBuf,
    /// Output predictions CSV.
    #[arg(long)]
    out: PathBuf,
    /// Read cached features written by `features` instead of extracting.
    #[arg(long)]
    features_dir: Option<PathBuf>,
    /// Enable spectral smearing (must match training).
    #[arg(long)]
    smearing: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Predictions CSV (utterance_id,predicted,truth).
    #[arg(long)]
    preds: PathBuf,
    /// Output metrics JSON.
    #[arg(long)]
    out: PathBuf,
    /// Optional scatter CSV (utterance_id,truth,predicted).
    #[arg(long)]
    scatter: Option<PathBuf>,
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn open_provider(args: &SourceArgs) -> Result<Box<dyn EmbeddingProvider>> {
    provider_from_name(&args.provider, args.archive.as_deref())
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn cmd_synth(args: &SynthArgs, seed: Option<u64>) -> Result<()> {
    let cfg = SynthConfig {
        num_train: args.train,
        num_dev: args.dev,
        num_test: args.test,
        duration_s: args.duration,
        sample_rate_hz: args.rate,
        seed: seed.unwrap_or(0),
    };
    let corpus = generate(&cfg, &args.out_dir)?;
    println!("wrote {} utterances to {}", corpus.records.len(), args.out_dir.display());
    Ok(())
}

fn cmd_simulate_hl(args: &SimulateArgs) -> Result<()> {
    let profiles = load_audiograms(&args.audiogram)?;
    let profile = profiles
        .get(&args.listener)
        .ok_or_else(|| Error::UnknownListener(args.listener.clone()))?;
    let sig = load_binaural_wav(&args.input)?;
    let out = simulate_ear(&sig, args.ear, profile, args.smearing)?;
    write_mono_wav(&args.out, &out, 16)
}

fn cmd_features(args: &FeaturesArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), seed)?;
    let provider = open_provider(&args.source)?;
    let records = load_manifest(&args.source.manifest)?;
    let profiles = load_audiograms(&args.source.audiograms)?;
    let ctx = FeatureContext {
        manifest_dir: manifest_dir(&args.source.manifest),
        profiles: &profiles,
        provider: provider.as_ref(),
        frontend: FrontendConfig {
            window: cfg.model.window,
            hop: cfg.model.hop,
            ..FrontendConfig::default()
        },
        smearing: cfg.smearing_enabled,
    };
    let summary = write_feature_cache(&ctx, &records, &args.source.audiograms, &args.out_dir, args.force)?;
    println!("{} files written, {} up to date", summary.written, summary.skipped);
    Ok(())
}

fn cmd_train(args: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref(), seed)?;
    if let Some(f) = args.fusion_mode {
        cfg.fusion_mode = f;
    }
    if let Some(n) = args.max_epochs {
        cfg.max_epochs = n;
    }
    if let Some(lr) = args.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    let provider = open_provider(&args.source)?;
    let records = load_manifest(&args.source.manifest)?;
    let profiles = load_audiograms(&args.source.audiograms)?;
    let source = match &args.features_dir {
        Some(dir) => FeatureSource::Cache(dir.clone()),
        None => FeatureSource::Compute(FeatureContext {
            manifest_dir: manifest_dir(&args.source.manifest),
            profiles: &profiles,
            provider: provider.as_ref(),
            frontend: FrontendConfig {
                window: cfg.model.window,
                hop: cfg.model.hop,
                ..FrontendConfig::default()
            },
            smearing: cfg.smearing_enabled,
        }),
    };
    binaural_intel::corpus::check_listeners(&records, &profiles)?;
    let outcome = match args.single_ear {
        Some(ear) => train_single_branch(&cfg, &records, &source, ear, &args.out)?,
        None => train(&cfg, &records, &source, &args.out)?,
    };
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| args.out.with_extension("report.json"));
    outcome.report.save(&report_path)?;
    println!(
        "best dev RMSE {:.3} at epoch {}",
        outcome.report.best_dev_rmse, outcome.report.best_epoch
    );
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let (model, provider_id) = load_checkpoint(&args.ckpt)?;
    let provider = open_provider(&args.source)?;
    if let Some(dim) = provider.dim() {
        if dim != model.config.ssl_dim {
            return Err(Error::Checkpoint(format!(
                "model expects {}-dimensional embeddings, provider `{}` gives {dim}",
                model.config.ssl_dim,
                provider.id()
            )));
        }
    }
    let records = load_manifest(&args.source.manifest)?;
    let profiles = load_audiograms(&args.source.audiograms)?;
    let source = match &args.features_dir {
        Some(dir) => FeatureSource::Cache(dir.clone()),
        None => FeatureSource::Compute(FeatureContext {
            manifest_dir: manifest_dir(&args.source.manifest),
            profiles: &profiles,
            provider: provider.as_ref(),
            frontend: model.config.frontend(),
            smearing: args.smearing,
        }),
    };
    binaural_intel::corpus::check_listeners(&records, &profiles)?;
    let rows = binaural_intel::training::predict_records(&model, &provider_id, &records, &source)?;
    write_predictions(&args.out, &rows)
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let rows = read_predictions(&args.preds)?;
    let (records, skipped) = scored_records(&rows)?;
    if skipped > 0 {
        warn!("{skipped} rows without truth excluded");
    }
    let report = evaluate(&records)?;
    report.save(&args.out)?;
    if let Some(p) = &args.scatter {
        export_scatter(&records, p)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, cli.seed),
        Command::SimulateHl(a) => cmd_simulate_hl(a),
        Command::Features(a) => cmd_features(a, cli.seed),
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(meta) = checkpoint_hint(&cli) {
                eprintln!("{meta}");
            }
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME })
        }
    }
}

/// Extra context for predict failures: what the checkpoint was trained on.
fn checkpoint_hint(cli: &Cli) -> Option<String> {
    let Command::Predict(a) = &cli.command else {
        return None;
    };
    let meta = read_meta(&a.ckpt).ok()?;
    Some(format!(
        "note: checkpoint trained with provider `{}`, {}-dimensional embeddings",
        meta.provider_id, meta.config.ssl_dim
    ))
}

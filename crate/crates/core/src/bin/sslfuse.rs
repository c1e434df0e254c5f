//! `sslfuse`: feature extraction, synthetic data, training, evaluation and
//! gate analysis from the command line.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors
//! (including input files that do not exist).

use std::fmt::Write as _;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sslfuse::data::{read_manifest, write_features, Manifest};
use sslfuse::dsp::{canonicalize_length, DEFAULT_CLIP_LEN};
use sslfuse::evaluation::{aggregate_gates, compute_eer, read_traces, score_examples, write_traces, GatePooling};
use sslfuse::features::{extract, FeatureKind, SpectralConfig};
use sslfuse::fusion::Strategy;
use sslfuse::model::{gradcheck_detector, Detector, Example, FeatureLoader, ModelConfig};
use sslfuse::synth::generate_corpus;
use sslfuse::training::{metrics_to_csv, TrainConfig, TrainedModel, Trainer};
use sslfuse::wav::read_wav;

const GRADCHECK_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(
    name = "sslfuse",
    version,
    about = "Spectral + SSL feature fusion for audio anti-spoofing"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
struct Global {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory for outputs whose location is not given explicitly.
    #[arg(long, global = true, env = "SSLFUSE_OUT_DIR", default_value = "runs")]
    out_dir: PathBuf,
    /// Log filter, e.g. `info`, `debug` or `sslfuse=trace`.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract MFCC, LFCC or CQCC features to SFF1 files.
    Extract(ExtractArgs),
    /// Generate a synthetic bona fide / spoof corpus with pseudo-SSL features.
    SynthData(SynthArgs),
    /// Train a detector.
    Train(TrainArgs),
    /// Score a manifest with a trained checkpoint and report the EER.
    Eval(EvalArgs),
    /// Average gate weights per feature kind and dataset.
    AnalyzeGates(GateArgs),
    /// Finite-difference gradient check for one fusion strategy.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Serialize)]
struct ExtractArgs {
    /// A single WAV file.
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    wav: Option<PathBuf>,
    /// A manifest; one feature file per entry.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "mfcc")]
    feature: FeatureKind,
    /// Output file for `--wav`, output directory for `--manifest`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep the clip length instead of padding or cropping to 64,600 samples.
    #[arg(long)]
    keep_length: bool,
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    n_train: usize,
    #[arg(long, default_value_t = 100)]
    n_eval: usize,
    /// Corpus directory (default: `<out-dir>/corpus`).
    #[arg(long)]
    dir: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Held-out manifest used for best-epoch selection.
    #[arg(long)]
    eval_manifest: Option<PathBuf>,
    #[arg(long, default_value = "gating")]
    strategy: Strategy,
    #[arg(long, default_value = "mfcc")]
    feature: FeatureKind,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Add weight decay to the gradient instead of decaying the weights directly.
    #[arg(long)]
    coupled_weight_decay: bool,
    #[arg(long)]
    step_size: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Give the SF→SSL direction of mutual attention its own projections.
    #[arg(long)]
    separate_mutual_weights: bool,
    /// Independent runs with seeds `seed, seed+1, ...`.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    runs: u64,
    /// Continue from a `state.bin` written by an earlier run.
    #[arg(long, conflicts_with = "runs")]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Score CSV (default: `<out-dir>/scores.csv`).
    #[arg(long)]
    scores_out: Option<PathBuf>,
    /// Directory for per-utterance gate traces of gating models
    /// (default: `traces/` next to the scores).
    #[arg(long)]
    traces_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct GateArgs {
    /// A `traces.tsv` index or the directory holding one; repeatable.
    #[arg(long, required = true)]
    traces: Vec<PathBuf>,
    /// Report CSV (default: `<out-dir>/gates.csv`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Average within each utterance before averaging across utterances.
    #[arg(long)]
    per_utterance: bool,
}

#[derive(Debug, Args, Serialize)]
struct GradcheckArgs {
    #[arg(long)]
    strategy: Strategy,
    /// Number of seeds, starting at `--seed`.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long)]
    separate_mutual_weights: bool,
}

/// A semantically invalid invocation that clap cannot catch.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        let not_found = match cause.downcast_ref::<sslfuse::Error>() {
            Some(sslfuse::Error::Io { source, .. }) => source.kind() == ErrorKind::NotFound,
            _ => cause
                .downcast_ref::<std::io::Error>()
                .is_some_and(|e| e.kind() == ErrorKind::NotFound),
        };
        if not_found {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.global.log_level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Extract(a) => cmd_extract(g, a),
        Command::SynthData(a) => cmd_synth(g, a),
        Command::Train(a) => cmd_train(g, a),
        Command::Eval(a) => cmd_eval(g, a),
        Command::AnalyzeGates(a) => cmd_analyze_gates(g, a),
        Command::Gradcheck(a) => cmd_gradcheck(g, a),
    }
}

fn require_file(p: &Path) -> anyhow::Result<()> {
    if !p.exists() {
        return Err(std::io::Error::new(ErrorKind::NotFound, "no such file or directory"))
            .with_context(|| p.display().to_string());
    }
    Ok(())
}

fn create_dir(p: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

#[derive(Serialize)]
struct Snapshot<'a, T: Serialize> {
    command: &'a str,
    global: &'a Global,
    args: &'a T,
    #[serde(skip_serializing_if = "Option::is_none")]
    resolved: Option<serde_json::Value>,
}

fn write_snapshot<T: Serialize>(
    path: &Path,
    command: &str,
    global: &Global,
    args: &T,
    resolved: Option<serde_json::Value>,
) -> anyhow::Result<()> {
    let snap = Snapshot {
        command,
        global,
        args,
        resolved,
    };
    let mut text = serde_json::to_string_pretty(&snap)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_extract(g: &Global, a: &ExtractArgs) -> anyhow::Result<()> {
    let cfg = SpectralConfig::new(a.feature);
    let resolved = serde_json::to_value(&cfg)?;
    if let Some(wav) = &a.wav {
        require_file(wav)?;
        let out = a.out.clone().unwrap_or_else(|| {
            let stem = wav
                .file_stem()
                .map_or("clip".into(), |s| s.to_string_lossy().into_owned());
            g.out_dir.join(format!("{stem}.{}.sff", a.feature))
        });
        let dir = parent_dir(&out);
        create_dir(&dir)?;
        let mut w = read_wav(wav)?;
        if !a.keep_length {
            w = canonicalize_length(&w, DEFAULT_CLIP_LEN);
        }
        let fm = extract(&w, &cfg)?;
        write_features(&out, &fm)?;
        write_snapshot(&dir.join("extract.config.json"), "extract", g, a, Some(resolved))?;
        println!("{}: {}x{} {}", out.display(), fm.frames(), fm.dim(), a.feature);
        return Ok(());
    }
    let manifest_path = a.manifest.as_ref().expect("clap enforces one input");
    require_file(manifest_path)?;
    let manifest = read_manifest(manifest_path)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| g.out_dir.join(format!("features-{}", a.feature)));
    create_dir(&out)?;
    let loader = FeatureLoader::new(cfg.clone());
    for e in &manifest.entries {
        let mut w = loader.audio(&manifest, &e.source, e.label)?;
        if a.keep_length {
            if let sslfuse::data::AudioSource::Wav(p) = &e.source {
                w = read_wav(manifest.resolve(p))?;
            }
        }
        let fm = extract(&w, &cfg).with_context(|| e.utt_id.clone())?;
        let path = out.join(format!("{}.sff", e.utt_id));
        write_features(&path, &fm)?;
        println!("{}: {}x{} {}", path.display(), fm.frames(), fm.dim(), a.feature);
    }
    write_snapshot(&out.join("extract.config.json"), "extract", g, a, Some(resolved))?;
    println!("{} feature files written to {}", manifest.len(), out.display());
    Ok(())
}

fn cmd_synth(g: &Global, a: &SynthArgs) -> anyhow::Result<()> {
    let dir = a.dir.clone().unwrap_or_else(|| g.out_dir.join("corpus"));
    create_dir(&dir)?;
    let corpus = generate_corpus(&dir, a.n_train, a.n_eval, g.seed)?;
    write_snapshot(&dir.join("synth-data.config.json"), "synth-data", g, a, None)?;
    println!(
        "{} train clips -> {}\n{} eval clips -> {}",
        corpus.train.len(),
        corpus.train_path.display(),
        corpus.eval.len(),
        corpus.eval_path.display()
    );
    Ok(())
}

fn load_examples(path: &Path, config: &ModelConfig) -> anyhow::Result<Vec<Example>> {
    require_file(path)?;
    let manifest: Manifest = read_manifest(path)?;
    let mut loader = FeatureLoader::new(SpectralConfig::new(config.feature));
    let examples = loader
        .load(&manifest, config.uses_sf(), config.uses_ssl())
        .with_context(|| format!("loading {}", path.display()))?;
    log::info!("loaded {} utterances from {}", examples.len(), path.display());
    Ok(examples)
}

fn prepare_all(model: &Detector, set: &[Example]) -> anyhow::Result<Vec<Example>> {
    Ok(set.iter().map(|e| model.prepare(e)).collect::<sslfuse::Result<_>>()?)
}

fn train_config(a: &TrainArgs, seed: u64) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        lr: a.lr.unwrap_or(d.lr),
        weight_decay: a.weight_decay.unwrap_or(d.weight_decay),
        decoupled_weight_decay: !a.coupled_weight_decay,
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        epochs: a.epochs.unwrap_or(d.epochs),
        step_size: a.step_size.unwrap_or(d.step_size),
        gamma: a.gamma.unwrap_or(d.gamma),
        seed,
        ..d
    }
}

/// Runs `trainer` to completion in `dir`, saving `state.bin` after every
/// epoch, then writes the best checkpoint and the metrics.
fn fit_in(dir: &Path, mut trainer: Trainer, train: &[Example], eval: &[Example]) -> anyhow::Result<TrainedModel> {
    let state = dir.join("state.bin");
    let metrics = dir.join("metrics.csv");
    let outcome = trainer.fit(train, eval, |t| {
        t.save(&state)?;
        let path = &metrics;
        fs::write(path, metrics_to_csv(&t.metrics)).map_err(|e| sslfuse::Error::Io {
            path: path.clone(),
            source: e,
        })
    })?;
    if trainer.metrics.is_empty() {
        trainer.save(&state)?;
        fs::write(&metrics, metrics_to_csv(&[]))?;
    }
    outcome.model.save(dir.join("checkpoint.bin"))?;
    match (outcome.best_epoch, outcome.best_eer) {
        (Some(ep), Some(eer)) => println!("{}: best epoch {ep}, eval EER {:.2}%", dir.display(), 100.0 * eer),
        (Some(ep), None) => println!("{}: trained to epoch {ep}", dir.display()),
        _ => println!("{}: no epochs run, initial parameters saved", dir.display()),
    }
    Ok(outcome)
}

fn cmd_train(g: &Global, a: &TrainArgs) -> anyhow::Result<()> {
    create_dir(&g.out_dir)?;
    if let Some(state) = &a.resume {
        require_file(state)?;
        let mut trainer = Trainer::load(state)?;
        if let Some(epochs) = a.epochs {
            trainer.cfg.epochs = epochs;
        }
        let config = trainer.model.config;
        if config.strategy != a.strategy || config.feature != a.feature {
            log::warn!(
                "resuming a {} / {} run; --strategy and --feature are ignored",
                config.strategy,
                config.feature
            );
        }
        let resolved = serde_json::json!({ "model": config, "train": trainer.cfg, "completed_epochs": trainer.epoch });
        write_snapshot(&g.out_dir.join("config.json"), "train", g, a, Some(resolved))?;
        let train = prepare_all(&trainer.model, &load_examples(&a.manifest, &config)?)?;
        let eval = match &a.eval_manifest {
            Some(p) => prepare_all(&trainer.model, &load_examples(p, &config)?)?,
            None => vec![],
        };
        fit_in(&g.out_dir, trainer, &train, &eval)?;
        return Ok(());
    }

    let base = ModelConfig::new(a.strategy, a.feature);
    let config = ModelConfig {
        dim: a.dim.unwrap_or(base.dim),
        hidden: a.hidden.unwrap_or(base.hidden),
        shared_mutual: !a.separate_mutual_weights,
        ..base
    };
    if config.dim == 0 || config.hidden == 0 {
        return Err(UsageError("--dim and --hidden must be positive".into()).into());
    }
    train_config(a, g.seed)
        .validate()
        .map_err(|e| UsageError(e.to_string()))?;
    let train = load_examples(&a.manifest, &config)?;
    let eval = match &a.eval_manifest {
        Some(p) => load_examples(p, &config)?,
        None => vec![],
    };

    let mut summary = String::from("seed,best_epoch,best_eer\n");
    let mut eers = Vec::new();
    for r in 0..a.runs {
        let seed = g.seed + r;
        let dir = if a.runs == 1 {
            g.out_dir.clone()
        } else {
            g.out_dir.join(format!("seed_{seed}"))
        };
        create_dir(&dir)?;
        let cfg = train_config(a, seed);
        let resolved =
            serde_json::json!({ "model": config, "train": cfg, "spectral": SpectralConfig::new(config.feature) });
        write_snapshot(&dir.join("config.json"), "train", g, a, Some(resolved))?;
        let mut model = Detector::new(config, seed);
        model.fit_standardizers(&train);
        let train_p = prepare_all(&model, &train)?;
        let eval_p = prepare_all(&model, &eval)?;
        log::info!("run seed {seed}: {} parameters", model.num_parameters());
        let outcome = fit_in(&dir, Trainer::new(model, cfg)?, &train_p, &eval_p)?;
        let eer = outcome.best_eer.unwrap_or(f64::NAN);
        eers.push(eer);
        let epoch = outcome.best_epoch.map_or(String::new(), |e| e.to_string());
        writeln!(summary, "{seed},{epoch},{eer:.17e}")?;
    }
    let mean = eers.iter().sum::<f64>() / eers.len() as f64;
    writeln!(summary, "mean,,{mean:.17e}")?;
    fs::write(g.out_dir.join("summary.csv"), summary)?;
    if a.runs > 1 && !mean.is_nan() {
        println!("mean eval EER over {} runs: {:.2}%", a.runs, 100.0 * mean);
    }
    Ok(())
}

fn cmd_eval(g: &Global, a: &EvalArgs) -> anyhow::Result<()> {
    require_file(&a.checkpoint)?;
    let model = Detector::load(&a.checkpoint)?;
    let examples = load_examples(&a.manifest, &model.config)?;
    let scores_out = a.scores_out.clone().unwrap_or_else(|| g.out_dir.join("scores.csv"));
    let dir = parent_dir(&scores_out);
    create_dir(&dir)?;
    let scored = score_examples(&model, &examples).with_context(|| {
        format!(
            "checkpoint {} does not fit {}",
            a.checkpoint.display(),
            a.manifest.display()
        )
    })?;
    scored.scores.write_csv(&scores_out)?;
    let resolved = serde_json::json!({ "model": model.config });
    write_snapshot(&dir.join("eval.config.json"), "eval", g, a, Some(resolved))?;
    if !scored.traces.is_empty() {
        let traces_dir = a.traces_out.clone().unwrap_or_else(|| dir.join("traces"));
        let index = write_traces(&traces_dir, &scored.traces)?;
        log::info!("gate traces indexed in {}", index.display());
    }
    match compute_eer(&scored.scores) {
        Ok(r) => println!("EER: {:.2}%", 100.0 * r.eer),
        Err(sslfuse::Error::SingleClass { bonafide, spoof }) => {
            log::warn!("EER undefined with {bonafide} bona fide and {spoof} spoof utterances");
        }
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

fn cmd_analyze_gates(g: &Global, a: &GateArgs) -> anyhow::Result<()> {
    let mut traces = Vec::new();
    for path in &a.traces {
        require_file(path)?;
        let found = read_traces(path)?;
        if found.is_empty() {
            bail!("{} lists no gate traces", path.display());
        }
        traces.extend(found);
    }
    let pooling = if a.per_utterance {
        GatePooling::Utterances
    } else {
        GatePooling::Frames
    };
    let report = aggregate_gates(&traces, pooling);
    let out = a.out.clone().unwrap_or_else(|| g.out_dir.join("gates.csv"));
    let dir = parent_dir(&out);
    create_dir(&dir)?;
    report.write_csv(&out)?;
    write_snapshot(&dir.join("analyze-gates.config.json"), "analyze-gates", g, a, None)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn cmd_gradcheck(g: &Global, a: &GradcheckArgs) -> anyhow::Result<()> {
    if a.seeds == 0 {
        return Err(UsageError("--seeds must be at least 1".into()).into());
    }
    let mut worst = (0.0_f64, String::new(), 0_u64);
    for seed in g.seed..g.seed + a.seeds {
        let report = gradcheck_detector(a.strategy, seed, !a.separate_mutual_weights)?;
        if let Some((name, err)) = report.worst().cloned() {
            log::debug!("seed {seed}: worst {name} {err:.3e}");
            if !(err <= worst.0) {
                worst = (err, name.to_string(), seed);
            }
        }
    }
    create_dir(&g.out_dir)?;
    write_snapshot(&g.out_dir.join("gradcheck.config.json"), "gradcheck", g, a, None)?;
    println!(
        "gradcheck {}: max relative error {:.3e} over {} seeds (worst: {} at seed {})",
        a.strategy, worst.0, a.seeds, worst.1, worst.2
    );
    if !(worst.0 < GRADCHECK_TOLERANCE) {
        bail!("gradient check failed: {:.3e} >= {GRADCHECK_TOLERANCE:e}", worst.0);
    }
    Ok(())
}

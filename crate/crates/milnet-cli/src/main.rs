//! `milnet` — command-line pipeline for weak-label audio event detection
//! and tagging: synthesise data, extract features, train under a chosen
//! regime, evaluate, and render the regime-comparison grid.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use milnet::data::{self, InputMode, PreparedDataset, SynthConfig};
use milnet::features;
use milnet::losses::WhenLoss;
use milnet::metrics::EvalReport;
use milnet::train::{self, evaluate, Regime, TrainPlan};

const SEED_ENV: &str = "MILNET_SEED";

#[derive(Parser)]
#[command(
    name = "milnet",
    version,
    about = "Weak-label audio event detection and tagging toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic tone-burst dataset with exact strong labels.
    Synth(SynthArgs),
    /// Extract log mel-band energy features into a cache directory.
    Features(FeaturesArgs),
    /// Train under a regime and write a self-describing run directory.
    Train(TrainArgs),
    /// Evaluate a run directory's checkpoints and write metrics.json.
    Eval(EvalArgs),
    /// Train and evaluate all six regime configurations sequentially.
    Grid(GridArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of event classes.
    #[arg(long, default_value_t = 8)]
    classes: usize,
    /// Total number of recordings (train + test).
    #[arg(long, default_value_t = 80)]
    recordings: usize,
    /// Fraction of recordings containing events.
    #[arg(long, default_value_t = 0.8)]
    pos_fraction: f64,
    /// Fraction of recordings assigned to the test split.
    #[arg(long, default_value_t = 0.25)]
    test_fraction: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Shortest clip length in seconds.
    #[arg(long, default_value_t = 1.2)]
    min_duration: f64,
    /// Longest clip length in seconds.
    #[arg(long, default_value_t = 2.0)]
    max_duration: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FeaturesArgs {
    /// Dataset directory containing WAV files.
    #[arg(long)]
    data: PathBuf,
    /// Cache directory (defaults to `<data>/features`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Optional flat key=value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// separate | joint | tied
    #[arg(long)]
    regime: Option<String>,
    /// mmm | max | noisyor | false_strong
    #[arg(long)]
    when_loss: Option<String>,
    /// hnh | plain
    #[arg(long)]
    when_input: Option<String>,
    /// hnh | plain
    #[arg(long)]
    who_input: Option<String>,
    /// Joint loss weights as `wWHEN,wWHO`.
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Initial learning rate (halved every 20 epochs).
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Convolutional feature maps (64 full scale; 8 for desk-scale runs).
    #[arg(long)]
    fmaps: Option<usize>,
    /// GRU units per direction.
    #[arg(long)]
    gru_units: Option<usize>,
    /// Mean-term target as a fraction of the bag label.
    #[arg(long)]
    mean_target: Option<f64>,
    /// Evaluate on the test split every N epochs (0 = never).
    #[arg(long)]
    eval_every: Option<usize>,
    /// Early-stop patience in evaluations without improvement.
    #[arg(long)]
    patience: Option<usize>,
    /// Skip the detector phase.
    #[arg(long)]
    disable_when: bool,
    /// Skip the tagger phase.
    #[arg(long)]
    disable_who: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Dataset directory to evaluate on.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    fmaps: Option<usize>,
    #[arg(long)]
    gru_units: Option<usize>,
    /// Bag loss for the detector in every configuration.
    #[arg(long)]
    when_loss: Option<String>,
}

enum CliError {
    Usage(String),
    Lib(milnet::Error),
}

impl From<milnet::Error> for CliError {
    fn from(e: milnet::Error) -> Self {
        CliError::Lib(e)
    }
}

type CliResult = Result<(), CliError>;

fn usage<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Usage(msg.into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Cmd::Synth(args) => cmd_synth(args),
        Cmd::Features(args) => cmd_features(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Grid(args) => cmd_grid(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Lib(e)) => {
            eprintln!("error: {e}");
            let code = match e {
                milnet::Error::NonFinite(_) => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn env_seed() -> Option<u64> {
    std::env::var(SEED_ENV).ok().and_then(|v| v.parse().ok())
}

// ── synth ───────────────────────────────────────────────────────────────

fn cmd_synth(args: SynthArgs) -> CliResult {
    if !(0.0..=1.0).contains(&args.pos_fraction) || !(0.0..1.0).contains(&args.test_fraction) {
        return usage("fractions must lie in [0, 1]");
    }
    if args.min_duration <= 0.0 || args.max_duration < args.min_duration {
        return usage("durations must satisfy 0 < min <= max");
    }
    let test = (args.recordings as f64 * args.test_fraction).round() as usize;
    let train = args.recordings.saturating_sub(test);
    let cfg = SynthConfig {
        duration_range: (args.min_duration, args.max_duration),
        ..SynthConfig::new(
            args.classes,
            train,
            test,
            args.pos_fraction,
            args.seed.or_else(env_seed).unwrap_or(0),
        )
    };
    let ds = data::synth_dataset(&cfg)?;
    ds.write_to_dir(&args.out)?;
    println!(
        "wrote {} recordings ({} train / {} test, {} classes) to {}",
        args.recordings,
        train,
        test,
        args.classes,
        args.out.display()
    );
    Ok(())
}

// ── features ────────────────────────────────────────────────────────────

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

fn cmd_features(args: FeaturesArgs) -> CliResult {
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.data.join("features"));
    std::fs::create_dir_all(&out)
        .map_err(|e| milnet::Error::io(format!("creating {}", out.display()), e))?;
    let index_path = out.join("cache_index.json");
    let mut index: BTreeMap<String, String> = if index_path.exists() {
        let text = std::fs::read_to_string(&index_path)
            .map_err(|e| milnet::Error::io("reading cache index", e))?;
        serde_json::from_str(&text).unwrap_or_default()
    } else {
        BTreeMap::new()
    };

    let mut wavs: Vec<PathBuf> = std::fs::read_dir(&args.data)
        .map_err(|e| milnet::Error::io(format!("reading {}", args.data.display()), e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "wav"))
        .collect();
    wavs.sort();
    if wavs.is_empty() {
        return Err(milnet::Error::Data(format!(
            "no .wav files in {}",
            args.data.display()
        ))
        .into());
    }
    // Extraction runs on a worker thread through the bounded prefetch
    // queue; the main thread writes cache files as results arrive in order.
    enum Extracted {
        CacheHit,
        Fresh(String, String, features::FeatureMatrix),
        Failed(milnet::Error),
    }
    let worker_index = index.clone();
    let worker_out = out.clone();
    let worker_data = args.data.clone();
    let jobs = wavs.clone().into_iter().map(move |wav| {
        let id = wav
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let bytes = match std::fs::read(&wav) {
            Ok(b) => b,
            Err(e) => {
                return Extracted::Failed(milnet::Error::io(
                    format!("reading {}", wav.display()),
                    e,
                ));
            }
        };
        let hash = format!("{:016x}", fnv1a64(&bytes));
        if worker_out.join(format!("{id}.lmel")).exists() && worker_index.get(&id) == Some(&hash)
        {
            return Extracted::CacheHit;
        }
        let samples = match data::load_audio(&worker_data, &id) {
            Ok(s) => s,
            Err(e) => return Extracted::Failed(e),
        };
        match features::extract_logmel(&samples, features::SAMPLE_RATE, &id) {
            Ok(fm) => Extracted::Fresh(id, hash, fm),
            Err(e) => Extracted::Failed(e),
        }
    });
    let (mut extracted, mut skipped) = (0usize, 0usize);
    for item in data::prefetch::Prefetcher::spawn(jobs) {
        match item {
            Extracted::CacheHit => skipped += 1,
            Extracted::Fresh(id, hash, fm) => {
                features::write_lmel(&out.join(format!("{id}.lmel")), &fm)?;
                index.insert(id, hash);
                extracted += 1;
            }
            Extracted::Failed(e) => return Err(e.into()),
        }
    }
    let text = serde_json::to_string_pretty(&index)
        .map_err(|e| milnet::Error::Data(format!("encoding cache index: {e}")))?;
    std::fs::write(&index_path, text)
        .map_err(|e| milnet::Error::io("writing cache index", e))?;
    println!(
        "extracted {extracted}, skipped {skipped} up-to-date (cache at {})",
        out.display()
    );
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

/// Flat `key = value` lines; `#` starts a comment, values may be quoted.
fn parse_config_file(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return usage(format!("config line {}: expected key = value", lineno + 1));
        };
        let value = value.trim().trim_matches('"').trim_matches('\'');
        out.push((key.trim().to_string(), value.to_string()));
    }
    Ok(out)
}

fn parse_weights(s: &str) -> Result<(f64, f64), CliError> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return usage(format!("weights `{s}` must be `wWHEN,wWHO`"));
    }
    let a: f64 = parts[0]
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("bad weight `{}`", parts[0])))?;
    let b: f64 = parts[1]
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("bad weight `{}`", parts[1])))?;
    Ok((a, b))
}

fn apply_config_entry(plan: &mut TrainPlan, key: &str, value: &str) -> Result<(), CliError> {
    let parse_err = |what: &str| CliError::Usage(format!("config: bad {what} `{value}`"));
    match key {
        "regime" => plan.regime = Regime::parse(value).map_err(|_| parse_err("regime"))?,
        "when_loss" => {
            plan.when_loss = WhenLoss::parse(value).map_err(|_| parse_err("when_loss"))?
        }
        "when_input" => {
            plan.when_input = InputMode::parse(value).map_err(|_| parse_err("when_input"))?
        }
        "who_input" => {
            plan.who_input = InputMode::parse(value).map_err(|_| parse_err("who_input"))?
        }
        "weights" => plan.loss_weights = parse_weights(value)?,
        "epochs" => plan.epochs = value.parse().map_err(|_| parse_err("epochs"))?,
        "seed" => plan.seed = value.parse().map_err(|_| parse_err("seed"))?,
        "initial_lr" | "lr" => plan.initial_lr = value.parse().map_err(|_| parse_err("lr"))?,
        "lr_halving_period" => {
            plan.lr_halving_period = value.parse().map_err(|_| parse_err("period"))?
        }
        "lr_floor" => plan.lr_floor = value.parse().map_err(|_| parse_err("floor"))?,
        "batch_size" => plan.batch_size = value.parse().map_err(|_| parse_err("batch_size"))?,
        "feature_maps" | "fmaps" => {
            plan.feature_maps = value.parse().map_err(|_| parse_err("feature_maps"))?
        }
        "gru_units" => plan.gru_units = value.parse().map_err(|_| parse_err("gru_units"))?,
        "mean_target_fraction" => {
            plan.mean_target_fraction = value.parse().map_err(|_| parse_err("fraction"))?
        }
        "eval_every" => plan.eval_every = value.parse().map_err(|_| parse_err("eval_every"))?,
        "early_stop_patience" => {
            plan.early_stop_patience = Some(value.parse().map_err(|_| parse_err("patience"))?)
        }
        "train_when" => plan.train_when = value.parse().map_err(|_| parse_err("flag"))?,
        "train_who" => plan.train_who = value.parse().map_err(|_| parse_err("flag"))?,
        other => return usage(format!("unknown config key `{other}`")),
    }
    Ok(())
}

/// Defaults, then config file, then flags; the seed falls back to the
/// `MILNET_SEED` environment variable before the built-in default.
fn resolve_plan(args: &TrainArgs) -> Result<TrainPlan, CliError> {
    let mut plan = TrainPlan::default();
    if let Some(seed) = env_seed() {
        plan.seed = seed;
    }
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| milnet::Error::io(format!("reading {}", path.display()), e))?;
        for (key, value) in parse_config_file(&text)? {
            apply_config_entry(&mut plan, &key, &value)?;
        }
    }
    let map_usage = |e: milnet::Error| CliError::Usage(e.to_string());
    if let Some(v) = &args.regime {
        plan.regime = Regime::parse(v).map_err(map_usage)?;
    }
    if let Some(v) = &args.when_loss {
        plan.when_loss = WhenLoss::parse(v).map_err(map_usage)?;
    }
    if let Some(v) = &args.when_input {
        plan.when_input = InputMode::parse(v).map_err(map_usage)?;
    }
    if let Some(v) = &args.who_input {
        plan.who_input = InputMode::parse(v).map_err(map_usage)?;
    }
    if let Some(v) = &args.weights {
        plan.loss_weights = parse_weights(v)?;
    }
    if let Some(v) = args.epochs {
        plan.epochs = v;
    }
    if let Some(v) = args.seed {
        plan.seed = v;
    }
    if let Some(v) = args.lr {
        plan.initial_lr = v;
    }
    if let Some(v) = args.batch_size {
        plan.batch_size = v;
    }
    if let Some(v) = args.fmaps {
        plan.feature_maps = v;
    }
    if let Some(v) = args.gru_units {
        plan.gru_units = v;
    }
    if let Some(v) = args.mean_target {
        plan.mean_target_fraction = v;
    }
    if let Some(v) = args.eval_every {
        plan.eval_every = v;
    }
    if let Some(v) = args.patience {
        plan.early_stop_patience = Some(v);
        if plan.eval_every == 0 {
            plan.eval_every = 1;
        }
    }
    if args.disable_when {
        plan.train_when = false;
    }
    if args.disable_who {
        plan.train_who = false;
    }
    plan.validate().map_err(map_usage)?;
    Ok(plan)
}

fn prepare(data_dir: &Path) -> Result<PreparedDataset, milnet::Error> {
    let split = data::load_dataset(data_dir)?;
    PreparedDataset::prepare(data_dir, split)
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let plan = resolve_plan(&args)?;
    let prep = prepare(&args.data)?;
    println!(
        "training regime={} when={}+{} who={} epochs={} seed={} (T={} frames, {} classes)",
        plan.regime.token(),
        plan.when_input.token(),
        plan.when_loss.token(),
        plan.who_input.token(),
        plan.epochs,
        plan.seed,
        prep.target_frames,
        prep.split.vocab.len()
    );
    let output = train::execute_plan(&plan, &prep, &args.out)?;
    for r in &output.history {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "epoch {:>3}  lr {:>9.3e}  when_loss {}  who_loss {}",
            r.epoch,
            r.lr,
            fmt(r.when_loss),
            fmt(r.who_loss)
        );
    }
    println!("run written to {}", args.out.display());
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────

fn evaluate_run(
    run_dir: &Path,
    data_dir: &Path,
) -> Result<Vec<EvalReport>, milnet::Error> {
    let plan = evaluate::read_plan(run_dir)?;
    let prep = prepare(data_dir)?;
    let mut loaded = evaluate::restore_models::<f32>(run_dir, &plan, &prep)?;
    let mut reports = Vec::new();
    if let Some(m) = &loaded.when {
        reports.push(evaluate::eval_when_model(&mut loaded.tape, m, &prep)?);
    }
    if let Some(m) = &loaded.who {
        reports.push(evaluate::eval_who_model(&mut loaded.tape, m, &prep)?);
    }
    Ok(reports)
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    let reports = evaluate_run(&args.run, &args.data)?;
    let json = serde_json::to_string_pretty(&reports)
        .map_err(|e| milnet::Error::Eval(format!("encoding metrics: {e}")))?;
    let path = args.run.join("metrics.json");
    std::fs::write(&path, &json).map_err(|e| milnet::Error::io("writing metrics.json", e))?;
    for r in &reports {
        let macro_s = r
            .auc_macro
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{:<16} auc_micro {:.4}  auc_macro {}  ({} pos / {} neg pairs{})",
            r.task,
            r.auc_micro,
            macro_s,
            r.n_pos,
            r.n_neg,
            if r.excluded_classes.is_empty() {
                String::new()
            } else {
                format!(", excluded: {}", r.excluded_classes.join(" "))
            }
        );
    }
    println!("metrics written to {}", path.display());
    Ok(())
}

// ── grid ────────────────────────────────────────────────────────────────

struct GridRow {
    label: &'static str,
    input: &'static str,
    plan: TrainPlan,
}

fn grid_rows(base: &TrainPlan) -> Vec<GridRow> {
    let mk = |regime, when_input, who_input, weights: (f64, f64)| TrainPlan {
        regime,
        when_input,
        who_input,
        loss_weights: weights,
        ..base.clone()
    };
    vec![
        GridRow {
            label: "Separate",
            input: "HnH | nonHnH",
            plan: mk(Regime::Separate, InputMode::Hnh, InputMode::Plain, (0.5, 0.5)),
        },
        GridRow {
            label: "Joint [WHEN: 0.5; WHO: 0.5]",
            input: "HnH",
            plan: mk(Regime::Joint, InputMode::Hnh, InputMode::Hnh, (0.5, 0.5)),
        },
        GridRow {
            label: "Joint [WHEN: 0.5; WHO: 0.5]",
            input: "nonHnH",
            plan: mk(Regime::Joint, InputMode::Plain, InputMode::Plain, (0.5, 0.5)),
        },
        GridRow {
            label: "Joint [WHEN: 0.5; WHO: 5.0]",
            input: "HnH",
            plan: mk(Regime::Joint, InputMode::Hnh, InputMode::Hnh, (0.5, 5.0)),
        },
        GridRow {
            label: "Joint [WHEN: 0.5; WHO: 5.0]",
            input: "nonHnH",
            plan: mk(Regime::Joint, InputMode::Plain, InputMode::Plain, (0.5, 5.0)),
        },
        GridRow {
            label: "Tied Weights",
            input: "HnH | nonHnH",
            plan: mk(Regime::Tied, InputMode::Hnh, InputMode::Plain, (0.5, 0.5)),
        },
    ]
}

fn cmd_grid(args: GridArgs) -> CliResult {
    let mut base = TrainPlan {
        epochs: args.epochs,
        seed: args.seed.or_else(env_seed).unwrap_or(0),
        ..TrainPlan::default()
    };
    if let Some(v) = args.lr {
        base.initial_lr = v;
    }
    if let Some(v) = args.fmaps {
        base.feature_maps = v;
    }
    if let Some(v) = args.gru_units {
        base.gru_units = v;
    }
    if let Some(v) = &args.when_loss {
        base.when_loss = WhenLoss::parse(v).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let prep = prepare(&args.data)?;
    let rows = grid_rows(&base);
    let mut results = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let slug = format!(
            "run{}_{}_{}",
            i + 1,
            row.plan.regime.token(),
            row.input.replace(" | ", "-").to_lowercase()
        );
        let dir = args.out.join(&slug);
        println!("[{}/{}] {} ({})", i + 1, rows.len(), row.label, row.input);
        train::execute_plan(&row.plan, &prep, &dir)?;
        let reports = evaluate_run(&dir, &args.data)?;
        let json = serde_json::to_string_pretty(&reports)
            .map_err(|e| milnet::Error::Eval(format!("encoding metrics: {e}")))?;
        std::fs::write(dir.join("metrics.json"), json)
            .map_err(|e| milnet::Error::io("writing metrics.json", e))?;
        let when_auc = reports
            .iter()
            .find(|r| r.task == "when-frames")
            .map(|r| r.auc_micro);
        let who_auc = reports
            .iter()
            .find(|r| r.task == "who-cliplabels")
            .map(|r| r.auc_micro);
        results.push((row.label, row.input, when_auc, who_auc));
    }
    let mut table = String::new();
    table.push_str(&format!(
        "{:<30} {:<14} {:>9} {:>9}\n",
        "Training Method", "Input Type", "WHEN AUC", "WHO AUC"
    ));
    for (label, input, when_auc, who_auc) in &results {
        let fmt = |v: &Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
        table.push_str(&format!(
            "{label:<30} {input:<14} {:>9} {:>9}\n",
            fmt(when_auc),
            fmt(who_auc)
        ));
    }
    print!("{table}");
    std::fs::write(args.out.join("grid.txt"), &table)
        .map_err(|e| milnet::Error::io("writing grid.txt", e))?;
    Ok(())
}

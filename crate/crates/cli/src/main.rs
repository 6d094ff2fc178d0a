use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use journey_core::checkpoint::Checkpoint;
use journey_core::journeydata::{
    build_vocab, demo_funnel, generate_synthetic, parse_log, split, write_log, DwellRule, MarkovSpec, Session,
};
use journey_core::seqmodel::ModelConfig;
use journey_core::simulator::{
    derive_seed, rollout, rollout_rng, score_batch, write_score_csv, JourneyPrefix, Objective, ScoreParams,
    Termination, DEFAULT_HORIZON, DEFAULT_SAMPLES,
};
use journey_core::textenc::EncoderConfig;
use journey_core::training::{evaluate, train_ensemble, TrainConfig};

/// Customer-journey modelling: synthetic data, training, evaluation,
/// journey simulation and conversion scoring.
#[derive(Parser, Debug)]
#[command(name = "journey", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic session log sampled from a Markov chain.
    GenData(GenDataArgs),
    /// Train a model (or an ensemble) and write a checkpoint and loss curve.
    Train(TrainArgs),
    /// Print next-page accuracy and loss of a checkpoint on a session log.
    Eval(EvalArgs),
    /// Sample future journeys from a prefix and write them as text.
    Simulate(SimulateArgs),
    /// Estimate conversion probabilities for session prefixes.
    Score(ScoreArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Flat TOML file of settings; keys are flag names without the dashes.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed for every random choice.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on it).
    #[arg(long)]
    workers: Option<usize>,
    /// Directory for outputs; created if missing.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// MarkovSpec JSON; the built-in insurance funnel when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    sessions: Option<usize>,
    /// Output file name inside the output directory.
    #[arg(long)]
    output: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Session log (JSON lines).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    min_freq: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Batches per length-sorted window (1 = no length bucketing).
    #[arg(long)]
    bucket_window: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Seconds of dwell per repeated step.
    #[arg(long)]
    dwell_unit: Option<f64>,
    /// Most copies of one page event.
    #[arg(long)]
    dwell_cap: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    conv_stages: Option<usize>,
    #[arg(long)]
    filters: Option<usize>,
    #[arg(long)]
    kernel_width: Option<usize>,
    #[arg(long)]
    pool: Option<usize>,
    #[arg(long)]
    lstm_layers: Option<usize>,
    #[arg(long)]
    lstm_hidden: Option<usize>,
    #[arg(long)]
    fc_hidden: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Number of independently seeded members.
    #[arg(long)]
    ensemble: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Horizon of each rollout.
    #[arg(long)]
    steps: Option<usize>,
    /// `keywords+page+page...`; the keywords may be empty.
    #[arg(long)]
    seed_prefix: Option<String>,
    #[arg(long)]
    rollouts: Option<usize>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Sessions whose prefixes are scored.
    #[arg(long)]
    data: Option<PathBuf>,
    /// `id=page|page;id2=page`.
    #[arg(long)]
    objectives: Option<String>,
    /// Pages of each session kept in its prefix; all when omitted.
    #[arg(long)]
    prefix_steps: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
}

/// Every key a config file may contain, across all commands.
const CONFIG_KEYS: &[&str] = &[
    "seed",
    "workers",
    "out_dir",
    "spec",
    "sessions",
    "output",
    "data",
    "train_fraction",
    "min_freq",
    "epochs",
    "batch_size",
    "learning_rate",
    "bucket_window",
    "clip_norm",
    "dwell_unit",
    "dwell_cap",
    "max_len",
    "conv_stages",
    "filters",
    "kernel_width",
    "pool",
    "lstm_layers",
    "lstm_hidden",
    "fc_hidden",
    "dropout",
    "ensemble",
    "checkpoint",
    "steps",
    "seed_prefix",
    "rollouts",
    "objectives",
    "prefix_steps",
    "samples",
    "horizon",
];

/// Flag values layered over a config file.
struct Settings {
    file: toml::Table,
}

impl Settings {
    fn load(common: &Common) -> Result<Self> {
        let file = match &common.config {
            None => toml::Table::new(),
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let table: toml::Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
                let key = |k: &String| k.replace('-', "_");
                if let Some(bad) = table.keys().find(|k| !CONFIG_KEYS.contains(&key(k).as_str())) {
                    bail!("unknown config key {bad:?} in {}", path.display());
                }
                table.into_iter().map(|(k, v)| (k.replace('-', "_"), v)).collect()
            }
        };
        let settings = Self { file };
        if let Some(n) = settings.get(common.workers.clone(), "workers")? {
            if n < 1 {
                bail!("--workers must be at least 1");
            }
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring workers")?;
        }
        Ok(settings)
    }

    fn get<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(key) {
            None => Ok(None),
            Some(v) => v.clone().try_into().map(Some).with_context(|| format!("config key {key:?} has the wrong type")),
        }
    }

    fn or<T: DeserializeOwned>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(self.get(flag, key)?.unwrap_or(default))
    }

    fn required<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<T> {
        self.get(flag, key)?.ok_or_else(|| anyhow!("--{} is required", key.replace('_', "-")))
    }

    fn out_dir(&self, common: &Common) -> Result<PathBuf> {
        let dir = self.or(common.out_dir.clone(), "out_dir", PathBuf::from("."))?;
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn seed(&self, common: &Common) -> Result<u64> {
        self.or(common.seed, "seed", 0)
    }
}

fn existing(path: PathBuf) -> Result<PathBuf> {
    if !path.exists() {
        bail!("{} does not exist", path.display());
    }
    Ok(path)
}

fn read_sessions(path: &Path) -> Result<Vec<Session>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    parse_log(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let s = Settings::load(&args.common)?;
    let spec = match s.get(args.spec, "spec")? {
        Some(path) => {
            let path = existing(path)?;
            MarkovSpec::from_reader(File::open(&path)?).with_context(|| format!("reading {}", path.display()))?
        }
        None => demo_funnel(),
    };
    let n = s.or(args.sessions, "sessions", 10_000)?;
    let dir = s.out_dir(&args.common)?;
    let path = dir.join(s.or(args.output, "output", "sessions.jsonl".to_string())?);
    let sessions = generate_synthetic(&spec, n, s.seed(&args.common)?)?;
    write_log(&sessions, create(&path)?)?;
    println!("wrote {} sessions to {}", sessions.len(), path.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let s = Settings::load(&args.common)?;
    let data = existing(s.required(args.data, "data")?)?;
    let seed = s.seed(&args.common)?;
    let defaults = TrainConfig::default();
    let model_defaults = ModelConfig::default();
    let enc = EncoderConfig::default();
    let dwell = DwellRule::default();
    let config = TrainConfig {
        epochs: s.or(args.epochs, "epochs", defaults.epochs)?,
        batch_size: s.or(args.batch_size, "batch_size", defaults.batch_size)?,
        learning_rate: s.or(args.learning_rate, "learning_rate", defaults.learning_rate)?,
        bucket_window: s.or(args.bucket_window, "bucket_window", defaults.bucket_window)?,
        seed,
        clip_norm: s.or(args.clip_norm, "clip_norm", defaults.clip_norm)?,
        dwell: DwellRule {
            unit_seconds: s.or(args.dwell_unit, "dwell_unit", dwell.unit_seconds)?,
            cap: s.or(args.dwell_cap, "dwell_cap", dwell.cap)?,
        },
        model: ModelConfig {
            encoder: EncoderConfig {
                max_len: s.or(args.max_len, "max_len", enc.max_len)?,
                stages: s.or(args.conv_stages, "conv_stages", enc.stages)?,
                filters: s.or(args.filters, "filters", enc.filters)?,
                kernel_width: s.or(args.kernel_width, "kernel_width", enc.kernel_width)?,
                pool: s.or(args.pool, "pool", enc.pool)?,
            },
            lstm_layers: s.or(args.lstm_layers, "lstm_layers", model_defaults.lstm_layers)?,
            lstm_hidden: s.or(args.lstm_hidden, "lstm_hidden", model_defaults.lstm_hidden)?,
            fc_hidden: s.or(args.fc_hidden, "fc_hidden", model_defaults.fc_hidden)?,
            dropout: s.or(args.dropout, "dropout", model_defaults.dropout)?,
        },
        ..defaults
    };
    let fraction = s.or(args.train_fraction, "train_fraction", 0.8)?;
    let min_freq = s.or(args.min_freq, "min_freq", 5)?;
    let k = s.or(args.ensemble, "ensemble", 1)?;
    let dir = s.out_dir(&args.common)?;

    let sessions = read_sessions(&data)?;
    let (train_set, eval_set) = split(&sessions, fraction, derive_seed(seed, 0, 1))?;
    let vocab = build_vocab(&train_set, min_freq)?;
    let (ensemble, reports) = train_ensemble(&train_set, &eval_set, &config, &vocab, k)?;

    let checkpoint = Checkpoint::new(config.clone(), ensemble.members().to_vec())?;
    let ckpt_path = dir.join("checkpoint.json");
    checkpoint.save(&ckpt_path)?;
    for (i, report) in reports.iter().enumerate() {
        let name = if k == 1 { "train_report.csv".to_string() } else { format!("train_report_{i}.csv") };
        report.write_csv(create(&dir.join(name))?)?;
    }
    write_json(&dir.join("train_config.json"), &config)?;
    let result = evaluate(&ensemble, &eval_set, &config.dwell);
    println!(
        "trained {k} model(s) on {} sessions, vocabulary {} pages; eval accuracy {:.4} loss {:.4} over {} steps",
        train_set.len(),
        vocab.len(),
        result.accuracy,
        result.mean_loss,
        result.steps
    );
    println!("checkpoint {}", ckpt_path.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let s = Settings::load(&args.common)?;
    let checkpoint = Checkpoint::load(&existing(s.required(args.checkpoint, "checkpoint")?)?)?;
    let sessions = read_sessions(&existing(s.required(args.data, "data")?)?)?;
    let ensemble = checkpoint.ensemble()?;
    let r = evaluate(&ensemble, &sessions, &checkpoint.train_config.dwell);
    println!("accuracy {} loss {} steps {}", r.accuracy, r.mean_loss, r.steps);
    Ok(())
}

fn parse_prefix(text: &str) -> JourneyPrefix {
    let mut parts = text.split('+').map(str::trim);
    let keywords = parts.next().unwrap_or_default();
    JourneyPrefix::new(keywords, parts.filter(|p| !p.is_empty()))
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let s = Settings::load(&args.common)?;
    let checkpoint = Checkpoint::load(&existing(s.required(args.checkpoint, "checkpoint")?)?)?;
    let horizon = s.or(args.steps, "steps", DEFAULT_HORIZON)?;
    let prefix = parse_prefix(&s.or(args.seed_prefix, "seed_prefix", String::new())?);
    let n = s.or(args.rollouts, "rollouts", 10)?;
    let seed = s.seed(&args.common)?;
    let dir = s.out_dir(&args.common)?;
    let ensemble = checkpoint.ensemble()?;

    let path = dir.join("journeys.txt");
    let mut out = create(&path)?;
    writeln!(out, "prefix: {:?} | {}", prefix.keywords, prefix.pages.join(" > "))?;
    for i in 0..n {
        let mut rng = rollout_rng(seed, i as u64);
        let j = rollout(&ensemble, &prefix, horizon, &mut rng)?;
        let end = match j.termination {
            Termination::Exit => "exit",
            Termination::Horizon => "horizon",
        };
        writeln!(out, "{i}\t{}\t{}\t{}", j.continuation.len(), end, j.continuation.join(" > "))?;
    }
    out.flush()?;
    println!("wrote {n} journeys of up to {horizon} steps to {}", path.display());
    Ok(())
}

fn parse_objectives(text: &str) -> Result<Vec<Objective>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for part in text.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (id, pages) = part.split_once('=').ok_or_else(|| anyhow!("objective {part:?} is not id=page|page"))?;
        let id = id.trim();
        if !seen.insert(id.to_string()) {
            bail!("objective {id:?} given twice");
        }
        out.push(Objective::new(id, pages.split('|').map(str::trim).filter(|p| !p.is_empty()))?);
    }
    if out.is_empty() {
        bail!("no objectives given");
    }
    Ok(out)
}

fn score(args: ScoreArgs) -> Result<()> {
    let s = Settings::load(&args.common)?;
    let checkpoint = Checkpoint::load(&existing(s.required(args.checkpoint, "checkpoint")?)?)?;
    let sessions = read_sessions(&existing(s.required(args.data, "data")?)?)?;
    let objectives = parse_objectives(&s.required(args.objectives, "objectives")?)?;
    let keep = s.get(args.prefix_steps, "prefix_steps")?;
    let params = ScoreParams {
        n_samples: s.or(args.samples, "samples", DEFAULT_SAMPLES)?,
        horizon: s.or(args.horizon, "horizon", DEFAULT_HORIZON)?,
        seed: s.seed(&args.common)?,
    };
    let dir = s.out_dir(&args.common)?;
    let ensemble = checkpoint.ensemble()?;

    let prefixes: Vec<JourneyPrefix> = sessions
        .iter()
        .map(|x| JourneyPrefix::new(x.keywords.clone(), x.pages().take(keep.unwrap_or(usize::MAX))))
        .collect();
    let ids: Vec<String> = sessions.iter().map(|x| x.session_id.clone()).collect();
    let rows = score_batch(&ensemble, &prefixes, &objectives, &params)?;
    let path = dir.join("score.csv");
    write_score_csv(&rows, &ids, create(&path)?)?;
    println!("wrote {} scores to {}", rows.len(), path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Simulate(a) => simulate(a),
        Command::Score(a) => score(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(1)
        }
    }
}

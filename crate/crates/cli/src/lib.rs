//! `css-distill` command suite.
//!
//! Every subcommand reads an optional TOML config (`--config`), applies
//! `--set key=value` overrides in order, then its dedicated flags. Unknown keys
//! are rejected. Exit codes: 0 success, 1 usage error, 2 runtime error.

mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use toml::Value;

use css_distill::css::{separate_continuous_traced, write_trace, CssConfig};
use css_distill::distill::ShiftSchedule;
use css_distill::eval::evaluate;
use css_distill::mixer::{make_corpus, read_corpus, write_corpus, CorpusTemplate};
use css_distill::model::{Checkpoint, ModelConfig};
use css_distill::signal::{read_wav, write_wav, SampleFormat, StftConfig};
use css_distill::train::{
    self, schedule_rows, scaled_warmup, write_schedule_csv_to, Mode, OptimConfig, RunManifest, CHECKPOINT_DIR_ENV,
};

use config::{keys_help, keys_of, load_table, parse, require, set_key, set_path};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(css_distill::Error),
}

impl From<css_distill::Error> for CliError {
    fn from(e: css_distill::Error) -> Self {
        match e {
            css_distill::Error::Config(msg) => CliError::Usage(msg),
            other => CliError::Runtime(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Parser)]
#[command(name = "css-distill", version, about = "Teacher-student training for continuous speech separation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set optim.peak_lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for every random choice the command makes.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel sections.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a mixture corpus.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of mixtures.
        #[arg(long)]
        count: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Drop references and write full-overlap two-speaker mixtures.
        #[arg(long)]
        unlabeled: bool,
    },
    /// Train the teacher with the permutation-invariant loss.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        paths: TrainPaths,
    },
    /// Train the student architecture from scratch.
    TrainBaseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        paths: TrainPaths,
    },
    /// Distill a student from a trained teacher.
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        paths: TrainPaths,
        /// vanilla_ts, lts, os, lts_os or unlabeled_lts_os.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        teacher_checkpoint: Option<PathBuf>,
        /// Unlabeled corpus manifest.
        #[arg(long)]
        unlabeled: Option<PathBuf>,
    },
    /// Separate a recording into per-source WAV files.
    Separate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Write the per-window alignment trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Score a checkpoint on a labeled corpus.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Labeled corpus manifest.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Per-sample CSV output.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Structured report output.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Export the shift weight and learning rate per step as CSV.
    Schedules {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k: Option<f64>,
        #[arg(long)]
        t0: Option<u64>,
        #[arg(long)]
        total: Option<u64>,
        #[arg(long)]
        warmup: Option<u64>,
        #[arg(long)]
        peak_lr: Option<f64>,
        /// Emit every n-th step.
        #[arg(long)]
        stride: Option<u64>,
        /// CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Debug, Default)]
struct TrainPaths {
    /// Labeled corpus manifest.
    #[arg(long)]
    labeled: Option<PathBuf>,
    /// Output directory; defaults to $CSS_DISTILL_CHECKPOINT_DIR.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Continue from a session checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynthConfig {
    count: usize,
    labeled: bool,
    seed: u64,
    out_dir: Option<PathBuf>,
    template: CorpusTemplate,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 100,
            labeled: true,
            seed: 0,
            out_dir: None,
            template: CorpusTemplate::default(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SeparateConfig {
    checkpoint: Option<PathBuf>,
    input: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    trace: Option<PathBuf>,
    css: CssConfig,
    stft: StftConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalConfig {
    run: String,
    checkpoint: Option<PathBuf>,
    corpus: Option<PathBuf>,
    csv: Option<PathBuf>,
    json: Option<PathBuf>,
    css: CssConfig,
    stft: StftConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            run: "eval".into(),
            checkpoint: None,
            corpus: None,
            csv: None,
            json: None,
            css: CssConfig::default(),
            stft: StftConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ScheduleExport {
    k: f64,
    t0: u64,
    total: u64,
    /// Defaults to the reference warm-up fraction of `total`.
    warmup: Option<u64>,
    peak_lr: f64,
    stride: u64,
    out: Option<PathBuf>,
}

impl Default for ScheduleExport {
    fn default() -> Self {
        Self {
            k: 1e-4,
            t0: 150_000,
            total: 260_000,
            warmup: None,
            peak_lr: 1e-4,
            stride: 1,
            out: None,
        }
    }
}

fn some_path(name: &str) -> Option<PathBuf> {
    Some(PathBuf::from(name))
}

fn example_manifest() -> RunManifest {
    let mut m = RunManifest::new(Mode::LtsOs);
    m.model = Some(ModelConfig::desk_student());
    m.pretrain_steps = Some(5000);
    m.paths = train::Paths {
        labeled: some_path("labeled"),
        unlabeled: some_path("unlabeled"),
        teacher_checkpoint: some_path("teacher"),
        resume: some_path("resume"),
        checkpoint_dir: some_path("dir"),
    };
    m
}

/// Every config key each subcommand reads, for `--help`.
fn subcommand_keys() -> Vec<(&'static str, Vec<String>)> {
    let manifest = keys_of(&example_manifest());
    let synth = keys_of(&SynthConfig {
        out_dir: some_path("out"),
        ..SynthConfig::default()
    });
    let separate = keys_of(&SeparateConfig {
        checkpoint: some_path("c"),
        input: some_path("i"),
        out_dir: some_path("o"),
        trace: some_path("t"),
        ..SeparateConfig::default()
    });
    let eval = keys_of(&EvalConfig {
        checkpoint: some_path("c"),
        corpus: some_path("c"),
        csv: some_path("c"),
        json: some_path("j"),
        ..EvalConfig::default()
    });
    let schedules = keys_of(&ScheduleExport {
        warmup: Some(1),
        out: some_path("o"),
        ..ScheduleExport::default()
    });
    vec![
        ("synth", synth),
        ("train-teacher", manifest.clone()),
        ("train-baseline", manifest.clone()),
        ("distill", manifest),
        ("separate", separate),
        ("eval", eval),
        ("schedules", schedules),
    ]
}

fn command() -> clap::Command {
    let mut cmd = Cli::command();
    for (name, keys) in subcommand_keys() {
        cmd = cmd.mut_subcommand(name, |c| c.after_help(keys_help(&keys)));
    }
    cmd
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn common_of(cmd: &Command) -> &Common {
    match cmd {
        Command::Synth { common, .. }
        | Command::TrainTeacher { common, .. }
        | Command::TrainBaseline { common, .. }
        | Command::Distill { common, .. }
        | Command::Separate { common, .. }
        | Command::Eval { common, .. }
        | Command::Schedules { common, .. } => common,
    }
}

fn execute(cmd: Command) -> Result<(), CliError> {
    let workers = common_of(&cmd).workers;
    match workers {
        Some(0) => Err(CliError::Usage("--workers must be positive".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Usage(e.to_string()))?;
            pool.install(|| dispatch(cmd))
        }
        None => dispatch(cmd),
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth {
            common,
            count,
            out,
            unlabeled,
        } => {
            let mut table = load_table(common.config.as_deref(), &common.overrides)?;
            if let Some(c) = count {
                set_key(&mut table, "count", Value::Integer(c as i64))?;
            }
            if unlabeled {
                set_key(&mut table, "labeled", Value::Boolean(false))?;
            }
            if let Some(s) = common.seed {
                set_key(&mut table, "seed", Value::Integer(s as i64))?;
            }
            set_path(&mut table, "out_dir", &out)?;
            synth(parse(table)?)
        }
        Command::TrainTeacher { common, paths } => {
            let manifest = manifest_from(&common, &paths, Some(Mode::Teacher))?;
            train_run(manifest)
        }
        Command::TrainBaseline { common, paths } => {
            let manifest = manifest_from(&common, &paths, Some(Mode::Baseline))?;
            train_run(manifest)
        }
        Command::Distill {
            common,
            paths,
            mode,
            teacher_checkpoint,
            unlabeled,
        } => {
            let mode = mode.map(|m| m.parse::<Mode>()).transpose()?;
            if matches!(mode, Some(Mode::Teacher | Mode::Baseline)) {
                return Err(CliError::Usage("distill --mode must be a distillation mode".into()));
            }
            let mut common = common;
            set_flag_override(&mut common, "paths.teacher_checkpoint", &teacher_checkpoint);
            set_flag_override(&mut common, "paths.unlabeled", &unlabeled);
            let manifest = manifest_from(&common, &paths, mode)?;
            if !manifest.mode.is_distillation() {
                return Err(CliError::Usage("distill requires a distillation mode".into()));
            }
            require(manifest.paths.teacher_checkpoint.as_ref(), "paths.teacher_checkpoint", "--teacher-checkpoint")?;
            if manifest.mode == Mode::UnlabeledLtsOs {
                require(manifest.paths.unlabeled.as_ref(), "paths.unlabeled", "--unlabeled")?;
            }
            train_run(manifest)
        }
        Command::Separate {
            common,
            checkpoint,
            input,
            out_dir,
            trace,
        } => {
            let mut table = load_table(common.config.as_deref(), &common.overrides)?;
            set_path(&mut table, "checkpoint", &checkpoint)?;
            set_path(&mut table, "input", &input)?;
            set_path(&mut table, "out_dir", &out_dir)?;
            set_path(&mut table, "trace", &trace)?;
            separate(parse(table)?)
        }
        Command::Eval {
            common,
            checkpoint,
            corpus,
            csv,
            json,
        } => {
            let mut table = load_table(common.config.as_deref(), &common.overrides)?;
            set_path(&mut table, "checkpoint", &checkpoint)?;
            set_path(&mut table, "corpus", &corpus)?;
            set_path(&mut table, "csv", &csv)?;
            set_path(&mut table, "json", &json)?;
            eval(parse(table)?)
        }
        Command::Schedules {
            common,
            k,
            t0,
            total,
            warmup,
            peak_lr,
            stride,
            out,
        } => {
            let mut table = load_table(common.config.as_deref(), &common.overrides)?;
            if let Some(v) = k {
                set_key(&mut table, "k", Value::Float(v))?;
            }
            for (key, v) in [("t0", t0), ("total", total), ("warmup", warmup), ("stride", stride)] {
                if let Some(v) = v {
                    set_key(&mut table, key, Value::Integer(v as i64))?;
                }
            }
            if let Some(v) = peak_lr {
                set_key(&mut table, "peak_lr", Value::Float(v))?;
            }
            set_path(&mut table, "out", &out)?;
            schedules(parse(table)?)
        }
    }
}

fn set_flag_override(common: &mut Common, key: &str, value: &Option<PathBuf>) {
    if let Some(p) = value {
        // Quoted so the value is always read as a string.
        common
            .overrides
            .push(format!("{key}={}", Value::String(p.display().to_string())));
    }
}

fn manifest_from(common: &Common, paths: &TrainPaths, mode: Option<Mode>) -> Result<RunManifest, CliError> {
    let mut table = load_table(common.config.as_deref(), &common.overrides)?;
    if let Some(m) = mode {
        set_key(&mut table, "mode", Value::String(m.name().into()))?;
    }
    if !table.contains_key("mode") {
        return Err(CliError::Usage("missing required key mode (pass --mode or set it in the config)".into()));
    }
    if let Some(s) = common.seed {
        set_key(&mut table, "optim.seed", Value::Integer(s as i64))?;
    }
    set_path(&mut table, "paths.labeled", &paths.labeled)?;
    set_path(&mut table, "paths.checkpoint_dir", &paths.checkpoint_dir)?;
    set_path(&mut table, "paths.resume", &paths.resume)?;
    let manifest: RunManifest = parse(table)?;
    require(manifest.paths.labeled.as_ref(), "paths.labeled", "--labeled")?;
    if train::checkpoint_dir(&manifest).is_none() {
        return Err(CliError::Usage(format!(
            "missing required key paths.checkpoint_dir (pass --checkpoint-dir or set {CHECKPOINT_DIR_ENV})"
        )));
    }
    manifest.validate()?;
    Ok(manifest)
}

fn synth(cfg: SynthConfig) -> Result<(), CliError> {
    let out = require(cfg.out_dir.clone(), "out_dir", "--out")?;
    cfg.template.validate()?;
    let samples = make_corpus(cfg.count, &cfg.template, cfg.labeled, cfg.seed)?;
    let manifest = write_corpus(&out, &samples)?;
    println!("wrote {} mixtures to {}", samples.len(), manifest.display());
    Ok(())
}

fn train_run(manifest: RunManifest) -> Result<(), CliError> {
    let outcome = train::run(&manifest)?;
    let dir = train::checkpoint_dir(&manifest).expect("checked when parsing");
    println!(
        "mode {}: {} steps, validation loss {:.6} -> {:.6}",
        manifest.mode.name(),
        outcome.checkpoint.step,
        outcome.initial_validation,
        outcome.final_validation
    );
    println!("checkpoint: {}", dir.join(format!("{}.ckpt", manifest.mode.name())).display());
    Ok(())
}

fn separate(cfg: SeparateConfig) -> Result<(), CliError> {
    let ckpt = require(cfg.checkpoint.as_ref(), "checkpoint", "--checkpoint")?;
    let input = require(cfg.input.as_ref(), "input", "--input")?;
    let out_dir = require(cfg.out_dir.as_ref(), "out_dir", "--out-dir")?;
    let params = Checkpoint::load(ckpt)?.parameters()?;
    let wave = read_wav(input)?;
    let (outputs, trace) = separate_continuous_traced(&params, &wave, &cfg.css, &cfg.stft)?;
    std::fs::create_dir_all(out_dir)?;
    for (s, w) in outputs.iter().enumerate() {
        write_wav(out_dir.join(format!("source_{s}.wav")), w, SampleFormat::Float32)?;
    }
    if let Some(path) = &cfg.trace {
        write_trace(std::fs::File::create(path)?, &trace)?;
    }
    println!("wrote {} sources to {}", outputs.len(), out_dir.display());
    Ok(())
}

fn eval(cfg: EvalConfig) -> Result<(), CliError> {
    let ckpt = require(cfg.checkpoint.as_ref(), "checkpoint", "--checkpoint")?;
    let corpus_path = require(cfg.corpus.as_ref(), "corpus", "--corpus")?;
    let params = Checkpoint::load(ckpt)?.parameters()?;
    let corpus = read_corpus(corpus_path)?;
    let report = evaluate(&cfg.run, &params, &corpus, &cfg.css, &cfg.stft)?;
    if let Some(p) = &cfg.csv {
        report.write_csv(p)?;
    }
    if let Some(p) = &cfg.json {
        std::fs::write(p, report.to_json()?)?;
    }
    print!("{report}");
    Ok(())
}

fn schedules(cfg: ScheduleExport) -> Result<(), CliError> {
    let optim = OptimConfig {
        peak_lr: cfg.peak_lr,
        warmup_steps: cfg.warmup.unwrap_or_else(|| scaled_warmup(cfg.total)),
        total_steps: cfg.total,
        ..OptimConfig::default()
    };
    let schedule = ShiftSchedule { k: cfg.k, t0: cfg.t0 };
    let rows = schedule_rows(&optim, &schedule, cfg.stride)?;
    match &cfg.out {
        Some(p) => write_schedule_csv_to(std::fs::File::create(p)?, &rows)?,
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write_schedule_csv_to(&mut lock, &rows)?;
            lock.flush()?;
        }
    }
    Ok(())
}

//! Command-line driver.
//!
//! Every stage reads and writes under a work directory (default `run/`):
//!
//! ```text
//! run/corpus/       gen-data
//! run/teacher/      pretrain-teacher
//! run/main/         train
//! run/finetuned/    finetune
//! run/converted/    convert
//! run/report.json   eval (plus report.csv)
//! run/logs/*.csv    per-step training metrics
//! ```
//!
//! Failures print one line, `error: kind=<kind> message=<text>`, to stderr.
//! Exit codes: 2 usage, 3 configuration, 4 validation (including stage and
//! shape errors), 1 anything else.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::convert;
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::nets::{Checkpoint, Stage};
use crate::syndata;
use crate::tensorio::{self, Tensor};
use crate::train::{self, Dataset, TrainLog};

pub const SEED_ENV: &str = "SAVC_SEED";

#[derive(Debug, Parser)]
#[command(name = "savc", version, about = "Style-augmented voice conversion laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
struct Common {
    /// Run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for corpus generation and training (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Directory holding every stage's outputs.
    #[arg(long, global = true, default_value = "run")]
    work_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the prosody teacher.
    PretrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Main training with style augmentation and distillation.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emotion fine-tuning of a main checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert utterances listed in a pairs file (`utterance_id target` per line).
    Convert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Imported target embedding, `NAME=PATH` to a rank-1 tensor file.
        #[arg(long = "embedding")]
        embeddings: Vec<String>,
    },
    /// Objective evaluation and leakage probes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Report path without extension; `.json` and `.csv` are written.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print tensor headers, checkpoint or manifest summaries, or the effective config.
    Inspect {
        #[command(flatten)]
        common: Common,
        path: Option<PathBuf>,
        #[arg(long)]
        dump_config: bool,
    },
    /// Render a metrics CSV as an SVG line chart.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::PretrainTeacher { common, .. }
            | Command::Train { common, .. }
            | Command::Finetune { common, .. }
            | Command::Convert { common, .. }
            | Command::Eval { common, .. }
            | Command::Inspect { common, .. }
            | Command::Plot { common, .. } => common,
        }
    }
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 3,
        Error::Validation(_)
        | Error::Shape(_)
        | Error::Stage { .. }
        | Error::UnknownSpeaker(_)
        | Error::Contract(_)
        | Error::NoGroundTruth(_) => 4,
        Error::Io { .. } | Error::Format(_) | Error::Json(_) => 1,
    }
}

/// The single-line error report.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error: kind={} message={msg}", e.kind())
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            if code == 0 {
                let _ = e.print();
            } else {
                let msg = e.to_string();
                let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
                eprintln!("error: kind=usage message={first}");
            }
            return code;
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            exit_code(&e)
        }
    }
}

/// Effective configuration: defaults, then the config file, then `--seed`.
/// `SAVC_SEED` applies only when neither the file nor the flag sets a seed.
fn effective_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    } else if !cfg.is_explicit("data.seed") && !cfg.is_explicit("train.seed") {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let s = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            cfg.set_seed(s);
        }
    }
    cfg.validate()?;
    if common.jobs == 0 {
        return Err(Error::Validation("--jobs must be at least 1".into()));
    }
    Ok(cfg)
}

fn or_default(p: &Option<PathBuf>, common: &Common, name: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| common.work_dir.join(name))
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    let m = tensorio::load_manifest(dir.join("manifest.json"))?;
    Dataset::load(&m)
}

/// Loads a checkpoint that a stage requires, reporting a missing one as a
/// stage error.
fn require_checkpoint(dir: &Path, expected: &[Stage]) -> Result<Checkpoint> {
    let names = || expected.iter().map(Stage::to_string).collect::<Vec<_>>().join("|");
    if !dir.join("checkpoint.json").is_file() {
        return Err(Error::Stage {
            expected: names(),
            found: format!("none (no checkpoint at {})", dir.display()),
        });
    }
    let c = Checkpoint::load(dir)?;
    c.require_stage(expected)?;
    Ok(c)
}

fn write_log(common: &Common, name: &str, log: &TrainLog) -> Result<()> {
    let dir = common.work_dir.join("logs");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    log.write_csv(dir.join(format!("{name}.csv")))
}

fn run(cmd: &Command) -> Result<()> {
    let common = cmd.common();
    let cfg = effective_config(common)?;
    match cmd {
        Command::GenData { out, .. } => {
            let out = or_default(out, common, "corpus");
            let m = syndata::make_corpus(&cfg.data, &out, common.jobs)?;
            println!("wrote {} utterances to {}", m.utterances.len(), out.display());
        }
        Command::PretrainTeacher { corpus, out, .. } => {
            let ds = load_dataset(&or_default(corpus, common, "corpus"))?;
            let mut log = TrainLog::default();
            let ckpt = train::pretrain_teacher(&ds, &cfg.model, &cfg.train, Some(&mut log))?;
            let out = or_default(out, common, "teacher");
            ckpt.save(&out)?;
            write_log(common, "teacher", &log)?;
            println!("teacher checkpoint written to {}", out.display());
        }
        Command::Train { corpus, teacher, out, .. } => {
            let teacher = require_checkpoint(&or_default(teacher, common, "teacher"), &[Stage::Teacher])?;
            let ds = load_dataset(&or_default(corpus, common, "corpus"))?;
            let mut log = TrainLog::default();
            let ckpt = train::train_main(&ds, &teacher, &cfg.train, Some(&mut log))?;
            let out = or_default(out, common, "main");
            ckpt.save(&out)?;
            write_log(common, "main", &log)?;
            if let Some(f) = log.ascent_fraction() {
                println!("adversarial ascent in {:.0}% of windows", 100.0 * f);
            }
            println!("main checkpoint written to {}", out.display());
        }
        Command::Finetune { corpus, checkpoint, out, .. } => {
            let main = require_checkpoint(&or_default(checkpoint, common, "main"), &[Stage::Main])?;
            let ds = load_dataset(&or_default(corpus, common, "corpus"))?;
            let mut log = TrainLog::default();
            let ckpt = train::finetune(&main, &ds, &cfg.train, Some(&mut log))?;
            let out = or_default(out, common, "finetuned");
            ckpt.save(&out)?;
            write_log(common, "finetune", &log)?;
            println!("fine-tuned checkpoint written to {}", out.display());
        }
        Command::Convert {
            pairs,
            corpus,
            checkpoint,
            out,
            embeddings,
            ..
        } => {
            let ckpt = require_checkpoint(&or_default(checkpoint, common, "finetuned"), &[Stage::Main, Stage::Finetuned])?;
            let manifest = tensorio::load_manifest(or_default(corpus, common, "corpus").join("manifest.json"))?;
            let text = fs::read_to_string(pairs).map_err(|e| Error::io(pairs, e))?;
            let pairs = convert::parse_pairs(&text)?;
            let imported = convert::load_embeddings(embeddings)?;
            let out = or_default(out, common, "converted");
            let m = convert::batch_convert(&ckpt, &manifest, &pairs, &imported, &out, common.jobs)?;
            println!("converted {} utterances into {}", m.utterances.len(), out.display());
        }
        Command::Eval { corpus, checkpoint, out, .. } => {
            let ckpt = require_checkpoint(&or_default(checkpoint, common, "finetuned"), &[Stage::Main, Stage::Finetuned])?;
            let ds = load_dataset(&or_default(corpus, common, "corpus"))?;
            let pairs = eval::sample_pairs(&ds, cfg.eval.n_pairs, cfg.train.seed);
            let report = eval::eval_report(&ckpt, &ds, &pairs, &cfg.eval, cfg.train.seed, common.jobs)?;
            let stem = or_default(out, common, "report");
            report.write(&stem)?;
            print_summary(&report);
            println!("report written to {}", stem.with_extension("json").display());
        }
        Command::Inspect { path, dump_config, .. } => {
            if *dump_config || path.is_none() {
                print!("{}", cfg.dump());
            }
            if let Some(p) = path {
                println!("{}", inspect(p)?);
            }
        }
        Command::Plot { log, out, .. } => {
            let text = fs::read_to_string(log).map_err(|e| Error::io(log, e))?;
            let svg = eval::plot_svg(&text)?;
            fs::write(out, svg).map_err(|e| Error::io(out, e))?;
            println!("plot written to {}", out.display());
        }
    }
    Ok(())
}

fn print_summary(r: &EvalReport) {
    let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
    println!(
        "pairs={} mcd={}±{} self_mcd={} f0_r={} energy_r={} ses={} closer_to_target={}",
        r.pairs.len(),
        f(r.mcd_mean),
        f(r.mcd_std),
        f(r.self_mcd_mean),
        f(r.f0_pearson_mean),
        f(r.energy_pearson_mean),
        f(r.ses_mean),
        f(r.closer_to_target)
    );
    println!(
        "probe speaker<-content={:.4} speaker<-raw={:.4} emotion<-prosody={:.4}",
        r.probes.speaker_from_content.accuracy, r.probes.speaker_from_raw.accuracy, r.probes.emotion_from_prosody.accuracy
    );
}

/// One-paragraph description of a tensor file, checkpoint directory or manifest.
pub fn inspect(path: &Path) -> Result<String> {
    if path.is_dir() {
        if path.join("checkpoint.json").is_file() {
            let c = Checkpoint::load(path)?;
            let numel: usize = c.params.iter().map(|(_, m)| m.len()).sum();
            return Ok(format!(
                "checkpoint stage={} steps={} params={} values={} speakers={} emotions={} seed={}",
                c.stage,
                c.step_count,
                c.params.len(),
                numel,
                c.speakers.len(),
                c.emotions.len(),
                c.train.seed
            ));
        }
        if path.join("manifest.json").is_file() {
            return inspect(&path.join("manifest.json"));
        }
        return Err(Error::Validation(format!("{} is neither a checkpoint nor a corpus", path.display())));
    }
    if path.extension().is_some_and(|e| e == "json") {
        let m = tensorio::load_manifest(path)?;
        return Ok(format!(
            "manifest version={} utterances={} speakers={} emotions={}",
            m.format_version,
            m.utterances.len(),
            m.speakers().len(),
            m.emotions().len()
        ));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let t = Tensor::from_bytes(&bytes)?;
    Ok(format!(
        "tensor version={} dtype=f32 shape={:?} bytes={}",
        tensorio::VERSION,
        t.shape(),
        bytes.len()
    ))
}

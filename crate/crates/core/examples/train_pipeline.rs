//! All stages end to end from one configuration file: corpus, teacher
//! pretraining, main training, emotion fine-tuning and evaluation. With no
//! argument a small built-in configuration runs in well under a minute.
//!
//! ```text
//! cargo run --release --example train_pipeline -- [config.cfg] [work_dir]
//! ```

use std::path::PathBuf;

use savc::config::RunConfig;
use savc::eval;
use savc::syndata::make_corpus;
use savc::train::{self, Dataset, TrainLog};

const SMALL: &str = "
[data]
n_speakers = 4
n_emotions = 3
utterances_per_pair = 12
frames = 32
unit_channels = 8
mel_channels = 10

[model]
unit_channels = 8
mel_channels = 10
conv_channels = 24
gru_hidden = 12
content_dim = 4
speaker_dim = 16
n_emotions = 3

[train]
teacher_steps = 150
main_steps = 300
finetune_steps = 100
lr_main = 0.001
adversarial_window = 50

[eval]
n_pairs = 20
";

fn main() -> savc::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let cfg = match args.get(1) {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse(SMALL)?,
    };
    cfg.validate()?;
    let work: PathBuf = args
        .get(2)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("savc-train-pipeline"));

    let manifest = make_corpus(&cfg.data, work.join("corpus"), 1)?;
    let ds = Dataset::load(&manifest)?;
    println!("corpus: {} utterances ({} held out)", ds.len(), ds.held_out_indices().len());

    let mut log = TrainLog::default();
    let teacher = train::pretrain_teacher(&ds, &cfg.model, &cfg.train, Some(&mut log))?;
    teacher.save(work.join("teacher"))?;
    let (first, last) = ends(&log);
    println!("teacher: total loss {first:.4} -> {last:.4}");

    let mut log = TrainLog::default();
    let main = train::train_main(&ds, &teacher, &cfg.train, Some(&mut log))?;
    main.save(work.join("main"))?;
    log.write_csv(work.join("main.csv"))?;
    let (first, last) = ends(&log);
    println!(
        "main: total loss {first:.4} -> {last:.4}, perturbation raised the loss in {:?} of windows",
        log.ascent_fraction()
    );

    let held = ds.held_out_indices();
    let before = train::student_emotion_accuracy(&main, &ds, &held)?;
    let fine = train::finetune(&main, &ds, &cfg.train, None)?;
    fine.save(work.join("finetuned"))?;
    let after = train::student_emotion_accuracy(&fine, &ds, &held)?;
    println!("held-out student emotion accuracy {before:.3} -> {after:.3} after fine-tuning");

    let pairs = eval::sample_pairs(&ds, cfg.eval.n_pairs, cfg.train.seed);
    let report = eval::eval_report(&fine, &ds, &pairs, &cfg.eval, cfg.train.seed, 1)?;
    report.write(work.join("report"))?;
    println!(
        "report: MCD {:.3} dB (self {:.3}, source-target {:.3}), f0 r {:.3}, energy r {:.3}, closer to target {:.2}",
        report.mcd_mean.unwrap_or(f64::NAN),
        report.self_mcd_mean.unwrap_or(f64::NAN),
        report.source_target_mcd_mean.unwrap_or(f64::NAN),
        report.f0_pearson_mean.unwrap_or(f64::NAN),
        report.energy_pearson_mean.unwrap_or(f64::NAN),
        report.closer_to_target.unwrap_or(f64::NAN),
    );
    println!("outputs under {}", work.display());
    Ok(())
}

fn ends(log: &TrainLog) -> (f64, f64) {
    let first = log.steps.first().map_or(f64::NAN, |s| s.total);
    let last = log.steps.last().map_or(f64::NAN, |s| s.total);
    (first, last)
}

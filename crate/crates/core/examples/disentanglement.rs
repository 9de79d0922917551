//! Trains the attribute encoder with and without style augmentation on the
//! default synthetic corpus and compares how much speaker identity a linear
//! probe can read from the content stream. Settings come from
//! `configs/disentanglement.cfg` unless another config is given.
//!
//! ```text
//! cargo run --release --example disentanglement -- [config.cfg] [main_steps]
//! ```

use std::time::Instant;

use std::path::PathBuf;

use savc::config::RunConfig;
use savc::eval;
use savc::syndata::make_corpus;
use savc::train::{self, Dataset, TrainConfig, TrainLog};

fn main() -> savc::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let path = args
        .get(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/disentanglement.cfg"));
    let mut run = RunConfig::load(&path)?;
    if let Some(steps) = args.get(2).and_then(|s| s.parse().ok()) {
        run.train.main_steps = steps;
    }
    run.validate()?;

    let dir = std::env::temp_dir().join(format!("savc-disentanglement-{}", std::process::id()));
    let manifest = make_corpus(&run.data, &dir, 1)?;
    let ds = Dataset::load(&manifest)?;
    let (model, base) = (run.model, run.train);

    let t = Instant::now();
    let teacher = train::pretrain_teacher(&ds, &model, &base, None)?;
    println!("teacher pretrained in {:.1}s", t.elapsed().as_secs_f64());

    for asa in [true, false] {
        let cfg = TrainConfig {
            asa_enabled: asa,
            ..base.clone()
        };
        let t = Instant::now();
        let mut log = TrainLog::default();
        let ckpt = train::train_main(&ds, &teacher, &cfg, Some(&mut log))?;
        let first = log.steps.first().map(|s| s.losses.rec).unwrap_or_default();
        let last = log.steps.last().map(|s| s.losses.rec).unwrap_or_default();
        let enc = eval::encode_all(&ckpt, &ds, 1)?;
        let probes = eval::probe_summary(&ds, &enc, &run.eval, cfg.seed)?;
        println!(
            "asa={asa}: {:.1}s, L_rec {first:.4} -> {last:.4}, ascent {:?}, speaker<-raw {:.3}, speaker<-content {:.3}, emotion<-prosody {:.3}",
            t.elapsed().as_secs_f64(),
            log.ascent_fraction(),
            probes.speaker_from_raw.accuracy,
            probes.speaker_from_content.accuracy,
            probes.emotion_from_prosody.accuracy,
        );
    }
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}

//! Runs the shipped ablation presets side by side and prints one row per
//! preset: full model, no style augmentation, no prosody stream, and
//! quantized (discrete-unit) input.
//!
//! ```text
//! cargo run --release --example ablations -- [main_steps] [utterances_per_pair]
//! ```
//!
//! The presets train for their configured step counts unless overridden;
//! the defaults here are shortened so the table appears in a few minutes.

use std::path::Path;

use savc::config::RunConfig;
use savc::eval;
use savc::syndata::make_corpus;
use savc::train::{self, Dataset};

const PRESETS: [&str; 4] = ["default", "ablate-asa", "ablate-pm", "ablate-su"];

fn main() -> savc::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let upp: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(16);
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let load = |name: &str| -> savc::Result<RunConfig> {
        let mut cfg = RunConfig::load(configs.join(format!("{name}.cfg")))?;
        cfg.train.main_steps = steps;
        cfg.data.utterances_per_pair = upp;
        cfg.eval.n_pairs = 50;
        cfg.validate()?;
        Ok(cfg)
    };
    // Every preset shares one `[data]` section, so one corpus serves all.
    let dir = std::env::temp_dir().join(format!("savc-ablations-{}", std::process::id()));
    let ds = Dataset::load(&make_corpus(&load("default")?.data, &dir, 1)?)?;

    println!(
        "{:<11} {:>9} {:>9} {:>9} {:>8} {:>8} {:>8}",
        "preset", "spk<-Zc", "emo<-Zp", "MCD", "f0 r", "en r", "closer"
    );
    for name in PRESETS {
        let cfg = load(name)?;
        let teacher = train::pretrain_teacher(&ds, &cfg.model, &cfg.train, None)?;
        let ckpt = train::train_main(&ds, &teacher, &cfg.train, None)?;
        let pairs = eval::sample_pairs(&ds, cfg.eval.n_pairs, cfg.train.seed);
        let r = eval::eval_report(&ckpt, &ds, &pairs, &cfg.eval, cfg.train.seed, 1)?;
        let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
        println!(
            "{name:<11} {:>9.3} {:>9.3} {:>9} {:>8} {:>8} {:>8}",
            r.probes.speaker_from_content.accuracy,
            r.probes.emotion_from_prosody.accuracy,
            f(r.mcd_mean),
            f(r.f0_pearson_mean),
            f(r.energy_pearson_mean),
            f(r.closer_to_target),
        );
    }
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}

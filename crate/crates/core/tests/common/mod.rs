//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use savc::asa::{PerturbMode, StyleNoise};
use savc::nets::{self, Checkpoint, EncoderConfig, ProsodyNorm, RngState, Stage, PROSODY_INPUTS};
use savc::syndata::{make_corpus, SynthSpec};
use savc::tensorio::Manifest;
use savc::train::{Batch, Dataset, TrainConfig};

pub fn noise(shape: (usize, usize), seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn(shape, |_| rng.sample(StandardNormal))
}

pub fn noise_for(cfg: &EncoderConfig, batch: usize, seed: u64) -> StyleNoise {
    StyleNoise::draw(&mut ChaCha8Rng::seed_from_u64(seed), batch, cfg.unit_channels)
}

/// Every dimension at most 8.
pub fn tiny_model() -> EncoderConfig {
    EncoderConfig {
        unit_channels: 4,
        mel_channels: 4,
        conv_blocks: 2,
        kernel: 3,
        dilations: vec![1, 2],
        conv_channels: 6,
        gru_hidden: 4,
        content_dim: 3,
        prosody_dim: 2,
        speaker_dim: 5,
        n_style_tokens: 3,
        token_dim: 4,
        n_emotions: 3,
    }
}

/// A random batch of `b` utterances of `w` frames with cached teacher targets.
pub fn tiny_batch(cfg: &EncoderConfig, b: usize, w: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let units = (0..b)
        .map(|i| {
            let shift: f64 = rng.random_range(-1.0..1.0);
            &noise((w, cfg.unit_channels), seed + 100 + i as u64) * (1.0 + i as f64 * 0.3) + shift
        })
        .collect();
    let mut targets = Array2::zeros((b, cfg.n_emotions));
    for i in 0..b {
        targets[[i, i % cfg.n_emotions]] = 1.0;
    }
    Batch {
        frames: w,
        units,
        mel: noise((b * w, cfg.mel_channels), seed + 1),
        prosody: noise((b * w, PROSODY_INPUTS), seed + 2),
        z_p: Some(noise((b * w, cfg.prosody_dim), seed + 3)),
        speakers: (0..b).map(|i| i % 3).collect(),
        targets,
    }
}

pub fn dummy_checkpoint(cfg: &EncoderConfig) -> Checkpoint {
    let mut params = nets::init_main(cfg, 3, PerturbMode::LearnedScale, 11);
    for (k, v) in nets::init_teacher(cfg, 11).iter() {
        params.insert(k.clone(), v.clone());
    }
    params.round_to_f32();
    Checkpoint {
        stage: Stage::Main,
        model: cfg.clone(),
        train: TrainConfig::default(),
        speakers: vec!["spk00".into(), "spk01".into(), "spk02".into()],
        emotions: vec!["neutral".into(), "happy".into(), "angry".into()],
        prosody_norm: ProsodyNorm::default(),
        rng_state: RngState::capture(&ChaCha8Rng::seed_from_u64(3)),
        step_count: 17,
        params,
    }
}

/// Relative path → bytes for every file under `dir`.
pub fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// A corpus small enough for multi-stage training tests.
pub fn small_spec() -> SynthSpec {
    SynthSpec {
        n_speakers: 3,
        n_emotions: 3,
        utterances_per_pair: 10,
        frames: 24,
        unit_channels: 6,
        mel_channels: 6,
        ..SynthSpec::default()
    }
}

pub fn model_for(spec: &SynthSpec) -> EncoderConfig {
    EncoderConfig {
        unit_channels: spec.unit_channels,
        mel_channels: spec.mel_channels,
        conv_blocks: 2,
        kernel: 3,
        dilations: vec![1, 2],
        conv_channels: 12,
        gru_hidden: 8,
        content_dim: 4,
        prosody_dim: 2,
        speaker_dim: 8,
        n_style_tokens: 4,
        token_dim: 6,
        n_emotions: spec.n_emotions,
    }
}

pub fn quick_train() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        teacher_steps: 20,
        main_steps: 20,
        finetune_steps: 10,
        adversarial_window: 10,
        ..TrainConfig::default()
    }
}

pub struct Corpus {
    pub dir: tempfile::TempDir,
    pub manifest: Manifest,
    pub ds: Dataset,
}

pub fn corpus(spec: &SynthSpec) -> Corpus {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_corpus(spec, dir.path(), 1).unwrap();
    let ds = Dataset::load(&manifest).unwrap();
    Corpus { dir, manifest, ds }
}

pub fn path(dir: &tempfile::TempDir, rel: &str) -> PathBuf {
    dir.path().join(rel)
}

/// One analytic-versus-numeric gradient comparison.
#[derive(Debug)]
pub struct FdSample {
    pub param: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

impl FdSample {
    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale < 1e-7 {
            return (self.analytic - self.numeric).abs();
        }
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Compares taped gradients of the main objective against central finite
/// differences of the untaped objective with step `h`, on up to three
/// entries of every parameter selected by `include`. Parameters behind the
/// gradient reversal node are compared against `-grl_lambda` times the
/// numeric derivative.
pub fn fd_check_main(
    params: &savc::nets::ParamSet,
    step: &savc::train::MainStep<'_>,
    include: impl Fn(&str) -> bool,
    h: f64,
) -> Vec<FdSample> {
    use savc::autograd::Graph;
    use savc::train::{evaluate_main, loss_total, main_objective};

    let mut g = Graph::new();
    let bound = params.bind(&mut g, |n| include(n));
    let (loss, _) = main_objective(&mut g, &bound, step).unwrap();
    let grads = g.backward(loss);
    let objective = |p: &savc::nets::ParamSet| loss_total(&evaluate_main(p, step).unwrap(), step.cfg);
    let mut out = Vec::new();
    for (name, m) in params.iter() {
        if !include(name) {
            continue;
        }
        let v = bound.var(name);
        let (r, c) = m.dim();
        let mut picks = vec![(0, 0), (r / 2, c / 2), (r - 1, c - 1)];
        picks.dedup();
        for idx in picks {
            let analytic = grads.get(v).map(|gm| gm[idx]).unwrap_or(0.0);
            let mut up = params.clone();
            up.get_mut(name).unwrap()[idx] += h;
            let mut dn = params.clone();
            dn.get_mut(name).unwrap()[idx] -= h;
            let mut numeric = (objective(&up) - objective(&dn)) / (2.0 * h);
            if name.starts_with("asa.") {
                numeric *= -step.cfg.grl_lambda;
            }
            out.push(FdSample {
                param: name.clone(),
                index: idx,
                analytic,
                numeric,
            });
        }
    }
    out
}

/// Tiny model parameters (student plus teacher heads).
pub fn tiny_params(cfg: &EncoderConfig, seed: u64) -> savc::nets::ParamSet {
    let mut p = nets::init_main(cfg, 3, PerturbMode::LearnedScale, seed);
    for (k, v) in nets::init_teacher(cfg, seed).iter() {
        p.insert(k.clone(), v.clone());
    }
    p
}

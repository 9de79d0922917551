//! Synthetic soft-unit corpora with known content, speaker, prosody and
//! emotion factors.
//!
//! Generative recipe (all matrices below come from a fixed recipe RNG that
//! depends only on the dimensions, so any [`FactorSet`] can be re-rendered
//! without the corpus seed):
//!
//! * content `x[t]` (`content_dim` channels) is an AR(1) walk with
//!   coefficient [`CONTENT_AR`].
//! * centred prosody: `f0c[t] = (f0[t] - F0_REF)` on voiced frames and 0
//!   elsewhere; `ec[t] = energy[t] - ENERGY_REF`.
//! * `base[t, c] = (A x[t])_c + p_c f0c[t] + q_c ec[t]`
//! * `units[t, c] = speaker_sigma_c * base[t, c] + speaker_mu_c`
//! * `mel_base[t, m] = tanh((B x[t])_m) + a_m f0c[t] + ENERGY_GAIN * ec[t]`,
//!   where `a` has zero mean over mel channels.
//! * `mel[t, m] = mel_sigma_m * mel_base[t, m] + mel_mu_m`, with
//!   `mel_mu = P speaker_mu / sqrt(C)` and
//!   `mel_sigma = exp(Q ln(speaker_sigma) / sqrt(C))`.
//!
//! Speaker identity therefore reaches the units only through a per-channel
//! affine map. Emotion `k` of `K` selects a contour family placed at angle
//! `2 pi k / K`: f0 level and slope, energy level and variability all move
//! with `cos`/`sin` of that angle.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensorio::{self, Manifest, Tensor, UtteranceRecord};

pub const F0_REF: f64 = 5.0;
pub const ENERGY_REF: f64 = -1.0;
pub const ENERGY_GAIN: f64 = 1.5;
pub const CONTENT_AR: f64 = 0.9;
const RECIPE_SEED: u64 = 0x5A5C_0001;

/// Label names for the default five emotion classes.
pub const EMOTION_NAMES: [&str; 5] = ["neutral", "happy", "angry", "sad", "surprise"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_speakers: usize,
    pub n_emotions: usize,
    pub utterances_per_pair: usize,
    pub frames: usize,
    pub unit_channels: usize,
    pub mel_channels: usize,
    pub seed: u64,
    pub speaker_scale_range: (f64, f64),
    pub speaker_shift_range: (f64, f64),
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_speakers: 10,
            n_emotions: 5,
            utterances_per_pair: 40,
            frames: 64,
            unit_channels: 16,
            mel_channels: 20,
            seed: 1234,
            // Symmetric in log scale. Much wider ranges leave speaker traces
            // in the content code that augmentation does not remove at the
            // default model size.
            speaker_scale_range: (1.0 / 1.4, 1.4),
            speaker_shift_range: (-1.0, 1.0),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.n_speakers < 2 {
            return fail(format!("n_speakers must be >= 2, got {}", self.n_speakers));
        }
        if self.n_emotions < 1 {
            return fail("n_emotions must be >= 1".into());
        }
        if self.utterances_per_pair < 1 {
            return fail("utterances_per_pair must be >= 1".into());
        }
        if self.frames < 8 {
            return fail(format!("frames must be >= 8, got {}", self.frames));
        }
        if self.unit_channels < 4 || self.mel_channels < 4 {
            return fail("unit_channels and mel_channels must be >= 4".into());
        }
        let (slo, shi) = self.speaker_scale_range;
        if !(slo > 0.0 && slo < shi) {
            return fail(format!("speaker_scale_range must satisfy 0 < lo < hi, got {slo}..{shi}"));
        }
        let (mlo, mhi) = self.speaker_shift_range;
        if !(mlo < mhi) {
            return fail(format!("speaker_shift_range must satisfy lo < hi, got {mlo}..{mhi}"));
        }
        Ok(())
    }

    pub fn content_dim(&self) -> usize {
        content_dim(self.unit_channels)
    }

    pub fn record_count(&self) -> usize {
        self.n_speakers * self.n_emotions * self.utterances_per_pair
    }
}

pub fn content_dim(unit_channels: usize) -> usize {
    (unit_channels / 2).max(2)
}

pub fn speaker_name(i: usize) -> String {
    format!("spk{i:02}")
}

pub fn emotion_name(k: usize, n_emotions: usize) -> String {
    if n_emotions == EMOTION_NAMES.len() {
        EMOTION_NAMES[k].to_string()
    } else {
        format!("emo{k}")
    }
}

/// Ground-truth factors of one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSet {
    /// `frames x content_dim`, row-major.
    pub content: Vec<Vec<f64>>,
    pub speaker_mu: Vec<f64>,
    pub speaker_sigma: Vec<f64>,
    /// Log-f0, 0 on unvoiced frames.
    pub f0_contour: Vec<f64>,
    pub voicing: Vec<bool>,
    pub energy_contour: Vec<f64>,
    pub emotion_id: usize,
    pub mel_channels: usize,
}

impl FactorSet {
    pub fn frames(&self) -> usize {
        self.content.len()
    }

    pub fn unit_channels(&self) -> usize {
        self.speaker_mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.frames();
        if w == 0 {
            return Err(Error::Validation("empty content".into()));
        }
        let cd = content_dim(self.unit_channels());
        if self.content.iter().any(|r| r.len() != cd) {
            return Err(Error::Shape(format!("content rows must have {cd} channels")));
        }
        if self.speaker_sigma.len() != self.unit_channels() {
            return Err(Error::Shape("speaker_mu / speaker_sigma length mismatch".into()));
        }
        if let Some(s) = self.speaker_sigma.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Validation(format!("speaker_sigma must be positive, got {s}")));
        }
        if self.f0_contour.len() != w || self.voicing.len() != w || self.energy_contour.len() != w {
            return Err(Error::Shape("contour lengths must equal frame count".into()));
        }
        for (f, &v) in self.f0_contour.iter().zip(&self.voicing) {
            if v && !f.is_finite() || !v && *f != 0.0 {
                return Err(Error::Validation("f0 must be finite when voiced and 0 otherwise".into()));
            }
        }
        if self.mel_channels < 1 {
            return Err(Error::Validation("mel_channels must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fixed rendering matrices for a given dimension triple.
#[derive(Debug, Clone)]
pub struct Recipe {
    pub unit_mix: Array2<f64>,
    pub unit_f0: Array1<f64>,
    pub unit_energy: Array1<f64>,
    pub mel_mix: Array2<f64>,
    pub mel_f0: Array1<f64>,
    pub mel_shift: Array2<f64>,
    pub mel_scale: Array2<f64>,
}

impl Recipe {
    pub fn new(unit_channels: usize, mel_channels: usize) -> Self {
        let cd = content_dim(unit_channels);
        let mut rng = ChaCha8Rng::from_seed(derive_seed(RECIPE_SEED, &[unit_channels as u64, mel_channels as u64]));
        let mut normal = |r: usize, c: usize, scale: f64| {
            Array2::from_shape_fn((r, c), |_| scale * rng.sample::<f64, _>(StandardNormal))
        };
        let unit_mix = normal(unit_channels, cd, 1.0 / (cd as f64).sqrt());
        let unit_f0 = normal(unit_channels, 1, 1.0).column(0).to_owned();
        let unit_energy = normal(unit_channels, 1, 1.0).column(0).to_owned();
        let mel_mix = normal(mel_channels, cd, 1.5 / (cd as f64).sqrt());
        let raw = normal(mel_channels, 1, 1.0).column(0).to_owned();
        let centred = &raw - raw.mean().unwrap();
        let norm = (centred.mapv(|v| v * v).sum() / mel_channels as f64).sqrt();
        let mel_f0 = centred * (2.0 / norm);
        let mel_shift = normal(mel_channels, unit_channels, 1.0);
        let mel_scale = normal(mel_channels, unit_channels, 1.0);
        Self {
            unit_mix,
            unit_f0,
            unit_energy,
            mel_mix,
            mel_f0,
            mel_shift,
            mel_scale,
        }
    }

    /// Mel-domain speaker affine parameters `(mel_mu, mel_sigma)`.
    pub fn mel_speaker(&self, speaker_mu: &[f64], speaker_sigma: &[f64]) -> (Array1<f64>, Array1<f64>) {
        let k = 1.0 / (speaker_mu.len() as f64).sqrt();
        let mu = Array1::from_vec(speaker_mu.to_vec());
        let ls = Array1::from_vec(speaker_sigma.iter().map(|s| s.ln()).collect());
        (self.mel_shift.dot(&mu) * k, (self.mel_scale.dot(&ls) * k).mapv(f64::exp))
    }
}

/// Rendered tensors of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub units: Array2<f64>,
    pub mel: Array2<f64>,
    pub f0: Array1<f64>,
    pub energy: Array1<f64>,
}

/// Speaker-independent unit sequence (`base` in the module recipe).
pub fn render_base(f: &FactorSet, recipe: &Recipe) -> Array2<f64> {
    let w = f.frames();
    let c = f.unit_channels();
    let content = content_matrix(f);
    let mixed = content.dot(&recipe.unit_mix.t());
    let mut base = Array2::zeros((w, c));
    for t in 0..w {
        let (f0c, ec) = centred_prosody(f, t);
        for ch in 0..c {
            base[[t, ch]] = mixed[[t, ch]] + recipe.unit_f0[ch] * f0c + recipe.unit_energy[ch] * ec;
        }
    }
    base
}

fn content_matrix(f: &FactorSet) -> Array2<f64> {
    let cd = f.content[0].len();
    Array2::from_shape_fn((f.frames(), cd), |(t, j)| f.content[t][j])
}

fn centred_prosody(f: &FactorSet, t: usize) -> (f64, f64) {
    let f0c = if f.voicing[t] { f.f0_contour[t] - F0_REF } else { 0.0 };
    (f0c, f.energy_contour[t] - ENERGY_REF)
}

pub fn render_utterance(f: &FactorSet) -> Result<Rendered> {
    f.validate()?;
    let recipe = Recipe::new(f.unit_channels(), f.mel_channels);
    Ok(render_with(f, &recipe))
}

pub fn render_with(f: &FactorSet, recipe: &Recipe) -> Rendered {
    let w = f.frames();
    let base = render_base(f, recipe);
    let sigma = Array1::from_vec(f.speaker_sigma.clone());
    let mu = Array1::from_vec(f.speaker_mu.clone());
    let units = &base * &sigma + &mu;

    let content = content_matrix(f);
    let mel_mixed = content.dot(&recipe.mel_mix.t());
    let (mel_mu, mel_sigma) = recipe.mel_speaker(&f.speaker_mu, &f.speaker_sigma);
    let m = f.mel_channels;
    let mut mel = Array2::zeros((w, m));
    for t in 0..w {
        let (f0c, ec) = centred_prosody(f, t);
        for k in 0..m {
            let b = mel_mixed[[t, k]].tanh() + recipe.mel_f0[k] * f0c + ENERGY_GAIN * ec;
            mel[[t, k]] = mel_sigma[k] * b + mel_mu[k];
        }
    }
    Rendered {
        units,
        mel,
        f0: Array1::from_vec(f.f0_contour.clone()),
        energy: Array1::from_vec(f.energy_contour.clone()),
    }
}

/// Contour-family parameters of emotion `k` out of `n`.
#[derive(Debug, Clone, Copy)]
pub struct EmotionFamily {
    pub f0_level: f64,
    pub f0_slope: f64,
    pub f0_wiggle: f64,
    pub energy_level: f64,
    pub energy_var: f64,
}

impl EmotionFamily {
    pub fn of(k: usize, n: usize) -> Self {
        let phi = 2.0 * std::f64::consts::PI * k as f64 / n.max(1) as f64;
        Self {
            f0_level: F0_REF + 0.2 * phi.cos(),
            f0_slope: 0.3 * phi.sin(),
            f0_wiggle: 0.06 + 0.03 * (k % 2) as f64,
            energy_level: ENERGY_REF + 0.4 * phi.sin(),
            energy_var: 0.2 + 0.08 * phi.cos(),
        }
    }
}

/// Per-speaker style parameters, a pure function of `(seed, speaker)`.
pub fn speaker_params(spec: &SynthSpec, speaker: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::from_seed(derive_seed(spec.seed, &[0x5350_4b52, speaker as u64]));
    let (mlo, mhi) = spec.speaker_shift_range;
    let (slo, shi) = spec.speaker_scale_range;
    let mu = (0..spec.unit_channels).map(|_| rng.random_range(mlo..mhi)).collect();
    let sigma = (0..spec.unit_channels)
        .map(|_| rng.random_range(slo.ln()..shi.ln()).exp())
        .collect();
    (mu, sigma)
}

fn ar1<R: Rng + ?Sized>(rng: &mut R, w: usize, rho: f64) -> Vec<f64> {
    let innov = (1.0 - rho * rho).sqrt();
    let mut x: f64 = rng.sample(StandardNormal);
    let mut out = Vec::with_capacity(w);
    for _ in 0..w {
        out.push(x);
        let e: f64 = rng.sample(StandardNormal);
        x = rho * x + innov * e;
    }
    out
}

/// Draws the factors for `(speaker, emotion, index)`.
pub fn sample_factors(spec: &SynthSpec, speaker: usize, emotion: usize, index: usize) -> FactorSet {
    let (speaker_mu, speaker_sigma) = speaker_params(spec, speaker);
    let mut rng = ChaCha8Rng::from_seed(derive_seed(
        spec.seed,
        &[0x5554_5452, speaker as u64, emotion as u64, index as u64],
    ));
    let w = spec.frames;
    let cd = spec.content_dim();
    let cols: Vec<Vec<f64>> = (0..cd).map(|_| ar1(&mut rng, w, CONTENT_AR)).collect();
    let content = (0..w).map(|t| cols.iter().map(|c| c[t]).collect()).collect();

    let fam = EmotionFamily::of(emotion, spec.n_emotions);
    let mut voicing = Vec::with_capacity(w);
    let mut voiced = true;
    for _ in 0..w {
        voicing.push(voiced);
        let flip: f64 = rng.random();
        voiced = if voiced { flip >= 0.05 } else { flip < 0.3 };
    }
    let offset: f64 = 0.03 * rng.sample::<f64, _>(StandardNormal);
    let wiggle = ar1(&mut rng, w, 0.85);
    let f0_contour = (0..w)
        .map(|t| {
            if !voicing[t] {
                return 0.0;
            }
            let pos = t as f64 / (w - 1) as f64 - 0.5;
            fam.f0_level + offset + fam.f0_slope * pos + fam.f0_wiggle * wiggle[t]
        })
        .collect();
    let e_walk = ar1(&mut rng, w, 0.8);
    let e_offset: f64 = 0.05 * rng.sample::<f64, _>(StandardNormal);
    let energy_contour = (0..w)
        .map(|t| {
            let v = if voicing[t] { 0.15 } else { -0.15 };
            fam.energy_level + e_offset + fam.energy_var * e_walk[t] + v
        })
        .collect();
    FactorSet {
        content,
        speaker_mu,
        speaker_sigma,
        f0_contour,
        voicing,
        energy_contour,
        emotion_id: emotion,
        mel_channels: spec.mel_channels,
    }
}

/// Seed bytes for a counter-based generator, from a base seed and a path of
/// integer keys.
pub fn derive_seed(seed: u64, keys: &[u64]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for k in keys {
        h.update(k.to_le_bytes());
    }
    h.finalize().into()
}

fn utterance_id(speaker: usize, emotion: &str, index: usize) -> String {
    format!("{}_{}_{index:03}", speaker_name(speaker), emotion)
}

/// Writes a complete corpus under `dir` and returns its manifest (also saved
/// as `dir/manifest.json`). `jobs > 1` renders utterances on a thread pool;
/// output does not depend on it.
pub fn make_corpus(spec: &SynthSpec, dir: impl AsRef<Path>, jobs: usize) -> Result<Manifest> {
    spec.validate()?;
    let dir = dir.as_ref();
    for sub in ["units", "mel", "f0", "energy", "factors"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let recipe = Recipe::new(spec.unit_channels, spec.mel_channels);
    let mut jobs_list = Vec::with_capacity(spec.record_count());
    for s in 0..spec.n_speakers {
        for e in 0..spec.n_emotions {
            for i in 0..spec.utterances_per_pair {
                jobs_list.push((s, e, i));
            }
        }
    }
    let render_one = |&(s, e, i): &(usize, usize, usize)| -> Result<UtteranceRecord> {
        let emotion = emotion_name(e, spec.n_emotions);
        let id = utterance_id(s, &emotion, i);
        let factors = sample_factors(spec, s, e, i);
        let r = render_with(&factors, &recipe);
        let rec = UtteranceRecord {
            units_path: format!("units/{id}.savt"),
            mel_path: format!("mel/{id}.savt"),
            f0_path: format!("f0/{id}.savt"),
            energy_path: format!("energy/{id}.savt"),
            factors_path: Some(format!("factors/{id}.json")),
            id,
            speaker: speaker_name(s),
            emotion,
        };
        tensorio::write_tensor(dir.join(&rec.units_path), &Tensor::from_array2(&r.units)?)?;
        tensorio::write_tensor(dir.join(&rec.mel_path), &Tensor::from_array2(&r.mel)?)?;
        tensorio::write_tensor(dir.join(&rec.f0_path), &Tensor::from_array1(&r.f0)?)?;
        tensorio::write_tensor(dir.join(&rec.energy_path), &Tensor::from_array1(&r.energy)?)?;
        let fp = dir.join(rec.factors_path.as_ref().unwrap());
        let text = serde_json::to_string(&factors)?;
        fs::write(&fp, text).map_err(|e| Error::io(&fp, e))?;
        Ok(rec)
    };
    let records: Vec<UtteranceRecord> = if jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
        pool.install(|| jobs_list.par_iter().map(render_one).collect::<Result<Vec<_>>>())?
    } else {
        jobs_list.iter().map(render_one).collect::<Result<Vec<_>>>()?
    };
    let mut manifest = Manifest::new(dir, 16000);
    manifest.utterances = records;
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Loads the factors a synthetic record was rendered from.
pub fn ground_truth(manifest: &Manifest, rec: &UtteranceRecord) -> Result<FactorSet> {
    let rel = rec
        .factors_path
        .as_ref()
        .ok_or_else(|| Error::NoGroundTruth(rec.id.clone()))?;
    let p = manifest.resolve(rel);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let f: FactorSet = serde_json::from_str(&text)?;
    f.validate()?;
    Ok(f)
}

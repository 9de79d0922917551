//! Objective metrics, leakage probes and the evaluation report.
//!
//! Speaker similarity on synthetic data has no verification model to lean
//! on, so the speaker-embedding analog is the mel's per-channel `[mu; sigma]`
//! vector, centred by the corpus-wide average (speaker identity is carried by
//! exactly those statistics in the synthetic recipe).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asa::{channel_stats, instance_normalize, EPS};
use crate::convert;
use crate::error::{Error, Result};
use crate::nets::{Checkpoint, SpeakerRef};
use crate::syndata::{self, FactorSet, Recipe};
use crate::train::Dataset;

/// `10 sqrt(2) / ln 10`.
pub const MCD_SCALE: f64 = 6.141_851_463_713_754;

/// A monotone alignment between two sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub path: Vec<(usize, usize)>,
    pub cost: f64,
}

fn frame_dist(x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>) -> f64 {
    x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Dynamic time warping with steps `(1,0)`, `(0,1)`, `(1,1)` and Euclidean
/// frame distance. Ties prefer the diagonal step.
pub fn dtw_align(x: &Array2<f64>, y: &Array2<f64>) -> Result<Alignment> {
    let (n, m) = (x.nrows(), y.nrows());
    if n == 0 || m == 0 {
        return Err(Error::Shape("dtw needs non-empty sequences".into()));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::Shape(format!("dtw dims differ: {} vs {}", x.ncols(), y.ncols())));
    }
    let mut acc = Array2::from_elem((n, m), f64::INFINITY);
    for i in 0..n {
        for j in 0..m {
            let d = frame_dist(x.row(i), y.row(j));
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let mut best = f64::INFINITY;
                if i > 0 && j > 0 {
                    best = acc[[i - 1, j - 1]];
                }
                if i > 0 {
                    best = best.min(acc[[i - 1, j]]);
                }
                if j > 0 {
                    best = best.min(acc[[i, j - 1]]);
                }
                best
            };
            acc[[i, j]] = d + prev;
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let step = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let diag = acc[[i - 1, j - 1]];
            let up = acc[[i - 1, j]];
            let left = acc[[i, j - 1]];
            if diag <= up && diag <= left {
                (i - 1, j - 1)
            } else if up <= left {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        (i, j) = step;
        path.push(step);
    }
    path.reverse();
    Ok(Alignment {
        path,
        cost: acc[[n - 1, m - 1]],
    })
}

/// Framewise mel-cepstral distortion in dB, all channels included.
pub fn mcd(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    mcd_with(x, y, false)
}

/// Framewise mel-cepstral distortion; `skip_c0` drops channel 0.
pub fn mcd_with(x: &Array2<f64>, y: &Array2<f64>, skip_c0: bool) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::Shape(format!("mcd: {:?} vs {:?}", x.dim(), y.dim())));
    }
    if x.nrows() == 0 {
        return Err(Error::Shape("mcd of empty sequences".into()));
    }
    let start = usize::from(skip_c0);
    let dists: Vec<f64> = x
        .rows()
        .into_iter()
        .zip(y.rows())
        .map(|(a, b)| frame_dist(a.slice(ndarray::s![start..]), b.slice(ndarray::s![start..])))
        .collect();
    Ok(MCD_SCALE * pairwise_sum(&dists) / x.nrows() as f64)
}

/// MCD after aligning `x` and `y` with [`dtw_align`]; averages over path steps.
pub fn mcd_dtw(x: &Array2<f64>, y: &Array2<f64>, skip_c0: bool) -> Result<f64> {
    let a = dtw_align(x, y)?;
    let start = usize::from(skip_c0);
    let dists: Vec<f64> = a
        .path
        .iter()
        .map(|&(i, j)| frame_dist(x.row(i).slice(ndarray::s![start..]), y.row(j).slice(ndarray::s![start..])))
        .collect();
    Ok(MCD_SCALE * pairwise_sum(&dists) / dists.len() as f64)
}

/// Sum with a fixed binary reduction tree, so results do not depend on how
/// the inputs were produced.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = pairwise_sum(v) / n;
    let sq: Vec<f64> = v.iter().map(|x| (x - m) * (x - m)).collect();
    (m, (pairwise_sum(&sq) / n).sqrt())
}

/// Sample Pearson correlation. `None` when fewer than two frames survive the
/// mask or either side is constant (the coefficient is undefined there).
pub fn pearson(a: &[f64], b: &[f64], mask: Option<&[bool]>) -> Result<Option<f64>> {
    if a.len() != b.len() || mask.is_some_and(|m| m.len() != a.len()) {
        return Err(Error::Shape("pearson inputs differ in length".into()));
    }
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let (xs, ys): (Vec<f64>, Vec<f64>) = (0..a.len()).filter(|&i| keep(i)).map(|i| (a[i], b[i])).unzip();
    if xs.len() < 2 {
        return Ok(None);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape("cosine inputs differ in length".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Validation("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Held-out accuracy of a linear probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Only one class present; accuracy is trivially 1.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOptions {
    pub epochs: usize,
    pub lr: f64,
    pub train_fraction: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.1,
            train_fraction: 0.8,
        }
    }
}

/// Softmax-regression probe with default options.
pub fn leakage_probe(x: &Array2<f64>, labels: &[usize], seed: u64) -> Result<ProbeResult> {
    leakage_probe_with(x, labels, seed, &ProbeOptions::default())
}

/// Multinomial logistic regression trained by full-batch gradient descent on
/// a seed-determined split. Features are standardized with training-split
/// statistics.
pub fn leakage_probe_with(x: &Array2<f64>, labels: &[usize], seed: u64, opts: &ProbeOptions) -> Result<ProbeResult> {
    let n = x.nrows();
    if labels.len() != n {
        return Err(Error::Shape("probe labels and rows differ".into()));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if let Some((c, k)) = counts.iter().find(|(_, &k)| k < 2) {
        return Err(Error::Validation(format!("class {c} has only {k} sample(s)")));
    }
    if counts.len() < 2 {
        return Ok(ProbeResult {
            accuracy: 1.0,
            degenerate: true,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * opts.train_fraction).round() as usize).clamp(1, n - 1);
    let (tr, te) = order.split_at(n_train);
    let classes: Vec<usize> = counts.keys().copied().collect();
    let k = classes.len();
    let cls = |l: usize| classes.binary_search(&l).unwrap();

    let xt = x.select(Axis(0), tr);
    let mean = xt.mean_axis(Axis(0)).unwrap();
    let std = xt.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let stdz = |m: Array2<f64>| (m - &mean) / &std;
    let xt = stdz(xt);
    let xe = stdz(x.select(Axis(0), te));
    let mut y = Array2::<f64>::zeros((tr.len(), k));
    for (r, &i) in tr.iter().enumerate() {
        y[[r, cls(labels[i])]] = 1.0;
    }
    let d = x.ncols();
    let mut w = Array2::<f64>::zeros((d, k));
    let mut b = Array1::<f64>::zeros(k);
    let inv_n = 1.0 / tr.len() as f64;
    for _ in 0..opts.epochs {
        let mut p = xt.dot(&w) + &b;
        softmax_rows(&mut p);
        let err = p - &y;
        w = w - xt.t().dot(&err) * (opts.lr * inv_n);
        b = b - err.sum_axis(Axis(0)) * (opts.lr * inv_n);
    }
    let scores = xe.dot(&w) + &b;
    let hits = te
        .iter()
        .zip(scores.rows())
        .filter(|(&i, row)| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == cls(labels[i])
        })
        .count();
    Ok(ProbeResult {
        accuracy: hits as f64 / te.len() as f64,
        degenerate: false,
    })
}

fn softmax_rows(p: &mut Array2<f64>) {
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

/// Per-utterance probe features: per-channel time mean followed by time std.
pub fn summary_features(x: &Array2<f64>) -> Array1<f64> {
    let m = x.mean_axis(Axis(0)).unwrap();
    let s = x.std_axis(Axis(0), 0.0);
    ndarray::concatenate(Axis(0), &[m.view(), s.view()]).unwrap()
}

pub fn feature_matrix(rows: &[Array1<f64>]) -> Array2<f64> {
    let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).unwrap()
}

/// Per-frame `(f0 proxy, energy proxy)` read off a mel sequence.
///
/// The mel is instance-normalized first so that speaker statistics drop out.
/// The energy proxy is the across-channel mean; the f0 proxy is the
/// projection onto the zero-mean pitch pattern of the synthetic recipe.
pub fn prosody_proxies(mel: &Array2<f64>, f0_pattern: &Array1<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    if f0_pattern.len() != mel.ncols() {
        return Err(Error::Shape("pitch pattern length differs from mel channels".into()));
    }
    let n = instance_normalize(mel, &channel_stats(mel, EPS)?)?;
    let norm = f0_pattern.dot(f0_pattern).max(1e-12);
    let f0 = n.rows().into_iter().map(|r| r.dot(f0_pattern) / norm).collect();
    let energy = n.rows().into_iter().map(|r| r.mean().unwrap()).collect();
    Ok((f0, energy))
}

/// `[mu; sigma]` of a mel sequence.
pub fn style_vector(mel: &Array2<f64>) -> Result<Array1<f64>> {
    let s = channel_stats(mel, EPS)?;
    Ok(ndarray::concatenate(Axis(0), &[s.mu.view(), s.sigma.view()]).unwrap())
}

/// Mean style vector of each speaker over all of its utterances, plus the
/// corpus-wide mean.
#[derive(Debug, Clone)]
pub struct SpeakerStyles {
    pub per_speaker: Vec<Array1<f64>>,
    pub global: Array1<f64>,
}

impl SpeakerStyles {
    pub fn compute(ds: &Dataset) -> Result<Self> {
        let dim = 2 * ds.data[0].mel.ncols();
        let mut sums = vec![Array1::<f64>::zeros(dim); ds.speakers.len()];
        let mut counts = vec![0usize; ds.speakers.len()];
        for (u, &s) in ds.data.iter().zip(&ds.speaker_ids) {
            sums[s] += &style_vector(&u.mel)?;
            counts[s] += 1;
        }
        let per_speaker: Vec<Array1<f64>> = sums
            .into_iter()
            .zip(counts)
            .map(|(s, c)| s / c.max(1) as f64)
            .collect();
        let global = per_speaker.iter().fold(Array1::zeros(dim), |a, b| a + b) / per_speaker.len() as f64;
        Ok(Self { per_speaker, global })
    }

    /// Euclidean distance between a style vector and speaker `s`'s mean.
    pub fn distance(&self, v: &Array1<f64>, s: usize) -> f64 {
        (v - &self.per_speaker[s]).mapv(|d| d * d).sum().sqrt()
    }

    /// Synthetic speaker similarity of a converted mel to speaker `s`.
    pub fn ses(&self, v: &Array1<f64>, s: usize) -> Result<f64> {
        let a = v - &self.global;
        let b = &self.per_speaker[s] - &self.global;
        cosine_sim(a.as_slice().unwrap(), b.as_slice().unwrap())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_pairs: usize,
    pub mcd_exclude_c0: bool,
    pub mcd_dtw: bool,
    pub probe_epochs: usize,
    pub probe_lr: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_pairs: 100,
            mcd_exclude_c0: false,
            mcd_dtw: false,
            probe_epochs: 200,
            probe_lr: 0.1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.probe_epochs == 0 || !(self.probe_lr > 0.0) {
            return Err(Error::Validation("probe_epochs and probe_lr must be positive".into()));
        }
        Ok(())
    }

    fn probe_options(&self) -> ProbeOptions {
        ProbeOptions {
            epochs: self.probe_epochs,
            lr: self.probe_lr,
            ..ProbeOptions::default()
        }
    }

    fn mcd(&self, x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
        if self.mcd_dtw {
            mcd_dtw(x, y, self.mcd_exclude_c0)
        } else {
            mcd_with(x, y, self.mcd_exclude_c0)
        }
    }
}

/// Metrics of one converted pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub source: String,
    pub source_speaker: String,
    pub target: String,
    /// Against the ground-truth rendering in the target voice; absent when
    /// the source has no recorded factors.
    pub mcd: Option<f64>,
    /// Source mel against the same ground truth.
    pub source_target_mcd: Option<f64>,
    /// Self-conversion against the source mel.
    pub self_mcd: f64,
    pub f0_pearson: Option<f64>,
    pub energy_pearson: Option<f64>,
    pub ses: f64,
    pub dist_to_target: f64,
    pub dist_to_source: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub speaker_from_content: ProbeResult,
    pub speaker_from_raw: ProbeResult,
    pub emotion_from_prosody: ProbeResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub stage: String,
    pub pairs: Vec<PairMetrics>,
    pub mcd_mean: Option<f64>,
    pub mcd_std: Option<f64>,
    pub mcd_skipped: usize,
    pub self_mcd_mean: Option<f64>,
    pub source_target_mcd_mean: Option<f64>,
    pub f0_pearson_mean: Option<f64>,
    pub f0_pearson_undefined: usize,
    pub energy_pearson_mean: Option<f64>,
    pub energy_pearson_undefined: usize,
    pub ses_mean: Option<f64>,
    /// Fraction of pairs whose converted style is nearer the target speaker
    /// than the source speaker.
    pub closer_to_target: Option<f64>,
    /// Character error rate from an external recognizer, merged offline.
    pub cer: Option<f64>,
    pub probes: ProbeSummary,
    pub config: serde_json::Value,
}

fn mean_of(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| pairwise_sum(v) / v.len() as f64)
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from(
            "source,source_speaker,target,mcd,source_target_mcd,self_mcd,f0_pearson,energy_pearson,ses,dist_to_target,dist_to_source\n",
        );
        for p in &self.pairs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                p.source,
                p.source_speaker,
                p.target,
                opt(p.mcd),
                opt(p.source_target_mcd),
                p.self_mcd,
                opt(p.f0_pearson),
                opt(p.energy_pearson),
                p.ses,
                p.dist_to_target,
                p.dist_to_source
            ));
        }
        s
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn write(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        if let Some(parent) = stem.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let j = stem.with_extension("json");
        fs::write(&j, self.to_json()?).map_err(|e| Error::io(&j, e))?;
        let c = stem.with_extension("csv");
        fs::write(&c, self.to_csv()).map_err(|e| Error::io(&c, e))
    }
}

/// Random `(held-out utterance index, other speaker)` pairs.
pub fn sample_pairs(ds: &Dataset, n: usize, seed: u64) -> Vec<(usize, String)> {
    let pool = ds.held_out_indices();
    if pool.is_empty() || ds.speakers.len() < 2 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::from_seed(syndata::derive_seed(seed, &[0x5041_4952]));
    (0..n)
        .map(|_| {
            let i = pool[rng.random_range(0..pool.len())];
            let src = ds.speaker_ids[i];
            let mut t = rng.random_range(0..ds.speakers.len() - 1);
            if t >= src {
                t += 1;
            }
            (i, ds.speakers[t].clone())
        })
        .collect()
}

/// Ground-truth speaker parameters of every speaker with recorded factors.
fn speaker_factors(ds: &Dataset) -> BTreeMap<usize, FactorSet> {
    let mut out = BTreeMap::new();
    for (i, rec) in ds.manifest.utterances.iter().enumerate() {
        let s = ds.speaker_ids[i];
        if out.contains_key(&s) {
            continue;
        }
        if let Ok(f) = syndata::ground_truth(&ds.manifest, rec) {
            out.insert(s, f);
        }
    }
    out
}

/// Content and prosody streams of every utterance.
pub fn encode_all(ckpt: &Checkpoint, ds: &Dataset, jobs: usize) -> Result<Vec<convert::Encoded>> {
    let run = |u: &crate::tensorio::UtteranceData| convert::encode(ckpt, &u.units);
    in_pool(jobs, || ds.data.par_iter().map(run).collect::<Result<Vec<_>>>())?
}

fn in_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Speaker-from-raw-units, speaker-from-content and emotion-from-prosody probes.
pub fn probe_summary(ds: &Dataset, encoded: &[convert::Encoded], cfg: &EvalConfig, seed: u64) -> Result<ProbeSummary> {
    let opts = cfg.probe_options();
    let raw = feature_matrix(&ds.data.iter().map(|u| summary_features(&u.units)).collect::<Vec<_>>());
    let content = feature_matrix(&encoded.iter().map(|e| summary_features(&e.content)).collect::<Vec<_>>());
    let prosody = feature_matrix(&encoded.iter().map(|e| summary_features(&e.prosody)).collect::<Vec<_>>());
    Ok(ProbeSummary {
        speaker_from_content: leakage_probe_with(&content, &ds.speaker_ids, seed, &opts)?,
        speaker_from_raw: leakage_probe_with(&raw, &ds.speaker_ids, seed, &opts)?,
        emotion_from_prosody: leakage_probe_with(&prosody, &ds.emotion_ids, seed, &opts)?,
    })
}

/// Converts every pair, scores it, runs the probes and assembles a report.
pub fn eval_report(
    ckpt: &Checkpoint,
    ds: &Dataset,
    pairs: &[(usize, String)],
    cfg: &EvalConfig,
    seed: u64,
    jobs: usize,
) -> Result<EvalReport> {
    cfg.validate()?;
    ckpt.require_stage(&[crate::nets::Stage::Main, crate::nets::Stage::Finetuned])?;
    let styles = SpeakerStyles::compute(ds)?;
    let factors = speaker_factors(ds);
    let recipe = Recipe::new(ckpt.model.unit_channels, ckpt.model.mel_channels);
    let encoded = encode_all(ckpt, ds, jobs)?;

    let score = |(i, target): &(usize, String)| -> Result<PairMetrics> {
        let i = *i;
        let rec = &ds.manifest.utterances[i];
        let src = &ds.data[i];
        let t = ds
            .speakers
            .iter()
            .position(|s| s == target)
            .ok_or_else(|| Error::UnknownSpeaker(target.clone()))?;
        let s_idx = ds.speaker_ids[i];
        let enc = &encoded[i];
        let converted = convert::decode_with(ckpt, enc, &ckpt.speaker_embed(&SpeakerRef::Name(target.clone()))?)?;
        let own = convert::decode_with(ckpt, enc, &ckpt.speaker_embed(&SpeakerRef::Name(rec.speaker.clone()))?)?;
        let truth = match (syndata::ground_truth(&ds.manifest, rec), factors.get(&t)) {
            (Ok(mut f), Some(tf)) => {
                f.speaker_mu = tf.speaker_mu.clone();
                f.speaker_sigma = tf.speaker_sigma.clone();
                // Stored corpora hold f32 values.
                Some(syndata::render_with(&f, &recipe).mel.mapv(|v| v as f32 as f64))
            }
            _ => None,
        };
        let (mcd, source_target_mcd) = match &truth {
            Some(gt) => (Some(cfg.mcd(&converted, gt)?), Some(cfg.mcd(&src.mel, gt)?)),
            None => (None, None),
        };
        let (sf0, sen) = prosody_proxies(&src.mel, &recipe.mel_f0)?;
        let (cf0, cen) = prosody_proxies(&converted, &recipe.mel_f0)?;
        let voiced: Vec<bool> = src.f0.iter().map(|&v| v != 0.0).collect();
        let style = style_vector(&converted)?;
        Ok(PairMetrics {
            source: rec.id.clone(),
            source_speaker: rec.speaker.clone(),
            target: target.clone(),
            mcd,
            source_target_mcd,
            self_mcd: cfg.mcd(&own, &src.mel)?,
            f0_pearson: pearson(&sf0, &cf0, Some(&voiced))?,
            energy_pearson: pearson(&sen, &cen, None)?,
            ses: styles.ses(&style, t)?,
            dist_to_target: styles.distance(&style, t),
            dist_to_source: styles.distance(&style, s_idx),
        })
    };
    let metrics = in_pool(jobs, || pairs.par_iter().map(score).collect::<Result<Vec<_>>>())??;
    for m in metrics.iter().filter(|m| m.mcd.is_none()) {
        log::warn!("no parallel ground truth for {}; MCD skipped", m.source);
    }
    let mcds: Vec<f64> = metrics.iter().filter_map(|m| m.mcd).collect();
    let (mcd_mean, mcd_std) = if mcds.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&mcds);
        (Some(m), Some(s))
    };
    let f0: Vec<f64> = metrics.iter().filter_map(|m| m.f0_pearson).collect();
    let en: Vec<f64> = metrics.iter().filter_map(|m| m.energy_pearson).collect();
    let closer: Vec<f64> = metrics
        .iter()
        .map(|m| f64::from(u8::from(m.dist_to_target < m.dist_to_source)))
        .collect();
    let config = serde_json::json!({
        "model": ckpt.model,
        "train": ckpt.train,
        "eval": cfg,
    });
    Ok(EvalReport {
        seed,
        stage: ckpt.stage.to_string(),
        mcd_mean,
        mcd_std,
        mcd_skipped: metrics.len() - mcds.len(),
        self_mcd_mean: mean_of(&metrics.iter().map(|m| m.self_mcd).collect::<Vec<_>>()),
        source_target_mcd_mean: mean_of(&metrics.iter().filter_map(|m| m.source_target_mcd).collect::<Vec<_>>()),
        f0_pearson_mean: mean_of(&f0),
        f0_pearson_undefined: metrics.len() - f0.len(),
        energy_pearson_mean: mean_of(&en),
        energy_pearson_undefined: metrics.len() - en.len(),
        ses_mean: mean_of(&metrics.iter().map(|m| m.ses).collect::<Vec<_>>()),
        closer_to_target: mean_of(&closer),
        cer: None,
        probes: probe_summary(ds, &encoded, cfg, seed)?,
        config,
        pairs: metrics,
    })
}

/// Line chart of the loss columns of a metrics CSV as a standalone SVG.
pub fn plot_svg(csv: &str) -> Result<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Validation("empty metrics log".into()))?
        .split(',')
        .collect();
    let col = |name: &str| header.iter().position(|h| *h == name);
    let step_col = col("step").ok_or_else(|| Error::Validation("metrics log has no step column".into()))?;
    let series: Vec<(&str, usize)> = ["L_rec", "L_dis", "L_pred", "L_total"]
        .iter()
        .filter_map(|n| col(n).map(|c| (*n, c)))
        .collect();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, line) in lines.enumerate() {
        let r = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Validation(format!("metrics log line {} is not numeric", n + 2)))?;
        if r.len() != header.len() {
            return Err(Error::Validation(format!("metrics log line {} has wrong width", n + 2)));
        }
        rows.push(r);
    }
    let (w, h, pad) = (640.0, 400.0, 40.0);
    let xs: Vec<f64> = rows.iter().map(|r| r[step_col]).collect();
    let (xmin, xmax) = bounds(&xs);
    let all: Vec<f64> = rows.iter().flat_map(|r| series.iter().map(move |(_, c)| r[*c])).collect();
    let (ymin, ymax) = bounds(&all);
    let sx = |x: f64| pad + (x - xmin) / (xmax - xmin) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - ymin) / (ymax - ymin) * (h - 2.0 * pad);
    let colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <text x=\"{pad}\" y=\"{ty}\" font-size=\"12\">step {xmin}..{xmax}, loss {ymin:.4}..{ymax:.4}</text>\n",
        y0 = h - pad,
        x1 = w - pad,
        ty = pad - 10.0,
    );
    for (k, (name, c)) in series.iter().enumerate() {
        let pts: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", sx(r[step_col]), sy(r[*c])))
            .collect();
        let color = colors[k % colors.len()];
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{name}</text>\n",
            w - pad - 60.0,
            pad + 14.0 * (k as f64 + 1.0)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn bounds(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

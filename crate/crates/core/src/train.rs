//! Losses, optimizer and the three training stages: teacher pretraining,
//! main training with style augmentation and distillation, and emotion
//! fine-tuning.
//!
//! Reductions:
//! * `L_rec`: mean squared error within each utterance, summed over the batch.
//! * `L_dis`: mean squared error over every element of the batch.
//! * `L_pred`: `|y - y_t|^2 + |y - y_s|^2` per utterance, averaged over the batch.
//!
//! Utterances whose manifest index is `4 (mod 5)` are held out of every
//! training stage.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asa::{asa_forward_graph, asa_prepare, PerturbMode, PerturbParams, Phase, StyleNoise};
use crate::autograd::{Graph, Gradients, Mat, Var};
use crate::error::{Error, Result};
use crate::nets::{
    self, attr_encode_graph, decode_graph, emotion_graph, teacher_encode_graph, Bound, Checkpoint, EncoderConfig,
    ParamSet, ProsodyNorm, Quantizer, RngState, Stage,
};
use crate::syndata::derive_seed;
use crate::tensorio::{Manifest, UtteranceData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub cons_weight: f64,
    pub lr_teacher: f64,
    pub lr_main: f64,
    /// Per-step multiplicative learning-rate decay; 1 keeps it constant.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub teacher_steps: usize,
    pub main_steps: usize,
    pub finetune_steps: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub asa_enabled: bool,
    pub asa_mode: PerturbMode,
    pub grl_lambda: f64,
    /// Feed the prosody stream to the decoder (off = zero stream).
    pub prosody_stream: bool,
    /// Replace units by the nearest of this many k-means centroids; 0 disables.
    pub quantize_units: usize,
    /// Steps per window of the adversarial-direction check; 0 disables it.
    pub adversarial_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            lambda: 0.1,
            cons_weight: 0.0,
            lr_teacher: 1e-3,
            lr_main: 1e-4,
            lr_decay: 1.0,
            batch_size: 8,
            teacher_steps: 200,
            main_steps: 2000,
            finetune_steps: 500,
            grad_clip: 1.0,
            seed: 1234,
            asa_enabled: true,
            asa_mode: PerturbMode::LearnedScale,
            grl_lambda: 1.0,
            prosody_stream: true,
            quantize_units: 0,
            adversarial_window: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(format!("train config: {m}")));
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("cons_weight", self.cons_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        for (name, v) in [
            ("lr_teacher", self.lr_teacher),
            ("lr_main", self.lr_main),
            ("grad_clip", self.grad_clip),
            ("grl_lambda", self.grl_lambda),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!("lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.quantize_units == 1 {
            return fail("quantize_units must be 0 or >= 2".into());
        }
        Ok(())
    }

    /// Perturbation parameters of this configuration, initialized.
    pub fn perturb_params(&self, channels: usize) -> PerturbParams {
        let mut p = PerturbParams::new(channels, self.asa_mode);
        p.grl_lambda = self.grl_lambda;
        p
    }
}

fn check_same(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn mean_sq_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let s: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    s / a.len().max(1) as f64
}

/// Reconstruction loss of one utterance: mean squared error over its elements.
pub fn loss_rec(mel_hat: &Array2<f64>, mel: &Array2<f64>) -> Result<f64> {
    check_same(mel_hat, mel, "loss_rec")?;
    Ok(mean_sq_diff(mel_hat, mel))
}

/// Reconstruction loss of a batch: per-utterance losses summed.
pub fn loss_rec_batch(pairs: &[(Array2<f64>, Array2<f64>)]) -> Result<f64> {
    pairs.iter().map(|(h, m)| loss_rec(h, m)).sum()
}

/// Distillation loss: mean squared error.
pub fn loss_dis(z_fp: &Array2<f64>, z_p: &Array2<f64>) -> Result<f64> {
    check_same(z_fp, z_p, "loss_dis")?;
    Ok(mean_sq_diff(z_fp, z_p))
}

fn is_one_hot(y: &Array1<f64>) -> bool {
    y.iter().filter(|&&v| v == 1.0).count() == 1 && y.iter().all(|&v| v == 0.0 || v == 1.0)
}

/// `|y - y_t|^2 + |y - y_s|^2`.
pub fn loss_pred(y: &Array1<f64>, y_t: &Array1<f64>, y_s: &Array1<f64>) -> Result<f64> {
    if !is_one_hot(y) {
        return Err(Error::Validation("emotion target is not one-hot".into()));
    }
    if y_t.len() != y.len() || y_s.len() != y.len() {
        return Err(Error::Shape("emotion prediction length differs from target".into()));
    }
    let d = |p: &Array1<f64>| y.iter().zip(p.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    Ok(d(y_t) + d(y_s))
}

/// Component losses of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub rec: f64,
    pub dis: f64,
    pub pred: f64,
    pub cons: f64,
}

/// `alpha L_rec + beta L_dis + lambda L_pred + cons_weight L_cons`.
pub fn loss_total(l: &Losses, cfg: &TrainConfig) -> f64 {
    cfg.alpha * l.rec + cfg.beta * l.dis + cfg.lambda * l.pred + cfg.cons_weight * l.cons
}

pub fn one_hot(k: usize, n: usize) -> Array1<f64> {
    let mut y = Array1::zeros(n);
    y[k] = 1.0;
    y
}

/// Taped `L_rec` for a `(B*W) x M` batch: sum of squares divided by `W*M`.
pub fn loss_rec_graph(g: &mut Graph, mel_hat: Var, mel: Var, frames: usize) -> Var {
    let m = g.value(mel).ncols();
    let d = g.sub(mel_hat, mel);
    let s = g.sum_sq(d);
    g.scale(s, 1.0 / (frames * m) as f64)
}

/// Taped mean squared error over all elements.
pub fn mse_graph(g: &mut Graph, a: Var, b: Var) -> Var {
    let n = g.value(a).len();
    let d = g.sub(a, b);
    let s = g.sum_sq(d);
    g.scale(s, 1.0 / n as f64)
}

/// Taped `L_pred` for `B x K` predictions against `B x K` one-hot targets,
/// averaged over the batch.
pub fn loss_pred_graph(g: &mut Graph, y: Var, y_t: Var, y_s: Var) -> Var {
    let b = g.value(y).nrows();
    let dt = g.sub(y, y_t);
    let ds = g.sub(y, y_s);
    let st = g.sum_sq(dt);
    let ss = g.sum_sq(ds);
    let s = g.add(st, ss);
    g.scale(s, 1.0 / b as f64)
}

/// Adam with bias correction and global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    t: u64,
    moments: BTreeMap<String, (Mat, Mat)>,
}

impl Adam {
    pub fn new(lr: f64, clip: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Mat>) -> f64 {
        let norm = grads.values().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        let k = if norm > self.clip { self.clip / norm } else { 1.0 };
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("gradient for unknown parameter");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Mat::zeros(g.dim()), Mat::zeros(g.dim())));
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * k;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            });
        }
        norm
    }
}

fn collect_grads(bound: &Bound, grads: &Gradients, trainable: impl Fn(&str) -> bool) -> BTreeMap<String, Mat> {
    bound
        .iter()
        .filter(|(k, _)| trainable(k))
        .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
        .collect()
}

/// Training corpus held in memory, with label indices.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub data: Vec<UtteranceData>,
    pub speakers: Vec<String>,
    pub emotions: Vec<String>,
    pub speaker_ids: Vec<usize>,
    pub emotion_ids: Vec<usize>,
}

impl Dataset {
    pub fn load(manifest: &Manifest) -> Result<Self> {
        if manifest.utterances.is_empty() {
            return Err(Error::Validation("manifest has no utterances".into()));
        }
        let data = manifest.load_all()?;
        let speakers = manifest.speakers();
        let emotions = manifest.emotions();
        let speaker_ids = manifest
            .utterances
            .iter()
            .map(|r| speakers.iter().position(|s| *s == r.speaker).unwrap())
            .collect();
        let emotion_ids = manifest
            .utterances
            .iter()
            .map(|r| emotions.iter().position(|s| *s == r.emotion).unwrap())
            .collect();
        Ok(Self {
            manifest: manifest.clone(),
            data,
            speakers,
            emotions,
            speaker_ids,
            emotion_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_held_out(index: usize) -> bool {
        index % 5 == 4
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !Self::is_held_out(i)).collect()
    }

    pub fn held_out_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| Self::is_held_out(i)).collect()
    }

    fn check_model(&self, cfg: &EncoderConfig) -> Result<()> {
        let d = &self.data[0];
        if d.units.ncols() != cfg.unit_channels || d.mel.ncols() != cfg.mel_channels {
            return Err(Error::Shape(format!(
                "corpus has C={} M={}, model expects C={} M={}",
                d.units.ncols(),
                d.mel.ncols(),
                cfg.unit_channels,
                cfg.mel_channels
            )));
        }
        if self.emotions.len() > cfg.n_emotions {
            return Err(Error::Validation(format!(
                "corpus has {} emotion labels, model has {} outputs",
                self.emotions.len(),
                cfg.n_emotions
            )));
        }
        if let Some(w) = self.data.iter().map(|u| u.frames()).min() {
            if w < cfg.min_frames() {
                return Err(Error::Shape(format!("utterance of {w} frames is shorter than the kernel")));
            }
        }
        Ok(())
    }
}

/// One assembled batch, cropped to its shortest member.
#[derive(Debug, Clone)]
pub struct Batch {
    pub frames: usize,
    pub units: Vec<Array2<f64>>,
    /// `(B*W) x M`
    pub mel: Array2<f64>,
    /// `(B*W) x 3` teacher input.
    pub prosody: Array2<f64>,
    /// `(B*W) x d_p` cached teacher output, when available.
    pub z_p: Option<Array2<f64>>,
    pub speakers: Vec<usize>,
    /// `B x K` one-hot targets.
    pub targets: Array2<f64>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.units.len()
    }
}

fn crop2(a: &Array2<f64>, w: usize) -> Array2<f64> {
    a.slice(ndarray::s![..w, ..]).to_owned()
}

fn stack(parts: &[Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).expect("equal widths")
}

/// Everything a stage needs to assemble batches.
struct Prepared<'a> {
    ds: &'a Dataset,
    units: Vec<Array2<f64>>,
    prosody: Vec<Array2<f64>>,
    z_p: Option<Vec<Array2<f64>>>,
    n_emotions: usize,
}

impl Prepared<'_> {
    fn batch(&self, idx: &[usize]) -> Batch {
        let w = idx.iter().map(|&i| self.ds.data[i].frames()).min().unwrap();
        let mut targets = Array2::zeros((idx.len(), self.n_emotions));
        for (b, &i) in idx.iter().enumerate() {
            targets[[b, self.ds.emotion_ids[i]]] = 1.0;
        }
        Batch {
            frames: w,
            units: idx.iter().map(|&i| crop2(&self.units[i], w)).collect(),
            mel: stack(&idx.iter().map(|&i| crop2(&self.ds.data[i].mel, w)).collect::<Vec<_>>()),
            prosody: stack(&idx.iter().map(|&i| crop2(&self.prosody[i], w)).collect::<Vec<_>>()),
            z_p: self
                .z_p
                .as_ref()
                .map(|z| stack(&idx.iter().map(|&i| crop2(&z[i], w)).collect::<Vec<_>>())),
            speakers: idx.iter().map(|&i| self.ds.speaker_ids[i]).collect(),
            targets,
        }
    }
}

fn prepare<'a>(ds: &'a Dataset, norm: ProsodyNorm, quantizer: Option<&Quantizer>, n_emotions: usize) -> Result<Prepared<'a>> {
    let prosody = ds
        .data
        .iter()
        .map(|u| norm.teacher_input(&u.f0, &u.energy))
        .collect::<Result<Vec<_>>>()?;
    let units = ds
        .data
        .iter()
        .map(|u| match quantizer {
            Some(q) => q.quantize(&u.units),
            None => u.units.clone(),
        })
        .collect();
    Ok(Prepared {
        ds,
        units,
        prosody,
        z_p: None,
        n_emotions,
    })
}

fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(seed, &[0x5452_4149, stage as u64]))
}

fn draw_batch(rng: &mut ChaCha8Rng, pool: &[usize], b: usize) -> Result<Vec<usize>> {
    if pool.len() < b {
        return Err(Error::Validation(format!(
            "training set has {} utterances, batch needs {b}",
            pool.len()
        )));
    }
    Ok(rand::seq::index::sample(rng, pool.len(), b).into_iter().map(|i| pool[i]).collect())
}

/// One row of the per-step metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub losses: Losses,
    pub total: f64,
    pub wall_ms: u64,
}

/// Outcome of one adversarial-direction window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdversarialWindow {
    pub end_step: usize,
    pub loss_previous: f64,
    pub loss_updated: f64,
}

impl AdversarialWindow {
    pub fn ascended(&self) -> bool {
        self.loss_updated >= self.loss_previous
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub windows: Vec<AdversarialWindow>,
}

impl TrainLog {
    /// Fraction of windows where the updated perturbation raised the loss.
    pub fn ascent_fraction(&self) -> Option<f64> {
        if self.windows.is_empty() {
            return None;
        }
        Some(self.windows.iter().filter(|w| w.ascended()).count() as f64 / self.windows.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,L_rec,L_dis,L_pred,L_total,wall_ms\n");
        for r in &self.steps {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.losses.rec, r.losses.dis, r.losses.pred, r.total, r.wall_ms
            ));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Teacher pretraining objective on one batch: teacher emotion loss plus
/// contour autoencoding.
fn teacher_loss(g: &mut Graph, p: &Bound, cfg: &EncoderConfig, batch: &Batch) -> (Var, Losses) {
    let x = g.constant(batch.prosody.clone());
    let out = teacher_encode_graph(g, p, cfg, x, batch.frames);
    let w = p.var("teacher.contour.w");
    let b = p.var("teacher.contour.b");
    let contour = g.linear(out.z_p, w, b);
    let f0 = g.slice_cols(x, 0, 1);
    let en = g.slice_cols(x, 2, 3);
    let target = g.concat_cols(&[f0, en]);
    let rec = mse_graph(g, contour, target);
    let y_t = emotion_graph(g, p, "teacher.emotion", out.z_p, batch.frames);
    let y = g.constant(batch.targets.clone());
    let d = g.sub(y, y_t);
    let s = g.sum_sq(d);
    let pred = g.scale(s, 1.0 / batch.size() as f64);
    let total = g.add(rec, pred);
    let l = Losses {
        rec: g.scalar(rec),
        pred: g.scalar(pred),
        ..Losses::default()
    };
    (total, l)
}

fn lr_at(base: f64, decay: f64, step: usize) -> f64 {
    base * decay.powi(step as i32)
}

/// Pretrains the prosody teacher on normalized f0/energy contours.
pub fn pretrain_teacher(ds: &Dataset, model: &EncoderConfig, cfg: &TrainConfig, mut log: Option<&mut TrainLog>) -> Result<Checkpoint> {
    model.validate()?;
    cfg.validate()?;
    ds.check_model(model)?;
    let pool = ds.train_indices();
    let train_data: Vec<UtteranceData> = pool.iter().map(|&i| ds.data[i].clone()).collect();
    let norm = ProsodyNorm::fit(&train_data);
    let prep = prepare(ds, norm, None, model.n_emotions)?;
    let mut params = nets::init_teacher(model, cfg.seed);
    let mut rng = stage_rng(cfg.seed, Stage::Teacher);
    let mut opt = Adam::new(cfg.lr_teacher, cfg.grad_clip);
    let start = Instant::now();
    for step in 0..cfg.teacher_steps {
        let idx = draw_batch(&mut rng, &pool, cfg.batch_size)?;
        let batch = prep.batch(&idx);
        let mut g = Graph::new();
        let bound = params.bind(&mut g, |_| true);
        let (loss, losses) = teacher_loss(&mut g, &bound, model, &batch);
        let total = g.scalar(loss);
        check_finite(total, step)?;
        let grads = g.backward(loss);
        opt.lr = lr_at(cfg.lr_teacher, cfg.lr_decay, step);
        opt.step(&mut params, &collect_grads(&bound, &grads, |_| true));
        if let Some(l) = log.as_deref_mut() {
            l.steps.push(StepRecord {
                step,
                losses,
                total,
                wall_ms: start.elapsed().as_millis() as u64,
            });
        }
    }
    params.round_to_f32();
    Ok(Checkpoint {
        stage: Stage::Teacher,
        model: model.clone(),
        train: cfg.clone(),
        speakers: ds.speakers.clone(),
        emotions: ds.emotions.clone(),
        prosody_norm: norm,
        rng_state: RngState::capture(&rng),
        step_count: cfg.teacher_steps as u64,
        params,
    })
}

fn check_finite(v: f64, step: usize) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::Validation(format!("loss became non-finite at step {step}")));
    }
    Ok(())
}

/// Teacher output for every utterance in the corpus.
pub fn teacher_outputs(ckpt: &Checkpoint, prosody: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
    prosody
        .iter()
        .map(|p| nets::teacher_encode(&ckpt.params, &ckpt.model, p).map(|(z, _)| z))
        .collect()
}

fn is_teacher_param(name: &str) -> bool {
    name.starts_with("teacher.")
}

fn main_trainable(name: &str) -> bool {
    !is_teacher_param(name) && !name.starts_with("quantizer.")
}

/// Inputs that stay fixed across one evaluation of the main objective.
pub struct MainStep<'a> {
    pub model: &'a EncoderConfig,
    pub cfg: &'a TrainConfig,
    pub batch: &'a Batch,
    /// Style noise; `None` runs without augmentation.
    pub noise: Option<&'a StyleNoise>,
    pub with_pred: bool,
}

/// Builds the main objective on `g`. Returns the total loss node and the
/// component values.
pub fn main_objective(g: &mut Graph, p: &Bound, step: &MainStep<'_>) -> Result<(Var, Losses)> {
    let (model, cfg, batch) = (step.model, step.cfg, step.batch);
    let w = batch.frames;
    let units = match step.noise {
        Some(noise) => {
            let mut pp = cfg.perturb_params(model.unit_channels);
            pp.i_mu = g.value(p.var("asa.i_mu")).row(0).to_owned();
            pp.i_sigma = g.value(p.var("asa.i_sigma")).row(0).to_owned();
            let trace = asa_prepare(&batch.units, &pp, Phase::Training)?;
            asa_forward_graph(g, &trace, &pp, p.var("asa.i_mu"), p.var("asa.i_sigma"), noise)?
        }
        None => g.constant(stack(&batch.units)),
    };
    let (zc, zp) = attr_encode_graph(g, p, model, units, w);
    let zp_dec = if cfg.prosody_stream {
        zp
    } else {
        g.constant(Mat::zeros(g.value(zp).dim()))
    };
    let spk = g.gather_rows(p.var("speaker_table"), &batch.speakers);
    let mel_hat = decode_graph(g, p, model, zc, zp_dec, spk, w);
    let mel = g.constant(batch.mel.clone());
    let rec = loss_rec_graph(g, mel_hat, mel, w);
    let mut losses = Losses {
        rec: g.scalar(rec),
        ..Losses::default()
    };
    let mut total = g.scale(rec, cfg.alpha);

    if let Some(z_p) = &batch.z_p {
        let target = g.constant(z_p.clone());
        let dis = mse_graph(g, zp, target);
        losses.dis = g.scalar(dis);
        let t = g.scale(dis, cfg.beta);
        total = g.add(total, t);
        if step.with_pred {
            let y = g.constant(batch.targets.clone());
            let y_t = emotion_graph(g, p, "teacher.emotion", target, w);
            let y_s = emotion_graph(g, p, "student.emotion", zp, w);
            let pred = loss_pred_graph(g, y, y_t, y_s);
            losses.pred = g.scalar(pred);
            let t = g.scale(pred, cfg.lambda);
            total = g.add(total, t);
        }
    }

    if cfg.cons_weight > 0.0 && step.noise.is_some() {
        // Clean branch evaluated on a separate tape so no gradient flows into it.
        let mut clean_g = Graph::new();
        let frozen = bound_values(g, p, &mut clean_g);
        let x = clean_g.constant(stack(&batch.units));
        let (cc, cp) = attr_encode_graph(&mut clean_g, &frozen, model, x, w);
        let clean = concatenate(Axis(1), &[clean_g.value(cc).view(), clean_g.value(cp).view()]).unwrap();
        let clean = g.constant(clean);
        let pert = g.concat_cols(&[zc, zp]);
        let cons = mse_graph(g, pert, clean);
        losses.cons = g.scalar(cons);
        let t = g.scale(cons, cfg.cons_weight);
        total = g.add(total, t);
    }
    Ok((total, losses))
}

fn bound_values(src: &Graph, p: &Bound, dst: &mut Graph) -> Bound {
    let mut set = ParamSet::new();
    for (k, v) in p.iter() {
        set.insert(k.clone(), src.value(*v).clone());
    }
    set.bind(dst, |_| false)
}

/// Evaluates the main objective without recording gradients.
pub fn evaluate_main(params: &ParamSet, step: &MainStep<'_>) -> Result<Losses> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, |_| false);
    main_objective(&mut g, &bound, step).map(|(_, l)| l)
}

/// Fixed evaluation setup for the adversarial-direction check.
struct Probe {
    batch: Batch,
    noise: StyleNoise,
}

struct Loop<'a> {
    model: &'a EncoderConfig,
    cfg: &'a TrainConfig,
    prep: &'a Prepared<'a>,
    pool: Vec<usize>,
    with_pred: bool,
}

fn run_loop(
    lp: &Loop<'_>,
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    steps: usize,
    mut log: Option<&mut TrainLog>,
) -> Result<()> {
    let (model, cfg) = (lp.model, lp.cfg);
    let mut opt = Adam::new(cfg.lr_main, cfg.grad_clip);
    let start = Instant::now();
    let adversarial = cfg.asa_enabled && cfg.asa_mode == PerturbMode::LearnedScale && cfg.adversarial_window > 0;
    let probe = if adversarial && log.is_some() {
        let mut prng = ChaCha8Rng::from_seed(derive_seed(cfg.seed, &[0x5052_4f42]));
        let idx = draw_batch(&mut prng, &lp.pool, cfg.batch_size)?;
        let batch = lp.prep.batch(&idx);
        let noise = StyleNoise::draw(&mut prng, idx.len(), model.unit_channels);
        Some(Probe { batch, noise })
    } else {
        None
    };
    let mut window_start = (params.expect("asa.i_mu")?.clone(), params.expect("asa.i_sigma")?.clone());
    for step in 0..steps {
        let idx = draw_batch(rng, &lp.pool, cfg.batch_size)?;
        let batch = lp.prep.batch(&idx);
        let noise = cfg
            .asa_enabled
            .then(|| StyleNoise::draw(rng, idx.len(), model.unit_channels));
        let ms = MainStep {
            model,
            cfg,
            batch: &batch,
            noise: noise.as_ref(),
            with_pred: lp.with_pred,
        };
        let mut g = Graph::new();
        let bound = params.bind(&mut g, main_trainable);
        let (loss, losses) = main_objective(&mut g, &bound, &ms)?;
        let total = g.scalar(loss);
        check_finite(total, step)?;
        let grads = g.backward(loss);
        drop(ms);
        opt.lr = lr_at(cfg.lr_main, cfg.lr_decay, step);
        opt.step(params, &collect_grads(&bound, &grads, main_trainable));
        if let Some(l) = log.as_deref_mut() {
            l.steps.push(StepRecord {
                step,
                losses,
                total,
                wall_ms: start.elapsed().as_millis() as u64,
            });
            if let Some(pr) = &probe {
                if (step + 1) % cfg.adversarial_window == 0 {
                    let ms = MainStep {
                        model,
                        cfg,
                        batch: &pr.batch,
                        noise: Some(&pr.noise),
                        with_pred: lp.with_pred,
                    };
                    let mut previous = params.clone();
                    previous.insert("asa.i_mu", window_start.0.clone());
                    previous.insert("asa.i_sigma", window_start.1.clone());
                    let before = loss_total(&evaluate_main(&previous, &ms)?, cfg);
                    let after = loss_total(&evaluate_main(params, &ms)?, cfg);
                    l.windows.push(AdversarialWindow {
                        end_step: step + 1,
                        loss_previous: before,
                        loss_updated: after,
                    });
                    window_start = (params.expect("asa.i_mu")?.clone(), params.expect("asa.i_sigma")?.clone());
                }
            }
        }
    }
    Ok(())
}

fn with_teacher_outputs<'a>(ds: &'a Dataset, ckpt: &Checkpoint, quantizer: Option<&Quantizer>) -> Result<Prepared<'a>> {
    let mut prep = prepare(ds, ckpt.prosody_norm, quantizer, ckpt.model.n_emotions)?;
    prep.z_p = Some(teacher_outputs(ckpt, &prep.prosody)?);
    Ok(prep)
}

/// Main training: style augmentation on units, distillation from the frozen
/// teacher, reconstruction of the clean mel.
pub fn train_main(ds: &Dataset, teacher: &Checkpoint, cfg: &TrainConfig, log: Option<&mut TrainLog>) -> Result<Checkpoint> {
    teacher.require_stage(&[Stage::Teacher])?;
    cfg.validate()?;
    let model = &teacher.model;
    model.validate()?;
    ds.check_model(model)?;
    if ds.speakers != teacher.speakers {
        return Err(Error::Validation("teacher was trained on a different speaker set".into()));
    }
    let pool = ds.train_indices();
    let mut params = nets::init_main(model, ds.speakers.len(), cfg.asa_mode, cfg.seed);
    for (k, v) in teacher.params.iter() {
        params.insert(k.clone(), v.clone());
    }
    let quantizer = if cfg.quantize_units > 0 {
        let frames: Vec<Array2<f64>> = pool.iter().map(|&i| ds.data[i].units.clone()).collect();
        let q = Quantizer::fit(&stack(&frames), cfg.quantize_units, 10, cfg.seed)?;
        params.insert("quantizer.centroids", q.centroids.clone());
        Some(q)
    } else {
        None
    };
    let prep = with_teacher_outputs(ds, teacher, quantizer.as_ref())?;
    let mut rng = stage_rng(cfg.seed, Stage::Main);
    let lp = Loop {
        model,
        cfg,
        prep: &prep,
        pool,
        with_pred: false,
    };
    run_loop(&lp, &mut params, &mut rng, cfg.main_steps, log)?;
    params.round_to_f32();
    Ok(Checkpoint {
        stage: Stage::Main,
        model: model.clone(),
        train: cfg.clone(),
        speakers: ds.speakers.clone(),
        emotions: ds.emotions.clone(),
        prosody_norm: teacher.prosody_norm,
        rng_state: RngState::capture(&rng),
        step_count: teacher.step_count + cfg.main_steps as u64,
        params,
    })
}

fn continue_from(ckpt: &Checkpoint, ds: &Dataset, cfg: &TrainConfig, steps: usize, with_pred: bool, stage: Stage, log: Option<&mut TrainLog>) -> Result<Checkpoint> {
    cfg.validate()?;
    ds.check_model(&ckpt.model)?;
    if ds.speakers != ckpt.speakers {
        return Err(Error::Validation("checkpoint was trained on a different speaker set".into()));
    }
    let quantizer = ckpt.quantizer();
    let prep = with_teacher_outputs(ds, ckpt, quantizer.as_ref())?;
    let mut params = ckpt.params.clone();
    let mut rng = ckpt.rng_state.restore()?;
    let lp = Loop {
        model: &ckpt.model,
        cfg,
        prep: &prep,
        pool: ds.train_indices(),
        with_pred,
    };
    run_loop(&lp, &mut params, &mut rng, steps, log)?;
    params.round_to_f32();
    Ok(Checkpoint {
        stage,
        model: ckpt.model.clone(),
        train: cfg.clone(),
        speakers: ckpt.speakers.clone(),
        emotions: ckpt.emotions.clone(),
        prosody_norm: ckpt.prosody_norm,
        rng_state: RngState::capture(&rng),
        step_count: ckpt.step_count + steps as u64,
        params,
    })
}

/// Continues main-stage training from a main checkpoint for `steps` more steps.
pub fn resume_main(ckpt: &Checkpoint, ds: &Dataset, cfg: &TrainConfig, steps: usize, log: Option<&mut TrainLog>) -> Result<Checkpoint> {
    ckpt.require_stage(&[Stage::Main])?;
    continue_from(ckpt, ds, cfg, steps, false, Stage::Main, log)
}

/// Fine-tuning with the full objective, including both emotion heads.
pub fn finetune(ckpt: &Checkpoint, ds: &Dataset, cfg: &TrainConfig, log: Option<&mut TrainLog>) -> Result<Checkpoint> {
    ckpt.require_stage(&[Stage::Main])?;
    continue_from(ckpt, ds, cfg, cfg.finetune_steps, true, Stage::Finetuned, log)
}

/// Student emotion accuracy (argmax of the student head on `Z_Fp`) over `indices`.
pub fn student_emotion_accuracy(ckpt: &Checkpoint, ds: &Dataset, indices: &[usize]) -> Result<f64> {
    let mut hits = 0usize;
    for &i in indices {
        let units = ckpt.encoder_input(&ds.data[i].units);
        let (_, zp) = nets::attr_encode(&ckpt.params, &ckpt.model, &units)?;
        let y = nets::emotion_predict(&ckpt.params, "student.emotion", &zp)?;
        hits += (argmax(&y) == ds.emotion_ids[i]) as usize;
    }
    Ok(hits as f64 / indices.len().max(1) as f64)
}

pub fn argmax(y: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in y.iter().enumerate() {
        if v > y[best] {
            best = i;
        }
    }
    best
}

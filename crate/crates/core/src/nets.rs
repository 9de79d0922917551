//! Attribute encoder, style-token prosody teacher, decoder, speaker table and
//! emotion heads, plus the checkpoint bundle that persists them.
//!
//! All three sequence networks share one trunk shape: a stack of same-padded
//! dilated convolutions with `tanh` activations (residual after the first
//! block) followed by a bidirectional GRU. Heads are plain linear maps.
//!
//! Parameters live in a [`ParamSet`] keyed by dotted names; the first
//! component names the sub-network (`enc`, `dec`, `teacher`, `student`,
//! `speaker_table`, `asa`, `quantizer`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::asa::{PerturbMode, PerturbParams};
use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::tensorio::{self, Tensor, UtteranceData};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub unit_channels: usize,
    pub mel_channels: usize,
    pub conv_blocks: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub conv_channels: usize,
    pub gru_hidden: usize,
    pub content_dim: usize,
    pub prosody_dim: usize,
    pub speaker_dim: usize,
    pub n_style_tokens: usize,
    pub token_dim: usize,
    pub n_emotions: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            unit_channels: 16,
            mel_channels: 20,
            conv_blocks: 3,
            kernel: 5,
            dilations: vec![1, 2, 4],
            conv_channels: 64,
            gru_hidden: 32,
            content_dim: 12,
            prosody_dim: 4,
            speaker_dim: 64,
            n_style_tokens: 8,
            token_dim: 16,
            n_emotions: 5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Validation(format!("model config: {m}")));
        let dims = [
            self.unit_channels,
            self.mel_channels,
            self.conv_blocks,
            self.kernel,
            self.conv_channels,
            self.gru_hidden,
            self.content_dim,
            self.prosody_dim,
            self.speaker_dim,
            self.n_style_tokens,
            self.token_dim,
            self.n_emotions,
        ];
        if dims.contains(&0) {
            return fail("all dimensions must be positive");
        }
        if self.kernel % 2 == 0 {
            return fail("kernel must be odd");
        }
        if self.dilations.len() != self.conv_blocks || self.dilations.contains(&0) {
            return fail("need one positive dilation per conv block");
        }
        if self.content_dim + self.prosody_dim >= 2 * self.gru_hidden {
            return fail("content_dim + prosody_dim must be < 2 * gru_hidden");
        }
        if self.conv_channels < 2 || self.gru_hidden < 2 {
            return fail("conv_channels and gru_hidden must be >= 2 (teacher runs at half width)");
        }
        Ok(())
    }

    pub fn teacher_channels(&self) -> usize {
        (self.conv_channels / 2).max(1)
    }

    pub fn teacher_hidden(&self) -> usize {
        (self.gru_hidden / 2).max(1)
    }

    /// Shortest sequence the convolutions accept.
    pub fn min_frames(&self) -> usize {
        self.kernel
    }
}

/// Named parameter matrices, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, m: Mat) {
        self.map.insert(name.into(), m);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.map.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> Result<&Mat> {
        self.get(name)
            .ok_or_else(|| Error::Validation(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|m| m.len()).sum()
    }

    /// Puts every parameter on the tape; `trainable(name)` decides between a
    /// gradient-receiving leaf and a constant.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, m)| {
                let v = if trainable(k) { g.param(m.clone()) } else { g.constant(m.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Rounds every value to f32 precision, the persisted precision.
    pub fn round_to_f32(&mut self) {
        for m in self.map.values_mut() {
            m.mapv_inplace(|v| v as f32 as f64);
        }
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Mat)> + 'a {
        self.map.iter().filter(move |(k, _)| k.starts_with(prefix))
    }
}

/// Parameters placed on one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, fan_in: usize) -> Mat {
    let k = 1.0 / (fan_in as f64).sqrt();
    Mat::from_shape_fn((r, c), |_| rng.random_range(-k..k))
}

fn add_linear(p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize) {
    p.insert(format!("{name}.w"), uniform(rng, i, o, i));
    p.insert(format!("{name}.b"), uniform(rng, 1, o, i));
}

fn add_trunk(p: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, cfg: &EncoderConfig, input: usize, width: usize, hidden: usize) {
    let mut c_in = input;
    for i in 0..cfg.conv_blocks {
        add_linear(p, rng, &format!("{prefix}.conv{i}"), cfg.kernel * c_in, width);
        c_in = width;
    }
    for dir in ["fwd", "bwd"] {
        add_linear(p, rng, &format!("{prefix}.gru_{dir}.ih"), width, 3 * hidden);
        add_linear(p, rng, &format!("{prefix}.gru_{dir}.hh"), hidden, 3 * hidden);
    }
}

/// Fresh teacher parameters.
pub fn init_teacher(cfg: &EncoderConfig, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7EAC_4E52);
    let mut p = ParamSet::new();
    let (tw, th) = (cfg.teacher_channels(), cfg.teacher_hidden());
    add_trunk(&mut p, &mut rng, "teacher", cfg, PROSODY_INPUTS, tw, th);
    add_linear(&mut p, &mut rng, "teacher.frame", 2 * th, cfg.prosody_dim);
    add_linear(&mut p, &mut rng, "teacher.query", 2 * th, cfg.token_dim);
    let tokens = Mat::from_shape_fn((cfg.n_style_tokens, cfg.token_dim), |_| {
        0.5 * rng.sample::<f64, _>(StandardNormal)
    });
    p.insert("teacher.tokens", tokens);
    add_linear(&mut p, &mut rng, "teacher.style", cfg.token_dim, cfg.prosody_dim);
    add_linear(&mut p, &mut rng, "teacher.emotion", cfg.prosody_dim, cfg.n_emotions);
    add_linear(&mut p, &mut rng, "teacher.contour", cfg.prosody_dim, 2);
    p
}

/// Fresh student-side parameters (encoder, decoder, speaker table, student
/// emotion head and perturbation parameters).
pub fn init_main(cfg: &EncoderConfig, n_speakers: usize, mode: PerturbMode, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3A1F_0C0D);
    let mut p = ParamSet::new();
    let (w, h) = (cfg.conv_channels, cfg.gru_hidden);
    add_trunk(&mut p, &mut rng, "enc", cfg, cfg.unit_channels, w, h);
    add_linear(&mut p, &mut rng, "enc.content", 2 * h, cfg.content_dim);
    add_linear(&mut p, &mut rng, "enc.prosody", 2 * h, cfg.prosody_dim);
    let dec_in = cfg.content_dim + cfg.prosody_dim + cfg.speaker_dim;
    add_trunk(&mut p, &mut rng, "dec", cfg, dec_in, w, h);
    add_linear(&mut p, &mut rng, "dec.out", 2 * h, cfg.mel_channels);
    let table = Mat::from_shape_fn((n_speakers, cfg.speaker_dim), |_| {
        0.3 * rng.sample::<f64, _>(StandardNormal)
    });
    p.insert("speaker_table", table);
    add_linear(&mut p, &mut rng, "student.emotion", cfg.prosody_dim, cfg.n_emotions);
    let pp = PerturbParams::new(cfg.unit_channels, mode);
    p.insert("asa.i_mu", pp.i_mu.insert_axis(Axis(0)));
    p.insert("asa.i_sigma", pp.i_sigma.insert_axis(Axis(0)));
    p
}

fn linear(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Var {
    let w = p.var(&format!("{name}.w"));
    let b = p.var(&format!("{name}.b"));
    g.linear(x, w, b)
}

/// Output of a conv + BiGRU trunk.
struct TrunkOut {
    seq: Var,
    /// `B x 2H`: final forward state and final backward state.
    last: Var,
}

fn gru_direction(g: &mut Graph, p: &Bound, name: &str, x: Var, batch: usize, frames: usize, hidden: usize, reverse: bool) -> (Vec<Var>, Var) {
    let xp = linear(g, p, &format!("{name}.ih"), x);
    let whh = p.var(&format!("{name}.hh.w"));
    let bhh = p.var(&format!("{name}.hh.b"));
    let mut h = g.constant(Mat::zeros((batch, hidden)));
    let mut outs = vec![h; frames];
    let order: Vec<usize> = if reverse { (0..frames).rev().collect() } else { (0..frames).collect() };
    for t in order {
        let rows: Vec<usize> = (0..batch).map(|b| b * frames + t).collect();
        let xt = g.gather_rows(xp, &rows);
        h = g.gru_cell(xt, h, whh, bhh);
        outs[t] = h;
    }
    (outs, h)
}

fn trunk(g: &mut Graph, p: &Bound, prefix: &str, cfg: &EncoderConfig, x: Var, frames: usize, hidden: usize) -> TrunkOut {
    let rows = g.value(x).nrows();
    let batch = rows / frames;
    let mut h = x;
    for i in 0..cfg.conv_blocks {
        let cols = g.im2col(h, frames, cfg.kernel, cfg.dilations[i]);
        let y = linear(g, p, &format!("{prefix}.conv{i}"), cols);
        let y = g.tanh(y);
        h = if i == 0 { y } else { g.add(y, h) };
    }
    let (f_outs, f_last) = gru_direction(g, p, &format!("{prefix}.gru_fwd"), h, batch, frames, hidden, false);
    let (b_outs, b_last) = gru_direction(g, p, &format!("{prefix}.gru_bwd"), h, batch, frames, hidden, true);
    let f_seq = g.stack_time(&f_outs);
    let b_seq = g.stack_time(&b_outs);
    let seq = g.concat_cols(&[f_seq, b_seq]);
    let last = g.concat_cols(&[f_last, b_last]);
    TrunkOut { seq, last }
}

fn check_frames(cfg: &EncoderConfig, frames: usize) -> Result<()> {
    if frames < cfg.min_frames() {
        return Err(Error::Shape(format!(
            "sequence of {frames} frames is shorter than kernel {}",
            cfg.kernel
        )));
    }
    Ok(())
}

/// Taped attribute encoder over `(B*W) x C` units: `(content, prosody)`,
/// shapes `(B*W) x d_c` and `(B*W) x d_p`.
pub fn attr_encode_graph(g: &mut Graph, p: &Bound, cfg: &EncoderConfig, units: Var, frames: usize) -> (Var, Var) {
    let t = trunk(g, p, "enc", cfg, units, frames, cfg.gru_hidden);
    let zc = linear(g, p, "enc.content", t.seq);
    let zp = linear(g, p, "enc.prosody", t.seq);
    (zc, zp)
}

/// Number of teacher input channels: normalized log-f0, voicing, normalized log-energy.
pub const PROSODY_INPUTS: usize = 3;

pub struct TeacherOut {
    pub z_p: Var,
    /// `B x n_style_tokens` attention weights.
    pub attention: Var,
}

/// Taped teacher over `(B*W) x 3` prosody inputs.
pub fn teacher_encode_graph(g: &mut Graph, p: &Bound, cfg: &EncoderConfig, prosody: Var, frames: usize) -> TeacherOut {
    let t = trunk(g, p, "teacher", cfg, prosody, frames, cfg.teacher_hidden());
    let frame = linear(g, p, "teacher.frame", t.seq);
    let q = linear(g, p, "teacher.query", t.last);
    let tokens = p.var("teacher.tokens");
    let keys = g.transpose(tokens);
    let scores = g.matmul(q, keys);
    let scores = g.scale(scores, 1.0 / (cfg.token_dim as f64).sqrt());
    let attention = g.softmax_rows(scores);
    let readout = g.matmul(attention, tokens);
    let style = linear(g, p, "teacher.style", readout);
    let style = g.repeat_rows(style, frames);
    TeacherOut {
        z_p: g.add(frame, style),
        attention,
    }
}

/// Taped decoder. `speaker` is `B x d_s`; returns `(B*W) x M`.
pub fn decode_graph(g: &mut Graph, p: &Bound, cfg: &EncoderConfig, z_c: Var, z_p: Var, speaker: Var, frames: usize) -> Var {
    let s = g.repeat_rows(speaker, frames);
    let x = g.concat_cols(&[z_c, z_p, s]);
    let t = trunk(g, p, "dec", cfg, x, frames, cfg.gru_hidden);
    linear(g, p, "dec.out", t.seq)
}

/// Taped emotion head (`teacher.emotion` or `student.emotion`): temporal mean
/// pool, then linear to `K` raw scores.
pub fn emotion_graph(g: &mut Graph, p: &Bound, head: &str, z: Var, frames: usize) -> Var {
    let pooled = g.mean_pool_seq(z, frames);
    linear(g, p, head, pooled)
}

fn frozen(params: &ParamSet) -> (Graph, Bound) {
    let mut g = Graph::new();
    let b = params.bind(&mut g, |_| false);
    (g, b)
}

/// Untaped attribute encoder on one `W x C` utterance.
pub fn attr_encode(params: &ParamSet, cfg: &EncoderConfig, units: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    check_frames(cfg, units.nrows())?;
    if units.ncols() != cfg.unit_channels {
        return Err(Error::Shape(format!(
            "units have {} channels, model expects {}",
            units.ncols(),
            cfg.unit_channels
        )));
    }
    if units.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite units".into()));
    }
    let (mut g, b) = frozen(params);
    let x = g.constant(units.clone());
    let (zc, zp) = attr_encode_graph(&mut g, &b, cfg, x, units.nrows());
    Ok((g.value(zc).clone(), g.value(zp).clone()))
}

/// Untaped teacher on one utterance's normalized `W x 3` prosody input;
/// returns `(Z_P, attention weights)`.
pub fn teacher_encode(params: &ParamSet, cfg: &EncoderConfig, prosody: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    check_frames(cfg, prosody.nrows())?;
    if prosody.ncols() != PROSODY_INPUTS {
        return Err(Error::Shape(format!("prosody input must be W x {PROSODY_INPUTS}")));
    }
    let (mut g, b) = frozen(params);
    let x = g.constant(prosody.clone());
    let out = teacher_encode_graph(&mut g, &b, cfg, x, prosody.nrows());
    Ok((g.value(out.z_p).clone(), g.value(out.attention).row(0).to_owned()))
}

/// Untaped decoder on one utterance.
pub fn decode(params: &ParamSet, cfg: &EncoderConfig, z_c: &Array2<f64>, z_p: &Array2<f64>, speaker: &Array1<f64>) -> Result<Array2<f64>> {
    let w = z_c.nrows();
    check_frames(cfg, w)?;
    if z_p.nrows() != w {
        return Err(Error::Shape("content and prosody streams are not frame-aligned".into()));
    }
    if z_c.ncols() != cfg.content_dim || z_p.ncols() != cfg.prosody_dim || speaker.len() != cfg.speaker_dim {
        return Err(Error::Shape(format!(
            "decoder expects widths ({}, {}, {}), got ({}, {}, {})",
            cfg.content_dim,
            cfg.prosody_dim,
            cfg.speaker_dim,
            z_c.ncols(),
            z_p.ncols(),
            speaker.len()
        )));
    }
    if speaker.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite speaker embedding".into()));
    }
    let (mut g, b) = frozen(params);
    let zc = g.constant(z_c.clone());
    let zp = g.constant(z_p.clone());
    let s = g.constant(speaker.clone().insert_axis(Axis(0)));
    let out = decode_graph(&mut g, &b, cfg, zc, zp, s, w);
    Ok(g.value(out).clone())
}

/// Untaped emotion head on one utterance's `W x d_p` prosody stream.
pub fn emotion_predict(params: &ParamSet, head: &str, z: &Array2<f64>) -> Result<Array1<f64>> {
    let (mut g, b) = frozen(params);
    let x = g.constant(z.clone());
    let y = emotion_graph(&mut g, &b, head, x, z.nrows());
    Ok(g.value(y).row(0).to_owned())
}

/// A target speaker: a trained table entry or an imported vector.
#[derive(Debug, Clone, PartialEq)]
pub enum SpeakerRef {
    Name(String),
    External(Array1<f64>),
}

impl From<&str> for SpeakerRef {
    fn from(s: &str) -> Self {
        SpeakerRef::Name(s.to_string())
    }
}

/// Corpus-level normalization of the teacher's prosody inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProsodyNorm {
    pub f0_mean: f64,
    pub f0_std: f64,
    pub energy_mean: f64,
    pub energy_std: f64,
}

impl Default for ProsodyNorm {
    fn default() -> Self {
        Self {
            f0_mean: 0.0,
            f0_std: 1.0,
            energy_mean: 0.0,
            energy_std: 1.0,
        }
    }
}

impl ProsodyNorm {
    /// Mean and std of voiced log-f0 and of all log-energy frames.
    pub fn fit(data: &[UtteranceData]) -> Self {
        let voiced: Vec<f64> = data
            .iter()
            .flat_map(|u| u.f0.iter().copied().filter(|&v| v != 0.0))
            .collect();
        let energy: Vec<f64> = data.iter().flat_map(|u| u.energy.iter().copied()).collect();
        let (f0_mean, f0_std) = mean_std(&voiced);
        let (energy_mean, energy_std) = mean_std(&energy);
        Self {
            f0_mean,
            f0_std,
            energy_mean,
            energy_std,
        }
    }

    /// `W x 3`: z-normalized log-f0 (0 on unvoiced frames), voicing, z-normalized log-energy.
    pub fn teacher_input(&self, f0: &Array1<f64>, energy: &Array1<f64>) -> Result<Array2<f64>> {
        if f0.len() != energy.len() {
            return Err(Error::Shape(format!(
                "f0 has {} frames, energy has {}",
                f0.len(),
                energy.len()
            )));
        }
        Ok(Array2::from_shape_fn((f0.len(), PROSODY_INPUTS), |(t, c)| match c {
            0 if f0[t] != 0.0 => (f0[t] - self.f0_mean) / self.f0_std,
            0 => 0.0,
            1 => (f0[t] != 0.0) as u8 as f64,
            _ => (energy[t] - self.energy_mean) / self.energy_std,
        }))
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 1.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
    (m, if s > 1e-8 { s } else { 1.0 })
}

/// Nearest-centroid quantizer standing in for discrete units.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer {
    pub centroids: Array2<f64>,
}

impl Quantizer {
    /// Lloyd's k-means over all rows, initialized from rows picked by `seed`.
    pub fn fit(frames: &Array2<f64>, k: usize, iters: usize, seed: u64) -> Result<Self> {
        let n = frames.nrows();
        if n < k || k == 0 {
            return Err(Error::Validation(format!("k-means needs >= {k} frames, got {n}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks = rand::seq::index::sample(&mut rng, n, k).into_vec();
        let mut centroids = frames.select(Axis(0), &picks);
        let mut assign = vec![0usize; n];
        for _ in 0..iters {
            let q = Quantizer { centroids: centroids.clone() };
            for (i, row) in frames.rows().into_iter().enumerate() {
                assign[i] = q.nearest(row);
            }
            let mut sums = Array2::<f64>::zeros(centroids.dim());
            let mut counts = vec![0usize; k];
            for (i, row) in frames.rows().into_iter().enumerate() {
                let mut s = sums.row_mut(assign[i]);
                s += &row;
                counts[assign[i]] += 1;
            }
            for j in 0..k {
                if counts[j] > 0 {
                    let mean = sums.row(j).mapv(|v| v / counts[j] as f64);
                    centroids.row_mut(j).assign(&mean);
                }
            }
        }
        Ok(Self { centroids })
    }

    fn nearest(&self, row: ndarray::ArrayView1<f64>) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (j, c) in self.centroids.rows().into_iter().enumerate() {
            let d: f64 = c.iter().zip(row.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, j);
            }
        }
        best.1
    }

    pub fn quantize(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let j = self.nearest(row.view());
            row.assign(&self.centroids.row(j));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Teacher,
    Main,
    Finetuned,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Teacher => "teacher",
            Stage::Main => "main",
            Stage::Finetuned => "finetuned",
        })
    }
}

/// Serializable position of a ChaCha8 generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed_hex: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed_hex: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Format(format!("bad rng state {self:?}"));
        if self.seed_hex.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed_hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    stage: Stage,
    model: EncoderConfig,
    train: TrainConfig,
    speakers: Vec<String>,
    emotions: Vec<String>,
    prosody_norm: ProsodyNorm,
    rng_state: RngState,
    step_count: u64,
    params: Vec<ParamEntry>,
}

const SIDECAR: &str = "checkpoint.json";

/// Parameters plus everything needed to resume or run a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub model: EncoderConfig,
    pub train: TrainConfig,
    pub speakers: Vec<String>,
    pub emotions: Vec<String>,
    pub prosody_norm: ProsodyNorm,
    pub rng_state: RngState,
    pub step_count: u64,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn require_stage(&self, allowed: &[Stage]) -> Result<()> {
        if allowed.contains(&self.stage) {
            return Ok(());
        }
        Err(Error::Stage {
            expected: allowed.iter().map(Stage::to_string).collect::<Vec<_>>().join("|"),
            found: self.stage.to_string(),
        })
    }

    pub fn perturb_params(&self) -> Result<PerturbParams> {
        let mut pp = PerturbParams::new(self.model.unit_channels, self.train.asa_mode);
        pp.i_mu = self.params.expect("asa.i_mu")?.row(0).to_owned();
        pp.i_sigma = self.params.expect("asa.i_sigma")?.row(0).to_owned();
        pp.grl_lambda = self.train.grl_lambda;
        Ok(pp)
    }

    pub fn quantizer(&self) -> Option<Quantizer> {
        self.params.get("quantizer.centroids").map(|c| Quantizer { centroids: c.clone() })
    }

    pub fn speaker_index(&self, name: &str) -> Option<usize> {
        self.speakers.iter().position(|s| s == name)
    }

    /// The embedding a decoder should receive for `speaker`.
    pub fn speaker_embed(&self, speaker: &SpeakerRef) -> Result<Array1<f64>> {
        match speaker {
            SpeakerRef::External(v) => {
                if v.len() != self.model.speaker_dim {
                    return Err(Error::Shape(format!(
                        "imported embedding has dim {}, model expects {}",
                        v.len(),
                        self.model.speaker_dim
                    )));
                }
                Ok(v.clone())
            }
            SpeakerRef::Name(name) => {
                let i = self
                    .speaker_index(name)
                    .ok_or_else(|| Error::UnknownSpeaker(name.clone()))?;
                Ok(self.params.expect("speaker_table")?.row(i).to_owned())
            }
        }
    }

    /// Units as the encoder sees them (quantized when the model was trained on
    /// discrete-unit stand-ins).
    pub fn encoder_input(&self, units: &Array2<f64>) -> Array2<f64> {
        match self.quantizer() {
            Some(q) => q.quantize(units),
            None => units.clone(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let pdir = dir.join("params");
        fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        let mut entries = Vec::new();
        for (name, m) in self.params.iter() {
            tensorio::write_tensor(pdir.join(format!("{name}.savt")), &Tensor::from_array2(m)?)?;
            entries.push(ParamEntry {
                name: name.clone(),
                shape: [m.nrows(), m.ncols()],
            });
        }
        let side = Sidecar {
            stage: self.stage,
            model: self.model.clone(),
            train: self.train.clone(),
            speakers: self.speakers.clone(),
            emotions: self.emotions.clone(),
            prosody_norm: self.prosody_norm,
            rng_state: self.rng_state.clone(),
            step_count: self.step_count,
            params: entries,
        };
        let mut text = serde_json::to_string_pretty(&side)?;
        text.push('\n');
        let p = dir.join(SIDECAR);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let p = dir.join(SIDECAR);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let side: Sidecar = serde_json::from_str(&text)?;
        let mut params = ParamSet::new();
        for e in &side.params {
            let t = tensorio::read_tensor(dir.join("params").join(format!("{}.savt", e.name)))?;
            let m = t.to_array2()?;
            if m.dim() != (e.shape[0], e.shape[1]) {
                return Err(Error::Shape(format!(
                    "parameter {} has shape {:?}, sidecar says {:?}",
                    e.name,
                    m.dim(),
                    e.shape
                )));
            }
            params.insert(e.name.clone(), m);
        }
        Ok(Self {
            stage: side.stage,
            model: side.model,
            train: side.train,
            speakers: side.speakers,
            emotions: side.emotions,
            prosody_norm: side.prosody_norm,
            rng_state: side.rng_state,
            step_count: side.step_count,
            params,
        })
    }
}

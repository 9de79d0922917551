//! Inference-time voice conversion: re-decode an utterance's content and
//! prosody streams with another speaker's embedding.
//!
//! Style augmentation never runs here; the encoder sees the (optionally
//! quantized) source units as they are.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nets::{self, Checkpoint, SpeakerRef, Stage};
use crate::tensorio::{self, Manifest, Tensor, UtteranceRecord};

/// One conversion job.
#[derive(Debug, Clone, PartialEq)]
pub struct ConversionRequest {
    pub source: UtteranceRecord,
    pub target: SpeakerRef,
    pub output: Option<PathBuf>,
}

/// Streams computed from the source units; independent of the target.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub content: Array2<f64>,
    pub prosody: Array2<f64>,
}

fn usable(ckpt: &Checkpoint) -> Result<()> {
    ckpt.require_stage(&[Stage::Main, Stage::Finetuned])
}

pub fn encode(ckpt: &Checkpoint, units: &Array2<f64>) -> Result<Encoded> {
    usable(ckpt)?;
    let x = ckpt.encoder_input(units);
    let (content, prosody) = nets::attr_encode(&ckpt.params, &ckpt.model, &x)?;
    let prosody = if ckpt.train.prosody_stream {
        prosody
    } else {
        Array2::zeros(prosody.dim())
    };
    Ok(Encoded { content, prosody })
}

pub fn decode_with(ckpt: &Checkpoint, enc: &Encoded, speaker: &Array1<f64>) -> Result<Array2<f64>> {
    nets::decode(&ckpt.params, &ckpt.model, &enc.content, &enc.prosody, speaker)
}

/// Converts `units` to `target`'s voice.
pub fn convert_units(ckpt: &Checkpoint, units: &Array2<f64>, target: &SpeakerRef) -> Result<Array2<f64>> {
    usable(ckpt)?;
    let s = ckpt.speaker_embed(target)?;
    let enc = encode(ckpt, units)?;
    decode_with(ckpt, &enc, &s)
}

/// Runs one request, writing the result when an output path is set.
pub fn convert(ckpt: &Checkpoint, manifest: &Manifest, req: &ConversionRequest) -> Result<Array2<f64>> {
    let units = tensorio::read_tensor(manifest.resolve(&req.source.units_path))?.to_array2()?;
    let mel = convert_units(ckpt, &units, &req.target)?;
    if let Some(out) = &req.output {
        tensorio::write_tensor(out, &Tensor::from_array2(&mel)?)?;
    }
    Ok(mel)
}

fn target_label(t: &SpeakerRef, imported: &BTreeMap<String, Array1<f64>>) -> String {
    match t {
        SpeakerRef::Name(n) => n.clone(),
        SpeakerRef::External(v) => imported
            .iter()
            .find(|(_, e)| *e == v)
            .map(|(k, _)| k.clone())
            .unwrap_or_else(|| "external".into()),
    }
}

/// Resolves a target name against the checkpoint's table, then `imported`.
pub fn resolve_target(ckpt: &Checkpoint, name: &str, imported: &BTreeMap<String, Array1<f64>>) -> Result<SpeakerRef> {
    if ckpt.speaker_index(name).is_some() {
        return Ok(SpeakerRef::Name(name.into()));
    }
    match imported.get(name) {
        Some(v) => {
            let r = SpeakerRef::External(v.clone());
            ckpt.speaker_embed(&r)?;
            Ok(r)
        }
        None => Err(Error::UnknownSpeaker(name.into())),
    }
}

/// Converts every `(utterance id, target name)` pair and writes the mels plus
/// a results manifest under `out_dir`. Every pair is resolved before anything
/// is written. `jobs > 1` converts on a thread pool; outputs are identical
/// either way.
pub fn batch_convert(
    ckpt: &Checkpoint,
    manifest: &Manifest,
    pairs: &[(String, String)],
    imported: &BTreeMap<String, Array1<f64>>,
    out_dir: impl AsRef<Path>,
    jobs: usize,
) -> Result<Manifest> {
    usable(ckpt)?;
    let out_dir = out_dir.as_ref();
    let mut jobs_list = Vec::with_capacity(pairs.len());
    for (id, target) in pairs {
        let rec = manifest
            .get(id)
            .ok_or_else(|| Error::Validation(format!("unknown utterance id {id}")))?;
        let t = resolve_target(ckpt, target, imported)?;
        jobs_list.push((rec.clone(), t));
    }
    let mel_dir = out_dir.join("mel");
    fs::create_dir_all(&mel_dir).map_err(|e| Error::io(&mel_dir, e))?;

    let run = |(rec, t): &(UtteranceRecord, SpeakerRef)| -> Result<UtteranceRecord> {
        let label = target_label(t, imported);
        let id = format!("{}__to__{label}", rec.id);
        let rel = format!("mel/{id}.savt");
        let req = ConversionRequest {
            source: rec.clone(),
            target: t.clone(),
            output: Some(out_dir.join(&rel)),
        };
        convert(ckpt, manifest, &req)?;
        let abs = |p: &str| manifest.resolve(p).to_string_lossy().into_owned();
        Ok(UtteranceRecord {
            id,
            speaker: label,
            emotion: rec.emotion.clone(),
            units_path: abs(&rec.units_path),
            mel_path: rel,
            f0_path: abs(&rec.f0_path),
            energy_path: abs(&rec.energy_path),
            factors_path: None,
        })
    };
    let records = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
        pool.install(|| jobs_list.par_iter().map(run).collect::<Result<Vec<_>>>())?
    } else {
        jobs_list.iter().map(run).collect::<Result<Vec<_>>>()?
    };
    let mut out = Manifest::new(out_dir, manifest.sample_rate_hz);
    out.utterances = records;
    out.save(out_dir.join("manifest.json"))?;
    Ok(out)
}

/// Reads `name=path` embedding imports (each a rank-1 tensor file).
pub fn load_embeddings(specs: &[String]) -> Result<BTreeMap<String, Array1<f64>>> {
    let mut out = BTreeMap::new();
    for s in specs {
        let (name, path) = s
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("embedding import {s:?} is not NAME=PATH")))?;
        let v = tensorio::read_tensor(path)?.to_array1()?;
        out.insert(name.to_string(), v);
    }
    Ok(out)
}

/// Parses a pairs file: one `utterance_id target` per line, `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        match (it.next(), it.next(), it.next()) {
            (Some(a), Some(b), None) => out.push((a.to_string(), b.to_string())),
            _ => {
                return Err(Error::Validation(format!(
                    "pairs line {}: expected `utterance_id target`",
                    n + 1
                )))
            }
        }
    }
    Ok(out)
}

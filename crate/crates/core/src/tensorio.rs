//! Tensor files, corpus manifests and utterance loading.
//!
//! Tensor file layout (little-endian throughout):
//!
//! ```text
//! "SAVT" | version u32 = 1 | dtype u8 = 0 (f32) | ndim u8 | dims: ndim x u32 | payload: f32 row-major
//! ```
//!
//! Manifests are JSON documents whose file references are resolved relative
//! to the manifest's own directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SAVT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const MANIFEST_VERSION: u32 = 1;

/// Dense row-major f32 tensor of rank 1 to 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::Shape(format!("ndim must be 1..=3, got {}", shape.len())));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("all dims must be >= 1, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn from_array1(a: &Array1<f64>) -> Result<Self> {
        Self::new(vec![a.len()], a.iter().map(|&v| v as f32).collect())
    }

    pub fn from_array2(a: &Array2<f64>) -> Result<Self> {
        let (r, c) = a.dim();
        Self::new(vec![r, c], a.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn to_array1(&self) -> Result<Array1<f64>> {
        if self.ndim() != 1 {
            return Err(Error::Shape(format!("expected rank 1, got {:?}", self.shape)));
        }
        Ok(self.data.iter().map(|&v| v as f64).collect())
    }

    /// Rank-2 view as f64. A rank-1 tensor becomes a single row.
    pub fn to_array2(&self) -> Result<Array2<f64>> {
        let (r, c) = match self.shape[..] {
            [n] => (1, n),
            [r, c] => (r, c),
            _ => return Err(Error::Shape(format!("expected rank <= 2, got {:?}", self.shape))),
        };
        let v = self.data.iter().map(|&v| v as f64).collect();
        Ok(Array2::from_shape_vec((r, c), v).expect("shape checked on construction"))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some(bad) = self.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite value {bad} in tensor")));
        }
        let mut out = Vec::with_capacity(10 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(DTYPE_F32);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| Error::Shape(format!("dim {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 {
            return Err(Error::Format(format!("header truncated ({} bytes)", bytes.len())));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        if bytes[8] != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype code {}", bytes[8])));
        }
        let ndim = bytes[9] as usize;
        if !(1..=3).contains(&ndim) {
            return Err(Error::Format(format!("ndim {ndim} outside 1..=3")));
        }
        let header = 10 + 4 * ndim;
        if bytes.len() < header {
            return Err(Error::Format("dims truncated".into()));
        }
        let shape: Vec<usize> = bytes[10..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Format(format!("zero dim in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        let payload = &bytes[header..];
        if payload.len() != 4 * n {
            return Err(Error::Format(format!(
                "payload truncated or oversized: dims {shape:?} need {} bytes, found {}",
                4 * n,
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = t.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub speaker: String,
    pub emotion: String,
    pub units_path: String,
    pub mel_path: String,
    pub f0_path: String,
    pub energy_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factors_path: Option<String>,
}

const RECORD_FIELDS: &[&str] = &[
    "id",
    "speaker",
    "emotion",
    "units_path",
    "mel_path",
    "f0_path",
    "energy_path",
    "factors_path",
];
const MANIFEST_FIELDS: &[&str] = &["format_version", "sample_rate_hz", "utterances"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub sample_rate_hz: u32,
    pub utterances: Vec<UtteranceRecord>,
    /// Directory that relative file references resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Load every tensor and check per-record shapes upfront.
    pub strict: bool,
    /// When set, every emotion label must be a member.
    pub emotion_labels: Option<Vec<String>>,
}

/// One utterance's tensors, shape-checked against the units' frame count.
#[derive(Debug, Clone)]
pub struct UtteranceData {
    pub units: Array2<f64>,
    pub mel: Array2<f64>,
    pub f0: Array1<f64>,
    pub energy: Array1<f64>,
}

impl UtteranceData {
    pub fn frames(&self) -> usize {
        self.units.nrows()
    }

    /// 1 on voiced frames (non-zero log-f0), 0 elsewhere.
    pub fn voicing(&self) -> Array1<f64> {
        self.f0.mapv(|v| if v != 0.0 { 1.0 } else { 0.0 })
    }
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, sample_rate_hz: u32) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            sample_rate_hz,
            utterances: Vec::new(),
            root: root.into(),
        }
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn get(&self, id: &str) -> Option<&UtteranceRecord> {
        self.utterances.iter().find(|r| r.id == id)
    }

    /// Distinct speakers in first-appearance order.
    pub fn speakers(&self) -> Vec<String> {
        distinct(self.utterances.iter().map(|r| r.speaker.as_str()))
    }

    /// Distinct emotions in first-appearance order.
    pub fn emotions(&self) -> Vec<String> {
        distinct(self.utterances.iter().map(|r| r.emotion.as_str()))
    }

    pub fn load_utterance(&self, rec: &UtteranceRecord) -> Result<UtteranceData> {
        let units = read_tensor(self.resolve(&rec.units_path))?;
        let mel = read_tensor(self.resolve(&rec.mel_path))?;
        let f0 = read_tensor(self.resolve(&rec.f0_path))?;
        let energy = read_tensor(self.resolve(&rec.energy_path))?;
        check_shapes(&rec.id, &units, &mel, &f0, &energy)?;
        Ok(UtteranceData {
            units: units.to_array2()?,
            mel: mel.to_array2()?,
            f0: f0.to_array1()?,
            energy: energy.to_array1()?,
        })
    }

    pub fn load_all(&self) -> Result<Vec<UtteranceData>> {
        self.utterances.iter().map(|r| self.load_utterance(r)).collect()
    }

    pub fn validate(&self, opts: &LoadOptions) -> Result<()> {
        let mut seen = HashSet::new();
        for rec in &self.utterances {
            if !seen.insert(rec.id.as_str()) {
                return Err(Error::Validation(format!("duplicate utterance id {:?}", rec.id)));
            }
            for (name, v) in [("id", &rec.id), ("speaker", &rec.speaker), ("emotion", &rec.emotion)] {
                if v.is_empty() {
                    return Err(Error::Validation(format!("empty {name} in record {:?}", rec.id)));
                }
            }
            if let Some(labels) = &opts.emotion_labels {
                if !labels.contains(&rec.emotion) {
                    return Err(Error::Validation(format!(
                        "unknown emotion {:?} in record {:?}",
                        rec.emotion, rec.id
                    )));
                }
            }
            let mut paths = vec![&rec.units_path, &rec.mel_path, &rec.f0_path, &rec.energy_path];
            paths.extend(rec.factors_path.as_ref());
            for p in paths {
                if !self.resolve(p).is_file() {
                    return Err(Error::Validation(format!(
                        "record {:?} references missing file {p:?}",
                        rec.id
                    )));
                }
            }
        }
        if opts.strict {
            for rec in &self.utterances {
                self.load_utterance(rec)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Subset sharing the same root, in the given id order.
    pub fn subset(&self, ids: &[&str]) -> Result<Manifest> {
        let mut m = Manifest::new(self.root.clone(), self.sample_rate_hz);
        for id in ids {
            let rec = self
                .get(id)
                .ok_or_else(|| Error::Validation(format!("unknown utterance id {id:?}")))?;
            m.utterances.push(rec.clone());
        }
        Ok(m)
    }
}

fn distinct<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen = HashSet::new();
    items
        .filter(|s| seen.insert(*s))
        .map(str::to_string)
        .collect()
}

fn check_shapes(id: &str, units: &Tensor, mel: &Tensor, f0: &Tensor, energy: &Tensor) -> Result<()> {
    let [w, _c] = units.shape()[..] else {
        return Err(Error::Shape(format!("{id}: units must be W x C, got {:?}", units.shape())));
    };
    match mel.shape()[..] {
        [mw, _] if mw == w => {}
        _ => return Err(Error::Shape(format!("{id}: mel {:?} does not match W={w}", mel.shape()))),
    }
    for (name, t) in [("f0", f0), ("energy", energy)] {
        if t.shape() != [w] {
            return Err(Error::Shape(format!("{id}: {name} {:?} does not match W={w}", t.shape())));
        }
    }
    Ok(())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    load_manifest_with(path, &LoadOptions::default())
}

pub fn load_manifest_with(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    warn_unknown_fields(&value);
    let mut manifest: Manifest = serde_json::from_value(value)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate(opts)?;
    Ok(manifest)
}

fn warn_unknown_fields(value: &serde_json::Value) {
    let Some(obj) = value.as_object() else { return };
    for k in obj.keys().filter(|k| !MANIFEST_FIELDS.contains(&k.as_str())) {
        log::warn!("manifest: ignoring unknown field {k:?}");
    }
    let Some(utts) = obj.get("utterances").and_then(|u| u.as_array()) else { return };
    for rec in utts.iter().filter_map(|r| r.as_object()) {
        for k in rec.keys().filter(|k| !RECORD_FIELDS.contains(&k.as_str())) {
            log::warn!("manifest: ignoring unknown utterance field {k:?}");
        }
    }
}

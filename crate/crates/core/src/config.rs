//! Plain-text run configuration.
//!
//! ```text
//! # comment
//! [data]
//! n_speakers = 10
//! speaker_scale_range = 0.5, 2.0
//!
//! [train]
//! asa_mode = learned-scale
//! ```
//!
//! Sections are `[data]`, `[model]`, `[train]` and `[eval]`; keys are the
//! field names of [`SynthSpec`], [`EncoderConfig`], [`TrainConfig`] and
//! [`EvalConfig`]. Unknown sections and keys are errors. Numbers use a
//! decimal point regardless of locale; lists are comma separated.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Number, Value};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::nets::EncoderConfig;
use crate::syndata::SynthSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub data: SynthSpec,
    pub model: EncoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// `section.key` of every key set explicitly by the parsed text.
    pub explicit: BTreeSet<String>,
}

const SECTIONS: [&str; 4] = ["data", "model", "train", "eval"];

fn to_map<T: Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v).expect("config types serialize") {
        Value::Object(m) => m,
        _ => unreachable!("config types are structs"),
    }
}

fn from_map<T: DeserializeOwned>(m: Map<String, Value>, section: &str) -> Result<T> {
    serde_json::from_value(Value::Object(m)).map_err(|e| Error::Config(format!("[{section}]: {e}")))
}

fn parse_scalar(raw: &str, like: &Value, what: &str) -> Result<Value> {
    let bad = || Error::Config(format!("{what}: cannot parse {raw:?}"));
    Ok(match like {
        Value::Bool(_) => match raw {
            "true" => Value::Bool(true),
            "false" => Value::Bool(false),
            _ => return Err(bad()),
        },
        Value::Number(n) if n.is_u64() => Value::Number(raw.parse::<u64>().map_err(|_| bad())?.into()),
        Value::Number(n) if n.is_i64() => Value::Number(raw.parse::<i64>().map_err(|_| bad())?.into()),
        Value::Number(_) => {
            // Rust's float parser is locale independent; reject the spellings
            // it accepts that are not plain decimals.
            if !raw.chars().all(|c| c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E')) {
                return Err(bad());
            }
            let f = raw.parse::<f64>().map_err(|_| bad())?;
            Value::Number(Number::from_f64(f).ok_or_else(bad)?)
        }
        Value::String(_) => Value::String(raw.to_string()),
        _ => return Err(bad()),
    })
}

fn parse_value(raw: &str, like: &Value, what: &str) -> Result<Value> {
    match like {
        Value::Array(items) => {
            let proto = items.first().cloned().unwrap_or(Value::Number(0u64.into()));
            let parts: Vec<&str> = if raw.trim().is_empty() {
                Vec::new()
            } else {
                raw.split(',').map(str::trim).collect()
            };
            parts
                .into_iter()
                .map(|p| parse_scalar(p, &proto, what))
                .collect::<Result<Vec<_>>>()
                .map(Value::Array)
        }
        _ => parse_scalar(raw, like, what),
    }
}

fn format_value(v: &Value) -> String {
    match v {
        Value::Array(items) => items.iter().map(format_value).collect::<Vec<_>>().join(", "),
        Value::String(s) => s.clone(),
        Value::Number(n) => match n.as_f64() {
            Some(f) if n.is_f64() => format_float(f),
            _ => n.to_string(),
        },
        other => other.to_string(),
    }
}

/// Shortest round-tripping decimal, always with a decimal point or exponent.
fn format_float(f: f64) -> String {
    let s = format!("{f:?}");
    if s.contains(['.', 'e', 'E']) {
        s
    } else {
        format!("{s}.0")
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut maps = [
            to_map(&SynthSpec::default()),
            to_map(&EncoderConfig::default()),
            to_map(&TrainConfig::default()),
            to_map(&EvalConfig::default()),
        ];
        let mut explicit = BTreeSet::new();
        let mut section: Option<usize> = None;
        for (n, line) in text.lines().enumerate() {
            let lineno = n + 1;
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                section = Some(
                    SECTIONS
                        .iter()
                        .position(|s| *s == name)
                        .ok_or_else(|| Error::Config(format!("line {lineno}: unknown section [{name}]")))?,
                );
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {lineno}: expected `key = value`")))?;
            let (key, raw) = (key.trim(), raw.trim());
            let s = section.ok_or_else(|| Error::Config(format!("line {lineno}: key {key} outside a section")))?;
            let what = format!("line {lineno}: [{}] {key}", SECTIONS[s]);
            let like = maps[s]
                .get(key)
                .ok_or_else(|| Error::Config(format!("line {lineno}: unknown key {key} in [{}]", SECTIONS[s])))?
                .clone();
            let v = parse_value(raw, &like, &what)?;
            maps[s].insert(key.to_string(), v);
            explicit.insert(format!("{}.{key}", SECTIONS[s]));
        }
        let [data, model, train, eval] = maps;
        Ok(Self {
            data: from_map(data, "data")?,
            model: from_map(model, "model")?,
            train: from_map(train, "train")?,
            eval: from_map(eval, "eval")?,
            explicit,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every effective key, in a form [`RunConfig::parse`] reads back to the
    /// same values.
    pub fn dump(&self) -> String {
        let maps = [
            to_map(&self.data),
            to_map(&self.model),
            to_map(&self.train),
            to_map(&self.eval),
        ];
        let mut out = String::new();
        for (name, m) in SECTIONS.iter().zip(maps) {
            out.push_str(&format!("[{name}]\n"));
            for (k, v) in m {
                out.push_str(&format!("{k} = {}\n", format_value(&v)));
            }
            out.push('\n');
        }
        out
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Sets both the corpus seed and the training seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
    }

    /// Checks every section and the agreement between corpus and model shapes.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.model.unit_channels != self.data.unit_channels || self.model.mel_channels != self.data.mel_channels {
            return Err(Error::Validation(format!(
                "[model] unit_channels/mel_channels ({}, {}) disagree with [data] ({}, {})",
                self.model.unit_channels, self.model.mel_channels, self.data.unit_channels, self.data.mel_channels
            )));
        }
        if self.model.n_emotions < self.data.n_emotions {
            return Err(Error::Validation("[model] n_emotions is smaller than [data] n_emotions".into()));
        }
        Ok(())
    }
}

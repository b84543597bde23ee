//! Flat, typed run configuration shared by every subcommand.
//!
//! A TOML file with `[section]` tables is flattened to dotted keys
//! (`synth.n_peaks`); command-line overrides use the same names and win over
//! the file. Every key must appear in [`SCHEMA`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: expected {expected}, got `{found}`")]
    Type { key: String, expected: &'static str, found: String },
    #[error("config key `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("cannot read config file {path}: {reason}")]
    File { path: String, reason: String },
    #[error("override `{0}` has no value")]
    MissingValue(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Bool,
    Str,
    /// Comma-separated (or TOML array) list of non-negative integers.
    IntList,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Int => "a non-negative integer",
            Kind::Float => "a number",
            Kind::Bool => "true or false",
            Kind::Str => "a string",
            Kind::IntList => "a list of integers",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(u64),
    Float(f64),
    Bool(bool),
    Str(String),
    IntList(Vec<u64>),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{v}"),
            Value::Bool(v) => write!(f, "{v}"),
            Value::Str(v) => f.write_str(v),
            Value::IntList(v) => {
                let s: Vec<String> = v.iter().map(u64::to_string).collect();
                f.write_str(&s.join(","))
            }
        }
    }
}

/// `(key, kind, default)`.
pub const SCHEMA: &[(&str, Kind, &str)] = &[
    ("seed", Kind::Int, "0"),
    ("threads", Kind::Int, "0"),
    ("synth.n_frames", Kind::Int, "16"),
    ("synth.n_peaks", Kind::Int, "16"),
    ("synth.width", Kind::Int, "128"),
    ("synth.height", Kind::Int, "128"),
    ("synth.amp_min", Kind::Float, "200"),
    ("synth.amp_max", Kind::Float, "2000"),
    ("synth.sigma_min", Kind::Float, "0.6"),
    ("synth.sigma_max", Kind::Float, "1.6"),
    ("synth.eta_min", Kind::Float, "0"),
    ("synth.eta_max", Kind::Float, "1"),
    ("synth.bg", Kind::Float, "10"),
    ("synth.min_separation", Kind::Float, "12"),
    ("synth.margin", Kind::Float, "7"),
    ("synth.poisson_noise", Kind::Bool, "true"),
    ("segment.threshold", Kind::Str, "auto"),
    ("model.patch_size", Kind::Int, "11"),
    ("model.conv_channels", Kind::IntList, "64,32,8"),
    ("model.fc_sizes", Kind::IntList, "64,32,2"),
    ("model.attention", Kind::Bool, "true"),
    ("model.attention_bottleneck", Kind::Int, "32"),
    ("data.label_source", Kind::Str, "ground_truth"),
    ("data.train_frac", Kind::Float, "0.8"),
    ("data.val_frac", Kind::Float, "0.09"),
    ("train.batch_size", Kind::Int, "512"),
    ("train.max_iterations", Kind::Int, "3000"),
    ("train.lr", Kind::Float, "0.001"),
    ("train.beta1", Kind::Float, "0.9"),
    ("train.beta2", Kind::Float, "0.999"),
    ("train.eps", Kind::Float, "1e-8"),
    ("train.validate_every", Kind::Int, "200"),
    ("train.patience", Kind::Int, "10"),
    ("train.resume", Kind::Bool, "false"),
    ("augment.enabled", Kind::Bool, "true"),
    ("augment.max_offset", Kind::Int, "2"),
    ("localize.method", Kind::Str, "voigt"),
    ("fit.max_iterations", Kind::Int, "200"),
    ("ablate.kind", Kind::Str, "augmentation"),
    ("ablate.max_test", Kind::Int, "2000"),
    ("eval.pred", Kind::Str, "peaks.csv"),
    ("eval.reference", Kind::Str, "truth.csv"),
    ("bench.methods", Kind::Str, "voigt,braggnn,maxima"),
    ("bench.n_patches", Kind::Int, "10000"),
    ("bench.repetitions", Kind::Int, "3"),
    ("io.frames", Kind::Str, "frames.bfrm"),
    ("io.truth", Kind::Str, "truth.csv"),
    ("io.peaks", Kind::Str, "peaks.csv"),
    ("io.weights", Kind::Str, "weights.bnnw"),
    ("io.history", Kind::Str, "history.csv"),
    ("io.report", Kind::Str, "report.csv"),
    ("io.errors", Kind::Str, "errors.csv"),
    ("io.bench", Kind::Str, "bench.jsonl"),
];

fn kind_of(key: &str) -> Result<Kind, ConfigError> {
    SCHEMA
        .iter()
        .find(|(k, _, _)| *k == key)
        .map(|&(_, kind, _)| kind)
        .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))
}

fn parse_text(key: &str, kind: Kind, text: &str) -> Result<Value, ConfigError> {
    let bad = || ConfigError::Type { key: key.to_string(), expected: kind.name(), found: text.to_string() };
    let t = text.trim();
    Ok(match kind {
        Kind::Int => Value::Int(t.parse().map_err(|_| bad())?),
        Kind::Float => Value::Float(t.parse().map_err(|_| bad())?),
        Kind::Bool => Value::Bool(t.parse().map_err(|_| bad())?),
        Kind::Str => Value::Str(text.to_string()),
        Kind::IntList => Value::IntList(
            t.split(',').filter(|s| !s.trim().is_empty()).map(|s| s.trim().parse()).collect::<Result<_, _>>().map_err(|_| bad())?,
        ),
    })
}

fn from_toml(key: &str, kind: Kind, v: &toml::Value) -> Result<Value, ConfigError> {
    let bad = || ConfigError::Type { key: key.to_string(), expected: kind.name(), found: v.to_string() };
    Ok(match (kind, v) {
        (Kind::Int, toml::Value::Integer(i)) if *i >= 0 => Value::Int(*i as u64),
        (Kind::Float, toml::Value::Float(f)) => Value::Float(*f),
        (Kind::Float, toml::Value::Integer(i)) => Value::Float(*i as f64),
        (Kind::Bool, toml::Value::Boolean(b)) => Value::Bool(*b),
        (Kind::Str, toml::Value::String(s)) => Value::Str(s.clone()),
        (Kind::Str, toml::Value::Float(f)) => Value::Str(f.to_string()),
        (Kind::Str, toml::Value::Integer(i)) => Value::Str(i.to_string()),
        (Kind::IntList, toml::Value::Array(a)) => Value::IntList(
            a.iter()
                .map(|x| x.as_integer().filter(|i| *i >= 0).map(|i| i as u64).ok_or_else(bad))
                .collect::<Result<_, _>>()?,
        ),
        (Kind::IntList, toml::Value::String(s)) => parse_text(key, kind, s)?,
        _ => return Err(bad()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, Value>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let values = SCHEMA
            .iter()
            .map(|&(k, kind, d)| (k.to_string(), parse_text(k, kind, d).expect("schema defaults parse")))
            .collect();
        Self { values }
    }
}

impl RunConfig {
    /// Merges a TOML document (tables become dotted prefixes).
    pub fn merge_toml(&mut self, text: &str) -> Result<(), ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::File {
            path: "<toml>".into(),
            reason: e.message().to_string(),
        })?;
        let mut flat = Vec::new();
        flatten("", &toml::Value::Table(table), &mut flat);
        for (key, v) in flat {
            let kind = kind_of(&key)?;
            let parsed = from_toml(&key, kind, &v)?;
            self.values.insert(key, parsed);
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        self.merge_toml(&text).map_err(|e| match e {
            ConfigError::File { reason, .. } => ConfigError::File { path: path.display().to_string(), reason },
            other => other,
        })
    }

    /// Sets `key` from its textual form.
    pub fn set(&mut self, key: &str, text: &str) -> Result<(), ConfigError> {
        let kind = kind_of(key)?;
        self.values.insert(key.to_string(), parse_text(key, kind, text)?);
        Ok(())
    }

    fn get(&self, key: &str) -> &Value {
        self.values.get(key).unwrap_or_else(|| panic!("`{key}` is not in the schema"))
    }

    pub fn int(&self, key: &str) -> u64 {
        match self.get(key) {
            Value::Int(v) => *v,
            v => panic!("`{key}` is {v:?}, not an integer"),
        }
    }

    pub fn usize(&self, key: &str) -> usize {
        self.int(key) as usize
    }

    pub fn float(&self, key: &str) -> f64 {
        match self.get(key) {
            Value::Float(v) => *v,
            v => panic!("`{key}` is {v:?}, not a number"),
        }
    }

    pub fn bool(&self, key: &str) -> bool {
        match self.get(key) {
            Value::Bool(v) => *v,
            v => panic!("`{key}` is {v:?}, not a bool"),
        }
    }

    pub fn str(&self, key: &str) -> &str {
        match self.get(key) {
            Value::Str(v) => v,
            v => panic!("`{key}` is {v:?}, not a string"),
        }
    }

    pub fn list(&self, key: &str) -> Vec<usize> {
        match self.get(key) {
            Value::IntList(v) => v.iter().map(|&x| x as usize).collect(),
            v => panic!("`{key}` is {v:?}, not a list"),
        }
    }

    /// Parses a string key with `FromStr`, reporting failures against the key.
    pub fn parsed<T: std::str::FromStr<Err = String>>(&self, key: &str) -> Result<T, ConfigError> {
        self.str(key).parse().map_err(|reason| ConfigError::Invalid { key: key.to_string(), reason })
    }

    /// `key = value` lines in key order.
    pub fn dump(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, toml::Value)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

//! Run configuration: dataset spec strings, the key=value config file, and
//! the precedence rule between them. A command-line flag beats the config
//! file, the config file beats the built-in default.
//!
//! Dataset specs name a source in one string:
//!
//! ```text
//! synth:blobs,complexity=0.1,count=2000,seed=1
//! idx:data/train-images.idx,limit=5000
//! rawrgb:data/photos.rrgb
//! ```
//!
//! Config files hold one `key=value` per line; `#` starts a comment. Keys
//! are the long flag names of the command being run, with dashes. The
//! numeric hyperparameters also answer to a dotted group form, the way
//! hand-written configs usually spell them: `priors.basic_sigma`,
//! `train.epochs`, `arch.latent_dim`. Unknown and duplicate keys are
//! errors, not silent noise.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{
    load_idx, load_rawrgb, synth_generate, DataError, ImageDataset, Split, SyntheticKind,
    SyntheticSpec,
};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{reason}")]
    Parse { reason: String },
}

fn parse_err(reason: String) -> ConfigError {
    ConfigError::Parse { reason }
}

/// One dataset source, parsed but not yet loaded.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Synth(SyntheticSpec),
    Idx { path: PathBuf, limit: Option<usize> },
    RawRgb { path: PathBuf, limit: Option<usize> },
}

impl DatasetSpec {
    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        let (scheme, rest) = s
            .split_once(':')
            .ok_or_else(|| parse_err(format!("dataset spec {s:?} has no scheme: prefix")))?;
        match scheme {
            "synth" => Self::parse_synth(rest, s),
            "idx" | "rawrgb" => {
                let mut parts = rest.split(',');
                let path = parts.next().unwrap_or("");
                if path.is_empty() {
                    return Err(parse_err(format!("dataset spec {s:?} has an empty path")));
                }
                let mut limit = None;
                for part in parts {
                    match part.split_once('=') {
                        Some(("limit", v)) => {
                            let n: usize = v.parse().map_err(|_| {
                                parse_err(format!("dataset spec {s:?}: bad limit {v:?}"))
                            })?;
                            limit = Some(n);
                        }
                        _ => {
                            return Err(parse_err(format!(
                                "dataset spec {s:?}: unknown option {part:?}"
                            )))
                        }
                    }
                }
                let path = PathBuf::from(path);
                Ok(if scheme == "idx" {
                    DatasetSpec::Idx { path, limit }
                } else {
                    DatasetSpec::RawRgb { path, limit }
                })
            }
            other => Err(parse_err(format!(
                "dataset spec {s:?}: unknown scheme {other:?}, expected synth, idx, or rawrgb"
            ))),
        }
    }

    fn parse_synth(rest: &str, full: &str) -> Result<Self, ConfigError> {
        let mut parts = rest.split(',');
        let kind: SyntheticKind = parts
            .next()
            .unwrap_or("")
            .parse()
            .map_err(|e| parse_err(format!("dataset spec {full:?}: {e}")))?;
        let mut spec = SyntheticSpec {
            kind,
            complexity: 0.5,
            count: 1000,
            seed: 0,
        };
        for part in parts {
            let (key, value) = part.split_once('=').ok_or_else(|| {
                parse_err(format!("dataset spec {full:?}: expected key=value, got {part:?}"))
            })?;
            let bad = |what: &str| parse_err(format!("dataset spec {full:?}: bad {what} {value:?}"));
            match key {
                "complexity" => spec.complexity = value.parse().map_err(|_| bad("complexity"))?,
                "count" => spec.count = value.parse().map_err(|_| bad("count"))?,
                "seed" => spec.seed = value.parse().map_err(|_| bad("seed"))?,
                _ => {
                    return Err(parse_err(format!(
                        "dataset spec {full:?}: unknown option {key:?}"
                    )))
                }
            }
        }
        Ok(DatasetSpec::Synth(spec))
    }

    /// Materializes the dataset. File-backed datasets take their name from
    /// the file stem, synthetic ones from the generator.
    pub fn load(&self, split: Split) -> Result<ImageDataset, DataError> {
        match self {
            DatasetSpec::Synth(spec) => synth_generate(spec, split),
            DatasetSpec::Idx { path, limit } => {
                load_idx(path, limit.unwrap_or(usize::MAX), &stem(path), split)
            }
            DatasetSpec::RawRgb { path, limit } => {
                load_rawrgb(path, limit.unwrap_or(usize::MAX), &stem(path), split)
            }
        }
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned())
}

/// Parses a `;`-separated list of dataset specs.
pub fn parse_spec_list(s: &str) -> Result<Vec<DatasetSpec>, ConfigError> {
    s.split(';')
        .filter(|p| !p.is_empty())
        .map(DatasetSpec::parse)
        .collect()
}

/// Parses a `;`-separated list of floats, as used for per-dataset sigmas.
pub fn parse_f32_list(s: &str) -> Result<Vec<f32>, ConfigError> {
    s.split(';')
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<f32>()
                .map_err(|_| parse_err(format!("bad number {p:?} in list {s:?}")))
        })
        .collect()
}

/// Reads a key=value config file. Duplicate keys are rejected so two
/// conflicting lines cannot silently shadow each other.
pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            parse_err(format!("{}:{}: expected key=value", path.display(), idx + 1))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if map.insert(key.clone(), value).is_some() {
            return Err(parse_err(format!(
                "{}:{}: duplicate key {key}",
                path.display(),
                idx + 1
            )));
        }
    }
    Ok(map)
}

/// The dotted spelling of a hyperparameter key, when it has one.
fn dotted_alias(key: &str) -> Option<String> {
    let group = match key {
        "basic-sigma" | "simple-sigma" | "sigma" => "priors",
        "epochs" | "batch-size" | "learning-rate" | "seed" | "tie-simple-kl" => "train",
        "latent-dim" | "channels" | "kernel" => "arch",
        _ => return None,
    };
    Some(format!("{group}.{}", key.replace('-', "_")))
}

/// Merges config-file values under command-line flags. Every lookup marks
/// its key as known; [`Overlay::finish`] then rejects leftovers, so a typo
/// in the file fails loudly instead of silently using a default.
pub struct Overlay {
    values: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl Overlay {
    pub fn new(values: BTreeMap<String, String>) -> Self {
        Overlay {
            values,
            used: BTreeSet::new(),
        }
    }

    pub fn empty() -> Self {
        Self::new(BTreeMap::new())
    }

    fn mark_used(&mut self, key: &str) {
        self.used.insert(key.to_string());
        if let Some(alias) = dotted_alias(key) {
            self.used.insert(alias);
        }
    }

    fn file_value<T>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let alias = dotted_alias(key);
        let raw = match (self.values.get(key), alias.as_ref().and_then(|a| self.values.get(a))) {
            (Some(_), Some(_)) => {
                return Err(parse_err(format!(
                    "config keys {key} and {} both set",
                    alias.expect("dotted form exists")
                )))
            }
            (Some(v), None) | (None, Some(v)) => v,
            (None, None) => return Ok(None),
        };
        raw.parse::<T>()
            .map(Some)
            .map_err(|e| parse_err(format!("config key {key}: {e}")))
    }

    /// CLI flag if given, else file value, else default.
    pub fn get<T>(&mut self, key: &str, cli: Option<T>, default: T) -> Result<T, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.mark_used(key);
        Ok(match cli {
            Some(v) => v,
            None => self.file_value(key)?.unwrap_or(default),
        })
    }

    /// Same precedence, but the value may be absent entirely.
    pub fn get_opt<T>(&mut self, key: &str, cli: Option<T>) -> Result<Option<T>, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.mark_used(key);
        match cli {
            Some(v) => Ok(Some(v)),
            None => self.file_value(key),
        }
    }

    /// Errors on config keys no lookup ever asked about.
    pub fn finish(self) -> Result<(), ConfigError> {
        let unknown: Vec<&String> = self
            .values
            .keys()
            .filter(|k| !self.used.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            let list = unknown
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", ");
            Err(parse_err(format!("unknown config keys: {list}")))
        }
    }
}

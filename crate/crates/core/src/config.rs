//! `key = value` text with `#` comments, shared by run configs and the
//! checkpoint's embedded config record.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{load_manifest, synthetic_split, Utterance};
use crate::error::{Error, ParseErrorKind, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// One `key = value` line and its 1-based line number.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse_kv(text: &str, origin: &Path) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let malformed = |msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            kind: ParseErrorKind::Malformed(msg),
        };
        let (k, v) = line.split_once('=').ok_or_else(|| malformed(format!("expected key = value, got {:?}", line)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(malformed("empty key".into()));
        }
        if out.iter().any(|e| e.key == k) {
            return Err(malformed(format!("duplicate key {:?}", k)));
        }
        out.push(Entry { key: k.to_string(), value: v.to_string(), line: i + 1 });
    }
    Ok(out)
}

pub fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {:?} for key {}", value, key)))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("expected a boolean for {}, got {:?}", key, value))),
    }
}

/// Where training and test utterances come from.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    /// Manifests replace the synthetic task when both are set.
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_per_class: 200, test_per_class: 50, seed: 0, train_manifest: None, test_manifest: None }
    }
}

impl DataConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let path = |v: &str| if v.is_empty() || v == "none" { None } else { Some(PathBuf::from(v)) };
        match key {
            "data.train_per_class" => self.train_per_class = parse_value(key, value)?,
            "data.test_per_class" => self.test_per_class = parse_value(key, value)?,
            "data.seed" => self.seed = parse_value(key, value)?,
            "data.train_manifest" => self.train_manifest = path(value),
            "data.test_manifest" => self.test_manifest = path(value),
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        format!(
            "data.train_per_class = {}\ndata.test_per_class = {}\ndata.seed = {}\ndata.train_manifest = {}\ndata.test_manifest = {}\n",
            self.train_per_class,
            self.test_per_class,
            self.seed,
            path(&self.train_manifest),
            path(&self.test_manifest)
        )
    }
}

/// Every setting of a run, resolved from defaults and a config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.apply(key, value)? || self.train.apply(key, value)? || self.data.apply(key, value)? {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown key {:?}", key)))
        }
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for e in parse_kv(text, origin)? {
            cfg.apply(&e.key, &e.value).map_err(|err| match err {
                Error::Config(msg) => Error::Config(format!("{}:{}: {}", origin.display(), e.line, msg)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.train.lr >= 0.0) {
            return Err(Error::Config(format!("train.lr {} must be >= 0", self.train.lr)));
        }
        if self.data.train_manifest.is_some() != self.data.test_manifest.is_some() {
            return Err(Error::Config("set both data.train_manifest and data.test_manifest, or neither".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!("{}{}{}", self.model.to_kv(), self.train.to_kv(), self.data.to_kv())
    }

    /// Training and test utterances: the manifests if set, else the synthetic task.
    pub fn load_data(&self) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
        match (&self.data.train_manifest, &self.data.test_manifest) {
            (Some(tr), Some(te)) => {
                let n = self.model.num_classes;
                Ok((load_manifest(tr, n)?, load_manifest(te, n)?))
            }
            _ => synthetic_split(self.data.train_per_class, self.data.test_per_class, self.data.seed),
        }
    }
}

//! Run configuration: built-in defaults, then an optional `key = value`
//! file, then command-line flags.
//!
//! ```text
//! # factcheck.conf
//! workdir = runs/baseline
//! encoder = hashed
//! hashed_dim = 300
//! seed = 7
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;

/// Problems with how the tool was invoked rather than with the data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> UsageError {
    UsageError(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EncoderChoice {
    Hashed,
    Wordvec,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum VerifierChoice {
    Tfidf,
    Wordvec,
    External,
}

impl FromStr for EncoderChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        <Self as clap::ValueEnum>::from_str(s, true)
    }
}

impl FromStr for VerifierChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        <Self as clap::ValueEnum>::from_str(s, true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppConfig {
    /// Where artifacts are written and read.
    pub workdir: PathBuf,
    /// Input for `ingest`; later steps read the ingested copy in the workdir.
    pub corpus: Option<PathBuf>,
    pub encoder: EncoderChoice,
    pub hashed_dim: usize,
    pub wordvec_path: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub verifier: VerifierChoice,
    /// Index file; defaults to `index.fcix` in the workdir.
    pub index: Option<PathBuf>,
    pub k: usize,
    pub seed: u64,
    pub port: u16,
    /// Overrides the calibrated similarity cutoff.
    pub threshold_t: Option<f64>,
    /// Overrides the calibrated verifier boundary.
    pub tau_b: Option<f64>,
    pub train_end: NaiveDate,
    pub test_start: NaiveDate,
    pub val_fraction: f64,
    pub negatives: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// 0 disables early stopping.
    pub patience: usize,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            workdir: PathBuf::from("."),
            corpus: None,
            encoder: EncoderChoice::Hashed,
            hashed_dim: 300,
            wordvec_path: None,
            endpoint: None,
            verifier: VerifierChoice::Tfidf,
            index: None,
            k: factcheck_core::pipeline::DEFAULT_TOP_K,
            seed: 0,
            port: 8080,
            threshold_t: None,
            tau_b: None,
            train_end: NaiveDate::from_ymd_opt(2020, 5, 15).expect("valid date"),
            test_start: NaiveDate::from_ymd_opt(2020, 5, 18).expect("valid date"),
            val_fraction: 0.1,
            negatives: 1,
            epochs: 20,
            batch_size: 32,
            lr: 0.001,
            patience: 3,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, UsageError>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| usage(format!("invalid value {value:?} for {key}: {e}")))
}

impl AppConfig {
    /// Applies one setting. Keys accept `-` or `_` as separators.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), UsageError> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "workdir" => self.workdir = value.into(),
            "corpus" => self.corpus = Some(value.into()),
            "encoder" => self.encoder = parse(&key, value)?,
            "hashed_dim" => self.hashed_dim = parse(&key, value)?,
            "wordvec_path" => self.wordvec_path = Some(value.into()),
            "endpoint" => self.endpoint = Some(value.to_string()),
            "verifier" => self.verifier = parse(&key, value)?,
            "index" => self.index = Some(value.into()),
            "k" => self.k = parse(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            "port" => self.port = parse(&key, value)?,
            "threshold_t" | "t" => self.threshold_t = Some(parse(&key, value)?),
            "tau_b" => self.tau_b = Some(parse(&key, value)?),
            "train_end" => self.train_end = parse(&key, value)?,
            "test_start" => self.test_start = parse(&key, value)?,
            "val_fraction" => self.val_fraction = parse(&key, value)?,
            "negatives" => self.negatives = parse(&key, value)?,
            "epochs" => self.epochs = parse(&key, value)?,
            "batch_size" => self.batch_size = parse(&key, value)?,
            "lr" => self.lr = parse(&key, value)?,
            "patience" => self.patience = parse(&key, value)?,
            _ => return Err(usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `src`. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_str(&mut self, src: &str) -> Result<(), UsageError> {
        for (n, line) in src.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(usage(format!("config line {}: expected key = value", n + 1)));
            };
            self.set(k, v)
                .map_err(|e| usage(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), UsageError> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_str(&src)
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        if self.k == 0 {
            return Err(usage("k must be >= 1"));
        }
        if self.hashed_dim == 0 {
            return Err(usage("hashed_dim must be >= 1"));
        }
        if self.encoder == EncoderChoice::Wordvec && self.wordvec_path.is_none() {
            return Err(usage("encoder wordvec needs wordvec_path"));
        }
        let needs_endpoint =
            self.encoder == EncoderChoice::External || self.verifier == VerifierChoice::External;
        if needs_endpoint && self.endpoint.is_none() {
            return Err(usage("external encoder/verifier needs endpoint"));
        }
        Ok(())
    }

    pub fn index_path(&self) -> PathBuf {
        self.index.clone().unwrap_or_else(|| self.workdir.join("index.fcix"))
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.workdir.join(crate::workflow::CORPUS_FILE)
    }
}

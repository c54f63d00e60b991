//! Config file loading and filesystem layout for the pipeline commands.
//!
//! One TOML or JSON file carries everything: the `[model]`, `[training]`,
//! `[decoding]` and `[corpus]` sections mirror the library config structs,
//! and `[paths]` lays out where artifacts live. Any subset may appear;
//! missing values fall back to defaults, and command-line flags override
//! file values field by field.

use p2net::config::RunConfig;
use p2net::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::env;
use std::path::{Path, PathBuf};

/// Where the pipeline reads and writes artifacts. Relative entries are
/// resolved against `data_dir`, which defaults to `$P2NET_DATA_DIR` when
/// set and `./data` otherwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub raw: PathBuf,
    pub prepared: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
    /// Pretrained word vectors, one `word v1 v2 …` line per word.
    pub vectors: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: env::var_os("P2NET_DATA_DIR")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("data")),
            raw: PathBuf::from("raw"),
            prepared: PathBuf::from("prepared"),
            checkpoints: PathBuf::from("checkpoints"),
            reports: PathBuf::from("reports"),
            vectors: None,
        }
    }
}

impl Paths {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.data_dir.join(p)
        }
    }

    pub fn raw_dir(&self) -> PathBuf {
        self.resolve(&self.raw)
    }

    pub fn prepared_dir(&self) -> PathBuf {
        self.resolve(&self.prepared)
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.resolve(&self.checkpoints)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.resolve(&self.reports)
    }

    pub fn vectors_path(&self) -> Option<PathBuf> {
        self.vectors.as_deref().map(|p| self.resolve(p))
    }
}

/// Everything a command needs: the model/training/decoding/corpus bundle
/// plus the filesystem layout.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CliConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    pub paths: Paths,
}

pub fn load(path: Option<&Path>) -> Result<CliConfig> {
    let Some(path) = path else {
        return Ok(CliConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "toml" => toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display()))),
        "json" => serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display()))),
        other => Err(Error::config(format!(
            "config {} has unsupported extension {other:?}; use .toml or .json",
            path.display()
        ))),
    }
}

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::{ParamStore, Scalar};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub total: usize,
    pub encoder: usize,
    pub decoder: usize,
}

impl ParamCounts {
    /// Splits scalar counts by tensor name: embedding and `enc*` tensors
    /// belong to the encoder, everything else to the decoder.
    pub fn of<T: Scalar>(store: &ParamStore<T>) -> Self {
        let mut counts = Self::default();
        for (_, name, t) in store.iter() {
            counts.total += t.len();
            if name.starts_with("embed") || name.starts_with("enc") {
                counts.encoder += t.len();
            } else {
                counts.decoder += t.len();
            }
        }
        counts
    }
}

/// Everything needed to repeat a run; written before the work starts and
/// rewritten with the outcome.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub subcommand: String,
    pub preset: Option<String>,
    pub seed: u64,
    pub precision: Option<String>,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub outputs: Vec<PathBuf>,
    pub parameters: Option<ParamCounts>,
    pub settings: serde_json::Value,
    pub status: String,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn new(command: Vec<String>, subcommand: &str, seed: u64) -> Self {
        Self {
            command,
            subcommand: subcommand.to_string(),
            preset: None,
            seed,
            precision: None,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            outputs: Vec::new(),
            parameters: None,
            settings: serde_json::Value::Null,
            status: "running".into(),
            error: None,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        json.push(b'\n');
        write_atomic(path, &json)
    }
}

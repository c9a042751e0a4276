use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use dyngame_core::scenario::to_json;
use dyngame_core::Result;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub tool_version: &'static str,
    pub started_at: String,
    pub finished_at: String,
    /// Paths relative to the manifest's directory.
    pub outputs: Vec<String>,
    pub summary: Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Current UTC time, or `SOURCE_DATE_EPOCH` when set so that reruns are
/// byte-identical.
pub fn timestamp() -> String {
    let fixed = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.trim().parse::<i64>().ok());
    let t = match fixed.and_then(|s| DateTime::<Utc>::from_timestamp(s, 0)) {
        Some(t) => t,
        None => Utc::now(),
    };
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

pub struct Recorder {
    command: String,
    config_hash: Option<String>,
    seed: Option<u64>,
    started_at: String,
}

impl Recorder {
    pub fn new(command: impl Into<String>, config_hash: Option<String>, seed: Option<u64>) -> Self {
        Self { command: command.into(), config_hash, seed, started_at: timestamp() }
    }

    /// Writes `manifest` describing `outputs`, all of which live in `dir`.
    pub fn finish(self, manifest: &Path, outputs: &[PathBuf], summary: Value) -> Result<()> {
        let dir = manifest.parent().unwrap_or(Path::new(""));
        let outputs = outputs
            .iter()
            .map(|p| p.strip_prefix(dir).unwrap_or(p).to_string_lossy().into_owned())
            .collect();
        let m = RunManifest {
            command: self.command,
            config_hash: self.config_hash,
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION"),
            started_at: self.started_at,
            finished_at: timestamp(),
            outputs,
            summary,
        };
        std::fs::write(manifest, to_json(&m)?)?;
        Ok(())
    }
}

/// `<out>.manifest.json` next to a single output file.
pub fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

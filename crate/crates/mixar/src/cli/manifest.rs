//! Run manifests: every report-producing subcommand writes one next to its
//! report, tying the output to the resolved configuration and master seed
//! so the run can be reproduced byte-for-byte.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Stable hash of the fully resolved configuration.
    pub config_digest: String,
    pub master_seed: u64,
    pub tool_version: String,
    pub started: String,
    pub finished: String,
}

/// FNV-1a digest of the canonical JSON encoding of a configuration value.
/// `serde_json` maps are sorted, so key order cannot perturb the digest.
pub fn config_digest(config: &serde_json::Value) -> String {
    let text = config.to_string();
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in text.bytes() {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

/// Manifest path derived from a report path: `<report>.manifest.json`.
pub fn manifest_path(report: &Path) -> PathBuf {
    let mut name = report.as_os_str().to_os_string();
    name.push(".manifest.json");
    PathBuf::from(name)
}

pub fn write_manifest(report: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    let path = manifest_path(report);
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| CliError::Data(format!("manifest serialization failed: {e}")))?;
    std::fs::write(&path, text + "\n")
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn read_manifest(report: &Path) -> Result<RunManifest, CliError> {
    let path = manifest_path(report);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

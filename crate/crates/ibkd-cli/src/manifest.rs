//! Run manifests: a JSON record of everything a command consumed and
//! produced, written before any long-running work starts so interrupted
//! runs still leave an audit trail. Re-running a command with the
//! manifest's `config` against the same inputs reproduces the outputs
//! bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fail::{runtime, CliError};

/// Audit record for one invocation.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    /// Tool name and version that produced the run.
    pub tool: String,
    /// Subcommand name.
    pub command: String,
    /// The full argument vector, so the exact invocation can be replayed.
    pub args: Vec<String>,
    /// Wall-clock creation time, milliseconds since the Unix epoch.
    pub created_unix_ms: u64,
    /// The seed governing every random draw of the run.
    pub seed: u64,
    /// Fully resolved configuration (defaults filled in), ready to be fed
    /// back through the same subcommand.
    pub config: serde_json::Value,
    /// SHA-256 digest of every input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    /// Paths this run writes (besides the manifest itself).
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        RunManifest {
            tool: format!("ibkd {}", env!("CARGO_PKG_VERSION")),
            command: command.to_string(),
            args: std::env::args().collect(),
            created_unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
            seed,
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    /// Digests `path` and records it as an input.
    pub fn add_input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| runtime(format!("serializing manifest: {e}")))?;
        std::fs::write(path, json).map_err(|e| runtime(format!("writing {}: {e}", path.display())))
    }
}

/// Hex-encoded SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut file =
        File::open(path).map_err(|e| runtime(format!("reading {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file
            .read(&mut buf)
            .map_err(|e| runtime(format!("reading {}: {e}", path.display())))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

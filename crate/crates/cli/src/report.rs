//! Reproducibility headers and report writers. Every report file embeds the
//! hash of the effective configuration (after overrides), the seed when the
//! command uses one, and the crate version. Reports never contain wall-clock
//! timestamps; timing goes to stderr logs only.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

#[derive(Debug, Clone, Serialize)]
pub struct ReportHeader {
    pub version: String,
    pub command: String,
    /// SHA-256 of the effective configuration's canonical JSON.
    pub config_hash: String,
    pub seed: Option<u64>,
    /// Command-line overrides applied on top of the config file, in order.
    pub overrides: Vec<String>,
}

/// Hash the effective configuration. Field order is fixed by the struct
/// definitions, so equal configs hash equally.
pub fn config_hash<T: Serialize>(config: &T) -> CliResult<String> {
    let json = serde_json::to_string(config)
        .map_err(|e| CliError::Config(format!("cannot serialize effective config: {e}")))?;
    let digest = Sha256::digest(json.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn header_for<T: Serialize>(
    command: &str,
    effective_config: &T,
    seed: Option<u64>,
    overrides: Vec<String>,
) -> CliResult<ReportHeader> {
    Ok(ReportHeader {
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        config_hash: config_hash(effective_config)?,
        seed,
        overrides,
    })
}

/// One-line `# ...` form of the header for CSV and plain-text reports.
pub fn comment_line(header: &ReportHeader) -> String {
    let seed = match header.seed {
        Some(s) => s.to_string(),
        None => "none".to_string(),
    };
    let overrides =
        if header.overrides.is_empty() { "none".to_string() } else { header.overrides.join(",") };
    format!(
        "# version={} command={} config_hash={} seed={seed} overrides={overrides}\n",
        header.version, header.command, header.config_hash
    )
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(hyperfc::Error::Io { path: path.to_path_buf(), source })
}

/// Pretty JSON plus trailing newline.
pub fn write_json_report<T: Serialize>(path: &Path, body: &T) -> CliResult<PathBuf> {
    let json = serde_json::to_string_pretty(body)
        .map_err(|e| CliError::Config(format!("cannot serialize report: {e}")))?;
    std::fs::write(path, json + "\n").map_err(|e| io_err(path, e))?;
    Ok(path.to_path_buf())
}

/// Header comment line followed by the text body.
pub fn write_text_report(path: &Path, header: &ReportHeader, body: &str) -> CliResult<PathBuf> {
    let content = format!("{}{body}", comment_line(header));
    std::fs::write(path, content).map_err(|e| io_err(path, e))?;
    Ok(path.to_path_buf())
}

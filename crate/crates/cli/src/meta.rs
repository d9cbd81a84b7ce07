//! Per-run metadata written into every output directory.

use crate::CliError;
use cfsynth::config::RunConfig;
use serde_json::json;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

fn epoch_seconds() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Open run-metadata handle; call [`RunMeta::finish`] on success.
pub struct RunMeta {
    path: std::path::PathBuf,
    body: serde_json::Value,
}

/// Writes `run-meta.json` with the effective config echo, seed, binary
/// version, argv and a start timestamp; `finish` re-writes it with the end
/// timestamp.
pub fn start(
    out_dir: &Path,
    command: &str,
    config: &RunConfig,
    seed: u64,
) -> Result<RunMeta, CliError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    let body = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "argv": std::env::args().collect::<Vec<_>>(),
        "config": config,
        "started_unix": epoch_seconds(),
        "finished_unix": null,
    });
    let path = out_dir.join("run-meta.json");
    write_pretty(&path, &body)?;
    Ok(RunMeta { path, body })
}

impl RunMeta {
    pub fn finish(mut self) -> Result<(), CliError> {
        self.body["finished_unix"] = json!(epoch_seconds());
        write_pretty(&self.path, &self.body)
    }
}

fn write_pretty(path: &Path, v: &serde_json::Value) -> Result<(), CliError> {
    let bytes = serde_json::to_vec_pretty(v)
        .map_err(|e| CliError::Runtime(format!("serialize run meta: {e}")))?;
    std::fs::write(path, bytes)
        .map_err(|e| CliError::Runtime(format!("write {}: {e}", path.display())))
}

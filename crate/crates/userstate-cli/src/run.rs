//! Run directories, structured logs and provenance records.
//!
//! Every command that writes artifacts runs inside a [`RunContext`]: a
//! directory holding `config.json` (the resolved configuration), a
//! `log.jsonl` event stream mirrored to stdout, and a terminal record,
//! either `run.json` on success or `failure.json` on abort, both carrying
//! the config hash. Training-style commands get a fresh directory under
//! the runs root named by timestamp and hash prefix; dataset commands run
//! in their explicit output directory.

use serde_json::json;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::config::{config_hash, RunConfig};
use crate::CliError;

pub struct RunContext {
    dir: PathBuf,
    command: &'static str,
    config_hash: String,
    log: fs::File,
    started_unix: u64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io { path: path.display().to_string(), source }
}

impl RunContext {
    /// Opens a run rooted at `exact` when given, otherwise creates a fresh
    /// `<timestamp>-<hash prefix>` directory under the runs root.
    pub fn create(
        command: &'static str,
        config: &RunConfig,
        exact: Option<&Path>,
    ) -> Result<Self, CliError> {
        let hash = config_hash(config)?;
        let dir = match exact {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
                dir.to_path_buf()
            }
            None => {
                let base = &config.runs_root;
                fs::create_dir_all(base).map_err(|e| io_err(base, e))?;
                let stamp = unix_now();
                let mut suffix = 0usize;
                loop {
                    let name = if suffix == 0 {
                        format!("{stamp}-{}", &hash[..8])
                    } else {
                        format!("{stamp}-{}-{suffix}", &hash[..8])
                    };
                    let candidate = base.join(name);
                    match fs::create_dir(&candidate) {
                        Ok(()) => break candidate,
                        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => suffix += 1,
                        Err(e) => return Err(io_err(&candidate, e)),
                    }
                }
            }
        };

        let config_path = dir.join("config.json");
        fs::write(&config_path, serde_json::to_string_pretty(config)?)
            .map_err(|e| io_err(&config_path, e))?;
        let log_path = dir.join("log.jsonl");
        let log = fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;

        let mut ctx =
            RunContext { dir, command, config_hash: hash, log, started_unix: unix_now() };
        ctx.log_event("start", json!({ "dir": ctx.dir.display().to_string() }));
        Ok(ctx)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Appends one structured record to the log and echoes it to stdout.
    pub fn log_event(&mut self, event: &str, fields: serde_json::Value) {
        let mut record = json!({
            "event": event,
            "command": self.command,
            "unix": unix_now(),
        });
        if let (Some(base), Some(extra)) = (record.as_object_mut(), fields.as_object()) {
            for (k, v) in extra {
                base.insert(k.clone(), v.clone());
            }
        }
        let line = record.to_string();
        let _ = writeln!(self.log, "{line}");
        println!("{line}");
    }

    /// Writes the success record and closes the run.
    pub fn finish(mut self, summary: serde_json::Value) -> Result<(), CliError> {
        self.log_event("finish", json!({}));
        let record = json!({
            "command": self.command,
            "config_hash": self.config_hash,
            "status": "ok",
            "started_unix": self.started_unix,
            "finished_unix": unix_now(),
            "summary": summary,
        });
        let path = self.dir.join("run.json");
        fs::write(&path, serde_json::to_string_pretty(&record)?)
            .map_err(|e| io_err(&path, e))?;
        Ok(())
    }

    /// Marks an aborted run; best effort, the original error stays primary.
    pub fn fail(mut self, err: &CliError) {
        self.log_event("abort", json!({ "error": err.to_string() }));
        let record = json!({
            "command": self.command,
            "config_hash": self.config_hash,
            "status": "failed",
            "started_unix": self.started_unix,
            "finished_unix": unix_now(),
            "error": err.to_string(),
        });
        let _ = fs::write(self.dir.join("failure.json"), record.to_string());
    }
}

/// Runs a command body inside a context, routing errors to `failure.json`.
pub fn with_context<F>(
    command: &'static str,
    config: &RunConfig,
    exact: Option<&Path>,
    body: F,
) -> Result<(), CliError>
where
    F: FnOnce(&mut RunContext) -> Result<serde_json::Value, CliError>,
{
    let mut ctx = RunContext::create(command, config, exact)?;
    match body(&mut ctx) {
        Ok(summary) => ctx.finish(summary),
        Err(err) => {
            ctx.fail(&err);
            Err(err)
        }
    }
}

/// Enumerates missing inputs up front so a run never starts half-fed.
pub fn require_inputs(paths: &[(&str, &Path)]) -> Result<(), CliError> {
    let missing: Vec<String> = paths
        .iter()
        .filter(|(_, p)| !p.exists())
        .map(|(what, p)| format!("{what}: {}", p.display()))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::MissingInputs(missing))
    }
}

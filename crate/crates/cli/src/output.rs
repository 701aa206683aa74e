use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use figura_core::nn::Checkpoint;
use figura_core::Error;
use serde::Serialize;

use crate::{CliError, RunConfig};

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

/// Pretty JSON plus a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Line-delimited JSON log. The first record of every run is the fully
/// resolved configuration.
pub struct JsonlLog {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl JsonlLog {
    pub fn open(path: &Path, append: bool, cfg: &RunConfig, command: &str) -> Result<Self, CliError> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut log = JsonlLog {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        log.line(&serde_json::json!({
            "event": "config",
            "command": command,
            "config_hash": cfg.hash(),
            "config": cfg.to_json(),
        }))?;
        Ok(log)
    }

    pub fn line(&mut self, value: &serde_json::Value) -> Result<(), CliError> {
        let path = &self.path;
        serde_json::to_writer(&mut self.out, value).map_err(|e| Error::format(path, e.to_string()))?;
        self.out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        self.out.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("checkpoint {} not found", path.display())));
    }
    Checkpoint::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Store the producing config hash alongside a model.
pub fn stamp(ck: &mut Checkpoint, cfg: &RunConfig) {
    ck.put_bytes("run.config_hash", cfg.hash().into_bytes());
}

pub fn require<'a, T>(value: &'a Option<T>, flag: &str, mode: &str) -> Result<&'a T, CliError> {
    value
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("{mode} needs --{flag}")))
}

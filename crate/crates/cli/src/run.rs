//! Output directory bookkeeping and the run manifest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use faultline::config::RunConfig;
use faultline::container::FORMAT_VERSION;
use faultline::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub struct Run {
    pub cfg: RunConfig,
    pub hash: String,
    command: &'static str,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    container_version: u16,
    seed: u64,
    config_hash: &'a str,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Run {
    /// Creates the output directory and echoes the resolved configuration into it.
    pub fn start(command: &'static str, cfg: RunConfig) -> Result<Run> {
        std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
        let mut run = Run {
            hash: cfg.hash(),
            cfg,
            command,
            inputs: Vec::new(),
            outputs: Vec::new(),
        };
        let echo = run.cfg.to_toml();
        run.write_bytes("config.toml", echo.as_bytes())?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    /// Opens `name` in the output directory for writing.
    pub fn create(&mut self, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
        let path = self.path(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        self.outputs.push(path.clone());
        Ok((path, BufWriter::new(file)))
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let (path, mut w) = self.create(name)?;
        w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Runs `f` against a fresh output file and flushes it.
    pub fn write_with<F>(&mut self, name: &str, f: F) -> Result<PathBuf>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<()>,
    {
        let (path, mut w) = self.create(name)?;
        f(&mut w)?;
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn record_output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    /// Writes `manifest.json` with hashes of every input and output.
    pub fn finish(self) -> Result<()> {
        let entries = |paths: &[PathBuf]| -> Result<Vec<FileEntry>> {
            paths
                .iter()
                .map(|p| {
                    Ok(FileEntry {
                        path: p.display().to_string(),
                        sha256: file_sha256(p)?,
                    })
                })
                .collect()
        };
        let manifest = Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            container_version: FORMAT_VERSION,
            seed: self.cfg.seed,
            config_hash: &self.hash,
            inputs: entries(&self.inputs)?,
            outputs: entries(&self.outputs)?,
        };
        let path = self.cfg.out.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Maps a writer error on `path` into the crate error.
pub fn io_at(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

//! Output directory handling. Result files depend only on the configuration
//! and seed; wall-clock data goes to a separate `metadata.json`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::{CliError, Common, OUT_DIR_ENV};

pub struct Outputs {
    dir: PathBuf,
    command: &'static str,
    started: Instant,
    started_unix: u64,
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(format!("cannot write {}: {e}", path.display()))
}

impl Outputs {
    /// Resolves the directory (flag, then config, then environment, then
    /// `results`). Nothing is created until the first file is written.
    pub fn new(command: &'static str, common: &Common, config_dir: Option<&str>) -> Self {
        let dir = common
            .out
            .clone()
            .or_else(|| config_dir.map(PathBuf::from))
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("results"));
        Self {
            dir,
            command,
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }

    fn create(&self, name: &str) -> Result<(PathBuf, BufWriter<File>), CliError> {
        fs::create_dir_all(&self.dir).map_err(|e| io_error(&self.dir, e))?;
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| io_error(&path, e))?;
        Ok((path, BufWriter::new(file)))
    }

    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let (path, mut w) = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(|e| io_error(&path, e))?;
        writeln!(w)
            .and_then(|()| w.flush())
            .map_err(|e| io_error(&path, e))?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    /// Writes through one of the library's CSV writers.
    pub fn csv(
        &self,
        name: &str,
        write: impl FnOnce(&mut BufWriter<File>) -> fbsde_core::Result<()>,
    ) -> Result<(), CliError> {
        let (path, mut w) = self.create(name)?;
        write(&mut w).map_err(|e| io_error(&path, e))?;
        w.flush().map_err(|e| io_error(&path, e))?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    /// Timestamps, timing and thread count; the only non-reproducible file.
    pub fn metadata(&self, seed: Option<u64>) -> Result<(), CliError> {
        #[derive(Serialize)]
        struct Metadata<'a> {
            command: &'a str,
            version: &'a str,
            started_unix: u64,
            elapsed_seconds: f64,
            workers: usize,
            seed: Option<u64>,
        }
        self.json(
            "metadata.json",
            &Metadata {
                command: self.command,
                version: env!("CARGO_PKG_VERSION"),
                started_unix: self.started_unix,
                elapsed_seconds: self.started.elapsed().as_secs_f64(),
                workers: rayon::current_num_threads(),
                seed,
            },
        )
    }
}

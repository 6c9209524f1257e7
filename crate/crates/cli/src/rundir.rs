//! Run directories: one per (command, effective config), with a manifest and
//! atomic file writes.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Hex SHA-256 prefix identifying a run.
pub fn config_hash(command: &str, extra: &str, config_toml: &str) -> String {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update(b"\n");
    h.update(extra.as_bytes());
    h.update(b"\n");
    h.update(config_toml.as_bytes());
    hex::encode(h.finalize())[..16].to_string()
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    arguments: &'a str,
    config_hash: &'a str,
    version: &'a str,
    library_version: &'a str,
    threads: usize,
    status: &'a str,
    error: Option<&'a str>,
    started_unix: u64,
    finished_unix: u64,
    wall_seconds: f64,
    files: &'a [String],
}

pub struct RunDir {
    path: PathBuf,
    command: String,
    arguments: String,
    hash: String,
    threads: usize,
    started: SystemTime,
    clock: Instant,
    files: Vec<String>,
}

impl RunDir {
    /// Create `<root>/<command>-<hash>` and echo the effective config into it.
    /// The hash covers `hashed_toml`, which omits settings that cannot change results.
    pub fn create(root: &Path, command: &str, arguments: &str, hashed_toml: &str, config_toml: &str, threads: usize) -> io::Result<Self> {
        let hash = config_hash(command, arguments, hashed_toml);
        let path = root.join(format!("{}-{hash}", command.replace(' ', "-")));
        fs::create_dir_all(&path)?;
        let mut dir = Self {
            path,
            command: command.into(),
            arguments: arguments.into(),
            hash,
            threads,
            started: SystemTime::now(),
            clock: Instant::now(),
            files: Vec::new(),
        };
        dir.write("config.toml", config_toml.as_bytes())?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Write through a temporary file so readers never see a truncated output.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> io::Result<()> {
        let tmp = self.path.join(format!(".{name}.tmp"));
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, self.path.join(name))?;
        let _ = fs::remove_file(self.path.join(format!("{name}.partial")));
        self.register(name);
        Ok(())
    }

    /// Write an incomplete output under `<name>.partial`.
    pub fn write_partial(&mut self, name: &str, bytes: &[u8]) -> io::Result<()> {
        let _ = fs::remove_file(self.path.join(name));
        self.write(&format!("{name}.partial"), bytes)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> io::Result<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    /// Record a file written by other means (e.g. a checkpoint).
    pub fn register(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.into());
        }
    }

    pub fn finish(mut self, error: Option<&str>) -> io::Result<PathBuf> {
        let secs = |t: SystemTime| t.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        self.files.sort();
        let manifest = Manifest {
            command: &self.command,
            arguments: &self.arguments,
            config_hash: &self.hash,
            version: env!("CARGO_PKG_VERSION"),
            library_version: twofluid::VERSION,
            threads: self.threads,
            status: if error.is_some() { "failed" } else { "complete" },
            error,
            started_unix: secs(self.started),
            finished_unix: secs(SystemTime::now()),
            wall_seconds: self.clock.elapsed().as_secs_f64(),
            files: &self.files,
        };
        let mut s = serde_json::to_string_pretty(&manifest).map_err(io::Error::other)?;
        s.push('\n');
        let tmp = self.path.join(".manifest.json.tmp");
        fs::write(&tmp, s)?;
        fs::rename(&tmp, self.path.join("manifest.json"))?;
        Ok(self.path)
    }
}

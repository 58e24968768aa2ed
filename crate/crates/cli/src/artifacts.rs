use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context as _;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Debug, Clone, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    status: &'a str,
    started_unix: u64,
    threads: usize,
    seeds: &'a [u64],
    timings: &'a [Timing],
    files: &'a [FileRecord],
    config: &'a RunConfig,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Output directory whose files are recorded, with hashes, in a manifest.
#[derive(Debug)]
pub struct Artifacts {
    dir: PathBuf,
    files: Vec<FileRecord>,
    timings: Vec<Timing>,
    started_unix: u64,
}

impl Artifacts {
    pub fn create(dir: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        let started_unix =
            std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new(), timings: Vec::new(), started_unix })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, fill: impl FnOnce(&mut Vec<u8>) -> shapeuq::Result<()>) -> anyhow::Result<()> {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        self.write_bytes(name, &buf)
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.files.retain(|f| f.path != name);
        self.files.push(FileRecord { path: name.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() });
        Ok(())
    }

    /// Runs `f` and records its wall time under `stage`.
    pub fn stage<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        log::info!("{stage}...");
        let start = Instant::now();
        let out = f();
        let seconds = start.elapsed().as_secs_f64();
        log::info!("{stage}: {seconds:.2} s");
        self.timings.push(Timing { stage: stage.to_string(), seconds });
        out
    }

    pub fn finish(&self, command: &str, passed: bool, seeds: &[u64], config: &RunConfig) -> anyhow::Result<()> {
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            status: if passed { "pass" } else { "fail" },
            started_unix: self.started_unix,
            threads: rayon::current_num_threads(),
            seeds,
            timings: &self.timings,
            files: &self.files,
            config,
        };
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_known_input() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn rewriting_a_file_keeps_one_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Artifacts::create(dir.path()).unwrap();
        a.write_bytes("x.txt", b"1").unwrap();
        a.write_bytes("x.txt", b"2").unwrap();
        assert_eq!(a.files.len(), 1);
        assert_eq!(a.files[0].sha256, sha256_hex(b"2"));
    }
}

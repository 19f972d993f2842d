//! Output paths, atomic writes and dataset manifests.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, Result};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes through a temporary sibling and renames it into place, so readers
/// never observe a partial file.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| {
        let file = File::create(&tmp).map_err(io_err(&tmp))?;
        let mut w = BufWriter::new(file);
        fill(&mut w)?;
        w.flush().map_err(io_err(&tmp))?;
        w.get_ref().sync_all().map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(CliError::Missing(path.to_path_buf()));
    }
    fs::read(path).map_err(io_err(path))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset(&self, seed: u64, ext: &str) -> PathBuf {
        self.root.join("data").join(format!("seed_{seed}.{ext}"))
    }

    pub fn manifest(&self, seed: u64) -> PathBuf {
        self.root.join("data").join(format!("seed_{seed}.manifest.json"))
    }

    pub fn metrics(&self, seed: u64, delay: usize) -> PathBuf {
        self.root.join("train").join(format!("metrics_seed_{seed}_delay_{delay}.csv"))
    }

    pub fn policy(&self, seed: u64, delay: usize) -> PathBuf {
        self.root.join("train").join(format!("policy_seed_{seed}_delay_{delay}.ckpt"))
    }

    pub fn belief(&self, seed: u64, delay: usize) -> PathBuf {
        self.root.join("train").join(format!("belief_seed_{seed}_delay_{delay}.ckpt"))
    }

    pub fn train_state(&self, seed: u64, delay: usize) -> PathBuf {
        self.root.join("train").join(format!("state_seed_{seed}_delay_{delay}.json"))
    }

    pub fn eval_results(&self) -> PathBuf {
        self.root.join("eval").join("results.csv")
    }

    pub fn verify_reports(&self) -> PathBuf {
        self.root.join("verify").join("reports.csv")
    }

    pub fn bench_mse(&self) -> PathBuf {
        self.root.join("bench").join("stepwise_mse.csv")
    }

    pub fn bench_latency(&self) -> PathBuf {
        self.root.join("bench").join("latency.csv")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub env: String,
    pub behavior: String,
    /// Trajectories generated before subsampling.
    pub trajectories: usize,
    pub fraction: f64,
    pub selected: usize,
    pub seed: u64,
    pub file: String,
    pub sha256: String,
    /// Free-form run metadata; the only place timestamps live.
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(dtcorl_core::Error::from)?;
        write_atomic(path, |w| w.write_all(text.as_bytes()).map_err(io_err(path)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        Ok(serde_json::from_slice(&bytes).map_err(dtcorl_core::Error::from)?)
    }

    /// Reads the dataset next to the manifest, refusing it when the bytes
    /// no longer match the recorded checksum.
    pub fn read_verified(&self, manifest_path: &Path) -> Result<Vec<u8>> {
        let path = manifest_path.with_file_name(&self.file);
        let bytes = read(&path)?;
        let got = sha256_hex(&bytes);
        if got != self.sha256 {
            return Err(CliError::Core(dtcorl_core::Error::Format(format!(
                "{}: checksum mismatch (manifest {}, file {got})",
                path.display(),
                self.sha256
            ))));
        }
        Ok(bytes)
    }
}

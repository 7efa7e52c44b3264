//! On-disk layout shared by the subcommands.
//!
//! Every stage writes into its own directory under the output root and
//! finishes with a `manifest.json` naming each file with its size and
//! SHA-256. The manifest's `created_unix_s` is the only field that varies
//! between reruns; everything else, data files included, is byte-identical
//! for the same config and seed.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dedtwin::sampling::LibraryEntry;
use dedtwin::surrogate::NormStats;
use dedtwin::thermal::ThermalHistory;

/// Failures at the CLI boundary, keyed to the process exit code:
/// usage and config problems exit 2, missing or unreadable upstream
/// artifacts exit 3, numerical failures exit 4, anything else 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Upstream(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Upstream(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Upstream(m) => write!(f, "error: {m}"),
            CliError::Numerical(m) => write!(f, "error: {m}"),
            CliError::Io(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<dedtwin::Error> for CliError {
    fn from(e: dedtwin::Error) -> CliError {
        use dedtwin::Error::*;
        match e {
            Param(_) | Shape(_) | State(_) | Config(_) => CliError::Usage(e.to_string()),
            Degenerate(_) | Conditioning(_) | Diverged(_) => CliError::Numerical(e.to_string()),
            // Library parse errors only arise from artifacts written by an
            // earlier stage, so they count as broken upstream.
            Parse(_) => CliError::Upstream(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    /// Wall-clock write time. Deliberately the only non-reproducible field.
    pub created_unix_s: u64,
    pub files: Vec<FileEntry>,
}

/// Collects files for one stage directory and closes with the manifest.
pub struct StageWriter {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl StageWriter {
    pub fn new(dir: &Path) -> CliResult<StageWriter> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        Ok(StageWriter {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, contents: &str) -> CliResult<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        self.files.push(FileEntry {
            file: name.to_string(),
            bytes: contents.len() as u64,
            sha256: sha256_hex(contents.as_bytes()),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let text = to_json_pretty(value)?;
        self.write(name, &text)
    }

    /// Writes `manifest.json` (not listed among its own files) and returns
    /// the number of files recorded.
    pub fn finish(mut self, command: &str, config_sha256: &str, seed: u64) -> CliResult<usize> {
        self.files.sort_by(|a, b| a.file.cmp(&b.file));
        let n = self.files.len();
        let manifest = Manifest {
            tool: "dedtwin".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_sha256: config_sha256.into(),
            seed,
            created_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            files: self.files,
        };
        let text = to_json_pretty(&manifest)?;
        let path = self.dir.join("manifest.json");
        fs::write(&path, text)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        Ok(n)
    }
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> CliResult<String> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Io(format!("serialize failed: {e}")))?;
    text.push('\n');
    Ok(text)
}

/// Reads a file an earlier stage should have produced.
pub fn read_artifact(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Upstream(format!(
                "{} not found; run the producing stage first",
                path.display()
            ))
        } else {
            CliError::Io(format!("cannot read {}: {e}", path.display()))
        }
    })
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = read_artifact(path)?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Upstream(format!("{} is unreadable: {e}", path.display())))
}

/// Index written by `gen-profiles` next to the per-profile CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryIndex {
    pub duration_s: f64,
    pub sample_period_s: f64,
    pub clamp_w: [f64; 2],
    pub entries: Vec<LibraryEntry>,
}

pub fn profile_file(profile_id: u32) -> String {
    format!("profile_{profile_id:03}.csv")
}

/// Scalar sidecar for one simulated history; the series lives in `file`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryMeta {
    pub file: String,
    pub profile_id: u32,
    pub node: [u32; 2],
    pub x_mm: f64,
    pub z_mm: f64,
    pub t_birth_s: f64,
    pub lp_birth_w: f64,
    pub sample_period_s: f64,
    pub samples: usize,
}

impl HistoryMeta {
    pub fn of(history: &ThermalHistory, profile_id: u32, file: String) -> HistoryMeta {
        HistoryMeta {
            file,
            profile_id,
            node: history.node,
            x_mm: history.x_mm,
            z_mm: history.z_mm,
            t_birth_s: history.t_birth_s,
            lp_birth_w: history.lp_birth_w,
            sample_period_s: history.sample_period_s,
            samples: history.len(),
        }
    }

    /// Reconstructs the full history from this sidecar plus its CSV.
    pub fn load(&self, sim_dir: &Path) -> CliResult<ThermalHistory> {
        let stub = ThermalHistory {
            node: self.node,
            x_mm: self.x_mm,
            z_mm: self.z_mm,
            t_birth_s: self.t_birth_s,
            lp_birth_w: self.lp_birth_w,
            sample_period_s: self.sample_period_s,
            time_s: Vec::new(),
            temp_c: Vec::new(),
            dl_mm: Vec::new(),
            dn_mm: Vec::new(),
            lp_w: Vec::new(),
        };
        let csv = read_artifact(&sim_dir.join(&self.file))?;
        Ok(ThermalHistory::from_csv(&stub, &csv)?)
    }
}

/// Index written by `make-dataset`. Windows are cheap to rebuild, so only
/// the split, the geometry, and the normalizer are persisted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub window: usize,
    pub stride: usize,
    pub horizon: usize,
    pub train_profiles: Vec<u32>,
    pub test_profiles: Vec<u32>,
    pub norm: NormStats,
    pub n_train_windows: usize,
    pub n_test_windows: usize,
}

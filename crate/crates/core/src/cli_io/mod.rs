//! Dataset ingestion, run configuration, CSV output and the command-line
//! front end.

pub mod cli;
pub mod config;
pub mod csv_out;
pub mod dataset;
pub mod idx;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::AutodiffError;

pub use config::{ConfigError, DatasetKind, RunConfig};
pub use dataset::{downsample, gen_synthetic, load_mnist, Dataset, Split};
pub use idx::{parse_idx, read_idx, write_idx};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("unrecognised IDX magic {0:#010x}")]
    BadMagic(u32),
    #[error("stream ends after {found} bytes, header needs {needed}")]
    Truncated { needed: usize, found: usize },
    #[error("header declares {expected} elements but {found} are present")]
    SizeMismatch { expected: usize, found: usize },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("cannot pool shape {shape:?} by {factor}")]
    Indivisible { shape: Vec<usize>, factor: usize },
    #[error("synthetic data needs positive sizes")]
    EmptySynthetic,
    #[error("missing data file {0}")]
    Missing(PathBuf),
    #[error(transparent)]
    Tensor(#[from] AutodiffError),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.to_path_buf(), source }
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| DataError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| DataError::io(path, e))?;
    tmp.persist(path).map_err(|e| DataError::io(path, e.error))?;
    Ok(())
}

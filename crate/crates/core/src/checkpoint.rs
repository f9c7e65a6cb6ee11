//! JSON checkpoints for parameter snapshots, tagged with the task and
//! the stage that produced them so downstream consumers can verify they
//! are evaluating the parameters they think they are.
//!
//! Writes are unique-temp-then-rename so a crashed run never leaves a
//! half-written checkpoint behind.

use crate::params::{ParamEntry, ParameterVector};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: unsupported format_version {found} (expected {FORMAT_VERSION})")]
    Version { path: PathBuf, found: u32 },
    #[error("{path}: unknown stage {stage:?}")]
    UnknownStage { path: PathBuf, stage: String },
    #[error("{path}: {source}")]
    Params {
        path: PathBuf,
        #[source]
        source: crate::params::ParamError,
    },
}

/// Which phase of the incremental protocol produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Trained,
    Fused,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Init => "init",
            Stage::Trained => "trained",
            Stage::Fused => "fused",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub task_id: u32,
    pub stage: Stage,
    pub params: ParameterVector,
}

#[derive(Serialize, Deserialize)]
struct EntryDoc {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format_version: u32,
    task_id: u32,
    stage: String,
    entries: Vec<EntryDoc>,
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Write bytes to `path` via a unique sibling temp file and an atomic
/// rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let unique = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let mut tmp_name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_else(|| "out".into());
    tmp_name.push(format!(".tmp.{}.{}", std::process::id(), unique));
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let doc = CheckpointDoc {
        format_version: FORMAT_VERSION,
        task_id: ckpt.task_id,
        stage: ckpt.stage.to_string(),
        entries: ckpt
            .params
            .entries()
            .iter()
            .map(|e| EntryDoc {
                name: e.name.clone(),
                shape: e.shape.clone(),
                values: e.values.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&doc).expect("checkpoint serialization cannot fail");
    write_atomic(path, &json).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let doc: CheckpointDoc =
        serde_json::from_slice(&bytes).map_err(|source| CheckpointError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
    if doc.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            path: path.to_path_buf(),
            found: doc.format_version,
        });
    }
    let stage = match doc.stage.as_str() {
        "init" => Stage::Init,
        "trained" => Stage::Trained,
        "fused" => Stage::Fused,
        other => {
            return Err(CheckpointError::UnknownStage {
                path: path.to_path_buf(),
                stage: other.to_string(),
            })
        }
    };
    let entries = doc
        .entries
        .into_iter()
        .map(|e| ParamEntry {
            name: e.name,
            shape: e.shape,
            values: e.values,
        })
        .collect();
    let params = ParameterVector::new(entries).map_err(|source| CheckpointError::Params {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Checkpoint {
        task_id: doc.task_id,
        stage,
        params,
    })
}

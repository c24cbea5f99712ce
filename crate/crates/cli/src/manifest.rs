//! Run manifests: enough to reproduce a stage and check its outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Relative to the work directory when the file lies inside it.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub inputs: Vec<FileDigest>,
    pub artifacts: Vec<FileDigest>,
}

pub fn digest(path: &Path, root: &Path) -> Result<FileDigest, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let shown = path.strip_prefix(root).unwrap_or(path);
    Ok(FileDigest {
        path: shown.to_string_lossy().replace('\\', "/"),
        sha256: hex::encode(Sha256::digest(&bytes)),
        bytes: bytes.len() as u64,
    })
}

impl Manifest {
    pub fn new(stage: &str, config: &PipelineConfig, inputs: &[PathBuf], artifacts: &[PathBuf]) -> Result<Self, CliError> {
        let root = &config.paths.workdir;
        Ok(Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            stage: stage.into(),
            seed: config.seed,
            config_hash: config.hash(),
            config: config.clone(),
            inputs: inputs.iter().map(|p| digest(p, root)).collect::<Result<_, _>>()?,
            artifacts: artifacts.iter().map(|p| digest(p, root)).collect::<Result<_, _>>()?,
        })
    }

    pub fn file_name(stage: &str) -> String {
        format!("manifest.{stage}.json")
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(Self::file_name(&self.stage));
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        std::fs::write(&path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

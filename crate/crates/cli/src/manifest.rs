//! Run manifests: everything needed to repeat a CLI run exactly.

use std::fs;
use std::path::{Path, PathBuf};

use cmi_core::harness::StudySpec;
use cmi_core::simdata::{Example, Scenario};
use cmi_core::TestConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub x: PathBuf,
    pub y: PathBuf,
    pub z: PathBuf,
}

/// A command with every setting resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case", deny_unknown_fields)]
pub enum Invocation {
    Test {
        data: DataPaths,
        config: TestConfig,
    },
    Simulate {
        studies: Vec<StudySpec>,
    },
    Report {
        inputs: Vec<PathBuf>,
    },
    Generate {
        example: Example,
        scenario: Scenario,
        n: usize,
        seed: u64,
    },
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Test { .. } => "test",
            Invocation::Simulate { .. } => "simulate",
            Invocation::Report { .. } => "report",
            Invocation::Generate { .. } => "generate",
        }
    }

    pub fn master_seed(&self) -> Option<u64> {
        match self {
            Invocation::Test { config, .. } => Some(config.seed),
            Invocation::Simulate { studies } => studies.first().map(|s| s.seed),
            Invocation::Report { .. } => None,
            Invocation::Generate { seed, .. } => Some(*seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub invocation: Invocation,
    pub seed: Option<u64>,
    /// Files read by the run, with absolute paths.
    pub inputs: Vec<FileDigest>,
    /// Files written by the run, relative to `output_dir`.
    pub artifacts: Vec<FileDigest>,
    pub output_dir: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

impl RunManifest {
    pub fn new(invocation: Invocation, inputs: Vec<FileDigest>, output_dir: PathBuf) -> Self {
        RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: invocation.master_seed(),
            invocation,
            inputs,
            artifacts: Vec::new(),
            output_dir,
        }
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| {
            CliError::Input(format!(
                "{}: line {}, column {}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(CliError::Input(format!(
                "{}: manifest schema version {} is not supported (expected {MANIFEST_SCHEMA_VERSION})",
                path.display(),
                m.schema_version
            )));
        }
        Ok(m)
    }

    /// Fails if any recorded input changed since the run.
    pub fn verify_inputs(&self) -> CliResult<()> {
        for input in &self.inputs {
            let now = digest_file(&input.path)?;
            if now != input.sha256 {
                return Err(CliError::Input(format!(
                    "input {} changed since the recorded run (sha256 {} != {})",
                    input.path.display(),
                    now,
                    input.sha256
                )));
            }
        }
        Ok(())
    }
}

/// Collects the files a command writes and records their digests.
pub struct OutputDir {
    root: PathBuf,
    written: Vec<FileDigest>,
}

impl OutputDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::Input(format!("{}: {e}", root.display())))?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, name: &str, contents: &str) -> CliResult<PathBuf> {
        let path = self.root.join(name);
        fs::write(&path, contents).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        self.written.push(FileDigest {
            path: PathBuf::from(name),
            sha256: sha256_hex(contents.as_bytes()),
        });
        Ok(path)
    }

    /// Writes the manifest last, listing everything written before it.
    pub fn finish(self, mut manifest: RunManifest) -> CliResult<PathBuf> {
        manifest.artifacts = self.written;
        let path = self.root.join(MANIFEST_FILE);
        let text = cmi_core::io::to_json(&manifest);
        fs::write(&path, text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

/// Absolute form of `p` without requiring it to exist.
pub fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

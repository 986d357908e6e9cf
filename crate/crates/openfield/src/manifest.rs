//! Per-run manifest listing every artifact with its SHA-256, grouped by the
//! stage that wrote it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Generate,
    Train,
    Fuse,
    Propose,
    Eval,
    Query,
    Ablate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Train => "train",
            Stage::Fuse => "fuse",
            Stage::Propose => "propose",
            Stage::Eval => "eval",
            Stage::Query => "query",
            Stage::Ablate => "ablate",
        }
    }

    /// Stages whose outputs this stage reads.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Generate | Stage::Ablate => &[],
            Stage::Train | Stage::Fuse => &[Stage::Generate],
            Stage::Propose => &[Stage::Generate, Stage::Train, Stage::Fuse],
            Stage::Eval | Stage::Query => &[Stage::Generate, Stage::Train],
        }
    }

    const ALL: [Stage; 7] = [
        Stage::Generate,
        Stage::Train,
        Stage::Fuse,
        Stage::Propose,
        Stage::Eval,
        Stage::Query,
        Stage::Ablate,
    ];

    fn depends_on(self, other: Stage) -> bool {
        self.upstream()
            .iter()
            .any(|&u| u == other || u.depends_on(other))
            || (other == Stage::Propose && matches!(self, Stage::Eval | Stage::Query))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub seed: u64,
    /// Output path relative to the run directory → hex SHA-256.
    pub files: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_unix: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = std::fs::read_to_string(&path).map_err(CliError::io(&path))?;
        serde_json::from_str(&text).map_err(|source| CliError::Config { path, source })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        let mut text = serde_json::to_string_pretty(self).map_err(|source| CliError::Config {
            path: path.clone(),
            source,
        })?;
        text.push('\n');
        std::fs::write(&path, text).map_err(CliError::io(&path))
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.get(stage.name())
    }

    /// Check that every upstream stage ran and its files still hash to the
    /// recorded values.
    pub fn require(&self, dir: &Path, stage: Stage) -> Result<()> {
        for &up in stage.upstream() {
            self.verify(dir, up)?;
        }
        Ok(())
    }

    pub fn verify(&self, dir: &Path, stage: Stage) -> Result<()> {
        let record = self.stage(stage).ok_or_else(|| CliError::MissingStage {
            stage: stage.name(),
            what: format!("no `{}` record in {}", stage.name(), dir.join(MANIFEST_FILE).display()),
        })?;
        for (rel, hash) in &record.files {
            let path = dir.join(rel);
            if !path.exists() {
                return Err(CliError::MissingStage {
                    stage: stage.name(),
                    what: path.display().to_string(),
                });
            }
            if &sha256_file(&path)? != hash {
                return Err(CliError::StaleArtifact {
                    stage: stage.name().into(),
                    file: rel.clone(),
                });
            }
        }
        Ok(())
    }

    /// Hash `files` (relative to `dir`) into a fresh record for `stage` and
    /// drop records of stages built on top of it.
    pub fn record(&mut self, dir: &Path, stage: Stage, seed: u64, files: &[PathBuf], timestamp: bool) -> Result<()> {
        let mut record = StageRecord {
            seed,
            ..StageRecord::default()
        };
        for f in files {
            let rel = f.strip_prefix(dir).unwrap_or(f);
            let key = rel.to_string_lossy().replace('\\', "/");
            record.files.insert(key, sha256_file(&dir.join(rel))?);
        }
        if timestamp {
            record.finished_unix = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .ok()
                .map(|d| d.as_secs());
        }
        for s in Stage::ALL {
            if s.depends_on(stage) {
                self.stages.remove(s.name());
            }
        }
        self.stages.insert(stage.name().into(), record);
        Ok(())
    }
}

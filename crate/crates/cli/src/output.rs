use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};

/// Collects a command's artifacts and writes them, followed by a
/// `provenance.json` recording the command line, seed, config digest and the
/// digest of every artifact.
pub struct Output {
    dir: PathBuf,
    artifacts: Vec<(String, String)>,
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: Vec<String>,
    seed: Option<u64>,
    config_digest: String,
    artifacts: Vec<ArtifactDigest<'a>>,
}

#[derive(Serialize)]
struct ArtifactDigest<'a> {
    path: &'a str,
    sha256: String,
}

impl Output {
    pub fn new(dir: Option<&Path>) -> Result<Self> {
        let dir = dir
            .ok_or_else(|| physprior::Error::Input("--out is required".into()))?
            .to_path_buf();
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir,
            artifacts: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Queues `contents` for `name` (relative to the output directory).
    pub fn add(&mut self, name: impl Into<String>, contents: impl Into<String>) {
        self.artifacts.push((name.into(), contents.into()));
    }

    pub fn finish(self, config: &RunConfig) -> Result<()> {
        for (name, contents) in &self.artifacts {
            let path = self.dir.join(name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        }
        let provenance = Provenance {
            command: std::iter::once("physprior".to_string())
                .chain(std::env::args().skip(1))
                .collect(),
            seed: config.seed,
            config_digest: config.digest(),
            artifacts: self
                .artifacts
                .iter()
                .map(|(name, contents)| ArtifactDigest {
                    path: name,
                    sha256: hex(&Sha256::digest(contents.as_bytes())),
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&provenance)? + "\n";
        std::fs::write(self.dir.join("provenance.json"), text)?;
        Ok(())
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// Provenance record written once, before a command touches its outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub config_hash: Option<String>,
    pub dataset_checksum: Option<String>,
    pub seed: Option<u64>,
    pub code_version: String,
    pub started_at: String,
}

#[derive(Debug, Serialize)]
struct Completion<'a> {
    manifest: &'a str,
    status: &'a str,
    ended_at: String,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config_path: None,
            config_hash: None,
            dataset_checksum: None,
            seed: None,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: chrono::Utc::now().to_rfc3339(),
        }
    }

    /// Writes `manifest.json` into `dir`, or `manifest.N.json` when earlier
    /// manifests exist there. The file is never rewritten.
    pub fn write(&self, dir: &Path) -> Result<ManifestHandle> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let stem = (0..)
            .map(|n| if n == 0 { "manifest".to_string() } else { format!("manifest.{n}") })
            .find(|s| !dir.join(format!("{s}.json")).exists())
            .expect("unbounded search");
        let path = dir.join(format!("{stem}.json"));
        let tmp = dir.join(format!(".{stem}.json.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        fs::rename(&tmp, &path)?;
        Ok(ManifestHandle {
            dir: dir.to_path_buf(),
            stem,
        })
    }
}

pub struct ManifestHandle {
    dir: PathBuf,
    stem: String,
}

impl ManifestHandle {
    /// Records the end time and outcome next to the manifest.
    pub fn finish(&self, ok: bool) -> Result<()> {
        let done = Completion {
            manifest: &self.stem,
            status: if ok { "ok" } else { "failed" },
            ended_at: chrono::Utc::now().to_rfc3339(),
        };
        fs::write(
            self.dir.join(format!("{}.done.json", self.stem)),
            serde_json::to_string_pretty(&done)?,
        )?;
        Ok(())
    }
}

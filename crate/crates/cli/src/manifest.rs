use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one subcommand run, enough to repeat it.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_path: Option<PathBuf>,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub wall_time_s: f64,
    pub args: Vec<String>,
    pub artifacts: Vec<PathBuf>,
}

impl RunManifest {
    /// Writes to a temporary sibling, then renames over `path`. Refuses to
    /// list files that do not exist.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        if let Some(p) = self.artifacts.iter().find(|p| !p.exists()) {
            anyhow::bail!("manifest lists {} which was not written", p.display());
        }
        let tmp = path.with_extension("json.tmp");
        {
            let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
            serde_json::to_writer_pretty(&mut f, self)?;
            f.write_all(b"\n")?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

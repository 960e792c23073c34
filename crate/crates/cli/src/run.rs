//! Run directories and their manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use fedgan::models::hex;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Config;

#[derive(Debug, Serialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    /// False for files that record wall-clock time.
    pub deterministic: bool,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub subcommand: String,
    pub config_digest: String,
    pub seed: u64,
    pub run_dir: String,
    pub wall_clock_secs: f64,
    pub artifacts: Vec<Artifact>,
}

pub struct Run {
    pub dir: PathBuf,
    subcommand: String,
    digest: String,
    seed: u64,
    started: Instant,
    artifacts: Vec<Artifact>,
}

impl Run {
    /// Creates `<run dir>/<subcommand>` for this config, or `dir` if given.
    pub fn create(cfg: &Config, subcommand: &str, dir: Option<&Path>) -> Result<Run> {
        let dir = match dir {
            Some(d) => d.to_path_buf(),
            None => cfg.run_dir().join(subcommand.replace(' ', "-")),
        };
        if dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        log::info!("run directory {}", dir.display());
        Ok(Run {
            dir,
            subcommand: subcommand.to_string(),
            digest: cfg.digest_hex(),
            seed: cfg.seed,
            started: Instant::now(),
            artifacts: Vec::new(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Creates the parent directories of `rel` and returns its full path.
    pub fn prepare(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(p)
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>, deterministic: bool) -> Result<PathBuf> {
        let p = self.prepare(rel)?;
        fs::write(&p, bytes.as_ref()).with_context(|| format!("writing {}", p.display()))?;
        self.record(rel, deterministic)?;
        Ok(p)
    }

    /// Records a file already written under the run directory.
    pub fn record(&mut self, rel: &str, deterministic: bool) -> Result<()> {
        let p = self.path(rel);
        let bytes = fs::read(&p).with_context(|| format!("hashing {}", p.display()))?;
        self.artifacts.push(Artifact {
            path: rel.to_string(),
            sha256: hex(&Sha256::digest(&bytes)),
            deterministic,
        });
        Ok(())
    }

    /// Records every file under `rel_dir`, in path order.
    pub fn record_tree(&mut self, rel_dir: &str, deterministic: bool) -> Result<()> {
        let mut files = Vec::new();
        collect(&self.path(rel_dir), &mut files)?;
        files.sort();
        for f in files {
            let rel = f
                .strip_prefix(&self.dir)
                .expect("walked inside the run directory")
                .to_string_lossy()
                .replace('\\', "/");
            self.record(&rel, deterministic)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            subcommand: self.subcommand.clone(),
            config_digest: self.digest.clone(),
            seed: self.seed,
            run_dir: self.dir.display().to_string(),
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            artifacts: self.artifacts,
        };
        let p = self.dir.join("manifest.json");
        fs::write(&p, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", p.display()))?;
        println!("{}", p.display());
        Ok(p)
    }
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        if p.is_dir() {
            collect(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

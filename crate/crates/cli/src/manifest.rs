use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Written before any long computation starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full command line, replayed by `deoe rerun` from `cwd`.
    pub argv: Vec<String>,
    pub cwd: PathBuf,
    pub version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String], config: impl Serialize, seed: Option<u64>) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            cwd: std::env::current_dir().context("reading the working directory")?,
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: serde_json::to_value(config)?,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(mut self, path: &Path) -> Result<Self> {
        let sha256 = sha256_file(path)?;
        let path = fs::canonicalize(path).with_context(|| format!("resolving {}", path.display()))?;
        self.inputs.push(InputDigest { path, sha256 });
        Ok(self)
    }

    pub fn output(mut self, path: PathBuf) -> Self {
        self.outputs.push(path);
        self
    }

    /// Creates `dir` and writes the manifest into it.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(FILE_NAME);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Fails if any recorded input changed since the run.
    pub fn verify_inputs(&self) -> Result<()> {
        for i in &self.inputs {
            let now = sha256_file(&i.path)?;
            if now != i.sha256 {
                bail!("{} changed since the run (sha256 {} now {})", i.path.display(), i.sha256, now);
            }
        }
        Ok(())
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::error::{Error, Result};

/// Name of the resolved config written into every run directory.
pub const CONFIG_FILE: &str = "config.cfg";
/// Tab-separated `role, path, sha256` of every file a command read.
pub const INPUTS_FILE: &str = "inputs.tsv";

/// Output directory of one command invocation.
#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    inputs: Vec<(String, PathBuf, String)>,
}

impl RunDir {
    /// Creates the directory and records the resolved config and seed.
    pub fn create(config: &RunConfig, command: &str) -> Result<Self> {
        let path = config.out_dir.clone();
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        let mut text = format!("# command: {command}\n");
        text.push_str(&config.to_flat_text());
        let cfg = path.join(CONFIG_FILE);
        fs::write(&cfg, text).map_err(|e| Error::io(&cfg, e))?;
        let seed = path.join("seed");
        fs::write(&seed, format!("{}\n", config.seed)).map_err(|e| Error::io(&seed, e))?;
        Ok(Self { path, inputs: Vec::new() })
    }

    pub fn join(&self, name: impl AsRef<Path>) -> PathBuf {
        self.path.join(name)
    }

    /// Hashes an input file and rewrites the inputs table.
    pub fn record_input(&mut self, role: &str, file: &Path) -> Result<()> {
        let hash = file_hash(file)?;
        self.inputs.push((role.to_string(), file.to_path_buf(), hash));
        let mut text = String::from("role\tpath\tsha256\n");
        for (r, p, h) in &self.inputs {
            text.push_str(&format!("{r}\t{}\t{h}\n", p.display()));
        }
        let out = self.join(INPUTS_FILE);
        fs::write(&out, text).map_err(|e| Error::io(&out, e))
    }
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

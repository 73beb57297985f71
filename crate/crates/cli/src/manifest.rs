use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::Command;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to re-run one invocation: the parsed command (minus its
/// output directory), the resolved config, input digests and the files written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub command: Command,
    pub config: Config,
    pub seeds: Vec<u64>,
    pub inputs: Vec<InputDigest>,
    /// Output file names relative to the output directory.
    pub outputs: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn digest_inputs(paths: &[PathBuf]) -> Result<Vec<InputDigest>> {
    paths
        .iter()
        .map(|p| {
            Ok(InputDigest {
                path: p.clone(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    /// Fails if any recorded input changed since the manifest was written.
    pub fn verify_inputs(&self) -> Result<()> {
        for d in &self.inputs {
            let now = sha256_file(&d.path)?;
            if now != d.sha256 {
                bail!(
                    "input {} changed since the manifest was written (sha256 {} != {})",
                    d.path.display(),
                    now,
                    d.sha256
                );
            }
        }
        Ok(())
    }
}

/// Output directory that records the name of every file written to it.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_trajectory(&mut self, name: &str, traj: &paai_core::Trajectory) -> Result<()> {
        let mut buf = Vec::new();
        traj.write_csv(&mut buf)?;
        self.write_bytes(name, &buf)
    }

    pub fn finish(mut self, mut manifest: RunManifest) -> Result<PathBuf> {
        manifest.outputs = std::mem::take(&mut self.files);
        self.write_json(MANIFEST_FILE, &manifest)?;
        Ok(self.dir.join(MANIFEST_FILE))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        std::fs::write(&p, b"abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn outputs_record_each_name_once() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Outputs::create(&dir.path().join("o")).unwrap();
        out.write_bytes("a.txt", b"1").unwrap();
        out.write_bytes("a.txt", b"2").unwrap();
        out.write_json("b.json", &[1, 2]).unwrap();
        assert_eq!(out.files, ["a.txt", "b.json"]);
        assert_eq!(std::fs::read_to_string(out.dir().join("b.json")).unwrap(), "[\n  1,\n  2\n]\n");
    }
}

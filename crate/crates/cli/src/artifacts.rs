//! Output directory bookkeeping: every file written is hashed so the run
//! manifest can list it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::fail::{Context, Failure};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, Serialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
}

pub struct OutDir {
    root: PathBuf,
    written: Vec<Artifact>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(root).internal(&format!("cannot create {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.root.join(file)
    }

    pub fn write(&mut self, file: &str, bytes: &[u8]) -> Result<(), Failure> {
        let path = self.path(file);
        fs::write(&path, bytes).internal(&format!("cannot write {}", path.display()))?;
        self.record(file, bytes);
        Ok(())
    }

    /// Registers a file that was written by other means.
    pub fn adopt(&mut self, file: &str) -> Result<(), Failure> {
        let path = self.path(file);
        let bytes = fs::read(&path).internal(&format!("cannot read back {}", path.display()))?;
        self.record(file, &bytes);
        Ok(())
    }

    fn record(&mut self, file: &str, bytes: &[u8]) {
        self.written.retain(|a| a.file != file);
        self.written.push(Artifact {
            file: file.to_owned(),
            sha256: sha256_hex(bytes),
        });
    }

    pub fn artifacts(&self) -> Vec<Artifact> {
        let mut a = self.written.clone();
        a.sort_by(|x, y| x.file.cmp(&y.file));
        a
    }

    /// Writes `manifest.json`, which is itself not listed.
    pub fn finish<M: Serialize>(self, manifest: &M) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(manifest).internal("cannot encode manifest")?;
        text.push('\n');
        let path = self.path("manifest.json");
        fs::write(&path, text).internal(&format!("cannot write {}", path.display()))
    }
}

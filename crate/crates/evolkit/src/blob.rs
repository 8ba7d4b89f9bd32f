//! Content-addressed screenshot storage: `<root>/<sha256 hex>.bin`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use evolkit_core::{ContentHash, Screenshot};

use crate::fsutil::write_atomic;

#[derive(Debug, thiserror::Error)]
pub enum BlobError {
    #[error("blob {0}: {1}")]
    Io(PathBuf, #[source] io::Error),
    #[error("blob {path} does not hash to its name")]
    Corrupt { path: PathBuf },
    #[error("blob {0} is empty")]
    Empty(PathBuf),
}

#[derive(Debug, Clone)]
pub struct BlobStore {
    root: PathBuf,
}

impl BlobStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, digest: &ContentHash) -> PathBuf {
        self.root.join(format!("{digest}.bin"))
    }

    /// Stores the screenshot unless an identical blob already exists.
    pub fn put(&self, shot: &Screenshot) -> Result<PathBuf, BlobError> {
        let path = self.path_of(&shot.digest());
        if !path.exists() {
            write_atomic(&path, shot.bytes()).map_err(|e| BlobError::Io(path.clone(), e))?;
        }
        Ok(path)
    }

    pub fn get(&self, digest: &ContentHash) -> Result<Screenshot, BlobError> {
        let path = self.path_of(digest);
        let bytes = fs::read(&path).map_err(|e| BlobError::Io(path.clone(), e))?;
        let shot = Screenshot::new(bytes).map_err(|_| BlobError::Empty(path.clone()))?;
        if shot.digest() != *digest {
            return Err(BlobError::Corrupt { path });
        }
        Ok(shot)
    }
}

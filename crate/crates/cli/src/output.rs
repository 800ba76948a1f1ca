//! Output directories that appear all at once: everything is written into a
//! sibling temp directory that is renamed into place on success.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

pub struct StagedDir {
    staging: PathBuf,
    target: PathBuf,
    files: Vec<String>,
    committed: bool,
}

impl StagedDir {
    pub fn create(target: &Path) -> io::Result<Self> {
        if target.exists() {
            let empty = target.is_dir() && fs::read_dir(target)?.next().is_none();
            if !empty {
                return Err(io::Error::new(
                    io::ErrorKind::AlreadyExists,
                    format!("output directory {} already exists and is not empty", target.display()),
                ));
            }
        }
        let name = target
            .file_name()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "output path has no file name"))?
            .to_string_lossy()
            .into_owned();
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent)?;
        let staging = parent.join(format!(".{name}.tmp-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        Ok(Self {
            staging,
            target: target.to_path_buf(),
            files: Vec::new(),
            committed: false,
        })
    }

    /// Absolute path for `relative` inside the staging area; records it as an
    /// artifact.
    pub fn file(&mut self, relative: &str) -> io::Result<PathBuf> {
        let path = self.staging.join(relative);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.files.push(relative.to_string());
        Ok(path)
    }

    pub fn write(&mut self, relative: &str, bytes: impl AsRef<[u8]>) -> io::Result<()> {
        let path = self.file(relative)?;
        fs::write(path, bytes)
    }

    pub fn artifacts(&self) -> &[String] {
        &self.files
    }

    pub fn commit(mut self) -> io::Result<PathBuf> {
        if self.target.exists() {
            fs::remove_dir(&self.target)?;
        }
        fs::rename(&self.staging, &self.target)?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for StagedDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

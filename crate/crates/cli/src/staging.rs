//! Output written to a scratch directory and moved into place only on success.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use tempfile::TempDir;

pub struct Staging {
    dir: TempDir,
    target: PathBuf,
    files: Vec<PathBuf>,
}

impl Staging {
    /// Scratch directory next to `target`, so the final rename stays on one filesystem.
    pub fn new(target: &Path) -> io::Result<Self> {
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent)?;
        let dir = tempfile::Builder::new().prefix(".levy-codebook-").tempdir_in(&parent)?;
        Ok(Self { dir, target: target.to_path_buf(), files: Vec::new() })
    }

    /// Path of `rel` inside the scratch directory; parent directories are created.
    pub fn file(&mut self, rel: impl AsRef<Path>) -> io::Result<PathBuf> {
        let p = self.dir.path().join(rel.as_ref());
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        self.files.push(rel.as_ref().to_path_buf());
        Ok(p)
    }

    /// Moves everything into the target directory.
    pub fn commit(self) -> io::Result<Vec<PathBuf>> {
        let Staging { dir, target, files } = self;
        if !target.exists() {
            fs::rename(dir.keep(), &target)?;
        } else {
            move_tree(dir.path(), &target)?;
        }
        Ok(files.into_iter().map(|f| target.join(f)).collect())
    }
}

fn move_tree(from: &Path, to: &Path) -> io::Result<()> {
    fs::create_dir_all(to)?;
    for entry in fs::read_dir(from)? {
        let entry = entry?;
        let dest = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            move_tree(&entry.path(), &dest)?;
        } else {
            fs::rename(entry.path(), dest)?;
        }
    }
    Ok(())
}

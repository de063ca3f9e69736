use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Component, Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use crate::Abort;

/// Root of everything a command writes. Paths handed to it are relative
/// and may not climb out.
#[derive(Clone, Debug)]
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)
            .with_context(|| format!("cannot create output directory {}", root.display()))?;
        Ok(OutDir {
            root: root.to_path_buf(),
        })
    }

    pub fn subdir(&self, rel: &str) -> Result<Self> {
        OutDir::create(&self.path(rel)?)
    }

    pub fn path(&self, rel: &str) -> Result<PathBuf> {
        let rel_path = Path::new(rel);
        if !rel_path
            .components()
            .all(|c| matches!(c, Component::Normal(_)))
        {
            bail!("refusing to write '{rel}' outside {}", self.root.display());
        }
        Ok(self.root.join(rel_path))
    }

    /// Opens `rel` for writing, creating parent directories.
    pub fn file(&self, rel: &str) -> Result<BufWriter<File>> {
        let path = self.path(rel)?;
        let open = || -> std::io::Result<File> {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            File::create(&path)
        };
        let file = open().map_err(|e| Abort(format!("cannot write {}: {e}", path.display())))?;
        Ok(BufWriter::new(file))
    }

    pub fn write_with(
        &self,
        rel: &str,
        body: impl FnOnce(&mut BufWriter<File>) -> Result<()>,
    ) -> Result<()> {
        let mut out = self.file(rel)?;
        body(&mut out)?;
        out.flush().map_err(|e| {
            Abort(format!(
                "cannot write {}: {e}",
                self.root.join(rel).display()
            ))
        })?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        self.write_with(rel, |out| {
            serde_json::to_writer_pretty(&mut *out, value)?;
            writeln!(out)?;
            Ok(())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_escaping_paths() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutDir::create(dir.path()).unwrap();
        assert!(out.path("../x.csv").is_err());
        assert!(out.path("/etc/x.csv").is_err());
        assert!(out.path("a/./b.csv").is_ok());
        assert!(out.path("curves/r0_f0.csv").is_ok());
    }

    #[test]
    fn creates_parents() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutDir::create(&dir.path().join("run")).unwrap();
        out.write_json("a/b/c.json", &[1, 2]).unwrap();
        let text = fs::read_to_string(dir.path().join("run/a/b/c.json")).unwrap();
        assert!(text.contains('2'));
    }
}

//! On-disk layout of a data directory and crash-safe file writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::Result;

pub const METASTORE_FILE: &str = "metastore.json";

/// Paths of every artifact under one data directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn metastore(&self) -> PathBuf {
        self.root.join(METASTORE_FILE)
    }

    pub fn batch(&self, dataset_id: &str, batch_id: &str) -> PathBuf {
        self.root.join("level0").join(dataset_id).join(format!("batch-{batch_id}"))
    }

    pub fn level_file(&self, level: u32, dataset_id: &str, refresh_count: u64) -> PathBuf {
        self.root
            .join(format!("level{level}"))
            .join(dataset_id)
            .join(format!("v{refresh_count}.ndjson"))
    }

    pub fn quarantine_file(&self, dataset_id: &str, refresh_count: u64) -> PathBuf {
        self.root.join("quarantine").join(dataset_id).join(format!("v{refresh_count}.ndjson"))
    }

    pub fn cuboid(&self, cube_id: &str, label: &str) -> PathBuf {
        self.root.join("cubes").join(cube_id).join(format!("{label}.ndjson"))
    }
}

/// Writes `bytes` to a sibling temp file, syncs it and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_optional(path: &Path) -> Result<Option<Vec<u8>>> {
    match fs::read(path) {
        Ok(b) => Ok(Some(b)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// A group of file writes that can be undone as a whole. The first write to
/// each path records its prior content (or absence).
#[derive(Debug, Default)]
pub struct FileTxn {
    saved: Vec<(PathBuf, Option<Vec<u8>>)>,
}

impl FileTxn {
    pub fn new() -> Self {
        FileTxn::default()
    }

    fn remember(&mut self, path: &Path) -> Result<()> {
        if !self.saved.iter().any(|(p, _)| p == path) {
            let prior = read_optional(path)?;
            self.saved.push((path.to_path_buf(), prior));
        }
        Ok(())
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        self.remember(path)?;
        write_atomic(path, bytes)
    }

    pub fn remove(&mut self, path: &Path) -> Result<()> {
        self.remember(path)?;
        match fs::remove_file(path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e.into()),
        }
    }

    /// Restores every touched path to its recorded state, newest first.
    pub fn rollback(self) -> Result<()> {
        let mut first_err = None;
        for (path, prior) in self.saved.into_iter().rev() {
            let r = match prior {
                Some(bytes) => write_atomic(&path, &bytes),
                None => match fs::remove_file(&path) {
                    Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
                    _ => Ok(()),
                },
            };
            if let Err(e) = r {
                first_err.get_or_insert(e);
            }
        }
        first_err.map_or(Ok(()), Err)
    }

    pub fn commit(self) {}
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rollback_restores_prior_state() {
        let dir = tempfile::tempdir().unwrap();
        let kept = dir.path().join("a/kept.txt");
        let fresh = dir.path().join("b/fresh.txt");
        write_atomic(&kept, b"before").unwrap();
        let mut txn = FileTxn::new();
        txn.write(&kept, b"after").unwrap();
        txn.write(&kept, b"after again").unwrap();
        txn.write(&fresh, b"new").unwrap();
        assert_eq!(fs::read(&kept).unwrap(), b"after again");
        txn.rollback().unwrap();
        assert_eq!(fs::read(&kept).unwrap(), b"before");
        assert!(!fresh.exists());
    }

    #[test]
    fn layout_paths() {
        let l = Layout::new("/d");
        assert_eq!(l.batch("raw", "b-000001"), PathBuf::from("/d/level0/raw/batch-b-000001"));
        assert_eq!(l.level_file(2, "agg", 4), PathBuf::from("/d/level2/agg/v4.ndjson"));
        assert_eq!(l.cuboid("c", "apex"), PathBuf::from("/d/cubes/c/apex.ndjson"));
    }
}

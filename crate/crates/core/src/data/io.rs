use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Catalog, UserSequence};
use crate::error::{Error, Result};

/// Planted latent state per position of one user, for analysis only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentLabels {
    pub user_id: u64,
    pub latent: Vec<usize>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_lines<T: DeserializeOwned>(
    path: &Path,
    mut check: impl FnMut(&T) -> Result<()>,
) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        check(&record).map_err(|e| e.at_line(i + 1))?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, sequences: &[UserSequence]) -> Result<()> {
    write_lines(path.as_ref(), sequences)
}

/// Reads and validates one sequence per line. `num_items` bounds item ids
/// when known.
pub fn read_jsonl(path: impl AsRef<Path>, num_items: Option<usize>) -> Result<Vec<UserSequence>> {
    read_lines(path.as_ref(), |s: &UserSequence| s.validate(num_items))
}

/// `train.jsonl` -> `train.latent.jsonl`
pub fn latent_path(path: impl AsRef<Path>) -> PathBuf {
    let path = path.as_ref();
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.latent.jsonl"))
}

pub fn write_latent_jsonl(path: impl AsRef<Path>, labels: &[LatentLabels]) -> Result<()> {
    write_lines(path.as_ref(), labels)
}

pub fn read_latent_jsonl(path: impl AsRef<Path>) -> Result<Vec<LatentLabels>> {
    read_lines(path.as_ref(), |_: &LatentLabels| Ok(()))
}

pub fn write_catalog(path: impl AsRef<Path>, catalog: &Catalog) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    serde_json::to_writer(&mut w, catalog)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_catalog(path: impl AsRef<Path>) -> Result<Catalog> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let catalog: Catalog = serde_json::from_str(&text)?;
    catalog.validate()?;
    Ok(catalog)
}

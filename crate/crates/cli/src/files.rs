//! Input readers and atomic writers for the command-line formats.

use std::path::Path;

use anyhow::{bail, Context, Result};
use mosaic::fsutil::write_atomic;
use serde::{Deserialize, Serialize};

/// One `{"id": ..., "text": ...}` line of a queries or collection file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdText {
    pub id: String,
    pub text: String,
}

/// One line of an STS file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StsPair {
    pub sentence1: String,
    pub sentence2: String,
    pub score: f64,
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Non-blank lines of a plain-text corpus.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let lines: Vec<String> = read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if lines.is_empty() {
        bail!("{}: no text lines", path.display());
    }
    Ok(lines)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).with_context(|| format!("{} line {}", path.display(), n + 1))?;
        out.push(rec);
    }
    if out.is_empty() {
        bail!("{}: no records", path.display());
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    write_atomic(path, contents.as_ref()).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

//! File I/O helpers: exact float text, small CSV read/write, JSON, hashing.
//!
//! Numeric text files use 17-significant-digit scientific notation, which
//! round-trips every finite `f64` exactly and makes output files byte-stable
//! across runs.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Format a float with 17 significant digits (round-trip exact).
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        // Rust's float parser accepts these spellings back.
        format!("{x}")
    }
}

/// Parse a float, attaching file context to errors.
pub fn parse_f64(s: &str, path: &Path) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        detail: format!("not a float: {s:?}"),
    })
}

/// Create a directory and any missing parents.
pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(format!("create {}", path.display()), e))
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(format!("serialize {}", path.display()), e))?;
    write_text(path, &(body + "\n"))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let body = read_text(path)?;
    serde_json::from_str(&body).map_err(|e| Error::json(format!("parse {}", path.display()), e))
}

/// Write a CSV file from a header and pre-formatted rows.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_text(path, &out)
}

/// Write a CSV file with a leading `# comment` line. Command outputs use
/// this to stamp the config hash onto every table; the readers below and
/// most CSV tools skip `#` lines.
pub fn write_csv_tagged(
    path: &Path,
    comment: &str,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    let mut out = format!("# {comment}\n");
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_text(path, &out)
}

/// Read a CSV file into its header and string cells. Lines starting with `#`
/// are comments and skipped.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let body = read_text(path)?;
    let mut lines = body.lines().filter(|l| !l.trim_start().starts_with('#'));
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            detail: "empty file".into(),
        })?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
        if row.len() != header.len() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                detail: format!("row has {} fields, header has {}", row.len(), header.len()),
            });
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Read a CSV file whose cells are all floats.
pub fn read_csv_f64(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let (header, raw) = read_csv(path)?;
    let mut rows = Vec::with_capacity(raw.len());
    for row in &raw {
        let mut vals = Vec::with_capacity(row.len());
        for cell in row {
            vals.push(parse_f64(cell, path)?);
        }
        rows.push(vals);
    }
    Ok((header, rows))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    Ok(sha256_hex(&bytes))
}

/// Hash every regular file under a directory, sorted by relative path.
pub fn hash_tree(root: &Path) -> Result<Vec<(String, String)>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> Result<()> {
        let entries =
            fs::read_dir(dir).map_err(|e| Error::io(format!("list {}", dir.display()), e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(format!("list {}", dir.display()), e))?;
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path
                    .strip_prefix(root)
                    .expect("walk stays under root")
                    .display()
                    .to_string();
                out.push((rel, hash_file(&path)?));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort();
    Ok(out)
}

//! JSON-lines persistence of corrective labels.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::CorrectiveLabel;

fn write_labels<W: Write>(labels: &[CorrectiveLabel], w: &mut W) -> std::io::Result<()> {
    for l in labels {
        writeln!(w, "{}", serde_json::to_string(l).expect("label serializes"))?;
    }
    Ok(())
}

pub fn save_labels(labels: &[CorrectiveLabel], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_labels(labels, &mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// SHA-256 of the labels' on-disk form.
pub fn labels_hash(labels: &[CorrectiveLabel]) -> String {
    let mut buf = Vec::new();
    write_labels(labels, &mut buf).expect("writing to memory");
    crate::data::sha256_hex(&buf)
}

pub fn load_labels(path: &Path) -> Result<Vec<CorrectiveLabel>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let label: CorrectiveLabel = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("bad label: {e}"),
        })?;
        out.push(label);
    }
    Ok(out)
}

//! File output helpers: staged writes and CSV summaries.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ccil_core::data::sha256_hex;
use ccil_core::labels::CorrectiveLabel;

use crate::CliError;

pub fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

/// Runs `write` against `<path>.partial` and renames it into place on
/// success. A failed write leaves the `.partial` file behind.
pub fn commit<F>(path: &Path, write: F) -> Result<(), CliError>
where
    F: FnOnce(&Path) -> Result<(), CliError>,
{
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::msg(format!("{}: {e}", parent.display())))?;
    }
    let tmp = partial_path(path);
    write(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::msg(format!("{}: {e}", path.display())))
}

pub fn commit_text(path: &Path, text: &str) -> Result<(), CliError> {
    commit(path, |p| std::fs::write(p, text).map_err(|e| CliError::msg(format!("{}: {e}", p.display()))))
}

pub fn commit_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    commit_text(path, &text)
}

pub fn file_hash(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::msg(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// `<dir>/<stem><suffix>` next to `path`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn histogram(out: &mut String, name: &str, values: &[f64], bins: usize) {
    if values.is_empty() {
        return;
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    for (k, c) in counts.iter().enumerate() {
        let a = lo + k as f64 * width;
        writeln!(out, "{name},{a},{},{c}", a + width).expect("string write");
    }
}

/// 20-bin histograms of anchor distances and bounds.
pub fn labels_histogram_csv(labels: &[CorrectiveLabel]) -> String {
    let mut out = String::from("quantity,bin_lo,bin_hi,count\n");
    let d: Vec<f64> = labels.iter().map(|l| l.anchor_distance).collect();
    let b: Vec<f64> = labels.iter().map(|l| l.bound).collect();
    histogram(&mut out, "anchor_distance", &d, 20);
    histogram(&mut out, "bound", &b, 20);
    out
}

/// Generated and target state coordinates, one label per row.
pub fn labels_scatter_csv(labels: &[CorrectiveLabel]) -> String {
    let d_s = labels.first().map_or(0, |l| l.s_g.dim());
    let mut out = String::from("technique,traj,t");
    for i in 0..d_s {
        write!(out, ",s_g_{i}").expect("string write");
    }
    for i in 0..d_s {
        write!(out, ",s_target_{i}").expect("string write");
    }
    out.push('\n');
    for l in labels {
        write!(out, "{},{},{}", l.technique, l.source.0, l.source.1).expect("string write");
        for v in l.s_g.iter().chain(l.s_target.iter()) {
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failed_write_leaves_partial() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.txt");
        let res = commit(&path, |p| {
            std::fs::write(p, "half").unwrap();
            Err(CliError::msg("boom"))
        });
        assert!(res.is_err());
        assert!(!path.exists());
        assert!(partial_path(&path).exists());
        commit_text(&path, "ok").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "ok");
    }

    #[test]
    fn sibling_names() {
        assert_eq!(sibling(Path::new("out/labels.jsonl"), "_report.json"), PathBuf::from("out/labels_report.json"));
    }
}

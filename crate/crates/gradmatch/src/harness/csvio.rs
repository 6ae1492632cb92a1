//! Deterministic CSV tables and atomic file writes.
//!
//! Floats are rendered with shortest round-trip digits: plain decimal
//! notation in a readable magnitude window, scientific notation outside it.
//! Rendering depends only on the value, so reruns with the same seed produce
//! byte-identical files.

use std::io::Write;
use std::path::Path;

/// Shortest round-trip rendering of an `f64`.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        // Sentinel-free channels should never carry non-finite values, but a
        // stable rendering beats a panic inside a writer.
        return if v.is_nan() {
            "nan".to_string()
        } else if v > 0.0 {
            "inf".to_string()
        } else {
            "-inf".to_string()
        };
    }
    let mag = v.abs();
    if (1e-4..1e16).contains(&mag) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// A header plus pre-rendered rows.
#[derive(Clone, Debug)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        CsvTable {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len(), "row width mismatch");
        self.rows.push(row);
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&join_quoted(&self.header));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&join_quoted(row));
            out.push('\n');
        }
        out
    }
}

fn join_quoted(cells: &[String]) -> String {
    cells
        .iter()
        .map(|c| quote_cell(c))
        .collect::<Vec<_>>()
        .join(",")
}

fn quote_cell(cell: &str) -> String {
    if cell.contains(',') || cell.contains('"') || cell.contains('\n') {
        format!("\"{}\"", cell.replace('"', "\"\""))
    } else {
        cell.to_string()
    }
}

/// Writes bytes atomically: a temp file in the target directory, flushed,
/// then renamed over the destination.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "out".to_string());
    let tmp = dir.join(format!(".tmp-{file_name}"));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_rendering_round_trips() {
        for &v in &[
            0.1,
            1.25,
            -3.5e-7,
            9.999e15,
            1e16,
            4.3e-5,
            f64::MAX,
            0.0,
            123456.789,
        ] {
            let s = fmt_f64(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back, v, "render {v} -> {s}");
        }
    }

    #[test]
    fn quoting() {
        let mut t = CsvTable::new(&["a", "b"]);
        t.push(vec!["x,y".into(), "plain".into()]);
        let s = t.to_csv_string();
        assert_eq!(s, "a,b\n\"x,y\",plain\n");
    }

    #[test]
    fn atomic_write_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_atomic(&path, b"a,b\n1,2\n").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "a,b\n1,2\n");
        // Overwrite is atomic too.
        write_atomic(&path, b"c\n").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "c\n");
    }
}

//! Tables, CSV files, the plot script and the run manifest.

use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;

/// A CSV cell. Numbers are written with 17 significant digits.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Bool(bool),
    Text(String),
}

impl Cell {
    pub fn render(&self) -> String {
        match self {
            Cell::Num(v) => format_num(*v),
            Cell::Int(v) => v.to_string(),
            Cell::Bool(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Num(v) => Some(*v),
            Cell::Int(v) => Some(*v as f64),
            _ => None,
        }
    }
}

/// Round-trip exact decimal form of a double.
pub fn format_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: Vec<String>) -> Self {
        Self { name: name.into(), columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len(), "{}", self.name);
        self.rows.push(row);
    }

    pub fn file_name(&self) -> String {
        format!("{}.csv", self.name)
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render)).expect("in-memory write");
        }
        w.into_inner().expect("in-memory write")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub rows: usize,
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridInfo {
    pub t_start: f64,
    pub t_end: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub mode: String,
    pub seed: u64,
    pub replicates: usize,
    pub n_agents: usize,
    pub grid: GridInfo,
    pub library: String,
    pub version: String,
    pub files: Vec<FileEntry>,
    /// Per-run scalar diagnostics of the mode.
    pub summary: Vec<serde_json::Value>,
}

pub const MANIFEST: &str = "manifest.json";
pub const PLOT: &str = "plot.gp";

/// gnuplot script over the time-series tables: one panel per column, one
/// curve per sweep value.
pub fn plot_script(tables: &[Table], k_values: &[f64]) -> String {
    let mut s = String::from("set datafile separator ','\nset key autotitle columnhead\nset terminal svg size 900,600\nset xlabel 't'\n");
    for t in tables.iter().filter(|t| t.columns.first().map(String::as_str) == Some("t") && t.column("k") == Some(1)) {
        for (j, col) in t.columns.iter().enumerate().skip(2) {
            s.push_str(&format!("\nset output '{}_{}.svg'\nset title '{}: {}'\nplot ", t.name, col, t.name, col));
            let curves: Vec<String> = k_values
                .iter()
                .map(|k| {
                    format!(
                        "'{}' using 1:(abs($2-({}))<1e-12 ? ${} : 1/0) with lines title 'k={}'",
                        t.file_name(),
                        format_num(*k),
                        j + 1,
                        k
                    )
                })
                .collect();
            s.push_str(&curves.join(", \\\n     "));
            s.push('\n');
        }
    }
    s
}

/// Writes the tables and the plot script, then the manifest listing them.
pub fn write_outputs(dir: &Path, tables: &[Table], plot: &str, mut manifest: RunManifest) -> io::Result<RunManifest> {
    fs::create_dir_all(dir)?;
    manifest.files.clear();
    for t in tables {
        fs::write(dir.join(t.file_name()), t.to_csv())?;
        manifest.files.push(FileEntry { name: t.file_name(), rows: t.rows.len(), columns: t.columns.clone() });
    }
    fs::write(dir.join(PLOT), plot)?;
    manifest.files.push(FileEntry { name: PLOT.into(), rows: 0, columns: Vec::new() });
    let text = serde_json::to_string_pretty(&manifest).expect("serializable") + "\n";
    fs::write(dir.join(MANIFEST), text)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, 0.0] {
            assert_eq!(format_num(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(format_num(0.1), "1.0000000000000001e-1");
        assert_eq!(format_num(f64::NAN), "NaN");
    }

    #[test]
    fn csv_has_header_and_rows() {
        let mut t = Table::new("x", vec!["t".into(), "ok".into()]);
        t.push(vec![Cell::Num(0.5), Cell::Bool(true)]);
        assert_eq!(String::from_utf8(t.to_csv()).unwrap(), "t,ok\n5.0000000000000000e-1,true\n");
    }

    #[test]
    fn manifest_lists_what_was_written() {
        let dir = tempfile::tempdir().unwrap();
        let t = Table::new("a", vec!["t".into(), "k".into(), "v".into()]);
        let m = RunManifest {
            config_hash: "h".into(),
            mode: "m".into(),
            seed: 1,
            replicates: 1,
            n_agents: 1,
            grid: GridInfo { t_start: 0.0, t_end: 1.0, steps: 1 },
            library: "l".into(),
            version: "v".into(),
            files: Vec::new(),
            summary: Vec::new(),
        };
        let plot = plot_script(std::slice::from_ref(&t), &[1.0, 2.0]);
        assert!(plot.contains("a.csv") && plot.contains("k=2"));
        let m = write_outputs(dir.path(), &[t], &plot, m).unwrap();
        let mut on_disk: Vec<String> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        on_disk.sort();
        let mut listed: Vec<String> = m.files.iter().map(|f| f.name.clone()).collect();
        listed.push(MANIFEST.into());
        listed.sort();
        assert_eq!(on_disk, listed);
    }
}

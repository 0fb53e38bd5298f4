//! File writers: diagram CSV and PGM heatmaps, tables, JSON records and the
//! run manifest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::Value;

use tfib_core::phasemode::Diagram;

/// Dynamic range of the heatmaps, dB below the peak.
pub const HEATMAP_RANGE_DB: f64 = 60.0;

/// Collects the files written by one run so the manifest can list them.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    written: Vec<OutputEntry>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputEntry {
    pub file: String,
    pub kind: String,
}

impl OutputDir {
    pub fn create(root: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("cannot create output directory {}", root.display()))?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn record(&mut self, name: &str, kind: &str) {
        self.written.push(OutputEntry {
            file: name.to_string(),
            kind: kind.to_string(),
        });
    }

    pub fn entries(&self) -> &[OutputEntry] {
        &self.written
    }

    fn create_file(&mut self, name: &str, kind: &str) -> anyhow::Result<BufWriter<File>> {
        let path = self.path(name);
        let f = File::create(&path).with_context(|| format!("cannot write {}", path.display()))?;
        self.record(name, kind);
        Ok(BufWriter::new(f))
    }

    /// Magnitudes in dB: header row of times (ns), first column of
    /// angles (degrees).
    pub fn diagram_csv(&mut self, name: &str, diagram: &Diagram) -> anyhow::Result<()> {
        let mut w = self.create_file(name, "diagram-csv")?;
        let db = diagram.magnitude_db();
        write!(w, "angle_deg\\time_ns")?;
        for t in diagram.times() {
            write!(w, ",{:.6}", t * 1e9)?;
        }
        writeln!(w)?;
        for (i, a) in diagram.angles().iter().enumerate() {
            write!(w, "{:.6}", a.to_degrees())?;
            for v in db.row(i) {
                write!(w, ",{v:.4}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    /// ASCII PGM, angle down and time across, `[peak - 60 dB, peak]`
    /// mapped linearly onto `[0, 255]`.
    pub fn diagram_pgm(&mut self, name: &str, diagram: &Diagram) -> anyhow::Result<()> {
        let mut w = self.create_file(name, "diagram-pgm")?;
        let px = heatmap_levels(&diagram.magnitude_db());
        let (rows, cols) = px.dim();
        writeln!(w, "P2")?;
        writeln!(w, "# angle rows, time columns, {HEATMAP_RANGE_DB} dB range")?;
        writeln!(w, "{cols} {rows}")?;
        writeln!(w, "255")?;
        for row in px.rows() {
            // PGM lines stay under 70 characters
            for chunk in row.as_slice().expect("standard layout").chunks(16) {
                let line: Vec<String> = chunk.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{}", line.join(" "))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn table_csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> anyhow::Result<()> {
        let mut w = self.create_file(name, "table-csv")?;
        writeln!(w, "{}", header.join(","))?;
        for r in rows {
            writeln!(w, "{}", r.join(","))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn json(&mut self, name: &str, kind: &str, value: &impl Serialize) -> anyhow::Result<()> {
        self.record(name, kind);
        self.json_unrecorded(name, value)
    }

    /// Writes JSON for an entry already passed to [`OutputDir::record`].
    pub fn json_unrecorded(&self, name: &str, value: &impl Serialize) -> anyhow::Result<()> {
        let path = self.path(name);
        let f = File::create(&path).with_context(|| format!("cannot write {}", path.display()))?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }
}

/// Gray levels for a dB map.
pub fn heatmap_levels(db: &ndarray::Array2<f64>) -> ndarray::Array2<u8> {
    let peak = db.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let floor = peak - HEATMAP_RANGE_DB;
    db.mapv(|v| (((v - floor) / HEATMAP_RANGE_DB).clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Resolved inputs of a run. No timestamps, so identical inputs give
/// identical bytes.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub arguments: Value,
    pub config: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
    pub outputs: Vec<OutputEntry>,
}

impl Manifest {
    pub fn new(command: &str, arguments: Value, config: Value, notes: Option<String>) -> Self {
        Manifest {
            tool: "tfib",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            arguments,
            config,
            notes,
            outputs: Vec::new(),
        }
    }
}

pub fn write_manifest(out: &mut OutputDir, mut manifest: Manifest) -> anyhow::Result<()> {
    manifest.outputs = out.entries().to_vec();
    out.json("manifest.json", "manifest", &manifest)
}

//! CSV and JSON artifact writers. All floats go through the fixed
//! 17-significant-digit formatter so artifacts are byte-stable across
//! platforms and runs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use homscope::scene::format_float;

use crate::CliError;

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

pub fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

pub struct CsvWriter {
    out: BufWriter<File>,
    columns: usize,
    pub path: PathBuf,
}

impl CsvWriter {
    pub fn open(path: PathBuf, header: &[&str]) -> Result<Self, CliError> {
        let mut out = create(&path)?;
        writeln!(out, "{}", header.join(","))
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Ok(Self {
            out,
            columns: header.len(),
            path,
        })
    }

    pub fn row(&mut self, cells: &[CsvCell]) -> Result<(), CliError> {
        assert_eq!(cells.len(), self.columns, "row width mismatch");
        let rendered: Vec<String> = cells.iter().map(CsvCell::render).collect();
        writeln!(self.out, "{}", rendered.join(","))
            .map_err(|e| CliError::Data(format!("{}: {e}", self.path.display())))
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.out
            .flush()
            .map_err(|e| CliError::Data(format!("{}: {e}", self.path.display())))
    }
}

pub enum CsvCell {
    Float(f64),
    Int(u64),
}

impl CsvCell {
    fn render(&self) -> String {
        match self {
            CsvCell::Float(x) => format_float(*x),
            CsvCell::Int(n) => n.to_string(),
        }
    }
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("serialize {}: {e}", path.display())))?;
    std::fs::write(path, text.as_bytes())
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

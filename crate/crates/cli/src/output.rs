//! CSV output with a leading `# schema=N` line.
//!
//! The schema number changes whenever columns are added, removed or
//! reordered. Missing values are empty fields.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};

pub const SCHEMA: u32 = 1;

pub struct CsvOut {
    writer: csv::Writer<File>,
    path: String,
}

impl CsvOut {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let shown = path.display().to_string();
        let mut file = File::create(path).with_context(|| format!("creating {shown}"))?;
        writeln!(file, "# schema={SCHEMA}").with_context(|| format!("writing {shown}"))?;
        let mut writer = csv::Writer::from_writer(file);
        writer
            .write_record(header)
            .with_context(|| format!("writing {shown}"))?;
        Ok(Self {
            writer,
            path: shown,
        })
    }

    pub fn row<S: AsRef<[u8]>>(&mut self, fields: &[S]) -> Result<()> {
        self.writer
            .write_record(fields)
            .with_context(|| format!("writing {}", self.path))
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer
            .flush()
            .with_context(|| format!("writing {}", self.path))
    }
}

/// Empty field for `None`.
pub fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

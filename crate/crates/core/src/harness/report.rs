use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::config("format", format!("expected csv or json, got {other:?}"))),
        }
    }
}

/// One named output with both renderings.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub name: String,
    pub csv: String,
    pub json: serde_json::Value,
}

impl Report {
    pub fn new<T: Serialize>(name: &str, value: &T, csv: String) -> Result<Self> {
        Ok(Report {
            name: name.to_string(),
            csv,
            json: serde_json::to_value(value)?,
        })
    }

    pub fn render(&self, format: OutputFormat) -> Result<String> {
        Ok(match format {
            OutputFormat::Csv => self.csv.clone(),
            OutputFormat::Json => serde_json::to_string_pretty(&self.json)? + "\n",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub scenario: String,
    pub reports: Vec<Report>,
}

impl ReportBundle {
    pub fn new(scenario: &str) -> Self {
        ReportBundle {
            scenario: scenario.to_string(),
            reports: Vec::new(),
        }
    }

    pub fn push(&mut self, report: Report) {
        self.reports.push(report);
    }

    pub fn get(&self, name: &str) -> Option<&Report> {
        self.reports.iter().find(|r| r.name == name)
    }

    /// Write `<scenario>_<report>.<ext>` for every report.
    pub fn write(&self, dir: &Path, format: OutputFormat) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::with_capacity(self.reports.len());
        for r in &self.reports {
            let path = dir.join(format!("{}_{}.{}", self.scenario, r.name, format.extension()));
            std::fs::write(&path, r.render(format)?)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Render rows to CSV text with a header.
pub fn csv_text<I, R>(header: &[&str], rows: I) -> Result<String>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Run a `write_csv`-style function into a string.
pub fn capture<F>(f: F) -> Result<String>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

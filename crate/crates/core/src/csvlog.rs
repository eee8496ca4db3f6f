//! Versioned CSV output. Every file starts with a `# <schema> v<version>`
//! comment line followed by the column header.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::Error;

pub struct CsvLog {
    writer: csv::Writer<File>,
}

impl CsvLog {
    /// Creates (or truncates) `path` and writes the schema comment and header.
    pub fn create(path: &Path, schema: &str, version: u32, header: &[&str]) -> Result<Self, Error> {
        let mut file = File::create(path)?;
        writeln!(file, "# {schema} v{version}")?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        writer.write_record(header)?;
        writer.flush()?;
        Ok(Self { writer })
    }

    /// Opens an existing log for appending, after checking its schema line.
    pub fn append(path: &Path, schema: &str, version: u32) -> Result<Self, Error> {
        let first = BufReader::new(File::open(path)?).lines().next().transpose()?.unwrap_or_default();
        let expected = format!("# {schema} v{version}");
        if first != expected {
            return Err(Error::Invalid(format!("{}: expected '{expected}', found '{first}'", path.display())));
        }
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self { writer: csv::WriterBuilder::new().has_headers(false).from_writer(file) })
    }

    pub fn row<S: Serialize>(&mut self, row: &S) -> Result<(), Error> {
        self.writer.serialize(row)?;
        self.writer.flush()?;
        Ok(())
    }
}

/// Reads every row of a versioned CSV file.
pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, Error> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Rewrites `path` keeping the schema line, the header, and only the data
/// rows for which `keep` returns true.
pub fn retain_rows<T, F>(path: &Path, schema: &str, version: u32, header: &[&str], keep: F) -> Result<(), Error>
where
    T: DeserializeOwned + Serialize,
    F: Fn(&T) -> bool,
{
    let rows: Vec<T> = read_rows(path)?;
    let mut log = CsvLog::create(path, schema, version, header)?;
    for r in rows.iter().filter(|r| keep(r)) {
        log.row(r)?;
    }
    Ok(())
}

//! Line-delimited JSON record files.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub struct RecordWriter<W: Write> {
    inner: W,
}

impl RecordWriter<BufWriter<std::fs::File>> {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self::new(BufWriter::new(std::fs::File::create(path)?)))
    }

    pub fn append(path: &Path) -> Result<Self> {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self::new(BufWriter::new(f)))
    }
}

impl<W: Write> RecordWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.inner, record)?;
        self.inner.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

/// Parses every non-empty line; a bad line is reported with its number.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            Error::InvalidConfig(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = RecordWriter::create(path)?;
    for r in records {
        w.write(r)?;
    }
    w.flush()
}

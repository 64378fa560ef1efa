//! JSONL persistence: one record per line behind a versioned header line.
//!
//! The header line is `{"header": {"format": .., "version": .., ...}}`. Readers
//! accept files with or without a header and transparently decompress gzip
//! input; writers gzip when the path ends in `.gz`.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}:{line}: {source}")]
    Json {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{path}: expected format `{expected}`, found `{found}`")]
    WrongFormat {
        path: String,
        expected: String,
        found: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub config: Value,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub meta: Value,
}

impl Header {
    pub fn new(format: &str) -> Self {
        Header {
            format: format.into(),
            version: FORMAT_VERSION,
            config: Value::Null,
            meta: Value::Null,
        }
    }

    pub fn with_config(mut self, config: Value) -> Self {
        self.config = config;
        self
    }

    pub fn with_meta(mut self, meta: Value) -> Self {
        self.meta = meta;
        self
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: Header,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> JsonlError + '_ {
    move |source| JsonlError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Opens a file for reading, unwrapping gzip when the magic bytes say so.
pub fn open_reader(path: &Path) -> Result<Box<dyn BufRead>, JsonlError> {
    let mut file = File::open(path).map_err(io_err(path))?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic).map_err(io_err(path))?;
    let file = File::open(path).map_err(io_err(path))?;
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(BufReader::new(GzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

/// Serializes the header and the items, one JSON document per line.
pub fn to_jsonl_string<T: Serialize>(header: Option<&Header>, items: &[T]) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&serde_json::to_string(&HeaderLine { header: h.clone() }).expect("header serializes"));
        out.push('\n');
    }
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, header: Option<&Header>, items: &[T]) -> Result<(), JsonlError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let body = to_jsonl_string(header, items);
    let file = File::create(path).map_err(io_err(path))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        enc.write_all(body.as_bytes()).map_err(io_err(path))?;
        enc.finish().map_err(io_err(path))?.flush().map_err(io_err(path))?;
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(body.as_bytes()).map_err(io_err(path))?;
        w.flush().map_err(io_err(path))?;
    }
    Ok(())
}

/// Line-at-a-time writer for outputs too large to hold in memory.
pub struct JsonlWriter {
    path: String,
    inner: Box<dyn Write>,
    lines: usize,
}

impl JsonlWriter {
    pub fn create(path: &Path, header: Option<&Header>) -> Result<Self, JsonlError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io_err(path))?;
        }
        let file = BufWriter::new(File::create(path).map_err(io_err(path))?);
        let inner: Box<dyn Write> = if path.extension().is_some_and(|e| e == "gz") {
            Box::new(GzEncoder::new(file, Compression::default()))
        } else {
            Box::new(file)
        };
        let mut w = JsonlWriter {
            path: path.display().to_string(),
            inner,
            lines: 0,
        };
        if let Some(h) = header {
            w.write_line(&HeaderLine { header: h.clone() })?;
            w.lines = 0;
        }
        Ok(w)
    }

    fn write_line<T: Serialize>(&mut self, item: &T) -> Result<(), JsonlError> {
        let mut line = serde_json::to_string(item).expect("record serializes");
        line.push('\n');
        let path = self.path.clone();
        self.inner
            .write_all(line.as_bytes())
            .map_err(|source| JsonlError::Io { path, source })?;
        self.lines += 1;
        Ok(())
    }

    pub fn write<T: Serialize>(&mut self, item: &T) -> Result<(), JsonlError> {
        self.write_line(item)
    }

    /// Records written so far, header excluded.
    pub fn lines(&self) -> usize {
        self.lines
    }

    /// Flushes buffers (and finishes the gzip stream when compressing).
    pub fn finish(mut self) -> Result<usize, JsonlError> {
        let path = self.path.clone();
        self.inner.flush().map_err(|source| JsonlError::Io { path, source })?;
        Ok(self.lines)
    }
}

/// Reads raw JSON lines, returning the header (if any) separately. Blank lines are skipped.
pub fn read_values(path: &Path) -> Result<(Option<Header>, Vec<Value>), JsonlError> {
    let reader = open_reader(path)?;
    let mut header = None;
    let mut values = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|source| JsonlError::Json {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?;
        if i == 0 && header.is_none() {
            if let Some(h) = v.as_object().filter(|o| o.len() == 1).and_then(|o| o.get("header")) {
                if let Ok(h) = serde_json::from_value::<Header>(h.clone()) {
                    header = Some(h);
                    continue;
                }
            }
        }
        values.push(v);
    }
    Ok((header, values))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Option<Header>, Vec<T>), JsonlError> {
    let (header, values) = read_values(path)?;
    let offset = usize::from(header.is_some());
    let items = values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            serde_json::from_value(v).map_err(|source| JsonlError::Json {
                path: path.display().to_string(),
                line: i + 1 + offset,
                source,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok((header, items))
}

/// Like [`read_jsonl`] but rejects a header whose format differs from `expected`.
pub fn read_jsonl_format<T: DeserializeOwned>(path: &Path, expected: &str) -> Result<(Option<Header>, Vec<T>), JsonlError> {
    let (header, items) = read_jsonl(path)?;
    if let Some(h) = &header {
        if h.format != expected {
            return Err(JsonlError::WrongFormat {
                path: path.display().to_string(),
                expected: expected.into(),
                found: h.format.clone(),
            });
        }
    }
    Ok((header, items))
}

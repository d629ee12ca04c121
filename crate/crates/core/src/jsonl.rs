//! Line-delimited JSON files with a versioned header record.
//!
//! The first line of every file is `{"schema_version":N,"kind":"..."}`;
//! each following line is one record.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    kind: String,
}

pub fn write<T: Serialize>(path: &Path, kind: &str, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = Header {
        schema_version: SCHEMA_VERSION,
        kind: kind.to_string(),
    };
    write_line(&mut out, path, &header)?;
    for r in records {
        write_line(&mut out, path, r)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn write_line<W: Write, T: Serialize>(out: &mut W, path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, value).map_err(|e| Error::Parse {
        path: path.into(),
        line: 0,
        message: e.to_string(),
    })?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))
}

pub fn read<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.into(),
        line,
        message,
    };
    let first = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(parse_err(1, "missing header record".into())),
    };
    let header: Header =
        serde_json::from_str(&first).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            path: path.into(),
            found: header.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    if header.kind != kind {
        return Err(parse_err(
            1,
            format!("expected a '{kind}' file, found '{}'", header.kind),
        ));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e.to_string()))?;
        records.push(rec);
    }
    Ok(records)
}

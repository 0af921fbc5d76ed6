//! Versioned JSONL input/output.
//!
//! Every emitted record carries a top-level `"schema": "uq/v1"` field.
//! On input the field is optional, but a mismatching version is rejected
//! with the offending line number.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Result, UqError};

pub const SCHEMA_VERSION: &str = "uq/v1";

/// Serialize one record as a JSONL line with the schema tag injected.
/// Keys serialize in sorted order, so output is byte-deterministic.
pub fn write_jsonl_line<T: Serialize>(mut writer: impl Write, record: &T) -> Result<()> {
    let mut value = serde_json::to_value(record)?;
    if let serde_json::Value::Object(map) = &mut value {
        map.insert("schema".into(), serde_json::Value::String(SCHEMA_VERSION.into()));
    }
    serde_json::to_writer(&mut writer, &value)?;
    writer.write_all(b"\n")?;
    Ok(())
}

/// Parse one JSONL line, validating the schema tag when present.
pub fn parse_jsonl_line<T: DeserializeOwned>(line: &str, line_number: usize) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| {
        UqError::InvalidInput(format!("line {line_number}: invalid JSON: {e}"))
    })?;
    if let Some(schema) = value.get("schema").and_then(|s| s.as_str()) {
        if schema != SCHEMA_VERSION {
            return Err(UqError::InvalidInput(format!(
                "line {line_number}: schema {schema:?}, expected {SCHEMA_VERSION:?}"
            )));
        }
    }
    serde_json::from_value(value)
        .map_err(|e| UqError::InvalidInput(format!("line {line_number}: {e}")))
}

/// Read a whole JSONL stream; blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(reader: impl BufRead) -> Result<Vec<T>> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_jsonl_line(&line, i + 1)?);
    }
    Ok(records)
}

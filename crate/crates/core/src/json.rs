//! Canonical JSON: object keys sorted, shortest round-trip float text.
//!
//! Every artifact the crate writes (manifests, reports, detections,
//! checkpoint headers) goes through here so that equal values always
//! serialize to equal bytes.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::Result;

/// Compact canonical text.
pub fn to_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    // Going through `Value` sorts keys: its map type is ordered.
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

/// Indented canonical text with a trailing newline, for files people read.
pub fn to_string_pretty<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

pub fn write<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    std::fs::write(path, to_string_pretty(value)?)?;
    Ok(())
}

pub fn read<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

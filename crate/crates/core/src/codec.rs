//! Little-endian f32 payloads, base64 encoded, shared by the binary file
//! formats, plus JSON-lines helpers for the record formats.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use crate::error::{Error, Result};

pub fn encode_f32(values: impl IntoIterator<Item = f64>) -> String {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    STANDARD.encode(bytes)
}

/// Decodes `expected` floats; `offset` is the byte position of the payload in the file.
pub fn decode_f32(payload: &[u8], expected: usize, offset: usize) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(payload)
        .map_err(|e| Error::parse(offset, format!("invalid base64 payload: {e}")))?;
    let want = expected
        .checked_mul(4)
        .ok_or_else(|| Error::parse(offset, "payload length overflows"))?;
    if bytes.len() != want {
        return Err(Error::parse(
            offset,
            format!("payload holds {} bytes, expected {want}", bytes.len()),
        ));
    }
    let out: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::parse(offset, format!("non-finite value at element {i}")));
    }
    Ok(out)
}

/// Splits a `header\npayload` document at the first newline.
pub fn split_header(bytes: &[u8]) -> Result<(&[u8], &[u8], usize)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(bytes.len(), "missing newline after JSON header"))?;
    let mut payload = &bytes[nl + 1..];
    while let [rest @ .., b'\n' | b'\r'] = payload {
        payload = rest;
    }
    Ok((&bytes[..nl], payload, nl + 1))
}

/// Parses a JSON header, reporting failures at their byte offset.
pub fn parse_header<T: serde::de::DeserializeOwned>(header: &[u8]) -> Result<T> {
    serde_json::from_slice(header).map_err(|e| Error::from_json(&e, header))
}

/// One JSON object per line, each checked before it is written.
pub fn encode_jsonl<T: serde::Serialize>(items: &[T], check: impl Fn(&T) -> Result<()>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        check(item)?;
        serde_json::to_writer(&mut out, item).map_err(|e| Error::invalid(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Parses JSON lines, skipping blank ones. Errors carry the byte offset into `bytes`.
pub fn decode_jsonl<T: serde::de::DeserializeOwned>(bytes: &[u8], check: impl Fn(&T) -> Result<()>) -> Result<Vec<T>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in bytes.split(|&b| b == b'\n') {
        if !line.iter().all(u8::is_ascii_whitespace) {
            let item: T = serde_json::from_slice(line).map_err(|e| match Error::from_json(&e, line) {
                Error::Parse { offset: o, message } => Error::parse(offset + o, message),
                other => other,
            })?;
            check(&item).map_err(|e| Error::parse(offset, e.to_string()))?;
            out.push(item);
        }
        offset += line.len() + 1;
    }
    Ok(out)
}

//! Shared container layout: a UTF-8 `key=value` header, a `---` line, then
//! a binary little-endian payload.

use std::fmt::Write as _;
use std::path::Path;

use pincer_core::Error as CoreError;

use crate::error::{Context, Result};

const SEPARATOR: &[u8] = b"---\n";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

fn format_err(msg: impl Into<String>) -> CoreError {
    CoreError::Format(msg.into())
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries.iter().filter(move |(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> pincer_core::Result<&str> {
        self.get(key).ok_or_else(|| format_err(format!("manifest is missing `{key}`")))
    }

    pub fn parse_key<T: std::str::FromStr>(&self, key: &str) -> pincer_core::Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| format_err(format!("manifest key `{key}` has invalid value `{raw}`")))
    }

    /// Checks `format` and `version` against the expected values.
    pub fn expect_kind(&self, format: &str, version: u32) -> pincer_core::Result<()> {
        let found = self.require("format")?;
        if found != format {
            return Err(format_err(format!("expected a {format} file, found format `{found}`")));
        }
        let v: u32 = self.parse_key("version")?;
        if v != version {
            return Err(format_err(format!(
                "{format} version {v} is not supported (this build reads version {version})"
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn encode(&self, payload: &[u8]) -> Vec<u8> {
        let mut out = self.to_text().into_bytes();
        out.extend_from_slice(SEPARATOR);
        out.extend_from_slice(payload);
        out
    }

    /// Splits `bytes` into the header and the payload slice.
    pub fn decode(bytes: &[u8]) -> pincer_core::Result<(Self, &[u8])> {
        let mut start = 0;
        let mut entries = Vec::new();
        loop {
            let rest = &bytes[start..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| format_err("manifest is not terminated by a `---` line"))?;
            let line = &rest[..end];
            start += end + 1;
            if line == b"---" {
                return Ok((Self { entries }, &bytes[start..]));
            }
            let line = std::str::from_utf8(line).map_err(|_| format_err("manifest is not valid UTF-8"))?;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format_err(format!("manifest line `{line}` is not key=value")))?;
            entries.push((k.to_string(), v.to_string()));
        }
    }
}

pub fn f32_payload(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f64_payload(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Reads exactly `n` little-endian f32 values; fails on a short or long payload.
pub fn read_f32s(payload: &[u8], n: usize) -> pincer_core::Result<Vec<f32>> {
    check_len(payload, n * 4)?;
    Ok(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn read_f64s(payload: &[u8]) -> Vec<f64> {
    payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
}

pub fn check_len(payload: &[u8], expected: usize) -> pincer_core::Result<()> {
    if payload.len() != expected {
        let what = if payload.len() < expected { "truncated" } else { "oversized" };
        return Err(format_err(format!(
            "{what} payload: {} bytes, expected {expected}",
            payload.len()
        )));
    }
    Ok(())
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).at(&tmp)?;
    std::fs::rename(&tmp, path).at(path)
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).at(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trip() {
        let mut m = Manifest::new();
        m.push("format", "x").push("version", 1).push("row", "a 1").push("row", "b 2");
        let bytes = m.encode(&[1, 2, 3]);
        let (back, payload) = Manifest::decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(payload, &[1, 2, 3]);
        assert_eq!(back.all("row").collect::<Vec<_>>(), ["a 1", "b 2"]);
        assert!(back.expect_kind("x", 1).is_ok());
        assert!(matches!(back.expect_kind("x", 2), Err(CoreError::Format(_))));
    }

    #[test]
    fn unterminated_header_is_format_error() {
        assert!(matches!(Manifest::decode(b"a=1\nb=2\n"), Err(CoreError::Format(_))));
        assert!(matches!(Manifest::decode(b"nonsense\n---\n"), Err(CoreError::Format(_))));
    }

    #[test]
    fn payload_length_checked() {
        assert!(read_f32s(&[0; 8], 2).is_ok());
        assert!(matches!(read_f32s(&[0; 7], 2), Err(CoreError::Format(m)) if m.contains("truncated")));
    }
}

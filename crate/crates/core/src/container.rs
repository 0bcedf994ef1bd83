//! Two-part artifact files: a TOML manifest followed by a little-endian f64
//! payload.
//!
//! ```text
//! GRASPLAB\n
//! manifest_bytes=<n>\n
//! <n bytes of TOML>
//! <payload>
//! ```
//!
//! The manifest lists every tensor with its byte offset into the payload, so
//! a reader can validate the layout before touching the numbers. Writing is
//! deterministic: the same container always produces the same bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const MAGIC: &[u8] = b"GRASPLAB\n";
const LEN_PREFIX: &[u8] = b"manifest_bytes=";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    kind: String,
    fingerprint: String,
    payload_bytes: u64,
    meta: toml::Table,
    #[serde(rename = "tensor", default)]
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub fingerprint: String,
    pub meta: toml::Table,
    pub tensors: Vec<(String, Matrix)>,
}

impl Container {
    pub fn new(kind: &str, fingerprint: &str) -> Self {
        Container {
            kind: kind.to_string(),
            fingerprint: fingerprint.to_string(),
            meta: toml::Table::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.tensors.push((name.into(), m));
    }

    pub fn tensor(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("missing tensor `{name}`"),
            })
    }

    pub fn has_tensor(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, m) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
                offset,
            });
            offset += 8 * m.as_slice().len() as u64;
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            fingerprint: self.fingerprint.clone(),
            payload_bytes: offset,
            meta: self.meta.clone(),
            tensors: entries,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::with_capacity(64 + text.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(LEN_PREFIX);
        out.extend_from_slice(format!("{}\n", text.len()).as_bytes());
        out.extend_from_slice(text.as_bytes());
        for (_, m) in &self.tensors {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, message: String| Error::Format {
            offset: offset as u64,
            message,
        };
        if !bytes.starts_with(MAGIC) {
            let at = bytes.iter().zip(MAGIC).position(|(a, b)| a != b).unwrap_or(bytes.len());
            return Err(fail(at, "not a GRASPLAB file (bad magic)".into()));
        }
        let mut pos = MAGIC.len();
        if !bytes[pos..].starts_with(LEN_PREFIX) {
            return Err(fail(pos, "expected `manifest_bytes=` header".into()));
        }
        pos += LEN_PREFIX.len();
        let line_end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|k| pos + k)
            .ok_or_else(|| fail(pos, "unterminated manifest length".into()))?;
        let len: usize = std::str::from_utf8(&bytes[pos..line_end])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail(pos, "manifest length is not an integer".into()))?;
        let start = line_end + 1;
        let end = start
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fail(start, format!("manifest of {len} bytes runs past end of file")))?;
        let text = std::str::from_utf8(&bytes[start..end])
            .map_err(|e| fail(start + e.valid_up_to(), "manifest is not UTF-8".into()))?;
        let manifest: Manifest = toml::from_str(text).map_err(|e| {
            let at = start + e.span().map(|s| s.start).unwrap_or(0);
            fail(at, format!("manifest: {}", e.message()))
        })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(fail(
                start,
                format!("unsupported format version {}", manifest.format_version),
            ));
        }
        let payload = &bytes[end..];
        if payload.len() as u64 != manifest.payload_bytes {
            return Err(fail(
                end,
                format!(
                    "payload is {} bytes, manifest says {}",
                    payload.len(),
                    manifest.payload_bytes
                ),
            ));
        }
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for t in &manifest.tensors {
            if t.offset != expected {
                return Err(fail(
                    end + t.offset as usize,
                    format!(
                        "tensor `{}` at offset {} but previous data ends at {expected}",
                        t.name, t.offset
                    ),
                ));
            }
            let count = t.rows.checked_mul(t.cols).filter(|&c| c > 0).ok_or_else(|| {
                fail(
                    start,
                    format!("tensor `{}` has invalid shape {}x{}", t.name, t.rows, t.cols),
                )
            })?;
            let stop = t.offset + 8 * count as u64;
            if stop > manifest.payload_bytes {
                return Err(fail(
                    end + t.offset as usize,
                    format!("tensor `{}` runs past the payload", t.name),
                ));
            }
            let raw = &payload[t.offset as usize..stop as usize];
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if let Some(k) = data.iter().position(|v| !v.is_finite()) {
                return Err(fail(
                    end + t.offset as usize + 8 * k,
                    format!("non-finite value in tensor `{}`", t.name),
                ));
            }
            tensors.push((t.name.clone(), Matrix::new(t.rows, t.cols, data)?));
            expected = stop;
        }
        if expected != manifest.payload_bytes {
            return Err(fail(end + expected as usize, "trailing bytes after last tensor".into()));
        }
        Ok(Container {
            kind: manifest.kind,
            fingerprint: manifest.fingerprint,
            meta: manifest.meta,
            tensors,
        })
    }

    /// Refuses to replace an existing file unless `force` is set.
    pub fn write(&self, path: &Path, force: bool) -> Result<()> {
        write_bytes(path, &self.to_bytes()?, force)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::from_bytes(&bytes)
    }
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8], force: bool) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file = if force {
        fs::File::create(path)
    } else {
        fs::OpenOptions::new().write(true).create_new(true).open(path)
    }
    .map_err(|e| Error::io(path, e))?;
    file.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("checkpoint", "0123456789abcdef");
        c.meta.insert("stage".into(), toml::Value::String("naive".into()));
        c.meta.insert("scale".into(), toml::Value::Float(0.1 + 0.2));
        c.push(
            "a",
            Matrix::from_rows(&[vec![1.0, -0.0], vec![f64::MIN_POSITIVE, 1e300]]).unwrap(),
        );
        c.push("b", Matrix::new(1, 3, vec![0.1, 0.2, 0.3]).unwrap());
        c
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.kind, "checkpoint");
        let a = back.tensor("a").unwrap();
        assert_eq!(a[(0, 1)].to_bits(), (-0.0f64).to_bits());
        assert_eq!(
            back.meta["scale"].as_float().unwrap().to_bits(),
            (0.1f64 + 0.2).to_bits()
        );
    }

    #[test]
    fn errors_carry_byte_offsets() {
        let bytes = sample().to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[3] = b'X';
        match Container::from_bytes(&bad) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 3),
            other => panic!("{other:?}"),
        }

        // truncated payload
        match Container::from_bytes(&bytes[..bytes.len() - 4]) {
            Err(Error::Format { message, .. }) => assert!(message.contains("payload")),
            other => panic!("{other:?}"),
        }

        // corrupt a manifest byte into invalid TOML
        let text_start = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
        let text_start = text_start + bytes[text_start..].iter().position(|&b| b == b'\n').unwrap() + 1;
        let mut bad = bytes.clone();
        bad[text_start] = b'=';
        match Container::from_bytes(&bad) {
            Err(Error::Format { offset, .. }) => assert!(offset as usize >= text_start),
            other => panic!("{other:?}"),
        }

        assert!(matches!(
            Container::from_bytes(b""),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn write_refuses_overwrite_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.grasp");
        sample().write(&path, false).unwrap();
        assert!(matches!(sample().write(&path, false), Err(Error::Io { .. })));
        sample().write(&path, true).unwrap();
        assert_eq!(Container::read(&path).unwrap(), sample());
    }

    #[test]
    fn missing_tensor_is_reported() {
        assert!(sample().tensor("zzz").is_err());
        assert!(sample().has_tensor("b"));
    }
}

//! `OCLW1` flat-binary tensor container.
//!
//! Layout:
//!
//! ```text
//! OCLW1\n
//! count <n>\n
//! <name> <d0>x<d1>x... <byte offset into payload>\n   (n lines)
//! data\n
//! <payload: little-endian f64 values>
//! ```
//!
//! A rank-0 tensor writes its shape as `-`. Offsets must be multiples of 8
//! and every tensor must lie inside the payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

pub const MAGIC: &str = "OCLW1";

#[derive(Clone, Debug, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

/// Named tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightFile {
    tensors: Vec<(String, Tensor)>,
}

impl WeightFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if let Some(slot) = self.tensors.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = t;
        } else {
            self.tensors.push((name, t));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Header table as it would be written.
    pub fn entries(&self) -> Vec<WeightEntry> {
        let mut offset = 0u64;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let e = WeightEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 8 * t.len() as u64;
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{MAGIC}\ncount {}\n", self.tensors.len()).into_bytes();
        for e in self.entries() {
            out.extend_from_slice(
                format!("{} {} {}\n", e.name, format_shape(&e.shape), e.offset).as_bytes(),
            );
        }
        out.extend_from_slice(b"data\n");
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (entries, payload_start) = parse_header(bytes)?;
        let payload = &bytes[payload_start..];
        let mut wf = WeightFile::new();
        for e in entries {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > payload.len() {
                return Err(fmt_err(
                    (payload_start + start) as u64,
                    format!(
                        "tensor `{}` needs {} bytes, payload has {}",
                        e.name,
                        8 * n,
                        payload.len().saturating_sub(start)
                    ),
                ));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|err| {
                fmt_err((payload_start + start) as u64, format!("tensor `{}`: {err}", e.name))
            })?;
            wf.insert(e.name, t);
        }
        Ok(wf)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Reads only the header table; used by `inspect-weights`.
pub fn read_header(bytes: &[u8]) -> Result<Vec<WeightEntry>> {
    let (entries, payload_start) = parse_header(bytes)?;
    let payload_len = (bytes.len() - payload_start) as u64;
    for e in &entries {
        let end = e.offset + 8 * e.shape.iter().product::<usize>() as u64;
        if end > payload_len {
            return Err(fmt_err(
                payload_start as u64 + e.offset,
                format!("tensor `{}` extends past end of payload", e.name),
            ));
        }
    }
    Ok(entries)
}

pub fn format_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".to_string()
    } else {
        shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x")
    }
}

fn fmt_err(offset: u64, msg: String) -> Error {
    Error::Format {
        what: "weight file".into(),
        offset,
        msg,
    }
}

fn parse_header(bytes: &[u8]) -> Result<(Vec<WeightEntry>, usize)> {
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let rel = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fmt_err(start as u64, "unterminated header line".into()))?;
        let line = std::str::from_utf8(&bytes[start..start + rel])
            .map_err(|_| fmt_err(start as u64, "header is not UTF-8".into()))?
            .to_string();
        *pos = start + rel + 1;
        Ok((start, line))
    };

    let (at, magic) = next_line(&mut pos)?;
    if magic != MAGIC {
        return Err(fmt_err(at as u64, format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let (at, count_line) = next_line(&mut pos)?;
    let count: usize = count_line
        .strip_prefix("count ")
        .and_then(|c| c.trim().parse().ok())
        .ok_or_else(|| fmt_err(at as u64, format!("expected `count <n>`, got {count_line:?}")))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let (at, line) = next_line(&mut pos)?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [name, shape, offset] = parts.as_slice() else {
            return Err(fmt_err(at as u64, format!("malformed entry {line:?}")));
        };
        let shape: Vec<usize> = if *shape == "-" {
            Vec::new()
        } else {
            shape
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| fmt_err(at as u64, format!("bad shape {shape:?}")))?
        };
        let offset: u64 = offset
            .parse()
            .map_err(|_| fmt_err(at as u64, format!("bad offset {offset:?}")))?;
        if !offset.is_multiple_of(8) {
            return Err(fmt_err(at as u64, format!("offset {offset} not 8-byte aligned")));
        }
        entries.push(WeightEntry {
            name: name.to_string(),
            shape,
            offset,
        });
    }
    let (at, data) = next_line(&mut pos)?;
    if data != "data" {
        return Err(fmt_err(at as u64, format!("expected `data`, got {data:?}")));
    }
    Ok((entries, pos))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> WeightFile {
        let mut wf = WeightFile::new();
        wf.insert("a", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        wf.insert("b", Tensor::vector(vec![-0.5, 0.25, 8.0]).unwrap());
        wf
    }

    #[test]
    fn header_lists_both_tensors() {
        let bytes = fixture().to_bytes();
        let entries = read_header(&bytes).unwrap();
        assert_eq!(
            entries,
            vec![
                WeightEntry { name: "a".into(), shape: vec![2, 2], offset: 0 },
                WeightEntry { name: "b".into(), shape: vec![3], offset: 32 },
            ]
        );
        let text = String::from_utf8_lossy(&bytes[..30]);
        assert!(text.starts_with("OCLW1\ncount 2\na 2x2 0\nb 3 32\n"));
    }

    #[test]
    fn roundtrip() {
        let wf = fixture();
        assert_eq!(WeightFile::from_bytes(&wf.to_bytes()).unwrap(), wf);
    }

    #[test]
    fn corrupt_magic() {
        let mut bytes = fixture().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            WeightFile::from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = fixture().to_bytes();
        let cut = &bytes[..bytes.len() - 8];
        match read_header(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("{other:?}"),
        }
        assert!(WeightFile::from_bytes(cut).is_err());
    }
}

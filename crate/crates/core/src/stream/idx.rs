use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

/// Unsigned-byte IDX array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

const UBYTE: u8 = 0x08;

fn fmt_err(what: &str, offset: u64, msg: String) -> Error {
    Error::Format {
        what: what.to_string(),
        offset,
        msg,
    }
}

impl IdxArray {
    /// Header: two zero bytes, type code `0x08`, rank; then `rank` big-endian
    /// `u32` extents; then the payload.
    pub fn parse(bytes: &[u8], what: &str) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(fmt_err(what, bytes.len() as u64, "truncated magic".into()));
        }
        if bytes[0] != 0 || bytes[1] != 0 {
            return Err(fmt_err(what, 0, format!("bad magic {:02x?}", &bytes[..4])));
        }
        if bytes[2] != UBYTE {
            return Err(fmt_err(
                what,
                2,
                format!("unsupported element type 0x{:02x}, only 0x08 (u8)", bytes[2]),
            ));
        }
        let rank = bytes[3] as usize;
        if rank == 0 {
            return Err(fmt_err(what, 3, "rank 0".into()));
        }
        let header = 4 + 4 * rank;
        if bytes.len() < header {
            return Err(fmt_err(
                what,
                bytes.len() as u64,
                format!("truncated dims: rank {rank} needs {header} header bytes"),
            ));
        }
        let dims: Vec<usize> = bytes[4..header]
            .chunks_exact(4)
            .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let expected = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| fmt_err(what, 4, "dimension product overflows".into()))?;
        let payload = bytes.len() - header;
        if payload != expected {
            return Err(fmt_err(
                what,
                header as u64,
                format!("dims {dims:?} need {expected} payload bytes, found {payload}"),
            ));
        }
        Ok(Self {
            dims,
            data: bytes[header..].to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0, 0, UBYTE, self.dims.len() as u8];
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }
}

fn read(path: &Path) -> Result<IdxArray> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    IdxArray::parse(&bytes, &path.display().to_string())
}

pub fn idx_load_images(path: &Path) -> Result<IdxArray> {
    read(path)
}

pub fn idx_load_labels(path: &Path) -> Result<IdxArray> {
    let a = read(path)?;
    if a.dims.len() != 1 {
        return Err(fmt_err(
            &path.display().to_string(),
            3,
            format!("label file must have rank 1, got {:?}", a.dims),
        ));
    }
    Ok(a)
}

/// Images flattened per sample and scaled to `[0, 1]`. The class count is
/// `classes` if given, otherwise one past the largest label.
pub fn idx_load(images: &Path, labels: &Path, classes: Option<usize>) -> Result<Dataset> {
    let img = idx_load_images(images)?;
    let lab = idx_load_labels(labels)?;
    dataset_from_idx(&img, &lab, classes)
}

pub(crate) fn dataset_from_idx(img: &IdxArray, lab: &IdxArray, classes: Option<usize>) -> Result<Dataset> {
    let n = img.dims[0];
    if lab.dims[0] != n {
        return Err(Error::dim(
            "idx_load",
            format!("{n} images vs {} labels", lab.dims[0]),
        ));
    }
    let f: usize = img.dims[1..].iter().product();
    let labels: Vec<usize> = lab.data.iter().map(|&b| b as usize).collect();
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let data = img.data.iter().map(|&b| b as f64 / 255.0).collect();
    Dataset::new(Tensor::from_parts(vec![n, f], data), labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        b.extend_from_slice(&[0, 255, 51, 102, 10, 20, 30, 40]);
        b
    }

    #[test]
    fn two_sample_fixture_round_trips() {
        let img = IdxArray::parse(&fixture(), "img").unwrap();
        assert_eq!(img.dims, vec![2, 2, 2]);
        assert_eq!(img.to_bytes(), fixture());
        let lab = IdxArray::parse(&[0, 0, 8, 1, 0, 0, 0, 2, 1, 0], "lab").unwrap();
        let d = dataset_from_idx(&img, &lab, None).unwrap();
        assert_eq!(d.classes, 2);
        assert_eq!(d.labels, vec![1, 0]);
        assert_eq!(d.inputs.row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(d.inputs.row(1)[0], 10.0 / 255.0);
    }

    #[test]
    fn wrong_magic() {
        let mut b = fixture();
        b[1] = 7;
        assert!(matches!(
            IdxArray::parse(&b, "x"),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn payload_mismatch_reports_header_end() {
        let mut b = fixture();
        b.pop();
        assert!(matches!(
            IdxArray::parse(&b, "x"),
            Err(Error::Format { offset: 16, .. })
        ));
        assert!(IdxArray::parse(&b[..10], "x").is_err());
    }

    #[test]
    fn loads_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        std::fs::write(&ip, fixture()).unwrap();
        std::fs::write(&lp, [0, 0, 8, 1, 0, 0, 0, 2, 3, 0]).unwrap();
        let d = idx_load(&ip, &lp, Some(10)).unwrap();
        assert_eq!((d.len(), d.classes, d.feature_dim()), (2, 10, 4));
        assert!(matches!(idx_load(&lp, &ip, None), Err(Error::Format { .. })));
    }
}

//! IDX (unsigned-byte) image and label files.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A decoded IDX payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let parse = |offset: usize, detail: String| Error::Parse { offset, detail };
    if bytes.len() < 4 {
        return Err(parse(bytes.len(), format!("header needs 4 bytes, got {}", bytes.len())));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse(0, format!("bad magic {:02x} {:02x}", bytes[0], bytes[1])));
    }
    if bytes[2] != 0x08 {
        return Err(parse(2, format!("unsupported element type 0x{:02x}; only unsigned bytes", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(parse(3, "zero dimensions".into()));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(parse(bytes.len(), format!("header needs {header} bytes, got {}", bytes.len())));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| parse(4, "extent product overflows".into()))?;
    let payload = bytes.len() - header;
    if payload != expected {
        return Err(parse(
            header + payload.min(expected),
            format!("payload holds {payload} bytes, expected {expected}"),
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdxOptions {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Optional rank-1 label file; without one every sample gets class 0.
    pub labels: Option<std::path::PathBuf>,
    pub classes: usize,
}

/// Images scaled to `[−1, 1]`, nearest-neighbour resized, channels
/// replicated.
pub fn read_idx(path: &Path, opts: &IdxOptions) -> Result<Dataset> {
    let images = parse_idx(&std::fs::read(path)?)?;
    if images.dims.len() != 3 {
        return Err(Error::Parse {
            offset: 3,
            detail: format!("image file has {} dimensions, expected 3", images.dims.len()),
        });
    }
    let (n, src_h, src_w) = (images.dims[0], images.dims[1], images.dims[2]);
    if n == 0 || src_h == 0 || src_w == 0 {
        return Err(Error::Parse {
            offset: 4,
            detail: format!("empty image extents {:?}", images.dims),
        });
    }
    let (c, h, w) = (opts.channels, opts.height, opts.width);
    let labels = match &opts.labels {
        Some(p) => {
            let l = parse_idx(&std::fs::read(p)?)?;
            if l.dims != [n] {
                return Err(Error::Parse {
                    offset: 4,
                    detail: format!("label extents {:?} do not match {n} images", l.dims),
                });
            }
            l.data.iter().map(|&b| b as usize).collect()
        }
        None => vec![0; n],
    };
    let mut data = Vec::with_capacity(n * c * h * w);
    for img in images.data.chunks_exact(src_h * src_w) {
        let mut plane = Vec::with_capacity(h * w);
        for r in 0..h {
            let sr = r * src_h / h;
            for col in 0..w {
                let sc = col * src_w / w;
                plane.push(img[sr * src_w + sc] as f32 / 127.5 - 1.0);
            }
        }
        for _ in 0..c {
            data.extend_from_slice(&plane);
        }
    }
    Dataset::new(Tensor::new(vec![n, c * h * w], data)?, labels, opts.classes.max(1), [c, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut b = vec![0, 0, 8, dims.len() as u8];
        for d in dims {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn header_decode() {
        let a = parse_idx(&idx_bytes(&[10, 28, 28], &vec![7; 7840])).unwrap();
        assert_eq!(a.dims, vec![10, 28, 28]);
        assert_eq!(a.data.len(), 7840);
    }

    #[test]
    fn errors_carry_offsets() {
        let err = parse_idx(&idx_bytes(&[2, 2, 2], &[0; 5])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 8") && msg.contains('5'), "{msg}");
        assert!(matches!(parse_idx(&[1, 0, 8, 1]), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(parse_idx(&[0, 0, 9, 1]), Err(Error::Parse { offset: 2, .. })));
    }

    #[test]
    fn endpoints_resize_and_replication() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.idx");
        std::fs::write(&path, idx_bytes(&[1, 2, 2], &[0, 255, 255, 0])).unwrap();
        let opts = IdxOptions {
            channels: 2,
            height: 4,
            width: 4,
            labels: None,
            classes: 1,
        };
        let d = read_idx(&path, &opts).unwrap();
        let row = d.x.row(0);
        assert_eq!(row[0], -1.0);
        assert_eq!(row[3], 1.0);
        assert_eq!(row[15], -1.0);
        assert_eq!(&row[..16], &row[16..]);
    }
}

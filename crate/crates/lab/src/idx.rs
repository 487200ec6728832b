//! Big-endian IDX files (the MNIST distribution format), gzip-transparent
//! when the path ends in `.gz`.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use t1t2_core::Tensor;

use crate::error::{LabError, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| LabError::io(path, e))?;
    let mut bytes = Vec::new();
    let res = if is_gz(path) {
        GzDecoder::new(file).read_to_end(&mut bytes)
    } else {
        io::BufReader::new(file).read_to_end(&mut bytes)
    };
    res.map_err(|e| LabError::io(path, e))?;
    Ok(bytes)
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| LabError::io(path, e))?;
    let res = if is_gz(path) {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes).and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut w = io::BufWriter::new(file);
        w.write_all(bytes).and_then(|_| w.flush())
    };
    res.map_err(|e| LabError::io(path, e))
}

fn truncated(path: &Path, what: &str) -> LabError {
    LabError::io(
        path,
        io::Error::new(io::ErrorKind::UnexpectedEof, format!("truncated {what}")),
    )
}

fn header(bytes: &[u8], path: &Path, words: usize) -> Result<Vec<u32>> {
    if bytes.len() < 4 * words {
        return Err(truncated(path, "header"));
    }
    Ok(bytes[..4 * words]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn check_magic(found: u32, expected: u32, path: &Path) -> Result<()> {
    if found != expected {
        return Err(LabError::Format {
            path: path.into(),
            message: format!("bad IDX magic {found} (0x{found:08x}), expected {expected}"),
        });
    }
    Ok(())
}

/// Images as `count × (rows·cols)` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    let h = header(bytes, path, 4)?;
    check_magic(h[0], IMAGES_MAGIC, path)?;
    let (count, rows, cols) = (h[1] as usize, h[2] as usize, h[3] as usize);
    let need = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(truncated(path, "image payload"));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: payload[..need].to_vec(),
    })
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let h = header(bytes, path, 2)?;
    check_magic(h[0], LABELS_MAGIC, path)?;
    let count = h[1] as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(truncated(path, "label payload"));
    }
    Ok(payload[..count].to_vec())
}

pub fn read_images(path: &Path) -> Result<IdxImages> {
    parse_images(&read_all(path)?, path)
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    parse_labels(&read_all(path)?, path)
}

/// Features scaled to `[0, 1]` (`count × rows·cols`) and labels.
pub fn load_idx(images: &Path, labels: &Path) -> Result<(Tensor, Vec<usize>)> {
    let img = read_images(images)?;
    let lab = read_labels(labels)?;
    if img.count != lab.len() {
        return Err(LabError::Format {
            path: labels.into(),
            message: format!("{} labels for {} images in {}", lab.len(), img.count, images.display()),
        });
    }
    let data = img.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let features = Tensor::new(&[img.count, img.rows * img.cols], data)?;
    Ok((features, lab.into_iter().map(usize::from).collect()))
}

pub fn encode_images(img: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.pixels.len());
    for v in [IMAGES_MAGIC, img.count as u32, img.rows as u32, img.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&img.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_images(path: &Path, img: &IdxImages) -> Result<()> {
    if img.pixels.len() != img.count * img.rows * img.cols {
        return Err(LabError::Format {
            path: path.into(),
            message: "pixel count does not match dimensions".into(),
        });
    }
    write_all(path, &encode_images(img))
}

pub fn write_labels(path: &Path, labels: &[u8]) -> Result<()> {
    write_all(path, &encode_labels(labels))
}

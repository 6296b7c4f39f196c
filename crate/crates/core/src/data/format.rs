//! Dataset file layout, little-endian throughout:
//!
//! ```text
//! "MDLD" | version: u32 | N: u32 | C: u32 | H: u32 | W: u32 | label_width: u8
//!        | pixels: N*C*H*W u8 | labels: N * label_width bytes | crc32: u32
//! ```
//!
//! The checksum covers every byte before it.

use std::fs;
use std::path::Path;

use super::{DataError, Dataset};

pub const DATASET_MAGIC: [u8; 4] = *b"MDLD";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 16 + 1;
const LABEL_WIDTH: u8 = 2;

pub fn to_bytes(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + ds.pixels.len() + 2 * ds.len() + 4);
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for dim in [ds.len(), ds.channels, ds.height, ds.width] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.push(LABEL_WIDTH);
    out.extend_from_slice(&ds.pixels);
    for &l in &ds.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Dataset, DataError> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated { needed: HEADER_LEN, found: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != DATASET_MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Truncated { needed: HEADER_LEN, found: bytes.len() });
    }
    let version = u32_at(bytes, 4);
    if version != DATASET_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let dims: Vec<usize> = (0..4).map(|i| u32_at(bytes, 8 + 4 * i) as usize).collect();
    let label_width = bytes[24] as usize;
    if !(1..=2).contains(&label_width) {
        return Err(DataError::Invalid(format!("label width {label_width}")));
    }
    let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    let pixel_len = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| DataError::Invalid("dimensions overflow".into()))?;
    let needed = HEADER_LEN + pixel_len + n * label_width + 4;
    if bytes.len() < needed {
        return Err(DataError::Truncated { needed, found: bytes.len() });
    }
    if bytes.len() > needed {
        return Err(DataError::Invalid(format!("{} trailing bytes", bytes.len() - needed)));
    }
    let stored = u32_at(bytes, needed - 4);
    let computed = crc32fast::hash(&bytes[..needed - 4]);
    if stored != computed {
        return Err(DataError::Checksum { stored, computed });
    }
    let pixels = bytes[HEADER_LEN..HEADER_LEN + pixel_len].to_vec();
    let labels = bytes[HEADER_LEN + pixel_len..needed - 4]
        .chunks_exact(label_width)
        .map(|b| if label_width == 2 { u16::from_le_bytes([b[0], b[1]]) } else { b[0] as u16 })
        .collect();
    Dataset::new(c, h, w, pixels, labels)
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    ds.check()?;
    fs::write(path, to_bytes(ds))?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let mut ds = from_bytes(&fs::read(path)?)?;
    ds.provenance = path.display().to_string();
    Ok(ds)
}

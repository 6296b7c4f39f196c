//! Checkpoint container:
//!
//! ```text
//! "ADPT" | version: u32 | manifest_len: u64 | manifest (JSON) | payload | crc32(payload): u32
//! ```
//!
//! All integers are little-endian. The payload is the concatenation of every
//! entry listed in the manifest, in manifest order, as little-endian `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AdapterNet, NetError, NetworkConfig, ParamKind, Role};
use crate::engine::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ADPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("checkpoint payload checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint manifest invalid: {0}")]
    Manifest(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum EntryKind {
    Parameter(ParamKind),
    RunningMean,
    RunningVar,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    kind: EntryKind,
    role: Role,
    shape: Vec<usize>,
    crc32: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: NetworkConfig,
    entries: Vec<Entry>,
    payload_bytes: u64,
}

fn encode<T: Scalar>(values: &[T]) -> Vec<u8> {
    values.iter().flat_map(|v| (v.as_f64() as f32).to_le_bytes()).collect()
}

fn decode<T: Scalar>(bytes: &[u8]) -> Vec<T> {
    bytes
        .chunks_exact(4)
        .map(|c| T::cast_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect()
}

/// Serializes a network into checkpoint bytes.
pub fn to_bytes<T: Scalar>(net: &AdapterNet<T>) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    let mut push = |name: &str, kind, role, shape: &[usize], bytes: Vec<u8>| {
        entries.push(Entry {
            name: name.to_string(),
            kind,
            role,
            shape: shape.to_vec(),
            crc32: crc32fast::hash(&bytes),
        });
        payload.extend_from_slice(&bytes);
    };
    for p in net.params() {
        push(p.name(), EntryKind::Parameter(p.kind()), p.role(), p.tensor.shape(), encode(p.tensor.data()));
    }
    for s in net.running_stats() {
        let c = s.stats.channels();
        push(&s.name, EntryKind::RunningMean, s.role, &[c], encode(&s.stats.mean));
        push(&s.name, EntryKind::RunningVar, s.role, &[c], encode(&s.stats.var));
    }
    let manifest = Manifest { config: net.config().clone(), entries, payload_bytes: payload.len() as u64 };
    let manifest = serde_json::to_vec(&manifest).expect("manifest serializes");

    let mut out = Vec::with_capacity(16 + manifest.len() + payload.len() + 4);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

fn take(bytes: &[u8], at: usize, len: usize) -> Result<&[u8], CheckpointError> {
    let end = at.checked_add(len).unwrap_or(usize::MAX);
    bytes.get(at..end).ok_or(CheckpointError::Truncated { needed: end, found: bytes.len() })
}

/// Parses checkpoint bytes back into a network.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<AdapterNet<T>, CheckpointError> {
    let magic: [u8; 4] = take(bytes, 0, 4)?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(take(bytes, 4, 4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let manifest_len = u64::from_le_bytes(take(bytes, 8, 8)?.try_into().expect("8 bytes")) as usize;
    let manifest: Manifest = serde_json::from_slice(take(bytes, 16, manifest_len)?)
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let payload_at = 16 + manifest_len;
    let payload = take(bytes, payload_at, manifest.payload_bytes as usize)?;
    let stored = u32::from_le_bytes(take(bytes, payload_at + payload.len(), 4)?.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }

    let mut net = AdapterNet::<T>::build(manifest.config)?;
    let mut seen_params = vec![false; net.params().len()];
    let mut offset = 0;
    for entry in &manifest.entries {
        let len = entry.shape.iter().product::<usize>() * 4;
        let raw = take(payload, offset, len)?;
        offset += len;
        if crc32fast::hash(raw) != entry.crc32 {
            return Err(CheckpointError::Manifest(format!("entry {} checksum mismatch", entry.name)));
        }
        let values: Vec<T> = decode(raw);
        match entry.kind {
            EntryKind::Parameter(kind) => {
                let id = net
                    .find(&entry.name)
                    .ok_or_else(|| CheckpointError::Manifest(format!("unknown parameter {}", entry.name)))?;
                let p = &net.params()[id];
                if p.role() != entry.role || p.kind() != kind || p.tensor.shape() != entry.shape.as_slice() {
                    return Err(CheckpointError::Manifest(format!("parameter {} does not match the network", entry.name)));
                }
                *net.tensor_mut(id) = Tensor::from_vec(&entry.shape, values).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
                seen_params[id] = true;
            }
            EntryKind::RunningMean | EntryKind::RunningVar => {
                let s = net
                    .running_stats_mut()
                    .iter_mut()
                    .find(|s| s.name == entry.name)
                    .ok_or_else(|| CheckpointError::Manifest(format!("unknown statistics {}", entry.name)))?;
                if s.stats.channels() != values.len() || s.role != entry.role {
                    return Err(CheckpointError::Manifest(format!("statistics {} do not match the network", entry.name)));
                }
                if entry.kind == EntryKind::RunningMean {
                    s.stats.mean = values;
                } else {
                    s.stats.var = values;
                }
            }
        }
    }
    if let Some(missing) = seen_params.iter().position(|&seen| !seen) {
        return Err(CheckpointError::Manifest(format!("parameter {} missing", net.params()[missing].name())));
    }
    Ok(net)
}

pub fn save<T: Scalar>(net: &AdapterNet<T>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(net))?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<AdapterNet<T>, CheckpointError> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapternet::DomainHead;

    fn net() -> AdapterNet<f32> {
        let heads = vec![DomainHead { name: "a".into(), classes: 4 }, DomainHead { name: "b".into(), classes: 3 }];
        let mut net = AdapterNet::build(NetworkConfig::desk(heads).with_seed(3)).unwrap();
        // Non-default values everywhere that matters.
        let (w, _) = net.adapter_params(1, super::super::AdapterPosition::Second, 1).unwrap();
        net.tensor_mut(w).data_mut()[3] = -0.125;
        net.running_stats_mut()[2].stats.var[0] = 0.37;
        net
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let net = net();
        let bytes = to_bytes(&net);
        let back: AdapterNet<f32> = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&back), bytes);
        assert_eq!(back.running_stats(), net.running_stats());
    }

    #[test]
    fn altered_magic_is_reported() {
        let mut bytes = to_bytes(&net());
        bytes[0] = b'X';
        assert!(matches!(from_bytes::<f32>(&bytes), Err(CheckpointError::BadMagic(_))));
    }

    #[test]
    fn other_corruptions_are_distinct() {
        let bytes = to_bytes(&net());
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(from_bytes::<f32>(&v), Err(CheckpointError::UnsupportedVersion(9))));
        assert!(matches!(from_bytes::<f32>(&bytes[..bytes.len() - 10]), Err(CheckpointError::Truncated { .. })));
        assert!(matches!(from_bytes::<f32>(&[]), Err(CheckpointError::Truncated { .. })));
        let mut v = bytes.clone();
        let n = v.len();
        v[n - 20] ^= 0x40;
        assert!(matches!(from_bytes::<f32>(&v), Err(CheckpointError::Checksum { .. })));
    }
}

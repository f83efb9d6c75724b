use std::path::Path;

use serde::{Deserialize, Serialize};

use super::OutputSnapshot;
use crate::registry::container::{read_container, write_container, FormatError};
use crate::registry::CheckpointError;

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Descriptor {
    Snapshot { epoch: usize, lengths: Vec<u64> },
}

/// Snapshot file: NSEL container whose payload holds, per neuron, the raw
/// norm followed by the normalized vector, all as little-endian `f64`.
pub fn encode_snapshot(snapshot: &OutputSnapshot) -> Vec<u8> {
    let descriptor = Descriptor::Snapshot {
        epoch: snapshot.epoch,
        lengths: snapshot.vectors().iter().map(|v| v.len() as u64).collect(),
    };
    let json = serde_json::to_vec(&descriptor).expect("descriptor serializes");
    let floats: usize = snapshot.vectors().iter().map(|v| v.len() + 1).sum();
    let mut payload = Vec::with_capacity(floats * 8);
    for (v, norm) in snapshot.vectors().iter().zip(snapshot.raw_norms()) {
        payload.extend_from_slice(&norm.to_le_bytes());
        for x in v {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    write_container(&json, &payload)
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<OutputSnapshot, FormatError> {
    let (descriptor, mut reader) = read_container(bytes)?;
    let Descriptor::Snapshot { epoch, lengths } =
        serde_json::from_slice(descriptor).map_err(|e| FormatError::Descriptor(e.to_string()))?;
    let floats = lengths
        .iter()
        .try_fold(0u64, |acc, &n| acc.checked_add(n)?.checked_add(1))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| FormatError::Descriptor("vector lengths overflow".into()))?;
    if floats != reader.remaining() as u64 {
        return Err(FormatError::Corrupt(format!(
            "payload holds {} bytes, descriptor requires {floats}",
            reader.remaining()
        )));
    }
    let mut vectors = Vec::with_capacity(lengths.len());
    let mut norms = Vec::with_capacity(lengths.len());
    for &len in &lengths {
        norms.push(reader.f64()?);
        let v = (0..len)
            .map(|_| reader.f64())
            .collect::<Result<Vec<_>, _>>()?;
        vectors.push(v);
    }
    reader.finish()?;
    Ok(OutputSnapshot::from_parts(epoch, vectors, norms))
}

pub fn write_snapshot(snapshot: &OutputSnapshot, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_snapshot(snapshot)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_snapshot(path: &Path) -> Result<OutputSnapshot, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_snapshot(&bytes).map_err(|source| CheckpointError::Format {
        path: path.to_path_buf(),
        source,
    })
}

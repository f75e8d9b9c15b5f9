//! Checkpoint container shared by encoder, topic, and classifier artifacts.
//!
//! A checkpoint is a directory holding two files:
//!
//! - `manifest.json` — kind-specific metadata plus an ordered list of
//!   `{name, shape}` weight entries,
//! - `weights.bin` — the named arrays concatenated in manifest order as raw
//!   little-endian 32-bit floats.
//!
//! Weights round-trip bit-exactly. Writes go through a temp file and an
//! atomic rename so concurrent readers never observe partial artifacts, and
//! no file embeds a timestamp, so identical inputs produce byte-identical
//! checkpoints.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

/// One named array in a checkpoint, in storage order.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct WeightEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl WeightEntry {
    pub fn numel(&self) -> Result<usize> {
        self.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| {
            Error::malformed("weight entry", format!("shape {:?} overflows", self.shape))
        })
    }
}

/// Hex-encoded SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to `path` via a unique temp file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let tmp = parent.join(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact"),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Serializes a manifest and its arrays into a checkpoint directory.
pub fn write_container<M: Serialize>(
    dir: &Path,
    manifest: &M,
    arrays: &[(&str, &[usize], &[f32])],
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_bytes = serde_json::to_vec_pretty(manifest)
        .map_err(|e| Error::malformed("manifest", e.to_string()))?;
    let mut blob = Vec::new();
    for (name, shape, data) in arrays {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid_argument(format!(
                "array {name} has {} values but shape {shape:?}",
                data.len()
            )));
        }
        for v in *data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(&dir.join(MANIFEST_FILE), &manifest_bytes)?;
    write_atomic(&dir.join(WEIGHTS_FILE), &blob)?;
    Ok(())
}

/// Raw checkpoint parts, before kind-specific interpretation.
pub struct ContainerParts<M> {
    pub manifest: M,
    pub arrays: Vec<(WeightEntry, Vec<f32>)>,
}

/// Parses manifest and weight bytes. The manifest type must expose its
/// weight list through [`HasWeights`].
pub fn read_container_parts<M: DeserializeOwned + HasWeights>(
    manifest_bytes: &[u8],
    weight_bytes: &[u8],
) -> Result<ContainerParts<M>> {
    let manifest: M = serde_json::from_slice(manifest_bytes)
        .map_err(|e| Error::malformed("manifest", e.to_string()))?;
    let entries = manifest.weights().to_vec();
    let mut total = 0usize;
    for entry in &entries {
        total = total
            .checked_add(entry.numel()?)
            .ok_or_else(|| Error::malformed("manifest", "total weight size overflows".into()))?;
    }
    let expected_bytes = total
        .checked_mul(4)
        .ok_or_else(|| Error::malformed("manifest", "total weight size overflows".into()))?;
    if weight_bytes.len() != expected_bytes {
        return Err(Error::malformed(
            "weights",
            format!("expected {expected_bytes} bytes, found {}", weight_bytes.len()),
        ));
    }
    let mut arrays = Vec::with_capacity(entries.len());
    let mut offset = 0usize;
    for entry in entries {
        let n = entry.numel()?;
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let at = offset + i * 4;
            data.push(f32::from_le_bytes(weight_bytes[at..at + 4].try_into().unwrap()));
        }
        offset += n * 4;
        arrays.push((entry, data));
    }
    Ok(ContainerParts { manifest, arrays })
}

/// Reads a checkpoint directory written by [`write_container`].
pub fn read_container<M: DeserializeOwned + HasWeights>(dir: &Path) -> Result<ContainerParts<M>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let weights_path = dir.join(WEIGHTS_FILE);
    let manifest_bytes =
        std::fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let weight_bytes = std::fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    read_container_parts(&manifest_bytes, &weight_bytes)
}

/// SHA-256 over manifest bytes followed by weight bytes: the checkpoint's
/// identity for bundle consistency checks.
pub fn container_sha256(dir: &Path) -> Result<String> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let weights_path = dir.join(WEIGHTS_FILE);
    let manifest_bytes =
        std::fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let weight_bytes = std::fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&manifest_bytes);
    hasher.update(&weight_bytes);
    Ok(hex::encode(hasher.finalize()))
}

/// Manifests that carry an ordered weight list.
pub trait HasWeights {
    fn weights(&self) -> &[WeightEntry];
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, Deserialize)]
    struct TestManifest {
        kind: String,
        weights: Vec<WeightEntry>,
    }

    impl HasWeights for TestManifest {
        fn weights(&self) -> &[WeightEntry] {
            &self.weights
        }
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let manifest = TestManifest {
            kind: "test".into(),
            weights: vec![
                WeightEntry { name: "a".into(), shape: vec![2, 2] },
                WeightEntry { name: "b".into(), shape: vec![3] },
            ],
        };
        let a = [0.1f32, -2.5, f32::MIN_POSITIVE, 1e30];
        let b = [1.5f32, 0.0, -0.0];
        write_container(&path, &manifest, &[("a", &[2, 2], &a), ("b", &[3], &b)]).unwrap();

        let parts: ContainerParts<TestManifest> = read_container(&path).unwrap();
        assert_eq!(parts.arrays[0].1, a.to_vec());
        assert_eq!(
            parts.arrays[1].1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );

        // re-writing what was read reproduces the files byte for byte
        let path2 = dir.path().join("ckpt2");
        write_container(
            &path2,
            &parts.manifest,
            &[("a", &[2, 2], &parts.arrays[0].1), ("b", &[3], &parts.arrays[1].1)],
        )
        .unwrap();
        assert_eq!(
            std::fs::read(path.join(WEIGHTS_FILE)).unwrap(),
            std::fs::read(path2.join(WEIGHTS_FILE)).unwrap()
        );
        assert_eq!(
            std::fs::read(path.join(MANIFEST_FILE)).unwrap(),
            std::fs::read(path2.join(MANIFEST_FILE)).unwrap()
        );
    }

    #[test]
    fn truncated_weights_are_rejected() {
        let manifest = serde_json::to_vec(&TestManifest {
            kind: "test".into(),
            weights: vec![WeightEntry { name: "a".into(), shape: vec![4] }],
        })
        .unwrap();
        let err =
            read_container_parts::<TestManifest>(&manifest, &[0u8; 15]).unwrap_err();
        assert!(matches!(err, Error::Malformed { .. }));
    }

    #[test]
    fn garbage_manifest_is_rejected_without_panic() {
        let err = read_container_parts::<TestManifest>(b"{not json", &[]).unwrap_err();
        assert!(matches!(err, Error::Malformed { .. }));
        let overflow = br#"{"kind":"x","weights":[{"name":"a","shape":[18446744073709551615,2]}]}"#;
        let err = read_container_parts::<TestManifest>(overflow, &[]).unwrap_err();
        assert!(matches!(err, Error::Malformed { .. }));
    }
}

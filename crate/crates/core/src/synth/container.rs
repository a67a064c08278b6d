//! Binary dataset container plus its JSON manifest.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! "MAUD" | version: u32 | feature_dim: u32
//! repeated until EOF:
//!   transcript_len: u32 | transcript: UTF-8 bytes | speed: f64
//!   frames: u32 | frames * feature_dim f32 values
//! ```
//!
//! Records are written canaries first (ascending frequency), then holdout,
//! background and validation. The manifest says which record is which.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{canary_id, CanaryDataset, CanaryPlan, RenderConfig, Utterance};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"MAUD";
pub const CONTAINER_VERSION: u32 = 1;

pub const CONTAINER_FILE: &str = "dataset.maud";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq)]
pub struct ContainerRecord {
    pub transcript: String,
    pub speed: f64,
    pub frames: usize,
    pub features: Vec<f32>,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        kind: "dataset",
        reason: reason.into(),
    }
}

pub fn write_container<'a, W: Write>(
    mut w: W,
    feature_dim: usize,
    utterances: impl IntoIterator<Item = &'a Utterance>,
) -> Result<()> {
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    w.write_all(&(feature_dim as u32).to_le_bytes())?;
    for u in utterances {
        if u.feature_dim != feature_dim {
            return Err(crate::error::shape(format!(
                "utterance has feature_dim {}, container expects {feature_dim}",
                u.feature_dim
            )));
        }
        let text = u.transcript.as_bytes();
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text)?;
        w.write_all(&u.speed.to_le_bytes())?;
        w.write_all(&(u.frames as u32).to_le_bytes())?;
        for v in &u.features {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Returns `(feature_dim, records)`.
pub fn read_container<R: Read>(mut r: R) -> Result<(usize, Vec<ContainerRecord>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = io::Cursor::new(bytes.as_slice());
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != CONTAINER_MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let version = read_u32(&mut cur).map_err(|_| bad("truncated header"))?;
    if version != CONTAINER_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let d = read_u32(&mut cur).map_err(|_| bad("truncated header"))? as usize;
    if d == 0 {
        return Err(bad("feature_dim is zero"));
    }
    let mut records = Vec::new();
    while (cur.position() as usize) < bytes.len() {
        let truncated = |_| bad(format!("record {} is truncated", records.len()));
        let len = read_u32(&mut cur).map_err(truncated)? as usize;
        let mut text = vec![0u8; len];
        cur.read_exact(&mut text).map_err(truncated)?;
        let transcript =
            String::from_utf8(text).map_err(|_| bad("transcript is not valid UTF-8"))?;
        let mut sb = [0u8; 8];
        cur.read_exact(&mut sb).map_err(truncated)?;
        let speed = f64::from_le_bytes(sb);
        let frames = read_u32(&mut cur).map_err(truncated)? as usize;
        let mut features = Vec::with_capacity(frames * d);
        let mut fb = [0u8; 4];
        for _ in 0..frames * d {
            cur.read_exact(&mut fb).map_err(truncated)?;
            features.push(f32::from_le_bytes(fb));
        }
        records.push(ContainerRecord {
            transcript,
            speed,
            frames,
            features,
        });
    }
    Ok((d, records))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordRole {
    Canary,
    Holdout,
    Background,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub role: RecordRole,
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub frequency: Option<u32>,
    pub source_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub container_sha256: String,
    pub render: RenderConfig,
    pub plan: CanaryPlan,
    pub vocabulary_size: usize,
    pub vocabulary_seed: u64,
    pub records: Vec<RecordEntry>,
}

fn ordered(ds: &CanaryDataset) -> Vec<(RecordEntry, &Utterance)> {
    let mut out = Vec::new();
    for (id, k, u) in ds.canaries() {
        out.push((
            RecordEntry {
                role: RecordRole::Canary,
                id,
                frequency: Some(k),
                source_seed: u.source_seed,
            },
            u,
        ));
    }
    let rest = [
        (RecordRole::Holdout, "h", &ds.holdout),
        (RecordRole::Background, "b", &ds.background),
        (RecordRole::Validation, "v", &ds.validation),
    ];
    for (role, prefix, list) in rest {
        for (i, u) in list.iter().enumerate() {
            out.push((
                RecordEntry {
                    role,
                    id: format!("{prefix}{i:05}"),
                    frequency: None,
                    source_seed: u.source_seed,
                },
                u,
            ));
        }
    }
    out
}

/// Writes `dataset.maud` and `manifest.json` into `dir` and returns the
/// container's SHA-256.
pub fn save_dataset(ds: &CanaryDataset, dir: &Path) -> Result<String> {
    fs::create_dir_all(dir)?;
    let entries = ordered(ds);
    let mut bytes = Vec::new();
    write_container(&mut bytes, ds.feature_dim(), entries.iter().map(|(_, u)| *u))?;
    let digest = sha256_hex(&bytes);
    fs::write(dir.join(CONTAINER_FILE), &bytes)?;
    let manifest = DatasetManifest {
        format_version: CONTAINER_VERSION,
        container_sha256: digest.clone(),
        render: ds.render,
        plan: ds.plan.clone(),
        vocabulary_size: ds.vocabulary_size,
        vocabulary_seed: ds.vocabulary_seed,
        records: entries.into_iter().map(|(e, _)| e).collect(),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(digest)
}

/// Loads a dataset written by [`save_dataset`]; returns it with the
/// container's SHA-256.
pub fn load_dataset(dir: &Path) -> Result<(CanaryDataset, String)> {
    let bytes = fs::read(dir.join(CONTAINER_FILE))?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let digest = sha256_hex(&bytes);
    if digest != manifest.container_sha256 {
        return Err(Error::Consistency(format!(
            "container hash {digest} does not match manifest {}",
            manifest.container_sha256
        )));
    }
    let (d, records) = read_container(bytes.as_slice())?;
    if d != manifest.render.feature_dim {
        return Err(bad(format!(
            "container feature_dim {d} differs from manifest {}",
            manifest.render.feature_dim
        )));
    }
    if records.len() != manifest.records.len() {
        return Err(bad(format!(
            "container has {} records, manifest lists {}",
            records.len(),
            manifest.records.len()
        )));
    }

    let mut ds = CanaryDataset {
        render: manifest.render,
        plan: manifest.plan.clone(),
        vocabulary_size: manifest.vocabulary_size,
        vocabulary_seed: manifest.vocabulary_seed,
        groups: Default::default(),
        holdout: Vec::new(),
        background: Vec::new(),
        validation: Vec::new(),
    };
    for (rec, entry) in records.into_iter().zip(&manifest.records) {
        let u = Utterance {
            features: rec.features,
            frames: rec.frames,
            feature_dim: d,
            transcript: rec.transcript,
            speed: rec.speed,
            source_seed: entry.source_seed,
        };
        match entry.role {
            RecordRole::Canary => {
                let k = entry
                    .frequency
                    .ok_or_else(|| bad(format!("canary {} has no frequency", entry.id)))?;
                let group = ds.groups.entry(k).or_default();
                if entry.id != canary_id(k, group.len()) {
                    return Err(bad(format!("unexpected canary id {}", entry.id)));
                }
                group.push(u);
            }
            RecordRole::Holdout => ds.holdout.push(u),
            RecordRole::Background => ds.background.push(u),
            RecordRole::Validation => ds.validation.push(u),
        }
    }
    Ok((ds, digest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{build_vocabulary, make_canary_dataset};

    fn small() -> CanaryDataset {
        let v = build_vocabulary(100, 2).unwrap();
        let plan = CanaryPlan {
            frequencies: vec![1, 4],
            canaries_per_freq: 3,
            holdout_size: 7,
            background_size: 5,
            validation_size: 2,
            ..CanaryPlan::default()
        };
        make_canary_dataset(&RenderConfig::default(), &v, &plan).unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        let digest = save_dataset(&ds, dir.path()).unwrap();
        let (back, d2) = load_dataset(dir.path()).unwrap();
        assert_eq!(digest, d2);
        assert_eq!(back, ds);
    }

    #[test]
    fn header_layout() {
        let ds = small();
        let mut bytes = Vec::new();
        write_container(&mut bytes, 8, &ds.holdout[..1]).unwrap();
        assert_eq!(&bytes[..4], b"MAUD");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 8);
        let u = &ds.holdout[0];
        let n = u.transcript.len();
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize, n);
        let expected = 12 + 4 + n + 8 + 4 + 4 * u.frames * 8;
        assert_eq!(bytes.len(), expected);
    }

    #[test]
    fn truncated_container_is_rejected() {
        let ds = small();
        let mut bytes = Vec::new();
        write_container(&mut bytes, 8, &ds.holdout).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            read_container(bytes.as_slice()),
            Err(Error::Format { .. })
        ));
        assert!(read_container(&b"MAUX\x01\0\0\0\x08\0\0\0"[..]).is_err());
    }

    #[test]
    fn tampered_container_fails_hash_check() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join(CONTAINER_FILE);
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Consistency(_))));
    }
}

//! Binary checkpoints.
//!
//! ```text
//! "ELOF" | version u32 | alignment u32 | meta_len u64 | meta JSON | pad | payload
//! ```
//!
//! All integers are little-endian. The payload starts at the first multiple
//! of `alignment` after the metadata, and every tensor offset (relative to
//! the payload start) is a multiple of `alignment`. Tensor data is f32 LE.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{EloError, Result};
use crate::model::{DecoderModel, ModelConfig};
use crate::surgery::{EloSubModel, LayerSelection, ParamDelta};
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"ELOF";
pub const VERSION: u32 = 1;
pub const ALIGNMENT: u32 = 64;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Full,
    EloSub,
    Delta,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub kind: Kind,
    #[serde(default)]
    pub config: Option<ModelConfig>,
    #[serde(default)]
    pub selection: Option<LayerSelection>,
    pub fingerprint: String,
    #[serde(default)]
    pub lineage: Option<String>,
    pub tensors: BTreeMap<String, IndexEntry>,
    pub payload_length: u64,
    #[serde(default)]
    pub donor_lineage: Option<String>,
    #[serde(default)]
    pub donor_fingerprint: Option<String>,
    #[serde(default)]
    pub train_emb_head: Option<bool>,
    #[serde(default)]
    pub minuend_fingerprint: Option<String>,
    #[serde(default)]
    pub subtrahend_fingerprint: Option<String>,
}

/// A loaded checkpoint of any kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Full(DecoderModel),
    EloSub(EloSubModel),
    Delta(ParamDelta),
}

impl Checkpoint {
    pub fn kind(&self) -> Kind {
        match self {
            Checkpoint::Full(_) => Kind::Full,
            Checkpoint::EloSub(_) => Kind::EloSub,
            Checkpoint::Delta(_) => Kind::Delta,
        }
    }

    pub fn fingerprint(&self) -> String {
        match self {
            Checkpoint::Full(m) => m.fingerprint(),
            Checkpoint::EloSub(s) => s.fingerprint(),
            Checkpoint::Delta(d) => d.fingerprint(),
        }
    }
}

impl From<DecoderModel> for Checkpoint {
    fn from(m: DecoderModel) -> Self {
        Checkpoint::Full(m)
    }
}

impl From<EloSubModel> for Checkpoint {
    fn from(s: EloSubModel) -> Self {
        Checkpoint::EloSub(s)
    }
}

impl From<ParamDelta> for Checkpoint {
    fn from(d: ParamDelta) -> Self {
        Checkpoint::Delta(d)
    }
}

fn align_up(x: u64) -> u64 {
    x.div_ceil(ALIGNMENT as u64) * ALIGNMENT as u64
}

fn layout(tensors: &BTreeMap<String, Tensor<f32>>) -> (BTreeMap<String, IndexEntry>, u64) {
    let mut index = BTreeMap::new();
    let mut end = 0u64;
    for (name, t) in tensors {
        let offset = align_up(end);
        let length = 4 * t.numel() as u64;
        index.insert(
            name.clone(),
            IndexEntry {
                dtype: DType::F32,
                shape: t.shape().to_vec(),
                offset,
                length,
            },
        );
        end = offset + length;
    }
    (index, end)
}

fn encode(meta: &Metadata, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta).map_err(|e| EloError::Format(e.to_string()))?;
    let payload_start = align_up((HEADER_LEN + json.len()) as u64) as usize;
    let mut out = Vec::with_capacity(payload_start + meta.payload_length as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ALIGNMENT.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(payload_start, 0);
    for (name, t) in tensors {
        let e = &meta.tensors[name];
        out.resize(payload_start + e.offset as usize, 0);
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn metadata(kind: Kind, tensors: &BTreeMap<String, Tensor<f32>>, fingerprint: String) -> Metadata {
    let (index, payload_length) = layout(tensors);
    Metadata {
        kind,
        config: None,
        selection: None,
        fingerprint,
        lineage: None,
        tensors: index,
        payload_length,
        donor_lineage: None,
        donor_fingerprint: None,
        train_emb_head: None,
        minuend_fingerprint: None,
        subtrahend_fingerprint: None,
    }
}

/// Serializes a checkpoint to bytes.
pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    match ckpt {
        Checkpoint::Full(m) => {
            let mut meta = metadata(Kind::Full, m.params(), m.fingerprint());
            meta.config = Some(m.config().clone());
            meta.lineage = Some(m.lineage().to_string());
            encode(&meta, m.params())
        }
        Checkpoint::EloSub(s) => {
            let m = s.model();
            let mut meta = metadata(Kind::EloSub, m.params(), m.fingerprint());
            meta.config = Some(m.config().clone());
            meta.lineage = Some(m.lineage().to_string());
            meta.selection = Some(s.selection().clone());
            meta.donor_lineage = Some(s.donor_lineage().to_string());
            meta.donor_fingerprint = Some(s.donor_fingerprint().to_string());
            meta.train_emb_head = Some(s.train_emb_head());
            encode(&meta, m.params())
        }
        Checkpoint::Delta(d) => {
            let mut meta = metadata(Kind::Delta, d.entries(), d.fingerprint());
            meta.minuend_fingerprint = Some(d.minuend_fingerprint().to_string());
            meta.subtrahend_fingerprint = Some(d.subtrahend_fingerprint().to_string());
            encode(&meta, d.entries())
        }
    }
}

fn corrupt(msg: impl Into<String>) -> EloError {
    EloError::CorruptCheckpoint(msg.into())
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses and validates the header and metadata; returns the payload start.
pub fn read_metadata(bytes: &[u8]) -> Result<(Metadata, usize)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(EloError::Format("bad magic, not an ELOF checkpoint".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(corrupt("truncated header"));
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(EloError::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let alignment = read_u32(bytes, 8);
    if alignment != ALIGNMENT {
        return Err(EloError::Format(format!("unsupported alignment {alignment}")));
    }
    let meta_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let meta_end = (HEADER_LEN as u64).checked_add(meta_len).filter(|&e| e <= bytes.len() as u64);
    let Some(meta_end) = meta_end else {
        return Err(corrupt(format!("metadata length {meta_len} exceeds file size {}", bytes.len())));
    };
    let meta: Metadata = serde_json::from_slice(&bytes[HEADER_LEN..meta_end as usize])
        .map_err(|e| corrupt(format!("metadata: {e}")))?;
    let payload_start = align_up(meta_end);
    validate_index(&meta)?;
    let expected = payload_start + meta.payload_length;
    if bytes.len() as u64 != expected {
        return Err(corrupt(format!("file is {} bytes, index requires {expected}", bytes.len())));
    }
    Ok((meta, payload_start as usize))
}

fn validate_index(meta: &Metadata) -> Result<()> {
    let mut entries: Vec<(&String, &IndexEntry)> = meta.tensors.iter().collect();
    entries.sort_by_key(|(_, e)| e.offset);
    let mut end = 0u64;
    for (name, e) in entries {
        if e.dtype != DType::F32 {
            return Err(corrupt(format!("`{name}`: unsupported dtype {:?}", e.dtype)));
        }
        let numel = e.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        if e.shape.is_empty() || e.shape.contains(&0) || numel.and_then(|n| n.checked_mul(4)) != Some(e.length) {
            return Err(corrupt(format!("`{name}`: length {} does not match shape {:?}", e.length, e.shape)));
        }
        if e.offset % ALIGNMENT as u64 != 0 {
            return Err(corrupt(format!("`{name}`: offset {} is not {ALIGNMENT}-aligned", e.offset)));
        }
        if e.offset < end {
            return Err(corrupt(format!("`{name}`: overlaps the previous tensor")));
        }
        end = e.offset.checked_add(e.length).ok_or_else(|| corrupt("offset overflow"))?;
    }
    if end != meta.payload_length {
        return Err(corrupt(format!(
            "payload_length {} but tensors end at {end}",
            meta.payload_length
        )));
    }
    Ok(())
}

/// Decodes a checkpoint; every structural check runs before the payload is read.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (meta, start) = read_metadata(bytes)?;
    let mut tensors = BTreeMap::new();
    for (name, e) in &meta.tensors {
        let a = start + e.offset as usize;
        let data = bytes[a..a + e.length as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(name.clone(), Tensor::from_vec(&e.shape, data)?);
    }
    let need = |v: Option<String>, key: &str| v.ok_or_else(|| corrupt(format!("metadata lacks `{key}`")));
    let ckpt = match meta.kind {
        Kind::Full | Kind::EloSub => {
            let config = meta.config.clone().ok_or_else(|| corrupt("metadata lacks `config`"))?;
            let lineage = need(meta.lineage.clone(), "lineage")?;
            let model = DecoderModel::from_parts(config, tensors, lineage).map_err(|e| corrupt(e.to_string()))?;
            if meta.kind == Kind::Full {
                Checkpoint::Full(model)
            } else {
                let selection = meta.selection.clone().ok_or_else(|| corrupt("metadata lacks `selection`"))?;
                Checkpoint::EloSub(EloSubModel::from_parts(
                    model,
                    selection,
                    need(meta.donor_lineage.clone(), "donor_lineage")?,
                    need(meta.donor_fingerprint.clone(), "donor_fingerprint")?,
                    meta.train_emb_head.unwrap_or(false),
                )?)
            }
        }
        Kind::Delta => Checkpoint::Delta(ParamDelta::from_parts(
            tensors,
            need(meta.minuend_fingerprint.clone(), "minuend_fingerprint")?,
            need(meta.subtrahend_fingerprint.clone(), "subtrahend_fingerprint")?,
        )),
    };
    if ckpt.fingerprint() != meta.fingerprint {
        return Err(corrupt("payload does not match the recorded fingerprint"));
    }
    Ok(ckpt)
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".tmp");
    PathBuf::from(s)
}

/// Writes to a temporary file, fsyncs it, then renames it into place.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = to_bytes(ckpt)?;
    let tmp = tmp_path(path);
    let io = |e| EloError::io(path, e);
    {
        let mut f = File::create(&tmp).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| EloError::io(path, e))?;
    from_bytes(&bytes)
}

fn wrong_kind(path: &Path, want: Kind, got: Kind) -> EloError {
    EloError::Format(format!("{}: expected a {want:?} checkpoint, found {got:?}", path.display()))
}

pub fn load_full(path: &Path) -> Result<DecoderModel> {
    match load_checkpoint(path)? {
        Checkpoint::Full(m) => Ok(m),
        other => Err(wrong_kind(path, Kind::Full, other.kind())),
    }
}

pub fn load_elo_sub(path: &Path) -> Result<EloSubModel> {
    match load_checkpoint(path)? {
        Checkpoint::EloSub(s) => Ok(s),
        other => Err(wrong_kind(path, Kind::EloSub, other.kind())),
    }
}

pub fn load_delta(path: &Path) -> Result<ParamDelta> {
    match load_checkpoint(path)? {
        Checkpoint::Delta(d) => Ok(d),
        other => Err(wrong_kind(path, Kind::Delta, other.kind())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surgery::{compute_delta, detach_elo};

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 10,
            max_seq_len: 8,
            eps: 1e-5,
            seed: 4,
        }
    }

    #[test]
    fn header_layout() {
        let m = DecoderModel::build(cfg()).unwrap();
        let b = to_bytes(&Checkpoint::Full(m)).unwrap();
        assert_eq!(&b[..4], b"ELOF");
        assert_eq!(read_u32(&b, 4), 1);
        assert_eq!(read_u32(&b, 8), 64);
        let (meta, start) = read_metadata(&b).unwrap();
        assert_eq!(start % 64, 0);
        assert!(meta.tensors.values().all(|e| e.offset % 64 == 0));
    }

    #[test]
    fn all_kinds_roundtrip() {
        let m = DecoderModel::build(cfg()).unwrap();
        let mut other_cfg = cfg();
        other_cfg.seed = 9;
        let m2 = DecoderModel::build(other_cfg).unwrap();
        let sub = detach_elo(&m, &LayerSelection::new(vec![1, 3]).unwrap()).unwrap();
        let d = compute_delta(&m2, &m).unwrap();
        for c in [Checkpoint::Full(m), Checkpoint::EloSub(sub), Checkpoint::Delta(d)] {
            let back = from_bytes(&to_bytes(&c).unwrap()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.fingerprint(), c.fingerprint());
        }
    }

    #[test]
    fn rejects_damage() {
        let m = DecoderModel::build(cfg()).unwrap();
        let b = to_bytes(&Checkpoint::Full(m)).unwrap();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(EloError::Format(_))));
        let mut bad = b.clone();
        bad[4] = 2;
        assert!(matches!(from_bytes(&bad), Err(EloError::Format(_))));
        for cut in [10, 30, b.len() / 2, b.len() - 1] {
            assert!(matches!(from_bytes(&b[..cut]), Err(EloError::CorruptCheckpoint(_))), "cut {cut}");
        }
        let mut bad = b.clone();
        let last = bad.len() - 1;
        bad[last] ^= 0x40;
        assert!(matches!(from_bytes(&bad), Err(EloError::CorruptCheckpoint(_))));
    }
}

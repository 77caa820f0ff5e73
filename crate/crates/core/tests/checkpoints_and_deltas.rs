use std::fs;

use elo_forge::model::ModelConfig;
use elo_forge::store::{load_checkpoint, load_delta, load_elo_sub, load_full, save_checkpoint, Checkpoint, Kind};
use elo_forge::surgery::{apply_delta, compute_delta, detach_elo, LayerSelection};
use elo_forge::{DecoderModel, EloError};

fn cfg(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 3,
        d_model: 16,
        n_heads: 2,
        d_ff: 24,
        vocab_size: 64,
        max_seq_len: 16,
        eps: 1e-5,
        seed,
    }
}

/// Deterministic perturbation standing in for a round of training.
fn nudge(m: &DecoderModel, k: f32) -> DecoderModel {
    let mut out = m.clone();
    for name in m.names().map(str::to_string).collect::<Vec<_>>() {
        for (i, x) in out.tensor_mut(&name).unwrap().data_mut().iter_mut().enumerate() {
            *x += k * ((i % 7) as f32 - 3.0) * 1e-2 + k * 1e-3;
        }
    }
    out
}

#[test]
fn files_roundtrip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let m = DecoderModel::build(cfg(1)).unwrap();
    let sub = detach_elo(&m, &LayerSelection::new(vec![1, 3]).unwrap()).unwrap();
    let delta = compute_delta(&nudge(&m, 1.0), &m).unwrap();

    let p = dir.path().join("full.elof");
    save_checkpoint(&p, &m.clone().into()).unwrap();
    assert!(load_full(&p).unwrap() == m);

    let p = dir.path().join("sub.elof");
    save_checkpoint(&p, &sub.clone().into()).unwrap();
    let back = load_elo_sub(&p).unwrap();
    assert_eq!(back.selection(), sub.selection());
    assert_eq!(back.fingerprint(), sub.fingerprint());
    assert_eq!(back.donor_lineage(), sub.donor_lineage());

    let p = dir.path().join("delta.elof");
    save_checkpoint(&p, &delta.clone().into()).unwrap();
    let back = load_delta(&p).unwrap();
    assert_eq!(back, delta);
    assert_eq!(back.minuend_fingerprint(), delta.minuend_fingerprint());
    assert_eq!(load_checkpoint(&p).unwrap().kind(), Kind::Delta);
    assert!(load_full(&p).is_err());
    assert!(dir.path().read_dir().unwrap().all(|e| !e.unwrap().path().to_string_lossy().ends_with(".tmp")));
}

#[test]
fn damaged_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.elof");
    save_checkpoint(&p, &Checkpoint::Full(DecoderModel::build(cfg(2)).unwrap())).unwrap();
    let good = fs::read(&p).unwrap();

    let q = dir.path().join("bad.elof");
    fs::write(&q, &good[..good.len() - 5]).unwrap();
    assert!(matches!(load_checkpoint(&q), Err(EloError::CorruptCheckpoint(_))));
    let mut flipped = good.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 0x10;
    fs::write(&q, &flipped).unwrap();
    assert!(matches!(load_checkpoint(&q), Err(EloError::CorruptCheckpoint(_))));
    let mut magic = good;
    magic[0] = b'X';
    fs::write(&q, &magic).unwrap();
    assert!(matches!(load_checkpoint(&q), Err(EloError::Format(_))));
    assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(EloError::Io { .. })));
}

#[test]
fn chat_vector_identity_and_transfer() {
    let pt = DecoderModel::build(cfg(3)).unwrap();
    let inst = nudge(&pt, 1.0);
    let delta = compute_delta(&inst, &pt).unwrap();
    let back = apply_delta(&pt, &delta).unwrap();
    for (name, t) in inst.params() {
        for (x, y) in back.tensor(name).unwrap().data().iter().zip(t.data()) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0), "{name}");
        }
    }
    assert!(compute_delta(&pt, &pt).unwrap().is_zero());

    let third = nudge(&pt, -2.5);
    let moved = apply_delta(&third, &delta).unwrap();
    for (name, t) in third.params() {
        assert!(t != moved.tensor(name).unwrap(), "{name} unchanged");
    }
}

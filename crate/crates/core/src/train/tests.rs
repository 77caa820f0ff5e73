use super::*;
use crate::data::{gen_corpus, gen_instructions, LangSpec};
use crate::model::{ModelConfig, EMBEDDING, HEAD_NORM, HEAD_W};
use crate::surgery::{detach_elo, LayerSelection};

fn tiny() -> ModelConfig {
    ModelConfig {
        n_layers: 3,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 64,
        max_seq_len: 32,
        eps: 1e-5,
        seed: 5,
    }
}

fn tok() -> Tokenizer {
    Tokenizer::for_langs(&[&LangSpec::source(), &LangSpec::target()], 64).unwrap()
}

fn plan(method: Method) -> TrainPlan {
    TrainPlan {
        batch: 2,
        seq_len: 16,
        max_steps: Some(6),
        ..TrainPlan::new(method)
    }
}

fn stream() -> DocStream {
    gen_corpus(&LangSpec::source(), 4, 1).unwrap()
}

fn one_batch() -> Batch {
    let s = stream();
    let r = rows(&s, &tok(), 16, LossMaskMode::All).unwrap();
    group_rows(&r[..2], 2).remove(0)
}

#[test]
fn empty_mask_leaves_model_unchanged() {
    let mut m = DecoderModel::build(tiny()).unwrap();
    let before = m.clone();
    let mut opt = AdamW::new(AdamWConfig::default());
    let loss = train_step(&mut m, &one_batch(), &BTreeSet::new(), &mut opt, 1e-2).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    assert_eq!(m, before);
}

#[test]
fn overfits_one_batch() {
    let mut m = DecoderModel::build(tiny()).unwrap();
    let b = one_batch();
    let mask = m.default_mask();
    let mut opt = AdamW::new(AdamWConfig {
        lr: 1e-2,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let mut last = f64::INFINITY;
    for _ in 0..200 {
        last = train_step(&mut m, &b, &mask, &mut opt, 1e-2).unwrap();
    }
    assert!(last < 0.1, "final loss {last}");
}

#[test]
fn runs_are_deterministic() {
    let p = plan(Method::Fft);
    let a = train_fft(DecoderModel::build(tiny()).unwrap(), &stream(), &tok(), &p).unwrap();
    let b = train_fft(DecoderModel::build(tiny()).unwrap(), &stream(), &tok(), &p).unwrap();
    assert_eq!(a.metrics.losses, b.metrics.losses);
    assert_eq!(a.model.fingerprint(), b.model.fingerprint());
    assert_eq!(a.metrics.steps, 6);
    assert_eq!(a.metrics.losses.len(), a.metrics.steps);
}

#[test]
fn fft_flops_and_mask() {
    let m = DecoderModel::build(tiny()).unwrap();
    let total = m.count_params(ParamScope::All).unwrap();
    let r = train_fft(m, &stream(), &tok(), &plan(Method::Fft)).unwrap();
    let cfg = tiny();
    assert_eq!(r.metrics.step_flops, 3 * forward_flops(&cfg, 3, 16) * 2);
    assert_eq!(r.metrics.params_trainable, total);
    assert_eq!(r.metrics.params_total, total);
}

#[test]
fn elo_freezes_embedding_and_head() {
    let m = DecoderModel::build(tiny()).unwrap();
    let sub = detach_elo(&m, &LayerSelection::new(vec![1, 3]).unwrap()).unwrap();
    let frozen: Vec<Tensor<f32>> = [EMBEDDING, HEAD_NORM, HEAD_W]
        .iter()
        .map(|n| sub.model().tensor(n).unwrap().clone())
        .collect();
    let layer_before = sub.model().tensor("layer.1.attn.q").unwrap().clone();
    let r = train_elo(sub, &stream(), &tok(), &plan(Method::Elo)).unwrap();
    for (n, t) in [EMBEDDING, HEAD_NORM, HEAD_W].iter().zip(&frozen) {
        assert_eq!(r.model.model().tensor(n).unwrap(), t);
    }
    assert_ne!(r.model.model().tensor("layer.1.attn.q").unwrap(), &layer_before);
    let mut cfg2 = tiny();
    cfg2.n_layers = 2;
    assert_eq!(r.metrics.step_flops, 3 * forward_flops(&cfg2, 2, 16) * 2);
}

#[test]
fn elo_emb_head_flag_trains_everything() {
    let m = DecoderModel::build(tiny()).unwrap();
    let mut sub = detach_elo(&m, &LayerSelection::new(vec![2]).unwrap()).unwrap();
    sub.set_train_emb_head(true);
    let emb = sub.model().tensor(EMBEDDING).unwrap().clone();
    let r = train_elo(sub, &stream(), &tok(), &plan(Method::Elo)).unwrap();
    assert_ne!(r.model.model().tensor(EMBEDDING).unwrap(), &emb);
}

#[test]
fn lora_reference_adapter_count() {
    let m = DecoderModel::build(ModelConfig::reference()).unwrap();
    let lm = attach_lora(m, &LoraConfig::default()).unwrap();
    assert_eq!(lm.adapter_params(), 65_536);
    assert_eq!(LoraConfig::default().scale(), 2.0);
    // 4·s·d·r per target per sequence
    assert_eq!(lm.adapter_flops(128), 32 * 4 * 128 * 128 * 8);
}

#[test]
fn lora_init_is_exact_and_base_frozen() {
    let m = DecoderModel::build(tiny()).unwrap();
    let toks: Vec<usize> = (0..16).map(|i| 3 + i % 50).collect();
    let base_logits = m.forward(&toks, 2).unwrap();
    let lm = attach_lora(m.clone(), &LoraConfig::default()).unwrap();
    assert_eq!(lm.forward(&toks, 2).unwrap(), base_logits);

    let r = train_lora(lm, &stream(), &tok(), &plan(Method::Lora)).unwrap();
    assert_eq!(r.model.base().fingerprint(), m.fingerprint());
    assert!(r.metrics.step_flops > 3 * forward_flops(&tiny(), 3, 16) * 2);
    assert_eq!(
        r.metrics.step_flops - 3 * forward_flops(&tiny(), 3, 16) * 2,
        3 * r.model.adapter_flops(16) * 2
    );
    assert_eq!(r.metrics.params_trainable, r.model.adapter_params());
}

#[test]
fn lora_merge_matches_and_guards() {
    let m = DecoderModel::build(tiny()).unwrap();
    let at_init = merge_lora(attach_lora(m.clone(), &LoraConfig::default()).unwrap()).unwrap();
    assert_eq!(at_init, m);

    let p = TrainPlan {
        optim: AdamWConfig {
            lr: 1e-2,
            ..AdamWConfig::default()
        },
        ..plan(Method::Lora)
    };
    let r = train_lora(attach_lora(m, &LoraConfig::default()).unwrap(), &stream(), &tok(), &p).unwrap();
    let toks: Vec<usize> = (0..32).map(|i| 3 + (i * 7) % 50).collect();
    let unmerged = r.model.forward(&toks, 2).unwrap();
    let mut lm = r.model;
    lm.merge().unwrap();
    assert!(matches!(lm.merge(), Err(EloError::Merge(_))));
    let merged = lm.base().forward(&toks, 2).unwrap();
    let scale = unmerged.data().iter().fold(0f32, |a, x| a.max(x.abs())).max(1.0);
    let max_rel = unmerged
        .data()
        .iter()
        .zip(merged.data())
        .map(|(a, b)| (a - b).abs() / scale)
        .fold(0f32, f32::max);
    assert!(max_rel < 1e-5, "{max_rel}");
    assert!(matches!(merge_lora(lm), Err(EloError::Merge(_))));
}

#[test]
fn lora_rejects_unknown_target() {
    let m = DecoderModel::build(tiny()).unwrap();
    let cfg = LoraConfig {
        targets: vec!["attn.x".into()],
        ..LoraConfig::default()
    };
    assert!(matches!(attach_lora(m, &cfg), Err(EloError::Name(_))));
}

#[test]
fn align_zero_budget_is_identity() {
    let m = DecoderModel::build(tiny()).unwrap();
    let p = TrainPlan {
        budget_bytes: Some(0),
        ..plan(Method::Align)
    };
    let r = align(m.clone(), &stream(), &tok(), &p).unwrap();
    assert_eq!(r.model, m);
    assert_eq!(r.metrics.steps, 0);
    assert!(r.metrics.losses.is_empty());
    assert_eq!(r.metrics.params_trainable, m.count_params(ParamScope::All).unwrap());
}

#[test]
fn sft_masks_prompt_tokens() {
    // Changing a masked target must not change the loss.
    let m = DecoderModel::build(tiny()).unwrap();
    let set = gen_instructions(&LangSpec::source(), 2, 0).unwrap();
    let s = set.to_stream(0);
    let r = rows(&s, &tok(), 16, LossMaskMode::ResponseOnly).unwrap();
    let b = group_rows(&r, 2).remove(0);
    let mut b2 = b.clone();
    for (t, &mk) in b2.targets.iter_mut().zip(&b.mask) {
        if !mk {
            *t = 5;
        }
    }
    let mut opt = AdamW::new(AdamWConfig::default());
    let l1 = train_step(&mut m.clone(), &b, &BTreeSet::new(), &mut opt, 0.0).unwrap();
    let l2 = train_step(&mut m.clone(), &b2, &BTreeSet::new(), &mut opt, 0.0).unwrap();
    assert_eq!(l1, l2);

    let p = TrainPlan {
        epochs: Some(2),
        max_steps: None,
        ..plan(Method::Sft)
    };
    let out = sft(m, &set, &tok(), &p).unwrap();
    assert_eq!(out.metrics.steps, 2);
}

#[test]
fn divergence_is_reported() {
    let mut cfg = tiny();
    cfg.n_layers = 1;
    let mut m = DecoderModel::build(cfg).unwrap();
    m.tensor_mut(HEAD_W).unwrap().data_mut()[0] = f32::NAN;
    let err = train_fft(m, &stream(), &tok(), &plan(Method::Fft)).unwrap_err();
    assert!(matches!(err, EloError::Divergence { step: 1, .. }), "{err}");
}

#[test]
fn plan_checks() {
    let m = DecoderModel::build(tiny()).unwrap();
    assert!(train_fft(m.clone(), &stream(), &tok(), &plan(Method::Elo)).is_err());
    let p = TrainPlan {
        seq_len: 64,
        ..plan(Method::Fft)
    };
    assert!(matches!(train_fft(m.clone(), &stream(), &tok(), &p), Err(EloError::SeqLen { .. })));
    let p = TrainPlan {
        trainable_mask: Some(BTreeSet::from(["nope".to_string()])),
        ..plan(Method::Fft)
    };
    assert!(train_model(m, &stream(), &tok(), &p).is_err());
    assert_eq!(TrainPlan::new(Method::Sft).epochs(), 10);
    assert_eq!(TrainPlan::new(Method::Elo).epochs(), 1);
}

#[test]
fn cosine_schedule_endpoints() {
    let p = TrainPlan {
        cosine: true,
        ..TrainPlan::new(Method::Fft)
    };
    assert!((p.lr_at(0, 11) - 3e-4).abs() < 1e-12);
    assert!((p.lr_at(10, 11) - 3e-5).abs() < 1e-12);
}

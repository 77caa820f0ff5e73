use elo_forge::data::{batchify, gen_corpus, LangSpec, LossMaskMode, Tokenizer};
use elo_forge::model::{forward_flops, loss_grad_check, ModelConfig};
use elo_forge::surgery::{detach_elo, LayerSelection};
use elo_forge::train::{attach_lora, LoraConfig, Trainable};
use elo_forge::DecoderModel;

/// Per-layer and head FLOPs written out term by term.
fn oracle_forward(n: u64, s: u64, d: u64, dff: u64, v: u64) -> u64 {
    let attn_proj = 4 * 2 * s * d * d;
    let scores = 2 * s * s * d;
    let mix = 2 * s * s * d;
    let ffn = 2 * 2 * s * d * dff;
    n * (attn_proj + scores + mix + ffn) + 2 * s * d * v
}

#[test]
fn reference_forward_flops() {
    let cfg = ModelConfig::reference();
    assert_eq!(forward_flops(&cfg, 16, 128), 941_621_248);
    assert_eq!(forward_flops(&cfg, 2, 128), 119_537_664);
    assert_eq!(forward_flops(&cfg, 16, 128), oracle_forward(16, 128, 128, 512, 64));
    let ratio = 941_621_248f64 / 119_537_664f64;
    assert!((ratio - 7.877).abs() / 7.877 < 1e-3);
}

#[test]
fn step_flop_identities() {
    let cfg = ModelConfig::reference();
    let m = DecoderModel::build(cfg.clone()).unwrap();
    let sub = detach_elo(&m, &LayerSelection::first_last(16).unwrap()).unwrap();
    let (b, s) = (4u64, 128usize);
    assert_eq!(m.step_flops(4, s), 3 * oracle_forward(16, 128, 128, 512, 64) * b);
    assert_eq!(sub.step_flops(4, s), 3 * oracle_forward(2, 128, 128, 512, 64) * b);
    let lora = attach_lora(m.clone(), &LoraConfig::default()).unwrap();
    // r = 8 on q and v of 16 layers: A [128, 8] and B [8, 128] each.
    assert_eq!(lora.adapter_params(), 16 * 2 * (128 * 8 + 8 * 128));
    let adapter = 16 * 2 * 2 * 128 * 8 * (128 + 128);
    assert_eq!(lora.adapter_flops(s), adapter);
    assert_eq!(lora.step_flops(4, s) - m.step_flops(4, s), 3 * adapter * b);
    assert!(lora.step_flops(4, s) > m.step_flops(4, s));
}

#[test]
fn full_model_gradient_check() {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 64,
        max_seq_len: 16,
        eps: 1e-5,
        seed: 11,
    };
    let mut m = DecoderModel::build(cfg).unwrap();
    // Larger weights than the default init so every path carries signal.
    for name in m.names().map(str::to_string).collect::<Vec<_>>() {
        let t = m.tensor_mut(&name).unwrap();
        if t.shape().len() == 2 {
            t.data_mut().iter_mut().for_each(|x| *x *= 10.0);
        }
    }
    let tok = Tokenizer::for_langs(&[&LangSpec::source(), &LangSpec::target()], 64).unwrap();
    let b = batchify(&gen_corpus(&LangSpec::source(), 2, 4).unwrap(), &tok, 2, 8, LossMaskMode::All)
        .unwrap()
        .remove(0);
    let r = loss_grad_check(&m, &b.tokens, &b.targets, &b.mask, b.batch, 1e-4, 48).unwrap();
    assert!(r.max_rel_error < 1e-5, "max rel error {}", r.max_rel_error);
    assert!(r.coords_checked > 300);
}

//! Decoder-only transformer: configuration, parameters, forward pass, and
//! parameter/FLOP accounting.
//!
//! Pre-norm blocks with RMSNorm, rotary position embeddings, a plain
//! two-matrix SiLU FFN, no biases, and an untied output head. Every tensor
//! has a canonical name (`emb.tok`, `layer.{i}.attn.q`, ..., `head.norm`,
//! `head.w`, layers 1-based); the names are the contract used by surgery and
//! checkpoints.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EloError, Result};
use crate::tensor::{grad_check, GradCheckReport, Init, RopeCache, Scalar, Tape, Tensor, Var};

pub const EMBEDDING: &str = "emb.tok";
pub const HEAD_NORM: &str = "head.norm";
pub const HEAD_W: &str = "head.w";
pub const INIT_STD: f64 = 0.02;
pub const ROPE_BASE: f64 = 10_000.0;

/// Per-layer tensor suffixes, in canonical order.
pub const LAYER_TENSORS: [&str; 8] = [
    "attn.q",
    "attn.k",
    "attn.v",
    "attn.o",
    "ffn.up",
    "ffn.down",
    "norm.attn",
    "norm.ffn",
];

pub fn layer_tensor_name(layer: usize, suffix: &str) -> String {
    format!("layer.{layer}.{suffix}")
}

/// All tensor names of 1-based layer `layer`.
pub fn layer_names(layer: usize) -> Vec<String> {
    LAYER_TENSORS.iter().map(|s| layer_tensor_name(layer, s)).collect()
}

/// Parses `layer.{i}.…` into `i`.
pub fn layer_index(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("layer.")?;
    rest.split('.').next()?.parse().ok()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// The 16-layer reference configuration used for cost comparisons.
    pub fn reference() -> Self {
        ModelConfig {
            n_layers: 16,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: 64,
            max_seq_len: 128,
            eps: 1e-5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (key, v) in dims {
            if v == 0 {
                return Err(EloError::Config(format!("model.{key} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(EloError::Config(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(EloError::Config("model head dim must be even for rotary embeddings".into()));
        }
        if !(self.eps > 0.0) {
            return Err(EloError::Config("model.eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Canonical tensor names with shapes, in canonical order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, v, f) = (self.d_model, self.vocab_size, self.d_ff);
        let mut out = vec![(EMBEDDING.to_string(), vec![v, d])];
        for i in 1..=self.n_layers {
            for suffix in LAYER_TENSORS {
                let shape = match suffix {
                    "ffn.up" => vec![d, f],
                    "ffn.down" => vec![f, d],
                    "norm.attn" | "norm.ffn" => vec![d],
                    _ => vec![d, d],
                };
                out.push((layer_tensor_name(i, suffix), shape));
            }
        }
        out.push((HEAD_NORM.to_string(), vec![d]));
        out.push((HEAD_W.to_string(), vec![d, v]));
        out
    }

    /// Closed-form parameter count: `V·d + n·(4d² + 2·d·d_ff + 2d) + (d·V + d)`.
    pub fn param_count_closed_form(&self) -> usize {
        let (d, v, f, n) = (self.d_model, self.vocab_size, self.d_ff, self.n_layers);
        v * d + n * (4 * d * d + 2 * d * f + 2 * d) + (d * v + d)
    }
}

/// Matmul FLOPs of one decoder layer over a sequence of `seq` tokens.
pub fn layer_flops(cfg: &ModelConfig, seq: usize) -> u64 {
    let (s, d, f) = (seq as u64, cfg.d_model as u64, cfg.d_ff as u64);
    8 * s * d * d + 4 * s * s * d + 4 * s * d * f
}

/// Matmul FLOPs of the output head over `seq` tokens.
pub fn head_flops(cfg: &ModelConfig, seq: usize) -> u64 {
    2 * seq as u64 * cfg.d_model as u64 * cfg.vocab_size as u64
}

/// Forward matmul FLOPs per sequence with `n_active_layers` layers
/// (multiply-add = 2 FLOPs; embedding lookups, norms, softmax excluded).
pub fn forward_flops(cfg: &ModelConfig, n_active_layers: usize, seq: usize) -> u64 {
    n_active_layers as u64 * layer_flops(cfg, seq) + head_flops(cfg, seq)
}

/// Which tensors [`DecoderModel::count_params`] counts.
#[derive(Clone, Debug)]
pub enum ParamScope<'a> {
    All,
    Names(&'a [String]),
    Set(&'a BTreeSet<String>),
    Layers(&'a [usize]),
}

#[derive(Clone, Debug)]
pub struct DecoderModel {
    config: ModelConfig,
    params: BTreeMap<String, Tensor<f32>>,
    lineage: String,
    rope: Arc<RopeCache<f32>>,
}

impl PartialEq for DecoderModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params && self.lineage == other.lineage
    }
}

impl DecoderModel {
    /// Builds a freshly initialized model: normal(0, 0.02) weights, unit
    /// norm gains, each tensor seeded by `(config.seed, name)`.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        for (name, shape) in config.tensor_shapes() {
            let init = if shape.len() == 1 {
                Init::Ones
            } else {
                Init::Normal { std: INIT_STD }
            };
            let t = Tensor::named(&shape, init, config.seed, &name)?;
            params.insert(name, t);
        }
        let mut model = DecoderModel {
            rope: Arc::new(RopeCache::new(config.head_dim(), config.max_seq_len, ROPE_BASE)?),
            config,
            params,
            lineage: String::new(),
        };
        model.lineage = model.fingerprint();
        Ok(model)
    }

    /// Reassembles a model from named tensors, validating names and shapes.
    pub fn from_parts(config: ModelConfig, params: BTreeMap<String, Tensor<f32>>, lineage: String) -> Result<Self> {
        config.validate()?;
        let expected = config.tensor_shapes();
        if expected.len() != params.len() {
            return Err(EloError::shape(format!(
                "expected {} tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            let t = params.get(name).ok_or_else(|| EloError::Name(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(EloError::shape(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(DecoderModel {
            rope: Arc::new(RopeCache::new(config.head_dim(), config.max_seq_len, ROPE_BASE)?),
            config,
            params,
            lineage,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Fingerprint of the initialization this model descends from.
    pub fn lineage(&self) -> &str {
        &self.lineage
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<f32>> {
        &mut self.params
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.params.get(name).ok_or_else(|| EloError::Name(name.to_string()))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        self.params.get_mut(name).ok_or_else(|| EloError::Name(name.to_string()))
    }

    pub fn rope(&self) -> &Arc<RopeCache<f32>> {
        &self.rope
    }

    /// SHA-256 over sorted names, shapes, and little-endian bytes.
    pub fn fingerprint(&self) -> String {
        digest_tensors(&self.params)
    }

    pub fn count_params(&self, scope: ParamScope<'_>) -> Result<usize> {
        let sum_names = |names: &mut dyn Iterator<Item = &str>| -> Result<usize> {
            let mut total = 0;
            for n in names {
                total += self.tensor(n)?.numel();
            }
            Ok(total)
        };
        match scope {
            ParamScope::All => Ok(self.params.values().map(Tensor::numel).sum()),
            ParamScope::Names(names) => sum_names(&mut names.iter().map(String::as_str)),
            ParamScope::Set(names) => sum_names(&mut names.iter().map(String::as_str)),
            ParamScope::Layers(layers) => {
                let names: Vec<String> = layers.iter().flat_map(|&i| layer_names(i)).collect();
                sum_names(&mut names.iter().map(String::as_str))
            }
        }
    }

    /// Logits `[batch, seq, vocab]` for row-major `tokens` of `batch` rows.
    pub fn forward(&self, tokens: &[usize], batch: usize) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let vars = GraphParams::register(&mut tape, &self.params, |_| false);
        let seq = check_tokens(&self.config, tokens, batch)?;
        let logits = logits_graph(&mut tape, &self.config, &self.rope, &vars, None, tokens, batch)?;
        let v = self.config.vocab_size;
        tape.value(logits).clone().reshape(&[batch, seq, v])
    }

    /// Greedy continuation of `prompt`, stopping after `stop` or `max_new` tokens.
    /// The returned tokens include `stop` if it was produced.
    pub fn generate_greedy(&self, prompt: &[usize], max_new: usize, stop: usize) -> Result<Vec<usize>> {
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        let v = self.config.vocab_size;
        for _ in 0..max_new {
            if seq.len() > self.config.max_seq_len {
                break;
            }
            let logits = self.forward(&seq, 1)?;
            let last = &logits.data()[(seq.len() - 1) * v..seq.len() * v];
            let next = argmax(last);
            out.push(next);
            if next == stop {
                break;
            }
            seq.push(next);
        }
        Ok(out)
    }
}

pub(crate) fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn digest_tensors<'a, I>(tensors: I) -> String
where
    I: IntoIterator<Item = (&'a String, &'a Tensor<f32>)>,
{
    let mut sorted: Vec<_> = tensors.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let mut h = Sha256::new();
    for (name, t) in sorted {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &x in t.data() {
            h.update(x.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

/// Validates a flattened token batch; returns the sequence length.
pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[usize], batch: usize) -> Result<usize> {
    if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
        return Err(EloError::shape(format!(
            "{} tokens cannot form {batch} equal rows",
            tokens.len()
        )));
    }
    let seq = tokens.len() / batch;
    if seq > cfg.max_seq_len {
        return Err(EloError::SeqLen {
            len: seq,
            max: cfg.max_seq_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(EloError::Index {
            index: bad,
            bound: cfg.vocab_size,
        });
    }
    Ok(seq)
}

/// Name → tape variable map for one forward graph.
pub struct GraphParams {
    vars: HashMap<String, Var>,
}

impl GraphParams {
    pub fn register<'a, T, I, F>(tape: &mut Tape<T>, params: I, requires_grad: F) -> Self
    where
        T: Scalar,
        I: IntoIterator<Item = (&'a String, &'a Tensor<T>)>,
        F: Fn(&str) -> bool,
    {
        let vars = params
            .into_iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), requires_grad(name))))
            .collect();
        GraphParams { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| EloError::Name(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Central-difference check of the masked cross-entropy gradient with
/// respect to every tensor of `model`, evaluated in f64.
pub fn loss_grad_check(
    model: &DecoderModel,
    tokens: &[usize],
    targets: &[usize],
    mask: &[bool],
    batch: usize,
    h: f64,
    per_tensor: usize,
) -> Result<GradCheckReport> {
    let cfg = model.config();
    let names: Vec<String> = model.params.keys().cloned().collect();
    let values: Vec<Tensor<f64>> = model.params.values().map(Tensor::cast).collect();
    let rope = Arc::new(RopeCache::<f64>::new(cfg.head_dim(), cfg.max_seq_len, ROPE_BASE)?);
    let f = |tape: &mut Tape<f64>, vars: &[Var]| {
        let gp = GraphParams {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        };
        let logits = logits_graph(tape, cfg, &rope, &gp, None, tokens, batch)?;
        tape.cross_entropy(logits, targets, mask)
    };
    // The tolerance only sets `passed`; callers compare `max_rel_error`.
    grad_check(f, &values, h, 1e-5, per_tensor)
}

/// Low-rank adapters to splice into a forward graph: target weight name →
/// `(A, B)` variables, all sharing one scaling factor.
pub struct AdapterVars<T> {
    pub scale: T,
    pub pairs: HashMap<String, (Var, Var)>,
}

fn project<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    vars: &GraphParams,
    adapters: Option<&AdapterVars<T>>,
    name: &str,
) -> Result<Var> {
    let base = tape.matmul(x, vars.get(name)?)?;
    match adapters.and_then(|a| a.pairs.get(name).map(|p| (a.scale, *p))) {
        Some((scale, (a, b))) => {
            let xa = tape.matmul(x, a)?;
            let xab = tape.matmul(xa, b)?;
            let scaled = tape.scale(xab, scale);
            tape.add(base, scaled)
        }
        None => Ok(base),
    }
}

/// Records the full forward pass on `tape`; returns logits `[batch*seq, vocab]`.
pub fn logits_graph<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    rope: &Arc<RopeCache<T>>,
    vars: &GraphParams,
    adapters: Option<&AdapterVars<T>>,
    tokens: &[usize],
    batch: usize,
) -> Result<Var> {
    let seq = check_tokens(cfg, tokens, batch)?;
    let heads = cfg.n_heads;
    let mut x = tape.embedding(vars.get(EMBEDDING)?, tokens)?;
    for i in 1..=cfg.n_layers {
        let n = |s: &str| layer_tensor_name(i, s);
        let h = tape.rms_norm(x, vars.get(&n("norm.attn"))?, cfg.eps)?;
        let q = project(tape, h, vars, adapters, &n("attn.q"))?;
        let k = project(tape, h, vars, adapters, &n("attn.k"))?;
        let v = project(tape, h, vars, adapters, &n("attn.v"))?;
        let q = tape.rope(q, seq, heads, rope)?;
        let k = tape.rope(k, seq, heads, rope)?;
        let a = tape.causal_attention(q, k, v, batch, seq, heads)?;
        let o = project(tape, a, vars, adapters, &n("attn.o"))?;
        x = tape.add(x, o)?;
        let h = tape.rms_norm(x, vars.get(&n("norm.ffn"))?, cfg.eps)?;
        let up = project(tape, h, vars, adapters, &n("ffn.up"))?;
        let act = tape.silu(up);
        let down = project(tape, act, vars, adapters, &n("ffn.down"))?;
        x = tape.add(x, down)?;
    }
    let h = tape.rms_norm(x, vars.get(HEAD_NORM)?, cfg.eps)?;
    tape.matmul(h, vars.get(HEAD_W)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 16,
            max_seq_len: 12,
            eps: 1e-5,
            seed: 3,
        }
    }

    fn enumerate_shapes(cfg: &ModelConfig) -> usize {
        cfg.tensor_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    #[test]
    fn build_is_deterministic() {
        let a = DecoderModel::build(tiny()).unwrap();
        let b = DecoderModel::build(tiny()).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.lineage(), a.fingerprint());
    }

    #[test]
    fn structure_and_names() {
        let m = DecoderModel::build(tiny()).unwrap();
        let layers: BTreeSet<usize> = m.names().filter_map(layer_index).collect();
        assert_eq!(layers, BTreeSet::from([1, 2]));
        assert!(m.tensor("layer.1.attn.q").is_ok());
        assert!(m.tensor("layer.2.ffn.down").is_ok());
        assert!(m.tensor("layer.3.attn.q").is_err());
        assert_ne!(m.tensor(EMBEDDING).unwrap().data(), m.tensor(HEAD_W).unwrap().data());
        assert!(m.tensor("layer.1.norm.attn").unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn reference_param_count() {
        let cfg = ModelConfig::reference();
        assert_eq!(enumerate_shapes(&cfg), 3_166_336);
        assert_eq!(cfg.param_count_closed_form(), 3_166_336);
        let m = DecoderModel::build(cfg).unwrap();
        assert_eq!(m.count_params(ParamScope::All).unwrap(), 3_166_336);
        assert_eq!(m.count_params(ParamScope::Layers(&[1, 16])).unwrap(), 393_728);
        assert_eq!(m.count_params(ParamScope::Names(&[])).unwrap(), 0);
        let bad = vec!["layer.99.attn.q".to_string()];
        assert!(matches!(m.count_params(ParamScope::Names(&bad)), Err(EloError::Name(_))));
    }

    #[test]
    fn reference_flops() {
        let cfg = ModelConfig::reference();
        // independent evaluation of the closed form
        let (s, d, f, v) = (128u64, 128u64, 512u64, 64u64);
        let cl = 8 * s * d * d + 4 * s * s * d + 4 * s * d * f;
        assert_eq!(cl, 58_720_256);
        assert_eq!(layer_flops(&cfg, 128), cl);
        assert_eq!(head_flops(&cfg, 128), 2 * s * d * v);
        assert_eq!(head_flops(&cfg, 128), 2_097_152);
        assert_eq!(forward_flops(&cfg, 16, 128), 941_621_248);
        assert_eq!(forward_flops(&cfg, 2, 128), 119_537_664);
        assert_eq!(forward_flops(&cfg, 0, 128), 2_097_152);
        let ratio = 941_621_248f64 / 119_537_664f64;
        assert!((ratio - 7.877).abs() < 1e-3);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.n_heads = 3;
        assert!(matches!(DecoderModel::build(c), Err(EloError::Config(_))));
        let mut c = tiny();
        c.d_ff = 0;
        assert!(matches!(DecoderModel::build(c), Err(EloError::Config(_))));
    }

    #[test]
    fn forward_shapes_and_errors() {
        let m = DecoderModel::build(tiny()).unwrap();
        let logits = m.forward(&[1, 2, 3, 4, 5, 6], 2).unwrap();
        assert_eq!(logits.shape(), &[2, 3, 16]);
        assert!(matches!(m.forward(&[0; 13], 1), Err(EloError::SeqLen { .. })));
        assert!(matches!(m.forward(&[16], 1), Err(EloError::Index { .. })));
    }

    #[test]
    fn identical_rows_give_identical_logits() {
        let m = DecoderModel::build(tiny()).unwrap();
        let row = [3usize, 1, 4, 1, 5];
        let tokens: Vec<usize> = row.iter().chain(row.iter()).copied().collect();
        let logits = m.forward(&tokens, 2).unwrap();
        let half = logits.numel() / 2;
        assert_eq!(logits.data()[..half], logits.data()[half..]);
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut m = DecoderModel::build(tiny()).unwrap();
        m.tensor_mut(HEAD_W).unwrap().data_mut().fill(0.0);
        let logits = m.forward(&[1, 2, 3], 1).unwrap();
        assert!(logits.data().iter().all(|&x| x == 0.0));
    }
}

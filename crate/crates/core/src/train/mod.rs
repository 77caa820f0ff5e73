//! Training loops. Every method goes through [`train_step`], which registers
//! the model on a fresh tape, marks only the trainable-mask tensors as
//! requiring gradients, and applies AdamW to exactly those tensors.

mod lora;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{group_rows, rows, DocStream, InstructionSet, LossMaskMode, Tokenizer};
use crate::data::Batch;
use crate::error::{EloError, Result};
use crate::model::{forward_flops, logits_graph, AdapterVars, DecoderModel, GraphParams, ParamScope};
use crate::surgery::EloSubModel;
use crate::tensor::{rng, AdamW, AdamWConfig, Tape, Tensor};

pub use lora::{adapter_name, attach_lora, merge_lora, LoraConfig, LoraModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fft,
    Elo,
    Lora,
    Align,
    Sft,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Fft, Method::Elo, Method::Lora, Method::Align, Method::Sft];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fft => "fft",
            Method::Elo => "elo",
            Method::Lora => "lora",
            Method::Align => "align",
            Method::Sft => "sft",
        }
    }

    /// 10 epochs for SFT, one pass otherwise.
    pub fn default_epochs(self) -> usize {
        if self == Method::Sft {
            10
        } else {
            1
        }
    }

    pub fn loss_mask_mode(self) -> LossMaskMode {
        if self == Method::Sft {
            LossMaskMode::ResponseOnly
        } else {
            LossMaskMode::All
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = EloError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| EloError::Config(format!("unknown method `{s}`")))
    }
}

fn default_batch() -> usize {
    4
}

fn default_seq_len() -> usize {
    128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub method: Method,
    #[serde(default)]
    pub optim: AdamWConfig,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    /// Passes over the stream; `None` means the method default.
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Leading bytes of the stream to use; `None` uses all of it.
    #[serde(default)]
    pub budget_bytes: Option<usize>,
    /// Overrides the method's default trainable set.
    #[serde(default)]
    pub trainable_mask: Option<BTreeSet<String>>,
    #[serde(default)]
    pub seed: u64,
    /// Print a progress line to stderr every `log_every` steps (0 = quiet).
    #[serde(default)]
    pub log_every: usize,
    /// Cosine decay of the learning rate to 10% over the run.
    #[serde(default)]
    pub cosine: bool,
}

impl TrainPlan {
    pub fn new(method: Method) -> Self {
        TrainPlan {
            method,
            optim: AdamWConfig::default(),
            batch: default_batch(),
            seq_len: default_seq_len(),
            epochs: None,
            max_steps: None,
            budget_bytes: None,
            trainable_mask: None,
            seed: 0,
            log_every: 0,
            cosine: false,
        }
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or_else(|| self.method.default_epochs())
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        let lr = self.optim.lr;
        if !self.cosine || total <= 1 {
            return lr;
        }
        let p = step as f64 / (total - 1) as f64;
        lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
    }

    fn expect(&self, method: Method) -> Result<()> {
        if self.method != method {
            return Err(EloError::Config(format!(
                "plan is for `{}` but `{method}` was requested",
                self.method
            )));
        }
        Ok(())
    }
}

/// Anything the step engine can train: a model, an ELO sub-model, or a
/// model with low-rank adapters.
pub trait Trainable {
    fn model(&self) -> &DecoderModel;

    /// Every tensor entering the forward graph.
    fn tensors(&self) -> Vec<(&String, &Tensor<f32>)>;

    fn tensors_mut(&mut self) -> Vec<(&String, &mut Tensor<f32>)>;

    /// `(scale, [(target weight, A name, B name)])` for adapter models.
    fn adapter_layout(&self) -> Option<(f32, Vec<(String, String, String)>)> {
        None
    }

    fn default_mask(&self) -> BTreeSet<String>;

    /// Training FLOPs of one step.
    fn step_flops(&self, batch: usize, seq: usize) -> u64;
}

impl Trainable for DecoderModel {
    fn model(&self) -> &DecoderModel {
        self
    }

    fn tensors(&self) -> Vec<(&String, &Tensor<f32>)> {
        self.params().iter().collect()
    }

    fn tensors_mut(&mut self) -> Vec<(&String, &mut Tensor<f32>)> {
        self.params_mut().iter_mut().collect()
    }

    fn default_mask(&self) -> BTreeSet<String> {
        self.names().map(str::to_string).collect()
    }

    fn step_flops(&self, batch: usize, seq: usize) -> u64 {
        3 * forward_flops(self.config(), self.config().n_layers, seq) * batch as u64
    }
}

impl Trainable for EloSubModel {
    fn model(&self) -> &DecoderModel {
        EloSubModel::model(self)
    }

    fn tensors(&self) -> Vec<(&String, &Tensor<f32>)> {
        EloSubModel::model(self).tensors()
    }

    fn tensors_mut(&mut self) -> Vec<(&String, &mut Tensor<f32>)> {
        self.model_mut().tensors_mut()
    }

    fn default_mask(&self) -> BTreeSet<String> {
        self.trainable_names()
    }

    fn step_flops(&self, batch: usize, seq: usize) -> u64 {
        EloSubModel::model(self).step_flops(batch, seq)
    }
}

/// Loss, one backward pass and one AdamW update restricted to `mask`.
pub fn train_step<M: Trainable + ?Sized>(
    m: &mut M,
    batch: &Batch,
    mask: &BTreeSet<String>,
    opt: &mut AdamW,
    lr: f64,
) -> Result<f64> {
    let cfg = m.model().config().clone();
    let mut tape = Tape::new();
    let vars = GraphParams::register(&mut tape, m.tensors(), |n| mask.contains(n));
    let adapters = match m.adapter_layout() {
        Some((scale, layout)) => {
            let mut pairs = std::collections::HashMap::new();
            for (target, a, b) in layout {
                pairs.insert(target, (vars.get(&a)?, vars.get(&b)?));
            }
            Some(AdapterVars { scale, pairs })
        }
        None => None,
    };
    let logits = logits_graph(
        &mut tape,
        &cfg,
        m.model().rope(),
        &vars,
        adapters.as_ref(),
        &batch.tokens,
        batch.batch,
    )?;
    let loss_var = tape.cross_entropy(logits, &batch.targets, &batch.mask)?;
    let loss = tape.value(loss_var).data()[0] as f64;
    if !loss.is_finite() {
        return Err(EloError::Divergence {
            phase: String::new(),
            step: opt.steps() as usize + 1,
            loss,
        });
    }
    if mask.is_empty() {
        return Ok(loss);
    }
    tape.backward(loss_var)?;
    let mut grads = BTreeMap::new();
    for name in mask {
        let v = vars.get(name)?;
        let g = tape
            .take_grad(v)
            .unwrap_or_else(|| vec![0.0; tape.value(v).numel()]);
        grads.insert(name.as_str(), g);
    }
    drop(tape);
    let mut tensors = m.tensors_mut();
    let updates = tensors
        .iter_mut()
        .filter_map(|(n, t)| grads.get(n.as_str()).map(|g| (n.as_str(), t.data_mut(), g.as_slice())));
    opt.step(lr, updates)?;
    Ok(loss)
}

/// Per-phase training summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub phase: String,
    pub method: Method,
    pub steps: usize,
    pub wall_seconds: f64,
    pub step_flops: u64,
    pub tokens_per_second: f64,
    pub params_total: usize,
    pub params_trainable: usize,
    /// Weights plus both Adam moments of the trainable set, in bytes.
    pub state_bytes_proxy: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub data_bytes: usize,
    pub losses: Vec<f64>,
    pub step_wall_ms: Vec<f64>,
}

impl PhaseMetrics {
    fn new<M: Trainable + ?Sized>(m: &M, plan: &TrainPlan, mask: &BTreeSet<String>, data_bytes: usize) -> Result<Self> {
        let total: usize = m.tensors().iter().map(|(_, t)| t.numel()).sum();
        let trainable: usize = m
            .tensors()
            .iter()
            .filter(|(n, _)| mask.contains(*n))
            .map(|(_, t)| t.numel())
            .sum();
        Ok(PhaseMetrics {
            phase: plan.method.to_string(),
            method: plan.method,
            steps: 0,
            wall_seconds: 0.0,
            step_flops: m.step_flops(plan.batch, plan.seq_len),
            tokens_per_second: 0.0,
            params_total: total,
            params_trainable: trainable,
            state_bytes_proxy: 4 * 3 * trainable,
            batch: plan.batch,
            seq_len: plan.seq_len,
            seed: plan.seed,
            data_bytes,
            losses: Vec::new(),
            step_wall_ms: Vec::new(),
        })
    }

    pub fn total_flops(&self) -> u128 {
        self.step_flops as u128 * self.steps as u128
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    /// `step \t loss \t wall_ms \t flops` per step, with a header line.
    pub fn step_log_tsv(&self) -> String {
        let mut s = String::from("step\tloss\twall_ms\tflops\n");
        for (i, (l, w)) in self.losses.iter().zip(&self.step_wall_ms).enumerate() {
            s.push_str(&format!("{}\t{l:.9}\t{w:.3}\t{}\n", i + 1, self.step_flops));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainedResult<M> {
    pub model: M,
    pub metrics: PhaseMetrics,
}

fn check_mask<M: Trainable + ?Sized>(m: &M, mask: &BTreeSet<String>) -> Result<()> {
    let names: BTreeSet<&String> = m.tensors().into_iter().map(|(n, _)| n).collect();
    match mask.iter().find(|n| !names.contains(n)) {
        Some(n) => Err(EloError::Name(n.clone())),
        None => Ok(()),
    }
}

fn frozen_snapshot<M: Trainable + ?Sized>(m: &M, mask: &BTreeSet<String>) -> Vec<(String, Tensor<f32>)> {
    m.tensors()
        .into_iter()
        .filter(|(n, _)| !mask.contains(*n))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect()
}

fn assert_frozen<M: Trainable + ?Sized>(m: &M, snapshot: &[(String, Tensor<f32>)], step: usize) {
    let now: BTreeMap<&String, &Tensor<f32>> = m.tensors().into_iter().collect();
    for (name, before) in snapshot {
        let after = now[name];
        let same = before.shape() == after.shape()
            && before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "frozen tensor `{name}` changed at step {step}");
    }
}

/// Generic loop: shuffled epochs over the rows of `stream`, one
/// [`train_step`] per batch. Frozen tensors are checked bitwise after each
/// step when debug assertions are on, outside the timed region.
pub fn run<M: Trainable + ?Sized>(
    m: &mut M,
    stream: &DocStream,
    tok: &Tokenizer,
    plan: &TrainPlan,
    mask: &BTreeSet<String>,
) -> Result<PhaseMetrics> {
    let cfg = m.model().config();
    if plan.batch == 0 || plan.seq_len == 0 {
        return Err(EloError::Config("batch and seq_len must be >= 1".into()));
    }
    if plan.seq_len > cfg.max_seq_len {
        return Err(EloError::SeqLen {
            len: plan.seq_len,
            max: cfg.max_seq_len,
        });
    }
    if tok.vocab_size() > cfg.vocab_size {
        return Err(EloError::Config(format!(
            "tokenizer needs {} ids but the model has vocab_size {}",
            tok.vocab_size(),
            cfg.vocab_size
        )));
    }
    check_mask(m, mask)?;
    let stream = match plan.budget_bytes {
        Some(b) => stream.take_bytes(b),
        None => stream.clone(),
    };
    let mut metrics = PhaseMetrics::new(m, plan, mask, stream.total_bytes())?;
    let rows = rows(&stream, tok, plan.seq_len, plan.method.loss_mask_mode())?;
    let epochs = plan.epochs();
    let per_epoch = rows.len().div_ceil(plan.batch);
    let total = (per_epoch * epochs).min(plan.max_steps.unwrap_or(usize::MAX));
    let snapshot = if cfg!(debug_assertions) {
        frozen_snapshot(m, mask)
    } else {
        Vec::new()
    };
    let mut opt = AdamW::new(plan.optim);
    let mut step = 0;
    'epochs: for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.shuffle(&mut rng::named_stream(plan.seed, &format!("epoch/{epoch}")));
        let shuffled: Vec<_> = order.into_iter().map(|i| rows[i].clone()).collect();
        for batch in group_rows(&shuffled, plan.batch) {
            if step >= total {
                break 'epochs;
            }
            if batch.unmasked() == 0 {
                continue;
            }
            let lr = plan.lr_at(step, total);
            let t0 = Instant::now();
            let loss = train_step(m, &batch, mask, &mut opt, lr).map_err(|e| match e {
                EloError::Divergence { loss, .. } => EloError::Divergence {
                    phase: metrics.phase.clone(),
                    step: step + 1,
                    loss,
                },
                other => other,
            })?;
            let dt = t0.elapsed().as_secs_f64();
            step += 1;
            metrics.losses.push(loss);
            metrics.step_wall_ms.push(dt * 1e3);
            metrics.wall_seconds += dt;
            if cfg!(debug_assertions) {
                assert_frozen(m, &snapshot, step);
            }
            if plan.log_every > 0 && step % plan.log_every == 0 {
                eprintln!("[{}] step {step}/{total} loss {loss:.4} ({:.1} ms)", metrics.phase, dt * 1e3);
            }
        }
    }
    metrics.steps = step;
    if metrics.wall_seconds > 0.0 {
        metrics.tokens_per_second = (step * plan.batch * plan.seq_len) as f64 / metrics.wall_seconds;
    }
    Ok(metrics)
}

fn resolve_mask<M: Trainable + ?Sized>(m: &M, plan: &TrainPlan) -> BTreeSet<String> {
    plan.trainable_mask.clone().unwrap_or_else(|| m.default_mask())
}

fn require_mask(given: &Option<BTreeSet<String>>, expected: &BTreeSet<String>, method: Method) -> Result<()> {
    match given {
        Some(g) if g != expected => Err(EloError::Config(format!(
            "`{method}` trains a fixed tensor set; trainable_mask must be omitted or match it"
        ))),
        _ => Ok(()),
    }
}

/// Trains `model` with the plan's mask (all tensors by default). Any method.
pub fn train_model(mut model: DecoderModel, stream: &DocStream, tok: &Tokenizer, plan: &TrainPlan) -> Result<TrainedResult<DecoderModel>> {
    let mask = resolve_mask(&model, plan);
    let metrics = run(&mut model, stream, tok, plan, &mask)?;
    Ok(TrainedResult { model, metrics })
}

/// Full fine-tuning: every tensor is trainable.
pub fn train_fft(model: DecoderModel, stream: &DocStream, tok: &Tokenizer, plan: &TrainPlan) -> Result<TrainedResult<DecoderModel>> {
    plan.expect(Method::Fft)?;
    require_mask(&plan.trainable_mask, &model.default_mask(), Method::Fft)?;
    train_model(model, stream, tok, plan)
}

/// Trains only the selected layers of the sub-model (plus embedding and
/// head when the sub-model allows it).
pub fn train_elo(mut sub: EloSubModel, stream: &DocStream, tok: &Tokenizer, plan: &TrainPlan) -> Result<TrainedResult<EloSubModel>> {
    plan.expect(Method::Elo)?;
    let mask = sub.trainable_names();
    require_mask(&plan.trainable_mask, &mask, Method::Elo)?;
    let metrics = run(&mut sub, stream, tok, plan, &mask)?;
    Ok(TrainedResult { model: sub, metrics })
}

/// Trains the adapters only; base weights stay bitwise fixed.
pub fn train_lora(mut lm: LoraModel, stream: &DocStream, tok: &Tokenizer, plan: &TrainPlan) -> Result<TrainedResult<LoraModel>> {
    plan.expect(Method::Lora)?;
    if lm.is_merged() {
        return Err(EloError::Merge("adapters were already merged".into()));
    }
    let mask = lm.default_mask();
    require_mask(&plan.trainable_mask, &mask, Method::Lora)?;
    let metrics = run(&mut lm, stream, tok, plan, &mask)?;
    Ok(TrainedResult { model: lm, metrics })
}

/// Brief full fine-tuning of a model after layer replacement. A zero byte
/// budget returns the model unchanged with empty metrics.
pub fn align(model: DecoderModel, stream: &DocStream, tok: &Tokenizer, plan: &TrainPlan) -> Result<TrainedResult<DecoderModel>> {
    plan.expect(Method::Align)?;
    let mask = model.default_mask();
    require_mask(&plan.trainable_mask, &mask, Method::Align)?;
    if plan.budget_bytes == Some(0) {
        let metrics = PhaseMetrics::new(&model, plan, &mask, 0)?;
        return Ok(TrainedResult { model, metrics });
    }
    train_model(model, stream, tok, plan)
}

/// Supervised fine-tuning on prompt/response pairs; loss on responses only.
pub fn sft(model: DecoderModel, instructions: &InstructionSet, tok: &Tokenizer, plan: &TrainPlan) -> Result<TrainedResult<DecoderModel>> {
    plan.expect(Method::Sft)?;
    if instructions.is_empty() {
        return Err(EloError::EmptyData("instruction set is empty".into()));
    }
    train_model(model, &instructions.to_stream(plan.seed), tok, plan)
}

/// Trainable parameter count of a method on `model` with `plan`'s defaults.
pub fn trainable_params(model: &DecoderModel, mask: &BTreeSet<String>) -> Result<usize> {
    model.count_params(ParamScope::Set(mask))
}

#[cfg(test)]
mod tests;

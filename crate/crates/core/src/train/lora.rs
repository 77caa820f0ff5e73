//! Low-rank adapters on selected weight matrices of every layer.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::Trainable;
use crate::error::{EloError, Result};
use crate::model::{forward_flops, layer_tensor_name, logits_graph, AdapterVars, DecoderModel, GraphParams, LAYER_TENSORS};
use crate::tensor::{Init, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Per-layer weight suffixes, e.g. `attn.q`.
    pub targets: Vec<String>,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 16.0,
            targets: vec!["attn.q".into(), "attn.v".into()],
            seed: 0,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(EloError::Config("lora rank must be >= 1".into()));
        }
        if self.targets.is_empty() {
            return Err(EloError::Config("lora needs at least one target".into()));
        }
        for t in &self.targets {
            if !LAYER_TENSORS.contains(&t.as_str()) || t.starts_with("norm.") {
                return Err(EloError::Name(t.clone()));
            }
        }
        Ok(())
    }
}

/// `lora.<weight>.a` / `lora.<weight>.b`.
pub fn adapter_name(weight: &str, part: char) -> String {
    format!("lora.{weight}.{part}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraModel {
    base: DecoderModel,
    config: LoraConfig,
    adapters: BTreeMap<String, Tensor<f32>>,
    /// Full names of the adapted weights.
    targets: Vec<String>,
    merged: bool,
}

/// Wraps `model` with `A ~ normal(0, 1/r)` and `B = 0` on every target.
pub fn attach_lora(model: DecoderModel, cfg: &LoraConfig) -> Result<LoraModel> {
    cfg.validate()?;
    let r = cfg.rank;
    let mut adapters = BTreeMap::new();
    let mut targets = Vec::new();
    for i in 1..=model.config().n_layers {
        for suffix in &cfg.targets {
            let w = layer_tensor_name(i, suffix);
            let shape = model.tensor(&w)?.shape().to_vec();
            let (d_in, d_out) = (shape[0], shape[1]);
            let a_name = adapter_name(&w, 'a');
            let a = Tensor::named(&[d_in, r], Init::Normal { std: 1.0 / r as f64 }, cfg.seed, &a_name)?;
            adapters.insert(a_name, a);
            adapters.insert(adapter_name(&w, 'b'), Tensor::zeros(&[r, d_out])?);
            targets.push(w);
        }
    }
    Ok(LoraModel {
        base: model,
        config: cfg.clone(),
        adapters,
        targets,
        merged: false,
    })
}

impl LoraModel {
    pub fn base(&self) -> &DecoderModel {
        &self.base
    }

    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn adapters(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.adapters
    }

    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn adapter_params(&self) -> usize {
        self.adapters.values().map(Tensor::numel).sum()
    }

    /// Forward FLOPs of the adapter path for one sequence of `seq` tokens:
    /// `2·s·r·(d_in + d_out)` per target.
    pub fn adapter_flops(&self, seq: usize) -> u64 {
        let r = self.config.rank as u64;
        self.targets
            .iter()
            .map(|w| {
                let s = self.base.tensor(w).expect("target exists").shape();
                2 * seq as u64 * r * (s[0] + s[1]) as u64
            })
            .sum()
    }

    /// Logits `[batch, seq, vocab]` with the adapters applied (unless merged).
    pub fn forward(&self, tokens: &[usize], batch: usize) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let vars = GraphParams::register(&mut tape, self.tensors(), |_| false);
        let adapters = match self.adapter_layout() {
            Some((scale, layout)) => {
                let mut pairs = std::collections::HashMap::new();
                for (t, a, b) in layout {
                    pairs.insert(t, (vars.get(&a)?, vars.get(&b)?));
                }
                Some(AdapterVars { scale, pairs })
            }
            None => None,
        };
        let cfg = self.base.config();
        let logits = logits_graph(&mut tape, cfg, self.base.rope(), &vars, adapters.as_ref(), tokens, batch)?;
        let seq = tokens.len() / batch;
        tape.value(logits).clone().reshape(&[batch, seq, cfg.vocab_size])
    }

    /// Folds `W += (alpha/r)·A·B` into the base weights. Fails if called twice.
    pub fn merge(&mut self) -> Result<()> {
        if self.merged {
            return Err(EloError::Merge("adapters were already merged".into()));
        }
        let scale = self.config.scale() as f32;
        for w in &self.targets {
            let a = &self.adapters[&adapter_name(w, 'a')];
            let b = &self.adapters[&adapter_name(w, 'b')];
            let ab = a.matmul(b)?;
            let dst = self.base.tensor_mut(w)?;
            for (x, d) in dst.data_mut().iter_mut().zip(ab.data()) {
                *x += scale * d;
            }
        }
        self.merged = true;
        Ok(())
    }

    /// Merged base model; errors if the adapters were merged before.
    pub fn into_merged(mut self) -> Result<DecoderModel> {
        self.merge()?;
        Ok(self.base)
    }
}

/// Folds the adapters into the base model.
pub fn merge_lora(lm: LoraModel) -> Result<DecoderModel> {
    lm.into_merged()
}

impl Trainable for LoraModel {
    fn model(&self) -> &DecoderModel {
        &self.base
    }

    fn tensors(&self) -> Vec<(&String, &Tensor<f32>)> {
        self.base.params().iter().chain(&self.adapters).collect()
    }

    fn tensors_mut(&mut self) -> Vec<(&String, &mut Tensor<f32>)> {
        self.base.params_mut().iter_mut().chain(self.adapters.iter_mut()).collect()
    }

    fn adapter_layout(&self) -> Option<(f32, Vec<(String, String, String)>)> {
        if self.merged {
            return None;
        }
        let layout = self
            .targets
            .iter()
            .map(|w| (w.clone(), adapter_name(w, 'a'), adapter_name(w, 'b')))
            .collect();
        Some((self.config.scale() as f32, layout))
    }

    fn default_mask(&self) -> BTreeSet<String> {
        self.adapters.keys().cloned().collect()
    }

    fn step_flops(&self, batch: usize, seq: usize) -> u64 {
        let cfg = self.base.config();
        3 * (forward_flops(cfg, cfg.n_layers, seq) + self.adapter_flops(seq)) * batch as u64
    }
}

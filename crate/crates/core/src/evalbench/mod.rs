//! Evaluation, benchmarking and ablations.

mod ablate;
mod bench;
mod table;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{batchify, DocStream, InstructionSet, LossMaskMode, Tokenizer, BOS, EOS};
use crate::error::{EloError, Result};
use crate::model::DecoderModel;
use crate::train::PhaseMetrics;

pub use ablate::{ablate_align_budget, ablate_layers, AblationReport, BudgetRow, SelectionRow};
pub use bench::{bench_method, speedup_report, BenchResult, BenchSpec, SpeedupReport, SpeedupRow};
pub use table::Table;

/// `exp(mean NLL)` over every unmasked target, accumulated in f64.
///
/// Computed as `2^(mean bits per token)` so that a uniform predictor over
/// `V` ids scores exactly `V`.
pub fn perplexity(model: &DecoderModel, stream: &DocStream, tok: &Tokenizer, batch: usize, seq_len: usize) -> Result<f64> {
    let v = model.config().vocab_size;
    let mut bits = 0.0f64;
    let mut count = 0usize;
    for b in batchify(stream, tok, batch, seq_len, LossMaskMode::All)? {
        let logits = model.forward(&b.tokens, b.batch)?;
        for (pos, row) in logits.data().chunks_exact(v).enumerate() {
            if !b.mask[pos] {
                continue;
            }
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x as f64));
            let z: f64 = row.iter().map(|&x| (x as f64 - m).exp()).sum();
            bits += z.log2() + (m - row[b.targets[pos]] as f64) * std::f64::consts::LOG2_E;
            count += 1;
        }
    }
    if count == 0 {
        return Err(EloError::EmptyData("no unmasked positions to score".into()));
    }
    Ok((bits / count as f64).exp2())
}

/// Per-language fraction of exact matches; a prediction matches when it
/// equals the reference response byte for byte.
pub fn score_predictions(set: &InstructionSet, predictions: &[Option<Vec<u8>>]) -> Result<BTreeMap<String, f64>> {
    if predictions.len() != set.len() {
        return Err(EloError::shape(format!(
            "{} predictions for {} instructions",
            predictions.len(),
            set.len()
        )));
    }
    let mut hits: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (inst, pred) in set.items.iter().zip(predictions) {
        let e = hits.entry(inst.lang.clone()).or_default();
        e.1 += 1;
        if pred.as_deref() == Some(inst.response.as_slice()) {
            e.0 += 1;
        }
    }
    Ok(hits.into_iter().map(|(k, (h, n))| (k, h as f64 / n as f64)).collect())
}

/// Greedy decode of one prompt. Returns the response bytes if EOS was
/// produced within `response_len + 1 + slack` new tokens.
pub fn decode_response(model: &DecoderModel, tok: &Tokenizer, prompt: &[u8], window: usize) -> Result<Option<Vec<u8>>> {
    let mut ids = vec![BOS];
    ids.extend(tok.encode(prompt)?);
    let out = model.generate_greedy(&ids, window, EOS)?;
    match out.split_last() {
        Some((&EOS, body)) => Ok(Some(tok.decode(body))),
        _ => Ok(None),
    }
}

/// Exact-match accuracy per language with greedy decoding. Each response
/// must be followed by EOS within `len + 1 + slack` generated tokens, which
/// makes accuracy non-decreasing in `slack`.
pub fn instruction_accuracy(
    model: &DecoderModel,
    set: &InstructionSet,
    tok: &Tokenizer,
    slack: usize,
) -> Result<BTreeMap<String, f64>> {
    let preds = set
        .items
        .iter()
        .map(|i| decode_response(model, tok, &i.prompt, i.response.len() + 1 + slack))
        .collect::<Result<Vec<_>>>()?;
    score_predictions(set, &preds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub model: String,
    pub lang: String,
    pub perplexity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyEntry {
    pub model: String,
    pub lang: String,
    pub accuracy: f64,
}

/// A ratio that keeps both operands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub name: String,
    pub numerator: f64,
    pub denominator: f64,
    pub value: f64,
}

impl Ratio {
    pub fn new(name: impl Into<String>, numerator: f64, denominator: f64) -> Self {
        Ratio {
            name: name.into(),
            numerator,
            denominator,
            value: numerator / denominator,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub phases: Vec<PhaseMetrics>,
    pub evals: Vec<EvalEntry>,
    pub accuracy: Vec<AccuracyEntry>,
    pub ratios: Vec<Ratio>,
}

impl MetricsReport {
    pub fn perplexity(&self, model: &str, lang: &str) -> Option<f64> {
        self.evals
            .iter()
            .find(|e| e.model == model && e.lang == lang)
            .map(|e| e.perplexity)
    }

    pub fn accuracy_of(&self, model: &str, lang: &str) -> Option<f64> {
        self.accuracy
            .iter()
            .find(|e| e.model == model && e.lang == lang)
            .map(|e| e.accuracy)
    }

    pub fn phase(&self, phase: &str) -> Option<&PhaseMetrics> {
        self.phases.iter().find(|p| p.phase == phase)
    }

    pub fn phase_table(&self) -> Table {
        let mut t = Table::new(&[
            "phase",
            "method",
            "steps",
            "wall_s",
            "step_flops",
            "tokens_per_s",
            "params_total",
            "params_trainable",
            "final_loss",
        ]);
        for p in &self.phases {
            t.push(vec![
                p.phase.clone(),
                p.method.to_string(),
                p.steps.to_string(),
                format!("{:.3}", p.wall_seconds),
                p.step_flops.to_string(),
                format!("{:.0}", p.tokens_per_second),
                p.params_total.to_string(),
                p.params_trainable.to_string(),
                p.final_loss().map_or("-".into(), |l| format!("{l:.4}")),
            ]);
        }
        t
    }

    pub fn eval_table(&self) -> Table {
        let mut t = Table::new(&["model", "lang", "metric", "value"]);
        for e in &self.evals {
            t.push(vec![e.model.clone(), e.lang.clone(), "perplexity".into(), format!("{:.4}", e.perplexity)]);
        }
        for a in &self.accuracy {
            t.push(vec![a.model.clone(), a.lang.clone(), "accuracy".into(), format!("{:.4}", a.accuracy)]);
        }
        for r in &self.ratios {
            t.push(vec![
                r.name.clone(),
                "-".into(),
                "ratio".into(),
                format!("{:.4} ({:.4}/{:.4})", r.value, r.numerator, r.denominator),
            ]);
        }
        t
    }

    pub fn to_text(&self) -> String {
        format!("{}\n{}", self.phase_table().to_text(), self.eval_table().to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_corpus, gen_instructions, LangSpec};
    use crate::model::{ModelConfig, HEAD_W};

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 64,
            max_seq_len: 32,
            eps: 1e-5,
            seed: 1,
        }
    }

    fn tok() -> Tokenizer {
        Tokenizer::for_langs(&[&LangSpec::source(), &LangSpec::target()], 64).unwrap()
    }

    #[test]
    fn uniform_predictor_scores_vocab_size() {
        let mut m = DecoderModel::build(cfg()).unwrap();
        m.tensor_mut(HEAD_W).unwrap().data_mut().fill(0.0);
        let s = gen_corpus(&LangSpec::source(), 3, 0).unwrap();
        assert_eq!(perplexity(&m, &s, &tok(), 4, 32).unwrap(), 64.0);
    }

    #[test]
    fn perplexity_at_least_one() {
        let m = DecoderModel::build(cfg()).unwrap();
        let s = gen_corpus(&LangSpec::target(), 2, 0).unwrap();
        let p = perplexity(&m, &s, &tok(), 4, 32).unwrap();
        assert!(p >= 1.0 && p.is_finite());
        assert!(perplexity(&m, &DocStream::default(), &tok(), 4, 32).is_err());
    }

    #[test]
    fn oracle_predictions_score_one() {
        let set = gen_instructions(&LangSpec::source(), 12, 2).unwrap();
        let preds: Vec<_> = set.items.iter().map(|i| Some(i.response.clone())).collect();
        let acc = score_predictions(&set, &preds).unwrap();
        assert_eq!(acc["src"], 1.0);
        let none = vec![None; set.len()];
        assert_eq!(score_predictions(&set, &none).unwrap()["src"], 0.0);
    }

    #[test]
    fn untrained_accuracy_is_low_and_monotone() {
        let m = DecoderModel::build(cfg()).unwrap();
        let set = gen_instructions(&LangSpec::source(), 8, 2).unwrap();
        let mut prev = 0.0;
        for slack in [0, 1, 4] {
            let a = instruction_accuracy(&m, &set, &tok(), slack).unwrap()["src"];
            assert!(a >= prev);
            prev = a;
        }
        assert!(prev <= 0.25);
    }
}

//! End-to-end runs built from the training stages: source pretraining of a
//! base model, ELO continual pretraining with layer surgery, alignment,
//! chat-vector transfer and bilingual SFT.
//!
//! Every stage is a plain function so the CLI can run them one at a time
//! with checkpoints in between; [`run_elo_pipeline`] chains them in memory.

use crate::data::{gen_bilingual_instructions, gen_corpus_bytes, gen_instructions, mix_streams, DocStream, InstructionSet, Tokenizer};
use crate::error::Result;
use crate::evalbench::{instruction_accuracy, perplexity, AccuracyEntry, EvalEntry, MetricsReport, Ratio};
use crate::model::{forward_flops, DecoderModel};
use crate::store::RunConfig;
use crate::surgery::{apply_delta, compute_delta, detach_elo, replace_layers, EloSubModel, LayerSelection, ParamDelta};
use crate::tensor::rng::named_seed;
use crate::train::{self, Method, PhaseMetrics, TrainedResult, Trainable};

/// Every stream and instruction set a run needs, generated from the run seed.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub tok: Tokenizer,
    /// Source-only corpus for the base model.
    pub base: DocStream,
    /// Continual-pretraining mix.
    pub cp: DocStream,
    /// Alignment mix, large enough for the biggest configured budget.
    pub align: DocStream,
    pub eval_source: DocStream,
    pub eval_target: DocStream,
    /// Source-language instructions used to build the chat vector.
    pub sft_source: InstructionSet,
    pub sft_bilingual: InstructionSet,
    /// Bilingual prompts absent from both training sets.
    pub heldout: InstructionSet,
}

fn mixed(cfg: &RunConfig, bytes: usize, tag: &str) -> Result<DocStream> {
    let d = &cfg.data;
    // Both sides get the full byte count so the schedule never runs dry early.
    let src = gen_corpus_bytes(&d.source, bytes.max(1), named_seed(cfg.seed, &format!("{tag}/source")))?;
    let tgt = gen_corpus_bytes(&d.target, bytes.max(1), named_seed(cfg.seed, &format!("{tag}/target")))?;
    Ok(mix_streams(&src, &tgt, d.ratio)?.take_bytes(bytes))
}

impl Datasets {
    pub fn materialize(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let d = &cfg.data;
        let seed = |tag: &str| named_seed(cfg.seed, tag);
        let align_units = cfg
            .eval
            .align_budgets
            .iter()
            .copied()
            .fold(d.align_units, f64::max);
        let sft_source = gen_instructions(&d.source, d.sft_instructions, seed("data/sft/source"))?;
        let sft_bilingual = gen_bilingual_instructions(&d.source, &d.target, d.sft_instructions, seed("data/sft/bilingual"))?;
        let heldout = gen_bilingual_instructions(&d.source, &d.target, d.heldout_instructions, seed("data/heldout"))?
            .excluding(&sft_bilingual)
            .excluding(&sft_source);
        Ok(Datasets {
            tok: cfg.tokenizer()?,
            base: gen_corpus_bytes(&d.source, d.bytes(d.base_units).max(1), seed("data/base"))?,
            cp: mixed(cfg, d.bytes(d.cp_units), "data/cp")?,
            align: mixed(cfg, d.bytes(align_units), "data/align")?,
            eval_source: gen_corpus_bytes(&d.source, d.eval_bytes, seed("data/eval/source"))?,
            eval_target: gen_corpus_bytes(&d.target, d.eval_bytes, seed("data/eval/target"))?,
            sft_source,
            sft_bilingual,
            heldout,
        })
    }

    /// Leading `units` of the alignment mix.
    pub fn align_budget(&self, cfg: &RunConfig, units: f64) -> DocStream {
        self.align.take_bytes(cfg.data.bytes(units))
    }
}

fn tagged<M>(mut r: TrainedResult<M>, phase: &str) -> TrainedResult<M> {
    r.metrics.phase = phase.to_string();
    r
}

/// Source-only full training of a freshly initialized model.
pub fn pretrain_base(cfg: &RunConfig, data: &Datasets) -> Result<TrainedResult<DecoderModel>> {
    let model = DecoderModel::build(cfg.model.clone())?;
    let plan = cfg.train.base.plan(Method::Fft, &cfg.model, named_seed(cfg.seed, "phase/base"));
    Ok(tagged(train::train_fft(model, &data.base, &data.tok, &plan)?, "base"))
}

/// Detach `selection` from `base` and train it on the continual-pretraining mix.
pub fn elo_pretrain(
    cfg: &RunConfig,
    data: &Datasets,
    base: &DecoderModel,
    selection: &LayerSelection,
) -> Result<TrainedResult<EloSubModel>> {
    let mut sub = detach_elo(base, selection)?;
    sub.set_train_emb_head(cfg.train.train_emb_head);
    let plan = cfg.train.elo.plan(Method::Elo, &cfg.model, named_seed(cfg.seed, "phase/elo"));
    Ok(tagged(train::train_elo(sub, &data.cp, &data.tok, &plan)?, "elo"))
}

/// Full fine-tuning baseline on the same continual-pretraining mix.
pub fn fft_pretrain(cfg: &RunConfig, data: &Datasets, base: &DecoderModel) -> Result<TrainedResult<DecoderModel>> {
    let plan = cfg.train.fft.plan(Method::Fft, &cfg.model, named_seed(cfg.seed, "phase/fft"));
    Ok(tagged(train::train_fft(base.clone(), &data.cp, &data.tok, &plan)?, "fft"))
}

/// Brief full training of a layer-replaced model on `units` of the alignment mix.
pub fn align_stage(cfg: &RunConfig, data: &Datasets, merged: DecoderModel, units: f64) -> Result<TrainedResult<DecoderModel>> {
    let mut plan = cfg.train.align.plan(Method::Align, &cfg.model, named_seed(cfg.seed, "phase/align"));
    plan.budget_bytes = Some(cfg.data.bytes(units));
    Ok(tagged(train::align(merged, &data.align, &data.tok, &plan)?, "align"))
}

/// `θ_Inst − θ_PT`, with `θ_Inst` the base after SFT on source instructions.
pub fn chat_vector(cfg: &RunConfig, data: &Datasets, base: &DecoderModel) -> Result<(ParamDelta, PhaseMetrics)> {
    let plan = cfg.train.sft.plan(Method::Sft, &cfg.model, named_seed(cfg.seed, "phase/chatvec"));
    let inst = tagged(train::sft(base.clone(), &data.sft_source, &data.tok, &plan)?, "chatvec");
    Ok((compute_delta(&inst.model, base)?, inst.metrics))
}

/// SFT on the bilingual 1:1 instruction set.
pub fn bilingual_sft(cfg: &RunConfig, data: &Datasets, model: DecoderModel) -> Result<TrainedResult<DecoderModel>> {
    let plan = cfg.train.sft.plan(Method::Sft, &cfg.model, named_seed(cfg.seed, "phase/sft"));
    Ok(tagged(train::sft(model, &data.sft_bilingual, &data.tok, &plan)?, "sft"))
}

/// Adds source and target perplexity of `model` under `name`.
pub fn eval_perplexity(cfg: &RunConfig, data: &Datasets, report: &mut MetricsReport, name: &str, model: &DecoderModel) -> Result<()> {
    let seq = cfg.eval.seq_len.unwrap_or(cfg.model.max_seq_len);
    for (lang, stream) in [
        (&cfg.data.source.name, &data.eval_source),
        (&cfg.data.target.name, &data.eval_target),
    ] {
        report.evals.push(EvalEntry {
            model: name.to_string(),
            lang: lang.clone(),
            perplexity: perplexity(model, stream, &data.tok, cfg.eval.batch, seq)?,
        });
    }
    Ok(())
}

/// Adds held-out instruction accuracy per language of `model` under `name`.
pub fn eval_accuracy(cfg: &RunConfig, data: &Datasets, report: &mut MetricsReport, name: &str, model: &DecoderModel) -> Result<()> {
    for (lang, accuracy) in instruction_accuracy(model, &data.heldout, &data.tok, cfg.eval.slack)? {
        report.accuracy.push(AccuracyEntry {
            model: name.to_string(),
            lang,
            accuracy,
        });
    }
    Ok(())
}

/// How far an in-memory run goes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stop {
    /// Stop after alignment and its evaluation.
    Aligned,
    /// Chat vector (if enabled), bilingual SFT and accuracy evaluation.
    Full,
}

/// Models kept from one run, for fingerprints and follow-up work.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub base: DecoderModel,
    /// Base with the trained layers written back, before alignment.
    pub merged: Option<DecoderModel>,
    pub aligned: DecoderModel,
    pub final_model: Option<DecoderModel>,
    pub report: MetricsReport,
}

impl PipelineOutput {
    /// Fingerprint of the last model the run produced.
    pub fn final_fingerprint(&self) -> String {
        self.final_model.as_ref().unwrap_or(&self.aligned).fingerprint()
    }
}

/// Shared result of the stages every selection reuses.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub base: DecoderModel,
    pub base_metrics: PhaseMetrics,
    pub chat: Option<(ParamDelta, PhaseMetrics)>,
}

pub fn prepare(cfg: &RunConfig, data: &Datasets, stop: Stop) -> Result<Prepared> {
    let base = pretrain_base(cfg, data)?;
    let chat = if stop == Stop::Full && cfg.train.chat_vector {
        Some(chat_vector(cfg, data, &base.model)?)
    } else {
        None
    };
    Ok(Prepared {
        base: base.model,
        base_metrics: base.metrics,
        chat,
    })
}

fn finish(
    cfg: &RunConfig,
    data: &Datasets,
    prep: &Prepared,
    report: &mut MetricsReport,
    model: DecoderModel,
) -> Result<DecoderModel> {
    let model = match &prep.chat {
        Some((delta, _)) => apply_delta(&model, delta)?,
        None => model,
    };
    eval_accuracy(cfg, data, report, "pre_sft", &model)?;
    let tuned = bilingual_sft(cfg, data, model)?;
    report.phases.push(tuned.metrics);
    eval_perplexity(cfg, data, report, "final", &tuned.model)?;
    eval_accuracy(cfg, data, report, "final", &tuned.model)?;
    Ok(tuned.model)
}

fn start_report(cfg: &RunConfig, data: &Datasets, prep: &Prepared) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    report.phases.push(prep.base_metrics.clone());
    if let Some((_, m)) = &prep.chat {
        report.phases.push(m.clone());
    }
    eval_perplexity(cfg, data, &mut report, "base", &prep.base)?;
    Ok(report)
}

/// detach → ELO pretraining → layer replacement → alignment, then
/// optionally chat vector and bilingual SFT, from a prepared base.
pub fn run_elo_from(
    cfg: &RunConfig,
    data: &Datasets,
    prep: &Prepared,
    selection: &LayerSelection,
    align_units: f64,
    stop: Stop,
) -> Result<PipelineOutput> {
    let mut report = start_report(cfg, data, prep)?;
    let sub = elo_pretrain(cfg, data, &prep.base, selection)?;
    let full_flops = prep.base.step_flops(sub.metrics.batch, sub.metrics.seq_len);
    report
        .ratios
        .push(Ratio::new("step_flops fft/elo", full_flops as f64, sub.metrics.step_flops as f64));
    report.phases.push(sub.metrics);
    let merged = replace_layers(&prep.base, &sub.model)?;
    eval_perplexity(cfg, data, &mut report, "merged", &merged)?;
    let aligned = align_stage(cfg, data, merged.clone(), align_units)?;
    report.phases.push(aligned.metrics);
    eval_perplexity(cfg, data, &mut report, "aligned", &aligned.model)?;
    let final_model = match stop {
        Stop::Aligned => None,
        Stop::Full => Some(finish(cfg, data, prep, &mut report, aligned.model.clone())?),
    };
    Ok(PipelineOutput {
        base: prep.base.clone(),
        merged: Some(merged),
        aligned: aligned.model,
        final_model,
        report,
    })
}

/// The complete ELO pipeline with the configured selection and budget.
pub fn run_elo_pipeline(cfg: &RunConfig, stop: Stop) -> Result<PipelineOutput> {
    let data = Datasets::materialize(cfg)?;
    let prep = prepare(cfg, &data, stop)?;
    run_elo_from(cfg, &data, &prep, &cfg.selection()?, cfg.data.align_units, stop)
}

/// Baseline: full fine-tuning on the continual-pretraining mix, no surgery.
pub fn run_fft_pipeline(cfg: &RunConfig, stop: Stop) -> Result<PipelineOutput> {
    let data = Datasets::materialize(cfg)?;
    let prep = prepare(cfg, &data, stop)?;
    let mut report = start_report(cfg, &data, &prep)?;
    let tuned = fft_pretrain(cfg, &data, &prep.base)?;
    report.phases.push(tuned.metrics);
    eval_perplexity(cfg, &data, &mut report, "fft", &tuned.model)?;
    let final_model = match stop {
        Stop::Aligned => None,
        Stop::Full => Some(finish(cfg, &data, &prep, &mut report, tuned.model.clone())?),
    };
    Ok(PipelineOutput {
        base: prep.base,
        merged: None,
        aligned: tuned.model,
        final_model,
        report,
    })
}

/// Step FLOPs of a full-model step on the configured CP shape.
pub fn fft_step_flops(cfg: &RunConfig) -> u64 {
    let seq = cfg.train.fft.seq_len.unwrap_or(cfg.model.max_seq_len);
    3 * forward_flops(&cfg.model, cfg.model.n_layers, seq) * cfg.train.fft.batch as u64
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::ModelConfig;

    pub(crate) fn tiny() -> RunConfig {
        let mut cfg = RunConfig::new(ModelConfig {
            n_layers: 4,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 64,
            max_seq_len: 32,
            eps: 1e-5,
            seed: 3,
        });
        cfg.data.unit_bytes = 2048;
        cfg.data.eval_bytes = 1024;
        cfg.data.sft_instructions = 32;
        cfg.data.heldout_instructions = 16;
        cfg.train.sft.epochs = Some(1);
        cfg.eval.align_budgets = vec![0.0, 0.5, 1.0];
        cfg
    }

    #[test]
    fn datasets_are_deterministic_and_sized() {
        let cfg = tiny();
        let a = Datasets::materialize(&cfg).unwrap();
        let b = Datasets::materialize(&cfg).unwrap();
        assert_eq!(a.cp.docs, b.cp.docs);
        assert_eq!(a.heldout, b.heldout);
        assert!(a.cp.total_bytes() <= cfg.data.bytes(cfg.data.cp_units));
        assert!(a.align_budget(&cfg, 0.0).is_empty());
        assert!(a.heldout.excluding(&a.sft_bilingual).len() == a.heldout.len());
    }

    #[test]
    fn elo_run_keeps_non_selected_layers_until_align() {
        let cfg = tiny();
        let out = run_elo_pipeline(&cfg, Stop::Full).unwrap();
        let merged = out.merged.as_ref().unwrap();
        let sel = cfg.selection().unwrap();
        for (name, t) in out.base.params() {
            let touched = crate::model::layer_index(name).is_some_and(|i| sel.contains(i));
            if !touched {
                assert_eq!(t, merged.tensor(name).unwrap(), "{name}");
            }
        }
        let phases: Vec<&str> = out.report.phases.iter().map(|p| p.phase.as_str()).collect();
        assert_eq!(phases, ["base", "chatvec", "elo", "align", "sft"]);
        assert!(out.report.accuracy_of("final", "src").is_some());
        assert!(out.report.perplexity("aligned", "tgt").unwrap() >= 1.0);
        assert!(out.final_model.is_some());
    }

    #[test]
    fn fft_run_reports_phases() {
        let cfg = tiny();
        let out = run_fft_pipeline(&cfg, Stop::Aligned).unwrap();
        let phases: Vec<&str> = out.report.phases.iter().map(|p| p.phase.as_str()).collect();
        assert_eq!(phases, ["base", "fft"]);
        assert!(out.final_model.is_none());
    }
}

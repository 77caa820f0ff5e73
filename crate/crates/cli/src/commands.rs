use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use elo_forge::data::io::{read_corpus, read_instructions, write_corpus, write_instructions};
use elo_forge::data::{DocStream, Tokenizer};
use elo_forge::evalbench::{
    ablate_align_budget, ablate_layers, bench_method, instruction_accuracy, perplexity, speedup_report, BenchResult, BenchSpec,
};
use elo_forge::pipeline::{prepare, Datasets, Stop};
use elo_forge::store::{load_delta, load_elo_sub, load_full, parse_config, save_checkpoint, Checkpoint, RunConfig};
use elo_forge::surgery::{apply_delta, compute_delta, detach_elo, replace_layers, LayerSelection};
use elo_forge::tensor::rng::named_seed;
use elo_forge::train::{self, attach_lora, Method, PhaseMetrics};
use elo_forge::DecoderModel;

use crate::manifest::Manifest;
use crate::{pipeline, AblateOp, ChatvecOp, Command, EvalOp, PipelineKind, TrainMethod};

pub(crate) fn load_config(path: &Path) -> Result<RunConfig> {
    let cfg = parse_config(path)?;
    cfg.validate().with_context(|| format!("invalid config {}", path.display()))?;
    Ok(cfg)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

pub(crate) fn save(path: &Path, ckpt: impl Into<Checkpoint>) -> Result<()> {
    ensure_parent(path)?;
    save_checkpoint(path, &ckpt.into())?;
    Ok(())
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn sibling(path: &Path, suffix: &str) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

/// Step log and summary next to a trained checkpoint.
fn write_metrics(out: &Path, metrics: &PhaseMetrics, manifest: &mut Manifest) -> Result<()> {
    let log = sibling(out, ".steps.tsv");
    write_text(&log, &metrics.step_log_tsv())?;
    let summary = sibling(out, ".metrics.json");
    write_text(&summary, &(serde_json::to_string_pretty(metrics)? + "\n"))?;
    manifest.output("steps", &log);
    manifest.output("metrics", &summary);
    eprintln!(
        "{}: {} steps, {:.2}s, final loss {}",
        metrics.phase,
        metrics.steps,
        metrics.wall_seconds,
        metrics.final_loss().map_or("-".into(), |l| format!("{l:.4}"))
    );
    Ok(())
}

fn corpus(path: &Path) -> Result<DocStream> {
    Ok(read_corpus(path)?.0)
}

/// Config tokenizer, or the default language pair sized to the model.
fn tokenizer_for(cfg: Option<&RunConfig>, model: &DecoderModel) -> Result<Tokenizer> {
    let cfg = match cfg {
        Some(c) => c.clone(),
        None => RunConfig::new(model.config().clone()),
    };
    Ok(cfg.tokenizer()?)
}

pub(crate) fn dispatch(cmd: Command, argv: &[String]) -> Result<()> {
    match cmd {
        Command::GenData { cfg, out } => gen_data(&load_config(&cfg.config)?, &out, argv),
        Command::Init { cfg, out } => {
            let cfg = load_config(&cfg.config)?;
            let model = DecoderModel::build(cfg.model.clone())?;
            println!("{}", model.fingerprint());
            save(&out, model)?;
            let mut m = Manifest::new("init", argv, Some(&cfg));
            m.output("model", &out);
            m.write_beside(&out)?;
            Ok(())
        }
        Command::Train {
            method,
            cfg,
            model,
            data,
            out,
        } => train_cmd(method, &load_config(&cfg.config)?, &model, &data, &out, argv),
        Command::Detach {
            model,
            layers,
            train_emb_head,
            out,
        } => {
            let donor = load_full(&model)?;
            let sel = LayerSelection::parse(&layers)?;
            let mut sub = detach_elo(&donor, &sel)?;
            sub.set_train_emb_head(train_emb_head);
            println!("{} params in {} layers", sub.count_params(), sel.len());
            save(&out, sub)?;
            let mut m = Manifest::new("detach", argv, None);
            m.output("sub", &out);
            m.write_beside(&out)?;
            Ok(())
        }
        Command::Merge { base, sub, out } => {
            let merged = replace_layers(&load_full(&base)?, &load_elo_sub(&sub)?)?;
            println!("{}", merged.fingerprint());
            save(&out, merged)?;
            let mut m = Manifest::new("merge", argv, None);
            m.output("model", &out);
            m.write_beside(&out)?;
            Ok(())
        }
        Command::Align {
            cfg,
            model,
            data,
            budget,
            out,
        } => {
            let cfg = load_config(&cfg.config)?;
            if !(budget >= 0.0 && budget.is_finite()) {
                bail!("--budget must be a finite number of units >= 0");
            }
            let mut plan = cfg.train.align.plan(Method::Align, &cfg.model, named_seed(cfg.seed, "phase/align"));
            plan.budget_bytes = Some(cfg.data.bytes(budget));
            let r = train::align(load_full(&model)?, &corpus(&data)?, &cfg.tokenizer()?, &plan)?;
            save(&out, r.model)?;
            let mut m = Manifest::new("align", argv, Some(&cfg));
            m.output("model", &out);
            write_metrics(&out, &r.metrics, &mut m)?;
            m.write_beside(&out)?;
            Ok(())
        }
        Command::Chatvec { op } => {
            let (out, ckpt): (_, Checkpoint) = match op {
                ChatvecOp::Diff {
                    minuend,
                    subtrahend,
                    out,
                } => {
                    let d = compute_delta(&load_full(&minuend)?, &load_full(&subtrahend)?)?;
                    println!("l1 {:.6}", d.l1_norm());
                    (out, d.into())
                }
                ChatvecOp::Apply { model, delta, out } => {
                    let m = apply_delta(&load_full(&model)?, &load_delta(&delta)?)?;
                    println!("{}", m.fingerprint());
                    (out, m.into())
                }
            };
            save(&out, ckpt)?;
            let mut m = Manifest::new("chatvec", argv, None);
            m.output("output", &out);
            m.write_beside(&out)?;
            Ok(())
        }
        Command::Sft { cfg, model, data, out } => {
            let cfg = load_config(&cfg.config)?;
            let plan = cfg.train.sft.plan(Method::Sft, &cfg.model, named_seed(cfg.seed, "phase/sft"));
            let r = train::sft(load_full(&model)?, &read_instructions(&data)?, &cfg.tokenizer()?, &plan)?;
            save(&out, r.model)?;
            let mut m = Manifest::new("sft", argv, Some(&cfg));
            m.output("model", &out);
            write_metrics(&out, &r.metrics, &mut m)?;
            m.write_beside(&out)?;
            Ok(())
        }
        Command::Eval { op } => eval_cmd(op),
        Command::Bench {
            cfg,
            methods,
            exclusive,
            out,
            run_id,
        } => bench_cmd(&load_config(&cfg.config)?, &methods, exclusive, &out, run_id, argv),
        Command::Ablate { op } => ablate_cmd(op, argv),
        Command::Pipeline { kind, cfg, out, resume } => {
            let config = load_config(&cfg.config)?;
            let dir = match out.or_else(|| config.output_dir.clone()) {
                Some(d) => d,
                None => bail!("pipeline needs --out or output_dir in the config"),
            };
            let kind = match kind {
                PipelineKind::Elo => pipeline::Kind::Elo,
                PipelineKind::Fft => pipeline::Kind::Fft,
            };
            let report = pipeline::run(kind, &config, &dir, resume, argv)?;
            print!("{}", report.to_text());
            Ok(())
        }
    }
}

fn gen_data(cfg: &RunConfig, out: &Path, argv: &[String]) -> Result<()> {
    let data = Datasets::materialize(cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let specs = [cfg.data.source.clone(), cfg.data.target.clone()];
    let mut m = Manifest::new("gen-data", argv, Some(cfg));
    for (name, s) in [
        ("base.txt", &data.base),
        ("cp.txt", &data.cp),
        ("align.txt", &data.align),
        ("eval_source.txt", &data.eval_source),
        ("eval_target.txt", &data.eval_target),
    ] {
        let p = out.join(name);
        write_corpus(&p, s, &specs)?;
        m.output(name, &p);
        println!("{name}\t{} docs\t{} bytes", s.len(), s.total_bytes());
    }
    for (name, s) in [
        ("sft_source.tsv", &data.sft_source),
        ("sft_bilingual.tsv", &data.sft_bilingual),
        ("heldout.tsv", &data.heldout),
    ] {
        let p = out.join(name);
        write_instructions(&p, s)?;
        m.output(name, &p);
        println!("{name}\t{} records", s.len());
    }
    m.write_dir(out)?;
    Ok(())
}

fn train_cmd(method: TrainMethod, cfg: &RunConfig, model: &Path, data: &Path, out: &Path, argv: &[String]) -> Result<()> {
    let stream = corpus(data)?;
    let tok = cfg.tokenizer()?;
    let mut m = Manifest::new("train", argv, Some(cfg));
    let metrics = match method {
        TrainMethod::Fft => {
            let plan = cfg.train.fft.plan(Method::Fft, &cfg.model, named_seed(cfg.seed, "phase/fft"));
            let r = train::train_fft(load_full(model)?, &stream, &tok, &plan)?;
            save(out, r.model)?;
            r.metrics
        }
        TrainMethod::Elo => {
            let plan = cfg.train.elo.plan(Method::Elo, &cfg.model, named_seed(cfg.seed, "phase/elo"));
            let r = train::train_elo(load_elo_sub(model)?, &stream, &tok, &plan)?;
            save(out, r.model)?;
            r.metrics
        }
        TrainMethod::Lora => {
            let plan = cfg.train.lora.plan(Method::Lora, &cfg.model, named_seed(cfg.seed, "phase/lora"));
            let lm = attach_lora(load_full(model)?, &cfg.train.lora_adapters)?;
            let r = train::train_lora(lm, &stream, &tok, &plan)?;
            // Adapters are folded in so downstream phases see a plain model.
            save(out, r.model.into_merged()?)?;
            r.metrics
        }
    };
    m.output("model", out);
    write_metrics(out, &metrics, &mut m)?;
    m.write_beside(out)?;
    Ok(())
}

fn eval_cmd(op: EvalOp) -> Result<()> {
    match op {
        EvalOp::Ppl { model, data, config } => {
            let cfg = config.as_deref().map(load_config).transpose()?;
            let model = load_full(&model)?;
            let tok = tokenizer_for(cfg.as_ref(), &model)?;
            let (batch, seq) = match &cfg {
                Some(c) => (c.eval.batch, c.eval.seq_len.unwrap_or(model.config().max_seq_len)),
                None => (8, model.config().max_seq_len),
            };
            let p = perplexity(&model, &corpus(&data)?, &tok, batch, seq)?;
            println!("perplexity\t{p:?}");
        }
        EvalOp::Instr { model, data, config } => {
            let cfg = config.as_deref().map(load_config).transpose()?;
            let model = load_full(&model)?;
            let tok = tokenizer_for(cfg.as_ref(), &model)?;
            let slack = cfg.as_ref().map_or(2, |c| c.eval.slack);
            for (lang, a) in instruction_accuracy(&model, &read_instructions(&data)?, &tok, slack)? {
                println!("accuracy\t{lang}\t{a:?}");
            }
        }
    }
    Ok(())
}

fn bench_cmd(
    cfg: &RunConfig,
    methods: &[TrainMethod],
    exclusive: bool,
    out: &Path,
    run_id: Option<String>,
    argv: &[String],
) -> Result<()> {
    if !methods.contains(&TrainMethod::Fft) || methods.len() < 2 {
        bail!("--methods needs fft and at least one other method");
    }
    let data = Datasets::materialize(cfg)?;
    let specs: Vec<BenchSpec> = methods
        .iter()
        .map(|&m| -> Result<BenchSpec> {
            let mut s = BenchSpec::new(match m {
                TrainMethod::Fft => Method::Fft,
                TrainMethod::Elo => Method::Elo,
                TrainMethod::Lora => Method::Lora,
            });
            s.selection = Some(cfg.selection()?);
            s.lora = cfg.train.lora_adapters.clone();
            s.warmup = cfg.eval.bench_warmup;
            s.steps = cfg.eval.bench_steps;
            s.batch = cfg.eval.bench_batch;
            s.seq_len = cfg.model.max_seq_len;
            s.seed = cfg.seed;
            s.data_tag = format!("cp:{}", cfg.hash());
            if m == TrainMethod::Elo {
                s.align_bytes = cfg.data.bytes(cfg.data.align_units);
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;
    let tok = &data.tok;
    let results: Vec<BenchResult> = if exclusive {
        specs
            .iter()
            .map(|s| bench_method(&cfg.model, s, &data.cp, tok))
            .collect::<elo_forge::Result<_>>()?
    } else {
        eprintln!("warning: arms run concurrently; use --exclusive for wall-clock comparisons");
        std::thread::scope(|scope| {
            let handles: Vec<_> = specs
                .iter()
                .map(|s| scope.spawn(|| bench_method(&cfg.model, s, &data.cp, tok)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("bench arm panicked"))
                .collect::<elo_forge::Result<Vec<_>>>()
        })?
    };
    let bytes: Vec<usize> = cfg.eval.bench_data_units.iter().map(|&u| cfg.data.bytes(u)).collect();
    let report = speedup_report(&results, &bytes, cfg.data.unit_bytes)?;
    let mut m = Manifest::new("bench", argv, Some(cfg));
    let run_id = run_id.unwrap_or_else(|| m.run_id());
    let stem = report.file_stem(&run_id);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (ext, text) in [
        ("txt", report.to_text()),
        ("tsv", report.to_tsv()),
        ("json", serde_json::to_string_pretty(&results)? + "\n"),
    ] {
        let p = out.join(format!("{stem}.{ext}"));
        write_text(&p, &text)?;
        m.output(ext, &p);
    }
    m.write_dir(out)?;
    print!("{}", report.to_text());
    Ok(())
}

fn ablate_cmd(op: AblateOp, argv: &[String]) -> Result<()> {
    let (cfg_path, out, run_id, kind) = match &op {
        AblateOp::Layers { cfg, out, run_id, .. } => (&cfg.config, out, run_id, "layers"),
        AblateOp::AlignBudget { cfg, out, run_id } => (&cfg.config, out, run_id, "align_budget"),
    };
    let cfg = load_config(cfg_path)?;
    let data = Datasets::materialize(&cfg)?;
    let report = match &op {
        AblateOp::Layers { no_sft, .. } => {
            let stop = if *no_sft { Stop::Aligned } else { Stop::Full };
            let prep = prepare(&cfg, &data, stop)?;
            ablate_layers(&cfg, &data, &prep, &cfg.ablate_selections()?, stop)?
        }
        AblateOp::AlignBudget { .. } => {
            let prep = prepare(&cfg, &data, Stop::Aligned)?;
            ablate_align_budget(&cfg, &data, &prep, &cfg.selection()?, &cfg.eval.align_budgets)?
        }
    };
    let mut m = Manifest::new(&format!("ablate {kind}"), argv, Some(&cfg));
    let run_id = run_id.clone().unwrap_or_else(|| m.run_id());
    let stem = format!("ablate_{kind}_{}_{run_id}", cfg.hash());
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (ext, text) in [
        ("txt", report.to_text()),
        ("tsv", report.to_tsv()),
        ("json", serde_json::to_string_pretty(&report)? + "\n"),
    ] {
        let p = out.join(format!("{stem}.{ext}"));
        write_text(&p, &text)?;
        m.output(ext, &p);
    }
    m.write_dir(out)?;
    print!("{}", report.to_text());
    Ok(())
}

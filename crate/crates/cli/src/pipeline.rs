//! Checkpointed pipelines. Each phase reads its inputs from the output
//! directory and writes one checkpoint plus its metrics there.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use elo_forge::evalbench::{MetricsReport, Ratio};
use elo_forge::pipeline::{
    align_stage, bilingual_sft, chat_vector, eval_accuracy, eval_perplexity, fft_pretrain, pretrain_base, Datasets,
};
use elo_forge::store::{load_delta, load_elo_sub, load_full, Checkpoint, RunConfig};
use elo_forge::surgery::{apply_delta, detach_elo, replace_layers};
use elo_forge::tensor::rng::named_seed;
use elo_forge::train::{self, Method, PhaseMetrics, Trainable};

use crate::commands::{save, write_text};
use crate::manifest::Manifest;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Elo,
    Fft,
}

struct Phases<'a> {
    dir: &'a Path,
    resume: bool,
    metrics: Vec<PhaseMetrics>,
}

impl Phases<'_> {
    fn ckpt(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.elof"))
    }

    /// Runs `compute` unless resuming and its checkpoint already exists.
    fn run<F>(&mut self, name: &str, compute: F) -> Result<PathBuf>
    where
        F: FnOnce() -> Result<(Checkpoint, Option<PhaseMetrics>)>,
    {
        let path = self.ckpt(name);
        let metrics_path = self.dir.join(format!("{name}.metrics.json"));
        if self.resume && path.exists() {
            eprintln!("[{name}] reusing {}", path.display());
            if metrics_path.exists() {
                let text = fs::read_to_string(&metrics_path).with_context(|| format!("reading {}", metrics_path.display()))?;
                self.metrics.push(serde_json::from_str(&text).with_context(|| format!("parsing {}", metrics_path.display()))?);
            }
            return Ok(path);
        }
        eprintln!("[{name}] running");
        let (ckpt, metrics) = compute()?;
        save(&path, ckpt)?;
        if let Some(m) = metrics {
            write_text(&metrics_path, &(serde_json::to_string_pretty(&m)? + "\n"))?;
            write_text(&self.dir.join(format!("{name}.steps.tsv")), &m.step_log_tsv())?;
            self.metrics.push(m);
        }
        Ok(path)
    }
}

fn check_resume(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let old: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let hash = cfg.hash();
    if old.get("config_hash").and_then(|h| h.as_str()) != Some(hash.as_str()) {
        bail!("{} was produced by a different config; refusing to resume", dir.display());
    }
    Ok(())
}

pub fn run(kind: Kind, cfg: &RunConfig, dir: &Path, resume: bool, argv: &[String]) -> Result<MetricsReport> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    if resume {
        check_resume(dir, cfg)?;
    }
    let mut manifest = Manifest::new(
        match kind {
            Kind::Elo => "pipeline elo",
            Kind::Fft => "pipeline fft",
        },
        argv,
        Some(cfg),
    );
    manifest.write_dir(dir)?;
    let data = Datasets::materialize(cfg)?;
    let mut ph = Phases {
        dir,
        resume,
        metrics: Vec::new(),
    };

    let base = ph.run("base", || {
        let r = pretrain_base(cfg, &data)?;
        Ok((r.model.into(), Some(r.metrics)))
    })?;
    let delta = if cfg.train.chat_vector {
        Some(ph.run("chatvec", || {
            let (d, m) = chat_vector(cfg, &data, &load_full(&base)?)?;
            Ok((d.into(), Some(m)))
        })?)
    } else {
        None
    };

    let mut stages: Vec<(&str, PathBuf)> = vec![("base", base.clone())];
    let adapted = match kind {
        Kind::Elo => {
            let sub = ph.run("elo_sub", || {
                let mut s = detach_elo(&load_full(&base)?, &cfg.selection()?)?;
                s.set_train_emb_head(cfg.train.train_emb_head);
                Ok((s.into(), None))
            })?;
            let trained = ph.run("elo", || {
                let plan = cfg.train.elo.plan(Method::Elo, &cfg.model, named_seed(cfg.seed, "phase/elo"));
                let mut r = train::train_elo(load_elo_sub(&sub)?, &data.cp, &data.tok, &plan)?;
                r.metrics.phase = "elo".into();
                Ok((r.model.into(), Some(r.metrics)))
            })?;
            let merged = ph.run("merged", || Ok((replace_layers(&load_full(&base)?, &load_elo_sub(&trained)?)?.into(), None)))?;
            stages.push(("merged", merged.clone()));
            let aligned = ph.run("aligned", || {
                let r = align_stage(cfg, &data, load_full(&merged)?, cfg.data.align_units)?;
                Ok((r.model.into(), Some(r.metrics)))
            })?;
            stages.push(("aligned", aligned.clone()));
            aligned
        }
        Kind::Fft => {
            let tuned = ph.run("fft", || {
                let r = fft_pretrain(cfg, &data, &load_full(&base)?)?;
                Ok((r.model.into(), Some(r.metrics)))
            })?;
            stages.push(("fft", tuned.clone()));
            tuned
        }
    };
    let pre_sft = match &delta {
        Some(d) => ph.run("chat", || Ok((apply_delta(&load_full(&adapted)?, &load_delta(d)?)?.into(), None)))?,
        None => adapted,
    };
    let final_path = ph.run("final", || {
        let r = bilingual_sft(cfg, &data, load_full(&pre_sft)?)?;
        Ok((r.model.into(), Some(r.metrics)))
    })?;
    stages.push(("final", final_path.clone()));

    let mut report = MetricsReport {
        phases: ph.metrics,
        ..MetricsReport::default()
    };
    let mut fingerprints = String::from("model\tfingerprint\n");
    for (name, path) in &stages {
        let m = load_full(path)?;
        eval_perplexity(cfg, &data, &mut report, name, &m)?;
        fingerprints.push_str(&format!("{name}\t{}\n", m.fingerprint()));
        manifest.output(name, path);
    }
    eval_accuracy(cfg, &data, &mut report, "pre_sft", &load_full(&pre_sft)?)?;
    eval_accuracy(cfg, &data, &mut report, "final", &load_full(&final_path)?)?;
    if let Some(elo) = report.phase("elo") {
        let full = load_full(&base)?.step_flops(elo.batch, elo.seq_len);
        report
            .ratios
            .push(Ratio::new("step_flops fft/elo", full as f64, elo.step_flops as f64));
    }

    for (file, text) in [
        ("report.txt", report.to_text()),
        ("report.tsv", report.eval_table().to_tsv()),
        ("phases.tsv", report.phase_table().to_tsv()),
        ("metrics.json", serde_json::to_string_pretty(&report)? + "\n"),
        ("fingerprints.tsv", fingerprints),
    ] {
        let p = dir.join(file);
        write_text(&p, &text)?;
        manifest.output(file, &p);
    }
    manifest.write_dir(dir)?;
    Ok(report)
}

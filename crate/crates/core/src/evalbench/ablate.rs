use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{forward_flops, layer_index};
use crate::pipeline::{align_stage, elo_pretrain, eval_perplexity, run_elo_from, Datasets, Prepared, Stop};
use crate::store::RunConfig;
use crate::surgery::{replace_layers, LayerSelection};

use super::{MetricsReport, Table};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub selection: LayerSelection,
    pub target_ppl: f64,
    pub source_ppl: f64,
    /// Held-out accuracy per language after the final SFT, if run.
    pub accuracy: Vec<(String, f64)>,
    pub elo_step_flops: u64,
    pub elo_trainable: usize,
    pub merged_fingerprint: String,
    /// 1 is the lowest target perplexity.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub units: f64,
    pub bytes: usize,
    pub align_steps: usize,
    pub target_ppl: f64,
    pub source_ppl: f64,
    pub pre_align_fingerprint: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub selections: Vec<SelectionRow>,
    pub budgets: Vec<BudgetRow>,
    pub reports: Vec<MetricsReport>,
}

impl AblationReport {
    pub fn table(&self) -> Table {
        if !self.budgets.is_empty() {
            let mut t = Table::new(&["align_units", "align_bytes", "align_steps", "target_ppl", "source_ppl", "pre_align_fingerprint"]);
            for r in &self.budgets {
                t.push(vec![
                    format!("{}", r.units),
                    r.bytes.to_string(),
                    r.align_steps.to_string(),
                    format!("{:.4}", r.target_ppl),
                    format!("{:.4}", r.source_ppl),
                    r.pre_align_fingerprint[..16].to_string(),
                ]);
            }
            return t;
        }
        let mut t = Table::new(&["selection", "target_ppl", "source_ppl", "accuracy", "elo_step_flops", "elo_trainable", "rank"]);
        for r in &self.selections {
            let acc: Vec<String> = r.accuracy.iter().map(|(l, a)| format!("{l}={a:.3}")).collect();
            t.push(vec![
                r.selection.to_string(),
                format!("{:.4}", r.target_ppl),
                format!("{:.4}", r.source_ppl),
                if acc.is_empty() { "-".into() } else { acc.join(",") },
                r.elo_step_flops.to_string(),
                r.elo_trainable.to_string(),
                r.rank.to_string(),
            ]);
        }
        t
    }

    pub fn to_text(&self) -> String {
        self.table().to_text()
    }

    pub fn to_tsv(&self) -> String {
        self.table().to_tsv()
    }
}

fn final_name(stop: Stop) -> &'static str {
    match stop {
        Stop::Aligned => "aligned",
        Stop::Full => "final",
    }
}

/// Runs the ELO pipeline once per selection from the same prepared base,
/// with identical budgets and seeds. Per cell it asserts that tensors
/// outside the selected layers equal the base before alignment and that
/// the recorded step FLOPs follow the cost model.
pub fn ablate_layers(
    cfg: &RunConfig,
    data: &Datasets,
    prep: &Prepared,
    selections: &[LayerSelection],
    stop: Stop,
) -> Result<AblationReport> {
    let mut out = AblationReport::default();
    for sel in selections {
        sel.validate_for(cfg.model.n_layers)?;
        let run = run_elo_from(cfg, data, prep, sel, cfg.data.align_units, stop)?;
        let merged = run.merged.as_ref().expect("ELO runs keep the merged model");
        for (name, t) in prep.base.params() {
            if !layer_index(name).is_some_and(|i| sel.contains(i)) {
                assert!(t == merged.tensor(name)?, "{name} differs from the base before alignment for {sel}");
            }
        }
        let elo = run.report.phase("elo").expect("elo phase recorded");
        let expected = 3 * forward_flops(&cfg.model, sel.len(), elo.seq_len) * elo.batch as u64;
        assert_eq!(elo.step_flops, expected, "ELO step FLOPs for {sel}");
        let name = final_name(stop);
        let r = &run.report;
        out.selections.push(SelectionRow {
            selection: sel.clone(),
            target_ppl: r.perplexity(name, &cfg.data.target.name).expect("target ppl"),
            source_ppl: r.perplexity(name, &cfg.data.source.name).expect("source ppl"),
            accuracy: r
                .accuracy
                .iter()
                .filter(|a| a.model == "final")
                .map(|a| (a.lang.clone(), a.accuracy))
                .collect(),
            elo_step_flops: elo.step_flops,
            elo_trainable: elo.params_trainable,
            merged_fingerprint: merged.fingerprint(),
            rank: 0,
        });
        out.reports.push(run.report);
    }
    let mut order: Vec<usize> = (0..out.selections.len()).collect();
    order.sort_by(|&a, &b| out.selections[a].target_ppl.total_cmp(&out.selections[b].target_ppl));
    for (rank, i) in order.into_iter().enumerate() {
        out.selections[i].rank = rank + 1;
    }
    Ok(out)
}

/// One ELO pretraining and layer replacement, then alignment on each budget
/// (in units) from that shared pre-align model.
pub fn ablate_align_budget(
    cfg: &RunConfig,
    data: &Datasets,
    prep: &Prepared,
    selection: &LayerSelection,
    budgets: &[f64],
) -> Result<AblationReport> {
    crate::store::config::check_budgets(budgets)?;
    let sub = elo_pretrain(cfg, data, &prep.base, selection)?;
    let merged = replace_layers(&prep.base, &sub.model)?;
    let pre = merged.fingerprint();
    let mut out = AblationReport::default();
    for &units in budgets {
        assert_eq!(merged.fingerprint(), pre, "pre-align model must be shared");
        let aligned = align_stage(cfg, data, merged.clone(), units)?;
        let mut report = MetricsReport::default();
        report.phases.push(aligned.metrics.clone());
        eval_perplexity(cfg, data, &mut report, "aligned", &aligned.model)?;
        out.budgets.push(BudgetRow {
            units,
            bytes: cfg.data.bytes(units),
            align_steps: aligned.metrics.steps,
            target_ppl: report.perplexity("aligned", &cfg.data.target.name).expect("target ppl"),
            source_ppl: report.perplexity("aligned", &cfg.data.source.name).expect("source ppl"),
            pre_align_fingerprint: pre.clone(),
        });
        out.reports.push(report);
    }
    Ok(out)
}

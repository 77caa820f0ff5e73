use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{DocStream, Tokenizer};
use crate::error::{EloError, Result};
use crate::model::{DecoderModel, ModelConfig};
use crate::store::config::short_hash;
use crate::surgery::{detach_elo, LayerSelection};
use crate::train::{attach_lora, run, LoraConfig, Method, PhaseMetrics, TrainPlan, Trainable};

use super::{Ratio, Table};

/// One timed training arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub method: Method,
    /// Layers trained by ELO; ignored by the other methods.
    pub selection: Option<LayerSelection>,
    pub lora: LoraConfig,
    pub warmup: usize,
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Names the stream so fairness can be checked across arms.
    pub data_tag: String,
    /// Bytes of full-model alignment an ELO run adds on top of its own steps.
    pub align_bytes: usize,
}

impl BenchSpec {
    pub fn new(method: Method) -> Self {
        BenchSpec {
            method,
            selection: None,
            lora: LoraConfig::default(),
            warmup: 5,
            steps: 50,
            batch: 4,
            seq_len: 128,
            seed: 0,
            data_tag: String::new(),
            align_bytes: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub method: Method,
    pub label: String,
    pub config_hash: String,
    pub batch: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub data_tag: String,
    pub warmup: usize,
    pub measured_steps: usize,
    pub median_step_ms: f64,
    pub mean_step_ms: f64,
    pub step_flops: u64,
    /// Surgery or adapter attachment before the first step.
    pub setup_ms: f64,
    /// Full-model steps charged after training (ELO alignment).
    pub overhead_full_steps: usize,
    pub params_trainable: usize,
    pub step_wall_ms: Vec<f64>,
}

impl BenchResult {
    /// Steps needed to consume `bytes` of data at this batch shape.
    pub fn steps_for(&self, bytes: usize) -> usize {
        bytes.div_ceil(self.batch * self.seq_len)
    }

    /// Seconds to train on `bytes`, given the median full-model step time
    /// used for any alignment overhead.
    pub fn extrapolate_seconds(&self, bytes: usize, full_step_ms: f64) -> f64 {
        (self.setup_ms + self.steps_for(bytes) as f64 * self.median_step_ms + self.overhead_full_steps as f64 * full_step_ms)
            / 1e3
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub(crate) fn config_hash(cfg: &ModelConfig) -> String {
    short_hash(&serde_json::to_vec(cfg).expect("model config serializes"))
}

fn timed<M: Trainable>(
    m: &mut M,
    stream: &DocStream,
    tok: &Tokenizer,
    spec: &BenchSpec,
    method: Method,
) -> Result<PhaseMetrics> {
    let total = spec.warmup + spec.steps;
    let mut plan = TrainPlan::new(method);
    plan.batch = spec.batch;
    plan.seq_len = spec.seq_len;
    plan.seed = spec.seed;
    plan.max_steps = Some(total);
    // Enough passes to reach `total` steps even on a short stream.
    plan.epochs = Some(total.max(1));
    let mask = m.default_mask();
    let metrics = run(m, stream, tok, &plan, &mask)?;
    if metrics.steps < total {
        return Err(EloError::EmptyData(format!(
            "benchmark stream yields {} steps, {total} needed",
            metrics.steps
        )));
    }
    Ok(metrics)
}

/// Times `spec.warmup + spec.steps` training steps of one method on a fresh
/// model built from `config`, discarding the warmup steps.
pub fn bench_method(config: &ModelConfig, spec: &BenchSpec, stream: &DocStream, tok: &Tokenizer) -> Result<BenchResult> {
    if spec.steps < 20 {
        return Err(EloError::Config(format!("bench needs >= 20 measured steps, got {}", spec.steps)));
    }
    let model = DecoderModel::build(config.clone())?;
    let t0 = Instant::now();
    let (metrics, label, setup_ms, overhead) = match spec.method {
        Method::Fft => {
            let mut m = model;
            (timed(&mut m, stream, tok, spec, Method::Fft)?, "fft".to_string(), 0.0, 0)
        }
        Method::Elo => {
            let sel = match &spec.selection {
                Some(s) => s.clone(),
                None => LayerSelection::first_last(config.n_layers)?,
            };
            let mut sub = detach_elo(&model, &sel)?;
            let setup = t0.elapsed().as_secs_f64() * 1e3;
            let overhead = spec.align_bytes.div_ceil(spec.batch * spec.seq_len);
            (timed(&mut sub, stream, tok, spec, Method::Elo)?, format!("elo{sel}"), setup, overhead)
        }
        Method::Lora => {
            let mut lm = attach_lora(model, &spec.lora)?;
            let setup = t0.elapsed().as_secs_f64() * 1e3;
            (timed(&mut lm, stream, tok, spec, Method::Lora)?, "lora".to_string(), setup, 0)
        }
        other => return Err(EloError::Config(format!("`{other}` is not a benchmark method"))),
    };
    let measured = metrics.step_wall_ms[spec.warmup..].to_vec();
    Ok(BenchResult {
        method: spec.method,
        label,
        config_hash: config_hash(config),
        batch: spec.batch,
        seq_len: spec.seq_len,
        seed: spec.seed,
        data_tag: spec.data_tag.clone(),
        warmup: spec.warmup,
        measured_steps: measured.len(),
        median_step_ms: median(&measured),
        mean_step_ms: measured.iter().sum::<f64>() / measured.len() as f64,
        step_flops: metrics.step_flops,
        setup_ms,
        overhead_full_steps: overhead,
        params_trainable: metrics.params_trainable,
        step_wall_ms: measured,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub label: String,
    pub method: Method,
    pub median_step_ms: f64,
    pub mean_step_ms: f64,
    pub step_flops: u64,
    /// FFT median step time over this arm's.
    pub wall_speedup: Ratio,
    /// FFT step FLOPs over this arm's.
    pub flop_ratio: Ratio,
    /// Extrapolated seconds per entry of `data_bytes`.
    pub extrapolated_s: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub config_hash: String,
    pub batch: usize,
    pub seq_len: usize,
    pub data_bytes: Vec<usize>,
    pub unit_bytes: usize,
    pub rows: Vec<SpeedupRow>,
}

impl SpeedupReport {
    pub fn row(&self, label: &str) -> Option<&SpeedupRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn method(&self, method: Method) -> Option<&SpeedupRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn table(&self) -> Table {
        let mut header = vec![
            "label".to_string(),
            "method".into(),
            "median_step_ms".into(),
            "mean_step_ms".into(),
            "step_flops".into(),
            "wall_speedup_vs_fft".into(),
            "flop_ratio_vs_fft".into(),
        ];
        for &b in &self.data_bytes {
            header.push(format!("wall_s@{}u", units_label(b, self.unit_bytes)));
        }
        let mut t = Table {
            header,
            rows: Vec::new(),
        };
        for r in &self.rows {
            let mut row = vec![
                r.label.clone(),
                r.method.to_string(),
                format!("{:.3}", r.median_step_ms),
                format!("{:.3}", r.mean_step_ms),
                r.step_flops.to_string(),
                format!("{:.3}", r.wall_speedup.value),
                format!("{:.3}", r.flop_ratio.value),
            ];
            row.extend(r.extrapolated_s.iter().map(|s| format!("{s:.1}")));
            t.push(row);
        }
        t
    }

    /// Text table followed by a line naming the size unit.
    pub fn to_text(&self) -> String {
        format!(
            "{}1 unit = {} bytes; batch {} x seq {}; config {}\n",
            self.table().to_text(),
            self.unit_bytes,
            self.batch,
            self.seq_len,
            self.config_hash
        )
    }

    pub fn to_tsv(&self) -> String {
        self.table().to_tsv()
    }

    /// `speedup_<config hash>_<run id>`.
    pub fn file_stem(&self, run_id: &str) -> String {
        format!("speedup_{}_{run_id}", self.config_hash)
    }
}

fn units_label(bytes: usize, unit: usize) -> String {
    let u = bytes as f64 / unit as f64;
    if u.fract() == 0.0 {
        format!("{u:.0}")
    } else {
        format!("{u}")
    }
}

/// Compares arms against the first FFT arm. All arms must share the model
/// config, batch shape, seed, data stream and measured step count.
pub fn speedup_report(results: &[BenchResult], data_bytes: &[usize], unit_bytes: usize) -> Result<SpeedupReport> {
    if results.len() < 2 {
        return Err(EloError::Config("speedup_report needs at least two results".into()));
    }
    let fft = results
        .iter()
        .find(|r| r.method == Method::Fft)
        .ok_or_else(|| EloError::Config("speedup_report needs an FFT result as reference".into()))?;
    for r in results {
        let same = r.config_hash == fft.config_hash
            && r.batch == fft.batch
            && r.seq_len == fft.seq_len
            && r.seed == fft.seed
            && r.data_tag == fft.data_tag
            && r.measured_steps == fft.measured_steps;
        if !same {
            return Err(EloError::Config(format!(
                "`{}` was measured under different conditions than `{}` (config, batch, seq_len, seed, data or step count)",
                r.label, fft.label
            )));
        }
    }
    let rows = results
        .iter()
        .map(|r| SpeedupRow {
            label: r.label.clone(),
            method: r.method,
            median_step_ms: r.median_step_ms,
            mean_step_ms: r.mean_step_ms,
            step_flops: r.step_flops,
            wall_speedup: Ratio::new(format!("fft/{}", r.label), fft.median_step_ms, r.median_step_ms),
            flop_ratio: Ratio::new(format!("fft/{}", r.label), fft.step_flops as f64, r.step_flops as f64),
            extrapolated_s: data_bytes
                .iter()
                .map(|&b| r.extrapolate_seconds(b, fft.median_step_ms))
                .collect(),
        })
        .collect();
    Ok(SpeedupReport {
        config_hash: fft.config_hash.clone(),
        batch: fft.batch,
        seq_len: fft.seq_len,
        data_bytes: data_bytes.to_vec(),
        unit_bytes,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_corpus_bytes, LangSpec};

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 4,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 64,
            max_seq_len: 16,
            eps: 1e-5,
            seed: 0,
        }
    }

    fn fixture(method: Method, ms: f64) -> BenchResult {
        BenchResult {
            method,
            label: method.to_string(),
            config_hash: "abc".into(),
            batch: 2,
            seq_len: 8,
            seed: 0,
            data_tag: "d".into(),
            warmup: 0,
            measured_steps: 20,
            median_step_ms: ms,
            mean_step_ms: ms,
            step_flops: 100,
            setup_ms: 0.0,
            overhead_full_steps: 0,
            params_trainable: 1,
            step_wall_ms: vec![ms; 20],
        }
    }

    #[test]
    fn measures_requested_steps() {
        let cfg = small();
        let tok = Tokenizer::for_langs(&[&LangSpec::source(), &LangSpec::target()], 64).unwrap();
        let stream = gen_corpus_bytes(&LangSpec::target(), 600, 1).unwrap();
        let mut spec = BenchSpec::new(Method::Elo);
        spec.steps = 20;
        spec.warmup = 2;
        spec.batch = 2;
        spec.seq_len = 16;
        spec.align_bytes = 100;
        let r = bench_method(&cfg, &spec, &stream, &tok).unwrap();
        assert_eq!(r.measured_steps, 20);
        assert_eq!(r.overhead_full_steps, 4);
        assert_eq!(r.label, "elo(1,4)");
        assert_eq!(r.step_flops, 3 * crate::model::forward_flops(&cfg, 2, 16) * 2);
        spec.steps = 5;
        assert!(bench_method(&small(), &spec, &stream, &tok).is_err());
    }

    #[test]
    fn report_checks_fairness() {
        let a = fixture(Method::Fft, 10.0);
        let b = fixture(Method::Elo, 2.0);
        let rep = speedup_report(&[a.clone(), b.clone()], &[160, 320], 16).unwrap();
        assert_eq!(rep.row("elo").unwrap().wall_speedup.value, 5.0);
        assert_eq!(rep.row("fft").unwrap().wall_speedup.value, 1.0);
        assert_eq!(rep.row("elo").unwrap().extrapolated_s, vec![0.02, 0.04]);
        assert_eq!(rep.table().header[7], "wall_s@10u");
        assert_eq!(rep.file_stem("r1"), "speedup_abc_r1");
        let mut c = b.clone();
        c.seq_len = 16;
        assert!(matches!(speedup_report(&[a.clone(), c], &[], 16), Err(EloError::Config(_))));
        assert!(speedup_report(&[b.clone(), b], &[], 16).is_err());
        assert!(speedup_report(&[a], &[], 16).is_err());
    }

    #[test]
    fn report_is_pure() {
        let rs = [fixture(Method::Fft, 10.0), fixture(Method::Lora, 9.0)];
        let x = speedup_report(&rs, &[160], 16).unwrap();
        let y = speedup_report(&rs, &[160], 16).unwrap();
        assert_eq!(x.to_text(), y.to_text());
        assert_eq!(x.to_tsv(), y.to_tsv());
    }
}

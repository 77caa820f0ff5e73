//! Strict JSON run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{LangSpec, Tokenizer};
use crate::error::{EloError, Result};
use crate::model::ModelConfig;
use crate::surgery::LayerSelection;
use crate::tensor::AdamWConfig;
use crate::train::{LoraConfig, Method, TrainPlan};

/// Training hyperparameters of one phase; `seq_len` defaults to the model's
/// `max_seq_len`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseConfig {
    pub optim: AdamWConfig,
    pub batch: usize,
    pub seq_len: Option<usize>,
    pub epochs: Option<usize>,
    pub max_steps: Option<usize>,
    pub cosine: bool,
    pub log_every: usize,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig {
            optim: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            batch: 4,
            seq_len: None,
            epochs: None,
            max_steps: None,
            cosine: false,
            log_every: 0,
        }
    }
}

impl PhaseConfig {
    fn sft_default() -> Self {
        PhaseConfig {
            batch: 16,
            seq_len: Some(32),
            ..PhaseConfig::default()
        }
    }

    pub fn plan(&self, method: Method, model: &ModelConfig, seed: u64) -> TrainPlan {
        TrainPlan {
            method,
            optim: self.optim,
            batch: self.batch,
            seq_len: self.seq_len.unwrap_or(model.max_seq_len),
            epochs: self.epochs,
            max_steps: self.max_steps,
            budget_bytes: None,
            trainable_mask: None,
            seed,
            log_every: self.log_every,
            cosine: self.cosine,
        }
    }
}

/// Data sizes are in desk units of `unit_bytes` bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: LangSpec,
    pub target: LangSpec,
    /// `(source parts, target parts)` of the continual-pretraining mix.
    pub ratio: (usize, usize),
    pub unit_bytes: usize,
    /// Source-only pretraining that produces the base model.
    pub base_units: f64,
    /// Continual-pretraining mix for ELO / FFT / LoRA.
    pub cp_units: f64,
    /// Alignment budget after layer replacement.
    pub align_units: f64,
    /// Held-out bytes per language for perplexity.
    pub eval_bytes: usize,
    pub sft_instructions: usize,
    pub heldout_instructions: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: LangSpec::source(),
            target: LangSpec::target(),
            ratio: (1, 9),
            unit_bytes: 64 * 1024,
            base_units: 2.0,
            cp_units: 4.0,
            align_units: 1.0,
            eval_bytes: 16 * 1024,
            sft_instructions: 512,
            heldout_instructions: 64,
        }
    }
}

impl DataConfig {
    pub fn bytes(&self, units: f64) -> usize {
        (units * self.unit_bytes as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base: PhaseConfig,
    pub elo: PhaseConfig,
    pub fft: PhaseConfig,
    pub lora: PhaseConfig,
    pub align: PhaseConfig,
    pub sft: PhaseConfig,
    /// Layers detached for ELO; first and last by default.
    pub selection: Option<LayerSelection>,
    pub train_emb_head: bool,
    pub lora_adapters: LoraConfig,
    /// Transfer instruction following with a chat vector before the final SFT.
    pub chat_vector: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base: PhaseConfig::default(),
            elo: PhaseConfig::default(),
            fft: PhaseConfig::default(),
            lora: PhaseConfig::default(),
            align: PhaseConfig::default(),
            sft: PhaseConfig::sft_default(),
            selection: None,
            train_emb_head: false,
            lora_adapters: LoraConfig::default(),
            chat_vector: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub batch: usize,
    pub seq_len: Option<usize>,
    /// Extra decode positions allowed beyond the response and EOS.
    pub slack: usize,
    pub bench_warmup: usize,
    pub bench_steps: usize,
    pub bench_batch: usize,
    /// Data sizes (units) the benchmark extrapolates wall time to.
    pub bench_data_units: Vec<f64>,
    pub ablate_selections: Option<Vec<LayerSelection>>,
    pub align_budgets: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            batch: 8,
            seq_len: None,
            slack: 2,
            bench_warmup: 5,
            bench_steps: 50,
            bench_batch: 4,
            bench_data_units: vec![10.0, 50.0, 200.0],
            ablate_selections: None,
            align_budgets: (0..=8).map(|i| i as f64 * 0.5).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn new(model: ModelConfig) -> Self {
        RunConfig {
            model,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            output_dir: None,
            seed: 0,
        }
    }

    pub fn selection(&self) -> Result<LayerSelection> {
        match &self.train.selection {
            Some(s) => Ok(s.clone()),
            None => LayerSelection::first_last(self.model.n_layers),
        }
    }

    /// Layer selections for the ablation; defaults rescale `{1,n}`,
    /// `{1,n/2,n}`, `{n/4,3n/4}` and `{1,n/2}` to the model depth.
    pub fn ablate_selections(&self) -> Result<Vec<LayerSelection>> {
        if let Some(s) = &self.eval.ablate_selections {
            return Ok(s.clone());
        }
        let n = self.model.n_layers;
        let mut out = Vec::new();
        for v in [vec![1, n], vec![1, n / 2, n], vec![n / 4, 3 * n / 4], vec![1, n / 2]] {
            let mut v: Vec<usize> = v.into_iter().map(|i| i.max(1)).collect();
            v.sort_unstable();
            v.dedup();
            let s = LayerSelection::new(v)?;
            if !out.contains(&s) {
                out.push(s);
            }
        }
        Ok(out)
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        Tokenizer::for_langs(&[&self.data.source, &self.data.target], self.model.vocab_size)
    }

    /// Checks every cross-field constraint before any compute.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let d = &self.data;
        d.source.validate()?;
        d.target.validate()?;
        if d.source.name == d.target.name {
            return Err(EloError::Config("data.source and data.target need distinct names".into()));
        }
        if let Some(b) = d.source.char_set.iter().find(|b| d.target.char_set.contains(b)) {
            return Err(EloError::Config(format!(
                "data.source and data.target share byte {b:#04x}; char sets must be disjoint"
            )));
        }
        if d.ratio == (0, 0) {
            return Err(EloError::Ratio(0, 0));
        }
        if d.unit_bytes == 0 {
            return Err(EloError::Config("data.unit_bytes must be >= 1".into()));
        }
        for (key, v) in [
            ("data.base_units", d.base_units),
            ("data.cp_units", d.cp_units),
            ("data.align_units", d.align_units),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(EloError::Config(format!("{key} must be a finite number >= 0")));
            }
        }
        self.tokenizer()?;
        self.selection()?.validate_for(self.model.n_layers)?;
        let t = &self.train;
        for (key, p) in [
            ("train.base", &t.base),
            ("train.elo", &t.elo),
            ("train.fft", &t.fft),
            ("train.lora", &t.lora),
            ("train.align", &t.align),
            ("train.sft", &t.sft),
        ] {
            if p.batch == 0 {
                return Err(EloError::Config(format!("{key}.batch must be >= 1")));
            }
            let s = p.seq_len.unwrap_or(self.model.max_seq_len);
            if s == 0 || s > self.model.max_seq_len {
                return Err(EloError::Config(format!(
                    "{key}.seq_len {s} must be in 1..={}",
                    self.model.max_seq_len
                )));
            }
            if !(p.optim.lr > 0.0) {
                return Err(EloError::Config(format!("{key}.optim.lr must be > 0")));
            }
        }
        t.lora_adapters.validate()?;
        let e = &self.eval;
        if e.batch == 0 || e.bench_batch == 0 || e.bench_steps == 0 {
            return Err(EloError::Config("eval batch sizes and bench_steps must be >= 1".into()));
        }
        if e.seq_len.is_some_and(|s| s == 0 || s > self.model.max_seq_len) {
            return Err(EloError::Config("eval.seq_len out of range".into()));
        }
        for s in self.ablate_selections()? {
            s.validate_for(self.model.n_layers)?;
        }
        check_budgets(&e.align_budgets)?;
        Ok(())
    }

    /// Short hex hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        short_hash(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Budgets must be ascending, non-negative and include 0.
pub fn check_budgets(budgets: &[f64]) -> Result<()> {
    if budgets.first() != Some(&0.0) {
        return Err(EloError::Config("align budgets must start at 0".into()));
    }
    if budgets.windows(2).any(|w| !(w[0] < w[1])) || budgets.iter().any(|b| !b.is_finite()) {
        return Err(EloError::Config("align budgets must be strictly ascending".into()));
    }
    Ok(())
}

/// First 12 hex chars of SHA-256.
pub fn short_hash(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// Parses JSON; errors name the offending key path.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        EloError::Config(format!("at `{path}`: {}", e.into_inner()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| EloError::io(path, e))?;
    parse_config_str(&text).map_err(|e| match e {
        EloError::Config(m) => EloError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"model": {"n_layers": 4, "d_model": 16, "n_heads": 2, "d_ff": 32, "vocab_size": 64, "max_seq_len": 32}}"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config_str(MINIMAL).unwrap();
        assert_eq!(c.data.ratio, (1, 9));
        assert_eq!(c.selection().unwrap().indices(), &[1, 4]);
        assert_eq!(c.train.sft.plan(Method::Sft, &c.model, 0).epochs(), 10);
        assert_eq!(c.train.elo.plan(Method::Elo, &c.model, 0).seq_len, 32);
        assert_eq!(c.eval.align_budgets.len(), 9);
        assert_eq!(c.ablate_selections().unwrap().len(), 4);
    }

    #[test]
    fn ratio_parses_from_array() {
        let text = MINIMAL.replace("}}", r#"}, "data": {"ratio": [1, 9]}}"#);
        assert_eq!(parse_config_str(&text).unwrap().data.ratio, (1, 9));
        let text = MINIMAL.replace("}}", r#"}, "data": {"ratio": [0, 0]}}"#);
        assert!(matches!(parse_config_str(&text), Err(EloError::Ratio(0, 0))));
    }

    #[test]
    fn unknown_key_is_named() {
        let text = MINIMAL.replace("\"d_ff\"", "\"d_fff\"");
        let err = parse_config_str(&text).unwrap_err().to_string();
        assert!(err.contains("d_fff") && err.contains("model"), "{err}");
        let text = MINIMAL.replace("}}", r#"}, "train": {"elo": {"btach": 2}}}"#);
        let err = parse_config_str(&text).unwrap_err().to_string();
        assert!(err.contains("btach") && err.contains("train.elo"), "{err}");
        let text = MINIMAL.replace("\"n_layers\": 4", "\"n_layers\": \"four\"");
        let err = parse_config_str(&text).unwrap_err().to_string();
        assert!(err.contains("model.n_layers"), "{err}");
    }

    #[test]
    fn cross_field_validation() {
        let text = MINIMAL.replace("}}", r#"}, "train": {"selection": [1, 9]}}"#);
        assert!(parse_config_str(&text).is_err());
        let text = MINIMAL.replace("\"vocab_size\": 64", "\"vocab_size\": 40");
        assert!(parse_config_str(&text).is_err());
        assert!(check_budgets(&[0.0, 0.5, 0.5]).is_err());
        assert!(check_budgets(&[0.5, 1.0]).is_err());
        assert!(check_budgets(&[0.0, 1.0]).is_ok());
    }

    #[test]
    fn hash_is_stable() {
        let a = parse_config_str(MINIMAL).unwrap();
        let b = parse_config_str(MINIMAL).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 12);
    }
}

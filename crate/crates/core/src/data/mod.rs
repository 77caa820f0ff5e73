//! Synthetic bilingual corpora, byte-level tokenization, deterministic mixing
//! and toy instruction sets.
//!
//! Each synthetic language draws words from a seeded Markov chain over its
//! own byte alphabet. Languages only share the space and newline bytes, so
//! cross-language leakage is zero by construction.

mod batch;
mod instructions;
pub mod io;
mod tokenizer;

use std::collections::HashMap;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{EloError, Result};
use crate::tensor::rng;

pub use batch::{batchify, group_rows, rows, Batch, LossMaskMode, Row};
pub use instructions::{gen_bilingual_instructions, gen_instructions, Instruction, InstructionSet, Task};
pub use tokenizer::{Tokenizer, BOS, EOS, PAD};

/// Bytes shared by every language.
pub const SPACE: u8 = b' ';
pub const NEWLINE: u8 = b'\n';

/// Successor weights of a Markov context, most likely first.
const BRANCH_WEIGHTS: [u32; 4] = [8, 4, 2, 1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LangSpec {
    pub name: String,
    pub char_set: Vec<u8>,
    /// Letters per word, inclusive.
    pub word_len_range: (usize, usize),
    /// Words per sentence, inclusive.
    pub sentence_len_range: (usize, usize),
    /// Bytes per document, inclusive.
    pub doc_len_range: (usize, usize),
    pub markov_order: u8,
    pub transition_seed: u64,
}

impl LangSpec {
    /// Lowercase ASCII letters.
    pub fn source() -> Self {
        LangSpec {
            name: "src".into(),
            char_set: (b'a'..=b'z').collect(),
            word_len_range: (2, 7),
            sentence_len_range: (4, 12),
            doc_len_range: (384, 640),
            markov_order: 1,
            transition_seed: 11,
        }
    }

    /// Uppercase ASCII letters with an unrelated transition table.
    pub fn target() -> Self {
        LangSpec {
            name: "tgt".into(),
            char_set: (b'A'..=b'Z').collect(),
            transition_seed: 29,
            ..Self::source()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(EloError::Config(format!("language `{}`: {m}", self.name)));
        if self.name.is_empty() || self.name.contains(['\t', '\n', ' ']) {
            return err("name must be a non-empty identifier".into());
        }
        if self.char_set.is_empty() {
            return err("char_set is empty".into());
        }
        if self.char_set.iter().any(|&b| b == SPACE || b == NEWLINE) {
            return err("char_set must not contain the shared space/newline bytes".into());
        }
        let mut sorted = self.char_set.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.char_set.len() {
            return err("char_set has duplicates".into());
        }
        for (key, (lo, hi)) in [
            ("word_len_range", self.word_len_range),
            ("sentence_len_range", self.sentence_len_range),
            ("doc_len_range", self.doc_len_range),
        ] {
            if lo == 0 || lo > hi {
                return err(format!("{key} ({lo}, {hi}) is invalid"));
            }
        }
        if self.markov_order > 2 {
            return err(format!("markov_order {} not in 0..=2", self.markov_order));
        }
        Ok(())
    }

    pub fn mean_doc_len(&self) -> f64 {
        (self.doc_len_range.0 + self.doc_len_range.1) as f64 / 2.0
    }
}

/// One document with its language tag. `prompt_len` > 0 marks instruction
/// records whose first `prompt_len` bytes are the prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Doc {
    pub lang: String,
    pub text: Vec<u8>,
    #[serde(default)]
    pub prompt_len: usize,
}

/// Ordered sequence of tagged documents.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct DocStream {
    pub docs: Vec<Doc>,
    pub seed: u64,
}

impl DocStream {
    pub fn total_bytes(&self) -> usize {
        self.docs.iter().map(|d| d.text.len()).sum()
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Leading documents up to `budget` bytes; the last one is cut to fit.
    pub fn take_bytes(&self, budget: usize) -> DocStream {
        let mut docs = Vec::new();
        let mut left = budget;
        for d in &self.docs {
            if left == 0 {
                break;
            }
            let mut d = d.clone();
            if d.text.len() > left {
                d.text.truncate(left);
                d.prompt_len = d.prompt_len.min(left);
            }
            left -= d.text.len();
            docs.push(d);
        }
        DocStream { docs, seed: self.seed }
    }

    /// Documents tagged `lang`.
    pub fn filter_lang(&self, lang: &str) -> DocStream {
        DocStream {
            docs: self.docs.iter().filter(|d| d.lang == lang).cloned().collect(),
            seed: self.seed,
        }
    }

    pub fn concat(mut self, other: DocStream) -> DocStream {
        self.docs.extend(other.docs);
        self
    }
}

/// Seeded Markov word generator for one language.
struct MarkovChain<'a> {
    spec: &'a LangSpec,
    table: HashMap<Vec<u8>, Vec<u8>>,
}

impl<'a> MarkovChain<'a> {
    fn new(spec: &'a LangSpec) -> Self {
        MarkovChain {
            spec,
            table: HashMap::new(),
        }
    }

    /// Successors of `context`, most likely first. Derived lazily but
    /// deterministically from `(transition_seed, context)`.
    fn successors(&mut self, context: &[u8]) -> &[u8] {
        let spec = self.spec;
        self.table.entry(context.to_vec()).or_insert_with(|| {
            let key = format!("{}/{}", spec.name, String::from_utf8_lossy(context));
            let mut r = rng::named_stream(spec.transition_seed, &key);
            let k = BRANCH_WEIGHTS.len().min(spec.char_set.len());
            rand::seq::index::sample(&mut r, spec.char_set.len(), k)
                .into_iter()
                .map(|i| spec.char_set[i])
                .collect()
        })
    }

    fn next_char(&mut self, word: &[u8], r: &mut impl RngCore) -> u8 {
        let order = self.spec.markov_order as usize;
        let ctx_len = order.min(word.len());
        // Word-initial contexts are distinguished from mid-word ones by length.
        let context = &word[word.len() - ctx_len..];
        let succ = self.successors(if order == 0 { &[] } else { context });
        let weights = &BRANCH_WEIGHTS[..succ.len()];
        let total: u32 = weights.iter().sum();
        let mut pick = r.random_range(0..total);
        for (i, &w) in weights.iter().enumerate() {
            if pick < w {
                return succ[i];
            }
            pick -= w;
        }
        unreachable!("weights cover the sampled range")
    }

    fn word(&mut self, r: &mut impl RngCore) -> Vec<u8> {
        let (lo, hi) = self.spec.word_len_range;
        let len = r.random_range(lo..=hi);
        let mut w = Vec::with_capacity(len);
        for _ in 0..len {
            let c = self.next_char(&w, r);
            w.push(c);
        }
        w
    }

    fn sentence(&mut self, r: &mut impl RngCore) -> Vec<u8> {
        let (lo, hi) = self.spec.sentence_len_range;
        let n = r.random_range(lo..=hi);
        let mut s = Vec::new();
        for i in 0..n {
            if i > 0 {
                s.push(SPACE);
            }
            s.extend(self.word(r));
        }
        s.push(NEWLINE);
        s
    }
}

/// Generates `n_docs` documents; each length is uniform in `doc_len_range`.
pub fn gen_corpus(spec: &LangSpec, n_docs: usize, seed: u64) -> Result<DocStream> {
    spec.validate()?;
    if n_docs == 0 {
        return Err(EloError::Config("gen_corpus needs n_docs >= 1".into()));
    }
    let mut chain = MarkovChain::new(spec);
    let mut r = rng::named_stream(seed, &format!("corpus/{}", spec.name));
    let (lo, hi) = spec.doc_len_range;
    let docs = (0..n_docs)
        .map(|_| {
            let len = r.random_range(lo..=hi);
            let mut text = Vec::with_capacity(len + 64);
            while text.len() < len {
                text.extend(chain.sentence(&mut r));
            }
            text.truncate(len);
            Doc {
                lang: spec.name.clone(),
                text,
                prompt_len: 0,
            }
        })
        .collect();
    Ok(DocStream { docs, seed })
}

/// Corpus of roughly `bytes` bytes (whole documents, at least one).
pub fn gen_corpus_bytes(spec: &LangSpec, bytes: usize, seed: u64) -> Result<DocStream> {
    let n = ((bytes as f64 / spec.mean_doc_len()).ceil() as usize).max(1);
    gen_corpus(spec, n, seed)
}

/// Block interleave: every window holds `src_parts` source documents
/// followed by `tgt_parts` target documents. Stops as soon as a stream that
/// is needed runs out.
pub fn mix_streams(source: &DocStream, target: &DocStream, ratio: (usize, usize)) -> Result<DocStream> {
    let (sp, tp) = ratio;
    if sp == 0 && tp == 0 {
        return Err(EloError::Ratio(sp, tp));
    }
    let (mut si, mut ti) = (source.docs.iter(), target.docs.iter());
    let mut docs = Vec::new();
    'outer: loop {
        for _ in 0..sp {
            match si.next() {
                Some(d) => docs.push(d.clone()),
                None => break 'outer,
            }
        }
        for _ in 0..tp {
            match ti.next() {
                Some(d) => docs.push(d.clone()),
                None => break 'outer,
            }
        }
    }
    Ok(DocStream {
        docs,
        seed: source.seed ^ target.seed.rotate_left(1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic() {
        let a = gen_corpus(&LangSpec::source(), 5, 3).unwrap();
        let b = gen_corpus(&LangSpec::source(), 5, 3).unwrap();
        assert_eq!(a, b);
        let c = gen_corpus(&LangSpec::source(), 5, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn languages_are_disjoint() {
        let src = LangSpec::source();
        let tgt = LangSpec::target();
        let a = gen_corpus(&src, 20, 1).unwrap();
        let b = gen_corpus(&tgt, 20, 1).unwrap();
        for d in &a.docs {
            assert!(d.text.iter().all(|c| !tgt.char_set.contains(c)));
        }
        for d in &b.docs {
            assert!(d.text.iter().all(|c| !src.char_set.contains(c)));
        }
    }

    #[test]
    fn doc_lengths_and_total() {
        let spec = LangSpec::source();
        let s = gen_corpus(&spec, 100, 9).unwrap();
        for d in &s.docs {
            assert!((384..=640).contains(&d.text.len()));
        }
        // mean 512, uniform on [384, 640]: sd of the total is 100·sqrt(257²/12)/10 ≈ 742
        let total = s.total_bytes() as f64;
        assert!((total - 51_200.0).abs() < 4.0 * 742.0, "{total}");
        assert!(total >= 38_400.0 && total <= 64_000.0);
    }

    #[test]
    fn mix_ratio_schedule() {
        let src = gen_corpus(&LangSpec::source(), 10, 1).unwrap();
        let tgt = gen_corpus(&LangSpec::target(), 30, 1).unwrap();
        let m = mix_streams(&src, &tgt, (1, 9)).unwrap();
        let first20: Vec<usize> = m.docs[..20]
            .iter()
            .enumerate()
            .filter(|(_, d)| d.lang == "src")
            .map(|(i, _)| i)
            .collect();
        assert_eq!(first20, vec![0, 10]);
        // 3 full windows, then 1 + 3 before the target runs out
        assert_eq!(m.len(), 34);
        let full = &m.docs[..30];
        assert_eq!(full.iter().filter(|d| d.lang == "src").count(), 3);

        let pure = mix_streams(&src, &tgt, (0, 1)).unwrap();
        assert!(pure.docs.iter().all(|d| d.lang == "tgt"));
        assert_eq!(pure.len(), 30);

        let alt = mix_streams(&src, &tgt, (1, 1)).unwrap();
        for (i, d) in alt.docs.iter().enumerate() {
            assert_eq!(d.lang, if i % 2 == 0 { "src" } else { "tgt" });
        }
        assert!(matches!(mix_streams(&src, &tgt, (0, 0)), Err(EloError::Ratio(0, 0))));
    }

    #[test]
    fn spec_validation() {
        let mut s = LangSpec::source();
        s.char_set.push(b' ');
        assert!(s.validate().is_err());
        let mut s = LangSpec::source();
        s.word_len_range = (5, 2);
        assert!(s.validate().is_err());
        let mut s = LangSpec::source();
        s.char_set.clear();
        assert!(s.validate().is_err());
        for order in 0..=2 {
            let mut s = LangSpec::source();
            s.markov_order = order;
            assert!(gen_corpus(&s, 2, 0).is_ok());
        }
    }

    #[test]
    fn take_bytes_caps_budget() {
        let s = gen_corpus(&LangSpec::source(), 10, 1).unwrap();
        assert_eq!(s.take_bytes(1000).total_bytes(), 1000);
        assert!(s.take_bytes(0).is_empty());
        assert_eq!(s.take_bytes(usize::MAX), s);
    }
}

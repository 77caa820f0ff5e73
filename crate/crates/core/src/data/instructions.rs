//! Toy instruction sets with exact-match gradable responses.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Doc, DocStream, LangSpec, NEWLINE, SPACE};
use crate::error::{EloError, Result};
use crate::tensor::rng;

const KEYWORD_LEN: usize = 3;
const PAYLOAD_LEN: (usize, usize) = (1, 5);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Copy,
    Reverse,
    /// Shifts every symbol by half the alphabet, like a case flip.
    UppercaseAnalog,
    /// Answers with the symbol whose index is the payload length.
    Count,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Copy, Task::Reverse, Task::UppercaseAnalog, Task::Count];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::UppercaseAnalog => "uppercase-analog",
            Task::Count => "count",
        }
    }

    /// Reference answer for `payload` in a language with `char_set`.
    pub fn respond(self, payload: &[u8], char_set: &[u8]) -> Vec<u8> {
        match self {
            Task::Copy => payload.to_vec(),
            Task::Reverse => payload.iter().rev().copied().collect(),
            Task::UppercaseAnalog => {
                let n = char_set.len();
                payload
                    .iter()
                    .map(|b| match char_set.iter().position(|c| c == b) {
                        Some(i) => char_set[(i + n / 2) % n],
                        None => *b,
                    })
                    .collect()
            }
            Task::Count => vec![char_set[payload.len() % char_set.len()]],
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = EloError;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| EloError::Config(format!("unknown task `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub prompt: Vec<u8>,
    pub response: Vec<u8>,
    pub lang: String,
    pub task: Task,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct InstructionSet {
    pub items: Vec<Instruction>,
}

impl InstructionSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn langs(&self) -> Vec<String> {
        let mut v: Vec<String> = self.items.iter().map(|i| i.lang.clone()).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn filter_lang(&self, lang: &str) -> InstructionSet {
        InstructionSet {
            items: self.items.iter().filter(|i| i.lang == lang).cloned().collect(),
        }
    }

    /// Drops every item whose prompt also appears in `other`.
    pub fn excluding(&self, other: &InstructionSet) -> InstructionSet {
        let seen: HashSet<&[u8]> = other.items.iter().map(|i| i.prompt.as_slice()).collect();
        InstructionSet {
            items: self
                .items
                .iter()
                .filter(|i| !seen.contains(i.prompt.as_slice()))
                .cloned()
                .collect(),
        }
    }

    /// Prompt followed by response, one document per record.
    pub fn to_stream(&self, seed: u64) -> DocStream {
        DocStream {
            docs: self
                .items
                .iter()
                .map(|i| {
                    let mut text = i.prompt.clone();
                    text.extend_from_slice(&i.response);
                    Doc {
                        lang: i.lang.clone(),
                        text,
                        prompt_len: i.prompt.len(),
                    }
                })
                .collect(),
            seed,
        }
    }
}

/// Per-language task keyword, distinct across tasks.
fn keywords(spec: &LangSpec) -> Vec<Vec<u8>> {
    let mut r = rng::named_stream(spec.transition_seed, &format!("{}/keywords", spec.name));
    let mut out: Vec<Vec<u8>> = Vec::new();
    while out.len() < Task::ALL.len() {
        let kw: Vec<u8> = (0..KEYWORD_LEN)
            .map(|_| spec.char_set[r.random_range(0..spec.char_set.len())])
            .collect();
        if !out.contains(&kw) || spec.char_set.len() == 1 {
            out.push(kw);
        }
    }
    out
}

/// `n` records cycling through the tasks. Prompts read `keyword payload\n`.
pub fn gen_instructions(spec: &LangSpec, n: usize, seed: u64) -> Result<InstructionSet> {
    spec.validate()?;
    if n == 0 {
        return Err(EloError::Config("gen_instructions needs n >= 1".into()));
    }
    let kws = keywords(spec);
    let mut r = rng::named_stream(seed, &format!("instructions/{}", spec.name));
    let items = (0..n)
        .map(|k| {
            let t = k % Task::ALL.len();
            let task = Task::ALL[t];
            let len = r.random_range(PAYLOAD_LEN.0..=PAYLOAD_LEN.1);
            let payload: Vec<u8> = (0..len)
                .map(|_| spec.char_set[r.random_range(0..spec.char_set.len())])
                .collect();
            let mut prompt = kws[t].clone();
            prompt.push(SPACE);
            prompt.extend_from_slice(&payload);
            prompt.push(NEWLINE);
            Instruction {
                response: task.respond(&payload, &spec.char_set),
                prompt,
                lang: spec.name.clone(),
                task,
            }
        })
        .collect();
    Ok(InstructionSet { items })
}

/// Round-robin over both languages, `n` records in total.
pub fn gen_bilingual_instructions(a: &LangSpec, b: &LangSpec, n: usize, seed: u64) -> Result<InstructionSet> {
    if n < 2 {
        return Err(EloError::Config("bilingual instructions need n >= 2".into()));
    }
    let xs = gen_instructions(a, n.div_ceil(2), seed)?;
    let ys = gen_instructions(b, n / 2, seed)?;
    let mut items = Vec::with_capacity(n);
    let mut yi = ys.items.into_iter();
    for x in xs.items {
        items.push(x);
        items.extend(yi.next());
    }
    Ok(InstructionSet { items })
}

//! Text formats for corpora and instruction sets.
//!
//! A corpus is one document per line with `\\`, `\n` and `\t` escaped, plus a
//! JSON sidecar carrying the seed, the language specs and per-line tags.
//! Instruction sets are `prompt \t response \t lang \t task` per line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Doc, DocStream, Instruction, InstructionSet, LangSpec, Task};
use crate::error::{EloError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusMeta {
    pub seed: u64,
    pub specs: Vec<LangSpec>,
    pub langs: Vec<String>,
    pub prompt_lens: Vec<usize>,
}

pub fn escape(bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(bytes.len());
    for &b in bytes {
        match b {
            b'\\' => out.extend_from_slice(b"\\\\"),
            b'\n' => out.extend_from_slice(b"\\n"),
            b'\t' => out.extend_from_slice(b"\\t"),
            _ => out.push(b),
        }
    }
    out
}

pub fn unescape(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(bytes.len());
    let mut it = bytes.iter();
    while let Some(&b) = it.next() {
        if b != b'\\' {
            out.push(b);
            continue;
        }
        match it.next() {
            Some(b'\\') => out.push(b'\\'),
            Some(b'n') => out.push(b'\n'),
            Some(b't') => out.push(b'\t'),
            other => return Err(EloError::Format(format!("bad escape sequence {other:?}"))),
        }
    }
    Ok(out)
}

/// Sidecar path: `corpus.txt` -> `corpus.txt.meta.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn lines(raw: &[u8]) -> impl Iterator<Item = &[u8]> {
    let body = raw.strip_suffix(b"\n").unwrap_or(raw);
    body.split(|&b| b == b'\n').filter(move |_| !raw.is_empty())
}

pub fn write_corpus(path: &Path, stream: &DocStream, specs: &[LangSpec]) -> Result<()> {
    let mut text = Vec::with_capacity(stream.total_bytes() + stream.len());
    for d in &stream.docs {
        text.extend(escape(&d.text));
        text.push(b'\n');
    }
    let meta = CorpusMeta {
        seed: stream.seed,
        specs: specs.to_vec(),
        langs: stream.docs.iter().map(|d| d.lang.clone()).collect(),
        prompt_lens: stream.docs.iter().map(|d| d.prompt_len).collect(),
    };
    fs::write(path, text).map_err(|e| EloError::io(path, e))?;
    let mp = meta_path(path);
    let json = serde_json::to_vec_pretty(&meta).map_err(|e| EloError::Format(e.to_string()))?;
    fs::write(&mp, json).map_err(|e| EloError::io(&mp, e))
}

pub fn read_corpus(path: &Path) -> Result<(DocStream, CorpusMeta)> {
    let raw = fs::read(path).map_err(|e| EloError::io(path, e))?;
    let mp = meta_path(path);
    let meta_raw = fs::read(&mp).map_err(|e| EloError::io(&mp, e))?;
    let meta: CorpusMeta =
        serde_json::from_slice(&meta_raw).map_err(|e| EloError::Format(format!("{}: {e}", mp.display())))?;
    let texts: Vec<Vec<u8>> = lines(&raw).map(unescape).collect::<Result<_>>()?;
    if texts.len() != meta.langs.len() || texts.len() != meta.prompt_lens.len() {
        return Err(EloError::Format(format!(
            "{}: {} documents but sidecar lists {}",
            path.display(),
            texts.len(),
            meta.langs.len()
        )));
    }
    let docs = texts
        .into_iter()
        .zip(meta.langs.iter().zip(&meta.prompt_lens))
        .map(|(text, (lang, &prompt_len))| Doc {
            lang: lang.clone(),
            text,
            prompt_len,
        })
        .collect();
    Ok((DocStream { docs, seed: meta.seed }, meta))
}

pub fn write_instructions(path: &Path, set: &InstructionSet) -> Result<()> {
    let mut out = Vec::new();
    for i in &set.items {
        out.extend(escape(&i.prompt));
        out.push(b'\t');
        out.extend(escape(&i.response));
        out.push(b'\t');
        out.extend(escape(i.lang.as_bytes()));
        out.push(b'\t');
        out.extend_from_slice(i.task.as_str().as_bytes());
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| EloError::io(path, e))
}

pub fn read_instructions(path: &Path) -> Result<InstructionSet> {
    let raw = fs::read(path).map_err(|e| EloError::io(path, e))?;
    let mut items = Vec::new();
    for (n, line) in lines(&raw).enumerate() {
        let fields: Vec<&[u8]> = line.split(|&b| b == b'\t').collect();
        let [prompt, response, lang, task] = fields[..] else {
            return Err(EloError::Format(format!(
                "{}:{}: expected 4 tab-separated fields, got {}",
                path.display(),
                n + 1,
                fields.len()
            )));
        };
        let lang = String::from_utf8(unescape(lang)?).map_err(|e| EloError::Format(e.to_string()))?;
        let task: Task = std::str::from_utf8(task)
            .map_err(|e| EloError::Format(e.to_string()))?
            .parse()?;
        items.push(Instruction {
            prompt: unescape(prompt)?,
            response: unescape(response)?,
            lang,
            task,
        });
    }
    Ok(InstructionSet { items })
}

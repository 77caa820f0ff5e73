//! Next-token batches.

use serde::{Deserialize, Serialize};

use super::tokenizer::{Tokenizer, BOS, EOS, PAD};
use super::DocStream;
use crate::error::{EloError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMaskMode {
    /// Documents are packed back to back; every real target counts.
    All,
    /// One record per row; only response tokens and the final EOS count.
    ResponseOnly,
}

/// One training row: inputs, shifted targets, and the loss mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Row {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Row {
    fn padding(seq: usize) -> Self {
        Row {
            tokens: vec![PAD; seq],
            targets: vec![PAD; seq],
            mask: vec![false; seq],
        }
    }

    fn from_window(window: &[usize], seq: usize, mask_from: usize) -> Self {
        let mut row = Row::padding(seq);
        let n = window.len() - 1;
        row.tokens[..n].copy_from_slice(&window[..n]);
        row.targets[..n].copy_from_slice(&window[1..]);
        for m in &mut row.mask[mask_from.min(n)..n] {
            *m = true;
        }
        row
    }
}

/// A `[batch, seq]` block, flattened row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn unmasked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Splits a stream into rows of `seq_len` positions.
pub fn rows(stream: &DocStream, tok: &Tokenizer, seq_len: usize, mode: LossMaskMode) -> Result<Vec<Row>> {
    if stream.is_empty() || stream.total_bytes() == 0 {
        return Err(EloError::EmptyData("document stream is empty".into()));
    }
    if seq_len == 0 {
        return Err(EloError::Config("seq_len must be >= 1".into()));
    }
    let mut out = Vec::new();
    match mode {
        LossMaskMode::All => {
            let mut ids = Vec::with_capacity(stream.total_bytes() + 2 * stream.len());
            for d in &stream.docs {
                ids.push(BOS);
                ids.extend(tok.encode(&d.text)?);
                ids.push(EOS);
            }
            let mut start = 0;
            while start + 1 < ids.len() {
                let end = (start + seq_len + 1).min(ids.len());
                out.push(Row::from_window(&ids[start..end], seq_len, 0));
                start += seq_len;
            }
        }
        LossMaskMode::ResponseOnly => {
            for d in &stream.docs {
                let mut ids = Vec::with_capacity(d.text.len() + 2);
                ids.push(BOS);
                ids.extend(tok.encode(&d.text)?);
                ids.push(EOS);
                ids.truncate(seq_len + 1);
                out.push(Row::from_window(&ids, seq_len, d.prompt_len));
            }
        }
    }
    Ok(out)
}

/// Groups rows into batches; the last batch is filled with masked padding rows.
pub fn group_rows(rows: &[Row], batch: usize) -> Vec<Batch> {
    assert!(batch > 0, "batch must be >= 1");
    let Some(seq) = rows.first().map(|r| r.tokens.len()) else {
        return Vec::new();
    };
    rows.chunks(batch)
        .map(|chunk| {
            let mut b = Batch {
                tokens: Vec::with_capacity(batch * seq),
                targets: Vec::with_capacity(batch * seq),
                mask: Vec::with_capacity(batch * seq),
                batch,
                seq,
            };
            let pad = Row::padding(seq);
            for r in chunk.iter().chain(std::iter::repeat(&pad).take(batch - chunk.len())) {
                b.tokens.extend_from_slice(&r.tokens);
                b.targets.extend_from_slice(&r.targets);
                b.mask.extend_from_slice(&r.mask);
            }
            b
        })
        .collect()
}

/// Rows grouped in stream order.
pub fn batchify(stream: &DocStream, tok: &Tokenizer, batch: usize, seq_len: usize, mode: LossMaskMode) -> Result<Vec<Batch>> {
    if batch == 0 {
        return Err(EloError::Config("batch must be >= 1".into()));
    }
    Ok(group_rows(&rows(stream, tok, seq_len, mode)?, batch))
}

//! Byte-level tokenizer: ids 0..=255 are raw bytes, then BOS and PAD.

use crate::error::{contract, Result};

pub const BOS: usize = 256;
pub const PAD: usize = 257;
pub const BYTE_VOCAB: usize = 258;

/// `[BOS, bytes…, PAD…]` truncated or padded to exactly `max_len` ids.
pub fn tokenize(text: &str, max_len: usize) -> Vec<usize> {
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.extend(text.bytes().map(usize::from));
    ids.truncate(max_len);
    ids.resize(max_len, PAD);
    ids
}

/// Drop BOS/PAD (and any id outside the byte range) and decode the rest.
pub fn detokenize(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// A batch of token rows, right-padded to a common length.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    lens: Vec<usize>,
    seq: usize,
}

impl TokenBatch {
    /// Build from unpadded rows; every row needs at least two tokens.
    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        if rows.is_empty() {
            return contract("token batch needs at least one row");
        }
        let seq = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * seq);
        let mut lens = Vec::with_capacity(rows.len());
        for r in rows {
            if r.len() < 2 {
                return contract(format!("row has {} tokens, need at least 2", r.len()));
            }
            if r.iter().any(|&t| t == PAD) {
                return contract("unpadded row contains PAD");
            }
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat_n(PAD, seq - r.len()));
            lens.push(r.len());
        }
        Ok(TokenBatch { ids, lens, seq })
    }

    /// Tokenize texts (BOS + bytes, capped at `max_len`) into one batch.
    pub fn from_texts<S: AsRef<str>>(texts: &[S], max_len: usize) -> Result<Self> {
        let rows: Vec<Vec<usize>> = texts
            .iter()
            .map(|t| {
                let mut r = tokenize(t.as_ref(), max_len);
                r.retain(|&x| x != PAD);
                r
            })
            .collect();
        Self::from_rows(&rows)
    }

    pub fn batch_size(&self) -> usize {
        self.lens.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq..b * self.seq + self.lens[b]]
    }

    pub fn rows(&self) -> Vec<Vec<usize>> {
        (0..self.batch_size())
            .map(|b| self.row(b).to_vec())
            .collect()
    }

    /// `true` at padded positions, row-major `B×S`.
    pub fn pad_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.ids.len());
        for &l in &self.lens {
            m.extend((0..self.seq).map(|t| t >= l));
        }
        m
    }

    /// Copy of this batch with the token ids replaced (same lengths/padding).
    pub fn with_ids(&self, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != self.ids.len() {
            return contract("replacement ids do not match batch extent");
        }
        Ok(TokenBatch {
            ids,
            lens: self.lens.clone(),
            seq: self.seq,
        })
    }
}

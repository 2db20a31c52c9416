//! Word-level reconstruction metrics: ROUGE-1, ROUGE-L, METEOR without
//! stemming or synonyms, and an order-free token recovery rate.

use std::collections::HashMap;

use crate::attacks::AttackResult;
use crate::error::{contract, Error, Result};
use crate::model::{detokenize, TokenBatch, BOS, PAD};

/// Lowercased whitespace-separated words.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WordSeq(Vec<String>);

impl WordSeq {
    pub fn new(text: &str) -> Self {
        WordSeq(text.split_whitespace().map(str::to_lowercase).collect())
    }

    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Self {
        WordSeq(
            words
                .iter()
                .map(|w| w.as_ref().to_lowercase())
                .filter(|w| !w.is_empty())
                .collect(),
        )
    }

    pub fn words(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn f1(overlap: usize, cand: usize, refr: usize) -> f64 {
    if overlap == 0 || cand == 0 || refr == 0 {
        return 0.0;
    }
    // harmonic mean of P and R, in the form with a single rounding
    (2 * overlap) as f64 / (cand + refr) as f64
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_f1(candidate: &WordSeq, reference: &WordSeq) -> f64 {
    f1(
        lcs_len(&candidate.0, &reference.0),
        candidate.len(),
        reference.len(),
    )
}

fn counts<T: std::hash::Hash + Eq + Clone>(xs: &[T]) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for x in xs {
        *m.entry(x.clone()).or_insert(0) += 1;
    }
    m
}

fn clipped_overlap<T: std::hash::Hash + Eq + Clone>(a: &[T], b: &[T]) -> usize {
    let cb = counts(b);
    counts(a)
        .iter()
        .map(|(k, n)| (*n).min(cb.get(k).copied().unwrap_or(0)))
        .sum()
}

pub fn rouge_1_f1(candidate: &WordSeq, reference: &WordSeq) -> f64 {
    f1(
        clipped_overlap(&candidate.0, &reference.0),
        candidate.len(),
        reference.len(),
    )
}

/// Multiset overlap over `|reference|`; PAD and BOS are dropped first.
pub fn token_recovery_rate(candidate: &[usize], reference: &[usize]) -> Result<f64> {
    let keep = |xs: &[usize]| -> Vec<usize> {
        xs.iter()
            .copied()
            .filter(|&t| t != PAD && t != BOS)
            .collect()
    };
    let (c, r) = (keep(candidate), keep(reference));
    if r.is_empty() {
        return contract("token recovery rate needs a non-empty reference");
    }
    Ok(clipped_overlap(&c, &r) as f64 / r.len() as f64)
}

/// Search nodes explored before falling back to the greedy alignment.
const METEOR_SEARCH_LIMIT: usize = 200_000;

struct Aligner<'a> {
    cand: &'a [String],
    refs: &'a [String],
    used: Vec<bool>,
    /// Matches still owed per candidate position's word.
    owed: HashMap<&'a str, usize>,
    /// Occurrences of each word in `cand[i..]`.
    left: Vec<usize>,
    best: usize,
    nodes: usize,
}

impl Aligner<'_> {
    fn search(&mut self, i: usize, prev: Option<usize>, chunks: usize) {
        self.nodes += 1;
        if chunks >= self.best || self.nodes > METEOR_SEARCH_LIMIT {
            return;
        }
        if i == self.cand.len() {
            self.best = chunks;
            return;
        }
        let w = self.cand[i].as_str();
        let owed = self.owed.get(w).copied().unwrap_or(0);
        if owed > 0 {
            // continuing the current chunk first finds good bounds early
            let mut order: Vec<usize> = (0..self.refs.len())
                .filter(|&j| !self.used[j] && self.refs[j] == w)
                .collect();
            if let Some(p) = prev {
                order.sort_by_key(|&j| j != p + 1);
            }
            for j in order {
                self.used[j] = true;
                *self.owed.get_mut(w).expect("owed word") -= 1;
                let extra = usize::from(prev != Some(j.wrapping_sub(1)) || j == 0);
                self.search(i + 1, Some(j), chunks + extra);
                *self.owed.get_mut(w).expect("owed word") += 1;
                self.used[j] = false;
            }
        }
        if self.left[i] > owed {
            self.search(i + 1, None, chunks);
        }
    }
}

/// Chunk count of a greedy left-to-right alignment with maximal matches.
fn greedy_chunks(cand: &[String], refs: &[String]) -> usize {
    let mut owed = counts(refs);
    for (k, v) in owed.iter_mut() {
        *v = (*v).min(cand.iter().filter(|c| *c == k).count());
    }
    let mut used = vec![false; refs.len()];
    let mut prev: Option<usize> = None;
    let mut chunks = 0;
    for w in cand {
        let o = owed.get_mut(w);
        match o {
            Some(n) if *n > 0 => {
                let pick = prev
                    .map(|p| p + 1)
                    .filter(|&j| j < refs.len() && !used[j] && refs[j] == *w)
                    .or_else(|| (0..refs.len()).find(|&j| !used[j] && refs[j] == *w))
                    .expect("owed match exists");
                if prev.is_none_or(|p| p + 1 != pick) {
                    chunks += 1;
                }
                used[pick] = true;
                *n -= 1;
                prev = Some(pick);
            }
            _ => prev = None,
        }
    }
    chunks
}

/// Unigram matches and the minimal number of chunks among maximal alignments.
pub fn meteor_alignment(candidate: &WordSeq, reference: &WordSeq) -> (usize, usize) {
    let (cand, refs) = (&candidate.0, &reference.0);
    let matches = clipped_overlap(cand, refs);
    if matches == 0 {
        return (0, 0);
    }
    let cr = counts(refs);
    let cc = counts(cand);
    let owed: HashMap<&str, usize> = cc
        .iter()
        .map(|(k, n)| (k.as_str(), (*n).min(cr.get(k).copied().unwrap_or(0))))
        .collect();
    let mut left = vec![0usize; cand.len()];
    for i in (0..cand.len()).rev() {
        left[i] = cand[i..].iter().filter(|w| **w == cand[i]).count();
    }
    let greedy = greedy_chunks(cand, refs);
    let mut a = Aligner {
        cand,
        refs,
        used: vec![false; refs.len()],
        owed,
        left,
        best: greedy + 1,
        nodes: 0,
    };
    a.search(0, None, 0);
    (matches, a.best.min(greedy))
}

pub fn meteor_lite(candidate: &WordSeq, reference: &WordSeq) -> f64 {
    let (m, chunks) = meteor_alignment(candidate, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

/// An annotated entity in a marked corpus line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Span {
    pub kind: String,
    /// Byte range in the unmarked text.
    pub start: usize,
    pub end: usize,
}

pub const MARK_OPEN: char = '⟦';
pub const MARK_CLOSE: char = '⟧';

/// Strip `⟦TYPE|surface⟧` markers, returning the plain text and the spans.
pub fn parse_marked(line: &str) -> Result<(String, Vec<Span>)> {
    let mut plain = String::with_capacity(line.len());
    let mut spans = Vec::new();
    let mut rest = line;
    while let Some(i) = rest.find(MARK_OPEN) {
        plain.push_str(&rest[..i]);
        let after = &rest[i + MARK_OPEN.len_utf8()..];
        let Some(j) = after.find(MARK_CLOSE) else {
            return contract(format!("unterminated entity marker in {line:?}"));
        };
        let Some((kind, surface)) = after[..j].split_once('|') else {
            return contract(format!("entity marker without type in {line:?}"));
        };
        let start = plain.len();
        plain.push_str(surface);
        spans.push(Span {
            kind: kind.to_string(),
            start,
            end: plain.len(),
        });
        rest = &after[j + MARK_CLOSE.len_utf8()..];
    }
    plain.push_str(rest);
    Ok((plain, spans))
}

/// Words of `text` covered by the byte ranges of `spans` (clamped to the text).
pub fn restrict_to_spans(text: &[u8], spans: &[Span]) -> WordSeq {
    let mut words = Vec::new();
    for s in spans {
        let (a, b) = (s.start.min(text.len()), s.end.min(text.len()));
        words.extend(
            String::from_utf8_lossy(&text[a..b])
                .split_whitespace()
                .map(str::to_lowercase),
        );
    }
    WordSeq(words)
}

/// All four scores for one reconstruction.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Scores {
    pub rouge1_f1: f64,
    pub rouge_l_f1: f64,
    pub meteor_lite: f64,
    pub trr: f64,
}

pub fn score_words(candidate: &WordSeq, reference: &WordSeq) -> (f64, f64, f64) {
    (
        rouge_1_f1(candidate, reference),
        rouge_l_f1(candidate, reference),
        meteor_lite(candidate, reference),
    )
}

/// Scores of one reconstructed row against its reference row.
pub fn score_ids(candidate: &[usize], reference: &[usize]) -> Result<Scores> {
    let (c, r) = (
        WordSeq::new(&detokenize(candidate)),
        WordSeq::new(&detokenize(reference)),
    );
    let (rouge1_f1, rouge_l_f1, meteor_lite) = score_words(&c, &r);
    Ok(Scores {
        rouge1_f1,
        rouge_l_f1,
        meteor_lite,
        trr: token_recovery_rate(candidate, reference)?,
    })
}

/// Mean of per-row scores; `candidate` is `B·S` row-major like `reference`.
pub fn score_batch(candidate: &[usize], reference: &TokenBatch) -> Result<Scores> {
    let s = reference.seq_len();
    if candidate.len() != reference.batch_size() * s {
        return Err(Error::Shape {
            op: "score_batch",
            lhs: vec![candidate.len()],
            rhs: vec![reference.batch_size(), s],
        });
    }
    let mut acc = Scores::default();
    for (r, &l) in reference.lens().iter().enumerate() {
        let x = score_ids(&candidate[r * s..r * s + l], &reference.row(r)[..l])?;
        acc.rouge1_f1 += x.rouge1_f1;
        acc.rouge_l_f1 += x.rouge_l_f1;
        acc.meteor_lite += x.meteor_lite;
        acc.trr += x.trr;
    }
    let n = reference.batch_size() as f64;
    Ok(Scores {
        rouge1_f1: acc.rouge1_f1 / n,
        rouge_l_f1: acc.rouge_l_f1 / n,
        meteor_lite: acc.meteor_lite / n,
        trr: acc.trr / n,
    })
}

impl AttackResult {
    /// Fill `scores` for every stage against the reference batch.
    pub fn score(&mut self, reference: &TokenBatch) -> Result<()> {
        for (stage, out) in &self.stages {
            self.scores
                .insert(*stage, score_batch(&out.tokens, reference)?);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> WordSeq {
        WordSeq::new(s)
    }

    #[test]
    fn hand_cases() {
        assert_eq!(rouge_l_f1(&w("a c"), &w("a b c")), 0.8);
        assert!((rouge_1_f1(&w("a a b"), &w("a b b")) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rouge_1_f1(&w(""), &w("a")), 0.0);
        assert_eq!(
            token_recovery_rate(&[5, 5, 7], &[5, 7, 9]).unwrap(),
            2.0 / 3.0
        );
        assert_eq!(token_recovery_rate(&[1, 2, 3], &[3, 2, 1]).unwrap(), 1.0);
        assert!(token_recovery_rate(&[1], &[PAD]).is_err());
    }

    #[test]
    fn meteor_identical_five_words() {
        let s = w("one two three four five");
        assert!((meteor_lite(&s, &s) - 0.996).abs() < 1e-12);
        assert_eq!(meteor_lite(&w("x y"), &s), 0.0);
    }

    #[test]
    fn meteor_prefers_fewest_chunks_under_repeats() {
        // greedy takes the first "the" and splits the phrase; the search does not
        let r = w("the cat saw the dog");
        let c = w("the dog");
        assert_eq!(meteor_alignment(&c, &r), (2, 1));
    }

    #[test]
    fn marked_lines_parse() {
        let (p, s) = parse_marked("Hi ⟦PERSON|Ann Lee⟧ from ⟦GPE|Oslo⟧.").unwrap();
        assert_eq!(p, "Hi Ann Lee from Oslo.");
        assert_eq!(&p[s[0].start..s[0].end], "Ann Lee");
        assert_eq!(s[1].kind, "GPE");
        assert_eq!(restrict_to_spans(p.as_bytes(), &s), w("ann lee oslo"));
        assert!(parse_marked("bad ⟦PERSON|x").is_err());
    }
}

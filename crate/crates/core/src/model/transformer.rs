//! Pre-norm decoder blocks (RMS-norm, causal multi-head attention, gated SiLU
//! MLP) evaluated over any contiguous range of the model.

use super::params::{block_prefix, Bound, ModelConfig};
use super::tokenizer::{TokenBatch, PAD};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{contract, Error, Result};

/// A contiguous piece of the model: optional embedding, blocks `[start, end)`,
/// optional final norm + LM head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub embed: bool,
    pub start: usize,
    pub end: usize,
    pub head: bool,
}

impl Segment {
    pub fn full(cfg: &ModelConfig) -> Self {
        Segment {
            embed: true,
            start: 0,
            end: cfg.blocks,
            head: true,
        }
    }

    pub fn blocks(start: usize, end: usize) -> Self {
        Segment {
            embed: false,
            start,
            end,
            head: false,
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.start > self.end || self.end > cfg.blocks {
            return Err(Error::Config(format!(
                "block range [{}, {}) invalid for {} blocks",
                self.start, self.end, cfg.blocks
            )));
        }
        if self.embed && self.start != 0 {
            return Err(Error::Config("embedding must precede block 0".into()));
        }
        if self.head && self.end != cfg.blocks {
            return Err(Error::Config("head must follow the last block".into()));
        }
        Ok(())
    }
}

pub enum SegmentInput<'a> {
    /// Token ids; the segment must start with the embedding.
    Tokens(&'a TokenBatch),
    /// Token embeddings `[B, S, H]` before positions are added.
    Embeddings(Var),
    /// Hidden states `[B, S, H]` entering block `start`.
    Hidden(Var),
}

/// Run `seg` on `input`. `lens` gives each row's non-pad length; pad keys are
/// masked in attention and attention is causal throughout.
pub fn forward_segment(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    seg: Segment,
    input: SegmentInput<'_>,
    lens: &[usize],
) -> Result<Var> {
    seg.validate(cfg)?;
    let mut x = match input {
        SegmentInput::Tokens(batch) => {
            if !seg.embed {
                return contract("token input requires the embedding in the segment");
            }
            if batch.lens() != lens {
                return contract("lens disagree with the token batch");
            }
            let (b, s) = (batch.batch_size(), batch.seq_len());
            // pad slots may hold PAD beyond a small vocabulary; they never reach valid positions
            let mut ids = batch.ids().to_vec();
            for (r, &l) in lens.iter().enumerate() {
                for (t, id) in ids[r * s..(r + 1) * s].iter_mut().enumerate() {
                    if *id >= cfg.vocab_size {
                        if t < l {
                            return Err(Error::Index {
                                op: "token embedding",
                                index: *id,
                                limit: cfg.vocab_size,
                            });
                        }
                        *id = 0;
                    }
                }
            }
            let e = g.gather(p.var("tok_emb")?, &ids, &[b, s])?;
            add_positions(g, p, cfg, e)?
        }
        SegmentInput::Embeddings(e) => {
            if !seg.embed {
                return contract("embedding input requires the embedding in the segment");
            }
            check_hidden(g, cfg, e, lens)?;
            add_positions(g, p, cfg, e)?
        }
        SegmentInput::Hidden(h) => {
            if seg.embed {
                return contract("hidden-state input cannot enter the embedding");
            }
            check_hidden(g, cfg, h, lens)?;
            h
        }
    };
    for i in seg.start..seg.end {
        x = block(g, p, cfg, i, x, lens)?;
    }
    if seg.head {
        let n = g.rms_norm(x, cfg.norm_eps)?;
        let n = g.mul(n, p.var("final_norm")?)?;
        x = g.matmul(n, p.var("lm_head")?)?;
    }
    Ok(x)
}

fn check_hidden(g: &Graph, cfg: &ModelConfig, x: Var, lens: &[usize]) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 3 || s[2] != cfg.hidden || s[0] != lens.len() || s[1] > cfg.max_seq {
        return Err(Error::Shape {
            op: "forward_segment",
            lhs: s.to_vec(),
            rhs: vec![lens.len(), cfg.max_seq, cfg.hidden],
        });
    }
    if lens.iter().any(|&l| l == 0 || l > s[1]) {
        return contract("row lengths must lie in 1..=S");
    }
    Ok(())
}

fn add_positions(g: &mut Graph, p: &Bound, cfg: &ModelConfig, e: Var) -> Result<Var> {
    let s = g.shape(e)[1];
    if s > cfg.max_seq {
        return Err(Error::Shape {
            op: "positions",
            lhs: g.shape(e).to_vec(),
            rhs: vec![cfg.max_seq],
        });
    }
    let pos = g.slice(p.var("pos_emb")?, 0, 0, s)?;
    g.add(e, pos)
}

/// `x·W`, plus `(x·A)·B` when an adapter is attached to `name`.
fn project(g: &mut Graph, p: &Bound, x: Var, name: &str) -> Result<Var> {
    let y = g.matmul(x, p.var(name)?)?;
    match (
        p.get(&format!("{name}.lora_a")),
        p.get(&format!("{name}.lora_b")),
    ) {
        (Some(a), Some(b)) => {
            let xa = g.matmul(x, a)?;
            let xab = g.matmul(xa, b)?;
            g.add(y, xab)
        }
        _ => Ok(y),
    }
}

fn block(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    i: usize,
    x: Var,
    lens: &[usize],
) -> Result<Var> {
    let pre = block_prefix(i);
    let s = g.shape(x).to_vec();
    let (b, t, h) = (s[0], s[1], s[2]);
    let (nh, hd) = (cfg.heads, cfg.head_dim());

    let n = g.rms_norm(x, cfg.norm_eps)?;
    let n = g.mul(n, p.var(&format!("{pre}attn_norm"))?)?;
    let heads = |g: &mut Graph, m: &str| -> Result<Var> {
        let y = project(g, p, n, &format!("{pre}{m}"))?;
        let y = g.reshape(y, &[b, t, nh, hd])?;
        g.permute(y, &[0, 2, 1, 3])
    };
    let q = heads(g, "wq")?;
    let k = heads(g, "wk")?;
    let v = heads(g, "wv")?;
    let scores = g.causal_scores(q, k, 1.0 / (hd as f64).sqrt(), lens)?;
    let att = g.softmax(scores)?;
    let ctx = g.matmul(att, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, t, h])?;
    let o = project(g, p, ctx, &format!("{pre}wo"))?;
    let x = g.add(x, o)?;

    let n = g.rms_norm(x, cfg.norm_eps)?;
    let n = g.mul(n, p.var(&format!("{pre}mlp_norm"))?)?;
    let gate = g.matmul(n, p.var(&format!("{pre}w_gate"))?)?;
    let gate = g.silu(gate)?;
    let up = g.matmul(n, p.var(&format!("{pre}w_up"))?)?;
    let hmid = g.mul(gate, up)?;
    let down = g.matmul(hmid, p.var(&format!("{pre}w_down"))?)?;
    g.add(x, down)
}

/// Next-token targets and per-position weights (`1/N` on the `N` positions
/// whose successor is a real token, zero elsewhere).
pub fn shifted_targets(batch: &TokenBatch) -> Result<(Vec<usize>, Tensor)> {
    let (b, s) = (batch.batch_size(), batch.seq_len());
    let mut targets = vec![0usize; b * s];
    let mut w = vec![0.0; b * s];
    let mut n = 0usize;
    for r in 0..b {
        let len = batch.lens()[r];
        for t in 0..len.saturating_sub(1) {
            let next = batch.ids()[r * s + t + 1];
            debug_assert_ne!(next, PAD);
            targets[r * s + t] = next;
            w[r * s + t] = 1.0;
            n += 1;
        }
    }
    if n == 0 {
        return contract("batch has no next-token targets");
    }
    for x in &mut w {
        *x /= n as f64;
    }
    Ok((targets, Tensor::from_parts(vec![b, s], w)))
}

/// Mean next-token cross-entropy over non-pad targets.
pub fn lm_loss(g: &mut Graph, logits: Var, batch: &TokenBatch) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 3 || s[0] != batch.batch_size() || s[1] != batch.seq_len() {
        return Err(Error::Shape {
            op: "lm_loss",
            lhs: s,
            rhs: vec![batch.batch_size(), batch.seq_len()],
        });
    }
    let (targets, w) = shifted_targets(batch)?;
    let ce = g.cross_entropy_hard(logits, &targets)?;
    let w = g.constant(w);
    let wce = g.mul(ce, w)?;
    g.sum(wce)
}

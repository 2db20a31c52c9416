//! Forward enhancement: optimize input embeddings so that the Bottom replica
//! reproduces the observed smashed data, then decode by nearest embedding.

use serde::{Deserialize, Serialize};

use super::{mask_pads, AttackHyperparams, ReplicaSegments};
use crate::autodiff::{Graph, Tensor, Var};
use crate::defenses::nearest_row;
use crate::error::{contract, Error, Result};
use crate::model::{forward_segment, Bound, SegmentInput};
use crate::optim::{AdamW, AdamWConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmObjective {
    /// `1 −` mean per-example cosine similarity.
    #[default]
    Cosine,
    /// Mean per-example squared Euclidean distance.
    L2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmOutput {
    /// Best embeddings found, `[B, S, H]`.
    pub embeddings: Tensor,
    pub tokens: Vec<usize>,
    /// Objective value at every evaluated iterate.
    pub trace: Vec<f64>,
    pub best_loss: f64,
}

/// Closest table row for every position of `e` (`[.., H]`).
pub fn nearest_embedding_decode(e: &Tensor, table: &Tensor) -> Vec<usize> {
    let h = table.shape()[1];
    e.data()
        .chunks_exact(h)
        .map(|r| nearest_row(r, table))
        .collect()
}

fn pad_mask(lens: &[usize], s: usize, h: usize) -> Tensor {
    let mut m = vec![0.0; lens.len() * s * h];
    for (r, &l) in lens.iter().enumerate() {
        for x in &mut m[r * s * h..(r * s + l) * h] {
            *x = 1.0;
        }
    }
    Tensor::from_parts(vec![lens.len(), s, h], m)
}

fn objective(
    g: &mut Graph,
    replica: &ReplicaSegments,
    e: Var,
    target: &Tensor,
    mask: &Tensor,
    lens: &[usize],
    kind: SmObjective,
) -> Result<Var> {
    let p = Bound::new(g, &replica.encoder, |_| false);
    let seg = replica.spec.bottom();
    let y = forward_segment(
        g,
        &p,
        &replica.config,
        seg,
        SegmentInput::Embeddings(e),
        lens,
    )?;
    let m = g.constant(mask.clone());
    let y = g.mul(y, m)?;
    let t = g.constant(target.zip_map(mask, |a, b| a * b));
    let s = target.shape();
    let (b, flat) = (s[0], s[1] * s[2]);
    match kind {
        SmObjective::Cosine => {
            let y = g.reshape(y, &[b, flat])?;
            let t = g.reshape(t, &[b, flat])?;
            let c = g.cosine_similarity(y, t)?;
            let c = g.mean(c)?;
            let c = g.scale(c, -1.0)?;
            g.add_scalar(c, 1.0)
        }
        SmObjective::L2 => {
            let d = g.sub(y, t)?;
            let d2 = g.mul(d, d)?;
            let s = g.sum(d2)?;
            g.scale(s, 1.0 / b as f64)
        }
    }
}

/// Start from the embeddings of `init_tokens` (`B·S`, row-major) and run
/// AdamW on them for `hp.sm_epochs` iterations; the lowest-loss iterate wins.
pub fn smashed_data_matching(
    target: &Tensor,
    lens: &[usize],
    replica: &ReplicaSegments,
    init_tokens: &[usize],
    hp: &AttackHyperparams,
) -> Result<SmOutput> {
    let s = target.shape().to_vec();
    if s.len() != 3 || s[0] != lens.len() || init_tokens.len() != s[0] * s[1] {
        return Err(Error::Shape {
            op: "smashed_data_matching",
            lhs: s,
            rhs: vec![lens.len(), init_tokens.len()],
        });
    }
    if replica.encoder_end != replica.spec.bottom_end {
        return contract("smashed-data matching needs a replica of the Bottom only");
    }
    let table = replica.embedding_table();
    let h = s[2];
    let data = init_tokens
        .iter()
        .flat_map(|&t| table.row(t).to_vec())
        .collect();
    let mut e = Tensor::new(s.clone(), data)?;
    let mask = pad_mask(lens, s[1], h);
    let mut opt = AdamW::new(AdamWConfig::new(hp.sm_lr, hp.sm_weight_decay));
    let mut trace = Vec::with_capacity(hp.sm_epochs + 1);
    let mut best = (f64::INFINITY, e.clone());
    for it in 0..=hp.sm_epochs {
        let mut g = Graph::new();
        let ev = g.leaf(e.clone());
        let l = objective(&mut g, replica, ev, target, &mask, lens, hp.sm_objective)?;
        let lv = g.value(l).item();
        if !lv.is_finite() {
            log::warn!("smashed-data matching stopped at non-finite loss, iteration {it}");
            break;
        }
        trace.push(lv);
        if lv < best.0 {
            best = (lv, e.clone());
        }
        if it == hp.sm_epochs {
            break;
        }
        let gr = g.backward(l, &[ev])?;
        opt.begin_step();
        opt.update_one("e", &mut e, gr.wrt(ev));
    }
    let mut tokens = nearest_embedding_decode(&best.1, table);
    mask_pads(&mut tokens, lens, s[1]);
    Ok(SmOutput {
        embeddings: best.1,
        tokens,
        trace,
        best_loss: best.0,
    })
}

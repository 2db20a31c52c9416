//! Learning-based inversion: a GRU decoder trained on encoder outputs of an
//! auxiliary corpus, then applied to observed smashed data.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{argmax_rows, mask_pads, ReplicaSegments};
use crate::autodiff::{Graph, Tensor, Var};
use crate::defenses::NoiseSpec;
use crate::error::{contract, Result};
use crate::model::{
    gru, tokenize, Bound, InverterParams, InverterShape, ModelConfig, ParamSet, TokenBatch, PAD,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::par;
use crate::rng::{self, LabRng};
use crate::splitsim::SplitSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InverterTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Examples per gradient shard; shards are evaluated in parallel.
    pub shard: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for InverterTrainConfig {
    fn default() -> Self {
        InverterTrainConfig {
            epochs: 15,
            batch_size: 32,
            lr: 2e-3,
            shard: 8,
            hidden: gru::DEFAULT_GRU_HIDDEN,
            dropout: gru::DEFAULT_DROPOUT,
        }
    }
}

/// One auxiliary example: token ids and (possibly noisy) encoder output.
pub(crate) struct Sample {
    pub ids: Vec<usize>,
    pub x: Tensor,
}

pub(crate) fn aux_rows<S: AsRef<str>>(texts: &[S], max_len: usize) -> Result<Vec<Vec<usize>>> {
    let rows: Vec<Vec<usize>> = texts
        .iter()
        .map(|t| {
            let mut r = tokenize(t.as_ref(), max_len);
            r.retain(|&x| x != PAD);
            r
        })
        .filter(|r| r.len() >= 2)
        .collect();
    if rows.is_empty() {
        return contract("auxiliary corpus is empty");
    }
    Ok(rows)
}

/// Encode rows in chunks, returning one `[len, H]` tensor per row.
pub(crate) fn encode_rows(
    replica: &ReplicaSegments,
    rows: &[Vec<usize>],
    noise: &NoiseSpec,
    seed: u64,
    label: &str,
) -> Result<Vec<Sample>> {
    const CHUNK: usize = 32;
    let chunks: Vec<&[Vec<usize>]> = rows.chunks(CHUNK).collect();
    let parts = par::map_range(chunks.len(), |c| -> Result<Vec<Sample>> {
        let batch = TokenBatch::from_rows(chunks[c])?;
        let mut r = rng::substream(seed, label, c as u64);
        let x = replica.encode_noisy(&batch, noise, &mut r)?;
        let (s, h) = (batch.seq_len(), x.shape()[2]);
        Ok(chunks[c]
            .iter()
            .enumerate()
            .map(|(i, ids)| {
                let l = ids.len();
                let d = x.data()[i * s * h..(i * s + l) * h].to_vec();
                Sample {
                    ids: ids.clone(),
                    x: Tensor::new(vec![l, h], d).expect("row slice"),
                }
            })
            .collect())
    });
    let mut out = Vec::with_capacity(rows.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Zero-padded inputs `[b, S, H]`, targets (PAD beyond each row) and lengths.
pub(crate) fn stack(samples: &[&Sample]) -> (Tensor, Vec<usize>, Vec<usize>) {
    let s = samples.iter().map(|x| x.ids.len()).max().unwrap_or(0);
    let h = samples.first().map(|x| x.x.shape()[1]).unwrap_or(0);
    let mut data = vec![0.0; samples.len() * s * h];
    let mut targets = vec![PAD; samples.len() * s];
    let mut lens = Vec::with_capacity(samples.len());
    for (i, smp) in samples.iter().enumerate() {
        let l = smp.ids.len();
        data[i * s * h..(i * s + l) * h].copy_from_slice(smp.x.data());
        targets[i * s..i * s + l].copy_from_slice(&smp.ids);
        lens.push(l);
    }
    (
        Tensor::from_parts(vec![samples.len(), s, h], data),
        targets,
        lens,
    )
}

/// Per-position weights `1/total` on valid positions.
pub(crate) fn position_weights(lens: &[usize], seq: usize, total: usize) -> Tensor {
    let mut w = vec![0.0; lens.len() * seq];
    for (r, &l) in lens.iter().enumerate() {
        for x in &mut w[r * seq..r * seq + l] {
            *x = 1.0 / total as f64;
        }
    }
    Tensor::from_parts(vec![lens.len(), seq], w)
}

/// Weighted token cross-entropy of `logits` `[b, S, V]`.
pub(crate) fn weighted_ce(g: &mut Graph, logits: Var, targets: &[usize], w: Tensor) -> Result<Var> {
    let ce = g.cross_entropy_hard(logits, targets)?;
    let w = g.constant(w);
    let wce = g.mul(ce, w)?;
    g.sum(wce)
}

/// One optimizer step whose gradient is the sum of per-shard gradients.
pub(crate) fn sharded_step<T, F>(
    params: &mut ParamSet,
    trainable: &[String],
    opt: &mut AdamW,
    shards: &[T],
    loss: F,
) -> Result<f64>
where
    T: Sync,
    F: Fn(&mut Graph, &Bound, &T) -> Result<Var> + Sync,
{
    let frozen: &ParamSet = params;
    let parts = par::map_slice(shards, |sh| -> Result<(f64, Vec<(String, Tensor)>)> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, frozen, |k| trainable.iter().any(|t| t == k));
        let l = loss(&mut g, &p, sh)?;
        let vars = p.trainable(&g);
        let ids: Vec<Var> = vars.iter().map(|(_, v)| *v).collect();
        let mut gr = g.backward(l, &ids)?;
        let grads = vars
            .into_iter()
            .map(|(k, v)| (k, gr.take(v).expect("requested")))
            .collect();
        Ok((g.value(l).item(), grads))
    });
    let mut total = 0.0;
    let mut sum: Vec<(String, Tensor)> = Vec::new();
    for part in parts {
        let (l, grads) = part?;
        total += l;
        if sum.is_empty() {
            sum = grads;
        } else {
            for ((_, acc), (_, g)) in sum.iter_mut().zip(&grads) {
                *acc = acc.zip_map(g, |a, b| a + b);
            }
        }
    }
    if !total.is_finite() {
        return contract(format!("non-finite inverter loss {total}"));
    }
    opt.begin_step();
    for (k, g) in &sum {
        opt.update_one(k, params.get_mut(k).expect("bound name"), g);
    }
    Ok(total)
}

/// Split a batch of sample indices into shards of at most `shard` examples.
pub(crate) fn shard_batch<'a>(
    samples: &'a [Sample],
    idx: &[usize],
    shard: usize,
) -> Vec<Vec<&'a Sample>> {
    idx.chunks(shard.max(1))
        .map(|c| c.iter().map(|&i| &samples[i]).collect())
        .collect()
}

pub(crate) fn epoch_order(n: usize, rng: &mut LabRng) -> Vec<usize> {
    let mut o: Vec<usize> = (0..n).collect();
    o.shuffle(rng);
    o
}

/// Train a GRU inverter against the frozen `replica` encoder, optionally
/// wrapped in `noise` (fresh noise every epoch). Returns the inverter and the
/// mean training loss of each epoch.
pub fn train_sip<S: AsRef<str>>(
    aux: &[S],
    replica: &ReplicaSegments,
    noise: &NoiseSpec,
    cfg: &InverterTrainConfig,
    seed: u64,
) -> Result<(InverterParams, Vec<f64>)> {
    if cfg.epochs == 0 {
        return contract("inverter training needs at least one epoch");
    }
    noise.validate()?;
    let rows = aux_rows(aux, replica.config.max_seq)?;
    let shape = InverterShape {
        input: replica.config.hidden,
        hidden: cfg.hidden,
        vocab: replica.config.vocab_size,
        dropout: cfg.dropout,
    };
    let mut inv = InverterParams::init(shape, rng::derive(seed, "sip-init"));
    let trainable: Vec<String> = inv.tensors.keys().cloned().collect();
    let mut opt = AdamW::new(AdamWConfig::new(cfg.lr, 0.0));
    let mut order_rng = rng::stream(seed, "sip-order");
    let noisy = noise.mechanism != crate::defenses::Mechanism::None;
    let mut samples = encode_rows(
        replica,
        &rows,
        noise,
        rng::derive(seed ^ noise.seed, "sip-noise"),
        "epoch-0",
    )?;
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        if noisy && epoch > 0 {
            let label = format!("epoch-{epoch}");
            samples = encode_rows(
                replica,
                &rows,
                noise,
                rng::derive(seed ^ noise.seed, "sip-noise"),
                &label,
            )?;
        }
        let order = epoch_order(samples.len(), &mut order_rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let total: usize = idx.iter().map(|&i| samples[i].ids.len()).sum();
            let shards = shard_batch(&samples, idx, cfg.shard);
            let shards: Vec<(usize, Vec<&Sample>)> = shards.into_iter().enumerate().collect();
            let l = sharded_step(
                &mut inv.tensors,
                &trainable,
                &mut opt,
                &shards,
                |g, p, (k, sh)| {
                    let (x, targets, lens) = stack(sh);
                    let seq = x.shape()[1];
                    let x = g.constant(x);
                    let mut r = rng::substream(seed, "sip-dropout", step << 8 | *k as u64);
                    let logits = gru::gru_invert(g, p, &shape, x, Some(&mut r))?;
                    weighted_ce(g, logits, &targets, position_weights(&lens, seq, total))
                },
            )?;
            sum += l;
            n += 1;
            step += 1;
        }
        trace.push(sum / n as f64);
        log::debug!("sip epoch {epoch} loss {:.4}", sum / n as f64);
    }
    Ok((inv, trace))
}

/// Same procedure as [`train_sip`] with a randomly initialized encoder.
pub fn train_ae_baseline<S: AsRef<str>>(
    aux: &[S],
    config: &ModelConfig,
    spec: SplitSpec,
    cfg: &InverterTrainConfig,
    seed: u64,
) -> Result<(InverterParams, ReplicaSegments)> {
    let encoder = ReplicaSegments::random(config, spec, rng::derive(seed, "ae-encoder"))?;
    let (inv, _) = train_sip(aux, &encoder, &NoiseSpec::none(), cfg, seed)?;
    Ok((inv, encoder))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SipOutput {
    pub logits: Tensor,
    /// Argmax ids `B·S`, PAD beyond each row's length.
    pub tokens: Vec<usize>,
}

/// Decode hidden states `[B, S, H]` with the inverter.
pub fn sip_attack(inv: &InverterParams, hidden: &Tensor, lens: &[usize]) -> Result<SipOutput> {
    let logits = inv.invert(hidden)?;
    let mut tokens = argmax_rows(&logits);
    mask_pads(&mut tokens, lens, hidden.shape()[1]);
    Ok(SipOutput { logits, tokens })
}

//! Centralized language-model training and evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::params::{Bound, ModelParams};
use super::tokenizer::{tokenize, TokenBatch, PAD};
use super::transformer::{forward_segment, lm_loss, Segment, SegmentInput};
use crate::autodiff::Graph;
use crate::error::{contract, Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{self, LabRng};

/// Cycles through a corpus in seeded shuffled order, reshuffling on each pass.
#[derive(Clone, Debug)]
pub struct Batcher {
    rows: Vec<Vec<usize>>,
    source: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: LabRng,
}

impl Batcher {
    /// Rows shorter than two tokens are dropped.
    pub fn new<S: AsRef<str>>(
        texts: &[S],
        max_len: usize,
        batch: usize,
        seed: u64,
    ) -> Result<Self> {
        let (source, rows): (Vec<usize>, Vec<Vec<usize>>) = texts
            .iter()
            .map(|t| {
                let mut r = tokenize(t.as_ref(), max_len);
                r.retain(|&x| x != PAD);
                r
            })
            .enumerate()
            .filter(|(_, r)| r.len() >= 2)
            .unzip();
        if rows.is_empty() || batch == 0 {
            return contract("corpus has no usable rows");
        }
        let mut b = Batcher {
            order: (0..rows.len()).collect(),
            rows,
            source,
            cursor: 0,
            batch,
            rng: rng::stream(seed, "batcher"),
        };
        b.order.shuffle(&mut b.rng);
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn next_batch(&mut self) -> TokenBatch {
        self.next_indexed().1
    }

    /// Next batch together with the corpus line index of each row.
    pub fn next_indexed(&mut self) -> (Vec<usize>, TokenBatch) {
        let mut picked = Vec::with_capacity(self.batch);
        let mut ids = Vec::with_capacity(self.batch);
        while picked.len() < self.batch.min(self.rows.len()) {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let k = self.order[self.cursor];
            picked.push(self.rows[k].clone());
            ids.push(self.source[k]);
            self.cursor += 1;
        }
        let batch = TokenBatch::from_rows(&picked).expect("rows validated at construction");
        (ids, batch)
    }
}

/// Split texts into consecutive batches (no shuffling), for evaluation.
pub fn eval_batches<S: AsRef<str>>(
    texts: &[S],
    max_len: usize,
    batch: usize,
) -> Result<Vec<TokenBatch>> {
    let rows: Vec<&S> = texts
        .iter()
        .filter(|t| !t.as_ref().is_empty() && max_len >= 2)
        .collect();
    rows.chunks(batch.max(1))
        .map(|c| TokenBatch::from_texts(c, max_len))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 800,
            batch_size: 16,
            lr: 3e-3,
            weight_decay: 0.01,
        }
    }
}

/// One full-model step on `batch`; returns the loss before the update.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut AdamW,
    batch: &TokenBatch,
    step: usize,
) -> Result<f64> {
    let trainable = params.trainable_names();
    train_step_on(params, opt, batch, step, &trainable)
}

/// As [`train_step`], updating only the named tensors.
pub fn train_step_on(
    params: &mut ModelParams,
    opt: &mut AdamW,
    batch: &TokenBatch,
    step: usize,
    trainable: &[String],
) -> Result<f64> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, &params.tensors, |k| {
        trainable.iter().any(|t| t == k)
    });
    let seg = Segment::full(&params.config);
    let logits = forward_segment(
        &mut g,
        &p,
        &params.config,
        seg,
        SegmentInput::Tokens(batch),
        batch.lens(),
    )?;
    let loss = lm_loss(&mut g, logits, batch)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            step,
            what: "pretraining loss".into(),
        });
    }
    let vars = p.trainable(&g);
    let ids: Vec<_> = vars.iter().map(|(_, v)| *v).collect();
    let mut grads = g.backward(loss, &ids)?;
    opt.begin_step();
    for (name, v) in vars {
        let gr = grads.take(v).expect("gradient requested");
        let t = params.tensors.get_mut(&name).expect("bound name");
        opt.update_one(&name, t, &gr);
    }
    Ok(value)
}

/// Train every weight on `texts` with AdamW; returns the trained model and the
/// per-step loss trace.
pub fn pretrain<S: AsRef<str>>(
    mut params: ModelParams,
    texts: &[S],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<f64>)> {
    let mut batches = Batcher::new(texts, params.config.max_seq, cfg.batch_size, seed)?;
    let mut opt = AdamW::new(AdamWConfig::new(cfg.lr, cfg.weight_decay));
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let b = batches.next_batch();
        trace.push(train_step(&mut params, &mut opt, &b, step)?);
        log::debug!("pretrain step {step} loss {:.4}", trace[step]);
    }
    Ok((params, trace))
}

/// Mean next-token loss and target count of one batch.
pub fn batch_nll(params: &ModelParams, batch: &TokenBatch) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, &params.tensors, |_| false);
    let seg = Segment::full(&params.config);
    let logits = forward_segment(
        &mut g,
        &p,
        &params.config,
        seg,
        SegmentInput::Tokens(batch),
        batch.lens(),
    )?;
    let loss = lm_loss(&mut g, logits, batch)?;
    let n = batch.lens().iter().map(|l| l - 1).sum();
    Ok((g.value(loss).item(), n))
}

/// `exp` of the target-weighted mean next-token loss over all batches.
pub fn perplexity(params: &ModelParams, batches: &[TokenBatch]) -> Result<f64> {
    if batches.is_empty() {
        return contract("perplexity of an empty corpus");
    }
    let parts = crate::par::map_slice(batches, |b| batch_nll(params, b));
    let (mut total, mut count) = (0.0, 0usize);
    for r in parts {
        let (l, n) = r?;
        total += l * n as f64;
        count += n;
    }
    Ok((total / count as f64).exp())
}

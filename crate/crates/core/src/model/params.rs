use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tokenizer::BYTE_VOCAB;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Named tensors in a stable (lexicographic) order.
pub type ParamSet = BTreeMap<String, Tensor>;

pub const INIT_STD: f64 = 0.02;

/// Projection matrices of the attention block that can carry adapters.
pub const ATTN_MATRICES: [&str; 4] = ["wq", "wk", "wv", "wo"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq: usize,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: BYTE_VOCAB,
            hidden: 64,
            blocks: 8,
            heads: 4,
            ffn_dim: 128,
            max_seq: 64,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if self.blocks < 3 {
            return bad(format!(
                "need at least 3 blocks for a 3-way split, got {}",
                self.blocks
            ));
        }
        if self.ffn_dim == 0 || self.max_seq < 2 || !(self.norm_eps > 0.0) {
            return bad("ffn_dim, max_seq and norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

pub fn block_prefix(i: usize) -> String {
    format!("blocks.{i}.")
}

/// Which block (if any) a parameter name belongs to.
pub fn block_of(name: &str) -> Option<usize> {
    name.strip_prefix("blocks.")?
        .split('.')
        .next()?
        .parse()
        .ok()
}

pub fn is_adapter(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

/// Weights of the miniature causal LM, plus optional low-rank adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: ParamSet,
}

impl ModelParams {
    /// Scaled-normal initialization (std 0.02), norm gains at one.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "model-init");
        let (v, h, f, s) = (
            config.vocab_size,
            config.hidden,
            config.ffn_dim,
            config.max_seq,
        );
        let mut t = ParamSet::new();
        t.insert("tok_emb".into(), Tensor::randn(&[v, h], INIT_STD, &mut r));
        t.insert("pos_emb".into(), Tensor::randn(&[s, h], INIT_STD, &mut r));
        for i in 0..config.blocks {
            let p = block_prefix(i);
            t.insert(format!("{p}attn_norm"), Tensor::full(&[h], 1.0));
            for m in ATTN_MATRICES {
                t.insert(format!("{p}{m}"), Tensor::randn(&[h, h], INIT_STD, &mut r));
            }
            t.insert(format!("{p}mlp_norm"), Tensor::full(&[h], 1.0));
            t.insert(
                format!("{p}w_gate"),
                Tensor::randn(&[h, f], INIT_STD, &mut r),
            );
            t.insert(format!("{p}w_up"), Tensor::randn(&[h, f], INIT_STD, &mut r));
            t.insert(
                format!("{p}w_down"),
                Tensor::randn(&[f, h], INIT_STD, &mut r),
            );
        }
        t.insert("final_norm".into(), Tensor::full(&[h], 1.0));
        t.insert("lm_head".into(), Tensor::randn(&[h, v], INIT_STD, &mut r));
        Ok(ModelParams { config, tensors: t })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    pub fn has_adapters(&self) -> bool {
        self.tensors.keys().any(|k| is_adapter(k))
    }

    /// Attach rank-`rank` adapters `W + A·B` to every matrix whose name matches
    /// `which` (an exact name, a `*`-suffix pattern such as `blocks.*.wq`, or
    /// `attn` for all attention projections). `B` starts at zero.
    pub fn attach_adapters(&self, rank: usize, which: &str, seed: u64) -> Result<ModelParams> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be >= 1".into()));
        }
        let targets: Vec<String> = self
            .tensors
            .keys()
            .filter(|k| !is_adapter(k) && adapter_filter(which, k))
            .cloned()
            .collect();
        if targets.is_empty() {
            return Err(Error::UnknownName(which.to_string()));
        }
        let mut r = rng::stream(seed, "adapter-init");
        let mut out = self.clone();
        for name in targets {
            let w = &self.tensors[&name];
            if w.ndim() != 2 {
                return Err(Error::Config(format!("{name} is not a matrix")));
            }
            let (din, dout) = (w.shape()[0], w.shape()[1]);
            out.tensors.insert(
                format!("{name}.lora_a"),
                Tensor::randn(&[din, rank], INIT_STD, &mut r),
            );
            out.tensors
                .insert(format!("{name}.lora_b"), Tensor::zeros(&[rank, dout]));
        }
        Ok(out)
    }

    /// L2 norm over the concatenation of all adapter tensors.
    pub fn adapter_l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter(|(k, _)| is_adapter(k))
            .map(|(_, t)| t.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0;
        for (k, t) in &self.tensors {
            let mut kh: u64 = 0xcbf2_9ce4_8422_2325;
            for b in k.bytes() {
                kh ^= b as u64;
                kh = kh.wrapping_mul(0x0100_0000_01b3);
            }
            h = h.rotate_left(7) ^ kh ^ t.checksum();
        }
        h
    }

    /// Names that are updated during fine-tuning: adapters when attached,
    /// otherwise every weight.
    pub fn trainable_names(&self) -> Vec<String> {
        let adapters = self.has_adapters();
        self.tensors
            .keys()
            .filter(|k| !adapters || is_adapter(k))
            .cloned()
            .collect()
    }
}

fn adapter_filter(which: &str, name: &str) -> bool {
    if which == "attn" {
        return name.starts_with("blocks.")
            && ATTN_MATRICES
                .iter()
                .any(|m| name.ends_with(&format!(".{m}")));
    }
    match which.split_once('*') {
        Some((pre, post)) => {
            name.starts_with(pre) && name.ends_with(post) && name.len() >= pre.len() + post.len()
        }
        None => name == which,
    }
}

/// Graph handles for a set of named tensors.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Record `tensors` on `g`; names for which `trainable` holds become
    /// differentiable leaves, the rest constants.
    pub fn new(g: &mut Graph, tensors: &ParamSet, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable(k) {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn trainable(&self, g: &Graph) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(_, v)| g.requires_grad(**v))
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }
}

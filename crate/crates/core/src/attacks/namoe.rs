//! Noise-adaptive mixture of GRU experts. Each expert is trained on smashed
//! data under its own perturbation; a gate routes by the pooled input.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sip::{
    aux_rows, encode_rows, epoch_order, position_weights, sharded_step, stack, weighted_ce, Sample,
};
use super::{argmax_rows, mask_pads, InverterTrainConfig, ReplicaSegments, SipOutput};
use crate::autodiff::{Graph, Tensor, Var};
use crate::defenses::{Mechanism, NoiseSpec};
use crate::error::{contract, Error, Result};
use crate::model::checkpoint::{load_tensors, save_tensors};
use crate::model::{gru, Bound, InverterParams, InverterShape, ParamSet};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{self, LabRng};

pub const GATE_HIDDEN: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NaMoEConfig {
    /// Expert stage; `epochs` is the expert epoch count.
    pub experts: InverterTrainConfig,
    pub gate_epochs: usize,
    pub gate_lr: f64,
    /// Stage-2 scales are the drawn expert's scale times `2^u`, `u ~ U(−j, j)`.
    pub scale_jitter: f64,
}

impl Default for NaMoEConfig {
    fn default() -> Self {
        NaMoEConfig {
            experts: InverterTrainConfig::default(),
            gate_epochs: 10,
            gate_lr: 2e-3,
            scale_jitter: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    shape: InverterShape,
    experts: Vec<NoiseSpec>,
}

/// Experts under `expert.{k}.*`, gate under `gate.*`, shared `out.*`.
#[derive(Clone, Debug, PartialEq)]
pub struct NaMoEParams {
    pub shape: InverterShape,
    pub experts: Vec<NoiseSpec>,
    pub tensors: ParamSet,
}

fn expert_prefix(k: usize) -> String {
    format!("expert.{k}")
}

impl NaMoEParams {
    pub fn init(shape: InverterShape, experts: Vec<NoiseSpec>, seed: u64) -> Result<Self> {
        if experts.len() < 2 {
            return contract("a mixture needs at least two experts");
        }
        let mut t = ParamSet::new();
        for k in 0..experts.len() {
            let core = InverterParams::init(shape, rng::derive(seed, &format!("expert-{k}")));
            for name in gru::CORE_NAMES {
                let short = name.trim_start_matches("gru.");
                t.insert(
                    format!("{}.{short}", expert_prefix(k)),
                    core.tensors[name].clone(),
                );
            }
            if k == 0 {
                for name in gru::OUT_NAMES {
                    t.insert(name.to_string(), core.tensors[name].clone());
                }
            }
        }
        let mut r = rng::stream(seed, "gate-init");
        let e = experts.len();
        let k1 = 1.0 / (shape.input as f64).sqrt();
        let k2 = 1.0 / (GATE_HIDDEN as f64).sqrt();
        let u = |n: usize, k: f64, r: &mut LabRng| {
            (0..n).map(|_| r.random_range(-k..k)).collect::<Vec<f64>>()
        };
        t.insert(
            "gate.w1".into(),
            Tensor::new(
                vec![shape.input, GATE_HIDDEN],
                u(shape.input * GATE_HIDDEN, k1, &mut r),
            )?,
        );
        t.insert("gate.b1".into(), Tensor::zeros(&[GATE_HIDDEN]));
        t.insert(
            "gate.w2".into(),
            Tensor::new(vec![GATE_HIDDEN, e], u(GATE_HIDDEN * e, k2, &mut r))?,
        );
        t.insert("gate.b2".into(), Tensor::zeros(&[e]));
        Ok(NaMoEParams {
            shape,
            experts,
            tensors: t,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    fn names_with(&self, prefix: &str) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect()
    }

    /// Gate weights `[B, E]`.
    pub fn gate_weights(&self, hidden: &Tensor, lens: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.tensors, |_| false);
        let x = g.constant(hidden.clone());
        let w = gate(&mut g, &p, x, lens)?;
        Ok(g.value(w).clone())
    }

    /// Inference logits `[B, S, V]`; `gate_override` (`[B, E]`) replaces the
    /// learned routing.
    pub fn invert(
        &self,
        hidden: &Tensor,
        lens: &[usize],
        gate_override: Option<&Tensor>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.tensors, |_| false);
        let x = g.constant(hidden.clone());
        let y = namoe_forward(&mut g, &p, self, x, lens, gate_override, None)?;
        Ok(g.value(y).clone())
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let meta = Meta {
            shape: self.shape,
            experts: self.experts.clone(),
        };
        save_tensors(
            manifest_path,
            "namoe",
            serde_json::to_value(meta)?,
            &self.tensors,
        )
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let (m, tensors) = load_tensors(manifest_path)?;
        if m.role != "namoe" {
            return Err(Error::Checkpoint(format!(
                "expected role namoe, found {}",
                m.role
            )));
        }
        let meta: Meta = serde_json::from_value(m.meta)?;
        Ok(NaMoEParams {
            shape: meta.shape,
            experts: meta.experts,
            tensors,
        })
    }
}

/// `[B, 1, S]` rows averaging the valid positions.
fn pool_matrix(lens: &[usize], s: usize) -> Tensor {
    let mut m = vec![0.0; lens.len() * s];
    for (r, &l) in lens.iter().enumerate() {
        let l = l.clamp(1, s);
        for x in &mut m[r * s..r * s + l] {
            *x = 1.0 / l as f64;
        }
    }
    Tensor::from_parts(vec![lens.len(), 1, s], m)
}

fn gate(g: &mut Graph, p: &Bound, x: Var, lens: &[usize]) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if lens.len() != s[0] {
        return Err(Error::Shape {
            op: "namoe gate",
            lhs: s,
            rhs: vec![lens.len()],
        });
    }
    let pm = g.constant(pool_matrix(lens, s[1]));
    let pooled = g.matmul(pm, x)?;
    let pooled = g.reshape(pooled, &[s[0], s[2]])?;
    let h = g.matmul(pooled, p.var("gate.w1")?)?;
    let h = g.add(h, p.var("gate.b1")?)?;
    let h = g.tanh(h)?;
    let o = g.matmul(h, p.var("gate.w2")?)?;
    let o = g.add(o, p.var("gate.b2")?)?;
    g.softmax(o)
}

/// Mixture logits: gate-weighted sum of expert hidden sequences, then the
/// shared projection. Dropout on the mixed hidden states when `dropout` is set.
pub fn namoe_forward(
    g: &mut Graph,
    p: &Bound,
    moe: &NaMoEParams,
    x: Var,
    lens: &[usize],
    gate_override: Option<&Tensor>,
    dropout: Option<&mut LabRng>,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, t, hd, e) = (s[0], s[1], moe.shape.hidden, moe.num_experts());
    let w = match gate_override {
        Some(w) => {
            if w.shape() != [b, e] {
                return Err(Error::Shape {
                    op: "namoe gate override",
                    lhs: w.shape().to_vec(),
                    rhs: vec![b, e],
                });
            }
            g.constant(w.clone())
        }
        None => gate(g, p, x, lens)?,
    };
    let mut hs = Vec::with_capacity(e);
    for k in 0..e {
        let h = gru::gru_hidden_named(g, p, &moe.shape, x, &expert_prefix(k))?;
        hs.push(g.reshape(h, &[b, 1, t * hd])?);
    }
    let stacked = g.concat(&hs, 1)?;
    let w = g.reshape(w, &[b, 1, e])?;
    let mixed = g.matmul(w, stacked)?;
    let mut mixed = g.reshape(mixed, &[b, t, hd])?;
    if let Some(r) = dropout {
        mixed = gru::apply_dropout(g, mixed, moe.shape.dropout, r)?;
    }
    gru::project_out(g, p, mixed)
}

/// Scale `spec` by `2^u`, `u ~ U(−j, j)`; NoPeek and no-noise are returned as is.
fn jitter(spec: &NoiseSpec, j: f64, r: &mut LabRng) -> NoiseSpec {
    let f = if j > 0.0 {
        2f64.powf(r.random_range(-j..j))
    } else {
        1.0
    };
    let mechanism = match spec.mechanism {
        Mechanism::Dxp { eps_prime } => Mechanism::Dxp {
            eps_prime: eps_prime * f,
        },
        Mechanism::LaplaceDp { eps_star, clip } => Mechanism::LaplaceDp {
            eps_star: eps_star * f,
            clip,
        },
        m => m,
    };
    NoiseSpec {
        mechanism,
        seed: spec.seed,
    }
}

/// Encoder for a spec: NoPeek experts cycle through `pool` when one is given.
fn encoder_for<'a>(
    spec: &NoiseSpec,
    replica: &'a ReplicaSegments,
    pool: &'a [ReplicaSegments],
    pick: usize,
) -> &'a ReplicaSegments {
    match spec.mechanism {
        Mechanism::Nopeek { .. } if !pool.is_empty() => &pool[pick % pool.len()],
        _ => replica,
    }
}

/// Two-stage training. Stage 1 fits every expert (with the shared projection)
/// on inputs perturbed by its own spec while the gate is unused; stage 2
/// freezes the experts and fits gate and projection on per-batch randomly
/// drawn perturbations. NoPeek experts encode with members of `nopeek_pool`,
/// simulated fine-tunes of the pretrained model.
pub fn train_namoe<S: AsRef<str>>(
    aux: &[S],
    replica: &ReplicaSegments,
    experts: &[NoiseSpec],
    nopeek_pool: &[ReplicaSegments],
    cfg: &NaMoEConfig,
    seed: u64,
) -> Result<(NaMoEParams, Vec<f64>)> {
    if experts.len() < 2 {
        return contract("a mixture needs at least two experts");
    }
    if cfg.experts.epochs == 0 || cfg.gate_epochs == 0 {
        return contract("both mixture stages need at least one epoch");
    }
    for e in experts {
        e.validate()?;
    }
    let rows = aux_rows(aux, replica.config.max_seq)?;
    let shape = InverterShape {
        input: replica.config.hidden,
        hidden: cfg.experts.hidden,
        vocab: replica.config.vocab_size,
        dropout: cfg.experts.dropout,
    };
    let mut moe = NaMoEParams::init(shape, experts.to_vec(), rng::derive(seed, "namoe-init"))?;
    let mut trace = Vec::new();
    let bs = cfg.experts.batch_size.max(1);

    // stage 1
    let mut trainable = moe.names_with("expert.");
    trainable.extend(moe.names_with("out."));
    let mut opt = AdamW::new(AdamWConfig::new(cfg.experts.lr, 0.0));
    let mut order_rng = rng::stream(seed, "namoe-order-1");
    let mut step = 0u64;
    for epoch in 0..cfg.experts.epochs {
        let mut per_expert: Vec<Vec<Sample>> = Vec::with_capacity(experts.len());
        for (k, spec) in experts.iter().enumerate() {
            let enc = encoder_for(spec, replica, nopeek_pool, epoch + k);
            let label = format!("expert-{k}-epoch-{epoch}");
            per_expert.push(encode_rows(
                enc,
                &rows,
                spec,
                rng::derive(seed ^ spec.seed, "namoe-noise"),
                &label,
            )?);
        }
        let order = epoch_order(rows.len(), &mut order_rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for idx in order.chunks(bs) {
            let total: usize = idx.iter().map(|&i| rows[i].len()).sum::<usize>() * experts.len();
            let mut shards = Vec::new();
            for (k, samples) in per_expert.iter().enumerate() {
                for sh in idx.chunks(cfg.experts.shard.max(1)) {
                    shards.push((
                        k,
                        shards.len(),
                        sh.iter().map(|&i| &samples[i]).collect::<Vec<_>>(),
                    ));
                }
            }
            let prefixes: Vec<String> = (0..experts.len()).map(expert_prefix).collect();
            let l = sharded_step(
                &mut moe.tensors,
                &trainable,
                &mut opt,
                &shards,
                |g, p, (k, j, sh)| {
                    let (x, targets, lens) = stack(sh);
                    let seq = x.shape()[1];
                    let x = g.constant(x);
                    let mut r = rng::substream(seed, "namoe-dropout-1", step << 12 | *j as u64);
                    let h = gru::gru_hidden_named(g, p, &shape, x, &prefixes[*k])?;
                    let h = gru::apply_dropout(g, h, shape.dropout, &mut r)?;
                    let logits = gru::project_out(g, p, h)?;
                    weighted_ce(g, logits, &targets, position_weights(&lens, seq, total))
                },
            )?;
            sum += l;
            n += 1;
            step += 1;
        }
        trace.push(sum / n as f64);
        log::debug!("namoe expert epoch {epoch} loss {:.4}", sum / n as f64);
    }

    // stage 2
    let mut trainable = moe.names_with("gate.");
    trainable.extend(moe.names_with("out."));
    let mut opt = AdamW::new(AdamWConfig::new(cfg.gate_lr, 0.0));
    let mut order_rng = rng::stream(seed, "namoe-order-2");
    let mut draw_rng = rng::stream(seed, "namoe-draw");
    let frozen = moe.clone();
    for epoch in 0..cfg.gate_epochs {
        let order = epoch_order(rows.len(), &mut order_rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for (bi, idx) in order.chunks(bs).enumerate() {
            let k = draw_rng.random_range(0..experts.len());
            let spec = jitter(&experts[k], cfg.scale_jitter, &mut draw_rng);
            let enc = encoder_for(
                &spec,
                replica,
                nopeek_pool,
                draw_rng.random_range(0..usize::MAX),
            );
            let batch_rows: Vec<Vec<usize>> = idx.iter().map(|&i| rows[i].clone()).collect();
            let label = format!("gate-epoch-{epoch}-batch-{bi}");
            let samples = encode_rows(
                enc,
                &batch_rows,
                &spec,
                rng::derive(seed, "namoe-gate-noise"),
                &label,
            )?;
            let total: usize = batch_rows.iter().map(Vec::len).sum();
            let all: Vec<usize> = (0..samples.len()).collect();
            let shards: Vec<(usize, Vec<&Sample>)> = all
                .chunks(cfg.experts.shard.max(1))
                .enumerate()
                .map(|(j, c)| (j, c.iter().map(|&i| &samples[i]).collect()))
                .collect();
            let l = sharded_step(
                &mut moe.tensors,
                &trainable,
                &mut opt,
                &shards,
                |g, p, (j, sh)| {
                    let (x, targets, lens) = stack(sh);
                    let seq = x.shape()[1];
                    let x = g.constant(x);
                    let mut r = rng::substream(seed, "namoe-dropout-2", step << 12 | *j as u64);
                    let logits = namoe_forward(g, p, &frozen, x, &lens, None, Some(&mut r))?;
                    weighted_ce(g, logits, &targets, position_weights(&lens, seq, total))
                },
            )?;
            sum += l;
            n += 1;
            step += 1;
        }
        trace.push(sum / n as f64);
        log::debug!("namoe gate epoch {epoch} loss {:.4}", sum / n as f64);
    }
    Ok((moe, trace))
}

/// Decode hidden states `[B, S, H]` with the mixture.
pub fn namoe_attack(moe: &NaMoEParams, hidden: &Tensor, lens: &[usize]) -> Result<SipOutput> {
    let logits = moe.invert(hidden, lens, None)?;
    let mut tokens = argmax_rows(&logits);
    mask_pads(&mut tokens, lens, hidden.shape()[1]);
    Ok(SipOutput { logits, tokens })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NaMoEParams {
        let shape = InverterShape {
            input: 6,
            hidden: 5,
            vocab: 7,
            dropout: 0.1,
        };
        NaMoEParams::init(
            shape,
            vec![NoiseSpec::none(), NoiseSpec::dxp(0.5), NoiseSpec::dxp(0.1)],
            3,
        )
        .unwrap()
    }

    #[test]
    fn gate_rows_sum_to_one() {
        let m = small();
        let x = Tensor::randn(&[4, 3, 6], 3.0, &mut rng::stream(2, "x"));
        let w = m.gate_weights(&x, &[3, 2, 1, 3]).unwrap();
        for r in w.data().chunks(3) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn one_hot_gate_reduces_to_single_expert() {
        let m = small();
        let x = Tensor::randn(&[2, 3, 6], 1.0, &mut rng::stream(2, "x"));
        let oh = Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let got = m.invert(&x, &[3, 3], Some(&oh)).unwrap();
        let mut single = ParamSet::new();
        for n in gru::CORE_NAMES {
            single.insert(n.into(), m.tensors[&n.replace("gru", "expert.1")].clone());
        }
        for n in gru::OUT_NAMES {
            single.insert(n.into(), m.tensors[n].clone());
        }
        let want = InverterParams {
            shape: m.shape,
            tensors: single,
        }
        .invert(&x)
        .unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn fewer_than_two_experts_rejected() {
        let shape = InverterShape::new(4, 5);
        assert!(NaMoEParams::init(shape, vec![NoiseSpec::none()], 0).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("moe.json");
        m.save(&p).unwrap();
        assert_eq!(NaMoEParams::load(&p).unwrap(), m);
    }
}

//! Data-reconstruction attacks run by a curious server. Attack code sees only
//! [`ServerView`]s and replicas of the pretrained model.

mod gm;
mod namoe;
mod pipeline;
mod sip;
mod sm;

use serde::{Deserialize, Serialize};

pub use gm::{dummy_gradient, gradient_matching, label_gradient, GmInit, GmOutput, LabelTop};
pub use namoe::{namoe_attack, namoe_forward, train_namoe, NaMoEConfig, NaMoEParams, GATE_HIDDEN};
pub use pipeline::{bisr_pipeline, AttackResult, Inverter, Mode, Stage, StageOutput};
pub use sip::{sip_attack, train_ae_baseline, train_sip, InverterTrainConfig, SipOutput};
pub use sm::{nearest_embedding_decode, smashed_data_matching, SmObjective, SmOutput};

use crate::autodiff::{Graph, Tensor};
use crate::defenses::{self, Mechanism, NoiseSpec};
use crate::error::{contract, Error, Result};
use crate::model::{
    forward_segment, is_adapter, Bound, InverterParams, ModelConfig, ModelParams, ParamSet,
    Segment, SegmentInput, TokenBatch,
};
use crate::rng::LabRng;
use crate::splitsim::{part_of, Part, SplitSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Copied from the publicly known pretrained weights.
    Pretrained,
    /// Freshly initialized, never trained.
    Random,
    /// Attacker-side simulated fine-tune of the pretrained weights.
    Simulated,
}

/// The attacker's copies of the client segments.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicaSegments {
    pub config: ModelConfig,
    pub spec: SplitSpec,
    /// Embedding + blocks `[0, encoder_end)`; `encoder_end >= spec.bottom_end`.
    pub encoder: ParamSet,
    pub encoder_end: usize,
    /// Blocks `[trunk_end, L)` + final norm + head.
    pub top: ParamSet,
    provenance: Provenance,
}

impl ReplicaSegments {
    /// Snapshot of pretrained weights; models carrying adapters are refused
    /// since adapters only exist after fine-tuning starts.
    pub fn from_pretrained(pretrained: &ModelParams, spec: SplitSpec) -> Result<Self> {
        if pretrained.has_adapters() {
            return contract("replicas must come from pretrained weights without adapters");
        }
        Self::build(pretrained, spec, spec.bottom_end, Provenance::Pretrained)
    }

    /// Replica whose encoder extends to block `depth` inside the Trunk, for
    /// attacking deeper hidden states.
    pub fn from_pretrained_deeper(
        pretrained: &ModelParams,
        spec: SplitSpec,
        depth: usize,
    ) -> Result<Self> {
        if pretrained.has_adapters() {
            return contract("replicas must come from pretrained weights without adapters");
        }
        if depth < spec.bottom_end || depth > spec.trunk_end {
            return Err(Error::Config(format!(
                "encoder depth {depth} outside the Trunk"
            )));
        }
        Self::build(pretrained, spec, depth, Provenance::Pretrained)
    }

    /// Randomly initialized encoder (and top) of the same structure.
    pub fn random(config: &ModelConfig, spec: SplitSpec, seed: u64) -> Result<Self> {
        let m = ModelParams::build(config.clone(), seed)?;
        Self::build(&m, spec, spec.bottom_end, Provenance::Random)
    }

    /// Replica taken from an attacker-side fine-tune of the pretrained
    /// weights; its adapters are kept.
    pub fn simulated(model: &ModelParams, spec: SplitSpec) -> Result<Self> {
        Self::build(model, spec, spec.bottom_end, Provenance::Simulated)
    }

    fn build(
        m: &ModelParams,
        spec: SplitSpec,
        depth: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        spec.validate(&m.config)?;
        let mut encoder = ParamSet::new();
        let mut top = ParamSet::new();
        let deep = SplitSpec::new(depth, depth + 1);
        for (k, t) in &m.tensors {
            if is_adapter(k) && provenance != Provenance::Simulated {
                continue;
            }
            if part_of(k, &deep) == Part::Bottom {
                encoder.insert(k.clone(), t.clone());
            }
            if part_of(k, &spec) == Part::Top {
                top.insert(k.clone(), t.clone());
            }
        }
        Ok(ReplicaSegments {
            config: m.config.clone(),
            spec,
            encoder,
            encoder_end: depth,
            top,
            provenance,
        })
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn embedding_table(&self) -> &Tensor {
        &self.encoder["tok_emb"]
    }

    fn encoder_segment(&self) -> Segment {
        Segment {
            embed: true,
            start: 0,
            end: self.encoder_end,
            head: false,
        }
    }

    /// Clean encoder output `[B, S, H]` for a token batch.
    pub fn encode(&self, batch: &TokenBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.encoder, |_| false);
        let y = forward_segment(
            &mut g,
            &p,
            &self.config,
            self.encoder_segment(),
            SegmentInput::Tokens(batch),
            batch.lens(),
        )?;
        Ok(g.value(y).clone())
    }

    /// Encoder output under a forward defense, as the inverter would see it.
    pub fn encode_noisy(
        &self,
        batch: &TokenBatch,
        noise: &NoiseSpec,
        rng: &mut LabRng,
    ) -> Result<Tensor> {
        match noise.mechanism {
            Mechanism::None | Mechanism::Nopeek { .. } => self.encode(batch),
            Mechanism::Dxp { eps_prime } => {
                let table = self.embedding_table();
                let s = batch.seq_len();
                let mut ids = batch.ids().to_vec();
                for (r, &len) in batch.lens().iter().enumerate() {
                    for t in 0..len {
                        let row = Tensor::vector(table.row(ids[r * s + t]).to_vec());
                        ids[r * s + t] = defenses::dxp_perturb(&row, eps_prime, table, rng)?.1[0];
                    }
                }
                self.encode(&batch.with_ids(ids)?)
            }
            Mechanism::LaplaceDp { eps_star, clip } => {
                defenses::dp_laplace_perturb(&self.encode(batch)?, eps_star, clip, rng)
            }
        }
    }
}

/// Gradient-matching and smashed-data-matching settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackHyperparams {
    pub gm_epochs: usize,
    pub gm_lr: f64,
    pub gm_beta: f64,
    pub gm_tau: f64,
    pub sm_epochs: usize,
    pub sm_lr: f64,
    pub sm_weight_decay: f64,
    #[serde(default)]
    pub sm_objective: SmObjective,
}

impl Default for AttackHyperparams {
    fn default() -> Self {
        AttackHyperparams {
            gm_epochs: 18,
            gm_lr: 0.09,
            gm_beta: 0.85,
            gm_tau: 1.2,
            sm_epochs: 800,
            sm_lr: 0.005,
            sm_weight_decay: 0.02,
            sm_objective: SmObjective::Cosine,
        }
    }
}

impl AttackHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gm_beta)
            || !(self.gm_tau > 0.0)
            || self.gm_epochs == 0
            || self.sm_epochs == 0
            || !(self.gm_lr > 0.0)
            || !(self.sm_lr > 0.0)
        {
            return Err(Error::Config(format!(
                "invalid attack hyperparameters {self:?}"
            )));
        }
        Ok(())
    }
}

/// Argmax over the last axis.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let v = *t.shape().last().expect("non-scalar");
    t.data()
        .chunks(v)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |b, (i, &x)| {
                    if x > b.1 {
                        (i, x)
                    } else {
                        b
                    }
                })
                .0
        })
        .collect()
}

/// Replace ids beyond each row's length with PAD.
pub(crate) fn mask_pads(ids: &mut [usize], lens: &[usize], seq: usize) {
    for (r, &l) in lens.iter().enumerate() {
        for x in &mut ids[r * seq + l..(r + 1) * seq] {
            *x = crate::model::PAD;
        }
    }
}

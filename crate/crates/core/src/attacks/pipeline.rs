//! Composition of the learning-based stage with the two enhancements.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    gradient_matching, namoe_attack, sip_attack, smashed_data_matching, AttackHyperparams, GmInit,
    InverterParams, NaMoEParams, ReplicaSegments, SipOutput,
};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::metrics::Scores;
use crate::splitsim::ServerView;

/// Anything that maps hidden states to per-position vocabulary logits.
pub trait Inverter: Sync {
    fn decode(&self, hidden: &Tensor, lens: &[usize]) -> Result<SipOutput>;
}

impl Inverter for InverterParams {
    fn decode(&self, hidden: &Tensor, lens: &[usize]) -> Result<SipOutput> {
        sip_attack(self, hidden, lens)
    }
}

impl Inverter for NaMoEParams {
    fn decode(&self, hidden: &Tensor, lens: &[usize]) -> Result<SipOutput> {
        namoe_attack(self, hidden, lens)
    }
}

/// Attack stage; also used as the requested mode, naming the last stage run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "sip")]
    Sip,
    #[serde(rename = "b")]
    B,
    #[serde(rename = "f")]
    F,
    #[serde(rename = "b+f")]
    BF,
}

pub type Mode = Stage;

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Sip, Stage::B, Stage::F, Stage::BF];

    pub fn label(self) -> &'static str {
        match self {
            Stage::Sip => "sip",
            Stage::B => "b",
            Stage::F => "f",
            Stage::BF => "b+f",
        }
    }

    /// Stages executed for this mode, in order.
    pub fn chain(self) -> &'static [Stage] {
        match self {
            Stage::Sip => &[Stage::Sip],
            Stage::B => &[Stage::Sip, Stage::B],
            Stage::F => &[Stage::Sip, Stage::F],
            Stage::BF => &[Stage::Sip, Stage::B, Stage::BF],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown attack mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    /// Reconstructed ids `B·S` (PAD beyond each row).
    pub tokens: Vec<usize>,
    /// Inverter logits for `sip`, soft labels for `b`; none for matching stages.
    pub logits: Option<Tensor>,
    pub wall_ms: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub mode: Mode,
    pub lens: Vec<usize>,
    pub seq_len: usize,
    pub stages: BTreeMap<Stage, StageOutput>,
    /// Filled by scoring against the reference batch.
    pub scores: BTreeMap<Stage, Scores>,
}

impl AttackResult {
    pub fn tokens(&self, stage: Stage) -> Option<&[usize]> {
        self.stages.get(&stage).map(|s| s.tokens.as_slice())
    }
}

/// Run `mode` against one observed batch. The inverter reads `deeper_hidden`
/// when the replica's encoder extends past the Bottom, else the smashed data.
pub fn bisr_pipeline(
    view: &ServerView,
    inverter: &dyn Inverter,
    replica: &ReplicaSegments,
    mode: Mode,
    hp: &AttackHyperparams,
) -> Result<AttackResult> {
    hp.validate()?;
    let deeper = replica.encoder_end > replica.spec.bottom_end;
    let chain = mode.chain();
    if deeper && chain.iter().any(|s| matches!(s, Stage::F | Stage::BF)) {
        return Err(Error::Config(format!(
            "mode {mode} needs a Bottom-only replica; attack-deeper supports sip and b"
        )));
    }
    let hidden = if deeper {
        view.deeper_hidden.as_ref().ok_or_else(|| {
            Error::Config("attack-deeper needs deeper hidden states in the transcript".into())
        })?
    } else {
        &view.smashed_btm
    };
    let lens = &view.lens;
    let mut stages = BTreeMap::new();
    let timer = std::time::Instant::now();
    let sip = inverter.decode(hidden, lens)?;
    stages.insert(
        Stage::Sip,
        StageOutput {
            tokens: sip.tokens.clone(),
            logits: Some(sip.logits.clone()),
            wall_ms: timer.elapsed().as_millis(),
        },
    );
    let mut b_tokens = None;
    for &stage in &chain[1..] {
        let timer = std::time::Instant::now();
        let out = match stage {
            Stage::B => {
                let gm =
                    gradient_matching(view, replica, GmInit::Logits(&sip.logits, &sip.tokens), hp)?;
                b_tokens = Some(gm.tokens.clone());
                StageOutput {
                    tokens: gm.tokens,
                    logits: Some(gm.labels),
                    wall_ms: 0,
                }
            }
            Stage::F => {
                let sm = smashed_data_matching(&view.smashed_btm, lens, replica, &sip.tokens, hp)?;
                StageOutput {
                    tokens: sm.tokens,
                    logits: None,
                    wall_ms: 0,
                }
            }
            Stage::BF => {
                let init = b_tokens.as_deref().expect("b precedes b+f");
                let sm = smashed_data_matching(&view.smashed_btm, lens, replica, init, hp)?;
                StageOutput {
                    tokens: sm.tokens,
                    logits: None,
                    wall_ms: 0,
                }
            }
            Stage::Sip => unreachable!("sip runs first"),
        };
        stages.insert(
            stage,
            StageOutput {
                wall_ms: timer.elapsed().as_millis(),
                ..out
            },
        );
    }
    Ok(AttackResult {
        mode,
        lens: lens.clone(),
        seq_len: view.seq_len(),
        stages,
        scores: BTreeMap::new(),
    })
}

//! Experiment configuration: a versioned JSON document plus sweep axes that
//! override scalar fields by dotted path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use splitlab_core::attacks::{AttackHyperparams, InverterTrainConfig, Stage};
use splitlab_core::defenses::NoiseSpec;
use splitlab_core::model::{ModelConfig, PretrainConfig};
use splitlab_core::splitsim::{FtConfig, SplitSpec};

use crate::corpus::{self, SensiTemplateSpec};
use crate::error::{LabError, Result};

pub const CONFIG_VERSION: u32 = 1;

/// Where a corpus comes from: a text file (one example per line, optionally
/// carrying entity markers), a built-in template domain, or a custom spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    File(PathBuf),
    Builtin {
        kind: String,
        count: usize,
        seed: u64,
        /// Lines dropped from the front, so disjoint slices of one stream can
        /// serve different roles.
        #[serde(default)]
        skip: usize,
    },
    Templates(SensiTemplateSpec),
}

impl CorpusSource {
    /// Lines exactly as generated or stored (markers kept).
    pub fn load_marked(&self) -> Result<Vec<String>> {
        match self {
            CorpusSource::File(p) => corpus::read_lines(p),
            CorpusSource::Builtin { kind, count, seed, skip } => {
                let spec = match kind.as_str() {
                    "news" => SensiTemplateSpec::news(count + skip, *seed),
                    "code" => SensiTemplateSpec::code(count + skip, *seed),
                    other => return Err(LabError::Config(format!("unknown built-in corpus {other:?}"))),
                };
                Ok(corpus::generate_sensi_corpora(&spec)?.marked.split_off(*skip))
            }
            CorpusSource::Templates(spec) => Ok(corpus::generate_sensi_corpora(spec)?.marked),
        }
    }

    pub fn load(&self) -> Result<Vec<String>> {
        Ok(corpus::strip_markers(&self.load_marked()?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corpora {
    /// Concatenated for pretraining.
    pub pretrain: Vec<CorpusSource>,
    pub finetune: CorpusSource,
    /// The attacker's auxiliary data.
    pub auxiliary: CorpusSource,
    pub test: CorpusSource,
    /// Data for client-side pre-fine-tuning; defaults to `finetune`.
    #[serde(default)]
    pub pre_finetune: Option<CorpusSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Load these weights instead of training.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        PretrainSection {
            steps: d.steps,
            batch_size: d.batch_size,
            lr: d.lr,
            weight_decay: d.weight_decay,
            seed: 1,
            checkpoint: None,
        }
    }
}

impl PretrainSection {
    pub fn train_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSection {
    pub rank: usize,
    pub which: String,
}

impl Default for AdapterSection {
    fn default() -> Self {
        AdapterSection {
            rank: 4,
            which: "attn".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InverterKind {
    #[serde(rename = "sip-gru")]
    SipGru,
    #[serde(rename = "namoe")]
    NaMoE,
    #[serde(rename = "ae")]
    Ae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverterSection {
    pub kind: InverterKind,
    #[serde(default)]
    pub train: InverterTrainConfig,
    /// Train the GRU on smashed data perturbed by the run's own defense.
    #[serde(default)]
    pub noise_aware: bool,
    /// Mixture experts, one perturbation each.
    #[serde(default)]
    pub experts: Vec<NoiseSpec>,
    #[serde(default = "default_gate_epochs")]
    pub gate_epochs: usize,
    #[serde(default = "default_gate_lr")]
    pub gate_lr: f64,
    #[serde(default = "default_jitter")]
    pub scale_jitter: f64,
    /// Simulated fine-tunes backing NoPeek experts.
    #[serde(default = "default_pool")]
    pub nopeek_pool: usize,
    #[serde(default = "default_pool_steps")]
    pub nopeek_pool_steps: usize,
    /// Load a trained inverter instead of training one.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

fn default_gate_epochs() -> usize {
    10
}
fn default_gate_lr() -> f64 {
    2e-3
}
fn default_jitter() -> f64 {
    1.0
}
fn default_pool() -> usize {
    5
}
fn default_pool_steps() -> usize {
    50
}

impl Default for InverterSection {
    fn default() -> Self {
        InverterSection {
            kind: InverterKind::SipGru,
            train: InverterTrainConfig::default(),
            noise_aware: false,
            experts: Vec::new(),
            gate_epochs: default_gate_epochs(),
            gate_lr: default_gate_lr(),
            scale_jitter: default_jitter(),
            nopeek_pool: default_pool(),
            nopeek_pool_steps: default_pool_steps(),
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub modes: Vec<Stage>,
    #[serde(default)]
    pub hp: AttackHyperparams,
    /// Attack hidden states after this Trunk block instead of the smashed data.
    #[serde(default)]
    pub deeper: Option<usize>,
    /// Also run label-only gradient matching from a random start.
    #[serde(default)]
    pub tag_baseline: bool,
    /// Restrict word metrics to annotated entity spans of marked corpora.
    #[serde(default)]
    pub spans_only: bool,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            modes: vec![Stage::Sip, Stage::B, Stage::BF],
            hp: AttackHyperparams::default(),
            deeper: None,
            tag_baseline: false,
            spans_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    /// Dotted path into the config, e.g. `split.bottom_end`.
    pub path: String,
    pub values: Vec<Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainSection,
    pub corpora: Corpora,
    #[serde(default)]
    pub adapters: AdapterSection,
    pub split: SplitSpec,
    #[serde(default)]
    pub pre_ft_steps: usize,
    #[serde(default)]
    pub ft: FtConfig,
    #[serde(default)]
    pub defense: NoiseSpec,
    #[serde(default)]
    pub inverter: InverterSection,
    #[serde(default)]
    pub attack: AttackSection,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub sweep: Vec<SweepAxis>,
}

/// One concrete configuration produced by sweep expansion.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub id: usize,
    /// `(path, value)` overrides applied to the base config.
    pub overrides: Vec<(String, Value)>,
    pub config: ExperimentConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Parse a config file; relative corpus and checkpoint paths are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::Io(format!("{}: {e}", path.display())))?;
        let mut c: ExperimentConfig = serde_json::from_str(&text)?;
        if let Some(dir) = path.parent() {
            c.rebase(dir);
        }
        c.validate()?;
        Ok(c)
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        let mut sources: Vec<&mut CorpusSource> = self.corpora.pretrain.iter_mut().collect();
        sources.extend([&mut self.corpora.finetune, &mut self.corpora.auxiliary, &mut self.corpora.test]);
        if let Some(s) = self.corpora.pre_finetune.as_mut() {
            sources.push(s);
        }
        for s in sources {
            if let CorpusSource::File(p) = s {
                fix(p);
            }
        }
        if let Some(p) = self.pretrain.checkpoint.as_mut() {
            fix(p);
        }
        if let Some(p) = self.inverter.checkpoint.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {}", self.version));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        self.model.validate()?;
        self.split.validate(&self.model)?;
        self.defense.validate()?;
        self.attack.hp.validate()?;
        if self.attack.modes.is_empty() && !self.attack.tag_baseline {
            return bad("no attack modes requested".into());
        }
        if let Some(d) = self.attack.deeper {
            if d <= self.split.bottom_end || d > self.split.trunk_end {
                return bad(format!("deeper layer {d} must lie inside the Trunk"));
            }
            if self.attack.modes.iter().any(|m| matches!(m, Stage::F | Stage::BF)) {
                return bad("attack-deeper supports modes sip and b only".into());
            }
        }
        if self.inverter.kind == InverterKind::NaMoE && self.inverter.experts.len() < 2 {
            return bad("namoe needs at least two experts".into());
        }
        if self.ft.steps == 0 {
            return bad("ft.steps must be >= 1".into());
        }
        let mut files: Vec<&PathBuf> = Vec::new();
        let c = &self.corpora;
        for s in c.pretrain.iter().chain([&c.finetune, &c.auxiliary, &c.test]).chain(c.pre_finetune.iter()) {
            if let CorpusSource::File(p) = s {
                files.push(p);
            }
        }
        files.extend(self.pretrain.checkpoint.iter());
        files.extend(self.inverter.checkpoint.iter());
        for f in files {
            if !f.exists() {
                return bad(format!("referenced file {} does not exist", f.display()));
            }
        }
        if self.corpora.pretrain.is_empty() && self.pretrain.checkpoint.is_none() {
            return bad("pretraining needs a corpus or a checkpoint".into());
        }
        Ok(())
    }

    /// Cross product of the sweep axes, in declaration order (last axis
    /// fastest). Without axes there is a single point.
    pub fn expand(&self) -> Result<Vec<SweepPoint>> {
        let mut base = serde_json::to_value(self)?;
        base.as_object_mut().expect("config is an object").remove("sweep");
        for axis in &self.sweep {
            if axis.values.is_empty() {
                return Err(LabError::Config(format!("sweep axis {} has no values", axis.path)));
            }
            match lookup(&base, &axis.path) {
                Some(v) if is_scalar(v) => {}
                Some(_) => return Err(LabError::Config(format!("sweep path {} is not a scalar field", axis.path))),
                None => return Err(LabError::Config(format!("sweep path {} not found", axis.path))),
            }
            if let Some(v) = axis.values.iter().find(|v| !is_scalar(v)) {
                return Err(LabError::Config(format!("sweep value {v} for {} is not a scalar", axis.path)));
            }
        }
        let mut combos: Vec<Vec<(String, Value)>> = vec![Vec::new()];
        for axis in &self.sweep {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    axis.values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((axis.path.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        combos
            .into_iter()
            .enumerate()
            .map(|(id, overrides)| {
                let mut v = base.clone();
                for (p, x) in &overrides {
                    *lookup_mut(&mut v, p).expect("checked above") = x.clone();
                }
                let config: ExperimentConfig = serde_json::from_value(v)?;
                config.validate()?;
                Ok(SweepPoint { id, overrides, config })
            })
            .collect()
    }
}

fn is_scalar(v: &Value) -> bool {
    !matches!(v, Value::Array(_) | Value::Object(_))
}

fn lookup<'a>(v: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(v, |v, k| v.get(k))
}

fn lookup_mut<'a>(v: &'a mut Value, path: &str) -> Option<&'a mut Value> {
    path.split('.').try_fold(v, |v, k| v.get_mut(k))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> String {
        r#"{
            "version": 1,
            "corpora": {
                "pretrain": [{"builtin": {"kind": "news", "count": 20, "seed": 1}}],
                "finetune": {"builtin": {"kind": "news", "count": 20, "seed": 2}},
                "auxiliary": {"builtin": {"kind": "code", "count": 20, "seed": 3}},
                "test": {"builtin": {"kind": "news", "count": 8, "seed": 4}}
            },
            "split": {"bottom_end": 1, "trunk_end": 6},
            "seeds": [1, 2]
        }"#
        .into()
    }

    fn with(extra: &str) -> String {
        let b = base();
        format!("{},{extra}}}", &b[..b.rfind('}').unwrap()])
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let c = ExperimentConfig::from_json(&base()).unwrap();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.ft.steps, 600);
        assert_eq!(c.inverter.kind, InverterKind::SipGru);
        assert_eq!(c.expand().unwrap().len(), 1);
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        assert!(ExperimentConfig::from_json(&with(r#""colour": 3"#)).is_err());
        assert!(ExperimentConfig::from_json(&base().replace("\"version\": 1", "\"version\": 2")).is_err());
        assert!(ExperimentConfig::from_json(&base().replace("[1, 2]", "[]")).is_err());
        assert!(ExperimentConfig::from_json(&with(r#""defense": {"mechanism": {"kind": "dxp", "eps": 1}}"#)).is_err());
    }

    #[test]
    fn missing_files_are_rejected() {
        let t = base().replace(
            r#"{"builtin": {"kind": "news", "count": 8, "seed": 4}}"#,
            r#"{"file": "/nonexistent/test.txt"}"#,
        );
        let e = ExperimentConfig::from_json(&t).unwrap_err();
        assert!(e.to_string().contains("does not exist"));
    }

    #[test]
    fn sweeps_expand_to_the_cross_product() {
        let c = ExperimentConfig::from_json(&with(
            r#""sweep": [
                {"path": "split.bottom_end", "values": [1, 2, 3]},
                {"path": "pre_ft_steps", "values": [0, 100]}
            ]"#,
        ))
        .unwrap();
        let pts = c.expand().unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[3].config.split.bottom_end, 2);
        assert_eq!(pts[3].config.pre_ft_steps, 100);
        assert_eq!(pts[3].overrides[0].1, serde_json::json!(2));
        assert!(pts.iter().all(|p| p.config.sweep.is_empty()));
    }

    #[test]
    fn sweep_paths_must_name_scalars() {
        let obj = with(r#""sweep": [{"path": "split", "values": [1]}]"#);
        assert!(ExperimentConfig::from_json(&obj).unwrap().expand().is_err());
        let missing = with(r#""sweep": [{"path": "split.middle", "values": [1]}]"#);
        assert!(ExperimentConfig::from_json(&missing).unwrap().expand().is_err());
        let invalid = with(r#""sweep": [{"path": "split.bottom_end", "values": [0]}]"#);
        assert!(ExperimentConfig::from_json(&invalid).unwrap().expand().is_err());
    }
}

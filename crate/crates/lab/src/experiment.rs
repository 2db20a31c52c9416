//! Orchestration: pretrain (memoized), split fine-tune, train the attacker's
//! inverter, attack every recorded transcript and score the reconstructions.
//!
//! Expensive artifacts are memoized per process, keyed by the configuration
//! fields they depend on, so sweeps and repeated experiments share them.

use std::any::Any;
use std::collections::{BTreeSet, HashMap};
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::{Arc, LazyLock, Mutex, OnceLock};

use serde_json::{json, Value};
use splitlab_core::attacks::{
    bisr_pipeline, gradient_matching, train_ae_baseline, train_namoe, train_sip, GmInit, Inverter, InverterTrainConfig,
    NaMoEConfig, NaMoEParams, ReplicaSegments, SipOutput, Stage,
};
use splitlab_core::autodiff::Tensor;
use splitlab_core::defenses::{Mechanism, NoiseSpec, NOPEEK_BATCH};
use splitlab_core::metrics::{parse_marked, restrict_to_spans, score_batch, score_words, Scores, Span, WordSeq};
use splitlab_core::model::{eval_batches, pretrain, InverterParams, ModelParams, TokenBatch};
use splitlab_core::rng;
use splitlab_core::splitsim::{pre_finetune, run_split_ft, FtConfig, FtOutcome, Transcript, UtilityPoint};

use crate::config::{ExperimentConfig, InverterKind};
use crate::error::{LabError, Result};
use crate::report::{PointInfo, Report, Row};

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker threads for sweep points; `None` uses the global pool.
    pub jobs: Option<usize>,
    /// Pretrained checkpoints are stored here and reused across processes.
    pub cache_dir: Option<PathBuf>,
}

/// A trained attacker-side inverter.
#[derive(Clone, Debug)]
pub enum TrainedInverter {
    Gru(InverterParams),
    Mixture(NaMoEParams),
}

impl Inverter for TrainedInverter {
    fn decode(&self, hidden: &Tensor, lens: &[usize]) -> splitlab_core::Result<SipOutput> {
        match self {
            TrainedInverter::Gru(p) => p.decode(hidden, lens),
            TrainedInverter::Mixture(p) => p.decode(hidden, lens),
        }
    }
}

impl TrainedInverter {
    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            TrainedInverter::Gru(p) => p.save(path)?,
            TrainedInverter::Mixture(p) => p.save(path)?,
        }
        Ok(())
    }

    /// Loads either checkpoint role.
    pub fn load(path: &Path) -> Result<Self> {
        match InverterParams::load(path) {
            Ok(p) => Ok(TrainedInverter::Gru(p)),
            Err(_) => Ok(TrainedInverter::Mixture(NaMoEParams::load(path)?)),
        }
    }
}

type Slot = Arc<OnceLock<std::result::Result<Arc<dyn Any + Send + Sync>, String>>>;

static MEMO: LazyLock<Mutex<HashMap<String, Slot>>> = LazyLock::new(|| Mutex::new(HashMap::new()));

/// Compute-once cache keyed by `key`; concurrent callers with the same key
/// wait for the first computation.
fn memo<T: Send + Sync + 'static>(key: String, f: impl FnOnce() -> Result<T>) -> Result<Arc<T>> {
    let slot = MEMO.lock().expect("memo lock").entry(key).or_default().clone();
    let v = slot.get_or_init(|| f().map(|t| Arc::new(t) as Arc<dyn Any + Send + Sync>).map_err(|e| e.to_string()));
    match v {
        Ok(a) => Ok(a.clone().downcast::<T>().expect("memo key maps to one type")),
        Err(e) => Err(LabError::Config(e.clone())),
    }
}

/// Drop all memoized artifacts.
pub fn clear_memo() {
    MEMO.lock().expect("memo lock").clear();
}

fn key_hash(key: &str) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    key.hash(&mut h);
    h.finish()
}

/// The public pretrained model named by the config.
pub fn pretrained(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Arc<ModelParams>> {
    if let Some(p) = &cfg.pretrain.checkpoint {
        let p = p.clone();
        return memo(format!("ckpt:{}", p.display()), move || Ok(ModelParams::load(&p)?));
    }
    let key = json!({"model": cfg.model, "pretrain": cfg.pretrain, "corpus": cfg.corpora.pretrain}).to_string();
    let cache = opts
        .cache_dir
        .as_ref()
        .map(|d| d.join(format!("pretrained-{:016x}.json", key_hash(&key))));
    memo(format!("pretrain:{key}"), || {
        if let Some(p) = cache.as_ref().filter(|p| p.exists()) {
            let m = ModelParams::load(p)?;
            if m.config == cfg.model {
                log::info!("reusing pretrained checkpoint {}", p.display());
                return Ok(m);
            }
        }
        let mut texts = Vec::new();
        for s in &cfg.corpora.pretrain {
            texts.extend(s.load()?);
        }
        log::info!("pretraining on {} lines for {} steps", texts.len(), cfg.pretrain.steps);
        let init = ModelParams::build(cfg.model.clone(), cfg.pretrain.seed)?;
        let (m, trace) = pretrain(init, &texts, &cfg.pretrain.train_config(), cfg.pretrain.seed)?;
        if let Some(l) = trace.last() {
            log::info!("pretraining done, final loss {l:.4}");
        }
        if let Some(p) = &cache {
            std::fs::create_dir_all(p.parent().expect("cache file has a parent"))?;
            m.save(p)?;
        }
        Ok(m)
    })
}

fn ft_config(cfg: &ExperimentConfig) -> FtConfig {
    FtConfig {
        deeper: cfg.attack.deeper,
        ..cfg.ft.clone()
    }
}

fn defense_for(cfg: &ExperimentConfig, seed: u64) -> NoiseSpec {
    let d = cfg.defense;
    d.with_seed(rng::derive(seed ^ d.seed, "defense"))
}

/// Client-side fine-tuning in split mode for one seed.
pub fn finetuned(cfg: &ExperimentConfig, seed: u64, opts: &RunOptions) -> Result<Arc<FtOutcome>> {
    let c = &cfg.corpora;
    let key = json!({
        "model": cfg.model, "pretrain": cfg.pretrain, "pcorpus": c.pretrain, "finetune": c.finetune,
        "test": c.test, "pre": c.pre_finetune, "adapters": cfg.adapters, "split": cfg.split,
        "pre_ft_steps": cfg.pre_ft_steps, "ft": ft_config(cfg), "defense": cfg.defense, "seed": seed,
    })
    .to_string();
    memo(format!("ft:{key}"), || {
        let base = pretrained(cfg, opts)?;
        let mut model = base.attach_adapters(cfg.adapters.rank, &cfg.adapters.which, rng::derive(seed, "adapters"))?;
        let texts = c.finetune.load()?;
        if cfg.pre_ft_steps > 0 {
            let pre = match &c.pre_finetune {
                Some(s) => s.load()?,
                None => texts.clone(),
            };
            model = pre_finetune(
                &model,
                cfg.split,
                &pre,
                cfg.pre_ft_steps,
                cfg.ft.batch_size,
                cfg.ft.lr,
                rng::derive(seed, "pre-ft"),
            )?;
        }
        let test = eval_batches(&c.test.load()?, cfg.model.max_seq, 16)?;
        log::info!("split fine-tuning, seed {seed}, {} steps", cfg.ft.steps);
        Ok(run_split_ft(&model, cfg.split, &texts, &test, defense_for(cfg, seed), &ft_config(cfg), seed)?)
    })
}

/// The attacker's replica of the client segments.
pub fn replica(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ReplicaSegments> {
    let base = pretrained(cfg, opts)?;
    Ok(match cfg.attack.deeper {
        Some(d) => ReplicaSegments::from_pretrained_deeper(&base, cfg.split, d)?,
        None => ReplicaSegments::from_pretrained(&base, cfg.split)?,
    })
}

fn nopeek_pool(cfg: &ExperimentConfig, aux: &[String], seed: u64, opts: &RunOptions) -> Result<Vec<ReplicaSegments>> {
    let alpha = cfg.inverter.experts.iter().find_map(|e| match e.mechanism {
        Mechanism::Nopeek { alpha } => Some(alpha),
        _ => None,
    });
    let Some(alpha) = alpha else {
        return Ok(Vec::new());
    };
    let base = pretrained(cfg, opts)?;
    let fc = FtConfig {
        steps: cfg.inverter.nopeek_pool_steps.max(1),
        batch_size: NOPEEK_BATCH,
        record_every: 0,
        record_batches: 0,
        ..cfg.ft.clone()
    };
    (0..cfg.inverter.nopeek_pool)
        .map(|i| {
            let s = rng::derive(seed, &format!("nopeek-pool-{i}"));
            let m = base.attach_adapters(cfg.adapters.rank, &cfg.adapters.which, s)?;
            let out = run_split_ft(&m, cfg.split, aux, &[], NoiseSpec::nopeek(alpha), &fc, s)?;
            Ok(ReplicaSegments::simulated(&out.model, cfg.split)?)
        })
        .collect()
}

/// Train (or load) the inverter for one seed.
pub fn inverter(cfg: &ExperimentConfig, seed: u64, opts: &RunOptions) -> Result<Arc<TrainedInverter>> {
    if let Some(p) = &cfg.inverter.checkpoint {
        let p = p.clone();
        return memo(format!("inv-ckpt:{}", p.display()), move || TrainedInverter::load(&p));
    }
    let inv = &cfg.inverter;
    let aware = inv.noise_aware.then_some(cfg.defense);
    let key = json!({
        "model": cfg.model, "pretrain": cfg.pretrain, "pcorpus": cfg.corpora.pretrain,
        "aux": cfg.corpora.auxiliary, "split": cfg.split, "deeper": cfg.attack.deeper,
        "inverter": inv, "aware": aware, "adapters": cfg.adapters, "seed": seed,
    })
    .to_string();
    memo(format!("inv:{key}"), || {
        let aux = cfg.corpora.auxiliary.load()?;
        let rep = replica(cfg, opts)?;
        let s = rng::derive(seed, "inverter");
        log::info!("training {:?} inverter, seed {seed}", inv.kind);
        Ok(match inv.kind {
            InverterKind::SipGru => {
                let noise = aware.unwrap_or_default();
                TrainedInverter::Gru(train_sip(&aux, &rep, &noise, &inv.train, s)?.0)
            }
            InverterKind::Ae => {
                TrainedInverter::Gru(train_ae_baseline(&aux, &cfg.model, cfg.split, &inv.train, s)?.0)
            }
            InverterKind::NaMoE => {
                let pool = nopeek_pool(cfg, &aux, seed, opts)?;
                let nc = NaMoEConfig {
                    experts: InverterTrainConfig { ..inv.train.clone() },
                    gate_epochs: inv.gate_epochs,
                    gate_lr: inv.gate_lr,
                    scale_jitter: inv.scale_jitter,
                };
                TrainedInverter::Mixture(train_namoe(&aux, &rep, &inv.experts, &pool, &nc, s)?.0)
            }
        })
    })
}

/// Annotated spans of each fine-tuning line, for span-restricted scoring.
pub fn finetune_spans(cfg: &ExperimentConfig) -> Result<Arc<Vec<Vec<Span>>>> {
    let key = json!({"spans": cfg.corpora.finetune}).to_string();
    memo(key, || {
        cfg.corpora
            .finetune
            .load_marked()?
            .iter()
            .map(|l| Ok(parse_marked(l)?.1))
            .collect()
    })
}

/// Words of a token row inside `spans`. Position `u + 1` holds byte `u`;
/// non-byte predictions become DEL so they never match a word.
fn span_words(tokens: &[usize], spans: &[Span]) -> WordSeq {
    let bytes: Vec<u8> = tokens.iter().skip(1).map(|&t| if t < 256 { t as u8 } else { 0x7f }).collect();
    restrict_to_spans(&bytes, spans)
}

fn score_spans(cand: &[usize], truth: &TokenBatch, spans: &[&[Span]]) -> Result<Scores> {
    let mut acc = score_batch(cand, truth)?;
    let s = truth.seq_len();
    let (mut r1, mut rl, mut me) = (0.0, 0.0, 0.0);
    for (r, sp) in spans.iter().enumerate() {
        let l = truth.lens()[r];
        let c = span_words(&cand[r * s..r * s + l], sp);
        let t = span_words(&truth.row(r)[..l], sp);
        let (a, b, m) = score_words(&c, &t);
        r1 += a;
        rl += b;
        me += m;
    }
    let n = spans.len() as f64;
    acc.rouge1_f1 = r1 / n;
    acc.rouge_l_f1 = rl / n;
    acc.meteor_lite = me / n;
    Ok(acc)
}

/// Stages actually computed: the union of the requested modes' chains.
fn plan(modes: &[Stage]) -> Vec<Stage> {
    let mut runs: Vec<Stage> = Vec::new();
    let mut covered: BTreeSet<Stage> = BTreeSet::new();
    let mut sorted = modes.to_vec();
    sorted.sort_by_key(|m| std::cmp::Reverse(m.chain().len()));
    for m in sorted {
        if !covered.contains(&m) {
            covered.extend(m.chain().iter().copied());
            runs.push(m);
        }
    }
    runs
}

/// Attack every transcript and turn the results into report rows.
#[allow(clippy::too_many_arguments)]
pub fn attack_transcripts(
    cfg: &ExperimentConfig,
    sweep_id: usize,
    seed: u64,
    transcripts: &[Transcript],
    utility: &[UtilityPoint],
    inv: &dyn Inverter,
    rep: &ReplicaSegments,
    spans: Option<&[Vec<Span>]>,
) -> Result<Vec<Row>> {
    let hp = &cfg.attack.hp;
    let mut rows = Vec::new();
    for (i, tx) in transcripts.iter().enumerate() {
        let truth = &tx.truth.tokens;
        let mut outs: Vec<(String, Vec<usize>, u128)> = Vec::new();
        for mode in plan(&cfg.attack.modes) {
            let r = bisr_pipeline(&tx.view, inv, rep, mode, hp)?;
            for (stage, o) in r.stages {
                if !outs.iter().any(|(s, _, _)| *s == stage.to_string()) {
                    outs.push((stage.to_string(), o.tokens, o.wall_ms));
                }
            }
        }
        let mut wanted: Vec<String> = cfg.attack.modes.iter().map(|m| m.to_string()).collect();
        if cfg.attack.tag_baseline {
            let t = std::time::Instant::now();
            let gm = gradient_matching(&tx.view, rep, GmInit::Random(rng::derive(seed, "tag") ^ i as u64), hp)?;
            outs.push(("tag".into(), gm.tokens, t.elapsed().as_millis()));
            wanted.push("tag".into());
        }
        let u = utility.iter().find(|u| u.step == tx.view.step);
        let row_spans: Option<Vec<&[Span]>> = spans.map(|all| {
            tx.truth
                .example_ids
                .iter()
                .map(|&k| all.get(k).map(Vec::as_slice).unwrap_or(&[]))
                .collect()
        });
        for stage in wanted {
            let (_, tokens, ms) = outs.iter().find(|(s, _, _)| *s == stage).expect("planned stage ran");
            let sc = match &row_spans {
                Some(sp) => score_spans(tokens, truth, sp)?,
                None => score_batch(tokens, truth)?,
            };
            rows.push(Row {
                sweep_id,
                seed,
                step: Some(tx.view.step),
                batch: Some(tx.view.batch_index),
                stage,
                rouge1_f1: Some(sc.rouge1_f1),
                rouge_l_f1: Some(sc.rouge_l_f1),
                meteor_lite: Some(sc.meteor_lite),
                trr: Some(sc.trr),
                ppl_test: u.map(|u| u.ppl_test).filter(|p| p.is_finite()),
                adapter_l2: u.map(|u| u.adapter_l2),
                wall_ms: Some(*ms as u64),
                error: String::new(),
            });
        }
    }
    Ok(rows)
}

/// Everything for one sweep point and one seed.
pub fn run_point(cfg: &ExperimentConfig, sweep_id: usize, seed: u64, opts: &RunOptions) -> Result<Vec<Row>> {
    let ft = finetuned(cfg, seed, opts)?;
    let inv = inverter(cfg, seed, opts)?;
    let rep = replica(cfg, opts)?;
    let spans = if cfg.attack.spans_only {
        Some(finetune_spans(cfg)?)
    } else {
        None
    };
    attack_transcripts(
        cfg,
        sweep_id,
        seed,
        &ft.transcripts,
        &ft.utility,
        inv.as_ref(),
        &rep,
        spans.as_deref().map(Vec::as_slice),
    )
}

fn panic_message(p: Box<dyn Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panic".into())
}

/// Expand the sweep, run every (point, seed) pair (in parallel when enabled)
/// and assemble the report. A failing pair yields one error row.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Report> {
    cfg.validate()?;
    let points = cfg.expand()?;
    let jobs: Vec<(usize, u64)> = points
        .iter()
        .flat_map(|p| cfg.seeds.iter().map(move |&s| (p.id, s)))
        .collect();
    let work = |&(id, seed): &(usize, u64)| -> Vec<Row> {
        let pc = &points[id].config;
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run_point(pc, id, seed, opts)));
        match r {
            Ok(Ok(rows)) => rows,
            Ok(Err(e)) => {
                log::error!("sweep point {id}, seed {seed} failed: {e}");
                vec![Row::failed(id, seed, e.to_string())]
            }
            Err(p) => vec![Row::failed(id, seed, panic_message(p))],
        }
    };
    let results: Vec<Vec<Row>> = run_parallel(&jobs, opts.jobs, work)?;
    let rows = results.into_iter().flatten().collect();
    let info = points
        .iter()
        .map(|p| PointInfo {
            id: p.id,
            overrides: p.overrides.clone(),
        })
        .collect();
    Report::new(rows, Some(serde_json::to_value(cfg)?), info)
}

#[cfg(feature = "parallel")]
fn run_parallel<I: Sync, T: Send>(items: &[I], jobs: Option<usize>, f: impl Fn(&I) -> T + Sync + Send) -> Result<Vec<T>> {
    use rayon::prelude::*;
    if splitlab_core::par::mode() == splitlab_core::par::Mode::Sequential {
        return Ok(items.iter().map(f).collect());
    }
    match jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| LabError::Config(e.to_string()))?;
            Ok(pool.install(|| items.par_iter().map(f).collect()))
        }
        None => Ok(items.par_iter().map(f).collect()),
    }
}

#[cfg(not(feature = "parallel"))]
fn run_parallel<I: Sync, T: Send>(items: &[I], _jobs: Option<usize>, f: impl Fn(&I) -> T + Sync + Send) -> Result<Vec<T>> {
    Ok(items.iter().map(f).collect())
}

/// Config echo helper for the CLI.
pub fn config_value(cfg: &ExperimentConfig) -> Value {
    serde_json::to_value(cfg).unwrap_or(Value::Null)
}

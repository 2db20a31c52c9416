//! Three-party split fine-tuning: the client holds the Bottom (embedding +
//! first blocks) and the Top (last blocks + head), the server the Trunk.
//! Every step yields the tensors the server observes.

mod transcript;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use transcript::{read_log, write_log, GroundTruth, ServerView, Transcript};

use crate::autodiff::{Graph, Tensor, Var};
use crate::defenses::{self, Mechanism, NoiseSpec};
use crate::error::{contract, Error, Result};
use crate::model::{
    block_of, forward_segment, is_adapter, lm_loss, perplexity, train_step_on, Batcher, Bound,
    ModelConfig, ModelParams, ParamSet, Segment, SegmentInput, TokenBatch,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{self, LabRng};

/// Bottom = embedding + blocks `[0, bottom_end)`, Trunk = blocks
/// `[bottom_end, trunk_end)`, Top = blocks `[trunk_end, L)` + norm + head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub bottom_end: usize,
    pub trunk_end: usize,
}

impl SplitSpec {
    pub fn new(bottom_end: usize, trunk_end: usize) -> Self {
        SplitSpec {
            bottom_end,
            trunk_end,
        }
    }

    /// `0 < b < t <= L`; `t == L` leaves a head-only Top.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let (b, t) = (self.bottom_end, self.trunk_end);
        if b == 0 || b >= t || t > cfg.blocks {
            return Err(Error::Config(format!(
                "split ({b}, {t}) invalid for {} blocks",
                cfg.blocks
            )));
        }
        Ok(())
    }

    pub fn bottom(&self) -> Segment {
        Segment {
            embed: true,
            start: 0,
            end: self.bottom_end,
            head: false,
        }
    }

    pub fn trunk(&self) -> Segment {
        Segment::blocks(self.bottom_end, self.trunk_end)
    }

    pub fn top(&self, cfg: &ModelConfig) -> Segment {
        Segment {
            embed: false,
            start: self.trunk_end,
            end: cfg.blocks,
            head: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Bottom,
    Trunk,
    Top,
}

pub fn part_of(name: &str, spec: &SplitSpec) -> Part {
    match block_of(name) {
        Some(i) if i < spec.bottom_end => Part::Bottom,
        Some(i) if i < spec.trunk_end => Part::Trunk,
        Some(_) => Part::Top,
        None if name.starts_with("tok_emb") || name.starts_with("pos_emb") => Part::Bottom,
        None => Part::Top,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSegments {
    pub config: ModelConfig,
    pub spec: SplitSpec,
    pub bottom: ParamSet,
    pub trunk: ParamSet,
    pub top: ParamSet,
}

pub fn split(params: &ModelParams, spec: SplitSpec) -> Result<SplitSegments> {
    spec.validate(&params.config)?;
    let mut s = SplitSegments {
        config: params.config.clone(),
        spec,
        bottom: ParamSet::new(),
        trunk: ParamSet::new(),
        top: ParamSet::new(),
    };
    for (k, t) in &params.tensors {
        s.part_mut(part_of(k, &spec)).insert(k.clone(), t.clone());
    }
    Ok(s)
}

impl SplitSegments {
    pub fn part(&self, p: Part) -> &ParamSet {
        match p {
            Part::Bottom => &self.bottom,
            Part::Trunk => &self.trunk,
            Part::Top => &self.top,
        }
    }

    fn part_mut(&mut self, p: Part) -> &mut ParamSet {
        match p {
            Part::Bottom => &mut self.bottom,
            Part::Trunk => &mut self.trunk,
            Part::Top => &mut self.top,
        }
    }

    pub fn reassemble(&self) -> ModelParams {
        let mut tensors = self.bottom.clone();
        tensors.extend(self.trunk.clone());
        tensors.extend(self.top.clone());
        ModelParams {
            config: self.config.clone(),
            tensors,
        }
    }

    fn has_adapters(&self) -> bool {
        [&self.bottom, &self.trunk, &self.top]
            .iter()
            .any(|p| p.keys().any(|k| is_adapter(k)))
    }
}

/// What one simulated step produced.
pub struct StepOutput {
    pub loss: f64,
    pub view: ServerView,
    pub grads: [BTreeMap<String, Tensor>; 3],
}

/// Mutable fine-tuning state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub segments: SplitSegments,
    pub defense: NoiseSpec,
    /// Block index inside the Trunk whose input is also recorded.
    pub deeper: Option<usize>,
    pub step: usize,
    pub seed: u64,
    opts: [AdamW; 3],
    adapters_only: bool,
}

impl TrainState {
    pub fn new(
        model: &ModelParams,
        spec: SplitSpec,
        defense: NoiseSpec,
        opt: AdamWConfig,
        seed: u64,
    ) -> Result<Self> {
        defense.validate()?;
        let segments = split(model, spec)?;
        Ok(TrainState {
            adapters_only: segments.has_adapters(),
            segments,
            defense,
            deeper: None,
            step: 0,
            seed,
            opts: [AdamW::new(opt), AdamW::new(opt), AdamW::new(opt)],
        })
    }

    pub fn with_deeper(mut self, block: usize) -> Result<Self> {
        let s = self.segments.spec;
        if block <= s.bottom_end || block > s.trunk_end {
            return Err(Error::Config(format!(
                "deeper layer {block} must lie in ({}, {}]",
                s.bottom_end, s.trunk_end
            )));
        }
        self.deeper = Some(block);
        Ok(self)
    }

    pub fn model(&self) -> ModelParams {
        self.segments.reassemble()
    }

    fn trainable(&self, name: &str) -> bool {
        !self.adapters_only || is_adapter(name)
    }

    fn noise_rng(&self, label: &str, index: u64) -> LabRng {
        rng::substream(self.seed ^ self.defense.seed.rotate_left(17), label, index)
    }

    /// Forward and backward without updating; the transcript of a probe batch.
    pub fn probe(&self, batch: &TokenBatch, index: u64) -> Result<StepOutput> {
        let mut r = self.noise_rng("probe-noise", (self.step as u64) << 16 | index);
        simulate(self, batch, &mut r)
    }
}

fn bind(g: &mut Graph, tensors: &ParamSet, st: &TrainState) -> Bound {
    Bound::new(g, tensors, |k| st.trainable(k))
}

fn collect(
    g: &Graph,
    p: &Bound,
    seeds: &[(Var, Tensor)],
    extra: &[Var],
) -> Result<(BTreeMap<String, Tensor>, Vec<Tensor>)> {
    let vars = p.trainable(g);
    let mut wrt: Vec<Var> = extra.to_vec();
    wrt.extend(vars.iter().map(|(_, v)| *v));
    let mut gr = g.backward_from(seeds, &wrt)?;
    let ex = extra
        .iter()
        .map(|v| gr.take(*v).expect("requested"))
        .collect();
    let map = vars
        .into_iter()
        .map(|(k, v)| (k, gr.take(v).expect("requested")))
        .collect();
    Ok((map, ex))
}

fn simulate(st: &TrainState, batch: &TokenBatch, noise: &mut LabRng) -> Result<StepOutput> {
    let segs = &st.segments;
    let (cfg, spec) = (&segs.config, segs.spec);
    let lens = batch.lens();
    let (b, s, h) = (batch.batch_size(), batch.seq_len(), cfg.hidden);

    // client: Bottom (+ forward defense)
    let mut g1 = Graph::new();
    let p1 = bind(&mut g1, &segs.bottom, st);
    let fed = match st.defense.mechanism {
        Mechanism::Dxp { eps_prime } => {
            let table = &segs.bottom["tok_emb"];
            let mut ids = batch.ids().to_vec();
            for r in 0..b {
                for t in 0..lens[r] {
                    let i = r * s + t;
                    let (_, snapped) = defenses::dxp_perturb(
                        &Tensor::vector(table.row(ids[i]).to_vec()),
                        eps_prime,
                        table,
                        noise,
                    )?;
                    ids[i] = snapped[0];
                }
            }
            batch.with_ids(ids)?
        }
        _ => batch.clone(),
    };
    let x = forward_segment(
        &mut g1,
        &p1,
        cfg,
        spec.bottom(),
        SegmentInput::Tokens(&fed),
        lens,
    )?;
    let smashed = match st.defense.mechanism {
        Mechanism::LaplaceDp { eps_star, clip } => {
            let sample = defenses::dp_laplace_sample(g1.value(x), eps_star, clip, noise)?;
            defenses::dp_apply(&mut g1, x, &sample)?
        }
        _ => x,
    };
    let penalty = match st.defense.mechanism {
        Mechanism::Nopeek { alpha } if alpha > 0.0 => {
            let table = &segs.bottom["tok_emb"];
            let emb: Vec<f64> = batch
                .ids()
                .iter()
                .flat_map(|&i| table.row(i).to_vec())
                .collect();
            let xe = g1.constant(Tensor::new(vec![b, s, h], emb)?);
            let zero = g1.constant(Tensor::scalar(0.0));
            Some(defenses::nopeek_loss(&mut g1, zero, xe, smashed, alpha)?)
        }
        _ => None,
    };
    let smashed_btm = g1.value(smashed).clone();

    // server: Trunk
    let mut g2 = Graph::new();
    let p2 = bind(&mut g2, &segs.trunk, st);
    let x_btm = g2.leaf(smashed_btm.clone());
    let (trunk_out, deeper_hidden) = match st.deeper {
        Some(d) => {
            let mid = forward_segment(
                &mut g2,
                &p2,
                cfg,
                Segment::blocks(spec.bottom_end, d),
                SegmentInput::Hidden(x_btm),
                lens,
            )?;
            let out = forward_segment(
                &mut g2,
                &p2,
                cfg,
                Segment::blocks(d, spec.trunk_end),
                SegmentInput::Hidden(mid),
                lens,
            )?;
            (out, Some(g2.value(mid).clone()))
        }
        None => (
            forward_segment(
                &mut g2,
                &p2,
                cfg,
                spec.trunk(),
                SegmentInput::Hidden(x_btm),
                lens,
            )?,
            None,
        ),
    };
    let trunk_val = g2.value(trunk_out).clone();

    // client: Top + loss
    let mut g3 = Graph::new();
    let p3 = bind(&mut g3, &segs.top, st);
    let x_trk = g3.leaf(trunk_val.clone());
    let logits = forward_segment(
        &mut g3,
        &p3,
        cfg,
        spec.top(cfg),
        SegmentInput::Hidden(x_trk),
        lens,
    )?;
    let loss = lm_loss(&mut g3, logits, batch)?;
    let task = g3.value(loss).item();
    let pen = penalty.map(|p| g1.value(p).item()).unwrap_or(0.0);
    if !(task + pen).is_finite() {
        return Err(Error::NonFinite {
            step: st.step,
            what: format!("split fine-tuning loss (task {task}, penalty {pen})"),
        });
    }

    let (g_top, ex) = collect(&g3, &p3, &[(loss, Tensor::scalar(1.0))], &[x_trk])?;
    let grad_trunk_out = ex.into_iter().next().expect("one");
    let (g_trk, ex) = collect(&g2, &p2, &[(trunk_out, grad_trunk_out.clone())], &[x_btm])?;
    let grad_btm = ex.into_iter().next().expect("one");
    let mut seeds = vec![(smashed, grad_btm)];
    if let Some(p) = penalty {
        seeds.push((p, Tensor::scalar(1.0)));
    }
    let (g_btm, _) = collect(&g1, &p1, &seeds, &[])?;

    Ok(StepOutput {
        loss: task + pen,
        view: ServerView {
            step: st.step,
            batch_index: 0,
            smashed_btm,
            trunk_out: trunk_val,
            grad_trunk_out,
            deeper_hidden,
            lens: lens.to_vec(),
        },
        grads: [g_btm, g_trk, g_top],
    })
}

/// One split fine-tuning step: forward through all three parties, backward in
/// reverse, AdamW update of the trainable tensors. Returns the server-visible
/// transcript and the loss.
pub fn sl_train_step(state: &mut TrainState, batch: &TokenBatch) -> Result<(Transcript, f64)> {
    let ids: Vec<usize> = (0..batch.batch_size()).collect();
    step_with_ids(state, batch, &ids)
}

fn step_with_ids(
    state: &mut TrainState,
    batch: &TokenBatch,
    ids: &[usize],
) -> Result<(Transcript, f64)> {
    let mut r = state.noise_rng("train-noise", state.step as u64);
    let out = simulate(state, batch, &mut r)?;
    for (i, part) in [Part::Bottom, Part::Trunk, Part::Top]
        .into_iter()
        .enumerate()
    {
        let opt = &mut state.opts[i];
        opt.begin_step();
        let params = state.segments.part_mut(part);
        for (name, gr) in &out.grads[i] {
            let t = params.get_mut(name).expect("bound name");
            opt.update_one(name, t, gr);
        }
    }
    state.step += 1;
    let t = Transcript {
        view: out.view,
        truth: GroundTruth {
            example_ids: ids.to_vec(),
            tokens: batch.clone(),
        },
    };
    Ok((t, out.loss))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FtConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub record_every: usize,
    pub record_batches: usize,
    #[serde(default)]
    pub deeper: Option<usize>,
}

impl Default for FtConfig {
    fn default() -> Self {
        FtConfig {
            steps: 600,
            batch_size: 2,
            lr: 1e-3,
            weight_decay: 0.0,
            record_every: 200,
            record_batches: 5,
            deeper: None,
        }
    }
}

impl FtConfig {
    /// Steps at which transcripts are recorded: multiples of `record_every`
    /// up to and including `steps`.
    pub fn recording_points(&self) -> Vec<usize> {
        if self.record_every == 0 {
            return vec![0];
        }
        (0..=self.steps).step_by(self.record_every).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityPoint {
    pub step: usize,
    pub ppl_test: f64,
    pub adapter_l2: f64,
}

#[derive(Clone, Debug)]
pub struct FtOutcome {
    pub model: ModelParams,
    pub transcripts: Vec<Transcript>,
    pub utility: Vec<UtilityPoint>,
    pub losses: Vec<f64>,
}

/// Fine-tune `model` in split mode on `texts`. At every recording point the
/// current parameters are probed on `record_batches` fresh batches (no update)
/// and test perplexity is measured on `test`.
pub fn run_split_ft<S: AsRef<str>>(
    model: &ModelParams,
    spec: SplitSpec,
    texts: &[S],
    test: &[TokenBatch],
    defense: NoiseSpec,
    cfg: &FtConfig,
    seed: u64,
) -> Result<FtOutcome> {
    if cfg.steps == 0 {
        return contract("split fine-tuning needs at least one step");
    }
    let mut st = TrainState::new(
        model,
        spec,
        defense,
        AdamWConfig::new(cfg.lr, cfg.weight_decay),
        seed,
    )?;
    if let Some(d) = cfg.deeper {
        st = st.with_deeper(d)?;
    }
    let max_len = model.config.max_seq;
    let mut train = Batcher::new(
        texts,
        max_len,
        cfg.batch_size,
        rng::derive(seed, "ft-order"),
    )?;
    let mut probes = Batcher::new(
        texts,
        max_len,
        cfg.batch_size,
        rng::derive(seed, "ft-probe"),
    )?;
    let points = cfg.recording_points();
    let mut out = FtOutcome {
        model: model.clone(),
        transcripts: Vec::new(),
        utility: Vec::new(),
        losses: Vec::with_capacity(cfg.steps),
    };
    for step in 0..=cfg.steps {
        if points.contains(&step) {
            for i in 0..cfg.record_batches {
                let (ids, batch) = probes.next_indexed();
                let o = st.probe(&batch, i as u64)?;
                let mut view = o.view;
                view.batch_index = i;
                out.transcripts.push(Transcript {
                    view,
                    truth: GroundTruth {
                        example_ids: ids,
                        tokens: batch,
                    },
                });
            }
            let m = st.model();
            let ppl = if test.is_empty() {
                f64::NAN
            } else {
                perplexity(&m, test)?
            };
            out.utility.push(UtilityPoint {
                step,
                ppl_test: ppl,
                adapter_l2: m.adapter_l2_norm(),
            });
            log::info!("split-ft step {step}: test ppl {ppl:.3}");
        }
        if step == cfg.steps {
            break;
        }
        let (ids, batch) = train.next_indexed();
        let (_, loss) = step_with_ids(&mut st, &batch, &ids)?;
        out.losses.push(loss);
    }
    out.model = st.model();
    Ok(out)
}

/// Centralized adapter training of the client-held segments (Bottom and Top)
/// before split fine-tuning starts.
pub fn pre_finetune<S: AsRef<str>>(
    model: &ModelParams,
    spec: SplitSpec,
    texts: &[S],
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<ModelParams> {
    if !model.has_adapters() {
        return contract("pre-fine-tuning needs adapters attached");
    }
    spec.validate(&model.config)?;
    let mut p = model.clone();
    if steps == 0 {
        return Ok(p);
    }
    let names: Vec<String> = p
        .tensors
        .keys()
        .filter(|k| is_adapter(k) && part_of(k, &spec) != Part::Trunk)
        .cloned()
        .collect();
    let mut batches = Batcher::new(texts, p.config.max_seq, batch_size, seed)?;
    let mut opt = AdamW::new(AdamWConfig::new(lr, 0.0));
    for step in 0..steps {
        let b = batches.next_batch();
        train_step_on(&mut p, &mut opt, &b, step, &names)?;
    }
    Ok(p)
}

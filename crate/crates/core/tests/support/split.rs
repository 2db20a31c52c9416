//! One split-learning step against the same step run as one graph.

use rand::Rng;
use splitlab_core::autodiff::{Graph, Tensor};
use splitlab_core::defenses::NoiseSpec;
use splitlab_core::model::{
    forward_segment, is_adapter, lm_loss, Bound, ModelConfig, ModelParams, Segment, SegmentInput,
    TokenBatch,
};
use splitlab_core::optim::AdamWConfig;
use splitlab_core::rng;
use splitlab_core::splitsim::{part_of, Part, SplitSpec, TrainState};
use splitlab_core::Result;

fn cfg(blocks: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 40,
        hidden: 16,
        blocks,
        heads: 2,
        ffn_dim: 24,
        max_seq: 10,
        norm_eps: 1e-6,
    }
}

fn ragged_batch(seed: u64, v: usize) -> TokenBatch {
    let mut r = rng::stream(seed, "ragged");
    let b = r.random_range(1..4);
    let rows: Vec<Vec<usize>> = (0..b)
        .map(|_| {
            let l = r.random_range(2..=10);
            (0..l).map(|_| r.random_range(0..v)).collect()
        })
        .collect();
    TokenBatch::from_rows(&rows).unwrap()
}

/// Largest absolute disagreements between the split step and the centralized one.
#[derive(Debug)]
pub struct Gap {
    pub loss: f64,
    pub grad_trunk_out: f64,
    pub trunk_out: f64,
    pub params: f64,
    /// Parameter gradients compared, and the count the split step produced.
    pub compared: (usize, usize),
}

/// Random model, split and ragged batch for `case`; odd cases carry nonzero adapters.
pub fn centralized_gap(case: u64) -> Result<Gap> {
    let mut r = rng::stream(case, "pair");
    let blocks = r.random_range(3..6);
    let mut model = ModelParams::build(cfg(blocks), case)?;
    if case % 2 == 1 {
        model = model.attach_adapters(2, "attn", case)?;
        let mut nr = rng::stream(case, "b");
        for (k, t) in model.tensors.iter_mut() {
            if k.ends_with(".lora_b") {
                *t = Tensor::randn(t.shape(), 0.1, &mut nr);
            }
        }
    }
    let b = r.random_range(1..blocks - 1);
    let t = r.random_range(b + 1..blocks);
    let spec = SplitSpec::new(b, t);
    let batch = ragged_batch(case, 40);
    let st = TrainState::new(
        &model,
        spec,
        NoiseSpec::none(),
        AdamWConfig::new(1e-3, 0.0),
        case,
    )?;
    let out = st.probe(&batch, 0)?;

    // one graph: bottom + trunk, a cut variable, then top
    let mut g = Graph::new();
    let adapters = model.has_adapters();
    let p = Bound::new(&mut g, &model.tensors, |k| !adapters || is_adapter(k));
    let lower = Segment {
        embed: true,
        start: 0,
        end: t,
        head: false,
    };
    let h = forward_segment(
        &mut g,
        &p,
        &model.config,
        lower,
        SegmentInput::Tokens(&batch),
        batch.lens(),
    )?;
    let upper = Segment {
        embed: false,
        start: t,
        end: blocks,
        head: true,
    };
    let y = forward_segment(
        &mut g,
        &p,
        &model.config,
        upper,
        SegmentInput::Hidden(h),
        batch.lens(),
    )?;
    let l = lm_loss(&mut g, y, &batch)?;
    let vars = p.trainable(&g);
    let mut wrt = vec![h];
    wrt.extend(vars.iter().map(|(_, v)| *v));
    let grads = g.backward(l, &wrt)?;

    let mut params = 0.0f64;
    for (name, v) in &vars {
        let i = match part_of(name, &spec) {
            Part::Bottom => 0,
            Part::Trunk => 1,
            Part::Top => 2,
        };
        params = params.max(out.grads[i][name].max_abs_diff(grads.wrt(*v)));
    }
    Ok(Gap {
        loss: (out.loss - g.value(l).item()).abs(),
        grad_trunk_out: out.view.grad_trunk_out.max_abs_diff(grads.wrt(h)),
        trunk_out: out.view.trunk_out.max_abs_diff(g.value(h)),
        params,
        compared: (vars.len(), out.grads.iter().map(|m| m.len()).sum()),
    })
}

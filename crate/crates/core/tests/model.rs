use rand::Rng;
use splitlab_core::autodiff::{Graph, Tensor};
use splitlab_core::model::{
    eval_batches, forward_segment, lm_loss, perplexity, pretrain, tokenize, train_step, Bound,
    ModelConfig, ModelParams, PretrainConfig, Segment, SegmentInput, TokenBatch, BOS, PAD,
};
use splitlab_core::optim::{AdamW, AdamWConfig};
use splitlab_core::rng;

fn small(v: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: v,
        hidden: 16,
        blocks: 3,
        heads: 2,
        ffn_dim: 32,
        max_seq: 8,
        norm_eps: 1e-6,
    }
}

fn random_batch(b: usize, s: usize, v: usize, seed: u64) -> TokenBatch {
    let mut r = rng::stream(seed, "batch");
    let rows: Vec<Vec<usize>> = (0..b)
        .map(|_| (0..s).map(|_| r.random_range(0..v)).collect())
        .collect();
    TokenBatch::from_rows(&rows).unwrap()
}

fn logits(p: &ModelParams, batch: &TokenBatch) -> Tensor {
    let mut g = Graph::new();
    let b = Bound::new(&mut g, &p.tensors, |_| false);
    let y = forward_segment(
        &mut g,
        &b,
        &p.config,
        Segment::full(&p.config),
        SegmentInput::Tokens(batch),
        batch.lens(),
    )
    .unwrap();
    g.value(y).clone()
}

fn loss_of(p: &ModelParams, batch: &TokenBatch) -> f64 {
    let mut g = Graph::new();
    let b = Bound::new(&mut g, &p.tensors, |_| false);
    let y = forward_segment(
        &mut g,
        &b,
        &p.config,
        Segment::full(&p.config),
        SegmentInput::Tokens(batch),
        batch.lens(),
    )
    .unwrap();
    let l = lm_loss(&mut g, y, batch).unwrap();
    g.value(l).item()
}

#[test]
fn tokenizer_examples() {
    assert_eq!(tokenize("", 3), vec![BOS, PAD, PAD]);
    assert_eq!(tokenize("ab", 4), vec![BOS, 97, 98, PAD]);
}

#[test]
fn fresh_model_entropy_is_near_log_v() {
    let p = ModelParams::build(ModelConfig::default(), 1).unwrap();
    let batch = random_batch(2, 16, 256, 2);
    let y = logits(&p, &batch);
    let v = p.config.vocab_size;
    let log_v = (v as f64).ln();
    for row in y.data().chunks(v) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        let h: f64 = -row
            .iter()
            .map(|x| (x - m).exp() / z * ((x - m) - z.ln()))
            .sum::<f64>();
        assert!((h - log_v).abs() / log_v < 0.05, "entropy {h}");
    }
}

#[test]
fn segments_compose_to_the_full_model() {
    let p = ModelParams::build(small(32), 3).unwrap();
    let batch = random_batch(2, 8, 32, 4);
    let full = logits(&p, &batch);
    for k in 0..=3 {
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &p.tensors, |_| false);
        let first = Segment {
            embed: true,
            start: 0,
            end: k,
            head: false,
        };
        let h = forward_segment(
            &mut g,
            &b,
            &p.config,
            first,
            SegmentInput::Tokens(&batch),
            batch.lens(),
        )
        .unwrap();
        let rest = Segment {
            embed: false,
            start: k,
            end: 3,
            head: true,
        };
        let y = forward_segment(
            &mut g,
            &b,
            &p.config,
            rest,
            SegmentInput::Hidden(h),
            batch.lens(),
        )
        .unwrap();
        assert!(g.value(y).max_abs_diff(&full) < 1e-12);
        let same = forward_segment(
            &mut g,
            &b,
            &p.config,
            Segment::blocks(k, k),
            SegmentInput::Hidden(h),
            batch.lens(),
        )
        .unwrap();
        assert_eq!(g.value(same), g.value(h));
    }
}

#[test]
fn future_tokens_do_not_change_past_outputs() {
    let p = ModelParams::build(small(32), 5).unwrap();
    let mut r = rng::stream(6, "causal");
    for case in 0..20 {
        let batch = random_batch(1, 8, 32, 100 + case);
        let t = r.random_range(0..7);
        let mut ids = batch.ids().to_vec();
        ids[t + 1..].shuffle_with(&mut r);
        let other = batch.with_ids(ids).unwrap();
        let (a, b) = (logits(&p, &batch), logits(&p, &other));
        let v = 32;
        for u in 0..=t {
            assert!(
                a.data()[u * v..(u + 1) * v] == b.data()[u * v..(u + 1) * v],
                "case {case} t {t}"
            );
        }
    }
}

trait ShuffleWith {
    fn shuffle_with(&mut self, r: &mut splitlab_core::rng::LabRng);
}

impl ShuffleWith for [usize] {
    fn shuffle_with(&mut self, r: &mut splitlab_core::rng::LabRng) {
        use rand::seq::SliceRandom;
        // a fresh random draw so the permuted tail almost surely differs
        for x in self.iter_mut() {
            *x = r.random_range(0..32);
        }
        self.shuffle(r);
    }
}

#[test]
fn causality_via_jvp_tangent() {
    let p = ModelParams::build(small(32), 5).unwrap();
    let batch = random_batch(1, 8, 32, 9);
    let mut g = Graph::new();
    let b = Bound::new(&mut g, &p.tensors, |_| false);
    let table = &p.tensors["tok_emb"];
    let e: Vec<f64> = batch
        .ids()
        .iter()
        .flat_map(|&t| table.row(t).to_vec())
        .collect();
    let e = g.leaf(Tensor::new(vec![1, 8, 16], e).unwrap());
    let y = forward_segment(
        &mut g,
        &b,
        &p.config,
        Segment::full(&p.config),
        SegmentInput::Embeddings(e),
        batch.lens(),
    )
    .unwrap();
    for u in 1..8 {
        let mut tan = vec![0.0; 8 * 16];
        for x in &mut tan[u * 16..(u + 1) * 16] {
            *x = 1.0;
        }
        let d = g
            .jvp(&[(e, Tensor::new(vec![1, 8, 16], tan).unwrap())], &[y])
            .unwrap()
            .remove(0);
        for t in 0..u {
            assert!(d.data()[t * 32..(t + 1) * 32].iter().all(|&x| x == 0.0));
        }
        assert!(d.data()[u * 32..(u + 1) * 32].iter().any(|&x| x != 0.0));
    }
}

#[test]
fn lm_loss_oracles() {
    let v = 32;
    let batch = TokenBatch::from_rows(&[vec![3, 7, 9], vec![5, 1]]).unwrap();
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[2, 3, v]));
    let l = lm_loss(&mut g, z, &batch).unwrap();
    assert!((g.value(l).item() - (v as f64).ln()).abs() < 1e-9);

    let mut d = vec![0.0; 2 * 3 * v];
    for (r, row) in [[7usize, 9], [1, 0]].iter().enumerate() {
        for (t, &next) in row.iter().enumerate() {
            d[(r * 3 + t) * v + next] = 1e4;
        }
    }
    let one_hot = g.constant(Tensor::new(vec![2, 3, v], d).unwrap());
    let l = lm_loss(&mut g, one_hot, &batch).unwrap();
    assert!(g.value(l).item() < 1e-3);

    // position-by-position oracle on random logits
    let mut r = rng::stream(1, "logits");
    let lt = Tensor::randn(&[2, 3, v], 1.0, &mut r);
    let lv = g.constant(lt.clone());
    let l = lm_loss(&mut g, lv, &batch).unwrap();
    let ce = |row: &[f64], k: usize| {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        -(row[k] - m - z.ln())
    };
    let want =
        (ce(&lt.data()[0..v], 7) + ce(&lt.data()[v..2 * v], 9) + ce(&lt.data()[3 * v..4 * v], 1))
            / 3.0;
    assert!((g.value(l).item() - want).abs() < 1e-12);
}

#[test]
fn lm_gradient_matches_finite_differences_for_every_parameter_class() {
    let base = ModelParams::build(small(32), 7).unwrap();
    let mut p = base.attach_adapters(2, "attn", 8).unwrap();
    // nonzero B so that A receives gradient too
    let mut r = rng::stream(9, "lora-b");
    for (k, t) in p.tensors.iter_mut() {
        if k.ends_with(".lora_b") {
            *t = Tensor::randn(t.shape(), 0.05, &mut r);
        }
    }
    let batch = random_batch(2, 8, 32, 10);
    let mut g = Graph::new();
    let b = Bound::new(&mut g, &p.tensors, |_| true);
    let y = forward_segment(
        &mut g,
        &b,
        &p.config,
        Segment::full(&p.config),
        SegmentInput::Tokens(&batch),
        batch.lens(),
    )
    .unwrap();
    let l = lm_loss(&mut g, y, &batch).unwrap();
    let vars = b.trainable(&g);
    let ids: Vec<_> = vars.iter().map(|(_, v)| *v).collect();
    let grads = g.backward(l, &ids).unwrap();
    let mut classes = std::collections::BTreeSet::new();
    let mut pick = rng::stream(11, "entries");
    for (name, v) in &vars {
        let an = grads.wrt(*v);
        for _ in 0..6 {
            let i = pick.random_range(0..an.numel());
            let central = |h: f64| {
                let mut q = p.clone();
                q.tensors.get_mut(name).unwrap().data_mut()[i] += h;
                let fp = loss_of(&q, &batch);
                q.tensors.get_mut(name).unwrap().data_mut()[i] -= 2.0 * h;
                (fp - loss_of(&q, &batch)) / (2.0 * h)
            };
            // Richardson step removes the O(h²) term
            let fd = (4.0 * central(5e-4) - central(1e-3)) / 3.0;
            let a = an.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-7);
            assert!(rel < 1e-4, "{name}[{i}]: analytic {a} fd {fd}");
        }
        let class = if name.contains("lora") {
            "adapter"
        } else if ["wq", "wk", "wv", "wo"].iter().any(|m| name.ends_with(m)) {
            "attention"
        } else if name.contains("w_gate") || name.contains("w_up") || name.contains("w_down") {
            "mlp"
        } else if name.contains("emb") {
            "embedding"
        } else if name.contains("head") {
            "head"
        } else {
            "norm"
        };
        classes.insert(class);
    }
    for c in ["adapter", "attention", "mlp", "embedding", "head"] {
        assert!(classes.contains(c), "class {c} missing from {classes:?}");
    }
}

#[test]
fn adapters_start_as_a_no_op_and_grow_with_training() {
    let p = ModelParams::build(small(32), 12).unwrap();
    let a = p.attach_adapters(4, "attn", 3).unwrap();
    let batch = random_batch(2, 8, 32, 13);
    assert!(logits(&p, &batch).max_abs_diff(&logits(&a, &batch)) < 1e-12);
    let want: f64 = a
        .tensors
        .iter()
        .filter(|(k, _)| k.ends_with(".lora_a"))
        .map(|(_, t)| t.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    let n0 = a.adapter_l2_norm();
    assert!((n0 - want).abs() < 1e-12);
    let mut m = a;
    let mut opt = AdamW::new(AdamWConfig::new(1e-3, 0.0));
    for step in 0..100 {
        let b = random_batch(2, 8, 32, 1000 + step as u64);
        train_step(&mut m, &mut opt, &b, step).unwrap();
    }
    assert!(m.adapter_l2_norm() > n0);
}

#[test]
fn perplexity_of_untrained_model_is_near_v() {
    let p = ModelParams::build(ModelConfig::default(), 2).unwrap();
    let mut r = rng::stream(3, "bytes");
    let texts: Vec<String> = (0..8)
        .map(|_| {
            (0..40)
                .map(|_| char::from(r.random_range(32u8..127)))
                .collect()
        })
        .collect();
    let batches = eval_batches(&texts, 64, 4).unwrap();
    let ppl = perplexity(&p, &batches).unwrap();
    let v = p.config.vocab_size as f64;
    assert!((ppl - v).abs() / v < 0.1, "ppl {ppl}");
}

#[test]
fn pretraining_lowers_perplexity_nearly_monotonically() {
    let cfg = ModelConfig {
        max_seq: 32,
        blocks: 3,
        ..ModelConfig::default()
    };
    let texts: Vec<String> = (0..64)
        .map(|i| {
            format!(
                "the {} cat sat on mat {}",
                ["red", "tan", "big", "old"][i % 4],
                i % 10
            )
        })
        .collect();
    let eval = eval_batches(&texts[..16], 32, 8).unwrap();
    let mut p = ModelParams::build(cfg, 4).unwrap();
    let pc = PretrainConfig {
        steps: 25,
        batch_size: 8,
        ..Default::default()
    };
    let mut prev = perplexity(&p, &eval).unwrap();
    for round in 0..8 {
        p = pretrain(p, &texts, &pc, 100 + round).unwrap().0;
        let ppl = perplexity(&p, &eval).unwrap();
        assert!(ppl <= prev * 1.02, "round {round}: {ppl} after {prev}");
        prev = ppl;
    }
}

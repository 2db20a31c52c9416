use rand::Rng;
use splitlab_core::attacks::{
    bisr_pipeline, gradient_matching, nearest_embedding_decode, sip_attack, smashed_data_matching,
    train_ae_baseline, train_sip, AttackHyperparams, GmInit, InverterTrainConfig, LabelTop,
    Provenance, ReplicaSegments, Stage,
};
use splitlab_core::autodiff::{finite_difference_gradient, max_relative_error, Tensor};
use splitlab_core::defenses::NoiseSpec;
use splitlab_core::model::{InverterParams, InverterShape, ModelConfig, ModelParams, TokenBatch};
use splitlab_core::optim::AdamWConfig;
use splitlab_core::rng;
use splitlab_core::splitsim::{ServerView, SplitSpec, TrainState};

fn toy(h: usize, v: usize, s: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: v,
        hidden: h,
        blocks: 3,
        heads: 2,
        ffn_dim: 2 * h,
        max_seq: s,
        norm_eps: 1e-6,
    }
}

fn random_rows(b: usize, s: usize, v: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut r = rng::stream(seed, "rows");
    (0..b)
        .map(|_| (0..s).map(|_| r.random_range(0..v)).collect())
        .collect()
}

fn view_of(model: &ModelParams, spec: SplitSpec, batch: &TokenBatch) -> ServerView {
    let st = TrainState::new(
        model,
        spec,
        NoiseSpec::none(),
        AdamWConfig::new(1e-3, 0.0),
        1,
    )
    .unwrap();
    st.probe(batch, 0).unwrap().view
}

fn one_hot_labels(batch: &TokenBatch, v: usize) -> Tensor {
    let s = batch.seq_len();
    let mut d = vec![0.0; batch.batch_size() * (s - 1) * v];
    for r in 0..batch.batch_size() {
        for u in 0..s - 1 {
            let next = if u + 1 < batch.lens()[r] {
                batch.ids()[r * s + u + 1]
            } else {
                0
            };
            d[(r * (s - 1) + u) * v + next] = 1.0;
        }
    }
    Tensor::new(vec![batch.batch_size(), s - 1, v], d).unwrap()
}

fn random_simplex(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "simplex");
    let v = *shape.last().unwrap();
    let n: usize = shape.iter().product();
    let mut d: Vec<f64> = (0..n).map(|_| r.random_range(0.05..1.0)).collect();
    for row in d.chunks_mut(v) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    Tensor::new(shape.to_vec(), d).unwrap()
}

#[test]
fn label_gradient_matches_finite_differences() {
    let cfg = toy(16, 16, 4);
    let model = ModelParams::build(cfg.clone(), 3).unwrap();
    let betas = [0.0, 0.5, 0.85, 1.0];
    let mut n = 0;
    for (top_blocks, trunk_end) in [(0, 3), (1, 2)] {
        for (bi, &beta) in betas.iter().enumerate() {
            let extra = if bi < 1 { 2 } else { 1 };
            for rep in 0..extra {
                let seed = (top_blocks * 10 + bi * 2 + rep) as u64;
                let spec = SplitSpec::new(1, trunk_end);
                let batch = TokenBatch::from_rows(&random_rows(1 + rep, 4, 16, seed)).unwrap();
                let view = view_of(&model, spec, &batch);
                let replica = ReplicaSegments::from_pretrained(&model, spec).unwrap();
                let top = LabelTop::new(&replica, &view.trunk_out, &view.lens).unwrap();
                let y = random_simplex(&[batch.batch_size(), 3, 16], seed + 100);
                let (_, grad) = top.loss_and_grad(&y, &view.grad_trunk_out, beta).unwrap();
                let fd = finite_difference_gradient(
                    |yy| {
                        Ok(top
                            .loss_and_grad_unconstrained(yy, &view.grad_trunk_out, beta)?
                            .0)
                    },
                    &y,
                    1e-7,
                )
                .unwrap();
                let floor = 1e-3 * fd.norm_inf();
                let err = max_relative_error(&grad, &fd, floor);
                assert!(err < 1e-3, "top {top_blocks} beta {beta}: rel err {err}");
                n += 1;
            }
        }
    }
    assert_eq!(n, 10);
}

#[test]
fn dummy_gradient_is_linear_in_labels() {
    let cfg = toy(16, 16, 4);
    let model = ModelParams::build(cfg, 4).unwrap();
    let spec = SplitSpec::new(1, 2);
    let batch = TokenBatch::from_rows(&random_rows(2, 4, 16, 9)).unwrap();
    let view = view_of(&model, spec, &batch);
    let replica = ReplicaSegments::from_pretrained(&model, spec).unwrap();
    let top = LabelTop::new(&replica, &view.trunk_out, &view.lens).unwrap();
    let mut r = rng::stream(5, "lambda");
    for k in 0..5 {
        let lam: f64 = r.random_range(0.01..0.99);
        let y1 = random_simplex(&[2, 3, 16], 2 * k);
        let y2 = random_simplex(&[2, 3, 16], 2 * k + 1);
        let mix = y1.zip_map(&y2, |a, b| lam * a + (1.0 - lam) * b);
        let g1 = top.dummy_gradient(&y1).unwrap();
        let g2 = top.dummy_gradient(&y2).unwrap();
        let want = g1.zip_map(&g2, |a, b| lam * a + (1.0 - lam) * b);
        assert!(top.dummy_gradient(&mix).unwrap().max_abs_diff(&want) < 1e-9);
    }
}

#[test]
fn non_probability_labels_rejected() {
    let cfg = toy(16, 16, 4);
    let model = ModelParams::build(cfg, 4).unwrap();
    let spec = SplitSpec::new(1, 2);
    let batch = TokenBatch::from_rows(&random_rows(1, 4, 16, 9)).unwrap();
    let view = view_of(&model, spec, &batch);
    let replica = ReplicaSegments::from_pretrained(&model, spec).unwrap();
    let top = LabelTop::new(&replica, &view.trunk_out, &view.lens).unwrap();
    let bad = Tensor::full(&[1, 3, 16], 0.5);
    assert!(top.dummy_gradient(&bad).is_err());
    assert!(top.loss_and_grad(&bad, &view.grad_trunk_out, 0.85).is_err());
}

#[test]
fn true_labels_are_a_zero_of_the_matching_loss() {
    let cfg = toy(16, 16, 6);
    let model = ModelParams::build(cfg, 6).unwrap();
    let spec = SplitSpec::new(1, 2);
    let rows = vec![vec![1, 5, 7, 2, 9, 3], vec![4, 4, 8, 11]];
    let batch = TokenBatch::from_rows(&rows).unwrap();
    let view = view_of(&model, spec, &batch);
    let replica = ReplicaSegments::from_pretrained(&model, spec).unwrap();
    let top = LabelTop::new(&replica, &view.trunk_out, &view.lens).unwrap();
    let (l, g) = top
        .loss_and_grad(&one_hot_labels(&batch, 16), &view.grad_trunk_out, 0.85)
        .unwrap();
    assert!(l.abs() < 1e-9, "loss {l}");
    assert!(g.is_finite());
}

#[test]
fn gradient_matching_recovers_labels_through_head_only_top() {
    let cfg = toy(16, 16, 8);
    let model = ModelParams::build(cfg, 11).unwrap();
    let spec = SplitSpec::new(1, 3);
    let batch = TokenBatch::from_rows(&random_rows(1, 8, 16, 12)).unwrap();
    let view = view_of(&model, spec, &batch);
    let replica = ReplicaSegments::from_pretrained(&model, spec).unwrap();
    let hp = AttackHyperparams {
        gm_epochs: 300,
        ..Default::default()
    };
    let out = gradient_matching(&view, &replica, GmInit::Random(3), &hp).unwrap();
    let truth = batch.row(0);
    let hits = (1..8).filter(|&t| out.tokens[t] == truth[t]).count();
    assert!(hits as f64 / 7.0 >= 0.9, "recovered {hits}/7");
    assert_eq!(out.tokens.len(), truth.len());
    assert_eq!(out.tokens[0], splitlab_core::model::BOS);
    let mut best = f64::INFINITY;
    for &l in &out.trace {
        best = best.min(l);
    }
    assert_eq!(best, out.best_loss);
}

#[test]
fn smashed_matching_fixed_point_and_stationarity() {
    let cfg = toy(16, 32, 8);
    let model = ModelParams::build(cfg, 7).unwrap();
    let spec = SplitSpec::new(1, 2);
    let batch = TokenBatch::from_rows(&random_rows(2, 8, 32, 1)).unwrap();
    let view = view_of(&model, spec, &batch);
    let replica = ReplicaSegments::from_pretrained(&model, spec).unwrap();
    let hp = AttackHyperparams {
        sm_epochs: 1,
        sm_weight_decay: 0.0,
        ..Default::default()
    };
    let out =
        smashed_data_matching(&view.smashed_btm, &view.lens, &replica, batch.ids(), &hp).unwrap();
    assert!(out.trace[0].abs() < 1e-9, "loss {}", out.trace[0]);
    assert_eq!(out.tokens, batch.ids());
    // one step from the optimum barely moves the iterate
    let table = replica.embedding_table();
    let e0: Vec<f64> = batch
        .ids()
        .iter()
        .flat_map(|&t| table.row(t).to_vec())
        .collect();
    let moved = out
        .embeddings
        .data()
        .iter()
        .zip(&e0)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(moved <= 1e-6);
}

#[test]
fn smashed_matching_recovers_toy_tokens_from_random_init() {
    let cfg = toy(16, 32, 8);
    let model = ModelParams::build(cfg, 21).unwrap();
    let spec = SplitSpec::new(1, 2);
    let truth = random_rows(1, 8, 32, 22);
    let batch = TokenBatch::from_rows(&truth).unwrap();
    let view = view_of(&model, spec, &batch);
    let replica = ReplicaSegments::from_pretrained(&model, spec).unwrap();
    let hp = AttackHyperparams::default();

    // brute-force oracle: every single-token flip of the truth scores worse
    let zero = AttackHyperparams {
        sm_epochs: 1,
        sm_weight_decay: 0.0,
        sm_lr: 1e-12,
        ..hp
    };
    let loss_at = |ids: &[usize]| {
        smashed_data_matching(&view.smashed_btm, &view.lens, &replica, ids, &zero)
            .unwrap()
            .trace[0]
    };
    let base = loss_at(batch.ids());
    for pos in 0..8 {
        for v in 0..32 {
            if v == truth[0][pos] {
                continue;
            }
            let mut ids = truth[0].clone();
            ids[pos] = v;
            assert!(loss_at(&ids) > base, "flip ({pos}, {v}) not worse");
        }
    }

    let init = random_rows(1, 8, 32, 23).concat();
    let out = smashed_data_matching(&view.smashed_btm, &view.lens, &replica, &init, &hp).unwrap();
    let hits = out
        .tokens
        .iter()
        .zip(&truth[0])
        .filter(|(a, b)| a == b)
        .count();
    assert!(hits >= 7, "recovered {hits}/8");
    let best = out.trace.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(best, out.best_loss);
}

#[test]
fn nearest_decode_matches_scan() {
    let mut r = rng::stream(4, "table");
    let table = Tensor::randn(&[32, 8], 1.0, &mut r);
    let e = Tensor::randn(&[2, 5, 8], 1.0, &mut r);
    let got = nearest_embedding_decode(&e, &table);
    for (i, row) in e.data().chunks(8).enumerate() {
        let mut best = (f64::INFINITY, 0);
        for v in 0..32 {
            let d: f64 = table
                .row(v)
                .iter()
                .zip(row)
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            if d < best.0 {
                best = (d, v);
            }
        }
        assert_eq!(got[i], best.1);
    }
    let exact: Vec<f64> = [3usize, 17, 3]
        .iter()
        .flat_map(|&v| table.row(v).to_vec())
        .collect();
    let exact = Tensor::new(vec![3, 8], exact).unwrap();
    assert_eq!(nearest_embedding_decode(&exact, &table), vec![3, 17, 3]);
    let nudged = exact.map(|x| x + 1e-6);
    assert_eq!(nearest_embedding_decode(&nudged, &table), vec![3, 17, 3]);
}

#[test]
fn zero_input_gives_identical_logits_at_init() {
    let inv = InverterParams::init(InverterShape::new(8, 12), 1);
    let out = sip_attack(&inv, &Tensor::zeros(&[1, 6, 8]), &[6]).unwrap();
    let first = out.logits.data()[..12].to_vec();
    for row in out.logits.data().chunks(12) {
        assert_eq!(row, &first[..]);
    }
    assert_eq!(
        out,
        sip_attack(&inv, &Tensor::zeros(&[1, 6, 8]), &[6]).unwrap()
    );
}

fn tiny_text_config() -> ModelConfig {
    ModelConfig {
        hidden: 16,
        blocks: 3,
        heads: 2,
        ffn_dim: 32,
        max_seq: 16,
        ..ModelConfig::default()
    }
}

#[test]
fn sip_memorizes_training_rows_and_loss_falls() {
    let cfg = tiny_text_config();
    let model = ModelParams::build(cfg.clone(), 5).unwrap();
    let spec = SplitSpec::new(1, 2);
    let replica = ReplicaSegments::from_pretrained(&model, spec).unwrap();
    let aux = [
        "red fox", "blue owl", "tan cat", "old dog", "big elk", "shy emu",
    ];
    let tc = InverterTrainConfig {
        epochs: 300,
        batch_size: 6,
        lr: 1e-2,
        hidden: 64,
        ..Default::default()
    };
    let (inv, trace) = train_sip(&aux, &replica, &NoiseSpec::none(), &tc, 3).unwrap();
    for w in trace[..5].windows(2) {
        assert!(w[1] <= w[0] * 1.02, "trace {:?}", &trace[..5]);
    }
    let batch = TokenBatch::from_texts(&aux, cfg.max_seq).unwrap();
    let out = sip_attack(&inv, &replica.encode(&batch).unwrap(), batch.lens()).unwrap();
    let (mut hit, mut tot) = (0, 0);
    for (r, &l) in batch.lens().iter().enumerate() {
        for t in 0..l {
            hit += usize::from(
                out.tokens[r * batch.seq_len() + t] == batch.ids()[r * batch.seq_len() + t],
            );
            tot += 1;
        }
    }
    assert!(hit as f64 / tot as f64 >= 0.95, "{hit}/{tot}");

    let (ae, enc) = train_ae_baseline(
        &aux,
        &cfg,
        spec,
        &InverterTrainConfig { epochs: 1, ..tc },
        3,
    )
    .unwrap();
    assert_eq!(enc.provenance(), Provenance::Random);
    assert_eq!(ae.shape, inv.shape);
}

#[test]
fn pipeline_sip_mode_is_the_inverter_output() {
    let cfg = tiny_text_config();
    let model = ModelParams::build(cfg.clone(), 5).unwrap();
    let spec = SplitSpec::new(1, 2);
    let replica = ReplicaSegments::from_pretrained(&model, spec).unwrap();
    let inv = InverterParams::init(InverterShape::new(16, cfg.vocab_size), 2);
    let batch = TokenBatch::from_texts(&["one two", "three"], 16).unwrap();
    let view = view_of(&model, spec, &batch);
    let hp = AttackHyperparams {
        gm_epochs: 2,
        sm_epochs: 2,
        ..Default::default()
    };
    let res = bisr_pipeline(&view, &inv, &replica, Stage::Sip, &hp).unwrap();
    let direct = sip_attack(&inv, &view.smashed_btm, &view.lens).unwrap();
    assert_eq!(res.tokens(Stage::Sip).unwrap(), &direct.tokens[..]);
    assert_eq!(res.stages.len(), 1);
    let res = bisr_pipeline(&view, &inv, &replica, Stage::BF, &hp).unwrap();
    let stages: Vec<Stage> = res.stages.keys().copied().collect();
    assert_eq!(stages, vec![Stage::Sip, Stage::B, Stage::BF]);
    for out in res.stages.values() {
        assert!(out.tokens.iter().all(|&t| t < cfg.vocab_size));
        assert_eq!(out.tokens.len(), batch.ids().len());
    }
}

#[test]
fn replicas_refuse_fine_tuned_weights() {
    let cfg = tiny_text_config();
    let model = ModelParams::build(cfg, 5).unwrap();
    let tuned = model.attach_adapters(2, "attn", 1).unwrap();
    let spec = SplitSpec::new(1, 2);
    assert!(ReplicaSegments::from_pretrained(&tuned, spec).is_err());
    assert_eq!(
        ReplicaSegments::from_pretrained(&model, spec)
            .unwrap()
            .provenance(),
        Provenance::Pretrained
    );
}

/// Attack code must only touch server-visible transcript fields and replicas.
#[test]
fn attack_sources_never_read_ground_truth() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/src/attacks");
    let forbidden = [
        "GroundTruth",
        ".truth",
        "Transcript",
        "TrainState",
        "SplitSegments",
        "FtOutcome",
        "read_log",
    ];
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let src = std::fs::read_to_string(&path).unwrap();
        for f in forbidden {
            assert!(!src.contains(f), "{} mentions {f}", path.display());
        }
    }
}

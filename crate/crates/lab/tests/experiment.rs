mod common;

use std::collections::BTreeSet;

use common::{config, tiny, TRANSCRIPTS};
use serde_json::json;
use splitlab::experiment::{self, clear_memo, run_experiment, RunOptions, TrainedInverter};
use splitlab::report::without_wall_time;

#[test]
fn row_count_matches_points_seeds_steps_stages_batches() {
    let mut v = tiny();
    v["sweep"] = json!([{"path": "split.bottom_end", "values": [1, 2]}]);
    let rep = run_experiment(&config(&v), &RunOptions::default()).unwrap();
    assert!(rep.summary.failures.is_empty(), "{:?}", rep.summary.failures);
    assert_eq!(rep.rows.len(), 2 * 2 * TRANSCRIPTS * 4);
    let stages: BTreeSet<&str> = rep.rows.iter().map(|r| r.stage.as_str()).collect();
    assert_eq!(stages, BTreeSet::from(["b", "b+f", "f", "sip"]));
    let steps: BTreeSet<usize> = rep.rows.iter().filter_map(|r| r.step).collect();
    assert_eq!(steps, BTreeSet::from([0, 2, 4]));
    for r in &rep.rows {
        for m in ["rouge1_f1", "rougeL_f1", "meteor_lite", "trr"] {
            let x = r.metric(m).unwrap();
            assert!((0.0..=1.0).contains(&x), "{m} = {x}");
        }
        assert!(r.ppl_test.unwrap() > 1.0);
    }
    // per (point, stage, metric) entries over two seeds
    assert_eq!(rep.summary.metrics.len(), 2 * 4 * 4);
    assert!(rep.summary.metrics.iter().all(|e| e.n == 2 && e.std.is_some()));
    assert_eq!(rep.summary.points[1].overrides[0].1, json!(2));
}

#[test]
fn identical_configs_reproduce_the_csv() {
    let mut v = tiny();
    v["attack"]["modes"] = json!(["b+f"]);
    let cfg = config(&v);
    let a = run_experiment(&cfg, &RunOptions::default()).unwrap();
    clear_memo();
    let b = run_experiment(&cfg, &RunOptions { jobs: Some(2), cache_dir: None }).unwrap();
    assert_eq!(without_wall_time(&a.rows).unwrap(), without_wall_time(&b.rows).unwrap());
}

#[test]
fn failing_points_leave_one_error_row_per_seed() {
    let mut v = tiny();
    v["attack"]["modes"] = json!(["sip"]);
    v["sweep"] = json!([{"path": "inverter.train.epochs", "values": [1, 0]}]);
    let rep = run_experiment(&config(&v), &RunOptions::default()).unwrap();
    let bad: Vec<_> = rep.rows.iter().filter(|r| r.sweep_id == 1).collect();
    assert_eq!(bad.len(), 2);
    assert!(bad.iter().all(|r| r.is_error() && r.trr.is_none()));
    assert!(bad[0].error.contains("epoch"));
    assert_eq!(rep.rows.iter().filter(|r| r.sweep_id == 0).count(), 2 * TRANSCRIPTS);
    assert_eq!(rep.summary.failures.len(), 2);
    let seen: BTreeSet<(usize, u64)> = rep.rows.iter().map(|r| (r.sweep_id, r.seed)).collect();
    assert_eq!(seen.len(), 4);
}

#[test]
fn pre_finetuning_sweep_reports_adapter_norms() {
    let mut v = tiny();
    v["attack"]["modes"] = json!(["sip"]);
    v["seeds"] = json!([3]);
    v["sweep"] = json!([{"path": "pre_ft_steps", "values": [0, 5, 10]}]);
    let rep = run_experiment(&config(&v), &RunOptions::default()).unwrap();
    let norm_at_zero = |id: usize| {
        rep.summary
            .utility
            .iter()
            .find(|u| u.sweep_id == id && u.step == 0)
            .and_then(|u| u.adapter_l2)
            .unwrap()
    };
    assert!(norm_at_zero(0) < norm_at_zero(1));
    assert!(norm_at_zero(1) <= norm_at_zero(2));
    assert!(rep.entry(2, "sip", "rougeL_f1").is_some());
}

#[test]
fn every_inverter_kind_runs() {
    let mut v = tiny();
    v["attack"]["modes"] = json!(["sip"]);
    v["seeds"] = json!([1]);
    v["defense"] = json!({"mechanism": {"kind": "dxp", "eps_prime": 2.0}});
    for inv in [
        json!({"kind": "ae", "train": v["inverter"]["train"]}),
        json!({"kind": "sip-gru", "noise_aware": true, "train": v["inverter"]["train"]}),
        json!({"kind": "namoe", "train": v["inverter"]["train"], "gate_epochs": 1, "nopeek_pool": 2, "nopeek_pool_steps": 2,
               "experts": [{"mechanism": {"kind": "none"}}, {"mechanism": {"kind": "dxp", "eps_prime": 1.0}},
                           {"mechanism": {"kind": "nopeek", "alpha": 0.5}}]}),
    ] {
        let mut w = v.clone();
        w["inverter"] = inv.clone();
        let rep = run_experiment(&config(&w), &RunOptions::default()).unwrap();
        assert!(rep.summary.failures.is_empty(), "{inv}: {:?}", rep.summary.failures);
        assert_eq!(rep.rows.len(), TRANSCRIPTS);
    }
}

#[test]
fn inverter_checkpoints_round_trip() {
    let cfg = config(&tiny());
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions::default();
    let inv = experiment::inverter(&cfg, 1, &opts).unwrap();
    let p = dir.path().join("inv.json");
    inv.save(&p).unwrap();
    let back = TrainedInverter::load(&p).unwrap();
    let ft = experiment::finetuned(&cfg, 1, &opts).unwrap();
    let view = &ft.transcripts[0].view;
    use splitlab_core::attacks::Inverter;
    assert_eq!(
        inv.decode(&view.smashed_btm, &view.lens).unwrap(),
        back.decode(&view.smashed_btm, &view.lens).unwrap()
    );
}

#[test]
fn span_scoring_and_tag_baseline() {
    let mut v = tiny();
    v["attack"] = json!({"modes": ["sip"], "hp": {"gm_epochs": 2, "sm_epochs": 3}, "spans_only": true, "tag_baseline": true});
    v["seeds"] = json!([1]);
    let rep = run_experiment(&config(&v), &RunOptions::default()).unwrap();
    assert!(rep.summary.failures.is_empty(), "{:?}", rep.summary.failures);
    assert_eq!(rep.rows.len(), TRANSCRIPTS * 2);
    assert!(rep.rows.iter().any(|r| r.stage == "tag"));
}

#[test]
fn pretrained_checkpoints_are_cached_on_disk() {
    let mut v = tiny();
    v["pretrain"]["seed"] = json!(77);
    let cfg = config(&v);
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions { jobs: None, cache_dir: Some(dir.path().to_path_buf()) };
    let a = experiment::pretrained(&cfg, &opts).unwrap();
    let manifests = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "json"))
        .count();
    assert_eq!(manifests, 1);
    clear_memo();
    let b = experiment::pretrained(&cfg, &opts).unwrap();
    assert_eq!(a.checksum(), b.checksum());
}

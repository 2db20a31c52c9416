#![allow(dead_code)]

use serde_json::{json, Value};
use splitlab::config::ExperimentConfig;

/// A seconds-scale experiment on a four-block toy model.
pub fn tiny() -> Value {
    json!({
        "version": 1,
        "model": {"vocab_size": 258, "hidden": 16, "blocks": 4, "heads": 2, "ffn_dim": 32, "max_seq": 64, "norm_eps": 1e-6},
        "pretrain": {"steps": 10, "batch_size": 4, "lr": 3e-3, "weight_decay": 0.01, "seed": 5},
        "corpora": {
            "pretrain": [{"builtin": {"kind": "news", "count": 40, "seed": 1}}],
            "finetune": {"builtin": {"kind": "news", "count": 30, "seed": 2}},
            "test": {"builtin": {"kind": "news", "count": 8, "seed": 3}},
            "auxiliary": {"builtin": {"kind": "news", "count": 24, "seed": 4}}
        },
        "adapters": {"rank": 2, "which": "attn"},
        "split": {"bottom_end": 1, "trunk_end": 3},
        "ft": {"steps": 4, "batch_size": 2, "lr": 1e-3, "weight_decay": 0.0, "record_every": 2, "record_batches": 2},
        "inverter": {"kind": "sip-gru", "train": {"epochs": 1, "batch_size": 8, "lr": 2e-3, "shard": 4, "hidden": 16, "dropout": 0.1}},
        "attack": {"modes": ["sip", "b", "f", "b+f"], "hp": {"gm_epochs": 2, "sm_epochs": 3}},
        "seeds": [1, 2]
    })
}

pub fn config(v: &Value) -> ExperimentConfig {
    ExperimentConfig::from_json(&v.to_string()).unwrap()
}

/// Recording points × batches per point in `tiny()`.
pub const TRANSCRIPTS: usize = 3 * 2;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::TokenBatch;

/// Everything the server legitimately observes for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerView {
    pub step: usize,
    pub batch_index: usize,
    /// Bottom output after any forward defense, `[B, S, H]`.
    pub smashed_btm: Tensor,
    pub trunk_out: Tensor,
    /// Gradient of the loss with respect to `trunk_out`.
    pub grad_trunk_out: Tensor,
    pub deeper_hidden: Option<Tensor>,
    /// Non-pad length of each row, implied by the attention mask.
    pub lens: Vec<usize>,
}

impl ServerView {
    pub fn batch_size(&self) -> usize {
        self.lens.len()
    }

    pub fn seq_len(&self) -> usize {
        self.smashed_btm.shape()[1]
    }
}

/// Evaluation-only metadata; never handed to attack code.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub example_ids: Vec<usize>,
    pub tokens: TokenBatch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transcript {
    pub view: ServerView,
    pub truth: GroundTruth,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    example_ids: Vec<usize>,
    tokens: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    step: usize,
    batch_index: usize,
    lens: Vec<usize>,
    shapes: BTreeMap<String, Vec<usize>>,
    /// Base64 of little-endian f32 values.
    tensors: BTreeMap<String, String>,
    metadata: Metadata,
}

fn encode(t: &Tensor) -> String {
    let mut b = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        b.extend_from_slice(&(v as f32).to_le_bytes());
    }
    STANDARD.encode(b)
}

fn decode(shape: &[usize], s: &str) -> Result<Tensor> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| Error::Checkpoint(format!("transcript base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Checkpoint(
            "transcript tensor length not a multiple of 4".into(),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    Tensor::new(shape.to_vec(), data)
}

fn to_record(t: &Transcript) -> Record {
    let v = &t.view;
    let mut named = vec![
        ("smashed_btm", &v.smashed_btm),
        ("trunk_out", &v.trunk_out),
        ("grad_trunk_out", &v.grad_trunk_out),
    ];
    if let Some(d) = &v.deeper_hidden {
        named.push(("deeper_hidden", d));
    }
    Record {
        step: v.step,
        batch_index: v.batch_index,
        lens: v.lens.clone(),
        shapes: named
            .iter()
            .map(|(k, t)| (k.to_string(), t.shape().to_vec()))
            .collect(),
        tensors: named
            .iter()
            .map(|(k, t)| (k.to_string(), encode(t)))
            .collect(),
        metadata: Metadata {
            example_ids: t.truth.example_ids.clone(),
            tokens: t.truth.tokens.rows(),
        },
    }
}

fn from_record(r: Record) -> Result<Transcript> {
    let get = |k: &str| -> Result<Option<Tensor>> {
        match (r.shapes.get(k), r.tensors.get(k)) {
            (Some(s), Some(t)) => decode(s, t).map(Some),
            (None, None) => Ok(None),
            _ => Err(Error::Checkpoint(format!(
                "transcript field {k} incomplete"
            ))),
        }
    };
    let need = |k: &str| -> Result<Tensor> {
        get(k)?.ok_or_else(|| Error::Checkpoint(format!("transcript lacks {k}")))
    };
    Ok(Transcript {
        view: ServerView {
            step: r.step,
            batch_index: r.batch_index,
            smashed_btm: need("smashed_btm")?,
            trunk_out: need("trunk_out")?,
            grad_trunk_out: need("grad_trunk_out")?,
            deeper_hidden: get("deeper_hidden")?,
            lens: r.lens.clone(),
        },
        truth: GroundTruth {
            example_ids: r.metadata.example_ids,
            tokens: TokenBatch::from_rows(&r.metadata.tokens)?,
        },
    })
}

/// Write one JSON line per transcript.
pub fn write_log(path: &Path, log: &[Transcript]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for t in log {
        serde_json::to_writer(&mut f, &to_record(t))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Load a log written by [`write_log`]; tensors come back as f64 upcasts of the
/// stored f32 values.
pub fn read_log(path: &Path) -> Result<Vec<Transcript>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(from_record(serde_json::from_str(&line)?)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn sample() -> Transcript {
        let mut r = stream(0, "t");
        Transcript {
            view: ServerView {
                step: 3,
                batch_index: 1,
                smashed_btm: Tensor::randn(&[2, 3, 4], 1.0, &mut r),
                trunk_out: Tensor::randn(&[2, 3, 4], 1.0, &mut r),
                grad_trunk_out: Tensor::randn(&[2, 3, 4], 1e-3, &mut r),
                deeper_hidden: None,
                lens: vec![3, 2],
            },
            truth: GroundTruth {
                example_ids: vec![10, 4],
                tokens: TokenBatch::from_rows(&[vec![256, 1, 2], vec![256, 9]]).unwrap(),
            },
        }
    }

    #[test]
    fn log_roundtrip_is_exact_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        write_log(&a, &[sample(), sample()]).unwrap();
        let back = read_log(&a).unwrap();
        assert_eq!(back.len(), 2);
        assert!(
            back[0]
                .view
                .smashed_btm
                .max_abs_diff(&sample().view.smashed_btm)
                < 1e-6
        );
        assert_eq!(back[0].truth, sample().truth);
        write_log(&b, &back).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }
}

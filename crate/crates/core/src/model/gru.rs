//! Unidirectional single-layer GRU decoder mapping hidden states to per-position
//! vocabulary logits. Used as the inversion model by the attacks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamSet};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, LabRng};

pub const DEFAULT_GRU_HIDDEN: usize = 256;
pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverterShape {
    pub input: usize,
    pub hidden: usize,
    pub vocab: usize,
    pub dropout: f64,
}

impl InverterShape {
    pub fn new(input: usize, vocab: usize) -> Self {
        InverterShape {
            input,
            hidden: DEFAULT_GRU_HIDDEN,
            vocab,
            dropout: DEFAULT_DROPOUT,
        }
    }
}

/// GRU core (`gru.*`) and output projection (`out.*`).
#[derive(Clone, Debug, PartialEq)]
pub struct InverterParams {
    pub shape: InverterShape,
    pub tensors: ParamSet,
}

pub const CORE_NAMES: [&str; 4] = ["gru.w_ih", "gru.b_ih", "gru.w_hh", "gru.b_hh"];
pub const OUT_NAMES: [&str; 2] = ["out.w", "out.b"];

impl InverterParams {
    /// Uniform(±1/√hidden) weights, zero biases.
    pub fn init(shape: InverterShape, seed: u64) -> Self {
        let mut r = rng::stream(seed, "gru-init");
        let InverterShape {
            input: i,
            hidden: h,
            vocab: v,
            ..
        } = shape;
        let mut t = ParamSet::new();
        t.insert("gru.w_ih".into(), uniform(&[i, 3 * h], h, &mut r));
        t.insert("gru.b_ih".into(), Tensor::zeros(&[3 * h]));
        t.insert("gru.w_hh".into(), uniform(&[h, 3 * h], h, &mut r));
        t.insert("gru.b_hh".into(), Tensor::zeros(&[3 * h]));
        t.insert("out.w".into(), uniform(&[h, v], h, &mut r));
        t.insert("out.b".into(), Tensor::zeros(&[v]));
        InverterParams { shape, tensors: t }
    }

    pub fn zeroed(shape: InverterShape) -> Self {
        let mut p = Self::init(shape, 0);
        for t in p.tensors.values_mut() {
            *t = Tensor::zeros(t.shape());
        }
        p
    }

    /// Inference-mode logits `[B, S, V]` for `smashed` `[B, S, H]`.
    pub fn invert(&self, smashed: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.tensors, |_| false);
        let x = g.constant(smashed.clone());
        let y = gru_invert(&mut g, &p, &self.shape, x, None)?;
        Ok(g.value(y).clone())
    }
}

fn uniform(shape: &[usize], fan: usize, r: &mut LabRng) -> Tensor {
    let k = 1.0 / (fan as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n).map(|_| r.random_range(-k..k)).collect(),
    )
}

/// Hidden-state sequence `[B, S, hidden]` of the GRU core.
pub fn gru_hidden(g: &mut Graph, p: &Bound, shape: &InverterShape, x: Var) -> Result<Var> {
    gru_hidden_named(g, p, shape, x, "gru")
}

/// Same as [`gru_hidden`] for a core stored under `prefix.*`.
pub fn gru_hidden_named(
    g: &mut Graph,
    p: &Bound,
    shape: &InverterShape,
    x: Var,
    prefix: &str,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[2] != shape.input {
        return Err(Error::Shape {
            op: "gru_invert",
            lhs: s,
            rhs: vec![shape.input],
        });
    }
    let (b, t, h) = (s[0], s[1], shape.hidden);
    let xp = g.matmul(x, p.var(&format!("{prefix}.w_ih"))?)?;
    let xp = g.add(xp, p.var(&format!("{prefix}.b_ih"))?)?;
    let w_hh = p.var(&format!("{prefix}.w_hh"))?;
    let b_hh = p.var(&format!("{prefix}.b_hh"))?;
    let mut hprev = g.constant(Tensor::zeros(&[b, h]));
    let mut outs = Vec::with_capacity(t);
    for step in 0..t {
        let xt = g.slice(xp, 1, step, 1)?;
        let xt = g.reshape(xt, &[b, 3 * h])?;
        let hp = g.matmul(hprev, w_hh)?;
        let hp = g.add(hp, b_hh)?;
        let x_rz = g.slice(xt, 1, 0, 2 * h)?;
        let h_rz = g.slice(hp, 1, 0, 2 * h)?;
        let rz = g.add(x_rz, h_rz)?;
        let rz = g.sigmoid(rz)?;
        let r = g.slice(rz, 1, 0, h)?;
        let z = g.slice(rz, 1, h, h)?;
        let x_n = g.slice(xt, 1, 2 * h, h)?;
        let h_n = g.slice(hp, 1, 2 * h, h)?;
        let rn = g.mul(r, h_n)?;
        let n = g.add(x_n, rn)?;
        let n = g.tanh(n)?;
        // h' = (1 - z) * n + z * h = n + z * (h - n)
        let diff = g.sub(hprev, n)?;
        let zd = g.mul(z, diff)?;
        let hnew = g.add(n, zd)?;
        outs.push(g.reshape(hnew, &[b, 1, h])?);
        hprev = hnew;
    }
    g.concat(&outs, 1)
}

/// Output projection of hidden states to vocabulary logits.
pub fn project_out(g: &mut Graph, p: &Bound, hs: Var) -> Result<Var> {
    let y = g.matmul(hs, p.var("out.w")?)?;
    g.add(y, p.var("out.b")?)
}

/// Full decoder. `dropout` carries a seeded generator when training; `None`
/// disables dropout.
pub fn gru_invert(
    g: &mut Graph,
    p: &Bound,
    shape: &InverterShape,
    x: Var,
    dropout: Option<&mut LabRng>,
) -> Result<Var> {
    let mut hs = gru_hidden(g, p, shape, x)?;
    if let Some(r) = dropout {
        hs = apply_dropout(g, hs, shape.dropout, r)?;
    }
    project_out(g, p, hs)
}

pub fn apply_dropout(g: &mut Graph, x: Var, rate: f64, r: &mut LabRng) -> Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| {
            if r.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let m = g.constant(Tensor::from_parts(shape, mask));
    g.mul(x, m)
}

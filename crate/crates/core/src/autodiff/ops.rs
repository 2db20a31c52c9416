//! Primitive operations: forward evaluation, reverse (VJP) and tangent (JVP) rules.

use super::kernels::{axis_extents, gemm, inverse_axes, log_softmax_row, permute, softmax_row};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Score written into attention positions that must receive zero weight.
pub const MASKED_SCORE: f64 = -1.0e9;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Sqrt,
    Square,
    Sigmoid,
    Tanh,
    Silu,
    Gelu,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    Unary(Unary),
    Softmax,
    LogSoftmax,
    RmsNorm(f64),
    Gather {
        ids: Vec<usize>,
        ids_shape: Vec<usize>,
    },
    Permute(Vec<usize>),
    Reshape(Vec<usize>),
    Concat(usize),
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    CausalScores {
        scale: f64,
        lens: Vec<usize>,
    },
    Sum,
    Mean,
    CrossEntropySoft,
    CrossEntropyHard(Vec<usize>),
    L1Norm,
    L2Norm,
    CosineRows,
    PairwiseDist,
    DoubleCenter,
    Detach,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "elementwise-mul",
            Op::Div => "div",
            Op::Scale(_) => "scalar-scale",
            Op::AddScalar(_) => "add-scalar",
            Op::Unary(u) => match u {
                Unary::Exp => "exp",
                Unary::Log => "log",
                Unary::Sqrt => "sqrt",
                Unary::Square => "square",
                Unary::Sigmoid => "sigmoid",
                Unary::Tanh => "tanh",
                Unary::Silu => "silu",
                Unary::Gelu => "gelu",
            },
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log-softmax",
            Op::RmsNorm(_) => "rms-norm",
            Op::Gather { .. } => "embedding-gather",
            Op::Permute(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::CausalScores { .. } => "causal-masked-scores",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::CrossEntropySoft => "cross-entropy-soft",
            Op::CrossEntropyHard(_) => "cross-entropy-hard",
            Op::L1Norm => "l1-norm",
            Op::L2Norm => "l2-norm",
            Op::CosineRows => "cosine-similarity",
            Op::PairwiseDist => "pairwise-distance",
            Op::DoubleCenter => "double-center",
            Op::Detach => "detach",
        }
    }

    pub(crate) fn forward(&self, ins: &[&Tensor]) -> Result<Tensor> {
        match self {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::MatMul => matmul_fwd(ins[0], ins[1]),
            Op::Add => binary(self.name(), ins[0], ins[1], |a, b| a + b),
            Op::Sub => binary(self.name(), ins[0], ins[1], |a, b| a - b),
            Op::Mul => binary(self.name(), ins[0], ins[1], |a, b| a * b),
            Op::Div => binary(self.name(), ins[0], ins[1], |a, b| a / b),
            Op::Scale(c) => Ok(ins[0].map(|x| c * x)),
            Op::AddScalar(c) => Ok(ins[0].map(|x| x + c)),
            Op::Unary(u) => Ok(ins[0].map(|x| unary_value(*u, x))),
            Op::Softmax => last_axis_map(self.name(), ins[0], softmax_row),
            Op::LogSoftmax => last_axis_map(self.name(), ins[0], log_softmax_row),
            Op::RmsNorm(eps) => {
                let eps = *eps;
                last_axis_map(self.name(), ins[0], move |x, o| {
                    let r = rms(x, eps);
                    for (o, v) in o.iter_mut().zip(x) {
                        *o = v / r;
                    }
                })
            }
            Op::Gather { ids, ids_shape } => gather_fwd(ins[0], ids, ids_shape),
            Op::Permute(axes) => {
                let (s, d) = permute(ins[0].data(), ins[0].shape(), axes);
                Ok(Tensor::from_parts(s, d))
            }
            Op::Reshape(shape) => ins[0].clone().reshaped(shape),
            Op::Concat(axis) => concat(ins, *axis),
            Op::Slice { axis, start, len } => Ok(slice(ins[0], *axis, *start, *len)),
            Op::CausalScores { scale, lens } => causal_scores_fwd(ins[0], ins[1], *scale, lens),
            Op::Sum => Ok(Tensor::scalar(ins[0].sum())),
            Op::Mean => Ok(Tensor::scalar(ins[0].sum() / ins[0].numel() as f64)),
            Op::CrossEntropySoft => ce_soft_fwd(ins[0], ins[1]),
            Op::CrossEntropyHard(t) => ce_hard_fwd(ins[0], t),
            Op::L1Norm => Ok(Tensor::scalar(ins[0].data().iter().map(|x| x.abs()).sum())),
            Op::L2Norm => Ok(Tensor::scalar(ins[0].norm_l2())),
            Op::CosineRows => cosine_fwd(ins[0], ins[1]),
            Op::PairwiseDist => pdist_fwd(ins[0]),
            Op::DoubleCenter => double_center(ins[0]),
            Op::Detach => Ok(ins[0].clone()),
        }
    }

    /// Vector-Jacobian products for every input flagged in `need`.
    pub(crate) fn vjp(
        &self,
        ins: &[&Tensor],
        out: &Tensor,
        dy: &Tensor,
        need: &[bool],
    ) -> Vec<Option<Tensor>> {
        let want = |i: usize| need.get(i).copied().unwrap_or(false);
        match self {
            Op::Leaf | Op::Detach => vec![None; ins.len()],
            Op::MatMul => {
                let (da, db) = matmul_vjp(ins[0], ins[1], dy, want(0), want(1));
                vec![da, db]
            }
            Op::Add => vec![
                want(0).then(|| dy.clone()),
                want(1).then(|| reduce_to(dy, ins[1].shape())),
            ],
            Op::Sub => vec![
                want(0).then(|| dy.clone()),
                want(1).then(|| reduce_to(dy, ins[1].shape()).map(|x| -x)),
            ],
            Op::Mul => vec![
                want(0).then(|| bcast_zip(dy, ins[1], |g, b| g * b)),
                want(1).then(|| reduce_to(&dy.zip_map(ins[0], |g, a| g * a), ins[1].shape())),
            ],
            Op::Div => vec![
                want(0).then(|| bcast_zip(dy, ins[1], |g, b| g / b)),
                want(1).then(|| {
                    let t = bcast_zip(&dy.zip_map(ins[0], |g, a| g * a), ins[1], |ga, b| {
                        -ga / (b * b)
                    });
                    reduce_to(&t, ins[1].shape())
                }),
            ],
            Op::Scale(c) => vec![Some(dy.map(|g| c * g))],
            Op::AddScalar(_) => vec![Some(dy.clone())],
            Op::Unary(u) => {
                let x = ins[0];
                let mut g = dy.clone();
                for ((g, &xv), &yv) in g.data_mut().iter_mut().zip(x.data()).zip(out.data()) {
                    *g *= unary_deriv(*u, xv, yv);
                }
                vec![Some(g)]
            }
            Op::Softmax => vec![Some(rowwise2(out, dy, |y, g, o| {
                let s: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                for i in 0..o.len() {
                    o[i] = y[i] * (g[i] - s);
                }
            }))],
            Op::LogSoftmax => vec![Some(rowwise2(out, dy, |ls, g, o| {
                let s: f64 = g.iter().sum();
                for i in 0..o.len() {
                    o[i] = g[i] - ls[i].exp() * s;
                }
            }))],
            Op::RmsNorm(eps) => {
                let eps = *eps;
                let x = ins[0];
                vec![Some(rowwise3(x, out, dy, |x, y, g, o| {
                    let r = rms(x, eps);
                    let n = x.len() as f64;
                    let m: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / n;
                    for i in 0..o.len() {
                        o[i] = (g[i] - y[i] * m) / r;
                    }
                }))]
            }
            Op::Gather { ids, .. } => {
                let table = ins[0];
                let h = table.shape()[1];
                let mut g = Tensor::zeros(table.shape());
                for (p, &id) in ids.iter().enumerate() {
                    let src = &dy.data()[p * h..(p + 1) * h];
                    let dst = &mut g.data_mut()[id * h..(id + 1) * h];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                vec![Some(g)]
            }
            Op::Permute(axes) => {
                let (s, d) = permute(dy.data(), dy.shape(), &inverse_axes(axes));
                vec![Some(Tensor::from_parts(s, d))]
            }
            Op::Reshape(_) => vec![Some(Tensor::from_parts(
                ins[0].shape().to_vec(),
                dy.data().to_vec(),
            ))],
            Op::Concat(axis) => {
                let mut start = 0;
                ins.iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let len = t.shape()[*axis];
                        let g = want(i).then(|| slice(dy, *axis, start, len));
                        start += len;
                        g
                    })
                    .collect()
            }
            Op::Slice { axis, start, len } => {
                vec![Some(unslice(dy, ins[0].shape(), *axis, *start, *len))]
            }
            Op::CausalScores { scale, lens } => {
                let (dq, dk) = causal_scores_vjp(ins[0], ins[1], dy, *scale, lens);
                vec![want(0).then_some(dq), want(1).then_some(dk)]
            }
            Op::Sum => vec![Some(Tensor::full(ins[0].shape(), dy.item()))],
            Op::Mean => vec![Some(Tensor::full(
                ins[0].shape(),
                dy.item() / ins[0].numel() as f64,
            ))],
            Op::CrossEntropySoft => {
                let (logits, labels) = (ins[0], ins[1]);
                let v = *logits.shape().last().unwrap();
                let rows = logits.numel() / v;
                let mut dl = want(0).then(|| Tensor::zeros(logits.shape()));
                let mut dlab = want(1).then(|| Tensor::zeros(labels.shape()));
                let mut ls = vec![0.0; v];
                for r in 0..rows {
                    let x = &logits.data()[r * v..(r + 1) * v];
                    let y = &labels.data()[r * v..(r + 1) * v];
                    let g = dy.data()[r];
                    log_softmax_row(x, &mut ls);
                    if let Some(d) = dl.as_mut() {
                        let sy: f64 = y.iter().sum();
                        let o = &mut d.data_mut()[r * v..(r + 1) * v];
                        for i in 0..v {
                            o[i] = g * (ls[i].exp() * sy - y[i]);
                        }
                    }
                    if let Some(d) = dlab.as_mut() {
                        let o = &mut d.data_mut()[r * v..(r + 1) * v];
                        for i in 0..v {
                            o[i] = -g * ls[i];
                        }
                    }
                }
                vec![dl, dlab]
            }
            Op::CrossEntropyHard(targets) => {
                let logits = ins[0];
                let v = *logits.shape().last().unwrap();
                let mut d = Tensor::zeros(logits.shape());
                let mut p = vec![0.0; v];
                for (r, &t) in targets.iter().enumerate() {
                    softmax_row(&logits.data()[r * v..(r + 1) * v], &mut p);
                    let g = dy.data()[r];
                    let o = &mut d.data_mut()[r * v..(r + 1) * v];
                    for i in 0..v {
                        o[i] = g * p[i];
                    }
                    o[t] -= g;
                }
                vec![Some(d)]
            }
            Op::L1Norm => {
                let g = dy.item();
                vec![Some(ins[0].map(|x| g * sign(x)))]
            }
            Op::L2Norm => {
                let n = out.item();
                let g = dy.item();
                vec![Some(if n > 0.0 {
                    ins[0].map(|x| g * x / n)
                } else {
                    Tensor::zeros(ins[0].shape())
                })]
            }
            Op::CosineRows => {
                let (da, db) = cosine_vjp(ins[0], ins[1], out, dy);
                vec![want(0).then_some(da), want(1).then_some(db)]
            }
            Op::PairwiseDist => vec![Some(pdist_vjp(ins[0], out, dy))],
            Op::DoubleCenter => vec![double_center(dy).ok()],
        }
    }

    /// Tangent of the output given input tangents (`None` = zero tangent).
    pub(crate) fn jvp(
        &self,
        ins: &[&Tensor],
        out: &Tensor,
        t: &[Option<&Tensor>],
    ) -> Result<Tensor> {
        let zero_like = |i: usize| Tensor::zeros(ins[i].shape());
        let tan = |i: usize| -> Tensor { t[i].cloned().unwrap_or_else(|| zero_like(i)) };
        Ok(match self {
            Op::Leaf => unreachable!("leaf tangents are seeded directly"),
            Op::Detach => return Err(Error::UnsupportedOp("detach")),
            Op::MatMul => {
                let mut acc = Tensor::zeros(out.shape());
                if let Some(da) = t[0] {
                    acc.add_assign(&matmul_fwd(da, ins[1])?);
                }
                if let Some(db) = t[1] {
                    acc.add_assign(&matmul_fwd(ins[0], db)?);
                }
                acc
            }
            Op::Add => {
                let mut acc = tan(0);
                if let Some(db) = t[1] {
                    acc = bcast_zip(&acc, db, |a, b| a + b);
                }
                acc
            }
            Op::Sub => {
                let mut acc = tan(0);
                if let Some(db) = t[1] {
                    acc = bcast_zip(&acc, db, |a, b| a - b);
                }
                acc
            }
            Op::Mul => {
                let mut acc = Tensor::zeros(out.shape());
                if let Some(da) = t[0] {
                    acc.add_assign(&bcast_zip(da, ins[1], |a, b| a * b));
                }
                if let Some(db) = t[1] {
                    acc.add_assign(&bcast_zip(ins[0], db, |a, b| a * b));
                }
                acc
            }
            Op::Div => {
                let mut acc = Tensor::zeros(out.shape());
                if let Some(da) = t[0] {
                    acc.add_assign(&bcast_zip(da, ins[1], |a, b| a / b));
                }
                if let Some(db) = t[1] {
                    let q = bcast_zip(out, ins[1], |y, b| y / b);
                    acc.axpy(-1.0, &bcast_zip(&q, db, |a, b| a * b));
                }
                acc
            }
            Op::Scale(c) => tan(0).map(|x| c * x),
            Op::AddScalar(_) => tan(0),
            Op::Unary(u) => {
                let mut d = tan(0);
                for ((g, &xv), &yv) in d.data_mut().iter_mut().zip(ins[0].data()).zip(out.data()) {
                    *g *= unary_deriv(*u, xv, yv);
                }
                d
            }
            Op::Softmax => rowwise2(out, &tan(0), |y, dx, o| {
                let s: f64 = y.iter().zip(dx).map(|(a, b)| a * b).sum();
                for i in 0..o.len() {
                    o[i] = y[i] * (dx[i] - s);
                }
            }),
            Op::LogSoftmax => rowwise2(out, &tan(0), |ls, dx, o| {
                let s: f64 = ls.iter().zip(dx).map(|(a, b)| a.exp() * b).sum();
                for i in 0..o.len() {
                    o[i] = dx[i] - s;
                }
            }),
            Op::RmsNorm(eps) => {
                let eps = *eps;
                rowwise3(ins[0], out, &tan(0), |x, y, dx, o| {
                    let r = rms(x, eps);
                    let n = x.len() as f64;
                    let m: f64 = y.iter().zip(dx).map(|(a, b)| a * b).sum::<f64>() / n;
                    for i in 0..o.len() {
                        o[i] = (dx[i] - y[i] * m) / r;
                    }
                })
            }
            Op::Gather { ids, ids_shape } => gather_fwd(&tan(0), ids, ids_shape)?,
            Op::Permute(axes) => {
                let d = tan(0);
                let (s, v) = permute(d.data(), d.shape(), axes);
                Tensor::from_parts(s, v)
            }
            Op::Reshape(shape) => tan(0).reshaped(shape)?,
            Op::Concat(axis) => {
                let owned: Vec<Tensor> = (0..ins.len()).map(tan).collect();
                let refs: Vec<&Tensor> = owned.iter().collect();
                concat(&refs, *axis)?
            }
            Op::Slice { axis, start, len } => slice(&tan(0), *axis, *start, *len),
            Op::CausalScores { scale, lens } => {
                let mut acc = Tensor::zeros(out.shape());
                if let Some(dq) = t[0] {
                    acc.add_assign(&causal_raw(dq, ins[1], *scale, lens, 0.0));
                }
                if let Some(dk) = t[1] {
                    acc.add_assign(&causal_raw(ins[0], dk, *scale, lens, 0.0));
                }
                acc
            }
            Op::Sum => Tensor::scalar(tan(0).sum()),
            Op::Mean => Tensor::scalar(tan(0).sum() / ins[0].numel() as f64),
            Op::CrossEntropySoft => {
                let (logits, labels) = (ins[0], ins[1]);
                let v = *logits.shape().last().unwrap();
                let rows = logits.numel() / v;
                let mut o = vec![0.0; rows];
                let mut ls = vec![0.0; v];
                for (r, o) in o.iter_mut().enumerate() {
                    let x = &logits.data()[r * v..(r + 1) * v];
                    let y = &labels.data()[r * v..(r + 1) * v];
                    log_softmax_row(x, &mut ls);
                    if let Some(dx) = t[0] {
                        let dx = &dx.data()[r * v..(r + 1) * v];
                        let s: f64 = ls.iter().zip(dx).map(|(l, d)| l.exp() * d).sum();
                        let sy: f64 = y.iter().sum();
                        *o -= y.iter().zip(dx).map(|(a, b)| a * b).sum::<f64>() - sy * s;
                    }
                    if let Some(dl) = t[1] {
                        let dl = &dl.data()[r * v..(r + 1) * v];
                        *o -= dl.iter().zip(&ls).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                Tensor::from_parts(out.shape().to_vec(), o)
            }
            Op::CrossEntropyHard(targets) => {
                let logits = ins[0];
                let dx = tan(0);
                let v = *logits.shape().last().unwrap();
                let mut p = vec![0.0; v];
                let o = targets
                    .iter()
                    .enumerate()
                    .map(|(r, &tg)| {
                        softmax_row(&logits.data()[r * v..(r + 1) * v], &mut p);
                        let d = &dx.data()[r * v..(r + 1) * v];
                        let s: f64 = p.iter().zip(d).map(|(a, b)| a * b).sum();
                        s - d[tg]
                    })
                    .collect();
                Tensor::from_parts(out.shape().to_vec(), o)
            }
            Op::L1Norm => Tensor::scalar(
                ins[0]
                    .data()
                    .iter()
                    .zip(tan(0).data())
                    .map(|(x, d)| sign(*x) * d)
                    .sum(),
            ),
            Op::L2Norm => {
                let n = out.item();
                Tensor::scalar(if n > 0.0 {
                    ins[0].dot(&tan(0)) / n
                } else {
                    0.0
                })
            }
            Op::CosineRows => {
                // Reuse the reverse rule: each output row's tangent is the inner
                // product of its per-row gradient with the input tangents.
                let ones = Tensor::full(out.shape(), 1.0);
                let (ga, gb) = cosine_vjp(ins[0], ins[1], out, &ones);
                let d = *ins[0].shape().last().unwrap();
                let rows = out.numel();
                let mut o = vec![0.0; rows];
                for (r, o) in o.iter_mut().enumerate() {
                    let span = r * d..(r + 1) * d;
                    if let Some(da) = t[0] {
                        *o += ga.data()[span.clone()]
                            .iter()
                            .zip(&da.data()[span.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                    if let Some(db) = t[1] {
                        *o += gb.data()[span.clone()]
                            .iter()
                            .zip(&db.data()[span])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
                Tensor::from_parts(out.shape().to_vec(), o)
            }
            Op::PairwiseDist => {
                let x = ins[0];
                let dx = tan(0);
                let (b, d) = (x.shape()[0], x.shape()[1]);
                let mut o = Tensor::zeros(out.shape());
                for i in 0..b {
                    for j in 0..b {
                        let dist = out.data()[i * b + j];
                        if dist > 0.0 {
                            let mut s = 0.0;
                            for c in 0..d {
                                s += (x.data()[i * d + c] - x.data()[j * d + c])
                                    * (dx.data()[i * d + c] - dx.data()[j * d + c]);
                            }
                            o.data_mut()[i * b + j] = s / dist;
                        }
                    }
                }
                o
            }
            Op::DoubleCenter => double_center(&tan(0))?,
        })
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn rms(x: &[f64], eps: f64) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64 + eps).sqrt()
}

fn unary_value(u: Unary, x: f64) -> f64 {
    match u {
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Sqrt => x.sqrt(),
        Unary::Square => x * x,
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Silu => x * sigmoid(x),
        Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
    }
}

fn unary_deriv(u: Unary, x: f64, y: f64) -> f64 {
    match u {
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Sqrt => {
            if y > 0.0 {
                0.5 / y
            } else {
                0.0
            }
        }
        Unary::Square => 2.0 * x,
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Tanh => 1.0 - y * y,
        Unary::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        Unary::Gelu => {
            let inner = GELU_C * (x + 0.044715 * x * x * x);
            let th = inner.tanh();
            let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
            0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if !is_suffix(a.shape(), b.shape()) {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(bcast_zip(a, b, f))
}

/// `out[i] = f(a[i], b[i mod |b|])` where `b`'s shape is a suffix of `a`'s.
fn bcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let inner = b.numel();
    let bd = b.data();
    let data = a
        .data()
        .chunks(inner.max(1))
        .flat_map(|chunk| {
            chunk
                .iter()
                .zip(bd)
                .map(|(&x, &y)| f(x, y))
                .collect::<Vec<_>>()
        })
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Sum `g` over its leading (broadcast) axes down to `shape`.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let inner: usize = shape.iter().product();
    let mut out = vec![0.0; inner];
    for chunk in g.data().chunks(inner) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

fn last_axis_map(op: &'static str, x: &Tensor, f: impl Fn(&[f64], &mut [f64])) -> Result<Tensor> {
    let Some(&d) = x.shape().last() else {
        return Err(Error::Shape {
            op,
            lhs: x.shape().to_vec(),
            rhs: vec![],
        });
    };
    let mut out = vec![0.0; x.numel()];
    if d > 0 {
        for (xi, oi) in x.data().chunks(d).zip(out.chunks_mut(d)) {
            f(xi, oi);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

fn rowwise2(a: &Tensor, b: &Tensor, f: impl Fn(&[f64], &[f64], &mut [f64])) -> Tensor {
    let d = *a.shape().last().unwrap();
    let mut out = vec![0.0; a.numel()];
    for ((ai, bi), oi) in a
        .data()
        .chunks(d)
        .zip(b.data().chunks(d))
        .zip(out.chunks_mut(d))
    {
        f(ai, bi, oi);
    }
    Tensor::from_parts(a.shape().to_vec(), out)
}

fn rowwise3(
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    f: impl Fn(&[f64], &[f64], &[f64], &mut [f64]),
) -> Tensor {
    let d = *a.shape().last().unwrap();
    let mut out = vec![0.0; a.numel()];
    for (((ai, bi), ci), oi) in a
        .data()
        .chunks(d)
        .zip(b.data().chunks(d))
        .zip(c.data().chunks(d))
        .zip(out.chunks_mut(d))
    {
        f(ai, bi, ci, oi);
    }
    Tensor::from_parts(a.shape().to_vec(), out)
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize, bool)> {
    let err = || Error::Shape {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    let (sa, sb) = (a.shape(), b.shape());
    if sa.is_empty() || sb.len() < 2 {
        return Err(err());
    }
    if sb.len() == 2 {
        let (k, n) = (sb[0], sb[1]);
        if *sa.last().unwrap() != k {
            return Err(err());
        }
        return Ok((1, a.numel() / k.max(1), k, n, true));
    }
    if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
        return Err(err());
    }
    let nd = sa.len();
    let (m, k, n) = (sa[nd - 2], sa[nd - 1], sb[nd - 1]);
    if sb[nd - 2] != k {
        return Err(err());
    }
    let batch = sa[..nd - 2].iter().product();
    Ok((batch, m, k, n, false))
}

fn matmul_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, m, k, n, shared) = matmul_dims(a, b)?;
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    let mut out = vec![0.0; batch * m * n];
    if shared {
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
    } else {
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                false,
                &b.data()[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

fn matmul_vjp(
    a: &Tensor,
    b: &Tensor,
    dy: &Tensor,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (batch, m, k, n, _) = matmul_dims(a, b).expect("validated in forward");
    let da = need_a.then(|| {
        let mut g = vec![0.0; a.numel()];
        if b.ndim() == 2 {
            gemm(m, n, k, dy.data(), false, b.data(), true, &mut g, 0.0);
        } else {
            for i in 0..batch {
                gemm(
                    m,
                    n,
                    k,
                    &dy.data()[i * m * n..(i + 1) * m * n],
                    false,
                    &b.data()[i * k * n..(i + 1) * k * n],
                    true,
                    &mut g[i * m * k..(i + 1) * m * k],
                    0.0,
                );
            }
        }
        Tensor::from_parts(a.shape().to_vec(), g)
    });
    let db = need_b.then(|| {
        let mut g = vec![0.0; b.numel()];
        if b.ndim() == 2 {
            gemm(k, m, n, a.data(), true, dy.data(), false, &mut g, 0.0);
        } else {
            for i in 0..batch {
                gemm(
                    k,
                    m,
                    n,
                    &a.data()[i * m * k..(i + 1) * m * k],
                    true,
                    &dy.data()[i * m * n..(i + 1) * m * n],
                    false,
                    &mut g[i * k * n..(i + 1) * k * n],
                    0.0,
                );
            }
        }
        Tensor::from_parts(b.shape().to_vec(), g)
    });
    (da, db)
}

fn gather_fwd(table: &Tensor, ids: &[usize], ids_shape: &[usize]) -> Result<Tensor> {
    if table.ndim() != 2 {
        return Err(Error::Shape {
            op: "embedding-gather",
            lhs: table.shape().to_vec(),
            rhs: ids_shape.to_vec(),
        });
    }
    let (v, h) = (table.shape()[0], table.shape()[1]);
    let mut out = Vec::with_capacity(ids.len() * h);
    for &id in ids {
        if id >= v {
            return Err(Error::Index {
                op: "embedding-gather",
                index: id,
                limit: v,
            });
        }
        out.extend_from_slice(&table.data()[id * h..(id + 1) * h]);
    }
    let mut shape = ids_shape.to_vec();
    shape.push(h);
    Ok(Tensor::from_parts(shape, out))
}

fn concat(ins: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = ins[0];
    if axis >= first.ndim() {
        return Err(Error::Shape {
            op: "concat",
            lhs: first.shape().to_vec(),
            rhs: vec![axis],
        });
    }
    for t in ins {
        let ok = t.ndim() == first.ndim()
            && t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::Shape {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    let (outer, _, inner) = axis_extents(first.shape(), axis);
    let total: usize = ins.iter().map(|t| t.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in ins {
            let span = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * span..(o + 1) * span]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, full, inner) = axis_extents(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * full * inner + start * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::from_parts(shape, out)
}

fn unslice(g: &Tensor, shape: &[usize], axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, full, inner) = axis_extents(shape, axis);
    let mut out = Tensor::zeros(shape);
    for o in 0..outer {
        let base = o * full * inner + start * inner;
        out.data_mut()[base..base + len * inner]
            .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
    }
    out
}

fn causal_check(q: &Tensor, k: &Tensor, lens: &[usize]) -> Result<()> {
    if q.ndim() != 4 || q.shape() != k.shape() || lens.len() != q.shape()[0] {
        return Err(Error::Shape {
            op: "causal-masked-scores",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    Ok(())
}

/// `scale · q kᵀ` with entries at `j > i` or `j ≥ lens[b]` set to `fill`.
fn causal_raw(q: &Tensor, k: &Tensor, scale: f64, lens: &[usize], fill: f64) -> Tensor {
    let s = q.shape();
    let (b, h, t, d) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![0.0; b * h * t * t];
    for bi in 0..b {
        for hi in 0..h {
            let idx = bi * h + hi;
            let qs = &q.data()[idx * t * d..(idx + 1) * t * d];
            let ks = &k.data()[idx * t * d..(idx + 1) * t * d];
            let os = &mut out[idx * t * t..(idx + 1) * t * t];
            gemm(t, d, t, qs, false, ks, true, os, 0.0);
            for i in 0..t {
                for j in 0..t {
                    let o = &mut os[i * t + j];
                    if j > i || j >= lens[bi] {
                        *o = fill;
                    } else {
                        *o *= scale;
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![b, h, t, t], out)
}

fn causal_scores_fwd(q: &Tensor, k: &Tensor, scale: f64, lens: &[usize]) -> Result<Tensor> {
    causal_check(q, k, lens)?;
    Ok(causal_raw(q, k, scale, lens, MASKED_SCORE))
}

fn causal_scores_vjp(
    q: &Tensor,
    k: &Tensor,
    dy: &Tensor,
    scale: f64,
    lens: &[usize],
) -> (Tensor, Tensor) {
    let s = q.shape();
    let (b, h, t, d) = (s[0], s[1], s[2], s[3]);
    let mut dq = vec![0.0; q.numel()];
    let mut dk = vec![0.0; k.numel()];
    let mut gm = vec![0.0; t * t];
    for bi in 0..b {
        for hi in 0..h {
            let idx = bi * h + hi;
            let g = &dy.data()[idx * t * t..(idx + 1) * t * t];
            for i in 0..t {
                for j in 0..t {
                    gm[i * t + j] = if j > i || j >= lens[bi] {
                        0.0
                    } else {
                        scale * g[i * t + j]
                    };
                }
            }
            let qs = &q.data()[idx * t * d..(idx + 1) * t * d];
            let ks = &k.data()[idx * t * d..(idx + 1) * t * d];
            gemm(
                t,
                t,
                d,
                &gm,
                false,
                ks,
                false,
                &mut dq[idx * t * d..(idx + 1) * t * d],
                0.0,
            );
            gemm(
                t,
                t,
                d,
                &gm,
                true,
                qs,
                false,
                &mut dk[idx * t * d..(idx + 1) * t * d],
                0.0,
            );
        }
    }
    (
        Tensor::from_parts(s.to_vec(), dq),
        Tensor::from_parts(s.to_vec(), dk),
    )
}

fn ce_soft_fwd(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    if logits.shape() != labels.shape() || logits.ndim() == 0 {
        return Err(Error::Shape {
            op: "cross-entropy-soft",
            lhs: logits.shape().to_vec(),
            rhs: labels.shape().to_vec(),
        });
    }
    let v = *logits.shape().last().unwrap();
    let mut ls = vec![0.0; v];
    let out = logits
        .data()
        .chunks(v)
        .zip(labels.data().chunks(v))
        .map(|(x, y)| {
            log_softmax_row(x, &mut ls);
            -y.iter().zip(&ls).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    Ok(Tensor::from_parts(
        logits.shape()[..logits.ndim() - 1].to_vec(),
        out,
    ))
}

fn ce_hard_fwd(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let Some(&v) = logits.shape().last() else {
        return Err(Error::Shape {
            op: "cross-entropy-hard",
            lhs: vec![],
            rhs: vec![targets.len()],
        });
    };
    if logits.numel() / v.max(1) != targets.len() {
        return Err(Error::Shape {
            op: "cross-entropy-hard",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let mut ls = vec![0.0; v];
    let mut out = Vec::with_capacity(targets.len());
    for (x, &t) in logits.data().chunks(v).zip(targets) {
        if t >= v {
            return Err(Error::Index {
                op: "cross-entropy-hard",
                index: t,
                limit: v,
            });
        }
        log_softmax_row(x, &mut ls);
        out.push(-ls[t]);
    }
    Ok(Tensor::from_parts(
        logits.shape()[..logits.ndim() - 1].to_vec(),
        out,
    ))
}

fn cosine_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() || a.ndim() == 0 {
        return Err(Error::Shape {
            op: "cosine-similarity",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let d = *a.shape().last().unwrap();
    let out = a
        .data()
        .chunks(d)
        .zip(b.data().chunks(d))
        .map(|(x, y)| {
            let (nx, ny) = (norm(x), norm(y));
            if nx == 0.0 || ny == 0.0 {
                0.0
            } else {
                dot(x, y) / (nx * ny)
            }
        })
        .collect();
    Ok(Tensor::from_parts(a.shape()[..a.ndim() - 1].to_vec(), out))
}

fn cosine_vjp(a: &Tensor, b: &Tensor, out: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let d = *a.shape().last().unwrap();
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    for r in 0..out.numel() {
        let x = &a.data()[r * d..(r + 1) * d];
        let y = &b.data()[r * d..(r + 1) * d];
        let (nx, ny) = (norm(x), norm(y));
        if nx == 0.0 || ny == 0.0 {
            continue;
        }
        let c = out.data()[r];
        let g = dy.data()[r];
        let ga = &mut da.data_mut()[r * d..(r + 1) * d];
        for i in 0..d {
            ga[i] = g * (y[i] / (nx * ny) - c * x[i] / (nx * nx));
        }
        let gb = &mut db.data_mut()[r * d..(r + 1) * d];
        for i in 0..d {
            gb[i] = g * (x[i] / (nx * ny) - c * y[i] / (ny * ny));
        }
    }
    (da, db)
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

fn pdist_fwd(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 {
        return Err(Error::Shape {
            op: "pairwise-distance",
            lhs: x.shape().to_vec(),
            rhs: vec![],
        });
    }
    let (b, d) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; b * b];
    for i in 0..b {
        for j in (i + 1)..b {
            let s: f64 = (0..d)
                .map(|c| {
                    let diff = x.data()[i * d + c] - x.data()[j * d + c];
                    diff * diff
                })
                .sum();
            let v = s.sqrt();
            out[i * b + j] = v;
            out[j * b + i] = v;
        }
    }
    Ok(Tensor::from_parts(vec![b, b], out))
}

fn pdist_vjp(x: &Tensor, out: &Tensor, dy: &Tensor) -> Tensor {
    let (b, d) = (x.shape()[0], x.shape()[1]);
    let mut g = Tensor::zeros(x.shape());
    for i in 0..b {
        for j in 0..b {
            let dist = out.data()[i * b + j];
            if i == j || dist == 0.0 {
                continue;
            }
            let w = dy.data()[i * b + j] / dist;
            for c in 0..d {
                let diff = x.data()[i * d + c] - x.data()[j * d + c];
                g.data_mut()[i * d + c] += w * diff;
                g.data_mut()[j * d + c] -= w * diff;
            }
        }
    }
    g
}

fn double_center(a: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(Error::Shape {
            op: "double-center",
            lhs: a.shape().to_vec(),
            rhs: vec![],
        });
    }
    let n = a.shape()[0];
    let nf = n as f64;
    let d = a.data();
    let row: Vec<f64> = (0..n)
        .map(|i| d[i * n..(i + 1) * n].iter().sum::<f64>() / nf)
        .collect();
    let col: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|i| d[i * n + j]).sum::<f64>() / nf)
        .collect();
    let grand = row.iter().sum::<f64>() / nf;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = d[i * n + j] - row[i] - col[j] + grand;
        }
    }
    Ok(Tensor::from_parts(vec![n, n], out))
}

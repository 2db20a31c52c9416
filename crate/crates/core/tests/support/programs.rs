//! Randomized autodiff programs shared by the gradient checks.

use rand::Rng;
use splitlab_core::autodiff::{finite_difference_gradient, max_relative_error, Graph, Tensor, Var};

use splitlab_core::rng::{self, LabRng};
use splitlab_core::Result;

/// Shape-preserving steps on a `[2, 3, 4]` state; together they exercise
/// every primitive except `detach`, which has its own test.
pub const STEPS: [&str; 20] = [
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "exp",
    "log",
    "sqrt",
    "sigmoid",
    "tanh",
    "silu",
    "gelu",
    "softmax",
    "log_softmax",
    "rms_norm",
    "gather",
    "transpose",
    "concat",
    "attention",
];
/// Scalar heads appended to the loss.
pub const HEADS: [&str; 9] = [
    "sum", "mean", "l1", "l2", "ce_soft", "ce_hard", "cosine", "dcenter", "permute",
];

pub struct Program {
    pub steps: Vec<&'static str>,
    pub heads: Vec<&'static str>,
    pub ids: Vec<usize>,
    pub targets: Vec<usize>,
}

pub fn program(k: usize) -> Program {
    let mut r = rng::stream(k as u64, "program");
    let mut steps = vec![STEPS[k % STEPS.len()]];
    for _ in 0..r.random_range(2..5) {
        steps.push(STEPS[r.random_range(0..STEPS.len())]);
    }
    let heads = vec![
        HEADS[k % HEADS.len()],
        HEADS[r.random_range(0..HEADS.len())],
    ];
    Program {
        steps,
        heads,
        ids: (0..6).map(|_| r.random_range(0..5)).collect(),
        targets: (0..6).map(|_| r.random_range(0..4)).collect(),
    }
}

pub fn inputs(k: usize) -> Vec<Tensor> {
    let mut r: LabRng = rng::stream(k as u64, "inputs");
    vec![
        Tensor::randn(&[2, 3, 4], 1.0, &mut r),
        Tensor::randn(&[4, 4], 0.5, &mut r),
        Tensor::randn(&[4], 1.0, &mut r),
        Tensor::randn(&[5, 4], 1.0, &mut r),
    ]
}

pub fn build(p: &Program, xs: &[Tensor]) -> Result<(Graph, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let leaves: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
    let (x, w, c, table) = (leaves[0], leaves[1], leaves[2], leaves[3]);
    let mut h = x;
    for &s in &p.steps {
        h = match s {
            "matmul" => g.matmul(h, w)?,
            "add" => g.add(h, c)?,
            "sub" => g.sub(h, c)?,
            "mul" => g.mul(h, c)?,
            "div" => {
                let c2 = g.mul(c, c)?;
                let d = g.add_scalar(c2, 1.0)?;
                g.div(h, d)?
            }
            "scale" => {
                let t = g.scale(h, 0.7)?;
                g.add_scalar(t, 0.3)?
            }
            "exp" => {
                let t = g.tanh(h)?;
                g.exp(t)?
            }
            "log" | "sqrt" => {
                let sq = g.mul(h, h)?;
                let t = g.add_scalar(sq, 1.0)?;
                if s == "log" {
                    g.log(t)?
                } else {
                    g.sqrt(t)?
                }
            }
            "sigmoid" => g.sigmoid(h)?,
            "tanh" => g.tanh(h)?,
            "silu" => g.silu(h)?,
            "gelu" => g.gelu(h)?,
            "softmax" => g.softmax(h)?,
            "log_softmax" => g.log_softmax(h)?,
            "rms_norm" => g.rms_norm(h, 1e-6)?,
            "gather" => {
                let e = g.gather(table, &p.ids, &[2, 3])?;
                g.add(h, e)?
            }
            "transpose" => {
                let t = g.transpose(h)?;
                g.reshape(t, &[2, 3, 4])?
            }
            "concat" => {
                let a = g.slice(h, 2, 0, 1)?;
                let b = g.slice(h, 2, 1, 3)?;
                g.concat(&[b, a], 2)?
            }
            "attention" => {
                let q = g.reshape(h, &[2, 1, 3, 4])?;
                let sc = g.causal_scores(q, q, 0.5, &[3, 2])?;
                let a = g.softmax(sc)?;
                let o = g.matmul(a, q)?;
                g.reshape(o, &[2, 3, 4])?
            }
            other => unreachable!("{other}"),
        };
    }
    let mut terms = Vec::new();
    for &hd in &p.heads {
        let t = match hd {
            "sum" => g.sum(h)?,
            "mean" => g.mean(h)?,
            "l1" => g.l1_norm(h)?,
            "l2" => g.l2_norm(h)?,
            "ce_soft" => {
                let lab = g.softmax(x)?;
                let ce = g.cross_entropy_soft(h, lab)?;
                g.sum(ce)?
            }
            "ce_hard" => {
                let ce = g.cross_entropy_hard(h, &p.targets)?;
                g.mean(ce)?
            }
            "cosine" => {
                let cs = g.cosine_similarity(h, x)?;
                g.sum(cs)?
            }
            "dcenter" => {
                let f = g.reshape(h, &[6, 4])?;
                let d = g.pairwise_distance(f)?;
                let dc = g.double_center(d)?;
                let sq = g.mul(dc, dc)?;
                g.mean(sq)?
            }
            "permute" => {
                let t = g.permute(h, &[2, 0, 1])?;
                let wv = g.constant(Tensor::new(
                    vec![4, 2, 3],
                    (0..24).map(|i| (i as f64 * 0.37).sin()).collect(),
                )?);
                let t = g.mul(t, wv)?;
                g.sum(t)?
            }
            other => unreachable!("{other}"),
        };
        terms.push(t);
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = g.add(loss, t)?;
    }
    Ok((g, leaves, loss))
}

/// Worst errors of one program: reverse gradients against central
/// differences (relative) and `<grad, v>` against a forward-mode JVP.
pub struct ProgramCheck {
    pub fd_rel_err: f64,
    pub jvp_rel_err: f64,
    pub primitives: Vec<&'static str>,
}

pub fn check(k: usize) -> Result<ProgramCheck> {
    let p = program(k);
    let xs = inputs(k);
    let (g, leaves, loss) = build(&p, &xs)?;
    let grads = g.backward(loss, &leaves)?;
    let mut fd_rel_err = 0.0f64;
    for (i, leaf) in leaves.iter().enumerate() {
        let f = |t: &Tensor| -> Result<f64> {
            let mut ys = xs.clone();
            ys[i] = t.clone();
            let (g, _, l) = build(&p, &ys)?;
            Ok(g.value(l).item())
        };
        let fd = finite_difference_gradient(f, &xs[i], 1e-5)?;
        // the floor sits above central-difference roundoff (|f|·eps/h ~ 1e-10)
        fd_rel_err = fd_rel_err.max(max_relative_error(grads.wrt(*leaf), &fd, 1e-5));
    }
    let mut r = rng::stream(k as u64, "direction");
    let vs: Vec<Tensor> = xs
        .iter()
        .map(|x| Tensor::randn(x.shape(), 1.0, &mut r))
        .collect();
    let seeds: Vec<(Var, Tensor)> = leaves.iter().copied().zip(vs.iter().cloned()).collect();
    let jv = g.jvp(&seeds, &[loss])?[0].item();
    let dot: f64 = leaves
        .iter()
        .zip(&vs)
        .map(|(l, v)| grads.wrt(*l).dot(v))
        .sum();
    let mut primitives = p.steps.clone();
    primitives.extend(&p.heads);
    Ok(ProgramCheck {
        fd_rel_err,
        jvp_rel_err: (jv - dot).abs() / dot.abs().max(1.0),
        primitives,
    })
}

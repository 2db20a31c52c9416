//! Recording tape with reverse accumulation and forward-mode tangent propagation.

use std::collections::HashMap;

use super::ops::{Op, Unary};
use super::tensor::Tensor;
use crate::error::{contract, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only record of primitive applications. A graph is built for a single
/// step and dropped afterwards; it is not `Sync` by construction of its use.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients keyed by the variables they were requested for.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v)
    }

    /// Gradient for `v`; panics when `v` was not part of the request.
    pub fn wrt(&self, v: Var) -> &Tensor {
        &self.map[&v]
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.map.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (parameter, dummy variable, received activation).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let value = {
            let ins: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            op.forward(&ins)?
        };
        let needs_grad =
            !matches!(op, Op::Detach) && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul, &[a, b])
    }

    /// Elementwise sum; `b` may broadcast over `a`'s leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Div, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::AddScalar(c), &[a])
    }

    pub fn unary(&mut self, a: Var, u: Unary) -> Result<Var> {
        self.push(Op::Unary(u), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sqrt)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Silu)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Gelu)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LogSoftmax, &[a])
    }

    /// `x / sqrt(mean(x²) + eps)` over the last axis (no gain).
    pub fn rms_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.push(Op::RmsNorm(eps), &[a])
    }

    /// Rows of a `V×H` table selected by `ids`; output shape is `ids_shape + [H]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        if ids.len() != ids_shape.iter().product::<usize>() {
            return Err(Error::Shape {
                op: "embedding-gather",
                lhs: vec![ids.len()],
                rhs: ids_shape.to_vec(),
            });
        }
        self.push(
            Op::Gather {
                ids: ids.to_vec(),
                ids_shape: ids_shape.to_vec(),
            },
            &[table],
        )
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let nd = self.shape(a).len();
        let mut seen = vec![false; nd];
        if axes.len() != nd
            || axes
                .iter()
                .any(|&x| x >= nd || std::mem::replace(&mut seen[x], true))
        {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape(a).to_vec(),
                rhs: axes.to_vec(),
            });
        }
        self.push(Op::Permute(axes.to_vec()), &[a])
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape(a).to_vec(),
                rhs: vec![],
            });
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape(shape.to_vec()), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return contract("concat of zero tensors");
        }
        self.push(Op::Concat(axis), parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: s.to_vec(),
                rhs: vec![axis, start, len],
            });
        }
        self.push(Op::Slice { axis, start, len }, &[a])
    }

    /// Attention scores `scale · q kᵀ` for `[B, heads, S, d]` inputs with future
    /// positions and keys at or beyond `lens[b]` masked out.
    pub fn causal_scores(&mut self, q: Var, k: Var, scale: f64, lens: &[usize]) -> Result<Var> {
        self.push(
            Op::CausalScores {
                scale,
                lens: lens.to_vec(),
            },
            &[q, k],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean, &[a])
    }

    /// Per-row `−Σ labels · log_softmax(logits)` over the last axis.
    pub fn cross_entropy_soft(&mut self, logits: Var, labels: Var) -> Result<Var> {
        self.push(Op::CrossEntropySoft, &[logits, labels])
    }

    /// Per-row `−log_softmax(logits)[target]`.
    pub fn cross_entropy_hard(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.push(Op::CrossEntropyHard(targets.to_vec()), &[logits])
    }

    pub fn l1_norm(&mut self, a: Var) -> Result<Var> {
        self.push(Op::L1Norm, &[a])
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        self.push(Op::L2Norm, &[a])
    }

    /// Cosine similarity between matching rows (last axis) of `a` and `b`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::CosineRows, &[a, b])
    }

    pub fn pairwise_distance(&mut self, x: Var) -> Result<Var> {
        self.push(Op::PairwiseDist, &[x])
    }

    pub fn double_center(&mut self, d: Var) -> Result<Var> {
        self.push(Op::DoubleCenter, &[d])
    }

    /// Identity in value, blocks reverse accumulation.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Detach, &[a])
    }

    /// Gradients of a scalar `loss` with respect to `wrt`.
    pub fn backward(&self, loss: Var, wrt: &[Var]) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let seed = Tensor::from_parts(self.shape(loss).to_vec(), vec![1.0]);
        self.backward_from(&[(loss, seed)], wrt)
    }

    /// Reverse accumulation from arbitrary output cotangents. Variables that
    /// the seeds do not reach receive zero gradients.
    pub fn backward_from(&self, seeds: &[(Var, Tensor)], wrt: &[Var]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        let mut top = 0;
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return Err(Error::Shape {
                    op: "backward seed",
                    lhs: self.shape(*v).to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            accumulate(&mut grads[v.0], g.clone());
            top = top.max(v.0 + 1);
        }
        let floor = wrt.iter().map(|v| v.0).min().unwrap_or(0);
        let mut keep = vec![false; self.nodes.len()];
        for v in wrt {
            keep[v.0] = true;
        }
        for idx in (floor..top).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || node.inputs.is_empty() {
                continue;
            }
            let dy = if keep[idx] {
                grads[idx].clone()
            } else {
                grads[idx].take()
            };
            let Some(dy) = dy else {
                continue;
            };
            let need: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].needs_grad)
                .collect();
            let ins: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let contribs = node.op.vjp(&ins, &node.value, &dy, &need);
            for (inp, g) in node.inputs.iter().zip(contribs) {
                if let Some(g) = g {
                    if self.nodes[inp.0].needs_grad {
                        accumulate(&mut grads[inp.0], g);
                    }
                }
            }
        }
        let map = wrt
            .iter()
            .map(|&v| {
                let g = grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (v, g)
            })
            .collect();
        Ok(Gradients { map })
    }

    /// Directional derivatives of `outputs` along the seeded input tangents,
    /// evaluated at the recorded point.
    pub fn jvp(&self, seeds: &[(Var, Tensor)], outputs: &[Var]) -> Result<Vec<Tensor>> {
        let mut tan: Vec<Option<Tensor>> = Vec::new();
        tan.resize_with(self.nodes.len(), || None);
        let mut start = usize::MAX;
        for (v, t) in seeds {
            if t.shape() != self.shape(*v) {
                return Err(Error::Shape {
                    op: "jvp seed",
                    lhs: self.shape(*v).to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            accumulate(&mut tan[v.0], t.clone());
            start = start.min(v.0);
        }
        let end = outputs.iter().map(|v| v.0 + 1).max().unwrap_or(0);
        for idx in start.min(end)..end {
            let node = &self.nodes[idx];
            if node.inputs.is_empty() || node.inputs.iter().all(|v| tan[v.0].is_none()) {
                continue;
            }
            let ins: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let t: Vec<Option<&Tensor>> = node.inputs.iter().map(|v| tan[v.0].as_ref()).collect();
            let out = node.op.jvp(&ins, &node.value, &t)?;
            accumulate(&mut tan[idx], out);
        }
        Ok(outputs
            .iter()
            .map(|v| {
                tan[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*v)))
            })
            .collect())
    }

    /// Recompute every non-leaf node from the recorded leaves; used to check
    /// that replay reproduces the recorded values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = if node.inputs.is_empty() {
                node.value.clone()
            } else {
                let ins: Vec<&Tensor> = node.inputs.iter().map(|v| &vals[v.0]).collect();
                node.op.forward(&ins)?
            };
            vals.push(v);
        }
        Ok(vals)
    }

    pub fn recorded_values(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().map(|n| &n.value)
    }

    /// Names of the primitives recorded so far, in order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

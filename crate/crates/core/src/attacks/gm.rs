//! Backward enhancement: recover next-token labels by matching the gradient
//! the server returns with the gradient induced by dummy soft labels.

use rand_distr::{Distribution, StandardNormal};

use super::{argmax_rows, AttackHyperparams, ReplicaSegments};
use crate::autodiff::{softmax_row, Graph, Tensor, Var};
use crate::error::{contract, Error, Result};
use crate::model::{forward_segment, Bound, SegmentInput, BOS, PAD};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng;
use crate::splitsim::ServerView;

/// The Top replica recorded once at the observed Trunk output. The dummy loss
/// is linear in the soft labels, so all label queries reuse this tape.
pub struct LabelTop {
    graph: Graph,
    x: Var,
    log_probs: Var,
    lens: Vec<usize>,
    n: usize,
    dims: (usize, usize, usize),
}

impl LabelTop {
    pub fn new(replica: &ReplicaSegments, trunk_out: &Tensor, lens: &[usize]) -> Result<Self> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &replica.top, |_| false);
        let x = g.leaf(trunk_out.clone());
        let seg = replica.spec.top(&replica.config);
        let logits = forward_segment(
            &mut g,
            &p,
            &replica.config,
            seg,
            SegmentInput::Hidden(x),
            lens,
        )?;
        let log_probs = g.log_softmax(logits)?;
        let s = g.shape(logits).to_vec();
        let n: usize = lens.iter().map(|l| l - 1).sum();
        if n == 0 {
            return contract("no label positions to match");
        }
        Ok(LabelTop {
            graph: g,
            x,
            log_probs,
            lens: lens.to_vec(),
            n,
            dims: (s[0], s[1], s[2]),
        })
    }

    fn valid(&self, b: usize, u: usize) -> bool {
        u + 1 < self.lens[b]
    }

    fn check_labels(&self, y: &Tensor) -> Result<()> {
        let (b, s, v) = self.dims;
        if y.shape() != [b, s - 1, v] {
            return Err(Error::Shape {
                op: "label_gradient",
                lhs: y.shape().to_vec(),
                rhs: vec![b, s - 1, v],
            });
        }
        for r in 0..b {
            for u in 0..s - 1 {
                if !self.valid(r, u) {
                    continue;
                }
                let row = &y.data()[(r * (s - 1) + u) * v..(r * (s - 1) + u + 1) * v];
                if row.iter().any(|&p| !(p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6
                {
                    return contract(format!("label row ({r}, {u}) is not a probability vector"));
                }
            }
        }
        Ok(())
    }

    /// `y` `[B, S−1, V]` placed at positions `0..S−1` of a `[B, S, V]` tensor,
    /// scaled by `c / N` and zeroed off the label positions.
    fn spread(&self, y: &[f64], c: f64) -> Tensor {
        let (b, s, v) = self.dims;
        let mut out = vec![0.0; b * s * v];
        for r in 0..b {
            for u in 0..s - 1 {
                if self.valid(r, u) {
                    let src = &y[(r * (s - 1) + u) * v..(r * (s - 1) + u + 1) * v];
                    let dst = &mut out[(r * s + u) * v..(r * s + u + 1) * v];
                    for (d, &x) in dst.iter_mut().zip(src) {
                        *d = c * x / self.n as f64;
                    }
                }
            }
        }
        Tensor::from_parts(vec![b, s, v], out)
    }

    /// Gradient at the Trunk output of the soft-label loss
    /// `−(1/N) Σ y′ · log p` over label positions.
    pub fn dummy_gradient(&self, y: &Tensor) -> Result<Tensor> {
        self.check_labels(y)?;
        self.dummy_gradient_unconstrained(y)
    }

    fn dummy_gradient_unconstrained(&self, y: &Tensor) -> Result<Tensor> {
        let seed = self.spread(y.data(), -1.0);
        let mut gr = self
            .graph
            .backward_from(&[(self.log_probs, seed)], &[self.x])?;
        Ok(gr.take(self.x).expect("requested"))
    }

    /// Matching loss `β‖d‖₂ + (1−β)‖d‖₁` with `d = g(y′) − g*`, and its exact
    /// gradient with respect to `y′`.
    pub fn loss_and_grad(
        &self,
        y: &Tensor,
        real_grad: &Tensor,
        beta: f64,
    ) -> Result<(f64, Tensor)> {
        self.check_labels(y)?;
        self.loss_and_grad_unconstrained(y, real_grad, beta)
    }

    /// [`Self::loss_and_grad`] without the simplex check. The dummy gradient
    /// is linear in `y`, so the same formulas hold off the simplex; this is
    /// what finite differences probe.
    pub fn loss_and_grad_unconstrained(
        &self,
        y: &Tensor,
        real_grad: &Tensor,
        beta: f64,
    ) -> Result<(f64, Tensor)> {
        let (b, s, v) = self.dims;
        if y.shape() != [b, s - 1, v] {
            return Err(Error::Shape {
                op: "label_gradient",
                lhs: y.shape().to_vec(),
                rhs: vec![b, s - 1, v],
            });
        }
        let g = self.dummy_gradient_unconstrained(y)?;
        if g.shape() != real_grad.shape() {
            return Err(Error::Shape {
                op: "label_gradient",
                lhs: g.shape().to_vec(),
                rhs: real_grad.shape().to_vec(),
            });
        }
        let d = g.zip_map(real_grad, |a, b| a - b);
        let l2 = d.norm_l2();
        let l1: f64 = d.data().iter().map(|x| x.abs()).sum();
        let loss = beta * l2 + (1.0 - beta) * l1;
        let w = d.map(|x| {
            let radial = if l2 > 0.0 { beta * x / l2 } else { 0.0 };
            let sign = if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            };
            radial + (1.0 - beta) * sign
        });
        let jw = self
            .graph
            .jvp(&[(self.x, w)], &[self.log_probs])?
            .pop()
            .expect("one output");
        let mut grad = vec![0.0; b * (s - 1) * v];
        for r in 0..b {
            for u in 0..s - 1 {
                if self.valid(r, u) {
                    let src = &jw.data()[(r * s + u) * v..(r * s + u + 1) * v];
                    let dst = &mut grad[(r * (s - 1) + u) * v..(r * (s - 1) + u + 1) * v];
                    for (o, &j) in dst.iter_mut().zip(src) {
                        *o = -j / self.n as f64;
                    }
                }
            }
        }
        Ok((loss, Tensor::from_parts(vec![b, s - 1, v], grad)))
    }
}

/// One-shot form of [`LabelTop::loss_and_grad`].
pub fn label_gradient(
    replica: &ReplicaSegments,
    trunk_out: &Tensor,
    lens: &[usize],
    y: &Tensor,
    real_grad: &Tensor,
    beta: f64,
) -> Result<(f64, Tensor)> {
    LabelTop::new(replica, trunk_out, lens)?.loss_and_grad(y, real_grad, beta)
}

/// One-shot form of [`LabelTop::dummy_gradient`].
pub fn dummy_gradient(
    replica: &ReplicaSegments,
    trunk_out: &Tensor,
    lens: &[usize],
    y: &Tensor,
) -> Result<Tensor> {
    LabelTop::new(replica, trunk_out, lens)?.dummy_gradient(y)
}

pub enum GmInit<'a> {
    /// Per-position vocabulary logits `[B, S, V]` of an earlier stage and its
    /// token reconstruction (`B·S`), which supplies position 0.
    Logits(&'a Tensor, &'a [usize]),
    /// Seeded standard-normal label logits; position 0 becomes BOS.
    Random(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmOutput {
    /// Best soft labels `[B, S−1, V]`.
    pub labels: Tensor,
    /// Reconstruction `B·S`: position 0 from the init, `u+1` from label `u`.
    pub tokens: Vec<usize>,
    pub trace: Vec<f64>,
    pub best_loss: f64,
}

fn softmax_rows(z: &Tensor) -> Tensor {
    let v = *z.shape().last().expect("rank >= 1");
    let mut out = vec![0.0; z.numel()];
    for (o, r) in out.chunks_mut(v).zip(z.data().chunks(v)) {
        softmax_row(r, o);
    }
    Tensor::from_parts(z.shape().to_vec(), out)
}

/// Optimize label logits `z′` (with `y′ = softmax(z′)`) by AdamW on the
/// matching loss; the lowest-loss iterate is returned.
pub fn gradient_matching(
    view: &ServerView,
    replica: &ReplicaSegments,
    init: GmInit<'_>,
    hp: &AttackHyperparams,
) -> Result<GmOutput> {
    hp.validate()?;
    let lens = &view.lens;
    let top = LabelTop::new(replica, &view.trunk_out, lens)?;
    let (b, s, v) = top.dims;
    let mut z = match init {
        GmInit::Logits(l, _) => {
            if l.shape() != [b, s, v] {
                return Err(Error::Shape {
                    op: "gradient_matching init",
                    lhs: l.shape().to_vec(),
                    rhs: vec![b, s, v],
                });
            }
            let mut d = Vec::with_capacity(b * (s - 1) * v);
            for r in 0..b {
                d.extend(
                    l.data()[(r * s + 1) * v..(r + 1) * s * v]
                        .iter()
                        .map(|x| x / hp.gm_tau),
                );
            }
            Tensor::from_parts(vec![b, s - 1, v], d)
        }
        GmInit::Random(seed) => {
            let mut r = rng::stream(seed, "gm-random-init");
            let d = (0..b * (s - 1) * v)
                .map(|_| StandardNormal.sample(&mut r))
                .collect();
            Tensor::from_parts(vec![b, s - 1, v], d)
        }
    };
    let mut opt = AdamW::new(AdamWConfig::new(hp.gm_lr, 0.0));
    let mut trace = Vec::with_capacity(hp.gm_epochs + 1);
    let mut best: Option<(f64, Tensor)> = None;
    for it in 0..=hp.gm_epochs {
        let y = softmax_rows(&z);
        let (l, gy) = top.loss_and_grad(&y, &view.grad_trunk_out, hp.gm_beta)?;
        if !l.is_finite() {
            log::warn!("gradient matching stopped at non-finite loss, iteration {it}");
            break;
        }
        trace.push(l);
        if best.as_ref().is_none_or(|(bl, _)| l < *bl) {
            best = Some((l, y.clone()));
        }
        if it == hp.gm_epochs {
            break;
        }
        let mut gz = vec![0.0; z.numel()];
        for ((o, yr), gr) in gz
            .chunks_mut(v)
            .zip(y.data().chunks(v))
            .zip(gy.data().chunks(v))
        {
            let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for ((o, &yi), &gi) in o.iter_mut().zip(yr).zip(gr) {
                *o = yi * (gi - inner);
            }
        }
        let gz = Tensor::from_parts(z.shape().to_vec(), gz);
        opt.begin_step();
        opt.update_one("z", &mut z, &gz);
    }
    let Some((best_loss, labels)) = best else {
        return contract("gradient matching produced no finite iterate");
    };
    let picks = argmax_rows(&labels);
    let mut tokens = vec![PAD; b * s];
    for r in 0..b {
        tokens[r * s] = match init {
            GmInit::Logits(_, t) => t[r * s],
            GmInit::Random(_) => BOS,
        };
        for u in 0..lens[r] - 1 {
            tokens[r * s + u + 1] = picks[r * (s - 1) + u];
        }
    }
    Ok(GmOutput {
        labels,
        tokens,
        trace,
        best_loss,
    })
}

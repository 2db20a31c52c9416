//! Forward-perturbation defenses: embedding dX-privacy with nearest-row
//! snapping, Laplace noise on clipped smashed data, and the NoPeek
//! distance-correlation penalty.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{contract, Error, Result};
use crate::rng::LabRng;

/// Default clipping threshold for smashed-data Laplace noise.
pub const DEFAULT_CLIP: f64 = 2000.0;
/// Default batch size when NoPeek is active.
pub const NOPEEK_BATCH: usize = 6;

fn default_clip() -> f64 {
    DEFAULT_CLIP
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Mechanism {
    #[default]
    None,
    Dxp {
        eps_prime: f64,
    },
    LaplaceDp {
        eps_star: f64,
        #[serde(default = "default_clip")]
        clip: f64,
    },
    Nopeek {
        alpha: f64,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default)]
    pub mechanism: Mechanism,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec::default()
    }

    pub fn dxp(eps_prime: f64) -> Self {
        Mechanism::Dxp { eps_prime }.into()
    }

    pub fn laplace(eps_star: f64, clip: f64) -> Self {
        Mechanism::LaplaceDp { eps_star, clip }.into()
    }

    pub fn nopeek(alpha: f64) -> Self {
        Mechanism::Nopeek { alpha }.into()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.mechanism {
            Mechanism::None => true,
            Mechanism::Dxp { eps_prime } => eps_prime > 0.0,
            Mechanism::LaplaceDp { eps_star, clip } => eps_star > 0.0 && clip > 0.0,
            Mechanism::Nopeek { alpha } => alpha >= 0.0 && alpha.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid noise spec {:?}",
                self.mechanism
            )))
        }
    }

    /// Short label such as `dxp:0.5`, used in reports.
    pub fn label(&self) -> String {
        match self.mechanism {
            Mechanism::None => "none".into(),
            Mechanism::Dxp { eps_prime } => format!("dxp:{eps_prime}"),
            Mechanism::LaplaceDp { eps_star, .. } => format!("dp:{eps_star}"),
            Mechanism::Nopeek { alpha } => format!("nopeek:{alpha}"),
        }
    }
}

impl From<Mechanism> for NoiseSpec {
    fn from(mechanism: Mechanism) -> Self {
        NoiseSpec { mechanism, seed: 0 }
    }
}

/// One dX-privacy noise vector: Gaussian direction, Gamma(H, 1/ε) magnitude.
pub fn dxp_noise(dim: usize, eps: f64, rng: &mut LabRng) -> Vec<f64> {
    let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mag = if eps.is_infinite() {
        0.0
    } else {
        Gamma::new(dim as f64, 1.0 / eps)
            .expect("positive gamma parameters")
            .sample(rng)
    };
    for d in &mut dir {
        *d *= mag / n;
    }
    dir
}

/// Index of the closest `table` row to `v` by squared L2; ties go to the
/// lowest index.
pub fn nearest_row(v: &[f64], table: &Tensor) -> usize {
    let h = v.len();
    let mut best = (f64::INFINITY, 0usize);
    for (i, row) in table.data().chunks_exact(h).enumerate() {
        let d: f64 = row.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Perturb each position of `embeddings` (`[.., H]`) with dX-privacy noise at
/// `ε = eps_prime · H`, then snap to the nearest table row. Returns the
/// snapped rows and their ids.
pub fn dxp_perturb(
    embeddings: &Tensor,
    eps_prime: f64,
    table: &Tensor,
    rng: &mut LabRng,
) -> Result<(Tensor, Vec<usize>)> {
    if !(eps_prime > 0.0) {
        return Err(Error::Config(format!(
            "eps_prime must be > 0, got {eps_prime}"
        )));
    }
    let h = *embeddings.shape().last().unwrap_or(&0);
    if table.ndim() != 2 || table.shape()[1] != h || h == 0 {
        return Err(Error::Shape {
            op: "dxp_perturb",
            lhs: embeddings.shape().to_vec(),
            rhs: table.shape().to_vec(),
        });
    }
    let eps = eps_prime * h as f64;
    let mut ids = Vec::with_capacity(embeddings.numel() / h);
    let mut out = Vec::with_capacity(embeddings.numel());
    for row in embeddings.data().chunks_exact(h) {
        let noise = dxp_noise(h, eps, rng);
        let noisy: Vec<f64> = row.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let id = nearest_row(&noisy, table);
        ids.push(id);
        out.extend_from_slice(table.row(id));
    }
    Ok((Tensor::from_parts(embeddings.shape().to_vec(), out), ids))
}

/// Per-example clipping factors `1 / max(1, ‖x_b‖∞ / G)` over the leading axis.
pub fn clip_factors(x: &Tensor, clip: f64) -> Vec<f64> {
    let b = x.shape().first().copied().unwrap_or(1).max(1);
    x.data()
        .chunks(x.numel() / b)
        .map(|r| {
            let m = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if m <= clip {
                return 1.0;
            }
            // step down one ulp if rounding would overshoot the bound
            let f = clip / m;
            if m * f > clip {
                f64::from_bits(f.to_bits() - 1)
            } else {
                f
            }
        })
        .collect()
}

pub fn laplace_sample(scale: f64, rng: &mut LabRng) -> f64 {
    if scale == 0.0 {
        return 0.0;
    }
    let u: f64 = rng.random::<f64>() - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Noise scale `Δf/ε` with `Δf = 2G` and `ε = ε*·G`; zero for infinite `ε*`.
pub fn laplace_scale(eps_star: f64, clip: f64) -> f64 {
    if eps_star.is_infinite() {
        0.0
    } else {
        2.0 * clip / (eps_star * clip)
    }
}

/// Clipping factors (per example) and additive noise for smashed data.
pub struct DpSample {
    pub factors: Vec<f64>,
    pub noise: Tensor,
    pub scale: f64,
}

pub fn dp_laplace_sample(
    x: &Tensor,
    eps_star: f64,
    clip: f64,
    rng: &mut LabRng,
) -> Result<DpSample> {
    if !(eps_star > 0.0) || !(clip > 0.0) {
        return Err(Error::Config(format!(
            "laplace needs eps_star > 0 and clip > 0, got {eps_star}, {clip}"
        )));
    }
    let scale = laplace_scale(eps_star, clip);
    let noise = (0..x.numel()).map(|_| laplace_sample(scale, rng)).collect();
    Ok(DpSample {
        factors: clip_factors(x, clip),
        noise: Tensor::from_parts(x.shape().to_vec(), noise),
        scale,
    })
}

/// Clip each example to infinity norm `clip`, then add Laplace noise.
pub fn dp_laplace_perturb(
    x: &Tensor,
    eps_star: f64,
    clip: f64,
    rng: &mut LabRng,
) -> Result<Tensor> {
    let s = dp_laplace_sample(x, eps_star, clip, rng)?;
    let per = x.numel() / s.factors.len();
    let data = x
        .data()
        .iter()
        .zip(s.noise.data())
        .enumerate()
        .map(|(i, (v, n))| v * s.factors[i / per] + n)
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Apply a [`DpSample`] on the graph; clipping factors are treated as constants.
pub fn dp_apply(g: &mut Graph, x: Var, s: &DpSample) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let per = n / s.factors.len();
    let f = g.constant(Tensor::from_parts(
        shape,
        (0..n).map(|i| s.factors[i / per]).collect(),
    ));
    let y = g.mul(x, f)?;
    let noise = g.constant(s.noise.clone());
    g.add(y, noise)
}

fn centered_distances(x: &Tensor) -> Result<Vec<f64>> {
    if x.ndim() != 2 {
        return contract("distance correlation needs B x D matrices");
    }
    let (b, d) = (x.shape()[0], x.shape()[1]);
    let mut dist = vec![0.0; b * b];
    for i in 0..b {
        for j in i + 1..b {
            let r: f64 = (0..d)
                .map(|k| {
                    let t = x.data()[i * d + k] - x.data()[j * d + k];
                    t * t
                })
                .sum::<f64>()
                .sqrt();
            dist[i * b + j] = r;
            dist[j * b + i] = r;
        }
    }
    let row: Vec<f64> = (0..b)
        .map(|i| dist[i * b..(i + 1) * b].iter().sum::<f64>() / b as f64)
        .collect();
    let all = row.iter().sum::<f64>() / b as f64;
    for i in 0..b {
        for j in 0..b {
            dist[i * b + j] += all - row[i] - row[j];
        }
    }
    Ok(dist)
}

/// Sample distance correlation between rows of `x` (`B×Dx`) and `y` (`B×Dy`).
pub fn distance_correlation(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_dcor(x.shape(), y.shape())?;
    let a = centered_distances(x)?;
    let b = centered_distances(y)?;
    let m =
        |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).sum::<f64>() / p.len() as f64;
    let (xy, xx, yy) = (m(&a, &b), m(&a, &a), m(&b, &b));
    if xx <= 0.0 || yy <= 0.0 {
        return Ok(0.0);
    }
    Ok(xy.max(0.0).sqrt() / (xx * yy).powf(0.25))
}

fn check_dcor(x: &[usize], y: &[usize]) -> Result<()> {
    if x.len() != 2 || y.len() != 2 || x[0] != y[0] {
        return Err(Error::Shape {
            op: "distance_correlation",
            lhs: x.to_vec(),
            rhs: y.to_vec(),
        });
    }
    if x[0] < 4 {
        return contract(format!("distance correlation needs B >= 4, got {}", x[0]));
    }
    Ok(())
}

/// Differentiable distance correlation on the graph.
pub fn distance_correlation_graph(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    check_dcor(g.shape(x), g.shape(y))?;
    let a = g.pairwise_distance(x)?;
    let a = g.double_center(a)?;
    let b = g.pairwise_distance(y)?;
    let b = g.double_center(b)?;
    let ab = g.mul(a, b)?;
    let xy = g.mean(ab)?;
    let aa = g.mul(a, a)?;
    let xx = g.mean(aa)?;
    let bb = g.mul(b, b)?;
    let yy = g.mean(bb)?;
    if g.value(xx).item() <= 0.0 || g.value(yy).item() <= 0.0 || g.value(xy).item() <= 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let num = g.sqrt(xy)?;
    let den = g.mul(xx, yy)?;
    let den = g.sqrt(den)?;
    let den = g.sqrt(den)?;
    g.div(num, den)
}

/// `task_loss + alpha · dCor(x, smashed)` with both operands flattened per example.
pub fn nopeek_loss(
    g: &mut Graph,
    task_loss: Var,
    inputs_embedded: Var,
    smashed: Var,
    alpha: f64,
) -> Result<Var> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    if alpha == 0.0 {
        return Ok(task_loss);
    }
    let flat = |g: &mut Graph, v: Var| -> Result<Var> {
        let s = g.shape(v).to_vec();
        let rest: usize = s[1..].iter().product();
        g.reshape(v, &[s[0], rest])
    };
    let x = flat(g, inputs_embedded)?;
    let y = flat(g, smashed)?;
    let d = distance_correlation_graph(g, x, y)?;
    let d = g.scale(d, alpha)?;
    g.add(task_loss, d)
}

//! Training objectives for one query list.
//!
//! Each loss maps predicted labels `ŷ` (an `[n, 1]` node) and graded labels
//! to a scalar node. Masked documents are gathered out before anything is
//! computed, so they take part in no sum and no pair.

use std::f64::consts::LN_2;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::gradcheck::{analytic_gradients, max_relative_error, numeric_gradients};
use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::ranking;
use crate::rng::seeded;

/// Added under the square root of RMSE so its gradient exists at zero error.
pub const RMSE_EPS: f64 = 1e-12;

pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_MU: f64 = 10.0;
pub const DEFAULT_SIGMA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    Mse,
    Rmse,
    RankNet,
    NdcgLoss2pp { mu: f64, sigma: f64 },
    ApproxNdcg { temperature: f64 },
    ListNet,
}

impl LossKind {
    pub const NAMES: [&'static str; 6] = ["mse", "rmse", "ranknet", "ndcgloss2pp", "approxndcg", "listnet"];

    pub fn all() -> [LossKind; 6] {
        Self::NAMES.map(|n| n.parse().expect("listed name"))
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Rmse => "rmse",
            LossKind::RankNet => "ranknet",
            LossKind::NdcgLoss2pp { .. } => "ndcgloss2pp",
            LossKind::ApproxNdcg { .. } => "approxndcg",
            LossKind::ListNet => "listnet",
        }
    }

    pub fn validate(self) -> Result<Self> {
        match self {
            LossKind::ApproxNdcg { temperature } if !(temperature > 0.0) => Err(Error::Validation(format!(
                "approxndcg temperature must be positive, got {temperature}"
            ))),
            LossKind::NdcgLoss2pp { mu, sigma } if !(mu >= 0.0) || !sigma.is_finite() => Err(Error::Validation(
                format!("ndcgloss2pp needs mu >= 0 and finite sigma, got mu={mu} sigma={sigma}"),
            )),
            k => Ok(k),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "mse" => LossKind::Mse,
            "rmse" => LossKind::Rmse,
            "ranknet" => LossKind::RankNet,
            "ndcgloss2pp" | "ndcgloss2++" => LossKind::NdcgLoss2pp {
                mu: DEFAULT_MU,
                sigma: DEFAULT_SIGMA,
            },
            "approxndcg" => LossKind::ApproxNdcg {
                temperature: DEFAULT_TEMPERATURE,
            },
            "listnet" => LossKind::ListNet,
            _ => {
                return Err(Error::Validation(format!(
                    "unknown loss {s:?}; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        })
    }
}

fn column<F: Real>(values: &[f64]) -> Tensor<F> {
    Tensor::<f64>::column(values).cast()
}

/// `(A, B)` with `A_ij = s_i` and `B_ij = s_j` for an `[m, 1]` node `s`.
fn pair_grids<F: Real>(g: &mut Graph<F>, s: Var, m: usize) -> Result<(Var, Var)> {
    let ones = g.constant(Tensor::full(&[1, m], F::one()));
    let a = g.matmul(s, ones)?;
    let b = g.transpose(a)?;
    Ok((a, b))
}

fn gain(label: f64) -> f64 {
    label.exp2() - 1.0
}

fn max_dcg(labels: &[f64]) -> f64 {
    let mut sorted = labels.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted
        .iter()
        .enumerate()
        .map(|(r, &l)| gain(l) / ((r + 2) as f64).log2())
        .sum()
}

/// Pair weights `(ρ_ij + μ δ_ij) |G_i - G_j|` for pairs with `y_i > y_j`,
/// ranks taken from the ordering of `scores`. Row-major `m × m`.
pub(crate) fn lambda_weights(scores: &[f64], labels: &[f64], mu: f64) -> Vec<f64> {
    let m = labels.len();
    let mut rank = vec![0usize; m];
    for (pos, i) in ranking(scores).into_iter().enumerate() {
        rank[i] = pos + 1;
    }
    let disc = |r: usize| 1.0 / ((1 + r) as f64).log2();
    let z = max_dcg(labels);
    let mut w = vec![0.0; m * m];
    if z == 0.0 {
        return w;
    }
    for i in 0..m {
        for j in 0..m {
            if labels[i] > labels[j] {
                let gap = rank[i].abs_diff(rank[j]);
                let rho = (disc(rank[i]) - disc(rank[j])).abs();
                let delta = (disc(gap) - disc(gap + 1)).abs();
                w[i * m + j] = (rho + mu * delta) * (gain(labels[i]) - gain(labels[j])).abs() / z;
            }
        }
    }
    w
}

/// Loss node for one list, or `None` when every document is masked out.
///
/// `mask[i] == true` marks a real document.
pub fn loss<F: Real>(
    g: &mut Graph<F>,
    kind: LossKind,
    y_hat: Var,
    labels: &[f64],
    mask: Option<&[bool]>,
) -> Result<Option<Var>> {
    let shape = g.shape(y_hat).to_vec();
    if shape != [labels.len(), 1] {
        return Err(Error::shape("loss", &shape, &[labels.len(), 1]));
    }
    let (s, y): (Var, Vec<f64>) = match mask {
        Some(mask) => {
            if mask.len() != labels.len() {
                return Err(Error::shape("loss mask", &[mask.len()], &[labels.len()]));
            }
            let keep: Vec<usize> = (0..labels.len()).filter(|&i| mask[i]).collect();
            if keep.is_empty() {
                return Ok(None);
            }
            let y = keep.iter().map(|&i| labels[i]).collect();
            (g.embedding_lookup(y_hat, &keep)?, y)
        }
        None if labels.is_empty() => return Ok(None),
        None => (y_hat, labels.to_vec()),
    };
    let m = y.len();
    let zero = |g: &mut Graph<F>| g.constant(Tensor::scalar(F::zero()));

    let out = match kind.validate()? {
        LossKind::Mse | LossKind::Rmse => {
            let target = g.constant(column(&y));
            let d = g.sub(s, target)?;
            let sq = g.mul(d, d)?;
            let mse = g.mean(sq);
            if kind == LossKind::Mse {
                mse
            } else {
                let eps = g.constant(Tensor::scalar(F::of(RMSE_EPS)));
                let shifted = g.add(mse, eps)?;
                g.sqrt(shifted)?
            }
        }
        LossKind::RankNet => {
            let pairs: Vec<f64> = (0..m * m)
                .map(|ij| if y[ij / m] > y[ij % m] { 1.0 } else { 0.0 })
                .collect();
            if pairs.iter().all(|&p| p == 0.0) {
                return Ok(Some(zero(g)));
            }
            let (a, b) = pair_grids(g, s, m)?;
            let diff = g.sub(b, a)?;
            let sp = g.softplus(diff);
            let p = g.constant(Tensor::from_f64(&[m, m], &pairs)?);
            let masked = g.mul(sp, p)?;
            g.sum(masked)
        }
        LossKind::NdcgLoss2pp { mu, sigma } => {
            let scores: Vec<f64> = g.value(s).to_f64_vec();
            let w = lambda_weights(&scores, &y, mu);
            if w.iter().all(|&x| x == 0.0) {
                return Ok(Some(zero(g)));
            }
            let (a, b) = pair_grids(g, s, m)?;
            let diff = g.sub(b, a)?;
            let scaled = g.scale(diff, sigma);
            let sp = g.softplus(scaled);
            let wv = g.constant(Tensor::from_f64(&[m, m], &w)?);
            let weighted = g.mul(sp, wv)?;
            let total = g.sum(weighted);
            g.scale(total, 1.0 / LN_2)
        }
        LossKind::ApproxNdcg { temperature } => {
            let z = max_dcg(&y);
            if z == 0.0 {
                return Ok(Some(zero(g)));
            }
            let (a, b) = pair_grids(g, s, m)?;
            let diff = g.sub(b, a)?;
            let scaled = g.scale(diff, 1.0 / temperature);
            let sig = g.sigmoid(scaled);
            let counts = g.sum_axis(sig, 1)?;
            // 1 + π(i) = 1.5 + Σ_j sigmoid(...)
            let offset = g.constant(Tensor::scalar(F::of(1.5)));
            let arg = g.add(counts, offset)?;
            let ln = g.log(arg)?;
            let gains: Vec<f64> = y.iter().map(|&l| gain(l) * LN_2).collect();
            let gv = g.constant(column(&gains));
            let terms = g.div(gv, ln)?;
            let dcg = g.sum(terms);
            g.scale(dcg, -1.0 / z)
        }
        LossKind::ListNet => {
            let row = g.transpose(s)?;
            let log_p = g.log_softmax(row)?;
            let mut target = y.iter().map(|&l| F::of(l)).collect::<Vec<F>>();
            crate::autodiff::softmax_in_place(&mut target);
            let tv = g.constant(Tensor::new(vec![1, m], target)?);
            let prod = g.mul(log_p, tv)?;
            let total = g.sum(prod);
            g.scale(total, -1.0)
        }
    };
    Ok(Some(out))
}

/// Evaluates a loss on plain vectors, in 64-bit.
pub fn loss_value(kind: LossKind, y_hat: &[f64], labels: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let s = g.constant(Tensor::column(y_hat));
    Ok(loss(&mut g, kind, s, labels, mask)?.map_or(0.0, |v| g.value(v).data()[0]))
}

/// Worst finite-difference relative error of `kind`'s gradient over `trials`
/// random lists of length `n`, some with masked entries.
pub fn loss_gradient_check(kind: LossKind, n: usize, trials: usize, seed: u64) -> Result<f64> {
    if n == 0 || n > 8 {
        return Err(Error::Contract(format!("loss gradient check needs 1 <= n <= 8, got {n}")));
    }
    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let y_hat: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
        let mut labels: Vec<f64> = (0..n).map(|_| rng.random_range(0..=4) as f64).collect();
        labels[0] = labels[0].max(1.0);
        let mask: Vec<bool> = (0..n).map(|i| i == 0 || trial % 2 == 0 || rng.random::<f64>() < 0.7).collect();
        let f = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
            Ok(loss(g, kind, v[0], &labels, Some(&mask))?.expect("first document is unmasked"))
        };
        let input = [Tensor::column(&y_hat)];
        let a = analytic_gradients(&input, &f)?;
        let num = numeric_gradients(&input, &f)?;
        worst = worst.max(max_relative_error(&a, &num));
    }
    Ok(worst)
}

//! Central finite-difference checks of the engine's analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Acceptance threshold on `|analytic - numeric| / max(1, |numeric|)`.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// A scalar-valued function of some input tensors, recorded on a graph.
pub trait ScalarFn: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> {}
impl<T: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>> ScalarFn for T {}

pub fn evaluate(inputs: &[Tensor<f64>], f: &impl ScalarFn) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).data()[0])
}

pub fn analytic_gradients(inputs: &[Tensor<f64>], f: &impl ScalarFn) -> Result<Vec<Tensor<f64>>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

pub fn numeric_gradients(inputs: &[Tensor<f64>], f: &impl ScalarFn) -> Result<Vec<Tensor<f64>>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let plus = evaluate(&work, f)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let minus = evaluate(&work, f)?;
            work[i].data_mut()[j] = orig;
            grad.data_mut()[j] = (plus - minus) / (2.0 * FD_STEP);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Worst `|a - n| / max(1, |n|)` over all entries.
pub fn max_relative_error(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compares analytic and numeric gradients of `f` at `inputs`.
pub fn check_gradients(inputs: &[Tensor<f64>], f: &impl ScalarFn) -> Result<f64> {
    let a = analytic_gradients(inputs, f)?;
    let n = numeric_gradients(inputs, f)?;
    Ok(max_relative_error(&a, &n))
}

/// Worst gradient error observed for one named check.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

pub(crate) fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Weighted sum `sum(out * w)` so every output entry reaches the loss with a
/// distinct coefficient.
fn probe(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, g.shape(out), -1.0, 1.0);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

type OpCase = (&'static str, Vec<Vec<usize>>, (f64, f64), fn(&mut Graph<f64>, &[Var]) -> Result<Var>);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], (-1.0, 1.0), |g, v| g.matmul(v[0], v[1])),
        ("transpose", vec![vec![3, 2]], (-1.0, 1.0), |g, v| g.transpose(v[0])),
        ("add", vec![vec![3, 4], vec![3, 4]], (-1.0, 1.0), |g, v| g.add(v[0], v[1])),
        ("add_row", vec![vec![3, 4], vec![1, 4]], (-1.0, 1.0), |g, v| g.add(v[0], v[1])),
        ("add_scalar", vec![vec![3, 4], vec![1]], (-1.0, 1.0), |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![2, 3], vec![2, 3]], (-1.0, 1.0), |g, v| g.sub(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], (-1.0, 1.0), |g, v| g.mul(v[0], v[1])),
        ("mul_row", vec![vec![3, 4], vec![4]], (-1.0, 1.0), |g, v| g.mul(v[0], v[1])),
        ("div", vec![vec![3, 4], vec![3, 4]], (0.5, 2.0), |g, v| g.div(v[0], v[1])),
        ("scale", vec![vec![3, 4]], (-1.0, 1.0), |g, v| Ok(g.scale(v[0], -1.7))),
        ("concat", vec![vec![3, 2], vec![3, 3]], (-1.0, 1.0), |g, v| g.concat(&[v[0], v[1]])),
        ("slice_cols", vec![vec![3, 5]], (-1.0, 1.0), |g, v| g.slice_cols(v[0], 1, 3)),
        ("softplus", vec![vec![3, 4]], (-3.0, 3.0), |g, v| Ok(g.softplus(v[0]))),
        ("sigmoid", vec![vec![3, 4]], (-3.0, 3.0), |g, v| Ok(g.sigmoid(v[0]))),
        ("exp", vec![vec![3, 4]], (-2.0, 2.0), |g, v| Ok(g.exp(v[0]))),
        ("log", vec![vec![3, 4]], (0.5, 3.0), |g, v| g.log(v[0])),
        ("sqrt", vec![vec![3, 4]], (0.5, 3.0), |g, v| g.sqrt(v[0])),
        ("softmax", vec![vec![3, 5]], (-2.0, 2.0), |g, v| g.softmax(v[0])),
        ("log_softmax", vec![vec![3, 5]], (-2.0, 2.0), |g, v| g.log_softmax(v[0])),
        ("sum", vec![vec![3, 4]], (-1.0, 1.0), |g, v| Ok(g.sum(v[0]))),
        ("mean", vec![vec![3, 4]], (-1.0, 1.0), |g, v| Ok(g.mean(v[0]))),
        ("sum_axis0", vec![vec![3, 4]], (-1.0, 1.0), |g, v| g.sum_axis(v[0], 0)),
        ("sum_axis1", vec![vec![3, 4]], (-1.0, 1.0), |g, v| g.sum_axis(v[0], 1)),
        ("mean_axis1", vec![vec![3, 4]], (-1.0, 1.0), |g, v| g.mean_axis(v[0], 1)),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], (-2.0, 2.0), |g, v| {
            g.layer_norm(v[0], v[1], v[2])
        }),
        ("dropout", vec![vec![4, 5]], (-1.0, 1.0), |g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            g.dropout(v[0], 0.3, true, &mut rng)
        }),
        ("embedding_lookup", vec![vec![5, 3]], (-1.0, 1.0), |g, v| {
            g.embedding_lookup(v[0], &[4, 0, 4, 2])
        }),
    ]
}

/// Runs every op's finite-difference check on `trials` random instances.
pub fn op_gradient_suite(trials: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, shapes, (lo, hi), op) in op_cases() {
        let mut worst: f64 = 0.0;
        for trial in 0..trials {
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random_tensor(&mut rng, s, lo, hi)).collect();
            let probe_seed = seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let f = move |g: &mut Graph<f64>, v: &[Var]| {
                let o = op(g, v)?;
                probe(g, o, probe_seed)
            };
            worst = worst.max(check_gradients(&inputs, &f)?);
        }
        out.push(CheckOutcome {
            name: name.to_string(),
            trials,
            max_rel_error: worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_finite_differences() {
        for outcome in op_gradient_suite(20, 11).unwrap() {
            assert!(outcome.passed(), "{} max rel error {}", outcome.name, outcome.max_rel_error);
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let inputs = vec![Tensor::from_f64(&[2, 2], &[0.3, -0.2, 0.5, 1.1]).unwrap()];
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let s = g.softplus(v[0]);
            Ok(g.sum(s))
        };
        let mut analytic = analytic_gradients(&inputs, &f).unwrap();
        let numeric = numeric_gradients(&inputs, &f).unwrap();
        assert!(max_relative_error(&analytic, &numeric) < GRAD_TOLERANCE);
        analytic[0].data_mut()[3] += 1e-3;
        assert!(max_relative_error(&analytic, &numeric) > GRAD_TOLERANCE);
    }
}

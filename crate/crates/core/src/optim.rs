//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid AdamW settings {self:?}")))
        }
    }
}

/// Optimizer state: first and second moments per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new<'a>(config: AdamWConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|s| (Tensor::zeros(s), Tensor::zeros(s)))
            .unzip();
        Self { config, step: 0, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<F>], &[Tensor<F>]) {
        (&self.m, &self.v)
    }

    /// One update. Parameters whose gradient is `None` get weight decay only.
    ///
    /// `θ ← θ − lr · (m̂ / (√v̂ + ε) + wd · θ)`
    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Option<Tensor<F>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (lr, wd, eps) = (F::of(c.lr), F::of(c.weight_decay), F::of(c.eps));
        let (bc1, bc2) = (F::of(bc1), F::of(bc2));
        for (i, p) in params.iter_mut().enumerate() {
            if p.shape() != self.m[i].shape() {
                return Err(Error::shape("AdamW parameter", p.shape(), self.m[i].shape()));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            match &grads[i] {
                Some(g) => {
                    if g.shape() != p.shape() {
                        return Err(Error::shape("AdamW gradient", g.shape(), p.shape()));
                    }
                    for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mj = b1 * *mj + (F::one() - b1) * gj;
                        *vj = b2 * *vj + (F::one() - b2) * gj * gj;
                        let m_hat = *mj / bc1;
                        let v_hat = *vj / bc2;
                        *w = *w - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
                    }
                }
                None => {
                    for w in p.data_mut() {
                        *w = *w - lr * wd * *w;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(config: AdamWConfig, start: [f64; 2], grad: impl Fn(&[f64]) -> [f64; 2], steps: usize) -> Vec<f64> {
        let mut params = vec![Tensor::<f64>::from_f64(&[2], &start).unwrap()];
        let mut opt = AdamW::new(config, [&[2usize][..]]);
        for _ in 0..steps {
            let g = grad(params[0].data());
            let g = Tensor::from_f64(&[2], &g).unwrap();
            opt.step(&mut params, &[Some(g)]).unwrap();
        }
        params[0].data().to_vec()
    }

    #[test]
    fn three_steps_match_hand_trace() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        // f(θ) = θ0² + 3 θ1, gradient (2 θ0, 3)
        let got = run(cfg, [1.0, -2.0], |p| [2.0 * p[0], 3.0], 3);

        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let mut theta = [1.0f64, -2.0];
        let mut m = [0.0f64; 2];
        let mut v = [0.0f64; 2];
        for t in 1..=3 {
            let g = [2.0 * theta[0], 3.0];
            for i in 0..2 {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powi(t));
                let vh = v[i] / (1.0 - b2.powi(t));
                theta[i] -= 0.1 * (mh / (vh.sqrt() + eps) + 0.5 * theta[i]);
            }
        }
        for i in 0..2 {
            assert!((got[i] - theta[i]).abs() < 1e-14, "{got:?} vs {theta:?}");
        }
        // first step of Adam moves each coordinate by about lr
        let one = run(AdamWConfig { lr: 0.1, weight_decay: 0.0, ..cfg }, [1.0, -2.0], |p| [2.0 * p[0], 3.0], 1);
        assert!((one[0] - 0.9).abs() < 1e-6 && (one[1] + 2.1).abs() < 1e-6);
    }

    #[test]
    fn zero_decay_is_plain_adam() {
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let got = run(cfg, [0.3, 0.7], |p| [p[0] - p[1], p[1] * p[1]], 25);
        // textbook Adam, coupled form with no decay term at all
        let mut p = [0.3f64, 0.7];
        let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
        for t in 1..=25 {
            let g = [p[0] - p[1], p[1] * p[1]];
            for i in 0..2 {
                m[i] = 0.9 * m[i] + (1.0 - 0.9) * g[i];
                v[i] = 0.999 * v[i] + (1.0 - 0.999) * g[i] * g[i];
                p[i] -= 0.01 * (m[i] / (1.0 - 0.9f64.powi(t))) / ((v[i] / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            }
        }
        assert_eq!(got, p.to_vec());
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let cfg = AdamWConfig {
            lr: 0.0,
            ..AdamWConfig::default()
        };
        let start = [0.123456789f64, -9.87654321];
        assert_eq!(run(cfg, start, |_| [5.0, -1.0], 4), start.to_vec());
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut opt = AdamW::<f64>::new(AdamWConfig::default(), [&[2usize][..]]);
        let mut params = vec![Tensor::zeros(&[3])];
        assert!(opt.step(&mut params, &[None]).is_err());
        assert!(opt.step(&mut [], &[]).is_err());
    }
}

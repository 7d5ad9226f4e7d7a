//! Noise schedules and the closed-form Gaussian algebra of the label
//! diffusion process.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`, with `alpha_bar(0) = 1` by
//! convention.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest per-step noise allowed by the curve-defined schedules.
pub const MAX_BETA: f64 = 0.999;
/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Offset of the square-root schedule.
pub const SQRT_OFFSET: f64 = 1e-4;
/// Linear schedule endpoints at `T = 1000`; other lengths rescale them by
/// `1000 / T` so the total injected noise stays comparable.
pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 0.02;
/// `alpha_bar` at the knee (`T/2`) and at `T` of the truncated-linear schedule.
pub const TRUNC_LINEAR_KNEE: f64 = 0.5;
pub const TRUNC_LINEAR_END: f64 = 0.008;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScheduleKind {
    Linear,
    TruncatedLinear,
    Cosine,
    Sqrt,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 4] = [
        ScheduleKind::Linear,
        ScheduleKind::TruncatedLinear,
        ScheduleKind::Cosine,
        ScheduleKind::Sqrt,
    ];
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::TruncatedLinear => "trunclinear",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Sqrt => "sqrt",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "linear" => Ok(ScheduleKind::Linear),
            "trunclinear" | "truncl" | "truncatedlinear" => Ok(ScheduleKind::TruncatedLinear),
            "cosine" => Ok(ScheduleKind::Cosine),
            "sqrt" => Ok(ScheduleKind::Sqrt),
            _ => Err(Error::Validation(format!("unknown schedule {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub timesteps: usize,
}

impl ScheduleSpec {
    pub fn new(kind: ScheduleKind, timesteps: usize) -> Self {
        Self { kind, timesteps }
    }
}

/// Precomputed per-step coefficients. Arrays are indexed by `t - 1`.
#[derive(Clone, Debug)]
pub struct ScheduleTable {
    spec: ScheduleSpec,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
}

/// Coefficients of the Gaussian `q(y_prev | y_t, y0)`:
/// mean `= y0_coef * y0 + yt_coef * y_t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoefs {
    pub y0_coef: f64,
    pub yt_coef: f64,
    pub variance: f64,
}

fn truncated_linear_curve(t: f64, total: f64) -> f64 {
    let half = total / 2.0;
    if t <= half {
        1.0 - (1.0 - TRUNC_LINEAR_KNEE) * t / half
    } else {
        TRUNC_LINEAR_KNEE - (TRUNC_LINEAR_KNEE - TRUNC_LINEAR_END) * (t - half) / (total - half)
    }
}

/// Unnormalized cosine curve; `alpha_bar(t) = f(t) / f(0)`.
pub fn cosine_curve(t: f64, total: f64) -> f64 {
    let x = ((t / total + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * std::f64::consts::FRAC_PI_2;
    x.cos().powi(2)
}

fn curve(kind: ScheduleKind, t: usize, total: usize) -> f64 {
    if t == 0 {
        return 1.0;
    }
    let (t, total) = (t as f64, total as f64);
    let v = match kind {
        ScheduleKind::TruncatedLinear => truncated_linear_curve(t, total),
        ScheduleKind::Cosine => cosine_curve(t, total) / cosine_curve(0.0, total),
        ScheduleKind::Sqrt => 1.0 - (t / total + SQRT_OFFSET).sqrt(),
        ScheduleKind::Linear => unreachable!("linear is defined through beta"),
    };
    v.clamp(0.0, 1.0)
}

fn betas(spec: ScheduleSpec) -> Vec<f64> {
    let t_max = spec.timesteps;
    match spec.kind {
        ScheduleKind::Linear => {
            let scale = 1000.0 / t_max as f64;
            let (start, end) = (scale * LINEAR_BETA_START, scale * LINEAR_BETA_END);
            (0..t_max)
                .map(|i| {
                    if t_max == 1 {
                        start
                    } else {
                        start + (end - start) * i as f64 / (t_max - 1) as f64
                    }
                })
                .collect()
        }
        kind => (1..=t_max)
            .map(|t| {
                let prev = curve(kind, t - 1, t_max);
                if prev <= 0.0 {
                    MAX_BETA
                } else {
                    (1.0 - curve(kind, t, t_max) / prev).min(MAX_BETA)
                }
            })
            .collect(),
    }
}

impl ScheduleTable {
    pub fn build(spec: ScheduleSpec) -> Result<Self> {
        if spec.timesteps == 0 || spec.timesteps > 10_000 {
            return Err(Error::Validation(format!(
                "timesteps must be in 1..=10000, got {}",
                spec.timesteps
            )));
        }
        Self::from_betas(spec, betas(spec))
    }

    fn from_betas(spec: ScheduleSpec, beta: Vec<f64>) -> Result<Self> {
        if let Some((i, b)) = beta.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Validation(format!(
                "{} schedule with T={} has beta_{} = {b}, outside (0, 1)",
                spec.kind,
                spec.timesteps,
                i + 1
            )));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        if let Some(t) = (1..alpha_bar.len()).find(|&i| alpha_bar[i] >= alpha_bar[i - 1]) {
            return Err(Error::Validation(format!(
                "{} schedule with T={}: alpha_bar not strictly decreasing at t={}",
                spec.kind,
                spec.timesteps,
                t + 1
            )));
        }
        let beta_tilde = (0..beta.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
            })
            .collect();
        Ok(Self {
            spec,
            beta,
            alpha,
            alpha_bar,
            beta_tilde,
        })
    }

    /// Effective schedule over an ascending subsequence of timesteps, with
    /// `alpha'_j = alpha_bar(t_j) / alpha_bar(t_{j-1})`. Used for strided
    /// sampling; `timesteps` must be strictly ascending within `1..=T`.
    pub fn subsequence(&self, timesteps: &[usize]) -> Result<Self> {
        let mut prev_t = 0;
        let mut beta = Vec::with_capacity(timesteps.len());
        for &t in timesteps {
            self.check_t(t)?;
            if t <= prev_t {
                return Err(Error::Contract(format!(
                    "subsequence timesteps must be strictly ascending, got {timesteps:?}"
                )));
            }
            beta.push(1.0 - self.alpha_bar(t) / self.alpha_bar(prev_t));
            prev_t = t;
        }
        Self::from_betas(ScheduleSpec::new(self.spec.kind, timesteps.len()), beta)
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn timesteps(&self) -> usize {
        self.spec.timesteps
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.spec.timesteps {
            Err(Error::Index(format!("timestep {t} outside 1..={}", self.spec.timesteps)))
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta_tildes(&self) -> &[f64] {
        &self.beta_tilde
    }

    /// Posterior coefficients for stepping from `t` to `t - 1`.
    pub fn posterior_coefs(&self, t: usize) -> Result<PosteriorCoefs> {
        self.check_t(t)?;
        if t < 2 {
            return Err(Error::Contract(
                "posterior is defined for t >= 2; the final step returns the y0 estimate".into(),
            ));
        }
        let (ab, ab_prev) = (self.alpha_bar(t), self.alpha_bar(t - 1));
        let denom = 1.0 - ab;
        Ok(PosteriorCoefs {
            y0_coef: ab_prev.sqrt() * self.beta(t) / denom,
            yt_coef: self.alpha(t).sqrt() * (1.0 - ab_prev) / denom,
            variance: self.beta_tilde(t),
        })
    }

    /// `y_t = sqrt(alpha_bar_t) * y0 + sqrt(1 - alpha_bar_t) * eps`.
    pub fn q_sample(&self, y0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        same_len("q_sample", y0, eps)?;
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(y0.iter().zip(eps).map(|(y, e)| a * y + b * e).collect())
    }

    /// One forward transition `q(y_t | y_{t-1})`.
    pub fn q_step(&self, y_prev: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        same_len("q_step", y_prev, eps)?;
        let b = self.beta(t);
        let (a, s) = ((1.0 - b).sqrt(), b.sqrt());
        Ok(y_prev.iter().zip(eps).map(|(y, e)| a * y + s * e).collect())
    }

    /// Mean and variance of `q(y_{t-1} | y_t, y0)`, for `t >= 2`.
    pub fn posterior(&self, y_t: &[f64], y0: &[f64], t: usize) -> Result<(Vec<f64>, f64)> {
        same_len("posterior", y_t, y0)?;
        let c = self.posterior_coefs(t)?;
        let mean = y0.iter().zip(y_t).map(|(a, b)| c.y0_coef * a + c.yt_coef * b).collect();
        Ok((mean, c.variance))
    }

    /// Inverts the forward marginal given the noise:
    /// `y0 = (y_t - sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_bar_t)`.
    pub fn reconstruct_y0(&self, y_t: &[f64], eps_hat: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check_t(t)?;
        same_len("reconstruct_y0", y_t, eps_hat)?;
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(y_t.iter().zip(eps_hat).map(|(y, e)| (y - b * e) / a).collect())
    }
}

/// Names of the structural invariants `table` violates: betas in (0, 1),
/// strictly decreasing `alpha_bar`, `alpha_bar(T) < 0.01`, `beta_tilde < beta`
/// for t >= 2, and for the truncated linear kind, more decay in the first
/// half than in the second. Empty when all hold.
pub fn invariant_violations(table: &ScheduleTable) -> Vec<String> {
    let mut out = Vec::new();
    let spec = table.spec();
    let total = spec.timesteps;
    if !table.betas().iter().all(|&b| b > 0.0 && b < 1.0) {
        out.push("beta outside (0, 1)".to_string());
    }
    if !table.alpha_bars().windows(2).all(|w| w[1] < w[0]) {
        out.push("alpha_bar not strictly decreasing".to_string());
    }
    if !(table.alpha_bar(total) < 0.01) {
        out.push(format!("alpha_bar(T) = {} is not below 0.01", table.alpha_bar(total)));
    }
    if let Some(t) = (2..=total).find(|&t| !(table.beta_tilde(t) < table.beta(t))) {
        out.push(format!("beta_tilde >= beta at t={t}"));
    }
    if spec.kind == ScheduleKind::TruncatedLinear && total >= 2 {
        let early = table.alpha_bar(1) - table.alpha_bar(total / 2);
        let late = table.alpha_bar(total / 2) - table.alpha_bar(total);
        if !(early > late) {
            out.push(format!("not fast-then-slow: first half {early}, second half {late}"));
        }
    }
    out
}

fn same_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::shape(op, &[a.len()], &[b.len()]))
    }
}

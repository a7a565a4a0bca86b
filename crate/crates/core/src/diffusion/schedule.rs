use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::Tensor;

pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 0.02;
pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::invalid(format!("unknown schedule `{other}` (linear or cosine)"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        })
    }
}

/// Per-step noise coefficients. Timesteps are 1-based: entry `t - 1` of each
/// array belongs to step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sqrt_alpha_bar: Vec<f64>,
    pub sqrt_one_minus_alpha_bar: Vec<f64>,
    /// Reverse-step standard deviation, `sqrt(beta_t)`.
    pub sigma: Vec<f64>,
    /// Coefficients of `x0` and `x_t` in the mean of `q(x_{t-1} | x_t, x0)`.
    pub posterior_coef_x0: Vec<f64>,
    pub posterior_coef_xt: Vec<f64>,
}

fn cosine_f(t: f64, steps: f64) -> f64 {
    let u = (t / steps + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
    u.cos().powi(2)
}

pub fn make_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear if steps == 1 => vec![LINEAR_BETA_START],
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                let f = i as f64 / (steps - 1) as f64;
                LINEAR_BETA_START * (1.0 - f) + LINEAR_BETA_END * f
            })
            .collect(),
        ScheduleKind::Cosine => {
            let n = steps as f64;
            (1..=steps)
                .map(|t| {
                    let b = 1.0 - cosine_f(t as f64, n) / cosine_f(t as f64 - 1.0, n);
                    b.min(MAX_BETA)
                })
                .collect()
        }
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar: Vec<f64> = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    let prev = |i: usize| if i == 0 { 1.0 } else { alpha_bar[i - 1] };
    let posterior_coef_x0 = (0..steps)
        .map(|i| prev(i).sqrt() * beta[i] / (1.0 - alpha_bar[i]))
        .collect();
    let posterior_coef_xt = (0..steps)
        .map(|i| alpha[i].sqrt() * (1.0 - prev(i)) / (1.0 - alpha_bar[i]))
        .collect();
    Ok(NoiseSchedule {
        kind,
        posterior_coef_x0,
        posterior_coef_xt,
        sqrt_alpha_bar: alpha_bar.iter().map(|a| a.sqrt()).collect(),
        sqrt_one_minus_alpha_bar: alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect(),
        sigma: beta.iter().map(|b| b.sqrt()).collect(),
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::OutOfRange {
                what: "timestep (1-based)",
                index: t,
                size: self.steps(),
            });
        }
        Ok(t - 1)
    }

    pub fn snr(&self, t: usize) -> Result<f64> {
        let i = self.check_t(t)?;
        Ok(self.alpha_bar[i] / (1.0 - self.alpha_bar[i]))
    }

    /// Loss weight `(k + SNR_t)^(-gamma)`.
    pub fn p2_weight(&self, t: usize, k: f64, gamma: f64) -> Result<f64> {
        Ok((k + self.snr(t)?).powf(-gamma))
    }
}

fn per_item_t(x: &Tensor, t: &[usize]) -> Result<usize> {
    let b = x.shape().first().copied().unwrap_or(0);
    if t.len() != b {
        return Err(Error::shape("timesteps", format!("{} timesteps for batch of {b}", t.len())));
    }
    Ok(if b == 0 { 0 } else { x.len() / b })
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Closed-form corruption `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`,
/// with one timestep per batch item.
pub fn q_sample(x0: &Tensor, t: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape("q_sample", x0, eps)?;
    let per = per_item_t(x0, t)?;
    let mut out = Vec::with_capacity(x0.len());
    for (bi, &tb) in t.iter().enumerate() {
        let i = sched.check_t(tb)?;
        let (a, s) = (sched.sqrt_alpha_bar[i], sched.sqrt_one_minus_alpha_bar[i]);
        let r = bi * per..(bi + 1) * per;
        out.extend(x0.data()[r.clone()].iter().zip(&eps.data()[r]).map(|(x, e)| a * x + s * e));
    }
    Tensor::new(x0.shape(), out)
}

/// Reverse-step mean `(x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)`.
pub fn mu_theta(x_t: &Tensor, t: &[usize], eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape("mu_theta", x_t, eps_hat)?;
    let per = per_item_t(x_t, t)?;
    let mut out = Vec::with_capacity(x_t.len());
    for (bi, &tb) in t.iter().enumerate() {
        let i = sched.check_t(tb)?;
        let inv = 1.0 / sched.alpha[i].sqrt();
        let c = sched.beta[i] / sched.sqrt_one_minus_alpha_bar[i];
        let r = bi * per..(bi + 1) * per;
        out.extend(x_t.data()[r.clone()].iter().zip(&eps_hat.data()[r]).map(|(x, e)| inv * (x - c * e)));
    }
    Tensor::new(x_t.shape(), out)
}

/// Clean-image estimate `(x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`,
/// clipped to `[-1, 1]`.
pub fn predict_x0(x_t: &Tensor, t: &[usize], eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape("predict_x0", x_t, eps_hat)?;
    let per = per_item_t(x_t, t)?;
    let mut out = Vec::with_capacity(x_t.len());
    for (bi, &tb) in t.iter().enumerate() {
        let i = sched.check_t(tb)?;
        let (a, s) = (sched.sqrt_alpha_bar[i], sched.sqrt_one_minus_alpha_bar[i]);
        let r = bi * per..(bi + 1) * per;
        out.extend(
            x_t.data()[r.clone()]
                .iter()
                .zip(&eps_hat.data()[r])
                .map(|(x, e)| ((x - s * e) / a).clamp(-1.0, 1.0)),
        );
    }
    Tensor::new(x_t.shape(), out)
}

/// Mean of `q(x_{t-1} | x_t, x0)` for a given clean-image estimate.
pub fn posterior_mean(x_t: &Tensor, t: &[usize], x0: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape("posterior_mean", x_t, x0)?;
    let per = per_item_t(x_t, t)?;
    let mut out = Vec::with_capacity(x_t.len());
    for (bi, &tb) in t.iter().enumerate() {
        let i = sched.check_t(tb)?;
        let (a, b) = (sched.posterior_coef_x0[i], sched.posterior_coef_xt[i]);
        let r = bi * per..(bi + 1) * per;
        out.extend(x0.data()[r.clone()].iter().zip(&x_t.data()[r]).map(|(p, x)| a * p + b * x));
    }
    Tensor::new(x_t.shape(), out)
}

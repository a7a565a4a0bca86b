use rand_distr::{Distribution, StandardNormal};

use super::schedule::{mu_theta, posterior_mean, predict_x0, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nnet::{Denoiser, ModelParams, Tensor};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleOptions {
    /// Images denoised together per model call.
    pub chunk: usize,
    /// Form the reverse mean from the clean-image estimate clipped to
    /// `[-1, 1]` instead of from `ε̂` directly. Without clipping the two are
    /// the same quantity.
    pub clip_x0: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            chunk: 100,
            clip_x0: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// `[n, H, W, C]` in `[-1, 1]`.
    pub images: Tensor,
    pub circuit_evals: u64,
}

/// Ancestral sampling with `Σ = β_t I`. Sample `i` draws all of its noise
/// from its own stream of `seed`, so results do not depend on `chunk`.
pub fn ddpm_sample(
    model: &Denoiser,
    params: &ModelParams,
    sched: &NoiseSchedule,
    labels: &[usize],
    seed: u64,
    opts: SampleOptions,
) -> Result<SampleOutput> {
    ddpm_sample_with_progress(model, params, sched, labels, seed, opts, |_| {})
}

/// As [`ddpm_sample`], calling `progress(done)` after each finished chunk.
pub fn ddpm_sample_with_progress(
    model: &Denoiser,
    params: &ModelParams,
    sched: &NoiseSchedule,
    labels: &[usize],
    seed: u64,
    opts: SampleOptions,
    mut progress: impl FnMut(usize),
) -> Result<SampleOutput> {
    model.check_params(params)?;
    if sched.steps() != model.timesteps() {
        return Err(Error::config(
            "schedule.timesteps",
            format!("schedule has {} steps, checkpoint model embeds {}", sched.steps(), model.timesteps()),
        ));
    }
    let cfg = model.config();
    if let Some(&bad) = labels.iter().find(|&&y| y >= cfg.num_classes) {
        return Err(Error::OutOfRange {
            what: "class labels",
            index: bad,
            size: cfg.num_classes,
        });
    }
    let per = cfg.image_size * cfg.image_size * cfg.in_channels;
    let mut images = Vec::with_capacity(labels.len() * per);
    let mut evals = 0;
    let chunk = opts.chunk.max(1);
    for (c, ys) in labels.chunks(chunk).enumerate() {
        let first = c * chunk;
        let n = ys.len();
        let shape = [n, cfg.image_size, cfg.image_size, cfg.in_channels];
        let mut rngs: Vec<_> = (0..n).map(|i| stream(seed, Purpose::Sample, (first + i) as u64)).collect();
        let mut x = Vec::with_capacity(n * per);
        for rng in &mut rngs {
            x.extend((0..per).map(|_| -> f64 { StandardNormal.sample(rng) }));
        }
        let mut x = Tensor::new(&shape, x)?;
        let mut x0_hat: Option<Tensor> = cfg.self_condition.then(|| Tensor::zeros(&shape));
        for t in (1..=sched.steps()).rev() {
            let ts = vec![t; n];
            let (eps_hat, k) = model.predict(params, &x, &ts, ys, x0_hat.as_ref())?;
            evals += k;
            let estimate = if cfg.self_condition || opts.clip_x0 {
                Some(predict_x0(&x, &ts, &eps_hat, sched)?)
            } else {
                None
            };
            let mut mu = match (&estimate, opts.clip_x0) {
                (Some(x0), true) => posterior_mean(&x, &ts, x0, sched)?,
                _ => mu_theta(&x, &ts, &eps_hat, sched)?,
            };
            if cfg.self_condition {
                x0_hat = estimate;
            }
            if t > 1 {
                let sigma = sched.sigma[t - 1];
                for (i, rng) in rngs.iter_mut().enumerate() {
                    for v in &mut mu.data_mut()[i * per..(i + 1) * per] {
                        let z: f64 = StandardNormal.sample(rng);
                        *v += sigma * z;
                    }
                }
            }
            if !mu.all_finite() {
                return Err(Error::Numerical(format!("sampler diverged at step {t}")));
            }
            x = mu;
        }
        images.extend(x.data().iter().map(|v| v.clamp(-1.0, 1.0)));
        progress(first + n);
    }
    Ok(SampleOutput {
        images: Tensor::new(&[labels.len(), cfg.image_size, cfg.image_size, cfg.in_channels], images)?,
        circuit_evals: evals,
    })
}

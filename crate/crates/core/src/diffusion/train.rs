use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::schedule::{predict_x0, q_sample, NoiseSchedule};
use crate::data::{batch_for_step, Dataset};
use crate::error::{Error, Result};
use crate::nnet::{Binder, Checkpoint, Denoiser, Graph, ModelParams, ParamGrads, Tensor};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Only used when the model takes a self-conditioning input.
    pub self_cond_prob: f64,
    pub p2_gamma: f64,
    pub p2_k: f64,
    pub total_steps: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            batch_size: 32,
            learning_rate: adam.lr,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            self_cond_prob: 0.5,
            p2_gamma: 1.0,
            p2_k: 1.0,
            total_steps: 2000,
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.self_cond_prob) {
            return Err(Error::config("train.self_cond_prob", "must lie in [0, 1]"));
        }
        if !(self.p2_gamma >= 0.0 && self.p2_gamma.is_finite()) {
            return Err(Error::config("train.p2_gamma", "must be non-negative"));
        }
        if !(self.p2_k > 0.0 && self.p2_k.is_finite()) {
            return Err(Error::config("train.p2_k", "must be positive"));
        }
        self.adam().validate()
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: ParamGrads,
    pub circuit_evals: u64,
}

/// Draws per-item timesteps uniform in `[1, T]` and standard normal noise
/// shaped like `x0`.
pub fn draw_corruption<R: Rng + ?Sized>(rng: &mut R, x0: &Tensor, steps: usize) -> Result<(Vec<usize>, Tensor)> {
    let b = x0.shape().first().copied().unwrap_or(0);
    let t: Vec<usize> = (0..b).map(|_| rng.random_range(1..=steps)).collect();
    let eps: Vec<f64> = (0..x0.len()).map(|_| StandardNormal.sample(rng)).collect();
    Ok((t, Tensor::new(x0.shape(), eps)?))
}

/// p2-weighted noise-prediction loss and its gradients for one batch.
pub fn loss_simple<R: Rng + ?Sized>(
    model: &Denoiser,
    params: &ModelParams,
    cfg: &TrainConfig,
    x0: &Tensor,
    y: &[usize],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<LossOutput> {
    let (t, eps) = draw_corruption(rng, x0, sched.steps())?;
    let x_t = q_sample(x0, &t, &eps, sched)?;
    let mut evals = 0;
    let self_cond = if model.config().self_condition && rng.random::<f64>() < cfg.self_cond_prob {
        let (eps_hat, n) = model.predict(params, &x_t, &t, y, None)?;
        evals += n;
        Some(predict_x0(&x_t, &t, &eps_hat, sched)?)
    } else {
        None
    };
    let weights = t
        .iter()
        .map(|&s| sched.p2_weight(s, cfg.p2_k, cfg.p2_gamma))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new();
    let mut b = Binder::new(params);
    let pred = model.forward(&mut g, &mut b, &x_t, &t, y, self_cond.as_ref())?;
    let loss = g.weighted_sq_err(pred, &eps, &weights)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss is {value} (timesteps {t:?})")));
    }
    let grads = g.backward(loss)?;
    evals += g.circuit_evals();
    Ok(LossOutput {
        loss: value,
        grads: b.collect(&grads),
        circuit_evals: evals,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// Number of completed optimizer steps.
    pub step: u64,
    pub loss: f64,
    /// Seconds of training since step 0, carried across resumes.
    pub wall_time: f64,
    /// Circuit evaluations since step 0, carried across resumes.
    pub circuit_evals: u64,
}

pub const LOG_HEADER: &str = "step\tloss\twall_time_s\tcircuit_evals";

impl StepRecord {
    pub fn tsv(&self) -> String {
        format!("{}\t{:e}\t{:.3}\t{}", self.step, self.loss, self.wall_time, self.circuit_evals)
    }
}

/// Stateful training loop. All randomness of step `k` derives from
/// `(seed, k)`, so a run resumed from a checkpoint continues bit-for-bit.
pub struct Trainer<'a> {
    model: &'a Denoiser,
    sched: &'a NoiseSchedule,
    data: &'a Dataset,
    train_idx: Vec<usize>,
    cfg: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    step: u64,
    wall_time: f64,
    circuit_evals: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &'a Denoiser,
        sched: &'a NoiseSchedule,
        data: &'a Dataset,
        train_idx: Vec<usize>,
        cfg: TrainConfig,
        params: ModelParams,
    ) -> Result<Self> {
        cfg.validate()?;
        model.check_params(&params)?;
        if sched.steps() != model.timesteps() {
            return Err(Error::config(
                "schedule.timesteps",
                format!("schedule has {} steps, model embeds {}", sched.steps(), model.timesteps()),
            ));
        }
        if train_idx.is_empty() {
            return Err(Error::invalid("training split is empty"));
        }
        if data.image_size != model.config().image_size {
            return Err(Error::config(
                "model.image_size",
                format!("model is {0}x{0}, data is {1}x{1}", model.config().image_size, data.image_size),
            ));
        }
        if data.num_classes() != model.config().num_classes {
            return Err(Error::config(
                "model.num_classes",
                format!("model has {}, data has {}", model.config().num_classes, data.num_classes()),
            ));
        }
        Ok(Self {
            model,
            sched,
            data,
            train_idx,
            cfg,
            params,
            adam: AdamState::default(),
            step: 0,
            wall_time: 0.0,
            circuit_evals: 0,
        })
    }

    /// Restores parameters, optimizer moments and counters.
    pub fn resume(&mut self, ck: &Checkpoint) -> Result<()> {
        self.model.check_params(&ck.params)?;
        if ck.seed != self.cfg.seed {
            return Err(Error::config(
                "train.seed",
                format!("checkpoint was trained with seed {}, config has {}", ck.seed, self.cfg.seed),
            ));
        }
        self.params = ck.params.clone();
        self.adam = AdamState::from_tensors(&ck.state)?;
        self.step = ck.step;
        let meta = |k: &str| ck.meta.get(k).and_then(|v| v.parse::<f64>().ok());
        self.wall_time = meta("wall_time_s").unwrap_or(0.0);
        self.circuit_evals = meta("circuit_evals").map_or(0, |v| v as u64);
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let start = Instant::now();
        let seed = self.cfg.seed;
        let idx = batch_for_step(&self.train_idx, self.cfg.batch_size, seed, self.step);
        let (x0, y) = self.data.batch(&idx)?;
        let mut rng = stream(seed, Purpose::TrainStep, self.step);
        let out = loss_simple(self.model, &self.params, &self.cfg, &x0, &y, self.sched, &mut rng)
            .map_err(|e| annotate(e, self.step + 1))?;
        adam_step(&mut self.params, &out.grads, &mut self.adam, &self.cfg.adam()).map_err(|e| annotate(e, self.step + 1))?;
        self.step += 1;
        self.circuit_evals += out.circuit_evals;
        self.wall_time += start.elapsed().as_secs_f64();
        Ok(StepRecord {
            step: self.step,
            loss: out.loss,
            wall_time: self.wall_time,
            circuit_evals: self.circuit_evals,
        })
    }

    pub fn checkpoint(&self, config_echo: &str) -> Checkpoint {
        let mut ck = Checkpoint {
            config: config_echo.to_string(),
            seed: self.cfg.seed,
            step: self.step,
            params: self.params.clone(),
            state: self.adam.to_tensors(),
            ..Checkpoint::default()
        };
        ck.meta.insert("wall_time_s".into(), format!("{}", self.wall_time));
        ck.meta.insert("circuit_evals".into(), self.circuit_evals.to_string());
        ck
    }
}

fn annotate(e: Error, step: u64) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("step {step}: {m}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_toy_dataset;
    use crate::diffusion::schedule::{make_schedule, ScheduleKind};
    use crate::nnet::DenoiserConfig;
    use crate::quanv::{BottleneckConfig, QuanvConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(self_condition: bool) -> (Denoiser, NoiseSchedule) {
        let cfg = DenoiserConfig {
            image_size: 4,
            base_channels: 6,
            channel_multipliers: vec![1],
            res_blocks_per_level: 1,
            time_embed_dim: 8,
            num_classes: 4,
            self_condition,
            ..DenoiserConfig::default()
        };
        let m = Denoiser::new(cfg, QuanvConfig::default(), BottleneckConfig::default(), 50).unwrap();
        (m, make_schedule(ScheduleKind::Cosine, 50).unwrap())
    }

    #[test]
    fn zero_model_loss_is_weighted_noise_energy() {
        let (m, s) = tiny(false);
        let params = m.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let d = make_toy_dataset(8, 4, 4, 1).unwrap();
        let (x0, y) = d.batch(&(0..32).collect::<Vec<_>>()).unwrap();
        let cfg = TrainConfig::default();
        let out = loss_simple(&m, &params, &cfg, &x0, &y, &s, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        // the output conv starts at zero, so eps_hat = 0
        let (t, eps) = draw_corruption(&mut ChaCha8Rng::seed_from_u64(5), &x0, 50).unwrap();
        let per = eps.len() / 32;
        let want: f64 = t
            .iter()
            .enumerate()
            .map(|(b, &tb)| {
                let e2: f64 = eps.data()[b * per..(b + 1) * per].iter().map(|v| v * v).sum();
                s.p2_weight(tb, 1.0, 1.0).unwrap() * e2
            })
            .sum::<f64>()
            / 32.0;
        assert!((out.loss - want).abs() < 1e-10 * want);
        assert_eq!(out.circuit_evals, 0);
    }

    #[test]
    fn zero_model_loss_expectation() {
        let (m, s) = tiny(false);
        let params = m.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let x0 = Tensor::zeros(&[64, 4, 4, 3]);
        let y = vec![0; 64];
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rounds = 40;
        let mean: f64 = (0..rounds)
            .map(|_| loss_simple(&m, &params, &cfg, &x0, &y, &s, &mut rng).unwrap().loss)
            .sum::<f64>()
            / rounds as f64;
        let mean_w: f64 = (1..=50).map(|t| s.p2_weight(t, 1.0, 1.0).unwrap()).sum::<f64>() / 50.0;
        let want = mean_w * 48.0;
        assert!((mean - want).abs() < 0.05 * want, "{mean} vs {want}");
    }

    #[test]
    fn self_conditioning_runs_an_extra_forward() {
        let (m, s) = tiny(true);
        let params = m.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let x0 = Tensor::zeros(&[2, 4, 4, 3]);
        let cfg = TrainConfig {
            self_cond_prob: 1.0,
            ..TrainConfig::default()
        };
        let out = loss_simple(&m, &params, &cfg, &x0, &[0, 1], &s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(out.loss > 0.0);
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let (m, s) = tiny(false);
        let d = make_toy_dataset(4, 4, 4, 1).unwrap();
        let idx: Vec<usize> = (0..d.len()).collect();
        let cfg = TrainConfig {
            batch_size: 5,
            seed: 9,
            ..TrainConfig::default()
        };
        let p0 = m.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        let mut full = Trainer::new(&m, &s, &d, idx.clone(), cfg.clone(), p0.clone()).unwrap();
        let losses: Vec<f64> = (0..6).map(|_| full.step().unwrap().loss).collect();

        let mut first = Trainer::new(&m, &s, &d, idx.clone(), cfg.clone(), p0.clone()).unwrap();
        for _ in 0..3 {
            first.step().unwrap();
        }
        let bytes = first.checkpoint("x = 1\n").to_bytes().unwrap();
        let ck = Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        let mut second = Trainer::new(&m, &s, &d, idx, cfg, p0).unwrap();
        second.resume(&ck).unwrap();
        let tail: Vec<f64> = (0..3).map(|_| second.step().unwrap().loss).collect();
        assert_eq!(tail, losses[3..]);
        assert_eq!(second.params, full.params);
        assert_eq!(second.adam, full.adam);
    }

    #[test]
    fn mismatched_parameters_are_rejected() {
        let (m, s) = tiny(false);
        let (other, _) = tiny(true);
        let d = make_toy_dataset(2, 4, 4, 1).unwrap();
        let p = other.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        assert!(Trainer::new(&m, &s, &d, vec![0, 1], TrainConfig::default(), p).is_err());
    }

    #[test]
    fn log_line_is_tab_separated() {
        let r = StepRecord {
            step: 3,
            loss: 0.5,
            wall_time: 1.25,
            circuit_evals: 10,
        };
        assert_eq!(r.tsv().split('\t').count(), LOG_HEADER.split('\t').count());
        assert_eq!(r.tsv(), "3\t5e-1\t1.250\t10");
    }
}

//! Denoiser training: the binary cross entropy objective
//! L = BCE(eps(z_t, t), z_t XOR z_0) over jump-noised latents, with Adam or
//! plain SGD on the flat parameter vector.

use crate::denoiser::{ConvDenoiser, Denoiser};
use crate::diffusion::forward_jump;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;
use crate::tensor::{BitTensor, ProbTensor};
use std::fmt;

/// Stream label for the training loop under a user seed.
pub const STREAM_TRAIN: u64 = 0x7261;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizerKind::Adam => write!(f, "adam"),
            OptimizerKind::Sgd => write!(f, "sgd"),
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Emit a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            iterations: 1,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidRange("learning rate must be > 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidRange("batch size must be >= 1".into()));
        }
        if self.iterations < 1 {
            return Err(Error::InvalidRange("iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Optimizer state over a flat parameter vector.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, step: u64, beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, param_count: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                m: vec![0.0; param_count],
                v: vec![0.0; param_count],
                step: 0,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { m, v, step, beta1, beta2, eps } => {
                *step += 1;
                let b1 = *beta1;
                let b2 = *beta2;
                let bc1 = 1.0 - b1.powi(*step as i32);
                let bc2 = 1.0 - b2.powi(*step as i32);
                for i in 0..params.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * grads[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * grads[i] * grads[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + *eps);
                }
            }
        }
    }
}

/// Mean binary cross entropy of predictions against binary targets.
pub fn bce_mean(pred: &ProbTensor, target: &BitTensor) -> Result<f64> {
    if pred.dims() != target.dims() {
        return Err(Error::ShapeMismatch(format!(
            "bce: prediction {} vs target {}",
            pred.dims(),
            target.dims()
        )));
    }
    let n = pred.dims().len() as f64;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| if y == 1 { -p.ln() } else { -(1.0 - p).ln() })
        .sum();
    Ok(sum / n)
}

/// Diffusion loss for any denoiser: noise z_0 to time t with the closed-form
/// jump, target the realized flip pattern, score with mean BCE.
pub fn diffusion_loss_value(
    denoiser: &dyn Denoiser,
    z0: &BitTensor,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<f64> {
    let z_t = forward_jump(z0, t, schedule, rng)?;
    let target = z_t.xor(z0)?;
    let pred = denoiser.predict(&z_t, t)?;
    bce_mean(&pred, &target)
}

/// Diffusion loss plus parameter gradients for the trainable denoiser.
pub fn diffusion_loss(
    denoiser: &ConvDenoiser,
    z0: &BitTensor,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<(f64, Vec<f64>)> {
    let z_t = forward_jump(z0, t, schedule, rng)?;
    let target = z_t.xor(z0)?;
    // dL/dp = (p - y) / (p (1 - p)) / n; the sigmoid backward inside the
    // network multiplies by p (1 - p), recovering the stable (p - y) / n.
    let n = z0.dims().len() as f64;
    let pred_probe = denoiser.predict(&z_t, t)?;
    let upstream: Vec<f64> = pred_probe
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| (p - f64::from(y)) / (p * (1.0 - p)) / n)
        .collect();
    let (pred, grads) = denoiser.predict_with_gradients(&z_t, t, &upstream)?;
    let loss = bce_mean(&pred, &target)?;
    Ok((loss, grads))
}

/// Incremental trainer so callers can interleave checkpointing without
/// perturbing the rng schedule: iteration draws are keyed by the absolute
/// iteration index.
pub struct DiffusionTrainer {
    config: TrainConfig,
    optimizer: Optimizer,
    iteration: usize,
    root: RngStream,
}

impl DiffusionTrainer {
    pub fn new(config: TrainConfig, param_count: usize) -> Result<Self> {
        config.validate()?;
        let optimizer = Optimizer::new(config.optimizer, param_count);
        let root = RngStream::with_stream(config.seed, STREAM_TRAIN);
        Ok(Self { config, optimizer, iteration: 0, root })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Run `iterations` optimizer steps, returning the per-iteration mean
    /// batch losses.
    pub fn run(
        &mut self,
        dataset: &[BitTensor],
        denoiser: &mut ConvDenoiser,
        schedule: &NoiseSchedule,
        iterations: usize,
    ) -> Result<Vec<f64>> {
        validate_dataset(dataset, denoiser)?;
        let n = dataset.len() as u64;
        let t_count = schedule.timesteps() as u64;
        let mut history = Vec::with_capacity(iterations);
        let mut grads = vec![0.0; denoiser.params().len()];
        for _ in 0..iterations {
            let iter_rng = self.root.derive(self.iteration as u64);
            grads.fill(0.0);
            let mut loss_sum = 0.0;
            for slot in 0..self.config.batch_size {
                let mut item_rng = iter_rng.derive(slot as u64);
                let idx = item_rng.next_below(n) as usize;
                let t = 1 + item_rng.next_below(t_count) as usize;
                let (loss, g) = diffusion_loss(denoiser, &dataset[idx], t, schedule, &mut item_rng)?;
                loss_sum += loss;
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    *acc += gi;
                }
            }
            let scale = 1.0 / self.config.batch_size as f64;
            for g in grads.iter_mut() {
                *g *= scale;
            }
            self.optimizer.step(denoiser.params_mut(), &grads, self.config.learning_rate);
            history.push(loss_sum * scale);
            self.iteration += 1;
        }
        Ok(history)
    }
}

fn validate_dataset(dataset: &[BitTensor], denoiser: &ConvDenoiser) -> Result<()> {
    let first = dataset.first().ok_or_else(|| Error::InvalidDataset("empty dataset".into()))?;
    if first.dims().c != denoiser.arch().in_channels {
        return Err(Error::InvalidDataset(format!(
            "latents have {} channels, network expects {}",
            first.dims().c,
            denoiser.arch().in_channels
        )));
    }
    for (i, item) in dataset.iter().enumerate() {
        if item.dims() != first.dims() {
            return Err(Error::InvalidDataset(format!(
                "latent {i} has dims {}, expected {}",
                item.dims(),
                first.dims()
            )));
        }
    }
    Ok(())
}

/// Train a denoiser on identically-shaped binary codes; returns the loss
/// history. Deterministic given `config.seed`.
pub fn train_diffusion(
    dataset: &[BitTensor],
    denoiser: &mut ConvDenoiser,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    let mut trainer = DiffusionTrainer::new(config.clone(), denoiser.params().len())?;
    trainer.run(dataset, denoiser, schedule, config.iterations)
}

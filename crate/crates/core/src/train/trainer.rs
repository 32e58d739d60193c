use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::config::parse_num;
use crate::model::Seq2SeqModel;
use crate::tensor::{Dropout, Tensor};

use super::data::Dataset;
use super::eval::{evaluate, Metrics};
use super::optim::{adam_step, clip_global_norm, learning_rate, AdamConfig, TrainState};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Total optimizer steps; training resumes from `TrainState::step`.
    pub steps: u64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub lr: f64,
    pub warmup: u64,
    /// Global gradient norm bound; 0 disables clipping.
    pub clip_norm: f64,
    /// Validation interval in steps; 0 disables validation.
    pub eval_every: u64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 8,
            grad_accum: 1,
            lr: 2e-3,
            warmup: 100,
            clip_norm: 1.0,
            eval_every: 200,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 11] = [
        "steps",
        "batch_size",
        "grad_accum",
        "lr",
        "warmup",
        "clip_norm",
        "eval_every",
        "seed",
        "beta1",
        "beta2",
        "adam_eps",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "steps" => self.steps = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "grad_accum" => self.grad_accum = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "warmup" => self.warmup = parse_num(key, value)?,
            "clip_norm" => self.clip_norm = parse_num(key, value)?,
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "beta1" => self.adam.beta1 = parse_num(key, value)?,
            "beta2" => self.adam.beta2 = parse_num(key, value)?,
            "adam_eps" => self.adam.eps = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown training key `{key}`"))),
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let values = [
            self.steps.to_string(),
            self.batch_size.to_string(),
            self.grad_accum.to_string(),
            format!("{:e}", self.lr),
            self.warmup.to_string(),
            format!("{:e}", self.clip_norm),
            self.eval_every.to_string(),
            self.seed.to_string(),
            format!("{:e}", self.adam.beta1),
            format!("{:e}", self.adam.beta2),
            format!("{:e}", self.adam.eps),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::Config("batch_size and grad_accum must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::Config("clip_norm must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainEvent {
    Step {
        step: u64,
        /// Mean loss per target token over the step.
        loss: f64,
        lr: f64,
        grad_norm: f64,
    },
    Eval {
        step: u64,
        metrics: Metrics,
        /// Token accuracy beat every earlier evaluation.
        improved: bool,
    },
}

impl TrainEvent {
    /// One `key=value` log line.
    pub fn log_line(&self) -> String {
        match self {
            TrainEvent::Step { step, loss, lr, grad_norm } => {
                format!("event=step step={step} loss={loss:.6} lr={lr:e} grad_norm={grad_norm:.6}")
            }
            TrainEvent::Eval { step, metrics, improved } => {
                format!("event=eval step={step} {metrics} improved={improved}")
            }
        }
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Example indices for a step. Each epoch is a seeded permutation of the data
/// and a global example counter walks through consecutive epochs, so the order
/// depends only on `(seed, step)` and resuming reproduces it.
pub fn batch_indices(seed: u64, n: usize, step: u64, count: usize) -> Vec<usize> {
    let start = (step - 1) * count as u64;
    let mut out = Vec::with_capacity(count);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for c in start..start + count as u64 {
        let epoch = c / n as u64;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch)));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[(c % n as u64) as usize]);
    }
    out
}

/// Gradient of the token-mean loss over `indices`, their summed loss and token count.
pub fn batch_gradients(
    model: &Seq2SeqModel,
    data: &Dataset,
    indices: &[usize],
    dropout_seed: Option<u64>,
) -> Result<(Vec<Tensor>, f64, usize)> {
    let mut sum: Vec<Tensor> = model.params().values().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut loss = 0.0;
    let mut tokens = 0;
    for (k, &i) in indices.iter().enumerate() {
        let e = data
            .examples
            .get(i)
            .ok_or_else(|| Error::Input(format!("example index {i} out of range")))?;
        let dropout = match dropout_seed {
            Some(s) if model.config().dropout > 0.0 => Dropout::new(model.config().dropout, mix(s, k as u64))?,
            _ => Dropout::disabled(),
        };
        let g = model.example_gradients(&e.src, &e.tgt, &dropout)?;
        loss += g.loss;
        tokens += g.tokens;
        for (acc, grad) in sum.iter_mut().zip(g.grads) {
            if let Some(grad) = grad {
                acc.data_mut().iter_mut().zip(grad.data()).for_each(|(a, b)| *a += b);
            }
        }
    }
    if tokens > 0 {
        let s = 1.0 / tokens as f64;
        sum.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
    }
    Ok((sum, loss, tokens))
}

/// Runs optimizer steps until `cfg.steps`, reporting through `observer`,
/// which also receives the model and state (for checkpointing). A non-finite
/// loss or gradient aborts with [`Error::NonFinite`] naming the operation.
pub fn train(
    model: &mut Seq2SeqModel,
    data: &Dataset,
    valid: Option<&Dataset>,
    cfg: &TrainConfig,
    mut state: TrainState,
    observer: &mut dyn FnMut(&Seq2SeqModel, &TrainState, &TrainEvent) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    state.check_matches(model.params())?;
    let per_step = cfg.batch_size * cfg.grad_accum;
    while state.step < cfg.steps {
        let step = state.step + 1;
        let indices = batch_indices(cfg.seed, data.len(), step, per_step);
        let (mut grads, loss, tokens) = batch_gradients(model, data, &indices, Some(mix(cfg.seed ^ 0x5eed, step)))?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "gradient accumulation".into() });
        }
        let bound = if cfg.clip_norm > 0.0 { cfg.clip_norm } else { f64::INFINITY };
        let grad_norm = clip_global_norm(&mut grads, bound);
        let lr = learning_rate(step, cfg.lr, cfg.warmup);
        adam_step(model.params_mut(), &grads, &mut state, lr, &cfg.adam)?;
        let event = TrainEvent::Step {
            step,
            loss: loss / tokens.max(1) as f64,
            lr,
            grad_norm,
        };
        observer(model, &state, &event)?;
        if let Some(valid) = valid {
            if cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps) {
                let metrics = evaluate(&*model, valid)?;
                let improved = state.best_metric.is_none_or(|b| metrics.token_accuracy > b);
                if improved {
                    state.best_metric = Some(metrics.token_accuracy);
                    state.best_step = step;
                }
                observer(model, &state, &TrainEvent::Eval { step, metrics, improved })?;
            }
        }
    }
    Ok(state)
}

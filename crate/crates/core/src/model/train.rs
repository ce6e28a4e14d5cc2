//! Gradient descent with optional momentum on a synthetic task.

use super::{ModelConfig, TinyModel};
use crate::error::{Error, Result};
use crate::seed::child_rng;
use crate::task::SyntheticTask;

/// Consecutive steps above `DIVERGENCE_FACTOR * initial` that abort a run.
const DIVERGENCE_WINDOW: usize = 100;
const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Rescale the gradient when its global norm exceeds this.
    pub clip_norm: Option<f64>,
    /// Linear warmup steps before the cosine decay to zero.
    pub warmup_steps: usize,
    pub cosine_decay: bool,
    /// Optional short-context first stage; counted within `steps`.
    pub curriculum: Option<Curriculum>,
    pub threads: usize,
}

/// Train the first `steps` steps at `length` before switching to the
/// model's training length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Curriculum {
    pub length: usize,
    pub steps: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.05,
            batch_size: 8,
            momentum: 0.9,
            clip_norm: Some(1.0),
            warmup_steps: 0,
            cosine_decay: false,
            curriculum: None,
            threads: 1,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if let Some(c) = self.curriculum {
            if c.length < 8 || c.steps >= self.steps {
                return Err(Error::Config(format!(
                    "curriculum needs length >= 8 and fewer than {} steps, got {c:?}",
                    self.steps
                )));
            }
        }
        if let Some(c) = self.clip_norm {
            if !c.is_finite() || c <= 0.0 {
                return Err(Error::Config(format!("clip_norm must be > 0, got {c}")));
            }
        }
        Ok(())
    }

    /// Sets `steps` so the main stage consumes `token_budget` tokens at
    /// `context_length`; curriculum steps come on top.
    pub fn with_token_budget(mut self, token_budget: usize, context_length: usize) -> Self {
        let warm = self.curriculum.map_or(0, |c| c.steps);
        self.steps = warm + steps_for_token_budget(token_budget, self.batch_size, context_length);
        self
    }

    /// Tokens consumed after the curriculum stage.
    pub fn main_stage_tokens(&self, context_length: usize) -> usize {
        let warm = self.curriculum.map_or(0, |c| c.steps);
        (self.steps - warm) * self.batch_size * context_length
    }

    fn length_at(&self, step: usize, context_length: usize) -> usize {
        match self.curriculum {
            Some(c) if step < c.steps => c.length,
            _ => context_length,
        }
    }

    fn rate_at(&self, step: usize) -> f64 {
        let base = self.learning_rate;
        if step < self.warmup_steps {
            return base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if !self.cosine_decay {
            return base;
        }
        let span = (self.steps - self.warmup_steps).max(1) as f64;
        let t = (step - self.warmup_steps) as f64 / span;
        0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Steps that keep `steps * batch_size * context_length` at `token_budget`
/// (rounded down, at least one).
pub fn steps_for_token_budget(token_budget: usize, batch_size: usize, context_length: usize) -> usize {
    (token_budget / (batch_size * context_length).max(1)).max(1)
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: TinyModel,
    /// Batch loss before each update; one entry per step.
    pub loss_trace: Vec<f64>,
}

/// Trains a freshly initialized model at `config.train_context_length`.
pub fn train(config: ModelConfig, task: &SyntheticTask, opts: &TrainOptions) -> Result<TrainedModel> {
    let model = TinyModel::init(config)?;
    model.train_on(task, opts)
}

impl TinyModel {
    /// Continues training this model on `task`; batches are drawn from a
    /// stream seeded by the model seed.
    pub fn train_on(mut self, task: &SyntheticTask, opts: &TrainOptions) -> Result<TrainedModel> {
        opts.validate()?;
        task.validate()?;
        if task.vocab_size() > self.config.vocab_size {
            return Err(Error::Config(format!(
                "task needs vocabulary {} but model has {}",
                task.vocab_size(),
                self.config.vocab_size
            )));
        }
        let mut rng = child_rng(self.config.seed, "train-data");
        let mut velocity: Vec<Vec<f64>> =
            self.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        let mut trace = Vec::with_capacity(opts.steps);
        let mut above = 0;

        for step in 0..opts.steps {
            let length = opts.length_at(step, self.config.train_context_length);
            let batch = (0..opts.batch_size)
                .map(|_| task.sample(&mut rng, length))
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = self.loss_and_gradients_threaded(&batch, opts.threads)?;
            trace.push(loss);

            let initial = trace[0];
            if loss > DIVERGENCE_FACTOR * initial {
                above += 1;
                if above >= DIVERGENCE_WINDOW {
                    return Err(Error::TrainingDiverged {
                        step,
                        loss,
                        initial,
                    });
                }
            } else {
                above = 0;
            }

            let mut factor = opts.rate_at(step);
            if let Some(clip) = opts.clip_norm {
                let norm = grads.global_norm();
                if norm > clip {
                    factor *= clip / norm;
                }
            }
            for ((p, g), v) in self
                .params
                .iter_mut()
                .zip(&grads.tensors)
                .zip(&mut velocity)
            {
                for ((w, &gi), vi) in p.data.iter_mut().zip(&g.data).zip(v.iter_mut()) {
                    *vi = opts.momentum * *vi + gi;
                    *w -= factor * *vi;
                }
            }
        }
        Ok(TrainedModel {
            model: self,
            loss_trace: trace,
        })
    }
}

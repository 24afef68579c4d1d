//! Optimizers and the training loop.
//!
//! Only adapter matrices are updated; the base weight is passed by shared
//! reference and never written.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::Adapter;
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::synthbench::{BatchSampler, Dataset, TaskData, TaskMix};
use crate::tensor::{Matrix, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::steps")]
    pub steps: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
}

mod defaults {
    use super::OptimizerKind;

    pub fn steps() -> usize {
        2000
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn learning_rate() -> f64 {
        1e-3
    }
    pub fn optimizer() -> OptimizerKind {
        OptimizerKind::Adam
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn epsilon() -> f64 {
        1e-8
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: defaults::steps(),
            batch_size: defaults::batch_size(),
            learning_rate: defaults::learning_rate(),
            seed: 0,
            optimizer: defaults::optimizer(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            epsilon: defaults::epsilon(),
        }
    }
}

impl TrainConfig {
    /// `learning_rate == 0` is accepted here so that a null update can be
    /// exercised through [`train_step`]; [`train_loop`] requires it positive.
    fn validate_step(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("`learning_rate` must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("adam betas must lie in [0, 1)"));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::config("`epsilon` must be positive"));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("`steps` must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("`batch_size` must be at least 1"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::config("`learning_rate` must be positive"));
        }
        self.validate_step()
    }
}

/// Moment accumulators for every trainable matrix (Adam) and the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(adapter: &Adapter, kind: OptimizerKind) -> Self {
        let zeros = || {
            adapter
                .params()
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect::<Vec<_>>()
        };
        let (first, second) = match kind {
            OptimizerKind::Adam => (zeros(), zeros()),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Self {
            kind,
            first,
            second,
            step: 0,
        }
    }

    fn apply(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix], config: &TrainConfig) {
        self.step += 1;
        let lr = config.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (config.beta1, config.beta2, config.epsilon);
                let t = self.step as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for (((p, g), m), v) in params
                    .into_iter()
                    .zip(grads)
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    let w = p.data_mut();
                    let (m, v) = (m.data_mut(), v.data_mut());
                    for i in 0..w.len() {
                        let gi = g.data()[i];
                        m[i] = b1 * m[i] + (1.0 - b1) * gi;
                        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Mean of squared entry-wise errors.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<f64> {
    let diff = pred.sub(target).map_err(|_| Error::Shape {
        op: "mse_loss",
        lhs: pred.shape(),
        rhs: target.shape(),
    })?;
    Ok(diff.data().iter().map(|d| d * d).sum::<f64>() / diff.len() as f64)
}

/// Loss and gradients for every trainable matrix of `adapter`, in canonical
/// parameter order.
pub fn loss_and_grads(adapter: &Adapter, w0: &Matrix, x: &Matrix, y: &Matrix) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w0.clone());
    let yv = tape.constant(y.clone());
    let (pred, leaves) = adapter.forward_graph(&mut tape, xv, wv, true)?;
    let loss = tape.mse(pred, yv)?;
    tape.backward(loss)?;
    let grads = leaves.iter().map(|&v| tape.grad(v).clone()).collect();
    Ok((tape.value(loss).get(0, 0), grads))
}

/// One forward, backward and optimizer update. Returns the pre-update loss.
pub fn train_step(
    adapter: &mut Adapter,
    w0: &Matrix,
    x: &Matrix,
    y: &Matrix,
    config: &TrainConfig,
    state: &mut OptimizerState,
) -> Result<f64> {
    config.validate_step()?;
    let (loss, grads) = loss_and_grads(adapter, w0, x, y)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss} at step {}", state.step)));
    }
    state.apply(adapter.params_mut(), &grads, config);
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLoss {
    pub task: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub final_eval_loss: f64,
    pub task_eval_losses: Vec<TaskLoss>,
    pub task_mix: TaskMix,
    pub train_rows: usize,
    pub eval_rows: usize,
    pub seed: u64,
    pub config: TrainConfig,
    pub optimizer_note: String,
    pub wall_clock_secs: f64,
}

impl RunReport {
    /// `step,train_loss` rows, steps counted from 1.
    pub fn losses_csv(&self) -> String {
        let mut out = String::from("step,train_loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, l));
        }
        out
    }

    /// Copy with the wall-clock field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> RunReport {
        RunReport {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }
}

fn optimizer_note(kind: OptimizerKind) -> String {
    match kind {
        OptimizerKind::Adam => "adam with bias correction; substitutes for Adafactor".into(),
        OptimizerKind::Sgd => "plain sgd; substitutes for Adafactor".into(),
    }
}

/// MSE of the adapter on every task of `eval` that `mix` selects, plus the
/// row-weighted overall mean.
pub fn evaluate(adapter: &Adapter, w0: &Matrix, eval: &Dataset, mix: TaskMix) -> Result<(f64, Vec<TaskLoss>)> {
    let tasks: Vec<usize> = match mix {
        TaskMix::Single(t) => vec![t],
        TaskMix::Mixture => (0..eval.num_tasks()).collect(),
    };
    let mut per_task = Vec::new();
    let mut sum = 0.0;
    let mut rows = 0usize;
    for t in tasks {
        let TaskData { x, y } = eval.tasks.get(t).ok_or(Error::Index {
            what: "task",
            index: t,
            len: eval.num_tasks(),
        })?;
        let loss = mse_loss(&adapter.forward(x, w0)?, y)?;
        sum += loss * x.rows() as f64;
        rows += x.rows();
        per_task.push(TaskLoss { task: t, loss });
    }
    Ok((sum / rows as f64, per_task))
}

/// Splits every task 90/10, trains for `config.steps` minibatch steps drawn
/// according to `mix`, and evaluates on the held-out rows.
pub fn train_loop(
    adapter: &mut Adapter,
    w0: &Matrix,
    dataset: &Dataset,
    mix: TaskMix,
    config: &TrainConfig,
) -> Result<RunReport> {
    config.validate()?;
    if dataset.tasks.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let started = Instant::now();
    let split = dataset.split()?;
    let mut sampler = BatchSampler::new(&split.train, mix, derive_seed(config.seed, "batches"))?;
    if sampler.pool_size() < config.batch_size {
        return Err(Error::config(format!(
            "`batch_size` {} exceeds the {} available training examples",
            config.batch_size,
            sampler.pool_size()
        )));
    }
    let mut state = OptimizerState::new(adapter, config.optimizer);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = sampler.next_batch(config.batch_size)?;
        let loss = train_step(adapter, w0, &batch.x, &batch.y, config, &mut state).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFinite(format!("training loss diverged at step {}", step + 1)),
            other => other,
        })?;
        losses.push(loss);
    }
    let (final_eval_loss, task_eval_losses) = evaluate(adapter, w0, &split.eval, mix)?;
    if !final_eval_loss.is_finite() {
        return Err(Error::NonFinite("final eval loss".into()));
    }
    let (train_rows, eval_rows) = match mix {
        TaskMix::Single(t) => (split.train.tasks[t].len(), split.eval.tasks[t].len()),
        TaskMix::Mixture => (split.train.total_rows(), split.eval.total_rows()),
    };
    Ok(RunReport {
        steps: config.steps,
        losses,
        final_eval_loss,
        task_eval_losses,
        task_mix: mix,
        train_rows,
        eval_rows,
        seed: config.seed,
        config: config.clone(),
        optimizer_note: optimizer_note(config.optimizer),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

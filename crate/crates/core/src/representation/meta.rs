//! Meta-training through the closed-form ridge solver.
//!
//! With samples as rows, `Z~` the embedded support with a ones column,
//! `A = Z~^T Z~ / n + lambda D` and `B = Z~^T Y / n`, the task classifier is
//! `W^T = A^{-1} B` and the loss is the query mean squared error. Gradients
//! flow back through the solve via `dB = A^{-1} dW^T` and `dA = -dB W`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{records_matrix, EmbeddingModel, LinearEmbedding, ResidualAdapter};
use crate::error::{MelaError, Result};
use crate::learners::{augment, scaled_targets, RidgeConfig, RidgeSystem};
use crate::taskgen::Task;

fn labels(records: &[crate::taskgen::Record]) -> Vec<usize> {
    records.iter().map(|r| r.local_label).collect()
}

/// Query mean squared error of the ridge classifier fitted on the embedded support.
pub fn meta_loss(model: &EmbeddingModel, task: &Task, ridge: &RidgeConfig) -> Result<f64> {
    let d = model.input_dim();
    let k = task.way();
    let zs = model.embed_rows(&records_matrix(&task.support, d)?)?;
    let zq = model.embed_rows(&records_matrix(&task.query, d)?)?;
    let ys = scaled_targets(&labels(&task.support), k, ridge.target_scale);
    let yq = scaled_targets(&labels(&task.query), k, ridge.target_scale);
    let system = RidgeSystem::new(&zs, &ys, ridge.lambda, ridge.add_bias)?;
    Ok(mse(&system.predict(&zq), &yq))
}

fn mse(pred: &DMatrix<f64>, target: &DMatrix<f64>) -> f64 {
    (pred - target).norm_squared() / pred.nrows().max(1) as f64
}

/// Loss and its exact gradient with respect to the model's trainable parameters.
pub fn meta_loss_and_grad(model: &EmbeddingModel, task: &Task, ridge: &RidgeConfig) -> Result<(f64, Vec<f64>)> {
    let d = model.input_dim();
    let k = task.way();
    let xs = records_matrix(&task.support, d)?;
    let xq = records_matrix(&task.query, d)?;
    let fs = model.forward(&xs)?;
    let fq = model.forward(&xq)?;
    let ys = scaled_targets(&labels(&task.support), k, ridge.target_scale);
    let yq = scaled_targets(&labels(&task.query), k, ridge.target_scale);

    let system = RidgeSystem::new(&fs.z, &ys, ridge.lambda, ridge.add_bias)?;
    let zq_aug = augment(&fq.z, ridge.add_bias);
    let pred = &zq_aug * &system.weights_t;
    let m = pred.nrows() as f64;
    let n = fs.z.nrows() as f64;
    let p = fs.z.ncols();
    let loss = mse(&pred, &yq);

    let g_pred = (&pred - &yq) * (2.0 / m);
    let g_w = zq_aug.transpose() * &g_pred;
    let dzq = (&g_pred * system.weights_t.transpose()).columns(0, p).into_owned();

    let h = system.solve(&g_w);
    let g_a = -(&h * system.weights_t.transpose());
    let dzs_aug = (&system.design * (&g_a + g_a.transpose()) + &ys * h.transpose()) / n;
    let dzs = dzs_aug.columns(0, p).into_owned();

    let mut grad = model.backward(&xs, &fs, &dzs);
    for (g, q) in grad.iter_mut().zip(model.backward(&xq, &fq, &dzq)) {
        *g += q;
    }
    Ok((loss, grad))
}

pub fn meta_grad(model: &EmbeddingModel, task: &Task, ridge: &RidgeConfig) -> Result<Vec<f64>> {
    Ok(meta_loss_and_grad(model, task, ridge)?.1)
}

/// Average [`meta_loss`] over `tasks`, reduced in task order.
pub fn mean_meta_loss(model: &EmbeddingModel, tasks: &[Task], ridge: &RidgeConfig) -> Result<f64> {
    if tasks.is_empty() {
        return Err(MelaError::EmptyDataset("no tasks".into()));
    }
    let losses = tasks
        .par_iter()
        .map(|t| meta_loss(model, t, ridge))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / tasks.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaTrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub ridge: RidgeConfig,
    /// Mean loss over all tasks is recorded every this many steps.
    pub eval_every: usize,
    pub seed: u64,
    /// Per-step gradients longer than this are rescaled to it.
    pub clip_norm: Option<f64>,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            steps: 1000,
            ridge: RidgeConfig::default(),
            eval_every: 100,
            seed: 0,
            clip_norm: Some(10.0),
        }
    }
}

impl MetaTrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(MelaError::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(MelaError::InvalidConfig("eval_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaTrainOutcome {
    pub model: EmbeddingModel,
    /// Step index of every recorded loss; starts at 0 and ends at `steps`.
    pub eval_steps: Vec<usize>,
    /// Mean meta-loss over the training tasks at each recorded step.
    pub losses: Vec<f64>,
    /// Recorded step whose parameters were returned.
    pub selected_step: usize,
}

impl MetaTrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn selected_loss(&self) -> f64 {
        let at = self.eval_steps.iter().position(|&s| s == self.selected_step).unwrap_or(0);
        self.losses[at]
    }
}

/// Single-task SGD cycling through `tasks`. The parameters with the lowest
/// recorded mean loss are returned, so the result never does worse than the
/// starting point on the training tasks.
fn train(mut model: EmbeddingModel, tasks: &[Task], cfg: &MetaTrainConfig) -> Result<MetaTrainOutcome> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(MelaError::EmptyDataset("meta-training needs at least one task".into()));
    }
    let mut params = model.trainable_params();
    let mut best = (mean_meta_loss(&model, tasks, &cfg.ridge)?, 0, params.clone());
    let mut eval_steps = vec![0];
    let mut losses = vec![best.0];
    for step in 1..=cfg.steps {
        let task = &tasks[(step - 1) % tasks.len()];
        let (_, mut grad) = meta_loss_and_grad(&model, task, &cfg.ridge)?;
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(MelaError::DegenerateData(format!("non-finite meta-gradient at step {step}")));
        }
        if let Some(clip) = cfg.clip_norm {
            if norm > clip {
                grad.iter_mut().for_each(|g| *g *= clip / norm);
            }
        }
        params.iter_mut().zip(&grad).for_each(|(w, g)| *w -= cfg.learning_rate * g);
        model.set_trainable_params(&params)?;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let loss = mean_meta_loss(&model, tasks, &cfg.ridge)?;
            eval_steps.push(step);
            losses.push(loss);
            if loss < best.0 {
                best = (loss, step, params.clone());
            }
        }
    }
    model.set_trainable_params(&best.2)?;
    Ok(MetaTrainOutcome {
        model,
        eval_steps,
        losses,
        selected_step: best.1,
    })
}

/// Learns a linear embedding `d -> p` from `tasks` by meta-learning through
/// the ridge solver, starting from `theta ~ N(0, 1/d)`.
pub fn meta_train_sim(tasks: &[Task], d: usize, p: usize, cfg: &MetaTrainConfig) -> Result<(LinearEmbedding, MetaTrainOutcome)> {
    let init = EmbeddingModel::Linear(LinearEmbedding::random(d, p, cfg.seed));
    let outcome = train(init, tasks, cfg)?;
    let theta = match &outcome.model {
        EmbeddingModel::Linear(e) => LinearEmbedding { theta: e.theta.clone(), seed: Some(cfg.seed) },
        EmbeddingModel::Residual { .. } => unreachable!("linear model stays linear"),
    };
    Ok((theta, outcome))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    /// Hidden width of the adapter; the feature dimension when unset.
    pub width: Option<usize>,
    pub train: MetaTrainConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            width: None,
            train: MetaTrainConfig {
                learning_rate: 0.01,
                steps: 500,
                ..Default::default()
            },
        }
    }
}

/// Trains a residual adapter on top of the frozen `g_pre`.
pub fn meta_finetune_residual(g_pre: &LinearEmbedding, tasks: &[Task], cfg: &FinetuneConfig) -> Result<MetaTrainOutcome> {
    let p = g_pre.output_dim();
    let adapter = ResidualAdapter::init(p, cfg.width.unwrap_or(p), cfg.train.seed);
    let model = EmbeddingModel::Residual {
        base: g_pre.clone(),
        adapter,
    };
    train(model, tasks, &cfg.train)
}

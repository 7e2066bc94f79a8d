use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::optim::OptimizerSettings;
use super::ridge::{ridge_fit, RidgeConfig};
use super::softmax::{fit_multinomial, SoftmaxConfig};
use super::{argmax, gls_select, GlobalClassifier, Provenance, TaskClassifier};
use crate::error::{MelaError, Result};
use crate::representation::{normalize_rows, EmbeddingModel};
use crate::taskgen::Task;

/// Logistic-regression base learner with inverse regularisation strength
/// `c_inv`: the penalty is `||W||^2 / (2 c_inv)` on the summed support loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticConfig {
    pub c_inv: f64,
    pub opt: OptimizerSettings,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            c_inv: 1.0,
            opt: OptimizerSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Builder<'a> {
    Ridge(RidgeConfig),
    Logistic(&'a LogisticConfig),
    Gls(&'a GlobalClassifier),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Scale every embedding to unit length before fitting and scoring.
    pub normalize: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { normalize: true }
    }
}

/// Builds the task classifier from embedded support features.
///
/// `task_classes` (the hidden local-to-global map) is only read by GLS.
pub fn build_classifier(
    support: &DMatrix<f64>,
    labels: &[usize],
    k: usize,
    builder: Builder<'_>,
    task_classes: Option<&[usize]>,
) -> Result<TaskClassifier> {
    match builder {
        Builder::Ridge(cfg) => ridge_fit(support, labels, k, &cfg),
        Builder::Logistic(cfg) => {
            if !(cfg.c_inv > 0.0) {
                return Err(MelaError::InvalidConfig("logistic c_inv must be positive".into()));
            }
            let softmax = SoftmaxConfig {
                reg: 1.0 / (cfg.c_inv * support.nrows() as f64),
                fit_bias: true,
                joint: false,
                opt: cfg.opt.clone(),
            };
            let (weights, bias, _) = fit_multinomial(support, labels, k, &softmax)?;
            Ok(TaskClassifier {
                weights,
                bias,
                provenance: Provenance::Logistic,
            })
        }
        Builder::Gls(g) => gls_select(g, task_classes.ok_or(MelaError::MissingLabel)?),
    }
}

/// Fraction of rows of `query` whose argmax prediction equals the label.
pub fn query_accuracy(clf: &TaskClassifier, query: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(MelaError::UndefinedMetric("accuracy over an empty query set".into()));
    }
    let mut logits = query * clf.weights.transpose();
    if let Some(b) = &clf.bias {
        let b: &DVector<f64> = b;
        for mut row in logits.row_iter_mut() {
            row += b.transpose();
        }
    }
    let hits = logits
        .row_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(&row.iter().copied().collect::<Vec<_>>()) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Query accuracy of `builder`'s classifier, fitted on the embedded support.
pub fn evaluate_task(task: &Task, embedding: &EmbeddingModel, builder: Builder<'_>, cfg: &EvalConfig) -> Result<f64> {
    let mut zs = embedding.embed_records(&task.support)?;
    let mut zq = embedding.embed_records(&task.query)?;
    if cfg.normalize {
        normalize_rows(&mut zs)?;
        normalize_rows(&mut zq)?;
    }
    let ls: Vec<usize> = task.support.iter().map(|r| r.local_label).collect();
    let lq: Vec<usize> = task.query.iter().map(|r| r.local_label).collect();
    let clf = build_classifier(&zs, &ls, task.way(), builder, task.local_to_global.as_deref())?;
    query_accuracy(&clf, &zq, &lq)
}

//! Base learners and losses: closed-form ridge, global label selection,
//! multinomial cross-entropy training and per-task evaluation.

mod eval;
mod optim;
mod ridge;
pub(crate) mod softmax;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MelaError, Result};

pub use eval::{
    build_classifier, evaluate_task, query_accuracy, Builder, EvalConfig, LogisticConfig,
};
pub use optim::{minimize, OptimizerSettings, Trace};
pub use ridge::{
    augment, ridge_fit, ridge_objective, ridge_solve, scaled_targets, RidgeConfig,
    RidgeSystem, TargetScale,
};
pub use softmax::{
    fit_multinomial, softmax_train, softmax_train_joint, SoftmaxConfig, SoftmaxFit,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Ridge,
    GlsSelected,
    Logistic,
}

/// Linear classifier over the `k` local classes of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskClassifier {
    /// `k x p`
    pub weights: DMatrix<f64>,
    pub bias: Option<DVector<f64>>,
    pub provenance: Provenance,
}

impl TaskClassifier {
    pub fn way(&self) -> usize {
        self.weights.nrows()
    }

    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        linear_logits(&self.weights, self.bias.as_ref(), z)
    }

    pub fn predict(&self, z: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(z)?))
    }
}

/// Linear classifier over every global class; rows follow `class_ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalClassifier {
    /// `C x p`
    pub weights: DMatrix<f64>,
    pub bias: Option<DVector<f64>>,
    pub class_ids: Vec<usize>,
}

impl GlobalClassifier {
    pub fn new(weights: DMatrix<f64>, bias: Option<DVector<f64>>, class_ids: Vec<usize>) -> Result<Self> {
        if weights.nrows() != class_ids.len() {
            return Err(MelaError::DimensionMismatch {
                expected: weights.nrows(),
                got: class_ids.len(),
            });
        }
        if let Some(b) = &bias {
            if b.len() != weights.nrows() {
                return Err(MelaError::DimensionMismatch {
                    expected: weights.nrows(),
                    got: b.len(),
                });
            }
        }
        let mut seen = std::collections::HashSet::new();
        for &c in &class_ids {
            if !seen.insert(c) {
                return Err(MelaError::DuplicateClass(c));
            }
        }
        Ok(Self {
            weights,
            bias,
            class_ids,
        })
    }

    pub fn zeros(classes: usize, dim: usize, with_bias: bool) -> Self {
        Self {
            weights: DMatrix::zeros(classes, dim),
            bias: with_bias.then(|| DVector::zeros(classes)),
            class_ids: (0..classes).collect(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        linear_logits(&self.weights, self.bias.as_ref(), z)
    }

    /// Row index of a global class id.
    pub fn row_of(&self, class: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }
}

fn linear_logits(weights: &DMatrix<f64>, bias: Option<&DVector<f64>>, z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != weights.ncols() {
        return Err(MelaError::DimensionMismatch {
            expected: weights.ncols(),
            got: z.len(),
        });
    }
    Ok((0..weights.nrows())
        .map(|r| {
            let dot: f64 = weights.row(r).iter().zip(z).map(|(w, x)| w * x).sum();
            dot + bias.map_or(0.0, |b| b[r])
        })
        .collect())
}

/// Selects the rows of `g` for the task's global classes, in local-label order.
pub fn gls_select(g: &GlobalClassifier, task_classes: &[usize]) -> Result<TaskClassifier> {
    let mut rows = Vec::with_capacity(task_classes.len());
    for (i, &class) in task_classes.iter().enumerate() {
        if task_classes[..i].contains(&class) {
            return Err(MelaError::DuplicateClass(class));
        }
        rows.push(g.row_of(class).ok_or(MelaError::MissingClass(class))?);
    }
    Ok(TaskClassifier {
        weights: g.weights.select_rows(&rows),
        bias: g.bias.as_ref().map(|b| b.select_rows(&rows)),
        provenance: Provenance::GlsSelected,
    })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy of `logits[y]` against the classes in `active` only.
///
/// Terms are accumulated in ascending class order, so an `active` set equal to
/// `0..K` gives bit-for-bit the full `K`-class loss.
pub fn ce_loss(logits: &[f64], y: usize, active: &[usize]) -> Result<f64> {
    if !active.contains(&y) {
        return Err(MelaError::InactiveLabel { label: y });
    }
    if let Some(&bad) = active.iter().find(|&&a| a >= logits.len()) {
        return Err(MelaError::DimensionMismatch {
            expected: logits.len(),
            got: bad + 1,
        });
    }
    let mut sorted = active.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    Ok(subset_ce(logits, y, sorted.iter().copied()))
}

/// Cross-entropy over all `K` classes.
pub fn ce_loss_full(logits: &[f64], y: usize) -> f64 {
    subset_ce(logits, y, 0..logits.len())
}

fn subset_ce(logits: &[f64], y: usize, active: impl Iterator<Item = usize> + Clone) -> f64 {
    let max = active.clone().map(|i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = active.map(|i| (logits[i] - max).exp()).sum();
    (max + sum.ln()) - logits[y]
}

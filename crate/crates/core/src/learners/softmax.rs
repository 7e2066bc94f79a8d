use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::optim::{minimize, OptimizerSettings, Trace};
use super::GlobalClassifier;
use crate::error::{MelaError, Result};
use crate::representation::{records_matrix, EmbeddingModel, LinearEmbedding};
use crate::taskgen::{FlatDataset, Record};

/// Multinomial logistic regression trained by full-batch gradient descent on
/// `mean CE + (reg / 2) ||W||^2` (plus `||theta||^2` when trained jointly).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoftmaxConfig {
    pub reg: f64,
    pub fit_bias: bool,
    /// Also learn the linear embedding.
    pub joint: bool,
    pub opt: OptimizerSettings,
}

impl Default for SoftmaxConfig {
    fn default() -> Self {
        Self {
            reg: 1e-4,
            fit_bias: true,
            joint: false,
            opt: OptimizerSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxFit {
    pub classifier: GlobalClassifier,
    /// The updated embedding in joint mode.
    pub embedding: Option<LinearEmbedding>,
    pub trace: Trace,
}

impl SoftmaxFit {
    pub fn final_loss(&self) -> f64 {
        self.trace.final_loss()
    }
}

/// Row-wise softmax of `logits`, minus the one-hot targets, divided by `n`;
/// returns the mean cross-entropy as well.
pub(crate) fn ce_residual(logits: &DMatrix<f64>, labels: &[usize]) -> (f64, DMatrix<f64>) {
    let n = logits.nrows() as f64;
    let mut resid = logits.clone();
    let mut loss = 0.0;
    for (i, mut row) in resid.row_iter_mut().enumerate() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        loss += sum.ln() + max - logits[(i, labels[i])];
        row /= sum;
        row[labels[i]] -= 1.0;
    }
    resid /= n;
    (loss / n, resid)
}

fn logits(z: &DMatrix<f64>, w: &DMatrix<f64>, b: Option<&DVector<f64>>) -> DMatrix<f64> {
    let mut out = z * w.transpose();
    if let Some(b) = b {
        for mut row in out.row_iter_mut() {
            row += b.transpose();
        }
    }
    out
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(MelaError::InvalidConfig(format!("label {bad} outside 0..{classes}")));
    }
    let first = labels.first().ok_or_else(|| MelaError::EmptyDataset("no training samples".into()))?;
    if labels.iter().all(|l| l == first) {
        return Err(MelaError::DegenerateData("cross-entropy training needs at least two classes".into()));
    }
    Ok(())
}

struct Layout {
    classes: usize,
    p: usize,
    bias: bool,
}

impl Layout {
    fn unpack(&self, params: &[f64]) -> (DMatrix<f64>, Option<DVector<f64>>) {
        let wlen = self.classes * self.p;
        let w = DMatrix::from_row_slice(self.classes, self.p, &params[..wlen]);
        let b = self
            .bias
            .then(|| DVector::from_column_slice(&params[wlen..wlen + self.classes]));
        (w, b)
    }

    fn len(&self) -> usize {
        self.classes * self.p + if self.bias { self.classes } else { 0 }
    }
}

fn push_row_major(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for row in m.row_iter() {
        out.extend(row.iter());
    }
}

/// Fits `W` (and `b`) on fixed features `z` (`N x p`) with labels in `0..classes`.
pub fn fit_multinomial(
    z: &DMatrix<f64>,
    labels: &[usize],
    classes: usize,
    cfg: &SoftmaxConfig,
) -> Result<(DMatrix<f64>, Option<DVector<f64>>, Trace)> {
    if labels.len() != z.nrows() {
        return Err(MelaError::DimensionMismatch {
            expected: z.nrows(),
            got: labels.len(),
        });
    }
    check_labels(labels, classes)?;
    let layout = Layout {
        classes,
        p: z.ncols(),
        bias: cfg.fit_bias,
    };
    let objective = |params: &[f64]| {
        let (w, b) = layout.unpack(params);
        let (ce, resid) = ce_residual(&logits(z, &w, b.as_ref()), labels);
        let loss = ce + 0.5 * cfg.reg * w.norm_squared();
        let gw = resid.transpose() * z + &w * cfg.reg;
        let mut grad = Vec::with_capacity(layout.len());
        push_row_major(&mut grad, &gw);
        if layout.bias {
            grad.extend(resid.row_sum().iter());
        }
        (loss, grad)
    };
    let (params, trace) = minimize(vec![0.0; layout.len()], objective, &cfg.opt);
    let (w, b) = layout.unpack(&params);
    Ok((w, b, trace))
}

fn dataset_matrix(ds: &FlatDataset) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let labels = ds.labels()?;
    let dim = ds.dim().ok_or_else(|| MelaError::EmptyDataset("empty flat dataset".into()))?;
    let records: Vec<Record> = ds
        .samples
        .iter()
        .map(|s| Record {
            sample_id: s.id,
            features: s.features.clone(),
            local_label: 0,
            global_label: s.global_label,
        })
        .collect();
    Ok((records_matrix(&records, dim)?, labels))
}

/// Pre-trains a global classifier on `ds` over the given embedding; in joint
/// mode the embedding must be linear and is updated too.
pub fn softmax_train(ds: &FlatDataset, embedding: &EmbeddingModel, cfg: &SoftmaxConfig) -> Result<SoftmaxFit> {
    if cfg.joint {
        return match embedding {
            EmbeddingModel::Linear(e) => softmax_train_joint(ds, e, cfg),
            EmbeddingModel::Residual { .. } => Err(MelaError::InvalidConfig(
                "joint training needs a linear embedding".into(),
            )),
        };
    }
    let (x, labels) = dataset_matrix(ds)?;
    let z = embedding.embed_rows(&x)?;
    let (w, b, trace) = fit_multinomial(&z, &labels, ds.num_classes, cfg)?;
    Ok(SoftmaxFit {
        classifier: GlobalClassifier::new(w, b, ds.class_ids.clone())?,
        embedding: None,
        trace,
    })
}

/// Objective and gradient over `[W, b, theta]`, all row-major. `mask` is
/// added to the logits; `-inf` entries drop a class from a sample's softmax.
fn joint_objective(
    x: &DMatrix<f64>,
    labels: &[usize],
    mask: Option<&DMatrix<f64>>,
    layout: &Layout,
    d: usize,
    reg: f64,
    params: &[f64],
) -> (f64, Vec<f64>) {
    let head = layout.len();
    let (w, b) = layout.unpack(params);
    let theta = DMatrix::from_row_slice(layout.p, d, &params[head..]);
    let z = x * theta.transpose();
    let mut l = logits(&z, &w, b.as_ref());
    if let Some(mask) = mask {
        l += mask;
    }
    let (ce, resid) = ce_residual(&l, labels);
    let loss = ce + 0.5 * reg * (w.norm_squared() + theta.norm_squared());
    let gw = resid.transpose() * &z + &w * reg;
    let gtheta = (&resid * &w).transpose() * x + &theta * reg;
    let mut grad = Vec::with_capacity(params.len());
    push_row_major(&mut grad, &gw);
    if layout.bias {
        grad.extend(resid.row_sum().iter());
    }
    push_row_major(&mut grad, &gtheta);
    (loss, grad)
}

/// Joint fit of `W`, `b` and `theta` on raw rows `x`, starting from `W = 0`.
pub(crate) fn fit_joint(
    x: &DMatrix<f64>,
    labels: &[usize],
    mask: Option<&DMatrix<f64>>,
    class_ids: Vec<usize>,
    init: &LinearEmbedding,
    cfg: &SoftmaxConfig,
) -> Result<SoftmaxFit> {
    if x.ncols() != init.input_dim() {
        return Err(MelaError::DimensionMismatch {
            expected: init.input_dim(),
            got: x.ncols(),
        });
    }
    if labels.len() != x.nrows() {
        return Err(MelaError::DimensionMismatch {
            expected: x.nrows(),
            got: labels.len(),
        });
    }
    check_labels(labels, class_ids.len())?;
    let (p, d) = init.theta.shape();
    let layout = Layout {
        classes: class_ids.len(),
        p,
        bias: cfg.fit_bias,
    };
    let head = layout.len();
    let objective = |params: &[f64]| joint_objective(x, labels, mask, &layout, d, cfg.reg, params);
    let mut x0 = vec![0.0; head];
    push_row_major(&mut x0, &init.theta);
    let (params, trace) = minimize(x0, objective, &cfg.opt);
    let (w, b) = layout.unpack(&params);
    Ok(SoftmaxFit {
        classifier: GlobalClassifier::new(w, b, class_ids)?,
        embedding: Some(LinearEmbedding {
            theta: DMatrix::from_row_slice(p, d, &params[head..]),
            seed: init.seed,
        }),
        trace,
    })
}

/// Jointly learns `W`, `b` and `theta`, starting from `W = 0` and `init`.
pub fn softmax_train_joint(ds: &FlatDataset, init: &LinearEmbedding, cfg: &SoftmaxConfig) -> Result<SoftmaxFit> {
    let (x, labels) = dataset_matrix(ds)?;
    fit_joint(&x, &labels, None, ds.class_ids.clone(), init, cfg)
}

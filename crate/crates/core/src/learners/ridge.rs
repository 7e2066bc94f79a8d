use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::{Provenance, TaskClassifier};
use crate::error::{MelaError, Result};

/// Affine map applied to one-hot targets: `1 -> positive`, `0 -> negative`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScale {
    pub positive: f64,
    pub negative: f64,
}

impl Default for TargetScale {
    /// `f(y) = 2y - 1`
    fn default() -> Self {
        Self {
            positive: 1.0,
            negative: -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RidgeConfig {
    pub lambda: f64,
    pub add_bias: bool,
    pub target_scale: TargetScale,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            add_bias: true,
            target_scale: TargetScale::default(),
        }
    }
}

/// Scaled one-hot targets, one row per label.
pub fn scaled_targets(labels: &[usize], k: usize, scale: TargetScale) -> DMatrix<f64> {
    DMatrix::from_fn(labels.len(), k, |i, j| {
        if labels[i] == j {
            scale.positive
        } else {
            scale.negative
        }
    })
}

/// Appends a column of ones when `add_bias` is set.
pub fn augment(features: &DMatrix<f64>, add_bias: bool) -> DMatrix<f64> {
    if add_bias {
        features.clone().insert_column(features.ncols(), 1.0)
    } else {
        features.clone()
    }
}

/// Normal equations of the mean-squared ridge problem
/// `min_W (1/n) sum_i ||W x_i - y_i||^2 + lambda ||W||_F^2`,
/// with the bias column (when present) left out of the penalty.
pub struct RidgeSystem {
    /// `n x q` features, with the ones column appended when biased.
    pub design: DMatrix<f64>,
    /// Cholesky factor of `design^T design / n + lambda D`.
    pub factor: Cholesky<f64, Dyn>,
    /// `q x k` solution; the transpose of the classifier weights.
    pub weights_t: DMatrix<f64>,
    pub add_bias: bool,
}

impl RidgeSystem {
    pub fn new(features: &DMatrix<f64>, targets: &DMatrix<f64>, lambda: f64, add_bias: bool) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(MelaError::InvalidConfig(format!("ridge lambda must be positive, got {lambda}")));
        }
        let n = features.nrows();
        if n == 0 {
            return Err(MelaError::EmptyDataset("ridge fit on zero samples".into()));
        }
        if targets.nrows() != n {
            return Err(MelaError::DimensionMismatch {
                expected: n,
                got: targets.nrows(),
            });
        }
        let design = augment(features, add_bias);
        let q = design.ncols();
        let p = features.ncols();
        let inv_n = 1.0 / n as f64;
        let mut gram = design.tr_mul(&design) * inv_n;
        for i in 0..p {
            gram[(i, i)] += lambda;
        }
        debug_assert_eq!(gram.nrows(), q);
        let factor = gram.cholesky().ok_or(MelaError::Singular)?;
        let rhs = design.tr_mul(targets) * inv_n;
        let weights_t = factor.solve(&rhs);
        Ok(Self {
            design,
            factor,
            weights_t,
            add_bias,
        })
    }

    /// `A^{-1} rhs` for the system matrix `A`.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve(rhs)
    }

    pub fn predict(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        augment(features, self.add_bias) * &self.weights_t
    }

    /// `k x q` weights with the bias as the last column.
    pub fn weights(&self) -> DMatrix<f64> {
        self.weights_t.transpose()
    }
}

/// Closed-form ridge weights (`k x q`, bias last) for targets `y`.
pub fn ridge_solve(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64, add_bias: bool) -> Result<DMatrix<f64>> {
    Ok(RidgeSystem::new(x, y, lambda, add_bias)?.weights())
}

/// `(1/n) ||X~ W^T - Y||_F^2 + lambda ||W_{features}||_F^2`.
pub fn ridge_objective(x: &DMatrix<f64>, y: &DMatrix<f64>, w: &DMatrix<f64>, lambda: f64, add_bias: bool) -> f64 {
    let design = augment(x, add_bias);
    let residual = design * w.transpose() - y;
    let penalty = w.columns(0, x.ncols()).norm_squared();
    residual.norm_squared() / x.nrows() as f64 + lambda * penalty
}

/// Fits a ridge classifier on embedded support features with local labels `0..k`.
pub fn ridge_fit(features: &DMatrix<f64>, labels: &[usize], k: usize, cfg: &RidgeConfig) -> Result<TaskClassifier> {
    if labels.len() != features.nrows() {
        return Err(MelaError::DimensionMismatch {
            expected: features.nrows(),
            got: labels.len(),
        });
    }
    for class in 0..k {
        if !labels.contains(&class) {
            return Err(MelaError::DegenerateData(format!("class {class} has no support sample")));
        }
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(MelaError::InvalidConfig(format!("label {bad} outside 0..{k}")));
    }
    let targets = scaled_targets(labels, k, cfg.target_scale);
    let system = RidgeSystem::new(features, &targets, cfg.lambda, cfg.add_bias)?;
    let w = system.weights();
    let p = features.ncols();
    Ok(TaskClassifier {
        weights: w.columns(0, p).into_owned(),
        bias: cfg.add_bias.then(|| DVector::from_iterator(k, w.column(p).iter().copied())),
        provenance: Provenance::Ridge,
    })
}

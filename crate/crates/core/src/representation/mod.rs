//! Feature maps: a linear embedding `theta`, optionally followed by a
//! residual adapter `g*(x) = g(x) + h(g(x))`.

mod meta;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{MelaError, Result};
use crate::rng;
use crate::taskgen::Record;

pub use meta::{
    mean_meta_loss, meta_finetune_residual, meta_grad, meta_loss, meta_loss_and_grad, meta_train_sim,
    FinetuneConfig, MetaTrainConfig, MetaTrainOutcome,
};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearEmbedding {
    /// `p x d`
    pub theta: DMatrix<f64>,
    pub seed: Option<u64>,
}

impl LinearEmbedding {
    pub fn new(theta: DMatrix<f64>) -> Self {
        Self { theta, seed: None }
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(DMatrix::identity(dim, dim))
    }

    /// Entries drawn i.i.d. from `N(0, 1/d)`.
    pub fn random(d: usize, p: usize, seed: u64) -> Self {
        let mut gen = rng::seeded(seed);
        let scale = 1.0 / (d as f64).sqrt();
        let theta = DMatrix::from_fn(p, d, |_, _| scale * gen.sample::<f64, _>(StandardNormal));
        Self { theta, seed: Some(seed) }
    }

    pub fn input_dim(&self) -> usize {
        self.theta.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.theta.nrows()
    }

    /// Embeds every row of `x` (`n x d`), giving `n x p`.
    pub fn embed_rows(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.input_dim(), x.ncols())?;
        Ok(x * self.theta.transpose())
    }
}

/// `h(u) = W2 tanh(W1 u + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualAdapter {
    /// `width x p`
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    /// `p x width`
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl ResidualAdapter {
    /// Random first layer, zero second layer: `h = 0` at initialisation.
    pub fn init(p: usize, width: usize, seed: u64) -> Self {
        let mut gen = rng::seeded(seed);
        let scale = 1.0 / (p.max(1) as f64).sqrt();
        Self {
            w1: DMatrix::from_fn(width, p, |_, _| scale * gen.sample::<f64, _>(StandardNormal)),
            b1: DVector::zeros(width),
            w2: DMatrix::zeros(p, width),
            b2: DVector::zeros(p),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn width(&self) -> usize {
        self.w1.nrows()
    }

    pub fn num_params(&self) -> usize {
        2 * self.width() * self.dim() + self.width() + self.dim()
    }

    /// `w1` (row-major), `b1`, `w2` (row-major), `b2`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend(row_major(&self.w1));
        out.extend(self.b1.iter());
        out.extend(row_major(&self.w2));
        out.extend(self.b2.iter());
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim(self.num_params(), params.len())?;
        let (h, p) = (self.width(), self.dim());
        let mut at = 0;
        let mut take = |len: usize| {
            let s = &params[at..at + len];
            at += len;
            s
        };
        self.w1 = DMatrix::from_row_slice(h, p, take(h * p));
        self.b1 = DVector::from_column_slice(take(h));
        self.w2 = DMatrix::from_row_slice(p, h, take(p * h));
        self.b2 = DVector::from_column_slice(take(p));
        Ok(())
    }

    /// Hidden activations `tanh(U W1^T + b1)` and the residual output `U + h(U)`.
    fn forward(&self, u: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut hidden = u * self.w1.transpose();
        for mut row in hidden.row_iter_mut() {
            row += self.b1.transpose();
        }
        hidden.apply(|v| *v = v.tanh());
        let mut out = u + &hidden * self.w2.transpose();
        for mut row in out.row_iter_mut() {
            row += self.b2.transpose();
        }
        (hidden, out)
    }

    /// Gradient of the adapter parameters given `dL/dZ` at the output.
    fn backward(&self, u: &DMatrix<f64>, hidden: &DMatrix<f64>, dz: &DMatrix<f64>) -> Vec<f64> {
        let dw2 = dz.transpose() * hidden;
        let db2 = dz.row_sum().transpose();
        let mut da = dz * &self.w2;
        da.zip_apply(hidden, |g, h| *g *= 1.0 - h * h);
        let dw1 = da.transpose() * u;
        let db1 = da.row_sum().transpose();
        let mut out = Vec::with_capacity(self.num_params());
        out.extend(row_major(&dw1));
        out.extend(db1.iter());
        out.extend(row_major(&dw2));
        out.extend(db2.iter());
        out
    }
}

/// A frozen or trainable feature map.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingModel {
    Linear(LinearEmbedding),
    /// Frozen base plus trainable adapter.
    Residual {
        base: LinearEmbedding,
        adapter: ResidualAdapter,
    },
}

impl From<LinearEmbedding> for EmbeddingModel {
    fn from(e: LinearEmbedding) -> Self {
        EmbeddingModel::Linear(e)
    }
}

impl EmbeddingModel {
    pub fn identity(dim: usize) -> Self {
        LinearEmbedding::identity(dim).into()
    }

    pub fn base(&self) -> &LinearEmbedding {
        match self {
            EmbeddingModel::Linear(e) => e,
            EmbeddingModel::Residual { base, .. } => base,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.base().input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.base().output_dim()
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        let row = DMatrix::from_row_slice(1, x.len(), x);
        Ok(self.embed_rows(&row)?.iter().copied().collect())
    }

    pub fn embed_rows(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let z = self.base().embed_rows(x)?;
        Ok(match self {
            EmbeddingModel::Linear(_) => z,
            EmbeddingModel::Residual { adapter, .. } => adapter.forward(&z).1,
        })
    }

    pub fn embed_records(&self, records: &[Record]) -> Result<DMatrix<f64>> {
        self.embed_rows(&records_matrix(records, self.input_dim())?)
    }

    /// Parameters updated by meta-training: `theta` for a linear model, only
    /// the adapter for a residual one.
    pub fn trainable_params(&self) -> Vec<f64> {
        match self {
            EmbeddingModel::Linear(e) => row_major(&e.theta).collect(),
            EmbeddingModel::Residual { adapter, .. } => adapter.params(),
        }
    }

    pub fn set_trainable_params(&mut self, params: &[f64]) -> Result<()> {
        match self {
            EmbeddingModel::Linear(e) => {
                check_dim(e.theta.len(), params.len())?;
                e.theta = DMatrix::from_row_slice(e.theta.nrows(), e.theta.ncols(), params);
                Ok(())
            }
            EmbeddingModel::Residual { adapter, .. } => adapter.set_params(params),
        }
    }

    /// Embeds `x` and returns a closure-free cache for [`Self::backward`].
    pub(crate) fn forward(&self, x: &DMatrix<f64>) -> Result<Forward> {
        let u = self.base().embed_rows(x)?;
        Ok(match self {
            EmbeddingModel::Linear(_) => Forward { z: u.clone(), base: u, hidden: None },
            EmbeddingModel::Residual { adapter, .. } => {
                let (hidden, z) = adapter.forward(&u);
                Forward { z, base: u, hidden: Some(hidden) }
            }
        })
    }

    /// Gradient of the trainable parameters given `dL/dZ` for inputs `x`.
    pub(crate) fn backward(&self, x: &DMatrix<f64>, cache: &Forward, dz: &DMatrix<f64>) -> Vec<f64> {
        match self {
            EmbeddingModel::Linear(_) => row_major(&(dz.transpose() * x)).collect(),
            EmbeddingModel::Residual { adapter, .. } => {
                adapter.backward(&cache.base, cache.hidden.as_ref().expect("residual cache"), dz)
            }
        }
    }
}

pub(crate) struct Forward {
    pub z: DMatrix<f64>,
    base: DMatrix<f64>,
    hidden: Option<DMatrix<f64>>,
}

/// `v / ||v||`.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(MelaError::DegenerateData("cannot normalise a zero vector".into()));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Normalises every row of `z` in place.
pub fn normalize_rows(z: &mut DMatrix<f64>) -> Result<()> {
    for mut row in z.row_iter_mut() {
        let norm = row.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(MelaError::DegenerateData("cannot normalise a zero embedding".into()));
        }
        row /= norm;
    }
    Ok(())
}

pub fn records_matrix(records: &[Record], dim: usize) -> Result<DMatrix<f64>> {
    for r in records {
        check_dim(dim, r.features.len())?;
    }
    Ok(DMatrix::from_fn(records.len(), dim, |i, j| records[i].features[j]))
}

fn row_major(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    m.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>())
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(MelaError::DimensionMismatch { expected, got });
    }
    Ok(())
}

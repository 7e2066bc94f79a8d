//! Monte-Carlo risk estimates for the GLS bound, the pre-training versus
//! meta-GLS rate study, and meta-test accuracy reports.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MelaError, Result};
use crate::learners::softmax::fit_joint;
use crate::learners::{ce_loss, ce_loss_full, evaluate_task, Builder, EvalConfig, GlobalClassifier, SoftmaxConfig};
use crate::representation::{EmbeddingModel, LinearEmbedding};
use crate::rng;
use crate::taskgen::{flatten, sample_meta_training_set, sample_task, MetaDistribution, Task};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub value: f64,
    pub std_error: f64,
    pub num_draws: usize,
}

impl RiskEstimate {
    /// Mean and standard error of `values` (Welford accumulation, in order).
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(MelaError::UndefinedMetric("risk estimate needs at least one draw".into()));
        }
        let (mut mean, mut m2) = (0.0, 0.0);
        for (i, &v) in values.iter().enumerate() {
            let delta = v - mean;
            mean += delta / (i + 1) as f64;
            m2 += delta * (v - mean);
        }
        let n = values.len();
        let std_error = if n > 1 { (m2 / (n - 1) as f64 / n as f64).sqrt() } else { 0.0 };
        Ok(Self {
            value: mean,
            std_error,
            num_draws: n,
        })
    }
}

/// One paired draw: a task from the meta-distribution and, on its query
/// samples, the mean subset cross-entropy over the task's classes and the
/// mean cross-entropy over all classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedDraw {
    pub gls: f64,
    pub pretrain: f64,
}

fn check_cover(md: &MetaDistribution, w: &GlobalClassifier) -> Result<Vec<usize>> {
    (0..md.num_classes())
        .map(|c| w.row_of(c).ok_or(MelaError::MissingClass(c)))
        .collect()
}

fn paired_draw(md: &MetaDistribution, w: &GlobalClassifier, rows: &[usize], embedding: &EmbeddingModel, seed: u64, i: usize) -> Result<PairedDraw> {
    let task = sample_task(md, i, &mut rng::stream(seed, i as u64))?;
    let classes = task.local_to_global.as_ref().ok_or(MelaError::MissingLabel)?;
    let active: Vec<usize> = classes.iter().map(|&c| rows[c]).collect();
    let (mut gls, mut pre) = (0.0, 0.0);
    for r in &task.query {
        let y = rows[r.global_label.ok_or(MelaError::MissingLabel)?];
        let logits = w.logits(&embedding.embed(&r.features)?)?;
        gls += ce_loss(&logits, y, &active)?;
        pre += ce_loss_full(&logits, y);
    }
    let m = task.query.len() as f64;
    Ok(PairedDraw {
        gls: gls / m,
        pretrain: pre / m,
    })
}

/// `draws` paired draws; draw `i` uses stream `i` of `seed`.
pub fn paired_draws(md: &MetaDistribution, w: &GlobalClassifier, embedding: &EmbeddingModel, draws: usize, seed: u64) -> Result<Vec<PairedDraw>> {
    if draws == 0 {
        return Err(MelaError::InvalidConfig("at least one draw is required".into()));
    }
    let rows = check_cover(md, w)?;
    (0..draws)
        .into_par_iter()
        .map(|i| paired_draw(md, w, &rows, embedding, seed, i))
        .collect()
}

/// Expected meta-GLS risk: subset cross-entropy of the selected rows of `w`
/// on query samples of freshly drawn tasks.
pub fn estimate_gls_risk(md: &MetaDistribution, w: &GlobalClassifier, embedding: &EmbeddingModel, draws: usize, seed: u64) -> Result<RiskEstimate> {
    let values: Vec<f64> = paired_draws(md, w, embedding, draws, seed)?.iter().map(|d| d.gls).collect();
    RiskEstimate::from_values(&values)
}

/// Global multi-class risk of `w` over samples drawn task-first.
pub fn estimate_pretrain_risk(md: &MetaDistribution, w: &GlobalClassifier, embedding: &EmbeddingModel, draws: usize, seed: u64) -> Result<RiskEstimate> {
    let values: Vec<f64> = paired_draws(md, w, embedding, draws, seed)?.iter().map(|d| d.pretrain).collect();
    RiskEstimate::from_values(&values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub gls: RiskEstimate,
    pub pretrain: RiskEstimate,
    /// Aggregate check with a three-standard-error slack.
    pub holds: bool,
    /// Paired draws where the subset loss exceeded the full loss.
    pub pointwise_violations: usize,
}

/// Checks that the meta-GLS risk never exceeds the global risk, pointwise on
/// paired draws and in aggregate.
pub fn verify_theorem1(md: &MetaDistribution, w: &GlobalClassifier, embedding: &EmbeddingModel, draws: usize, seed: u64) -> Result<TheoremReport> {
    let paired = paired_draws(md, w, embedding, draws, seed)?;
    let gls = RiskEstimate::from_values(&paired.iter().map(|d| d.gls).collect::<Vec<_>>())?;
    let pretrain = RiskEstimate::from_values(&paired.iter().map(|d| d.pretrain).collect::<Vec<_>>())?;
    let pointwise_violations = paired.iter().filter(|d| d.gls > d.pretrain).count();
    let slack = 3.0 * gls.std_error.hypot(pretrain.std_error);
    Ok(TheoremReport {
        gls,
        pretrain,
        holds: gls.value <= pretrain.value + slack,
        pointwise_violations,
    })
}

/// Rows of raw query features with their global labels, plus a mask that
/// leaves only each sample's task classes in its softmax.
fn query_problem(tasks: &[Task], classes: usize) -> Result<(DMatrix<f64>, Vec<usize>, DMatrix<f64>)> {
    let dim = tasks
        .first()
        .and_then(Task::dim)
        .ok_or_else(|| MelaError::EmptyDataset("no tasks".into()))?;
    let rows: usize = tasks.iter().map(|t| t.query.len()).sum();
    let mut x = DMatrix::zeros(rows, dim);
    let mut mask = DMatrix::from_element(rows, classes, f64::NEG_INFINITY);
    let mut labels = Vec::with_capacity(rows);
    let mut i = 0;
    for task in tasks {
        let task_classes = task.local_to_global.as_ref().ok_or(MelaError::MissingLabel)?;
        for r in &task.query {
            if r.features.len() != dim {
                return Err(MelaError::DimensionMismatch {
                    expected: dim,
                    got: r.features.len(),
                });
            }
            let y = r.global_label.ok_or(MelaError::MissingLabel)?;
            if y >= classes || task_classes.iter().any(|&c| c >= classes) {
                return Err(MelaError::MissingClass(y.max(*task_classes.iter().max().unwrap_or(&0))));
            }
            x.row_mut(i).copy_from_slice(&r.features);
            for &c in task_classes {
                mask[(i, c)] = 0.0;
            }
            labels.push(y);
            i += 1;
        }
    }
    Ok((x, labels, mask))
}

/// Empirical meta-GLS training: `W` (all `classes` rows) and a linear
/// embedding minimise the mean subset cross-entropy on every task's query
/// set, by the same full-batch descent as pre-training.
pub fn train_meta_gls(tasks: &[Task], classes: usize, init: &LinearEmbedding, cfg: &SoftmaxConfig) -> Result<(GlobalClassifier, LinearEmbedding)> {
    let (x, labels, mask) = query_problem(tasks, classes)?;
    let fit = fit_joint(&x, &labels, Some(&mask), (0..classes).collect(), init, cfg)?;
    Ok((fit.classifier, fit.embedding.expect("joint fit returns an embedding")))
}

/// Joint pre-training on every sample of `tasks`, flattened, over all
/// `classes` global classes (classes absent from the draw keep a row).
pub fn train_pretrain(tasks: &[Task], classes: usize, init: &LinearEmbedding, cfg: &SoftmaxConfig) -> Result<(GlobalClassifier, LinearEmbedding)> {
    let flat = flatten(tasks)?;
    let dim = flat.dim().ok_or_else(|| MelaError::EmptyDataset("no samples".into()))?;
    let mut x = DMatrix::zeros(flat.len(), dim);
    let mut labels = Vec::with_capacity(flat.len());
    for (i, s) in flat.samples.iter().enumerate() {
        x.row_mut(i).copy_from_slice(&s.features);
        // flatten relabels densely; recover the original global id
        let y = flat.class_ids[s.global_label.ok_or(MelaError::MissingLabel)?];
        if y >= classes {
            return Err(MelaError::MissingClass(y));
        }
        labels.push(y);
    }
    let fit = fit_joint(&x, &labels, None, (0..classes).collect(), init, cfg)?;
    Ok((fit.classifier, fit.embedding.expect("joint fit returns an embedding")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateStudyConfig {
    /// Output dimension of the learned linear embedding.
    pub p: usize,
    pub softmax: SoftmaxConfig,
    /// Fresh draws used to evaluate each trained pair.
    pub draws: usize,
    pub seed: u64,
}

impl Default for RateStudyConfig {
    fn default() -> Self {
        Self {
            p: 8,
            softmax: SoftmaxConfig {
                reg: 1e-3,
                ..Default::default()
            },
            draws: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateStudyRow {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "N")]
    pub n: usize,
    /// Both columns are estimated GLS risks on fresh tasks; standard errors
    /// are across seeds.
    pub gls_risk: RiskEstimate,
    pub pretrain_risk: RiskEstimate,
    pub seeds_averaged: usize,
}

/// For each `T`, trains meta-GLS on `T` tasks and pre-training on the same
/// tasks flattened, and compares their GLS risk on fresh draws.
pub fn rate_study(md: &MetaDistribution, t_grid: &[usize], seeds: usize, cfg: &RateStudyConfig) -> Result<Vec<RateStudyRow>> {
    if t_grid.is_empty() || t_grid.contains(&0) || t_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MelaError::InvalidConfig("T grid must be positive and strictly increasing".into()));
    }
    if seeds == 0 {
        return Err(MelaError::InvalidConfig("rate study needs at least one seed".into()));
    }
    md.validate()?;
    let classes = md.num_classes();
    let eval_seed = rng::child_seed(cfg.seed, 0xE7A1);
    let mut rows = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let runs: Vec<(f64, f64)> = (0..seeds)
            .into_par_iter()
            .map(|s| {
                let seed = rng::child_seed(cfg.seed, (t as u64) << 32 | s as u64);
                let tasks = sample_meta_training_set(md, t, seed)?;
                let init = LinearEmbedding::random(md.dim(), cfg.p, rng::child_seed(seed, 1));
                let (w_gls, e_gls) = train_meta_gls(&tasks, classes, &init, &cfg.softmax)?;
                let (w_pre, e_pre) = train_pretrain(&tasks, classes, &init, &cfg.softmax)?;
                let gls = estimate_gls_risk(md, &w_gls, &e_gls.into(), cfg.draws, eval_seed)?;
                let pre = estimate_gls_risk(md, &w_pre, &e_pre.into(), cfg.draws, eval_seed)?;
                Ok((gls.value, pre.value))
            })
            .collect::<Result<_>>()?;
        rows.push(RateStudyRow {
            t,
            n: t * md.task_size(),
            gls_risk: RiskEstimate::from_values(&runs.iter().map(|r| r.0).collect::<Vec<_>>())?,
            pretrain_risk: RiskEstimate::from_values(&runs.iter().map(|r| r.1).collect::<Vec<_>>())?,
            seeds_averaged: seeds,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTestReport {
    pub mean: f64,
    /// Half-width of the normal 95% interval, `1.96 sd / sqrt(T)`.
    pub ci95: f64,
    pub per_task: Vec<f64>,
}

pub fn meta_test(tasks: &[Task], embedding: &EmbeddingModel, builder: Builder<'_>, cfg: &EvalConfig) -> Result<MetaTestReport> {
    if tasks.is_empty() {
        return Err(MelaError::UndefinedMetric("meta-test over zero tasks".into()));
    }
    let per_task: Vec<f64> = tasks
        .par_iter()
        .map(|t| evaluate_task(t, embedding, builder, cfg))
        .collect::<Result<_>>()?;
    let est = RiskEstimate::from_values(&per_task)?;
    Ok(MetaTestReport {
        mean: est.value,
        ci95: 1.96 * est.std_error,
        per_task,
    })
}

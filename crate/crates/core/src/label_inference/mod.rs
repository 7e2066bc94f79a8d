//! Global label inference from locally labelled tasks.
//!
//! Every local class of a task is summarised by the mean of its embedded
//! samples and matched to its nearest global centroid. A task whose `k`
//! classes land on `k` distinct centroids updates those centroids with a
//! running mean; a task that collides is skipped for the sweep. After each
//! sweep, centroids matched far less often than a binomial model predicts are
//! pruned. Sweeps stop once the centroid count no longer changes.

mod domains;
mod kmeans;

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MelaError, Result};
use crate::representation::EmbeddingModel;
use crate::rng;
use crate::taskgen::{FlatDataset, Sample, Task};

pub use domains::infer_domains;
pub use kmeans::{kmeans_baseline, KMeansResult};

/// Which binomial the pruning threshold is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    /// `Binomial(M, 1/V)` with `M` the class matches made in the sweep.
    #[default]
    MatchCount,
    /// `Binomial(T, 1/V)` with `T` the number of tasks.
    TaskCount,
}

/// How the tasks that seed the centroids are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Uniformly without replacement.
    Uniform,
    /// Each next task with probability proportional to the summed squared
    /// distance of its class means to the centroids chosen so far.
    #[default]
    Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub v_init: usize,
    pub q: f64,
    pub max_sweeps: usize,
    pub seed: u64,
    pub prune_mode: PruneMode,
    pub init: InitStrategy,
    /// Fold pruned clusters into their nearest neighbour instead of dropping them.
    pub merge_pruned: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            v_init: 60,
            q: 3.0,
            max_sweeps: 50,
            seed: 0,
            prune_mode: PruneMode::MatchCount,
            init: InitStrategy::Spread,
            merge_pruned: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub centroids: Vec<Vec<f64>>,
    /// `N_v`: one plus the samples absorbed this sweep.
    pub sample_counts: Vec<usize>,
    /// Class matches received this sweep.
    pub match_counts: Vec<usize>,
}

impl ClusterState {
    pub fn new(centroids: Vec<Vec<f64>>) -> Self {
        let v = centroids.len();
        Self {
            centroids,
            sample_counts: vec![1; v],
            match_counts: vec![0; v],
        }
    }

    pub fn num_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> Option<usize> {
        self.centroids.first().map(Vec::len)
    }

    fn reset_counts(&mut self) {
        self.sample_counts.iter_mut().for_each(|c| *c = 1);
        self.match_counts.iter_mut().for_each(|c| *c = 0);
    }

    fn retain(&mut self, keep: &[bool]) {
        let mut it = keep.iter();
        self.centroids.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.sample_counts.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.match_counts.retain(|_| *it.next().unwrap());
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskAssignment {
    pub task_id: usize,
    /// Cluster of each local label, or `None` when the task was discarded.
    pub clusters: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAssignment {
    pub tasks: Vec<TaskAssignment>,
}

impl LabelAssignment {
    pub fn tasks_clustered(&self) -> usize {
        self.tasks.iter().filter(|t| t.clusters.is_some()).count()
    }

    pub fn tasks_discarded(&self) -> usize {
        self.tasks.len() - self.tasks_clustered()
    }

    /// Clusters referenced by at least one retained task, ascending.
    pub fn used_clusters(&self) -> Vec<usize> {
        let mut used: Vec<usize> = self.tasks.iter().flat_map(|t| t.clusters.iter().flatten().copied()).collect();
        used.sort_unstable();
        used.dedup();
        used
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepStats {
    pub clusters_before: usize,
    pub clusters_after: usize,
    pub tasks_matched: usize,
    pub tasks_skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelerOutcome {
    pub state: ClusterState,
    pub assignment: LabelAssignment,
    pub sweeps: Vec<SweepStats>,
}

/// Per-class embedded sums, counts and means of one task.
struct ClassSummary {
    sums: Vec<Vec<f64>>,
    counts: Vec<usize>,
    means: Vec<Vec<f64>>,
}

fn summarise(task: &Task, embedding: &EmbeddingModel) -> Result<ClassSummary> {
    let records: Vec<_> = task.records().cloned().collect();
    let z = embedding.embed_records(&records)?;
    let k = task.way();
    let p = z.ncols();
    let mut sums = vec![vec![0.0; p]; k];
    let mut counts = vec![0; k];
    for (row, r) in z.row_iter().zip(&records) {
        counts[r.local_label] += 1;
        sums[r.local_label].iter_mut().zip(row.iter()).for_each(|(s, v)| *s += v);
    }
    let means = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s.iter().map(|v| v / c as f64).collect())
        .collect();
    Ok(ClassSummary { sums, counts, means })
}

fn summarise_all(tasks: &[Task], embedding: &EmbeddingModel) -> Result<Vec<ClassSummary>> {
    tasks.par_iter().map(|t| summarise(t, embedding)).collect()
}

/// Mean embedding of every support and query sample with `local_label`.
pub fn class_mean(task: &Task, local_label: usize, embedding: &EmbeddingModel) -> Result<Vec<f64>> {
    let records: Vec<_> = task.records().filter(|r| r.local_label == local_label).cloned().collect();
    if records.is_empty() {
        return Err(MelaError::MissingClass(local_label));
    }
    let z: DMatrix<f64> = embedding.embed_records(&records)?;
    Ok(z.row_mean().iter().copied().collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid in squared Euclidean distance; ties go to the lowest index.
pub fn match_class(mean: &[f64], state: &ClusterState) -> Result<usize> {
    if state.centroids.is_empty() {
        return Err(MelaError::EmptyState);
    }
    let mut best = (0, sq_dist(mean, &state.centroids[0]));
    for (v, c) in state.centroids.iter().enumerate().skip(1) {
        let d = sq_dist(mean, c);
        if d < best.1 {
            best = (v, d);
        }
    }
    Ok(best.0)
}

/// Folds `count` samples with embedded sum `sum` into centroid `v`:
/// `g <- (N g + sum) / (N + count)`.
pub fn update_centroid(state: &mut ClusterState, v: usize, sum: &[f64], count: usize) {
    let n = state.sample_counts[v] as f64;
    let total = n + count as f64;
    for (g, s) in state.centroids[v].iter_mut().zip(sum) {
        *g = (n * *g + s) / total;
    }
    state.sample_counts[v] += count;
    state.match_counts[v] += 1;
}

/// Convenience form of [`update_centroid`] taking the samples themselves.
pub fn update_centroid_with(state: &mut ClusterState, v: usize, samples: &[Vec<f64>]) {
    let dim = state.centroids[v].len();
    let mut sum = vec![0.0; dim];
    for s in samples {
        sum.iter_mut().zip(s).for_each(|(a, b)| *a += b);
    }
    update_centroid(state, v, &sum, samples.len());
}

/// `mean - q * sd` of `Binomial(m, 1/v)`.
pub fn prune_threshold(m: f64, v: usize, q: f64) -> f64 {
    let p = 1.0 / v as f64;
    m * p - q * (m * p * (1.0 - p)).sqrt()
}

/// Folds every cluster whose match count is below `threshold` into its
/// nearest surviving neighbour, smallest first. Matches move with it, so a
/// class whose matches were split across several near-duplicate centroids
/// keeps one of them.
fn merge_small(state: &mut ClusterState, threshold: f64) {
    let v = state.num_clusters();
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by_key(|&i| (state.match_counts[i], i));
    let mut alive = vec![true; v];
    for &i in &order {
        if state.match_counts[i] as f64 >= threshold {
            continue;
        }
        let target = (0..v)
            .filter(|&j| j != i && alive[j])
            .min_by(|&a, &b| {
                let da = sq_dist(&state.centroids[i], &state.centroids[a]);
                let db = sq_dist(&state.centroids[i], &state.centroids[b]);
                da.total_cmp(&db).then(a.cmp(&b))
            });
        let Some(j) = target else { break };
        alive[i] = false;
        let (ni, nj) = (state.sample_counts[i] as f64, state.sample_counts[j] as f64);
        let merged: Vec<f64> = state.centroids[i]
            .iter()
            .zip(&state.centroids[j])
            .map(|(a, b)| (ni * a + nj * b) / (ni + nj))
            .collect();
        state.centroids[j] = merged;
        state.sample_counts[j] += state.sample_counts[i];
        state.match_counts[j] += state.match_counts[i];
    }
    state.retain(&alive);
}

fn unique_matches(means: &[Vec<f64>], state: &ClusterState) -> Result<Option<Vec<usize>>> {
    let matches = means.iter().map(|m| match_class(m, state)).collect::<Result<Vec<_>>>()?;
    let mut sorted = matches.clone();
    sorted.sort_unstable();
    sorted.dedup();
    Ok((sorted.len() == matches.len()).then_some(matches))
}

/// Picks the tasks whose class means seed the centroids.
fn initial_tasks(summaries: &[ClassSummary], count: usize, init: InitStrategy, gen: &mut rng::StreamRng) -> Vec<usize> {
    match init {
        InitStrategy::Uniform => rand::seq::index::sample(gen, summaries.len(), count).into_vec(),
        InitStrategy::Spread => {
            let mut chosen = vec![gen.random_range(0..summaries.len())];
            let mut nearest: Vec<Vec<f64>> = summaries.iter().map(|s| vec![f64::INFINITY; s.means.len()]).collect();
            while chosen.len() < count {
                let last = &summaries[*chosen.last().unwrap()];
                let weights: Vec<f64> = summaries
                    .iter()
                    .zip(nearest.iter_mut())
                    .enumerate()
                    .map(|(t, (s, best))| {
                        for (b, m) in best.iter_mut().zip(&s.means) {
                            for c in &last.means {
                                *b = b.min(sq_dist(m, c));
                            }
                        }
                        if chosen.contains(&t) {
                            0.0
                        } else {
                            best.iter().sum()
                        }
                    })
                    .collect();
                let next = match WeightedIndex::new(&weights) {
                    Ok(dist) => dist.sample(gen),
                    // every remaining task coincides with a centroid
                    Err(_) => (0..summaries.len()).find(|t| !chosen.contains(t)).unwrap(),
                };
                chosen.push(next);
            }
            chosen
        }
    }
}

fn validate_config(cfg: &InferenceConfig, tasks: &[Task]) -> Result<usize> {
    let k = tasks.iter().map(Task::way).max().ok_or_else(|| MelaError::EmptyDataset("no tasks to cluster".into()))?;
    if cfg.v_init < k {
        return Err(MelaError::InvalidConfig(format!("v_init = {} is below the task way {k}", cfg.v_init)));
    }
    if !(cfg.q >= 0.0) {
        return Err(MelaError::InvalidConfig("q must be non-negative".into()));
    }
    let needed = cfg.v_init.div_ceil(k);
    if tasks.len() < needed {
        return Err(MelaError::InvalidConfig(format!(
            "{needed} tasks are needed to initialise {} clusters, got {}",
            cfg.v_init,
            tasks.len()
        )));
    }
    Ok(needed)
}

/// Runs the constrained clustering sweeps and a final read-only assignment.
pub fn learn_labeler(tasks: &[Task], embedding: &EmbeddingModel, cfg: &InferenceConfig) -> Result<LabelerOutcome> {
    let init_tasks = validate_config(cfg, tasks)?;
    let summaries = summarise_all(tasks, embedding)?;
    let mut gen = rng::seeded(cfg.seed);

    let chosen = initial_tasks(&summaries, init_tasks, cfg.init, &mut gen);
    let mut centroids: Vec<Vec<f64>> = chosen.iter().flat_map(|&t| summaries[t].means.iter().cloned()).collect();
    centroids.truncate(cfg.v_init);
    let mut state = ClusterState::new(centroids);

    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.shuffle(&mut gen);

    let mut sweeps = Vec::new();
    for _ in 0..cfg.max_sweeps {
        let before = state.num_clusters();
        state.reset_counts();
        let (mut matched, mut skipped) = (0, 0);
        for &t in &order {
            let s = &summaries[t];
            match unique_matches(&s.means, &state)? {
                Some(clusters) => {
                    for (c, &v) in clusters.iter().enumerate() {
                        update_centroid(&mut state, v, &s.sums[c], s.counts[c]);
                    }
                    matched += 1;
                }
                None => skipped += 1,
            }
        }
        let trials = match cfg.prune_mode {
            PruneMode::MatchCount => state.match_counts.iter().sum::<usize>(),
            PruneMode::TaskCount => tasks.len(),
        };
        let threshold = prune_threshold(trials as f64, before, cfg.q);
        if cfg.merge_pruned {
            merge_small(&mut state, threshold);
        } else {
            let keep: Vec<bool> = state.match_counts.iter().map(|&c| c as f64 >= threshold).collect();
            state.retain(&keep);
        }
        sweeps.push(SweepStats {
            clusters_before: before,
            clusters_after: state.num_clusters(),
            tasks_matched: matched,
            tasks_skipped: skipped,
        });
        if state.num_clusters() == before {
            break;
        }
    }
    let assignment = assign_with(tasks, &summaries, &state)?;
    Ok(LabelerOutcome {
        state,
        assignment,
        sweeps,
    })
}

/// Read-only pass: matches every task against frozen centroids and discards
/// tasks whose classes collide.
pub fn assign_tasks(tasks: &[Task], embedding: &EmbeddingModel, state: &ClusterState) -> Result<LabelAssignment> {
    let summaries = summarise_all(tasks, embedding)?;
    assign_with(tasks, &summaries, state)
}

fn assign_with(tasks: &[Task], summaries: &[ClassSummary], state: &ClusterState) -> Result<LabelAssignment> {
    let tasks = tasks
        .par_iter()
        .zip(summaries)
        .map(|(task, s)| {
            Ok(TaskAssignment {
                task_id: task.task_id,
                clusters: unique_matches(&s.means, state)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabelAssignment { tasks })
}

/// Majority-label accuracy of `(cluster, truth)` pairs; ties pick the lowest label.
pub fn clustering_accuracy(pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(MelaError::UndefinedMetric("no assignments to score".into()));
    }
    let mut hist: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for &(cluster, truth) in pairs {
        *hist.entry(cluster).or_default().entry(truth).or_default() += 1;
    }
    let correct: usize = hist
        .values()
        .map(|counts| {
            // BTreeMap iterates labels ascending, so `>` keeps the lowest on ties
            counts.values().fold(0, |best, &c| if c > best { c } else { best })
        })
        .sum();
    Ok(correct as f64 / pairs.len() as f64)
}

/// `(cluster, true global label)` for every local class of every retained task.
pub fn assignment_pairs(tasks: &[Task], assignment: &LabelAssignment) -> Result<Vec<(usize, usize)>> {
    let mut pairs = Vec::new();
    for (task, a) in tasks.iter().zip(&assignment.tasks) {
        if let Some(clusters) = &a.clusters {
            let truth = task.local_to_global.as_ref().ok_or(MelaError::MissingLabel)?;
            pairs.extend(clusters.iter().copied().zip(truth.iter().copied()));
        }
    }
    Ok(pairs)
}

/// Flattens the retained tasks with cluster ids as labels, relabelled densely.
pub fn label_dataset(tasks: &[Task], assignment: &LabelAssignment) -> Result<FlatDataset> {
    if tasks.len() != assignment.tasks.len() {
        return Err(MelaError::DimensionMismatch {
            expected: tasks.len(),
            got: assignment.tasks.len(),
        });
    }
    let mut samples = Vec::new();
    for (task, a) in tasks.iter().zip(&assignment.tasks) {
        let Some(clusters) = &a.clusters else { continue };
        samples.extend(task.records().map(|r| Sample {
            id: r.sample_id,
            features: r.features.clone(),
            global_label: Some(clusters[r.local_label]),
            domain_id: None,
            shape: None,
        }));
    }
    if samples.is_empty() {
        return Err(MelaError::EmptyDataset("every task was discarded".into()));
    }
    Ok(FlatDataset::from_samples(samples))
}

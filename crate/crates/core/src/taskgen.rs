//! Synthetic meta-distributions, episodic tasks and flat datasets.
//!
//! A [`MetaDistribution`] holds one Gaussian per global class. A task draws
//! `k` distinct classes (all from one domain when domains are configured),
//! `n` support samples per class and `m` query samples with labels drawn
//! uniformly over the task's classes. Local labels are a random permutation
//! of the chosen classes; the hidden local-to-global map is kept only for
//! scoring.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MelaError, Result};
use crate::rng;

/// One labelled example of a flat dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
    pub global_label: Option<usize>,
    pub domain_id: Option<usize>,
    /// `(h, w)` when `features` is a row-major flattened grid.
    pub shape: Option<(usize, usize)>,
}

/// One row of a task: a sample seen with its task-local label.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub sample_id: u64,
    pub features: Vec<f64>,
    pub local_label: usize,
    /// Ground truth, never read by learners.
    pub global_label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub task_id: usize,
    pub support: Vec<Record>,
    pub query: Vec<Record>,
    pub local_to_global: Option<Vec<usize>>,
}

impl Task {
    /// Number of classes (ways) in the task.
    pub fn way(&self) -> usize {
        self.support
            .iter()
            .chain(&self.query)
            .map(|r| r.local_label + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.support.len() + self.query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Support records followed by query records.
    pub fn records(&self) -> impl Iterator<Item = &Record> {
        self.support.iter().chain(self.query.iter())
    }

    pub fn dim(&self) -> Option<usize> {
        self.records().next().map(|r| r.features.len())
    }

    /// Checks that local labels form the dense range `0..k` in the support set
    /// and that query labels stay inside it.
    pub fn validate(&self) -> Result<()> {
        let k = self.way();
        let present: BTreeSet<usize> = self.support.iter().map(|r| r.local_label).collect();
        if present.len() != k || present.iter().copied().ne(0..k) {
            return Err(MelaError::InvalidConfig(format!(
                "task {}: support local labels are not the dense range 0..{}",
                self.task_id, k
            )));
        }
        if let Some(map) = &self.local_to_global {
            if map.len() != k {
                return Err(MelaError::InvalidConfig(format!(
                    "task {}: local_to_global has {} entries for {} classes",
                    self.task_id,
                    map.len(),
                    k
                )));
            }
        }
        Ok(())
    }
}

/// Parameters for generating a planted meta-distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedSpec {
    pub classes: usize,
    /// Input dimension; ignored when `grid` is set.
    pub dim: usize,
    pub grid: Option<(usize, usize)>,
    /// Norm of every class mean. Defaults to `4 * noise_std`.
    pub separation: Option<f64>,
    pub noise_std: f64,
    pub k: usize,
    pub n: usize,
    pub m: usize,
    /// Number of disjoint class groups; tasks never mix groups. `1` disables domains.
    pub domains: usize,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            classes: 20,
            dim: 32,
            grid: None,
            separation: None,
            noise_std: 0.25,
            k: 5,
            n: 5,
            m: 15,
            domains: 1,
            seed: 0,
        }
    }
}

/// Generative description of a task distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaDistribution {
    pub class_means: Vec<Vec<f64>>,
    pub noise_std: f64,
    pub k: usize,
    pub n: usize,
    pub m: usize,
    pub domain_of_class: Option<Vec<usize>>,
    pub grid: Option<(usize, usize)>,
    pub seed: u64,
}

impl MetaDistribution {
    pub fn new(
        class_means: Vec<Vec<f64>>,
        noise_std: f64,
        k: usize,
        n: usize,
        m: usize,
        domain_of_class: Option<Vec<usize>>,
        seed: u64,
    ) -> Result<Self> {
        let md = Self {
            class_means,
            noise_std,
            k,
            n,
            m,
            domain_of_class,
            grid: None,
            seed,
        };
        md.validate()?;
        Ok(md)
    }

    /// Builds class means as `separation`-scaled unit vectors: an orthonormal
    /// set when there are no more classes than dimensions, independent random
    /// directions otherwise.
    pub fn planted(spec: &PlantedSpec) -> Result<Self> {
        let dim = match spec.grid {
            Some((h, w)) => h * w,
            None => spec.dim,
        };
        if dim == 0 {
            return Err(MelaError::InvalidConfig("dimension must be positive".into()));
        }
        if spec.domains == 0 {
            return Err(MelaError::InvalidConfig("domains must be at least 1".into()));
        }
        let scale = spec.separation.unwrap_or(4.0 * spec.noise_std);
        let mut gen = rng::seeded(rng::child_seed(spec.seed, 0x6d65616e));
        let directions = if spec.classes <= dim {
            random_orthonormal(spec.classes, dim, &mut gen)
        } else {
            (0..spec.classes)
                .map(|_| {
                    let v: Vec<f64> = (0..dim).map(|_| gen.sample(StandardNormal)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.into_iter().map(|x| x / norm).collect()
                })
                .collect()
        };
        let class_means = directions
            .into_iter()
            .map(|u: Vec<f64>| u.into_iter().map(|x| x * scale).collect())
            .collect();
        let domain_of_class = (spec.domains > 1)
            .then(|| (0..spec.classes).map(|c| c * spec.domains / spec.classes).collect());
        let md = Self {
            class_means,
            noise_std: spec.noise_std,
            k: spec.k,
            n: spec.n,
            m: spec.m,
            domain_of_class,
            grid: spec.grid,
            seed: spec.seed,
        };
        md.validate()?;
        Ok(md)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        if self.k < 2 {
            return Err(MelaError::InvalidConfig(format!("k = {} must be at least 2", self.k)));
        }
        if self.k > c {
            return Err(MelaError::InvalidConfig(format!(
                "k = {} exceeds the number of classes {}",
                self.k, c
            )));
        }
        if self.n == 0 || self.m == 0 {
            return Err(MelaError::InvalidConfig("n and m must be at least 1".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(MelaError::InvalidConfig("noise_std must be finite and non-negative".into()));
        }
        let d = self.dim();
        if d == 0 || self.class_means.iter().any(|m| m.len() != d) {
            return Err(MelaError::InvalidConfig("class means must share a positive dimension".into()));
        }
        if let Some((h, w)) = self.grid {
            if h * w != d {
                return Err(MelaError::InvalidConfig(format!("grid {h}x{w} does not match dimension {d}")));
            }
        }
        for i in 0..c {
            for j in 0..i {
                if self.class_means[i] == self.class_means[j] {
                    return Err(MelaError::InvalidConfig(format!("class means {j} and {i} coincide")));
                }
            }
        }
        if let Some(domains) = &self.domain_of_class {
            if domains.len() != c {
                return Err(MelaError::InvalidConfig("domain_of_class must cover every class".into()));
            }
            for (domain, members) in self.domain_members() {
                if members.len() < self.k {
                    return Err(MelaError::InvalidConfig(format!(
                        "domain {domain} has {} classes, fewer than k = {}",
                        members.len(),
                        self.k
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn dim(&self) -> usize {
        self.class_means.first().map_or(0, Vec::len)
    }

    /// Samples per task: `n * k + m`.
    pub fn task_size(&self) -> usize {
        self.n * self.k + self.m
    }

    fn domain_members(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        match &self.domain_of_class {
            Some(domains) => {
                for (class, &domain) in domains.iter().enumerate() {
                    groups.entry(domain).or_default().push(class);
                }
            }
            None => {
                groups.insert(0, (0..self.num_classes()).collect());
            }
        }
        groups
    }

    /// One draw from the class-conditional `N(mean_y, noise_std^2 I)`.
    pub fn draw_features<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Vec<f64> {
        self.class_means[class]
            .iter()
            .map(|&mu| {
                let z: f64 = rng.sample(StandardNormal);
                mu + self.noise_std * z
            })
            .collect()
    }

    /// A flat dataset with `per_class` samples of every class, ordered by class.
    pub fn sample_flat(&self, per_class: usize, seed: u64) -> FlatDataset {
        let mut gen = rng::seeded(seed);
        let mut samples = Vec::with_capacity(per_class * self.num_classes());
        for class in 0..self.num_classes() {
            for _ in 0..per_class {
                samples.push(Sample {
                    id: samples.len() as u64,
                    features: self.draw_features(class, &mut gen),
                    global_label: Some(class),
                    domain_id: self.domain_of_class.as_ref().map(|d| d[class]),
                    shape: self.grid,
                });
            }
        }
        FlatDataset {
            samples,
            num_classes: self.num_classes(),
            class_ids: (0..self.num_classes()).collect(),
            augmented: false,
        }
    }
}

fn random_orthonormal<R: Rng + ?Sized>(count: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        // two Gram-Schmidt passes for numerical orthogonality
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Draws one episode from `md`.
pub fn sample_task<R: Rng + ?Sized>(md: &MetaDistribution, task_id: usize, rng: &mut R) -> Result<Task> {
    md.validate()?;
    let groups = md.domain_members();
    let domains: Vec<&Vec<usize>> = groups.values().collect();
    let pool = domains[rng.random_range(0..domains.len())];

    let mut classes: Vec<usize> = rand::seq::index::sample(rng, pool.len(), md.k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    classes.shuffle(rng);

    let base_id = (task_id * md.task_size()) as u64;
    let mut next_id = base_id;
    let mut record = |local: usize, rng: &mut R| {
        let global = classes[local];
        let r = Record {
            sample_id: next_id,
            features: md.draw_features(global, rng),
            local_label: local,
            global_label: Some(global),
        };
        next_id += 1;
        r
    };

    let mut support = Vec::with_capacity(md.n * md.k);
    for local in 0..md.k {
        for _ in 0..md.n {
            support.push(record(local, rng));
        }
    }
    let mut query = Vec::with_capacity(md.m);
    for _ in 0..md.m {
        let local = rng.random_range(0..md.k);
        query.push(record(local, rng));
    }
    Ok(Task {
        task_id,
        support,
        query,
        local_to_global: Some(classes),
    })
}

/// `tasks` independent episodes; task `t` uses random stream `t` of `seed`.
pub fn sample_meta_training_set(md: &MetaDistribution, tasks: usize, seed: u64) -> Result<Vec<Task>> {
    if tasks == 0 {
        return Err(MelaError::InvalidConfig("meta-training set needs at least one task".into()));
    }
    md.validate()?;
    (0..tasks)
        .into_par_iter()
        .map(|t| sample_task(md, t, &mut rng::stream(seed, t as u64)))
        .collect()
}

/// How queries are drawn when partitioning a finite pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySampling {
    /// `m` samples uniformly from the union of the chosen classes' remaining pools.
    #[default]
    Pooled,
    /// Exactly `m / k` samples per chosen class; requires `k` to divide `m`.
    Balanced,
}

/// Splits a labelled pool into disjoint episodes without reusing any sample.
///
/// Classes are drawn per task among those that still hold at least `n + 1`
/// samples (`n + m / k` under balanced sampling). When a random draw cannot
/// supply `m` queries, the `k` fullest eligible classes are tried instead;
/// if those also fall short, partitioning stops.
pub fn gfsl_partition<R: Rng + ?Sized>(
    ds: &FlatDataset,
    k: usize,
    n: usize,
    m: usize,
    sampling: QuerySampling,
    rng: &mut R,
) -> Result<Vec<Task>> {
    if k < 2 || n == 0 || m == 0 {
        return Err(MelaError::InvalidConfig("gfsl_partition needs k >= 2, n >= 1, m >= 1".into()));
    }
    if sampling == QuerySampling::Balanced && m % k != 0 {
        return Err(MelaError::InvalidConfig(format!("balanced queries need k = {k} to divide m = {m}")));
    }
    let mut pools: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, s) in ds.samples.iter().enumerate() {
        let label = s.global_label.ok_or(MelaError::MissingLabel)?;
        pools.entry(label).or_default().push(idx);
    }
    for pool in pools.values_mut() {
        pool.shuffle(rng);
    }
    let min_remaining = match sampling {
        QuerySampling::Pooled => n + 1,
        QuerySampling::Balanced => n + m / k,
    };

    let mut tasks = Vec::new();
    loop {
        let mut eligible: Vec<usize> = pools
            .iter()
            .filter(|(_, p)| p.len() >= min_remaining)
            .map(|(&c, _)| c)
            .collect();
        if eligible.len() < k {
            break;
        }
        eligible.shuffle(rng);
        let mut chosen: Vec<usize> = eligible[..k].to_vec();
        if sampling == QuerySampling::Pooled {
            let spare = |cs: &[usize]| cs.iter().map(|c| pools[c].len() - n).sum::<usize>();
            if spare(&chosen) < m {
                eligible.sort_by_key(|c| (std::cmp::Reverse(pools[c].len()), *c));
                chosen = eligible[..k].to_vec();
                chosen.shuffle(rng);
                if spare(&chosen) < m {
                    break;
                }
            }
        }

        let task_id = tasks.len();
        let make = |idx: usize, local: usize| {
            let s = &ds.samples[idx];
            Record {
                sample_id: s.id,
                features: s.features.clone(),
                local_label: local,
                global_label: s.global_label,
            }
        };
        let mut support = Vec::with_capacity(n * k);
        for (local, c) in chosen.iter().enumerate() {
            let pool = pools.get_mut(c).expect("chosen class has a pool");
            for _ in 0..n {
                let idx = pool.pop().expect("eligible pool holds n samples");
                support.push(make(idx, local));
            }
        }
        let mut query = Vec::with_capacity(m);
        match sampling {
            QuerySampling::Balanced => {
                for (local, c) in chosen.iter().enumerate() {
                    let pool = pools.get_mut(c).expect("chosen class has a pool");
                    for _ in 0..m / k {
                        let idx = pool.pop().expect("eligible pool holds m / k queries");
                        query.push(make(idx, local));
                    }
                }
                query.shuffle(rng);
            }
            QuerySampling::Pooled => {
                let mut union: Vec<(usize, usize)> = Vec::new();
                for (local, c) in chosen.iter().enumerate() {
                    union.extend(pools[c].iter().enumerate().map(|(pos, _)| (local, pos)));
                }
                let picks = rand::seq::index::sample(rng, union.len(), m).into_vec();
                let mut taken: Vec<Vec<usize>> = vec![Vec::new(); k];
                for &p in &picks {
                    let (local, pos) = union[p];
                    taken[local].push(pos);
                    query.push(make(pools[&chosen[local]][pos], local));
                }
                for (local, mut positions) in taken.into_iter().enumerate() {
                    positions.sort_unstable_by(|a, b| b.cmp(a));
                    let pool = pools.get_mut(&chosen[local]).expect("chosen class has a pool");
                    for pos in positions {
                        pool.swap_remove(pos);
                    }
                }
            }
        }
        tasks.push(Task {
            task_id,
            support,
            query,
            local_to_global: Some(chosen),
        });
    }
    Ok(tasks)
}

/// A labelled (or unlabelled) pool of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatDataset {
    pub samples: Vec<Sample>,
    /// Number of distinct labels; labels are dense in `0..num_classes`.
    pub num_classes: usize,
    /// Original identifier of each dense label.
    pub class_ids: Vec<usize>,
    /// Set once rotation augmentation has been applied.
    pub augmented: bool,
}

impl FlatDataset {
    /// Builds a dataset from raw labels, remapping them to a dense range.
    pub fn from_samples(mut samples: Vec<Sample>) -> Self {
        let distinct: BTreeSet<usize> = samples.iter().filter_map(|s| s.global_label).collect();
        let class_ids: Vec<usize> = distinct.into_iter().collect();
        let dense: BTreeMap<usize, usize> = class_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        for s in &mut samples {
            s.global_label = s.global_label.map(|l| dense[&l]);
        }
        Self {
            num_classes: class_ids.len(),
            class_ids,
            samples,
            augmented: false,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.features.len())
    }

    pub fn is_labeled(&self) -> bool {
        self.samples.iter().all(|s| s.global_label.is_some())
    }

    /// Keeps the first occurrence of every sample id.
    pub fn dedup_by_id(mut self) -> Self {
        let mut seen = HashSet::new();
        self.samples.retain(|s| seen.insert(s.id));
        self
    }

    pub fn labels(&self) -> Result<Vec<usize>> {
        self.samples
            .iter()
            .map(|s| s.global_label.ok_or(MelaError::MissingLabel))
            .collect()
    }
}

/// Concatenates every task's support then query records, in task order.
///
/// Ground-truth global labels are attached when every record carries one;
/// otherwise the result is unlabelled and the caller attaches inferred labels.
pub fn flatten(tasks: &[Task]) -> Result<FlatDataset> {
    if tasks.is_empty() {
        return Err(MelaError::EmptyDataset("no tasks to flatten".into()));
    }
    let labelled = tasks.iter().flat_map(Task::records).all(|r| r.global_label.is_some());
    let samples = tasks
        .iter()
        .flat_map(Task::records)
        .map(|r| Sample {
            id: r.sample_id,
            features: r.features.clone(),
            global_label: if labelled { r.global_label } else { None },
            domain_id: None,
            shape: None,
        })
        .collect();
    Ok(FlatDataset::from_samples(samples))
}

use rayon::prelude::*;

use crate::error::{MelaError, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after every assignment step.
    pub objective: Vec<f64>,
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d: f64 = point.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Lloyd's algorithm from `k` distinct random points. Stops when assignments
/// stop changing or after `iters` rounds; empty clusters keep their centroid.
pub fn kmeans_baseline(points: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> Result<KMeansResult> {
    if k == 0 || k > points.len() {
        return Err(MelaError::InvalidConfig(format!("k = {k} must be in 1..={}", points.len())));
    }
    let dim = points[0].len();
    let mut gen = rng::seeded(seed);
    let mut centroids: Vec<Vec<f64>> = rand::seq::index::sample(&mut gen, points.len(), k)
        .iter()
        .map(|i| points[i].clone())
        .collect();
    let mut assignments: Vec<usize> = Vec::new();
    let mut objective = Vec::new();
    for _ in 0..iters.max(1) {
        let step: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p, &centroids)).collect();
        let next: Vec<usize> = step.iter().map(|s| s.0).collect();
        objective.push(step.iter().map(|s| s.1).sum());
        if next == assignments {
            break;
        }
        assignments = next;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
    }
    Ok(KMeansResult {
        assignments,
        centroids,
        objective,
    })
}

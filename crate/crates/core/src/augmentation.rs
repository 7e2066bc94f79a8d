//! Rotation augmentation: every grid is also seen rotated by 90, 180 and
//! 270 degrees, each rotation forming its own set of classes.

use nalgebra::DMatrix;

use crate::error::{MelaError, Result};
use crate::taskgen::{FlatDataset, Sample};

/// 90 degrees clockwise: `out[i][j] = in[h-1-j][i]`, done as a transpose
/// followed by a horizontal flip.
pub fn rotate90(grid: &DMatrix<f64>) -> DMatrix<f64> {
    let t = grid.transpose();
    let cols = t.ncols();
    DMatrix::from_fn(t.nrows(), cols, |i, j| t[(i, cols - 1 - j)])
}

/// Row-major features of shape `(h, w)` as a matrix.
pub fn as_grid(features: &[f64], shape: (usize, usize)) -> Result<DMatrix<f64>> {
    let (h, w) = shape;
    if h == 0 || w == 0 || h * w != features.len() {
        return Err(MelaError::Shape(format!(
            "{} features do not form a {h}x{w} grid",
            features.len()
        )));
    }
    Ok(DMatrix::from_row_slice(h, w, features))
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect()
}

/// Quadruples samples and classes. Rotation `r` (in quarter turns) maps
/// label `y` to `y + C r`; the unrotated copies come first, unchanged.
pub fn augment_rotations(ds: &FlatDataset) -> Result<FlatDataset> {
    if ds.augmented {
        return Err(MelaError::AlreadyAugmented);
    }
    let c = ds.num_classes;
    let id_stride = ds.samples.iter().map(|s| s.id).max().map_or(0, |m| m + 1);
    let class_stride = ds.class_ids.iter().max().map_or(0, |m| m + 1);

    let mut grids = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let shape = s.shape.ok_or_else(|| MelaError::Shape(format!("sample {} is not a grid", s.id)))?;
        let label = s.global_label.ok_or(MelaError::MissingLabel)?;
        grids.push((as_grid(&s.features, shape)?, label));
    }

    let mut samples: Vec<Sample> = ds.samples.clone();
    samples.reserve(3 * ds.len());
    for r in 1..4u64 {
        for ((grid, label), s) in grids.iter_mut().zip(&ds.samples) {
            *grid = rotate90(grid);
            samples.push(Sample {
                id: s.id + r * id_stride,
                features: row_major(grid),
                global_label: Some(*label + c * r as usize),
                domain_id: s.domain_id,
                shape: Some(grid.shape()),
            });
        }
    }
    let class_ids = (0..4).flat_map(|r| ds.class_ids.iter().map(move |&id| id + r * class_stride)).collect();
    Ok(FlatDataset {
        samples,
        num_classes: 4 * c,
        class_ids,
        augmented: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rotates_clockwise() {
        // [[a, b], [c, d]] -> [[c, a], [d, b]]
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(rotate90(&g), DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 4.0, 2.0]));
        let one = DMatrix::from_element(1, 1, 7.0);
        assert_eq!(rotate90(&one), one);
    }

    #[test]
    fn rectangular_rotation_matches_index_formula() {
        let g = DMatrix::from_fn(2, 3, |i, j| (10 * i + j) as f64);
        let r = rotate90(&g);
        assert_eq!(r.shape(), (3, 2));
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(r[(i, j)], g[(2 - 1 - j, i)]);
            }
        }
    }

    fn grid_dataset(n: usize, c: usize) -> FlatDataset {
        FlatDataset::from_samples(
            (0..n)
                .map(|i| Sample {
                    id: i as u64,
                    features: (0..9).map(|j| (i * 9 + j) as f64).collect(),
                    global_label: Some(i % c),
                    domain_id: None,
                    shape: Some((3, 3)),
                })
                .collect(),
        )
    }

    #[test]
    fn quadruples_samples_and_classes() {
        let ds = grid_dataset(100, 10);
        let aug = augment_rotations(&ds).unwrap();
        assert_eq!(aug.len(), 400);
        assert_eq!(aug.num_classes, 40);
        assert_eq!(&aug.samples[..100], &ds.samples[..]);
        // class 3 rotated 180 degrees
        let s = aug.samples.iter().find(|s| s.id == 3 + 2 * 100).unwrap();
        assert_eq!(s.global_label, Some(23));
        let mut hist = vec![0; 40];
        aug.samples.iter().for_each(|s| hist[s.global_label.unwrap()] += 1);
        assert!(hist.iter().all(|&h| h == 10));
        let mut ids: Vec<u64> = aug.samples.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 400);
    }

    #[test]
    fn refuses_to_augment_twice_or_non_grids() {
        let aug = augment_rotations(&grid_dataset(8, 2)).unwrap();
        assert!(matches!(augment_rotations(&aug), Err(MelaError::AlreadyAugmented)));
        let mut flat = grid_dataset(4, 2);
        flat.samples[1].shape = None;
        assert!(matches!(augment_rotations(&flat), Err(MelaError::Shape(_))));
    }

    proptest! {
        #[test]
        fn four_turns_are_identity(h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
            use rand::Rng;
            let mut gen = crate::rng::seeded(seed);
            let g = DMatrix::from_fn(h, w, |_, _| gen.random_range(-1.0..1.0));
            let r = rotate90(&rotate90(&rotate90(&rotate90(&g))));
            prop_assert_eq!(&r, &g);
            let mut a: Vec<f64> = rotate90(&g).iter().copied().collect();
            let mut b: Vec<f64> = g.iter().copied().collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }
    }
}

//! Randomized invariants over the geometric and statistical primitives.

use proptest::prelude::*;

use pc_adapter::geometry::{
    distance, farthest_point_sample, knn_graph, normalize_unit_cube, read_dataset, write_dataset,
    PointCloud,
};
use pc_adapter::pseudolabel::{beta_cdf, fit_beta_mom, BetaParams};
use pc_adapter::shape_adapter::relative_positional_encoding;

fn cloud_strategy(max_points: usize) -> impl Strategy<Value = PointCloud> {
    (2..=max_points)
        .prop_flat_map(|n| {
            proptest::collection::vec(
                [
                    -10.0..10.0f64,
                    -10.0..10.0f64,
                    -10.0..10.0f64,
                ],
                n,
            )
        })
        .prop_map(|points| PointCloud::new(points, None))
}

proptest! {
    #[test]
    fn normalization_fits_unit_cube_and_is_idempotent(cloud in cloud_strategy(32)) {
        let once = normalize_unit_cube(&cloud).unwrap();
        let (lo, hi) = once.bounding_box();
        for a in 0..3 {
            prop_assert!(lo[a] >= -0.5 - 1e-9);
            prop_assert!(hi[a] <= 0.5 + 1e-9);
        }
        let twice = normalize_unit_cube(&once).unwrap();
        for (p, q) in once.points.iter().zip(&twice.points) {
            for a in 0..3 {
                prop_assert!((p[a] - q[a]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fps_size_and_uniqueness(cloud in cloud_strategy(48), ratio in 0.05..1.0f64) {
        let subset = farthest_point_sample(&cloud, ratio, 0).unwrap();
        let expect = ((ratio * cloud.len() as f64).round() as usize).max(1);
        prop_assert_eq!(subset.indices.len(), expect);
        let mut seen = subset.indices.clone();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), subset.indices.len());
        prop_assert!(subset.indices.iter().all(|&i| i < cloud.len()));
    }

    #[test]
    fn knn_neighbors_sorted_no_self(cloud in cloud_strategy(32), k in 1usize..8) {
        let subset = farthest_point_sample(&cloud, 0.5, 0).unwrap();
        let graph = knn_graph(&cloud, &subset, k).unwrap();
        for (ci, ns) in graph.centers.indices.iter().zip(&graph.neighbors) {
            prop_assert_eq!(ns.len(), k.min(cloud.len() - 1));
            prop_assert!(!ns.contains(ci));
            let d: Vec<f64> = ns
                .iter()
                .map(|&j| distance(&cloud.points[*ci], &cloud.points[j]))
                .collect();
            for w in d.windows(2) {
                prop_assert!(w[0] <= w[1] + 1e-12);
            }
        }
    }

    #[test]
    fn encoding_rows_sum_to_one(cloud in cloud_strategy(16)) {
        let enc = relative_positional_encoding(&cloud.points);
        let n = cloud.len();
        for i in 0..n {
            let sum: f64 = (0..n).filter(|&j| j != i).map(|j| enc.sigma.get(i, j)).sum();
            prop_assert!((sum - 1.0).abs() < 1e-9, "row {} sums to {}", i, sum);
            prop_assert_eq!(enc.sigma.get(i, i), 0.0);
        }
    }

    #[test]
    fn beta_cdf_monotone_and_bounded(
        alpha in 0.2..10.0f64,
        beta in 0.2..10.0f64,
        a in 0.0..1.0f64,
        b in 0.0..1.0f64,
    ) {
        let params = BetaParams::new(alpha, beta);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let clo = beta_cdf(lo, &params).unwrap();
        let chi = beta_cdf(hi, &params).unwrap();
        prop_assert!((0.0..=1.0).contains(&clo));
        prop_assert!((0.0..=1.0).contains(&chi));
        prop_assert!(clo <= chi + 1e-12);
    }

    #[test]
    fn beta_fit_matches_sample_moments(mean in 0.05..0.95f64, spread in 0.05..0.9f64) {
        // variance below the mean(1-mean) bound keeps the fit valid
        let variance = mean * (1.0 - mean) * spread;
        let fit = fit_beta_mom(mean, variance);
        prop_assert!(fit.valid);
        prop_assert!((fit.mean() - mean).abs() < 1e-9);
        prop_assert!((fit.variance() - variance).abs() < 1e-9);
    }

    #[test]
    fn dataset_round_trip(clouds in proptest::collection::vec(cloud_strategy(8), 1..4)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clouds.ds");
        write_dataset(&path, &clouds).unwrap();
        let back = read_dataset(&path).unwrap();
        prop_assert_eq!(back, clouds);
    }
}

//! Shape-aware adapter: a single self-attention layer over FPS points with
//! cosine-similarity weights and relative positional encoding.
//!
//! For FPS point i, the output is
//!   sum_{j != i} w_ij * (phi(F_j) + sigma_ij)
//! where w_ij is the cosine similarity of feature rows i and j, phi is one
//! linear projection, and the scalar sigma_ij is broadcast-added to every
//! component of phi(F_j).

use crate::nn::{GroupTag, Mat, ParamMatrix};

/// The adapter holds exactly one linear projection; no attention stacking.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeAdapter {
    pub phi: ParamMatrix, // D x D
}

impl ShapeAdapter {
    /// The projection starts at zero so a fresh adapter perturbs the
    /// backbone's pooled representation as little as possible; gradients
    /// through the attention weights remain nonzero, so it trains normally.
    pub fn new(feat_dim: usize) -> Self {
        ShapeAdapter {
            phi: ParamMatrix::zeros(
                "shape_adapter.phi",
                GroupTag::ShapeAdapter,
                feat_dim,
                feat_dim,
            ),
        }
    }
}

/// Pairwise positional weights over FPS points. Diagonal entries are zero;
/// each non-degenerate row's off-diagonal entries sum to 1, and the entry
/// toward the row's farthest point is exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeEncoding {
    pub sigma: Mat, // m' x m'
    /// rows that fell back to uniform weights because all relative
    /// distances were degenerate (e.g. m' = 2 or coincident points)
    pub degenerate_rows: Vec<usize>,
}

/// sigma_ij = (d_i* - d_ij) / sum_{n != i} (d_i* - d_in), with d_i* the
/// maximum distance from point i. Degenerate rows (zero denominator) fall
/// back to uniform 1/(m'-1) and are reported.
pub fn relative_positional_encoding(fps_coords: &[[f64; 3]]) -> RelativeEncoding {
    let n = fps_coords.len();
    assert!(n >= 2, "relative encoding needs at least two points");
    let mut sigma = Mat::zeros(n, n);
    let mut degenerate_rows = Vec::new();
    for i in 0..n {
        let mut d = vec![0.0; n];
        let mut d_max = 0.0f64;
        for j in 0..n {
            if j != i {
                d[j] = crate::geometry::distance(&fps_coords[i], &fps_coords[j]);
                d_max = d_max.max(d[j]);
            }
        }
        let mut denom = 0.0;
        for j in 0..n {
            if j != i {
                denom += d_max - d[j];
            }
        }
        // relative tolerance so rows whose distances are equal up to
        // floating-point rounding (e.g. equilateral configurations) take
        // the uniform fallback instead of amplifying rounding noise
        if denom > d_max * 1e-12 {
            for j in 0..n {
                if j != i {
                    sigma.set(i, j, (d_max - d[j]) / denom);
                }
            }
        } else {
            log::warn!("degenerate relative-encoding row {i}: uniform fallback");
            degenerate_rows.push(i);
            let u = 1.0 / (n - 1) as f64;
            for j in 0..n {
                if j != i {
                    sigma.set(i, j, u);
                }
            }
        }
    }
    RelativeEncoding {
        sigma,
        degenerate_rows,
    }
}

/// Forward-pass intermediates kept for the backward pass.
pub struct ShapeAdapterCache {
    pub projected: Mat, // m' x D, phi(F)
    pub weights: Mat,   // m' x m' cosine weights, zero on the diagonal
    pub norms: Vec<f64>,
}

/// Output plus cache. Rows with zero feature norm get w = 0 for every pair
/// involving them.
pub fn shape_adapter_forward(
    fps_features: &Mat,
    encoding: &RelativeEncoding,
    adapter: &ShapeAdapter,
) -> (Mat, ShapeAdapterCache) {
    let n = fps_features.rows;
    let d = fps_features.cols;
    assert!(n >= 2);
    assert_eq!(encoding.sigma.rows, n);
    let projected = fps_features.matmul(&adapter.phi.value);
    let norms: Vec<f64> = (0..n)
        .map(|i| fps_features.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut weights = Mat::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            if norms[i] > 0.0 && norms[j] > 0.0 {
                let dot: f64 = fps_features
                    .row(i)
                    .iter()
                    .zip(fps_features.row(j))
                    .map(|(a, b)| a * b)
                    .sum();
                let w = dot / (norms[i] * norms[j]);
                weights.set(i, j, w);
                weights.set(j, i, w);
            } else {
                log::warn!("zero-norm feature row in shape adapter; w set to 0");
            }
        }
    }
    let mut out = Mat::zeros(n, d);
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            let w = weights.get(i, j);
            if w == 0.0 {
                continue;
            }
            let s = encoding.sigma.get(i, j);
            let prow = projected.row(j);
            let orow = out.row_mut(i);
            for (o, &p) in orow.iter_mut().zip(prow) {
                *o += w * (p + s);
            }
        }
    }
    (
        out,
        ShapeAdapterCache {
            projected,
            weights,
            norms,
        },
    )
}

/// Backward pass: accumulates d(loss)/d(phi) into the adapter's grad and
/// returns d(loss)/d(fps_features).
pub fn shape_adapter_backward(
    fps_features: &Mat,
    encoding: &RelativeEncoding,
    adapter: &mut ShapeAdapter,
    cache: &ShapeAdapterCache,
    d_out: &Mat,
) -> Mat {
    let n = fps_features.rows;
    let d = fps_features.cols;
    let mut d_projected = Mat::zeros(n, d);
    let mut d_features = Mat::zeros(n, d);
    for i in 0..n {
        let drow = d_out.row(i);
        for j in 0..n {
            if j == i {
                continue;
            }
            let w = cache.weights.get(i, j);
            let s = encoding.sigma.get(i, j);
            // grad through the projected term
            if w != 0.0 {
                let dp = d_projected.row_mut(j);
                for (g, &dv) in dp.iter_mut().zip(drow) {
                    *g += w * dv;
                }
            }
            // grad through the cosine weight
            if cache.norms[i] > 0.0 && cache.norms[j] > 0.0 {
                let mut g_w = 0.0;
                let prow = cache.projected.row(j);
                for (k, &dv) in drow.iter().enumerate() {
                    g_w += dv * (prow[k] + s);
                }
                if g_w != 0.0 {
                    let ni = cache.norms[i];
                    let nj = cache.norms[j];
                    let fi = fps_features.row(i);
                    let fj = fps_features.row(j);
                    // d w / d f_i = f_j/(|f_i||f_j|) - w * f_i/|f_i|^2
                    for k in 0..d {
                        d_features.data[i * d + k] += g_w * (fj[k] / (ni * nj) - w * fi[k] / (ni * ni));
                        d_features.data[j * d + k] += g_w * (fi[k] / (ni * nj) - w * fj[k] / (nj * nj));
                    }
                }
            }
        }
    }
    adapter
        .phi
        .grad
        .add_assign(&fps_features.t_matmul(&d_projected));
    d_features.add_assign(&d_projected.matmul_t(&adapter.phi.value));
    d_features
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encoding_collinear_three_points() {
        let enc = relative_positional_encoding(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
        ]);
        // row 0: d* = 2, d_hat to middle = 1, to far = 0
        assert!((enc.sigma.get(0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(enc.sigma.get(0, 2), 0.0);
        assert_eq!(enc.sigma.get(0, 0), 0.0);
    }

    #[test]
    fn encoding_two_points_is_degenerate_uniform() {
        let enc = relative_positional_encoding(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(enc.degenerate_rows, vec![0, 1]);
        assert_eq!(enc.sigma.get(0, 1), 1.0);
        assert_eq!(enc.sigma.get(1, 0), 1.0);
    }

    #[test]
    fn encoding_equilateral_triangle_is_uniform() {
        let h = (3.0f64).sqrt() / 2.0;
        let enc = relative_positional_encoding(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.5, h, 0.0],
        ]);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!((enc.sigma.get(i, j) - 0.5).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn encoding_rows_sum_to_one_and_farthest_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let pts: Vec<[f64; 3]> = (0..8)
                .map(|_| {
                    [
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                    ]
                })
                .collect();
            let enc = relative_positional_encoding(&pts);
            assert!(enc.degenerate_rows.is_empty());
            for i in 0..8 {
                let sum: f64 = (0..8).filter(|&j| j != i).map(|j| enc.sigma.get(i, j)).sum();
                assert!((sum - 1.0).abs() < 1e-9);
                let far = (0..8)
                    .filter(|&j| j != i)
                    .max_by(|&a, &b| {
                        crate::geometry::distance(&pts[i], &pts[a])
                            .partial_cmp(&crate::geometry::distance(&pts[i], &pts[b]))
                            .unwrap()
                    })
                    .unwrap();
                assert_eq!(enc.sigma.get(i, far), 0.0);
            }
        }
    }

    #[test]
    fn encoding_invariant_to_rigid_motion_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let pts: Vec<[f64; 3]> = (0..6)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let base = relative_positional_encoding(&pts);
        // rotation about z by 0.7 rad, translation, uniform scale 3.2
        let (s, c) = (0.7f64.sin(), 0.7f64.cos());
        let moved: Vec<[f64; 3]> = pts
            .iter()
            .map(|p| {
                [
                    3.2 * (c * p[0] - s * p[1]) + 1.5,
                    3.2 * (s * p[0] + c * p[1]) - 0.3,
                    3.2 * p[2] + 4.0,
                ]
            })
            .collect();
        let other = relative_positional_encoding(&moved);
        for (a, b) in base.sigma.data.iter().zip(&other.sigma.data) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_identical_unit_features_identity_phi() {
        // two points with identical unit-norm features, phi = identity:
        // w = 1 and out_1 = F_2 + sigma_12 * ones
        let mut adapter = ShapeAdapter::new(3);
        adapter.phi.value.fill(0.0);
        for i in 0..3 {
            adapter.phi.value.set(i, i, 1.0);
        }
        let f = Mat::from_rows(vec![vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]]);
        let enc = relative_positional_encoding(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let (out, cache) = shape_adapter_forward(&f, &enc, &adapter);
        assert!((cache.weights.get(0, 1) - 1.0).abs() < 1e-12);
        let s = enc.sigma.get(0, 1);
        assert!((out.get(0, 0) - (1.0 + s)).abs() < 1e-12);
        assert!((out.get(0, 1) - s).abs() < 1e-12);
        assert!((out.get(0, 2) - s).abs() < 1e-12);
    }

    #[test]
    fn forward_orthogonal_features_give_zero_output() {
        let adapter = ShapeAdapter::new(2);
        let f = Mat::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let enc = relative_positional_encoding(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let (out, _) = shape_adapter_forward(&f, &enc, &adapter);
        assert!(out.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn forward_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 8;
        let d = 8;
        let adapter = ShapeAdapter::new(d);
        let mut f = Mat::zeros(n, d);
        for x in &mut f.data {
            *x = rng.gen_range(-1.0..1.0);
        }
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ]
            })
            .collect();
        let enc = relative_positional_encoding(&pts);
        let (out, _) = shape_adapter_forward(&f, &enc, &adapter);

        // naive O(n^2 d) reference, independent of the implementation above
        for i in 0..n {
            for k in 0..d {
                let mut expect = 0.0;
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let dot: f64 = (0..d).map(|x| f.get(i, x) * f.get(j, x)).sum();
                    let ni: f64 = (0..d).map(|x| f.get(i, x).powi(2)).sum::<f64>().sqrt();
                    let nj: f64 = (0..d).map(|x| f.get(j, x).powi(2)).sum::<f64>().sqrt();
                    let w = dot / (ni * nj);
                    let mut proj = 0.0;
                    for x in 0..d {
                        proj += f.get(j, x) * adapter.phi.value.get(x, k);
                    }
                    expect += w * (proj + enc.sigma.get(i, j));
                }
                assert!((expect - out.get(i, k)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn weights_are_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let adapter = ShapeAdapter::new(5);
        let mut f = Mat::zeros(6, 5);
        for x in &mut f.data {
            *x = rng.gen_range(-2.0..2.0);
        }
        let pts: Vec<[f64; 3]> = (0..6).map(|i| [i as f64, 0.0, 0.0]).collect();
        let enc = relative_positional_encoding(&pts);
        let (_, cache) = shape_adapter_forward(&f, &enc, &adapter);
        for i in 0..6 {
            for j in 0..6 {
                let w = cache.weights.get(i, j);
                assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&w));
                assert_eq!(w, cache.weights.get(j, i));
            }
        }
    }
}

//! Locality-aware adapter: one degree-normalized graph convolution over the
//! kNN graph, aggregating full-cloud features into the FPS centers.
//!
//! For center i:
//!   out_i = Theta^T * sum_{j in N(i) + {i}} (1 / (deg(j) deg(i))) F_j
//! with unit edge weights. deg(v) is 1 plus the number of directed edges
//! incident to v in the realized graph (out-edges for centers, in-edges for
//! any node picked as a neighbor).

use crate::geometry::KnnGraph;
use crate::nn::{GroupTag, Mat, ParamMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct LocalityAdapter {
    pub theta: ParamMatrix, // D x D
}

impl LocalityAdapter {
    /// Zero-initialized filter: a fresh adapter contributes nothing to the
    /// combined representation until the target updates shape it.
    pub fn new(feat_dim: usize) -> Self {
        LocalityAdapter {
            theta: ParamMatrix::zeros(
                "locality_adapter.theta",
                GroupTag::LocalityAdapter,
                feat_dim,
                feat_dim,
            ),
        }
    }
}

/// deg(v) = 1 + directed edges incident to v (self-loops not counted).
pub fn node_degrees(graph: &KnnGraph) -> Vec<f64> {
    let mut deg = vec![1.0; graph.centers.parent_size];
    for (ci, neighbors) in graph.centers.indices.iter().zip(&graph.neighbors) {
        deg[*ci] += neighbors.len() as f64;
        for &j in neighbors {
            deg[j] += 1.0;
        }
    }
    deg
}

/// Aggregation coefficients per center: (node index, 1/(deg_j deg_i)) pairs
/// including the self term.
fn aggregation(graph: &KnnGraph) -> Vec<Vec<(usize, f64)>> {
    let deg = node_degrees(graph);
    graph
        .centers
        .indices
        .iter()
        .zip(&graph.neighbors)
        .map(|(&ci, neighbors)| {
            let di = deg[ci];
            let mut terms = Vec::with_capacity(neighbors.len() + 1);
            terms.push((ci, 1.0 / (di * di)));
            for &j in neighbors {
                terms.push((j, 1.0 / (deg[j] * di)));
            }
            terms
        })
        .collect()
}

pub struct LocalityAdapterCache {
    /// m' x D aggregated features before the filter
    pub aggregated: Mat,
}

pub fn locality_adapter_forward(
    full_features: &Mat,
    graph: &KnnGraph,
    adapter: &LocalityAdapter,
) -> (Mat, LocalityAdapterCache) {
    let d = full_features.cols;
    let terms = aggregation(graph);
    let mut aggregated = Mat::zeros(terms.len(), d);
    for (i, row_terms) in terms.iter().enumerate() {
        let arow = aggregated.row_mut(i);
        for &(j, coef) in row_terms {
            for (a, &f) in arow.iter_mut().zip(full_features.row(j)) {
                *a += coef * f;
            }
        }
    }
    let out = aggregated.matmul(&adapter.theta.value);
    (out, LocalityAdapterCache { aggregated })
}

/// Accumulates d(loss)/d(theta) and returns d(loss)/d(full_features)
/// (m x D, zero outside the aggregated neighborhood).
pub fn locality_adapter_backward(
    full_features: &Mat,
    graph: &KnnGraph,
    adapter: &mut LocalityAdapter,
    cache: &LocalityAdapterCache,
    d_out: &Mat,
) -> Mat {
    adapter
        .theta
        .grad
        .add_assign(&cache.aggregated.t_matmul(d_out));
    let d_aggregated = d_out.matmul_t(&adapter.theta.value);
    let mut d_features = Mat::zeros(full_features.rows, full_features.cols);
    let terms = aggregation(graph);
    for (i, row_terms) in terms.iter().enumerate() {
        let drow = d_aggregated.row(i);
        for &(j, coef) in row_terms {
            let frow = d_features.row_mut(j);
            for (g, &d) in frow.iter_mut().zip(drow) {
                *g += coef * d;
            }
        }
    }
    d_features
}

//! Point-cloud representation, unit-cube normalization, farthest point
//! sampling, and kNN graph construction.
//!
//! All operations here are pure functions over immutable inputs and are safe
//! to call concurrently. Distances are exact Euclidean; no spatial index is
//! used, which is fine at desk scale (m up to a few thousand).

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// A point cloud: m points in R^3 with an optional class label.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub label: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>, label: Option<usize>) -> Self {
        PointCloud { points, label }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned bounding box as (min, max) corners.
    pub fn bounding_box(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        let n = self.points.len() as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }

    /// True when all coordinates are finite.
    pub fn is_finite(&self) -> bool {
        self.points
            .iter()
            .all(|p| p.iter().all(|x| x.is_finite()))
    }
}

/// Ordered subset of indices into a parent cloud (FPS selection order).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSubset {
    pub indices: Vec<usize>,
    pub parent_size: usize,
}

/// Directed center -> neighbor adjacency over FPS centers into the full
/// cloud. Neighbor lists are sorted by ascending distance to the center;
/// ties break toward the lower index. Edge weights are all 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    pub centers: IndexSubset,
    /// neighbors[i] are indices into the full cloud for centers.indices[i].
    pub neighbors: Vec<Vec<usize>>,
}

pub fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    squared_distance(a, b).sqrt()
}

/// Isotropic scale plus translation so the tightest bounding box fits the
/// unit cube centered at the origin ([-0.5, 0.5]^3 along the largest axis).
/// Aspect ratios are preserved. A degenerate cloud (all points identical)
/// is translated to the cube center with scale 1.
pub fn normalize_unit_cube(cloud: &PointCloud) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::InvalidData("cannot normalize an empty cloud".into()));
    }
    if !cloud.is_finite() {
        return Err(Error::InvalidData(
            "cloud has non-finite coordinates".into(),
        ));
    }
    let (lo, hi) = cloud.bounding_box();
    let center = [
        (lo[0] + hi[0]) / 2.0,
        (lo[1] + hi[1]) / 2.0,
        (lo[2] + hi[2]) / 2.0,
    ];
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(hi[2] - lo[2]);
    let scale = if extent > 0.0 { 1.0 / extent } else { 1.0 };
    let points = cloud
        .points
        .iter()
        .map(|p| {
            [
                (p[0] - center[0]) * scale,
                (p[1] - center[1]) * scale,
                (p[2] - center[2]) * scale,
            ]
        })
        .collect();
    Ok(PointCloud::new(points, cloud.label))
}

/// Greedy farthest point sampling. The first selected index is `seed_index`;
/// each subsequent index maximizes the minimum distance to the selected set,
/// with ties broken toward the lower index. Selects m' = max(1, round(ratio*m))
/// points.
pub fn farthest_point_sample(
    cloud: &PointCloud,
    ratio: f64,
    seed_index: usize,
) -> Result<IndexSubset> {
    let m = cloud.len();
    if m == 0 {
        return Err(Error::InvalidData("FPS on an empty cloud".into()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "FPS ratio must be in (0, 1], got {ratio}"
        )));
    }
    if seed_index >= m {
        return Err(Error::InvalidConfig(format!(
            "FPS seed index {seed_index} out of range for cloud of size {m}"
        )));
    }
    let target = ((ratio * m as f64).round() as usize).clamp(1, m);
    let mut indices = Vec::with_capacity(target);
    indices.push(seed_index);
    let mut min_dist = vec![f64::INFINITY; m];
    let mut last = seed_index;
    let mut selected = vec![false; m];
    selected[seed_index] = true;
    min_dist[seed_index] = 0.0;
    while indices.len() < target {
        let lp = cloud.points[last];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in cloud.points.iter().enumerate() {
            let d = squared_distance(p, &lp);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            // strict > keeps the lowest index on ties
            if !selected[i] && min_dist[i] > best_d {
                best = i;
                best_d = min_dist[i];
            }
        }
        indices.push(best);
        selected[best] = true;
        min_dist[best] = 0.0;
        last = best;
    }
    Ok(IndexSubset {
        indices,
        parent_size: m,
    })
}

/// For each center, the min(k, m-1) nearest points of the full cloud by
/// Euclidean distance, self excluded, sorted by (distance, index).
pub fn knn_graph(cloud: &PointCloud, centers: &IndexSubset, k: usize) -> Result<KnnGraph> {
    let m = cloud.len();
    if k < 1 {
        return Err(Error::InvalidConfig("kNN requires k >= 1".into()));
    }
    if m < 2 {
        return Err(Error::InvalidData("kNN requires at least 2 points".into()));
    }
    let take = k.min(m - 1);
    let mut neighbors = Vec::with_capacity(centers.indices.len());
    for &ci in &centers.indices {
        if ci >= m {
            return Err(Error::InvalidData(format!(
                "center index {ci} out of range for cloud of size {m}"
            )));
        }
        let cp = cloud.points[ci];
        let mut order: Vec<(f64, usize)> = (0..m)
            .filter(|&j| j != ci)
            .map(|j| (squared_distance(&cloud.points[j], &cp), j))
            .collect();
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        neighbors.push(order.into_iter().take(take).map(|(_, j)| j).collect());
    }
    Ok(KnnGraph {
        centers: centers.clone(),
        neighbors,
    })
}

/// Writes clouds in the dataset text format: one record per cloud, a header
/// line `cloud <id> <label|-1> <m>` followed by m lines of three decimal
/// reals. Numbers use shortest round-trip formatting.
pub fn write_dataset(path: &Path, clouds: &[PointCloud]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        for (id, cloud) in clouds.iter().enumerate() {
            let label = cloud.label.map(|l| l as i64).unwrap_or(-1);
            writeln!(w, "cloud {} {} {}", id, label, cloud.len())?;
            for p in &cloud.points {
                writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
            }
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a dataset file written by [`write_dataset`].
pub fn read_dataset(path: &Path) -> Result<Vec<PointCloud>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut clouds = Vec::new();
    let mut lines = reader.lines().enumerate();
    while let Some((ln, line)) = lines.next() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "cloud" {
            return Err(Error::Parse {
                line: ln + 1,
                msg: format!("expected 'cloud <id> <label> <m>', got '{line}'"),
            });
        }
        let label: i64 = parts[2].parse().map_err(|_| Error::Parse {
            line: ln + 1,
            msg: "bad label".into(),
        })?;
        let m: usize = parts[3].parse().map_err(|_| Error::Parse {
            line: ln + 1,
            msg: "bad point count".into(),
        })?;
        let mut points = Vec::with_capacity(m);
        for _ in 0..m {
            let (pln, pline) = lines.next().ok_or(Error::Parse {
                line: ln + 1,
                msg: "truncated cloud record".into(),
            })?;
            let pline = pline.map_err(|e| Error::io(path.display().to_string(), e))?;
            let coords: Vec<f64> = pline
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Parse {
                    line: pln + 1,
                    msg: "bad coordinate".into(),
                })?;
            if coords.len() != 3 {
                return Err(Error::Parse {
                    line: pln + 1,
                    msg: "expected three coordinates".into(),
                });
            }
            points.push([coords[0], coords[1], coords[2]]);
        }
        let label = if label < 0 { None } else { Some(label as usize) };
        clouds.push(PointCloud::new(points, label));
    }
    Ok(clouds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: Vec<[f64; 3]>) -> PointCloud {
        PointCloud::new(points, None)
    }

    #[test]
    fn normalize_two_point_segment() {
        let c = cloud(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let n = normalize_unit_cube(&c).unwrap();
        assert_eq!(n.points[0], [-0.5, 0.0, 0.0]);
        assert_eq!(n.points[1], [0.5, 0.0, 0.0]);
    }

    #[test]
    fn normalize_degenerate_cloud() {
        let c = cloud(vec![[0.3, 0.3, 0.3]; 5]);
        let n = normalize_unit_cube(&c).unwrap();
        for p in &n.points {
            assert_eq!(*p, [0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn normalize_is_idempotent() {
        let c = cloud(vec![
            [0.1, 0.9, -0.4],
            [2.0, 1.0, 0.5],
            [-1.0, 0.2, 0.3],
            [0.7, -0.3, 2.2],
        ]);
        let once = normalize_unit_cube(&c).unwrap();
        let twice = normalize_unit_cube(&once).unwrap();
        for (a, b) in once.points.iter().zip(&twice.points) {
            for axis in 0..3 {
                assert!((a[axis] - b[axis]).abs() < 1e-12);
            }
        }
        let (lo, hi) = once.bounding_box();
        let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(hi[2] - lo[2]);
        assert!(extent <= 1.0 + 1e-12);
    }

    #[test]
    fn fps_unit_square_corners() {
        let c = cloud(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ]);
        let s = farthest_point_sample(&c, 0.5, 0).unwrap();
        assert_eq!(s.indices, vec![0, 3]);
    }

    #[test]
    fn fps_full_ratio_covers_all() {
        let c = cloud(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 2.0, 0.0],
            [3.0, 1.0, 0.0],
        ]);
        let s = farthest_point_sample(&c, 1.0, 2).unwrap();
        assert_eq!(s.indices.len(), 4);
        assert_eq!(s.indices[0], 2);
        let mut sorted = s.indices.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fps_single_point_is_seed() {
        let c = cloud(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let s = farthest_point_sample(&c, 0.1, 1).unwrap();
        assert_eq!(s.indices, vec![1]);
    }

    #[test]
    fn fps_rejects_bad_ratio() {
        let c = cloud(vec![[0.0; 3], [1.0, 0.0, 0.0]]);
        assert!(farthest_point_sample(&c, 0.0, 0).is_err());
        assert!(farthest_point_sample(&c, 1.5, 0).is_err());
    }

    #[test]
    fn knn_collinear() {
        let c = cloud(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [3.0, 0.0, 0.0],
        ]);
        let centers = IndexSubset {
            indices: vec![0],
            parent_size: 4,
        };
        let g = knn_graph(&c, &centers, 2).unwrap();
        assert_eq!(g.neighbors[0], vec![1, 2]);
    }

    #[test]
    fn knn_saturates_at_m_minus_one() {
        let c = cloud(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 3.0, 0.0]]);
        let centers = IndexSubset {
            indices: vec![0],
            parent_size: 3,
        };
        let g = knn_graph(&c, &centers, 10).unwrap();
        assert_eq!(g.neighbors[0], vec![1, 2]);
    }

    #[test]
    fn knn_tie_breaks_to_lower_index() {
        let c = cloud(vec![
            [0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 0.0, 0.0],
        ]);
        let centers = IndexSubset {
            indices: vec![0],
            parent_size: 3,
        };
        let g = knn_graph(&c, &centers, 1).unwrap();
        assert_eq!(g.neighbors[0], vec![1]);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clouds.txt");
        let clouds = vec![
            PointCloud::new(vec![[0.1, -0.25, 0.3333333333333333], [0.5, 0.5, -0.5]], Some(2)),
            PointCloud::new(vec![[1e-17, 2.0, 3.0]], None),
        ];
        write_dataset(&path, &clouds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(clouds, back);
    }
}

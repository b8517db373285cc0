//! Farthest point sampling and kNN graph construction on a single shape:
//! shows how FPS keeps the selected anchors spread out and what the local
//! neighborhoods look like.

use pc_adapter::datagen::{generate_shape, ShapeClass};
use pc_adapter::geometry::{distance, farthest_point_sample, knn_graph};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> pc_adapter::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cloud = generate_shape(ShapeClass::Torus, 256, &mut rng)?;

    let centers = farthest_point_sample(&cloud, 0.25, 0)?;
    println!(
        "sampled {} anchors from {} points",
        centers.indices.len(),
        cloud.len()
    );

    // FPS maximizes the minimum anchor-to-anchor spacing; compare it with
    // the spacing a prefix of the raw point order gets.
    let min_spacing = |idx: &[usize]| {
        let mut best = f64::INFINITY;
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                best = best.min(distance(&cloud.points[i], &cloud.points[j]));
            }
        }
        best
    };
    let prefix: Vec<usize> = (0..centers.indices.len()).collect();
    println!(
        "min pairwise anchor spacing: fps {:.4}, raw prefix {:.4}",
        min_spacing(&centers.indices),
        min_spacing(&prefix)
    );

    let graph = knn_graph(&cloud, &centers, 8)?;
    let mut radii: Vec<f64> = graph
        .centers
        .indices
        .iter()
        .zip(&graph.neighbors)
        .map(|(&c, ns)| {
            ns.iter()
                .map(|&j| distance(&cloud.points[c], &cloud.points[j]))
                .fold(0.0f64, f64::max)
        })
        .collect();
    radii.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "kNN (k=8) neighborhood radius: min {:.4}, median {:.4}, max {:.4}",
        radii[0],
        radii[radii.len() / 2],
        radii[radii.len() - 1]
    );

    // restarting FPS from a different seed point changes which anchors are
    // picked but not how well they cover the shape
    let alt = farthest_point_sample(&cloud, 0.25, 1)?;
    let shared = alt
        .indices
        .iter()
        .filter(|i| centers.indices.contains(i))
        .count();
    println!(
        "reseeded fps shares {shared}/{} anchors, min spacing {:.4}",
        alt.indices.len(),
        min_spacing(&alt.indices)
    );
    Ok(())
}

//! Generates a source/target dataset pair under the imbalanced-synth preset
//! and prints what the domain shift does to the class balance and geometry.

use pc_adapter::config::RunConfig;
use pc_adapter::datagen::{generate_dataset, ShapeClass, NUM_CLASSES};
use pc_adapter::geometry::PointCloud;

fn class_histogram(clouds: &[PointCloud]) -> Vec<usize> {
    let mut hist = vec![0usize; NUM_CLASSES];
    for c in clouds {
        hist[c.label.unwrap()] += 1;
    }
    hist
}

fn main() -> pc_adapter::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.n_source = 120;
    cfg.n_target = 120;
    let (source_spec, target_spec) = cfg.preset_specs()?;

    let source = generate_dataset(cfg.n_source, &source_spec, cfg.points_per_cloud)?;
    let target = generate_dataset(cfg.n_target, &target_spec, cfg.points_per_cloud)?;

    println!("class        source  target");
    let sh = class_histogram(&source);
    let th = class_histogram(&target);
    for id in 0..NUM_CLASSES {
        let name = ShapeClass::from_id(id)?.name();
        println!("{name:<12} {:>6}  {:>6}", sh[id], th[id]);
    }

    let avg_points = |clouds: &[PointCloud]| {
        clouds.iter().map(|c| c.len()).sum::<usize>() as f64 / clouds.len() as f64
    };
    println!();
    println!(
        "mean points per cloud: source {:.1}, target {:.1} (occlusion {} + density {})",
        avg_points(&source),
        avg_points(&target),
        target_spec.occlusion_fraction,
        target_spec.density_factor,
    );

    // anisotropic scaling distorts shapes; clouds are re-normalized to the
    // unit cube afterwards, so it shows up as unequal box extents
    let anisotropy = |c: &PointCloud| {
        let (lo, hi) = c.bounding_box();
        let e: Vec<f64> = (0..3).map(|i| hi[i] - lo[i]).collect();
        e.iter().cloned().fold(f64::INFINITY, f64::min)
            / e.iter().cloned().fold(0.0f64, f64::max)
    };
    let mean_aniso = |clouds: &[PointCloud]| {
        clouds.iter().map(anisotropy).sum::<f64>() / clouds.len() as f64
    };
    println!(
        "mean bounding-box min/max extent ratio: source {:.3}, target {:.3} (scale range {:?})",
        mean_aniso(&source),
        mean_aniso(&target),
        target_spec.scale_range,
    );
    Ok(())
}

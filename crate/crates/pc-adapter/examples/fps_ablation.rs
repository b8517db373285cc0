//! Point-budget ablation: trains plain source-only classifiers on clouds
//! FPS-reduced to 100%, 50% and 25% of their points and evaluates each on
//! the target domain. FPS keeps global shape, so accuracy degrades slowly.

use pc_adapter::config::RunConfig;
use pc_adapter::datagen::generate_dataset;
use pc_adapter::trainer::run_fps_ablation;

fn main() -> pc_adapter::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.n_source = 180;
    cfg.n_target = 180;
    cfg.train.epochs = 15;

    let (source_spec, target_spec) = cfg.preset_specs()?;
    let source = generate_dataset(cfg.n_source, &source_spec, cfg.points_per_cloud)?;
    let target = generate_dataset(cfg.n_target, &target_spec, cfg.points_per_cloud)?;

    println!("ratio  target_acc  target_bacc");
    for row in run_fps_ablation(&source, &target, &cfg.train)? {
        println!(
            "{:>5.2}  {:>10.3}  {:>11.3}",
            row.point_ratio, row.target_accuracy, row.target_balanced_accuracy
        );
    }
    Ok(())
}

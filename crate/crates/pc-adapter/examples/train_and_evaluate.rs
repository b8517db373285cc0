//! End-to-end adaptation on a small split: trains source_only and pc_adapter
//! on the same data and compares their target-domain accuracy. Uses a
//! reduced budget so it finishes in about a minute; the full protocol runs
//! through the `pcadapt` binary.

use pc_adapter::config::RunConfig;
use pc_adapter::datagen::generate_dataset;
use pc_adapter::trainer::{evaluate, train, EvalPath, Method};

fn main() -> pc_adapter::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.n_source = 240;
    cfg.n_target = 240;
    cfg.train.epochs = 20;
    cfg.train.seed = 0;

    let (source_spec, target_spec) = cfg.preset_specs()?;
    let source = generate_dataset(cfg.n_source, &source_spec, cfg.points_per_cloud)?;
    let target = generate_dataset(cfg.n_target, &target_spec, cfg.points_per_cloud)?;

    for method in [Method::SourceOnly, Method::PcAdapter] {
        let result = train(&source, &target, &cfg.train, method)?;
        let path = match method {
            Method::SourceOnly => EvalPath::SourcePath,
            _ => EvalPath::TargetPath,
        };
        let report = evaluate(&target, &result.model, path, &cfg.train)?;
        let adopted: usize = result.pl_class_counts.iter().sum();
        println!(
            "{:<12} target accuracy {:.3}, balanced accuracy {:.3}, pseudo-labels adopted {}",
            method.as_str(),
            report.accuracy,
            report.balanced_accuracy,
            adopted
        );
        if method == Method::PcAdapter {
            let correct: usize = result.pl_class_correct.iter().sum();
            println!(
                "{:<12} pseudo-label precision {:.3}, per-class counts {:?}",
                "",
                correct as f64 / adopted.max(1) as f64,
                result.pl_class_counts
            );
        }
    }
    Ok(())
}

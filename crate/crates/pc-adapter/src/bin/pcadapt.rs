//! File-based workflow around the pc-adapter library: dataset generation,
//! training, evaluation, and the two analysis protocols. Diagnostics go to
//! standard error (level set by PCADAPT_LOG); data goes to files under the
//! output directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pc_adapter::checkpoint::{load_checkpoint, save_checkpoint};
use pc_adapter::config::RunConfig;
use pc_adapter::datagen::generate_dataset;
use pc_adapter::error::{Error, Result};
use pc_adapter::geometry::{read_dataset, write_dataset, PointCloud};
use pc_adapter::trainer::{
    evaluate, run_fps_ablation, run_pl_analysis, train, EvalPath, Model, PlMode, TrainConfig,
    METRICS_HEADER,
};

#[derive(Parser)]
#[command(name = "pcadapt", about = "Point-cloud domain adaptation workflows")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key=value config override; repeatable, applied after --config.
    #[arg(long = "set", global = true)]
    set: Vec<String>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate source and target dataset files plus a manifest.
    GenData,
    /// Train a model and write checkpoint + per-epoch metrics.
    Train,
    /// Evaluate a checkpoint on the target dataset.
    Eval,
    /// Train source-only models on FPS-reduced clouds and compare.
    AblateFps,
    /// Emit label/pseudo-label histograms for a checkpoint.
    AnalyzePl,
}

fn resolve(out: &Path, name: &str) -> PathBuf {
    let p = Path::new(name);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out.join(p)
    }
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::io(path, e))
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.train.validate()?;
    Ok(cfg)
}

fn save_resolved(cfg: &RunConfig, out: &Path, command: &str) -> Result<()> {
    write_file(&out.join(format!("{command}.resolved.conf")), &cfg.to_config_text())
}

fn load_pair(cfg: &RunConfig, out: &Path) -> Result<(Vec<PointCloud>, Vec<PointCloud>)> {
    let source = read_dataset(&resolve(out, &cfg.source_data))?;
    let target = read_dataset(&resolve(out, &cfg.target_data))?;
    Ok((source, target))
}

fn pl_mode(cfg: &RunConfig) -> PlMode {
    if cfg.pl_mode == "maxconf" {
        PlMode::MaxConfidence
    } else {
        PlMode::Rectified
    }
}

fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (source_spec, target_spec) = cfg.preset_specs()?;
    let source = generate_dataset(cfg.n_source, &source_spec, cfg.points_per_cloud)?;
    let target = generate_dataset(cfg.n_target, &target_spec, cfg.points_per_cloud)?;
    let source_path = resolve(out, &cfg.source_data);
    let target_path = resolve(out, &cfg.target_data);
    write_dataset(&source_path, &source)?;
    write_dataset(&target_path, &target)?;
    let manifest = format!(
        "preset {}\nseed {}\npoints_per_cloud {}\nsource {} {} clouds\ntarget {} {} clouds\n",
        cfg.preset,
        cfg.train.seed,
        cfg.points_per_cloud,
        source_path.display(),
        source.len(),
        target_path.display(),
        target.len(),
    );
    write_file(&out.join("manifest.txt"), &manifest)?;
    save_resolved(cfg, out, "gen-data")?;
    println!("wrote {} and {}", source_path.display(), target_path.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (source, target) = load_pair(cfg, out)?;
    let result = train(&source, &target, &cfg.train, cfg.method)?;
    let ckpt_path = resolve(out, &cfg.checkpoint);
    save_checkpoint(&ckpt_path, &result.model, &cfg.train)?;
    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    for row in &result.metrics {
        metrics.push_str(&row.csv_row());
        metrics.push('\n');
    }
    write_file(&out.join("metrics.csv"), &metrics)?;
    let mut diag = String::from("epoch,class,count,mean,variance,alpha,beta\n");
    for (epoch, classes) in result.beta_diagnostics.iter().enumerate() {
        for (t, &(count, mean, var, alpha, beta)) in classes.iter().enumerate() {
            diag.push_str(&format!("{epoch},{t},{count},{mean},{var},{alpha},{beta}\n"));
        }
    }
    write_file(&out.join("beta_diagnostics.csv"), &diag)?;
    save_resolved(cfg, out, "train")?;
    println!(
        "trained {} for {} epochs; checkpoint at {}",
        cfg.method.as_str(),
        cfg.train.epochs,
        ckpt_path.display()
    );
    Ok(())
}

fn load_model(cfg: &RunConfig, out: &Path) -> Result<(Model, TrainConfig)> {
    let (model, hidden, feat, classes) = load_checkpoint(&resolve(out, &cfg.checkpoint))?;
    let mut tc = cfg.train.clone();
    tc.hidden_dim = hidden;
    tc.feat_dim = feat;
    tc.n_classes = classes;
    Ok((model, tc))
}

fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (model, tc) = load_model(cfg, out)?;
    let target = read_dataset(&resolve(out, &cfg.target_data))?;
    let path = EvalPath::from_str(&cfg.eval_path)?;
    let report = evaluate(&target, &model, path, &tc)?;
    let mut text = format!(
        "accuracy {}\nbalanced_accuracy {}\nconfusion\n",
        report.accuracy, report.balanced_accuracy
    );
    for row in &report.confusion {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        text.push_str(&cells.join(" "));
        text.push('\n');
    }
    write_file(&out.join("eval_report.txt"), &text)?;
    save_resolved(cfg, out, "eval")?;
    println!(
        "accuracy {:.4} balanced_accuracy {:.4}",
        report.accuracy, report.balanced_accuracy
    );
    Ok(())
}

fn cmd_ablate_fps(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (source, target) = load_pair(cfg, out)?;
    let rows = run_fps_ablation(&source, &target, &cfg.train)?;
    let mut csv = String::from("point_ratio,target_acc,target_bacc\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{}\n",
            r.point_ratio, r.target_accuracy, r.target_balanced_accuracy
        ));
    }
    write_file(&out.join("fps_ablation.csv"), &csv)?;
    save_resolved(cfg, out, "ablate-fps")?;
    for r in &rows {
        println!(
            "ratio {:.2}: accuracy {:.4} balanced_accuracy {:.4}",
            r.point_ratio, r.target_accuracy, r.target_balanced_accuracy
        );
    }
    Ok(())
}

fn hist_csv(hist: &[usize]) -> String {
    let mut csv = String::from("class,count\n");
    for (t, &c) in hist.iter().enumerate() {
        csv.push_str(&format!("{t},{c}\n"));
    }
    csv
}

fn cmd_analyze_pl(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (model, tc) = load_model(cfg, out)?;
    let (source, target) = load_pair(cfg, out)?;
    let analysis = run_pl_analysis(&model, &source, &target, pl_mode(cfg), &tc)?;
    write_file(
        &out.join("source_label_hist.csv"),
        &hist_csv(&analysis.source_label_hist),
    )?;
    write_file(
        &out.join("target_label_hist.csv"),
        &hist_csv(&analysis.target_label_hist),
    )?;
    write_file(
        &out.join("target_pl_hist.csv"),
        &hist_csv(&analysis.target_pl_hist),
    )?;
    let mut conf = String::from("class,mean_confidence\n");
    for (t, &c) in analysis.class_mean_confidence.iter().enumerate() {
        conf.push_str(&format!("{t},{c}\n"));
    }
    write_file(&out.join("class_mean_confidence.csv"), &conf)?;
    save_resolved(cfg, out, "analyze-pl")?;
    println!(
        "pseudo-labels assigned: {} of {} ({} below threshold)",
        analysis.target_pl_hist.iter().sum::<usize>(),
        target.len(),
        analysis.n_unlabeled
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    match cli.command {
        Command::GenData => cmd_gen_data(&cfg, &cli.out),
        Command::Train => cmd_train(&cfg, &cli.out),
        Command::Eval => cmd_eval(&cfg, &cli.out),
        Command::AblateFps => cmd_ablate_fps(&cfg, &cli.out),
        Command::AnalyzePl => cmd_analyze_pl(&cfg, &cli.out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("PCADAPT_LOG")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

//! Flat key-value run configuration: parsed from a text file of
//! `key = value` lines (with `#` comments), overridable from the command
//! line, and re-emitted fully resolved next to every run's outputs.

use std::path::Path;

use crate::datagen::{DomainShiftSpec, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::trainer::{CombineMode, Method, TrainConfig};

/// Everything a command needs: training hyperparameters plus dataset
/// generation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub method: Method,
    pub preset: String,
    pub n_source: usize,
    pub n_target: usize,
    pub points_per_cloud: usize,
    pub occlusion_fraction: f64,
    pub jitter_sigma: f64,
    pub density_factor: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Dataset/checkpoint file names, resolved relative to the output
    /// directory when not absolute.
    pub source_data: String,
    pub target_data: String,
    pub checkpoint: String,
    pub eval_path: String,
    pub pl_mode: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            method: Method::PcAdapter,
            preset: "imbalanced-synth".into(),
            n_source: 600,
            n_target: 600,
            points_per_cloud: 256,
            occlusion_fraction: 0.1,
            jitter_sigma: 0.01,
            density_factor: 0.8,
            scale_min: 0.9,
            scale_max: 1.1,
            source_data: "source.ds".into(),
            target_data: "target.ds".into(),
            checkpoint: "model.ckpt".into(),
            eval_path: "target_path".into(),
            pl_mode: "rectified".into(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::InvalidConfig(format!("cannot parse value '{value}' for key '{key}'"))
    })
}

impl RunConfig {
    /// Applies one `key = value` assignment. Unknown keys are rejected.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "fps_ratio" => self.train.fps_ratio = parse(key, value)?,
            "fps_seed_index" => self.train.fps_seed_index = parse(key, value)?,
            "k" => self.train.k = parse(key, value)?,
            "r0" => self.train.r0 = parse(key, value)?,
            "gamma" => self.train.gamma = parse(key, value)?,
            "rho" => self.train.rho = parse(key, value)?,
            "base_lr" => self.train.base_lr = parse(key, value)?,
            "weight_decay" => self.train.weight_decay = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "pl_warmup_epochs" => {
                self.train.pl_warmup_epochs = if value == "auto" {
                    None
                } else {
                    Some(parse(key, value)?)
                };
            }
            "pl_margin" => self.train.pl_margin = parse(key, value)?,
            "lambda_centroid" => self.train.lambda_centroid = parse(key, value)?,
            "combine_mode" => self.train.combine_mode = CombineMode::from_str(value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "hidden_dim" => self.train.hidden_dim = parse(key, value)?,
            "feat_dim" => self.train.feat_dim = parse(key, value)?,
            "n_classes" => self.train.n_classes = parse(key, value)?,
            "method" => self.method = Method::from_str(value)?,
            "preset" => self.preset = value.to_string(),
            "n_source" => self.n_source = parse(key, value)?,
            "n_target" => self.n_target = parse(key, value)?,
            "points_per_cloud" => self.points_per_cloud = parse(key, value)?,
            "occlusion_fraction" => self.occlusion_fraction = parse(key, value)?,
            "jitter_sigma" => self.jitter_sigma = parse(key, value)?,
            "density_factor" => self.density_factor = parse(key, value)?,
            "scale_min" => self.scale_min = parse(key, value)?,
            "scale_max" => self.scale_max = parse(key, value)?,
            "source_data" => self.source_data = value.to_string(),
            "target_data" => self.target_data = value.to_string(),
            "checkpoint" => self.checkpoint = value.to_string(),
            "eval_path" => {
                crate::trainer::EvalPath::from_str(value)?;
                self.eval_path = value.to_string();
            }
            "pl_mode" => {
                if value != "rectified" && value != "maxconf" {
                    return Err(Error::InvalidConfig(format!(
                        "pl_mode must be 'rectified' or 'maxconf', got '{value}'"
                    )));
                }
                self.pl_mode = value.to_string();
            }
            _ => {
                return Err(Error::InvalidConfig(format!("unknown config key '{key}'")));
            }
        }
        Ok(())
    }

    /// Parses a config file of `key = value` lines. `#` starts a comment;
    /// blank lines are skipped.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::Parse {
                line: lineno + 1,
                msg: format!("expected 'key = value', got '{line}'"),
            })?;
            cfg.apply(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    /// Applies `key=value` command-line overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let (key, value) = item.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("--set expects key=value, got '{item}'"))
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// The fully-resolved config as parseable text.
    pub fn to_config_text(&self) -> String {
        let t = &self.train;
        format!(
            "fps_ratio = {}\nfps_seed_index = {}\nk = {}\nr0 = {}\ngamma = {}\nrho = {}\n\
             base_lr = {}\nweight_decay = {}\nepochs = {}\npl_warmup_epochs = {}\n\
             pl_margin = {}\nlambda_centroid = {}\n\
             combine_mode = {}\nbatch_size = {}\nseed = {}\nhidden_dim = {}\nfeat_dim = {}\n\
             n_classes = {}\nmethod = {}\npreset = {}\nn_source = {}\nn_target = {}\n\
             points_per_cloud = {}\nocclusion_fraction = {}\njitter_sigma = {}\n\
             density_factor = {}\nscale_min = {}\nscale_max = {}\nsource_data = {}\n\
             target_data = {}\ncheckpoint = {}\neval_path = {}\npl_mode = {}\n",
            t.fps_ratio,
            t.fps_seed_index,
            t.k,
            t.r0,
            t.gamma,
            t.rho,
            t.base_lr,
            t.weight_decay,
            t.epochs,
            t.pl_warmup_epochs
                .map(|v| v.to_string())
                .unwrap_or_else(|| "auto".into()),
            t.pl_margin,
            t.lambda_centroid,
            t.combine_mode.as_str(),
            t.batch_size,
            t.seed,
            t.hidden_dim,
            t.feat_dim,
            t.n_classes,
            self.method.as_str(),
            self.preset,
            self.n_source,
            self.n_target,
            self.points_per_cloud,
            self.occlusion_fraction,
            self.jitter_sigma,
            self.density_factor,
            self.scale_min,
            self.scale_max,
            self.source_data,
            self.target_data,
            self.checkpoint,
            self.eval_path,
            self.pl_mode,
        )
    }

    /// Source and target domain specs for the configured preset.
    ///
    /// `imbalanced-synth`: clean source clouds with imbalanced class priors
    /// (0.35, 0.25, 0.15, 0.12, 0.08, 0.05) against a shifted,
    /// class-balanced target domain using the configured shift magnitudes.
    pub fn preset_specs(&self) -> Result<(DomainShiftSpec, DomainShiftSpec)> {
        match self.preset.as_str() {
            "imbalanced-synth" => {
                let seed = self.train.seed;
                let mut source = DomainShiftSpec::neutral(seed.wrapping_mul(2).wrapping_add(1));
                source.class_priors = vec![0.35, 0.25, 0.15, 0.12, 0.08, 0.05];
                let target = DomainShiftSpec {
                    occlusion_fraction: self.occlusion_fraction,
                    jitter_sigma: self.jitter_sigma,
                    density_factor: self.density_factor,
                    scale_range: (self.scale_min, self.scale_max),
                    class_priors: vec![1.0 / NUM_CLASSES as f64; NUM_CLASSES],
                    rng_seed: seed.wrapping_mul(2).wrapping_add(2),
                };
                target.validate()?;
                source.validate()?;
                Ok((source, target))
            }
            other => Err(Error::InvalidConfig(format!(
                "unknown preset '{other}' (available: imbalanced-synth)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply("learning_rate", "0.1").unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn overrides_apply_in_order() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["gamma=0.7".into(), "gamma=0.9".into()])
            .unwrap();
        assert_eq!(cfg.train.gamma, 0.9);
    }

    #[test]
    fn bad_override_syntax_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_overrides(&["gamma:0.9".into()]).is_err());
    }

    #[test]
    fn config_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply("rho", "0.5").unwrap();
        cfg.apply("method", "maxconf_pl").unwrap();
        cfg.apply("combine_mode", "average").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(cfg.to_config_text().as_bytes()).unwrap();
        drop(f);
        let back = RunConfig::from_file(&path).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        std::fs::write(&path, "gamma = 0.8\nnonsense line\n").unwrap();
        let err = RunConfig::from_file(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.conf");
        std::fs::write(&path, "# header\n\ngamma = 0.75 # inline\n").unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.train.gamma, 0.75);
    }

    #[test]
    fn preset_priors_sum_to_one() {
        let cfg = RunConfig::default();
        let (source, target) = cfg.preset_specs().unwrap();
        assert!((source.class_priors.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((target.class_priors.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(source.class_priors[0] > source.class_priors[5]);
    }

    #[test]
    fn unknown_preset_rejected() {
        let mut cfg = RunConfig::default();
        cfg.preset = "mystery".into();
        assert!(cfg.preset_specs().is_err());
    }
}

//! Versioned text checkpoint format. Floats are written with shortest
//! round-trip formatting, so save followed by load reproduces the model
//! bit-for-bit.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamMatrix;
use crate::trainer::{Model, TrainConfig};

const MAGIC: &str = "pcadapt-checkpoint v1";

fn write_matrix(out: &mut String, tag: &str, data: &[f64]) {
    out.push_str(tag);
    for &x in data {
        let _ = write!(out, " {x}");
    }
    out.push('\n');
}

fn write_param(out: &mut String, p: &ParamMatrix) {
    let _ = writeln!(
        out,
        "param {} {} {} {}",
        p.name,
        p.group.as_str(),
        p.value.rows,
        p.value.cols
    );
    write_matrix(out, "value", &p.value.data);
    write_matrix(out, "m1", &p.moment1.data);
    write_matrix(out, "m2", &p.moment2.data);
}

fn model_params(model: &Model) -> Vec<&ParamMatrix> {
    let mut v: Vec<&ParamMatrix> = vec![
        &model.encoder.w1,
        &model.encoder.b1,
        &model.encoder.w2,
        &model.encoder.b2,
        &model.shape.phi,
        &model.locality.theta,
        &model.classifier.w,
        &model.classifier.b,
    ];
    v.sort_by_key(|p| p.name.clone());
    v
}

pub fn save_checkpoint(path: &Path, model: &Model, cfg: &TrainConfig) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(
        out,
        "dims {} {} {}",
        cfg.hidden_dim, cfg.feat_dim, cfg.n_classes
    );
    let _ = writeln!(out, "adam_steps {}", model.adam_steps);
    let _ = writeln!(out, "epoch {}", model.epoch);
    for p in model_params(model) {
        write_param(&mut out, p);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn parse_floats(line: &str, tag: &str, expect: usize, lineno: usize) -> Result<Vec<f64>> {
    let mut it = line.split_whitespace();
    if it.next() != Some(tag) {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected '{tag}' row"),
        });
    }
    let vals: Vec<f64> = it
        .map(|t| {
            t.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad float '{t}'"),
            })
        })
        .collect::<Result<_>>()?;
    if vals.len() != expect {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected {expect} values, got {}", vals.len()),
        });
    }
    Ok(vals)
}

/// Loads a checkpoint, returning the model and the (hidden, feat, classes)
/// dimensions it was saved with.
pub fn load_checkpoint(path: &Path) -> Result<(Model, usize, usize, usize)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let mut next = || {
        lines
            .next()
            .ok_or(Error::Parse {
                line: 0,
                msg: "unexpected end of checkpoint".into(),
            })
            .map(|(i, l)| (i + 1, l))
    };
    let (n, magic) = next()?;
    if magic != MAGIC {
        return Err(Error::Parse {
            line: n,
            msg: format!("bad checkpoint header '{magic}'"),
        });
    }
    let (n, dims_line) = next()?;
    let dims: Vec<usize> = dims_line
        .strip_prefix("dims ")
        .ok_or(Error::Parse {
            line: n,
            msg: "expected dims".into(),
        })?
        .split_whitespace()
        .map(|t| {
            t.parse().map_err(|_| Error::Parse {
                line: n,
                msg: format!("bad dim '{t}'"),
            })
        })
        .collect::<Result<_>>()?;
    if dims.len() != 3 {
        return Err(Error::Parse {
            line: n,
            msg: "dims needs 3 entries".into(),
        });
    }
    let (hidden, feat, classes) = (dims[0], dims[1], dims[2]);
    let (n, steps_line) = next()?;
    let adam_steps: u64 = steps_line
        .strip_prefix("adam_steps ")
        .and_then(|t| t.parse().ok())
        .ok_or(Error::Parse {
            line: n,
            msg: "expected adam_steps".into(),
        })?;
    let (n, epoch_line) = next()?;
    let epoch: usize = epoch_line
        .strip_prefix("epoch ")
        .and_then(|t| t.parse().ok())
        .ok_or(Error::Parse {
            line: n,
            msg: "expected epoch".into(),
        })?;
    let cfg = TrainConfig {
        hidden_dim: hidden,
        feat_dim: feat,
        n_classes: classes,
        ..TrainConfig::default()
    };
    let mut model = Model::new(&cfg);
    model.adam_steps = adam_steps;
    model.epoch = epoch;
    let mut remaining = 8;
    while remaining > 0 {
        let (hn, header) = next()?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 5 || parts[0] != "param" {
            return Err(Error::Parse {
                line: hn,
                msg: format!("expected param header, got '{header}'"),
            });
        }
        let name = parts[1];
        let rows: usize = parts[3].parse().map_err(|_| Error::Parse {
            line: hn,
            msg: "bad rows".into(),
        })?;
        let cols: usize = parts[4].parse().map_err(|_| Error::Parse {
            line: hn,
            msg: "bad cols".into(),
        })?;
        let size = rows * cols;
        let (vn, vline) = next()?;
        let value = parse_floats(vline, "value", size, vn)?;
        let (m1n, m1line) = next()?;
        let m1 = parse_floats(m1line, "m1", size, m1n)?;
        let (m2n, m2line) = next()?;
        let m2 = parse_floats(m2line, "m2", size, m2n)?;
        let slot = find_param(&mut model, name).ok_or(Error::Parse {
            line: hn,
            msg: format!("unknown parameter '{name}'"),
        })?;
        if slot.value.rows != rows || slot.value.cols != cols {
            return Err(Error::Parse {
                line: hn,
                msg: format!(
                    "shape mismatch for '{name}': checkpoint {rows}x{cols}, model {}x{}",
                    slot.value.rows, slot.value.cols
                ),
            });
        }
        slot.value.data = value;
        slot.moment1.data = m1;
        slot.moment2.data = m2;
        remaining -= 1;
    }
    Ok((model, hidden, feat, classes))
}

fn find_param<'a>(model: &'a mut Model, name: &str) -> Option<&'a mut ParamMatrix> {
    let mut all: Vec<&mut ParamMatrix> = model.encoder.params_mut();
    all.push(&mut model.shape.phi);
    all.push(&mut model.locality.theta);
    all.extend(model.classifier.params_mut());
    all.into_iter().find(|p| p.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cfg = TrainConfig {
            hidden_dim: 8,
            feat_dim: 16,
            seed: 3,
            ..TrainConfig::default()
        };
        let mut model = Model::new(&cfg);
        model.adam_steps = 17;
        model.epoch = 2;
        // perturb moments so non-zero state is exercised
        model.shape.phi.moment1.data[3] = 0.1234567890123456789;
        model.classifier.b.moment2.data[1] = 1e-300;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, &cfg).unwrap();
        let (loaded, h, d, c) = load_checkpoint(&path).unwrap();
        assert_eq!((h, d, c), (8, 16, cfg.n_classes));
        assert_eq!(loaded, model);
    }

    #[test]
    fn double_save_is_byte_identical() {
        let cfg = TrainConfig {
            hidden_dim: 4,
            feat_dim: 8,
            ..TrainConfig::default()
        };
        let model = Model::new(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save_checkpoint(&a, &model, &cfg).unwrap();
        save_checkpoint(&b, &model, &cfg).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn corrupted_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, "not a checkpoint\n").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_checkpoint(Path::new("/nonexistent/model.ckpt")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}

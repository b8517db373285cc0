//! Minimal dense-parameter machinery: a small row-major matrix type, the
//! pointwise encoder, the linear classifier with softmax cross-entropy,
//! hand-coded analytic gradients, and Adam with cosine annealing plus
//! per-group learning-rate scaling.
//!
//! Everything is f64; the finite-difference checks in the test suite need
//! the headroom.

use rand::Rng;

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = if r > 0 { rows[0].len() } else { 0 };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c);
            data.extend(row);
        }
        Mat { rows: r, cols: c, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// self (r x k) * other (k x c) -> r x c
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// self^T (k x r)^T * other (r x c) -> k x c, without materializing the transpose
    pub fn t_matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows);
        let mut out = Mat::zeros(self.cols, other.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            let brow = other.row(i);
            for (k, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = out.row_mut(k);
                for (o, &b) in out_row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// self (r x k) * other^T (c x k)^T -> r x c
    pub fn matmul_t(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols);
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..other.rows {
                let brow = other.row(j);
                let mut s = 0.0;
                for (a, b) in arow.iter().zip(brow) {
                    s += a * b;
                }
                out.set(i, j, s);
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Parameter groups used for per-path learning-rate scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupTag {
    Encoder,
    ShapeAdapter,
    LocalityAdapter,
    Classifier,
}

impl GroupTag {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupTag::Encoder => "encoder",
            GroupTag::ShapeAdapter => "shape_adapter",
            GroupTag::LocalityAdapter => "locality_adapter",
            GroupTag::Classifier => "classifier",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "encoder" => GroupTag::Encoder,
            "shape_adapter" => GroupTag::ShapeAdapter,
            "locality_adapter" => GroupTag::LocalityAdapter,
            "classifier" => GroupTag::Classifier,
            _ => return Err(Error::InvalidData(format!("unknown group tag '{s}'"))),
        })
    }
}

/// A trainable weight matrix with gradient accumulator and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMatrix {
    pub name: String,
    pub group: GroupTag,
    pub value: Mat,
    pub grad: Mat,
    pub moment1: Mat,
    pub moment2: Mat,
}

impl ParamMatrix {
    pub fn zeros(name: &str, group: GroupTag, rows: usize, cols: usize) -> Self {
        ParamMatrix {
            name: name.to_string(),
            group,
            value: Mat::zeros(rows, cols),
            grad: Mat::zeros(rows, cols),
            moment1: Mat::zeros(rows, cols),
            moment2: Mat::zeros(rows, cols),
        }
    }

    /// Glorot-uniform initialization in +-sqrt(6/(fan_in+fan_out)).
    pub fn glorot(name: &str, group: GroupTag, rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(name, group, rows, cols);
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        for v in &mut p.value.data {
            *v = rng.gen_range(-bound..bound);
        }
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// One Adam step over the given parameters. The effective learning rate per
/// parameter is `lr * group_scale(group)`; `step` is the 1-based global step
/// count used for bias correction. Weight decay is added to the gradient
/// (L2 form). Errors out on NaN gradients.
pub fn adam_step(
    params: &mut [&mut ParamMatrix],
    lr: f64,
    group_scale: &dyn Fn(GroupTag) -> f64,
    cfg: &AdamConfig,
    step: u64,
) -> Result<()> {
    let t = step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for p in params.iter_mut() {
        if !p.grad.is_finite() {
            return Err(Error::NanGradient(p.name.clone()));
        }
        let eff_lr = lr * group_scale(p.group);
        for i in 0..p.value.data.len() {
            let g = p.grad.data[i] + cfg.weight_decay * p.value.data[i];
            p.moment1.data[i] = cfg.beta1 * p.moment1.data[i] + (1.0 - cfg.beta1) * g;
            p.moment2.data[i] = cfg.beta2 * p.moment2.data[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = p.moment1.data[i] / bc1;
            let v_hat = p.moment2.data[i] / bc2;
            p.value.data[i] -= eff_lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// lr(e) = base * 0.5 * (1 + cos(pi * e / E))
pub fn cosine_anneal(base_lr: f64, epoch: usize, total_epochs: usize) -> f64 {
    assert!(epoch < total_epochs || total_epochs == 0);
    if total_epochs == 0 {
        return base_lr;
    }
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos())
}

/// Width of the per-point input row built by [`coords_matrix`].
pub const INPUT_DIM: usize = 7;

/// Per-point MLP INPUT_DIM -> H -> D with ReLU, applied identically to
/// every point.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub w1: ParamMatrix, // INPUT_DIM x H
    pub b1: ParamMatrix, // 1 x H
    pub w2: ParamMatrix, // H x D
    pub b2: ParamMatrix, // 1 x D
}

/// Intermediate activations needed by the backward pass.
pub struct EncoderCache {
    pub input: Mat,  // m x INPUT_DIM
    pub z1: Mat,     // m x H, pre-activation
    pub a1: Mat,     // m x H, post-ReLU
}

impl Encoder {
    pub fn new(hidden: usize, feat_dim: usize, rng: &mut impl Rng) -> Self {
        Encoder {
            w1: ParamMatrix::glorot("encoder.w1", GroupTag::Encoder, INPUT_DIM, hidden, rng),
            b1: ParamMatrix::zeros("encoder.b1", GroupTag::Encoder, 1, hidden),
            w2: ParamMatrix::glorot("encoder.w2", GroupTag::Encoder, hidden, feat_dim, rng),
            b2: ParamMatrix::zeros("encoder.b2", GroupTag::Encoder, 1, feat_dim),
        }
    }

    pub fn feat_dim(&self) -> usize {
        self.w2.value.cols
    }

    pub fn forward(&self, coords: &Mat) -> (Mat, EncoderCache) {
        let mut z1 = coords.matmul(&self.w1.value);
        for r in 0..z1.rows {
            let row = z1.row_mut(r);
            for (x, b) in row.iter_mut().zip(&self.b1.value.data) {
                *x += b;
            }
        }
        let mut a1 = z1.clone();
        for x in &mut a1.data {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        let mut out = a1.matmul(&self.w2.value);
        for r in 0..out.rows {
            let row = out.row_mut(r);
            for (x, b) in row.iter_mut().zip(&self.b2.value.data) {
                *x += b;
            }
        }
        (
            out,
            EncoderCache {
                input: coords.clone(),
                z1,
                a1,
            },
        )
    }

    /// Accumulates gradients for d(loss)/d(features).
    pub fn backward(&mut self, cache: &EncoderCache, d_features: &Mat) {
        self.w2.grad.add_assign(&cache.a1.t_matmul(d_features));
        for r in 0..d_features.rows {
            let row = d_features.row(r);
            for (g, &d) in self.b2.grad.data.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut d_z1 = d_features.matmul_t(&self.w2.value);
        for (dz, &z) in d_z1.data.iter_mut().zip(&cache.z1.data) {
            if z <= 0.0 {
                *dz = 0.0;
            }
        }
        self.w1.grad.add_assign(&cache.input.t_matmul(&d_z1));
        for r in 0..d_z1.rows {
            let row = d_z1.row(r);
            for (g, &d) in self.b1.grad.data.iter_mut().zip(row) {
                *g += d;
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamMatrix> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Builds the m x INPUT_DIM input matrix for a cloud: coordinates plus the
/// squared terms x^2, y^2, z^2 and the squared radius. Mean pooling over
/// raw coordinates alone cannot separate shapes whose first moments agree;
/// the quadratic terms expose each shape's radial signature.
pub fn coords_matrix(points: &[[f64; 3]]) -> Mat {
    let mut m = Mat::zeros(points.len(), INPUT_DIM);
    for (i, p) in points.iter().enumerate() {
        let row = m.row_mut(i);
        row[..3].copy_from_slice(p);
        let mut r2 = 0.0;
        for k in 0..3 {
            row[3 + k] = p[k] * p[k];
            r2 += p[k] * p[k];
        }
        row[6] = r2;
    }
    m
}

/// Linear map D -> c plus softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub w: ParamMatrix, // D x c
    pub b: ParamMatrix, // 1 x c
}

impl Classifier {
    pub fn new(feat_dim: usize, n_classes: usize, rng: &mut impl Rng) -> Self {
        Classifier {
            w: ParamMatrix::glorot("classifier.w", GroupTag::Classifier, feat_dim, n_classes, rng),
            b: ParamMatrix::zeros("classifier.b", GroupTag::Classifier, 1, n_classes),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.w.value.cols
    }

    pub fn logits(&self, pooled: &[f64]) -> Vec<f64> {
        let c = self.n_classes();
        let mut logits = self.b.value.data.clone();
        for (k, &x) in pooled.iter().enumerate() {
            let wrow = self.w.value.row(k);
            for t in 0..c {
                logits[t] += x * wrow[t];
            }
        }
        logits
    }

    pub fn classify(&self, pooled: &[f64]) -> Vec<f64> {
        softmax(&self.logits(pooled))
    }

    /// Accumulates classifier gradients for d(loss)/d(logits) and returns
    /// d(loss)/d(pooled).
    pub fn backward(&mut self, pooled: &[f64], d_logits: &[f64]) -> Vec<f64> {
        for (k, &x) in pooled.iter().enumerate() {
            let grow = self.w.grad.row_mut(k);
            for (g, &d) in grow.iter_mut().zip(d_logits) {
                *g += x * d;
            }
        }
        for (g, &d) in self.b.grad.data.iter_mut().zip(d_logits) {
            *g += d;
        }
        pooled
            .iter()
            .enumerate()
            .map(|(k, _)| {
                self.w
                    .value
                    .row(k)
                    .iter()
                    .zip(d_logits)
                    .map(|(w, d)| w * d)
                    .sum()
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamMatrix> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Max-subtraction stabilized softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// loss = -log probs[label]; gradient w.r.t. logits is probs - one_hot(label).
pub fn cross_entropy(probs: &[f64], label: usize) -> (f64, Vec<f64>) {
    let loss = -(probs[label].max(1e-300)).ln();
    let mut d_logits = probs.to_vec();
    d_logits[label] -= 1.0;
    (loss, d_logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_encoder_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut enc = Encoder::new(4, 6, &mut rng);
        enc.w1.value.fill(0.0);
        enc.w2.value.fill(0.0);
        let coords = coords_matrix(&[[0.5, -0.2, 0.1], [1.0, 0.0, 0.0]]);
        let (f, _) = enc.forward(&coords);
        assert!(f.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn encoder_is_pointwise_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(8, 5, &mut rng);
        let pts = [[0.1, 0.2, 0.3], [-0.4, 0.0, 0.25], [0.33, -0.1, 0.05]];
        let (f, _) = enc.forward(&coords_matrix(&pts));
        let perm = [2usize, 0, 1];
        let permuted: Vec<[f64; 3]> = perm.iter().map(|&i| pts[i]).collect();
        let (fp, _) = enc.forward(&coords_matrix(&permuted));
        for (r, &src) in perm.iter().enumerate() {
            assert_eq!(fp.row(r), f.row(src));
        }
    }

    #[test]
    fn encoder_matches_dense_matmul_oracle() {
        // independent triple-loop reference for the whole input -> H -> D map
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = Encoder::new(6, 4, &mut rng);
        let pts = [[0.7, -0.3, 0.2], [0.0, 0.9, -0.8]];
        let (f, _) = enc.forward(&coords_matrix(&pts));
        for (i, p) in pts.iter().enumerate() {
            let h = enc.w1.value.cols;
            let d = enc.w2.value.cols;
            let r2 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
            let input = [p[0], p[1], p[2], p[0] * p[0], p[1] * p[1], p[2] * p[2], r2];
            let mut a1 = vec![0.0; h];
            for j in 0..h {
                let mut z = enc.b1.value.data[j];
                for (k, &x) in input.iter().enumerate() {
                    z += x * enc.w1.value.get(k, j);
                }
                a1[j] = z.max(0.0);
            }
            for j in 0..d {
                let mut z = enc.b2.value.data[j];
                for k in 0..h {
                    z += a1[k] * enc.w2.value.get(k, j);
                }
                assert!((z - f.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_of_zero_logits_is_uniform() {
        let p = softmax(&[0.0; 6]);
        for &x in &p {
            assert!((x - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_large_logit_is_stable() {
        let p = softmax(&[1000.0, 0.0, 0.0]);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!(p[0] > 0.999);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let s: f64 = softmax(&logits).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_of_certain_prediction_is_zero() {
        let (loss, _) = cross_entropy(&[0.0, 1.0, 0.0], 1);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn cross_entropy_uniform_six_classes() {
        let probs = vec![1.0 / 6.0; 6];
        let (loss, _) = cross_entropy(&probs, 2);
        assert!((loss - (6.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = vec![0.3, -1.2, 0.8, 0.1];
        let label = 2;
        let (_, analytic) = cross_entropy(&softmax(&logits), label);
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut lp = logits.clone();
            let mut lm = logits.clone();
            lp[i] += h;
            lm[i] -= h;
            let (fp, _) = cross_entropy(&softmax(&lp), label);
            let (fm, _) = cross_entropy(&softmax(&lm), label);
            let fd = (fp - fm) / (2.0 * h);
            let rel = (analytic[i] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-6, "logit {i}: analytic {} vs fd {fd}", analytic[i]);
        }
    }

    #[test]
    fn adam_noop_on_zero_gradients() {
        let mut p = ParamMatrix::zeros("p", GroupTag::Encoder, 2, 2);
        p.value.fill(0.7);
        let before = p.value.clone();
        adam_step(&mut [&mut p], 0.001, &|_| 1.0, &AdamConfig::default(), 1).unwrap();
        assert_eq!(p.value, before);
    }

    #[test]
    fn adam_first_step_is_minus_lr() {
        // g = 1: m_hat = 1, v_hat = 1, delta = -lr / (1 + eps)
        let mut p = ParamMatrix::zeros("p", GroupTag::Encoder, 1, 1);
        p.grad.data[0] = 1.0;
        adam_step(&mut [&mut p], 0.001, &|_| 1.0, &AdamConfig::default(), 1).unwrap();
        assert!((p.value.data[0] + 0.001).abs() < 1e-6);
    }

    #[test]
    fn adam_rejects_nan_gradient() {
        let mut p = ParamMatrix::zeros("p", GroupTag::Encoder, 1, 1);
        p.grad.data[0] = f64::NAN;
        let err = adam_step(&mut [&mut p], 0.001, &|_| 1.0, &AdamConfig::default(), 1);
        assert!(matches!(err, Err(Error::NanGradient(_))));
    }

    #[test]
    fn adam_group_scale_scales_first_update() {
        let mk = || {
            let mut p = ParamMatrix::zeros("p", GroupTag::Encoder, 1, 1);
            p.value.data[0] = 0.5;
            p.grad.data[0] = 0.37;
            p
        };
        let mut a = mk();
        let mut b = mk();
        adam_step(&mut [&mut a], 0.001, &|_| 1.0, &AdamConfig::default(), 1).unwrap();
        adam_step(&mut [&mut b], 0.001, &|_| 0.2, &AdamConfig::default(), 1).unwrap();
        let da = a.value.data[0] - 0.5;
        let db = b.value.data[0] - 0.5;
        assert!((db / da - 0.2).abs() < 1e-9);
    }

    #[test]
    fn cosine_anneal_endpoints() {
        assert_eq!(cosine_anneal(0.001, 0, 100), 0.001);
        assert!((cosine_anneal(0.001, 50, 100) - 0.0005).abs() < 1e-15);
        assert!(cosine_anneal(0.001, 99, 100) < 1e-5 * 0.3);
    }
}

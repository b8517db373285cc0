//! Training orchestration: dual-path source/target training, the Combine
//! operation, the centroid-orthogonality regularizer, learning-rate
//! weakening on the target path, evaluation metrics, and the two analysis
//! protocols (FPS ablation, pseudo-label distribution analysis).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, knn_graph, IndexSubset, KnnGraph, PointCloud};
use crate::locality_adapter::{
    locality_adapter_backward, locality_adapter_forward, LocalityAdapter, LocalityAdapterCache,
};
use crate::nn::{
    adam_step, coords_matrix, cosine_anneal, cross_entropy, AdamConfig, Classifier, Encoder,
    EncoderCache, GroupTag, Mat,
};
use crate::pseudolabel::{
    max_confidence_pl, rectify, select_pseudo_label, BetaParams, ClassConfidenceStats,
    MAXCONF_GAMMA,
};
use crate::shape_adapter::{
    relative_positional_encoding, shape_adapter_backward, shape_adapter_forward, RelativeEncoding,
    ShapeAdapter, ShapeAdapterCache,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineMode {
    Sum,
    Average,
}

impl CombineMode {
    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(CombineMode::Sum),
            "average" => Ok(CombineMode::Average),
            _ => Err(Error::InvalidConfig(format!(
                "combine_mode must be 'sum' or 'average', got '{s}'"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CombineMode::Sum => "sum",
            CombineMode::Average => "average",
        }
    }
}

/// Which training/evaluation variant to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Full method: both adapters plus rectified pseudo-labels.
    PcAdapter,
    /// Source training only; no target path, no pseudo-labels.
    SourceOnly,
    /// Both adapters, but raw max-confidence pseudo-labels.
    MaxconfPl,
}

impl Method {
    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "pc_adapter" => Ok(Method::PcAdapter),
            "source_only" => Ok(Method::SourceOnly),
            "maxconf_pl" => Ok(Method::MaxconfPl),
            _ => Err(Error::InvalidConfig(format!(
                "method must be pc_adapter | source_only | maxconf_pl, got '{s}'"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::PcAdapter => "pc_adapter",
            Method::SourceOnly => "source_only",
            Method::MaxconfPl => "maxconf_pl",
        }
    }
}

/// Forward-pass route through the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalPath {
    /// Encoder -> shape adapter -> Combine(shape, encoder) -> classifier.
    SourcePath,
    /// Encoder -> both adapters -> Combine(shape, locality, encoder@FPS).
    TargetPath,
    /// Encoder -> mean pool -> classifier (no adapters).
    PlainPath,
}

impl EvalPath {
    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "source_path" => Ok(EvalPath::SourcePath),
            "target_path" => Ok(EvalPath::TargetPath),
            "plain_path" => Ok(EvalPath::PlainPath),
            _ => Err(Error::InvalidConfig(format!(
                "path must be source_path | target_path | plain_path, got '{s}'"
            ))),
        }
    }
}

/// All hyperparameters of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub fps_ratio: f64,
    pub fps_seed_index: usize,
    pub k: usize,
    pub r0: f64,
    pub gamma: f64,
    pub rho: f64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Selector snapshot schedule: frozen pseudo-label selectors are taken
    /// at one, two and three times this epoch, and pseudo-labeling starts
    /// when the second exists. `None` means a quarter of the epoch budget.
    /// Self-training against a barely trained model collapses the target
    /// path onto one class, so the source model needs to converge first.
    pub pl_warmup_epochs: Option<usize>,
    /// Pseudo-label ambiguity filter: the runner-up selection score must be
    /// at most this fraction of the top score, otherwise the sample is
    /// skipped. 1 disables the filter. Errors concentrate in confusable
    /// class pairs whose top-two scores run close together.
    pub pl_margin: f64,
    pub lambda_centroid: f64,
    pub combine_mode: CombineMode,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden_dim: usize,
    pub feat_dim: usize,
    pub n_classes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            fps_ratio: 0.1,
            fps_seed_index: 0,
            k: 5,
            r0: 5.0,
            gamma: 0.8,
            rho: 0.2,
            base_lr: 0.001,
            weight_decay: 0.00005,
            epochs: 40,
            pl_warmup_epochs: None,
            pl_margin: 1.0,
            lambda_centroid: 0.1,
            combine_mode: CombineMode::Sum,
            batch_size: 16,
            seed: 0,
            hidden_dim: 32,
            feat_dim: 64,
            n_classes: crate::datagen::NUM_CLASSES,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fps_ratio > 0.0 && self.fps_ratio <= 1.0) {
            return Err(Error::InvalidConfig("fps_ratio must be in (0, 1]".into()));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::InvalidConfig("rho must be in (0, 1]".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidConfig("gamma must be in (0, 1)".into()));
        }
        if self.r0 <= 0.0 {
            return Err(Error::InvalidConfig("r0 must be > 0".into()));
        }
        if !(self.pl_margin > 0.0 && self.pl_margin <= 1.0) {
            return Err(Error::InvalidConfig("pl_margin must be in (0, 1]".into()));
        }
        if self.k < 1 || self.batch_size < 1 || self.n_classes < 2 {
            return Err(Error::InvalidConfig(
                "k, batch_size and n_classes must be positive (n_classes >= 2)".into(),
            ));
        }
        Ok(())
    }
}

/// The full trainable model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub shape: ShapeAdapter,
    pub locality: LocalityAdapter,
    pub classifier: Classifier,
    pub adam_steps: u64,
    pub epoch: usize,
}

impl Model {
    pub fn new(cfg: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Model {
            encoder: Encoder::new(cfg.hidden_dim, cfg.feat_dim, &mut rng),
            shape: ShapeAdapter::new(cfg.feat_dim),
            locality: LocalityAdapter::new(cfg.feat_dim),
            classifier: Classifier::new(cfg.feat_dim, cfg.n_classes, &mut rng),
            adam_steps: 0,
            epoch: 0,
        }
    }
}

/// Mean-pools each stream over its rows, then sums or averages the pooled
/// vectors. All streams must share width D.
pub fn combine(streams: &[&Mat], mode: CombineMode) -> Result<Vec<f64>> {
    let first = streams
        .first()
        .ok_or_else(|| Error::InvalidData("combine needs at least one stream".into()))?;
    let d = first.cols;
    let mut out = vec![0.0; d];
    for s in streams {
        if s.cols != d {
            return Err(Error::InvalidData(format!(
                "combine stream width mismatch: {} vs {d}",
                s.cols
            )));
        }
        let inv = 1.0 / s.rows as f64;
        for r in 0..s.rows {
            for (o, &x) in out.iter_mut().zip(s.row(r)) {
                *o += inv * x;
            }
        }
    }
    if mode == CombineMode::Average {
        let inv = 1.0 / streams.len() as f64;
        out.iter_mut().for_each(|x| *x *= inv);
    }
    Ok(out)
}

/// Gradient of [`combine`]: distributes d(loss)/d(pooled) back to each
/// stream's rows.
pub fn combine_backward(streams: &[&Mat], mode: CombineMode, d_pooled: &[f64]) -> Vec<Mat> {
    let coef = match mode {
        CombineMode::Sum => 1.0,
        CombineMode::Average => 1.0 / streams.len() as f64,
    };
    streams
        .iter()
        .map(|s| {
            let mut g = Mat::zeros(s.rows, s.cols);
            let c = coef / s.rows as f64;
            for r in 0..s.rows {
                for (gx, &d) in g.row_mut(r).iter_mut().zip(d_pooled) {
                    *gx = c * d;
                }
            }
            g
        })
        .collect()
}

fn gather_rows(m: &Mat, indices: &[usize]) -> Mat {
    let mut out = Mat::zeros(indices.len(), m.cols);
    for (r, &i) in indices.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}

/// Everything the backward pass needs for one sample.
pub struct SampleForward {
    pub path: EvalPath,
    pub enc_cache: EncoderCache,
    pub features: Mat,
    pub fps: Option<IndexSubset>,
    pub fps_features: Option<Mat>,
    pub encoding: Option<RelativeEncoding>,
    pub shape_out: Option<Mat>,
    pub shape_cache: Option<ShapeAdapterCache>,
    pub graph: Option<KnnGraph>,
    pub loc_out: Option<Mat>,
    pub loc_cache: Option<LocalityAdapterCache>,
    pub pooled: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Model {
    /// Runs the model along `path`, returning probabilities and the cache.
    pub fn forward(
        &self,
        cloud: &PointCloud,
        path: EvalPath,
        cfg: &TrainConfig,
    ) -> Result<SampleForward> {
        let coords = coords_matrix(&cloud.points);
        let (features, enc_cache) = self.encoder.forward(&coords);
        let mut fw = SampleForward {
            path,
            enc_cache,
            features,
            fps: None,
            fps_features: None,
            encoding: None,
            shape_out: None,
            shape_cache: None,
            graph: None,
            loc_out: None,
            loc_cache: None,
            pooled: Vec::new(),
            probs: Vec::new(),
        };
        if path != EvalPath::PlainPath {
            let fps = farthest_point_sample(cloud, cfg.fps_ratio, cfg.fps_seed_index)?;
            if fps.indices.len() < 2 {
                return Err(Error::InvalidData(
                    "shape adapter needs at least 2 FPS points; raise fps_ratio or cloud size"
                        .into(),
                ));
            }
            let fps_coords: Vec<[f64; 3]> =
                fps.indices.iter().map(|&i| cloud.points[i]).collect();
            let encoding = relative_positional_encoding(&fps_coords);
            let fps_features = gather_rows(&fw.features, &fps.indices);
            let (shape_out, shape_cache) =
                shape_adapter_forward(&fps_features, &encoding, &self.shape);
            if path == EvalPath::TargetPath {
                let graph = knn_graph(cloud, &fps, cfg.k)?;
                let (loc_out, loc_cache) =
                    locality_adapter_forward(&fw.features, &graph, &self.locality);
                fw.graph = Some(graph);
                fw.loc_out = Some(loc_out);
                fw.loc_cache = Some(loc_cache);
            }
            fw.fps = Some(fps);
            fw.fps_features = Some(fps_features);
            fw.encoding = Some(encoding);
            fw.shape_out = Some(shape_out);
            fw.shape_cache = Some(shape_cache);
        }
        fw.pooled = match path {
            EvalPath::PlainPath => combine(&[&fw.features], cfg.combine_mode)?,
            EvalPath::SourcePath => combine(
                &[fw.shape_out.as_ref().unwrap(), &fw.features],
                cfg.combine_mode,
            )?,
            EvalPath::TargetPath => {
                let fps_feat = gather_rows(&fw.features, &fw.fps.as_ref().unwrap().indices);
                combine(
                    &[
                        fw.shape_out.as_ref().unwrap(),
                        fw.loc_out.as_ref().unwrap(),
                        &fps_feat,
                    ],
                    cfg.combine_mode,
                )?
            }
        };
        fw.probs = self.classifier.classify(&fw.pooled);
        Ok(fw)
    }

    /// Backward from d(loss)/d(pooled) through the sample's whole path,
    /// accumulating into the parameter gradients.
    pub fn backward_sample(
        &mut self,
        fw: &SampleForward,
        d_pooled: &[f64],
        cfg: &TrainConfig,
    ) -> Result<()> {
        let mut d_features = Mat::zeros(fw.features.rows, fw.features.cols);
        match fw.path {
            EvalPath::PlainPath => {
                let grads = combine_backward(&[&fw.features], cfg.combine_mode, d_pooled);
                d_features.add_assign(&grads[0]);
            }
            EvalPath::SourcePath => {
                let shape_out = fw.shape_out.as_ref().unwrap();
                let grads =
                    combine_backward(&[shape_out, &fw.features], cfg.combine_mode, d_pooled);
                let d_fps_features = shape_adapter_backward(
                    fw.fps_features.as_ref().unwrap(),
                    fw.encoding.as_ref().unwrap(),
                    &mut self.shape,
                    fw.shape_cache.as_ref().unwrap(),
                    &grads[0],
                );
                let fps = fw.fps.as_ref().unwrap();
                for (r, &i) in fps.indices.iter().enumerate() {
                    for (g, &d) in d_features.row_mut(i).iter_mut().zip(d_fps_features.row(r)) {
                        *g += d;
                    }
                }
                d_features.add_assign(&grads[1]);
            }
            EvalPath::TargetPath => {
                let shape_out = fw.shape_out.as_ref().unwrap();
                let loc_out = fw.loc_out.as_ref().unwrap();
                let fps = fw.fps.as_ref().unwrap();
                let fps_feat = gather_rows(&fw.features, &fps.indices);
                let grads = combine_backward(
                    &[shape_out, loc_out, &fps_feat],
                    cfg.combine_mode,
                    d_pooled,
                );
                let d_fps_features = shape_adapter_backward(
                    fw.fps_features.as_ref().unwrap(),
                    fw.encoding.as_ref().unwrap(),
                    &mut self.shape,
                    fw.shape_cache.as_ref().unwrap(),
                    &grads[0],
                );
                for (r, &i) in fps.indices.iter().enumerate() {
                    for (g, &d) in d_features.row_mut(i).iter_mut().zip(d_fps_features.row(r)) {
                        *g += d;
                    }
                }
                let d_loc = locality_adapter_backward(
                    &fw.features,
                    fw.graph.as_ref().unwrap(),
                    &mut self.locality,
                    fw.loc_cache.as_ref().unwrap(),
                    &grads[1],
                );
                d_features.add_assign(&d_loc);
                for (r, &i) in fps.indices.iter().enumerate() {
                    for (g, &d) in d_features.row_mut(i).iter_mut().zip(grads[2].row(r)) {
                        *g += d;
                    }
                }
            }
        }
        self.encoder.backward(&fw.enc_cache, &d_features);
        Ok(())
    }

    fn zero_grads(&mut self) {
        for p in self.encoder.params_mut() {
            p.zero_grad();
        }
        self.shape.phi.zero_grad();
        self.locality.theta.zero_grad();
        for p in self.classifier.params_mut() {
            p.zero_grad();
        }
    }
}

/// Centroid-orthogonality regularizer: squared cosine similarity between
/// L2-normalized per-class mean representations present in the batch.
/// Returns the loss and the gradient w.r.t. every pooled vector.
pub fn centroid_loss(
    pooled: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
) -> (f64, Vec<Vec<f64>>) {
    assert_eq!(pooled.len(), labels.len());
    let d = pooled.first().map(|p| p.len()).unwrap_or(0);
    let mut grads = vec![vec![0.0; d]; pooled.len()];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &t) in labels.iter().enumerate() {
        members[t].push(i);
    }
    // per-class centroids, normalized; classes with zero-norm centroids skipped
    let mut classes = Vec::new();
    for (t, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let n = idx.len() as f64;
        let mut mu = vec![0.0; d];
        for &i in idx {
            for (m, &x) in mu.iter_mut().zip(&pooled[i]) {
                *m += x / n;
            }
        }
        let norm = mu.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 0.0 {
            log::warn!("zero-norm centroid for class {t}; skipped in centroid loss");
            continue;
        }
        let unit: Vec<f64> = mu.iter().map(|x| x / norm).collect();
        classes.push((t, idx, norm, unit));
    }
    if classes.len() < 2 {
        return (0.0, grads);
    }
    let mut loss = 0.0;
    // dL/d(unit_t) accumulated over all pairs
    let mut d_units = vec![vec![0.0; d]; classes.len()];
    for a in 0..classes.len() {
        for b in (a + 1)..classes.len() {
            let dot: f64 = classes[a]
                .3
                .iter()
                .zip(&classes[b].3)
                .map(|(x, y)| x * y)
                .sum();
            loss += dot * dot;
            for k in 0..d {
                d_units[a][k] += 2.0 * dot * classes[b].3[k];
                d_units[b][k] += 2.0 * dot * classes[a].3[k];
            }
        }
    }
    // chain through normalization and the class mean
    for (ci, (_, idx, norm, unit)) in classes.iter().enumerate() {
        let g = &d_units[ci];
        let g_dot_u: f64 = g.iter().zip(unit.iter()).map(|(x, y)| x * y).sum();
        let inv_n = 1.0 / idx.len() as f64;
        for &i in idx.iter() {
            for k in 0..d {
                grads[i][k] += inv_n * (g[k] - g_dot_u * unit[k]) / norm;
            }
        }
    }
    (loss, grads)
}

fn group_scale_source(_g: GroupTag) -> f64 {
    1.0
}

/// One optimization step over a labeled source batch along the source path.
/// Updates encoder, shape adapter, and classifier; the locality adapter is
/// untouched. Collects per-class confidence stats from the predictions.
pub fn source_step(
    model: &mut Model,
    batch: &[(&PointCloud, usize)],
    cfg: &TrainConfig,
    lr: f64,
    stats: &mut ClassConfidenceStats,
) -> Result<f64> {
    model.zero_grads();
    let inv_b = 1.0 / batch.len() as f64;
    let mut total_ce = 0.0;
    let mut forwards = Vec::with_capacity(batch.len());
    for &(cloud, label) in batch {
        let fw = model.forward(cloud, EvalPath::SourcePath, cfg)?;
        stats.collect(&fw.probs, label);
        forwards.push((fw, label));
    }
    let pooled: Vec<Vec<f64>> = forwards.iter().map(|(fw, _)| fw.pooled.clone()).collect();
    let labels: Vec<usize> = forwards.iter().map(|&(_, l)| l).collect();
    let (c_loss, c_grads) = if cfg.lambda_centroid > 0.0 {
        centroid_loss(&pooled, &labels, cfg.n_classes)
    } else {
        (0.0, vec![vec![0.0; cfg.n_classes.max(1)]; pooled.len()])
    };
    for (i, (fw, label)) in forwards.iter().enumerate() {
        let (ce, mut d_logits) = cross_entropy(&fw.probs, *label);
        total_ce += ce;
        d_logits.iter_mut().for_each(|g| *g *= inv_b);
        let mut d_pooled = model.classifier.backward(&fw.pooled, &d_logits);
        if cfg.lambda_centroid > 0.0 {
            for (dp, &cg) in d_pooled.iter_mut().zip(&c_grads[i]) {
                *dp += cfg.lambda_centroid * cg;
            }
        }
        model.backward_sample(fw, &d_pooled, cfg)?;
    }
    model.adam_steps += 1;
    let adam = AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let steps = model.adam_steps;
    {
        let mut params = model.encoder.params_mut();
        params.push(&mut model.shape.phi);
        params.extend(model.classifier.params_mut());
        adam_step(&mut params, lr, &group_scale_source, &adam, steps)?;
    }
    Ok(total_ce * inv_b + cfg.lambda_centroid * c_loss)
}

/// Pseudo-label selection mode for the target step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlMode {
    Rectified,
    MaxConfidence,
}

/// Lowest index wins ties, matching the pseudo-label selectors.
fn argmax(probs: &[f64]) -> usize {
    probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// One optimization step over an unlabeled target batch along the target
/// path. Pseudo-labels come from `selectors`, frozen models (with their
/// fitted betas) that never see the pseudo-labeled loss: selecting with the
/// live weights lets confident mistakes reinforce themselves until nearly
/// every sample clears the threshold. The selectors' score vectors are
/// averaged and one selection made on the mean; a sample is adopted only
/// when that pick survives re-running FPS from a different seed point and
/// the label's per-class quota (decremented in place, shared across the
/// epoch's batches) is not exhausted. Samples that
/// fail any check contribute no loss; when none pass, parameters are left
/// untouched. With `pl_margin < 1`, samples whose runner-up selection score
/// runs close to the winner are also skipped. Shared components (encoder,
/// shape adapter) get learning rate scaled by rho.
pub fn target_step(
    model: &mut Model,
    selectors: &[(Model, Vec<BetaParams>)],
    batch: &[&PointCloud],
    quota: &mut [usize],
    cfg: &TrainConfig,
    lr: f64,
    mode: PlMode,
) -> Result<(f64, Vec<(usize, Option<usize>)>)> {
    model.zero_grads();
    if selectors.is_empty() {
        return Err(Error::InvalidData("target_step needs at least one selector".into()));
    }
    // confidently wrong picks tend to flip when FPS restarts from another
    // seed point, while correct ones stay put
    let alt_cfg = TrainConfig {
        fps_seed_index: cfg.fps_seed_index + 1,
        ..cfg.clone()
    };
    let inv_s = 1.0 / selectors.len() as f64;
    let mut selected = Vec::new();
    for &cloud in batch {
        // fuse the selectors at the score level: a snapshot with strong,
        // well-calibrated scores can carry a class the other snapshot is
        // diffident about, where requiring every snapshot to clear the
        // threshold skews adoption toward the weaker snapshot's strengths
        let mut fused = vec![0.0; cfg.n_classes];
        let mut fused_alt = vec![0.0; cfg.n_classes];
        for (sel_model, sel_betas) in selectors {
            let sel = sel_model.forward(cloud, EvalPath::TargetPath, cfg)?;
            let scores = match mode {
                PlMode::Rectified => rectify(&sel.probs, sel_betas, cfg.r0)?,
                PlMode::MaxConfidence => sel.probs.clone(),
            };
            for (f, s) in fused.iter_mut().zip(&scores) {
                *f += s * inv_s;
            }
            let alt = sel_model.forward(cloud, EvalPath::TargetPath, &alt_cfg)?;
            for (f, p) in fused_alt.iter_mut().zip(&alt.probs) {
                *f += p * inv_s;
            }
        }
        let pl = match mode {
            PlMode::Rectified => select_pseudo_label(&fused, cfg.gamma, cfg.r0),
            PlMode::MaxConfidence => max_confidence_pl(&fused, MAXCONF_GAMMA),
        };
        let (label, score) = match pl {
            Some(hit) => hit,
            None => continue,
        };
        let runner_up = fused
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != label)
            .map(|(_, &s)| s)
            .fold(0.0f64, f64::max);
        if runner_up > cfg.pl_margin * score {
            continue;
        }
        if argmax(&fused_alt) != label {
            continue;
        }
        if quota[label] == 0 {
            continue;
        }
        quota[label] -= 1;
        let fw = model.forward(cloud, EvalPath::TargetPath, cfg)?;
        selected.push((fw, label, cloud.label));
    }
    if selected.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let inv_n = 1.0 / selected.len() as f64;
    let mut total_ce = 0.0;
    for (fw, label, _) in &selected {
        let (ce, mut d_logits) = cross_entropy(&fw.probs, *label);
        total_ce += ce;
        d_logits.iter_mut().for_each(|g| *g *= inv_n);
        let d_pooled = model.classifier.backward(&fw.pooled, &d_logits);
        model.backward_sample(fw, &d_pooled, cfg)?;
    }
    model.adam_steps += 1;
    let adam = AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let rho = cfg.rho;
    let scale = move |g: GroupTag| match g {
        GroupTag::Encoder | GroupTag::ShapeAdapter => rho,
        GroupTag::LocalityAdapter | GroupTag::Classifier => 1.0,
    };
    let steps = model.adam_steps;
    {
        let mut params = model.encoder.params_mut();
        params.push(&mut model.shape.phi);
        params.push(&mut model.locality.theta);
        params.extend(model.classifier.params_mut());
        adam_step(&mut params, lr, &scale, &adam, steps)?;
    }
    Ok((
        total_ce * inv_n,
        selected.iter().map(|(_, l, t)| (*l, *t)).collect(),
    ))
}

/// Evaluation summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub per_class_mean_confidence: Vec<f64>,
}

/// Deterministic forward-only pass over a labeled dataset.
pub fn evaluate(
    dataset: &[PointCloud],
    model: &Model,
    path: EvalPath,
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    let c = cfg.n_classes;
    let mut confusion = vec![vec![0usize; c]; c];
    let mut conf_sum = vec![0.0; c];
    let mut conf_count = vec![0usize; c];
    for cloud in dataset {
        let label = cloud
            .label
            .ok_or_else(|| Error::InvalidData("evaluation requires labeled clouds".into()))?;
        let fw = model.forward(cloud, path, cfg)?;
        let pred = fw
            .probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .unwrap()
            .0;
        confusion[label][pred] += 1;
        conf_sum[label] += fw.probs[label];
        conf_count[label] += 1;
    }
    let total: usize = confusion.iter().map(|r| r.iter().sum::<usize>()).sum();
    let correct: usize = (0..c).map(|t| confusion[t][t]).sum();
    let mut recalls = Vec::new();
    for t in 0..c {
        let row: usize = confusion[t].iter().sum();
        if row > 0 {
            recalls.push(confusion[t][t] as f64 / row as f64);
        }
    }
    let per_class_mean_confidence = (0..c)
        .map(|t| {
            if conf_count[t] > 0 {
                conf_sum[t] / conf_count[t] as f64
            } else {
                0.0
            }
        })
        .collect();
    Ok(EvalReport {
        accuracy: correct as f64 / total.max(1) as f64,
        balanced_accuracy: recalls.iter().sum::<f64>() / recalls.len().max(1) as f64,
        confusion,
        per_class_mean_confidence,
    })
}

/// One metrics row per training epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub source_loss: f64,
    pub target_loss: f64,
    pub n_pseudo_labels: usize,
    pub target_accuracy: f64,
    pub target_balanced_accuracy: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,source_loss,target_loss,n_pl,target_acc,target_bacc";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.source_loss,
            self.target_loss,
            self.n_pseudo_labels,
            self.target_accuracy,
            self.target_balanced_accuracy
        )
    }
}

/// Result of a full training run.
pub struct TrainResult {
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
    pub betas: Vec<BetaParams>,
    /// per-epoch per-class (count, mean, variance, alpha, beta) diagnostics
    pub beta_diagnostics: Vec<Vec<(usize, f64, f64, f64, f64)>>,
    /// pseudo-labels adopted over the whole run, counted per class
    pub pl_class_counts: Vec<usize>,
    /// adopted pseudo-labels that agree with the held-back target label,
    /// per class (all zeros when the target clouds are unlabeled)
    pub pl_class_correct: Vec<usize>,
}

fn epoch_order(n: usize, len: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    (0..len).map(|i| order[i % n]).collect()
}

/// Full training loop: per epoch, interleave one source batch and one
/// target batch (the shorter dataset is cycled), refit the per-class beta
/// distributions at epoch end, and cosine-anneal the learning rate.
/// Deterministic given the config seed.
pub fn train(
    source: &[PointCloud],
    target: &[PointCloud],
    cfg: &TrainConfig,
    method: Method,
) -> Result<TrainResult> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::InvalidData("source dataset is empty".into()));
    }
    if method != Method::SourceOnly && target.is_empty() {
        return Err(Error::InvalidData("target dataset is empty".into()));
    }
    let source_labeled: Vec<(&PointCloud, usize)> = source
        .iter()
        .map(|c| {
            c.label
                .map(|l| (c, l))
                .ok_or_else(|| Error::InvalidData("source clouds must be labeled".into()))
        })
        .collect::<Result<_>>()?;
    let mut model = Model::new(cfg);
    let mut stats = ClassConfidenceStats::new(cfg.n_classes);
    let mut betas = vec![BetaParams::invalid(); cfg.n_classes];
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut beta_diagnostics = Vec::with_capacity(cfg.epochs);
    let mut pl_class_counts = vec![0usize; cfg.n_classes];
    let mut pl_class_correct = vec![0usize; cfg.n_classes];
    let ns = source.len();
    let nt = target.len().max(1);
    let pairs_per_epoch = ns.max(if method == Method::SourceOnly { 0 } else { nt });
    let n_batches = pairs_per_epoch.div_ceil(cfg.batch_size);
    let warmup = cfg.pl_warmup_epochs.unwrap_or(cfg.epochs / 4);
    // Pseudo-labels come from frozen snapshots of a twin that sees the same
    // source batches as the main model but never the pseudo-labeled loss.
    // Snapshots are taken at the warmup epoch and at two and three times it
    // (with the betas fit to the twin's confidences at each point); target
    // training starts at the second snapshot and selection fuses whatever
    // snapshots exist. Which single epoch yields a well-calibrated selector
    // varies from run to run, and the fused ensemble is robust to any one
    // snapshot being the bad one.
    let snap2 = (2 * warmup).min(cfg.epochs.saturating_sub(1));
    let snap3 = (3 * warmup).min(cfg.epochs.saturating_sub(1));
    let mut twin: Option<Model> = if method == Method::SourceOnly {
        None
    } else {
        Some(model.clone())
    };
    let mut selectors: Vec<(Model, Vec<BetaParams>)> = Vec::new();
    let mut main_stats = ClassConfidenceStats::new(cfg.n_classes);
    for epoch in 0..cfg.epochs {
        if twin.is_some() && (epoch == warmup || (epoch == snap2 && snap2 > warmup)) {
            selectors.push((twin.clone().unwrap(), betas.clone()));
        }
        if twin.is_some() && epoch == snap3 && snap3 > snap2 {
            selectors.push((twin.take().unwrap(), betas.clone()));
        }
        let lr = cosine_anneal(cfg.base_lr, epoch, cfg.epochs);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E3779B97F4A7C15));
        let src_order = epoch_order(ns, n_batches * cfg.batch_size, &mut rng);
        let tgt_order = if method == Method::SourceOnly {
            Vec::new()
        } else {
            epoch_order(target.len(), n_batches * cfg.batch_size, &mut rng)
        };
        let mut src_loss_sum = 0.0;
        let mut tgt_loss_sum = 0.0;
        let mut n_pl = 0usize;
        // one balanced share of the target set per class per epoch
        let mut quota = vec![nt.div_ceil(cfg.n_classes); cfg.n_classes];
        for b in 0..n_batches {
            let lo = b * cfg.batch_size;
            let hi = lo + cfg.batch_size;
            let src_batch: Vec<(&PointCloud, usize)> =
                src_order[lo..hi].iter().map(|&i| source_labeled[i]).collect();
            if let Some(t) = twin.as_mut() {
                source_step(t, &src_batch, cfg, lr, &mut stats)?;
                src_loss_sum += source_step(&mut model, &src_batch, cfg, lr, &mut main_stats)?;
            } else {
                src_loss_sum += source_step(&mut model, &src_batch, cfg, lr, &mut stats)?;
            }
            if method != Method::SourceOnly && epoch >= snap2 {
                let tgt_batch: Vec<&PointCloud> =
                    tgt_order[lo..hi].iter().map(|&i| &target[i]).collect();
                let mode = if method == Method::MaxconfPl {
                    PlMode::MaxConfidence
                } else {
                    PlMode::Rectified
                };
                let (loss, labels) = target_step(
                    &mut model, &selectors, &tgt_batch, &mut quota, cfg, lr, mode,
                )?;
                tgt_loss_sum += loss;
                n_pl += labels.len();
                for (l, truth) in labels {
                    pl_class_counts[l] += 1;
                    if truth == Some(l) {
                        pl_class_correct[l] += 1;
                    }
                }
            }
        }
        // epoch-end refit from the confidences gathered during training
        let diag: Vec<(usize, f64, f64, f64, f64)> = (0..cfg.n_classes)
            .map(|t| {
                let fit = match (stats.mean(t), stats.variance(t)) {
                    (Some(m), Some(v)) => crate::pseudolabel::fit_beta_mom(m, v),
                    _ => BetaParams::invalid(),
                };
                (
                    stats.count[t],
                    stats.mean(t).unwrap_or(f64::NAN),
                    stats.variance(t).unwrap_or(f64::NAN),
                    fit.alpha,
                    fit.beta,
                )
            })
            .collect();
        betas = stats.fit_all();
        beta_diagnostics.push(diag);
        stats.reset();
        main_stats.reset();
        let report = if target.is_empty() {
            EvalReport {
                accuracy: 0.0,
                balanced_accuracy: 0.0,
                confusion: vec![vec![0; cfg.n_classes]; cfg.n_classes],
                per_class_mean_confidence: vec![0.0; cfg.n_classes],
            }
        } else {
            let eval_path = if method == Method::SourceOnly {
                EvalPath::SourcePath
            } else {
                EvalPath::TargetPath
            };
            evaluate(target, &model, eval_path, cfg)?
        };
        model.epoch = epoch + 1;
        metrics.push(EpochMetrics {
            epoch,
            lr,
            source_loss: src_loss_sum / n_batches as f64,
            target_loss: tgt_loss_sum / n_batches.max(1) as f64,
            n_pseudo_labels: n_pl,
            target_accuracy: report.accuracy,
            target_balanced_accuracy: report.balanced_accuracy,
        });
        log::info!(
            "epoch {epoch}: lr {lr:.6} src_loss {:.4} tgt_loss {:.4} n_pl {n_pl} tgt_acc {:.4} tgt_bacc {:.4}",
            metrics.last().unwrap().source_loss,
            metrics.last().unwrap().target_loss,
            report.accuracy,
            report.balanced_accuracy,
        );
    }
    Ok(TrainResult {
        model,
        metrics,
        betas,
        beta_diagnostics,
        pl_class_counts,
        pl_class_correct,
    })
}

/// Reduces every cloud to round(ratio * m) points via FPS (ratio 1 keeps
/// the cloud as-is).
fn fps_reduce(clouds: &[PointCloud], ratio: f64, seed_index: usize) -> Result<Vec<PointCloud>> {
    if ratio >= 1.0 {
        return Ok(clouds.to_vec());
    }
    clouds
        .iter()
        .map(|c| {
            let subset = farthest_point_sample(c, ratio, seed_index)?;
            Ok(PointCloud::new(
                subset.indices.iter().map(|&i| c.points[i]).collect(),
                c.label,
            ))
        })
        .collect()
}

/// One row of the FPS ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct FpsAblationRow {
    pub point_ratio: f64,
    pub target_accuracy: f64,
    pub target_balanced_accuracy: f64,
}

/// Trains three source-only models (plain path: no adapters, no
/// pseudo-labels) on 100%, 50% and 25% FPS-reduced source clouds and
/// evaluates each on the target set.
pub fn run_fps_ablation(
    source: &[PointCloud],
    target: &[PointCloud],
    cfg: &TrainConfig,
) -> Result<Vec<FpsAblationRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &ratio in &[1.0, 0.5, 0.25] {
        let reduced = fps_reduce(source, ratio, cfg.fps_seed_index)?;
        let labeled: Vec<(&PointCloud, usize)> = reduced
            .iter()
            .map(|c| {
                c.label
                    .map(|l| (c, l))
                    .ok_or_else(|| Error::InvalidData("source clouds must be labeled".into()))
            })
            .collect::<Result<_>>()?;
        let mut model = Model::new(cfg);
        let mut stats = ClassConfidenceStats::new(cfg.n_classes);
        let n_batches = reduced.len().div_ceil(cfg.batch_size);
        for epoch in 0..cfg.epochs {
            let lr = cosine_anneal(cfg.base_lr, epoch, cfg.epochs);
            let mut rng = ChaCha8Rng::seed_from_u64(
                cfg.seed ^ (epoch as u64).wrapping_mul(0x9E3779B97F4A7C15),
            );
            let order = epoch_order(reduced.len(), n_batches * cfg.batch_size, &mut rng);
            for b in 0..n_batches {
                let batch: Vec<(&PointCloud, usize)> = order
                    [b * cfg.batch_size..(b + 1) * cfg.batch_size]
                    .iter()
                    .map(|&i| labeled[i])
                    .collect();
                plain_source_step(&mut model, &batch, cfg, lr, &mut stats)?;
            }
            stats.reset();
        }
        let report = evaluate(target, &model, EvalPath::PlainPath, cfg)?;
        rows.push(FpsAblationRow {
            point_ratio: ratio,
            target_accuracy: report.accuracy,
            target_balanced_accuracy: report.balanced_accuracy,
        });
    }
    Ok(rows)
}

/// Source step along the plain path (encoder + classifier only), used by
/// the FPS ablation protocol.
fn plain_source_step(
    model: &mut Model,
    batch: &[(&PointCloud, usize)],
    cfg: &TrainConfig,
    lr: f64,
    stats: &mut ClassConfidenceStats,
) -> Result<f64> {
    model.zero_grads();
    let inv_b = 1.0 / batch.len() as f64;
    let mut total_ce = 0.0;
    for &(cloud, label) in batch {
        let fw = model.forward(cloud, EvalPath::PlainPath, cfg)?;
        stats.collect(&fw.probs, label);
        let (ce, mut d_logits) = cross_entropy(&fw.probs, label);
        total_ce += ce;
        d_logits.iter_mut().for_each(|g| *g *= inv_b);
        let d_pooled = model.classifier.backward(&fw.pooled, &d_logits);
        model.backward_sample(&fw, &d_pooled, cfg)?;
    }
    model.adam_steps += 1;
    let adam = AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let steps = model.adam_steps;
    {
        let mut params = model.encoder.params_mut();
        params.extend(model.classifier.params_mut());
        adam_step(&mut params, lr, &group_scale_source, &adam, steps)?;
    }
    Ok(total_ce * inv_b)
}

/// Output of the pseudo-label distribution analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct PlAnalysis {
    pub source_label_hist: Vec<usize>,
    pub target_label_hist: Vec<usize>,
    pub target_pl_hist: Vec<usize>,
    pub n_unlabeled: usize,
    pub class_mean_confidence: Vec<f64>,
}

/// Label-distribution analysis: source/target label histograms, the target
/// pseudo-label histogram under the chosen selection mode, and per-class
/// mean source confidence (on the source path).
pub fn run_pl_analysis(
    model: &Model,
    source: &[PointCloud],
    target: &[PointCloud],
    mode: PlMode,
    cfg: &TrainConfig,
) -> Result<PlAnalysis> {
    cfg.validate()?;
    let c = cfg.n_classes;
    let mut source_label_hist = vec![0usize; c];
    let mut stats = ClassConfidenceStats::new(c);
    for cloud in source {
        let label = cloud
            .label
            .ok_or_else(|| Error::InvalidData("source clouds must be labeled".into()))?;
        source_label_hist[label] += 1;
        let fw = model.forward(cloud, EvalPath::SourcePath, cfg)?;
        stats.collect(&fw.probs, label);
    }
    let betas = stats.fit_all();
    let mut target_label_hist = vec![0usize; c];
    let mut target_pl_hist = vec![0usize; c];
    let mut n_unlabeled = 0usize;
    for cloud in target {
        if let Some(label) = cloud.label {
            target_label_hist[label] += 1;
        }
        let fw = model.forward(cloud, EvalPath::TargetPath, cfg)?;
        let pl = match mode {
            PlMode::Rectified => {
                let adjusted = rectify(&fw.probs, &betas, cfg.r0)?;
                select_pseudo_label(&adjusted, cfg.gamma, cfg.r0)
            }
            PlMode::MaxConfidence => max_confidence_pl(&fw.probs, MAXCONF_GAMMA),
        };
        match pl {
            Some((t, _)) => target_pl_hist[t] += 1,
            None => n_unlabeled += 1,
        }
    }
    let class_mean_confidence = (0..c).map(|t| stats.mean(t).unwrap_or(0.0)).collect();
    Ok(PlAnalysis {
        source_label_hist,
        target_label_hist,
        target_pl_hist,
        n_unlabeled,
        class_mean_confidence,
    })
}

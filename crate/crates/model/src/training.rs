//! Two-stage optimization: stage 1 fits SAP to interactiveness, stage 2
//! freezes SAP and adapts the language model under the matching loss.

use std::sync::Arc;

use hoi_autograd::{Graph, Tensor, Var};
use hoi_core::io::GroundTruthImage;
use hoi_core::pairing::{associate_pairs, label_pairs, DEFAULT_IOU_THRESHOLD};
use hoi_core::{BBox, GroundTruthTriplet, InteractionId, SplitSpec};
use image::RgbImage;
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use hoi_autograd::functional::{focal_bce, FOCAL_EPS};

use crate::backbone::{FeatureMap, VisualEncoder};
use crate::checkpoint::{Checkpoint, MetricRecord};
use crate::error::{ModelError, Result};
use crate::features::{image_items, pair_features, phrases, PairFeatures};
use crate::lm::{toy_forward, GraphItem, PromptItem};
use crate::params::{Bound, ParamSet};
use crate::sap;
use crate::scorer::{build_matching_prompt, Prompt};

/// Which language-model weights stage 2 may change. The visual variants
/// additionally tune the connector that maps encoder features into the LM;
/// the encoder itself always stays frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningRegime {
    #[default]
    Lora,
    FullLlm,
    LoraVisualLlm,
    FullVisualLlm,
}

impl TuningRegime {
    fn base_trainable(&self, name: &str) -> bool {
        let connector = name.starts_with("connector.");
        match self {
            TuningRegime::Lora => false,
            TuningRegime::FullLlm => !connector,
            TuningRegime::LoraVisualLlm => connector,
            TuningRegime::FullVisualLlm => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: u8,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub iou_threshold: f64,
    /// Negatives per positive in stage 2.
    pub negative_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Keep the SAP-to-LM projection fixed in stage 2.
    pub freeze_projection: bool,
    /// Before stage 2, fold a whitening of the training pairs' interaction
    /// features into the projection. Stage 1 stretches the interactiveness
    /// direction of the features by orders of magnitude over the rest; this
    /// puts every direction back on one scale.
    pub whiten_projection: bool,
    pub regime: TuningRegime,
    /// Pixel noise added to ground-truth boxes used as detections.
    pub box_jitter: f64,
    pub flip: bool,
    /// Relative per-channel intensity noise.
    pub color_jitter: f64,
    /// Worker threads for per-pair gradients; results do not depend on it.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            epochs: 30,
            learning_rate: 1e-4,
            batch_size: 16,
            alpha: 0.25,
            gamma: 2.0,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            negative_ratio: 1.0,
            weight_decay: 0.01,
            seed: 0,
            freeze_projection: false,
            whiten_projection: true,
            regime: TuningRegime::Lora,
            box_jitter: 0.0,
            flip: false,
            color_jitter: 0.0,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn stage2() -> Self {
        Self {
            stage: 2,
            epochs: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if !(1..=2).contains(&self.stage) {
            return bad("stage must be 1 or 2");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("focal alpha must lie in (0, 1]");
        }
        if !(self.gamma >= 0.0) {
            return bad("focal gamma must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.negative_ratio >= 0.0) || !(self.box_jitter >= 0.0) || !(self.color_jitter >= 0.0) {
            return bad("ratios and jitter amounts must be non-negative");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        Ok(())
    }

    fn augments(&self) -> bool {
        self.flip || self.box_jitter > 0.0 || self.color_jitter > 0.0
    }
}

/// Mean focal loss over pairs.
pub fn stage1_loss(scores: &[f64], labels: &[bool], alpha: f64, gamma: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(ModelError::InvalidBatch("empty batch".into()));
    }
    if scores.len() != labels.len() {
        return Err(ModelError::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let sum: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&p, &y)| focal_bce(p, y as u8 as f64, alpha, gamma))
        .sum();
    Ok(sum / scores.len() as f64)
}

/// Mean over pairs of the mean focal loss over each pair's candidates.
pub fn stage2_loss(batch: &[(Vec<f64>, Vec<bool>)], alpha: f64, gamma: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(ModelError::InvalidBatch("empty batch".into()));
    }
    let mut total = 0.0;
    for (s, y) in batch {
        if s.len() != y.len() || s.is_empty() {
            return Err(ModelError::Shape(format!("{} scores for {} labels", s.len(), y.len())));
        }
        total += stage1_loss(s, y, alpha, gamma)?;
    }
    Ok(total / batch.len() as f64)
}

/// Eigenvalues below this fraction of the largest are treated as zero.
const WHITEN_RCOND: f64 = 1e-10;

/// `(w', b')` such that `f w' + b' = ((f - mean) Z) w + b`, where `Z` is the
/// zero-phase whitening matrix of `features` (rows are samples).
/// Directions with no variance are dropped.
pub fn whitened_projection(features: &[Vec<f64>], w: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = features.len();
    let d = w.rows();
    if n < 2 {
        return Err(ModelError::InvalidBatch("whitening needs at least two feature vectors".into()));
    }
    if features.iter().any(|f| f.len() != d) || b.shape() != (1, w.cols()) {
        return Err(ModelError::Shape(format!("features must have {d} entries to match the projection")));
    }
    let x = nalgebra::DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = x.row_mean();
    let centered = nalgebra::DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let top = eig.eigenvalues.max();
    if !(top > 0.0) {
        return Err(ModelError::InvalidBatch("interaction features have no variance".into()));
    }
    let inv_sqrt = eig
        .eigenvalues
        .map(|l| if l > top * WHITEN_RCOND { 1.0 / l.sqrt() } else { 0.0 });
    let z = &eig.eigenvectors * nalgebra::DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
    let w0 = nalgebra::DMatrix::from_fn(d, w.cols(), |i, j| w.get(i, j));
    let w1 = &z * w0;
    let shift = mean * &w1;
    let new_w = Tensor::from_vec(d, w.cols(), (0..d).flat_map(|i| (0..w.cols()).map(move |j| (i, j))).map(|(i, j)| w1[(i, j)]).collect());
    let new_b = Tensor::row_vector((0..w.cols()).map(|j| b.get(0, j) - shift[j]).collect());
    Ok((new_w, new_b))
}

/// Adam with decoupled weight decay, over one parameter set.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(set: &ParamSet, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = set.iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Parameters without a gradient are left untouched, decay included.
    pub fn step(&mut self, set: &mut ParamSet, grads: &[Option<Tensor>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (_, p)) in set.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *w -= self.lr * (update + self.weight_decay * *w);
            }
        }
    }
}

/// One annotated training image.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub image: RgbImage,
    pub gt: GroundTruthImage,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub history: Vec<MetricRecord>,
    /// Loss of every optimizer step, in order.
    pub batch_losses: Vec<f64>,
}

/// A labeled pair ready for either stage.
#[derive(Debug, Clone)]
pub struct Example {
    pub image_index: usize,
    pub fmap: Arc<FeatureMap>,
    pub features: PairFeatures,
    pub interactive: bool,
    pub candidates: Vec<InteractionId>,
    pub labels: Vec<bool>,
}

/// Returns an augmented copy of the image and its annotations.
fn augment(sample: &TrainingSample, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> (RgbImage, GroundTruthImage) {
    let mut image = sample.image.clone();
    let mut gt = sample.gt.clone();
    if cfg.flip && rng.random_bool(0.5) {
        let w = image.width() as f64;
        image = image::imageops::flip_horizontal(&image);
        for t in &mut gt.triplets {
            t.human = t.human.flip_horizontal(w);
            t.object = t.object.flip_horizontal(w);
        }
        for d in &mut gt.detections {
            d.bbox = d.bbox.flip_horizontal(w);
        }
    }
    if cfg.color_jitter > 0.0 {
        let gains: Vec<f64> = (0..3).map(|_| 1.0 + cfg.color_jitter * rng.random_range(-1.0..=1.0)).collect();
        for p in image.pixels_mut() {
            for (c, g) in gains.iter().enumerate() {
                p.0[c] = (p.0[c] as f64 * g).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    (image, gt)
}

fn jitter_box(b: &BBox, amount: f64, w: f64, h: f64, rng: &mut ChaCha8Rng) -> BBox {
    let mut c = b.corners();
    for v in &mut c {
        *v += amount * rng.random_range(-1.0..=1.0);
    }
    let (x1, y1) = (c[0].clamp(0.0, w), c[1].clamp(0.0, h));
    let (x2, y2) = (c[2].clamp(0.0, w), c[3].clamp(0.0, h));
    BBox::from_corners(x1, y1, x2, y2).unwrap_or(*b)
}

/// Builds labeled pairs from ground truth, using annotated boxes as
/// detections. Ground truth for unseen interactions is dropped.
pub fn build_examples(
    ckpt: &Checkpoint,
    encoder: &dyn VisualEncoder,
    data: &[TrainingSample],
    split: &SplitSpec,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Example>> {
    let tax = &ckpt.taxonomy;
    let mut out = Vec::new();
    for (index, sample) in data.iter().enumerate() {
        let (image, gt) = augment(sample, cfg, rng);
        let (w, h) = (image.width() as f64, image.height() as f64);
        let mut dets = gt.instances(tax.human());
        if cfg.box_jitter > 0.0 {
            for d in &mut dets {
                d.bbox = jitter_box(&d.bbox, cfg.box_jitter, w, h, rng);
            }
        }
        let seen: Vec<GroundTruthTriplet> = gt
            .triplets
            .into_iter()
            .filter(|t| tax.lookup(t.verb_id, t.object_id).is_some_and(|id| !split.is_unseen(id)))
            .collect();
        let fmap = Arc::new(encoder.encode(&image)?);
        let mut pairs = associate_pairs(&dets, tax, Some(split));
        label_pairs(&mut pairs, &seen, tax, cfg.iou_threshold)?;
        for pair in pairs {
            let features = pair_features(&ckpt.config, &fmap, &pair.human.bbox, &pair.object.bbox)?;
            out.push(Example {
                image_index: index,
                fmap: Arc::clone(&fmap),
                features,
                interactive: pair.interactiveness_label.unwrap_or(false),
                labels: pair.interaction_labels.unwrap_or_default(),
                candidates: pair.candidates,
            });
        }
    }
    Ok(out)
}

struct PairGrad {
    loss: f64,
    correct: Option<bool>,
    grads: Vec<Option<Tensor>>,
    extra: Vec<Option<Tensor>>,
}

fn add_grads(acc: &mut Vec<Option<Tensor>>, g: Vec<Option<Tensor>>) {
    if acc.is_empty() {
        *acc = g;
        return;
    }
    for (a, b) in acc.iter_mut().zip(g) {
        match (a.as_mut(), b) {
            (Some(a), Some(b)) => a.add_assign(&b),
            (None, Some(b)) => *a = Some(b),
            _ => {}
        }
    }
}

fn scale_grads(g: &mut [Option<Tensor>], s: f64) {
    for t in g.iter_mut().flatten() {
        t.scale_assign(s);
    }
}

/// Per-pair work, either sequential or on a fixed-size pool. Results come
/// back in input order, so reductions are independent of thread count.
fn map_pairs<T: Send>(pool: &Option<rayon::ThreadPool>, n: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    match pool {
        Some(p) => p.install(|| (0..n).into_par_iter().map(&f).collect()),
        None => (0..n).map(f).collect(),
    }
}

fn make_pool(jobs: usize) -> Result<Option<rayon::ThreadPool>> {
    if jobs <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map(Some)
        .map_err(|e| ModelError::Config(format!("cannot start {jobs} workers: {e}")))
}

fn stage1_pair(ckpt: &Checkpoint, ex: &Example, cfg: &TrainConfig) -> Result<PairGrad> {
    let g = Graph::new();
    let p = ckpt.sap.bind(&g, |_| true);
    let out = sap::sap_forward(&g, &ckpt.config.sap, &p, &ex.features.sap_inputs(&ex.fmap))?;
    let s = sap::interactiveness(&g, &p, out.f_inter);
    let y = ex.interactive as u8 as f64;
    let l = g.mean(g.focal_bce(s, &[y], cfg.alpha, cfg.gamma));
    let score = g.value(s).item();
    let loss = g.value(l).item();
    let mut grads = g.backward(l);
    Ok(PairGrad {
        loss,
        correct: Some((score >= 0.5) == ex.interactive),
        grads: p.gradients(&mut grads),
        extra: Vec::new(),
    })
}

pub fn train_stage1(ckpt: &mut Checkpoint, data: &[TrainingSample], split: &SplitSpec, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.stage != 1 {
        return Err(ModelError::Config(format!("stage-1 training called with stage {}", cfg.stage)));
    }
    let encoder = ckpt.encoder_model()?;
    let pool = make_pool(cfg.jobs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&ckpt.sap, cfg.learning_rate, cfg.weight_decay);
    let mut report = TrainReport::default();
    let mut cached: Option<Vec<Example>> = None;
    for epoch in 0..cfg.epochs {
        let examples = match &cached {
            Some(e) => e.clone(),
            None => {
                let e = build_examples(ckpt, &encoder, data, split, cfg, &mut rng)?;
                if !cfg.augments() {
                    cached = Some(e.clone());
                }
                e
            }
        };
        if examples.is_empty() {
            return Err(ModelError::InvalidBatch("training data yields no pairs".into()));
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let snapshot = &*ckpt;
            let results = map_pairs(&pool, batch.len(), |i| stage1_pair(snapshot, &examples[batch[i]], cfg))?;
            let mut acc = Vec::new();
            let mut batch_loss = 0.0;
            for r in results {
                batch_loss += r.loss;
                correct += (r.correct == Some(true)) as usize;
                add_grads(&mut acc, r.grads);
            }
            let n = batch.len() as f64;
            scale_grads(&mut acc, 1.0 / n);
            opt.step(&mut ckpt.sap, &acc);
            report.batch_losses.push(batch_loss / n);
            loss_sum += batch_loss;
        }
        let rec = MetricRecord {
            stage: 1,
            epoch,
            loss: loss_sum / examples.len() as f64,
            accuracy: Some(correct as f64 / examples.len() as f64),
        };
        info!("stage 1 epoch {epoch}: loss {:.5} accuracy {:.4}", rec.loss, rec.accuracy.unwrap());
        report.history.push(rec);
    }
    finish(ckpt, 1, cfg, &report);
    Ok(report)
}

fn finish(ckpt: &mut Checkpoint, stage: u8, cfg: &TrainConfig, report: &TrainReport) {
    ckpt.round_to_f32();
    ckpt.metrics.extend(report.history.iter().cloned());
    if !ckpt.trained_stages.contains(&stage) {
        ckpt.trained_stages.push(stage);
    }
    ckpt.train_config = serde_json::to_value(cfg).ok();
}

/// Graph items for `prompt`, with the interaction slot replaced by `inter`.
pub fn prompt_graph_items(g: &Graph, prompt: &Prompt, inter: Var) -> Vec<GraphItem> {
    let mut items = crate::lm::graph_items(g, &prompt.items[..prompt.inter_position]);
    items.push(GraphItem::Embedding(inter));
    items.extend(crate::lm::graph_items(g, &prompt.items[prompt.inter_position + 1..]));
    items
}

/// Matching scores on a graph, `M x 1`, clamped with a straight-through
/// gradient.
pub fn matching_scores_graph(
    g: &Graph,
    ckpt: &Checkpoint,
    base: &Bound<'_>,
    lowrank: &Bound<'_>,
    ex_fmap: &FeatureMap,
    f_inter: &[f64],
    phrases: &[String],
) -> Result<Var> {
    let inter = sap::project_to_lm(g, lowrank, g.constant(Tensor::row_vector(f_inter.to_vec())));
    let image = image_items(&ckpt.config, ex_fmap)?;
    let placeholder = [PromptItem::Embedding(vec![0.0; ckpt.config.lm.dim])];
    let prompt = build_matching_prompt(&ckpt.tokenizer, &image, &placeholder, phrases)?;
    let items = prompt_graph_items(g, &prompt, inter);
    let h = toy_forward(g, &ckpt.config.lm, base, lowrank, &items)?;
    let hoi = g.gather_rows(h, &prompt.hoi_positions);
    let fi = g.gather_rows(h, &[prompt.inter_position]);
    let cos = g.cosine_rows(hoi, fi);
    Ok(g.clamp(cos, 0.0, 1.0))
}

fn stage2_pair(ckpt: &Checkpoint, ex: &Example, f_inter: &[f64], cfg: &TrainConfig) -> Result<PairGrad> {
    let g = Graph::new();
    let base = ckpt.lm_base.bind(&g, |n| cfg.regime.base_trainable(n));
    let lowrank = ckpt
        .lm_lowrank
        .bind(&g, |n| !(cfg.freeze_projection && n.starts_with("proj.")));
    let names = phrases(&ckpt.taxonomy, &ex.candidates)?;
    let s = matching_scores_graph(&g, ckpt, &base, &lowrank, &ex.fmap, f_inter, &names)?;
    let y: Vec<f64> = ex.labels.iter().map(|&b| b as u8 as f64).collect();
    let l = g.mean(g.focal_bce(s, &y, cfg.alpha, cfg.gamma));
    let scores = g.value(s).data().to_vec();
    let loss = g.value(l).item();
    let correct = ex
        .interactive
        .then(|| ex.labels[crate::lm::argmax(&scores)]);
    let mut grads = g.backward(l);
    Ok(PairGrad {
        loss,
        correct,
        grads: lowrank.gradients(&mut grads),
        extra: base.gradients(&mut grads),
    })
}

pub fn train_stage2(ckpt: &mut Checkpoint, data: &[TrainingSample], split: &SplitSpec, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.stage != 2 {
        return Err(ModelError::Config(format!("stage-2 training called with stage {}", cfg.stage)));
    }
    if !ckpt.trained_stages.contains(&1) {
        return Err(ModelError::Dependency("stage 2 needs a stage-1 checkpoint".into()));
    }
    let encoder = ckpt.encoder_model()?;
    let pool = make_pool(cfg.jobs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&ckpt.lm_lowrank, cfg.learning_rate, cfg.weight_decay);
    let mut base_opt = AdamW::new(&ckpt.lm_base, cfg.learning_rate, cfg.weight_decay);
    let mut report = TrainReport::default();
    let mut cached: Option<(Vec<Example>, Vec<Vec<f64>>)> = None;
    for epoch in 0..cfg.epochs {
        let (examples, inter) = match &cached {
            Some(c) => c.clone(),
            None => {
                let all = build_examples(ckpt, &encoder, data, split, cfg, &mut rng)?;
                let usable: Vec<Example> = all.into_iter().filter(|e| !e.candidates.is_empty()).collect();
                let inter = usable
                    .iter()
                    .map(|e| Ok(sap::evaluate(&ckpt.config.sap, &ckpt.sap, &e.features.sap_inputs(&e.fmap))?.f_inter))
                    .collect::<Result<Vec<_>>>()?;
                if !cfg.augments() {
                    cached = Some((usable.clone(), inter.clone()));
                }
                (usable, inter)
            }
        };
        if epoch == 0 && cfg.whiten_projection && inter.len() >= 2 {
            let (w, b) = whitened_projection(&inter, ckpt.lm_lowrank.tensor(sap::PROJ_W), ckpt.lm_lowrank.tensor(sap::PROJ_B))?;
            *ckpt.lm_lowrank.get_mut(sap::PROJ_W).expect("projection present") = w;
            *ckpt.lm_lowrank.get_mut(sap::PROJ_B).expect("projection present") = b;
            ckpt.lm_lowrank.round_to_f32();
        }
        let positives: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].interactive).collect();
        let mut negatives: Vec<usize> = (0..examples.len()).filter(|&i| !examples[i].interactive).collect();
        negatives.shuffle(&mut rng);
        negatives.truncate((positives.len() as f64 * cfg.negative_ratio).round() as usize);
        let mut order: Vec<usize> = positives.iter().chain(&negatives).copied().collect();
        if order.is_empty() {
            return Err(ModelError::InvalidBatch("training data yields no pairs with candidates".into()));
        }
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut judged) = (0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let snapshot = &*ckpt;
            let results = map_pairs(&pool, batch.len(), |i| {
                let k = batch[i];
                stage2_pair(snapshot, &examples[k], &inter[k], cfg)
            })?;
            let (mut acc, mut acc_base) = (Vec::new(), Vec::new());
            let mut batch_loss = 0.0;
            for r in results {
                batch_loss += r.loss;
                if let Some(c) = r.correct {
                    judged += 1;
                    correct += c as usize;
                }
                add_grads(&mut acc, r.grads);
                add_grads(&mut acc_base, r.extra);
            }
            let n = batch.len() as f64;
            scale_grads(&mut acc, 1.0 / n);
            scale_grads(&mut acc_base, 1.0 / n);
            opt.step(&mut ckpt.lm_lowrank, &acc);
            if acc_base.iter().any(Option::is_some) {
                base_opt.step(&mut ckpt.lm_base, &acc_base);
            }
            report.batch_losses.push(batch_loss / n);
            loss_sum += batch_loss;
            debug!("stage 2 batch loss {:.5}", batch_loss / n);
        }
        let rec = MetricRecord {
            stage: 2,
            epoch,
            loss: loss_sum / order.len() as f64,
            accuracy: (judged > 0).then(|| correct as f64 / judged as f64),
        };
        info!(
            "stage 2 epoch {epoch}: loss {:.5} top-1 {:.4}",
            rec.loss,
            rec.accuracy.unwrap_or(f64::NAN)
        );
        report.history.push(rec);
    }
    finish(ckpt, 2, cfg, &report);
    Ok(report)
}

/// Fraction of pairs whose thresholded interactiveness agrees with the label.
pub fn interactiveness_accuracy(ckpt: &Checkpoint, data: &[TrainingSample], split: &SplitSpec) -> Result<f64> {
    let encoder = ckpt.encoder_model()?;
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let examples = build_examples(ckpt, &encoder, data, split, &cfg, &mut rng)?;
    if examples.is_empty() {
        return Err(ModelError::InvalidBatch("no pairs to evaluate".into()));
    }
    let mut correct = 0;
    for ex in &examples {
        let s = sap::evaluate(&ckpt.config.sap, &ckpt.sap, &ex.features.sap_inputs(&ex.fmap))?;
        correct += ((s.interactiveness >= 0.5) == ex.interactive) as usize;
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Top-1 accuracy of matching scores over interacting pairs: the best
/// candidate must be one of the annotated interactions.
pub fn interaction_accuracy(ckpt: &Checkpoint, data: &[TrainingSample], split: &SplitSpec) -> Result<f64> {
    let encoder = ckpt.encoder_model()?;
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let examples = build_examples(ckpt, &encoder, data, split, &cfg, &mut rng)?;
    let positives: Vec<&Example> = examples
        .iter()
        .filter(|e| e.interactive && !e.candidates.is_empty())
        .collect();
    if positives.is_empty() {
        return Err(ModelError::InvalidBatch("no interacting pairs to evaluate".into()));
    }
    let mut correct = 0;
    for ex in &positives {
        let f = sap::evaluate(&ckpt.config.sap, &ckpt.sap, &ex.features.sap_inputs(&ex.fmap))?.f_inter;
        let g = Graph::new();
        let base = ckpt.lm_base.bind(&g, |_| false);
        let lowrank = ckpt.lm_lowrank.bind(&g, |_| false);
        let names = phrases(&ckpt.taxonomy, &ex.candidates)?;
        let s = matching_scores_graph(&g, ckpt, &base, &lowrank, &ex.fmap, &f, &names)?;
        let scores = g.value(s).data().to_vec();
        correct += ex.labels[crate::lm::argmax(&scores)] as usize;
    }
    Ok(correct as f64 / positives.len() as f64)
}

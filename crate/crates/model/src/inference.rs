//! Detections in, scored triplets out.
//!
//! associate -> SAP + interactiveness -> filter (λ) -> score -> fuse ->
//! threshold -> sort. Scoring is pluggable through [`InteractionScorer`] so
//! the same pipeline runs a trained model or a ground-truth oracle.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hoi_core::io::{write_atomic, GroundTruthImage};
use hoi_core::pairing::{associate_pairs, label_pairs, DEFAULT_IOU_THRESHOLD};
use hoi_core::{Detection, HOPair, Taxonomy, TripletPrediction};
use image::{GrayImage, Luma, RgbImage};
use log::debug;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{FeatureMap, ToyEncoder, VisualEncoder};
use crate::checkpoint::Checkpoint;
use crate::error::{ModelError, Result};
use crate::features::{image_items, pair_features, phrases, PairFeatures};
use crate::lm::{LmBackend, PromptItem, StubBackend};
use crate::sap;
use crate::scorer::{
    build_generation_prompt, build_matching_prompt, deterministic_generation_scores, one_pass_matching_scores,
    GenerationOptions, ScoringOutputStats,
};

pub const DEFAULT_LAMBDA: f64 = 0.15;
pub const DEFAULT_FINAL_THRESHOLD: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringMode {
    Generation,
    #[default]
    Matching,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Toy,
    Stub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub lambda: f64,
    pub final_threshold: f64,
    pub mode: ScoringMode,
    pub backend: BackendKind,
    pub checkpoint_path: Option<PathBuf>,
    pub attention_dir: Option<PathBuf>,
    /// Apply the final threshold to `S_v · S_int` instead of the fully
    /// fused score.
    pub threshold_before_detector_scores: bool,
    /// Skip SAP: interactiveness is 1 and the pooled human/object cells
    /// stand in for the interaction feature.
    pub training_free: bool,
    pub generation: GenerationOptions,
    /// Score the retained pairs of an image concurrently. Output is
    /// identical to the sequential order.
    pub batch_pairs: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            final_threshold: DEFAULT_FINAL_THRESHOLD,
            mode: ScoringMode::Matching,
            backend: BackendKind::Toy,
            checkpoint_path: None,
            attention_dir: None,
            threshold_before_detector_scores: false,
            training_free: false,
            generation: GenerationOptions::default(),
            batch_pairs: false,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(ModelError::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.final_threshold) {
            return Err(ModelError::Config(format!(
                "final threshold {} outside [0, 1]",
                self.final_threshold
            )));
        }
        Ok(())
    }
}

/// Indices of pairs with interactiveness at least `lambda`, in order.
pub fn filter_pairs(scores: &[f64], lambda: f64) -> Vec<usize> {
    (0..scores.len()).filter(|&i| scores[i] >= lambda).collect()
}

pub fn fuse_scores(s_v: f64, s_int: f64, s_h: f64, s_o: f64) -> f64 {
    s_v * s_int * s_h * s_o
}

/// Interactiveness of one pair, plus whatever the scorer wants to carry
/// into candidate scoring.
pub struct Assessment<P> {
    pub interactiveness: f64,
    pub attention: Option<AttentionMap>,
    pub state: P,
}

/// Head-averaged attention over feature-map cells, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub weights: Vec<f64>,
    pub grid: (usize, usize),
    pub stride: usize,
}

/// Pluggable interaction recognizer.
pub trait InteractionScorer: Sync {
    type Image: Sync;
    type Pair: Send + Sync;

    fn taxonomy(&self) -> &Taxonomy;

    fn prepare(&self, image_id: &str, image: &RgbImage) -> Result<Self::Image>;

    fn assess(&self, image: &Self::Image, pair: &HOPair) -> Result<Assessment<Self::Pair>>;

    /// One score per entry of `pair.candidates`.
    fn score(&self, image: &Self::Image, pair: &HOPair, state: &Self::Pair) -> Result<Vec<f64>>;

    /// Backend forward passes so far.
    fn backend_calls(&self) -> usize {
        0
    }
}

/// Content-addressed store of encoder outputs, enabled by `DA_HOI_CACHE`.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub const ENV: &'static str = "DA_HOI_CACHE";

    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn from_env() -> Option<Self> {
        std::env::var_os(Self::ENV).filter(|v| !v.is_empty()).map(Self::new)
    }

    pub fn key(encoder_digest: &[u8], image: &RgbImage) -> String {
        let mut h = Sha256::new();
        h.update(encoder_digest);
        h.update(image.width().to_le_bytes());
        h.update(image.height().to_le_bytes());
        h.update(image.as_raw());
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.fmap"))
    }

    pub fn load(&self, key: &str) -> Option<FeatureMap> {
        let bytes = fs::read(self.path(key)).ok()?;
        decode_fmap(&bytes)
    }

    pub fn store(&self, key: &str, fmap: &FeatureMap) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| ModelError::io(&self.dir, e))?;
        Ok(write_atomic(&self.path(key), &encode_fmap(fmap))?)
    }

    pub fn get_or_encode(&self, encoder: &dyn VisualEncoder, digest: &[u8], image: &RgbImage) -> Result<FeatureMap> {
        let key = Self::key(digest, image);
        if let Some(f) = self.load(&key) {
            return Ok(f);
        }
        let f = encoder.encode(image)?;
        self.store(&key, &f)?;
        Ok(f)
    }
}

fn encode_fmap(f: &FeatureMap) -> Vec<u8> {
    let (gh, gw) = f.grid();
    let (w, h) = f.image_size();
    let mut out = Vec::new();
    for v in [gh as u64, gw as u64, f.stride() as u64, w as u64, h as u64, f.dim() as u64] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for x in f.cells().data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn decode_fmap(bytes: &[u8]) -> Option<FeatureMap> {
    let header: Vec<usize> = bytes
        .get(..48)?
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let (gh, gw, stride, w, h, d) = (header[0], header[1], header[2], header[3], header[4], header[5]);
    let body = &bytes[48..];
    if body.len() != gh * gw * d * 8 {
        return None;
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let cells = hoi_autograd::Tensor::from_vec(gh * gw, d, data);
    FeatureMap::new(gh, gw, stride, w as u32, h as u32, cells).ok()
}

/// The trained model behind the pipeline.
pub struct ModelScorer<'a> {
    ckpt: &'a Checkpoint,
    encoder: ToyEncoder,
    encoder_digest: Vec<u8>,
    backend: Box<dyn LmBackend>,
    config: InferenceConfig,
    cache: Option<FeatureCache>,
}

pub struct ModelImage {
    fmap: FeatureMap,
    items: Vec<PromptItem>,
}

pub struct ModelPair {
    features: PairFeatures,
    f_inter: Vec<f64>,
}

impl<'a> ModelScorer<'a> {
    /// Fails when `taxonomy` is not the checkpoint's.
    pub fn new(ckpt: &'a Checkpoint, taxonomy: &Taxonomy, config: &InferenceConfig) -> Result<Self> {
        config.validate()?;
        ckpt.check_taxonomy(taxonomy)?;
        let backend: Box<dyn LmBackend> = match config.backend {
            BackendKind::Toy => Box::new(ckpt.language_model()?),
            BackendKind::Stub => Box::new(StubBackend::new(ckpt.tokenizer.clone(), ckpt.config.lm.dim)),
        };
        Self::with_backend(ckpt, backend, config)
    }

    /// Same, with a caller-supplied language model.
    pub fn with_backend(ckpt: &'a Checkpoint, backend: Box<dyn LmBackend>, config: &InferenceConfig) -> Result<Self> {
        let encoder = ckpt.encoder_model()?;
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&ckpt.config.encoder).unwrap_or_default());
        h.update(ckpt.encoder.to_le_f32());
        Ok(Self {
            ckpt,
            encoder,
            encoder_digest: h.finalize().to_vec(),
            backend,
            config: config.clone(),
            cache: FeatureCache::from_env(),
        })
    }

    pub fn with_cache(mut self, cache: Option<FeatureCache>) -> Self {
        self.cache = cache;
        self
    }

    pub fn backend(&self) -> &dyn LmBackend {
        self.backend.as_ref()
    }

    fn inter_items(&self, state: &ModelPair) -> Vec<PromptItem> {
        if self.config.training_free {
            state.features.roi_items()
        } else {
            vec![PromptItem::Embedding(sap::evaluate_projection(
                &self.ckpt.lm_lowrank,
                &state.f_inter,
            ))]
        }
    }
}

impl InteractionScorer for ModelScorer<'_> {
    type Image = ModelImage;
    type Pair = ModelPair;

    fn taxonomy(&self) -> &Taxonomy {
        &self.ckpt.taxonomy
    }

    fn prepare(&self, _image_id: &str, image: &RgbImage) -> Result<ModelImage> {
        let fmap = match &self.cache {
            Some(c) => c.get_or_encode(&self.encoder, &self.encoder_digest, image)?,
            None => self.encoder.encode(image)?,
        };
        let items = image_items(&self.ckpt.config, &fmap)?;
        Ok(ModelImage { fmap, items })
    }

    fn assess(&self, image: &ModelImage, pair: &HOPair) -> Result<Assessment<ModelPair>> {
        let features = pair_features(&self.ckpt.config, &image.fmap, &pair.human.bbox, &pair.object.bbox)?;
        if self.config.training_free {
            return Ok(Assessment {
                interactiveness: 1.0,
                attention: None,
                state: ModelPair {
                    features,
                    f_inter: Vec::new(),
                },
            });
        }
        let out = sap::evaluate(&self.ckpt.config.sap, &self.ckpt.sap, &features.sap_inputs(&image.fmap))?;
        let attention = (!out.attention.is_empty()).then(|| AttentionMap {
            weights: out.attention,
            grid: image.fmap.grid(),
            stride: image.fmap.stride(),
        });
        Ok(Assessment {
            interactiveness: out.interactiveness,
            attention,
            state: ModelPair {
                features,
                f_inter: out.f_inter,
            },
        })
    }

    fn score(&self, image: &ModelImage, pair: &HOPair, state: &ModelPair) -> Result<Vec<f64>> {
        let names = phrases(&self.ckpt.taxonomy, &pair.candidates)?;
        let inter = self.inter_items(state);
        let tok = &self.ckpt.tokenizer;
        match self.config.mode {
            ScoringMode::Matching => {
                let prompt = build_matching_prompt(tok, &image.items, &inter, &names)?;
                one_pass_matching_scores(self.backend.as_ref(), &prompt)
            }
            ScoringMode::Generation => {
                let prompt = build_generation_prompt(tok, &image.items, &inter, &names)?;
                deterministic_generation_scores(self.backend.as_ref(), &prompt, &names, self.config.generation)
            }
        }
    }

    fn backend_calls(&self) -> usize {
        self.backend.calls()
    }
}

/// Perfect recognizer: interacting pairs and their annotated verbs score 1,
/// everything else 0.
pub struct GroundTruthOracle<'a> {
    taxonomy: &'a Taxonomy,
    gt: HashMap<&'a str, &'a GroundTruthImage>,
    iou_threshold: f64,
}

impl<'a> GroundTruthOracle<'a> {
    pub fn new(taxonomy: &'a Taxonomy, gt: &'a [GroundTruthImage]) -> Self {
        Self {
            taxonomy,
            gt: gt.iter().map(|g| (g.id.as_str(), g)).collect(),
            iou_threshold: DEFAULT_IOU_THRESHOLD,
        }
    }
}

impl<'a> InteractionScorer for GroundTruthOracle<'a> {
    type Image = &'a GroundTruthImage;
    type Pair = Vec<bool>;

    fn taxonomy(&self) -> &Taxonomy {
        self.taxonomy
    }

    fn prepare(&self, image_id: &str, _image: &RgbImage) -> Result<Self::Image> {
        self.gt
            .get(image_id)
            .copied()
            .ok_or_else(|| ModelError::InvalidInput(format!("no ground truth for image {image_id}")))
    }

    fn assess(&self, gt: &Self::Image, pair: &HOPair) -> Result<Assessment<Vec<bool>>> {
        let mut p = vec![pair.clone()];
        label_pairs(&mut p, &gt.triplets, self.taxonomy, self.iou_threshold)?;
        let labels = p[0].interaction_labels.take().unwrap_or_default();
        Ok(Assessment {
            interactiveness: if p[0].interactiveness_label == Some(true) { 1.0 } else { 0.0 },
            attention: None,
            state: labels,
        })
    }

    fn score(&self, _gt: &Self::Image, _pair: &HOPair, state: &Vec<bool>) -> Result<Vec<f64>> {
        Ok(state.iter().map(|&b| b as u8 as f64).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct PhaseTimings {
    pub pairing_ms: f64,
    pub sap_ms: f64,
    pub scoring_ms: f64,
}

impl PhaseTimings {
    pub fn total_ms(&self) -> f64 {
        self.pairing_ms + self.sap_ms + self.scoring_ms
    }
}

/// Everything one image produced.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageOutcome {
    pub predictions: Vec<TripletPrediction>,
    pub pairs: usize,
    pub retained: usize,
    pub backend_calls: usize,
    pub stats: ScoringOutputStats,
    pub timings: PhaseTimings,
    pub attention_files: Vec<PathBuf>,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Full pipeline on one image.
pub fn run_image<S: InteractionScorer>(
    scorer: &S,
    image_id: &str,
    image: &RgbImage,
    detections: &[Detection],
    config: &InferenceConfig,
) -> Result<ImageOutcome> {
    config.validate()?;
    let tax = scorer.taxonomy();
    let mut out = ImageOutcome::default();

    let t = Instant::now();
    // Zero-shot inference scores every candidate, seen or not.
    let pairs: Vec<HOPair> = associate_pairs(detections, tax, None)
        .into_iter()
        .filter(|p| !p.candidates.is_empty())
        .collect();
    out.pairs = pairs.len();
    out.timings.pairing_ms = ms(t);
    if pairs.is_empty() {
        return Ok(out);
    }

    let t = Instant::now();
    let prepared = scorer.prepare(image_id, image)?;
    let assessed = pairs
        .iter()
        .map(|p| scorer.assess(&prepared, p))
        .collect::<Result<Vec<_>>>()?;
    out.timings.sap_ms = ms(t);

    if let Some(dir) = &config.attention_dir {
        for (i, a) in assessed.iter().enumerate() {
            if let Some(att) = &a.attention {
                out.attention_files
                    .push(dump_attention(att, image.dimensions(), image_id, i, dir)?);
            }
        }
    }

    let scores: Vec<f64> = assessed.iter().map(|a| a.interactiveness).collect();
    let keep = filter_pairs(&scores, config.lambda);
    out.retained = keep.len();

    let t = Instant::now();
    let calls_before = scorer.backend_calls();
    let score_one = |&i: &usize| scorer.score(&prepared, &pairs[i], &assessed[i].state);
    let scored: Vec<Vec<f64>> = if config.batch_pairs {
        use rayon::prelude::*;
        keep.par_iter().map(score_one).collect::<Result<_>>()?
    } else {
        keep.iter().map(score_one).collect::<Result<_>>()?
    };
    out.backend_calls = scorer.backend_calls() - calls_before;
    out.timings.scoring_ms = ms(t);

    for (&i, s_v) in keep.iter().zip(&scored) {
        let pair = &pairs[i];
        if s_v.len() != pair.candidates.len() {
            return Err(ModelError::Shape(format!(
                "{} scores for {} candidates",
                s_v.len(),
                pair.candidates.len()
            )));
        }
        out.stats.record(pair.candidates.len(), s_v);
        for (k, &id) in pair.candidates.iter().enumerate() {
            let s_int = scores[i];
            let partial = s_v[k] * s_int;
            let fused = fuse_scores(s_v[k], s_int, pair.human.score, pair.object.score);
            let gate = if config.threshold_before_detector_scores { partial } else { fused };
            if gate < config.final_threshold {
                continue;
            }
            let inter = tax.interaction(id)?;
            out.predictions.push(TripletPrediction {
                human: pair.human.bbox,
                object: pair.object.bbox,
                object_id: inter.object,
                verb_id: inter.verb,
                score: fused,
            });
        }
    }
    // Stable: ties keep (pair, candidate) order.
    out.predictions.sort_by(|a, b| b.score.total_cmp(&a.score));
    debug!(
        "{image_id}: {} pairs, {} retained, {} predictions",
        out.pairs,
        out.retained,
        out.predictions.len()
    );
    Ok(out)
}

pub fn detect_hoi<S: InteractionScorer>(
    scorer: &S,
    image_id: &str,
    image: &RgbImage,
    detections: &[Detection],
    config: &InferenceConfig,
) -> Result<Vec<TripletPrediction>> {
    Ok(run_image(scorer, image_id, image, detections, config)?.predictions)
}

/// Grayscale rendering of an attention map at image resolution, brightest
/// cell at 255.
pub fn render_attention(map: &AttentionMap, size: (u32, u32)) -> Result<GrayImage> {
    let (attention, stride) = (&map.weights, map.stride.max(1));
    let (gh, gw) = map.grid;
    if attention.len() != gh * gw {
        return Err(ModelError::Shape(format!(
            "{} attention weights for a {gh}x{gw} grid",
            attention.len()
        )));
    }
    let max = attention.iter().cloned().fold(0.0, f64::max);
    let level = |a: f64| if max > 0.0 { (255.0 * a / max).round().clamp(0.0, 255.0) as u8 } else { 0 };
    Ok(GrayImage::from_fn(size.0, size.1, |x, y| {
        let r = (y as usize / stride).min(gh - 1);
        let c = (x as usize / stride).min(gw - 1);
        Luma([level(attention[r * gw + c])])
    }))
}

/// Writes `{image_id}_{pair_index}.png` under `dir`.
pub fn dump_attention(map: &AttentionMap, size: (u32, u32), image_id: &str, pair_index: usize, dir: &Path) -> Result<PathBuf> {
    let img = render_attention(map, size)?;
    fs::create_dir_all(dir).map_err(|e| ModelError::io(dir, e))?;
    let path = dir.join(format!("{image_id}_{pair_index}.png"));
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| ModelError::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
    write_atomic(&path, &bytes)?;
    Ok(path)
}

/// One image of a latency sample.
pub struct LatencyInput<'a> {
    pub id: &'a str,
    pub image: &'a RgbImage,
    pub detections: &'a [Detection],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub images: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub mean_phases: PhaseTimings,
    pub retained_pairs: usize,
    pub backend_calls: usize,
}

/// Wall-clock per image, after one untimed warm-up pass over the first image.
pub fn benchmark_latency<S: InteractionScorer>(
    scorer: &S,
    sample: &[LatencyInput<'_>],
    config: &InferenceConfig,
) -> Result<LatencyReport> {
    let first = sample
        .first()
        .ok_or_else(|| ModelError::InvalidInput("latency sample is empty".into()))?;
    run_image(scorer, first.id, first.image, first.detections, config)?;
    let mut totals = Vec::new();
    let mut phases = PhaseTimings::default();
    let (mut retained, mut calls) = (0, 0);
    for s in sample {
        let t = Instant::now();
        let o = run_image(scorer, s.id, s.image, s.detections, config)?;
        totals.push(ms(t));
        phases.pairing_ms += o.timings.pairing_ms;
        phases.sap_ms += o.timings.sap_ms;
        phases.scoring_ms += o.timings.scoring_ms;
        retained += o.retained;
        calls += o.backend_calls;
    }
    let n = sample.len() as f64;
    let mean_ms = totals.iter().sum::<f64>() / n;
    totals.sort_by(f64::total_cmp);
    let mid = totals.len() / 2;
    let median_ms = if totals.len() % 2 == 1 {
        totals[mid]
    } else {
        (totals[mid - 1] + totals[mid]) / 2.0
    };
    Ok(LatencyReport {
        images: sample.len(),
        mean_ms,
        median_ms,
        mean_phases: PhaseTimings {
            pairing_ms: phases.pairing_ms / n,
            sap_ms: phases.sap_ms / n,
            scoring_ms: phases.scoring_ms / n,
        },
        retained_pairs: retained,
        backend_calls: calls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_examples() {
        let s = [0.2, 0.5, 0.9];
        assert_eq!(filter_pairs(&s, 0.0), vec![0, 1, 2]);
        assert_eq!(filter_pairs(&s, 1.0), Vec::<usize>::new());
        assert_eq!(filter_pairs(&s, 0.5), vec![1, 2]);
    }

    #[test]
    fn fuse_examples() {
        assert_eq!(fuse_scores(0.0, 0.9, 0.7, 0.5), 0.0);
        assert_eq!(fuse_scores(1.0, 1.0, 1.0, 1.0), 1.0);
        assert!((fuse_scores(0.8, 0.9, 0.7, 0.5) - 0.252).abs() < 1e-12);
    }

    #[test]
    fn config_bounds() {
        assert!(InferenceConfig::default().validate().is_ok());
        let bad = InferenceConfig {
            lambda: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let cfg: InferenceConfig =
            serde_json::from_str(r#"{"lambda":0.3,"final_threshold":0.1,"mode":"generation","backend":"stub"}"#)
                .unwrap();
        assert_eq!(cfg.mode, ScoringMode::Generation);
        assert_eq!(cfg.backend, BackendKind::Stub);
        assert!(serde_json::from_str::<InferenceConfig>(r#"{"lamda":0.3}"#).is_err());
    }

    #[test]
    fn attention_rendering() {
        let map = |weights: Vec<f64>| AttentionMap {
            weights,
            grid: (2, 2),
            stride: 8,
        };
        let uniform = render_attention(&map(vec![0.25; 4]), (16, 16)).unwrap();
        assert!(uniform.pixels().all(|p| p.0[0] == 255));
        let single = render_attention(&map(vec![0.0, 1.0, 0.0, 0.0]), (16, 16)).unwrap();
        for (x, y, p) in single.enumerate_pixels() {
            let bright = x >= 8 && y < 8;
            assert_eq!(p.0[0], if bright { 255 } else { 0 });
        }
    }

    #[test]
    fn fmap_codec_round_trip() {
        let cells = hoi_autograd::Tensor::from_vec(2, 3, vec![0.1, -2.0, 3.5, 1e-9, 7.0, -0.0]);
        let f = FeatureMap::new(1, 2, 8, 10, 8, cells).unwrap();
        assert_eq!(decode_fmap(&encode_fmap(&f)).unwrap(), f);
        assert!(decode_fmap(&[0; 10]).is_none());
    }
}

//! mAP under the HOI triplet protocol: a prediction is a true positive when
//! both its human and object boxes reach `IoU >= 0.5` with an unmatched
//! ground-truth triplet of the same interaction.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::io::{GroundTruthImage, GroundTruthTriplet, ImagePredictions, TripletPrediction};
use crate::split::SplitSpec;
use crate::taxonomy::{InteractionId, ObjectId, Taxonomy, VerbId};

pub const DEFAULT_IOU_MIN: f64 = 0.5;
/// Interactions with fewer training instances than this are "rare".
pub const DEFAULT_RARE_THRESHOLD: u64 = 10;

/// Greedy matching within one interaction class.
///
/// `predictions` and `ground_truth` carry an image index; predictions must
/// already be in descending score order. Each prediction takes the unmatched
/// ground truth in its image that maximizes `min(IoU_h, IoU_o)` with both
/// IoUs at least `iou_min`; ties go to the lower ground-truth index.
pub fn match_triplets(
    predictions: &[(usize, TripletPrediction)],
    ground_truth: &[(usize, GroundTruthTriplet)],
    iou_min: f64,
) -> Vec<bool> {
    let mut used = vec![false; ground_truth.len()];
    predictions
        .iter()
        .map(|(img, p)| {
            let mut best: Option<(usize, f64)> = None;
            for (g, (gimg, t)) in ground_truth.iter().enumerate() {
                if used[g] || gimg != img {
                    continue;
                }
                let ih = iou(&p.human, &t.human);
                let io = iou(&p.object, &t.object);
                if ih < iou_min || io < iou_min {
                    continue;
                }
                let overlap = ih.min(io);
                if best.map_or(true, |(_, b)| overlap > b) {
                    best = Some((g, overlap));
                }
            }
            match best {
                Some((g, _)) => {
                    used[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Area under the monotone precision envelope at every recall change.
    #[default]
    AllPoint,
    /// Mean of the envelope sampled at `n` evenly spaced recall levels in
    /// `[0, 1]` (11 for VOC2007-style, 101 for COCO-style).
    Points(usize),
}

/// Average precision of a ranked list of TP/FP flags. `None` when there is
/// no ground truth, in which case the class is excluded from aggregates.
pub fn average_precision(flags: &[bool], num_gt: usize, interpolation: Interpolation) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // Precision envelope, swept from the back.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let ap = match interpolation {
        Interpolation::AllPoint => {
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for (r, p) in recall.iter().zip(&precision) {
                if *r > prev_recall {
                    ap += (r - prev_recall) * p;
                    prev_recall = *r;
                }
            }
            ap
        }
        Interpolation::Points(n) => {
            if n < 2 {
                return None;
            }
            let mut sum = 0.0;
            for k in 0..n {
                let level = k as f64 / (n - 1) as f64;
                let p = recall
                    .iter()
                    .position(|r| *r >= level - 1e-12)
                    .map_or(0.0, |i| precision[i]);
                sum += p;
            }
            sum / n as f64
        }
    };
    Some(ap.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_min: f64,
    pub rare_threshold: u64,
    pub interpolation: Interpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_min: DEFAULT_IOU_MIN,
            rare_threshold: DEFAULT_RARE_THRESHOLD,
            interpolation: Interpolation::AllPoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub interaction_id: InteractionId,
    pub verb_id: VerbId,
    pub object_id: ObjectId,
    pub num_gt: usize,
    pub num_predictions: usize,
    pub rare: bool,
    pub unseen: bool,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub full: Option<f64>,
    pub seen: Option<f64>,
    pub unseen: Option<f64>,
    pub rare: Option<f64>,
    pub non_rare: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: String,
    pub config: EvalConfig,
    pub note: String,
    pub aggregates: Aggregates,
    pub classes: Vec<ClassReport>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn map_report(
    predictions: &[ImagePredictions],
    ground_truth: &[GroundTruthImage],
    taxonomy: &Taxonomy,
    split: &SplitSpec,
    config: &EvalConfig,
) -> Result<EvalReport> {
    split.validate(taxonomy)?;
    let image_index: HashMap<&str, usize> = ground_truth
        .iter()
        .enumerate()
        .map(|(i, g)| (g.id.as_str(), i))
        .collect();

    let mut gt_by_class: BTreeMap<InteractionId, Vec<(usize, GroundTruthTriplet)>> = BTreeMap::new();
    for (i, img) in ground_truth.iter().enumerate() {
        for t in &img.triplets {
            let id = taxonomy.lookup(t.verb_id, t.object_id).ok_or_else(|| {
                Error::Validation(format!(
                    "ground truth in image {:?} uses (verb {}, object {}) outside the taxonomy",
                    img.id, t.verb_id, t.object_id
                ))
            })?;
            gt_by_class.entry(id).or_default().push((i, *t));
        }
    }

    let mut pred_by_class: BTreeMap<InteractionId, Vec<(usize, TripletPrediction)>> = BTreeMap::new();
    let mut bad = BTreeSet::new();
    for img in predictions {
        let Some(&i) = image_index.get(img.id.as_str()) else {
            return Err(Error::Validation(format!(
                "predictions reference image {:?} with no ground truth entry",
                img.id
            )));
        };
        for p in &img.triplets {
            match taxonomy.lookup(p.verb_id, p.object_id) {
                Some(id) => pred_by_class.entry(id).or_default().push((i, *p)),
                None => {
                    bad.insert(format!("{}:(verb {}, object {})", img.id, p.verb_id, p.object_id));
                }
            }
        }
    }
    if !bad.is_empty() {
        return Err(Error::Validation(format!(
            "predictions outside the taxonomy: {}",
            bad.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }

    let mut classes = Vec::with_capacity(taxonomy.interactions().len());
    for inter in taxonomy.interactions() {
        let gt = gt_by_class.get(&inter.id).map(Vec::as_slice).unwrap_or(&[]);
        let mut preds = pred_by_class.remove(&inter.id).unwrap_or_default();
        // Stable: equal scores keep file order.
        preds.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let flags = match_triplets(&preds, gt, config.iou_min);
        classes.push(ClassReport {
            interaction_id: inter.id,
            verb_id: inter.verb,
            object_id: inter.object,
            num_gt: gt.len(),
            num_predictions: preds.len(),
            rare: inter.train_count < config.rare_threshold,
            unseen: split.is_unseen(inter.id),
            ap: average_precision(&flags, gt.len(), config.interpolation),
        });
    }

    let agg = |keep: &dyn Fn(&ClassReport) -> bool| mean(classes.iter().filter(|c| keep(c)).filter_map(|c| c.ap));
    let aggregates = Aggregates {
        full: agg(&|_| true),
        seen: agg(&|c| !c.unseen),
        unseen: agg(&|c| c.unseen),
        rare: agg(&|c| c.rare),
        non_rare: agg(&|c| !c.rare),
    };
    Ok(EvalReport {
        setting: split.setting.to_string(),
        config: *config,
        note: format!(
            "rare means fewer than {} training instances; classes without ground truth are excluded",
            config.rare_threshold
        ),
        aggregates,
        classes,
    })
}

impl EvalReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Validation(format!("csv export: {e}"));
        w.write_record(["interaction_id", "verb_id", "object_id", "num_gt", "num_predictions", "rare", "unseen", "ap"])
            .map_err(csv_err)?;
        for c in &self.classes {
            w.write_record([
                c.interaction_id.to_string(),
                c.verb_id.to_string(),
                c.object_id.to_string(),
                c.num_gt.to_string(),
                c.num_predictions.to_string(),
                c.rare.to_string(),
                c.unseen.to_string(),
                c.ap.map(|a| a.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Validation(format!("csv export: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Result of parsing one free-form answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnswerOutcome {
    FormatError,
    Selected(BTreeSet<usize>),
}

impl AnswerOutcome {
    pub fn is_single(&self) -> bool {
        matches!(self, AnswerOutcome::Selected(s) if s.len() == 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextMetrics {
    pub format_error_rate: f64,
    /// Among well-formed answers; absent when every answer was malformed.
    pub single_output_rate: Option<f64>,
    pub answers: usize,
}

pub fn text_output_metrics(outcomes: &[AnswerOutcome]) -> Result<TextMetrics> {
    if outcomes.is_empty() {
        return Err(Error::Undefined("text metrics over zero answers".into()));
    }
    let errors = outcomes.iter().filter(|o| **o == AnswerOutcome::FormatError).count();
    let valid = outcomes.len() - errors;
    let singles = outcomes.iter().filter(|o| o.is_single()).count();
    Ok(TextMetrics {
        format_error_rate: errors as f64 / outcomes.len() as f64,
        single_output_rate: (valid > 0).then(|| singles as f64 / valid as f64),
        answers: outcomes.len(),
    })
}

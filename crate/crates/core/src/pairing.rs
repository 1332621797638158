//! Exhaustive human-object association, label assignment for both training
//! stages, and zero-shot split construction.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::io::{Detection, GroundTruthTriplet};
use crate::split::{SplitSetting, SplitSpec};
use crate::taxonomy::{InteractionId, ObjectId, Taxonomy, VerbId};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// An ordered human-object candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct HOPair {
    pub human: Detection,
    pub object: Detection,
    /// Indices into the detection list the pair came from.
    pub human_index: usize,
    pub object_index: usize,
    pub candidates: Vec<InteractionId>,
    pub interactiveness_label: Option<bool>,
    pub interaction_labels: Option<Vec<bool>>,
}

/// Pairs every human detection `j` with every other detection `k != j`.
///
/// The object side may itself be a human. Order is `j` ascending then `k`
/// ascending. `split` set means training mode: unseen interactions are left
/// out of candidate lists. Detections whose category is unknown to the
/// taxonomy get an empty candidate list.
pub fn associate_pairs(detections: &[Detection], taxonomy: &Taxonomy, split: Option<&SplitSpec>) -> Vec<HOPair> {
    let human = taxonomy.human();
    let mut pairs = Vec::new();
    for (j, h) in detections.iter().enumerate() {
        if h.category != human {
            continue;
        }
        for (k, o) in detections.iter().enumerate() {
            if j == k {
                continue;
            }
            let candidates = match split {
                None => taxonomy.all_candidates(o.category).to_vec(),
                Some(s) => taxonomy
                    .all_candidates(o.category)
                    .iter()
                    .copied()
                    .filter(|id| !s.is_unseen(*id))
                    .collect(),
            };
            pairs.push(HOPair {
                human: *h,
                object: *o,
                human_index: j,
                object_index: k,
                candidates,
                interactiveness_label: None,
                interaction_labels: None,
            });
        }
    }
    pairs
}

fn matches(pair: &HOPair, gt: &GroundTruthTriplet, threshold: f64) -> bool {
    pair.object.category == gt.object_id
        && iou(&pair.human.bbox, &gt.human) > threshold
        && iou(&pair.object.bbox, &gt.object) > threshold
}

/// Ground-truth triplets whose boxes both overlap the pair above `threshold`
/// and whose object category agrees.
pub fn matched_triplets<'a>(
    pair: &HOPair,
    gt: &'a [GroundTruthTriplet],
    threshold: f64,
) -> Vec<&'a GroundTruthTriplet> {
    gt.iter().filter(|t| matches(pair, t, threshold)).collect()
}

pub fn assign_interactiveness_labels(pairs: &[HOPair], gt: &[GroundTruthTriplet], threshold: f64) -> Vec<bool> {
    pairs
        .iter()
        .map(|p| gt.iter().any(|t| matches(p, t, threshold)))
        .collect()
}

/// Multi-hot labels aligned with the pair's candidate list.
pub fn assign_interaction_labels(
    pair: &HOPair,
    matched: &[&GroundTruthTriplet],
    taxonomy: &Taxonomy,
) -> Result<Vec<bool>> {
    let mut labels = vec![false; pair.candidates.len()];
    for t in matched {
        let position = pair.candidates.iter().position(|id| {
            taxonomy
                .interaction(*id)
                .map(|i| i.verb == t.verb_id && i.object == t.object_id)
                .unwrap_or(false)
        });
        match position {
            Some(k) => labels[k] = true,
            None => {
                return Err(Error::Consistency(format!(
                    "ground-truth verb {} for object {} is not in the pair's candidate list",
                    t.verb_id, t.object_id
                )))
            }
        }
    }
    Ok(labels)
}

/// Convenience: fills both label fields on every pair.
pub fn label_pairs(
    pairs: &mut [HOPair],
    gt: &[GroundTruthTriplet],
    taxonomy: &Taxonomy,
    threshold: f64,
) -> Result<()> {
    for pair in pairs.iter_mut() {
        let matched = matched_triplets(pair, gt, threshold);
        pair.interactiveness_label = Some(!matched.is_empty());
        pair.interaction_labels = Some(assign_interaction_labels(pair, &matched, taxonomy)?);
    }
    Ok(())
}

/// What to hold out when building a split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HoldOut {
    /// Number of interactions (RF-UC / NF-UC).
    Count(usize),
    /// Interaction ids for RF-UC / NF-UC, object ids for UO, verb ids for UV.
    Ids(Vec<u32>),
}

pub fn build_zero_shot_split(taxonomy: &Taxonomy, setting: SplitSetting, hold_out: &HoldOut) -> Result<SplitSpec> {
    let mut split = SplitSpec::full();
    split.setting = setting;
    let interactions = taxonomy.interactions();
    match setting {
        SplitSetting::Full => {
            if hold_out != &HoldOut::Count(0) && hold_out != &HoldOut::Ids(vec![]) {
                return Err(Error::Split("the full setting holds nothing out".into()));
            }
        }
        SplitSetting::RareFirst | SplitSetting::NonRareFirst => match hold_out {
            HoldOut::Count(n) => {
                if *n > interactions.len() {
                    return Err(Error::Range {
                        what: "interactions",
                        requested: *n,
                        available: interactions.len(),
                    });
                }
                let mut order: Vec<_> = interactions.iter().collect();
                if setting == SplitSetting::RareFirst {
                    order.sort_by_key(|i| (i.train_count, i.id));
                } else {
                    order.sort_by_key(|i| (std::cmp::Reverse(i.train_count), i.id));
                }
                split.unseen_interaction_ids = order.iter().take(*n).map(|i| i.id).collect();
            }
            HoldOut::Ids(ids) => {
                for &id in ids {
                    taxonomy.interaction(InteractionId(id))?;
                }
                split.unseen_interaction_ids = ids.iter().map(|&i| InteractionId(i)).collect();
            }
        },
        SplitSetting::UnseenObject => {
            let objects: BTreeSet<ObjectId> = match hold_out {
                HoldOut::Ids(ids) => ids.iter().map(|&i| ObjectId(i)).collect(),
                HoldOut::Count(_) => {
                    return Err(Error::Split("UO needs explicit object ids".into()));
                }
            };
            for o in &objects {
                taxonomy.object(*o)?;
            }
            split.unseen_interaction_ids = interactions
                .iter()
                .filter(|i| objects.contains(&i.object))
                .map(|i| i.id)
                .collect();
            split.unseen_object_ids = objects;
        }
        SplitSetting::UnseenVerb => {
            let verbs: BTreeSet<VerbId> = match hold_out {
                HoldOut::Ids(ids) => ids.iter().map(|&i| VerbId(i)).collect(),
                HoldOut::Count(_) => {
                    return Err(Error::Split("UV needs explicit verb ids".into()));
                }
            };
            for v in &verbs {
                taxonomy.verb(*v)?;
            }
            split.unseen_interaction_ids = interactions
                .iter()
                .filter(|i| verbs.contains(&i.verb))
                .map(|i| i.id)
                .collect();
            split.unseen_verb_ids = verbs;
        }
    }
    split.validate(taxonomy)?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::taxonomy::tests::sample;
    use crate::taxonomy::{InteractionEntry, ObjectClass, TaxonomyFile, Verb};
    use proptest::prelude::*;

    fn det(cat: u32, x: f64) -> Detection {
        Detection {
            bbox: BBox::from_center(x, 10.0, 4.0, 4.0).unwrap(),
            category: ObjectId(cat),
            score: 0.9,
        }
    }

    /// Enumerates the set-builder definition directly.
    fn brute_force_pairs(dets: &[Detection], human: ObjectId) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for j in 0..dets.len() {
            for k in 0..dets.len() {
                if j != k && dets[j].category == human {
                    out.push((j, k));
                }
            }
        }
        out
    }

    #[test]
    fn pairs_two_humans_two_objects() {
        let t = sample();
        let dets = [det(0, 0.0), det(0, 10.0), det(4, 20.0), det(1, 30.0)];
        let pairs = associate_pairs(&dets, &t, None);
        let idx: Vec<_> = pairs.iter().map(|p| (p.human_index, p.object_index)).collect();
        assert_eq!(idx, vec![(0, 1), (0, 2), (0, 3), (1, 0), (1, 2), (1, 3)]);
        assert_eq!(idx, brute_force_pairs(&dets, t.human()));
        assert_eq!(pairs[2].candidates.len(), 3);
        assert!(pairs[1].candidates.is_empty());
    }

    #[test]
    fn pairs_without_humans() {
        let t = sample();
        assert!(associate_pairs(&[det(1, 0.0), det(2, 5.0)], &t, None).is_empty());
        assert!(associate_pairs(&[], &t, None).is_empty());
        assert_eq!(associate_pairs(&[det(0, 0.0), det(4, 1.0), det(1, 2.0)], &t, None).len(), 2);
    }

    fn gt(h: BBox, o: BBox, obj: u32, verb: u32) -> GroundTruthTriplet {
        GroundTruthTriplet { human: h, object: o, object_id: ObjectId(obj), verb_id: VerbId(verb) }
    }

    #[test]
    fn interactiveness_rules() {
        let t = sample();
        let h = BBox::from_corners(0.0, 0.0, 10.0, 10.0).unwrap();
        let o = BBox::from_corners(20.0, 0.0, 30.0, 10.0).unwrap();
        let dets = [
            Detection { bbox: h, category: ObjectId(0), score: 1.0 },
            Detection { bbox: o, category: ObjectId(1), score: 1.0 },
        ];
        let pairs = associate_pairs(&dets, &t, None);
        assert_eq!(assign_interactiveness_labels(&pairs, &[gt(h, o, 1, 0)], 0.5), vec![true]);
        let far = BBox::from_corners(50.0, 50.0, 60.0, 60.0).unwrap();
        assert_eq!(assign_interactiveness_labels(&pairs, &[gt(h, far, 1, 0)], 0.5), vec![false]);
        // Wrong object category.
        assert_eq!(assign_interactiveness_labels(&pairs, &[gt(h, o, 2, 2)], 0.5), vec![false]);

        // human IoU 0.6, object IoU 0.4 against the only GT -> negative.
        // Shifting a 10x10 box by d along x gives IoU (10-d)/(10+d).
        let h_gt = h.translate(2.5, 0.0);
        let o_gt = o.translate(30.0 / 7.0, 0.0);
        assert!((iou(&h, &h_gt) - 0.6).abs() < 1e-12);
        assert!((iou(&o, &o_gt) - 0.4).abs() < 1e-12);
        assert_eq!(assign_interactiveness_labels(&pairs, &[gt(h_gt, o_gt, 1, 0)], 0.5), vec![false]);
        assert_eq!(assign_interactiveness_labels(&pairs, &[gt(h_gt, o_gt, 1, 0)], 0.3), vec![true]);
    }

    #[test]
    fn interaction_labels_follow_candidate_order() {
        let t = sample();
        let h = BBox::from_corners(0.0, 0.0, 10.0, 10.0).unwrap();
        let o = BBox::from_corners(2.0, 2.0, 6.0, 6.0).unwrap();
        let dets = [
            Detection { bbox: h, category: ObjectId(0), score: 1.0 },
            Detection { bbox: o, category: ObjectId(1), score: 1.0 },
        ];
        let pair = &associate_pairs(&dets, &t, None)[0];
        let feed = gt(h, o, 1, 0);
        let hold = gt(h, o, 1, 2);
        assert_eq!(assign_interaction_labels(pair, &[&feed, &hold], &t).unwrap(), vec![true, false, true]);
        assert_eq!(assign_interaction_labels(pair, &[], &t).unwrap(), vec![false, false, false]);

        let mut single = pair.clone();
        single.candidates = vec![InteractionId(1)];
        let chase = gt(h, o, 1, 1);
        assert_eq!(assign_interaction_labels(&single, &[&chase], &t).unwrap(), vec![true]);
        assert!(matches!(
            assign_interaction_labels(&single, &[&feed], &t),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn permuting_candidates_permutes_labels() {
        let t = sample();
        let h = BBox::from_corners(0.0, 0.0, 10.0, 10.0).unwrap();
        let dets = [
            Detection { bbox: h, category: ObjectId(0), score: 1.0 },
            Detection { bbox: h, category: ObjectId(1), score: 1.0 },
        ];
        let pair = associate_pairs(&dets, &t, None).remove(0);
        let feed = gt(h, h, 1, 0);
        let base = assign_interaction_labels(&pair, &[&feed], &t).unwrap();
        for perm in [[2, 0, 1], [1, 2, 0], [2, 1, 0]] {
            let mut p = pair.clone();
            p.candidates = perm.iter().map(|&i| pair.candidates[i]).collect();
            let got = assign_interaction_labels(&p, &[&feed], &t).unwrap();
            let want: Vec<bool> = perm.iter().map(|&i| base[i]).collect();
            assert_eq!(got, want);
        }
    }

    fn counting_taxonomy(counts: &[u64]) -> Taxonomy {
        let objects = vec![
            ObjectClass { id: ObjectId(0), name: "person".into(), article: "a".into() },
            ObjectClass { id: ObjectId(1), name: "bird".into(), article: "a".into() },
            ObjectClass { id: ObjectId(2), name: "cup".into(), article: "a".into() },
        ];
        let verbs = vec![
            Verb { id: VerbId(0), gerund: "holding".into() },
            Verb { id: VerbId(1), gerund: "feeding".into() },
        ];
        let pairs = [(0, 1), (1, 1), (0, 2), (1, 2)];
        let interactions = pairs
            .iter()
            .zip(counts)
            .map(|(&(v, o), &c)| InteractionEntry { verb_id: VerbId(v), object_id: ObjectId(o), train_count: c })
            .collect();
        Taxonomy::new(TaxonomyFile { human_object_id: ObjectId(0), objects, verbs, interactions }).unwrap()
    }

    #[test]
    fn rare_first_takes_lowest_counts() {
        let t = counting_taxonomy(&[5, 1, 9, 2]);
        // sort-and-take oracle
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by_key(|&i| ([5u64, 1, 9, 2][i], i));
        let want: BTreeSet<InteractionId> = order[..2].iter().map(|&i| InteractionId(i as u32)).collect();
        let s = build_zero_shot_split(&t, SplitSetting::RareFirst, &HoldOut::Count(2)).unwrap();
        assert_eq!(s.unseen_interaction_ids, want);
        assert_eq!(want, [InteractionId(1), InteractionId(3)].into_iter().collect());

        let s = build_zero_shot_split(&t, SplitSetting::NonRareFirst, &HoldOut::Count(1)).unwrap();
        assert_eq!(s.unseen(), vec![InteractionId(2)]);
        assert!(matches!(
            build_zero_shot_split(&t, SplitSetting::RareFirst, &HoldOut::Count(5)),
            Err(Error::Range { .. })
        ));
    }

    #[test]
    fn ties_break_by_id() {
        let t = counting_taxonomy(&[3, 3, 3, 3]);
        let s = build_zero_shot_split(&t, SplitSetting::RareFirst, &HoldOut::Count(2)).unwrap();
        assert_eq!(s.unseen(), vec![InteractionId(0), InteractionId(1)]);
        let s = build_zero_shot_split(&t, SplitSetting::NonRareFirst, &HoldOut::Count(2)).unwrap();
        assert_eq!(s.unseen(), vec![InteractionId(0), InteractionId(1)]);
    }

    #[test]
    fn unseen_object_and_verb() {
        let t = counting_taxonomy(&[5, 1, 9, 2]);
        let s = build_zero_shot_split(&t, SplitSetting::UnseenObject, &HoldOut::Ids(vec![1])).unwrap();
        assert_eq!(s.unseen(), vec![InteractionId(0), InteractionId(1)]);
        let s = build_zero_shot_split(&t, SplitSetting::UnseenVerb, &HoldOut::Ids(vec![])).unwrap();
        assert!(s.unseen().is_empty());
        let s = build_zero_shot_split(&t, SplitSetting::UnseenVerb, &HoldOut::Ids(vec![1])).unwrap();
        assert_eq!(s.unseen(), vec![InteractionId(1), InteractionId(3)]);
        assert!(build_zero_shot_split(&t, SplitSetting::UnseenObject, &HoldOut::Ids(vec![7])).is_err());
    }

    fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec((0u32..3, 0.0..50.0f64), 0..12)
            .prop_map(|v| v.into_iter().map(|(c, x)| det(c, x)).collect())
    }

    proptest! {
        #[test]
        fn pair_count_formula(dets in arb_dets()) {
            let t = sample();
            let humans = dets.iter().filter(|d| d.category == t.human()).count();
            let pairs = associate_pairs(&dets, &t, None);
            prop_assert_eq!(pairs.len(), humans * dets.len().saturating_sub(1));
            let idx: Vec<_> = pairs.iter().map(|p| (p.human_index, p.object_index)).collect();
            prop_assert_eq!(idx, brute_force_pairs(&dets, t.human()));
        }

        #[test]
        fn split_partitions(n in 0usize..=4, setting in prop::sample::select(vec![SplitSetting::RareFirst, SplitSetting::NonRareFirst])) {
            let t = counting_taxonomy(&[5, 1, 9, 2]);
            let s = build_zero_shot_split(&t, setting, &HoldOut::Count(n)).unwrap();
            let seen: BTreeSet<_> = s.seen(&t).into_iter().collect();
            prop_assert!(seen.is_disjoint(&s.unseen_interaction_ids));
            prop_assert_eq!(seen.len() + s.unseen_interaction_ids.len(), 4);
        }
    }
}

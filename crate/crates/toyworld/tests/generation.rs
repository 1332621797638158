use std::collections::BTreeSet;

use hoi_core::io::{load_detections, load_ground_truth};
use hoi_core::Taxonomy;
use hoi_toyworld::{detections, generate, relation, write_dataset, ToySceneSpec, PERSON};
use sha2::{Digest, Sha256};

fn spec(seed: u64) -> ToySceneSpec {
    ToySceneSpec {
        seed,
        ..Default::default()
    }
}

#[test]
fn labels_follow_from_geometry() {
    let data = generate(&spec(3), 200).unwrap();
    for img in &data.images {
        let people: Vec<_> = img.entities.iter().filter(|e| e.category == PERSON).collect();
        let mut recomputed = BTreeSet::new();
        for h in &people {
            for o in img.entities.iter().filter(|e| e.category != PERSON) {
                if let Some(v) = relation(&h.bbox(), &o.bbox()) {
                    recomputed.insert((h.bbox.map(f64::to_bits), o.bbox.map(f64::to_bits), o.category.0, v.0));
                }
            }
        }
        let emitted: BTreeSet<_> = img
            .gt
            .triplets
            .iter()
            .map(|t| (t.human.corners().map(f64::to_bits), t.object.corners().map(f64::to_bits), t.object_id.0, t.verb_id.0))
            .collect();
        assert_eq!(recomputed, emitted, "{}", img.id);
    }
}

#[test]
fn every_verb_and_negatives_occur() {
    let data = generate(&spec(1), 300).unwrap();
    let verbs: BTreeSet<u32> = data.images.iter().flat_map(|i| i.gt.triplets.iter().map(|t| t.verb_id.0)).collect();
    assert_eq!(verbs.len(), 6);
    let objects: usize = data.images.iter().map(|i| i.entities.len()).sum();
    let triplets: usize = data.images.iter().map(|i| i.gt.triplets.len()).sum();
    assert!(triplets > 0 && triplets < objects);
}

#[test]
fn zero_images_give_valid_empty_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(&spec(0), 0).unwrap();
    write_dataset(dir.path(), &data, 0.0).unwrap();
    let tax = Taxonomy::load(&dir.path().join("taxonomy.json")).unwrap();
    assert!(load_ground_truth(&dir.path().join("gt.json"), Some(&tax)).unwrap().is_empty());
    assert!(load_detections(&dir.path().join("detections.json"), Some(&tax)).unwrap().is_empty());
}

#[test]
fn jitter_zero_detections_are_ground_truth() {
    let s = spec(5);
    let data = generate(&s, 20).unwrap();
    for (k, img) in data.images.iter().enumerate() {
        assert_eq!(detections(&s, k, img, 0.0).detections, img.gt.detections);
        let jittered = detections(&s, k, img, 3.0);
        assert!(jittered.detections.iter().all(|d| d.score < 1.0));
        assert_eq!(jittered.detections.len(), img.gt.detections.len());
    }
}

#[test]
fn written_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(&spec(2), 8).unwrap();
    write_dataset(dir.path(), &data, 1.0).unwrap();
    let tax = Taxonomy::load(&dir.path().join("taxonomy.json")).unwrap();
    assert_eq!(tax, data.taxonomy);
    let gt = load_ground_truth(&dir.path().join("gt.json"), Some(&tax)).unwrap();
    assert_eq!(gt.len(), 8);
    for (a, b) in gt.iter().zip(&data.images) {
        assert_eq!(a, &b.gt);
        let png = image::open(dir.path().join("images").join(format!("{}.png", a.id))).unwrap().to_rgb8();
        assert_eq!(png, b.image);
    }
}

fn digest(dir: &std::path::Path) -> String {
    let mut h = Sha256::new();
    for f in ["taxonomy.json", "gt.json", "detections.json", "scenes.json"] {
        h.update(std::fs::read(dir.join(f)).unwrap());
    }
    let mut pngs: Vec<_> = std::fs::read_dir(dir.join("images")).unwrap().map(|e| e.unwrap().path()).collect();
    pngs.sort();
    for p in pngs {
        h.update(std::fs::read(p).unwrap());
    }
    hex::encode(h.finalize())
}

#[test]
fn pinned_content_hash() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_dataset(a.path(), &generate(&spec(0), 10).unwrap(), 2.0).unwrap();
    write_dataset(b.path(), &generate(&spec(0), 10).unwrap(), 2.0).unwrap();
    let h = digest(a.path());
    assert_eq!(h, digest(b.path()));
    assert_eq!(h, "04cc34e945684b0eec1ba501a0dc324d55aff094a5cacfc2bbd54b43c1fd5b6c");
}

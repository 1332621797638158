use std::path::Path;

use hoi_core::io::{detections_to_json, ground_truth_to_json, to_json_pretty, write_atomic, GroundTruthImage, ImageDetections};
use hoi_core::{BBox, Detection, GroundTruthTriplet, Taxonomy, VerbId};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::{
    box_distance, relation, render, taxonomy, Entity, Result, ToyError, ToySceneSpec, CONTACT_GAP, FAR_GAP, HOLDING,
    KICKING, LIFTING, OBJECTS, PERSON, REPAIRING, VARIANTS, VERBS, WASHING,
};

#[derive(Debug, Clone)]
pub struct ToyImage {
    pub id: String,
    pub image: RgbImage,
    pub gt: GroundTruthImage,
    pub entities: Vec<Entity>,
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub spec: ToySceneSpec,
    pub taxonomy: Taxonomy,
    pub images: Vec<ToyImage>,
}

fn image_rng(seed: u64, index: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * index as u64 + stream);
    rng
}

fn range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        lo
    } else {
        rng.random_range(lo..=hi).round()
    }
}

fn place_human(rng: &mut ChaCha8Rng, spec: &ToySceneSpec) -> Option<BBox> {
    let (w, h) = (range(rng, 10.0, 14.0), range(rng, 22.0, 28.0));
    let x1 = range(rng, 1.0, spec.width as f64 - w - 1.0);
    // Leave room above the head and below the feet for contact objects.
    let y1 = range(rng, 12.0, spec.height as f64 - h - 12.0);
    BBox::from_corners(x1, y1, x1 + w, y1 + h).ok()
}

/// Candidate object box for `verb` relative to person `hb`, or anywhere
/// when `verb` is `None`.
fn place_object(rng: &mut ChaCha8Rng, spec: &ToySceneSpec, hb: &BBox, verb: Option<VerbId>) -> Option<BBox> {
    let s = range(rng, 6.0, 8.0);
    let (x1, y1) = match verb {
        None => (
            range(rng, 0.0, spec.width as f64 - s),
            range(rng, 0.0, spec.height as f64 - s),
        ),
        Some(HOLDING) => (
            range(rng, hb.x1() + 1.0, hb.x2() - s - 1.0),
            range(rng, hb.y1() + hb.h() / 3.0, hb.y2() - s - 1.0),
        ),
        Some(v @ (LIFTING | KICKING)) => {
            let gap = range(rng, 0.0, CONTACT_GAP - 1.0);
            let y1 = if v == LIFTING { hb.y1() - s - gap } else { hb.y2() + gap };
            (range(rng, hb.cx() - s / 2.0 - 2.0, hb.cx() - s / 2.0 + 2.0), y1)
        }
        Some(v) => {
            let gap = range(rng, 0.0, CONTACT_GAP - 1.0);
            let x1 = if v == REPAIRING { hb.x1() - gap - s } else { hb.x2() + gap };
            let (lo, hi) = if v == WASHING { (0.8, 0.95) } else { (0.35, 0.55) };
            let cy = hb.y1() + hb.h() * rng.random_range(lo..=hi);
            (x1, (cy - s / 2.0).round())
        }
    };
    if x1 < 0.0 || y1 < 0.0 || x1 + s > spec.width as f64 || y1 + s > spec.height as f64 {
        return None;
    }
    BBox::from_corners(x1, y1, x1 + s, y1 + s).ok()
}

struct Layout {
    humans: Vec<BBox>,
    objects: Vec<(BBox, Entity)>,
    triplets: Vec<GroundTruthTriplet>,
}

fn try_scene(rng: &mut ChaCha8Rng, spec: &ToySceneSpec) -> Option<Layout> {
    let n_humans = rng.random_range(1..=spec.max_humans);
    let n_objects = rng.random_range(1..=spec.max_objects);
    let mut humans: Vec<BBox> = Vec::new();
    for _ in 0..n_humans {
        let mut placed = false;
        for _ in 0..spec.retries {
            let Some(h) = place_human(rng, spec) else { continue };
            // Room for a side object next to one person that is still far
            // from the other.
            if humans.iter().all(|o| box_distance(o, &h) >= 8.0 + CONTACT_GAP + FAR_GAP) {
                humans.push(h);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    let mut objects: Vec<(BBox, Entity)> = Vec::new();
    let mut triplets = Vec::new();
    for _ in 0..n_objects {
        let category = OBJECTS[rng.random_range(0..OBJECTS.len())];
        let target = rng
            .random_bool(spec.interact_prob)
            .then(|| {
                let j = rng.random_range(0..humans.len());
                let v = VERBS[rng.random_range(0..VERBS.len())];
                (j, if spec.nested_only { HOLDING } else { v })
            });
        let variant = VARIANTS[rng.random_range(0..VARIANTS.len())];
        let mut placed = None;
        for _ in 0..spec.retries {
            let anchor = target.map_or(humans[0], |(j, _)| humans[j]);
            let Some(o) = place_object(rng, spec, &anchor, target.map(|t| t.1)) else { continue };
            if !valid_object(&o, target, &humans, &objects) {
                continue;
            }
            placed = Some(o);
            break;
        }
        let o = placed?;
        let entity = Entity {
            category,
            bbox: o.corners(),
            variant: Some(variant),
        };
        if let Some((j, verb)) = target {
            triplets.push(GroundTruthTriplet {
                human: humans[j],
                object: o,
                object_id: category,
                verb_id: verb,
            });
        }
        objects.push((o, entity));
    }
    Some(Layout {
        humans,
        objects,
        triplets,
    })
}

fn valid_object(
    o: &BBox,
    target: Option<(usize, VerbId)>,
    humans: &[BBox],
    objects: &[(BBox, Entity)],
) -> bool {
    if objects.iter().any(|(p, _)| box_distance(p, o) < 2.0) {
        return false;
    }
    for (j, h) in humans.iter().enumerate() {
        match target {
            Some((t, verb)) if t == j => {
                if relation(h, o) != Some(verb) {
                    return false;
                }
            }
            _ => {
                if box_distance(h, o) < FAR_GAP {
                    return false;
                }
            }
        }
    }
    true
}

fn generate_one(spec: &ToySceneSpec, taxonomy: &Taxonomy, index: usize) -> Result<ToyImage> {
    let mut rng = image_rng(spec.seed, index, 0);
    let id = format!("toy_{index:05}");
    let layout = (0..spec.retries)
        .find_map(|_| try_scene(&mut rng, spec))
        .ok_or_else(|| ToyError::Generation(format!("{id}: no valid layout after {} attempts", spec.retries)))?;
    let mut entities: Vec<Entity> = layout
        .humans
        .iter()
        .map(|h| Entity {
            category: PERSON,
            bbox: h.corners(),
            variant: None,
        })
        .collect();
    entities.extend(layout.objects.iter().map(|(_, e)| *e));
    let image = render(spec.width, spec.height, &entities);
    let detections = entities
        .iter()
        .map(|e| Detection {
            bbox: e.bbox(),
            category: e.category,
            score: 1.0,
        })
        .collect();
    for t in &layout.triplets {
        debug_assert!(taxonomy.lookup(t.verb_id, t.object_id).is_some());
    }
    Ok(ToyImage {
        id,
        image,
        gt: GroundTruthImage {
            id: format!("toy_{index:05}"),
            width: spec.width,
            height: spec.height,
            triplets: layout.triplets,
            detections,
        },
        entities,
    })
}

/// `n` scenes; each depends only on the seed and its index.
pub fn generate(spec: &ToySceneSpec, n: usize) -> Result<ToyDataset> {
    spec.validate()?;
    let tax = taxonomy();
    let images = (0..n)
        .into_par_iter()
        .map(|i| generate_one(spec, &tax, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyDataset {
        spec: *spec,
        taxonomy: tax,
        images,
    })
}

/// Detector output for `img`: every annotated box moved by `jitter` times a
/// fixed per-box unit noise sample, so larger jitter moves boxes further
/// along the same direction. Scores fall from 1 as jitter grows.
pub fn detections(spec: &ToySceneSpec, index: usize, img: &ToyImage, jitter: f64) -> ImageDetections {
    let mut rng = image_rng(spec.seed, index, 1);
    let score = 1.0 / (1.0 + 0.05 * jitter);
    let (w, h) = (img.gt.width as f64, img.gt.height as f64);
    let dets = img
        .entities
        .iter()
        .map(|e| {
            let noise: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
            let [x1, y1, x2, y2] = e.bbox;
            let nx1 = (x1 + jitter * noise[0]).clamp(0.0, w - 1.0);
            let ny1 = (y1 + jitter * noise[1]).clamp(0.0, h - 1.0);
            let nx2 = (x2 + jitter * noise[2]).clamp(nx1 + 1.0, w);
            let ny2 = (y2 + jitter * noise[3]).clamp(ny1 + 1.0, h);
            Detection {
                bbox: if jitter == 0.0 {
                    e.bbox()
                } else {
                    BBox::from_corners(nx1, ny1, nx2, ny2).expect("clamped box is valid")
                },
                category: e.category,
                score: if jitter == 0.0 { 1.0 } else { score },
            }
        })
        .collect();
    ImageDetections {
        id: img.id.clone(),
        width: img.gt.width,
        height: img.gt.height,
        detections: dets,
    }
}

#[derive(Serialize)]
struct SceneRecord<'a> {
    id: &'a str,
    entities: &'a [Entity],
}

#[derive(Serialize)]
struct ScenesFile<'a> {
    spec: &'a ToySceneSpec,
    images: Vec<SceneRecord<'a>>,
}

/// Writes `taxonomy.json`, `gt.json`, `detections.json` (at `jitter`),
/// `scenes.json` and `images/{id}.png` under `dir`.
pub fn write_dataset(dir: &Path, data: &ToyDataset, jitter: f64) -> Result<()> {
    write_atomic(&dir.join("taxonomy.json"), to_json_pretty(data.taxonomy.file()).as_bytes())?;
    let gt: Vec<GroundTruthImage> = data.images.iter().map(|i| i.gt.clone()).collect();
    write_atomic(&dir.join("gt.json"), ground_truth_to_json(&gt).as_bytes())?;
    let dets: Vec<ImageDetections> = data
        .images
        .iter()
        .enumerate()
        .map(|(k, i)| detections(&data.spec, k, i, jitter))
        .collect();
    write_atomic(&dir.join("detections.json"), detections_to_json(&dets).as_bytes())?;
    let scenes = ScenesFile {
        spec: &data.spec,
        images: data
            .images
            .iter()
            .map(|i| SceneRecord {
                id: &i.id,
                entities: &i.entities,
            })
            .collect(),
    };
    write_atomic(&dir.join("scenes.json"), to_json_pretty(&scenes).as_bytes())?;
    for img in &data.images {
        let path = dir.join("images").join(format!("{}.png", img.id));
        write_atomic(&path, &png_bytes(&img.image, &path)?)?;
    }
    Ok(())
}

pub(crate) fn png_bytes(image: &RgbImage, path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    image
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| ToyError::Image {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    Ok(bytes)
}

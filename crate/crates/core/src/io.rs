//! JSON interchange files.
//!
//! All boxes on disk are corner form `[x1, y1, x2, y2]` in absolute pixels.
//! Files are parsed into raw structs first and validated afterwards so that
//! errors can name the offending image.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::taxonomy::{ObjectId, Taxonomy, VerbId};

/// One scored, labeled box from an external detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub category: ObjectId,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, category: ObjectId, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Validation(format!("detection score {score} outside [0, 1]")));
        }
        Ok(Self { bbox, category, score })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDetections {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthTriplet {
    pub human: BBox,
    pub object: BBox,
    pub object_id: ObjectId,
    pub verb_id: VerbId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthImage {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub triplets: Vec<GroundTruthTriplet>,
    /// Every annotated instance, when the file lists them. Training uses
    /// these as detections.
    pub detections: Vec<Detection>,
}

impl GroundTruthImage {
    /// Annotated instances: the explicit list when present, otherwise the
    /// distinct boxes referenced by triplets (score 1).
    pub fn instances(&self, human: ObjectId) -> Vec<Detection> {
        if !self.detections.is_empty() {
            return self.detections.clone();
        }
        let mut out: Vec<Detection> = Vec::new();
        let mut push = |bbox: BBox, category: ObjectId| {
            if !out.iter().any(|d| d.bbox == bbox && d.category == category) {
                out.push(Detection { bbox, category, score: 1.0 });
            }
        };
        for t in &self.triplets {
            push(t.human, human);
        }
        for t in &self.triplets {
            push(t.object, t.object_id);
        }
        out
    }
}

/// The unit of evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletPrediction {
    pub human: BBox,
    pub object: BBox,
    pub object_id: ObjectId,
    pub verb_id: VerbId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePredictions {
    pub id: String,
    pub triplets: Vec<TripletPrediction>,
}

// ---------------------------------------------------------------------------
// raw serde layer

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetection {
    bbox: [f64; 4],
    category_id: u32,
    score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTriplet {
    human_bbox: [f64; 4],
    object_bbox: [f64; 4],
    object_id: u32,
    verb_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawImage {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    detections: Option<Vec<RawDetection>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    triplets: Option<Vec<RawTriplet>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    images: Vec<RawImage>,
}

fn parse_raw(text: &str, source: &str) -> Result<RawFile> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        path: source.to_string(),
        message: e.to_string(),
    })
}

fn box_from(raw: [f64; 4], source: &str, image: &str, what: &str) -> Result<BBox> {
    BBox::try_from(raw).map_err(|e| Error::Parse {
        path: source.to_string(),
        message: format!("image {image:?}: {what}: {e}"),
    })
}

fn dims(img: &RawImage, source: &str) -> Result<(u32, u32)> {
    match (img.width, img.height) {
        (Some(w), Some(h)) if w > 0 && h > 0 => Ok((w, h)),
        _ => Err(Error::Parse {
            path: source.to_string(),
            message: format!("image {:?}: width and height must be positive integers", img.id),
        }),
    }
}

fn check_categories(
    taxonomy: Option<&Taxonomy>,
    found: impl Iterator<Item = (String, u32)>,
) -> Result<()> {
    let Some(tax) = taxonomy else { return Ok(()) };
    let offenders: Vec<String> = found
        .filter(|(_, c)| !tax.has_object(ObjectId(*c)))
        .map(|(img, c)| format!("{img}:{c}"))
        .collect();
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "unknown object categories (image:category): {}",
            offenders.join(", ")
        )))
    }
}

fn convert_detections(raw: &[RawDetection], source: &str, image: &str) -> Result<Vec<Detection>> {
    raw.iter()
        .enumerate()
        .map(|(i, d)| {
            let bbox = box_from(d.bbox, source, image, &format!("detection {i}"))?;
            if !(0.0..=1.0).contains(&d.score) {
                return Err(Error::Parse {
                    path: source.to_string(),
                    message: format!("image {image:?}: detection {i}: score {} outside [0, 1]", d.score),
                });
            }
            Ok(Detection {
                bbox,
                category: ObjectId(d.category_id),
                score: d.score,
            })
        })
        .collect()
}

/// Parses `detections.json` content. When a taxonomy is given every
/// category is checked against it.
pub fn parse_detections(text: &str, source: &str, taxonomy: Option<&Taxonomy>) -> Result<Vec<ImageDetections>> {
    let raw = parse_raw(text, source)?;
    let mut out = Vec::with_capacity(raw.images.len());
    for img in &raw.images {
        let (width, height) = dims(img, source)?;
        let dets = img.detections.as_deref().unwrap_or(&[]);
        out.push(ImageDetections {
            id: img.id.clone(),
            width,
            height,
            detections: convert_detections(dets, source, &img.id)?,
        });
    }
    check_categories(
        taxonomy,
        out.iter()
            .flat_map(|i| i.detections.iter().map(move |d| (i.id.clone(), d.category.0))),
    )?;
    Ok(out)
}

pub fn load_detections(path: &Path, taxonomy: Option<&Taxonomy>) -> Result<Vec<ImageDetections>> {
    let text = read_text(path)?;
    parse_detections(&text, &path.display().to_string(), taxonomy)
}

fn raw_detection(d: &Detection) -> RawDetection {
    RawDetection {
        bbox: d.bbox.corners(),
        category_id: d.category.0,
        score: d.score,
    }
}

pub fn detections_to_json(images: &[ImageDetections]) -> String {
    let raw = RawFile {
        images: images
            .iter()
            .map(|i| RawImage {
                id: i.id.clone(),
                width: Some(i.width),
                height: Some(i.height),
                detections: Some(i.detections.iter().map(raw_detection).collect()),
                triplets: None,
            })
            .collect(),
    };
    to_json_pretty(&raw)
}

pub fn parse_ground_truth(text: &str, source: &str, taxonomy: Option<&Taxonomy>) -> Result<Vec<GroundTruthImage>> {
    let raw = parse_raw(text, source)?;
    let mut out = Vec::with_capacity(raw.images.len());
    for img in &raw.images {
        let (width, height) = dims(img, source)?;
        let mut triplets = Vec::new();
        for (i, t) in img.triplets.as_deref().unwrap_or(&[]).iter().enumerate() {
            triplets.push(GroundTruthTriplet {
                human: box_from(t.human_bbox, source, &img.id, &format!("triplet {i} human_bbox"))?,
                object: box_from(t.object_bbox, source, &img.id, &format!("triplet {i} object_bbox"))?,
                object_id: ObjectId(t.object_id),
                verb_id: VerbId(t.verb_id),
            });
        }
        let detections = convert_detections(img.detections.as_deref().unwrap_or(&[]), source, &img.id)?;
        out.push(GroundTruthImage {
            id: img.id.clone(),
            width,
            height,
            triplets,
            detections,
        });
    }
    if let Some(tax) = taxonomy {
        check_categories(
            Some(tax),
            out.iter().flat_map(|i| {
                i.triplets
                    .iter()
                    .map(|t| t.object_id.0)
                    .chain(i.detections.iter().map(|d| d.category.0))
                    .map(move |c| (i.id.clone(), c))
            }),
        )?;
        let invalid: Vec<String> = out
            .iter()
            .flat_map(|i| {
                i.triplets
                    .iter()
                    .filter(|t| tax.lookup(t.verb_id, t.object_id).is_none())
                    .map(move |t| format!("{}:(verb {}, object {})", i.id, t.verb_id, t.object_id))
            })
            .collect();
        if !invalid.is_empty() {
            return Err(Error::Validation(format!(
                "ground-truth triplets outside the taxonomy: {}",
                invalid.join(", ")
            )));
        }
    }
    Ok(out)
}

pub fn load_ground_truth(path: &Path, taxonomy: Option<&Taxonomy>) -> Result<Vec<GroundTruthImage>> {
    let text = read_text(path)?;
    parse_ground_truth(&text, &path.display().to_string(), taxonomy)
}

pub fn ground_truth_to_json(images: &[GroundTruthImage]) -> String {
    let raw = RawFile {
        images: images
            .iter()
            .map(|i| RawImage {
                id: i.id.clone(),
                width: Some(i.width),
                height: Some(i.height),
                detections: if i.detections.is_empty() {
                    None
                } else {
                    Some(i.detections.iter().map(raw_detection).collect())
                },
                triplets: Some(
                    i.triplets
                        .iter()
                        .map(|t| RawTriplet {
                            human_bbox: t.human.corners(),
                            object_bbox: t.object.corners(),
                            object_id: t.object_id.0,
                            verb_id: t.verb_id.0,
                            score: None,
                        })
                        .collect(),
                ),
            })
            .collect(),
    };
    to_json_pretty(&raw)
}

pub fn parse_predictions(text: &str, source: &str) -> Result<Vec<ImagePredictions>> {
    let raw = parse_raw(text, source)?;
    let mut out = Vec::with_capacity(raw.images.len());
    for img in &raw.images {
        let mut triplets = Vec::new();
        for (i, t) in img.triplets.as_deref().unwrap_or(&[]).iter().enumerate() {
            let score = t.score.ok_or_else(|| Error::Parse {
                path: source.to_string(),
                message: format!("image {:?}: triplet {i} has no score", img.id),
            })?;
            if !(0.0..=1.0).contains(&score) {
                return Err(Error::Parse {
                    path: source.to_string(),
                    message: format!("image {:?}: triplet {i} score {score} outside [0, 1]", img.id),
                });
            }
            triplets.push(TripletPrediction {
                human: box_from(t.human_bbox, source, &img.id, &format!("triplet {i} human_bbox"))?,
                object: box_from(t.object_bbox, source, &img.id, &format!("triplet {i} object_bbox"))?,
                object_id: ObjectId(t.object_id),
                verb_id: VerbId(t.verb_id),
                score,
            });
        }
        out.push(ImagePredictions {
            id: img.id.clone(),
            triplets,
        });
    }
    Ok(out)
}

pub fn load_predictions(path: &Path) -> Result<Vec<ImagePredictions>> {
    let text = read_text(path)?;
    parse_predictions(&text, &path.display().to_string())
}

pub fn predictions_to_json(images: &[ImagePredictions]) -> String {
    let raw = RawFile {
        images: images
            .iter()
            .map(|i| RawImage {
                id: i.id.clone(),
                width: None,
                height: None,
                detections: None,
                triplets: Some(
                    i.triplets
                        .iter()
                        .map(|t| RawTriplet {
                            human_bbox: t.human.corners(),
                            object_bbox: t.object.corners(),
                            object_id: t.object_id.0,
                            verb_id: t.verb_id.0,
                            score: Some(t.score),
                        })
                        .collect(),
                ),
            })
            .collect(),
    };
    to_json_pretty(&raw)
}

// ---------------------------------------------------------------------------
// file helpers

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

/// Writes through a temporary file in the same directory and renames it
/// into place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::path::PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{name}.tmp.{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json_pretty(value).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::tests::sample;

    #[test]
    fn empty_images() {
        assert!(parse_detections(r#"{"images": []}"#, "d.json", None).unwrap().is_empty());
    }

    #[test]
    fn converts_corners() {
        let text = r#"{"images":[{"id":"a","width":64,"height":48,
            "detections":[{"bbox":[10,20,30,60],"category_id":1,"score":0.9}]}]}"#;
        let imgs = parse_detections(text, "d.json", Some(&sample())).unwrap();
        assert_eq!(imgs.len(), 1);
        let d = imgs[0].detections[0];
        assert_eq!((d.bbox.cx(), d.bbox.cy(), d.bbox.w(), d.bbox.h()), (20.0, 40.0, 20.0, 40.0));
        assert_eq!(d.category, ObjectId(1));
    }

    #[test]
    fn inverted_box_names_image() {
        let text = r#"{"images":[{"id":"img_7","width":64,"height":48,
            "detections":[{"bbox":[10,10,5,5],"category_id":1,"score":0.9}]}]}"#;
        let err = parse_detections(text, "d.json", None).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(err.to_string().contains("img_7"), "{err}");
    }

    #[test]
    fn unknown_category_lists_offenders() {
        let text = r#"{"images":[{"id":"x","width":8,"height":8,"detections":[
            {"bbox":[0,0,1,1],"category_id":41,"score":0.5},
            {"bbox":[0,0,1,1],"category_id":1,"score":0.5},
            {"bbox":[0,0,1,1],"category_id":42,"score":0.5}]}]}"#;
        let err = parse_detections(text, "d.json", Some(&sample())).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Validation(_)));
        assert!(msg.contains("x:41") && msg.contains("x:42"), "{msg}");
    }

    #[test]
    fn schema_violation_is_parse_error() {
        let err = parse_detections(r#"{"images":[{"id":3}]}"#, "d.json", None).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn ground_truth_round_trip() {
        let text = r#"{"images":[{"id":"g","width":64,"height":64,"triplets":[
            {"human_bbox":[0,0,10,20],"object_bbox":[2,2,6,6],"object_id":1,"verb_id":2}]}]}"#;
        let gt = parse_ground_truth(text, "g.json", Some(&sample())).unwrap();
        let again = parse_ground_truth(&ground_truth_to_json(&gt), "g2.json", Some(&sample())).unwrap();
        assert_eq!(gt, again);
        let inst = gt[0].instances(ObjectId(0));
        assert_eq!(inst.len(), 2);
    }

    #[test]
    fn ground_truth_rejects_invalid_interaction() {
        let text = r#"{"images":[{"id":"g","width":64,"height":64,"triplets":[
            {"human_bbox":[0,0,10,20],"object_bbox":[2,2,6,6],"object_id":2,"verb_id":0}]}]}"#;
        assert!(matches!(
            parse_ground_truth(text, "g.json", Some(&sample())),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("p.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}

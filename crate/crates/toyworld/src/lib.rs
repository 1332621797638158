//! Procedural scenes with exact interaction ground truth.
//!
//! Gray rectangles are people; colored shapes are objects. Whether a person
//! interacts with an object, and how, is a pure function of the two boxes
//! (see [`relation`]); the color variant is decoration.

mod generate;
mod render;

use hoi_core::taxonomy::{InteractionEntry, ObjectClass, TaxonomyFile, Verb};
use hoi_core::{BBox, ObjectId, Taxonomy, VerbId};
use serde::{Deserialize, Serialize};

pub use generate::{detections, generate, write_dataset, ToyDataset, ToyImage};
pub use render::render;

pub const PERSON: ObjectId = ObjectId(0);
pub const BALL: ObjectId = ObjectId(1);
pub const CUP: ObjectId = ObjectId(2);
pub const KITE: ObjectId = ObjectId(3);
pub const BOX: ObjectId = ObjectId(4);
pub const OBJECTS: [ObjectId; 4] = [BALL, CUP, KITE, BOX];

pub const HOLDING: VerbId = VerbId(0);
pub const LIFTING: VerbId = VerbId(1);
pub const KICKING: VerbId = VerbId(2);
pub const PUSHING: VerbId = VerbId(3);
pub const REPAIRING: VerbId = VerbId(4);
pub const WASHING: VerbId = VerbId(5);
pub const VERBS: [VerbId; 6] = [HOLDING, LIFTING, KICKING, PUSHING, REPAIRING, WASHING];

/// Largest gap, in pixels, that still counts as touching.
pub const CONTACT_GAP: f64 = 4.0;
/// Minimum box distance between a non-interacting object and any person.
pub const FAR_GAP: f64 = 8.0;

#[derive(Debug, thiserror::Error)]
pub enum ToyError {
    #[error(transparent)]
    Core(#[from] hoi_core::Error),
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("cannot encode {path}: {message}")]
    Image { path: String, message: String },
}

impl ToyError {
    /// True when the caller's input, not the environment, is at fault.
    pub fn is_validation(&self) -> bool {
        match self {
            ToyError::Core(e) => e.is_validation(),
            ToyError::Spec(_) => true,
            ToyError::Generation(_) | ToyError::Image { .. } => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, ToyError>;

/// Color treatment of an object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Full,
    Dark,
    Pastel,
}

pub const VARIANTS: [Variant; 3] = [Variant::Full, Variant::Dark, Variant::Pastel];

/// Every toy taxonomy: the person plus four objects, six verbs, and all
/// 24 verb-object combinations (ids verb-major).
pub fn taxonomy() -> Taxonomy {
    let obj = |id: ObjectId, name: &str, article: &str| ObjectClass {
        id,
        name: name.into(),
        article: article.into(),
    };
    let verb = |id: VerbId, gerund: &str| Verb {
        id,
        gerund: gerund.into(),
    };
    let file = TaxonomyFile {
        human_object_id: PERSON,
        objects: vec![
            obj(PERSON, "person", "a"),
            obj(BALL, "ball", "a"),
            obj(CUP, "cup", "a"),
            obj(KITE, "kite", "a"),
            obj(BOX, "box", "a"),
        ],
        verbs: vec![
            verb(HOLDING, "holding"),
            verb(LIFTING, "lifting"),
            verb(KICKING, "kicking"),
            verb(PUSHING, "pushing"),
            verb(REPAIRING, "repairing"),
            verb(WASHING, "washing"),
        ],
        interactions: VERBS
            .iter()
            .flat_map(|&v| {
                OBJECTS.iter().map(move |&o| InteractionEntry {
                    verb_id: v,
                    object_id: o,
                    train_count: 0,
                })
            })
            .collect(),
    };
    Taxonomy::new(file).expect("toy taxonomy is valid")
}

/// Which verb, if any, links person box `h` to object box `o`.
///
/// - object inside the person: holding
/// - object just above the head, horizontally over the body: lifting
/// - object just below the feet, horizontally under the body: kicking
/// - object touching the right side, centered at mid height: pushing
/// - object touching the left side, centered at mid height: repairing
/// - object touching the right side, centered in the lowest quarter: washing
pub fn relation(h: &BBox, o: &BBox) -> Option<VerbId> {
    if h.contains(o) {
        return Some(HOLDING);
    }
    let over_body = (o.cx() - h.cx()).abs() <= h.w() / 2.0;
    let touching = |gap: f64| (0.0..=CONTACT_GAP).contains(&gap);
    if over_body && touching(h.y1() - o.y2()) {
        return Some(LIFTING);
    }
    if over_body && touching(o.y1() - h.y2()) {
        return Some(KICKING);
    }
    let t = (o.cy() - h.y1()) / h.h();
    let mid = (0.3..=0.6).contains(&t);
    if touching(o.x1() - h.x2()) {
        if mid {
            return Some(PUSHING);
        }
        if (0.75..=1.0).contains(&t) {
            return Some(WASHING);
        }
    }
    if touching(h.x1() - o.x2()) && mid {
        return Some(REPAIRING);
    }
    None
}

/// Smallest Euclidean distance between two boxes (0 when they overlap).
pub fn box_distance(a: &BBox, b: &BBox) -> f64 {
    let dx = (a.x1() - b.x2()).max(b.x1() - a.x2()).max(0.0);
    let dy = (a.y1() - b.y2()).max(b.y1() - a.y2()).max(0.0);
    dx.hypot(dy)
}

/// One drawn thing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub category: ObjectId,
    /// `[x1, y1, x2, y2]`.
    pub bbox: [f64; 4],
    /// `None` for people.
    pub variant: Option<Variant>,
}

impl Entity {
    pub fn bbox(&self) -> BBox {
        let [x1, y1, x2, y2] = self.bbox;
        BBox::from_corners(x1, y1, x2, y2).expect("entity boxes are valid")
    }
}

/// Generation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySceneSpec {
    pub width: u32,
    pub height: u32,
    pub max_humans: usize,
    pub max_objects: usize,
    /// Chance that an object is placed in contact with some person.
    pub interact_prob: f64,
    /// Every interaction is holding: interacting objects sit inside a
    /// person and all others are far away, so interactiveness is linearly
    /// separable on the pair geometry.
    pub nested_only: bool,
    pub seed: u64,
    /// Placement attempts per entity before the scene is restarted, and
    /// scene restarts before giving up.
    pub retries: usize,
}

impl Default for ToySceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            max_humans: 2,
            max_objects: 3,
            interact_prob: 0.7,
            nested_only: false,
            seed: 0,
            retries: 200,
        }
    }
}

impl ToySceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 32 || self.height < 48 {
            return Err(ToyError::Spec(format!(
                "canvas {}x{} is too small (min 32x48)",
                self.width, self.height
            )));
        }
        if self.max_humans == 0 || self.max_objects == 0 {
            return Err(ToyError::Spec("need at least one person and one object".into()));
        }
        if !(0.0..=1.0).contains(&self.interact_prob) {
            return Err(ToyError::Spec("interact_prob outside [0, 1]".into()));
        }
        if self.retries == 0 {
            return Err(ToyError::Spec("retries must be positive".into()));
        }
        Ok(())
    }
}

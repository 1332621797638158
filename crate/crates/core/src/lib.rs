//! Shared building blocks for decoupled human-object interaction (HOI)
//! recognition.
//!
//! The crate holds everything that does not need a neural network:
//!
//! - [`geometry`]: boxes and IoU.
//! - [`taxonomy`]: objects, verbs, valid interactions and per-object
//!   candidate lists.
//! - [`split`]: seen/unseen bookkeeping for zero-shot settings.
//! - [`pairing`]: exhaustive human-object association, label assignment and
//!   zero-shot split construction.
//! - [`eval`]: triplet matching, average precision and mAP reports.
//! - [`io`]: JSON interchange files (detections, ground truth, predictions).

pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod pairing;
pub mod split;
pub mod taxonomy;

pub use error::{Error, Result};
pub use geometry::{iou, BBox};
pub use io::{Detection, GroundTruthTriplet, TripletPrediction};
pub use pairing::HOPair;
pub use split::{SplitSetting, SplitSpec};
pub use taxonomy::{InteractionId, ObjectId, Taxonomy, VerbId};

//! Object and verb vocabularies, valid verb-object interactions, and the
//! per-object candidate interaction lists.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::split::SplitSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VerbId(pub u32);

/// Index of an interaction in the taxonomy's interaction list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InteractionId(pub u32);

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Display for VerbId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Display for InteractionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectClass {
    pub id: ObjectId,
    pub name: String,
    pub article: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verb {
    pub id: VerbId,
    pub gerund: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionEntry {
    pub verb_id: VerbId,
    pub object_id: ObjectId,
    pub train_count: u64,
}

/// On-disk layout of `taxonomy.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomyFile {
    pub human_object_id: ObjectId,
    pub objects: Vec<ObjectClass>,
    pub verbs: Vec<Verb>,
    pub interactions: Vec<InteractionEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub id: InteractionId,
    pub verb: VerbId,
    pub object: ObjectId,
    pub train_count: u64,
}

/// Validated, immutable taxonomy with lookup tables.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    file: TaxonomyFile,
    interactions: Vec<Interaction>,
    object_index: HashMap<ObjectId, usize>,
    verb_index: HashMap<VerbId, usize>,
    pair_index: HashMap<(VerbId, ObjectId), InteractionId>,
    candidates: BTreeMap<ObjectId, Vec<InteractionId>>,
}

impl PartialEq for Taxonomy {
    fn eq(&self, other: &Self) -> bool {
        self.file == other.file
    }
}

impl Taxonomy {
    pub fn new(file: TaxonomyFile) -> Result<Self> {
        let mut object_index = HashMap::new();
        for (i, o) in file.objects.iter().enumerate() {
            if o.name.trim().is_empty() {
                return Err(Error::Taxonomy(format!("object {} has an empty name", o.id)));
            }
            if object_index.insert(o.id, i).is_some() {
                return Err(Error::Taxonomy(format!("duplicate object id {}", o.id)));
            }
        }
        let mut verb_index = HashMap::new();
        for (i, v) in file.verbs.iter().enumerate() {
            if v.gerund.trim().is_empty() {
                return Err(Error::Taxonomy(format!("verb {} has an empty gerund", v.id)));
            }
            if verb_index.insert(v.id, i).is_some() {
                return Err(Error::Taxonomy(format!("duplicate verb id {}", v.id)));
            }
        }
        if !object_index.contains_key(&file.human_object_id) {
            return Err(Error::Taxonomy(format!(
                "human_object_id {} is not among the objects",
                file.human_object_id
            )));
        }

        let mut interactions = Vec::with_capacity(file.interactions.len());
        let mut pair_index = HashMap::new();
        let mut candidates: BTreeMap<ObjectId, Vec<InteractionId>> = BTreeMap::new();
        for (i, entry) in file.interactions.iter().enumerate() {
            if !verb_index.contains_key(&entry.verb_id) {
                return Err(Error::Taxonomy(format!(
                    "interaction {i} references unknown verb {}",
                    entry.verb_id
                )));
            }
            if !object_index.contains_key(&entry.object_id) {
                return Err(Error::Taxonomy(format!(
                    "interaction {i} references unknown object {}",
                    entry.object_id
                )));
            }
            let id = InteractionId(i as u32);
            if pair_index.insert((entry.verb_id, entry.object_id), id).is_some() {
                return Err(Error::Taxonomy(format!(
                    "duplicate interaction (verb {}, object {})",
                    entry.verb_id, entry.object_id
                )));
            }
            candidates.entry(entry.object_id).or_default().push(id);
            interactions.push(Interaction {
                id,
                verb: entry.verb_id,
                object: entry.object_id,
                train_count: entry.train_count,
            });
        }

        Ok(Self {
            file,
            interactions,
            object_index,
            verb_index,
            pair_index,
            candidates,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: TaxonomyFile = crate::io::read_json(path)?;
        Self::new(file)
    }

    pub fn file(&self) -> &TaxonomyFile {
        &self.file
    }

    pub fn human(&self) -> ObjectId {
        self.file.human_object_id
    }

    pub fn objects(&self) -> &[ObjectClass] {
        &self.file.objects
    }

    pub fn verbs(&self) -> &[Verb] {
        &self.file.verbs
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn object(&self, id: ObjectId) -> Result<&ObjectClass> {
        self.object_index
            .get(&id)
            .map(|&i| &self.file.objects[i])
            .ok_or(Error::InvalidId {
                kind: "object",
                id: id.0 as u64,
            })
    }

    pub fn verb(&self, id: VerbId) -> Result<&Verb> {
        self.verb_index
            .get(&id)
            .map(|&i| &self.file.verbs[i])
            .ok_or(Error::InvalidId {
                kind: "verb",
                id: id.0 as u64,
            })
    }

    pub fn interaction(&self, id: InteractionId) -> Result<&Interaction> {
        self.interactions.get(id.0 as usize).ok_or(Error::InvalidId {
            kind: "interaction",
            id: id.0 as u64,
        })
    }

    pub fn has_object(&self, id: ObjectId) -> bool {
        self.object_index.contains_key(&id)
    }

    pub fn lookup(&self, verb: VerbId, object: ObjectId) -> Option<InteractionId> {
        self.pair_index.get(&(verb, object)).copied()
    }

    /// `"<gerund> <article> <object name>"`, e.g. "feeding a bird".
    pub fn render_phrase(&self, verb: VerbId, object: ObjectId) -> Result<String> {
        let v = self.verb(verb)?;
        let o = self.object(object)?;
        if o.article.is_empty() {
            Ok(format!("{} {}", v.gerund, o.name))
        } else {
            Ok(format!("{} {} {}", v.gerund, o.article, o.name))
        }
    }

    pub fn interaction_phrase(&self, id: InteractionId) -> Result<String> {
        let i = self.interaction(id)?;
        self.render_phrase(i.verb, i.object)
    }

    /// Candidate interactions for an object in ascending interaction id.
    ///
    /// With `include_unseen == false` the split's unseen interactions are
    /// dropped (training); with `true` the full list is returned (zero-shot
    /// evaluation). Objects without interactions yield an empty list.
    pub fn candidate_list(
        &self,
        object: ObjectId,
        split: &SplitSpec,
        include_unseen: bool,
    ) -> Result<Vec<InteractionId>> {
        self.object(object)?;
        let all = self.candidates.get(&object).map(Vec::as_slice).unwrap_or(&[]);
        Ok(all
            .iter()
            .copied()
            .filter(|id| include_unseen || !split.is_unseen(*id))
            .collect())
    }

    /// Full candidate list, ignoring any split.
    pub fn all_candidates(&self, object: ObjectId) -> &[InteractionId] {
        self.candidates.get(&object).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Stable fingerprint of the taxonomy content, used for compatibility checks.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(&self.file).expect("taxonomy serializes");
        // FNV-1a; only needs to be stable, not cryptographic.
        let mut h: u64 = 0xcbf29ce484222325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    /// Returns a copy whose `train_count`s are replaced by `counts` (indexed by interaction id).
    pub fn with_train_counts(&self, counts: &[u64]) -> Result<Self> {
        if counts.len() != self.interactions.len() {
            return Err(Error::Taxonomy(format!(
                "expected {} counts, got {}",
                self.interactions.len(),
                counts.len()
            )));
        }
        let mut file = self.file.clone();
        for (e, &c) in file.interactions.iter_mut().zip(counts) {
            e.train_count = c;
        }
        Self::new(file)
    }
}

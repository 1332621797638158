//! Seen/unseen partitions for the zero-shot settings.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{InteractionId, ObjectId, Taxonomy, VerbId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitSetting {
    /// Rare-first unseen composition.
    #[serde(rename = "RF-UC")]
    RareFirst,
    /// Non-rare-first unseen composition.
    #[serde(rename = "NF-UC")]
    NonRareFirst,
    #[serde(rename = "UO")]
    UnseenObject,
    #[serde(rename = "UV")]
    UnseenVerb,
    #[serde(rename = "full")]
    Full,
}

impl SplitSetting {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitSetting::RareFirst => "RF-UC",
            SplitSetting::NonRareFirst => "NF-UC",
            SplitSetting::UnseenObject => "UO",
            SplitSetting::UnseenVerb => "UV",
            SplitSetting::Full => "full",
        }
    }
}

impl fmt::Display for SplitSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "RF-UC" | "rf-uc" => Ok(SplitSetting::RareFirst),
            "NF-UC" | "nf-uc" => Ok(SplitSetting::NonRareFirst),
            "UO" | "uo" => Ok(SplitSetting::UnseenObject),
            "UV" | "uv" => Ok(SplitSetting::UnseenVerb),
            "full" | "FULL" => Ok(SplitSetting::Full),
            other => Err(Error::Split(format!(
                "unknown setting {other:?}; expected RF-UC, NF-UC, UO, UV or full"
            ))),
        }
    }
}

/// On-disk and in-memory form of `split.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub setting: SplitSetting,
    pub unseen_interaction_ids: BTreeSet<InteractionId>,
    pub unseen_object_ids: BTreeSet<ObjectId>,
    pub unseen_verb_ids: BTreeSet<VerbId>,
}

impl SplitSpec {
    /// Everything seen.
    pub fn full() -> Self {
        Self {
            setting: SplitSetting::Full,
            unseen_interaction_ids: BTreeSet::new(),
            unseen_object_ids: BTreeSet::new(),
            unseen_verb_ids: BTreeSet::new(),
        }
    }

    pub fn is_unseen(&self, id: InteractionId) -> bool {
        self.unseen_interaction_ids.contains(&id)
    }

    pub fn seen(&self, taxonomy: &Taxonomy) -> Vec<InteractionId> {
        taxonomy
            .interactions()
            .iter()
            .map(|i| i.id)
            .filter(|id| !self.is_unseen(*id))
            .collect()
    }

    pub fn unseen(&self) -> Vec<InteractionId> {
        self.unseen_interaction_ids.iter().copied().collect()
    }

    /// Checks ids against the taxonomy and the UO/UV closure rules.
    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<()> {
        for id in &self.unseen_interaction_ids {
            taxonomy.interaction(*id)?;
        }
        for id in &self.unseen_object_ids {
            taxonomy.object(*id)?;
        }
        for id in &self.unseen_verb_ids {
            taxonomy.verb(*id)?;
        }
        for inter in taxonomy.interactions() {
            let closed_by_object = self.unseen_object_ids.contains(&inter.object);
            let closed_by_verb = self.unseen_verb_ids.contains(&inter.verb);
            if (closed_by_object || closed_by_verb) && !self.is_unseen(inter.id) {
                return Err(Error::Split(format!(
                    "interaction {} involves an unseen {} but is not marked unseen",
                    inter.id,
                    if closed_by_object { "object" } else { "verb" }
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path, taxonomy: &Taxonomy) -> Result<Self> {
        let split: SplitSpec = crate::io::read_json(path)?;
        split.validate(taxonomy)?;
        Ok(split)
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self::full()
    }
}

//! The unified checkpoint container: one directory with a manifest, the
//! taxonomy and vocabulary it was built for, and one binary blob per
//! parameter group.

use std::fs;
use std::path::Path;

use hoi_core::io::{read_json, to_json_pretty, write_atomic};
use hoi_core::taxonomy::TaxonomyFile;
use hoi_core::Taxonomy;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{EncoderConfig, Sampling, ToyEncoder};
use crate::error::{ModelError, Result};
use crate::lm::{init_base, init_lowrank, LmConfig, Tokenizer, ToyCausalLm};
use crate::params::{ParamSet, ParamShape};
use crate::sap::{self, SapConfig};
use crate::templates;

pub const MAGIC: &[u8; 8] = b"DHOICKPT";
pub const BLOB_VERSION: u8 = 1;
pub const GROUPS: [&str; 4] = ["encoder", "sap", "lm_base", "lm_lowrank"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub sap: SapConfig,
    pub lm: LmConfig,
    pub sampling: Sampling,
    /// Average-pool the image to `n x n` prompt tokens instead of passing
    /// every encoder cell.
    pub image_token_pool: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            sap: SapConfig::default(),
            lm: LmConfig::default(),
            sampling: Sampling::default(),
            image_token_pool: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.sap.validate()?;
        self.lm.validate()?;
        if self.sap.feature_dim != self.encoder.dim || self.lm.visual_dim != self.encoder.dim {
            return Err(ModelError::Config(format!(
                "encoder dim {} must match SAP input {} and LM connector input {}",
                self.encoder.dim, self.sap.feature_dim, self.lm.visual_dim
            )));
        }
        if self.image_token_pool == Some(0) {
            return Err(ModelError::Config("image token pool size must be positive".into()));
        }
        Ok(())
    }

    /// Same seed for every component, for quick setups.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sap.seed = seed;
        self.lm.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub stage: u8,
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupEntry {
    key: String,
    file: String,
    sha256: String,
    params: Vec<ParamShape>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    template_version: u32,
    taxonomy_fingerprint: String,
    config: ModelConfig,
    trained_stages: Vec<u8>,
    train_config: Option<serde_json::Value>,
    groups: Vec<GroupEntry>,
    metrics: Vec<MetricRecord>,
}

/// Everything needed to run inference or continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub taxonomy: Taxonomy,
    pub tokenizer: Tokenizer,
    pub encoder: ParamSet,
    pub sap: ParamSet,
    pub lm_base: ParamSet,
    /// Low-rank factors plus the SAP-to-LM projection.
    pub lm_lowrank: ParamSet,
    pub trained_stages: Vec<u8>,
    /// Echo of the last training configuration.
    pub train_config: Option<serde_json::Value>,
    pub metrics: Vec<MetricRecord>,
}

impl Checkpoint {
    /// Fresh parameters for `taxonomy`.
    pub fn init(config: ModelConfig, taxonomy: Taxonomy) -> Result<Self> {
        config.validate()?;
        let tokenizer = Tokenizer::for_taxonomy(&taxonomy);
        let encoder = ToyEncoder::new(config.encoder).params().clone();
        let sap = sap::init_params(&config.sap);
        let lm_base = init_base(&config.lm, tokenizer.len());
        let mut lm_lowrank = init_lowrank(&config.lm);
        sap::init_projection(&config.sap, config.lm.dim, &mut lm_lowrank);
        lm_lowrank.round_to_f32();
        Ok(Self {
            config,
            taxonomy,
            tokenizer,
            encoder,
            sap,
            lm_base,
            lm_lowrank,
            trained_stages: Vec::new(),
            train_config: None,
            metrics: Vec::new(),
        })
    }

    pub fn group(&self, key: &str) -> Option<&ParamSet> {
        match key {
            "encoder" => Some(&self.encoder),
            "sap" => Some(&self.sap),
            "lm_base" => Some(&self.lm_base),
            "lm_lowrank" => Some(&self.lm_lowrank),
            _ => None,
        }
    }

    pub fn encoder_model(&self) -> Result<ToyEncoder> {
        ToyEncoder::from_params(self.config.encoder, self.encoder.clone())
    }

    pub fn language_model(&self) -> Result<ToyCausalLm> {
        ToyCausalLm::new(self.config.lm, self.tokenizer.clone(), self.lm_base.clone(), self.lm_lowrank.clone())
    }

    /// Fails unless `taxonomy` is the one the checkpoint was built for.
    pub fn check_taxonomy(&self, taxonomy: &Taxonomy) -> Result<()> {
        if taxonomy.fingerprint() != self.taxonomy.fingerprint() {
            return Err(ModelError::Compatibility(format!(
                "checkpoint taxonomy {} differs from supplied taxonomy {}",
                self.taxonomy.fingerprint(),
                taxonomy.fingerprint()
            )));
        }
        Ok(())
    }

    fn blob(set: &ParamSet) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + set.num_values() * 4);
        out.extend_from_slice(MAGIC);
        out.push(BLOB_VERSION);
        out.extend_from_slice(&set.to_le_f32());
        out
    }

    /// Writes the container; parameters are stored as `f32`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| ModelError::io(dir, e))?;
        let mut groups = Vec::new();
        for key in GROUPS {
            let set = self.group(key).expect("known group");
            let bytes = Self::blob(set);
            let file = format!("{key}.bin");
            write_atomic(&dir.join(&file), &bytes)?;
            groups.push(GroupEntry {
                key: key.to_string(),
                file,
                sha256: hex::encode(Sha256::digest(&bytes)),
                params: set.shapes(),
            });
        }
        write_atomic(&dir.join("taxonomy.json"), to_json_pretty(self.taxonomy.file()).as_bytes())?;
        write_atomic(&dir.join("vocab.json"), to_json_pretty(&self.tokenizer.vocab()).as_bytes())?;
        let manifest = Manifest {
            format_version: 1,
            template_version: templates::VERSION,
            taxonomy_fingerprint: self.taxonomy.fingerprint(),
            config: self.config,
            trained_stages: self.trained_stages.clone(),
            train_config: self.train_config.clone(),
            groups,
            metrics: self.metrics.clone(),
        };
        write_atomic(&dir.join("manifest.json"), to_json_pretty(&manifest).as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let corrupt = |message: String| ModelError::Checkpoint {
            path: dir.to_path_buf(),
            message,
        };
        let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
        if manifest.format_version != 1 {
            return Err(corrupt(format!("unsupported format version {}", manifest.format_version)));
        }
        if manifest.template_version != templates::VERSION {
            return Err(ModelError::Compatibility(format!(
                "checkpoint uses prompt template version {}, this build has {}",
                manifest.template_version,
                templates::VERSION
            )));
        }
        manifest.config.validate()?;
        let taxonomy = Taxonomy::new(read_json::<TaxonomyFile>(&dir.join("taxonomy.json"))?)?;
        if taxonomy.fingerprint() != manifest.taxonomy_fingerprint {
            return Err(corrupt("taxonomy fingerprint mismatch".into()));
        }
        let tokenizer = Tokenizer::from_vocab(read_json(&dir.join("vocab.json"))?)?;

        let mut sets: Vec<ParamSet> = Vec::new();
        for key in GROUPS {
            let entry = manifest
                .groups
                .iter()
                .find(|g| g.key == key)
                .ok_or_else(|| corrupt(format!("manifest lacks group {key}")))?;
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(|e| ModelError::io(&path, e))?;
            if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
                return Err(corrupt(format!("content hash mismatch for {}", entry.file)));
            }
            if bytes.len() < 9 || &bytes[..8] != MAGIC {
                return Err(corrupt(format!("{} lacks the container magic", entry.file)));
            }
            if bytes[8] != BLOB_VERSION {
                return Err(corrupt(format!("{} has blob version {}", entry.file, bytes[8])));
            }
            sets.push(ParamSet::from_le_f32(&entry.params, &bytes[9..])?);
        }
        let lm_lowrank = sets.pop().expect("four groups");
        let lm_base = sets.pop().expect("four groups");
        let sap = sets.pop().expect("four groups");
        let encoder = sets.pop().expect("four groups");
        let ckpt = Self {
            config: manifest.config,
            taxonomy,
            tokenizer,
            encoder,
            sap,
            lm_base,
            lm_lowrank,
            trained_stages: manifest.trained_stages,
            train_config: manifest.train_config,
            metrics: manifest.metrics,
        };
        ckpt.encoder_model()?;
        ckpt.language_model()?;
        Ok(ckpt)
    }

    /// Rounds every group to `f32`, matching what [`Checkpoint::save`] writes.
    pub fn round_to_f32(&mut self) {
        for set in [&mut self.encoder, &mut self.sap, &mut self.lm_base, &mut self.lm_lowrank] {
            set.round_to_f32();
        }
    }
}

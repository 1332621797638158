//! Per-pair feature extraction shared by training and inference.

use hoi_autograd::Tensor;
use hoi_core::{BBox, InteractionId, Taxonomy};

use crate::backbone::{pooled_grid, roi_align, FeatureMap};
use crate::checkpoint::ModelConfig;
use crate::error::Result;
use crate::lm::PromptItem;
use crate::sap::{spatial_vector, SapInputs, SPATIAL_DIM};

#[derive(Debug, Clone, PartialEq)]
pub struct PairFeatures {
    pub f_h: Tensor,
    pub f_o: Tensor,
    pub u: [f64; SPATIAL_DIM],
}

pub fn pair_features(cfg: &ModelConfig, fmap: &FeatureMap, human: &BBox, object: &BBox) -> Result<PairFeatures> {
    Ok(PairFeatures {
        f_h: roi_align(fmap, human, cfg.sap.pool, cfg.sampling)?,
        f_o: roi_align(fmap, object, cfg.sap.pool, cfg.sampling)?,
        u: spatial_vector(human, object),
    })
}

impl PairFeatures {
    pub fn sap_inputs<'a>(&'a self, fmap: &'a FeatureMap) -> SapInputs<'a> {
        SapInputs {
            f_h: &self.f_h,
            f_o: &self.f_o,
            u: self.u,
            f_img: fmap.cells(),
        }
    }

    /// Pooled human then object cells as visual prompt items, for the path
    /// that skips SAP.
    pub fn roi_items(&self) -> Vec<PromptItem> {
        let rows = |t: &Tensor| (0..t.rows()).map(|r| PromptItem::Visual(t.row(r).to_vec())).collect::<Vec<_>>();
        let mut out = rows(&self.f_h);
        out.extend(rows(&self.f_o));
        out
    }
}

/// Image tokens for prompts: every cell, or a pooled grid.
pub fn image_items(cfg: &ModelConfig, fmap: &FeatureMap) -> Result<Vec<PromptItem>> {
    let cells = match cfg.image_token_pool {
        Some(n) => pooled_grid(fmap, n)?,
        None => fmap.cells().clone(),
    };
    Ok((0..cells.rows()).map(|r| PromptItem::Visual(cells.row(r).to_vec())).collect())
}

pub fn phrases(taxonomy: &Taxonomy, candidates: &[InteractionId]) -> Result<Vec<String>> {
    Ok(candidates
        .iter()
        .map(|&id| taxonomy.interaction_phrase(id))
        .collect::<hoi_core::Result<Vec<_>>>()?)
}

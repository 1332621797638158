//! Spatial-aware pooling: merged appearance, cross-attended image context
//! and the pairwise spatial vector, fused into one interaction feature.

use hoi_autograd::{Graph, Tensor, Var};
use hoi_core::{iou, BBox};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::params::{Bound, Init, ParamSet};

pub const SPATIAL_DIM: usize = 7;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SapConfig {
    /// Encoder feature dimension `d`.
    pub feature_dim: usize,
    /// Interaction feature dimension `d_s`.
    pub dim: usize,
    pub heads: usize,
    /// ROIAlign output size `P`.
    pub pool: usize,
    pub mlp_ratio: usize,
    /// Replace the two area entries by their natural log.
    pub log_area: bool,
    pub use_spatial: bool,
    pub use_attention: bool,
    pub seed: u64,
}

impl Default for SapConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            dim: 64,
            heads: 4,
            pool: 2,
            mlp_ratio: 4,
            log_area: true,
            use_spatial: true,
            use_attention: true,
            seed: 0,
        }
    }
}

impl SapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.dim == 0 || self.pool == 0 || self.mlp_ratio == 0 {
            return Err(ModelError::Config("SAP dimensions must be positive".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "SAP dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    fn merge_in(&self) -> usize {
        2 * self.pool * self.pool * self.feature_dim
    }
}

/// `[w_h*h_h, w_o*h_o, w_h/h_h, w_o/h_o, IoU, (x_h-x_o)/w_h, (y_h-y_o)/h_h]`
/// with `(x, y)` box centers.
pub fn spatial_vector(h: &BBox, o: &BBox) -> [f64; SPATIAL_DIM] {
    [
        h.w() * h.h(),
        o.w() * o.h(),
        h.w() / h.h(),
        o.w() / o.h(),
        iou(h, o),
        (h.cx() - o.cx()) / h.w(),
        (h.cy() - o.cy()) / h.h(),
    ]
}

/// The row actually fed to the spatial MLP.
pub fn spatial_input(u: &[f64; SPATIAL_DIM], log_area: bool) -> Tensor {
    let mut v = u.to_vec();
    if log_area {
        v[0] = v[0].ln();
        v[1] = v[1].ln();
    }
    Tensor::row_vector(v)
}

fn mlp_params(set: &mut ParamSet, init: &mut Init, prefix: &str, dims: [usize; 3]) {
    set.insert(format!("{prefix}.w1"), init.trunc_normal(dims[0], dims[1], INIT_STD));
    set.insert(format!("{prefix}.b1"), Tensor::zeros(1, dims[1]));
    set.insert(format!("{prefix}.w2"), init.trunc_normal(dims[1], dims[2], INIT_STD));
    set.insert(format!("{prefix}.b2"), Tensor::zeros(1, dims[2]));
}

/// Fresh SAP parameters (everything except the LM projection).
pub fn init_params(cfg: &SapConfig) -> ParamSet {
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(cfg.seed));
    let (d, ds, hid) = (cfg.feature_dim, cfg.dim, cfg.dim * cfg.mlp_ratio);
    let mut set = ParamSet::new();
    mlp_params(&mut set, &mut init, "merge", [cfg.merge_in(), hid, ds]);
    for (name, rows) in [("attn.wq", ds), ("attn.wk", d), ("attn.wv", d), ("attn.wo", ds)] {
        set.insert(name, init.trunc_normal(rows, ds, INIT_STD));
        set.insert(name.replace(".w", ".b"), Tensor::zeros(1, ds));
    }
    mlp_params(&mut set, &mut init, "spatial", [SPATIAL_DIM, hid, ds]);
    mlp_params(&mut set, &mut init, "out", [ds, hid, ds]);
    set.insert("inter.w", init.trunc_normal(ds, 1, INIT_STD));
    set.insert("inter.b", Tensor::zeros(1, 1));
    set.round_to_f32();
    set
}

pub const PROJ_W: &str = "proj.w";
pub const PROJ_B: &str = "proj.b";

/// The `d_s -> d_lm` projection; it lives with the LM adaptation weights.
pub fn init_projection(cfg: &SapConfig, lm_dim: usize, set: &mut ParamSet) {
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9));
    set.insert(PROJ_W, init.trunc_normal(cfg.dim, lm_dim, INIT_STD));
    set.insert(PROJ_B, Tensor::zeros(1, lm_dim));
}

/// Per-pair inputs.
pub struct SapInputs<'a> {
    pub f_h: &'a Tensor,
    pub f_o: &'a Tensor,
    pub u: [f64; SPATIAL_DIM],
    /// All encoder cells, one per row.
    pub f_img: &'a Tensor,
}

pub struct SapOutput {
    /// `1 x d_s`
    pub f_inter: Var,
    /// Head-averaged cross-attention weights, `1 x cells`; absent when the
    /// attention pathway is disabled.
    pub attention: Option<Var>,
}

fn mlp(g: &Graph, p: &Bound<'_>, prefix: &str, x: Var) -> Var {
    let h = g.linear(x, p.var(&format!("{prefix}.w1")), Some(p.var(&format!("{prefix}.b1"))));
    let h = g.gelu(h);
    g.linear(h, p.var(&format!("{prefix}.w2")), Some(p.var(&format!("{prefix}.b2"))))
}

pub fn sap_forward(g: &Graph, cfg: &SapConfig, p: &Bound<'_>, inputs: &SapInputs<'_>) -> Result<SapOutput> {
    let cells = cfg.pool * cfg.pool;
    for (name, t) in [("human", inputs.f_h), ("object", inputs.f_o)] {
        if t.shape() != (cells, cfg.feature_dim) {
            return Err(ModelError::Shape(format!(
                "{name} feature is {}x{}, expected {cells}x{}",
                t.rows(),
                t.cols(),
                cfg.feature_dim
            )));
        }
    }
    if inputs.f_img.cols() != cfg.feature_dim || inputs.f_img.rows() == 0 {
        return Err(ModelError::Shape(format!(
            "image features are {}x{}, expected Nx{}",
            inputs.f_img.rows(),
            inputs.f_img.cols(),
            cfg.feature_dim
        )));
    }
    let concat = Tensor::vstack(&[inputs.f_h, inputs.f_o]).reshape(1, cfg.merge_in());
    let merged = mlp(g, p, "merge", g.constant(concat));

    let (x, attention) = if cfg.use_attention {
        let (a, weights) = cross_attention(g, cfg, p, merged, inputs.f_img);
        (g.add(merged, a), Some(weights))
    } else {
        (merged, None)
    };
    let x = if cfg.use_spatial {
        let u = g.constant(spatial_input(&inputs.u, cfg.log_area));
        let s = mlp(g, p, "spatial", u);
        g.add(x, s)
    } else {
        x
    };
    let f_inter = mlp(g, p, "out", x);
    Ok(SapOutput { f_inter, attention })
}

/// Single query over every image cell; no positional encoding.
fn cross_attention(g: &Graph, cfg: &SapConfig, p: &Bound<'_>, query: Var, f_img: &Tensor) -> (Var, Var) {
    let kv = g.constant(f_img.clone());
    let q = g.linear(query, p.var("attn.wq"), Some(p.var("attn.bq")));
    let k = g.linear(kv, p.var("attn.wk"), Some(p.var("attn.bk")));
    let v = g.linear(kv, p.var("attn.wv"), Some(p.var("attn.bv")));
    let dh = cfg.dim / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut weights_sum: Option<Var> = None;
    for h in 0..cfg.heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let kt = g.transpose(kh);
        let scores = g.scale(g.matmul(qh, kt), scale);
        let a = g.softmax_rows(scores);
        heads.push(g.matmul(a, vh));
        weights_sum = Some(match weights_sum {
            Some(s) => g.add(s, a),
            None => a,
        });
    }
    let cat = g.concat_cols(&heads);
    let out = g.linear(cat, p.var("attn.wo"), Some(p.var("attn.bo")));
    let weights = g.scale(weights_sum.expect("at least one head"), 1.0 / cfg.heads as f64);
    (out, weights)
}

/// `sigmoid(f_inter · w + b)`, `1 x 1`.
pub fn interactiveness(g: &Graph, p: &Bound<'_>, f_inter: Var) -> Var {
    let logit = g.linear(f_inter, p.var("inter.w"), Some(p.var("inter.b")));
    g.sigmoid(logit)
}

/// `1 x d_lm` embedding that stands in for the interaction placeholder.
pub fn project_to_lm(g: &Graph, p: &Bound<'_>, f_inter: Var) -> Var {
    g.linear(f_inter, p.var(PROJ_W), Some(p.var(PROJ_B)))
}

/// Graph-free evaluation result.
#[derive(Debug, Clone, PartialEq)]
pub struct SapEval {
    pub f_inter: Vec<f64>,
    pub interactiveness: f64,
    /// Head-averaged attention over cells (empty without the attention path).
    pub attention: Vec<f64>,
}

/// Forward pass on frozen parameters.
pub fn evaluate(cfg: &SapConfig, params: &ParamSet, inputs: &SapInputs<'_>) -> Result<SapEval> {
    let g = Graph::new();
    let p = params.bind(&g, |_| false);
    let out = sap_forward(&g, cfg, &p, inputs)?;
    let s = interactiveness(&g, &p, out.f_inter);
    let attention = out.attention.map(|a| g.value(a).data().to_vec()).unwrap_or_default();
    let f_inter = g.value(out.f_inter).data().to_vec();
    let interactiveness = g.value(s).item();
    Ok(SapEval {
        f_inter,
        interactiveness,
        attention,
    })
}

/// Projection of an already computed `f_inter`.
pub fn evaluate_projection(lowrank: &ParamSet, f_inter: &[f64]) -> Vec<f64> {
    let w = lowrank.tensor(PROJ_W);
    let b = lowrank.tensor(PROJ_B);
    let mut out = Tensor::row_vector(f_inter.to_vec()).matmul(w);
    out.add_assign(b);
    out.into_data()
}

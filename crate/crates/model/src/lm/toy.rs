use std::sync::atomic::{AtomicUsize, Ordering};

use hoi_autograd::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LmBackend, PromptItem, Tokenizer};
use crate::error::{ModelError, Result};
use crate::params::{Bound, Init, ParamSet};

const LN_EPS: f64 = 1e-5;
const EMBED_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Width of visual items before the connector.
    pub visual_dim: usize,
    pub lora_rank: usize,
    /// Multiplier on the low-rank update `(x A) B`.
    pub lora_scale: f64,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 4,
            mlp_ratio: 4,
            visual_dim: 64,
            lora_rank: 8,
            lora_scale: 16.0,
            seed: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.visual_dim == 0 || self.mlp_ratio == 0 {
            return Err(ModelError::Config("LM dimensions must be positive".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "LM dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.lora_rank == 0 {
            return Err(ModelError::Config("low-rank adaptation needs rank >= 1".into()));
        }
        Ok(())
    }

    /// Per-head slopes of the linear distance penalty, `2^(-8(h+1)/H)`.
    pub fn alibi_slopes(&self) -> Vec<f64> {
        (0..self.heads)
            .map(|h| 2f64.powf(-8.0 * (h + 1) as f64 / self.heads as f64))
            .collect()
    }
}

/// Frozen base weights: token embeddings, visual connector, decoder blocks,
/// final norm and output head.
pub fn init_base(cfg: &LmConfig, vocab_size: usize) -> ParamSet {
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(cfg.seed));
    let d = cfg.dim;
    let hid = d * cfg.mlp_ratio;
    let lecun = |n: usize| 1.0 / (n as f64).sqrt();
    let mut set = ParamSet::new();
    set.insert("tok_emb", init.trunc_normal(vocab_size, d, 1.0));
    set.insert("connector.w", init.trunc_normal(cfg.visual_dim, d, lecun(cfg.visual_dim)));
    set.insert("connector.b", Tensor::zeros(1, d));
    for l in 0..cfg.layers {
        set.insert(format!("l{l}.ln1.g"), Tensor::filled(1, d, 1.0));
        set.insert(format!("l{l}.ln1.b"), Tensor::zeros(1, d));
        for m in ["wq", "wk", "wv", "wo"] {
            set.insert(format!("l{l}.{m}"), init.trunc_normal(d, d, lecun(d)));
        }
        set.insert(format!("l{l}.ln2.g"), Tensor::filled(1, d, 1.0));
        set.insert(format!("l{l}.ln2.b"), Tensor::zeros(1, d));
        set.insert(format!("l{l}.mlp.w1"), init.trunc_normal(d, hid, lecun(d)));
        set.insert(format!("l{l}.mlp.b1"), Tensor::zeros(1, hid));
        set.insert(format!("l{l}.mlp.w2"), init.trunc_normal(hid, d, lecun(hid)));
        set.insert(format!("l{l}.mlp.b2"), Tensor::zeros(1, d));
    }
    set.insert("ln_f.g", Tensor::filled(1, d, 1.0));
    set.insert("ln_f.b", Tensor::zeros(1, d));
    set.insert("head.w", init.trunc_normal(d, vocab_size, lecun(d)));
    set.round_to_f32();
    set
}

/// Low-rank factors on the query and value projections; `B` starts at zero
/// so the adapted model equals the base model.
pub fn init_lowrank(cfg: &LmConfig) -> ParamSet {
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5851_f42d));
    let (d, r) = (cfg.dim, cfg.lora_rank);
    let mut set = ParamSet::new();
    for l in 0..cfg.layers {
        for m in ["q", "v"] {
            set.insert(format!("l{l}.{m}.a"), init.uniform(d, r, 1.0 / (d as f64).sqrt()));
            set.insert(format!("l{l}.{m}.b"), Tensor::zeros(r, d));
        }
    }
    set.round_to_f32();
    set
}

/// Prompt element on a graph. Blocks may hold several rows.
#[derive(Debug, Clone)]
pub enum GraphItem {
    Tokens(Vec<u32>),
    /// `n x visual_dim`
    Visual(Var),
    /// `n x dim`
    Embedding(Var),
}

/// Groups [`PromptItem`]s into constant graph blocks.
pub fn graph_items(g: &Graph, items: &[PromptItem]) -> Vec<GraphItem> {
    let mut out: Vec<GraphItem> = Vec::new();
    let mut i = 0;
    while i < items.len() {
        let j = (i..items.len())
            .find(|&j| std::mem::discriminant(&items[j]) != std::mem::discriminant(&items[i]))
            .unwrap_or(items.len());
        let run = &items[i..j];
        let block = |rows: Vec<&Vec<f64>>| {
            let cols = rows[0].len();
            let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
            g.constant(Tensor::from_vec(rows.len(), cols, data))
        };
        match &items[i] {
            PromptItem::Token(_) => out.push(GraphItem::Tokens(run.iter().filter_map(PromptItem::token_id).collect())),
            PromptItem::Visual(_) => out.push(GraphItem::Visual(block(
                run.iter()
                    .map(|it| match it {
                        PromptItem::Visual(v) => v,
                        _ => unreachable!(),
                    })
                    .collect(),
            ))),
            PromptItem::Embedding(_) => out.push(GraphItem::Embedding(block(
                run.iter()
                    .map(|it| match it {
                        PromptItem::Embedding(v) => v,
                        _ => unreachable!(),
                    })
                    .collect(),
            ))),
        }
        i = j;
    }
    out
}

fn embed(g: &Graph, cfg: &LmConfig, base: &Bound<'_>, items: &[GraphItem]) -> Result<Var> {
    let vocab = g.shape(base.var("tok_emb")).0;
    let mut rows = Vec::with_capacity(items.len());
    for item in items {
        match item {
            GraphItem::Tokens(ids) => {
                if let Some(bad) = ids.iter().find(|&&t| t as usize >= vocab) {
                    return Err(ModelError::InvalidInput(format!("token id {bad} outside vocabulary of {vocab}")));
                }
                let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
                rows.push(g.gather_rows(base.var("tok_emb"), &idx));
            }
            GraphItem::Visual(v) => {
                if g.shape(*v).1 != cfg.visual_dim {
                    return Err(ModelError::Shape(format!(
                        "visual item width {} vs connector input {}",
                        g.shape(*v).1,
                        cfg.visual_dim
                    )));
                }
                rows.push(g.linear(*v, base.var("connector.w"), Some(base.var("connector.b"))));
            }
            GraphItem::Embedding(v) => {
                if g.shape(*v).1 != cfg.dim {
                    return Err(ModelError::Shape(format!(
                        "embedding width {} vs model dim {}",
                        g.shape(*v).1,
                        cfg.dim
                    )));
                }
                // Injected embeddings arrive at whatever scale their producer
                // has; a parameter-free norm puts them on the token scale.
                let d = cfg.dim;
                let ones = g.constant(Tensor::filled(1, d, 1.0));
                let zeros = g.constant(Tensor::zeros(1, d));
                rows.push(g.layer_norm(*v, ones, zeros, EMBED_NORM_EPS));
            }
        }
    }
    if rows.is_empty() {
        return Err(ModelError::InvalidInput("empty prompt".into()));
    }
    Ok(g.concat_rows(&rows))
}

/// Causal mask plus linear distance penalty for one head.
fn attention_bias(t: usize, slope: f64) -> Tensor {
    let mut m = Tensor::zeros(t, t);
    for i in 0..t {
        for j in 0..t {
            let v = if j > i { f64::NEG_INFINITY } else { -slope * (i - j) as f64 };
            m.set(i, j, v);
        }
    }
    m
}

fn adapted(g: &Graph, cfg: &LmConfig, h: Var, w: Var, lowrank: &Bound<'_>, name: &str) -> Var {
    let base = g.matmul(h, w);
    if !lowrank.has(&format!("{name}.a")) {
        return base;
    }
    let xa = g.matmul(h, lowrank.var(&format!("{name}.a")));
    let xab = g.matmul(xa, lowrank.var(&format!("{name}.b")));
    g.add(base, g.scale(xab, cfg.lora_scale))
}

/// Hidden states after the final norm, `T x dim`.
pub fn forward(g: &Graph, cfg: &LmConfig, base: &Bound<'_>, lowrank: &Bound<'_>, items: &[GraphItem]) -> Result<Var> {
    let mut x = embed(g, cfg, base, items)?;
    let t = g.shape(x).0;
    let dh = cfg.dim / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let biases: Vec<Tensor> = cfg.alibi_slopes().into_iter().map(|s| attention_bias(t, s)).collect();
    for l in 0..cfg.layers {
        let p = |n: &str| base.var(&format!("l{l}.{n}"));
        let h = g.layer_norm(x, p("ln1.g"), p("ln1.b"), LN_EPS);
        let q = adapted(g, cfg, h, p("wq"), lowrank, &format!("l{l}.q"));
        let k = g.matmul(h, p("wk"));
        let v = adapted(g, cfg, h, p("wv"), lowrank, &format!("l{l}.v"));
        let mut heads = Vec::with_capacity(cfg.heads);
        for (hd, bias) in biases.iter().enumerate() {
            let qh = g.slice_cols(q, hd * dh, dh);
            let kh = g.slice_cols(k, hd * dh, dh);
            let vh = g.slice_cols(v, hd * dh, dh);
            let scores = g.scale(g.matmul(qh, g.transpose(kh)), scale);
            let a = g.softmax_rows(g.shift(scores, bias));
            heads.push(g.matmul(a, vh));
        }
        let attn = g.matmul(g.concat_cols(&heads), p("wo"));
        x = g.add(x, attn);
        let h2 = g.layer_norm(x, p("ln2.g"), p("ln2.b"), LN_EPS);
        let m = g.gelu(g.linear(h2, p("mlp.w1"), Some(p("mlp.b1"))));
        let m = g.linear(m, p("mlp.w2"), Some(p("mlp.b2")));
        x = g.add(x, m);
    }
    Ok(g.layer_norm(x, base.var("ln_f.g"), base.var("ln_f.b"), LN_EPS))
}

/// Next-token logits from hidden states.
pub fn lm_head(g: &Graph, base: &Bound<'_>, hidden: Var) -> Var {
    g.matmul(hidden, base.var("head.w"))
}

/// Small decoder-only transformer with linear-bias positions and low-rank
/// query/value adaptation.
pub struct ToyCausalLm {
    cfg: LmConfig,
    tokenizer: Tokenizer,
    base: ParamSet,
    lowrank: ParamSet,
    calls: AtomicUsize,
}

impl ToyCausalLm {
    pub fn new(cfg: LmConfig, tokenizer: Tokenizer, base: ParamSet, lowrank: ParamSet) -> Result<Self> {
        cfg.validate()?;
        match base.get("tok_emb") {
            Some(t) if t.shape() == (tokenizer.len(), cfg.dim) => {}
            _ => {
                return Err(ModelError::Shape(format!(
                    "token embedding must be {}x{}",
                    tokenizer.len(),
                    cfg.dim
                )))
            }
        }
        Ok(Self {
            cfg,
            tokenizer,
            base,
            lowrank,
            calls: AtomicUsize::new(0),
        })
    }

    /// Freshly initialized model.
    pub fn init(cfg: LmConfig, tokenizer: Tokenizer) -> Result<Self> {
        let base = init_base(&cfg, tokenizer.len());
        let lowrank = init_lowrank(&cfg);
        Self::new(cfg, tokenizer, base, lowrank)
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    pub fn base(&self) -> &ParamSet {
        &self.base
    }

    pub fn lowrank(&self) -> &ParamSet {
        &self.lowrank
    }

    fn run(&self, items: &[PromptItem], head: bool) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let g = Graph::new();
        let base = self.base.bind(&g, |_| false);
        let lowrank = self.lowrank.bind(&g, |_| false);
        let gi = graph_items(&g, items);
        let h = forward(&g, &self.cfg, &base, &lowrank, &gi)?;
        let out = if head { lm_head(&g, &base, h) } else { h };
        let v = g.value(out).clone();
        Ok(v)
    }
}

impl LmBackend for ToyCausalLm {
    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn embed_dim(&self) -> usize {
        self.cfg.dim
    }

    fn hidden_states(&self, items: &[PromptItem]) -> Result<Tensor> {
        self.run(items, false)
    }

    fn logits(&self, items: &[PromptItem]) -> Result<Tensor> {
        self.run(items, true)
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn reset_calls(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (LmConfig, Tokenizer) {
        let cfg = LmConfig {
            dim: 16,
            heads: 4,
            visual_dim: 8,
            lora_rank: 2,
            ..LmConfig::default()
        };
        (cfg, Tokenizer::new(["a", "b", "c", ","]))
    }

    #[test]
    fn causal_prefix_is_bit_identical() {
        let (cfg, tok) = small();
        let lm = ToyCausalLm::init(cfg, tok.clone()).unwrap();
        let mut items: Vec<PromptItem> = vec![PromptItem::Visual(vec![0.3; 8])];
        items.extend(tok.encode("a b , c").into_iter().map(PromptItem::Token));
        let short = lm.logits(&items).unwrap();
        items.push(PromptItem::Token(tok.id("a").unwrap()));
        let long = lm.logits(&items).unwrap();
        for r in 0..short.rows() {
            assert_eq!(short.row(r), long.row(r));
        }
        assert_eq!(lm.calls(), 2);
    }

    #[test]
    fn zero_b_means_no_update() {
        let (cfg, tok) = small();
        let lm = ToyCausalLm::init(cfg, tok.clone()).unwrap();
        let bare = ToyCausalLm::new(cfg, tok.clone(), lm.base().clone(), ParamSet::new()).unwrap();
        let items: Vec<PromptItem> = tok.encode("a b c").into_iter().map(PromptItem::Token).collect();
        assert_eq!(lm.hidden_states(&items).unwrap(), bare.hidden_states(&items).unwrap());
    }

    #[test]
    fn alibi_slopes_are_powers_of_two() {
        assert_eq!(LmConfig::default().alibi_slopes(), vec![0.25, 0.0625, 0.015625, 0.00390625]);
    }
}

//! Causal language-model backends.
//!
//! A backend sees a prompt as a sequence of [`PromptItem`]s: ordinary token
//! ids, raw visual feature vectors (which the backend maps through its own
//! connector) and embeddings already in its input space.

mod stub;
mod tokenizer;
mod toy;

use hoi_autograd::Tensor;

pub use stub::{HiddenFn, LogitsFn, StubBackend};
pub use tokenizer::{split, Tokenizer, EOS, HOI, SPECIALS, UNK};
pub use toy::{forward as toy_forward, graph_items, init_base, init_lowrank, lm_head, GraphItem, LmConfig, ToyCausalLm};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub enum PromptItem {
    Token(u32),
    /// An encoder feature vector (`d` values).
    Visual(Vec<f64>),
    /// A vector in the backend's embedding space (`d_lm` values).
    Embedding(Vec<f64>),
}

impl PromptItem {
    pub fn token_id(&self) -> Option<u32> {
        match self {
            PromptItem::Token(t) => Some(*t),
            _ => None,
        }
    }
}

pub trait LmBackend: Send + Sync {
    fn tokenizer(&self) -> &Tokenizer;

    fn embed_dim(&self) -> usize;

    /// Final-layer hidden states, one row per item. One backend call.
    fn hidden_states(&self, items: &[PromptItem]) -> Result<Tensor>;

    /// Next-token logits at every position: row `t` scores item `t + 1`.
    /// One backend call.
    fn logits(&self, items: &[PromptItem]) -> Result<Tensor>;

    /// Forward passes served so far.
    fn calls(&self) -> usize;

    fn reset_calls(&self);

    /// Greedy decoding (lowest id wins ties) until `<eos>` or `budget`
    /// tokens. One call per generated token.
    fn generate(&self, prompt: &[PromptItem], budget: usize) -> Result<Vec<u32>> {
        let mut items = prompt.to_vec();
        let mut out = Vec::new();
        let eos = self.tokenizer().eos_id();
        for _ in 0..budget {
            let logits = self.logits(&items)?;
            let last = logits.row(logits.rows() - 1);
            let next = argmax(last) as u32;
            if next == eos {
                break;
            }
            out.push(next);
            items.push(PromptItem::Token(next));
        }
        Ok(out)
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

/// Softmax probability of `index` in `row`.
pub fn softmax_prob(row: &[f64], index: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    (row[index] - max).exp() / sum
}

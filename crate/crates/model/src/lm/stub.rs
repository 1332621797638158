use std::sync::atomic::{AtomicUsize, Ordering};

use hoi_autograd::Tensor;

use super::{LmBackend, PromptItem, Tokenizer};
use crate::error::{ModelError, Result};

pub type HiddenFn = Box<dyn Fn(&[PromptItem]) -> Tensor + Send + Sync>;
pub type LogitsFn = Box<dyn Fn(&[PromptItem]) -> Tensor + Send + Sync>;

/// Scriptable backend for protocol tests.
///
/// By default the hidden state of a token is a hash of the tokens since the
/// most recent punctuation mark or non-token item, so it depends on local
/// content only, never on absolute position. Embedding items pass through
/// unchanged; visual items hash their values. Logits default to uniform.
pub struct StubBackend {
    tokenizer: Tokenizer,
    dim: usize,
    hidden: Option<HiddenFn>,
    logits: Option<LogitsFn>,
    fixed_output: Option<Vec<u32>>,
    calls: AtomicUsize,
}

impl StubBackend {
    pub fn new(tokenizer: Tokenizer, dim: usize) -> Self {
        Self {
            tokenizer,
            dim,
            hidden: None,
            logits: None,
            fixed_output: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_hidden(mut self, f: HiddenFn) -> Self {
        self.hidden = Some(f);
        self
    }

    pub fn with_logits(mut self, f: LogitsFn) -> Self {
        self.logits = Some(f);
        self
    }

    /// Makes [`LmBackend::generate`] return `text` (truncated to the budget).
    pub fn with_fixed_output(mut self, text: &str) -> Self {
        self.fixed_output = Some(self.tokenizer.encode(text));
        self
    }

    fn is_separator(&self, id: u32) -> bool {
        matches!(self.tokenizer.token(id), Some("," | "." | ":" | ";" | "?" | "!"))
    }

    fn default_hidden(&self, items: &[PromptItem]) -> Result<Tensor> {
        let mut out = Tensor::zeros(items.len(), self.dim);
        let mut segment: Vec<u64> = Vec::new();
        for (t, item) in items.iter().enumerate() {
            let row = match item {
                PromptItem::Token(id) => {
                    if self.is_separator(*id) {
                        segment.clear();
                        hash_vector(&[u64::MAX, *id as u64], self.dim)
                    } else {
                        segment.push(*id as u64);
                        hash_vector(&segment, self.dim)
                    }
                }
                PromptItem::Embedding(v) => {
                    segment.clear();
                    if v.len() != self.dim {
                        return Err(ModelError::Shape(format!(
                            "embedding of length {} for a {}-dim backend",
                            v.len(),
                            self.dim
                        )));
                    }
                    v.clone()
                }
                PromptItem::Visual(v) => {
                    segment.clear();
                    let bits: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
                    hash_vector(&bits, self.dim)
                }
            };
            out.row_mut(t).copy_from_slice(&row);
        }
        Ok(out)
    }
}

/// Deterministic pseudo-random vector in `[-1, 1]^dim` keyed by `key`.
pub(crate) fn hash_vector(key: &[u64], dim: usize) -> Vec<f64> {
    let mut h: u64 = 0xcbf29ce484222325;
    for k in key {
        for b in k.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    (0..dim)
        .map(|_| {
            // splitmix64
            h = h.wrapping_add(0x9e3779b97f4a7c15);
            let mut z = h;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
            z ^= z >> 31;
            (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

impl LmBackend for StubBackend {
    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn hidden_states(&self, items: &[PromptItem]) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        match &self.hidden {
            Some(f) => Ok(f(items)),
            None => self.default_hidden(items),
        }
    }

    fn logits(&self, items: &[PromptItem]) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        match &self.logits {
            Some(f) => Ok(f(items)),
            None => Ok(Tensor::zeros(items.len(), self.tokenizer.len())),
        }
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn reset_calls(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    fn generate(&self, prompt: &[PromptItem], budget: usize) -> Result<Vec<u32>> {
        match &self.fixed_output {
            Some(ids) => {
                self.calls.fetch_add(1, Ordering::Relaxed);
                Ok(ids.iter().copied().take(budget).collect())
            }
            None => {
                let mut items = prompt.to_vec();
                let mut out = Vec::new();
                for _ in 0..budget {
                    let logits = self.logits(&items)?;
                    let next = super::argmax(logits.row(logits.rows() - 1)) as u32;
                    if next == self.tokenizer.eos_id() {
                        break;
                    }
                    out.push(next);
                    items.push(PromptItem::Token(next));
                }
                Ok(out)
            }
        }
    }
}

//! Versioned prompt templates.
//!
//! `<f_img>` and `<f_inter>` mark where image and interaction embeddings are
//! spliced in; `{candidates}` is replaced by the rendered candidate list.

pub const VERSION: u32 = 1;

pub const F_IMG: &str = "<f_img>";
pub const F_INTER: &str = "<f_inter>";
pub const CANDIDATES: &str = "{candidates}";

/// Generation and open-ended styles: the model continues after `Answer:`.
pub const GENERATION: &str =
    "Question: <f_img> The interaction features are <f_inter>. Select the correct interaction from the list: {candidates}. Answer:";

/// One-pass matching: each candidate is followed by `<|hoi|>`.
pub const MATCHING: &str =
    "Question: <f_img> The interaction features are <f_inter>. Select the correct interaction from the list: {candidates}.";

pub const CANDIDATE_SEPARATOR: &str = ", ";

/// Prefix for the in-context style. The exemplar questions keep literal
/// placeholder tokens because no features exist for them.
pub const IN_CONTEXT_EXEMPLARS: &str = "I will give you some examples: \
Question: <f_img> The interaction features are <f_inter>. Select the correct interaction from the list: boarding an airplane, directing an airplane, exiting an airplane, flying an airplane, inspecting an airplane, loading an airplane, riding an airplane, sitting on an airplane, washing an airplane. \
Answer: sitting on an airplane, flying an airplane, riding an airplane. \
Question: <f_img> The interaction features are <f_inter>. Select the correct interaction from the list: carrying a couch, lying on a couch, sitting on a couch. \
Answer: sitting on a couch. \
Question: <f_img> The interaction features are <f_inter>. Select the correct interaction from the list: feeding a zebra, holding a zebra, petting a zebra, watching a zebra. \
Answer: feeding a zebra, petting a zebra, watching a zebra. \
According to the above examples, you should give me the answer of the question.";

/// Every fixed piece of template text, for vocabulary construction.
pub const ALL: [&str; 3] = [GENERATION, MATCHING, IN_CONTEXT_EXEMPLARS];

/// `A`, `B`, ... for multiple-choice lists.
pub fn choice_letter(index: usize) -> Option<char> {
    (index < 26).then(|| (b'A' + index as u8) as char)
}

//! Prompt assembly and interaction scoring against an [`LmBackend`].

use std::collections::BTreeSet;

use hoi_core::eval::AnswerOutcome;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::lm::{softmax_prob, LmBackend, PromptItem, Tokenizer, HOI};
use crate::templates;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptStyle {
    Generation,
    Matching,
    OpenSimple,
    OpenMcq,
    OpenIncontext,
}

/// A prompt ready for a backend.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub items: Vec<PromptItem>,
    /// Index of each `<|hoi|>` item, aligned with the candidate list.
    /// Empty outside matching prompts.
    pub hoi_positions: Vec<usize>,
    /// Index of the last interaction-feature item.
    pub inter_position: usize,
    pub style: PromptStyle,
}

fn check_candidates(candidates: &[String]) -> Result<()> {
    if candidates.is_empty() {
        return Err(ModelError::InvalidPrompt("candidate list is empty".into()));
    }
    if let Some(c) = candidates.iter().find(|c| c.contains(HOI)) {
        return Err(ModelError::InvalidCandidate(format!("{c:?} contains the reserved {HOI} marker")));
    }
    Ok(())
}

fn render_candidates(style: PromptStyle, candidates: &[String]) -> String {
    let parts: Vec<String> = match style {
        PromptStyle::Matching => candidates.iter().map(|c| format!("{c}{HOI}")).collect(),
        PromptStyle::OpenMcq => candidates
            .iter()
            .enumerate()
            .map(|(i, c)| match templates::choice_letter(i) {
                Some(l) => format!("{l}. {c}"),
                None => c.clone(),
            })
            .collect(),
        _ => candidates.to_vec(),
    };
    parts.join(templates::CANDIDATE_SEPARATOR)
}

fn build(
    tokenizer: &Tokenizer,
    style: PromptStyle,
    image: &[PromptItem],
    inter: &[PromptItem],
    candidates: &[String],
) -> Result<Prompt> {
    check_candidates(candidates)?;
    if image.is_empty() {
        return Err(ModelError::InvalidPrompt("no image tokens".into()));
    }
    if inter.is_empty() {
        return Err(ModelError::InvalidPrompt("no interaction-feature tokens".into()));
    }
    let template = match style {
        PromptStyle::Matching => templates::MATCHING,
        _ => templates::GENERATION,
    };
    let text = template.replace(templates::CANDIDATES, &render_candidates(style, candidates));
    let (head, rest) = text.split_once(templates::F_IMG).expect("template has an image slot");
    let (middle, tail) = rest.split_once(templates::F_INTER).expect("template has an interaction slot");

    let tokens = |s: &str| tokenizer.encode(s).into_iter().map(PromptItem::Token).collect::<Vec<_>>();
    let mut items = Vec::new();
    if style == PromptStyle::OpenIncontext {
        items.extend(tokens(templates::IN_CONTEXT_EXEMPLARS));
    }
    items.extend(tokens(head));
    items.extend(image.iter().cloned());
    items.extend(tokens(middle));
    items.extend(inter.iter().cloned());
    let inter_position = items.len() - 1;
    items.extend(tokens(tail));

    let hoi_positions = if style == PromptStyle::Matching {
        let hoi = tokenizer.hoi_id();
        let pos: Vec<usize> = (inter_position + 1..items.len())
            .filter(|&i| items[i] == PromptItem::Token(hoi))
            .collect();
        debug_assert_eq!(pos.len(), candidates.len());
        pos
    } else {
        Vec::new()
    };
    Ok(Prompt {
        items,
        hoi_positions,
        inter_position,
        style,
    })
}

pub fn build_generation_prompt(
    tokenizer: &Tokenizer,
    image: &[PromptItem],
    inter: &[PromptItem],
    candidates: &[String],
) -> Result<Prompt> {
    build(tokenizer, PromptStyle::Generation, image, inter, candidates)
}

pub fn build_matching_prompt(
    tokenizer: &Tokenizer,
    image: &[PromptItem],
    inter: &[PromptItem],
    candidates: &[String],
) -> Result<Prompt> {
    build(tokenizer, PromptStyle::Matching, image, inter, candidates)
}

/// Prompt for one of the free-form styles.
pub fn build_open_prompt(
    tokenizer: &Tokenizer,
    style: PromptStyle,
    image: &[PromptItem],
    inter: &[PromptItem],
    candidates: &[String],
) -> Result<Prompt> {
    if !matches!(style, PromptStyle::OpenSimple | PromptStyle::OpenMcq | PromptStyle::OpenIncontext) {
        return Err(ModelError::InvalidPrompt(format!("{style:?} is not a free-form style")));
    }
    build(tokenizer, style, image, inter, candidates)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationOptions {
    /// Report `S^(1/N)` instead of the plain product.
    #[serde(default)]
    pub geometric_mean: bool,
    /// Also multiply in the probability of `<eos>` after the candidate.
    #[serde(default)]
    pub include_eos: bool,
}

/// Teacher-forced probability of `target` after `prefix`, one backend call.
/// An empty target has probability 1.
pub fn sequence_probability(backend: &dyn LmBackend, prefix: &[PromptItem], target: &[u32]) -> Result<f64> {
    if target.is_empty() {
        return Ok(1.0);
    }
    if prefix.is_empty() {
        return Err(ModelError::InvalidPrompt("teacher forcing needs a non-empty prefix".into()));
    }
    let mut items = prefix.to_vec();
    items.extend(target.iter().map(|&t| PromptItem::Token(t)));
    let logits = backend.logits(&items)?;
    let mut p = 1.0;
    for (j, &t) in target.iter().enumerate() {
        p *= softmax_prob(logits.row(prefix.len() + j - 1), t as usize);
    }
    Ok(p)
}

/// Conditional likelihood of each candidate continuing `prompt`; one
/// backend call per candidate.
pub fn deterministic_generation_scores(
    backend: &dyn LmBackend,
    prompt: &Prompt,
    candidates: &[String],
    options: GenerationOptions,
) -> Result<Vec<f64>> {
    check_candidates(candidates)?;
    let tok = backend.tokenizer();
    candidates
        .iter()
        .map(|c| {
            let mut ids = tok.encode(c);
            if ids.is_empty() {
                return Err(ModelError::InvalidCandidate(format!("{c:?} has no tokens")));
            }
            if options.include_eos {
                ids.push(tok.eos_id());
            }
            let p = sequence_probability(backend, &prompt.items, &ids)?;
            Ok(if options.geometric_mean {
                p.powf(1.0 / ids.len() as f64)
            } else {
                p
            })
        })
        .collect()
}

/// Cosine between each `<|hoi|>` hidden state and the interaction-feature
/// hidden state, clamped to `[0, 1]`; one backend call.
pub fn one_pass_matching_scores(backend: &dyn LmBackend, prompt: &Prompt) -> Result<Vec<f64>> {
    if prompt.style != PromptStyle::Matching || prompt.hoi_positions.is_empty() {
        return Err(ModelError::InvalidPrompt("matching needs a prompt with marker positions".into()));
    }
    let hidden = backend.hidden_states(&prompt.items)?;
    if hidden.rows() != prompt.items.len() {
        return Err(ModelError::Shape(format!(
            "backend returned {} hidden rows for {} items",
            hidden.rows(),
            prompt.items.len()
        )));
    }
    let inter = hidden.row(prompt.inter_position);
    let n_inter = norm(inter);
    if n_inter == 0.0 {
        return Err(ModelError::UndefinedCosine("interaction-feature hidden state has zero norm".into()));
    }
    prompt
        .hoi_positions
        .iter()
        .map(|&p| {
            let h = hidden.row(p);
            let n = norm(h);
            if n == 0.0 {
                return Err(ModelError::UndefinedCosine(format!("marker hidden state at {p} has zero norm")));
            }
            let cos = h.iter().zip(inter).map(|(a, b)| a * b).sum::<f64>() / (n * n_inter);
            Ok(cos.clamp(0.0, 1.0))
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Greedy free-form answer.
pub fn open_ended_answer(backend: &dyn LmBackend, prompt: &Prompt, budget: usize) -> Result<String> {
    if budget == 0 {
        return Ok(String::new());
    }
    let ids = backend.generate(&prompt.items, budget)?;
    Ok(backend.tokenizer().decode(&ids))
}

fn normalize(s: &str) -> String {
    let s = s.trim().trim_end_matches('.').trim();
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Maps free text back onto candidate indices. Any unrecognizable segment
/// makes the whole answer a format error.
pub fn parse_answer(text: &str, candidates: &[String], style: PromptStyle) -> AnswerOutcome {
    let body = text.trim();
    if body.is_empty() {
        return AnswerOutcome::FormatError;
    }
    let phrases: Vec<String> = candidates.iter().map(|c| normalize(c)).collect();
    let mut selected = BTreeSet::new();
    for segment in body.split(',') {
        let seg = normalize(segment);
        let hit = if style == PromptStyle::OpenMcq {
            let mut chars = seg.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) if c.is_ascii_alphabetic() => {
                    let idx = (c.to_ascii_uppercase() as u8 - b'A') as usize;
                    (idx < candidates.len()).then_some(idx)
                }
                _ => None,
            }
        } else {
            phrases.iter().position(|p| *p == seg)
        };
        match hit {
            Some(i) => {
                selected.insert(i);
            }
            None => return AnswerOutcome::FormatError,
        }
    }
    AnswerOutcome::Selected(selected)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Likelihood {
    pub probability: f64,
    /// Set for empty answers, whose probability is the empty product.
    pub degenerate: bool,
}

/// Teacher-forced probability of a generated answer, usable as a
/// confidence for free-form baselines.
pub fn likelihood_confidence(text: &str, prompt: &Prompt, backend: &dyn LmBackend) -> Result<Likelihood> {
    let ids = backend.tokenizer().encode(text);
    if ids.is_empty() {
        return Ok(Likelihood {
            probability: 1.0,
            degenerate: true,
        });
    }
    Ok(Likelihood {
        probability: sequence_probability(backend, &prompt.items, &ids)?,
        degenerate: false,
    })
}

/// Structural output statistics of a scoring mode over many pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScoringOutputStats {
    pub pairs: usize,
    /// Scoring never parses text, so this stays zero.
    pub format_errors: usize,
    /// Pairs with several candidates that received a single score.
    pub forced_single: usize,
}

impl ScoringOutputStats {
    pub fn record(&mut self, candidates: usize, scores: &[f64]) {
        self.pairs += 1;
        if candidates > 1 && scores.len() == 1 {
            self.forced_single += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::StubBackend;
    use hoi_autograd::Tensor;

    fn tok() -> Tokenizer {
        let mut words: Vec<String> = Vec::new();
        for t in templates::ALL {
            words.extend(crate::lm::split(t).into_iter().map(String::from));
        }
        words.extend(["feeding", "chasing", "holding", "bird", "A", "B"].map(String::from));
        Tokenizer::new(words)
    }

    fn cands() -> Vec<String> {
        ["feeding a bird", "chasing a bird", "holding a bird"].map(String::from).to_vec()
    }

    fn img() -> Vec<PromptItem> {
        vec![PromptItem::Visual(vec![0.1, 0.2]), PromptItem::Visual(vec![0.3, 0.4])]
    }

    fn inter() -> Vec<PromptItem> {
        vec![PromptItem::Embedding(vec![1.0; 8])]
    }

    #[test]
    fn generation_prompt_lists_candidates_in_order() {
        let t = tok();
        let p = build_generation_prompt(&t, &img(), &inter(), &cands()[..2]).unwrap();
        let ids: Vec<u32> = p.items.iter().filter_map(PromptItem::token_id).collect();
        let text = t.decode(&ids);
        assert!(text.contains("feeding a bird, chasing a bird"), "{text}");
        assert!(text.ends_with("Answer:"));
        assert_eq!(p, build_generation_prompt(&t, &img(), &inter(), &cands()[..2]).unwrap());
        assert!(build_generation_prompt(&t, &[], &inter(), &cands()).is_err());
        assert!(build_generation_prompt(&t, &img(), &inter(), &[]).is_err());
    }

    #[test]
    fn matching_prompt_positions() {
        let t = tok();
        let p = build_matching_prompt(&t, &img(), &inter(), &cands()).unwrap();
        assert_eq!(p.hoi_positions.len(), 3);
        assert!(p.hoi_positions.windows(2).all(|w| w[0] < w[1]));
        for &pos in &p.hoi_positions {
            assert_eq!(p.items[pos], PromptItem::Token(t.hoi_id()));
            // The marker follows the last word of its candidate.
            assert_eq!(p.items[pos - 1], PromptItem::Token(t.id("bird").unwrap()));
        }
        assert_eq!(p.items[p.inter_position], inter()[0]);
        let bad = vec![format!("feeding a bird{HOI}")];
        assert!(matches!(
            build_matching_prompt(&t, &img(), &inter(), &bad),
            Err(ModelError::InvalidCandidate(_))
        ));
    }

    #[test]
    fn uniform_backend_gives_inverse_vocab_power() {
        let t = Tokenizer::new(["x", "y", "z", "w", "v"]);
        assert_eq!(t.len(), 10);
        let stub = StubBackend::new(t.clone(), 4);
        let prefix = vec![PromptItem::Token(5)];
        let p3 = sequence_probability(&stub, &prefix, &[5, 6, 7]).unwrap();
        assert!((p3 - 1e-3).abs() < 1e-15);
        let p1 = sequence_probability(&stub, &prefix, &[5]).unwrap();
        assert!((p1 - 0.1).abs() < 1e-15);
    }

    #[test]
    fn hand_set_logits_match_manual_softmax() {
        let t = Tokenizer::new(Vec::<String>::new()); // 5 specials
        let rows = [[1.0, 0.0, 2.0, -1.0, 0.5], [0.0, 3.0, 1.0, 1.0, -2.0], [0.0; 5]];
        let stub = StubBackend::new(t, 4).with_logits(Box::new(move |items| {
            let mut m = Tensor::zeros(items.len(), 5);
            for r in 0..items.len() {
                m.row_mut(r).copy_from_slice(&rows[r.min(2)]);
            }
            m
        }));
        let p = sequence_probability(&stub, &[PromptItem::Token(0)], &[2, 1]).unwrap();
        let sm = |row: &[f64], i: usize| row[i].exp() / row.iter().map(|v| v.exp()).sum::<f64>();
        let expected = sm(&rows[0], 2) * sm(&rows[1], 1);
        assert!((p - expected).abs() < 1e-12);
    }

    #[test]
    fn stub_matching_edge_cases() {
        let t = tok();
        let p = build_matching_prompt(&t, &img(), &inter(), &cands()).unwrap();
        let same = StubBackend::new(t.clone(), 3).with_hidden(Box::new(|items| Tensor::filled(items.len(), 3, 0.7)));
        assert_eq!(one_pass_matching_scores(&same, &p).unwrap(), vec![1.0; 3]);
        assert_eq!(same.calls(), 1);

        let inter_pos = p.inter_position;
        let ortho = StubBackend::new(t.clone(), 2).with_hidden(Box::new(move |items| {
            let mut m = Tensor::zeros(items.len(), 2);
            for r in 0..items.len() {
                m.set(r, if r == inter_pos { 0 } else { 1 }, 1.0);
            }
            m
        }));
        assert_eq!(one_pass_matching_scores(&ortho, &p).unwrap(), vec![0.0; 3]);

        let opposite = StubBackend::new(t.clone(), 2).with_hidden(Box::new(move |items| {
            let mut m = Tensor::filled(items.len(), 2, -1.0);
            m.row_mut(inter_pos).copy_from_slice(&[1.0, 1.0]);
            m
        }));
        assert_eq!(one_pass_matching_scores(&opposite, &p).unwrap(), vec![0.0; 3]);

        let zero = StubBackend::new(t, 2).with_hidden(Box::new(|items| Tensor::zeros(items.len(), 2)));
        assert!(matches!(one_pass_matching_scores(&zero, &p), Err(ModelError::UndefinedCosine(_))));
    }

    #[test]
    fn open_prompts_carry_appendix_markers() {
        let t = tok();
        let air: Vec<String> = ["boarding an airplane", "directing an airplane"].map(String::from).to_vec();
        let mcq = build_open_prompt(&t, PromptStyle::OpenMcq, &img(), &inter(), &air).unwrap();
        let ids: Vec<u32> = mcq.items.iter().filter_map(PromptItem::token_id).collect();
        let text = t.decode(&ids);
        assert!(text.contains("A. boarding an airplane, B. directing an airplane"), "{text}");
        let ctx = build_open_prompt(&t, PromptStyle::OpenIncontext, &img(), &inter(), &air).unwrap();
        let ids: Vec<u32> = ctx.items.iter().filter_map(PromptItem::token_id).collect();
        assert!(t.decode(&ids).starts_with("I will give you some examples:"));
        assert!(build_open_prompt(&t, PromptStyle::Matching, &img(), &inter(), &air).is_err());
    }

    #[test]
    fn parse_answer_cases() {
        let c = cands();
        let sel = |v: &[usize]| AnswerOutcome::Selected(v.iter().copied().collect());
        assert_eq!(parse_answer("feeding a bird, holding a bird", &c, PromptStyle::OpenSimple), sel(&[0, 2]));
        assert_eq!(parse_answer("Feeding a Bird.", &c, PromptStyle::OpenSimple), sel(&[0]));
        assert_eq!(parse_answer("the person is riding", &c, PromptStyle::OpenSimple), AnswerOutcome::FormatError);
        assert_eq!(parse_answer("", &c, PromptStyle::OpenSimple), AnswerOutcome::FormatError);
        let nine: Vec<String> = (0..9).map(|i| format!("c{i}")).collect();
        assert_eq!(parse_answer("D, G, H", &nine, PromptStyle::OpenMcq), sel(&[3, 6, 7]));
        assert_eq!(parse_answer("Z", &nine, PromptStyle::OpenMcq), AnswerOutcome::FormatError);
    }

    #[test]
    fn likelihood_of_empty_answer_is_degenerate() {
        let t = tok();
        let stub = StubBackend::new(t.clone(), 4);
        let p = build_generation_prompt(&t, &img(), &inter(), &cands()).unwrap();
        let l = likelihood_confidence("", &p, &stub).unwrap();
        assert_eq!((l.probability, l.degenerate), (1.0, true));
        let l = likelihood_confidence("feeding a bird", &p, &stub).unwrap();
        assert!((l.probability - (t.len() as f64).powi(-3)).abs() < 1e-15);
    }

    #[test]
    fn generation_scores_make_one_call_per_candidate() {
        let t = tok();
        let stub = StubBackend::new(t.clone(), 8);
        let p = build_generation_prompt(&t, &img(), &inter(), &cands()).unwrap();
        let s = deterministic_generation_scores(&stub, &p, &cands(), GenerationOptions::default()).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(stub.calls(), 3);
        let g = deterministic_generation_scores(
            &stub,
            &p,
            &cands(),
            GenerationOptions {
                geometric_mean: true,
                include_eos: false,
            },
        )
        .unwrap();
        assert!((g[0] - 1.0 / t.len() as f64).abs() < 1e-12);
    }
}

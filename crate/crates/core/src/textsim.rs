//! Sentence BLEU and the description matcher.
//!
//! Model output is free text. [`Matcher`] maps it onto the closest candidate
//! description: most shared words first, then highest BLEU, then the
//! smallest CWE id (with `Benign` ranked after every CWE).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Label;

/// Lowercased word tokens split on every non-alphanumeric character.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    pub fn new(text: &str) -> Self {
        Self(
            text.to_lowercase()
                .split(|c: char| !c.is_alphanumeric())
                .filter(|t| !t.is_empty())
                .map(str::to_owned)
                .collect(),
        )
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn counts(&self) -> HashMap<&str, usize> {
        let mut m = HashMap::new();
        for t in &self.0 {
            *m.entry(t.as_str()).or_insert(0) += 1;
        }
        m
    }

    fn ngram_counts(&self, n: usize) -> HashMap<&[String], usize> {
        let mut m = HashMap::new();
        for g in self.0.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
        m
    }
}

impl From<&str> for TokenSeq {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TextSimError {
    #[error("BLEU reference is empty")]
    EmptyReference,
    #[error("no candidate descriptions")]
    NoCandidates,
    #[error("candidate description {0:?} is listed twice")]
    DuplicateDescription(String),
}

pub const DEFAULT_MAX_N: usize = 4;

/// Sentence BLEU without smoothing.
///
/// Uses n-gram orders `1..=min(max_n, |candidate|)` with uniform weights. Any
/// zero modified precision gives 0, as does an empty candidate. The brevity
/// penalty is `exp(1 - r/c)` when the candidate is shorter than the reference.
pub fn bleu(candidate: &TokenSeq, reference: &TokenSeq, max_n: usize) -> Result<f64, TextSimError> {
    if reference.is_empty() {
        return Err(TextSimError::EmptyReference);
    }
    let c = candidate.len();
    let r = reference.len();
    let orders = max_n.min(c);
    if orders == 0 {
        return Ok(0.0);
    }

    let mut log_sum = 0.0;
    for n in 1..=orders {
        let cand = candidate.ngram_counts(n);
        let refc = reference.ngram_counts(n);
        let clipped: usize = cand
            .iter()
            .map(|(g, &k)| k.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return Ok(0.0);
        }
        let total = c + 1 - n;
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let bp = if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    Ok((bp * (log_sum / orders as f64).exp()).min(1.0))
}

/// Size of the multiset intersection of the two token bags.
pub fn word_overlap(generated: &TokenSeq, candidate: &TokenSeq) -> usize {
    let cand = candidate.counts();
    generated
        .counts()
        .iter()
        .map(|(t, &k)| k.min(cand.get(t).copied().unwrap_or(0)))
        .sum()
}

/// Which rule decided the winner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    None,
    Bleu,
    LabelOrder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub label: Label,
    pub word_overlap: usize,
    pub bleu: f64,
    pub tie_broken_by: TieBreak,
}

/// BLEU scores closer than this are treated as tied.
pub const BLEU_TIE_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone)]
struct Candidate {
    label: Label,
    tokens: TokenSeq,
}

/// Pre-tokenized candidate set; matching is pure and allocation-light.
#[derive(Debug, Clone)]
pub struct Matcher {
    candidates: Vec<Candidate>,
}

impl Matcher {
    /// Candidates are re-ordered by label so the final tie-break is positional.
    pub fn new<S: AsRef<str>>(
        candidates: impl IntoIterator<Item = (Label, S)>,
    ) -> Result<Self, TextSimError> {
        let mut cands: Vec<Candidate> = Vec::new();
        let mut seen: Vec<(String, TokenSeq)> = Vec::new();
        for (label, desc) in candidates {
            let desc = desc.as_ref();
            let tokens = TokenSeq::new(desc);
            if seen.iter().any(|(d, t)| d == desc || *t == tokens) {
                return Err(TextSimError::DuplicateDescription(desc.to_string()));
            }
            seen.push((desc.to_string(), tokens.clone()));
            cands.push(Candidate { label, tokens });
        }
        if cands.is_empty() {
            return Err(TextSimError::NoCandidates);
        }
        cands.sort_by_key(|c| c.label);
        Ok(Self { candidates: cands })
    }

    pub fn labels(&self) -> impl Iterator<Item = Label> + '_ {
        self.candidates.iter().map(|c| c.label)
    }

    pub fn best_match(&self, generated: &str) -> MatchResult {
        let gen = TokenSeq::new(generated);
        let overlaps: Vec<usize> = self
            .candidates
            .iter()
            .map(|c| word_overlap(&gen, &c.tokens))
            .collect();
        let top = *overlaps.iter().max().expect("non-empty candidates");
        let tied: Vec<usize> = (0..overlaps.len()).filter(|&i| overlaps[i] == top).collect();

        let score = |i: usize| {
            // candidate descriptions are never empty after validation
            bleu(&gen, &self.candidates[i].tokens, DEFAULT_MAX_N).unwrap_or(0.0)
        };
        if let [only] = tied[..] {
            return self.result(only, top, score(only), TieBreak::None);
        }

        let scored: Vec<(usize, f64)> = tied.iter().map(|&i| (i, score(i))).collect();
        let best = scored.iter().map(|&(_, b)| b).fold(f64::NEG_INFINITY, f64::max);
        let finalists: Vec<&(usize, f64)> = scored
            .iter()
            .filter(|(_, b)| best - b <= BLEU_TIE_EPSILON)
            .collect();
        let &(winner, b) = finalists[0];
        let rule = if finalists.len() == 1 {
            TieBreak::Bleu
        } else {
            TieBreak::LabelOrder
        };
        self.result(winner, top, b, rule)
    }

    fn result(&self, i: usize, overlap: usize, bleu: f64, rule: TieBreak) -> MatchResult {
        MatchResult {
            label: self.candidates[i].label,
            word_overlap: overlap,
            bleu,
            tie_broken_by: rule,
        }
    }
}

/// One-shot convenience over [`Matcher`].
pub fn match_description<S: AsRef<str>>(
    generated: &str,
    candidates: impl IntoIterator<Item = (Label, S)>,
) -> Result<MatchResult, TextSimError> {
    Ok(Matcher::new(candidates)?.best_match(generated))
}

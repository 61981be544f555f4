//! Prompt and expected-response construction.
//!
//! A template is a query with one `[CODE]` placeholder. The query is either
//! kept verbatim (hard), has every word replaced by a soft token (soft), or
//! gets soft tokens inserted between its words at seeded positions (mixed).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{CodeSample, CweId, Dataset, Label, LabelSet};
use crate::rng::PortableRng;
use crate::taxonomy::CweTaxonomy;

pub const CODE_PLACEHOLDER: &str = "[CODE]";
pub const DEFAULT_SOFT_TOKEN: &str = "[SOFT]";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("template must contain {CODE_PLACEHOLDER} exactly once as a standalone word: {0:?}")]
    InvalidTemplate(String),
    #[error("soft token {0:?} already occurs in the text it would be mixed into")]
    SoftTokenCollision(String),
    #[error("no description for {0}")]
    MissingDescription(CweId),
    #[error("unknown {kind} {value:?}")]
    UnknownName { kind: &'static str, value: String },
    #[error("sample {sample_id}: {source}")]
    Sample {
        sample_id: String,
        #[source]
        source: Box<PromptError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateName {
    Simple,
    Cpp,
    Codet5,
    Descriptive,
}

impl FromStr for TemplateName {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "simple" => Ok(Self::Simple),
            "cpp" | "c/c++" => Ok(Self::Cpp),
            "codet5" => Ok(Self::Codet5),
            "descriptive" => Ok(Self::Descriptive),
            _ => Err(PromptError::UnknownName {
                kind: "template",
                value: s.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: TemplateName,
    text: String,
}

impl PromptTemplate {
    pub fn new(name: TemplateName, text: impl Into<String>) -> Result<Self, PromptError> {
        let text = text.into();
        let standalone = text
            .split_whitespace()
            .filter(|w| *w == CODE_PLACEHOLDER)
            .count();
        if text.matches(CODE_PLACEHOLDER).count() != 1 || standalone != 1 {
            return Err(PromptError::InvalidTemplate(text));
        }
        Ok(Self { name, text })
    }

    pub fn builtin(name: TemplateName) -> Self {
        let text = match name {
            TemplateName::Simple => "Find CWE in: [CODE]",
            TemplateName::Cpp => {
                "Examine the given C/C++ code snippet and detect vulnerabilities: [CODE]"
            }
            TemplateName::Codet5 => "Defect: [CODE]",
            TemplateName::Descriptive => {
                "Analyze the following code and identify potential security vulnerabilities in: [CODE]"
            }
        };
        Self::new(name, text).expect("builtin templates are valid")
    }

    pub fn name(&self) -> TemplateName {
        self.name
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Number of whitespace-delimited query words, not counting `[CODE]`.
    pub fn query_token_count(&self) -> usize {
        self.text.split_whitespace().count() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleKind {
    Hard,
    Soft,
    Mixed,
}

impl FromStr for StyleKind {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "hard" => Ok(Self::Hard),
            "soft" => Ok(Self::Soft),
            "mixed" => Ok(Self::Mixed),
            _ => Err(PromptError::UnknownName {
                kind: "style",
                value: s.into(),
            }),
        }
    }
}

/// How mixed-style insertion points are drawn from the `n + 1` word boundaries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Each boundary receives at most one soft token.
    #[default]
    DistinctBoundaries,
    /// Boundaries are drawn independently; one may receive several tokens.
    WithReplacement,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PromptStyle {
    pub kind: StyleKind,
    pub soft_token: String,
    /// Only consulted by [`StyleKind::Mixed`].
    pub seed: u64,
    /// Mixed-style insertion count; `None` means `ceil(n / 2)` for `n` query words.
    pub insertions: Option<usize>,
    pub placement: Placement,
}

impl PromptStyle {
    pub fn new(kind: StyleKind) -> Self {
        Self {
            kind,
            soft_token: DEFAULT_SOFT_TOKEN.into(),
            seed: 0,
            insertions: None,
            placement: Placement::default(),
        }
    }

    pub fn hard() -> Self {
        Self::new(StyleKind::Hard)
    }

    pub fn soft() -> Self {
        Self::new(StyleKind::Soft)
    }

    pub fn mixed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::new(StyleKind::Mixed)
        }
    }

    /// The per-record style used when building a corpus: mixed styles get a
    /// seed derived from `(seed, sample_id)`.
    pub fn for_sample(&self, sample_id: &str) -> Self {
        match self.kind {
            StyleKind::Mixed => Self {
                seed: crate::rng::derive_seed(self.seed, sample_id),
                ..self.clone()
            },
            _ => self.clone(),
        }
    }
}

/// Renders the query part of a prompt; the result still contains `[CODE]`.
pub fn render_query(t: &PromptTemplate, style: &PromptStyle) -> Result<String, PromptError> {
    if style.kind != StyleKind::Hard && t.text().contains(style.soft_token.as_str()) {
        return Err(PromptError::SoftTokenCollision(style.soft_token.clone()));
    }
    let words: Vec<&str> = t.text().split_whitespace().collect();
    match style.kind {
        StyleKind::Hard => Ok(t.text().to_string()),
        StyleKind::Soft => Ok(words
            .iter()
            .map(|w| {
                if *w == CODE_PLACEHOLDER {
                    CODE_PLACEHOLDER
                } else {
                    style.soft_token.as_str()
                }
            })
            .collect::<Vec<_>>()
            .join(" ")),
        StyleKind::Mixed => Ok(render_mixed(&words, style)),
    }
}

/// Boundary `i < n` sits just before the i-th query word; boundary `n` just
/// after the last one.
fn render_mixed(words: &[&str], style: &PromptStyle) -> String {
    let n = words.iter().filter(|w| **w != CODE_PLACEHOLDER).count();
    let mut per_boundary = vec![0usize; n + 1];
    let mut rng = PortableRng::new(style.seed);
    match style.placement {
        Placement::DistinctBoundaries => {
            let k = style.insertions.unwrap_or(n.div_ceil(2)).min(n + 1);
            for b in rng.sample_distinct(n + 1, k) {
                per_boundary[b] += 1;
            }
        }
        Placement::WithReplacement => {
            let k = style.insertions.unwrap_or(n.div_ceil(2));
            for _ in 0..k {
                per_boundary[rng.below(n as u64 + 1) as usize] += 1;
            }
        }
    }

    let soft = style.soft_token.as_str();
    let mut out: Vec<&str> = Vec::with_capacity(words.len() + n);
    let mut seen = 0;
    for w in words {
        if *w == CODE_PLACEHOLDER {
            out.push(w);
            continue;
        }
        out.extend(std::iter::repeat_n(soft, per_boundary[seen]));
        out.push(w);
        seen += 1;
        if seen == n {
            out.extend(std::iter::repeat_n(soft, per_boundary[n]));
        }
    }
    out.join(" ")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResponseVariant {
    IdWithDescription,
    IdOnly,
    #[default]
    DescriptionOnly,
}

impl FromStr for ResponseVariant {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "desc" | "description" => Ok(Self::DescriptionOnly),
            "id" => Ok(Self::IdOnly),
            "id+desc" => Ok(Self::IdWithDescription),
            _ => Err(PromptError::UnknownName {
                kind: "response variant",
                value: s.into(),
            }),
        }
    }
}

impl fmt::Display for ResponseVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::DescriptionOnly => "desc",
            Self::IdOnly => "id",
            Self::IdWithDescription => "id+desc",
        })
    }
}

/// Expected model output for `label`. The same strings form the matcher's
/// candidate set, see [`response_candidates`].
pub fn expected_response(
    label: Label,
    rv: ResponseVariant,
    taxonomy: &CweTaxonomy,
    labels: &LabelSet,
) -> Result<String, PromptError> {
    let id = match label {
        Label::Benign => return Ok(labels.benign_response().to_string()),
        Label::Cwe(id) => id,
    };
    let desc = taxonomy
        .description(id)
        .ok_or(PromptError::MissingDescription(id))?;
    Ok(match rv {
        ResponseVariant::DescriptionOnly => desc.to_string(),
        ResponseVariant::IdOnly => id.to_string(),
        ResponseVariant::IdWithDescription => format!("{id}: {desc}"),
    })
}

/// `(label, expected response)` for every label in the set, in label order.
pub fn response_candidates(
    rv: ResponseVariant,
    taxonomy: &CweTaxonomy,
    labels: &LabelSet,
) -> Result<Vec<(Label, String)>, PromptError> {
    labels
        .labels()
        .into_iter()
        .map(|l| Ok((l, expected_response(l, rv, taxonomy, labels)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptRecord {
    pub sample_id: String,
    pub prompt: String,
    pub expected: String,
    pub style: PromptStyle,
    pub template: PromptTemplate,
}

/// On-disk form of a [`PromptRecord`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLine {
    pub id: String,
    pub prompt: String,
    pub expected: String,
}

impl From<&PromptRecord> for PromptLine {
    fn from(r: &PromptRecord) -> Self {
        Self {
            id: r.sample_id.clone(),
            prompt: r.prompt.clone(),
            expected: r.expected.clone(),
        }
    }
}

/// Everything needed to turn samples into prompt records.
#[derive(Debug, Clone)]
pub struct PromptBuilder<'a> {
    pub template: PromptTemplate,
    pub style: PromptStyle,
    pub response: ResponseVariant,
    pub taxonomy: &'a CweTaxonomy,
    pub labels: &'a LabelSet,
}

impl PromptBuilder<'_> {
    /// `s.code` is expected to be preprocessed already.
    pub fn build_record(&self, s: &CodeSample) -> Result<PromptRecord, PromptError> {
        build_record_with(self, s, &self.style)
    }

    /// Maps [`Self::build_record`] over the dataset in order; mixed styles use a
    /// per-sample seed so each record is reproducible on its own.
    pub fn build_corpus(&self, d: &Dataset) -> Result<Vec<PromptRecord>, PromptError> {
        d.samples()
            .iter()
            .map(|s| {
                build_record_with(self, s, &self.style.for_sample(&s.id)).map_err(|e| {
                    PromptError::Sample {
                        sample_id: s.id.clone(),
                        source: Box::new(e),
                    }
                })
            })
            .collect()
    }
}

fn build_record_with(
    b: &PromptBuilder<'_>,
    s: &CodeSample,
    style: &PromptStyle,
) -> Result<PromptRecord, PromptError> {
    if style.kind != StyleKind::Hard && s.code.contains(style.soft_token.as_str()) {
        return Err(PromptError::SoftTokenCollision(style.soft_token.clone()));
    }
    let query = render_query(&b.template, style)?;
    let prompt = query.replacen(CODE_PLACEHOLDER, &s.code, 1);
    let expected = expected_response(s.label, b.response, b.taxonomy, b.labels)?;
    Ok(PromptRecord {
        sample_id: s.id.clone(),
        prompt,
        expected,
        style: style.clone(),
        template: b.template.clone(),
    })
}

//! Labeled vulnerability datasets: loading, validation and stratified splits.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::jsonl::{self, JsonlError};
use crate::rng::PortableRng;
use crate::taxonomy::CweTaxonomy;

/// Numeric CWE identifier (`CWE-787` is `CweId(787)`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CweId(pub u32);

impl fmt::Display for CweId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CWE-{}", self.0)
    }
}

/// Ground-truth or predicted class. Orders CWEs by id with `Benign` last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Cwe(CweId),
    Benign,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("not a label: {0:?} (expected `CWE-<digits>` or `benign`)")]
pub struct LabelParseError(pub String);

impl FromStr for Label {
    type Err = LabelParseError;

    /// Case-insensitive: `cwe-787`, `CWE-0787` and `Benign` are all accepted.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || LabelParseError(s.to_string());
        if s.eq_ignore_ascii_case("benign") {
            return Ok(Label::Benign);
        }
        let prefix = s.get(..4).ok_or_else(err)?;
        if !prefix.eq_ignore_ascii_case("cwe-") {
            return Err(err());
        }
        let digits = &s[4..];
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err());
        }
        match digits.parse::<u32>() {
            Ok(0) | Err(_) => Err(err()),
            Ok(id) => Ok(Label::Cwe(CweId(id))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Cwe(id) => id.fmt(f),
            Label::Benign => f.write_str("benign"),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Label {
    pub fn cwe(&self) -> Option<CweId> {
        match self {
            Label::Cwe(id) => Some(*id),
            Label::Benign => None,
        }
    }

    pub fn is_benign(&self) -> bool {
        matches!(self, Label::Benign)
    }
}

/// Fixed wording of the expected response for non-vulnerable code.
pub const DEFAULT_BENIGN_RESPONSE: &str = "The code is not vulnerable.";

/// The nine CWEs of the reference dataset.
pub const DEFAULT_CWES: [u32; 9] = [20, 119, 125, 190, 200, 416, 476, 703, 787];

/// The configured closed set of labels: some CWEs plus `Benign`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    cwes: Vec<CweId>,
    benign_response: String,
}

#[derive(Debug, thiserror::Error)]
pub enum LabelSetError {
    #[error("label set lists {0} more than once")]
    Duplicate(CweId),
    #[error("{0} is not described in the taxonomy")]
    NotInTaxonomy(CweId),
    #[error("benign response must not be blank")]
    BlankBenignResponse,
}

impl Default for LabelSet {
    fn default() -> Self {
        Self::new(DEFAULT_CWES.iter().map(|&i| CweId(i)), DEFAULT_BENIGN_RESPONSE)
            .expect("default label set is valid")
    }
}

impl LabelSet {
    pub fn new(
        cwes: impl IntoIterator<Item = CweId>,
        benign_response: impl Into<String>,
    ) -> Result<Self, LabelSetError> {
        let mut cwes: Vec<CweId> = cwes.into_iter().collect();
        cwes.sort();
        if let Some(w) = cwes.windows(2).find(|w| w[0] == w[1]) {
            return Err(LabelSetError::Duplicate(w[0]));
        }
        let benign_response = benign_response.into();
        if benign_response.trim().is_empty() {
            return Err(LabelSetError::BlankBenignResponse);
        }
        Ok(Self {
            cwes,
            benign_response,
        })
    }

    pub fn cwes(&self) -> &[CweId] {
        &self.cwes
    }

    pub fn benign_response(&self) -> &str {
        &self.benign_response
    }

    /// All labels in canonical order: CWEs ascending, then `Benign`.
    pub fn labels(&self) -> Vec<Label> {
        self.cwes
            .iter()
            .map(|&c| Label::Cwe(c))
            .chain(std::iter::once(Label::Benign))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.cwes.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, label: &Label) -> bool {
        match label {
            Label::Benign => true,
            Label::Cwe(id) => self.cwes.binary_search(id).is_ok(),
        }
    }

    pub fn index_of(&self, label: &Label) -> Option<usize> {
        match label {
            Label::Benign => Some(self.cwes.len()),
            Label::Cwe(id) => self.cwes.binary_search(id).ok(),
        }
    }

    /// Every configured CWE must be present in the taxonomy's description table.
    pub fn check_against(&self, taxonomy: &CweTaxonomy) -> Result<(), LabelSetError> {
        match self.cwes.iter().find(|c| taxonomy.node(**c).is_none()) {
            Some(&missing) => Err(LabelSetError::NotInTaxonomy(missing)),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSample {
    pub id: String,
    pub code: String,
    pub label: Label,
    pub origin: String,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{0}")]
    Io(JsonlError),
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("label {label} has {have} samples, need {need}")]
    InsufficientLabel { label: Label, have: usize, need: usize },
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    code: String,
    label: String,
    origin: String,
}

/// An ordered, validated list of samples.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    samples: Vec<CodeSample>,
}

impl Dataset {
    /// Validates id uniqueness and non-blank ids and code.
    pub fn new(samples: Vec<CodeSample>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for (i, s) in samples.iter().enumerate() {
            if s.id.is_empty() {
                return Err(CorpusError::MalformedRecord {
                    line: i + 1,
                    reason: "empty id".into(),
                });
            }
            if s.code.trim().is_empty() {
                return Err(CorpusError::MalformedRecord {
                    line: i + 1,
                    reason: format!("sample {:?} has blank code", s.id),
                });
            }
            if !seen.insert(s.id.as_str()) {
                return Err(CorpusError::DuplicateId(s.id.clone()));
            }
        }
        Ok(Self { samples })
    }

    pub fn from_jsonl_str(text: &str, labels: &LabelSet) -> Result<Self, CorpusError> {
        let mut samples = Vec::new();
        let mut seen = HashSet::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawRecord =
                serde_json::from_str(line).map_err(|e| CorpusError::MalformedRecord {
                    line: line_no,
                    reason: e.to_string(),
                })?;
            let label: Label = raw
                .label
                .parse()
                .map_err(|_| CorpusError::UnknownLabel(raw.label.clone()))?;
            if !labels.contains(&label) {
                return Err(CorpusError::UnknownLabel(raw.label));
            }
            if raw.id.is_empty() {
                return Err(CorpusError::MalformedRecord {
                    line: line_no,
                    reason: "empty id".into(),
                });
            }
            if raw.code.trim().is_empty() {
                return Err(CorpusError::MalformedRecord {
                    line: line_no,
                    reason: "blank code".into(),
                });
            }
            if !seen.insert(raw.id.clone()) {
                return Err(CorpusError::DuplicateId(raw.id));
            }
            samples.push(CodeSample {
                id: raw.id,
                code: raw.code,
                label,
                origin: raw.origin,
            });
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[CodeSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples per label, always recomputed from the samples themselves.
    pub fn label_histogram(&self) -> BTreeMap<Label, usize> {
        let mut h = BTreeMap::new();
        for s in &self.samples {
            *h.entry(s.label).or_insert(0) += 1;
        }
        h
    }

    pub fn get(&self, id: &str) -> Option<&CodeSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Rewrites every sample's code, keeping everything else.
    pub fn map_code(&self, mut f: impl FnMut(&str) -> String) -> Dataset {
        Dataset {
            samples: self
                .samples
                .iter()
                .map(|s| CodeSample {
                    code: f(&s.code),
                    ..s.clone()
                })
                .collect(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        jsonl::to_string(&self.samples)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        jsonl::write(path, &self.samples).map_err(CorpusError::Io)
    }
}

pub fn load_dataset(path: &Path, labels: &LabelSet) -> Result<Dataset, CorpusError> {
    let text = jsonl::read_to_string(path).map_err(CorpusError::Io)?;
    Dataset::from_jsonl_str(&text, labels)
}

/// Draws exactly `per_label_test` samples of every label present in `d` into
/// the test set; the remainder is the training set. Both keep input order.
///
/// Labels are visited in ascending order; for each, the positions of its
/// samples are shuffled with one shared [`PortableRng`] seeded by `seed`, and
/// the first `per_label_test` become test members.
pub fn stratified_split(
    d: &Dataset,
    per_label_test: usize,
    seed: u64,
) -> Result<(Dataset, Dataset), CorpusError> {
    let mut by_label: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, s) in d.samples.iter().enumerate() {
        by_label.entry(s.label).or_default().push(i);
    }
    if let Some((label, idx)) = by_label.iter().find(|(_, v)| v.len() < per_label_test) {
        return Err(CorpusError::InsufficientLabel {
            label: *label,
            have: idx.len(),
            need: per_label_test,
        });
    }

    let mut rng = PortableRng::new(seed);
    let mut in_test = vec![false; d.len()];
    for positions in by_label.values_mut() {
        rng.shuffle(positions);
        for &p in &positions[..per_label_test] {
            in_test[p] = true;
        }
    }

    let (test, train): (Vec<_>, Vec<_>) = d
        .samples
        .iter()
        .zip(&in_test)
        .partition(|(_, &t)| t);
    let collect = |v: Vec<(&CodeSample, &bool)>| Dataset {
        samples: v.into_iter().map(|(s, _)| s.clone()).collect(),
    };
    Ok((collect(train), collect(test)))
}

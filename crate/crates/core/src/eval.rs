//! Scoring predictions against ground truth.
//!
//! Every metric is computed as an exact rational and only rounded (half-up,
//! two decimals, as a percentage) when placed in an [`EvalReport`], so
//! reports are byte-stable across platforms.
//!
//! * per-label accuracy: row recall `counts[l][l] / support(l)`; a label with
//!   no samples scores 0
//! * balanced accuracy: unweighted mean of the per-label accuracies
//! * macro-F1: mean of one-vs-rest F1; F1 is 0 when precision or recall has a
//!   zero denominator
//! * FNR / FPR: on the vulnerable-vs-benign collapse, so predicting the wrong
//!   CWE for vulnerable code is not a false negative

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Label, LabelSet};
use crate::taxonomy::{CweTaxonomy, Distance, TaxonomyError};
use crate::textsim::TieBreak;

/// One matched model output, as written by the match stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub raw: String,
    pub label: Label,
    pub word_overlap: usize,
    pub bleu: f64,
    pub tie_broken_by: TieBreak,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("prediction for unknown sample {0:?}")]
    UnknownSample(String),
    #[error("sample {0:?} has no prediction")]
    MissingPrediction(String),
    #[error("sample {0:?} has more than one prediction")]
    DuplicatePrediction(String),
    #[error("label {0} is not in the configured label set")]
    UnknownLabel(Label),
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("report json: {0}")]
    Json(#[from] serde_json::Error),
}

/// What to do with truth samples that received no prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    #[default]
    Error,
    /// Count the sample in its label's support without any predicted label.
    Abstain,
}

/// Rows are ground truth, columns are predictions, both in label-set order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<Label>,
    pub counts: Vec<Vec<u64>>,
    /// Per truth label, samples that had no prediction.
    pub abstained: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(labels: Vec<Label>) -> Self {
        let n = labels.len();
        Self {
            labels,
            counts: vec![vec![0; n]; n],
            abstained: vec![0; n],
        }
    }

    pub fn from_counts(labels: Vec<Label>, counts: Vec<Vec<u64>>) -> Self {
        assert_eq!(labels.len(), counts.len());
        assert!(counts.iter().all(|r| r.len() == labels.len()));
        let n = labels.len();
        Self {
            labels,
            counts,
            abstained: vec![0; n],
        }
    }

    pub fn index_of(&self, l: &Label) -> Option<usize> {
        self.labels.iter().position(|x| x == l)
    }

    pub fn support(&self, i: usize) -> u64 {
        self.counts[i].iter().sum::<u64>() + self.abstained[i]
    }

    pub fn total(&self) -> u64 {
        (0..self.labels.len()).map(|i| self.support(i)).sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Off-diagonal mass (abstentions are not misclassifications).
    pub fn misclassified(&self) -> u64 {
        let predicted: u64 = self.counts.iter().flatten().sum();
        predicted - self.correct()
    }

    /// Collapse into vulnerable (any CWE) vs benign.
    pub fn collapse_binary(&self) -> BinaryConfusion {
        let mut b = BinaryConfusion::default();
        for (i, t) in self.labels.iter().enumerate() {
            for (j, p) in self.labels.iter().enumerate() {
                let c = self.counts[i][j];
                match (t.is_benign(), p.is_benign()) {
                    (false, false) => b.vuln_as_vuln += c,
                    (false, true) => b.vuln_as_benign += c,
                    (true, false) => b.benign_as_vuln += c,
                    (true, true) => b.benign_as_benign += c,
                }
            }
            if t.is_benign() {
                b.benign_abstained += self.abstained[i];
            } else {
                b.vuln_abstained += self.abstained[i];
            }
        }
        b
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BinaryConfusion {
    pub vuln_as_vuln: u64,
    pub vuln_as_benign: u64,
    pub benign_as_vuln: u64,
    pub benign_as_benign: u64,
    pub vuln_abstained: u64,
    pub benign_abstained: u64,
}

impl BinaryConfusion {
    pub fn fnr(&self) -> BigRational {
        ratio(
            self.vuln_as_benign,
            self.vuln_as_vuln + self.vuln_as_benign + self.vuln_abstained,
        )
    }

    pub fn fpr(&self) -> BigRational {
        ratio(
            self.benign_as_vuln,
            self.benign_as_vuln + self.benign_as_benign + self.benign_abstained,
        )
    }
}

/// `num / den`, or 0 when `den == 0`.
fn ratio(num: u64, den: u64) -> BigRational {
    if den == 0 {
        BigRational::zero()
    } else {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }
}

/// Tallies predictions into a matrix over `labels`.
pub fn confusion(
    preds: &[PredictionRecord],
    truth: &Dataset,
    labels: &LabelSet,
    missing: MissingPolicy,
) -> Result<ConfusionMatrix, EvalError> {
    let mut cm = ConfusionMatrix::zeros(labels.labels());
    let truth_by_id: HashMap<&str, Label> =
        truth.samples().iter().map(|s| (s.id.as_str(), s.label)).collect();

    let mut sorted: Vec<&PredictionRecord> = preds.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut predicted: HashMap<&str, Label> = HashMap::new();
    for p in sorted {
        if !truth_by_id.contains_key(p.id.as_str()) {
            return Err(EvalError::UnknownSample(p.id.clone()));
        }
        if predicted.insert(p.id.as_str(), p.label).is_some() {
            return Err(EvalError::DuplicatePrediction(p.id.clone()));
        }
    }

    for s in truth.samples() {
        let t = labels
            .index_of(&s.label)
            .ok_or(EvalError::UnknownLabel(s.label))?;
        match predicted.get(s.id.as_str()) {
            Some(label) => {
                let p = labels.index_of(label).ok_or(EvalError::UnknownLabel(*label))?;
                cm.counts[t][p] += 1;
            }
            None => match missing {
                MissingPolicy::Error => return Err(EvalError::MissingPrediction(s.id.clone())),
                MissingPolicy::Abstain => cm.abstained[t] += 1,
            },
        }
    }
    Ok(cm)
}

/// Exact (unrounded) metric values as fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub per_label_accuracy: Vec<BigRational>,
    pub per_label_f1: Vec<BigRational>,
    pub balanced_accuracy: BigRational,
    pub micro_accuracy: BigRational,
    pub macro_f1: BigRational,
    pub fnr: BigRational,
    pub fpr: BigRational,
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics, EvalError> {
    let total = cm.total();
    if total == 0 || cm.labels.is_empty() {
        return Err(EvalError::EmptyMatrix);
    }
    let n = cm.labels.len();
    let mut acc = Vec::with_capacity(n);
    let mut f1 = Vec::with_capacity(n);
    for i in 0..n {
        let tp = cm.counts[i][i];
        let support = cm.support(i);
        let predicted: u64 = (0..n).map(|r| cm.counts[r][i]).sum();
        acc.push(ratio(tp, support));
        f1.push(if support == 0 || predicted == 0 {
            BigRational::zero()
        } else {
            // harmonic mean of tp/predicted and tp/support
            ratio(2 * tp, predicted + support)
        });
    }
    let count = BigRational::from_integer(BigInt::from(n));
    let mean = |v: &[BigRational]| v.iter().fold(BigRational::zero(), |a, b| a + b) / &count;
    let binary = cm.collapse_binary();
    Ok(Metrics {
        balanced_accuracy: mean(&acc),
        macro_f1: mean(&f1),
        micro_accuracy: ratio(cm.correct(), total),
        fnr: binary.fnr(),
        fpr: binary.fpr(),
        per_label_accuracy: acc,
        per_label_f1: f1,
    })
}

/// `100 * r` rounded half-up to two decimals.
pub fn percent(r: &BigRational) -> f64 {
    let scaled = r * BigRational::from_integer(BigInt::from(10_000));
    let half = BigRational::new(BigInt::from(1), BigInt::from(2));
    let hundredths = (scaled + half).floor().to_integer();
    hundredths.to_f64().expect("finite") / 100.0
}

/// Misclassification counts bucketed by the hierarchical distance between
/// the true and predicted CWE.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistanceHistogram {
    pub buckets: BTreeMap<u32, u64>,
    /// CWE pairs with no connecting path in the taxonomy.
    pub unreachable: u64,
    /// Errors where truth or prediction is `Benign`.
    pub benign: u64,
}

impl DistanceHistogram {
    pub fn total(&self) -> u64 {
        self.buckets.values().sum::<u64>() + self.unreachable + self.benign
    }
}

pub fn error_by_distance(
    cm: &ConfusionMatrix,
    t: &CweTaxonomy,
) -> Result<DistanceHistogram, EvalError> {
    let mut h = DistanceHistogram::default();
    for (i, truth) in cm.labels.iter().enumerate() {
        for (j, pred) in cm.labels.iter().enumerate() {
            let c = cm.counts[i][j];
            if i == j || c == 0 {
                continue;
            }
            match (truth.cwe(), pred.cwe()) {
                (Some(a), Some(b)) => match t.distance(a, b)? {
                    Distance::Hops(d) => *h.buckets.entry(d).or_insert(0) += c,
                    Distance::Unreachable => h.unreachable += c,
                },
                _ => h.benign += c,
            }
        }
    }
    Ok(h)
}

/// Rounded, serializable evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: u64,
    pub misclassified: u64,
    pub abstained: u64,
    pub balanced_accuracy: f64,
    pub micro_accuracy: f64,
    pub macro_f1: f64,
    pub fnr: f64,
    pub fpr: f64,
    pub per_label_accuracy: IndexMap<Label, f64>,
    pub per_label_f1: IndexMap<Label, f64>,
    pub per_label_support: IndexMap<Label, u64>,
    pub error_by_distance: BTreeMap<u32, u64>,
    pub unreachable_errors: u64,
    pub benign_confusion_errors: u64,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn build(cm: &ConfusionMatrix, taxonomy: &CweTaxonomy) -> Result<Self, EvalError> {
        let m = metrics(cm)?;
        let h = error_by_distance(cm, taxonomy)?;
        let per_label = |v: &[BigRational]| -> IndexMap<Label, f64> {
            cm.labels.iter().copied().zip(v.iter().map(percent)).collect()
        };
        Ok(Self {
            samples: cm.total(),
            misclassified: cm.misclassified(),
            abstained: cm.abstained.iter().sum(),
            balanced_accuracy: percent(&m.balanced_accuracy),
            micro_accuracy: percent(&m.micro_accuracy),
            macro_f1: percent(&m.macro_f1),
            fnr: percent(&m.fnr),
            fpr: percent(&m.fpr),
            per_label_accuracy: per_label(&m.per_label_accuracy),
            per_label_f1: per_label(&m.per_label_f1),
            per_label_support: cm
                .labels
                .iter()
                .enumerate()
                .map(|(i, l)| (*l, cm.support(i)))
                .collect(),
            error_by_distance: h.buckets,
            unreachable_errors: h.unreachable,
            benign_confusion_errors: h.benign,
            confusion: cm.clone(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Per-label table (one row per label) followed by the headline metrics.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Label | Accuracy | F1 | Support |\n|---|---:|---:|---:|\n");
        for (label, acc) in &self.per_label_accuracy {
            out.push_str(&format!(
                "| {} | {:.2} | {:.2} | {} |\n",
                label, acc, self.per_label_f1[label], self.per_label_support[label]
            ));
        }
        out.push_str(&format!(
            "\n- Balanced accuracy: {:.2}\n- Micro accuracy: {:.2}\n- Macro-F1: {:.2}\n- FNR: {:.2}\n- FPR: {:.2}\n",
            self.balanced_accuracy, self.micro_accuracy, self.macro_f1, self.fnr, self.fpr
        ));
        out
    }

    pub fn per_label_csv(&self) -> String {
        let mut out = String::from("label,accuracy,f1,support\n");
        for (label, acc) in &self.per_label_accuracy {
            out.push_str(&format!(
                "{},{:.2},{:.2},{}\n",
                label, acc, self.per_label_f1[label], self.per_label_support[label]
            ));
        }
        out
    }

    /// `distance,count` rows for every populated hop count, then the
    /// `unreachable` and `benign` buckets.
    pub fn distance_csv(&self) -> String {
        let mut out = String::from("distance,count\n");
        for (d, c) in &self.error_by_distance {
            out.push_str(&format!("{d},{c}\n"));
        }
        out.push_str(&format!("unreachable,{}\n", self.unreachable_errors));
        out.push_str(&format!("benign,{}\n", self.benign_confusion_errors));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

/// Writes `r` to `path`. For [`ReportFormat::Csv`], `path` is a directory that
/// receives `per_label.csv` and `distance.csv`.
pub fn emit_report(r: &EvalReport, format: ReportFormat, path: &Path) -> Result<(), EvalError> {
    let write = |p: &Path, body: String| {
        fs::write(p, body).map_err(|source| EvalError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    match format {
        ReportFormat::Json => write(path, r.to_json()),
        ReportFormat::Markdown => write(path, r.to_markdown()),
        ReportFormat::Csv => {
            fs::create_dir_all(path).map_err(|source| EvalError::Io {
                path: path.display().to_string(),
                source,
            })?;
            write(&path.join("per_label.csv"), r.per_label_csv())?;
            write(&path.join("distance.csv"), r.distance_csv())
        }
    }
}

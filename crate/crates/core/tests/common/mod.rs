//! Independent oracles and the acceptance checks built on them.
//!
//! Nothing here calls into the code under test to compute an expected value:
//! the lexer, BLEU, matcher, shortest-path and metrics oracles are separate
//! implementations written directly from the definitions.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use rust_decimal::Decimal;

use svi_core::corpus::{stratified_split, CodeSample};
use svi_core::cost::{self, ApiCostSpec, ArchSpec, GpuCostSpec};
use svi_core::eval::{self, ConfusionMatrix};
use svi_core::pipeline::{run_pipeline, PipelineManifest, RunOptions};
use svi_core::preprocess::{preprocess, PreprocessConfig};
use svi_core::prompt::{response_candidates, ResponseVariant};
use svi_core::taxonomy::{Abstraction, CweNode, Distance, DistanceOptions};
use svi_core::textsim::{self, Matcher, TokenSeq};
use svi_core::{CweId, CweTaxonomy, Dataset, Label, LabelSet};

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

// ---- deterministic test RNG (SplitMix64) ------------------------------

pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `0..n` (modulo bias is irrelevant for test generation).
    pub fn below(&mut self, n: u64) -> u64 {
        self.next() % n
    }

    pub fn pick<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len() as u64) as usize]
    }

    pub fn chance(&mut self, num: u64, den: u64) -> bool {
        self.below(den) < num
    }
}

// ---- reference lexer ------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tok {
    Code(char),
    Comment,
    /// Literal text including its quotes; `closed` is false when it runs to EOF.
    Literal { text: String, closed: bool },
}

fn char_len_at(s: &str, i: usize) -> usize {
    s[i..].chars().next().map_or(1, char::len_utf8)
}

/// Tokenizes C-like source into code characters, comments and literals.
/// Line comments continue over backslash-newline; unterminated literals and
/// block comments run to the end of input.
pub fn ref_lex(s: &str) -> Vec<Tok> {
    let mut toks = Vec::new();
    let mut i = 0;
    let b = s.as_bytes();
    while i < s.len() {
        let rest = &s[i..];
        if rest.starts_with("//") {
            let mut j = i + 2;
            while j < s.len() {
                let r = &s[j..];
                if r.starts_with("\\\n") {
                    j += 2;
                } else if r.starts_with("\\\r\n") {
                    j += 3;
                } else if b[j] == b'\n' {
                    break;
                } else {
                    j += char_len_at(s, j);
                }
            }
            toks.push(Tok::Comment);
            i = j;
        } else if rest.starts_with("/*") {
            i = match s[i + 2..].find("*/") {
                Some(k) => i + 2 + k + 2,
                None => s.len(),
            };
            toks.push(Tok::Comment);
        } else if b[i] == b'"' || b[i] == b'\'' {
            let q = b[i];
            let mut j = i + 1;
            let mut closed = false;
            while j < s.len() {
                if b[j] == b'\\' {
                    j += 1;
                    if j < s.len() {
                        j += char_len_at(s, j);
                    }
                } else if b[j] == q {
                    j += 1;
                    closed = true;
                    break;
                } else {
                    j += char_len_at(s, j);
                }
            }
            toks.push(Tok::Literal {
                text: s[i..j].to_string(),
                closed,
            });
            i = j;
        } else {
            let c = rest.chars().next().unwrap();
            toks.push(Tok::Code(c));
            i += c.len_utf8();
        }
    }
    toks
}

fn layout(c: char) -> bool {
    matches!(c, ' ' | '\t' | '\n' | '\r' | '\x0b' | '\x0c')
}

fn ref_collapse(s: &str) -> String {
    s.split(layout).filter(|w| !w.is_empty()).collect::<Vec<_>>().join(" ")
}

/// Full preprocessing (comments off, whitespace collapsed) via the reference lexer.
pub fn ref_preprocess(s: &str) -> String {
    let mut out = String::new();
    for t in ref_lex(s) {
        match t {
            Tok::Code(c) => out.push(c),
            Tok::Literal { text, .. } => out.push_str(&text),
            Tok::Comment => {
                if out.chars().last().is_some_and(|c| !layout(c)) {
                    out.push(' ');
                }
            }
        }
    }
    ref_collapse(&out)
}

pub fn literals(s: &str) -> Vec<(String, bool)> {
    ref_lex(s)
        .into_iter()
        .filter_map(|t| match t {
            Tok::Literal { text, closed } => Some((text, closed)),
            _ => None,
        })
        .collect()
}

/// Hand-labeled `(input, expected preprocess output)` pairs.
pub const LEXER_CORPUS: [(&str, &str); 30] = [
    ("int x = 1; // c\nint y;", "int x = 1; int y;"),
    ("x = 1; /* c */ y = 2;", "x = 1; y = 2;"),
    ("a/*c*/b", "a b"),
    ("s = \"// not a comment\";", "s = \"// not a comment\";"),
    ("s = \"/* nor this */\";", "s = \"/* nor this */\";"),
    ("c = '/'; d = '*';", "c = '/'; d = '*';"),
    ("c = '\"'; // q", "c = '\"';"),
    ("s = \"esc \\\" // still string\"; t;", "s = \"esc \\\" // still string\"; t;"),
    ("s = \"tab\\there\";", "s = \"tab\\there\";"),
    ("/* leading */int main(){}", "int main(){}"),
    ("int a; /* multi\nline\ncomment */ int b;", "int a; int b;"),
    ("// only comment", ""),
    ("a // line \\\n continued\nb", "a b"),
    ("#include <stdio.h> // io\nint z;", "#include <stdio.h> int z;"),
    ("x = y / z; /* div */", "x = y / z;"),
    ("p = *q/ *r;", "p = *q/ *r;"),
    ("a /* unterminated", "a"),
    ("s = \"unterminated // string", "s = \"unterminated // string"),
    ("\t\tint   x ;\n\n\n  return\tx;", "int x ; return x;"),
    ("a=b/**/c;", "a=b c;"),
    ("url = \"http://example.com\"; // link", "url = \"http://example.com\";"),
    ("ch = '\\''; // esc", "ch = '\\'';"),
    ("x = 1;/*c*/\ny = 2;", "x = 1; y = 2;"),
    ("/**/", ""),
    ("a /* x */ /* y */ b", "a b"),
    ("s = \"a  b\";", "s = \"a b\";"),
    ("a /* a // b */ c", "a c"),
    ("a // x /* y\nb */ c", "a b */ c"),
    ("f(\"/*\", \"*/\");", "f(\"/*\", \"*/\");"),
    ("int *p = &x; /***/ return *p;", "int *p = &x; return *p;"),
];

const FRAGMENTS: [&str; 34] = [
    "int", "x", "y1", "return", "=", ";", "(", ")", "{", "}", "*", "/", "+", " ", "  ", "\t", "\n",
    "\r\n", "//", "/*", "*/", "\"", "'", "\\", "\\\n", "\"a // b\"", "\"/* c */\"", "'\\''",
    "\"\\\"\"", "'/'", "#define N 4", "0x1F", "\"x  \ty\"", "é",
];

pub fn random_c_like(rng: &mut TestRng) -> String {
    let n = 1 + rng.below(40);
    (0..n).map(|_| *rng.pick(&FRAGMENTS)).collect()
}

fn full() -> PreprocessConfig {
    PreprocessConfig::default()
}

/// Output invariants for one input; `Err` describes the first violation.
pub fn preprocess_properties(input: &str) -> Check {
    let out = preprocess(input, &full());
    ensure!(preprocess(&out, &full()) == out, "not idempotent on {input:?}");
    ensure!(
        !out.contains('\n') && !out.contains('\t') && !out.contains("  "),
        "layout whitespace left in {out:?} (input {input:?})"
    );
    ensure!(out == out.trim(), "untrimmed output {out:?}");
    ensure!(
        out == ref_preprocess(input),
        "differs from reference lexer on {input:?}: {out:?} vs {:?}",
        ref_preprocess(input)
    );
    // every literal survives, modulo whitespace collapsing (and trimming of
    // a literal that runs to the end of input)
    let before: Vec<String> = literals(input)
        .into_iter()
        .map(|(t, closed)| {
            let mut collapsed = String::new();
            for c in t.chars() {
                if !layout(c) {
                    collapsed.push(c);
                } else if !collapsed.ends_with(' ') {
                    collapsed.push(' ');
                }
            }
            if closed {
                collapsed
            } else {
                collapsed.trim_end().to_string()
            }
        })
        .collect();
    let after: Vec<String> = literals(&out).into_iter().map(|(t, _)| t).collect();
    ensure!(before == after, "literals changed: {before:?} -> {after:?} (input {input:?})");
    Ok(())
}

pub fn check_preprocessing() -> Check {
    for (i, (input, expected)) in LEXER_CORPUS.iter().enumerate() {
        let got = preprocess(input, &full());
        ensure!(got == *expected, "lexer case {i}: {input:?} -> {got:?}, expected {expected:?}");
        preprocess_properties(input)?;
    }
    let mut rng = TestRng::new(0x5eed_0001);
    for _ in 0..1000 {
        preprocess_properties(&random_c_like(&mut rng))?;
    }
    Ok(())
}

// ---- BLEU oracle ------------------------------------------------------------

fn ngrams(t: &[String], n: usize) -> BTreeMap<Vec<String>, usize> {
    let mut m = BTreeMap::new();
    if t.len() >= n {
        for i in 0..=t.len() - n {
            *m.entry(t[i..i + n].to_vec()).or_insert(0) += 1;
        }
    }
    m
}

fn words(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(String::from)
        .collect()
}

/// Sentence BLEU straight from the definition: product of clipped
/// precisions, geometric mean by `powf`, brevity penalty.
pub fn oracle_bleu(cand: &[String], reference: &[String], max_n: usize) -> f64 {
    let n = max_n.min(cand.len());
    if n == 0 {
        return 0.0;
    }
    let mut product = 1.0f64;
    for k in 1..=n {
        let c = ngrams(cand, k);
        let r = ngrams(reference, k);
        let clipped: usize = c.iter().map(|(g, &x)| x.min(*r.get(g).unwrap_or(&0))).sum();
        if clipped == 0 {
            return 0.0;
        }
        product *= clipped as f64 / (cand.len() - k + 1) as f64;
    }
    let bp = if cand.len() < reference.len() {
        (1.0 - reference.len() as f64 / cand.len() as f64).exp()
    } else {
        1.0
    };
    bp * product.powf(1.0 / n as f64)
}

/// `(candidate, reference, max_n, expected)`; expected values were computed
/// with exact fractions for the precisions.
pub const BLEU_GOLDEN: [(&str, &str, usize, f64); 10] = [
    ("out of bounds", "out of bounds write", 4, 0.7165313105737893),
    ("use after free", "use after free", 4, 1.0),
    ("out of bounds write", "out of bounds read", 4, 0.0),
    ("the code has an out of bounds write", "out of bounds write", 4, 0.345720784641941),
    ("integer overflow", "integer overflow or wraparound", 4, 0.36787944117144233),
    ("use after free use after free", "use after free", 4, 0.0),
    (
        "exposure of sensitive information",
        "exposure of sensitive information to an unauthorized actor",
        4,
        0.36787944117144233,
    ),
    (
        "improper restriction of operation within bounds",
        "improper restriction of operation within bounds of memory buffer",
        4,
        0.6065306597126334,
    ),
    ("out of bounds read and out of bounds write", "out of bounds write", 4, 0.2984745896009823),
    ("the null pointer", "null pointer dereference", 2, 0.5773502691896257),
];

pub fn check_bleu() -> Check {
    for (c, r, n, expected) in BLEU_GOLDEN {
        let got = textsim::bleu(&TokenSeq::new(c), &TokenSeq::new(r), n).map_err(|e| e.to_string())?;
        ensure!((got - expected).abs() < 1e-9, "bleu({c:?}, {r:?}) = {got}, expected {expected}");
    }
    ensure!(
        (BLEU_GOLDEN[0].3 - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-12,
        "brevity-penalty case is not exp(1 - 4/3)"
    );
    let vocab = candidate_vocabulary();
    let mut rng = TestRng::new(0x5eed_0002);
    for _ in 0..500 {
        let x = random_words(&mut rng, &vocab, 1, 10);
        let tx = TokenSeq::new(&x);
        let same = textsim::bleu(&tx, &tx, 4).map_err(|e| e.to_string())?;
        ensure!(same == 1.0, "bleu(x, x) = {same} for {x:?}");
        // a disjoint pair: the same words with a marker that cannot match
        let y: String = words(&x).iter().map(|w| format!("zz{w}q ")).collect();
        let zero = textsim::bleu(&TokenSeq::new(&y), &tx, 4).map_err(|e| e.to_string())?;
        ensure!(zero == 0.0, "zero-overlap bleu = {zero} for {x:?} / {y:?}");
    }
    Ok(())
}

// ---- matcher oracle -------------------------------------------------------

pub fn default_candidates() -> Vec<(Label, String)> {
    response_candidates(ResponseVariant::DescriptionOnly, &CweTaxonomy::bundled(), &LabelSet::default())
        .expect("bundled descriptions cover the default labels")
}

pub fn candidate_vocabulary() -> Vec<String> {
    let mut v: Vec<String> = default_candidates().iter().flat_map(|(_, d)| words(d)).collect();
    v.sort();
    v.dedup();
    v
}

pub fn random_words(rng: &mut TestRng, vocab: &[String], min: u64, max: u64) -> String {
    let n = min + rng.below(max - min + 1);
    let seps = [" ", "  ", ", ", "-", ". "];
    let mut s = String::new();
    for i in 0..n {
        if i > 0 {
            s.push_str(rng.pick(&seps));
        }
        let w = rng.pick(vocab);
        if rng.chance(1, 5) {
            s.push_str(&w.to_uppercase());
        } else {
            s.push_str(w);
        }
    }
    s
}

fn oracle_overlap(a: &[String], b: &[String]) -> usize {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort();
    y.sort();
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < x.len() && j < y.len() {
        match x[i].cmp(&y[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Scores every candidate and applies overlap → BLEU → smallest label.
pub fn oracle_match(generated: &str, cands: &[(Label, String)]) -> (Label, usize, f64) {
    let g = words(generated);
    let scored: Vec<(Label, usize, f64)> = cands
        .iter()
        .map(|(l, d)| {
            let w = words(d);
            (*l, oracle_overlap(&g, &w), oracle_bleu(&g, &w, 4))
        })
        .collect();
    let best_overlap = scored.iter().map(|s| s.1).max().unwrap();
    let tier: Vec<_> = scored.into_iter().filter(|s| s.1 == best_overlap).collect();
    let best_bleu = tier.iter().map(|s| s.2).fold(f64::MIN, f64::max);
    tier.into_iter()
        .filter(|s| best_bleu - s.2 <= 1e-12)
        .min_by_key(|s| s.0)
        .unwrap()
}

pub fn check_matcher() -> Check {
    let start = Instant::now();
    let cands = default_candidates();
    let matcher = Matcher::new(cands.clone()).map_err(|e| e.to_string())?;
    let vocab = candidate_vocabulary();
    let mut rng = TestRng::new(0x5eed_0003);
    for _ in 0..1000 {
        let s = random_words(&mut rng, &vocab, 1, 12);
        let got = matcher.best_match(&s);
        let (label, overlap, bleu) = oracle_match(&s, &cands);
        ensure!(got.label == label, "{s:?}: matcher {} vs oracle {label}", got.label);
        ensure!(got.word_overlap == overlap, "{s:?}: overlap {} vs {overlap}", got.word_overlap);
        ensure!((got.bleu - bleu).abs() < 1e-9, "{s:?}: bleu {} vs {bleu}", got.bleu);
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(5), "took {took:?}");
    Ok(())
}

// ---- distances ------------------------------------------------------------

/// Random DAG: node `c` may have up to two parents among nodes `< c`;
/// roughly one node in five is a Category.
pub fn random_taxonomy(rng: &mut TestRng, max_nodes: u64) -> CweTaxonomy {
    let n = 2 + rng.below(max_nodes - 1) as u32;
    let nodes = (1..=n).map(|i| CweNode {
        id: CweId(i),
        description: format!("node {i}"),
        abstraction: if rng.chance(1, 5) {
            Abstraction::Category
        } else {
            Abstraction::Base
        },
    });
    let nodes: Vec<CweNode> = nodes.collect();
    let mut edges = Vec::new();
    for c in 2..=n {
        for _ in 0..rng.below(3) {
            let p = 1 + rng.below(u64::from(c - 1)) as u32;
            edges.push((CweId(c), CweId(p)));
        }
    }
    CweTaxonomy::new(nodes, edges).expect("edges point to smaller ids, so acyclic")
}

/// All-pairs hop counts; only non-Category nodes may serve as intermediates
/// unless `include_categories`.
pub fn floyd_warshall(t: &CweTaxonomy, include_categories: bool) -> HashMap<(CweId, CweId), u32> {
    let ids: Vec<CweId> = t.nodes().map(|n| n.id).collect();
    let idx: HashMap<CweId, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let n = ids.len();
    const INF: u32 = u32::MAX / 4;
    let mut d = vec![vec![INF; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for (c, p) in t.child_of() {
        let (a, b) = (idx[&c], idx[&p]);
        d[a][b] = 1;
        d[b][a] = 1;
    }
    for k in 0..n {
        let cat = t.node(ids[k]).unwrap().abstraction == Abstraction::Category;
        if cat && !include_categories {
            continue;
        }
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    let mut out = HashMap::new();
    for i in 0..n {
        for j in 0..n {
            if d[i][j] < INF {
                out.insert((ids[i], ids[j]), d[i][j]);
            }
        }
    }
    out
}

pub fn check_distances() -> Check {
    let t = CweTaxonomy::bundled();
    let d = t.distance(CweId(125), CweId(119)).map_err(|e| e.to_string())?;
    ensure!(d == Distance::Hops(1), "d(125,119) = {d}");
    let labels = LabelSet::default();
    let m = t.distance_matrix(labels.cwes()).map_err(|e| e.to_string())?;
    let n = labels.cwes().len();
    for i in 0..n {
        ensure!(m.get(i, i) == Distance::Hops(0), "diagonal {i} is {}", m.get(i, i));
        for j in 0..n {
            ensure!(m.get(i, j) == m.get(j, i), "asymmetric at ({i},{j})");
        }
    }
    let mut rng = TestRng::new(0x5eed_0004);
    for round in 0..100 {
        let t = random_taxonomy(&mut rng, 50);
        for include_categories in [false, true] {
            let fw = floyd_warshall(&t, include_categories);
            let opts = DistanceOptions { include_categories };
            let ids: Vec<CweId> = t.nodes().map(|n| n.id).collect();
            let m = t.distance_matrix_with(&ids, opts).map_err(|e| e.to_string())?;
            for (i, &a) in ids.iter().enumerate() {
                for (j, &b) in ids.iter().enumerate() {
                    let expected = fw.get(&(a, b)).map_or(Distance::Unreachable, |&h| Distance::Hops(h));
                    ensure!(
                        m.get(i, j) == expected,
                        "dag {round} ({include_categories}): d({a},{b}) bfs {} vs fw {expected}",
                        m.get(i, j)
                    );
                }
            }
            let (a, b) = (*rng.pick(&ids), *rng.pick(&ids));
            let single = t.distance_with(a, b, opts).map_err(|e| e.to_string())?;
            ensure!(single == m.get(a.0 as usize - 1, b.0 as usize - 1), "pairwise and matrix disagree");
        }
    }
    Ok(())
}

// ---- metrics oracle -----------------------------------------------------

fn q(num: u64, den: u64) -> BigRational {
    if den == 0 {
        BigRational::zero()
    } else {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }
}

pub struct OracleMetrics {
    pub balanced_accuracy: BigRational,
    pub macro_f1: BigRational,
    pub fnr: BigRational,
    pub fpr: BigRational,
}

/// Expands the matrix into individual `(truth, prediction)` samples and
/// scores them one at a time.
pub fn oracle_metrics(labels: &[Label], counts: &[Vec<u64>]) -> OracleMetrics {
    let mut samples: Vec<(Label, Label)> = Vec::new();
    for (i, row) in counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            for _ in 0..c {
                samples.push((labels[i], labels[j]));
            }
        }
    }
    let k = BigRational::from_integer(BigInt::from(labels.len()));
    let mut recall_sum = BigRational::zero();
    let mut f1_sum = BigRational::zero();
    for &l in labels {
        let (mut tp, mut fp, mut fneg) = (0, 0, 0);
        for &(t, p) in &samples {
            match (t == l, p == l) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fneg += 1,
                _ => {}
            }
        }
        recall_sum += q(tp, tp + fneg);
        // F1 = 2PR/(P+R) = 2tp / (2tp + fp + fn), zero when undefined
        if tp + fp > 0 && tp + fneg > 0 {
            f1_sum += q(2 * tp, 2 * tp + fp + fneg);
        }
    }
    let vulnerable = samples.iter().filter(|(t, _)| *t != Label::Benign).count() as u64;
    let missed = samples
        .iter()
        .filter(|(t, p)| *t != Label::Benign && *p == Label::Benign)
        .count() as u64;
    let benign = samples.iter().filter(|(t, _)| *t == Label::Benign).count() as u64;
    let alarms = samples
        .iter()
        .filter(|(t, p)| *t == Label::Benign && *p != Label::Benign)
        .count() as u64;
    OracleMetrics {
        balanced_accuracy: recall_sum / &k,
        macro_f1: f1_sum / &k,
        fnr: q(missed, vulnerable),
        fpr: q(alarms, benign),
    }
}

pub fn random_counts(rng: &mut TestRng, n: usize) -> Vec<Vec<u64>> {
    (0..n)
        .map(|_| {
            (0..n)
                .map(|_| if rng.chance(1, 4) { 0 } else { rng.below(20) })
                .collect()
        })
        .collect()
}

pub fn check_metrics() -> Check {
    let labels = LabelSet::default().labels();
    let mut rng = TestRng::new(0x5eed_0005);
    for round in 0..100 {
        let mut counts = random_counts(&mut rng, labels.len());
        counts[0][0] += 1; // never empty
        let cm = ConfusionMatrix::from_counts(labels.clone(), counts.clone());
        let m = eval::metrics(&cm).map_err(|e| e.to_string())?;
        let o = oracle_metrics(&labels, &counts);
        ensure!(m.balanced_accuracy == o.balanced_accuracy, "round {round}: balanced accuracy");
        ensure!(m.macro_f1 == o.macro_f1, "round {round}: macro-F1");
        ensure!(m.fnr == o.fnr, "round {round}: FNR");
        ensure!(m.fpr == o.fpr, "round {round}: FPR");
    }

    let n = labels.len();
    let perfect: Vec<Vec<u64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 7 } else { 0 }).collect())
        .collect();
    let m = eval::metrics(&ConfusionMatrix::from_counts(labels.clone(), perfect)).map_err(|e| e.to_string())?;
    let got = [&m.balanced_accuracy, &m.macro_f1, &m.fnr, &m.fpr].map(eval::percent);
    ensure!(got == [100.0, 100.0, 0.0, 0.0], "perfect prediction gave {got:?}");

    // every sample predicted benign
    let benign = n - 1;
    let all_benign: Vec<Vec<u64>> = (0..n)
        .map(|_| (0..n).map(|j| if j == benign { 5 } else { 0 }).collect())
        .collect();
    let m = eval::metrics(&ConfusionMatrix::from_counts(labels, all_benign)).map_err(|e| e.to_string())?;
    let got = [eval::percent(&m.fnr), eval::percent(&m.fpr)];
    ensure!(got == [100.0, 0.0], "all-benign prediction gave (FNR, FPR) = {got:?}");
    Ok(())
}

pub fn check_error_by_distance() -> Check {
    let labels = LabelSet::default().labels();
    let t = CweTaxonomy::bundled();
    let mut rng = TestRng::new(0x5eed_0006);
    for round in 0..100 {
        let counts = random_counts(&mut rng, labels.len());
        let off_diagonal: u64 = counts
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().enumerate().filter(move |(j, _)| *j != i).map(|(_, c)| *c))
            .sum();
        let benign_mass: u64 = counts
            .iter()
            .enumerate()
            .flat_map(|(i, r)| {
                let labels = &labels;
                r.iter().enumerate().filter(move |(j, _)| {
                    *j != i && (labels[i] == Label::Benign || labels[*j] == Label::Benign)
                })
            })
            .map(|(_, c)| *c)
            .sum();
        let cm = ConfusionMatrix::from_counts(labels.clone(), counts);
        let h = eval::error_by_distance(&cm, &t).map_err(|e| e.to_string())?;
        let buckets: u64 = h.buckets.values().sum::<u64>() + h.unreachable;
        ensure!(
            buckets + h.benign == off_diagonal,
            "round {round}: {buckets} + {} != {off_diagonal}",
            h.benign
        );
        ensure!(h.benign == benign_mass, "round {round}: benign bucket {} vs {benign_mass}", h.benign);
        ensure!(!h.buckets.contains_key(&0), "round {round}: errors at distance 0");
    }
    Ok(())
}

// ---- split ------------------------------------------------------------------

pub fn synthetic_dataset(per_label: usize) -> Dataset {
    let labels = LabelSet::default().labels();
    let mut samples = Vec::new();
    // interleave labels so that order preservation is meaningful
    for i in 0..per_label {
        for l in &labels {
            samples.push(CodeSample {
                id: format!("{l}-{i}"),
                code: format!("int f{i}(void) {{ return {i}; }}"),
                label: *l,
                origin: "synthetic".into(),
            });
        }
    }
    Dataset::new(samples).expect("unique ids")
}

pub fn check_split() -> Check {
    let d = synthetic_dataset(600);
    let (train, test) = stratified_split(&d, 500, 42).map_err(|e| e.to_string())?;
    for (l, &c) in &test.label_histogram() {
        ensure!(c == 500, "test holds {c} samples of {l}");
    }
    ensure!(test.label_histogram().len() == 10, "test is missing labels");
    for (l, &c) in &train.label_histogram() {
        ensure!(c == 100, "train holds {c} samples of {l}");
    }
    let mut ids: Vec<&str> = train.samples().iter().chain(test.samples()).map(|s| s.id.as_str()).collect();
    ids.sort();
    let before = ids.len();
    ids.dedup();
    ensure!(ids.len() == before, "train and test overlap");
    ensure!(ids.len() == d.len(), "partition is not exhaustive");
    let again = stratified_split(&d, 500, 42).map_err(|e| e.to_string())?;
    ensure!(again == (train.clone(), test.clone()), "equal seeds gave different splits");
    let other = stratified_split(&d, 500, 43).map_err(|e| e.to_string())?;
    ensure!(other.1 != test, "different seeds gave the same split");
    Ok(())
}

// ---- end to end -------------------------------------------------------------

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/e2e")
}

pub const ARTIFACTS: [&str; 14] = [
    "preprocessed.jsonl",
    "train.jsonl",
    "test.jsonl",
    "train_prompts.jsonl",
    "test_prompts.jsonl",
    "raw.jsonl",
    "predictions.jsonl",
    "report.json",
    "report.md",
    "report_csv/per_label.csv",
    "report_csv/distance.csv",
    "run_log.json",
    // inputs are copied verbatim and must stay untouched
    "../dataset.jsonl",
    "../replay.jsonl",
];

/// Copies the fixture into a fresh directory and runs the whole pipeline.
pub fn run_fixture() -> Result<(tempfile::TempDir, PipelineManifest), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for f in ["dataset.jsonl", "replay.jsonl", "manifest.toml"] {
        std::fs::copy(fixture_dir().join(f), dir.path().join(f)).map_err(|e| e.to_string())?;
    }
    let m = PipelineManifest::load(&dir.path().join("manifest.toml")).map_err(|e| e.to_string())?;
    run_pipeline(&m, RunOptions::default()).map_err(|e| e.to_string())?;
    Ok((dir, m))
}

pub fn artifacts(m: &PipelineManifest) -> Result<Vec<(String, Vec<u8>)>, String> {
    ARTIFACTS
        .iter()
        .map(|a| {
            let p = m.out_path(a);
            std::fs::read(&p)
                .map(|b| (a.to_string(), b))
                .map_err(|e| format!("{}: {e}", p.display()))
        })
        .collect()
}

pub fn check_end_to_end() -> Check {
    let start = Instant::now();
    let mut first: Option<Vec<(String, Vec<u8>)>> = None;
    for run in 0..3 {
        let (_dir, m) = run_fixture()?;
        let got = artifacts(&m)?;
        match &first {
            None => first = Some(got),
            Some(f) => {
                for ((name, a), (_, b)) in f.iter().zip(&got) {
                    ensure!(a == b, "run {run}: {name} differs from run 0");
                }
            }
        }
    }
    let first = first.unwrap();
    let golden = fixture_dir().join("golden");
    for (artifact, golden_name) in [
        ("report.json", "report.json"),
        ("report.md", "report.md"),
        ("report_csv/per_label.csv", "per_label.csv"),
        ("report_csv/distance.csv", "distance.csv"),
    ] {
        let want = std::fs::read(golden.join(golden_name)).map_err(|e| e.to_string())?;
        let got = &first.iter().find(|(n, _)| n == artifact).unwrap().1;
        ensure!(*got == want, "{artifact} differs from the golden file");
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(5), "three runs took {took:?}");
    Ok(())
}

// ---- cost -------------------------------------------------------------------

fn dec(s: &str) -> Decimal {
    Decimal::from_str(s).unwrap()
}

/// Integer-cents arithmetic, rounding half up.
fn cents(hundredths_product: u128, scale: u128) -> String {
    let c = (hundredths_product + scale / 2) / scale;
    format!("{}.{:02}", c / 100, c % 100)
}

pub fn check_cost() -> Check {
    let mut rng = TestRng::new(0x5eed_0007);
    for _ in 0..200 {
        let params = 1 + rng.below(1_000_000_000_000);
        let seq = rng.below(100_000);
        let c = cost::flops_macs(&ArchSpec::new("m", params, seq).map_err(|e| e.to_string())?);
        ensure!(c.flops == 2 * c.macs, "FLOPs != 2 x MACs for ({params}, {seq})");
    }
    let codet5 = cost::flops_macs(&ArchSpec::new("codet5", 770_000_000, 1200).map_err(|e| e.to_string())?);
    let reference = 2.81e12;
    let ratio = codet5.flops as f64 / reference;
    ensure!((0.5..=2.0).contains(&ratio), "CodeT5 FLOPs {} is {ratio:.3}x the reference", codet5.flops);

    for i in 0..20 {
        // gpu: hours and rate with two decimals
        let hours_h = u128::from(rng.below(100_000));
        let rate_h = u128::from(rng.below(10_000));
        let gpus = 1 + rng.below(16) as u32;
        let spec = GpuCostSpec::new(
            dec(&format!("{}.{:02}", hours_h / 100, hours_h % 100)),
            gpus,
            dec(&format!("{}.{:02}", rate_h / 100, rate_h % 100)),
        )
        .map_err(|e| e.to_string())?;
        let expected = cents(hours_h * u128::from(gpus) * rate_h, 100);
        let got = cost::gpu_cost(&spec).to_string();
        ensure!(got == expected, "gpu spec {i}: {got} vs {expected}");

        // api: prices in cents per million tokens
        let a = rng.below(50_000_000);
        let b = rng.below(5_000_000);
        let pin = u128::from(rng.below(3_000));
        let pout = u128::from(rng.below(6_000));
        let spec = ApiCostSpec::new(
            a,
            b,
            dec(&format!("{}.{:02}", pin / 100, pin % 100)),
            dec(&format!("{}.{:02}", pout / 100, pout % 100)),
        )
        .map_err(|e| e.to_string())?;
        let expected = cents(u128::from(a) * pin + u128::from(b) * pout, 1_000_000);
        let got = cost::api_cost(&spec).to_string();
        ensure!(got == expected, "api spec {i}: {got} vs {expected}");
    }
    Ok(())
}

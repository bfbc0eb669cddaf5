//! Evaluation statistics: caption sensitivity, word error rate,
//! controllability, usefulness and corpus BLEU.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, DenseArray};
use crate::text::{content_word_set, StopwordList, Vocabulary, END_ID};

/// True iff the sequences differ at any position or in length.
pub fn word_diff(a: &[String], b: &[String]) -> bool {
    a != b
}

/// Word-level Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the reference length.
pub fn wer(reference: &[String], hypothesis: &[String]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Domain("word error rate needs a non-empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// WER for report aggregation: an empty reference scores 0 against an empty
/// hypothesis and 1 otherwise.
fn wer_lenient(reference: &[String], hypothesis: &[String]) -> f64 {
    if reference.is_empty() {
        f64::from(u8::from(!hypothesis.is_empty()))
    } else {
        edit_distance(reference, hypothesis) as f64 / reference.len() as f64
    }
}

/// `round(100·num/den, 2)`, or 0 for an empty denominator.
pub fn percentage(num: u64, den: u64) -> f64 {
    if den == 0 {
        return 0.0;
    }
    (10_000.0 * num as f64 / den as f64).round() / 100.0
}

/// A count pair whose percentage is always derived, never stored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        Self { num, den }
    }

    pub fn pct(&self) -> f64 {
        percentage(self.num, self.den)
    }

    fn bump(&mut self, hit: bool) {
        self.den += 1;
        self.num += u64::from(hit);
    }

    fn cell(&self) -> String {
        format!("{:.2} ({}/{})", self.pct(), self.num, self.den)
    }
}

/// Canonical ordering of method labels in reports: self, unlimited,
/// limited-i by i, additive-φ by φ, control, then anything else by name.
pub fn method_order(a: &str, b: &str) -> Ordering {
    fn key(s: &str) -> (u8, f64) {
        if s == "self" {
            (0, 0.0)
        } else if s == "unlimited" {
            (1, 0.0)
        } else if let Some(i) = s.strip_prefix("limited-").and_then(|v| v.parse().ok()) {
            (2, i)
        } else if let Some(p) = s.strip_prefix("additive-").and_then(|v| v.parse().ok()) {
            (3, p)
        } else if s == "control" {
            (4, 0.0)
        } else {
            (5, 0.0)
        }
    }
    let (ka, kb) = (key(a), key(b));
    ka.0.cmp(&kb.0)
        .then(ka.1.total_cmp(&kb.1))
        .then_with(|| a.cmp(b))
}

/// Labels sorted by [`method_order`].
fn sorted_methods<'a>(labels: impl Iterator<Item = &'a String>) -> Vec<String> {
    let mut v: Vec<String> = labels.cloned().collect::<BTreeSet<_>>().into_iter().collect();
    v.sort_by(|a, b| method_order(a, b));
    v
}

/// One box (or question) decoded under one interface method, with the
/// image's control and self-attending captions alongside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: u64,
    pub source_id: String,
    pub method: String,
    pub box_caption: Vec<String>,
    pub control_caption: Vec<String>,
    pub self_caption: Vec<String>,
    pub category_id: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub method: String,
    pub general: Ratio,
    pub method_diff: Ratio,
    pub mean_wer_general: f64,
    pub mean_wer_method: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub rows: Vec<SensitivityRow>,
}

/// Per method: share of box captions that differ from the self-attending
/// caption (general) and from the control caption (method), with mean WERs.
pub fn sensitivity_report(records: &[CaptionRecord]) -> SensitivityReport {
    let mut acc: HashMap<&str, (SensitivityRow, f64, f64)> = HashMap::new();
    for r in records {
        let e = acc.entry(r.method.as_str()).or_default();
        e.0.general.bump(word_diff(&r.box_caption, &r.self_caption));
        e.0.method_diff.bump(word_diff(&r.box_caption, &r.control_caption));
        e.1 += wer_lenient(&r.self_caption, &r.box_caption);
        e.2 += wer_lenient(&r.control_caption, &r.box_caption);
    }
    let labels: Vec<String> = acc.keys().map(|s| s.to_string()).collect();
    let rows = sorted_methods(labels.iter())
        .into_iter()
        .map(|m| {
            let (mut row, wg, wm) = acc.remove(m.as_str()).expect("label came from the map");
            let n = row.general.den as f64;
            row.method = m;
            row.mean_wer_general = wg / n;
            row.mean_wer_method = wm / n;
            row
        })
        .collect();
    SensitivityReport { rows }
}

impl SensitivityReport {
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14} {:>24} {:>24} {:>10} {:>10}",
            "method", "general %", "method %", "wer gen", "wer meth"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:>24} {:>24} {:>10.2} {:>10.2}",
                r.method,
                r.general.cell(),
                r.method_diff.cell(),
                r.mean_wer_general,
                r.mean_wer_method
            );
        }
        s
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// The `n` nearest vocabulary words to `word` by cosine distance over the
/// embedding rows. Special tokens are never candidates; ties go by id.
pub fn nearest_words(word: &str, vocab: &Vocabulary, embeddings: &DenseArray, n: usize) -> Result<Vec<String>> {
    let id = vocab
        .id(word)
        .filter(|&i| i > END_ID)
        .ok_or_else(|| Error::Domain(format!("word {word:?} is not in the vocabulary")))?;
    if embeddings.rows() < vocab.num_classes() {
        return Err(Error::Dimension(format!(
            "embedding has {} rows for {} classes",
            embeddings.rows(),
            vocab.num_classes()
        )));
    }
    let target = embeddings.row(id);
    let mut scored: Vec<(f64, usize, &str)> = vocab
        .words()
        .filter(|&(i, _)| i != id)
        .map(|(i, w)| (1.0 - cosine(target, embeddings.row(i)), i, w))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(n).map(|(_, _, w)| w.to_string()).collect())
}

/// Category words plus cosine neighbours: the word and its `k − 1` nearest
/// words for single-word names; for compound names each part contributes
/// `⌊(k − 1) / parts⌋` neighbours and every part is included.
pub fn knn_expand(category_name: &str, vocab: &Vocabulary, embeddings: &DenseArray, k: usize) -> Result<BTreeSet<String>> {
    if k == 0 {
        return Err(Error::Domain("k must be at least 1".into()));
    }
    let parts: Vec<&str> = category_name.split_whitespace().collect();
    if parts.is_empty() {
        return Err(Error::Domain("empty category name".into()));
    }
    let per_part = (k - 1) / parts.len();
    let mut out = BTreeSet::new();
    for p in &parts {
        out.extend(nearest_words(p, vocab, embeddings, per_part)?);
        out.insert(p.to_string());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub name: String,
    pub base: Vec<String>,
    pub expansion: BTreeSet<String>,
}

/// Category words and their k-expansions. Categories whose words are not
/// all in the vocabulary are listed as unexpandable and excluded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryLexicon {
    pub k: usize,
    pub entries: BTreeMap<u64, LexiconEntry>,
    pub unexpandable: BTreeMap<u64, String>,
}

impl CategoryLexicon {
    pub fn build<'a>(
        categories: impl IntoIterator<Item = (u64, &'a str)>,
        vocab: &Vocabulary,
        embeddings: &DenseArray,
        k: usize,
    ) -> Result<Self> {
        let mut lex = Self {
            k,
            entries: BTreeMap::new(),
            unexpandable: BTreeMap::new(),
        };
        for (id, name) in categories {
            match knn_expand(name, vocab, embeddings, k) {
                Ok(expansion) => {
                    lex.entries.insert(
                        id,
                        LexiconEntry {
                            name: name.to_string(),
                            base: name.split_whitespace().map(str::to_string).collect(),
                            expansion,
                        },
                    );
                }
                Err(Error::Domain(_)) => {
                    lex.unexpandable.insert(id, name.to_string());
                }
                Err(e) => return Err(e),
            }
        }
        Ok(lex)
    }

    /// Whether `caption` mentions the category at this lexicon's k.
    pub fn matches(&self, category_id: u64, caption: &[String]) -> Option<bool> {
        let e = self.entries.get(&category_id)?;
        Some(if self.k == 1 {
            e.base.iter().all(|w| caption.contains(w))
        } else {
            caption.iter().any(|w| e.expansion.contains(w))
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControllabilityRow {
    pub method: String,
    pub overall: Ratio,
    pub per_category: BTreeMap<u64, Ratio>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControllabilityReport {
    pub k: usize,
    pub distinct: bool,
    pub rows: Vec<ControllabilityRow>,
    pub category_names: BTreeMap<u64, String>,
    pub excluded_records: u64,
}

/// Share of box captions mentioning their box category (or, in distinct
/// mode, of the records whose self caption does not already mention it).
pub fn controllability_report(records: &[CaptionRecord], lexicon: &CategoryLexicon, distinct: bool) -> ControllabilityReport {
    let mut acc: HashMap<&str, ControllabilityRow> = HashMap::new();
    let mut excluded = 0;
    for r in records {
        let Some(cat) = r.category_id else {
            excluded += 1;
            continue;
        };
        let Some(hit) = lexicon.matches(cat, &r.box_caption) else {
            excluded += 1;
            continue;
        };
        if distinct && lexicon.matches(cat, &r.self_caption) == Some(true) {
            continue;
        }
        let row = acc.entry(r.method.as_str()).or_default();
        row.overall.bump(hit);
        row.per_category.entry(cat).or_default().bump(hit);
    }
    let labels: Vec<String> = acc.keys().map(|s| s.to_string()).collect();
    let rows = sorted_methods(labels.iter())
        .into_iter()
        .map(|m| {
            let mut row = acc.remove(m.as_str()).expect("label came from the map");
            row.method = m;
            row
        })
        .collect();
    ControllabilityReport {
        k: lexicon.k,
        distinct,
        rows,
        category_names: lexicon.entries.iter().map(|(id, e)| (*id, e.name.clone())).collect(),
        excluded_records: excluded,
    }
}

impl ControllabilityReport {
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let mode = if self.distinct { " distinct" } else { "" };
        let _ = writeln!(s, "k@{}{mode}", self.k);
        for r in &self.rows {
            let _ = writeln!(s, "{:<14} {:>24}", r.method, r.overall.cell());
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "per category (k@{}{mode})", self.k);
        let mut header = format!("{:<20}", "category");
        for r in &self.rows {
            let _ = write!(header, " {:>22}", r.method);
        }
        let _ = writeln!(s, "{}", header.trim_end());
        for (id, name) in &self.category_names {
            let mut line = format!("{name:<20}");
            for r in &self.rows {
                let cell = r.per_category.get(id).map_or("-".to_string(), Ratio::cell);
                let _ = write!(line, " {cell:>22}");
            }
            let _ = writeln!(s, "{}", line.trim_end());
        }
        if self.excluded_records > 0 {
            let _ = writeln!(s, "excluded records: {}", self.excluded_records);
        }
        s
    }
}

/// One generated caption for a question, at one attention level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsefulnessRecord {
    pub method: String,
    /// `word`, `phrase`, `question`, or `-` for captions without external attention.
    pub level: String,
    pub caption: Vec<String>,
    pub question: Vec<String>,
    pub answer: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UsefulnessRow {
    pub method: String,
    pub level: String,
    pub in_answer: Ratio,
    pub in_question: Ratio,
    pub in_either: Ratio,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UsefulnessReport {
    pub rows: Vec<UsefulnessRow>,
}

fn level_rank(level: &str) -> u8 {
    match level {
        "word" => 0,
        "phrase" => 1,
        "question" => 2,
        _ => 3,
    }
}

/// Whether a caption's stemmed content words meet the answer's, the
/// question's, or either's.
pub fn usefulness_hits(caption: &[String], question: &[String], answer: &[String], stopwords: &StopwordList) -> (bool, bool, bool) {
    let c = content_word_set(caption, stopwords);
    let q = content_word_set(question, stopwords);
    let a = content_word_set(answer, stopwords);
    let in_a = !c.is_disjoint(&a);
    let in_q = !c.is_disjoint(&q);
    (in_a, in_q, in_a || in_q)
}

pub fn usefulness_report(records: &[UsefulnessRecord], stopwords: &StopwordList) -> UsefulnessReport {
    let mut acc: HashMap<(&str, &str), UsefulnessRow> = HashMap::new();
    for r in records {
        let (a, q, e) = usefulness_hits(&r.caption, &r.question, &r.answer, stopwords);
        let row = acc.entry((r.method.as_str(), r.level.as_str())).or_default();
        row.in_answer.bump(a);
        row.in_question.bump(q);
        row.in_either.bump(e);
    }
    let mut rows: Vec<UsefulnessRow> = acc
        .into_iter()
        .map(|((m, l), mut row)| {
            row.method = m.to_string();
            row.level = l.to_string();
            row
        })
        .collect();
    rows.sort_by(|a, b| {
        method_order(&a.method, &b.method)
            .then(level_rank(&a.level).cmp(&level_rank(&b.level)))
            .then_with(|| a.level.cmp(&b.level))
    });
    UsefulnessReport { rows }
}

impl UsefulnessReport {
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14} {:<9} {:>24} {:>24} {:>24}",
            "method", "level", "answer %", "question %", "either %"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:<9} {:>24} {:>24} {:>24}",
                r.method,
                r.level,
                r.in_answer.cell(),
                r.in_question.cell(),
                r.in_either.cell()
            );
        }
        s
    }
}

/// Corpus BLEU-1..4 (×100) with clipped counts and the brevity penalty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BleuScores {
    pub scores: [f64; 4],
    /// Clipped matches and candidate n-gram totals for n = 1..4.
    pub matches: [u64; 4],
    pub totals: [u64; 4],
    pub hypothesis_length: u64,
    pub reference_length: u64,
    pub brevity_penalty: f64,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

pub fn corpus_bleu(hypotheses: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<BleuScores> {
    if hypotheses.is_empty() {
        return Err(Error::Domain("BLEU needs at least one hypothesis".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Dimension(format!(
            "{} hypotheses for {} reference sets",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut out = BleuScores::default();
    for (hyp, refs) in hypotheses.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::Domain("every hypothesis needs at least one reference".into()));
        }
        let c = hyp.len();
        out.hypothesis_length += c as u64;
        let closest = refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(c), r))
            .expect("non-empty references");
        out.reference_length += closest as u64;
        for n in 1..=4 {
            let hc = ngram_counts(hyp, n);
            let mut max_ref: HashMap<&[String], u64> = HashMap::new();
            for r in refs {
                for (g, cnt) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(cnt);
                }
            }
            for (g, cnt) in hc {
                out.totals[n - 1] += cnt;
                out.matches[n - 1] += cnt.min(max_ref.get(g).copied().unwrap_or(0));
            }
        }
    }
    let (c, r) = (out.hypothesis_length as f64, out.reference_length as f64);
    out.brevity_penalty = if c == 0.0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r / c).exp()
    };
    let mut log_sum = 0.0;
    for n in 0..4 {
        if out.matches[n] == 0 || out.totals[n] == 0 {
            // Every higher order is zero too.
            break;
        }
        log_sum += (out.matches[n] as f64 / out.totals[n] as f64).ln();
        out.scores[n] = 100.0 * out.brevity_penalty * (log_sum / (n + 1) as f64).exp();
    }
    Ok(out)
}

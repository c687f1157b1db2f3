//! Automatic evaluation of generated articles.

mod ablation;

pub use ablation::{
    ablation_report, paired_differences, train_variants, AblationReport, AblationRow, VariantKey, VariantModels,
};

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Biography;
use crate::error::{Error, Result};
use crate::pipeline::ArticleDraft;
use crate::retriever::RetrievedEvidence;
use crate::text;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Lowercased alphanumeric tokens; punctuation is ignored.
pub fn rouge_tokens(s: &str) -> Vec<String> {
    text::tokenize(s).into_iter().filter(|t| t.chars().any(char::is_alphanumeric)).collect()
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens<T: PartialEq>(generated: &[T], reference: &[T]) -> RougeScore {
    match (generated.is_empty(), reference.is_empty()) {
        (true, true) => return RougeScore { precision: 1.0, recall: 1.0, f1: 1.0 },
        (true, false) | (false, true) => return RougeScore { precision: 0.0, recall: 0.0, f1: 0.0 },
        _ => {}
    }
    let l = lcs_len(generated, reference) as f64;
    let precision = l / generated.len() as f64;
    let recall = l / reference.len() as f64;
    let f1 = if l == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    RougeScore { precision, recall, f1 }
}

pub fn rouge_l(generated: &str, reference: &str) -> RougeScore {
    rouge_l_tokens(&rouge_tokens(generated), &rouge_tokens(reference))
}

/// Function words dropped before content overlap; pronouns count as content.
pub const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "nor", "of", "in", "on", "at", "to", "for", "from", "by", "with", "as",
    "into", "onto", "about", "than", "that", "this", "these", "those", "is", "are", "was", "were", "be", "been",
    "being", "am", "has", "have", "had", "do", "does", "did", "will", "would", "shall", "should", "can", "could",
    "may", "might", "must", "also", "then", "so", "such", "there", "which", "who", "whom", "whose", "what", "where",
    "when", "while", "not", "no",
];

pub fn content_tokens(s: &str) -> Vec<String> {
    rouge_tokens(s).into_iter().filter(|t| !STOPWORDS.contains(&t.as_str())).collect()
}

/// Multiset F1 between the content tokens of two sentences.
pub fn content_f1(a: &str, b: &str) -> f64 {
    let ta = content_tokens(a);
    let tb = content_tokens(b);
    if ta.is_empty() || tb.is_empty() {
        return if ta.is_empty() && tb.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &tb {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &ta {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / ta.len() as f64;
    let r = overlap as f64 / tb.len() as f64;
    2.0 * p * r / (p + r)
}

pub const EQUIVALENCE_THRESHOLD: f64 = 0.8;

/// Lexical stand-in for an entailment model.
pub fn default_scorer(a: &str, b: &str) -> bool {
    content_f1(a, b) >= EQUIVALENCE_THRESHOLD
}

/// Share of generated sentences with a reference sentence judged
/// equivalent in both directions.
pub fn equivalence_rate(generated: &str, reference: &str, scorer: &dyn Fn(&str, &str) -> bool) -> f64 {
    let gen = text::sentence_split(generated);
    if gen.is_empty() {
        log::warn!("no generated sentences to score");
        return 0.0;
    }
    let refs = text::sentence_split(reference);
    let hits = gen.iter().filter(|g| refs.iter().any(|r| scorer(g, r) && scorer(r, g))).count();
    hits as f64 / gen.len() as f64
}

fn is_capitalized(w: &str) -> bool {
    w.chars().next().is_some_and(char::is_uppercase)
}

/// Runs of capitalized words not at a sentence start, plus sentence-initial
/// runs of two or more words; lowercased.
pub fn default_extractor(text: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for sentence in text::sentence_split(text) {
        let mut run: Vec<String> = Vec::new();
        let mut run_start = 0usize;
        let flush = |run: &mut Vec<String>, start: usize, out: &mut BTreeSet<String>| {
            if !run.is_empty() && (start > 0 || run.len() >= 2) {
                out.insert(run.join(" ").to_lowercase());
            }
            run.clear();
        };
        for (i, raw) in sentence.split_whitespace().enumerate() {
            let lead = raw.trim_start_matches(|c: char| !c.is_alphanumeric());
            let word = lead.trim_end_matches(|c: char| !c.is_alphanumeric());
            if lead.len() < raw.len() {
                flush(&mut run, run_start, &mut out);
            }
            if !word.is_empty() && is_capitalized(word) {
                if run.is_empty() {
                    run_start = i;
                }
                run.push(word.to_string());
            } else {
                flush(&mut run, run_start, &mut out);
            }
            if word.len() < lead.len() {
                flush(&mut run, run_start, &mut out);
            }
        }
        flush(&mut run, run_start, &mut out);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub value: f64,
    /// The reference had no entities; `value` is 1 by convention.
    pub vacuous: bool,
}

fn contains_seq(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Fraction of reference entities mentioned in the generated text.
///
/// An entity counts as mentioned when its lowercased token sequence occurs
/// contiguously in the generated tokens, so lowercase model output is
/// scored fairly.
pub fn entity_coverage(generated: &str, reference: &str, extractor: &dyn Fn(&str) -> BTreeSet<String>) -> Coverage {
    let ents = extractor(reference);
    if ents.is_empty() {
        return Coverage { value: 1.0, vacuous: true };
    }
    let gen = rouge_tokens(generated);
    let found = ents.iter().filter(|e| contains_seq(&gen, &rouge_tokens(e))).count();
    Coverage { value: found as f64 / ents.len() as f64, vacuous: false }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionConcentration {
    /// Selected-sentence count per document.
    pub histogram: BTreeMap<usize, usize>,
    pub max_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationStats {
    pub sections: Vec<SectionConcentration>,
    pub mean_max_fraction: f64,
}

/// How strongly each section's evidence draws on a single document.
/// Sections without evidence are skipped.
pub fn retrieval_concentration(evidence: &[RetrievedEvidence]) -> Result<ConcentrationStats> {
    let mut sections = Vec::new();
    for ev in evidence.iter().filter(|e| !e.is_empty()) {
        let mut histogram = BTreeMap::new();
        for it in &ev.items {
            *histogram.entry(it.doc_index).or_insert(0usize) += 1;
        }
        let max = *histogram.values().max().unwrap();
        sections.push(SectionConcentration { histogram, max_fraction: max as f64 / ev.len() as f64 });
    }
    if sections.is_empty() {
        return Err(Error::EmptyEvidence);
    }
    let mean_max_fraction = sections.iter().map(|s| s.max_fraction).sum::<f64>() / sections.len() as f64;
    Ok(ConcentrationStats { sections, mean_max_fraction })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Rouge,
    Equivalence,
    Coverage,
    Concentration,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Rouge, Metric::Equivalence, Metric::Coverage, Metric::Concentration];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Rouge => "rouge",
            Metric::Equivalence => "equivalence",
            Metric::Coverage => "coverage",
            Metric::Concentration => "concentration",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| Error::Config(format!("unknown metric {s:?}")))
    }
}

/// Parse a comma-separated metric list; `all` selects everything.
pub fn parse_metrics(s: &str) -> Result<Vec<Metric>> {
    if s.trim() == "all" {
        return Ok(Metric::ALL.to_vec());
    }
    let mut out: Vec<Metric> = s.split(',').map(|p| p.trim().parse()).collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArticleMetrics {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<RougeScore>,
    /// F1 per gold section, matched by heading; missing sections score 0.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub section_rouge_l: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub equivalence_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entity_coverage: Option<Coverage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_max_fraction: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeans {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l_precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l_recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub equivalence_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entity_coverage: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_max_fraction: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub query_mode: Option<String>,
    pub granularity: Option<String>,
    pub strategy: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub metrics: Vec<Metric>,
    pub articles: Vec<ArticleMetrics>,
    pub means: CorpusMeans,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Score drafts against the gold biographies they were generated for.
pub fn evaluate(
    drafts: &[ArticleDraft],
    gold: &[Biography],
    metrics: &[Metric],
    meta: ReportMeta,
) -> Result<EvalReport> {
    if drafts.len() != gold.len() {
        return Err(Error::InvalidInput(format!("{} drafts for {} biographies", drafts.len(), gold.len())));
    }
    let want: HashSet<Metric> = metrics.iter().copied().collect();
    let mut articles = Vec::with_capacity(drafts.len());
    for (d, b) in drafts.iter().zip(gold) {
        let gen = d.text();
        let reference = b.article_text();
        let mut a = ArticleMetrics {
            id: b.id.clone(),
            rouge_l: None,
            section_rouge_l: None,
            equivalence_rate: None,
            entity_coverage: None,
            mean_max_fraction: None,
        };
        if want.contains(&Metric::Rouge) {
            a.rouge_l = Some(rouge_l(&gen, &reference));
            a.section_rouge_l = Some(
                b.sections
                    .iter()
                    .map(|s| {
                        d.sections.iter().find(|x| x.heading == s.heading).map_or(0.0, |x| rouge_l(&x.body, &s.text).f1)
                    })
                    .collect(),
            );
        }
        if want.contains(&Metric::Equivalence) {
            a.equivalence_rate = Some(equivalence_rate(&gen, &reference, &default_scorer));
        }
        if want.contains(&Metric::Coverage) {
            a.entity_coverage = Some(entity_coverage(&gen, &reference, &default_extractor));
        }
        if want.contains(&Metric::Concentration) {
            let ev: Vec<RetrievedEvidence> = d.sections.iter().map(|s| s.evidence.clone()).collect();
            a.mean_max_fraction = retrieval_concentration(&ev).ok().map(|c| c.mean_max_fraction);
        }
        articles.push(a);
    }
    let means = CorpusMeans {
        rouge_l_precision: mean(articles.iter().filter_map(|a| a.rouge_l.map(|r| r.precision))),
        rouge_l_recall: mean(articles.iter().filter_map(|a| a.rouge_l.map(|r| r.recall))),
        rouge_l_f1: mean(articles.iter().filter_map(|a| a.rouge_l.map(|r| r.f1))),
        equivalence_rate: mean(articles.iter().filter_map(|a| a.equivalence_rate)),
        entity_coverage: mean(articles.iter().filter_map(|a| a.entity_coverage.map(|c| c.value))),
        mean_max_fraction: mean(articles.iter().filter_map(|a| a.mean_max_fraction)),
    };
    let mut metrics = metrics.to_vec();
    metrics.sort();
    metrics.dedup();
    Ok(EvalReport { meta, metrics, articles, means })
}

fn columns(metrics: &[Metric]) -> Vec<&'static str> {
    let mut cols = Vec::new();
    for m in metrics {
        match m {
            Metric::Rouge => cols.extend(["rouge_l_p", "rouge_l_r", "rouge_l_f1"]),
            Metric::Equivalence => cols.push("equivalence"),
            Metric::Coverage => cols.push("entity_coverage"),
            Metric::Concentration => cols.push("max_fraction"),
        }
    }
    cols
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

impl ArticleMetrics {
    fn values(&self, metrics: &[Metric]) -> Vec<Option<f64>> {
        let mut out = Vec::new();
        for m in metrics {
            match m {
                Metric::Rouge => out.extend([
                    self.rouge_l.map(|r| r.precision),
                    self.rouge_l.map(|r| r.recall),
                    self.rouge_l.map(|r| r.f1),
                ]),
                Metric::Equivalence => out.push(self.equivalence_rate),
                Metric::Coverage => out.push(self.entity_coverage.map(|c| c.value)),
                Metric::Concentration => out.push(self.mean_max_fraction),
            }
        }
        out
    }
}

impl CorpusMeans {
    fn values(&self, metrics: &[Metric]) -> Vec<Option<f64>> {
        let mut out = Vec::new();
        for m in metrics {
            match m {
                Metric::Rouge => out.extend([self.rouge_l_precision, self.rouge_l_recall, self.rouge_l_f1]),
                Metric::Equivalence => out.push(self.equivalence_rate),
                Metric::Coverage => out.push(self.entity_coverage),
                Metric::Concentration => out.push(self.mean_max_fraction),
            }
        }
        out
    }
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned table, values in percent, corpus mean last.
    pub fn render_table(&self) -> String {
        let cols = columns(&self.metrics);
        let id_w = self.articles.iter().map(|a| a.id.len()).max().unwrap_or(0).max(8);
        let mut s = String::new();
        let _ = write!(s, "{:<id_w$}", "article");
        for c in &cols {
            let _ = write!(s, "  {c:>15}");
        }
        s.push('\n');
        let mut row = |label: &str, vals: Vec<Option<f64>>| {
            let _ = write!(s, "{label:<id_w$}");
            for v in vals {
                let _ = write!(s, "  {:>15}", fmt_opt(v));
            }
            s.push('\n');
        };
        for a in &self.articles {
            row(&a.id, a.values(&self.metrics));
        }
        row("mean", self.means.values(&self.metrics));
        s
    }

    /// Raw fractions, one row per article plus a `mean` row.
    pub fn to_csv(&self) -> String {
        let cols = columns(&self.metrics);
        let mut s = format!("article,{}\n", cols.join(","));
        let fmt = |vals: Vec<Option<f64>>| {
            vals.iter().map(|v| v.map_or(String::new(), |x| x.to_string())).collect::<Vec<_>>().join(",")
        };
        for a in &self.articles {
            let _ = writeln!(s, "{},{}", a.id, fmt(a.values(&self.metrics)));
        }
        let _ = writeln!(s, "mean,{}", fmt(self.means.values(&self.metrics)));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retriever::EvidenceItem;

    /// Longest common subsequence by enumerating subsets of the shorter side.
    fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
        let (s, l) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        let mut best = 0;
        for mask in 0u32..(1 << s.len()) {
            let sub: Vec<u8> = (0..s.len()).filter(|i| mask >> i & 1 == 1).map(|i| s[i]).collect();
            if sub.len() <= best {
                continue;
            }
            let mut it = l.iter();
            if sub.iter().all(|c| it.any(|x| x == c)) {
                best = sub.len();
            }
        }
        best
    }

    #[test]
    fn rouge_worked_example() {
        let r = rouge_l("the cat sat on the mat", "the cat lay on a mat");
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l("a b c", "a b c"), RougeScore { precision: 1.0, recall: 1.0, f1: 1.0 });
        assert_eq!(rouge_l("a b", "c d").f1, 0.0);
        assert_eq!(rouge_l("", "").f1, 1.0);
        assert_eq!(rouge_l("", "x").f1, 0.0);
    }

    #[test]
    fn lcs_matches_brute_force_small() {
        let cases: [(&[u8], &[u8]); 4] = [(b"abcbdab", b"bdcaba"), (b"", b"abc"), (b"aaaa", b"aa"), (b"xyz", b"zyx")];
        for (a, b) in cases {
            assert_eq!(lcs_len(a, b), brute_lcs(a, b));
        }
    }

    #[test]
    fn scorer_examples() {
        assert!(default_scorer("She was born in Paris.", "She was born in Paris."));
        assert!(!default_scorer("The cat sat.", "A dog ran."));
        let f = content_f1("she was born in paris in 1901", "she was born in paris");
        let (p, r) = (3.0 / 4.0, 3.0 / 3.0);
        assert!((f - 2.0 * p * r / (p + r)).abs() < 1e-12);
        assert!(default_scorer("she was born in paris in 1901", "she was born in paris"));
    }

    #[test]
    fn equivalence_examples() {
        let t = "Jane was born in Velmora. She worked at the Korvath Institute.";
        assert_eq!(equivalence_rate(t, t, &default_scorer), 1.0);
        let gen = "Jane was born in Velmora. The sky is green today.";
        assert_eq!(equivalence_rate(gen, t, &default_scorer), 0.5);
        assert_eq!(equivalence_rate(t, t, &|_, _| false), 0.0);
        assert_eq!(equivalence_rate("", t, &default_scorer), 0.0);
    }

    #[test]
    fn extractor_examples() {
        let e = default_extractor("She met Marie Curie in Paris.");
        assert_eq!(e, BTreeSet::from(["marie curie".to_string(), "paris".to_string()]));
        assert!(default_extractor("The dog slept.").is_empty());
        let e = default_extractor("Jane Wang was born in Velmora, Ostrand in 1901.");
        assert!(e.contains("jane wang") && e.contains("velmora") && e.contains("ostrand"));
    }

    #[test]
    fn coverage_examples() {
        let r = "She met Marie Curie in Paris.";
        assert_eq!(entity_coverage("marie curie lived in paris", r, &default_extractor).value, 1.0);
        assert_eq!(entity_coverage("she lived in paris", r, &default_extractor).value, 0.5);
        let c = entity_coverage("anything", "the dog slept.", &default_extractor);
        assert!(c.vacuous && c.value == 1.0);
    }

    fn ev(docs: &[usize]) -> RetrievedEvidence {
        RetrievedEvidence {
            items: docs
                .iter()
                .map(|&d| EvidenceItem { doc_index: d, sentence_index: 0, text: "x".into(), score: 0.0, weight: 0.0 })
                .collect(),
            total_words: docs.len(),
        }
    }

    #[test]
    fn concentration_examples() {
        assert_eq!(retrieval_concentration(&[ev(&[3, 3, 3])]).unwrap().mean_max_fraction, 1.0);
        let uniform = retrieval_concentration(&[ev(&[0, 1, 2, 3, 0, 1, 2, 3])]).unwrap();
        assert_eq!(uniform.mean_max_fraction, 0.25);
        assert_eq!(uniform.sections[0].histogram[&2], 2);
        assert!(retrieval_concentration(&[ev(&[])]).is_err());
    }

    #[test]
    fn metric_selection() {
        assert_eq!(parse_metrics("rouge").unwrap(), vec![Metric::Rouge]);
        assert_eq!(parse_metrics("all").unwrap().len(), 4);
        assert!(parse_metrics("bleu").is_err());
    }
}

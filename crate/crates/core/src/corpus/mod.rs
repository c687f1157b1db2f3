//! Biographies with their web evidence: loading, filtering, statistics,
//! and a seeded synthetic generator.

mod synth;

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text;

pub use synth::{is_homonym_doc, synth_generate, synth_records, SynthConfig, SynthFacts, SynthRecord, OCCUPATIONS};

/// Heading of every biography's introductory section.
pub const TOPLEVEL: &str = "toplevel";

/// Default number of hits kept per biography.
pub const DEFAULT_HIT_CAP: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub heading: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvidenceDocument {
    /// Position in the hit list.
    pub doc_index: usize,
    pub url: String,
    pub title: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Biography {
    pub id: String,
    pub name: String,
    pub occupations: Vec<String>,
    pub sections: Vec<Section>,
    pub web_hits: Vec<EvidenceDocument>,
}

impl Biography {
    pub fn validate(&self) -> Result<()> {
        let fail = |message: &str| Err(Error::InvalidBiography { id: self.id.clone(), message: message.into() });
        if self.name.trim().is_empty() {
            return fail("empty name");
        }
        if self.occupations.is_empty() {
            return fail("occupations must be non-empty");
        }
        match self.sections.first() {
            Some(s) if s.heading == TOPLEVEL => {}
            _ => return fail("first section heading must be \"toplevel\""),
        }
        if self.sections.iter().any(|s| s.heading.trim().is_empty()) {
            return fail("empty section heading");
        }
        let mut seen = HashSet::new();
        for d in &self.web_hits {
            if d.url.is_empty() {
                return fail("web hit with empty url");
            }
            if !seen.insert(d.doc_index) {
                return fail("duplicate doc_index");
            }
        }
        Ok(())
    }

    /// All section bodies joined with single spaces.
    pub fn article_text(&self) -> String {
        self.sections.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join(" ")
    }

    pub fn headings(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|s| s.heading.as_str())
    }
}

#[derive(Serialize, Deserialize)]
struct HitRecord {
    url: String,
    title: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct BiographyRecord {
    id: String,
    name: String,
    occupations: Vec<String>,
    sections: Vec<Section>,
    web_hits: Vec<HitRecord>,
}

const RECORD_FIELDS: [&str; 5] = ["id", "name", "occupations", "sections", "web_hits"];

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    /// Reject records carrying fields outside the schema instead of warning.
    pub strict: bool,
}

pub fn load_corpus(path: &Path) -> Result<Vec<Biography>> {
    load_corpus_with(path, LoadOptions::default())
}

pub fn load_corpus_with(path: &Path, opts: LoadOptions) -> Result<Vec<Biography>> {
    let content = fs::read_to_string(path)?;
    parse_corpus(&content, path, opts)
}

pub fn parse_corpus(content: &str, path: &Path, opts: LoadOptions) -> Result<Vec<Biography>> {
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |message: String| Error::Parse { path: path.to_path_buf(), line: line_no, message };
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| perr(e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| perr("expected a JSON object".into()))?;
        for key in obj.keys() {
            if !RECORD_FIELDS.contains(&key.as_str()) {
                if opts.strict {
                    return Err(perr(format!("unknown field {key:?}")));
                }
                log::warn!("{}:{line_no}: ignoring unknown field {key:?}", path.display());
            }
        }
        let rec: BiographyRecord = serde_json::from_value(value).map_err(|e| perr(e.to_string()))?;
        let bio = Biography {
            id: rec.id,
            name: rec.name,
            occupations: rec.occupations,
            sections: rec.sections,
            web_hits: rec
                .web_hits
                .into_iter()
                .enumerate()
                .map(|(doc_index, h)| EvidenceDocument { doc_index, url: h.url, title: h.title, text: h.text })
                .collect(),
        };
        bio.validate().map_err(|e| perr(e.to_string()))?;
        out.push(bio);
    }
    Ok(out)
}

/// One JSON object per biography, in order.
pub fn corpus_to_jsonl(corpus: &[Biography]) -> Result<String> {
    let mut s = String::new();
    for b in corpus {
        let rec = BiographyRecord {
            id: b.id.clone(),
            name: b.name.clone(),
            occupations: b.occupations.clone(),
            sections: b.sections.clone(),
            web_hits: b
                .web_hits
                .iter()
                .map(|d| HitRecord { url: d.url.clone(), title: d.title.clone(), text: d.text.clone() })
                .collect(),
        };
        s.push_str(&serde_json::to_string(&rec)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_corpus(path: &Path, corpus: &[Biography]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(corpus_to_jsonl(corpus)?.as_bytes())?;
    Ok(())
}

fn is_wikipedia(url: &str) -> bool {
    let host = match url::Url::parse(url) {
        Ok(u) => u.host_str().map(str::to_ascii_lowercase),
        Err(_) => None,
    };
    match host {
        Some(h) => h == "wikipedia.org" || h.ends_with(".wikipedia.org"),
        None => false,
    }
}

/// Drop Wikipedia-hosted hits, keep the first `cap` in order, and renumber.
pub fn filter_hits(hits: &[EvidenceDocument], cap: usize) -> Vec<EvidenceDocument> {
    hits.iter()
        .filter(|d| !is_wikipedia(&d.url))
        .take(cap)
        .enumerate()
        .map(|(i, d)| EvidenceDocument { doc_index: i, ..d.clone() })
        .collect()
}

/// Apply [`filter_hits`] to every biography.
pub fn filter_corpus(corpus: &mut [Biography], cap: usize) {
    for b in corpus {
        b.web_hits = filter_hits(&b.web_hits, cap);
    }
}

fn unigram_set(text: &str) -> HashSet<String> {
    text::tokenize(text).into_iter().filter(|t| t.chars().any(char::is_alphanumeric)).collect()
}

/// Share of the biography's distinct word unigrams that occur anywhere in the hits.
pub fn unigram_overlap(biography_text: &str, hits: &[EvidenceDocument]) -> f64 {
    let bio = unigram_set(biography_text);
    if bio.is_empty() {
        return 0.0;
    }
    let mut hit_words = HashSet::new();
    for h in hits {
        hit_words.extend(unigram_set(&h.text));
    }
    bio.iter().filter(|w| hit_words.contains(*w)).count() as f64 / bio.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub biographies: usize,
    pub avg_sections: f64,
    /// Words per section, pooled over every section in the corpus.
    pub avg_section_len: f64,
    pub avg_article_len: f64,
    pub avg_hits: f64,
    pub avg_overlap: f64,
}

pub fn corpus_stats(corpus: &[Biography]) -> Result<DatasetStats> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n = corpus.len() as f64;
    let sections: usize = corpus.iter().map(|b| b.sections.len()).sum();
    let words: usize = corpus.iter().flat_map(|b| &b.sections).map(|s| text::word_count(&s.text)).sum();
    let hits: usize = corpus.iter().map(|b| b.web_hits.len()).sum();
    let overlap: f64 = corpus.iter().map(|b| unigram_overlap(&b.article_text(), &b.web_hits)).sum();
    Ok(DatasetStats {
        biographies: corpus.len(),
        avg_sections: sections as f64 / n,
        avg_section_len: if sections == 0 { 0.0 } else { words as f64 / sections as f64 },
        avg_article_len: words as f64 / n,
        avg_hits: hits as f64 / n,
        avg_overlap: overlap / n,
    })
}

impl DatasetStats {
    /// Plain-text summary laid out like a dataset statistics table.
    pub fn render_table(&self) -> String {
        let rows = [
            ("Biographies", format!("{}", self.biographies)),
            ("Average Number of Sections", format!("{:.1}", self.avg_sections)),
            ("Average Length of a Section", format!("{:.1}", self.avg_section_len)),
            ("Average Length of Total Article", format!("{:.1}", self.avg_article_len)),
            ("Avg Number of Web Hits", format!("{:.1}", self.avg_hits)),
            ("Avg overlap of Web Hits and Biography", format!("{:.1}%", 100.0 * self.avg_overlap)),
        ];
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<w$}  {v:>8}\n")).collect()
    }
}

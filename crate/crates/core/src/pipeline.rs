//! Article generation: toplevel first, then retrieve, generate, and cite one
//! section at a time, following the generated headings.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::citer::{self, CitationList};
use crate::corpus::{filter_hits, Biography, EvidenceDocument, DEFAULT_HIT_CAP, TOPLEVEL};
use crate::error::{Error, Result};
use crate::generator::{self, DecodeConstraints, SectionCache, SectionOutput};
use crate::model::{BioModel, Granularity};
use crate::retriever::{Query, RetrievedEvidence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub max_sections: usize,
    pub constraints: DecodeConstraints,
    pub hit_cap: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { max_sections: 10, constraints: DecodeConstraints::default(), hit_cap: DEFAULT_HIT_CAP }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DraftSection {
    pub heading: String,
    pub body: String,
    pub citations: CitationList,
    /// Sentences the section was generated from.
    pub evidence: RetrievedEvidence,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reference {
    pub doc_index: usize,
    pub url: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EndOfArticle,
    RepeatedHeading,
    MaxSections,
    /// The decoder ran out of room before producing a heading.
    Truncated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArticleDraft {
    pub name: String,
    pub occupations: Vec<String>,
    pub sections: Vec<DraftSection>,
    /// Cited documents in index order.
    pub references: Vec<Reference>,
    pub stop: StopReason,
}

impl ArticleDraft {
    /// Section bodies joined with single spaces.
    pub fn text(&self) -> String {
        self.sections.iter().map(|s| s.body.as_str()).collect::<Vec<_>>().join(" ")
    }
}

/// Called once per generated section.
pub trait SectionObserver {
    /// `consumed` is the memory the section was decoded with; `produced`
    /// is the memory handed to the next section.
    fn on_section(
        &mut self,
        index: usize,
        source: &generator::Source,
        output: &SectionOutput,
        consumed: &SectionCache,
        produced: &SectionCache,
    );
}

impl SectionObserver for () {
    fn on_section(&mut self, _: usize, _: &generator::Source, _: &SectionOutput, _: &SectionCache, _: &SectionCache) {}
}

pub fn write_article(
    name: &str,
    occupations: &[String],
    hits: &[EvidenceDocument],
    model: &BioModel,
    config: &PipelineConfig,
) -> Result<ArticleDraft> {
    write_article_observed(name, occupations, hits, model, config, &mut ())
}

pub fn write_article_observed(
    name: &str,
    occupations: &[String],
    hits: &[EvidenceDocument],
    model: &BioModel,
    config: &PipelineConfig,
    observer: &mut dyn SectionObserver,
) -> Result<ArticleDraft> {
    model.validate()?;
    if config.max_sections == 0 {
        return Err(Error::Config("max_sections must be at least 1".into()));
    }
    config.constraints.validate()?;
    let gcfg = &model.config.generator;
    let max_sections = match model.config.granularity {
        Granularity::WholeArticle => 1,
        Granularity::SectionBySection => config.max_sections,
    };
    let mut heading = TOPLEVEL.to_string();
    let mut seen: HashSet<String> = HashSet::from([heading.clone()]);
    let mut cache = SectionCache::empty(gcfg.dec_layers, gcfg.model_dim);
    let mut sections = Vec::new();
    let mut stop = StopReason::MaxSections;
    for index in 0..max_sections {
        let query = Query::new(name, occupations, &heading, model.config.query_mode);
        let evidence = model.retrieve(&query, hits)?;
        let src = model.source(&query, &evidence);
        let weights = evidence.weights();
        let out = generator::generate_section(gcfg, &model.params, &src, &weights, &cache, &config.constraints)?;
        let next_cache = generator::update_cache(gcfg, &model.params, &src, &weights, &out.tokens, &cache)?;
        observer.on_section(index, &src, &out, &cache, &next_cache);
        cache = next_cache;
        sections.push(DraftSection {
            heading: heading.clone(),
            body: model.vocab.render(&out.body)?,
            citations: citer::attribute(&evidence),
            evidence,
        });
        let next = model.vocab.decode_tokens(&out.heading)?.join(" ");
        if let Some(reason) = stop_reason(&out, &next, &mut seen) {
            stop = reason;
            break;
        }
        heading = next;
    }
    let mut cited: Vec<usize> = sections.iter().flat_map(|s| s.citations.indices().iter().copied()).collect();
    cited.sort_unstable();
    cited.dedup();
    let references = cited
        .into_iter()
        .map(|i| {
            let url = hits.iter().find(|d| d.doc_index == i).map(|d| d.url.clone()).unwrap_or_default();
            Reference { doc_index: i, url }
        })
        .collect();
    Ok(ArticleDraft { name: name.into(), occupations: occupations.to_vec(), sections, references, stop })
}

/// Why generation ends after a section with heading `next`, if it does.
fn stop_reason(out: &SectionOutput, next: &str, seen: &mut HashSet<String>) -> Option<StopReason> {
    if out.finished {
        return Some(StopReason::EndOfArticle);
    }
    if out.forced_stop || next.trim().is_empty() {
        return Some(StopReason::Truncated);
    }
    if !seen.insert(next.to_string()) {
        return Some(StopReason::RepeatedHeading);
    }
    None
}

/// Generate for every biography in order, filtering its hits first.
pub fn write_corpus(corpus: &[Biography], model: &BioModel, config: &PipelineConfig) -> Result<Vec<ArticleDraft>> {
    corpus
        .iter()
        .map(|b| {
            let hits = filter_hits(&b.web_hits, config.hit_cap);
            write_article(&b.name, &b.occupations, &hits, model, config)
        })
        .collect()
}

fn with_citations(body: &str, c: &CitationList) -> String {
    let bracket = citer::render(c);
    match (body.is_empty(), bracket.is_empty()) {
        (_, true) => body.to_string(),
        (true, false) => bracket,
        (false, false) => format!("{body} {bracket}"),
    }
}

/// Plain-text article: toplevel body, `=heading=` sections, then `i. url` references.
pub fn render_article(draft: &ArticleDraft) -> String {
    let mut blocks = Vec::new();
    for (i, s) in draft.sections.iter().enumerate() {
        let body = with_citations(&s.body, &s.citations);
        if i == 0 && s.heading == TOPLEVEL {
            blocks.push(body);
        } else {
            blocks.push(format!("={}=\n{}", s.heading, body));
        }
    }
    if !draft.references.is_empty() {
        let refs: Vec<String> = draft.references.iter().map(|r| format!("{}. {}", r.doc_index + 1, r.url)).collect();
        blocks.push(refs.join("\n"));
    }
    let mut out = blocks.join("\n\n");
    out.push('\n');
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedSection {
    pub heading: String,
    pub body: String,
    pub citations: CitationList,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedArticle {
    pub sections: Vec<ParsedSection>,
    pub references: Vec<Reference>,
}

fn split_citations(line: &str) -> (String, CitationList) {
    if line.ends_with(']') {
        let start = line.rfind('[').unwrap();
        if let Ok(c) = citer::parse(&line[start..]) {
            return (line[..start].trim_end().to_string(), c);
        }
    }
    (line.to_string(), CitationList::default())
}

fn reference_line(line: &str) -> Option<Reference> {
    let (num, url) = line.split_once(". ")?;
    let n: usize = num.parse().ok()?;
    if n == 0 || url.contains(' ') || url.is_empty() {
        return None;
    }
    Some(Reference { doc_index: n - 1, url: url.to_string() })
}

/// Structural inverse of [`render_article`].
pub fn parse_article(text: &str) -> Result<ParsedArticle> {
    let mut blocks: Vec<&str> = text.trim_end_matches('\n').split("\n\n").collect();
    let mut references = Vec::new();
    if blocks.len() > 1 {
        let last = blocks[blocks.len() - 1];
        let refs: Option<Vec<Reference>> = last.lines().map(reference_line).collect();
        if let Some(refs) = refs {
            references = refs;
            blocks.pop();
        }
    }
    let mut sections = Vec::new();
    for (i, block) in blocks.iter().enumerate() {
        let (heading, body_line) = match block.split_once('\n') {
            Some((h, rest)) if h.starts_with('=') && h.ends_with('=') && h.len() > 2 => {
                (h[1..h.len() - 1].to_string(), rest)
            }
            _ if i == 0 => (TOPLEVEL.to_string(), *block),
            _ => return Err(Error::InvalidInput(format!("section {i} has no heading line"))),
        };
        let (body, citations) = split_citations(body_line);
        sections.push(ParsedSection { heading, body, citations });
    }
    Ok(ParsedArticle { sections, references })
}

pub fn write_drafts_jsonl(path: &Path, drafts: &[ArticleDraft]) -> Result<()> {
    let mut s = String::new();
    for d in drafts {
        s.push_str(&serde_json::to_string(d)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_drafts_jsonl(path: &Path) -> Result<Vec<ArticleDraft>> {
    let content = fs::read_to_string(path)?;
    content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn section(heading: &str, body: &str, cites: &[usize]) -> DraftSection {
        DraftSection {
            heading: heading.into(),
            body: body.into(),
            citations: CitationList::new(cites.iter().copied()),
            evidence: RetrievedEvidence::default(),
        }
    }

    fn draft(sections: Vec<DraftSection>) -> ArticleDraft {
        let mut cited: Vec<usize> = sections.iter().flat_map(|s| s.citations.indices().to_vec()).collect();
        cited.sort_unstable();
        cited.dedup();
        ArticleDraft {
            name: "Jane Wang".into(),
            occupations: vec!["physicist".into()],
            references: cited
                .into_iter()
                .map(|i| Reference { doc_index: i, url: format!("https://x.org/{i}") })
                .collect(),
            sections,
            stop: StopReason::EndOfArticle,
        }
    }

    #[test]
    fn single_section_has_no_heading_lines() {
        let d = draft(vec![section(TOPLEVEL, "Jane Wang is a physicist.", &[0])]);
        let text = render_article(&d);
        assert!(!text.lines().any(|l| l.starts_with('=')));
        assert_eq!(text, "Jane Wang is a physicist. [1]\n\n1. https://x.org/0\n");
    }

    #[test]
    fn empty_citations_have_no_bracket() {
        let d = draft(vec![section(TOPLEVEL, "Intro.", &[0]), section("career", "She worked.", &[])]);
        let text = render_article(&d);
        assert!(text.contains("=career=\nShe worked.\n"));
        assert!(!text.contains("She worked. ["));
    }

    #[test]
    fn parse_back_recovers_structure() {
        let d = draft(vec![
            section(TOPLEVEL, "Intro text.", &[0, 2]),
            section("early life", "Born somewhere.", &[]),
            section("career", "Worked hard.", &[3]),
        ]);
        let parsed = parse_article(&render_article(&d)).unwrap();
        assert_eq!(parsed.sections.len(), 3);
        for (p, s) in parsed.sections.iter().zip(&d.sections) {
            assert_eq!(p.heading, s.heading);
            assert_eq!(p.body, s.body);
            assert_eq!(p.citations, s.citations);
        }
        assert_eq!(parsed.references, d.references);
    }

    fn out(finished: bool) -> SectionOutput {
        SectionOutput {
            tokens: vec![],
            body: vec![],
            heading: vec![],
            finished,
            forced_stop: false,
            score: 0.0,
            step_scores: vec![],
        }
    }

    #[test]
    fn repeated_heading_stops_after_second_section() {
        let mut seen = HashSet::from([TOPLEVEL.to_string()]);
        assert_eq!(stop_reason(&out(false), "career", &mut seen), None);
        assert_eq!(stop_reason(&out(false), "career", &mut seen), Some(StopReason::RepeatedHeading));
        assert_eq!(stop_reason(&out(true), "", &mut seen), Some(StopReason::EndOfArticle));
        assert_eq!(stop_reason(&out(false), " ", &mut seen), Some(StopReason::Truncated));
    }

    #[test]
    fn drafts_jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("drafts.jsonl");
        let ds = vec![draft(vec![section(TOPLEVEL, "A.", &[1])]), draft(vec![section(TOPLEVEL, "B.", &[])])];
        write_drafts_jsonl(&p, &ds).unwrap();
        assert_eq!(read_drafts_jsonl(&p).unwrap(), ds);
    }
}

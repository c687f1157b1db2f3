//! Budgeted dot-product evidence selection.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::EvidenceDocument;
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::numerics::{softmax, Binder, Graph, ParamStore, Var};
use crate::text::{self, Vocabulary, SEP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    NameOnly,
    NameOccupation,
    Full,
}

impl QueryMode {
    pub const ALL: [QueryMode; 3] = [QueryMode::NameOnly, QueryMode::NameOccupation, QueryMode::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryMode::NameOnly => "name_only",
            QueryMode::NameOccupation => "name_occupation",
            QueryMode::Full => "full",
        }
    }
}

impl fmt::Display for QueryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QueryMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown query mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub name: String,
    pub occupations: Vec<String>,
    pub heading: String,
    pub mode: QueryMode,
}

impl Query {
    pub fn new(name: &str, occupations: &[String], heading: &str, mode: QueryMode) -> Self {
        Self { name: name.into(), occupations: occupations.to_vec(), heading: heading.into(), mode }
    }

    /// Tokens used to score evidence; components outside the mode are dropped.
    pub fn retrieval_ids(&self, vocab: &Vocabulary) -> Vec<usize> {
        match self.mode {
            QueryMode::NameOnly => vocab.encode(&self.name),
            QueryMode::NameOccupation => {
                let mut ids = vocab.encode(&self.name);
                ids.push(SEP);
                for o in &self.occupations {
                    ids.extend(vocab.encode(o));
                }
                ids
            }
            QueryMode::Full => self.full_ids(vocab),
        }
    }

    /// All three components, regardless of mode.
    pub fn full_ids(&self, vocab: &Vocabulary) -> Vec<usize> {
        encoder::query_ids(vocab, &self.name, &self.occupations, &self.heading)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Flat,
    TwoStage,
    BaselineTruncate,
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Strategy::Flat),
            "two_stage" => Ok(Strategy::TwoStage),
            "baseline_truncate" => Ok(Strategy::BaselineTruncate),
            _ => Err(Error::Config(format!("unknown retrieval strategy {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub top_k_sentences: usize,
    pub max_words: usize,
    pub temperature: f64,
    pub strategy: Strategy,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { top_k_sentences: 40, max_words: 1000, temperature: 1.0, strategy: Strategy::Flat }
    }
}

impl RetrievalConfig {
    /// Same sentence-to-word ratio as the default, sized for short synthetic texts.
    pub fn desk() -> Self {
        Self { top_k_sentences: 6, max_words: 150, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k_sentences == 0 || self.max_words == 0 {
            return Err(Error::Config("retrieval budgets must be positive".into()));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::Config("retrieval temperature must be positive".into()));
        }
        Ok(())
    }
}

/// One evidence sentence before scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub doc_index: usize,
    pub sentence_index: usize,
    pub text: String,
    pub words: usize,
}

pub fn candidates(docs: &[EvidenceDocument]) -> Vec<Candidate> {
    let mut out = Vec::new();
    for d in docs {
        for (i, s) in text::sentence_split(&d.text).into_iter().enumerate() {
            let words = text::word_count(&s);
            out.push(Candidate { doc_index: d.doc_index, sentence_index: i, text: s, words });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub doc_index: usize,
    pub sentence_index: usize,
    pub text: String,
    pub score: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievedEvidence {
    pub items: Vec<EvidenceItem>,
    pub total_words: usize,
}

impl RetrievedEvidence {
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.items.iter().map(|i| i.weight).collect()
    }
}

/// `⟨q, s_i⟩` for every sentence.
pub fn score(query: &[f64], sentences: &[Vec<f64>]) -> Result<Vec<f64>> {
    sentences
        .iter()
        .map(|s| {
            if s.len() != query.len() {
                return Err(Error::Shape(format!("query dim {} vs sentence dim {}", query.len(), s.len())));
            }
            Ok(s.iter().zip(query).map(|(a, b)| a * b).sum())
        })
        .collect()
}

struct Ranked<'a> {
    score: f64,
    cand: &'a Candidate,
    index: usize,
}

impl PartialEq for Ranked<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Ranked<'_> {}
impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ranked<'_> {
    // Max-heap order: higher score first, then earlier provenance.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.cand.doc_index.cmp(&self.cand.doc_index))
            .then_with(|| other.cand.sentence_index.cmp(&self.cand.sentence_index))
    }
}

/// Indices into `cands` chosen under both budgets, best first.
///
/// Sentences are visited by descending score; one that would overflow
/// `max_words` is skipped and the scan continues.
pub fn select_indices(cands: &[Candidate], scores: &[f64], cfg: &RetrievalConfig) -> Result<Vec<usize>> {
    if cands.len() != scores.len() {
        return Err(Error::Shape(format!("{} candidates, {} scores", cands.len(), scores.len())));
    }
    if cands.is_empty() {
        return Err(Error::EmptyEvidence);
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN retrieval score".into()));
    }
    let mut heap: BinaryHeap<Ranked> =
        cands.iter().zip(scores).enumerate().map(|(index, (cand, &score))| Ranked { score, cand, index }).collect();
    let mut picked = Vec::new();
    let mut words = 0;
    while picked.len() < cfg.top_k_sentences && words < cfg.max_words {
        let Some(r) = heap.pop() else { break };
        if words + r.cand.words <= cfg.max_words {
            words += r.cand.words;
            picked.push(r.index);
        }
    }
    Ok(picked)
}

fn assemble(cands: &[Candidate], scores: &[f64], picked: &[usize], temperature: f64) -> Result<RetrievedEvidence> {
    if picked.is_empty() {
        return Ok(RetrievedEvidence::default());
    }
    let raw: Vec<f64> = picked.iter().map(|&i| scores[i]).collect();
    let weights = softmax(&raw, temperature)?;
    let items: Vec<EvidenceItem> = picked
        .iter()
        .zip(weights)
        .map(|(&i, weight)| EvidenceItem {
            doc_index: cands[i].doc_index,
            sentence_index: cands[i].sentence_index,
            text: cands[i].text.clone(),
            score: scores[i],
            weight,
        })
        .collect();
    let total_words = picked.iter().map(|&i| cands[i].words).sum();
    Ok(RetrievedEvidence { items, total_words })
}

/// Flat selection over pre-scored candidates.
pub fn select_scored(cands: &[Candidate], scores: &[f64], cfg: &RetrievalConfig) -> Result<RetrievedEvidence> {
    let picked = select_indices(cands, scores, cfg)?;
    assemble(cands, scores, &picked, cfg.temperature)
}

/// Restrict selection to the document holding the best sentence.
pub fn select_two_stage_scored(
    cands: &[Candidate],
    scores: &[f64],
    cfg: &RetrievalConfig,
) -> Result<RetrievedEvidence> {
    let picked = two_stage_indices(cands, scores, cfg)?;
    assemble(cands, scores, &picked, cfg.temperature)
}

fn two_stage_indices(cands: &[Candidate], scores: &[f64], cfg: &RetrievalConfig) -> Result<Vec<usize>> {
    if cands.is_empty() {
        return Err(Error::EmptyEvidence);
    }
    if cands.len() != scores.len() {
        return Err(Error::Shape(format!("{} candidates, {} scores", cands.len(), scores.len())));
    }
    let mut best: Option<(f64, usize)> = None;
    for (c, &s) in cands.iter().zip(scores) {
        let better = match best {
            None => true,
            Some((bs, bd)) => s > bs || (s == bs && c.doc_index < bd),
        };
        if better {
            best = Some((s, c.doc_index));
        }
    }
    let doc = best.map(|(_, d)| d).unwrap();
    let keep: Vec<usize> = (0..cands.len()).filter(|&i| cands[i].doc_index == doc).collect();
    let sub: Vec<Candidate> = keep.iter().map(|&i| cands[i].clone()).collect();
    let sub_scores: Vec<f64> = keep.iter().map(|&i| scores[i]).collect();
    Ok(select_indices(&sub, &sub_scores, cfg)?.into_iter().map(|j| keep[j]).collect())
}

/// Concatenate documents in order and keep the first `max_tokens` tokens.
pub fn baseline_truncate(docs: &[EvidenceDocument], max_tokens: usize) -> RetrievedEvidence {
    let mut items = Vec::new();
    let mut left = max_tokens;
    for d in docs {
        if left == 0 {
            break;
        }
        let toks = text::tokenize(&d.text);
        if toks.is_empty() {
            continue;
        }
        let take = toks.len().min(left);
        left -= take;
        items.push(EvidenceItem {
            doc_index: d.doc_index,
            sentence_index: 0,
            text: toks[..take].join(" "),
            score: 0.0,
            weight: 0.0,
        });
    }
    let n = items.len();
    for it in &mut items {
        it.weight = 1.0 / n as f64;
    }
    let total_words = items.iter().map(|i| text::word_count(&i.text)).sum();
    RetrievedEvidence { items, total_words }
}

/// Dense retrieval with a fixed set of encoder parameters.
pub struct Retriever<'a> {
    pub encoder: &'a EncoderConfig,
    pub params: &'a ParamStore,
    pub vocab: &'a Vocabulary,
    pub config: &'a RetrievalConfig,
}

impl Retriever<'_> {
    pub fn embed_candidates(&self, cands: &[Candidate]) -> Result<Vec<Vec<f64>>> {
        cands
            .iter()
            .map(|c| {
                let ids = self.vocab.encode(&c.text);
                encoder::encode_sentence(self.encoder, self.params, &ids, (c.doc_index, c.sentence_index))
                    .map(|e| e.vector)
            })
            .collect()
    }

    pub fn query_embedding(&self, query: &Query) -> Result<Vec<f64>> {
        let ids = query.retrieval_ids(self.vocab);
        Ok(encoder::encode_query_ids(self.encoder, self.params, &ids)?.vector)
    }

    /// Select using precomputed candidate embeddings; strategy must be dense.
    pub fn select_embedded(
        &self,
        query: &Query,
        cands: &[Candidate],
        embeddings: &[Vec<f64>],
    ) -> Result<RetrievedEvidence> {
        if cands.is_empty() {
            return Err(Error::EmptyEvidence);
        }
        let scores = score(&self.query_embedding(query)?, embeddings)?;
        match self.config.strategy {
            Strategy::TwoStage => select_two_stage_scored(cands, &scores, self.config),
            _ => select_scored(cands, &scores, self.config),
        }
    }

    /// Flat dense selection.
    pub fn select(&self, query: &Query, docs: &[EvidenceDocument]) -> Result<RetrievedEvidence> {
        let cands = candidates(docs);
        let embs = self.embed_candidates(&cands)?;
        if cands.is_empty() {
            return Err(Error::EmptyEvidence);
        }
        let scores = score(&self.query_embedding(query)?, &embs)?;
        select_scored(&cands, &scores, self.config)
    }

    pub fn select_two_stage(&self, query: &Query, docs: &[EvidenceDocument]) -> Result<RetrievedEvidence> {
        let cands = candidates(docs);
        let embs = self.embed_candidates(&cands)?;
        if cands.is_empty() {
            return Err(Error::EmptyEvidence);
        }
        let scores = score(&self.query_embedding(query)?, &embs)?;
        select_two_stage_scored(&cands, &scores, self.config)
    }

    /// Dispatch on the configured strategy.
    pub fn retrieve(&self, query: &Query, docs: &[EvidenceDocument]) -> Result<RetrievedEvidence> {
        match self.config.strategy {
            Strategy::Flat => self.select(query, docs),
            Strategy::TwoStage => self.select_two_stage(query, docs),
            Strategy::BaselineTruncate => Ok(baseline_truncate(docs, self.config.max_words)),
        }
    }
}

/// Recorded soft weights `softmax(⟨q, s_i⟩ / T)` for the chosen sentences, shaped `[n, 1]`.
pub fn soft_weights_graph(
    g: &mut Graph,
    b: &mut Binder,
    cfg: &EncoderConfig,
    query_ids: &[usize],
    sentence_ids: &[Vec<usize>],
    temperature: f64,
    ctx: &mut Ctx,
) -> Result<Var> {
    if sentence_ids.is_empty() {
        return Err(Error::EmptyEvidence);
    }
    let q = encoder::encode_graph(g, b, cfg, cfg.query_prefix(), query_ids, ctx)?;
    let mut rows = Vec::with_capacity(sentence_ids.len());
    for ids in sentence_ids {
        rows.push(encoder::encode_graph(g, b, cfg, encoder::SENTENCE_PREFIX, ids, ctx)?);
    }
    let s = g.concat_rows(&rows);
    let scores = g.matmul_bt(q, s);
    let w = g.softmax_rows(scores, temperature);
    Ok(g.reshape(w, &[sentence_ids.len(), 1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(doc: usize, sent: usize, words: usize) -> Candidate {
        Candidate { doc_index: doc, sentence_index: sent, text: vec!["w"; words].join(" "), words }
    }

    fn cfg(k: usize, max_words: usize) -> RetrievalConfig {
        RetrievalConfig { top_k_sentences: k, max_words, ..RetrievalConfig::default() }
    }

    #[test]
    fn score_examples() {
        assert_eq!(score(&[1.0, 0.0], &[vec![0.0, 2.0], vec![0.0, -1.0]]).unwrap(), vec![0.0, 0.0]);
        let u = vec![0.6, 0.8];
        assert!((score(&u, std::slice::from_ref(&u)).unwrap()[0] - 1.0).abs() < 1e-12);
        assert!(score(&u, &[vec![1.0]]).is_err());
    }

    #[test]
    fn engineered_scores_pick_top_two() {
        let c = vec![cand(0, 0, 5), cand(1, 0, 5), cand(2, 0, 5)];
        let ev = select_scored(&c, &[0.9, 0.1, 0.5], &cfg(2, 1000)).unwrap();
        let docs: Vec<usize> = ev.items.iter().map(|i| i.doc_index).collect();
        assert_eq!(docs, vec![0, 2]);
        let wsum: f64 = ev.items.iter().map(|i| i.weight).sum();
        assert!((wsum - 1.0).abs() < 1e-9);
        assert!(ev.items[0].weight >= ev.items[1].weight);
    }

    #[test]
    fn word_budget_skips_overflowing_sentences() {
        let c = vec![cand(0, 0, 600), cand(0, 1, 600), cand(1, 0, 600)];
        let ev = select_scored(&c, &[3.0, 2.0, 1.0], &cfg(40, 1000)).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev.total_words, 600);
        let c = vec![cand(0, 0, 600), cand(0, 1, 600), cand(1, 0, 300)];
        let ev = select_scored(&c, &[3.0, 2.0, 1.0], &cfg(40, 1000)).unwrap();
        assert_eq!(ev.len(), 2);
        assert_eq!(ev.total_words, 900);
    }

    #[test]
    fn exhaustive_when_budget_ample() {
        let c: Vec<_> = (0..7).map(|i| cand(i % 3, i, 4)).collect();
        let s: Vec<f64> = (0..7).map(|i| (i as f64 * 1.3).sin()).collect();
        assert_eq!(select_scored(&c, &s, &cfg(40, 1000)).unwrap().len(), 7);
    }

    #[test]
    fn ties_break_by_provenance() {
        let c = vec![cand(2, 0, 1), cand(0, 1, 1), cand(0, 0, 1)];
        let ev = select_scored(&c, &[1.0, 1.0, 1.0], &cfg(2, 100)).unwrap();
        let prov: Vec<_> = ev.items.iter().map(|i| (i.doc_index, i.sentence_index)).collect();
        assert_eq!(prov, vec![(0, 0), (0, 1)]);
    }

    #[test]
    fn empty_candidates_is_error() {
        assert!(matches!(select_scored(&[], &[], &cfg(2, 100)), Err(Error::EmptyEvidence)));
    }

    #[test]
    fn two_stage_restricts_to_best_document() {
        let c = vec![cand(0, 0, 3), cand(0, 1, 3), cand(1, 0, 3), cand(1, 1, 3)];
        let ev = select_two_stage_scored(&c, &[0.9, 0.1, 0.8, 0.7], &cfg(3, 100)).unwrap();
        assert!(ev.items.iter().all(|i| i.doc_index == 0));
        assert_eq!(ev.len(), 2);
        let one_doc = vec![cand(4, 0, 3), cand(4, 1, 3), cand(4, 2, 3)];
        let s = [0.2, 0.7, 0.1];
        assert_eq!(
            select_two_stage_scored(&one_doc, &s, &cfg(2, 100)).unwrap(),
            select_scored(&one_doc, &s, &cfg(2, 100)).unwrap()
        );
    }

    fn doc(i: usize, tokens: usize) -> EvidenceDocument {
        EvidenceDocument {
            doc_index: i,
            url: format!("https://d{i}.com"),
            title: String::new(),
            text: vec!["x"; tokens].join(" "),
        }
    }

    #[test]
    fn baseline_truncation_walkthrough() {
        let ev = baseline_truncate(&[doc(0, 1200), doc(1, 50)], 1000);
        assert_eq!(ev.len(), 1);
        assert_eq!(text::word_count(&ev.items[0].text), 1000);
        let ev = baseline_truncate(&[doc(0, 400), doc(1, 400), doc(2, 400)], 1000);
        let counts: Vec<usize> = ev.items.iter().map(|i| text::word_count(&i.text)).collect();
        assert_eq!(counts, vec![400, 400, 200]);
        assert!(ev.items.iter().all(|i| i.score == 0.0 && (i.weight - 1.0 / 3.0).abs() < 1e-12));
        assert!(baseline_truncate(&[], 1000).is_empty());
    }

    #[test]
    fn query_modes_mask_components() {
        let v = Vocabulary::build(&["ada vell chemist career"], 30).unwrap();
        let q = |m| Query::new("Ada Vell", &["chemist".into()], "career", m);
        assert_eq!(v.decode(&q(QueryMode::NameOnly).retrieval_ids(&v)).unwrap(), "ada vell");
        assert_eq!(v.decode(&q(QueryMode::NameOccupation).retrieval_ids(&v)).unwrap(), "ada vell <sep> chemist");
        assert_eq!(v.decode(&q(QueryMode::Full).retrieval_ids(&v)).unwrap(), "ada vell <sep> chemist <sep> career");
        assert_eq!(q(QueryMode::NameOnly).full_ids(&v), q(QueryMode::Full).full_ids(&v));
        assert_eq!("name_occupation".parse::<QueryMode>().unwrap(), QueryMode::NameOccupation);
    }
}

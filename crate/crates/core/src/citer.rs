//! Per-section citations derived from retrieval provenance.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retriever::RetrievedEvidence;

/// Strictly increasing 0-based document indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CitationList(Vec<usize>);

impl CitationList {
    pub fn new(indices: impl IntoIterator<Item = usize>) -> Self {
        Self(indices.into_iter().collect::<BTreeSet<_>>().into_iter().collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Check every index against a hit list of `num_hits` documents.
    pub fn validate(&self, num_hits: usize) -> Result<()> {
        match self.0.iter().find(|&&i| i >= num_hits) {
            Some(i) => Err(Error::InvalidInput(format!("citation {i} outside {num_hits} hits"))),
            None => Ok(()),
        }
    }
}

/// Documents contributing at least one selected sentence.
pub fn attribute(evidence: &RetrievedEvidence) -> CitationList {
    CitationList::new(evidence.items.iter().map(|i| i.doc_index))
}

/// `"[1,3,4]"` with 1-based numbers; empty lists render as `""`.
pub fn render(citations: &CitationList) -> String {
    if citations.is_empty() {
        return String::new();
    }
    let parts: Vec<String> = citations.0.iter().map(|i| (i + 1).to_string()).collect();
    format!("[{}]", parts.join(","))
}

/// Inverse of [`render`].
pub fn parse(s: &str) -> Result<CitationList> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(CitationList::default());
    }
    let inner = s
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| Error::InvalidInput(format!("not a citation bracket: {s:?}")))?;
    let mut out = Vec::new();
    for part in inner.split(',') {
        let n: usize = part.trim().parse().map_err(|_| Error::InvalidInput(format!("bad citation number {part:?}")))?;
        if n == 0 {
            return Err(Error::InvalidInput("citation numbers start at 1".into()));
        }
        out.push(n - 1);
    }
    if out.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput(format!("citations not strictly increasing: {s:?}")));
    }
    Ok(CitationList(out))
}

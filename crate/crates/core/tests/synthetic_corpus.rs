//! Properties of the synthetic corpus that the ablations rely on.

use std::collections::HashSet;

use biowriter::corpus::{filter_hits, is_homonym_doc, synth_records, SynthConfig};
use biowriter::retriever::{candidates, select_scored, QueryMode, RetrievalConfig};
use biowriter::text::tokenize;

/// Share of a section's planted facts found by a bag-of-words retriever.
fn lexical_recall(mode: QueryMode) -> f64 {
    let (mut hit, mut total) = (0, 0);
    for r in synth_records(7, 40, &SynthConfig::default()) {
        let b = &r.biography;
        let cands = candidates(&filter_hits(&b.web_hits, 20));
        for s in &b.sections {
            let query = match mode {
                QueryMode::NameOnly => b.name.clone(),
                QueryMode::NameOccupation => format!("{} {}", b.name, b.occupations.join(" ")),
                QueryMode::Full => format!("{} {} {}", b.name, b.occupations.join(" "), s.heading),
            };
            let q: HashSet<String> = tokenize(&query).into_iter().collect();
            // Shared words, with a slight preference for shorter sentences on ties.
            let scores: Vec<f64> = cands
                .iter()
                .map(|c| {
                    let t: HashSet<String> = tokenize(&c.text).into_iter().collect();
                    t.intersection(&q).count() as f64 - 0.01 * c.words as f64
                })
                .collect();
            let ev = select_scored(&cands, &scores, &RetrievalConfig::desk()).unwrap();
            let text: String = ev.items.iter().map(|i| i.text.as_str()).collect::<Vec<_>>().join(" ");
            for f in r.facts.planted() {
                if s.text.contains(f) {
                    total += 1;
                    hit += usize::from(text.contains(f));
                }
            }
        }
    }
    hit as f64 / total as f64
}

#[test]
fn richer_queries_find_more_facts_lexically() {
    let name = lexical_recall(QueryMode::NameOnly);
    let occ = lexical_recall(QueryMode::NameOccupation);
    let full = lexical_recall(QueryMode::Full);
    assert!(full >= 0.9, "full {full}");
    assert!(occ >= name, "name+occupation {occ} < name {name}");
    assert!(full > name + 0.3, "full {full} vs name {name}");
}

#[test]
fn distractors_share_the_name_but_not_the_occupation() {
    for r in synth_records(8, 20, &SynthConfig::default()) {
        let b = &r.biography;
        let h = r.homonym.as_ref().expect("distractors are on by default");
        assert!(h.occupations.iter().all(|o| !b.occupations.contains(o)));
        let homonym_docs: Vec<_> = b.web_hits.iter().filter(|d| r.homonym_docs.contains(&d.doc_index)).collect();
        assert!(!homonym_docs.is_empty());
        for d in homonym_docs {
            assert!(is_homonym_doc(b, d), "{}", d.text);
            assert!(d.text.contains(&b.name));
        }
    }
}

#[test]
fn low_evidence_split_drops_facts() {
    let count = |cfg: &SynthConfig| -> usize {
        synth_records(9, 30, cfg)
            .iter()
            .map(|r| {
                let kept = filter_hits(&r.biography.web_hits, 20);
                let hits: String = kept.iter().map(|d| d.text.as_str()).collect::<Vec<_>>().join(" ");
                r.facts.planted().iter().filter(|f| hits.contains(*f)).count()
            })
            .sum()
    };
    assert!(count(&SynthConfig::low_evidence()) < count(&SynthConfig::default()));
}

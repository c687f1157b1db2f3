//! Seeded generator of templated biographies with planted facts.
//!
//! Every fact value is drawn from a fixed pool of invented capitalised
//! names (or a year), appears verbatim in the gold text, and, unless dropped
//! by `evidence_rate`, in exactly one non-Wikipedia hit. Homonym documents
//! describe a same-named person with a different occupation and facts.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Biography, EvidenceDocument, Section, TOPLEVEL};

const FIRST: [&str; 30] = [
    "Ada", "Mira", "Lena", "Ines", "Clara", "Vera", "Nora", "Elsa", "Iris", "Hana", "Maren", "Talia", "Odile", "Petra",
    "Yara", "Liesel", "Renata", "Amara", "Solveig", "Greta", "Anouk", "Zofia", "Helka", "Dara", "Junia", "Kalla",
    "Ottilie", "Rosalind", "Svea", "Tamsin",
];
const LAST: [&str; 30] = [
    "Vell",
    "Marlow",
    "Okafor",
    "Lindqvist",
    "Varga",
    "Tanaka",
    "Moreau",
    "Castellan",
    "Brandt",
    "Novak",
    "Sato",
    "Ferreira",
    "Haldane",
    "Quist",
    "Abara",
    "Delacroix",
    "Eskel",
    "Falk",
    "Grell",
    "Hollis",
    "Ibsen",
    "Jaros",
    "Kovacs",
    "Larkin",
    "Mendes",
    "Nyberg",
    "Orsini",
    "Pryce",
    "Rask",
    "Strand",
];
pub const OCCUPATIONS: [&str; 16] = [
    "physicist",
    "painter",
    "chemist",
    "novelist",
    "architect",
    "botanist",
    "composer",
    "engineer",
    "journalist",
    "sculptor",
    "astronomer",
    "historian",
    "poet",
    "economist",
    "geologist",
    "surgeon",
];
const CITIES: [&str; 30] = [
    "Velmora",
    "Ostrand",
    "Quillan",
    "Brevik",
    "Tamsor",
    "Halvern",
    "Corvel",
    "Drenna",
    "Esmor",
    "Fallowby",
    "Garrion",
    "Hesketh",
    "Ilmar",
    "Jorvale",
    "Kestra",
    "Lunmouth",
    "Marrow",
    "Nesbry",
    "Orlan",
    "Pellam",
    "Quenby",
    "Rushden",
    "Selvar",
    "Thornbury",
    "Ulvik",
    "Varrow",
    "Wendmere",
    "Yarlow",
    "Zennor",
    "Ashby",
];
const EMPLOYERS: [&str; 20] = [
    "Korvath Institute",
    "Almeric University",
    "Dunmore Museum",
    "Pellin Observatory",
    "Castor Academy",
    "Merrow College",
    "Brightwater Laboratory",
    "Solen Conservatory",
    "Ardent Foundation",
    "Halloway Institute",
    "Everholt University",
    "Linden Museum",
    "Oakhurst Academy",
    "Rennick College",
    "Stavros Laboratory",
    "Trelawny Foundation",
    "Umber Observatory",
    "Wexford Conservatory",
    "Ilsen Institute",
    "Norcott University",
];
const AWARDS: [&str; 15] = [
    "Delmar Prize",
    "Orrin Medal",
    "Sable Award",
    "Tessaly Prize",
    "Vantor Medal",
    "Corran Award",
    "Ellery Prize",
    "Frost Medal",
    "Gallant Award",
    "Harrow Prize",
    "Ivers Medal",
    "Juno Award",
    "Kellan Prize",
    "Lorne Medal",
    "Marden Award",
];
const SUBJECTS: [&str; 10] =
    ["botany", "music", "mathematics", "drawing", "astronomy", "chemistry", "poetry", "history", "geometry", "latin"];
const SITES: [&str; 10] = [
    "news.example.org",
    "archive.example.com",
    "peoplefacts.example.net",
    "dailyledger.example.org",
    "biographies.example.com",
    "records.example.net",
    "heritage.example.org",
    "chronicle.example.com",
    "almanac.example.net",
    "gazette.example.org",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Add documents about a same-named person with another occupation.
    pub distractors: bool,
    pub homonym_docs: usize,
    pub noise_docs: usize,
    /// Add a copy of the gold article hosted on wikipedia.org.
    pub wikipedia_mirror: bool,
    /// Probability that each planted fact is kept in the evidence.
    pub evidence_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { distractors: true, homonym_docs: 3, noise_docs: 2, wikipedia_mirror: true, evidence_rate: 1.0 }
    }
}

impl SynthConfig {
    /// Sparse split: half the facts are missing from the hits.
    pub fn low_evidence() -> Self {
        Self { evidence_rate: 0.5, noise_docs: 3, ..Self::default() }
    }
}

/// Planted values for one person.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthFacts {
    pub occupations: Vec<String>,
    pub city: String,
    pub birth_year: String,
    pub employer: String,
    pub award: String,
    pub subject: String,
}

impl SynthFacts {
    /// Fact strings that must be recoverable from evidence.
    pub fn planted(&self) -> [&str; 4] {
        [&self.birth_year, &self.city, &self.employer, &self.award]
    }

    /// Capitalised multi-word and single-word entities in the gold text.
    pub fn entities(&self) -> [&str; 3] {
        [&self.city, &self.employer, &self.award]
    }
}

#[derive(Clone, Debug)]
pub struct SynthRecord {
    pub biography: Biography,
    pub facts: SynthFacts,
    pub homonym: Option<SynthFacts>,
    /// Which planted facts survived into the hits, aligned with [`SynthFacts::planted`].
    pub kept: [bool; 4],
    /// Positions of homonym documents in the hit list.
    pub homonym_docs: Vec<usize>,
}

struct Person<'a> {
    name: &'a str,
    they: &'a str,
    their: &'a str,
    facts: &'a SynthFacts,
}

fn article(word: &str) -> &'static str {
    if word.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

fn occupation_phrase(occs: &[String]) -> String {
    let joined = occs.join(" and ");
    format!("{} {joined}", article(&joined))
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn pick<'a, R: Rng>(rng: &mut R, pool: &[&'a str], avoid: &[&str]) -> &'a str {
    loop {
        let v = *pool.choose(rng).unwrap();
        if !avoid.contains(&v) {
            return v;
        }
    }
}

fn draw_facts<R: Rng>(rng: &mut R, occupations: Vec<String>, avoid: Option<&SynthFacts>) -> SynthFacts {
    let city = pick(rng, &CITIES, &avoid.map(|a| vec![a.city.as_str()]).unwrap_or_default());
    let employer = pick(rng, &EMPLOYERS, &avoid.map(|a| vec![a.employer.as_str()]).unwrap_or_default());
    let award = pick(rng, &AWARDS, &avoid.map(|a| vec![a.award.as_str()]).unwrap_or_default());
    let birth_year = loop {
        let y = rng.gen_range(1850..=1979).to_string();
        if avoid.is_none_or(|a| a.birth_year != y) {
            break y;
        }
    };
    SynthFacts {
        occupations,
        city: city.into(),
        birth_year,
        employer: employer.into(),
        award: award.into(),
        subject: (*SUBJECTS.choose(rng).unwrap()).into(),
    }
}

fn gold_sections(p: &Person) -> Vec<Section> {
    let f = p.facts;
    let they = capitalize(p.they);
    let main = &f.occupations[0];
    vec![
        Section {
            heading: TOPLEVEL.into(),
            text: format!(
                "{} is {} from {}. {they} is known for {} work at the {}.",
                p.name,
                occupation_phrase(&f.occupations),
                f.city,
                p.their,
                f.employer
            ),
        },
        Section {
            heading: "early life".into(),
            text: format!(
                "{} was born in {} in {}. {they} grew up in {} and studied {}.",
                p.name, f.city, f.birth_year, f.city, f.subject
            ),
        },
        Section {
            heading: "career".into(),
            text: format!(
                "{} worked as {} {main} at the {}. {they} received the {} for {} work.",
                p.name,
                article(main),
                f.employer,
                f.award,
                p.their
            ),
        },
    ]
}

/// Fact sentences carry the section's heading words and the occupation, so
/// a query naming both ranks them above the homonym's and the filler.
fn subject_docs(p: &Person, kept: [bool; 4]) -> (String, String) {
    let f = p.facts;
    let [year, city, employer, award] = kept;
    let main = &f.occupations[0];
    let (n, their) = (p.name, p.their);
    let intro = format!("In {their} early life, the {main} {n}");
    let born = match (city, year) {
        (true, true) => format!("{intro} was born in {} in {}.", f.city, f.birth_year),
        (true, false) => format!("{intro} was born in {}.", f.city),
        (false, true) => format!("{intro} was born in {}.", f.birth_year),
        (false, false) => format!("{intro} left few records of {their} birth."),
    };
    let grew = if city {
        format!("{intro} grew up in {} and studied {}.", f.city, f.subject)
    } else {
        format!("{intro} moved often and studied {}.", f.subject)
    };
    let early = format!("{born} {grew} Friends of {n} remember a quiet childhood.");
    let intro = format!("In {their} career, the {main} {n}");
    let worked = if employer {
        format!("{intro} worked at the {}.", f.employer)
    } else {
        format!("{intro} worked for many years.")
    };
    let received =
        if award { format!("{intro} received the {}.", f.award) } else { format!("{intro} received several honours.") };
    let career = format!("{worked} {received} Colleagues of {n} praised {their} dedication.");
    (early, career)
}

fn homonym_texts(p: &Person) -> Vec<String> {
    let f = p.facts;
    let occ = &f.occupations[0];
    let (n, their) = (p.name, p.their);
    vec![
        format!(
            "In {their} early life, the {occ} {n} was born in {} in {}. In {their} early life, the {occ} {n} grew up in {} and studied {}.",
            f.city, f.birth_year, f.city, f.subject
        ),
        format!(
            "In {their} career, the {occ} {n} worked at the {}. In {their} career, the {occ} {n} received the {}.",
            f.employer, f.award
        ),
        format!("{n} is {} {occ} from {}. {n} is not to be confused with other people of the same name.", article(occ), f.city),
    ]
}

fn noise_texts(name: &str, last: &str) -> Vec<String> {
    vec![
        format!("A directory lists several people named {name}. Entries are sorted by region."),
        format!("Genealogy records mention a family named {last}. Some branches kept detailed letters."),
        format!("Local newspapers once printed the name {name}. The archive is only partly digitised."),
        format!("A search for {name} returns many unrelated pages. Few of them are reliable."),
    ]
}

fn url<R: Rng>(rng: &mut R, slug: &str, n: usize) -> String {
    format!("https://{}/{slug}/{n}", SITES.choose(rng).unwrap())
}

/// Generate `n_bios` records; identical seeds give identical output.
pub fn synth_records(seed: u64, n_bios: usize, cfg: &SynthConfig) -> Vec<SynthRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_bios);
    for i in 0..n_bios {
        let first = *FIRST.choose(&mut rng).unwrap();
        let last = *LAST.choose(&mut rng).unwrap();
        let name = format!("{first} {last}");
        let slug = format!("{}-{}", first.to_lowercase(), last.to_lowercase());
        let n_occ = if rng.gen_bool(0.3) { 2 } else { 1 };
        let occs: Vec<String> = OCCUPATIONS.choose_multiple(&mut rng, n_occ).map(|s| s.to_string()).collect();
        let facts = draw_facts(&mut rng, occs.clone(), None);
        let (they, their) = if rng.gen_bool(0.5) { ("she", "her") } else { ("he", "his") };
        let person = Person { name: &name, they, their, facts: &facts };
        let sections = gold_sections(&person);

        let kept: [bool; 4] = std::array::from_fn(|_| cfg.evidence_rate >= 1.0 || rng.gen_bool(cfg.evidence_rate));
        let (early, career) = subject_docs(&person, kept);
        // (title, text, is_homonym)
        let mut docs: Vec<(String, String, bool)> =
            vec![(format!("{name}: early life"), early, false), (format!("{name}: career"), career, false)];

        let homonym = if cfg.distractors {
            let h_occ = pick(&mut rng, &OCCUPATIONS, &occs.iter().map(String::as_str).collect::<Vec<_>>());
            let h_facts = draw_facts(&mut rng, vec![h_occ.to_string()], Some(&facts));
            let (ht, hp) = if rng.gen_bool(0.5) { ("she", "her") } else { ("he", "his") };
            let hp = Person { name: &name, they: ht, their: hp, facts: &h_facts };
            let texts = homonym_texts(&hp);
            for t in texts.into_iter().cycle().take(cfg.homonym_docs) {
                docs.push((format!("{name} ({h_occ})"), t, true));
            }
            Some(h_facts)
        } else {
            None
        };
        let noise = noise_texts(&name, last);
        for t in noise.into_iter().cycle().take(cfg.noise_docs) {
            docs.push((format!("{name} - search result"), t, false));
        }
        docs.shuffle(&mut rng);

        let mut hits: Vec<EvidenceDocument> = Vec::new();
        let mut homonym_docs = Vec::new();
        for (k, (title, text, is_h)) in docs.into_iter().enumerate() {
            if is_h {
                homonym_docs.push(hits.len());
            }
            let u = url(&mut rng, &slug, k);
            hits.push(EvidenceDocument { doc_index: hits.len(), url: u, title, text });
        }
        if cfg.wikipedia_mirror {
            let at = rng.gen_range(0..=hits.len());
            let text = sections.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join(" ");
            let mirror = EvidenceDocument {
                doc_index: at,
                url: format!("https://en.wikipedia.org/wiki/{first}_{last}"),
                title: format!("{name} - Wikipedia"),
                text,
            };
            hits.insert(at, mirror);
            for h in &mut homonym_docs {
                if *h >= at {
                    *h += 1;
                }
            }
            for (j, d) in hits.iter_mut().enumerate() {
                d.doc_index = j;
            }
        }

        out.push(SynthRecord {
            biography: Biography {
                id: format!("synth-{seed}-{i:05}"),
                name,
                occupations: occs,
                sections,
                web_hits: hits,
            },
            facts,
            homonym,
            kept,
            homonym_docs,
        });
    }
    out
}

pub fn synth_generate(seed: u64, n_bios: usize, cfg: &SynthConfig) -> Vec<Biography> {
    synth_records(seed, n_bios, cfg).into_iter().map(|r| r.biography).collect()
}

/// A hit mentions an occupation from the pool that the subject does not have.
pub fn is_homonym_doc(bio: &Biography, doc: &EvidenceDocument) -> bool {
    let words: Vec<String> = crate::text::tokenize(&doc.text);
    OCCUPATIONS.iter().filter(|o| !bio.occupations.iter().any(|b| b == *o)).any(|o| words.iter().any(|w| w == o))
}

//! Sentence and query encoder for dense retrieval.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, BlockDims, Ctx, NoRng};
use crate::numerics::{Binder, Graph, ParamStore, Var};
use crate::text::{Vocabulary, SEP};

pub const SENTENCE_PREFIX: &str = "retr";
pub const QUERY_PREFIX_UNTIED: &str = "retr_q";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    /// Encode queries with the sentence encoder's parameters.
    pub tied_encoders: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { layers: 2, model_dim: 64, heads: 4, ff_dim: 128, max_positions: 128, tied_encoders: true }
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self { layers: 1, model_dim: 64, heads: 2, ff_dim: 64, max_positions: 64, tied_encoders: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.model_dim == 0 || self.heads == 0 || self.ff_dim == 0 || self.max_positions == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "encoder model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    fn dims(&self) -> BlockDims {
        BlockDims { d: self.model_dim, ff: self.ff_dim, depth: self.layers }
    }

    pub fn query_prefix(&self) -> &'static str {
        if self.tied_encoders {
            SENTENCE_PREFIX
        } else {
            QUERY_PREFIX_UNTIED
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceEmbedding {
    pub vector: Vec<f64>,
    /// `(doc_index, sentence_index)`; queries use `(usize::MAX, 0)`.
    pub provenance: (usize, usize),
}

pub const QUERY_PROVENANCE: (usize, usize) = (usize::MAX, 0);

fn init_stack<R: Rng + ?Sized>(
    cfg: &EncoderConfig,
    vocab_size: usize,
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
) {
    let d = cfg.model_dim;
    store.insert(format!("{prefix}.tok"), ParamStore::normal(rng, &[vocab_size, d], 1.0));
    store.insert(format!("{prefix}.pos"), ParamStore::normal(rng, &[cfg.max_positions, d], 0.1));
    for l in 0..cfg.layers {
        nn::init_block(store, rng, &format!("{prefix}.l{l}"), cfg.dims(), false);
        // Residual branches start at zero: an untrained stack then behaves like
        // a normalized bag of embeddings and already ranks by word overlap.
        for out in ["self.wo", "ff.w2"] {
            store.get_mut(&format!("{prefix}.l{l}.{out}")).expect("just inserted").data_mut().fill(0.0);
        }
    }
    nn::init_layer_norm(store, &format!("{prefix}.ln_f"), d);
}

/// Create encoder parameters (one stack, or two when untied).
pub fn init_encoder<R: Rng + ?Sized>(cfg: &EncoderConfig, vocab_size: usize, store: &mut ParamStore, rng: &mut R) {
    init_stack(cfg, vocab_size, store, rng, SENTENCE_PREFIX);
    if !cfg.tied_encoders {
        init_stack(cfg, vocab_size, store, rng, QUERY_PREFIX_UNTIED);
    }
}

/// Recorded encoding of one token sequence: `[1, model_dim]`.
///
/// The pooled vector is divided by `model_dim^(1/4)` so that dot products
/// between two embeddings stay of order one.
pub fn encode_graph(
    g: &mut Graph,
    b: &mut Binder,
    cfg: &EncoderConfig,
    prefix: &str,
    ids: &[usize],
    ctx: &mut Ctx,
) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::InvalidInput("cannot encode an empty token sequence".into()));
    }
    let ids = if ids.len() > cfg.max_positions {
        log::warn!("truncating {}-token sequence to {} positions", ids.len(), cfg.max_positions);
        &ids[..cfg.max_positions]
    } else {
        ids
    };
    let mut x = nn::embed(g, b, &format!("{prefix}.tok"), &format!("{prefix}.pos"), ids, ctx);
    for l in 0..cfg.layers {
        x = nn::encoder_block(g, b, &format!("{prefix}.l{l}"), x, cfg.heads, ctx);
    }
    let x = nn::layer_norm(g, b, &format!("{prefix}.ln_f"), x);
    let pooled = g.mean_rows(x);
    Ok(g.scale(pooled, (cfg.model_dim as f64).powf(-0.25)))
}

fn encode_with(cfg: &EncoderConfig, params: &ParamStore, prefix: &str, ids: &[usize]) -> Result<Vec<f64>> {
    let mut g = Graph::inference();
    let mut b = Binder::new(params);
    let mut rng = NoRng;
    let mut ctx = Ctx::eval(&mut rng);
    let v = encode_graph(&mut g, &mut b, cfg, prefix, ids, &mut ctx)?;
    Ok(g.value(v).data().to_vec())
}

pub fn encode_sentence(
    cfg: &EncoderConfig,
    params: &ParamStore,
    ids: &[usize],
    provenance: (usize, usize),
) -> Result<SentenceEmbedding> {
    Ok(SentenceEmbedding { vector: encode_with(cfg, params, SENTENCE_PREFIX, ids)?, provenance })
}

/// Encode already-composed query ids with the query-side parameters.
pub fn encode_query_ids(cfg: &EncoderConfig, params: &ParamStore, ids: &[usize]) -> Result<SentenceEmbedding> {
    Ok(SentenceEmbedding { vector: encode_with(cfg, params, cfg.query_prefix(), ids)?, provenance: QUERY_PROVENANCE })
}

/// `name SEP occ_1 … occ_n SEP heading`.
pub fn query_ids(vocab: &Vocabulary, name: &str, occupations: &[String], heading: &str) -> Vec<usize> {
    if occupations.is_empty() {
        log::warn!("query for {name:?} has no occupations");
    }
    let mut ids = vocab.encode(name);
    ids.push(SEP);
    for o in occupations {
        ids.extend(vocab.encode(o));
    }
    ids.push(SEP);
    ids.extend(vocab.encode(heading));
    ids
}

pub fn encode_query(
    cfg: &EncoderConfig,
    params: &ParamStore,
    vocab: &Vocabulary,
    name: &str,
    occupations: &[String],
    heading: &str,
) -> Result<SentenceEmbedding> {
    if name.trim().is_empty() || heading.trim().is_empty() {
        return Err(Error::InvalidInput("query needs a name and a heading".into()));
    }
    encode_query_ids(cfg, params, &query_ids(vocab, name, occupations, heading))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (EncoderConfig, ParamStore, Vocabulary) {
        let vocab =
            Vocabulary::build(&["jane wang physicist career toplevel early life painter the cat sat"], 64).unwrap();
        let cfg =
            EncoderConfig { layers: 2, model_dim: 16, heads: 2, ff_dim: 32, max_positions: 32, tied_encoders: true };
        let mut store = ParamStore::new();
        init_encoder(&cfg, vocab.len(), &mut store, &mut ChaCha8Rng::seed_from_u64(7));
        (cfg, store, vocab)
    }

    #[test]
    fn query_token_layout() {
        let (_, _, vocab) = setup();
        let ids = query_ids(&vocab, "Jane Wang", &["physicist".into()], "career");
        let toks = vocab.decode(&ids).unwrap();
        assert_eq!(toks, "jane wang <sep> physicist <sep> career");
        let two = query_ids(&vocab, "Jane Wang", &["physicist".into(), "painter".into()], "career");
        assert_eq!(vocab.decode(&two).unwrap(), "jane wang <sep> physicist painter <sep> career");
    }

    #[test]
    fn embeddings_are_deterministic_and_sized() {
        let (cfg, store, vocab) = setup();
        for text in ["the", "the cat sat", "jane wang the cat sat physicist painter"] {
            let ids = vocab.encode(text);
            let a = encode_sentence(&cfg, &store, &ids, (0, 0)).unwrap();
            let b = encode_sentence(&cfg, &store, &ids, (0, 0)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.vector.len(), cfg.model_dim);
            assert!(a.vector.iter().all(|x| x.is_finite()));
        }
        assert!(encode_sentence(&cfg, &store, &[], (0, 0)).is_err());
    }

    #[test]
    fn order_and_heading_change_embedding() {
        let (cfg, store, vocab) = setup();
        let a = encode_sentence(&cfg, &store, &vocab.encode("the cat sat"), (0, 0)).unwrap();
        let b = encode_sentence(&cfg, &store, &vocab.encode("sat cat the"), (0, 0)).unwrap();
        let diff: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(diff.sqrt() > 0.0);
        let occ = vec!["physicist".to_string()];
        let q1 = encode_query(&cfg, &store, &vocab, "Jane Wang", &occ, "toplevel").unwrap();
        let q2 = encode_query(&cfg, &store, &vocab, "Jane Wang", &occ, "career").unwrap();
        assert_ne!(q1.vector, q2.vector);
    }

    #[test]
    fn long_input_is_truncated() {
        let (cfg, store, vocab) = setup();
        let long: Vec<usize> = std::iter::repeat_n(vocab.id("cat").unwrap(), 100).collect();
        let e = encode_sentence(&cfg, &store, &long, (0, 0)).unwrap();
        let cut = encode_sentence(&cfg, &store, &long[..32], (0, 0)).unwrap();
        assert_eq!(e, cut);
    }

    #[test]
    fn untied_encoders_have_separate_query_parameters() {
        let (mut cfg, _, vocab) = setup();
        cfg.tied_encoders = false;
        let mut store = ParamStore::new();
        init_encoder(&cfg, vocab.len(), &mut store, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(store.contains("retr_q.tok"));
        let ids = vocab.encode("the cat");
        let s = encode_sentence(&cfg, &store, &ids, (0, 0)).unwrap();
        let q = encode_query_ids(&cfg, &store, &ids).unwrap();
        assert_ne!(s.vector, q.vector);
    }
}

//! Evidence-conditioned encoder-decoder with a cross-section memory.
//!
//! The decoder's self-attention sees the current section's states plus the
//! stored layer inputs of the previous section (the [`SectionCache`]).
//! Memory rows enter as constants, so no gradient reaches them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, BlockDims, Ctx, NoRng};
use crate::numerics::{AttnMask, Binder, Graph, ParamStore, Tensor, Var};
use crate::retriever::RetrievedEvidence;
use crate::text::{Vocabulary, BOS, END_ARTICLE, EOS, NEXT_HEADING, PAD, SEP};

pub const PREFIX: &str = "gen";

/// Memory offsets `1..=BUCKET_SPLIT` share one position embedding, the rest another.
const BUCKET_SPLIT: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_source: usize,
    pub max_target: usize,
    /// Positions kept from the previous section; 0 disables the memory.
    pub cache_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            enc_layers: 2,
            dec_layers: 2,
            model_dim: 64,
            heads: 4,
            ff_dim: 128,
            max_source: 256,
            max_target: 128,
            cache_size: 64,
        }
    }
}

impl GeneratorConfig {
    pub fn desk() -> Self {
        Self {
            enc_layers: 1,
            dec_layers: 2,
            model_dim: 32,
            heads: 2,
            ff_dim: 64,
            max_source: 160,
            max_target: 96,
            cache_size: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [self.enc_layers, self.dec_layers, self.model_dim, self.heads, self.ff_dim];
        if sizes.contains(&0) || self.max_source < 2 || self.max_target < 3 {
            return Err(Error::Config("generator sizes must be positive (max_target ≥ 3)".into()));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "generator model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    fn dims(&self, depth: usize) -> BlockDims {
        BlockDims { d: self.model_dim, ff: self.ff_dim, depth }
    }
}

pub fn init_generator<R: Rng + ?Sized>(cfg: &GeneratorConfig, vocab_size: usize, store: &mut ParamStore, rng: &mut R) {
    let d = cfg.model_dim;
    store.insert(format!("{PREFIX}.tok"), ParamStore::normal(rng, &[vocab_size, d], 1.0));
    store.insert(format!("{PREFIX}.src_pos"), ParamStore::normal(rng, &[cfg.max_source, d], 0.1));
    store.insert(format!("{PREFIX}.tgt_pos"), ParamStore::normal(rng, &[cfg.max_target, d], 0.1));
    store.insert(format!("{PREFIX}.mem_pos"), ParamStore::normal(rng, &[2, d], 0.1));
    for l in 0..cfg.enc_layers {
        nn::init_block(store, rng, &format!("{PREFIX}.enc.l{l}"), cfg.dims(cfg.enc_layers), false);
    }
    nn::init_layer_norm(store, &format!("{PREFIX}.enc.ln_f"), d);
    for l in 0..cfg.dec_layers {
        nn::init_block(store, rng, &format!("{PREFIX}.dec.l{l}"), cfg.dims(cfg.dec_layers), true);
    }
    nn::init_layer_norm(store, &format!("{PREFIX}.dec.ln_f"), d);
}

/// Decoder layer inputs of the previous section, oldest row first.
#[derive(Clone, Debug, PartialEq)]
pub struct SectionCache {
    positions: usize,
    dim: usize,
    layers: Vec<Vec<f64>>,
}

impl SectionCache {
    pub fn empty(dec_layers: usize, dim: usize) -> Self {
        Self { positions: 0, dim, layers: vec![Vec::new(); dec_layers] }
    }

    /// Keep the last `cache_size` rows of each layer's states.
    pub fn from_states(states: &[Tensor], cache_size: usize) -> Self {
        let dim = states.first().map(Tensor::cols).unwrap_or(0);
        let rows = states.first().map(Tensor::rows).unwrap_or(0);
        let keep = rows.min(cache_size);
        let layers = states
            .iter()
            .map(|t| if keep == 0 { Vec::new() } else { t.slice_rows(rows - keep, keep).into_data() })
            .collect();
        Self { positions: keep, dim, layers }
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn is_empty(&self) -> bool {
        self.positions == 0
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.layers[l]
    }

    /// Overwrite stored values (used to probe sensitivity to the memory).
    pub fn layer_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.layers[l]
    }

    fn layer_tensor(&self, l: usize) -> Tensor {
        Tensor::new(vec![self.positions, self.dim], self.layers[l].clone()).unwrap()
    }
}

/// Encoder input: full query, `SEP`, then evidence sentences in order.
#[derive(Clone, Debug, PartialEq)]
pub struct Source {
    pub ids: Vec<usize>,
    /// Evidence item each token came from; `None` for query tokens.
    pub evidence_of: Vec<Option<usize>>,
    pub num_items: usize,
}

impl Source {
    /// Evidence is cut from the tail to fit `max_source`; the query is kept whole when possible.
    pub fn build(vocab: &Vocabulary, query_ids: &[usize], evidence: &RetrievedEvidence, max_source: usize) -> Self {
        let mut ids: Vec<usize> = query_ids.to_vec();
        if ids.len() + 1 > max_source {
            log::warn!("query of {} tokens exceeds the source budget {max_source}", ids.len());
            ids.truncate(max_source.saturating_sub(1).max(1));
        }
        let mut evidence_of = vec![None; ids.len()];
        if ids.len() < max_source {
            ids.push(SEP);
            evidence_of.push(None);
        }
        'items: for (i, item) in evidence.items.iter().enumerate() {
            for t in vocab.encode(&item.text) {
                if ids.len() >= max_source {
                    break 'items;
                }
                ids.push(t);
                evidence_of.push(Some(i));
            }
        }
        Self { ids, evidence_of, num_items: evidence.items.len() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConstraints {
    pub beam_size: usize,
    /// Lower bound on body + heading tokens.
    pub min_len: Option<usize>,
    /// Upper bound on body + heading tokens.
    pub max_len: Option<usize>,
    /// Exponent of the length normaliser; 0 ranks by raw log-probability.
    pub length_penalty: f64,
}

impl Default for DecodeConstraints {
    fn default() -> Self {
        Self { beam_size: 5, min_len: None, max_len: None, length_penalty: 0.0 }
    }
}

impl DecodeConstraints {
    pub fn greedy() -> Self {
        Self { beam_size: 1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if let (Some(lo), Some(hi)) = (self.min_len, self.max_len) {
            if lo > hi {
                return Err(Error::Config(format!("min_len {lo} exceeds max_len {hi}")));
            }
        }
        if self.max_len == Some(1) || self.max_len == Some(0) {
            return Err(Error::Config("max_len must leave room for a body and a heading".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SectionOutput {
    /// Generated ids including `NEXT_HEADING`, heading, and `EOS`.
    pub tokens: Vec<usize>,
    pub body: Vec<usize>,
    pub heading: Vec<usize>,
    /// The heading was the end-of-article sentinel.
    pub finished: bool,
    /// Decoding hit `max_target` without closing the grammar.
    pub forced_stop: bool,
    pub score: f64,
    /// Cumulative log-probability after each generated token.
    pub step_scores: Vec<f64>,
}

/// Split `body NEXT_HEADING heading EOS`.
pub fn parse_section(tokens: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let end = tokens.iter().position(|&t| t == EOS).unwrap_or(tokens.len());
    let t = &tokens[..end];
    match t.iter().position(|&x| x == NEXT_HEADING) {
        Some(p) => (t[..p].to_vec(), t[p + 1..].to_vec()),
        None => (t.to_vec(), Vec::new()),
    }
}

pub struct ForwardOut {
    /// `[prefix_len + 1, vocab]`.
    pub logits: Var,
    /// Input to each decoder layer, `[prefix_len + 1, d]`.
    pub layer_inputs: Vec<Var>,
    /// Memory leaves bound for this pass, one per layer when non-empty.
    pub cache_vars: Vec<Var>,
}

/// Graph-building view of the generator parameters.
pub struct Generator<'a> {
    pub cfg: &'a GeneratorConfig,
}

impl<'a> Generator<'a> {
    pub fn new(cfg: &'a GeneratorConfig) -> Self {
        Self { cfg }
    }

    fn source_scales(&self, g: &mut Graph, src: &Source, weights: Var) -> Option<Var> {
        let ev_idx: Vec<usize> = src.evidence_of.iter().filter_map(|e| *e).collect();
        if ev_idx.is_empty() {
            return None;
        }
        let n_query = src.ids.len() - ev_idx.len();
        let per_token = g.gather_rows(weights, &ev_idx);
        let per_token = g.scale(per_token, src.num_items as f64);
        if n_query == 0 {
            return Some(per_token);
        }
        let ones = g.constant(Tensor::new(vec![n_query, 1], vec![1.0; n_query]).unwrap());
        Some(g.concat_rows(&[ones, per_token]))
    }

    /// Encoder states `[source_len, d]`; evidence rows of the output are scaled
    /// by `num_items * weight`, so uniform weights leave them unchanged.
    pub fn encode(&self, g: &mut Graph, b: &mut Binder, src: &Source, weights: Var, ctx: &mut Ctx) -> Result<Var> {
        if src.ids.is_empty() {
            return Err(Error::InvalidInput("empty source".into()));
        }
        if src.ids.len() > self.cfg.max_source {
            return Err(Error::InvalidInput(format!("source of {} tokens exceeds max_source", src.ids.len())));
        }
        self.check_ids(b, &src.ids)?;
        let mut x = nn::embed(g, b, &format!("{PREFIX}.tok"), &format!("{PREFIX}.src_pos"), &src.ids, ctx);
        for l in 0..self.cfg.enc_layers {
            x = nn::encoder_block(g, b, &format!("{PREFIX}.enc.l{l}"), x, self.cfg.heads, ctx);
        }
        let x = nn::layer_norm(g, b, &format!("{PREFIX}.enc.ln_f"), x);
        // Scaling after the last norm keeps the weights visible to cross-attention.
        Ok(match self.source_scales(g, src, weights) {
            Some(s) => g.row_scale(x, s),
            None => x,
        })
    }

    fn check_ids(&self, b: &Binder, ids: &[usize]) -> Result<()> {
        let v = b.store().get(&format!("{PREFIX}.tok")).map(Tensor::rows).unwrap_or(0);
        match ids.iter().find(|&&i| i >= v) {
            Some(&id) => Err(Error::TokenOutOfRange { id, size: v }),
            None => Ok(()),
        }
    }

    fn memory(&self, g: &mut Graph, b: &mut Binder, cache: &SectionCache, l: usize, track: bool) -> (Var, Var) {
        let m = cache.positions();
        let leaf = g.leaf(cache.layer_tensor(l), track);
        let buckets: Vec<usize> = (0..m).map(|r| usize::from(m - r > BUCKET_SPLIT)).collect();
        let table = b.get(g, &format!("{PREFIX}.mem_pos"));
        let pos = g.gather_rows(table, &buckets);
        (g.add(leaf, pos), leaf)
    }

    /// Decoder pass over `BOS ++ prefix`.
    ///
    /// `track_cache` binds the memory as a differentiable leaf; it exists so
    /// tests can confirm that parameter gradients ignore it either way.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        enc: Var,
        prefix: &[usize],
        cache: &SectionCache,
        track_cache: bool,
        ctx: &mut Ctx,
    ) -> Result<ForwardOut> {
        let mut ids = Vec::with_capacity(prefix.len() + 1);
        ids.push(BOS);
        ids.extend_from_slice(prefix);
        if ids.len() > self.cfg.max_target {
            return Err(Error::InvalidInput(format!("target prefix of {} exceeds max_target", prefix.len())));
        }
        self.check_ids(b, &ids)?;
        let use_cache = self.cfg.cache_size > 0 && !cache.is_empty();
        if use_cache && cache.num_layers() != self.cfg.dec_layers {
            return Err(Error::Shape(format!(
                "cache has {} layers, decoder has {}",
                cache.num_layers(),
                self.cfg.dec_layers
            )));
        }
        let mut x = nn::embed(g, b, &format!("{PREFIX}.tok"), &format!("{PREFIX}.tgt_pos"), &ids, ctx);
        let mut layer_inputs = Vec::with_capacity(self.cfg.dec_layers);
        let mut cache_vars = Vec::new();
        for l in 0..self.cfg.dec_layers {
            layer_inputs.push(x);
            let p = format!("{PREFIX}.dec.l{l}");
            let xn = nn::layer_norm(g, b, &format!("{p}.ln1"), x);
            let (kv, mask) = if use_cache {
                let (mem, leaf) = self.memory(g, b, cache, l, track_cache);
                cache_vars.push(leaf);
                let mn = nn::layer_norm(g, b, &format!("{p}.ln1"), mem);
                (g.concat_rows(&[mn, xn]), AttnMask::Causal { memory: cache.positions() })
            } else {
                (xn, AttnMask::Causal { memory: 0 })
            };
            let a = nn::attention(g, b, &format!("{p}.self"), xn, kv, self.cfg.heads, mask, ctx);
            x = nn::residual(g, x, a, ctx);
            let xn = nn::layer_norm(g, b, &format!("{p}.ln_x"), x);
            let c = nn::attention(g, b, &format!("{p}.cross"), xn, enc, self.cfg.heads, AttnMask::None, ctx);
            x = nn::residual(g, x, c, ctx);
            let xn = nn::layer_norm(g, b, &format!("{p}.ln2"), x);
            let f = nn::feed_forward(g, b, &format!("{p}.ff"), xn);
            x = nn::residual(g, x, f, ctx);
        }
        let h = nn::layer_norm(g, b, &format!("{PREFIX}.dec.ln_f"), x);
        let logits = self.project(g, b, h);
        Ok(ForwardOut { logits, layer_inputs, cache_vars })
    }

    /// Tied output projection `h Eᵀ / sqrt(d)`.
    fn project(&self, g: &mut Graph, b: &mut Binder, h: Var) -> Var {
        let tok = b.get(g, &format!("{PREFIX}.tok"));
        let z = g.matmul_bt(h, tok);
        g.scale(z, 1.0 / (self.cfg.model_dim as f64).sqrt())
    }

    /// Teacher-forced label-smoothed loss of `target` (which ends in `EOS`).
    #[allow(clippy::too_many_arguments)]
    pub fn section_loss(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        src: &Source,
        weights: Var,
        target: &[usize],
        cache: &SectionCache,
        label_smoothing: f64,
        ctx: &mut Ctx,
    ) -> Result<(Var, ForwardOut)> {
        if target.is_empty() {
            return Err(Error::InvalidInput("empty target".into()));
        }
        let enc = self.encode(g, b, src, weights, ctx)?;
        let out = self.decode(g, b, enc, &target[..target.len() - 1], cache, false, ctx)?;
        let loss = g.label_smoothed_nll(out.logits, target, label_smoothing)?;
        Ok((loss, out))
    }
}

pub fn weights_constant(g: &mut Graph, src: &Source, weights: &[f64]) -> Result<Var> {
    if weights.len() != src.num_items {
        return Err(Error::Shape(format!("{} weights for {} evidence items", weights.len(), src.num_items)));
    }
    let n = weights.len().max(1);
    let data = if weights.is_empty() { vec![0.0] } else { weights.to_vec() };
    Ok(g.constant(Tensor::new(vec![n, 1], data).unwrap()))
}

/// Next-token logits for every position of `BOS ++ prefix`, without recording.
pub fn forward(
    cfg: &GeneratorConfig,
    params: &ParamStore,
    src: &Source,
    weights: &[f64],
    prefix: &[usize],
    cache: &SectionCache,
) -> Result<Tensor> {
    let mut g = Graph::inference();
    let mut b = Binder::new(params);
    let mut rng = NoRng;
    let mut ctx = Ctx::eval(&mut rng);
    let gen = Generator::new(cfg);
    let w = weights_constant(&mut g, src, weights)?;
    let enc = gen.encode(&mut g, &mut b, src, w, &mut ctx)?;
    let out = gen.decode(&mut g, &mut b, enc, prefix, cache, false, &mut ctx)?;
    Ok(g.value(out.logits).clone())
}

/// Memory for the next section: decoder layer inputs over `BOS ++ tokens[..n-1]`.
pub fn update_cache(
    cfg: &GeneratorConfig,
    params: &ParamStore,
    src: &Source,
    weights: &[f64],
    tokens: &[usize],
    previous: &SectionCache,
) -> Result<SectionCache> {
    if cfg.cache_size == 0 {
        return Ok(SectionCache::empty(cfg.dec_layers, cfg.model_dim));
    }
    let prefix = &tokens[..tokens.len().saturating_sub(1)];
    let mut g = Graph::inference();
    let mut b = Binder::new(params);
    let mut rng = NoRng;
    let mut ctx = Ctx::eval(&mut rng);
    let gen = Generator::new(cfg);
    let w = weights_constant(&mut g, src, weights)?;
    let enc = gen.encode(&mut g, &mut b, src, w, &mut ctx)?;
    let out = gen.decode(&mut g, &mut b, enc, prefix, previous, false, &mut ctx)?;
    let states: Vec<Tensor> = out.layer_inputs.iter().map(|&v| g.value(v).clone()).collect();
    Ok(SectionCache::from_states(&states, cfg.cache_size))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Body,
    Heading,
    Closing,
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    score: f64,
    step_scores: Vec<f64>,
    phase: Phase,
    content: usize,
    heading_len: usize,
}

impl Hyp {
    fn start() -> Self {
        Self { tokens: Vec::new(), score: 0.0, step_scores: Vec::new(), phase: Phase::Body, content: 0, heading_len: 0 }
    }

    fn push(&self, tok: usize, logp: f64) -> Self {
        let mut h = self.clone();
        h.tokens.push(tok);
        h.score += logp;
        h.step_scores.push(h.score);
        match tok {
            NEXT_HEADING => h.phase = Phase::Heading,
            EOS => {}
            END_ARTICLE => {
                h.phase = Phase::Closing;
                h.content += 1;
                h.heading_len += 1;
            }
            _ => {
                h.content += 1;
                if h.phase == Phase::Heading {
                    h.heading_len += 1;
                }
            }
        }
        h
    }
}

/// Output grammar `body NEXT_HEADING heading EOS` with length bounds.
#[derive(Clone, Copy, Debug)]
struct Grammar {
    min_len: usize,
    max_len: usize,
}

impl Grammar {
    fn allows(&self, h: &Hyp, tok: usize) -> bool {
        if matches!(tok, PAD | BOS | SEP) {
            return false;
        }
        let word = !matches!(tok, EOS | NEXT_HEADING | END_ARTICLE);
        match h.phase {
            Phase::Closing => tok == EOS,
            Phase::Body => {
                let must_close = h.content + 1 >= self.max_len;
                match tok {
                    NEXT_HEADING => h.content >= 1,
                    _ if word => !must_close,
                    _ => false,
                }
            }
            Phase::Heading => {
                if h.content >= self.max_len {
                    return tok == EOS;
                }
                match tok {
                    EOS => h.heading_len >= 1 && h.content >= self.min_len,
                    END_ARTICLE => h.heading_len == 0 && h.content + 1 >= self.min_len,
                    NEXT_HEADING => false,
                    _ => word,
                }
            }
        }
    }
}

fn masked_log_softmax(logits: &[f64], allowed: impl Fn(usize) -> bool) -> Vec<f64> {
    let mut out: Vec<f64> =
        logits.iter().enumerate().map(|(i, &z)| if allowed(i) { z } else { f64::NEG_INFINITY }).collect();
    let m = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return out;
    }
    let lse = m + out.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    for z in &mut out {
        *z -= lse;
    }
    out
}

/// Precomputed encoder output for repeated decoder steps.
struct StepModel<'a> {
    cfg: &'a GeneratorConfig,
    params: &'a ParamStore,
    enc: Tensor,
    cache: &'a SectionCache,
}

impl StepModel<'_> {
    fn new<'a>(
        cfg: &'a GeneratorConfig,
        params: &'a ParamStore,
        src: &Source,
        weights: &[f64],
        cache: &'a SectionCache,
    ) -> Result<StepModel<'a>> {
        let mut g = Graph::inference();
        let mut b = Binder::new(params);
        let mut rng = NoRng;
        let mut ctx = Ctx::eval(&mut rng);
        let w = weights_constant(&mut g, src, weights)?;
        let enc = Generator::new(cfg).encode(&mut g, &mut b, src, w, &mut ctx)?;
        Ok(StepModel { cfg, params, enc: g.value(enc).clone(), cache })
    }

    fn next_logits(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let mut b = Binder::new(self.params);
        let mut rng = NoRng;
        let mut ctx = Ctx::eval(&mut rng);
        let enc = g.constant(self.enc.clone());
        let out = Generator::new(self.cfg).decode(&mut g, &mut b, enc, prefix, self.cache, false, &mut ctx)?;
        let t = g.value(out.logits);
        Ok(t.row(t.rows() - 1).to_vec())
    }
}

fn grammar_for(cfg: &GeneratorConfig, cons: &DecodeConstraints) -> Result<Grammar> {
    cons.validate()?;
    let cap = cfg.max_target - 2;
    let max_len = cons.max_len.map_or(cap, |m| m.min(cap));
    let min_len = cons.min_len.unwrap_or(0);
    if min_len > max_len {
        return Err(Error::Config(format!("min_len {min_len} cannot fit in max_target {}", cfg.max_target)));
    }
    Ok(Grammar { min_len, max_len })
}

fn finish(h: Hyp, forced_stop: bool) -> SectionOutput {
    let (body, heading) = parse_section(&h.tokens);
    let finished = heading == [END_ARTICLE];
    SectionOutput { tokens: h.tokens, body, heading, finished, forced_stop, score: h.score, step_scores: h.step_scores }
}

/// Beam search over the section grammar.
///
/// Candidates are ranked by cumulative log-probability, then by beam and
/// token id, so a beam of one reproduces step-wise argmax decoding.
pub fn generate_section(
    cfg: &GeneratorConfig,
    params: &ParamStore,
    src: &Source,
    weights: &[f64],
    cache: &SectionCache,
    cons: &DecodeConstraints,
) -> Result<SectionOutput> {
    let grammar = grammar_for(cfg, cons)?;
    let model = StepModel::new(cfg, params, src, weights, cache)?;
    let k = cons.beam_size;
    let norm = |h: &Hyp| {
        if cons.length_penalty == 0.0 {
            h.score
        } else {
            h.score / (h.tokens.len() as f64).powf(cons.length_penalty)
        }
    };
    let mut alive = vec![Hyp::start()];
    let mut done: Vec<Hyp> = Vec::new();
    while !alive.is_empty() {
        if alive[0].tokens.len() + 1 > cfg.max_target {
            log::warn!("decoder reached max_target without closing the section");
            let best = alive.into_iter().max_by(|a, b| norm(a).total_cmp(&norm(b))).unwrap();
            return Ok(finish(best, true));
        }
        let mut cands: Vec<(f64, usize, usize, f64)> = Vec::new();
        for (bi, h) in alive.iter().enumerate() {
            let logits = model.next_logits(&h.tokens)?;
            let lp = masked_log_softmax(&logits, |t| grammar.allows(h, t));
            for (t, &l) in lp.iter().enumerate() {
                if l > f64::NEG_INFINITY {
                    cands.push((h.score + l, bi, t, l));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(k);
        for &(_, bi, t, l) in &cands {
            if next.len() == k {
                break;
            }
            let h = alive[bi].push(t, l);
            if t == EOS {
                done.push(h);
            } else {
                next.push(h);
            }
        }
        alive = next;
        if done.len() >= k {
            break;
        }
        if cons.length_penalty == 0.0 {
            let best_done = done.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            let best_alive = alive.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= best_alive {
                break;
            }
        }
    }
    let best = done
        .into_iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| norm(a).total_cmp(&norm(b)).then(j.cmp(i)))
        .map(|(_, h)| h)
        .ok_or_else(|| Error::InvalidInput("beam search produced no hypothesis".into()))?;
    Ok(finish(best, false))
}

/// Step-wise argmax under the same grammar; the reference for beam size one.
pub fn greedy_section(
    cfg: &GeneratorConfig,
    params: &ParamStore,
    src: &Source,
    weights: &[f64],
    cache: &SectionCache,
    cons: &DecodeConstraints,
) -> Result<SectionOutput> {
    let grammar = grammar_for(cfg, cons)?;
    let model = StepModel::new(cfg, params, src, weights, cache)?;
    let mut h = Hyp::start();
    loop {
        if h.tokens.len() + 1 > cfg.max_target {
            return Ok(finish(h, true));
        }
        let logits = model.next_logits(&h.tokens)?;
        let mut best: Option<(usize, f64)> = None;
        for (t, &z) in logits.iter().enumerate() {
            if grammar.allows(&h, t) && best.is_none_or(|(_, bz)| z > bz) {
                best = Some((t, z));
            }
        }
        let (t, _) = best.ok_or_else(|| Error::InvalidInput("grammar allows no token".into()))?;
        let lp = masked_log_softmax(&logits, |x| grammar.allows(&h, x))[t];
        h = h.push(t, lp);
        if t == EOS {
            return Ok(finish(h, false));
        }
    }
}

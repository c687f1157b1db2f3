//! Teacher-forced end-to-end training and finetuning.
//!
//! Each update runs every section of a biography through one graph: retrieval
//! picks sentences with the current encoder, the soft weights of the picked
//! sentences are recomputed on the tape, and the generator loss flows back
//! into both the generator and the encoder.

mod checkpoint;

pub use checkpoint::{read_loss_csv, write_loss_csv, Checkpoint, LossRecord, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{filter_hits, Biography, EvidenceDocument, DEFAULT_HIT_CAP, TOPLEVEL};
use crate::encoder;
use crate::error::{Error, Result};
use crate::generator::{self, Generator, SectionCache};
use crate::model::{vocabulary_texts, BioModel, Granularity, ModelConfig};
use crate::nn::Ctx;
use crate::numerics::{adam_update_grouped, AdamConfig, AdamState, Binder, Graph, LrSchedule, Tensor, Var};
use crate::retriever::{self, Candidate, Query, RetrievedEvidence, Strategy};
use crate::text::{Vocabulary, END_ARTICLE, EOS, NEXT_HEADING};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_updates: usize,
    pub max_updates: usize,
    /// Exponent of the post-warmup decay; 1 is linear.
    pub power: f64,
    pub end_lr: f64,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub label_smoothing: f64,
    pub weight_decay: f64,
    /// Biographies per update.
    pub batch_size: usize,
    pub seed: u64,
    /// Keep encoder parameters fixed and feed uniform evidence weights.
    pub frozen_retrieval: bool,
    pub hit_cap: usize,
    /// Multiplier on the learning rate of retrieval-encoder parameters.
    #[serde(default = "unit_scale")]
    pub retrieval_lr_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl Default for TrainConfig {
    /// Desk scale: a peak rate suited to tiny models and short runs.
    fn default() -> Self {
        Self {
            lr: 2e-3,
            warmup_updates: 50,
            max_updates: 2000,
            power: 1.0,
            end_lr: 0.0,
            dropout: 0.1,
            attention_dropout: 0.1,
            label_smoothing: 0.1,
            weight_decay: 0.01,
            batch_size: 1,
            seed: 0,
            frozen_retrieval: false,
            hit_cap: DEFAULT_HIT_CAP,
            retrieval_lr_scale: 0.1,
        }
    }
}

impl TrainConfig {
    /// Full-scale values for large pretrained models.
    pub fn paper_scale() -> Self {
        Self { lr: 3e-5, warmup_updates: 500, max_updates: 50_000, retrieval_lr_scale: 1.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_updates > self.max_updates {
            return Err(Error::Config(format!(
                "warmup_updates {} exceeds max_updates {}",
                self.warmup_updates, self.max_updates
            )));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("dropout", self.dropout),
            ("attention_dropout", self.attention_dropout),
            ("label_smoothing", self.label_smoothing),
            ("weight_decay", self.weight_decay),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if !(self.retrieval_lr_scale > 0.0 && self.retrieval_lr_scale <= 1.0) {
            return Err(Error::Config(format!(
                "retrieval_lr_scale must be in (0, 1], got {}",
                self.retrieval_lr_scale
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.power.is_nan() || self.power <= 0.0 || self.end_lr < 0.0 || self.end_lr > self.lr {
            return Err(Error::Config("invalid decay power or end_lr".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.lr,
            warmup_updates: self.warmup_updates,
            max_updates: self.max_updates,
            power: self.power,
            end_lr: self.end_lr,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { weight_decay: self.weight_decay, ..AdamConfig::default() }
    }
}

/// One section to generate: its heading is the query, its body and the
/// following heading are the target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub heading: String,
    pub body: String,
    /// `None` marks the last section.
    pub next_heading: Option<String>,
}

pub fn make_examples(bio: &Biography) -> Vec<Example> {
    bio.sections
        .iter()
        .enumerate()
        .map(|(i, s)| Example {
            heading: s.heading.clone(),
            body: s.text.clone(),
            next_heading: bio.sections.get(i + 1).map(|n| n.heading.clone()),
        })
        .collect()
}

/// A single example covering the whole article under the toplevel query.
pub fn whole_article_example(bio: &Biography) -> Example {
    let body: Vec<&str> = bio.sections.iter().map(|s| s.text.as_str()).collect();
    Example { heading: TOPLEVEL.into(), body: body.join(" "), next_heading: None }
}

pub fn examples_for(bio: &Biography, granularity: Granularity) -> Vec<Example> {
    match granularity {
        Granularity::SectionBySection => make_examples(bio),
        Granularity::WholeArticle => vec![whole_article_example(bio)],
    }
}

/// `body NEXT_HEADING heading EOS`, with the body cut to fit `max_target`.
pub fn target_ids(vocab: &Vocabulary, ex: &Example, max_target: usize) -> Vec<usize> {
    let heading = match &ex.next_heading {
        Some(h) => vocab.encode(h),
        None => vec![END_ARTICLE],
    };
    let mut body = vocab.encode(&ex.body);
    let room = max_target.saturating_sub(heading.len() + 2).max(1);
    if body.len() > room {
        log::debug!("target body of {} tokens cut to {room}", body.len());
        body.truncate(room);
    }
    let mut t = body;
    t.push(NEXT_HEADING);
    t.extend(heading);
    t.push(EOS);
    t
}

/// Everything about one biography that does not change during training.
#[derive(Clone, Debug)]
pub struct PreparedBio {
    pub hits: Vec<EvidenceDocument>,
    pub candidates: Vec<Candidate>,
    pub queries: Vec<Query>,
    pub targets: Vec<Vec<usize>>,
}

pub fn prepare(bio: &Biography, model: &BioModel, hit_cap: usize) -> PreparedBio {
    let hits = filter_hits(&bio.web_hits, hit_cap);
    let candidates = retriever::candidates(&hits);
    let mut queries = Vec::new();
    let mut targets = Vec::new();
    for ex in examples_for(bio, model.config.granularity) {
        queries.push(Query::new(&bio.name, &bio.occupations, &ex.heading, model.config.query_mode));
        targets.push(target_ids(&model.vocab, &ex, model.config.generator.max_target));
    }
    PreparedBio { hits, candidates, queries, targets }
}

fn uniform_weights(g: &mut Graph, n: usize) -> Var {
    let n = n.max(1);
    g.constant(Tensor::new(vec![n, 1], vec![1.0 / n as f64; n]).unwrap())
}

/// Whether gradients flow into the retrieval encoder.
pub fn retrieval_trainable(model: &BioModel, frozen: bool) -> bool {
    !frozen && model.config.retrieval.strategy != Strategy::BaselineTruncate
}

/// Mean label-smoothed loss over the sections of one biography, recorded on `g`.
///
/// `embeddings` are the current no-tape encodings of `prep.candidates`; they
/// decide which sentences are selected, and the soft weights over the
/// selection are then recomputed on the tape.
#[allow(clippy::too_many_arguments)]
pub fn biography_loss(
    g: &mut Graph,
    b: &mut Binder,
    model: &BioModel,
    prep: &PreparedBio,
    embeddings: &[Vec<f64>],
    label_smoothing: f64,
    soft_weights: bool,
    ctx: &mut Ctx,
) -> Result<Var> {
    let gcfg = &model.config.generator;
    let gen = Generator::new(gcfg);
    let mut cache = SectionCache::empty(gcfg.dec_layers, gcfg.model_dim);
    let mut total: Option<Var> = None;
    for (query, target) in prep.queries.iter().zip(&prep.targets) {
        let evidence = select_evidence(model, prep, query, embeddings)?;
        let src = model.source(query, &evidence);
        let weights = if soft_weights && !evidence.is_empty() {
            let ids: Vec<Vec<usize>> = evidence.items.iter().map(|it| model.vocab.encode(&it.text)).collect();
            retriever::soft_weights_graph(
                g,
                b,
                &model.config.encoder,
                &query.retrieval_ids(&model.vocab),
                &ids,
                model.config.retrieval.temperature,
                ctx,
            )?
        } else if evidence.is_empty() {
            uniform_weights(g, 1)
        } else {
            generator::weights_constant(g, &src, &evidence.weights())?
        };
        let (loss, out) = gen.section_loss(g, b, &src, weights, target, &cache, label_smoothing, ctx)?;
        if gcfg.cache_size > 0 {
            let states: Vec<Tensor> = out.layer_inputs.iter().map(|&v| g.value(v).clone()).collect();
            cache = SectionCache::from_states(&states, gcfg.cache_size);
        }
        total = Some(match total {
            Some(t) => g.add(t, loss),
            None => loss,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidInput("biography has no sections".into()))?;
    Ok(g.scale(total, 1.0 / prep.queries.len() as f64))
}

fn select_evidence(
    model: &BioModel,
    prep: &PreparedBio,
    query: &Query,
    embeddings: &[Vec<f64>],
) -> Result<RetrievedEvidence> {
    if prep.candidates.is_empty() {
        return Ok(RetrievedEvidence::default());
    }
    match model.config.retrieval.strategy {
        Strategy::BaselineTruncate => Ok(retriever::baseline_truncate(&prep.hits, model.config.retrieval.max_words)),
        _ => model.retriever().select_embedded(query, &prep.candidates, embeddings),
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossRecord>,
}

/// Build a vocabulary from the corpus, initialise a model, and train it.
pub fn train(corpus: &[Biography], model_config: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    cfg.validate()?;
    let filtered: Vec<Biography> =
        corpus.iter().map(|b| Biography { web_hits: filter_hits(&b.web_hits, cfg.hit_cap), ..b.clone() }).collect();
    let vocab = Vocabulary::build(&vocabulary_texts(&filtered), model_config.max_vocab)?;
    let model = BioModel::init(model_config.clone(), vocab, cfg.seed)?;
    run(model, corpus, cfg)
}

/// Continue from `checkpoint` with a fresh optimizer and schedule.
pub fn finetune(
    checkpoint: &Checkpoint,
    corpus: &[Biography],
    cfg: &TrainConfig,
    expected_vocab: Option<&Vocabulary>,
) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    cfg.validate()?;
    checkpoint.model.validate()?;
    if let Some(v) = expected_vocab {
        check_vocab(&checkpoint.model.vocab, v)?;
    }
    run(checkpoint.model.clone(), corpus, cfg)
}

pub fn check_vocab(model: &Vocabulary, other: &Vocabulary) -> Result<()> {
    if model.fingerprint() != other.fingerprint() || model.len() != other.len() {
        return Err(Error::VocabMismatch(format!(
            "checkpoint vocabulary ({} tokens) differs from the supplied one ({} tokens)",
            model.len(),
            other.len()
        )));
    }
    Ok(())
}

fn run(mut model: BioModel, corpus: &[Biography], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let prepared: Vec<PreparedBio> = corpus.iter().map(|b| prepare(b, &model, cfg.hit_cap)).collect();
    let soft = retrieval_trainable(&model, cfg.frozen_retrieval);
    let frozen: Vec<&str> = if soft { Vec::new() } else { vec![encoder::SENTENCE_PREFIX] };
    let names: Vec<String> =
        model.params.names().filter(|n| !frozen.iter().any(|p| n.starts_with(p))).cloned().collect();
    let mut state = AdamState::default();
    let schedule = cfg.schedule();
    let adam = cfg.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.max_updates);
    let mut frozen_embeddings: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();

    for update in 1..=cfg.max_updates {
        let lr = schedule.lr(update);
        let mut grad_sum: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut loss_sum = 0.0;
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..prepared.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let i = order.pop().unwrap();
            let prep = &prepared[i];
            let embeddings = if soft {
                model.retriever().embed_candidates(&prep.candidates)?
            } else {
                match frozen_embeddings.get(&i) {
                    Some(e) => e.clone(),
                    None => {
                        let e = model.retriever().embed_candidates(&prep.candidates)?;
                        frozen_embeddings.insert(i, e.clone());
                        e
                    }
                }
            };
            let mut g = Graph::new();
            let mut b = Binder::with_frozen(&model.params, &frozen);
            let mut ctx = Ctx { dropout: cfg.dropout, attn_dropout: cfg.attention_dropout, rng: &mut rng };
            let loss = biography_loss(&mut g, &mut b, &model, prep, &embeddings, cfg.label_smoothing, soft, &mut ctx)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    update,
                    detail: format!("biography {} gave loss {value} at lr {lr:e}", corpus[i].id),
                });
            }
            loss_sum += value;
            let grads = g.backward(loss)?;
            for (name, grad) in b.collect_grads(&g, &grads) {
                match grad_sum.get_mut(&name) {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, x)| *a += x),
                    None => {
                        grad_sum.insert(name, grad);
                    }
                }
            }
        }
        let scale = 1.0 / cfg.batch_size as f64;
        let zero_grads: Vec<Vec<f64>> = names
            .iter()
            .map(|n| match grad_sum.get(n) {
                Some(g) => g.iter().map(|x| x * scale).collect(),
                None => vec![0.0; model.params.get(n).unwrap().len()],
            })
            .collect();
        if let Some((n, _)) = names.iter().zip(&zero_grads).find(|(_, g)| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFiniteLoss { update, detail: format!("non-finite gradient for {n}") });
        }
        let lrs: Vec<f64> = names
            .iter()
            .map(|n| if n.starts_with(encoder::SENTENCE_PREFIX) { lr * cfg.retrieval_lr_scale } else { lr })
            .collect();
        step_params(&mut model, &names, &zero_grads, &mut state, &lrs, &adam)?;
        losses.push(LossRecord { update, lr, loss: loss_sum * scale });
        if update % 100 == 0 {
            log::debug!("update {update} lr {lr:.3e} loss {:.4}", loss_sum * scale);
        }
    }
    let checkpoint = Checkpoint {
        model,
        optimizer: state,
        optimizer_params: names,
        train_config: Some(cfg.clone()),
        updates: cfg.max_updates as u64,
    };
    Ok(TrainOutcome { checkpoint, losses })
}

fn step_params(
    model: &mut BioModel,
    names: &[String],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lrs: &[f64],
    adam: &AdamConfig,
) -> Result<()> {
    let mut slices: Vec<&mut [f64]> = Vec::with_capacity(names.len());
    let mut wanted = names.iter().peekable();
    for (name, t) in model.params.iter_mut() {
        if wanted.peek() == Some(&name) {
            slices.push(t.data_mut());
            wanted.next();
        }
    }
    let grads: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    adam_update_grouped(&mut slices, &grads, state, lrs, adam)
}

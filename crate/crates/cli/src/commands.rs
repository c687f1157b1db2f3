use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use biowriter::corpus::{
    corpus_stats, load_corpus_with, synth_generate, write_corpus as write_jsonl, Biography, LoadOptions, SynthConfig,
};
use biowriter::metrics::{ablation_report, evaluate as score, parse_metrics, train_variants, ReportMeta, VariantKey};
use biowriter::model::Granularity;
use biowriter::pipeline::{render_article, write_article, write_corpus, write_drafts_jsonl, ArticleDraft};
use biowriter::retriever::QueryMode;
use biowriter::trainer::{self, write_loss_csv, Checkpoint, TrainOutcome};
use log::info;
use serde_json::{json, Map, Value};

use crate::config::{parse_set, RunConfig};
use crate::manifest::RunManifest;
use crate::{
    AblateArgs, ConfigArgs, DecodeArgs, EvaluateArgs, FinetuneArgs, GenerateArgs, StatsArgs, Switch, SynthArgs,
    TrainArgs, UsageError,
};

fn load(path: &Path, strict: bool) -> anyhow::Result<Vec<Biography>> {
    if !path.exists() {
        return Err(UsageError::new(format!("corpus not found: {}", path.display())).into());
    }
    load_corpus_with(path, LoadOptions { strict }).with_context(|| format!("loading {}", path.display()))
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    if !path.exists() {
        return Err(UsageError::new(format!("checkpoint not found: {}", path.display())).into());
    }
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Merge `--config`, `--set`, and the typed flags in that order of increasing precedence.
fn resolve(args: &ConfigArgs, typed: Map<String, Value>) -> anyhow::Result<RunConfig> {
    let mut over = Map::new();
    for s in &args.set {
        let (k, v) = parse_set(s)?;
        over.insert(k, v);
    }
    if let Some(scale) = &args.scale {
        over.insert("scale".into(), Value::from(scale.as_str()));
    }
    if let Some(seed) = args.seed {
        over.insert("seed".into(), Value::from(seed));
    }
    over.extend(typed);
    RunConfig::resolve(args.config.as_deref(), over)
}

fn decode_flags(d: &DecodeArgs) -> Map<String, Value> {
    let mut m = Map::new();
    if let Some(b) = d.beam {
        m.insert("beam".into(), b.into());
    }
    if let Some(n) = d.max_sections {
        m.insert("max_sections".into(), n.into());
    }
    if let Some(n) = d.min_len {
        m.insert("min_len".into(), n.into());
    }
    if let Some(n) = d.max_len {
        m.insert("max_len".into(), n.into());
    }
    m
}

fn train_flags(a: &TrainArgs) -> Map<String, Value> {
    let mut m = Map::new();
    if let Some(lr) = a.lr {
        m.insert("lr".into(), lr.into());
    }
    if let Some(n) = a.max_updates {
        m.insert("max_updates".into(), n.into());
    }
    for (k, v) in [("query_mode", &a.query_mode), ("granularity", &a.granularity), ("strategy", &a.strategy)] {
        if let Some(v) = v {
            m.insert(k.into(), v.as_str().into());
        }
    }
    if a.frozen_retrieval {
        m.insert("frozen_retrieval".into(), true.into());
    }
    m
}

fn list<T: std::str::FromStr>(s: &str, what: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let out: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| UsageError::new(format!("{what}: {e}"))))
        .collect::<Result<_, _>>()?;
    if out.is_empty() {
        return Err(UsageError::new(format!("{what}: empty list")).into());
    }
    Ok(out)
}

pub fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let start = Instant::now();
    if !(0.0..=1.0).contains(&a.evidence_rate) {
        return Err(UsageError::new("--evidence-rate must be within [0, 1]").into());
    }
    let cfg = SynthConfig {
        distractors: a.distractors == Switch::On,
        wikipedia_mirror: a.wikipedia_mirror == Switch::On,
        evidence_rate: a.evidence_rate,
        ..SynthConfig::default()
    };
    let corpus = synth_generate(a.seed, a.n, &cfg);
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_jsonl(&a.out, &corpus)?;
    info!("wrote {} biographies to {}", corpus.len(), a.out.display());
    let config = json!({ "seed": a.seed, "n": a.n, "synth": cfg });
    let mut m = RunManifest::new("synth", config, Some(a.seed), vec![]);
    m.add_output(&a.out)?;
    m.write(&sidecar(&a.out), start.elapsed())
}

/// `<out>.manifest.json` next to a single-file output.
fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn save_outcome(out: &Path, outcome: &TrainOutcome, manifest: &mut RunManifest) -> anyhow::Result<()> {
    let ckpt = out.join("checkpoint.bin");
    let losses = out.join("losses.csv");
    outcome.checkpoint.save(&ckpt)?;
    write_loss_csv(&losses, &outcome.losses)?;
    if let Some(last) = outcome.losses.last() {
        info!("final loss {:.4} after {} updates", last.loss, outcome.checkpoint.updates);
    }
    manifest.add_output(&ckpt)?;
    manifest.add_output(&losses)?;
    Ok(())
}

pub fn train(a: TrainArgs) -> anyhow::Result<()> {
    let start = Instant::now();
    let cfg = resolve(&a.config, train_flags(&a))?;
    let corpus = load(&a.corpus, a.config.strict)?;
    create_dir(&a.out)?;
    let outcome = trainer::train(&corpus, &cfg.model_config(), &cfg.train_config())?;
    let mut m = RunManifest::new("train", serde_json::to_value(&cfg)?, Some(cfg.seed), vec![a.corpus.clone()]);
    save_outcome(&a.out, &outcome, &mut m)?;
    m.write(&a.out.join("manifest.json"), start.elapsed())
}

pub fn finetune(a: FinetuneArgs) -> anyhow::Result<()> {
    let start = Instant::now();
    let t = &a.train;
    let cfg = resolve(&t.config, train_flags(t))?;
    let base = load_checkpoint(&a.from)?;
    let corpus = load(&t.corpus, t.config.strict)?;
    create_dir(&t.out)?;
    // Architecture and retrieval settings come from the checkpoint.
    let outcome = trainer::finetune(&base, &corpus, &cfg.train_config(), None)?;
    let mut config = serde_json::to_value(&cfg)?;
    config["checkpoint_model"] = serde_json::to_value(&base.model.config)?;
    let mut m = RunManifest::new("finetune", config, Some(cfg.seed), vec![a.from.clone(), t.corpus.clone()]);
    save_outcome(&t.out, &outcome, &mut m)?;
    m.write(&t.out.join("manifest.json"), start.elapsed())
}

/// File-name-safe article id.
fn slug(s: &str) -> String {
    let out: String =
        s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    if out.is_empty() {
        "article".into()
    } else {
        out
    }
}

fn write_articles(dir: &Path, ids: &[String], drafts: &[ArticleDraft], m: &mut RunManifest) -> anyhow::Result<()> {
    let articles = dir.join("articles");
    create_dir(&articles)?;
    for (id, d) in ids.iter().zip(drafts) {
        let p = articles.join(format!("{}.txt", slug(id)));
        fs::write(&p, render_article(d))?;
        m.add_output(&p)?;
    }
    let sidecar = dir.join("drafts.jsonl");
    write_drafts_jsonl(&sidecar, drafts)?;
    m.add_output(&sidecar)?;
    Ok(())
}

pub fn generate(a: GenerateArgs) -> anyhow::Result<()> {
    let start = Instant::now();
    let cfg = resolve(&a.config, decode_flags(&a.decode))?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let pipeline = cfg.pipeline_config();
    let mut inputs = vec![a.checkpoint.clone()];
    let (ids, drafts) = match (&a.corpus, &a.name) {
        (Some(path), _) => {
            let corpus = load(path, a.config.strict)?;
            inputs.push(path.clone());
            let drafts = write_corpus(&corpus, &ckpt.model, &pipeline)?;
            (corpus.into_iter().map(|b| b.id).collect::<Vec<_>>(), drafts)
        }
        (None, Some(name)) => {
            let draft = write_article(name, &a.occupation, &[], &ckpt.model, &pipeline)?;
            (vec![name.clone()], vec![draft])
        }
        (None, None) => return Err(UsageError::new("either --corpus or --name is required").into()),
    };
    create_dir(&a.out)?;
    let mut m = RunManifest::new("generate", serde_json::to_value(&cfg)?, None, inputs);
    write_articles(&a.out, &ids, &drafts, &mut m)?;
    info!("wrote {} articles to {}", drafts.len(), a.out.display());
    m.write(&a.out.join("manifest.json"), start.elapsed())
}

pub fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let start = Instant::now();
    let cfg = resolve(&a.config, decode_flags(&a.decode))?;
    let metrics = parse_metrics(&a.metrics)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let corpus = load(&a.corpus, a.config.strict)?;
    let drafts = write_corpus(&corpus, &ckpt.model, &cfg.pipeline_config())?;
    let mc = &ckpt.model.config;
    let meta = ReportMeta {
        query_mode: Some(mc.query_mode.to_string()),
        granularity: Some(mc.granularity.to_string()),
        strategy: Some(serde_json::to_value(mc.retrieval.strategy)?.as_str().unwrap_or_default().to_string()),
    };
    let report = score(&drafts, &corpus, &metrics, meta)?;
    create_dir(&a.out)?;
    let mut config = serde_json::to_value(&cfg)?;
    config["metrics"] = json!(metrics);
    let mut m = RunManifest::new("evaluate", config, None, vec![a.checkpoint.clone(), a.corpus.clone()]);
    let table = report.render_table();
    print!("{table}");
    for (name, body) in [("report.json", report.to_json()?), ("report.txt", table), ("report.csv", report.to_csv())] {
        let p = a.out.join(name);
        fs::write(&p, body)?;
        m.add_output(&p)?;
    }
    m.write(&a.out.join("manifest.json"), start.elapsed())
}

pub fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    let start = Instant::now();
    let cfg = resolve(&a.config, decode_flags(&a.decode))?;
    let modes: Vec<QueryMode> = list(&a.modes, "--modes")?;
    let grans: Vec<Granularity> = list(&a.granularities, "--granularities")?;
    let seeds: Vec<u64> = list(&a.seeds, "--seeds")?;
    let train_corpus = load(&a.corpus, a.config.strict)?;
    let eval_corpus = load(&a.eval, a.config.strict)?;
    let cells: Vec<VariantKey> =
        modes.iter().flat_map(|&q| grans.iter().map(move |&g| VariantKey::new(q, g))).collect();
    let models = train_variants(&train_corpus, &cfg.model_config(), &cfg.train_config(), &cells, &seeds)?;
    let report = ablation_report(&eval_corpus, &models, &cells, &seeds, &cfg.pipeline_config())?;
    create_dir(&a.out)?;
    let mut config = serde_json::to_value(&cfg)?;
    config["modes"] = json!(modes);
    config["granularities"] = json!(grans);
    config["seeds"] = json!(seeds);
    let mut m = RunManifest::new("ablate", config, None, vec![a.corpus.clone(), a.eval.clone()]);
    let table = report.render_table();
    print!("{table}");
    let json = serde_json::to_string_pretty(&report)? + "\n";
    for (name, body) in [("ablation.json", json), ("ablation.txt", table), ("ablation.csv", report.to_csv())] {
        let p = a.out.join(name);
        fs::write(&p, body)?;
        m.add_output(&p)?;
    }
    m.write(&a.out.join("manifest.json"), start.elapsed())
}

pub fn stats(a: StatsArgs) -> anyhow::Result<()> {
    let start = Instant::now();
    let corpus = load(&a.corpus, a.strict)?;
    let stats = corpus_stats(&corpus)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&stats)?);
    } else {
        print!("{}", stats.render_table());
    }
    if let Some(path) = &a.manifest {
        let m = RunManifest::new("stats", json!({ "json": a.json, "strict": a.strict }), None, vec![a.corpus.clone()]);
        m.write(path, start.elapsed())?;
    }
    Ok(())
}

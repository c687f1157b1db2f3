//! Flat key-value run configuration: flag > file > built-in default.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use biowriter::generator::DecodeConstraints;
use biowriter::model::{Granularity, ModelConfig};
use biowriter::pipeline::PipelineConfig;
use biowriter::retriever::{QueryMode, Strategy};
use biowriter::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::UsageError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scale: Scale,
    pub seed: u64,

    pub lr: f64,
    pub warmup_updates: usize,
    pub max_updates: usize,
    pub power: f64,
    pub end_lr: f64,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub label_smoothing: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub frozen_retrieval: bool,
    pub retrieval_lr_scale: f64,
    pub hit_cap: usize,

    pub query_mode: QueryMode,
    pub granularity: Granularity,
    pub strategy: Strategy,
    pub top_k_sentences: usize,
    pub max_words: usize,
    pub temperature: f64,
    pub max_vocab: usize,
    pub cache_size: usize,
    pub tied_encoders: bool,

    pub beam: usize,
    pub min_len: Option<usize>,
    pub max_len: Option<usize>,
    pub length_penalty: f64,
    pub max_sections: usize,
}

impl RunConfig {
    pub fn defaults(scale: Scale) -> Self {
        let (model, train) = match scale {
            Scale::Desk => (ModelConfig::desk(), TrainConfig::default()),
            Scale::Full => (ModelConfig::default(), TrainConfig::paper_scale()),
        };
        let decode = DecodeConstraints::default();
        Self {
            scale,
            seed: train.seed,
            lr: train.lr,
            warmup_updates: train.warmup_updates,
            max_updates: train.max_updates,
            power: train.power,
            end_lr: train.end_lr,
            dropout: train.dropout,
            attention_dropout: train.attention_dropout,
            label_smoothing: train.label_smoothing,
            weight_decay: train.weight_decay,
            batch_size: train.batch_size,
            frozen_retrieval: train.frozen_retrieval,
            retrieval_lr_scale: train.retrieval_lr_scale,
            hit_cap: train.hit_cap,
            query_mode: model.query_mode,
            granularity: model.granularity,
            strategy: model.retrieval.strategy,
            top_k_sentences: model.retrieval.top_k_sentences,
            max_words: model.retrieval.max_words,
            temperature: model.retrieval.temperature,
            max_vocab: model.max_vocab,
            cache_size: model.generator.cache_size,
            tied_encoders: model.encoder.tied_encoders,
            beam: decode.beam_size,
            min_len: decode.min_len,
            max_len: decode.max_len,
            length_penalty: decode.length_penalty,
            max_sections: PipelineConfig::default().max_sections,
        }
    }

    /// Layer file values, then `overrides` (already-typed flag values), on the defaults.
    pub fn resolve(file: Option<&Path>, overrides: Map<String, Value>) -> anyhow::Result<Self> {
        let file_map = match file {
            Some(p) => read_flat(p)?,
            None => Map::new(),
        };
        let scale_of = |m: &Map<String, Value>| -> anyhow::Result<Option<Scale>> {
            m.get("scale")
                .map(|v| serde_json::from_value(v.clone()).map_err(|e| UsageError::new(format!("scale: {e}")).into()))
                .transpose()
        };
        let scale = scale_of(&overrides)?.or(scale_of(&file_map)?).unwrap_or(Scale::Desk);
        let mut merged = match serde_json::to_value(Self::defaults(scale))? {
            Value::Object(m) => m,
            _ => unreachable!(),
        };
        for (k, v) in file_map.into_iter().chain(overrides) {
            if !merged.contains_key(&k) {
                return Err(UsageError::new(format!("unknown config key {k:?}")).into());
            }
            merged.insert(k, v);
        }
        let cfg: Self =
            serde_json::from_value(Value::Object(merged)).map_err(|e| UsageError::new(format!("config: {e}")))?;
        cfg.model_config().validate().map_err(|e| UsageError::new(e.to_string()))?;
        cfg.train_config().validate().map_err(|e| UsageError::new(e.to_string()))?;
        cfg.pipeline_config().constraints.validate().map_err(|e| UsageError::new(e.to_string()))?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = match self.scale {
            Scale::Desk => ModelConfig::desk(),
            Scale::Full => ModelConfig::default(),
        };
        m.query_mode = self.query_mode;
        m.granularity = self.granularity;
        m.retrieval.strategy = self.strategy;
        m.retrieval.top_k_sentences = self.top_k_sentences;
        m.retrieval.max_words = self.max_words;
        m.retrieval.temperature = self.temperature;
        m.max_vocab = self.max_vocab;
        m.generator.cache_size = self.cache_size;
        m.encoder.tied_encoders = self.tied_encoders;
        m
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            warmup_updates: self.warmup_updates,
            max_updates: self.max_updates,
            power: self.power,
            end_lr: self.end_lr,
            dropout: self.dropout,
            attention_dropout: self.attention_dropout,
            label_smoothing: self.label_smoothing,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            seed: self.seed,
            frozen_retrieval: self.frozen_retrieval,
            retrieval_lr_scale: self.retrieval_lr_scale,
            hit_cap: self.hit_cap,
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            max_sections: self.max_sections,
            constraints: DecodeConstraints {
                beam_size: self.beam,
                min_len: self.min_len,
                max_len: self.max_len,
                length_penalty: self.length_penalty,
            },
            hit_cap: self.hit_cap,
        }
    }
}

fn read_flat(path: &Path) -> anyhow::Result<Map<String, Value>> {
    let text =
        fs::read_to_string(path).map_err(|e| UsageError::new(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(|e| UsageError::new(format!("{e:#}")))?;
    // A run manifest carries its resolved config under "config".
    let value = match value {
        Value::Object(mut m) if m.contains_key("command") && m.get("config").is_some_and(Value::is_object) => {
            m.remove("config").unwrap_or_default()
        }
        v => v,
    };
    match value {
        Value::Object(m) => {
            if let Some((k, _)) = m.iter().find(|(_, v)| v.is_object() || v.is_array()) {
                bail!(UsageError::new(format!("config key {k:?} must be a scalar; the file is flat")));
            }
            Ok(m)
        }
        _ => bail!(UsageError::new(format!("{} must contain a JSON object", path.display()))),
    }
}

/// Parse `key=value`; the value is read as JSON when possible, else as a string.
pub fn parse_set(s: &str) -> anyhow::Result<(String, Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| UsageError::new(format!("expected key=value, got {s:?}")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(pairs: &[(&str, Value)]) -> Map<String, Value> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn precedence_flag_over_file_over_default() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"lr": 0.001, "batch_size": 4}"#).unwrap();
        let c = RunConfig::resolve(Some(&p), set(&[("lr", Value::from(0.005))])).unwrap();
        assert_eq!(c.lr, 0.005);
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.max_updates, TrainConfig::default().max_updates);
    }

    #[test]
    fn full_scale_switches_defaults() {
        let c = RunConfig::resolve(None, set(&[("scale", Value::from("full"))])).unwrap();
        assert_eq!(c.lr, 3e-5);
        assert_eq!(c.warmup_updates, 500);
        assert_eq!(c.top_k_sentences, 40);
    }

    #[test]
    fn rejects_unknown_and_nested_keys() {
        assert!(RunConfig::resolve(None, set(&[("lrr", Value::from(1))])).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"lr": {"peak": 1}}"#).unwrap();
        assert!(RunConfig::resolve(Some(&p), Map::new()).is_err());
    }

    #[test]
    fn set_values_parse_as_json() {
        assert_eq!(parse_set("lr=0.1").unwrap(), ("lr".into(), Value::from(0.1)));
        assert_eq!(parse_set("query_mode=full").unwrap(), ("query_mode".into(), Value::from("full")));
        assert!(parse_set("nokey").is_err());
    }
}

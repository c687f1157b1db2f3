//! Seeded ablation grid over query modes and generation granularity.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use super::{evaluate, Metric, ReportMeta};
use crate::corpus::Biography;
use crate::error::{Error, Result};
use crate::model::{BioModel, Granularity, ModelConfig};
use crate::pipeline::{write_corpus, PipelineConfig};
use crate::retriever::QueryMode;
use crate::trainer::{train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VariantKey {
    pub query_mode: QueryMode,
    pub granularity: Granularity,
}

impl VariantKey {
    pub fn new(query_mode: QueryMode, granularity: Granularity) -> Self {
        Self { query_mode, granularity }
    }
}

impl fmt::Display for VariantKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.query_mode, self.granularity)
    }
}

/// Trained models keyed by cell and seed.
pub type VariantModels = BTreeMap<(VariantKey, u64), BioModel>;

/// Train one model per requested cell and seed.
pub fn train_variants(
    train_corpus: &[Biography],
    base: &ModelConfig,
    cfg: &TrainConfig,
    cells: &[VariantKey],
    seeds: &[u64],
) -> Result<VariantModels> {
    let mut out = VariantModels::new();
    for &cell in cells {
        for &seed in seeds {
            let mc = ModelConfig { query_mode: cell.query_mode, granularity: cell.granularity, ..base.clone() };
            let tc = TrainConfig { seed, ..cfg.clone() };
            log::info!("training {cell} seed {seed}");
            out.insert((cell, seed), train(train_corpus, &mc, &tc)?.checkpoint.model);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: VariantKey,
    /// `None` for the mean over seeds.
    pub seed: Option<u64>,
    pub rouge_l_f1: f64,
    pub equivalence_rate: f64,
    pub entity_coverage: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Evaluate every (cell, seed) model on `eval_corpus`.
///
/// All requested models must be present; the error lists every absent one.
pub fn ablation_report(
    eval_corpus: &[Biography],
    models: &VariantModels,
    cells: &[VariantKey],
    seeds: &[u64],
    pipeline: &PipelineConfig,
) -> Result<AblationReport> {
    let missing: Vec<String> = cells
        .iter()
        .flat_map(|&c| seeds.iter().map(move |&s| (c, s)))
        .filter(|k| !models.contains_key(k))
        .map(|(c, s)| format!("{c} seed {s}"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingVariant(missing.join(", ")));
    }
    let metrics = [Metric::Rouge, Metric::Equivalence, Metric::Coverage];
    let mut rows = Vec::new();
    for &cell in cells {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let model = &models[&(cell, seed)];
            let drafts = write_corpus(eval_corpus, model, pipeline)?;
            let meta = ReportMeta {
                query_mode: Some(cell.query_mode.to_string()),
                granularity: Some(cell.granularity.to_string()),
                strategy: Some(format!("{:?}", model.config.retrieval.strategy).to_lowercase()),
            };
            let report = evaluate(&drafts, eval_corpus, &metrics, meta)?;
            per_seed.push(AblationRow {
                cell,
                seed: Some(seed),
                rouge_l_f1: report.means.rouge_l_f1.unwrap_or(0.0),
                equivalence_rate: report.means.equivalence_rate.unwrap_or(0.0),
                entity_coverage: report.means.entity_coverage.unwrap_or(0.0),
            });
        }
        let n = per_seed.len().max(1) as f64;
        let mean = AblationRow {
            cell,
            seed: None,
            rouge_l_f1: per_seed.iter().map(|r| r.rouge_l_f1).sum::<f64>() / n,
            equivalence_rate: per_seed.iter().map(|r| r.equivalence_rate).sum::<f64>() / n,
            entity_coverage: per_seed.iter().map(|r| r.entity_coverage).sum::<f64>() / n,
        };
        rows.extend(per_seed);
        rows.push(mean);
    }
    Ok(AblationReport { rows })
}

/// Per-seed ROUGE-L F1 differences `a - b`, over seeds present for both.
pub fn paired_differences(report: &AblationReport, a: VariantKey, b: VariantKey) -> Vec<f64> {
    let of = |cell: VariantKey| -> BTreeMap<u64, f64> {
        report.rows.iter().filter(|r| r.cell == cell).filter_map(|r| r.seed.map(|s| (s, r.rouge_l_f1))).collect()
    };
    let (ra, rb) = (of(a), of(b));
    ra.iter().filter_map(|(s, x)| rb.get(s).map(|y| x - y)).collect()
}

impl AblationReport {
    pub fn mean(&self, cell: VariantKey) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.cell == cell && r.seed.is_none())
    }

    pub fn render_table(&self) -> String {
        let mut s = format!(
            "{:<14} {:<20} {:>6} {:>9} {:>12} {:>9}\n",
            "query", "granularity", "seed", "ROUGE-L", "equivalence", "coverage"
        );
        for r in &self.rows {
            let seed = r.seed.map_or_else(|| "mean".to_string(), |x| x.to_string());
            let _ = writeln!(
                s,
                "{:<14} {:<20} {:>6} {:>9.2} {:>12.2} {:>9.2}",
                r.cell.query_mode.to_string(),
                r.cell.granularity.to_string(),
                seed,
                100.0 * r.rouge_l_f1,
                100.0 * r.equivalence_rate,
                100.0 * r.entity_coverage
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("query_mode,granularity,seed,rouge_l_f1,equivalence_rate,entity_coverage\n");
        for r in &self.rows {
            let seed = r.seed.map_or_else(|| "mean".to_string(), |x| x.to_string());
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.cell.query_mode, r.cell.granularity, seed, r.rouge_l_f1, r.equivalence_rate, r.entity_coverage
            );
        }
        s
    }
}

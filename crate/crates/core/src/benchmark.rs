use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{Dataset, SplitName};
use crate::error::{Error, Result};
use crate::metrics::MetricResult;
use crate::model::{predict, EncoderModel, TaskHead};

/// Published full-scale scores for the four benchmark tasks. Shown next to
/// desk-scale results for orientation only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceScores {
    pub subcellular_localization_accuracy: f64,
    pub membrane_solubility_accuracy: f64,
    pub epitope_region_auc_roc: f64,
    pub gb1_fitness_spearman: f64,
    pub note: String,
}

impl Default for ReferenceScores {
    fn default() -> Self {
        Self {
            subcellular_localization_accuracy: 69.7,
            membrane_solubility_accuracy: 85.2,
            epitope_region_auc_roc: 66.73,
            gb1_fitness_spearman: 0.43,
            note: "not a target at desk scale".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkReport {
    pub task: String,
    pub split: SplitName,
    pub metrics: Vec<MetricResult>,
    pub reference: ReferenceScores,
    pub config: Value,
    pub seed: u64,
}

pub const REPORT_CSV_HEADER: &str = "task,split,metric,value,support,seed";

impl BenchmarkReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per report: the designated (first) metric.
    pub fn csv_row(&self) -> String {
        let m = &self.metrics[0];
        format!(
            "{},{},{},{},{},{}",
            self.task,
            self.split.as_str(),
            m.name,
            m.value,
            m.support,
            self.seed
        )
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{REPORT_CSV_HEADER}")?;
        writeln!(out, "{}", self.csv_row())?;
        Ok(())
    }
}

/// Score the task's metric on the test split in eval mode.
pub fn run_benchmark(
    encoder: &EncoderModel,
    head: &TaskHead,
    dataset: &Dataset,
    batch_size: usize,
    config: Value,
    seed: u64,
) -> Result<BenchmarkReport> {
    let spec = &dataset.spec;
    if head.config.kind != spec.kind || head.config.outputs != spec.outputs() {
        return Err(Error::shape(format!(
            "head was built for {:?} with {} outputs, task {} needs {:?} with {}",
            head.config.kind,
            head.config.outputs,
            spec.name,
            spec.kind,
            spec.outputs()
        )));
    }
    let split = SplitName::Test;
    if dataset.splits.get(split).is_empty() {
        return Err(Error::invalid(format!("task {} has an empty test split", spec.name)));
    }
    let preds = predict(encoder, head, dataset, split, batch_size)?;
    Ok(BenchmarkReport {
        task: spec.name.clone(),
        split,
        metrics: vec![preds.score(spec.metric)?],
        reference: ReferenceScores::default(),
        config,
        seed,
    })
}

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::write_bytes;
use crate::io::{list_pngs, load_mask};
use crate::metrics::{dice, mean_std};
use crate::pipeline::PipelineConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryTimings {
    pub register_ms: f64,
    pub prompt_ms: f64,
    pub segment_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub support_id: String,
    /// Absent when the query has no ground-truth mask or the job failed.
    pub coarse_dice: Option<f64>,
    pub final_dice: Option<f64>,
    pub fallback_flag: bool,
    /// Refinement rounds that produced the final mask.
    pub rounds: usize,
    pub confidence: Option<f64>,
    pub warning: Option<String>,
    pub error: Option<String>,
    pub timings: QueryTimings,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub load_ms: f64,
    pub embed_ms: f64,
    pub select_ms: f64,
    pub queries_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub queries: usize,
    pub failures: usize,
    pub fallbacks: usize,
    pub coarse_dice_mean: Option<f64>,
    pub coarse_dice_std: Option<f64>,
    pub final_dice_mean: Option<f64>,
    pub final_dice_std: Option<f64>,
    pub stage: StageTimings,
}

fn stats(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, Option<f64>) {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        return (None, None);
    }
    let (m, s) = mean_std(&v);
    (Some(m), Some(s))
}

impl Aggregates {
    pub fn from_records(records: &[QueryRecord], stage: StageTimings) -> Self {
        let (coarse_dice_mean, coarse_dice_std) = stats(records.iter().map(|r| r.coarse_dice));
        let (final_dice_mean, final_dice_std) = stats(records.iter().map(|r| r.final_dice));
        Self {
            queries: records.len(),
            failures: records.iter().filter(|r| r.error.is_some()).count(),
            fallbacks: records.iter().filter(|r| r.fallback_flag).count(),
            coarse_dice_mean,
            coarse_dice_std,
            final_dice_mean,
            final_dice_std,
            stage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub toggles: String,
    pub config: PipelineConfig,
    pub support_ids: Vec<String>,
    /// SHA-256 of every input file, keyed by its path below the dataset root.
    pub input_hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub manifest: Manifest,
    pub aggregates: Aggregates,
    pub records: Vec<QueryRecord>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    query_id: &'a str,
    support_id: &'a str,
    coarse_dice: Option<f64>,
    final_dice: Option<f64>,
    fallback_flag: bool,
    rounds: usize,
    confidence: Option<f64>,
    warning: Option<&'a str>,
    error: Option<&'a str>,
    register_ms: f64,
    prompt_ms: f64,
    segment_ms: f64,
    total_ms: f64,
}

impl RunReport {
    /// Copy with every wall-clock measurement zeroed, for comparing runs.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.aggregates.stage = StageTimings::default();
        for rec in &mut r.records {
            rec.timings = QueryTimings::default();
        }
        r
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("report serializes");
        out.push(b'\n');
        out
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("run report: {e}")))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_json())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(CsvRow {
                query_id: &r.query_id,
                support_id: &r.support_id,
                coarse_dice: r.coarse_dice,
                final_dice: r.final_dice,
                fallback_flag: r.fallback_flag,
                rounds: r.rounds,
                confidence: r.confidence,
                warning: r.warning.as_deref(),
                error: r.error.as_deref(),
                register_ms: r.timings.register_ms,
                prompt_ms: r.timings.prompt_ms,
                segment_ms: r.timings.segment_ms,
                total_ms: r.timings.total_ms,
            })
            .expect("in-memory csv write");
        }
        w.into_inner().expect("in-memory csv flush")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_csv())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub dice: f64,
    /// No prediction existed; scored as 0.
    pub missing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean: f64,
    pub std: f64,
    pub missing: usize,
}

/// Dice of every ground-truth mask against the prediction with the same file
/// stem. Predictions without ground truth are ignored. Ground truth is
/// resampled to the prediction's size when the prediction is square, so masks
/// written by a run at `image_size` score against the original files.
pub fn evaluate(pred_dir: &Path, truth_dir: &Path) -> Result<EvalReport> {
    let truths = list_pngs(truth_dir)?;
    let preds: BTreeMap<String, _> = list_pngs(pred_dir)?.into_iter().collect();
    if !truths.iter().any(|(id, _)| preds.contains_key(id)) {
        return Err(Error::InvalidInput(format!(
            "no prediction in {} matches a mask in {}",
            pred_dir.display(),
            truth_dir.display()
        )));
    }
    let mut rows = Vec::with_capacity(truths.len());
    for (id, truth_path) in &truths {
        let row = match preds.get(id) {
            Some(p) => {
                let pred = load_mask(p, None)?;
                let (h, w) = pred.dims();
                let truth = load_mask(truth_path, (h == w).then_some(h))?;
                EvalRow {
                    id: id.clone(),
                    dice: dice(&pred, &truth)?,
                    missing: false,
                }
            }
            None => EvalRow {
                id: id.clone(),
                dice: 0.0,
                missing: true,
            },
        };
        rows.push(row);
    }
    let (mean, std) = mean_std(&rows.iter().map(|r| r.dice).collect::<Vec<_>>());
    let missing = rows.iter().filter(|r| r.missing).count();
    Ok(EvalReport {
        rows,
        mean,
        std,
        missing,
    })
}

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{
    ece, features_csv, logprob_csv, metrics_csv, misclassified_logprobs, recall_at_k,
    reliability_csv, topk_error, CalibrationReport, PredictionRecord,
};
use crate::models::ModelParams;

/// Scalar evaluation metrics for one record set. Top-5 error is reported
/// only when the task has at least five classes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub top1_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top5_error: Option<f64>,
    pub ece: f64,
    pub recall_at_1: f64,
}

impl EvalMetrics {
    pub fn from_records(records: &[PredictionRecord]) -> Result<Self> {
        let classes = records
            .first()
            .map(|r| r.probs.len())
            .ok_or_else(|| Error::Domain("evaluation over an empty record set".into()))?;
        Ok(EvalMetrics {
            top1_error: topk_error(records, 1)?,
            top5_error: if classes >= 5 { Some(topk_error(records, 5)?) } else { None },
            ece: ece(records, 20)?.ece,
            recall_at_1: recall_at_k(records, 1)?,
        })
    }
}

/// Metrics, the reliability table, and the raw per-sample records of one
/// evaluation pass.
pub struct EvalOutputs {
    pub metrics: EvalMetrics,
    pub calibration: CalibrationReport,
    pub records: Vec<PredictionRecord>,
}

/// Runs the model over a dataset in fixed-size chunks, collecting the
/// temperature-1 softmax row, label, and penultimate features per sample.
pub fn predict_records(params: &ModelParams, ds: &Dataset) -> Result<Vec<PredictionRecord>> {
    let mut records = Vec::with_capacity(ds.len());
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(256) {
        let x = ds.gather(chunk);
        let (logits, penult) = params.infer(&x)?;
        let classes = logits.shape()[1];
        let dim = penult.shape()[1];
        for (row, &i) in chunk.iter().enumerate() {
            let z = &logits.data()[row * classes..(row + 1) * classes];
            records.push(PredictionRecord {
                probs: softmax_row(z),
                label: ds.labels()[i],
                penultimate: penult.data()[row * dim..(row + 1) * dim].to_vec(),
            });
        }
    }
    Ok(records)
}

fn softmax_row(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Evaluates a trained model on a dataset: top-1/top-5 error, 20-bin
/// calibration, recall@1, and the per-sample records backing the exports.
pub fn evaluate(params: &ModelParams, ds: &Dataset) -> Result<EvalOutputs> {
    if params.spec().classes() != ds.num_classes() {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes, dataset has {}",
            params.spec().classes(),
            ds.num_classes()
        )));
    }
    if params.spec().input_numel() != ds.sample_numel() {
        return Err(Error::Config(format!(
            "checkpoint expects {} inputs per sample, dataset provides {}",
            params.spec().input_numel(),
            ds.sample_numel()
        )));
    }
    let records = predict_records(params, ds)?;
    Ok(EvalOutputs {
        metrics: EvalMetrics::from_records(&records)?,
        calibration: ece(&records, 20)?,
        records,
    })
}

/// Writes `metrics.csv`, `reliability_bins.csv`, `logprob_misclassified.csv`,
/// and `features.csv` into `dir`.
pub fn write_eval_outputs(dir: &Path, outputs: &EvalOutputs) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut rows = vec![(
        "top1_error".to_string(),
        "test".to_string(),
        outputs.metrics.top1_error,
    )];
    if let Some(t5) = outputs.metrics.top5_error {
        rows.push(("top5_error".into(), "test".into(), t5));
    }
    rows.push(("ece".into(), "test".into(), outputs.metrics.ece));
    rows.push(("recall_at_1".into(), "test".into(), outputs.metrics.recall_at_1));
    std::fs::write(dir.join("metrics.csv"), metrics_csv(&rows))?;
    std::fs::write(dir.join("reliability_bins.csv"), reliability_csv(&outputs.calibration))?;
    std::fs::write(
        dir.join("logprob_misclassified.csv"),
        logprob_csv(&misclassified_logprobs(&outputs.records)),
    )?;
    std::fs::write(dir.join("features.csv"), features_csv(&outputs.records))?;
    Ok(())
}

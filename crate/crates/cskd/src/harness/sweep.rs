use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::evaluate::EvalMetrics;
use crate::harness::train::train;
use crate::harness::TrainConfig;

/// Final metrics of one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub temperature: f64,
    pub lambda_cls: f64,
    pub metrics: EvalMetrics,
}

/// Results of a temperature x lambda_cls grid, in row-major grid order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// `temperature,lambda_cls,top1_error,top5_error,ece,recall_at_1` rows;
    /// the top-5 column is empty when the task has fewer than five classes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("temperature,lambda_cls,top1_error,top5_error,ece,recall_at_1\n");
        for r in &self.rows {
            let top5 = r.metrics.top5_error.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{top5},{},{}\n",
                r.temperature, r.lambda_cls, r.metrics.top1_error, r.metrics.ece, r.metrics.recall_at_1
            ));
        }
        out
    }
}

/// Trains one run per `(temperature, lambda_cls)` cell, sequentially and
/// under the base config's seed. Per-cell outputs land in
/// `<output_dir>/T<t>_lcls<l>/`; the collected table is written as
/// `sweep.csv` next to them.
pub fn sweep(base: &TrainConfig, temperatures: &[f64], lambdas: &[f64]) -> Result<SweepTable> {
    if temperatures.is_empty() || lambdas.is_empty() {
        return Err(Error::Config("sweep grid must be nonempty on both axes".into()));
    }
    let mut rows = Vec::with_capacity(temperatures.len() * lambdas.len());
    for &t in temperatures {
        for &l in lambdas {
            let mut cfg = base.clone();
            cfg.loss.temperature = t;
            cfg.loss.lambda_cls = l;
            cfg.output_dir = base
                .output_dir
                .as_ref()
                .map(|d| d.join(format!("T{t}_lcls{l}")));
            let manifest = train(&cfg)?;
            let metrics = *manifest
                .final_eval()
                .ok_or_else(|| Error::Contract("train always evaluates the final epoch".into()))?;
            rows.push(SweepRow { temperature: t, lambda_cls: l, metrics });
        }
    }
    let table = SweepTable { rows };
    if let Some(dir) = &base.output_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("sweep.csv"), table.to_csv())?;
    }
    Ok(table)
}

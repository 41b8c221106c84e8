//! Deterministic training harness: configuration, the SGD loop, evaluation,
//! and grid sweeps. One seeded PRNG stream drives a whole run, so identical
//! configs produce byte-identical manifests and CSV outputs.

mod evaluate;
mod sweep;
mod train;

pub use evaluate::{evaluate, predict_records, write_eval_outputs, EvalMetrics, EvalOutputs};
pub use sweep::{sweep, SweepRow, SweepTable};
pub use train::{train, EpochRow, RunManifest};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{self, AugPolicy, Dataset};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind};
use crate::models::{ModelParams, ModelSpec};

/// SGD hyper-parameters; the defaults follow the usual recipe of momentum
/// 0.9, weight decay 1e-4, and initial learning rate 0.1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr0: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { momentum: 0.9, weight_decay: 1e-4, lr0: 0.1 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be finite and >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be finite and > 0, got {}", self.lr0)));
        }
        Ok(())
    }
}

/// Where samples come from. Sources without explicit test files fall back
/// to the deterministic 80/20 index-hash split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synth {
        classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        seed: u64,
    },
    Csv {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
    },
}

impl DatasetSpec {
    /// Builds the (train, test) dataset pair.
    pub fn build(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::Synth { classes, per_class, dim, spread, seed } => {
                let ds = data::synth_gaussians(*classes, *per_class, *dim, *spread, *seed)?;
                Ok(ds.split_by_index_hash())
            }
            DatasetSpec::Csv { train, test } => {
                let train_ds = data::load_csv(train)?;
                match test {
                    Some(path) => harmonize(train_ds, data::load_csv(path)?),
                    None => Ok(train_ds.split_by_index_hash()),
                }
            }
            DatasetSpec::Idx { train_images, train_labels, test_images, test_labels } => {
                let train_ds = data::load_idx(train_images, train_labels)?;
                match (test_images, test_labels) {
                    (Some(ti), Some(tl)) => harmonize(train_ds, data::load_idx(ti, tl)?),
                    (None, None) => Ok(train_ds.split_by_index_hash()),
                    _ => Err(Error::Config(
                        "test_images and test_labels must be given together".into(),
                    )),
                }
            }
        }
    }
}

/// Rebuilds both datasets under a shared class count.
fn harmonize(train: Dataset, test: Dataset) -> Result<(Dataset, Dataset)> {
    let classes = train.num_classes().max(test.num_classes());
    let rebuild = |ds: Dataset| -> Result<Dataset> {
        let labels = ds.labels().to_vec();
        let inputs = ds.gather(&(0..ds.len()).collect::<Vec<_>>());
        Dataset::new(inputs, labels, classes)
    };
    Ok((rebuild(train)?, rebuild(test)?))
}

/// One experiment's full configuration; mirrors the JSON config file format
/// (unknown keys are rejected).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Epochs after which the learning rate is divided by 10 (cumulative).
    #[serde(default)]
    pub lr_drops: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub augment: Option<AugPolicy>,
    #[serde(default)]
    pub teacher_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_eval_every() -> usize {
    1
}

impl TrainConfig {
    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Validates and canonicalizes the configuration. Degenerate loss kinds
    /// collapse onto the loss they reduce to (a zero-weight regularizer term
    /// is dropped along with its sampling and forward passes), so reduction
    /// identities hold all the way down to manifest bytes.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = self.clone();
        cfg.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        cfg.loss.validate().map_err(|e| Error::Config(e.to_string()))?;
        cfg.optimizer.validate()?;
        if cfg.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if cfg.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if cfg.lr_drops.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config(format!(
                "lr_drops must be sorted ascending, got {:?}",
                cfg.lr_drops
            )));
        }
        if let Some(pol) = &cfg.augment {
            pol.validate().map_err(|e| Error::Config(e.to_string()))?;
            if pol.is_disabled() {
                cfg.augment = None;
            }
        }
        loop {
            match cfg.loss.kind {
                LossKind::CskdE if cfg.loss.lambda_e == 0.0 => cfg.loss.kind = LossKind::Cskd,
                LossKind::Kd if cfg.loss.lambda_kd == 0.0 => cfg.loss.kind = LossKind::Cskd,
                LossKind::Cskd if cfg.loss.lambda_cls == 0.0 => cfg.loss.kind = LossKind::Ce,
                _ => break,
            }
        }
        if cfg.loss.kind == LossKind::Kd {
            if cfg.teacher_checkpoint.is_none() {
                return Err(Error::Config(
                    "loss kind `kd` requires a teacher_checkpoint path".into(),
                ));
            }
        } else {
            cfg.teacher_checkpoint = None;
        }
        Ok(cfg)
    }
}

/// Step-schedule learning rate: `lr0 * 10^-(number of drops <= epoch)`.
pub fn lr_at(epoch: usize, lr0: f64, drops: &[usize]) -> f64 {
    let count = drops.iter().filter(|&&d| d <= epoch).count();
    lr0 * 10f64.powi(-(count as i32))
}

/// One SGD-with-momentum update:
/// `g = grad + wd * param; v = momentum * v + g; param -= lr * v`.
/// Weight decay applies to every parameter, biases included.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &[Vec<f64>],
    velocity: &mut [Vec<f64>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.tensors().len() || velocity.len() != grads.len() {
        return Err(Error::Dimension(format!(
            "sgd_step: {} gradient buffers and {} velocity buffers for {} parameters",
            grads.len(),
            velocity.len(),
            params.tensors().len()
        )));
    }
    for (k, (name, t)) in params.tensors_mut().iter_mut().enumerate() {
        if grads[k].len() != t.numel() {
            return Err(Error::Dimension(format!(
                "sgd_step: gradient for {name} has {} entries, parameter has {}",
                grads[k].len(),
                t.numel()
            )));
        }
        let vel = &mut velocity[k];
        for (i, p) in t.data_mut().iter_mut().enumerate() {
            let g = grads[k][i] + weight_decay * *p;
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {g} for parameter {name}[{i}]"
                )));
            }
            vel[i] = momentum * vel[i] + g;
            *p -= lr * vel[i];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_params(value: f64) -> ModelParams {
        let mut p = ModelParams::init(
            &ModelSpec::Mlp { input: 1, hidden: vec![], classes: 1 },
            0,
        )
        .unwrap();
        // single weight + single bias; zero everything then set the weight
        for (_, t) in p.tensors_mut().iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        p.tensors_mut()[0].1.data_mut()[0] = value;
        p
    }

    #[test]
    fn lr_schedule_examples() {
        assert_eq!(lr_at(50, 0.1, &[100, 150]), 0.1);
        assert!((lr_at(120, 0.1, &[100, 150]) - 0.01).abs() < 1e-15);
        assert!((lr_at(180, 0.1, &[100, 150]) - 0.001).abs() < 1e-15);
        assert_eq!(lr_at(7, 0.05, &[]), 0.05);
    }

    #[test]
    fn sgd_zero_lr_keeps_params() {
        let mut p = scalar_params(1.5);
        let grads = vec![vec![2.0], vec![3.0]];
        let mut vel = vec![vec![0.0], vec![0.0]];
        sgd_step(&mut p, &grads, &mut vel, 0.0, 0.9, 0.0).unwrap();
        assert_eq!(p.tensors()[0].1.data()[0], 1.5);
    }

    #[test]
    fn sgd_reduces_to_plain_gradient_descent() {
        let mut p = scalar_params(1.0);
        let grads = vec![vec![0.5], vec![0.0]];
        let mut vel = vec![vec![0.0], vec![0.0]];
        sgd_step(&mut p, &grads, &mut vel, 0.1, 0.0, 0.0).unwrap();
        assert!((p.tensors()[0].1.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_hand_iteration() {
        // grad 1 both steps, lr 0.1, momentum 0.9, wd 0:
        // v1 = 1, p1 = -0.1; v2 = 1.9, p2 = -0.29
        let mut p = scalar_params(0.0);
        let grads = vec![vec![1.0], vec![0.0]];
        let mut vel = vec![vec![0.0], vec![0.0]];
        sgd_step(&mut p, &grads, &mut vel, 0.1, 0.9, 0.0).unwrap();
        assert!((p.tensors()[0].1.data()[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut p, &grads, &mut vel, 0.1, 0.9, 0.0).unwrap();
        assert!((p.tensors()[0].1.data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn sgd_weight_decay_hits_biases_too() {
        let mut p = scalar_params(0.0);
        p.tensors_mut()[1].1.data_mut()[0] = 2.0; // bias
        let grads = vec![vec![0.0], vec![0.0]];
        let mut vel = vec![vec![0.0], vec![0.0]];
        sgd_step(&mut p, &grads, &mut vel, 0.1, 0.0, 0.5).unwrap();
        // bias update: g = 0 + 0.5 * 2 = 1; p = 2 - 0.1 = 1.9
        assert!((p.tensors()[1].1.data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_non_finite_grad() {
        let mut p = scalar_params(0.0);
        let grads = vec![vec![f64::NAN], vec![0.0]];
        let mut vel = vec![vec![0.0], vec![0.0]];
        assert!(matches!(
            sgd_step(&mut p, &grads, &mut vel, 0.1, 0.9, 1e-4),
            Err(Error::Numeric(_))
        ));
    }

    fn base_config() -> TrainConfig {
        TrainConfig {
            dataset: DatasetSpec::Synth { classes: 3, per_class: 10, dim: 2, spread: 0.3, seed: 0 },
            model: ModelSpec::Mlp { input: 2, hidden: vec![8], classes: 3 },
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            lr_drops: vec![],
            epochs: 1,
            batch_size: 4,
            seed: 0,
            eval_every: 1,
            augment: None,
            teacher_checkpoint: None,
            output_dir: None,
        }
    }

    #[test]
    fn resolve_canonicalizes_degenerate_kinds() {
        let mut cfg = base_config();
        cfg.loss.kind = LossKind::Cskd;
        cfg.loss.lambda_cls = 0.0;
        assert_eq!(cfg.resolve().unwrap().loss.kind, LossKind::Ce);

        cfg.loss.kind = LossKind::CskdE;
        cfg.loss.lambda_e = 0.0;
        cfg.loss.lambda_cls = 2.0;
        assert_eq!(cfg.resolve().unwrap().loss.kind, LossKind::Cskd);

        cfg.loss.kind = LossKind::Kd;
        cfg.loss.lambda_kd = 0.0;
        cfg.loss.lambda_cls = 0.0;
        assert_eq!(cfg.resolve().unwrap().loss.kind, LossKind::Ce);
    }

    #[test]
    fn resolve_rejects_bad_configs() {
        let mut cfg = base_config();
        cfg.epochs = 0;
        assert!(matches!(cfg.resolve(), Err(Error::Config(_))));

        let mut cfg = base_config();
        cfg.lr_drops = vec![10, 5];
        assert!(matches!(cfg.resolve(), Err(Error::Config(_))));

        let mut cfg = base_config();
        cfg.loss.kind = LossKind::Kd;
        assert!(matches!(cfg.resolve(), Err(Error::Config(_))));
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let json = serde_json::json!({
            "dataset": {"source": "synth", "classes": 3, "per_class": 10, "dim": 2, "spread": 0.3, "seed": 0},
            "model": {"arch": "mlp", "input": 2, "hidden": [8], "classes": 3},
            "loss": {"kind": "ce"},
            "epochs": 1,
            "batch_size": 4,
            "seed": 0,
            "bogus_knob": true
        });
        let parsed: std::result::Result<TrainConfig, _> = serde_json::from_value(json);
        assert!(parsed.is_err());
    }

    #[test]
    fn dataset_tensor_shape_matches_split() {
        let (train, test) = base_config().dataset.build().unwrap();
        assert_eq!(train.len() + test.len(), 30);
        assert_eq!(train.sample_shape(), &[2]);
        let _ = Tensor::zeros(&[1]);
    }
}

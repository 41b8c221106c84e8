use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::{augment, mixup_batch, one_hot, paired_batch, AugPolicy, Dataset};
use crate::error::{Error, Result};
use crate::harness::evaluate::{predict_records, write_eval_outputs, EvalMetrics, EvalOutputs};
use crate::harness::{lr_at, sgd_step, TrainConfig};
use crate::losses::{
    cross_entropy, cskd_e_loss, cskd_loss, kd_combined_loss, label_smoothing_loss,
    max_entropy_loss, mean_entropy, mixup_cskd_loss, LossComponents, LossKind, LossValue, Target,
};
use crate::metrics::ece;
use crate::models::{BoundModel, ModelParams};
use crate::tensor::{GradGraph, Tensor};

/// Per-epoch log row: schedule state, mean loss components over the epoch's
/// steps, and evaluation metrics when the epoch was evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossComponents,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalMetrics>,
}

/// Everything one run produced. Wall time is informational only and is
/// deliberately excluded from the serialized manifest so that reruns of the
/// same config are byte-identical.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub seed: u64,
    pub epochs: Vec<EpochRow>,
    pub final_calibration: crate::metrics::CalibrationReport,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl RunManifest {
    pub fn final_eval(&self) -> Option<&EvalMetrics> {
        self.epochs.iter().rev().find_map(|r| r.eval.as_ref())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }
}

/// `[c x h x w]` view of a dataset's samples, when they are image-shaped.
fn spatial_view(ds: &Dataset) -> Option<(usize, usize, usize)> {
    match *ds.sample_shape() {
        [h, w] => Some((1, h, w)),
        [c, h, w] => Some((c, h, w)),
        _ => None,
    }
}

fn maybe_augment<R: Rng>(
    x: Tensor,
    policy: Option<&AugPolicy>,
    spatial: Option<(usize, usize, usize)>,
    rng: &mut R,
) -> Result<Tensor> {
    match policy {
        None => Ok(x),
        Some(p) => {
            let (c, h, w) = spatial.ok_or_else(|| {
                Error::Config("augmentation requires image-shaped samples [c x h x w]".into())
            })?;
            let b = x.shape()[0];
            let x4 = x.reshape(&[b, c, h, w])?;
            augment(&x4, p, rng)
        }
    }
}

fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let b = x.shape()[0];
    let width = x.numel() / b;
    let mut data = Vec::with_capacity(x.numel());
    for &i in perm {
        data.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
    }
    Tensor::new(data, x.shape()).expect("permutation preserves shape")
}

struct StepContext<'a> {
    cfg: &'a TrainConfig,
    spatial: Option<(usize, usize, usize)>,
    teacher: Option<&'a ModelParams>,
    beta_dist: Option<Beta<f64>>,
}

/// Builds the configured loss graph for one batch and returns the scalar
/// root plus logged components. Fixed per-step draw order: partner indices,
/// augmentation for the x branch, augmentation for the partner branch,
/// mixup coefficient and permutation.
fn build_step_loss(
    ctx: &StepContext<'_>,
    g: &mut GradGraph,
    bound: &BoundModel,
    params: &ModelParams,
    ds: &Dataset,
    indices: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<LossValue> {
    let loss_cfg = &ctx.cfg.loss;
    let aug = ctx.cfg.augment.as_ref();
    match loss_cfg.kind {
        LossKind::Ce | LossKind::LabelSmooth | LossKind::MaxEntropy => {
            let x = maybe_augment(ds.gather(indices), aug, ctx.spatial, rng)?;
            let y = ds.gather_labels(indices);
            let out = bound.forward(g, &x)?;
            match loss_cfg.kind {
                LossKind::Ce => {
                    let ce = cross_entropy(g, out.logits, Target::Hard(&y))?;
                    Ok(LossValue {
                        total: ce,
                        components: LossComponents {
                            total: g.scalar_value(ce),
                            ce: g.scalar_value(ce),
                            ..Default::default()
                        },
                    })
                }
                LossKind::LabelSmooth => {
                    let total = label_smoothing_loss(g, out.logits, &y, loss_cfg.epsilon)?;
                    Ok(LossValue {
                        total,
                        components: LossComponents {
                            total: g.scalar_value(total),
                            ce: g.scalar_value(total),
                            ..Default::default()
                        },
                    })
                }
                LossKind::MaxEntropy => {
                    let total = max_entropy_loss(g, out.logits, &y, loss_cfg.beta)?;
                    let ce = cross_entropy(g, out.logits, Target::Hard(&y))?;
                    let h = mean_entropy(g, out.logits)?;
                    Ok(LossValue {
                        total,
                        components: LossComponents {
                            total: g.scalar_value(total),
                            ce: g.scalar_value(ce),
                            entropy: Some(g.scalar_value(h)),
                            ..Default::default()
                        },
                    })
                }
                _ => unreachable!(),
            }
        }
        LossKind::Cskd => {
            let batch = paired_batch(ds, indices, rng)?;
            let x = maybe_augment(batch.x, aug, ctx.spatial, rng)?;
            let xp = maybe_augment(batch.x_prime, aug, ctx.spatial, rng)?;
            let frozen = params.snapshot().bind(g);
            let frozen_out = frozen.forward(g, &xp)?;
            let out = bound.forward(g, &x)?;
            cskd_loss(g, out.logits, frozen_out.logits, &batch.y, loss_cfg)
        }
        LossKind::CskdE => {
            let batch = paired_batch(ds, indices, rng)?;
            let x_clean = batch.x.clone();
            let x_aug = maybe_augment(batch.x, aug, ctx.spatial, rng)?;
            let xp_aug = maybe_augment(batch.x_prime, aug, ctx.spatial, rng)?;
            let frozen = params.snapshot().bind(g);
            let frozen_xp = frozen.forward(g, &xp_aug)?;
            let frozen_clean = frozen.forward(g, &x_clean)?;
            let out = bound.forward(g, &x_aug)?;
            cskd_e_loss(
                g,
                out.logits,
                frozen_xp.logits,
                frozen_clean.logits,
                &batch.y,
                loss_cfg,
            )
        }
        LossKind::Kd => {
            let teacher = ctx.teacher.expect("resolve() guarantees a teacher for kd");
            let pairing = loss_cfg.lambda_cls > 0.0;
            if pairing {
                let batch = paired_batch(ds, indices, rng)?;
                let x = maybe_augment(batch.x, aug, ctx.spatial, rng)?;
                let xp = maybe_augment(batch.x_prime, aug, ctx.spatial, rng)?;
                let teacher_out = teacher.bind(g).forward(g, &x)?;
                let frozen = params.snapshot().bind(g);
                let frozen_out = frozen.forward(g, &xp)?;
                let out = bound.forward(g, &x)?;
                kd_combined_loss(
                    g,
                    out.logits,
                    teacher_out.logits,
                    Some(frozen_out.logits),
                    &batch.y,
                    loss_cfg,
                )
            } else {
                let x = maybe_augment(ds.gather(indices), aug, ctx.spatial, rng)?;
                let y = ds.gather_labels(indices);
                let teacher_out = teacher.bind(g).forward(g, &x)?;
                let out = bound.forward(g, &x)?;
                kd_combined_loss(g, out.logits, teacher_out.logits, None, &y, loss_cfg)
            }
        }
        LossKind::MixupCskd => {
            let classes = ds.num_classes();
            let pairing = loss_cfg.lambda_cls > 0.0;
            let (x, y, xp) = if pairing {
                let batch = paired_batch(ds, indices, rng)?;
                (batch.x, batch.y, Some(batch.x_prime))
            } else {
                (ds.gather(indices), ds.gather_labels(indices), None)
            };
            let x = maybe_augment(x, aug, ctx.spatial, rng)?;
            let xp = match xp {
                Some(t) => Some(maybe_augment(t, aug, ctx.spatial, rng)?),
                None => None,
            };
            // one shared (lambda, permutation) pair mixes every branch
            let lam: f64 = ctx
                .beta_dist
                .expect("resolve() guarantees mixup alpha > 0")
                .sample(rng);
            let mut perm: Vec<usize> = (0..indices.len()).collect();
            perm.shuffle(rng);

            let y_hot = one_hot(&y, classes)?;
            let (x_mix, y_mix) =
                mixup_batch(&x, &y_hot, &permute_rows(&x, &perm), &permute_rows(&y_hot, &perm), lam)?;
            let out = bound.forward(g, &x_mix)?;
            let frozen_partner = match xp {
                Some(xp) => {
                    let (xp_mix, _) = mixup_batch(
                        &xp,
                        &y_hot,
                        &permute_rows(&xp, &perm),
                        &permute_rows(&y_hot, &perm),
                        lam,
                    )?;
                    let frozen = params.snapshot().bind(g);
                    Some(frozen.forward(g, &xp_mix)?.logits)
                }
                None => None,
            };
            mixup_cskd_loss(g, out.logits, frozen_partner, &y_mix, loss_cfg)
        }
    }
}

fn mean_components(sums: &LossComponents, steps: usize) -> LossComponents {
    let n = steps as f64;
    LossComponents {
        total: sums.total / n,
        ce: sums.ce / n,
        kl_cls: sums.kl_cls.map(|v| v / n),
        kl_e: sums.kl_e.map(|v| v / n),
        entropy: sums.entropy.map(|v| v / n),
        kl_kd: sums.kl_kd.map(|v| v / n),
    }
}

fn accumulate(sums: &mut LossComponents, c: &LossComponents) {
    sums.total += c.total;
    sums.ce += c.ce;
    let add_opt = |a: &mut Option<f64>, b: Option<f64>| {
        if let Some(v) = b {
            *a = Some(a.unwrap_or(0.0) + v);
        }
    };
    add_opt(&mut sums.kl_cls, c.kl_cls);
    add_opt(&mut sums.kl_e, c.kl_e);
    add_opt(&mut sums.entropy, c.entropy);
    add_opt(&mut sums.kl_kd, c.kl_kd);
}

/// Runs one experiment end to end: per step it samples a batch (pairing it
/// for the distillation kinds), snapshots the parameters for the frozen
/// branch, builds the configured loss, backpropagates, and applies one SGD
/// update; per epoch it evaluates on the held-out split. Outputs land in
/// `config.output_dir` when set.
pub fn train(config: &TrainConfig) -> Result<RunManifest> {
    let started = Instant::now();
    let cfg = config.resolve()?;
    let (train_ds, test_ds) = cfg.dataset.build()?;
    if cfg.model.classes() != train_ds.num_classes() {
        return Err(Error::Config(format!(
            "model predicts {} classes, dataset has {}",
            cfg.model.classes(),
            train_ds.num_classes()
        )));
    }
    if cfg.model.input_numel() != train_ds.sample_numel() {
        return Err(Error::Config(format!(
            "model expects {} inputs per sample, dataset provides {}",
            cfg.model.input_numel(),
            train_ds.sample_numel()
        )));
    }
    let spatial = spatial_view(&train_ds);
    if cfg.augment.is_some() && spatial.is_none() {
        return Err(Error::Config(
            "augmentation requires image-shaped samples [c x h x w]".into(),
        ));
    }
    let teacher = match &cfg.teacher_checkpoint {
        Some(path) => {
            let loaded = ModelParams::load(path)?;
            if loaded.spec().classes() != cfg.model.classes() {
                return Err(Error::Config(format!(
                    "teacher predicts {} classes, student predicts {}",
                    loaded.spec().classes(),
                    cfg.model.classes()
                )));
            }
            if loaded.spec().input_numel() != cfg.model.input_numel() {
                return Err(Error::Config(
                    "teacher and student input sizes differ".into(),
                ));
            }
            Some(loaded.snapshot())
        }
        None => None,
    };

    let ctx = StepContext {
        cfg: &cfg,
        spatial,
        teacher: teacher.as_ref(),
        beta_dist: if cfg.loss.kind == LossKind::MixupCskd {
            Some(Beta::new(cfg.loss.mixup_alpha, cfg.loss.mixup_alpha).map_err(|e| {
                Error::Config(format!("invalid mixup alpha {}: {e}", cfg.loss.mixup_alpha))
            })?)
        } else {
            None
        },
    };

    let mut params = ModelParams::init(&cfg.model, cfg.seed)?;
    let mut velocity: Vec<Vec<f64>> = params
        .tensors()
        .iter()
        .map(|(_, t)| vec![0.0; t.numel()])
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let mut rows: Vec<EpochRow> = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg.optimizer.lr0, &cfg.lr_drops);
        order.shuffle(&mut rng);
        let mut sums = LossComponents::default();
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = GradGraph::new();
            let bound = params.bind(&mut g);
            let loss = build_step_loss(&ctx, &mut g, &bound, &params, &train_ds, chunk, &mut rng)?;
            let total = g.scalar_value(loss.total);
            if !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {total} at epoch {epoch}, step {steps}; aborting"
                )));
            }
            g.backward(loss.total)?;
            let grads: Vec<Vec<f64>> = bound
                .vars()
                .iter()
                .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.numel(v)]))
                .collect();
            sgd_step(
                &mut params,
                &grads,
                &mut velocity,
                lr,
                cfg.optimizer.momentum,
                cfg.optimizer.weight_decay,
            )
            .map_err(|e| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("{msg} (epoch {epoch}, step {steps})"))
                }
                other => other,
            })?;
            accumulate(&mut sums, &loss.components);
            steps += 1;
        }
        let eval = if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            let records = predict_records(&params, &test_ds)?;
            Some(EvalMetrics::from_records(&records)?)
        } else {
            None
        };
        rows.push(EpochRow { epoch, lr, loss: mean_components(&sums, steps), eval });
    }

    let records = predict_records(&params, &test_ds)?;
    let final_calibration = ece(&records, 20)?;
    let manifest = RunManifest {
        config: cfg.clone(),
        seed: cfg.seed,
        epochs: rows,
        final_calibration: final_calibration.clone(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };

    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), manifest.to_json()?)?;
        let outputs = EvalOutputs {
            metrics: EvalMetrics::from_records(&records)?,
            calibration: final_calibration,
            records,
        };
        write_eval_outputs(dir, &outputs)?;
        params.save(&dir.join("checkpoint.bin"))?;
    }

    Ok(manifest)
}

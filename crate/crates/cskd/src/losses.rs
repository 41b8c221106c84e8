//! The class-wise self-distillation loss family and its baselines.
//!
//! All losses build on the gradient tape and return scalar roots; the
//! distillation variants take their frozen branches as tape nodes that must
//! not require gradients (a snapshot forward or a constant), enforcing the
//! stop-gradient contract at the type level of the tape.

use serde::{Deserialize, Serialize};

use crate::data::one_hot;
use crate::error::{Error, Result};
use crate::tensor::{GradGraph, Tensor, Var};

/// Floor applied inside every log over probabilities: keeps divergences
/// finite under fully saturated softmax rows without visibly perturbing
/// values at 64-bit precision.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    Cskd,
    CskdE,
    LabelSmooth,
    MaxEntropy,
    Kd,
    MixupCskd,
}

/// Every loss hyper-parameter in one place. Unused fields are ignored by
/// the kinds that do not read them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Temperature applied inside every distillation divergence; the
    /// cross-entropy term always runs at temperature 1.
    pub temperature: f64,
    pub lambda_cls: f64,
    pub lambda_e: f64,
    pub epsilon: f64,
    pub beta: f64,
    pub lambda_kd: f64,
    pub mixup_alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Cskd,
            temperature: 4.0,
            lambda_cls: 1.0,
            lambda_e: 1.0,
            epsilon: 0.1,
            beta: 1.0,
            lambda_kd: 1.0,
            mixup_alpha: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Domain(format!(
                "temperature must be finite and > 0, got {}",
                self.temperature
            )));
        }
        for (name, v) in [
            ("lambda_cls", self.lambda_cls),
            ("lambda_e", self.lambda_e),
            ("beta", self.beta),
            ("lambda_kd", self.lambda_kd),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Domain(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.epsilon.is_finite() && (0.0..1.0).contains(&self.epsilon)) {
            return Err(Error::Domain(format!(
                "epsilon must lie in [0, 1), got {}",
                self.epsilon
            )));
        }
        if !(self.mixup_alpha.is_finite() && self.mixup_alpha > 0.0) {
            return Err(Error::Domain(format!(
                "mixup_alpha must be finite and > 0, got {}",
                self.mixup_alpha
            )));
        }
        Ok(())
    }
}

/// Named scalar components of one loss evaluation, for logging. `total` is
/// always the configured weighted sum of the present components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub ce: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_cls: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_e: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_kd: Option<f64>,
}

/// A graph-attached scalar loss plus its logged components.
pub struct LossValue {
    pub total: Var,
    pub components: LossComponents,
}

impl LossValue {
    fn bare(g: &GradGraph, total: Var) -> Self {
        let v = g.scalar_value(total);
        LossValue {
            total,
            components: LossComponents { total: v, ce: v, ..Default::default() },
        }
    }
}

/// Temperature-scaled row softmax: `exp(z_i / t) / sum_j exp(z_j / t)`.
pub fn softmax_t(g: &mut GradGraph, logits: Var, t: f64) -> Result<Var> {
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::Domain(format!("temperature must be finite and > 0, got {t}")));
    }
    let scaled = g.scale(logits, 1.0 / t);
    g.softmax_rows(scaled)
}

/// Batch-mean KL divergence `sum_i p_i ln(p_i / q_i)` with the `0 ln 0 = 0`
/// convention; probabilities are floored at [`PROB_FLOOR`] inside the logs.
pub fn kl_div(g: &mut GradGraph, p: Var, q: Var) -> Result<Var> {
    if g.shape(p) != g.shape(q) || g.shape(p).len() != 2 {
        return Err(Error::Dimension(format!(
            "kl_div expects matching [b x c] inputs, got {:?} and {:?}",
            g.shape(p),
            g.shape(q)
        )));
    }
    if g.value(p).iter().chain(g.value(q)).any(|&v| v < 0.0) {
        return Err(Error::Domain("kl_div inputs must be non-negative".into()));
    }
    let batch = g.shape(p)[0];
    let ln_p = g.ln_clamped(p, PROB_FLOOR);
    let ln_q = g.ln_clamped(q, PROB_FLOOR);
    let diff = g.sub(ln_p, ln_q)?;
    let terms = g.mul(p, diff)?;
    let total = g.sum_all(terms);
    Ok(g.scale(total, 1.0 / batch as f64))
}

/// Classification target: hard class indices or soft rows summing to one.
pub enum Target<'a> {
    Hard(&'a [usize]),
    Soft(&'a Tensor),
}

/// Batch-mean cross-entropy against hard or soft targets, log-sum-exp
/// stabilized, always at temperature 1.
pub fn cross_entropy(g: &mut GradGraph, logits: Var, target: Target<'_>) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!("cross_entropy expects [b x c] logits, got {shape:?}")));
    }
    let (batch, classes) = (shape[0], shape[1]);
    let y = match target {
        Target::Hard(labels) => {
            if labels.len() != batch {
                return Err(Error::Dimension(format!(
                    "{} labels for batch of {batch}",
                    labels.len()
                )));
            }
            for &l in labels {
                if l >= classes {
                    return Err(Error::Domain(format!("label {l} outside [0, {classes})")));
                }
            }
            let t = one_hot(labels, classes)?;
            g.constant(&t)
        }
        Target::Soft(rows) => {
            if rows.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "soft targets {:?} do not match logits {shape:?}",
                    rows.shape()
                )));
            }
            g.constant(rows)
        }
    };
    let lsm = g.log_softmax_rows(logits)?;
    let picked = g.mul(y, lsm)?;
    let sum = g.sum_all(picked);
    Ok(g.scale(sum, -1.0 / batch as f64))
}

fn require_frozen(g: &GradGraph, branch: Var, what: &str) -> Result<()> {
    if g.requires_grad(branch) {
        return Err(Error::Contract(format!(
            "stop-gradient violated: {what} is attached to the gradient path; \
             compute it from a parameter snapshot or a constant"
        )));
    }
    Ok(())
}

/// Cross-entropy plus the class-wise consistency term
/// `lambda_cls * t^2 * KL(softmax_t(frozen partner) || softmax_t(x))`.
/// With `lambda_cls = 0` the result is the bare cross-entropy node.
pub fn cskd_loss(
    g: &mut GradGraph,
    logits_x: Var,
    frozen_logits_xp: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossValue> {
    cfg.validate()?;
    require_frozen(g, frozen_logits_xp, "the partner-branch logits")?;
    let ce = cross_entropy(g, logits_x, Target::Hard(labels))?;
    if cfg.lambda_cls == 0.0 {
        return Ok(LossValue::bare(g, ce));
    }
    let t = cfg.temperature;
    let p = softmax_t(g, frozen_logits_xp, t)?;
    let q = softmax_t(g, logits_x, t)?;
    let kl = kl_div(g, p, q)?;
    let weighted = g.scale(kl, cfg.lambda_cls * t * t);
    let total = g.add(ce, weighted)?;
    Ok(LossValue {
        total,
        components: LossComponents {
            total: g.scalar_value(total),
            ce: g.scalar_value(ce),
            kl_cls: Some(g.scalar_value(kl)),
            ..Default::default()
        },
    })
}

/// The augmentation-consistency extension: the class-wise loss evaluated on
/// the augmented pair, plus `lambda_e * t^2 * KL(softmax_t(frozen clean x)
/// || softmax_t(augmented x))` anchoring the augmented prediction to the
/// clean one. With `lambda_e = 0` this is exactly [`cskd_loss`] on the
/// augmented pair.
pub fn cskd_e_loss(
    g: &mut GradGraph,
    logits_x_aug: Var,
    frozen_logits_xp_aug: Var,
    frozen_logits_x_clean: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossValue> {
    cfg.validate()?;
    require_frozen(g, frozen_logits_x_clean, "the clean-branch logits")?;
    let base = cskd_loss(g, logits_x_aug, frozen_logits_xp_aug, labels, cfg)?;
    if cfg.lambda_e == 0.0 {
        return Ok(base);
    }
    let t = cfg.temperature;
    let p = softmax_t(g, frozen_logits_x_clean, t)?;
    let q = softmax_t(g, logits_x_aug, t)?;
    let kl = kl_div(g, p, q)?;
    let weighted = g.scale(kl, cfg.lambda_e * t * t);
    let total = g.add(base.total, weighted)?;
    Ok(LossValue {
        total,
        components: LossComponents {
            total: g.scalar_value(total),
            kl_e: Some(g.scalar_value(kl)),
            ..base.components
        },
    })
}

/// Cross-entropy against `(1 - eps) * one_hot + eps / c` soft targets.
pub fn label_smoothing_loss(
    g: &mut GradGraph,
    logits: Var,
    labels: &[usize],
    eps: f64,
) -> Result<Var> {
    if !(eps.is_finite() && (0.0..1.0).contains(&eps)) {
        return Err(Error::Domain(format!("epsilon must lie in [0, 1), got {eps}")));
    }
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!("expected [b x c] logits, got {shape:?}")));
    }
    let classes = shape[1];
    let mut soft = one_hot(labels, classes)?;
    if soft.shape()[0] != shape[0] {
        return Err(Error::Dimension(format!(
            "{} labels for batch of {}",
            labels.len(),
            shape[0]
        )));
    }
    for v in soft.data_mut() {
        *v = (1.0 - eps) * *v + eps / classes as f64;
    }
    cross_entropy(g, logits, Target::Soft(&soft))
}

/// Cross-entropy minus `beta` times the batch-mean predictive entropy.
pub fn max_entropy_loss(
    g: &mut GradGraph,
    logits: Var,
    labels: &[usize],
    beta: f64,
) -> Result<Var> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::Domain(format!("beta must be finite and >= 0, got {beta}")));
    }
    let ce = cross_entropy(g, logits, Target::Hard(labels))?;
    if beta == 0.0 {
        return Ok(ce);
    }
    let batch = g.shape(logits)[0];
    let probs = g.softmax_rows(logits)?;
    let ln_p = g.ln_clamped(probs, PROB_FLOOR);
    let plnp = g.mul(probs, ln_p)?;
    let neg_h = g.sum_all(plnp);
    let h = g.scale(neg_h, -1.0 / batch as f64);
    let penalty = g.scale(h, beta);
    g.sub(ce, penalty)
}

/// Batch-mean predictive entropy of a logits node, for logging.
pub fn mean_entropy(g: &mut GradGraph, logits: Var) -> Result<Var> {
    let batch = g.shape(logits)[0];
    let probs = g.softmax_rows(logits)?;
    let ln_p = g.ln_clamped(probs, PROB_FLOOR);
    let plnp = g.mul(probs, ln_p)?;
    let neg_h = g.sum_all(plnp);
    Ok(g.scale(neg_h, -1.0 / batch as f64))
}

/// Teacher distillation stacked on the class-wise loss:
/// `L = cskd + lambda_kd * t^2 * KL(softmax_t(teacher) || softmax_t(student))`.
/// With `lambda_cls = 0` (no partner needed) this is plain teacher
/// distillation; with `lambda_kd = 0` it reduces to [`cskd_loss`].
pub fn kd_combined_loss(
    g: &mut GradGraph,
    student_logits: Var,
    frozen_teacher_logits: Var,
    frozen_logits_xp: Option<Var>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossValue> {
    cfg.validate()?;
    require_frozen(g, frozen_teacher_logits, "the teacher logits")?;
    let base = if cfg.lambda_cls > 0.0 {
        let partner = frozen_logits_xp.ok_or_else(|| {
            Error::Contract("lambda_cls > 0 requires partner-branch logits".into())
        })?;
        cskd_loss(g, student_logits, partner, labels, cfg)?
    } else {
        let ce = cross_entropy(g, student_logits, Target::Hard(labels))?;
        LossValue::bare(g, ce)
    };
    if cfg.lambda_kd == 0.0 {
        return Ok(base);
    }
    let t = cfg.temperature;
    let p = softmax_t(g, frozen_teacher_logits, t)?;
    let q = softmax_t(g, student_logits, t)?;
    let kl = kl_div(g, p, q)?;
    let weighted = g.scale(kl, cfg.lambda_kd * t * t);
    let total = g.add(base.total, weighted)?;
    Ok(LossValue {
        total,
        components: LossComponents {
            total: g.scalar_value(total),
            kl_kd: Some(g.scalar_value(kl)),
            ..base.components
        },
    })
}

/// The class-wise loss applied to mixed inputs and mixed labels: soft
/// cross-entropy on the mixed batch plus the usual consistency term against
/// the frozen mixed-partner branch.
pub fn mixup_cskd_loss(
    g: &mut GradGraph,
    logits_mixed: Var,
    frozen_logits_xp_mixed: Option<Var>,
    soft_targets: &Tensor,
    cfg: &LossConfig,
) -> Result<LossValue> {
    cfg.validate()?;
    let ce = cross_entropy(g, logits_mixed, Target::Soft(soft_targets))?;
    if cfg.lambda_cls == 0.0 {
        return Ok(LossValue::bare(g, ce));
    }
    let partner = frozen_logits_xp_mixed.ok_or_else(|| {
        Error::Contract("lambda_cls > 0 requires mixed partner-branch logits".into())
    })?;
    require_frozen(g, partner, "the mixed partner-branch logits")?;
    let t = cfg.temperature;
    let p = softmax_t(g, partner, t)?;
    let q = softmax_t(g, logits_mixed, t)?;
    let kl = kl_div(g, p, q)?;
    let weighted = g.scale(kl, cfg.lambda_cls * t * t);
    let total = g.add(ce, weighted)?;
    Ok(LossValue {
        total,
        components: LossComponents {
            total: g.scalar_value(total),
            ce: g.scalar_value(ce),
            kl_cls: Some(g.scalar_value(kl)),
            ..Default::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits_var(g: &mut GradGraph, data: Vec<f64>, shape: &[usize], grad: bool) -> Var {
        let t = Tensor::new(data, shape).unwrap().with_requires_grad(grad);
        g.leaf(&t)
    }

    #[test]
    fn softmax_t_symmetry_and_analytic() {
        let mut g = GradGraph::new();
        let z = logits_var(&mut g, vec![0.0, 0.0], &[1, 2], false);
        for t in [0.5, 1.0, 4.0] {
            let s = softmax_t(&mut g, z, t).unwrap();
            assert_eq!(g.value(s), &[0.5, 0.5]);
        }

        let z = logits_var(&mut g, vec![2.0f64.ln(), 0.0], &[1, 2], false);
        let s = softmax_t(&mut g, z, 1.0).unwrap();
        assert!((g.value(s)[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.value(s)[1] - 1.0 / 3.0).abs() < 1e-15);

        let z = logits_var(&mut g, vec![1.0, 3.0], &[1, 2], false);
        let s = softmax_t(&mut g, z, 4.0).unwrap();
        assert!((g.value(s)[0] - 0.37754).abs() < 1e-5);
        assert!((g.value(s)[1] - 0.62246).abs() < 1e-5);
    }

    #[test]
    fn softmax_t_rejects_bad_temperature() {
        let mut g = GradGraph::new();
        let z = logits_var(&mut g, vec![0.0, 1.0], &[1, 2], false);
        assert!(matches!(softmax_t(&mut g, z, 0.0), Err(Error::Domain(_))));
        assert!(matches!(softmax_t(&mut g, z, -2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn kl_known_values() {
        let mut g = GradGraph::new();
        let p = logits_var(&mut g, vec![1.0, 0.0], &[1, 2], false);
        let q = logits_var(&mut g, vec![0.5, 0.5], &[1, 2], false);
        let kl = kl_div(&mut g, p, q).unwrap();
        assert!((g.scalar_value(kl) - 0.693147).abs() < 1e-6);

        let p = logits_var(&mut g, vec![0.5, 0.5], &[1, 2], false);
        let q = logits_var(&mut g, vec![0.25, 0.75], &[1, 2], false);
        let kl = kl_div(&mut g, p, q).unwrap();
        assert!((g.scalar_value(kl) - 0.143841).abs() < 1e-6);
    }

    #[test]
    fn kl_of_identical_rows_is_zero() {
        let mut g = GradGraph::new();
        let p = logits_var(&mut g, vec![0.2, 0.3, 0.5], &[1, 3], false);
        let q = logits_var(&mut g, vec![0.2, 0.3, 0.5], &[1, 3], false);
        let kl = kl_div(&mut g, p, q).unwrap();
        assert_eq!(g.scalar_value(kl), 0.0);
    }

    #[test]
    fn kl_rejects_negative_entries() {
        let mut g = GradGraph::new();
        let p = logits_var(&mut g, vec![1.1, -0.1], &[1, 2], false);
        let q = logits_var(&mut g, vec![0.5, 0.5], &[1, 2], false);
        assert!(matches!(kl_div(&mut g, p, q), Err(Error::Domain(_))));
    }

    #[test]
    fn cross_entropy_known_values() {
        let mut g = GradGraph::new();
        // uniform logits, C=4 -> ln 4
        let z = logits_var(&mut g, vec![0.0; 4], &[1, 4], false);
        let ce = cross_entropy(&mut g, z, Target::Hard(&[2])).unwrap();
        assert!((g.scalar_value(ce) - 4.0f64.ln()).abs() < 1e-12);

        // huge matching margin -> ~0
        let z = logits_var(&mut g, vec![50.0, -50.0], &[1, 2], false);
        let ce = cross_entropy(&mut g, z, Target::Hard(&[0])).unwrap();
        assert!(g.scalar_value(ce) < 1e-12);

        // logits [1, 2], label 1
        let z = logits_var(&mut g, vec![1.0, 2.0], &[1, 2], false);
        let ce = cross_entropy(&mut g, z, Target::Hard(&[1])).unwrap();
        assert!((g.scalar_value(ce) - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut g = GradGraph::new();
        let z = logits_var(&mut g, vec![0.0; 3], &[1, 3], false);
        assert!(matches!(
            cross_entropy(&mut g, z, Target::Hard(&[3])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn cskd_scalar_example() {
        // B=1, C=2, logits_x=[0,0], frozen=[ln 2, 0], y=0, T=1, lambda=1
        let cfg = LossConfig {
            kind: LossKind::Cskd,
            temperature: 1.0,
            lambda_cls: 1.0,
            ..Default::default()
        };
        let mut g = GradGraph::new();
        let x = logits_var(&mut g, vec![0.0, 0.0], &[1, 2], true);
        let frozen = logits_var(&mut g, vec![2.0f64.ln(), 0.0], &[1, 2], false);
        let loss = cskd_loss(&mut g, x, frozen, &[0], &cfg).unwrap();
        assert!((loss.components.total - 0.749780).abs() < 1e-6);
        assert!((loss.components.ce - 0.693147).abs() < 1e-6);
        assert!((loss.components.kl_cls.unwrap() - 0.056633).abs() < 1e-6);
    }

    #[test]
    fn cskd_reductions() {
        let mut cfg = LossConfig::default();
        cfg.temperature = 2.0;

        let mut g = GradGraph::new();
        let x = logits_var(&mut g, vec![0.4, -0.2, 1.0], &[1, 3], true);
        let frozen = logits_var(&mut g, vec![0.1, 0.2, 0.3], &[1, 3], false);

        // lambda_cls = 0 collapses to the CE node bit-exactly
        cfg.lambda_cls = 0.0;
        let loss = cskd_loss(&mut g, x, frozen, &[2], &cfg).unwrap();
        let ce = cross_entropy(&mut g, x, Target::Hard(&[2])).unwrap();
        assert_eq!(g.scalar_value(loss.total), g.scalar_value(ce));

        // identical branches zero the divergence
        cfg.lambda_cls = 1.0;
        let same = logits_var(&mut g, vec![0.4, -0.2, 1.0], &[1, 3], false);
        let loss = cskd_loss(&mut g, x, same, &[2], &cfg).unwrap();
        assert_eq!(loss.components.kl_cls, Some(0.0));
        assert_eq!(g.scalar_value(loss.total), g.scalar_value(ce));
    }

    #[test]
    fn cskd_rejects_graph_attached_frozen_branch() {
        let cfg = LossConfig::default();
        let mut g = GradGraph::new();
        let x = logits_var(&mut g, vec![0.0, 0.0], &[1, 2], true);
        let leaky = logits_var(&mut g, vec![1.0, 0.0], &[1, 2], true);
        assert!(matches!(
            cskd_loss(&mut g, x, leaky, &[0], &cfg),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cskd_e_reduction_and_consistency_value() {
        let mut cfg = LossConfig { temperature: 1.0, lambda_cls: 0.0, lambda_e: 1.0, ..Default::default() };
        cfg.kind = LossKind::CskdE;

        let mut g = GradGraph::new();
        let aug = logits_var(&mut g, vec![0.0, 0.0], &[1, 2], true);
        let partner = logits_var(&mut g, vec![0.3, -0.3], &[1, 2], false);
        let clean = logits_var(&mut g, vec![2.0f64.ln(), 0.0], &[1, 2], false);

        // lambda_cls = 0, lambda_e = 1, T = 1: total = CE + KL([2/3,1/3] || [1/2,1/2])
        let loss = cskd_e_loss(&mut g, aug, partner, clean, &[0], &cfg).unwrap();
        let kl_e = loss.components.kl_e.unwrap();
        assert!((kl_e - 0.056633).abs() < 1e-6);
        assert!((loss.components.total - (loss.components.ce + kl_e)).abs() < 1e-12);

        // lambda_e = 0 collapses to cskd on the augmented pair, bit-exact
        cfg.lambda_e = 0.0;
        cfg.lambda_cls = 1.0;
        let a = cskd_e_loss(&mut g, aug, partner, clean, &[0], &cfg).unwrap();
        let b = cskd_loss(&mut g, aug, partner, &[0], &cfg).unwrap();
        assert_eq!(g.scalar_value(a.total), g.scalar_value(b.total));

        // augmentation disabled (aug == clean values) zeroes the consistency term
        cfg.lambda_e = 1.0;
        let clean_eq = logits_var(&mut g, vec![0.0, 0.0], &[1, 2], false);
        let c = cskd_e_loss(&mut g, aug, partner, clean_eq, &[0], &cfg).unwrap();
        assert_eq!(c.components.kl_e, Some(0.0));
    }

    #[test]
    fn label_smoothing_values() {
        let mut g = GradGraph::new();
        let z = logits_var(&mut g, vec![0.7, -0.4], &[1, 2], false);

        // eps = 0 equals hard CE bit-exactly
        let smooth = label_smoothing_loss(&mut g, z, &[0], 0.0).unwrap();
        let hard = cross_entropy(&mut g, z, Target::Hard(&[0])).unwrap();
        assert_eq!(g.scalar_value(smooth), g.scalar_value(hard));

        // uniform logits make the loss eps-independent: always ln 2
        let z0 = logits_var(&mut g, vec![0.0, 0.0], &[1, 2], false);
        let l = label_smoothing_loss(&mut g, z0, &[0], 0.2).unwrap();
        assert!((g.scalar_value(l) - 2.0f64.ln()).abs() < 1e-12);

        // eps -> 1 approaches CE against the uniform distribution
        let z = logits_var(&mut g, vec![1.0, -1.0, 0.5], &[1, 3], false);
        let near_one = label_smoothing_loss(&mut g, z, &[0], 0.999).unwrap();
        let mut uniform = Tensor::new(vec![1.0 / 3.0; 3], &[1, 3]).unwrap();
        uniform.set_requires_grad(false);
        let vs = cross_entropy(&mut g, z, Target::Soft(&uniform)).unwrap();
        assert!((g.scalar_value(near_one) - g.scalar_value(vs)).abs() < 1e-2);

        assert!(label_smoothing_loss(&mut g, z, &[0], 1.0).is_err());
    }

    #[test]
    fn max_entropy_values() {
        let mut g = GradGraph::new();

        // beta = 0 is plain CE
        let z = logits_var(&mut g, vec![0.5, -0.5], &[1, 2], false);
        let me = max_entropy_loss(&mut g, z, &[0], 0.0).unwrap();
        let ce = cross_entropy(&mut g, z, Target::Hard(&[0])).unwrap();
        assert_eq!(g.scalar_value(me), g.scalar_value(ce));

        // uniform logits, C=4, beta=1: ln 4 - ln 4 = 0
        let z = logits_var(&mut g, vec![0.0; 4], &[1, 4], false);
        let me = max_entropy_loss(&mut g, z, &[1], 1.0).unwrap();
        assert!(g.scalar_value(me).abs() < 1e-12);

        // logits [1, 2], y=1, beta=0.5: CE = ln(1 + e^-1), H = ln(1 + e) - e/(1 + e)
        let z = logits_var(&mut g, vec![1.0, 2.0], &[1, 2], false);
        let me = max_entropy_loss(&mut g, z, &[1], 0.5).unwrap();
        let ce = (1.0 + (-1.0f64).exp()).ln();
        let h = (1.0 + 1.0f64.exp()).ln() - 1.0f64.exp() / (1.0 + 1.0f64.exp());
        assert!((g.scalar_value(me) - (ce - 0.5 * h)).abs() < 1e-12);
        assert!((g.scalar_value(me) - 0.022160).abs() < 1e-5);
    }

    #[test]
    fn kd_reductions_and_value() {
        let cfg = LossConfig { temperature: 1.0, lambda_cls: 0.0, lambda_kd: 1.0, ..Default::default() };
        let mut g = GradGraph::new();
        let student = logits_var(&mut g, vec![0.0, 0.0], &[1, 2], true);
        let teacher = logits_var(&mut g, vec![2.0f64.ln(), 0.0], &[1, 2], false);

        // lambda_cls = 0, lambda_kd = 1, T = 1: CE + 0.056633
        let loss = kd_combined_loss(&mut g, student, teacher, None, &[0], &cfg).unwrap();
        assert!((loss.components.kl_kd.unwrap() - 0.056633).abs() < 1e-6);

        // teacher == student logits: divergence term is zero
        let same = logits_var(&mut g, vec![0.0, 0.0], &[1, 2], false);
        let loss = kd_combined_loss(&mut g, student, same, None, &[0], &cfg).unwrap();
        assert_eq!(loss.components.kl_kd, Some(0.0));

        // lambda_kd = 0 equals cskd bit-exactly
        let cfg0 = LossConfig { temperature: 1.0, lambda_cls: 1.0, lambda_kd: 0.0, ..Default::default() };
        let partner = logits_var(&mut g, vec![0.2, -0.2], &[1, 2], false);
        let a = kd_combined_loss(&mut g, student, teacher, Some(partner), &[0], &cfg0).unwrap();
        let b = cskd_loss(&mut g, student, partner, &[0], &cfg0).unwrap();
        assert_eq!(g.scalar_value(a.total), g.scalar_value(b.total));
    }

    #[test]
    fn components_sum_to_total() {
        let cfg = LossConfig {
            temperature: 3.0,
            lambda_cls: 2.0,
            lambda_e: 0.7,
            lambda_kd: 1.3,
            ..Default::default()
        };
        let mut g = GradGraph::new();
        let x = logits_var(&mut g, vec![0.3, -0.6, 0.9, 0.1, 0.4, -0.2], &[2, 3], true);
        let xp = logits_var(&mut g, vec![0.5, 0.2, -0.1, 0.0, 0.3, 0.6], &[2, 3], false);
        let clean = logits_var(&mut g, vec![0.1, 0.1, 0.7, -0.3, 0.2, 0.2], &[2, 3], false);
        let loss = cskd_e_loss(&mut g, x, xp, clean, &[0, 2], &cfg).unwrap();
        let t2 = cfg.temperature * cfg.temperature;
        let reconstructed = loss.components.ce
            + cfg.lambda_cls * t2 * loss.components.kl_cls.unwrap()
            + cfg.lambda_e * t2 * loss.components.kl_e.unwrap();
        assert!((loss.components.total - reconstructed).abs() < 1e-12);
    }

    #[test]
    fn mixup_cskd_uses_soft_targets() {
        let cfg = LossConfig { temperature: 1.0, lambda_cls: 1.0, ..Default::default() };
        let mut g = GradGraph::new();
        let x = logits_var(&mut g, vec![0.0, 0.0], &[1, 2], true);
        let xp = logits_var(&mut g, vec![0.1, -0.1], &[1, 2], false);
        let soft = Tensor::new(vec![0.5, 0.5], &[1, 2]).unwrap();
        let loss = mixup_cskd_loss(&mut g, x, Some(xp), &soft, &cfg).unwrap();
        // CE of uniform logits against [0.5, 0.5] is ln 2
        assert!((loss.components.ce - 2.0f64.ln()).abs() < 1e-12);
        assert!(loss.components.kl_cls.unwrap() > 0.0);
    }
}

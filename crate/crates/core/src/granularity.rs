//! Per-granularity category distributions, certainty-driven teacher/student
//! selection, the cross-granularity distillation loss, certainty-weighted
//! fusion and cosine scoring against class prototypes.
//!
//! Granularity features have different patch counts, so fusion happens after
//! the average-pooling half of the semantic mapping: each `F̂^g` is pooled to
//! a `D`-vector, the pooled vectors are mixed with weights `w^g`, and the
//! shared linear map then takes the fused vector to attribute space.

use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::params::HeadParams;
use crate::tensor::{PoolKind, Tape, Tensor, Var};

/// Average pooling over patches: `N_v × D → D`.
pub fn pool_patches(tape: &mut Tape<'_>, visual: Var) -> Result<Var> {
    tape.pool(visual, 0, PoolKind::Mean)
}

/// Linear half of the semantic mapping, `D → N_s`.
pub fn map_pooled(tape: &mut Tape<'_>, pooled: Var, head: &HeadParams<Var>) -> Result<Var> {
    let d = tape.shape(pooled)[0];
    let row = tape.reshape(pooled, [1, d])?;
    let z = tape.matmul(row, head.w)?;
    let z = tape.add_row(z, head.b)?;
    let n_s = tape.shape(z)[1];
    tape.reshape(z, [n_s])
}

/// Semantic mapping `φ`: average pooling followed by the linear map.
pub fn project(tape: &mut Tape<'_>, visual: Var, head: &HeadParams<Var>) -> Result<Var> {
    let pooled = pool_patches(tape, visual)?;
    map_pooled(tape, pooled, head)
}

/// Cosine similarity of predicted attributes with every prototype row.
pub fn score(tape: &mut Tape<'_>, predicted: Var, prototypes: Var) -> Result<Var> {
    tape.cosine_rows(predicted, prototypes)
}

/// Tempered logits `cos(φ(F̂), a_k) / τ` and their softmax.
pub fn category_distribution(
    tape: &mut Tape<'_>,
    predicted: Var,
    seen_prototypes: Var,
    tau: f64,
) -> Result<(Var, Var)> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let cos = score(tape, predicted, seen_prototypes)?;
    let logits = tape.scale(cos, tau.recip());
    let p = tape.softmax_rows(logits);
    Ok((logits, p))
}

/// Largest entry of a distribution.
pub fn certainty(p: &[f64]) -> f64 {
    p.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `(teacher, student)` = (argmax, argmin) of the certainties, lowest index
/// winning ties. Indices are zero-based.
pub fn select_granularities(certainties: &[f64]) -> (usize, usize) {
    assert!(!certainties.is_empty(), "at least one granularity");
    let mut tg = 0;
    let mut sg = 0;
    for (g, &c) in certainties.iter().enumerate() {
        if c > certainties[tg] {
            tg = g;
        }
        if c < certainties[sg] {
            sg = g;
        }
    }
    (tg, sg)
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Objective used to pull the student granularity towards the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScglMode {
    /// Entropy-weighted KL divergence.
    #[default]
    Ours,
    L1,
    L2,
    Kl,
    Jsd,
}

impl FromStr for ScglMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ours" => ScglMode::Ours,
            "l1" => ScglMode::L1,
            "l2" => ScglMode::L2,
            "kl" => ScglMode::Kl,
            "jsd" => ScglMode::Jsd,
            _ => return Err(Error::Config(format!("unknown loss mode `{s}`"))),
        })
    }
}

impl ScglMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScglMode::Ours => "ours",
            ScglMode::L1 => "l1",
            ScglMode::L2 => "l2",
            ScglMode::Kl => "kl",
            ScglMode::Jsd => "jsd",
        }
    }
}

/// Distillation loss from a detached teacher distribution to the student's
/// logits. In [`ScglMode::Ours`] this is `H(p_s)·Σ_k p_t,k ln(p_t,k / p_s,k)`
/// with the entropy weight held constant at its current value.
pub fn cross_granularity_loss(
    tape: &mut Tape<'_>,
    teacher: &[f64],
    student_logits: Var,
    mode: ScglMode,
) -> Result<Var> {
    let weight = match mode {
        ScglMode::Ours => {
            let q = tape.value(student_logits).softmax_rows();
            entropy(q.data())
        }
        _ => 1.0,
    };
    distillation_loss(tape, teacher, student_logits, mode, weight)
}

/// [`cross_granularity_loss`] with an explicit constant weight on the KL
/// term (ignored by the non-KL modes).
pub fn distillation_loss(
    tape: &mut Tape<'_>,
    teacher: &[f64],
    student_logits: Var,
    mode: ScglMode,
    weight: f64,
) -> Result<Var> {
    let k = tape.shape(student_logits)[0];
    if teacher.len() != k {
        return shape_err("cross_granularity_loss", &[teacher.len()], tape.shape(student_logits));
    }
    let t = tape.constant(Tensor::vector(teacher.to_vec()));
    let neg_entropy_t: f64 = teacher.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum();
    match mode {
        ScglMode::Ours | ScglMode::Kl => {
            let weight = if mode == ScglMode::Ours { weight } else { 1.0 };
            let log_q = tape.log_softmax_rows(student_logits);
            let cross = tape.mul(t, log_q)?;
            let cross = tape.sum(cross);
            let scaled = tape.scale(cross, -weight);
            let offset = tape.constant(Tensor::scalar(weight * neg_entropy_t));
            tape.add(scaled, offset)
        }
        ScglMode::L1 | ScglMode::L2 => {
            let q = tape.softmax_rows(student_logits);
            let diff = tape.sub(t, q)?;
            let term = if mode == ScglMode::L1 { tape.abs(diff) } else { tape.mul(diff, diff)? };
            Ok(tape.sum(term))
        }
        ScglMode::Jsd => {
            let q = tape.softmax_rows(student_logits);
            let log_q = tape.log_softmax_rows(student_logits);
            let mix = tape.add(t, q)?;
            let mix = tape.scale(mix, 0.5);
            let log_m = tape.log(mix)?;
            // ½Σ t(ln t − ln m) + ½Σ q(ln q − ln m)
            let tm = tape.mul(t, log_m)?;
            let tm = tape.sum(tm);
            let diff = tape.sub(log_q, log_m)?;
            let qd = tape.mul(q, diff)?;
            let qd = tape.sum(qd);
            let a = tape.sub(qd, tm)?;
            let a = tape.scale(a, 0.5);
            let c = tape.constant(Tensor::scalar(0.5 * neg_entropy_t));
            tape.add(a, c)
        }
    }
}

/// `w^g = C^g / Σ C`.
pub fn fusion_weights(certainties: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = certainties.iter().sum();
    if certainties.iter().any(|&c| c < 0.0) || !(total > 0.0) {
        return Err(Error::Degenerate("fusion certainties must be non-negative and not all zero".into()));
    }
    Ok(certainties.iter().map(|c| c / total).collect())
}

/// `Σ w^g·x^g` with constant weights.
pub fn fuse(tape: &mut Tape<'_>, features: &[Var], weights: &[f64]) -> Result<Var> {
    if features.is_empty() || features.len() != weights.len() {
        return shape_err("fuse", &[features.len()], &[weights.len()]);
    }
    let mut acc = tape.scale(features[0], weights[0]);
    for (&f, &w) in features.iter().zip(weights).skip(1) {
        let s = tape.scale(f, w);
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

/// Certainty-weighted combination of equally shaped feature tensors.
pub fn fuse_values(features: &[Tensor], certainties: &[f64]) -> Result<Tensor> {
    let w = fusion_weights(certainties)?;
    if features.is_empty() || features.len() != w.len() {
        return shape_err("fuse_values", &[features.len()], &[w.len()]);
    }
    let mut acc = features[0].scale(w[0]);
    for (f, &wg) in features.iter().zip(&w).skip(1) {
        acc = acc.add(&f.scale(wg))?;
    }
    Ok(acc)
}

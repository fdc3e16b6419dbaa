//! Dual semantic-visual transformer, one per granularity.
//!
//! The attribute-side encoder adapts the shared attribute embedding `S` to
//! the instance's patches `F` (cross-attention, group-compact gating and an
//! activation MLP, iterated). The patch-side decoder then lets every patch
//! attend to the adapted attributes, mixes information across patches with
//! an inverted-residual bottleneck, and finishes with a residual MLP.
//!
//! All operations record onto a [`Tape`]; parameters arrive as [`Var`]s.

use crate::error::{shape_err, Result};
use crate::params::{DsvtmParams, ImseParams, SmidParams};
use crate::tensor::{PoolKind, Tape, Var};

/// What the `+S` residual of the attention and gating steps refers to after
/// the first encoder iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResidualSource {
    /// The original shared attributes, every iteration.
    #[default]
    Original,
    /// The previous iteration's output.
    Previous,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DsvtmOptions {
    pub iterations: usize,
    /// Divide attention logits by `√D`.
    pub scaled_attention: bool,
    pub residual: ResidualSource,
}

impl Default for DsvtmOptions {
    fn default() -> Self {
        DsvtmOptions {
            iterations: 2,
            scaled_attention: false,
            residual: ResidualSource::Original,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ImseOutput {
    /// Instance-centric attributes, `N_s × D`.
    pub attributes: Var,
    /// Affinity of the final iteration, `N_s × N_v`.
    pub affinity: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct DsvtmOutput {
    pub attributes: Var,
    pub visual: Var,
    pub affinity: Var,
}

/// `x·w + b` with `b` broadcast over rows.
pub fn linear(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Row-wise two-layer MLP with GELU hidden activation.
pub fn mlp(tape: &mut Tape<'_>, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = linear(tape, x, w1, b1)?;
    let h = tape.gelu(h);
    linear(tape, h, w2, b2)
}

fn attention_logits(tape: &mut Tape<'_>, q: Var, k: Var, scaled: bool) -> Result<Var> {
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    Ok(if scaled {
        let d = tape.shape(q)[1] as f64;
        tape.scale(logits, d.sqrt().recip())
    } else {
        logits
    })
}

/// Attributes attend to patches.
///
/// `M = (S_q·W_q + b_q)(F·W_k + b_k)ᵀ` and
/// `S̃ = softmax_rows(M)·(F·W_v + b_v) + S_res`. Returns `(S̃, M)`.
pub fn imse_attention(
    tape: &mut Tape<'_>,
    query_attrs: Var,
    residual: Var,
    patches: Var,
    p: &ImseParams<Var>,
    scaled: bool,
) -> Result<(Var, Var)> {
    if tape.shape(query_attrs)[1] != tape.shape(patches)[1] {
        return shape_err("imse_attention", tape.shape(query_attrs), tape.shape(patches));
    }
    let q = linear(tape, query_attrs, p.q_w, p.q_b)?;
    let k = linear(tape, patches, p.k_w, p.k_b)?;
    let v = linear(tape, patches, p.v_w, p.v_b)?;
    let affinity = attention_logits(tape, q, k, scaled)?;
    let weights = tape.softmax_rows(affinity);
    let attended = tape.matmul(weights, v)?;
    let out = tape.add(attended, residual)?;
    Ok((out, affinity))
}

/// `‖GMP(M) − a_y‖²`, max-pooling the affinity over patches.
pub fn semantic_alignment_loss(tape: &mut Tape<'_>, affinity: Var, target: Var) -> Result<Var> {
    let pooled = tape.pool(affinity, 1, PoolKind::Max)?;
    if tape.shape(pooled) != tape.shape(target) {
        return shape_err("semantic_alignment_loss", tape.shape(affinity), tape.shape(target));
    }
    let diff = tape.sub(pooled, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.sum(sq))
}

/// Group-compact gating: `gate = sigmoid(GELU(GMP_D(S̃)·W₁ + b₁)·W₂ + b₂)`,
/// then `S̄ = gate ⊙_rows S̃ + S`.
pub fn attribute_communicate(tape: &mut Tape<'_>, s_tilde: Var, residual: Var, p: &ImseParams<Var>) -> Result<Var> {
    let n_s = tape.shape(s_tilde)[0];
    let pooled = tape.pool(s_tilde, 1, PoolKind::Max)?;
    let row = tape.reshape(pooled, [1, n_s])?;
    let h = linear(tape, row, p.gate_w1, p.gate_b1)?;
    let h = tape.gelu(h);
    let g = linear(tape, h, p.gate_w2, p.gate_b2)?;
    let g = tape.sigmoid(g);
    let gate = tape.reshape(g, [n_s])?;
    let gated = tape.scale_rows(s_tilde, gate)?;
    tape.add(gated, residual)
}

/// `Ŝ = MLP(S̄) + S̄ + S̃`.
pub fn attribute_activate(tape: &mut Tape<'_>, s_bar: Var, s_tilde: Var, p: &ImseParams<Var>) -> Result<Var> {
    let m = mlp(tape, s_bar, p.mlp_w1, p.mlp_b1, p.mlp_w2, p.mlp_b2)?;
    let y = tape.add(m, s_bar)?;
    tape.add(y, s_tilde)
}

/// Iterated attribute adaptation. Iteration `t > 1` queries with the
/// previous output; the affinity returned is the last iteration's.
pub fn imse_forward(
    tape: &mut Tape<'_>,
    shared: Var,
    patches: Var,
    p: &ImseParams<Var>,
    opts: &DsvtmOptions,
) -> Result<ImseOutput> {
    let mut current = shared;
    let mut affinity = None;
    for _ in 0..opts.iterations.max(1) {
        let residual = match opts.residual {
            ResidualSource::Original => shared,
            ResidualSource::Previous => current,
        };
        let (s_tilde, m) = imse_attention(tape, current, residual, patches, p, opts.scaled_attention)?;
        let s_bar = attribute_communicate(tape, s_tilde, residual, p)?;
        current = attribute_activate(tape, s_bar, s_tilde, p)?;
        affinity = Some(m);
    }
    Ok(ImseOutput {
        attributes: current,
        affinity: affinity.expect("at least one iteration"),
    })
}

/// Patches attend to instance-centric attributes:
/// `F̃ = softmax(Q_F·K_Ŝᵀ)·V_Ŝ + F`.
pub fn smid_attention(tape: &mut Tape<'_>, patches: Var, attrs: Var, p: &SmidParams<Var>, scaled: bool) -> Result<Var> {
    if tape.shape(attrs)[1] != tape.shape(patches)[1] {
        return shape_err("smid_attention", tape.shape(patches), tape.shape(attrs));
    }
    let q = linear(tape, patches, p.q_w, p.q_b)?;
    let k = linear(tape, attrs, p.k_w, p.k_b)?;
    let v = linear(tape, attrs, p.v_w, p.v_b)?;
    let logits = attention_logits(tape, q, k, scaled)?;
    let weights = tape.softmax_rows(logits);
    let attended = tape.matmul(weights, v)?;
    tape.add(attended, patches)
}

/// Inverted-residual mixing across the patch axis:
/// `F_ex = GELU(F̃ᵀ·W_ex)`, `F_se = GELU(F_ex·W_se)`, `F_na = F_se·W_na`,
/// `F̄ = F_naᵀ + F̃`.
pub fn patch_mix(tape: &mut Tape<'_>, f_tilde: Var, p: &SmidParams<Var>) -> Result<Var> {
    let n_v = tape.shape(f_tilde)[0];
    if tape.shape(p.ex_w)[0] != n_v {
        return shape_err("patch_mix", tape.shape(f_tilde), tape.shape(p.ex_w));
    }
    let xt = tape.transpose(f_tilde)?;
    let ex = linear(tape, xt, p.ex_w, p.ex_b)?;
    let ex = tape.gelu(ex);
    let se = linear(tape, ex, p.se_w, p.se_b)?;
    let se = tape.gelu(se);
    let na = linear(tape, se, p.na_w, p.na_b)?;
    let back = tape.transpose(na)?;
    tape.add(back, f_tilde)
}

/// `F̂ = MLP(F̄) + F̄` after attention and patch mixing.
pub fn smid_forward(tape: &mut Tape<'_>, patches: Var, attrs: Var, p: &SmidParams<Var>, scaled: bool) -> Result<Var> {
    let f_tilde = smid_attention(tape, patches, attrs, p, scaled)?;
    let f_bar = patch_mix(tape, f_tilde, p)?;
    let m = mlp(tape, f_bar, p.mlp_w1, p.mlp_b1, p.mlp_w2, p.mlp_b2)?;
    tape.add(m, f_bar)
}

pub fn dsvtm_forward(
    tape: &mut Tape<'_>,
    shared: Var,
    patches: Var,
    p: &DsvtmParams<Var>,
    opts: &DsvtmOptions,
) -> Result<DsvtmOutput> {
    let enc = imse_forward(tape, shared, patches, &p.imse, opts)?;
    let visual = smid_forward(tape, patches, enc.attributes, &p.smid, opts.scaled_attention)?;
    Ok(DsvtmOutput {
        attributes: enc.attributes,
        visual,
        affinity: enc.affinity,
    })
}

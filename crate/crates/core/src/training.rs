//! Loss assembly, mini-batch SGD with momentum, and the training loop.

use std::ops::{AddAssign, Mul};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::mix64;
use crate::error::{Component, Error, Result};
use crate::eval::seen_accuracy;
use crate::model::{bind_param_refs, bind_params, forward, ClassSpace, Decision, Example, Features, Model, ModelConfig};
use crate::par::{self, Execution};
use crate::params::ModelParams;
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub sem: f64,
    pub kl: f64,
    pub deb: f64,
}

impl LossWeights {
    /// Fine-grained regime.
    pub const CUB: LossWeights = LossWeights { sem: 0.5, kl: 5.0, deb: 0.001 };
    /// Coarse-grained regime.
    pub const AWA2: LossWeights = LossWeights { sem: 0.5, kl: 5.0, deb: 0.2 };
    pub const ZERO: LossWeights = LossWeights { sem: 0.0, kl: 0.0, deb: 0.0 };
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights::CUB
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Drives parameter init and batch shuffling.
    pub seed: u64,
    /// Divide classification scores by `τ` before the softmax.
    pub cls_temperature: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            lr: 1e-3,
            momentum: 0.9,
            epochs: 30,
            batch_size: 16,
            seed: 1,
            cls_temperature: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.weights;
        for (name, v) in [("lambda_sem", w.sem), ("lambda_kl", w.kl), ("lambda_deb", w.deb)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// `−ln softmax(scores / τ)[target]` over the seen classes.
pub fn classification_loss(tape: &mut Tape<'_>, seen_scores: Var, target: usize, tau: f64) -> Result<Var> {
    let logits = tape.scale(seen_scores, tau.recip());
    let log_p = tape.log_softmax_rows(logits);
    let lp = tape.index(log_p, target)?;
    Ok(tape.scale(lp, -1.0))
}

/// Mean and population variance of the selected entries of a vector.
fn moments(tape: &mut Tape<'_>, scores: Var, idx: &[usize]) -> Result<(Var, Var)> {
    let x = tape.gather(scores, idx)?;
    let mean = tape.mean(x);
    let sq = tape.mul(x, x)?;
    let mean_sq = tape.mean(sq);
    let m2 = tape.mul(mean, mean)?;
    let var = tape.sub(mean_sq, m2)?;
    Ok((mean, var))
}

/// `(α_s − α_u)² + (β_s − β_u)²` from the means and variances of the seen
/// and unseen entries of one score vector.
pub fn debias_loss(tape: &mut Tape<'_>, scores: Var, seen: &[usize], unseen: &[usize]) -> Result<Var> {
    if seen.is_empty() {
        return Err(Error::Empty("seen class set"));
    }
    if unseen.is_empty() {
        return Err(Error::Empty("unseen class set"));
    }
    let (a_s, b_s) = moments(tape, scores, seen)?;
    let (a_u, b_u) = moments(tape, scores, unseen)?;
    let da = tape.sub(a_s, a_u)?;
    let db = tape.sub(b_s, b_u)?;
    let da2 = tape.mul(da, da)?;
    let db2 = tape.mul(db, db)?;
    tape.add(da2, db2)
}

/// Loss terms of one sample; absent terms are zero.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub l_cls: Var,
    pub l_sem: Option<Var>,
    pub d_kl: Option<Var>,
    pub l_deb: Var,
}

/// `L_cls + λ_sem·L_sem + λ_KL·D̂_KL + λ_deb·L_deb`. Terms with a zero weight
/// are left out of the graph entirely.
pub fn total_loss(tape: &mut Tape<'_>, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    let finite = |tape: &Tape<'_>, v: Var, c: Component| {
        if tape.value(v).item().is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(c))
        }
    };
    finite(tape, terms.l_cls, Component::Classification)?;
    finite(tape, terms.l_deb, Component::Debias)?;
    let mut total = terms.l_cls;
    for (term, weight, c) in [
        (terms.l_sem, w.sem, Component::SemanticAlignment),
        (terms.d_kl, w.kl, Component::CrossGranularity),
        (Some(terms.l_deb), w.deb, Component::Debias),
    ] {
        if let Some(v) = term {
            finite(tape, v, c)?;
            if weight != 0.0 {
                let s = tape.scale(v, weight);
                total = tape.add(total, s)?;
            }
        }
    }
    finite(tape, total, Component::Total)?;
    Ok(total)
}

/// Unweighted loss components and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub l_cls: f64,
    pub l_sem: f64,
    pub d_kl: f64,
    pub l_deb: f64,
    pub total: f64,
}

impl AddAssign for LossValues {
    fn add_assign(&mut self, o: LossValues) {
        self.l_cls += o.l_cls;
        self.l_sem += o.l_sem;
        self.d_kl += o.d_kl;
        self.l_deb += o.l_deb;
        self.total += o.total;
    }
}

impl Mul<f64> for LossValues {
    type Output = LossValues;

    fn mul(self, c: f64) -> LossValues {
        LossValues {
            l_cls: self.l_cls * c,
            l_sem: self.l_sem * c,
            d_kl: self.d_kl * c,
            l_deb: self.l_deb * c,
            total: self.total * c,
        }
    }
}

/// Records the complete objective of one labelled sample.
pub fn sample_objective<'a>(
    tape: &mut Tape<'a>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    params: &ModelParams<Var>,
    space: &'a ClassSpace,
    example: &'a Example,
    frozen: Option<&Decision>,
) -> Result<(Var, LossValues, Decision)> {
    let target = space.seen_position(example.label)?;
    let out = forward(tape, model, params, space, &example.visual, Some(example.label), frozen)?;
    let seen = tape.gather(out.scores, space.seen_ids())?;
    let tau = if cfg.cls_temperature { model.tau } else { 1.0 };
    let terms = LossTerms {
        l_cls: classification_loss(tape, seen, target, tau)?,
        l_sem: out.semantic,
        d_kl: out.distill,
        l_deb: debias_loss(tape, out.scores, space.seen_ids(), space.unseen_ids())?,
    };
    let total = total_loss(tape, &terms, &cfg.weights)?;
    let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    let values = LossValues {
        l_cls: val(Some(terms.l_cls)),
        l_sem: val(terms.l_sem),
        d_kl: val(terms.d_kl),
        l_deb: val(Some(terms.l_deb)),
        total: val(Some(total)),
    };
    Ok((total, values, out.decision))
}

fn sample_gradient(model: &Model, space: &ClassSpace, ex: &Example, cfg: &TrainConfig) -> Result<(Vec<Tensor>, LossValues)> {
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, &model.params, true);
    let (total, values, _) = sample_objective(&mut tape, &model.config, cfg, &vars, space, ex, None)?;
    let mut grads = tape.backward(total)?;
    let g = vars
        .values()
        .into_iter()
        .zip(model.params.values())
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    Ok((g, values))
}

/// Mean loss and its gradient over a batch. Samples run independently; the
/// per-sample gradients are summed in batch order.
pub fn batch_gradient(
    model: &Model,
    space: &ClassSpace,
    batch: &[&Example],
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<(ModelParams<Tensor>, LossValues)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let per = par::map(exec, batch, |ex| sample_gradient(model, space, ex, cfg));
    let mut acc: Option<Vec<Tensor>> = None;
    let mut losses = LossValues::default();
    for r in per {
        let (g, l) = r?;
        losses += l;
        acc = Some(match acc {
            None => g,
            Some(mut a) => {
                for (x, y) in a.iter_mut().zip(&g) {
                    for (p, q) in x.data_mut().iter_mut().zip(y.data()) {
                        *p += q;
                    }
                }
                a
            }
        });
    }
    let inv = 1.0 / batch.len() as f64;
    let grads: Vec<Tensor> = acc.expect("non-empty batch").into_iter().map(|t| t.scale(inv)).collect();
    Ok((model.params.with_values(&grads), losses * inv))
}

/// Batch-mean objective with every sample's decision replayed.
pub fn frozen_batch_loss(
    model: &ModelConfig,
    params: &ModelParams<&Tensor>,
    space: &ClassSpace,
    batch: &[&Example],
    decisions: &[Decision],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut sum = 0.0;
    for (ex, d) in batch.iter().zip(decisions) {
        let mut tape = Tape::new();
        let vars = bind_param_refs(&mut tape, params);
        let (_, values, _) = sample_objective(&mut tape, model, cfg, &vars, space, ex, Some(d))?;
        sum += values.total;
    }
    Ok(sum / batch.len() as f64)
}

/// Finite-difference check of the batch objective's gradient with respect to
/// every parameter. Selections, the teacher distribution, the entropy weight
/// and the fusion weights are frozen at the current parameters, matching
/// what backpropagation treats as constant.
pub fn check_gradients(
    model: &Model,
    space: &ClassSpace,
    batch: &[&Example],
    cfg: &TrainConfig,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let decisions = batch
        .iter()
        .map(|ex| {
            let mut tape = Tape::new();
            let vars = bind_params(&mut tape, &model.params, false);
            sample_objective(&mut tape, &model.config, cfg, &vars, space, ex, None).map(|r| r.2)
        })
        .collect::<Result<Vec<_>>>()?;
    let (grads, _) = batch_gradient(model, space, batch, cfg, opts.exec)?;
    let values: Vec<Tensor> = model.params.values().into_iter().cloned().collect();
    let analytic: Vec<Tensor> = grads.values().into_iter().cloned().collect();
    let f = |ps: &[Tensor]| {
        let refs: Vec<&Tensor> = ps.iter().collect();
        let params = model.params.with_values(&refs);
        frozen_batch_loss(&model.config, &params, space, batch, &decisions, cfg).unwrap_or(f64::NAN)
    };
    Ok(grad_check(f, &values, &analytic, opts))
}

/// One row of the epoch log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted means over the epoch, taken before each update.
    pub losses: LossValues,
    /// Seen-class accuracy (percent) on held-out seen samples, search space
    /// restricted to seen classes; absent without held-out samples.
    pub seen_val_acc: Option<f64>,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,l_cls,l_sem,d_kl,l_deb,total,seen_val_acc";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        let acc = self.seen_val_acc.map_or(String::new(), |a| a.to_string());
        format!("{},{},{},{},{},{},{}", self.epoch, l.l_cls, l.l_sem, l.d_kl, l.l_deb, l.total, acc)
    }
}

pub fn epoch_log_csv(log: &[EpochRecord]) -> String {
    let mut out = String::from(EPOCH_LOG_HEADER);
    out.push('\n');
    for r in log {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    /// Shuffle generator after the last epoch.
    pub rng: ChaCha8Rng,
}

pub fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed ^ 0x5A0F_F1E5))
}

/// `v ← μ·v + g`, `θ ← θ − lr·v`.
pub fn sgd_step(params: &mut ModelParams<Tensor>, velocity: &mut ModelParams<Tensor>, grads: &ModelParams<Tensor>, lr: f64, momentum: f64) {
    for ((p, v), g) in params.values_mut().into_iter().zip(velocity.values_mut()).zip(grads.values()) {
        for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
}

/// Runs `cfg.epochs` epochs of shuffled mini-batch training starting from
/// `model`, calling `on_epoch` after each one.
pub fn train(
    features: &Features,
    mut model: Model,
    cfg: &TrainConfig,
    exec: Execution,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config.validate()?;
    let space = &features.space;
    if features.train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    for ex in &features.train {
        space.seen_position(ex.label)?;
    }
    let n = features.train.len();
    let mut rng = shuffle_rng(cfg.seed);
    let mut velocity = model.params.map(|_, t| Tensor::zeros(t.shape().to_vec()));
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossValues::default();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |component| Error::Diverged { component, epoch, batch: b + 1 };
            let batch: Vec<&Example> = chunk.iter().map(|&i| &features.train[i]).collect();
            let (grads, losses) = batch_gradient(&model, space, &batch, cfg, exec).map_err(|e| match e {
                Error::NonFinite(c) => diverged(c),
                e => e,
            })?;
            if grads.values().iter().any(|g| !g.is_finite()) {
                return Err(diverged(Component::Total));
            }
            sgd_step(&mut model.params, &mut velocity, &grads, cfg.lr, cfg.momentum);
            sum += losses * chunk.len() as f64;
        }
        let record = EpochRecord {
            epoch,
            losses: sum * (1.0 / n as f64),
            seen_val_acc: if features.test_seen.is_empty() {
                None
            } else {
                Some(seen_accuracy(&model, space, &features.test_seen, exec)?)
            },
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok(TrainOutcome { model, log, rng })
}

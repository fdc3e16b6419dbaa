//! The assembled network: one DSVTM per granularity over the backbone
//! pyramid, the shared semantic head, certainty-driven teacher/student
//! selection, adaptive fusion and prototype scoring.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig};
use crate::data::{mix64, AttributeTable, Dataset, Sample};
use crate::dsvtm::{dsvtm_forward, semantic_alignment_loss, smid_forward, DsvtmOptions};
use crate::error::{shape_err, Error, Result};
use crate::granularity::{
    category_distribution, certainty, distillation_loss, entropy, fuse, fusion_weights, map_pooled, pool_patches,
    score, select_granularities, ScglMode,
};
use crate::par::{self, Execution};
use crate::params::{ModelLayout, ModelParams};
use crate::tensor::{Tape, Tensor, Var};

/// Which of the four mechanisms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Components {
    pub imse: bool,
    pub smid: bool,
    pub scgl: bool,
    pub amgf: bool,
}

impl Components {
    pub const ALL: Components = Components { imse: true, smid: true, scgl: true, amgf: true };
    /// Pooled backbone features scored directly.
    pub const BASELINE: Components = Components { imse: false, smid: false, scgl: false, amgf: false };
    pub const NAMES: [&'static str; 4] = ["imse", "smid", "scgl", "amgf"];

    fn flags(&self) -> [bool; 4] {
        [self.imse, self.smid, self.scgl, self.amgf]
    }
}

impl Default for Components {
    fn default() -> Self {
        Components::ALL
    }
}

impl fmt::Display for Components {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on: Vec<&str> = Self::NAMES.iter().zip(self.flags()).filter(|(_, b)| *b).map(|(n, _)| *n).collect();
        if on.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&on.join(","))
        }
    }
}

impl FromStr for Components {
    type Err = Error;

    /// Comma-separated switch names, case-insensitive; `none` or an empty
    /// string selects the baseline.
    fn from_str(s: &str) -> Result<Self> {
        let mut c = Components::BASELINE;
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok.to_ascii_lowercase().as_str() {
                "imse" => c.imse = true,
                "smid" => c.smid = true,
                "scgl" => c.scgl = true,
                "amgf" => c.amgf = true,
                "none" => {}
                _ => return Err(Error::Config(format!("unknown switch `{tok}`"))),
            }
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub tau: f64,
    pub dsvtm: DsvtmOptions,
    pub components: Components,
    pub scgl_mode: ScglMode,
    /// `N_h / N_v` for the patch mixer.
    pub hidden_ratio: usize,
    /// Extra scale on the matrices closing a residual branch at init.
    pub branch_scale: f64,
    /// Extra scale on query and key projections at init.
    pub attention_scale: f64,
    /// L2-normalise the alignment targets.
    pub l2_prototypes: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tau: 0.05,
            dsvtm: DsvtmOptions::default(),
            components: Components::ALL,
            scgl_mode: ScglMode::Ours,
            hidden_ratio: 2,
            branch_scale: 0.0,
            attention_scale: 0.35,
            l2_prototypes: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.dsvtm.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.hidden_ratio < 2 {
            return Err(Error::Config(format!("hidden_ratio must be at least 2, got {}", self.hidden_ratio)));
        }
        for (name, v) in [("branch_scale", self.branch_scale), ("attention_scale", self.attention_scale)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Everything class-dependent the forward pass reads: semantic embeddings
/// per granularity, prototype matrices and alignment targets.
#[derive(Debug, Clone)]
pub struct ClassSpace {
    semantics: Vec<Tensor>,
    prototypes: Tensor,
    seen_prototypes: Tensor,
    targets: Vec<Tensor>,
    seen_ids: Vec<usize>,
    unseen_ids: Vec<usize>,
    seen_position: Vec<Option<usize>>,
}

impl ClassSpace {
    pub fn new(table: &AttributeTable, semantics: Vec<Tensor>, l2_targets: bool) -> Self {
        let all: Vec<usize> = (0..table.num_classes()).collect();
        let mut seen_position = vec![None; table.num_classes()];
        for (k, &c) in table.seen_ids().iter().enumerate() {
            seen_position[c] = Some(k);
        }
        let targets = table
            .prototypes()
            .iter()
            .map(|a| {
                let n = if l2_targets { crate::tensor::kernels::norm(a) } else { 1.0 };
                let n = if n > 0.0 { n } else { 1.0 };
                Tensor::vector(a.iter().map(|v| v / n).collect())
            })
            .collect();
        ClassSpace {
            semantics,
            prototypes: table.prototype_matrix(&all, false),
            seen_prototypes: table.prototype_matrix(table.seen_ids(), false),
            targets,
            seen_ids: table.seen_ids().to_vec(),
            unseen_ids: table.unseen_ids().to_vec(),
            seen_position,
        }
    }

    pub fn semantics(&self) -> &[Tensor] {
        &self.semantics
    }

    pub fn num_classes(&self) -> usize {
        self.seen_position.len()
    }

    pub fn seen_ids(&self) -> &[usize] {
        &self.seen_ids
    }

    pub fn unseen_ids(&self) -> &[usize] {
        &self.unseen_ids
    }

    pub fn is_seen(&self, class: usize) -> bool {
        self.seen_position.get(class).is_some_and(Option::is_some)
    }

    pub fn seen_mask(&self) -> Vec<bool> {
        self.seen_position.iter().map(Option::is_some).collect()
    }

    /// Index of a seen class within the seen-class ordering.
    pub fn seen_position(&self, class: usize) -> Result<usize> {
        match self.seen_position.get(class) {
            Some(Some(k)) => Ok(*k),
            Some(None) => Err(Error::UnseenTrainingLabel(class)),
            None => Err(Error::UnknownLabel(class)),
        }
    }
}

/// Backbone output for one sample: visual features per granularity.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub label: usize,
    pub visual: Vec<Tensor>,
}

/// A dataset pushed through the frozen backbone.
#[derive(Debug, Clone)]
pub struct Features {
    pub space: ClassSpace,
    pub layout: ModelLayout,
    pub train: Vec<Example>,
    pub test_seen: Vec<Example>,
    pub test_unseen: Vec<Example>,
}

pub fn extract_features(
    dataset: &Dataset,
    backbone: &BackboneConfig,
    model: &ModelConfig,
    exec: Execution,
) -> Result<Features> {
    let table = &dataset.table;
    let bb = Backbone::new(backbone.clone(), table)?;
    let space = ClassSpace::new(table, bb.embed_semantics(), model.l2_prototypes);
    let layout = ModelLayout::new(
        backbone.dim,
        table.num_attributes(),
        table.num_groups(),
        backbone.patch_counts(),
        model.hidden_ratio,
    );
    let run = |samples: &[Sample]| -> Result<Vec<Example>> {
        par::map(exec, samples, |s| {
            Ok(Example {
                label: s.label,
                visual: bb.visual_pyramid(s, table)?,
            })
        })
        .into_iter()
        .collect()
    };
    Ok(Features {
        train: run(&dataset.train)?,
        test_seen: run(&dataset.test_seen)?,
        test_unseen: run(&dataset.test_unseen)?,
        space,
        layout,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
}

impl Model {
    pub fn init(config: ModelConfig, layout: &ModelLayout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ 0x1417_BA5E));
        let params = layout.init(&mut rng, config.branch_scale, config.attention_scale);
        Model { config, params }
    }

    pub fn zeroed(config: ModelConfig, layout: &ModelLayout) -> Self {
        Model { params: layout.zeros(), config }
    }

    /// Scores over all classes plus the granularity decision for one sample.
    pub fn predict(&self, space: &ClassSpace, visual: &[Tensor]) -> Result<Prediction> {
        let mut tape = Tape::new();
        let vars = bind_params(&mut tape, &self.params, false);
        let out = forward(&mut tape, &self.config, &vars, space, visual, None, None)?;
        Ok(Prediction {
            scores: tape.value(out.scores).data().to_vec(),
            decision: out.decision,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scores: Vec<f64>,
    pub decision: Decision,
}

/// Per-sample choices that are held constant under differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub certainties: Vec<f64>,
    pub teacher: usize,
    pub student: usize,
    pub teacher_probs: Vec<f64>,
    /// Entropy of the student's distribution.
    pub entropy_weight: f64,
    pub weights: Vec<f64>,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Cosine scores over all classes in id order.
    pub scores: Var,
    /// `Σ_g L_sem^g`; present when the encoder is on and a label was given.
    pub semantic: Option<Var>,
    /// Cross-granularity term; present when enabled and teacher ≠ student.
    pub distill: Option<Var>,
    pub decision: Decision,
    /// Tempered seen-class logits per granularity.
    pub logits: Vec<Var>,
}

pub fn bind_params<'a>(tape: &mut Tape<'a>, params: &'a ModelParams<Tensor>, requires_grad: bool) -> ModelParams<Var> {
    params.map(|_, t| tape.leaf_ref(t, requires_grad))
}

pub fn bind_param_refs<'a>(tape: &mut Tape<'a>, params: &ModelParams<&'a Tensor>) -> ModelParams<Var> {
    params.map(|_, t| tape.leaf_ref(t, true))
}

/// Full forward pass for one sample. With `frozen` the selection, teacher
/// distribution, entropy weight and fusion weights are replayed instead of
/// recomputed.
pub fn forward<'a>(
    tape: &mut Tape<'a>,
    cfg: &ModelConfig,
    params: &ModelParams<Var>,
    space: &'a ClassSpace,
    visual: &'a [Tensor],
    label: Option<usize>,
    frozen: Option<&Decision>,
) -> Result<Forward> {
    let m = params.dsvtm.len();
    if visual.len() != m || space.semantics.len() != m {
        return shape_err("forward", &[m], &[visual.len(), space.semantics.len()]);
    }
    let comps = cfg.components;
    let seen_protos = tape.leaf_ref(&space.seen_prototypes, false);
    let target = match label {
        Some(y) if comps.imse => {
            space.targets.get(y).ok_or(Error::UnknownLabel(y))?;
            Some(tape.leaf_ref(&space.targets[y], false))
        }
        _ => None,
    };

    let mut semantic: Option<Var> = None;
    let mut pooled = Vec::with_capacity(m);
    let mut logits = Vec::with_capacity(m);
    let mut probs = Vec::with_capacity(m);
    for g in 0..m {
        let f = tape.leaf_ref(&visual[g], false);
        let s = tape.leaf_ref(&space.semantics[g], false);
        let p = &params.dsvtm[g];
        let refined = match (comps.imse, comps.smid) {
            (true, smid) => {
                let out = dsvtm_forward(tape, s, f, p, &cfg.dsvtm)?;
                if let Some(t) = target {
                    let l = semantic_alignment_loss(tape, out.affinity, t)?;
                    semantic = Some(match semantic {
                        Some(acc) => tape.add(acc, l)?,
                        None => l,
                    });
                }
                if smid {
                    out.visual
                } else {
                    f
                }
            }
            (false, true) => smid_forward(tape, f, s, &p.smid, cfg.dsvtm.scaled_attention)?,
            (false, false) => f,
        };
        let v = pool_patches(tape, refined)?;
        let z = map_pooled(tape, v, &params.head)?;
        let (lg, pr) = category_distribution(tape, z, seen_protos, cfg.tau)?;
        pooled.push(v);
        logits.push(lg);
        probs.push(tape.value(pr).data().to_vec());
    }

    let decision = match frozen {
        Some(d) => d.clone(),
        None => {
            let certainties: Vec<f64> = probs.iter().map(|p| certainty(p)).collect();
            let (teacher, student) = select_granularities(&certainties);
            let weights = if comps.amgf { fusion_weights(&certainties)? } else { vec![1.0 / m as f64; m] };
            Decision {
                teacher_probs: probs[teacher].clone(),
                entropy_weight: entropy(&probs[student]),
                certainties,
                teacher,
                student,
                weights,
            }
        }
    };

    let distill = if comps.scgl && decision.teacher != decision.student {
        Some(distillation_loss(
            tape,
            &decision.teacher_probs,
            logits[decision.student],
            cfg.scgl_mode,
            decision.entropy_weight,
        )?)
    } else {
        None
    };

    let fused = fuse(tape, &pooled, &decision.weights)?;
    let z = map_pooled(tape, fused, &params.head)?;
    let protos = tape.leaf_ref(&space.prototypes, false);
    let scores = score(tape, z, protos)?;
    Ok(Forward {
        scores,
        semantic,
        distill,
        decision,
        logits,
    })
}

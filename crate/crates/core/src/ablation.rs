//! Multi-seed training runs and the cumulative component ablation.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::eval::{gamma_sweep, EvalSet, Sweep};
use crate::model::{Components, Features, Model, ModelConfig};
use crate::par::Execution;
use crate::training::{train, EpochRecord, TrainConfig};

/// One seed: untrained and trained sweeps plus the training log.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub untrained: Sweep,
    pub trained: Sweep,
    pub eval_set: EvalSet,
    pub log: Vec<EpochRecord>,
    pub model: Model,
    /// Wall time of initialisation, training and both sweeps.
    pub elapsed: Duration,
}

impl SeedRun {
    /// Relative drop of the classification loss from the first to the last
    /// epoch.
    pub fn cls_drop(&self) -> f64 {
        match (self.log.first(), self.log.last()) {
            (Some(a), Some(b)) if a.losses.l_cls > 0.0 => 1.0 - b.losses.l_cls / a.losses.l_cls,
            _ => 0.0,
        }
    }
}

/// Initialises with `seed`, records the untrained sweep, trains and sweeps
/// again. The training seed in `train_cfg` is replaced by `seed`.
pub fn run_seed(
    features: &Features,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    grid: &[f64],
    exec: Execution,
) -> Result<SeedRun> {
    let start = Instant::now();
    let cfg = TrainConfig { seed, ..train_cfg.clone() };
    let model = Model::init(model_cfg.clone(), &features.layout, seed);
    let sweep = |m: &Model| -> Result<(EvalSet, Sweep)> {
        let set = EvalSet::score(m, &features.space, &features.test_seen, &features.test_unseen, exec)?;
        let s = gamma_sweep(&set, grid)?;
        Ok((set, s))
    };
    let (_, untrained) = sweep(&model)?;
    let out = train(features, model, &cfg, exec, |_| {})?;
    let (eval_set, trained) = sweep(&out.model)?;
    Ok(SeedRun {
        seed,
        untrained,
        trained,
        eval_set,
        log: out.log,
        model: out.model,
        elapsed: start.elapsed(),
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Cumulative configurations: the baseline, then each requested switch
/// added in the order SMID, IMSE, SCGL, AMGF.
pub fn ablation_rows(switches: Components) -> Vec<(String, Components)> {
    let mut rows = vec![("baseline".to_string(), Components::BASELINE)];
    let mut c = Components::BASELINE;
    for (name, on) in [
        ("smid", switches.smid),
        ("imse", switches.imse),
        ("scgl", switches.scgl),
        ("amgf", switches.amgf),
    ] {
        if !on {
            continue;
        }
        match name {
            "smid" => c.smid = true,
            "imse" => c.imse = true,
            "scgl" => c.scgl = true,
            _ => c.amgf = true,
        }
        rows.push((format!("+{name}"), c));
    }
    rows
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub components: Components,
    pub runs: Vec<SeedRun>,
}

impl AblationRow {
    /// Median over seeds of a metric taken from each run's best-γ report.
    pub fn median_of(&self, f: impl Fn(&crate::eval::EvalReport) -> f64) -> f64 {
        median(&self.runs.iter().map(|r| f(r.trained.best_report())).collect::<Vec<_>>())
    }

    pub fn median_h(&self) -> f64 {
        self.median_of(|r| r.h)
    }
}

pub const ABLATION_HEADER: &str = "row,components,acc,U,S,H";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.label,
            r.components.to_string().replace(',', "+"),
            r.median_of(|e| e.acc),
            r.median_of(|e| e.unseen),
            r.median_of(|e| e.seen),
            r.median_h(),
        ));
    }
    out
}

/// Trains and evaluates every cumulative configuration on every seed.
pub fn ablate(
    features: &Features,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    switches: Components,
    seeds: &[u64],
    grid: &[f64],
    exec: Execution,
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Empty("seed list"));
    }
    ablation_rows(switches)
        .into_iter()
        .map(|(label, components)| {
            let cfg = ModelConfig { components, ..model_cfg.clone() };
            let runs = seeds
                .iter()
                .map(|&s| run_seed(features, &cfg, train_cfg, s, grid, exec))
                .collect::<Result<Vec<_>>>()?;
            Ok(AblationRow { label, components, runs })
        })
        .collect()
}

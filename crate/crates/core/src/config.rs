//! Flat `key = value` run configuration.
//!
//! One namespace covers data generation, the backbone, the model, training
//! and evaluation so every key can be overridden from the command line.
//! `#` starts a comment; blank lines are ignored.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::data::SyntheticSpec;
use crate::dsvtm::ResidualSource;
use crate::error::{Error, Result};
use crate::eval::gamma_grid;
use crate::granularity::ScglMode;
use crate::model::ModelConfig;
use crate::par::Execution;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub data: SyntheticSpec,
    /// Signal and noise mirror the data section.
    pub backbone: BackboneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Calibration used by `eval`.
    pub gamma: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub gamma_step: f64,
    /// Training seeds for multi-seed runs.
    pub seeds: Vec<u64>,
    pub execution: Execution,
}

impl Default for Config {
    fn default() -> Self {
        let data = SyntheticSpec::default();
        Config {
            backbone: BackboneConfig { signal: data.signal, noise: data.noise, ..BackboneConfig::default() },
            data,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            gamma: 0.0,
            gamma_min: 0.0,
            gamma_max: 1.0,
            gamma_step: 0.02,
            seeds: vec![1, 2, 3, 4, 5],
            execution: Execution::Parallel,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{value}` for `{key}`"))),
    }
}

fn parse_seeds(key: &str, value: &str) -> Result<Vec<u64>> {
    let seeds = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect::<Result<Vec<u64>>>()?;
    if seeds.is_empty() {
        return Err(Error::Config(format!("`{key}` needs at least one seed")));
    }
    Ok(seeds)
}

impl Config {
    pub const KEYS: &'static [&'static str] = &[
        "classes",
        "seen",
        "attributes",
        "groups",
        "train_per_class",
        "test_per_class",
        "noise",
        "signal",
        "seed",
        "grid",
        "dim",
        "granularities",
        "depth",
        "backbone_seed",
        "mixer_scale",
        "embed_scale",
        "tau",
        "iterations",
        "scaled_attention",
        "residual",
        "imse",
        "smid",
        "scgl",
        "amgf",
        "scgl_mode",
        "hidden_ratio",
        "branch_scale",
        "attention_scale",
        "l2_prototypes",
        "lambda_sem",
        "lambda_kl",
        "lambda_deb",
        "lr",
        "momentum",
        "epochs",
        "batch_size",
        "train_seed",
        "cls_temperature",
        "gamma",
        "gamma_min",
        "gamma_max",
        "gamma_step",
        "seeds",
        "execution",
    ];

    pub fn is_key(key: &str) -> bool {
        Self::KEYS.contains(&key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (d, b, m, t) = (&mut self.data, &mut self.backbone, &mut self.model, &mut self.train);
        match key {
            "classes" => d.classes = parse_num(key, v)?,
            "seen" => d.seen = parse_num(key, v)?,
            "attributes" => d.attributes = parse_num(key, v)?,
            "groups" => d.groups = parse_num(key, v)?,
            "train_per_class" => d.train_per_class = parse_num(key, v)?,
            "test_per_class" => d.test_per_class = parse_num(key, v)?,
            "noise" => {
                d.noise = parse_num(key, v)?;
                b.noise = d.noise;
            }
            "signal" => {
                d.signal = parse_num(key, v)?;
                b.signal = d.signal;
            }
            "seed" => d.seed = parse_num(key, v)?,
            "grid" => b.grid = parse_num(key, v)?,
            "dim" => b.dim = parse_num(key, v)?,
            "granularities" => b.granularities = parse_num(key, v)?,
            "depth" => b.depth = parse_num(key, v)?,
            "backbone_seed" => b.seed = parse_num(key, v)?,
            "mixer_scale" => b.mixer_scale = parse_num(key, v)?,
            "embed_scale" => b.embed_scale = parse_num(key, v)?,
            "tau" => m.tau = parse_num(key, v)?,
            "iterations" => m.dsvtm.iterations = parse_num(key, v)?,
            "scaled_attention" => m.dsvtm.scaled_attention = parse_bool(key, v)?,
            "residual" => {
                m.dsvtm.residual = match v {
                    "original" => ResidualSource::Original,
                    "previous" => ResidualSource::Previous,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `{key}`"))),
                }
            }
            "imse" => m.components.imse = parse_bool(key, v)?,
            "smid" => m.components.smid = parse_bool(key, v)?,
            "scgl" => m.components.scgl = parse_bool(key, v)?,
            "amgf" => m.components.amgf = parse_bool(key, v)?,
            "scgl_mode" => m.scgl_mode = v.parse::<ScglMode>()?,
            "hidden_ratio" => m.hidden_ratio = parse_num(key, v)?,
            "branch_scale" => m.branch_scale = parse_num(key, v)?,
            "attention_scale" => m.attention_scale = parse_num(key, v)?,
            "l2_prototypes" => m.l2_prototypes = parse_bool(key, v)?,
            "lambda_sem" => t.weights.sem = parse_num(key, v)?,
            "lambda_kl" => t.weights.kl = parse_num(key, v)?,
            "lambda_deb" => t.weights.deb = parse_num(key, v)?,
            "lr" => t.lr = parse_num(key, v)?,
            "momentum" => t.momentum = parse_num(key, v)?,
            "epochs" => t.epochs = parse_num(key, v)?,
            "batch_size" => t.batch_size = parse_num(key, v)?,
            "train_seed" => t.seed = parse_num(key, v)?,
            "cls_temperature" => t.cls_temperature = parse_bool(key, v)?,
            "gamma" => self.gamma = parse_num(key, v)?,
            "gamma_min" => self.gamma_min = parse_num(key, v)?,
            "gamma_max" => self.gamma_max = parse_num(key, v)?,
            "gamma_step" => self.gamma_step = parse_num(key, v)?,
            "seeds" => self.seeds = parse_seeds(key, v)?,
            "execution" => {
                self.execution = match v {
                    "parallel" => Execution::Parallel,
                    "sequential" => Execution::Sequential,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `{key}`"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (d, b, m, t) = (&self.data, &self.backbone, &self.model, &self.train);
        Some(match key {
            "classes" => d.classes.to_string(),
            "seen" => d.seen.to_string(),
            "attributes" => d.attributes.to_string(),
            "groups" => d.groups.to_string(),
            "train_per_class" => d.train_per_class.to_string(),
            "test_per_class" => d.test_per_class.to_string(),
            "noise" => d.noise.to_string(),
            "signal" => d.signal.to_string(),
            "seed" => d.seed.to_string(),
            "grid" => b.grid.to_string(),
            "dim" => b.dim.to_string(),
            "granularities" => b.granularities.to_string(),
            "depth" => b.depth.to_string(),
            "backbone_seed" => b.seed.to_string(),
            "mixer_scale" => b.mixer_scale.to_string(),
            "embed_scale" => b.embed_scale.to_string(),
            "tau" => m.tau.to_string(),
            "iterations" => m.dsvtm.iterations.to_string(),
            "scaled_attention" => m.dsvtm.scaled_attention.to_string(),
            "residual" => match m.dsvtm.residual {
                ResidualSource::Original => "original".into(),
                ResidualSource::Previous => "previous".into(),
            },
            "imse" => m.components.imse.to_string(),
            "smid" => m.components.smid.to_string(),
            "scgl" => m.components.scgl.to_string(),
            "amgf" => m.components.amgf.to_string(),
            "scgl_mode" => m.scgl_mode.as_str().into(),
            "hidden_ratio" => m.hidden_ratio.to_string(),
            "branch_scale" => m.branch_scale.to_string(),
            "attention_scale" => m.attention_scale.to_string(),
            "l2_prototypes" => m.l2_prototypes.to_string(),
            "lambda_sem" => t.weights.sem.to_string(),
            "lambda_kl" => t.weights.kl.to_string(),
            "lambda_deb" => t.weights.deb.to_string(),
            "lr" => t.lr.to_string(),
            "momentum" => t.momentum.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "train_seed" => t.seed.to_string(),
            "cls_temperature" => t.cls_temperature.to_string(),
            "gamma" => self.gamma.to_string(),
            "gamma_min" => self.gamma_min.to_string(),
            "gamma_max" => self.gamma_max.to_string(),
            "gamma_step" => self.gamma_step.to_string(),
            "seeds" => self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            "execution" => match self.execution {
                Execution::Parallel => "parallel".into(),
                Execution::Sequential => "sequential".into(),
            },
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str, source_name: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                source_name: source_name.to_string(),
                line: i + 1,
                msg,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(msg) => err(msg),
                e => e,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut c = Config::default();
        c.apply_text(text, source_name)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    /// Every key in canonical order; [`Config::parse`] reads it back exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("listed key"));
        }
        out
    }

    pub fn gamma_grid(&self) -> Result<Vec<f64>> {
        gamma_grid(self.gamma_min, self.gamma_max, self.gamma_step)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.backbone.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.gamma_grid()?;
        if !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be finite, got {}", self.gamma)));
        }
        Ok(())
    }
}

//! `gzsl` command-line front end.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on runtime errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use gzsl_core::ablation::{ablate, ablation_csv};
use gzsl_core::checkpoint::Checkpoint;
use gzsl_core::config::Config;
use gzsl_core::data::{generate_synthetic, Dataset};
use gzsl_core::eval::{gamma_sweep, reports_csv, EvalSet, REPORT_HEADER};
use gzsl_core::model::{extract_features, Components, Example, Features, Model};
use gzsl_core::tensor::GradCheckOptions;
use gzsl_core::training::{check_gradients, epoch_log_csv, train};

const USAGE: &str = "\
usage: gzsl <command> [--config FILE] [--<key> VALUE ...] [options]

commands:
  gen-data    write attributes.txt and manifest.txt to --out DIR
  train       train one model; epoch log CSV to --out, weights to --checkpoint
  eval        evaluate --checkpoint at `gamma`; report CSV to --out
  sweep       evaluate --checkpoint over the gamma grid; report CSV to --out
  ablate      cumulative component ablation over `seeds`; table CSV to --out
  gradcheck   finite-difference check of the full loss on a 2-sample batch

options:
  --config FILE      `key = value` file applied over the defaults
  --out PATH         output file (directory for gen-data); stdout if absent
  --checkpoint PATH  checkpoint to write (train) or read (eval, sweep)
  --data DIR         dataset directory instead of the synthetic generator
  --switches LIST    components for ablate, e.g. imse,smid,scgl,amgf
  --keys             list every config key with its default
";

const GRADCHECK_TOLERANCE: f64 = 1e-3;

enum Failure {
    Usage(String),
    Runtime(String),
}

type Outcome<T> = std::result::Result<T, Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Command {
    GenData,
    Train,
    Eval,
    Sweep,
    Ablate,
    GradCheck,
}

impl Command {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "gen-data" => Command::GenData,
            "train" => Command::Train,
            "eval" => Command::Eval,
            "sweep" => Command::Sweep,
            "ablate" => Command::Ablate,
            "gradcheck" => Command::GradCheck,
            _ => return None,
        })
    }
}

struct Args {
    command: Command,
    config_file: Option<PathBuf>,
    overrides: Vec<(String, String)>,
    out: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    switches: Option<String>,
}

enum Parsed {
    Run(Args),
    Help,
    Keys,
}

fn string(v: OsString) -> Outcome<String> {
    v.into_string().map_err(|v| usage(format!("argument `{}` is not valid UTF-8", v.to_string_lossy())))
}

fn parse_args(argv: impl IntoIterator<Item = OsString>) -> Outcome<Parsed> {
    use lexopt::prelude::*;
    let mut p = lexopt::Parser::from_args(argv);
    let mut command = None;
    let mut args = Args {
        command: Command::Train,
        config_file: None,
        overrides: Vec::new(),
        out: None,
        checkpoint: None,
        data: None,
        switches: None,
    };
    while let Some(arg) = p.next().map_err(usage)? {
        match arg {
            Short('h') | Long("help") => return Ok(Parsed::Help),
            Long("keys") => return Ok(Parsed::Keys),
            Long("config") => args.config_file = Some(p.value().map_err(usage)?.into()),
            Long("out") => args.out = Some(p.value().map_err(usage)?.into()),
            Long("checkpoint") => args.checkpoint = Some(p.value().map_err(usage)?.into()),
            Long("data") => args.data = Some(p.value().map_err(usage)?.into()),
            Long("switches") => args.switches = Some(string(p.value().map_err(usage)?)?),
            Long(flag) => {
                let key = flag.replace('-', "_");
                if !Config::is_key(&key) {
                    return Err(usage(format!("unknown option `--{flag}`")));
                }
                let value = string(p.value().map_err(usage)?)?;
                args.overrides.push((key, value));
            }
            Value(v) if command.is_none() => {
                let name = string(v)?;
                command = Some(Command::parse(&name).ok_or_else(|| usage(format!("unknown command `{name}`")))?);
            }
            other => return Err(usage(other.unexpected())),
        }
    }
    args.command = command.ok_or_else(|| usage("missing command"))?;
    Ok(Parsed::Run(args))
}

/// Layers the config file and `--key` flags over `base`.
fn resolve_config(args: &Args, mut base: Config) -> Outcome<Config> {
    if let Some(path) = &args.config_file {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        base.apply_text(&text, &path.display().to_string()).map_err(usage)?;
    }
    for (k, v) in &args.overrides {
        base.set(k, v).map_err(usage)?;
    }
    base.validate().map_err(usage)?;
    Ok(base)
}

fn load_dataset(args: &Args, config: &Config) -> Outcome<Dataset> {
    match &args.data {
        Some(dir) => Dataset::load(dir).map_err(runtime),
        None => generate_synthetic(&config.data).map_err(runtime),
    }
}

fn features(args: &Args, config: &Config) -> Outcome<Features> {
    let ds = load_dataset(args, config)?;
    extract_features(&ds, &config.backbone, &config.model, config.execution).map_err(runtime)
}

fn emit(out: Option<&Path>, text: &str) -> Outcome<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Config snapshot and trained model from `--checkpoint`.
fn load_checkpoint(args: &Args) -> Outcome<(Config, Checkpoint)> {
    let path = args
        .checkpoint
        .as_ref()
        .ok_or_else(|| usage("this command needs --checkpoint PATH"))?;
    let ck = Checkpoint::load(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let snapshot = Config::parse(&ck.config, &format!("{} config", path.display())).map_err(runtime)?;
    Ok((resolve_config(args, snapshot)?, ck))
}

fn trained_eval_set(args: &Args) -> Outcome<(Config, EvalSet)> {
    let (config, ck) = load_checkpoint(args)?;
    let f = features(args, &config)?;
    let params = ck.restore(&f.layout.shapes()).map_err(runtime)?;
    let model = Model { config: config.model.clone(), params };
    let set = EvalSet::score(&model, &f.space, &f.test_seen, &f.test_unseen, config.execution).map_err(runtime)?;
    Ok((config, set))
}

fn run(args: Args) -> Outcome<()> {
    match args.command {
        Command::GenData => {
            let config = resolve_config(&args, Config::default())?;
            let dir = args.out.as_ref().ok_or_else(|| usage("gen-data needs --out DIR"))?;
            let ds = generate_synthetic(&config.data).map_err(runtime)?;
            ds.write(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
            eprintln!(
                "wrote {} train, {} test-seen, {} test-unseen samples to {}",
                ds.train.len(),
                ds.test_seen.len(),
                ds.test_unseen.len(),
                dir.display()
            );
        }
        Command::Train => {
            let config = resolve_config(&args, Config::default())?;
            let f = features(&args, &config)?;
            let model = Model::init(config.model.clone(), &f.layout, config.train.seed);
            let out = train(&f, model, &config.train, config.execution, |r| {
                eprintln!("epoch {:>3}  total {:.5}  l_cls {:.5}", r.epoch, r.losses.total, r.losses.l_cls)
            })
            .map_err(runtime)?;
            if let Some(path) = &args.checkpoint {
                let ck = Checkpoint::new(&out.model.params, config.to_text(), config.train.epochs as u64, &out.rng);
                ck.save(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
            }
            emit(args.out.as_deref(), &epoch_log_csv(&out.log))?;
        }
        Command::Eval => {
            let (config, set) = trained_eval_set(&args)?;
            let report = set.report(config.gamma);
            emit(args.out.as_deref(), &format!("{REPORT_HEADER}\n{}\n", report.csv_row()))?;
        }
        Command::Sweep => {
            let (config, set) = trained_eval_set(&args)?;
            let grid = config.gamma_grid().map_err(usage)?;
            let sweep = gamma_sweep(&set, &grid).map_err(runtime)?;
            let best = sweep.best_report();
            eprintln!("best gamma {} H {:.2} (U {:.2} S {:.2})", best.gamma, best.h, best.unseen, best.seen);
            emit(args.out.as_deref(), &reports_csv(&sweep.reports))?;
        }
        Command::Ablate => {
            let config = resolve_config(&args, Config::default())?;
            let switches: Components = match &args.switches {
                Some(s) => s.parse().map_err(usage)?,
                None => Components::ALL,
            };
            let grid = config.gamma_grid().map_err(usage)?;
            let f = features(&args, &config)?;
            let rows = ablate(&f, &config.model, &config.train, switches, &config.seeds, &grid, config.execution)
                .map_err(runtime)?;
            for r in &rows {
                eprintln!("{:<10} median H {:.2}", r.label, r.median_h());
            }
            emit(args.out.as_deref(), &ablation_csv(&rows))?;
        }
        Command::GradCheck => {
            let config = resolve_config(&args, Config::default())?;
            let f = features(&args, &config)?;
            let batch: Vec<&Example> = f.train.iter().take(2).collect();
            let model = Model::init(config.model.clone(), &f.layout, config.train.seed);
            let opts = GradCheckOptions { exec: config.execution, ..GradCheckOptions::default() };
            let report = check_gradients(&model, &f.space, &batch, &config.train, &opts).map_err(runtime)?;
            println!(
                "max relative error {:.3e} over {} coordinates",
                report.max_rel_error, report.coords_checked
            );
            if !(report.max_rel_error < GRADCHECK_TOLERANCE) {
                return Err(runtime(format!("gradient check failed: tolerance {GRADCHECK_TOLERANCE:e}")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let parsed = match parse_args(std::env::args_os().skip(1)) {
        Ok(p) => p,
        Err(Failure::Usage(m)) | Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}\nrun `gzsl --help` for usage");
            return ExitCode::from(1);
        }
    };
    let args = match parsed {
        Parsed::Help => {
            print!("{USAGE}");
            return ExitCode::SUCCESS;
        }
        Parsed::Keys => {
            print!("{}", Config::default().to_text());
            return ExitCode::SUCCESS;
        }
        Parsed::Run(a) => a,
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}\nrun `gzsl --help` for usage");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

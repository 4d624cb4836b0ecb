//! `rcnnlab` command line.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rcnnlab::harness::run::{
    eval_report_text, write_dataset_files, write_eval_files, CHECKPOINT, EVAL_SUMMARY, METRICS_CSV,
};
use rcnnlab::harness::{
    build_dataset, evaluate, load_checkpoint, load_or_build_dataset, parse_config_with_seed, run_experiment,
    sweep, ExperimentConfig, Mode, SweepAxis,
};
use rcnnlab::sampler::SamplingMode;
use rcnnlab::Error;

#[derive(Parser)]
#[command(name = "rcnnlab", version, about = "Second-stage detector training lab on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `experiment.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `experiment.out_dir`, then `runs/<mode>-seed<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// baseline, rga, prm or rga+prm.
    #[arg(long)]
    mode: Option<String>,
    /// soft or hard.
    #[arg(long)]
    sampling: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and write the training and evaluation datasets.
    GenData(Common),
    /// Train, evaluate and write all run artifacts.
    Train(Common),
    /// Re-evaluate the checkpoint in the output directory.
    Eval(Common),
    /// Run a grid over one axis and several seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// lambda0, ratio-pair or sampling-mode.
        #[arg(long)]
        axis: String,
        /// Values along the axis, separated by `;` (ratio pairs use `,` inside a value).
        #[arg(long)]
        values: String,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Summarize the evaluation results of a run directory.
    Report(Common),
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn load_config(c: &Common) -> Result<(ExperimentConfig, PathBuf), Failure> {
    let text = fs::read_to_string(&c.config)
        .map_err(|e| Failure::Config(format!("{}: {e}", c.config.display())))?;
    let mut cfg = parse_config_with_seed(&text, c.seed)
        .map_err(|e| Failure::Config(format!("{}: {e}", c.config.display())))?;
    if let Some(m) = &c.mode {
        cfg.set_mode(m.parse::<Mode>()?);
    }
    if let Some(s) = &c.sampling {
        cfg.set_sampling_mode(s.parse::<SamplingMode>()?);
    }
    cfg.validate()?;
    let out = c
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cfg.mode(), cfg.seed)));
    Ok((cfg, out))
}

fn mkdir(p: &Path) -> Result<(), Failure> {
    fs::create_dir_all(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(c) => {
            let (cfg, out) = load_config(&c)?;
            mkdir(&out)?;
            let data = build_dataset(&cfg)?;
            let dir = write_dataset_files(&cfg, &data, &out)?;
            println!(
                "wrote {} training and {} evaluation scenes to {}",
                data.train.len(),
                data.eval.len(),
                dir.display()
            );
        }
        Command::Train(c) => {
            let (cfg, out) = load_config(&c)?;
            let s = run_experiment(&cfg, &out)?;
            print!("{}", eval_report_text(&s.policies, &s.eval));
            println!("artifacts in {}", out.display());
        }
        Command::Eval(c) => {
            let (cfg, out) = load_config(&c)?;
            let model = load_checkpoint(&out.join(CHECKPOINT))?;
            let policies = model.policies();
            if policies != cfg.head_policies()? {
                return Err(Failure::Config(
                    "checkpoint heads do not match the configured mode and sampling".into(),
                ));
            }
            let data = load_or_build_dataset(&cfg, &out)?;
            let e = evaluate(&cfg, &model, &data.eval)?;
            write_eval_files(&out, cfg.mode(), &policies, &e)?;
            print!("{}", eval_report_text(&policies, &e));
        }
        Command::Sweep {
            common,
            axis,
            values,
            seeds,
        } => {
            let (cfg, out) = load_config(&common)?;
            let axis: SweepAxis = axis.parse()?;
            let values: Vec<String> = values
                .split(';')
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            let seeds: Vec<u64> = match seeds {
                None => vec![cfg.seed],
                Some(s) => s
                    .split(',')
                    .map(|x| x.trim().parse())
                    .collect::<Result<_, _>>()
                    .map_err(|_| Failure::Config(format!("bad seed list {s:?}")))?,
            };
            let table = sweep(&cfg, axis, &values, &seeds, &out)?;
            let mut buf = Vec::new();
            table.write_csv(&mut buf).map_err(|e| Failure::Runtime(e.to_string()))?;
            print!("{}", String::from_utf8_lossy(&buf));
            for r in &table.rows {
                for e in &r.errors {
                    eprintln!("cell {}: {e}", r.value);
                }
            }
            if table.rows.iter().any(|r| r.seeds_failed > 0) {
                return Err(Failure::Runtime("some sweep cells failed".into()));
            }
        }
        Command::Report(c) => {
            let (_, out) = load_config(&c)?;
            let path = out.join(EVAL_SUMMARY);
            let text = fs::read_to_string(&path)
                .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            println!("run {}  mode {}", out.display(), v["mode"].as_str().unwrap_or("?"));
            let row = |name: &str, m: &serde_json::Value| {
                let f = |k: &str| m[k].as_f64().map_or("-".to_string(), |x| format!("{x:.4}"));
                println!(
                    "  {name:<16} ap {}  ap50 {}  ap75 {}  [1,3] {}  [8,inf) {}",
                    f("ap_mean"),
                    f("ap50"),
                    f("ap75"),
                    f("ap_bucket_1_3"),
                    f("ap_bucket_8_inf")
                );
            };
            row("model", &v["ensemble"]);
            if let Some(heads) = v["heads"].as_array().filter(|h| h.len() > 1) {
                for h in heads {
                    row(h["policy"].as_str().unwrap_or("head"), h);
                }
            }
            if let Some(g) = v["score_gap"].as_object() {
                println!(
                    "  score gap > 0.1 on {:.1}% of proposals",
                    100.0 * g["frac_gap_above_0_1"].as_f64().unwrap_or(f64::NAN)
                );
            }
            let metrics = out.join(METRICS_CSV);
            if let Ok(m) = fs::read_to_string(&metrics) {
                println!("  {} logged training steps", m.lines().count().saturating_sub(1));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

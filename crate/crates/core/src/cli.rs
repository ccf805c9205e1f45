//! Command-line front end.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{invalid, Error, Result};
use crate::experiment::{
    compare_report, hyperparameter_sweep, parse_value, run_experiment, validation_score, AgentKind,
    ExperimentConfig, RunSummary,
};
use crate::forecasting::{
    evaluate, select_best, train_forecaster, upsert_metrics_csv, Candidate, Forecaster,
    ForecasterKind, Horizon, MetricsRow,
};
use crate::market_data::{generate_synthetic, ingest_csv, write_csv, IngestOptions};

#[derive(Debug, Parser)]
#[command(
    name = "arblab",
    version,
    about = "Battery energy-arbitrage experiments"
)]
pub struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed(s) of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a price CSV and write it back in canonical form.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// Defaults to `<out>/prices.csv`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Forward-fill missing hours instead of rejecting them.
        #[arg(long)]
        fill_gaps: bool,
    },
    /// Write the synthetic price series described by the `[synthetic]` section.
    GenerateData {
        /// Defaults to `<out>/synthetic.csv`.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        hours: Option<usize>,
    },
    /// Fit forecasters and write checkpoints plus validation metrics.
    TrainForecaster {
        /// Horizon in hours or `all`.
        #[arg(long, default_value = "all")]
        horizon: String,
        /// persistence | ar | neural | auto (train all, keep the best).
        #[arg(long, default_value = "auto")]
        kind: String,
    },
    /// Score forecaster checkpoints on a data split.
    EvalForecaster {
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        /// train | validation | test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and evaluate DQN agents.
    TrainDqn {
        /// Number of consecutive seeds starting at `--seed`.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Cross-entropy policy search benchmark.
    RunCem {
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Perfect-foresight dispatch.
    RunOracle {
        /// mpc-ga | dp
        #[arg(long, default_value = "mpc-ga")]
        kind: String,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Compare run directories.
    Report {
        #[arg(long = "run", required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        /// Run name used as the gain baseline; defaults to the first run.
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Grid or random search scored on the validation split.
    Sweep {
        /// `key=v1,v2,...`, e.g. `dqn.gamma=0.9,0.99`. Repeatable.
        #[arg(long = "grid", required = true)]
        grid: Vec<String>,
        /// Evaluate at most this many cells, sampled uniformly.
        #[arg(long)]
        cap: Option<usize>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    match &cli.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn apply_seeds(cfg: &mut ExperimentConfig, seed: Option<u64>, count: Option<usize>) {
    let base = seed.unwrap_or_else(|| cfg.experiment.seeds.first().copied().unwrap_or(1));
    match (seed, count) {
        (_, Some(n)) => cfg.experiment.seeds = (0..n as u64).map(|i| base + i).collect(),
        (Some(s), None) => cfg.experiment.seeds = vec![s],
        (None, None) => {}
    }
}

fn print_run(run: &RunSummary) {
    let s = &run.summary;
    println!(
        "{} ({}): mean reward {:.2} ± {:.2} over {} seed(s), activity {:.1}",
        s.name, s.agent, s.mean_reward, s.std_reward, s.seeds, s.mean_activity
    );
    println!("{}", run.dir.display());
}

fn parse_horizons(text: &str) -> Result<Vec<Horizon>> {
    if text == "all" {
        return Ok(Horizon::all().collect());
    }
    text.split(',')
        .map(|h| {
            h.trim()
                .parse::<usize>()
                .map_err(|_| invalid(format!("bad horizon `{h}`")))
                .and_then(Horizon::new)
        })
        .collect()
}

/// Splits `a,b,[c,d]` on top-level commas.
fn split_values(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in text.chars() {
        match ch {
            '[' | '{' => depth += 1,
            ']' | '}' => depth -= 1,
            ',' if depth == 0 => {
                out.push(std::mem::take(&mut cur));
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    out.push(cur);
    out.into_iter().map(|s| s.trim().to_string()).collect()
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest {
            input,
            output,
            fill_gaps,
        } => {
            let opts = IngestOptions {
                fill_gaps: *fill_gaps,
                ..Default::default()
            };
            let series = ingest_csv(input, &opts)?;
            let output = output
                .clone()
                .unwrap_or_else(|| out_dir(&cli).join("prices.csv"));
            if let Some(parent) = output.parent() {
                ensure_dir(parent)?;
            }
            let file = fs::File::create(&output).map_err(|e| Error::io(&output, e))?;
            write_csv(series.records(), file)?;
            let split = series.split();
            println!(
                "{} records (train {}, validation {}, test {}) -> {}",
                series.len(),
                split.train.len(),
                split.validation.len(),
                split.test.len(),
                output.display()
            );
        }
        Command::GenerateData { output, hours } => {
            let mut cfg = load_config(&cli)?.synthetic;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(h) = hours {
                cfg.length_hours = *h;
            }
            let synth = generate_synthetic(&cfg)?;
            let output = output
                .clone()
                .unwrap_or_else(|| out_dir(&cli).join("synthetic.csv"));
            if let Some(parent) = output.parent() {
                ensure_dir(parent)?;
            }
            let file = fs::File::create(&output).map_err(|e| Error::io(&output, e))?;
            write_csv(synth.series.records(), file)?;
            println!(
                "{} hours, {} spikes -> {}",
                synth.series.len(),
                synth.spikes.iter().filter(|&&s| s).count(),
                output.display()
            );
        }
        Command::TrainForecaster { horizon, kind } => {
            let mut cfg = load_config(&cli)?;
            if let Some(s) = cli.seed {
                cfg.forecaster.train.seed = s;
            }
            let horizons = parse_horizons(horizon)?;
            let kinds = match kind.as_str() {
                "auto" => vec![
                    ForecasterKind::Persistence,
                    ForecasterKind::Ar,
                    ForecasterKind::Neural,
                ],
                k => vec![k.parse::<ForecasterKind>()?],
            };
            let series = cfg.load_series()?;
            let dir = out_dir(&cli);
            let mut candidates = Vec::new();
            for &h in &horizons {
                for &k in &kinds {
                    let c: Candidate = train_forecaster(&series, k, h, &cfg.forecaster)?;
                    println!("h={h:>2} {k:<11} validation rmse {:.4}", c.metrics.rmse);
                    candidates.push(c);
                }
            }
            ensure_dir(&dir)?;
            let rows: Vec<MetricsRow> = candidates
                .iter()
                .map(|c| MetricsRow::new(&c.forecaster, &c.metrics))
                .collect();
            upsert_metrics_csv(dir.join("metrics.csv"), &rows)?;
            for (h, f) in select_best(candidates)? {
                let path = dir.join(format!("forecaster_h{h}.json"));
                f.save(&path)?;
                println!("h={h:>2} kept {} -> {}", f.kind(), path.display());
            }
        }
        Command::EvalForecaster { checkpoints, split } => {
            let cfg = load_config(&cli)?;
            let series = cfg.load_series()?;
            let ranges = series.split();
            let labels = match split.as_str() {
                "train" => ranges.train.clone(),
                "validation" => ranges.validation.clone(),
                "test" => ranges.test.clone(),
                other => return Err(invalid(format!("unknown split `{other}`"))),
            };
            let mut rows = Vec::new();
            for path in checkpoints {
                let f = Forecaster::load(path)?;
                let m = evaluate(&f, series.records(), labels.clone())?;
                let mape = m.mape.map_or("n/a".into(), |v| format!("{v:.2}%"));
                println!(
                    "h={:>2} {:<11} rmse {:.4} mae {:.4} mape {mape} ({} samples)",
                    f.horizon,
                    f.kind(),
                    m.rmse,
                    m.mae,
                    m.samples
                );
                rows.push(MetricsRow::new(&f, &m));
            }
            let dir = out_dir(&cli);
            ensure_dir(&dir)?;
            upsert_metrics_csv(dir.join(format!("eval_metrics_{split}.csv")), &rows)?;
        }
        Command::TrainDqn { seeds }
        | Command::RunCem { seeds }
        | Command::RunOracle { seeds, .. } => {
            let mut cfg = load_config(&cli)?;
            cfg.experiment.agent = match &cli.command {
                Command::TrainDqn { .. } => AgentKind::Dqn,
                Command::RunCem { .. } => AgentKind::Cem,
                Command::RunOracle { kind, .. } => match kind.parse::<AgentKind>()? {
                    k @ (AgentKind::MpcGa | AgentKind::Dp) => k,
                    other => return Err(invalid(format!("`{other}` is not an oracle kind"))),
                },
                _ => unreachable!(),
            };
            apply_seeds(&mut cfg, cli.seed, *seeds);
            if let Some(out) = &cli.out {
                cfg.experiment.out = out.clone();
            }
            print_run(&run_experiment(&cfg)?);
        }
        Command::Report { runs, baseline } => {
            let report = compare_report(runs, baseline.as_deref())?;
            println!("{}", report.to_text());
            let dir = out_dir(&cli);
            ensure_dir(&dir)?;
            report.write_csv(dir.join("report.csv"))?;
        }
        Command::Sweep { grid, cap } => {
            let mut cfg = load_config(&cli)?;
            apply_seeds(&mut cfg, cli.seed, None);
            let mut table = BTreeMap::new();
            for entry in grid {
                let (key, values) = entry.split_once('=').ok_or_else(|| {
                    invalid(format!("grid entry `{entry}` must look like key=v1,v2"))
                })?;
                table.insert(
                    key.trim().to_string(),
                    split_values(values)
                        .iter()
                        .map(|v| parse_value(v))
                        .collect::<Vec<_>>(),
                );
            }
            let out =
                hyperparameter_sweep(&cfg, &table, *cap, cli.seed.unwrap_or(0), validation_score)?;
            let dir = out_dir(&cli);
            ensure_dir(&dir)?;
            let path = dir.join("sweep.csv");
            let mut wtr = csv::Writer::from_path(&path)?;
            wtr.write_record(["index", "assignments", "score"])?;
            for c in &out.cells {
                let assignments = c
                    .assignments
                    .iter()
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect::<Vec<_>>()
                    .join(" ");
                println!("{:>4} {assignments:<40} {:.3}", c.index, c.score);
                wtr.write_record([c.index.to_string(), assignments, c.score.to_string()])?;
            }
            wtr.flush().map_err(|e| Error::io(&path, e))?;
            let best = dir.join("best.toml");
            fs::write(&best, out.best_config.to_toml()?).map_err(|e| Error::io(&best, e))?;
            println!(
                "best cell {} -> {}",
                out.cells[out.best].index,
                best.display()
            );
        }
    }
    Ok(())
}

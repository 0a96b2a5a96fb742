mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use flis_core::metrics::{self, mean_std, RunSummary};
use flis_core::{federation, Execution, FederationConfig, FederatedData, Mode, TrainConfig};
use serde::{Deserialize, Serialize};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "flis", version, about = "Clustered federated learning simulator")]
struct Cli {
    /// Run client updates on one thread. Results are identical either way.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured mode and its baselines; writes config.json, rounds.jsonl and summary.json.
    Run {
        config: PathBuf,
        /// Overrides `federation.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid over `sweep.betas` x `sweep.epochs` with dynamic clustering; writes sweep.csv.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rounds and traffic needed to reach each target accuracy, per mode.
    Report {
        dir: PathBuf,
        #[arg(long = "target", required = true)]
        targets: Vec<f64>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct Summary {
    seeds: Vec<u64>,
    modes: Vec<ModeSummary>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModeSummary {
    mode: Mode,
    final_accuracy_mean: f64,
    final_accuracy_std_over_seeds: f64,
    comm_cost_mb_mean: f64,
    /// Largest off-diagonal similarity seen in any round of any seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    adjacency_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    unseen_accuracy_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    unseen_accuracy_std_over_seeds: Option<f64>,
    runs: Vec<SeedRun>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SeedRun {
    seed: u64,
    #[serde(flatten)]
    summary: RunSummary,
}

fn resolve(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.federation.seed = s;
    }
    if let Some(dir) = out {
        cfg.output.dir = dir;
    }
    Ok(cfg)
}

fn prepare(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output.dir).with_context(|| format!("cannot create {}", cfg.output.dir.display()))?;
    fs::write(cfg.output.dir.join("config.json"), cfg.to_json())?;
    Ok(())
}

/// Data and federation settings for one seed. Withheld clients are not part
/// of the federation, so the client count is taken from the built split.
fn setup(cfg: &ExperimentConfig, seed: u64, exec: Execution) -> Result<(FederationConfig, FederatedData)> {
    let fd = cfg.data.build(cfg.federation.num_clients, seed).context("building client data")?;
    let fed = FederationConfig { seed, num_clients: fd.clients.len(), execution: exec, ..cfg.federation.clone() };
    Ok((fed, fd))
}

fn run(cfg: &ExperimentConfig, exec: Execution) -> Result<()> {
    prepare(cfg)?;
    let modes = cfg.modes();
    let seeds = cfg.seeds();
    let mut per_mode: Vec<Vec<(u64, RunSummary, Option<f64>)>> = vec![Vec::new(); modes.len()];
    let mut a_max: Vec<Option<f64>> = vec![None; modes.len()];
    let mut rounds = BufWriter::new(File::create(cfg.output.dir.join("rounds.jsonl"))?);

    for (s, &seed) in seeds.iter().enumerate() {
        let (base, fd) = setup(cfg, seed, exec)?;
        for (m, &mode) in modes.iter().enumerate() {
            let fed = FederationConfig { mode, ..base.clone() };
            let result = federation::run(&fed, &fd.clients, &fd.server).with_context(|| format!("{mode} run, seed {seed}"))?;
            for rec in &result.records {
                if let Some(a) = rec.adjacency_max {
                    a_max[m] = Some(a_max[m].map_or(a, |b: f64| b.max(a)));
                }
            }
            // the per-round stream is written for the first seed only
            if s == 0 {
                for rec in &result.records {
                    let mut rec = rec.clone();
                    if !cfg.output.adjacency {
                        rec.adjacency = None;
                    }
                    serde_json::to_writer(&mut rounds, &rec)?;
                    rounds.write_all(b"\n")?;
                }
            }
            let unseen = if !fd.unseen.is_empty() && matches!(mode, Mode::Dc | Mode::Hc) {
                let tc = TrainConfig { epochs: cfg.output.personalize_epochs, ..fed.train_config() };
                let acc = federation::personalize_unseen(&fd.unseen, result.final_models(), &tc, seed, exec)?;
                Some(mean_std(&acc).0)
            } else {
                None
            };
            per_mode[m].push((seed, RunSummary::from_run(&result, cfg.output.target), unseen));
        }
    }
    rounds.flush()?;

    let modes: Vec<ModeSummary> = modes
        .iter()
        .zip(per_mode)
        .zip(a_max)
        .map(|((&mode, runs), adjacency_max)| {
            let finals: Vec<f64> = runs.iter().map(|r| r.1.final_accuracy).collect();
            let costs: Vec<f64> = runs.iter().map(|r| r.1.comm_cost_mb).collect();
            let unseen: Vec<f64> = runs.iter().filter_map(|r| r.2).collect();
            let (mean, std) = mean_std(&finals);
            let (u_mean, u_std) = if unseen.is_empty() { (None, None) } else { let (a, b) = mean_std(&unseen); (Some(a), Some(b)) };
            ModeSummary {
                mode,
                final_accuracy_mean: mean,
                final_accuracy_std_over_seeds: std,
                comm_cost_mb_mean: mean_std(&costs).0,
                adjacency_max,
                unseen_accuracy_mean: u_mean,
                unseen_accuracy_std_over_seeds: u_std,
                runs: runs.into_iter().map(|(seed, summary, _)| SeedRun { seed, summary }).collect(),
            }
        })
        .collect();
    for m in &modes {
        let a = m.adjacency_max.map(|a| format!(", A_max {a:.4}")).unwrap_or_default();
        println!(
            "{:<7} accuracy {:.4} (std over {} seeds {:.4}), {:.3} Mb{a}",
            m.mode,
            m.final_accuracy_mean,
            seeds.len(),
            m.final_accuracy_std_over_seeds,
            m.comm_cost_mb_mean
        );
    }
    let summary = Summary { seeds, modes };
    fs::write(cfg.output.dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("wrote {}", cfg.output.dir.display());
    Ok(())
}

fn sweep(cfg: &ExperimentConfig, exec: Execution) -> Result<()> {
    prepare(cfg)?;
    let (base, fd) = setup(cfg, cfg.federation.seed, exec)?;
    let rows = metrics::sweep(&base, &fd.clients, &fd.server, &cfg.sweep.betas, &cfg.sweep.epochs)?;
    let path = cfg.output.dir.join("sweep.csv");
    metrics::write_sweep_csv(&rows, File::create(&path)?)?;
    for r in &rows {
        println!("beta {:<6} epochs {:<3} accuracy {:.4}", r.beta, r.epochs, r.accuracy);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn report(dir: &Path, targets: &[f64]) -> Result<()> {
    let path = dir.join("summary.json");
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    let summary: Summary = serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))?;
    println!("{:<8} {:>7} {:>8} {:>12}", "mode", "target", "rounds", "Mb");
    for &target in targets {
        for m in &summary.modes {
            // the first seed's run, matching rounds.jsonl
            let run = &m.runs.first().context("summary has a mode without runs")?.summary;
            let (rounds, mb) = match metrics::rounds_to_target(&run.accuracy, target) {
                Some(r) => (r.to_string(), format!("{:.3}", run.cumulative_mb[r - 1])),
                None => ("--".into(), "--".into()),
            };
            println!("{:<8} {:>7} {:>8} {:>12}", m.mode.as_str(), target, rounds, mb);
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let exec = if cli.sequential { Execution::Sequential } else { Execution::default() };
    match cli.command {
        Command::Run { config, seed, out } => run(&resolve(&config, seed, out)?, exec),
        Command::Sweep { config, seed, out } => sweep(&resolve(&config, seed, out)?, exec),
        Command::Report { dir, targets } => report(&dir, &targets),
    }
}

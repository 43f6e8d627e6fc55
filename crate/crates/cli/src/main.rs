//! `basepar`: closed-loop ramp-metering experiments from the command line.
//!
//! Exit codes: 0 on success, 1 when a run fails, 2 on bad usage.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use basepar::base::{generate_training_data, train_mlp, AnnBank};
use basepar::bench::{emit_plot_data, format_comparison, ControllerChoice, Experiment, RunLog};
use basepar::optim::TerminationOption;
use basepar::scenario::{load_scenario, ScenarioConfig};

#[derive(Debug, Parser)]
#[command(name = "basepar", version, about = "Base-parallel ramp-metering experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one controller (or the full architecture) in closed loop.
    Run {
        #[command(flatten)]
        common: RunArgs,
        /// ALINEA, ANN, CMPC(1), CMPC(2), PMPC(1), PMPC(2) or base-parallel.
        #[arg(long, default_value = "base-parallel")]
        controller: String,
    },
    /// Run all seven approaches with a shared seed and print a summary table.
    Compare {
        #[command(flatten)]
        common: RunArgs,
    },
    /// Generate training data, fit the gain networks and write their parameter file.
    TrainAnn {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Write the plot tables for a run log.
    EmitPlots {
        /// Run log written by `run` or `compare`.
        log: PathBuf,
        /// Output directory.
        #[arg(long, default_value = "out/plots")]
        out: PathBuf,
    },
    /// Check a scenario file and print its resolved parameters.
    ValidateScenario {
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    /// Scenario file (TOML). Without it the built-in reference scenario is used.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Run seed (demand noise and ANN training data).
    #[arg(long, env = "BASEPAR_SEED")]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Termination {
    /// Only the best iterate of each solve becomes a candidate.
    Best,
    /// Every recorded iterate becomes a candidate.
    All,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Wall-clock budget per control step, seconds.
    #[arg(long)]
    budget_s: Option<f64>,
    /// Function tolerance of the online solver.
    #[arg(long)]
    ftol: Option<f64>,
    /// Step tolerance of the online solver.
    #[arg(long)]
    xtol: Option<f64>,
    /// Which solver iterates become candidates.
    #[arg(long, value_enum)]
    termination: Option<Termination>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Deterministic mode: no wall-clock budget, no threads within a step.
    #[arg(long)]
    serial: bool,
}

impl ScenarioArgs {
    fn load(&self) -> Result<ScenarioConfig> {
        let mut cfg = match &self.scenario {
            Some(path) => load_scenario(path)?,
            None => ScenarioConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunArgs {
    fn load(&self) -> Result<ScenarioConfig> {
        let mut cfg = self.scenario.load()?;
        let opt = &mut cfg.optimizer;
        if let Some(b) = self.budget_s {
            opt.budget_s = b;
        }
        if let Some(f) = self.ftol {
            opt.function_tolerance = f;
        }
        if let Some(x) = self.xtol {
            opt.step_tolerance = x;
        }
        if let Some(t) = self.termination {
            opt.termination = match t {
                Termination::Best => TerminationOption::BestIterate,
                Termination::All => TerminationOption::AllIterates,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .filter_map(|c| match c {
            '(' => Some('_'),
            ')' => None,
            c => Some(c.to_ascii_lowercase()),
        })
        .collect()
}

fn write_run(out: &Path, log: &RunLog) -> Result<PathBuf> {
    let path = out.join(format!("run_{}.jsonl", file_stem(&log.header.controller)));
    log.save(&path)?;
    Ok(path)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { common, controller } => {
            let choice: ControllerChoice = controller.parse()?;
            let cfg = common.load()?;
            let exp = Experiment::prepare(cfg, common.serial)?;
            fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
            let log = exp.run(choice)?;
            let path = write_run(&common.out, &log)?;
            let summary = serde_json::to_string_pretty(&log.summary)?;
            fs::write(common.out.join(format!("summary_{}.json", file_stem(&log.header.controller))), &summary)?;
            println!("{}", format_comparison(&[(log.header.controller.clone(), log.summary.clone())]));
            println!("log written to {}", path.display());
        }
        Command::Compare { common } => {
            let cfg = common.load()?;
            let exp = Experiment::prepare(cfg, common.serial)?;
            fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
            let mut rows = Vec::new();
            for (choice, log) in exp.compare()? {
                write_run(&common.out, &log)?;
                rows.push((choice.to_string(), log.summary));
            }
            let table = format_comparison(&rows);
            fs::write(common.out.join("compare.txt"), &table)?;
            fs::write(common.out.join("compare.json"), serde_json::to_string_pretty(&rows)?)?;
            print!("{table}");
        }
        Command::TrainAnn { scenario, out } => {
            let cfg = scenario.load()?;
            let params = cfg.network_params()?;
            let data = generate_training_data(&params, cfg.ann.samples, cfg.data_seed())?;
            let mut networks = Vec::new();
            for set in &data {
                let t = train_mlp(set, &cfg.ann.training)?;
                println!(
                    "cell {}: validation RMSE {:.4}, target std {:.4}, ratio {:.3}",
                    set.cell + 1,
                    t.validation_rmse,
                    t.target_std,
                    t.validation_rmse / t.target_std
                );
                networks.push(t.params);
            }
            let bank = AnnBank {
                cells: data.iter().map(|d| d.cell).collect(),
                networks,
                gain_bounds: (cfg.control.gain_bounds[0], cfg.control.gain_bounds[1]),
            };
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let path = out.join("ann_params.json");
            bank.to_file().save(&path)?;
            println!("parameters written to {}", path.display());
        }
        Command::EmitPlots { log, out } => {
            let run = RunLog::load(&log)?;
            for path in emit_plot_data(&run, &out)? {
                println!("{}", path.display());
            }
        }
        Command::ValidateScenario { scenario } => {
            let cfg = scenario.load()?;
            let params = cfg.network_params()?;
            let metered: Vec<usize> = params.metered_cells().iter().map(|c| c + 1).collect();
            println!(
                "scenario `{}` is valid: {} cells, metered ramps at cells {:?}, {} steps of {} s, seed {}",
                cfg.name,
                params.n_cells(),
                metered,
                cfg.run.steps,
                params.sample_cycle_s,
                cfg.run.seed
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

//! Closed-loop experiments: runner, run log, metrics and plot tables.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::actm::{self, ExogenousInput, FlowVector, NetworkParams, NetworkState, StageCost};
use crate::base::{generate_training_data, train_mlp, AnnBank, BaseController, Measurement, MlpFile, TrainedMlp};
use crate::error::{ControlError, RunError, TrainingError};
use crate::mpc::MpcSpec;
use crate::orchestrator::{Architecture, ArchitectureConfig, BaseSlot, SelectionRecord};
use crate::scenario::ScenarioConfig;

pub const LOG_SCHEMA_VERSION: u32 = 1;

/// What drives the ramps during a run. MPC variants index into the
/// scenario's horizon list (0 is the shortest horizon, labelled `(1)`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControllerChoice {
    Alinea,
    Ann,
    Cmpc(usize),
    Pmpc(usize),
    /// Both bases with their cells of online controllers.
    Architecture,
}

impl ControllerChoice {
    /// The seven approaches compared in the reference study, for a
    /// scenario with `n_horizons` horizons per cell.
    pub fn comparison_set(n_horizons: usize) -> Vec<ControllerChoice> {
        let mut out = vec![ControllerChoice::Alinea, ControllerChoice::Ann];
        out.extend((0..n_horizons).map(ControllerChoice::Cmpc));
        out.extend((0..n_horizons).map(ControllerChoice::Pmpc));
        out.push(ControllerChoice::Architecture);
        out
    }
}

impl fmt::Display for ControllerChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControllerChoice::Alinea => write!(f, "ALINEA"),
            ControllerChoice::Ann => write!(f, "ANN"),
            ControllerChoice::Cmpc(i) => write!(f, "CMPC({})", i + 1),
            ControllerChoice::Pmpc(i) => write!(f, "PMPC({})", i + 1),
            ControllerChoice::Architecture => write!(f, "base-parallel"),
        }
    }
}

impl FromStr for ControllerChoice {
    type Err = RunError;

    /// Accepts the display labels case-insensitively, with or without
    /// parentheses (`cmpc2`, `CMPC(2)`), plus `architecture`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| !matches!(c, '(' | ')' | ' '))
            .collect::<String>()
            .to_ascii_lowercase();
        let indexed = |rest: &str| -> Option<usize> { rest.parse::<usize>().ok().filter(|&i| i >= 1).map(|i| i - 1) };
        let choice = match norm.as_str() {
            "alinea" => Some(ControllerChoice::Alinea),
            "ann" => Some(ControllerChoice::Ann),
            "base-parallel" | "baseparallel" | "architecture" => Some(ControllerChoice::Architecture),
            _ => {
                if let Some(rest) = norm.strip_prefix("cmpc") {
                    indexed(rest).map(ControllerChoice::Cmpc)
                } else if let Some(rest) = norm.strip_prefix("pmpc") {
                    indexed(rest).map(ControllerChoice::Pmpc)
                } else {
                    None
                }
            }
        };
        choice.ok_or_else(|| RunError::UnknownController(s.to_string()))
    }
}

/// Trains one network per metered ramp on freshly generated samples.
pub fn train_ann_bank(scenario: &ScenarioConfig, params: &NetworkParams) -> Result<(AnnBank, Vec<TrainedMlp>), TrainingError> {
    let data = generate_training_data(params, scenario.ann.samples, scenario.data_seed())?;
    let mut trained = Vec::with_capacity(data.len());
    for set in &data {
        log::info!("training gain network for cell {}", set.cell + 1);
        trained.push(train_mlp(set, &scenario.ann.training)?);
    }
    let bank = AnnBank {
        cells: data.iter().map(|d| d.cell).collect(),
        networks: trained.iter().map(|t| t.params.clone()).collect(),
        gain_bounds: (scenario.control.gain_bounds[0], scenario.control.gain_bounds[1]),
    };
    Ok((bank, trained))
}

/// A scenario with its network and gain networks ready to run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub scenario: ScenarioConfig,
    pub params: NetworkParams,
    pub bank: AnnBank,
    /// Deterministic mode: no wall-clock budget, no threads inside a step.
    pub serial: bool,
}

impl Experiment {
    /// Loads the gain networks from `ann.param_file`, or trains them.
    pub fn prepare(scenario: ScenarioConfig, serial: bool) -> Result<Self, RunError> {
        let params = scenario.network_params()?;
        let bank = match &scenario.ann.param_file {
            Some(path) => AnnBank::from_file(&MlpFile::load(path)?)?,
            None => train_ann_bank(&scenario, &params)?.0,
        };
        Self::with_bank(scenario, bank, serial)
    }

    pub fn with_bank(scenario: ScenarioConfig, bank: AnnBank, serial: bool) -> Result<Self, RunError> {
        scenario.validate()?;
        let params = scenario.network_params()?;
        if bank.cells != params.metered_cells() {
            return Err(ControlError::Config("gain networks do not match the metered ramps".into()).into());
        }
        Ok(Experiment {
            scenario,
            params,
            bank,
            serial,
        })
    }

    pub fn architecture_config(&self) -> Result<ArchitectureConfig, RunError> {
        let c = &self.scenario.control;
        Ok(ArchitectureConfig {
            eval_horizon: c.eval_horizon,
            gamma: self.scenario.run.gamma,
            optimizer: self.scenario.optimizer.clone(),
            metering_bounds: self.scenario.metering_bounds(&self.params)?,
            gain_bounds: (c.gain_bounds[0], c.gain_bounds[1]),
            serial: self.serial,
        })
    }

    fn alinea_base(&self) -> Result<BaseController, ControlError> {
        let m = self.params.n_metered();
        BaseController::alinea(vec![self.scenario.control.alinea_gain; m], self.scenario.initial.mu_prev.clone())
    }

    fn ann_base(&self) -> Result<BaseController, ControlError> {
        BaseController::ann(self.bank.clone(), self.scenario.initial.mu_prev.clone())
    }

    fn horizon(&self, index: usize) -> Result<usize, RunError> {
        self.scenario
            .control
            .horizons
            .get(index)
            .copied()
            .ok_or_else(|| RunError::UnknownController(format!("horizon index {} of {}", index + 1, self.scenario.control.horizons.len())))
    }

    /// Builds the controller layout for `choice`. Standalone controllers
    /// are architectures with a single candidate source.
    pub fn build(&self, choice: ControllerChoice) -> Result<Architecture, RunError> {
        let slot = |label: &str, controller, emits_candidate, cell| BaseSlot {
            label: label.to_string(),
            controller,
            emits_candidate,
            cell,
        };
        let horizons = &self.scenario.control.horizons;
        let bases = match choice {
            ControllerChoice::Alinea => vec![slot("ALINEA", self.alinea_base()?, true, vec![])],
            ControllerChoice::Ann => vec![slot("ANN", self.ann_base()?, true, vec![])],
            ControllerChoice::Cmpc(i) => {
                let spec = MpcSpec::conventional(self.horizon(i)?).named(choice.to_string());
                vec![slot("ALINEA", self.alinea_base()?, false, vec![spec])]
            }
            ControllerChoice::Pmpc(i) => {
                let spec = MpcSpec::parameterized(self.horizon(i)?).named(choice.to_string());
                vec![slot("ANN", self.ann_base()?, false, vec![spec])]
            }
            ControllerChoice::Architecture => {
                let cmpc = (0..horizons.len())
                    .map(|i| MpcSpec::conventional(horizons[i]).named(ControllerChoice::Cmpc(i).to_string()))
                    .collect();
                let pmpc = (0..horizons.len())
                    .map(|i| MpcSpec::parameterized(horizons[i]).named(ControllerChoice::Pmpc(i).to_string()))
                    .collect();
                vec![
                    slot("ALINEA", self.alinea_base()?, true, cmpc),
                    slot("ANN", self.ann_base()?, true, pmpc),
                ]
            }
        };
        Ok(Architecture::new(self.architecture_config()?, bases)?)
    }

    pub fn run(&self, choice: ControllerChoice) -> Result<RunLog, RunError> {
        let arch = self.build(choice)?;
        run_experiment(&self.scenario, &self.params, arch, &choice.to_string(), self.serial)
    }

    /// Runs every approach of the comparison. Runs are independent, so in
    /// serial mode they proceed on separate threads without affecting the
    /// logs; with a wall-clock budget they run one after another.
    pub fn compare(&self) -> Result<Vec<(ControllerChoice, RunLog)>, RunError> {
        let choices = ControllerChoice::comparison_set(self.scenario.control.horizons.len());
        let logs: Vec<Result<RunLog, RunError>> = if self.serial {
            std::thread::scope(|scope| {
                let handles: Vec<_> = choices.iter().map(|&c| scope.spawn(move || self.run(c))).collect();
                handles.into_iter().map(|h| h.join().expect("run panicked")).collect()
            })
        } else {
            choices.iter().map(|&c| self.run(c)).collect()
        };
        choices.into_iter().zip(logs).map(|(c, l)| l.map(|l| (c, l))).collect()
    }
}

/// Runs the closed loop. The plant sees the true demand; controllers see a
/// noisy reading of the current demand, held constant over their horizon.
pub fn run_experiment(
    scenario: &ScenarioConfig,
    params: &NetworkParams,
    mut arch: Architecture,
    controller: &str,
    serial: bool,
) -> Result<RunLog, RunError> {
    let gamma = scenario.run.gamma;
    let mut state = scenario.initial_state(params)?;
    let mut upstream = scenario.initial_upstream_inflow(params);
    let header = RunHeader {
        schema: LOG_SCHEMA_VERSION,
        scenario: scenario.name.clone(),
        controller: controller.to_string(),
        seed: scenario.run.seed,
        steps: scenario.run.steps,
        serial,
        sample_cycle_s: params.sample_cycle_s,
        gamma,
        rho_crit: params.rho_crit,
        cell_lengths: params.cells.iter().map(|c| c.length).collect(),
        lanes: params.lanes,
        onramp_cells: params.onramp_cells(),
        metered_cells: params.metered_cells(),
        initial_state: state.clone(),
    };
    let mut steps = Vec::with_capacity(scenario.run.steps);
    for k in 0..scenario.run.steps {
        let true_demand = scenario.demand_at(params, k);
        let measured_demand = scenario.measured_demand(&true_demand, k);
        let measurement = Measurement {
            state: state.clone(),
            demand: measured_demand.clone(),
            upstream_inflow: upstream.clone(),
        };
        let selection = arch.control_step(params, &measurement, std::slice::from_ref(&measured_demand))?;
        let result = actm::step(&state, &true_demand, Some(&selection.applied), params, gamma)?;
        upstream = result.flows.upstream_inflows();
        state = result.state.clone();
        steps.push(StepRecord {
            step: k as u64,
            t_s: k as f64 * params.sample_cycle_s,
            true_demand,
            measured_demand,
            selection,
            state: result.state,
            flows: result.flows,
            cost: result.cost,
        });
    }
    let summary = summarize_steps(&steps);
    Ok(RunLog { header, steps, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub schema: u32,
    pub scenario: String,
    pub controller: String,
    pub seed: u64,
    pub steps: usize,
    pub serial: bool,
    pub sample_cycle_s: f64,
    pub gamma: f64,
    pub rho_crit: f64,
    pub cell_lengths: Vec<f64>,
    pub lanes: u32,
    /// 0-based cell indices.
    pub onramp_cells: Vec<usize>,
    pub metered_cells: Vec<usize>,
    pub initial_state: NetworkState,
}

/// Everything that happened during one sampling cycle. `state` is the
/// plant state after the step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub t_s: f64,
    pub true_demand: ExogenousInput,
    pub measured_demand: ExogenousInput,
    pub selection: SelectionRecord,
    pub state: NetworkState,
    pub flows: FlowVector,
    pub cost: StageCost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub steps: usize,
    /// Σ stage cost, vehicle-hours.
    pub j_total: f64,
    pub tt_total: f64,
    pub td_total: f64,
    /// Vehicles that left the network (last-cell outflow plus off-ramps).
    pub n_total: f64,
    /// Seconds per vehicle; `None` when nothing left the network.
    pub avg_cost_per_vehicle: Option<f64>,
    pub wins: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub header: RunHeader,
    pub steps: Vec<StepRecord>,
    pub summary: MetricsSummary,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LogLine {
    Header(RunHeader),
    Step(Box<StepRecord>),
    Summary(MetricsSummary),
}

fn summarize_steps(steps: &[StepRecord]) -> MetricsSummary {
    let mut s = MetricsSummary {
        steps: steps.len(),
        j_total: 0.0,
        tt_total: 0.0,
        td_total: 0.0,
        n_total: 0.0,
        avg_cost_per_vehicle: None,
        wins: BTreeMap::new(),
    };
    for r in steps {
        s.j_total += r.cost.j;
        s.tt_total += r.cost.tt;
        s.td_total += r.cost.td_h;
        s.n_total += r.cost.throughput;
        *s.wins.entry(r.selection.winner_label.clone()).or_default() += 1;
    }
    if s.n_total > 0.0 {
        s.avg_cost_per_vehicle = Some(s.j_total * 3600.0 / s.n_total);
    }
    s
}

/// Recomputes the summary from the step records.
pub fn summarize(log: &RunLog) -> MetricsSummary {
    summarize_steps(&log.steps)
}

impl RunLog {
    /// One JSON object per line: header, steps, summary.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |line: LogLine| {
            out.push_str(&serde_json::to_string(&line).expect("log record serializes"));
            out.push('\n');
        };
        push(LogLine::Header(self.header.clone()));
        for s in &self.steps {
            push(LogLine::Step(Box::new(s.clone())));
        }
        push(LogLine::Summary(self.summary.clone()));
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, RunError> {
        Self::parse_lines(text.lines().map(|l| Ok(l.to_string())))
    }

    fn parse_lines(lines: impl Iterator<Item = Result<String, RunError>>) -> Result<Self, RunError> {
        let mut header = None;
        let mut steps = Vec::new();
        let mut summary = None;
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LogLine = serde_json::from_str(&line).map_err(|e| RunError::Log(format!("line {}: {e}", i + 1)))?;
            match rec {
                LogLine::Header(h) => {
                    if h.schema != LOG_SCHEMA_VERSION {
                        return Err(RunError::Log(format!("unsupported schema version {}", h.schema)));
                    }
                    header = Some(h)
                }
                LogLine::Step(s) => steps.push(*s),
                LogLine::Summary(s) => summary = Some(s),
            }
        }
        let header = header.ok_or_else(|| RunError::Log("missing header".into()))?;
        let summary = summary.ok_or_else(|| RunError::Log("missing summary".into()))?;
        if steps.len() != header.steps {
            return Err(RunError::Log(format!("{} step records for a {}-step run", steps.len(), header.steps)));
        }
        Ok(RunLog { header, steps, summary })
    }

    pub fn save(&self, path: &Path) -> Result<(), RunError> {
        let io = |source| RunError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(self.to_jsonl().as_bytes()).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let io = |source| RunError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = File::open(path).map_err(io)?;
        Self::parse_lines(BufReader::new(file).lines().map(|l| l.map_err(io)))
    }
}

/// Names of the demand sources, in the column order of the demand table.
pub fn demand_sources(header: &RunHeader) -> Vec<String> {
    std::iter::once("mainstream".to_string())
        .chain(header.onramp_cells.iter().map(|c| format!("ramp_cell{}", c + 1)))
        .collect()
}

/// Writes the plot tables into `out_dir`:
/// `demand.csv`, `states.csv`, `candidates.csv`, `winners.csv` and
/// `cumulative.csv`. Floats are written in shortest round-trip form.
pub fn emit_plot_data(log: &RunLog, out_dir: &Path) -> Result<Vec<std::path::PathBuf>, RunError> {
    let io = |path: &Path| {
        let p = path.display().to_string();
        move |source| RunError::Io { path: p, source }
    };
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let h = &log.header;
    let mut written = Vec::new();
    let mut table = |name: &str, header: String, rows: Vec<String>| -> Result<(), RunError> {
        let path = out_dir.join(name);
        let mut w = BufWriter::new(File::create(&path).map_err(io(&path))?);
        writeln!(w, "{header}").map_err(io(&path))?;
        for r in rows {
            writeln!(w, "{r}").map_err(io(&path))?;
        }
        w.flush().map_err(io(&path))?;
        written.push(path);
        Ok(())
    };

    let sources = demand_sources(h);
    let mut rows = Vec::new();
    for s in &log.steps {
        let d = &s.true_demand;
        let values = std::iter::once(d.mainstream_demand).chain(h.onramp_cells.iter().map(|&c| d.ramp_demands[c]));
        for (src, v) in sources.iter().zip(values) {
            rows.push(format!("{},{},{},{}", s.step, s.t_s, src, v));
        }
    }
    table("demand.csv", "step,t_s,source,demand_veh_per_step".into(), rows)?;

    // Step 0 is the initial state; step k+1 is the state after step k.
    let density_of = |cell: usize, n: f64| n / (h.cell_lengths[cell] * h.lanes as f64);
    let mut rows = Vec::new();
    let states = std::iter::once((0u64, &h.initial_state)).chain(log.steps.iter().map(|s| (s.step + 1, &s.state)));
    for (k, st) in states {
        for (i, (&n, &q)) in st.n.iter().zip(&st.q).enumerate() {
            rows.push(format!("{},{},{},{},{},{}", k, k as f64 * h.sample_cycle_s, i + 1, n, q, density_of(i, n)));
        }
    }
    table("states.csv", "step,t_s,cell,n_veh,q_veh,rho_veh_per_m".into(), rows)?;

    let mut rows = Vec::new();
    for s in &log.steps {
        for (i, c) in s.selection.candidates.iter().enumerate() {
            rows.push(format!(
                "{},{},{},{},{},{}",
                s.step,
                i,
                c.label,
                c.iteration,
                c.epsilon,
                u8::from(s.selection.winner == Some(i))
            ));
        }
    }
    table("candidates.csv", "step,candidate,label,iteration,epsilon,winner".into(), rows)?;

    let applied_cols: Vec<String> = h.metered_cells.iter().map(|c| format!("mu_cell{}", c + 1)).collect();
    let rows = log
        .steps
        .iter()
        .map(|s| {
            let mut row = format!("{},{},{},{}", s.step, s.t_s, s.selection.winner_label, u8::from(s.selection.fallback));
            for v in &s.selection.applied {
                row.push_str(&format!(",{v}"));
            }
            row
        })
        .collect();
    let mut head = "step,t_s,winner,fallback".to_string();
    for c in &applied_cols {
        head.push(',');
        head.push_str(c);
    }
    table("winners.csv", head, rows)?;

    let mut j_cum = 0.0;
    let mut exits_cum = 0.0;
    let rows = log
        .steps
        .iter()
        .map(|s| {
            j_cum += s.cost.j;
            exits_cum += s.cost.throughput;
            format!("{},{},{},{},{},{}", s.step, s.t_s, s.cost.j, j_cum, s.cost.throughput, exits_cum)
        })
        .collect();
    table("cumulative.csv", "step,t_s,j,j_cumulative,exits,exits_cumulative".into(), rows)?;
    Ok(written)
}

/// Plain-text table with one row per approach.
pub fn format_comparison(rows: &[(String, MetricsSummary)]) -> String {
    let mut out = format!(
        "{:<14} {:>14} {:>14} {:>22}\n",
        "approach", "J_total [h]", "n_total [veh]", "avg cost/veh [s]"
    );
    for (label, m) in rows {
        let avg = m
            .avg_cost_per_vehicle
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "undefined".into());
        out.push_str(&format!("{:<14} {:>14.6} {:>14.4} {:>22}\n", label, m.j_total, m.n_total, avg));
    }
    out
}

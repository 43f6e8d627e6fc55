//! Scenario files, demand profiles and demand noise.
//!
//! A scenario is a TOML document. Every field is optional; omitted fields
//! take the values of the reference six-cell stretch (see
//! `scenarios/default.toml`). Cells are numbered from 1 in scenario files,
//! upstream to downstream.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actm::{CellParams, ExogenousInput, NetworkParams, NetworkState};
use crate::base::{TrainingConfig, DEFAULT_ALINEA_GAIN};
use crate::error::ScenarioError;
use crate::optim::{Bounds, OptimizerConfig};

/// Parameters shared by every cell unless a ramp entry overrides them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellDefaults {
    pub length: f64,
    pub capacity_nbar: f64,
    pub sat_mainline_obar: f64,
    pub sat_offramp_sbar: f64,
    pub eta_moving: f64,
    pub eta_idling: f64,
    pub xi: f64,
}

impl Default for CellDefaults {
    fn default() -> Self {
        CellDefaults {
            length: 560.0,
            capacity_nbar: 80.0,
            sat_mainline_obar: 8.0,
            sat_offramp_sbar: 6.0,
            eta_moving: 0.8,
            eta_idling: 0.3,
            xi: 0.4,
        }
    }
}

/// Ramps attached to one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampSpec {
    /// 1-based cell number.
    pub cell: usize,
    pub blend_alpha: f64,
    #[serde(default)]
    pub split_beta: f64,
    /// Overrides the default η^m for this cell.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_moving: Option<f64>,
    #[serde(default = "yes")]
    pub metered: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub cells: usize,
    pub sample_cycle_s: f64,
    pub rho_crit: f64,
    pub lanes: u32,
    pub free_flow_speed: f64,
    pub allow_full_split: bool,
    pub defaults: CellDefaults,
    pub ramps: Vec<RampSpec>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let ramp = |cell, blend_alpha, split_beta, eta| RampSpec {
            cell,
            blend_alpha,
            split_beta,
            eta_moving: Some(eta),
            metered: true,
        };
        NetworkSection {
            cells: 6,
            sample_cycle_s: 20.0,
            rho_crit: 0.0335,
            lanes: 1,
            free_flow_speed: 28.0,
            allow_full_split: false,
            defaults: CellDefaults::default(),
            ramps: vec![ramp(2, 0.6, 0.35, 0.8), ramp(4, 0.8, 0.62, 0.65), ramp(5, 0.7, 0.43, 0.8)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialSection {
    /// Vehicles per cell; missing trailing cells start empty.
    pub n: Vec<f64>,
    /// Queue per on-ramp, in cell order.
    pub queues: Vec<f64>,
    /// Mainline outflow of each cell during the step before the run,
    /// vehicles/step; missing trailing cells default to 0.
    pub outflow: Vec<f64>,
    /// Mainstream vehicles that entered cell 1 during the step before the run.
    pub inflow: f64,
    /// Metering applied before the run, per metered ramp.
    pub mu_prev: Vec<f64>,
}

impl Default for InitialSection {
    fn default() -> Self {
        InitialSection {
            n: vec![32.6, 36.2, 5.1, 25.3, 3.9, 0.0],
            queues: vec![5.5, 9.6, 1.6],
            outflow: vec![3.8, 0.0, 3.2, 0.6, 0.0, 0.0],
            inflow: 0.0,
            mu_prev: vec![0.5, 0.2, 0.4],
        }
    }
}

/// Piecewise-linear demand over time, held constant outside the
/// breakpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandProfile {
    /// (time in seconds, vehicles per step), sorted by time.
    pub points: Vec<[f64; 2]>,
}

impl DemandProfile {
    pub fn at(&self, t_s: f64) -> f64 {
        let pts = &self.points;
        let first = pts[0];
        let last = pts[pts.len() - 1];
        if t_s <= first[0] {
            return first[1];
        }
        if t_s >= last[0] {
            return last[1];
        }
        let i = pts.partition_point(|p| p[0] <= t_s);
        let (a, b) = (pts[i - 1], pts[i]);
        if b[0] == a[0] {
            return b[1];
        }
        a[1] + (b[1] - a[1]) * (t_s - a[0]) / (b[0] - a[0])
    }

    fn validate(&self, field: &str) -> Result<(), ScenarioError> {
        if self.points.is_empty() {
            return Err(ScenarioError::invalid(field, "needs at least one point"));
        }
        if self.points.iter().any(|p| !p[0].is_finite() || !(p[1] >= 0.0) || !p[1].is_finite()) {
            return Err(ScenarioError::invalid(field, "times must be finite and demands finite and nonnegative"));
        }
        if self.points.windows(2).any(|w| w[1][0] < w[0][0]) {
            return Err(ScenarioError::invalid(field, "breakpoints must be sorted by time"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampDemand {
    /// 1-based cell number of the on-ramp.
    pub cell: usize,
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemandSection {
    pub mainstream: DemandProfile,
    pub ramps: Vec<RampDemand>,
}

impl Default for DemandSection {
    /// Stand-in profiles: a mainstream peak in the middle of the hour and
    /// staggered ramp peaks.
    fn default() -> Self {
        DemandSection {
            mainstream: DemandProfile {
                points: vec![[0.0, 5.0], [600.0, 6.5], [1200.0, 7.8], [2400.0, 7.8], [3000.0, 6.0], [3600.0, 5.0]],
            },
            ramps: vec![
                RampDemand {
                    cell: 2,
                    points: vec![[0.0, 0.8], [900.0, 2.0], [1800.0, 1.6], [3600.0, 0.8]],
                },
                RampDemand {
                    cell: 4,
                    points: vec![[0.0, 1.0], [1200.0, 3.5], [2400.0, 3.0], [3600.0, 1.0]],
                },
                RampDemand {
                    cell: 5,
                    points: vec![[0.0, 0.6], [1500.0, 1.5], [2700.0, 1.2], [3600.0, 0.6]],
                },
            ],
        }
    }
}

/// Multiplicative demand noise d' = d·(1 + u), u ~ U(−fraction, fraction).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    pub fraction: f64,
    /// Defaults to the run seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            fraction: 0.10,
            seed: None,
        }
    }
}

/// One noisy reading of `demand`, never negative.
pub fn perturb_demand(demand: f64, noise: &NoiseModel, rng: &mut impl Rng) -> f64 {
    if noise.fraction == 0.0 || demand == 0.0 {
        return demand;
    }
    let u = rng.gen_range(-noise.fraction..=noise.fraction);
    (demand * (1.0 + u)).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub steps: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            steps: 180,
            gamma: 0.8,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSection {
    pub alinea_gain: f64,
    /// Prediction horizons of the two controllers in each parallel cell.
    pub horizons: Vec<usize>,
    pub eval_horizon: usize,
    pub metering_min: f64,
    /// Defaults to ō of the metered cell.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metering_max: Option<f64>,
    pub gain_bounds: [f64; 2],
}

impl Default for ControlSection {
    fn default() -> Self {
        ControlSection {
            alinea_gain: DEFAULT_ALINEA_GAIN,
            horizons: vec![3, 10],
            eval_horizon: 3,
            metering_min: 0.0,
            metering_max: None,
            gain_bounds: [0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnSection {
    /// Trained parameter file; when absent the networks are trained at
    /// start-up.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub param_file: Option<PathBuf>,
    /// Training samples per metered ramp.
    pub samples: usize,
    /// Seed for sample generation; defaults to the run seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    pub training: TrainingConfig,
}

impl Default for AnnSection {
    fn default() -> Self {
        AnnSection {
            param_file: None,
            samples: 500,
            data_seed: None,
            training: TrainingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub network: NetworkSection,
    pub initial: InitialSection,
    pub demand: DemandSection,
    pub noise: NoiseModel,
    pub run: RunSection,
    pub control: ControlSection,
    pub optimizer: OptimizerConfig,
    pub ann: AnnSection,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ScenarioError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn network_params(&self) -> Result<NetworkParams, ScenarioError> {
        let net = &self.network;
        let d = &net.defaults;
        let mut cells = vec![
            CellParams::mainline(d.length, d.capacity_nbar, d.sat_mainline_obar, d.eta_moving, d.eta_idling, d.xi);
            net.cells
        ];
        for r in &net.ramps {
            if r.cell == 0 || r.cell > net.cells {
                return Err(ScenarioError::invalid("network.ramps.cell", format!("cell {} outside 1..={}", r.cell, net.cells)));
            }
            let c = &mut cells[r.cell - 1];
            if c.has_onramp {
                return Err(ScenarioError::invalid("network.ramps.cell", format!("cell {} listed twice", r.cell)));
            }
            c.has_onramp = true;
            c.metered = r.metered;
            c.blend_alpha = r.blend_alpha;
            c.split_beta = r.split_beta;
            c.has_offramp = r.split_beta > 0.0;
            c.sat_offramp_sbar = d.sat_offramp_sbar;
            if let Some(eta) = r.eta_moving {
                c.eta_moving = eta;
            }
        }
        let params = NetworkParams {
            cells,
            sample_cycle_s: net.sample_cycle_s,
            rho_crit: net.rho_crit,
            lanes: net.lanes,
            free_flow_speed: net.free_flow_speed,
            allow_full_split: net.allow_full_split,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn initial_state(&self, params: &NetworkParams) -> Result<NetworkState, ScenarioError> {
        let cells = params.n_cells();
        let init = &self.initial;
        if init.n.len() > cells {
            return Err(ScenarioError::invalid("initial.n", format!("{} values for {cells} cells", init.n.len())));
        }
        let ramps = params.onramp_cells();
        if init.queues.len() != ramps.len() {
            return Err(ScenarioError::invalid(
                "initial.queues",
                format!("{} values for {} on-ramps", init.queues.len(), ramps.len()),
            ));
        }
        let mut n = init.n.clone();
        n.resize(cells, 0.0);
        let mut q = vec![0.0; cells];
        for (&cell, &v) in ramps.iter().zip(&init.queues) {
            q[cell] = v;
        }
        let state = NetworkState { n, q, step: 0 };
        state.validate(params)?;
        Ok(state)
    }

    /// Upstream inflow of every cell during the step before the run.
    pub fn initial_upstream_inflow(&self, params: &NetworkParams) -> Vec<f64> {
        let mut out = self.initial.outflow.clone();
        out.resize(params.n_cells(), 0.0);
        std::iter::once(self.initial.inflow)
            .chain(out.into_iter().take(params.n_cells() - 1))
            .collect()
    }

    /// True demand at the start of `step`.
    pub fn demand_at(&self, params: &NetworkParams, step: usize) -> ExogenousInput {
        let t = step as f64 * params.sample_cycle_s;
        let mut ramp_demands = vec![0.0; params.n_cells()];
        for r in &self.demand.ramps {
            ramp_demands[r.cell - 1] = DemandProfile { points: r.points.clone() }.at(t);
        }
        ExogenousInput {
            mainstream_demand: self.demand.mainstream.at(t),
            ramp_demands,
        }
    }

    /// Noisy reading of the demand at `step`. The draw depends only on the
    /// noise seed and the step, so every controller sees the same noise.
    pub fn measured_demand(&self, truth: &ExogenousInput, step: usize) -> ExogenousInput {
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise.seed.unwrap_or(self.run.seed));
        rng.set_stream(step as u64);
        let mainstream_demand = perturb_demand(truth.mainstream_demand, &self.noise, &mut rng);
        let ramp_demands = truth
            .ramp_demands
            .iter()
            .map(|&d| perturb_demand(d, &self.noise, &mut rng))
            .collect();
        ExogenousInput {
            mainstream_demand,
            ramp_demands,
        }
    }

    /// Per metered ramp: [metering_min, metering_max or ō].
    pub fn metering_bounds(&self, params: &NetworkParams) -> Result<Bounds, ScenarioError> {
        let cells = params.metered_cells();
        let lo = vec![self.control.metering_min; cells.len()];
        let hi = cells
            .iter()
            .map(|&i| self.control.metering_max.unwrap_or(params.cells[i].sat_mainline_obar))
            .collect();
        Bounds::new(lo, hi).map_err(|e| ScenarioError::invalid("control.metering_max", e.to_string()))
    }

    pub fn data_seed(&self) -> u64 {
        self.ann.data_seed.unwrap_or(self.run.seed)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let params = self.network_params()?;
        self.initial_state(&params)?;
        if self.initial.mu_prev.len() != params.n_metered() {
            return Err(ScenarioError::invalid(
                "initial.mu_prev",
                format!("{} values for {} metered ramps", self.initial.mu_prev.len(), params.n_metered()),
            ));
        }
        if self.initial.mu_prev.iter().any(|m| !(*m >= 0.0)) {
            return Err(ScenarioError::invalid("initial.mu_prev", "rates must be nonnegative"));
        }
        if self.initial.outflow.len() > params.n_cells() {
            return Err(ScenarioError::invalid("initial.outflow", "more values than cells"));
        }
        if self.initial.outflow.iter().chain(std::iter::once(&self.initial.inflow)).any(|v| !(*v >= 0.0)) {
            return Err(ScenarioError::invalid("initial.outflow", "flows must be nonnegative"));
        }
        self.demand.mainstream.validate("demand.mainstream")?;
        let onramps = params.onramp_cells();
        for r in &self.demand.ramps {
            if r.cell == 0 || !onramps.contains(&(r.cell - 1)) {
                return Err(ScenarioError::invalid("demand.ramps.cell", format!("cell {} has no on-ramp", r.cell)));
            }
            DemandProfile { points: r.points.clone() }.validate("demand.ramps.points")?;
        }
        if !(0.0..1.0).contains(&self.noise.fraction) {
            return Err(ScenarioError::invalid("noise.fraction", "must lie in [0, 1)"));
        }
        if self.run.steps == 0 {
            return Err(ScenarioError::invalid("run.steps", "must be at least 1"));
        }
        if !(self.run.gamma >= 0.0) {
            return Err(ScenarioError::invalid("run.gamma", "must be nonnegative"));
        }
        let c = &self.control;
        if c.horizons.is_empty() || c.horizons.contains(&0) {
            return Err(ScenarioError::invalid("control.horizons", "need at least one positive horizon"));
        }
        if c.eval_horizon == 0 || c.horizons.iter().any(|&h| h < c.eval_horizon) {
            return Err(ScenarioError::invalid(
                "control.eval_horizon",
                "must be at least 1 and not exceed any prediction horizon",
            ));
        }
        if !(c.gain_bounds[0] <= c.gain_bounds[1]) {
            return Err(ScenarioError::invalid("control.gain_bounds", "lower bound exceeds upper bound"));
        }
        self.metering_bounds(&params)?;
        self.optimizer
            .validate()
            .map_err(|e| ScenarioError::invalid("optimizer", e.to_string()))?;
        if self.ann.samples <= self.ann.training.train_count {
            return Err(ScenarioError::invalid("ann.samples", "must exceed ann.training.train_count"));
        }
        Ok(())
    }
}

/// Reads and validates a scenario file. Relative `ann.param_file` paths
/// are resolved against the scenario's directory.
pub fn load_scenario(path: &Path) -> Result<ScenarioConfig, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut cfg = ScenarioConfig::from_toml(&text, &path.display().to_string())?;
    if let Some(p) = &cfg.ann.param_file {
        if p.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.ann.param_file = Some(dir.join(p));
            }
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_reference_scenario() {
        let cfg = ScenarioConfig::from_toml("", "inline").unwrap();
        assert_eq!(cfg, ScenarioConfig::default());
        let p = cfg.network_params().unwrap();
        assert_eq!(p.metered_cells(), vec![1, 3, 4]);
        assert_eq!(p.cells[3].eta_moving, 0.65);
        assert_eq!(p.cells[2].eta_moving, 0.8);
    }

    #[test]
    fn missing_profile_points_is_named() {
        let err = ScenarioConfig::from_toml("[[demand.ramps]]\ncell = 2\n", "inline").unwrap_err();
        assert!(err.to_string().contains("points"), "{err}");
    }

    #[test]
    fn unknown_field_is_rejected() {
        let err = ScenarioConfig::from_toml("[run]\nstepz = 3\n", "inline").unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
    }

    #[test]
    fn profile_interpolates_and_holds() {
        let p = DemandProfile {
            points: vec![[0.0, 1.0], [100.0, 3.0]],
        };
        assert_eq!(p.at(-5.0), 1.0);
        assert_eq!(p.at(50.0), 2.0);
        assert_eq!(p.at(500.0), 3.0);
    }

    #[test]
    fn zero_noise_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = NoiseModel {
            fraction: 0.0,
            seed: None,
        };
        assert_eq!(perturb_demand(3.7, &noise, &mut rng), 3.7);
        assert_eq!(perturb_demand(0.0, &NoiseModel::default(), &mut rng), 0.0);
    }

    #[test]
    fn measured_demand_depends_on_step_only() {
        let cfg = ScenarioConfig::default();
        let p = cfg.network_params().unwrap();
        let d = cfg.demand_at(&p, 10);
        assert_eq!(cfg.measured_demand(&d, 10), cfg.measured_demand(&d, 10));
        assert_ne!(cfg.measured_demand(&d, 10), cfg.measured_demand(&d, 11));
    }

    #[test]
    fn upstream_inflow_shifts_outflows() {
        let cfg = ScenarioConfig::default();
        let p = cfg.network_params().unwrap();
        assert_eq!(cfg.initial_upstream_inflow(&p), vec![0.0, 3.8, 0.0, 3.2, 0.6, 0.0]);
    }
}

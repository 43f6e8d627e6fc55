//! Offline training of the gain networks.
//!
//! Each metered cell is treated in isolation: for a sampled operating point
//! (n, q, d, o_up) the gain θ that brings the cell's next-step density
//! closest to the critical density is computed exactly, and a small network
//! is then fitted to those targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::alinea::alinea_law;
use super::mlp::{MlpParams, N_INPUTS, N_PARAMS};
use crate::actm::NetworkParams;
use crate::error::{ModelError, TrainingError};
use crate::optim::{solve_budgeted, Bounds, Deadline, Objective, OptimizerConfig};

/// Density errors below this are treated as zero (vehicles/m/lane).
const ZERO_ERROR: f64 = 1e-12;

/// Sampling box for the four network inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRanges {
    pub n: (f64, f64),
    pub q: (f64, f64),
    pub d: (f64, f64),
    pub o_upstream: (f64, f64),
    /// Search interval for θ.
    pub theta: (f64, f64),
}

impl SampleRanges {
    /// n ∈ [0, n̄], q ∈ [0, 20], d ∈ [0, 3], o_up ∈ [0, ō], θ ∈ [0, 1].
    pub fn for_cell(params: &NetworkParams, cell: usize) -> Self {
        let c = &params.cells[cell];
        let upstream_obar = if cell == 0 {
            c.sat_mainline_obar
        } else {
            params.cells[cell - 1].sat_mainline_obar
        };
        SampleRanges {
            n: (0.0, c.capacity_nbar),
            q: (0.0, 20.0),
            d: (0.0, 3.0),
            o_upstream: (0.0, upstream_obar),
            theta: (0.0, 1.0),
        }
    }

    fn as_array(&self) -> [(f64, f64); N_INPUTS] {
        [self.n, self.q, self.d, self.o_upstream]
    }

    fn validate(&self) -> Result<(), ModelError> {
        for (name, (lo, hi)) in ["n", "q", "d", "o_upstream", "theta"]
            .iter()
            .zip(self.as_array().iter().chain(std::iter::once(&self.theta)))
        {
            if !(lo.is_finite() && hi.is_finite() && *lo >= 0.0 && lo < hi) {
                return Err(ModelError::InvalidParams(format!("sampling range {name} = [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Local view of one metered cell with unrestricted leaving flows.
#[derive(Debug, Clone, PartialEq)]
pub struct IsolatedCell {
    pub length: f64,
    pub lanes: u32,
    pub capacity_nbar: f64,
    pub blend_alpha: f64,
    pub eta_moving: f64,
    pub xi: f64,
    pub rho_crit: f64,
    /// Metering rate applied at the previous step.
    pub mu_prev: f64,
}

impl IsolatedCell {
    pub fn from_network(params: &NetworkParams, cell: usize, mu_prev: f64) -> Self {
        let c = &params.cells[cell];
        IsolatedCell {
            length: c.length,
            lanes: params.lanes,
            capacity_nbar: c.capacity_nbar,
            blend_alpha: c.blend_alpha,
            eta_moving: c.eta_moving,
            xi: c.xi,
            rho_crit: params.rho_crit,
            mu_prev,
        }
    }

    fn road(&self) -> f64 {
        self.length * f64::from(self.lanes)
    }

    fn inflow(&self, x: &[f64; N_INPUTS], mu: f64) -> f64 {
        let [n, q, d, _] = *x;
        (q + d).min(self.xi * (self.capacity_nbar - n)).min(mu).max(0.0)
    }

    /// Next-step vehicles when all leaving flows are unrestricted:
    /// n + o_up + e − (n + αe)η^m.
    pub fn predicted_vehicles(&self, x: &[f64; N_INPUTS], theta: f64) -> f64 {
        let [n, _, _, o_up] = *x;
        let rho = n / self.road();
        let mu = alinea_law(self.mu_prev, theta, self.rho_crit, rho);
        let e = self.inflow(x, mu);
        n + o_up + e - (n + self.blend_alpha * e) * self.eta_moving
    }

    /// |ρ^crit − ρ^exp| for gain θ.
    pub fn density_error(&self, x: &[f64; N_INPUTS], theta: f64) -> f64 {
        (self.rho_crit - self.predicted_vehicles(x, theta) / self.road()).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainSolution {
    pub theta: f64,
    pub error: f64,
    /// The critical density cannot be reached inside the θ interval.
    pub unattainable: bool,
}

/// Exact minimizer of the density error over θ ∈ [lo, hi].
///
/// The predicted count is piecewise linear and monotone in θ, so the
/// minimum is attained at a breakpoint of the metering law, at an interval
/// end, or where the prediction crosses the critical count. Among equal
/// errors the smallest θ wins.
pub fn solve_isolated_gain(cell: &IsolatedCell, x: &[f64; N_INPUTS], theta_range: (f64, f64)) -> GainSolution {
    let (lo, hi) = theta_range;
    let [n, q, d, o_up] = *x;
    let slope = cell.rho_crit - n / cell.road();
    let cap = (q + d).min(cell.xi * (cell.capacity_nbar - n)).max(0.0);
    let fixed = n * (1.0 - cell.eta_moving) + o_up;
    let gain = 1.0 - cell.blend_alpha * cell.eta_moving;
    let target_e = (cell.rho_crit * cell.road() - fixed) / gain;

    let mut candidates = vec![lo, hi];
    if slope != 0.0 {
        for mu in [0.0, cap, target_e] {
            candidates.push((mu - cell.mu_prev) / slope);
        }
    }
    candidates.retain(|t| t.is_finite() && *t >= lo && *t <= hi);
    candidates.sort_by(f64::total_cmp);

    let mut best = GainSolution {
        theta: lo,
        error: cell.density_error(x, lo),
        unattainable: false,
    };
    for &theta in &candidates {
        let error = cell.density_error(x, theta);
        if error < best.error - ZERO_ERROR {
            best = GainSolution {
                theta,
                error,
                unattainable: false,
            };
        }
    }
    best.unattainable = best.error > ZERO_ERROR;
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    /// (n_i, q_i, d_i, o_{i-1}).
    pub inputs: [f64; N_INPUTS],
    pub target_theta: f64,
    /// The optimal θ leaves a nonzero density error.
    pub unattainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDataset {
    pub cell: usize,
    pub ranges: SampleRanges,
    pub samples: Vec<TrainingSample>,
}

/// Latin-hypercube points in the unit cube.
fn latin_hypercube(count: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; N_INPUTS]> {
    let mut points = vec![[0.0; N_INPUTS]; count];
    for k in 0..N_INPUTS {
        let mut strata: Vec<usize> = (0..count).collect();
        for i in (1..count).rev() {
            strata.swap(i, rng.gen_range(0..=i));
        }
        for (p, s) in points.iter_mut().zip(strata) {
            p[k] = (s as f64 + rng.gen::<f64>()) / count as f64;
        }
    }
    points
}

/// Samples `count` operating points per metered cell and labels each with
/// its isolated optimal gain.
///
/// The isolated problem starts from μ_prev = 0, so the label is the gain
/// that builds the metering rate from scratch.
pub fn generate_training_data(params: &NetworkParams, count: usize, seed: u64) -> Result<Vec<CellDataset>, TrainingError> {
    params.validate()?;
    if count == 0 {
        return Err(TrainingError::TooFewSamples { needed: 1, got: 0 });
    }
    params
        .metered_cells()
        .into_iter()
        .map(|cell| {
            let ranges = SampleRanges::for_cell(params, cell);
            generate_cell_data(params, cell, &ranges, count, seed)
        })
        .collect()
}

pub fn generate_cell_data(
    params: &NetworkParams,
    cell: usize,
    ranges: &SampleRanges,
    count: usize,
    seed: u64,
) -> Result<CellDataset, TrainingError> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (cell as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let iso = IsolatedCell::from_network(params, cell, 0.0);
    let bounds = ranges.as_array();
    let samples = latin_hypercube(count, &mut rng)
        .into_iter()
        .map(|u| {
            let mut inputs = [0.0; N_INPUTS];
            for k in 0..N_INPUTS {
                inputs[k] = bounds[k].0 + u[k] * (bounds[k].1 - bounds[k].0);
            }
            let sol = solve_isolated_gain(&iso, &inputs, ranges.theta);
            TrainingSample {
                inputs,
                target_theta: sol.theta,
                unattainable: sol.unattainable,
            }
        })
        .collect();
    Ok(CellDataset {
        cell,
        ranges: ranges.clone(),
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Leading samples used for fitting; the rest are held out.
    pub train_count: usize,
    pub restarts: usize,
    /// Initial weights are drawn uniformly from ±spread.
    pub init_spread: f64,
    /// Every weight is kept inside ±weight_bound.
    pub weight_bound: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            train_count: 400,
            restarts: 4,
            init_spread: 8.0,
            weight_bound: 200.0,
            max_iterations: 1000,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedMlp {
    pub params: MlpParams,
    pub train_mse: f64,
    pub validation_rmse: f64,
    /// Population standard deviation of the held-out targets.
    pub target_std: f64,
    /// Training loss after every accepted iteration of the chosen restart.
    pub loss_history: Vec<f64>,
}

/// Mean squared error over scaled inputs, with backpropagated gradient.
struct SquaredLoss<'a> {
    template: &'a MlpParams,
    inputs: Vec<[f64; N_INPUTS]>,
    targets: Vec<f64>,
}

impl SquaredLoss<'_> {
    fn net(&self, w: &[f64]) -> MlpParams {
        let mut p = self.template.clone();
        p.set_vector(w);
        p
    }
}

impl Objective for SquaredLoss<'_> {
    fn dim(&self) -> usize {
        N_PARAMS
    }

    fn value(&self, w: &[f64]) -> f64 {
        let p = self.net(w);
        let sse: f64 = self
            .inputs
            .iter()
            .zip(&self.targets)
            .map(|(x, y)| {
                let r = p.forward_scaled(x).1 - y;
                r * r
            })
            .sum();
        sse / self.targets.len() as f64
    }

    fn value_and_gradient(&self, w: &[f64]) -> Option<(f64, Vec<f64>)> {
        let p = self.net(w);
        let m = self.targets.len() as f64;
        let mut grad = vec![0.0; N_PARAMS];
        let mut sse = 0.0;
        for (x, y) in self.inputs.iter().zip(&self.targets) {
            let r = p.forward_scaled(x).1 - y;
            sse += r * r;
            p.backprop(x, 2.0 * r / m, &mut grad);
        }
        Some((sse / m, grad))
    }
}

fn rmse(p: &MlpParams, samples: &[TrainingSample]) -> f64 {
    let sse: f64 = samples
        .iter()
        .map(|s| {
            let r = p.forward_scaled(&p.scale(&s.inputs)).1 - s.target_theta;
            r * r
        })
        .sum();
    (sse / samples.len() as f64).sqrt()
}

fn std_dev(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Fits a 4→3→1 network to `dataset`: the first `train_count` samples train,
/// the remainder validate. Each restart runs a box-constrained quasi-Newton
/// descent on the mean squared error; the restart with the lowest training
/// loss is kept.
pub fn train_mlp(dataset: &CellDataset, config: &TrainingConfig) -> Result<TrainedMlp, TrainingError> {
    let samples = &dataset.samples;
    if samples.len() < 2 || config.train_count == 0 || config.train_count >= samples.len() {
        return Err(TrainingError::TooFewSamples {
            needed: config.train_count.max(1) + 1,
            got: samples.len(),
        });
    }
    if let Some(s) = samples.iter().find(|s| !s.inputs.iter().all(|v| v.is_finite())) {
        return Err(TrainingError::NonFiniteInput(s.inputs));
    }
    let ranges = dataset.ranges.as_array();
    let template = MlpParams::zeros(ranges.map(|r| r.0), ranges.map(|r| r.1));
    let (train, valid) = samples.split_at(config.train_count);
    let loss = SquaredLoss {
        template: &template,
        inputs: train.iter().map(|s| template.scale(&s.inputs)).collect(),
        targets: train.iter().map(|s| s.target_theta).collect(),
    };
    let bounds = Bounds::uniform(N_PARAMS, -config.weight_bound, config.weight_bound)
        .map_err(|e| TrainingError::Model(ModelError::InvalidParams(e.to_string())))?;
    let solver = OptimizerConfig {
        function_tolerance: 1e-14,
        step_tolerance: 1e-10,
        max_iterations: config.max_iterations,
        ..OptimizerConfig::default()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for restart in 0..config.restarts.max(1) {
        let start: Vec<f64> = (0..N_PARAMS)
            .map(|_| rng.gen_range(-config.init_spread..=config.init_spread))
            .collect();
        let report = solve_budgeted(&loss, &bounds, &[start], &solver, &Deadline::never())
            .map_err(|e| TrainingError::Model(ModelError::InvalidParams(e.to_string())))?;
        let value = report.best.value;
        if !value.is_finite() {
            return Err(TrainingError::Diverged {
                iteration: report.iterations,
                loss: value,
            });
        }
        log::debug!("cell {} restart {restart}: training mse {value:.6e}", dataset.cell);
        if best.as_ref().map_or(true, |b| value < b.0) {
            best = Some((value, report.best.x, report.best_so_far));
        }
    }
    let (train_mse, weights, loss_history) = best.expect("at least one restart");
    let params = loss.net(&weights);
    Ok(TrainedMlp {
        validation_rmse: rmse(&params, valid),
        target_std: std_dev(valid.iter().map(|s| s.target_theta)),
        params,
        train_mse,
        loss_history,
    })
}

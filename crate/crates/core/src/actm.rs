//! Asymmetric cell transmission model (ACTM) of a single-lane freeway stretch.
//!
//! All flows are vehicles per simulation step and are real valued. Cells
//! are indexed from 0 in the upstream-to-downstream direction. Per-ramp
//! quantities (`q`, ramp demands, on-ramp inflows `e`) are stored per cell
//! and are zero wherever the cell has no on-ramp. Metering vectors are
//! compact: one entry per metered on-ramp, in cell order.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::scalar::Scalar;

/// Absolute tolerance used when checking state invariants.
pub const STATE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    /// Cell length in meters.
    pub length: f64,
    /// Maximum number of vehicles in the cell (n̄).
    pub capacity_nbar: f64,
    /// Mainline saturation outflow, vehicles/step (ō).
    pub sat_mainline_obar: f64,
    /// Off-ramp saturation outflow, vehicles/step (s̄).
    pub sat_offramp_sbar: f64,
    /// Fraction of the cell's leaving vehicles that take the off-ramp (β).
    pub split_beta: f64,
    /// Fraction of on-ramp inflow that blends with the moving regime (α).
    pub blend_alpha: f64,
    /// Fraction of moving vehicles able to leave within one step (η^m).
    pub eta_moving: f64,
    /// Fraction of vacant space the idling regime can fill within one step (η^i).
    pub eta_idling: f64,
    /// Fraction of vacant space available to on-ramp traffic (ξ).
    pub xi: f64,
    pub has_onramp: bool,
    pub has_offramp: bool,
    pub metered: bool,
}

impl CellParams {
    /// A plain mainline cell without ramps.
    pub fn mainline(length: f64, capacity: f64, obar: f64, eta_moving: f64, eta_idling: f64, xi: f64) -> Self {
        CellParams {
            length,
            capacity_nbar: capacity,
            sat_mainline_obar: obar,
            sat_offramp_sbar: 0.0,
            split_beta: 0.0,
            blend_alpha: 0.0,
            eta_moving,
            eta_idling,
            xi,
            has_onramp: false,
            has_offramp: false,
            metered: false,
        }
    }

    fn validate(&self, index: usize, allow_full_split: bool) -> Result<(), ModelError> {
        let bad = |what: &str| Err(ModelError::InvalidParams(format!("cell {index}: {what}")));
        let fractions = [
            ("split_beta", self.split_beta),
            ("blend_alpha", self.blend_alpha),
            ("eta_moving", self.eta_moving),
            ("eta_idling", self.eta_idling),
            ("xi", self.xi),
        ];
        for (name, v) in fractions {
            if !(0.0..=1.0).contains(&v) {
                return bad(&format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.split_beta >= 1.0 && !allow_full_split {
            return bad("split_beta = 1 requires allow_full_split");
        }
        if !(self.length > 0.0) {
            return bad("length must be positive");
        }
        if !(self.capacity_nbar > 0.0) {
            return bad("capacity_nbar must be positive");
        }
        if !(self.sat_mainline_obar >= 0.0) || !(self.sat_offramp_sbar >= 0.0) {
            return bad("saturation flows must be nonnegative");
        }
        if self.metered && !self.has_onramp {
            return bad("metered cell without an on-ramp");
        }
        if !self.has_offramp && self.split_beta != 0.0 {
            return bad("split_beta must be 0 without an off-ramp");
        }
        if !self.has_onramp && self.blend_alpha != 0.0 {
            return bad("blend_alpha must be 0 without an on-ramp");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub cells: Vec<CellParams>,
    /// Simulation sampling cycle in seconds (c^s).
    pub sample_cycle_s: f64,
    /// Critical density, vehicles/meter/lane.
    pub rho_crit: f64,
    pub lanes: u32,
    /// Free-flow speed in m/s; converts traveled distance into hours.
    pub free_flow_speed: f64,
    /// Enables the β = 1 off-ramp branch.
    #[serde(default)]
    pub allow_full_split: bool,
}

impl NetworkParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.cells.is_empty() {
            return Err(ModelError::Topology("network has no cells".into()));
        }
        if !(self.sample_cycle_s > 0.0) {
            return Err(ModelError::InvalidParams("sample_cycle_s must be positive".into()));
        }
        if !(self.rho_crit > 0.0) {
            return Err(ModelError::InvalidParams("rho_crit must be positive".into()));
        }
        if self.lanes == 0 {
            return Err(ModelError::InvalidParams("lanes must be at least 1".into()));
        }
        if !(self.free_flow_speed > 0.0) {
            return Err(ModelError::InvalidParams("free_flow_speed must be positive".into()));
        }
        for (i, c) in self.cells.iter().enumerate() {
            c.validate(i, self.allow_full_split)?;
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    /// Cell indices of metered on-ramps, in order. This is the layout of
    /// every metering vector.
    pub fn metered_cells(&self) -> Vec<usize> {
        (0..self.cells.len()).filter(|&i| self.cells[i].metered).collect()
    }

    pub fn onramp_cells(&self) -> Vec<usize> {
        (0..self.cells.len()).filter(|&i| self.cells[i].has_onramp).collect()
    }

    pub fn n_metered(&self) -> usize {
        self.cells.iter().filter(|c| c.metered).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    /// Vehicles per cell.
    pub n: Vec<f64>,
    /// Queued vehicles per on-ramp, stored per cell.
    pub q: Vec<f64>,
    pub step: u64,
}

impl NetworkState {
    pub fn empty(params: &NetworkParams) -> Self {
        NetworkState {
            n: vec![0.0; params.n_cells()],
            q: vec![0.0; params.n_cells()],
            step: 0,
        }
    }

    pub fn validate(&self, params: &NetworkParams) -> Result<(), ModelError> {
        let len = params.n_cells();
        if self.n.len() != len || self.q.len() != len {
            return Err(ModelError::Topology(format!(
                "state has {} cells / {} queues, network has {len} cells",
                self.n.len(),
                self.q.len()
            )));
        }
        for (i, cell) in params.cells.iter().enumerate() {
            let n = self.n[i];
            if !n.is_finite() || n < -STATE_TOLERANCE || n > cell.capacity_nbar + STATE_TOLERANCE {
                return Err(ModelError::InvalidState(format!(
                    "n[{i}] = {n} outside [0, {}]",
                    cell.capacity_nbar
                )));
            }
            let q = self.q[i];
            if !q.is_finite() || q < -STATE_TOLERANCE {
                return Err(ModelError::InvalidState(format!("q[{i}] = {q} is negative")));
            }
            if !cell.has_onramp && q != 0.0 {
                return Err(ModelError::InvalidState(format!("q[{i}] = {q} on a cell without on-ramp")));
            }
        }
        Ok(())
    }

    /// Vehicles in cells plus vehicles in on-ramp queues.
    pub fn total_vehicles(&self) -> f64 {
        self.n.iter().sum::<f64>() + self.q.iter().sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExogenousInput {
    /// Mainstream demand at the upstream boundary, vehicles/step.
    pub mainstream_demand: f64,
    /// On-ramp demands per cell, vehicles/step; zero where no on-ramp.
    pub ramp_demands: Vec<f64>,
}

impl ExogenousInput {
    pub fn zero(params: &NetworkParams) -> Self {
        ExogenousInput {
            mainstream_demand: 0.0,
            ramp_demands: vec![0.0; params.n_cells()],
        }
    }

    pub fn validate(&self, params: &NetworkParams) -> Result<(), ModelError> {
        if self.ramp_demands.len() != params.n_cells() {
            return Err(ModelError::Topology(format!(
                "{} ramp demands for {} cells",
                self.ramp_demands.len(),
                params.n_cells()
            )));
        }
        if !(self.mainstream_demand >= 0.0) || !self.mainstream_demand.is_finite() {
            return Err(ModelError::InvalidInput(format!(
                "mainstream demand {} must be finite and nonnegative",
                self.mainstream_demand
            )));
        }
        for (i, (&d, cell)) in self.ramp_demands.iter().zip(&params.cells).enumerate() {
            if !(d >= 0.0) || !d.is_finite() {
                return Err(ModelError::InvalidInput(format!("ramp demand [{i}] = {d}")));
            }
            if !cell.has_onramp && d != 0.0 {
                return Err(ModelError::InvalidInput(format!("ramp demand on cell {i} without on-ramp")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowVector {
    /// Mainstream vehicles admitted into the first cell (o_0).
    pub inflow: f64,
    /// On-ramp inflows per cell.
    pub e: Vec<f64>,
    /// Mainline outflows per cell; the last entry leaves the network.
    pub o: Vec<f64>,
    /// Off-ramp outflows per cell.
    pub s: Vec<f64>,
}

impl FlowVector {
    /// Vehicles leaving the network during the step.
    pub fn exits(&self) -> f64 {
        self.o.last().copied().unwrap_or(0.0) + self.s.iter().sum::<f64>()
    }

    /// Mainline flow that entered each cell from upstream: o_0 for the
    /// first cell, o_{i-1} otherwise.
    pub fn upstream_inflows(&self) -> Vec<f64> {
        std::iter::once(self.inflow)
            .chain(self.o.iter().take(self.o.len().saturating_sub(1)).copied())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    /// Total time spent, vehicle-hours.
    pub tt: f64,
    /// Traveled distance as free-flow vehicle-hours.
    pub td_h: f64,
    /// tt − γ·td_h, hours.
    pub j: f64,
    /// Vehicles exiting during the step.
    pub throughput: f64,
}

impl StageCost {
    pub const ZERO: StageCost = StageCost {
        tt: 0.0,
        td_h: 0.0,
        j: 0.0,
        throughput: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub state: NetworkState,
    pub flows: FlowVector,
    pub cost: StageCost,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// States visited, starting with the initial state (`horizon + 1` entries).
    pub states: Vec<NetworkState>,
    pub flows: Vec<FlowVector>,
    pub costs: Vec<StageCost>,
    /// Σ j over the window.
    pub total_j: f64,
}

// ---------------------------------------------------------------------------
// Generic kernels

pub(crate) struct Flows<T> {
    pub inflow: T,
    pub e: Vec<T>,
    pub o: Vec<T>,
    pub s: Vec<T>,
}

pub(crate) fn onramp_inflow_kernel<T: Scalar>(
    params: &NetworkParams,
    n: &[T],
    q: &[T],
    ramp_demands: &[f64],
    metering: Option<&[T]>,
) -> Vec<T> {
    let mut meter = metering.map(|m| m.iter());
    params
        .cells
        .iter()
        .enumerate()
        .map(|(i, cell)| {
            if !cell.has_onramp {
                return T::constant(0.0);
            }
            let waiting = q[i].clone() + ramp_demands[i];
            let space = (-n[i].clone() + cell.capacity_nbar) * cell.xi;
            let e = waiting.min_of(space);
            let rate = if cell.metered {
                meter.as_mut().map(|it| it.next().expect("metering length checked").clone())
            } else {
                None
            };
            let e = match rate {
                Some(mu) => e.min_of(mu),
                None => e,
            };
            e.max_of(T::constant(0.0))
        })
        .collect()
}

pub(crate) fn mainline_outflow_kernel<T: Scalar>(params: &NetworkParams, n: &[T], e: &[T]) -> Vec<T> {
    let last = params.n_cells() - 1;
    params
        .cells
        .iter()
        .enumerate()
        .map(|(i, cell)| {
            let beta = cell.split_beta;
            let moving = (n[i].clone() + e[i].clone() * cell.blend_alpha) * ((1.0 - beta) * cell.eta_moving);
            let mut o = moving.min_of(T::constant(cell.sat_mainline_obar));
            if i < last {
                let down = &params.cells[i + 1];
                let space = (-n[i + 1].clone() - e[i + 1].clone() * down.blend_alpha + down.capacity_nbar)
                    * down.eta_idling;
                o = o.min_of(space);
            }
            if beta > 0.0 && beta < 1.0 {
                o = o.min_of(T::constant((1.0 - beta) / beta * cell.sat_offramp_sbar));
            }
            o.max_of(T::constant(0.0))
        })
        .collect()
}

pub(crate) fn offramp_outflow_kernel<T: Scalar>(params: &NetworkParams, n: &[T], e: &[T], o: &[T]) -> Vec<T> {
    params
        .cells
        .iter()
        .enumerate()
        .map(|(i, cell)| {
            let beta = cell.split_beta;
            if !cell.has_offramp || beta == 0.0 {
                T::constant(0.0)
            } else if beta < 1.0 {
                o[i].clone() * (beta / (1.0 - beta))
            } else {
                let moving = (n[i].clone() + e[i].clone() * cell.blend_alpha) * cell.eta_moving;
                T::constant(cell.sat_offramp_sbar).min_of(moving)
            }
        })
        .collect()
}

/// Mainstream vehicles admitted into the first cell.
pub(crate) fn mainstream_inflow_kernel<T: Scalar>(params: &NetworkParams, n: &[T], e: &[T], demand: f64) -> T {
    let first = &params.cells[0];
    let space = (-n[0].clone() - e[0].clone() * first.blend_alpha + first.capacity_nbar) * first.eta_idling;
    T::constant(demand).min_of(space).max_of(T::constant(0.0))
}

/// One ACTM update: e, then o, then s, then the balance equations.
pub(crate) fn advance_kernel<T: Scalar>(
    params: &NetworkParams,
    n: &[T],
    q: &[T],
    input: &ExogenousInput,
    metering: Option<&[T]>,
) -> (Vec<T>, Vec<T>, Flows<T>) {
    let e = onramp_inflow_kernel(params, n, q, &input.ramp_demands, metering);
    let o = mainline_outflow_kernel(params, n, &e);
    let s = offramp_outflow_kernel(params, n, &e, &o);
    let inflow = mainstream_inflow_kernel(params, n, &e, input.mainstream_demand);

    let mut n_next = Vec::with_capacity(n.len());
    let mut q_next = Vec::with_capacity(n.len());
    for i in 0..n.len() {
        let upstream = if i == 0 { inflow.clone() } else { o[i - 1].clone() };
        n_next.push(n[i].clone() + upstream + e[i].clone() - o[i].clone() - s[i].clone());
        if params.cells[i].has_onramp {
            q_next.push(q[i].clone() + input.ramp_demands[i] - e[i].clone());
        } else {
            q_next.push(T::constant(0.0));
        }
    }
    (n_next, q_next, Flows { inflow, e, o, s })
}

/// Stage cost for a step whose flows are `flows` and which ends in (`n`, `q`).
pub(crate) fn stage_j_kernel<T: Scalar>(
    params: &NetworkParams,
    flows: &Flows<T>,
    n: &[T],
    q: &[T],
    gamma: f64,
) -> (T, T, T) {
    let mut occupancy = T::constant(0.0);
    for (ni, qi) in n.iter().zip(q) {
        occupancy = occupancy + ni.clone() + qi.clone();
    }
    let tt = occupancy * (params.sample_cycle_s / 3600.0);
    let mut distance = T::constant(0.0);
    for (i, cell) in params.cells.iter().enumerate() {
        distance = distance + (flows.o[i].clone() + flows.s[i].clone()) * cell.length;
    }
    let td = distance / (params.free_flow_speed * 3600.0);
    let j = tt.clone() - td.clone() * gamma;
    (tt, td, j)
}

fn check_metering(params: &NetworkParams, metering: Option<&[f64]>) -> Result<(), ModelError> {
    if let Some(m) = metering {
        let expected = params.n_metered();
        if m.len() != expected {
            return Err(ModelError::Topology(format!(
                "metering vector has {} entries, network has {expected} metered ramps",
                m.len()
            )));
        }
        if let Some(bad) = m.iter().find(|v| !(**v >= 0.0)) {
            return Err(ModelError::InvalidInput(format!("metering rate {bad} must be nonnegative")));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Public f64 operations

/// On-ramp inflows e_i. Metered ramps without a metering vector behave as
/// unmetered ramps.
pub fn compute_onramp_inflow(
    state: &NetworkState,
    input: &ExogenousInput,
    metering: Option<&[f64]>,
    params: &NetworkParams,
) -> Result<Vec<f64>, ModelError> {
    check_metering(params, metering)?;
    Ok(onramp_inflow_kernel(params, &state.n, &state.q, &input.ramp_demands, metering))
}

/// Mainline outflows o_i; the last cell discharges freely.
pub fn compute_mainline_outflow(state: &NetworkState, e: &[f64], params: &NetworkParams) -> Vec<f64> {
    mainline_outflow_kernel(params, &state.n, e)
}

/// Off-ramp outflows s_i, including the β = 1 branch.
pub fn compute_offramp_outflow(o: &[f64], params: &NetworkParams, state: &NetworkState, e: &[f64]) -> Vec<f64> {
    offramp_outflow_kernel(params, &state.n, e, o)
}

/// Density per cell in vehicles/meter/lane.
pub fn density(state: &NetworkState, params: &NetworkParams) -> Vec<f64> {
    state
        .n
        .iter()
        .zip(&params.cells)
        .map(|(n, c)| n / (c.length * f64::from(params.lanes)))
        .collect()
}

/// Stage cost of a step with `flows` ending in `state`.
pub fn stage_cost(flows: &FlowVector, state: &NetworkState, params: &NetworkParams, gamma: f64) -> StageCost {
    let f = Flows {
        inflow: flows.inflow,
        e: flows.e.clone(),
        o: flows.o.clone(),
        s: flows.s.clone(),
    };
    let (tt, td_h, j) = stage_j_kernel(params, &f, &state.n, &state.q, gamma);
    StageCost {
        tt,
        td_h,
        j,
        throughput: flows.exits(),
    }
}

/// Advances the network by one simulation step.
pub fn step(
    state: &NetworkState,
    input: &ExogenousInput,
    metering: Option<&[f64]>,
    params: &NetworkParams,
    gamma: f64,
) -> Result<StepResult, ModelError> {
    state.validate(params)?;
    input.validate(params)?;
    check_metering(params, metering)?;

    let (mut n, mut q, flows) = advance_kernel(params, &state.n, &state.q, input, metering);
    for (i, cell) in params.cells.iter().enumerate() {
        n[i] = settle(n[i], cell.capacity_nbar, i, "n")?;
        q[i] = settle(q[i], f64::INFINITY, i, "q")?;
    }
    let next = NetworkState {
        n,
        q,
        step: state.step + 1,
    };
    let flows = FlowVector {
        inflow: flows.inflow,
        e: flows.e,
        o: flows.o,
        s: flows.s,
    };
    let cost = stage_cost(&flows, &next, params, gamma);
    Ok(StepResult {
        state: next,
        flows,
        cost,
    })
}

/// Snaps round-off excursions back into `[0, upper]`; anything larger is a
/// consistency error.
fn settle(value: f64, upper: f64, cell: usize, quantity: &'static str) -> Result<f64, ModelError> {
    if !value.is_finite() || value < -STATE_TOLERANCE || value > upper + STATE_TOLERANCE {
        return Err(ModelError::Consistency { cell, quantity, value });
    }
    Ok(value.clamp(0.0, upper))
}

/// Applies [`step`] `horizon` times. Short `inputs` or `plan` slices hold
/// their last entry; an empty plan leaves every ramp unmetered.
pub fn rollout(
    state: &NetworkState,
    inputs: &[ExogenousInput],
    plan: &[Vec<f64>],
    params: &NetworkParams,
    horizon: usize,
    gamma: f64,
) -> Result<Rollout, ModelError> {
    if horizon == 0 {
        return Err(ModelError::InvalidInput("rollout horizon must be at least 1".into()));
    }
    if inputs.is_empty() {
        return Err(ModelError::InvalidInput("rollout needs at least one exogenous input".into()));
    }
    let mut states = Vec::with_capacity(horizon + 1);
    let mut flows = Vec::with_capacity(horizon);
    let mut costs = Vec::with_capacity(horizon);
    states.push(state.clone());
    let mut total_j = 0.0;
    for k in 0..horizon {
        let input = &inputs[k.min(inputs.len() - 1)];
        let metering = if plan.is_empty() {
            None
        } else {
            Some(plan[k.min(plan.len() - 1)].as_slice())
        };
        let current = states.last().expect("non-empty");
        let r = step(current, input, metering, params, gamma)?;
        total_j += r.cost.j;
        states.push(r.state);
        flows.push(r.flows);
        costs.push(r.cost);
    }
    Ok(Rollout {
        states,
        flows,
        costs,
        total_j,
    })
}

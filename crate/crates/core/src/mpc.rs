//! Online receding-horizon controllers solved under a wall-clock budget.
//!
//! A conventional controller optimizes the metering plan directly
//! (ramps × horizon variables, step-major). A parameterized controller
//! optimizes one ALINEA gain per ramp, held constant over the horizon; its
//! metering follows from the ALINEA law along the predicted trajectory.

use serde::{Deserialize, Serialize};

use crate::actm::{advance_kernel, stage_j_kernel, ExogenousInput, NetworkParams, NetworkState};
use crate::base::alinea::alinea_law;
use crate::base::WarmStart;
use crate::error::{ControlError, ModelError};
use crate::optim::{solve_budgeted, Bounds, Deadline, Objective, OptimizerConfig, SolveReport};
use crate::scalar::{Dual, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MpcKind {
    Conventional,
    Parameterized,
}

impl MpcKind {
    pub fn short_name(self) -> &'static str {
        match self {
            MpcKind::Conventional => "CMPC",
            MpcKind::Parameterized => "PMPC",
        }
    }
}

/// Static description of one parallel controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcSpec {
    pub kind: MpcKind,
    pub horizon: usize,
    /// Display name; defaults to e.g. "CMPC(h=3)".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl MpcSpec {
    pub fn conventional(horizon: usize) -> Self {
        MpcSpec {
            kind: MpcKind::Conventional,
            horizon,
            name: None,
        }
    }

    pub fn parameterized(horizon: usize) -> Self {
        MpcSpec {
            kind: MpcKind::Parameterized,
            horizon,
            name: None,
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn label(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| format!("{}(h={})", self.kind.short_name(), self.horizon))
    }
}

/// One solve instance: a controller spec bound to the current measurement.
#[derive(Debug, Clone)]
pub struct MpcProblem<'a> {
    pub kind: MpcKind,
    pub horizon: usize,
    pub params: &'a NetworkParams,
    pub state: NetworkState,
    /// Metering applied at the previous step; seeds the ALINEA recursion of
    /// parameterized controllers.
    pub mu_prev: Vec<f64>,
    /// Demand forecast; shorter forecasts hold their last entry.
    pub forecast: Vec<ExogenousInput>,
    pub gamma: f64,
    pub bounds: Bounds,
}

impl<'a> MpcProblem<'a> {
    /// Validates the layout and builds per-variable bounds from the
    /// metering interval (conventional) or gain interval (parameterized).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        spec: &MpcSpec,
        params: &'a NetworkParams,
        state: NetworkState,
        mu_prev: Vec<f64>,
        forecast: Vec<ExogenousInput>,
        gamma: f64,
        metering_bounds: &Bounds,
        gain_bounds: (f64, f64),
    ) -> Result<Self, ControlError> {
        let ramps = params.n_metered();
        if spec.horizon == 0 {
            return Err(ControlError::Config("MPC horizon must be at least 1".into()));
        }
        if forecast.is_empty() {
            return Err(ModelError::InvalidInput("MPC needs a demand forecast".into()).into());
        }
        if mu_prev.len() != ramps || metering_bounds.dim() != ramps {
            return Err(ModelError::Topology(format!(
                "{} previous rates and {} metering bounds for {ramps} metered ramps",
                mu_prev.len(),
                metering_bounds.dim()
            ))
            .into());
        }
        let bounds = match spec.kind {
            MpcKind::Conventional => Bounds::new(
                metering_bounds.lo.repeat(spec.horizon),
                metering_bounds.hi.repeat(spec.horizon),
            )?,
            MpcKind::Parameterized => Bounds::uniform(ramps, gain_bounds.0, gain_bounds.1)?,
        };
        Ok(MpcProblem {
            kind: spec.kind,
            horizon: spec.horizon,
            params,
            state,
            mu_prev,
            forecast,
            gamma,
            bounds,
        })
    }

    pub fn ramps(&self) -> usize {
        self.mu_prev.len()
    }

    fn input(&self, k: usize) -> &ExogenousInput {
        &self.forecast[k.min(self.forecast.len() - 1)]
    }

    /// Predicted cost and metering plan for a decision vector, generic over
    /// the scalar type. The decision is clipped into the bounds first.
    fn predict<T: Scalar>(&self, decision: &[T]) -> (T, Vec<Vec<T>>) {
        let r = self.ramps();
        let x: Vec<T> = decision
            .iter()
            .zip(self.bounds.lo.iter().zip(&self.bounds.hi))
            .map(|(v, (&lo, &hi))| v.clone().max_of(T::constant(lo)).min_of(T::constant(hi)))
            .collect();
        let metered = self.params.metered_cells();
        let road: Vec<f64> = metered
            .iter()
            .map(|&i| self.params.cells[i].length * f64::from(self.params.lanes))
            .collect();
        let mut n: Vec<T> = self.state.n.iter().map(|&v| T::constant(v)).collect();
        let mut q: Vec<T> = self.state.q.iter().map(|&v| T::constant(v)).collect();
        let mut mu_prev: Vec<T> = self.mu_prev.iter().map(|&v| T::constant(v)).collect();
        let mut total = T::constant(0.0);
        let mut plan = Vec::with_capacity(self.horizon);
        for k in 0..self.horizon {
            let metering: Vec<T> = match self.kind {
                MpcKind::Conventional => x[k * r..(k + 1) * r].to_vec(),
                MpcKind::Parameterized => (0..r)
                    .map(|j| {
                        let rho = n[metered[j]].clone() / road[j];
                        alinea_law(mu_prev[j].clone(), x[j].clone(), self.params.rho_crit, rho)
                    })
                    .collect(),
            };
            let (n_next, q_next, flows) = advance_kernel(self.params, &n, &q, self.input(k), Some(&metering));
            let (_, _, j) = stage_j_kernel(self.params, &flows, &n_next, &q_next, self.gamma);
            total = total + j;
            n = n_next;
            q = q_next;
            mu_prev.clone_from(&metering);
            plan.push(metering);
        }
        (total, plan)
    }

    /// Metering plan (horizon × ramps) a decision vector stands for.
    pub fn metering_plan(&self, decision: &[f64]) -> Vec<Vec<f64>> {
        self.predict(decision).1
    }

    /// Σ stage j over the horizon; non-finite results become +∞.
    pub fn cost(&self, decision: &[f64]) -> f64 {
        let j = self.predict(decision).0;
        if j.is_finite() {
            j
        } else {
            f64::INFINITY
        }
    }
}

impl Objective for MpcProblem<'_> {
    fn dim(&self) -> usize {
        self.bounds.dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.cost(x)
    }

    fn value_and_gradient(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let dim = x.len();
        let vars: Vec<Dual> = x.iter().enumerate().map(|(i, &v)| Dual::variable(v, i, dim)).collect();
        let (j, _) = self.predict(&vars);
        if !j.val.is_finite() || j.grad.iter().any(|g| !g.is_finite()) {
            return None;
        }
        Some((j.val, j.gradient(dim)))
    }
}

/// Shift-based starting points built from a controller's own past
/// solutions (most recent last).
///
/// Each solution is a sequence of `blocks` equal-size blocks. Shifting by s
/// drops the first s blocks and repeats the last one to refill the window.
/// Returns, when available: (a) the previous solution shifted by one,
/// (b) the mean of (a) and the second-previous shifted by two, (c) the mean
/// of every past solution shifted by its age.
pub fn make_shift_warm_starts(history: &[Vec<f64>], block: usize) -> Vec<Vec<f64>> {
    let Some(prev) = history.last() else {
        return Vec::new();
    };
    let shift = |x: &[f64], by: usize| -> Vec<f64> {
        let blocks = x.len() / block;
        (0..blocks)
            .flat_map(|b| {
                let src = (b + by).min(blocks - 1);
                x[src * block..(src + 1) * block].iter().copied()
            })
            .collect()
    };
    let mean = |xs: &[Vec<f64>]| -> Vec<f64> {
        let n = xs.len() as f64;
        (0..xs[0].len()).map(|i| xs.iter().map(|x| x[i]).sum::<f64>() / n).collect()
    };
    let a = shift(prev, 1);
    let mut starts = vec![a.clone()];
    if history.len() >= 2 {
        let second = shift(&history[history.len() - 2], 2);
        starts.push(mean(&[a.clone(), second]));
    }
    let aged: Vec<Vec<f64>> = history
        .iter()
        .rev()
        .enumerate()
        .filter(|(_, x)| x.len() == prev.len())
        .map(|(age, x)| shift(x, age + 1))
        .collect();
    starts.push(mean(&aged));
    starts
}

/// A candidate control sequence handed to the evaluation block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSequence {
    pub label: String,
    /// Metering per step (horizon × ramps).
    pub metering: Vec<Vec<f64>>,
    /// Cost the producing controller predicted over its own horizon; `None`
    /// for base controllers.
    pub predicted_j: Option<f64>,
    /// Solver iteration that produced it; 0 for starts and base outputs.
    pub iteration: usize,
}

/// Outcome of one parallel controller's budgeted solve.
#[derive(Debug, Clone)]
pub struct ControllerOutcome {
    pub label: String,
    pub report: SolveReport,
    /// Best decision vector; feeds the next step's shift starts.
    pub best_decision: Vec<f64>,
    pub candidates: Vec<CandidateSequence>,
}

/// Inputs shared by every controller of a parallel cell.
#[derive(Debug, Clone)]
pub struct CellContext<'a> {
    pub params: &'a NetworkParams,
    pub state: &'a NetworkState,
    pub mu_prev: &'a [f64],
    pub forecast: &'a [ExogenousInput],
    pub gamma: f64,
    pub metering_bounds: &'a Bounds,
    pub gain_bounds: (f64, f64),
    pub optimizer: &'a OptimizerConfig,
    pub deadline: Deadline,
}

/// Starting points for one controller: the base warm start followed by the
/// shift starts. Conventional controllers take the first `horizon` steps of
/// the base metering. Parameterized controllers hold one gain over the
/// window, so they get the base's current gain and, when different, its
/// mean gain over the window.
pub fn controller_starts(spec: &MpcSpec, warm: &WarmStart, history: &[Vec<f64>], ramps: usize) -> Vec<Vec<f64>> {
    let (base, block) = match spec.kind {
        MpcKind::Conventional => {
            let mut x = warm.metering_prefix(spec.horizon);
            if let Some(last) = warm.metering.last() {
                while x.len() < spec.horizon * ramps {
                    x.extend_from_slice(last);
                }
            }
            (x, ramps)
        }
        MpcKind::Parameterized => {
            let current = warm.gains.first().cloned().unwrap_or_default();
            let mean = warm.mean_gains(spec.horizon);
            let mut starts = vec![current.clone()];
            if mean != current {
                starts.push(mean);
            }
            starts.extend(make_shift_warm_starts(history, ramps.max(1)));
            return starts;
        }
    };
    let mut starts = vec![base];
    starts.extend(make_shift_warm_starts(history, block.max(1)));
    starts
}

/// Solves one controller of a cell.
pub fn solve_controller(
    spec: &MpcSpec,
    ctx: &CellContext<'_>,
    starts: &[Vec<f64>],
) -> Result<ControllerOutcome, ControlError> {
    let problem = MpcProblem::new(
        spec,
        ctx.params,
        ctx.state.clone(),
        ctx.mu_prev.to_vec(),
        ctx.forecast.to_vec(),
        ctx.gamma,
        ctx.metering_bounds,
        ctx.gain_bounds,
    )?;
    let report = solve_budgeted(&problem, &problem.bounds, starts, ctx.optimizer, &ctx.deadline)?;
    let label = spec.label();
    let candidates = report
        .candidates(ctx.optimizer.termination)
        .into_iter()
        .map(|it| CandidateSequence {
            label: label.clone(),
            metering: problem.metering_plan(&it.x),
            predicted_j: Some(it.value),
            iteration: it.iteration,
        })
        .collect();
    Ok(ControllerOutcome {
        label,
        best_decision: report.best.x.clone(),
        report,
        candidates,
    })
}

/// Runs every controller of a cell against the shared deadline.
///
/// `histories[c]` holds controller c's past best decisions. With `serial`
/// the solves run one after another on the calling thread; otherwise each
/// gets its own scoped thread. The solves share no mutable state, so the
/// result for a given controller does not depend on scheduling.
pub fn run_parallel_cell(
    specs: &[MpcSpec],
    ctx: &CellContext<'_>,
    warm: &WarmStart,
    histories: &[Vec<Vec<f64>>],
    serial: bool,
) -> Vec<Result<ControllerOutcome, ControlError>> {
    let ramps = ctx.params.n_metered();
    let empty = Vec::new();
    let starts: Vec<Vec<Vec<f64>>> = specs
        .iter()
        .enumerate()
        .map(|(c, spec)| controller_starts(spec, warm, histories.get(c).unwrap_or(&empty), ramps))
        .collect();
    if serial || specs.len() <= 1 {
        return specs.iter().zip(&starts).map(|(s, st)| solve_controller(s, ctx, st)).collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = specs
            .iter()
            .zip(&starts)
            .map(|(s, st)| scope.spawn(move || solve_controller(s, ctx, st)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("controller thread panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_by_one_repeats_last() {
        let starts = make_shift_warm_starts(&[vec![1.0, 2.0, 3.0]], 1);
        assert_eq!(starts[0], vec![2.0, 3.0, 3.0]);
        assert_eq!(starts.len(), 2);
        assert_eq!(starts[1], starts[0]);
    }

    #[test]
    fn second_start_averages_two_shifts() {
        let starts = make_shift_warm_starts(&[vec![4.0, 5.0, 6.0], vec![1.0, 2.0, 3.0]], 1);
        assert_eq!(starts[1], vec![4.0, 4.5, 4.5]);
    }

    #[test]
    fn shifts_move_whole_blocks() {
        let starts = make_shift_warm_starts(&[vec![1.0, 10.0, 2.0, 20.0]], 2);
        assert_eq!(starts[0], vec![2.0, 20.0, 2.0, 20.0]);
    }

    #[test]
    fn empty_history_gives_no_starts() {
        assert!(make_shift_warm_starts(&[], 1).is_empty());
    }

    #[test]
    fn third_start_ages_every_solution() {
        let h = vec![vec![7.0, 8.0, 9.0], vec![4.0, 5.0, 6.0], vec![1.0, 2.0, 3.0]];
        let starts = make_shift_warm_starts(&h, 1);
        // Shifts by 1, 2, 3: [2,3,3], [6,6,6], [9,9,9].
        assert_eq!(starts[2], vec![17.0 / 3.0, 6.0, 6.0]);
    }
}

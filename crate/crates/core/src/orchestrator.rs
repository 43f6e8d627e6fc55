//! One control step of the base-parallel architecture.
//!
//! Base controllers propose metering and roll themselves forward to build
//! warm starts; each base seeds a cell of online controllers that share the
//! step's time budget; every resulting candidate is scored on the
//! evaluation model over a short horizon and the cheapest one is applied.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::actm::{self, ExogenousInput, NetworkParams, NetworkState};
use crate::base::{warm_start_rollout, BaseController, Measurement, WarmStart};
use crate::error::{ControlError, ModelError};
use crate::mpc::{run_parallel_cell, CandidateSequence, CellContext, ControllerOutcome, MpcSpec};
use crate::optim::{Bounds, Deadline, OptimizerConfig};

/// Scores a metering plan from a given state. The default implementation
/// is the prediction model itself; a more detailed plant model can be
/// plugged in here.
pub trait EvaluationModel: Send + Sync {
    fn plan_cost(
        &self,
        state: &NetworkState,
        forecast: &[ExogenousInput],
        plan: &[Vec<f64>],
        horizon: usize,
        gamma: f64,
    ) -> Result<f64, ModelError>;
}

impl EvaluationModel for NetworkParams {
    fn plan_cost(
        &self,
        state: &NetworkState,
        forecast: &[ExogenousInput],
        plan: &[Vec<f64>],
        horizon: usize,
        gamma: f64,
    ) -> Result<f64, ModelError> {
        Ok(actm::rollout(state, forecast, plan, self, horizon, gamma)?.total_j)
    }
}

/// A base controller together with the parallel cell it seeds.
#[derive(Debug, Clone)]
pub struct BaseSlot {
    pub label: String,
    pub controller: BaseController,
    /// Whether the base's own output enters the candidate set.
    pub emits_candidate: bool,
    pub cell: Vec<MpcSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    /// Steps each candidate is rolled out for scoring.
    pub eval_horizon: usize,
    pub gamma: f64,
    pub optimizer: OptimizerConfig,
    /// Per metered ramp, vehicles/step.
    pub metering_bounds: Bounds,
    pub gain_bounds: (f64, f64),
    /// Run everything on one thread and bound solves by iteration count
    /// only, so that results do not depend on timing.
    pub serial: bool,
}

/// Scores of every candidate over the evaluation horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationResult {
    pub costs: Vec<f64>,
    /// Index of the least cost, `None` when every cost is +∞.
    pub winner: Option<usize>,
    /// Gap between the winner and the runner-up.
    pub margin: f64,
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub label: String,
    /// Realized cost over the evaluation horizon; `null` in logs when the
    /// evaluation failed.
    #[serde(with = "infinite_as_null")]
    pub epsilon: f64,
    /// Cost predicted by the producing controller over its own horizon.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub predicted_j: Option<f64>,
    pub iteration: usize,
    /// First metering vector of the sequence.
    pub first: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerTiming {
    pub label: String,
    /// Omitted in serial mode so that logs are reproducible byte for byte.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_s: Option<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub budget_exhausted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub step: u64,
    pub applied: Vec<f64>,
    /// Index into `candidates`; `None` only on fallback when the explicit
    /// base emitted no candidate.
    pub winner: Option<usize>,
    pub winner_label: String,
    /// Set when no candidate had a finite cost and the explicit base was
    /// applied instead.
    pub fallback: bool,
    pub candidates: Vec<CandidateRecord>,
    pub controllers: Vec<ControllerTiming>,
    pub errors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_time_s: Option<f64>,
}

/// Evaluates every candidate from a clean copy of `state`. Sequences
/// shorter than the horizon hold their last value; model failures score
/// +∞.
pub fn evaluate_candidates(
    candidates: &[CandidateSequence],
    model: &dyn EvaluationModel,
    state: &NetworkState,
    forecast: &[ExogenousInput],
    eval_horizon: usize,
    gamma: f64,
) -> EvaluationResult {
    let costs: Vec<f64> = candidates
        .iter()
        .map(|c| match model.plan_cost(state, forecast, &c.metering, eval_horizon, gamma) {
            Ok(j) if j.is_finite() => j,
            Ok(j) => {
                log::warn!("candidate {} scored non-finite cost {j}", c.label);
                f64::INFINITY
            }
            Err(e) => {
                log::warn!("candidate {} failed evaluation: {e}", c.label);
                f64::INFINITY
            }
        })
        .collect();
    let winner = select_best(&costs);
    let margin = winner.map_or(f64::NAN, |w| {
        costs
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != w)
            .map(|(_, c)| c - costs[w])
            .fold(f64::INFINITY, f64::min)
    });
    EvaluationResult { costs, winner, margin }
}

/// Index of the least finite cost; ties go to the lowest index.
pub fn select_best(costs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &c) in costs.iter().enumerate() {
        if c.is_finite() && best.map_or(true, |b| c < costs[b]) {
            best = Some(i);
        }
    }
    best
}

/// The architecture together with its per-controller solve history.
pub struct Architecture {
    pub config: ArchitectureConfig,
    pub bases: Vec<BaseSlot>,
    /// `histories[b][c]`: past best decisions of controller c in cell b.
    pub histories: Vec<Vec<Vec<Vec<f64>>>>,
    /// Defaults to the prediction model when `None`.
    pub evaluator: Option<Arc<dyn EvaluationModel>>,
}

impl Architecture {
    pub fn new(config: ArchitectureConfig, bases: Vec<BaseSlot>) -> Result<Self, ControlError> {
        if bases.is_empty() {
            return Err(ControlError::Config("architecture needs at least one base controller".into()));
        }
        if !bases.iter().any(|b| b.emits_candidate || !b.cell.is_empty()) {
            return Err(ControlError::Config("architecture produces no candidates".into()));
        }
        if config.eval_horizon == 0 {
            return Err(ControlError::Config("evaluation horizon must be at least 1".into()));
        }
        if let Some(h) = bases.iter().flat_map(|b| &b.cell).map(|s| s.horizon).min() {
            if config.eval_horizon > h {
                return Err(ControlError::Config(format!(
                    "evaluation horizon {} exceeds the shortest prediction horizon {h}",
                    config.eval_horizon
                )));
            }
        }
        config.optimizer.validate()?;
        let histories = bases.iter().map(|b| vec![Vec::new(); b.cell.len()]).collect();
        Ok(Architecture {
            config,
            bases,
            histories,
            evaluator: None,
        })
    }

    /// Runs one control step and commits the applied metering to every base
    /// controller.
    pub fn control_step(
        &mut self,
        params: &NetworkParams,
        measurement: &Measurement,
        forecast: &[ExogenousInput],
    ) -> Result<SelectionRecord, ControlError> {
        let clock = Instant::now();
        let cfg = &self.config;
        let serial = cfg.serial;
        let deadline = if cfg.serial {
            Deadline::never()
        } else {
            Deadline::after(cfg.optimizer.budget())
        };
        let mu_prev = self.bases[0].controller.mu_prev.clone();

        // Base block: proposals and warm starts.
        let mut warm: Vec<WarmStart> = Vec::with_capacity(self.bases.len());
        for slot in &self.bases {
            let horizon = slot
                .cell
                .iter()
                .map(|s| s.horizon)
                .max()
                .unwrap_or(1)
                .max(cfg.eval_horizon);
            warm.push(warm_start_rollout(&slot.controller, measurement, forecast, horizon, params)?);
        }

        // Parallel block.
        let ctx = CellContext {
            params,
            state: &measurement.state,
            mu_prev: &mu_prev,
            forecast,
            gamma: cfg.gamma,
            metering_bounds: &cfg.metering_bounds,
            gain_bounds: cfg.gain_bounds,
            optimizer: &cfg.optimizer,
            deadline,
        };
        let outcomes: Vec<Vec<Result<ControllerOutcome, ControlError>>> = if cfg.serial {
            self.bases
                .iter()
                .zip(&warm)
                .zip(&self.histories)
                .map(|((slot, w), h)| run_parallel_cell(&slot.cell, &ctx, w, h, true))
                .collect()
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = self
                    .bases
                    .iter()
                    .zip(&warm)
                    .zip(&self.histories)
                    .map(|((slot, w), h)| {
                        let ctx = &ctx;
                        scope.spawn(move || run_parallel_cell(&slot.cell, ctx, w, h, false))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("parallel cell panicked"))
                    .collect()
            })
        };

        // Candidate set: base candidates first, then parallel candidates.
        let mut candidates: Vec<CandidateSequence> = Vec::new();
        for (slot, w) in self.bases.iter().zip(&warm) {
            if slot.emits_candidate {
                candidates.push(CandidateSequence {
                    label: slot.label.clone(),
                    metering: w.metering.clone(),
                    predicted_j: None,
                    iteration: 0,
                });
            }
        }
        let mut timings = Vec::new();
        let mut errors = Vec::new();
        for (b, cell) in outcomes.into_iter().enumerate() {
            for (c, outcome) in cell.into_iter().enumerate() {
                match outcome {
                    Ok(o) => {
                        timings.push(ControllerTiming {
                            label: o.label.clone(),
                            elapsed_s: (!serial).then(|| o.report.elapsed.as_secs_f64()),
                            iterations: o.report.iterations,
                            evaluations: o.report.evaluations,
                            converged: o.report.converged,
                            budget_exhausted: o.report.budget_exhausted,
                        });
                        self.histories[b][c].push(o.best_decision);
                        candidates.extend(o.candidates);
                    }
                    Err(e) => {
                        let label = self.bases[b].cell[c].label();
                        log::warn!("controller {label} failed: {e}");
                        errors.push(format!("{label}: {e}"));
                    }
                }
            }
        }

        // Evaluation block and selector.
        let model: &dyn EvaluationModel = match &self.evaluator {
            Some(m) => m.as_ref(),
            None => params,
        };
        let eval = evaluate_candidates(&candidates, model, &measurement.state, forecast, cfg.eval_horizon, cfg.gamma);
        let (winner, applied, winner_label, fallback) = match eval.winner {
            Some(w) => (Some(w), candidates[w].metering[0].clone(), candidates[w].label.clone(), false),
            None => {
                let b = self.bases.iter().position(|s| s.controller.is_explicit()).unwrap_or(0);
                log::warn!(
                    "step {}: every candidate scored +inf; applying base controller {}",
                    measurement.state.step,
                    self.bases[b].label
                );
                let idx = candidates.iter().position(|c| c.label == self.bases[b].label);
                (idx, warm[b].metering[0].clone(), self.bases[b].label.clone(), true)
            }
        };
        for slot in &mut self.bases {
            slot.controller.commit(&applied);
        }

        let records = candidates
            .iter()
            .zip(&eval.costs)
            .map(|(c, &epsilon)| CandidateRecord {
                label: c.label.clone(),
                epsilon,
                predicted_j: c.predicted_j,
                iteration: c.iteration,
                first: c.metering[0].clone(),
            })
            .collect();
        Ok(SelectionRecord {
            step: measurement.state.step,
            applied,
            winner,
            winner_label,
            fallback,
            candidates: records,
            controllers: timings,
            errors,
            step_time_s: (!serial).then(|| clock.elapsed().as_secs_f64()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmin_with_ties() {
        assert_eq!(select_best(&[3.0, 1.0, 2.0]), Some(1));
        assert_eq!(select_best(&[1.0, 1.0]), Some(0));
        assert_eq!(select_best(&[f64::INFINITY, f64::INFINITY]), None);
        assert_eq!(select_best(&[f64::INFINITY, 5.0]), Some(1));
    }

    #[test]
    fn argmin_invariant_to_offsets() {
        let costs = [0.7, -0.2, 0.4, -0.2];
        let shifted: Vec<f64> = costs.iter().map(|c| c + 12.5).collect();
        assert_eq!(select_best(&costs), select_best(&shifted));
    }
}

//! Base controllers as closed-loop policies and their model rollouts.

use serde::{Deserialize, Serialize};

use super::alinea::alinea_law;
use super::mlp::AnnBank;
use crate::actm::{self, ExogenousInput, NetworkParams, NetworkState};
use crate::error::{ControlError, ModelError};

/// What a base controller reads at the start of a control step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub state: NetworkState,
    /// Measured (possibly noisy) demands for the coming step.
    pub demand: ExogenousInput,
    /// Flow that entered each cell from upstream during the previous step.
    pub upstream_inflow: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaseLaw {
    /// ALINEA with fixed gains.
    Alinea { gains: Vec<f64> },
    /// ALINEA whose gains come from a network evaluated every step.
    Ann { bank: AnnBank },
}

/// One base controller output.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseAction {
    pub metering: Vec<f64>,
    pub gains: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseController {
    pub law: BaseLaw,
    /// Metering applied at the previous step, per metered ramp.
    pub mu_prev: Vec<f64>,
}

impl BaseController {
    pub fn alinea(gains: Vec<f64>, mu_prev: Vec<f64>) -> Result<Self, ControlError> {
        Self::new(BaseLaw::Alinea { gains }, mu_prev)
    }

    pub fn ann(bank: AnnBank, mu_prev: Vec<f64>) -> Result<Self, ControlError> {
        Self::new(BaseLaw::Ann { bank }, mu_prev)
    }

    fn new(law: BaseLaw, mu_prev: Vec<f64>) -> Result<Self, ControlError> {
        let ramps = match &law {
            BaseLaw::Alinea { gains } => gains.len(),
            BaseLaw::Ann { bank } => bank.networks.len(),
        };
        if ramps != mu_prev.len() {
            return Err(ControlError::Config(format!(
                "base controller has {ramps} gains for {} ramps",
                mu_prev.len()
            )));
        }
        if let Some(m) = mu_prev.iter().find(|m| !(**m >= 0.0)) {
            return Err(ModelError::InvalidState(format!("previous metering {m} is negative")).into());
        }
        Ok(BaseController { law, mu_prev })
    }

    /// True for the fixed-gain law, which is the selector's fallback.
    pub fn is_explicit(&self) -> bool {
        matches!(self.law, BaseLaw::Alinea { .. })
    }

    pub fn n_ramps(&self) -> usize {
        self.mu_prev.len()
    }

    /// Gains for the current measurement.
    pub fn gains(&self, params: &NetworkParams, m: &Measurement) -> Result<Vec<f64>, ControlError> {
        match &self.law {
            BaseLaw::Alinea { gains } => Ok(gains.clone()),
            BaseLaw::Ann { bank } => {
                let inputs: Vec<[f64; 4]> = params
                    .metered_cells()
                    .into_iter()
                    .map(|i| [m.state.n[i], m.state.q[i], m.demand.ramp_demands[i], m.upstream_inflow[i]])
                    .collect();
                Ok(bank.gains(&inputs)?)
            }
        }
    }

    /// Metering for the current measurement. Does not change `mu_prev`.
    pub fn propose(&self, params: &NetworkParams, m: &Measurement) -> Result<BaseAction, ControlError> {
        let gains = self.gains(params, m)?;
        let rho = actm::density(&m.state, params);
        let metering = params
            .metered_cells()
            .into_iter()
            .zip(&self.mu_prev)
            .zip(&gains)
            .map(|((cell, &mu), &theta)| alinea_law(mu, theta, params.rho_crit, rho[cell]))
            .collect();
        Ok(BaseAction { metering, gains })
    }

    /// Records the metering actually applied to the plant.
    pub fn commit(&mut self, applied: &[f64]) {
        self.mu_prev.copy_from_slice(applied);
    }
}

/// Base-controller rollout used to seed the online solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    /// Metering per step, `horizon` entries of one value per ramp.
    pub metering: Vec<Vec<f64>>,
    /// Gains used at each step.
    pub gains: Vec<Vec<f64>>,
}

impl WarmStart {
    /// Step-major flattening of the first `horizon` metering vectors.
    pub fn metering_prefix(&self, horizon: usize) -> Vec<f64> {
        self.metering.iter().take(horizon).flatten().copied().collect()
    }

    /// Per-ramp mean gain over the first `horizon` steps.
    pub fn mean_gains(&self, horizon: usize) -> Vec<f64> {
        let h = horizon.min(self.gains.len()).max(1);
        let ramps = self.gains.first().map_or(0, Vec::len);
        (0..ramps)
            .map(|r| self.gains.iter().take(h).map(|g| g[r]).sum::<f64>() / h as f64)
            .collect()
    }
}

/// Runs `base` in closed loop with the prediction model for `horizon` steps.
///
/// Each step the controller reads the predicted state and the forecast for
/// that step, its metering drives one model step, and that metering becomes
/// the controller's previous rate. The controller passed in is not modified.
pub fn warm_start_rollout(
    base: &BaseController,
    measurement: &Measurement,
    forecast: &[ExogenousInput],
    horizon: usize,
    params: &NetworkParams,
) -> Result<WarmStart, ControlError> {
    if horizon == 0 {
        return Err(ModelError::InvalidInput("warm-start horizon must be at least 1".into()).into());
    }
    if forecast.is_empty() {
        return Err(ModelError::InvalidInput("warm start needs a demand forecast".into()).into());
    }
    let mut policy = base.clone();
    let mut m = measurement.clone();
    let mut metering = Vec::with_capacity(horizon);
    let mut gains = Vec::with_capacity(horizon);
    for k in 0..horizon {
        m.demand = forecast[k.min(forecast.len() - 1)].clone();
        let action = policy.propose(params, &m)?;
        if k + 1 < horizon {
            let r = actm::step(&m.state, &m.demand, Some(&action.metering), params, 0.0)?;
            m.upstream_inflow = r.flows.upstream_inflows();
            m.state = r.state;
        }
        policy.commit(&action.metering);
        metering.push(action.metering);
        gains.push(action.gains);
    }
    Ok(WarmStart { metering, gains })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actm::CellParams;

    fn network() -> NetworkParams {
        let ramp = CellParams {
            length: 560.0,
            capacity_nbar: 80.0,
            sat_mainline_obar: 8.0,
            sat_offramp_sbar: 6.0,
            split_beta: 0.35,
            blend_alpha: 0.6,
            eta_moving: 0.8,
            eta_idling: 0.3,
            xi: 0.4,
            has_onramp: true,
            has_offramp: true,
            metered: true,
        };
        NetworkParams {
            cells: vec![CellParams::mainline(560.0, 80.0, 8.0, 0.8, 0.3, 0.4), ramp],
            sample_cycle_s: 20.0,
            rho_crit: 0.0335,
            lanes: 1,
            free_flow_speed: 28.0,
            allow_full_split: false,
        }
    }

    fn measurement(n: [f64; 2]) -> Measurement {
        Measurement {
            state: NetworkState {
                n: n.to_vec(),
                q: vec![0.0, 5.5],
                step: 0,
            },
            demand: ExogenousInput {
                mainstream_demand: 2.0,
                ramp_demands: vec![0.0, 2.0],
            },
            upstream_inflow: vec![2.0, 3.8],
        }
    }

    #[test]
    fn single_step_matches_base_output() {
        let p = network();
        let base = BaseController::alinea(vec![0.016], vec![0.5]).unwrap();
        let m = measurement([32.6, 36.2]);
        let ws = warm_start_rollout(&base, &m, &[m.demand.clone()], 1, &p).unwrap();
        assert_eq!(ws.metering, vec![base.propose(&p, &m).unwrap().metering]);
        assert!((ws.metering[0][0] - 0.499_502).abs() < 1e-6);
    }

    #[test]
    fn rollout_applies_alinea_along_the_trajectory() {
        let p = network();
        let base = BaseController::alinea(vec![0.016], vec![0.5]).unwrap();
        let m = measurement([32.6, 36.2]);
        let ws = warm_start_rollout(&base, &m, &[m.demand.clone()], 10, &p).unwrap();
        assert_eq!(ws.metering.len(), 10);
        let mut state = m.state.clone();
        let mut mu = 0.5;
        for k in 0..10 {
            let rho = state.n[1] / 560.0;
            mu = (mu + 0.016 * (0.0335 - rho)).max(0.0);
            assert_eq!(ws.metering[k][0], mu);
            state = actm::step(&state, &m.demand, Some(&[mu]), &p, 0.0).unwrap().state;
        }
        assert_eq!(base.mu_prev, vec![0.5]);
    }

    #[test]
    fn rejects_mismatched_ramps() {
        assert!(BaseController::alinea(vec![0.016, 0.016], vec![0.5]).is_err());
    }

    #[test]
    fn mean_gains_averages_prefix() {
        let ws = WarmStart {
            metering: vec![vec![0.0]; 3],
            gains: vec![vec![0.1], vec![0.3], vec![0.8]],
        };
        assert!((ws.mean_gains(2)[0] - 0.2).abs() < 1e-15);
    }
}

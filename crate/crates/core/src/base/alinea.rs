use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::scalar::Scalar;

/// Gain used by the explicit base controller, SI units.
pub const DEFAULT_ALINEA_GAIN: f64 = 0.016;

/// Per-metered-ramp ALINEA gains and the previously applied metering rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlineaState {
    pub gains_theta: Vec<f64>,
    /// Vehicles/step.
    pub mu_prev: Vec<f64>,
}

impl AlineaState {
    pub fn new(gains_theta: Vec<f64>, mu_prev: Vec<f64>) -> Result<Self, ModelError> {
        if gains_theta.len() != mu_prev.len() {
            return Err(ModelError::Topology(format!(
                "{} gains for {} ramps",
                gains_theta.len(),
                mu_prev.len()
            )));
        }
        if let Some(m) = mu_prev.iter().find(|m| !(**m >= 0.0)) {
            return Err(ModelError::InvalidState(format!("previous metering {m} is negative")));
        }
        Ok(AlineaState { gains_theta, mu_prev })
    }

    /// Next metering rates for the given downstream densities; stores them
    /// as the new `mu_prev`.
    pub fn step(&mut self, rho: &[f64], rho_crit: f64) -> Vec<f64> {
        let mu: Vec<f64> = self
            .mu_prev
            .iter()
            .zip(&self.gains_theta)
            .zip(rho)
            .map(|((&m, &th), &r)| alinea_law(m, th, rho_crit, r))
            .collect();
        self.mu_prev.clone_from(&mu);
        mu
    }
}

/// μ = max{μ_prev + θ(ρ_crit − ρ), 0}.
#[inline]
pub(crate) fn alinea_law<T: Scalar>(mu_prev: T, theta: T, rho_crit: f64, rho: T) -> T {
    let update = mu_prev + theta * (-rho + rho_crit);
    update.max_of(T::constant(0.0))
}

/// Functional form of [`AlineaState::step`].
pub fn alinea_step(state: &mut AlineaState, rho: &[f64], rho_crit: f64) -> Vec<f64> {
    state.step(rho, rho_crit)
}

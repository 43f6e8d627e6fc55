use basepar::actm::{self, ExogenousInput, NetworkState};
use basepar::base::training::IsolatedCell;
use basepar::base::{
    alinea_step, generate_training_data, solve_isolated_gain, warm_start_rollout, AlineaState, BaseController, Measurement,
    DEFAULT_ALINEA_GAIN,
};
use basepar::scenario::ScenarioConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

const RHO_CRIT: f64 = 0.0335;

#[test]
fn alinea_holds_at_critical_density() {
    let mut s = AlineaState::new(vec![0.016], vec![1.3]).unwrap();
    assert_eq!(alinea_step(&mut s, &[RHO_CRIT], RHO_CRIT), vec![1.3]);
}

#[test]
fn alinea_clamps_at_zero() {
    let mut s = AlineaState::new(vec![1.0], vec![0.01]).unwrap();
    assert_eq!(alinea_step(&mut s, &[0.14], RHO_CRIT), vec![0.0]);
    assert_eq!(s.mu_prev, vec![0.0]);
}

#[test]
fn alinea_reference_value() {
    let mut s = AlineaState::new(vec![DEFAULT_ALINEA_GAIN], vec![0.5]).unwrap();
    let mu = alinea_step(&mut s, &[36.2 / 560.0], RHO_CRIT);
    assert!((mu[0] - 0.499502).abs() < 1e-6, "{}", mu[0]);
}

proptest! {
    #[test]
    fn alinea_never_negative(mu in 0.0..10.0f64, theta in 0.0..50.0f64, rho in 0.0..0.2f64) {
        let mut s = AlineaState::new(vec![theta], vec![mu]).unwrap();
        prop_assert!(alinea_step(&mut s, &[rho], RHO_CRIT)[0] >= 0.0);
    }

    #[test]
    fn alinea_increment_scales_with_gain(mu in 5.0..10.0f64, theta in 0.01..1.0f64, k in 0.1..10.0f64, rho in 0.0..0.14f64) {
        // μ_prev is large enough that the clamp never binds.
        let mut a = AlineaState::new(vec![theta], vec![mu]).unwrap();
        let mut b = AlineaState::new(vec![theta * k], vec![mu]).unwrap();
        let da = alinea_step(&mut a, &[rho], RHO_CRIT)[0] - mu;
        let db = alinea_step(&mut b, &[rho], RHO_CRIT)[0] - mu;
        prop_assert!((db - k * da).abs() <= 1e-12);
        prop_assert_eq!(da.signum(), db.signum());
    }
}

/// Density error written out from the model equations, independently of
/// the library's isolated-cell helper.
fn grid_error(cell: &IsolatedCell, x: &[f64; 4], theta: f64) -> f64 {
    let [n, q, d, o_up] = *x;
    let road = cell.length * cell.lanes as f64;
    let mu = (cell.mu_prev + theta * (cell.rho_crit - n / road)).max(0.0);
    let e = (q + d).min(cell.xi * (cell.capacity_nbar - n)).min(mu);
    let next = n + o_up + e - (n + cell.blend_alpha * e) * cell.eta_moving;
    (cell.rho_crit - next / road).abs()
}

#[test]
fn gain_solutions_match_grid_search() {
    let cfg = ScenarioConfig::default();
    let p = cfg.network_params().unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let steps = 10_000;
    for audit in 0..20 {
        let cell = p.metered_cells()[audit % 3];
        // Half the audits start from rest, half from a running rate so that
        // the clamp and the inflow cap both appear.
        let mu_prev = if audit % 2 == 0 { 0.0 } else { rng.gen_range(0.0..0.05) };
        let iso = IsolatedCell::from_network(&p, cell, mu_prev);
        let x = [
            rng.gen_range(0.0..80.0),
            rng.gen_range(0.0..20.0),
            rng.gen_range(0.0..3.0),
            rng.gen_range(0.0..8.0),
        ];
        let sol = solve_isolated_gain(&iso, &x, (0.0, 1.0));
        let (mut best_theta, mut best_err) = (0.0, f64::INFINITY);
        for k in 0..=steps {
            let theta = k as f64 / steps as f64;
            let err = grid_error(&iso, &x, theta);
            if err < best_err - 1e-15 {
                best_theta = theta;
                best_err = err;
            }
        }
        assert!(sol.error <= best_err + 1e-12, "audit {audit}: solver {} grid {}", sol.error, best_err);
        assert!((grid_error(&iso, &x, sol.theta) - sol.error).abs() < 1e-15);
        assert!(
            (sol.theta - best_theta).abs() <= 1.0 / steps as f64,
            "audit {audit}: θ {} vs grid {}",
            sol.theta,
            best_theta
        );
    }
}

#[test]
fn zero_error_sample_takes_zero_gain() {
    let p = ScenarioConfig::default().network_params().unwrap();
    let iso = IsolatedCell::from_network(&p, 1, 0.0);
    let n = RHO_CRIT * 560.0;
    // Inflow balances the discharge: o_up = n·η^m with an empty ramp.
    let x = [n, 0.0, 0.0, n * 0.8];
    let sol = solve_isolated_gain(&iso, &x, (0.0, 1.0));
    assert_eq!(sol.theta, 0.0);
    assert!(sol.error < 1e-12);
    assert!(!sol.unattainable);
}

#[test]
fn generated_targets_lie_in_range() {
    let p = ScenarioConfig::default().network_params().unwrap();
    let data = generate_training_data(&p, 100, 3).unwrap();
    assert_eq!(data.len(), 3);
    for set in &data {
        assert_eq!(set.samples.len(), 100);
        assert!(set.samples.iter().all(|s| (0.0..=1.0).contains(&s.target_theta)));
    }
    assert_eq!(data, generate_training_data(&p, 100, 3).unwrap());
}

#[test]
fn warm_start_follows_alinea_through_the_model() {
    let cfg = ScenarioConfig::default();
    let p = cfg.network_params().unwrap();
    let state = cfg.initial_state(&p).unwrap();
    let demand = cfg.demand_at(&p, 0);
    let m = Measurement {
        state: state.clone(),
        demand: demand.clone(),
        upstream_inflow: cfg.initial_upstream_inflow(&p),
    };
    let base = BaseController::alinea(vec![0.016; 3], cfg.initial.mu_prev.clone()).unwrap();
    let ws = warm_start_rollout(&base, &m, std::slice::from_ref(&demand), 10, &p).unwrap();
    assert_eq!(ws.metering.len(), 10);

    let mut alinea = AlineaState::new(vec![0.016; 3], cfg.initial.mu_prev.clone()).unwrap();
    let mut s: NetworkState = state;
    for planned in &ws.metering {
        let rho = actm::density(&s, &p);
        let metered: Vec<f64> = p.metered_cells().iter().map(|&i| rho[i]).collect();
        let mu = alinea.step(&metered, p.rho_crit);
        assert_eq!(&mu, planned);
        s = actm::step(&s, &demand, Some(&mu), &p, 0.0).unwrap().state;
    }
    // The controller itself is untouched by the rollout.
    assert_eq!(base.mu_prev, cfg.initial.mu_prev);
}

#[test]
fn empty_demand_forecast_is_rejected() {
    let cfg = ScenarioConfig::default();
    let p = cfg.network_params().unwrap();
    let m = Measurement {
        state: cfg.initial_state(&p).unwrap(),
        demand: ExogenousInput::zero(&p),
        upstream_inflow: vec![0.0; 6],
    };
    let base = BaseController::alinea(vec![0.016; 3], vec![0.0; 3]).unwrap();
    assert!(warm_start_rollout(&base, &m, &[], 3, &p).is_err());
}

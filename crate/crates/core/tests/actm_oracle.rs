//! The ACTM step against a direct transcription of the flow equations.

use basepar::actm::{self, CellParams, ExogenousInput, NetworkParams, NetworkState};
use basepar::scenario::ScenarioConfig;
use proptest::prelude::*;

mod common;
use common::{close, oracle_step};

fn reference() -> NetworkParams {
    ScenarioConfig::default().network_params().unwrap()
}

fn random_network() -> impl Strategy<Value = NetworkParams> {
    let cell = (
        0.0..=0.9f64,
        0.0..=1.0f64,
        0.3..=1.0f64,
        0.1..=0.5f64,
        0.1..=0.6f64,
        any::<bool>(),
        any::<bool>(),
    );
    prop::collection::vec(cell, 2..=6).prop_map(|cells| {
        let cells = cells
            .into_iter()
            .map(|(beta, alpha, eta_m, eta_i, xi, ramp, off)| {
                let mut c = CellParams::mainline(560.0, 80.0, 8.0, eta_m, eta_i, xi);
                if ramp {
                    c.has_onramp = true;
                    c.metered = true;
                    c.blend_alpha = alpha;
                }
                if off && beta > 0.0 {
                    c.has_offramp = true;
                    c.split_beta = beta;
                    c.sat_offramp_sbar = 6.0;
                }
                c
            })
            .collect();
        NetworkParams {
            cells,
            sample_cycle_s: 20.0,
            rho_crit: 0.0335,
            lanes: 1,
            free_flow_speed: 28.0,
            allow_full_split: false,
        }
    })
}

/// A network together with a state, demands and metering that fit it.
fn scenario_case() -> impl Strategy<Value = (NetworkParams, NetworkState, ExogenousInput, Vec<f64>)> {
    prop_oneof![Just(reference()), random_network()].prop_flat_map(|p| {
        let cells = p.n_cells();
        let ramps = p.n_metered();
        (
            Just(p),
            prop::collection::vec(0.0..=80.0f64, cells),
            prop::collection::vec(0.0..=30.0f64, cells),
            0.0..=9.0f64,
            prop::collection::vec(0.0..=4.0f64, cells),
            prop::collection::vec(0.0..=8.0f64, ramps),
        )
            .prop_map(|(p, n, q, dm, d, mu)| {
                let q = q
                    .iter()
                    .zip(&p.cells)
                    .map(|(&q, c)| if c.has_onramp { q } else { 0.0 })
                    .collect();
                let d = d
                    .iter()
                    .zip(&p.cells)
                    .map(|(&d, c)| if c.has_onramp { d } else { 0.0 })
                    .collect();
                let state = NetworkState { n, q, step: 0 };
                let input = ExogenousInput {
                    mainstream_demand: dm,
                    ramp_demands: d,
                };
                (p, state, input, mu)
            })
    })
}

#[test]
fn flow_examples_match_hand_evaluation() {
    let p = reference();
    let state = NetworkState {
        n: vec![32.6, 36.2, 5.1, 25.3, 3.9, 0.0],
        q: vec![0.0, 5.5, 0.0, 9.6, 1.6, 0.0],
        step: 0,
    };
    let input = ExogenousInput {
        mainstream_demand: 0.0,
        ramp_demands: vec![0.0, 2.0, 0.0, 0.0, 0.0, 0.0],
    };
    let e = actm::compute_onramp_inflow(&state, &input, None, &p).unwrap();
    assert!((e[1] - 7.5).abs() < 1e-12);
    let e = actm::compute_onramp_inflow(&state, &input, Some(&[0.5, 8.0, 8.0]), &p).unwrap();
    assert!((e[1] - 0.5).abs() < 1e-12);
    let o = actm::compute_mainline_outflow(&state, &e, &p);
    // Terms for cell 2: 18.98, 22.47, 8, 11.142857...
    assert!((o[1] - 8.0).abs() < 1e-12);
    let s = actm::compute_offramp_outflow(&o, &p, &state, &e);
    assert!((s[1] - 0.35 / 0.65 * 8.0).abs() < 1e-12);
    let n2_next: f64 = 36.2 + 3.8 + e[1] - o[1] - s[1];
    assert!((n2_next - 28.192307692307693).abs() < 1e-12);
}

#[test]
fn conservation_over_random_demand_run() {
    use rand::{Rng, SeedableRng};
    let p = reference();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let mut state = ScenarioConfig::default().initial_state(&p).unwrap();
    let initial = state.total_vehicles();
    let (mut admitted, mut exits) = (0.0, 0.0);
    let steps = 180;
    for _ in 0..steps {
        let input = ExogenousInput {
            mainstream_demand: rng.gen_range(0.0..9.0),
            ramp_demands: p
                .cells
                .iter()
                .map(|c| if c.has_onramp { rng.gen_range(0.0..4.0) } else { 0.0 })
                .collect(),
        };
        let mu: Vec<f64> = (0..p.n_metered()).map(|_| rng.gen_range(0.0..8.0)).collect();
        let r = actm::step(&state, &input, Some(&mu), &p, 0.8).unwrap();
        admitted += r.flows.inflow + input.ramp_demands.iter().sum::<f64>();
        exits += r.flows.exits();
        state = r.state;
    }
    let balance = initial + admitted - exits - state.total_vehicles();
    assert!(balance.abs() <= 1e-9 * steps as f64, "imbalance {balance}");
}

proptest! {
    #[test]
    fn step_matches_oracle((p, state, input, mu) in scenario_case()) {
        let r = actm::step(&state, &input, Some(&mu), &p, 0.8).unwrap();
        let o = oracle_step(&p, &state.n, &state.q, input.mainstream_demand, &input.ramp_demands, &mu);
        prop_assert!((r.flows.inflow - o.inflow).abs() <= 1e-9);
        prop_assert!(close(&r.flows.e, &o.e, 1e-9));
        prop_assert!(close(&r.flows.o, &o.o, 1e-9));
        prop_assert!(close(&r.flows.s, &o.s, 1e-9));
        prop_assert!(close(&r.state.n, &o.n, 1e-9));
        prop_assert!(close(&r.state.q, &o.q, 1e-9));
    }

    #[test]
    fn step_respects_bounds((p, state, input, mu) in scenario_case()) {
        let r = actm::step(&state, &input, Some(&mu), &p, 0.8).unwrap();
        for (i, c) in p.cells.iter().enumerate() {
            prop_assert!(r.flows.o[i] >= 0.0 && r.flows.o[i] <= c.sat_mainline_obar + 1e-12);
            prop_assert!(r.flows.s[i] >= 0.0 && r.flows.s[i] <= c.sat_offramp_sbar + 1e-12);
            prop_assert!(r.flows.e[i] >= 0.0);
            prop_assert!(r.state.n[i] >= 0.0 && r.state.n[i] <= c.capacity_nbar);
            prop_assert!(r.state.q[i] >= 0.0);
        }
        prop_assert!(r.cost.tt >= 0.0 && r.cost.td_h >= 0.0 && r.cost.throughput >= 0.0);
    }

    #[test]
    fn single_step_conserves_vehicles((p, state, input, mu) in scenario_case()) {
        let r = actm::step(&state, &input, Some(&mu), &p, 0.8).unwrap();
        let before = state.total_vehicles() + r.flows.inflow + input.ramp_demands.iter().sum::<f64>();
        let after = r.state.total_vehicles() + r.flows.exits();
        prop_assert!((before - after).abs() <= 1e-9);
    }

    #[test]
    fn lower_metering_never_admits_more((p, state, input, mu) in scenario_case(), cut in 0.0..=1.0f64) {
        let lower: Vec<f64> = mu.iter().map(|m| m * cut).collect();
        let hi = actm::compute_onramp_inflow(&state, &input, Some(&mu), &p).unwrap();
        let lo = actm::compute_onramp_inflow(&state, &input, Some(&lower), &p).unwrap();
        for (a, b) in lo.iter().zip(&hi) {
            prop_assert!(a <= b);
        }
    }

    #[test]
    fn step_is_deterministic((p, state, input, mu) in scenario_case()) {
        let a = actm::step(&state, &input, Some(&mu), &p, 0.8).unwrap();
        let b = actm::step(&state, &input, Some(&mu), &p, 0.8).unwrap();
        prop_assert_eq!(a.state, b.state);
        prop_assert_eq!(a.flows, b.flows);
        prop_assert_eq!(a.cost, b.cost);
    }

    #[test]
    fn rollout_is_additive((p, state, input, mu) in scenario_case(), horizon in 1usize..6) {
        let r = actm::rollout(&state, std::slice::from_ref(&input), &[mu.clone()], &p, horizon, 0.8).unwrap();
        let mut s = state.clone();
        let mut total = 0.0;
        for k in 0..horizon {
            let one = actm::step(&s, &input, Some(&mu), &p, 0.8).unwrap();
            prop_assert_eq!(&one.cost, &r.costs[k]);
            total += one.cost.j;
            s = one.state;
        }
        prop_assert_eq!(&s, r.states.last().unwrap());
        prop_assert!((total - r.total_j).abs() <= 1e-12);
    }
}

#[test]
fn zero_metering_queues_never_shrink_with_demand() {
    let cfg = ScenarioConfig::default();
    let p = cfg.network_params().unwrap();
    let mut state = cfg.initial_state(&p).unwrap();
    for k in 0..cfg.run.steps {
        let input = cfg.demand_at(&p, k);
        let r = actm::step(&state, &input, Some(&vec![0.0; p.n_metered()]), &p, 0.8).unwrap();
        for i in p.onramp_cells() {
            if input.ramp_demands[i] > 0.0 {
                assert!(r.state.q[i] >= state.q[i]);
            }
        }
        state = r.state;
    }
}

#[test]
fn density_examples() {
    let p = reference();
    let mut s = NetworkState::empty(&p);
    s.n[1] = 36.2;
    s.n[2] = 80.0;
    let rho = actm::density(&s, &p);
    assert!((rho[1] - 36.2 / 560.0).abs() < 1e-15);
    assert!((rho[1] - 0.0646428).abs() < 1e-7);
    assert!((rho[2] - 0.142857).abs() < 1e-6);
    assert_eq!(rho[0], 0.0);
}

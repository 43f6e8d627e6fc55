//! Anytime box-constrained quasi-Newton solver with a wall-clock deadline.
//!
//! The solver runs a projected BFGS iteration with an Armijo line search
//! along the projection arc. Every accepted iterate is recorded together with
//! its objective value, so a caller that runs out of time can still use the
//! best point seen so far or hand all iterates to a downstream evaluator.
//!
//! Several starting points share one deadline. All starts are evaluated
//! first; descent then proceeds from each of them in order of increasing
//! objective value until the deadline expires.

use std::cell::Cell;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::OptimError;

/// A scalar objective over a box.
pub trait Objective {
    fn dim(&self) -> usize;

    /// Objective value. Non-finite values are treated as +∞.
    fn value(&self, x: &[f64]) -> f64;

    /// Value and exact gradient, when the objective can provide them.
    fn value_and_gradient(&self, _x: &[f64]) -> Option<(f64, Vec<f64>)> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, OptimError> {
        if lo.len() != hi.len() {
            return Err(OptimError::Dimension {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if let Some(i) = (0..lo.len()).find(|&i| !(lo[i] <= hi[i])) {
            return Err(OptimError::Bounds(format!("lo[{i}] = {} > hi[{i}] = {}", lo[i], hi[i])));
        }
        Ok(Bounds { lo, hi })
    }

    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Result<Self, OptimError> {
        Bounds::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn project(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(*lo, *hi);
        }
    }

    pub fn projected(&self, x: &[f64]) -> Vec<f64> {
        let mut x = x.to_vec();
        self.project(&mut x);
        x
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(&self.lo).zip(&self.hi).all(|((v, lo), hi)| lo <= v && v <= hi)
    }
}

/// What a budgeted solve hands downstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TerminationOption {
    /// Only the iterate with the least recorded objective.
    #[default]
    BestIterate,
    /// Every recorded iterate, in the order they were produced.
    AllIterates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Use [`Objective::value_and_gradient`], falling back to forward
    /// differences when the objective has no analytic gradient.
    #[default]
    Analytic,
    ForwardDifference,
    CentralDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub function_tolerance: f64,
    pub step_tolerance: f64,
    /// Wall-clock budget in seconds.
    pub budget_s: f64,
    pub max_iterations: usize,
    pub termination: TerminationOption,
    pub gradient: GradientMode,
    /// Relative finite-difference step.
    pub fd_step: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            function_tolerance: 1e-3,
            step_tolerance: 1e-7,
            budget_s: 2.0,
            max_iterations: 100,
            termination: TerminationOption::BestIterate,
            gradient: GradientMode::Analytic,
            fd_step: 1e-6,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.function_tolerance > 0.0) || !(self.step_tolerance > 0.0) {
            return Err(OptimError::Config("tolerances must be positive".into()));
        }
        if !(self.budget_s >= 0.0) || !self.budget_s.is_finite() {
            return Err(OptimError::Config(format!("budget {} s is not a finite nonnegative time", self.budget_s)));
        }
        if !(self.fd_step > 0.0) {
            return Err(OptimError::Config("fd_step must be positive".into()));
        }
        Ok(())
    }

    pub fn budget(&self) -> Duration {
        Duration::from_secs_f64(self.budget_s)
    }
}

/// Shared wall-clock deadline. Reading it is a monotonic clock query.
#[derive(Debug, Clone, Copy)]
pub struct Deadline {
    limit: Option<Instant>,
}

impl Deadline {
    pub fn after(budget: Duration) -> Self {
        Deadline {
            limit: Some(Instant::now() + budget),
        }
    }

    pub fn at(limit: Instant) -> Self {
        Deadline { limit: Some(limit) }
    }

    pub fn never() -> Self {
        Deadline { limit: None }
    }

    pub fn expired(&self) -> bool {
        self.limit.is_some_and(|t| Instant::now() >= t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iterate {
    pub x: Vec<f64>,
    pub value: f64,
    /// Index of the starting point this iterate descends from.
    pub start: usize,
    /// 0 for the (projected) start itself.
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub best: Iterate,
    /// Every recorded iterate in production order.
    pub iterates: Vec<Iterate>,
    /// Running minimum of the objective after each recorded iterate.
    pub best_so_far: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub elapsed: Duration,
    /// At least one descent stopped on the tolerance or stationarity test.
    pub converged: bool,
    pub budget_exhausted: bool,
}

impl SolveReport {
    /// The iterates handed downstream under `option`.
    pub fn candidates(&self, option: TerminationOption) -> Vec<&Iterate> {
        match option {
            TerminationOption::BestIterate => vec![&self.best],
            TerminationOption::AllIterates => self.iterates.iter().collect(),
        }
    }
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

enum Descent {
    Converged,
    Exhausted,
    IterationLimit,
}

struct Solver<'a, O: Objective + ?Sized> {
    objective: &'a O,
    bounds: &'a Bounds,
    config: &'a OptimizerConfig,
    deadline: &'a Deadline,
    evaluations: Cell<usize>,
    iterations: usize,
    iterates: Vec<Iterate>,
    best_so_far: Vec<f64>,
}

impl<'a, O: Objective + ?Sized> Solver<'a, O> {
    fn eval(&self, x: &[f64]) -> f64 {
        self.evaluations.set(self.evaluations.get() + 1);
        let v = self.objective.value(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    }

    fn record(&mut self, x: Vec<f64>, value: f64, start: usize, iteration: usize) {
        let best = self.best_so_far.last().map_or(value, |b| b.min(value));
        self.best_so_far.push(best);
        self.iterates.push(Iterate {
            x,
            value,
            start,
            iteration,
        });
    }

    /// Gradient at `x`; `None` once the deadline has passed.
    fn gradient(&self, x: &[f64], fx: f64) -> Option<Vec<f64>> {
        if self.deadline.expired() {
            return None;
        }
        if self.config.gradient == GradientMode::Analytic {
            if let Some((_, g)) = self.objective.value_and_gradient(x) {
                self.evaluations.set(self.evaluations.get() + 1);
                return Some(g);
            }
        }
        let central = self.config.gradient == GradientMode::CentralDifference;
        let mut g = vec![0.0; x.len()];
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            let (lo, hi) = (self.bounds.lo[i], self.bounds.hi[i]);
            let h = self.config.fd_step * x[i].abs().max(1.0);
            let up_ok = x[i] + h <= hi;
            let down_ok = x[i] - h >= lo;
            if self.deadline.expired() {
                return None;
            }
            g[i] = if central && up_ok && down_ok {
                probe[i] = x[i] + h;
                let fp = self.eval(&probe);
                probe[i] = x[i] - h;
                let fm = self.eval(&probe);
                (fp - fm) / (2.0 * h)
            } else if up_ok {
                probe[i] = x[i] + h;
                (self.eval(&probe) - fx) / h
            } else if down_ok {
                probe[i] = x[i] - h;
                (fx - self.eval(&probe)) / h
            } else {
                0.0
            };
            probe[i] = x[i];
        }
        Some(g)
    }

    fn initial_scale(&self, g_inf: f64) -> f64 {
        let width = self
            .bounds
            .lo
            .iter()
            .zip(&self.bounds.hi)
            .map(|(lo, hi)| hi - lo)
            .filter(|w| w.is_finite() && *w > 0.0)
            .fold(f64::NAN, f64::max);
        let width = if width.is_nan() { 1.0 } else { width };
        0.1 * width / g_inf.max(f64::MIN_POSITIVE)
    }

    fn descend(&mut self, start: usize, mut x: Vec<f64>, mut f: f64) -> Descent {
        let n = x.len();
        if !f.is_finite() {
            return Descent::Converged;
        }
        let Some(mut g) = self.gradient(&x, f) else {
            return Descent::Exhausted;
        };
        let mut h: Option<Vec<f64>> = None;
        let mut fresh = true;
        for it in 1..=self.config.max_iterations {
            if self.deadline.expired() {
                return Descent::Exhausted;
            }
            let free: Vec<bool> = (0..n)
                .map(|i| {
                    let at_lo = x[i] <= self.bounds.lo[i] + 1e-12 * self.bounds.lo[i].abs().max(1.0);
                    let at_hi = x[i] >= self.bounds.hi[i] - 1e-12 * self.bounds.hi[i].abs().max(1.0);
                    !((at_lo && g[i] > 0.0) || (at_hi && g[i] < 0.0))
                })
                .collect();
            let pg = (0..n).filter(|&i| free[i]).map(|i| g[i].abs()).fold(0.0, f64::max);
            if pg <= 1e-14 * (1.0 + f.abs()) {
                return Descent::Converged;
            }
            let hm = h.get_or_insert_with(|| scaled_identity(n, self.initial_scale(pg)));
            let mut d = vec![0.0; n];
            for i in (0..n).filter(|&i| free[i]) {
                d[i] = -(0..n).filter(|&j| free[j]).map(|j| hm[i * n + j] * g[j]).sum::<f64>();
            }
            if dot(&g, &d) >= 0.0 {
                *hm = scaled_identity(n, self.initial_scale(pg));
                for i in 0..n {
                    d[i] = if free[i] { -hm[i * n + i] * g[i] } else { 0.0 };
                }
                fresh = true;
            }

            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..MAX_BACKTRACKS {
                if self.deadline.expired() {
                    return Descent::Exhausted;
                }
                let mut xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
                self.bounds.project(&mut xn);
                let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
                if s.iter().all(|v| *v == 0.0) {
                    break;
                }
                let fnew = self.eval(&xn);
                if fnew <= f + ARMIJO * dot(&g, &s) {
                    accepted = Some((xn, fnew, s));
                    break;
                }
                t *= 0.5;
            }
            let Some((xn, fnew, s)) = accepted else {
                if fresh {
                    return Descent::Converged;
                }
                h = None;
                fresh = true;
                continue;
            };
            self.iterations += 1;
            self.record(xn.clone(), fnew, start, it);
            let Some(gn) = self.gradient(&xn, fnew) else {
                return Descent::Exhausted;
            };
            let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 * norm(&s) * norm(&y) {
                let hm = h.as_mut().expect("initialised above");
                if fresh {
                    let gamma = sy / dot(&y, &y);
                    *hm = scaled_identity(n, gamma);
                }
                bfgs_update(hm, &s, &y, sy);
                fresh = false;
            }
            let df = (f - fnew).abs();
            let dx = s.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            x = xn;
            f = fnew;
            g = gn;
            if df < self.config.function_tolerance && dx < self.config.step_tolerance {
                return Descent::Converged;
            }
        }
        Descent::IterationLimit
    }
}

fn scaled_identity(n: usize, scale: f64) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = scale;
    }
    m
}

/// H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ with ρ = 1 / sᵀy.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum()).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (s[i] * hy[j] + hy[i] * s[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimizes `objective` over `bounds` from every start until convergence or
/// until `deadline` passes.
///
/// Starts are projected into the box and always evaluated, so an expired
/// deadline yields the best start. Duplicate starts are evaluated once.
pub fn solve_budgeted<O: Objective + ?Sized>(
    objective: &O,
    bounds: &Bounds,
    starts: &[Vec<f64>],
    config: &OptimizerConfig,
    deadline: &Deadline,
) -> Result<SolveReport, OptimError> {
    config.validate()?;
    if starts.is_empty() {
        return Err(OptimError::NoStarts);
    }
    let dim = objective.dim();
    if bounds.dim() != dim {
        return Err(OptimError::Dimension {
            expected: dim,
            got: bounds.dim(),
        });
    }
    if let Some(bad) = starts.iter().find(|s| s.len() != dim) {
        return Err(OptimError::Dimension {
            expected: dim,
            got: bad.len(),
        });
    }

    let clock = Instant::now();
    let mut solver = Solver {
        objective,
        bounds,
        config,
        deadline,
        evaluations: Cell::new(0),
        iterations: 0,
        iterates: Vec::new(),
        best_so_far: Vec::new(),
    };

    let mut seeds: Vec<(usize, Vec<f64>, f64)> = Vec::new();
    for (i, s) in starts.iter().enumerate() {
        let x = bounds.projected(s);
        if seeds.iter().any(|(_, y, _)| *y == x) {
            continue;
        }
        let f = solver.eval(&x);
        solver.record(x.clone(), f, i, 0);
        seeds.push((i, x, f));
    }
    seeds.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));

    let mut converged = false;
    let mut exhausted = deadline.expired();
    if !exhausted {
        for (i, x, f) in seeds {
            match solver.descend(i, x, f) {
                Descent::Converged => converged = true,
                Descent::IterationLimit => {}
                Descent::Exhausted => {
                    exhausted = true;
                    break;
                }
            }
        }
    }

    let best = solver
        .iterates
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.value.total_cmp(&b.1.value).then(a.0.cmp(&b.0)))
        .map(|(_, it)| it.clone())
        .expect("at least one start was evaluated");
    Ok(SolveReport {
        best,
        evaluations: solver.evaluations.get(),
        iterations: solver.iterations,
        iterates: solver.iterates,
        best_so_far: solver.best_so_far,
        elapsed: clock.elapsed(),
        converged,
        budget_exhausted: exhausted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        center: Vec<f64>,
        weights: Vec<f64>,
    }

    impl Objective for Quadratic {
        fn dim(&self) -> usize {
            self.center.len()
        }
        fn value(&self, x: &[f64]) -> f64 {
            x.iter()
                .zip(&self.center)
                .zip(&self.weights)
                .map(|((x, c), w)| w * (x - c) * (x - c))
                .sum()
        }
    }

    fn quad() -> Quadratic {
        Quadratic {
            center: vec![0.3, -1.2, 2.0],
            weights: vec![1.0, 4.0, 0.5],
        }
    }

    fn tight() -> OptimizerConfig {
        OptimizerConfig {
            function_tolerance: 1e-14,
            step_tolerance: 1e-12,
            budget_s: 10.0,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn optimum_at_bound_is_clamped() {
        let b = Bounds::new(vec![-5.0, 0.0, -5.0], vec![5.0, 5.0, 1.5]).unwrap();
        let r = solve_budgeted(&quad(), &b, &[vec![1.0, 1.0, 0.0]], &tight(), &Deadline::never()).unwrap();
        assert!((r.best.x[1] - 0.0).abs() < 1e-12);
        assert!((r.best.x[2] - 1.5).abs() < 1e-12);
        assert!((r.best.x[0] - 0.3).abs() < 1e-5);
    }

    #[test]
    fn zero_budget_returns_best_start() {
        let b = Bounds::uniform(3, -10.0, 10.0).unwrap();
        let cfg = OptimizerConfig {
            budget_s: 0.0,
            ..tight()
        };
        let starts = vec![vec![5.0, 5.0, 5.0], vec![0.0, -1.0, 2.0], vec![1.0, 1.0, 1.0]];
        let r = solve_budgeted(&quad(), &b, &starts, &cfg, &Deadline::after(cfg.budget())).unwrap();
        assert_eq!(r.best.x, starts[1]);
        assert_eq!(r.iterations, 0);
        assert!(r.budget_exhausted);
    }

    #[test]
    fn starts_are_projected() {
        let b = Bounds::uniform(3, 0.0, 1.0).unwrap();
        let cfg = OptimizerConfig {
            budget_s: 0.0,
            ..tight()
        };
        let r = solve_budgeted(&quad(), &b, &[vec![-3.0, 7.0, 0.5]], &cfg, &Deadline::after(Duration::ZERO)).unwrap();
        assert_eq!(r.best.x, vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn empty_start_list_is_an_error() {
        let b = Bounds::uniform(3, 0.0, 1.0).unwrap();
        assert_eq!(
            solve_budgeted(&quad(), &b, &[], &tight(), &Deadline::never()).unwrap_err(),
            OptimError::NoStarts
        );
    }

    #[test]
    fn inverted_bounds_rejected() {
        assert!(Bounds::new(vec![1.0], vec![0.0]).is_err());
    }
}

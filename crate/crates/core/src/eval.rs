//! Closed-loop simulation, local stability at equilibria, Monte-Carlo
//! stability and suboptimality tests, test-set accuracy, and the
//! probabilistic ultimate-boundedness certificate.

use ndarray::{s, ArrayView1};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::dynamics::{self, ControlProblem};
use crate::linalg::{self, Matrix, Spectrum, Vector};
use crate::lqr::{self, LyapunovConstants};
use crate::models::{Controller, ModelError};
use crate::ode::{self, Dopri5Options, OdeError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation input: {0}")]
    Invalid(String),
    #[error("integration became too stiff at t = {t}")]
    Stiff { t: f64, prefix: Box<SimResult> },
    #[error("optimal cost V(x0) = {value} for initial condition {index} is not positive")]
    NonPositiveCost { index: usize, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub t_max: f64,
    /// Steady state once `‖f(x, û(x))‖ ≤ steady_tol`.
    pub steady_tol: f64,
    /// Divergence once `‖x − x_f‖ ≥ divergence_cap`.
    pub divergence_cap: f64,
    /// A final state within this distance of the goal counts as stabilized.
    pub stable_tol: f64,
    pub ode: Dopri5Options,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { t_max: 100.0, steady_tol: 1e-8, divergence_cap: 1e3, stable_tol: 1e-3, ode: Dopri5Options::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    SteadyState,
    TimeCap,
    Divergence,
}

impl Termination {
    pub fn tag(self) -> &'static str {
        match self {
            Termination::SteadyState => "steady-state",
            Termination::TimeCap => "time-cap",
            Termination::Divergence => "divergence",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub t: Vec<f64>,
    pub x: Vec<Vector>,
    /// Accumulated running cost at each output time.
    pub cost: Vec<f64>,
    pub final_norm: f64,
    pub termination: Termination,
}

impl SimResult {
    pub fn total_cost(&self) -> f64 {
        *self.cost.last().expect("non-empty simulation")
    }

    fn from_path(path: &ode::OdePath, n: usize, x_goal: &Vector, termination: Termination) -> Self {
        let x: Vec<Vector> = path.y.iter().map(|y| y.slice(s![..n]).to_owned()).collect();
        let cost = path.y.iter().map(|y| y[n]).collect();
        let last = x.last().expect("non-empty path");
        let final_norm = linalg::vec_norm((last - x_goal).view());
        Self { t: path.t.clone(), x, cost, final_norm, termination }
    }
}

/// Integrates the closed loop with the running cost as an extra state.
pub fn simulate_closed_loop(
    problem: &dyn ControlProblem,
    ctrl: &Controller,
    x0: ArrayView1<f64>,
    cfg: &SimConfig,
) -> Result<SimResult, EvalError> {
    let n = problem.state_dim();
    if x0.len() != n {
        return Err(EvalError::Invalid(format!("initial state has length {}, expected {n}", x0.len())));
    }
    let x_goal = problem.goal_state().clone();
    let mut y0 = Vector::zeros(n + 1);
    y0.slice_mut(s![..n]).assign(&x0);
    let rhs = |_t: f64, y: ArrayView1<f64>| -> Vector {
        let x = y.slice(s![..n]);
        let u = ctrl.control(problem, x);
        let mut out = Vector::zeros(n + 1);
        out.slice_mut(s![..n]).assign(&problem.dynamics(x, u.view()));
        out[n] = dynamics::running_cost_unchecked(problem, x, u.view());
        out
    };
    let mut reason = Termination::TimeCap;
    let stop = |_t: f64, y: &Vector, dy: &Vector| -> bool {
        let dist = linalg::vec_norm((&y.slice(s![..n]) - &x_goal).view());
        if !(dist < cfg.divergence_cap) {
            reason = Termination::Divergence;
            return true;
        }
        if linalg::vec_norm(dy.slice(s![..n])) <= cfg.steady_tol {
            reason = Termination::SteadyState;
            return true;
        }
        false
    };
    match ode::integrate(rhs, y0.view(), 0.0, cfg.t_max, &cfg.ode, stop) {
        Ok((path, _)) => Ok(SimResult::from_path(&path, n, &x_goal, reason)),
        Err(OdeError::NonFinite { prefix, .. }) => {
            let mut r = SimResult::from_path(&prefix, n, &x_goal, Termination::Divergence);
            r.final_norm = f64::INFINITY;
            Ok(r)
        }
        Err(e) => {
            let t = *e.prefix().last().0;
            let prefix = SimResult::from_path(e.prefix(), n, &x_goal, Termination::TimeCap);
            Err(EvalError::Stiff { t, prefix: Box::new(prefix) })
        }
    }
}

/// Closed-loop equilibrium and its linearization.
#[derive(Debug, Clone, PartialEq)]
pub struct EigReport {
    pub x_bar: Vector,
    pub residual: f64,
    pub jacobian: Matrix,
    pub spectrum: Spectrum,
    pub max_real: f64,
    pub locally_stable: bool,
    pub newton_steps: usize,
    /// False when Newton did not reach the tolerance (no equilibrium found).
    pub converged: bool,
}

pub const EQUILIBRIUM_TOL: f64 = 1e-10;

fn closed_loop(problem: &dyn ControlProblem, ctrl: &Controller, x: ArrayView1<f64>) -> Vector {
    let u = ctrl.control(problem, x);
    problem.dynamics(x, u.view())
}

/// `f_x + f_u ∂û/∂x`.
pub fn closed_loop_jacobian(problem: &dyn ControlProblem, ctrl: &Controller, x: ArrayView1<f64>) -> Result<Matrix, EvalError> {
    let u = ctrl.control(problem, x);
    let fx = problem.jacobian_x(x, u.view());
    let fu = problem.jacobian_u(x, u.view());
    Ok(fx + &fu.dot(&ctrl.jacobian(problem, x)?))
}

/// Damped Newton on `f(x, û(x)) = 0` from `x_init`, then the spectrum of the
/// closed-loop Jacobian at the root.
pub fn find_equilibrium(problem: &dyn ControlProblem, ctrl: &Controller, x_init: ArrayView1<f64>) -> Result<EigReport, EvalError> {
    let mut x = x_init.to_owned();
    let mut f = closed_loop(problem, ctrl, x.view());
    let mut res = linalg::vec_norm(f.view());
    let mut steps = 0;
    while res > EQUILIBRIUM_TOL && steps < 100 {
        let jac = closed_loop_jacobian(problem, ctrl, x.view())?;
        let dx = match linalg::lu_solve(jac.view(), (-&f).view()) {
            Ok(d) => d,
            Err(_) => break,
        };
        let mut t = 1.0;
        let mut improved = false;
        while t >= 1.0 / 1024.0 {
            let xn = &x + &(t * &dx);
            let fnew = closed_loop(problem, ctrl, xn.view());
            let rn = linalg::vec_norm(fnew.view());
            if rn.is_finite() && rn < (1.0 - 1e-4 * t) * res {
                x = xn;
                f = fnew;
                res = rn;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        steps += 1;
        if !improved {
            break;
        }
    }
    let converged = res <= EQUILIBRIUM_TOL;
    let jacobian = closed_loop_jacobian(problem, ctrl, x.view())?;
    let spectrum = linalg::eig_general(jacobian.view())?;
    let max_real = spectrum.max_real_part;
    Ok(EigReport { x_bar: x, residual: res, jacobian, spectrum, max_real, locally_stable: max_real < 0.0, newton_steps: steps, converged })
}

/// Mean and maximum of `‖û(x_i) − u_i‖₂` over the test set.
pub fn test_metrics(problem: &dyn ControlProblem, ctrl: &Controller, test: &Dataset) -> Result<(f64, f64), EvalError> {
    if test.is_empty() {
        return Err(EvalError::Invalid("empty test set".into()));
    }
    let errs = control_errors(problem, ctrl, test);
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    let max = errs.iter().cloned().fold(0.0, f64::max);
    Ok((mean, max))
}

pub fn control_errors(problem: &dyn ControlProblem, ctrl: &Controller, test: &Dataset) -> Vec<f64> {
    (0..test.len()).into_par_iter().map(|i| linalg::vec_norm((&ctrl.control(problem, test.x.row(i)) - &test.u.row(i)).view())).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct McReport {
    pub final_norms: Vec<f64>,
    pub costs: Vec<f64>,
    pub terminations: Vec<Termination>,
    pub worst_case: f64,
    pub stabilized: Vec<bool>,
    /// All trajectories end within the stability tolerance.
    pub stable: bool,
    pub optimal_costs: Option<Vec<f64>>,
    /// `100 (cost − V)/V` for stabilized trajectories.
    pub extra_cost: Vec<Option<f64>>,
    pub mean_extra_cost: Option<f64>,
}

impl McReport {
    pub fn count(&self) -> usize {
        self.final_norms.len()
    }
}

/// Simulates every initial condition (one task each, results in IC order).
pub fn mc_worst_case(problem: &dyn ControlProblem, ctrl: &Controller, ics: &[Vector], cfg: &SimConfig) -> McReport {
    let sims: Vec<(f64, f64, Termination)> = ics
        .par_iter()
        .map(|x0| match simulate_closed_loop(problem, ctrl, x0.view(), cfg) {
            Ok(r) => (r.final_norm, r.total_cost(), r.termination),
            Err(EvalError::Stiff { prefix, .. }) => (prefix.final_norm.max(cfg.divergence_cap), f64::INFINITY, Termination::Divergence),
            Err(_) => (f64::INFINITY, f64::INFINITY, Termination::Divergence),
        })
        .collect();
    let final_norms: Vec<f64> = sims.iter().map(|s| s.0).collect();
    let costs = sims.iter().map(|s| s.1).collect();
    let terminations = sims.iter().map(|s| s.2).collect();
    let stabilized: Vec<bool> = final_norms.iter().map(|v| *v <= cfg.stable_tol).collect();
    let worst_case = final_norms.iter().cloned().fold(0.0, f64::max);
    McReport {
        stable: stabilized.iter().all(|s| *s),
        worst_case,
        final_norms,
        costs,
        terminations,
        stabilized,
        optimal_costs: None,
        extra_cost: vec![None; ics.len()],
        mean_extra_cost: None,
    }
}

/// Adds percent extra cost relative to the optimal costs `V(x0)`.
pub fn mc_suboptimality(
    problem: &dyn ControlProblem,
    ctrl: &Controller,
    ics: &[Vector],
    optimal_costs: &[f64],
    cfg: &SimConfig,
) -> Result<McReport, EvalError> {
    if optimal_costs.len() != ics.len() {
        return Err(EvalError::Invalid(format!("{} optimal costs for {} initial conditions", optimal_costs.len(), ics.len())));
    }
    if let Some((index, &value)) = optimal_costs.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(EvalError::NonPositiveCost { index, value });
    }
    let mut rep = mc_worst_case(problem, ctrl, ics, cfg);
    rep.extra_cost =
        (0..ics.len()).map(|i| rep.stabilized[i].then(|| 100.0 * (rep.costs[i] - optimal_costs[i]) / optimal_costs[i])).collect();
    let kept: Vec<f64> = rep.extra_cost.iter().flatten().cloned().collect();
    rep.mean_extra_cost = (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64);
    rep.optimal_costs = Some(optimal_costs.to_vec());
    Ok(rep)
}

/// Overshoot `K`, decay rate `α` and ultimate bound `B` of the Lyapunov
/// argument for a control error bound `δ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UltimateBound {
    pub overshoot: f64,
    pub alpha: f64,
    pub bound: f64,
}

pub fn ultimate_bound_constants(c: &LyapunovConstants, delta: f64) -> UltimateBound {
    let ratio = (c.k2 / c.k1).sqrt();
    UltimateBound { overshoot: ratio, alpha: (1.0 - c.theta) * c.k3 / (2.0 * c.k2), bound: c.l_u * c.k4 / (c.theta * c.k3) * ratio * delta }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FEstimate {
    pub f: f64,
    pub std_err: f64,
    pub samples: usize,
}

/// Monte-Carlo estimate of `F(δ, ε) = Pr(δ − e(x) > ε)` for `x` from
/// `sampler`.
pub fn estimate_f<T, S, E>(
    mut sampler: S,
    error_fn: E,
    delta_ref: f64,
    eps: f64,
    samples: usize,
    rng: &mut dyn RngCore,
) -> Result<FEstimate, EvalError>
where
    S: FnMut(&mut dyn RngCore) -> T,
    E: Fn(&T) -> f64,
{
    if samples == 0 {
        return Err(EvalError::Invalid("estimate_f needs at least one sample".into()));
    }
    let hits = (0..samples).filter(|_| delta_ref - error_fn(&sampler(rng)) > eps).count();
    let f = hits as f64 / samples as f64;
    Ok(FEstimate { f, std_err: (f * (1.0 - f) / samples as f64).sqrt(), samples })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificateReport {
    pub delta_n: f64,
    pub delta_plus: f64,
    pub eps_n: f64,
    pub f: f64,
    pub n: usize,
    /// `1 − F^N`, or `None` when `δ_N ≥ δ⁺` and the certificate says nothing.
    pub probability: Option<f64>,
    pub bound: UltimateBound,
}

impl CertificateReport {
    pub fn vacuous(&self) -> bool {
        self.probability.is_none()
    }
}

pub fn certificate_probability(f: f64, n: usize) -> f64 {
    1.0 - f.powi(n as i32)
}

/// Probability that the closed loop is ultimately bounded, given the max
/// test error `δ_N` over `N` samples and an estimate of `F(δ, ε_N)`.
pub fn probability_certificate(delta_n: f64, n: usize, consts: &LyapunovConstants, f: f64) -> Result<CertificateReport, EvalError> {
    if !(0.0..=1.0).contains(&f) {
        return Err(EvalError::Invalid(format!("F = {f} is not a probability")));
    }
    let delta_plus = lqr::delta_plus(consts);
    let eps_n = delta_plus - delta_n;
    Ok(CertificateReport {
        delta_n,
        delta_plus,
        eps_n,
        f,
        n,
        probability: (delta_n < delta_plus).then(|| certificate_probability(f, n)),
        bound: ultimate_bound_constants(consts, delta_n),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRow {
    pub n: usize,
    pub mean_delta_n: f64,
    /// Fraction of repetitions with `δ − δ_N > ε`.
    pub tail: f64,
    pub tail_std_err: f64,
    /// `F(δ, ε)^N` with `F` supplied by the caller.
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceStudy {
    pub rows: Vec<ConvergenceRow>,
    /// Every sample path of running maxima was nondecreasing.
    pub monotone: bool,
}

/// Running-maximum estimates `δ_N = max_{i ≤ N} g(x_i)` over repeated sample
/// paths, compared against the tail law `Pr(δ − δ_N > ε) = F^N`.
#[allow(clippy::too_many_arguments)]
pub fn max_estimate_convergence_study<T, S, G>(
    g: G,
    mut sampler: S,
    schedule: &[usize],
    delta: f64,
    eps: f64,
    f_exact: f64,
    repetitions: usize,
    rng: &mut dyn RngCore,
) -> ConvergenceStudy
where
    S: FnMut(&mut dyn RngCore) -> T,
    G: Fn(&T) -> f64,
{
    let n_max = schedule.iter().cloned().max().unwrap_or(0);
    let mut sums = vec![0.0; schedule.len()];
    let mut tails = vec![0usize; schedule.len()];
    let mut monotone = true;
    for _ in 0..repetitions {
        let mut running = f64::NEG_INFINITY;
        let mut prev = f64::NEG_INFINITY;
        for k in 1..=n_max {
            running = running.max(g(&sampler(rng)));
            monotone &= running >= prev;
            prev = running;
            if let Some(j) = schedule.iter().position(|&s| s == k) {
                sums[j] += running;
                if delta - running > eps {
                    tails[j] += 1;
                }
            }
        }
    }
    let reps = repetitions.max(1) as f64;
    let rows = schedule
        .iter()
        .enumerate()
        .map(|(j, &n)| {
            let predicted = f_exact.powi(n as i32);
            ConvergenceRow {
                n,
                mean_delta_n: sums[j] / reps,
                tail: tails[j] as f64 / reps,
                tail_std_err: (predicted * (1.0 - predicted) / reps).sqrt(),
                predicted,
            }
        })
        .collect();
    ConvergenceStudy { rows, monotone }
}

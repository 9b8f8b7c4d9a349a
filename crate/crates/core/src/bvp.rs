//! Infinite-horizon Pontryagin boundary-value problems solved by trapezoidal
//! collocation on a finite horizon, with an LQR warm start, a horizon ladder,
//! and Hamiltonian-driven mesh refinement.
//!
//! Unknowns are the node values `z_k = (x_k, λ_k)`. The boundary conditions
//! are `x_0 = x0` and `λ_K = 2P(x_K − x_f)`, i.e. the truncated tail is
//! priced with the LQR value. The value-to-go adds `V_LQR(x_K)` to the
//! quadrature of the running cost.

use ndarray::{s, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{self, ControlProblem, DynamicsError, HamiltonianMinimizer};
use crate::linalg::{self, BandedMatrix, LinalgError, Matrix, Vector};
use crate::lqr::{self, RiccatiSolution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BvpError {
    #[error("invalid BVP configuration: {0}")]
    Config(String),
    #[error("LQR warm start diverged (‖x‖ = {norm:e} at t = {t})")]
    WarmStartFailure { t: f64, norm: f64 },
    #[error("mesh would exceed {0} nodes")]
    MeshTooLarge(usize),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BvpConfig {
    /// Horizon ladder; each rung is tried in order until the terminal checks pass.
    pub horizons: Vec<f64>,
    /// First mesh step at `t = 0`.
    pub initial_step: f64,
    /// Geometric growth factor of consecutive steps.
    pub step_growth: f64,
    pub max_step: f64,
    pub newton_tol: f64,
    pub max_newton_iters: usize,
    pub terminal_state_tol: f64,
    pub terminal_costate_tol: f64,
    /// Target for `max_k |H(x_k, λ_k, u_k)|`, enforced by mesh refinement.
    pub hamiltonian_tol: f64,
    pub max_refinements: usize,
    /// Mesh bisections attempted when Newton fails on a rung.
    pub max_mesh_doublings: usize,
    pub max_nodes: usize,
    pub divergence_cap: f64,
    /// Re-solve on the bisected mesh and Richardson-extrapolate `V(x0)`.
    pub richardson: bool,
}

impl Default for BvpConfig {
    fn default() -> Self {
        Self {
            horizons: vec![4.0, 8.0, 16.0, 32.0, 64.0],
            initial_step: 0.01,
            step_growth: 1.05,
            max_step: 0.1,
            newton_tol: 1e-9,
            max_newton_iters: 40,
            terminal_state_tol: 1e-4,
            terminal_costate_tol: 1e-3,
            hamiltonian_tol: 2e-5,
            max_refinements: 6,
            max_mesh_doublings: 2,
            max_nodes: 20_000,
            divergence_cap: 1e3,
            richardson: true,
        }
    }
}

impl BvpConfig {
    pub fn validate(&self) -> Result<(), BvpError> {
        if self.horizons.is_empty() || self.horizons.iter().any(|&h| !(h > 0.0)) {
            return Err(BvpError::Config("horizon ladder must be non-empty and positive".into()));
        }
        if self.horizons.windows(2).any(|w| w[1] <= w[0]) {
            return Err(BvpError::Config("horizon ladder must be strictly increasing".into()));
        }
        let positive = [
            self.initial_step,
            self.max_step,
            self.newton_tol,
            self.terminal_state_tol,
            self.terminal_costate_tol,
            self.hamiltonian_tol,
            self.divergence_cap,
        ];
        if positive.iter().any(|&v| !(v > 0.0)) || self.step_growth < 1.0 {
            return Err(BvpError::Config("tolerances and steps must be positive, growth ≥ 1".into()));
        }
        if self.max_step < self.initial_step {
            return Err(BvpError::Config("max_step must be at least initial_step".into()));
        }
        Ok(())
    }

    /// Geometric mesh on `[0, t_f]`.
    pub fn mesh(&self, t_f: f64) -> Vec<f64> {
        let mut t = vec![0.0];
        let mut h = self.initial_step;
        let mut cur = 0.0;
        while cur < t_f {
            let mut step = h.min(self.max_step);
            if cur + step > t_f || t_f - (cur + step) < 0.25 * step {
                step = t_f - cur;
            }
            cur += step;
            t.push(if (cur - t_f).abs() < 1e-12 { t_f } else { cur });
            h *= self.step_growth;
        }
        *t.last_mut().expect("mesh has nodes") = t_f;
        t
    }
}

/// One open-loop optimal trajectory, the unit of training data.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopSolution {
    pub t: Vec<f64>,
    /// States, one row per node.
    pub x: Matrix,
    pub lambda: Matrix,
    pub u: Matrix,
    pub v: Vector,
    pub converged: bool,
    /// Infinity norm of the final collocation residual.
    pub residual: f64,
    pub max_hamiltonian: f64,
    /// `V(0)` exceeds the LQR closed-loop cost from the same state.
    pub suspicious: bool,
    /// Richardson-extrapolated `V(x0)` from this mesh and its bisection.
    pub value_extrapolated: Option<f64>,
}

impl OpenLoopSolution {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.t.last().copied().unwrap_or(0.0)
    }

    /// Best available estimate of `V(x0)`: the extrapolated value when
    /// present, the node quadrature otherwise.
    pub fn value(&self) -> f64 {
        self.value_extrapolated.unwrap_or(self.v[0])
    }
}

/// Initial guess on a mesh: state, costate and control trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct Guess {
    pub t: Vec<f64>,
    pub x: Vec<Vector>,
    pub lambda: Vec<Vector>,
    pub u: Vec<Vector>,
    /// Closed-loop LQR cost accumulated on the mesh plus the LQR tail.
    pub lqr_cost: f64,
}

/// Node-wise Pontryagin right-hand side and its Jacobian.
struct Pmp<'a> {
    problem: &'a dyn ControlProblem,
    lqr: &'a RiccatiSolution,
    minimizer: HamiltonianMinimizer,
    n: usize,
}

struct NodeEval {
    rhs: Vector,
    u: Vector,
    jac: Matrix,
    du_dx: Matrix,
    du_dl: Matrix,
}

impl<'a> Pmp<'a> {
    fn new(problem: &'a dyn ControlProblem, lqr: &'a RiccatiSolution) -> Result<Self, BvpError> {
        let minimizer = HamiltonianMinimizer::new(problem)?;
        Ok(Self { problem, lqr, minimizer, n: problem.state_dim() })
    }

    fn control(&self, x: ArrayView1<f64>, l: ArrayView1<f64>) -> Vector {
        self.minimizer.minimize(self.problem, x, l)
    }

    fn rhs(&self, x: ArrayView1<f64>, l: ArrayView1<f64>) -> (Vector, Vector) {
        let p = self.problem;
        let u = self.control(x, l);
        let fx = p.jacobian_x(x, u.view());
        let mut out = Vector::zeros(2 * self.n);
        out.slice_mut(s![..self.n]).assign(&p.dynamics(x, u.view()));
        let g = -(p.state_cost_grad(x) + fx.t().dot(&l));
        out.slice_mut(s![self.n..]).assign(&g);
        (out, u)
    }

    fn eval(&self, x: ArrayView1<f64>, l: ArrayView1<f64>, with_jac: bool) -> NodeEval {
        let p = self.problem;
        let n = self.n;
        let uf = p.goal_control().view();
        let unclamped = self.minimizer.stationary(p, x, l);
        let mask = dynamics::active_mask(p, unclamped.view());
        let u = dynamics::clamp_control(p, unclamped);
        let fx = p.jacobian_x(x, u.view());
        let mut rhs = Vector::zeros(2 * n);
        rhs.slice_mut(s![..n]).assign(&p.dynamics(x, u.view()));
        rhs.slice_mut(s![n..]).assign(&-(p.state_cost_grad(x) + fx.t().dot(&l)));
        if !with_jac {
            let m = u.len();
            return NodeEval { rhs, u, jac: Matrix::zeros((0, 0)), du_dx: Matrix::zeros((m, n)), du_dl: Matrix::zeros((m, n)) };
        }
        let fu_goal = p.jacobian_u(x, uf);
        let fu = p.jacobian_u(x, u.view());
        let coupling = p.input_coupling(x, uf, l);
        // du/dλ = −½ D R⁻¹ f_uᵀ,  du/dx = −½ D R⁻¹ ∂(f_uᵀλ)/∂x
        let mut du_dl = self.minimizer.r_inv().dot(&fu_goal.t()) * -0.5;
        let mut du_dx = self.minimizer.r_inv().dot(&coupling) * -0.5;
        for (i, &a) in mask.iter().enumerate() {
            if a == 0.0 {
                du_dl.row_mut(i).fill(0.0);
                du_dx.row_mut(i).fill(0.0);
            }
        }
        let coupling_u = p.input_coupling(x, u.view(), l);
        let mut jac = Matrix::zeros((2 * n, 2 * n));
        jac.slice_mut(s![..n, ..n]).assign(&(&fx + &fu.dot(&du_dx)));
        jac.slice_mut(s![..n, n..]).assign(&fu.dot(&du_dl));
        let curv = p.costate_curvature(x, u.view(), l);
        let gx = -(p.state_cost_hessian(x) + curv + coupling_u.t().dot(&du_dx));
        let gl = -(fx.t().to_owned() + coupling_u.t().dot(&du_dl));
        jac.slice_mut(s![n.., ..n]).assign(&gx);
        jac.slice_mut(s![n.., n..]).assign(&gl);
        NodeEval { rhs, u, jac, du_dx, du_dl }
    }

    /// Time derivative of the running cost along the PMP flow at a node.
    fn cost_rate(&self, x: ArrayView1<f64>, ev: &NodeEval) -> f64 {
        let p = self.problem;
        let n = self.n;
        let xdot = ev.rhs.slice(s![..n]);
        let ldot = ev.rhs.slice(s![n..]);
        let udot = ev.du_dx.dot(&xdot) + ev.du_dl.dot(&ldot);
        let du = &ev.u - p.goal_control();
        p.state_cost_grad(x).dot(&xdot) + 2.0 * p.r_matrix().dot(&du).dot(&udot)
    }
}

/// Value-to-go at every node: Hermite-corrected trapezoidal quadrature of the
/// running cost plus the LQR tail at the final node.
fn value_to_go(pmp: &Pmp, t: &[f64], x: &[Vector], lam: &[Vector]) -> (Vector, Vec<Vector>) {
    let p = pmp.problem;
    let k = t.len();
    let mut l = Vec::with_capacity(k);
    let mut ld = Vec::with_capacity(k);
    let mut us = Vec::with_capacity(k);
    for i in 0..k {
        let ev = pmp.eval(x[i].view(), lam[i].view(), true);
        l.push(dynamics::running_cost_unchecked(p, x[i].view(), ev.u.view()));
        ld.push(pmp.cost_rate(x[i].view(), &ev));
        us.push(ev.u);
    }
    let mut v = Vector::zeros(k);
    v[k - 1] = lqr::lqr_value(pmp.lqr, x[k - 1].view());
    for i in (0..k - 1).rev() {
        let h = t[i + 1] - t[i];
        let seg = 0.5 * h * (l[i] + l[i + 1]) + h * h / 12.0 * (ld[i] - ld[i + 1]);
        v[i] = v[i + 1] + seg;
    }
    (v, us)
}

/// Simulates `ẋ = f(x, u_LQR(x))` on the mesh with the implicit trapezoidal
/// rule (the same discretization as the collocation, so the guess is exact
/// for linear-quadratic problems) and sets `λ = 2P(x − x_f)`.
pub fn lqr_warm_start(
    problem: &dyn ControlProblem,
    sol: &RiccatiSolution,
    x0: ArrayView1<f64>,
    mesh: &[f64],
    divergence_cap: f64,
) -> Result<Guess, BvpError> {
    let n = problem.state_dim();
    if x0.len() != n {
        return Err(DynamicsError::DimensionMismatch { what: "initial state", expected: n, got: x0.len() }.into());
    }
    let f_cl = |x: ArrayView1<f64>| -> Vector {
        let u = dynamics::clamp_control(problem, lqr::lqr_control(sol, x));
        problem.dynamics(x, u.view())
    };
    let jac_cl = |x: ArrayView1<f64>| -> Matrix {
        let u = lqr::lqr_control(sol, x);
        let uc = dynamics::clamp_control(problem, u.clone());
        let mut fu = problem.jacobian_u(x, uc.view());
        for i in 0..u.len() {
            if u[i] != uc[i] {
                fu.column_mut(i).fill(0.0);
            }
        }
        problem.jacobian_x(x, uc.view()) - fu.dot(&sol.k)
    };
    let mut xs = vec![x0.to_owned()];
    let mut cost = 0.0;
    for w in mesh.windows(2) {
        let h = w[1] - w[0];
        let xk = xs.last().expect("non-empty").clone();
        let fk = f_cl(xk.view());
        let mut y = &xk + &(&fk * h);
        let mut ok = false;
        for _ in 0..30 {
            let fy = f_cl(y.view());
            let res = &y - &xk - &((&fk + &fy) * (0.5 * h));
            if linalg::vec_inf_norm(res.view()) <= 1e-13 * (1.0 + linalg::vec_inf_norm(y.view())) {
                ok = true;
                break;
            }
            let j = Matrix::eye(n) - jac_cl(y.view()) * (0.5 * h);
            let step = linalg::lu_solve(j.view(), res.view())?;
            y -= &step;
            if !y.iter().all(|v| v.is_finite()) {
                break;
            }
            if linalg::vec_inf_norm(step.view()) <= 1e-14 * (1.0 + linalg::vec_inf_norm(y.view())) {
                ok = true;
                break;
            }
        }
        let norm = linalg::vec_norm(y.view());
        if !ok || !norm.is_finite() || norm > divergence_cap {
            return Err(BvpError::WarmStartFailure { t: w[1], norm });
        }
        let uk = dynamics::clamp_control(problem, lqr::lqr_control(sol, xk.view()));
        let uy = dynamics::clamp_control(problem, lqr::lqr_control(sol, y.view()));
        cost += 0.5
            * h
            * (dynamics::running_cost_unchecked(problem, xk.view(), uk.view())
                + dynamics::running_cost_unchecked(problem, y.view(), uy.view()));
        xs.push(y);
    }
    cost += lqr::lqr_value(sol, xs.last().expect("non-empty").view());
    let lambda: Vec<Vector> = xs.iter().map(|x| lqr::lqr_gradient(sol, x.view())).collect();
    let u: Vec<Vector> = xs.iter().map(|x| dynamics::clamp_control(problem, lqr::lqr_control(sol, x.view()))).collect();
    Ok(Guess { t: mesh.to_vec(), x: xs, lambda, u, lqr_cost: cost })
}

/// Collocation residual: initial condition, interval defects, terminal condition.
fn residual(pmp: &Pmp, t: &[f64], z: &[Vector], x0: ArrayView1<f64>, rhs: &[Vector]) -> Vector {
    let n = pmp.n;
    let k = t.len();
    let mut r = Vector::zeros(2 * n * k);
    r.slice_mut(s![..n]).assign(&(&z[0].slice(s![..n]) - &x0));
    for i in 0..k - 1 {
        let h = t[i + 1] - t[i];
        let d = &z[i + 1] - &z[i] - &((&rhs[i] + &rhs[i + 1]) * (0.5 * h));
        let off = n + 2 * n * i;
        r.slice_mut(s![off..off + 2 * n]).assign(&d);
    }
    let xk = z[k - 1].slice(s![..n]);
    let lk = z[k - 1].slice(s![n..]);
    let term = &lk - &lqr::lqr_gradient(pmp.lqr, xk);
    let off = n + 2 * n * (k - 1);
    r.slice_mut(s![off..]).assign(&term);
    r
}

struct NewtonOutcome {
    z: Vec<Vector>,
    residual: f64,
    converged: bool,
}

fn newton(pmp: &Pmp, t: &[f64], mut z: Vec<Vector>, x0: ArrayView1<f64>, cfg: &BvpConfig) -> Result<NewtonOutcome, BvpError> {
    let n = pmp.n;
    let k = t.len();
    let size = 2 * n * k;
    let bw = 3 * n - 1;
    let eval_all =
        |z: &[Vector], jac: bool| -> Vec<NodeEval> { z.iter().map(|zi| pmp.eval(zi.slice(s![..n]), zi.slice(s![n..]), jac)).collect() };
    let mut evals = eval_all(&z, true);
    let mut rhs: Vec<Vector> = evals.iter().map(|e| e.rhs.clone()).collect();
    let mut r = residual(pmp, t, &z, x0, &rhs);
    let mut rn = linalg::vec_inf_norm(r.view());
    let p_grad = &pmp.lqr.p * 2.0;
    for _ in 0..cfg.max_newton_iters {
        if !rn.is_finite() {
            break;
        }
        if rn <= cfg.newton_tol {
            return Ok(NewtonOutcome { z, residual: rn, converged: true });
        }
        let mut jm = BandedMatrix::zeros(size, bw, bw);
        for i in 0..n {
            jm.add(i, i, 1.0);
        }
        for i in 0..k - 1 {
            let h = t[i + 1] - t[i];
            let row0 = n + 2 * n * i;
            let c0 = 2 * n * i;
            let c1 = 2 * n * (i + 1);
            for a in 0..2 * n {
                jm.add(row0 + a, c0 + a, -1.0);
                jm.add(row0 + a, c1 + a, 1.0);
                for b in 0..2 * n {
                    let j0 = evals[i].jac[[a, b]];
                    let j1 = evals[i + 1].jac[[a, b]];
                    if j0 != 0.0 {
                        jm.add(row0 + a, c0 + b, -0.5 * h * j0);
                    }
                    if j1 != 0.0 {
                        jm.add(row0 + a, c1 + b, -0.5 * h * j1);
                    }
                }
            }
        }
        let row0 = n + 2 * n * (k - 1);
        let c = 2 * n * (k - 1);
        for a in 0..n {
            jm.add(row0 + a, c + n + a, 1.0);
            for b in 0..n {
                let v = p_grad[[a, b]];
                if v != 0.0 {
                    jm.add(row0 + a, c + b, -v);
                }
            }
        }
        let delta = match jm.solve(r.view()) {
            Ok(d) => d,
            Err(LinalgError::Singular { .. }) | Err(LinalgError::NonFinite) => break,
            Err(e) => return Err(e.into()),
        };
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha >= 1.0 / 256.0 {
            let trial: Vec<Vector> =
                z.iter().enumerate().map(|(i, zi)| zi - &(&delta.slice(s![2 * n * i..2 * n * (i + 1)]) * alpha)).collect();
            let tr_rhs: Vec<Vector> = trial.iter().map(|zi| pmp.rhs(zi.slice(s![..n]), zi.slice(s![n..])).0).collect();
            let tr = residual(pmp, t, &trial, x0, &tr_rhs);
            let tn = linalg::vec_inf_norm(tr.view());
            if tn.is_finite() && (tn < (1.0 - 1e-4 * alpha) * rn || tn <= cfg.newton_tol) {
                z = trial;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
        evals = eval_all(&z, true);
        rhs = evals.iter().map(|e| e.rhs.clone()).collect();
        r = residual(pmp, t, &z, x0, &rhs);
        rn = linalg::vec_inf_norm(r.view());
    }
    let converged = rn <= cfg.newton_tol;
    Ok(NewtonOutcome { z, residual: rn, converged })
}

fn join(x: &[Vector], l: &[Vector]) -> Vec<Vector> {
    x.iter()
        .zip(l)
        .map(|(a, b)| {
            let mut z = Vector::zeros(a.len() + b.len());
            z.slice_mut(s![..a.len()]).assign(a);
            z.slice_mut(s![a.len()..]).assign(b);
            z
        })
        .collect()
}

fn split(z: &[Vector], n: usize) -> (Vec<Vector>, Vec<Vector>) {
    let x = z.iter().map(|zi| zi.slice(s![..n]).to_owned()).collect();
    let l = z.iter().map(|zi| zi.slice(s![n..]).to_owned()).collect();
    (x, l)
}

/// Inserts midpoints in the selected intervals, guessed by cubic Hermite
/// interpolation of the node values and slopes.
fn bisect(pmp: &Pmp, t: &[f64], z: &[Vector], which: &[bool]) -> (Vec<f64>, Vec<Vector>) {
    let n = pmp.n;
    let mut nt = Vec::with_capacity(t.len() * 2);
    let mut nz = Vec::with_capacity(t.len() * 2);
    for i in 0..t.len() {
        nt.push(t[i]);
        nz.push(z[i].clone());
        if i + 1 < t.len() && which[i] {
            let h = t[i + 1] - t[i];
            let f0 = pmp.rhs(z[i].slice(s![..n]), z[i].slice(s![n..])).0;
            let f1 = pmp.rhs(z[i + 1].slice(s![..n]), z[i + 1].slice(s![n..])).0;
            let mid = (&z[i] + &z[i + 1]) * 0.5 + (&f0 - &f1) * (h / 8.0);
            nt.push(t[i] + 0.5 * h);
            nz.push(mid);
        }
    }
    (nt, nz)
}

fn node_hamiltonians(pmp: &Pmp, z: &[Vector]) -> Vec<f64> {
    let n = pmp.n;
    let p = pmp.problem;
    z.iter()
        .map(|zi| {
            let (x, l) = (zi.slice(s![..n]), zi.slice(s![n..]));
            let u = pmp.control(x, l);
            dynamics::running_cost_unchecked(p, x, u.view()) + l.dot(&p.dynamics(x, u.view()))
        })
        .collect()
}

fn assemble(pmp: &Pmp, t: Vec<f64>, z: &[Vector], residual: f64, converged: bool, lqr_cost: f64) -> OpenLoopSolution {
    let n = pmp.n;
    let (xs, ls) = split(z, n);
    let (v, us) = value_to_go(pmp, &t, &xs, &ls);
    let h = node_hamiltonians(pmp, z);
    let max_h = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let to_mat = |rows: &[Vector]| -> Matrix {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut m = Array2::zeros((rows.len(), cols));
        for (i, r) in rows.iter().enumerate() {
            m.row_mut(i).assign(r);
        }
        m
    };
    let suspicious = v[0] > lqr_cost * (1.0 + 1e-6) + 1e-12;
    if suspicious {
        log::warn!("BVP value {} exceeds LQR closed-loop cost {}", v[0], lqr_cost);
    }
    OpenLoopSolution {
        x: to_mat(&xs),
        lambda: to_mat(&ls),
        u: to_mat(&us),
        v,
        t,
        converged,
        residual,
        max_hamiltonian: max_h,
        suspicious,
        value_extrapolated: None,
    }
}

/// Solves the Pontryagin BVP from `x0`.
pub fn solve_pmp(
    problem: &dyn ControlProblem,
    lqr: &RiccatiSolution,
    x0: ArrayView1<f64>,
    cfg: &BvpConfig,
) -> Result<OpenLoopSolution, BvpError> {
    cfg.validate()?;
    let pmp = Pmp::new(problem, lqr)?;
    let n = pmp.n;
    if x0.len() != n || !x0.iter().all(|v| v.is_finite()) {
        return Err(DynamicsError::DimensionMismatch { what: "initial state", expected: n, got: x0.len() }.into());
    }
    let xf = problem.goal_state();
    if linalg::vec_norm((&x0 - xf).view()) == 0.0 {
        let z = vec![join(&[x0.to_owned()], &[Vector::zeros(n)])[0].clone(); 2];
        return Ok(assemble(&pmp, vec![0.0, cfg.horizons[0]], &z, 0.0, true, 0.0));
    }

    let mut prev: Option<(Vec<f64>, Vec<Vector>)> = None;
    let mut lqr_cost = f64::INFINITY;
    let mut last: Option<OpenLoopSolution> = None;
    for &t_f in &cfg.horizons {
        // warm start: previous rung's solution, extended with the LQR flow
        let (mut t, mut z) = match &prev {
            None => {
                let mesh = cfg.mesh(t_f);
                let g = lqr_warm_start(problem, lqr, x0, &mesh, cfg.divergence_cap)?;
                lqr_cost = g.lqr_cost;
                (mesh, join(&g.x, &g.lambda))
            }
            Some((pt, pz)) => {
                let t_old = *pt.last().expect("non-empty");
                let full = cfg.mesh(t_f);
                let h_last = pt[pt.len() - 1] - pt[pt.len() - 2];
                let mut tail: Vec<f64> = full.into_iter().filter(|&s| s > t_old + 0.5 * h_last).collect();
                if tail.last() != Some(&t_f) {
                    tail.push(t_f);
                }
                let mut mesh = vec![0.0];
                mesh.extend(tail.iter().map(|s| s - t_old));
                let x_end = pz.last().expect("non-empty").slice(s![..n]).to_owned();
                let g = lqr_warm_start(problem, lqr, x_end.view(), &mesh, cfg.divergence_cap)?;
                let mut t = pt.clone();
                let mut z = pz.clone();
                let gz = join(&g.x, &g.lambda);
                for (s, zz) in mesh.iter().zip(gz).skip(1) {
                    t.push(t_old + s);
                    z.push(zz);
                }
                (t, z)
            }
        };
        let mut outcome = newton(&pmp, &t, z.clone(), x0, cfg)?;
        let mut doublings = 0;
        while !outcome.converged && doublings < cfg.max_mesh_doublings {
            doublings += 1;
            let all = vec![true; t.len() - 1];
            let (nt, nz) = bisect(&pmp, &t, &z, &all);
            if nt.len() > cfg.max_nodes {
                return Err(BvpError::MeshTooLarge(cfg.max_nodes));
            }
            t = nt;
            z = nz;
            outcome = newton(&pmp, &t, z.clone(), x0, cfg)?;
        }
        if !outcome.converged {
            log::debug!("Newton failed on horizon {t_f} (residual {:e})", outcome.residual);
            last = Some(assemble(&pmp, t, &outcome.z, outcome.residual, false, lqr_cost));
            prev = None;
            continue;
        }
        z = outcome.z;
        let mut res = outcome.residual;
        // Hamiltonian-driven refinement
        let mut h_ok = false;
        for _ in 0..=cfg.max_refinements {
            let hs = node_hamiltonians(&pmp, &z);
            let max_h = hs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if max_h <= cfg.hamiltonian_tol {
                h_ok = true;
                break;
            }
            let flag: Vec<bool> = (0..t.len() - 1).map(|i| hs[i].abs().max(hs[i + 1].abs()) > 0.25 * cfg.hamiltonian_tol).collect();
            let (nt, nz) = bisect(&pmp, &t, &z, &flag);
            if nt.len() > cfg.max_nodes {
                return Err(BvpError::MeshTooLarge(cfg.max_nodes));
            }
            let o = newton(&pmp, &nt, nz, x0, cfg)?;
            if !o.converged {
                break;
            }
            t = nt;
            z = o.z;
            res = o.residual;
        }
        let x_end = z.last().expect("non-empty").slice(s![..n]).to_owned();
        let l_end = z.last().expect("non-empty").slice(s![n..]).to_owned();
        let state_ok = linalg::vec_norm((&x_end - xf).view()) <= cfg.terminal_state_tol;
        let costate_ok = linalg::vec_norm(l_end.view()) <= cfg.terminal_costate_tol;
        let mut sol = assemble(&pmp, t.clone(), &z, res, h_ok && state_ok && costate_ok, lqr_cost);
        if sol.converged {
            if cfg.richardson {
                sol.value_extrapolated = extrapolated_value(&pmp, &t, &z, x0, cfg, sol.v[0])?;
            }
            return Ok(sol);
        }
        last = Some(sol);
        prev = Some((t, z));
    }
    Ok(last.expect("ladder is non-empty"))
}

/// `(4 V_{h/2} − V_h)/3` at `t = 0`, removing the leading `O(h²)` term of
/// the trapezoidal discretization. `None` if the bisected solve fails.
fn extrapolated_value(
    pmp: &Pmp,
    t: &[f64],
    z: &[Vector],
    x0: ArrayView1<f64>,
    cfg: &BvpConfig,
    coarse: f64,
) -> Result<Option<f64>, BvpError> {
    let all = vec![true; t.len() - 1];
    let (nt, nz) = bisect(pmp, t, z, &all);
    if nt.len() > cfg.max_nodes {
        return Ok(None);
    }
    let o = newton(pmp, &nt, nz, x0, cfg)?;
    if !o.converged {
        return Ok(None);
    }
    let n = pmp.n;
    let (xs, ls) = split(&o.z, n);
    let (v, _) = value_to_go(pmp, &nt, &xs, &ls);
    Ok(Some((4.0 * v[0] - coarse) / 3.0))
}

/// Largest trapezoidal defect of the costate equation over all intervals.
pub fn costate_residual(problem: &dyn ControlProblem, lqr: &RiccatiSolution, sol: &OpenLoopSolution) -> Result<f64, BvpError> {
    let pmp = Pmp::new(problem, lqr)?;
    let n = pmp.n;
    let mut worst = 0.0f64;
    let g: Vec<Vector> = (0..sol.len()).map(|i| pmp.rhs(sol.x.row(i), sol.lambda.row(i)).0.slice(s![n..]).to_owned()).collect();
    for i in 0..sol.len().saturating_sub(1) {
        let h = sol.t[i + 1] - sol.t[i];
        let d = &sol.lambda.row(i + 1) - &sol.lambda.row(i) - &((&g[i] + &g[i + 1]) * (0.5 * h));
        worst = worst.max(linalg::vec_inf_norm(d.view()));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{BurgersConfig, BurgersProblem, LinearQuadraticProblem};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar() -> (LinearQuadraticProblem, RiccatiSolution) {
        let p = LinearQuadraticProblem::new(array![[1.0]], array![[1.0]], array![[1.0]], array![[1.0]]).unwrap();
        let s = RiccatiSolution::for_problem(&p).unwrap();
        (p, s)
    }

    #[test]
    fn mesh_is_increasing_and_ends_at_horizon() {
        let cfg = BvpConfig::default();
        let m = cfg.mesh(8.0);
        assert_eq!(m[0], 0.0);
        assert_eq!(*m.last().unwrap(), 8.0);
        assert!(m.windows(2).all(|w| w[1] > w[0]));
        assert!(BvpConfig { horizons: vec![4.0, 2.0], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn trivial_solution_at_goal() {
        let (p, s) = scalar();
        let sol = solve_pmp(&p, &s, array![0.0].view(), &BvpConfig::default()).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.value(), 0.0);
        assert_eq!(costate_residual(&p, &s, &sol).unwrap(), 0.0);
    }

    #[test]
    fn warm_start_is_exact_for_lq() {
        let (p, s) = scalar();
        let g = lqr_warm_start(&p, &s, array![0.0].view(), &[0.0, 1.0, 2.0], 1e3).unwrap();
        assert!(g.x.iter().all(|x| x[0] == 0.0));
        let cfg = BvpConfig::default();
        let mesh = cfg.mesh(8.0);
        let g = lqr_warm_start(&p, &s, array![1.0].view(), &mesh, 1e3).unwrap();
        let pmp = Pmp::new(&p, &s).unwrap();
        let z = join(&g.x, &g.lambda);
        let rhs: Vec<Vector> = z.iter().map(|zi| pmp.rhs(zi.slice(s![..1]), zi.slice(s![1..])).0).collect();
        let r = residual(&pmp, &mesh, &z, array![1.0].view(), &rhs);
        assert!(linalg::vec_inf_norm(r.view()) <= 1e-6);
    }

    #[test]
    fn scalar_lq_value_and_costate() {
        let (p, s) = scalar();
        let sol = solve_pmp(&p, &s, array![1.0].view(), &BvpConfig::default()).unwrap();
        assert!(sol.converged);
        let pv = 1.0 + std::f64::consts::SQRT_2;
        assert!((sol.value() - pv).abs() < 1e-5, "{}", sol.value());
        let plain = solve_pmp(&p, &s, array![1.0].view(), &BvpConfig { richardson: false, ..Default::default() }).unwrap();
        assert!(plain.value_extrapolated.is_none());
        assert!((plain.value() - sol.value()).abs() > (sol.value() - pv).abs());
        assert!((sol.lambda[[0, 0]] - 2.0 * pv).abs() < 1e-4);
        assert!(sol.v.windows(2).into_iter().all(|w| w[1] <= w[0] + 1e-15));
        assert!(costate_residual(&p, &s, &sol).unwrap() <= 1e-9);
    }

    #[test]
    fn costate_residual_detects_perturbation() {
        let (p, s) = scalar();
        let mut sol = solve_pmp(&p, &s, array![1.0].view(), &BvpConfig::default()).unwrap();
        let base = costate_residual(&p, &s, &sol).unwrap();
        sol.lambda[[3, 0]] += 0.1;
        assert!(costate_residual(&p, &s, &sol).unwrap() > base);
    }

    #[test]
    fn bounded_scalar_problem_converges() {
        let p = LinearQuadraticProblem::new(array![[1.0]], array![[1.0]], array![[1.0]], array![[1.0]])
            .unwrap()
            .with_bounds(array![-1.5], array![1.5])
            .unwrap();
        let s = RiccatiSolution::for_problem(&p).unwrap();
        let sol = solve_pmp(&p, &s, array![0.9].view(), &BvpConfig::default()).unwrap();
        assert!(sol.converged);
        assert!(sol.u.iter().all(|&u| (-1.5..=1.5).contains(&u)));
        assert!(sol.max_hamiltonian <= 1e-4);
        // saturated control costs more than the unconstrained LQR value
        assert!(sol.value() > 0.81 * (1.0 + std::f64::consts::SQRT_2));
    }

    #[test]
    fn burgers_hamiltonian_is_small() {
        let prob = BurgersProblem::new(BurgersConfig::default()).unwrap();
        let s = RiccatiSolution::for_problem(&prob).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = prob.sample_direction(&mut rng);
        let x0 = &d * (1.2 / linalg::vec_norm(d.view()));
        let sol = solve_pmp(&prob, &s, x0.view(), &BvpConfig::default()).unwrap();
        assert!(sol.converged, "residual {} H {}", sol.residual, sol.max_hamiltonian);
        assert!(sol.max_hamiltonian <= 1e-4);
        assert!(!sol.suspicious);
        let _ = rng.random::<u8>();
    }
}

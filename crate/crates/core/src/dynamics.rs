//! Optimal control problem interface, the Chebyshev-collocated Burgers
//! benchmark, a generic linear-quadratic problem, and the Hamiltonian
//! machinery shared by the BVP solver and the controllers.

use std::path::Path;

use ndarray::{s, Array1, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Matrix, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("unsupported problem: {0}")]
    Unsupported(String),
    #[error("invalid problem configuration: {0}")]
    Config(String),
    #[error("analytic Jacobian disagrees with finite differences (relative error {0:e})")]
    JacobianMismatch(f64),
}

/// Infinite-horizon OCP with quadratic cost around `(x_f, u_f)`:
/// minimize the integral of `q(x - x_f) + (u - u_f)ᵀR(u - u_f)` subject to
/// `ẋ = f(x, u)` and `u` in a box.
pub trait ControlProblem: Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn goal_state(&self) -> &Vector;
    fn goal_control(&self) -> &Vector;
    /// Lower control bounds; `-inf` where unbounded.
    fn control_lower(&self) -> &Vector;
    /// Upper control bounds; `+inf` where unbounded.
    fn control_upper(&self) -> &Vector;
    /// Hessian of the state cost at the goal.
    fn q_matrix(&self) -> &Matrix;
    fn r_matrix(&self) -> &Matrix;

    fn dynamics(&self, x: ArrayView1<f64>, u: ArrayView1<f64>) -> Vector;
    fn jacobian_x(&self, x: ArrayView1<f64>, u: ArrayView1<f64>) -> Matrix;
    fn jacobian_u(&self, x: ArrayView1<f64>, u: ArrayView1<f64>) -> Matrix;

    /// Whether `f` is affine in `u` (required by Hamiltonian minimization).
    fn is_control_affine(&self) -> bool {
        true
    }

    /// State cost `q(x - x_f)`; quadratic in `Q` unless overridden.
    fn state_cost(&self, x: ArrayView1<f64>) -> f64 {
        let dx = &x - self.goal_state();
        dx.dot(&self.q_matrix().dot(&dx))
    }

    fn state_cost_grad(&self, x: ArrayView1<f64>) -> Vector {
        let dx = &x - self.goal_state();
        2.0 * self.q_matrix().dot(&dx)
    }

    fn state_cost_hessian(&self, _x: ArrayView1<f64>) -> Matrix {
        2.0 * self.q_matrix()
    }

    /// `∂(f_xᵀλ)/∂x = Σ_i λ_i ∇²f_i` at fixed `u`. Defaults to central
    /// differences of `jacobian_x`.
    fn costate_curvature(&self, x: ArrayView1<f64>, u: ArrayView1<f64>, lambda: ArrayView1<f64>) -> Matrix {
        let n = self.state_dim();
        let mut out = Matrix::zeros((n, n));
        let mut xp = x.to_owned();
        for j in 0..n {
            let h = 1e-6 * (1.0 + x[j].abs());
            xp[j] = x[j] + h;
            let gp = self.jacobian_x(xp.view(), u).t().dot(&lambda);
            xp[j] = x[j] - h;
            let gm = self.jacobian_x(xp.view(), u).t().dot(&lambda);
            xp[j] = x[j];
            out.column_mut(j).assign(&((gp - gm) / (2.0 * h)));
        }
        out
    }

    /// `∂(f_uᵀλ)/∂x` (m×n). Zero when the input matrix is constant.
    fn input_coupling(&self, x: ArrayView1<f64>, u: ArrayView1<f64>, lambda: ArrayView1<f64>) -> Matrix {
        let (n, m) = (self.state_dim(), self.control_dim());
        let mut out = Matrix::zeros((m, n));
        let mut xp = x.to_owned();
        for j in 0..n {
            let h = 1e-6 * (1.0 + x[j].abs());
            xp[j] = x[j] + h;
            let gp = self.jacobian_u(xp.view(), u).t().dot(&lambda);
            xp[j] = x[j] - h;
            let gm = self.jacobian_u(xp.view(), u).t().dot(&lambda);
            xp[j] = x[j];
            out.column_mut(j).assign(&((gp - gm) / (2.0 * h)));
        }
        out
    }

    /// Random direction used to draw initial conditions (normalized by the
    /// caller). Isotropic Gaussian unless the problem has a preferred basis.
    fn sample_direction(&self, rng: &mut dyn rand::RngCore) -> Vector {
        (0..self.state_dim()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    /// Dimension of the space `sample_direction` draws from, used to make
    /// ball sampling uniform.
    fn sampling_dimension(&self) -> usize {
        self.state_dim()
    }

    fn has_bounds(&self) -> bool {
        self.control_lower().iter().any(|v| v.is_finite()) || self.control_upper().iter().any(|v| v.is_finite())
    }
}

fn check_len(what: &'static str, v: ArrayView1<f64>, expected: usize) -> Result<(), DynamicsError> {
    if v.len() != expected {
        return Err(DynamicsError::DimensionMismatch { what, expected, got: v.len() });
    }
    if !v.iter().all(|a| a.is_finite()) {
        return Err(DynamicsError::NonFinite(what));
    }
    Ok(())
}

pub fn eval_dynamics(p: &dyn ControlProblem, x: ArrayView1<f64>, u: ArrayView1<f64>) -> Result<Vector, DynamicsError> {
    check_len("state", x, p.state_dim())?;
    check_len("control", u, p.control_dim())?;
    Ok(p.dynamics(x, u))
}

/// `q(x - x_f) + (u - u_f)ᵀR(u - u_f)` without dimension checks.
pub fn running_cost_unchecked(p: &dyn ControlProblem, x: ArrayView1<f64>, u: ArrayView1<f64>) -> f64 {
    let du = &u - p.goal_control();
    p.state_cost(x) + du.dot(&p.r_matrix().dot(&du))
}

pub fn running_cost(p: &dyn ControlProblem, x: ArrayView1<f64>, u: ArrayView1<f64>) -> Result<f64, DynamicsError> {
    check_len("state", x, p.state_dim())?;
    check_len("control", u, p.control_dim())?;
    Ok(running_cost_unchecked(p, x, u))
}

pub fn hamiltonian(p: &dyn ControlProblem, x: ArrayView1<f64>, lambda: ArrayView1<f64>, u: ArrayView1<f64>) -> Result<f64, DynamicsError> {
    check_len("costate", lambda, p.state_dim())?;
    let l = running_cost(p, x, u)?;
    Ok(l + lambda.dot(&p.dynamics(x, u)))
}

/// Checks the assumptions under which the clamped stationary point is the
/// exact minimizer of the Hamiltonian over the control box.
pub fn check_minimizable(p: &dyn ControlProblem) -> Result<(), DynamicsError> {
    if !p.is_control_affine() {
        return Err(DynamicsError::Unsupported("Hamiltonian minimization requires control-affine dynamics".into()));
    }
    if p.has_bounds() && !linalg::is_diagonal(p.r_matrix().view()) {
        return Err(DynamicsError::Unsupported("box-constrained Hamiltonian minimization requires a diagonal R".into()));
    }
    Ok(())
}

/// Precomputed data for repeated Hamiltonian minimization.
#[derive(Debug, Clone)]
pub struct HamiltonianMinimizer {
    r_inv: Matrix,
}

impl HamiltonianMinimizer {
    pub fn new(p: &dyn ControlProblem) -> Result<Self, DynamicsError> {
        check_minimizable(p)?;
        let r_inv = linalg::inverse(p.r_matrix().view()).map_err(|e| DynamicsError::Config(format!("R is not invertible: {e}")))?;
        Ok(Self { r_inv })
    }

    pub fn r_inv(&self) -> &Matrix {
        &self.r_inv
    }

    /// Unclamped stationary point `u_f - ½R⁻¹f_uᵀλ` with `f_u` taken at `u_f`.
    pub fn stationary(&self, p: &dyn ControlProblem, x: ArrayView1<f64>, lambda: ArrayView1<f64>) -> Vector {
        let fu = p.jacobian_u(x, p.goal_control().view());
        p.goal_control() - &(0.5 * self.r_inv.dot(&fu.t().dot(&lambda)))
    }

    pub fn minimize(&self, p: &dyn ControlProblem, x: ArrayView1<f64>, lambda: ArrayView1<f64>) -> Vector {
        clamp_control(p, self.stationary(p, x, lambda))
    }
}

pub fn clamp_control(p: &dyn ControlProblem, mut u: Vector) -> Vector {
    let (lo, hi) = (p.control_lower(), p.control_upper());
    for i in 0..u.len() {
        u[i] = u[i].clamp(lo[i], hi[i]);
    }
    u
}

/// Per-component mask: 1 where the box constraint is inactive, 0 where the
/// stationary point was clamped.
pub fn active_mask(p: &dyn ControlProblem, unclamped: ArrayView1<f64>) -> Vector {
    let (lo, hi) = (p.control_lower(), p.control_upper());
    unclamped.iter().enumerate().map(|(i, &v)| if v <= lo[i] || v >= hi[i] { 0.0 } else { 1.0 }).collect()
}

pub fn minimize_hamiltonian(p: &dyn ControlProblem, x: ArrayView1<f64>, lambda: ArrayView1<f64>) -> Result<Vector, DynamicsError> {
    check_len("state", x, p.state_dim())?;
    check_len("costate", lambda, p.state_dim())?;
    Ok(HamiltonianMinimizer::new(p)?.minimize(p, x, lambda))
}

/// Jacobians `(A, B)` at the goal, validated against central differences.
pub fn linearize(p: &dyn ControlProblem) -> Result<(Matrix, Matrix), DynamicsError> {
    let (xf, uf) = (p.goal_state().view(), p.goal_control().view());
    let a = p.jacobian_x(xf, uf);
    let b = p.jacobian_u(xf, uf);
    let (a_fd, b_fd) = finite_difference_jacobians(p, xf, uf);
    let err_a = relative_error(&a, &a_fd);
    let err_b = relative_error(&b, &b_fd);
    let err = err_a.max(err_b);
    if err > 1e-6 {
        return Err(DynamicsError::JacobianMismatch(err));
    }
    Ok((a, b))
}

fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff = linalg::frobenius_norm((a - b).view());
    diff / linalg::frobenius_norm(b.view()).max(1.0)
}

/// Central-difference Jacobians of `f` with step `1e-6·(1+|x_j|)`.
pub fn finite_difference_jacobians(p: &dyn ControlProblem, x: ArrayView1<f64>, u: ArrayView1<f64>) -> (Matrix, Matrix) {
    let (n, m) = (p.state_dim(), p.control_dim());
    let mut a = Matrix::zeros((n, n));
    let mut xp = x.to_owned();
    for j in 0..n {
        let h = 1e-6 * (1.0 + x[j].abs());
        xp[j] = x[j] + h;
        let fp = p.dynamics(xp.view(), u);
        xp[j] = x[j] - h;
        let fm = p.dynamics(xp.view(), u);
        xp[j] = x[j];
        a.column_mut(j).assign(&((fp - fm) / (2.0 * h)));
    }
    let mut b = Matrix::zeros((n, m));
    let mut up = u.to_owned();
    for j in 0..m {
        let h = 1e-6 * (1.0 + u[j].abs());
        up[j] = u[j] + h;
        let fp = p.dynamics(x, up.view());
        up[j] = u[j] - h;
        let fm = p.dynamics(x, up.view());
        up[j] = u[j];
        b.column_mut(j).assign(&((fp - fm) / (2.0 * h)));
    }
    (a, b)
}

/// Chebyshev–Gauss–Lobatto nodes `cos(jπ/N)` and the collocation
/// differentiation matrix on them.
pub fn chebyshev_diff_matrix(n: usize) -> Result<(Vector, Matrix), DynamicsError> {
    if n == 0 {
        return Err(DynamicsError::Config("Chebyshev node count must be at least 1".into()));
    }
    let nodes: Vector = (0..=n).map(|j| (std::f64::consts::PI * j as f64 / n as f64).cos()).collect();
    let c = |i: usize| -> f64 {
        let base = if i == 0 || i == n { 2.0 } else { 1.0 };
        if i.is_multiple_of(2) {
            base
        } else {
            -base
        }
    };
    let mut d = Matrix::zeros((n + 1, n + 1));
    for i in 0..=n {
        for j in 0..=n {
            if i != j {
                d[[i, j]] = c(i) / c(j) / (nodes[i] - nodes[j]);
            }
        }
    }
    for i in 0..=n {
        let s: f64 = d.row(i).sum();
        d[[i, i]] = -s;
    }
    Ok((nodes, d))
}

fn default_viscosity() -> f64 {
    0.2
}
fn default_beta() -> f64 {
    0.1
}
fn default_alpha0() -> f64 {
    1.5
}
fn default_actuators() -> Vec<[f64; 2]> {
    vec![[-0.6, -0.2], [0.2, 0.6]]
}
fn default_one() -> f64 {
    1.0
}
fn default_nodes() -> usize {
    16
}

/// Configuration of the Burgers benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BurgersConfig {
    /// Number of interior collocation nodes (the state dimension).
    #[serde(default = "default_nodes")]
    pub interior_nodes: usize,
    #[serde(default = "default_viscosity")]
    pub viscosity: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_alpha0")]
    pub alpha0: f64,
    /// Actuator supports on `[-1, 1]`; one control per interval.
    #[serde(default = "default_actuators")]
    pub actuators: Vec<[f64; 2]>,
    /// Value of the actuator indicator functions.
    #[serde(default = "default_one")]
    pub actuator_gain: f64,
    /// State cost weight; `Q = q_weight · w_i` with Clenshaw–Curtis-like
    /// weights `w_i = 2/(n+1)` when `quadrature_weighted_q` is set.
    #[serde(default = "default_one")]
    pub q_weight: f64,
    #[serde(default = "default_true")]
    pub quadrature_weighted_q: bool,
    #[serde(default = "default_r_weight")]
    pub r_weight: f64,
    #[serde(default)]
    pub u_min: Option<Vec<f64>>,
    #[serde(default)]
    pub u_max: Option<Vec<f64>>,
}

fn default_true() -> bool {
    true
}
fn default_r_weight() -> f64 {
    0.5
}

impl Default for BurgersConfig {
    fn default() -> Self {
        Self {
            interior_nodes: default_nodes(),
            viscosity: default_viscosity(),
            beta: default_beta(),
            alpha0: default_alpha0(),
            actuators: default_actuators(),
            actuator_gain: 1.0,
            q_weight: 1.0,
            quadrature_weighted_q: true,
            r_weight: default_r_weight(),
            u_min: None,
            u_max: None,
        }
    }
}

/// Unstable Burgers-type PDE on `[-1, 1]` with homogeneous Dirichlet
/// boundaries, collocated on the interior Chebyshev nodes:
/// `ẋ = -½D(x∘x) + νD²x + α∘x∘e^{-βx} + Bu`.
#[derive(Debug, Clone)]
pub struct BurgersProblem {
    config: BurgersConfig,
    nodes: Vector,
    d: Matrix,
    d2: Matrix,
    alpha: Vector,
    b: Matrix,
    q: Matrix,
    r: Matrix,
    x_goal: Vector,
    u_goal: Vector,
    u_lower: Vector,
    u_upper: Vector,
}

impl BurgersProblem {
    pub fn new(config: BurgersConfig) -> Result<Self, DynamicsError> {
        let n = config.interior_nodes;
        if n < 2 {
            return Err(DynamicsError::Config("interior_nodes must be at least 2".into()));
        }
        if !(config.viscosity > 0.0) || !(config.beta > 0.0) {
            return Err(DynamicsError::Config("viscosity and beta must be positive".into()));
        }
        if config.actuators.is_empty() {
            return Err(DynamicsError::Config("at least one actuator interval is required".into()));
        }
        if !(config.q_weight > 0.0) || !(config.r_weight > 0.0) {
            return Err(DynamicsError::Config("q_weight and r_weight must be positive".into()));
        }
        let (full_nodes, full_d) = chebyshev_diff_matrix(n + 1)?;
        let d2_full = full_d.dot(&full_d);
        let interior = s![1..=n, 1..=n];
        let d = full_d.slice(interior).to_owned();
        let d2 = d2_full.slice(interior).to_owned();
        let nodes = full_nodes.slice(s![1..=n]).to_owned();
        let alpha = nodes.mapv(|xi| config.alpha0 * (1.0 + (std::f64::consts::PI * xi).sin()));
        let m = config.actuators.len();
        let mut b = Matrix::zeros((n, m));
        for (k, iv) in config.actuators.iter().enumerate() {
            let (lo, hi) = (iv[0].min(iv[1]), iv[0].max(iv[1]));
            let mut any = false;
            for i in 0..n {
                if nodes[i] >= lo && nodes[i] <= hi {
                    b[[i, k]] = config.actuator_gain;
                    any = true;
                }
            }
            if !any {
                return Err(DynamicsError::Config(format!("actuator interval [{lo}, {hi}] contains no collocation node")));
            }
        }
        let qw = if config.quadrature_weighted_q { config.q_weight * 2.0 / (n as f64 + 1.0) } else { config.q_weight };
        let q = Matrix::eye(n) * qw;
        let r = Matrix::eye(m) * config.r_weight;
        let (u_lower, u_upper) = bounds_from(m, config.u_min.as_deref(), config.u_max.as_deref())?;
        let u_goal = Vector::zeros(m);
        check_goal_inside(&u_goal, &u_lower, &u_upper)?;
        Ok(Self { config, nodes, d, d2, alpha, b, q, r, x_goal: Vector::zeros(n), u_goal, u_lower, u_upper })
    }

    pub fn config(&self) -> &BurgersConfig {
        &self.config
    }

    /// Interior collocation nodes.
    pub fn nodes(&self) -> &Vector {
        &self.nodes
    }

    /// Interior block of the first-derivative matrix.
    pub fn d_interior(&self) -> &Matrix {
        &self.d
    }

    /// Interior block of the squared full differentiation matrix.
    pub fn d2_interior(&self) -> &Matrix {
        &self.d2
    }

    pub fn alpha(&self) -> &Vector {
        &self.alpha
    }

    pub fn input_matrix(&self) -> &Matrix {
        &self.b
    }

    pub fn viscosity(&self) -> f64 {
        self.config.viscosity
    }

    pub fn beta(&self) -> f64 {
        self.config.beta
    }
}

fn bounds_from(m: usize, lo: Option<&[f64]>, hi: Option<&[f64]>) -> Result<(Vector, Vector), DynamicsError> {
    let build = |v: Option<&[f64]>, fill: f64, what: &str| -> Result<Vector, DynamicsError> {
        match v {
            None => Ok(Vector::from_elem(m, fill)),
            Some(v) if v.len() == m => Ok(Array1::from(v.to_vec())),
            Some(v) => Err(DynamicsError::Config(format!("{what} has {} entries, expected {m}", v.len()))),
        }
    };
    let lower = build(lo, f64::NEG_INFINITY, "u_min")?;
    let upper = build(hi, f64::INFINITY, "u_max")?;
    Ok((lower, upper))
}

fn check_goal_inside(uf: &Vector, lo: &Vector, hi: &Vector) -> Result<(), DynamicsError> {
    for i in 0..uf.len() {
        if !(lo[i] < uf[i] && uf[i] < hi[i]) {
            return Err(DynamicsError::Config(format!(
                "goal control component {i} ({}) is not strictly inside [{}, {}]",
                uf[i], lo[i], hi[i]
            )));
        }
    }
    Ok(())
}

impl ControlProblem for BurgersProblem {
    fn name(&self) -> &str {
        "burgers"
    }
    fn state_dim(&self) -> usize {
        self.nodes.len()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn goal_state(&self) -> &Vector {
        &self.x_goal
    }
    fn goal_control(&self) -> &Vector {
        &self.u_goal
    }
    fn control_lower(&self) -> &Vector {
        &self.u_lower
    }
    fn control_upper(&self) -> &Vector {
        &self.u_upper
    }
    fn q_matrix(&self) -> &Matrix {
        &self.q
    }
    fn r_matrix(&self) -> &Matrix {
        &self.r
    }

    fn dynamics(&self, x: ArrayView1<f64>, u: ArrayView1<f64>) -> Vector {
        let beta = self.config.beta;
        let sq = x.mapv(|v| v * v);
        let mut f = self.d.dot(&sq) * -0.5;
        f += &(self.d2.dot(&x) * self.config.viscosity);
        for i in 0..x.len() {
            f[i] += self.alpha[i] * x[i] * (-beta * x[i]).exp();
        }
        f += &self.b.dot(&u);
        f
    }

    fn jacobian_x(&self, x: ArrayView1<f64>, _u: ArrayView1<f64>) -> Matrix {
        let beta = self.config.beta;
        let mut j = &self.d2 * self.config.viscosity;
        for (col, mut c) in j.axis_iter_mut(Axis(1)).enumerate() {
            c.scaled_add(-x[col], &self.d.column(col));
        }
        for i in 0..x.len() {
            j[[i, i]] += self.alpha[i] * (-beta * x[i]).exp() * (1.0 - beta * x[i]);
        }
        j
    }

    fn jacobian_u(&self, _x: ArrayView1<f64>, _u: ArrayView1<f64>) -> Matrix {
        self.b.clone()
    }

    fn costate_curvature(&self, x: ArrayView1<f64>, _u: ArrayView1<f64>, lambda: ArrayView1<f64>) -> Matrix {
        let beta = self.config.beta;
        let dtl = self.d.t().dot(&lambda);
        let n = x.len();
        let mut c = Matrix::zeros((n, n));
        for k in 0..n {
            c[[k, k]] = -dtl[k] + lambda[k] * self.alpha[k] * (-beta * x[k]).exp() * (beta * beta * x[k] - 2.0 * beta);
        }
        c
    }

    fn input_coupling(&self, _x: ArrayView1<f64>, _u: ArrayView1<f64>, _lambda: ArrayView1<f64>) -> Matrix {
        Matrix::zeros((self.control_dim(), self.state_dim()))
    }

    fn sampling_dimension(&self) -> usize {
        4
    }

    /// Random combination `Σ c_j (1-ξ²) T_{j-1}(ξ)` of the first four
    /// boundary-vanishing Chebyshev modes, `c ~ U[-1, 1]⁴`.
    fn sample_direction(&self, rng: &mut dyn rand::RngCore) -> Vector {
        let c: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
        self.nodes.mapv(|xi| {
            let t = [1.0, xi, 2.0 * xi * xi - 1.0, 4.0 * xi * xi * xi - 3.0 * xi];
            (1.0 - xi * xi) * c.iter().zip(t.iter()).map(|(a, b)| a * b).sum::<f64>()
        })
    }
}

/// Configuration of a linear-quadratic problem `ẋ = A(x - x_f) + B(u - u_f)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearConfig {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    #[serde(default)]
    pub x_goal: Option<Vec<f64>>,
    #[serde(default)]
    pub u_goal: Option<Vec<f64>>,
    #[serde(default)]
    pub u_min: Option<Vec<f64>>,
    #[serde(default)]
    pub u_max: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct LinearQuadraticProblem {
    a: Matrix,
    b: Matrix,
    q: Matrix,
    r: Matrix,
    x_goal: Vector,
    u_goal: Vector,
    u_lower: Vector,
    u_upper: Vector,
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<Matrix, DynamicsError> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(DynamicsError::Config(format!("{what} must be a non-empty rectangular matrix")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(DynamicsError::Config(format!("{what} has non-finite entries")));
    }
    Ok(Matrix::from_shape_vec((r, c), flat).expect("shape checked"))
}

impl LinearQuadraticProblem {
    pub fn new(a: Matrix, b: Matrix, q: Matrix, r: Matrix) -> Result<Self, DynamicsError> {
        let (n, m) = (a.nrows(), b.ncols());
        Self::with_goal(a, b, q, r, Vector::zeros(n), Vector::zeros(m))
    }

    pub fn with_goal(a: Matrix, b: Matrix, q: Matrix, r: Matrix, x_goal: Vector, u_goal: Vector) -> Result<Self, DynamicsError> {
        let n = a.nrows();
        let m = b.ncols();
        if a.ncols() != n || b.nrows() != n || q.dim() != (n, n) || r.dim() != (m, m) {
            return Err(DynamicsError::Config("inconsistent A, B, Q, R shapes".into()));
        }
        if x_goal.len() != n || u_goal.len() != m {
            return Err(DynamicsError::Config("goal dimensions do not match A and B".into()));
        }
        check_cost_matrices(&q, &r)?;
        Ok(Self {
            a,
            b,
            q,
            r,
            x_goal,
            u_goal,
            u_lower: Vector::from_elem(m, f64::NEG_INFINITY),
            u_upper: Vector::from_elem(m, f64::INFINITY),
        })
    }

    pub fn with_bounds(mut self, lower: Vector, upper: Vector) -> Result<Self, DynamicsError> {
        if lower.len() != self.u_goal.len() || upper.len() != self.u_goal.len() {
            return Err(DynamicsError::Config("bound dimensions do not match B".into()));
        }
        check_goal_inside(&self.u_goal, &lower, &upper)?;
        self.u_lower = lower;
        self.u_upper = upper;
        Ok(self)
    }

    pub fn from_config(cfg: &LinearConfig) -> Result<Self, DynamicsError> {
        let a = matrix_from_rows(&cfg.a, "a")?;
        let b = matrix_from_rows(&cfg.b, "b")?;
        let q = matrix_from_rows(&cfg.q, "q")?;
        let r = matrix_from_rows(&cfg.r, "r")?;
        let (n, m) = (a.nrows(), b.ncols());
        let xg = cfg.x_goal.clone().map(Array1::from).unwrap_or_else(|| Vector::zeros(n));
        let ug = cfg.u_goal.clone().map(Array1::from).unwrap_or_else(|| Vector::zeros(m));
        let p = Self::with_goal(a, b, q, r, xg, ug)?;
        if cfg.u_min.is_some() || cfg.u_max.is_some() {
            let (lo, hi) = bounds_from(m, cfg.u_min.as_deref(), cfg.u_max.as_deref())?;
            return p.with_bounds(lo, hi);
        }
        Ok(p)
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }
}

fn check_cost_matrices(q: &Matrix, r: &Matrix) -> Result<(), DynamicsError> {
    let qs = linalg::eig_symmetric(q.view()).map_err(|e| DynamicsError::Config(format!("Q: {e}")))?;
    let qscale = linalg::max_abs(q.view()).max(1.0);
    if qs.0.iter().any(|&v| v < -1e-12 * qscale) {
        return Err(DynamicsError::Config("Q must be positive semidefinite".into()));
    }
    let rs = linalg::eig_symmetric(r.view()).map_err(|e| DynamicsError::Config(format!("R: {e}")))?;
    if rs.0.iter().any(|&v| v <= 0.0) {
        return Err(DynamicsError::Config("R must be positive definite".into()));
    }
    Ok(())
}

impl ControlProblem for LinearQuadraticProblem {
    fn name(&self) -> &str {
        "linear"
    }
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn goal_state(&self) -> &Vector {
        &self.x_goal
    }
    fn goal_control(&self) -> &Vector {
        &self.u_goal
    }
    fn control_lower(&self) -> &Vector {
        &self.u_lower
    }
    fn control_upper(&self) -> &Vector {
        &self.u_upper
    }
    fn q_matrix(&self) -> &Matrix {
        &self.q
    }
    fn r_matrix(&self) -> &Matrix {
        &self.r
    }
    fn dynamics(&self, x: ArrayView1<f64>, u: ArrayView1<f64>) -> Vector {
        self.a.dot(&(&x - &self.x_goal)) + self.b.dot(&(&u - &self.u_goal))
    }
    fn jacobian_x(&self, _x: ArrayView1<f64>, _u: ArrayView1<f64>) -> Matrix {
        self.a.clone()
    }
    fn jacobian_u(&self, _x: ArrayView1<f64>, _u: ArrayView1<f64>) -> Matrix {
        self.b.clone()
    }
    fn costate_curvature(&self, _x: ArrayView1<f64>, _u: ArrayView1<f64>, _l: ArrayView1<f64>) -> Matrix {
        Matrix::zeros(self.a.dim())
    }
    fn input_coupling(&self, _x: ArrayView1<f64>, _u: ArrayView1<f64>, _l: ArrayView1<f64>) -> Matrix {
        Matrix::zeros((self.control_dim(), self.state_dim()))
    }
}

/// Problem configuration file: exactly one of `[burgers]` or `[linear]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default)]
    pub burgers: Option<BurgersConfig>,
    #[serde(default)]
    pub linear: Option<LinearConfig>,
}

impl ProblemConfig {
    pub fn burgers_default() -> Self {
        Self { burgers: Some(BurgersConfig::default()), linear: None }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, DynamicsError> {
        toml::from_str(text).map_err(|e| DynamicsError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, DynamicsError> {
        let text = std::fs::read_to_string(path).map_err(|e| DynamicsError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("problem config serializes")
    }

    pub fn build(&self) -> Result<Box<dyn ControlProblem>, DynamicsError> {
        match (&self.burgers, &self.linear) {
            (Some(b), None) => Ok(Box::new(BurgersProblem::new(b.clone())?)),
            (None, Some(l)) => Ok(Box::new(LinearQuadraticProblem::from_config(l)?)),
            _ => Err(DynamicsError::Config("problem config needs exactly one of [burgers] or [linear]".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(a: f64, b: f64) -> LinearQuadraticProblem {
        LinearQuadraticProblem::new(array![[a]], array![[b]], array![[1.0]], array![[1.0]]).unwrap()
    }

    struct SineProblem {
        zero: Vector,
        lo: Vector,
        hi: Vector,
        q: Matrix,
        r: Matrix,
    }

    impl SineProblem {
        fn new() -> Self {
            Self { zero: Vector::zeros(1), lo: array![f64::NEG_INFINITY], hi: array![f64::INFINITY], q: array![[1.0]], r: array![[1.0]] }
        }
    }

    impl ControlProblem for SineProblem {
        fn name(&self) -> &str {
            "sine"
        }
        fn state_dim(&self) -> usize {
            1
        }
        fn control_dim(&self) -> usize {
            1
        }
        fn goal_state(&self) -> &Vector {
            &self.zero
        }
        fn goal_control(&self) -> &Vector {
            &self.zero
        }
        fn control_lower(&self) -> &Vector {
            &self.lo
        }
        fn control_upper(&self) -> &Vector {
            &self.hi
        }
        fn q_matrix(&self) -> &Matrix {
            &self.q
        }
        fn r_matrix(&self) -> &Matrix {
            &self.r
        }
        fn dynamics(&self, x: ArrayView1<f64>, u: ArrayView1<f64>) -> Vector {
            array![x[0].sin() + u[0]]
        }
        fn jacobian_x(&self, x: ArrayView1<f64>, _u: ArrayView1<f64>) -> Matrix {
            array![[x[0].cos()]]
        }
        fn jacobian_u(&self, _x: ArrayView1<f64>, _u: ArrayView1<f64>) -> Matrix {
            array![[1.0]]
        }
    }

    #[test]
    fn scalar_dynamics_substitution() {
        let p = scalar(1.0, 1.0);
        let f = eval_dynamics(&p, array![2.0].view(), array![-1.0].view()).unwrap();
        assert_eq!(f[0], 1.0);
        assert!(eval_dynamics(&p, array![1.0, 2.0].view(), array![0.0].view()).is_err());
        assert!(eval_dynamics(&p, array![f64::NAN].view(), array![0.0].view()).is_err());
    }

    #[test]
    fn running_cost_and_hamiltonian_by_hand() {
        let p = LinearQuadraticProblem::new(Matrix::eye(2), array![[1.0], [0.0]], Matrix::eye(2), array![[1.0]]).unwrap();
        let l = running_cost(&p, array![1.0, 0.0].view(), array![2.0].view()).unwrap();
        assert_eq!(l, 5.0);
        assert_eq!(running_cost(&p, array![0.0, 0.0].view(), array![0.0].view()).unwrap(), 0.0);

        let s = scalar(1.0, 1.0);
        let h = hamiltonian(&s, array![1.0].view(), array![3.0].view(), array![1.0].view()).unwrap();
        assert_eq!(h, 8.0);
        let h0 = hamiltonian(&s, array![1.0].view(), array![0.0].view(), array![1.0].view()).unwrap();
        assert_eq!(h0, 2.0);
    }

    #[test]
    fn minimize_hamiltonian_examples() {
        let s = scalar(1.0, 1.0);
        let u = minimize_hamiltonian(&s, array![0.3].view(), array![0.0].view()).unwrap();
        assert_eq!(u[0], 0.0);
        let u = minimize_hamiltonian(&s, array![0.3].view(), array![2.0].view()).unwrap();
        assert_eq!(u[0], -1.0);
        let bounded = scalar(1.0, 1.0).with_bounds(array![-0.5], array![0.5]).unwrap();
        let u = minimize_hamiltonian(&bounded, array![0.3].view(), array![2.0].view()).unwrap();
        assert_eq!(u[0], -0.5);
    }

    #[test]
    fn bounded_problem_with_full_r_is_rejected() {
        let p = LinearQuadraticProblem::new(Matrix::eye(2), Matrix::eye(2), Matrix::eye(2), array![[2.0, 0.5], [0.5, 2.0]])
            .unwrap()
            .with_bounds(array![-1.0, -1.0], array![1.0, 1.0])
            .unwrap();
        assert!(matches!(minimize_hamiltonian(&p, array![0.0, 0.0].view(), array![1.0, 1.0].view()), Err(DynamicsError::Unsupported(_))));
    }

    #[test]
    fn linearize_examples() {
        let (a, b) = linearize(&scalar(1.0, 1.0)).unwrap();
        assert_eq!((a[[0, 0]], b[[0, 0]]), (1.0, 1.0));
        let (a, b) = linearize(&SineProblem::new()).unwrap();
        assert_eq!((a[[0, 0]], b[[0, 0]]), (1.0, 1.0));
    }

    #[test]
    fn chebyshev_small_cases() {
        let (nodes, d) = chebyshev_diff_matrix(1).unwrap();
        assert_eq!(nodes, array![1.0, -1.0]);
        assert_eq!(d, array![[0.5, -0.5], [0.5, -0.5]]);
        let (_, d) = chebyshev_diff_matrix(2).unwrap();
        let expected = array![[1.5, -2.0, 0.5], [0.5, 0.0, -0.5], [-0.5, 2.0, -1.5]];
        assert!((&d - &expected).iter().all(|v| v.abs() < 1e-14), "{d}");
        assert!(chebyshev_diff_matrix(0).is_err());
    }

    #[test]
    fn chebyshev_derivatives() {
        for n in [3, 8, 20, 33] {
            let (nodes, d) = chebyshev_diff_matrix(n).unwrap();
            let ones = Vector::ones(n + 1);
            assert!(d.dot(&ones).iter().all(|v| v.abs() < 1e-10));
            let sq = nodes.mapv(|x| x * x);
            let dsq = d.dot(&sq);
            assert!(dsq.iter().zip(nodes.iter()).all(|(a, x)| (a - 2.0 * x).abs() < 1e-10));
            if n >= 20 {
                let e = nodes.mapv(f64::exp);
                let de = d.dot(&e);
                assert!((&de - &e).iter().all(|v| v.abs() < 1e-8));
            }
        }
    }

    fn term_wise_burgers(p: &BurgersProblem, x: &Vector, u: &Vector) -> Vector {
        // dense loops over the full grid with explicit zero boundary values
        let n = x.len();
        let (_, d) = chebyshev_diff_matrix(n + 1).unwrap();
        let mut full = vec![0.0; n + 2];
        full[1..=n].copy_from_slice(x.as_slice().unwrap());
        let sq: Vec<f64> = full.iter().map(|v| v * v).collect();
        let mut dx = vec![0.0; n + 2];
        for i in 0..n + 2 {
            for j in 0..n + 2 {
                dx[i] += d[[i, j]] * full[j];
            }
        }
        let mut out = Vector::zeros(n);
        for i in 1..=n {
            let mut conv = 0.0;
            let mut diff = 0.0;
            for j in 0..n + 2 {
                conv += d[[i, j]] * sq[j];
                diff += d[[i, j]] * dx[j];
            }
            let xi = full[i];
            let mut act = 0.0;
            for k in 0..u.len() {
                act += p.input_matrix()[[i - 1, k]] * u[k];
            }
            out[i - 1] = -0.5 * conv + p.viscosity() * diff + p.alpha()[i - 1] * xi * (-p.beta() * xi).exp() + act;
        }
        out
    }

    #[test]
    fn burgers_matches_term_wise_oracle() {
        let p = BurgersProblem::new(BurgersConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let x: Vector = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u: Vector = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = p.dynamics(x.view(), u.view());
            let g = term_wise_burgers(&p, &x, &u);
            let err = (&f - &g).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-10 * (1.0 + linalg::vec_inf_norm(g.view())), "err {err}");
        }
    }

    #[test]
    fn burgers_equilibrium_and_instability() {
        let p = BurgersProblem::new(BurgersConfig::default()).unwrap();
        let f0 = p.dynamics(p.goal_state().view(), p.goal_control().view());
        assert!(linalg::vec_norm(f0.view()) <= 1e-12);
        let (a, _) = linearize(&p).unwrap();
        let spec = linalg::eig_general(a.view()).unwrap();
        assert!(spec.max_real_part > 0.0, "open loop should be unstable");
    }

    #[test]
    fn burgers_jacobians_and_curvature_match_differences() {
        let p = BurgersProblem::new(BurgersConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let x: Vector = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u: Vector = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (a_fd, b_fd) = finite_difference_jacobians(&p, x.view(), u.view());
            assert!(relative_error(&p.jacobian_x(x.view(), u.view()), &a_fd) <= 1e-6);
            assert!(relative_error(&p.jacobian_u(x.view(), u.view()), &b_fd) <= 1e-6);
        }
        let x: Vector = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u = Vector::zeros(2);
        let lam: Vector = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let analytic = p.costate_curvature(x.view(), u.view(), lam.view());
        let fd = {
            let n = 16;
            let mut out = Matrix::zeros((n, n));
            let mut xp = x.clone();
            for j in 0..n {
                let h = 1e-6;
                xp[j] = x[j] + h;
                let gp = p.jacobian_x(xp.view(), u.view()).t().dot(&lam);
                xp[j] = x[j] - h;
                let gm = p.jacobian_x(xp.view(), u.view()).t().dot(&lam);
                xp[j] = x[j];
                out.column_mut(j).assign(&((gp - gm) / (2.0 * h)));
            }
            out
        };
        assert!(relative_error(&analytic, &fd) <= 1e-6);
    }

    #[test]
    fn minimizer_beats_random_controls() {
        let cfg = BurgersConfig { u_min: Some(vec![-0.3, -0.3]), u_max: Some(vec![0.3, 0.3]), ..Default::default() };
        let p = BurgersProblem::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x: Vector = (0..16).map(|_| rng.random_range(-0.5..0.5)).collect();
            let lam: Vector = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
            let u = minimize_hamiltonian(&p, x.view(), lam.view()).unwrap();
            let h = hamiltonian(&p, x.view(), lam.view(), u.view()).unwrap();
            for _ in 0..1000 {
                let v: Vector = (0..2).map(|_| rng.random_range(-0.3..=0.3)).collect();
                let hv = hamiltonian(&p, x.view(), lam.view(), v.view()).unwrap();
                assert!(h <= hv + 1e-12);
            }
        }
    }

    #[test]
    fn hamiltonian_decomposition_is_exact() {
        let p = BurgersProblem::new(BurgersConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vector = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u: Vector = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lam: Vector = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = hamiltonian(&p, x.view(), lam.view(), u.view()).unwrap();
        let l = running_cost(&p, x.view(), u.view()).unwrap();
        let f = p.dynamics(x.view(), u.view());
        assert_eq!(h - l - lam.dot(&f), 0.0);
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = ProblemConfig::burgers_default();
        let text = cfg.to_toml_string();
        assert_eq!(ProblemConfig::from_toml_str(&text).unwrap(), cfg);
        assert!(ProblemConfig::default().build().is_err());
        let lin = ProblemConfig::from_toml_str("[linear]\na=[[1.0]]\nb=[[1.0]]\nq=[[1.0]]\nr=[[1.0]]\n").unwrap();
        assert_eq!(lin.build().unwrap().state_dim(), 1);
        let bad = ProblemConfig::from_toml_str("[linear]\na=[[1.0]]\nb=[[1.0]]\nq=[[1.0]]\nr=[[-1.0]]\n").unwrap();
        assert!(bad.build().is_err());
        let bad_bounds = BurgersConfig { u_min: Some(vec![0.1, -1.0]), ..Default::default() };
        assert!(BurgersProblem::new(bad_bounds).is_err());
    }
}

//! Continuous algebraic Riccati equation, LQR value and feedback, and the
//! quadratic Lyapunov constants behind the ultimate-boundedness threshold.

use ndarray::{ArrayView1, ArrayView2};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dynamics::{self, ControlProblem, DynamicsError};
use crate::linalg::{self, LinalgError, Matrix, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LqrError {
    #[error("invalid Riccati data: {0}")]
    Invalid(String),
    #[error("no stabilizing Riccati iterate found ({0})")]
    NotStabilizable(String),
    #[error("Newton iteration stagnated with relative residual {0:e}")]
    Stagnation(f64),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Stabilizing solution of `Q + AᵀP + PA − PBR⁻¹BᵀP = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub p: Matrix,
    pub k: Matrix,
    pub closed_loop_a: Matrix,
    /// Frobenius norm of the Riccati residual.
    pub residual: f64,
    pub x_goal: Vector,
    pub u_goal: Vector,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CareOptions {
    /// Target relative residual for the Newton refinement.
    pub tol: f64,
    /// Largest relative residual accepted after Newton stalls.
    pub accept_tol: f64,
    pub max_newton: usize,
    /// Step budget for the differential Riccati warm start.
    pub max_dre_steps: usize,
}

impl Default for CareOptions {
    fn default() -> Self {
        Self { tol: 1e-10, accept_tol: 1e-8, max_newton: 60, max_dre_steps: 400_000 }
    }
}

pub fn care_residual(a: ArrayView2<f64>, b: ArrayView2<f64>, q: ArrayView2<f64>, r_inv: ArrayView2<f64>, p: ArrayView2<f64>) -> Matrix {
    let pb = p.dot(&b);
    let s = pb.dot(&r_inv).dot(&pb.t());
    let atp = a.t().dot(&p);
    &q + &atp + atp.t() - &s
}

/// Solves the Lyapunov equation `FᵀP + PF + M = 0` for symmetric `P` as a
/// dense linear system in the `n(n+1)/2` upper-triangular unknowns.
pub fn solve_lyapunov(f: ArrayView2<f64>, m: ArrayView2<f64>) -> Result<Matrix, LqrError> {
    let n = f.nrows();
    let idx = |i: usize, j: usize| -> usize {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        a * n - a * (a + 1) / 2 + b
    };
    let size = n * (n + 1) / 2;
    let mut sys = Matrix::zeros((size, size));
    let mut rhs = Vector::zeros(size);
    for i in 0..n {
        for j in i..n {
            let row = idx(i, j);
            for k in 0..n {
                // (FᵀP)_ij = Σ_k F_ki P_kj,  (PF)_ij = Σ_k P_ik F_kj
                sys[[row, idx(k, j)]] += f[[k, i]];
                sys[[row, idx(i, k)]] += f[[k, j]];
            }
            rhs[row] = -0.5 * (m[[i, j]] + m[[j, i]]);
        }
    }
    let sol = linalg::lu_solve(sys.view(), rhs.view())?;
    let mut p = Matrix::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            p[[i, j]] = sol[idx(i, j)];
            p[[j, i]] = sol[idx(i, j)];
        }
    }
    Ok(p)
}

fn is_hurwitz(a: ArrayView2<f64>) -> Result<bool, LqrError> {
    Ok(linalg::eig_general(a)?.is_hurwitz())
}

struct CareData {
    a: Matrix,
    b: Matrix,
    q: Matrix,
    r: Matrix,
    r_inv: Matrix,
    s: Matrix,
}

impl CareData {
    fn gain(&self, p: &Matrix) -> Matrix {
        self.r_inv.dot(&self.b.t()).dot(p)
    }

    fn closed_loop(&self, k: &Matrix) -> Matrix {
        &self.a - &self.b.dot(k)
    }

    fn rel_residual(&self, p: &Matrix) -> f64 {
        let res = care_residual(self.a.view(), self.b.view(), self.q.view(), self.r_inv.view(), p.view());
        linalg::frobenius_norm(res.view()) / linalg::frobenius_norm(p.view()).max(1.0)
    }

    fn dre_rhs(&self, p: &Matrix) -> Matrix {
        let atp = self.a.t().dot(p);
        &self.q + &atp + atp.t() - &p.dot(&self.s).dot(p)
    }
}

/// Integrates `Ṗ = Q + AᵀP + PA − PSP` from `P = 0` with classical RK4 until
/// the induced gain stabilizes `A`.
fn dre_warm_start(d: &CareData, max_steps: usize) -> Result<Option<Matrix>, LqrError> {
    let n = d.a.nrows();
    let mut p = Matrix::zeros((n, n));
    let a_norm = linalg::inf_norm(d.a.view()).max(linalg::inf_norm(d.a.t()));
    let s_norm = linalg::inf_norm(d.s.view());
    let mut steps = 0usize;
    let mut since_check = 0.0;
    let mut last_checked = p.clone();
    while steps < max_steps {
        let p_norm = linalg::inf_norm(p.view());
        let h = (2.0 / (2.0 * a_norm + 2.0 * s_norm * p_norm + 1e-12)).min(0.05);
        let k1 = d.dre_rhs(&p);
        let k2 = d.dre_rhs(&(&p + &(&k1 * (0.5 * h))));
        let k3 = d.dre_rhs(&(&p + &(&k2 * (0.5 * h))));
        let k4 = d.dre_rhs(&(&p + &(&k3 * h)));
        p = &p + &((&k1 + &(2.0 * &k2) + &(2.0 * &k3) + &k4) * (h / 6.0));
        p = linalg::symmetrize(p.view());
        if !p.iter().all(|v| v.is_finite()) {
            return Ok(None);
        }
        steps += 1;
        since_check += h;
        if since_check >= 0.1 || steps.is_multiple_of(500) {
            since_check = 0.0;
            if is_hurwitz(d.closed_loop(&d.gain(&p)).view())? {
                return Ok(Some(p));
            }
            // a converged but non-stabilizing iterate (undetectable unstable mode)
            let change = linalg::frobenius_norm((&p - &last_checked).view());
            if change <= 1e-12 * linalg::frobenius_norm(p.view()).max(1.0) {
                return Ok(None);
            }
            last_checked = p.clone();
        }
    }
    Ok(None)
}

/// Newton–Kleinman refinement from a stabilizing gain.
fn kleinman(d: &CareData, mut k: Matrix, opts: &CareOptions) -> Result<Matrix, LqrError> {
    let mut best = f64::INFINITY;
    let mut best_p = None;
    let mut stalled = 0;
    for _ in 0..opts.max_newton {
        let f = d.closed_loop(&k);
        let m = &d.q + &k.t().dot(&d.r).dot(&k);
        let p = linalg::symmetrize(solve_lyapunov(f.view(), m.view())?.view());
        let res = d.rel_residual(&p);
        k = d.gain(&p);
        if res < best * 0.5 {
            stalled = 0;
        } else {
            stalled += 1;
        }
        if res < best {
            best = res;
            best_p = Some(p);
        }
        if best <= opts.tol || stalled >= 3 {
            break;
        }
    }
    match best_p {
        Some(p) if best <= opts.accept_tol => {
            if best > opts.tol {
                log::warn!("Riccati residual {best:e} above target {:e}", opts.tol);
            }
            Ok(p)
        }
        _ => Err(LqrError::Stagnation(best)),
    }
}

/// Homotopy in a stabilizing shift `A − σI` (with `Q + σI` so every mode is
/// penalized along the way), used when the DRE warm start fails.
fn shift_homotopy(d: &CareData, opts: &CareOptions) -> Result<Matrix, LqrError> {
    let n = d.a.nrows();
    let spec = linalg::eig_general(d.a.view())?;
    let mut sigma = (spec.max_real_part + 1.0).max(1.0);
    let mut k = Matrix::zeros((d.b.ncols(), n));
    let shifted = |sigma: f64| CareData {
        a: &d.a - &(Matrix::eye(n) * sigma),
        b: d.b.clone(),
        q: &d.q + &(Matrix::eye(n) * sigma),
        r: d.r.clone(),
        r_inv: d.r_inv.clone(),
        s: d.s.clone(),
    };
    let mut step = sigma;
    let mut guard = 0;
    loop {
        let ds = shifted(sigma);
        let p = kleinman(&ds, k.clone(), opts)?;
        k = ds.gain(&p);
        if sigma == 0.0 {
            return Ok(p);
        }
        loop {
            guard += 1;
            if guard > 200 {
                return Err(LqrError::NotStabilizable("shift homotopy did not reach zero shift".into()));
            }
            let next = (sigma - step).max(0.0);
            if is_hurwitz(shifted(next).closed_loop(&k).view())? {
                sigma = next;
                break;
            }
            step *= 0.5;
        }
    }
}

pub fn solve_care(a: ArrayView2<f64>, b: ArrayView2<f64>, q: ArrayView2<f64>, r: ArrayView2<f64>) -> Result<RiccatiSolution, LqrError> {
    solve_care_with(a, b, q, r, &CareOptions::default())
}

pub fn solve_care_with(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    q: ArrayView2<f64>,
    r: ArrayView2<f64>,
    opts: &CareOptions,
) -> Result<RiccatiSolution, LqrError> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.dim() != (n, n) || r.dim() != (m, m) {
        return Err(LqrError::Invalid("inconsistent A, B, Q, R shapes".into()));
    }
    let r_inv = linalg::inverse(r)?;
    let r_inv = linalg::symmetrize(r_inv.view());
    let s = b.dot(&r_inv).dot(&b.t());
    let d = CareData { a: a.to_owned(), b: b.to_owned(), q: q.to_owned(), r: r.to_owned(), r_inv, s };

    let p = if is_hurwitz(a)? {
        kleinman(&d, Matrix::zeros((m, n)), opts)?
    } else {
        match dre_warm_start(&d, opts.max_dre_steps)? {
            Some(p0) => kleinman(&d, d.gain(&p0), opts)?,
            None => {
                log::warn!("differential Riccati warm start exhausted its budget; using shift homotopy");
                shift_homotopy(&d, opts)?
            }
        }
    };
    let p = linalg::symmetrize(p.view());
    let k = d.gain(&p);
    let closed_loop_a = d.closed_loop(&k);
    if !is_hurwitz(closed_loop_a.view())? {
        return Err(LqrError::NotStabilizable("closed loop A − BK is not Hurwitz".into()));
    }
    let residual = linalg::frobenius_norm(care_residual(a, b, q, d.r_inv.view(), p.view()).view());
    Ok(RiccatiSolution { p, k, closed_loop_a, residual, x_goal: Vector::zeros(n), u_goal: Vector::zeros(m) })
}

impl RiccatiSolution {
    /// Linearizes the problem at its goal and solves the CARE with its `Q, R`.
    pub fn for_problem(problem: &dyn ControlProblem) -> Result<Self, LqrError> {
        let (a, b) = dynamics::linearize(problem)?;
        let mut sol = solve_care(a.view(), b.view(), problem.q_matrix().view(), problem.r_matrix().view())?;
        sol.x_goal = problem.goal_state().clone();
        sol.u_goal = problem.goal_control().clone();
        Ok(sol)
    }

    pub fn state_dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.k.nrows()
    }

    pub fn relative_residual(&self) -> f64 {
        self.residual / linalg::frobenius_norm(self.p.view()).max(1.0)
    }

    /// Digest of `P` and `K` printed at 17 significant digits; controllers
    /// record it so they are not paired with a different problem.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.p.iter().chain(self.k.iter()) {
            h.update(format!("{v:.16e}\n").as_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn lqr_value(sol: &RiccatiSolution, x: ArrayView1<f64>) -> f64 {
    let dx = &x - &sol.x_goal;
    dx.dot(&sol.p.dot(&dx))
}

pub fn lqr_control(sol: &RiccatiSolution, x: ArrayView1<f64>) -> Vector {
    let dx = &x - &sol.x_goal;
    &sol.u_goal - &sol.k.dot(&dx)
}

pub fn lqr_gradient(sol: &RiccatiSolution, x: ArrayView1<f64>) -> Vector {
    let dx = &x - &sol.x_goal;
    2.0 * sol.p.dot(&dx)
}

/// Constants of the quadratic Lyapunov function `W = V_LQR`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovConstants {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub l_u: f64,
    pub r: f64,
    pub theta: f64,
}

pub const DEFAULT_RADIUS: f64 = 1.2;
pub const DEFAULT_THETA: f64 = 0.9;
pub const THETA_TABLE: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

impl LyapunovConstants {
    pub fn validate(&self) -> Result<(), LqrError> {
        let all = [self.k1, self.k2, self.k3, self.k4, self.l_u, self.r];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(LqrError::Invalid("Lyapunov constants must be positive".into()));
        }
        if self.k1 > self.k2 {
            return Err(LqrError::Invalid("k1 must not exceed k2".into()));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(LqrError::Invalid("theta must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn with(self, r: f64, theta: f64) -> Self {
        Self { r, theta, ..self }
    }
}

pub fn lyapunov_constants(sol: &RiccatiSolution, problem: &dyn ControlProblem, r: f64, theta: f64) -> Result<LyapunovConstants, LqrError> {
    let (q_eigs, _) = linalg::eig_symmetric(problem.q_matrix().view())?;
    if q_eigs.iter().any(|&v| v <= 0.0) {
        return Err(LqrError::Unsupported("Lyapunov constants require a positive definite Q".into()));
    }
    let (p_eigs, _) = linalg::eig_symmetric(sol.p.view())?;
    let m = problem.q_matrix() + &sol.k.t().dot(problem.r_matrix()).dot(&sol.k);
    let (m_eigs, _) = linalg::eig_symmetric(linalg::symmetrize(m.view()).view())?;
    let fu = problem.jacobian_u(problem.goal_state().view(), problem.goal_control().view());
    let l_u = linalg::spectral_norm(fu.view())?;
    let n = p_eigs.len();
    let c = LyapunovConstants { k1: p_eigs[0], k2: p_eigs[n - 1], k3: m_eigs[0], k4: 2.0 * p_eigs[n - 1], l_u, r, theta };
    c.validate()?;
    Ok(c)
}

/// `δ⁺ = θk₃/(L_u k₄) · √(k₁/k₂) · r`.
pub fn delta_plus(c: &LyapunovConstants) -> f64 {
    c.theta * c.k3 / (c.l_u * c.k4) * (c.k1 / c.k2).sqrt() * c.r
}

/// `δ⁺` over the standard θ grid.
pub fn delta_plus_table(c: &LyapunovConstants) -> Vec<(f64, f64)> {
    THETA_TABLE.iter().map(|&t| (t, delta_plus(&c.with(c.r, t)))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{BurgersConfig, BurgersProblem, LinearQuadraticProblem};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SQRT2: f64 = std::f64::consts::SQRT_2;

    #[test]
    fn scalar_riccati_closed_form() {
        let one = array![[1.0]];
        let sol = solve_care(one.view(), one.view(), one.view(), one.view()).unwrap();
        assert!((sol.p[[0, 0]] - (1.0 + SQRT2)).abs() < 1e-10);
        assert_eq!(sol.k[[0, 0]], sol.p[[0, 0]]);
    }

    #[test]
    fn uncontrolled_stable_lyapunov_case() {
        let sol = solve_care(array![[-1.0]].view(), array![[0.0]].view(), array![[1.0]].view(), array![[1.0]].view()).unwrap();
        assert!((sol.p[[0, 0]] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn burgers_riccati() {
        let p = BurgersProblem::new(BurgersConfig::default()).unwrap();
        let sol = RiccatiSolution::for_problem(&p).unwrap();
        assert!(sol.relative_residual() <= 1e-8, "{}", sol.relative_residual());
        assert!(linalg::eig_general(sol.closed_loop_a.view()).unwrap().is_hurwitz());
        assert_eq!(sol.p, sol.p.t());
        let (eigs, _) = linalg::eig_symmetric(sol.p.view()).unwrap();
        assert!(eigs[0] > 0.0);
        let c = lyapunov_constants(&sol, &p, 1.2, 0.9).unwrap();
        assert!(c.k1 <= c.k2 && c.k3 > 0.0);
    }

    #[test]
    fn shift_homotopy_agrees_with_dre_path() {
        let a = array![[1.0, 2.0, 0.0], [0.0, 0.5, 1.0], [0.3, 0.0, -1.0]];
        let b = array![[0.0], [0.0], [1.0]];
        let q = Matrix::eye(3);
        let r = array![[0.5]];
        let s1 = solve_care(a.view(), b.view(), q.view(), r.view()).unwrap();
        let opts = CareOptions { max_dre_steps: 0, ..Default::default() };
        let s2 = solve_care_with(a.view(), b.view(), q.view(), r.view(), &opts).unwrap();
        assert!(linalg::max_abs((&s1.p - &s2.p).view()) < 1e-8);
    }

    #[test]
    fn unstabilizable_pair_is_rejected() {
        let res = solve_care(array![[1.0]].view(), array![[0.0]].view(), array![[1.0]].view(), array![[1.0]].view());
        assert!(res.is_err());
    }

    #[test]
    fn lqr_value_and_control() {
        let one = array![[1.0]];
        let sol = solve_care(one.view(), one.view(), one.view(), one.view()).unwrap();
        let p = sol.p[[0, 0]];
        assert_eq!(lqr_value(&sol, array![0.0].view()), 0.0);
        assert_eq!(lqr_control(&sol, array![0.0].view())[0], 0.0);
        assert!((lqr_value(&sol, array![2.0].view()) - 4.0 * (1.0 + SQRT2)).abs() < 1e-9);
        assert!((lqr_control(&sol, array![2.0].view())[0] + 2.0 * (1.0 + SQRT2)).abs() < 1e-9);
        let h = 1e-6;
        let fd = (lqr_value(&sol, array![0.7 + h].view()) - lqr_value(&sol, array![0.7 - h].view())) / (2.0 * h);
        assert!((fd - lqr_gradient(&sol, array![0.7].view())[0]).abs() < 1e-7 * p);
    }

    #[test]
    fn scalar_lyapunov_constants_and_delta_plus() {
        let prob = LinearQuadraticProblem::new(array![[1.0]], array![[1.0]], array![[1.0]], array![[1.0]]).unwrap();
        let sol = RiccatiSolution::for_problem(&prob).unwrap();
        let c = lyapunov_constants(&sol, &prob, 1.0, 0.5).unwrap();
        let p = 1.0 + SQRT2;
        assert!((c.k1 - p).abs() < 1e-10 && (c.k2 - p).abs() < 1e-10);
        assert!((c.k4 - 2.0 * p).abs() < 1e-10);
        assert!((c.k3 - (1.0 + p * p)).abs() < 1e-9);
        assert_eq!(c.l_u, 1.0);
        let expected = 0.5 * (1.0 + p * p) / (2.0 * p);
        assert!((delta_plus(&c) - expected).abs() < 1e-9);
    }

    #[test]
    fn identity_constants() {
        let prob = LinearQuadraticProblem::new(array![[-1.0, 0.0], [0.0, -1.0]], Matrix::eye(2), Matrix::eye(2), Matrix::eye(2)).unwrap();
        let sol = RiccatiSolution {
            p: Matrix::eye(2),
            k: Matrix::zeros((2, 2)),
            closed_loop_a: -Matrix::eye(2),
            residual: 0.0,
            x_goal: Vector::zeros(2),
            u_goal: Vector::zeros(2),
        };
        let c = lyapunov_constants(&sol, &prob, 1.0, 0.5).unwrap();
        assert_eq!((c.k1, c.k2, c.k3, c.k4), (1.0, 1.0, 1.0, 2.0));
    }

    #[test]
    fn delta_plus_unit_constants_and_linearity() {
        let c = LyapunovConstants { k1: 1.0, k2: 1.0, k3: 1.0, k4: 1.0, l_u: 1.0, r: 2.0, theta: 0.5 };
        assert_eq!(delta_plus(&c), 1.0);
        assert_eq!(delta_plus(&c.with(4.0, 0.5)), 2.0 * delta_plus(&c));
        let table = delta_plus_table(&c);
        assert!(table.windows(2).all(|w| w[1].1 > w[0].1));
    }

    #[test]
    fn singular_q_rejected_for_constants() {
        let prob = LinearQuadraticProblem::new(Matrix::eye(2), Matrix::eye(2), array![[1.0, 0.0], [0.0, 0.0]], Matrix::eye(2)).unwrap();
        let sol = RiccatiSolution::for_problem(&prob).unwrap();
        assert!(matches!(lyapunov_constants(&sol, &prob, 1.0, 0.5), Err(LqrError::Unsupported(_))));
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize, m: usize) -> (Matrix, Matrix, Matrix, Matrix) {
        let a = Matrix::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        let b = Matrix::from_shape_fn((n, m), |_| rng.random_range(-1.0..1.0));
        let g = Matrix::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        let q = linalg::symmetrize((g.t().dot(&g) + Matrix::eye(n) * 0.1).view());
        let r = Matrix::eye(m) * rng.random_range(0.5..2.0);
        (a, b, q, r)
    }

    #[test]
    fn monotone_in_q_and_lyapunov_decrease() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let (a, b, q, r) = random_instance(&mut rng, 5, 2);
            let s1 = solve_care(a.view(), b.view(), q.view(), r.view()).unwrap();
            assert!(s1.relative_residual() <= 1e-8);
            let q2 = &q + &(Matrix::eye(5) * 0.1);
            let s2 = solve_care(a.view(), b.view(), q2.view(), r.view()).unwrap();
            let l1 = linalg::eig_symmetric(s1.p.view()).unwrap().0[0];
            let l2 = linalg::eig_symmetric(s2.p.view()).unwrap().0[0];
            assert!(l2 >= l1 - 1e-10);

            let m = &q + &s1.k.t().dot(&r).dot(&s1.k);
            let k3 = linalg::eig_symmetric(linalg::symmetrize(m.view()).view()).unwrap().0[0];
            for _ in 0..20 {
                let x: Vector = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                let lhs = 2.0 * x.dot(&s1.p.dot(&s1.closed_loop_a.dot(&x)));
                assert!(lhs <= -k3 * x.dot(&x) + 1e-10);
            }
        }
    }

    #[test]
    fn fingerprint_is_stable() {
        let one = array![[1.0]];
        let s = solve_care(one.view(), one.view(), one.view(), one.view()).unwrap();
        assert_eq!(s.fingerprint(), s.clone().fingerprint());
        let two = array![[2.0]];
        let t = solve_care(one.view(), one.view(), two.view(), one.view()).unwrap();
        assert_ne!(s.fingerprint(), t.fingerprint());
    }
}

//! Supervised losses over controller parameters and their L-BFGS
//! minimization.

use std::time::Instant;

use ndarray::{s, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, Dataset, DatasetError, SeedStream};
use crate::dynamics::ControlProblem;
use crate::linalg::{Matrix, Vector};
use crate::lqr::{self, RiccatiSolution};
use crate::models::{self, Controller, ControllerKind, ModelError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error("cannot train on an empty dataset")]
    EmptyData,
    #[error("dataset has {got} columns for {what}, controller expects {expected}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DatasetError),
}

/// Weights of the control, costate (gradient) and value MSE terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub mu_u: f64,
    pub mu_lambda: f64,
    pub mu_v: f64,
}

impl LossWeights {
    pub fn default_for(kind: ControllerKind) -> Self {
        if kind.is_value() {
            Self { mu_u: 1.0, mu_lambda: 1.0, mu_v: 1.0 }
        } else {
            Self { mu_u: 1.0, mu_lambda: 0.0, mu_v: 0.0 }
        }
    }

    pub fn validate(&self, kind: ControllerKind) -> Result<(), TrainError> {
        let all = [self.mu_u, self.mu_lambda, self.mu_v];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(TrainError::Weights(format!("weights must be finite and nonnegative, got {self:?}")));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(TrainError::Weights("at least one weight must be positive".into()));
        }
        if matches!(kind, ControllerKind::UNn | ControllerKind::UQrNet) && self.mu_lambda != 0.0 {
            return Err(TrainError::Weights(format!("{kind} has no costate output; μ_λ must be 0")));
        }
        if !kind.is_value() && self.mu_v != 0.0 {
            return Err(TrainError::Weights(format!("{kind} has no value output; μ_V must be 0")));
        }
        if kind == ControllerKind::Lqr {
            return Err(TrainError::Weights("the LQR controller has no trainable parameters".into()));
        }
        Ok(())
    }
}

/// Unweighted mean-squared terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub u: f64,
    pub lambda: f64,
    pub v: f64,
}

impl LossTerms {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.mu_u * self.u + w.mu_lambda * self.lambda + w.mu_v * self.v
    }
}

const CHUNK: usize = 256;

struct ChunkOut {
    terms: LossTerms,
    grad: Vec<f64>,
    goal: Vector,
    log_gamma: f64,
}

/// Loss and its gradient in the controller's parameters (network weights,
/// then `log γ` for QRnet). Samples are processed in fixed chunks reduced in
/// index order, so the result does not depend on the thread count.
///
/// u-NN is fitted on its unclamped output so saturated initial guesses still
/// receive a gradient.
pub fn loss_and_grad(
    ctrl: &Controller,
    problem: &dyn ControlProblem,
    data: &Dataset,
    w: &LossWeights,
) -> Result<(f64, LossTerms, Vec<f64>), TrainError> {
    w.validate(ctrl.kind())?;
    let (n, m) = (problem.state_dim(), problem.control_dim());
    let count = data.len();
    if count == 0 {
        return Err(TrainError::EmptyData);
    }
    for (what, expected, got) in [("x", n, data.x.ncols()), ("lambda", n, data.lambda.ncols()), ("u", m, data.u.ncols())] {
        if expected != got {
            return Err(TrainError::Shape { what, expected, got });
        }
    }
    let net = ctrl.network().expect("validated: trainable kinds have a network");
    let p = net.output_dim();
    let np = net.n_params();
    let goal_y = net.forward(ctrl.x_goal_scaled().view())?;
    let inv_n = 1.0 / count as f64;
    let chunks: Vec<usize> = (0..count).step_by(CHUNK).collect();
    let outs: Vec<ChunkOut> =
        chunks.par_iter().map(|&start| chunk_loss(ctrl, problem, data, w, start..(start + CHUNK).min(count), &goal_y, inv_n)).collect();
    let mut terms = LossTerms::default();
    let mut grad = vec![0.0; np];
    let mut goal = Vector::zeros(p);
    let mut lg = 0.0;
    for o in outs {
        terms.u += o.terms.u;
        terms.lambda += o.terms.lambda;
        terms.v += o.terms.v;
        for (g, v) in grad.iter_mut().zip(o.grad.iter()) {
            *g += v;
        }
        goal += &o.goal;
        lg += o.log_gamma;
    }
    if matches!(ctrl.kind(), ControllerKind::LambdaQrNet | ControllerKind::UQrNet) {
        let xg = ctrl.x_goal_scaled().clone().insert_axis(Axis(0));
        let pass = net.pass(xg.view());
        let gy = (-goal).insert_axis(Axis(0));
        net.backprop(&pass, None, gy.view(), None, &mut grad);
    }
    if ctrl.kind() == ControllerKind::QrNet {
        grad.push(lg);
    }
    terms.u *= inv_n;
    terms.lambda *= inv_n;
    terms.v *= inv_n;
    Ok((terms.weighted(w), terms, grad))
}

fn chunk_loss(
    ctrl: &Controller,
    problem: &dyn ControlProblem,
    data: &Dataset,
    w: &LossWeights,
    range: std::ops::Range<usize>,
    goal_y: &Vector,
    inv_n: f64,
) -> ChunkOut {
    let net = ctrl.network().expect("trainable kinds have a network");
    let kind = ctrl.kind();
    let rows = range.len();
    let x = data.x.slice(s![range.clone(), ..]);
    let u_t = data.u.slice(s![range.clone(), ..]);
    let lam_t = data.lambda.slice(s![range.clone(), ..]);
    let xs = ctrl.scaler().x.apply_rows(x);
    let pass = net.pass(xs.view());
    let p = net.output_dim();
    let n = x.ncols();
    let (lower, upper) = ctrl.bounds();
    let out_scale = ctrl.out_scale();
    let r_inv = ctrl.minimizer().r_inv();
    let lqr_sol = ctrl.riccati();
    let uf = problem.goal_control();
    let mut terms = LossTerms::default();
    let mut gy = Array2::<f64>::zeros((rows, p));
    let mut grad = vec![0.0; net.n_params()];
    let mut goal = Vector::zeros(p);
    let mut log_gamma = 0.0;

    // Control residual r = û − u with the clamp/saturation derivative folded in.
    let clamp_residual = |pre: &Vector, target: ndarray::ArrayView1<f64>, terms: &mut LossTerms| -> Vector {
        let mut g = Vector::zeros(pre.len());
        for i in 0..pre.len() {
            let uh = pre[i].clamp(lower[i], upper[i]);
            let r = uh - target[i];
            terms.u += r * r;
            if pre[i] > lower[i] && pre[i] < upper[i] {
                g[i] = 2.0 * w.mu_u * inv_n * r;
            }
        }
        g
    };

    match kind {
        ControllerKind::UNn => {
            for i in 0..rows {
                let pre = ctrl.scaler().u.invert(pass.out.row(i));
                let r = &pre - &u_t.row(i);
                terms.u += r.dot(&r);
                gy.row_mut(i).assign(&(2.0 * w.mu_u * inv_n * &r * out_scale));
            }
        }
        ControllerKind::UQrNet => {
            for i in 0..rows {
                let pre = lqr::lqr_control(lqr_sol, x.row(i)) + &(out_scale * &(&pass.out.row(i) - goal_y));
                let (uh, d) = ctrl.saturation().apply(pre.view());
                let r = &uh - &u_t.row(i);
                terms.u += r.dot(&r);
                gy.row_mut(i).assign(&(2.0 * w.mu_u * inv_n * &r * &d * out_scale));
            }
        }
        ControllerKind::LambdaQrNet => {
            for i in 0..rows {
                let xi = x.row(i);
                let lam = lqr::lqr_gradient(lqr_sol, xi) + &(out_scale * &(&pass.out.row(i) - goal_y));
                let fu = problem.jacobian_u(xi, uf.view());
                let pre = uf - &(0.5 * r_inv.dot(&fu.t().dot(&lam)));
                let g_pre = clamp_residual(&pre, u_t.row(i), &mut terms);
                let mut g_lam = -0.5 * fu.dot(&r_inv.dot(&g_pre));
                if w.mu_lambda > 0.0 {
                    let rl = &lam - &lam_t.row(i);
                    terms.lambda += rl.dot(&rl);
                    g_lam += &(2.0 * w.mu_lambda * inv_n * &rl);
                }
                gy.row_mut(i).assign(&(&g_lam * out_scale));
            }
        }
        ControllerKind::VNn | ControllerKind::QrNet => {
            let hv = out_scale[0];
            let in_scale = ctrl.in_scale();
            let gx = net.input_vjp(&pass, Matrix::ones((rows, 1)).view());
            let gamma = ctrl.gamma();
            let mut dir = Matrix::zeros((rows, n));
            for i in 0..rows {
                let xi = x.row(i);
                let y = pass.out[[i, 0]];
                let g_net = &gx.row(i) * in_scale * hv;
                let (v_hat, grad_v, lqr_parts) = if kind == ControllerKind::VNn {
                    (ctrl.scaler().v.lo[0] + (y + 1.0) * hv, g_net, None)
                } else {
                    let vl = lqr::lqr_value(lqr_sol, xi);
                    let (phi, dphi, dgam) = models::damped_value(vl, gamma);
                    let g_lqr = lqr::lqr_gradient(lqr_sol, xi);
                    (phi + hv * y, &g_lqr * dphi + &g_net, Some((vl, dgam, g_lqr)))
                };
                let fu = problem.jacobian_u(xi, uf.view());
                let pre = uf - &(0.5 * r_inv.dot(&fu.t().dot(&grad_v)));
                let mut g_grad = Vector::zeros(n);
                if w.mu_u > 0.0 {
                    let g_pre = clamp_residual(&pre, u_t.row(i), &mut terms);
                    g_grad += &(-0.5 * fu.dot(&r_inv.dot(&g_pre)));
                } else {
                    let uh = ctrl_clamp(&pre, lower, upper);
                    let r = &uh - &u_t.row(i);
                    terms.u += r.dot(&r);
                }
                let rl = &grad_v - &lam_t.row(i);
                terms.lambda += rl.dot(&rl);
                g_grad += &(2.0 * w.mu_lambda * inv_n * &rl);
                let rv = v_hat - data.v[range.start + i];
                terms.v += rv * rv;
                let g_v = 2.0 * w.mu_v * inv_n * rv;
                gy[[i, 0]] = g_v * hv;
                dir.row_mut(i).assign(&(&g_grad * in_scale * hv));
                if let Some((vl, dgam, g_lqr)) = lqr_parts {
                    let ddphi = -vl / ((1.0 + gamma * vl) * (1.0 + gamma * vl));
                    log_gamma += gamma * (g_v * dgam + ddphi * g_grad.dot(&g_lqr));
                }
            }
            let tangent = net.tangent(&pass, dir.view());
            net.backprop(&pass, Some(&tangent), gy.view(), Some(Matrix::ones((rows, 1)).view()), &mut grad);
            return ChunkOut { terms, grad, goal, log_gamma };
        }
        ControllerKind::Lqr => unreachable!("validated"),
    }
    if matches!(kind, ControllerKind::LambdaQrNet | ControllerKind::UQrNet) {
        goal = gy.sum_axis(Axis(0));
    }
    net.backprop(&pass, None, gy.view(), None, &mut grad);
    ChunkOut { terms, grad, goal, log_gamma }
}

fn ctrl_clamp(pre: &Vector, lower: &Vector, upper: &Vector) -> Vector {
    let mut u = pre.clone();
    for i in 0..u.len() {
        u[i] = u[i].clamp(lower[i], upper[i]);
    }
    u
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub c1: f64,
    pub c2: f64,
    /// Stop when `‖∇‖_∞` falls to this.
    pub gtol: f64,
    /// Stop when an accepted step lowers the loss by at most this fraction.
    pub ftol: f64,
    pub max_iters: usize,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self { memory: 10, c1: 1e-4, c2: 0.9, gtol: 1e-8, ftol: 1e-12, max_iters: 2000, max_line_search: 25 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Gradient,
    RelativeDecrease,
    IterationCap,
    LineSearchFailure,
}

impl StopReason {
    pub fn tag(self) -> &'static str {
        match self {
            StopReason::Gradient => "gradient-tolerance",
            StopReason::RelativeDecrease => "relative-decrease",
            StopReason::IterationCap => "iteration-cap",
            StopReason::LineSearchFailure => "line-search-failure",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub theta: Vec<f64>,
    pub loss: f64,
    pub iterations: usize,
    pub evaluations: usize,
    /// Loss after every accepted iterate, starting with the initial loss.
    pub history: Vec<f64>,
    pub reason: StopReason,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(x: &[f64], alpha: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + alpha * b).collect()
}

struct Point {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
    dg: f64,
}

/// Minimizer of a cubic through `(a, fa, da)` and `(b, fb, db)`, safeguarded
/// into the interior of the bracket.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    let mid = 0.5 * (a + b);
    if disc < 0.0 || !disc.is_finite() {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    let margin = 0.1 * (hi - lo);
    if !t.is_finite() || t < lo + margin || t > hi - margin {
        mid
    } else {
        t
    }
}

/// Strong-Wolfe line search (bracketing then zoom with cubic interpolation).
fn line_search<F>(f: &mut F, x: &[f64], f0: f64, g0: &[f64], d: &[f64], alpha0: f64, cfg: &LbfgsConfig, evals: &mut usize) -> Option<Point>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let d0 = dot(g0, d);
    if !(d0 < 0.0) {
        return None;
    }
    let mut eval = |alpha: f64, evals: &mut usize| -> Point {
        *evals += 1;
        let (fv, g) = f(&axpy(x, alpha, d));
        let dg = dot(&g, d);
        Point { alpha, f: fv, g, dg }
    };
    let armijo = |p: &Point| p.f.is_finite() && p.f < f0 && p.f <= f0 + cfg.c1 * p.alpha * d0;
    let curvature = |p: &Point| p.dg.abs() <= -cfg.c2 * d0;
    let mut prev = Point { alpha: 0.0, f: f0, g: g0.to_vec(), dg: d0 };
    let mut alpha = alpha0;
    let mut budget = cfg.max_line_search;
    let (mut lo, mut hi);
    loop {
        if budget == 0 {
            return None;
        }
        budget -= 1;
        let cur = eval(alpha, evals);
        if !cur.f.is_finite() {
            // shrink into the finite region before bracketing
            alpha = 0.5 * (prev.alpha + alpha);
            continue;
        }
        if !armijo(&cur) || (prev.alpha > 0.0 && cur.f >= prev.f) {
            lo = prev;
            hi = cur;
            break;
        }
        if curvature(&cur) {
            return Some(cur);
        }
        if cur.dg >= 0.0 {
            lo = cur;
            hi = prev;
            break;
        }
        let next = (2.0 * alpha).min(alpha + 10.0 * (alpha - prev.alpha));
        prev = cur;
        alpha = next;
    }
    while budget > 0 {
        budget -= 1;
        let a = cubic_min(lo.alpha, lo.f, lo.dg, hi.alpha, hi.f, hi.dg);
        if (hi.alpha - lo.alpha).abs() <= 1e-16 * lo.alpha.abs().max(1.0) {
            break;
        }
        let cur = eval(a, evals);
        if !armijo(&cur) || cur.f >= lo.f {
            hi = cur;
        } else {
            if curvature(&cur) {
                return Some(cur);
            }
            if cur.dg * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    // accept a sufficient-decrease point even if the curvature test failed
    if lo.alpha > 0.0 && lo.f < f0 {
        return Some(lo);
    }
    None
}

/// Limited-memory BFGS with a strong-Wolfe line search. `f` returns the
/// loss and its gradient.
pub fn lbfgs_minimize<F>(mut f: F, theta0: &[f64], cfg: &LbfgsConfig) -> LbfgsResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    lbfgs_with_callback(&mut f, theta0, cfg, |_, _| {})
}

pub fn lbfgs_with_callback<F, C>(f: &mut F, theta0: &[f64], cfg: &LbfgsConfig, mut on_accept: C) -> LbfgsResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
    C: FnMut(usize, &[f64]),
{
    let mut x = theta0.to_vec();
    let (mut fx, mut g) = f(&x);
    let mut evals = 1;
    let mut history = vec![fx];
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho: Vec<f64> = Vec::new();
    let mut restarted = false;
    let inf_norm = |g: &[f64]| g.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let mut iter = 0;
    let reason = loop {
        if inf_norm(&g) <= cfg.gtol {
            break StopReason::Gradient;
        }
        if iter >= cfg.max_iters {
            break StopReason::IterationCap;
        }
        // two-loop recursion
        let mut q: Vec<f64> = g.clone();
        let k = s_hist.len();
        let mut a = vec![0.0; k];
        for i in (0..k).rev() {
            a[i] = rho[i] * dot(&s_hist[i], &q);
            q = axpy(&q, -a[i], &y_hist[i]);
        }
        let scale = if k > 0 { dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1]) } else { 1.0 };
        let mut r: Vec<f64> = q.iter().map(|v| v * scale).collect();
        for i in 0..k {
            let b = rho[i] * dot(&y_hist[i], &r);
            r = axpy(&r, a[i] - b, &s_hist[i]);
        }
        let d: Vec<f64> = r.iter().map(|v| -v).collect();
        let alpha0 = if k == 0 { (1.0 / inf_norm(&g)).min(1.0) } else { 1.0 };
        let Some(pt) = line_search(f, &x, fx, &g, &d, alpha0, cfg, &mut evals) else {
            if restarted || k == 0 {
                break StopReason::LineSearchFailure;
            }
            log::debug!("line search failed at iteration {iter}; restarting from steepest descent");
            restarted = true;
            s_hist.clear();
            y_hist.clear();
            rho.clear();
            continue;
        };
        let x_new = axpy(&x, pt.alpha, &d);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = pt.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let f_old = fx;
        x = x_new;
        fx = pt.f;
        g = pt.g;
        iter += 1;
        history.push(fx);
        on_accept(iter, &x);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if s_hist.len() == cfg.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
            rho.push(1.0 / sy);
        }
        if f_old - fx <= cfg.ftol * f_old.abs() {
            break StopReason::RelativeDecrease;
        }
    };
    LbfgsResult { theta: x, loss: fx, iterations: iter, evaluations: evals, history, reason }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub lbfgs: LbfgsConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { hidden: models::DEFAULT_HIDDEN.to_vec(), lbfgs: LbfgsConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub kind: ControllerKind,
    pub seed: u64,
    pub n_train: usize,
    pub iterations: usize,
    pub evaluations: usize,
    pub final_loss: f64,
    pub terms: LossTerms,
    pub seconds: f64,
    pub reason: StopReason,
    pub history: Vec<f64>,
}

/// Fits the scaler on `train`, initializes from `seed` and runs L-BFGS.
pub fn train_controller(
    kind: ControllerKind,
    problem: &dyn ControlProblem,
    lqr_sol: &RiccatiSolution,
    train: &Dataset,
    weights: &LossWeights,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<(Controller, TrainReport), TrainError> {
    let start = Instant::now();
    if kind == ControllerKind::Lqr {
        let c = Controller::lqr(problem, lqr_sol)?;
        let report = TrainReport {
            kind,
            seed,
            n_train: train.len(),
            iterations: 0,
            evaluations: 0,
            final_loss: 0.0,
            terms: LossTerms::default(),
            seconds: start.elapsed().as_secs_f64(),
            reason: StopReason::Gradient,
            history: vec![],
        };
        return Ok((c, report));
    }
    weights.validate(kind)?;
    if train.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let scaler = dataset::fit_scaler(train)?;
    let mut rng = dataset::stream_rng(seed, SeedStream::Init);
    let mut ctrl = Controller::new(kind, problem, lqr_sol, Some(scaler), &cfg.hidden, &mut rng)?;
    let theta0 = ctrl.params();
    let mut work = ctrl.clone();
    let mut failure: Option<TrainError> = None;
    let mut objective = |theta: &[f64]| -> (f64, Vec<f64>) {
        if work.set_params(theta).is_err() {
            return (f64::INFINITY, vec![0.0; theta.len()]);
        }
        match loss_and_grad(&work, problem, train, weights) {
            Ok((l, _, g)) => (l, g),
            Err(e) => {
                failure.get_or_insert(e);
                (f64::INFINITY, vec![0.0; theta.len()])
            }
        }
    };
    let res = lbfgs_with_callback(&mut objective, &theta0, &cfg.lbfgs, |_, theta| {
        if cfg!(debug_assertions) && matches!(kind, ControllerKind::LambdaQrNet | ControllerKind::UQrNet) {
            let mut c = ctrl.clone();
            c.set_params(theta).expect("accepted iterates are finite");
            let u = c.control(problem, problem.goal_state().view());
            debug_assert_eq!(&u, problem.goal_control(), "goal equilibrium lost during training");
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    ctrl.set_params(&res.theta)?;
    let (loss, terms, _) = loss_and_grad(&ctrl, problem, train, weights)?;
    let report = TrainReport {
        kind,
        seed,
        n_train: train.len(),
        iterations: res.iterations,
        evaluations: res.evaluations,
        final_loss: loss,
        terms,
        seconds: start.elapsed().as_secs_f64(),
        reason: res.reason,
        history: res.history,
    };
    Ok((ctrl, report))
}

/// Dense helper used by tests: rows of `(x, λ, u, V)` from explicit functions.
pub fn synthetic_dataset(
    xs: &[Vector],
    lambda: impl Fn(&Vector) -> Vector,
    u: impl Fn(&Vector) -> Vector,
    v: impl Fn(&Vector) -> f64,
) -> Dataset {
    let n = xs.first().map_or(0, |x| x.len());
    let m = xs.first().map_or(0, |x| u(x).len());
    let mut d = Dataset::empty(n, m);
    d.x = Matrix::from_shape_fn((xs.len(), n), |(i, j)| xs[i][j]);
    d.lambda = Matrix::from_shape_fn((xs.len(), n), |(i, j)| lambda(&xs[i])[j]);
    d.u = Matrix::from_shape_fn((xs.len(), m), |(i, j)| u(&xs[i])[j]);
    d.v = xs.iter().map(&v).collect();
    d.traj = vec![0; xs.len()];
    d
}

//! Tanh multilayer perceptrons and the feedback-controller architectures
//! built on them.
//!
//! Every network sees the state through the training-set scaler
//! `x̃ = 2(x − lo)/(hi − lo) − 1`. Network outputs are multiplied by the half
//! range of the corresponding target, so a unit output change is comparable to
//! the spread of the data.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AffineScale, ScalingTransform};
use crate::dynamics::{self, ControlProblem, DynamicsError, HamiltonianMinimizer};
use crate::linalg::{self, Matrix, Vector};
use crate::lqr::{self, RiccatiSolution};

pub const CONTROLLER_HEADER: &str = "# hjb-qrnet controller v1";
pub const DEFAULT_HIDDEN: [usize; 3] = [64, 64, 64];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("input has width {got}, network expects {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("controller was trained against Riccati solution {stored}, current problem gives {current}")]
    FingerprintMismatch { stored: String, current: String },
    #[error("control is saturated at x (component {0}); the feedback is not differentiable there")]
    NonDifferentiable(usize),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Fully connected network, tanh on hidden layers, identity on the output.
/// Parameters are stored flat: for each layer the weight matrix (row-major,
/// `out × in`) followed by the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    theta: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (p, q) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += p[k] * q[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(p, q)| p * q).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Forward cache: layer inputs `a_0 = x̃, a_1, …, a_{L−1}` and the output.
pub(crate) struct Pass {
    acts: Vec<Matrix>,
    pub(crate) out: Matrix,
}

/// Forward-mode tangents along a direction `h` (per sample).
pub(crate) struct Tangent {
    adot: Vec<Matrix>,
    zdot: Vec<Matrix>,
    #[cfg_attr(not(test), allow(dead_code))]
    pub(crate) out: Matrix,
}

impl Mlp {
    pub fn zeros(widths: &[usize]) -> Result<Self, ModelError> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(ModelError::Invalid(format!("layer widths {widths:?} must be nonzero with at least input and output")));
        }
        Ok(Self { widths: widths.to_vec(), theta: vec![0.0; param_count(widths)] })
    }

    /// Weights and biases uniform on `±1/√fan_in`.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self, ModelError> {
        let mut net = Self::zeros(widths)?;
        let mut off = 0;
        for w in widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for v in &mut net.theta[off..off + w[0] * w[1] + w[1]] {
                *v = rng.random_range(-bound..bound);
            }
            off += w[0] * w[1] + w[1];
        }
        Ok(net)
    }

    pub fn from_params(widths: &[usize], theta: Vec<f64>) -> Result<Self, ModelError> {
        let mut net = Self::zeros(widths)?;
        net.set_params(&theta)?;
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<(), ModelError> {
        if theta.len() != self.theta.len() {
            return Err(ModelError::Invalid(format!("expected {} parameters, got {}", self.theta.len(), theta.len())));
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(ModelError::Invalid("non-finite parameter".into()));
        }
        self.theta.copy_from_slice(theta);
        Ok(())
    }

    fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Offset of layer `l` (0-based) in the flat parameter vector.
    fn offset(&self, l: usize) -> usize {
        param_count(&self.widths[..=l])
    }

    fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (i, o) = (self.widths[l], self.widths[l + 1]);
        let off = self.offset(l);
        let w = ArrayView2::from_shape((o, i), &self.theta[off..off + o * i]).expect("layer shape");
        let b = ArrayView1::from(&self.theta[off + o * i..off + o * i + o]);
        (w, b)
    }

    fn check_width(&self, got: usize) -> Result<(), ModelError> {
        if got != self.input_dim() {
            return Err(ModelError::WidthMismatch { expected: self.input_dim(), got });
        }
        Ok(())
    }

    /// Single-sample forward pass on plain slices (the closed-loop simulator
    /// calls this millions of times).
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Vector, ModelError> {
        self.check_width(x.len())?;
        let mut a: Vec<f64> = x.iter().copied().collect();
        let mut z = Vec::with_capacity(self.widths.iter().copied().max().unwrap_or(0));
        for l in 0..self.layers() {
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            let off = self.offset(l);
            let w = &self.theta[off..off + o * i];
            let b = &self.theta[off + o * i..off + o * i + o];
            z.clear();
            z.extend(w.chunks_exact(i).zip(b).map(|(row, bk)| bk + dot(row, &a)));
            if l + 1 == self.layers() {
                return Ok(Vector::from(z));
            }
            z.iter_mut().for_each(|v| *v = v.tanh());
            std::mem::swap(&mut a, &mut z);
        }
        unreachable!("at least one layer")
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Matrix, ModelError> {
        self.check_width(x.ncols())?;
        Ok(self.pass(x).out)
    }

    pub(crate) fn pass(&self, x: ArrayView2<f64>) -> Pass {
        let mut acts = vec![x.to_owned()];
        for l in 0..self.layers() {
            let (w, b) = self.layer(l);
            let mut z = acts[l].dot(&w.t());
            z += &b;
            if l + 1 == self.layers() {
                return Pass { acts, out: z };
            }
            z.mapv_inplace(f64::tanh);
            acts.push(z);
        }
        unreachable!("at least one layer")
    }

    pub(crate) fn tangent(&self, pass: &Pass, h: ArrayView2<f64>) -> Tangent {
        let mut adot = vec![h.to_owned()];
        let mut zdot = vec![Matrix::zeros((0, 0))];
        for l in 0..self.layers() {
            let (w, _) = self.layer(l);
            let zd = adot[l].dot(&w.t());
            if l + 1 == self.layers() {
                return Tangent { adot, zdot, out: zd };
            }
            let a = &pass.acts[l + 1];
            let ad = &zd * &a.mapv(|v| 1.0 - v * v);
            zdot.push(zd);
            adot.push(ad);
        }
        unreachable!("at least one layer")
    }

    /// Accumulates into `grad` the parameter gradient of
    /// `Σ_i gy_iᵀ y(x_i) + gydot_iᵀ ẏ(x_i; h_i)`.
    pub(crate) fn backprop(
        &self,
        pass: &Pass,
        tangent: Option<&Tangent>,
        gy: ArrayView2<f64>,
        gydot: Option<ArrayView2<f64>>,
        grad: &mut [f64],
    ) {
        let mut zbar = gy.to_owned();
        let mut zdbar = gydot.map(|g| g.to_owned());
        for l in (0..self.layers()).rev() {
            let (w, _) = self.layer(l);
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            let off = self.offset(l);
            let mut wbar = zbar.t().dot(&pass.acts[l]);
            if let (Some(zd), Some(t)) = (&zdbar, tangent) {
                wbar += &zd.t().dot(&t.adot[l]);
            }
            for (g, v) in grad[off..off + o * i].iter_mut().zip(wbar.iter()) {
                *g += v;
            }
            for (g, v) in grad[off + o * i..off + o * i + o].iter_mut().zip(zbar.sum_axis(Axis(0)).iter()) {
                *g += v;
            }
            if l == 0 {
                break;
            }
            let a = &pass.acts[l];
            let sl = a.mapv(|v| 1.0 - v * v);
            let mut abar = zbar.dot(&w);
            if let (Some(zd), Some(t)) = (zdbar.as_ref(), tangent) {
                let adbar = zd.dot(&w);
                let sbar = &t.zdot[l] * &adbar;
                abar -= &(2.0 * a * &sbar);
                zdbar = Some(&sl * &adbar);
            }
            zbar = &sl * &abar;
        }
    }

    /// `Σ_k gy_k ∂y_k/∂x̃` per sample (rows).
    pub(crate) fn input_vjp(&self, pass: &Pass, gy: ArrayView2<f64>) -> Matrix {
        let mut zbar = gy.to_owned();
        for l in (0..self.layers()).rev() {
            let (w, _) = self.layer(l);
            let abar = zbar.dot(&w);
            if l == 0 {
                return abar;
            }
            zbar = &pass.acts[l].mapv(|v| 1.0 - v * v) * &abar;
        }
        unreachable!("at least one layer")
    }

    /// `p × n` Jacobian of the output with respect to the (scaled) input.
    pub fn jacobian_x(&self, x: ArrayView1<f64>) -> Result<Matrix, ModelError> {
        self.check_width(x.len())?;
        let p = self.output_dim();
        let xs = Array2::from_shape_fn((p, x.len()), |(_, j)| x[j]);
        let pass = self.pass(xs.view());
        Ok(self.input_vjp(&pass, Matrix::eye(p).view()))
    }

    /// `p × |θ|` matrix whose row `k` is `∂y_k/∂θ`.
    pub fn grad_params(&self, x: ArrayView1<f64>) -> Result<Matrix, ModelError> {
        self.check_width(x.len())?;
        let p = self.output_dim();
        let pass = self.pass(x.insert_axis(Axis(0)));
        let mut out = Matrix::zeros((p, self.n_params()));
        for k in 0..p {
            let mut gy = Matrix::zeros((1, p));
            gy[[0, k]] = 1.0;
            let mut g = vec![0.0; self.n_params()];
            self.backprop(&pass, None, gy.view(), None, &mut g);
            out.row_mut(k).assign(&ArrayView1::from(&g));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ControllerKind {
    #[serde(rename = "lqr")]
    Lqr,
    #[serde(rename = "v-nn")]
    VNn,
    #[serde(rename = "qrnet")]
    QrNet,
    #[serde(rename = "u-nn")]
    UNn,
    #[serde(rename = "lambda-qrnet")]
    LambdaQrNet,
    #[serde(rename = "u-qrnet")]
    UQrNet,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 6] = [
        ControllerKind::Lqr,
        ControllerKind::VNn,
        ControllerKind::QrNet,
        ControllerKind::UNn,
        ControllerKind::LambdaQrNet,
        ControllerKind::UQrNet,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ControllerKind::Lqr => "lqr",
            ControllerKind::VNn => "v-nn",
            ControllerKind::QrNet => "qrnet",
            ControllerKind::UNn => "u-nn",
            ControllerKind::LambdaQrNet => "lambda-qrnet",
            ControllerKind::UQrNet => "u-qrnet",
        }
    }

    /// Value-function models (control from the gradient of `V̂`).
    pub fn is_value(self) -> bool {
        matches!(self, ControllerKind::VNn | ControllerKind::QrNet)
    }

    pub fn has_network(self) -> bool {
        self != ControllerKind::Lqr
    }

    pub fn output_width(self, n: usize, m: usize) -> usize {
        match self {
            ControllerKind::Lqr => 0,
            ControllerKind::VNn | ControllerKind::QrNet => 1,
            ControllerKind::UNn | ControllerKind::UQrNet => m,
            ControllerKind::LambdaQrNet => n,
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ControllerKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|k| k.tag() == s).ok_or_else(|| ModelError::Invalid(format!("unknown controller kind `{s}`")))
    }
}

fn logistic(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Componentwise generalized logistic
/// `σ(v) = u_min + (u_max − u_min)/(1 + c1 exp(−c2 (v − u_f)))`,
/// identity on components without finite bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Saturation {
    pub lower: Vector,
    pub upper: Vector,
    pub u_goal: Vector,
    pub c1: Vector,
    pub c2: Vector,
    bounded: Vec<bool>,
}

impl Saturation {
    pub fn new(lower: &Vector, upper: &Vector, u_goal: &Vector) -> Result<Self, ModelError> {
        let m = u_goal.len();
        let mut c1 = Vector::ones(m);
        let mut c2 = Vector::ones(m);
        let mut bounded = vec![false; m];
        for i in 0..m {
            let (lo, hi, uf) = (lower[i], upper[i], u_goal[i]);
            match (lo.is_finite(), hi.is_finite()) {
                (false, false) => {}
                (true, true) => {
                    if !(lo < uf && uf < hi) {
                        return Err(ModelError::Invalid(format!(
                            "u_f[{i}] = {uf} must lie strictly inside ({lo}, {hi}) for the saturation"
                        )));
                    }
                    c1[i] = (hi - uf) / (uf - lo);
                    c2[i] = (hi - lo) / ((hi - uf) * (uf - lo));
                    bounded[i] = true;
                }
                _ => {
                    return Err(ModelError::Invalid(format!("control {i} has a one-sided bound; saturation needs both")));
                }
            }
        }
        Ok(Self { lower: lower.clone(), upper: upper.clone(), u_goal: u_goal.clone(), c1, c2, bounded })
    }

    /// `(σ(v), σ'(v))`.
    pub fn apply(&self, v: ArrayView1<f64>) -> (Vector, Vector) {
        let mut out = v.to_owned();
        let mut d = Vector::ones(v.len());
        for i in 0..v.len() {
            if !self.bounded[i] {
                continue;
            }
            let (lo, hi) = (self.lower[i], self.upper[i]);
            let arg = self.c2[i] * (v[i] - self.u_goal[i]) - self.c1[i].ln();
            let l = logistic(arg);
            let lc = logistic(-arg);
            out[i] = if v[i] == self.u_goal[i] {
                self.u_goal[i]
            } else if l >= 0.5 {
                hi - (hi - lo) * lc
            } else {
                lo + (hi - lo) * l
            };
            d[i] = (hi - lo) * self.c2[i] * l * lc;
        }
        (out, d)
    }
}

/// `(1/γ) log(1 + γV)` with its derivatives in `V` and in `γ`.
pub(crate) fn damped_value(v: f64, gamma: f64) -> (f64, f64, f64) {
    let z = gamma * v;
    let dv = 1.0 / (1.0 + z);
    if z.abs() < 1e-8 {
        let val = v * (1.0 - z / 2.0 + z * z / 3.0);
        let dg = v * v * (-0.5 + 2.0 * z / 3.0);
        return (val, dv, dg);
    }
    let val = z.ln_1p() / gamma;
    let dg = v / (gamma * (1.0 + z)) - z.ln_1p() / (gamma * gamma);
    (val, dv, dg)
}

/// A feedback law `x ↦ û(x)` of one of the six supported kinds.
#[derive(Debug, Clone)]
pub struct Controller {
    kind: ControllerKind,
    net: Option<Mlp>,
    log_gamma: f64,
    lqr: RiccatiSolution,
    scaler: ScalingTransform,
    minimizer: HamiltonianMinimizer,
    lower: Vector,
    upper: Vector,
    sat: Saturation,
    /// `dx̃/dx`, diagonal.
    in_scale: Vector,
    /// Physical units per unit of network output.
    out_scale: Vector,
    x_goal_scaled: Vector,
    /// Network output at `x̃_f`, refreshed whenever the parameters change.
    y_goal: Vector,
}

/// Quantities of one evaluation needed by both the feedback and its
/// derivatives.
struct Eval {
    u: Vector,
    /// Pre-clamp / pre-saturation control.
    pre: Vector,
    lambda: Option<Vector>,
}

impl Controller {
    /// Fresh controller with a seeded initialization (LQR ignores `rng`).
    pub fn new<R: Rng + ?Sized>(
        kind: ControllerKind,
        problem: &dyn ControlProblem,
        lqr: &RiccatiSolution,
        scaler: Option<ScalingTransform>,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let (n, m) = (problem.state_dim(), problem.control_dim());
        let net = if kind.has_network() {
            let mut widths = vec![n];
            widths.extend_from_slice(hidden);
            widths.push(kind.output_width(n, m));
            Some(Mlp::init(&widths, rng)?)
        } else {
            None
        };
        Self::assemble(kind, problem, lqr, scaler, net, 0.0)
    }

    pub fn lqr(problem: &dyn ControlProblem, lqr: &RiccatiSolution) -> Result<Self, ModelError> {
        Self::assemble(ControllerKind::Lqr, problem, lqr, None, None, 0.0)
    }

    pub fn from_parts(
        kind: ControllerKind,
        problem: &dyn ControlProblem,
        lqr: &RiccatiSolution,
        scaler: Option<ScalingTransform>,
        net: Option<Mlp>,
        log_gamma: f64,
    ) -> Result<Self, ModelError> {
        Self::assemble(kind, problem, lqr, scaler, net, log_gamma)
    }

    fn assemble(
        kind: ControllerKind,
        problem: &dyn ControlProblem,
        lqr: &RiccatiSolution,
        scaler: Option<ScalingTransform>,
        net: Option<Mlp>,
        log_gamma: f64,
    ) -> Result<Self, ModelError> {
        let (n, m) = (problem.state_dim(), problem.control_dim());
        if lqr.state_dim() != n || lqr.control_dim() != m {
            return Err(ModelError::Invalid("Riccati solution does not match the problem dimensions".into()));
        }
        let scaler = scaler.unwrap_or_else(|| ScalingTransform {
            x: AffineScale::identity(n),
            lambda: AffineScale::identity(n),
            u: AffineScale::identity(m),
            v: AffineScale::identity(1),
        });
        if scaler.x.dim() != n || scaler.lambda.dim() != n || scaler.u.dim() != m || scaler.v.dim() != 1 {
            return Err(ModelError::Invalid("scaler dimensions do not match the problem".into()));
        }
        match (&net, kind.has_network()) {
            (Some(net), true) => {
                let out = kind.output_width(n, m);
                if net.input_dim() != n || net.output_dim() != out {
                    return Err(ModelError::Invalid(format!(
                        "{kind} needs a network {n} → {out}, got {} → {}",
                        net.input_dim(),
                        net.output_dim()
                    )));
                }
            }
            (None, false) => {}
            _ => return Err(ModelError::Invalid(format!("{kind} network presence mismatch"))),
        }
        if !log_gamma.is_finite() {
            return Err(ModelError::Invalid("log γ must be finite".into()));
        }
        let sat = if kind == ControllerKind::UQrNet {
            Saturation::new(problem.control_lower(), problem.control_upper(), problem.goal_control())?
        } else {
            Saturation::new(&Vector::from_elem(m, f64::NEG_INFINITY), &Vector::from_elem(m, f64::INFINITY), problem.goal_control())?
        };
        let in_scale = 2.0 / (&scaler.x.hi - &scaler.x.lo);
        let out_scale = match kind {
            ControllerKind::Lqr => Vector::zeros(0),
            ControllerKind::VNn | ControllerKind::QrNet => scaler.v.half_range(),
            ControllerKind::UNn | ControllerKind::UQrNet => scaler.u.half_range(),
            ControllerKind::LambdaQrNet => scaler.lambda.half_range(),
        };
        let x_goal_scaled = scaler.x.apply(problem.goal_state().view());
        let y_goal = match &net {
            Some(net) => net.forward(x_goal_scaled.view())?,
            None => Vector::zeros(0),
        };
        Ok(Self {
            kind,
            net,
            log_gamma,
            lqr: lqr.clone(),
            scaler,
            minimizer: HamiltonianMinimizer::new(problem)?,
            lower: problem.control_lower().clone(),
            upper: problem.control_upper().clone(),
            sat,
            in_scale,
            out_scale,
            x_goal_scaled,
            y_goal,
        })
    }

    pub fn kind(&self) -> ControllerKind {
        self.kind
    }

    pub fn network(&self) -> Option<&Mlp> {
        self.net.as_ref()
    }

    pub fn riccati(&self) -> &RiccatiSolution {
        &self.lqr
    }

    pub fn scaler(&self) -> &ScalingTransform {
        &self.scaler
    }

    pub fn saturation(&self) -> &Saturation {
        &self.sat
    }

    pub fn gamma(&self) -> f64 {
        self.log_gamma.exp()
    }

    pub(crate) fn minimizer(&self) -> &HamiltonianMinimizer {
        &self.minimizer
    }

    pub(crate) fn in_scale(&self) -> &Vector {
        &self.in_scale
    }

    pub(crate) fn out_scale(&self) -> &Vector {
        &self.out_scale
    }

    pub(crate) fn x_goal_scaled(&self) -> &Vector {
        &self.x_goal_scaled
    }

    pub(crate) fn bounds(&self) -> (&Vector, &Vector) {
        (&self.lower, &self.upper)
    }

    /// Trainable parameters: network weights, then `log γ` for QRnet.
    pub fn params(&self) -> Vec<f64> {
        let mut out = self.net.as_ref().map(|n| n.params().to_vec()).unwrap_or_default();
        if self.kind == ControllerKind::QrNet {
            out.push(self.log_gamma);
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.net.as_ref().map_or(0, |n| n.n_params()) + usize::from(self.kind == ControllerKind::QrNet)
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<(), ModelError> {
        if theta.len() != self.n_params() {
            return Err(ModelError::Invalid(format!("expected {} parameters, got {}", self.n_params(), theta.len())));
        }
        if let Some(net) = self.net.as_mut() {
            net.set_params(&theta[..net.n_params()])?;
            self.y_goal = net.forward(self.x_goal_scaled.view())?;
        }
        if self.kind == ControllerKind::QrNet {
            let lg = *theta.last().expect("QRnet has log γ");
            if !lg.is_finite() {
                return Err(ModelError::Invalid("non-finite log γ".into()));
            }
            self.log_gamma = lg;
        }
        Ok(())
    }

    fn clamp(&self, mut u: Vector) -> Vector {
        for i in 0..u.len() {
            u[i] = u[i].clamp(self.lower[i], self.upper[i]);
        }
        u
    }

    fn net_at(&self, x: ArrayView1<f64>) -> Vector {
        let net = self.net.as_ref().expect("network kinds only");
        net.forward(self.scaler.x.apply(x).view()).expect("width checked at construction")
    }

    fn value_and_gradient(&self, x: ArrayView1<f64>) -> (f64, Vector) {
        let net = self.net.as_ref().expect("value kinds have a network");
        let xs = self.scaler.x.apply(x);
        let y = net.forward(xs.view()).expect("width checked")[0];
        let gy = net.jacobian_x(xs.view()).expect("width checked").row(0).to_owned();
        let hv = self.out_scale[0];
        let g_net = &gy * &self.in_scale * hv;
        match self.kind {
            ControllerKind::VNn => (self.scaler.v.lo[0] + (y + 1.0) * hv, g_net),
            ControllerKind::QrNet => {
                let v_lqr = lqr::lqr_value(&self.lqr, x);
                let (phi, dphi, _) = damped_value(v_lqr, self.gamma());
                (phi + hv * y, lqr::lqr_gradient(&self.lqr, x) * dphi + g_net)
            }
            _ => unreachable!("value kinds only"),
        }
    }

    fn evaluate(&self, problem: &dyn ControlProblem, x: ArrayView1<f64>) -> Eval {
        match self.kind {
            ControllerKind::Lqr => {
                let pre = lqr::lqr_control(&self.lqr, x);
                Eval { u: self.clamp(pre.clone()), pre, lambda: None }
            }
            ControllerKind::VNn | ControllerKind::QrNet => {
                let (_, g) = self.value_and_gradient(x);
                let pre = self.minimizer.stationary(problem, x, g.view());
                Eval { u: self.clamp(pre.clone()), pre, lambda: Some(g) }
            }
            ControllerKind::LambdaQrNet => {
                let lam = self.costate_unchecked(x);
                let pre = self.minimizer.stationary(problem, x, lam.view());
                Eval { u: self.clamp(pre.clone()), pre, lambda: Some(lam) }
            }
            ControllerKind::UNn => {
                let pre = self.scaler.u.invert(self.net_at(x).view());
                Eval { u: self.clamp(pre.clone()), pre, lambda: None }
            }
            ControllerKind::UQrNet => {
                let pre = self.u_qrnet_pre(x);
                Eval { u: self.sat.apply(pre.view()).0, pre, lambda: None }
            }
        }
    }

    fn costate_unchecked(&self, x: ArrayView1<f64>) -> Vector {
        let d = self.net_at(x) - &self.y_goal;
        lqr::lqr_gradient(&self.lqr, x) + &(&self.out_scale * &d)
    }

    fn u_qrnet_pre(&self, x: ArrayView1<f64>) -> Vector {
        let d = self.net_at(x) - &self.y_goal;
        lqr::lqr_control(&self.lqr, x) + &(&self.out_scale * &d)
    }

    /// Feedback control `û(x)`.
    pub fn control(&self, problem: &dyn ControlProblem, x: ArrayView1<f64>) -> Vector {
        self.evaluate(problem, x).u
    }

    /// Costate estimate: `λ̂` for λ-QRnet, `∇V̂` for value models, `2P(x − x_f)` for LQR.
    pub fn costate(&self, x: ArrayView1<f64>) -> Option<Vector> {
        match self.kind {
            ControllerKind::Lqr => Some(lqr::lqr_gradient(&self.lqr, x)),
            ControllerKind::LambdaQrNet => Some(self.costate_unchecked(x)),
            ControllerKind::VNn | ControllerKind::QrNet => Some(self.value_and_gradient(x).1),
            _ => None,
        }
    }

    pub fn value(&self, x: ArrayView1<f64>) -> Option<f64> {
        match self.kind {
            ControllerKind::Lqr => Some(lqr::lqr_value(&self.lqr, x)),
            ControllerKind::VNn | ControllerKind::QrNet => Some(self.value_and_gradient(x).0),
            _ => None,
        }
    }

    /// `∂û/∂x`. Analytic for LQR, λ-QRnet, u-NN and u-QRnet; central
    /// differences of the feedback for value models.
    pub fn jacobian(&self, problem: &dyn ControlProblem, x: ArrayView1<f64>) -> Result<Matrix, ModelError> {
        let ev = self.evaluate(problem, x);
        let n = x.len();
        if self.kind != ControllerKind::UQrNet {
            for i in 0..ev.pre.len() {
                let at = |b: f64| b.is_finite() && (ev.pre[i] - b).abs() <= 1e-12 * (1.0 + b.abs());
                if at(self.lower[i]) || at(self.upper[i]) {
                    return Err(ModelError::NonDifferentiable(i));
                }
            }
        }
        let mask = dynamics::active_mask(problem, ev.pre.view());
        let net_jac = |this: &Self| -> Matrix {
            let net = this.net.as_ref().expect("network kinds only");
            let j = net.jacobian_x(this.scaler.x.apply(x).view()).expect("width checked");
            let mut j = j * &this.in_scale;
            for (mut row, s) in j.rows_mut().into_iter().zip(this.out_scale.iter()) {
                row *= *s;
            }
            j
        };
        let mut jac = match self.kind {
            ControllerKind::Lqr => -&self.lqr.k,
            ControllerKind::LambdaQrNet => {
                let lam = ev.lambda.as_ref().expect("λ-QRnet costate");
                let jl = 2.0 * &self.lqr.p + &net_jac(self);
                let fu = problem.jacobian_u(x, problem.goal_control().view());
                let coupling = problem.input_coupling(x, problem.goal_control().view(), lam.view());
                -0.5 * self.minimizer.r_inv().dot(&(fu.t().dot(&jl) + coupling))
            }
            ControllerKind::UNn => net_jac(self),
            ControllerKind::UQrNet => {
                let (_, d) = self.sat.apply(ev.pre.view());
                let mut j = -&self.lqr.k + &net_jac(self);
                for (mut row, s) in j.rows_mut().into_iter().zip(d.iter()) {
                    row *= *s;
                }
                return Ok(j);
            }
            ControllerKind::VNn | ControllerKind::QrNet => {
                let h = 1e-6 * (1.0 + linalg::vec_norm(x));
                let mut j = Matrix::zeros((ev.u.len(), n));
                for k in 0..n {
                    let mut xp = x.to_owned();
                    let mut xm = x.to_owned();
                    xp[k] += h;
                    xm[k] -= h;
                    let d = (self.control(problem, xp.view()) - self.control(problem, xm.view())) / (2.0 * h);
                    j.column_mut(k).assign(&d);
                }
                return Ok(j);
            }
        };
        for (mut row, mk) in jac.rows_mut().into_iter().zip(mask.iter()) {
            row *= *mk;
        }
        Ok(jac)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(CONTROLLER_HEADER);
        out.push('\n');
        let _ = writeln!(out, "kind={}", self.kind);
        let _ = writeln!(out, "state_dim={}", self.lqr.state_dim());
        let _ = writeln!(out, "control_dim={}", self.lqr.control_dim());
        let _ = writeln!(out, "riccati={}", self.lqr.fingerprint());
        let Some(net) = &self.net else {
            return out;
        };
        let join = |v: &Vector| v.iter().map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(",");
        let widths = net.widths().iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",");
        let _ = writeln!(out, "widths={widths}");
        if self.kind == ControllerKind::QrNet {
            let _ = writeln!(out, "log_gamma={:.16e}", self.log_gamma);
        }
        for (name, sc) in [("x", &self.scaler.x), ("lambda", &self.scaler.lambda), ("u", &self.scaler.u), ("v", &self.scaler.v)] {
            let _ = writeln!(out, "scale_{name}_lo={}", join(&sc.lo));
            let _ = writeln!(out, "scale_{name}_hi={}", join(&sc.hi));
        }
        let _ = writeln!(out, "[theta]");
        for v in net.params() {
            let _ = writeln!(out, "{v:.16e}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path, problem: &dyn ControlProblem, lqr: &RiccatiSolution) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text, &path.display().to_string(), problem, lqr)
    }

    pub fn from_text(text: &str, name: &str, problem: &dyn ControlProblem, lqr: &RiccatiSolution) -> Result<Self, ModelError> {
        let err = |line: usize, msg: String| ModelError::Parse { path: name.to_string(), line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l.trim_end() == CONTROLLER_HEADER => {}
            Some((i, l)) => return Err(err(i, format!("expected `{CONTROLLER_HEADER}`, found `{l}`"))),
            None => return Err(err(1, "empty file".into())),
        }
        let mut fields: Vec<(usize, String, String)> = Vec::new();
        let mut theta = Vec::new();
        let mut theta_line = None;
        for (i, l) in lines.by_ref() {
            if l.trim() == "[theta]" {
                theta_line = Some(i);
                break;
            }
            if l.trim().is_empty() {
                continue;
            }
            let (k, v) = l.split_once('=').ok_or_else(|| err(i, format!("expected key=value, found `{l}`")))?;
            fields.push((i, k.trim().to_string(), v.trim().to_string()));
        }
        for (i, l) in lines {
            if l.trim().is_empty() {
                continue;
            }
            let v: f64 = l.trim().parse().map_err(|_| err(i, format!("bad parameter `{l}`")))?;
            if !v.is_finite() {
                return Err(err(i, "non-finite parameter".into()));
            }
            theta.push(v);
        }
        let last = fields.last().map_or(1, |f| f.0);
        let get = |key: &str| -> Result<(usize, &str), ModelError> {
            fields.iter().find(|f| f.1 == key).map(|f| (f.0, f.2.as_str())).ok_or_else(|| err(last, format!("missing `{key}`")))
        };
        let int = |key: &str| -> Result<usize, ModelError> {
            let (i, v) = get(key)?;
            v.parse().map_err(|_| err(i, format!("`{key}` is not an integer")))
        };
        let (ki, kv) = get("kind")?;
        let kind: ControllerKind = kv.parse().map_err(|e: ModelError| err(ki, e.to_string()))?;
        let (n, m) = (int("state_dim")?, int("control_dim")?);
        if n != problem.state_dim() || m != problem.control_dim() {
            return Err(err(ki, format!("controller is {n}×{m}, problem is {}×{}", problem.state_dim(), problem.control_dim())));
        }
        let stored = get("riccati")?.1.to_string();
        let current = lqr.fingerprint();
        if stored != current {
            return Err(ModelError::FingerprintMismatch { stored, current });
        }
        if !kind.has_network() {
            if theta_line.is_some() {
                return Err(err(theta_line.unwrap_or(1), "LQR controllers have no parameters".into()));
            }
            return Self::lqr(problem, lqr);
        }
        let (wi, wv) = get("widths")?;
        let widths: Vec<usize> = wv
            .split(',')
            .map(|w| w.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| err(wi, format!("bad widths `{wv}`")))?;
        if widths.len() < 2 || widths[0] != n || *widths.last().unwrap_or(&0) != kind.output_width(n, m) || widths.contains(&0) {
            return Err(err(wi, format!("widths {widths:?} do not fit a {kind} controller with n = {n}, m = {m}")));
        }
        let tl = theta_line.ok_or_else(|| err(last, "missing [theta] block".into()))?;
        if theta.len() != param_count(&widths) {
            return Err(err(tl, format!("expected {} parameters, found {}", param_count(&widths), theta.len())));
        }
        let vec = |key: &str, len: usize| -> Result<Vector, ModelError> {
            let (i, v) = get(key)?;
            let vals: Vec<f64> = v
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| err(i, format!("bad numbers in `{key}`")))?;
            if vals.len() != len || !vals.iter().all(|v| v.is_finite()) {
                return Err(err(i, format!("`{key}` needs {len} finite values")));
            }
            Ok(Vector::from(vals))
        };
        let scale = |name: &str, len: usize| -> Result<AffineScale, ModelError> {
            Ok(AffineScale { lo: vec(&format!("scale_{name}_lo"), len)?, hi: vec(&format!("scale_{name}_hi"), len)? })
        };
        let scaler = ScalingTransform { x: scale("x", n)?, lambda: scale("lambda", n)?, u: scale("u", m)?, v: scale("v", 1)? };
        let log_gamma = if kind == ControllerKind::QrNet {
            let (i, v) = get("log_gamma")?;
            v.parse().map_err(|_| err(i, "bad log_gamma".into()))?
        } else {
            0.0
        };
        let net = Mlp::from_params(&widths, theta)?;
        Self::assemble(kind, problem, lqr, Some(scaler), Some(net), log_gamma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{stream_rng, SeedStream};
    use crate::dynamics::{BurgersConfig, BurgersProblem, LinearQuadraticProblem};
    use ndarray::array;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Vector {
        (0..n).map(|_| rng.random_range(-s..s)).collect()
    }

    /// Loop-based evaluation written independently of the ndarray path.
    fn naive_forward(widths: &[usize], theta: &[f64], x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let mut off = 0;
        for l in 0..widths.len() - 1 {
            let (i, o) = (widths[l], widths[l + 1]);
            let mut z = vec![0.0; o];
            for r in 0..o {
                let mut acc = theta[off + o * i + r];
                for c in 0..i {
                    acc += theta[off + r * i + c] * a[c];
                }
                z[r] = if l + 2 == widths.len() { acc } else { acc.tanh() };
            }
            off += o * i + o;
            a = z;
        }
        a
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn forward_trivial_cases() {
        let net = Mlp::zeros(&[3, 5, 2]).unwrap();
        assert_eq!(net.forward(array![1.0, 2.0, 3.0].view()).unwrap(), array![0.0, 0.0]);
        let lin = Mlp::from_params(&[2, 2], vec![1.0, 2.0, 3.0, 4.0, 0.5, -0.5]).unwrap();
        assert_eq!(lin.forward(array![1.0, 1.0].view()).unwrap(), array![3.5, 6.5]);
        assert_eq!(lin.jacobian_x(array![0.3, -2.0].view()).unwrap(), array![[1.0, 2.0], [3.0, 4.0]]);
        assert!(matches!(net.forward(array![1.0].view()), Err(ModelError::WidthMismatch { .. })));
        assert!(Mlp::zeros(&[3]).is_err());
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let mut rng = stream_rng(11, SeedStream::Init);
        let widths = [4, 7, 6, 3];
        let net = Mlp::init(&widths, &mut rng).unwrap();
        assert_eq!(net.n_params(), 4 * 7 + 7 + 7 * 6 + 6 + 6 * 3 + 3);
        for _ in 0..20 {
            let x = rand_vec(&mut rng, 4, 2.0);
            let y = net.forward(x.view()).unwrap();
            let z = naive_forward(&widths, net.params(), x.as_slice().unwrap());
            for (a, b) in y.iter().zip(z.iter()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn spatial_and_parameter_derivatives_match_differences() {
        let mut rng = stream_rng(12, SeedStream::Init);
        let widths = [3, 6, 5, 2];
        let net = Mlp::init(&widths, &mut rng).unwrap();
        let h = 1e-6;
        for _ in 0..50 {
            let x = rand_vec(&mut rng, 3, 1.5);
            let j = net.jacobian_x(x.view()).unwrap();
            for c in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[c] += h;
                xm[c] -= h;
                let d = (net.forward(xp.view()).unwrap() - net.forward(xm.view()).unwrap()) / (2.0 * h);
                for r in 0..2 {
                    assert!(rel_err(j[[r, c]], d[r]) < 1e-6, "{} vs {}", j[[r, c]], d[r]);
                }
            }
            let g = net.grad_params(x.view()).unwrap();
            for k in (0..net.n_params()).step_by(5) {
                let mut tp = net.params().to_vec();
                let mut tm = tp.clone();
                tp[k] += h;
                tm[k] -= h;
                let yp = naive_forward(&widths, &tp, x.as_slice().unwrap());
                let ym = naive_forward(&widths, &tm, x.as_slice().unwrap());
                for r in 0..2 {
                    assert!(rel_err(g[[r, k]], (yp[r] - ym[r]) / (2.0 * h)) < 1e-6);
                }
            }
        }
    }

    #[test]
    fn tangent_backprop_matches_differences() {
        // d/dθ of hᵀ ∇y(x) for a scalar network
        let mut rng = stream_rng(13, SeedStream::Init);
        let net = Mlp::init(&[3, 5, 4, 1], &mut rng).unwrap();
        let x = Matrix::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let hdir = Matrix::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let phi = |theta: &[f64]| -> f64 {
            let n = Mlp::from_params(net.widths(), theta.to_vec()).unwrap();
            let pass = n.pass(x.view());
            let t = n.tangent(&pass, hdir.view());
            t.out.sum() + 0.3 * pass.out.sum()
        };
        let pass = net.pass(x.view());
        let t = net.tangent(&pass, hdir.view());
        let g = net.input_vjp(&pass, Matrix::ones((4, 1)).view());
        assert!(((&g * &hdir).sum() - t.out.sum()).abs() < 1e-12);
        let mut grad = vec![0.0; net.n_params()];
        net.backprop(&pass, Some(&t), Matrix::from_elem((4, 1), 0.3).view(), Some(Matrix::ones((4, 1)).view()), &mut grad);
        for k in 0..net.n_params() {
            let mut tp = net.params().to_vec();
            let mut tm = tp.clone();
            tp[k] += 1e-6;
            tm[k] -= 1e-6;
            let fd = (phi(&tp) - phi(&tm)) / 2e-6;
            assert!(rel_err(grad[k], fd) < 1e-6, "param {k}: {} vs {fd}", grad[k]);
        }
    }

    #[test]
    fn saturation_constants_and_slope() {
        let s = Saturation::new(&array![-1.0], &array![1.0], &array![0.0]).unwrap();
        assert_eq!((s.c1[0], s.c2[0]), (1.0, 2.0));
        assert_eq!(s.apply(array![0.0].view()).0[0], 0.0);
        let h = 1e-6;
        let slope = (s.apply(array![h].view()).0[0] - s.apply(array![-h].view()).0[0]) / (2.0 * h);
        assert!((slope - 1.0).abs() < 1e-8);
        assert!((s.apply(array![0.0].view()).1[0] - 1.0).abs() < 1e-15);
        let tail: Vec<f64> = [2.0, 5.0, 10.0].iter().map(|&v| s.apply(array![v].view()).0[0]).collect();
        assert!(tail.windows(2).all(|w| w[0] < w[1]) && tail[2] < 1.0 && 1.0 - tail[2] < 1e-8);
        let asym = Saturation::new(&array![-0.5], &array![2.0], &array![0.25]).unwrap();
        let (v, d) = asym.apply(array![0.25].view());
        assert_eq!(v[0], 0.25);
        assert!((d[0] - 1.0).abs() < 1e-14);
        assert!(Saturation::new(&array![0.0], &array![1.0], &array![0.0]).is_err());
        assert!(Saturation::new(&array![0.0], &array![f64::INFINITY], &array![0.5]).is_err());
    }

    #[test]
    fn damped_value_series_and_limit() {
        let (a, da, _) = damped_value(2.0, 1e-12);
        assert!((a - 2.0).abs() < 1e-10 && (da - 1.0).abs() < 1e-10);
        let (b, db, dg) = damped_value(2.0, 0.5);
        assert!((b - 2.0f64.ln() * 2.0).abs() < 1e-15);
        assert!((db - 0.5).abs() < 1e-15);
        let fd = (damped_value(2.0, 0.5 + 1e-7).0 - damped_value(2.0, 0.5 - 1e-7).0) / 2e-7;
        assert!((dg - fd).abs() < 1e-7);
        let fd0 = (damped_value(2.0, 2e-9).0 - damped_value(2.0, 1e-9).0) / 1e-9;
        let (_, _, dg0) = damped_value(2.0, 1.5e-9);
        assert!((dg0 - fd0).abs() < 1e-5);
    }

    fn bounded_lq() -> (LinearQuadraticProblem, RiccatiSolution) {
        let p = LinearQuadraticProblem::new(
            array![[0.5, 1.0, 0.0], [0.0, -1.0, 0.3], [0.2, 0.0, 0.1]],
            array![[0.0, 1.0], [1.0, 0.0], [0.5, 0.5]],
            Matrix::eye(3),
            array![[1.0, 0.0], [0.0, 2.0]],
        )
        .unwrap()
        .with_bounds(array![-1.0, -2.0], array![1.5, 1.0])
        .unwrap();
        let s = RiccatiSolution::for_problem(&p).unwrap();
        (p, s)
    }

    fn random_scaler(rng: &mut ChaCha8Rng, n: usize, m: usize) -> ScalingTransform {
        let sc = |rng: &mut ChaCha8Rng, d: usize| {
            let lo = rand_vec(rng, d, 1.0) - 2.0;
            let hi = rand_vec(rng, d, 1.0) + 2.0;
            AffineScale { lo, hi }
        };
        ScalingTransform { x: sc(rng, n), lambda: sc(rng, n), u: sc(rng, m), v: sc(rng, 1) }
    }

    #[test]
    fn proposition_one_for_random_parameters() {
        let burgers = BurgersProblem::new(BurgersConfig::default()).unwrap();
        let bs = RiccatiSolution::for_problem(&burgers).unwrap();
        let (lq, ls) = bounded_lq();
        let mut rng = stream_rng(21, SeedStream::Init);
        for (p, s) in [(&burgers as &dyn ControlProblem, &bs), (&lq as &dyn ControlProblem, &ls)] {
            let xf = p.goal_state().clone();
            for kind in [ControllerKind::LambdaQrNet, ControllerKind::UQrNet] {
                for _ in 0..100 {
                    let sc = random_scaler(&mut rng, p.state_dim(), p.control_dim());
                    let c = Controller::new(kind, p, s, Some(sc), &[8, 8], &mut rng).unwrap();
                    let u = c.control(p, xf.view());
                    assert_eq!(u, *p.goal_control());
                    let f = dynamics::eval_dynamics(p, xf.view(), u.view()).unwrap();
                    assert!(linalg::vec_norm(f.view()) <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_network_reduces_to_lqr() {
        let (p, s) = bounded_lq();
        let unbounded = LinearQuadraticProblem::new(p.a().clone(), p.b().clone(), Matrix::eye(3), array![[1.0, 0.0], [0.0, 2.0]]).unwrap();
        let mut rng = stream_rng(22, SeedStream::Init);
        for kind in [ControllerKind::LambdaQrNet, ControllerKind::UQrNet] {
            let mut c = Controller::new(kind, &unbounded, &s, Some(random_scaler(&mut rng, 3, 2)), &[6], &mut rng).unwrap();
            c.set_params(&vec![0.0; c.n_params()]).unwrap();
            for _ in 0..50 {
                let x = rand_vec(&mut rng, 3, 2.0);
                let u = c.control(&unbounded, x.view());
                let ul = lqr::lqr_control(&s, x.view());
                assert!((&u - &ul).iter().all(|e| e.abs() <= 1e-14 * (1.0 + ul.iter().fold(0.0f64, |a, b| a.max(b.abs())))));
                let j = c.jacobian(&unbounded, x.view()).unwrap();
                assert!((&j + &s.k).iter().all(|e| e.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn u_qrnet_stays_inside_bounds() {
        let (p, s) = bounded_lq();
        let mut rng = stream_rng(23, SeedStream::Init);
        let mut count = 0;
        while count < 10_000 {
            let c = Controller::new(ControllerKind::UQrNet, &p, &s, Some(random_scaler(&mut rng, 3, 2)), &[5], &mut rng).unwrap();
            for _ in 0..100 {
                let x = rand_vec(&mut rng, 3, 3.0);
                let u = c.control(&p, x.view());
                for i in 0..2 {
                    assert!(p.control_lower()[i] < u[i] && u[i] < p.control_upper()[i]);
                }
                count += 1;
            }
        }
    }

    #[test]
    fn lambda_qrnet_matches_hand_assembly() {
        let (p, s) = bounded_lq();
        let mut rng = stream_rng(24, SeedStream::Init);
        let sc = random_scaler(&mut rng, 3, 2);
        let c = Controller::new(ControllerKind::LambdaQrNet, &p, &s, Some(sc.clone()), &[7, 7], &mut rng).unwrap();
        let net = c.network().unwrap();
        let x = array![0.3, -0.7, 1.1];
        let y = net.forward(sc.x.apply(x.view()).view()).unwrap();
        let y0 = net.forward(sc.x.apply(p.goal_state().view()).view()).unwrap();
        let half = sc.lambda.half_range();
        let expect = 2.0 * s.p.dot(&x) + &(&half * &(&y - &y0));
        assert!((&c.costate(x.view()).unwrap() - &expect).iter().all(|e| e.abs() < 1e-14));
    }

    #[test]
    fn controller_jacobians_match_differences() {
        let burgers = BurgersProblem::new(BurgersConfig::default()).unwrap();
        let bs = RiccatiSolution::for_problem(&burgers).unwrap();
        let (lq, ls) = bounded_lq();
        let mut rng = stream_rng(25, SeedStream::Init);
        for (p, s, scale) in [(&burgers as &dyn ControlProblem, &bs, 0.5), (&lq as &dyn ControlProblem, &ls, 0.3)] {
            for kind in ControllerKind::ALL {
                let sc = random_scaler(&mut rng, p.state_dim(), p.control_dim());
                let mut c = Controller::new(kind, p, s, Some(sc), &[6, 6], &mut rng).unwrap();
                if kind == ControllerKind::QrNet {
                    let mut th = c.params();
                    *th.last_mut().unwrap() = -0.7;
                    c.set_params(&th).unwrap();
                }
                let mut checked = 0;
                while checked < 10 {
                    let x = rand_vec(&mut rng, p.state_dim(), scale);
                    let Ok(j) = c.jacobian(p, x.view()) else { continue };
                    let h = 1e-6 * (1.0 + linalg::vec_norm(x.view()));
                    for k in 0..p.state_dim() {
                        let mut xp = x.clone();
                        let mut xm = x.clone();
                        xp[k] += h;
                        xm[k] -= h;
                        let d = (c.control(p, xp.view()) - c.control(p, xm.view())) / (2.0 * h);
                        let kink = (0..d.len()).any(|i| {
                            let a = c.control(p, xp.view())[i];
                            let b = c.control(p, xm.view())[i];
                            (a == p.control_lower()[i]) != (b == p.control_lower()[i])
                                || (a == p.control_upper()[i]) != (b == p.control_upper()[i])
                        });
                        if kink {
                            continue;
                        }
                        for i in 0..d.len() {
                            assert!((j[[i, k]] - d[i]).abs() <= 1e-5 * (1.0 + d[i].abs()), "{kind}: {} vs {}", j[[i, k]], d[i]);
                        }
                    }
                    checked += 1;
                }
            }
        }
    }

    #[test]
    fn lqr_and_quadratic_value_models() {
        let (p, s) = bounded_lq();
        let c = Controller::lqr(&p, &s).unwrap();
        let x = array![0.1, 0.2, -0.1];
        assert_eq!(c.jacobian(&p, x.view()).unwrap(), -&s.k);
        // λ-QRnet with θ = 0 and QRnet at tiny γ both give the LQR gradient
        let mut rng = stream_rng(26, SeedStream::Init);
        let mut q = Controller::new(ControllerKind::QrNet, &p, &s, None, &[4], &mut rng).unwrap();
        let mut th = vec![0.0; q.n_params()];
        *th.last_mut().unwrap() = -40.0;
        q.set_params(&th).unwrap();
        let g = q.costate(x.view()).unwrap();
        assert!((&g - &lqr::lqr_gradient(&s, x.view())).iter().all(|e| e.abs() < 1e-12));
        assert!((q.control(&p, x.view()) - c.control(&p, x.view())).iter().all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn controller_file_round_trip() {
        let burgers = BurgersProblem::new(BurgersConfig::default()).unwrap();
        let bs = RiccatiSolution::for_problem(&burgers).unwrap();
        let mut rng = stream_rng(27, SeedStream::Init);
        for kind in ControllerKind::ALL {
            let c = Controller::new(kind, &burgers, &bs, Some(random_scaler(&mut rng, 16, 2)), &[5, 5], &mut rng).unwrap();
            let text = c.to_text();
            if kind == ControllerKind::Lqr {
                assert!(!text.contains("[theta]"));
            }
            let back = Controller::from_text(&text, "mem", &burgers, &bs).unwrap();
            assert_eq!(back.to_text(), text);
            for _ in 0..100 {
                let x = rand_vec(&mut rng, 16, 0.5);
                assert_eq!(back.control(&burgers, x.view()), c.control(&burgers, x.view()));
            }
        }
        let c = Controller::new(ControllerKind::UQrNet, &burgers, &bs, None, &[5], &mut rng).unwrap();
        let tampered = c.to_text().replace("widths=16,5,2", "widths=16,6,2");
        assert!(matches!(Controller::from_text(&tampered, "f", &burgers, &bs), Err(ModelError::Parse { .. })));
        let other = BurgersProblem::new(BurgersConfig { viscosity: 0.3, ..Default::default() }).unwrap();
        let os = RiccatiSolution::for_problem(&other).unwrap();
        assert!(matches!(Controller::from_text(&c.to_text(), "f", &other, &os), Err(ModelError::FingerprintMismatch { .. })));
    }
}

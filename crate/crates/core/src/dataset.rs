//! Initial-condition sampling, parallel BVP data generation, [-1, 1] scaling,
//! and the dataset text format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bvp::{self, BvpConfig, BvpError, OpenLoopSolution};
use crate::dynamics::{ControlProblem, HamiltonianMinimizer};
use crate::linalg::{self, Matrix, Vector};
use crate::lqr::RiccatiSolution;

pub const DATASET_HEADER: &str = "# hjb-qrnet dataset v1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid sampling request: {0}")]
    Invalid(String),
    #[error("{failed} of {total} trajectories failed to converge; first failure: {first}")]
    GenerationFailure { failed: usize, total: usize, first: String },
    #[error("cannot fit a scaler to an empty dataset")]
    EmptyFit,
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Bvp(#[from] BvpError),
}

/// Independent random streams derived from one user seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedStream {
    Train,
    Test,
    MonteCarlo,
    Init,
    Certificate,
}

impl SeedStream {
    fn id(self) -> u64 {
        match self {
            SeedStream::Train => 1,
            SeedStream::Test => 2,
            SeedStream::MonteCarlo => 3,
            SeedStream::Init => 4,
            SeedStream::Certificate => 5,
        }
    }
}

pub fn stream_rng(seed: u64, stream: SeedStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    /// `‖x0 − x_f‖ = radius` exactly.
    Sphere,
    /// `‖x0 − x_f‖ ≤ radius`, radius drawn so the density is uniform in the
    /// sampling subspace.
    Ball,
}

/// Draws `count` initial conditions around the goal. Burgers profiles are
/// combinations of the first Chebyshev modes; other problems use isotropic
/// Gaussian directions.
pub fn sample_initial_conditions(
    problem: &dyn ControlProblem,
    count: usize,
    radius: f64,
    mode: SampleMode,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vector>, DatasetError> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(DatasetError::Invalid(format!("radius must be positive, got {radius}")));
    }
    let dim = problem.sampling_dimension() as f64;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let d = problem.sample_direction(rng);
        let norm = linalg::vec_norm(d.view());
        if !(norm > 1e-12) {
            continue;
        }
        let r = match mode {
            SampleMode::Sphere => radius,
            SampleMode::Ball => radius * rng.random::<f64>().powf(1.0 / dim),
        };
        out.push(problem.goal_state() + &(&d * (r / norm)));
    }
    Ok(out)
}

/// Flattened `(x, λ, u, V)` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub lambda: Matrix,
    pub u: Matrix,
    pub v: Vector,
    /// Index of the source trajectory of each sample.
    pub traj: Vec<usize>,
    pub metadata: BTreeMap<String, String>,
}

impl Dataset {
    pub fn empty(n: usize, m: usize) -> Self {
        Self {
            x: Matrix::zeros((0, n)),
            lambda: Matrix::zeros((0, n)),
            u: Matrix::zeros((0, m)),
            v: Vector::zeros(0),
            traj: vec![],
            metadata: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn control_dim(&self) -> usize {
        self.u.ncols()
    }

    pub fn trajectory_count(&self) -> usize {
        let mut t = self.traj.clone();
        t.dedup();
        t.len()
    }

    /// Appends every node of an open-loop solution, tagged with `traj`.
    pub fn push_solution(&mut self, sol: &OpenLoopSolution, traj: usize) {
        let stack = |a: &Matrix, b: &Matrix| -> Matrix {
            ndarray::concatenate(ndarray::Axis(0), &[a.view(), b.view()]).expect("column counts agree")
        };
        self.x = stack(&self.x, &sol.x);
        self.lambda = stack(&self.lambda, &sol.lambda);
        self.u = stack(&self.u, &sol.u);
        self.v = ndarray::concatenate(ndarray::Axis(0), &[self.v.view(), sol.v.view()]).expect("1-D");
        self.traj.extend(std::iter::repeat_n(traj, sol.len()));
    }

    /// Samples `idx` as a new dataset (metadata copied).
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select(ndarray::Axis(0), idx),
            lambda: self.lambda.select(ndarray::Axis(0), idx),
            u: self.u.select(ndarray::Axis(0), idx),
            v: self.v.select(ndarray::Axis(0), idx),
            traj: idx.iter().map(|&i| self.traj[i]).collect(),
            metadata: self.metadata.clone(),
        }
    }

    /// Largest deviation of `u` from the Hamiltonian minimizer at `(x, λ)`.
    pub fn control_consistency(&self, problem: &dyn ControlProblem) -> Result<f64, DatasetError> {
        let hm = HamiltonianMinimizer::new(problem).map_err(|e| DatasetError::Invalid(e.to_string()))?;
        let mut worst = 0.0f64;
        for i in 0..self.len() {
            let u = hm.minimize(problem, self.x.row(i), self.lambda.row(i));
            worst = worst.max(linalg::vec_inf_norm((&u - &self.u.row(i)).view()));
        }
        Ok(worst)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let (n, m) = (self.state_dim(), self.control_dim());
        let mut out = String::new();
        out.push_str(DATASET_HEADER);
        out.push('\n');
        let _ = writeln!(out, "# n={n}");
        let _ = writeln!(out, "# m={m}");
        for (k, v) in &self.metadata {
            if k != "n" && k != "m" {
                let _ = writeln!(out, "# {k}={v}");
            }
        }
        out.push_str(&column_header(n, m));
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{}", self.traj[i]);
            for v in self.x.row(i).iter().chain(self.lambda.row(i).iter()).chain(self.u.row(i).iter()) {
                let _ = write!(out, ",{v:.16e}");
            }
            let _ = writeln!(out, ",{:.16e}", self.v[i]);
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text, &path.display().to_string())
    }

    pub fn from_text(text: &str, name: &str) -> Result<Self, DatasetError> {
        let err = |line: usize, msg: String| DatasetError::Parse { path: name.to_string(), line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l.trim_end() == DATASET_HEADER => {}
            Some((i, l)) => return Err(err(i, format!("expected `{DATASET_HEADER}`, found `{l}`"))),
            None => return Err(err(1, "empty file".into())),
        }
        let mut metadata = BTreeMap::new();
        let mut header_line = None;
        for (i, l) in lines.by_ref() {
            if let Some(rest) = l.strip_prefix("# ") {
                let (k, v) = rest.split_once('=').ok_or_else(|| err(i, format!("malformed metadata line `{l}`")))?;
                metadata.insert(k.trim().to_string(), v.trim().to_string());
            } else {
                header_line = Some((i, l));
                break;
            }
        }
        let (hi, hl) = header_line.ok_or_else(|| err(metadata.len() + 2, "missing column header".into()))?;
        let dim = |key: &str| -> Result<usize, DatasetError> {
            metadata
                .get(key)
                .ok_or_else(|| err(hi, format!("missing `{key}` metadata")))?
                .parse()
                .map_err(|_| err(hi, format!("`{key}` is not an integer")))
        };
        let (n, m) = (dim("n")?, dim("m")?);
        if hl.trim_end() != column_header(n, m) {
            return Err(err(hi, "column header does not match n and m".into()));
        }
        let width = 2 * n + m + 2;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut traj = Vec::new();
        for (i, l) in lines {
            if l.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = l.split(',').collect();
            if fields.len() != width {
                return Err(err(i, format!("expected {width} columns, found {}", fields.len())));
            }
            traj.push(fields[0].trim().parse::<usize>().map_err(|_| err(i, format!("bad trajectory index `{}`", fields[0])))?);
            let mut row = Vec::with_capacity(width - 1);
            for f in &fields[1..] {
                let v: f64 = f.trim().parse().map_err(|_| err(i, format!("bad number `{f}`")))?;
                if !v.is_finite() {
                    return Err(err(i, format!("non-finite value `{f}`")));
                }
                row.push(v);
            }
            rows.push(row);
        }
        let count = rows.len();
        let mut all = Array2::zeros((count, width - 1));
        for (r, row) in rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                all[[r, c]] = *v;
            }
        }
        metadata.remove("n");
        metadata.remove("m");
        Ok(Self {
            x: all.slice(s![.., ..n]).to_owned(),
            lambda: all.slice(s![.., n..2 * n]).to_owned(),
            u: all.slice(s![.., 2 * n..2 * n + m]).to_owned(),
            v: all.column(2 * n + m).to_owned(),
            traj,
            metadata,
        })
    }
}

fn column_header(n: usize, m: usize) -> String {
    let mut cols = vec!["traj".to_string()];
    cols.extend((1..=n).map(|i| format!("x_{i}")));
    cols.extend((1..=n).map(|i| format!("lambda_{i}")));
    cols.extend((1..=m).map(|i| format!("u_{i}")));
    cols.push("V".into());
    cols.join(",")
}

/// Outcome of a data-generation run besides the samples themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationReport {
    pub requested: usize,
    pub converged: usize,
    pub rejected: usize,
    pub suspicious: usize,
    pub max_hamiltonian: f64,
}

/// Solves one BVP per initial condition (in parallel) and concatenates the
/// node data of converged trajectories in IC order.
pub fn generate_from_ics(
    problem: &dyn ControlProblem,
    lqr: &RiccatiSolution,
    ics: &[Vector],
    cfg: &BvpConfig,
) -> Result<(Dataset, GenerationReport, Vec<Option<OpenLoopSolution>>), DatasetError> {
    let results: Vec<Result<OpenLoopSolution, BvpError>> = ics.par_iter().map(|x0| bvp::solve_pmp(problem, lqr, x0.view(), cfg)).collect();
    let mut data = Dataset::empty(problem.state_dim(), problem.control_dim());
    let mut sols = Vec::with_capacity(ics.len());
    let mut rejected = 0;
    let mut suspicious = 0;
    let mut max_h = 0.0f64;
    let mut first_failure = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(sol) if sol.converged => {
                if sol.suspicious {
                    suspicious += 1;
                }
                max_h = max_h.max(sol.max_hamiltonian);
                data.push_solution(&sol, i);
                sols.push(Some(sol));
            }
            Ok(sol) => {
                rejected += 1;
                first_failure
                    .get_or_insert_with(|| format!("trajectory {i}: residual {:e}, max |H| {:e}", sol.residual, sol.max_hamiltonian));
                sols.push(None);
            }
            Err(e) => {
                rejected += 1;
                first_failure.get_or_insert_with(|| format!("trajectory {i}: {e}"));
                sols.push(None);
            }
        }
    }
    if 2 * rejected > ics.len() {
        return Err(DatasetError::GenerationFailure { failed: rejected, total: ics.len(), first: first_failure.unwrap_or_default() });
    }
    if rejected > 0 {
        log::warn!("{rejected} of {} trajectories rejected", ics.len());
    }
    let report = GenerationReport { requested: ics.len(), converged: ics.len() - rejected, rejected, suspicious, max_hamiltonian: max_h };
    data.metadata.insert("trajectories".into(), ics.len().to_string());
    data.metadata.insert("rejected".into(), rejected.to_string());
    Ok((data, report, sols))
}

/// Generation request: how many trajectories, from where, with which seed.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub trajectories: usize,
    pub radius: f64,
    pub mode: SampleMode,
    pub seed: u64,
    pub stream: SeedStream,
}

pub fn generate_dataset(
    problem: &dyn ControlProblem,
    lqr: &RiccatiSolution,
    req: &GenerationRequest,
    cfg: &BvpConfig,
) -> Result<(Dataset, GenerationReport), DatasetError> {
    let mut rng = stream_rng(req.seed, req.stream);
    let ics = sample_initial_conditions(problem, req.trajectories, req.radius, req.mode, &mut rng)?;
    if ics.is_empty() {
        log::warn!("generating an empty dataset");
    }
    let (mut data, report, _) = generate_from_ics(problem, lqr, &ics, cfg)?;
    data.metadata.insert("seed".into(), req.seed.to_string());
    data.metadata.insert("radius".into(), format!("{:.16e}", req.radius));
    data.metadata.insert(
        "mode".into(),
        match req.mode {
            SampleMode::Sphere => "sphere",
            SampleMode::Ball => "ball",
        }
        .into(),
    );
    Ok((data, report))
}

/// Per-dimension affine map of `[lo, hi]` onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineScale {
    pub lo: Vector,
    pub hi: Vector,
}

impl AffineScale {
    pub fn fit(data: ArrayView2<f64>) -> Result<Self, DatasetError> {
        if data.nrows() == 0 {
            return Err(DatasetError::EmptyFit);
        }
        let cols = data.ncols();
        let mut lo = Vector::from_elem(cols, f64::INFINITY);
        let mut hi = Vector::from_elem(cols, f64::NEG_INFINITY);
        for row in data.rows() {
            for j in 0..cols {
                lo[j] = lo[j].min(row[j]);
                hi[j] = hi[j].max(row[j]);
            }
        }
        for j in 0..cols {
            if hi[j] - lo[j] < 1e-12 {
                let mid = 0.5 * (hi[j] + lo[j]);
                lo[j] = mid - 1e-12;
                hi[j] = mid + 1e-12;
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn identity(dim: usize) -> Self {
        Self { lo: Vector::from_elem(dim, -1.0), hi: Vector::from_elem(dim, 1.0) }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// `(hi − lo)/2`, the factor mapping scaled units back to physical ones.
    pub fn half_range(&self) -> Vector {
        (&self.hi - &self.lo) * 0.5
    }

    pub fn apply(&self, x: ArrayView1<f64>) -> Vector {
        let mut out = x.to_owned();
        for j in 0..out.len() {
            out[j] = 2.0 * (x[j] - self.lo[j]) / (self.hi[j] - self.lo[j]) - 1.0;
        }
        out
    }

    pub fn invert(&self, y: ArrayView1<f64>) -> Vector {
        let mut out = y.to_owned();
        for j in 0..out.len() {
            out[j] = self.lo[j] + 0.5 * (y[j] + 1.0) * (self.hi[j] - self.lo[j]);
        }
        out
    }

    pub fn apply_rows(&self, x: ArrayView2<f64>) -> Matrix {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let r = self.apply(row.view());
            row.assign(&r);
        }
        out
    }
}

/// Scalers for every field, fitted on training data only.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingTransform {
    pub x: AffineScale,
    pub lambda: AffineScale,
    pub u: AffineScale,
    pub v: AffineScale,
}

pub fn fit_scaler(train: &Dataset) -> Result<ScalingTransform, DatasetError> {
    let v = train.v.clone().into_shape_with_order((train.len(), 1)).expect("column vector");
    Ok(ScalingTransform {
        x: AffineScale::fit(train.x.view())?,
        lambda: AffineScale::fit(train.lambda.view())?,
        u: AffineScale::fit(train.u.view())?,
        v: AffineScale::fit(v.view())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{BurgersConfig, BurgersProblem, LinearQuadraticProblem};
    use ndarray::array;

    fn burgers() -> BurgersProblem {
        BurgersProblem::new(BurgersConfig::default()).unwrap()
    }

    #[test]
    fn sphere_and_ball_norms() {
        let p = burgers();
        let mut rng = stream_rng(1, SeedStream::Test);
        let one = sample_initial_conditions(&p, 1, 1.2, SampleMode::Sphere, &mut rng).unwrap();
        assert!((linalg::vec_norm(one[0].view()) - 1.2).abs() < 1e-12);
        let mut rng = stream_rng(1, SeedStream::Train);
        let many = sample_initial_conditions(&p, 100, 1.2, SampleMode::Ball, &mut rng).unwrap();
        assert!(many.iter().all(|x| linalg::vec_norm(x.view()) <= 1.2 + 1e-12));
        assert!(many.iter().any(|x| linalg::vec_norm(x.view()) < 1.1));
        assert!(sample_initial_conditions(&p, 1, 0.0, SampleMode::Ball, &mut rng).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_streams_differ() {
        let p = burgers();
        let a = sample_initial_conditions(&p, 5, 1.2, SampleMode::Ball, &mut stream_rng(7, SeedStream::Train)).unwrap();
        let b = sample_initial_conditions(&p, 5, 1.2, SampleMode::Ball, &mut stream_rng(7, SeedStream::Train)).unwrap();
        let c = sample_initial_conditions(&p, 5, 1.2, SampleMode::Ball, &mut stream_rng(7, SeedStream::Test)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|x| c.iter().all(|y| x != y)));
    }

    #[test]
    fn scaler_examples() {
        let data = array![[0.0, 5.0], [2.0, 5.0]];
        let s = AffineScale::fit(data.view()).unwrap();
        assert_eq!(s.apply(array![1.0, 5.0].view()), array![0.0, 0.0]);
        assert_eq!(s.apply(array![2.0, 5.0].view())[0], 1.0);
        let mut rng = stream_rng(3, SeedStream::Init);
        let wide = Matrix::from_shape_fn((50, 3), |_| rng.random_range(-4.0..9.0));
        let s = AffineScale::fit(wide.view()).unwrap();
        for _ in 0..1000 {
            let x: Vector = (0..3).map(|_| rng.random_range(-10.0..10.0)).collect();
            let back = s.invert(s.apply(x.view()).view());
            assert!((&back - &x).iter().all(|e| e.abs() <= 1e-12 * 10.0));
        }
        assert!(AffineScale::fit(Matrix::zeros((0, 2)).view()).is_err());
    }

    fn lq() -> (LinearQuadraticProblem, RiccatiSolution) {
        let p = LinearQuadraticProblem::new(array![[0.5, 1.0], [0.0, -1.0]], array![[0.0], [1.0]], Matrix::eye(2), array![[1.0]]).unwrap();
        let s = RiccatiSolution::for_problem(&p).unwrap();
        (p, s)
    }

    #[test]
    fn lq_dataset_satisfies_lqr_gradient() {
        let (p, s) = lq();
        let req = GenerationRequest { trajectories: 4, radius: 1.0, mode: SampleMode::Ball, seed: 3, stream: SeedStream::Train };
        let (d, rep) = generate_dataset(&p, &s, &req, &BvpConfig::default()).unwrap();
        assert_eq!(rep.rejected, 0);
        assert_eq!(d.trajectory_count(), 4);
        for i in 0..d.len() {
            let g = crate::lqr::lqr_gradient(&s, d.x.row(i));
            assert!(linalg::vec_norm((&g - &d.lambda.row(i)).view()) <= 1e-3 * (1.0 + linalg::vec_norm(g.view())));
        }
        assert!(d.control_consistency(&p).unwrap() <= 1e-8);
    }

    #[test]
    fn empty_generation_is_valid() {
        let (p, s) = lq();
        let req = GenerationRequest { trajectories: 0, radius: 1.0, mode: SampleMode::Ball, seed: 3, stream: SeedStream::Train };
        let (d, _) = generate_dataset(&p, &s, &req, &BvpConfig::default()).unwrap();
        assert!(d.is_empty());
        let back = Dataset::from_text(&d.to_text(), "mem").unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn text_round_trip_is_exact() {
        let (p, s) = lq();
        let req = GenerationRequest { trajectories: 2, radius: 1.0, mode: SampleMode::Sphere, seed: 9, stream: SeedStream::Test };
        let (d, _) = generate_dataset(&p, &s, &req, &BvpConfig::default()).unwrap();
        let text = d.to_text();
        let back = Dataset::from_text(&text, "mem").unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let (p, s) = lq();
        let req = GenerationRequest { trajectories: 1, radius: 1.0, mode: SampleMode::Sphere, seed: 9, stream: SeedStream::Test };
        let (d, _) = generate_dataset(&p, &s, &req, &BvpConfig::default()).unwrap();
        let text = d.to_text();
        let lines: Vec<&str> = text.lines().collect();
        let last = lines.len();
        let truncated_row = &lines[last - 1][..lines[last - 1].len() / 2];
        let mut broken = lines[..last - 1].join("\n");
        broken.push('\n');
        broken.push_str(truncated_row);
        match Dataset::from_text(&broken, "f.csv") {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, last),
            other => panic!("expected parse error, got {other:?}"),
        }
        let nan = text.replacen(",", ",NaN,", 1);
        assert!(Dataset::from_text(&nan, "f.csv").is_err());
        assert!(Dataset::from_text("# something else\n", "f.csv").is_err());
    }
}

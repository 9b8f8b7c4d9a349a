//! Experiment runner: data generation, training, evaluation, certification
//! and report for a grid of data sizes × trials × controller kinds.
//!
//! Layout of the output directory:
//!
//! ```text
//! manifest.toml
//! lqr/riccati.csv
//! data/train_t{trial}.csv  data/test.csv  data/mc_ics.csv  data/mc_costs.csv
//! models/{kind}_n{size}_t{trial}.txt  models/{kind}_n{size}_t{trial}.train.csv
//! results/models/{name}.csv
//! results/metrics.csv  results/training.csv  results/timings.csv
//! report/*.csv  report/*.svg
//! ```
//!
//! Every item is written through a temporary file and renamed, so an item
//! that exists on disk is complete and is skipped on rerun.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bvp::{self, BvpConfig, BvpError};
use crate::dataset::{self, Dataset, DatasetError, SampleMode, SeedStream};
use crate::dynamics::{ControlProblem, DynamicsError, ProblemConfig};
use crate::eval::{self, EvalError, SimConfig};
use crate::linalg::{self, Vector};
use crate::lqr::{self, LqrError, RiccatiSolution};
use crate::models::{Controller, ControllerKind, ModelError};
use crate::report::{self, ReportError};
use crate::training::{self, LbfgsConfig, LossWeights, TrainConfig, TrainError};

pub const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data generation failed: {0}")]
    Generation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error(transparent)]
    Report(#[from] ReportError),
}

impl PipelineError {
    /// Process exit code: 2 config, 3 numerical, 4 generation, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Numerical(_) => 3,
            PipelineError::Generation(_) => 4,
            PipelineError::Io { .. } => 1,
            PipelineError::Report(ReportError::Io { .. }) => 1,
            PipelineError::Report(_) => 2,
        }
    }
}

impl From<DynamicsError> for PipelineError {
    fn from(e: DynamicsError) -> Self {
        match e {
            DynamicsError::Config(m) => PipelineError::Config(m),
            e => PipelineError::Numerical(e.to_string()),
        }
    }
}

impl From<LqrError> for PipelineError {
    fn from(e: LqrError) -> Self {
        PipelineError::Numerical(e.to_string())
    }
}

impl From<linalg::LinalgError> for PipelineError {
    fn from(e: linalg::LinalgError) -> Self {
        PipelineError::Numerical(e.to_string())
    }
}

impl From<BvpError> for PipelineError {
    fn from(e: BvpError) -> Self {
        match e {
            BvpError::Config(m) => PipelineError::Config(m),
            e => PipelineError::Generation(e.to_string()),
        }
    }
}

impl From<DatasetError> for PipelineError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Invalid(m) => PipelineError::Config(m),
            DatasetError::Parse { .. } => PipelineError::Config(e.to_string()),
            DatasetError::Io(e) => PipelineError::Io { path: PathBuf::new(), msg: e.to_string() },
            e => PipelineError::Generation(e.to_string()),
        }
    }
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(e) => PipelineError::Io { path: PathBuf::new(), msg: e.to_string() },
            ModelError::Invalid(m) => PipelineError::Config(m),
            ModelError::Parse { .. } | ModelError::FingerprintMismatch { .. } => PipelineError::Config(e.to_string()),
            e => PipelineError::Numerical(e.to_string()),
        }
    }
}

impl From<TrainError> for PipelineError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Weights(m) => PipelineError::Config(m),
            TrainError::Model(m) => m.into(),
            e => PipelineError::Numerical(e.to_string()),
        }
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::NonPositiveCost { .. } => PipelineError::Generation(e.to_string()),
            EvalError::Model(m) => m.into(),
            e => PipelineError::Numerical(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training set sizes in trajectories; each is a prefix of the trial's data.
    pub sizes: Vec<usize>,
    pub trials: usize,
    pub radius: f64,
    pub mode: SampleMode,
    pub test_trajectories: usize,
    pub test_radius: f64,
    pub mc_count: usize,
    pub mc_radius: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sizes: vec![8, 16, 32, 64, 128],
            trials: 3,
            radius: 1.2,
            mode: SampleMode::Ball,
            test_trajectories: 64,
            test_radius: 1.2,
            mc_count: 20,
            mc_radius: 1.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub kinds: Vec<ControllerKind>,
    pub hidden: Vec<usize>,
    pub lbfgs: LbfgsConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            kinds: vec![
                ControllerKind::VNn,
                ControllerKind::QrNet,
                ControllerKind::UNn,
                ControllerKind::LambdaQrNet,
                ControllerKind::UQrNet,
            ],
            hidden: t.hidden,
            lbfgs: t.lbfgs,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { hidden: self.hidden.clone(), lbfgs: self.lbfgs }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertificateConfig {
    pub radius: f64,
    pub theta: f64,
    /// Draws from the test set used to estimate `F(δ_N, ε_N)`.
    pub f_samples: usize,
}

impl Default for CertificateConfig {
    fn default() -> Self {
        Self { radius: lqr::DEFAULT_RADIUS, theta: lqr::DEFAULT_THETA, f_samples: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub problem: ProblemConfig,
    pub data: DataConfig,
    pub bvp: BvpConfig,
    pub train: TrainSection,
    pub sim: SimConfig,
    pub certificate: CertificateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            problem: ProblemConfig::burgers_default(),
            data: DataConfig::default(),
            bvp: BvpConfig::default(),
            train: TrainSection::default(),
            sim: SimConfig::default(),
            certificate: CertificateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let d = &self.data;
        if d.sizes.is_empty() {
            return Err(PipelineError::Config("data.sizes must not be empty".into()));
        }
        if d.sizes.contains(&0) {
            return Err(PipelineError::Config("data.sizes entries must be positive".into()));
        }
        if d.trials == 0 {
            return Err(PipelineError::Config("data.trials must be positive".into()));
        }
        if d.test_trajectories == 0 || d.mc_count == 0 {
            return Err(PipelineError::Config("test_trajectories and mc_count must be positive".into()));
        }
        for r in [d.radius, d.test_radius, d.mc_radius, self.certificate.radius] {
            if !(r > 0.0 && r.is_finite()) {
                return Err(PipelineError::Config(format!("radius {r} must be positive")));
            }
        }
        if !(self.certificate.theta > 0.0 && self.certificate.theta < 1.0) {
            return Err(PipelineError::Config("certificate.theta must lie in (0, 1)".into()));
        }
        if self.certificate.f_samples == 0 {
            return Err(PipelineError::Config("certificate.f_samples must be positive".into()));
        }
        if self.train.kinds.contains(&ControllerKind::Lqr) {
            return Err(PipelineError::Config("lqr is always evaluated as the baseline; drop it from train.kinds".into()));
        }
        let mut kinds = self.train.kinds.clone();
        kinds.sort();
        kinds.dedup();
        if kinds.len() != self.train.kinds.len() {
            return Err(PipelineError::Config("train.kinds has duplicates".into()));
        }
        self.bvp.validate()?;
        Ok(())
    }

    pub fn max_size(&self) -> usize {
        self.data.sizes.iter().copied().max().unwrap_or(0)
    }

    /// Seed of the training trajectories and network initialization of a trial.
    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.seed.wrapping_add(trial as u64)
    }
}

/// One trained model of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelId {
    pub kind: ControllerKind,
    pub size: usize,
    pub trial: usize,
}

impl ModelId {
    pub fn name(&self) -> String {
        format!("{}_n{}_t{}", self.kind, self.size, self.trial)
    }
}

fn model_grid(cfg: &RunConfig) -> Vec<ModelId> {
    let mut out = vec![];
    for trial in 0..cfg.data.trials {
        for &size in &cfg.data.sizes {
            for &kind in &cfg.train.kinds {
                out.push(ModelId { kind, size, trial });
            }
        }
    }
    out
}

pub fn model_path(out: &Path, id: &ModelId) -> PathBuf {
    out.join("models").join(format!("{}.txt", id.name()))
}

pub fn train_set_path(out: &Path, trial: usize) -> PathBuf {
    out.join("data").join(format!("train_t{trial}.csv"))
}

pub fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io { path: path.to_path_buf(), msg: e.to_string() }
}

/// Writes `text` to `path` through a sibling temporary file.
pub fn write_atomic(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, text).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn read(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

/// Initial-condition file: header `x_1,…,x_n`, one state per row.
pub fn ics_to_text(ics: &[Vector]) -> String {
    let n = ics.first().map_or(0, |x| x.len());
    let mut s = (1..=n).map(|i| format!("x_{i}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for x in ics {
        s.push_str(&x.iter().map(|v| fmt_f(*v)).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    s
}

pub fn ics_from_text(text: &str, name: &str, n: usize) -> Result<Vec<Vector>, PipelineError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| PipelineError::Config(format!("{name}: empty initial-condition file")))?;
    if header.split(',').count() != n {
        return Err(PipelineError::Config(format!("{name}: header has {} columns, state dimension is {n}", header.split(',').count())));
    }
    let mut out = vec![];
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let vals = parse_row(line, name, i + 1)?;
        if vals.len() != n {
            return Err(PipelineError::Config(format!("{name}:{}: expected {n} values, got {}", i + 1, vals.len())));
        }
        out.push(Vector::from(vals));
    }
    Ok(out)
}

/// Optimal-cost file: header `index,V`.
pub fn costs_to_text(costs: &[f64]) -> String {
    let mut s = String::from("index,V\n");
    for (i, v) in costs.iter().enumerate() {
        let _ = writeln!(s, "{i},{}", fmt_f(*v));
    }
    s
}

pub fn costs_from_text(text: &str, name: &str) -> Result<Vec<f64>, PipelineError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "index,V")) => {}
        _ => return Err(PipelineError::Config(format!("{name}: expected header `index,V`"))),
    }
    let mut out = vec![];
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let vals = parse_row(line, name, i + 1)?;
        if vals.len() != 2 || vals[0] != out.len() as f64 {
            return Err(PipelineError::Config(format!("{name}:{}: expected `{},V`", i + 1, out.len())));
        }
        out.push(vals[1]);
    }
    Ok(out)
}

fn parse_row(line: &str, name: &str, lineno: usize) -> Result<Vec<f64>, PipelineError> {
    line.split(',')
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| PipelineError::Config(format!("{name}:{lineno}: bad number `{f}`")))
        })
        .collect()
}

/// Samples whose source trajectory is among the first `size` trajectories
/// present in `data`.
pub fn trajectory_prefix(data: &Dataset, size: usize) -> Result<Dataset, PipelineError> {
    let mut seen: Vec<usize> = data.traj.clone();
    seen.dedup();
    if seen.len() < size {
        return Err(PipelineError::Generation(format!("only {} converged trajectories available, {size} requested", seen.len())));
    }
    let keep = &seen[..size];
    let last = *keep.last().expect("size is positive");
    let idx: Vec<usize> = (0..data.len()).filter(|&i| data.traj[i] <= last).collect();
    Ok(data.select(&idx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    failure: Option<Failure>,
    seeds: Seeds,
    config: RunConfig,
    #[serde(default)]
    stages: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Failure {
    stage: String,
    message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Seeds {
    base: u64,
    trial: Vec<u64>,
    test: u64,
    monte_carlo: u64,
}

/// Paths and counts produced by a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSummary {
    pub out_dir: PathBuf,
    pub models: usize,
    /// Items recomputed during this invocation (0 on a pure resume).
    pub computed: usize,
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
    manifest: Manifest,
    computed: usize,
}

impl Runner<'_> {
    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(self.out).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    fn record(&mut self, stage: &str, files: &[PathBuf]) -> Result<(), PipelineError> {
        let rels: Vec<String> = files.iter().map(|p| self.rel(p)).collect();
        self.manifest.stages.insert(stage.into(), rels);
        self.write_manifest()
    }

    fn write_manifest(&self) -> Result<(), PipelineError> {
        let text = toml::to_string(&self.manifest).map_err(|e| PipelineError::Config(e.to_string()))?;
        write_atomic(&self.out.join(MANIFEST), &text)
    }
}

/// Runs (or resumes) the whole experiment in `out`. On failure the manifest
/// records the failing stage and partial outputs are left in place.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<PipelineSummary, PipelineError> {
    cfg.validate()?;
    let seeds =
        Seeds { base: cfg.seed, trial: (0..cfg.data.trials).map(|t| cfg.trial_seed(t)).collect(), test: cfg.seed, monte_carlo: cfg.seed };
    let manifest_path = out.join(MANIFEST);
    let mut stages = BTreeMap::new();
    if manifest_path.exists() {
        let old: Manifest =
            toml::from_str(&read(&manifest_path)?).map_err(|e| PipelineError::Config(format!("{}: {e}", manifest_path.display())))?;
        if old.config != *cfg {
            return Err(PipelineError::Config(format!(
                "{} was produced by a different configuration; use a fresh output directory",
                out.display()
            )));
        }
        stages = old.stages;
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut runner = Runner {
        cfg,
        out,
        manifest: Manifest { status: "running".into(), failure: None, seeds, config: cfg.clone(), stages },
        computed: 0,
    };
    runner.write_manifest()?;
    let mut stage = String::from("setup");
    match run_stages(&mut runner, &mut stage) {
        Ok(models) => {
            runner.manifest.status = "complete".into();
            runner.write_manifest()?;
            Ok(PipelineSummary { out_dir: out.to_path_buf(), models, computed: runner.computed })
        }
        Err(e) => {
            runner.manifest.status = "failed".into();
            runner.manifest.failure = Some(Failure { stage, message: e.to_string() });
            let _ = runner.write_manifest();
            Err(e)
        }
    }
}

fn run_stages(r: &mut Runner, stage: &mut String) -> Result<usize, PipelineError> {
    let cfg = r.cfg;
    let out = r.out;
    *stage = "problem".into();
    let problem = cfg.problem.build()?;
    let problem = problem.as_ref();

    *stage = "lqr".into();
    let sol = RiccatiSolution::for_problem(problem)?;
    let consts = lqr::lyapunov_constants(&sol, problem, cfg.certificate.radius, cfg.certificate.theta)?;
    let lqr_file = out.join("lqr").join("riccati.csv");
    if !lqr_file.exists() {
        let mut s = String::from("key,value\n");
        let _ = writeln!(s, "fingerprint,{}", sol.fingerprint());
        let _ = writeln!(s, "relative_residual,{}", fmt_f(sol.relative_residual()));
        let _ = writeln!(s, "closed_loop_max_real,{}", fmt_f(linalg::eig_general(sol.closed_loop_a.view())?.max_real_part));
        for (k, v) in [("k1", consts.k1), ("k2", consts.k2), ("k3", consts.k3), ("k4", consts.k4), ("l_u", consts.l_u)] {
            let _ = writeln!(s, "{k},{}", fmt_f(v));
        }
        let _ = writeln!(s, "delta_plus,{}", fmt_f(lqr::delta_plus(&consts)));
        write_atomic(&lqr_file, &s)?;
        r.computed += 1;
    }
    r.record("lqr", &[lqr_file])?;

    *stage = "data".into();
    let mut data_files = vec![];
    let mut train_sets = vec![];
    for trial in 0..cfg.data.trials {
        let path = train_set_path(out, trial);
        if !path.exists() {
            log::info!("generating {} training trajectories for trial {trial}", cfg.max_size());
            let req = dataset::GenerationRequest {
                trajectories: cfg.max_size(),
                radius: cfg.data.radius,
                mode: cfg.data.mode,
                seed: cfg.trial_seed(trial),
                stream: SeedStream::Train,
            };
            let (d, _) = dataset::generate_dataset(problem, &sol, &req, &cfg.bvp)?;
            write_atomic(&path, &d.to_text())?;
            r.computed += 1;
        }
        train_sets.push(Dataset::from_text(&read(&path)?, &path.display().to_string())?);
        data_files.push(path);
    }
    let test_path = out.join("data").join("test.csv");
    if !test_path.exists() {
        log::info!("generating {} test trajectories", cfg.data.test_trajectories);
        let req = dataset::GenerationRequest {
            trajectories: cfg.data.test_trajectories,
            radius: cfg.data.test_radius,
            mode: SampleMode::Sphere,
            seed: cfg.seed,
            stream: SeedStream::Test,
        };
        let (d, _) = dataset::generate_dataset(problem, &sol, &req, &cfg.bvp)?;
        write_atomic(&test_path, &d.to_text())?;
        r.computed += 1;
    }
    let test = Dataset::from_text(&read(&test_path)?, &test_path.display().to_string())?;
    data_files.push(test_path);
    let ics_path = out.join("data").join("mc_ics.csv");
    if !ics_path.exists() {
        let mut rng = dataset::stream_rng(cfg.seed, SeedStream::MonteCarlo);
        let ics = dataset::sample_initial_conditions(problem, cfg.data.mc_count, cfg.data.mc_radius, SampleMode::Sphere, &mut rng)?;
        write_atomic(&ics_path, &ics_to_text(&ics))?;
        r.computed += 1;
    }
    let ics = ics_from_text(&read(&ics_path)?, &ics_path.display().to_string(), problem.state_dim())?;
    data_files.push(ics_path);
    let costs_path = out.join("data").join("mc_costs.csv");
    if !costs_path.exists() {
        log::info!("solving {} BVPs for the optimal Monte-Carlo costs", ics.len());
        let costs = optimal_costs(problem, &sol, &ics, &cfg.bvp)?;
        write_atomic(&costs_path, &costs_to_text(&costs))?;
        r.computed += 1;
    }
    let costs = costs_from_text(&read(&costs_path)?, &costs_path.display().to_string())?;
    data_files.push(costs_path);
    r.record("data", &data_files)?;

    *stage = "train".into();
    let grid = model_grid(cfg);
    let tcfg = cfg.train.train_config();
    let mut train_files = vec![];
    for id in &grid {
        let mpath = model_path(out, id);
        let rpath = mpath.with_extension("train.csv");
        if !(mpath.exists() && rpath.exists()) {
            *stage = format!("train {}", id.name());
            let data = trajectory_prefix(&train_sets[id.trial], id.size)?;
            log::info!("training {} on {} samples", id.name(), data.len());
            let weights = LossWeights::default_for(id.kind);
            let (ctrl, rep) = training::train_controller(id.kind, problem, &sol, &data, &weights, cfg.trial_seed(id.trial), &tcfg)?;
            write_atomic(&mpath, &ctrl.to_text())?;
            let row = format!(
                "{}\n{},{},{},{},{},{},{},{},{}\n",
                TRAIN_HEADER,
                id.kind,
                id.size,
                id.trial,
                rep.n_train,
                rep.iterations,
                rep.evaluations,
                fmt_f(rep.final_loss),
                rep.reason.tag(),
                fmt_f(rep.seconds)
            );
            write_atomic(&rpath, &row)?;
            r.computed += 1;
        }
        train_files.push(mpath);
        train_files.push(rpath);
    }
    r.record("train", &train_files)?;

    *stage = "evaluate".into();
    let mut eval_files = vec![];
    let lqr_row = out.join("results").join("models").join("lqr.csv");
    if !lqr_row.exists() {
        let c = Controller::lqr(problem, &sol)?;
        let row = evaluate_model(problem, &c, cfg, &consts, &test, &ics, &costs, ("lqr".into(), 0, 0, 0))?;
        write_atomic(&lqr_row, &format!("{METRICS_HEADER}\n{row}\n"))?;
        r.computed += 1;
    }
    eval_files.push(lqr_row);
    for id in &grid {
        let path = out.join("results").join("models").join(format!("{}.csv", id.name()));
        if !path.exists() {
            *stage = format!("evaluate {}", id.name());
            log::info!("evaluating {}", id.name());
            let mpath = model_path(out, id);
            let c = Controller::from_text(&read(&mpath)?, &mpath.display().to_string(), problem, &sol)?;
            let n_train = trajectory_prefix(&train_sets[id.trial], id.size)?.len();
            let row = evaluate_model(problem, &c, cfg, &consts, &test, &ics, &costs, (id.kind.to_string(), id.size, id.trial, n_train))?;
            write_atomic(&path, &format!("{METRICS_HEADER}\n{row}\n"))?;
            r.computed += 1;
        }
        eval_files.push(path);
    }
    r.record("evaluate", &eval_files)?;

    *stage = "aggregate".into();
    let results = out.join("results");
    let mut metrics = format!("{METRICS_HEADER}\n");
    for f in &eval_files {
        metrics.push_str(read(f)?.lines().nth(1).unwrap_or_default());
        metrics.push('\n');
    }
    let mut training = format!("{}\n", TRAIN_HEADER.rsplit_once(",seconds").map(|p| p.0).unwrap_or(TRAIN_HEADER));
    let mut timings = String::from("kind,size,trial,seconds\n");
    for id in &grid {
        let text = read(&model_path(out, id).with_extension("train.csv"))?;
        let line = text.lines().nth(1).unwrap_or_default();
        let (head, secs) = line.rsplit_once(',').unwrap_or((line, ""));
        training.push_str(head);
        training.push('\n');
        let _ = writeln!(timings, "{},{},{},{}", id.kind, id.size, id.trial, secs);
    }
    let agg = [results.join("metrics.csv"), results.join("training.csv"), results.join("timings.csv")];
    write_atomic(&agg[0], &metrics)?;
    write_atomic(&agg[1], &training)?;
    write_atomic(&agg[2], &timings)?;
    r.record("aggregate", &agg)?;

    *stage = "report".into();
    let files = report::write_report(&results, &out.join("report"), cfg.sim.stable_tol)?;
    r.record("report", &files)?;
    Ok(grid.len())
}

pub const TRAIN_HEADER: &str = "kind,size,trial,n_train,iterations,evaluations,final_loss,stop,seconds";

pub const METRICS_HEADER: &str = "kind,size,trial,n_train,mean_l2,max_l2,eq_converged,eq_distance,eq_residual,max_real,locally_stable,mc_worst,mc_stable,mc_stabilized,mean_extra_cost,delta_n,delta_plus,f_estimate,probability";

/// BVP optimal costs `V(x0)` for the Monte-Carlo initial conditions.
pub fn optimal_costs(
    problem: &dyn ControlProblem,
    sol: &RiccatiSolution,
    ics: &[Vector],
    cfg: &BvpConfig,
) -> Result<Vec<f64>, PipelineError> {
    use rayon::prelude::*;
    let res: Vec<Result<bvp::OpenLoopSolution, BvpError>> = ics.par_iter().map(|x0| bvp::solve_pmp(problem, sol, x0.view(), cfg)).collect();
    res.into_iter()
        .enumerate()
        .map(|(i, r)| match r {
            Ok(s) if s.converged => Ok(s.value()),
            Ok(s) => Err(PipelineError::Generation(format!(
                "optimal cost for initial condition {i}: BVP did not converge (residual {:e})",
                s.residual
            ))),
            Err(e) => Err(PipelineError::Generation(format!("optimal cost for initial condition {i}: {e}"))),
        })
        .collect()
}

/// Certificate inputs from a test set: `δ_N`, and an empirical estimate of
/// `F(δ_N, ε_N)` from uniform draws of the test errors.
pub fn certificate_from_errors(
    errors: &[f64],
    consts: &lqr::LyapunovConstants,
    f_samples: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<eval::CertificateReport, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::Invalid("no test errors".into()));
    }
    let delta_n = errors.iter().cloned().fold(0.0, f64::max);
    let eps = lqr::delta_plus(consts) - delta_n;
    let f = if eps > 0.0 {
        eval::estimate_f(|g: &mut dyn rand::RngCore| g.random_range(0..errors.len()), |&i: &usize| errors[i], delta_n, eps, f_samples, rng)?
            .f
    } else {
        1.0
    };
    eval::probability_certificate(delta_n, errors.len(), consts, f.min(1.0))
}

#[allow(clippy::too_many_arguments)]
fn evaluate_model(
    problem: &dyn ControlProblem,
    ctrl: &Controller,
    cfg: &RunConfig,
    consts: &lqr::LyapunovConstants,
    test: &Dataset,
    ics: &[Vector],
    costs: &[f64],
    (kind, size, trial, n_train): (String, usize, usize, usize),
) -> Result<String, PipelineError> {
    let errors = eval::control_errors(problem, ctrl, test);
    let (mean, max) = eval::test_metrics(problem, ctrl, test)?;
    let eig = match eval::find_equilibrium(problem, ctrl, problem.goal_state().view()) {
        Ok(e) => Some(e),
        Err(EvalError::Model(ModelError::NonDifferentiable(_))) => None,
        Err(e) => return Err(e.into()),
    };
    let mc = eval::mc_suboptimality(problem, ctrl, ics, costs, &cfg.sim)?;
    let mut rng = dataset::stream_rng(cfg.trial_seed(trial), SeedStream::Certificate);
    let cert = certificate_from_errors(&errors, consts, cfg.certificate.f_samples, &mut rng)?;
    let stabilized = mc.stabilized.iter().filter(|s| **s).count();
    let (conv, dist, res, max_real, stable) = match &eig {
        Some(e) => (
            e.converged,
            Some(linalg::vec_norm((&e.x_bar - problem.goal_state()).view())),
            Some(e.residual),
            Some(e.max_real),
            e.converged && e.locally_stable,
        ),
        None => (false, None, None, None, false),
    };
    Ok(format!(
        "{kind},{size},{trial},{n_train},{},{},{conv},{},{},{},{stable},{},{},{stabilized},{},{},{},{},{}",
        fmt_f(mean),
        fmt_f(max),
        fmt_opt(dist),
        fmt_opt(res),
        fmt_opt(max_real),
        fmt_f(mc.worst_case),
        mc.stable,
        fmt_opt(mc.mean_extra_cost),
        fmt_f(cert.delta_n),
        fmt_f(cert.delta_plus),
        fmt_f(cert.f),
        fmt_opt(cert.probability),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sizes_rejected() {
        let mut cfg = RunConfig::default();
        cfg.data.sizes.clear();
        assert!(matches!(cfg.validate(), Err(PipelineError::Config(_))));
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.data.sizes, vec![8, 16, 32, 64, 128]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_str("[data]\nsize = [8]\n").is_err());
        let cfg = RunConfig::from_toml_str("seed = 7\n[data]\nsizes = [8, 32]\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.data.sizes, vec![8, 32]);
        assert_eq!(cfg.data.trials, 3);
    }

    #[test]
    fn ic_and_cost_files_round_trip() {
        let ics = vec![Vector::from(vec![1.0, -0.5]), Vector::from(vec![1e-20, 3.25])];
        let back = ics_from_text(&ics_to_text(&ics), "ics", 2).unwrap();
        assert_eq!(back, ics);
        assert!(ics_from_text(&ics_to_text(&ics), "ics", 3).is_err());
        let costs = vec![0.1, 2.0 / 3.0];
        assert_eq!(costs_from_text(&costs_to_text(&costs), "c").unwrap(), costs);
        assert!(costs_from_text("index,V\n1,2.0\n", "c").is_err());
    }

    #[test]
    fn prefix_keeps_whole_trajectories() {
        let mut d = Dataset::empty(1, 1);
        d.x = ndarray::Array2::from_shape_vec((5, 1), vec![0., 1., 2., 3., 4.]).unwrap();
        d.lambda = d.x.clone();
        d.u = d.x.clone();
        d.v = Vector::from(vec![0.; 5]);
        d.traj = vec![0, 0, 2, 2, 5];
        assert_eq!(trajectory_prefix(&d, 2).unwrap().len(), 4);
        assert_eq!(trajectory_prefix(&d, 3).unwrap().len(), 5);
        assert!(matches!(trajectory_prefix(&d, 4), Err(PipelineError::Generation(_))));
    }
}

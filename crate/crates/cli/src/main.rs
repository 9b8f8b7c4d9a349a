use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qrnet::dataset::{self, Dataset, SampleMode, SeedStream};
use qrnet::dynamics::ControlProblem;
use qrnet::eval::{self, McReport};
use qrnet::lqr::{self, RiccatiSolution};
use qrnet::models::{Controller, ControllerKind};
use qrnet::pipeline::{self, fmt_f, PipelineError, RunConfig};
use qrnet::report;
use qrnet::training::{self, LossWeights};

#[derive(Parser)]
#[command(name = "hjb-qrnet", version, about = "Optimal feedback controllers with LQR structure, trained on BVP data")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the Riccati equation of the linearized problem.
    Lqr(OutArg),
    /// Solve BVPs from random initial conditions and write a dataset.
    Generate(GenerateArgs),
    /// Train one controller on a dataset.
    Train(TrainArgs),
    /// Mean and max control error on a test set.
    TestMetrics(TestArgs),
    /// Closed-loop equilibrium and Jacobian spectrum.
    Eig(EigArgs),
    /// Monte-Carlo worst-case final state.
    McStability(McArgs),
    /// Monte-Carlo percent extra cost against BVP optimal costs.
    McCost(McCostArgs),
    /// Probabilistic ultimate-boundedness certificate.
    Bound(BoundArgs),
    /// Scatter CSVs and SVG plots from a results directory.
    Report(ReportArgs),
    /// The full generate, train, evaluate and report run.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct OutArg {
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    trajectories: usize,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<SampleMode>,
    /// Seed stream: `train` or `test`.
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_kind)]
    kind: ControllerKind,
    #[arg(long)]
    data: PathBuf,
    /// Controller file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mu_u: Option<f64>,
    #[arg(long)]
    mu_lambda: Option<f64>,
    #[arg(long)]
    mu_v: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Appends the training-report row here instead of printing it.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct TestArgs {
    #[arg(long)]
    controller: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EigArgs {
    #[arg(long)]
    controller: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the eigenvalues (`index,re,im`).
    #[arg(long)]
    spectrum: Option<PathBuf>,
}

#[derive(Args)]
struct McArgs {
    #[arg(long)]
    controller: PathBuf,
    /// Initial-condition file; sampled from the Monte-Carlo stream when omitted.
    #[arg(long)]
    ics: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    save_ics: Option<PathBuf>,
    /// Per-trajectory table.
    #[arg(long)]
    details: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct McCostArgs {
    #[arg(long)]
    controller: PathBuf,
    #[arg(long)]
    ics: PathBuf,
    /// Optimal costs (`index,V`); solved by BVP when omitted.
    #[arg(long)]
    costs: Option<PathBuf>,
    #[arg(long)]
    save_costs: Option<PathBuf>,
    #[arg(long)]
    details: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long)]
    controller: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    f_samples: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding metrics.csv (and optionally timings.csv).
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    stable_tol: f64,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    out: PathBuf,
}

fn parse_kind(s: &str) -> Result<ControllerKind, String> {
    s.parse().map_err(|e: qrnet::models::ModelError| e.to_string())
}

fn parse_mode(s: &str) -> Result<SampleMode, String> {
    match s {
        "ball" => Ok(SampleMode::Ball),
        "sphere" => Ok(SampleMode::Sphere),
        _ => Err(format!("expected `ball` or `sphere`, got `{s}`")),
    }
}

fn configure_threads() -> Result<(), PipelineError> {
    let Ok(v) = std::env::var("HJB_QRNET_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| PipelineError::Config(format!("HJB_QRNET_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| PipelineError::Config(e.to_string()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), PipelineError> {
    match out {
        Some(p) => pipeline::write_atomic(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(|e| PipelineError::Io { path: path.into(), msg: e.to_string() })
}

fn load_dataset(path: &Path) -> Result<Dataset, PipelineError> {
    Ok(Dataset::from_text(&read(path)?, &path.display().to_string())?)
}

fn load_controller(path: &Path, problem: &dyn ControlProblem, sol: &RiccatiSolution) -> Result<Controller, PipelineError> {
    Ok(Controller::from_text(&read(path)?, &path.display().to_string(), problem, sol)?)
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

const MC_HEADER: &str = "kind,count,worst_case,stable,stabilized,mean_extra_cost";

fn mc_row(kind: ControllerKind, r: &McReport) -> String {
    format!(
        "{kind},{},{},{},{},{}\n",
        r.count(),
        fmt_f(r.worst_case),
        r.stable,
        r.stabilized.iter().filter(|s| **s).count(),
        opt(r.mean_extra_cost)
    )
}

fn mc_details(r: &McReport) -> String {
    let mut s = String::from("index,final_norm,cost,termination,stabilized,optimal_cost,extra_cost\n");
    for i in 0..r.count() {
        let v = r.optimal_costs.as_ref().map(|c| c[i]);
        let _ = writeln!(
            s,
            "{i},{},{},{},{},{},{}",
            fmt_f(r.final_norms[i]),
            fmt_f(r.costs[i]),
            r.terminations[i].tag(),
            r.stabilized[i],
            opt(v),
            opt(r.extra_cost[i])
        );
    }
    s
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    configure_threads()?;
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Cmd::Pipeline(a) = &cli.cmd {
        let summary = pipeline::run_pipeline(&cfg, &a.out)?;
        log::info!("{} models; {} items computed", summary.models, summary.computed);
        println!("{}", summary.out_dir.join(pipeline::MANIFEST).display());
        return Ok(());
    }
    if let Cmd::Report(a) = &cli.cmd {
        for f in report::write_report(&a.results, &a.out, a.stable_tol)? {
            println!("{}", f.display());
        }
        return Ok(());
    }
    cfg.validate()?;
    let problem = cfg.problem.build()?;
    let problem = problem.as_ref();
    let sol = RiccatiSolution::for_problem(problem)?;
    match cli.cmd {
        Cmd::Lqr(a) => {
            let eig = qrnet::linalg::eig_general(sol.closed_loop_a.view())?;
            let mut s = String::from("key,value\n");
            let _ = writeln!(s, "fingerprint,{}", sol.fingerprint());
            let _ = writeln!(s, "relative_residual,{}", fmt_f(sol.relative_residual()));
            let _ = writeln!(s, "closed_loop_max_real,{}", fmt_f(eig.max_real_part));
            for (i, row) in sol.p.rows().into_iter().enumerate() {
                let _ = writeln!(s, "P_{},{}", i + 1, row.iter().map(|v| fmt_f(*v)).collect::<Vec<_>>().join(";"));
            }
            emit(a.out.as_deref(), &s)
        }
        Cmd::Generate(a) => {
            let stream = match a.split.as_str() {
                "train" => SeedStream::Train,
                "test" => SeedStream::Test,
                s => return Err(PipelineError::Config(format!("--split must be train or test, got `{s}`"))),
            };
            let default_mode = if stream == SeedStream::Test { SampleMode::Sphere } else { cfg.data.mode };
            let req = dataset::GenerationRequest {
                trajectories: a.trajectories,
                radius: a.radius.unwrap_or(cfg.data.radius),
                mode: a.mode.unwrap_or(default_mode),
                seed: cfg.seed,
                stream,
            };
            let (d, rep) = dataset::generate_dataset(problem, &sol, &req, &cfg.bvp)?;
            log::info!(
                "{} of {} trajectories converged ({} suspicious), max |H| {:e}, {} samples",
                rep.converged,
                rep.requested,
                rep.suspicious,
                rep.max_hamiltonian,
                d.len()
            );
            pipeline::write_atomic(&a.out, &d.to_text())
        }
        Cmd::Train(a) => {
            let data = load_dataset(&a.data)?;
            let mut w = LossWeights::default_for(a.kind);
            w.mu_u = a.mu_u.unwrap_or(w.mu_u);
            w.mu_lambda = a.mu_lambda.unwrap_or(w.mu_lambda);
            w.mu_v = a.mu_v.unwrap_or(w.mu_v);
            let mut tcfg = cfg.train.train_config();
            if let Some(it) = a.max_iters {
                tcfg.lbfgs.max_iters = it;
            }
            let (ctrl, rep) = training::train_controller(a.kind, problem, &sol, &data, &w, cfg.seed, &tcfg)?;
            pipeline::write_atomic(&a.out, &ctrl.to_text())?;
            let row = format!(
                "{},{},{},{},{},{}\n",
                rep.kind,
                rep.n_train,
                fmt_f(rep.seconds),
                fmt_f(rep.final_loss),
                rep.iterations,
                rep.reason.tag()
            );
            let header = "kind,n_train,seconds,final_loss,iterations,stop\n";
            match a.report {
                Some(p) => {
                    let mut text = if p.exists() { read(&p)? } else { header.to_string() };
                    text.push_str(&row);
                    pipeline::write_atomic(&p, &text)
                }
                None => emit(None, &format!("{header}{row}")),
            }
        }
        Cmd::TestMetrics(a) => {
            let ctrl = load_controller(&a.controller, problem, &sol)?;
            let test = load_dataset(&a.data)?;
            let (mean, max) = eval::test_metrics(problem, &ctrl, &test)?;
            emit(a.out.as_deref(), &format!("kind,n_test,mean_l2,max_l2\n{},{},{},{}\n", ctrl.kind(), test.len(), fmt_f(mean), fmt_f(max)))
        }
        Cmd::Eig(a) => {
            let ctrl = load_controller(&a.controller, problem, &sol)?;
            let e = eval::find_equilibrium(problem, &ctrl, problem.goal_state().view())?;
            let dist = qrnet::linalg::vec_norm((&e.x_bar - problem.goal_state()).view());
            if let Some(p) = a.spectrum {
                let mut s = String::from("index,re,im\n");
                for (i, z) in e.spectrum.eigenvalues.iter().enumerate() {
                    let _ = writeln!(s, "{i},{},{}", fmt_f(z.re), fmt_f(z.im));
                }
                pipeline::write_atomic(&p, &s)?;
            }
            emit(
                a.out.as_deref(),
                &format!(
                    "kind,converged,newton_steps,distance,residual,max_real,locally_stable\n{},{},{},{},{},{},{}\n",
                    ctrl.kind(),
                    e.converged,
                    e.newton_steps,
                    fmt_f(dist),
                    fmt_f(e.residual),
                    fmt_f(e.max_real),
                    e.converged && e.locally_stable
                ),
            )
        }
        Cmd::McStability(a) => {
            let ctrl = load_controller(&a.controller, problem, &sol)?;
            let ics = match &a.ics {
                Some(p) => pipeline::ics_from_text(&read(p)?, &p.display().to_string(), problem.state_dim())?,
                None => {
                    let mut rng = dataset::stream_rng(cfg.seed, SeedStream::MonteCarlo);
                    dataset::sample_initial_conditions(
                        problem,
                        a.count.unwrap_or(cfg.data.mc_count),
                        a.radius.unwrap_or(cfg.data.mc_radius),
                        SampleMode::Sphere,
                        &mut rng,
                    )?
                }
            };
            if let Some(p) = &a.save_ics {
                pipeline::write_atomic(p, &pipeline::ics_to_text(&ics))?;
            }
            let r = eval::mc_worst_case(problem, &ctrl, &ics, &cfg.sim);
            if let Some(p) = &a.details {
                pipeline::write_atomic(p, &mc_details(&r))?;
            }
            emit(a.out.as_deref(), &format!("{MC_HEADER}\n{}", mc_row(ctrl.kind(), &r)))
        }
        Cmd::McCost(a) => {
            let ctrl = load_controller(&a.controller, problem, &sol)?;
            let ics = pipeline::ics_from_text(&read(&a.ics)?, &a.ics.display().to_string(), problem.state_dim())?;
            let costs = match &a.costs {
                Some(p) => pipeline::costs_from_text(&read(p)?, &p.display().to_string())?,
                None => pipeline::optimal_costs(problem, &sol, &ics, &cfg.bvp)?,
            };
            if let Some(p) = &a.save_costs {
                pipeline::write_atomic(p, &pipeline::costs_to_text(&costs))?;
            }
            let r = eval::mc_suboptimality(problem, &ctrl, &ics, &costs, &cfg.sim)?;
            let base = eval::mc_suboptimality(problem, &Controller::lqr(problem, &sol)?, &ics, &costs, &cfg.sim)?;
            if let Some(p) = &a.details {
                pipeline::write_atomic(p, &mc_details(&r))?;
            }
            emit(a.out.as_deref(), &format!("{MC_HEADER}\n{}{}", mc_row(ctrl.kind(), &r), mc_row(ControllerKind::Lqr, &base)))
        }
        Cmd::Bound(a) => {
            let ctrl = load_controller(&a.controller, problem, &sol)?;
            let test = load_dataset(&a.data)?;
            let consts = lqr::lyapunov_constants(
                &sol,
                problem,
                a.radius.unwrap_or(cfg.certificate.radius),
                a.theta.unwrap_or(cfg.certificate.theta),
            )?;
            let errors = eval::control_errors(problem, &ctrl, &test);
            let mut rng = dataset::stream_rng(cfg.seed, SeedStream::Certificate);
            let c = pipeline::certificate_from_errors(&errors, &consts, a.f_samples.unwrap_or(cfg.certificate.f_samples), &mut rng)?;
            emit(
                a.out.as_deref(),
                &format!(
                    "kind,delta_n,delta_plus,eps_n,f,n,probability,vacuous,overshoot,alpha,bound\n{},{},{},{},{},{},{},{},{},{},{}\n",
                    ctrl.kind(),
                    fmt_f(c.delta_n),
                    fmt_f(c.delta_plus),
                    fmt_f(c.eps_n),
                    fmt_f(c.f),
                    c.n,
                    opt(c.probability),
                    c.vacuous(),
                    fmt_f(c.bound.overshoot),
                    fmt_f(c.bound.alpha),
                    fmt_f(c.bound.bound)
                ),
            )
        }
        Cmd::Report(_) | Cmd::Pipeline(_) => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

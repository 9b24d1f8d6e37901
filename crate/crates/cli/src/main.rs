//! `atp`: generate demos, augment, train, plan, traverse, evaluate, serve.
//!
//! Exit status is 0 on success, 1 on a domain error (reported as one JSON
//! line on stderr) and 2 on a usage error.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use atp_core::atpmodel::{
    load_model, save_model, train, write_metrics_csv, AtpModel, ModelConfig, TrainingConfig,
};
use atp_core::augmentation::{
    build_dataset, demo_records, generate_demos, load_demos, read_jsonl, save_demos, write_jsonl,
    AugmentationConfig, LabeledSample, DEFAULT_GOAL_SIGMA, DEFAULT_PERTURBATION_SCALE,
};
use atp_core::kinematics::KinematicChain;
use atp_core::planner::{
    evaluate_generalization, latent_traversal, linspace, plan_lenient, sample_region_goals,
    write_generalization_csv, ClassCode, PlanRequest, ProjectionOverrides, TraversalAxis,
};
use atp_core::projection::ProjectionConfig;
use atp_core::trajectory::SmoothnessOperator;
use atp_core::AtpError;
use atp_service::{ServiceState, TraverseResponse};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "atp", version, about = "Autoencoder trajectory primitives")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write scripted demonstrations, one JSON file each.
    GenDemos(GenDemosArgs),
    /// Synthesize a labeled dataset (JSONL) around the demos.
    Augment(AugmentArgs),
    /// Train a model; also writes `<model stem>.metrics.csv`.
    Train(TrainArgs),
    /// Decode one latent code at a goal.
    Plan(PlanArgs),
    /// Sweep one latent coordinate.
    Traverse(TraverseArgs),
    /// Goal generalization errors as CSV.
    Eval(EvalArgs),
    /// Run the HTTP planning service.
    Serve(ServeArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ChainKind {
    Planar,
    Spatial,
}

impl ChainKind {
    fn chain(self) -> KinematicChain {
        match self {
            ChainKind::Planar => KinematicChain::default_planar(),
            ChainKind::Spatial => KinematicChain::default_spatial(),
        }
    }
}

#[derive(Args, Debug)]
struct GenDemosArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "planar")]
    chain: ChainKind,
    /// Rows per trajectory (T + 1).
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 2)]
    families: usize,
    #[arg(long, default_value_t = 2)]
    variants: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long)]
    demos: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4000)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Per-joint standard deviation of the goal shift (rad).
    #[arg(long, default_value_t = DEFAULT_GOAL_SIGMA)]
    goal_sigma: f64,
    /// Interior perturbation scale.
    #[arg(long, default_value_t = DEFAULT_PERTURBATION_SCALE)]
    scale: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the standard chain matching the data's dof and goal dimension.
    #[arg(long, value_enum)]
    chain: Option<ChainKind>,
    #[arg(long, default_value_t = 250)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    #[arg(long, default_value_t = 30.0)]
    gamma: f64,
    #[arg(long, default_value_t = 5.0)]
    cz_max: f64,
    /// Defaults to ln k_c.
    #[arg(long)]
    cc_max: Option<f64>,
    #[arg(long, default_value_t = 0.67)]
    tau: f64,
    #[arg(long, default_value_t = 5)]
    k_z: usize,
    #[arg(long, default_value_t = 4)]
    k_c: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Clone)]
struct CodeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Continuous code; zeros when omitted.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    z: Option<Vec<f64>>,
    /// Discrete class index.
    #[arg(long, default_value_t = 0)]
    c: usize,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    goal: Vec<f64>,
    #[arg(long)]
    project: bool,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Accepted for uniformity; planning is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl CodeArgs {
    fn request(&self, model: &AtpModel) -> PlanRequest {
        PlanRequest {
            z: self.z.clone().unwrap_or_else(|| vec![0.0; model.dims().k_z]),
            c: ClassCode::Index(self.c),
            goal: self.goal.clone(),
            project: self.project,
            cfg: ProjectionOverrides {
                tol: self.tol,
                max_iters: self.max_iters,
                ..ProjectionOverrides::default()
            },
        }
    }
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[command(flatten)]
    code: CodeArgs,
    /// Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TraverseArgs {
    #[command(flatten)]
    code: CodeArgs,
    /// `c` for the discrete code, or `z<i>` for continuous unit i.
    #[arg(long, default_value = "z0")]
    axis: String,
    #[arg(long, default_value_t = -2.5, allow_hyphen_values = true)]
    grid_min: f64,
    #[arg(long, default_value_t = 2.5, allow_hyphen_values = true)]
    grid_max: f64,
    #[arg(long, default_value_t = 7)]
    grid_n: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    demos: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of random goals; ignored with --demo-goals.
    #[arg(long, default_value_t = 20)]
    n: usize,
    /// Evaluate at the demos' own goals instead of random ones.
    #[arg(long)]
    demo_goals: bool,
    #[arg(long, default_value_t = DEFAULT_GOAL_SIGMA)]
    goal_sigma: f64,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, default_value_t = 11)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    demos: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
    host: IpAddr,
}

#[derive(Debug)]
struct Failure {
    kind: &'static str,
    message: String,
}

impl From<AtpError> for Failure {
    fn from(e: AtpError) -> Self {
        let kind = match &e {
            AtpError::DimensionMismatch { .. } => "dimension_mismatch",
            AtpError::InvalidArgument(_) => "invalid_argument",
            AtpError::Singular(_) => "singular",
            AtpError::Unreachable { .. } => "unreachable",
            AtpError::NonFinite(_) => "non_finite",
            AtpError::Diverged { .. } => "diverged",
            AtpError::NotConverged(_) => "not_converged",
            AtpError::Format(_) | AtpError::Json(_) => "format",
            AtpError::Io(_) => "io",
        };
        Failure {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        AtpError::Io(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        AtpError::Json(e).into()
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn invalid(message: String) -> Failure {
    Failure {
        kind: "invalid_argument",
        message,
    }
}

fn open_out(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: serde::Serialize>(path: Option<&Path>, value: &T) -> CliResult {
    let mut out = open_out(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

/// `model.json` → `model.metrics.csv`, beside the model.
fn metrics_path(model: &Path) -> PathBuf {
    let stem = model.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    model.with_file_name(format!("{stem}.metrics.csv"))
}

fn gen_demos(args: GenDemosArgs) -> CliResult {
    let chain = args.chain.chain();
    let horizon = args.steps.saturating_sub(1);
    let demos = generate_demos(&chain, horizon, args.families, args.variants, args.seed)?;
    let paths = save_demos(&args.out, &demo_records(&chain, demos, args.variants))?;
    log::info!("wrote {} demos to {}", paths.len(), args.out.display());
    Ok(())
}

fn augment(args: AugmentArgs) -> CliResult {
    let records = load_demos(&args.demos)?;
    let chain = records[0].chain.clone();
    let demos: Vec<_> = records.into_iter().map(|r| r.trajectory).collect();
    let op = SmoothnessOperator::for_steps(demos[0].steps())?;
    let cfg = AugmentationConfig {
        goal_sigma: vec![args.goal_sigma; chain.dof()],
        perturbation_scale: args.scale,
        n_samples: args.n,
        seed: args.seed,
    };
    let data = build_dataset(&chain, &op, &demos, &cfg)?;
    if data.clamped_fraction() > 0.0 {
        log::warn!("clamped {:.4}% of joint entries into [-pi, pi]", 100.0 * data.clamped_fraction());
    }
    let mut out = BufWriter::new(File::create(&args.out)?);
    write_jsonl(&mut out, &data.samples)?;
    log::info!("wrote {} samples to {}", data.samples.len(), args.out.display());
    Ok(())
}

fn infer_chain(samples: &[LabeledSample], kind: Option<ChainKind>) -> CliResult<KinematicChain> {
    let first = samples.first().ok_or_else(|| invalid("dataset is empty".into()))?;
    let chain = match kind {
        Some(k) => k.chain(),
        None => match first.goal.len() {
            2 => KinematicChain::default_planar(),
            3 => KinematicChain::default_spatial(),
            d => return Err(invalid(format!("no default chain for {d}-D goals; pass --chain"))),
        },
    };
    if chain.dof() != first.trajectory.dof() || chain.workspace_dim() != first.goal.len() {
        return Err(invalid(format!(
            "dataset has dof {} and {}-D goals, chain has dof {} and {}-D workspace",
            first.trajectory.dof(),
            first.goal.len(),
            chain.dof(),
            chain.workspace_dim()
        )));
    }
    let ee = chain.forward_kinematics(&first.trajectory.last())?;
    let gap = ee.iter().zip(&first.goal).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if gap > 1e-9 {
        return Err(invalid(format!("goal labels do not match the chain (gap {gap:.3e} m)")));
    }
    Ok(chain)
}

fn train_cmd(args: TrainArgs) -> CliResult {
    let samples = read_jsonl(BufReader::new(File::open(&args.data)?))?;
    let chain = infer_chain(&samples, args.chain)?;
    let model_cfg = ModelConfig {
        k_z: args.k_z,
        k_c: args.k_c,
        seed: args.seed,
        ..ModelConfig::default()
    };
    let mut model = AtpModel::new(&chain, samples[0].trajectory.steps(), &model_cfg)?;
    let cfg = TrainingConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        gamma: args.gamma,
        capacity_z_max: args.cz_max,
        capacity_c_max: args.cc_max,
        temperature: args.tau,
        seed: args.seed,
        ..TrainingConfig::default()
    };
    let metrics = train(&mut model, &samples, &cfg)?;
    save_model(&model, &args.out)?;
    let csv = metrics_path(&args.out);
    let mut out = BufWriter::new(File::create(&csv)?);
    write_metrics_csv(&mut out, &metrics)?;
    out.flush()?;
    log::info!("wrote {} and {}", args.out.display(), csv.display());
    Ok(())
}

fn projection_config(tol: Option<f64>) -> ProjectionConfig {
    ProjectionConfig {
        tol: tol.unwrap_or(ProjectionConfig::default().tol),
        ..ProjectionConfig::default()
    }
}

fn plan_cmd(args: PlanArgs) -> CliResult {
    let model = load_model(&args.code.model)?;
    let req = args.code.request(&model);
    let result = plan_lenient(&model, &req, &ProjectionConfig::default())?;
    // best-so-far is still written when projection falls short
    write_json(args.out.as_deref(), &result)?;
    if !result.converged() {
        return Err(AtpError::NotConverged(Box::new(result)).into());
    }
    Ok(())
}

fn parse_axis(axis: &str) -> CliResult<TraversalAxis> {
    if axis == "c" {
        return Ok(TraversalAxis::Discrete);
    }
    axis.strip_prefix('z')
        .and_then(|i| i.parse().ok())
        .map(TraversalAxis::Continuous)
        .ok_or_else(|| invalid(format!("axis must be `c` or `z<index>`, got `{axis}`")))
}

fn traverse_cmd(args: TraverseArgs) -> CliResult {
    let axis = parse_axis(&args.axis)?;
    let model = load_model(&args.code.model)?;
    let grid = match axis {
        TraversalAxis::Discrete => Vec::new(),
        TraversalAxis::Continuous(_) => linspace(args.grid_min, args.grid_max, args.grid_n),
    };
    let fixed = args.code.request(&model);
    let results = latent_traversal(&model, &fixed, axis, &grid, &ProjectionConfig::default())?;
    write_json(args.out.as_deref(), &TraverseResponse { axis, grid, results })
}

fn eval_cmd(args: EvalArgs) -> CliResult {
    let model = load_model(&args.model)?;
    let records = load_demos(&args.demos)?;
    let chain = model.chain();
    let demos: Vec<_> = records.into_iter().map(|r| r.trajectory).collect();
    let goals = if args.demo_goals {
        demos
            .iter()
            .enumerate()
            .map(|(m, d)| Ok((chain.forward_kinematics(&d.last())?.as_slice().to_vec(), m)))
            .collect::<Result<Vec<_>, AtpError>>()?
    } else {
        sample_region_goals(chain, &demos, &vec![args.goal_sigma; chain.dof()], args.n, args.seed)?
    };
    let cases = goals
        .into_iter()
        .map(|(goal, m)| Ok((goal, model.infer_code(&demos[m])?.0)))
        .collect::<Result<Vec<_>, AtpError>>()?;
    let summary = evaluate_generalization(&model, &cases, &projection_config(args.tol))?;
    let mut out = BufWriter::new(File::create(&args.out)?);
    write_generalization_csv(&mut out, &summary)?;
    out.flush()?;
    println!(
        "goals {} median_before_m {:.6} p95_before_m {:.6} median_after_m {:.3e} p95_after_m {:.3e} converged {:.3}",
        summary.rows.len(),
        summary.median_before_m,
        summary.p95_before_m,
        summary.median_after_m,
        summary.p95_after_m,
        summary.converged_fraction
    );
    Ok(())
}

fn serve_cmd(args: ServeArgs) -> CliResult {
    let model = load_model(&args.model)?;
    let demos = match &args.demos {
        Some(dir) => load_demos(dir)?,
        None => Vec::new(),
    };
    let state = ServiceState::new(model, ProjectionConfig::default(), demos)?;
    let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    runtime.block_on(atp_service::serve(state, SocketAddr::new(args.host, args.port)))?;
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenDemos(a) => gen_demos(a),
        Command::Augment(a) => augment(a),
        Command::Train(a) => train_cmd(a),
        Command::Plan(a) => plan_cmd(a),
        Command::Traverse(a) => traverse_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ATP_LOG", "info")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let line = serde_json::json!({"error": f.kind, "message": f.message});
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}

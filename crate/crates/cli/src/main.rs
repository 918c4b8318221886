use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use coupled_market::baselines::{run_method, BaselineConfig, Method};
use coupled_market::feasibility::{max_uniform_fee, trace_envelope, write_frontier_csv, Axis, Scalings};
use coupled_market::format::{from_json_str, load_instance, save_instance, to_canonical_json};
use coupled_market::harness::experiments::{
    envelope_experiment, fairness_experiment, propagation_experiment, stress_experiment, sustained_limit,
    write_rows_to_path, ExperimentConfig, ENVELOPE_GRID, FAIRNESS_RHOS, MARGIN_AXIS, RESERVE_AXIS,
    STRESS_MARGIN_GRID, STRESS_RESERVE_GRID, SUSTAIN_THRESHOLD,
};
use coupled_market::harness::generate::{generate, GeneratorConfig};
use coupled_market::shapley::{shapley_table_from_entries, SubsetUtility};
use coupled_market::solver::{keyed_prices, solve, write_trace_csv, ReportDocument, Schedule, SolverConfig};
use coupled_market::{acceptance_check, Market, QuotationParams};

const EXIT_INVALID: u8 = 1;
const EXIT_NOT_CONVERGED: u8 = 3;

/// Raised when the solver stops before reaching the tolerance.
#[derive(Debug)]
struct NotConverged {
    iterations: usize,
    residual: f64,
}

impl std::fmt::Display for NotConverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "solver did not converge after {} sweeps (residual {:e})", self.iterations, self.residual)
    }
}

impl std::error::Error for NotConverged {}

#[derive(Parser)]
#[command(name = "coupled-market", version, about = "Equilibrium pricing for coupled data and model markets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random market instance.
    Generate(GenerateArgs),
    /// Solve for the equilibrium prices of an instance.
    Solve(SolveArgs),
    /// Turn a subset-utility file into a normalized Shapley table.
    Shapley(ShapleyArgs),
    /// Trace the feasibility envelope of an instance.
    Envelope(EnvelopeArgs),
    /// Largest uniform platform fee that keeps every buyer feasible.
    Fee(FeeArgs),
    /// Price an instance with a single-pass baseline or the coupled solver.
    Baseline(BaselineArgs),
    /// Run an experiment over generated instances.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct SolverArgs {
    /// Residual tolerance.
    #[arg(long, default_value_t = 1e-10)]
    epsilon: f64,
    /// Sweep limit.
    #[arg(long = "max-iter", default_value_t = 100_000)]
    max_iter: usize,
    #[arg(long, default_value = "sync", value_parser = parse_schedule)]
    schedule: Schedule,
    /// Seed of the asynchronous schedule.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SolverArgs {
    fn config(&self) -> Result<SolverConfig> {
        let config = SolverConfig {
            tolerance: self.epsilon,
            max_iterations: self.max_iter,
            schedule: self.schedule,
            seed: self.seed,
            ..Default::default()
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct ScalingArgs {
    #[arg(long = "alpha-kd", default_value_t = 1.0)]
    alpha_kd: f64,
    #[arg(long = "alpha-km", default_value_t = 1.0)]
    alpha_km: f64,
    #[arg(long = "alpha-delta", default_value_t = 1.0)]
    alpha_delta: f64,
    /// Uniform platform fee in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    tau: f64,
}

impl ScalingArgs {
    fn params(&self) -> Result<QuotationParams> {
        let params = QuotationParams {
            alpha_kappa_d: self.alpha_kd,
            alpha_kappa_m: self.alpha_km,
            alpha_delta: self.alpha_delta,
            ..QuotationParams::with_fee(self.tau)?
        };
        params.validate()?;
        Ok(params)
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total buyer weight of every model.
    #[arg(long, default_value_t = 0.6)]
    rho: f64,
    #[arg(long, default_value_t = 7)]
    datasets: usize,
    #[arg(long, default_value_t = 7)]
    models: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    instance: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    scalings: ScalingArgs,
    /// Report document (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Residual trace (CSV).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct ShapleyArgs {
    /// Subset-utility file.
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Panel {
    KdDelta,
    KmDelta,
    KdKm,
}

impl Panel {
    fn axes(self) -> (Axis, Axis) {
        match self {
            Panel::KdDelta => (Axis::KappaD, Axis::Delta),
            Panel::KmDelta => (Axis::KappaM, Axis::Delta),
            Panel::KdKm => (Axis::KappaD, Axis::KappaM),
        }
    }
}

#[derive(Args)]
struct EnvelopeArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long, value_enum, default_value = "kd-delta")]
    panel: Panel,
    /// Comma-separated values of the horizontal axis.
    #[arg(long, value_delimiter = ',', default_values_t = ENVELOPE_GRID)]
    grid: Vec<f64>,
    /// Skip the solver-based frontier.
    #[arg(long)]
    analytic_only: bool,
    #[command(flatten)]
    solver: SolverArgs,
    /// Scalings held fixed off the panel axes.
    #[command(flatten)]
    scalings: ScalingArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FeeArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long, default_value = "sf", value_parser = parse_method)]
    method: Method,
    /// Reserve quantile targeted by the broker-centric rule.
    #[arg(long, default_value_t = 0.5)]
    quantile: f64,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    scalings: ScalingArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    Fairness,
    Stress,
    Propagation,
    Envelope,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(value_enum)]
    kind: Experiment,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// First instance seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of generated instances.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Total buyer weight (ignored by the fairness sweep).
    #[arg(long, default_value_t = 0.6)]
    rho: f64,
    #[arg(long, default_value_t = 0.5)]
    quantile: f64,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    method: Vec<Method>,
    /// Instance for the envelope experiment; generated from the seed when absent.
    #[arg(long)]
    instance: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-10)]
    epsilon: f64,
    #[arg(long = "max-iter", default_value_t = 100_000)]
    max_iter: usize,
}

fn parse_schedule(s: &str) -> Result<Schedule, String> {
    s.parse().map_err(|e: coupled_market::Error| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: coupled_market::Error| e.to_string())
}

fn load_market(path: &Path) -> Result<Market> {
    let instance = load_instance(path).with_context(|| format!("cannot load {}", path.display()))?;
    Ok(Market::new(instance)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn run_generate(args: GenerateArgs) -> Result<()> {
    let config = GeneratorConfig {
        n_datasets: args.datasets,
        n_models: args.models,
        datasets_per_model: (args.datasets, args.datasets),
        ..GeneratorConfig::default()
    }
    .with_rho(args.rho);
    let instance = generate(&config, args.seed)?;
    save_instance(&instance, &args.out).with_context(|| format!("cannot write {}", args.out.display()))?;
    let buyers: usize = instance.models.iter().map(|m| m.buyers.len()).sum();
    println!(
        "instance: {} datasets, {} models, {} buyers -> {}",
        instance.datasets.len(),
        instance.models.len(),
        buyers,
        args.out.display()
    );
    Ok(())
}

fn run_solve(args: SolveArgs) -> Result<()> {
    let config = args.solver.config()?;
    let params = args.scalings.params()?;
    let market = load_market(&args.instance)?;
    let report = solve(&market, params, &config)?;

    if let Some(path) = &args.out {
        let doc = ReportDocument::new(&market, &report)?;
        write_text(path, &to_canonical_json(&doc)?)?;
    }
    if let Some(path) = &args.trace {
        write_trace_csv(create(path)?, &args.instance.display().to_string(), &report, true)?;
    }

    let (buyers, data) = keyed_prices(&market, &report.prices)?;
    for b in &buyers {
        println!("p_B {}/{} = {:.6}", b.model, b.buyer, b.price);
    }
    for d in &data {
        println!("p_D {}/{} = {:.6}", d.dataset, d.model, d.price);
    }
    println!("iterations = {}", report.iterations);
    println!("residual = {:e}", report.final_residual());
    println!("success_rate = {:.6}", report.acceptance.success_rate());
    if !report.converged {
        return Err(NotConverged { iterations: report.iterations, residual: report.final_residual() }.into());
    }
    Ok(())
}

fn run_shapley(args: ShapleyArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.instance)
        .with_context(|| format!("cannot read {}", args.instance.display()))?;
    let entries: Vec<SubsetUtility> = from_json_str(&text)?;
    let table = shapley_table_from_entries(&entries)?;
    if let Some(path) = &args.out {
        write_text(path, &to_canonical_json(&table)?)?;
    }
    for col in &table.columns {
        for (dataset, share) in &col.shares {
            println!("{} {} = {:.6}", col.model, dataset, share);
        }
    }
    Ok(())
}

fn run_envelope(args: EnvelopeArgs) -> Result<()> {
    let config = args.solver.config()?;
    args.scalings.params()?;
    let market = load_market(&args.instance)?;
    let (x_axis, y_axis) = args.panel.axes();
    let fixed = Scalings::new(args.scalings.alpha_kd, args.scalings.alpha_km, args.scalings.alpha_delta);
    let numeric = (!args.analytic_only).then_some(&config);
    let envelope = trace_envelope(&market, x_axis, y_axis, fixed, &args.grid, numeric)?;
    if let Some(path) = &args.out {
        write_frontier_csv(create(path)?, &envelope)?;
    }
    println!("{} -> max {}", x_axis, y_axis);
    for p in &envelope.points {
        let numeric = p.numeric.as_ref().map(|f| f.cell()).unwrap_or_else(|| "-".into());
        println!("{:>8} analytic {:>14} numeric {:>14}", p.x, p.analytic.cell(), numeric);
    }
    Ok(())
}

fn run_fee(args: FeeArgs) -> Result<()> {
    let market = load_market(&args.instance)?;
    let fee = max_uniform_fee(&market);
    if let Some(path) = &args.out {
        let doc = serde_json::json!({
            "alpha_star": fee.alpha_star,
            "tau_star": fee.tau_star,
            "binding_model": fee.binding_model,
            "per_model": fee.per_model.iter().map(|(m, a)| serde_json::json!({"model": m, "alpha": a})).collect::<Vec<_>>(),
        });
        write_text(path, &serde_json::to_string_pretty(&doc)?)?;
    }
    println!("alpha_star = {:.6}", fee.alpha_star);
    println!("tau_star = {:.6}", fee.tau_star);
    println!("binding_model = {}", fee.binding_model);
    Ok(())
}

fn run_baseline(args: BaselineArgs) -> Result<()> {
    let config = args.solver.config()?;
    let params = args.scalings.params()?;
    let baseline = BaselineConfig { quantile: args.quantile, ..Default::default() };
    baseline.validate()?;
    let market = load_market(&args.instance)?;
    let prices = run_method(&market, args.method, params, &baseline, &config)?;
    let acceptance = acceptance_check(&market, &prices)?;
    let (buyers, data) = keyed_prices(&market, &prices)?;
    if let Some(path) = &args.out {
        let doc = serde_json::json!({
            "method": args.method.name(),
            "success_rate": acceptance.success_rate(),
            "buyer_prices": buyers,
            "data_prices": data,
        });
        write_text(path, &serde_json::to_string_pretty(&doc)?)?;
    }
    println!("method = {}", args.method);
    for b in &buyers {
        println!("p_B {}/{} = {:.6}{}", b.model, b.buyer, b.price, if b.accepted { "" } else { " (rejected)" });
    }
    for d in &data {
        println!("p_D {}/{} = {:.6}{}", d.dataset, d.model, d.price, if d.accepted { "" } else { " (rejected)" });
    }
    println!("success_rate = {:.6}", acceptance.success_rate());
    Ok(())
}

fn run_experiment(args: ExperimentArgs) -> Result<()> {
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let config = ExperimentConfig {
        seeds: (args.seed..args.seed + args.seeds).collect(),
        generator: GeneratorConfig::default().with_rho(args.rho),
        solver: SolverConfig { tolerance: args.epsilon, max_iterations: args.max_iter, ..Default::default() },
        baseline: BaselineConfig { quantile: args.quantile, ..Default::default() },
    };
    config.solver.validate()?;
    config.baseline.validate()?;
    let methods = if args.method.is_empty() { Method::ALL.to_vec() } else { args.method.clone() };
    std::fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;

    match args.kind {
        Experiment::Fairness => {
            let result = fairness_experiment(&config, &FAIRNESS_RHOS, &methods)?;
            let path = args.out.join("fairness.csv");
            write_rows_to_path(&path, &result.rows)?;
            for s in &result.summary {
                let gap = s.structural_gap.map(|g| format!(" structural_gap {g:.2e}")).unwrap_or_default();
                println!("rho {:.2} {:<9} spearman {:.4}{}", s.rho, s.method.name(), s.mean_spearman, gap);
            }
            println!("rows -> {}", path.display());
        }
        Experiment::Stress => {
            let rows = stress_experiment(&config, &STRESS_RESERVE_GRID, &STRESS_MARGIN_GRID, &methods)?;
            let path = args.out.join("stress.csv");
            write_rows_to_path(&path, &rows)?;
            let lowest = STRESS_RESERVE_GRID[0];
            for m in &methods {
                let at_lowest = rows
                    .iter()
                    .find(|r| r.axis == RESERVE_AXIS && r.value == lowest && r.method == m.name())
                    .map(|r| r.success_rate)
                    .unwrap_or(f64::NAN);
                let margin = match sustained_limit(&rows, MARGIN_AXIS, *m, SUSTAIN_THRESHOLD) {
                    Some(v) => v.to_string(),
                    None => "none".into(),
                };
                println!(
                    "{:<9} success at {RESERVE_AXIS}={lowest} {:.4}, sustained {MARGIN_AXIS} up to {}",
                    m.name(),
                    at_lowest,
                    margin
                );
            }
            println!("rows -> {}", path.display());
        }
        Experiment::Propagation => {
            let rows = propagation_experiment(&config, &methods)?;
            let path = args.out.join("propagation.csv");
            write_rows_to_path(&path, &rows)?;
            println!("{} rows -> {}", rows.len(), path.display());
        }
        Experiment::Envelope => {
            let market = match &args.instance {
                Some(p) => load_market(p)?,
                None => Market::new(generate(&config.generator, args.seed)?)?,
            };
            let rows = envelope_experiment(&market, &ENVELOPE_GRID, &config.solver)?;
            let path = args.out.join("envelope.csv");
            write_rows_to_path(&path, &rows)?;
            for r in &rows {
                println!("{:<8} {:>6} analytic {:>14} numeric {:>14}", r.panel, r.x, r.analytic_y, r.numeric_y);
            }
            println!("rows -> {}", path.display());
        }
    }
    Ok(())
}

/// One line joining the error chain, skipping causes a wrapper already quotes.
fn diagnostic(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let text = cause.to_string().replace('\n', "; ");
        if !parts.last().is_some_and(|p| p.ends_with(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate(a) => run_generate(a),
        Command::Solve(a) => run_solve(a),
        Command::Shapley(a) => run_shapley(a),
        Command::Envelope(a) => run_envelope(a),
        Command::Fee(a) => run_fee(a),
        Command::Baseline(a) => run_baseline(a),
        Command::Experiment(a) => run_experiment(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = diagnostic(&err);
            eprintln!("error: {line}");
            if err.is::<NotConverged>() {
                ExitCode::from(EXIT_NOT_CONVERGED)
            } else {
                ExitCode::from(EXIT_INVALID)
            }
        }
    }
}

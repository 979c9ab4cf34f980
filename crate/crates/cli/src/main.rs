//! Command-line surface: model synthesis and ingestion, end-to-end design,
//! evaluation, cluster-count sweeps, impulse traces, scaling benchmarks and
//! the hierarchy replay. Artifacts are JSON and CSV files.

use clap::{Args, Parser, Subcommand};
use ndarray::Array1;
use std::path::PathBuf;
use std::process::ExitCode;

use waci::cplqr::LqrWeights;
use waci::error::Error;
use waci::evalsim::{self, ClosedLoopSystem, RealizationTag};
use waci::fgram::{self, FreqBand, SpectrumMethod};
use waci::inversion::{design_pipeline, DesignOptions, InvertedController};
use waci::sysmodel::{synth_random_model, LinearModel, ModelInputs};
use waci::{cplqr, hiersim, seed};

#[derive(Parser)]
#[command(name = "waci", version, about = "clustering-based wide-area control inversion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or synthesize a model file
    Model {
        #[command(subcommand)]
        action: ModelAction,
    },
    /// Design a clustered controller for a model
    Design(DesignArgs),
    /// Evaluate a controller against the reference design
    Eval(EvalArgs),
    /// Design and evaluate across a range of cluster counts
    Sweep(SweepArgs),
    /// Impulse response of a closed loop
    Impulse(ImpulseArgs),
    /// Wall-clock scaling comparison of the reference and clustered designs
    Bench(BenchArgs),
    /// Replay the two-layer hierarchical implementation
    Hier(HierArgs),
}

#[derive(Subcommand)]
enum ModelAction {
    /// Synthesize a random consensus-stable model
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        n_d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a model from generator parameters and a bus admittance matrix
    Build {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct CommonDesign {
    /// model file
    #[arg(long)]
    model: PathBuf,
    /// band edge of the inter-area range, rad/s
    #[arg(long, default_value_t = 2.0)]
    omega: f64,
    #[arg(long, default_value_t = 4)]
    kappa: usize,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// seed the clustering with plain random rows instead of weighted
    /// distance-squared sampling
    #[arg(long)]
    paper_init: bool,
    /// also compute the exact band Gramian and the exact mismatch xi
    #[arg(long)]
    exact_gramian: bool,
    /// use the shift-invert Arnoldi spectral path
    #[arg(long)]
    spectral: bool,
}

impl CommonDesign {
    fn options(&self, r: usize) -> Result<DesignOptions, Error> {
        let band = FreqBand::new(self.omega)?;
        let mut opts = DesignOptions::new(band, r);
        opts.kappa = self.kappa;
        opts.epsilon = self.epsilon;
        opts.seed = self.seed;
        opts.restarts = self.restarts;
        opts.max_iter = self.max_iter;
        opts.paper_init = self.paper_init;
        opts.exact_gramian = self.exact_gramian;
        opts.method = if self.spectral { SpectrumMethod::ShiftInvert } else { SpectrumMethod::Dense };
        Ok(opts)
    }
}

#[derive(Args)]
struct DesignArgs {
    #[command(flatten)]
    common: CommonDesign,
    /// number of clusters
    #[arg(long)]
    r: usize,
    /// controller output file
    #[arg(long)]
    out: PathBuf,
    /// design report output file
    #[arg(long)]
    report: Option<PathBuf>,
    /// write the Gramian factor and spectrum.csv with this prefix
    #[arg(long)]
    gramian_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonDesign,
    #[arg(long)]
    controller: PathBuf,
    /// starting grid points of the peak-gain estimate
    #[arg(long, default_value_t = 65)]
    grid_points: usize,
    #[arg(long)]
    out: PathBuf,
    /// optionally export the reference Riccati solution
    #[arg(long)]
    reference_out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonDesign,
    /// cluster counts, e.g. "1,2,5" or "1..8" (inclusive)
    #[arg(long)]
    r: String,
    #[arg(long)]
    out: PathBuf,
    /// worker threads (default: logical cores)
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct ImpulseArgs {
    #[command(flatten)]
    common: CommonDesign,
    /// controller file; without it the reference controller is simulated
    #[arg(long)]
    controller: Option<PathBuf>,
    #[arg(long, default_value_t = 20.0)]
    horizon: f64,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    /// disturbance channel, 1-based
    #[arg(long, default_value_t = 1)]
    channel: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// model sizes, ascending, e.g. "50,100,200,400"
    #[arg(long)]
    sizes: String,
    #[arg(long, default_value_t = 11)]
    r: usize,
    #[arg(long, default_value_t = 4)]
    kappa: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    runs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HierArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    controller: PathBuf,
    /// number of random states to replay
    #[arg(long, default_value_t = 100)]
    states: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap help/version go to stdout with success
            if e.use_stderr() {
                emit_error("usage", &e.to_string());
                return ExitCode::from(2);
            }
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = if e.is_usage() { "usage" } else { "numerical" };
            emit_error(kind, &e.to_string());
            ExitCode::from(if e.is_usage() { 2 } else { 3 })
        }
    }
}

fn emit_error(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{line}");
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Model { action } => match action {
            ModelAction::Synth { n, n_d, seed, out } => {
                let model = synth_random_model(n, n_d, seed)?;
                model.save(&out)?;
                print_model_summary(&model)?;
                println!("wrote {}", out.display());
                Ok(())
            }
            ModelAction::Build { params, out } => {
                let text = std::fs::read_to_string(&params)?;
                let inputs: ModelInputs = serde_json::from_str(&text).map_err(|e| {
                    Error::Parameter(format!("{}: {e}", params.display()))
                })?;
                let (model, warnings) = inputs.build()?;
                for w in &warnings {
                    eprintln!("warning: {w}");
                }
                model.save(&out)?;
                print_model_summary(&model)?;
                println!("wrote {}", out.display());
                Ok(())
            }
        },
        Command::Design(args) => {
            let model = LinearModel::load(&args.common.model)?;
            let opts = args.common.options(args.r)?;
            let weights = LqrWeights::angle_consensus_default(&model);
            let out = design_pipeline(&model, &weights, &opts)?;
            out.controller.save(&args.out)?;
            println!(
                "design: r={} xi_kappa={:.6e} consensus_stable={}",
                args.r, out.report.xi_kappa, out.controller.consensus_stable
            );
            if let Some(report_path) = &args.report {
                out.report.save(report_path)?;
            }
            if let Some(prefix) = &args.gramian_out {
                write_gramian(&model, &weights, &opts, prefix)?;
            }
            println!("wrote {}", args.out.display());
            Ok(())
        }
        Command::Eval(args) => {
            let model = LinearModel::load(&args.common.model)?;
            let controller = InvertedController::load(&args.controller)?;
            let r = controller.plan.r();
            let mut opts = args.common.options(r)?;
            opts.epsilon = controller.epsilon;
            opts.exact_gramian = true;
            let weights = LqrWeights::angle_consensus_default(&model);
            // rebuild the pipeline objects around the stored plan
            let mut outcome = design_pipeline(&model, &weights, &opts)?;
            outcome.controller = controller;
            evalsim::evaluate_design(
                &model,
                &weights,
                &mut outcome,
                opts.band,
                args.grid_points,
                None,
            )?;
            outcome.report.save(&args.out)?;
            if let Some(err) = outcome.report.matching_error {
                println!("matching error: {err:.6e}");
            } else {
                println!("matching error: undefined (candidate not consensus stable)");
            }
            if let Some(path) = &args.reference_out {
                let reference = outcome
                    .reference
                    .clone()
                    .expect("dense path retains the reference")
                    .with_closed_loop(model.a(), model.b())?;
                std::fs::write(path, serde_json::to_string_pretty(&reference)?)?;
            }
            println!("wrote {}", args.out.display());
            Ok(())
        }
        Command::Sweep(args) => {
            let model = LinearModel::load(&args.common.model)?;
            let r_list = parse_r_list(&args.r, model.n)?;
            let base = args.common.options(r_list[0])?;
            let weights = LqrWeights::angle_consensus_default(&model);
            let rows = with_pool(args.jobs, || evalsim::sweep_r(&model, &weights, &base, &r_list))?;
            std::fs::write(&args.out, evalsim::sweep_csv(&rows))?;
            println!("wrote {} ({} rows)", args.out.display(), rows.len());
            Ok(())
        }
        Command::Impulse(args) => {
            let model = LinearModel::load(&args.common.model)?;
            let weights = LqrWeights::angle_consensus_default(&model);
            let k = match &args.controller {
                Some(path) => InvertedController::load(path)?.k_hat,
                None => {
                    cplqr::solve_cplqr(model.a(), model.b(), &weights, args.common.epsilon)?.k
                }
            };
            if args.channel == 0 || args.channel > model.n_d {
                return Err(Error::Parameter(format!(
                    "channel must be in 1..={}",
                    model.n_d
                )));
            }
            let a_cl = model.a() - &model.b().dot(&k);
            let sys = ClosedLoopSystem {
                a_cl,
                b_d: model.b_d.clone(),
                c: model.c().clone(),
                tag: RealizationTag::Candidate,
            };
            let resp = evalsim::simulate_impulse(&sys, args.horizon, args.dt, args.channel - 1)?;
            if resp.unstable {
                eprintln!("warning: closed loop is unstable; trajectory will diverge");
            }
            if resp.dt_warning {
                eprintln!("warning: dt is coarse for the fastest closed-loop mode");
            }
            std::fs::write(&args.out, evalsim::impulse_csv(&resp))?;
            println!("wrote {}", args.out.display());
            Ok(())
        }
        Command::Bench(args) => {
            let sizes: Vec<usize> = args
                .sizes
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|e| Error::Parameter(format!("bad sizes list: {e}")))?;
            let outcome = evalsim::bench_scaling(&sizes, args.r, args.kappa, args.seed, args.runs)?;
            std::fs::write(&args.out, evalsim::bench_csv(&outcome))?;
            for row in &outcome.rows {
                println!(
                    "n={}: reference {:.1} ms, clustered design {:.1} ms (ratio {:.3})",
                    row.n,
                    row.t_ref_ms,
                    row.t_hat_total_ms,
                    row.t_hat_total_ms / row.t_ref_ms
                );
            }
            println!(
                "log-log slopes: reference {:.2}, clustered design {:.2}",
                outcome.slope_ref, outcome.slope_hat
            );
            println!("wrote {}", args.out.display());
            Ok(())
        }
        Command::Hier(args) => {
            let model = LinearModel::load(&args.model)?;
            let controller = InvertedController::load(&args.controller)?;
            let weights = LqrWeights::angle_consensus_default(&model);
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed::child_seed(
                args.seed, "hier", 0,
            ));
            let mut max_dev: f64 = 0.0;
            let mut log_counts = (0usize, 0usize, 0usize);
            for _ in 0..args.states.max(1) {
                let xbar = Array1::from_shape_fn(4 * model.n, |_| rng.gen_range(-1.0..1.0));
                let (u, log) = hiersim::run_hierarchy(
                    &controller.plan,
                    &controller.x_tilde,
                    model.b(),
                    &weights.r,
                    &xbar,
                )?;
                let centralized = -controller.k_hat.dot(&xbar);
                let dev = (&u - &centralized).iter().map(|x| x.abs()).fold(0.0, f64::max);
                let scale = centralized.iter().map(|x| x.abs()).fold(1e-300, f64::max);
                max_dev = max_dev.max(dev / scale);
                log_counts = (
                    log.count(hiersim::Phase::Average),
                    log.count(hiersim::Phase::Exchange),
                    log.count(hiersim::Phase::Broadcast),
                );
            }
            let (links_h, links_d) = hiersim::link_budget(model.n, controller.plan.r())?;
            let report = serde_json::json!({
                "links_hierarchical": links_h,
                "links_dense": links_d,
                "messages": {
                    "avg": log_counts.0,
                    "exchange": log_counts.1,
                    "broadcast": log_counts.2,
                },
                "states_replayed": args.states,
                "max_relative_deviation": max_dev,
            });
            std::fs::write(&args.out, serde_json::to_string_pretty(&report)?)?;
            println!("max relative deviation from centralized: {max_dev:.3e}");
            println!("wrote {}", args.out.display());
            Ok(())
        }
    }
}

fn print_model_summary(model: &LinearModel) -> Result<(), Error> {
    let report = waci::sysmodel::consensus_spectrum_report(model.a())?;
    println!(
        "model: n={} n_d={} zero_modes={} max_re_rest={:.3e} consensus_stable={}",
        model.n, model.n_d, report.zero_count, report.max_re_rest, report.is_consensus_stable
    );
    Ok(())
}

fn write_gramian(
    model: &LinearModel,
    weights: &LqrWeights,
    opts: &DesignOptions,
    prefix: &std::path::Path,
) -> Result<(), Error> {
    let pair = cplqr::consensus_pair(model.a())?;
    let a_eps = cplqr::shift_consensus(model.a(), &pair, opts.epsilon)?;
    let r_inv_bt = waci::linalg::solve_multi(&weights.r, &model.b().t().to_owned())?;
    let g = model.b().dot(&r_inv_bt);
    let spectrum = fgram::hamiltonian_spectrum(&a_eps, &g, &weights.q, opts.kappa, opts.method)?;
    let gram = fgram::lowrank_gramian(&spectrum, &model.b_d, opts.band, opts.kappa)?;
    let factor_json = serde_json::json!({
        "rows": gram.factor.nrows(),
        "cols": gram.factor.ncols(),
        "kappa": gram.kappa,
        "kappa_eff": gram.kappa_eff,
        "eta_pinv": gram.eta_pinv,
        "eta_exact": gram.eta_exact,
        "bound": gram.bound,
        "factor_row_major": gram.factor.iter().cloned().collect::<Vec<f64>>(),
    });
    let json_path = prefix.with_extension("json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&factor_json)?)?;
    let csv_path = prefix.with_extension("csv");
    std::fs::write(&csv_path, fgram::spectrum_csv(&spectrum, opts.band))?;
    println!("wrote {} and {}", json_path.display(), csv_path.display());
    Ok(())
}

fn parse_r_list(expr: &str, n: usize) -> Result<Vec<usize>, Error> {
    let expr = expr.trim();
    let parse_one = |s: &str| -> Result<usize, Error> {
        if s.eq_ignore_ascii_case("n") {
            return Ok(n);
        }
        s.trim()
            .parse::<usize>()
            .map_err(|e| Error::Parameter(format!("bad cluster count '{s}': {e}")))
    };
    let list: Vec<usize> = if let Some((lo, hi)) = expr.split_once("..") {
        let lo = parse_one(lo)?;
        let hi = parse_one(hi)?;
        if lo > hi {
            return Err(Error::Parameter(format!("empty range {lo}..{hi}")));
        }
        (lo..=hi).collect()
    } else {
        expr.split(',').map(parse_one).collect::<Result<_, _>>()?
    };
    if list.is_empty() {
        return Err(Error::Parameter("no cluster counts given".into()));
    }
    for &r in &list {
        if r == 0 || r > n {
            return Err(Error::Parameter(format!("cluster count {r} out of range 1..={n}")));
        }
    }
    Ok(list)
}

fn with_pool<T>(
    jobs: Option<usize>,
    f: impl FnOnce() -> Result<T, Error> + Send,
) -> Result<T, Error>
where
    T: Send,
{
    match jobs {
        None => f(),
        Some(threads) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads.max(1))
                .build()
                .map_err(|e| Error::Parameter(format!("worker pool: {e}")))?;
            pool.install(f)
        }
    }
}

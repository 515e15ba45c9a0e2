//! Command-line front end: model build, reference design, gain synthesis,
//! certification, simulation and analysis, individually or as one pipeline.
//!
//! Exit codes: 0 success, 1 acceptance-check failure (or runtime error),
//! 2 infeasible synthesis/certification, 3 invalid configuration or input
//! file.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use mmc_core::analysis::{write_report, ReportInputs, ReportSummary};
use mmc_core::bundle::{
    read_controller_bundle, read_matrix_bundle, read_trace_csv, write_atomic,
    write_certificate_bundle, write_controller_bundle, write_trace_csv,
};
use mmc_core::certify::{certify_phase, CertificationResult, SchedulingBox};
use mmc_core::error::{Error, Result};
use mmc_core::model::{build_linear_model, ExogenousState, LinearModel, Mat4, Vec6};
use mmc_core::refgen::{build_output_map, solve_sigma_reference, SigmaReference};
use mmc_core::sim::{run_closed_loop, ClosedLoopSetup, ScenarioKind, SimConfig, SimTrace};
use mmc_core::synthesis::{
    build_box_polytopes, solve_regulator_equations, synthesize, verify_controller, Controller,
    ErrorPolytopes, SylvesterSolution, VerificationReport,
};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "mmc",
    version,
    about = "Constrained multivariable current control toolkit for modular multilevel converters"
)]
struct Cli {
    /// Print progress information to stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the feedback gain and write the controller bundle.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's output.dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Certify converter stability over the insertion-index box.
    Certify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the configured closed-loop scenario and write the trace CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Controller bundle (defaults to <out>/controller.bundle).
        #[arg(long)]
        controller: Option<PathBuf>,
    },
    /// Evaluate steady-state metrics of a recorded trace.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Trace CSV (defaults to <out>/trace_bilinear.csv).
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Controller bundle (defaults to <out>/controller.bundle).
        #[arg(long)]
        controller: Option<PathBuf>,
        /// Emit SVG plots.
        #[arg(long)]
        plots: bool,
    },
    /// Full pipeline: synth, certify, both simulations, report.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        plots: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(&cli) {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("mmc: one or more acceptance checks failed");
            1
        }
        Err(e) => {
            eprintln!("mmc: {e}");
            match e {
                Error::InvalidParameter(_) | Error::Parse(_) => 3,
                Error::Infeasible(_) => 2,
                _ => 1,
            }
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Synth { config, out } => {
            let cfg = RunConfig::load(config)?;
            let out = resolve_out(&cfg, out);
            cmd_synth(&cfg, &out, cli.verbose).map(|_| true)
        }
        Command::Certify { config, out } => {
            let cfg = RunConfig::load(config)?;
            let out = resolve_out(&cfg, out);
            cmd_certify(&cfg, &out, cli.verbose).map(|_| true)
        }
        Command::Simulate {
            config,
            out,
            controller,
        } => {
            let cfg = RunConfig::load(config)?;
            let out = resolve_out(&cfg, out);
            cmd_simulate(&cfg, &out, controller.as_deref(), cli.verbose).map(|_| true)
        }
        Command::Analyze {
            config,
            out,
            trace,
            controller,
            plots,
        } => {
            let cfg = RunConfig::load(config)?;
            let out = resolve_out(&cfg, out);
            let summary = cmd_analyze(
                &cfg,
                &out,
                trace.as_deref(),
                controller.as_deref(),
                *plots,
                cli.verbose,
            )?;
            Ok(summary.all_pass)
        }
        Command::Pipeline { config, out, plots } => {
            let cfg = RunConfig::load(config)?;
            let out = resolve_out(&cfg, out);
            cmd_pipeline(&cfg, &out, *plots, cli.verbose)
        }
    }
}

fn resolve_out(cfg: &RunConfig, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone().unwrap_or_else(|| cfg.output_dir.clone())
}

/// Reference solve, output map, model matrices, regulator pair and the error
/// polytopes: everything downstream commands share.
struct Problem {
    sigma: SigmaReference,
    model: LinearModel,
    sylvester: SylvesterSolution,
    polytopes: ErrorPolytopes,
}

fn build_problem(cfg: &RunConfig, verbose: bool) -> Result<Problem> {
    if verbose {
        eprintln!("solving common-mode reference...");
    }
    let sigma = solve_sigma_reference(&cfg.circuit, &cfg.ports)?;
    let map = build_output_map(&cfg.ports, &sigma)?;
    let model = build_linear_model(&cfg.circuit, &cfg.ports, &map.matrix())?;
    let sylvester = solve_regulator_equations(&model)?;
    let state_nominal = cfg.ports.grid_peak_current
        + cfg
            .ports
            .output_peak_current
            .unwrap_or_else(|| sigma.amplitude());
    let polytopes = build_box_polytopes(
        cfg.state_fraction,
        cfg.input_fraction,
        state_nominal,
        cfg.ports.voltage_scale(),
    )?;
    if verbose {
        eprintln!(
            "reference amplitude {:.4} A, regulator residuals ({:.2e}, {:.2e})",
            sigma.amplitude(),
            sylvester.residual_dynamics,
            sylvester.residual_output
        );
    }
    Ok(Problem {
        sigma,
        model,
        sylvester,
        polytopes,
    })
}

fn verification_text(v: &VerificationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "mmc-verification v1");
    let _ = writeln!(out, "spectral_radius = {}", v.spectral_radius);
    let _ = writeln!(out, "contraction_margin = {}", v.contraction_margin);
    let _ = writeln!(out, "max_state_quadratic = {}", v.max_state_quadratic);
    let _ = writeln!(out, "max_input_quadratic = {}", v.max_input_quadratic);
    let _ = writeln!(out, "pass = {}", v.pass);
    out
}

fn cmd_synth(cfg: &RunConfig, out: &Path, verbose: bool) -> Result<VerificationReport> {
    let problem = build_problem(cfg, verbose)?;
    if verbose {
        eprintln!("synthesizing feedback gain...");
    }
    let controller = synthesize(&problem.model, &problem.polytopes, &cfg.synthesis)?;
    let report = verify_controller(&problem.model, &controller, &problem.polytopes)?;
    if !report.pass {
        return Err(Error::Infeasible(format!(
            "synthesized controller failed verification: {report:?}"
        )));
    }
    write_controller_bundle(
        &out.join("controller.bundle"),
        &controller,
        &problem.sylvester,
    )?;
    write_atomic(
        &out.join("verification.txt"),
        verification_text(&report).as_bytes(),
    )?;
    mmc_core::bundle::write_model_csv(&out.join("model"), &problem.model)?;
    println!(
        "controller written to {}; spectral radius {:.6}, contraction margin {:.3e}",
        out.join("controller.bundle").display(),
        report.spectral_radius,
        report.contraction_margin
    );
    Ok(report)
}

fn cmd_certify(cfg: &RunConfig, out: &Path, verbose: bool) -> Result<CertificationResult> {
    let bounds = SchedulingBox::new(cfg.eta_low, cfg.eta_high)?;
    if verbose {
        eprintln!(
            "certifying insertion-index box [{}, {}]...",
            cfg.eta_low, cfg.eta_high
        );
    }
    let result = certify_phase(&cfg.circuit, &bounds, cfg.certification_margin)?;
    write_certificate_bundle(
        &out.join("certificate.bundle"),
        &result.q_phase,
        cfg.eta_low,
        cfg.eta_high,
        &result.vertex_margins,
        result.margin_used,
        result.feasible,
    )?;
    for ((eu, el), margin) in &result.vertex_margins {
        println!("vertex ({eu:+.3}, {el:+.3}): margin {margin:+.6e}");
    }
    if !result.feasible {
        let detail = result
            .worst_vertex
            .as_ref()
            .map(|((eu, el), _)| format!("most violated vertex ({eu:+.3}, {el:+.3})"))
            .unwrap_or_default();
        return Err(Error::Infeasible(format!(
            "no common quadratic certificate on [{}, {}]; {detail}",
            cfg.eta_low, cfg.eta_high
        )));
    }
    println!(
        "certificate written to {}",
        out.join("certificate.bundle").display()
    );
    Ok(result)
}

fn deviation_form_from(out: &Path) -> Option<Mat4> {
    let path = out.join("certificate.bundle");
    let sections = read_matrix_bundle(&path).ok()?;
    let q = sections.get("Q_phase")?;
    (q.nrows() == 4 && q.ncols() == 4).then(|| Mat4::from_fn(|i, j| q[(i, j)]))
}

fn load_controller(out: &Path, flag: Option<&Path>) -> Result<(Controller, SylvesterSolution)> {
    let path = flag
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("controller.bundle"));
    read_controller_bundle(&path)
}

fn trace_name(scenario: ScenarioKind) -> &'static str {
    match scenario {
        ScenarioKind::Linear => "trace_linear.csv",
        ScenarioKind::Bilinear => "trace_bilinear.csv",
    }
}

fn cmd_simulate(
    cfg: &RunConfig,
    out: &Path,
    controller_path: Option<&Path>,
    verbose: bool,
) -> Result<SimTrace> {
    let problem = build_problem(cfg, verbose)?;
    let (controller, bundled_sylvester) = load_controller(out, controller_path)?;
    // prefer the freshly solved regulator pair; the bundle carries it only
    // for standalone use
    let _ = bundled_sylvester;
    let setup = ClosedLoopSetup {
        params: cfg.circuit,
        spec: cfg.ports,
        model: problem.model,
        controller,
        sylvester: problem.sylvester,
        deviation_form: deviation_form_from(out),
    };
    if verbose {
        eprintln!("running {} steps...", cfg.simulation.steps);
    }
    let trace = run_closed_loop(&setup, &cfg.simulation)?;
    let path = out.join(trace_name(cfg.simulation.scenario));
    write_trace_csv(&path, &trace)?;
    println!(
        "trace written to {} ({} recorded steps, {} saturated)",
        path.display(),
        trace.time.len(),
        trace.summary.saturated_steps
    );
    Ok(trace)
}

fn cmd_analyze(
    cfg: &RunConfig,
    out: &Path,
    trace_path: Option<&Path>,
    controller_path: Option<&Path>,
    plots: bool,
    verbose: bool,
) -> Result<ReportSummary> {
    let problem = build_problem(cfg, verbose)?;
    let (controller, _) = load_controller(out, controller_path)?;
    let verification = verify_controller(&problem.model, &controller, &problem.polytopes)?;
    let path = trace_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("trace_bilinear.csv"));
    let trace = read_trace_csv(&path)?;
    let certification = read_matrix_bundle(&out.join("certificate.bundle"))
        .ok()
        .and_then(|sections| {
            let feasible = sections.get("feasible").map(|m| m[(0, 0)] != 0.0)?;
            let worst = sections.get("vertex_margins").map(|m| {
                (0..m.nrows())
                    .map(|i| m[(i, 2)])
                    .fold(f64::INFINITY, f64::min)
            })?;
            Some((feasible, worst))
        });
    let inputs = ReportInputs {
        trace: &trace,
        spec: &cfg.ports,
        sigma: &problem.sigma,
        verification: &verification,
        certification,
        transient_periods: cfg.transient_discard_periods,
        plots,
        extra_checks: Vec::new(),
    };
    let summary = write_report(&out.join("report"), &inputs)?;
    print!("{}", summary.summary_text);
    Ok(summary)
}

fn cmd_pipeline(cfg: &RunConfig, out: &Path, plots: bool, verbose: bool) -> Result<bool> {
    let verification = cmd_synth(cfg, out, verbose)?;
    let certification = cmd_certify(cfg, out, verbose)?;
    let problem = build_problem(cfg, false)?;
    let (controller, _) = load_controller(out, None)?;

    let setup = ClosedLoopSetup {
        params: cfg.circuit,
        spec: cfg.ports,
        model: problem.model.clone(),
        controller: controller.clone(),
        sylvester: problem.sylvester.clone(),
        deviation_form: Some(certification.q_phase),
    };

    // Linear scenario from the exact steady state: the tracking error must
    // stay at rounding level.
    if verbose {
        eprintln!("running linear scenario (steady start)...");
    }
    let w0 = ExogenousState::from_port_spec(&cfg.ports, cfg.simulation.initial_exogenous_phase).0;
    let linear_cfg = SimConfig {
        scenario: ScenarioKind::Linear,
        steps: cfg.simulation.steps,
        initial_reduced_state: Some(problem.sylvester.pi * w0),
        initial_full_state: None,
        initial_exogenous_phase: cfg.simulation.initial_exogenous_phase,
        total_arm_voltage_init: None,
        record_stride: cfg.simulation.record_stride,
    };
    let linear_trace = run_closed_loop(&setup, &linear_cfg)?;
    write_trace_csv(&out.join(trace_name(ScenarioKind::Linear)), &linear_trace)?;
    let zero_error_ok = linear_trace.summary.max_tracking_error_norm
        <= 1e-9 * linear_trace.summary.max_reference_norm;

    // Linear scenario from the level-set boundary: containment must hold at
    // every step.
    let e0 = boundary_error(&controller.p, &(problem.sylvester.pi * w0));
    let boundary_cfg = SimConfig {
        initial_reduced_state: Some(problem.sylvester.pi * w0 + e0),
        ..linear_cfg.clone()
    };
    let boundary_trace = run_closed_loop(&setup, &boundary_cfg)?;
    let containment_ok = boundary_trace.summary.max_levelset <= 1.0 + 1e-9;

    // Bilinear scenario with the certified deviation form.
    if verbose {
        eprintln!(
            "running bilinear scenario ({} steps)...",
            cfg.simulation.steps
        );
    }
    let bilinear_cfg = SimConfig {
        scenario: ScenarioKind::Bilinear,
        steps: cfg.simulation.steps,
        initial_reduced_state: None,
        initial_full_state: cfg.simulation.initial_full_state,
        initial_exogenous_phase: cfg.simulation.initial_exogenous_phase,
        total_arm_voltage_init: cfg.simulation.total_arm_voltage_init,
        record_stride: 1,
    };
    let bilinear_trace = run_closed_loop(&setup, &bilinear_cfg)?;
    write_trace_csv(
        &out.join(trace_name(ScenarioKind::Bilinear)),
        &bilinear_trace,
    )?;

    let worst_vertex_margin = certification
        .vertex_margins
        .iter()
        .map(|&(_, m)| m)
        .fold(f64::INFINITY, f64::min);
    let inputs = ReportInputs {
        trace: &bilinear_trace,
        spec: &cfg.ports,
        sigma: &problem.sigma,
        verification: &verification,
        certification: Some((certification.feasible, worst_vertex_margin)),
        transient_periods: cfg.transient_discard_periods,
        plots,
        extra_checks: vec![
            ("linear_zero_error_tracking".to_string(), zero_error_ok),
            ("linear_levelset_containment".to_string(), containment_ok),
        ],
    };
    let summary = write_report(&out.join("report"), &inputs)?;
    print!("{}", summary.summary_text);
    Ok(summary.all_pass)
}

/// A state-error vector sitting just inside the level-set boundary, aimed
/// against the steady state (or along a fixed diagonal when that is zero).
fn boundary_error(p: &mmc_core::model::Mat6, x_ss: &Vec6) -> Vec6 {
    let dir = if x_ss.norm() > 0.0 {
        -x_ss
    } else {
        Vec6::from_element(1.0)
    };
    let quad = (dir.transpose() * p * dir)[(0, 0)];
    dir / quad.sqrt() * 0.999
}

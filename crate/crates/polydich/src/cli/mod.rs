//! Command-line interface: configuration ingestion, orchestration and
//! report emission.

mod report;

pub use report::{
    emit_pair_ratios, emit_plot_data, fmt_f64, PlotData, PlotSeries, RunConfig, RunOutput,
    RunReport,
};

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::cocycle::{
    adapted_polynomial_norms, Cocycle, NormFamily, OperatorSequence, SystemSpec, TransitionMap,
};
use crate::continuous::{
    continuous_pipeline, ContinuousOptions, ContinuousSystemSpec, EvolutionFamily, ForcingField,
    SemilinearFlow, DEFAULT_STEP,
};
use crate::dichotomy::{
    check_dyadic_equivalence, fit_growth, verify_polynomial_dichotomy, Flavor, NormChoice,
    VerifySettings,
};
use crate::error::{Error, Result};
use crate::linalg;
use crate::linearize::{
    export_atlas, linearize_pipeline, LinearizeOptions, PerturbationFamily, PerturbationSpec,
};
use crate::spectrum::{
    check_gap_band, exponential_spectrum, polynomial_spectrum, SpectralInterval, SpectrumResult,
};

#[derive(Parser, Debug)]
#[command(
    name = "polydich",
    version,
    about = "Dichotomy spectra and smooth linearization for nonautonomous systems"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compute the dichotomy spectrum and the gap/band report.
    Spectrum(AnalysisArgs),
    /// Verify dichotomy conditions and build adapted norms.
    Dichotomy(AnalysisArgs),
    /// Build and verify the linearizing conjugacies.
    Linearize(LinearizeArgs),
    /// Integrate a continuous system, discretize and delegate.
    Continuous(AnalysisArgs),
    /// Run the bundled examples end to end against their fixtures.
    Demo(DemoArgs),
}

#[derive(Args, Debug, Clone)]
pub struct AnalysisArgs {
    /// Path to a system definition (JSON).
    #[arg(long, conflicts_with = "builtin")]
    pub system: Option<PathBuf>,
    /// Name of a bundled system.
    #[arg(long)]
    pub builtin: Option<String>,
    /// Scan window in original time.
    #[arg(long, default_value_t = 1 << 12)]
    pub window: i64,
    /// Resolvent grid step (log units).
    #[arg(long = "grid-step", default_value_t = 1e-3)]
    pub grid_step: f64,
    /// Solver tolerance.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    /// Truncation horizon for adapted-norm suprema.
    #[arg(long, default_value_t = 1 << 12)]
    pub horizon: usize,
    /// Output directory for reports and tables.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for randomized sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output format.
    #[arg(long, default_value = "json", value_parser = ["json", "csv", "both"])]
    pub format: String,
}

#[derive(Args, Debug, Clone)]
pub struct LinearizeArgs {
    #[command(flatten)]
    pub base: AnalysisArgs,
    /// Path to a perturbation definition (JSON); the builtin system bundles
    /// its own when omitted.
    #[arg(long)]
    pub perturbation: Option<PathBuf>,
    /// Sample radius for solver diagnostics and exports.
    #[arg(long = "r-grid", default_value_t = 1.0)]
    pub r_grid: f64,
    /// Iteration cap for the conjugacy solver.
    #[arg(long = "max-iter", default_value_t = 64)]
    pub max_iter: usize,
}

#[derive(Args, Debug, Clone)]
pub struct DemoArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "json", value_parser = ["json", "csv", "both"])]
    pub format: String,
    /// Scan window for the discrete example.
    #[arg(long, default_value_t = 1 << 12)]
    pub window: i64,
    #[arg(long = "grid-step", default_value_t = 1e-3)]
    pub grid_step: f64,
}

fn make_config(cmd: &str, args: &AnalysisArgs, r_grid: f64, max_iter: usize) -> RunConfig {
    let system = match (&args.system, &args.builtin) {
        (Some(p), _) => p.display().to_string(),
        (None, Some(b)) => format!("builtin:{b}"),
        (None, None) => "builtin:example_4_3".to_string(),
    };
    RunConfig {
        command: cmd.to_string(),
        system,
        window: args.window,
        grid_step: args.grid_step,
        tol: args.tol,
        horizon: args.horizon,
        r_grid,
        max_iter,
        seed: args.seed,
        format: args.format.clone(),
        perturbation: None,
    }
}

/// Loads a discrete system: `(cocycle, canonical definition text)`.
fn load_discrete(args: &AnalysisArgs) -> Result<(Cocycle, String)> {
    match (&args.system, &args.builtin) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)?;
            let spec: SystemSpec = serde_json::from_str(&text)?;
            let seq = spec.build()?;
            Ok((Cocycle::new(seq), serde_json::to_string(&spec)?))
        }
        (None, Some(name)) => {
            let seq = match name.as_str() {
                "example_4_3" => OperatorSequence::example_4_3(),
                "continuous_5_3_discretized" => OperatorSequence::continuous_5_3_discretized(),
                other => {
                    return Err(Error::Config(format!(
                        "unknown builtin `{other}`; discrete builtins: example_4_3, continuous_5_3_discretized"
                    )))
                }
            };
            Ok((Cocycle::new(seq), format!("builtin:{name}")))
        }
        (None, None) => Ok((
            Cocycle::new(OperatorSequence::example_4_3()),
            "builtin:example_4_3".to_string(),
        )),
    }
}

fn load_continuous(args: &AnalysisArgs) -> Result<(EvolutionFamily, SemilinearFlow, String)> {
    match (&args.system, &args.builtin) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)?;
            let spec: ContinuousSystemSpec = serde_json::from_str(&text)?;
            let (evo, flow) = spec.build(DEFAULT_STEP)?;
            Ok((evo, flow, serde_json::to_string(&spec)?))
        }
        (None, name) => {
            let name = name.as_deref().unwrap_or("continuous_5_3");
            if name != "continuous_5_3" {
                return Err(Error::Config(format!(
                    "unknown continuous builtin `{name}`; expected continuous_5_3"
                )));
            }
            let evo = EvolutionFamily::new(
                crate::continuous::CoefficientField::example_5_3(),
                DEFAULT_STEP,
            )?;
            let flow = SemilinearFlow::new(evo.clone(), ForcingField::example_5_3(1e-3))?;
            Ok((evo, flow, format!("builtin:{name}")))
        }
    }
}

/// The paper-stated fixtures bundled with the builtin examples.
pub mod fixtures {
    use super::*;

    /// Exact polynomial dichotomy spectrum of the bundled planar example.
    pub fn example_4_3_spectrum() -> SpectrumResult {
        SpectrumResult::from_intervals(
            Flavor::Polynomial,
            vec![SpectralInterval::point(-1.0), SpectralInterval::point(1.0)],
        )
    }

    /// The constants the example satisfies its dichotomy with.
    pub const EXAMPLE_4_3_CONSTANTS: (f64, f64, f64, f64) = (1.0, 1.0, 1.0, 0.0);
}

fn settings_for(seed: u64) -> VerifySettings {
    VerifySettings {
        seed,
        ..VerifySettings::default()
    }
}

/// Spectrum pipeline: growth certificate, spectrum, gap/band.
pub fn run_spectrum(args: &AnalysisArgs) -> Result<RunOutput> {
    let config = make_config("spectrum", args, 1.0, 64);
    config.validate()?;
    let (cocycle, definition) = load_discrete(args)?;
    let started = Instant::now();
    let mut report = RunReport::new(config, &definition);
    let settings = settings_for(args.seed);
    let norms = NormFamily::Euclidean;

    let flavor = if cocycle.lo() == 0 {
        Flavor::Exponential
    } else {
        Flavor::Polynomial
    };
    let growth = fit_growth(flavor, &cocycle, &norms, args.window.min(window_cap(&cocycle)), &settings)?;
    report.record("growth", growth);

    let spectrum = match flavor {
        Flavor::Polynomial => {
            polynomial_spectrum(&cocycle, &norms, args.grid_step, args.window, &settings)?
        }
        Flavor::Exponential => {
            exponential_spectrum(&cocycle, &norms, args.grid_step, args.window, &settings)?
        }
    };
    report.record("spectrum", &spectrum);
    match check_gap_band(&spectrum) {
        Ok(gap) => report.record("gap_band", gap),
        Err(e) => report.record("gap_band", json!({ "error": e.to_string() })),
    }
    report.timing_seconds = started.elapsed().as_secs_f64();
    Ok(RunOutput {
        report,
        plots: PlotData {
            resolvent: Some(spectrum.resolvent_samples.clone()),
            ..PlotData::default()
        },
        fixture_mismatch: None,
    })
}

fn window_cap(cocycle: &Cocycle) -> i64 {
    cocycle.hi().map_or(i64::MAX, |h| h - 1)
}

/// Dichotomy pipeline: both verification routes, adapted norms, re-check.
pub fn run_dichotomy(args: &AnalysisArgs) -> Result<RunOutput> {
    let config = make_config("dichotomy", args, 1.0, 64);
    config.validate()?;
    let (cocycle, definition) = load_discrete(args)?;
    let started = Instant::now();
    let mut report = RunReport::new(config, &definition);
    let settings = settings_for(args.seed);
    let norms = NormFamily::Euclidean;
    let window = args.window.min(window_cap(&cocycle));

    let equivalence = check_dyadic_equivalence(&cocycle, &norms, window, &settings)?;
    report.record("polynomial", equivalence.poly.summary());
    report.record("exponential_blocks", equivalence.exp.summary());
    report.record(
        "dyadic_equivalence",
        json!({
            "verdicts_agree": equivalence.verdicts_agree,
            "lambda_ratio_ok": equivalence.lambda_ratio_ok,
        }),
    );

    let mut plots = PlotData {
        pair_ratios: Some(
            equivalence
                .poly
                .diagnostics
                .pair_ratios
                .iter()
                .map(|r| {
                    (
                        r.m,
                        r.n,
                        r.ratio_stable,
                        r.ratio_unstable,
                        r.ratio_growth_fwd,
                        r.ratio_growth_bwd,
                    )
                })
                .collect(),
        ),
        ..PlotData::default()
    };

    // Adapted norms from the fixed-norm certificate, then the re-check that
    // the dichotomy becomes uniform with small constants.
    if equivalence.poly.accepted() {
        let fixed = verify_polynomial_dichotomy(
            &cocycle,
            &equivalence.poly.projections,
            NormChoice::FixedEuclidean,
            window,
            &settings,
        )?;
        if fixed.accepted() {
            let adapted = adapted_polynomial_norms(&cocycle, &fixed, args.horizon)?;
            let reverified = verify_polynomial_dichotomy(
                &cocycle,
                &fixed.projections,
                NormChoice::Family(&adapted),
                window.min(1 << 10),
                &settings,
            )?;
            let (c_sandwich, delta) = adapted.sandwich().expect("adapted norms carry a sandwich");
            report.record("fixed_norm", fixed.summary());
            report.record(
                "adapted_norms",
                json!({
                    "sandwich_C": c_sandwich,
                    "sandwich_delta": delta,
                    "horizon": args.horizon,
                    "reverified": reverified.summary(),
                }),
            );
            // Norm inflation series for the plots.
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ 0x6e726d73);
            let d = cocycle.dim();
            let vectors: Vec<DVector<f64>> = (0..16)
                .map(|_| linalg::random_unit_vector(d, &mut rng))
                .collect();
            let mut series = Vec::new();
            let mut n = cocycle.lo().max(1);
            while n <= window.min(1 << 12) {
                let mut worst = 0.0f64;
                for v in &vectors {
                    worst = worst.max(adapted.eval(n, v)?);
                }
                series.push((n, worst));
                n *= 2;
            }
            plots.norms = Some(series);
        }
    }

    report.timing_seconds = started.elapsed().as_secs_f64();
    Ok(RunOutput {
        report,
        plots,
        fixture_mismatch: None,
    })
}

fn load_perturbation(path: &Option<PathBuf>, dim: usize) -> Result<(PerturbationFamily, String)> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let spec: PerturbationSpec = serde_json::from_str(&text)?;
            Ok((spec.build(dim)?, serde_json::to_string(&spec)?))
        }
        None => Ok((
            PerturbationFamily::example_4_3(1e-3),
            "builtin:example_4_3_bump(c=1e-3)".to_string(),
        )),
    }
}

/// Linearization pipeline: certify, compress, solve, glue, verify.
pub fn run_linearize(args: &LinearizeArgs) -> Result<RunOutput> {
    let mut config = make_config("linearize", &args.base, args.r_grid, args.max_iter);
    let (cocycle, definition) = load_discrete(&args.base)?;
    let (g, g_def) = load_perturbation(&args.perturbation, cocycle.dim())?;
    config.perturbation = Some(
        args.perturbation
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| g_def.clone()),
    );
    config.validate()?;
    let started = Instant::now();
    let mut report = RunReport::new(config, &format!("{definition}\x00{g_def}"));

    // The block window needs a power-of-two horizon.
    let window = (args.base.window.min(window_cap(&cocycle)) as u64).next_power_of_two() as i64 / 2;
    let window = window.max(8).min(args.base.window);
    let opts = LinearizeOptions {
        window,
        grid_step: args.base.grid_step,
        tol: args.base.tol,
        max_iter: args.max_iter,
        r_grid: args.r_grid,
        seed: args.base.seed,
        verify_radius: 0.1,
        verify_horizon: 64.min(window),
        envelope_samples: 2000,
        settings: settings_for(args.base.seed),
    };
    let out = linearize_pipeline(&cocycle, &g, &NormFamily::Euclidean, &opts)?;

    report.record("polynomial", out.poly_estimate.summary());
    report.record("blocks", out.block_estimate.summary());
    report.record("spectrum", &out.spectrum);
    report.record("gap_band", &out.gap);
    report.record("perturbation_certificate", out.certificate);
    report.record("transport_envelopes", &out.envelope);
    report.record(
        "block_perturbation",
        json!({ "eta_formula": out.eta_formula, "eta_sampled": out.eta_sampled }),
    );
    report.record("solver", &out.atlas.solver);
    report.record("conjugacy", &out.conjugacy);
    if let Some(r) = &out.regularity_c1 {
        report.record("regularity_c1", r);
    }
    if let Some(r) = &out.regularity_holder {
        report.record("regularity_holder", r);
    }
    report.record(
        "atlas",
        export_atlas(&out.atlas, args.r_grid, 9, args.base.seed)?,
    );

    report.timing_seconds = started.elapsed().as_secs_f64();
    Ok(RunOutput {
        report,
        plots: PlotData {
            resolvent: Some(out.spectrum.resolvent_samples.clone()),
            residuals: Some(out.conjugacy.per_time.clone()),
            ..PlotData::default()
        },
        fixture_mismatch: None,
    })
}

/// Continuous pipeline: integrate, discretize, delegate, then H/G checks.
pub fn run_continuous(args: &AnalysisArgs) -> Result<RunOutput> {
    let config = make_config("continuous", args, 1.0, 64);
    config.validate()?;
    let (evo, flow, definition) = load_continuous(args)?;
    let started = Instant::now();
    let mut report = RunReport::new(config, &definition);

    let opts = ContinuousOptions {
        spectrum_window: args.window,
        linearize_window: 1 << 7,
        grid_step: args.grid_step,
        tol: args.tol,
        seed: args.seed,
        verify_radius: 0.1,
        verify_horizon: 64.0,
        envelope_samples: 400,
        settings: settings_for(args.seed),
    };
    let out = continuous_pipeline(&evo, &flow, &NormFamily::Euclidean, &opts)?;

    report.record(
        "integrator",
        json!({ "step": out.integrator_step, "error_estimate": out.integrator_error }),
    );
    report.record("spectrum", &out.spectrum);
    report.record("gap_band", &out.discrete.gap);
    report.record("forcing_certificate", out.forcing_certificate);
    report.record("solver", &out.discrete.atlas.solver);
    report.record("conjugacy", &out.discrete.conjugacy);
    report.record("solution_mapping", &out.solution);
    if let Some(r) = &out.regularity_c1 {
        report.record("regularity_c1", r);
    }
    if let Some(r) = &out.regularity_holder {
        report.record("regularity_holder", r);
    }

    report.timing_seconds = started.elapsed().as_secs_f64();
    Ok(RunOutput {
        report,
        plots: PlotData {
            resolvent: Some(out.spectrum.resolvent_samples.clone()),
            residuals: Some(out.discrete.conjugacy.per_time.clone()),
            ..PlotData::default()
        },
        fixture_mismatch: None,
    })
}

/// Demo: both bundled examples end to end, checked against their fixtures.
pub fn run_demo(args: &DemoArgs) -> Result<RunOutput> {
    let analysis = AnalysisArgs {
        system: None,
        builtin: Some("example_4_3".into()),
        window: args.window,
        grid_step: args.grid_step,
        tol: 1e-8,
        horizon: 1 << 12,
        out: args.out.clone(),
        seed: args.seed,
        format: args.format.clone(),
    };
    let config = make_config("demo", &analysis, 1.0, 64);
    config.validate()?;
    let started = Instant::now();
    let mut report = RunReport::new(config, "builtin:example_4_3+continuous_5_3");
    let mut mismatch: Option<String> = None;
    let note = |m: String, slot: &mut Option<String>| {
        if slot.is_none() {
            *slot = Some(m);
        }
    };

    // Discrete example: spectrum against the paper fixture.
    let lin_args = LinearizeArgs {
        base: analysis.clone(),
        perturbation: None,
        r_grid: 1.0,
        max_iter: 64,
    };
    let lin = run_linearize(&lin_args)?;
    let spectrum: SpectrumResult =
        serde_json::from_value(lin.report.stages["spectrum"].clone()).expect("spectrum stage");
    let fixture = fixtures::example_4_3_spectrum();
    if spectrum.intervals.len() != fixture.intervals.len() {
        note(
            format!(
                "spectrum interval count {} != fixture {}",
                spectrum.intervals.len(),
                fixture.intervals.len()
            ),
            &mut mismatch,
        );
    } else {
        for (got, want) in spectrum.intervals.iter().zip(&fixture.intervals) {
            if (got.center() - want.center()).abs() > args.grid_step
                || got.width() > 2.0 * args.grid_step + 1e-12
            {
                note(
                    format!(
                        "spectrum interval [{}, {}] does not match fixture point {}",
                        got.lo, got.hi, want.lo
                    ),
                    &mut mismatch,
                );
            }
        }
    }
    let gap = check_gap_band(&fixture)?;
    if !(gap.sp1_ok && gap.sp2_ok && gap.sp3_ok) {
        note("fixture gap conditions unexpectedly fail".into(), &mut mismatch);
    }
    if (gap.alpha1_bound.unwrap_or(0.0) - 2.0).abs() > 1e-6 {
        note(
            format!("alpha1 bound {:?} != 2", gap.alpha1_bound),
            &mut mismatch,
        );
    }
    let conjugacy = lin.report.stages["conjugacy"].clone();
    let step_res = conjugacy["max_step_residual"].as_f64().unwrap_or(f64::NAN);
    let orbit_res = conjugacy["max_orbit_residual"].as_f64().unwrap_or(f64::NAN);
    if !(step_res < 1e-6 && orbit_res < 1e-6) {
        note(
            format!("conjugacy residuals too large: step {step_res:e}, orbit {orbit_res:e}"),
            &mut mismatch,
        );
    }
    report.record("example_4_3", lin.report.stages.clone());
    report.record("example_4_3_gap_fixture", gap);

    // Continuous example.
    let cont_args = AnalysisArgs {
        builtin: Some("continuous_5_3".into()),
        window: 1 << 9,
        ..analysis.clone()
    };
    let cont = run_continuous(&cont_args)?;
    let (evo, _, _) = load_continuous(&cont_args)?;
    let t = evo.transition(4.0, 2.0)?;
    if (t[(0, 0)] - 0.5).abs() > 1e-8 || (t[(1, 1)] - 2.0).abs() > 1e-8 {
        note("integrated transport does not match diag(s/t, t/s)".into(), &mut mismatch);
    }
    let sol = cont.report.stages["solution_mapping"].clone();
    let round = sol["max_round_trip"].as_f64().unwrap_or(f64::NAN);
    let dev = sol["max_linearized_deviation"].as_f64().unwrap_or(f64::NAN);
    if !(round < 1e-6 && dev < 1e-6) {
        note(
            format!("continuous mapping residuals too large: round {round:e}, deviation {dev:e}"),
            &mut mismatch,
        );
    }
    report.record("continuous_5_3", cont.report.stages.clone());

    report.timing_seconds = started.elapsed().as_secs_f64();
    if let Some(m) = &mismatch {
        report.record("fixture_mismatch", json!(m));
    }
    Ok(RunOutput {
        report,
        plots: lin.plots,
        fixture_mismatch: mismatch,
    })
}

/// Runs a parsed command.
pub fn run_command(command: &Command) -> Result<RunOutput> {
    match command {
        Command::Spectrum(a) => run_spectrum(a),
        Command::Dichotomy(a) => run_dichotomy(a),
        Command::Linearize(a) => run_linearize(a),
        Command::Continuous(a) => run_continuous(a),
        Command::Demo(a) => run_demo(a),
    }
}

fn out_and_format(command: &Command) -> (Option<PathBuf>, String) {
    match command {
        Command::Spectrum(a) | Command::Dichotomy(a) | Command::Continuous(a) => {
            (a.out.clone(), a.format.clone())
        }
        Command::Linearize(a) => (a.base.out.clone(), a.base.format.clone()),
        Command::Demo(a) => (a.out.clone(), a.format.clone()),
    }
}

/// Writes the requested artifacts into the output directory.
pub fn write_outputs(output: &RunOutput, dir: &Path, format: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if format == "json" || format == "both" {
        let path = dir.join("report.json");
        std::fs::write(&path, serde_json::to_string_pretty(&output.report)?)?;
        written.push(path);
    }
    if format == "csv" || format == "both" {
        if output.plots.resolvent.is_some() {
            written.push(emit_plot_data(output, PlotSeries::Resolvent, &dir.join("resolvent.csv"))?);
        }
        if output.plots.residuals.is_some() {
            written.push(emit_plot_data(output, PlotSeries::Residuals, &dir.join("residuals.csv"))?);
        }
        if output.plots.norms.is_some() {
            written.push(emit_plot_data(output, PlotSeries::Norms, &dir.join("norms.csv"))?);
        }
        if output.plots.pair_ratios.is_some() {
            written.push(emit_pair_ratios(output, &dir.join("pair_ratios.csv"))?);
        }
    }
    Ok(written)
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse(_) | Error::Expr(_) => 2,
        Error::Io(_) => 2,
        _ => 3,
    }
}

/// CLI entry point. Exit codes: 0 success, 2 configuration error, 3 numeric
/// or stage error, 4 fixture mismatch (demo only).
pub fn main() {
    let cli = Cli::parse();
    let (out_dir, format) = out_and_format(&cli.command);
    match run_command(&cli.command) {
        Ok(output) => {
            if let Some(dir) = out_dir {
                if let Err(e) = write_outputs(&output, &dir, &format) {
                    eprintln!("error writing outputs: {e}");
                    std::process::exit(2);
                }
            }
            println!(
                "{}",
                serde_json::to_string_pretty(&output.report).expect("report serializes")
            );
            if let Some(m) = output.fixture_mismatch {
                eprintln!("fixture mismatch: {m}");
                std::process::exit(4);
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code_for(&e));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_args(builtin: &str) -> AnalysisArgs {
        AnalysisArgs {
            system: None,
            builtin: Some(builtin.into()),
            window: 1 << 8,
            grid_step: 5e-3,
            tol: 1e-8,
            horizon: 256,
            out: None,
            seed: 0,
            format: "json".into(),
        }
    }

    #[test]
    fn spectrum_run_reports_two_intervals() {
        let out = run_spectrum(&quick_args("example_4_3")).unwrap();
        let spectrum: SpectrumResult =
            serde_json::from_value(out.report.stages["spectrum"].clone()).unwrap();
        assert_eq!(spectrum.intervals.len(), 2);
        assert!(out.plots.resolvent.is_some());
        assert!(out.report.stages.contains_key("gap_band"));
    }

    #[test]
    fn dichotomy_run_builds_adapted_norms() {
        let out = run_dichotomy(&quick_args("example_4_3")).unwrap();
        assert!(out.report.stages.contains_key("adapted_norms"));
        let norms = out.plots.norms.as_ref().unwrap();
        // The example's adapted norm inflates vectors by at most C = 4.
        assert!(norms.iter().all(|(_, c)| *c >= 1.0 - 1e-12 && *c <= 4.0 + 1e-9));
        assert!(out.plots.pair_ratios.is_some());
    }

    #[test]
    fn determinism_same_config_same_payload() {
        let a = run_spectrum(&quick_args("example_4_3")).unwrap();
        let b = run_spectrum(&quick_args("example_4_3")).unwrap();
        assert_eq!(a.report.input_hash, b.report.input_hash);
        assert_eq!(
            serde_json::to_string(&a.report.stages).unwrap(),
            serde_json::to_string(&b.report.stages).unwrap()
        );
        let tmp = std::env::temp_dir().join("polydich_det_test");
        std::fs::create_dir_all(&tmp).unwrap();
        let p1 = tmp.join("r1.csv");
        let p2 = tmp.join("r2.csv");
        emit_plot_data(&a, PlotSeries::Resolvent, &p1).unwrap();
        emit_plot_data(&b, PlotSeries::Resolvent, &p2).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap(),
            "CSV outputs must be byte-identical"
        );
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        let tmp = std::env::temp_dir().join("polydich_bad_system.json");
        std::fs::write(&tmp, "{ \"name\": \"x\", ").unwrap();
        let mut args = quick_args("example_4_3");
        args.system = Some(tmp);
        args.builtin = None;
        let err = run_spectrum(&args).unwrap_err();
        assert_eq!(exit_code_for(&err), 2);
        let msg = err.to_string();
        assert!(msg.contains("line"), "parse error should carry position: {msg}");
    }
}

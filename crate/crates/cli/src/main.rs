//! `precond`: analyze a network spec, plan its initialization, and check
//! the plan by simulation.
//!
//! Exit codes: 0 success or pass, 1 input error, 2 verification failure,
//! 3 network not preconditioned.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use relu_precond::graph::{infer_shapes, is_clean, lint_scaling, parse_document, Diagnostic, NetworkGraph, Severity};
use relu_precond::initplan::{plan, Distribution, InitPlan, PlanOptions, Recipe, Scheme, DEFAULT_TARGET_STD};
use relu_precond::scaling::{analyze, preconditioned_check, RecordKind, ScalingReport, DEFAULT_REL_TOL};
use relu_precond::verify::{calibrate_output_norm, compare, run_verification, CompareOptions, EstimationConfig, Model, ProbeMode, VerifyReport};

const EXIT_INPUT: u8 = 1;
const EXIT_VERIFY_FAILED: u8 = 2;
const EXIT_NOT_PRECONDITIONED: u8 = 3;

#[derive(Parser)]
#[command(name = "precond", version, about = "Second-moment scaling analysis and initialization planning for ReLU networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print per-layer scaling factors and whether the network is preconditioned.
    Analyze(AnalyzeArgs),
    /// Compute an initialization plan and write it as JSON.
    Plan(PlanArgs),
    /// Sample the planned network and compare measured ratios with the analysis.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    FanIn,
    FanOut,
    /// Arithmetic mean of fan-in and fan-out.
    Xavier,
    Geometric,
}

#[derive(Clone, Copy, ValueEnum)]
enum RecipeArg {
    Balanced,
    Printed,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistributionArg {
    Gaussian,
    Uniform,
}

/// `auto` or a positive number.
#[derive(Clone, Copy, Debug)]
struct CArg(Option<f64>);

fn parse_c(s: &str) -> Result<CArg, String> {
    if s == "auto" {
        return Ok(CArg(None));
    }
    match s.parse::<f64>() {
        Ok(c) if c.is_finite() && c > 0.0 => Ok(CArg(Some(c))),
        _ => Err(format!("expected 'auto' or a positive number, got '{s}'")),
    }
}

fn scheme(arg: SchemeArg, c: CArg) -> Scheme {
    match arg {
        SchemeArg::FanIn => Scheme::FanIn,
        SchemeArg::FanOut => Scheme::FanOut,
        SchemeArg::Xavier => Scheme::Arithmetic,
        SchemeArg::Geometric => Scheme::Geometric { c: c.0 },
    }
}

#[derive(clap::Args)]
struct AnalyzeArgs {
    /// Network spec (with `m2` on every weighted op) or a plan file.
    spec: PathBuf,
    /// Initialize a spec without `m2` with this scheme first.
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
    #[arg(long, value_parser = parse_c, default_value = "auto")]
    c: CArg,
    #[arg(long)]
    json: bool,
}

#[derive(clap::Args)]
struct PlanArgs {
    spec: PathBuf,
    #[arg(long, value_enum, default_value = "geometric")]
    scheme: SchemeArg,
    /// Geometric numerator; `auto` is 2/k for the most common kernel size k.
    #[arg(long, value_parser = parse_c, default_value = "auto")]
    c: CArg,
    /// Output standard deviation, between 0.01 and 0.1.
    #[arg(long, default_value_t = DEFAULT_TARGET_STD)]
    target_std: f64,
    #[arg(long)]
    no_input_scale: bool,
    #[arg(long)]
    no_output_norm: bool,
    /// How bottleneck residual blocks are rewritten.
    #[arg(long, value_enum, default_value = "balanced")]
    recipe: RecipeArg,
    #[arg(long, value_enum, default_value = "gaussian")]
    distribution: DistributionArg,
    /// Calibrate the output scalar on one simulated batch instead of analytically.
    #[arg(long)]
    empirical_norm: bool,
    /// Batch size for `--empirical-norm`.
    #[arg(long, default_value_t = 1024)]
    batch: usize,
    /// Seed for `--empirical-norm`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the plan here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the plan JSON instead of a summary.
    #[arg(long)]
    json: bool,
}

#[derive(clap::Args)]
struct VerifyArgs {
    spec: PathBuf,
    plan: PathBuf,
    #[arg(long, default_value_t = 1024)]
    batch: usize,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long)]
    seed: u64,
    /// A ratio passes inside [1/tol, tol].
    #[arg(long, default_value_t = 2.0)]
    tol: f64,
    /// Fraction of layers that must pass.
    #[arg(long, default_value_t = 0.9)]
    min_fraction: f64,
    /// Gaussian probes per sample; 0 probes every coordinate exactly.
    #[arg(long, default_value_t = 1)]
    probes: usize,
    /// Write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

/// A plan file as written by `plan`.
struct PlanFile {
    source: NetworkGraph,
    network: NetworkGraph,
    weights: Vec<f64>,
    distribution: Distribution,
}

enum Input {
    Spec { graph: NetworkGraph, weights: Option<Vec<f64>> },
    Plan(PlanFile),
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn sub_document(root: &Value, key: &str, path: &Path) -> Result<relu_precond::graph::SpecDocument> {
    let v = root.get(key).ok_or_else(|| anyhow!("{}: plan has no '{key}'", path.display()))?;
    parse_document(&v.to_string()).with_context(|| format!("{}: in '{key}'", path.display()))
}

fn load(path: &Path) -> Result<Input> {
    let text = read(path)?;
    let is_plan = serde_json::from_str::<Value>(&text).ok().is_some_and(|v| v.get("network").is_some());
    if !is_plan {
        let doc = parse_document(&text).with_context(|| format!("{}", path.display()))?;
        return Ok(Input::Spec { graph: infer_shapes(&doc.graph)?, weights: doc.weight_m2 });
    }
    let root: Value = serde_json::from_str(&text)?;
    let network = sub_document(&root, "network", path)?;
    let source = sub_document(&root, "source", path)?;
    let weights = network.weight_m2.ok_or_else(|| anyhow!("{}: plan network has no 'm2' values", path.display()))?;
    let distribution = match root.pointer("/layers/0/distribution").and_then(Value::as_str) {
        None | Some("gaussian") => Distribution::Gaussian,
        Some("uniform") => Distribution::Uniform,
        Some(other) => bail!("{}: unknown distribution '{other}'", path.display()),
    };
    Ok(Input::Plan(PlanFile {
        source: infer_shapes(&source.graph)?,
        network: infer_shapes(&network.graph)?,
        weights,
        distribution,
    }))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.6e}"))
}

fn print_diagnostics(diagnostics: &[Diagnostic]) {
    for d in diagnostics {
        println!("{d}");
    }
}

fn print_report(report: &ScalingReport) {
    println!("{:>3}  {:<7} {:<14} {:>13} {:>13} {:>13}", "#", "kind", "position", "sigma", "gamma", "gamma(in-res)");
    for r in &report.records {
        let kind = match r.kind {
            RecordKind::Conv => "conv",
            RecordKind::Linear => "linear",
            RecordKind::Bias => "bias",
            RecordKind::Scalar => "scalar",
        };
        println!(
            "{:>3}  {:<7} {:<14} {:>13.6e} {:>13.6e} {:>13}",
            r.index,
            kind,
            r.path,
            r.sigma,
            r.value(),
            fmt_opt(r.gamma_extrinsic_input_res)
        );
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<u8> {
    let (graph, weights) = match load(&args.spec)? {
        Input::Plan(p) => (p.network, p.weights),
        Input::Spec { graph, weights: Some(w) } => (graph, w),
        Input::Spec { graph, weights: None } => {
            let Some(s) = args.scheme else {
                bail!("{} has no 'm2' values; pass --scheme to initialize it", args.spec.display());
            };
            let p = plan(&graph, scheme(s, args.c), &PlanOptions::default())?;
            (p.network, p.weights)
        }
    };
    let diagnostics = lint_scaling(&graph)?;
    let (_, report) = analyze(&graph, &weights, 1.0, 1.0)?;
    let verdict = preconditioned_check(&report, DEFAULT_REL_TOL)?;
    if args.json {
        let out = json!({
            "diagnostics": diagnostics,
            "clean": is_clean(&diagnostics),
            "report": report,
            "verdict": verdict,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        print_diagnostics(&diagnostics);
        print_report(&report);
        let bias = verdict.bias_ratio.map_or_else(String::new, |r| format!(", bias gamma max/min {r:.6}"));
        let word = if verdict.preconditioned { "preconditioned" } else { "not preconditioned" };
        println!("verdict: {word} (gamma max/min {:.6}{bias})", verdict.weight_ratio);
    }
    if diagnostics.iter().any(|d| d.severity == Severity::Error) {
        return Ok(EXIT_INPUT);
    }
    Ok(if verdict.preconditioned { 0 } else { EXIT_NOT_PRECONDITIONED })
}

fn print_plan(p: &InitPlan) {
    match p.c() {
        Some(c) => println!("scheme: {} (c = {c})", p.scheme),
        None => println!("scheme: {}", p.scheme),
    }
    println!("{:>3}  {:<7} {:<14} {:>6} {:>6} {:>3} {:>13} {:>11}", "#", "kind", "position", "fan-in", "out", "k", "E[W^2]", "std");
    for l in &p.layers {
        println!(
            "{:>3}  {:<7} {:<14} {:>6} {:>6} {:>3} {:>13.6e} {:>11.4e}",
            l.index,
            l.kind,
            l.path,
            l.fan_in,
            l.fan_out,
            l.k,
            l.second_moment,
            l.std()
        );
    }
    for s in &p.scalars {
        println!("scalar {:<14} {:>12.6} {}", s.position, s.value, s.reason.code());
    }
    for l in &p.learnable {
        println!("learnable {:<11} {:>12.6}", l.position, l.init);
    }
    println!("predicted output E[y^2]: {:.6e}", p.predicted_output_m2);
    for n in &p.notes {
        println!("note: {n}");
    }
}

fn cmd_plan(args: PlanArgs) -> Result<u8> {
    if !(0.01..=0.1).contains(&args.target_std) {
        bail!("--target-std must be between 0.01 and 0.1, got {}", args.target_std);
    }
    if args.empirical_norm && args.no_output_norm {
        bail!("--empirical-norm needs the output scalar; drop --no-output-norm");
    }
    let graph = match load(&args.spec)? {
        Input::Spec { graph, .. } => graph,
        Input::Plan(p) => p.source,
    };
    let opts = PlanOptions {
        input_scale: !args.no_input_scale,
        output_norm: (!args.no_output_norm).then_some(args.target_std),
        recipe: match args.recipe {
            RecipeArg::Balanced => Recipe::Balanced,
            RecipeArg::Printed => Recipe::Printed,
            RecipeArg::Off => Recipe::Off,
        },
        distribution: match args.distribution {
            DistributionArg::Gaussian => Distribution::Gaussian,
            DistributionArg::Uniform => Distribution::Uniform,
        },
    };
    let mut p = plan(&graph, scheme(args.scheme, args.c), &opts)?;
    if args.empirical_norm {
        if args.batch == 0 {
            bail!("--batch must be at least 1");
        }
        let factor = calibrate_output_norm(&Model::from_plan(&p), args.target_std, args.batch, args.seed)?;
        p.rescale_output_norm(factor)?;
        p.notes.push(format!(
            "output scalar calibrated on {} simulated samples (seed {}), factor {factor:.6} over the analytic value",
            args.batch, args.seed
        ));
    }
    let doc = serde_json::to_string_pretty(&p.to_json())?;
    if let Some(out) = &args.out {
        fs::write(out, &doc).with_context(|| format!("cannot write {}", out.display()))?;
    }
    if args.json {
        println!("{doc}");
    } else {
        print_plan(&p);
        if let Some(out) = &args.out {
            println!("wrote {}", out.display());
        }
    }
    Ok(0)
}

fn print_verification(report: &VerifyReport, cmp: &relu_precond::verify::Comparison) {
    println!(
        "{:>3}  {:<14} {:>12} {:>12} {:>12} {:>12} {:>9} {:>9}  pass",
        "#", "position", "gamma", "gamma(meas)", "nu_hat", "g_hat", "g ratio", "nu ratio"
    );
    for (l, v) in report.layers.iter().zip(&cmp.layers) {
        println!(
            "{:>3}  {:<14} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>9.3} {:>9.3}  {}",
            l.index,
            l.path,
            l.gamma_analytic,
            l.gamma_theory,
            l.nu_hat,
            l.g_hat,
            v.ratio_g,
            v.ratio_nu,
            if v.pass { "yes" } else { "no" }
        );
    }
    for w in &report.warnings {
        println!("warning: {w}");
    }
    println!(
        "{}: {:.0}% of layers within [{:.3}, {:.3}] (need {:.0}%); {} trials x {} samples, probes {}",
        if cmp.pass { "pass" } else { "fail" },
        100.0 * cmp.fraction,
        1.0 / cmp.tol,
        cmp.tol,
        100.0 * cmp.min_fraction,
        report.trials,
        report.batch,
        report.probes
    );
}

fn cmd_verify(args: VerifyArgs) -> Result<u8> {
    if !(args.tol.is_finite() && args.tol > 1.0) {
        bail!("--tol must be greater than 1, got {}", args.tol);
    }
    if !(0.0..=1.0).contains(&args.min_fraction) {
        bail!("--min-fraction must be between 0 and 1, got {}", args.min_fraction);
    }
    let spec = match load(&args.spec)? {
        Input::Spec { graph, .. } => graph,
        Input::Plan(_) => bail!("{} is a plan file; pass the network spec first", args.spec.display()),
    };
    let Input::Plan(p) = load(&args.plan)? else {
        bail!("{} is not a plan file", args.plan.display());
    };
    if p.source != spec {
        bail!("plan {} was made for a different network than {}", args.plan.display(), args.spec.display());
    }
    let model = Model::new(&p.network, p.weights, p.distribution)?;
    let probes = match args.probes {
        0 => ProbeMode::Basis,
        count => ProbeMode::Gaussian { count },
    };
    let cfg = EstimationConfig { batch: args.batch, trials: args.trials, seed: args.seed, probes };
    let report = run_verification(&model, &cfg)?;
    let cmp = compare(&report.analytic, &report, CompareOptions { tol: args.tol, min_fraction: args.min_fraction })?;
    let doc = json!({ "report": report, "analytic": report.analytic, "comparison": cmp });
    if let Some(out) = &args.out {
        fs::write(out, serde_json::to_string_pretty(&doc)?).with_context(|| format!("cannot write {}", out.display()))?;
    }
    if args.json {
        println!("{}", serde_json::to_string_pretty(&doc)?);
    } else {
        print_verification(&report, &cmp);
    }
    Ok(if cmp.pass { 0 } else { EXIT_VERIFY_FAILED })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INPUT } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn c_values() {
        assert_eq!(parse_c("auto").unwrap().0, None);
        assert_eq!(parse_c("0.5").unwrap().0, Some(0.5));
        assert!(parse_c("0").is_err());
        assert!(parse_c("-1").is_err());
        assert!(parse_c("inf").is_err());
    }

    #[test]
    fn xavier_is_arithmetic() {
        assert_eq!(scheme(SchemeArg::Xavier, CArg(None)), Scheme::Arithmetic);
        assert_eq!(scheme(SchemeArg::Geometric, CArg(Some(2.0))), Scheme::Geometric { c: Some(2.0) });
    }
}

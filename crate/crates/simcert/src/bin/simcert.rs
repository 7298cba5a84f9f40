//! Command-line front end: certify, synthesize, compose, and simulate
//! scenario networks, run the Laplacian case study, and print the
//! small-gain comparison.
//!
//! Exit codes: 0 when all checks pass, 2 on certification failure,
//! 1 on usage or input errors.

use clap::{Args, Parser, Subcommand};
use simcert::casestudy::{self, CaseStudyError};
use simcert::compose::{compose_network, solve_abstract_coupling, verify_composite};
use simcert::scenario::Scenario;
use simcert::storage::SampleConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "simcert", version, about = "Dissipativity-based abstraction certificates for networked control systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Verify the per-subsystem dissipation certificates of a scenario.
    Certify(ScenarioArgs),
    /// Run the abstraction-construction pipeline for a scenario's requests.
    Synthesize(ScenarioArgs),
    /// Solve the abstract coupling and check the network conditions.
    Compose(ScenarioArgs),
    /// Co-simulate the concrete and abstract networks of a scenario.
    Simulate(ScenarioArgs),
    /// Reproduce the complete-graph aggregation study end to end.
    Casestudy(CaseStudyArgs),
    /// Print the dissipativity-vs-small-gain comparison for a complete graph.
    Smallgain(SmallGainArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario JSON file.
    scenario: PathBuf,
    /// Output directory for artifacts (defaults to the working directory).
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct CaseStudyArgs {
    #[arg(long, default_value_t = 9)]
    n: usize,
    /// Comma-separated block sizes, e.g. 3,3,3.
    #[arg(long, default_value = "3,3,3", value_delimiter = ',')]
    partition: Vec<usize>,
    #[arg(long, default_value_t = 2.0)]
    lambda: f64,
    #[arg(long, default_value_t = 10.0)]
    t: f64,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Initial storage-function energy; 0 starts matched.
    #[arg(long, default_value_t = 0.0)]
    v0: f64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SmallGainArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    lambda: f64,
}

const EXIT_CERTIFICATION: u8 = 2;
const EXIT_USAGE: u8 = 1;

enum RunError {
    Usage(String),
    Certification(String),
}

impl From<CaseStudyError> for RunError {
    fn from(e: CaseStudyError) -> Self {
        match &e {
            CaseStudyError::Certification { .. } | CaseStudyError::Compose(_) | CaseStudyError::Synthesis(_) => {
                RunError::Certification(e.to_string())
            }
            _ => RunError::Usage(e.to_string()),
        }
    }
}

fn load_scenario(path: &PathBuf) -> Result<Scenario, RunError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RunError::Usage(format!("cannot read {}: {e}", path.display())))?;
    Scenario::from_json(&text).map_err(|e| RunError::Usage(e.to_string()))
}

fn cmd_certify(args: &ScenarioArgs) -> Result<(), RunError> {
    let scenario = load_scenario(&args.scenario)?;
    let reports = casestudy::certify_scenario(&scenario)?;
    let mut all_passed = true;
    for (name, report) in &reports {
        println!("{name}: {}", if report.passed { "PASS" } else { "FAIL" });
        all_passed &= report.passed;
    }
    let json = serde_json::json!(reports
        .iter()
        .map(|(name, report)| serde_json::json!({ "name": name, "report": report }))
        .collect::<Vec<_>>());
    std::fs::create_dir_all(&args.out).map_err(|e| RunError::Usage(e.to_string()))?;
    std::fs::write(args.out.join("certify.json"), serde_json::to_string_pretty(&json).unwrap())
        .map_err(|e| RunError::Usage(e.to_string()))?;
    if all_passed {
        Ok(())
    } else {
        Err(RunError::Certification("one or more subsystem certificates failed".into()))
    }
}

fn cmd_synthesize(args: &ScenarioArgs) -> Result<(), RunError> {
    let scenario = load_scenario(&args.scenario)?;
    let results = casestudy::synthesize_scenario(&scenario)?;
    std::fs::create_dir_all(&args.out).map_err(|e| RunError::Usage(e.to_string()))?;
    for (name, result) in &results {
        let path = args.out.join(format!("{name}_abstraction.json"));
        std::fs::write(&path, result.to_json()).map_err(|e| RunError::Usage(e.to_string()))?;
        println!("{name}: abstraction written to {}", path.display());
    }
    Ok(())
}

fn cmd_compose(args: &ScenarioArgs) -> Result<(), RunError> {
    let scenario = load_scenario(&args.scenario)?;
    let tol = scenario.tolerances();
    let bundle = casestudy::build_network(&scenario)?;
    let mu = vec![1.0; bundle.spec.len()];
    let mhat = solve_abstract_coupling(&bundle.spec, &tol)
        .map_err(|e| RunError::Certification(format!("abstract coupling match: {e}")))?;
    let (cert, _) = compose_network(&bundle.spec, &mu, Some(mhat.clone()), &tol)
        .map_err(|e| RunError::Certification(e.to_string()))?;
    let verification = verify_composite(
        &bundle.spec,
        &mu,
        &mhat,
        &SampleConfig { samples: 2000, seed: scenario.seed(), radius: 10.0 },
        &tol,
    );
    std::fs::create_dir_all(&args.out).map_err(|e| RunError::Usage(e.to_string()))?;
    std::fs::write(args.out.join("composition.json"), cert.to_json()).map_err(|e| RunError::Usage(e.to_string()))?;
    std::fs::write(args.out.join("composite_verification.json"), verification.to_json())
        .map_err(|e| RunError::Usage(e.to_string()))?;
    println!(
        "coupling dissipativity margin {:.3e}, coupling match residual {:.3e}: {}",
        cert.dissipativity_margin,
        cert.coupling_match_residual,
        if cert.passing(&tol) && verification.passed { "PASS" } else { "FAIL" }
    );
    if cert.passing(&tol) && verification.passed {
        Ok(())
    } else {
        Err(RunError::Certification("compositionality conditions failed".into()))
    }
}

fn cmd_simulate(args: &ScenarioArgs) -> Result<(), RunError> {
    let scenario = load_scenario(&args.scenario)?;
    let artifacts = casestudy::run_case_study(&scenario)?;
    std::fs::create_dir_all(&args.out).map_err(|e| RunError::Usage(e.to_string()))?;
    artifacts.write_to(&args.out).map_err(|e| RunError::Usage(e.to_string()))?;
    println!(
        "max output error {:.3e} over t in [0, {:.3}]; artifacts in {}",
        artifacts.max_error(),
        artifacts.cosim.concrete.times.last().unwrap_or(&0.0),
        args.out.display()
    );
    Ok(())
}

fn cmd_casestudy(args: &CaseStudyArgs) -> Result<(), RunError> {
    let mut scenario =
        Scenario::laplacian_case_study(args.n, args.partition.clone(), args.lambda, args.t, args.dt, args.seed);
    if args.v0 > 0.0 {
        scenario.simulation.x0 = simcert::scenario::X0Policy::Perturbed { v0: args.v0 };
    }
    scenario.validate().map_err(|e| RunError::Usage(e.to_string()))?;
    let artifacts = casestudy::run_case_study(&scenario)?;
    std::fs::create_dir_all(&args.out).map_err(|e| RunError::Usage(e.to_string()))?;
    artifacts.write_to(&args.out).map_err(|e| RunError::Usage(e.to_string()))?;

    let tol = scenario.tolerances();
    println!("subsystems certified: {}", artifacts.certification.len());
    println!("coupling dissipativity margin: {:.3e}", artifacts.composition.dissipativity_margin);
    println!("coupling match residual:       {:.3e}", artifacts.composition.coupling_match_residual);
    println!("initial energy V0:     {:.3e}", artifacts.v0);
    println!("max output error:      {:.3e}", artifacts.max_error());
    println!("bound violations:      {}", artifacts.bound_violations());
    println!(
        "small gain: (n-1)/(n-1+lambda) = {:.6}, rho(L) = {:.1}, dissipativity margin = {:.3e}",
        artifacts.small_gain.small_gain_value,
        artifacts.small_gain.spectral_radius,
        artifacts.small_gain.dissipativity_margin
    );
    println!("artifacts written to {}", args.out.display());
    let ok = artifacts.composition.passing(&tol)
        && artifacts.composite_verification.passed
        && artifacts.bound_violations() == 0;
    if ok {
        Ok(())
    } else {
        Err(RunError::Certification("case-study checks failed".into()))
    }
}

fn cmd_smallgain(args: &SmallGainArgs) -> Result<(), RunError> {
    if args.n < 2 || !(args.lambda > 0.0) {
        return Err(RunError::Usage("need --n >= 2 and --lambda > 0".into()));
    }
    let record = casestudy::small_gain_compare(args.n, args.lambda);
    println!("{}", serde_json::to_string_pretty(&record).unwrap());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // keep clap's rendered message but normalize the exit code
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Certify(args) => cmd_certify(args),
        Command::Synthesize(args) => cmd_synthesize(args),
        Command::Compose(args) => cmd_compose(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Casestudy(args) => cmd_casestudy(args),
        Command::Smallgain(args) => cmd_smallgain(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(RunError::Certification(msg)) => {
            eprintln!("certification failure: {msg}");
            ExitCode::from(EXIT_CERTIFICATION)
        }
        Err(RunError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

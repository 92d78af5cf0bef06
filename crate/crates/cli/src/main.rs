use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use darkfig::config::PipelineConfig;
use darkfig::design_glm::PiModel;
use darkfig::error::{Context, Error, Result};
use darkfig::io::write_file;
use darkfig::pipeline::{
    diagnostics_stage, first_stage, fit_reporting, gee_stage, rates_stage, reporting_coefficients,
    run_pipeline_inputs, simulate_bundle, twostep_stage, write_bundle, Bundle, Inputs,
};
use darkfig::report::{
    coefficients_csv, coefficients_text, focal_csv, grouped_rates_csv, positivity_csv, rates_csv,
    sig6,
};
use darkfig::simgen::{run_coverage, EstimatorSelection, ScenarioSpec};

/// Unreported-crime and arrest-probability estimation from a victimization
/// survey and police records.
#[derive(Parser)]
#[command(name = "darkfig", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory; defaults to the configured one.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WithModel {
    #[command(flatten)]
    common: Common,
    /// Fitted reporting model (JSON from `fit-reporting`) to use instead of
    /// refitting the survey.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Baseline,
    Clustered,
    AllReported,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario file (TOML).
    #[arg(long, conflicts_with = "preset")]
    scenario: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "baseline")]
    preset: Preset,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the reporting-propensity model on the survey.
    FitReporting(Common),
    /// Estimate the total number of offenses and the reporting and arrest rates.
    EstimateRates(WithModel),
    /// Fit the reweighted arrest model on single-offender incidents.
    FitArrest(WithModel),
    /// Fit the clustered arrest model on all incidents.
    FitArrestGee(WithModel),
    /// Positivity, discrimination, calibration and focal-slope diagnostics.
    Diagnose(WithModel),
    /// Write a simulated survey and offense file with known parameters.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, short, default_value = "sim")]
        out: PathBuf,
        /// Put the true propensities in the offense file instead of writing a survey.
        #[arg(long)]
        with_pi: bool,
        /// Print the scenario as TOML and exit.
        #[arg(long)]
        print_scenario: bool,
    },
    /// Monte Carlo bias, RMSE and interval coverage on a scenario.
    Coverage {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = 500)]
        reps: usize,
        /// Comma-separated subset of reporting,rates,twostep,gee.
        #[arg(long, default_value = "reporting,rates,twostep")]
        estimators: String,
        /// CSV output file; the table is printed either way.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Run every stage and write the full report bundle.
    Pipeline(Common),
}

fn load(common: &Common) -> Result<(PipelineConfig, PathBuf)> {
    let cfg = PipelineConfig::load(&common.config).within("cli")?;
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

fn load_model(path: &Path) -> Result<PiModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    PiModel::from_json(&text)
}

fn emit(out: &Path, bundle: &Bundle) -> Result<()> {
    write_bundle(out, bundle).within("cli")?;
    for name in bundle.keys() {
        eprintln!("wrote {}", out.join(name).display());
    }
    Ok(())
}

fn scenario(args: &ScenarioArgs) -> Result<ScenarioSpec> {
    let mut spec = match &args.scenario {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            ScenarioSpec::from_toml(&text)?
        }
        None => match args.preset {
            Preset::Baseline => ScenarioSpec::baseline(),
            Preset::Clustered => ScenarioSpec::clustered(),
            Preset::AllReported => ScenarioSpec::all_reported(),
        },
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    spec.validate()?;
    Ok(spec)
}

fn selection(list: &str) -> Result<EstimatorSelection> {
    let mut sel = EstimatorSelection {
        reporting: false,
        rates: false,
        twostep: false,
        gee: false,
    };
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match item {
            "reporting" => sel.reporting = true,
            "rates" => sel.rates = true,
            "twostep" => sel.twostep = true,
            "gee" => sel.gee = true,
            other => return Err(Error::InvalidInput(format!("unknown estimator `{other}`"))),
        }
    }
    Ok(sel)
}

fn second_stage(args: &WithModel) -> Result<(PipelineConfig, PathBuf, Inputs, darkfig::reweight::FirstStage)> {
    let (cfg, out) = load(&args.common)?;
    let inputs = Inputs::load(&cfg)?;
    let model = args.model.as_deref().map(load_model).transpose().within("cli")?;
    let fs = first_stage(&cfg, &inputs, model)?;
    Ok((cfg, out, inputs, fs))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FitReporting(common) => {
            let (cfg, out) = load(&common)?;
            let inputs = Inputs::load(&cfg)?;
            let model = fit_reporting(&cfg, &inputs)?;
            let coefs = reporting_coefficients(&model);
            print!("{}", coefficients_text("Reporting model", &coefs));
            let mut b = Bundle::new();
            b.insert("reporting_model.csv".into(), coefficients_csv(&coefs)?);
            b.insert("reporting_model.json".into(), model.to_json()?);
            emit(&out, &b)
        }
        Command::EstimateRates(args) => {
            let (cfg, out, inputs, fs) = second_stage(&args)?;
            let r = rates_stage(&cfg, &inputs, &fs)?;
            println!(
                "total offenses {} (se {}), reporting rate {} (se {}), arrest rate {} (se {})",
                sig6(r.total.total.value),
                sig6(r.total.total.se),
                sig6(r.rates.pi_star.value),
                sig6(r.rates.pi_star.se),
                sig6(r.rates.q_star.value),
                sig6(r.rates.q_star.se)
            );
            let mut b = Bundle::new();
            b.insert("rates.csv".into(), rates_csv(&r.total, &r.rates)?);
            if let Some(g) = &r.groups {
                b.insert("rates_by_group.csv".into(), grouped_rates_csv(g)?);
            }
            emit(&out, &b)
        }
        Command::FitArrest(args) => {
            let (cfg, out, inputs, fs) = second_stage(&args)?;
            let r = twostep_stage(&cfg, &inputs, &fs)?;
            let adj = r.adjusted.coefficients();
            let unadj = r.unadjusted.coefficients();
            print!("{}", coefficients_text("Arrest model, reweighted", &adj));
            print!("\n{}", coefficients_text("Arrest model, reported offenses only", &unadj));
            for w in &r.adjusted.warnings {
                eprintln!("warning: {w}");
            }
            let mut b = Bundle::new();
            b.insert("arrest_adjusted.csv".into(), coefficients_csv(&adj)?);
            b.insert("arrest_unadjusted.csv".into(), coefficients_csv(&unadj)?);
            emit(&out, &b)
        }
        Command::FitArrestGee(args) => {
            let (cfg, out, inputs, fs) = second_stage(&args)?;
            let g = gee_stage(&cfg, &inputs, &fs)?;
            let coefs = g.coefficients();
            print!(
                "{}",
                coefficients_text(&format!("Arrest model, clustered (working correlation {})", sig6(g.alpha_hat)), &coefs)
            );
            for w in &g.warnings {
                eprintln!("warning: {w}");
            }
            let mut b = Bundle::new();
            b.insert("arrest_gee.csv".into(), coefficients_csv(&coefs)?);
            emit(&out, &b)
        }
        Command::Diagnose(args) => {
            let (cfg, out, inputs, fs) = second_stage(&args)?;
            let d = diagnostics_stage(&cfg, &inputs, &fs)?;
            println!(
                "positivity: min {}, below floor {} ({})",
                sig6(d.positivity.overall.min),
                d.positivity.overall.below_floor,
                if d.positivity.pass { "pass" } else { "fail" }
            );
            if let Some((a, cv)) = d.auc {
                println!("weighted AUC: in-sample {}, cross-validated {}", sig6(a), sig6(cv));
            }
            let mut b = Bundle::new();
            b.insert("positivity.csv".into(), positivity_csv(&d.positivity)?);
            if let Some(c) = d.calibration {
                b.insert("calibration.csv".into(), c);
            }
            if !d.focal.is_empty() {
                b.insert("focal_slope.csv".into(), focal_csv(&d.focal)?);
            }
            emit(&out, &b)
        }
        Command::Simulate {
            scenario: args,
            out,
            with_pi,
            print_scenario,
        } => {
            let spec = scenario(&args)?;
            if print_scenario {
                print!("{}", spec.to_toml()?);
                return Ok(());
            }
            emit(&out, &simulate_bundle(&spec, with_pi)?)
        }
        Command::Coverage {
            scenario: args,
            reps,
            estimators,
            out,
        } => {
            let spec = scenario(&args)?;
            let report = run_coverage(&spec, &selection(&estimators)?, reps).within("simgen")?;
            println!(
                "{:<28} {:>12} {:>12} {:>12} {:>12} {:>9} {:>9}",
                "parameter", "truth", "bias", "rmse", "mean se", "coverage", "mc se"
            );
            for r in &report.rows {
                println!(
                    "{:<28} {:>12} {:>12} {:>12} {:>12} {:>9.3} {:>9.3}",
                    r.parameter,
                    sig6(r.truth),
                    sig6(r.bias),
                    sig6(r.rmse),
                    sig6(r.mean_se),
                    r.coverage,
                    r.coverage_se
                );
            }
            for (msg, count) in &report.failures {
                eprintln!("failed {count}x: {msg}");
            }
            if let Some(path) = out {
                write_file(&path, &report.to_csv()?)?;
                eprintln!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Pipeline(common) => {
            let (cfg, out) = load(&common)?;
            let inputs = Inputs::load(&cfg)?;
            let bundle = run_pipeline_inputs(&cfg, &inputs)?;
            print!("{}", bundle["summary.txt"]);
            emit(&out, &bundle)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

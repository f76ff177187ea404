use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use fraglab::biascalc::{
    check_stc, check_stc_fragments, correlation_diagnostic, predict_for_population, predict_plug_in, STCThresholds,
};
use fraglab::correctives::{aggregate_strata, debias_stc, estimate_aggregated, sweep_mixed, AggregateForm, AggregateIntercept};
use fraglab::datagen::{read_population_csv, write_population_csv, Effects};
use fraglab::estimators::{estimate_fragmented, estimate_true, EstimateReport, FragmentedForm};
use fraglab::fragmentation::{
    draw_assignment_with, fragment, read_fragments_csv, write_fragments_csv, FragmentedDataset, ModelForm,
};
use fraglab::harness::report::{capture, Report, ReportBundle};
use fraglab::harness::scenarios::{
    bias_csv, correlations_csv, debias_csv, estimates_csv, prepare, stc_csv, BUILTIN_SCENARIOS,
};
use fraglab::harness::{monte_carlo, run_builtin, run_scenario, OutputFormat, ScenarioConfig};
use fraglab::rng::{substream, Substream};
use fraglab::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "fraglab", version, about = "Simulate and analyse regressions on identity-fragmented data")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Scenario config (JSON)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the data-generating seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (defaults to the config's output_dir, then ".")
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Report format; data tables are always CSV
    #[arg(long, global = true, default_value = "csv", value_parser = ["csv", "json"])]
    format: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a population and write it as a user-level CSV
    Simulate,
    /// Assign each outcome to a device and write the fragment table
    Fragment {
        /// Population CSV instead of a config
        #[arg(long)]
        input: Option<PathBuf>,
        /// Constant device probabilities for --input, e.g. 0.6,0.4
        #[arg(long, value_delimiter = ',')]
        lambda: Vec<f64>,
        /// Leave out the true-user column
        #[arg(long)]
        no_oracle: bool,
    },
    /// Fit the configured models, or one fragmented model to a fragment CSV
    Estimate {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "common-stacked")]
        model: String,
    },
    /// Closed-form bias of the fragmented estimators
    Bias {
        /// Use outcome shares in the fragment sample instead of the true probabilities
        #[arg(long)]
        plug_in: bool,
    },
    /// Redraw device and noise at fixed exposures and compare with the closed forms
    Montecarlo {
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Aggregate fragments to strata bins and fit the aggregated regression
    Aggregate {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Strata variables (defaults to the config's aggregate spec)
        #[arg(long, value_delimiter = ',')]
        vars: Vec<String>,
        #[arg(long, default_value_t = 1)]
        min_bin_rows: usize,
        /// Fit a plain intercept on bin rows instead of the fragment count
        #[arg(long)]
        plain_intercept: bool,
        #[arg(long)]
        device_specific: bool,
    },
    /// Rescale the common-effect fit by J when the symmetric treatment condition holds
    Debias {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Fragments per user (defaults to the number of devices)
        #[arg(long)]
        j_used: Option<f64>,
        /// Rescale even if the checks fail or are inconclusive
        #[arg(long)]
        force: bool,
    },
    /// Symmetric-treatment checks and the cross-device correlation table
    Diagnose {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Bias of the pooled estimator as the fragmented share r grows
    SweepMixed {
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
    },
    /// Run a built-in scenario by name, or the config with --config
    Scenario {
        name: Option<String>,
        /// List the built-in scenarios
        #[arg(long)]
        list: bool,
    },
}

fn load_config(common: &Common) -> Result<ScenarioConfig> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::Config { field: "config".into(), message: "--config is required".into() })?;
    let mut cfg = ScenarioConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.dgp.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: Option<&ScenarioConfig>) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Config { field: "input".into(), message: format!("cannot open {}: {e}", path.display()) })
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or("input".into(), |s| s.to_string_lossy().into_owned())
}

fn read_fragments(path: &Path) -> Result<FragmentedDataset> {
    read_fragments_csv(open(path)?)
}

fn fragmented_form(name: &str) -> Result<FragmentedForm> {
    match name {
        "common-stacked" => Ok(FragmentedForm::CommonStacked),
        "device-specific-stacked" => Ok(FragmentedForm::DeviceSpecificStacked),
        "device-split" => Ok(FragmentedForm::DeviceSplit),
        other => Err(Error::Config {
            field: "model".into(),
            message: format!("expected common-stacked, device-specific-stacked or device-split, got {other:?}"),
        }),
    }
}

fn single(reports: Vec<&EstimateReport>) -> EstimateReport {
    reports[0].clone()
}

fn write_table(dir: &Path, name: &str, body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{name}.csv"));
    let mut buf = Vec::new();
    body(&mut buf)?;
    std::fs::write(&path, buf)?;
    Ok(vec![path])
}

fn keep(bundle: ReportBundle, names: &[&str]) -> ReportBundle {
    ReportBundle {
        scenario: bundle.scenario,
        reports: bundle.reports.into_iter().filter(|r| names.contains(&r.name.as_str())).collect(),
    }
}

fn run(command: Command, common: Common) -> Result<Vec<PathBuf>> {
    let format: OutputFormat = common.format.parse()?;
    match command {
        Command::Simulate => {
            let cfg = load_config(&common)?;
            let (pop, _, _) = prepare(&cfg)?;
            write_table(&out_dir(&common, Some(&cfg)), &format!("{}_population", cfg.name), |b| {
                write_population_csv(&pop, b)
            })
        }
        Command::Fragment { input, lambda, no_oracle } => {
            let (name, ds, cfg) = match input {
                Some(path) => {
                    let pop = read_population_csv(open(&path)?)?;
                    if lambda.len() != pop.n_devices() {
                        return Err(Error::Config {
                            field: "lambda".into(),
                            message: format!("give {} device probabilities with --input", pop.n_devices()),
                        });
                    }
                    validate_lambda(&lambda)?;
                    let l = DMatrix::from_fn(pop.n_users(), lambda.len(), |_, j| lambda[j]);
                    let a = draw_assignment_with(&l, &mut substream(common.seed.unwrap_or(0), Substream::Assignment));
                    (stem(&path), fragment(&pop, &a)?, None)
                }
                None => {
                    let cfg = load_config(&common)?;
                    let (_, _, ds) = prepare(&cfg)?;
                    (cfg.name.clone(), ds, Some(cfg))
                }
            };
            write_table(&out_dir(&common, cfg.as_ref()), &format!("{name}_fragments"), |b| {
                write_fragments_csv(&ds, !no_oracle, b)
            })
        }
        Command::Estimate { input, model } => {
            let form = fragmented_form(&model)?;
            match input {
                Some(path) => {
                    let ds = read_fragments(&path)?;
                    let est = estimate_fragmented(&ds.fragments, form)?;
                    let fits = est.reports();
                    let labelled: Vec<(String, &EstimateReport)> = fits.iter().map(|r| ("fragmented".to_string(), *r)).collect();
                    let mut bundle = ReportBundle::new(&stem(&path));
                    bundle.push(Report::new("estimates", &fits, estimates_csv(&labelled)?)?);
                    bundle.write(&out_dir(&common, None), format)
                }
                None => {
                    let mut cfg = load_config(&common)?;
                    cfg.mc_reps = 1;
                    cfg.correctives = Default::default();
                    let dir = out_dir(&common, Some(&cfg));
                    keep(run_scenario(&cfg)?, &["estimates"]).write(&dir, format)
                }
            }
        }
        Command::Bias { plug_in } => {
            let cfg = load_config(&common)?;
            let (pop, _, ds) = prepare(&cfg)?;
            let mut decs = Vec::new();
            for m in cfg.models.iter().filter(|m| m.is_fragmented()) {
                if plug_in {
                    decs.extend(predict_plug_in(&ds, cfg.dgp.beta0, &cfg.dgp.effects, m.model_form())?);
                } else {
                    decs.extend(predict_for_population(&pop, m.model_form())?);
                }
            }
            if decs.is_empty() {
                return Err(Error::Config { field: "models".into(), message: "list at least one fragmented model".into() });
            }
            let mut bundle = ReportBundle::new(&cfg.name);
            bundle.push(Report::new("bias", &decs, bias_csv(&decs)?)?);
            bundle.write(&out_dir(&common, Some(&cfg)), format)
        }
        Command::Montecarlo { reps } => {
            let cfg = load_config(&common)?;
            let (pop, _, _) = prepare(&cfg)?;
            let reps = reps.unwrap_or(cfg.mc_reps.max(2));
            let mc = monte_carlo(&pop, &cfg.models, reps, cfg.tolerances.mc_z)?;
            let mut bundle = ReportBundle::new(&cfg.name);
            bundle.push(Report::new("montecarlo", &mc, mc.to_csv()?)?);
            bundle.write(&out_dir(&common, Some(&cfg)), format)
        }
        Command::Aggregate { input, vars, min_bin_rows, plain_intercept, device_specific } => {
            let (name, ds, cfg) = match input {
                Some(path) => (stem(&path), read_fragments(&path)?, None),
                None => {
                    let cfg = load_config(&common)?;
                    let (_, _, ds) = prepare(&cfg)?;
                    (cfg.name.clone(), ds, Some(cfg))
                }
            };
            let spec = cfg.as_ref().and_then(|c| c.correctives.aggregate.clone());
            let vars = if vars.is_empty() { spec.as_ref().map(|s| s.variables.clone()).unwrap_or_default() } else { vars };
            if vars.is_empty() {
                return Err(Error::Config { field: "vars".into(), message: "name the strata variables with --vars".into() });
            }
            let intercept = if plain_intercept {
                AggregateIntercept::Plain
            } else {
                spec.as_ref().map_or(AggregateIntercept::Count, |s| s.intercept)
            };
            let device_form = device_specific
                || cfg.as_ref().is_some_and(|c| matches!(c.dgp.effects, Effects::BetaByDevice(_)));
            let form = if device_form { AggregateForm::DeviceSpecific } else { AggregateForm::Common };
            let agg = aggregate_strata(&ds, &vars, min_bin_rows)?;
            let est = estimate_aggregated(&agg, form, intercept)?;
            let mut bundle = ReportBundle::new(&name);
            bundle.push(Report::new("aggregated", &agg, capture(|b| agg.write_csv(b))?)?);
            bundle.push(Report::new("aggregated_estimates", &est, capture(|b| est.write_csv(b))?)?);
            bundle.write(&out_dir(&common, cfg.as_ref()), format)
        }
        Command::Debias { input, j_used, force } => {
            let (name, raw, stc, matched, j, cfg) = match input {
                Some(path) => {
                    let ds = read_fragments(&path)?;
                    let stc = check_stc_fragments(&ds, STCThresholds::default())?;
                    let raw = single(estimate_fragmented(&ds.fragments, FragmentedForm::CommonStacked)?.reports());
                    let j = ds.fragments.n_devices;
                    (stem(&path), raw, stc, None, j, None)
                }
                None => {
                    let cfg = load_config(&common)?;
                    let (pop, a, ds) = prepare(&cfg)?;
                    let stc = check_stc(&pop, Some(&a), cfg.stc_thresholds())?;
                    let raw = single(estimate_fragmented(&ds.fragments, FragmentedForm::CommonStacked)?.reports());
                    let matched = match cfg.dgp.effects {
                        Effects::Beta1(_) => Some(estimate_true(&pop, ModelForm::TrueCommon)?),
                        Effects::BetaByDevice(_) => None,
                    };
                    (cfg.name.clone(), raw, stc, matched, pop.n_devices(), Some(cfg))
                }
            };
            let d = debias_stc(&raw, j_used.unwrap_or(j as f64), &stc, force, matched.as_ref())?;
            let mut bundle = ReportBundle::new(&name);
            bundle.push(Report::new("stc", &stc, stc_csv(&stc)?)?);
            bundle.push(Report::new("debias", &d, debias_csv(&d)?)?);
            bundle.write(&out_dir(&common, cfg.as_ref()), format)
        }
        Command::Diagnose { input } => {
            let (name, ds, stc, cfg) = match input {
                Some(path) => {
                    let ds = read_fragments(&path)?;
                    let stc = check_stc_fragments(&ds, STCThresholds::default())?;
                    (stem(&path), ds, stc, None)
                }
                None => {
                    let cfg = load_config(&common)?;
                    let (pop, a, ds) = prepare(&cfg)?;
                    let stc = check_stc(&pop, Some(&a), cfg.stc_thresholds())?;
                    (cfg.name.clone(), ds, stc, Some(cfg))
                }
            };
            let mut bundle = ReportBundle::new(&name);
            bundle.push(Report::new("stc", &stc, stc_csv(&stc)?)?);
            if ds.oracle.is_some() {
                let diag = correlation_diagnostic(&ds)?;
                bundle.push(Report::new("correlations", &diag, correlations_csv(&diag)?)?);
            }
            bundle.write(&out_dir(&common, cfg.as_ref()), format)
        }
        Command::SweepMixed { grid } => {
            let cfg = load_config(&common)?;
            let grid = if grid.is_empty() {
                cfg.correctives
                    .mixed_sweep
                    .clone()
                    .unwrap_or_else(|| (0..=20).map(|i| i as f64 / 20.0).collect())
            } else {
                grid
            };
            let (pop, a, _) = prepare(&cfg)?;
            let sweep = sweep_mixed(&pop, &a, &grid)?;
            let mut bundle = ReportBundle::new(&cfg.name);
            bundle.push(Report::new("mixed_sweep", &sweep, capture(|b| sweep.write_csv(b))?)?);
            bundle.write(&out_dir(&common, Some(&cfg)), format)
        }
        Command::Scenario { name, list } => {
            if list {
                for s in BUILTIN_SCENARIOS {
                    println!("{s}");
                }
                return Ok(Vec::new());
            }
            match (name, &common.config) {
                (Some(n), _) if BUILTIN_SCENARIOS.contains(&n.as_str()) => {
                    run_builtin(&n, common.seed)?.write(&out_dir(&common, None), format)
                }
                (None, Some(_)) => {
                    let cfg = load_config(&common)?;
                    run_scenario(&cfg)?.write(&out_dir(&common, Some(&cfg)), format)
                }
                (Some(n), _) => Err(Error::Config {
                    field: "scenario".into(),
                    message: format!("unknown scenario {n:?}; built-ins are {}", BUILTIN_SCENARIOS.join(", ")),
                }),
                (None, None) => Err(Error::Config {
                    field: "scenario".into(),
                    message: "give a built-in name or --config".into(),
                }),
            }
        }
    }
}

fn validate_lambda(lambda: &[f64]) -> Result<()> {
    let sum: f64 = lambda.iter().sum();
    if lambda.iter().any(|l| !(0.0..=1.0).contains(l)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config { field: "lambda".into(), message: "probabilities must lie in [0, 1] and sum to 1".into() });
    }
    Ok(())
}

fn main() -> ExitCode {
    let parsed = match Cli::try_parse() {
        Ok(p) => p,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(parsed.command, parsed.common) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

//! Built-in scenarios and the generic config runner.

use rayon::prelude::*;
use serde::Serialize;

use super::config::{FitChoice, ScenarioConfig};
use super::montecarlo::{monte_carlo, thread_pool};
use super::report::{capture, csv_text, Report, ReportBundle};
use crate::biascalc::{
    bias_common, bias_common_scalar, check_stc, correlation_diagnostic, predict_for_population, MomentBundle,
    STCThresholds, STCVerdict,
};
use crate::correctives::{aggregate_strata, debias_stc, estimate_aggregated, sweep_mixed, AggregateForm, AggregateIntercept};
use crate::datagen::{
    attach_strata, generate_population, DgpConfig, Effects, ExposureSpec, Population, PreferenceSpec, StrataLevels,
    StrataSpec, StrataVariable,
};
use crate::error::{Error, Result};
use crate::estimators::{estimate_fragmented, estimate_true, EstimateReport, FragmentedEstimate, FragmentedForm};
use crate::fragmentation::{draw_assignment, draw_assignment_with, fragment, AssignmentMatrix, FragmentedDataset, ModelForm};
use crate::rng::{rep_seed, substream, Substream};

pub const BUILTIN_SCENARIOS: &[&str] = &[
    "table1",
    "randomization-lambda-sweep",
    "stc-J2",
    "stc-J3",
    "stc-J5",
    "activity-analog",
    "mixed-sweep",
];

const DEFAULT_SEED: u64 = 20_190_101;

/// Run a built-in scenario at its default size.
pub fn run_builtin(name: &str, seed: Option<u64>) -> Result<ReportBundle> {
    let seed = seed.unwrap_or(DEFAULT_SEED);
    let bundle = match name {
        "table1" => table1_bundle(),
        "randomization-lambda-sweep" => randomization_bundle(seed),
        "stc-J2" => stc_bundle(name, 2, seed),
        "stc-J3" => stc_bundle(name, 3, seed),
        "stc-J5" => stc_bundle(name, 5, seed),
        "activity-analog" => activity_bundle(seed),
        "mixed-sweep" => mixed_bundle(seed),
        other => {
            return Err(Error::config(
                "scenario",
                format!("unknown scenario {other:?}; built-ins are {}", BUILTIN_SCENARIOS.join(", ")),
            ))
        }
    };
    bundle.map_err(|e| in_scenario(name, e))
}

fn in_scenario(name: &str, e: Error) -> Error {
    match e {
        Error::Singular { context, condition_number } => Error::Singular {
            context: format!("scenario {name}: {context}"),
            condition_number,
        },
        Error::Invalid(m) => Error::Invalid(format!("scenario {name}: {m}")),
        other => other,
    }
}

/// Long table of labelled fits: `label,model_form,term,estimate,se,ci_lo,ci_hi`.
pub fn estimates_csv(reports: &[(String, &EstimateReport)]) -> Result<String> {
    let mut rows = Vec::new();
    for (label, r) in reports {
        for i in 0..r.terms.len() {
            rows.push(vec![
                label.clone(),
                r.model_form.to_string(),
                r.terms[i].clone(),
                r.coefficients[i].to_string(),
                r.standard_errors[i].to_string(),
                r.ci95[i].0.to_string(),
                r.ci95[i].1.to_string(),
            ]);
        }
    }
    csv_text(&["label", "model_form", "term", "estimate", "se", "ci_lo", "ci_hi"], rows)
}

fn single(e: FragmentedEstimate) -> EstimateReport {
    match e {
        FragmentedEstimate::Single(r) => r,
        FragmentedEstimate::Split(mut v) => v.remove(0),
    }
}

// ---------------------------------------------------------------- two users

/// Two users with one device-1 and one device-2 exposure each, both buying once
/// on device 1, and no advertising effect.
pub fn table1_population(device1: [f64; 2], device2: [f64; 2]) -> Result<Population> {
    generate_population(&DgpConfig {
        n_users: 2,
        n_devices: 2,
        n_covariates: 1,
        beta0: 1.0,
        effects: Effects::Beta1(vec![0.0]),
        exposure: ExposureSpec::FixedMatrix {
            matrices: vec![
                vec![vec![device1[0]], vec![device1[1]]],
                vec![vec![device2[0]], vec![device2[1]]],
            ],
        },
        noise_sigma: 0.0,
        preference: PreferenceSpec::Constant { lambda: vec![1.0, 0.0] },
        seed: 0,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Table1Result {
    pub panel_a_true: EstimateReport,
    pub panel_b_fragmented: EstimateReport,
    pub panel_c_fragmented: EstimateReport,
}

pub fn table1() -> Result<Table1Result> {
    let b = table1_population([2.0, 3.0], [0.0, 1.0])?;
    let c = table1_population([0.0, 1.0], [2.0, 3.0])?;
    let fit = |p: &Population| -> Result<EstimateReport> {
        let ds = fragment(p, &draw_assignment(p)?)?;
        Ok(single(estimate_fragmented(&ds.fragments, FragmentedForm::CommonStacked)?))
    };
    Ok(Table1Result {
        panel_a_true: estimate_true(&b, ModelForm::TrueCommon)?,
        panel_b_fragmented: fit(&b)?,
        panel_c_fragmented: fit(&c)?,
    })
}

fn table1_bundle() -> Result<ReportBundle> {
    let t = table1()?;
    let mut bundle = ReportBundle::new("table1");
    let csv = estimates_csv(&[
        ("panel_a".into(), &t.panel_a_true),
        ("panel_b".into(), &t.panel_b_fragmented),
        ("panel_c".into(), &t.panel_c_fragmented),
    ])?;
    bundle.push(Report::new("estimates", &t, csv)?);
    Ok(bundle)
}

// ---------------------------------------------------------------- randomization

/// Full factorial of `x1 ∈ {2, 4}` and `x2 ∈ {0, 2}` repeated to `n` users, so
/// that the empirical means are exactly 3, 1, 10, 2 and the cross mean is 3.
pub fn randomization_population(n: usize, lambda: f64, seed: u64) -> Result<Population> {
    if n == 0 || !n.is_multiple_of(4) {
        return Err(Error::config("n_users", "must be a positive multiple of 4"));
    }
    let cells = [(2.0, 0.0), (2.0, 2.0), (4.0, 0.0), (4.0, 2.0)];
    let m1 = (0..n).map(|i| vec![cells[i % 4].0]).collect();
    let m2 = (0..n).map(|i| vec![cells[i % 4].1]).collect();
    generate_population(&DgpConfig {
        n_users: n,
        n_devices: 2,
        n_covariates: 1,
        beta0: 0.0,
        effects: Effects::Beta1(vec![1.0]),
        exposure: ExposureSpec::FixedMatrix { matrices: vec![m1, m2] },
        noise_sigma: 1.0,
        preference: PreferenceSpec::Constant { lambda: vec![lambda, 1.0 - lambda] },
        seed,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RandomizationRow {
    pub lambda: f64,
    /// `(2λ − 7/4) β1`
    pub reference_bias: f64,
    pub analytic_bias: f64,
    pub scalar_bias: f64,
    pub mc_mean_slope: f64,
    pub mc_bias: f64,
    pub mc_se: f64,
    pub z_score: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RandomizationSweep {
    pub n_users: usize,
    pub reps: usize,
    pub rows: Vec<RandomizationRow>,
    /// Linear interpolation of where the mean fitted slope changes sign.
    pub slope_sign_change: Option<f64>,
    /// Linear interpolation of where the mean bias crosses zero.
    pub bias_zero_crossing: Option<f64>,
}

fn crossing(points: &[(f64, f64)]) -> Option<f64> {
    points.windows(2).find_map(|w| {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if y0 == 0.0 {
            Some(x0)
        } else if y0 * y1 < 0.0 {
            Some(x0 + (x1 - x0) * y0 / (y0 - y1))
        } else {
            None
        }
    })
}

pub fn randomization_sweep(n: usize, lambdas: &[f64], reps: usize, seed: u64) -> Result<RandomizationSweep> {
    let mut rows = Vec::with_capacity(lambdas.len());
    for (idx, lambda) in lambdas.iter().enumerate() {
        let pop = randomization_population(n, *lambda, rep_seed(seed, idx as u64))?;
        let lam = vec![*lambda; n];
        let dec = bias_common(&pop.exposures[0], &pop.exposures[1], &lam, 0.0, &[1.0])?;
        let moments = MomentBundle::from_data(pop.exposures[0].as_slice(), pop.exposures[1].as_slice(), &lam)?;
        let scalar = bias_common_scalar(&moments, 0.0, 1.0)?;
        let mc = monte_carlo(&pop, &[FitChoice::CommonStacked], reps, 5.0)?;
        let slope = mc
            .term(ModelForm::CommonStacked, "x1")
            .ok_or_else(|| Error::Invalid("missing slope term".into()))?;
        rows.push(RandomizationRow {
            lambda: *lambda,
            reference_bias: 2.0 * lambda - 1.75,
            analytic_bias: dec.total_bias[0],
            scalar_bias: scalar,
            mc_mean_slope: slope.mc_mean,
            mc_bias: slope.mc_mean - 1.0,
            mc_se: slope.mc_se,
            z_score: slope.z_score,
            pass: slope.pass,
        });
    }
    rows.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    let slope_pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.lambda, r.mc_mean_slope)).collect();
    let bias_pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.lambda, r.mc_bias)).collect();
    Ok(RandomizationSweep {
        n_users: n,
        reps,
        slope_sign_change: crossing(&slope_pts),
        bias_zero_crossing: crossing(&bias_pts),
        rows,
    })
}

pub const RANDOMIZATION_LAMBDAS: [f64; 11] = [0.1, 0.2, 0.3, 0.375, 0.4, 0.5, 0.6, 0.7, 0.8, 0.875, 0.9];

fn randomization_bundle(seed: u64) -> Result<ReportBundle> {
    let sweep = randomization_sweep(10_000, &RANDOMIZATION_LAMBDAS, 200, seed)?;
    let csv = csv_text(
        &["lambda", "reference_bias", "analytic_bias", "scalar_bias", "mc_mean_slope", "mc_bias", "mc_se", "z_score", "pass"],
        sweep.rows.iter().map(|r| {
            vec![
                r.lambda.to_string(),
                r.reference_bias.to_string(),
                r.analytic_bias.to_string(),
                r.scalar_bias.to_string(),
                r.mc_mean_slope.to_string(),
                r.mc_bias.to_string(),
                r.mc_se.to_string(),
                r.z_score.to_string(),
                r.pass.to_string(),
            ]
        }),
    )?;
    let mut bundle = ReportBundle::new("randomization-lambda-sweep");
    bundle.push(Report::new("bias", &sweep, csv)?);
    Ok(bundle)
}

// ---------------------------------------------------------------- STC

/// Symmetric i.i.d. rounded-lognormal exposures (mean 2, variance 4), one
/// covariate, `λ = 1/J`, no intercept. Heavier tails leave a visible
/// finite-sample ratio bias in the slope at n = 10⁴.
pub fn stc_config(j: usize, n: usize, seed: u64) -> DgpConfig {
    DgpConfig {
        n_users: n,
        n_devices: j,
        n_covariates: 1,
        beta0: 0.0,
        effects: Effects::Beta1(vec![1.0]),
        exposure: ExposureSpec::LognormalRounded {
            means: vec![vec![2.0]; j],
            variances: vec![vec![4.0]; j],
            rho: 0.0,
        },
        noise_sigma: 1.0,
        preference: PreferenceSpec::Constant { lambda: vec![1.0 / j as f64; j] },
        seed,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StcExperiment {
    pub n_devices: usize,
    pub n_users: usize,
    pub reps: usize,
    pub beta1: f64,
    pub stc_verdict: STCVerdict,
    pub fragmented_mean: f64,
    pub fragmented_se: f64,
    pub fragmented_rel_error: f64,
    pub debiased_mean: f64,
    pub debiased_se: f64,
    pub debiased_rel_error: f64,
    /// Debiased slope SE over matched-data slope SE.
    pub se_ratio_mean: f64,
    pub se_ratio_min: f64,
}

struct StcRep {
    fragmented: f64,
    debiased: f64,
    ratio: f64,
}

/// Whole-population replications: each draws new exposures, device, and noise.
/// The STC checks run on the first replication and gate the rescaling.
pub fn stc_experiment(j: usize, n: usize, reps: usize, seed: u64) -> Result<StcExperiment> {
    if reps < 2 {
        return Err(Error::config("mc_reps", "need at least two replications"));
    }
    let first = generate_population(&stc_config(j, n, rep_seed(seed, 0)))?;
    let a0 = draw_assignment(&first)?;
    let stc = check_stc(&first, Some(&a0), STCThresholds::for_sample_size(n))?;
    let pool = thread_pool()?;
    let out: Vec<StcRep> = pool.install(|| {
        (0..reps as u64)
            .into_par_iter()
            .map(|i| -> Result<StcRep> {
                let pop = generate_population(&stc_config(j, n, rep_seed(seed, i)))?;
                let a = draw_assignment(&pop)?;
                let ds = fragment(&pop, &a)?;
                let raw = single(estimate_fragmented(&ds.fragments, FragmentedForm::CommonStacked)?);
                let matched = estimate_true(&pop, ModelForm::TrueCommon)?;
                let d = debias_stc(&raw, j as f64, &stc, false, Some(&matched))?;
                Ok(StcRep {
                    fragmented: raw.coefficients[1],
                    debiased: d.debiased_coefficients[1],
                    ratio: d.ci_inflation_vs_matched.as_ref().map_or(f64::NAN, |v| v[0]),
                })
            })
            .collect::<Result<_>>()
    })?;
    let summarize = |v: Vec<f64>| {
        let m = crate::linalg::pairwise_sum(&v) / v.len() as f64;
        let dev: Vec<f64> = v.iter().map(|x| (x - m).powi(2)).collect();
        let sd = (crate::linalg::pairwise_sum(&dev) / (v.len() - 1) as f64).sqrt();
        (m, sd / (v.len() as f64).sqrt())
    };
    let (fm, fse) = summarize(out.iter().map(|r| r.fragmented).collect());
    let (dm, dse) = summarize(out.iter().map(|r| r.debiased).collect());
    let ratios: Vec<f64> = out.iter().map(|r| r.ratio).collect();
    let target = 1.0 / j as f64;
    Ok(StcExperiment {
        n_devices: j,
        n_users: n,
        reps,
        beta1: 1.0,
        stc_verdict: stc.verdict,
        fragmented_mean: fm,
        fragmented_se: fse,
        fragmented_rel_error: (fm - target).abs() / target,
        debiased_mean: dm,
        debiased_se: dse,
        debiased_rel_error: (dm - 1.0).abs(),
        se_ratio_mean: crate::linalg::pairwise_sum(&ratios) / reps as f64,
        se_ratio_min: ratios.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

fn stc_bundle(name: &str, j: usize, seed: u64) -> Result<ReportBundle> {
    let e = stc_experiment(j, 10_000, 200, seed)?;
    let csv = csv_text(
        &["n_devices", "reps", "fragmented_mean", "fragmented_se", "target", "debiased_mean", "debiased_se", "se_ratio_mean", "se_ratio_min", "sqrt_j"],
        [vec![
            e.n_devices.to_string(),
            e.reps.to_string(),
            e.fragmented_mean.to_string(),
            e.fragmented_se.to_string(),
            (1.0 / j as f64).to_string(),
            e.debiased_mean.to_string(),
            e.debiased_se.to_string(),
            e.se_ratio_mean.to_string(),
            e.se_ratio_min.to_string(),
            (j as f64).sqrt().to_string(),
        ]],
    )?;
    let mut bundle = ReportBundle::new(name);
    bundle.push(Report::new("debias", &e, csv)?);
    Ok(bundle)
}

// ---------------------------------------------------------------- activity bias

pub const ACTIVITY_DEVICES: [&str; 3] = ["mobile", "desktop", "tablet"];
pub const ACTIVITY_CHANNELS: [&str; 3] = ["search", "social", "display"];

/// Three devices, three ad channels, and a purchase device that follows the
/// device's own ad exposure, so ads and purchases co-locate. Display is only
/// weakly tied to the purchase device, which keeps its fragmented bias small
/// next to the intercept's and makes the partial-linkage sweep overshoot.
pub fn activity_dgp(n: usize, seed: u64) -> DgpConfig {
    DgpConfig {
        n_users: n,
        n_devices: 3,
        n_covariates: 3,
        beta0: 3.0,
        effects: Effects::Beta1(vec![0.26, 0.14, 0.04]),
        exposure: ExposureSpec::Poisson {
            means: vec![vec![1.5, 0.8, 3.0], vec![1.0, 0.5, 2.0], vec![0.3, 0.2, 0.6]],
            rho: 0.0,
        },
        noise_sigma: 1.0,
        preference: PreferenceSpec::Logistic {
            gamma0: vec![0.6, 0.3],
            gamma1: vec![0.6, 0.6, 0.1],
        },
        seed,
    }
}

pub fn activity_strata() -> StrataSpec {
    StrataSpec {
        variables: vec![
            StrataVariable { name: "msa".into(), levels: StrataLevels::Cardinality(48) },
            StrataVariable { name: "age".into(), levels: StrataLevels::Range([18, 82]) },
            StrataVariable { name: "income".into(), levels: StrataLevels::Cardinality(10) },
        ],
        seed: None,
    }
}

pub fn activity_population(n: usize, seed: u64) -> Result<Population> {
    attach_strata(&generate_population(&activity_dgp(n, seed))?, &activity_strata())
}

#[derive(Debug, Clone, Serialize)]
pub struct ActivityFits {
    pub true_fit: EstimateReport,
    pub fragmented: EstimateReport,
    pub aggregated: EstimateReport,
    /// Per channel: fragmented estimate above the true one.
    pub above_true: Vec<bool>,
    /// Per channel: fragmented and true 95% intervals do not overlap.
    pub ci_disjoint: Vec<bool>,
    /// Per channel: the aggregated 95% interval contains the true point estimate.
    pub aggregated_covers_true: Vec<bool>,
}

pub fn activity_fits(pop: &Population, ds: &FragmentedDataset) -> Result<ActivityFits> {
    let true_fit = estimate_true(pop, ModelForm::TrueCommon)?;
    let fragmented = single(estimate_fragmented(&ds.fragments, FragmentedForm::CommonStacked)?);
    let vars: Vec<String> = activity_strata().variables.into_iter().map(|v| v.name).collect();
    let agg = aggregate_strata(ds, &vars, 1)?;
    let aggregated = estimate_aggregated(&agg, AggregateForm::Common, AggregateIntercept::Count)?;
    let k = pop.n_covariates();
    let above_true = (1..=k).map(|c| fragmented.coefficients[c] > true_fit.coefficients[c]).collect();
    let ci_disjoint = (1..=k)
        .map(|c| fragmented.ci95[c].0 > true_fit.ci95[c].1 || fragmented.ci95[c].1 < true_fit.ci95[c].0)
        .collect();
    let aggregated_covers_true = (1..=k)
        .map(|c| aggregated.ci95[c].0 <= true_fit.coefficients[c] && true_fit.coefficients[c] <= aggregated.ci95[c].1)
        .collect();
    Ok(ActivityFits {
        true_fit,
        fragmented,
        aggregated,
        above_true,
        ci_disjoint,
        aggregated_covers_true,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ActivityExperiment {
    pub n_users: usize,
    pub reps: usize,
    /// Per channel, share of replications with the property.
    pub above_true_rate: Vec<f64>,
    pub ci_disjoint_rate: Vec<f64>,
    pub aggregated_coverage_rate: Vec<f64>,
}

/// Whole-population replications of the activity-bias fixture.
pub fn activity_experiment(n: usize, reps: usize, seed: u64) -> Result<ActivityExperiment> {
    let pool = thread_pool()?;
    let fits: Vec<ActivityFits> = pool.install(|| {
        (0..reps as u64)
            .into_par_iter()
            .map(|i| {
                let pop = activity_population(n, rep_seed(seed, i))?;
                let ds = fragment(&pop, &draw_assignment(&pop)?)?;
                activity_fits(&pop, &ds)
            })
            .collect::<Result<_>>()
    })?;
    let rate = |f: &dyn Fn(&ActivityFits) -> &Vec<bool>| -> Vec<f64> {
        (0..3)
            .map(|c| fits.iter().filter(|x| f(x)[c]).count() as f64 / reps as f64)
            .collect()
    };
    Ok(ActivityExperiment {
        n_users: n,
        reps,
        above_true_rate: rate(&|x| &x.above_true),
        ci_disjoint_rate: rate(&|x| &x.ci_disjoint),
        aggregated_coverage_rate: rate(&|x| &x.aggregated_covers_true),
    })
}

const ACTIVITY_N: usize = 20_000;

fn activity_bundle(seed: u64) -> Result<ReportBundle> {
    let pop = activity_population(ACTIVITY_N, seed)?;
    let ds = fragment(&pop, &draw_assignment(&pop)?)?;
    let fits = activity_fits(&pop, &ds)?;
    let diag = correlation_diagnostic(&ds)?;
    let exp = activity_experiment(ACTIVITY_N, 100, seed)?;
    let mut bundle = ReportBundle::new("activity-analog");

    let csv = estimates_csv(&[
        ("true".into(), &fits.true_fit),
        ("fragmented".into(), &fits.fragmented),
        ("aggregated".into(), &fits.aggregated),
    ])?;
    bundle.push(Report::new("estimates", &fits, csv)?);

    let mut rows = Vec::new();
    for d in &diag {
        for (r, row) in d.matrix.iter().enumerate() {
            for (l, v) in row.iter().enumerate() {
                rows.push(vec![
                    ACTIVITY_CHANNELS[d.covariate].to_string(),
                    ACTIVITY_DEVICES[r].to_string(),
                    ACTIVITY_DEVICES[l].to_string(),
                    v.map_or(String::new(), |x| x.to_string()),
                ]);
            }
        }
    }
    let csv = csv_text(&["channel", "outcome_device", "exposure_device", "corr"], rows)?;
    bundle.push(Report::new("correlations", &diag, csv)?);

    let csv = csv_text(
        &["channel", "above_true_rate", "ci_disjoint_rate", "aggregated_coverage_rate"],
        (0..3).map(|c| {
            vec![
                ACTIVITY_CHANNELS[c].to_string(),
                exp.above_true_rate[c].to_string(),
                exp.ci_disjoint_rate[c].to_string(),
                exp.aggregated_coverage_rate[c].to_string(),
            ]
        }),
    )?;
    bundle.push(Report::new("replications", &exp, csv)?);
    Ok(bundle)
}

// ---------------------------------------------------------------- mixed estimator

pub fn mixed_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

pub const MIXED_N: usize = 5_000;

/// The activity-bias population used for the partial-linkage sweep.
pub fn mixed_fixture(seed: u64) -> Result<(Population, AssignmentMatrix)> {
    let pop = generate_population(&activity_dgp(MIXED_N, seed))?;
    let a = draw_assignment(&pop)?;
    Ok((pop, a))
}

fn mixed_bundle(seed: u64) -> Result<ReportBundle> {
    let (pop, a) = mixed_fixture(seed)?;
    let sweep = sweep_mixed(&pop, &a, &mixed_grid())?;
    let csv = capture(|buf| sweep.write_csv(buf))?;
    let mut bundle = ReportBundle::new("mixed-sweep");
    bundle.push(Report::new("sweep", &sweep, csv)?);
    Ok(bundle)
}

// ---------------------------------------------------------------- generic

pub fn debias_csv(d: &crate::correctives::DebiasReport) -> Result<String> {
    let raw = &d.raw;
    csv_text(
        &["term", "raw", "debiased", "debiased_se", "ci_lo", "ci_hi"],
        (0..raw.terms.len()).map(|i| {
            vec![
                raw.terms[i].clone(),
                raw.coefficients[i].to_string(),
                d.debiased_coefficients[i].to_string(),
                d.debiased_se[i].to_string(),
                d.debiased_ci95[i].0.to_string(),
                d.debiased_ci95[i].1.to_string(),
            ]
        }),
    )
}

pub fn bias_csv(decs: &[crate::biascalc::BiasDecomposition]) -> Result<String> {
    let mut rows = Vec::new();
    for d in decs {
        for (i, t) in d.terms.iter().enumerate() {
            rows.push(vec![
                d.model_form.to_string(),
                t.clone(),
                d.beta[i].to_string(),
                d.delta1[i].to_string(),
                d.delta2[i].to_string(),
                d.delta3[i].to_string(),
                d.total_bias[i].to_string(),
                (d.beta[i] + d.total_bias[i]).to_string(),
            ]);
        }
    }
    csv_text(&["model_form", "term", "beta", "delta1", "delta2", "delta3", "total", "expected"], rows)
}

pub fn stc_csv(stc: &crate::biascalc::STCReport) -> Result<String> {
    csv_text(
        &["mean_gap", "second_moment_gap", "cross_corr", "lambda_exposure_dependence", "verdict"],
        [vec![
            stc.mean_gap.to_string(),
            stc.second_moment_gap.to_string(),
            stc.cross_corr.map_or(String::new(), |v| v.to_string()),
            stc.lambda_exposure_dependence.map_or(String::new(), |v| v.to_string()),
            format!("{:?}", stc.verdict).to_lowercase(),
        ]],
    )
}

pub fn correlations_csv(diag: &[crate::biascalc::CorrelationDiagnostic]) -> Result<String> {
    let mut rows = Vec::new();
    for d in diag {
        for (r, row) in d.matrix.iter().enumerate() {
            for (l, v) in row.iter().enumerate() {
                rows.push(vec![
                    (d.covariate + 1).to_string(),
                    (r + 1).to_string(),
                    (l + 1).to_string(),
                    v.map_or(String::new(), |x| x.to_string()),
                ]);
            }
        }
    }
    csv_text(&["covariate", "outcome_device", "exposure_device", "corr"], rows)
}

/// Run a user scenario: simulate, fragment, fit the requested models, predict
/// their bias, check STC, apply the requested correctives, and optionally run
/// the fixed-exposure Monte Carlo.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ReportBundle> {
    cfg.validate()?;
    run_scenario_inner(cfg).map_err(|e| in_scenario(&cfg.name, e))
}

/// Population (with strata), assignment and fragments for a config.
pub fn prepare(cfg: &ScenarioConfig) -> Result<(Population, AssignmentMatrix, FragmentedDataset)> {
    let mut pop = generate_population(&cfg.dgp)?;
    if let Some(s) = &cfg.strata {
        pop = attach_strata(&pop, s)?;
    }
    let a = match cfg.assignment_seed {
        Some(seed) => {
            let lambda = pop.preference.lambda.as_ref().expect("simulated populations carry lambda");
            draw_assignment_with(lambda, &mut substream(seed, Substream::Assignment))
        }
        None => draw_assignment(&pop)?,
    };
    let ds = fragment(&pop, &a)?;
    Ok((pop, a, ds))
}

fn run_scenario_inner(cfg: &ScenarioConfig) -> Result<ReportBundle> {
    let (pop, a, ds) = prepare(cfg)?;
    let mut bundle = ReportBundle::new(&cfg.name);

    let mut fits: Vec<(String, EstimateReport)> = Vec::new();
    for m in &cfg.models {
        match m {
            FitChoice::TrueCommon => fits.push(("true".into(), estimate_true(&pop, ModelForm::TrueCommon)?)),
            FitChoice::TrueDeviceSpecific => fits.push(("true".into(), estimate_true(&pop, ModelForm::TrueDeviceSpecific)?)),
            FitChoice::CommonStacked => fits.push((
                "fragmented".into(),
                single(estimate_fragmented(&ds.fragments, FragmentedForm::CommonStacked)?),
            )),
            FitChoice::DeviceSpecificStacked => fits.push((
                "fragmented".into(),
                single(estimate_fragmented(&ds.fragments, FragmentedForm::DeviceSpecificStacked)?),
            )),
            FitChoice::DeviceSplit => {
                if let FragmentedEstimate::Split(v) = estimate_fragmented(&ds.fragments, FragmentedForm::DeviceSplit)? {
                    fits.extend(v.into_iter().map(|r| ("fragmented".to_string(), r)));
                }
            }
        }
    }
    let refs: Vec<(String, &EstimateReport)> = fits.iter().map(|(l, r)| (l.clone(), r)).collect();
    let fit_values: Vec<&EstimateReport> = fits.iter().map(|(_, r)| r).collect();
    bundle.push(Report::new("estimates", &fit_values, estimates_csv(&refs)?)?);

    let mut decs = Vec::new();
    for m in cfg.models.iter().filter(|m| m.is_fragmented()) {
        decs.extend(predict_for_population(&pop, m.model_form())?);
    }
    if !decs.is_empty() {
        bundle.push(Report::new("bias", &decs, bias_csv(&decs)?)?);
    }

    let stc = check_stc(&pop, Some(&a), cfg.stc_thresholds())?;
    bundle.push(Report::new("stc", &stc, stc_csv(&stc)?)?);

    if let Some(spec) = &cfg.correctives.debias {
        let raw = single(estimate_fragmented(&ds.fragments, FragmentedForm::CommonStacked)?);
        let matched = match &cfg.dgp.effects {
            Effects::Beta1(_) => Some(estimate_true(&pop, ModelForm::TrueCommon)?),
            Effects::BetaByDevice(_) => None,
        };
        let j_used = spec.j_used.unwrap_or(pop.n_devices() as f64);
        match debias_stc(&raw, j_used, &stc, spec.force, matched.as_ref()) {
            Ok(d) => bundle.push(Report::new("debias", &d, debias_csv(&d)?)?),
            // a refusal is a finding, not a failure of the run
            Err(Error::StcViolated(reason)) => {
                let refused = serde_json::json!({ "refused": reason, "stc": &stc });
                bundle.push(Report::new("debias", &refused, csv_text(&["status", "reason"], [vec!["refused".into(), reason]])?)?);
            }
            Err(e) => return Err(e),
        }
    }

    if let Some(spec) = &cfg.correctives.aggregate {
        let agg = aggregate_strata(&ds, &spec.variables, spec.min_bin_rows)?;
        bundle.push(Report::new("aggregated", &agg, capture(|b| agg.write_csv(b))?)?);
        let form = match cfg.dgp.effects {
            Effects::Beta1(_) => AggregateForm::Common,
            Effects::BetaByDevice(_) => AggregateForm::DeviceSpecific,
        };
        let est = estimate_aggregated(&agg, form, spec.intercept)?;
        bundle.push(Report::new("aggregated_estimates", &est, capture(|b| est.write_csv(b))?)?);
    }

    if let Some(grid) = &cfg.correctives.mixed_sweep {
        let sweep = sweep_mixed(&pop, &a, grid)?;
        bundle.push(Report::new("mixed_sweep", &sweep, capture(|b| sweep.write_csv(b))?)?);
    }

    let diag = correlation_diagnostic(&ds)?;
    bundle.push(Report::new("correlations", &diag, correlations_csv(&diag)?)?);

    if cfg.mc_reps > 1 {
        let fits: Vec<FitChoice> = cfg.models.clone();
        let mc = monte_carlo(&pop, &fits, cfg.mc_reps, cfg.tolerances.mc_z)?;
        bundle.push(Report::new("montecarlo", &mc, mc.to_csv()?)?);
    }
    Ok(bundle)
}

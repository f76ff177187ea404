//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fail.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fraglab::biascalc::{correlation_diagnostic, vartheta_common, vartheta_device};
use fraglab::correctives::{aggregate_strata, estimate_aggregated, sweep_mixed, AggregateForm, AggregateIntercept};
use fraglab::datagen::{generate_population, DgpConfig, Effects, ExposureSpec, PreferenceSpec, Strata};
use fraglab::estimators::estimate_true;
use fraglab::fragmentation::{draw_assignment, fragment, ModelForm};
use fraglab::harness::scenarios::{
    activity_experiment, activity_fits, activity_population, mixed_fixture, mixed_grid, randomization_sweep,
    stc_experiment, table1,
};
use fraglab::harness::{monte_carlo, FitChoice};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let t = table1().expect("two-user fits");
    let elapsed = start.elapsed();
    let (a, b, c) = (
        t.panel_a_true.coefficients[1],
        t.panel_b_fragmented.coefficients[1],
        t.panel_c_fragmented.coefficients[1],
    );
    let pass = a.abs() < 1e-12 && (b - 0.4).abs() < 1e-12 && (c + 0.4).abs() < 1e-12 && elapsed < Duration::from_secs(1);
    outcome(pass, format!("true slope {a:.3e}, panel b {b:.15}, panel c {c:.15}, {elapsed:.2?}"))
}

fn criterion_2() -> Outcome {
    let lambdas = [0.1, 0.2, 0.3, 0.375, 0.4, 0.5, 0.6, 0.7, 0.8, 0.875, 0.9];
    let sweep = randomization_sweep(10_000, &lambdas, 500, 7).expect("sweep runs");
    let mut pass = true;
    let mut worst_rel: f64 = 0.0;
    let mut worst_z: f64 = 0.0;
    for r in &sweep.rows {
        let gap = (r.analytic_bias - r.reference_bias).abs();
        if r.reference_bias != 0.0 {
            worst_rel = worst_rel.max(gap / r.reference_bias.abs());
        }
        pass &= gap <= 0.02 * r.reference_bias.abs() + 1e-12;
        pass &= (r.scalar_bias - r.analytic_bias).abs() < 1e-9;
        worst_z = worst_z.max(r.z_score.abs());
        pass &= r.pass;
        // fitted slope is 2λ − 3/4: negative below 3/8, positive above
        if r.lambda < 0.375 {
            pass &= r.mc_mean_slope < 0.0;
        } else if r.lambda > 0.375 {
            pass &= r.mc_mean_slope > 0.0;
        }
        if r.lambda < 0.875 {
            pass &= r.mc_bias < 0.0;
        } else if r.lambda > 0.875 {
            pass &= r.mc_bias > 0.0;
        }
    }
    let se_at = |l: f64| sweep.rows.iter().find(|r| r.lambda == l).map_or(f64::NAN, |r| r.mc_se);
    // slope in λ is 2, so 5 MC standard errors in the mean are 2.5 in λ
    let sign = sweep.slope_sign_change.unwrap_or(f64::NAN);
    let zero = sweep.bias_zero_crossing.unwrap_or(f64::NAN);
    pass &= (sign - 0.375).abs() <= 2.5 * se_at(0.375) + 1e-12;
    pass &= (zero - 0.875).abs() <= 2.5 * se_at(0.875) + 1e-12;
    outcome(
        pass,
        format!(
            "max analytic rel error {worst_rel:.2e}, max |z| {worst_z:.2}, slope sign change at {sign:.4}, bias zero at {zero:.4}"
        ),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for j in [2usize, 3, 5] {
        let e = stc_experiment(j, 10_000, 200, 11 + j as u64).expect("STC experiment runs");
        let floor = (j as f64).sqrt() - 0.05;
        pass &= e.fragmented_rel_error < 0.01 && e.debiased_rel_error < 0.01 && e.se_ratio_min >= floor;
        parts.push(format!(
            "J={j}: slope {:.4} vs {:.4}, debiased {:.4}, SE ratio min {:.3} mean {:.3} (floor {:.3})",
            e.fragmented_mean,
            1.0 / j as f64,
            e.debiased_mean,
            e.se_ratio_min,
            e.se_ratio_mean,
            floor
        ));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(120);
    outcome(pass, format!("{}; {elapsed:.1?}", parts.join("; ")))
}

fn random_fixture(idx: u64) -> (DgpConfig, FitChoice) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + idx);
    let j = 2 + (idx % 2) as usize;
    let fit = [FitChoice::CommonStacked, FitChoice::DeviceSpecificStacked, FitChoice::DeviceSplit][(idx % 3) as usize];
    let k = rng.random_range(1..=2usize);
    let n = rng.random_range(80..=160usize);
    let mut unif = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
    let means = (0..j).map(|_| (0..k).map(|_| unif(0.5, 4.0)).collect()).collect();
    let rho = if idx % 4 < 2 { 0.0 } else { 0.3 };
    let preference = if idx.is_multiple_of(2) {
        let w: Vec<f64> = (0..j).map(|_| unif(0.2, 1.0)).collect();
        let s: f64 = w.iter().sum();
        PreferenceSpec::Constant { lambda: w.iter().map(|x| x / s).collect() }
    } else {
        PreferenceSpec::Logistic {
            gamma0: (1..j).map(|_| unif(-0.5, 0.5)).collect(),
            gamma1: (0..k).map(|_| unif(-0.4, 0.4)).collect(),
        }
    };
    let effects = match fit {
        FitChoice::CommonStacked => Effects::Beta1((0..k).map(|_| unif(-1.0, 1.0)).collect()),
        _ => Effects::BetaByDevice((0..j).map(|_| (0..k).map(|_| unif(-1.0, 1.0)).collect()).collect()),
    };
    let cfg = DgpConfig {
        n_users: n,
        n_devices: j,
        n_covariates: k,
        beta0: unif(-1.0, 2.0),
        effects,
        exposure: ExposureSpec::Poisson { means, rho },
        noise_sigma: 1.0,
        preference,
        seed: 500 + idx,
    };
    (cfg, fit)
}

fn criterion_4() -> Outcome {
    let mut pass = true;
    let mut slopes = 0;
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for idx in 0..20 {
        let (cfg, fit) = random_fixture(idx);
        let pop = generate_population(&cfg).expect("fixture generates");
        let mc = monte_carlo(&pop, &[fit], 10_000, 5.0).expect("Monte Carlo runs");
        for t in mc.terms.iter().filter(|t| t.term != "intercept") {
            slopes += 1;
            worst = worst.max(t.z_score.abs());
            if !t.pass {
                pass = false;
                failures.push(format!("fixture {idx} {} {} z={:.2}", t.model_form, t.term, t.z_score));
            }
        }
    }
    let mut detail = format!("20 fixtures, {slopes} slope terms, max |z| {worst:.2}");
    if !failures.is_empty() {
        detail += &format!("; failing: {}", failures.join(", "));
    }
    outcome(pass, detail)
}

fn dense_block(x: &DMatrix<f64>, p: usize) -> DMatrix<f64> {
    let inv = (x.transpose() * x).try_inverse().expect("dense Gram inverts");
    let q = inv.nrows();
    inv.view((q - p, q - p), (p, p)).into_owned()
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let j = rng.random_range(2..=3usize);
        let k = rng.random_range(1..=3usize);
        let n = rng.random_range(10..=60usize);
        let xs: Vec<DMatrix<f64>> = (0..j)
            .map(|_| DMatrix::from_fn(n, k, |_, _| (rng.random::<f64>() * 6.0).floor()))
            .collect();
        let common = DMatrix::from_fn(j * n, k + 1, |r, c| if c == 0 { 1.0 } else { xs[r / n][(r % n, c - 1)] });
        let device = DMatrix::from_fn(j * n, j * k + 1, |r, c| {
            if c == 0 {
                1.0
            } else if (c - 1) / k == r / n {
                xs[r / n][(r % n, (c - 1) % k)]
            } else {
                0.0
            }
        });
        for (fast, dense) in [
            (vartheta_common(&xs), dense_block(&common, k)),
            (vartheta_device(&xs), dense_block(&device, j * k)),
        ] {
            let fast = fast.expect("Schur complement inverts");
            let scale = dense.amax().max(1.0);
            worst = worst.max((fast - dense).amax() / scale);
        }
    }
    outcome(worst <= 1e-10, format!("100 designs, both stack forms, max scaled gap {worst:.2e}"))
}

fn criterion_6() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let (mut cfg, _) = random_fixture(seed * 3);
        cfg.effects = Effects::Beta1(vec![0.5; cfg.n_covariates]);
        let mut pop = generate_population(&cfg).expect("population");
        pop.strata = Some(Strata {
            names: vec!["user".into()],
            columns: vec![(0..pop.n_users() as i64).collect()],
        });
        let ds = fragment(&pop, &draw_assignment(&pop).expect("assignment")).expect("fragments");
        let agg = aggregate_strata(&ds, &["user".to_string()], 1).expect("aggregation");
        for (form, truth) in [
            (AggregateForm::Common, ModelForm::TrueCommon),
            (AggregateForm::DeviceSpecific, ModelForm::TrueDeviceSpecific),
        ] {
            let a = estimate_aggregated(&agg, form, AggregateIntercept::Count).expect("aggregated fit");
            let t = estimate_true(&pop, truth).expect("true fit");
            for (x, y) in a.coefficients.iter().zip(&t.coefficients) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    outcome(worst <= 1e-10, format!("5 populations, both forms, max coefficient gap {worst:.2e}"))
}

fn criterion_7() -> Outcome {
    let n = 20_000;
    let pop = activity_population(n, 77).expect("population");
    let ds = fragment(&pop, &draw_assignment(&pop).expect("assignment")).expect("fragments");
    let fits = activity_fits(&pop, &ds).expect("fits");
    let diag = correlation_diagnostic(&ds).expect("diagnostic");
    let exp = activity_experiment(n, 100, 77).expect("replications");
    let diagonal = diag.iter().all(|d| d.flagged);
    let pass = fits.above_true.iter().all(|b| *b)
        && fits.ci_disjoint.iter().all(|b| *b)
        && diagonal
        && exp.aggregated_coverage_rate.iter().all(|r| *r >= 0.9);
    let gaps: Vec<String> = (1..=3)
        .map(|c| format!("{:.3}", fits.fragmented.coefficients[c] - fits.true_fit.coefficients[c]))
        .collect();
    outcome(
        pass,
        format!(
            "fragmented minus true [{}], CIs disjoint {:?}, diagonal dominance {diagonal}, aggregated coverage {:?}",
            gaps.join(", "),
            fits.ci_disjoint,
            exp.aggregated_coverage_rate
        ),
    )
}

fn criterion_8() -> Outcome {
    let (pop, a) = mixed_fixture(20_190_101).expect("fixture");
    let sweep = sweep_mixed(&pop, &a, &mixed_grid()).expect("sweep");
    let flagged: Vec<String> = sweep
        .rows
        .iter()
        .filter(|r| r.flag_nonmonotone)
        .map(|r| format!("{}@{}", r.term, r.r))
        .collect();
    let pass = !flagged.is_empty() && sweep.max_identity_residual <= 1e-10;
    outcome(
        pass,
        format!(
            "{} flagged interior points (first {}), max identity residual {:.2e}",
            flagged.len(),
            flagged.first().map_or("none", |s| s.as_str()),
            sweep.max_identity_residual
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("two-user golden slopes", criterion_1),
        ("randomization counterexample", criterion_2),
        ("STC attenuation and debiasing", criterion_3),
        ("closed form vs Monte Carlo", criterion_4),
        ("Schur complement block", criterion_5),
        ("perfect strata equivalence", criterion_6),
        ("activity-bias analog", criterion_7),
        ("mixed estimator overshoot", criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {} {name}: {} ({}) [{:.1?}]",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

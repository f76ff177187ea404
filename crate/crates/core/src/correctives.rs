//! Remedies: STC rescaling, stratified aggregation, and the partial-linkage sweep.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::biascalc::{STCReport, STCVerdict};
use crate::datagen::{Effects, Population};
use crate::error::{Error, Result};
use crate::estimators::{estimate_mixed, ols, EstimateReport, MixedEstimateReport, Z95};
use crate::fragmentation::{common_terms, device_terms, AssignmentMatrix, DesignMatrices, FragmentedDataset, ModelForm};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DebiasReport {
    pub raw: EstimateReport,
    pub j_used: f64,
    /// `J_used` is an average fragment count rather than an exact `J`.
    pub approximate: bool,
    pub debiased_coefficients: Vec<f64>,
    pub debiased_se: Vec<f64>,
    pub debiased_ci95: Vec<(f64, f64)>,
    /// Debiased slope SE over matched-data slope SE, per slope; `None` without a matched fit.
    pub ci_inflation_vs_matched: Option<Vec<f64>>,
    pub forced: bool,
    pub stc: STCReport,
}

/// Multiply a common-effect fit by `J_used`, refusing unless the STC checks passed
/// or `force` is set.
pub fn debias_stc(
    raw: &EstimateReport,
    j_used: f64,
    stc: &STCReport,
    force: bool,
    matched: Option<&EstimateReport>,
) -> Result<DebiasReport> {
    if !(j_used.is_finite() && j_used >= 1.0) {
        return Err(Error::Invalid(format!("fragments per user must be at least 1, got {j_used}")));
    }
    if stc.verdict != STCVerdict::Satisfied && !force {
        let failed = stc.failed_conditions();
        let why = if failed.is_empty() {
            "some conditions could not be checked".to_string()
        } else {
            failed.join(", ")
        };
        return Err(Error::StcViolated(format!("{why}; pass force to rescale anyway")));
    }
    let coefficients: Vec<f64> = raw.coefficients.iter().map(|b| j_used * b).collect();
    let se: Vec<f64> = raw.standard_errors.iter().map(|s| j_used * s).collect();
    let ci = coefficients
        .iter()
        .zip(&se)
        .map(|(b, s)| (b - Z95 * s, b + Z95 * s))
        .collect();
    let inflation = match matched {
        Some(m) if m.n_params == raw.n_params => Some(
            se[1..]
                .iter()
                .zip(m.slope_ses())
                .map(|(a, b)| a / b)
                .collect(),
        ),
        Some(_) => return Err(Error::Dimension("matched fit has a different number of terms".into())),
        None => None,
    };
    Ok(DebiasReport {
        raw: raw.clone(),
        j_used,
        approximate: j_used.fract() != 0.0,
        debiased_coefficients: coefficients,
        debiased_se: se,
        debiased_ci95: ci,
        ci_inflation_vs_matched: inflation,
        forced: force && stc.verdict != STCVerdict::Satisfied,
        stc: stc.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bin {
    pub strata_key: Vec<i64>,
    pub y_sum: f64,
    /// Device-blocked exposure sums: entry `d·k + c` is covariate `c` on device `d`.
    pub x_sum: Vec<f64>,
    pub n_fragments: usize,
    pub n_users_oracle: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregatedDataset {
    pub binning_spec: Vec<String>,
    pub n_devices: usize,
    pub n_covariates: usize,
    pub min_bin_rows: usize,
    /// Sorted by key.
    pub bins: Vec<Bin>,
    pub dropped_bins: usize,
    pub dropped_fragments: usize,
}

impl AggregatedDataset {
    /// Sum of bin exposures over devices for covariate `c`.
    pub fn common_x(&self, bin: &Bin, c: usize) -> f64 {
        (0..self.n_devices).map(|d| bin.x_sum[d * self.n_covariates + c]).sum()
    }

    /// `strata_key_cols..., n_fragments, y_sum, xsum_1..`, plus `n_users_oracle` when known.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let with_users = self.bins.iter().any(|b| b.n_users_oracle.is_some());
        let mut header: Vec<String> = self.binning_spec.clone();
        header.push("n_fragments".into());
        header.push("y_sum".into());
        header.extend((1..=self.n_devices * self.n_covariates).map(|i| format!("xsum_{i}")));
        if with_users {
            header.push("n_users_oracle".into());
        }
        w.write_record(&header)?;
        for b in &self.bins {
            let mut rec: Vec<String> = b.strata_key.iter().map(|v| v.to_string()).collect();
            rec.push(b.n_fragments.to_string());
            rec.push(b.y_sum.to_string());
            rec.extend(b.x_sum.iter().map(|v| v.to_string()));
            if with_users {
                rec.push(b.n_users_oracle.map_or(String::new(), |n| n.to_string()));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Group fragments by the values of `vars` and sum outcomes and exposures per bin.
/// An empty variable list puts everything into one bin.
pub fn aggregate_strata(ds: &FragmentedDataset, vars: &[String], min_bin_rows: usize) -> Result<AggregatedDataset> {
    let f = &ds.fragments;
    let cols: Vec<usize> = vars
        .iter()
        .map(|v| {
            f.strata_names
                .iter()
                .position(|n| n == v)
                .ok_or_else(|| Error::Invalid(format!("unknown strata variable {v:?} (have {:?})", f.strata_names)))
        })
        .collect::<Result<_>>()?;
    let (j, k) = (f.n_devices, f.n_covariates());
    struct Acc {
        y: f64,
        x: Vec<f64>,
        n: usize,
        users: BTreeSet<usize>,
    }
    let mut groups: BTreeMap<Vec<i64>, Acc> = BTreeMap::new();
    for r in 0..f.n_rows() {
        let key: Vec<i64> = cols.iter().map(|c| f.strata[*c][r]).collect();
        let acc = groups.entry(key).or_insert_with(|| Acc {
            y: 0.0,
            x: vec![0.0; j * k],
            n: 0,
            users: BTreeSet::new(),
        });
        acc.y += f.y[r];
        for c in 0..k {
            acc.x[f.device[r] * k + c] += f.x[(r, c)];
        }
        acc.n += 1;
        if let Some(o) = &ds.oracle {
            acc.users.insert(o.true_user[r]);
        }
    }
    let mut bins = Vec::with_capacity(groups.len());
    let (mut dropped_bins, mut dropped_fragments) = (0, 0);
    for (key, acc) in groups {
        if acc.n < min_bin_rows {
            dropped_bins += 1;
            dropped_fragments += acc.n;
            continue;
        }
        bins.push(Bin {
            strata_key: key,
            y_sum: acc.y,
            x_sum: acc.x,
            n_fragments: acc.n,
            n_users_oracle: ds.oracle.as_ref().map(|_| acc.users.len()),
        });
    }
    if bins.is_empty() {
        return Err(Error::Invalid("aggregation produced no bins".into()));
    }
    Ok(AggregatedDataset {
        binning_spec: vars.to_vec(),
        n_devices: j,
        n_covariates: k,
        min_bin_rows,
        bins,
        dropped_bins,
        dropped_fragments,
    })
}

/// Intercept regressor for bin-level fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregateIntercept {
    /// Implied users per bin (`n_fragments / J`): summing the individual model
    /// over a bin multiplies the intercept by its membership.
    #[default]
    Count,
    /// Ordinary column of ones.
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregateForm {
    Common,
    DeviceSpecific,
}

/// Bin-level OLS of `y_sum` on the intercept regressor and the exposure sums.
pub fn estimate_aggregated(agg: &AggregatedDataset, form: AggregateForm, intercept: AggregateIntercept) -> Result<EstimateReport> {
    let (j, k) = (agg.n_devices, agg.n_covariates);
    let (slopes, terms, model_form) = match form {
        AggregateForm::Common => (k, common_terms(k), ModelForm::AggregatedCommon),
        AggregateForm::DeviceSpecific => (j * k, device_terms(k, j), ModelForm::AggregatedDeviceSpecific),
    };
    let p = 1 + slopes;
    let n = agg.bins.len();
    if n < p + 1 {
        return Err(Error::singular(
            format!("{model_form}: {n} bins for {p} parameters leaves no residual degrees of freedom"),
            f64::INFINITY,
        ));
    }
    let x = DMatrix::from_fn(n, p, |b, c| {
        let bin = &agg.bins[b];
        match (c, form) {
            (0, _) => match intercept {
                AggregateIntercept::Count => bin.n_fragments as f64 / j as f64,
                AggregateIntercept::Plain => 1.0,
            },
            (c, AggregateForm::Common) => agg.common_x(bin, c - 1),
            (c, AggregateForm::DeviceSpecific) => bin.x_sum[c - 1],
        }
    });
    let y = DVector::from_iterator(n, agg.bins.iter().map(|b| b.y_sum));
    ols(&DesignMatrices {
        form: model_form,
        y,
        x,
        terms,
        n_devices: j,
        layout: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub r: f64,
    pub term: String,
    pub bias: f64,
    pub abs_bias: f64,
    /// Interior `r` whose |bias| exceeds the fully fragmented |bias| for this term.
    pub flag_nonmonotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixedSweep {
    pub rows: Vec<SweepRow>,
    pub nonmonotone: bool,
    pub max_identity_residual: f64,
    #[serde(skip)]
    pub fits: Vec<MixedEstimateReport>,
}

impl MixedSweep {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["r", "term", "bias", "abs_bias", "flag_nonmonotone"])?;
        for row in &self.rows {
            w.write_record([
                row.r.to_string(),
                row.term.clone(),
                row.bias.to_string(),
                row.abs_bias.to_string(),
                row.flag_nonmonotone.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Slope bias of the mixed estimator against the true common slope over a grid
/// of fragmented shares. `r = 0` and `r = 1` are always included.
pub fn sweep_mixed(pop: &Population, a: &AssignmentMatrix, r_grid: &[f64]) -> Result<MixedSweep> {
    let beta = match pop.config.as_ref().map(|c| &c.effects) {
        Some(Effects::Beta1(b)) => b.clone(),
        Some(Effects::BetaByDevice(_)) => {
            return Err(Error::Invalid("the mixed estimator assumes a common effect".into()))
        }
        None => return Err(Error::Invalid("sweep needs the generating coefficients".into())),
    };
    let mut grid: Vec<f64> = r_grid.to_vec();
    grid.extend([0.0, 1.0]);
    if grid.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::Invalid("sweep grid values must lie in [0, 1]".into()));
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let fits: Vec<MixedEstimateReport> = grid.iter().map(|r| estimate_mixed(pop, a, *r)).collect::<Result<_>>()?;
    let k = beta.len();
    let bias = |fit: &MixedEstimateReport| -> Vec<f64> {
        fit.beta_mixed.slopes().iter().zip(&beta).map(|(b, t)| b - t).collect()
    };
    let end = bias(fits.last().expect("grid contains 1"));
    let mut rows = Vec::with_capacity(grid.len() * k);
    for (r, fit) in grid.iter().zip(&fits) {
        let b = bias(fit);
        for c in 0..k {
            let interior = *r > 0.0 && *r < 1.0;
            rows.push(SweepRow {
                r: *r,
                term: fit.beta_mixed.terms[c + 1].clone(),
                bias: b[c],
                abs_bias: b[c].abs(),
                flag_nonmonotone: interior && b[c].abs() > end[c].abs(),
            });
        }
    }
    let max_identity_residual = fits
        .iter()
        .filter_map(|f| f.identity_residual)
        .fold(0.0, f64::max);
    Ok(MixedSweep {
        nonmonotone: rows.iter().any(|r| r.flag_nonmonotone),
        rows,
        max_identity_residual,
        fits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::biascalc::{check_stc, STCThresholds};
    use crate::datagen::{attach_strata, generate_population, DgpConfig, ExposureSpec, PreferenceSpec, StrataLevels, StrataSpec, StrataVariable};
    use crate::estimators::{estimate_fragmented, estimate_true, FragmentedEstimate, FragmentedForm};
    use crate::fragmentation::{draw_assignment, fragment};
    use proptest::prelude::*;

    fn config(seed: u64, n: usize) -> DgpConfig {
        DgpConfig {
            n_users: n,
            n_devices: 2,
            n_covariates: 2,
            beta0: 1.0,
            effects: Effects::Beta1(vec![0.8, -0.3]),
            exposure: ExposureSpec::Poisson { means: vec![vec![2.0, 1.0], vec![2.0, 1.0]], rho: 0.0 },
            noise_sigma: 1.0,
            preference: PreferenceSpec::Constant { lambda: vec![0.5, 0.5] },
            seed,
        }
    }

    fn strata(pop: &Population, vars: &[(&str, StrataLevels)]) -> Population {
        let spec = StrataSpec {
            variables: vars
                .iter()
                .map(|(n, l)| StrataVariable { name: n.to_string(), levels: l.clone() })
                .collect(),
            seed: None,
        };
        attach_strata(pop, &spec).unwrap()
    }

    /// Adds a per-user unique key column.
    fn with_user_key(pop: &Population) -> Population {
        let mut p = strata(pop, &[("g", StrataLevels::Cardinality(3))]);
        let s = p.strata.as_mut().unwrap();
        s.names.push("uid".into());
        s.columns.push((0..pop.n_users() as i64).collect());
        p
    }

    #[test]
    fn perfect_strata_reproduce_true_fit() {
        let pop = with_user_key(&generate_population(&config(1, 300)).unwrap());
        let ds = fragment(&pop, &draw_assignment(&pop).unwrap()).unwrap();
        let agg = aggregate_strata(&ds, &["uid".to_string()], 1).unwrap();
        assert_eq!(agg.bins.len(), 300);
        let a = estimate_aggregated(&agg, AggregateForm::Common, AggregateIntercept::Count).unwrap();
        let t = estimate_true(&pop, ModelForm::TrueCommon).unwrap();
        for (x, y) in a.coefficients.iter().zip(&t.coefficients) {
            assert!((x - y).abs() < 1e-10);
        }
        let a = estimate_aggregated(&agg, AggregateForm::DeviceSpecific, AggregateIntercept::Count).unwrap();
        let t = estimate_true(&pop, ModelForm::TrueDeviceSpecific).unwrap();
        for (x, y) in a.coefficients.iter().zip(&t.coefficients) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn global_stratum_cannot_be_fitted() {
        let pop = generate_population(&config(2, 50)).unwrap();
        let ds = fragment(&pop, &draw_assignment(&pop).unwrap()).unwrap();
        let agg = aggregate_strata(&ds, &[], 1).unwrap();
        assert_eq!(agg.bins.len(), 1);
        assert!(matches!(
            estimate_aggregated(&agg, AggregateForm::Common, AggregateIntercept::Count),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn bins_equal_params_is_an_error() {
        let pop = with_user_key(&generate_population(&config(3, 3)).unwrap());
        let ds = fragment(&pop, &draw_assignment(&pop).unwrap()).unwrap();
        let agg = aggregate_strata(&ds, &["uid".to_string()], 1).unwrap();
        assert!(estimate_aggregated(&agg, AggregateForm::Common, AggregateIntercept::Count).is_err());
    }

    #[test]
    fn unknown_variable_and_dropped_bins() {
        let pop = strata(&generate_population(&config(4, 200)).unwrap(), &[("g", StrataLevels::Cardinality(40))]);
        let ds = fragment(&pop, &draw_assignment(&pop).unwrap()).unwrap();
        assert!(aggregate_strata(&ds, &["nope".to_string()], 1).is_err());
        let agg = aggregate_strata(&ds, &["g".to_string()], 12).unwrap();
        let kept: usize = agg.bins.iter().map(|b| b.n_fragments).sum();
        assert_eq!(kept + agg.dropped_fragments, ds.fragments.n_rows());
        assert!(agg.dropped_bins > 0);
        assert!(aggregate_strata(&ds, &["g".to_string()], 10_000).is_err());
    }

    #[test]
    fn aggregated_csv_header() {
        let pop = strata(&generate_population(&config(5, 20)).unwrap(), &[("g", StrataLevels::Cardinality(2))]);
        let ds = fragment(&pop, &draw_assignment(&pop).unwrap()).unwrap();
        let agg = aggregate_strata(&ds, &["g".to_string()], 1).unwrap();
        let mut buf = Vec::new();
        agg.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("g,n_fragments,y_sum,xsum_1,xsum_2,xsum_3,xsum_4,n_users_oracle\n"));
    }

    #[test]
    fn debias_scales_and_refuses() {
        let pop = generate_population(&config(6, 4000)).unwrap();
        let a = draw_assignment(&pop).unwrap();
        let ds = fragment(&pop, &a).unwrap();
        let raw = match estimate_fragmented(&ds.fragments, FragmentedForm::CommonStacked).unwrap() {
            FragmentedEstimate::Single(r) => r,
            _ => unreachable!(),
        };
        let stc = check_stc(&pop, Some(&a), STCThresholds::for_sample_size(4000)).unwrap();
        assert_eq!(stc.verdict, STCVerdict::Satisfied, "{stc:?}");
        let truth = estimate_true(&pop, ModelForm::TrueCommon).unwrap();
        let d = debias_stc(&raw, 2.0, &stc, false, Some(&truth)).unwrap();
        for (a, b) in d.debiased_coefficients.iter().zip(&raw.coefficients) {
            assert_eq!(*a, 2.0 * b);
        }
        assert!(!d.forced && !d.approximate);
        let same = debias_stc(&raw, 1.0, &stc, false, None).unwrap();
        assert_eq!(same.debiased_coefficients, raw.coefficients);

        let mut bad = stc.clone();
        bad.verdict = STCVerdict::Violated;
        bad.means_ok = false;
        match debias_stc(&raw, 2.0, &bad, false, None) {
            Err(Error::StcViolated(msg)) => assert!(msg.contains("equal exposure means")),
            other => panic!("{other:?}"),
        }
        let forced = debias_stc(&raw, 2.5, &bad, true, None).unwrap();
        assert!(forced.forced && forced.approximate);
    }

    #[test]
    fn sweep_endpoints() {
        let pop = generate_population(&config(7, 500)).unwrap();
        let a = draw_assignment(&pop).unwrap();
        let sweep = sweep_mixed(&pop, &a, &[0.25, 0.5, 0.75]).unwrap();
        assert_eq!(sweep.rows.len(), 5 * 2);
        let truth = estimate_true(&pop, ModelForm::TrueCommon).unwrap();
        let first = &sweep.fits[0];
        assert_eq!(first.beta_mixed.coefficients, truth.coefficients);
        for (row, se) in sweep.rows[..2].iter().zip(truth.slope_ses()) {
            assert!(row.abs_bias < 4.0 * se);
        }
        let ds = fragment(&pop, &a).unwrap();
        let frag = ols(&crate::fragmentation::stack_common(&ds.fragments)).unwrap();
        assert_eq!(sweep.fits.last().unwrap().beta_mixed.coefficients, frag.coefficients);
        assert!(sweep.max_identity_residual < 1e-10);
        let mut buf = Vec::new();
        sweep.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("r,term,bias,abs_bias,flag_nonmonotone\n0,x1,"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn aggregation_conserves_mass_and_coarsening_shrinks(seed in 0u64..1000, c1 in 1u32..6, c2 in 1u32..6) {
            let pop = strata(
                &generate_population(&config(seed, 60)).unwrap(),
                &[("a", StrataLevels::Cardinality(c1)), ("b", StrataLevels::Cardinality(c2))],
            );
            let ds = fragment(&pop, &draw_assignment(&pop).unwrap()).unwrap();
            let both = aggregate_strata(&ds, &["a".to_string(), "b".to_string()], 1).unwrap();
            let one = aggregate_strata(&ds, &["a".to_string()], 1).unwrap();
            prop_assert!(one.bins.len() <= both.bins.len());
            let y: f64 = both.bins.iter().map(|b| b.y_sum).sum();
            let fy: f64 = ds.fragments.y.iter().sum();
            prop_assert!((y - fy).abs() <= 1e-9 * (1.0 + fy.abs()));
            for c in 0..2 {
                let x: f64 = both.bins.iter().map(|b| both.common_x(b, c)).sum();
                let fx: f64 = ds.fragments.x.column(c).iter().sum();
                prop_assert_eq!(x, fx);
            }
            let rows: usize = both.bins.iter().map(|b| b.n_fragments).sum();
            prop_assert_eq!(rows, ds.fragments.n_rows());
            // every user's fragments share a bin
            prop_assert!(both.bins.iter().map(|b| b.n_users_oracle.unwrap() * 2).sum::<usize>() == rows);
        }
    }
}

//! Least squares fits for true, fragmented and partially linked data.

use std::cmp::Ordering;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::datagen::Population;
use crate::error::{Error, Result};
use crate::fragmentation::{
    common_terms, device_terms, split_by_device, stack_common, stack_device_specific, AssignmentMatrix,
    DesignMatrices, Fragments, ModelForm,
};
use crate::linalg::RANK_TOL;
use crate::rng::{substream, Substream};

/// Normal multiplier for the reported 95% intervals.
pub const Z95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub model_form: ModelForm,
    pub terms: Vec<String>,
    /// Intercept first.
    pub coefficients: Vec<f64>,
    /// Homoskedastic standard errors; NaN when there are no residual degrees of freedom.
    pub standard_errors: Vec<f64>,
    pub ci95: Vec<(f64, f64)>,
    pub n_rows: usize,
    pub n_params: usize,
    pub rss: f64,
    pub sigma2: f64,
    pub condition_number: f64,
}

impl EstimateReport {
    pub fn slopes(&self) -> &[f64] {
        &self.coefficients[1..]
    }

    pub fn slope_ses(&self) -> &[f64] {
        &self.standard_errors[1..]
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["term", "estimate", "se", "ci_lo", "ci_hi"])?;
        for (i, t) in self.terms.iter().enumerate() {
            w.write_record([
                t.clone(),
                self.coefficients[i].to_string(),
                self.standard_errors[i].to_string(),
                self.ci95[i].0.to_string(),
                self.ci95[i].1.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn row_cmp(x: &DMatrix<f64>, y: &DVector<f64>, a: usize, b: usize) -> Ordering {
    y[a].total_cmp(&y[b]).then_with(|| {
        for c in 0..x.ncols() {
            let o = x[(a, c)].total_cmp(&x[(b, c)]);
            if o != Ordering::Equal {
                return o;
            }
        }
        Ordering::Equal
    })
}

/// Ordinary least squares by Householder QR.
///
/// Rows are put in a canonical order before factorising, so any permutation
/// of the input rows gives bit-identical results. Rank deficiency (smallest
/// singular value below `1e-10` of the largest) is an error carrying the
/// condition number.
pub fn ols(design: &DesignMatrices) -> Result<EstimateReport> {
    let (n, p) = design.x.shape();
    if design.y.len() != n || design.terms.len() != p {
        return Err(Error::Dimension(format!(
            "design is {n}×{p}, response has {} rows, {} term names",
            design.y.len(),
            design.terms.len()
        )));
    }
    if n < p || p == 0 {
        return Err(Error::singular(
            format!("{}: {n} rows for {p} parameters", design.form),
            f64::INFINITY,
        ));
    }
    if design.x.iter().chain(design.y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("design contains non-finite values".into()));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| row_cmp(&design.x, &design.y, *a, *b));
    let x = DMatrix::from_fn(n, p, |r, c| design.x[(order[r], c)]);
    let mut qty = DVector::from_iterator(n, order.iter().map(|r| design.y[*r]));

    let qr = x.clone().qr();
    let r = qr.r();
    let sv = r.singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(smax > 0.0) || smin < RANK_TOL * smax {
        return Err(Error::singular(format!("{} design", design.form), cond));
    }
    qr.q_tr_mul(&mut qty);
    let beta = r
        .solve_upper_triangular(&qty.rows(0, p).into_owned())
        .ok_or_else(|| Error::singular(format!("{} design", design.form), cond))?;

    let resid = &design.y - &design.x * &beta;
    let rss = resid.norm_squared();
    let df = n - p;
    let sigma2 = if df > 0 { rss / df as f64 } else { f64::NAN };
    let rinv = r
        .try_inverse()
        .ok_or_else(|| Error::singular(format!("{} design", design.form), cond))?;
    let xtx_inv = &rinv * rinv.transpose();
    let se: Vec<f64> = (0..p).map(|i| (sigma2 * xtx_inv[(i, i)]).sqrt()).collect();
    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let ci95 = coefficients
        .iter()
        .zip(&se)
        .map(|(b, s)| (b - Z95 * s, b + Z95 * s))
        .collect();
    Ok(EstimateReport {
        model_form: design.form,
        terms: design.terms.clone(),
        coefficients,
        standard_errors: se,
        ci95,
        n_rows: n,
        n_params: p,
        rss,
        sigma2,
        condition_number: cond.max(1.0),
    })
}

/// Design for the un-fragmented data: `[η, Σ_j X_j]` or `[η, X_1, …, X_J]`.
pub fn true_design(pop: &Population, form: ModelForm) -> Result<DesignMatrices> {
    let (n, j, k) = (pop.n_users(), pop.n_devices(), pop.n_covariates());
    let (x, terms) = match form {
        ModelForm::TrueCommon => {
            let total = pop.total_exposure();
            (
                DMatrix::from_fn(n, k + 1, |i, c| if c == 0 { 1.0 } else { total[(i, c - 1)] }),
                common_terms(k),
            )
        }
        ModelForm::TrueDeviceSpecific => (
            DMatrix::from_fn(n, 1 + j * k, |i, c| {
                if c == 0 {
                    1.0
                } else {
                    let (d, cc) = ((c - 1) / k, (c - 1) % k);
                    pop.exposures[d][(i, cc)]
                }
            }),
            device_terms(k, j),
        ),
        other => return Err(Error::Invalid(format!("{other} is not a true-data model form"))),
    };
    Ok(DesignMatrices {
        form,
        y: pop.outcomes.clone(),
        x,
        terms,
        n_devices: j,
        layout: None,
    })
}

/// OLS of `y` on the un-fragmented exposures.
pub fn estimate_true(pop: &Population, form: ModelForm) -> Result<EstimateReport> {
    ols(&true_design(pop, form)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FragmentedForm {
    CommonStacked,
    DeviceSpecificStacked,
    DeviceSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum FragmentedEstimate {
    Single(EstimateReport),
    Split(Vec<EstimateReport>),
}

impl FragmentedEstimate {
    pub fn reports(&self) -> Vec<&EstimateReport> {
        match self {
            FragmentedEstimate::Single(r) => vec![r],
            FragmentedEstimate::Split(rs) => rs.iter().collect(),
        }
    }
}

/// Naive fit treating every fragment as a separate user.
pub fn estimate_fragmented(f: &Fragments, form: FragmentedForm) -> Result<FragmentedEstimate> {
    Ok(match form {
        FragmentedForm::CommonStacked => FragmentedEstimate::Single(ols(&stack_common(f))?),
        FragmentedForm::DeviceSpecificStacked => FragmentedEstimate::Single(ols(&stack_device_specific(f)?)?),
        FragmentedForm::DeviceSplit => FragmentedEstimate::Split(
            split_by_device(f)
                .iter()
                .map(ols)
                .collect::<Result<Vec<_>>>()?,
        ),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixedEstimateReport {
    pub r_requested: f64,
    /// Fragmented users over all users, after rounding.
    pub r: f64,
    pub n_fragmented_users: usize,
    pub n_linked_users: usize,
    pub beta_mixed: EstimateReport,
    pub beta_fragmented_only: Option<EstimateReport>,
    pub beta_linked_only: Option<EstimateReport>,
    /// `(1+k) × (1+k)`, row major.
    pub omega: Vec<Vec<f64>>,
    /// `max |β^m − (ω β^f + (I − ω) β^l)|` relative to `max(1, |β^m|)`.
    pub identity_residual: Option<f64>,
    pub notes: Vec<String>,
}

impl MixedEstimateReport {
    pub fn omega_matrix(&self) -> DMatrix<f64> {
        let p = self.omega.len();
        DMatrix::from_fn(p, p, |a, b| self.omega[a][b])
    }
}

/// Tolerance for the weighted-average identity of the mixed estimator.
pub const MIXED_IDENTITY_TOL: f64 = 1e-10;

/// Users selected for fragmentation, ascending: a prefix of one fixed permutation,
/// so the sets are nested as `r` grows.
pub fn mixed_subset(pop: &Population, n_fragmented: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..pop.n_users()).collect();
    perm.shuffle(&mut substream(pop.seed(), Substream::MixedSubset));
    let mut chosen = perm[..n_fragmented].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Pooled OLS over a share `r` of fragmented users and the remaining linked users,
/// with the matrix weight `ω = (G_f + G_l)^{-1} G_f` that makes
/// `β^m = ω β^f + (I − ω) β^l` hold exactly.
pub fn estimate_mixed(pop: &Population, a: &AssignmentMatrix, r: f64) -> Result<MixedEstimateReport> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Invalid(format!("fraction fragmented must lie in [0, 1], got {r}")));
    }
    let (n, j, k) = (pop.n_users(), pop.n_devices(), pop.n_covariates());
    if a.n_users() != n || a.n_devices() != j {
        return Err(Error::Dimension("assignment does not match population".into()));
    }
    let n_f = (r * n as f64).round() as usize;
    let mut notes = Vec::new();
    if r > 0.0 && n_f == 0 {
        notes.push(format!("r·n = {:.3} rounds to zero fragmented users", r * n as f64));
    }
    let fragmented = mixed_subset(pop, n_f);
    let mut is_frag = vec![false; n];
    for i in &fragmented {
        is_frag[*i] = true;
    }
    let linked: Vec<usize> = (0..n).filter(|i| !is_frag[*i]).collect();
    let total = pop.total_exposure();
    let p = k + 1;

    let frag_rows = j * fragmented.len();
    let mut xf = DMatrix::zeros(frag_rows, p);
    let mut yf = DVector::zeros(frag_rows);
    for d in 0..j {
        for (t, i) in fragmented.iter().enumerate() {
            let row = d * fragmented.len() + t;
            xf[(row, 0)] = 1.0;
            for c in 0..k {
                xf[(row, c + 1)] = pop.exposures[d][(*i, c)];
            }
            if a.devices()[*i] == d {
                yf[row] = pop.outcomes[*i];
            }
        }
    }
    let xl = DMatrix::from_fn(linked.len(), p, |t, c| if c == 0 { 1.0 } else { total[(linked[t], c - 1)] });
    let yl = DVector::from_iterator(linked.len(), linked.iter().map(|i| pop.outcomes[*i]));

    let make = |x: DMatrix<f64>, y: DVector<f64>| DesignMatrices {
        form: ModelForm::Mixed,
        y,
        x,
        terms: common_terms(k),
        n_devices: j,
        layout: None,
    };
    let pooled_x = DMatrix::from_fn(frag_rows + linked.len(), p, |row, c| {
        if row < frag_rows {
            xf[(row, c)]
        } else {
            xl[(row - frag_rows, c)]
        }
    });
    let pooled_y = DVector::from_iterator(frag_rows + linked.len(), yf.iter().chain(yl.iter()).copied());
    let beta_mixed = ols(&make(pooled_x, pooled_y))?;

    let fit_part = |x: &DMatrix<f64>, y: &DVector<f64>, label: &str, notes: &mut Vec<String>| {
        if x.nrows() == 0 {
            return None;
        }
        match ols(&make(x.clone(), y.clone())) {
            Ok(mut rep) => {
                rep.model_form = if label == "fragmented" { ModelForm::CommonStacked } else { ModelForm::TrueCommon };
                Some(rep)
            }
            Err(e) => {
                notes.push(format!("{label}-only fit unavailable: {e}"));
                None
            }
        }
    };
    let beta_f = fit_part(&xf, &yf, "fragmented", &mut notes);
    let beta_l = fit_part(&xl, &yl, "linked", &mut notes);

    let gf = xf.transpose() * &xf;
    let gl = xl.transpose() * &xl;
    let omega = (&gf + &gl)
        .lu()
        .solve(&gf)
        .ok_or_else(|| Error::singular("mixed Gram matrix", beta_mixed.condition_number))?;

    let bm = DVector::from_column_slice(&beta_mixed.coefficients);
    let zeros = DVector::zeros(p);
    let bf = beta_f.as_ref().map(|b| DVector::from_column_slice(&b.coefficients));
    let bl = beta_l.as_ref().map(|b| DVector::from_column_slice(&b.coefficients));
    let identity_residual = match (&bf, &bl, n_f, linked.len()) {
        (Some(f), Some(l), _, _) => Some(&omega * f + (DMatrix::identity(p, p) - &omega) * l),
        (Some(f), None, _, 0) => Some(&omega * f),
        (None, Some(l), 0, _) => Some(&omega * &zeros + (DMatrix::identity(p, p) - &omega) * l),
        _ => None,
    }
    .map(|combo| {
        let scale = bm.amax().max(1.0);
        (&bm - combo).amax() / scale
    });
    if let Some(res) = identity_residual {
        if res > MIXED_IDENTITY_TOL {
            notes.push(format!("weighted-average identity residual {res:.3e} exceeds {MIXED_IDENTITY_TOL:e}"));
        }
    }
    Ok(MixedEstimateReport {
        r_requested: r,
        r: n_f as f64 / n as f64,
        n_fragmented_users: n_f,
        n_linked_users: linked.len(),
        beta_mixed,
        beta_fragmented_only: beta_f,
        beta_linked_only: beta_l,
        omega: (0..p).map(|a| (0..p).map(|b| omega[(a, b)]).collect()).collect(),
        identity_residual,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_population, DgpConfig, Effects, ExposureSpec, PreferenceSpec};
    use crate::fragmentation::tests::two_users;
    use crate::fragmentation::{draw_assignment, fragment};
    use proptest::prelude::*;

    fn design(x: DMatrix<f64>, y: DVector<f64>) -> DesignMatrices {
        let p = x.ncols();
        DesignMatrices {
            form: ModelForm::CommonStacked,
            y,
            x,
            terms: common_terms(p - 1),
            n_devices: 2,
            layout: None,
        }
    }

    #[test]
    fn two_user_slopes() {
        let pop = two_users([2.0, 3.0], [0.0, 1.0]);
        let a = draw_assignment(&pop).unwrap();
        let rep = ols(&stack_common(&fragment(&pop, &a).unwrap().fragments)).unwrap();
        assert!((rep.coefficients[1] - 0.4).abs() < 1e-12);
        let truth = estimate_true(&pop, ModelForm::TrueCommon).unwrap();
        assert!(truth.coefficients[1].abs() < 1e-12);
        assert!(truth.standard_errors[1].is_nan());

        let pop = two_users([0.0, 1.0], [2.0, 3.0]);
        let rep = ols(&stack_common(&fragment(&pop, &a).unwrap().fragments)).unwrap();
        assert!((rep.coefficients[1] + 0.4).abs() < 1e-12);
    }

    #[test]
    fn exact_fit_recovers_coefficients() {
        let x = DMatrix::from_row_slice(5, 3, &[1.0, 0.0, 2.0, 1.0, 1.0, 0.5, 1.0, 2.0, -1.0, 1.0, 3.0, 0.0, 1.0, 4.0, 7.0]);
        let c = DVector::from_row_slice(&[0.5, -1.25, 2.0]);
        let rep = ols(&design(x.clone(), &x * &c)).unwrap();
        for (a, b) in rep.coefficients.iter().zip(c.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(rep.rss < 1e-20);
        assert!(rep.condition_number >= 1.0);
    }

    #[test]
    fn rank_deficiency_is_an_error() {
        let x = DMatrix::from_row_slice(4, 3, &[1.0, 1.0, 2.0, 1.0, 2.0, 4.0, 1.0, 3.0, 6.0, 1.0, 4.0, 8.0]);
        let y = DVector::from_row_slice(&[1.0, 2.0, 3.0, 5.0]);
        match ols(&design(x, y)) {
            Err(Error::Singular { condition_number, .. }) => assert!(condition_number > 1e10),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_device_split_is_singular() {
        let cfg = DgpConfig {
            n_users: 30,
            n_devices: 2,
            n_covariates: 1,
            beta0: 1.0,
            effects: Effects::Beta1(vec![1.0]),
            exposure: ExposureSpec::Poisson { means: vec![vec![2.0], vec![0.0]], rho: 0.0 },
            noise_sigma: 0.5,
            preference: PreferenceSpec::Constant { lambda: vec![1.0, 0.0] },
            seed: 3,
        };
        let pop = generate_population(&cfg).unwrap();
        let ds = fragment(&pop, &draw_assignment(&pop).unwrap()).unwrap();
        assert!(matches!(
            estimate_fragmented(&ds.fragments, FragmentedForm::DeviceSplit),
            Err(Error::Singular { .. })
        ));
    }

    fn noisy_config(seed: u64, sigma: f64) -> DgpConfig {
        DgpConfig {
            n_users: 400,
            n_devices: 2,
            n_covariates: 2,
            beta0: 1.5,
            effects: Effects::Beta1(vec![0.5, -0.25]),
            exposure: ExposureSpec::Poisson { means: vec![vec![3.0, 1.0], vec![2.0, 2.0]], rho: 0.1 },
            noise_sigma: sigma,
            preference: PreferenceSpec::Logistic { gamma0: vec![0.2], gamma1: vec![0.3, -0.1] },
            seed,
        }
    }

    #[test]
    fn noiseless_truth_is_recovered() {
        let pop = generate_population(&noisy_config(1, 0.0)).unwrap();
        let rep = estimate_true(&pop, ModelForm::TrueCommon).unwrap();
        for (a, b) in rep.coefficients.iter().zip([1.5, 0.5, -0.25]) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn truth_within_four_se_across_reps() {
        let mut inside = 0;
        for rep in 0..200 {
            let pop = generate_population(&noisy_config(1000 + rep, 2.0)).unwrap();
            let est = estimate_true(&pop, ModelForm::TrueCommon).unwrap();
            if est
                .coefficients
                .iter()
                .zip(&est.standard_errors)
                .zip([1.5, 0.5, -0.25])
                .all(|((b, s), t)| (b - t).abs() <= 4.0 * s)
            {
                inside += 1;
            }
        }
        assert!(inside >= 198, "{inside}/200 inside 4 SE");
    }

    #[test]
    fn mixed_endpoints_match_pure_estimators() {
        let pop = generate_population(&noisy_config(4, 1.0)).unwrap();
        let a = draw_assignment(&pop).unwrap();
        let m0 = estimate_mixed(&pop, &a, 0.0).unwrap();
        let truth = estimate_true(&pop, ModelForm::TrueCommon).unwrap();
        assert_eq!(m0.beta_mixed.coefficients, truth.coefficients);
        let m1 = estimate_mixed(&pop, &a, 1.0).unwrap();
        let frag = ols(&stack_common(&fragment(&pop, &a).unwrap().fragments)).unwrap();
        assert_eq!(m1.beta_mixed.coefficients, frag.coefficients);
        for r in [0.0, 0.1, 0.35, 0.5, 0.9, 1.0] {
            let m = estimate_mixed(&pop, &a, r).unwrap();
            assert!(m.identity_residual.unwrap() < MIXED_IDENTITY_TOL, "r = {r}");
        }
        assert!(estimate_mixed(&pop, &a, 1.5).is_err());
        let tiny = estimate_mixed(&pop, &a, 0.0001).unwrap();
        assert_eq!(tiny.n_fragmented_users, 0);
        assert!(!tiny.notes.is_empty());
    }

    #[test]
    fn csv_report_has_documented_header() {
        let pop = two_users([2.0, 3.0], [0.0, 1.0]);
        let rep = estimate_true(&pop, ModelForm::TrueCommon).unwrap();
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("term,estimate,se,ci_lo,ci_hi\nintercept,"));
    }

    proptest! {
        #[test]
        fn residuals_orthogonal_and_permutation_invariant(
            seed in 0u64..1000,
            rows in 6usize..40,
            shift in 0usize..40,
        ) {
            use rand::Rng;
            let mut rng = substream(seed, Substream::Noise);
            let x = DMatrix::from_fn(rows, 3, |_, c| if c == 0 { 1.0 } else { rng.random_range(-5.0..5.0) });
            let y = DVector::from_fn(rows, |_, _| rng.random_range(-10.0..10.0));
            let rep = ols(&design(x.clone(), y.clone())).unwrap();
            let beta = DVector::from_column_slice(&rep.coefficients);
            let grad = x.transpose() * (&y - &x * &beta);
            let scale = x.amax() * y.amax() * rows as f64;
            prop_assert!(grad.amax() < 1e-8 * scale.max(1.0));

            let perm: Vec<usize> = (0..rows).map(|r| (r + shift) % rows).collect();
            let xp = DMatrix::from_fn(rows, 3, |r, c| x[(perm[r], c)]);
            let yp = DVector::from_fn(rows, |r, _| y[perm[r]]);
            let rep2 = ols(&design(xp, yp)).unwrap();
            prop_assert_eq!(rep.coefficients, rep2.coefficients);
        }
    }
}

//! Closed-form conditional bias of the naive fragmented estimators.
//!
//! Everything here is conditional on the exposures. `Λ_j` is carried as its
//! diagonal, one probability per user and device.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::datagen::{Effects, Population};
use crate::error::{Error, Result};
use crate::estimators::ols;
use crate::fragmentation::{
    common_terms, device_terms, AssignmentMatrix, DesignMatrices, FragmentedDataset, ModelForm,
};
use crate::linalg::{spd_inverse, weighted_colsum, weighted_cross};

/// Where the `Λ` diagonals came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaSource {
    /// True simulated probabilities.
    Oracle,
    /// Given by the caller.
    Supplied,
    /// Device share of nonzero outcomes, constant across users.
    PlugIn,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasDecomposition {
    pub model_form: ModelForm,
    pub terms: Vec<String>,
    /// Slope block of the inverse Gram matrix, row major.
    pub vartheta: Vec<Vec<f64>>,
    pub delta1: Vec<f64>,
    pub delta2: Vec<f64>,
    pub delta3: Vec<f64>,
    #[serde(rename = "total")]
    pub total_bias: Vec<f64>,
    /// True slopes the bias is measured against.
    pub beta: Vec<f64>,
    /// Conditional mean of the fitted intercept (about `β0/J` when stacked).
    pub expected_intercept: f64,
    pub lambda_source: LambdaSource,
    #[serde(skip)]
    pub lambda_used: Vec<Vec<f64>>,
}

impl BiasDecomposition {
    pub fn vartheta_matrix(&self) -> DMatrix<f64> {
        to_matrix(&self.vartheta)
    }

    pub fn expected_slopes(&self) -> Vec<f64> {
        self.beta.iter().zip(&self.total_bias).map(|(b, d)| b + d).collect()
    }

    /// Intercept first, matching the estimator term order.
    pub fn expected_coefficients(&self) -> Vec<f64> {
        std::iter::once(self.expected_intercept).chain(self.expected_slopes()).collect()
    }

    fn assemble(
        model_form: ModelForm,
        terms: Vec<String>,
        vartheta: DMatrix<f64>,
        deltas: [DVector<f64>; 3],
        beta: Vec<f64>,
        expected_intercept: f64,
        lambdas: &[Vec<f64>],
    ) -> Self {
        let [d1, d2, d3] = deltas;
        let total = &vartheta * (&d1 + &d2 + &d3);
        BiasDecomposition {
            model_form,
            terms,
            vartheta: rows(&vartheta),
            delta1: d1.iter().copied().collect(),
            delta2: d2.iter().copied().collect(),
            delta3: d3.iter().copied().collect(),
            total_bias: total.iter().copied().collect(),
            beta,
            expected_intercept,
            lambda_source: LambdaSource::Supplied,
            lambda_used: lambdas.to_vec(),
        }
    }

    pub fn with_source(mut self, source: LambdaSource) -> Self {
        self.lambda_source = source;
        self
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn to_matrix(v: &[Vec<f64>]) -> DMatrix<f64> {
    let c = v.first().map_or(0, |r| r.len());
    DMatrix::from_fn(v.len(), c, |a, b| v[a][b])
}

fn check_shapes(xs: &[DMatrix<f64>]) -> Result<(usize, usize)> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Dimension("no device exposure matrices".into()))?;
    let (n, k) = first.shape();
    if n == 0 || k == 0 {
        return Err(Error::Dimension("empty exposure matrix".into()));
    }
    if xs.iter().any(|x| x.shape() != (n, k)) {
        return Err(Error::Dimension("device exposure matrices differ in shape".into()));
    }
    Ok((n, k))
}

fn check_lambdas(lambdas: &[Vec<f64>], j: usize, n: usize) -> Result<()> {
    if lambdas.len() != j || lambdas.iter().any(|l| l.len() != n) {
        return Err(Error::Dimension(format!("expected {j} lambda vectors of length {n}")));
    }
    for i in 0..n {
        let mut total = 0.0;
        for (d, l) in lambdas.iter().enumerate() {
            let v = l[i];
            if !(-1e-12..=1.0 + 1e-12).contains(&v) {
                return Err(Error::Invalid(format!("lambda for user {i} on device {} is {v}", d + 1)));
            }
            total += v;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!(
                "device probabilities for user {i} sum to {total}, not 1"
            )));
        }
    }
    Ok(())
}

fn check_beta(beta: &[f64], k: usize) -> Result<()> {
    if beta.len() != k {
        return Err(Error::Dimension(format!("slope vector has {} entries, expected {k}", beta.len())));
    }
    Ok(())
}

fn col(b: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(b.len(), 1, b)
}

fn as_vec(m: DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// `B22` for the common-effect stack: the inverse of the Schur complement
/// `Σ X_j'X_j − (Σ X_j'η)(Σ X_j'η)'/(J n)`.
pub fn vartheta_common(xs: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let (n, k) = check_shapes(xs)?;
    let j = xs.len();
    let mut gram = DMatrix::zeros(k, k);
    let mut a = DVector::zeros(k);
    for x in xs {
        gram += x.transpose() * x;
        a += x.row_sum().transpose();
    }
    let schur = gram - &a * a.transpose() / (j * n) as f64;
    spd_inverse(&schur, "common-effect Schur complement")
}

/// `B22` for the device-specific stack: blocks `X_j'X_j` on the diagonal,
/// corrected by the shared intercept.
pub fn vartheta_device(xs: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let (n, k) = check_shapes(xs)?;
    let j = xs.len();
    let mut schur = DMatrix::zeros(j * k, j * k);
    let mut a = DVector::zeros(j * k);
    for (d, x) in xs.iter().enumerate() {
        schur.view_mut((d * k, d * k), (k, k)).copy_from(&(x.transpose() * x));
        a.rows_mut(d * k, k).copy_from(&x.row_sum().transpose());
    }
    schur -= &a * a.transpose() / (j * n) as f64;
    spd_inverse(&schur, "device-specific Schur complement")
}

/// Intercept of the stacked fit: `β0/J − a'ϑD/(J n)` with `a = X̃'η` over the slope columns.
fn stacked_intercept(beta0: f64, a: &DVector<f64>, vartheta: &DMatrix<f64>, d: &DVector<f64>, j: usize, n: usize) -> f64 {
    beta0 / j as f64 - (a.transpose() * vartheta * d)[0] / (j * n) as f64
}

/// Two-device common-effect bias written out term by term.
pub fn bias_common(
    x1: &DMatrix<f64>,
    x2: &DMatrix<f64>,
    lambda: &[f64],
    beta0: f64,
    beta1: &[f64],
) -> Result<BiasDecomposition> {
    let xs = [x1.clone(), x2.clone()];
    let (n, k) = check_shapes(&xs)?;
    check_beta(beta1, k)?;
    let l2: Vec<f64> = lambda.iter().map(|l| 1.0 - l).collect();
    check_lambdas(&[lambda.to_vec(), l2.clone()], 2, n)?;
    let vartheta = vartheta_common(&xs)?;
    let b = col(beta1);

    let centred: Vec<f64> = lambda.iter().map(|l| l - 0.5).collect();
    let diff = x1 - x2;
    let d3 = weighted_colsum(&diff, &centred) * beta0;
    let d2 = as_vec((weighted_cross(x1, lambda, x2) + weighted_cross(x2, &l2, x1)) * &b);
    let d1 = -as_vec((weighted_cross(x1, &l2, x1) + weighted_cross(x2, lambda, x2)) * &b);

    let a = (x1.row_sum() + x2.row_sum()).transpose();
    let d = &d1 + &d2 + &d3;
    let intercept = stacked_intercept(beta0, &a, &vartheta, &d, 2, n);
    Ok(BiasDecomposition::assemble(
        ModelForm::CommonStacked,
        common_terms(k)[1..].to_vec(),
        vartheta,
        [d1, d2, d3],
        beta1.to_vec(),
        intercept,
        &[lambda.to_vec(), l2],
    ))
}

/// Common-effect bias for any number of devices.
pub fn bias_common_j(xs: &[DMatrix<f64>], lambdas: &[Vec<f64>], beta0: f64, beta1: &[f64]) -> Result<BiasDecomposition> {
    let (n, k) = check_shapes(xs)?;
    let j = xs.len();
    check_beta(beta1, k)?;
    check_lambdas(lambdas, j, n)?;
    let vartheta = vartheta_common(xs)?;
    let b = col(beta1);
    let mut d1 = DVector::zeros(k);
    let mut d2 = DVector::zeros(k);
    let mut d3 = DVector::zeros(k);
    let mut a = DVector::zeros(k);
    for (p, xp) in xs.iter().enumerate() {
        let lp = &lambdas[p];
        let shifted: Vec<f64> = lp.iter().map(|l| l - 1.0 / j as f64).collect();
        d3 += weighted_colsum(xp, &shifted) * beta0;
        let less_one: Vec<f64> = lp.iter().map(|l| l - 1.0).collect();
        d1 += as_vec(weighted_cross(xp, &less_one, xp) * &b);
        for (q, xq) in xs.iter().enumerate() {
            if q != p {
                d2 += as_vec(weighted_cross(xp, lp, xq) * &b);
            }
        }
        a += xp.row_sum().transpose();
    }
    let d = &d1 + &d2 + &d3;
    let intercept = stacked_intercept(beta0, &a, &vartheta, &d, j, n);
    Ok(BiasDecomposition::assemble(
        ModelForm::CommonStacked,
        common_terms(k)[1..].to_vec(),
        vartheta,
        [d1, d2, d3],
        beta1.to_vec(),
        intercept,
        lambdas,
    ))
}

/// Empirical means feeding the scalar two-device formula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentBundle {
    pub x1: f64,
    pub x2: f64,
    pub x1_sq: f64,
    pub x2_sq: f64,
    pub x1x2: f64,
    /// mean of `(λ − ½)(x1 − x2)`
    pub lambda_diff: f64,
    /// mean of `(1 − λ) x1²`
    pub one_minus_lambda_x1_sq: f64,
    /// mean of `λ x2²`
    pub lambda_x2_sq: f64,
}

impl MomentBundle {
    pub fn from_data(x1: &[f64], x2: &[f64], lambda: &[f64]) -> Result<Self> {
        let n = x1.len();
        if n == 0 || x2.len() != n || lambda.len() != n {
            return Err(Error::Dimension("moment inputs must be nonempty and equally long".into()));
        }
        let mean = |f: &dyn Fn(usize) -> f64| (0..n).map(f).sum::<f64>() / n as f64;
        Ok(MomentBundle {
            x1: mean(&|i| x1[i]),
            x2: mean(&|i| x2[i]),
            x1_sq: mean(&|i| x1[i] * x1[i]),
            x2_sq: mean(&|i| x2[i] * x2[i]),
            x1x2: mean(&|i| x1[i] * x2[i]),
            lambda_diff: mean(&|i| (lambda[i] - 0.5) * (x1[i] - x2[i])),
            one_minus_lambda_x1_sq: mean(&|i| (1.0 - lambda[i]) * x1[i] * x1[i]),
            lambda_x2_sq: mean(&|i| lambda[i] * x2[i] * x2[i]),
        })
    }

    /// Moments for a `λ` that does not vary across users.
    pub fn with_constant_lambda(x1: f64, x2: f64, x1_sq: f64, x2_sq: f64, x1x2: f64, lambda: f64) -> Self {
        MomentBundle {
            x1,
            x2,
            x1_sq,
            x2_sq,
            x1x2,
            lambda_diff: (lambda - 0.5) * (x1 - x2),
            one_minus_lambda_x1_sq: (1.0 - lambda) * x1_sq,
            lambda_x2_sq: lambda * x2_sq,
        }
    }
}

/// Scalar-exposure, two-device bias from empirical means.
pub fn bias_common_scalar(m: &MomentBundle, beta0: f64, beta1: f64) -> Result<f64> {
    let denom = m.x1_sq + m.x2_sq - 0.5 * (m.x1 + m.x2).powi(2);
    let scale = (m.x1_sq + m.x2_sq).abs().max(f64::MIN_POSITIVE);
    if !(denom > 1e-12 * scale) {
        return Err(Error::singular("scalar bias denominator (no exposure variation)", f64::INFINITY));
    }
    let num = m.lambda_diff * beta0 + (-m.one_minus_lambda_x1_sq + m.x1x2 - m.lambda_x2_sq) * beta1;
    Ok(num / denom)
}

/// Two-device device-specific stacked bias written out block by block.
pub fn bias_device_specific_stacked(
    x1: &DMatrix<f64>,
    x2: &DMatrix<f64>,
    lambda: &[f64],
    beta0: f64,
    beta1: &[f64],
    beta2: &[f64],
) -> Result<BiasDecomposition> {
    let xs = [x1.clone(), x2.clone()];
    let (n, k) = check_shapes(&xs)?;
    check_beta(beta1, k)?;
    check_beta(beta2, k)?;
    let l2: Vec<f64> = lambda.iter().map(|l| 1.0 - l).collect();
    check_lambdas(&[lambda.to_vec(), l2.clone()], 2, n)?;
    let vartheta = vartheta_device(&xs)?;
    let (b1, b2) = (col(beta1), col(beta2));
    let centred: Vec<f64> = lambda.iter().map(|l| l - 0.5).collect();

    let top3 = weighted_colsum(x1, &centred) * beta0;
    let top1 = -as_vec(weighted_cross(x1, &l2, x1) * &b1);
    let top2 = as_vec(weighted_cross(x1, lambda, x2) * &b2);
    let bottom3 = -weighted_colsum(x2, &centred) * beta0;
    let bottom2 = as_vec(weighted_cross(x2, &l2, x1) * &b1);
    let bottom1 = -as_vec(weighted_cross(x2, lambda, x2) * &b2);

    let stack = |a: DVector<f64>, b: DVector<f64>| DVector::from_iterator(2 * k, a.iter().chain(b.iter()).copied());
    let d1 = stack(top1, bottom1);
    let d2 = stack(top2, bottom2);
    let d3 = stack(top3, bottom3);
    let a = stack(x1.row_sum().transpose(), x2.row_sum().transpose());
    let d = &d1 + &d2 + &d3;
    let intercept = stacked_intercept(beta0, &a, &vartheta, &d, 2, n);
    Ok(BiasDecomposition::assemble(
        ModelForm::DeviceSpecificStacked,
        device_terms(k, 2)[1..].to_vec(),
        vartheta,
        [d1, d2, d3],
        beta1.iter().chain(beta2).copied().collect(),
        intercept,
        &[lambda.to_vec(), l2],
    ))
}

/// Two-device split-sample bias, one decomposition per device.
pub fn bias_device_specific_split(
    x1: &DMatrix<f64>,
    x2: &DMatrix<f64>,
    lambda: &[f64],
    beta0: f64,
    beta1: &[f64],
    beta2: &[f64],
) -> Result<Vec<BiasDecomposition>> {
    let l2: Vec<f64> = lambda.iter().map(|l| 1.0 - l).collect();
    bias_device_specific_j(
        &[x1.clone(), x2.clone()],
        &[lambda.to_vec(), l2],
        beta0,
        &[beta1.to_vec(), beta2.to_vec()],
        DeviceForm::Split,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeviceForm {
    Stacked,
    Split,
}

/// Device-specific bias for any number of devices. Stacked returns one
/// decomposition over all `J·k` slopes; split returns one per device.
///
/// Each split regression keeps its own intercept, so the per-device terms are
/// built from the centred exposures; the `β0` term vanishes whenever `Λ_j` is
/// constant across users.
pub fn bias_device_specific_j(
    xs: &[DMatrix<f64>],
    lambdas: &[Vec<f64>],
    beta0: f64,
    betas: &[Vec<f64>],
    form: DeviceForm,
) -> Result<Vec<BiasDecomposition>> {
    let (n, k) = check_shapes(xs)?;
    let j = xs.len();
    check_lambdas(lambdas, j, n)?;
    if betas.len() != j {
        return Err(Error::Dimension(format!("{} slope vectors for {j} devices", betas.len())));
    }
    for b in betas {
        check_beta(b, k)?;
    }
    let bcols: Vec<DMatrix<f64>> = betas.iter().map(|b| col(b)).collect();
    match form {
        DeviceForm::Stacked => {
            if j < 2 {
                return Err(Error::Invalid("device-specific stacking needs at least two devices".into()));
            }
            let vartheta = vartheta_device(xs)?;
            let mut d1 = DVector::zeros(j * k);
            let mut d2 = DVector::zeros(j * k);
            let mut d3 = DVector::zeros(j * k);
            let mut a = DVector::zeros(j * k);
            for (p, xp) in xs.iter().enumerate() {
                let lp = &lambdas[p];
                let shifted: Vec<f64> = lp.iter().map(|l| l - 1.0 / j as f64).collect();
                let less_one: Vec<f64> = lp.iter().map(|l| l - 1.0).collect();
                d3.rows_mut(p * k, k).copy_from(&(weighted_colsum(xp, &shifted) * beta0));
                d1.rows_mut(p * k, k).copy_from(&as_vec(weighted_cross(xp, &less_one, xp) * &bcols[p]));
                let mut cross = DVector::zeros(k);
                for (q, xq) in xs.iter().enumerate() {
                    if q != p {
                        cross += as_vec(weighted_cross(xp, lp, xq) * &bcols[q]);
                    }
                }
                d2.rows_mut(p * k, k).copy_from(&cross);
                a.rows_mut(p * k, k).copy_from(&xp.row_sum().transpose());
            }
            let d = &d1 + &d2 + &d3;
            let intercept = stacked_intercept(beta0, &a, &vartheta, &d, j, n);
            Ok(vec![BiasDecomposition::assemble(
                ModelForm::DeviceSpecificStacked,
                device_terms(k, j)[1..].to_vec(),
                vartheta,
                [d1, d2, d3],
                betas.concat(),
                intercept,
                lambdas,
            )])
        }
        DeviceForm::Split => {
            let mut mu = DVector::from_element(n, beta0);
            for (x, b) in xs.iter().zip(&bcols) {
                mu += as_vec(x * b);
            }
            let mut out = Vec::with_capacity(j);
            for (p, xp) in xs.iter().enumerate() {
                let lp = &lambdas[p];
                let means = xp.row_mean();
                let xc = DMatrix::from_fn(n, k, |i, c| xp[(i, c)] - means[c]);
                let vartheta = spd_inverse(&(xc.transpose() * &xc), &format!("device {} split design", p + 1))?;
                let less_one: Vec<f64> = lp.iter().map(|l| l - 1.0).collect();
                let d3 = weighted_colsum(&xc, lp) * beta0;
                let d1 = as_vec(weighted_cross(&xc, &less_one, xp) * &bcols[p]);
                let mut d2 = DVector::zeros(k);
                for (q, xq) in xs.iter().enumerate() {
                    if q != p {
                        d2 += as_vec(weighted_cross(&xc, lp, xq) * &bcols[q]);
                    }
                }
                let total = &vartheta * (&d1 + &d2 + &d3);
                let ybar = (0..n).map(|i| lp[i] * mu[i]).sum::<f64>() / n as f64;
                let slope = DVector::from_column_slice(&betas[p]) + total;
                let intercept = ybar - (means * slope)[0];
                out.push(BiasDecomposition::assemble(
                    ModelForm::DeviceSplit(p),
                    common_terms(k)[1..].to_vec(),
                    vartheta,
                    [d1, d2, d3],
                    betas[p].clone(),
                    intercept,
                    lambdas,
                ));
            }
            Ok(out)
        }
    }
}

/// Bias of the naive estimator for `form` on a simulated population, using
/// the true `Λ` and the generating coefficients.
pub fn predict_for_population(pop: &Population, form: ModelForm) -> Result<Vec<BiasDecomposition>> {
    let cfg = pop
        .config
        .as_ref()
        .ok_or_else(|| Error::Invalid("bias prediction needs the generating coefficients".into()))?;
    let j = pop.n_devices();
    let lambdas: Vec<Vec<f64>> = (0..j)
        .map(|d| pop.preference.device_column(d))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Invalid("population has no device probabilities".into()))?;
    predict(&pop.exposures, &lambdas, cfg.beta0, &cfg.effects, form)
        .map(|v| v.into_iter().map(|b| b.with_source(LambdaSource::Oracle)).collect())
}

/// Bias for linked fragments, with `Λ_j` replaced by the device outcome shares.
pub fn predict_plug_in(ds: &FragmentedDataset, beta0: f64, effects: &Effects, form: ModelForm) -> Result<Vec<BiasDecomposition>> {
    let panels = ds.user_panels()?;
    let n = panels.exposures[0].nrows();
    let lambdas: Vec<Vec<f64>> = ds.fragments.plug_in_lambda().iter().map(|l| vec![*l; n]).collect();
    predict(&panels.exposures, &lambdas, beta0, effects, form)
        .map(|v| v.into_iter().map(|b| b.with_source(LambdaSource::PlugIn)).collect())
}

/// Dispatch on model form. Common-effect forms need `Effects::Beta1`;
/// device-specific forms accept either (a common slope is repeated).
pub fn predict(
    xs: &[DMatrix<f64>],
    lambdas: &[Vec<f64>],
    beta0: f64,
    effects: &Effects,
    form: ModelForm,
) -> Result<Vec<BiasDecomposition>> {
    let j = xs.len();
    let per_device: Vec<Vec<f64>> = (0..j).map(|d| effects.for_device(d).to_vec()).collect();
    match form {
        ModelForm::CommonStacked => match effects {
            Effects::Beta1(b) => Ok(vec![bias_common_j(xs, lambdas, beta0, b)?]),
            Effects::BetaByDevice(_) => Err(Error::Invalid(
                "the common-effect bias needs a single slope vector".into(),
            )),
        },
        ModelForm::DeviceSpecificStacked => bias_device_specific_j(xs, lambdas, beta0, &per_device, DeviceForm::Stacked),
        ModelForm::DeviceSplit(_) => bias_device_specific_j(xs, lambdas, beta0, &per_device, DeviceForm::Split),
        other => Err(Error::Invalid(format!("no closed-form bias for {other}"))),
    }
}

/// Thresholds for the symmetric treatment condition checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct STCThresholds {
    /// Largest standardized gap in device means and in second moments.
    pub max_relative_gap: f64,
    pub max_abs_corr: f64,
    /// Largest |t| of the assignment-on-exposure slopes.
    pub max_dependence_t: f64,
}

impl Default for STCThresholds {
    fn default() -> Self {
        STCThresholds {
            max_relative_gap: 0.02,
            max_abs_corr: 0.02,
            max_dependence_t: 4.0,
        }
    }
}

impl STCThresholds {
    /// Defaults widened to about six sampling standard deviations, so that a
    /// finite sample of a symmetric design is not rejected on noise alone.
    pub fn for_sample_size(n: usize) -> Self {
        let d = STCThresholds::default();
        let noise = 6.0 / (n.max(1) as f64).sqrt();
        STCThresholds {
            max_relative_gap: d.max_relative_gap.max(noise),
            max_abs_corr: d.max_abs_corr.max(noise),
            ..d
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum STCVerdict {
    Satisfied,
    Violated,
    /// Nothing failed, but some condition could not be checked.
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct STCReport {
    /// max over device pairs and covariates of |mean gap| / pooled sd
    pub mean_gap: f64,
    pub second_moment_gap: f64,
    /// max |corr(x_j, x_j')| over distinct devices; needs user linkage
    pub cross_corr: Option<f64>,
    /// max |t| of the device-assignment regression on exposures
    pub lambda_exposure_dependence: Option<f64>,
    pub means_ok: bool,
    pub second_moments_ok: bool,
    pub independence_ok: Option<bool>,
    pub lambda_ok: Option<bool>,
    pub verdict: STCVerdict,
    pub thresholds: STCThresholds,
    pub notes: Vec<String>,
}

impl STCReport {
    pub fn failed_conditions(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !self.means_ok {
            out.push("equal exposure means");
        }
        if !self.second_moments_ok {
            out.push("equal second moments");
        }
        if self.independence_ok == Some(false) {
            out.push("independent exposures across devices");
        }
        if self.lambda_ok == Some(false) {
            out.push("device preference independent of exposure");
        }
        out
    }
}

fn mean_sd(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let m = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Pearson correlation; `None` when either side has no variation.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    let scale = (saa * sbb).sqrt();
    (scale > 0.0 && scale.is_finite()).then(|| sab / scale)
}

fn gap(columns: &[Vec<f64>]) -> f64 {
    let pooled = mean_sd(columns.iter().flatten().copied());
    let means: Vec<f64> = columns.iter().map(|c| mean_sd(c.iter().copied()).0).collect();
    let mut worst: f64 = 0.0;
    for a in 0..means.len() {
        for b in a + 1..means.len() {
            let d = (means[a] - means[b]).abs();
            let g = if pooled.1 > 0.0 { d / pooled.1 } else if d > 0.0 { f64::INFINITY } else { 0.0 };
            worst = worst.max(g);
        }
    }
    worst
}

fn moment_gaps(device_columns: &[Vec<Vec<f64>>]) -> (f64, f64) {
    // device_columns[d][c] holds covariate c on device d
    let k = device_columns[0].len();
    let mut mean_gap: f64 = 0.0;
    let mut sq_gap: f64 = 0.0;
    for c in 0..k {
        let firsts: Vec<Vec<f64>> = device_columns.iter().map(|d| d[c].clone()).collect();
        let squares: Vec<Vec<f64>> = firsts.iter().map(|v| v.iter().map(|x| x * x).collect()).collect();
        mean_gap = mean_gap.max(gap(&firsts));
        sq_gap = sq_gap.max(gap(&squares));
    }
    (mean_gap, sq_gap)
}

fn dependence_t(exposures: &[DMatrix<f64>], devices: &[usize], j: usize) -> Result<f64> {
    let n = devices.len();
    let k = exposures[0].ncols();
    let x = DMatrix::from_fn(n, 1 + j * k, |i, c| {
        if c == 0 {
            1.0
        } else {
            exposures[(c - 1) / k][(i, (c - 1) % k)]
        }
    });
    let mut worst: f64 = 0.0;
    for d in 0..j.saturating_sub(1) {
        let y = DVector::from_iterator(n, devices.iter().map(|v| if *v == d { 1.0 } else { 0.0 }));
        let design = DesignMatrices {
            form: ModelForm::TrueDeviceSpecific,
            y,
            x: x.clone(),
            terms: device_terms(k, j),
            n_devices: j,
            layout: None,
        };
        let rep = ols(&design)?;
        for (b, s) in rep.slopes().iter().zip(rep.slope_ses()) {
            let t = if *s > 0.0 { (b / s).abs() } else if *b == 0.0 { 0.0 } else { f64::INFINITY };
            worst = worst.max(t);
        }
    }
    Ok(worst)
}

fn finish(
    mean_gap: f64,
    second_moment_gap: f64,
    cross_corr: Option<f64>,
    dependence: Option<f64>,
    lambda_ok: Option<bool>,
    thresholds: STCThresholds,
    notes: Vec<String>,
) -> STCReport {
    let means_ok = mean_gap <= thresholds.max_relative_gap;
    let second_moments_ok = second_moment_gap <= thresholds.max_relative_gap;
    let independence_ok = cross_corr.map(|c| c <= thresholds.max_abs_corr);
    let lambda_ok = dependence.map(|t| t <= thresholds.max_dependence_t).or(lambda_ok);
    let flags = [Some(means_ok), Some(second_moments_ok), independence_ok, lambda_ok];
    let verdict = if flags.contains(&Some(false)) {
        STCVerdict::Violated
    } else if flags.contains(&None) {
        STCVerdict::Inconclusive
    } else {
        STCVerdict::Satisfied
    };
    STCReport {
        mean_gap,
        second_moment_gap,
        cross_corr,
        lambda_exposure_dependence: dependence,
        means_ok,
        second_moments_ok,
        independence_ok,
        lambda_ok,
        verdict,
        thresholds,
        notes,
    }
}

fn cross_correlation(exposures: &[DMatrix<f64>]) -> Option<f64> {
    let j = exposures.len();
    let k = exposures[0].ncols();
    let mut worst: f64 = 0.0;
    for a in 0..j {
        for b in a + 1..j {
            for ca in 0..k {
                for cb in 0..k {
                    let xa: Vec<f64> = exposures[a].column(ca).iter().copied().collect();
                    let xb: Vec<f64> = exposures[b].column(cb).iter().copied().collect();
                    // constant columns are trivially independent
                    if let Some(r) = pearson(&xa, &xb) {
                        worst = worst.max(r.abs());
                    }
                }
            }
        }
    }
    Some(worst)
}

/// STC checks on user-level data. With an assignment, condition (B) is tested by
/// regressing the device indicators on all exposures; without one it falls back
/// to how the preference model was specified.
pub fn check_stc(pop: &Population, a: Option<&AssignmentMatrix>, thresholds: STCThresholds) -> Result<STCReport> {
    let j = pop.n_devices();
    let columns: Vec<Vec<Vec<f64>>> = pop
        .exposures
        .iter()
        .map(|x| (0..x.ncols()).map(|c| x.column(c).iter().copied().collect()).collect())
        .collect();
    let (mean_gap, second_moment_gap) = moment_gaps(&columns);
    let cross = if j > 1 { cross_correlation(&pop.exposures) } else { Some(0.0) };
    let mut notes = Vec::new();
    let (dependence, by_spec) = match a {
        Some(a) if j > 1 => (Some(dependence_t(&pop.exposures, a.devices(), j)?), None),
        Some(_) => (Some(0.0), None),
        None => match pop.preference.lambda {
            Some(_) => {
                notes.push("condition (B) judged from the preference specification".into());
                (None, Some(!pop.preference.is_exposure_dependent()))
            }
            None => (None, None),
        },
    };
    Ok(finish(mean_gap, second_moment_gap, cross, dependence, by_spec, thresholds, notes))
}

/// STC checks on a fragment table. Cross-device independence and the joint
/// assignment regression need true-user links; without them only the per-device
/// moments and a per-device purchase-indicator regression are available.
pub fn check_stc_fragments(ds: &FragmentedDataset, thresholds: STCThresholds) -> Result<STCReport> {
    if ds.oracle.is_some() {
        let panels = ds.user_panels()?;
        let n = panels.outcomes[0].len();
        let j = ds.n_devices();
        let mut devices = Vec::with_capacity(n);
        let mut keep = Vec::with_capacity(n);
        for i in 0..n {
            let hits: Vec<usize> = (0..j).filter(|d| panels.outcomes[*d][i] != 0.0).collect();
            if hits.len() == 1 {
                devices.push(hits[0]);
                keep.push(i);
            }
        }
        let mut notes = Vec::new();
        if keep.len() < n {
            notes.push(format!("{} users with no identifiable purchase device left out of (B)", n - keep.len()));
        }
        let pop_like = Population {
            exposures: panels.exposures.clone(),
            outcomes: DVector::zeros(n),
            noise: None,
            preference: crate::datagen::PreferenceModel::external(),
            strata: None,
            config: None,
        };
        let mut rep = check_stc(&pop_like, None, thresholds)?;
        if keep.len() > 1 + j * ds.n_covariates() && j > 1 {
            let sub: Vec<DMatrix<f64>> = panels.exposures.iter().map(|x| x.select_rows(keep.iter())).collect();
            let t = dependence_t(&sub, &devices, j)?;
            rep = finish(
                rep.mean_gap,
                rep.second_moment_gap,
                rep.cross_corr,
                Some(t),
                None,
                thresholds,
                notes,
            );
        }
        return Ok(rep);
    }
    let f = &ds.fragments;
    let j = f.n_devices;
    let k = f.n_covariates();
    let columns: Vec<Vec<Vec<f64>>> = (0..j)
        .map(|d| {
            (0..k)
                .map(|c| (0..f.n_rows()).filter(|r| f.device[*r] == d).map(|r| f.x[(r, c)]).collect())
                .collect()
        })
        .collect();
    if columns.iter().any(|d| d[0].is_empty()) {
        return Err(Error::Invalid("some device has no fragments".into()));
    }
    let (mean_gap, second_moment_gap) = moment_gaps(&columns);
    let mut worst: f64 = 0.0;
    for d in 0..j {
        let rows: Vec<usize> = (0..f.n_rows()).filter(|r| f.device[*r] == d).collect();
        let design = DesignMatrices {
            form: ModelForm::DeviceSplit(d),
            y: DVector::from_iterator(rows.len(), rows.iter().map(|r| if f.y[*r] != 0.0 { 1.0 } else { 0.0 })),
            x: DMatrix::from_fn(rows.len(), k + 1, |i, c| if c == 0 { 1.0 } else { f.x[(rows[i], c - 1)] }),
            terms: common_terms(k),
            n_devices: j,
            layout: None,
        };
        if let Ok(rep) = ols(&design) {
            for (b, s) in rep.slopes().iter().zip(rep.slope_ses()) {
                if *s > 0.0 {
                    worst = worst.max((b / s).abs());
                }
            }
        }
    }
    let notes = vec!["no true-user links: cross-device independence not checked".to_string()];
    Ok(finish(mean_gap, second_moment_gap, None, Some(worst), None, thresholds, notes))
}

/// Device-by-device correlation of fragment outcomes with exposures for one covariate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationDiagnostic {
    pub covariate: usize,
    /// `matrix[j][l] = corr(Y_j, X_l)`; `None` where either side is constant.
    pub matrix: Vec<Vec<Option<f64>>>,
    /// Max deviation of each column, scaled to unit sum, from their average profile.
    pub proportionality: Option<f64>,
    /// Per column: diagonal entry exceeds the column sum.
    pub diagonal_exceeds_column_sum: Vec<Option<bool>>,
    pub flagged: bool,
}

impl CorrelationDiagnostic {
    pub fn from_matrix(covariate: usize, matrix: Vec<Vec<Option<f64>>>) -> Self {
        let j = matrix.len();
        let column = |l: usize| -> Option<Vec<f64>> { (0..j).map(|r| matrix[r][l]).collect() };
        let mut profiles = Vec::new();
        let mut diag = Vec::with_capacity(j);
        for l in 0..j {
            match column(l) {
                Some(c) => {
                    let sum: f64 = c.iter().sum();
                    diag.push(Some(c[l] > sum));
                    if sum.abs() > 1e-12 {
                        profiles.push(c.iter().map(|v| v / sum).collect::<Vec<f64>>());
                    }
                }
                None => diag.push(None),
            }
        }
        let proportionality = (!profiles.is_empty()).then(|| {
            let avg: Vec<f64> = (0..j)
                .map(|r| profiles.iter().map(|p| p[r]).sum::<f64>() / profiles.len() as f64)
                .collect();
            profiles
                .iter()
                .flat_map(|p| p.iter().zip(&avg).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max)
        });
        let flagged = diag.contains(&Some(true));
        CorrelationDiagnostic {
            covariate,
            matrix,
            proportionality,
            diagonal_exceeds_column_sum: diag,
            flagged,
        }
    }
}

/// One diagnostic per covariate, computed across true users.
pub fn correlation_diagnostic(ds: &FragmentedDataset) -> Result<Vec<CorrelationDiagnostic>> {
    let panels = ds.user_panels()?;
    let j = ds.n_devices();
    let k = ds.n_covariates();
    let ys: Vec<Vec<f64>> = panels.outcomes.iter().map(|y| y.iter().copied().collect()).collect();
    Ok((0..k)
        .map(|c| {
            let xs: Vec<Vec<f64>> = panels.exposures.iter().map(|x| x.column(c).iter().copied().collect()).collect();
            let matrix = (0..j)
                .map(|r| (0..j).map(|l| pearson(&ys[r], &xs[l])).collect())
                .collect();
            CorrelationDiagnostic::from_matrix(c, matrix)
        })
        .collect())
}

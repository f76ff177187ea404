//! Synthetic user-level populations.
//!
//! A population holds, per user, the exposures seen on each of `J` devices,
//! the total outcome `y = β0 + Σ_j x_j'β + ε` and the device-preference
//! probabilities that later decide which device records the outcome.
//! Exposures are generated per device; the user total is their sum.

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, DiscreteCDF, Normal, Poisson};

use crate::error::{Error, Result};
use crate::rng::{substream, Substream};

/// Slope specification: one vector shared by all devices, or one per device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effects {
    Beta1(Vec<f64>),
    BetaByDevice(Vec<Vec<f64>>),
}

impl Effects {
    pub fn is_common(&self) -> bool {
        matches!(self, Effects::Beta1(_))
    }

    /// Slope vector applied to device `j`.
    pub fn for_device(&self, j: usize) -> &[f64] {
        match self {
            Effects::Beta1(b) => b,
            Effects::BetaByDevice(bs) => &bs[j],
        }
    }

    /// `β0 + Σ_j X_j β_j` for every user, summed device by device in index order.
    pub fn linear_predictor(&self, beta0: f64, exposures: &[DMatrix<f64>]) -> DVector<f64> {
        let n = exposures.first().map_or(0, |x| x.nrows());
        let mut out = DVector::from_element(n, beta0);
        match self {
            Effects::Beta1(b) => {
                let total = total_exposure(exposures);
                for i in 0..n {
                    out[i] += dot_row(&total, i, b);
                }
            }
            Effects::BetaByDevice(bs) => {
                for i in 0..n {
                    let mut acc = 0.0;
                    for (x, b) in exposures.iter().zip(bs) {
                        acc += dot_row(x, i, b);
                    }
                    out[i] += acc;
                }
            }
        }
        out
    }
}

fn dot_row(x: &DMatrix<f64>, i: usize, b: &[f64]) -> f64 {
    b.iter().enumerate().map(|(c, bc)| x[(i, c)] * bc).sum()
}

/// `Σ_j X_j`, accumulated in device order.
pub fn total_exposure(exposures: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut it = exposures.iter();
    let mut total = it.next().cloned().unwrap_or_else(|| DMatrix::zeros(0, 0));
    for x in it {
        total += x;
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ExposureSpec {
    /// Poisson counts; `means[j][c]` is the mean of covariate `c` on device `j`.
    Poisson {
        means: Vec<Vec<f64>>,
        #[serde(default)]
        rho: f64,
    },
    /// Log-normal with the given mean and variance, rounded to the nearest integer.
    LognormalRounded {
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
        #[serde(default)]
        rho: f64,
    },
    /// Verbatim exposures, `matrices[j][i][c]`.
    FixedMatrix { matrices: Vec<Vec<Vec<f64>>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PreferenceSpec {
    /// Every user purchases on device `j` with probability `lambda[j]`.
    Constant { lambda: Vec<f64> },
    /// Multinomial logit in the device exposures: the logit of device `j` is
    /// `gamma0[j] + gamma1'x_j`, with the last device as baseline (`gamma0`
    /// has `J - 1` entries). For two devices this is
    /// `λ = sigmoid(γ0 + γ1'(x_1 - x_2))`.
    Logistic { gamma0: Vec<f64>, gamma1: Vec<f64> },
    /// Per-user probability vectors drawn from a Dirichlet distribution.
    Dirichlet { concentration: Vec<f64> },
    /// Loaded data; the true probabilities are unknown.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n_users: usize,
    pub n_devices: usize,
    pub n_covariates: usize,
    pub beta0: f64,
    #[serde(flatten)]
    pub effects: Effects,
    pub exposure: ExposureSpec,
    #[serde(default)]
    pub noise_sigma: f64,
    pub preference: PreferenceSpec,
    #[serde(default)]
    pub seed: u64,
}

fn finite(field: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, "must be finite"))
    }
}

fn check_grid(field: &str, grid: &[Vec<f64>], j: usize, k: usize) -> Result<()> {
    if grid.len() != j || grid.iter().any(|r| r.len() != k) {
        return Err(Error::config(field, format!("expected {j} rows of {k} values")));
    }
    for v in grid.iter().flatten() {
        finite(field, *v)?;
    }
    Ok(())
}

fn check_rho(rho: f64, j: usize) -> Result<()> {
    if !rho.is_finite() || rho.abs() > 1.0 {
        return Err(Error::config("exposure.rho", "must lie in [-1, 1]"));
    }
    // equicorrelation matrix is PSD only down to -1/(J-1)
    if rho < -1.0 / (j as f64 - 1.0) - 1e-12 {
        return Err(Error::config(
            "exposure.rho",
            format!("equicorrelation below -1/(J-1) is not attainable with J = {j}"),
        ));
    }
    Ok(())
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        let (n, j, k) = (self.n_users, self.n_devices, self.n_covariates);
        if n == 0 {
            return Err(Error::config("n_users", "must be positive"));
        }
        if j < 2 {
            return Err(Error::config("n_devices", "must be at least 2"));
        }
        if k == 0 {
            return Err(Error::config("n_covariates", "must be at least 1"));
        }
        finite("beta0", self.beta0)?;
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::config("noise_sigma", "must be a nonnegative real"));
        }
        match &self.effects {
            Effects::Beta1(b) => {
                if b.len() != k {
                    return Err(Error::config("beta1", format!("expected {k} values")));
                }
                for v in b {
                    finite("beta1", *v)?;
                }
            }
            Effects::BetaByDevice(bs) => check_grid("beta_by_device", bs, j, k)?,
        }
        match &self.exposure {
            ExposureSpec::Poisson { means, rho } => {
                check_grid("exposure.means", means, j, k)?;
                if means.iter().flatten().any(|m| *m < 0.0) {
                    return Err(Error::config("exposure.means", "Poisson means must be nonnegative"));
                }
                check_rho(*rho, j)?;
            }
            ExposureSpec::LognormalRounded { means, variances, rho } => {
                check_grid("exposure.means", means, j, k)?;
                check_grid("exposure.variances", variances, j, k)?;
                if means.iter().flatten().any(|m| *m <= 0.0) {
                    return Err(Error::config("exposure.means", "log-normal means must be positive"));
                }
                if variances.iter().flatten().any(|v| *v < 0.0) {
                    return Err(Error::config("exposure.variances", "variances must be nonnegative"));
                }
                check_rho(*rho, j)?;
            }
            ExposureSpec::FixedMatrix { matrices } => {
                if matrices.len() != j {
                    return Err(Error::config("exposure.matrices", format!("expected {j} device matrices")));
                }
                for m in matrices {
                    check_grid("exposure.matrices", m, n, k)?;
                }
            }
        }
        validate_preference(&self.preference, j, k)
    }
}

fn validate_preference(p: &PreferenceSpec, j: usize, k: usize) -> Result<()> {
    match p {
        PreferenceSpec::Constant { lambda } => {
            if lambda.len() != j {
                return Err(Error::config("preference.lambda", format!("expected {j} probabilities")));
            }
            if lambda.iter().any(|l| !l.is_finite() || *l < 0.0 || *l > 1.0) {
                return Err(Error::config("preference.lambda", "entries must lie in [0, 1]"));
            }
            if (lambda.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::config("preference.lambda", "must sum to 1"));
            }
        }
        PreferenceSpec::Logistic { gamma0, gamma1 } => {
            if gamma0.len() != j - 1 {
                return Err(Error::config("preference.gamma0", format!("expected {} offsets", j - 1)));
            }
            if gamma1.len() != k {
                return Err(Error::config("preference.gamma1", format!("expected {k} values")));
            }
            for v in gamma0.iter().chain(gamma1) {
                finite("preference.gamma", *v)?;
            }
        }
        PreferenceSpec::Dirichlet { concentration } => {
            if concentration.len() != j {
                return Err(Error::config("preference.concentration", format!("expected {j} values")));
            }
            if concentration.iter().any(|a| !a.is_finite() || *a <= 0.0) {
                return Err(Error::config("preference.concentration", "must be positive"));
            }
        }
        PreferenceSpec::External => {
            return Err(Error::config("preference", "external preferences cannot be simulated"));
        }
    }
    Ok(())
}

/// Device-preference model with the per-user probabilities it induces.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceModel {
    pub spec: PreferenceSpec,
    /// `n_users × J`; row `i` is user `i`'s purchase-device distribution.
    /// `None` for external data.
    pub lambda: Option<DMatrix<f64>>,
}

impl PreferenceModel {
    pub fn external() -> Self {
        PreferenceModel {
            spec: PreferenceSpec::External,
            lambda: None,
        }
    }

    /// Diagonal of `Λ_j`, i.e. column `j` of the probability table.
    pub fn device_column(&self, j: usize) -> Option<Vec<f64>> {
        self.lambda.as_ref().map(|l| l.column(j).iter().copied().collect())
    }

    pub fn is_exposure_dependent(&self) -> bool {
        matches!(self.spec, PreferenceSpec::Logistic { .. })
    }
}

/// Softmax preference for one user: logits `gamma0[j] + gamma1'x_j`, last device at offset 0.
pub fn logistic_probabilities(gamma0: &[f64], gamma1: &[f64], device_rows: &[Vec<f64>]) -> Vec<f64> {
    let logits: Vec<f64> = device_rows
        .iter()
        .enumerate()
        .map(|(j, x)| {
            let offset = gamma0.get(j).copied().unwrap_or(0.0);
            offset + x.iter().zip(gamma1).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// Categorical demographic columns attached to users.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Strata {
    pub names: Vec<String>,
    /// One column per variable, `n_users` long.
    pub columns: Vec<Vec<i64>>,
}

impl Strata {
    pub fn user_key(&self, i: usize) -> Vec<i64> {
        self.columns.iter().map(|c| c[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    /// One `n_users × k` matrix per device.
    pub exposures: Vec<DMatrix<f64>>,
    pub outcomes: DVector<f64>,
    /// Realised noise; unknown for loaded data.
    pub noise: Option<DVector<f64>>,
    pub preference: PreferenceModel,
    pub strata: Option<Strata>,
    /// Generating configuration; `None` for loaded data.
    pub config: Option<DgpConfig>,
}

impl Population {
    pub fn n_users(&self) -> usize {
        self.outcomes.len()
    }

    pub fn n_devices(&self) -> usize {
        self.exposures.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.exposures.first().map_or(0, |x| x.ncols())
    }

    pub fn total_exposure(&self) -> DMatrix<f64> {
        total_exposure(&self.exposures)
    }

    /// Seed used for downstream substreams (0 for loaded data).
    pub fn seed(&self) -> u64 {
        self.config.as_ref().map_or(0, |c| c.seed)
    }

    /// Same exposures and preferences with fresh noise and outcomes.
    pub fn redraw_noise(&self, rng: &mut ChaCha8Rng) -> Result<Population> {
        let cfg = self
            .config
            .as_ref()
            .ok_or_else(|| Error::Invalid("cannot redraw noise without a generating configuration".into()))?;
        let noise = draw_noise(self.n_users(), cfg.noise_sigma, rng);
        let outcomes = cfg.effects.linear_predictor(cfg.beta0, &self.exposures) + &noise;
        Ok(Population {
            exposures: self.exposures.clone(),
            outcomes,
            noise: Some(noise),
            preference: self.preference.clone(),
            strata: self.strata.clone(),
            config: self.config.clone(),
        })
    }
}

fn draw_noise(n: usize, sigma: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_iterator(
        n,
        (0..n).map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            if sigma == 0.0 {
                0.0
            } else {
                sigma * z
            }
        }),
    )
}

/// Poisson quantile by forward accumulation of the pmf.
fn poisson_quantile(mu: f64, u: f64) -> f64 {
    if mu <= 0.0 {
        return 0.0;
    }
    if mu > 600.0 {
        let dist = Poisson::new(mu).expect("validated mean");
        return dist.inverse_cdf(u) as f64;
    }
    let cap = (mu + 40.0 * mu.sqrt() + 50.0) as u64;
    let mut p = (-mu).exp();
    let mut cdf = p;
    let mut k = 0u64;
    while cdf < u && k < cap {
        k += 1;
        p *= mu / k as f64;
        cdf += p;
    }
    k as f64
}

/// Lower Cholesky factor of the `J × J` equicorrelation matrix.
fn equicorrelation_factor(j: usize, rho: f64) -> DMatrix<f64> {
    if rho == 0.0 {
        return DMatrix::identity(j, j);
    }
    if rho >= 1.0 {
        // rank one: every device shares the first draw
        let mut l = DMatrix::zeros(j, j);
        for a in 0..j {
            l[(a, 0)] = 1.0;
        }
        return l;
    }
    let corr = DMatrix::from_fn(j, j, |a, b| if a == b { 1.0 } else { rho });
    match corr.clone().cholesky() {
        Some(c) => c.l(),
        None => {
            // boundary rho = -1/(J-1): fall back to the symmetric square root
            let eig = corr.symmetric_eigen();
            let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
            &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
        }
    }
}

fn generate_exposures(cfg: &DgpConfig) -> Vec<DMatrix<f64>> {
    let (n, j, k) = (cfg.n_users, cfg.n_devices, cfg.n_covariates);
    match &cfg.exposure {
        ExposureSpec::FixedMatrix { matrices } => matrices
            .iter()
            .map(|m| DMatrix::from_fn(n, k, |i, c| m[i][c]))
            .collect(),
        ExposureSpec::Poisson { rho, .. } | ExposureSpec::LognormalRounded { rho, .. } => {
            let factor = equicorrelation_factor(j, *rho);
            let std_normal = Normal::standard();
            let mut rng = substream(cfg.seed, Substream::Exposure);
            let mut out = vec![DMatrix::zeros(n, k); j];
            let mut e = DVector::zeros(j);
            for i in 0..n {
                for c in 0..k {
                    for v in e.iter_mut() {
                        *v = rng.sample(StandardNormal);
                    }
                    let z = &factor * &e;
                    for d in 0..j {
                        out[d][(i, c)] = match &cfg.exposure {
                            ExposureSpec::Poisson { means, .. } => {
                                poisson_quantile(means[d][c], std_normal.cdf(z[d]))
                            }
                            ExposureSpec::LognormalRounded { means, variances, .. } => {
                                let (m, v) = (means[d][c], variances[d][c]);
                                let s2 = (1.0 + v / (m * m)).ln();
                                let mu = m.ln() - 0.5 * s2;
                                (mu + s2.sqrt() * z[d]).exp().round()
                            }
                            ExposureSpec::FixedMatrix { .. } => unreachable!(),
                        };
                    }
                }
            }
            out
        }
    }
}

fn device_rows(exposures: &[DMatrix<f64>], i: usize) -> Vec<Vec<f64>> {
    exposures
        .iter()
        .map(|x| x.row(i).iter().copied().collect())
        .collect()
}

fn generate_preference(cfg: &DgpConfig, exposures: &[DMatrix<f64>]) -> Result<PreferenceModel> {
    let (n, j) = (cfg.n_users, cfg.n_devices);
    let lambda = match &cfg.preference {
        PreferenceSpec::Constant { lambda } => DMatrix::from_fn(n, j, |_, d| lambda[d]),
        PreferenceSpec::Logistic { gamma0, gamma1 } => {
            let mut l = DMatrix::zeros(n, j);
            for i in 0..n {
                let p = logistic_probabilities(gamma0, gamma1, &device_rows(exposures, i));
                for d in 0..j {
                    l[(i, d)] = p[d];
                }
            }
            l
        }
        PreferenceSpec::Dirichlet { concentration } => {
            let mut rng = substream(cfg.seed, Substream::Preference);
            let gammas = concentration
                .iter()
                .map(|a| Gamma::new(*a, 1.0))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::config("preference.concentration", e.to_string()))?;
            let mut l = DMatrix::zeros(n, j);
            for i in 0..n {
                let draws: Vec<f64> = gammas.iter().map(|g| g.sample(&mut rng)).collect();
                let z: f64 = draws.iter().sum();
                for d in 0..j {
                    l[(i, d)] = if z > 0.0 { draws[d] / z } else { 1.0 / j as f64 };
                }
            }
            l
        }
        PreferenceSpec::External => unreachable!("rejected by validation"),
    };
    Ok(PreferenceModel {
        spec: cfg.preference.clone(),
        lambda: Some(lambda),
    })
}

/// Draw a population from `config`. Identical configurations give identical populations.
pub fn generate_population(config: &DgpConfig) -> Result<Population> {
    config.validate()?;
    let exposures = generate_exposures(config);
    let preference = generate_preference(config, &exposures)?;
    let mut noise_rng = substream(config.seed, Substream::Noise);
    let noise = draw_noise(config.n_users, config.noise_sigma, &mut noise_rng);
    let outcomes = config.effects.linear_predictor(config.beta0, &exposures) + &noise;
    Ok(Population {
        exposures,
        outcomes,
        noise: Some(noise),
        preference,
        strata: None,
        config: Some(config.clone()),
    })
}

/// Levels of one stratum variable: `1..=n` for an integer, or an inclusive range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StrataLevels {
    Cardinality(u32),
    Range([i64; 2]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrataVariable {
    pub name: String,
    pub levels: StrataLevels,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StrataSpec {
    pub variables: Vec<StrataVariable>,
    /// Defaults to the population's seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl StrataSpec {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for v in &self.variables {
            let field = format!("strata.{}", v.name);
            if v.name.is_empty() || v.name.contains(',') {
                return Err(Error::config(field, "variable names must be nonempty and comma free"));
            }
            if !seen.insert(v.name.as_str()) {
                return Err(Error::config(field, "duplicate variable"));
            }
            match v.levels {
                StrataLevels::Cardinality(0) => {
                    return Err(Error::config(field, "cardinality must be positive"))
                }
                StrataLevels::Range([lo, hi]) if hi < lo => {
                    return Err(Error::config(field, "empty range"))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Give every user one uniformly drawn level per stratum variable.
pub fn attach_strata(pop: &Population, spec: &StrataSpec) -> Result<Population> {
    spec.validate()?;
    let mut out = pop.clone();
    if spec.variables.is_empty() {
        return Ok(out);
    }
    let mut strata = out.strata.take().unwrap_or_default();
    for v in &spec.variables {
        if strata.names.iter().any(|n| n == &v.name) {
            return Err(Error::config(format!("strata.{}", v.name), "variable already attached"));
        }
    }
    let mut rng = substream(spec.seed.unwrap_or_else(|| pop.seed()), Substream::Strata);
    let n = pop.n_users();
    let mut new_cols: Vec<Vec<i64>> = vec![Vec::with_capacity(n); spec.variables.len()];
    for _ in 0..n {
        for (col, v) in new_cols.iter_mut().zip(&spec.variables) {
            let value = match v.levels {
                StrataLevels::Cardinality(card) => rng.random_range(1..=card as i64),
                StrataLevels::Range([lo, hi]) => rng.random_range(lo..=hi),
            };
            col.push(value);
        }
    }
    for (v, col) in spec.variables.iter().zip(new_cols) {
        strata.names.push(v.name.clone());
        strata.columns.push(col);
    }
    out.strata = Some(strata);
    Ok(out)
}

/// Write the user-level CSV: `user_id,y,x{c}_d{j}...,s_<name>...`.
pub fn write_population_csv<W: Write>(pop: &Population, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let (j, k) = (pop.n_devices(), pop.n_covariates());
    let mut header = vec!["user_id".to_string(), "y".to_string()];
    for d in 1..=j {
        for c in 1..=k {
            header.push(format!("x{c}_d{d}"));
        }
    }
    if let Some(s) = &pop.strata {
        header.extend(s.names.iter().map(|n| format!("s_{n}")));
    }
    w.write_record(&header)?;
    for i in 0..pop.n_users() {
        let mut rec = vec![(i + 1).to_string(), pop.outcomes[i].to_string()];
        for x in &pop.exposures {
            for c in 0..k {
                rec.push(x[(i, c)].to_string());
            }
        }
        if let Some(s) = &pop.strata {
            rec.extend(s.columns.iter().map(|col| col[i].to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_exposure_column(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix('x')?;
    let (c, d) = rest.split_once("_d")?;
    let c: usize = c.parse().ok()?;
    let d: usize = d.parse().ok()?;
    (c >= 1 && d >= 1).then_some((c, d))
}

pub(crate) fn parse_f64(row: usize, column: &str, cell: &str) -> Result<f64> {
    let v: f64 = cell
        .trim()
        .parse()
        .map_err(|_| Error::parse(row, format!("column {column}: non-numeric value {cell:?}")))?;
    if !v.is_finite() {
        return Err(Error::parse(row, format!("column {column}: non-finite value")));
    }
    Ok(v)
}

pub(crate) fn parse_i64(row: usize, column: &str, cell: &str) -> Result<i64> {
    cell.trim()
        .parse()
        .map_err(|_| Error::parse(row, format!("column {column}: expected an integer, got {cell:?}")))
}

/// Read a user-level CSV. Rows are numbered by file line (header is line 1).
pub fn read_population_csv<R: Read>(reader: R) -> Result<Population> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::parse(1, e.to_string()))?.clone();
    let mut user_col = None;
    let mut y_col = None;
    let mut x_cols: HashMap<(usize, usize), usize> = HashMap::new();
    let mut strata_cols: Vec<(String, usize)> = Vec::new();
    for (idx, name) in header.iter().enumerate() {
        if name == "user_id" {
            user_col = Some(idx);
        } else if name == "y" {
            y_col = Some(idx);
        } else if let Some(s) = name.strip_prefix("s_") {
            if s.is_empty() || strata_cols.iter().any(|(n, _)| n == s) {
                return Err(Error::parse(1, format!("bad strata column {name:?}")));
            }
            strata_cols.push((s.to_string(), idx));
        } else if let Some(cd) = parse_exposure_column(name) {
            if x_cols.insert(cd, idx).is_some() {
                return Err(Error::parse(1, format!("duplicate column {name:?}")));
            }
        } else {
            return Err(Error::parse(1, format!("unexpected column {name:?}")));
        }
    }
    user_col.ok_or_else(|| Error::parse(1, "missing column user_id"))?;
    let y_col = y_col.ok_or_else(|| Error::parse(1, "missing column y"))?;
    if x_cols.is_empty() {
        return Err(Error::parse(1, "missing exposure columns x{c}_d{j}"));
    }
    let k = x_cols.keys().map(|(c, _)| *c).max().unwrap_or(0);
    let j = x_cols.keys().map(|(_, d)| *d).max().unwrap_or(0);
    if k * j != x_cols.len() {
        for d in 1..=j {
            for c in 1..=k {
                if !x_cols.contains_key(&(c, d)) {
                    return Err(Error::parse(1, format!("missing column x{c}_d{d}")));
                }
            }
        }
    }
    let width = header.len();
    let mut ys = Vec::new();
    let mut xs: Vec<Vec<f64>> = vec![Vec::new(); j];
    let mut strata_vals: Vec<Vec<i64>> = vec![Vec::new(); strata_cols.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != width {
            return Err(Error::parse(
                line,
                format!("expected {width} fields, found {}", rec.len()),
            ));
        }
        ys.push(parse_f64(line, "y", &rec[y_col])?);
        for d in 1..=j {
            for c in 1..=k {
                let idx = x_cols[&(c, d)];
                let v = parse_f64(line, &header[idx], &rec[idx])?;
                xs[d - 1].push(v);
            }
        }
        for (vals, (name, idx)) in strata_vals.iter_mut().zip(&strata_cols) {
            vals.push(parse_i64(line, &format!("s_{name}"), &rec[*idx])?);
        }
    }
    if ys.is_empty() {
        return Err(Error::parse(2, "no rows"));
    }
    let n = ys.len();
    let exposures = xs
        .into_iter()
        .map(|v| DMatrix::from_row_slice(n, k, &v))
        .collect();
    let strata = (!strata_cols.is_empty()).then(|| Strata {
        names: strata_cols.into_iter().map(|(n, _)| n).collect(),
        columns: strata_vals,
    });
    Ok(Population {
        exposures,
        outcomes: DVector::from_vec(ys),
        noise: None,
        preference: PreferenceModel::external(),
        strata,
        config: None,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn poisson_config(seed: u64) -> DgpConfig {
        DgpConfig {
            n_users: 500,
            n_devices: 2,
            n_covariates: 1,
            beta0: 1.0,
            effects: Effects::Beta1(vec![0.5]),
            exposure: ExposureSpec::Poisson {
                means: vec![vec![3.0], vec![1.0]],
                rho: 0.0,
            },
            noise_sigma: 0.0,
            preference: PreferenceSpec::Constant { lambda: vec![0.5, 0.5] },
            seed,
        }
    }

    #[test]
    fn two_user_fixed_matrix_gives_flat_outcomes() {
        let cfg = DgpConfig {
            n_users: 2,
            n_devices: 2,
            n_covariates: 1,
            beta0: 1.0,
            effects: Effects::Beta1(vec![0.0]),
            exposure: ExposureSpec::FixedMatrix {
                matrices: vec![vec![vec![2.0], vec![3.0]], vec![vec![0.0], vec![1.0]]],
            },
            noise_sigma: 0.0,
            preference: PreferenceSpec::Constant { lambda: vec![1.0, 0.0] },
            seed: 0,
        };
        let pop = generate_population(&cfg).unwrap();
        assert_eq!(pop.outcomes.as_slice(), &[1.0, 1.0]);
        assert_eq!(pop.total_exposure().as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn null_model_gives_zero_outcomes() {
        let mut cfg = poisson_config(3);
        cfg.beta0 = 0.0;
        cfg.effects = Effects::Beta1(vec![0.0]);
        let pop = generate_population(&cfg).unwrap();
        assert!(pop.outcomes.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn poisson_seed7_outcome_recomputes_by_hand() {
        let pop = generate_population(&poisson_config(7)).unwrap();
        for i in 0..pop.n_users() {
            let by_hand = 1.0 + 0.5 * (pop.exposures[0][(i, 0)] + pop.exposures[1][(i, 0)]);
            assert_eq!(pop.outcomes[i], by_hand);
        }
    }

    #[test]
    fn seed_determinism() {
        let a = generate_population(&poisson_config(11)).unwrap();
        let b = generate_population(&poisson_config(11)).unwrap();
        let c = generate_population(&poisson_config(12)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.exposures, c.exposures);
    }

    #[test]
    fn poisson_means_converge() {
        let mut cfg = poisson_config(5);
        cfg.n_users = 20_000;
        let pop = generate_population(&cfg).unwrap();
        for (d, mu) in [3.0, 1.0].iter().enumerate() {
            let mean = pop.exposures[d].column(0).mean();
            assert!((mean - mu).abs() < 4.0 * (mu / 20_000.0_f64).sqrt(), "device {d}: {mean}");
        }
    }

    #[test]
    fn copula_correlation_has_requested_sign() {
        let mut cfg = poisson_config(9);
        cfg.n_users = 20_000;
        cfg.exposure = ExposureSpec::Poisson {
            means: vec![vec![4.0], vec![4.0]],
            rho: 0.6,
        };
        let pop = generate_population(&cfg).unwrap();
        let a = pop.exposures[0].column(0).into_owned();
        let b = pop.exposures[1].column(0).into_owned();
        let (ma, mb) = (a.mean(), b.mean());
        let cov = a.iter().zip(b.iter()).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>();
        let corr = cov / (a.variance().sqrt() * b.variance().sqrt() * 20_000.0);
        assert!(corr > 0.5 && corr < 0.65, "corr {corr}");
    }

    #[test]
    fn logistic_preference_matches_sigmoid() {
        let mut cfg = poisson_config(2);
        cfg.preference = PreferenceSpec::Logistic {
            gamma0: vec![-0.3],
            gamma1: vec![0.7],
        };
        let pop = generate_population(&cfg).unwrap();
        let lam = pop.preference.lambda.as_ref().unwrap();
        for i in 0..pop.n_users() {
            let gap = pop.exposures[0][(i, 0)] - pop.exposures[1][(i, 0)];
            let sig = 1.0 / (1.0 + (-(-0.3 + 0.7 * gap)).exp());
            assert!((lam[(i, 0)] - sig).abs() < 1e-12);
            assert!((lam[(i, 0)] + lam[(i, 1)] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dirichlet_rows_on_simplex() {
        let mut cfg = poisson_config(2);
        cfg.n_devices = 3;
        cfg.exposure = ExposureSpec::Poisson {
            means: vec![vec![1.0]; 3],
            rho: 0.0,
        };
        cfg.preference = PreferenceSpec::Dirichlet {
            concentration: vec![0.5, 1.0, 2.0],
        };
        let pop = generate_population(&cfg).unwrap();
        let lam = pop.preference.lambda.unwrap();
        for row in lam.row_iter() {
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn config_errors_name_the_field() {
        let mut cfg = poisson_config(1);
        cfg.exposure = ExposureSpec::LognormalRounded {
            means: vec![vec![1.0], vec![1.0]],
            variances: vec![vec![-1.0], vec![1.0]],
            rho: 0.0,
        };
        match generate_population(&cfg) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "exposure.variances"),
            other => panic!("unexpected {other:?}"),
        }
        let mut cfg = poisson_config(1);
        cfg.n_devices = 1;
        assert!(matches!(generate_population(&cfg), Err(Error::Config { .. })));
        let mut cfg = poisson_config(1);
        cfg.exposure = ExposureSpec::Poisson {
            means: vec![vec![1.0], vec![1.0]],
            rho: 1.5,
        };
        assert!(matches!(generate_population(&cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn config_json_selects_model_form() {
        let json = r#"{"n_users":3,"n_devices":2,"n_covariates":1,"beta0":0.0,
            "beta_by_device":[[1.0],[2.0]],
            "exposure":{"family":"poisson","means":[[1.0],[1.0]]},
            "preference":{"kind":"constant","lambda":[0.5,0.5]}}"#;
        let cfg: DgpConfig = serde_json::from_str(json).unwrap();
        assert!(!cfg.effects.is_common());
        cfg.validate().unwrap();
        let back: DgpConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn strata_uniform_and_in_range() {
        let mut cfg = poisson_config(4);
        cfg.n_users = 1000;
        let pop = generate_population(&cfg).unwrap();
        let spec = StrataSpec {
            variables: vec![
                StrataVariable { name: "msa".into(), levels: StrataLevels::Cardinality(48) },
                StrataVariable { name: "income".into(), levels: StrataLevels::Cardinality(10) },
                StrataVariable { name: "age".into(), levels: StrataLevels::Range([18, 82]) },
            ],
            seed: None,
        };
        let with = attach_strata(&pop, &spec).unwrap();
        let s = with.strata.as_ref().unwrap();
        assert_eq!(s.columns[0].len(), 1000);
        assert!(s.columns[0].iter().all(|v| (1..=48).contains(v)));
        assert!(s.columns[1].iter().all(|v| (1..=10).contains(v)));
        assert!(s.columns[2].iter().all(|v| (18..=82).contains(v)));
        assert_eq!(attach_strata(&pop, &spec).unwrap(), with);
    }

    #[test]
    fn strata_edge_cases() {
        let pop = generate_population(&poisson_config(4)).unwrap();
        assert_eq!(attach_strata(&pop, &StrataSpec::default()).unwrap(), pop);
        let one = StrataSpec {
            variables: vec![StrataVariable { name: "g".into(), levels: StrataLevels::Cardinality(1) }],
            seed: None,
        };
        let s = attach_strata(&pop, &one).unwrap().strata.unwrap();
        assert!(s.columns[0].iter().all(|v| *v == 1));
        let zero = StrataSpec {
            variables: vec![StrataVariable { name: "g".into(), levels: StrataLevels::Cardinality(0) }],
            seed: None,
        };
        assert!(matches!(attach_strata(&pop, &zero), Err(Error::Config { .. })));
    }

    #[test]
    fn csv_two_users_and_errors() {
        let text = "user_id,y,x1_d1,x1_d2\n1,1,2,0\n2,1,3,1\n";
        let pop = read_population_csv(text.as_bytes()).unwrap();
        assert_eq!((pop.n_users(), pop.n_devices(), pop.n_covariates()), (2, 2, 1));
        assert!(pop.preference.lambda.is_none());

        let empty = "user_id,y,x1_d1,x1_d2\n";
        match read_population_csv(empty.as_bytes()) {
            Err(Error::Parse { message, .. }) => assert_eq!(message, "no rows"),
            other => panic!("unexpected {other:?}"),
        }
        let missing = "user_id,x1_d1,x1_d2\n1,2,0\n";
        assert!(matches!(read_population_csv(missing.as_bytes()), Err(Error::Parse { row: 1, .. })));
        let bad = "user_id,y,x1_d1,x1_d2\n1,1,2,0\n2,abc,3,1\n";
        assert!(matches!(read_population_csv(bad.as_bytes()), Err(Error::Parse { row: 3, .. })));
        let ragged = "user_id,y,x1_d1,x1_d2\n1,1,2,0\n2,1,3\n";
        assert!(matches!(read_population_csv(ragged.as_bytes()), Err(Error::Parse { row: 3, .. })));
    }

    #[test]
    fn csv_round_trip_with_three_covariates() {
        let mut cfg = poisson_config(8);
        cfg.n_users = 50;
        cfg.n_covariates = 3;
        cfg.effects = Effects::Beta1(vec![0.1, 0.2, 0.3]);
        cfg.noise_sigma = 1.3;
        cfg.exposure = ExposureSpec::Poisson {
            means: vec![vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0]],
            rho: 0.2,
        };
        let pop = generate_population(&cfg).unwrap();
        let pop = attach_strata(
            &pop,
            &StrataSpec {
                variables: vec![StrataVariable { name: "msa".into(), levels: StrataLevels::Cardinality(5) }],
                seed: None,
            },
        )
        .unwrap();
        let mut buf = Vec::new();
        write_population_csv(&pop, &mut buf).unwrap();
        let back = read_population_csv(buf.as_slice()).unwrap();
        assert_eq!(back.n_covariates(), 3);
        assert_eq!(back.exposures, pop.exposures);
        assert_eq!(back.outcomes, pop.outcomes);
        assert_eq!(back.strata, pop.strata);
    }
}

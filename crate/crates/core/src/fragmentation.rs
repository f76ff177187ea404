//! Splitting users into device fragments and building stacked designs.
//!
//! Each user's outcome lands on exactly one device, drawn from the user's
//! preference vector; every device keeps its own exposures. The naive analyst
//! sees `J · n` unlinked rows. The link back to the true user is kept in a
//! separate [`OracleLinks`] value that estimators never receive.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{parse_f64, parse_i64, Population};
use crate::error::{Error, Result};
use crate::rng::{substream, Substream};

/// Which device records each user's outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentMatrix {
    devices: Vec<usize>,
    n_devices: usize,
}

impl AssignmentMatrix {
    /// `devices[i]` is the zero-based device of user `i`.
    pub fn new(devices: Vec<usize>, n_devices: usize) -> Result<Self> {
        if let Some(bad) = devices.iter().find(|d| **d >= n_devices) {
            return Err(Error::Dimension(format!(
                "device index {bad} out of range for J = {n_devices}"
            )));
        }
        Ok(AssignmentMatrix { devices, n_devices })
    }

    pub fn devices(&self) -> &[usize] {
        &self.devices
    }

    pub fn n_users(&self) -> usize {
        self.devices.len()
    }

    pub fn n_devices(&self) -> usize {
        self.n_devices
    }

    pub fn one_hot(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_users(), self.n_devices, |i, j| {
            if self.devices[i] == j {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Indicator column for device `j` (the diagonal of `s` when `j = 0`).
    pub fn indicator(&self, j: usize) -> Vec<f64> {
        self.devices
            .iter()
            .map(|d| if *d == j { 1.0 } else { 0.0 })
            .collect()
    }
}

/// One categorical draw per user from the rows of `lambda` (`n × J`).
pub fn draw_assignment_with(lambda: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> AssignmentMatrix {
    let j = lambda.ncols();
    let devices = (0..lambda.nrows())
        .map(|i| {
            let u: f64 = rng.random();
            let mut cum = 0.0;
            let mut last_positive = 0;
            for d in 0..j {
                let p = lambda[(i, d)];
                if p > 0.0 {
                    last_positive = d;
                }
                cum += p;
                if u < cum {
                    return d;
                }
            }
            last_positive
        })
        .collect();
    AssignmentMatrix {
        devices,
        n_devices: j,
    }
}

/// Draw the purchase device of every user from the population's preference model.
///
/// Randomness comes from the assignment substream, which is disjoint from the
/// noise substream, so the draw is independent of `ε`.
pub fn draw_assignment(pop: &Population) -> Result<AssignmentMatrix> {
    let lambda = pop.preference.lambda.as_ref().ok_or_else(|| {
        Error::config("preference", "population has no preference probabilities (external data)")
    })?;
    let mut rng = substream(pop.seed(), Substream::Assignment);
    Ok(draw_assignment_with(lambda, &mut rng))
}

/// Rows are ordered device-major with users in the same order inside every
/// device block, so the `W = [I … I]` reconstruction operator applies by position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub n_users: usize,
}

/// The analyst-visible fragment table. Carries no user linkage.
#[derive(Debug, Clone, PartialEq)]
pub struct Fragments {
    pub ids: Vec<u64>,
    /// Zero-based device of each row.
    pub device: Vec<usize>,
    pub y: DVector<f64>,
    /// `rows × k` exposures.
    pub x: DMatrix<f64>,
    pub strata_names: Vec<String>,
    /// One column per strata variable.
    pub strata: Vec<Vec<i64>>,
    pub n_devices: usize,
    pub layout: Option<BlockLayout>,
}

impl Fragments {
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    /// Share of nonzero outcomes recorded on each device; a constant plug-in for `Λ_j`.
    pub fn plug_in_lambda(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.n_devices];
        for (d, y) in self.device.iter().zip(self.y.iter()) {
            if *y != 0.0 {
                counts[*d] += 1.0;
            }
        }
        let total: f64 = counts.iter().sum();
        if total == 0.0 {
            return vec![1.0 / self.n_devices as f64; self.n_devices];
        }
        counts.iter().map(|c| c / total).collect()
    }

    fn rows_of_device(&self, j: usize) -> Vec<usize> {
        (0..self.n_rows()).filter(|r| self.device[*r] == j).collect()
    }
}

/// Oracle-only link from fragment row to true (zero-based) user index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleLinks {
    pub true_user: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FragmentedDataset {
    pub fragments: Fragments,
    pub oracle: Option<OracleLinks>,
}

/// Per-user device panels rebuilt through the oracle links.
#[derive(Debug, Clone, PartialEq)]
pub struct UserPanels {
    /// `J` matrices `n × k`.
    pub exposures: Vec<DMatrix<f64>>,
    /// `J` outcome vectors of length `n`.
    pub outcomes: Vec<DVector<f64>>,
}

impl FragmentedDataset {
    pub fn n_devices(&self) -> usize {
        self.fragments.n_devices
    }

    pub fn n_covariates(&self) -> usize {
        self.fragments.n_covariates()
    }

    /// Regroup fragments by true user. Requires oracle links and exactly one
    /// fragment per (user, device).
    pub fn user_panels(&self) -> Result<UserPanels> {
        let oracle = self
            .oracle
            .as_ref()
            .ok_or_else(|| Error::Invalid("dataset carries no true-user links".into()))?;
        let f = &self.fragments;
        let mut users: BTreeMap<usize, usize> = BTreeMap::new();
        for u in &oracle.true_user {
            let next = users.len();
            users.entry(*u).or_insert(next);
        }
        // dense index in sorted order of user id
        for (idx, v) in users.values_mut().enumerate() {
            *v = idx;
        }
        let n = users.len();
        let (j, k) = (f.n_devices, f.n_covariates());
        let mut seen = vec![false; n * j];
        let mut exposures = vec![DMatrix::zeros(n, k); j];
        let mut outcomes = vec![DVector::zeros(n); j];
        for r in 0..f.n_rows() {
            let i = users[&oracle.true_user[r]];
            let d = f.device[r];
            if std::mem::replace(&mut seen[i * j + d], true) {
                return Err(Error::Invalid(format!(
                    "user {} has more than one fragment on device {}",
                    oracle.true_user[r],
                    d + 1
                )));
            }
            outcomes[d][i] = f.y[r];
            for c in 0..k {
                exposures[d][(i, c)] = f.x[(r, c)];
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Invalid("some users lack a fragment on some device".into()));
        }
        Ok(UserPanels { exposures, outcomes })
    }
}

/// Split every user into `J` fragments: device `j` keeps `X_j` and receives
/// `y` only if it is the assigned device.
pub fn fragment(pop: &Population, a: &AssignmentMatrix) -> Result<FragmentedDataset> {
    let (n, j, k) = (pop.n_users(), pop.n_devices(), pop.n_covariates());
    if a.n_users() != n || a.n_devices() != j {
        return Err(Error::Dimension(format!(
            "assignment is {}×{}, population is {n}×{j}",
            a.n_users(),
            a.n_devices()
        )));
    }
    let rows = n * j;
    let mut ids: Vec<u64> = (1..=rows as u64).collect();
    ids.shuffle(&mut substream(pop.seed(), Substream::FragmentIds));
    let mut device = Vec::with_capacity(rows);
    let mut y = DVector::zeros(rows);
    let mut x = DMatrix::zeros(rows, k);
    let mut true_user = Vec::with_capacity(rows);
    for d in 0..j {
        for i in 0..n {
            let r = d * n + i;
            device.push(d);
            true_user.push(i);
            if a.devices[i] == d {
                y[r] = pop.outcomes[i];
            }
            for c in 0..k {
                x[(r, c)] = pop.exposures[d][(i, c)];
            }
        }
    }
    let (strata_names, strata) = match &pop.strata {
        Some(s) => (
            s.names.clone(),
            s.columns
                .iter()
                .map(|col| (0..rows).map(|r| col[r % n]).collect())
                .collect(),
        ),
        None => (Vec::new(), Vec::new()),
    };
    Ok(FragmentedDataset {
        fragments: Fragments {
            ids,
            device,
            y,
            x,
            strata_names,
            strata,
            n_devices: j,
            layout: Some(BlockLayout { n_users: n }),
        },
        oracle: Some(OracleLinks { true_user }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "form", content = "device")]
pub enum ModelForm {
    /// Un-fragmented data, `[η, Σ_j X_j]`.
    TrueCommon,
    /// Un-fragmented data, `[η, X_1, …, X_J]`.
    TrueDeviceSpecific,
    CommonStacked,
    DeviceSpecificStacked,
    /// One device's fragments only (zero-based device).
    DeviceSplit(usize),
    /// Pooled fragmented and linked users.
    Mixed,
    AggregatedCommon,
    AggregatedDeviceSpecific,
}

impl std::fmt::Display for ModelForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelForm::TrueCommon => write!(f, "true-common"),
            ModelForm::TrueDeviceSpecific => write!(f, "true-device-specific"),
            ModelForm::CommonStacked => write!(f, "common-stacked"),
            ModelForm::DeviceSpecificStacked => write!(f, "device-specific-stacked"),
            ModelForm::DeviceSplit(j) => write!(f, "device-split({})", j + 1),
            ModelForm::Mixed => write!(f, "mixed"),
            ModelForm::AggregatedCommon => write!(f, "aggregated-common"),
            ModelForm::AggregatedDeviceSpecific => write!(f, "aggregated-device-specific"),
        }
    }
}

/// A regression problem: response, design with leading intercept column, term names.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices {
    pub form: ModelForm,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub terms: Vec<String>,
    pub n_devices: usize,
    pub layout: Option<BlockLayout>,
}

pub fn common_terms(k: usize) -> Vec<String> {
    std::iter::once("intercept".to_string())
        .chain((1..=k).map(|c| format!("x{c}")))
        .collect()
}

pub fn device_terms(k: usize, j: usize) -> Vec<String> {
    let mut t = vec!["intercept".to_string()];
    for d in 1..=j {
        for c in 1..=k {
            t.push(format!("x{c}_d{d}"));
        }
    }
    t
}

impl DesignMatrices {
    /// `Ω = diag(1/J, 1, …, 1)`.
    pub fn omega(&self) -> DMatrix<f64> {
        let mut o = DMatrix::identity(self.x.ncols(), self.x.ncols());
        o[(0, 0)] = 1.0 / self.n_devices as f64;
        o
    }

    /// `W X̃ Ω` for a common-stacked design: sums each user's device rows and
    /// rescales the intercept, recovering `[η, Σ_j X_j]`.
    pub fn reconstruct(&self) -> Result<DMatrix<f64>> {
        if self.form != ModelForm::CommonStacked {
            return Err(Error::Invalid(format!("reconstruction needs a common-stacked design, got {}", self.form)));
        }
        let layout = self
            .layout
            .ok_or_else(|| Error::Invalid("design rows are not in device-major block layout".into()))?;
        let n = layout.n_users;
        let p = self.x.ncols();
        let mut wx = DMatrix::zeros(n, p);
        for d in 0..self.n_devices {
            wx += self.x.rows(d * n, n);
        }
        Ok(wx * self.omega())
    }
}

/// Pool all fragments with one common slope: rows `[1, x̃]`.
pub fn stack_common(f: &Fragments) -> DesignMatrices {
    let (rows, k) = (f.n_rows(), f.n_covariates());
    let x = DMatrix::from_fn(rows, k + 1, |r, c| if c == 0 { 1.0 } else { f.x[(r, c - 1)] });
    DesignMatrices {
        form: ModelForm::CommonStacked,
        y: f.y.clone(),
        x,
        terms: common_terms(k),
        n_devices: f.n_devices,
        layout: f.layout,
    }
}

/// Pool all fragments with device-specific slopes: block-diagonal exposure columns.
pub fn stack_device_specific(f: &Fragments) -> Result<DesignMatrices> {
    let (rows, k, j) = (f.n_rows(), f.n_covariates(), f.n_devices);
    if j < 2 {
        return Err(Error::Invalid("device-specific stacking needs at least two devices".into()));
    }
    let mut x = DMatrix::zeros(rows, 1 + j * k);
    for r in 0..rows {
        x[(r, 0)] = 1.0;
        let base = 1 + f.device[r] * k;
        for c in 0..k {
            x[(r, base + c)] = f.x[(r, c)];
        }
    }
    Ok(DesignMatrices {
        form: ModelForm::DeviceSpecificStacked,
        y: f.y.clone(),
        x,
        terms: device_terms(k, j),
        n_devices: j,
        layout: f.layout,
    })
}

/// One design per device: that device's fragments regressed on `[η, X_j]`.
pub fn split_by_device(f: &Fragments) -> Vec<DesignMatrices> {
    let k = f.n_covariates();
    (0..f.n_devices)
        .map(|j| {
            let rows = f.rows_of_device(j);
            let x = DMatrix::from_fn(rows.len(), k + 1, |r, c| {
                if c == 0 {
                    1.0
                } else {
                    f.x[(rows[r], c - 1)]
                }
            });
            let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| f.y[*r]));
            DesignMatrices {
                form: ModelForm::DeviceSplit(j),
                y,
                x,
                terms: std::iter::once("intercept".to_string())
                    .chain((1..=k).map(|c| format!("x{c}_d{}", j + 1)))
                    .collect(),
                n_devices: f.n_devices,
                layout: None,
            }
        })
        .collect()
}

/// Write `fragment_id,device,y,x1..xk,s_*,[true_user_id]`. Devices are written 1-based.
pub fn write_fragments_csv<W: Write>(ds: &FragmentedDataset, include_oracle: bool, writer: W) -> Result<()> {
    let f = &ds.fragments;
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["fragment_id".to_string(), "device".to_string(), "y".to_string()];
    header.extend((1..=f.n_covariates()).map(|c| format!("x{c}")));
    header.extend(f.strata_names.iter().map(|n| format!("s_{n}")));
    let oracle = if include_oracle { ds.oracle.as_ref() } else { None };
    if oracle.is_some() {
        header.push("true_user_id".into());
    }
    w.write_record(&header)?;
    for r in 0..f.n_rows() {
        let mut rec = vec![f.ids[r].to_string(), (f.device[r] + 1).to_string(), f.y[r].to_string()];
        rec.extend((0..f.n_covariates()).map(|c| f.x[(r, c)].to_string()));
        rec.extend(f.strata.iter().map(|col| col[r].to_string()));
        if let Some(o) = oracle {
            rec.push((o.true_user[r] + 1).to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a fragment-level CSV. The number of devices is the largest device label.
pub fn read_fragments_csv<R: Read>(reader: R) -> Result<FragmentedDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::parse(1, e.to_string()))?.clone();
    let (mut id_col, mut dev_col, mut y_col, mut user_col) = (None, None, None, None);
    let mut x_cols: BTreeMap<usize, usize> = BTreeMap::new();
    let mut strata_cols: Vec<(String, usize)> = Vec::new();
    for (idx, name) in header.iter().enumerate() {
        match name {
            "fragment_id" => id_col = Some(idx),
            "device" => dev_col = Some(idx),
            "y" => y_col = Some(idx),
            "true_user_id" => user_col = Some(idx),
            _ => {
                if let Some(s) = name.strip_prefix("s_") {
                    if s.is_empty() || strata_cols.iter().any(|(n, _)| n == s) {
                        return Err(Error::parse(1, format!("bad strata column {name:?}")));
                    }
                    strata_cols.push((s.to_string(), idx));
                } else if let Some(c) = name
                    .strip_prefix('x')
                    .and_then(|c| c.parse::<usize>().ok())
                    .filter(|c| *c >= 1)
                {
                    if x_cols.insert(c, idx).is_some() {
                        return Err(Error::parse(1, format!("duplicate column {name:?}")));
                    }
                } else {
                    return Err(Error::parse(1, format!("unexpected column {name:?}")));
                }
            }
        }
    }
    let id_col = id_col.ok_or_else(|| Error::parse(1, "missing column fragment_id"))?;
    let dev_col = dev_col.ok_or_else(|| Error::parse(1, "missing column device"))?;
    let y_col = y_col.ok_or_else(|| Error::parse(1, "missing column y"))?;
    let k = x_cols.len();
    if k == 0 {
        return Err(Error::parse(1, "missing exposure columns x1..xk"));
    }
    if let Some(c) = (1..=k).find(|c| !x_cols.contains_key(c)) {
        return Err(Error::parse(1, format!("missing column x{c}")));
    }
    let width = header.len();
    let (mut ids, mut device, mut ys, mut xs, mut users) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut strata: Vec<Vec<i64>> = vec![Vec::new(); strata_cols.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != width {
            return Err(Error::parse(line, format!("expected {width} fields, found {}", rec.len())));
        }
        let id = parse_i64(line, "fragment_id", &rec[id_col])?;
        ids.push(u64::try_from(id).map_err(|_| Error::parse(line, "fragment_id must be nonnegative"))?);
        let d = parse_i64(line, "device", &rec[dev_col])?;
        if !(1..=1 << 20).contains(&d) {
            return Err(Error::parse(line, format!("device label {d} out of range")));
        }
        device.push(d as usize - 1);
        ys.push(parse_f64(line, "y", &rec[y_col])?);
        for c in 1..=k {
            xs.push(parse_f64(line, &format!("x{c}"), &rec[x_cols[&c]])?);
        }
        for (col, (name, idx)) in strata.iter_mut().zip(&strata_cols) {
            col.push(parse_i64(line, &format!("s_{name}"), &rec[*idx])?);
        }
        if let Some(uc) = user_col {
            let u = parse_i64(line, "true_user_id", &rec[uc])?;
            if u < 1 {
                return Err(Error::parse(line, "true_user_id must be positive"));
            }
            users.push(u as usize - 1);
        }
    }
    if ys.is_empty() {
        return Err(Error::parse(2, "no rows"));
    }
    let rows = ys.len();
    let n_devices = device.iter().max().map_or(0, |m| m + 1);
    Ok(FragmentedDataset {
        fragments: Fragments {
            ids,
            device,
            y: DVector::from_vec(ys),
            x: DMatrix::from_row_slice(rows, k, &xs),
            strata_names: strata_cols.into_iter().map(|(n, _)| n).collect(),
            strata,
            n_devices,
            layout: None,
        },
        oracle: user_col.map(|_| OracleLinks { true_user: users }),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::datagen::{generate_population, DgpConfig, Effects, ExposureSpec, PreferenceSpec};

    /// Two users with the given per-device ad splits; everybody buys on device 1.
    pub(crate) fn two_users(d1: [f64; 2], d2: [f64; 2]) -> Population {
        let cfg = DgpConfig {
            n_users: 2,
            n_devices: 2,
            n_covariates: 1,
            beta0: 1.0,
            effects: Effects::Beta1(vec![0.0]),
            exposure: ExposureSpec::FixedMatrix {
                matrices: vec![vec![vec![d1[0]], vec![d1[1]]], vec![vec![d2[0]], vec![d2[1]]]],
            },
            noise_sigma: 0.0,
            preference: PreferenceSpec::Constant { lambda: vec![1.0, 0.0] },
            seed: 0,
        };
        generate_population(&cfg).unwrap()
    }

    fn sorted_rows(f: &Fragments) -> Vec<(usize, f64, f64)> {
        let mut rows: Vec<_> = (0..f.n_rows()).map(|r| (f.device[r], f.y[r], f.x[(r, 0)])).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows
    }

    #[test]
    fn two_user_fragments_either_way_round() {
        let pop = two_users([2.0, 3.0], [0.0, 1.0]);
        let a = draw_assignment(&pop).unwrap();
        assert_eq!(a.devices(), &[0, 0]);
        let ds = fragment(&pop, &a).unwrap();
        // (device D = 0, purchase, ads)
        assert_eq!(
            sorted_rows(&ds.fragments),
            vec![(0, 1.0, 2.0), (0, 1.0, 3.0), (1, 0.0, 0.0), (1, 0.0, 1.0)]
        );
        let pop = two_users([0.0, 1.0], [2.0, 3.0]);
        let ds = fragment(&pop, &a).unwrap();
        assert_eq!(
            sorted_rows(&ds.fragments),
            vec![(0, 1.0, 0.0), (0, 1.0, 1.0), (1, 0.0, 2.0), (1, 0.0, 3.0)]
        );
    }

    #[test]
    fn two_user_designs() {
        let pop = two_users([2.0, 3.0], [0.0, 1.0]);
        let a = draw_assignment(&pop).unwrap();
        let ds = fragment(&pop, &a).unwrap();
        let common = stack_common(&ds.fragments);
        // device-major block order: D rows then M rows
        assert_eq!(
            common.x,
            DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 1.0, 3.0, 1.0, 0.0, 1.0, 1.0])
        );
        let dev = stack_device_specific(&ds.fragments).unwrap();
        assert_eq!(
            dev.x,
            DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 0.0, 1.0, 3.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0])
        );
        let split = split_by_device(&ds.fragments);
        assert_eq!(split[0].x, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 3.0]));
        assert_eq!(split[0].y.as_slice(), &[1.0, 1.0]);
        assert_eq!(split[1].y.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn degenerate_lambda_assigns_first_device() {
        let mut lambda = DMatrix::zeros(50, 3);
        lambda.column_mut(0).fill(1.0);
        let a = draw_assignment_with(&lambda, &mut substream(1, Substream::Assignment));
        assert!(a.devices().iter().all(|d| *d == 0));
        let mut lambda = DMatrix::zeros(50, 2);
        lambda.column_mut(1).fill(1.0);
        let a = draw_assignment_with(&lambda, &mut substream(1, Substream::Assignment));
        assert!(a.devices().iter().all(|d| *d == 1));
    }

    #[test]
    fn balanced_lambda_share_within_binomial_bound() {
        let lambda = DMatrix::from_element(100_000, 2, 0.5);
        let a = draw_assignment_with(&lambda, &mut substream(17, Substream::Assignment));
        let share = a.indicator(0).iter().sum::<f64>() / 100_000.0;
        assert!((share - 0.5).abs() < 0.006, "share {share}");
        for row in a.one_hot().row_iter() {
            assert_eq!(row.sum(), 1.0);
        }
    }

    #[test]
    fn zero_outcomes_stay_zero() {
        let mut cfg = crate::datagen::tests::poisson_config(3);
        cfg.beta0 = 0.0;
        cfg.effects = Effects::Beta1(vec![0.0]);
        let pop = generate_population(&cfg).unwrap();
        let ds = fragment(&pop, &draw_assignment(&pop).unwrap()).unwrap();
        assert!(ds.fragments.y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_second_device_gives_half_zero_rows() {
        let cfg = DgpConfig {
            n_users: 10,
            n_devices: 2,
            n_covariates: 1,
            beta0: 1.0,
            effects: Effects::Beta1(vec![1.0]),
            exposure: ExposureSpec::Poisson { means: vec![vec![3.0], vec![0.0]], rho: 0.0 },
            noise_sigma: 0.0,
            preference: PreferenceSpec::Constant { lambda: vec![0.5, 0.5] },
            seed: 1,
        };
        let pop = generate_population(&cfg).unwrap();
        let d = stack_common(&fragment(&pop, &draw_assignment(&pop).unwrap()).unwrap().fragments);
        assert!((10..20).all(|r| d.x[(r, 1)] == 0.0));
    }

    #[test]
    fn device_specific_requires_two_devices() {
        let text = "fragment_id,device,y,x1\n1,1,1,2\n2,1,0,3\n";
        let ds = read_fragments_csv(text.as_bytes()).unwrap();
        assert!(stack_device_specific(&ds.fragments).is_err());
    }

    #[test]
    fn fragment_csv_round_trip_keeps_oracle() {
        let pop = generate_population(&crate::datagen::tests::poisson_config(21)).unwrap();
        let ds = fragment(&pop, &draw_assignment(&pop).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_fragments_csv(&ds, true, &mut buf).unwrap();
        let back = read_fragments_csv(buf.as_slice()).unwrap();
        assert_eq!(back.oracle, ds.oracle);
        assert_eq!(back.fragments.y, ds.fragments.y);
        assert_eq!(back.fragments.x, ds.fragments.x);
        let mut buf = Vec::new();
        write_fragments_csv(&ds, false, &mut buf).unwrap();
        assert!(read_fragments_csv(buf.as_slice()).unwrap().oracle.is_none());
    }

    #[test]
    fn fragment_ids_are_a_permutation() {
        let pop = generate_population(&crate::datagen::tests::poisson_config(2)).unwrap();
        let ds = fragment(&pop, &draw_assignment(&pop).unwrap()).unwrap();
        let mut ids = ds.fragments.ids.clone();
        ids.sort_unstable();
        assert_eq!(ids, (1..=1000).collect::<Vec<u64>>());
    }
}

//! Replication at fixed exposures: redraw the purchase device and the noise,
//! refit with the estimators, and compare the averages to the closed forms.

use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use super::config::{FitChoice, ScenarioConfig};
use crate::biascalc::predict_for_population;
use crate::datagen::{attach_strata, generate_population, Population};
use crate::error::{Error, Result};
use crate::estimators::{estimate_true, ols};
use crate::fragmentation::{draw_assignment_with, fragment, split_by_device, stack_common, stack_device_specific, ModelForm};
use crate::linalg::pairwise_sum;
use crate::rng::{substream, Substream};

/// Worker pool honouring `FRAGLAB_THREADS` (unset or 0 means one thread per core).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("FRAGLAB_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::config("FRAGLAB_THREADS", format!("not a thread count: {v:?}")))?;
        if n > 0 {
            builder = builder.num_threads(n);
        }
    }
    builder.build().map_err(|e| Error::Invalid(format!("thread pool: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McTerm {
    pub model_form: ModelForm,
    pub term: String,
    pub analytic_expected: f64,
    pub mc_mean: f64,
    pub mc_sd: f64,
    pub mc_se: f64,
    pub z_score: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MCReport {
    pub reps: usize,
    pub z_threshold: f64,
    pub terms: Vec<McTerm>,
    pub all_pass: bool,
    /// Wall time; left out of serialized reports so reruns stay byte-identical.
    #[serde(skip)]
    pub runtime: Duration,
}

impl MCReport {
    pub fn term(&self, form: ModelForm, term: &str) -> Option<&McTerm> {
        self.terms.iter().find(|t| t.model_form == form && t.term == term)
    }

    pub fn to_csv(&self) -> Result<String> {
        super::report::csv_text(
            &["model_form", "term", "analytic_expected", "mc_mean", "mc_sd", "mc_se", "z_score", "pass"],
            self.terms.iter().map(|t| {
                vec![
                    t.model_form.to_string(),
                    t.term.clone(),
                    t.analytic_expected.to_string(),
                    t.mc_mean.to_string(),
                    t.mc_sd.to_string(),
                    t.mc_se.to_string(),
                    t.z_score.to_string(),
                    t.pass.to_string(),
                ]
            }),
        )
    }
}

struct Target {
    form: ModelForm,
    terms: Vec<String>,
    expected: Vec<f64>,
}

fn targets(pop: &Population, fits: &[FitChoice]) -> Result<Vec<Target>> {
    let cfg = pop
        .config
        .as_ref()
        .ok_or_else(|| Error::Invalid("Monte Carlo needs a simulated population".into()))?;
    let (j, k) = (pop.n_devices(), pop.n_covariates());
    let mut out = Vec::new();
    for fit in fits {
        match fit {
            FitChoice::TrueCommon => {
                let crate::datagen::Effects::Beta1(b) = &cfg.effects else {
                    return Err(Error::Invalid("true-common fit is misspecified under device-specific effects".into()));
                };
                out.push(Target {
                    form: ModelForm::TrueCommon,
                    terms: crate::fragmentation::common_terms(k),
                    expected: std::iter::once(cfg.beta0).chain(b.iter().copied()).collect(),
                });
            }
            FitChoice::TrueDeviceSpecific => out.push(Target {
                form: ModelForm::TrueDeviceSpecific,
                terms: crate::fragmentation::device_terms(k, j),
                expected: std::iter::once(cfg.beta0)
                    .chain((0..j).flat_map(|d| cfg.effects.for_device(d).to_vec()))
                    .collect(),
            }),
            other => {
                for dec in predict_for_population(pop, other.model_form())? {
                    let terms = std::iter::once("intercept".to_string()).chain(dec.terms.iter().map(|t| match dec.model_form {
                        ModelForm::DeviceSplit(d) => format!("{t}_d{}", d + 1),
                        _ => t.clone(),
                    }));
                    out.push(Target {
                        form: dec.model_form,
                        terms: terms.collect(),
                        expected: dec.expected_coefficients(),
                    });
                }
            }
        }
    }
    Ok(out)
}

fn replicate(pop: &Population, mu: &DVector<f64>, sigma: f64, fits: &[FitChoice], seed: u64, rep: u64) -> Result<Vec<f64>> {
    let mut rng = substream(seed, Substream::McRep(rep));
    let lambda = pop
        .preference
        .lambda
        .as_ref()
        .ok_or_else(|| Error::Invalid("population has no device probabilities".into()))?;
    let a = draw_assignment_with(lambda, &mut rng);
    let noise = DVector::from_iterator(mu.len(), (0..mu.len()).map(|_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        sigma * z
    }));
    let draw = Population {
        exposures: pop.exposures.clone(),
        outcomes: mu + noise,
        noise: None,
        preference: pop.preference.clone(),
        strata: None,
        config: None,
    };
    let ds = fragment(&draw, &a)?;
    let mut coefs = Vec::new();
    for fit in fits {
        match fit {
            FitChoice::TrueCommon => coefs.extend(estimate_true(&draw, ModelForm::TrueCommon)?.coefficients),
            FitChoice::TrueDeviceSpecific => coefs.extend(estimate_true(&draw, ModelForm::TrueDeviceSpecific)?.coefficients),
            FitChoice::CommonStacked => coefs.extend(ols(&stack_common(&ds.fragments))?.coefficients),
            FitChoice::DeviceSpecificStacked => coefs.extend(ols(&stack_device_specific(&ds.fragments)?)?.coefficients),
            FitChoice::DeviceSplit => {
                for design in split_by_device(&ds.fragments) {
                    coefs.extend(ols(&design)?.coefficients);
                }
            }
        }
    }
    Ok(coefs)
}

/// `reps` redraws of assignment and noise on the fixed exposures of `pop`.
/// Replication `i` uses substream `McRep(i)` of the population seed and results
/// are reduced in index order, so the report does not depend on the thread count.
pub fn monte_carlo(pop: &Population, fits: &[FitChoice], reps: usize, z_threshold: f64) -> Result<MCReport> {
    monte_carlo_in(&thread_pool()?, pop, fits, reps, z_threshold)
}

pub fn monte_carlo_in(
    pool: &rayon::ThreadPool,
    pop: &Population,
    fits: &[FitChoice],
    reps: usize,
    z_threshold: f64,
) -> Result<MCReport> {
    let start = Instant::now();
    if reps < 2 {
        return Err(Error::config("mc_reps", "need at least two replications for a standard error"));
    }
    let cfg = pop
        .config
        .as_ref()
        .ok_or_else(|| Error::Invalid("Monte Carlo needs a simulated population".into()))?;
    let targets = targets(pop, fits)?;
    let mu = cfg.effects.linear_predictor(cfg.beta0, &pop.exposures);
    let draws: Vec<Vec<f64>> = pool.install(|| {
        (0..reps as u64)
            .into_par_iter()
            .map(|i| replicate(pop, &mu, cfg.noise_sigma, fits, cfg.seed, i))
            .collect::<Result<_>>()
    })?;

    let mut terms = Vec::new();
    let mut idx = 0;
    for t in &targets {
        for (name, expected) in t.terms.iter().zip(&t.expected) {
            let values: Vec<f64> = draws.iter().map(|d| d[idx]).collect();
            let mean = pairwise_sum(&values) / reps as f64;
            let dev: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
            let sd = (pairwise_sum(&dev) / (reps - 1) as f64).sqrt();
            let se = sd / (reps as f64).sqrt();
            let gap = mean - expected;
            let z = if se > 0.0 {
                gap / se
            } else if gap.abs() <= 1e-9 * (1.0 + expected.abs()) {
                0.0
            } else {
                f64::INFINITY.copysign(gap)
            };
            terms.push(McTerm {
                model_form: t.form,
                term: name.clone(),
                analytic_expected: *expected,
                mc_mean: mean,
                mc_sd: sd,
                mc_se: se,
                z_score: z,
                pass: z.abs() <= z_threshold,
            });
            idx += 1;
        }
    }
    Ok(MCReport {
        reps,
        z_threshold,
        all_pass: terms.iter().all(|t| t.pass),
        terms,
        runtime: start.elapsed(),
    })
}

/// Monte Carlo for a scenario config: its fragmented models at `mc_reps` replications.
pub fn run_monte_carlo(cfg: &ScenarioConfig) -> Result<MCReport> {
    cfg.validate()?;
    let mut pop = generate_population(&cfg.dgp)?;
    if let Some(s) = &cfg.strata {
        pop = attach_strata(&pop, s)?;
    }
    let fits: Vec<FitChoice> = cfg.models.clone();
    monte_carlo(&pop, &fits, cfg.mc_reps.max(2), cfg.tolerances.mc_z)
}

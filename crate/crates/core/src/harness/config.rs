use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::biascalc::STCThresholds;
use crate::correctives::AggregateIntercept;
use crate::datagen::{DgpConfig, StrataSpec};
use crate::error::{Error, Result};
use crate::fragmentation::ModelForm;

/// A model to fit in a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitChoice {
    TrueCommon,
    TrueDeviceSpecific,
    CommonStacked,
    DeviceSpecificStacked,
    DeviceSplit,
}

impl FitChoice {
    pub fn is_fragmented(self) -> bool {
        !matches!(self, FitChoice::TrueCommon | FitChoice::TrueDeviceSpecific)
    }

    /// Representative model form; `DeviceSplit` stands for every device.
    pub fn model_form(self) -> ModelForm {
        match self {
            FitChoice::TrueCommon => ModelForm::TrueCommon,
            FitChoice::TrueDeviceSpecific => ModelForm::TrueDeviceSpecific,
            FitChoice::CommonStacked => ModelForm::CommonStacked,
            FitChoice::DeviceSpecificStacked => ModelForm::DeviceSpecificStacked,
            FitChoice::DeviceSplit => ModelForm::DeviceSplit(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DebiasSpec {
    /// Defaults to the number of devices.
    #[serde(default)]
    pub j_used: Option<f64>,
    #[serde(default)]
    pub force: bool,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregateSpec {
    pub variables: Vec<String>,
    #[serde(default = "one")]
    pub min_bin_rows: usize,
    #[serde(default)]
    pub intercept: AggregateIntercept,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Correctives {
    #[serde(default)]
    pub debias: Option<DebiasSpec>,
    #[serde(default)]
    pub aggregate: Option<AggregateSpec>,
    /// Fragmented shares for the mixed-estimator sweep.
    #[serde(default)]
    pub mixed_sweep: Option<Vec<f64>>,
}

fn five() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Monte Carlo pass threshold in standard errors.
    #[serde(default = "five")]
    pub mc_z: f64,
    /// Defaults to `STCThresholds::for_sample_size(n_users)`.
    #[serde(default)]
    pub stc: Option<STCThresholds>,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { mc_z: 5.0, stc: None }
    }
}

fn default_models() -> Vec<FitChoice> {
    vec![FitChoice::TrueCommon, FitChoice::CommonStacked]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub dgp: DgpConfig,
    #[serde(default)]
    pub strata: Option<StrataSpec>,
    /// Master seed for the assignment draw; defaults to `dgp.seed`.
    #[serde(default)]
    pub assignment_seed: Option<u64>,
    #[serde(default = "default_models")]
    pub models: Vec<FitChoice>,
    #[serde(default)]
    pub correctives: Correctives,
    /// Monte Carlo replications at fixed exposures; 1 skips the simulation.
    #[serde(default = "one")]
    pub mc_reps: usize,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::config("name", "must be nonempty"));
        }
        if self.name.contains(['/', '\\']) {
            return Err(Error::config("name", "is used in file names and may not contain path separators"));
        }
        if self.mc_reps == 0 {
            return Err(Error::config("mc_reps", "must be at least 1"));
        }
        if !(self.tolerances.mc_z > 0.0) {
            return Err(Error::config("tolerances.mc_z", "must be positive"));
        }
        if self.models.is_empty() {
            return Err(Error::config("models", "list at least one model"));
        }
        self.dgp.validate()?;
        if let Some(s) = &self.strata {
            s.validate()?;
        }
        if let Some(agg) = &self.correctives.aggregate {
            let known: Vec<&str> = self
                .strata
                .iter()
                .flat_map(|s| s.variables.iter().map(|v| v.name.as_str()))
                .collect();
            if let Some(v) = agg.variables.iter().find(|v| !known.contains(&v.as_str())) {
                return Err(Error::config("correctives.aggregate.variables", format!("{v:?} is not a strata variable")));
            }
        }
        if let Some(grid) = &self.correctives.mixed_sweep {
            if grid.iter().any(|r| !(0.0..=1.0).contains(r)) {
                return Err(Error::config("correctives.mixed_sweep", "values must lie in [0, 1]"));
            }
        }
        if let Some(d) = &self.correctives.debias {
            if let Some(j) = d.j_used {
                if !(j.is_finite() && j >= 1.0) {
                    return Err(Error::config("correctives.debias.j_used", "must be at least 1"));
                }
            }
        }
        Ok(())
    }

    pub fn stc_thresholds(&self) -> STCThresholds {
        self.tolerances
            .stc
            .unwrap_or_else(|| STCThresholds::for_sample_size(self.dgp.n_users))
    }
}

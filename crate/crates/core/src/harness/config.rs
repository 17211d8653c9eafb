//! JSON experiment configuration. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::theory::ScheduleVariant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    FigureA,
    FigureGrid,
    Rates,
    VerifyFilters,
    Probe,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::FigureA,
        Experiment::FigureGrid,
        Experiment::Rates,
        Experiment::VerifyFilters,
        Experiment::Probe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::FigureA => "figure-a",
            Experiment::FigureGrid => "figure-grid",
            Experiment::Rates => "rates",
            Experiment::VerifyFilters => "verify-filters",
            Experiment::Probe => "probe",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment {s:?}")))
    }
}

/// Filter-verification grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub gammas: Vec<f64>,
    /// `(S, T)` windows.
    pub windows: Vec<(usize, usize)>,
    pub grid_points: usize,
    pub sigma_min: f64,
    /// Upper end of the eigenvalue grid; defaults to `0.99 / gamma` per step size.
    pub sigma_max: Option<f64>,
    pub u_values: Vec<f64>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            gammas: vec![0.01, 0.1, 0.24],
            windows: vec![
                (0, 10),
                (5, 10),
                (127, 255),
                (499, 1000),
                (9, 10),
                (999, 1000),
            ],
            grid_points: 20,
            sigma_min: 1e-8,
            sigma_max: None,
            u_values: vec![0.0, 0.5, 1.0],
        }
    }
}

/// Random recursion-probe configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub configurations: usize,
    pub replicates: usize,
    pub max_dim: usize,
    pub max_iterations: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            configurations: 10,
            replicates: 200,
            max_dim: 10,
            max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Optional; must match the CLI subcommand when present.
    pub experiment: Option<Experiment>,
    pub d: usize,
    pub n: usize,
    pub nu: f64,
    pub noise_std: f64,
    pub master_seed: u64,
    pub replicates: usize,
    /// Smoothness grid for `figure-a`.
    pub r_values: Vec<f64>,
    /// Smoothness for `figure-grid` and `rates`.
    pub r: f64,
    pub gammas: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub n_values: Vec<usize>,
    pub variant: ScheduleVariant,
    pub verify: VerifyConfig,
    pub probe: ProbeConfig,
    pub output_path: Option<PathBuf>,
    /// `figure-a` only: per-iterate excess risk of replicate 0.
    pub trajectory_path: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            d: 100,
            n: 2000,
            nu: 0.5,
            noise_std: 1.0,
            master_seed: 0,
            replicates: 20,
            r_values: vec![0.0, 0.5, 1.0, 1.5, 2.0],
            r: 0.5,
            gammas: (-6..=3).map(|k| 2f64.powi(k)).collect(),
            batch_sizes: vec![1, 2, 4, 8, 16, 32, 64],
            n_values: vec![500, 1000, 2000, 4000, 8000],
            variant: ScheduleVariant::A,
            verify: VerifyConfig::default(),
            probe: ProbeConfig::default(),
            output_path: None,
            trajectory_path: None,
        }
    }
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

fn positive_finite(name: &str, values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        Some(v) => config_err(format!(
            "{name} entries must be positive and finite, got {v}"
        )),
        None => Ok(()),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// SHA-256 of the canonical JSON form, excluding output locations.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.output_path = None;
        canon.trajectory_path = None;
        let json = serde_json::to_string(&canon).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self, experiment: Experiment) -> Result<()> {
        if let Some(e) = self.experiment {
            if e != experiment {
                return config_err(format!("config is for {e}, not {experiment}"));
            }
        }
        if self.d == 0 || self.n == 0 {
            return config_err("d and n must be at least 1");
        }
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return config_err(format!("nu must lie in (0, 1], got {}", self.nu));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return config_err("noise_std must be nonnegative and finite");
        }
        if self.replicates == 0 {
            return config_err("replicates must be at least 1");
        }
        if !(self.r >= 0.0 && self.r.is_finite()) {
            return config_err("r must be nonnegative");
        }
        match experiment {
            Experiment::FigureA => {
                if self.r_values.is_empty()
                    || self.r_values.iter().any(|r| !(*r >= 0.0 && r.is_finite()))
                {
                    return config_err("r_values must be a nonempty list of nonnegative reals");
                }
            }
            Experiment::FigureGrid => {
                positive_finite("gammas", &self.gammas)?;
                if self.gammas.is_empty() || self.batch_sizes.is_empty() {
                    return config_err("gammas and batch_sizes must be nonempty");
                }
                if self.batch_sizes.contains(&0) {
                    return config_err("batch_sizes entries must be positive");
                }
            }
            Experiment::Rates => {
                if self.n_values.is_empty() || self.n_values.iter().any(|&n| n < 2) {
                    return config_err("n_values must be nonempty with entries >= 2");
                }
                if self.n_values.windows(2).any(|w| w[1] <= w[0]) {
                    return config_err("n_values must be strictly increasing");
                }
            }
            Experiment::VerifyFilters => self.verify.validate()?,
            Experiment::Probe => {
                let p = &self.probe;
                if p.configurations == 0
                    || p.replicates == 0
                    || p.max_dim == 0
                    || p.max_iterations < 2
                {
                    return config_err("probe counts must be positive and max_iterations >= 2");
                }
            }
        }
        Ok(())
    }
}

impl VerifyConfig {
    pub fn sigma_max_for(&self, gamma: f64) -> f64 {
        self.sigma_max.unwrap_or(0.99 / gamma)
    }

    pub fn validate(&self) -> Result<()> {
        positive_finite("verify.gammas", &self.gammas)?;
        if self.gammas.is_empty() || self.windows.is_empty() || self.grid_points == 0 {
            return config_err("verify grids must be nonempty");
        }
        if let Some(&(s, t)) = self.windows.iter().find(|(s, t)| *t == 0 || s >= t) {
            return config_err(format!("window (S={s}, T={t}) needs 0 <= S < T"));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min.is_finite()) {
            return config_err("verify.sigma_min must be positive");
        }
        for &g in &self.gammas {
            let hi = self.sigma_max_for(g);
            if !(g * hi < 1.0) {
                return config_err(format!("gamma * sigma_max = {} is not below 1", g * hi));
            }
            if hi < self.sigma_min {
                return config_err("verify.sigma_max is below sigma_min");
            }
        }
        if self.u_values.iter().any(|u| !(0.0..=1.0).contains(u)) {
            return config_err("verify.u_values must lie in [0, 1]");
        }
        Ok(())
    }
}

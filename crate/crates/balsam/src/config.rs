//! JSON run configurations: schema-validated documents with unknown keys
//! rejected and error messages carrying the path of the offending key.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::diagnostics::RiskPolicy;
use crate::mcmc::{Algorithm, SamplerConfig};
use crate::model::{ModelKind, ModelSpec, PriorSpec};
use crate::simulate::{Censoring, CovariateLaw, SimulationDesign, TruthParams};
use crate::splines::SplineConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub design: SimulationDesign,
}

/// Optional transformation applied to the longitudinal values at ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Sqrt,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub model: ModelSpec,
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub transform: Option<Transform>,
}

fn default_max_failure_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub replicates: usize,
    pub design: SimulationDesign,
    pub sampler: SamplerConfig,
    /// Abort the study when more than this fraction of replicates fails.
    #[serde(default = "default_max_failure_fraction")]
    pub max_failure_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveGrid {
    pub start: f64,
    pub end: f64,
    pub points: usize,
}

impl CurveGrid {
    pub fn times(&self) -> Result<Vec<f64>> {
        if !(self.start >= 0.0 && self.end > self.start && self.points >= 2) {
            return Err(Error::Config(
                "curve grid needs start >= 0, end > start, points >= 2".into(),
            ));
        }
        let step = (self.end - self.start) / (self.points - 1) as f64;
        Ok((0..self.points)
            .map(|i| {
                if i + 1 == self.points {
                    self.end
                } else {
                    self.start + i as f64 * step
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvesConfig {
    /// Covariate profile for the population curves.
    pub profile: Vec<f64>,
    pub grid: CurveGrid,
    #[serde(default)]
    pub risk: RiskPolicy,
    /// Index into mu used as the trajectory slope for the closed-form
    /// cumulative variation (0-based; default 1, the slope component).
    #[serde(default = "default_slope_index")]
    pub slope_index: usize,
}

fn default_slope_index() -> usize {
    1
}

/// Parses a config document, rejecting unknown keys and reporting the JSON
/// path of the first offending key.
pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T> {
    let deserializer = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(deserializer).map_err(|err| Error::ConfigParse {
        pointer: err.path().to_string(),
        message: err.inner().to_string(),
    })
}

pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

/// Named presets from the published study protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Model I simulation protocol: 20000 iterations, 5000 burn-in, thin 5.
    Model1Sim,
    /// Model II simulation protocol: NUTS, 3000 iterations, 1000 burn-in.
    Model2Sim,
    /// Application protocol: 3 chains, 100000 iterations, 10000 burn-in,
    /// thin 10.
    Table2,
}

impl Preset {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "model1-sim" => Ok(Preset::Model1Sim),
            "model2-sim" => Ok(Preset::Model2Sim),
            "table2" => Ok(Preset::Table2),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected model1-sim, model2-sim, or table2)"
            ))),
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        match self {
            Preset::Model1Sim => SamplerConfig {
                algorithm: Algorithm::MetropolisWithinGibbs,
                chains: 2,
                iterations: 20_000,
                burn_in: 5_000,
                thin: 5,
                seed: 20_240_801,
                target_accept: None,
                max_tree_depth: 10,
                store_random_effects: false,
            },
            Preset::Model2Sim => SamplerConfig {
                algorithm: Algorithm::Nuts,
                chains: 2,
                iterations: 3_000,
                burn_in: 1_000,
                thin: 1,
                seed: 20_240_802,
                target_accept: None,
                max_tree_depth: 10,
                store_random_effects: false,
            },
            Preset::Table2 => SamplerConfig {
                algorithm: Algorithm::MetropolisWithinGibbs,
                chains: 3,
                iterations: 100_000,
                burn_in: 10_000,
                thin: 10,
                seed: 20_240_803,
                target_accept: None,
                max_tree_depth: 10,
                store_random_effects: false,
            },
        }
    }

    /// Full simulation design for the preset, when it has one.
    pub fn design(&self) -> Result<SimulationDesign> {
        match self {
            Preset::Model1Sim => Ok(table1a_design(100, 20_240_801)),
            Preset::Model2Sim => Ok(table1b_design(100, 20_240_802)),
            Preset::Table2 => Err(Error::Config(
                "preset table2 is a fitting protocol; it has no simulation design".into(),
            )),
        }
    }
}

/// The Model I generating values: (lambda, beta, alpha, sigma2) =
/// (0.02, 0.05, 0.25, 4.00), mu = (1.20, 0.25), Sigma = [[2,3],[3,5]].
pub fn table1a_design(n: usize, seed: u64) -> SimulationDesign {
    SimulationDesign {
        n,
        model: ModelSpec {
            kind: ModelKind::ModelI,
            covariates: 1,
            longitudinal_covariate_index: None,
            spline: None,
            priors: PriorSpec::default(),
            quad_points: 200,
        },
        truth: TruthParams {
            lambda: 0.02,
            beta: vec![0.05],
            alpha: 0.25,
            gamma: None,
            mu: vec![1.20, 0.25],
            sigma: vec![vec![2.0, 3.0], vec![3.0, 5.0]],
            sigma2: 4.0,
        },
        covariates: vec![CovariateLaw::Bernoulli { p: 0.5 }],
        schedule: vec![0.0, 2.0, 6.0, 12.0, 18.0],
        censoring: Censoring {
            administrative_time: 20.0,
            independent_rate: 0.02,
        },
        seed,
    }
}

/// The Model II generating values with the four-basis spline setup: order 3,
/// one inner knot, two boundary knots.
pub fn table1b_design(n: usize, seed: u64) -> SimulationDesign {
    SimulationDesign {
        n,
        model: ModelSpec {
            kind: ModelKind::ModelII,
            covariates: 1,
            longitudinal_covariate_index: None,
            spline: Some(SplineConfig::new(3, vec![11.0], (0.0, 22.0)).unwrap()),
            priors: PriorSpec::default(),
            quad_points: 200,
        },
        truth: TruthParams {
            lambda: 0.02,
            beta: vec![0.05],
            alpha: 0.25,
            gamma: None,
            mu: vec![1.20, 0.25, 1.20, 0.25],
            sigma: vec![
                vec![6.60, 5.24, 5.24, 5.93],
                vec![5.24, 7.85, 5.80, 6.08],
                vec![5.24, 5.80, 6.53, 4.57],
                vec![5.93, 6.08, 4.57, 6.43],
            ],
            sigma2: 4.0,
        },
        covariates: vec![CovariateLaw::Bernoulli { p: 0.5 }],
        schedule: vec![0.0, 2.0, 6.0, 12.0, 18.0],
        censoring: Censoring {
            administrative_time: 20.0,
            independent_rate: 0.02,
        },
        seed,
    }
}

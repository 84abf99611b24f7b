//! Domain types and posterior evaluation for the three illustrative models.
//!
//! Model I couples a linear random-intercept/random-slope trajectory with a
//! constant-baseline proportional hazard whose log loads on the trajectory's
//! arc length; the arc length then has the closed form t * sqrt(1 + b1^2).
//! Model Ia adds a covariate effect to the longitudinal mean. Model II
//! replaces the linear trajectory with a B-spline expansion and evaluates
//! the arc length and cumulative hazard by shared-grid quadrature.

mod likelihood;
pub(crate) mod math;
mod unconstrained;

pub use likelihood::{
    arc_length_model1, arc_length_model2, log_hazard, log_lik_longitudinal, log_lik_survival,
    log_posterior, log_prior_random_effects, log_survival, total_log_likelihood,
};
pub(crate) use likelihood::spline_speed;
pub use unconstrained::UnconstrainedSpace;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::splines::SplineConfig;
use crate::{Error, Result};

/// Measurement times may exceed the observed time by at most this much.
pub const TIME_TOLERANCE: f64 = 1e-8;

/// Which of the three illustrative models is being fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "model1")]
    ModelI,
    #[serde(rename = "model1a")]
    ModelIa,
    #[serde(rename = "model2")]
    ModelII,
}

/// One subject's survival tuple, covariates, and longitudinal measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    /// Observed time: min(event, censoring), in months.
    pub t: f64,
    /// Event indicator: 1 if the event was observed, 0 if censored.
    pub delta: u8,
    /// Survival covariates.
    pub x: Vec<f64>,
    /// Measurement times, sorted, within [0, t].
    pub times: Vec<f64>,
    /// Observed longitudinal values at `times`.
    pub z: Vec<f64>,
}

impl SubjectRecord {
    fn validate(&self, covariate_count: usize) -> Result<()> {
        let id = &self.id;
        if !(self.t.is_finite() && self.t > 0.0) {
            return Err(Error::Input(format!(
                "subject {id}: observed time must be positive, got {}",
                self.t
            )));
        }
        if self.delta > 1 {
            return Err(Error::Input(format!(
                "subject {id}: delta must be 0 or 1, got {}",
                self.delta
            )));
        }
        if self.x.len() != covariate_count {
            return Err(Error::Input(format!(
                "subject {id}: expected {covariate_count} covariates, got {}",
                self.x.len()
            )));
        }
        if self.times.is_empty() || self.times.len() != self.z.len() {
            return Err(Error::Input(format!(
                "subject {id}: needs n_i >= 1 measurements with matching times ({} times, {} values)",
                self.times.len(),
                self.z.len()
            )));
        }
        for w in self.times.windows(2) {
            if !(w[0] <= w[1]) {
                return Err(Error::Input(format!(
                    "subject {id}: measurement times must be sorted, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        let first = self.times[0];
        let last = *self.times.last().unwrap();
        if first < 0.0 || last > self.t + TIME_TOLERANCE {
            return Err(Error::Input(format!(
                "subject {id}: measurement times must lie within [0, {}], got [{first}, {last}]",
                self.t
            )));
        }
        if self.z.iter().any(|v| !v.is_finite()) || self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "subject {id}: non-finite measurement or covariate value"
            )));
        }
        Ok(())
    }
}

/// Prior hyper-parameters for the population block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSpec {
    pub lambda_shape: f64,
    pub lambda_rate: f64,
    pub beta_sd: f64,
    pub alpha_sd: f64,
    pub gamma_sd: f64,
    pub mu_sd: f64,
    pub sigma2_shape: f64,
    pub sigma2_rate: f64,
    /// Inverse-Wishart degrees of freedom; defaults to K_re + 1 when unset (0).
    pub wishart_df: f64,
    /// Inverse-Wishart scale matrix; defaults to the identity when empty.
    pub wishart_scale: Vec<Vec<f64>>,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            lambda_shape: 0.01,
            lambda_rate: 0.01,
            beta_sd: 10.0,
            alpha_sd: 10.0,
            gamma_sd: 10.0,
            mu_sd: 10.0,
            sigma2_shape: 0.01,
            sigma2_rate: 0.01,
            wishart_df: 0.0,
            wishart_scale: Vec::new(),
        }
    }
}

impl PriorSpec {
    /// Degrees of freedom resolved against the random-effect dimension.
    pub fn wishart_df_for(&self, k_re: usize) -> f64 {
        if self.wishart_df == 0.0 {
            k_re as f64 + 1.0
        } else {
            self.wishart_df
        }
    }

    /// Scale matrix resolved against the random-effect dimension.
    pub fn wishart_scale_for(&self, k_re: usize) -> Result<DMatrix<f64>> {
        if self.wishart_scale.is_empty() {
            return Ok(DMatrix::identity(k_re, k_re));
        }
        if self.wishart_scale.len() != k_re || self.wishart_scale.iter().any(|r| r.len() != k_re) {
            return Err(Error::Config(format!(
                "wishart_scale must be {k_re}x{k_re}"
            )));
        }
        let m = DMatrix::from_fn(k_re, k_re, |i, j| self.wishart_scale[i][j]);
        if (&m - m.transpose()).abs().max() > 1e-10 {
            return Err(Error::Config("wishart_scale must be symmetric".into()));
        }
        if Cholesky::new(m.clone()).is_none() {
            return Err(Error::NotPositiveDefinite("wishart_scale".into()));
        }
        Ok(m)
    }

    pub fn validate(&self, k_re: usize) -> Result<()> {
        let positive = [
            ("lambda_shape", self.lambda_shape),
            ("lambda_rate", self.lambda_rate),
            ("beta_sd", self.beta_sd),
            ("alpha_sd", self.alpha_sd),
            ("gamma_sd", self.gamma_sd),
            ("mu_sd", self.mu_sd),
            ("sigma2_shape", self.sigma2_shape),
            ("sigma2_rate", self.sigma2_rate),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("prior {name} must be > 0, got {v}")));
            }
        }
        let df = self.wishart_df_for(k_re);
        if df <= k_re as f64 - 1.0 {
            return Err(Error::Config(format!(
                "wishart_df must exceed dimension - 1 = {}, got {df}",
                k_re - 1
            )));
        }
        self.wishart_scale_for(k_re)?;
        Ok(())
    }
}

/// Which model to fit plus its structural configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Number of hazard covariates P.
    pub covariates: usize,
    /// Model Ia only: the x column entering the longitudinal mean with
    /// coefficient gamma.
    #[serde(default)]
    pub longitudinal_covariate_index: Option<usize>,
    /// Model II only.
    #[serde(default)]
    pub spline: Option<SplineConfig>,
    #[serde(default)]
    pub priors: PriorSpec,
    /// Sub-intervals m used for all hazard/arc-length quadrature.
    #[serde(default = "default_quad_points")]
    pub quad_points: usize,
}

fn default_quad_points() -> usize {
    200
}

impl ModelSpec {
    /// Dimension of the subject random effect: 2 for Models I/Ia
    /// (intercept, slope), K for Model II.
    pub fn random_effect_dim(&self) -> usize {
        match self.kind {
            ModelKind::ModelI | ModelKind::ModelIa => 2,
            ModelKind::ModelII => self.spline.as_ref().map_or(0, SplineConfig::basis_count),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ModelKind::ModelI => {
                if self.longitudinal_covariate_index.is_some() {
                    return Err(Error::Config(
                        "longitudinal_covariate_index is a Model Ia field".into(),
                    ));
                }
            }
            ModelKind::ModelIa => {
                let idx = self.longitudinal_covariate_index.ok_or_else(|| {
                    Error::Config("Model Ia requires longitudinal_covariate_index".into())
                })?;
                if idx >= self.covariates {
                    return Err(Error::Config(format!(
                        "longitudinal_covariate_index {idx} out of range for {} covariates",
                        self.covariates
                    )));
                }
            }
            ModelKind::ModelII => {
                let spline = self
                    .spline
                    .as_ref()
                    .ok_or_else(|| Error::Config("Model II requires a spline".into()))?;
                if spline.boundary().0 > 0.0 {
                    return Err(Error::Config(
                        "spline boundary must start at or below 0".into(),
                    ));
                }
            }
        }
        if self.kind != ModelKind::ModelII && self.spline.is_some() {
            return Err(Error::Config("spline is a Model II field".into()));
        }
        if self.quad_points == 0 {
            return Err(Error::Config("quad_points must be >= 1".into()));
        }
        self.priors.validate(self.random_effect_dim())?;
        Ok(())
    }
}

/// One point in the joint parameter space: population parameters plus all
/// subject random effects.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterState {
    /// Constant baseline hazard.
    pub lambda: f64,
    pub beta: DVector<f64>,
    /// Association coefficient loading the arc length in the log hazard.
    pub alpha: f64,
    /// Model Ia longitudinal covariate coefficient.
    pub gamma: Option<f64>,
    /// Random-effect population mean.
    pub mu: DVector<f64>,
    /// Random-effect covariance, K_re x K_re, symmetric positive definite.
    pub sigma: DMatrix<f64>,
    /// Measurement-error variance.
    pub sigma2: f64,
    /// Subject random effects, one row per subject.
    pub b: DMatrix<f64>,
}

impl ParameterState {
    /// Structural (dimension) validation against a spec and subject count.
    pub fn check_shape(&self, spec: &ModelSpec, n_subjects: usize) -> Result<()> {
        let k = spec.random_effect_dim();
        if self.beta.len() != spec.covariates {
            return Err(Error::Config(format!(
                "beta has {} entries, spec wants {}",
                self.beta.len(),
                spec.covariates
            )));
        }
        if self.gamma.is_some() != (spec.kind == ModelKind::ModelIa) {
            return Err(Error::Config("gamma must be present exactly for Model Ia".into()));
        }
        if self.mu.len() != k || self.sigma.nrows() != k || self.sigma.ncols() != k {
            return Err(Error::Config(format!(
                "random-effect block must have dimension {k}"
            )));
        }
        if self.b.nrows() != n_subjects || self.b.ncols() != k {
            return Err(Error::Config(format!(
                "b must be {n_subjects} x {k}, got {} x {}",
                self.b.nrows(),
                self.b.ncols()
            )));
        }
        Ok(())
    }

    /// True when the state lies in the interior of the parameter space:
    /// positive lambda and sigma2, Cholesky-factorizable Sigma, all finite.
    pub fn is_interior(&self) -> bool {
        self.lambda.is_finite()
            && self.lambda > 0.0
            && self.sigma2.is_finite()
            && self.sigma2 > 0.0
            && self.alpha.is_finite()
            && self.beta.iter().all(|v| v.is_finite())
            && self.gamma.is_none_or(|g| g.is_finite())
            && self.mu.iter().all(|v| v.is_finite())
            && self.b.iter().all(|v| v.is_finite())
            && self.sigma.iter().all(|v| v.is_finite())
            && Cholesky::new(self.sigma.clone()).is_some()
    }
}

/// Per-subject caches for the repeated Model II quadrature: basis values at
/// the measurement times and basis derivatives at the grid nodes of
/// [0, t_i]. Models I/Ia need no cache.
#[derive(Debug, Clone)]
pub struct PreparedSubject {
    pub record: SubjectRecord,
    /// Basis at measurement times, n_i rows of K values (Model II).
    pub meas_basis: Option<Vec<Vec<f64>>>,
    /// Basis derivative at the m+1 grid nodes, rows of K values (Model II).
    pub quad_basis_deriv: Option<Vec<Vec<f64>>>,
    /// Quadrature grid over [0, t_i] (Model II).
    pub grid: Option<crate::quadrature::Grid>,
}

/// A validated dataset prepared for repeated posterior evaluation.
#[derive(Debug, Clone)]
pub struct Dataset {
    subjects: Vec<PreparedSubject>,
    total_measurements: usize,
}

impl Dataset {
    pub fn prepare(spec: &ModelSpec, records: Vec<SubjectRecord>) -> Result<Self> {
        spec.validate()?;
        if records.is_empty() {
            return Err(Error::Input("dataset has no subjects".into()));
        }
        let mut subjects = Vec::with_capacity(records.len());
        let mut total_measurements = 0;
        for record in records {
            record.validate(spec.covariates)?;
            total_measurements += record.times.len();
            let prepared = match spec.kind {
                ModelKind::ModelI | ModelKind::ModelIa => PreparedSubject {
                    record,
                    meas_basis: None,
                    quad_basis_deriv: None,
                    grid: None,
                },
                ModelKind::ModelII => {
                    let spline = spec.spline.as_ref().unwrap();
                    let (_, end) = spline.boundary();
                    if record.t > end {
                        return Err(Error::Domain {
                            what: "observed time beyond spline boundary",
                            value: record.t,
                            lo: 0.0,
                            hi: end,
                        });
                    }
                    let grid = crate::quadrature::Grid::new(record.t, spec.quad_points)?;
                    let meas_basis = record
                        .times
                        .iter()
                        .map(|&s| spline.eval_basis(s.min(end)))
                        .collect::<Result<Vec<_>>>()?;
                    let quad_basis_deriv = grid
                        .nodes()
                        .map(|s| spline.eval_basis_derivative(s))
                        .collect::<Result<Vec<_>>>()?;
                    PreparedSubject {
                        record,
                        meas_basis: Some(meas_basis),
                        quad_basis_deriv: Some(quad_basis_deriv),
                        grid: Some(grid),
                    }
                }
            };
            subjects.push(prepared);
        }
        Ok(Dataset {
            subjects,
            total_measurements,
        })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn subject(&self, i: usize) -> &PreparedSubject {
        &self.subjects[i]
    }

    pub fn subjects(&self) -> &[PreparedSubject] {
        &self.subjects
    }

    pub fn total_measurements(&self) -> usize {
        self.total_measurements
    }

    /// Total observed follow-up time and event count (used to initialize
    /// the baseline hazard).
    pub fn follow_up_summary(&self) -> (f64, usize) {
        let total_time: f64 = self.subjects.iter().map(|s| s.record.t).sum();
        let events = self
            .subjects
            .iter()
            .filter(|s| s.record.delta == 1)
            .count();
        (total_time, events)
    }
}

/// Names of the population parameters in reporting order.
pub fn population_names(spec: &ModelSpec) -> Vec<String> {
    let mut names = vec!["lambda".to_string()];
    for p in 0..spec.covariates {
        names.push(format!("beta[{}]", p + 1));
    }
    names.push("alpha".to_string());
    if spec.kind == ModelKind::ModelIa {
        names.push("gamma".to_string());
    }
    let k = spec.random_effect_dim();
    for j in 0..k {
        names.push(format!("mu[{}]", j + 1));
    }
    for i in 0..k {
        for j in 0..=i {
            names.push(format!("Sigma[{},{}]", i + 1, j + 1));
        }
    }
    names.push("sigma2".to_string());
    names
}

/// Extracts the population parameters on the natural scale, matching
/// [`population_names`] order.
pub fn population_values(spec: &ModelSpec, state: &ParameterState) -> Vec<f64> {
    let mut out = vec![state.lambda];
    out.extend(state.beta.iter().copied());
    out.push(state.alpha);
    if spec.kind == ModelKind::ModelIa {
        out.push(state.gamma.unwrap_or(0.0));
    }
    out.extend(state.mu.iter().copied());
    let k = spec.random_effect_dim();
    for i in 0..k {
        for j in 0..=i {
            out.push(state.sigma[(i, j)]);
        }
    }
    out.push(state.sigma2);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_spec(kind: ModelKind) -> ModelSpec {
        ModelSpec {
            kind,
            covariates: 1,
            longitudinal_covariate_index: if kind == ModelKind::ModelIa {
                Some(0)
            } else {
                None
            },
            spline: if kind == ModelKind::ModelII {
                Some(SplineConfig::new(3, vec![10.0], (0.0, 20.0)).unwrap())
            } else {
                None
            },
            priors: PriorSpec::default(),
            quad_points: 50,
        }
    }

    #[test]
    fn spec_validation_catches_kind_mismatches() {
        let mut spec = toy_spec(ModelKind::ModelI);
        spec.longitudinal_covariate_index = Some(0);
        assert!(spec.validate().is_err());

        let mut spec = toy_spec(ModelKind::ModelIa);
        spec.longitudinal_covariate_index = Some(3);
        assert!(spec.validate().is_err());

        let mut spec = toy_spec(ModelKind::ModelII);
        spec.spline = None;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn subject_validation() {
        let spec = toy_spec(ModelKind::ModelI);
        let good = SubjectRecord {
            id: "s1".into(),
            t: 5.0,
            delta: 1,
            x: vec![1.0],
            times: vec![0.0, 2.0],
            z: vec![1.0, 1.5],
        };
        assert!(Dataset::prepare(&spec, vec![good.clone()]).is_ok());

        let mut unsorted = good.clone();
        unsorted.times = vec![2.0, 0.0];
        unsorted.z = vec![1.0, 1.5];
        assert!(Dataset::prepare(&spec, vec![unsorted]).is_err());

        let mut late = good.clone();
        late.times = vec![0.0, 6.0];
        assert!(Dataset::prepare(&spec, vec![late]).is_err());

        let mut bad_delta = good.clone();
        bad_delta.delta = 2;
        assert!(Dataset::prepare(&spec, vec![bad_delta]).is_err());

        let mut empty = good;
        empty.times.clear();
        empty.z.clear();
        assert!(Dataset::prepare(&spec, vec![empty]).is_err());
    }

    #[test]
    fn prior_defaults_resolve_by_dimension() {
        let priors = PriorSpec::default();
        assert_eq!(priors.wishart_df_for(2), 3.0);
        assert_eq!(priors.wishart_scale_for(4).unwrap(), DMatrix::identity(4, 4));
        assert!(priors.validate(2).is_ok());
    }

    #[test]
    fn population_names_match_values() {
        let spec = toy_spec(ModelKind::ModelIa);
        let names = population_names(&spec);
        // lambda, beta[1], alpha, gamma, mu[1..2], Sigma lower tri (3), sigma2
        assert_eq!(names.len(), 1 + 1 + 1 + 1 + 2 + 3 + 1);
        let state = ParameterState {
            lambda: 0.02,
            beta: DVector::from_vec(vec![0.05]),
            alpha: 0.25,
            gamma: Some(0.1),
            mu: DVector::from_vec(vec![1.2, 0.25]),
            sigma: DMatrix::from_row_slice(2, 2, &[2.0, 3.0, 3.0, 5.0]),
            sigma2: 4.0,
            b: DMatrix::zeros(3, 2),
        };
        let values = population_values(&spec, &state);
        assert_eq!(values.len(), names.len());
        assert_eq!(values[0], 0.02);
        assert_eq!(values[3], 0.1);
        assert_eq!(*values.last().unwrap(), 4.0);
        assert!(state.check_shape(&spec, 3).is_ok());
        assert!(state.is_interior());
    }
}

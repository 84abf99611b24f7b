//! Dataset generation by the probability integral transform: draw
//! v ~ U(0,1) and solve H(t) = -log v, in closed form for Models I/Ia and
//! by monotone root-finding on the nested cumulative hazard for Model II.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::model::{ModelKind, ModelSpec, ParameterState, SubjectRecord};
use crate::quadrature::{self, Grid};
use crate::rng::{stream, StreamKind};
use crate::splines::SplineConfig;
use crate::{Error, Result};

/// Marginal law of one hazard covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum CovariateLaw {
    Bernoulli { p: f64 },
    Normal { mean: f64, sd: f64 },
}

impl CovariateLaw {
    fn validate(&self) -> Result<()> {
        match self {
            CovariateLaw::Bernoulli { p } => {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::Config(format!(
                        "Bernoulli covariate probability must be in [0,1], got {p}"
                    )));
                }
            }
            CovariateLaw::Normal { sd, .. } => {
                if !(sd.is_finite() && *sd >= 0.0) {
                    return Err(Error::Config(format!(
                        "Normal covariate sd must be >= 0, got {sd}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn draw(&self, rng: &mut impl Rng) -> f64 {
        match self {
            CovariateLaw::Bernoulli { p } => f64::from(rng.random::<f64>() < *p),
            CovariateLaw::Normal { mean, sd } => {
                let e: f64 = rng.sample(StandardNormal);
                mean + sd * e
            }
        }
    }
}

/// Right-censoring mechanism: administrative cutoff plus an optional
/// independent exponential censoring time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Censoring {
    pub administrative_time: f64,
    #[serde(default)]
    pub independent_rate: f64,
}

/// Data-generating values for the population block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthParams {
    pub lambda: f64,
    pub beta: Vec<f64>,
    pub alpha: f64,
    #[serde(default)]
    pub gamma: Option<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    pub sigma2: f64,
}

impl TruthParams {
    pub fn sigma_matrix(&self) -> DMatrix<f64> {
        let k = self.sigma.len();
        DMatrix::from_fn(k, k, |i, j| self.sigma[i][j])
    }

    /// Expands into a full state with the given random-effect matrix.
    pub fn to_state(&self, b: DMatrix<f64>) -> ParameterState {
        ParameterState {
            lambda: self.lambda,
            beta: DVector::from_vec(self.beta.clone()),
            alpha: self.alpha,
            gamma: self.gamma,
            mu: DVector::from_vec(self.mu.clone()),
            sigma: self.sigma_matrix(),
            sigma2: self.sigma2,
            b,
        }
    }
}

/// Full description of one simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationDesign {
    pub n: usize,
    pub model: ModelSpec,
    pub truth: TruthParams,
    pub covariates: Vec<CovariateLaw>,
    /// Nominal measurement times (months), sorted, starting at 0.
    pub schedule: Vec<f64>,
    pub censoring: Censoring,
    pub seed: u64,
}

impl SimulationDesign {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.n == 0 {
            return Err(Error::Config("simulation needs n >= 1 subjects".into()));
        }
        if self.covariates.len() != self.model.covariates {
            return Err(Error::Config(format!(
                "covariate laws ({}) must match model covariate count ({})",
                self.covariates.len(),
                self.model.covariates
            )));
        }
        for law in &self.covariates {
            law.validate()?;
        }
        if self.schedule.is_empty() || self.schedule[0] != 0.0 {
            return Err(Error::Config(
                "measurement schedule must be non-empty and start at the baseline time 0".into(),
            ));
        }
        for w in self.schedule.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::Config(
                    "measurement schedule must be strictly increasing".into(),
                ));
            }
        }
        if !(self.censoring.administrative_time > 0.0) {
            return Err(Error::Config(format!(
                "administrative censoring time must be > 0, got {}",
                self.censoring.administrative_time
            )));
        }
        if !(self.censoring.independent_rate >= 0.0) {
            return Err(Error::Config(
                "independent censoring rate must be >= 0".into(),
            ));
        }
        let k = self.model.random_effect_dim();
        if self.truth.mu.len() != k
            || self.truth.sigma.len() != k
            || self.truth.sigma.iter().any(|r| r.len() != k)
        {
            return Err(Error::Config(format!(
                "truth random-effect block must have dimension {k}"
            )));
        }
        if self.truth.beta.len() != self.model.covariates {
            return Err(Error::Config("truth beta length must match covariates".into()));
        }
        if self.truth.gamma.is_some() != (self.model.kind == ModelKind::ModelIa) {
            return Err(Error::Config(
                "truth gamma must be present exactly for Model Ia".into(),
            ));
        }
        if !(self.truth.lambda > 0.0 && self.truth.sigma2 > 0.0) {
            return Err(Error::Config(
                "truth lambda and sigma2 must be positive".into(),
            ));
        }
        if Cholesky::new(self.truth.sigma_matrix()).is_none() {
            return Err(Error::NotPositiveDefinite("truth Sigma".into()));
        }
        if let Some(spline) = &self.model.spline {
            let (_, end) = spline.boundary();
            if self.censoring.administrative_time > end {
                return Err(Error::Config(format!(
                    "administrative censoring time {} exceeds the spline boundary {end}",
                    self.censoring.administrative_time
                )));
            }
            if self.schedule.iter().any(|s| *s > end) {
                return Err(Error::Config(
                    "measurement schedule exceeds the spline boundary".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Draws n random-effect vectors b_i = mu + L eta with L the Cholesky
/// factor of Sigma. A non-positive-definite Sigma is rejected, not repaired.
pub fn draw_random_effects(
    truth: &TruthParams,
    n: usize,
    rng: &mut impl Rng,
) -> Result<DMatrix<f64>> {
    let sigma = truth.sigma_matrix();
    let chol =
        Cholesky::new(sigma).ok_or_else(|| Error::NotPositiveDefinite("truth Sigma".into()))?;
    let l = chol.l();
    let k = truth.mu.len();
    let mut b = DMatrix::zeros(n, k);
    for i in 0..n {
        let eta = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let bi = DVector::from_vec(truth.mu.clone()) + &l * eta;
        for c in 0..k {
            b[(i, c)] = bi[c];
        }
    }
    Ok(b)
}

/// Closed-form inversion of the Model I cumulative hazard:
/// t = (1/(alpha c)) log(1 + alpha c (-log v) / (lambda e^lp)),
/// with the exponential limit (-log v)/(lambda e^lp) as alpha -> 0.
/// Returns infinity when the target hazard is unreachable (alpha < 0).
pub fn invert_event_time_model1(
    v: f64,
    lambda: f64,
    linpred: f64,
    alpha: f64,
    b1: f64,
) -> f64 {
    debug_assert!(v > 0.0 && v < 1.0);
    let target = -v.ln();
    let c = (1.0 + b1 * b1).sqrt();
    let rate = lambda * linpred.exp();
    if (alpha * c).abs() < 1e-10 {
        return target / rate;
    }
    let arg = 1.0 + alpha * c * target / rate;
    if arg <= 0.0 {
        return f64::INFINITY;
    }
    arg.ln() / (alpha * c)
}

/// Bracketing/bisection controls for Model II inversion.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RootConfig {
    /// Hard cap on the bracketing search (months).
    pub t_max: f64,
    /// Absolute tolerance on the located time.
    pub tol: f64,
}

impl Default for RootConfig {
    fn default() -> Self {
        RootConfig {
            t_max: 1000.0,
            tol: 1e-8,
        }
    }
}

/// Outcome of a Model II event-time inversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Inversion {
    Time(f64),
    /// H never exceeded the target below the cap; carries H at the cap.
    BeyondCap { cap: f64, h_at_cap: f64 },
}

/// Solves H(t) = -log v for Model II by doubling the upper bound from t = 1
/// until H exceeds the target (capped at min(t_max, spline end)), then
/// bisecting. H is monotone increasing, so the root is unique.
pub fn invert_event_time_model2(
    v: f64,
    lambda: f64,
    linpred: f64,
    alpha: f64,
    b: &[f64],
    spline: &SplineConfig,
    quad_points: usize,
    cfg: &RootConfig,
) -> Result<Inversion> {
    debug_assert!(v > 0.0 && v < 1.0);
    let target = -v.ln();
    let (_, end) = spline.boundary();
    let cap = cfg.t_max.min(end);
    let speed = crate::model::spline_speed(b, spline);
    let h_at = |t: f64| -> Result<f64> {
        let grid = Grid::new(t, quad_points)?;
        quadrature::nested_cumulative_hazard(|_| lambda, linpred, alpha, &speed, &grid)
    };

    let mut hi = 1.0f64.min(cap);
    let mut h_hi = h_at(hi)?;
    while h_hi < target && hi < cap {
        hi = (hi * 2.0).min(cap);
        h_hi = h_at(hi)?;
    }
    if h_hi < target {
        return Ok(Inversion::BeyondCap {
            cap,
            h_at_cap: h_hi,
        });
    }
    let mut lo = 0.0;
    while hi - lo > cfg.tol {
        let mid = 0.5 * (lo + hi);
        let h_mid = h_at(mid)?;
        if (h_mid - target).abs() < 1e-10 {
            return Ok(Inversion::Time(mid));
        }
        if h_mid < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Inversion::Time(0.5 * (lo + hi)))
}

/// Applies the censoring mechanism: c = min(administrative, exponential
/// draw); returns (min(y, c), indicator of y <= c).
pub fn apply_censoring(event_time: f64, censoring: &Censoring, rng: &mut impl Rng) -> (f64, u8) {
    let mut c = censoring.administrative_time;
    if censoring.independent_rate > 0.0 {
        let u: f64 = rng.random();
        let exp_draw = -u.max(f64::MIN_POSITIVE).ln() / censoring.independent_rate;
        c = c.min(exp_draw);
    }
    if event_time <= c {
        (event_time, 1)
    } else {
        (c, 0)
    }
}

/// Latent truth emitted next to the observable dataset so simulation
/// studies can score coverage and round trips.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub params: TruthParams,
    /// Per-subject random effects.
    pub b: Vec<Vec<f64>>,
    /// Raw event times before censoring; None when beyond the search cap.
    pub event_times: Vec<Option<f64>>,
    /// Uniform draws v_i used by the probability integral transform.
    pub uniforms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub records: Vec<SubjectRecord>,
    pub truth: GroundTruth,
    /// Subjects whose inversion failed and could not be resolved by
    /// censoring; the dataset is rejected when this exceeds 1% of n.
    pub inversion_failures: usize,
}

/// Longitudinal mean of the true trajectory at time s.
fn true_mean(design: &SimulationDesign, b: &[f64], x: &[f64], s: f64) -> f64 {
    match design.model.kind {
        ModelKind::ModelI => b[0] + b[1] * s,
        ModelKind::ModelIa => {
            let idx = design.model.longitudinal_covariate_index.unwrap();
            b[0] + b[1] * s + design.truth.gamma.unwrap() * x[idx]
        }
        ModelKind::ModelII => {
            let spline = design.model.spline.as_ref().unwrap();
            spline
                .eval_basis(s)
                .map(|basis| basis.iter().zip(b.iter()).map(|(bv, cv)| bv * cv).sum())
                .unwrap_or(f64::NAN)
        }
    }
}

/// Measurements at the schedule times truncated at t, with Gaussian noise.
pub fn generate_longitudinal(
    design: &SimulationDesign,
    b: &[f64],
    x: &[f64],
    t: f64,
    rng: &mut impl Rng,
) -> (Vec<f64>, Vec<f64>) {
    let sd = design.truth.sigma2.sqrt();
    let times: Vec<f64> = design
        .schedule
        .iter()
        .copied()
        .filter(|s| *s <= t)
        .collect();
    let z = times
        .iter()
        .map(|&s| {
            let e: f64 = rng.sample(StandardNormal);
            true_mean(design, b, x, s) + sd * e
        })
        .collect();
    (times, z)
}

/// Generates one dataset. Deterministic under the design seed: every draw
/// comes from a stream keyed by (seed, purpose, subject), so results do not
/// depend on execution order.
pub fn generate_dataset(design: &SimulationDesign) -> Result<GeneratedDataset> {
    design.validate()?;
    let n = design.n;
    let k = design.model.random_effect_dim();
    let chol = Cholesky::new(design.truth.sigma_matrix())
        .ok_or_else(|| Error::NotPositiveDefinite("truth Sigma".into()))?;
    let l = chol.l();
    let mu = DVector::from_vec(design.truth.mu.clone());
    let root_cfg = RootConfig::default();

    let mut records = Vec::with_capacity(n);
    let mut b_rows = Vec::with_capacity(n);
    let mut event_times = Vec::with_capacity(n);
    let mut uniforms = Vec::with_capacity(n);
    let mut failures = 0usize;

    for i in 0..n {
        let idx = i as u64;
        let mut cov_rng = stream(design.seed, StreamKind::Covariates, idx);
        let x: Vec<f64> = design
            .covariates
            .iter()
            .map(|law| law.draw(&mut cov_rng))
            .collect();

        let mut re_rng = stream(design.seed, StreamKind::RandomEffects, idx);
        let eta = DVector::from_fn(k, |_, _| re_rng.sample::<f64, _>(StandardNormal));
        let bi = &mu + &l * eta;
        let b: Vec<f64> = bi.iter().copied().collect();

        let mut event_rng = stream(design.seed, StreamKind::EventTime, idx);
        let mut v: f64 = event_rng.random();
        while v <= 0.0 {
            v = event_rng.random();
        }
        let linpred: f64 = x
            .iter()
            .zip(design.truth.beta.iter())
            .map(|(xv, bv)| xv * bv)
            .sum();

        let mut censor_rng = stream(design.seed, StreamKind::Censoring, idx);
        let (event_time, t, delta) = match design.model.kind {
            ModelKind::ModelI | ModelKind::ModelIa => {
                let y = invert_event_time_model1(
                    v,
                    design.truth.lambda,
                    linpred,
                    design.truth.alpha,
                    b[1],
                );
                let (t, delta) = apply_censoring(y, &design.censoring, &mut censor_rng);
                (Some(y).filter(|y| y.is_finite()), t, delta)
            }
            ModelKind::ModelII => {
                let spline = design.model.spline.as_ref().unwrap();
                let outcome = invert_event_time_model2(
                    v,
                    design.truth.lambda,
                    linpred,
                    design.truth.alpha,
                    &b,
                    spline,
                    design.model.quad_points,
                    &root_cfg,
                );
                match outcome {
                    Ok(Inversion::Time(y)) => {
                        let (t, delta) = apply_censoring(y, &design.censoring, &mut censor_rng);
                        (Some(y), t, delta)
                    }
                    Ok(Inversion::BeyondCap { cap, .. }) => {
                        // the event lies beyond the searchable horizon; the
                        // subject is still observable when censoring strikes
                        // first, otherwise the inversion failed
                        let (t, delta) = apply_censoring(f64::INFINITY, &design.censoring, &mut censor_rng);
                        if delta == 0 && t <= cap {
                            (None, t, 0)
                        } else {
                            failures += 1;
                            uniforms.push(v);
                            event_times.push(None);
                            b_rows.push(b);
                            continue;
                        }
                    }
                    Err(_) => {
                        failures += 1;
                        uniforms.push(v);
                        event_times.push(None);
                        b_rows.push(b);
                        continue;
                    }
                }
            }
        };

        let mut meas_rng = stream(design.seed, StreamKind::Measurement, idx);
        let (times, z) = generate_longitudinal(design, &b, &x, t, &mut meas_rng);

        records.push(SubjectRecord {
            id: format!("subj{:05}", i + 1),
            t,
            delta,
            x,
            times,
            z,
        });
        b_rows.push(b);
        event_times.push(event_time);
        uniforms.push(v);
    }

    if failures * 100 > n {
        return Err(Error::DatasetRejected {
            failed_subjects: failures,
            total: n,
        });
    }

    Ok(GeneratedDataset {
        records,
        truth: GroundTruth {
            params: design.truth.clone(),
            b: b_rows,
            event_times,
            uniforms,
        },
        inversion_failures: failures,
    })
}

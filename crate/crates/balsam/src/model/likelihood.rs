//! Hazard, survival, arc-length, and log-likelihood/log-posterior evaluation.

use nalgebra::Cholesky;

use super::math::{expm1_over_x, ln_gamma, ln_multigamma};
use super::{Dataset, ModelKind, ModelSpec, ParameterState, PreparedSubject};
use crate::quadrature::{self, Grid};
use crate::splines::SplineConfig;
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const MAX_EXP_ARG: f64 = 700.0;

/// Closed-form arc length of the linear trajectory: t * sqrt(1 + b1^2).
pub fn arc_length_model1(b1: f64, t: f64) -> f64 {
    t * (1.0 + b1 * b1).sqrt()
}

/// Arc length of the spline trajectory on [0, t] by composite trapezoid
/// with m sub-intervals.
pub fn arc_length_model2(b: &[f64], spline: &SplineConfig, t: f64, m: usize) -> Result<f64> {
    let grid = Grid::new(t, m)?;
    quadrature::trapezoid_arc_length(spline_speed(b, spline), &grid)
}

/// Speed |g'(s)| = sqrt(1 + Q'(s)^2) of the spline trajectory; returns NaN
/// outside the domain so quadrature surfaces it as a numerical error.
pub(crate) fn spline_speed<'a>(
    b: &'a [f64],
    spline: &'a SplineConfig,
) -> impl Fn(f64) -> f64 + 'a {
    move |s| match spline.eval_basis_derivative(s) {
        Ok(d) => {
            let q: f64 = d.iter().zip(b.iter()).map(|(dv, bv)| dv * bv).sum();
            (1.0 + q * q).sqrt()
        }
        Err(_) => f64::NAN,
    }
}

fn linear_predictor(state: &ParameterState, x: &[f64]) -> f64 {
    x.iter()
        .zip(state.beta.iter())
        .map(|(xi, bi)| xi * bi)
        .sum()
}

/// (G_i(s), H_i(s)) for Models I/Ia via the closed forms of the appendix.
fn model1_survival_parts(
    lambda: f64,
    linpred: f64,
    alpha: f64,
    b1: f64,
    s: f64,
) -> Result<(f64, f64)> {
    let c = (1.0 + b1 * b1).sqrt();
    let g = s * c;
    let x = alpha * g;
    if x + linpred > MAX_EXP_ARG || linpred > MAX_EXP_ARG {
        return Err(Error::Numerical(format!(
            "survival overflow at s = {s}: alpha * G = {x}, linear predictor = {linpred}"
        )));
    }
    // H = lambda e^lp (e^x - 1)/(alpha c) = lambda e^lp s (e^x - 1)/x,
    // reducing continuously to lambda e^lp s as alpha -> 0.
    let h = if x.abs() < 1e-8 {
        lambda * linpred.exp() * s
    } else {
        lambda * linpred.exp() * s * expm1_over_x(x)
    };
    if !h.is_finite() {
        return Err(Error::Numerical(format!(
            "cumulative hazard not finite at s = {s}"
        )));
    }
    Ok((g, h))
}

/// (G_i(s), H_i(s)) for Model II from the cached per-subject grid; cost O(m).
fn model2_survival_parts_cached(
    prep: &PreparedSubject,
    b: &[f64],
    lambda: f64,
    linpred: f64,
    alpha: f64,
) -> Result<(f64, f64)> {
    let rows = prep.quad_basis_deriv.as_ref().unwrap();
    let grid = prep.grid.as_ref().unwrap();
    let delta = grid.delta();
    let mut speeds = Vec::with_capacity(rows.len());
    for row in rows {
        let q: f64 = row.iter().zip(b.iter()).map(|(d, bv)| d * bv).sum();
        speeds.push((1.0 + q * q).sqrt());
    }
    let arc = quadrature::prefix_trapezoid(&speeds, delta);
    let mut hazard = Vec::with_capacity(arc.len());
    for (k, g) in arc.iter().enumerate() {
        let arg = linpred + alpha * g;
        if arg > MAX_EXP_ARG {
            return Err(Error::Numerical(format!(
                "cumulative hazard overflow: alpha * G = {} at node s = {}",
                alpha * g,
                grid.node(k)
            )));
        }
        hazard.push(lambda * arg.exp());
    }
    let h = quadrature::trapezoid_from_samples(&hazard, delta);
    Ok((*arc.last().unwrap(), h))
}

/// G_i(s) and H_i(s) for subject i at an arbitrary s in [0, t_i] or beyond
/// (Model II limited to the spline domain). Uses the cached grid when s is
/// the subject's observed time.
fn survival_parts(
    spec: &ModelSpec,
    state: &ParameterState,
    data: &Dataset,
    i: usize,
    s: f64,
) -> Result<(f64, f64)> {
    let prep = data.subject(i);
    let linpred = linear_predictor(state, &prep.record.x);
    let bi: Vec<f64> = state.b.row(i).iter().copied().collect();
    match spec.kind {
        ModelKind::ModelI | ModelKind::ModelIa => {
            model1_survival_parts(state.lambda, linpred, state.alpha, bi[1], s)
        }
        ModelKind::ModelII => {
            if s == prep.record.t {
                return model2_survival_parts_cached(prep, &bi, state.lambda, linpred, state.alpha);
            }
            let spline = spec.spline.as_ref().unwrap();
            let (_, end) = spline.boundary();
            if s > end {
                return Err(Error::Domain {
                    what: "survival evaluation point beyond spline boundary",
                    value: s,
                    lo: 0.0,
                    hi: end,
                });
            }
            if s == 0.0 {
                return Ok((0.0, 0.0));
            }
            let grid = Grid::new(s, spec.quad_points)?;
            let g = quadrature::trapezoid_arc_length(spline_speed(&bi, spline), &grid)?;
            let h = quadrature::nested_cumulative_hazard(
                |_| state.lambda,
                linpred,
                state.alpha,
                spline_speed(&bi, spline),
                &grid,
            )?;
            Ok((g, h))
        }
    }
}

/// log lambda_i(s) = log lambda + x'beta + alpha G_i(s).
pub fn log_hazard(
    spec: &ModelSpec,
    state: &ParameterState,
    data: &Dataset,
    i: usize,
    s: f64,
) -> Result<f64> {
    let t = data.subject(i).record.t;
    if !(0.0..=t).contains(&s) {
        return Err(Error::Domain {
            what: "hazard evaluation point",
            value: s,
            lo: 0.0,
            hi: t,
        });
    }
    let (g, _) = survival_parts(spec, state, data, i, s)?;
    let linpred = linear_predictor(state, &data.subject(i).record.x);
    Ok(state.lambda.ln() + linpred + state.alpha * g)
}

/// log S_i(s) = -H_i(s).
pub fn log_survival(
    spec: &ModelSpec,
    state: &ParameterState,
    data: &Dataset,
    i: usize,
    s: f64,
) -> Result<f64> {
    if s < 0.0 {
        return Err(Error::Domain {
            what: "survival evaluation point",
            value: s,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    let (_, h) = survival_parts(spec, state, data, i, s).map_err(|e| match e {
        Error::Numerical(msg) => Error::Numerical(format!(
            "subject {}: {msg}",
            data.subject(i).record.id
        )),
        other => other,
    })?;
    Ok(-h)
}

/// Survival log-likelihood contribution of subject i:
/// delta * log hazard(t_i) + log survival(t_i).
pub fn log_lik_survival(
    spec: &ModelSpec,
    state: &ParameterState,
    data: &Dataset,
    i: usize,
) -> Result<f64> {
    let prep = data.subject(i);
    let t = prep.record.t;
    let (g, h) = survival_parts(spec, state, data, i, t)?;
    let linpred = linear_predictor(state, &prep.record.x);
    let mut ll = -h;
    if prep.record.delta == 1 {
        ll += state.lambda.ln() + linpred + state.alpha * g;
    }
    Ok(ll)
}

fn longitudinal_mean(
    spec: &ModelSpec,
    state: &ParameterState,
    prep: &PreparedSubject,
    i: usize,
    j: usize,
) -> f64 {
    match spec.kind {
        ModelKind::ModelI => state.b[(i, 0)] + state.b[(i, 1)] * prep.record.times[j],
        ModelKind::ModelIa => {
            let idx = spec.longitudinal_covariate_index.unwrap();
            state.b[(i, 0)]
                + state.b[(i, 1)] * prep.record.times[j]
                + state.gamma.unwrap() * prep.record.x[idx]
        }
        ModelKind::ModelII => {
            let basis = &prep.meas_basis.as_ref().unwrap()[j];
            basis
                .iter()
                .enumerate()
                .map(|(l, bv)| bv * state.b[(i, l)])
                .sum()
        }
    }
}

/// Gaussian longitudinal log-likelihood of subject i with the
/// kind-appropriate mean.
pub fn log_lik_longitudinal(
    spec: &ModelSpec,
    state: &ParameterState,
    data: &Dataset,
    i: usize,
) -> f64 {
    debug_assert!(state.sigma2 > 0.0);
    let prep = data.subject(i);
    let mut ll = 0.0;
    for j in 0..prep.record.times.len() {
        let res = prep.record.z[j] - longitudinal_mean(spec, state, prep, i, j);
        ll += -0.5 * (LN_2PI + state.sigma2.ln()) - res * res / (2.0 * state.sigma2);
    }
    ll
}

/// Multivariate normal log-density of b_i given (mu, Sigma), via Cholesky
/// solve; no explicit inverse is formed.
pub fn log_prior_random_effects(state: &ParameterState, i: usize) -> Result<f64> {
    let chol = Cholesky::new(state.sigma.clone())
        .ok_or_else(|| Error::NotPositiveDefinite("Sigma".into()))?;
    Ok(mvn_logpdf_with_chol(state, i, &chol))
}

fn mvn_logpdf_with_chol(state: &ParameterState, i: usize, chol: &Cholesky<f64, nalgebra::Dyn>) -> f64 {
    let k = state.mu.len();
    let diff = state.b.row(i).transpose() - &state.mu;
    let u = chol.l().solve_lower_triangular(&diff).unwrap();
    let log_det_half: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum();
    -0.5 * k as f64 * LN_2PI - log_det_half - 0.5 * u.norm_squared()
}

fn gamma_ln_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

fn normal_ln_pdf(x: f64, sd: f64) -> f64 {
    -0.5 * LN_2PI - sd.ln() - x * x / (2.0 * sd * sd)
}

fn inv_gamma_ln_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
}

fn inv_wishart_ln_pdf(
    sigma_chol: &Cholesky<f64, nalgebra::Dyn>,
    df: f64,
    scale: &nalgebra::DMatrix<f64>,
) -> f64 {
    let k = scale.nrows();
    let ln_det_sigma: f64 = 2.0 * sigma_chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let ln_det_scale = Cholesky::new(scale.clone())
        .map(|c| 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
        .unwrap_or(f64::NEG_INFINITY);
    // tr(Psi Sigma^-1) via Sigma^-1 = L^-T L^-1
    let inv = sigma_chol.inverse();
    let trace = (scale * &inv).trace();
    0.5 * df * ln_det_scale
        - 0.5 * df * k as f64 * std::f64::consts::LN_2
        - ln_multigamma(k, 0.5 * df)
        - 0.5 * (df + k as f64 + 1.0) * ln_det_sigma
        - 0.5 * trace
}

/// Log of all population-parameter priors at `state`.
pub(crate) fn log_population_priors(
    spec: &ModelSpec,
    state: &ParameterState,
    sigma_chol: &Cholesky<f64, nalgebra::Dyn>,
) -> f64 {
    let priors = &spec.priors;
    let mut lp = gamma_ln_pdf(state.lambda, priors.lambda_shape, priors.lambda_rate);
    for bv in state.beta.iter() {
        lp += normal_ln_pdf(*bv, priors.beta_sd);
    }
    lp += normal_ln_pdf(state.alpha, priors.alpha_sd);
    if let Some(g) = state.gamma {
        lp += normal_ln_pdf(g, priors.gamma_sd);
    }
    for mv in state.mu.iter() {
        lp += normal_ln_pdf(*mv, priors.mu_sd);
    }
    let k = spec.random_effect_dim();
    let scale = priors.wishart_scale_for(k).unwrap();
    lp += inv_wishart_ln_pdf(sigma_chol, priors.wishart_df_for(k), &scale);
    lp += inv_gamma_ln_pdf(state.sigma2, priors.sigma2_shape, priors.sigma2_rate);
    lp
}

/// Total conditional log-likelihood: survival + longitudinal + random-effect
/// density at the sampled b, summed over subjects. This is the deviance
/// ingredient (deviance = -2 times this), excluding the population priors.
pub fn total_log_likelihood(
    spec: &ModelSpec,
    state: &ParameterState,
    data: &Dataset,
) -> Result<f64> {
    let chol = Cholesky::new(state.sigma.clone())
        .ok_or_else(|| Error::NotPositiveDefinite("Sigma".into()))?;
    let mut total = 0.0;
    for i in 0..data.len() {
        total += log_lik_survival(spec, state, data, i)?;
        total += log_lik_longitudinal(spec, state, data, i);
        total += mvn_logpdf_with_chol(state, i, &chol);
    }
    Ok(total)
}

/// Joint log posterior over all parameters and random effects. Returns
/// negative infinity (a rejection signal for samplers) for boundary
/// violations or numerical overflow instead of erroring.
pub fn log_posterior(spec: &ModelSpec, state: &ParameterState, data: &Dataset) -> f64 {
    if !state.is_interior() {
        return f64::NEG_INFINITY;
    }
    let chol = match Cholesky::new(state.sigma.clone()) {
        Some(c) => c,
        None => return f64::NEG_INFINITY,
    };
    let mut total = 0.0;
    for i in 0..data.len() {
        match log_lik_survival(spec, state, data, i) {
            Ok(v) if v.is_finite() => total += v,
            _ => return f64::NEG_INFINITY,
        }
        let ll = log_lik_longitudinal(spec, state, data, i);
        if !ll.is_finite() {
            return f64::NEG_INFINITY;
        }
        total += ll;
        total += mvn_logpdf_with_chol(state, i, &chol);
    }
    total += log_population_priors(spec, state, &chol);
    if total.is_finite() {
        total
    } else {
        f64::NEG_INFINITY
    }
}

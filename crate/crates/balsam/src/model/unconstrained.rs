//! Unconstrained reparameterization of the joint parameter space and exact
//! gradients of the discretized log posterior.
//!
//! Gradient-based sampling needs an unconstrained space, so the state maps
//! to coordinates (log lambda, beta, alpha, [gamma], mu, Cholesky factor of
//! Sigma with log diagonal, log sigma2, b) and the target density picks up
//! the log Jacobian of that transformation. The gradient differentiates the
//! discretized objective itself: the quadrature grid is fixed, so the
//! gradient is exact for the function being sampled.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::likelihood::log_posterior;
use super::math::{expm1_over_x, expm1_over_x_deriv};
use super::{Dataset, ModelKind, ModelSpec, ParameterState};
use crate::quadrature;
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const MAX_EXP_ARG: f64 = 700.0;

/// Index layout of the unconstrained coordinate vector for a given spec and
/// subject count.
#[derive(Debug, Clone)]
pub struct UnconstrainedSpace {
    covariates: usize,
    k_re: usize,
    n_subjects: usize,
    dim: usize,
    lambda_at: usize,
    beta_at: usize,
    alpha_at: usize,
    gamma_at: Option<usize>,
    mu_at: usize,
    chol_at: usize,
    sigma2_at: usize,
    b_at: usize,
}

impl UnconstrainedSpace {
    pub fn new(spec: &ModelSpec, n_subjects: usize) -> Self {
        let p = spec.covariates;
        let has_gamma = spec.kind == ModelKind::ModelIa;
        let k = spec.random_effect_dim();
        let lambda_at = 0;
        let beta_at = 1;
        let alpha_at = beta_at + p;
        let gamma_at = has_gamma.then_some(alpha_at + 1);
        let mu_at = alpha_at + 1 + usize::from(has_gamma);
        let chol_at = mu_at + k;
        let sigma2_at = chol_at + k * (k + 1) / 2;
        let b_at = sigma2_at + 1;
        let dim = b_at + n_subjects * k;
        UnconstrainedSpace {
            covariates: p,
            k_re: k,
            n_subjects,
            dim,
            lambda_at,
            beta_at,
            alpha_at,
            gamma_at,
            mu_at,
            chol_at,
            sigma2_at,
            b_at,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn random_effect_dim(&self) -> usize {
        self.k_re
    }

    fn b_index(&self, subject: usize, component: usize) -> usize {
        self.b_at + subject * self.k_re + component
    }

    /// Human-readable name of coordinate `idx`, for error messages.
    pub fn coordinate_name(&self, idx: usize) -> String {
        if idx == self.lambda_at {
            return "log lambda".into();
        }
        if idx >= self.beta_at && idx < self.beta_at + self.covariates {
            return format!("beta[{}]", idx - self.beta_at + 1);
        }
        if idx == self.alpha_at {
            return "alpha".into();
        }
        if Some(idx) == self.gamma_at {
            return "gamma".into();
        }
        if idx >= self.mu_at && idx < self.mu_at + self.k_re {
            return format!("mu[{}]", idx - self.mu_at + 1);
        }
        if idx >= self.chol_at && idx < self.sigma2_at {
            return format!("chol(Sigma)[{}]", idx - self.chol_at);
        }
        if idx == self.sigma2_at {
            return "log sigma2".into();
        }
        let off = idx - self.b_at;
        format!("b[{},{}]", off / self.k_re + 1, off % self.k_re + 1)
    }

    /// Maps a state into unconstrained coordinates. Fails when Sigma has no
    /// Cholesky factorization.
    pub fn pack(&self, state: &ParameterState) -> Result<DVector<f64>> {
        let chol = Cholesky::new(state.sigma.clone())
            .ok_or_else(|| Error::NotPositiveDefinite("Sigma".into()))?;
        let l = chol.l();
        let mut u = DVector::zeros(self.dim);
        u[self.lambda_at] = state.lambda.ln();
        for p in 0..self.covariates {
            u[self.beta_at + p] = state.beta[p];
        }
        u[self.alpha_at] = state.alpha;
        if let Some(idx) = self.gamma_at {
            u[idx] = state.gamma.unwrap_or(0.0);
        }
        for j in 0..self.k_re {
            u[self.mu_at + j] = state.mu[j];
        }
        let mut pos = self.chol_at;
        for r in 0..self.k_re {
            for c in 0..=r {
                u[pos] = if r == c { l[(r, c)].ln() } else { l[(r, c)] };
                pos += 1;
            }
        }
        u[self.sigma2_at] = state.sigma2.ln();
        for i in 0..self.n_subjects {
            for c in 0..self.k_re {
                u[self.b_index(i, c)] = state.b[(i, c)];
            }
        }
        Ok(u)
    }

    /// Lower-triangular Cholesky factor encoded in `u`.
    fn l_matrix(&self, u: &[f64]) -> DMatrix<f64> {
        let k = self.k_re;
        let mut l = DMatrix::zeros(k, k);
        let mut pos = self.chol_at;
        for r in 0..k {
            for c in 0..=r {
                l[(r, c)] = if r == c { u[pos].exp() } else { u[pos] };
                pos += 1;
            }
        }
        l
    }

    /// Rebuilds the natural-scale state; total on all of R^dim (overflow
    /// yields non-interior states which the density maps to -inf).
    pub fn unpack(&self, u: &[f64]) -> ParameterState {
        let l = self.l_matrix(u);
        let sigma = &l * l.transpose();
        let mut b = DMatrix::zeros(self.n_subjects, self.k_re);
        for i in 0..self.n_subjects {
            for c in 0..self.k_re {
                b[(i, c)] = u[self.b_index(i, c)];
            }
        }
        ParameterState {
            lambda: u[self.lambda_at].exp(),
            beta: DVector::from_fn(self.covariates, |p, _| u[self.beta_at + p]),
            alpha: u[self.alpha_at],
            gamma: self.gamma_at.map(|idx| u[idx]),
            mu: DVector::from_fn(self.k_re, |j, _| u[self.mu_at + j]),
            sigma,
            sigma2: u[self.sigma2_at].exp(),
            b,
        }
    }

    /// Log Jacobian of the unconstraining transformation.
    fn log_jacobian(&self, u: &[f64]) -> f64 {
        let k = self.k_re;
        let mut lj = u[self.lambda_at] + u[self.sigma2_at] + k as f64 * std::f64::consts::LN_2;
        let mut pos = self.chol_at;
        for r in 0..k {
            for c in 0..=r {
                if r == c {
                    lj += (k - r + 1) as f64 * u[pos];
                }
                pos += 1;
            }
        }
        lj
    }

    /// Unconstrained target density: log posterior plus log Jacobian;
    /// negative infinity signals rejection.
    pub fn log_density(&self, spec: &ModelSpec, data: &Dataset, u: &[f64]) -> f64 {
        let state = self.unpack(u);
        let lp = log_posterior(spec, &state, data);
        if lp == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        lp + self.log_jacobian(u)
    }

    /// Gradient of [`Self::log_density`]; errors carry the coordinate name
    /// when a component is non-finite.
    pub fn grad(&self, spec: &ModelSpec, data: &Dataset, u: &[f64]) -> Result<DVector<f64>> {
        self.logp_and_grad(spec, data, u).map(|(_, g)| g)
    }

    /// Value and gradient in one pass.
    pub fn logp_and_grad(
        &self,
        spec: &ModelSpec,
        data: &Dataset,
        u: &[f64],
    ) -> Result<(f64, DVector<f64>)> {
        let state = self.unpack(u);
        if !state.is_interior() {
            return Err(Error::Numerical(
                "gradient requested at a non-interior state".into(),
            ));
        }
        let k = self.k_re;
        let n = self.n_subjects;
        debug_assert_eq!(n, data.len());
        let l = self.l_matrix(u);
        let priors = &spec.priors;

        let mut value = 0.0;
        let mut g = DVector::zeros(self.dim);
        // sum over subjects of w w^T with w = L^-1 (b_i - mu)
        let mut u_outer = DMatrix::zeros(k, k);
        let log_det_half: f64 = (0..k).map(|j| l[(j, j)].ln()).sum();

        // workspace reused across subjects (Model II)
        let mut slopes: Vec<f64> = Vec::new();
        let mut speeds: Vec<f64> = Vec::new();
        let mut hazard: Vec<f64> = Vec::new();
        let mut coeffs: Vec<f64> = Vec::new();

        for i in 0..n {
            let prep = data.subject(i);
            let rec = &prep.record;
            let delta = f64::from(rec.delta);
            let linpred: f64 = rec
                .x
                .iter()
                .zip(state.beta.iter())
                .map(|(xv, bv)| xv * bv)
                .sum();
            if linpred > MAX_EXP_ARG {
                return Err(Error::Numerical(format!(
                    "linear predictor overflow for subject {}",
                    rec.id
                )));
            }
            let elin = linpred.exp();

            // ---- survival term and its gradient ----
            match spec.kind {
                ModelKind::ModelI | ModelKind::ModelIa => {
                    let b1 = state.b[(i, 1)];
                    let c = (1.0 + b1 * b1).sqrt();
                    let t = rec.t;
                    let g_event = t * c;
                    let x_arg = state.alpha * g_event;
                    if x_arg > MAX_EXP_ARG {
                        return Err(Error::Numerical(format!(
                            "alpha * G overflow for subject {}",
                            rec.id
                        )));
                    }
                    // same branch as the likelihood: constant in alpha and b1
                    // below |alpha c t| = 1e-8
                    let (h, dh_dalpha, dh_db1) = if x_arg.abs() < 1e-8 {
                        (state.lambda * elin * t, 0.0, 0.0)
                    } else {
                        let common = state.lambda * elin * t;
                        let h = common * expm1_over_x(x_arg);
                        let phi = expm1_over_x_deriv(x_arg);
                        (h, common * phi * g_event, common * phi * state.alpha * t * b1 / c)
                    };
                    value += delta * (state.lambda.ln() + linpred + state.alpha * g_event) - h;
                    g[self.lambda_at] += delta - h;
                    for (p, xv) in rec.x.iter().enumerate() {
                        g[self.beta_at + p] += (delta - h) * xv;
                    }
                    g[self.alpha_at] += delta * g_event - dh_dalpha;
                    g[self.b_index(i, 1)] +=
                        delta * state.alpha * t * b1 / c - dh_db1;
                }
                ModelKind::ModelII => {
                    let rows = prep.quad_basis_deriv.as_ref().unwrap();
                    let grid = prep.grid.as_ref().unwrap();
                    let delta_s = grid.delta();
                    let m = rows.len() - 1;

                    slopes.clear();
                    speeds.clear();
                    for row in rows {
                        let q: f64 = row
                            .iter()
                            .enumerate()
                            .map(|(lx, dv)| dv * state.b[(i, lx)])
                            .sum();
                        slopes.push(q);
                        speeds.push((1.0 + q * q).sqrt());
                    }
                    let arc = quadrature::prefix_trapezoid(&speeds, delta_s);
                    hazard.clear();
                    for gk in &arc {
                        let arg = linpred + state.alpha * gk;
                        if arg > MAX_EXP_ARG {
                            return Err(Error::Numerical(format!(
                                "alpha * G overflow for subject {}",
                                rec.id
                            )));
                        }
                        hazard.push(state.lambda * arg.exp());
                    }
                    let h = quadrature::trapezoid_from_samples(&hazard, delta_s);
                    let g_event = arc[m];
                    value +=
                        delta * (state.lambda.ln() + linpred + state.alpha * g_event) - h;

                    g[self.lambda_at] += delta - h;
                    for (p, xv) in rec.x.iter().enumerate() {
                        g[self.beta_at + p] += (delta - h) * xv;
                    }
                    // dH/dalpha = sum_k w_k h_k G_k
                    let mut dh_dalpha = 0.5 * hazard[0] * arc[0] + 0.5 * hazard[m] * arc[m];
                    for kx in 1..m {
                        dh_dalpha += hazard[kx] * arc[kx];
                    }
                    dh_dalpha *= delta_s;
                    g[self.alpha_at] += delta * g_event - dh_dalpha;

                    // b-gradient through both integrals: sum_k a_k dG_k/db
                    // with a_k = -w_k h_k alpha and a_m += delta * alpha.
                    // Suffix sums turn the double sum into one pass.
                    coeffs.clear();
                    coeffs.resize(m + 1, 0.0);
                    for kx in 0..=m {
                        let w = if kx == 0 || kx == m {
                            0.5 * delta_s
                        } else {
                            delta_s
                        };
                        coeffs[kx] = -w * hazard[kx] * state.alpha;
                    }
                    coeffs[m] += delta * state.alpha;
                    // suffix[j] = sum_{k >= j} a_k
                    let mut suffix = vec![0.0; m + 2];
                    for kx in (0..=m).rev() {
                        suffix[kx] = suffix[kx + 1] + coeffs[kx];
                    }
                    for j in 0..=m {
                        let node_weight = if j == 0 {
                            0.5 * suffix[1]
                        } else {
                            0.5 * coeffs[j] + suffix[j + 1]
                        };
                        // dv_j/db_l = (d_j / v_j) B'[j][l]
                        let q = delta_s * node_weight * slopes[j] / speeds[j];
                        if q != 0.0 {
                            for (lx, dv) in rows[j].iter().enumerate() {
                                g[self.b_index(i, lx)] += q * dv;
                            }
                        }
                    }
                }
            }

            // ---- longitudinal term ----
            for j in 0..rec.times.len() {
                let mean = match spec.kind {
                    ModelKind::ModelI => state.b[(i, 0)] + state.b[(i, 1)] * rec.times[j],
                    ModelKind::ModelIa => {
                        let idx = spec.longitudinal_covariate_index.unwrap();
                        state.b[(i, 0)]
                            + state.b[(i, 1)] * rec.times[j]
                            + state.gamma.unwrap() * rec.x[idx]
                    }
                    ModelKind::ModelII => prep.meas_basis.as_ref().unwrap()[j]
                        .iter()
                        .enumerate()
                        .map(|(lx, bv)| bv * state.b[(i, lx)])
                        .sum(),
                };
                let res = rec.z[j] - mean;
                value += -0.5 * (LN_2PI + state.sigma2.ln()) - res * res / (2.0 * state.sigma2);
                g[self.sigma2_at] += -0.5 + res * res / (2.0 * state.sigma2);
                let scaled = res / state.sigma2;
                match spec.kind {
                    ModelKind::ModelI | ModelKind::ModelIa => {
                        g[self.b_index(i, 0)] += scaled;
                        g[self.b_index(i, 1)] += scaled * rec.times[j];
                        if let (ModelKind::ModelIa, Some(gamma_at)) = (spec.kind, self.gamma_at) {
                            let idx = spec.longitudinal_covariate_index.unwrap();
                            g[gamma_at] += scaled * rec.x[idx];
                        }
                    }
                    ModelKind::ModelII => {
                        for (lx, bv) in prep.meas_basis.as_ref().unwrap()[j].iter().enumerate() {
                            g[self.b_index(i, lx)] += scaled * bv;
                        }
                    }
                }
            }

            // ---- random-effect prior term ----
            let diff = state.b.row(i).transpose() - &state.mu;
            let w = l
                .solve_lower_triangular(&diff)
                .ok_or_else(|| Error::NotPositiveDefinite("Sigma Cholesky factor".into()))?;
            value += -0.5 * k as f64 * LN_2PI - log_det_half - 0.5 * w.norm_squared();
            u_outer += &w * w.transpose();
            // Sigma^-1 (b_i - mu) = L^-T w
            let v = l
                .transpose()
                .solve_upper_triangular(&w)
                .ok_or_else(|| Error::NotPositiveDefinite("Sigma Cholesky factor".into()))?;
            for c in 0..k {
                g[self.b_index(i, c)] -= v[c];
                g[self.mu_at + c] += v[c];
            }
        }

        // ---- population priors and Jacobian ----
        let chol = Cholesky::new(state.sigma.clone())
            .ok_or_else(|| Error::NotPositiveDefinite("Sigma".into()))?;
        value += super::likelihood::log_population_priors(spec, &state, &chol);
        value += self.log_jacobian(u);

        // lambda: Gamma prior plus Jacobian, on the log scale
        g[self.lambda_at] += priors.lambda_shape - priors.lambda_rate * state.lambda;
        for p in 0..self.covariates {
            g[self.beta_at + p] -= state.beta[p] / (priors.beta_sd * priors.beta_sd);
        }
        g[self.alpha_at] -= state.alpha / (priors.alpha_sd * priors.alpha_sd);
        if let Some(idx) = self.gamma_at {
            g[idx] -= state.gamma.unwrap() / (priors.gamma_sd * priors.gamma_sd);
        }
        for j in 0..k {
            g[self.mu_at + j] -= state.mu[j] / (priors.mu_sd * priors.mu_sd);
        }
        // sigma2: inverse-gamma prior plus Jacobian, on the log scale
        g[self.sigma2_at] += -priors.sigma2_shape + priors.sigma2_rate / state.sigma2;

        // Sigma block: dF/dL = L^-T [U - (n + df + K + 1) I + L^-1 Psi L^-T],
        // then the log-diagonal chain rule and the Jacobian exponents.
        let df = priors.wishart_df_for(k);
        let psi = priors.wishart_scale_for(k).unwrap();
        let l_inv_psi = l
            .solve_lower_triangular(&psi)
            .ok_or_else(|| Error::NotPositiveDefinite("Sigma Cholesky factor".into()))?;
        // L^-1 Psi L^-T = L^-1 (L^-1 Psi)^T for symmetric Psi
        let inner_psi = l
            .solve_lower_triangular(&l_inv_psi.transpose())
            .ok_or_else(|| Error::NotPositiveDefinite("Sigma Cholesky factor".into()))?;
        let mut inner = u_outer + inner_psi;
        let shrink = n as f64 + df + k as f64 + 1.0;
        for j in 0..k {
            inner[(j, j)] -= shrink;
        }
        let df_dl = l
            .transpose()
            .solve_upper_triangular(&inner)
            .ok_or_else(|| Error::NotPositiveDefinite("Sigma Cholesky factor".into()))?;
        let mut pos = self.chol_at;
        for r in 0..k {
            for c in 0..=r {
                if r == c {
                    g[pos] = df_dl[(r, c)] * l[(r, c)] + (k - r + 1) as f64;
                } else {
                    g[pos] = df_dl[(r, c)];
                }
                pos += 1;
            }
        }

        for idx in 0..self.dim {
            if !g[idx].is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient component for {}",
                    self.coordinate_name(idx)
                )));
            }
        }
        if !value.is_finite() {
            return Err(Error::Numerical("non-finite log density".into()));
        }
        Ok((value, g))
    }
}

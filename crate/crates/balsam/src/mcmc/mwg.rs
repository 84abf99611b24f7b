//! Adaptive Metropolis-within-Gibbs. Non-conjugate blocks (lambda, beta,
//! alpha, gamma, each b_i) move by Gaussian random walks on the
//! unconstrained scale; mu, Sigma, and sigma2 use their exact conjugate
//! full conditionals.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Gamma as GammaDist, StandardNormal};

use super::adapt::ScaleAdapter;
use crate::model::{
    log_lik_longitudinal, log_lik_survival, Dataset, ModelKind, ModelSpec, ParameterState,
};
use crate::{Error, Result};

/// Scalar blocks tune toward 0.44 acceptance, vector blocks toward 0.234.
pub const TARGET_SCALAR: f64 = 0.44;
pub const TARGET_VECTOR: f64 = 0.234;

/// Acceptance decision from a log ratio; returns (accepted, accept prob).
pub fn metropolis_accept(log_ratio: f64, rng: &mut impl Rng) -> (bool, f64) {
    let accept_prob = log_ratio.min(0.0).exp();
    let u: f64 = rng.random();
    (u < accept_prob, accept_prob)
}

/// Per-block proposal scales with Robbins-Monro adaptation.
#[derive(Debug, Clone)]
pub struct MwgAdaptation {
    pub lambda: ScaleAdapter,
    pub beta: ScaleAdapter,
    pub alpha: ScaleAdapter,
    pub gamma: Option<ScaleAdapter>,
    pub subjects: Vec<ScaleAdapter>,
}

impl MwgAdaptation {
    pub fn new(spec: &ModelSpec, n_subjects: usize) -> Self {
        let beta_target = if spec.covariates > 1 {
            TARGET_VECTOR
        } else {
            TARGET_SCALAR
        };
        MwgAdaptation {
            lambda: ScaleAdapter::new(0.3, TARGET_SCALAR),
            beta: ScaleAdapter::new(0.3, beta_target),
            alpha: ScaleAdapter::new(0.1, TARGET_SCALAR),
            gamma: (spec.kind == ModelKind::ModelIa)
                .then(|| ScaleAdapter::new(0.3, TARGET_SCALAR)),
            subjects: (0..n_subjects)
                .map(|_| ScaleAdapter::new(0.5, TARGET_VECTOR))
                .collect(),
        }
    }

    pub fn freeze(&mut self) {
        self.lambda.freeze();
        self.beta.freeze();
        self.alpha.freeze();
        if let Some(g) = &mut self.gamma {
            g.freeze();
        }
        for s in &mut self.subjects {
            s.freeze();
        }
    }

    pub fn scales(&self) -> Vec<f64> {
        let mut out = vec![self.lambda.scale(), self.beta.scale(), self.alpha.scale()];
        if let Some(g) = &self.gamma {
            out.push(g.scale());
        }
        out.extend(self.subjects.iter().map(ScaleAdapter::scale));
        out
    }
}

/// Accepted / proposed counters per block family.
#[derive(Debug, Clone, Copy, Default)]
pub struct MwgAcceptance {
    pub accepted: u64,
    pub proposed: u64,
}

impl MwgAcceptance {
    fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += u64::from(accepted);
    }

    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MwgAcceptanceCounts {
    pub lambda: MwgAcceptance,
    pub beta: MwgAcceptance,
    pub alpha: MwgAcceptance,
    pub gamma: MwgAcceptance,
    pub subjects: MwgAcceptance,
}

impl MwgAcceptanceCounts {
    pub fn overall_rate(&self) -> f64 {
        let accepted = self.lambda.accepted
            + self.beta.accepted
            + self.alpha.accepted
            + self.gamma.accepted
            + self.subjects.accepted;
        let proposed = self.lambda.proposed
            + self.beta.proposed
            + self.alpha.proposed
            + self.gamma.proposed
            + self.subjects.proposed;
        if proposed == 0 {
            0.0
        } else {
            accepted as f64 / proposed as f64
        }
    }
}

fn survival_sum(spec: &ModelSpec, state: &ParameterState, data: &Dataset) -> f64 {
    let mut acc = 0.0;
    for i in 0..data.len() {
        match log_lik_survival(spec, state, data, i) {
            Ok(v) if v.is_finite() => acc += v,
            _ => return f64::NEG_INFINITY,
        }
    }
    acc
}

fn longitudinal_sum(spec: &ModelSpec, state: &ParameterState, data: &Dataset) -> f64 {
    let mut acc = 0.0;
    for i in 0..data.len() {
        acc += log_lik_longitudinal(spec, state, data, i);
    }
    if acc.is_finite() {
        acc
    } else {
        f64::NEG_INFINITY
    }
}

fn normal_logpdf_scaled(v: f64, sd: f64) -> f64 {
    -v * v / (2.0 * sd * sd)
}

/// One full sweep over the blocks in fixed order: lambda, beta, alpha,
/// gamma (Model Ia), mu, Sigma, sigma2, then each subject's b_i.
pub fn mwg_step(
    state: &mut ParameterState,
    spec: &ModelSpec,
    data: &Dataset,
    adaptation: &mut MwgAdaptation,
    counts: &mut MwgAcceptanceCounts,
    rng: &mut impl Rng,
) -> Result<()> {
    let priors = &spec.priors;
    let n = data.len();

    // -- lambda: random walk on log lambda ------------------------------
    {
        let current = survival_sum(spec, state, data);
        if current == f64::NEG_INFINITY {
            return Err(Error::Numerical(
                "current state has an invalid survival likelihood".into(),
            ));
        }
        // Gamma prior with the log-scale Jacobian folded in
        let prior = |lambda: f64| {
            priors.lambda_shape * lambda.ln() - priors.lambda_rate * lambda
        };
        let old = state.lambda;
        let z: f64 = rng.sample(StandardNormal);
        state.lambda = (old.ln() + adaptation.lambda.scale() * z).exp();
        let candidate = survival_sum(spec, state, data);
        let log_ratio = candidate + prior(state.lambda) - current - prior(old);
        let (accepted, prob) = metropolis_accept(log_ratio, rng);
        if !accepted {
            state.lambda = old;
        }
        counts.lambda.record(accepted);
        adaptation.lambda.update(prob);
    }

    // -- beta: joint random walk ----------------------------------------
    if spec.covariates > 0 {
        let current = survival_sum(spec, state, data);
        let prior = |beta: &DVector<f64>| {
            beta.iter()
                .map(|v| normal_logpdf_scaled(*v, priors.beta_sd))
                .sum::<f64>()
        };
        let old = state.beta.clone();
        let scale = adaptation.beta.scale();
        for p in 0..state.beta.len() {
            let z: f64 = rng.sample(StandardNormal);
            state.beta[p] += scale * z;
        }
        let candidate = survival_sum(spec, state, data);
        let log_ratio = candidate + prior(&state.beta) - current - prior(&old);
        let (accepted, prob) = metropolis_accept(log_ratio, rng);
        if !accepted {
            state.beta = old;
        }
        counts.beta.record(accepted);
        adaptation.beta.update(prob);
    }

    // -- alpha ------------------------------------------------------------
    {
        let current = survival_sum(spec, state, data);
        let old = state.alpha;
        let z: f64 = rng.sample(StandardNormal);
        state.alpha = old + adaptation.alpha.scale() * z;
        let candidate = survival_sum(spec, state, data);
        let log_ratio = candidate + normal_logpdf_scaled(state.alpha, priors.alpha_sd)
            - current
            - normal_logpdf_scaled(old, priors.alpha_sd);
        let (accepted, prob) = metropolis_accept(log_ratio, rng);
        if !accepted {
            state.alpha = old;
        }
        counts.alpha.record(accepted);
        adaptation.alpha.update(prob);
    }

    // -- gamma (Model Ia) -------------------------------------------------
    if let Some(gamma_adapter) = adaptation.gamma.as_mut() {
        let current = longitudinal_sum(spec, state, data);
        let old = state.gamma.unwrap();
        let z: f64 = rng.sample(StandardNormal);
        state.gamma = Some(old + gamma_adapter.scale() * z);
        let candidate = longitudinal_sum(spec, state, data);
        let log_ratio = candidate
            + normal_logpdf_scaled(state.gamma.unwrap(), priors.gamma_sd)
            - current
            - normal_logpdf_scaled(old, priors.gamma_sd);
        let (accepted, prob) = metropolis_accept(log_ratio, rng);
        if !accepted {
            state.gamma = Some(old);
        }
        counts.gamma.record(accepted);
        gamma_adapter.update(prob);
    }

    // -- mu | b, Sigma: multivariate normal -------------------------------
    let k = spec.random_effect_dim();
    {
        let chol = Cholesky::new(state.sigma.clone())
            .ok_or_else(|| Error::NotPositiveDefinite("Sigma".into()))?;
        let sigma_inv = chol.inverse();
        let mut precision = &sigma_inv * n as f64;
        let prior_precision = 1.0 / (priors.mu_sd * priors.mu_sd);
        for j in 0..k {
            precision[(j, j)] += prior_precision;
        }
        let b_sum = {
            let mut acc = DVector::zeros(k);
            for i in 0..n {
                acc += state.b.row(i).transpose();
            }
            acc
        };
        let rhs = &sigma_inv * b_sum;
        let prec_chol = Cholesky::new(precision)
            .ok_or_else(|| Error::NotPositiveDefinite("mu full conditional".into()))?;
        let mean = prec_chol.solve(&rhs);
        let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let noise = prec_chol
            .l()
            .transpose()
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::NotPositiveDefinite("mu full conditional".into()))?;
        state.mu = mean + noise;
    }

    // -- Sigma | b, mu: inverse-Wishart via Bartlett ----------------------
    {
        let mut scatter = priors.wishart_scale_for(k)?;
        for i in 0..n {
            let d = state.b.row(i).transpose() - &state.mu;
            scatter += &d * d.transpose();
        }
        let df = priors.wishart_df_for(k) + n as f64;
        let scatter_chol = Cholesky::new(scatter)
            .ok_or_else(|| Error::NotPositiveDefinite("Sigma full conditional".into()))?;
        let mut bartlett = DMatrix::zeros(k, k);
        for r in 0..k {
            let chi = ChiSquared::new(df - r as f64).map_err(|e| {
                Error::Config(format!("invalid Wishart degrees of freedom: {e}"))
            })?;
            bartlett[(r, r)] = rng.sample::<f64, _>(chi).sqrt();
            for c in 0..r {
                bartlett[(r, c)] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        // Sigma' = (L_n A^-T)(L_n A^-T)^T with scatter = L_n L_n^T;
        // computed as the transpose of A^-1 L_n^T, one triangular solve
        let x = bartlett
            .solve_lower_triangular(&scatter_chol.l().transpose())
            .ok_or_else(|| Error::NotPositiveDefinite("Bartlett factor".into()))?;
        let factor = x.transpose();
        state.sigma = &factor * factor.transpose();
    }

    // -- sigma2 | residuals: inverse-gamma --------------------------------
    {
        let mut ssr = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            let prep = data.subject(i);
            for j in 0..prep.record.times.len() {
                let mean = match spec.kind {
                    ModelKind::ModelI => {
                        state.b[(i, 0)] + state.b[(i, 1)] * prep.record.times[j]
                    }
                    ModelKind::ModelIa => {
                        let idx = spec.longitudinal_covariate_index.unwrap();
                        state.b[(i, 0)]
                            + state.b[(i, 1)] * prep.record.times[j]
                            + state.gamma.unwrap() * prep.record.x[idx]
                    }
                    ModelKind::ModelII => prep.meas_basis.as_ref().unwrap()[j]
                        .iter()
                        .enumerate()
                        .map(|(lx, bv)| bv * state.b[(i, lx)])
                        .sum(),
                };
                ssr += (prep.record.z[j] - mean).powi(2);
                count += 1;
            }
        }
        let shape = priors.sigma2_shape + count as f64 / 2.0;
        let rate = priors.sigma2_rate + ssr / 2.0;
        let gamma = GammaDist::new(shape, 1.0 / rate)
            .map_err(|e| Error::Config(format!("invalid sigma2 full conditional: {e}")))?;
        let precision: f64 = rng.sample(gamma);
        state.sigma2 = 1.0 / precision;
    }

    // -- subject random effects -------------------------------------------
    let chol = Cholesky::new(state.sigma.clone())
        .ok_or_else(|| Error::NotPositiveDefinite("Sigma".into()))?;
    let log_det_half: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum();
    let re_logpdf = |state: &ParameterState, i: usize| -> f64 {
        let diff = state.b.row(i).transpose() - &state.mu;
        match chol.l().solve_lower_triangular(&diff) {
            Some(w) => -log_det_half - 0.5 * w.norm_squared(),
            None => f64::NEG_INFINITY,
        }
    };
    for i in 0..n {
        let scale = adaptation.subjects[i].scale();
        let current = match log_lik_survival(spec, state, data, i) {
            Ok(v) if v.is_finite() => {
                v + log_lik_longitudinal(spec, state, data, i) + re_logpdf(state, i)
            }
            _ => {
                return Err(Error::Numerical(format!(
                    "current state has an invalid likelihood for subject {i}"
                )))
            }
        };
        let old: Vec<f64> = state.b.row(i).iter().copied().collect();
        for c in 0..k {
            let z: f64 = rng.sample(StandardNormal);
            state.b[(i, c)] += scale * z;
        }
        let candidate = match log_lik_survival(spec, state, data, i) {
            Ok(v) if v.is_finite() => {
                v + log_lik_longitudinal(spec, state, data, i) + re_logpdf(state, i)
            }
            _ => f64::NEG_INFINITY,
        };
        let (accepted, prob) = metropolis_accept(candidate - current, rng);
        if !accepted {
            for c in 0..k {
                state.b[(i, c)] = old[c];
            }
        }
        counts.subjects.record(accepted);
        adaptation.subjects[i].update(prob);
    }

    Ok(())
}

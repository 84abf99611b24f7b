//! No-U-Turn sampler: multinomial tree doubling over leapfrog trajectories
//! with dual-averaging step-size adaptation and a diagonal mass matrix.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::adapt::DualAveraging;
use crate::{Error, Result};

/// Energy error beyond which a trajectory is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// Log density and gradient of the sampling target, on the unconstrained
/// space. `None` signals a numerical failure (treated as divergence).
pub trait NutsTarget {
    fn logp_grad(&self, position: &DVector<f64>) -> Option<(f64, DVector<f64>)>;
}

impl<F> NutsTarget for F
where
    F: Fn(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    fn logp_grad(&self, position: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        self(position)
    }
}

/// Outcome of a standalone leapfrog integration.
#[derive(Debug, Clone)]
pub struct LeapfrogOutcome {
    pub position: DVector<f64>,
    pub momentum: DVector<f64>,
    /// Set when the gradient became non-finite mid-trajectory; position and
    /// momentum then hold the last valid point.
    pub diverged: bool,
}

/// Standard leapfrog with unit mass: volume-preserving and time-reversible.
/// `grad` returns the gradient of log density (None on failure).
pub fn leapfrog(
    position: &DVector<f64>,
    momentum: &DVector<f64>,
    step: f64,
    n_steps: usize,
    grad: &dyn Fn(&DVector<f64>) -> Option<DVector<f64>>,
) -> LeapfrogOutcome {
    let mut q = position.clone();
    let mut p = momentum.clone();
    let mut g = match grad(&q) {
        Some(g) => g,
        None => {
            return LeapfrogOutcome {
                position: q,
                momentum: p,
                diverged: true,
            }
        }
    };
    for _ in 0..n_steps {
        let p_half = &p + 0.5 * step * &g;
        let q_next = &q + step * &p_half;
        match grad(&q_next) {
            Some(g_next) => {
                p = &p_half + 0.5 * step * &g_next;
                q = q_next;
                g = g_next;
            }
            None => {
                return LeapfrogOutcome {
                    position: q,
                    momentum: p,
                    diverged: true,
                }
            }
        }
    }
    LeapfrogOutcome {
        position: q,
        momentum: p,
        diverged: false,
    }
}

/// One endpoint of a trajectory.
#[derive(Clone)]
struct Phase {
    q: DVector<f64>,
    p: DVector<f64>,
    grad: DVector<f64>,
}

struct Subtree {
    minus: Phase,
    plus: Phase,
    proposal: Phase,
    proposal_logp: f64,
    log_sum_weight: f64,
    sum_accept: f64,
    leaves: usize,
    diverged: bool,
    turning: bool,
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let hi = a.max(b);
    if hi == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        hi + ((a - hi).exp() + (b - hi).exp()).ln()
    }
}

/// Summary of one NUTS transition.
#[derive(Debug, Clone, Copy)]
pub struct TransitionInfo {
    pub accept_stat: f64,
    pub diverged: bool,
    pub depth: usize,
}

/// Single-chain NUTS state.
pub struct NutsChain<T: NutsTarget> {
    target: T,
    pub position: DVector<f64>,
    logp: f64,
    grad: DVector<f64>,
    inv_mass: DVector<f64>,
    pub step: DualAveraging,
    max_tree_depth: usize,
}

impl<T: NutsTarget> NutsChain<T> {
    pub fn new(
        target: T,
        position: DVector<f64>,
        target_accept: f64,
        max_tree_depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let dim = position.len();
        let (logp, grad) = target.logp_grad(&position).ok_or_else(|| {
            Error::Init("NUTS requires a finite log density and gradient at the start".into())
        })?;
        let mut chain = NutsChain {
            target,
            position,
            logp,
            grad,
            inv_mass: DVector::from_element(dim, 1.0),
            step: DualAveraging::new(1.0, target_accept),
            max_tree_depth,
        };
        let eps = chain.find_reasonable_epsilon(rng);
        chain.step = DualAveraging::new(eps, target_accept);
        Ok(chain)
    }

    pub fn inv_mass(&self) -> &DVector<f64> {
        &self.inv_mass
    }

    /// Installs a new diagonal mass matrix (inverse-mass vector) and
    /// re-centers the step-size adaptation around a fresh guess.
    pub fn set_inv_mass(&mut self, inv_mass: DVector<f64>, rng: &mut ChaCha8Rng) {
        self.inv_mass = inv_mass;
        let eps = self.find_reasonable_epsilon(rng);
        self.step.restart_around(eps);
    }

    fn kinetic(&self, p: &DVector<f64>) -> f64 {
        0.5 * p
            .iter()
            .zip(self.inv_mass.iter())
            .map(|(pv, im)| pv * pv * im)
            .sum::<f64>()
    }

    fn sample_momentum(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(self.position.len(), |j, _| {
            let z: f64 = rng.sample(StandardNormal);
            z / self.inv_mass[j].sqrt()
        })
    }

    fn leapfrog_step(&self, phase: &Phase, eps: f64) -> Option<(Phase, f64)> {
        let p_half = &phase.p + 0.5 * eps * &phase.grad;
        let q = &phase.q + eps * p_half.component_mul(&self.inv_mass);
        let (logp, grad) = self.target.logp_grad(&q)?;
        let p = &p_half + 0.5 * eps * &grad;
        Some((Phase { q, p, grad }, logp))
    }

    /// Heuristic initial step size: double or halve until the one-step
    /// acceptance probability crosses 1/2.
    fn find_reasonable_epsilon(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        let mut eps = 1.0f64;
        let p = self.sample_momentum(rng);
        let h0 = -self.logp + self.kinetic(&p);
        let phase = Phase {
            q: self.position.clone(),
            p,
            grad: self.grad.clone(),
        };
        let log_ratio_at = |chain: &Self, eps: f64| -> Option<f64> {
            let (next, logp) = chain.leapfrog_step(&phase, eps)?;
            Some(h0 - (-logp + chain.kinetic(&next.p)))
        };
        let mut lr = match log_ratio_at(self, eps) {
            Some(v) if v.is_finite() => v,
            _ => {
                // shrink until the step succeeds at all
                for _ in 0..40 {
                    eps *= 0.5;
                    if let Some(v) = log_ratio_at(self, eps) {
                        if v.is_finite() {
                            return eps;
                        }
                    }
                }
                return 1e-6;
            }
        };
        let dir: f64 = if lr > (0.5f64).ln() { 1.0 } else { -1.0 };
        for _ in 0..40 {
            eps *= (2.0f64).powf(dir);
            lr = match log_ratio_at(self, eps) {
                Some(v) if v.is_finite() => v,
                _ => f64::NEG_INFINITY,
            };
            if dir * lr <= dir * (0.5f64).ln() {
                break;
            }
        }
        eps.clamp(1e-10, 1e3)
    }

    fn is_turning(&self, minus: &Phase, plus: &Phase) -> bool {
        let dq = &plus.q - &minus.q;
        let v_minus = minus.p.component_mul(&self.inv_mass);
        let v_plus = plus.p.component_mul(&self.inv_mass);
        dq.dot(&v_minus) < 0.0 || dq.dot(&v_plus) < 0.0
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &self,
        depth: usize,
        from: &Phase,
        dir: f64,
        h0: f64,
        eps: f64,
        rng: &mut ChaCha8Rng,
    ) -> Subtree {
        if depth == 0 {
            return match self.leapfrog_step(from, dir * eps) {
                Some((phase, logp)) => {
                    let h = -logp + self.kinetic(&phase.p);
                    let energy_error = h - h0;
                    let diverged = !energy_error.is_finite() || energy_error > DIVERGENCE_THRESHOLD;
                    let log_w = if diverged { f64::NEG_INFINITY } else { -energy_error };
                    Subtree {
                        minus: phase.clone(),
                        plus: phase.clone(),
                        proposal_logp: logp,
                        proposal: phase,
                        log_sum_weight: log_w,
                        sum_accept: (-energy_error).min(0.0).exp(),
                        leaves: 1,
                        diverged,
                        turning: false,
                    }
                }
                None => Subtree {
                    minus: from.clone(),
                    plus: from.clone(),
                    proposal: from.clone(),
                    proposal_logp: f64::NEG_INFINITY,
                    log_sum_weight: f64::NEG_INFINITY,
                    sum_accept: 0.0,
                    leaves: 1,
                    diverged: true,
                    turning: false,
                },
            };
        }

        let first = self.build_tree(depth - 1, from, dir, h0, eps, rng);
        if first.diverged || first.turning {
            return first;
        }
        let frontier = if dir > 0.0 { &first.plus } else { &first.minus };
        let second = self.build_tree(depth - 1, frontier, dir, h0, eps, rng);

        let log_sum = log_sum_exp(first.log_sum_weight, second.log_sum_weight);
        // multinomial selection between the two halves
        let take_second = {
            let threshold = (second.log_sum_weight - log_sum).exp();
            rng.random::<f64>() < threshold
        };
        let (proposal, proposal_logp) = if take_second {
            (second.proposal.clone(), second.proposal_logp)
        } else {
            (first.proposal.clone(), first.proposal_logp)
        };
        let (minus, plus) = if dir > 0.0 {
            (first.minus.clone(), second.plus.clone())
        } else {
            (second.minus.clone(), first.plus.clone())
        };
        let turning =
            second.turning || second.diverged || self.is_turning(&minus, &plus);
        Subtree {
            minus,
            plus,
            proposal,
            proposal_logp,
            log_sum_weight: log_sum,
            sum_accept: first.sum_accept + second.sum_accept,
            leaves: first.leaves + second.leaves,
            diverged: second.diverged,
            turning,
        }
    }

    /// One NUTS transition at the current adapted step size.
    pub fn transition(&mut self, rng: &mut ChaCha8Rng) -> TransitionInfo {
        let eps = self.step.current();
        self.transition_with(eps, rng)
    }

    /// One NUTS transition at an explicit step size (adaptation untouched).
    pub fn transition_with(&mut self, eps: f64, rng: &mut ChaCha8Rng) -> TransitionInfo {
        let p0 = self.sample_momentum(rng);
        let h0 = -self.logp + self.kinetic(&p0);
        let start = Phase {
            q: self.position.clone(),
            p: p0,
            grad: self.grad.clone(),
        };
        let mut minus = start.clone();
        let mut plus = start.clone();
        let mut proposal = start;
        let mut proposal_logp = self.logp;
        let mut log_sum_weight = 0.0f64;
        let mut sum_accept = 0.0f64;
        let mut leaves = 0usize;
        let mut diverged = false;
        let mut depth = 0usize;

        while depth <= self.max_tree_depth {
            let dir: f64 = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let frontier = if dir > 0.0 { plus.clone() } else { minus.clone() };
            let subtree = self.build_tree(depth, &frontier, dir, h0, eps, rng);
            sum_accept += subtree.sum_accept;
            leaves += subtree.leaves;
            if subtree.diverged {
                diverged = true;
                break;
            }
            if subtree.turning {
                break;
            }
            // biased progressive sampling toward the new subtree
            let accept_new = (subtree.log_sum_weight - log_sum_weight).exp();
            if rng.random::<f64>() < accept_new {
                proposal = subtree.proposal.clone();
                proposal_logp = subtree.proposal_logp;
            }
            log_sum_weight = log_sum_exp(log_sum_weight, subtree.log_sum_weight);
            if dir > 0.0 {
                plus = subtree.plus;
            } else {
                minus = subtree.minus;
            }
            depth += 1;
            if self.is_turning(&minus, &plus) {
                break;
            }
        }

        self.position = proposal.q;
        self.logp = proposal_logp;
        self.grad = proposal.grad;
        TransitionInfo {
            accept_stat: if leaves > 0 {
                sum_accept / leaves as f64
            } else {
                0.0
            },
            diverged,
            depth,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::effective_sample_size;
    use crate::mcmc::adapt::ScaleAdapter;
    use crate::mcmc::mwg::metropolis_accept;
    use crate::rng::{stream, StreamKind};

    fn std_normal_grad(q: &DVector<f64>) -> Option<DVector<f64>> {
        Some(-q.clone())
    }

    #[test]
    fn leapfrog_is_reversible() {
        let q0 = DVector::from_vec(vec![0.7, -0.3]);
        let p0 = DVector::from_vec(vec![0.4, 1.1]);
        let fwd = leapfrog(&q0, &p0, 0.05, 10, &std_normal_grad);
        assert!(!fwd.diverged);
        let back = leapfrog(&fwd.position, &(-fwd.momentum.clone()), 0.05, 10, &std_normal_grad);
        assert!(!back.diverged);
        assert!((&back.position - &q0).amax() <= 1e-10);
        assert!((&back.momentum + &p0).amax() <= 1e-10);
    }

    #[test]
    fn leapfrog_zero_step_is_identity() {
        let q0 = DVector::from_vec(vec![1.0, 2.0]);
        let p0 = DVector::from_vec(vec![-0.5, 0.25]);
        let out = leapfrog(&q0, &p0, 0.0, 25, &std_normal_grad);
        assert_eq!(out.position, q0);
        assert_eq!(out.momentum, p0);
    }

    #[test]
    fn leapfrog_energy_bounded_on_harmonic_oscillator() {
        // H = (p^2 + q^2)/2; leapfrog keeps the energy error oscillatory
        // with no secular drift
        let mut q = DVector::from_vec(vec![1.0]);
        let mut p = DVector::from_vec(vec![0.0]);
        let h0 = 0.5 * (q[0] * q[0] + p[0] * p[0]);
        let mut max_err = 0.0f64;
        for _ in 0..1000 {
            let out = leapfrog(&q, &p, 0.01, 1, &std_normal_grad);
            q = out.position;
            p = out.momentum;
            let h = 0.5 * (q[0] * q[0] + p[0] * p[0]);
            max_err = max_err.max((h - h0).abs());
        }
        assert!(max_err <= 1e-4, "max energy error {max_err}");
        let h_end = 0.5 * (q[0] * q[0] + p[0] * p[0]);
        assert!((h_end - h0).abs() <= max_err + 1e-12);
    }

    #[test]
    fn leapfrog_flags_divergence_without_panicking() {
        let bad = |q: &DVector<f64>| -> Option<DVector<f64>> {
            if q[0].abs() > 1.5 {
                None
            } else {
                Some(-q.clone())
            }
        };
        let out = leapfrog(
            &DVector::from_vec(vec![1.0]),
            &DVector::from_vec(vec![5.0]),
            0.5,
            10,
            &bad,
        );
        assert!(out.diverged);
    }

    fn normal2d_target(rho: f64) -> impl Fn(&DVector<f64>) -> Option<(f64, DVector<f64>)> {
        // N(0, [[1, rho], [rho, 1]])
        let det = 1.0 - rho * rho;
        move |q: &DVector<f64>| {
            let (x, y) = (q[0], q[1]);
            let quad = (x * x - 2.0 * rho * x * y + y * y) / det;
            let logp = -0.5 * quad;
            let gx = -(x - rho * y) / det;
            let gy = -(y - rho * x) / det;
            Some((logp, DVector::from_vec(vec![gx, gy])))
        }
    }

    fn run_nuts(
        target: impl NutsTarget,
        dim: usize,
        warmup: usize,
        draws: usize,
        seed: u64,
    ) -> Vec<Vec<f64>> {
        let mut rng = stream(seed, StreamKind::Chain, 0);
        let mut chain = NutsChain::new(target, DVector::zeros(dim), 0.8, 10, &mut rng).unwrap();
        for _ in 0..warmup {
            let info = chain.transition(&mut rng);
            chain.step.update(info.accept_stat);
        }
        chain.step.freeze();
        let mut out = Vec::with_capacity(draws);
        for _ in 0..draws {
            chain.transition(&mut rng);
            out.push(chain.position.iter().copied().collect());
        }
        out
    }

    #[test]
    fn nuts_recovers_standard_normal_moments() {
        let draws = run_nuts(normal2d_target(0.0), 2, 500, 4000, 42);
        let n = draws.len() as f64;
        for j in 0..2 {
            let mean: f64 = draws.iter().map(|d| d[j]).sum::<f64>() / n;
            assert!(mean.abs() <= 0.05, "mean[{j}] = {mean}");
        }
        let mut cov = [[0.0f64; 2]; 2];
        for d in &draws {
            for i in 0..2 {
                for j in 0..2 {
                    cov[i][j] += d[i] * d[j];
                }
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                let c = cov[i][j] / n;
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((c - target).abs() <= 0.05, "cov[{i}][{j}] = {c}");
            }
        }
    }

    #[test]
    fn nuts_beats_random_walk_on_correlated_normal() {
        let rho = 0.9;
        let budget = 3000;
        let nuts_draws = run_nuts(normal2d_target(rho), 2, 500, budget, 7);
        let nuts_x: Vec<f64> = nuts_draws.iter().map(|d| d[0]).collect();
        let nuts_ess = effective_sample_size(&[nuts_x]).unwrap().value;

        // random-walk baseline with the same budget and adapted joint scale
        let target = normal2d_target(rho);
        let mut rng = stream(8, StreamKind::Chain, 1);
        let mut adapter = ScaleAdapter::new(0.5, 0.234);
        let mut q = DVector::zeros(2);
        let mut logp = target(&q).unwrap().0;
        let mut rw_x = Vec::with_capacity(budget);
        for it in 0..(500 + budget) {
            let mut cand = q.clone();
            for c in 0..2 {
                let z: f64 = rng.sample(StandardNormal);
                cand[c] += adapter.scale() * z;
            }
            let cand_logp = target(&cand).unwrap().0;
            let (accepted, prob) = metropolis_accept(cand_logp - logp, &mut rng);
            if accepted {
                q = cand;
                logp = cand_logp;
            }
            if it < 500 {
                adapter.update(prob);
            } else {
                if it == 500 {
                    adapter.freeze();
                }
                rw_x.push(q[0]);
            }
        }
        let rw_ess = effective_sample_size(&[rw_x]).unwrap().value;
        assert!(
            nuts_ess >= 3.0 * rw_ess,
            "NUTS ESS {nuts_ess} vs random-walk ESS {rw_ess}"
        );
    }

    #[test]
    fn depth_zero_reduces_to_single_leapfrog_proposals() {
        // with max_tree_depth = 0 each transition considers exactly one
        // leapfrog step; stationary moments must match hand-rolled one-step
        // HMC on the same target
        let target_fn = |q: &DVector<f64>| {
            let logp = -0.5 * q[0] * q[0];
            Some((logp, DVector::from_vec(vec![-q[0]])))
        };
        let eps = 0.9;
        let n = 40_000;

        let mut rng = stream(13, StreamKind::Chain, 2);
        let mut chain =
            NutsChain::new(target_fn, DVector::zeros(1), 0.8, 0, &mut rng).unwrap();
        let mut nuts_draws = Vec::with_capacity(n);
        for _ in 0..n {
            chain.transition_with(eps, &mut rng);
            nuts_draws.push(chain.position[0]);
        }

        // hand-rolled single-step HMC with Metropolis acceptance
        let mut rng = stream(14, StreamKind::Chain, 3);
        let mut q = 0.0f64;
        let mut hmc_draws = Vec::with_capacity(n);
        for _ in 0..n {
            let p0: f64 = rng.sample(StandardNormal);
            let h0 = 0.5 * q * q + 0.5 * p0 * p0;
            let out = leapfrog(
                &DVector::from_vec(vec![q]),
                &DVector::from_vec(vec![p0]),
                eps,
                1,
                &(|qq: &DVector<f64>| Some(-qq.clone())),
            );
            let h1 = 0.5 * out.position[0] * out.position[0]
                + 0.5 * out.momentum[0] * out.momentum[0];
            let (accepted, _) = metropolis_accept(h0 - h1, &mut rng);
            if accepted {
                q = out.position[0];
            }
            hmc_draws.push(q);
        }

        let moments = |draws: &[f64]| {
            let n = draws.len() as f64;
            let mean = draws.iter().sum::<f64>() / n;
            let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let ess = effective_sample_size(&[draws.to_vec()]).unwrap().value;
            (mean, var, ess)
        };
        let (m1, v1, e1) = moments(&nuts_draws);
        let (m2, v2, e2) = moments(&hmc_draws);
        let se_mean = (v1 / e1 + v2 / e2).sqrt();
        assert!((m1 - m2).abs() <= 3.0 * se_mean, "means {m1} vs {m2}");
        let se_var = (2.0 * v1 * v1 / e1 + 2.0 * v2 * v2 / e2).sqrt();
        assert!((v1 - v2).abs() <= 3.0 * se_var, "vars {v1} vs {v2}");
    }
}

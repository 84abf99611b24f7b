//! Burn-in adaptation: Robbins-Monro proposal scaling for random-walk
//! blocks and dual-averaging step-size adaptation for NUTS. Both freeze at
//! the end of burn-in so the retained chain is exactly Markov.

/// Robbins-Monro proposal-scale adapter:
/// log s <- log s + k^{-0.6} (acc - target), frozen after burn-in.
#[derive(Debug, Clone)]
pub struct ScaleAdapter {
    log_scale: f64,
    target: f64,
    steps: u64,
    frozen: bool,
}

impl ScaleAdapter {
    pub fn new(initial_scale: f64, target: f64) -> Self {
        ScaleAdapter {
            log_scale: initial_scale.ln(),
            target,
            steps: 0,
            frozen: false,
        }
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn target(&self) -> f64 {
        self.target
    }

    /// Updates from the acceptance probability of the latest proposal.
    pub fn update(&mut self, accept_prob: f64) {
        if self.frozen {
            return;
        }
        self.steps += 1;
        let gain = (self.steps as f64).powf(-0.6);
        self.log_scale += gain * (accept_prob - self.target);
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
}

/// Dual-averaging step-size adaptation (Hoffman-Gelman defaults:
/// gamma = 0.05, t0 = 10, kappa = 0.75).
#[derive(Debug, Clone)]
pub struct DualAveraging {
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    steps: u64,
    target: f64,
    frozen: bool,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    pub fn new(initial_eps: f64, target: f64) -> Self {
        DualAveraging {
            mu: (10.0 * initial_eps).ln(),
            log_eps: initial_eps.ln(),
            log_eps_bar: initial_eps.ln(),
            h_bar: 0.0,
            steps: 0,
            target,
            frozen: false,
        }
    }

    /// Re-centers the averaging around the current step size (used after a
    /// mass-matrix update mid burn-in).
    pub fn restart_around(&mut self, eps: f64) {
        self.mu = (10.0 * eps).ln();
        self.log_eps = eps.ln();
        self.log_eps_bar = eps.ln();
        self.h_bar = 0.0;
        self.steps = 0;
    }

    /// Step size to use for the next transition.
    pub fn current(&self) -> f64 {
        if self.frozen {
            self.log_eps_bar.exp()
        } else {
            self.log_eps.exp()
        }
    }

    pub fn update(&mut self, accept_stat: f64) {
        if self.frozen {
            return;
        }
        self.steps += 1;
        let m = self.steps as f64;
        let eta = 1.0 / (m + Self::T0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_stat);
        self.log_eps = self.mu - m.sqrt() / Self::GAMMA * self.h_bar;
        let weight = m.powf(-Self::KAPPA);
        self.log_eps_bar = weight * self.log_eps + (1.0 - weight) * self.log_eps_bar;
    }

    /// Freezes at the averaged step size.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_constant_when_acceptance_hits_target() {
        let mut adapter = ScaleAdapter::new(1.5, 0.44);
        for _ in 0..100 {
            adapter.update(0.44);
        }
        assert!((adapter.scale() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn scale_strictly_increases_under_full_acceptance() {
        let mut adapter = ScaleAdapter::new(1.0, 0.44);
        let mut prev = adapter.scale();
        for _ in 0..50 {
            adapter.update(1.0);
            assert!(adapter.scale() > prev);
            prev = adapter.scale();
        }
    }

    #[test]
    fn frozen_scale_ignores_updates() {
        let mut adapter = ScaleAdapter::new(2.0, 0.234);
        adapter.update(1.0);
        let s = adapter.scale();
        adapter.freeze();
        for _ in 0..10 {
            adapter.update(0.0);
        }
        assert_eq!(adapter.scale(), s);
    }

    #[test]
    fn dual_averaging_seeks_target() {
        // fake transition whose acceptance decays with step size
        let mut da = DualAveraging::new(1.0, 0.8);
        for _ in 0..2000 {
            let eps = da.current();
            let acc = (-1.2 * eps).exp();
            da.update(acc);
        }
        da.freeze();
        let eps = da.current();
        let acc = (-1.2f64 * eps).exp();
        assert!((acc - 0.8).abs() < 0.03, "settled acceptance {acc}");
    }
}

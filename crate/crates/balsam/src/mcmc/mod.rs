//! Posterior samplers: adaptive Metropolis-within-Gibbs for Models I/Ia and
//! NUTS for Model II, multi-chain orchestration, and the retained-draw
//! container consumed by the diagnostics module.

pub mod adapt;
pub mod mwg;
pub mod nuts;

pub use mwg::{metropolis_accept, mwg_step, MwgAcceptanceCounts, MwgAdaptation};
pub use nuts::{leapfrog, LeapfrogOutcome, NutsChain, NutsTarget, TransitionInfo};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::model::{
    population_names, population_values, Dataset, ModelKind, ModelSpec, ParameterState,
    UnconstrainedSpace,
};
use crate::rng::{stream, StreamKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "mwg")]
    MetropolisWithinGibbs,
    #[serde(rename = "nuts")]
    Nuts,
}

/// Sampler settings. The published presets are exposed through the CLI:
/// `model1-sim` (20000 iterations, 5000 burn-in, thin 5), `model2-sim`
/// (3000 iterations, 1000 burn-in, no thinning, NUTS), and `table2`
/// (3 chains, 100000 iterations, 10000 burn-in, thin 10).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub algorithm: Algorithm,
    #[serde(default = "default_chains")]
    pub chains: usize,
    /// Total iterations per chain, including burn-in.
    pub iterations: usize,
    pub burn_in: usize,
    #[serde(default = "default_thin")]
    pub thin: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Dual-averaging target for NUTS (default 0.8). Metropolis blocks use
    /// fixed targets: 0.44 scalar, 0.234 vector.
    #[serde(default)]
    pub target_accept: Option<f64>,
    #[serde(default = "default_max_tree_depth")]
    pub max_tree_depth: usize,
    #[serde(default)]
    pub store_random_effects: bool,
}

fn default_chains() -> usize {
    2
}
fn default_thin() -> usize {
    1
}
fn default_seed() -> u64 {
    1
}
fn default_max_tree_depth() -> usize {
    10
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::Config("sampler needs chains >= 1".into()));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be >= 1".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::Config(format!(
                "burn_in ({}) must be below iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if let Some(t) = self.target_accept {
            if !(0.0 < t && t < 1.0) {
                return Err(Error::Config(format!(
                    "target_accept must lie in (0,1), got {t}"
                )));
            }
        }
        Ok(())
    }

    pub fn retained_per_chain(&self) -> usize {
        (self.iterations - self.burn_in).div_ceil(self.thin)
    }

    pub fn nuts_target_accept(&self) -> f64 {
        self.target_accept.unwrap_or(0.8)
    }
}

/// Per-chain run metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainRunStats {
    pub chain: usize,
    /// Divergent transitions after burn-in (NUTS).
    pub divergences: usize,
    pub burn_in_divergences: usize,
    /// Frozen step size (NUTS).
    pub step_size: Option<f64>,
    /// Post-burn-in Metropolis acceptance rate (MwG).
    pub accept_rate: Option<f64>,
    pub warnings: Vec<String>,
}

/// Multi-chain retained draws with metadata. Population parameters are
/// stored on the natural scale in [`population_names`] order.
#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    param_names: Vec<String>,
    /// chain -> retained draw -> population parameter values.
    chains: Vec<Vec<Vec<f64>>>,
    /// chain -> retained draw -> deviance (-2 * conditional log-likelihood).
    pub deviance: Vec<Vec<f64>>,
    /// Pooled posterior means of the subject random effects, one row per
    /// subject.
    pub b_means: Vec<Vec<f64>>,
    /// Full random-effect draws when requested: chain -> draw -> flattened b.
    pub random_effects: Option<Vec<Vec<Vec<f64>>>>,
    pub stats: Vec<ChainRunStats>,
    pub config: SamplerConfig,
}

impl PosteriorSamples {
    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|n| n == name)
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn retained_per_chain(&self) -> usize {
        self.chains.first().map_or(0, Vec::len)
    }

    pub fn total_retained(&self) -> usize {
        self.chains.iter().map(Vec::len).sum()
    }

    /// Per-chain draw vectors for one parameter.
    pub fn parameter_chains(&self, idx: usize) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .map(|chain| chain.iter().map(|draw| draw[idx]).collect())
            .collect()
    }

    /// All chains pooled for one parameter.
    pub fn pooled(&self, idx: usize) -> Vec<f64> {
        self.chains
            .iter()
            .flat_map(|chain| chain.iter().map(|draw| draw[idx]))
            .collect()
    }

    pub fn pooled_mean(&self, idx: usize) -> f64 {
        let pooled = self.pooled(idx);
        pooled.iter().sum::<f64>() / pooled.len() as f64
    }

    pub fn chain_draws(&self, chain: usize) -> &[Vec<f64>] {
        &self.chains[chain]
    }

    pub fn pooled_deviance(&self) -> Vec<f64> {
        self.deviance.iter().flatten().copied().collect()
    }
}

/// Per-subject least squares on the longitudinal data, pooled into moment
/// estimates for the population block; the survival block starts at the
/// event count over total follow-up with beta = alpha = gamma = 0.
fn least_squares_init(spec: &ModelSpec, data: &Dataset) -> ParameterState {
    let n = data.len();
    let k = spec.random_effect_dim();
    let mut b = DMatrix::zeros(n, k);
    let mut residual_acc = 0.0;
    let mut residual_count = 0usize;

    for i in 0..n {
        let rec = &data.subject(i).record;
        let coefs: Vec<f64> = match spec.kind {
            ModelKind::ModelI | ModelKind::ModelIa => {
                let n_i = rec.times.len() as f64;
                let sum_s: f64 = rec.times.iter().sum();
                let sum_z: f64 = rec.z.iter().sum();
                let sum_ss: f64 = rec.times.iter().map(|s| s * s).sum();
                let sum_sz: f64 = rec.times.iter().zip(rec.z.iter()).map(|(s, z)| s * z).sum();
                let det = n_i * sum_ss - sum_s * sum_s;
                if det.abs() > 1e-10 {
                    let slope = (n_i * sum_sz - sum_s * sum_z) / det;
                    let intercept = (sum_z - slope * sum_s) / n_i;
                    vec![intercept, slope]
                } else {
                    vec![sum_z / n_i, 0.0]
                }
            }
            ModelKind::ModelII => {
                // ridge-regularized normal equations on the basis matrix
                let basis = data.subject(i).meas_basis.as_ref().unwrap();
                let mut gram = DMatrix::<f64>::identity(k, k) * 0.1;
                let mut rhs = DVector::<f64>::zeros(k);
                for (row, z) in basis.iter().zip(rec.z.iter()) {
                    for a in 0..k {
                        rhs[a] += row[a] * z;
                        for c in 0..k {
                            gram[(a, c)] += row[a] * row[c];
                        }
                    }
                }
                match nalgebra::Cholesky::new(gram) {
                    Some(chol) => chol.solve(&rhs).iter().copied().collect(),
                    None => vec![rec.z.iter().sum::<f64>() / rec.z.len() as f64; k],
                }
            }
        };
        for c in 0..k {
            b[(i, c)] = coefs[c];
        }
        for (j, z) in rec.z.iter().enumerate() {
            let fitted = match spec.kind {
                ModelKind::ModelI | ModelKind::ModelIa => coefs[0] + coefs[1] * rec.times[j],
                ModelKind::ModelII => data.subject(i).meas_basis.as_ref().unwrap()[j]
                    .iter()
                    .zip(coefs.iter())
                    .map(|(bv, cv)| bv * cv)
                    .sum(),
            };
            residual_acc += (z - fitted).powi(2);
            residual_count += 1;
        }
    }

    let mu = DVector::from_fn(k, |c, _| b.column(c).sum() / n as f64);
    let mut sigma = DMatrix::zeros(k, k);
    for i in 0..n {
        let d = b.row(i).transpose() - &mu;
        sigma += &d * d.transpose();
    }
    sigma /= (n.max(2) - 1) as f64;
    for c in 0..k {
        sigma[(c, c)] += 0.1;
    }
    let sigma2 = (residual_acc / residual_count.max(1) as f64).max(1e-2);
    let (total_time, events) = data.follow_up_summary();
    let lambda = (events as f64 / total_time).max(1e-6);

    ParameterState {
        lambda,
        beta: DVector::zeros(spec.covariates),
        alpha: 0.0,
        gamma: (spec.kind == ModelKind::ModelIa).then_some(0.0),
        mu,
        sigma,
        sigma2,
        b,
    }
}

/// Overdispersed start for one chain: least squares, packed to the
/// unconstrained scale and jittered by 10% relative noise (plus a small
/// absolute component so zero-valued coordinates also spread). Retries
/// until the posterior is finite.
fn initial_point(
    spec: &ModelSpec,
    data: &Dataset,
    space: &UnconstrainedSpace,
    cfg: &SamplerConfig,
    chain: usize,
) -> Result<DVector<f64>> {
    let base = least_squares_init(spec, data);
    let u0 = space.pack(&base)?;
    let needs_grad = cfg.algorithm == Algorithm::Nuts;
    for attempt in 0..100u64 {
        let mut rng = stream(
            cfg.seed,
            StreamKind::ChainInit,
            chain as u64 * 1009 + attempt,
        );
        let mut u = u0.clone();
        for idx in 0..u.len() {
            let z: f64 = rng.sample(StandardNormal);
            u[idx] += (0.1 * u[idx].abs() + 0.02) * z;
        }
        let ok = if needs_grad {
            space.logp_and_grad(spec, data, u.as_slice()).is_ok()
        } else {
            space.log_density(spec, data, u.as_slice()).is_finite()
        };
        if ok {
            return Ok(u);
        }
    }
    Err(Error::Init(format!(
        "no finite-posterior start found for chain {chain} in 100 attempts"
    )))
}

/// Scale-aware starting guess for the diagonal inverse mass (posterior
/// variances, roughly): the subject random effects spread like the
/// cross-subject variance of their initial estimates, while the population
/// parameters concentrate at 1/n rates. Replaces the identity placeholder
/// so early warmup trajectories are not forced into deep trees; the warmup
/// windows then refine it from actual draws.
fn initial_inv_mass(
    spec: &ModelSpec,
    data: &Dataset,
    state: &ParameterState,
    space: &UnconstrainedSpace,
) -> DVector<f64> {
    let n = data.len() as f64;
    let (total_time, events) = data.follow_up_summary();
    let events = events.max(1) as f64;
    let n_obs = data.total_measurements().max(1) as f64;
    let k = spec.random_effect_dim();
    let mean_t = total_time / n;

    let mut b_var = vec![0.0f64; k];
    for c in 0..k {
        let mean_c = state.b.column(c).sum() / n;
        b_var[c] = state
            .b
            .column(c)
            .iter()
            .map(|v| (v - mean_c).powi(2))
            .sum::<f64>()
            / (n - 1.0).max(1.0);
        b_var[c] = b_var[c].clamp(1e-3, 1e4);
    }

    let mut guess = vec![1.0 / events; 1]; // log lambda
    guess.extend(std::iter::repeat_n(1.0 / events, spec.covariates)); // beta
    guess.push(1.0 / (events * mean_t * mean_t).max(1.0)); // alpha
    if spec.kind == ModelKind::ModelIa {
        guess.push(1.0 / n_obs); // gamma
    }
    guess.extend(b_var.iter().map(|v| v / n)); // mu
    guess.extend(std::iter::repeat_n(1.0 / n, k * (k + 1) / 2)); // chol(Sigma)
    guess.push(2.0 / n_obs); // log sigma2
    for _ in 0..data.len() {
        guess.extend(b_var.iter().copied()); // b rows
    }
    debug_assert_eq!(guess.len(), space.dim());
    DVector::from_vec(guess.into_iter().map(|v| v.clamp(1e-6, 1e4)).collect())
}

struct PosteriorTarget<'a> {
    space: &'a UnconstrainedSpace,
    spec: &'a ModelSpec,
    data: &'a Dataset,
}

impl NutsTarget for PosteriorTarget<'_> {
    fn logp_grad(&self, position: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        self.space
            .logp_and_grad(self.spec, self.data, position.as_slice())
            .ok()
    }
}

/// Streaming mean/variance accumulator for the mass-matrix window.
struct Welford {
    n: u64,
    mean: DVector<f64>,
    m2: DVector<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Welford {
            n: 0,
            mean: DVector::zeros(dim),
            m2: DVector::zeros(dim),
        }
    }

    fn push(&mut self, x: &DVector<f64>) {
        self.n += 1;
        let n = self.n as f64;
        for j in 0..x.len() {
            let delta = x[j] - self.mean[j];
            self.mean[j] += delta / n;
            self.m2[j] += delta * (x[j] - self.mean[j]);
        }
    }

    /// Regularized variances, shrunk toward a small constant the way warmup
    /// estimators usually are.
    fn regularized_variance(&self) -> Option<DVector<f64>> {
        if self.n < 10 {
            return None;
        }
        let n = self.n as f64;
        let shrink = n / (n + 5.0);
        Some(DVector::from_fn(self.mean.len(), |j, _| {
            (shrink * self.m2[j] / (n - 1.0) + (1.0 - shrink) * 1e-3).clamp(1e-8, 1e8)
        }))
    }
}

struct ChainOutput {
    population: Vec<Vec<f64>>,
    deviance: Vec<f64>,
    b_sum: DMatrix<f64>,
    random_effects: Option<Vec<Vec<f64>>>,
    stats: ChainRunStats,
}

fn record_draw(
    spec: &ModelSpec,
    data: &Dataset,
    state: &ParameterState,
    retained_so_far: usize,
) -> Result<(Vec<f64>, f64)> {
    if retained_so_far.is_multiple_of(100) {
        state.check_shape(spec, data.len())?;
        if !state.is_interior() {
            return Err(Error::Numerical(
                "retained draw violates parameter-space invariants".into(),
            ));
        }
    }
    let deviance = -2.0 * crate::model::total_log_likelihood(spec, state, data)?;
    Ok((population_values(spec, state), deviance))
}

fn run_mwg_chain(
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &SamplerConfig,
    chain_idx: usize,
) -> Result<ChainOutput> {
    let space = UnconstrainedSpace::new(spec, data.len());
    let u0 = initial_point(spec, data, &space, cfg, chain_idx)?;
    let mut state = space.unpack(u0.as_slice());
    let mut rng = stream(cfg.seed, StreamKind::Chain, chain_idx as u64);
    let mut adaptation = MwgAdaptation::new(spec, data.len());
    let mut counts = MwgAcceptanceCounts::default();
    let k = spec.random_effect_dim();

    let mut population = Vec::with_capacity(cfg.retained_per_chain());
    let mut deviance = Vec::with_capacity(cfg.retained_per_chain());
    let mut b_sum = DMatrix::zeros(data.len(), k);
    let mut random_effects = cfg.store_random_effects.then(Vec::new);
    let mut frozen_scales: Option<Vec<f64>> = None;
    let mut warnings = Vec::new();

    for it in 0..cfg.iterations {
        if it == cfg.burn_in {
            adaptation.freeze();
            frozen_scales = Some(adaptation.scales());
            counts = MwgAcceptanceCounts::default();
        }
        mwg_step(&mut state, spec, data, &mut adaptation, &mut counts, &mut rng)?;
        if it >= cfg.burn_in && (it - cfg.burn_in).is_multiple_of(cfg.thin) {
            let (pop, dev) = record_draw(spec, data, &state, population.len())?;
            population.push(pop);
            deviance.push(dev);
            b_sum += &state.b;
            if let Some(store) = random_effects.as_mut() {
                store.push(state.b.iter().copied().collect());
            }
        }
    }

    if let Some(frozen) = &frozen_scales {
        if adaptation.scales() != *frozen {
            warnings.push("proposal scales moved after burn-in freeze".into());
        }
    }

    Ok(ChainOutput {
        population,
        deviance,
        b_sum,
        random_effects,
        stats: ChainRunStats {
            chain: chain_idx,
            divergences: 0,
            burn_in_divergences: 0,
            step_size: None,
            accept_rate: Some(counts.overall_rate()),
            warnings,
        },
    })
}

fn run_nuts_chain(
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &SamplerConfig,
    chain_idx: usize,
) -> Result<ChainOutput> {
    let space = UnconstrainedSpace::new(spec, data.len());
    let u0 = initial_point(spec, data, &space, cfg, chain_idx)?;
    let mut rng = stream(cfg.seed, StreamKind::Chain, chain_idx as u64);
    let target = PosteriorTarget {
        space: &space,
        spec,
        data,
    };
    let start_state = space.unpack(u0.as_slice());
    let mass_guess = initial_inv_mass(spec, data, &start_state, &space);
    let mut chain = NutsChain::new(
        target,
        u0,
        cfg.nuts_target_accept(),
        cfg.max_tree_depth,
        &mut rng,
    )?;
    chain.set_inv_mass(mass_guess, &mut rng);
    let k = spec.random_effect_dim();

    // Windowed diagonal mass-matrix estimation inside burn-in: interim
    // estimates keep early trajectories short, the final estimate comes
    // from the second half of burn-in and is applied at 7/8, leaving the
    // last eighth to re-adapt the step size.
    let apply_points = [
        cfg.burn_in / 8,
        cfg.burn_in / 4,
        cfg.burn_in / 2,
        cfg.burn_in * 7 / 8,
    ];
    let mut welford = Welford::new(space.dim());

    let mut population = Vec::with_capacity(cfg.retained_per_chain());
    let mut deviance = Vec::with_capacity(cfg.retained_per_chain());
    let mut b_sum = DMatrix::zeros(data.len(), k);
    let mut random_effects = cfg.store_random_effects.then(Vec::new);
    let mut burn_divergences = 0usize;
    let mut post_divergences = 0usize;
    let mut frozen_step = None;
    let mut warnings = Vec::new();

    let trace = std::env::var_os("BALSAM_TRACE_NUTS").is_some();
    let mut trace_depth = 0usize;
    let mut trace_divs = 0usize;
    for it in 0..cfg.iterations {
        if it == cfg.burn_in {
            chain.step.freeze();
            frozen_step = Some(chain.step.current());
        }
        let info = chain.transition(&mut rng);
        if trace {
            trace_depth += info.depth;
            trace_divs += usize::from(info.diverged);
            if (it + 1).is_multiple_of(50) {
                eprintln!(
                    "chain {chain_idx} it {:5}: eps {:.3e} avg_depth {:.1} divs {trace_divs}",
                    it + 1,
                    chain.step.current(),
                    trace_depth as f64 / 50.0,
                );
                trace_depth = 0;
                trace_divs = 0;
            }
        }
        if it < cfg.burn_in {
            chain.step.update(info.accept_stat);
            burn_divergences += usize::from(info.diverged);
            welford.push(&chain.position);
            if apply_points.contains(&(it + 1)) {
                if let Some(var) = welford.regularized_variance() {
                    chain.set_inv_mass(var, &mut rng);
                }
                welford = Welford::new(space.dim());
            }
        } else {
            post_divergences += usize::from(info.diverged);
            if (it - cfg.burn_in).is_multiple_of(cfg.thin) {
                let state = space.unpack(chain.position.as_slice());
                let (pop, dev) = record_draw(spec, data, &state, population.len())?;
                population.push(pop);
                deviance.push(dev);
                b_sum += &state.b;
                if let Some(store) = random_effects.as_mut() {
                    store.push(state.b.iter().copied().collect());
                }
            }
        }
    }

    if burn_divergences * 2 > cfg.burn_in {
        warnings.push(format!(
            "persistent divergence: {burn_divergences} of {} burn-in transitions diverged",
            cfg.burn_in
        ));
    }
    if let Some(frozen) = frozen_step {
        if chain.step.current() != frozen {
            warnings.push("step size moved after burn-in freeze".into());
        }
    }

    Ok(ChainOutput {
        population,
        deviance,
        b_sum,
        random_effects,
        stats: ChainRunStats {
            chain: chain_idx,
            divergences: post_divergences,
            burn_in_divergences: burn_divergences,
            step_size: frozen_step,
            accept_rate: None,
            warnings,
        },
    })
}

/// Runs `cfg.chains` independent chains from overdispersed starts and
/// collects retained draws. Deterministic under the config seed regardless
/// of how many chains run concurrently (`threads`).
pub fn run(
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &SamplerConfig,
    threads: usize,
) -> Result<PosteriorSamples> {
    cfg.validate()?;
    spec.validate()?;
    let chain_ids: Vec<usize> = (0..cfg.chains).collect();
    let mut outputs: Vec<Option<Result<ChainOutput>>> = (0..cfg.chains).map(|_| None).collect();

    for batch in chain_ids.chunks(threads.max(1)) {
        let results: Vec<(usize, Result<ChainOutput>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .iter()
                .map(|&c| {
                    (
                        c,
                        scope.spawn(move || match cfg.algorithm {
                            Algorithm::MetropolisWithinGibbs => run_mwg_chain(spec, data, cfg, c),
                            Algorithm::Nuts => run_nuts_chain(spec, data, cfg, c),
                        }),
                    )
                })
                .collect();
            handles
                .into_iter()
                .map(|(c, h)| {
                    (
                        c,
                        h.join().unwrap_or_else(|_| {
                            Err(Error::Numerical(format!("chain {c} panicked")))
                        }),
                    )
                })
                .collect()
        });
        for (c, result) in results {
            outputs[c] = Some(result);
        }
    }

    let mut chains = Vec::with_capacity(cfg.chains);
    let mut deviance = Vec::with_capacity(cfg.chains);
    let mut stats = Vec::with_capacity(cfg.chains);
    let mut random_effects = cfg.store_random_effects.then(Vec::new);
    let k = spec.random_effect_dim();
    let mut b_total = DMatrix::zeros(data.len(), k);
    let mut retained_total = 0usize;

    for output in outputs.into_iter().flatten() {
        let out = output?;
        retained_total += out.population.len();
        b_total += &out.b_sum;
        chains.push(out.population);
        deviance.push(out.deviance);
        stats.push(out.stats);
        if let (Some(all), Some(chain_re)) = (random_effects.as_mut(), out.random_effects) {
            all.push(chain_re);
        }
    }

    let b_means = (0..data.len())
        .map(|i| {
            (0..k)
                .map(|c| b_total[(i, c)] / retained_total.max(1) as f64)
                .collect()
        })
        .collect();

    Ok(PosteriorSamples {
        param_names: population_names(spec),
        chains,
        deviance,
        b_means,
        random_effects,
        stats,
        config: cfg.clone(),
    })
}

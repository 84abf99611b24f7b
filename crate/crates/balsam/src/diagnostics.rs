//! Convergence diagnostics, posterior summaries, model criticism, coverage
//! scoring, curve tables, and high-risk flagging.

use serde::{Deserialize, Serialize};

use crate::mcmc::PosteriorSamples;
use crate::model::{arc_length_model1, ModelKind, ModelSpec};
use crate::quadrature::{self, Grid};
use crate::{Error, Result};

/// Split Gelman-Rubin potential scale reduction. Each chain is halved (the
/// middle draw of an odd chain is dropped), then
/// Rhat = sqrt(((n-1)/n W + B/n) / W) over the split halves. Returns None
/// when the within-chain variance degenerates to zero.
pub fn split_rhat(chains: &[Vec<f64>]) -> Option<f64> {
    let halves = split_chains(chains)?;
    let n = halves[0].len() as f64;
    let m = halves.len() as f64;
    let means: Vec<f64> = halves.iter().map(|c| mean(c)).collect();
    let vars: Vec<f64> = halves
        .iter()
        .zip(means.iter())
        .map(|(c, mu)| sample_variance(c, *mu))
        .collect();
    let w = vars.iter().sum::<f64>() / m;
    if !(w > 0.0) {
        return None;
    }
    let grand = means.iter().sum::<f64>() / m;
    let b = if halves.len() > 1 {
        n * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    Some((((n - 1.0) / n * w + b / n) / w).sqrt())
}

fn split_chains(chains: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    if chains.is_empty() {
        return None;
    }
    let shortest = chains.iter().map(Vec::len).min()?;
    if shortest < 4 {
        return None;
    }
    let half = shortest / 2;
    let mut out = Vec::with_capacity(chains.len() * 2);
    for chain in chains {
        out.push(chain[..half].to_vec());
        // drop the middle draw when the trimmed length is odd
        out.push(chain[shortest - half..shortest].to_vec());
    }
    Some(out)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_variance(values: &[f64], mu: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (values.len() - 1) as f64
}

/// Effective sample size estimate. `value` may exceed the total draw count
/// for antithetic chains; `exceeds_total` flags that case so reporting can
/// apply its cap policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EssEstimate {
    pub value: f64,
    pub exceeds_total: bool,
}

/// Multi-chain effective sample size: autocorrelation-sum estimator with
/// Geyer initial-monotone truncation. Returns None for degenerate chains.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> Option<EssEstimate> {
    if chains.is_empty() {
        return None;
    }
    let n = chains.iter().map(Vec::len).min()?;
    if n < 4 {
        return None;
    }
    let m = chains.len();
    let total = (m * n) as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(&c[..n])).collect();
    let vars: Vec<f64> = chains
        .iter()
        .zip(means.iter())
        .map(|(c, mu)| sample_variance(&c[..n], *mu))
        .collect();
    let w = vars.iter().sum::<f64>() / m as f64;
    if !(w > 0.0) {
        return None;
    }
    let grand = means.iter().sum::<f64>() / m as f64;
    let b_over_n = if m > 1 {
        means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m - 1) as f64
    } else {
        0.0
    };
    let var_plus = w * (n - 1) as f64 / n as f64 + b_over_n;

    // combined autocorrelation at lag t, averaged across chains
    let acov = |chain: &[f64], mu: f64, t: usize| -> f64 {
        let mut acc = 0.0;
        for i in 0..n - t {
            acc += (chain[i] - mu) * (chain[i + t] - mu);
        }
        acc / n as f64
    };
    let rho = |t: usize| -> f64 {
        let mean_acov = chains
            .iter()
            .zip(means.iter())
            .map(|(c, mu)| acov(&c[..n], *mu, t))
            .sum::<f64>()
            / m as f64;
        1.0 - (w - mean_acov) / var_plus
    };

    // Geyer: sum paired autocorrelations while positive, enforcing a
    // monotone non-increasing sequence
    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 0usize;
    while t + 1 < n {
        let pair = rho(t) + rho(t + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        t += 2;
    }
    let ess = total / tau.max(1e-8);
    Some(EssEstimate {
        value: ess,
        exceeds_total: ess > total,
    })
}

/// Deviance information criterion from per-draw deviances:
/// p_D = var(deviance)/2 and DIC = mean(deviance) + p_D.
pub fn dic(deviance_draws: &[f64]) -> (f64, f64) {
    assert!(!deviance_draws.is_empty(), "dic needs at least one draw");
    let mu = mean(deviance_draws);
    let p_d = sample_variance(deviance_draws, mu) / 2.0;
    (mu + p_d, p_d)
}

/// Empirical percentile with linear interpolation between order statistics
/// (the R type-7 convention); `p` in [0, 100].
pub fn percentile_linear(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let h = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// One row of the posterior summary table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
}

/// Pooled-across-chain summaries for every population parameter: mean, SD,
/// equal-tailed 95% interval, split-Rhat, and ESS (capped at the total
/// retained draw count).
pub fn summarize(samples: &PosteriorSamples) -> Vec<SummaryRow> {
    let total = samples.total_retained() as f64;
    samples
        .param_names()
        .iter()
        .enumerate()
        .map(|(idx, name)| {
            let chains = samples.parameter_chains(idx);
            let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
            let mu = mean(&pooled);
            let sd = sample_variance(&pooled, mu).sqrt();
            let mut sorted = pooled;
            sorted.sort_by(f64::total_cmp);
            SummaryRow {
                name: name.clone(),
                mean: mu,
                sd,
                q025: percentile_linear(&sorted, 2.5),
                q975: percentile_linear(&sorted, 97.5),
                rhat: split_rhat(&chains),
                ess: effective_sample_size(&chains).map(|e| e.value.min(total)),
            }
        })
        .collect()
}

/// Per-parameter coverage over simulation replicates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageReport {
    pub parameters: Vec<ParameterCoverage>,
    pub replicates: usize,
    pub failures_excluded: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterCoverage {
    pub name: String,
    pub covered: usize,
    pub rate: f64,
}

/// Scores coverage of closed credible intervals against the data-generating
/// values: cover = 1 when truth lies inside [q2.5, q97.5].
pub fn score_coverage(
    names: &[String],
    replicate_intervals: &[Vec<(f64, f64)>],
    truth: &[f64],
    failures_excluded: usize,
) -> CoverageReport {
    assert_eq!(names.len(), truth.len());
    let replicates = replicate_intervals.len();
    let parameters = names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let covered = replicate_intervals
                .iter()
                .filter(|intervals| {
                    let (lo, hi) = intervals[j];
                    lo <= truth[j] && truth[j] <= hi
                })
                .count();
            ParameterCoverage {
                name: name.clone(),
                covered,
                rate: covered as f64 / replicates.max(1) as f64,
            }
        })
        .collect();
    CoverageReport {
        parameters,
        replicates,
        failures_excluded,
    }
}

/// Population parameter point estimates used to draw fitted curves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationEstimates {
    pub lambda: f64,
    pub beta: Vec<f64>,
    pub alpha: f64,
    pub mu: Vec<f64>,
}

/// One gridded row of fitted population curves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveRow {
    pub t: f64,
    pub cumulative_variation: f64,
    pub hazard: f64,
    pub survival: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveTable {
    pub rows: Vec<CurveRow>,
}

/// Builds the fitted population curve table at posterior means for a fixed
/// covariate profile. For Models I/Ia the arc length uses the closed form
/// t sqrt(1 + slope^2) with the slope taken from `mu[slope_index]`
/// (configurable because reports differ on which component to use); Model II
/// integrates the spline trajectory built from mu.
pub fn curve_table(
    spec: &ModelSpec,
    estimates: &PopulationEstimates,
    profile: &[f64],
    grid_times: &[f64],
    slope_index: usize,
) -> Result<CurveTable> {
    if profile.len() != spec.covariates {
        return Err(Error::Input(format!(
            "covariate profile has {} entries, model wants {}",
            profile.len(),
            spec.covariates
        )));
    }
    if slope_index >= estimates.mu.len() {
        return Err(Error::Input(format!(
            "slope index {slope_index} out of range for mu of length {}",
            estimates.mu.len()
        )));
    }
    let linpred: f64 = profile
        .iter()
        .zip(estimates.beta.iter())
        .map(|(x, b)| x * b)
        .sum();
    let mut rows = Vec::with_capacity(grid_times.len());
    for &t in grid_times {
        if t < 0.0 {
            return Err(Error::Input("curve grid times must be non-negative".into()));
        }
        let (g, h) = match spec.kind {
            ModelKind::ModelI | ModelKind::ModelIa => {
                let slope = estimates.mu[slope_index];
                let c = (1.0 + slope * slope).sqrt();
                let g = arc_length_model1(slope, t);
                let x = estimates.alpha * c * t;
                let h = if x.abs() < 1e-8 {
                    estimates.lambda * linpred.exp() * t
                } else {
                    estimates.lambda * linpred.exp() * t * x.exp_m1() / x
                };
                (g, h)
            }
            ModelKind::ModelII => {
                let spline = spec.spline.as_ref().unwrap();
                if t == 0.0 {
                    (0.0, 0.0)
                } else {
                    let grid = Grid::new(t, spec.quad_points)?;
                    let speed = crate::model::spline_speed(&estimates.mu, spline);
                    let g = quadrature::trapezoid_arc_length(&speed, &grid)?;
                    let h = quadrature::nested_cumulative_hazard(
                        |_| estimates.lambda,
                        linpred,
                        estimates.alpha,
                        &speed,
                        &grid,
                    )?;
                    (g, h)
                }
            }
        };
        rows.push(CurveRow {
            t,
            cumulative_variation: g,
            hazard: estimates.lambda * (linpred + estimates.alpha * g).exp(),
            survival: (-h).exp(),
        });
    }
    Ok(CurveTable { rows })
}

/// Which side of the percentile threshold flags a subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdDirection {
    Above,
    Below,
}

/// Reference-range policy for high-risk flagging. Defaults flag subjects
/// whose estimated cumulative variation and observed time both lie strictly
/// above their 95th percentiles; directions are configurable because the
/// published reference ranges are ambiguous about orientation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskPolicy {
    pub variation_percentile: f64,
    pub time_percentile: f64,
    pub variation_direction: ThresholdDirection,
    pub time_direction: ThresholdDirection,
}

impl Default for RiskPolicy {
    fn default() -> Self {
        RiskPolicy {
            variation_percentile: 95.0,
            time_percentile: 95.0,
            variation_direction: ThresholdDirection::Above,
            time_direction: ThresholdDirection::Above,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskFlag {
    pub id: String,
    pub t: f64,
    pub cumulative_variation: f64,
    pub flagged: bool,
}

/// Flags subjects violating both configured percentile limits. Comparisons
/// are strict, so identical subjects are never flagged.
pub fn flag_high_risk(subjects: &[(String, f64, f64)], policy: &RiskPolicy) -> Vec<RiskFlag> {
    let mut variations: Vec<f64> = subjects.iter().map(|(_, _, g)| *g).collect();
    let mut times: Vec<f64> = subjects.iter().map(|(_, t, _)| *t).collect();
    variations.sort_by(f64::total_cmp);
    times.sort_by(f64::total_cmp);
    let g_limit = percentile_linear(&variations, policy.variation_percentile);
    let t_limit = percentile_linear(&times, policy.time_percentile);
    let beyond = |value: f64, limit: f64, dir: ThresholdDirection| match dir {
        ThresholdDirection::Above => value > limit,
        ThresholdDirection::Below => value < limit,
    };
    subjects
        .iter()
        .map(|(id, t, g)| RiskFlag {
            id: id.clone(),
            t: *t,
            cumulative_variation: *g,
            flagged: beyond(*g, g_limit, policy.variation_direction)
                && beyond(*t, t_limit, policy.time_direction),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::math::std_normal_cdf;
    use crate::model::PriorSpec;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian_chain(seed: u64, n: usize, mu: f64, sd: f64) -> Vec<f64> {
        let mut rng = crate::rng::stream(seed, crate::rng::StreamKind::Chain, 0);
        (0..n)
            .map(|_| mu + sd * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    #[test]
    fn rhat_identical_half_repeating_chains() {
        // a sequence whose halves repeat makes every split half identical,
        // so B = 0 and Rhat hits the within-only limit sqrt((n-1)/n)
        let base: Vec<f64> = vec![1.0, 4.0, 2.0, 3.0];
        let chain: Vec<f64> = base.iter().chain(base.iter()).copied().collect();
        let chains = vec![chain.clone(), chain];
        let rhat = split_rhat(&chains).unwrap();
        let n = 4.0f64;
        assert_abs_diff_eq!(rhat, ((n - 1.0) / n).sqrt(), epsilon = 1e-12);
        assert!(rhat <= 1.0);
    }

    #[test]
    fn rhat_detects_separated_chains() {
        let a = gaussian_chain(1, 1000, 0.0, 1.0);
        let b = gaussian_chain(2, 1000, 5.0, 1.0);
        let rhat = split_rhat(&[a, b]).unwrap();
        assert!(rhat > 2.0, "rhat = {rhat}");
    }

    #[test]
    fn rhat_near_one_for_iid_chains() {
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|c| gaussian_chain(10 + c, 5000, 0.0, 1.0))
            .collect();
        let rhat = split_rhat(&chains).unwrap();
        assert!((0.999..=1.01).contains(&rhat), "rhat = {rhat}");
    }

    #[test]
    fn rhat_degenerate_and_affine_invariance() {
        assert!(split_rhat(&[vec![2.0; 100]]).is_none());
        let chains: Vec<Vec<f64>> = (0..3)
            .map(|c| gaussian_chain(20 + c, 400, 1.0, 2.0))
            .collect();
        let base = split_rhat(&chains).unwrap();
        let shifted: Vec<Vec<f64>> = chains
            .iter()
            .map(|c| c.iter().map(|v| -3.0 * v + 7.0).collect())
            .collect();
        assert_abs_diff_eq!(split_rhat(&shifted).unwrap(), base, epsilon = 1e-10);
    }

    #[test]
    fn ess_iid_chain() {
        let chain = gaussian_chain(33, 4000, 0.0, 1.0);
        let ess = effective_sample_size(&[chain]).unwrap();
        assert!(
            (3400.0..=4600.0).contains(&ess.value),
            "ess = {}",
            ess.value
        );
    }

    #[test]
    fn ess_ar1_matches_analytic_factor() {
        // AR(1) with rho = 0.5 has ESS = N (1-rho)/(1+rho) = N/3
        let mut rng = crate::rng::stream(44, crate::rng::StreamKind::Chain, 1);
        let rho = 0.5f64;
        let innovation_sd = (1.0 - rho * rho).sqrt();
        let mut chain = Vec::with_capacity(3000);
        let mut x = 0.0f64;
        for _ in 0..3000 {
            x = rho * x + innovation_sd * rng.sample::<f64, _>(StandardNormal);
            chain.push(x);
        }
        let ess = effective_sample_size(&[chain]).unwrap();
        assert!(
            (800.0..=1200.0).contains(&ess.value),
            "ess = {}",
            ess.value
        );
    }

    #[test]
    fn ess_antithetic_chain_exceeds_total_with_flag() {
        let chain: Vec<f64> = (0..2000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let ess = effective_sample_size(&[chain]).unwrap();
        assert!(ess.exceeds_total);
        assert!(ess.value > 2000.0);
    }

    #[test]
    fn ess_reverse_invariance() {
        let chain = gaussian_chain(55, 1000, 0.0, 1.0);
        let forward = effective_sample_size(&[chain.clone()]).unwrap();
        let reversed: Vec<f64> = chain.into_iter().rev().collect();
        let backward = effective_sample_size(&[reversed]).unwrap();
        assert_abs_diff_eq!(forward.value, backward.value, epsilon = 1e-8);
    }

    #[test]
    fn dic_examples() {
        let (d, p) = dic(&[7.5, 7.5, 7.5]);
        assert_eq!((d, p), (7.5, 0.0));

        let (d, p) = dic(&[8.0, 10.0, 12.0]);
        assert_eq!(p, 2.0);
        assert_eq!(d, 12.0);

        // permutation invariance
        let (d2, p2) = dic(&[12.0, 8.0, 10.0]);
        assert_eq!((d2, p2), (d, p));
    }

    #[test]
    fn dic_matches_independent_direct_computation() {
        let draws = gaussian_chain(66, 500, 40.0, 3.0);
        let (d, p) = dic(&draws);
        let n = draws.len() as f64;
        let mu: f64 = draws.iter().sum::<f64>() / n;
        let var: f64 = draws.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0);
        assert_abs_diff_eq!(p, var / 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(d, mu + var / 2.0, epsilon = 1e-9);
    }

    #[test]
    fn percentile_linear_interpolation_convention() {
        let sorted: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_abs_diff_eq!(percentile_linear(&sorted, 2.5), 3.475, epsilon = 1e-12);
        assert_abs_diff_eq!(percentile_linear(&sorted, 97.5), 97.525, epsilon = 1e-12);
        assert_eq!(percentile_linear(&sorted, 0.0), 1.0);
        assert_eq!(percentile_linear(&sorted, 100.0), 100.0);
    }

    #[test]
    fn coverage_scoring_uses_closed_intervals() {
        let names = vec!["theta".to_string()];
        // interval exactly [truth, truth + 1] covers
        let report = score_coverage(&names, &[vec![(1.0, 2.0)]], &[1.0], 0);
        assert_eq!(report.parameters[0].covered, 1);

        // all intervals missing the truth
        let report = score_coverage(
            &names,
            &[vec![(2.0, 3.0)], vec![(-4.0, -2.0)]],
            &[1.0],
            3,
        );
        assert_eq!(report.parameters[0].covered, 0);
        assert_eq!(report.parameters[0].rate, 0.0);
        assert_eq!(report.failures_excluded, 3);
    }

    #[test]
    fn coverage_calibrated_on_conjugate_normal_model() {
        // draw truth from the prior, observe 5 points, use the analytic
        // posterior interval; long-run coverage must sit near 95%
        let mut rng = crate::rng::stream(77, crate::rng::StreamKind::Replicate, 0);
        let names = vec!["theta".to_string()];
        let n_obs = 5.0f64;
        let z = 1.959_963_984_540_054; // Phi^-1(0.975)
        let mut covered = 0;
        let replicates = 500;
        for _ in 0..replicates {
            let theta: f64 = rng.sample(StandardNormal);
            let ybar = theta + rng.sample::<f64, _>(StandardNormal) / n_obs.sqrt();
            let post_mean = ybar * n_obs / (n_obs + 1.0);
            let post_sd = (1.0 / (n_obs + 1.0)).sqrt();
            let interval = (post_mean - z * post_sd, post_mean + z * post_sd);
            let report = score_coverage(&names, &[vec![interval]], &[theta], 0);
            covered += report.parameters[0].covered;
        }
        let rate = covered as f64 / replicates as f64;
        assert!((0.92..=0.98).contains(&rate), "coverage {rate}");
        // sanity: the z constant really is the 97.5% normal quantile
        assert_abs_diff_eq!(std_normal_cdf(z), 0.975, epsilon = 1e-9);
    }

    fn model1_spec() -> ModelSpec {
        ModelSpec {
            kind: ModelKind::ModelI,
            covariates: 1,
            longitudinal_covariate_index: None,
            spline: None,
            priors: PriorSpec::default(),
            quad_points: 200,
        }
    }

    #[test]
    fn curve_table_exponential_when_alpha_zero() {
        let spec = model1_spec();
        let est = PopulationEstimates {
            lambda: 0.03,
            beta: vec![0.4],
            alpha: 0.0,
            mu: vec![1.0, 0.7],
        };
        let times: Vec<f64> = (0..=20).map(|i| i as f64).collect();
        let table = curve_table(&spec, &est, &[1.0], &times, 1).unwrap();
        for row in &table.rows {
            let expected = (-0.03 * 0.4f64.exp() * row.t).exp();
            assert_abs_diff_eq!(row.survival, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn curve_table_identity_variation_for_zero_slope() {
        let spec = model1_spec();
        let est = PopulationEstimates {
            lambda: 0.02,
            beta: vec![0.0],
            alpha: 0.25,
            mu: vec![1.0, 0.0],
        };
        let times = vec![0.0, 1.0, 5.0, 10.0];
        let table = curve_table(&spec, &est, &[0.0], &times, 1).unwrap();
        for row in &table.rows {
            assert_abs_diff_eq!(row.cumulative_variation, row.t, epsilon = 1e-12);
        }
        // hazard at t = 0 is lambda e^{x'beta}
        assert_abs_diff_eq!(table.rows[0].hazard, 0.02, epsilon = 1e-14);
    }

    #[test]
    fn risk_flags_identical_subjects_never_flagged() {
        let subjects: Vec<(String, f64, f64)> = (0..30)
            .map(|i| (format!("s{i}"), 10.0, 14.0))
            .collect();
        let flags = flag_high_risk(&subjects, &RiskPolicy::default());
        assert!(flags.iter().all(|f| !f.flagged));
    }

    #[test]
    fn risk_flags_extreme_subject() {
        let mut subjects: Vec<(String, f64, f64)> = (0..30)
            .map(|i| (format!("s{i}"), 8.0, 10.0))
            .collect();
        subjects.push(("extreme".to_string(), 40.0, 90.0));
        let flags = flag_high_risk(&subjects, &RiskPolicy::default());
        let flagged: Vec<&RiskFlag> = flags.iter().filter(|f| f.flagged).collect();
        assert_eq!(flagged.len(), 1);
        assert_eq!(flagged[0].id, "extreme");
    }
}

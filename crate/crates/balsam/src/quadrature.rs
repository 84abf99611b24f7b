//! Numerical integration for arc length and the nested cumulative hazard.
//!
//! The hazard of this model family contains two nested integrals: the inner
//! one is the arc length of the latent trajectory, the outer one accumulates
//! the hazard. Both share one grid of m equal sub-intervals, so the inner
//! integral is carried as a prefix sum and the total cost stays O(m) instead
//! of O(m^2). Summation is deterministic left-to-right at fixed m.

use crate::{Error, Result};

/// Uniform quadrature grid: m equal sub-intervals on [0, t_end], nodes
/// s_k = k * t_end / m.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    t_end: f64,
    m: usize,
}

impl Grid {
    pub fn new(t_end: f64, m: usize) -> Result<Self> {
        if !(t_end.is_finite() && t_end > 0.0) {
            return Err(Error::Config(format!(
                "grid t_end must be positive and finite, got {t_end}"
            )));
        }
        if m == 0 {
            return Err(Error::Config("grid needs m >= 1 sub-intervals".into()));
        }
        Ok(Grid { t_end, m })
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn subintervals(&self) -> usize {
        self.m
    }

    pub fn delta(&self) -> f64 {
        self.t_end / self.m as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        // exact endpoints; interior nodes by multiplication for reproducibility
        if k == self.m {
            self.t_end
        } else {
            k as f64 * self.delta()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.m).map(move |k| self.node(k))
    }
}

/// Composite trapezoid rule for samples at the m+1 nodes of a uniform grid.
pub fn trapezoid_from_samples(values: &[f64], delta: f64) -> f64 {
    debug_assert!(values.len() >= 2);
    let last = values.len() - 1;
    let mut acc = 0.5 * values[0];
    for v in &values[1..last] {
        acc += v;
    }
    acc += 0.5 * values[last];
    acc * delta
}

/// Prefix trapezoid sums: out[k] integrates the samples over [s_0, s_k],
/// with out[0] = 0. One left-to-right pass.
pub fn prefix_trapezoid(values: &[f64], delta: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    out.push(0.0);
    let mut acc = 0.0;
    for k in 1..values.len() {
        acc += 0.5 * delta * (values[k - 1] + values[k]);
        out.push(acc);
    }
    out
}

fn sample_speed(speed: impl Fn(f64) -> f64, grid: &Grid) -> Result<Vec<f64>> {
    let mut values = Vec::with_capacity(grid.subintervals() + 1);
    for s in grid.nodes() {
        let v = speed(s);
        if !v.is_finite() {
            return Err(Error::Numerical(format!(
                "speed function returned {v} at node s = {s}"
            )));
        }
        values.push(v);
    }
    Ok(values)
}

/// Composite trapezoid approximation of the arc length
/// integral of `speed` over [0, t_end].
pub fn trapezoid_arc_length(speed: impl Fn(f64) -> f64, grid: &Grid) -> Result<f64> {
    let values = sample_speed(speed, grid)?;
    Ok(trapezoid_from_samples(&values, grid.delta()))
}

/// Arc length of the gridded values G(s_0) = 0, ..., G(s_m) in one pass;
/// non-decreasing for non-negative speeds.
pub fn cumulative_arc_length_grid(speed: impl Fn(f64) -> f64, grid: &Grid) -> Result<Vec<f64>> {
    let values = sample_speed(speed, grid)?;
    Ok(prefix_trapezoid(&values, grid.delta()))
}

/// Total length of the polyline through `points`, used for the descriptive
/// arc length of raw observed measurements.
pub fn polyline_length(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Input(format!(
            "polyline needs at least 2 points, got {}",
            points.len()
        )));
    }
    let mut total = 0.0;
    for (k, pair) in points.windows(2).enumerate() {
        let (s0, q0) = pair[0];
        let (s1, q1) = pair[1];
        if !(s1 > s0) {
            return Err(Error::Input(format!(
                "polyline abscissae must be strictly increasing, got {s0} then {s1} at segment {k}"
            )));
        }
        total += ((s1 - s0).powi(2) + (q1 - q0).powi(2)).sqrt();
    }
    Ok(total)
}

/// Result of Romberg integration. When the diagonal failed to settle within
/// `max_levels`, `converged` is false and the caller decides what to do.
#[derive(Debug, Clone, Copy)]
pub struct RombergResult {
    pub value: f64,
    pub converged: bool,
    pub levels: usize,
}

/// Romberg integration of `f` over [a, b]: Richardson extrapolation of the
/// trapezoid rule, stopping when successive diagonal entries differ by less
/// than `tol`.
pub fn romberg(
    f: impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    tol: f64,
    max_levels: usize,
) -> Result<RombergResult> {
    if !(a < b) {
        return Err(Error::Config(format!(
            "romberg requires a < b, got [{a}, {b}]"
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::Config(format!("romberg tol must be > 0, got {tol}")));
    }
    if max_levels < 2 {
        return Err(Error::Config("romberg needs max_levels >= 2".into()));
    }
    let eval = |s: f64| -> Result<f64> {
        let v = f(s);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numerical(format!(
                "romberg integrand returned {v} at s = {s}"
            )))
        }
    };

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(max_levels);
    let mut h = b - a;
    rows.push(vec![0.5 * h * (eval(a)? + eval(b)?)]);
    for i in 1..max_levels {
        // refine the trapezoid estimate with the new midpoints
        let additions = 1usize << (i - 1);
        let mut midpoint_sum = 0.0;
        for k in 0..additions {
            midpoint_sum += eval(a + (k as f64 + 0.5) * h)?;
        }
        let t = 0.5 * (rows[i - 1][0] + h * midpoint_sum);
        let mut row = Vec::with_capacity(i + 1);
        row.push(t);
        for j in 1..=i {
            let factor = (4.0f64).powi(j as i32) - 1.0;
            let extrapolated = row[j - 1] + (row[j - 1] - rows[i - 1][j - 1]) / factor;
            row.push(extrapolated);
        }
        let prev_diag = rows[i - 1][i - 1];
        let diag = row[i];
        rows.push(row);
        if (diag - prev_diag).abs() < tol {
            return Ok(RombergResult {
                value: diag,
                converged: true,
                levels: i + 1,
            });
        }
        h *= 0.5;
    }
    Ok(RombergResult {
        value: rows[max_levels - 1][max_levels - 1],
        converged: false,
        levels: max_levels,
    })
}

/// Largest exponent argument accepted before the hazard integrand overflows.
const MAX_EXP_ARG: f64 = 700.0;

/// Cumulative hazard H(t_end) for hazard lambda0(s) * exp(linpred + alpha * G(s))
/// with G the arc length of `speed`. Builds the prefix arc-length grid and
/// applies one outer trapezoid pass over the same nodes: O(m) total.
pub fn nested_cumulative_hazard(
    lambda0: impl Fn(f64) -> f64,
    linpred: f64,
    alpha: f64,
    speed: impl Fn(f64) -> f64,
    grid: &Grid,
) -> Result<f64> {
    let speeds = sample_speed(speed, grid)?;
    let arc = prefix_trapezoid(&speeds, grid.delta());
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
        let base = lambda0(grid.node(k));
        if !(base.is_finite() && base > 0.0) {
            return Err(Error::Numerical(format!(
                "baseline hazard must be positive and finite, got {base} at s = {}",
                grid.node(k)
            )));
        }
        hazard.push(base * arg.exp());
    }
    Ok(trapezoid_from_samples(&hazard, grid.delta()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Analytic arc length of (s, s^2/2) from 0 to t:
    /// integral of sqrt(1 + s^2) = (s sqrt(1+s^2) + asinh s) / 2.
    fn arc_oracle(t: f64) -> f64 {
        (t * (1.0 + t * t).sqrt() + t.asinh()) / 2.0
    }

    #[test]
    fn flat_curve_arc_length_is_elapsed_time() {
        let grid = Grid::new(2.0, 4).unwrap();
        let v = trapezoid_arc_length(|_| 1.0, &grid).unwrap();
        assert_eq!(v, 2.0);
    }

    #[test]
    fn constant_slope_arc_length_exact() {
        // Q' = 3/4 => speed 5/4, 3-4-5 triangle
        let speed = |_s: f64| (1.0f64 + 0.75 * 0.75).sqrt();
        for m in [1, 7, 100] {
            let grid = Grid::new(4.0, m).unwrap();
            let v = trapezoid_arc_length(speed, &grid).unwrap();
            assert_abs_diff_eq!(v, 5.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn linear_slope_matches_analytic_antiderivative() {
        let grid = Grid::new(1.0, 100).unwrap();
        let v = trapezoid_arc_length(|s| (1.0 + s * s).sqrt(), &grid).unwrap();
        assert!((v - arc_oracle(1.0)).abs() <= 1e-4, "v = {v}");
    }

    #[test]
    fn trapezoid_error_shrinks_four_fold_per_doubling() {
        let speed = |s: f64| (1.0 + s * s).sqrt();
        let exact = arc_oracle(1.0);
        let err = |m: usize| {
            (trapezoid_arc_length(speed, &Grid::new(1.0, m).unwrap()).unwrap() - exact).abs()
        };
        let r1 = err(50) / err(100);
        let r2 = err(100) / err(200);
        assert!((3.5..=4.5).contains(&r1), "ratio {r1}");
        assert!((3.5..=4.5).contains(&r2), "ratio {r2}");
    }

    #[test]
    fn non_finite_speed_carries_node() {
        let grid = Grid::new(1.0, 4).unwrap();
        let err = trapezoid_arc_length(|s| if s >= 0.5 { f64::NAN } else { 1.0 }, &grid)
            .unwrap_err();
        assert!(err.to_string().contains("0.5"), "message: {err}");
    }

    #[test]
    fn polyline_flat_and_pythagorean() {
        assert_eq!(
            polyline_length(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]).unwrap(),
            2.0
        );
        assert_eq!(polyline_length(&[(0.0, 0.0), (3.0, 4.0)]).unwrap(), 5.0);
    }

    #[test]
    fn polyline_rejects_bad_input() {
        assert!(polyline_length(&[(0.0, 0.0)]).is_err());
        assert!(polyline_length(&[(0.0, 0.0), (0.0, 1.0)]).is_err());
        assert!(polyline_length(&[(0.0, 0.0), (1.0, 1.0), (0.5, 2.0)]).is_err());
    }

    #[test]
    fn polyline_converges_to_arc_length() {
        let n = 1000;
        let points: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let s = i as f64 / (n - 1) as f64;
                (s, s * s / 2.0)
            })
            .collect();
        let v = polyline_length(&points).unwrap();
        assert!((v - arc_oracle(1.0)).abs() <= 1e-5, "v = {v}");
    }

    #[test]
    fn romberg_constant() {
        let r = romberg(|_| 1.0, 0.0, 1.0, 1e-10, 20).unwrap();
        assert!(r.converged);
        assert_abs_diff_eq!(r.value, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn romberg_arc_length_oracle() {
        let r = romberg(|s| (1.0 + s * s).sqrt(), 0.0, 1.0, 1e-10, 20).unwrap();
        assert!(r.converged);
        assert!((r.value - arc_oracle(1.0)).abs() <= 1e-10, "v = {}", r.value);
    }

    #[test]
    fn romberg_polynomial_exact_after_extrapolation() {
        let r = romberg(|s| s.powi(4), 0.0, 1.0, 1e-12, 20).unwrap();
        assert!(r.converged);
        assert!((r.value - 0.2).abs() <= 1e-12, "v = {}", r.value);
    }

    #[test]
    fn romberg_flags_non_convergence() {
        // max_levels too small for the requested tolerance
        let r = romberg(|s| (1.0 + s * s).sqrt(), 0.0, 1.0, 1e-14, 3).unwrap();
        assert!(!r.converged);
        assert_eq!(r.levels, 3);
    }

    #[test]
    fn prefix_grid_flat_curve() {
        let grid = Grid::new(1.0, 4).unwrap();
        let g = cumulative_arc_length_grid(|_| 1.0, &grid).unwrap();
        let expected = [0.0, 0.25, 0.5, 0.75, 1.0];
        for (a, b) in g.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn prefix_grid_matches_restricted_trapezoid() {
        let speed = |s: f64| (1.0 + s * s).sqrt();
        let grid = Grid::new(1.0, 64).unwrap();
        let g = cumulative_arc_length_grid(speed, &grid).unwrap();
        for k in [1usize, 7, 32, 64] {
            let sub = Grid::new(grid.node(k), k).unwrap();
            let direct = trapezoid_arc_length(speed, &sub).unwrap();
            assert!((g[k] - direct).abs() <= 1e-12, "k={k}: {} vs {direct}", g[k]);
        }
    }

    #[test]
    fn prefix_grid_last_entry_analytic() {
        let grid = Grid::new(1.0, 1000).unwrap();
        let g = cumulative_arc_length_grid(|s| (1.0 + s * s).sqrt(), &grid).unwrap();
        assert!((g[1000] - arc_oracle(1.0)).abs() <= 1e-6);
        // monotone and bounded below by elapsed time
        for k in 1..g.len() {
            assert!(g[k] >= g[k - 1]);
            assert!(g[k] >= grid.node(k) - 1e-12);
        }
    }

    #[test]
    fn nested_hazard_exponential_baseline() {
        let grid = Grid::new(50.0, 100).unwrap();
        let h = nested_cumulative_hazard(|_| 0.02, 0.0, 0.0, |_| 1.0, &grid).unwrap();
        assert_abs_diff_eq!(h, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn nested_hazard_matches_constant_slope_closed_form() {
        // Q' = b1 constant: H(t) = lambda e^lp (exp(alpha c t) - 1) / (alpha c)
        let (lambda, lp, alpha, b1, t) = (0.02f64, 0.3f64, 0.25f64, 0.75f64, 8.0f64);
        let c = (1.0f64 + b1 * b1).sqrt();
        let closed = lambda * lp.exp() * ((alpha * c * t).exp() - 1.0) / (alpha * c);
        let grid = Grid::new(t, 2000).unwrap();
        let h = nested_cumulative_hazard(|_| lambda, lp, alpha, |_| c, &grid).unwrap();
        assert!((h - closed).abs() <= 1e-6, "h = {h}, closed = {closed}");
    }

    #[test]
    fn nested_hazard_prefix_equals_quadratic_brute_force() {
        // brute force: recompute the inner trapezoid per outer node, O(m^2)
        let speed = |s: f64| (1.0 + (0.4 * s).powi(2)).sqrt();
        let (lambda, lp, alpha) = (0.05, 0.2, 0.3);
        let grid = Grid::new(5.0, 50).unwrap();
        let fast = nested_cumulative_hazard(|_| lambda, lp, alpha, speed, &grid).unwrap();

        let delta = grid.delta();
        let mut outer = Vec::new();
        for k in 0..=grid.subintervals() {
            let inner = if k == 0 {
                0.0
            } else {
                let sub = Grid::new(grid.node(k), k).unwrap();
                trapezoid_arc_length(speed, &sub).unwrap()
            };
            outer.push(lambda * (lp + alpha * inner).exp());
        }
        let slow = trapezoid_from_samples(&outer, delta);
        assert!((fast - slow).abs() <= 1e-10, "fast {fast} vs slow {slow}");
    }

    #[test]
    fn nested_hazard_monotone_in_horizon() {
        let speed = |s: f64| (1.0 + s * s).sqrt();
        let mut prev = 0.0;
        for t in [1.0, 2.0, 3.0, 5.0, 8.0] {
            let grid = Grid::new(t, 200).unwrap();
            let h = nested_cumulative_hazard(|_| 0.02, 0.0, 0.25, speed, &grid).unwrap();
            assert!(h > prev);
            prev = h;
        }
    }

    #[test]
    fn nested_hazard_overflow_names_alpha_g() {
        let grid = Grid::new(100.0, 50).unwrap();
        let err = nested_cumulative_hazard(|_| 1.0, 0.0, 10.0, |_| 2.0, &grid).unwrap_err();
        assert!(err.to_string().contains("alpha * G"), "message: {err}");
    }
}

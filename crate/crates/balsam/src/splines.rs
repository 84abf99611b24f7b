//! Clamped B-spline basis functions and their first derivatives.
//!
//! The basis follows the order = degree + 1 convention, so an order-3
//! configuration with one inner knot yields K = 4 quadratic basis
//! functions. Knots are clamped: each boundary is repeated `order` times.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Validated configuration for a clamped B-spline basis on a bounded window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSplineConfig", into = "RawSplineConfig")]
pub struct SplineConfig {
    order: usize,
    inner_knots: Vec<f64>,
    boundary: (f64, f64),
    knots: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSplineConfig {
    order: usize,
    inner_knots: Vec<f64>,
    boundary: (f64, f64),
}

impl TryFrom<RawSplineConfig> for SplineConfig {
    type Error = Error;
    fn try_from(raw: RawSplineConfig) -> Result<Self> {
        SplineConfig::new(raw.order, raw.inner_knots, raw.boundary)
    }
}

impl From<SplineConfig> for RawSplineConfig {
    fn from(cfg: SplineConfig) -> Self {
        RawSplineConfig {
            order: cfg.order,
            inner_knots: cfg.inner_knots,
            boundary: cfg.boundary,
        }
    }
}

impl SplineConfig {
    /// Builds a validated configuration and its clamped knot vector.
    pub fn new(order: usize, inner_knots: Vec<f64>, boundary: (f64, f64)) -> Result<Self> {
        if order < 2 {
            return Err(Error::Config(format!(
                "spline order must be >= 2, got {order}"
            )));
        }
        let (start, end) = boundary;
        if !(start.is_finite() && end.is_finite() && start < end) {
            return Err(Error::Config(format!(
                "spline boundary must satisfy start < end, got ({start}, {end})"
            )));
        }
        for pair in inner_knots.windows(2) {
            if !(pair[0] < pair[1]) {
                return Err(Error::Config(format!(
                    "inner knots must be strictly increasing, got {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        if let (Some(&first), Some(&last)) = (inner_knots.first(), inner_knots.last()) {
            if !(first > start && last < end) {
                return Err(Error::Config(format!(
                    "inner knots must lie strictly inside ({start}, {end})"
                )));
            }
        }

        let k = inner_knots.len() + order;
        let mut knots = Vec::with_capacity(k + order);
        knots.extend(std::iter::repeat_n(start, order));
        knots.extend_from_slice(&inner_knots);
        knots.extend(std::iter::repeat_n(end, order));

        Ok(SplineConfig {
            order,
            inner_knots,
            boundary,
            knots,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn boundary(&self) -> (f64, f64) {
        self.boundary
    }

    /// Number of basis functions, K = #inner knots + order.
    pub fn basis_count(&self) -> usize {
        self.inner_knots.len() + self.order
    }

    /// Clamped knot vector of length K + order.
    pub fn knot_vector(&self) -> &[f64] {
        &self.knots
    }

    fn check_domain(&self, s: f64) -> Result<()> {
        let (lo, hi) = self.boundary;
        if !s.is_finite() || s < lo || s > hi {
            return Err(Error::Domain {
                what: "spline evaluation point",
                value: s,
                lo,
                hi,
            });
        }
        Ok(())
    }

    /// Index j of the knot span containing s, with right-continuity at
    /// interior knots; s == boundary end maps to the last non-empty span.
    fn span(&self, s: f64) -> usize {
        let p = self.order - 1;
        let last = self.basis_count() - 1; // last non-empty span start
        if s >= self.boundary.1 {
            return last;
        }
        let mut j = p;
        while j < last && s >= self.knots[j + 1] {
            j += 1;
        }
        j
    }

    /// Nonzero basis values on the span of s (standard de Boor triangle).
    /// Returns (span, values) with `values.len() == order`; the nonzero
    /// basis indices are `span - order + 1 ..= span`.
    fn nonzero_basis(&self, s: f64, order: usize) -> (usize, Vec<f64>) {
        let j = self.span(s);
        let mut vals = vec![0.0; order];
        vals[0] = 1.0;
        let mut left = vec![0.0; order];
        let mut right = vec![0.0; order];
        for d in 1..order {
            left[d] = s - self.knots[j + 1 - d];
            right[d] = self.knots[j + d] - s;
            let mut saved = 0.0;
            for r in 0..d {
                let denom = right[r + 1] + left[d - r];
                let temp = vals[r] / denom;
                vals[r] = saved + right[r + 1] * temp;
                saved = left[d - r] * temp;
            }
            vals[d] = saved;
        }
        (j, vals)
    }

    /// Evaluates all K basis functions at s. Values lie in [0, 1] and sum
    /// to 1 (partition of unity).
    pub fn eval_basis(&self, s: f64) -> Result<Vec<f64>> {
        self.check_domain(s)?;
        let (j, vals) = self.nonzero_basis(s, self.order);
        let mut out = vec![0.0; self.basis_count()];
        let first = j + 1 - self.order;
        out[first..=j].copy_from_slice(&vals);
        Ok(out)
    }

    /// Evaluates all K first derivatives at s; components sum to 0.
    pub fn eval_basis_derivative(&self, s: f64) -> Result<Vec<f64>> {
        self.check_domain(s)?;
        let p = self.order - 1; // polynomial degree
        let k = self.basis_count();
        let mut out = vec![0.0; k];
        if p == 0 {
            return Ok(out);
        }
        // B'_{i,p}(s) = p [ B_{i,p-1}/(t_{i+p} - t_i) - B_{i+1,p-1}/(t_{i+p+1} - t_{i+1}) ]
        // with zero-width spans contributing zero.
        let (j, lower) = self.nonzero_basis(s, self.order - 1);
        let lower_first = j + 2 - self.order; // first nonzero index of the degree p-1 basis
        let lower_at = |i: usize| -> f64 {
            if i >= lower_first && i < lower_first + self.order - 1 {
                lower[i - lower_first]
            } else {
                0.0
            }
        };
        for i in (j + 1 - self.order)..=j {
            let d1 = self.knots[i + p] - self.knots[i];
            let d2 = self.knots[i + p + 1] - self.knots[i + 1];
            let a = if d1 > 0.0 { lower_at(i) / d1 } else { 0.0 };
            let b = if d2 > 0.0 { lower_at(i + 1) / d2 } else { 0.0 };
            out[i] = p as f64 * (a - b);
        }
        Ok(out)
    }
}

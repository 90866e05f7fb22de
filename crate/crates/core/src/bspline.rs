//! Uniform cubic B-splines: closed periodic radius-vs-angle curves for vessel
//! cross-sections and clamped open curves for branch centerlines.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SplineError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("rank-deficient fit (condition estimate {condition:.3e}); samples do not cover every basis span")]
    RankDeficient { condition: f64 },
    #[error("control count must be at least {min}, got {got}")]
    BadControlCount { min: usize, got: usize },
}

/// Uniform cubic weights on one span, local parameter `t ∈ [0,1)`, for the
/// four controls `i-1, i, i+1, i+2`.
#[inline]
fn cubic_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let s = 1.0 - t;
    [
        s * s * s / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

#[inline]
fn cubic_weights_d1(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let s = 1.0 - t;
    [
        -0.5 * s * s,
        (9.0 * t2 - 12.0 * t) / 6.0,
        (-9.0 * t2 + 6.0 * t + 3.0) / 6.0,
        0.5 * t2,
    ]
}

#[inline]
fn cubic_weights_d2(t: f64) -> [f64; 4] {
    [1.0 - t, 3.0 * t - 2.0, -3.0 * t + 1.0, t]
}

/// Closed uniform cubic B-spline `r(θ)` on `[0, 2π)`. Control `k` sits at
/// angle `2πk/P`.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicSpline {
    control_values: Vec<f64>,
}

/// Result of [`PeriodicSpline::fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicFit {
    pub spline: PeriodicSpline,
    pub rms_residual: f64,
}

impl PeriodicSpline {
    pub fn new(control_values: Vec<f64>) -> Result<Self, SplineError> {
        if control_values.len() < 4 {
            return Err(SplineError::BadControlCount {
                min: 4,
                got: control_values.len(),
            });
        }
        Ok(Self { control_values })
    }

    pub fn constant(value: f64, count: usize) -> Self {
        Self {
            control_values: vec![value; count.max(4)],
        }
    }

    pub fn control_values(&self) -> &[f64] {
        &self.control_values
    }

    pub fn len(&self) -> usize {
        self.control_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.control_values.is_empty()
    }

    /// Span index, local parameter, and the four control indices.
    fn locate(&self, theta: f64) -> (f64, [usize; 4]) {
        let p = self.control_values.len();
        let u = theta.rem_euclid(TAU) / TAU * p as f64;
        let mut i = u.floor() as usize;
        let mut t = u - i as f64;
        if i >= p {
            // rem_euclid can round up to exactly TAU
            i = 0;
            t = 0.0;
        }
        let idx = [(i + p - 1) % p, i, (i + 1) % p, (i + 2) % p];
        (t, idx)
    }

    /// Basis weights at `theta` for each control (P-vector, sums to 1).
    pub fn basis(&self, theta: f64) -> Vec<f64> {
        let (t, idx) = self.locate(theta);
        let mut out = vec![0.0; self.control_values.len()];
        for (w, k) in cubic_weights(t).into_iter().zip(idx) {
            out[k] += w;
        }
        out
    }

    pub fn eval(&self, theta: f64) -> f64 {
        let (t, idx) = self.locate(theta);
        cubic_weights(t)
            .iter()
            .zip(idx)
            .map(|(w, k)| w * self.control_values[k])
            .sum()
    }

    /// `d^order r / dθ^order` for order 0..=2.
    pub fn eval_derivative(&self, theta: f64, order: usize) -> f64 {
        let (t, idx) = self.locate(theta);
        let du = self.control_values.len() as f64 / TAU;
        let (w, scale) = match order {
            0 => (cubic_weights(t), 1.0),
            1 => (cubic_weights_d1(t), du),
            2 => (cubic_weights_d2(t), du * du),
            _ => return 0.0,
        };
        scale
            * w.iter()
                .zip(idx)
                .map(|(w, k)| w * self.control_values[k])
                .sum::<f64>()
    }

    /// Enclosed area `½∮ r(θ)² dθ` by the midpoint rule.
    pub fn area(&self) -> f64 {
        const N: usize = 256;
        let h = TAU / N as f64;
        0.5 * h
            * (0..N)
                .map(|i| {
                    let r = self.eval((i as f64 + 0.5) * h);
                    r * r
                })
                .sum::<f64>()
    }

    pub fn mean_radius(&self) -> f64 {
        // Each uniform periodic basis function integrates to 1/P of the period.
        self.control_values.iter().sum::<f64>() / self.control_values.len() as f64
    }

    /// Linear least-squares fit of `control_count` controls to `(θ, r)`
    /// samples.
    pub fn fit(samples: &[(f64, f64)], control_count: usize) -> Result<PeriodicFit, SplineError> {
        if control_count < 4 {
            return Err(SplineError::BadControlCount {
                min: 4,
                got: control_count,
            });
        }
        if samples.len() < control_count {
            return Err(SplineError::TooFewSamples {
                needed: control_count,
                got: samples.len(),
            });
        }
        let proto = Self::constant(0.0, control_count);
        let a = DMatrix::from_fn(samples.len(), control_count, |r, c| {
            // rows are rebuilt per sample; cheap at these sizes
            proto.basis(samples[r].0)[c]
        });
        let b = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.1));
        let x = solve_least_squares(a.clone(), &b)?;
        let spline = Self {
            control_values: x.iter().copied().collect(),
        };
        let resid = &a * &x - &b;
        let rms_residual = (resid.norm_squared() / samples.len() as f64).sqrt();
        Ok(PeriodicFit {
            spline,
            rms_residual,
        })
    }

    /// Same curve with its angular origin moved: `r'(θ) = r(θ + shift)`,
    /// refit at the same control count.
    pub fn rotated(&self, shift: f64) -> Self {
        let p = self.control_values.len();
        let samples: Vec<(f64, f64)> = (0..8 * p)
            .map(|i| {
                let th = TAU * i as f64 / (8 * p) as f64;
                (th, self.eval(th + shift))
            })
            .collect();
        Self::fit(&samples, p)
            .expect("dense uniform samples")
            .spline
    }
}

fn solve_least_squares(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, SplineError> {
    let svd = a.svd(true, true);
    let s = &svd.singular_values;
    let smax = s.iter().copied().fold(0.0, f64::max);
    let smin = s.iter().copied().fold(f64::INFINITY, f64::min);
    let condition = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    if condition.is_nan() || condition >= 1e10 {
        return Err(SplineError::RankDeficient { condition });
    }
    svd.solve(b, 0.0)
        .map_err(|_| SplineError::RankDeficient { condition })
}

/// Clamped B-spline through 3-D control points on `t ∈ [0,1]`, uniform
/// interior knots. Degree is 3, reduced to `Q−1` when fewer than four
/// controls are available.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenSpline {
    control_points: Vec<Vector3<f64>>,
    degree: usize,
    knots: Vec<f64>,
}

impl OpenSpline {
    pub fn new(control_points: Vec<Vector3<f64>>) -> Result<Self, SplineError> {
        let q = control_points.len();
        if q < 2 {
            return Err(SplineError::BadControlCount { min: 2, got: q });
        }
        let degree = 3.min(q - 1);
        Ok(Self {
            knots: clamped_knots(q, degree),
            control_points,
            degree,
        })
    }

    pub fn control_points(&self) -> &[Vector3<f64>] {
        &self.control_points
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    fn span(&self, t: f64) -> usize {
        let n = self.control_points.len() - 1;
        let p = self.degree;
        if t >= self.knots[n + 1] {
            return n;
        }
        if t <= self.knots[p] {
            return p;
        }
        // knots are sorted; find last index with knots[i] <= t
        let mut lo = p;
        let mut hi = n + 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if t < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Nonzero basis functions and their first derivatives at `t`.
    fn basis_with_derivative(&self, t: f64) -> (usize, Vec<f64>, Vec<f64>) {
        let span = self.span(t);
        let p = self.degree;
        let u = &self.knots;
        // ndu holds basis values of increasing degree (triangular table)
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = t - u[span + 1 - j];
            right[j] = u[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        let values: Vec<f64> = (0..=p).map(|j| ndu[j][p]).collect();
        let mut derivs = vec![0.0; p + 1];
        if p >= 1 {
            // N'_{i,p} = p (N_{i,p-1}/(u_{i+p}-u_i) - N_{i+1,p-1}/(u_{i+p+1}-u_{i+1}))
            let lower: Vec<f64> = (0..p).map(|j| ndu[j][p - 1]).collect();
            for (r, d) in derivs.iter_mut().enumerate() {
                let i = span - p + r;
                let mut acc = 0.0;
                if r >= 1 {
                    let den = u[i + p] - u[i];
                    if den > 0.0 {
                        acc += lower[r - 1] / den;
                    }
                }
                if r < p {
                    let den = u[i + p + 1] - u[i + 1];
                    if den > 0.0 {
                        acc -= lower[r] / den;
                    }
                }
                *d = p as f64 * acc;
            }
        }
        (span, values, derivs)
    }

    /// Full basis row of length Q at `t`.
    pub fn basis(&self, t: f64) -> Vec<f64> {
        let (span, values, _) = self.basis_with_derivative(t.clamp(0.0, 1.0));
        let mut row = vec![0.0; self.control_points.len()];
        for (r, v) in values.into_iter().enumerate() {
            row[span - self.degree + r] = v;
        }
        row
    }

    pub fn point(&self, t: f64) -> Vector3<f64> {
        let (span, values, _) = self.basis_with_derivative(t.clamp(0.0, 1.0));
        let base = span - self.degree;
        values
            .iter()
            .enumerate()
            .fold(Vector3::zeros(), |acc, (r, &w)| {
                acc + self.control_points[base + r] * w
            })
    }

    /// First derivative `c′(t)`.
    pub fn derivative(&self, t: f64) -> Vector3<f64> {
        let (span, _, derivs) = self.basis_with_derivative(t.clamp(0.0, 1.0));
        let base = span - self.degree;
        derivs
            .iter()
            .enumerate()
            .fold(Vector3::zeros(), |acc, (r, &w)| {
                acc + self.control_points[base + r] * w
            })
    }

    /// Clamped least-squares fit with chord-length parameters. The first and
    /// last controls are pinned to the first and last points, so the curve
    /// interpolates both ends exactly.
    pub fn fit(points: &[Vector3<f64>], control_count: usize) -> Result<OpenFit, SplineError> {
        if control_count < 2 {
            return Err(SplineError::BadControlCount {
                min: 2,
                got: control_count,
            });
        }
        if points.len() < control_count {
            return Err(SplineError::TooFewSamples {
                needed: control_count,
                got: points.len(),
            });
        }
        let params = chord_length_params(points);
        let first = points[0];
        let last = *points.last().expect("non-empty");
        let mut spline = Self::new(vec![Vector3::zeros(); control_count])?;
        spline.control_points[0] = first;
        spline.control_points[control_count - 1] = last;
        let free = control_count - 2;
        if free > 0 {
            let rows: Vec<Vec<f64>> = params.iter().map(|&t| spline.basis(t)).collect();
            let a = DMatrix::from_fn(points.len(), free, |r, c| rows[r][c + 1]);
            for axis in 0..3 {
                let b = DVector::from_fn(points.len(), |r, _| {
                    let row = &rows[r];
                    points[r][axis] - row[0] * first[axis] - row[control_count - 1] * last[axis]
                });
                let x = solve_least_squares(a.clone(), &b)?;
                for c in 0..free {
                    spline.control_points[c + 1][axis] = x[c];
                }
            }
        }
        let max_error = params
            .iter()
            .zip(points)
            .map(|(&t, p)| (spline.point(t) - p).norm())
            .fold(0.0, f64::max);
        Ok(OpenFit {
            spline,
            params,
            max_error,
        })
    }

    /// Arc length between `t0` and `t1` by adaptive Gauss–Legendre
    /// quadrature of `‖c′(t)‖`, relative tolerance 1e-8. Knot spans are
    /// integrated separately because `c′` is only piecewise smooth.
    pub fn arc_length(&self, t0: f64, t1: f64) -> f64 {
        let (a, b) = (t0.clamp(0.0, 1.0), t1.clamp(0.0, 1.0));
        if b <= a {
            return 0.0;
        }
        let mut breaks = vec![a];
        for &k in &self.knots {
            if k > a && k < b && breaks.last().is_some_and(|&l| k > l) {
                breaks.push(k);
            }
        }
        breaks.push(b);
        let speed = |t: f64| self.derivative(t).norm();
        breaks
            .windows(2)
            .map(|w| {
                adaptive_gl(
                    &speed,
                    w[0],
                    w[1],
                    gauss_legendre5(&speed, w[0], w[1]),
                    1e-8,
                    30,
                )
            })
            .sum()
    }

    /// Arc length with a fixed number of Gauss–Legendre panels.
    pub fn arc_length_fixed(&self, t0: f64, t1: f64, panels: usize) -> f64 {
        let speed = |t: f64| self.derivative(t).norm();
        let h = (t1 - t0) / panels as f64;
        (0..panels)
            .map(|i| gauss_legendre5(&speed, t0 + i as f64 * h, t0 + (i + 1) as f64 * h))
            .sum()
    }
}

/// Result of [`OpenSpline::fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct OpenFit {
    pub spline: OpenSpline,
    /// Chord-length parameter of each input point.
    pub params: Vec<f64>,
    pub max_error: f64,
}

fn clamped_knots(q: usize, p: usize) -> Vec<f64> {
    let interior = q - p - 1;
    let mut k = vec![0.0; p + 1];
    for i in 1..=interior {
        k.push(i as f64 / (interior + 1) as f64);
    }
    k.extend(std::iter::repeat_n(1.0, p + 1));
    k
}

/// Normalized cumulative chord length. Coincident points share a parameter;
/// a fully degenerate polyline falls back to uniform spacing.
pub fn chord_length_params(points: &[Vector3<f64>]) -> Vec<f64> {
    let mut acc = Vec::with_capacity(points.len());
    let mut total = 0.0;
    acc.push(0.0);
    for w in points.windows(2) {
        total += (w[1] - w[0]).norm();
        acc.push(total);
    }
    if total <= 0.0 {
        let n = (points.len().max(2) - 1) as f64;
        return (0..points.len()).map(|i| i as f64 / n).collect();
    }
    acc.iter().map(|d| d / total).collect()
}

const GL5_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL5_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

fn gauss_legendre5(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    half * GL5_NODES
        .iter()
        .zip(GL5_WEIGHTS)
        .map(|(x, w)| w * f(mid + half * x))
        .sum::<f64>()
}

fn adaptive_gl(f: &impl Fn(f64) -> f64, a: f64, b: f64, whole: f64, rtol: f64, depth: u32) -> f64 {
    let mid = 0.5 * (a + b);
    let left = gauss_legendre5(f, a, mid);
    let right = gauss_legendre5(f, mid, b);
    let refined = left + right;
    if depth == 0 || (refined - whole).abs() <= rtol * refined.abs().max(1e-300) {
        return refined;
    }
    adaptive_gl(f, a, mid, left, rtol, depth - 1) + adaptive_gl(f, mid, b, right, rtol, depth - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Textbook de Boor evaluation on the explicit periodic knot vector,
    /// independent of the closed-form uniform weights.
    fn de_boor_periodic(controls: &[f64], theta: f64) -> f64 {
        // Integer knots t_j = j; basis N_j lives on [j, j+4) and peaks at
        // j+2, so it carries control (j+2) mod n.
        let n = controls.len() as i64;
        let u = theta.rem_euclid(TAU) / TAU * n as f64;
        let s = u.floor() as i64;
        let mut d: Vec<f64> = (s - 3..=s)
            .map(|j| controls[(j + 2).rem_euclid(n) as usize])
            .collect();
        for r in 1..=3usize {
            for idx in (r..=3).rev() {
                let j = s - 3 + idx as i64;
                let a = (u - j as f64) / (4 - r) as f64;
                d[idx] = (1.0 - a) * d[idx - 1] + a * d[idx];
            }
        }
        d[3]
    }

    #[test]
    fn constant_controls_give_constant_radius() {
        let s = PeriodicSpline::constant(2.5, 16);
        for i in 0..100 {
            assert!((s.eval(i as f64 * 0.173) - 2.5).abs() < 1e-14);
        }
    }

    #[test]
    fn periodic_in_theta() {
        let s = PeriodicSpline::new((0..8).map(|i| 1.0 + (i as f64).sin()).collect()).unwrap();
        for th in [0.0, 0.3, 1.9, 4.4, 6.2] {
            assert!((s.eval(th) - s.eval(th + TAU)).abs() < 1e-12);
            assert!((s.eval(th) - s.eval(th - 3.0 * TAU)).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_de_boor_oracle() {
        let mut rng = crate::rng::seeded(42);
        let c: Vec<f64> = (0..8).map(|_| rng.random_range(0.5..2.0)).collect();
        let s = PeriodicSpline::new(c.clone()).unwrap();
        for th in [1.234, 0.0, 0.01, 3.3, 6.2] {
            let (a, b) = (s.eval(th), de_boor_periodic(&c, th));
            assert!((a - b).abs() < 1e-12, "θ={th}: {a} vs {b}");
        }
    }

    #[test]
    fn seam_is_c2() {
        let s = PeriodicSpline::new(vec![1.0, 2.0, 0.5, 1.5, 1.2, 0.8, 1.9, 1.1]).unwrap();
        let eps = 1e-12;
        for order in 0..=2 {
            let a = s.eval_derivative(0.0, order);
            let b = s.eval_derivative(TAU - eps, order);
            assert!((a - b).abs() < 1e-9, "order {order}: {a} vs {b}");
        }
    }

    #[test]
    fn fit_constant_radius() {
        let samples: Vec<(f64, f64)> = (0..64).map(|i| (TAU * i as f64 / 64.0, 1.0)).collect();
        let fit = PeriodicSpline::fit(&samples, 16).unwrap();
        assert!(fit.rms_residual < 1e-10);
        for c in fit.spline.control_values() {
            assert!((c - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn fit_circle_radius_two() {
        let samples: Vec<(f64, f64)> = (0..64).map(|i| (TAU * i as f64 / 64.0, 2.0)).collect();
        let fit = PeriodicSpline::fit(&samples, 16).unwrap();
        for i in 0..1000 {
            let th = TAU * i as f64 / 1000.0;
            assert!((fit.spline.eval(th) - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn fit_ellipse_residual() {
        let (a, b) = (2.0f64, 1.0f64);
        let samples: Vec<(f64, f64)> = (0..64)
            .map(|i| {
                let th = TAU * i as f64 / 64.0;
                let r = a * b / (b * b * th.cos().powi(2) + a * a * th.sin().powi(2)).sqrt();
                (th, r)
            })
            .collect();
        let fit = PeriodicSpline::fit(&samples, 16).unwrap();
        // Optimal residual from normal equations over the de Boor basis.
        let p = 16;
        let rows: Vec<Vec<f64>> = samples
            .iter()
            .map(|&(th, _)| {
                (0..p)
                    .map(|k| {
                        let mut e = vec![0.0; p];
                        e[k] = 1.0;
                        de_boor_periodic(&e, th)
                    })
                    .collect()
            })
            .collect();
        let ata = DMatrix::<f64>::from_fn(p, p, |i, j| rows.iter().map(|r| r[i] * r[j]).sum());
        let atb = DVector::<f64>::from_fn(p, |i, _| {
            rows.iter().zip(&samples).map(|(r, s)| r[i] * s.1).sum()
        });
        let x = ata.cholesky().unwrap().solve(&atb);
        let oracle_rms = (rows
            .iter()
            .zip(&samples)
            .map(|(r, s)| {
                let v: f64 = r
                    .iter()
                    .zip(x.iter())
                    .map(|(a, b): (&f64, &f64)| a * b)
                    .sum();
                (v - s.1).powi(2)
            })
            .sum::<f64>()
            / samples.len() as f64)
            .sqrt();
        assert!((fit.rms_residual - oracle_rms).abs() < 1e-9);
        assert!(fit.rms_residual < 1.07e-3, "rms {}", fit.rms_residual);
    }

    #[test]
    fn clustered_angles_are_rank_deficient() {
        let samples: Vec<(f64, f64)> = (0..40).map(|i| (0.01 * i as f64 / 40.0, 1.0)).collect();
        assert!(matches!(
            PeriodicSpline::fit(&samples, 16),
            Err(SplineError::RankDeficient { .. })
        ));
    }

    #[test]
    fn fit_is_idempotent() {
        let mut rng = crate::rng::seeded(5);
        let c: Vec<f64> = (0..16).map(|_| rng.random_range(0.2..1.0)).collect();
        let s = PeriodicSpline::new(c).unwrap();
        let samples: Vec<(f64, f64)> = (0..80)
            .map(|i| {
                let th = TAU * (i as f64 + 0.37) / 80.0;
                (th, s.eval(th))
            })
            .collect();
        let refit = PeriodicSpline::fit(&samples, 16).unwrap().spline;
        for i in 0..500 {
            let th = TAU * i as f64 / 500.0;
            assert!((refit.eval(th) - s.eval(th)).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn periodic_partition_of_unity(th in -20.0f64..20.0) {
            let s = PeriodicSpline::constant(0.0, 16);
            let sum: f64 = s.basis(th).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn periodic_convex_hull(c in proptest::collection::vec(0.0f64..3.0, 16), th in 0.0f64..TAU) {
            let s = PeriodicSpline::new(c.clone()).unwrap();
            let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let r = s.eval(th);
            prop_assert!(r >= lo - 1e-12 && r <= hi + 1e-12);
        }

        #[test]
        fn open_partition_of_unity(t in 0.0f64..=1.0, q in 2usize..12) {
            let s = OpenSpline::new(vec![Vector3::zeros(); q]).unwrap();
            let sum: f64 = s.basis(t).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn collinear_fit_is_the_segment() {
        let a = Vector3::new(1.0, -2.0, 0.5);
        let b = Vector3::new(4.0, 2.0, -1.0);
        let pts: Vec<Vector3<f64>> = (0..20)
            .map(|i| {
                let s = (i as f64 / 19.0).powf(1.3);
                a + (b - a) * s
            })
            .collect();
        let fit = OpenSpline::fit(&pts, 6).unwrap();
        let dir = (b - a).normalize();
        for i in 0..=200 {
            let p = fit.spline.point(i as f64 / 200.0) - a;
            let off = (p - dir * p.dot(&dir)).norm();
            assert!(off < 1e-9, "{off}");
        }
        assert_eq!(fit.spline.point(0.0), a);
        assert_eq!(fit.spline.point(1.0), b);
    }

    fn helix(n: usize, turns: f64) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|i| {
                let th = TAU * turns * i as f64 / (n - 1) as f64;
                Vector3::new(th.cos(), th.sin(), 0.5 * th / TAU)
            })
            .collect()
    }

    #[test]
    fn helix_fit_error() {
        let pts = helix(50, 1.0);
        let fit = OpenSpline::fit(&pts, 12).unwrap();
        assert!(fit.max_error < 5e-3, "{}", fit.max_error);
        assert_eq!(fit.spline.point(0.0), pts[0]);
        assert_eq!(fit.spline.point(1.0), pts[49]);
    }

    #[test]
    fn too_few_points_is_arity_error() {
        let pts = helix(5, 1.0);
        assert_eq!(
            OpenSpline::fit(&pts, 6).unwrap_err(),
            SplineError::TooFewSamples { needed: 6, got: 5 }
        );
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let fit = OpenSpline::fit(&helix(40, 1.5), 10).unwrap().spline;
        for t in [0.0f64, 0.13, 0.5, 0.77, 1.0] {
            let h = 1e-6;
            let (lo, hi) = ((t - h).max(0.0), (t + h).min(1.0));
            let fd = (fit.point(hi) - fit.point(lo)) / (hi - lo);
            assert!((fd - fit.derivative(t)).norm() < 1e-5 * fd.norm().max(1.0));
        }
    }

    #[test]
    fn straight_segment_length() {
        let s = OpenSpline::fit(
            &(0..10)
                .map(|i| Vector3::new(0.0, 0.0, 5.0 * i as f64 / 9.0))
                .collect::<Vec<_>>(),
            4,
        )
        .unwrap()
        .spline;
        assert!((s.arc_length(0.0, 1.0) - 5.0).abs() < 1e-8);
    }

    #[test]
    fn quarter_circle_length() {
        let pts: Vec<Vector3<f64>> = (0..200)
            .map(|i| {
                let th = std::f64::consts::FRAC_PI_2 * i as f64 / 199.0;
                Vector3::new(th.cos(), th.sin(), 0.0)
            })
            .collect();
        let s = OpenSpline::fit(&pts, 12).unwrap().spline;
        assert!((s.arc_length(0.0, 1.0) - std::f64::consts::FRAC_PI_2).abs() < 1e-3);
    }

    #[test]
    fn arc_length_additive_and_converged() {
        let s = OpenSpline::fit(&helix(60, 2.0), 14).unwrap().spline;
        let (t0, t1, t2) = (0.1, 0.45, 0.93);
        let whole = s.arc_length(t0, t2);
        assert!((s.arc_length(t0, t1) + s.arc_length(t1, t2) - whole).abs() < 1e-8);
        let coarse = s.arc_length_fixed(0.0, 1.0, 32);
        let fine = s.arc_length_fixed(0.0, 1.0, 64);
        assert!(((coarse - fine) / fine).abs() < 1e-6);
        assert!(((s.arc_length(0.0, 1.0) - fine) / fine).abs() < 1e-8);
    }

    #[test]
    fn low_control_counts_reduce_degree() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 1.0, 0.0)];
        let s = OpenSpline::fit(&pts, 2).unwrap().spline;
        assert_eq!(s.degree(), 1);
        assert!((s.point(0.5) - Vector3::new(0.5, 0.5, 0.0)).norm() < 1e-15);
    }
}

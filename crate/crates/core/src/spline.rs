//! Natural cubic spline basis with intercept.
//!
//! Uses the truncated-power construction: with knots `xi_1 < ... < xi_d`
//! the basis is `1, x, N_3(x), ..., N_d(x)` where
//! `N_{k+2}(x) = h_k(x) - h_{d-1}(x)` and
//! `h_k(x) = ((x - xi_k)_+^3 - (x - xi_d)_+^3) / (xi_d - xi_k)`.
//! Every element is cubic between knots and linear outside `[xi_1, xi_d]`.
//! Inputs are mapped to `[0, 1]` before evaluation to keep the cubic terms
//! well scaled.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Knots for a `d`-dimensional basis: both boundaries plus `d - 2` interior
/// knots at equally spaced quantiles of the boundary interval.
pub fn knots(d: usize, boundary: (f64, f64)) -> Vec<f64> {
    let (lo, hi) = boundary;
    (0..d).map(|k| lo + (hi - lo) * k as f64 / (d - 1) as f64).collect()
}

#[derive(Debug, Clone)]
pub struct NaturalSpline {
    knots: Vec<f64>,
    lo: f64,
    width: f64,
}

impl NaturalSpline {
    pub fn new(d: usize, boundary: (f64, f64)) -> Result<Self> {
        let (lo, hi) = boundary;
        if d < 2 {
            return Err(Error::InvalidSpec(format!("spline dimension must be >= 2, got {d}")));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidSpec(format!("spline boundary must satisfy low < high, got ({lo}, {hi})")));
        }
        let width = hi - lo;
        let knots = knots(d, (0.0, 1.0));
        Ok(Self { knots, lo, width })
    }

    pub fn dim(&self) -> usize {
        self.knots.len()
    }

    /// Basis row at `x` (length `d`, first entry is the intercept).
    pub fn row(&self, x: f64) -> Vec<f64> {
        let u = (x - self.lo) / self.width;
        let d = self.knots.len();
        let last = self.knots[d - 1];
        let cube = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
        let h = |k: usize| (cube(u - self.knots[k]) - cube(u - last)) / (last - self.knots[k]);
        let mut out = Vec::with_capacity(d);
        out.push(1.0);
        out.push(u);
        if d > 2 {
            let tail = h(d - 2);
            for k in 0..d - 2 {
                out.push(h(k) - tail);
            }
        }
        out
    }
}

/// Evaluates the `d`-column natural cubic spline basis at `points`.
///
/// Fails when `d` exceeds the number of distinct points strictly inside the
/// boundary plus two, since the basis would not be identified on them.
pub fn ncs_basis(d: usize, points: &[f64], boundary: (f64, f64)) -> Result<DMatrix<f64>> {
    let spline = NaturalSpline::new(d, boundary)?;
    let mut interior: Vec<f64> = points
        .iter()
        .copied()
        .filter(|&x| x > boundary.0 && x < boundary.1)
        .collect();
    interior.sort_by(f64::total_cmp);
    interior.dedup();
    if d > interior.len() + 2 {
        return Err(Error::InvalidSpec(format!(
            "spline dimension {d} exceeds {} distinct interior points + 2",
            interior.len()
        )));
    }
    let mut m = DMatrix::zeros(points.len(), d);
    for (i, &x) in points.iter().enumerate() {
        for (j, v) in spline.row(x).into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(s: usize) -> Vec<f64> {
        (1..=s).map(|v| v as f64).collect()
    }

    /// Natural cubic interpolant by the classic tridiagonal second-derivative
    /// system (moments vanish at both ends), evaluated piecewise.
    struct NaturalInterpolant {
        x: Vec<f64>,
        y: Vec<f64>,
        m: Vec<f64>,
    }

    impl NaturalInterpolant {
        fn new(x: &[f64], y: &[f64]) -> Self {
            let n = x.len();
            let mut m = vec![0.0; n];
            if n > 2 {
                let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
                // Thomas algorithm on the interior moments
                let k = n - 2;
                let mut a = vec![0.0; k];
                let mut b = vec![0.0; k];
                let mut c = vec![0.0; k];
                let mut r = vec![0.0; k];
                for i in 0..k {
                    a[i] = h[i];
                    b[i] = 2.0 * (h[i] + h[i + 1]);
                    c[i] = h[i + 1];
                    r[i] = 6.0 * ((y[i + 2] - y[i + 1]) / h[i + 1] - (y[i + 1] - y[i]) / h[i]);
                }
                for i in 1..k {
                    let w = a[i] / b[i - 1];
                    b[i] -= w * c[i - 1];
                    r[i] -= w * r[i - 1];
                }
                let mut sol = vec![0.0; k];
                sol[k - 1] = r[k - 1] / b[k - 1];
                for i in (0..k - 1).rev() {
                    sol[i] = (r[i] - c[i] * sol[i + 1]) / b[i];
                }
                m[1..n - 1].copy_from_slice(&sol);
            }
            Self { x: x.to_vec(), y: y.to_vec(), m }
        }

        fn eval(&self, t: f64) -> f64 {
            let n = self.x.len();
            let i = (0..n - 1).find(|&i| t <= self.x[i + 1]).unwrap_or(n - 2);
            let (x0, x1) = (self.x[i], self.x[i + 1]);
            let h = x1 - x0;
            let (a, b) = ((x1 - t) / h, (t - x0) / h);
            a * self.y[i]
                + b * self.y[i + 1]
                + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
        }
    }

    fn solve_coefficients(spline: &NaturalSpline, at: &[f64], values: &[f64]) -> Vec<f64> {
        let d = spline.dim();
        let mut a = DMatrix::zeros(d, d);
        for (i, &x) in at.iter().enumerate() {
            for (j, v) in spline.row(x).into_iter().enumerate() {
                a[(i, j)] = v;
            }
        }
        let sol = a.lu().solve(&nalgebra::DVector::from_column_slice(values)).unwrap();
        sol.iter().copied().collect()
    }

    fn eval_with(spline: &NaturalSpline, coef: &[f64], x: f64) -> f64 {
        spline.row(x).iter().zip(coef).map(|(b, c)| b * c).sum()
    }

    #[test]
    fn two_dimensional_basis_is_affine() {
        let b = ncs_basis(2, &grid(6), (1.0, 6.0)).unwrap();
        assert_eq!(b.ncols(), 2);
        for i in 0..6 {
            assert_eq!(b[(i, 0)], 1.0);
            assert!((b[(i, 1)] - i as f64 / 5.0).abs() < 1e-15);
        }
    }

    #[test]
    fn second_derivative_vanishes_at_boundaries() {
        let spline = NaturalSpline::new(5, (1.0, 9.0)).unwrap();
        let h = 1e-3;
        for &x in &[1.0, 9.0] {
            let (lo, mid, hi) = (spline.row(x - h), spline.row(x), spline.row(x + h));
            for j in 0..5 {
                // one-sided differences from the inside of the interval
                let second = if x == 1.0 {
                    let far = spline.row(x + 2.0 * h)[j];
                    (mid[j] - 2.0 * hi[j] + far) / (h * h)
                } else {
                    let far = spline.row(x - 2.0 * h)[j];
                    (mid[j] - 2.0 * lo[j] + far) / (h * h)
                };
                // the difference itself carries an O(h) error term
                assert!(second.abs() < 5e-2, "basis {j} at {x}: {second}");
            }
        }
    }

    #[test]
    fn linear_beyond_boundary_knots() {
        let spline = NaturalSpline::new(4, (1.0, 8.0)).unwrap();
        for j in 0..4 {
            let f = |x: f64| spline.row(x)[j];
            let d1 = f(9.0) - f(8.5);
            let d2 = f(12.0) - f(11.5);
            assert!((d1 - d2).abs() < 1e-10);
            let d3 = f(0.0) - f(-0.5);
            let d4 = f(-3.0) - f(-3.5);
            assert!((d3 - d4).abs() < 1e-10);
        }
    }

    #[test]
    fn reproduces_natural_interpolant() {
        for d in [3usize, 4, 5, 7] {
            let spline = NaturalSpline::new(d, (1.0, 10.0)).unwrap();
            let ks = knots(d, (1.0, 10.0));
            let values: Vec<f64> = ks.iter().map(|&x| (0.7 * x).sin() + 0.1 * x * x).collect();
            let oracle = NaturalInterpolant::new(&ks, &values);
            let coef = solve_coefficients(&spline, &ks, &values);
            for i in 0..=90 {
                let x = 1.0 + i as f64 * 0.1;
                let got = eval_with(&spline, &coef, x);
                assert!((got - oracle.eval(x)).abs() < 1e-8, "d={d} x={x}");
            }
        }
    }

    #[test]
    fn rejects_too_many_dimensions() {
        assert!(ncs_basis(7, &grid(6), (1.0, 6.0)).is_err());
        assert!(ncs_basis(6, &grid(6), (1.0, 6.0)).is_ok());
        assert!(ncs_basis(1, &grid(6), (1.0, 6.0)).is_err());
        assert!(ncs_basis(3, &grid(6), (6.0, 1.0)).is_err());
    }
}

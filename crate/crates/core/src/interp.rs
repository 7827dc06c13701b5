//! Cubic spline interpolation.

use std::f64::consts::PI;

/// Natural cubic spline through `(x_i, y_i)` with increasing `x`.
#[derive(Clone, Debug)]
pub struct NaturalSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl NaturalSpline {
    pub fn new(x: &[f64], y: &[f64]) -> Self {
        assert_eq!(x.len(), y.len());
        assert!(x.len() >= 2, "spline needs at least two points");
        let n = x.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // tridiagonal system for interior second derivatives
            let mut sub = vec![0.0; n];
            let mut diag = vec![0.0; n];
            let mut sup = vec![0.0; n];
            let mut rhs = vec![0.0; n];
            for i in 1..n - 1 {
                let h0 = x[i] - x[i - 1];
                let h1 = x[i + 1] - x[i];
                sub[i] = h0;
                diag[i] = 2.0 * (h0 + h1);
                sup[i] = h1;
                rhs[i] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
            }
            for i in 2..n - 1 {
                let w = sub[i] / diag[i - 1];
                diag[i] -= w * sup[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            for i in (1..n - 1).rev() {
                let next = if i + 1 < n - 1 { m[i + 1] } else { 0.0 };
                m[i] = (rhs[i] - sup[i] * next) / diag[i];
            }
        }
        NaturalSpline { x: x.to_vec(), y: y.to_vec(), m }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        let i = match self.x.partition_point(|&v| v <= t) {
            0 => 0,
            p if p >= n => n - 2,
            p => p - 1,
        };
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - t) / h;
        let b = (t - self.x[i]) / h;
        a * self.y[i]
            + b * self.y[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }
}

/// Periodic cubic spline on a uniform grid over `[0, 2 pi)`.
#[derive(Clone, Debug)]
pub struct PeriodicSpline {
    y: Vec<f64>,
    m: Vec<f64>,
    h: f64,
}

impl PeriodicSpline {
    pub fn new(y: &[f64]) -> Self {
        let n = y.len();
        assert!(n >= 3, "periodic spline needs at least three points");
        let h = 2.0 * PI / n as f64;
        // cyclic system M_{i-1} + 4 M_i + M_{i+1} = 6/h² (y_{i+1} - 2y_i + y_{i-1})
        let rhs: Vec<f64> = (0..n)
            .map(|i| 6.0 / (h * h) * (y[(i + 1) % n] - 2.0 * y[i] + y[(i + n - 1) % n]))
            .collect();
        let m = solve_cyclic(1.0, 4.0, 1.0, &rhs);
        PeriodicSpline { y: y.to_vec(), m, h }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.y.len();
        let s = t.rem_euclid(2.0 * PI) / self.h;
        let i = (s.floor() as usize).min(n - 1);
        let b = s - i as f64;
        let a = 1.0 - b;
        let j = (i + 1) % n;
        a * self.y[i]
            + b * self.y[j]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[j]) * self.h * self.h / 6.0
    }
}

/// Solves the cyclic tridiagonal system with constant bands (Sherman-Morrison).
fn solve_cyclic(a: f64, b: f64, c: f64, rhs: &[f64]) -> Vec<f64> {
    let n = rhs.len();
    let gamma = -b;
    let mut diag = vec![b; n];
    diag[0] = b - gamma;
    diag[n - 1] = b - a * c / gamma;
    let solve = |d: &[f64], r: &[f64]| -> Vec<f64> {
        let mut cp = vec![0.0; n];
        let mut dp = vec![0.0; n];
        cp[0] = c / d[0];
        dp[0] = r[0] / d[0];
        for i in 1..n {
            let den = d[i] - a * cp[i - 1];
            cp[i] = c / den;
            dp[i] = (r[i] - a * dp[i - 1]) / den;
        }
        let mut x = vec![0.0; n];
        x[n - 1] = dp[n - 1];
        for i in (0..n - 1).rev() {
            x[i] = dp[i] - cp[i] * x[i + 1];
        }
        x
    };
    let x = solve(&diag, rhs);
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = c;
    let z = solve(&diag, &u);
    let fact = (x[0] + a * x[n - 1] / gamma) / (1.0 + z[0] + a * z[n - 1] / gamma);
    x.iter().zip(&z).map(|(xi, zi)| xi - fact * zi).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn natural_spline_reproduces_lines() {
        let x = [0.0, 0.5, 1.7, 2.0, 3.5];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        let s = NaturalSpline::new(&x, &y);
        for t in [0.1, 1.0, 2.9, 3.4] {
            assert!((s.eval(t) - (2.0 * t - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn periodic_spline_interpolates_and_wraps() {
        let n = 64;
        let y: Vec<f64> = (0..n).map(|i| (2.0 * PI * i as f64 / n as f64).sin() + 2.0).collect();
        let s = PeriodicSpline::new(&y);
        for (i, yi) in y.iter().enumerate() {
            assert!((s.eval(2.0 * PI * i as f64 / n as f64) - yi).abs() < 1e-12);
        }
        let t = 0.4321;
        assert!((s.eval(t) - s.eval(t + 2.0 * PI)).abs() < 1e-12);
        assert!((s.eval(t) - (t.sin() + 2.0)).abs() < 1e-5);
    }
}

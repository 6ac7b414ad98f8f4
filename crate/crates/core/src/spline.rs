//! Natural cubic interpolating splines on strictly increasing knots.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NaturalSpline {
    knots: Vec<f64>,
    values: Vec<f64>,
    /// Second derivatives at the knots (zero at both ends).
    second: Vec<f64>,
}

impl NaturalSpline {
    /// Panics if fewer than two knots are given or they are not increasing.
    pub fn new(knots: Vec<f64>, values: Vec<f64>) -> Self {
        let n = knots.len();
        assert!(n >= 2 && values.len() == n, "spline needs ≥ 2 matching knots");
        assert!(knots.windows(2).all(|w| w[0] < w[1]), "knots must increase");
        let mut second = vec![0.0; n];
        if n > 2 {
            // Tridiagonal system for interior second derivatives (Thomas algorithm).
            let m = n - 2;
            let mut diag = vec![0.0; m];
            let mut upper = vec![0.0; m];
            let mut rhs = vec![0.0; m];
            for i in 1..n - 1 {
                let h0 = knots[i] - knots[i - 1];
                let h1 = knots[i + 1] - knots[i];
                diag[i - 1] = 2.0 * (h0 + h1);
                upper[i - 1] = h1;
                rhs[i - 1] = 6.0 * ((values[i + 1] - values[i]) / h1 - (values[i] - values[i - 1]) / h0);
            }
            for i in 1..m {
                let lower = knots[i + 1] - knots[i];
                let w = lower / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            second[m] = rhs[m - 1] / diag[m - 1];
            for i in (0..m - 1).rev() {
                second[i + 1] = (rhs[i] - upper[i] * second[i + 2]) / diag[i];
            }
        }
        Self { knots, values, second }
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn first_knot(&self) -> f64 {
        self.knots[0]
    }

    pub fn last_knot(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    /// Evaluates inside `[first, last]`; returns `None` outside.
    pub fn eval(&self, x: f64) -> Option<f64> {
        let n = self.knots.len();
        if !(x >= self.knots[0] && x <= self.knots[n - 1]) {
            return None;
        }
        let i = match self.knots.partition_point(|k| *k <= x) {
            0 => 0,
            p if p >= n => n - 2,
            p => p - 1,
        };
        let (x0, x1) = (self.knots[i], self.knots[i + 1]);
        let h = x1 - x0;
        let a = (x1 - x) / h;
        let b = (x - x0) / h;
        Some(
            a * self.values[i]
                + b * self.values[i + 1]
                + ((a * a * a - a) * self.second[i] + (b * b * b - b) * self.second[i + 1]) * h * h / 6.0,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolates_knots_and_lines() {
        let k = vec![0.0, 1.0, 2.5, 4.0];
        let s = NaturalSpline::new(k.clone(), vec![1.0, 3.0, 6.0, 9.0]);
        for (x, y) in k.iter().zip([1.0, 3.0, 6.0, 9.0]) {
            assert!((s.eval(*x).unwrap() - y).abs() < 1e-12);
        }
        let line = NaturalSpline::new(k, vec![0.0, 2.0, 5.0, 8.0]);
        assert!((line.eval(1.7).unwrap() - 3.4).abs() < 1e-12);
        assert!(line.eval(-0.1).is_none() && line.eval(4.1).is_none());
    }

    #[test]
    fn natural_end_conditions_on_cubic_data() {
        // Symmetric bump: spline should be symmetric too.
        let k: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let v: Vec<f64> = k.iter().map(|x| 16.0 - (x - 4.0) * (x - 4.0)).collect();
        let s = NaturalSpline::new(k, v);
        for d in [0.3, 1.7, 2.2, 3.9] {
            assert!((s.eval(4.0 - d).unwrap() - s.eval(4.0 + d).unwrap()).abs() < 1e-10);
        }
    }
}

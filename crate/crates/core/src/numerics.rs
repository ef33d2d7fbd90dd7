//! Small numerical kernels shared by the solvers: tridiagonal solves, uniform
//! cubic splines, quadrature and straight-line fits.

use libm::erfc;

/// errfn(z) = (1/sqrt(pi)) * int_{-inf}^z exp(-xi^2) dxi.
pub fn errfn(z: f64) -> f64 {
    0.5 * erfc(-z)
}

/// Derivative of [`errfn`].
pub fn errfn_prime(z: f64) -> f64 {
    (-z * z).exp() / std::f64::consts::PI.sqrt()
}

/// Solves a tridiagonal system with constant sub/diag/super coefficients in
/// place. `rhs` is overwritten with the solution; `scratch` must have the
/// same length.
pub fn solve_tridiagonal_constant(lower: f64, diag: f64, upper: f64, rhs: &mut [f64], scratch: &mut [f64]) {
    let n = rhs.len();
    if n == 0 {
        return;
    }
    debug_assert_eq!(scratch.len(), n);
    let mut beta = diag;
    rhs[0] /= beta;
    for i in 1..n {
        scratch[i] = upper / beta;
        beta = diag - lower * scratch[i];
        rhs[i] = (rhs[i] - lower * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        let next = rhs[i + 1];
        rhs[i] -= scratch[i + 1] * next;
    }
}

/// General tridiagonal solve (Thomas algorithm). `a` is the sub-diagonal
/// (a[0] unused), `b` the diagonal, `c` the super-diagonal (c[n-1] unused).
pub fn solve_tridiagonal(a: &[f64], b: &[f64], c: &[f64], rhs: &mut [f64]) {
    let n = rhs.len();
    if n == 0 {
        return;
    }
    let mut cp = vec![0.0; n];
    let mut beta = b[0];
    rhs[0] /= beta;
    for i in 1..n {
        cp[i] = c[i - 1] / beta;
        beta = b[i] - a[i] * cp[i];
        rhs[i] = (rhs[i] - a[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        let next = rhs[i + 1];
        rhs[i] -= cp[i + 1] * next;
    }
}

/// Natural cubic spline on a uniform grid `x0 + i*h`.
#[derive(Debug, Clone)]
pub struct UniformSpline {
    x0: f64,
    h: f64,
    values: Vec<f64>,
    second: Vec<f64>,
}

impl UniformSpline {
    pub fn new(x0: f64, h: f64, values: Vec<f64>) -> Self {
        let n = values.len();
        assert!(n >= 2, "spline needs at least two nodes");
        let mut second = vec![0.0; n];
        if n > 2 {
            let m = n - 2;
            let mut rhs: Vec<f64> = (1..n - 1)
                .map(|i| 6.0 * (values[i + 1] - 2.0 * values[i] + values[i - 1]) / (h * h))
                .collect();
            let mut scratch = vec![0.0; m];
            solve_tridiagonal_constant(1.0, 4.0, 1.0, &mut rhs, &mut scratch);
            second[1..n - 1].copy_from_slice(&rhs);
        }
        Self { x0, h, values, second }
    }

    fn locate(&self, x: f64) -> (usize, f64) {
        let n = self.values.len();
        let s = (x - self.x0) / self.h;
        let i = (s.floor().max(0.0) as usize).min(n - 2);
        (i, s - i as f64)
    }

    /// Value at `x`; outside the node range the end values are held constant.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.values.len();
        let end = self.x0 + (n - 1) as f64 * self.h;
        if x <= self.x0 {
            return self.values[0];
        }
        if x >= end {
            return self.values[n - 1];
        }
        let (i, t) = self.locate(x);
        if t.abs() < 1e-12 {
            return self.values[i];
        }
        if (1.0 - t).abs() < 1e-12 {
            return self.values[i + 1];
        }
        let a = 1.0 - t;
        let h2 = self.h * self.h;
        a * self.values[i]
            + t * self.values[i + 1]
            + ((a * a * a - a) * self.second[i] + (t * t * t - t) * self.second[i + 1]) * h2 / 6.0
    }

    /// First derivative at `x` (zero outside the node range).
    pub fn derivative(&self, x: f64) -> f64 {
        let n = self.values.len();
        let end = self.x0 + (n - 1) as f64 * self.h;
        if x <= self.x0 || x >= end {
            return 0.0;
        }
        let (i, t) = self.locate(x);
        let a = 1.0 - t;
        (self.values[i + 1] - self.values[i]) / self.h
            + ((1.0 - 3.0 * a * a) * self.second[i] + (3.0 * t * t - 1.0) * self.second[i + 1]) * self.h / 6.0
    }
}

/// Composite trapezoid rule on uniformly spaced samples.
pub fn trapezoid(values: &[f64], h: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => h * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[n - 1])),
    }
}

/// Ordinary least-squares line `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub rms_residual: f64,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> Option<LineFit> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rms = (xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum::<f64>()
        / n as f64)
        .sqrt();
    Some(LineFit { slope, intercept, rms_residual: rms })
}

/// Slope of log|y| against log t over samples with t in `[t_lo, t_hi]` and
/// |y| above `floor`.
pub fn loglog_slope(ts: &[f64], ys: &[f64], t_lo: f64, t_hi: f64, floor: f64) -> Option<LineFit> {
    let (lx, ly): (Vec<f64>, Vec<f64>) = ts
        .iter()
        .zip(ys)
        .filter(|(t, y)| **t >= t_lo && **t <= t_hi && y.abs() > floor && t.is_finite())
        .map(|(t, y)| (t.ln(), y.abs().ln()))
        .unzip();
    fit_line(&lx, &ly)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errfn_limits_and_midpoint() {
        assert!((errfn(0.0) - 0.5).abs() < 1e-15);
        assert!(errfn(-10.0) < 1e-40);
        assert!((errfn(10.0) - 1.0).abs() < 1e-15);
        // errfn(1) = (1 + erf(1)) / 2
        let e1 = errfn(1.0);
        assert!((e1 - 0.9213503964748575).abs() < 1e-15, "{e1:.17}");
    }

    #[test]
    fn tridiagonal_matches_dense() {
        let n = 7;
        let mut rhs: Vec<f64> = (0..n).map(|i| (i as f64).sin() + 1.0).collect();
        let orig = rhs.clone();
        let mut scratch = vec![0.0; n];
        solve_tridiagonal_constant(-1.0, 3.0, -0.5, &mut rhs, &mut scratch);
        for i in 0..n {
            let mut lhs = 3.0 * rhs[i];
            if i > 0 {
                lhs += -1.0 * rhs[i - 1];
            }
            if i + 1 < n {
                lhs += -0.5 * rhs[i + 1];
            }
            assert!((lhs - orig[i]).abs() < 1e-13);
        }
        let a = vec![0.0, -1.0, -2.0, -1.0];
        let b = vec![4.0, 5.0, 6.0, 4.0];
        let c = vec![1.0, 1.0, 0.5, 0.0];
        let mut r = vec![1.0, 2.0, 3.0, 4.0];
        let r0 = r.clone();
        solve_tridiagonal(&a, &b, &c, &mut r);
        for i in 0..4 {
            let mut lhs = b[i] * r[i];
            if i > 0 {
                lhs += a[i] * r[i - 1];
            }
            if i < 3 {
                lhs += c[i] * r[i + 1];
            }
            assert!((lhs - r0[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn spline_reproduces_smooth_function() {
        let h = 0.05;
        let xs: Vec<f64> = (0..401).map(|i| -10.0 + i as f64 * h).collect();
        let vals: Vec<f64> = xs.iter().map(|x| (x / 2.0).tanh()).collect();
        let s = UniformSpline::new(-10.0, h, vals);
        for &x in &[-3.3, -0.01, 0.123, 2.7] {
            assert!((s.eval(x) - (x / 2.0).tanh()).abs() < 1e-7);
            let d = 0.5 / (x / 2.0).cosh().powi(2);
            assert!((s.derivative(x) - d).abs() < 1e-5);
        }
    }

    #[test]
    fn loglog_slope_recovers_power() {
        let ts: Vec<f64> = (1..50).map(|i| i as f64).collect();
        let ys: Vec<f64> = ts.iter().map(|t| 3.0 * t.powf(-0.75)).collect();
        let fit = loglog_slope(&ts, &ys, 1.0, 100.0, 0.0).unwrap();
        assert!((fit.slope + 0.75).abs() < 1e-12);
    }
}

//! Period map of the linearized equation, Floquet exponents and the
//! spectral-stability verdict.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flux::{liu_majda_determinant, psi1_unit, ShockCharacteristics};
use crate::numerics::trapezoid;
use crate::pde::{evolve_linearized, Boundary, Field, GridSpec};
use crate::profiles::{PeriodicCoefficientField, ShockProfile};

/// Largest number of unknowns for which a dense monodromy is assembled.
pub const DENSE_BUDGET: usize = 2400;

/// Thresholds used by [`spectral_stability_report`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralOptions {
    /// Radius of the unit-eigenvalue cluster.
    pub cluster_radius: f64,
    /// Non-cluster multipliers must satisfy |mu| < 1 - `gap`.
    pub gap: f64,
    /// Localization: |v| < `loc_tol` * sup|v| for |x| > L/2.
    pub loc_tol: f64,
    /// |Liu-Majda determinant| above this counts as nonzero.
    pub det_tol: f64,
    /// Number of leading multipliers reported.
    pub count: usize,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        Self { cluster_radius: 5e-3, gap: 1e-3, loc_tol: 1e-4, det_tol: 1e-8, count: 20 }
    }
}

/// Unknown indices of the grid (interior nodes for Dirichlet).
fn unknown_nodes(grid: &GridSpec) -> std::ops::Range<usize> {
    let nx = grid.nx();
    match grid.boundary {
        Boundary::Dirichlet => 1..nx - 1,
        Boundary::Periodic => 0..nx - 1,
    }
}

fn embed(v: &[f64], n: usize, grid: &GridSpec) -> Field {
    let nodes = unknown_nodes(grid);
    let mut f = Field::zeros(n, grid.nx());
    f.values[nodes.start * n..nodes.end * n].copy_from_slice(v);
    if grid.boundary == Boundary::Periodic {
        let nx = grid.nx();
        for c in 0..n {
            f.values[(nx - 1) * n + c] = f.values[c];
        }
    }
    f
}

fn restrict(f: &Field, grid: &GridSpec) -> Vec<f64> {
    let nodes = unknown_nodes(grid);
    f.values[nodes.start * f.n..nodes.end * f.n].to_vec()
}

/// Dense period map over `[0, T]`: column j is the evolution of the j-th
/// unit vector of the unknowns.
pub fn monodromy_matrix(coeffs: &PeriodicCoefficientField, grid: &GridSpec) -> Result<DMatrix<f64>> {
    monodromy_over(coeffs, grid, 0.0, coeffs.period)
}

/// Dense solution operator from `s` to `t`.
pub fn monodromy_over(coeffs: &PeriodicCoefficientField, grid: &GridSpec, s: f64, t: f64) -> Result<DMatrix<f64>> {
    grid.validate()?;
    let n = coeffs.n;
    let m = unknown_nodes(grid).len() * n;
    if m > DENSE_BUDGET {
        return Err(Error::MemoryBudgetExceeded { size: m, budget: DENSE_BUDGET });
    }
    let cols: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            let v0 = embed(&e, n, grid);
            evolve_linearized(coeffs, &v0, s, t, grid).map(|v| restrict(&v, grid))
        })
        .collect::<Result<_>>()?;
    let mut mat = DMatrix::zeros(m, m);
    for (j, col) in cols.iter().enumerate() {
        mat.column_mut(j).copy_from_slice(col);
    }
    Ok(mat)
}

/// Eigenvalues sorted by descending modulus (ties by argument).
pub fn monodromy_eigenvalues(mat: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    if mat.nrows() != mat.ncols() {
        return Err(Error::DimensionMismatch { expected: mat.nrows(), found: mat.ncols() });
    }
    let schur = nalgebra::linalg::Schur::try_new(mat.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::EigensolverFailure("Schur iteration did not converge".into()))?;
    let mut eig: Vec<Complex64> =
        schur.complex_eigenvalues().iter().map(|z| Complex64::new(z.re, z.im)).collect();
    if eig.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::EigensolverFailure("non-finite eigenvalue".into()));
    }
    eig.sort_by(|a, b| {
        b.norm()
            .partial_cmp(&a.norm())
            .expect("finite")
            .then(a.arg().partial_cmp(&b.arg()).expect("finite"))
    });
    Ok(eig)
}

/// `sigma = log(mu) / T` with the imaginary part folded into
/// `(-omega/2, omega/2]`, `omega = 2 pi / T`, for the `count` largest
/// multipliers.
pub fn floquet_exponents(multipliers: &[Complex64], period: f64, count: usize) -> Result<Vec<Complex64>> {
    if !(period > 0.0) {
        return Err(Error::InvalidParameter("period must be positive".into()));
    }
    let mut sorted = multipliers.to_vec();
    sorted.sort_by(|a, b| b.norm().partial_cmp(&a.norm()).unwrap_or(std::cmp::Ordering::Equal));
    let omega = 2.0 * std::f64::consts::PI / period;
    sorted
        .iter()
        .take(count)
        .map(|mu| {
            if mu.norm() == 0.0 || !mu.norm().is_finite() {
                return Err(Error::EigensolverFailure(format!("multiplier {mu} has no logarithm")));
            }
            let re = mu.norm().ln() / period;
            Ok(Complex64::new(re, fold(mu.arg() / period, omega)))
        })
        .collect()
}

/// Folds `y` into `(-omega/2, omega/2]`.
pub fn fold(y: f64, omega: f64) -> f64 {
    let mut r = y - omega * (y / omega).round();
    if r <= -0.5 * omega {
        r += omega;
    }
    if r > 0.5 * omega {
        r -= omega;
    }
    r
}

/// Eigenvector of `mat` for the eigenvalue closest to `mu` by shifted inverse
/// iteration; `transpose` gives the left eigenvector.
pub fn eigenvector_near(mat: &DMatrix<f64>, mu: Complex64, transpose: bool) -> Result<DVector<Complex64>> {
    let m = mat.nrows();
    let base = if transpose { mat.transpose() } else { mat.clone() };
    let shift = mu + Complex64::new(1e-10 * (1.0 + mu.norm()), 0.0);
    let shifted = base.map(|x| Complex64::new(x, 0.0)) - DMatrix::<Complex64>::identity(m, m) * shift;
    let lu = shifted.lu();
    let mut v = DVector::from_fn(m, |i, _| Complex64::new(1.0 + (i as f64 * 0.37).sin() * 0.1, 0.0));
    for _ in 0..4 {
        v = lu.solve(&v).ok_or_else(|| Error::EigensolverFailure("singular shifted matrix".into()))?;
        let norm = v.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::EigensolverFailure("inverse iteration produced a degenerate vector".into()));
        }
        v /= Complex64::new(norm, 0.0);
    }
    // Phase normalization: the largest entry is real positive.
    let imax = v.iter().enumerate().fold(0, |b, (i, z)| if z.norm() > v[b].norm() { i } else { b });
    let phase = v[imax] / v[imax].norm();
    v /= phase;
    Ok(v)
}

/// Outcome of a hypothesis check that may not apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    NotApplicable,
}

/// Spectral report of the period map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonodromyReport {
    pub period: f64,
    pub unknowns: usize,
    /// Leading multipliers as `(re, im)`, descending modulus.
    pub multipliers: Vec<(f64, f64)>,
    pub exponents: Vec<(f64, f64)>,
    pub options: SpectralOptions,
    /// Multipliers within `cluster_radius` of 1.
    pub unit_cluster: Vec<(f64, f64)>,
    /// Largest modulus outside the cluster.
    pub outer_radius: f64,
    pub s1: bool,
    pub localized_count: usize,
    pub expected_localized: usize,
    pub s2: bool,
    /// Correlation of each cluster eigenvector with `u_x`.
    pub translation_correlations: Vec<f64>,
    pub liu_majda: f64,
    pub s3: bool,
    pub s4: Verdict,
    /// Melnikov matrix `M(0)` (row-major), 1x1 in the stationary case.
    pub melnikov: Vec<Vec<f64>>,
    pub melnikov_inverse: Vec<Vec<f64>>,
    /// Melnikov entry computed from the numerical adjoint fixed vector.
    pub melnikov_numerical: Option<f64>,
    /// Set when no neutral mode exists at all.
    pub not_a_shock_spectrum: bool,
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa * bb).sqrt()
    }
}

fn is_localized(v: &Field, grid: &GridSpec, tol: f64) -> bool {
    let sup = v.sup_norm();
    let half = 0.5 * grid.half_width;
    (0..grid.nx())
        .filter(|&i| grid.x(i).abs() > half)
        .all(|i| v.at(i).iter().all(|x| x.abs() < tol * sup))
}

/// Assembles the (S1)-(S4) verdict for a profile and its linearization.
pub fn spectral_stability_report(
    profile: &ShockProfile,
    coeffs: &PeriodicCoefficientField,
    chars: &ShockCharacteristics,
    grid: &GridSpec,
    opts: &SpectralOptions,
) -> Result<MonodromyReport> {
    let n = coeffs.n;
    let mat = monodromy_matrix(coeffs, grid)?;
    let eig = monodromy_eigenvalues(&mat)?;
    let period = coeffs.period;
    let exps = floquet_exponents(&eig, period, opts.count)?;
    let one = Complex64::new(1.0, 0.0);
    let (cluster, rest): (Vec<Complex64>, Vec<Complex64>) =
        eig.iter().partition(|mu| (*mu - one).norm() < opts.cluster_radius);
    let outer_radius = rest.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let s1 = outer_radius < 1.0 - opts.gap;

    // Localized neutral modes and their correlation with u_x.
    let mut ux = Field::zeros(n, grid.nx());
    for i in 0..grid.nx() {
        ux.values[i * n..(i + 1) * n].copy_from_slice(&profile.eval_derivative(grid.x(i)));
    }
    let mut localized = 0;
    let mut correlations = Vec::new();
    let mut right_modes = Vec::new();
    for mu in &cluster {
        let v = eigenvector_near(&mat, *mu, false)?;
        let re: Vec<f64> = v.iter().map(|z| z.re).collect();
        let field = embed(&re, n, grid);
        if is_localized(&field, grid, opts.loc_tol) {
            localized += 1;
        }
        correlations.push(correlation(&field.values, &ux.values).abs());
        right_modes.push(field);
    }
    let expected = if coeffs.is_stationary() { 1 } else { 2 };

    let jump = chars.jump();
    let liu_majda = liu_majda_determinant(chars, &jump)?;
    let s3 = liu_majda.abs() > opts.det_tol;

    // Melnikov block with the unit adjoint constant psi_1.
    let (melnikov, melnikov_numerical, s4) = if cluster.is_empty() {
        (vec![], None, Verdict::NotApplicable)
    } else {
        let psi = psi1_unit(chars)?;
        let psi_field = Field::from_fn(n, grid, |_, c| psi[c]);
        let m11 = melnikov_matrix(grid, period, (&[psi_field], None), (&[ux.clone()], None))?;
        // Cross-check with the numerical adjoint fixed vector, scaled to psi_1
        // at x = 0.
        let left = eigenvector_near(&mat, cluster[0], true)?;
        let lre: Vec<f64> = left.iter().map(|z| z.re).collect();
        let lf = embed(&lre, n, grid);
        let ic = grid.center();
        let scale: f64 = psi.iter().zip(lf.at(ic)).map(|(a, b)| a * b).sum::<f64>()
            / lf.at(ic).iter().map(|b| b * b).sum::<f64>();
        let lf = lf.scaled(scale);
        let numerical = melnikov_matrix(grid, period, (&[lf], None), (&[ux.clone()], None))?[0][0];
        // The second (non-constant) adjoint mode exists only when the kernel is
        // two-dimensional.
        let s4 = if expected < 2 {
            Verdict::NotApplicable
        } else if localized >= 2 && m11[0][0].abs() > opts.det_tol {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        (m11, Some(numerical), s4)
    };
    let melnikov_inverse = if melnikov.len() == 1 && melnikov[0][0] != 0.0 {
        vec![vec![1.0 / melnikov[0][0]]]
    } else {
        vec![]
    };

    Ok(MonodromyReport {
        period,
        unknowns: mat.nrows(),
        multipliers: eig.iter().take(opts.count).map(|z| (z.re, z.im)).collect(),
        exponents: exps.iter().map(|z| (z.re, z.im)).collect(),
        options: *opts,
        unit_cluster: cluster.iter().map(|z| (z.re, z.im)).collect(),
        outer_radius,
        s1,
        localized_count: localized,
        expected_localized: expected,
        s2: localized == expected,
        translation_correlations: correlations,
        liu_majda,
        s3,
        s4,
        melnikov,
        melnikov_inverse,
        melnikov_numerical,
        not_a_shock_spectrum: localized == 0,
    })
}

/// `M_ij = (1/T) int_0^T int <psi_i, u_j> dx dt` from equally spaced samples
/// over one period (periodic trapezoid rule in t). Pass `None` for the second
/// pair to obtain the 1x1 block.
pub fn melnikov_matrix(
    grid: &GridSpec,
    period: f64,
    psi: (&[Field], Option<&[Field]>),
    modes: (&[Field], Option<&[Field]>),
) -> Result<Vec<Vec<f64>>> {
    if !(period > 0.0) {
        return Err(Error::InvalidParameter("period must be positive".into()));
    }
    let psis: Vec<&[Field]> = std::iter::once(psi.0).chain(psi.1).collect();
    let us: Vec<&[Field]> = std::iter::once(modes.0).chain(modes.1).collect();
    if psis.len() != us.len() {
        return Err(Error::DimensionMismatch { expected: psis.len(), found: us.len() });
    }
    let samples = psis[0].len();
    if samples == 0 || psis.iter().chain(&us).any(|s| s.len() != samples) {
        return Err(Error::QuadratureUnderResolved(
            "adjoint and mode series need the same positive number of time samples".into(),
        ));
    }
    let nx = grid.nx();
    let mut out = vec![vec![0.0; us.len()]; psis.len()];
    for (i, p) in psis.iter().enumerate() {
        for (j, u) in us.iter().enumerate() {
            let mut acc = 0.0;
            for m in 0..samples {
                let (a, b) = (&p[m], &u[m]);
                if a.nx() != nx || b.nx() != nx || a.n != b.n {
                    return Err(Error::DimensionMismatch { expected: nx, found: a.nx().min(b.nx()) });
                }
                let integrand: Vec<f64> = (0..nx)
                    .map(|k| a.at(k).iter().zip(b.at(k)).map(|(x, y)| x * y).sum())
                    .collect();
                acc += trapezoid(&integrand, grid.dx);
            }
            out[i][j] = acc / samples as f64;
        }
    }
    Ok(out)
}

/// Inverse of a small square matrix given row-major.
pub fn invert_small(m: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let k = m.len();
    let mat = DMatrix::from_fn(k, k, |r, c| m[r][c]);
    let inv = mat.try_inverse()?;
    Some((0..k).map(|r| (0..k).map(|c| inv[(r, c)]).collect()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponent_of_unit_and_damped_multipliers() {
        let tp = 2.0 * std::f64::consts::PI;
        let e = floquet_exponents(&[Complex64::new(1.0, 0.0)], tp, 1).unwrap();
        assert_eq!(e[0], Complex64::new(0.0, 0.0));
        let mu = Complex64::new((-std::f64::consts::PI).exp(), 0.0);
        let e = floquet_exponents(&[mu], tp, 1).unwrap();
        assert!((e[0].re + 0.5).abs() < 1e-15 && e[0].im == 0.0);
        // arg = pi maps to the closed end of the strip.
        let e = floquet_exponents(&[Complex64::new(-1.0, 0.0)], tp, 1).unwrap();
        assert!((e[0].im - 0.5).abs() < 1e-15);
    }

    #[test]
    fn folding_is_idempotent() {
        for y in [-3.2, -0.5, -0.49, 0.0, 0.5, 0.51, 7.9] {
            let f = fold(y, 1.0);
            assert!(f > -0.5 && f <= 0.5);
            assert_eq!(fold(f, 1.0), f);
            assert!(((y - f) - (y - f).round()).abs() < 1e-12);
        }
    }

    #[test]
    fn melnikov_rejects_mismatched_samples() {
        let grid = GridSpec::new(5.0, 0.5);
        let f = Field::zeros(1, grid.nx());
        let r = melnikov_matrix(&grid, 1.0, (&[f.clone()], None), (&[f.clone(), f], None));
        assert!(matches!(r, Err(Error::QuadratureUnderResolved(_))));
    }
}

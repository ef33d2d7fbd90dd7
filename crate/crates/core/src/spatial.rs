//! Spatial dynamics of the Floquet-Bloch eigenvalue problem, truncated to
//! temporal Fourier modes `|k| <= K`.
//!
//! With `v = e^{sigma t} p(x, t)`, `p` periodic, the eigenvalue problem
//! becomes the first-order system `U' = A(x, sigma) U`, `U = (p, p_x)`,
//! `A = [[0, I], [d_t + sigma + A_x, A]]`. Unknowns are ordered as
//! `(k + K) * N + c` for the position block, followed by the derivative block.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flux::{eigen_decompose, CharacteristicData, Direction, Side};
use crate::profiles::PeriodicCoefficientField;

type CMat = DMatrix<Complex64>;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

/// Which branch of `nu^2 - a nu - (sigma + i k omega) = 0` a root lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RootFamily {
    /// `k = 0` root with `nu(0) = 0`.
    Small,
    /// `k = 0` root with `nu(0) = a`.
    Large,
    /// Root of a nonzero Fourier mode, or of `k = 0` past the branch point.
    Fourier,
}

/// One spatial eigenvalue of the asymptotic operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialRoot {
    /// Index of the characteristic speed.
    pub j: usize,
    pub k: i64,
    pub nu: Complex64,
    pub family: RootFamily,
    /// Belongs to the stable subspace (continued from `Re sigma > 0`).
    pub stable: bool,
}

fn principal_sqrt(z: Complex64) -> Complex64 {
    z.sqrt()
}

/// Roots `a_j/2 +- sqrt(a_j^2 + 4(sigma + i k omega))/2` for `|k| <= K`,
/// principal branch, `2 N (2K + 1)` in total.
///
/// For `k = 0` and `|sigma| < a_j^2/4` the roots are labelled by family and the
/// stable one is the analytic continuation from `Re sigma > 0`: the small root
/// when `a_j > 0`, the large one when `a_j < 0`. Otherwise the root with the
/// smaller real part is stable.
pub fn asymptotic_spatial_spectrum(
    chars: &CharacteristicData,
    sigma: Complex64,
    kmax: usize,
    omega: f64,
) -> Vec<SpatialRoot> {
    let mut out = Vec::with_capacity(2 * chars.dim() * (2 * kmax + 1));
    for k in -(kmax as i64)..=kmax as i64 {
        let lambda = sigma + Complex64::new(0.0, k as f64 * omega);
        for (j, &a) in chars.speeds.iter().enumerate() {
            let disc = principal_sqrt(Complex64::new(a * a, 0.0) + 4.0 * lambda);
            let plus = 0.5 * (a + disc);
            let minus = 0.5 * (a - disc);
            if k == 0 && 4.0 * sigma.norm() < a * a {
                let (small, large) = if a > 0.0 { (minus, plus) } else { (plus, minus) };
                out.push(SpatialRoot { j, k, nu: small, family: RootFamily::Small, stable: a > 0.0 });
                out.push(SpatialRoot { j, k, nu: large, family: RootFamily::Large, stable: a < 0.0 });
            } else {
                let (lo, hi) = if plus.re <= minus.re { (plus, minus) } else { (minus, plus) };
                out.push(SpatialRoot { j, k, nu: lo, family: RootFamily::Fourier, stable: true });
                out.push(SpatialRoot { j, k, nu: hi, family: RootFamily::Fourier, stable: false });
            }
        }
    }
    out
}

/// Root of `nu^2 - a nu - sigma = 0` with `nu(0) = 0` and its eigenvector
/// `(1, nu)` (to be tensored with the right eigenvector `r`).
pub fn small_spatial_eigenvalue(a: f64, sigma: Complex64) -> Result<(Complex64, [Complex64; 2])> {
    if a == 0.0 || !a.is_finite() {
        return Err(Error::InvalidParameter("characteristic speed must be nonzero".into()));
    }
    let limit = 0.25 * a * a;
    if sigma.norm() >= limit {
        return Err(Error::BranchAmbiguity { sigma_abs: sigma.norm(), limit });
    }
    let disc = principal_sqrt(Complex64::new(a * a, 0.0) + 4.0 * sigma);
    // Cancellation-free form of a/2 - sgn(a) disc/2.
    let nu = -2.0 * sigma / (a + a.signum() * disc);
    Ok((nu, [ONE, nu]))
}

fn check_band(coeffs: &PeriodicCoefficientField, kmax: usize) -> Result<()> {
    if coeffs.kmax > kmax {
        return Err(Error::TruncationBandExceeded { band: coeffs.kmax, k: kmax });
    }
    Ok(())
}

/// Block operator `[[0, I], [D + sigma + B(x), C(x)]]` of size `2N(2K+1)`,
/// where `D = diag(i k omega)`, and `B`, `C` are the Toeplitz couplings of the
/// Fourier modes of `A_x` and `A`.
pub fn build_spatial_operator(
    coeffs: &PeriodicCoefficientField,
    sigma: Complex64,
    kmax: usize,
    x: f64,
) -> Result<CMat> {
    check_band(coeffs, kmax)?;
    Ok(operator_at(coeffs, sigma, kmax, x, None))
}

/// Operator assembly; with `only = Some(k)` the single decoupled block of mode
/// `k` built from the mean coefficients.
fn operator_at(coeffs: &PeriodicCoefficientField, sigma: Complex64, kmax: usize, x: f64, only: Option<i64>) -> CMat {
    let n = coeffs.n;
    let omega = coeffs.omega();
    let ks: Vec<i64> = match only {
        Some(k) => vec![k],
        None => (-(kmax as i64)..=kmax as i64).collect(),
    };
    let m = n * ks.len();
    let band = if only.is_some() { 0 } else { coeffs.kmax as i64 };
    let a_modes: Vec<CMat> = (-band..=band).map(|q| coeffs.mode_matrix(q, x, false)).collect();
    let b_modes: Vec<CMat> = (-band..=band).map(|q| coeffs.mode_matrix(q, x, true)).collect();
    let mut op = CMat::zeros(2 * m, 2 * m);
    for i in 0..m {
        op[(i, m + i)] = ONE;
    }
    for (bi, &kr) in ks.iter().enumerate() {
        for c in 0..n {
            op[(m + bi * n + c, bi * n + c)] += sigma + Complex64::new(0.0, kr as f64 * omega);
        }
        for (bj, &kc) in ks.iter().enumerate() {
            let q = kr - kc;
            if q.abs() > band {
                continue;
            }
            let (am, bm) = (&a_modes[(q + band) as usize], &b_modes[(q + band) as usize]);
            for r in 0..n {
                for c in 0..n {
                    op[(m + bi * n + r, bj * n + c)] += bm[(r, c)];
                    op[(m + bi * n + r, m + bj * n + c)] += am[(r, c)];
                }
            }
        }
    }
    op
}

/// Thin QR with a real positive diagonal in `R`; returns `Q` and the ratio of
/// the smallest to largest `|R_ii|`.
pub fn orthonormalize(m: &CMat) -> (CMat, f64) {
    let qr = m.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for i in 0..r.nrows().min(r.ncols()) {
        let d = r[(i, i)];
        let a = d.norm();
        lo = lo.min(a);
        hi = hi.max(a);
        if a > 0.0 {
            let phase = d / a;
            let mut col = q.column_mut(i);
            col *= phase;
        }
    }
    (q, if hi > 0.0 { lo / hi } else { 0.0 })
}

/// Transport settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportOptions {
    /// Integration step in x (defaults to the coefficient grid spacing).
    pub step: Option<f64>,
    /// Minimal admissible splitting gap of the asymptotic roots.
    pub gap_tol: f64,
}

impl Default for TransportOptions {
    fn default() -> Self {
        Self { step: None, gap_tol: 1e-8 }
    }
}

/// Stable subspace at `+inf` or unstable subspace at `-inf`, carried to x = 0.
#[derive(Debug, Clone)]
pub struct SpatialFrame {
    pub sigma: Complex64,
    pub kmax: usize,
    pub side: Side,
    /// Orthonormal basis at x = 0, `2N(2K+1) x N(2K+1)`.
    pub basis: CMat,
    /// Basis at x = 0 normalized against the fixed reference frame
    /// (`reference^H gauged = I`).
    pub gauged: CMat,
    /// Orthonormal asymptotic eigenspace at the given sigma.
    pub asymptotic: CMat,
    /// Asymptotic eigenspace at sigma = 0, used as the gauge.
    pub reference: CMat,
    pub roots: Vec<SpatialRoot>,
    /// Splitting gap `min |Re nu|` over non-small roots.
    pub gap: f64,
    /// Dichotomy rates: largest Re over stable, smallest Re over unstable roots.
    pub kappa_stable: f64,
    pub kappa_unstable: f64,
    pub x_start: f64,
    pub steps: usize,
    /// Largest `||Q^H Q - I||` after re-orthonormalization.
    pub orthonormality_defect: f64,
}

fn asymptotic_basis(chars: &CharacteristicData, roots: &[SpatialRoot], kmax: usize, take_stable: bool, only: Option<i64>) -> CMat {
    let n = chars.dim();
    let nk = if only.is_some() { 1 } else { 2 * kmax + 1 };
    let m = n * nk;
    let cols: Vec<&SpatialRoot> = roots
        .iter()
        .filter(|r| r.stable == take_stable && only.is_none_or(|k| r.k == k))
        .collect();
    let mut b = CMat::zeros(2 * m, cols.len());
    for (c, root) in cols.iter().enumerate() {
        let block = if only.is_some() { 0 } else { (root.k + kmax as i64) as usize };
        let r = &chars.right[root.j];
        for comp in 0..n {
            b[(block * n + comp, c)] = Complex64::new(r[comp], 0.0);
            b[(m + block * n + comp, c)] = root.nu * r[comp];
        }
    }
    orthonormalize(&b).0
}

fn side_chars(coeffs: &PeriodicCoefficientField, side: Side) -> Result<CharacteristicData> {
    let jac = match side {
        Side::Minus => &coeffs.a_minus,
        Side::Plus => &coeffs.a_plus,
    };
    let (speeds, right, left) = eigen_decompose(jac, side)?;
    let n = speeds.len();
    let directions = speeds
        .iter()
        .map(|&a| match (side, a > 0.0) {
            (Side::Minus, true) | (Side::Plus, false) => Direction::Incoming,
            _ => Direction::Outgoing,
        })
        .collect::<Vec<_>>();
    let lax_index = directions.iter().filter(|d| **d == Direction::Outgoing).count();
    let state = vec![f64::NAN; n];
    Ok(CharacteristicData { side, state, speeds, right, left, directions, lax_index })
}

fn splitting_gap(roots: &[SpatialRoot]) -> (f64, f64, f64) {
    let mut gap = f64::INFINITY;
    let mut ks = f64::NEG_INFINITY;
    let mut ku = f64::INFINITY;
    for r in roots {
        if r.stable {
            ks = ks.max(r.nu.re);
        } else {
            ku = ku.min(r.nu.re);
        }
        if r.family == RootFamily::Small {
            continue;
        }
        // Fourier roots must sit strictly on their side of the imaginary axis.
        let signed = if r.stable { -r.nu.re } else { r.nu.re };
        gap = gap.min(signed);
    }
    (gap, ks, ku)
}

fn rk4_step(
    coeffs: &PeriodicCoefficientField,
    sigma: Complex64,
    kmax: usize,
    only: Option<i64>,
    x: f64,
    h: f64,
    y: &CMat,
) -> CMat {
    let hc = Complex64::new(h, 0.0);
    let a0 = operator_at(coeffs, sigma, kmax, x, only);
    let am = operator_at(coeffs, sigma, kmax, x + 0.5 * h, only);
    let a1 = operator_at(coeffs, sigma, kmax, x + h, only);
    let k1 = &a0 * y;
    let k2 = &am * (y + &k1 * (0.5 * hc));
    let k3 = &am * (y + &k2 * (0.5 * hc));
    let k4 = &a1 * (y + &k3 * hc);
    y + (k1 + k2 * Complex64::new(2.0, 0.0) + k3 * Complex64::new(2.0, 0.0) + k4) * (hc / 6.0)
}

/// Carries `E^s_+` (side = Plus) or `E^u_-` (side = Minus) from the end of the
/// coefficient grid to x = 0 with RK4 and QR re-orthonormalization each step.
pub fn transport_subspace(
    coeffs: &PeriodicCoefficientField,
    sigma: Complex64,
    kmax: usize,
    side: Side,
    opts: &TransportOptions,
) -> Result<SpatialFrame> {
    check_band(coeffs, kmax)?;
    transport(coeffs, sigma, kmax, side, opts, None)
}

fn transport(
    coeffs: &PeriodicCoefficientField,
    sigma: Complex64,
    kmax: usize,
    side: Side,
    opts: &TransportOptions,
    only: Option<i64>,
) -> Result<SpatialFrame> {
    let chars = side_chars(coeffs, side)?;
    let omega = coeffs.omega();
    let take_stable = side == Side::Plus;
    let roots = asymptotic_spatial_spectrum(&chars, sigma, kmax, omega);
    let (gap, kappa_stable, kappa_unstable) = splitting_gap(&roots);
    if !(gap > opts.gap_tol) {
        return Err(Error::SplittingCollapse(gap));
    }
    let ref_roots = asymptotic_spatial_spectrum(&chars, ZERO, kmax, omega);
    let reference = asymptotic_basis(&chars, &ref_roots, kmax, take_stable, only);
    let asymptotic = asymptotic_basis(&chars, &roots, kmax, take_stable, only);

    let half = 0.5 * (coeffs.nx - 1) as f64 * coeffs.dx;
    let x_start = if side == Side::Plus { half } else { -half };
    let h0 = opts.step.unwrap_or(coeffs.dx);
    if !(h0 > 0.0) {
        return Err(Error::InvalidParameter("transport step must be positive".into()));
    }
    let steps = (half / h0).ceil().max(1.0) as usize;
    let h = -x_start / steps as f64;
    let mut y = asymptotic.clone();
    let mut defect = 0.0f64;
    let dim = y.ncols();
    for s in 0..steps {
        let x = x_start + s as f64 * h;
        let next = rk4_step(coeffs, sigma, kmax, only, x, h, &y);
        if next.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::StiffnessFailure(format!("non-finite frame at x = {x}")));
        }
        let (q, cond) = orthonormalize(&next);
        if cond < 1e-13 {
            return Err(Error::StiffnessFailure(format!("frame lost rank at x = {x} (ratio {cond:e})")));
        }
        let d = max_abs(&(q.adjoint() * &q - CMat::identity(dim, dim)));
        defect = defect.max(d);
        y = q;
    }
    let gram = reference.adjoint() * &y;
    let inv = gram
        .try_inverse()
        .ok_or(Error::SplittingCollapse(0.0))?;
    let gauged = &y * inv;
    Ok(SpatialFrame {
        sigma,
        kmax,
        side,
        basis: y,
        gauged,
        asymptotic,
        reference,
        roots,
        gap,
        kappa_stable,
        kappa_unstable,
        x_start,
        steps,
        orthonormality_defect: defect,
    })
}

/// Determinant of `[E^s_+(0) | E^u_-(0)]` with principal angles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Intersection {
    pub sigma: (f64, f64),
    /// Determinant in the fixed gauge.
    pub det: (f64, f64),
    /// `|det|` of the orthonormal bases (gauge-free, in [0, 1]).
    pub det_orthonormal: f64,
    /// Principal angles, ascending.
    pub principal_angles: Vec<f64>,
    /// Number of angles below `1e-4`.
    pub intersection_dimension: usize,
}

impl Intersection {
    pub fn det_complex(&self) -> Complex64 {
        Complex64::new(self.det.0, self.det.1)
    }

    pub fn smallest_angle(&self) -> f64 {
        self.principal_angles.first().copied().unwrap_or(std::f64::consts::FRAC_PI_2)
    }
}

/// Principal angles between the column spaces of two orthonormal frames.
pub fn principal_angles(qa: &CMat, qb: &CMat) -> Vec<f64> {
    let resid = qb - qa * (qa.adjoint() * qb);
    let sv = resid.singular_values();
    let mut angles: Vec<f64> = sv.iter().map(|s| s.clamp(0.0, 1.0).asin()).collect();
    angles.sort_by(|a, b| a.partial_cmp(b).expect("finite angle"));
    angles
}

pub fn intersection_determinant(plus: &SpatialFrame, minus: &SpatialFrame) -> Result<Intersection> {
    if plus.basis.nrows() != minus.basis.nrows() || plus.kmax != minus.kmax {
        return Err(Error::DimensionMismatch { expected: plus.basis.nrows(), found: minus.basis.nrows() });
    }
    if plus.basis.ncols() + minus.basis.ncols() != plus.basis.nrows() {
        return Err(Error::DimensionMismatch {
            expected: plus.basis.nrows(),
            found: plus.basis.ncols() + minus.basis.ncols(),
        });
    }
    if (plus.sigma - minus.sigma).norm() > 1e-14 * (1.0 + plus.sigma.norm()) {
        return Err(Error::InvalidParameter("frames computed at different sigma".into()));
    }
    let det = concat(&plus.gauged, &minus.gauged).determinant();
    let det_orthonormal = concat(&plus.basis, &minus.basis).determinant().norm();
    let angles = principal_angles(&plus.basis, &minus.basis);
    let dim = angles.iter().filter(|&&a| a < 1e-4).count();
    Ok(Intersection {
        sigma: (plus.sigma.re, plus.sigma.im),
        det: (det.re, det.im),
        det_orthonormal,
        principal_angles: angles,
        intersection_dimension: dim,
    })
}

fn max_abs(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn concat(a: &CMat, b: &CMat) -> CMat {
    let mut m = CMat::zeros(a.nrows(), a.ncols() + b.ncols());
    m.columns_mut(0, a.ncols()).copy_from(a);
    m.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    m
}

/// Transports both frames and evaluates the intersection determinant.
pub fn evans_value(
    coeffs: &PeriodicCoefficientField,
    sigma: Complex64,
    kmax: usize,
    opts: &TransportOptions,
) -> Result<Intersection> {
    let plus = transport_subspace(coeffs, sigma, kmax, Side::Plus, opts)?;
    let minus = transport_subspace(coeffs, sigma, kmax, Side::Minus, opts)?;
    intersection_determinant(&plus, &minus)
}

/// Determinant divided by its decoupled reference: the `k != 0` blocks are
/// replaced by frames transported with the mean coefficients only, and the
/// `k = 0` block by the sigma = 0 asymptotic gauge. For time-independent
/// coefficients this isolates the `k = 0` Evans function, and it is insensitive
/// to the truncation `K`.
pub fn normalized_determinant(
    coeffs: &PeriodicCoefficientField,
    sigma: Complex64,
    kmax: usize,
    opts: &TransportOptions,
) -> Result<Complex64> {
    check_band(coeffs, kmax)?;
    let full = evans_value(coeffs, sigma, kmax, opts)?.det_complex();
    let n = coeffs.n;
    let m = n * (2 * kmax + 1);
    let mut ys = CMat::zeros(2 * m, m);
    let mut yu = CMat::zeros(2 * m, m);
    for k in -(kmax as i64)..=kmax as i64 {
        let block = (k + kmax as i64) as usize;
        let (bs, bu) = if k == 0 {
            let s = transport(coeffs, sigma, kmax, Side::Plus, opts, Some(0))?;
            let u = transport(coeffs, sigma, kmax, Side::Minus, opts, Some(0))?;
            (gauge(&s.reference, &s.reference), gauge(&u.reference, &u.reference))
        } else {
            let s = transport(coeffs, sigma, kmax, Side::Plus, opts, Some(k))?;
            let u = transport(coeffs, sigma, kmax, Side::Minus, opts, Some(k))?;
            (s.gauged, u.gauged)
        };
        place(&mut ys, &bs, block, n, m);
        place(&mut yu, &bu, block, n, m);
    }
    let reference = concat(&ys, &yu).determinant();
    if reference.norm() == 0.0 {
        return Err(Error::SplittingCollapse(0.0));
    }
    Ok(full / reference)
}

fn gauge(reference: &CMat, frame: &CMat) -> CMat {
    let g = reference.adjoint() * frame;
    frame * g.try_inverse().expect("orthonormal reference")
}

/// Places the block frame of mode `block` (rows `2n`, columns `cols`) into the
/// full ordering; column slots follow the stable/unstable ordering of the full
/// frames (one column group of width `n` per mode).
fn place(dst: &mut CMat, src: &CMat, block: usize, n: usize, m: usize) {
    let w = src.ncols();
    for c in 0..w {
        for r in 0..n {
            dst[(block * n + r, block * w + c)] = src[(r, c)];
            dst[(m + block * n + r, block * w + c)] = src[(n + r, c)];
        }
    }
}

/// Winding number of a closed sampled curve (the last sample connects back to
/// the first), by summing principal phase increments.
pub fn winding_number(values: &[Complex64]) -> Result<i64> {
    if values.len() < 3 {
        return Err(Error::QuadratureUnderResolved("need at least 3 samples for a winding number".into()));
    }
    if values.iter().any(|z| z.norm() == 0.0) {
        return Err(Error::InvalidParameter("curve passes through zero".into()));
    }
    let mut total = 0.0;
    for i in 0..values.len() {
        let a = values[i];
        let b = values[(i + 1) % values.len()];
        let d = (b / a).arg();
        if d.abs() > 0.75 * std::f64::consts::PI {
            return Err(Error::QuadratureUnderResolved(format!(
                "phase jump {d:.3} between samples {i} and {}",
                (i + 1) % values.len()
            )));
        }
        total += d;
    }
    Ok((total / (2.0 * std::f64::consts::PI)).round() as i64)
}

/// Intersection determinants on a circle `center + r e^{i theta}`, samples in
/// parallel.
pub fn evans_circle(
    coeffs: &PeriodicCoefficientField,
    center: Complex64,
    radius: f64,
    samples: usize,
    kmax: usize,
    opts: &TransportOptions,
) -> Result<Vec<Intersection>> {
    (0..samples)
        .into_par_iter()
        .map(|i| {
            let th = 2.0 * std::f64::consts::PI * i as f64 / samples as f64;
            evans_value(coeffs, center + Complex64::from_polar(radius, th), kmax, opts)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn winding_of_powers() {
        let circle: Vec<Complex64> =
            (0..32).map(|i| Complex64::from_polar(0.1, 2.0 * std::f64::consts::PI * i as f64 / 32.0)).collect();
        let sq: Vec<Complex64> = circle.iter().map(|z| z * z).collect();
        assert_eq!(winding_number(&circle).unwrap(), 1);
        assert_eq!(winding_number(&sq).unwrap(), 2);
        let shifted: Vec<Complex64> = circle.iter().map(|z| z + 1.0).collect();
        assert_eq!(winding_number(&shifted).unwrap(), 0);
    }

    #[test]
    fn orthonormalize_has_positive_diagonal() {
        let m = CMat::from_fn(4, 2, |r, c| Complex64::new((r + 2 * c) as f64 - 1.5, (r * c) as f64));
        let (q, cond) = orthonormalize(&m);
        assert!(max_abs(&(q.adjoint() * &q - CMat::identity(2, 2))) < 1e-14);
        let r = q.adjoint() * &m;
        assert!(r[(0, 0)].im.abs() < 1e-14 && r[(0, 0)].re > 0.0);
        assert!(r[(1, 1)].im.abs() < 1e-14 && r[(1, 1)].re > 0.0);
        assert!(cond > 0.0);
    }
}

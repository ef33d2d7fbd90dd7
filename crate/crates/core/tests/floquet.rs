use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use tpshock_core::floquet::{
    eigenvector_near, floquet_exponents, invert_small, melnikov_matrix, monodromy_eigenvalues, monodromy_matrix,
    spectral_stability_report, MonodromyReport, SpectralOptions, Verdict,
};
use tpshock_core::flux::{characteristic_data, FluxModel};
use tpshock_core::pde::{evolve_linearized, Boundary, Field, GridSpec};
use tpshock_core::profiles::{solve_stationary_profile, Manufactured, PeriodicCoefficientField, ShockProfile};
use tpshock_core::Error;

fn burgers(l: f64, dx: f64) -> ShockProfile {
    solve_stationary_profile(&FluxModel::Burgers, &[1.0], &[-1.0], &GridSpec::new(l, dx)).unwrap()
}

struct Stationary {
    profile: ShockProfile,
    matrix: DMatrix<f64>,
    report: MonodromyReport,
}

fn stationary() -> &'static Stationary {
    static CELL: OnceLock<Stationary> = OnceLock::new();
    CELL.get_or_init(|| {
        let profile = burgers(29.0, 0.05);
        let coeffs = PeriodicCoefficientField::stationary(&profile).unwrap();
        let chars = characteristic_data(&FluxModel::Burgers, &[1.0], &[-1.0]).unwrap();
        let matrix = monodromy_matrix(&coeffs, &profile.grid).unwrap();
        let report =
            spectral_stability_report(&profile, &coeffs, &chars, &profile.grid, &SpectralOptions::default()).unwrap();
        Stationary { profile, matrix, report }
    })
}

#[test]
fn burgers_shock_has_a_simple_translation_multiplier() {
    let s = stationary();
    let r = &s.report;
    assert_eq!(r.unit_cluster.len(), 1, "cluster {:?}", r.unit_cluster);
    let (re, im) = r.unit_cluster[0];
    assert!(((re - 1.0).powi(2) + im * im).sqrt() < 1e-3);
    assert!(r.translation_correlations[0] > 0.999);
    assert!(r.s1, "outer radius {}", r.outer_radius);
    assert!(r.outer_radius < 1.0 - 1e-3);
    assert!(r.s2 && r.s3);
    assert_eq!(r.s4, Verdict::NotApplicable);
    assert!(!r.not_a_shock_spectrum);
    assert!((r.liu_majda + 2.0).abs() < 1e-12);
}

#[test]
fn burgers_melnikov_entry_and_inverse() {
    let r = &stationary().report;
    assert!((r.melnikov[0][0] + 2.0).abs() < 1e-3, "M = {:?}", r.melnikov);
    assert!((r.melnikov[0][0] * r.melnikov_inverse[0][0] - 1.0).abs() < 1e-12);
    let num = r.melnikov_numerical.unwrap();
    assert!((num + 2.0).abs() < 2e-2, "numerical adjoint gives {num}");
}

#[test]
fn translation_eigenvector_reproduces_after_one_period() {
    let s = stationary();
    let (re, im) = s.report.unit_cluster[0];
    let v = eigenvector_near(&s.matrix, Complex64::new(re, im), false).unwrap();
    let vr: Vec<f64> = v.iter().map(|z| z.re).collect();
    let nx = s.profile.grid.nx();
    let mut f = Field::zeros(1, nx);
    f.values[1..nx - 1].copy_from_slice(&vr);
    let coeffs = PeriodicCoefficientField::stationary(&s.profile).unwrap();
    let out = evolve_linearized(&coeffs, &f, 0.0, coeffs.period, &s.profile.grid).unwrap();
    let err = out.sub(&f.scaled(re)).sup_norm() / f.sup_norm();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn pure_heat_period_map_is_symmetric_and_contracting() {
    let grid = GridSpec::new(5.0, 0.1);
    let coeffs = PeriodicCoefficientField::constant(&grid, DMatrix::zeros(1, 1), 0.0).unwrap();
    let m = monodromy_matrix(&coeffs, &grid).unwrap();
    let asym = (&m - m.transpose()).amax();
    assert!(asym < 1e-12, "asymmetry {asym}");
    let eig = monodromy_eigenvalues(&m).unwrap();
    assert!(eig[0].norm() < 1.0);
    // Dirichlet heat on [-5, 5]: leading exponent -(pi / 10)^2.
    let sigma = floquet_exponents(&eig, coeffs.period, 1).unwrap()[0];
    let expected = -(std::f64::consts::PI / 10.0).powi(2);
    assert!((sigma.re - expected).abs() < 1e-3, "{sigma} vs {expected}");
}

#[test]
fn periodic_advection_diffusion_exponents_follow_the_symbol() {
    let a = 0.5;
    let l = 10.0;
    let grid = GridSpec::new(l, 0.05).with_boundary(Boundary::Periodic);
    let coeffs = PeriodicCoefficientField::constant(&grid, DMatrix::from_element(1, 1, a), 0.0).unwrap();
    let m = monodromy_matrix(&coeffs, &grid).unwrap();
    let eig = monodromy_eigenvalues(&m).unwrap();
    let exps = floquet_exponents(&eig, coeffs.period, 40).unwrap();
    for j in -3i32..=3 {
        let k = std::f64::consts::PI * j as f64 / l;
        let mut target = Complex64::new(-k * k, -a * k);
        target.im = tpshock_core::floquet::fold(target.im, 1.0);
        let d = exps.iter().map(|s| (s - target).norm()).fold(f64::INFINITY, f64::min);
        assert!(d < 1e-3, "mode {j}: distance {d}");
    }
    // Mass is conserved, so 1 is an exact multiplier.
    assert!((eig[0] - 1.0).norm() < 1e-10);
}

#[test]
fn strictly_dissipative_operator_is_not_a_shock_spectrum() {
    let profile = burgers(20.0, 0.1);
    let chars = characteristic_data(&FluxModel::Burgers, &[1.0], &[-1.0]).unwrap();
    let coeffs = PeriodicCoefficientField::constant(&profile.grid, DMatrix::from_element(1, 1, 1.0), 0.5).unwrap();
    let r = spectral_stability_report(&profile, &coeffs, &chars, &profile.grid, &SpectralOptions::default()).unwrap();
    assert!(r.unit_cluster.is_empty());
    assert_eq!(r.localized_count, 0);
    assert!(!r.s2);
    assert!(r.not_a_shock_spectrum);
    assert!(r.s1);
}

fn leading_exponents(eps: f64) -> Vec<Complex64> {
    let profile = burgers(20.0, 0.1);
    let m = Manufactured { eps, ..Manufactured::default() };
    let coeffs = PeriodicCoefficientField::manufactured(&profile, &m, None).unwrap();
    let mat = monodromy_matrix(&coeffs, &profile.grid).unwrap();
    floquet_exponents(&monodromy_eigenvalues(&mat).unwrap(), coeffs.period, 8).unwrap()
}

fn matching_distance(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter()
        .map(|x| b.iter().map(|y| (x - y).norm()).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

#[test]
fn exponents_move_continuously_with_the_perturbation() {
    let e0 = leading_exponents(0.0);
    let d1 = matching_distance(&e0, &leading_exponents(0.05));
    let d2 = matching_distance(&e0, &leading_exponents(0.1));
    assert!(d1 <= d2 + 1e-9, "{d1} {d2}");
    assert!(d2 < 0.1, "distance {d2}");
    assert!(d2 <= 4.5 * d1 + 1e-8, "not O(eps): {d1} {d2}");
}

#[test]
fn squaring_the_map_leaves_exponents_invariant() {
    let grid = GridSpec::new(5.0, 0.1);
    let coeffs = PeriodicCoefficientField::constant(&grid, DMatrix::from_element(1, 1, 0.3), 0.0).unwrap();
    let m = monodromy_matrix(&coeffs, &grid).unwrap();
    let e1 = floquet_exponents(&monodromy_eigenvalues(&m).unwrap(), coeffs.period, 5).unwrap();
    let m2 = &m * &m;
    let e2 = floquet_exponents(&monodromy_eigenvalues(&m2).unwrap(), 2.0 * coeffs.period, 5).unwrap();
    // Only multipliers well above roundoff carry a meaningful logarithm.
    for (a, b) in e1.iter().zip(&e2).filter(|(a, _)| (a.re * coeffs.period).exp() > 1e-3) {
        assert!((a.re - b.re).abs() < 1e-10, "{a} {b}");
    }
}

#[test]
fn melnikov_entry_converges_under_refinement() {
    let entry = |dx: f64| {
        let p = burgers(20.0, dx);
        let psi = Field::from_fn(1, &p.grid, |_, _| 1.0);
        melnikov_matrix(&p.grid, 1.0, (&[psi], None), (std::slice::from_ref(&p.ux), None)).unwrap()[0][0]
    };
    let (a, b) = (entry(0.1), entry(0.05));
    assert!(((a - b) / b).abs() < 5e-3, "{a} {b}");
}

#[test]
fn melnikov_cross_entry_vanishes_for_a_periodic_profile() {
    let grid = GridSpec::new(20.0, 0.05);
    let period = 2.0 * std::f64::consts::PI;
    let samples = 64;
    let mut psi = Vec::new();
    let mut ut = Vec::new();
    let mut ux = Vec::new();
    let mut psi2 = Vec::new();
    for m in 0..samples {
        let t = period * m as f64 / samples as f64;
        let shift = 0.3 * t.sin();
        psi.push(Field::from_fn(1, &grid, |_, _| 1.0));
        psi2.push(Field::from_fn(1, &grid, |x, _| (-(x * x)).exp()));
        ux.push(Field::from_fn(1, &grid, |x, _| -0.5 / ((x - shift) / 2.0).cosh().powi(2)));
        ut.push(Field::from_fn(1, &grid, |x, _| 0.5 * 0.3 * t.cos() / ((x - shift) / 2.0).cosh().powi(2)));
    }
    let mm = melnikov_matrix(&grid, period, (&psi, Some(&psi2)), (&ux, Some(&ut))).unwrap();
    assert_eq!(mm.len(), 2);
    assert!(mm[0][1].abs() < 1e-10, "M12 = {}", mm[0][1]);
    assert!((mm[0][0] + 2.0).abs() < 1e-6);
    let inv = invert_small(&mm).unwrap();
    let prod = DMatrix::from_fn(2, 2, |r, c| mm[r][c]) * DMatrix::from_fn(2, 2, |r, c| inv[r][c]);
    assert!((prod - DMatrix::identity(2, 2)).amax() < 1e-10);
}

#[test]
fn oversized_dense_map_is_refused() {
    let grid = GridSpec::new(100.0, 0.05);
    let coeffs = PeriodicCoefficientField::constant(&grid, DMatrix::zeros(1, 1), 0.0).unwrap();
    assert!(matches!(monodromy_matrix(&coeffs, &grid), Err(Error::MemoryBudgetExceeded { .. })));
}

#[test]
fn eigenvector_of_a_known_matrix() {
    let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 0.5]);
    let v = eigenvector_near(&m, Complex64::new(2.0, 0.0), false).unwrap();
    let expected = DVector::from_vec(vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]);
    assert!((v - expected).norm() < 1e-10);
}

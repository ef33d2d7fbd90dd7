use nalgebra::DMatrix;
use proptest::prelude::*;
use tpshock_core::flux::FluxModel;
use tpshock_core::pde::{
    adjoint_evolve, evolve_linearized, evolve_nonlinear, evolve_nonlinear_with, mass, pairing,
    weighted_sobolev_norm, Boundary, Field, GridSpec,
};
use tpshock_core::profiles::{solve_stationary_profile, Manufactured, PeriodicCoefficientField};
use tpshock_core::Error;

fn burgers_profile(l: f64) -> tpshock_core::profiles::ShockProfile {
    solve_stationary_profile(&FluxModel::Burgers, &[1.0], &[-1.0], &GridSpec::new(l, 0.05)).unwrap()
}

fn heat_error(dx: f64) -> f64 {
    let grid = GridSpec::new(20.0, dx).with_dt(0.4 * dx);
    let zero = FluxModel::Linear { a: vec![vec![0.0]] };
    let u0 = Field::from_fn(1, &grid, |x, _| (-x * x).exp());
    let traj = evolve_nonlinear(&zero, &u0, 1.0, &grid, 0.0).unwrap();
    let u = traj.fields.last().unwrap();
    let exact = |x: f64| (-x * x / 5.0).exp() / 5f64.sqrt();
    (0..grid.nx()).map(|i| (u.values[i] - exact(grid.x(i))).abs()).fold(0.0, f64::max) / exact(0.0)
}

#[test]
fn constant_state_is_a_fixed_point() {
    let grid = GridSpec::new(10.0, 0.05);
    let u0 = Field::from_fn(1, &grid, |_, _| 1.0);
    let traj = evolve_nonlinear(&FluxModel::Burgers, &u0, 2.0, &grid, 0.5).unwrap();
    for f in &traj.fields {
        assert!(f.values.iter().all(|&v| (v - 1.0).abs() < 1e-14));
    }
    assert_eq!(traj.times, vec![0.0, 0.5, 1.0, 1.5, 2.0]);
}

#[test]
fn heat_kernel_oracle_and_second_order() {
    let coarse = heat_error(0.1);
    let fine = heat_error(0.05);
    assert!(fine < 1e-3, "relative error {fine}");
    let order = (coarse / fine).log2();
    assert!(order > 1.8, "observed order {order}");
}

#[test]
fn burgers_profile_is_discretely_stationary() {
    let p = burgers_profile(40.0);
    let traj = evolve_nonlinear(&FluxModel::Burgers, &p.values, 1.0, &p.grid, 0.0).unwrap();
    let drift = traj.fields.last().unwrap().sub(&p.values).sup_norm();
    assert!(drift < 1e-6, "drift {drift}");
}

#[test]
fn translation_mode_is_steady_for_the_linearization() {
    let p = burgers_profile(40.0);
    let coeffs = PeriodicCoefficientField::stationary(&p).unwrap();
    let w = p.translation_mode();
    let corr = {
        let a: f64 = w.values.iter().zip(&p.ux.values).map(|(a, b)| a * b).sum();
        let b: f64 = w.values.iter().map(|a| a * a).sum::<f64>().sqrt();
        let c: f64 = p.ux.values.iter().map(|a| a * a).sum::<f64>().sqrt();
        a / (b * c)
    };
    assert!(corr > 0.9999, "correlation with u_x: {corr}");
    let v = evolve_linearized(&coeffs, &w, 0.0, 1.0, &p.grid).unwrap();
    assert!(v.sub(&w).sup_norm() < 1e-6 * w.sup_norm());
}

#[test]
fn zero_data_stays_zero() {
    let p = burgers_profile(20.0);
    let coeffs = PeriodicCoefficientField::stationary(&p).unwrap();
    let z = Field::zeros(1, p.grid.nx());
    assert_eq!(evolve_linearized(&coeffs, &z, 0.0, 1.0, &p.grid).unwrap(), z);
    assert_eq!(adjoint_evolve(&coeffs, &z, 1.0, 1.0, &p.grid).unwrap(), z);
}

#[test]
fn constant_coefficient_advection_diffusion_oracle() {
    let grid = GridSpec::new(20.0, 0.05);
    let a = 1.0;
    let coeffs = PeriodicCoefficientField::constant(&grid, DMatrix::from_element(1, 1, a), 0.0).unwrap();
    let v0 = Field::from_fn(1, &grid, |x, _| (-x * x).exp());
    let t = 2.0;
    let v = evolve_linearized(&coeffs, &v0, 0.0, t, &grid).unwrap();
    let s = 1.0 + 4.0 * t;
    let err = (0..grid.nx())
        .map(|i| {
            let x = grid.x(i);
            (v.values[i] - (-(x - a * t).powi(2) / s).exp() / s.sqrt()).abs()
        })
        .fold(0.0, f64::max);
    assert!(err / (1.0 / s.sqrt()) < 1e-3, "relative error {err}");
}

#[test]
fn mass_is_conserved_for_interior_data() {
    let p = burgers_profile(40.0);
    let coeffs = PeriodicCoefficientField::stationary(&p).unwrap();
    let v0 = Field::from_fn(1, &p.grid, |x, _| (-(x + 3.0).powi(2)).exp());
    let v = evolve_linearized(&coeffs, &v0, 0.0, 5.0, &p.grid).unwrap();
    let (m0, m1) = (mass(&v0, &p.grid)[0], mass(&v, &p.grid)[0]);
    assert!((m1 - m0).abs() < 1e-8, "mass change {}", m1 - m0);

    let u0 = p.values.clone();
    let mut pert = u0.clone();
    pert.axpy(0.05, &v0);
    let mut masses = Vec::new();
    evolve_nonlinear_with(&FluxModel::Burgers, &pert, 0.0, 5.0, &p.grid, None, |_, u| {
        masses.push(u.iter().sum::<f64>() * p.grid.dx);
    })
    .unwrap();
    let spread = masses.iter().fold(0.0_f64, |m, x| m.max((x - masses[0]).abs()));
    assert!(spread < 1e-8, "nonlinear mass spread {spread}");
}

#[test]
fn periodic_coefficients_give_periodic_evolution() {
    let p = burgers_profile(20.0);
    let m = Manufactured { eps: 0.1, envelope_width: 2.0, period: 2.0 * std::f64::consts::PI };
    let coeffs = PeriodicCoefficientField::manufactured(&p, &m, None).unwrap();
    let v0 = Field::from_fn(1, &p.grid, |x, _| (-(x - 1.0).powi(2)).exp());
    let t = m.period;
    let a = evolve_linearized(&coeffs, &v0, 0.3, 0.3 + t, &p.grid).unwrap();
    let b = evolve_linearized(&coeffs, &v0, 0.3 + t, 0.3 + 2.0 * t, &p.grid).unwrap();
    assert!(a.sub(&b).sup_norm() < 1e-12 * a.sup_norm());
}

#[test]
fn adjoint_preserves_constants_in_the_interior() {
    let p = burgers_profile(40.0);
    let coeffs = PeriodicCoefficientField::stationary(&p).unwrap();
    let w0 = Field::from_fn(1, &p.grid, |_, _| 1.0);
    let w = adjoint_evolve(&coeffs, &w0, 0.0, 2.0, &p.grid).unwrap();
    let err = (0..p.grid.nx())
        .filter(|&i| p.grid.x(i).abs() <= 20.0)
        .map(|i| (w.values[i] - 1.0).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-8, "interior deviation {err}");
}

#[test]
fn discrete_duality_with_periodic_coefficients() {
    let p = burgers_profile(20.0);
    let m = Manufactured { eps: 0.1, envelope_width: 2.0, period: 2.0 * std::f64::consts::PI };
    let coeffs = PeriodicCoefficientField::manufactured(&p, &m, None).unwrap();
    let v0 = Field::from_fn(1, &p.grid, |x, _| (-(x - 1.0).powi(2)).exp());
    let w0 = Field::from_fn(1, &p.grid, |x, _| (x / 3.0).tanh() + 0.5 * (-(x * x)).exp());
    let t = 3.0;
    let v = evolve_linearized(&coeffs, &v0, 0.0, t, &p.grid).unwrap();
    let w = adjoint_evolve(&coeffs, &w0, t, t, &p.grid).unwrap();
    let lhs = pairing(&w0, &v, &p.grid);
    let rhs = pairing(&w, &v0, &p.grid);
    assert!((lhs - rhs).abs() < 1e-6 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
}

#[test]
fn periodic_boundary_conserves_mass_exactly() {
    let grid = GridSpec::new(10.0, 0.05).with_boundary(Boundary::Periodic);
    let coeffs = PeriodicCoefficientField::constant(&grid, DMatrix::from_element(1, 1, 0.7), 0.0).unwrap();
    let v0 = Field::from_fn(1, &grid, |x, _| (-(x * x)).exp() * (1.0 + 0.3 * x));
    let v = evolve_linearized(&coeffs, &v0, 0.0, 30.0, &grid).unwrap();
    let sum = |f: &Field| f.values[..grid.nx() - 1].iter().sum::<f64>();
    assert!((sum(&v) - sum(&v0)).abs() < 1e-10);
    assert_eq!(v.values[0], v.values[grid.nx() - 1]);
    // Periodic duality as well.
    let w0 = Field::from_fn(1, &grid, |x, _| (std::f64::consts::PI * x / 10.0).sin());
    let vt = evolve_linearized(&coeffs, &v0, 0.0, 2.0, &grid).unwrap();
    let w = adjoint_evolve(&coeffs, &w0, 2.0, 2.0, &grid).unwrap();
    assert!((pairing(&w0, &vt, &grid) - pairing(&w, &v0, &grid)).abs() < 1e-12);
}

#[test]
fn damped_operator_decays_mass_exponentially() {
    let grid = GridSpec::new(20.0, 0.05);
    let coeffs = PeriodicCoefficientField::constant(&grid, DMatrix::from_element(1, 1, 0.0), 1.0).unwrap();
    let v0 = Field::from_fn(1, &grid, |x, _| (-(x * x)).exp());
    let v = evolve_linearized(&coeffs, &v0, 0.0, 1.0, &grid).unwrap();
    let ratio = mass(&v, &grid)[0] / mass(&v0, &grid)[0];
    assert!((ratio - (-1.0f64).exp()).abs() < 1e-4, "{ratio}");
}

#[test]
fn weighted_norm_converges() {
    let g = |dx: f64| {
        let grid = GridSpec::new(12.0, dx);
        let v = Field::from_fn(1, &grid, |x, _| (-x * x).exp());
        weighted_sobolev_norm(&v, &grid, 3, 0.75)
    };
    let coarse = g(0.05);
    let reference = g(0.00625);
    assert!(((coarse - reference) / reference).abs() < 1e-4, "{coarse} vs {reference}");
    let grid = GridSpec::new(5.0, 0.05);
    let z = Field::zeros(1, grid.nx());
    assert_eq!(weighted_sobolev_norm(&z, &grid, 3, 0.75), 0.0);
    assert_eq!(mass(&z, &grid), vec![0.0]);
}

#[test]
fn failures_are_reported() {
    let grid = GridSpec::new(5.0, 0.05).with_dt(0.2);
    let u0 = Field::from_fn(1, &grid, |_, _| 1.0);
    assert!(matches!(evolve_nonlinear(&FluxModel::Burgers, &u0, 1.0, &grid, 0.0), Err(Error::CflViolation(_))));
    let grid = GridSpec::new(5.0, 0.05);
    let big = Field::from_fn(1, &grid, |x, _| 1e9 * (-x * x).exp());
    let zero = FluxModel::Linear { a: vec![vec![0.0]] };
    assert!(matches!(evolve_nonlinear(&zero, &big, 1.0, &grid, 0.0), Err(Error::BlowUp { .. })));
    assert!(GridSpec::new(5.0, 0.3).validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn linearized_evolution_is_linear(alpha in -2.0f64..2.0, beta in -2.0f64..2.0,
                                      c1 in -3.0f64..3.0, c2 in -3.0f64..3.0, eps in 0.0f64..0.2) {
        let p = solve_stationary_profile(&FluxModel::Burgers, &[1.0], &[-1.0], &GridSpec::new(20.0, 0.05)).unwrap();
        let m = Manufactured { eps, envelope_width: 2.0, period: 2.0 * std::f64::consts::PI };
        let coeffs = PeriodicCoefficientField::manufactured(&p, &m, None).unwrap();
        let v1 = Field::from_fn(1, &p.grid, |x, _| (-(x - c1).powi(2)).exp());
        let v2 = Field::from_fn(1, &p.grid, |x, _| x * (-(x - c2).powi(2)).exp());
        let mut comb = v1.scaled(alpha);
        comb.axpy(beta, &v2);
        let lhs = evolve_linearized(&coeffs, &comb, 0.0, 0.5, &p.grid).unwrap();
        let mut rhs = evolve_linearized(&coeffs, &v1, 0.0, 0.5, &p.grid).unwrap().scaled(alpha);
        rhs.axpy(beta, &evolve_linearized(&coeffs, &v2, 0.0, 0.5, &p.grid).unwrap());
        prop_assert!(lhs.sub(&rhs).sup_norm() < 1e-13);
    }

    #[test]
    fn duality_holds_for_random_data(c1 in -4.0f64..4.0, c2 in -4.0f64..4.0, s in 0.0f64..6.0) {
        let p = solve_stationary_profile(&FluxModel::Burgers, &[1.0], &[-1.0], &GridSpec::new(20.0, 0.05)).unwrap();
        let m = Manufactured { eps: 0.1, envelope_width: 2.0, period: 2.0 * std::f64::consts::PI };
        let coeffs = PeriodicCoefficientField::manufactured(&p, &m, None).unwrap();
        let v0 = Field::from_fn(1, &p.grid, |x, _| (-(x - c1).powi(2)).exp());
        let w0 = Field::from_fn(1, &p.grid, |x, _| (-(x - c2).powi(2) / 4.0).exp());
        let v = evolve_linearized(&coeffs, &v0, s, s + 1.0, &p.grid).unwrap();
        let w = adjoint_evolve(&coeffs, &w0, s + 1.0, 1.0, &p.grid).unwrap();
        let a = pairing(&w0, &v, &p.grid);
        let b = pairing(&w, &v0, &p.grid);
        prop_assert!((a - b).abs() < 1e-12 * a.abs().max(1e-3));
    }
}

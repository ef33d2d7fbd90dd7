//! Nonlinear perturbation experiments: phase tracking, decay fits, the
//! nonlinear source terms of the perturbation equation and one application of
//! the modulation fixed-point map.
//!
//! Sign conventions follow from `u(x,t) = u(x - q* - q(t)) + v(x,t)`: the
//! perturbation obeys
//! `v_t - L v = (Q + R)_x + u_x(x - q*) q' - S`, with `Q`, `R`, `S` as
//! returned by [`nonlinear_terms`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flux::ShockCharacteristics;
use crate::greens::{decompose_green, greens_column, pi_functions, LCoefficients, TemplateBundle};
use crate::numerics::{loglog_slope, trapezoid};
use crate::pde::{
    evolve_linearized, evolve_linearized_with, evolve_nonlinear_with, mass, weighted_sobolev_norm, Field, Forcing,
    GridSpec, Trajectory,
};
use crate::profiles::{PeriodicCoefficientField, ShockProfile};

/// `amplitude * exp(-(x - center)^2 / width^2)` in every component.
pub fn gaussian_perturbation(grid: &GridSpec, n: usize, amplitude: f64, center: f64, width: f64) -> Field {
    Field::from_fn(n, grid, |x, _| amplitude * (-(x - center).powi(2) / (width * width)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Snapshot cadence.
    pub every: f64,
    /// Admissible weighted `H^3` size of the initial perturbation.
    pub delta: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { every: 0.5, delta: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSample {
    pub t: f64,
    /// Mass of `u - u_bar` per component.
    pub mass: Vec<f64>,
    pub sup: f64,
    pub weighted: f64,
}

#[derive(Debug, Clone)]
pub struct PerturbationRun {
    pub grid: GridSpec,
    pub base: Field,
    pub trajectory: Trajectory,
    pub samples: Vec<RunSample>,
}

/// Evolves `u_bar + v0` to `t_final`, sampling every `opts.every`.
pub fn run_perturbation(
    profile: &ShockProfile,
    v0: &Field,
    t_final: f64,
    grid: &GridSpec,
    opts: &RunOptions,
) -> Result<PerturbationRun> {
    let n = profile.n();
    if v0.n != n || v0.nx() != grid.nx() {
        return Err(Error::DimensionMismatch { expected: n * grid.nx(), found: v0.values.len() });
    }
    let size = weighted_sobolev_norm(v0, grid, 3, 0.75);
    if size > opts.delta {
        return Err(Error::InvalidParameter(format!(
            "weighted H3 norm {size:.3e} of the perturbation exceeds delta = {}",
            opts.delta
        )));
    }
    let base = profile.translated_on(0.0, grid);
    let mut u0 = base.clone();
    u0.axpy(1.0, v0);
    let sample = |t: f64, u: &Field| -> RunSample {
        let v = u.sub(&base);
        RunSample { t, mass: mass(&v, grid), sup: v.sup_norm(), weighted: weighted_sobolev_norm(&v, grid, 3, 0.75) }
    };
    let mut times = vec![0.0];
    let mut fields = vec![u0.clone()];
    let mut samples = vec![sample(0.0, &u0)];
    let mut next = opts.every;
    let last = evolve_nonlinear_with(&profile.model, &u0, 0.0, t_final, grid, None, |t, u| {
        if t >= next - 1e-9 && t < t_final - 1e-9 {
            let f = Field { n, values: u.to_vec() };
            samples.push(sample(t, &f));
            times.push(t);
            fields.push(f);
            while next <= t + 1e-9 {
                next += opts.every;
            }
        }
    })?;
    samples.push(sample(t_final, &last));
    times.push(t_final);
    fields.push(last);
    Ok(PerturbationRun { grid: *grid, base, trajectory: Trajectory { times, fields }, samples })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseOptions {
    /// Largest admissible `||u - u_bar(. - q)|| / ||u_bar_x||`.
    pub trust: f64,
    /// Fraction of the horizon averaged for `q*`.
    pub late_fraction: f64,
}

impl Default for PhaseOptions {
    fn default() -> Self {
        Self { trust: 0.5, late_fraction: 0.1 }
    }
}

/// Observed modulation `(q, tau)(t)` of a trajectory. `q` is the total
/// shift, so `q - q*` is the decaying part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTrack {
    pub times: Vec<f64>,
    pub q: Vec<f64>,
    /// Identically zero for standing profiles.
    pub tau: Vec<f64>,
    pub q_dot: Vec<f64>,
    pub tau_dot: Vec<f64>,
    pub q_star: f64,
    pub tau_star: f64,
    pub residuals: Vec<f64>,
}

impl PhaseTrack {
    /// `sup (1+t)^{1/2} |zeta - zeta*| + sup (1+t) |zeta'|`.
    pub fn b1_norm(&self) -> f64 {
        let a = self
            .times
            .iter()
            .zip(self.q.iter().zip(&self.tau))
            .map(|(t, (q, s))| (1.0 + t).sqrt() * (q - self.q_star).hypot(s - self.tau_star))
            .fold(0.0, f64::max);
        let b = self
            .times
            .iter()
            .zip(self.q_dot.iter().zip(&self.tau_dot))
            .map(|(t, (q, s))| (1.0 + t) * q.hypot(*s))
            .fold(0.0, f64::max);
        a + b
    }
}

fn l2(v: &[f64], dx: f64) -> f64 {
    (v.iter().map(|a| a * a).sum::<f64>() * dx).sqrt()
}

/// Least-squares shift `q` minimizing `||u - u_bar(. - q)||_2`, by
/// Gauss-Newton from `q0`. Returns `(q, relative residual)`.
pub fn fit_shift(profile: &ShockProfile, u: &Field, grid: &GridSpec, q0: f64) -> Result<(f64, f64)> {
    let scale = l2(&profile.ux.values, profile.grid.dx);
    let mut q = q0;
    for _ in 0..60 {
        let ub = profile.translated_on(q, grid);
        let jac = Field::from_fn(profile.n(), grid, |x, c| profile.eval_derivative(x - q)[c]);
        let r = u.sub(&ub);
        let num: f64 = r.values.iter().zip(&jac.values).map(|(a, b)| a * b).sum();
        let den: f64 = jac.values.iter().map(|a| a * a).sum();
        if !(den > 0.0) {
            return Err(Error::FitLost("profile derivative vanishes on the grid".into()));
        }
        let step = num / den;
        q -= step;
        if !q.is_finite() || q.abs() > 0.5 * grid.half_width {
            return Err(Error::FitLost(format!("shift left the domain (q = {q})")));
        }
        if step.abs() < 1e-14 * (1.0 + q.abs()) {
            break;
        }
    }
    let res = l2(&u.sub(&profile.translated_on(q, grid)).values, grid.dx) / scale;
    Ok((q, res))
}

/// Centered differences on a nonuniform grid followed by a 3-point average.
fn smoothed_derivative(ts: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = ts.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b) = if i == 0 {
                (0, 1)
            } else if i == n - 1 {
                (n - 2, n - 1)
            } else {
                (i - 1, i + 1)
            };
            (ys[b] - ys[a]) / (ts[b] - ts[a])
        })
        .collect();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            raw[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Fits the phase at every snapshot with a warm start from the previous
/// snapshot.
pub fn extract_phase(run: &PerturbationRun, profile: &ShockProfile, opts: &PhaseOptions) -> Result<PhaseTrack> {
    let traj = &run.trajectory;
    let grid = &run.grid;
    let jump = profile.chars.jump();
    let c = (0..jump.len())
        .max_by(|&a, &b| jump[a].abs().partial_cmp(&jump[b].abs()).expect("finite jump"))
        .unwrap_or(0);
    let mut q_prev = mass(&traj.fields[0].sub(&run.base), grid)[c] / -jump[c];
    let mut q = Vec::with_capacity(traj.times.len());
    let mut residuals = Vec::with_capacity(traj.times.len());
    for (t, u) in traj.times.iter().zip(&traj.fields) {
        let (qi, res) = fit_shift(profile, u, grid, q_prev)?;
        if res > opts.trust {
            return Err(Error::FitLost(format!("residual {res:.3e} at t = {t} exceeds trust {}", opts.trust)));
        }
        q.push(qi);
        residuals.push(res);
        q_prev = qi;
    }
    let t_end = *traj.times.last().unwrap_or(&0.0);
    let cut = (1.0 - opts.late_fraction) * t_end;
    let late: Vec<f64> = traj.times.iter().zip(&q).filter(|(t, _)| **t >= cut).map(|(_, v)| *v).collect();
    let q_star = late.iter().sum::<f64>() / late.len().max(1) as f64;
    let q_dot = smoothed_derivative(&traj.times, &q);
    let zeros = vec![0.0; q.len()];
    Ok(PhaseTrack {
        times: traj.times.clone(),
        q,
        tau: zeros.clone(),
        q_dot,
        tau_dot: zeros,
        q_star,
        tau_star: 0.0,
        residuals,
    })
}

/// Discrete `L^p` norm (`p = inf` allowed).
pub fn lp_norm(v: &Field, grid: &GridSpec, p: f64) -> f64 {
    if p.is_infinite() {
        return v.sup_norm();
    }
    let vals: Vec<f64> = (0..v.nx()).map(|i| v.at(i).iter().map(|a| a * a).sum::<f64>().sqrt().powf(p)).collect();
    trapezoid(&vals, grid.dx).powf(1.0 / p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormSeries {
    pub p: f64,
    pub values: Vec<f64>,
    pub slope: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub times: Vec<f64>,
    pub window: (f64, f64),
    pub norms: Vec<NormSeries>,
    /// `sup_x |v| / (theta_gauss + chi theta_inner + (1-chi) theta_outer)` per snapshot.
    pub pointwise: Vec<f64>,
    /// Largest entry of `pointwise`.
    pub pointwise_ratio: f64,
    /// `sup |v| / (theta_gauss + theta_inner + theta_outer)`.
    pub b2_norm: f64,
    pub q_error: Vec<f64>,
    pub q_slope: Option<f64>,
    pub q_dot_slope: Option<f64>,
}

/// Floor below which samples are excluded from log-log fits.
pub const FIT_FLOOR: f64 = 1e-13;

/// Decay of `v = u - u_bar(x - q(t))` along a tracked run.
pub fn decay_report(
    run: &PerturbationRun,
    phase: &PhaseTrack,
    profile: &ShockProfile,
    bundle: &TemplateBundle,
    p_list: &[f64],
    window: (f64, f64),
) -> Result<DecayReport> {
    let times = &run.trajectory.times;
    let t_end = *times.last().unwrap_or(&0.0);
    let in_window = times.iter().filter(|t| **t >= window.0 && **t <= window.1).count();
    if t_end < window.1 - 1e-9 || in_window < 3 {
        return Err(Error::InsufficientHorizon(format!(
            "run ends at {t_end} with {in_window} samples in [{}, {}]",
            window.0, window.1
        )));
    }
    let grid = &run.grid;
    let mut norms: Vec<NormSeries> =
        p_list.iter().map(|&p| NormSeries { p, values: Vec::with_capacity(times.len()), slope: None }).collect();
    let mut pointwise = Vec::with_capacity(times.len());
    let mut b2 = 0.0f64;
    for (m, (t, u)) in times.iter().zip(&run.trajectory.fields).enumerate() {
        let v = u.sub(&profile.translated_on(phase.q[m], grid));
        for s in norms.iter_mut() {
            s.values.push(lp_norm(&v, grid, s.p));
        }
        let mut ratio = 0.0f64;
        if *t > 0.0 {
            for i in 0..grid.nx() {
                let x = grid.x(i);
                let a = v.at(i).iter().fold(0.0f64, |m, z| m.max(z.abs()));
                ratio = ratio.max(a / bundle.pointwise(x, *t));
                b2 = b2.max(a / bundle.theta_sum(x, *t));
            }
        }
        pointwise.push(ratio);
    }
    for s in norms.iter_mut() {
        s.slope = loglog_slope(times, &s.values, window.0, window.1, FIT_FLOOR).map(|f| f.slope);
    }
    let q_error: Vec<f64> = phase.q.iter().map(|q| (q - phase.q_star).abs()).collect();
    let q_slope = loglog_slope(times, &q_error, window.0, window.1, FIT_FLOOR).map(|f| f.slope);
    let qd: Vec<f64> = phase.q_dot.iter().map(|v| v.abs()).collect();
    let q_dot_slope = loglog_slope(times, &qd, window.0, window.1, FIT_FLOOR).map(|f| f.slope);
    let pointwise_ratio = pointwise.iter().copied().fold(0.0, f64::max);
    Ok(DecayReport {
        times: times.clone(),
        window,
        norms,
        pointwise,
        pointwise_ratio,
        b2_norm: b2,
        q_error,
        q_slope,
        q_dot_slope,
    })
}

/// Source terms of the perturbation equation on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearTerms {
    /// `f(u^z) + f_u(u^z) v - f(u^z + v)`, `u^z = u_bar(x - q* - q)`.
    pub q: Field,
    /// `(f_u(u^{z*}) - f_u(u^z)) v`.
    pub r: Field,
    /// `(d_zeta u|_{z} - d_zeta u|_{z*}) zeta'` with `d_zeta u = -u_x(x - shift)`.
    pub s: Field,
}

fn profile_at(profile: &ShockProfile, grid: &GridSpec, shift: f64) -> Field {
    profile.translated_on(shift, grid)
}

fn profile_dx_at(profile: &ShockProfile, grid: &GridSpec, shift: f64) -> Field {
    Field::from_fn(profile.n(), grid, |x, c| profile.eval_derivative(x - shift)[c])
}

/// `Q`, `R`, `S` for modulation `zeta = q`, `zeta* = q*` and rate `q'`.
pub fn nonlinear_terms(
    profile: &ShockProfile,
    grid: &GridSpec,
    zeta: f64,
    zeta_star: f64,
    zeta_dot: f64,
    v: &Field,
) -> Result<NonlinearTerms> {
    let n = profile.n();
    if v.n != n || v.nx() != grid.nx() {
        return Err(Error::DimensionMismatch { expected: n * grid.nx(), found: v.values.len() });
    }
    let model = &profile.model;
    let uz = profile_at(profile, grid, zeta_star + zeta);
    let us = if zeta == 0.0 { uz.clone() } else { profile_at(profile, grid, zeta_star) };
    let mut q = Field::zeros(n, grid.nx());
    let mut r = Field::zeros(n, grid.nx());
    let mut jz = vec![0.0; n * n];
    let mut js = vec![0.0; n * n];
    for i in 0..grid.nx() {
        let (a, b, vi) = (uz.at(i), us.at(i), v.at(i));
        model.jacobian_into(a, &mut jz);
        model.jacobian_into(b, &mut js);
        // Every built-in flux is at most quadratic, so the Taylor remainder
        // is exactly -f_uu[v, v] / 2.
        let h = model.hessian_action(a, vi, vi);
        for row in 0..n {
            let dv: f64 = (0..n).map(|c| (js[row * n + c] - jz[row * n + c]) * vi[c]).sum();
            q.values[i * n + row] = -0.5 * h[row];
            r.values[i * n + row] = dv;
        }
    }
    let s = if zeta_dot == 0.0 || zeta == 0.0 {
        Field::zeros(n, grid.nx())
    } else {
        let dz = profile_dx_at(profile, grid, zeta_star + zeta);
        let ds = profile_dx_at(profile, grid, zeta_star);
        ds.sub(&dz).scaled(zeta_dot)
    };
    Ok(NonlinearTerms { q, r, s })
}

/// Euclidean norm without intermediate underflow.
fn euclid(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |acc: f64, x| acc.hypot(*x))
}

/// Denominators below this are skipped to stay clear of subnormal products.
pub const DENOM_FLOOR: f64 = 1e-200;

/// Smallest constants `c_Q, c_R, c_S` with `|Q| <= c|v|^2`,
/// `|R| <= c e^{-eta|x|} |zeta| |v|` and `|S| <= c e^{-eta|x|} |zeta'| |zeta|`
/// at the nodes where the right-hand sides exceed [`DENOM_FLOOR`].
pub fn nonlinear_bound_constants(
    terms: &NonlinearTerms,
    grid: &GridSpec,
    v: &Field,
    zeta: f64,
    zeta_dot: f64,
    eta: f64,
) -> (f64, f64, f64) {
    let mut c = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..grid.nx() {
        let x = grid.x(i);
        let vn = euclid(v.at(i));
        let norm = |f: &Field| euclid(f.at(i));
        let e = (-eta * x.abs()).exp();
        if vn * vn > DENOM_FLOOR {
            c.0 = c.0.max(norm(&terms.q) / (vn * vn));
        }
        if e * zeta.abs() * vn > DENOM_FLOOR {
            c.1 = c.1.max(norm(&terms.r) / (e * zeta.abs() * vn));
        }
        if e * zeta.abs() * zeta_dot.abs() > DENOM_FLOOR {
            c.2 = c.2.max(norm(&terms.s) / (e * zeta.abs() * zeta_dot.abs()));
        }
    }
    c
}

/// Source lattice and time table for the iteration map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationGrid {
    /// Sources sit on grid nodes with `|y| <= y_max`.
    pub y_max: f64,
    /// Lattice spacing in grid nodes.
    pub y_stride: usize,
    /// Table spacing in time steps of the grid.
    pub t_stride: usize,
    pub t_max: f64,
}

impl Default for IterationGrid {
    fn default() -> Self {
        Self { y_max: 15.0, y_stride: 1, t_stride: 5, t_max: 10.0 }
    }
}

/// Green's columns `S(t) phi_k e_c` for hat functions `phi_k` on a source
/// lattice, sampled on a uniform time table.
#[derive(Debug, Clone)]
pub struct IterationTables {
    pub profile: ShockProfile,
    pub chars: ShockCharacteristics,
    pub coeffs: PeriodicCoefficientField,
    pub grid: GridSpec,
    pub l: LCoefficients,
    pub q_ref: f64,
    pub nodes: Vec<usize>,
    pub ys: Vec<f64>,
    /// `int phi_k dx`.
    pub weights: Vec<f64>,
    pub times: Vec<f64>,
    pub dt_table: f64,
    /// `columns[k][c][m]` flattened: index `(k * n + c) * (M + 1) + m`.
    columns: Vec<Vec<f64>>,
    /// Discrete translation mode about `q_ref`, fixed by the linear stepper.
    pub ux: Field,
    spec: IterationGrid,
}

impl IterationTables {
    fn column(&self, k: usize, c: usize, m: usize) -> &[f64] {
        let n = self.profile.n();
        let len = n * self.grid.nx();
        let col = &self.columns[k * n + c];
        &col[m * len..(m + 1) * len]
    }

    pub fn spec(&self) -> IterationGrid {
        self.spec
    }
}

/// Fits `l_{1,in}` on both sides of the shock from long columns at
/// `y = -+ 5`.
pub fn fit_l_coefficients(profile: &ShockProfile, chars: &ShockCharacteristics) -> Result<LCoefficients> {
    let coeffs = PeriodicCoefficientField::stationary(profile)?;
    let grid = profile.grid;
    let n = profile.n();
    let times: Vec<f64> = (1..=40).map(|k| k as f64).collect();
    let mut l = LCoefficients::uniform(chars, &vec![0.0; n]);
    let y0 = 5.0f64.min(0.4 * grid.half_width);
    for &y in &[-y0, y0] {
        for c in 0..n {
            let col = greens_column(&coeffs, y, 0.0, &times, &grid, c, None)?;
            let d = decompose_green(&col, profile, chars, 25.0)?;
            let rows = if y <= 0.0 { &mut l.minus } else { &mut l.plus };
            for (m, v) in d.l1.iter().enumerate() {
                rows[m][c] = *v;
            }
        }
    }
    Ok(l)
}

/// Builds the column tables about `u_bar(x - q_ref)` (`q_ref = 0`).
pub fn build_iteration_tables(
    profile: &ShockProfile,
    chars: &ShockCharacteristics,
    l: Option<LCoefficients>,
    spec: &IterationGrid,
) -> Result<IterationTables> {
    let grid = profile.grid;
    let n = profile.n();
    if spec.y_stride == 0 || spec.t_stride == 0 || !(spec.t_max > 0.0) {
        return Err(Error::InvalidParameter("iteration lattice strides and horizon must be positive".into()));
    }
    if spec.y_max + spec.y_stride as f64 * grid.dx >= grid.half_width {
        return Err(Error::TableCoverageInsufficient(format!(
            "source lattice |y| <= {} reaches the boundary at {}",
            spec.y_max, grid.half_width
        )));
    }
    let l = match l {
        Some(l) => l,
        None => fit_l_coefficients(profile, chars)?,
    };
    let coeffs = PeriodicCoefficientField::stationary(profile)?;
    let dt_table = spec.t_stride as f64 * grid.dt;
    let m_max = (spec.t_max / dt_table).round() as usize;
    let times: Vec<f64> = (0..=m_max).map(|m| m as f64 * dt_table).collect();
    let ic = grid.center();
    let half = (spec.y_max / (grid.dx * spec.y_stride as f64)).floor() as usize;
    let nodes: Vec<usize> = (0..=2 * half).map(|k| ic + k * spec.y_stride - half * spec.y_stride).collect();
    let ys: Vec<f64> = nodes.iter().map(|&i| grid.x(i)).collect();
    let dy = spec.y_stride as f64 * grid.dx;
    let weights = vec![dy; nodes.len()];
    let jobs: Vec<(usize, usize)> = (0..nodes.len()).flat_map(|k| (0..n).map(move |c| (k, c))).collect();
    let columns: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(k, c)| -> Result<Vec<f64>> {
            let yk = ys[k];
            let mut v = Field::from_fn(n, &grid, |x, cc| {
                if cc == c {
                    (1.0 - (x - yk).abs() / dy).max(0.0)
                } else {
                    0.0
                }
            });
            let mut out = Vec::with_capacity(times.len() * v.values.len());
            out.extend_from_slice(&v.values);
            for m in 1..times.len() {
                v = evolve_linearized(&coeffs, &v, times[m - 1], times[m], &grid)?;
                out.extend_from_slice(&v.values);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let ux = profile.translation_mode();
    Ok(IterationTables {
        profile: profile.clone(),
        chars: chars.clone(),
        coeffs,
        grid,
        l,
        q_ref: 0.0,
        nodes,
        ys,
        weights,
        times,
        dt_table,
        columns,
        ux,
        spec: *spec,
    })
}

/// Modulation history `zeta(t)` on the table times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Modulation {
    pub times: Vec<f64>,
    pub q: Vec<f64>,
    pub q_dot: Vec<f64>,
}

impl Modulation {
    pub fn zero(times: &[f64]) -> Self {
        Self { times: times.to_vec(), q: vec![0.0; times.len()], q_dot: vec![0.0; times.len()] }
    }

    fn interp(&self, vals: &[f64], t: f64) -> f64 {
        let dt = self.times[1] - self.times[0];
        let pos = ((t - self.times[0]) / dt).clamp(0.0, (self.times.len() - 1) as f64);
        let m = (pos.floor() as usize).min(self.times.len() - 2);
        let th = pos - m as f64;
        vals[m] + th * (vals[m + 1] - vals[m])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResiduals {
    /// Space-time relative `L^2` distance between the table solution and the
    /// directly time-stepped perturbation.
    pub duhamel: f64,
    /// `max_t |zeta_new - zeta_prev| + |zeta*_new - zeta*_prev|`.
    pub fixed_point: f64,
    /// Bound on the `int_{t_max}^inf` tails dropped from `zeta` and `zeta*`.
    pub tail_estimate: f64,
    pub picard_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct IterationStep {
    pub v: Vec<Field>,
    pub v_direct: Vec<Field>,
    pub zeta: Modulation,
    pub zeta_star: f64,
    pub residuals: MapResiduals,
}

/// `-(pi(y, tau) - pi(y, inf)) . a` and `-pi_t(y, tau) . a` for a source
/// vector `a` at lattice point `y`.
fn pi_pair(chars: &ShockCharacteristics, l: &LCoefficients, y: f64, tau: f64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let p = pi_functions(chars, l, y, 0.0, tau)?;
    Ok((p.pi, p.dt, p.limit))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Samples `f` at the lattice nodes: `out[k]` is the N-vector at `nodes[k]`.
fn at_nodes(f: &Field, nodes: &[usize]) -> Vec<Vec<f64>> {
    nodes.iter().map(|&i| f.at(i).to_vec()).collect()
}

/// Relative size of `f` outside the source lattice.
fn uncovered(f: &Field, grid: &GridSpec, y_lo: f64, y_hi: f64) -> f64 {
    let sup = f.sup_norm();
    if sup == 0.0 {
        return 0.0;
    }
    let out = (0..grid.nx())
        .filter(|&i| grid.x(i) < y_lo || grid.x(i) > y_hi)
        .map(|i| f.at(i).iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .fold(0.0, f64::max);
    out / sup
}

/// Largest relative mass of a source outside the lattice.
pub const COVERAGE_TOL: f64 = 1e-5;

fn d_dx(f: &Field, grid: &GridSpec) -> Field {
    let n = f.n;
    let nx = f.nx();
    let mut out = Field::zeros(n, nx);
    for i in 1..nx - 1 {
        for c in 0..n {
            out.values[i * n + c] = (f.values[(i + 1) * n + c] - f.values[(i - 1) * n + c]) / (2.0 * grid.dx);
        }
    }
    out
}

/// One application of the modulation map `(zeta, zeta*) -> (zeta_new,
/// zeta*_new)` with initial perturbation `v0 = u0 - u_bar(x - zeta*_prev)`.
/// The perturbation `v_new` solves its implicit integral equation by Picard
/// iteration.
pub fn apply_iteration_map(
    tables: &IterationTables,
    v0: &Field,
    zeta_prev: &Modulation,
    zeta_star_prev: f64,
    v_guess: Option<&[Field]>,
) -> Result<IterationStep> {
    let grid = tables.grid;
    let n = tables.profile.n();
    let mt = tables.times.len();
    if zeta_prev.times.len() != mt || zeta_prev.times.iter().zip(&tables.times).any(|(a, b)| (a - b).abs() > 1e-9) {
        return Err(Error::TableCoverageInsufficient("modulation history is not on the table times".into()));
    }
    if (zeta_star_prev - tables.q_ref).abs() > 0.5 * grid.dx {
        return Err(Error::TableCoverageInsufficient(format!(
            "zeta* = {zeta_star_prev} is more than dx/2 from the table reference {}",
            tables.q_ref
        )));
    }
    let (y_lo, y_hi) = (tables.ys[0], *tables.ys.last().expect("nonempty lattice"));
    let miss = uncovered(v0, &grid, y_lo, y_hi);
    if miss > COVERAGE_TOL {
        return Err(Error::TableCoverageInsufficient(format!("initial data has {miss:.2e} of its size outside the lattice")));
    }
    let chars = &tables.chars;
    let l = &tables.l;
    let nk = tables.ys.len();
    let dtab = tables.dt_table;
    // pi(y_k, t_m), pi_t(y_k, t_m), pi(y_k, inf) per lattice node.
    let mut pi = vec![vec![Vec::new(); mt]; nk];
    let mut pit = vec![vec![Vec::new(); mt]; nk];
    let mut pinf = vec![Vec::new(); nk];
    for k in 0..nk {
        for m in 0..mt {
            let (a, b, c) = pi_pair(chars, l, tables.ys[k], tables.times[m])?;
            pi[k][m] = a;
            pit[k][m] = b;
            if m == 0 {
                pinf[k] = c;
            }
        }
    }
    // Modulation sources S_hat = -S on the grid per table time.
    let mut s_hat = Vec::with_capacity(mt);
    for m in 0..mt {
        let zero = Field::zeros(n, grid.nx());
        let t = nonlinear_terms(&tables.profile, &grid, zeta_prev.q[m], zeta_star_prev, zeta_prev.q_dot[m], &zero)?;
        s_hat.push(t.s.scaled(-1.0));
    }
    let v0n = at_nodes(v0, &tables.nodes);
    let w = &tables.weights;
    let len = n * grid.nx();

    // G~ applied to nodal coefficients: sum_k,c a_kc (col_kc(t_m) - u_x pi_c(y_k, t_m) w_k).
    let apply = |coef: &[Vec<f64>], m: usize, out: &mut [f64]| {
        let mut e1 = 0.0;
        for k in 0..nk {
            for c in 0..n {
                let a = coef[k][c];
                if a == 0.0 {
                    continue;
                }
                let col = tables.column(k, c, m);
                for (o, g) in out.iter_mut().zip(col) {
                    *o += a * g;
                }
                e1 += a * pi[k][m][c] * w[k];
            }
        }
        for (o, u) in out.iter_mut().zip(&tables.ux.values) {
            *o -= e1 * u;
        }
    };
    let v_lin: Vec<Vec<f64>> = (0..mt)
        .into_par_iter()
        .map(|m| {
            let mut out = vec![0.0; len];
            apply(&v0n, m, &mut out);
            out
        })
        .collect();

    let sigma_of = |v: &[Field]| -> Result<Vec<Field>> {
        (0..mt)
            .map(|m| {
                let t = nonlinear_terms(&tables.profile, &grid, zeta_prev.q[m], zeta_star_prev, 0.0, &v[m])?;
                let mut qr = t.q.clone();
                qr.axpy(1.0, &t.r);
                let mut s = d_dx(&qr, &grid);
                s.axpy(1.0, &s_hat[m]);
                Ok(s)
            })
            .collect()
    };
    let trap = |j: usize, m: usize| if j == 0 || j == m { 0.5 * dtab } else { dtab };

    let mut v: Vec<Field> = match v_guess {
        Some(g) if g.len() == mt => g.to_vec(),
        _ => v_lin.iter().map(|vals| Field { n, values: vals.clone() }).collect(),
    };
    let mut sigma = sigma_of(&v)?;
    let mut picard = 0;
    loop {
        picard += 1;
        let sig_nodes: Vec<Vec<Vec<f64>>> = sigma.iter().map(|f| at_nodes(f, &tables.nodes)).collect();
        let new: Vec<Field> = (0..mt)
            .into_par_iter()
            .map(|m| {
                let mut out = v_lin[m].clone();
                for j in 0..=m {
                    if m == 0 {
                        break;
                    }
                    let wgt = trap(j, m);
                    let coef: Vec<Vec<f64>> = sig_nodes[j].iter().map(|a| a.iter().map(|z| z * wgt).collect()).collect();
                    apply(&coef, m - j, &mut out);
                }
                Field { n, values: out }
            })
            .collect();
        let change = new.iter().zip(&v).map(|(a, b)| a.sub(b).sup_norm()).fold(0.0, f64::max);
        let scale = new.iter().map(|f| f.sup_norm()).fold(0.0, f64::max).max(1e-300);
        v = new;
        sigma = sigma_of(&v)?;
        if change <= 1e-12 * scale || picard >= 12 {
            break;
        }
    }
    for (m, s) in sigma.iter().enumerate() {
        let miss = uncovered(s, &grid, y_lo, y_hi);
        if miss > 1e-3 {
            return Err(Error::TableCoverageInsufficient(format!(
                "source at t = {} has {miss:.2e} of its size outside the lattice",
                tables.times[m]
            )));
        }
    }

    // Modulation update.
    let sig_nodes: Vec<Vec<Vec<f64>>> = sigma.iter().map(|f| at_nodes(f, &tables.nodes)).collect();
    let inf_mass = |coef: &[Vec<f64>]| -> f64 { (0..nk).map(|k| w[k] * dot(&pinf[k], &coef[k])).sum() };
    let sig_inf: Vec<f64> = sig_nodes.iter().map(|c| inf_mass(c)).collect();
    let mut q = vec![0.0; mt];
    let mut q_dot_sigma = vec![0.0; mt];
    for m in 0..mt {
        let mut acc = 0.0;
        for k in 0..nk {
            let d: Vec<f64> = pi[k][m].iter().zip(&pinf[k]).map(|(a, b)| a - b).collect();
            acc -= w[k] * dot(&d, &v0n[k]);
        }
        let mut qd = 0.0;
        for j in 0..m {
            let wgt = trap(j, m);
            for k in 0..nk {
                let d: Vec<f64> = pi[k][m - j].iter().zip(&pinf[k]).map(|(a, b)| a - b).collect();
                acc -= wgt * w[k] * dot(&d, &sig_nodes[j][k]);
                qd -= wgt * w[k] * dot(&pit[k][m - j], &sig_nodes[j][k]);
            }
        }
        if m > 0 {
            // s = t endpoint: pi(y, 0) = 0 contributes -pi_t(y, 0) . sigma(t).
            let wgt = trap(m, m);
            for k in 0..nk {
                qd -= wgt * w[k] * dot(&pit[k][0], &sig_nodes[m][k]);
            }
        }
        // Tail int_t^{t_max} pi(inf) sigma.
        for j in m..mt {
            if j == mt - 1 && m == mt - 1 {
                break;
            }
            let wgt = if j == m || j == mt - 1 { 0.5 * dtab } else { dtab };
            acc += wgt * sig_inf[j];
        }
        q[m] = acc;
        q_dot_sigma[m] = qd;
    }
    let total_sigma_inf: f64 = (0..mt).map(|j| trap(j, mt - 1) * sig_inf[j]).sum();
    let zeta_star = zeta_star_prev - inf_mass(&v0n) - total_sigma_inf;
    let q_dot_v0 = |t: f64| -> Result<f64> {
        let mut acc = 0.0;
        for k in 0..nk {
            let p = pi_functions(chars, l, tables.ys[k], 0.0, t)?;
            acc -= w[k] * dot(&p.dt, &v0n[k]);
        }
        Ok(acc)
    };
    let mut q_dot = Vec::with_capacity(mt);
    for m in 0..mt {
        q_dot.push(q_dot_v0(tables.times[m])? + q_dot_sigma[m]);
    }
    let zeta = Modulation { times: tables.times.clone(), q, q_dot };

    // Tail beyond t_max from the decay of int |sigma| dy.
    let sig_abs: Vec<f64> = sigma.iter().map(|f| f.values.iter().map(|a| a.abs()).sum::<f64>() * grid.dx).collect();
    let pinf_max = pinf.iter().flat_map(|p| p.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    let tail_estimate = if sig_abs.iter().all(|v| *v == 0.0) {
        0.0
    } else {
        let t_half = 0.5 * tables.spec.t_max;
        match loglog_slope(&tables.times, &sig_abs, t_half.max(dtab), tables.spec.t_max, 1e-300) {
            Some(f) if f.slope < -1.0 => {
                pinf_max * sig_abs[mt - 1] * tables.spec.t_max / (-f.slope - 1.0)
            }
            _ => f64::INFINITY,
        }
    };

    // Direct time stepping of the perturbation equation.
    let v_direct = direct_perturbation(tables, v0, &sigma, &zeta, &q_dot_v0)?;
    let num: f64 = v.iter().zip(&v_direct).map(|(a, b)| a.sub(b).values.iter().map(|z| z * z).sum::<f64>()).sum();
    let den: f64 = v_direct.iter().map(|b| b.values.iter().map(|z| z * z).sum::<f64>()).sum();
    let duhamel = if den > 0.0 { (num / den).sqrt() } else if num == 0.0 { 0.0 } else { f64::INFINITY };
    let fixed_point = zeta.q.iter().zip(&zeta_prev.q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        + (zeta_star - zeta_star_prev).abs();
    Ok(IterationStep {
        v,
        v_direct,
        zeta,
        zeta_star,
        residuals: MapResiduals { duhamel, fixed_point, tail_estimate, picard_iterations: picard },
    })
}

/// Time-steps `v_t - L v = sigma + u_x q'` from `v0`, with `sigma` linear in
/// time between table entries.
fn direct_perturbation(
    tables: &IterationTables,
    v0: &Field,
    sigma: &[Field],
    zeta: &Modulation,
    q_dot_v0: &(dyn Fn(f64) -> Result<f64> + Sync),
) -> Result<Vec<Field>> {
    let grid = tables.grid;
    let mt = tables.times.len();
    let q_dot_sigma: Vec<f64> = (0..mt).map(|m| zeta.q_dot[m] - q_dot_v0(tables.times[m]).unwrap_or(0.0)).collect();
    let forcing = |t: f64, out: &mut [f64]| {
        let pos = (t / tables.dt_table).clamp(0.0, (mt - 1) as f64);
        let m = (pos.floor() as usize).min(mt - 2);
        let th = pos - m as f64;
        let qd = q_dot_v0(t).unwrap_or(0.0) + zeta.interp(&q_dot_sigma, t);
        for (i, o) in out.iter_mut().enumerate() {
            *o = sigma[m].values[i] + th * (sigma[m + 1].values[i] - sigma[m].values[i]) + tables.ux.values[i] * qd;
        }
    };
    let f: &Forcing = &forcing;
    let mut out = vec![v0.clone()];
    let mut v = v0.clone();
    for m in 1..mt {
        v = evolve_linearized_with(&tables.coeffs, &v, tables.times[m - 1], tables.times[m], &grid, Some(f), |_, _| {})?;
        out.push(v.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self { max_iter: 10, tol: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub zeta_star: f64,
    pub zeta_initial: f64,
    pub zeta_final: f64,
    pub residuals: MapResiduals,
}

#[derive(Debug, Clone)]
pub struct FixedPointReport {
    pub history: Vec<IterationSummary>,
    pub last: IterationStep,
    pub converged: bool,
}

/// Iterates the map from `zeta = 0`, `zeta* = 0` for the initial state `u0`.
pub fn iterate_fixed_point(tables: &IterationTables, u0: &Field, opts: &FixedPointOptions) -> Result<FixedPointReport> {
    let grid = tables.grid;
    let mut zeta = Modulation::zero(&tables.times);
    let mut zeta_star = tables.q_ref;
    let mut history = Vec::new();
    let mut guess: Option<Vec<Field>> = None;
    let mut last = None;
    let mut converged = false;
    for _ in 0..opts.max_iter.max(1) {
        let v0 = u0.sub(&tables.profile.translated_on(zeta_star, &grid));
        let step = apply_iteration_map(tables, &v0, &zeta, zeta_star, guess.as_deref())?;
        history.push(IterationSummary {
            zeta_star: step.zeta_star,
            zeta_initial: step.zeta.q[0],
            zeta_final: *step.zeta.q.last().expect("nonempty table"),
            residuals: step.residuals.clone(),
        });
        let done = step.residuals.fixed_point < opts.tol;
        zeta = step.zeta.clone();
        zeta_star = step.zeta_star;
        guess = Some(step.v.clone());
        last = Some(step);
        if done {
            converged = true;
            break;
        }
    }
    Ok(FixedPointReport { history, last: last.expect("at least one iteration"), converged })
}

/// `u_bar` sampled on `grid`: convenience for building `u0 = u_bar + v0`.
pub fn perturbed_state(profile: &ShockProfile, grid: &GridSpec, v0: &Field) -> Field {
    let mut u = profile.translated_on(0.0, grid);
    u.axpy(1.0, v0);
    u
}

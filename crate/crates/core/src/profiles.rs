//! Stationary viscous shock profiles and time-periodic linearization
//! coefficients.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flux::{characteristic_data, FluxModel, ShockCharacteristics};
use crate::numerics::{fit_line, UniformSpline};
use crate::pde::{Field, GridSpec};

/// Endpoint tolerance `|u(+-L) - u_+-|`.
pub const TAIL_TOL: f64 = 1e-6;
/// Rankine-Hugoniot tolerance for standing shocks.
pub const RH_TOL: f64 = 1e-10;

/// A standing viscous shock sampled on a uniform grid.
///
/// The profile is the exact steady state of the flux-form scheme in
/// [`crate::pde`]: neighbouring nodes satisfy
/// `(u_{i+1} - u_i)/dx = (g(u_i) + g(u_{i+1}))/2`, `g(u) = f(u) - f(u_-)`.
#[derive(Debug, Clone)]
pub struct ShockProfile {
    pub model: FluxModel,
    pub grid: GridSpec,
    pub period: f64,
    pub u_minus: Vec<f64>,
    pub u_plus: Vec<f64>,
    pub chars: ShockCharacteristics,
    pub values: Field,
    /// `u - u_-` for x < 0 and `u - u_+` for x >= 0, at full relative precision.
    pub deviation: Field,
    /// `u_x = f(u) - f(u_-)`.
    pub ux: Field,
    pub tail_rate: f64,
    pub residual: f64,
    splines: Vec<UniformSpline>,
}

impl ShockProfile {
    pub fn n(&self) -> usize {
        self.u_minus.len()
    }

    /// `u_t`, identically zero for a standing profile.
    pub fn ut(&self) -> Field {
        Field::zeros(self.n(), self.grid.nx())
    }

    pub fn is_stationary(&self) -> bool {
        true
    }

    /// `u_xx = f_u(u) u_x`.
    pub fn uxx(&self) -> Field {
        let n = self.n();
        let nx = self.grid.nx();
        let mut out = Field::zeros(n, nx);
        let mut jac = vec![0.0; n * n];
        for i in 0..nx {
            self.model.jacobian_into(self.values.at(i), &mut jac);
            for r in 0..n {
                out.values[i * n + r] = (0..n).map(|c| jac[r * n + c] * self.ux.values[i * n + c]).sum();
            }
        }
        out
    }

    /// Kernel vector of the discrete steady linearized operator: the
    /// derivative of the discrete profile family along its translation
    /// parameter, scaled to match `u_x` at x = 0.
    pub fn translation_mode(&self) -> Field {
        let n = self.n();
        let nx = self.grid.nx();
        let ic = self.grid.center();
        let dx = self.grid.dx;
        let mut w = Field::zeros(n, nx);
        let jac_at = |i: usize| self.model.jacobian(self.values.at(i));
        // One linearized trapezoid step from node i to node j = i +- 1.
        let step = |wi: &DVector<f64>, i: usize, j: usize| -> DVector<f64> {
            let s = j as f64 - i as f64;
            let id = DMatrix::<f64>::identity(n, n);
            let lhs = &id - jac_at(j) * (s * 0.5 * dx);
            let rhs = (&id + jac_at(i) * (s * 0.5 * dx)) * wi;
            lhs.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(n))
        };
        if n == 1 {
            let mut cur = DVector::from_column_slice(self.ux.at(ic));
            w.values[ic] = cur[0];
            for i in ic + 1..nx {
                cur = step(&cur, i - 1, i);
                w.values[i] = cur[0];
            }
            cur = DVector::from_column_slice(self.ux.at(ic));
            for i in (0..ic).rev() {
                cur = step(&cur, i + 1, i);
                w.values[i] = cur[0];
            }
        } else {
            // March in the direction in which the profile itself was built,
            // starting from the linear tail, where the mode is proportional
            // to the deviation.
            let forward = self.chars.lax_index() == 1;
            let order: Vec<usize> = if forward { (0..nx).collect() } else { (0..nx).rev().collect() };
            let seed_end = order.len() / 4;
            for &i in &order[..=seed_end] {
                w.values[i * n..(i + 1) * n].copy_from_slice(self.deviation.at(i));
            }
            let mut cur = DVector::from_column_slice(self.deviation.at(order[seed_end]));
            for k in seed_end + 1..order.len() {
                cur = step(&cur, order[k - 1], order[k]);
                w.values[order[k] * n..(order[k] + 1) * n].copy_from_slice(cur.as_slice());
            }
            let num: f64 = w.at(ic).iter().zip(self.ux.at(ic)).map(|(a, b)| a * b).sum();
            let den: f64 = w.at(ic).iter().map(|a| a * a).sum();
            if den > 0.0 {
                w = w.scaled(num / den);
            }
        }
        w
    }

    /// Interpolated profile value at an arbitrary `x` (end states outside).
    pub fn eval(&self, x: f64) -> Vec<f64> {
        self.splines.iter().map(|s| s.eval(x)).collect()
    }

    /// Interpolated `u_x` at an arbitrary `x`.
    pub fn eval_derivative(&self, x: f64) -> Vec<f64> {
        self.splines.iter().map(|s| s.derivative(x)).collect()
    }

    /// The translate `u(x - q)` sampled on `grid`.
    pub fn translated_on(&self, q: f64, grid: &GridSpec) -> Field {
        let n = self.n();
        Field::from_fn(n, grid, |x, c| {
            let y = x - q;
            if y < -self.grid.half_width {
                self.u_minus[c]
            } else if y > self.grid.half_width {
                self.u_plus[c]
            } else {
                self.splines[c].eval(y)
            }
        })
    }

    pub fn translated(&self, q: f64) -> Field {
        self.translated_on(q, &self.grid)
    }

    /// `d/dq u(x - q) = -u_x(x - q)` sampled on the profile grid.
    pub fn translated_derivative(&self, q: f64) -> Field {
        let n = self.n();
        Field::from_fn(n, &self.grid, |x, c| -self.splines[c].derivative(x - q))
    }
}

/// Finds `u_+ != u_-` with `f(u_+) = f(u_-)` by Newton iteration from `guess`.
pub fn rankine_hugoniot_partner(model: &FluxModel, u_minus: &[f64], guess: &[f64]) -> Result<Vec<f64>> {
    let n = model.dim();
    if u_minus.len() != n || guess.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: guess.len() });
    }
    let target = DVector::from_vec(model.flux(u_minus));
    let mut u = DVector::from_column_slice(guess);
    for _ in 0..100 {
        let r = DVector::from_vec(model.flux(u.as_slice())) - &target;
        if r.norm() < 1e-15 * (1.0 + target.norm()) {
            break;
        }
        let du = model
            .jacobian(u.as_slice())
            .lu()
            .solve(&r)
            .ok_or_else(|| Error::NoConnection("singular Jacobian in Rankine-Hugoniot solve".into()))?;
        u -= du;
    }
    let r = (DVector::from_vec(model.flux(u.as_slice())) - &target).norm();
    if r > RH_TOL {
        return Err(Error::RHViolation(r));
    }
    if (&u - DVector::from_column_slice(u_minus)).norm() < 1e-6 {
        return Err(Error::NoConnection("Newton converged to the trivial partner u_+ = u_-".into()));
    }
    Ok(u.as_slice().to_vec())
}

/// Solves `d' - s (dx/2) g(d') = d + s (dx/2) g(d)` with `g(d) = f(b+d) - f(b)`.
fn trapezoid_step(model: &FluxModel, base: &[f64], d: &[f64], s: f64, dx: f64) -> Result<Vec<f64>> {
    let n = d.len();
    let g0 = model.flux_increment(base, d);
    let rhs: Vec<f64> = (0..n).map(|c| d[c] + s * 0.5 * dx * g0[c]).collect();
    let mut x = rhs.clone();
    let mut jac = vec![0.0; n * n];
    for _ in 0..60 {
        let g = model.flux_increment(base, &x);
        let res: Vec<f64> = (0..n).map(|c| x[c] - s * 0.5 * dx * g[c] - rhs[c]).collect();
        let u: Vec<f64> = (0..n).map(|c| base[c] + x[c]).collect();
        model.jacobian_into(&u, &mut jac);
        let mut m = DMatrix::<f64>::identity(n, n);
        for r in 0..n {
            for c in 0..n {
                m[(r, c)] -= s * 0.5 * dx * jac[r * n + c];
            }
        }
        let delta = m
            .lu()
            .solve(&DVector::from_vec(res))
            .ok_or_else(|| Error::NoConnection("singular trapezoid step".into()))?;
        let scale = x.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        for c in 0..n {
            x[c] -= delta[c];
        }
        if delta.amax() <= 1e-15 * scale || delta.amax() == 0.0 {
            break;
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NoConnection("profile march diverged".into()));
    }
    Ok(x)
}

struct March {
    /// Deviation per node and whether it is measured from `u_+`.
    dev: Vec<Vec<f64>>,
    from_plus: Vec<bool>,
}

fn to_state(m: &March, i: usize, um: &[f64], up: &[f64]) -> Vec<f64> {
    let base = if m.from_plus[i] { up } else { um };
    base.iter().zip(&m.dev[i]).map(|(b, d)| b + d).collect()
}

/// Marches from a seeded node across the whole grid. `dir = +1` seeds on the
/// left in the unstable direction of `u_-`, `dir = -1` seeds on the right in
/// the stable direction of `u_+`.
fn march_from_tail(
    model: &FluxModel,
    um: &[f64],
    up: &[f64],
    seed: usize,
    eps: f64,
    r: &[f64],
    lambda: f64,
    dir: i32,
    nx: usize,
    dx: f64,
) -> Result<March> {
    let n = um.len();
    let mut dev = vec![vec![0.0; n]; nx];
    let mut from_plus = vec![dir < 0; nx];
    let s = dir as f64;
    // Linear tail beyond the seed.
    let rho = (1.0 + s * lambda * dx / 2.0) / (1.0 - s * lambda * dx / 2.0);
    let tail_nodes: Vec<usize> = if dir > 0 { (0..=seed).collect() } else { (seed..nx).collect() };
    for &i in &tail_nodes {
        let steps = (i as f64 - seed as f64) * s;
        let amp = eps * rho.powf(steps);
        dev[i] = r.iter().map(|x| amp * x).collect();
    }
    let order: Vec<usize> = if dir > 0 { (seed + 1..nx).collect() } else { (0..seed).rev().collect() };
    let mut prev = seed;
    let mut on_plus = dir < 0;
    for i in order {
        let base = if on_plus { up } else { um };
        let next = trapezoid_step(model, base, &dev[prev], s, dx)?;
        dev[i] = next;
        from_plus[i] = on_plus;
        // Re-base once the state is closer to the far endstate.
        let u: Vec<f64> = base.iter().zip(&dev[i]).map(|(b, d)| b + d).collect();
        let dist = |e: &[f64]| e.iter().zip(&u).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let (near, far) = if on_plus { (up, um) } else { (um, up) };
        if dist(far) < dist(near) {
            on_plus = !on_plus;
            let nb = if on_plus { up } else { um };
            dev[i] = u.iter().zip(nb).map(|(a, b)| a - b).collect();
            from_plus[i] = on_plus;
        }
        if dev[i].iter().any(|v| v.abs() > 1e6) {
            return Err(Error::NoConnection("profile march left the neighbourhood of the shock".into()));
        }
        prev = i;
    }
    Ok(March { dev, from_plus })
}

/// Builds the standing profile connecting `u_-` to `u_+` on `grid`.
pub fn solve_stationary_profile(
    model: &FluxModel,
    u_minus: &[f64],
    u_plus: &[f64],
    grid: &GridSpec,
) -> Result<ShockProfile> {
    grid.validate()?;
    let n = model.dim();
    if u_minus.len() != n || u_plus.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: u_plus.len() });
    }
    let jump: Vec<f64> = u_plus.iter().zip(u_minus).map(|(p, m)| p - m).collect();
    let rh: f64 = model
        .flux(u_plus)
        .iter()
        .zip(model.flux(u_minus))
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    if jump.iter().all(|j| j.abs() < 1e-12) {
        return Err(Error::RHViolation(rh));
    }
    if rh > RH_TOL {
        return Err(Error::RHViolation(rh));
    }
    let chars = characteristic_data(model, u_minus, u_plus)?;
    let nx = grid.nx();
    let dx = grid.dx;
    let ic = grid.center();
    let mid: Vec<f64> = u_minus.iter().zip(u_plus).map(|(a, b)| 0.5 * (a + b)).collect();

    let march = if n == 1 {
        let mut dev = vec![vec![0.0; 1]; nx];
        let mut from_plus = vec![false; nx];
        dev[ic] = vec![mid[0] - u_plus[0]];
        from_plus[ic] = true;
        for i in ic + 1..nx {
            dev[i] = trapezoid_step(model, u_plus, &dev[i - 1], 1.0, dx)?;
            from_plus[i] = true;
        }
        let mut d = vec![mid[0] - u_minus[0]];
        for i in (0..ic).rev() {
            d = trapezoid_step(model, u_minus, &d, -1.0, dx)?;
            dev[i] = d.clone();
        }
        March { dev, from_plus }
    } else {
        let p = chars.lax_index();
        let (dir, side) = if p == 1 {
            (1, &chars.minus)
        } else if p == n {
            (-1, &chars.plus)
        } else {
            return Err(Error::NoConnection(format!(
                "Lax index {p} has no one-dimensional connecting manifold"
            )));
        };
        let j = side.incoming().next().ok_or(Error::RankDeficiency)?;
        let lambda = side.speeds[j];
        let mut r: Vec<f64> = side.right[j].iter().copied().collect();
        // Pick the branch heading toward the other endstate.
        let l = &side.left[j];
        let toward: f64 = l.iter().zip(&jump).map(|(a, b)| a * b).sum::<f64>() * dir as f64;
        if toward < 0.0 {
            r.iter_mut().for_each(|x| *x = -*x);
        }
        let dist = (18.0 / lambda.abs()).min(0.5 * grid.half_width);
        let seed = if dir > 0 { grid.index_of(-dist) } else { grid.index_of(dist) };
        // Component carrying the largest jump is used for centering.
        let cc = (0..n)
            .max_by(|&a, &b| jump[a].abs().partial_cmp(&jump[b].abs()).expect("finite"))
            .expect("n > 0");
        let center_offset = |log_eps: f64| -> Result<f64> {
            let m = march_from_tail(model, u_minus, u_plus, seed, log_eps.exp(), &r, lambda, dir, nx, dx)?;
            let u = to_state(&m, ic, u_minus, u_plus);
            Ok((u[cc] - mid[cc]) * jump[cc].signum())
        };
        let (mut lo, mut hi) = ((1e-14_f64).ln(), (0.25 * jump.iter().map(|x| x * x).sum::<f64>().sqrt()).ln());
        let mut flo = center_offset(lo)?;
        let fhi = center_offset(hi)?;
        if flo.signum() == fhi.signum() {
            return Err(Error::NoConnection("could not bracket the centered profile".into()));
        }
        for _ in 0..200 {
            let m = 0.5 * (lo + hi);
            let fm = center_offset(m)?;
            if fm == 0.0 {
                lo = m;
                hi = m;
                break;
            }
            if fm.signum() == flo.signum() {
                lo = m;
                flo = fm;
            } else {
                hi = m;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        march_from_tail(model, u_minus, u_plus, seed, (0.5 * (lo + hi)).exp(), &r, lambda, dir, nx, dx)?
    };

    // Express deviations relative to the endstate on the same side of x = 0.
    let mut values = Field::zeros(n, nx);
    let mut deviation = Field::zeros(n, nx);
    for i in 0..nx {
        let want_plus = i >= ic;
        let d: Vec<f64> = if march.from_plus[i] == want_plus {
            march.dev[i].clone()
        } else {
            let u = to_state(&march, i, u_minus, u_plus);
            let base = if want_plus { u_plus } else { u_minus };
            u.iter().zip(base).map(|(a, b)| a - b).collect()
        };
        let base = if want_plus { u_plus } else { u_minus };
        for c in 0..n {
            deviation.values[i * n + c] = d[c];
            values.values[i * n + c] = base[c] + d[c];
        }
    }
    for (end, target) in [(0, u_minus), (nx - 1, u_plus)] {
        let miss = (0..n).map(|c| (values.values[end * n + c] - target[c]).abs()).fold(0.0, f64::max);
        if miss > TAIL_TOL || !miss.is_finite() {
            return Err(Error::NoConnection(format!("|u(+-L) - u_+-| = {miss:e} exceeds {TAIL_TOL:e}")));
        }
    }
    // u_x = g(u), evaluated from the deviation for precision.
    let mut ux = Field::zeros(n, nx);
    for i in 0..nx {
        let base = if i >= ic { u_plus } else { u_minus };
        let g = model.flux_increment(base, deviation.at(i));
        ux.values[i * n..(i + 1) * n].copy_from_slice(&g);
    }
    let mut residual = 0.0_f64;
    for i in 0..nx - 1 {
        for c in 0..n {
            let du = if (i >= ic) == (i + 1 >= ic) {
                deviation.values[(i + 1) * n + c] - deviation.values[i * n + c]
            } else {
                values.values[(i + 1) * n + c] - values.values[i * n + c]
            };
            let r = du / dx - 0.5 * (ux.values[i * n + c] + ux.values[(i + 1) * n + c]);
            residual = residual.max(r.abs());
        }
    }
    let splines = (0..n).map(|c| UniformSpline::new(-grid.half_width, dx, values.component(c))).collect();
    let mut profile = ShockProfile {
        model: model.clone(),
        grid: *grid,
        period: 2.0 * std::f64::consts::PI,
        u_minus: u_minus.to_vec(),
        u_plus: u_plus.to_vec(),
        chars,
        values,
        deviation,
        ux,
        tail_rate: f64::NAN,
        residual,
        splines,
    };
    profile.tail_rate = profile_tail_rate(&profile)?;
    Ok(profile)
}

/// Exponential tail rate: least-squares slope of `log|u - u_+-|` over the
/// outer quarter of each half-domain; the smaller of the two rates.
pub fn profile_tail_rate(profile: &ShockProfile) -> Result<f64> {
    let grid = &profile.grid;
    let n = profile.n();
    let nx = grid.nx();
    let l = grid.half_width;
    let mut rates = Vec::new();
    for side in [-1.0, 1.0] {
        let (xs, ys): (Vec<f64>, Vec<f64>) = (0..nx)
            .filter(|&i| {
                let x = grid.x(i) * side;
                x >= 0.75 * l && x <= l
            })
            .filter_map(|i| {
                let d = (0..n).map(|c| profile.deviation.values[i * n + c].powi(2)).sum::<f64>().sqrt();
                (d > 1e-280).then(|| (grid.x(i) * side, d.ln()))
            })
            .unzip();
        if xs.len() < 4 {
            return Err(Error::TailNotResolved(format!(
                "only {} resolvable tail samples on the {} side",
                xs.len(),
                if side < 0.0 { "left" } else { "right" }
            )));
        }
        let fit = fit_line(&xs, &ys).ok_or_else(|| Error::TailNotResolved("degenerate tail fit".into()))?;
        if fit.rms_residual > 0.05 * (fit.slope.abs() * 0.25 * l).max(1e-3) || fit.slope >= 0.0 {
            return Err(Error::TailNotResolved(format!(
                "tail fit slope {:.4} with rms residual {:.3e}",
                fit.slope, fit.rms_residual
            )));
        }
        rates.push(-fit.slope);
    }
    Ok(rates.into_iter().fold(f64::INFINITY, f64::min))
}

/// The built-in 2x2 Lax model: `f_1 = u_1^2/2 + u_2^2/10`,
/// `f_2 = -u_2 + u_1 u_2 / 10`, with its standing shock from `u_- = (1, 0.2)`.
pub fn default_quadratic_model() -> FluxModel {
    FluxModel::Quadratic2 {
        a: [[0.0, 0.0], [0.0, -1.0]],
        q1: [[1.0, 0.0], [0.0, 0.2]],
        q2: [[0.0, 0.1], [0.1, 0.0]],
    }
}

/// Endstates of the built-in 2x2 standing shock.
pub fn default_quadratic_endstates() -> Result<(Vec<f64>, Vec<f64>)> {
    let model = default_quadratic_model();
    let um = vec![1.0, 0.2];
    let up = rankine_hugoniot_partner(&model, &um, &[-1.0, 0.2])?;
    Ok((um, up))
}

/// Matrix-valued `A(x, t)` with period `T`, held through its temporal Fourier
/// modes `A(x,t) = sum_k f_k(x) e^{i k 2 pi t / T}`, together with the modes of
/// `A_x`. An optional damping `c` adds `-c v` to the linearized operator.
#[derive(Debug, Clone)]
pub struct PeriodicCoefficientField {
    pub n: usize,
    pub nx: usize,
    pub x0: f64,
    pub dx: f64,
    pub period: f64,
    pub damping: f64,
    pub kmax: usize,
    /// `modes[k + kmax]`, node-major row-major matrices (length nx*n*n).
    modes: Vec<Vec<Complex64>>,
    dmodes: Vec<Vec<Complex64>>,
    pub a_minus: DMatrix<f64>,
    pub a_plus: DMatrix<f64>,
    splines: Vec<[UniformSpline; 2]>,
    dsplines: Vec<[UniformSpline; 2]>,
    speed_bound: f64,
}

/// Serializable description of the manufactured perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Manufactured {
    pub eps: f64,
    pub envelope_width: f64,
    pub period: f64,
}

impl Default for Manufactured {
    fn default() -> Self {
        Self { eps: 0.0, envelope_width: 2.0, period: 2.0 * std::f64::consts::PI }
    }
}

impl PeriodicCoefficientField {
    /// Builds a field from its Fourier modes `k = -K..=K` (real modes are
    /// completed by conjugation when only `k >= 0` is given).
    pub fn from_modes(
        grid: &GridSpec,
        n: usize,
        period: f64,
        damping: f64,
        modes: Vec<Vec<Complex64>>,
        dmodes: Vec<Vec<Complex64>>,
        a_minus: DMatrix<f64>,
        a_plus: DMatrix<f64>,
    ) -> Result<Self> {
        grid.validate()?;
        let nx = grid.nx();
        if modes.len() % 2 != 1 || modes.len() != dmodes.len() {
            return Err(Error::InvalidParameter("need an odd number of Fourier modes, k = -K..=K".into()));
        }
        for m in modes.iter().chain(&dmodes) {
            if m.len() != nx * n * n {
                return Err(Error::DimensionMismatch { expected: nx * n * n, found: m.len() });
            }
        }
        if !(period > 0.0) || damping < 0.0 {
            return Err(Error::InvalidParameter("period must be positive and damping nonnegative".into()));
        }
        let kmax = modes.len() / 2;
        // Real-valuedness: f_{-k} = conj(f_k).
        for k in 1..=kmax {
            let err = modes[kmax + k]
                .iter()
                .zip(&modes[kmax - k])
                .map(|(a, b)| (a - b.conj()).norm())
                .fold(0.0, f64::max);
            if err > 1e-12 {
                return Err(Error::InvalidParameter("coefficient modes are not conjugate-symmetric".into()));
            }
        }
        let build = |ms: &Vec<Vec<Complex64>>| -> Vec<[UniformSpline; 2]> {
            let mut out = Vec::with_capacity(ms.len() * n * n);
            for m in ms {
                for e in 0..n * n {
                    let re: Vec<f64> = (0..nx).map(|i| m[i * n * n + e].re).collect();
                    let im: Vec<f64> = (0..nx).map(|i| m[i * n * n + e].im).collect();
                    out.push([
                        UniformSpline::new(-grid.half_width, grid.dx, re),
                        UniformSpline::new(-grid.half_width, grid.dx, im),
                    ]);
                }
            }
            out
        };
        let mut speed_bound = 0.0_f64;
        for i in 0..nx {
            for r in 0..n {
                let s: f64 = (0..n)
                    .map(|c| modes.iter().map(|m| m[i * n * n + r * n + c].norm()).sum::<f64>())
                    .sum();
                speed_bound = speed_bound.max(s);
            }
        }
        Ok(Self {
            n,
            nx,
            x0: -grid.half_width,
            dx: grid.dx,
            period,
            damping,
            kmax,
            splines: build(&modes),
            dsplines: build(&dmodes),
            modes,
            dmodes,
            a_minus,
            a_plus,
            speed_bound,
        })
    }

    /// `A(x, t) = f_u(u(x))`, with `A_x = f_uu(u)[u_x, .]`.
    pub fn stationary(profile: &ShockProfile) -> Result<Self> {
        Self::manufactured(profile, &Manufactured { eps: 0.0, ..Manufactured::default() }, None)
    }

    /// `A(x,t) = f_u(u(x)) + eps exp(-x^2/w^2) cos(2 pi t / T) B` with `B` a
    /// fixed unit-Frobenius-norm matrix (default: `[1]` for N = 1, the
    /// normalized exchange matrix for N = 2).
    pub fn manufactured(profile: &ShockProfile, m: &Manufactured, b: Option<DMatrix<f64>>) -> Result<Self> {
        if m.eps < 0.0 || !(m.envelope_width > 0.0) || !(m.period > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "manufactured coefficients need eps >= 0, width > 0, period > 0 (got {:?})",
                m
            )));
        }
        let n = profile.n();
        let grid = &profile.grid;
        let nx = grid.nx();
        let b = b.unwrap_or_else(|| default_perturbation_matrix(n));
        if b.nrows() != n || b.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, found: b.nrows() });
        }
        let nn = n * n;
        let mut a0 = vec![Complex64::new(0.0, 0.0); nx * nn];
        let mut d0 = vec![Complex64::new(0.0, 0.0); nx * nn];
        let mut jac = vec![0.0; nn];
        for i in 0..nx {
            let u = profile.values.at(i);
            profile.model.jacobian_into(u, &mut jac);
            let ux = profile.ux.at(i);
            for r in 0..n {
                for c in 0..n {
                    a0[i * nn + r * n + c] = Complex64::new(jac[r * n + c], 0.0);
                }
            }
            for c in 0..n {
                let mut e = vec![0.0; n];
                e[c] = 1.0;
                let col = profile.model.hessian_action(u, ux, &e);
                for r in 0..n {
                    d0[i * nn + r * n + c] = Complex64::new(col[r], 0.0);
                }
            }
        }
        let a_minus = profile.model.jacobian(&profile.u_minus);
        let a_plus = profile.model.jacobian(&profile.u_plus);
        if m.eps == 0.0 {
            return Self::from_modes(grid, n, m.period, 0.0, vec![a0], vec![d0], a_minus, a_plus);
        }
        let mut a1 = vec![Complex64::new(0.0, 0.0); nx * nn];
        let mut d1 = vec![Complex64::new(0.0, 0.0); nx * nn];
        let w2 = m.envelope_width * m.envelope_width;
        for i in 0..nx {
            let x = grid.x(i);
            let env = (-x * x / w2).exp();
            let denv = -2.0 * x / w2 * env;
            for r in 0..n {
                for c in 0..n {
                    a1[i * nn + r * n + c] = Complex64::new(0.5 * m.eps * env * b[(r, c)], 0.0);
                    d1[i * nn + r * n + c] = Complex64::new(0.5 * m.eps * denv * b[(r, c)], 0.0);
                }
            }
        }
        Self::from_modes(
            grid,
            n,
            m.period,
            0.0,
            vec![a1.clone(), a0, a1],
            vec![d1.clone(), d0, d1],
            a_minus,
            a_plus,
        )
    }

    /// Spatially constant, time-independent `A` with optional damping.
    pub fn constant(grid: &GridSpec, a: DMatrix<f64>, damping: f64) -> Result<Self> {
        let n = a.nrows();
        let nx = grid.nx();
        let nn = n * n;
        let mut m0 = vec![Complex64::new(0.0, 0.0); nx * nn];
        for i in 0..nx {
            for r in 0..n {
                for c in 0..n {
                    m0[i * nn + r * n + c] = Complex64::new(a[(r, c)], 0.0);
                }
            }
        }
        let d0 = vec![Complex64::new(0.0, 0.0); nx * nn];
        Self::from_modes(grid, n, 2.0 * std::f64::consts::PI, damping, vec![m0], vec![d0], a.clone(), a)
    }

    pub fn with_damping(mut self, damping: f64) -> Self {
        self.damping = damping;
        self
    }

    pub fn with_period(mut self, period: f64) -> Self {
        self.period = period;
        self
    }

    pub fn is_stationary(&self) -> bool {
        self.kmax == 0
    }

    pub fn max_speed(&self) -> f64 {
        self.speed_bound
    }

    pub fn omega(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.period
    }

    /// Fourier mode `f_k` at node `i` (row-major n x n).
    pub fn mode_at_node(&self, k: i64, i: usize) -> &[Complex64] {
        let nn = self.n * self.n;
        &self.modes[(k + self.kmax as i64) as usize][i * nn..(i + 1) * nn]
    }

    /// Fourier mode of `A` (or of `A_x` when `derivative`) at arbitrary `x`;
    /// zero for `|k| > K`. Outside the grid the end values are held.
    pub fn mode_matrix(&self, k: i64, x: f64, derivative: bool) -> DMatrix<Complex64> {
        let n = self.n;
        if k.unsigned_abs() as usize > self.kmax {
            return DMatrix::zeros(n, n);
        }
        let idx = (k + self.kmax as i64) as usize;
        let sp = if derivative { &self.dsplines } else { &self.splines };
        DMatrix::from_fn(n, n, |r, c| {
            let s = &sp[idx * n * n + r * n + c];
            Complex64::new(s[0].eval(x), s[1].eval(x))
        })
    }

    /// Real `A(x_i, t)` at every node, node-major row-major.
    pub fn sample_into(&self, t: f64, out: &mut [f64]) {
        let kmax = self.kmax as i64;
        if kmax == 0 {
            for (o, m) in out.iter_mut().zip(&self.modes[0]) {
                *o = m.re;
            }
            return;
        }
        let w = self.omega();
        let phases: Vec<Complex64> = (-kmax..=kmax).map(|k| Complex64::from_polar(1.0, k as f64 * w * t)).collect();
        for (e, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for (m, p) in self.modes.iter().zip(&phases) {
                s += (m[e] * p).re;
            }
            *o = s;
        }
    }

    /// Reconstruction of `A` from the stored modes at node `i` and time `t`.
    pub fn at(&self, i: usize, t: f64) -> DMatrix<f64> {
        let n = self.n;
        let mut buf = vec![0.0; self.nx * n * n];
        self.sample_into(t, &mut buf);
        DMatrix::from_row_slice(n, n, &buf[i * n * n..(i + 1) * n * n])
    }

    /// Temporal modes of `A`, indexed by `k + K`.
    pub fn modes(&self) -> &[Vec<Complex64>] {
        &self.modes
    }

    pub fn derivative_modes(&self) -> &[Vec<Complex64>] {
        &self.dmodes
    }
}

/// Default unit-norm perturbation matrix.
pub fn default_perturbation_matrix(n: usize) -> DMatrix<f64> {
    if n == 1 {
        DMatrix::from_element(1, 1, 1.0)
    } else {
        let mut b = DMatrix::zeros(n, n);
        for i in 0..n {
            b[(i, n - 1 - i)] = 1.0;
        }
        let norm = b.norm();
        b / norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn burgers(l: f64, dx: f64) -> ShockProfile {
        solve_stationary_profile(&FluxModel::Burgers, &[1.0], &[-1.0], &GridSpec::new(l, dx)).unwrap()
    }

    #[test]
    fn burgers_profile_is_minus_tanh() {
        let p = burgers(40.0, 0.05);
        let g = &p.grid;
        let err = (0..g.nx()).map(|i| (p.values.values[i] + (g.x(i) / 2.0).tanh()).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "max deviation from -tanh(x/2): {err}");
        assert_eq!(p.values.values[g.center()], 0.0);
        assert!(p.residual < 1e-12, "residual {}", p.residual);
        assert!((p.tail_rate - 1.0).abs() < 0.05, "tail rate {}", p.tail_rate);
        // u_x = -sech^2(x/2)/2
        let ux0 = p.ux.values[g.center()];
        assert!((ux0 + 0.5).abs() < 1e-12);
    }

    #[test]
    fn burgers_tail_rate_grid_converged() {
        let a = burgers(40.0, 0.05).tail_rate;
        let b = burgers(40.0, 0.025).tail_rate;
        assert!(((a - b) / b).abs() < 0.01, "{a} vs {b}");
    }

    #[test]
    fn degenerate_endstates_rejected() {
        let g = GridSpec::new(10.0, 0.05);
        assert!(matches!(
            solve_stationary_profile(&FluxModel::Burgers, &[1.0], &[1.0], &g),
            Err(Error::RHViolation(_))
        ));
        assert!(matches!(
            solve_stationary_profile(&FluxModel::Burgers, &[1.0], &[-0.5], &g),
            Err(Error::RHViolation(_))
        ));
    }

    #[test]
    fn profile_consistent_across_domain_sizes() {
        let a = burgers(20.0, 0.05);
        let b = burgers(40.0, 0.05);
        let off = b.grid.index_of(-20.0);
        for i in 0..a.grid.nx() {
            assert!((a.values.values[i] - b.values.values[i + off]).abs() < 1e-14);
        }
    }

    #[test]
    fn quadratic_profile_connects() {
        let model = default_quadratic_model();
        let (um, up) = default_quadratic_endstates().unwrap();
        let p = solve_stationary_profile(&model, &um, &up, &GridSpec::new(40.0, 0.05)).unwrap();
        let n = 2;
        let nx = p.grid.nx();
        for c in 0..n {
            assert!((p.values.values[c] - um[c]).abs() < 1e-6);
            assert!((p.values.values[(nx - 1) * n + c] - up[c]).abs() < 1e-6);
        }
        let ic = p.grid.center();
        assert!((p.values.values[ic * n] - 0.5 * (um[0] + up[0])).abs() < 1e-9);
        assert!(p.residual < 1e-10, "residual {}", p.residual);
        // Refined-grid solve agrees to discretization error.
        let q = solve_stationary_profile(&model, &um, &up, &GridSpec::new(40.0, 0.025)).unwrap();
        for i in (0..nx).step_by(20) {
            for c in 0..n {
                let d = p.values.values[i * n + c] - q.values.values[2 * i * n + c];
                assert!(d.abs() < 1e-3, "node {i}: {d}");
            }
        }
    }

    #[test]
    fn manufactured_modes() {
        let p = burgers(20.0, 0.05);
        let still = PeriodicCoefficientField::stationary(&p).unwrap();
        assert!(still.is_stationary());
        let a0 = still.at(37, 0.0)[(0, 0)];
        let a1 = still.at(37, 2.3)[(0, 0)];
        assert_eq!(a0, a1);
        assert_eq!(a0, p.values.values[37]);

        let m = Manufactured { eps: 0.1, envelope_width: 2.0, period: 2.0 * std::f64::consts::PI };
        let f = PeriodicCoefficientField::manufactured(&p, &m, None).unwrap();
        assert_eq!(f.kmax, 1);
        for i in [0usize, 350, 400, 460, 800] {
            let x = p.grid.x(i);
            let expect = 0.05 * (-x * x / 4.0).exp();
            assert!((f.mode_at_node(1, i)[0].re - expect).abs() < 1e-15);
            assert!((f.mode_at_node(-1, i)[0].re - expect).abs() < 1e-15);
            assert_eq!(f.mode_at_node(0, i)[0].re, p.values.values[i]);
            for t in [0.0f64, 0.7, 3.0] {
                let direct = p.values.values[i] + 0.1 * (-x * x / 4.0).exp() * t.cos();
                assert!((f.at(i, t)[(0, 0)] - direct).abs() < 1e-14);
            }
        }
        assert!((f.at(0, 1.0)[(0, 0)] - 1.0).abs() < 1e-8);
        assert!((f.at(800, 1.0)[(0, 0)] + 1.0).abs() < 1e-8);
    }
}

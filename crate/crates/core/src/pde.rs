//! Finite-difference evolution of `u_t + f(u)_x = u_xx` and of the linearized
//! equation `v_t = v_xx - (A(x,t) v)_x` (optionally damped and forced), with
//! the exact discrete adjoint of the linear stepper.
//!
//! Time stepping is the two-stage IMEX scheme ARS(2,2,2): diffusion (and
//! damping) implicit, conservative centered flux differences explicit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flux::FluxModel;
use crate::numerics::trapezoid;
use crate::profiles::PeriodicCoefficientField;

/// Sup norm above which an evolution is declared blown up.
pub const BLOWUP_THRESHOLD: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Boundary node values are frozen at their initial values.
    #[default]
    Dirichlet,
    /// The last node is identified with the first.
    Periodic,
}

/// Uniform grid on `[-L, L]` with a nominal time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub half_width: f64,
    pub dx: f64,
    pub dt: f64,
    #[serde(default)]
    pub boundary: Boundary,
}

impl GridSpec {
    pub fn new(half_width: f64, dx: f64) -> Self {
        Self { half_width, dx, dt: 0.4 * dx, boundary: Boundary::Dirichlet }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_boundary(mut self, boundary: Boundary) -> Self {
        self.boundary = boundary;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.half_width > 0.0 && self.dx > 0.0 && self.dt > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "grid needs positive L, dx, dt (got {}, {}, {})",
                self.half_width, self.dx, self.dt
            )));
        }
        let cells = 2.0 * self.half_width / self.dx;
        if (cells - cells.round()).abs() > 1e-8 * cells.max(1.0) || cells.round() < 4.0 {
            return Err(Error::InvalidParameter(format!(
                "2L/dx = {cells} must be an integer of at least 4"
            )));
        }
        if !(cells.round() as usize).is_multiple_of(2) {
            return Err(Error::InvalidParameter("2L/dx must be even so that x = 0 is a node".into()));
        }
        Ok(())
    }

    pub fn nx(&self) -> usize {
        (2.0 * self.half_width / self.dx).round() as usize + 1
    }

    pub fn x(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.dx
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx()).map(|i| self.x(i)).collect()
    }

    /// Index of the node x = 0.
    pub fn center(&self) -> usize {
        self.nx() / 2
    }

    /// Nearest node index to `x`, clamped to the grid.
    pub fn index_of(&self, x: f64) -> usize {
        let i = ((x + self.half_width) / self.dx).round();
        (i.max(0.0) as usize).min(self.nx() - 1)
    }
}

/// Values `v(x_i)` in `R^N` on a grid, stored node-major (`values[i*N + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub n: usize,
    pub values: Vec<f64>,
}

impl Field {
    pub fn zeros(n: usize, nx: usize) -> Self {
        Self { n, values: vec![0.0; n * nx] }
    }

    pub fn from_fn(n: usize, grid: &GridSpec, mut f: impl FnMut(f64, usize) -> f64) -> Self {
        let nx = grid.nx();
        let mut values = vec![0.0; n * nx];
        for i in 0..nx {
            for c in 0..n {
                values[i * n + c] = f(grid.x(i), c);
            }
        }
        Self { n, values }
    }

    pub fn nx(&self) -> usize {
        self.values.len() / self.n
    }

    pub fn at(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn component(&self, c: usize) -> Vec<f64> {
        self.values.iter().skip(c).step_by(self.n).copied().collect()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn axpy(&mut self, alpha: f64, other: &Field) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scaled(&self, alpha: f64) -> Field {
        Field { n: self.n, values: self.values.iter().map(|v| alpha * v).collect() }
    }

    pub fn sub(&self, other: &Field) -> Field {
        Field { n: self.n, values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect() }
    }
}

/// Trapezoid integral of each component.
pub fn mass(v: &Field, grid: &GridSpec) -> Vec<f64> {
    (0..v.n).map(|c| trapezoid(&v.component(c), grid.dx)).collect()
}

/// Discrete `||(1+x^2)^p v||_{H^k}` for k <= 3, with fourth-order centered
/// differences for the derivatives.
pub fn weighted_sobolev_norm(v: &Field, grid: &GridSpec, order: usize, weight_power: f64) -> f64 {
    let nx = v.nx();
    let h = grid.dx;
    let mut total = 0.0;
    for c in 0..v.n {
        let w: Vec<f64> = (0..nx)
            .map(|i| (1.0 + grid.x(i).powi(2)).powf(weight_power) * v.values[i * v.n + c])
            .collect();
        total += w.iter().map(|a| a * a).sum::<f64>() * h;
        for k in 1..=order.min(3) {
            let mut d = vec![0.0; nx];
            for i in 3..nx.saturating_sub(3) {
                d[i] = match k {
                    1 => (-w[i + 2] + 8.0 * w[i + 1] - 8.0 * w[i - 1] + w[i - 2]) / (12.0 * h),
                    2 => (-w[i + 2] + 16.0 * w[i + 1] - 30.0 * w[i] + 16.0 * w[i - 1] - w[i - 2]) / (12.0 * h * h),
                    _ => {
                        (-w[i + 3] + 8.0 * w[i + 2] - 13.0 * w[i + 1] + 13.0 * w[i - 1] - 8.0 * w[i - 2]
                            + w[i - 3])
                            / (8.0 * h * h * h)
                    }
                };
            }
            total += d.iter().map(|a| a * a).sum::<f64>() * h;
        }
    }
    total.sqrt()
}

const ARS_GAMMA: f64 = 1.0 - std::f64::consts::FRAC_1_SQRT_2;

fn ars_delta() -> f64 {
    1.0 - 1.0 / (2.0 * ARS_GAMMA)
}

/// Precomputed factorization of `1 - gamma h (D2 - c)` on the unknowns.
#[derive(Debug, Clone)]
struct ImplicitSolver {
    n: usize,
    nx: usize,
    dx: f64,
    damping: f64,
    boundary: Boundary,
    off: f64,
    cp: Vec<f64>,
    inv_beta: Vec<f64>,
    // Sherman-Morrison data for the periodic case.
    z: Vec<f64>,
    corner: f64,
    z_factor: f64,
}

impl ImplicitSolver {
    fn new(n: usize, nx: usize, dx: f64, h: f64, damping: f64, boundary: Boundary) -> Self {
        let r = ARS_GAMMA * h / (dx * dx);
        let diag = 1.0 + 2.0 * r + ARS_GAMMA * h * damping;
        let off = -r;
        let m = match boundary {
            Boundary::Dirichlet => nx - 2,
            Boundary::Periodic => nx - 1,
        };
        let mut solver = Self {
            n,
            nx,
            dx,
            damping,
            boundary,
            off,
            cp: vec![0.0; m],
            inv_beta: vec![0.0; m],
            z: Vec::new(),
            corner: 0.0,
            z_factor: 0.0,
        };
        match boundary {
            Boundary::Dirichlet => solver.factor(diag, diag, diag),
            Boundary::Periodic => {
                // A = T + u v^T with u = (g, 0.., off), v = (1, 0.., off/g).
                let g = -diag;
                solver.corner = g;
                solver.factor(diag - g, diag, diag - off * off / g);
                let mut z = vec![0.0; m];
                z[0] = g;
                z[m - 1] = off;
                solver.solve_plain(&mut z, 1, 0);
                solver.z_factor = 1.0 / (1.0 + z[0] + off * z[m - 1] / g);
                solver.z = z;
            }
        }
        solver
    }

    fn factor(&mut self, first: f64, mid: f64, last: f64) {
        let m = self.cp.len();
        let mut beta = first;
        self.inv_beta[0] = 1.0 / beta;
        for i in 1..m {
            let d = if i == m - 1 { last } else { mid };
            self.cp[i] = self.off / beta;
            beta = d - self.off * self.cp[i];
            self.inv_beta[i] = 1.0 / beta;
        }
    }

    /// Tridiagonal solve on a strided slice of unknowns `data[(k)*stride + c]`.
    fn solve_plain(&self, data: &mut [f64], stride: usize, c: usize) {
        let m = self.cp.len();
        data[c] *= self.inv_beta[0];
        for i in 1..m {
            let prev = data[(i - 1) * stride + c];
            let cur = &mut data[i * stride + c];
            *cur = (*cur - self.off * prev) * self.inv_beta[i];
        }
        for i in (0..m - 1).rev() {
            let next = data[(i + 1) * stride + c];
            data[i * stride + c] -= self.cp[i + 1] * next;
        }
    }

    /// Overwrites the unknowns of `buf` (full node-major array) with the
    /// solution of `(1 - gamma h I) U = buf`; Dirichlet boundary values are
    /// read from the boundary nodes of `buf`.
    fn solve(&self, buf: &mut [f64]) {
        let n = self.n;
        let nx = self.nx;
        match self.boundary {
            Boundary::Dirichlet => {
                for c in 0..n {
                    buf[n + c] -= self.off * buf[c];
                    buf[(nx - 2) * n + c] -= self.off * buf[(nx - 1) * n + c];
                }
                let inner = &mut buf[n..(nx - 1) * n];
                for c in 0..n {
                    self.solve_plain(inner, n, c);
                }
            }
            Boundary::Periodic => {
                let m = nx - 1;
                let g = self.corner;
                let inner = &mut buf[..m * n];
                for c in 0..n {
                    self.solve_plain(inner, n, c);
                    let y0 = inner[c];
                    let ym = inner[(m - 1) * n + c];
                    let fact = (y0 + self.off * ym / g) * self.z_factor;
                    for k in 0..m {
                        inner[k * n + c] -= fact * self.z[k];
                    }
                }
                for c in 0..n {
                    buf[(nx - 1) * n + c] = buf[c];
                }
            }
        }
    }

    /// `I(u) = u_xx - c u` on the unknowns (zero at Dirichlet boundary nodes).
    fn apply(&self, u: &[f64], out: &mut [f64]) {
        let n = self.n;
        let nx = self.nx;
        let inv = 1.0 / (self.dx * self.dx);
        match self.boundary {
            Boundary::Dirichlet => {
                out[..n].fill(0.0);
                out[(nx - 1) * n..].fill(0.0);
                for i in 1..nx - 1 {
                    for c in 0..n {
                        let k = i * n + c;
                        out[k] = (u[k + n] - 2.0 * u[k] + u[k - n]) * inv - self.damping * u[k];
                    }
                }
            }
            Boundary::Periodic => {
                let m = nx - 1;
                for i in 0..m {
                    let ip = (i + 1) % m;
                    let im = (i + m - 1) % m;
                    for c in 0..n {
                        out[i * n + c] =
                            (u[ip * n + c] - 2.0 * u[i * n + c] + u[im * n + c]) * inv - self.damping * u[i * n + c];
                    }
                }
                for c in 0..n {
                    out[(nx - 1) * n + c] = out[c];
                }
            }
        }
    }
}

/// Neighbour indices `(i-1, i+1)` for an unknown, or `None` for a Dirichlet
/// boundary node.
#[inline]
fn neighbours(boundary: Boundary, nx: usize, i: usize) -> Option<(usize, usize)> {
    match boundary {
        Boundary::Dirichlet => (i > 0 && i + 1 < nx).then(|| (i - 1, i + 1)),
        Boundary::Periodic => {
            let m = nx - 1;
            (i < m).then(|| ((i + m - 1) % m, (i + 1) % m))
        }
    }
}

fn copy_periodic_end(boundary: Boundary, n: usize, nx: usize, buf: &mut [f64]) {
    if boundary == Boundary::Periodic {
        for c in 0..n {
            buf[(nx - 1) * n + c] = buf[c];
        }
    }
}

/// Explicit forcing `F(t)` written into a full node-major buffer.
pub type Forcing<'a> = dyn Fn(f64, &mut [f64]) + Sync + 'a;

/// One-step integrator for the linearized equation.
pub struct LinearStepper<'a> {
    coeffs: &'a PeriodicCoefficientField,
    n: usize,
    nx: usize,
    dx: f64,
    h: f64,
    boundary: Boundary,
    solver: ImplicitSolver,
    a1: Vec<f64>,
    a2: Vec<f64>,
    e1: Vec<f64>,
    e2: Vec<f64>,
    u2: Vec<f64>,
    tmp: Vec<f64>,
    fbuf: Vec<f64>,
}

impl<'a> LinearStepper<'a> {
    pub fn new(coeffs: &'a PeriodicCoefficientField, grid: &GridSpec, h: f64) -> Result<Self> {
        grid.validate()?;
        let n = coeffs.n;
        let nx = grid.nx();
        if coeffs.nx != nx || (coeffs.dx - grid.dx).abs() > 1e-12 * grid.dx {
            return Err(Error::DimensionMismatch { expected: nx, found: coeffs.nx });
        }
        let amax = coeffs.max_speed();
        if h * amax / grid.dx > 1.0 {
            return Err(Error::CflViolation(format!(
                "dt * max|a| / dx = {:.3} exceeds 1",
                h * amax / grid.dx
            )));
        }
        let len = n * nx;
        Ok(Self {
            coeffs,
            n,
            nx,
            dx: grid.dx,
            h,
            boundary: grid.boundary,
            solver: ImplicitSolver::new(n, nx, grid.dx, h, coeffs.damping, grid.boundary),
            a1: vec![0.0; nx * n * n],
            a2: vec![0.0; nx * n * n],
            e1: vec![0.0; len],
            e2: vec![0.0; len],
            u2: vec![0.0; len],
            tmp: vec![0.0; len],
            fbuf: vec![0.0; len],
        })
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    /// `out = -(A v)_x` by centered differences (zero on Dirichlet boundary nodes).
    fn flux_term(&self, a: &[f64], v: &[f64], out: &mut [f64]) {
        let n = self.n;
        let inv = 0.5 / self.dx;
        for i in 0..self.nx {
            match neighbours(self.boundary, self.nx, i) {
                None => out[i * n..(i + 1) * n].fill(0.0),
                Some((im, ip)) => {
                    for r in 0..n {
                        let mut s = 0.0;
                        for c in 0..n {
                            s += a[(ip * n + r) * n + c] * v[ip * n + c] - a[(im * n + r) * n + c] * v[im * n + c];
                        }
                        out[i * n + r] = -s * inv;
                    }
                }
            }
        }
        copy_periodic_end(self.boundary, n, self.nx, out);
    }

    /// `out = A^T w_x` by centered differences, the transpose of [`Self::flux_term`].
    fn flux_term_transpose(&self, a: &[f64], w: &[f64], out: &mut [f64]) {
        let n = self.n;
        let inv = 0.5 / self.dx;
        for i in 0..self.nx {
            match neighbours(self.boundary, self.nx, i) {
                None => out[i * n..(i + 1) * n].fill(0.0),
                Some((im, ip)) => {
                    for c in 0..n {
                        let mut s = 0.0;
                        for r in 0..n {
                            s += a[(i * n + r) * n + c] * (w[ip * n + r] - w[im * n + r]);
                        }
                        out[i * n + c] = s * inv;
                    }
                }
            }
        }
        copy_periodic_end(self.boundary, n, self.nx, out);
    }

    fn zero_boundary(&self, v: &mut [f64]) {
        if self.boundary == Boundary::Dirichlet {
            let n = self.n;
            v[..n].fill(0.0);
            v[(self.nx - 1) * n..].fill(0.0);
        }
    }

    /// Advances `v` from time `t` to `t + h`.
    pub fn step(&mut self, v: &mut [f64], t: f64, forcing: Option<&Forcing>) {
        let h = self.h;
        let g = ARS_GAMMA;
        let d = ars_delta();
        self.zero_boundary(v);
        let a1 = std::mem::take(&mut self.a1);
        let a2 = std::mem::take(&mut self.a2);
        let mut a1 = a1;
        let mut a2 = a2;
        self.coeffs.sample_into(t, &mut a1);
        self.coeffs.sample_into(t + g * h, &mut a2);
        let mut e1 = std::mem::take(&mut self.e1);
        let mut e2 = std::mem::take(&mut self.e2);
        let mut u2 = std::mem::take(&mut self.u2);
        let mut tmp = std::mem::take(&mut self.tmp);
        let mut fbuf = std::mem::take(&mut self.fbuf);

        self.flux_term(&a1, v, &mut e1);
        if let Some(f) = forcing {
            fbuf.fill(0.0);
            f(t, &mut fbuf);
            self.zero_boundary(&mut fbuf);
            for (e, x) in e1.iter_mut().zip(&fbuf) {
                *e += x;
            }
        }
        for k in 0..u2.len() {
            u2[k] = v[k] + g * h * e1[k];
        }
        self.zero_boundary(&mut u2);
        self.solver.solve(&mut u2);

        self.flux_term(&a2, &u2, &mut e2);
        if let Some(f) = forcing {
            fbuf.fill(0.0);
            f(t + g * h, &mut fbuf);
            self.zero_boundary(&mut fbuf);
            for (e, x) in e2.iter_mut().zip(&fbuf) {
                *e += x;
            }
        }
        self.solver.apply(&u2, &mut tmp);
        for k in 0..v.len() {
            v[k] += h * (d * e1[k] + (1.0 - d) * e2[k] + (1.0 - g) * tmp[k]);
        }
        self.zero_boundary(v);
        self.solver.solve(v);
        copy_periodic_end(self.boundary, self.n, self.nx, v);

        self.a1 = a1;
        self.a2 = a2;
        self.e1 = e1;
        self.e2 = e2;
        self.u2 = u2;
        self.tmp = tmp;
        self.fbuf = fbuf;
    }

    /// Applies the transpose of the forward step from `t` to `t + h`: maps a
    /// dual vector at `t + h` to one at `t`.
    pub fn step_transpose(&mut self, w: &mut [f64], t: f64) {
        let h = self.h;
        let g = ARS_GAMMA;
        let d = ars_delta();
        let mut a1 = std::mem::take(&mut self.a1);
        let mut a2 = std::mem::take(&mut self.a2);
        self.coeffs.sample_into(t, &mut a1);
        self.coeffs.sample_into(t + g * h, &mut a2);
        let mut z = std::mem::take(&mut self.e1);
        let mut y = std::mem::take(&mut self.e2);
        let mut p = std::mem::take(&mut self.u2);
        let mut tmp = std::mem::take(&mut self.tmp);

        copy_periodic_end(self.boundary, self.n, self.nx, w);
        z.copy_from_slice(w);
        self.zero_boundary(&mut z);
        self.solver.solve(&mut z);
        // y = h (1-d) E2^T z + h (1-g) I z
        self.flux_term_transpose(&a2, &z, &mut y);
        self.solver.apply(&z, &mut tmp);
        for k in 0..y.len() {
            y[k] = h * ((1.0 - d) * y[k] + (1.0 - g) * tmp[k]);
        }
        self.zero_boundary(&mut y);
        p.copy_from_slice(&y);
        self.solver.solve(&mut p);
        // w = z + h d E1^T z + p + g h E1^T p
        self.flux_term_transpose(&a1, &z, &mut tmp);
        for k in 0..w.len() {
            w[k] = z[k] + h * d * tmp[k] + p[k];
        }
        self.flux_term_transpose(&a1, &p, &mut tmp);
        for k in 0..w.len() {
            w[k] += g * h * tmp[k];
        }
        self.zero_boundary(w);
        copy_periodic_end(self.boundary, self.n, self.nx, w);

        self.a1 = a1;
        self.a2 = a2;
        self.e1 = z;
        self.e2 = y;
        self.u2 = p;
        self.tmp = tmp;
    }
}

fn step_count(span: f64, dt: f64) -> usize {
    ((span / dt) - 1e-9).ceil().max(1.0) as usize
}

fn check_blowup(v: &[f64], t: f64) -> Result<()> {
    let sup = v.iter().fold(0.0_f64, |m, x| if x.is_finite() { m.max(x.abs()) } else { f64::INFINITY });
    if sup > BLOWUP_THRESHOLD {
        return Err(Error::BlowUp { t, sup });
    }
    Ok(())
}

/// Solves `v_t = v_xx - (A v)_x - c v + F` from `s` to `t`, calling `observe`
/// after every step with the current time and state.
pub fn evolve_linearized_with(
    coeffs: &PeriodicCoefficientField,
    v0: &Field,
    s: f64,
    t: f64,
    grid: &GridSpec,
    forcing: Option<&Forcing>,
    mut observe: impl FnMut(f64, &[f64]),
) -> Result<Field> {
    if t < s {
        return Err(Error::InvalidParameter(format!("final time {t} precedes initial time {s}")));
    }
    if v0.n != coeffs.n {
        return Err(Error::DimensionMismatch { expected: coeffs.n, found: v0.n });
    }
    if !v0.is_finite() {
        return Err(Error::InvalidParameter("initial data must be finite".into()));
    }
    let mut v = v0.values.clone();
    if t == s {
        return Ok(v0.clone());
    }
    let steps = step_count(t - s, grid.dt);
    let h = (t - s) / steps as f64;
    let mut stepper = LinearStepper::new(coeffs, grid, h)?;
    for k in 0..steps {
        let tk = s + k as f64 * h;
        stepper.step(&mut v, tk, forcing);
        let tn = s + (k + 1) as f64 * h;
        check_blowup(&v, tn)?;
        observe(tn, &v);
    }
    Ok(Field { n: v0.n, values: v })
}

/// Solves `v_t = v_xx - (A(x,t) v)_x` from time `s` to time `t`.
pub fn evolve_linearized(
    coeffs: &PeriodicCoefficientField,
    v0: &Field,
    s: f64,
    t: f64,
    grid: &GridSpec,
) -> Result<Field> {
    evolve_linearized_with(coeffs, v0, s, t, grid, None, |_, _| {})
}

/// Evolves the adjoint `w_tau = w_xx + A^T(x, t_start - tau) w_x` for
/// `duration`, as the exact transpose of the forward stepper. With
/// `psi(x, t) := w(x, t_start - t)` the pairing `<psi(t), v(t)>` of a forward
/// solution is constant in t.
pub fn adjoint_evolve(
    coeffs: &PeriodicCoefficientField,
    w0: &Field,
    t_start: f64,
    duration: f64,
    grid: &GridSpec,
) -> Result<Field> {
    if !(duration > 0.0) {
        return Err(Error::InvalidParameter(format!("duration must be positive (got {duration})")));
    }
    if w0.n != coeffs.n {
        return Err(Error::DimensionMismatch { expected: coeffs.n, found: w0.n });
    }
    let steps = step_count(duration, grid.dt);
    let h = duration / steps as f64;
    let mut stepper = LinearStepper::new(coeffs, grid, h)?;
    let mut w = w0.values.clone();
    for k in 0..steps {
        let t_lo = t_start - (k + 1) as f64 * h;
        stepper.step_transpose(&mut w, t_lo);
        check_blowup(&w, t_start - t_lo)?;
    }
    Ok(Field { n: w0.n, values: w })
}

/// Discrete duality pairing `dx * sum_i <w_i, v_i>` over the unknowns.
pub fn pairing(w: &Field, v: &Field, grid: &GridSpec) -> f64 {
    let n = v.n;
    let nx = v.nx();
    let range = match grid.boundary {
        Boundary::Dirichlet => 1..nx - 1,
        Boundary::Periodic => 0..nx - 1,
    };
    range
        .map(|i| (0..n).map(|c| w.values[i * n + c] * v.values[i * n + c]).sum::<f64>())
        .sum::<f64>()
        * grid.dx
}

/// Sampled nonlinear trajectory.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub fields: Vec<Field>,
}

/// Nonlinear IMEX integrator with frozen Dirichlet (or periodic) boundaries.
pub struct NonlinearStepper<'a> {
    model: &'a FluxModel,
    n: usize,
    nx: usize,
    dx: f64,
    h: f64,
    boundary: Boundary,
    solver: ImplicitSolver,
    fl: Vec<f64>,
    e1: Vec<f64>,
    e2: Vec<f64>,
    u2: Vec<f64>,
    tmp: Vec<f64>,
}

impl<'a> NonlinearStepper<'a> {
    pub fn new(model: &'a FluxModel, grid: &GridSpec, h: f64) -> Result<Self> {
        grid.validate()?;
        let n = model.dim();
        let nx = grid.nx();
        let len = n * nx;
        Ok(Self {
            model,
            n,
            nx,
            dx: grid.dx,
            h,
            boundary: grid.boundary,
            solver: ImplicitSolver::new(n, nx, grid.dx, h, 0.0, grid.boundary),
            fl: vec![0.0; len],
            e1: vec![0.0; len],
            e2: vec![0.0; len],
            u2: vec![0.0; len],
            tmp: vec![0.0; len],
        })
    }

    fn check_cfl(&self, u: &[f64]) -> Result<()> {
        let n = self.n;
        let mut jac = vec![0.0; n * n];
        let mut amax = 0.0_f64;
        for i in 0..self.nx {
            self.model.jacobian_into(&u[i * n..(i + 1) * n], &mut jac);
            // Row-sum norm bounds the spectral radius.
            for r in 0..n {
                amax = amax.max(jac[r * n..(r + 1) * n].iter().map(|x| x.abs()).sum());
            }
        }
        if self.h * amax / self.dx > 1.0 {
            return Err(Error::CflViolation(format!("dt * max|f'| / dx = {:.3} exceeds 1", self.h * amax / self.dx)));
        }
        Ok(())
    }

    fn flux_term(&mut self, u: &[f64], out: &mut [f64]) {
        let n = self.n;
        for i in 0..self.nx {
            self.model.flux_into(&u[i * n..(i + 1) * n], &mut self.fl[i * n..(i + 1) * n]);
        }
        let inv = 0.5 / self.dx;
        for i in 0..self.nx {
            match neighbours(self.boundary, self.nx, i) {
                None => out[i * n..(i + 1) * n].fill(0.0),
                Some((im, ip)) => {
                    for c in 0..n {
                        out[i * n + c] = -(self.fl[ip * n + c] - self.fl[im * n + c]) * inv;
                    }
                }
            }
        }
        copy_periodic_end(self.boundary, n, self.nx, out);
    }

    /// Advances `u` by one step with optional explicit forcing at time `t`.
    pub fn step(&mut self, u: &mut [f64], t: f64, forcing: Option<&Forcing>) {
        let h = self.h;
        let g = ARS_GAMMA;
        let d = ars_delta();
        let mut e1 = std::mem::take(&mut self.e1);
        let mut e2 = std::mem::take(&mut self.e2);
        let mut u2 = std::mem::take(&mut self.u2);
        let mut tmp = std::mem::take(&mut self.tmp);
        self.flux_term(u, &mut e1);
        if let Some(f) = forcing {
            tmp.fill(0.0);
            f(t, &mut tmp);
            for (e, x) in e1.iter_mut().zip(&tmp) {
                *e += x;
            }
        }
        for k in 0..u.len() {
            u2[k] = u[k] + g * h * e1[k];
        }
        self.solver.solve(&mut u2);
        self.flux_term(&u2, &mut e2);
        if let Some(f) = forcing {
            tmp.fill(0.0);
            f(t + g * h, &mut tmp);
            for (e, x) in e2.iter_mut().zip(&tmp) {
                *e += x;
            }
        }
        self.solver.apply(&u2, &mut tmp);
        for k in 0..u.len() {
            u[k] += h * (d * e1[k] + (1.0 - d) * e2[k] + (1.0 - g) * tmp[k]);
        }
        if self.boundary == Boundary::Dirichlet {
            // Boundary nodes keep their values: undo the update there.
            let n = self.n;
            for c in 0..n {
                u[c] -= h * (d * e1[c] + (1.0 - d) * e2[c] + (1.0 - g) * tmp[c]);
                let k = (self.nx - 1) * n + c;
                u[k] -= h * (d * e1[k] + (1.0 - d) * e2[k] + (1.0 - g) * tmp[k]);
            }
        }
        self.solver.solve(u);
        self.e1 = e1;
        self.e2 = e2;
        self.u2 = u2;
        self.tmp = tmp;
    }
}

/// Evolves `u_t + f(u)_x = u_xx (+ F)` from `t0` to `t1`, calling `observe`
/// after each step.
pub fn evolve_nonlinear_with(
    model: &FluxModel,
    u0: &Field,
    t0: f64,
    t1: f64,
    grid: &GridSpec,
    forcing: Option<&Forcing>,
    mut observe: impl FnMut(f64, &[f64]),
) -> Result<Field> {
    if !(t1 > t0) {
        return Err(Error::InvalidParameter(format!("final time {t1} must exceed {t0}")));
    }
    if u0.n != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), found: u0.n });
    }
    if !u0.is_finite() {
        return Err(Error::InvalidParameter("initial data must be finite".into()));
    }
    let steps = step_count(t1 - t0, grid.dt);
    let h = (t1 - t0) / steps as f64;
    let mut stepper = NonlinearStepper::new(model, grid, h)?;
    let mut u = u0.values.clone();
    stepper.check_cfl(&u)?;
    for k in 0..steps {
        stepper.step(&mut u, t0 + k as f64 * h, forcing);
        let tn = t0 + (k + 1) as f64 * h;
        check_blowup(&u, tn)?;
        if k % 64 == 63 {
            stepper.check_cfl(&u)?;
        }
        observe(tn, &u);
    }
    Ok(Field { n: u0.n, values: u })
}

/// Evolves the nonlinear equation to `t_final`, storing snapshots every
/// `every` time units (plus the initial and final states).
pub fn evolve_nonlinear(
    model: &FluxModel,
    u0: &Field,
    t_final: f64,
    grid: &GridSpec,
    every: f64,
) -> Result<Trajectory> {
    let mut times = vec![0.0];
    let mut fields = vec![u0.clone()];
    let mut next = every;
    let n = u0.n;
    let last = evolve_nonlinear_with(model, u0, 0.0, t_final, grid, None, |t, u| {
        if every > 0.0 && t >= next - 1e-9 && t < t_final - 1e-9 {
            times.push(t);
            fields.push(Field { n, values: u.to_vec() });
            while next <= t + 1e-9 {
                next += every;
            }
        }
    })?;
    times.push(t_final);
    fields.push(last);
    Ok(Trajectory { times, fields })
}

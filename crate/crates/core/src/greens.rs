//! Green's distribution of the linearized equation: numerical columns, the
//! damped-heat parametrix, the translation-mode decomposition
//! `G = E_1 + E_2 + G~` and the pointwise templates used to bound it.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flux::{Direction, ShockCharacteristics};
use crate::numerics::{errfn, errfn_prime, fit_line, trapezoid, LineFit};
use crate::pde::{evolve_linearized, Forcing, Field, GridSpec, LinearStepper};
use crate::profiles::{PeriodicCoefficientField, ShockProfile};

/// `e^{-(x-y)^2/4(t-s) - (t-s)} / sqrt(4 pi (t-s))`, zero for `t <= s`.
pub fn g0_kernel(x: f64, t: f64, y: f64, s: f64) -> f64 {
    let tau = t - s;
    if tau <= 0.0 {
        return 0.0;
    }
    (-(x - y) * (x - y) / (4.0 * tau) - tau).exp() / (4.0 * std::f64::consts::PI * tau).sqrt()
}

/// `d/dx` of [`g0_kernel`].
pub fn g0_kernel_dx(x: f64, t: f64, y: f64, s: f64) -> f64 {
    let tau = t - s;
    if tau <= 0.0 {
        return 0.0;
    }
    -(x - y) / (2.0 * tau) * g0_kernel(x, t, y, s)
}

/// Unit-mass Gaussian `exp(-(x-y)^2 / 2w^2)` standing in for the delta. Its
/// heat flow equals the heat kernel delayed by `w^2 / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mollifier {
    pub width: f64,
}

impl Mollifier {
    /// Default width `4 dx`.
    pub fn for_grid(grid: &GridSpec) -> Self {
        Self { width: 4.0 * grid.dx }
    }

    /// Heat-kernel age of the mollifier.
    pub fn time_offset(&self) -> f64 {
        0.5 * self.width * self.width
    }

    /// Discrete mollified delta in component `component`, normalized to unit
    /// trapezoid mass.
    pub fn field(&self, grid: &GridSpec, n: usize, component: usize, y: f64) -> Result<Field> {
        if self.width < 2.0 * grid.dx * (1.0 - 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "mollifier width {} below 2 dx = {}",
                self.width,
                2.0 * grid.dx
            )));
        }
        if y.abs() + 8.0 * self.width > grid.half_width {
            return Err(Error::InvalidParameter(format!("source {y} is not interior")));
        }
        let w2 = 2.0 * self.width * self.width;
        let mut f = Field::from_fn(n, grid, |x, c| if c == component { (-(x - y) * (x - y) / w2).exp() } else { 0.0 });
        let mass = trapezoid(&f.component(component), grid.dx);
        for v in f.values.iter_mut() {
            *v /= mass;
        }
        Ok(f)
    }
}

/// Column `G(., t; y, s) e_c` sampled at the requested times.
#[derive(Debug, Clone)]
pub struct GreenColumn {
    pub y: f64,
    pub s: f64,
    pub component: usize,
    pub mollifier: Mollifier,
    pub grid: GridSpec,
    /// Absolute times `t >= s`.
    pub times: Vec<f64>,
    pub fields: Vec<Field>,
}

impl GreenColumn {
    pub fn mass(&self, m: usize) -> Vec<f64> {
        crate::pde::mass(&self.fields[m], &self.grid)
    }
}

/// Evolves the mollified delta at `y` from time `s`; `times` must be
/// nondecreasing and not before `s`.
pub fn greens_column(
    coeffs: &PeriodicCoefficientField,
    y: f64,
    s: f64,
    times: &[f64],
    grid: &GridSpec,
    component: usize,
    mollifier: Option<Mollifier>,
) -> Result<GreenColumn> {
    let n = coeffs.n;
    if component >= n {
        return Err(Error::DimensionMismatch { expected: n, found: component + 1 });
    }
    if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|&t| t < s) {
        return Err(Error::InvalidParameter("output times must be nondecreasing and >= s".into()));
    }
    let moll = mollifier.unwrap_or_else(|| Mollifier::for_grid(grid));
    let mut v = moll.field(grid, n, component, y)?;
    let mut t = s;
    let mut fields = Vec::with_capacity(times.len());
    for &tk in times {
        v = evolve_linearized(coeffs, &v, t, tk, grid)?;
        t = tk;
        fields.push(v.clone());
    }
    Ok(GreenColumn { y, s, component, mollifier: moll, grid: *grid, times: times.to_vec(), fields })
}

/// Tables `G_0 .. G_J` of the damped-heat parametrix for one source.
#[derive(Debug, Clone)]
pub struct ParametrixTables {
    pub y: f64,
    pub s: f64,
    pub component: usize,
    pub mollifier: Mollifier,
    pub times: Vec<f64>,
    /// `tables[j][m]` is `G_j(., times[m]; y, s) e_c`.
    pub tables: Vec<Vec<Field>>,
}

impl ParametrixTables {
    /// `sup_x |G_j| e^{(t-s)/c}` per output time.
    pub fn normalized_sup(&self, j: usize, c: f64) -> Vec<f64> {
        self.times
            .iter()
            .zip(&self.tables[j])
            .map(|(t, f)| f.sup_norm() * ((t - self.s) / c).exp())
            .collect()
    }

    /// Log-log slope of [`Self::normalized_sup`] on `t - s` in `[lo, hi]`.
    pub fn scaling_slope(&self, j: usize, c: f64, lo: f64, hi: f64) -> Option<LineFit> {
        let taus: Vec<f64> = self.times.iter().map(|t| t - self.s).collect();
        let sup = self.normalized_sup(j, c);
        crate::numerics::loglog_slope(&taus, &sup, lo, hi, 0.0)
    }
}

/// Largest admissible `steps * nx * J` for the parametrix march.
pub const PARAMETRIX_BUDGET: f64 = 5e9;

/// Mollified `G_0` of the damped heat equation at age `tau`.
fn g0_mollified(grid: &GridSpec, n: usize, c: usize, y: f64, tau: f64, moll: &Mollifier, out: &mut [f64]) {
    let tm = moll.time_offset();
    let scale = tm.exp();
    out.fill(0.0);
    for i in 0..grid.nx() {
        out[i * n + c] = scale * g0_kernel(grid.x(i), tau + tm, y, 0.0);
    }
}

/// `out = w - (A(t) w)_x` with centered differences.
fn parametrix_forcing(coeffs: &PeriodicCoefficientField, grid: &GridSpec, t: f64, w: &[f64], abuf: &mut [f64], out: &mut [f64]) {
    let n = coeffs.n;
    let nx = grid.nx();
    coeffs.sample_into(t, abuf);
    let inv = 0.5 / grid.dx;
    out.fill(0.0);
    for i in 1..nx - 1 {
        for r in 0..n {
            let mut s = 0.0;
            for c in 0..n {
                s += abuf[((i + 1) * n + r) * n + c] * w[(i + 1) * n + c] - abuf[((i - 1) * n + r) * n + c] * w[(i - 1) * n + c];
            }
            out[i * n + r] = w[i * n + r] - s * inv;
        }
    }
}

/// Solves `[d_t - d_xx + 1] G_j = [1 - d_x A] G_{j-1}`, `G_j(s) = 0`, for
/// `j = 1..=j_max`, starting from the mollified `G_0`. Level `j-1` is
/// interpolated linearly in time at the inner stage of level `j`.
pub fn parametrix_recursion(
    coeffs: &PeriodicCoefficientField,
    j_max: usize,
    y: f64,
    s: f64,
    times: &[f64],
    grid: &GridSpec,
    component: usize,
) -> Result<ParametrixTables> {
    if j_max > 3 {
        return Err(Error::InvalidParameter(format!("j_max = {j_max} exceeds 3")));
    }
    let n = coeffs.n;
    if component >= n {
        return Err(Error::DimensionMismatch { expected: n, found: component + 1 });
    }
    if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|&t| t <= s) {
        return Err(Error::InvalidParameter("output times must be increasing and > s".into()));
    }
    let t_end = *times.last().ok_or(Error::EmptyRegion)?;
    let work = ((t_end - s) / grid.dt).ceil() * grid.nx() as f64 * j_max.max(1) as f64;
    if work > PARAMETRIX_BUDGET {
        return Err(Error::QuadratureBudgetExceeded(format!("{work:e} grid updates")));
    }
    let moll = Mollifier::for_grid(grid);
    moll.field(grid, n, component, y)?;
    let heat = PeriodicCoefficientField::constant(grid, DMatrix::zeros(n, n), 1.0)?;
    let len = n * grid.nx();
    let mut states = vec![vec![0.0; len]; j_max + 1];
    let mut tables = vec![Vec::with_capacity(times.len()); j_max + 1];
    let mut t = s;
    for &tk in times {
        if tk > t {
            let steps = ((tk - t) / grid.dt - 1e-9).ceil().max(1.0) as usize;
            let h = (tk - t) / steps as f64;
            let mut steppers: Vec<LinearStepper> =
                (1..=j_max).map(|_| LinearStepper::new(&heat, grid, h)).collect::<Result<_>>()?;
            for k in 0..steps {
                let t0 = t + k as f64 * h;
                let mut prev_lower = vec![0.0; len];
                let mut next_lower = vec![0.0; len];
                g0_mollified(grid, n, component, y, t0 - s, &moll, &mut prev_lower);
                g0_mollified(grid, n, component, y, t0 + h - s, &moll, &mut next_lower);
                for j in 1..=j_max {
                    let before = states[j].clone();
                    {
                        let (pl, nl) = (&prev_lower, &next_lower);
                        let forcing = |tt: f64, out: &mut [f64]| {
                            let theta = ((tt - t0) / h).clamp(0.0, 1.0);
                            let w: Vec<f64> = pl.iter().zip(nl).map(|(a, b)| a + theta * (b - a)).collect();
                            let mut abuf = vec![0.0; grid.nx() * n * n];
                            parametrix_forcing(coeffs, grid, tt, &w, &mut abuf, out);
                        };
                        let f: &Forcing = &forcing;
                        steppers[j - 1].step(&mut states[j], t0, Some(f));
                    }
                    prev_lower = before;
                    next_lower = states[j].clone();
                }
            }
            t = tk;
        }
        let mut g0 = vec![0.0; len];
        g0_mollified(grid, n, component, y, tk - s, &moll, &mut g0);
        tables[0].push(Field { n, values: g0 });
        for j in 1..=j_max {
            if states[j].iter().any(|v| !v.is_finite()) {
                return Err(Error::BlowUp { t: tk, sup: f64::INFINITY });
            }
            tables[j].push(Field { n, values: states[j].clone() });
        }
    }
    Ok(ParametrixTables { y, s, component, mollifier: moll, times: times.to_vec(), tables })
}

/// Row vectors `l_{j,in}` for each incoming mode on each side of the shock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LCoefficients {
    /// `minus[m]` pairs with the m-th incoming speed at `u_-` (length N).
    pub minus: Vec<Vec<f64>>,
    pub plus: Vec<Vec<f64>>,
}

impl LCoefficients {
    /// Constant coefficients with every incoming mode carrying `row`.
    pub fn uniform(chars: &ShockCharacteristics, row: &[f64]) -> Self {
        Self {
            minus: chars.minus.incoming().map(|_| row.to_vec()).collect(),
            plus: chars.plus.incoming().map(|_| row.to_vec()).collect(),
        }
    }
}

/// `pi`, its derivatives and its `t -> infinity` limit (one entry per source
/// component).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiValues {
    pub pi: Vec<f64>,
    pub dt: Vec<f64>,
    pub dy: Vec<f64>,
    pub limit: Vec<f64>,
}

/// Bracket `errfn((-|y| + |a| tau)/D) - errfn((-|y| - |a| tau)/D)`,
/// `D = sqrt(4(tau + 1))`, with its tau- and |y|-derivatives.
fn bracket(abs_y: f64, a: f64, tau: f64) -> (f64, f64, f64) {
    let a = a.abs();
    let d = (4.0 * (tau + 1.0)).sqrt();
    let u1 = -abs_y + a * tau;
    let u2 = -abs_y - a * tau;
    let (z1, z2) = (u1 / d, u2 / d);
    let b = errfn(z1) - errfn(z2);
    let k = 1.0 / (2.0 * (tau + 1.0));
    let dz1 = a / d - z1 * k;
    let dz2 = -a / d - z2 * k;
    let dtau = errfn_prime(z1) * dz1 - errfn_prime(z2) * dz2;
    let dabs = -(errfn_prime(z1) - errfn_prime(z2)) / d;
    (b, dtau, dabs)
}

/// `pi(y,s,t) = sum_in [errfn((y + a tau)/D) - errfn((y - a tau)/D)] l_in` on
/// the `y <= 0` side (incoming speeds of `u_-`), mirrored for `y > 0`, with
/// `l` treated as locally constant in `y`.
pub fn pi_functions(chars: &ShockCharacteristics, l: &LCoefficients, y: f64, s: f64, t: f64) -> Result<PiValues> {
    if t < s {
        return Err(Error::InvalidParameter("pi needs t >= s".into()));
    }
    let n = chars.dim();
    let (data, rows) = if y <= 0.0 { (&chars.minus, &l.minus) } else { (&chars.plus, &l.plus) };
    let speeds: Vec<f64> = data.incoming().map(|j| data.speeds[j]).collect();
    if rows.len() != speeds.len() || rows.iter().any(|r| r.len() != n) {
        return Err(Error::DimensionMismatch { expected: speeds.len(), found: rows.len() });
    }
    let tau = t - s;
    let sign_y = if y <= 0.0 { -1.0 } else { 1.0 };
    let mut out = PiValues { pi: vec![0.0; n], dt: vec![0.0; n], dy: vec![0.0; n], limit: vec![0.0; n] };
    for (a, row) in speeds.iter().zip(rows) {
        let (b, bt, babs) = bracket(y.abs(), *a, tau);
        let b = if tau == 0.0 { 0.0 } else { b };
        for c in 0..n {
            out.pi[c] += b * row[c];
            out.dt[c] += bt * row[c];
            out.dy[c] += sign_y * babs * row[c];
            out.limit[c] += row[c];
        }
    }
    Ok(out)
}

/// `G = E_1 + E_2 + G~` on the table of one column.
#[derive(Debug, Clone)]
pub struct GreenDecomposition {
    pub y: f64,
    pub s: f64,
    pub component: usize,
    pub grid: GridSpec,
    pub times: Vec<f64>,
    pub g: Vec<Field>,
    pub e1: Vec<Field>,
    /// Identically zero for time-independent profiles.
    pub e2: Vec<Field>,
    pub remainder: Vec<Field>,
    /// Fitted `l_{1,in}` entry for the source component, per incoming mode on
    /// the source side.
    pub l1: Vec<f64>,
    pub l: LCoefficients,
    pub pi1: Vec<f64>,
    pub fit_times: Vec<f64>,
}

impl GreenDecomposition {
    /// `int G~ dx` per time (summed over components).
    pub fn remainder_mass(&self) -> Vec<f64> {
        self.remainder.iter().map(|f| crate::pde::mass(f, &self.grid).iter().sum()).collect()
    }
}

/// Splits `g` into `(a', r)` with `a'` within a few ulps of `a` and
/// `a' + r == g` whenever the precision allows it.
fn exact_split(g: f64, a: f64) -> (f64, f64) {
    let mut a2 = a;
    for k in 0..9 {
        let mut r = g - a2;
        for _ in 0..3 {
            let sum = a2 + r;
            if sum == g {
                return (a2, r);
            }
            r = if sum < g { r.next_up() } else { r.next_down() };
        }
        a2 = if k % 2 == 0 { a.next_up() } else { a.next_down() };
        if k >= 2 {
            a2 = if k % 2 == 0 { a2.next_up() } else { a2.next_down() };
        }
    }
    (a, g - a)
}

/// Fits `l_{1,in}` by least squares of the late-time column against `u_x`
/// (times `t - s >= fit_from`), then assembles `E_1 = u_x pi_1` and
/// `G~ = G - E_1 - E_2`.
pub fn decompose_green(
    column: &GreenColumn,
    profile: &ShockProfile,
    chars: &ShockCharacteristics,
    fit_from: f64,
) -> Result<GreenDecomposition> {
    let n = profile.n();
    let grid = column.grid;
    let t_end = column.times.last().copied().unwrap_or(column.s);
    if t_end - column.s < 10.0 {
        return Err(Error::InsufficientHorizon(format!(
            "column reaches t - s = {}, at least 10 needed",
            t_end - column.s
        )));
    }
    let mut ux = Field::zeros(n, grid.nx());
    for i in 0..grid.nx() {
        ux.values[i * n..(i + 1) * n].copy_from_slice(&profile.eval_derivative(grid.x(i)));
    }
    let uxx: f64 = ux.values.iter().map(|v| v * v).sum::<f64>() * grid.dx;
    if !(uxx > 1e-300) {
        return Err(Error::FitIllConditioned("u_x vanishes on the grid".into()));
    }
    let side = if column.y <= 0.0 { &chars.minus } else { &chars.plus };
    let speeds: Vec<f64> = side.incoming().map(|j| side.speeds[j]).collect();
    let modes = speeds.len();
    // Rows: late times; columns: incoming modes; unknown: l entries.
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    let mut fit_times = Vec::new();
    for (t, f) in column.times.iter().zip(&column.fields) {
        let tau = t - column.s;
        if tau < fit_from {
            continue;
        }
        let alpha = f.values.iter().zip(&ux.values).map(|(a, b)| a * b).sum::<f64>() * grid.dx / uxx;
        rows.push(speeds.iter().map(|a| bracket(column.y.abs(), *a, tau).0).collect::<Vec<f64>>());
        rhs.push(alpha);
        fit_times.push(*t);
    }
    if rows.is_empty() {
        return Err(Error::InsufficientHorizon(format!("no samples with t - s >= {fit_from}")));
    }
    let a = DMatrix::from_fn(rows.len(), modes, |r, c| rows[r][c]);
    let b = nalgebra::DVector::from_vec(rhs);
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if modes == 0 || !(smin > 1e-8 * smax) {
        return Err(Error::FitIllConditioned(format!("incoming-mode design has singular values {smin:e}/{smax:e}")));
    }
    let sol = svd.solve(&b, 1e-14).map_err(|e| Error::FitIllConditioned(e.to_string()))?;
    let l1: Vec<f64> = sol.iter().copied().collect();

    // l rows for the source side; the other side is not needed for this column.
    let mut row_template = vec![0.0; n];
    let mut l = LCoefficients::uniform(chars, &row_template);
    let target = if column.y <= 0.0 { &mut l.minus } else { &mut l.plus };
    for (m, v) in l1.iter().enumerate() {
        row_template.fill(0.0);
        row_template[column.component] = *v;
        target[m] = row_template.clone();
    }

    let mut e1 = Vec::with_capacity(column.times.len());
    let mut e2 = Vec::with_capacity(column.times.len());
    let mut remainder = Vec::with_capacity(column.times.len());
    let mut pi1 = Vec::with_capacity(column.times.len());
    for (t, g) in column.times.iter().zip(&column.fields) {
        let p = pi_functions(chars, &l, column.y, column.s, *t)?.pi[column.component];
        pi1.push(p);
        let mut e = ux.scaled(p);
        let z = Field::zeros(n, grid.nx());
        let mut r = Field::zeros(n, grid.nx());
        for ((gv, ev), rv) in g.values.iter().zip(e.values.iter_mut()).zip(r.values.iter_mut()) {
            (*ev, *rv) = exact_split(*gv, *ev);
        }
        e1.push(e);
        e2.push(z);
        remainder.push(r);
    }
    Ok(GreenDecomposition {
        y: column.y,
        s: column.s,
        component: column.component,
        grid,
        times: column.times.clone(),
        g: column.fields.clone(),
        e1,
        e2,
        remainder,
        l1,
        l,
        pi1,
        fit_times,
    })
}

/// Pointwise templates of the decay theorem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateBundle {
    pub m: f64,
    pub eta: f64,
    pub out_minus: Vec<f64>,
    pub out_plus: Vec<f64>,
    pub in_minus: Vec<f64>,
    pub in_plus: Vec<f64>,
    pub all_minus: Vec<f64>,
    pub all_plus: Vec<f64>,
    /// Cone `[a_1^- t, a_N^+ t]`.
    pub a1_minus: f64,
    pub an_plus: f64,
}

pub fn template_bundle(chars: &ShockCharacteristics, m: f64, eta: f64) -> Result<TemplateBundle> {
    if !(m > 0.0) || !(eta > 0.0) {
        return Err(Error::InvalidParameter("template constants M and eta must be positive".into()));
    }
    let pick = |d: &crate::flux::CharacteristicData, dir: Direction| -> Vec<f64> {
        (0..d.dim()).filter(|&j| d.directions[j] == dir).map(|j| d.speeds[j]).collect()
    };
    let (a1, an) = chars.cone();
    Ok(TemplateBundle {
        m,
        eta,
        out_minus: pick(&chars.minus, Direction::Outgoing),
        out_plus: pick(&chars.plus, Direction::Outgoing),
        in_minus: pick(&chars.minus, Direction::Incoming),
        in_plus: pick(&chars.plus, Direction::Incoming),
        all_minus: chars.minus.speeds.clone(),
        all_plus: chars.plus.speeds.clone(),
        a1_minus: a1,
        an_plus: an,
    })
}

impl TemplateBundle {
    fn outgoing(&self) -> impl Iterator<Item = &f64> {
        self.out_minus.iter().chain(&self.out_plus)
    }

    pub fn theta_gauss(&self, x: f64, t: f64) -> f64 {
        let mt = self.m * t.max(f64::MIN_POSITIVE);
        self.outgoing().map(|a| (-(x - a * t).powi(2) / mt).exp()).sum::<f64>() / (1.0 + t).sqrt()
    }

    pub fn theta_inner(&self, x: f64, t: f64) -> f64 {
        self.outgoing().map(|a| 1.0 / (1.0 + (x - a * t).abs()).sqrt()).sum::<f64>() / (1.0 + x.abs() + t).sqrt()
    }

    pub fn theta_outer(&self, x: f64, t: f64) -> f64 {
        let st = t.sqrt();
        (1.0 + (x - self.a1_minus * t).abs() + st).powf(-1.5) + (1.0 + (x - self.an_plus * t).abs() + st).powf(-1.5)
    }

    /// Indicator of the characteristic cone (0 when it is empty).
    pub fn chi(&self, x: f64, t: f64) -> f64 {
        let (lo, hi) = (self.a1_minus * t, self.an_plus * t);
        if lo <= hi && x >= lo && x <= hi {
            1.0
        } else {
            0.0
        }
    }

    /// `theta_gauss + chi theta_inner + (1 - chi) theta_outer`.
    pub fn pointwise(&self, x: f64, t: f64) -> f64 {
        let chi = self.chi(x, t);
        self.theta_gauss(x, t) + chi * self.theta_inner(x, t) + (1.0 - chi) * self.theta_outer(x, t)
    }

    /// `theta_gauss + theta_inner + theta_outer`.
    pub fn theta_sum(&self, x: f64, t: f64) -> f64 {
        self.theta_gauss(x, t) + self.theta_inner(x, t) + self.theta_outer(x, t)
    }

    pub fn big_theta(&self, y: f64, s: f64) -> f64 {
        let th = self.theta_sum(y, s);
        if s <= 0.0 {
            return th;
        }
        (1.0 + s).sqrt() / s.sqrt() * th * th + th / (1.0 + s)
    }

    pub fn phi1(&self, y: f64, s: f64) -> f64 {
        (-self.eta * y.abs()).exp() * self.theta_sum(y, s) / (1.0 + s).sqrt()
    }

    pub fn phi2(&self, y: f64, s: f64) -> f64 {
        (-self.eta * y.abs()).exp() * (1.0 + s).powf(-1.5)
    }

    /// Remainder bound (without the constant C) for `G~(x, t; y, s)`; the
    /// `y > 0` case is the mirror image of the `y <= 0` one.
    pub fn remainder_bound(&self, x: f64, t: f64, y: f64, s: f64) -> f64 {
        let tau = t - s;
        if tau <= 0.0 {
            return f64::INFINITY;
        }
        let neg = |v: &[f64]| v.iter().map(|a| -a).collect::<Vec<f64>>();
        let (x, y, all, out_m, in_m, out_p) = if y <= 0.0 {
            (x, y, self.all_minus.clone(), self.out_minus.clone(), self.in_minus.clone(), self.out_plus.clone())
        } else {
            (-x, -y, neg(&self.all_plus), neg(&self.out_plus), neg(&self.in_plus), neg(&self.out_minus))
        };
        let eta = self.eta;
        let mt = self.m * tau;
        let xp = x.max(0.0);
        let xm = (-x).max(0.0);
        let rt = tau.sqrt();
        let mut b = (-eta * ((x - y).abs() + tau)).exp();
        for a in &all {
            b += (-(x - y - a * tau).powi(2) / mt - eta * xp).exp() / rt;
        }
        for ao in &out_m {
            for ai in &in_m {
                if (ao * tau).abs() >= y.abs() {
                    let lag = tau - (y / ao).abs();
                    b += (-(x - ai * lag).powi(2) / mt - eta * xp).exp() / rt;
                }
            }
        }
        for ai in &in_m {
            for ao in &out_p {
                if (ai * tau).abs() >= y.abs() {
                    let lag = tau - (y / ai).abs();
                    b += (-(x - ao * lag).powi(2) / mt - eta * xm).exp() / rt;
                }
            }
        }
        b
    }
}

/// Sampling window for template checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub t_min: f64,
    pub t_max: f64,
    /// Only `|x| <= x_max` is used.
    pub x_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateCheck {
    pub c_min: f64,
    pub ceiling: f64,
    pub violations: usize,
    pub samples: usize,
    pub m: f64,
    pub eta: f64,
}

/// Mollifier transient excluded from template checks.
pub const TRANSIENT: f64 = 0.5;

/// `C_min = sup |G~| / bound` over the region and the number of entries whose
/// ratio exceeds `ceiling` (`None`: `2 C_min`).
pub fn check_template_bound(
    decomps: &[GreenDecomposition],
    bundle: &TemplateBundle,
    region: &Region,
    ceiling: Option<f64>,
) -> Result<TemplateCheck> {
    let ratios = template_ratios(decomps, bundle, region)?;
    let c_min = ratios.iter().copied().fold(0.0, f64::max);
    let ceiling = ceiling.unwrap_or(2.0 * c_min);
    let violations = ratios.iter().filter(|&&r| r > ceiling).count();
    Ok(TemplateCheck { c_min, ceiling, violations, samples: ratios.len(), m: bundle.m, eta: bundle.eta })
}

fn template_ratios(decomps: &[GreenDecomposition], bundle: &TemplateBundle, region: &Region) -> Result<Vec<f64>> {
    let t_lo = region.t_min.max(TRANSIENT);
    let mut out = Vec::new();
    for d in decomps {
        for (t, r) in d.times.iter().zip(&d.remainder) {
            let tau = t - d.s;
            if tau < t_lo || tau > region.t_max {
                continue;
            }
            for i in 0..d.grid.nx() {
                let x = d.grid.x(i);
                if x.abs() > region.x_max {
                    continue;
                }
                let g = r.at(i).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                out.push(g / bundle.remainder_bound(x, *t, d.y, d.s));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyRegion);
    }
    Ok(out)
}

/// Minimizes `C_min` over `M` in `ms` and `eta` in `etas`.
pub fn fit_template_constants(
    decomps: &[GreenDecomposition],
    chars: &ShockCharacteristics,
    region: &Region,
    ms: &[f64],
    etas: &[f64],
) -> Result<TemplateCheck> {
    let mut jobs = Vec::new();
    for &m in ms {
        for &eta in etas {
            jobs.push((m, eta));
        }
    }
    let results: Vec<TemplateCheck> = jobs
        .par_iter()
        .map(|&(m, eta)| check_template_bound(decomps, &template_bundle(chars, m, eta)?, region, None))
        .collect::<Result<_>>()?;
    results
        .into_iter()
        .min_by(|a, b| a.c_min.partial_cmp(&b.c_min).expect("finite C"))
        .ok_or(Error::EmptyRegion)
}

/// Default template constant grids: `M` in {25, 50, 100, 200}, `eta` on a log
/// grid from 1e-3 to 1.
pub fn default_template_grid() -> (Vec<f64>, Vec<f64>) {
    let ms = vec![25.0, 50.0, 100.0, 200.0];
    let etas = (0..13).map(|k| 10f64.powf(-3.0 + 0.25 * k as f64)).collect();
    (ms, etas)
}

/// `C_min` of `|pi - pi_inf| <= C errfn((|y| - a tau)/(M sqrt(tau)))` over a
/// sampled `(y, tau)` lattice, minimized over the given `a` and `M` values.
pub fn pi_envelope_constant(
    chars: &ShockCharacteristics,
    l: &LCoefficients,
    ys: &[f64],
    taus: &[f64],
    speeds: &[f64],
    ms: &[f64],
) -> Result<(f64, f64, f64)> {
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for &a in speeds {
        for &m in ms {
            let mut c = 0.0f64;
            for &y in ys {
                for &tau in taus {
                    let p = pi_functions(chars, l, y, 0.0, tau)?;
                    let diff = p.pi.iter().zip(&p.limit).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                    let env = errfn((y.abs() - a * tau) / (m * tau.sqrt()));
                    if diff > 0.0 {
                        c = c.max(diff / env);
                    }
                }
            }
            if c < best.0 {
                best = (c, a, m);
            }
        }
    }
    if best.0.is_finite() {
        Ok(best)
    } else {
        Err(Error::EmptyRegion)
    }
}

/// Which convolution bound to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvolutionKind {
    /// `int |pi(y,0,t)| (1+|y|)^{-3/2} dy <= C`.
    PiUniform,
    /// `int |pi_t(y,0,t)| (1+|y|)^{-3/2} dy <= C (1+t)^{-3/2}`.
    PiTime,
    /// `int |pi(y,0,t) - pi(y,0,inf)| (1+|y|)^{-3/2} dy <= C (1+t)^{-1/2}`.
    PiTail,
    /// `int |G~(x,t;y,0)| (1+|y|)^{-3/2} dy <= C theta(x,t)` over a y-lattice
    /// of decomposed columns.
    RemainderInitial,
}

impl ConvolutionKind {
    /// Decay exponent of the right-hand side in `(1+t)`.
    pub fn exponent(self) -> f64 {
        match self {
            ConvolutionKind::PiUniform | ConvolutionKind::RemainderInitial => 0.0,
            ConvolutionKind::PiTime => -1.5,
            ConvolutionKind::PiTail => -0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvolutionReport {
    pub kind: ConvolutionKind,
    pub times: Vec<f64>,
    pub lhs: Vec<f64>,
    /// `sup_t LHS / RHS` with unit constant.
    pub ratio: f64,
    /// Log-log slope of LHS against `1 + t` (pi checks only).
    pub slope: Option<f64>,
    pub expected_slope: f64,
}

/// Quadrature of the convolution bounds against `(1+|y|)^{-3/2}` on the
/// y-range `[-y_max, y_max]` with spacing `dy`.
pub fn convolution_check(
    kind: ConvolutionKind,
    chars: &ShockCharacteristics,
    l: &LCoefficients,
    times: &[f64],
    y_max: f64,
    dy: f64,
    decomps: Option<(&[GreenDecomposition], &TemplateBundle)>,
) -> Result<ConvolutionReport> {
    let ny = (2.0 * y_max / dy).round() as usize + 1;
    if ny > 50_000_000 / times.len().max(1) {
        return Err(Error::QuadratureBudgetExceeded(format!("{ny} y-nodes x {} times", times.len())));
    }
    let weight = |y: f64| (1.0 + y.abs()).powf(-1.5);
    let (lhs, ratio) = match kind {
        ConvolutionKind::RemainderInitial => {
            let (ds, bundle) = decomps.ok_or(Error::TableCoverageInsufficient("remainder tables required".into()))?;
            remainder_convolution(ds, bundle, times, weight)?
        }
        _ => {
            let mut lhs = Vec::with_capacity(times.len());
            for &t in times {
                let mut vals = Vec::with_capacity(ny);
                for k in 0..ny {
                    let y = -y_max + k as f64 * dy;
                    let p = pi_functions(chars, l, y, 0.0, t)?;
                    let v = match kind {
                        ConvolutionKind::PiUniform => p.pi.iter().map(|x| x.abs()).fold(0.0, f64::max),
                        ConvolutionKind::PiTime => p.dt.iter().map(|x| x.abs()).fold(0.0, f64::max),
                        _ => p.pi.iter().zip(&p.limit).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
                    };
                    vals.push(v * weight(y));
                }
                lhs.push(trapezoid(&vals, dy));
            }
            let ex = kind.exponent();
            let ratio = times.iter().zip(&lhs).map(|(t, v)| v / (1.0 + t).powf(ex)).fold(0.0, f64::max);
            (lhs, ratio)
        }
    };
    let slope = if kind == ConvolutionKind::RemainderInitial {
        None
    } else {
        let lx: Vec<f64> = times.iter().map(|t| (1.0 + t).ln()).collect();
        let ly: Vec<f64> = lhs.iter().map(|v| v.max(1e-300).ln()).collect();
        fit_line(&lx, &ly).map(|f| f.slope)
    };
    Ok(ConvolutionReport { kind, times: times.to_vec(), lhs, ratio, slope, expected_slope: kind.exponent() })
}

fn remainder_convolution(
    decomps: &[GreenDecomposition],
    bundle: &TemplateBundle,
    times: &[f64],
    weight: impl Fn(f64) -> f64,
) -> Result<(Vec<f64>, f64)> {
    if decomps.len() < 2 {
        return Err(Error::TableCoverageInsufficient("need at least two source points".into()));
    }
    let mut ds: Vec<&GreenDecomposition> = decomps.iter().collect();
    ds.sort_by(|a, b| a.y.partial_cmp(&b.y).expect("finite y"));
    let grid = ds[0].grid;
    let ys: Vec<f64> = ds.iter().map(|d| d.y).collect();
    let mut lhs = Vec::new();
    let mut ratio = 0.0f64;
    for &t in times {
        let idx: Vec<usize> = ds
            .iter()
            .map(|d| {
                d.times
                    .iter()
                    .position(|&tt| (tt - d.s - t).abs() < 1e-9)
                    .ok_or_else(|| Error::TableCoverageInsufficient(format!("time {t} missing for y = {}", d.y)))
            })
            .collect::<Result<_>>()?;
        let mut sup = 0.0f64;
        for i in 0..grid.nx() {
            let vals: Vec<f64> = ds
                .iter()
                .zip(&idx)
                .map(|(d, &m)| d.remainder[m].at(i).iter().fold(0.0f64, |a, v| a.max(v.abs())) * weight(d.y))
                .collect();
            let integral: f64 = ys.windows(2).zip(vals.windows(2)).map(|(y, v)| 0.5 * (y[1] - y[0]) * (v[0] + v[1])).sum();
            let x = grid.x(i);
            ratio = ratio.max(integral / bundle.theta_sum(x, t));
            sup = sup.max(integral);
        }
        lhs.push(sup);
    }
    Ok((lhs, ratio))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_at_unit_time() {
        let v = g0_kernel(0.0, 1.0, 0.0, 0.0);
        assert!((v - (-1.0f64).exp() / (4.0 * std::f64::consts::PI).sqrt()).abs() < 1e-16);
        assert!((v - 0.10378).abs() < 1e-5);
        assert_eq!(g0_kernel(1.0, 0.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn bracket_derivatives() {
        for (y, a, tau) in [(3.0, 1.0, 2.0), (0.5, 0.7, 0.3), (10.0, 2.0, 7.0)] {
            let h = 1e-6;
            let (_, bt, by) = bracket(y, a, tau);
            let ft = (bracket(y, a, tau + h).0 - bracket(y, a, tau - h).0) / (2.0 * h);
            let fy = (bracket(y + h, a, tau).0 - bracket(y - h, a, tau).0) / (2.0 * h);
            assert!((bt - ft).abs() < 1e-8, "{bt} {ft}");
            assert!((by - fy).abs() < 1e-8, "{by} {fy}");
        }
    }

    #[test]
    fn exact_split_reconstructs() {
        for (g, a) in [(0.1, 0.3), (3.0, -1e-9), (0.0, 5e-324), (2.473669868706847e-6, 3.4764648507973463e-7)] {
            let (a2, r) = exact_split(g, a);
            assert_eq!(a2 + r, g);
            assert!((a2 - a).abs() <= 4.0 * f64::EPSILON * a.abs());
        }
    }
}

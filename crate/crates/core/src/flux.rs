//! Flux models and the characteristic (eigen)data at the shock endstates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance (times the spectral radius) below which two speeds are
/// considered equal or a speed is considered zero.
pub const SPEED_GAP_TOL: f64 = 1e-8;

/// Conservation-law flux `f: R^N -> R^N` with its Jacobian and Hessian action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum FluxModel {
    /// Scalar Burgers flux `f(u) = u^2 / 2`.
    Burgers,
    /// `f(u) = A u`.
    Linear { a: Vec<Vec<f64>> },
    /// `f(u) = A u + 1/2 (u^T Q1 u, u^T Q2 u)`.
    #[serde(rename = "quadratic2")]
    Quadratic2 { a: [[f64; 2]; 2], q1: [[f64; 2]; 2], q2: [[f64; 2]; 2] },
}

impl FluxModel {
    pub fn dim(&self) -> usize {
        match self {
            FluxModel::Burgers => 1,
            FluxModel::Linear { a } => a.len(),
            FluxModel::Quadratic2 { .. } => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let FluxModel::Linear { a } = self {
            let n = a.len();
            if n == 0 {
                return Err(Error::InvalidParameter("linear flux needs a nonempty matrix".into()));
            }
            if let Some(row) = a.iter().find(|r| r.len() != n) {
                return Err(Error::DimensionMismatch { expected: n, found: row.len() });
            }
        }
        Ok(())
    }

    /// Writes `f(u)` into `out`.
    pub fn flux_into(&self, u: &[f64], out: &mut [f64]) {
        match self {
            FluxModel::Burgers => out[0] = 0.5 * u[0] * u[0],
            FluxModel::Linear { a } => {
                for (o, row) in out.iter_mut().zip(a) {
                    *o = row.iter().zip(u).map(|(m, x)| m * x).sum();
                }
            }
            FluxModel::Quadratic2 { a, q1, q2 } => {
                for k in 0..2 {
                    let q = if k == 0 { q1 } else { q2 };
                    let mut quad = 0.0;
                    for i in 0..2 {
                        for j in 0..2 {
                            quad += u[i] * q[i][j] * u[j];
                        }
                    }
                    out[k] = a[k][0] * u[0] + a[k][1] * u[1] + 0.5 * quad;
                }
            }
        }
    }

    pub fn flux(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.flux_into(u, &mut out);
        out
    }

    /// Writes the row-major Jacobian `f_u(u)` into `out` (length N*N).
    pub fn jacobian_into(&self, u: &[f64], out: &mut [f64]) {
        match self {
            FluxModel::Burgers => out[0] = u[0],
            FluxModel::Linear { a } => {
                let n = a.len();
                for i in 0..n {
                    out[i * n..(i + 1) * n].copy_from_slice(&a[i]);
                }
            }
            FluxModel::Quadratic2 { a, q1, q2 } => {
                for k in 0..2 {
                    let q = if k == 0 { q1 } else { q2 };
                    for j in 0..2 {
                        let sym: f64 = (0..2).map(|i| 0.5 * (q[i][j] + q[j][i]) * u[i]).sum();
                        out[k * 2 + j] = a[k][j] + sym;
                    }
                }
            }
        }
    }

    pub fn jacobian(&self, u: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        let mut buf = vec![0.0; n * n];
        self.jacobian_into(u, &mut buf);
        DMatrix::from_row_slice(n, n, &buf)
    }

    /// `f(base + d) - f(base)`, evaluated as `f_u(base) d + f_uu[d, d] / 2`.
    /// This is exact for every built-in model (all are at most quadratic) and
    /// keeps full relative precision when `d` is tiny.
    pub fn flux_increment(&self, base: &[f64], d: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut jac = vec![0.0; n * n];
        self.jacobian_into(base, &mut jac);
        let quad = self.hessian_action(base, d, d);
        (0..n)
            .map(|r| (0..n).map(|c| jac[r * n + c] * d[c]).sum::<f64>() + 0.5 * quad[r])
            .collect()
    }

    /// Bilinear Hessian action `f_uu(u)[w, v]`.
    pub fn hessian_action(&self, _u: &[f64], w: &[f64], v: &[f64]) -> Vec<f64> {
        match self {
            FluxModel::Burgers => vec![w[0] * v[0]],
            FluxModel::Linear { a } => vec![0.0; a.len()],
            FluxModel::Quadratic2 { q1, q2, .. } => [q1, q2]
                .iter()
                .map(|q| {
                    let mut s = 0.0;
                    for i in 0..2 {
                        for j in 0..2 {
                            s += w[i] * 0.5 * (q[i][j] + q[j][i]) * v[j];
                        }
                    }
                    s
                })
                .collect(),
        }
    }
}

/// Which endstate a set of characteristic data belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Minus,
    Plus,
}

impl Side {
    pub fn label(self) -> &'static str {
        match self {
            Side::Minus => "minus",
            Side::Plus => "plus",
        }
    }
}

/// Whether a characteristic points toward the shock (incoming) or away.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Incoming,
    Outgoing,
}

/// Eigenstructure of `f_u(u_side)`, speeds sorted ascending.
#[derive(Debug, Clone)]
pub struct CharacteristicData {
    pub side: Side,
    pub state: Vec<f64>,
    pub speeds: Vec<f64>,
    /// Right eigenvectors, `right[j]` belongs to `speeds[j]`.
    pub right: Vec<DVector<f64>>,
    /// Left eigenvectors normalized so that `<left[j], right[k]> = delta_jk`.
    pub left: Vec<DVector<f64>>,
    pub directions: Vec<Direction>,
    pub lax_index: usize,
}

impl CharacteristicData {
    pub fn dim(&self) -> usize {
        self.speeds.len()
    }

    pub fn incoming(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.dim()).filter(|&j| self.directions[j] == Direction::Incoming)
    }

    pub fn outgoing(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.dim()).filter(|&j| self.directions[j] == Direction::Outgoing)
    }

    pub fn incoming_speeds(&self) -> Vec<f64> {
        self.incoming().map(|j| self.speeds[j]).collect()
    }

    pub fn outgoing_speeds(&self) -> Vec<f64> {
        self.outgoing().map(|j| self.speeds[j]).collect()
    }

    /// `sum_j a_j r_j l_j^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for j in 0..n {
            m += self.speeds[j] * &self.right[j] * self.left[j].transpose();
        }
        m
    }
}

/// Characteristic data at both endstates of a shock.
#[derive(Debug, Clone)]
pub struct ShockCharacteristics {
    pub minus: CharacteristicData,
    pub plus: CharacteristicData,
}

impl ShockCharacteristics {
    pub fn dim(&self) -> usize {
        self.minus.dim()
    }

    pub fn lax_index(&self) -> usize {
        self.minus.lax_index
    }

    pub fn jump(&self) -> Vec<f64> {
        self.plus.state.iter().zip(&self.minus.state).map(|(p, m)| p - m).collect()
    }

    /// Smallest speed at u_- and largest speed at u_+ (the characteristic cone).
    pub fn cone(&self) -> (f64, f64) {
        (self.minus.speeds[0], *self.plus.speeds.last().expect("nonempty speeds"))
    }

    /// Outgoing right eigenvectors in determinant column order: the minus side
    /// ones first, then the plus side ones.
    fn outgoing_columns(&self) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let minus = self.minus.outgoing().map(|j| self.minus.right[j].clone()).collect();
        let plus = self.plus.outgoing().map(|j| self.plus.right[j].clone()).collect();
        (minus, plus)
    }
}

/// Real eigenstructure of a Jacobian: ascending speeds, unit right
/// eigenvectors and dual left eigenvectors. Fails unless the speeds are real,
/// distinct and nonzero.
pub fn eigen_decompose(
    jac: &DMatrix<f64>,
    side: Side,
) -> Result<(Vec<f64>, Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let n = jac.nrows();
    let eig = jac.clone().complex_eigenvalues();
    let radius = eig.iter().map(|z| z.norm()).fold(0.0_f64, f64::max).max(f64::MIN_POSITIVE);
    let mut speeds = Vec::with_capacity(n);
    for (index, z) in eig.iter().enumerate() {
        if z.im.abs() > SPEED_GAP_TOL * radius.max(1.0) {
            return Err(Error::ComplexSpeeds { side: side.label(), index, imag: z.im });
        }
        speeds.push(z.re);
    }
    speeds.sort_by(|a, b| a.partial_cmp(b).expect("finite speeds"));
    for w in speeds.windows(2) {
        let gap = w[1] - w[0];
        if gap < SPEED_GAP_TOL * radius {
            return Err(Error::DegenerateSpeeds { side: side.label(), gap });
        }
    }
    for (index, &a) in speeds.iter().enumerate() {
        if a.abs() < SPEED_GAP_TOL * radius.max(1e-300) || a == 0.0 {
            return Err(Error::ZeroSpeed { side: side.label(), index, value: a });
        }
    }
    // Right eigenvectors from the null space of (J - a I), refined by one step
    // of inverse iteration so that the residual is at roundoff level.
    let mut right = Vec::with_capacity(n);
    for &a in &speeds {
        let shifted = jac - DMatrix::identity(n, n) * a;
        let svd = shifted.clone().svd(false, true);
        let v_t = svd.v_t.ok_or_else(|| Error::EigensolverFailure("SVD did not return V".into()))?;
        let (imin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
        let mut r: DVector<f64> = v_t.row(imin).transpose();
        let perturbed = jac - DMatrix::identity(n, n) * (a + 1e-10 * radius.max(1.0));
        if let Some(lu) = Some(perturbed.lu()) {
            if let Some(refined) = lu.solve(&r) {
                if refined.iter().all(|x| x.is_finite()) && refined.norm() > 0.0 {
                    r = refined;
                }
            }
        }
        r /= r.norm();
        // Deterministic sign: the largest-magnitude entry is positive.
        let imax = r.iamax();
        if r[imax] < 0.0 {
            r = -r;
        }
        right.push(r);
    }
    let rmat = DMatrix::from_columns(&right);
    let inv = rmat
        .try_inverse()
        .ok_or_else(|| Error::EigensolverFailure("right eigenvectors are singular".into()))?;
    let left = (0..n).map(|j| inv.row(j).transpose()).collect();
    Ok((speeds, right, left))
}

/// Lax index p (1-based) for which
/// `a^-_{N-p} < 0 < a^-_{N-p+1}` and `a^+_{N-p+1} < 0 < a^+_{N-p+2}`,
/// with out-of-range indices treated as vacuously true.
pub fn lax_index(minus: &[f64], plus: &[f64]) -> Option<usize> {
    let n = minus.len();
    // 1-based accessor; None means vacuous.
    let at = |v: &[f64], k: isize| -> Option<f64> {
        if k >= 1 && (k as usize) <= n {
            Some(v[k as usize - 1])
        } else {
            None
        }
    };
    (1..=n).find(|&p| {
        let p = p as isize;
        let n = n as isize;
        at(minus, n - p).is_none_or(|a| a < 0.0)
            && at(minus, n - p + 1).is_none_or(|a| a > 0.0)
            && at(plus, n - p + 1).is_none_or(|a| a < 0.0)
            && at(plus, n - p + 2).is_none_or(|a| a > 0.0)
    })
}

/// Eigen-decomposes `f_u(u_-)` and `f_u(u_+)` and classifies the shock.
pub fn characteristic_data(model: &FluxModel, u_minus: &[f64], u_plus: &[f64]) -> Result<ShockCharacteristics> {
    model.validate()?;
    let n = model.dim();
    for u in [u_minus, u_plus] {
        if u.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: u.len() });
        }
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("endstates must be finite".into()));
        }
    }
    let (sm, rm, lm) = eigen_decompose(&model.jacobian(u_minus), Side::Minus)?;
    let (sp, rp, lp) = eigen_decompose(&model.jacobian(u_plus), Side::Plus)?;
    let p = lax_index(&sm, &sp).ok_or_else(|| {
        Error::NotLax(format!("speeds at u- = {sm:?}, at u+ = {sp:?} admit no Lax index"))
    })?;
    let dir_minus = sm
        .iter()
        .map(|&a| if a > 0.0 { Direction::Incoming } else { Direction::Outgoing })
        .collect();
    let dir_plus = sp
        .iter()
        .map(|&a| if a < 0.0 { Direction::Incoming } else { Direction::Outgoing })
        .collect();
    Ok(ShockCharacteristics {
        minus: CharacteristicData {
            side: Side::Minus,
            state: u_minus.to_vec(),
            speeds: sm,
            right: rm,
            left: lm,
            directions: dir_minus,
            lax_index: p,
        },
        plus: CharacteristicData {
            side: Side::Plus,
            state: u_plus.to_vec(),
            speeds: sp,
            right: rp,
            left: lp,
            directions: dir_plus,
            lax_index: p,
        },
    })
}

fn liu_majda_matrix(chars: &ShockCharacteristics, jump: &[f64]) -> Result<DMatrix<f64>> {
    let n = chars.dim();
    if jump.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: jump.len() });
    }
    let (minus, plus) = chars.outgoing_columns();
    let mut cols: Vec<DVector<f64>> = minus;
    cols.push(DVector::from_column_slice(jump));
    cols.extend(plus);
    if cols.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: cols.len() });
    }
    Ok(DMatrix::from_columns(&cols))
}

/// `det(r^-_out..., [u], r^+_out...)`.
pub fn liu_majda_determinant(chars: &ShockCharacteristics, jump: &[f64]) -> Result<f64> {
    Ok(liu_majda_matrix(chars, jump)?.determinant())
}

/// Vector orthogonal to every outgoing right eigenvector, scaled to unit
/// length with its largest entry positive.
pub fn psi1_unit(chars: &ShockCharacteristics) -> Result<DVector<f64>> {
    let n = chars.dim();
    let (minus, plus) = chars.outgoing_columns();
    let slot = minus.len();
    // Generalized cross product: psi_k = det[r^-_out, e_k, r^+_out].
    let mut psi = DVector::zeros(n);
    let scale: f64 = minus.iter().chain(&plus).map(|r| r.norm()).product();
    for k in 0..n {
        let mut cols = minus.clone();
        let mut e = DVector::zeros(n);
        e[k] = 1.0;
        cols.push(e);
        cols.extend(plus.iter().cloned());
        let _ = slot;
        psi[k] = DMatrix::from_columns(&cols).determinant();
    }
    let norm = psi.norm();
    if norm <= 1e-12 * scale.max(1.0) {
        return Err(Error::RankDeficiency);
    }
    psi /= norm;
    let imax = psi.iamax();
    if psi[imax] < 0.0 {
        psi = -psi;
    }
    Ok(psi)
}

/// The adjoint constant psi_1, normalized so that `<psi_1, [u]> = 1`.
pub fn psi1(chars: &ShockCharacteristics) -> Result<DVector<f64>> {
    let unit = psi1_unit(chars)?;
    let jump = DVector::from_vec(chars.jump());
    let pairing = unit.dot(&jump);
    if pairing.abs() <= 1e-12 * jump.norm().max(1e-300) {
        return Err(Error::RankDeficiency);
    }
    Ok(unit / pairing)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_model() -> FluxModel {
        // Diagonal-dominant A with weak quadratic coupling; the Lax 1-shock
        // below connects u- = (1, 0.2) to a computed u+.
        FluxModel::Quadratic2 {
            a: [[0.0, 0.3], [0.3, 2.0]],
            q1: [[1.0, 0.0], [0.0, 0.2]],
            q2: [[0.1, 0.0], [0.0, 0.5]],
        }
    }

    #[test]
    fn burgers_characteristics() {
        let c = characteristic_data(&FluxModel::Burgers, &[1.0], &[-1.0]).unwrap();
        assert_eq!(c.minus.speeds, vec![1.0]);
        assert_eq!(c.plus.speeds, vec![-1.0]);
        assert_eq!(c.minus.directions, vec![Direction::Incoming]);
        assert_eq!(c.plus.directions, vec![Direction::Incoming]);
        assert_eq!(c.lax_index(), 1);
    }

    #[test]
    fn diagonal_linear_flux() {
        let m = FluxModel::Linear { a: vec![vec![-1.0, 0.0], vec![0.0, 2.0]] };
        for u in [[0.3, 0.1], [-4.0, 7.0]] {
            let (speeds, right, left) = eigen_decompose(&m.jacobian(&u), Side::Minus).unwrap();
            assert_eq!(speeds, vec![-1.0, 2.0]);
            for j in 0..2 {
                for k in 0..2 {
                    let expect = if j == k { 1.0 } else { 0.0 };
                    assert!((right[j][k] - expect).abs() < 1e-12);
                    assert!((left[j][k] - expect).abs() < 1e-12);
                }
            }
        }
        assert_eq!(lax_index(&[-1.0, 2.0], &[-1.0, 2.0]), None);
        assert_eq!(lax_index(&[-1.0, 2.0], &[-3.0, -0.5]), Some(1));
        assert_eq!(lax_index(&[1.0, 2.0], &[-3.0, 0.5]), Some(2));
    }

    #[test]
    fn hypothesis_violations_are_reported() {
        let zero = FluxModel::Linear { a: vec![vec![0.0]] };
        assert!(matches!(characteristic_data(&zero, &[1.0], &[2.0]), Err(Error::ZeroSpeed { .. })));
        let degenerate = FluxModel::Linear { a: vec![vec![1.0, 0.0], vec![0.0, 1.0]] };
        assert!(matches!(
            characteristic_data(&degenerate, &[1.0, 0.0], &[0.0, 1.0]),
            Err(Error::DegenerateSpeeds { .. })
        ));
        let rotation = FluxModel::Linear { a: vec![vec![0.0, -1.0], vec![1.0, 0.0]] };
        assert!(matches!(
            characteristic_data(&rotation, &[1.0, 0.0], &[0.0, 1.0]),
            Err(Error::ComplexSpeeds { .. })
        ));
        assert!(matches!(characteristic_data(&FluxModel::Burgers, &[-1.0], &[1.0]), Err(Error::NotLax(_))));
    }

    #[test]
    fn burgers_liu_majda_and_psi1() {
        let c = characteristic_data(&FluxModel::Burgers, &[1.0], &[-1.0]).unwrap();
        assert!((liu_majda_determinant(&c, &c.jump()).unwrap() + 2.0).abs() < 1e-15);
        assert_eq!(liu_majda_determinant(&c, &[0.0]).unwrap(), 0.0);
        let psi = psi1(&c).unwrap();
        assert!((psi[0] + 0.5).abs() < 1e-15);
        assert!(matches!(liu_majda_determinant(&c, &[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
    }

    fn hand_built(minus: &[f64], plus: &[f64], jump: [f64; 2]) -> ShockCharacteristics {
        let side = |side: Side, speeds: &[f64], state: Vec<f64>| {
            let jac = DMatrix::from_diagonal(&DVector::from_column_slice(speeds));
            let (speeds, right, left) = eigen_decompose(&jac, side).unwrap();
            let directions = speeds
                .iter()
                .map(|&a| match (side, a > 0.0) {
                    (Side::Minus, true) | (Side::Plus, false) => Direction::Incoming,
                    _ => Direction::Outgoing,
                })
                .collect();
            CharacteristicData { side, state, speeds, right, left, directions, lax_index: 1 }
        };
        ShockCharacteristics {
            minus: side(Side::Minus, minus, vec![0.0, 0.0]),
            plus: side(Side::Plus, plus, jump.to_vec()),
        }
    }

    #[test]
    fn psi1_orthogonal_to_coordinate_outgoing_vector() {
        // minus speeds (-1, 2): r_1^- = e_1 is the single outgoing vector.
        let c = hand_built(&[-1.0, 2.0], &[-3.0, -0.5], [1.0, 3.0]);
        assert_eq!(c.minus.outgoing().count() + c.plus.outgoing().count(), 1);
        let psi = psi1(&c).unwrap();
        assert!(psi[0].abs() < 1e-15);
        assert!((psi[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((liu_majda_determinant(&c, &c.jump()).unwrap() - 3.0).abs() < 1e-14);
        // jump parallel to the outgoing vector: Liu-Majda fails.
        let degenerate = hand_built(&[-1.0, 2.0], &[-3.0, -0.5], [1.0, 0.0]);
        assert_eq!(liu_majda_determinant(&degenerate, &degenerate.jump()).unwrap(), 0.0);
        assert!(matches!(psi1(&degenerate), Err(Error::RankDeficiency)));
    }

    #[test]
    fn quadratic_jacobian_matches_finite_differences() {
        let m = quad_model();
        let u = [0.7, -0.4];
        let jac = m.jacobian(&u);
        let h = 1e-6;
        for j in 0..2 {
            let mut up = u;
            let mut um = u;
            up[j] += h;
            um[j] -= h;
            let fp = m.flux(&up);
            let fm = m.flux(&um);
            for i in 0..2 {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                assert!((fd - jac[(i, j)]).abs() <= 1e-6 * jac[(i, j)].abs().max(1.0));
            }
        }
        let d = [1e-3, -2e-3];
        let inc = m.flux_increment(&u, &d);
        let shifted = m.flux(&[u[0] + d[0], u[1] + d[1]]);
        let f0 = m.flux(&u);
        for i in 0..2 {
            assert!((inc[i] - (shifted[i] - f0[i])).abs() < 1e-15);
        }
        let w = [0.3, 1.1];
        let v = [-0.8, 0.25];
        let a = m.hessian_action(&u, &w, &v);
        let b = m.hessian_action(&u, &v, &w);
        for i in 0..2 {
            assert!((a[i] - b[i]).abs() < 1e-10);
        }
    }
}

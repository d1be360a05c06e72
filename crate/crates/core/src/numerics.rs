//! Small dense linear algebra helpers and fixed-step RK4 integration on a
//! uniform grid.
//!
//! Every Riccati, affine-correction and mean ODE in the crate is integrated
//! with the same classical fourth-order Runge–Kutta scheme so that all
//! trajectories are node-aligned. Coefficients are piecewise constant per grid
//! interval: the field closure receives the interval index and must use the
//! coefficients of that interval for all four stages.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

/// Magnitude beyond which a trajectory is treated as having escaped.
pub const BLOWUP_LIMIT: f64 = 1e12;

/// Condition numbers above this are treated as singular.
pub const COND_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, steps: usize) -> Result<Self> {
        if !(t0.is_finite() && t_end.is_finite()) {
            return Err(Error::InvalidGrid("non-finite horizon".into()));
        }
        if t_end <= t0 {
            return Err(Error::InvalidGrid(format!("T={t_end} must exceed t0={t0}")));
        }
        if steps < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 steps, got {steps}")));
        }
        Ok(Self { t0, t_end, steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn n_nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t_end
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(move |k| self.node(k))
    }

    /// Interval index containing `s` and the fractional position inside it.
    /// Times outside the horizon are clamped.
    pub fn locate(&self, s: f64) -> (usize, f64) {
        let x = ((s - self.t0) / self.dt()).clamp(0.0, self.steps as f64);
        let k = (x.floor() as usize).min(self.steps - 1);
        (k, x - k as f64)
    }

    /// Same horizon, different resolution.
    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        Self::new(self.t0, self.t_end, steps)
    }
}

/// Time-indexed matrix values on a uniform grid, linearly interpolated
/// between nodes.
///
/// Trajectories produced by [`integrate_backward`] also carry the field value
/// at both ends of each interval, which allows fourth-order accurate cubic
/// Hermite evaluation inside an interval (used by the RK4 stages of the
/// affine-correction solves that ride on a Riccati solution).
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixTrajectory {
    grid: TimeGrid,
    values: Vec<Mat>,
    interval_derivs: Option<Vec<(Mat, Mat)>>,
}

impl MatrixTrajectory {
    pub fn new(grid: TimeGrid, values: Vec<Mat>) -> Result<Self> {
        if values.len() != grid.n_nodes() {
            return Err(Error::Dimension(format!(
                "trajectory has {} values, grid has {} nodes",
                values.len(),
                grid.n_nodes()
            )));
        }
        let (r, c) = values[0].shape();
        if let Some(k) = values.iter().position(|m| m.shape() != (r, c)) {
            return Err(Error::Dimension(format!(
                "value {k} has shape {:?}, expected {:?}",
                values[k].shape(),
                (r, c)
            )));
        }
        Ok(Self { grid, values, interval_derivs: None })
    }

    pub fn constant(grid: TimeGrid, value: Mat) -> Self {
        Self { grid, values: vec![value; grid.n_nodes()], interval_derivs: None }
    }

    pub fn zeros(grid: TimeGrid, rows: usize, cols: usize) -> Self {
        Self::constant(grid, Mat::zeros(rows, cols))
    }

    pub fn from_fn(grid: TimeGrid, mut f: impl FnMut(usize, f64) -> Mat) -> Result<Self> {
        let values = (0..grid.n_nodes()).map(|k| f(k, grid.node(k))).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values[0].shape()
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn at(&self, k: usize) -> &Mat {
        &self.values[k]
    }

    pub fn terminal(&self) -> &Mat {
        self.values.last().expect("trajectory is never empty")
    }

    pub fn initial(&self) -> &Mat {
        &self.values[0]
    }

    /// Linear interpolation between nodes.
    pub fn eval(&self, s: f64) -> Mat {
        let (k, frac) = self.grid.locate(s);
        if frac == 0.0 {
            return self.values[k].clone();
        }
        &self.values[k] * (1.0 - frac) + &self.values[k + 1] * frac
    }

    /// Value inside interval `k` at fraction `theta` ∈ [0, 1]; cubic Hermite
    /// when interval derivatives are available, linear otherwise.
    pub fn eval_in_interval(&self, k: usize, theta: f64) -> Mat {
        if theta == 0.0 {
            return self.values[k].clone();
        }
        if theta == 1.0 {
            return self.values[k + 1].clone();
        }
        match &self.interval_derivs {
            Some(d) => {
                let h = self.grid.dt();
                let (dlo, dhi) = &d[k];
                let t = theta;
                let h00 = 2.0 * t * t * t - 3.0 * t * t + 1.0;
                let h10 = t * t * t - 2.0 * t * t + t;
                let h01 = -2.0 * t * t * t + 3.0 * t * t;
                let h11 = t * t * t - t * t;
                &self.values[k] * h00 + dlo * (h10 * h) + &self.values[k + 1] * h01 + dhi * (h11 * h)
            }
            None => &self.values[k] * (1.0 - theta) + &self.values[k + 1] * theta,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|x| x.is_finite()))
    }

    pub fn map(&self, mut f: impl FnMut(usize, &Mat) -> Mat) -> Result<Self> {
        let values = self.values.iter().enumerate().map(|(k, m)| f(k, m)).collect();
        Self::new(self.grid, values)
    }

    pub fn zip_map(&self, other: &Self, mut f: impl FnMut(&Mat, &Mat) -> Mat) -> Result<Self> {
        if self.grid != other.grid {
            return Err(Error::Dimension("trajectories live on different grids".into()));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| f(a, b)).collect();
        Self::new(self.grid, values)
    }

    /// Columns `[start, start+width)` of every value.
    pub fn columns(&self, start: usize, width: usize) -> Self {
        let values = self.values.iter().map(|m| m.columns(start, width).into_owned()).collect();
        let interval_derivs = self.interval_derivs.as_ref().map(|d| {
            d.iter()
                .map(|(lo, hi)| {
                    (lo.columns(start, width).into_owned(), hi.columns(start, width).into_owned())
                })
                .collect()
        });
        Self { grid: self.grid, values, interval_derivs }
    }

    /// Rows `[start, start+height)` of every value.
    pub fn rows(&self, start: usize, height: usize) -> Self {
        let values = self.values.iter().map(|m| m.rows(start, height).into_owned()).collect();
        let interval_derivs = self.interval_derivs.as_ref().map(|d| {
            d.iter()
                .map(|(lo, hi)| {
                    (lo.rows(start, height).into_owned(), hi.rows(start, height).into_owned())
                })
                .collect()
        });
        Self { grid: self.grid, values, interval_derivs }
    }

    /// Sup-norm distance over all nodes.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| max_abs(&(a - b)))
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(max_abs).fold(0.0, f64::max)
    }

    /// Resample onto a grid with the same horizon by linear interpolation.
    pub fn resample(&self, grid: TimeGrid) -> Self {
        let values = grid.nodes().map(|s| self.eval(s)).collect();
        Self { grid, values, interval_derivs: None }
    }
}

/// Post-step symmetrization rule for [`integrate_backward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symmetry {
    None,
    /// The state is a horizontal stack of square `b×b` blocks, each symmetric.
    Blocks(usize),
}

fn check_finite(m: &Mat, time: f64) -> Result<()> {
    if m.iter().all(|x| x.is_finite() && x.abs() <= BLOWUP_LIMIT) {
        Ok(())
    } else {
        Err(Error::NonFinite { time })
    }
}

fn symmetrize_blocks(m: &mut Mat, b: usize) {
    let blocks = m.ncols() / b;
    for j in 0..blocks {
        for r in 0..b {
            for c in (r + 1)..b {
                let avg = 0.5 * (m[(r, j * b + c)] + m[(c, j * b + r)]);
                m[(r, j * b + c)] = avg;
                m[(c, j * b + r)] = avg;
            }
        }
    }
}

/// Integrate `dM/ds = field(k, s, M)` backward from `terminal` at `T` to `t0`
/// with classical RK4. `k` is the index of the interval `[s_k, s_{k+1}]`
/// being traversed.
pub fn integrate_backward<F>(
    mut field: F,
    terminal: Mat,
    grid: &TimeGrid,
    symmetry: Symmetry,
) -> Result<MatrixTrajectory>
where
    F: FnMut(usize, f64, &Mat) -> Result<Mat>,
{
    let steps = grid.steps();
    let h = grid.dt();
    check_finite(&terminal, grid.t_end())?;
    let mut values = vec![Mat::zeros(0, 0); steps + 1];
    let mut derivs = vec![(Mat::zeros(0, 0), Mat::zeros(0, 0)); steps];
    values[steps] = terminal;
    for k in (0..steps).rev() {
        let s_hi = grid.node(k + 1);
        let s_lo = grid.node(k);
        let s_mid = s_hi - 0.5 * h;
        let m = &values[k + 1];
        let k1 = field(k, s_hi, m)?;
        let k2 = field(k, s_mid, &(m - &k1 * (0.5 * h)))?;
        let k3 = field(k, s_mid, &(m - &k2 * (0.5 * h)))?;
        let k4 = field(k, s_lo, &(m - &k3 * h))?;
        let mut next = m - (&k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (h / 6.0);
        if let Symmetry::Blocks(b) = symmetry {
            symmetrize_blocks(&mut next, b);
        }
        check_finite(&next, s_lo)?;
        let dlo = field(k, s_lo, &next)?;
        derivs[k] = (dlo, k1);
        values[k] = next;
    }
    let mut traj = MatrixTrajectory::new(*grid, values)?;
    traj.interval_derivs = Some(derivs);
    Ok(traj)
}

/// Integrate `dM/ds = field(k, s, M)` forward from `initial` at `t0` with
/// classical RK4.
pub fn integrate_forward<F>(mut field: F, initial: Mat, grid: &TimeGrid) -> Result<MatrixTrajectory>
where
    F: FnMut(usize, f64, &Mat) -> Result<Mat>,
{
    let h = grid.dt();
    check_finite(&initial, grid.t0())?;
    let mut values = Vec::with_capacity(grid.n_nodes());
    values.push(initial);
    for k in 0..grid.steps() {
        let s = grid.node(k);
        let m = &values[k];
        let k1 = field(k, s, m)?;
        let k2 = field(k, s + 0.5 * h, &(m + &k1 * (0.5 * h)))?;
        let k3 = field(k, s + 0.5 * h, &(m + &k2 * (0.5 * h)))?;
        let k4 = field(k, s + h, &(m + &k3 * h))?;
        let next = m + (&k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (h / 6.0);
        check_finite(&next, grid.node(k + 1))?;
        values.push(next);
    }
    MatrixTrajectory::new(*grid, values)
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eig_sym(m: &Mat) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    symmetrize(m).symmetric_eigenvalues().min()
}

/// 2-norm condition number.
pub fn condition_number(m: &Mat) -> f64 {
    if m.nrows() == 1 && m.ncols() == 1 {
        return if m[(0, 0)] == 0.0 { f64::INFINITY } else { 1.0 };
    }
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Largest singular value.
pub fn spectral_norm(m: &Mat) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.singular_values().max()
}

/// Solve `a·x = rhs` with LU, rejecting matrices whose condition number
/// exceeds [`COND_LIMIT`]. On rejection the condition number is returned.
pub fn solve_checked(a: &Mat, rhs: &Mat) -> std::result::Result<Mat, f64> {
    let cond = condition_number(a);
    if !(cond <= COND_LIMIT) {
        return Err(cond);
    }
    a.clone().lu().solve(rhs).ok_or(f64::INFINITY)
}

/// Inverse of a well-conditioned matrix; see [`solve_checked`].
pub fn inverse_checked(a: &Mat) -> std::result::Result<Mat, f64> {
    solve_checked(a, &Mat::identity(a.nrows(), a.nrows()))
}

/// Solve the 2×2 block system
///
/// ```text
/// [M11 M12] [X1]   [r1]
/// [M21 M22] [X2] = [r2]
/// ```
///
/// by eliminating `X1` through the Schur complement `M22 − M21·M11⁻¹·M12`.
pub fn solve_linear_block2(
    m11: &Mat,
    m12: &Mat,
    m21: &Mat,
    m22: &Mat,
    r1: &Mat,
    r2: &Mat,
) -> Result<(Mat, Mat)> {
    let n1 = m11.nrows();
    let n2 = m22.nrows();
    if m11.ncols() != n1 || m22.ncols() != n2 {
        return Err(Error::Dimension("diagonal blocks must be square".into()));
    }
    if m12.shape() != (n1, n2) || m21.shape() != (n2, n1) {
        return Err(Error::Dimension("off-diagonal block shapes do not match".into()));
    }
    if r1.nrows() != n1 || r2.nrows() != n2 || r1.ncols() != r2.ncols() {
        return Err(Error::Dimension("right-hand side shapes do not match".into()));
    }
    let inv11_m12 = solve_checked(m11, m12).map_err(|cond| Error::SingularBlock { cond })?;
    let inv11_r1 = solve_checked(m11, r1).map_err(|cond| Error::SingularBlock { cond })?;
    let schur = m22 - m21 * &inv11_m12;
    let rhs2 = r2 - m21 * &inv11_r1;
    let x2 = solve_checked(&schur, &rhs2).map_err(|cond| Error::SingularBlock { cond })?;
    let x1 = inv11_r1 - inv11_m12 * &x2;
    Ok((x1, x2))
}

/// Composite trapezoid rule on uniformly spaced samples.
pub fn trapezoid(values: &[f64], dt: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => {
            let inner: f64 = values[1..n - 1].iter().sum();
            dt * (0.5 * (values[0] + values[n - 1]) + inner)
        }
    }
}

/// `⟨x, M x⟩` for a column vector `x`.
pub fn quad_form(m: &Mat, x: &Mat) -> f64 {
    (x.transpose() * m * x)[(0, 0)]
}

pub fn dot(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn block_diag(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.nrows() + b.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((a.nrows(), a.ncols()), b.shape()).copy_from(b);
    out
}

pub fn hstack(blocks: &[&Mat]) -> Mat {
    let rows = blocks[0].nrows();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        out.view_mut((0, c), b.shape()).copy_from(*b);
        c += b.ncols();
    }
    out
}

pub fn vstack(blocks: &[&Mat]) -> Mat {
    let cols = blocks[0].ncols();
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), b.shape()).copy_from(*b);
        r += b.nrows();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(x: f64) -> Mat {
        Mat::from_element(1, 1, x)
    }

    #[test]
    fn grid_rejects_bad_horizons() {
        assert!(TimeGrid::new(1.0, 1.0, 10).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 1).is_err());
        let g = TimeGrid::new(0.0, 2.0, 4).unwrap();
        assert_eq!(g.dt(), 0.5);
        assert_eq!(g.node(4), 2.0);
        assert_eq!(g.locate(1.25), (2, 0.5));
        assert_eq!(g.locate(2.0), (3, 1.0));
    }

    #[test]
    fn zero_field_keeps_terminal() {
        let g = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let traj = integrate_backward(
            |_, _, m| Ok(Mat::zeros(m.nrows(), m.ncols())),
            Mat::identity(2, 2),
            &g,
            Symmetry::Blocks(2),
        )
        .unwrap();
        for m in traj.values() {
            assert_eq!(m, &Mat::identity(2, 2));
        }
    }

    #[test]
    fn linear_closed_form() {
        // dP/ds = Q² with Q = 1, P(1) = 0  ⇒  P(s) = −(1 − s)
        let g = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let traj = integrate_backward(|_, _, _| Ok(scalar(1.0)), scalar(0.0), &g, Symmetry::None)
            .unwrap();
        assert!((traj.initial()[(0, 0)] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn blowup_is_reported_with_time() {
        // dP/ds = −P² from P(1) = 1 escapes backward at s = 0 ... use P(1)=2: escape at s=0.5
        let g = TimeGrid::new(0.0, 1.0, 2000).unwrap();
        let err = integrate_backward(|_, _, m| Ok(-m * m), scalar(2.0), &g, Symmetry::None)
            .unwrap_err();
        match err {
            Error::NonFinite { time } => assert!(time > 0.45 && time < 0.55, "time {time}"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn rk4_order_four() {
        // dP/ds = −2aP + q − P²c²/g² (scalar Riccati), smooth on [0, 1]
        let (a, q, c, gam) = (-0.8, 1.0, 0.5, 2.0);
        let field = move |_: usize, _: f64, m: &Mat| {
            let p = m[(0, 0)];
            Ok(scalar(-2.0 * a * p + q - p * p * c * c / (gam * gam)))
        };
        let solve = |k: usize| {
            let g = TimeGrid::new(0.0, 1.0, k).unwrap();
            integrate_backward(field, scalar(0.0), &g, Symmetry::None).unwrap().initial()[(0, 0)]
        };
        let reference = solve(20000);
        let e1 = (solve(20) - reference).abs();
        let e2 = (solve(40) - reference).abs();
        assert!(e1 / e2 >= 8.0, "ratio {}", e1 / e2);
        assert!((solve(2000) - solve(4000)).abs() <= 1e-8);
    }

    #[test]
    fn hermite_midpoint_is_fourth_order() {
        let g = TimeGrid::new(0.0, 1.0, 40).unwrap();
        let traj = integrate_backward(|_, s, _| Ok(scalar(s.cos())), scalar(1.0f64.sin()), &g, Symmetry::None)
            .unwrap();
        let mid = traj.eval_in_interval(10, 0.5)[(0, 0)];
        let s = g.node(10) + 0.5 * g.dt();
        assert!((mid - s.sin()).abs() < 1e-9);
    }

    #[test]
    fn block_solve_hand_cases() {
        let i = Mat::identity(2, 2);
        let z = Mat::zeros(2, 2);
        let r1 = Mat::from_row_slice(2, 1, &[1.0, 2.0]);
        let r2 = Mat::from_row_slice(2, 1, &[3.0, 4.0]);
        let (x1, x2) = solve_linear_block2(&i, &z, &z, &i, &r1, &r2).unwrap();
        assert_eq!(x1, r1);
        assert_eq!(x2, r2);

        let (x, y) = solve_linear_block2(
            &scalar(2.0),
            &scalar(1.0),
            &scalar(1.0),
            &scalar(2.0),
            &scalar(3.0),
            &scalar(3.0),
        )
        .unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-15 && (y[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn block_solve_singular() {
        let err = solve_linear_block2(
            &scalar(0.0),
            &scalar(1.0),
            &scalar(1.0),
            &scalar(2.0),
            &scalar(3.0),
            &scalar(3.0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::SingularBlock { .. }));
    }

    fn random_block(rng: &mut ChaCha8Rng, n: usize, diag: f64) -> Mat {
        Mat::from_fn(n, n, |i, j| {
            let x: f64 = rng.random_range(-0.3..0.3);
            if i == j { diag + x } else { x }
        })
    }

    /// Block-Jacobi iteration as an independent oracle; converges for
    /// strongly diagonally dominant blocks.
    fn jacobi_oracle(m11: &Mat, m12: &Mat, m21: &Mat, m22: &Mat, r1: &Mat, r2: &Mat) -> (Mat, Mat) {
        let inv11 = m11.clone().try_inverse().unwrap();
        let inv22 = m22.clone().try_inverse().unwrap();
        let mut x1 = Mat::zeros(r1.nrows(), r1.ncols());
        let mut x2 = Mat::zeros(r2.nrows(), r2.ncols());
        for _ in 0..100 {
            let n1 = &inv11 * (r1 - m12 * &x2);
            let n2 = &inv22 * (r2 - m21 * &x1);
            x1 = n1;
            x2 = n2;
        }
        (x1, x2)
    }

    #[test]
    fn block_solve_matches_jacobi() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let m11 = random_block(&mut rng, 3, 3.0);
            let m22 = random_block(&mut rng, 3, 3.0);
            let m12 = random_block(&mut rng, 3, 0.0);
            let m21 = random_block(&mut rng, 3, 0.0);
            let r1 = Mat::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
            let r2 = Mat::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
            let (x1, x2) = solve_linear_block2(&m11, &m12, &m21, &m22, &r1, &r2).unwrap();
            let (o1, o2) = jacobi_oracle(&m11, &m12, &m21, &m22, &r1, &r2);
            assert!(max_abs(&(&x1 - o1)) < 1e-9);
            assert!(max_abs(&(&x2 - o2)) < 1e-9);
        }
    }

    #[test]
    fn block_solve_residuals_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n1 = rng.random_range(1..4);
            let n2 = rng.random_range(1..4);
            let m11 = random_block(&mut rng, n1, 2.0);
            let m22 = random_block(&mut rng, n2, 2.0);
            let m12 = Mat::from_fn(n1, n2, |_, _| rng.random_range(-0.5..0.5));
            let m21 = Mat::from_fn(n2, n1, |_, _| rng.random_range(-0.5..0.5));
            let r1 = Mat::from_fn(n1, 2, |_, _| rng.random_range(-5.0..5.0));
            let r2 = Mat::from_fn(n2, 2, |_, _| rng.random_range(-5.0..5.0));
            let (x1, x2) = solve_linear_block2(&m11, &m12, &m21, &m22, &r1, &r2).unwrap();
            let res1 = &m11 * &x1 + &m12 * &x2 - &r1;
            let res2 = &m21 * &x1 + &m22 * &x2 - &r2;
            let scale = 1.0 + max_abs(&r1).max(max_abs(&r2));
            assert!(max_abs(&res1).max(max_abs(&res2)) <= 1e-10 * scale);
        }
    }

    #[test]
    fn trapezoid_exact_for_linear() {
        let v: Vec<f64> = (0..=10).map(|k| k as f64 * 0.1).collect();
        assert!((trapezoid(&v, 0.1) - 0.5).abs() < 1e-15);
    }
}

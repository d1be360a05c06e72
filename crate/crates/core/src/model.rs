//! Problem data: the mean-field system, the initial law, solver settings,
//! validation and the JSON problem file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::Cholesky;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{max_abs, Mat, MatrixTrajectory, TimeGrid};

/// Coefficients of
///
/// ```text
/// dX = (A1 X + Ā1 E[X] + B1 u + B̄1 E[u] + C1 v + C̄1 E[v] + b) ds
///    + (A2 X + Ā2 E[X] + B2 u + B̄2 E[u] + C2 v + C̄2 E[v] + σ) dW
/// z  = (Q X, N1 u)
/// ```
///
/// on a uniform grid. Coefficients are sampled at grid nodes and held
/// constant across each interval by the solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct MFSystem {
    pub n: usize,
    pub n_u: usize,
    pub n_v: usize,
    pub grid: TimeGrid,
    pub a1: MatrixTrajectory,
    pub a1bar: MatrixTrajectory,
    pub a2: MatrixTrajectory,
    pub a2bar: MatrixTrajectory,
    pub b1: MatrixTrajectory,
    pub b1bar: MatrixTrajectory,
    pub b2: MatrixTrajectory,
    pub b2bar: MatrixTrajectory,
    pub c1: MatrixTrajectory,
    pub c1bar: MatrixTrajectory,
    pub c2: MatrixTrajectory,
    pub c2bar: MatrixTrajectory,
    pub q: MatrixTrajectory,
    pub n1: MatrixTrajectory,
    pub b: MatrixTrajectory,
    pub sigma: MatrixTrajectory,
    pub gamma: f64,
}

/// Constant coefficients, used to build time-invariant systems.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantCoefficients {
    pub a1: Mat,
    pub a1bar: Mat,
    pub a2: Mat,
    pub a2bar: Mat,
    pub b1: Mat,
    pub b1bar: Mat,
    pub b2: Mat,
    pub b2bar: Mat,
    pub c1: Mat,
    pub c1bar: Mat,
    pub c2: Mat,
    pub c2bar: Mat,
    pub q: Mat,
    pub n1: Mat,
    pub b: Mat,
    pub sigma: Mat,
}

impl ConstantCoefficients {
    /// All-zero coefficients with `Q = 0` (one output row) and `N1 = I`.
    pub fn zeros(n: usize, n_u: usize, n_v: usize) -> Self {
        Self {
            a1: Mat::zeros(n, n),
            a1bar: Mat::zeros(n, n),
            a2: Mat::zeros(n, n),
            a2bar: Mat::zeros(n, n),
            b1: Mat::zeros(n, n_u),
            b1bar: Mat::zeros(n, n_u),
            b2: Mat::zeros(n, n_u),
            b2bar: Mat::zeros(n, n_u),
            c1: Mat::zeros(n, n_v),
            c1bar: Mat::zeros(n, n_v),
            c2: Mat::zeros(n, n_v),
            c2bar: Mat::zeros(n, n_v),
            q: Mat::zeros(1, n),
            n1: Mat::identity(n_u, n_u),
            b: Mat::zeros(n, 1),
            sigma: Mat::zeros(n, 1),
        }
    }
}

/// Coefficient values frozen on one grid interval, with the tilde sums and
/// `QᵀQ` precomputed.
#[derive(Debug, Clone)]
pub struct NodeCoefficients {
    pub a1: Mat,
    pub a1bar: Mat,
    pub a2: Mat,
    pub a2bar: Mat,
    pub b1: Mat,
    pub b1bar: Mat,
    pub b2: Mat,
    pub b2bar: Mat,
    pub c1: Mat,
    pub c1bar: Mat,
    pub c2: Mat,
    pub c2bar: Mat,
    pub q: Mat,
    pub b: Mat,
    pub sigma: Mat,
    pub a1t: Mat,
    pub a2t: Mat,
    pub b1t: Mat,
    pub b2t: Mat,
    pub c1t: Mat,
    pub c2t: Mat,
    pub qtq: Mat,
}

/// `Ãi = Ai + Āi` and likewise for B and C.
#[derive(Debug, Clone, PartialEq)]
pub struct TildeSystem {
    pub a1: MatrixTrajectory,
    pub a2: MatrixTrajectory,
    pub b1: MatrixTrajectory,
    pub b2: MatrixTrajectory,
    pub c1: MatrixTrajectory,
    pub c2: MatrixTrajectory,
}

const FIELD_NAMES: [&str; 16] = [
    "A1", "A1bar", "A2", "A2bar", "B1", "B1bar", "B2", "B2bar", "C1", "C1bar", "C2", "C2bar", "Q",
    "N1", "b", "sigma",
];

impl MFSystem {
    pub fn constant(coeffs: ConstantCoefficients, grid: TimeGrid, gamma: f64) -> Result<Self> {
        let c = |m: Mat| MatrixTrajectory::constant(grid, m);
        let sys = Self {
            n: coeffs.a1.nrows(),
            n_u: coeffs.b1.ncols(),
            n_v: coeffs.c1.ncols(),
            grid,
            a1: c(coeffs.a1),
            a1bar: c(coeffs.a1bar),
            a2: c(coeffs.a2),
            a2bar: c(coeffs.a2bar),
            b1: c(coeffs.b1),
            b1bar: c(coeffs.b1bar),
            b2: c(coeffs.b2),
            b2bar: c(coeffs.b2bar),
            c1: c(coeffs.c1),
            c1bar: c(coeffs.c1bar),
            c2: c(coeffs.c2),
            c2bar: c(coeffs.c2bar),
            q: c(coeffs.q),
            n1: c(coeffs.n1),
            b: c(coeffs.b),
            sigma: c(coeffs.sigma),
            gamma,
        };
        sys.check_dimensions()?;
        Ok(sys)
    }

    /// Number of output rows of `Q`.
    pub fn n_q(&self) -> usize {
        self.q.shape().0
    }

    fn fields(&self) -> [&MatrixTrajectory; 16] {
        [
            &self.a1, &self.a1bar, &self.a2, &self.a2bar, &self.b1, &self.b1bar, &self.b2,
            &self.b2bar, &self.c1, &self.c1bar, &self.c2, &self.c2bar, &self.q, &self.n1, &self.b,
            &self.sigma,
        ]
    }

    fn fields_mut(&mut self) -> [&mut MatrixTrajectory; 16] {
        [
            &mut self.a1,
            &mut self.a1bar,
            &mut self.a2,
            &mut self.a2bar,
            &mut self.b1,
            &mut self.b1bar,
            &mut self.b2,
            &mut self.b2bar,
            &mut self.c1,
            &mut self.c1bar,
            &mut self.c2,
            &mut self.c2bar,
            &mut self.q,
            &mut self.n1,
            &mut self.b,
            &mut self.sigma,
        ]
    }

    fn expected_shapes(&self) -> [(usize, usize); 16] {
        let (n, nu, nv) = (self.n, self.n_u, self.n_v);
        let nq = self.n_q();
        [
            (n, n),
            (n, n),
            (n, n),
            (n, n),
            (n, nu),
            (n, nu),
            (n, nu),
            (n, nu),
            (n, nv),
            (n, nv),
            (n, nv),
            (n, nv),
            (nq, n),
            (nu, nu),
            (n, 1),
            (n, 1),
        ]
    }

    /// Shapes and grids of all coefficients agree with `(n, n_u, n_v)`.
    pub fn check_dimensions(&self) -> Result<()> {
        if self.n == 0 || self.n_u == 0 || self.n_v == 0 {
            return Err(Error::Dimension("n, n_u and n_v must be positive".into()));
        }
        for ((name, f), shape) in FIELD_NAMES.iter().zip(self.fields()).zip(self.expected_shapes()) {
            if f.grid() != &self.grid {
                return Err(Error::Dimension(format!("{name} lives on a different grid")));
            }
            if f.shape() != shape {
                return Err(Error::Dimension(format!(
                    "{name} has shape {}x{}, expected {}x{}",
                    f.shape().0,
                    f.shape().1,
                    shape.0,
                    shape.1
                )));
            }
        }
        Ok(())
    }

    pub fn tilde(&self) -> TildeSystem {
        let add = |a: &MatrixTrajectory, b: &MatrixTrajectory| {
            a.zip_map(b, |x, y| x + y).expect("coefficients share the system grid")
        };
        TildeSystem {
            a1: add(&self.a1, &self.a1bar),
            a2: add(&self.a2, &self.a2bar),
            b1: add(&self.b1, &self.b1bar),
            b2: add(&self.b2, &self.b2bar),
            c1: add(&self.c1, &self.c1bar),
            c2: add(&self.c2, &self.c2bar),
        }
    }

    /// Coefficients at node `k`, used on the interval `[s_k, s_{k+1}]`.
    pub fn node(&self, k: usize) -> NodeCoefficients {
        let g = |t: &MatrixTrajectory| t.at(k).clone();
        let (a1, a1bar, a2, a2bar) = (g(&self.a1), g(&self.a1bar), g(&self.a2), g(&self.a2bar));
        let (b1, b1bar, b2, b2bar) = (g(&self.b1), g(&self.b1bar), g(&self.b2), g(&self.b2bar));
        let (c1, c1bar, c2, c2bar) = (g(&self.c1), g(&self.c1bar), g(&self.c2), g(&self.c2bar));
        let q = g(&self.q);
        NodeCoefficients {
            a1t: &a1 + &a1bar,
            a2t: &a2 + &a2bar,
            b1t: &b1 + &b1bar,
            b2t: &b2 + &b2bar,
            c1t: &c1 + &c1bar,
            c2t: &c2 + &c2bar,
            qtq: q.transpose() * &q,
            a1,
            a1bar,
            a2,
            a2bar,
            b1,
            b1bar,
            b2,
            b2bar,
            c1,
            c1bar,
            c2,
            c2bar,
            q,
            b: g(&self.b),
            sigma: g(&self.sigma),
        }
    }

    /// Coefficients at every node.
    pub fn nodes(&self) -> Vec<NodeCoefficients> {
        (0..self.grid.n_nodes()).map(|k| self.node(k)).collect()
    }

    /// The same system sampled on a grid with `steps` intervals.
    pub fn resample(&self, steps: usize) -> Result<Self> {
        if steps == self.grid.steps() {
            return Ok(self.clone());
        }
        let grid = self.grid.with_steps(steps)?;
        let mut out = self.clone();
        out.grid = grid;
        for f in out.fields_mut() {
            *f = f.resample(grid);
        }
        Ok(out)
    }

    pub fn with_gamma(&self, gamma: f64) -> Self {
        let mut out = self.clone();
        out.gamma = gamma;
        out
    }

    /// Same system with every mean-field coefficient set to zero.
    pub fn without_mean_field(&self) -> Self {
        let mut out = self.clone();
        for f in [
            &mut out.a1bar,
            &mut out.a2bar,
            &mut out.b1bar,
            &mut out.b2bar,
            &mut out.c1bar,
            &mut out.c2bar,
        ] {
            let (r, c) = f.shape();
            *f = MatrixTrajectory::zeros(self.grid, r, c);
        }
        out
    }

    /// Same system with the control channel removed (`B1 = B̄1 = B2 = B̄2 = 0`).
    pub fn without_control(&self) -> Self {
        let mut out = self.clone();
        for f in [&mut out.b1, &mut out.b1bar, &mut out.b2, &mut out.b2bar] {
            let (r, c) = f.shape();
            *f = MatrixTrajectory::zeros(self.grid, r, c);
        }
        out
    }

    /// Same system with `b = σ = 0`.
    pub fn without_affine(&self) -> Self {
        let mut out = self.clone();
        out.b = MatrixTrajectory::zeros(self.grid, self.n, 1);
        out.sigma = MatrixTrajectory::zeros(self.grid, self.n, 1);
        out
    }
}

/// Affine state feedback `w = G(s)·x + Ḡ(s)·E[x] + g(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineFeedback {
    pub gain: MatrixTrajectory,
    pub gain_bar: MatrixTrajectory,
    pub offset: MatrixTrajectory,
}

impl AffineFeedback {
    pub fn new(gain: MatrixTrajectory, gain_bar: MatrixTrajectory, offset: MatrixTrajectory) -> Result<Self> {
        let (r, n) = gain.shape();
        if gain_bar.shape() != (r, n) || offset.shape() != (r, 1) {
            return Err(Error::Dimension("feedback gain, mean gain and offset disagree".into()));
        }
        if gain.grid() != gain_bar.grid() || gain.grid() != offset.grid() {
            return Err(Error::Dimension("feedback parts live on different grids".into()));
        }
        Ok(Self { gain, gain_bar, offset })
    }

    pub fn zero(grid: TimeGrid, rows: usize, n: usize) -> Self {
        Self {
            gain: MatrixTrajectory::zeros(grid, rows, n),
            gain_bar: MatrixTrajectory::zeros(grid, rows, n),
            offset: MatrixTrajectory::zeros(grid, rows, 1),
        }
    }

    pub fn rows(&self) -> usize {
        self.gain.shape().0
    }

    /// `(G, Ḡ, g)` at time `s`, linearly interpolated.
    pub fn eval(&self, s: f64) -> (Mat, Mat, Mat) {
        (self.gain.eval(s), self.gain_bar.eval(s), self.offset.eval(s))
    }

    pub fn apply(&self, x: &Mat, m: &Mat, s: f64) -> Mat {
        let (g, gb, g0) = self.eval(s);
        g * x + gb * m + g0
    }
}

impl MFSystem {
    /// Absorb `v = V x + V̄ E[x] + V0` into the state coefficients. The
    /// returned system has a zero disturbance channel.
    pub fn with_disturbance_feedback(&self, fb: &AffineFeedback) -> Result<Self> {
        if fb.gain.shape() != (self.n_v, self.n) {
            return Err(Error::Dimension("disturbance feedback has the wrong shape".into()));
        }
        let mut out = self.clone();
        let grid = self.grid;
        let mut parts: [Vec<Mat>; 6] = Default::default();
        for k in 0..grid.n_nodes() {
            let c = self.node(k);
            let (v, vb, v0) = fb.eval(grid.node(k));
            let vt = &v + &vb;
            parts[0].push(&c.a1 + &c.c1 * &v);
            parts[1].push(&c.a1bar + &c.c1 * &vb + &c.c1bar * &vt);
            parts[2].push(&c.a2 + &c.c2 * &v);
            parts[3].push(&c.a2bar + &c.c2 * &vb + &c.c2bar * &vt);
            parts[4].push(&c.b + &c.c1t * &v0);
            parts[5].push(&c.sigma + &c.c2t * &v0);
        }
        let [a1, a1bar, a2, a2bar, b, sigma] = parts;
        out.a1 = MatrixTrajectory::new(grid, a1)?;
        out.a1bar = MatrixTrajectory::new(grid, a1bar)?;
        out.a2 = MatrixTrajectory::new(grid, a2)?;
        out.a2bar = MatrixTrajectory::new(grid, a2bar)?;
        out.b = MatrixTrajectory::new(grid, b)?;
        out.sigma = MatrixTrajectory::new(grid, sigma)?;
        for f in [&mut out.c1, &mut out.c1bar, &mut out.c2, &mut out.c2bar] {
            *f = MatrixTrajectory::zeros(grid, self.n, self.n_v);
        }
        Ok(out)
    }

    /// Absorb `u = U x + Ū E[x] + U0` into the state coefficients. The
    /// returned system has a zero control channel.
    pub fn with_control_feedback(&self, fb: &AffineFeedback) -> Result<Self> {
        if fb.gain.shape() != (self.n_u, self.n) {
            return Err(Error::Dimension("control feedback has the wrong shape".into()));
        }
        let mut out = self.clone();
        let grid = self.grid;
        let mut parts: [Vec<Mat>; 6] = Default::default();
        for k in 0..grid.n_nodes() {
            let c = self.node(k);
            let (u, ub, u0) = fb.eval(grid.node(k));
            let ut = &u + &ub;
            parts[0].push(&c.a1 + &c.b1 * &u);
            parts[1].push(&c.a1bar + &c.b1 * &ub + &c.b1bar * &ut);
            parts[2].push(&c.a2 + &c.b2 * &u);
            parts[3].push(&c.a2bar + &c.b2 * &ub + &c.b2bar * &ut);
            parts[4].push(&c.b + &c.b1t * &u0);
            parts[5].push(&c.sigma + &c.b2t * &u0);
        }
        let [a1, a1bar, a2, a2bar, b, sigma] = parts;
        out.a1 = MatrixTrajectory::new(grid, a1)?;
        out.a1bar = MatrixTrajectory::new(grid, a1bar)?;
        out.a2 = MatrixTrajectory::new(grid, a2)?;
        out.a2bar = MatrixTrajectory::new(grid, a2bar)?;
        out.b = MatrixTrajectory::new(grid, b)?;
        out.sigma = MatrixTrajectory::new(grid, sigma)?;
        for f in [&mut out.b1, &mut out.b1bar, &mut out.b2, &mut out.b2bar] {
            *f = MatrixTrajectory::zeros(grid, self.n, self.n_u);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: String,
    pub node: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some(k) => write!(f, "{} (node {}): {}", self.field, k, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_admissible(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "admissible");
        }
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Check every admissibility condition and report each violated one once,
/// at the first offending node.
pub fn validate_system(sys: &MFSystem) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |field: &str, node: Option<usize>, message: String| {
        violations.push(Violation { field: field.into(), node, message })
    };
    if let Err(e) = sys.check_dimensions() {
        push("dims", None, e.to_string());
        return ValidationReport { violations };
    }
    for (name, f) in FIELD_NAMES.iter().zip(sys.fields()) {
        if let Some(k) = f.values().iter().position(|m| m.iter().any(|x| !x.is_finite())) {
            push(name, Some(k), "entries must be finite".into());
        }
    }
    let id = Mat::identity(sys.n_u, sys.n_u);
    let bad: Vec<usize> = sys
        .n1
        .values()
        .iter()
        .enumerate()
        .filter(|(_, m)| !(max_abs(&(m.transpose() * *m - &id)) <= 1e-10))
        .map(|(k, _)| k)
        .collect();
    if let Some(&k) = bad.first() {
        push("N1", Some(k), format!("N1ᵀN1 ≠ I at {} node(s)", bad.len()));
    }
    if !(sys.gamma > 0.0 && sys.gamma.is_finite()) {
        push("gamma", None, "gamma must be positive".into());
    }
    ValidationReport { violations }
}

/// Law of the initial state ξ.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    Point(Mat),
    Gaussian { mean: Mat, cov: Mat },
    Empirical(Vec<Mat>),
}

impl InitialLaw {
    pub fn point(x: &[f64]) -> Self {
        Self::Point(Mat::from_column_slice(x.len(), 1, x))
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Point(x) => x.nrows(),
            Self::Gaussian { mean, .. } => mean.nrows(),
            Self::Empirical(s) => s[0].nrows(),
        }
    }

    pub fn mean(&self) -> Mat {
        match self {
            Self::Point(x) => x.clone(),
            Self::Gaussian { mean, .. } => mean.clone(),
            Self::Empirical(s) => {
                let mut acc = Mat::zeros(s[0].nrows(), 1);
                for x in s {
                    acc += x;
                }
                acc / s.len() as f64
            }
        }
    }

    /// Covariance of ξ (population covariance for an empirical law).
    pub fn covariance(&self) -> Mat {
        match self {
            Self::Point(x) => Mat::zeros(x.nrows(), x.nrows()),
            Self::Gaussian { cov, .. } => cov.clone(),
            Self::Empirical(s) => {
                let m = self.mean();
                let mut acc = Mat::zeros(m.nrows(), m.nrows());
                for x in s {
                    let d = x - &m;
                    acc += &d * d.transpose();
                }
                acc / s.len() as f64
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Point(x) if x.ncols() != 1 => Err(Error::Dimension("point must be a vector".into())),
            Self::Gaussian { mean, cov } => {
                let n = mean.nrows();
                if mean.ncols() != 1 || cov.shape() != (n, n) {
                    return Err(Error::Dimension("Gaussian mean/cov shapes disagree".into()));
                }
                if max_abs(&(cov - cov.transpose())) > 1e-12 {
                    return Err(Error::InvalidInput("covariance must be symmetric".into()));
                }
                if crate::numerics::min_eig_sym(cov) < -1e-12 {
                    return Err(Error::InvalidInput("covariance must be positive semidefinite".into()));
                }
                Ok(())
            }
            Self::Empirical(s) => {
                if s.is_empty() {
                    return Err(Error::InvalidInput("empirical law needs at least one sample".into()));
                }
                let n = s[0].nrows();
                if s.iter().any(|x| x.shape() != (n, 1)) {
                    return Err(Error::Dimension("samples must share dimension".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// A sampler that draws ξ with a caller-supplied generator.
    pub fn sampler(&self) -> LawSampler {
        match self {
            Self::Point(x) => LawSampler::Point(x.iter().copied().collect()),
            Self::Gaussian { mean, cov } => {
                let n = mean.nrows();
                // Cholesky of a PSD matrix: jitter the diagonal if it is singular.
                let factor = Cholesky::new(cov.clone())
                    .map(|c| c.l())
                    .unwrap_or_else(|| {
                        let eig = cov.clone().symmetric_eigen();
                        let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
                        &eig.eigenvectors * Mat::from_diagonal(&sqrt)
                    });
                LawSampler::Gaussian {
                    mean: mean.iter().copied().collect(),
                    factor: factor.iter().copied().collect(),
                    n,
                }
            }
            Self::Empirical(s) => LawSampler::Empirical(
                s.iter().map(|x| x.iter().copied().collect()).collect(),
            ),
        }
    }
}

/// Allocation-free draws of ξ into a caller buffer.
#[derive(Debug, Clone)]
pub enum LawSampler {
    Point(Vec<f64>),
    /// `factor` is column-major `n×n` with `factor·factorᵀ = cov`.
    Gaussian { mean: Vec<f64>, factor: Vec<f64>, n: usize },
    Empirical(Vec<Vec<f64>>),
}

impl LawSampler {
    pub fn draw<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        match self {
            Self::Point(x) => out.copy_from_slice(x),
            Self::Gaussian { mean, factor, n } => {
                out.copy_from_slice(mean);
                for j in 0..*n {
                    let z: f64 = rng.sample(StandardNormal);
                    for i in 0..*n {
                        out[i] += factor[j * n + i] * z;
                    }
                }
            }
            Self::Empirical(s) => {
                let i = rng.random_range(0..s.len());
                out.copy_from_slice(&s[i]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    pub riccati_steps: usize,
    pub bisect_tol: f64,
    pub delta_margin: f64,
    pub mc_paths: usize,
    pub seed: u64,
    pub gain_fixpoint_tol: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            riccati_steps: 2000,
            bisect_tol: 1e-4,
            delta_margin: 1e-8,
            mc_paths: 10_000,
            seed: 0,
            gain_fixpoint_tol: 1e-9,
        }
    }
}

// ---------------------------------------------------------------------------
// Problem file

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum MatSpec {
    Const(Vec<Vec<f64>>),
    PerNode(Vec<Vec<Vec<f64>>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum VecSpec {
    Const(Vec<f64>),
    PerNode(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Dims {
    n: usize,
    n_u: usize,
    n_v: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Horizon {
    t0: f64,
    #[serde(rename = "T")]
    t_end: f64,
    steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Affine {
    b: VecSpec,
    sigma: VecSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum LawSpec {
    Point { point: Vec<f64> },
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    Empirical { samples: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemFile {
    dims: Dims,
    horizon: Horizon,
    matrices: BTreeMap<String, MatSpec>,
    affine: Affine,
    gamma: f64,
    initial_law: LawSpec,
    solver: SolverSettings,
}

const MATRIX_KEYS: [&str; 14] = [
    "A1", "A1bar", "A2", "A2bar", "B1", "B1bar", "B2", "B2bar", "C1", "C1bar", "C2", "C2bar", "Q",
    "N1",
];

fn rows_to_mat(name: &str, rows: &[Vec<f64>]) -> Result<Mat> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if r == 0 || c == 0 {
        return Err(Error::Dimension(format!("{name} is empty")));
    }
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Dimension(format!("{name} has ragged rows")));
    }
    Ok(Mat::from_fn(r, c, |i, j| rows[i][j]))
}

fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

fn expand(name: &str, spec: &MatSpec, grid: TimeGrid) -> Result<MatrixTrajectory> {
    match spec {
        MatSpec::Const(rows) => Ok(MatrixTrajectory::constant(grid, rows_to_mat(name, rows)?)),
        MatSpec::PerNode(list) => {
            if list.len() != grid.n_nodes() {
                return Err(Error::Dimension(format!(
                    "{name} lists {} matrices, expected steps+1 = {}",
                    list.len(),
                    grid.n_nodes()
                )));
            }
            let values = list.iter().map(|rows| rows_to_mat(name, rows)).collect::<Result<Vec<_>>>()?;
            MatrixTrajectory::new(grid, values).map_err(|_| Error::Dimension(format!("{name} changes shape over time")))
        }
    }
}

fn expand_vec(name: &str, spec: &VecSpec, grid: TimeGrid) -> Result<MatrixTrajectory> {
    let col = |v: &[f64]| {
        if v.is_empty() {
            Err(Error::Dimension(format!("{name} is empty")))
        } else {
            Ok(Mat::from_column_slice(v.len(), 1, v))
        }
    };
    match spec {
        VecSpec::Const(v) => Ok(MatrixTrajectory::constant(grid, col(v)?)),
        VecSpec::PerNode(list) => {
            if list.len() != grid.n_nodes() {
                return Err(Error::Dimension(format!(
                    "{name} lists {} vectors, expected steps+1 = {}",
                    list.len(),
                    grid.n_nodes()
                )));
            }
            let values = list.iter().map(|v| col(v)).collect::<Result<Vec<_>>>()?;
            MatrixTrajectory::new(grid, values).map_err(|_| Error::Dimension(format!("{name} changes shape over time")))
        }
    }
}

fn compress(t: &MatrixTrajectory) -> MatSpec {
    let first = t.at(0);
    if t.values().iter().all(|m| m == first) {
        MatSpec::Const(mat_to_rows(first))
    } else {
        MatSpec::PerNode(t.values().iter().map(mat_to_rows).collect())
    }
}

fn compress_vec(t: &MatrixTrajectory) -> VecSpec {
    let first = t.at(0);
    if t.values().iter().all(|m| m == first) {
        VecSpec::Const(first.iter().copied().collect())
    } else {
        VecSpec::PerNode(t.values().iter().map(|m| m.iter().copied().collect()).collect())
    }
}

fn matrix_field<'a>(sys: &'a MFSystem, key: &str) -> &'a MatrixTrajectory {
    let i = FIELD_NAMES.iter().position(|k| *k == key).expect("known key");
    sys.fields()[i]
}

/// Parse a problem document.
pub fn parse_problem(text: &str) -> Result<(MFSystem, InitialLaw, SolverSettings)> {
    let file: ProblemFile = serde_json::from_str(text).map_err(|e| {
        if e.is_syntax() || e.is_eof() {
            Error::Parse(e.to_string())
        } else {
            Error::Schema(e.to_string())
        }
    })?;
    for key in file.matrices.keys() {
        if !MATRIX_KEYS.contains(&key.as_str()) {
            return Err(Error::Schema(format!("unknown matrix `{key}`")));
        }
    }
    for key in MATRIX_KEYS {
        if !file.matrices.contains_key(key) {
            return Err(Error::Schema(format!("missing matrix `{key}`")));
        }
    }
    let grid = TimeGrid::new(file.horizon.t0, file.horizon.t_end, file.horizon.steps)?;
    let m = |key: &str| expand(key, &file.matrices[key], grid);
    let sys = MFSystem {
        n: file.dims.n,
        n_u: file.dims.n_u,
        n_v: file.dims.n_v,
        grid,
        a1: m("A1")?,
        a1bar: m("A1bar")?,
        a2: m("A2")?,
        a2bar: m("A2bar")?,
        b1: m("B1")?,
        b1bar: m("B1bar")?,
        b2: m("B2")?,
        b2bar: m("B2bar")?,
        c1: m("C1")?,
        c1bar: m("C1bar")?,
        c2: m("C2")?,
        c2bar: m("C2bar")?,
        q: m("Q")?,
        n1: m("N1")?,
        b: expand_vec("b", &file.affine.b, grid)?,
        sigma: expand_vec("sigma", &file.affine.sigma, grid)?,
        gamma: file.gamma,
    };
    sys.check_dimensions()?;
    let law = match &file.initial_law {
        LawSpec::Point { point } => InitialLaw::point(point),
        LawSpec::Gaussian { mean, cov } => InitialLaw::Gaussian {
            mean: Mat::from_column_slice(mean.len(), 1, mean),
            cov: rows_to_mat("cov", cov)?,
        },
        LawSpec::Empirical { samples } => InitialLaw::Empirical(
            samples.iter().map(|s| Mat::from_column_slice(s.len(), 1, s)).collect(),
        ),
    };
    law.validate()?;
    if law.dim() != sys.n {
        return Err(Error::Dimension(format!("initial law has dimension {}, n = {}", law.dim(), sys.n)));
    }
    Ok((sys, law, file.solver))
}

/// Canonical text of a problem: constant coefficients written once,
/// pretty-printed JSON with round-trip exact numbers.
pub fn render_problem(sys: &MFSystem, law: &InitialLaw, settings: &SolverSettings) -> String {
    let matrices = MATRIX_KEYS.iter().map(|k| (k.to_string(), compress(matrix_field(sys, k)))).collect();
    let col = |m: &Mat| m.iter().copied().collect::<Vec<f64>>();
    let initial_law = match law {
        InitialLaw::Point(x) => LawSpec::Point { point: col(x) },
        InitialLaw::Gaussian { mean, cov } => LawSpec::Gaussian { mean: col(mean), cov: mat_to_rows(cov) },
        InitialLaw::Empirical(s) => LawSpec::Empirical { samples: s.iter().map(col).collect() },
    };
    let file = ProblemFile {
        dims: Dims { n: sys.n, n_u: sys.n_u, n_v: sys.n_v },
        horizon: Horizon { t0: sys.grid.t0(), t_end: sys.grid.t_end(), steps: sys.grid.steps() },
        matrices,
        affine: Affine { b: compress_vec(&sys.b), sigma: compress_vec(&sys.sigma) },
        gamma: sys.gamma,
        initial_law,
        solver: settings.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("problem serializes");
    text.push('\n');
    text
}

pub fn load_problem(path: impl AsRef<Path>) -> Result<(MFSystem, InitialLaw, SolverSettings)> {
    parse_problem(&std::fs::read_to_string(path)?)
}

pub fn save_problem(
    path: impl AsRef<Path>,
    sys: &MFSystem,
    law: &InitialLaw,
    settings: &SolverSettings,
) -> Result<()> {
    std::fs::write(path, render_problem(sys, law, settings))?;
    Ok(())
}

/// Problems shipped with the crate.
pub mod fixtures {
    use super::*;

    pub const NAMES: [&str; 4] = ["sysA", "sysB", "zero", "nomf"];

    pub fn text(name: &str) -> Option<&'static str> {
        match name {
            "sysA" => Some(include_str!("../fixtures/sysA.json")),
            "sysB" => Some(include_str!("../fixtures/sysB.json")),
            "zero" => Some(include_str!("../fixtures/zero.json")),
            "nomf" => Some(include_str!("../fixtures/nomf.json")),
            _ => None,
        }
    }

    pub fn load(name: &str) -> Result<(MFSystem, InitialLaw, SolverSettings)> {
        let text = text(name).ok_or_else(|| Error::InvalidInput(format!("unknown fixture `{name}`")))?;
        parse_problem(text)
    }

    /// The system of a fixture, resampled to `steps` intervals.
    pub fn system(name: &str, steps: usize) -> MFSystem {
        load(name).expect("fixture parses").0.resample(steps).expect("valid step count")
    }

    pub fn law(name: &str) -> InitialLaw {
        load(name).expect("fixture parses").1
    }
}

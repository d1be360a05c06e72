//! Closed-loop Nash feedback synthesis.
//!
//! Player 1 (the disturbance `v`) minimizes `E∫ γ²|v|² − |QX|² − |u|²` and
//! player 2 (the control `u`) minimizes `E∫ |QX|² + |u|²`. Each player's
//! value is quadratic in the deviation `X − E[X]` (weights `P1`, `P2`) and in
//! the mean `E[X]` (weights `Π1`, `Π2`). The four Riccati equations are
//! coupled through the gains
//!
//! ```text
//! U = −Θ⁻¹Σᵀ,  Σ = P2B1 + (A2 + C2V)ᵀP2B2,  Θ = I + B2ᵀP2B2
//! V = −Λ⁻¹Υᵀ,  Υ = P1C1 + (A2 + B2U)ᵀP1C2,  Λ = γ²I + C2ᵀP1C2
//! ```
//!
//! and their tilde analogues for `Ũ = U + Ū`, `Ṽ = V + V̄`. Because Σ is
//! affine in V and Υ is affine in U, each pair is a linear system solved
//! exactly at every Runge–Kutta stage.

use crate::brl::{brl_cdre_solve, relative_mismatch, BrlOptions};
use crate::error::{Error, InfeasibleReason, Result};
use crate::model::{AffineFeedback, InitialLaw, MFSystem, NodeCoefficients};
use crate::numerics::{
    dot, hstack, integrate_backward, max_abs, min_eig_sym, quad_form, solve_linear_block2,
    trapezoid, vstack, Mat, MatrixTrajectory, Symmetry, TimeGrid,
};

#[derive(Debug, Clone)]
pub struct ClosedLoopOptions {
    /// Lower bound on the eigenvalues of Λ and Λ̄.
    pub delta1: f64,
    /// Lower bound on the eigenvalues of Θ and Θ̄.
    pub delta2: f64,
}

impl Default for ClosedLoopOptions {
    fn default() -> Self {
        Self { delta1: 1e-8, delta2: 1e-8 }
    }
}

/// Gains and kernels at one instant.
#[derive(Debug, Clone)]
pub struct NodeGains {
    pub u: Mat,
    pub v: Mat,
    pub ut: Mat,
    pub vt: Mat,
    pub theta: Mat,
    pub theta_bar: Mat,
    pub lambda: Mat,
    pub lambda_bar: Mat,
}

impl NodeGains {
    pub fn ubar(&self) -> Mat {
        &self.ut - &self.u
    }

    pub fn vbar(&self) -> Mat {
        &self.vt - &self.v
    }
}

fn check_positive(m: &Mat, delta: f64, time: f64) -> Result<()> {
    let e = min_eig_sym(m);
    if e.is_nan() {
        return Err(Error::NonFinite { time });
    }
    if e < delta {
        return Err(Error::Infeasible { reason: InfeasibleReason::PositivityViolated, time });
    }
    Ok(())
}

fn coupling(r: Result<(Mat, Mat)>, time: f64) -> Result<(Mat, Mat)> {
    r.map_err(|e| match e {
        Error::SingularBlock { .. } => Error::SingularCoupling { time },
        e => e,
    })
}

/// Solve both coupled gain pairs at one instant.
#[allow(clippy::too_many_arguments)]
pub fn gain_coupling_solve(
    c: &NodeCoefficients,
    gamma: f64,
    p1: &Mat,
    p2: &Mat,
    pi1: &Mat,
    pi2: &Mat,
    opts: &ClosedLoopOptions,
    time: f64,
) -> Result<NodeGains> {
    let nu = c.b1.ncols();
    let nv = c.c1.ncols();
    let g2 = gamma * gamma;
    let theta = Mat::identity(nu, nu) + c.b2.transpose() * p2 * &c.b2;
    let theta_bar = Mat::identity(nu, nu) + c.b2t.transpose() * p2 * &c.b2t;
    let lambda = Mat::identity(nv, nv) * g2 + c.c2.transpose() * p1 * &c.c2;
    let lambda_bar = Mat::identity(nv, nv) * g2 + c.c2t.transpose() * p1 * &c.c2t;
    check_positive(&lambda, opts.delta1, time)?;
    check_positive(&lambda_bar, opts.delta1, time)?;
    check_positive(&theta, opts.delta2, time)?;
    check_positive(&theta_bar, opts.delta2, time)?;

    let (u, v) = coupling(
        solve_linear_block2(
            &theta,
            &(c.b2.transpose() * p2 * &c.c2),
            &(c.c2.transpose() * p1 * &c.b2),
            &lambda,
            &-(c.b1.transpose() * p2 + c.b2.transpose() * p2 * &c.a2),
            &-(c.c1.transpose() * p1 + c.c2.transpose() * p1 * &c.a2),
        ),
        time,
    )?;
    let (ut, vt) = coupling(
        solve_linear_block2(
            &theta_bar,
            &(c.b2t.transpose() * p2 * &c.c2t),
            &(c.c2t.transpose() * p1 * &c.b2t),
            &lambda_bar,
            &-(c.b1t.transpose() * pi2 + c.b2t.transpose() * p2 * &c.a2t),
            &-(c.c1t.transpose() * pi1 + c.c2t.transpose() * p1 * &c.a2t),
        ),
        time,
    )?;
    Ok(NodeGains { u, v, ut, vt, theta, theta_bar, lambda, lambda_bar })
}

fn spd_solve(a: &Mat, rhs: &Mat, time: f64) -> Result<Mat> {
    a.clone()
        .cholesky()
        .map(|ch| ch.solve(rhs))
        .ok_or(Error::Infeasible { reason: InfeasibleReason::PositivityViolated, time })
}

/// `(Ṗ1, Ṗ2, Π̇1, Π̇2)` given the gains at the same matrices.
pub fn closedloop_rhs(
    c: &NodeCoefficients,
    g: &NodeGains,
    p1: &Mat,
    p2: &Mat,
    pi1: &Mat,
    pi2: &Mat,
    time: f64,
) -> Result<[Mat; 4]> {
    let qtq = &c.qtq;
    // player 1
    let au = &c.a1 + &c.b1 * &g.u;
    let du = &c.a2 + &c.b2 * &g.u;
    let ups = p1 * &c.c1 + du.transpose() * p1 * &c.c2;
    let dp1 = -(au.transpose() * p1 + p1 * &au + du.transpose() * p1 * &du - qtq
        - g.u.transpose() * &g.u
        - &ups * spd_solve(&g.lambda, &ups.transpose(), time)?);
    let aut = &c.a1t + &c.b1t * &g.ut;
    let dut = &c.a2t + &c.b2t * &g.ut;
    let ups_bar = pi1 * &c.c1t + dut.transpose() * p1 * &c.c2t;
    let dpi1 = -(aut.transpose() * pi1 + pi1 * &aut + dut.transpose() * p1 * &dut - qtq
        - g.ut.transpose() * &g.ut
        - &ups_bar * spd_solve(&g.lambda_bar, &ups_bar.transpose(), time)?);
    // player 2
    let av = &c.a1 + &c.c1 * &g.v;
    let dv = &c.a2 + &c.c2 * &g.v;
    let sig = p2 * &c.b1 + dv.transpose() * p2 * &c.b2;
    let dp2 = -(av.transpose() * p2 + p2 * &av + dv.transpose() * p2 * &dv + qtq
        - &sig * spd_solve(&g.theta, &sig.transpose(), time)?);
    let avt = &c.a1t + &c.c1t * &g.vt;
    let dvt = &c.a2t + &c.c2t * &g.vt;
    let sig_bar = pi2 * &c.b1t + dvt.transpose() * p2 * &c.b2t;
    let dpi2 = -(avt.transpose() * pi2 + pi2 * &avt + dvt.transpose() * p2 * &dvt + qtq
        - &sig_bar * spd_solve(&g.theta_bar, &sig_bar.transpose(), time)?);
    Ok([dp1, dp2, dpi1, dpi2])
}

/// Solutions of the four coupled Riccati equations with the gains at every
/// node.
#[derive(Debug, Clone)]
pub struct ClosedLoopRiccati {
    pub gamma: f64,
    pub p1: MatrixTrajectory,
    pub p2: MatrixTrajectory,
    pub pi1: MatrixTrajectory,
    pub pi2: MatrixTrajectory,
    pub u: MatrixTrajectory,
    pub ubar: MatrixTrajectory,
    pub v: MatrixTrajectory,
    pub vbar: MatrixTrajectory,
    pub gains: Vec<NodeGains>,
    state: MatrixTrajectory,
}

fn split4(m: &Mat, n: usize) -> [Mat; 4] {
    [0, 1, 2, 3].map(|i| m.columns(i * n, n).into_owned())
}

pub fn closedloop_cdre_solve(sys: &MFSystem, gamma: f64, opts: &ClosedLoopOptions) -> Result<ClosedLoopRiccati> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidInput(format!("gamma must be positive, got {gamma}")));
    }
    let n = sys.n;
    let grid = sys.grid;
    let coeffs = sys.nodes();
    let state = integrate_backward(
        |k, s, m| {
            let [p1, p2, pi1, pi2] = split4(m, n);
            let g = gain_coupling_solve(&coeffs[k], gamma, &p1, &p2, &pi1, &pi2, opts, s)?;
            let [a, b, c, d] = closedloop_rhs(&coeffs[k], &g, &p1, &p2, &pi1, &pi2, s)?;
            Ok(hstack(&[&a, &b, &c, &d]))
        },
        Mat::zeros(n, 4 * n),
        &grid,
        Symmetry::Blocks(n),
    )
    .map_err(|e| match e {
        Error::NonFinite { time } => Error::Infeasible { reason: InfeasibleReason::Blowup, time },
        e => e,
    })?;
    let mut gains = Vec::with_capacity(grid.n_nodes());
    for k in 0..grid.n_nodes() {
        let [p1, p2, pi1, pi2] = split4(state.at(k), n);
        gains.push(gain_coupling_solve(&coeffs[k], gamma, &p1, &p2, &pi1, &pi2, opts, grid.node(k))?);
    }
    let traj = |f: &dyn Fn(&NodeGains) -> Mat| MatrixTrajectory::new(grid, gains.iter().map(f).collect());
    Ok(ClosedLoopRiccati {
        gamma,
        p1: state.columns(0, n),
        p2: state.columns(n, n),
        pi1: state.columns(2 * n, n),
        pi2: state.columns(3 * n, n),
        u: traj(&|g| g.u.clone())?,
        ubar: traj(&|g| g.ubar())?,
        v: traj(&|g| g.v.clone())?,
        vbar: traj(&|g| g.vbar())?,
        gains,
        state,
    })
}

impl ClosedLoopRiccati {
    pub fn grid(&self) -> &TimeGrid {
        self.p1.grid()
    }

    /// Relative central-difference residual of the four Riccati equations at
    /// interior node `k`.
    pub fn riccati_residual(&self, sys: &MFSystem, k: usize) -> f64 {
        let grid = self.grid();
        assert!(k > 0 && k < grid.steps(), "interior node required");
        let h = grid.dt();
        let c = sys.node(k);
        let n = sys.n;
        let [p1, p2, pi1, pi2] = split4(self.state.at(k), n);
        let loose = ClosedLoopOptions { delta1: f64::NEG_INFINITY, delta2: f64::NEG_INFINITY };
        let g = gain_coupling_solve(&c, self.gamma, &p1, &p2, &pi1, &pi2, &loose, grid.node(k))
            .expect("gains at a solved node");
        let rhs = closedloop_rhs(&c, &g, &p1, &p2, &pi1, &pi2, grid.node(k)).expect("solved node");
        let cd = split4(&((self.state.at(k + 1) - self.state.at(k - 1)) / (2.0 * h)), n);
        relative_mismatch(&[(&cd[0], &rhs[0]), (&cd[1], &rhs[1]), (&cd[2], &rhs[2]), (&cd[3], &rhs[3])])
    }

    /// `max(‖U + Θ⁻¹Σᵀ‖∞, ‖V + Λ⁻¹Υᵀ‖∞)` and the same for the tilde pair at
    /// node `k`.
    pub fn gain_residual(&self, sys: &MFSystem, k: usize) -> f64 {
        let c = sys.node(k);
        let g = &self.gains[k];
        let (p1, p2, pi1, pi2) = (self.p1.at(k), self.p2.at(k), self.pi1.at(k), self.pi2.at(k));
        let inv = |a: &Mat, b: &Mat| a.clone().lu().solve(b).expect("invertible kernel");
        let sig = p2 * &c.b1 + (&c.a2 + &c.c2 * &g.v).transpose() * p2 * &c.b2;
        let ups = p1 * &c.c1 + (&c.a2 + &c.b2 * &g.u).transpose() * p1 * &c.c2;
        let sig_bar = pi2 * &c.b1t + (&c.a2t + &c.c2t * &g.vt).transpose() * p2 * &c.b2t;
        let ups_bar = pi1 * &c.c1t + (&c.a2t + &c.b2t * &g.ut).transpose() * p1 * &c.c2t;
        [
            max_abs(&(&g.u + inv(&g.theta, &sig.transpose()))),
            max_abs(&(&g.v + inv(&g.lambda, &ups.transpose()))),
            max_abs(&(&g.ut + inv(&g.theta_bar, &sig_bar.transpose()))),
            max_abs(&(&g.vt + inv(&g.lambda_bar, &ups_bar.transpose()))),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn asymmetry(&self) -> f64 {
        [&self.p1, &self.p2, &self.pi1, &self.pi2]
            .iter()
            .flat_map(|t| t.values())
            .map(|m| max_abs(&(m - m.transpose())))
            .fold(0.0, f64::max)
    }
}

/// Affine corrections of the closed-loop system.
#[derive(Debug, Clone)]
pub struct AffineCorrections {
    pub u0: MatrixTrajectory,
    pub v0: MatrixTrajectory,
    pub eta1: MatrixTrajectory,
    pub eta2: MatrixTrajectory,
    pub eta_bar1: MatrixTrajectory,
    pub eta_bar2: MatrixTrajectory,
}

/// Offsets `(U0, V0)` from
///
/// ```text
/// Θ̄U0 + B̃2ᵀP2C̃2V0 = −(B̃2ᵀP2σ + B̃1ᵀη̄2)
/// C̃2ᵀP1B̃2U0 + Λ̄V0 = −(C̃2ᵀP1σ + C̃1ᵀη̄1)
/// ```
fn offsets(c: &NodeCoefficients, g: &NodeGains, p1: &Mat, p2: &Mat, eb1: &Mat, eb2: &Mat, time: f64) -> Result<(Mat, Mat)> {
    coupling(
        solve_linear_block2(
            &g.theta_bar,
            &(c.b2t.transpose() * p2 * &c.c2t),
            &(c.c2t.transpose() * p1 * &c.b2t),
            &g.lambda_bar,
            &-(c.b2t.transpose() * p2 * &c.sigma + c.b1t.transpose() * eb2),
            &-(c.c2t.transpose() * p1 * &c.sigma + c.c1t.transpose() * eb1),
        ),
        time,
    )
}

/// Right-hand sides of the mean corrections:
///
/// ```text
/// η̄̇1 = −[(Ã1 + B̃1Ũ + C̃1Ṽ)ᵀη̄1 + (Ã2 + B̃2Ũ + C̃2Ṽ)ᵀP1σ1 + Π1b1 − ŨᵀU0],  σ1 = σ + B̃2U0, b1 = b + B̃1U0
/// η̄̇2 = −[(Ã1 + B̃1Ũ + C̃1Ṽ)ᵀη̄2 + (Ã2 + B̃2Ũ + C̃2Ṽ)ᵀP2σ2 + Π2b2],         σ2 = σ + C̃2V0, b2 = b + C̃1V0
/// ```
fn affine_rhs(c: &NodeCoefficients, g: &NodeGains, p1: &Mat, p2: &Mat, pi1: &Mat, pi2: &Mat, u0: &Mat, v0: &Mat, eb1: &Mat, eb2: &Mat) -> (Mat, Mat) {
    let a = &c.a1t + &c.b1t * &g.ut + &c.c1t * &g.vt;
    let d = &c.a2t + &c.b2t * &g.ut + &c.c2t * &g.vt;
    let sigma1 = &c.sigma + &c.b2t * u0;
    let b1 = &c.b + &c.b1t * u0;
    let sigma2 = &c.sigma + &c.c2t * v0;
    let b2 = &c.b + &c.c1t * v0;
    let d1 = -(a.transpose() * eb1 + d.transpose() * (p1 * sigma1) + pi1 * b1 - g.ut.transpose() * u0);
    let d2 = -(a.transpose() * eb2 + d.transpose() * (p2 * sigma2) + pi2 * b2);
    (d1, d2)
}

/// Integrate the affine corrections backward. The deviation corrections
/// η1, η2 are driven only by centered affine terms and vanish identically
/// for deterministic `b`, `σ`.
pub fn affine_coupling_solve(sys: &MFSystem, cdre: &ClosedLoopRiccati, opts: &ClosedLoopOptions) -> Result<AffineCorrections> {
    let n = sys.n;
    let grid = sys.grid;
    let dt = grid.dt();
    let coeffs = sys.nodes();
    let loose = ClosedLoopOptions { delta1: f64::NEG_INFINITY, delta2: f64::NEG_INFINITY };
    let _ = opts;
    let state = integrate_backward(
        |k, s, e| {
            let c = &coeffs[k];
            let theta = (s - grid.node(k)) / dt;
            let m = cdre.state.eval_in_interval(k, theta);
            let [p1, p2, pi1, pi2] = split4(&m, n);
            let g = gain_coupling_solve(c, cdre.gamma, &p1, &p2, &pi1, &pi2, &loose, s)?;
            let eb1 = e.columns(0, 1).into_owned();
            let eb2 = e.columns(1, 1).into_owned();
            let (u0, v0) = offsets(c, &g, &p1, &p2, &eb1, &eb2, s)?;
            let (d1, d2) = affine_rhs(c, &g, &p1, &p2, &pi1, &pi2, &u0, &v0, &eb1, &eb2);
            Ok(hstack(&[&d1, &d2]))
        },
        Mat::zeros(n, 2),
        &grid,
        Symmetry::None,
    )?;
    let mut u0 = Vec::with_capacity(grid.n_nodes());
    let mut v0 = Vec::with_capacity(grid.n_nodes());
    for k in 0..grid.n_nodes() {
        let e = state.at(k);
        let (a, b) = offsets(
            &coeffs[k],
            &cdre.gains[k],
            cdre.p1.at(k),
            cdre.p2.at(k),
            &e.columns(0, 1).into_owned(),
            &e.columns(1, 1).into_owned(),
            grid.node(k),
        )?;
        u0.push(a);
        v0.push(b);
    }
    Ok(AffineCorrections {
        u0: MatrixTrajectory::new(grid, u0)?,
        v0: MatrixTrajectory::new(grid, v0)?,
        eta1: MatrixTrajectory::zeros(grid, n, 1),
        eta2: MatrixTrajectory::zeros(grid, n, 1),
        eta_bar1: state.columns(0, 1),
        eta_bar2: state.columns(1, 1),
    })
}

#[derive(Debug, Clone)]
pub struct ClosedLoopSolution {
    pub gamma: f64,
    pub riccati: ClosedLoopRiccati,
    pub affine: AffineCorrections,
    pub j1star: f64,
    pub j2star: f64,
    /// The closed-loop disturbance-to-output operator has norm below γ.
    pub gainbound_ok: bool,
}

impl ClosedLoopSolution {
    pub fn grid(&self) -> &TimeGrid {
        self.riccati.grid()
    }

    /// `u* = U x + Ū E[x] + U0`.
    pub fn control_law(&self) -> AffineFeedback {
        AffineFeedback {
            gain: self.riccati.u.clone(),
            gain_bar: self.riccati.ubar.clone(),
            offset: self.affine.u0.clone(),
        }
    }

    /// `v* = V x + V̄ E[x] + V0`.
    pub fn disturbance_law(&self) -> AffineFeedback {
        AffineFeedback {
            gain: self.riccati.v.clone(),
            gain_bar: self.riccati.vbar.clone(),
            offset: self.affine.v0.clone(),
        }
    }
}

/// Equilibrium costs
///
/// ```text
/// J1* = tr(P1Σξ) + ⟨Π1m0, m0⟩ + 2⟨η̄1, m0⟩ + ∫ σ1ᵀP1σ1 − |U0|² + 2⟨η̄1, b1⟩ − Ξ̄ᵀΛ̄⁻¹Ξ̄,   Ξ̄ = C̃2ᵀP1σ1 + C̃1ᵀη̄1
/// J2* = tr(P2Σξ) + ⟨Π2m0, m0⟩ + 2⟨η̄2, m0⟩ + ∫ σ2ᵀP2σ2 + 2⟨η̄2, b2⟩ − Ψ̄ᵀΘ̄⁻¹Ψ̄,          Ψ̄ = B̃2ᵀP2σ2 + B̃1ᵀη̄2
/// ```
pub fn equilibrium_costs(sys: &MFSystem, riccati: &ClosedLoopRiccati, affine: &AffineCorrections, law: &InitialLaw) -> (f64, f64) {
    let grid = riccati.grid();
    let mean = law.mean();
    let cov = law.covariance();
    let mut f1 = Vec::with_capacity(grid.n_nodes());
    let mut f2 = Vec::with_capacity(grid.n_nodes());
    for k in 0..grid.n_nodes() {
        let c = sys.node(k);
        let g = &riccati.gains[k];
        let (p1, p2) = (riccati.p1.at(k), riccati.p2.at(k));
        let (u0, v0) = (affine.u0.at(k), affine.v0.at(k));
        let (eb1, eb2) = (affine.eta_bar1.at(k), affine.eta_bar2.at(k));
        let sigma1 = &c.sigma + &c.b2t * u0;
        let b1 = &c.b + &c.b1t * u0;
        let sigma2 = &c.sigma + &c.c2t * v0;
        let b2 = &c.b + &c.c1t * v0;
        // Ξ̄ = −Λ̄V0 and Ψ̄ = −Θ̄U0 up to the coupling terms; evaluated directly.
        let xi = c.c2t.transpose() * p1 * &sigma1 + c.c1t.transpose() * eb1;
        let psi = c.b2t.transpose() * p2 * &sigma2 + c.b1t.transpose() * eb2;
        let xi_term = dot(&xi, &g.lambda_bar.clone().lu().solve(&xi).expect("Λ̄ invertible"));
        let psi_term = dot(&psi, &g.theta_bar.clone().lu().solve(&psi).expect("Θ̄ invertible"));
        f1.push(quad_form(p1, &sigma1) - dot(u0, u0) + 2.0 * dot(eb1, &b1) - xi_term);
        f2.push(quad_form(p2, &sigma2) + 2.0 * dot(eb2, &b2) - psi_term);
    }
    let j1 = (riccati.p1.initial() * &cov).trace()
        + quad_form(riccati.pi1.initial(), &mean)
        + 2.0 * dot(affine.eta_bar1.initial(), &mean)
        + trapezoid(&f1, grid.dt());
    let j2 = (riccati.p2.initial() * &cov).trace()
        + quad_form(riccati.pi2.initial(), &mean)
        + 2.0 * dot(affine.eta_bar2.initial(), &mean)
        + trapezoid(&f2, grid.dt());
    (j1, j2)
}

/// The system seen by the disturbance once `u = U x + Ū E[x]` is fixed,
/// with zero affine terms, and its output matrices
/// `(Q_dev, Q_mean) = ([Q; N1U], [Q; N1Ũ])`.
pub fn closed_loop_plant(
    sys: &MFSystem,
    u: &MatrixTrajectory,
    ubar: &MatrixTrajectory,
) -> Result<(MFSystem, MatrixTrajectory, MatrixTrajectory)> {
    let grid = sys.grid;
    let fb = AffineFeedback::new(u.clone(), ubar.clone(), MatrixTrajectory::zeros(grid, sys.n_u, 1))?;
    let plant = sys.with_control_feedback(&fb)?.without_affine();
    let mut dev = Vec::with_capacity(grid.n_nodes());
    let mut mean = Vec::with_capacity(grid.n_nodes());
    for (k, s) in grid.nodes().enumerate() {
        let q = sys.q.at(k);
        let n1 = sys.n1.at(k);
        let uk = u.eval(s);
        let ut = &uk + ubar.eval(s);
        dev.push(vstack(&[q, &(n1 * uk)]));
        mean.push(vstack(&[q, &(n1 * ut)]));
    }
    Ok((plant, MatrixTrajectory::new(grid, dev)?, MatrixTrajectory::new(grid, mean)?))
}

/// Full closed-loop synthesis at level γ: Riccati equations, affine
/// corrections, equilibrium costs for `law` and the gain-bound certificate.
pub fn synthesize(sys: &MFSystem, gamma: f64, law: &InitialLaw, opts: &ClosedLoopOptions) -> Result<ClosedLoopSolution> {
    let riccati = closedloop_cdre_solve(sys, gamma, opts)?;
    let affine = affine_coupling_solve(sys, &riccati, opts)?;
    let (j1star, j2star) = equilibrium_costs(sys, &riccati, &affine, law);
    let (plant, dev, mean) = closed_loop_plant(sys, &riccati.u, &riccati.ubar)?;
    let brl_opts = BrlOptions { delta: opts.delta1, weights: Some((dev, mean)) };
    let gainbound_ok = match brl_cdre_solve(&plant, gamma, &brl_opts) {
        Ok(_) => true,
        Err(e) if e.is_infeasible() => false,
        Err(e) => return Err(e),
    };
    Ok(ClosedLoopSolution { gamma, riccati, affine, j1star, j2star, gainbound_ok })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brl::{brl_cdre_solve, BrlOptions};
    use crate::model::fixtures;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn opts() -> ClosedLoopOptions {
        ClosedLoopOptions::default()
    }

    #[test]
    fn zero_kernels_zero_gains() {
        let sys = fixtures::system("sysA", 10);
        let z = Mat::zeros(1, 1);
        let g = gain_coupling_solve(&sys.node(0), 2.0, &z, &z, &z, &z, &opts(), 0.0).unwrap();
        for m in [&g.u, &g.v, &g.ubar(), &g.vbar()] {
            assert_eq!(m.amax(), 0.0);
        }
    }

    #[test]
    fn decoupled_closed_forms_when_c2_vanishes() {
        let mut sys = fixtures::system("sysB", 10);
        sys.c2 = MatrixTrajectory::zeros(sys.grid, 2, 1);
        let c = sys.node(0);
        let p1 = Mat::from_row_slice(2, 2, &[0.3, 0.1, 0.1, -0.2]);
        let p2 = Mat::from_row_slice(2, 2, &[0.5, -0.1, -0.1, 0.4]);
        let g = gain_coupling_solve(&c, 1.5, &p1, &p2, &p1, &p2, &opts(), 0.0).unwrap();
        let theta = Mat::identity(1, 1) + c.b2.transpose() * &p2 * &c.b2;
        let u = -theta.try_inverse().unwrap() * (c.b1.transpose() * &p2 + c.b2.transpose() * &p2 * &c.a2);
        let v = -(c.c1.transpose() * &p1) / (1.5 * 1.5);
        assert!((&g.u - u).amax() < 1e-14);
        assert!((&g.v - v).amax() < 1e-14);
    }

    #[test]
    fn coupling_matches_damped_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sys = fixtures::system("sysA", 10);
        let mut c = sys.node(0);
        for _ in 0..50 {
            let mut r = |a: f64| Mat::from_element(1, 1, rng.random_range(-a..a));
            c.a2 = r(0.5);
            c.b1 = r(1.0);
            c.b2 = r(0.5);
            c.c1 = r(1.0);
            c.c2 = r(0.5);
            c.a2t = &c.a2 + r(0.2);
            c.b1t = &c.b1 + r(0.2);
            c.b2t = &c.b2 + r(0.2);
            c.c1t = &c.c1 + r(0.2);
            c.c2t = &c.c2 + r(0.2);
            let (p1, p2, pi1, pi2) = (r(1.0), r(1.0).abs(), r(1.0), r(1.0));
            let g = gain_coupling_solve(&c, 2.0, &p1, &p2, &pi1, &pi2, &opts(), 0.0).unwrap();
            // U = −Θ⁻¹(B1ᵀP2 + B2ᵀP2(A2 + C2V)), V = −Λ⁻¹(C1ᵀP1 + C2ᵀP1(A2 + B2U))
            let (mut u, mut v) = (Mat::zeros(1, 1), Mat::zeros(1, 1));
            for _ in 0..200 {
                let un = -(c.b1.transpose() * &p2 + c.b2.transpose() * &p2 * (&c.a2 + &c.c2 * &v))
                    / g.theta[(0, 0)];
                let vn = -(c.c1.transpose() * &p1 + c.c2.transpose() * &p1 * (&c.a2 + &c.b2 * &u))
                    / g.lambda[(0, 0)];
                u = &u * 0.5 + un * 0.5;
                v = &v * 0.5 + vn * 0.5;
            }
            assert!((&g.u - u).amax() <= 1e-9 && (&g.v - v).amax() <= 1e-9);
        }
    }

    #[test]
    fn zero_fixture() {
        let sys = fixtures::system("zero", 100);
        let sol = synthesize(&sys, 2.0, &InitialLaw::point(&[0.0]), &opts()).unwrap();
        let r = &sol.riccati;
        for t in [&r.p1, &r.p2, &r.pi1, &r.pi2, &r.u, &r.ubar, &r.v, &r.vbar] {
            assert_eq!(t.max_abs(), 0.0);
        }
        assert_eq!((sol.j1star, sol.j2star), (0.0, 0.0));
        assert!(sol.gainbound_ok);
    }

    #[test]
    fn sys_a_residuals_symmetry_terminal() {
        let sys = fixtures::system("sysA", 2000);
        let r = closedloop_cdre_solve(&sys, 2.0, &opts()).unwrap();
        assert_eq!(r.state.terminal().amax(), 0.0);
        assert!(r.asymmetry() <= 1e-10);
        for k in [1, 500, 1000, 1999] {
            assert!(r.riccati_residual(&sys, k) <= 1e-6, "node {k}");
        }
        for k in 0..=2000 {
            assert!(r.gain_residual(&sys, k) <= 1e-9);
        }
    }

    #[test]
    fn mean_field_collapse() {
        let sys = fixtures::system("nomf", 2000);
        let r = closedloop_cdre_solve(&sys, 2.0, &opts()).unwrap();
        assert!(r.p1.max_abs_diff(&r.pi1) <= 1e-8);
        assert!(r.p2.max_abs_diff(&r.pi2) <= 1e-8);
        assert!(r.ubar.max_abs() + r.vbar.max_abs() <= 1e-8);
    }

    #[test]
    fn no_control_reproduces_brl() {
        let sys = fixtures::system("sysA", 2000).without_control();
        let r = closedloop_cdre_solve(&sys, 2.0, &opts()).unwrap();
        let a = affine_coupling_solve(&sys, &r, &opts()).unwrap();
        let b = brl_cdre_solve(&sys, 2.0, &BrlOptions::default()).unwrap();
        assert!(r.p1.max_abs_diff(&b.p) <= 1e-6);
        assert!(r.pi1.max_abs_diff(&b.pi) <= 1e-6);
        assert_eq!(r.u.max_abs(), 0.0);
        assert!(r.v.max_abs_diff(&b.gain) <= 1e-6);
        assert!(r.v.zip_map(&r.vbar, |x, y| x + y).unwrap().max_abs_diff(&b.gain_bar) <= 1e-6);
        assert!(a.v0.max_abs_diff(&b.offset) <= 1e-6);
        let law = fixtures::law("sysA");
        let (j1, _) = equilibrium_costs(&sys, &r, &a, &law);
        assert!((j1 - b.optimal_cost(&sys, &law)).abs() <= 1e-6);
    }

    #[test]
    fn affine_vanishes_without_forcing() {
        let sys = fixtures::system("sysB", 500).without_affine();
        let sol = synthesize(&sys, sys.gamma, &fixtures::law("sysB"), &opts()).unwrap();
        let a = &sol.affine;
        for t in [&a.u0, &a.v0, &a.eta_bar1, &a.eta_bar2] {
            assert_eq!(t.max_abs(), 0.0);
        }
        let x0 = InitialLaw::point(&[0.4, -0.2]);
        let (j1, j2) = equilibrium_costs(&sys, &sol.riccati, &sol.affine, &x0);
        let m = Mat::from_column_slice(2, 1, &[0.4, -0.2]);
        assert!((j1 - quad_form(sol.riccati.pi1.initial(), &m)).abs() < 1e-14);
        assert!((j2 - quad_form(sol.riccati.pi2.initial(), &m)).abs() < 1e-14);
    }

    #[test]
    fn offsets_decouple_from_drift() {
        let mut sys = fixtures::system("sysA", 500);
        for t in [&mut sys.c1, &mut sys.c1bar, &mut sys.b1, &mut sys.b1bar] {
            *t = MatrixTrajectory::zeros(sys.grid, 1, 1);
        }
        sys.sigma = MatrixTrajectory::zeros(sys.grid, 1, 1);
        let sol = synthesize(&sys, 2.0, &fixtures::law("sysA"), &opts()).unwrap();
        assert_eq!(sol.affine.u0.max_abs() + sol.affine.v0.max_abs(), 0.0);
        assert!(sol.affine.eta_bar1.max_abs() > 0.0 && sol.affine.eta_bar2.max_abs() > 0.0);
    }

    #[test]
    fn offsets_step_halving() {
        let law = fixtures::law("sysA");
        let a = synthesize(&fixtures::system("sysA", 2000), 2.0, &law, &opts()).unwrap();
        let b = synthesize(&fixtures::system("sysA", 4000), 2.0, &law, &opts()).unwrap();
        assert!((a.affine.u0.initial() - b.affine.u0.initial()).amax() <= 1e-8);
        assert!((a.affine.v0.initial() - b.affine.v0.initial()).amax() <= 1e-8);
        assert!(a.gainbound_ok);
    }
}

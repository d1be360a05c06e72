//! Open-loop Nash strategies through the augmented system.
//!
//! Both adjoint processes are stacked as `𝐘 = (Y2; Y1)`, and `w = (u; v)`.
//! The adjoint of `u` lives in the top copy and the adjoint of `v` in the
//! bottom copy, so the selector `𝐉ᵀ` keeps the u-rows of the top block and
//! the v-rows of the bottom block. With `𝐏 = (P2; P1)` and `𝚷 = (Π2; Π1)`
//! (each `2n × n`) the representation
//!
//! ```text
//! 𝐘 = 𝐏(X − E[X]) + 𝚷E[X] + η̄
//! w = K(X − E[X]) + K̃E[X] + χ
//! ```
//!
//! closes the forward-backward system.

use crate::brl::{brl_feasible, relative_mismatch, BrlOptions};
use crate::closedloop::closed_loop_plant;
use crate::error::{Error, Result};
use crate::mcsim::{Observer, Policy, Simulator, StepView};
use crate::model::{AffineFeedback, InitialLaw, MFSystem, NodeCoefficients};
use crate::numerics::{
    block_diag, condition_number, hstack, integrate_backward, vstack, Mat, MatrixTrajectory, Symmetry,
    TimeGrid, COND_LIMIT,
};
use std::fmt;

/// Augmented coefficients at one grid node.
#[derive(Debug, Clone)]
pub struct AugmentedNode {
    /// `[B1 C1]`, `n × m`.
    pub b: Mat,
    pub bbar: Mat,
    /// `[B2 C2]`, `n × m`.
    pub d: Mat,
    pub dbar: Mat,
    pub a1: Mat,
    pub a2: Mat,
    pub a1t: Mat,
    pub a2t: Mat,
    /// Block-diagonal doubles, `2n × 2n`.
    pub a1b: Mat,
    pub a2b: Mat,
    pub a1bar_b: Mat,
    pub a2bar_b: Mat,
    /// Block-diagonal doubles, `2n × 2m`.
    pub bb: Mat,
    pub bbar_b: Mat,
    pub db: Mat,
    pub dbar_b: Mat,
    /// `diag(QᵀQ, −QᵀQ)`.
    pub q: Mat,
    pub drift: Mat,
    pub sigma: Mat,
}

impl AugmentedNode {
    pub fn bt(&self) -> Mat {
        &self.b + &self.bbar
    }

    pub fn dt(&self) -> Mat {
        &self.d + &self.dbar
    }

    pub fn a1bt(&self) -> Mat {
        &self.a1b + &self.a1bar_b
    }

    pub fn a2bt(&self) -> Mat {
        &self.a2b + &self.a2bar_b
    }

    pub fn bbt(&self) -> Mat {
        &self.bb + &self.bbar_b
    }

    pub fn dbt(&self) -> Mat {
        &self.db + &self.dbar_b
    }
}

#[derive(Debug, Clone)]
pub struct AugmentedSystem {
    pub grid: TimeGrid,
    pub n: usize,
    pub n_u: usize,
    pub n_v: usize,
    pub gamma: f64,
    /// `diag(I, γ²I)`, `m × m`.
    pub r: Mat,
    /// `2m × m`.
    pub j: Mat,
    /// `(I; I)`, `2n × n`.
    pub i_n: Mat,
    /// `(I; I)`, `2m × m`.
    pub i_m: Mat,
    pub nodes: Vec<AugmentedNode>,
}

impl AugmentedSystem {
    pub fn m(&self) -> usize {
        self.n_u + self.n_v
    }

    /// `𝐑𝐈_m`.
    fn r_stack(&self) -> Mat {
        &self.i_m * &self.r
    }
}

fn augment_node(c: &NodeCoefficients) -> AugmentedNode {
    let b = hstack(&[&c.b1, &c.c1]);
    let bbar = hstack(&[&c.b1bar, &c.c1bar]);
    let d = hstack(&[&c.b2, &c.c2]);
    let dbar = hstack(&[&c.b2bar, &c.c2bar]);
    let dbl = |m: &Mat| block_diag(m, m);
    AugmentedNode {
        a1b: dbl(&c.a1),
        a2b: dbl(&c.a2),
        a1bar_b: dbl(&c.a1bar),
        a2bar_b: dbl(&c.a2bar),
        bb: dbl(&b),
        bbar_b: dbl(&bbar),
        db: dbl(&d),
        dbar_b: dbl(&dbar),
        q: block_diag(&c.qtq, &-&c.qtq),
        b,
        bbar,
        d,
        dbar,
        a1: c.a1.clone(),
        a2: c.a2.clone(),
        a1t: c.a1t.clone(),
        a2t: c.a2t.clone(),
        drift: c.b.clone(),
        sigma: c.sigma.clone(),
    }
}

pub fn build_augmented(sys: &MFSystem, gamma: f64) -> Result<AugmentedSystem> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidInput(format!("gamma must be positive, got {gamma}")));
    }
    sys.check_dimensions()?;
    let (n, nu, nv) = (sys.n, sys.n_u, sys.n_v);
    let m = nu + nv;
    let mut r = Mat::identity(m, m);
    r.view_mut((nu, nu), (nv, nv)).fill_diagonal(gamma * gamma);
    let mut j = Mat::zeros(2 * m, m);
    j.view_mut((0, 0), (nu, nu)).fill_diagonal(1.0);
    j.view_mut((m + nu, nu), (nv, nv)).fill_diagonal(1.0);
    let eye = |k: usize| vstack(&[&Mat::identity(k, k), &Mat::identity(k, k)]);
    Ok(AugmentedSystem {
        grid: sys.grid,
        n,
        n_u: nu,
        n_v: nv,
        gamma,
        r,
        j,
        i_n: eye(n),
        i_m: eye(m),
        nodes: sys.nodes().iter().map(augment_node).collect(),
    })
}

/// Σ, Σ̄ and the gains at one instant.
#[derive(Debug, Clone)]
pub struct OpenLoopKernels {
    pub sigma: Mat,
    pub sigma_bar: Mat,
    pub k: Mat,
    pub kt: Mat,
    pub cond: f64,
    pub cond_bar: f64,
}

fn solve_sigma(s: &Mat, rhs: &Mat, time: f64) -> Result<(Mat, f64)> {
    let cond = condition_number(s);
    if !(cond <= COND_LIMIT) {
        return Err(Error::SingularSigma { time, cond });
    }
    let x = s.clone().lu().solve(rhs).ok_or(Error::SingularSigma { time, cond })?;
    Ok((x, cond))
}

/// ```text
/// Σ = 𝐉ᵀ(𝐑𝐈_m + 𝐃ᵀ𝐏D),   K = −Σ⁻¹𝐉ᵀ(𝐁ᵀ𝐏 + 𝐃ᵀ𝐏A2)
/// Σ̄ = 𝐉ᵀ(𝐑𝐈_m + 𝐃̃ᵀ𝐏D̃),  K̃ = −Σ̄⁻¹𝐉ᵀ(𝐁̃ᵀ𝚷 + 𝐃̃ᵀ𝐏Ã2)
/// ```
pub fn openloop_kernels(aug: &AugmentedSystem, k: usize, p: &Mat, pi: &Mat, time: f64) -> Result<OpenLoopKernels> {
    let c = &aug.nodes[k];
    let jt = aug.j.transpose();
    let rs = aug.r_stack();
    let (dbt, dt) = (c.dbt(), c.dt());
    let sigma = &jt * (&rs + c.db.transpose() * p * &c.d);
    let sigma_bar = &jt * (&rs + dbt.transpose() * p * &dt);
    let (k, cond) = solve_sigma(&sigma, &(&jt * (c.bb.transpose() * p + c.db.transpose() * p * &c.a2)), time)?;
    let (kt, cond_bar) = solve_sigma(&sigma_bar, &(&jt * (c.bbt().transpose() * pi + dbt.transpose() * p * &c.a2t)), time)?;
    Ok(OpenLoopKernels { sigma, sigma_bar, k: -k, kt: -kt, cond, cond_bar })
}

/// `(𝐏̇, 𝚷̇)` with the gains evaluated at the same matrices.
pub fn openloop_rhs(aug: &AugmentedSystem, k: usize, p: &Mat, pi: &Mat, g: &OpenLoopKernels) -> (Mat, Mat) {
    let c = &aug.nodes[k];
    let qi = &c.q * &aug.i_n;
    let dp = -(p * &c.a1 + c.a1b.transpose() * p + c.a2b.transpose() * p * &c.a2 + &qi
        + (p * &c.b + c.a2b.transpose() * p * &c.d) * &g.k);
    let a2bt = c.a2bt();
    let dpi = -(pi * &c.a1t + c.a1bt().transpose() * pi + a2bt.transpose() * p * &c.a2t + &qi
        + (pi * c.bt() + a2bt.transpose() * p * c.dt()) * &g.kt);
    (dp, dpi)
}

#[derive(Debug, Clone)]
pub struct OpenLoopRiccati {
    pub gamma: f64,
    /// `(P2; P1)`.
    pub p: MatrixTrajectory,
    /// `(Π2; Π1)`.
    pub pi: MatrixTrajectory,
    pub k: MatrixTrajectory,
    pub ktilde: MatrixTrajectory,
    pub sigma: MatrixTrajectory,
    pub sigma_bar: MatrixTrajectory,
    /// Condition numbers of Σ and Σ̄ at each node.
    pub cond: Vec<(f64, f64)>,
    state: MatrixTrajectory,
}

fn split2(m: &Mat, n: usize) -> (Mat, Mat) {
    (m.columns(0, n).into_owned(), m.columns(n, n).into_owned())
}

pub fn openloop_cdre_solve(aug: &AugmentedSystem) -> Result<OpenLoopRiccati> {
    let n = aug.n;
    let grid = aug.grid;
    let state = integrate_backward(
        |k, s, st| {
            let (p, pi) = split2(st, n);
            let g = openloop_kernels(aug, k, &p, &pi, s)?;
            let (dp, dpi) = openloop_rhs(aug, k, &p, &pi, &g);
            Ok(hstack(&[&dp, &dpi]))
        },
        Mat::zeros(2 * n, 2 * n),
        &grid,
        Symmetry::None,
    )?;
    let mut kern = Vec::with_capacity(grid.n_nodes());
    for k in 0..grid.n_nodes() {
        let (p, pi) = split2(state.at(k), n);
        kern.push(openloop_kernels(aug, k, &p, &pi, grid.node(k))?);
    }
    let traj = |f: &dyn Fn(&OpenLoopKernels) -> Mat| MatrixTrajectory::new(grid, kern.iter().map(f).collect());
    Ok(OpenLoopRiccati {
        gamma: aug.gamma,
        p: state.columns(0, n),
        pi: state.columns(n, n),
        k: traj(&|g| g.k.clone())?,
        ktilde: traj(&|g| g.kt.clone())?,
        sigma: traj(&|g| g.sigma.clone())?,
        sigma_bar: traj(&|g| g.sigma_bar.clone())?,
        cond: kern.iter().map(|g| (g.cond, g.cond_bar)).collect(),
        state,
    })
}

impl OpenLoopRiccati {
    pub fn grid(&self) -> &TimeGrid {
        self.p.grid()
    }

    /// Relative central-difference residual of both equations at interior
    /// node `k`.
    pub fn riccati_residual(&self, aug: &AugmentedSystem, k: usize) -> f64 {
        let grid = self.grid();
        assert!(k > 0 && k < grid.steps(), "interior node required");
        let n = aug.n;
        let (p, pi) = split2(self.state.at(k), n);
        let g = openloop_kernels(aug, k, &p, &pi, grid.node(k)).expect("solved node");
        let (dp, dpi) = openloop_rhs(aug, k, &p, &pi, &g);
        let cd = (self.state.at(k + 1) - self.state.at(k - 1)) / (2.0 * grid.dt());
        let (cp, cpi) = split2(&cd, n);
        relative_mismatch(&[(&cp, &dp), (&cpi, &dpi)])
    }
}

/// Right-hand sides of the two affine equations (with ζ = 0):
///
/// ```text
/// η̇ = −[𝐀1ᵀη + 𝐀2ᵀ𝐏σ + 𝐏b − (𝐏B + 𝐀2ᵀ𝐏D)Σ⁻¹𝐉ᵀ(𝐁ᵀη + 𝐃ᵀ𝐏σ)]
/// η̄̇ = −[𝐀̃1ᵀη̄ + 𝐀̃2ᵀ𝐏σ + 𝚷b + (𝚷B̃ + 𝐀̃2ᵀ𝐏D̃)χ],   χ = −Σ̄⁻¹𝐉ᵀ(𝐁̃ᵀη̄ + 𝐃̃ᵀ𝐏σ)
/// ```
///
/// Only `η − E[η]` enters the strategy, so `η` is carried for completeness.
fn affine_rhs(aug: &AugmentedSystem, k: usize, p: &Mat, pi: &Mat, g: &OpenLoopKernels, eta: &Mat, eta_bar: &Mat, time: f64) -> Result<(Mat, Mat)> {
    let c = &aug.nodes[k];
    let jt = aug.j.transpose();
    let psig = p * &c.sigma;
    let (off, _) = solve_sigma(&g.sigma, &(&jt * (c.bb.transpose() * eta + c.db.transpose() * &psig)), time)?;
    let deta = -(c.a1b.transpose() * eta + c.a2b.transpose() * &psig + p * &c.drift
        - (p * &c.b + c.a2b.transpose() * p * &c.d) * off);
    let chi = chi_at(aug, k, p, g, eta_bar, time)?;
    let a2bt = c.a2bt();
    let deta_bar = -(c.a1bt().transpose() * eta_bar + a2bt.transpose() * &psig + pi * &c.drift
        + (pi * c.bt() + a2bt.transpose() * p * c.dt()) * chi);
    Ok((deta, deta_bar))
}

fn chi_at(aug: &AugmentedSystem, k: usize, p: &Mat, g: &OpenLoopKernels, eta_bar: &Mat, time: f64) -> Result<Mat> {
    let c = &aug.nodes[k];
    let rhs = aug.j.transpose() * (c.bbt().transpose() * eta_bar + c.dbt().transpose() * p * &c.sigma);
    Ok(-solve_sigma(&g.sigma_bar, &rhs, time)?.0)
}

/// Integrate `η` and `η̄` backward from zero. Returns `(η, η̄)`.
pub fn openloop_affine_solve(aug: &AugmentedSystem, ric: &OpenLoopRiccati) -> Result<(MatrixTrajectory, MatrixTrajectory)> {
    let n = aug.n;
    let grid = aug.grid;
    let dt = grid.dt();
    let state = integrate_backward(
        |k, s, e| {
            let theta = (s - grid.node(k)) / dt;
            let (p, pi) = split2(&ric.state.eval_in_interval(k, theta), n);
            let g = openloop_kernels(aug, k, &p, &pi, s)?;
            let eta = e.columns(0, 1).into_owned();
            let eta_bar = e.columns(1, 1).into_owned();
            let (a, b) = affine_rhs(aug, k, &p, &pi, &g, &eta, &eta_bar, s)?;
            Ok(hstack(&[&a, &b]))
        },
        Mat::zeros(2 * n, 2),
        &grid,
        Symmetry::None,
    )?;
    Ok((state.columns(0, 1), state.columns(1, 1)))
}

/// `χ = −Σ̄⁻¹𝐉ᵀ(𝐁̃ᵀη̄ + 𝐃̃ᵀ𝐏σ)` at every node; `(K, K̃)` come with the Riccati
/// solution.
pub fn openloop_gains(aug: &AugmentedSystem, ric: &OpenLoopRiccati, eta_bar: &MatrixTrajectory) -> Result<MatrixTrajectory> {
    let grid = aug.grid;
    let mut chi = Vec::with_capacity(grid.n_nodes());
    for k in 0..grid.n_nodes() {
        let (p, pi) = (ric.p.at(k), ric.pi.at(k));
        let g = openloop_kernels(aug, k, p, pi, grid.node(k))?;
        chi.push(chi_at(aug, k, p, &g, eta_bar.at(k), grid.node(k))?);
    }
    MatrixTrajectory::new(grid, chi)
}

/// Outcome of the disturbance-attenuation check. The open-loop
/// construction only ever certifies sufficient conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Certificate {
    /// Attenuation holds strictly at γ.
    Strict,
    /// Fails at γ but holds at γ + tol; the boundary case.
    UndeterminedAtTolerance,
    Violated,
}

impl fmt::Display for Certificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Certificate::Strict => "sufficient conditions hold (strict attenuation)",
            Certificate::UndeterminedAtTolerance => "sufficient conditions undetermined at tolerance",
            Certificate::Violated => "sufficient conditions violated",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct OpenLoopSolution {
    pub gamma: f64,
    pub riccati: OpenLoopRiccati,
    pub eta: MatrixTrajectory,
    pub eta_bar: MatrixTrajectory,
    pub chi: MatrixTrajectory,
    pub n_u: usize,
    pub n_v: usize,
}

impl OpenLoopSolution {
    pub fn grid(&self) -> &TimeGrid {
        self.riccati.grid()
    }

    pub fn k(&self) -> &MatrixTrajectory {
        &self.riccati.k
    }

    pub fn ktilde(&self) -> &MatrixTrajectory {
        &self.riccati.ktilde
    }

    fn law_rows(&self, start: usize, len: usize) -> AffineFeedback {
        let k = self.riccati.k.rows(start, len);
        let kt = self.riccati.ktilde.rows(start, len);
        AffineFeedback {
            gain_bar: kt.zip_map(&k, |a, b| a - b).expect("same grid"),
            gain: k,
            offset: self.chi.rows(start, len),
        }
    }

    /// u-rows of `w = K(x − m) + K̃m + χ`.
    pub fn control_law(&self) -> AffineFeedback {
        self.law_rows(0, self.n_u)
    }

    /// v-rows of `w = K(x − m) + K̃m + χ`.
    pub fn disturbance_law(&self) -> AffineFeedback {
        self.law_rows(self.n_u, self.n_v)
    }

    /// Attenuation check on the plant seen by the disturbance once the
    /// control is fixed: strict at γ, or failing only within `tol`.
    pub fn certificate(&self, sys: &MFSystem, tol: f64) -> Result<Certificate> {
        let u = self.control_law();
        let (plant, dev, mean) = closed_loop_plant(sys, &u.gain, &u.gain_bar)?;
        let opts = BrlOptions { weights: Some((dev, mean)), ..BrlOptions::default() };
        if brl_feasible(&plant, self.gamma, &opts)? {
            Ok(Certificate::Strict)
        } else if brl_feasible(&plant, self.gamma + tol, &opts)? {
            Ok(Certificate::UndeterminedAtTolerance)
        } else {
            Ok(Certificate::Violated)
        }
    }
}

/// Riccati, affine and gain solves at level γ.
pub fn openloop_solve(sys: &MFSystem, gamma: f64) -> Result<OpenLoopSolution> {
    let aug = build_augmented(sys, gamma)?;
    let riccati = openloop_cdre_solve(&aug)?;
    let (eta, eta_bar) = openloop_affine_solve(&aug, &riccati)?;
    let chi = openloop_gains(&aug, &riccati, &eta_bar)?;
    Ok(OpenLoopSolution { gamma, riccati, eta, eta_bar, chi, n_u: sys.n_u, n_v: sys.n_v })
}

/// Root-mean-square norms of both stationarity left-hand sides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationarityResidual {
    /// Disturbance equation, `C1ᵀY1 + C2ᵀZ1 + C̄1ᵀE[Y1] + C̄2ᵀE[Z1] + γ²v`.
    pub res_v: f64,
    /// Control equation, `B1ᵀY2 + B2ᵀZ2 + B̄1ᵀE[Y2] + B̄2ᵀE[Z2] + u`.
    pub res_u: f64,
}

/// Per-node data of the residual `r = M1(x − m) + M2·diffusion + c + 𝐑w`.
struct ResidualNode {
    m1: Vec<f64>,
    m2: Vec<f64>,
    c: Vec<f64>,
}

struct ResidualObs<'a> {
    nodes: &'a [ResidualNode],
    r: &'a [f64],
    n_u: usize,
    dt: f64,
    d: Vec<f64>,
    buf: Vec<f64>,
    cur: [f64; 2],
    out: Vec<[f64; 2]>,
}

fn gemv(out: &mut [f64], a: &[f64], x: &[f64]) {
    let r = out.len();
    for (j, &xj) in x.iter().enumerate() {
        for (o, &c) in out.iter_mut().zip(&a[j * r..(j + 1) * r]) {
            *o += c * xj;
        }
    }
}

impl Observer for ResidualObs<'_> {
    type Output = Vec<[f64; 2]>;

    fn start_path(&mut self, _path: usize) {
        self.cur = [0.0; 2];
    }

    fn visit(&mut self, st: &StepView<'_>) {
        let Some(nd) = self.nodes.get(st.k) else { return };
        for ((d, x), m) in self.d.iter_mut().zip(st.x).zip(st.node.m()) {
            *d = x - m;
        }
        self.buf.copy_from_slice(&nd.c);
        gemv(&mut self.buf, &nd.m1, &self.d);
        gemv(&mut self.buf, &nd.m2, st.diffusion);
        let w = st.u.iter().chain(st.v);
        for (i, (b, wi)) in self.buf.iter().zip(w).enumerate() {
            let e = b + self.r[i] * wi;
            self.cur[usize::from(i >= self.n_u)] += e * e * self.dt;
        }
    }

    fn end_path(&mut self) {
        self.out.push(self.cur);
    }

    fn finish(self) -> Vec<[f64; 2]> {
        self.out
    }
}

/// Simulate the state under `w = K(x − m) + K̃m + χ` and measure how far the
/// reconstructed adjoints are from stationarity.
///
/// `𝐘_k = 𝐏_k(x_k − m_k) + 𝚷_k m_k + η̄_k`, and `𝐙_k` is the one-step
/// martingale estimate `E_k[𝐘_{k+1} ΔW_k] / dt = 𝐏_{k+1}·diffusion_k`.
/// The residuals vanish as the grid is refined, at first order.
pub fn stationarity_residual(
    sys: &MFSystem,
    sol: &OpenLoopSolution,
    law: &InitialLaw,
    n_paths: usize,
    seed: u64,
) -> Result<StationarityResidual> {
    if n_paths == 0 {
        return Err(Error::InvalidInput("need at least one path".into()));
    }
    let aug = build_augmented(sys, sol.gamma)?;
    let grid = aug.grid;
    if grid != *sol.grid() {
        return Err(Error::Dimension("solution and system grids differ".into()));
    }
    let pu = Policy::feedback(sol.control_law());
    let pv = Policy::feedback(sol.disturbance_law());
    let sim = Simulator::new(sys, &pu, &pv, None, law)?;
    let jt = aug.j.transpose();
    let ric = &sol.riccati;
    let mut nodes = Vec::with_capacity(grid.steps());
    for k in 0..grid.steps() {
        let c = &aug.nodes[k];
        let nd = sim.node(k);
        let m = Mat::from_column_slice(sys.n, 1, nd.m());
        let ew = Mat::from_iterator(aug.m(), 1, nd.eu().iter().chain(nd.ev()).copied());
        let (p, pi, p1) = (ric.p.at(k), ric.pi.at(k), ric.p.at(k + 1));
        let ey = pi * &m + sol.eta_bar.at(k);
        let ediff = &c.a2t * &m + c.dt() * &ew + &c.sigma;
        let cvec = &jt * (c.bbt().transpose() * &ey + c.dbar_b.transpose() * p1 * &ediff);
        nodes.push(ResidualNode {
            m1: (&jt * c.bb.transpose() * p).as_slice().to_vec(),
            m2: (&jt * c.db.transpose() * p1).as_slice().to_vec(),
            c: cvec.as_slice().to_vec(),
        });
    }
    let r: Vec<f64> = aug.r.diagonal().iter().copied().collect();
    let blocks = sim.run(n_paths, seed, || ResidualObs {
        nodes: &nodes,
        r: &r,
        n_u: sys.n_u,
        dt: grid.dt(),
        d: vec![0.0; sys.n],
        buf: vec![0.0; aug.m()],
        cur: [0.0; 2],
        out: Vec::new(),
    });
    let mut sum = [0.0; 2];
    for s in blocks.iter().flatten() {
        sum[0] += s[0];
        sum[1] += s[1];
    }
    let np = n_paths as f64;
    Ok(StationarityResidual { res_u: (sum[0] / np).sqrt(), res_v: (sum[1] / np).sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brl::{brl_cdre_solve, BrlOptions};
    use crate::model::fixtures;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn augmented_shapes_and_blocks() {
        let aug = build_augmented(&fixtures::system("sysA", 10), 2.0).unwrap();
        assert_eq!(aug.m(), 2);
        assert_eq!(aug.r, Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 4.0]));
        let aug = build_augmented(&fixtures::system("sysB", 10), 1.5).unwrap();
        let c = &aug.nodes[3];
        assert_eq!(c.a1b.shape(), (4, 4));
        assert_eq!(c.a2bar_b.shape(), (4, 4));
        assert_eq!(c.q.shape(), (4, 4));
        assert_eq!(aug.r.shape(), (2, 2));
        assert_eq!(c.bb.shape(), (4, 4));
        assert_eq!(aug.j.shape(), (4, 2));
        let upper = c.q.view((0, 0), (2, 2)).into_owned();
        let lower = c.q.view((2, 2), (2, 2)).into_owned();
        assert_eq!(upper, -lower);
        // u from the top copy, v from the bottom copy
        assert_eq!(aug.j[(0, 0)], 1.0);
        assert_eq!(aug.j[(3, 1)], 1.0);
        assert_eq!(aug.j.sum(), 2.0);
    }

    #[test]
    fn zero_fixture_is_trivial() {
        let sys = fixtures::system("zero", 100);
        let aug = build_augmented(&sys, 2.0).unwrap();
        for c in &aug.nodes {
            for m in [&c.a1b, &c.a2b, &c.bb, &c.db, &c.bbar_b, &c.dbar_b, &c.q] {
                assert_eq!(m.amax(), 0.0);
            }
        }
        let sol = openloop_solve(&sys, 2.0).unwrap();
        let r = &sol.riccati;
        for t in [&r.p, &r.pi, &r.k, &r.ktilde, &sol.chi, &sol.eta, &sol.eta_bar] {
            assert_eq!(t.max_abs(), 0.0);
        }
        assert_eq!(*r.sigma.at(0), Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 4.0]));
        let res = stationarity_residual(&sys, &sol, &InitialLaw::point(&[0.3]), 50, 1).unwrap();
        assert_eq!((res.res_u, res.res_v), (0.0, 0.0));
    }

    /// The augmented gain equations written out block by block.
    #[test]
    fn gains_match_blockwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sys = fixtures::system("sysB", 10);
        let aug = build_augmented(&sys, 1.5).unwrap();
        let c = sys.node(4);
        for _ in 0..20 {
            let mut r = |rows: usize| Mat::from_fn(rows, 2, |_, _| rng.random_range(-1.0..1.0));
            let (p, pi) = (r(4), r(4));
            let g = openloop_kernels(&aug, 4, &p, &pi, 0.0).unwrap();
            let (p2, p1) = (p.rows(0, 2).into_owned(), p.rows(2, 2).into_owned());
            let (pi2, pi1) = (pi.rows(0, 2).into_owned(), pi.rows(2, 2).into_owned());
            let sigma = Mat::from_row_slice(
                2,
                2,
                &[
                    1.0 + (c.b2.transpose() * &p2 * &c.b2)[(0, 0)],
                    (c.b2.transpose() * &p2 * &c.c2)[(0, 0)],
                    (c.c2.transpose() * &p1 * &c.b2)[(0, 0)],
                    2.25 + (c.c2.transpose() * &p1 * &c.c2)[(0, 0)],
                ],
            );
            let rhs = vstack(&[
                &(c.b1.transpose() * &p2 + c.b2.transpose() * &p2 * &c.a2),
                &(c.c1.transpose() * &p1 + c.c2.transpose() * &p1 * &c.a2),
            ]);
            let k = -sigma.clone().try_inverse().unwrap() * rhs;
            assert!((&g.sigma - &sigma).amax() < 1e-13);
            assert!((&g.k - k).amax() < 1e-10 * (1.0 + g.k.amax()));
            let sigma_bar = Mat::from_row_slice(
                2,
                2,
                &[
                    1.0 + (c.b2t.transpose() * &p2 * &c.b2t)[(0, 0)],
                    (c.b2t.transpose() * &p2 * &c.c2t)[(0, 0)],
                    (c.c2t.transpose() * &p1 * &c.b2t)[(0, 0)],
                    2.25 + (c.c2t.transpose() * &p1 * &c.c2t)[(0, 0)],
                ],
            );
            let rhs = vstack(&[
                &(c.b1t.transpose() * &pi2 + c.b2t.transpose() * &p2 * &c.a2t),
                &(c.c1t.transpose() * &pi1 + c.c2t.transpose() * &p1 * &c.a2t),
            ]);
            let kt = -sigma_bar.try_inverse().unwrap() * rhs;
            assert!((&g.kt - kt).amax() < 1e-10 * (1.0 + g.kt.amax()));
        }
    }

    #[test]
    fn singular_sigma_is_reported() {
        let sys = fixtures::system("sysA", 10);
        let aug = build_augmented(&sys, 2.0).unwrap();
        let c = &aug.nodes[0];
        // make the disturbance row of Σ vanish: γ² + C2ᵀP1C2 = 0
        let c2 = c.d[(0, 1)];
        let mut p = Mat::zeros(2, 1);
        p[(1, 0)] = -4.0 / (c2 * c2);
        let err = openloop_kernels(&aug, 0, &p, &Mat::zeros(2, 1), 0.25).unwrap_err();
        assert!(matches!(err, Error::SingularSigma { time, .. } if time == 0.25), "{err}");
        assert!(err.is_infeasible());
    }

    #[test]
    fn disturbance_block_reproduces_bounded_real_lemma() {
        let sys = fixtures::system("sysA", 2000).without_control();
        let sol = openloop_solve(&sys, 2.0).unwrap();
        let brl = brl_cdre_solve(&sys, 2.0, &BrlOptions::default()).unwrap();
        let p1 = sol.riccati.p.rows(1, 1);
        let pi1 = sol.riccati.pi.rows(1, 1);
        assert!(p1.max_abs_diff(&brl.p) <= 1e-6);
        assert!(pi1.max_abs_diff(&brl.pi) <= 1e-6);
        let v = sol.disturbance_law();
        assert!(v.gain.max_abs_diff(&brl.gain) <= 1e-6);
    }

    #[test]
    fn riccati_residuals_and_terminal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (name, gamma) in [("sysA", 2.0), ("sysB", 1.5)] {
            let sys = fixtures::system(name, 2000);
            let aug = build_augmented(&sys, gamma).unwrap();
            let r = openloop_cdre_solve(&aug).unwrap();
            assert_eq!(r.p.terminal().amax(), 0.0);
            assert_eq!(r.pi.terminal().amax(), 0.0);
            for _ in 0..10 {
                let k = rng.random_range(1..2000);
                assert!(r.riccati_residual(&aug, k) <= 1e-6, "{name} node {k}");
            }
            assert!(r.cond.iter().all(|&(a, b)| a <= COND_LIMIT && b <= COND_LIMIT));
        }
    }

    #[test]
    fn affine_terms_vanish_without_forcing() {
        let sys = fixtures::system("sysB", 500).without_affine();
        let sol = openloop_solve(&sys, 1.5).unwrap();
        for t in [&sol.eta, &sol.eta_bar, &sol.chi] {
            assert_eq!(t.max_abs(), 0.0);
        }
    }

    #[test]
    fn zero_coefficients_kill_deviation_forcing() {
        let mut sys = fixtures::system("zero", 100);
        sys.b = MatrixTrajectory::constant(sys.grid, Mat::from_element(1, 1, 1.0));
        let sol = openloop_solve(&sys, 2.0).unwrap();
        assert_eq!(sol.eta.max_abs(), 0.0);
        assert_eq!(sol.eta_bar.max_abs(), 0.0);
    }

    #[test]
    fn affine_stable_under_step_halving() {
        let a = openloop_solve(&fixtures::system("sysA", 1000), 2.0).unwrap();
        let b = openloop_solve(&fixtures::system("sysA", 2000), 2.0).unwrap();
        assert!((a.eta.initial() - b.eta.initial()).amax() <= 1e-8);
        assert!((a.eta_bar.initial() - b.eta_bar.initial()).amax() <= 1e-8);
        assert!(a.eta_bar.max_abs() > 1e-3);
    }

    #[test]
    fn no_mean_field_collapses_gains() {
        let sys = fixtures::system("nomf", 1000);
        let sol = openloop_solve(&sys, sys.gamma).unwrap();
        assert!(sol.riccati.k.max_abs_diff(&sol.riccati.ktilde) <= 1e-8);
        assert!(sol.riccati.p.max_abs_diff(&sol.riccati.pi) <= 1e-8);
        let sys = fixtures::system("sysA", 1000).without_mean_field();
        let sol = openloop_solve(&sys, 2.0).unwrap();
        assert!(sol.riccati.k.max_abs_diff(&sol.riccati.ktilde) <= 1e-8);
    }

    #[test]
    fn laws_split_rows() {
        let sol = openloop_solve(&fixtures::system("sysB", 200), 1.5).unwrap();
        let (u, v) = (sol.control_law(), sol.disturbance_law());
        let s = 0.3;
        let (k, kt, chi) = (sol.k().eval(s), sol.ktilde().eval(s), sol.chi.eval(s));
        let (x, m) = (Mat::from_column_slice(2, 1, &[0.4, -1.0]), Mat::from_column_slice(2, 1, &[0.1, 0.2]));
        let w = &k * (&x - &m) + &kt * &m + &chi;
        assert!((u.apply(&x, &m, s)[(0, 0)] - w[(0, 0)]).abs() < 1e-12);
        assert!((v.apply(&x, &m, s)[(0, 0)] - w[(1, 0)]).abs() < 1e-12);
    }

    #[test]
    fn residual_shrinks_with_the_step() {
        let law = fixtures::law("sysA");
        let res = |steps| {
            let sys = fixtures::system("sysA", steps);
            let sol = openloop_solve(&sys, 2.0).unwrap();
            stationarity_residual(&sys, &sol, &law, 2000, 7).unwrap()
        };
        let (a, b) = (res(100), res(200));
        for (x, y) in [(a.res_u, b.res_u), (a.res_v, b.res_v)] {
            assert!(y > 0.0 && (1.4..2.6).contains(&(x / y)), "{x} {y}");
        }
    }

    #[test]
    fn certificate_on_sys_a() {
        let sys = fixtures::system("sysA", 500);
        let sol = openloop_solve(&sys, 2.0).unwrap();
        assert_eq!(sol.certificate(&sys, 1e-3).unwrap(), Certificate::Strict);
        assert!(Certificate::Strict.to_string().contains("sufficient"));
    }
}

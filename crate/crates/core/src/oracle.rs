//! Ground truth for the time-discretized problem.
//!
//! * [`TreeModel`]: the Euler scheme on a non-recombining binary tree with
//!   increments `±√dt`. Adapted disturbances are finite vectors, so the
//!   disturbance-to-output operator is a matrix and its norm is a singular
//!   value.
//! * [`DiscreteLq`]: dynamic programming for the Euler-discretized mean-field
//!   LQ problem, split into deviation and mean recursions, and a brute-force
//!   least-squares solve over all adapted controls on the tree.
//!
//! Both discretizations share one convention: coefficients are sampled at
//! `s_k`, costs use the left Riemann sum `Σ_{k<N} dt·(…)`, and tree outputs
//! are sampled at levels `1..=N` with weight `√(p·dt)` where `p = 2^{-k}`
//! is the probability of a node at level `k`.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, InfeasibleReason, Result};
use crate::model::{AffineFeedback, InitialLaw, MFSystem};
use crate::numerics::{dot, quad_form, vstack, Mat, MatrixTrajectory};

/// Limit on `n·2^N` for tree computations.
pub const TREE_LIMIT: usize = 1_000_000;

/// Limit on the number of adapted control coordinates in [`tree_exhaustive_lq`].
pub const EXHAUSTIVE_LIMIT: usize = 2000;

/// Dense SVD is used below this many operator columns; Lanczos above.
const DENSE_SVD_LIMIT: usize = 512;

// y += a·x
fn gemv_acc(a: &Mat, x: &[f64], y: &mut [f64]) {
    let (r, c) = a.shape();
    let s = a.as_slice();
    for j in 0..c {
        let xj = x[j];
        if xj != 0.0 {
            for i in 0..r {
                y[i] += s[j * r + i] * xj;
            }
        }
    }
}

// y += aᵀ·x
fn gemv_t_acc(a: &Mat, x: &[f64], y: &mut [f64]) {
    let (r, c) = a.shape();
    let s = a.as_slice();
    for j in 0..c {
        let mut acc = 0.0;
        for i in 0..r {
            acc += s[j * r + i] * x[i];
        }
        y[j] += acc;
    }
}

/// Output map `z = H·X + H̄·E[X]` for tree computations.
#[derive(Debug, Clone)]
pub struct TreeOutput {
    pub h: MatrixTrajectory,
    pub hbar: MatrixTrajectory,
}

impl TreeOutput {
    /// `z = Q X`.
    pub fn q_only(sys: &MFSystem) -> Self {
        let (r, c) = sys.q.shape();
        Self { h: sys.q.clone(), hbar: MatrixTrajectory::zeros(sys.grid, r, c) }
    }

    /// `z = (Q X, N1(U X + Ū E[X]))`.
    pub fn with_gain(sys: &MFSystem, u: &MatrixTrajectory, ubar: &MatrixTrajectory) -> Result<Self> {
        let grid = sys.grid;
        let mut h = Vec::with_capacity(grid.n_nodes());
        let mut hbar = Vec::with_capacity(grid.n_nodes());
        for (k, s) in grid.nodes().enumerate() {
            let q = sys.q.at(k);
            let n1 = sys.n1.at(k);
            h.push(vstack(&[q, &(n1 * u.eval(s))]));
            hbar.push(vstack(&[&Mat::zeros(q.nrows(), q.ncols()), &(n1 * ubar.eval(s))]));
        }
        Ok(Self { h: MatrixTrajectory::new(grid, h)?, hbar: MatrixTrajectory::new(grid, hbar)? })
    }
}

#[derive(Debug, Clone)]
struct TreeLevel {
    // index 0: ΔW = +√dt, index 1: ΔW = −√dt
    m: [Mat; 2],
    mbar: [Mat; 2],
    g: [Mat; 2],
    gbar: [Mat; 2],
}

/// Euler scheme on a binary tree with zero initial state and no affine
/// terms, seen as a linear map from weighted adapted disturbances to
/// weighted outputs.
#[derive(Debug, Clone)]
pub struct TreeModel {
    depth: usize,
    dt: f64,
    n: usize,
    n_v: usize,
    n_z: usize,
    levels: Vec<TreeLevel>,
    // outputs at levels 1..=N, index k-1
    h: Vec<Mat>,
    hbar: Vec<Mat>,
}

impl TreeModel {
    pub fn new(sys: &MFSystem, depth: usize, output: &TreeOutput) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidInput("tree depth must be at least 1".into()));
        }
        let size = sys.n.saturating_mul(1usize.checked_shl(depth as u32).unwrap_or(usize::MAX));
        if depth >= 40 || size > TREE_LIMIT {
            return Err(Error::TooLarge { size, limit: TREE_LIMIT });
        }
        let grid = sys.grid;
        let dt = (grid.t_end() - grid.t0()) / depth as f64;
        let sq = dt.sqrt();
        let n = sys.n;
        let id = Mat::identity(n, n);
        let mut levels = Vec::with_capacity(depth);
        for k in 0..depth {
            let s = grid.t0() + k as f64 * dt;
            let (a1, a1b, a2, a2b) = (sys.a1.eval(s), sys.a1bar.eval(s), sys.a2.eval(s), sys.a2bar.eval(s));
            let (c1, c1b, c2, c2b) = (sys.c1.eval(s), sys.c1bar.eval(s), sys.c2.eval(s), sys.c2bar.eval(s));
            let (up, down) = (sq, -sq);
            levels.push(TreeLevel {
                m: [&id + &a1 * dt + &a2 * up, &id + &a1 * dt + &a2 * down],
                mbar: [&a1b * dt + &a2b * up, &a1b * dt + &a2b * down],
                g: [&c1 * dt + &c2 * up, &c1 * dt + &c2 * down],
                gbar: [&c1b * dt + &c2b * up, &c1b * dt + &c2b * down],
            });
        }
        let mut h = Vec::with_capacity(depth);
        let mut hbar = Vec::with_capacity(depth);
        for k in 1..=depth {
            let s = if k == depth { grid.t_end() } else { grid.t0() + k as f64 * dt };
            h.push(output.h.eval(s));
            hbar.push(output.hbar.eval(s));
        }
        let n_z = output.h.shape().0;
        if output.h.shape().1 != n || output.hbar.shape() != output.h.shape() {
            return Err(Error::Dimension("tree output map has the wrong shape".into()));
        }
        Ok(Self { depth, dt, n, n_v: sys.n_v, n_z, levels, h, hbar })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Number of adapted disturbance coordinates, `n_v·(2^N − 1)`.
    pub fn input_dim(&self) -> usize {
        self.n_v * ((1 << self.depth) - 1)
    }

    /// Number of output coordinates, `n_z·(2^{N+1} − 2)`.
    pub fn output_dim(&self) -> usize {
        self.n_z * ((1 << (self.depth + 1)) - 2)
    }

    fn prob(k: usize) -> f64 {
        (0.5f64).powi(k as i32)
    }

    /// `z = O·w`.
    pub fn apply(&self, w: &[f64], z: &mut [f64]) {
        let (n, nv, nz) = (self.n, self.n_v, self.n_z);
        let mut x = vec![0.0; n];
        let mut next = Vec::new();
        let mut v = Vec::new();
        let mut mb = [vec![0.0; n], vec![0.0; n]];
        let mut m = vec![0.0; n];
        let mut vbar = vec![0.0; nv];
        for k in 0..self.depth {
            let nodes = 1usize << k;
            let p = Self::prob(k);
            let win = &w[nv * (nodes - 1)..nv * (2 * nodes - 1)];
            let scale = 1.0 / (p * self.dt).sqrt();
            v.clear();
            v.extend(win.iter().map(|x| x * scale));
            m.iter_mut().for_each(|e| *e = 0.0);
            vbar.iter_mut().for_each(|e| *e = 0.0);
            for j in 0..nodes {
                for i in 0..n {
                    m[i] += p * x[j * n + i];
                }
                for i in 0..nv {
                    vbar[i] += p * v[j * nv + i];
                }
            }
            let lv = &self.levels[k];
            for c in 0..2 {
                mb[c].iter_mut().for_each(|e| *e = 0.0);
                gemv_acc(&lv.mbar[c], &m, &mut mb[c]);
                gemv_acc(&lv.gbar[c], &vbar, &mut mb[c]);
            }
            next.clear();
            next.resize(2 * nodes * n, 0.0);
            for j in 0..nodes {
                for c in 0..2 {
                    let out = &mut next[(2 * j + c) * n..(2 * j + c + 1) * n];
                    out.copy_from_slice(&mb[c]);
                    gemv_acc(&lv.m[c], &x[j * n..(j + 1) * n], out);
                    gemv_acc(&lv.g[c], &v[j * nv..(j + 1) * nv], out);
                }
            }
            std::mem::swap(&mut x, &mut next);
            // outputs at level k+1
            let kk = k + 1;
            let nodes = 1usize << kk;
            let p = Self::prob(kk);
            let wz = (p * self.dt).sqrt();
            m.iter_mut().for_each(|e| *e = 0.0);
            for j in 0..nodes {
                for i in 0..n {
                    m[i] += p * x[j * n + i];
                }
            }
            let mut zm = vec![0.0; nz];
            gemv_acc(&self.hbar[k], &m, &mut zm);
            let off = nz * (nodes - 2);
            for j in 0..nodes {
                let out = &mut z[off + j * nz..off + (j + 1) * nz];
                out.copy_from_slice(&zm);
                gemv_acc(&self.h[k], &x[j * n..(j + 1) * n], out);
                out.iter_mut().for_each(|e| *e *= wz);
            }
        }
    }

    /// `w = Oᵀ·z`.
    pub fn apply_adjoint(&self, z: &[f64], w: &mut [f64]) {
        let (n, nv, nz) = (self.n, self.n_v, self.n_z);
        let depth = self.depth;
        // adjoint of the states at level N
        let nodes = 1usize << depth;
        let mut lam = vec![0.0; nodes * n];
        let mut mu = vec![0.0; n];
        let mut tmp = vec![0.0; nz];
        let add_output = |k: usize, lam: &mut [f64], mu: &mut [f64], tmp: &mut [f64]| {
            let nodes = 1usize << k;
            let p = Self::prob(k);
            let wz = (p * self.dt).sqrt();
            let off = nz * (nodes - 2);
            let mut hb = vec![0.0; n];
            for j in 0..nodes {
                for i in 0..nz {
                    tmp[i] = wz * z[off + j * nz + i];
                }
                gemv_t_acc(&self.h[k - 1], tmp, &mut lam[j * n..(j + 1) * n]);
                gemv_t_acc(&self.hbar[k - 1], tmp, &mut hb);
            }
            for i in 0..n {
                mu[i] += hb[i];
            }
        };
        add_output(depth, &mut lam, &mut mu, &mut tmp);
        for j in 0..nodes {
            for i in 0..n {
                lam[j * n + i] += Self::prob(depth) * mu[i];
            }
        }
        for k in (0..depth).rev() {
            let nodes = 1usize << k;
            let p = Self::prob(k);
            let lv = &self.levels[k];
            let mut prev = vec![0.0; nodes * n];
            let mut mu = vec![0.0; n];
            let mut nu = vec![0.0; nv];
            let scale = 1.0 / (p * self.dt).sqrt();
            let wout = &mut w[nv * (nodes - 1)..nv * (2 * nodes - 1)];
            wout.iter_mut().for_each(|e| *e = 0.0);
            for j in 0..nodes {
                for c in 0..2 {
                    let lc = &lam[(2 * j + c) * n..(2 * j + c + 1) * n];
                    gemv_t_acc(&lv.m[c], lc, &mut prev[j * n..(j + 1) * n]);
                    gemv_t_acc(&lv.mbar[c], lc, &mut mu);
                    gemv_t_acc(&lv.g[c], lc, &mut wout[j * nv..(j + 1) * nv]);
                    gemv_t_acc(&lv.gbar[c], lc, &mut nu);
                }
            }
            for j in 0..nodes {
                for i in 0..nv {
                    wout[j * nv + i] = (wout[j * nv + i] + p * nu[i]) * scale;
                }
            }
            if k >= 1 {
                add_output(k, &mut prev, &mut mu, &mut tmp);
                for j in 0..nodes {
                    for i in 0..n {
                        prev[j * n + i] += p * mu[i];
                    }
                }
            }
            lam = prev;
        }
    }

    /// The operator as an explicit `output_dim × input_dim` matrix.
    pub fn matrix(&self) -> Mat {
        let (rows, cols) = (self.output_dim(), self.input_dim());
        let mut out = Mat::zeros(rows, cols);
        let mut e = vec![0.0; cols];
        let mut z = vec![0.0; rows];
        for j in 0..cols {
            e[j] = 1.0;
            self.apply(&e, &mut z);
            out.column_mut(j).copy_from_slice(&z);
            e[j] = 0.0;
        }
        out
    }

    /// Largest singular value of the operator.
    pub fn norm(&self) -> f64 {
        if self.input_dim() <= DENSE_SVD_LIMIT {
            let m = self.matrix();
            return m.singular_values().max();
        }
        lanczos_norm(self, 400, 1e-13)
    }
}

/// Largest singular value by Golub–Kahan–Lanczos bidiagonalization with full
/// reorthogonalization, using only products with `O` and `Oᵀ`.
pub fn lanczos_norm(op: &TreeModel, max_iter: usize, rtol: f64) -> f64 {
    let (rows, cols) = (op.output_dim(), op.input_dim());
    let max_iter = max_iter.min(cols).min(rows).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&mut v);
    let mut vs: Vec<Vec<f64>> = Vec::new();
    let mut us: Vec<Vec<f64>> = Vec::new();
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut u = vec![0.0; rows];
    let mut last = 0.0;
    let mut stable = 0;
    for it in 0..max_iter {
        op.apply(&v, &mut u);
        if let (Some(prev), Some(&beta)) = (us.last(), betas.last()) {
            axpy(-beta, prev, &mut u);
        }
        reorthogonalize(&mut u, &us);
        let alpha = normalize(&mut u);
        vs.push(v.clone());
        alphas.push(alpha);
        if alpha <= 1e-300 {
            break;
        }
        us.push(u.clone());
        let mut nv = vec![0.0; cols];
        op.apply_adjoint(&u, &mut nv);
        axpy(-alpha, &v, &mut nv);
        reorthogonalize(&mut nv, &vs);
        let beta = normalize(&mut nv);
        let done = beta <= 1e-300 || it + 1 == max_iter;
        if it % 5 == 4 || done {
            let sigma = bidiagonal_norm(&alphas, &betas);
            if (sigma - last).abs() <= rtol * sigma {
                stable += 1;
                if stable >= 2 {
                    return sigma;
                }
            } else {
                stable = 0;
            }
            last = sigma;
        }
        if done {
            break;
        }
        betas.push(beta);
        v = nv;
    }
    bidiagonal_norm(&alphas, &betas)
}

fn bidiagonal_norm(alphas: &[f64], betas: &[f64]) -> f64 {
    let k = alphas.len();
    let mut b = Mat::zeros(k, k);
    for i in 0..k {
        b[(i, i)] = alphas[i];
        if i + 1 < k {
            b[(i, i + 1)] = betas[i];
        }
    }
    b.singular_values().max()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn normalize(x: &mut [f64]) -> f64 {
    let norm = x.iter().map(|e| e * e).sum::<f64>().sqrt();
    if norm > 0.0 {
        x.iter_mut().for_each(|e| *e /= norm);
    }
    norm
}

fn reorthogonalize(x: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let d: f64 = b.iter().zip(x.iter()).map(|(p, q)| p * q).sum();
            axpy(-d, b, x);
        }
    }
}

/// Norm of the disturbance-to-output operator of the Euler scheme on the
/// depth-`N` tree (zero initial state, no affine terms).
pub fn tree_operator_norm(sys: &MFSystem, depth: usize, output: &TreeOutput) -> Result<f64> {
    Ok(TreeModel::new(sys, depth, output)?.norm())
}

/// One time step of a discrete mean-field LQ problem
///
/// ```text
/// X' = X + dt(A1 X + Ā1 m + B1 u + B̄1 ū + b) + (A2 X + Ā2 m + B2 u + B̄2 ū + σ)ΔW
/// cost += dt(⟨W X, X⟩ + ⟨R u, u⟩)
/// ```
#[derive(Debug, Clone)]
pub struct LqStage {
    pub a1: Mat,
    pub a1bar: Mat,
    pub a2: Mat,
    pub a2bar: Mat,
    pub b1: Mat,
    pub b1bar: Mat,
    pub b2: Mat,
    pub b2bar: Mat,
    pub b: Mat,
    pub sigma: Mat,
    pub w: Mat,
    pub r: Mat,
}

#[derive(Debug, Clone)]
pub struct DiscreteLq {
    pub t0: f64,
    pub dt: f64,
    pub stages: Vec<LqStage>,
}

impl DiscreteLq {
    pub fn steps(&self) -> usize {
        self.stages.len()
    }

    pub fn n(&self) -> usize {
        self.stages[0].a1.nrows()
    }

    pub fn m(&self) -> usize {
        self.stages[0].b1.ncols()
    }

    fn sample_times(sys: &MFSystem, steps: usize) -> (f64, f64, Vec<f64>) {
        let g = sys.grid;
        let dt = (g.t_end() - g.t0()) / steps as f64;
        (g.t0(), dt, (0..steps).map(|k| g.t0() + k as f64 * dt).collect())
    }

    /// The H₂ problem: minimize `E Σ dt(|QX|² + |u|²)` with the disturbance
    /// fixed to an affine feedback.
    pub fn h2(sys: &MFSystem, policy_v: &AffineFeedback, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidInput("need at least one step".into()));
        }
        let closed = sys.with_disturbance_feedback(policy_v)?;
        let (t0, dt, times) = Self::sample_times(sys, steps);
        let stages = times
            .iter()
            .map(|&s| {
                let q = closed.q.eval(s);
                LqStage {
                    a1: closed.a1.eval(s),
                    a1bar: closed.a1bar.eval(s),
                    a2: closed.a2.eval(s),
                    a2bar: closed.a2bar.eval(s),
                    b1: closed.b1.eval(s),
                    b1bar: closed.b1bar.eval(s),
                    b2: closed.b2.eval(s),
                    b2bar: closed.b2bar.eval(s),
                    b: closed.b.eval(s),
                    sigma: closed.sigma.eval(s),
                    w: q.transpose() * &q,
                    r: Mat::identity(sys.n_u, sys.n_u),
                }
            })
            .collect();
        Ok(Self { t0, dt, stages })
    }

    /// The worst-case disturbance problem at level γ: minimize
    /// `E Σ dt(γ²|v|² − |QX|²)` with `u = 0`.
    pub fn disturbance(sys: &MFSystem, gamma: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidInput("need at least one step".into()));
        }
        let (t0, dt, times) = Self::sample_times(sys, steps);
        let stages = times
            .iter()
            .map(|&s| {
                let q = sys.q.eval(s);
                LqStage {
                    a1: sys.a1.eval(s),
                    a1bar: sys.a1bar.eval(s),
                    a2: sys.a2.eval(s),
                    a2bar: sys.a2bar.eval(s),
                    b1: sys.c1.eval(s),
                    b1bar: sys.c1bar.eval(s),
                    b2: sys.c2.eval(s),
                    b2bar: sys.c2bar.eval(s),
                    b: sys.b.eval(s),
                    sigma: sys.sigma.eval(s),
                    w: -(q.transpose() * &q),
                    r: Mat::identity(sys.n_v, sys.n_v) * (gamma * gamma),
                }
            })
            .collect();
        Ok(Self { t0, dt, stages })
    }
}

/// Value function and optimal feedback of a [`DiscreteLq`]. The value at
/// step `k` is `E⟨P_k(X−m), X−m⟩ + ⟨Π_k m, m⟩ + 2⟨η_k, m⟩ + c_k`; the
/// optimal control is `u_k = K_k(X − m) + K̄_k m + κ_k`.
#[derive(Debug, Clone)]
pub struct DpSolution {
    pub p: Vec<Mat>,
    pub pi: Vec<Mat>,
    pub eta: Vec<Mat>,
    pub c: Vec<f64>,
    pub gain: Vec<Mat>,
    pub gain_bar: Vec<Mat>,
    pub offset: Vec<Mat>,
}

impl DpSolution {
    pub fn cost(&self, law: &InitialLaw) -> f64 {
        let mean = law.mean();
        (&self.p[0] * law.covariance()).trace()
            + quad_form(&self.pi[0], &mean)
            + 2.0 * dot(&self.eta[0], &mean)
            + self.c[0]
    }
}

fn spd_solve(a: &Mat, rhs: &Mat, time: f64) -> Result<Mat> {
    a.clone()
        .cholesky()
        .map(|ch| ch.solve(rhs))
        .ok_or(Error::Infeasible { reason: InfeasibleReason::PositivityViolated, time })
}

/// Backward dynamic programming on a [`DiscreteLq`].
pub fn dp_solve(lq: &DiscreteLq) -> Result<DpSolution> {
    let n = lq.n();
    let m = lq.m();
    let steps = lq.steps();
    let dt = lq.dt;
    let id = Mat::identity(n, n);
    let mut p = vec![Mat::zeros(n, n); steps + 1];
    let mut pi = vec![Mat::zeros(n, n); steps + 1];
    let mut eta = vec![Mat::zeros(n, 1); steps + 1];
    let mut c = vec![0.0; steps + 1];
    let mut gain = vec![Mat::zeros(m, n); steps];
    let mut gain_bar = vec![Mat::zeros(m, n); steps];
    let mut offset = vec![Mat::zeros(m, 1); steps];
    for k in (0..steps).rev() {
        let st = &lq.stages[k];
        let time = lq.t0 + k as f64 * dt;
        let (pn, pin, etan, cn) = (&p[k + 1].clone(), &pi[k + 1].clone(), &eta[k + 1].clone(), c[k + 1]);

        let f = &id + &st.a1 * dt;
        let g = &st.b1 * dt;
        let rh = &st.r * dt + g.transpose() * pn * &g + st.b2.transpose() * pn * &st.b2 * dt;
        let sh = g.transpose() * pn * &f + st.b2.transpose() * pn * &st.a2 * dt;
        let kh = -spd_solve(&rh, &sh, time)?;
        p[k] = &st.w * dt + f.transpose() * pn * &f + st.a2.transpose() * pn * &st.a2 * dt
            + sh.transpose() * &kh;
        p[k] = (&p[k] + p[k].transpose()) * 0.5;

        let a1t = &st.a1 + &st.a1bar;
        let a2t = &st.a2 + &st.a2bar;
        let b1t = &st.b1 + &st.b1bar;
        let b2t = &st.b2 + &st.b2bar;
        let ft = &id + &a1t * dt;
        let gt = &b1t * dt;
        let rb = &st.r * dt + gt.transpose() * pin * &gt + b2t.transpose() * pn * &b2t * dt;
        let sb = gt.transpose() * pin * &ft + b2t.transpose() * pn * &a2t * dt;
        let drift = pin * &st.b * dt + etan;
        let rbar = gt.transpose() * &drift + b2t.transpose() * pn * &st.sigma * dt;
        let kb = -spd_solve(&rb, &sb, time)?;
        let kappa = -spd_solve(&rb, &rbar, time)?;
        pi[k] = &st.w * dt + ft.transpose() * pin * &ft + a2t.transpose() * pn * &a2t * dt
            + sb.transpose() * &kb;
        pi[k] = (&pi[k] + pi[k].transpose()) * 0.5;
        eta[k] = ft.transpose() * &drift + a2t.transpose() * pn * &st.sigma * dt + sb.transpose() * &kappa;
        c[k] = cn + dt * dt * quad_form(pin, &st.b) + 2.0 * dt * dot(etan, &st.b)
            + dt * quad_form(pn, &st.sigma)
            + dot(&rbar, &kappa);
        gain[k] = kh;
        gain_bar[k] = kb;
        offset[k] = kappa;
    }
    Ok(DpSolution { p, pi, eta, c, gain, gain_bar, offset })
}

/// Dynamic-programming solution of the H₂ problem with the disturbance
/// fixed to `policy_v`, on `steps` Euler steps.
pub fn discrete_dp_lq(sys: &MFSystem, policy_v: &AffineFeedback, steps: usize) -> Result<DpSolution> {
    dp_solve(&DiscreteLq::h2(sys, policy_v, steps)?)
}

/// Tree states at levels `0..N` under the controls `u` (level-major,
/// node-major), as a flat vector.
fn tree_states(lq: &DiscreteLq, x0: &[f64], u: &[f64], homogeneous: bool) -> Vec<f64> {
    let n = lq.n();
    let mu = lq.m();
    let dt = lq.dt;
    let sq = dt.sqrt();
    let depth = lq.steps();
    let mut out = Vec::with_capacity(n * ((1 << depth) - 1));
    let mut x = if homogeneous { vec![0.0; n] } else { x0.to_vec() };
    for k in 0..depth {
        out.extend_from_slice(&x);
        if k + 1 == depth {
            break;
        }
        let st = &lq.stages[k];
        let nodes = 1usize << k;
        let p = 0.5f64.powi(k as i32);
        let uk = &u[mu * (nodes - 1)..mu * (2 * nodes - 1)];
        let mut m = vec![0.0; n];
        let mut ubar = vec![0.0; mu];
        for j in 0..nodes {
            for i in 0..n {
                m[i] += p * x[j * n + i];
            }
            for i in 0..mu {
                ubar[i] += p * uk[j * mu + i];
            }
        }
        // drift and diffusion parts that are common to the level
        let mut dcommon = vec![0.0; n];
        let mut scommon = vec![0.0; n];
        gemv_acc(&st.a1bar, &m, &mut dcommon);
        gemv_acc(&st.b1bar, &ubar, &mut dcommon);
        gemv_acc(&st.a2bar, &m, &mut scommon);
        gemv_acc(&st.b2bar, &ubar, &mut scommon);
        if !homogeneous {
            for i in 0..n {
                dcommon[i] += st.b[(i, 0)];
                scommon[i] += st.sigma[(i, 0)];
            }
        }
        let mut next = vec![0.0; 2 * nodes * n];
        let mut drift = vec![0.0; n];
        let mut diff = vec![0.0; n];
        for j in 0..nodes {
            let xj = &x[j * n..(j + 1) * n];
            let uj = &uk[j * mu..(j + 1) * mu];
            drift.copy_from_slice(&dcommon);
            diff.copy_from_slice(&scommon);
            gemv_acc(&st.a1, xj, &mut drift);
            gemv_acc(&st.b1, uj, &mut drift);
            gemv_acc(&st.a2, xj, &mut diff);
            gemv_acc(&st.b2, uj, &mut diff);
            for (c, sign) in [(0, 1.0), (1, -1.0)] {
                let o = &mut next[(2 * j + c) * n..(2 * j + c + 1) * n];
                for i in 0..n {
                    o[i] = xj[i] + dt * drift[i] + sign * sq * diff[i];
                }
            }
        }
        x = next;
    }
    out
}

/// Exact minimum of the discrete LQ cost over all adapted controls on the
/// binary tree, from a deterministic initial state, by solving the normal
/// equations of the (convex quadratic) cost in the control coordinates.
pub fn tree_exhaustive_lq(lq: &DiscreteLq, x0: &Mat) -> Result<f64> {
    let n = lq.n();
    let mu = lq.m();
    let depth = lq.steps();
    if depth >= 20 {
        return Err(Error::TooLarge { size: usize::MAX, limit: EXHAUSTIVE_LIMIT });
    }
    let cols = mu * ((1 << depth) - 1);
    if cols > EXHAUSTIVE_LIMIT {
        return Err(Error::TooLarge { size: cols, limit: EXHAUSTIVE_LIMIT });
    }
    let x0: Vec<f64> = x0.iter().copied().collect();
    let zero_u = vec![0.0; cols];
    let base = tree_states(lq, &x0, &zero_u, false);
    let rows = base.len();
    let mut l = Mat::zeros(rows, cols);
    let mut e = zero_u.clone();
    for j in 0..cols {
        e[j] = 1.0;
        let col = tree_states(lq, &x0, &e, true);
        l.column_mut(j).copy_from_slice(&col);
        e[j] = 0.0;
    }
    // block-diagonal weights
    let mut wx = Mat::zeros(rows, rows);
    let mut wu = Mat::zeros(cols, cols);
    for k in 0..depth {
        let nodes = 1usize << k;
        let scale = lq.dt * 0.5f64.powi(k as i32);
        let st = &lq.stages[k];
        for j in 0..nodes {
            let ox = n * (nodes - 1 + j);
            let ou = mu * (nodes - 1 + j);
            wx.view_mut((ox, ox), (n, n)).copy_from(&(&st.w * scale));
            wu.view_mut((ou, ou), (mu, mu)).copy_from(&(&st.r * scale));
        }
    }
    let a = DVector::from_vec(base);
    let wl = &wx * &l;
    let h = l.transpose() * &wl + wu;
    let g = wl.transpose() * &a;
    let c = a.dot(&(&wx * &a));
    let ch = h.cholesky().ok_or(Error::Infeasible {
        reason: InfeasibleReason::PositivityViolated,
        time: lq.t0,
    })?;
    let sol = ch.solve(&g);
    Ok(c - g.dot(&sol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{fixtures, ConstantCoefficients};
    use crate::numerics::TimeGrid;

    fn scalar(x: f64) -> Mat {
        Mat::from_element(1, 1, x)
    }

    fn scalar_sys(q: f64, c1: f64, c2: f64) -> MFSystem {
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let mut c = ConstantCoefficients::zeros(1, 1, 1);
        c.q = scalar(q);
        c.c1 = scalar(c1);
        c.c2 = scalar(c2);
        MFSystem::constant(c, g, 1.0).unwrap()
    }

    #[test]
    fn zero_output_zero_norm() {
        let sys = fixtures::system("zero", 10);
        assert_eq!(tree_operator_norm(&sys, 4, &TreeOutput::q_only(&sys)).unwrap(), 0.0);
        let sys = fixtures::system("sysA", 10);
        let mut zq = sys.clone();
        zq.q = MatrixTrajectory::zeros(sys.grid, 1, 1);
        assert_eq!(tree_operator_norm(&zq, 4, &TreeOutput::q_only(&zq)).unwrap(), 0.0);
    }

    #[test]
    fn single_step_hand_value() {
        let (q, c1, c2) = (1.3, 0.7, 0.4);
        let sys = scalar_sys(q, c1, c2);
        let dt: f64 = 1.0;
        let expect = q * (c1 * c1 * dt * dt + c2 * c2 * dt).sqrt();
        let got = tree_operator_norm(&sys, 1, &TreeOutput::q_only(&sys)).unwrap();
        assert!((got - expect).abs() < 1e-14, "{got} vs {expect}");
    }

    #[test]
    fn adjoint_is_transpose() {
        for name in ["sysA", "sysB"] {
            let sys = fixtures::system(name, 20);
            let t = TreeModel::new(&sys, 5, &TreeOutput::q_only(&sys)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let w: Vec<f64> = (0..t.input_dim()).map(|_| rng.sample(StandardNormal)).collect();
            let y: Vec<f64> = (0..t.output_dim()).map(|_| rng.sample(StandardNormal)).collect();
            let mut ow = vec![0.0; t.output_dim()];
            let mut oty = vec![0.0; t.input_dim()];
            t.apply(&w, &mut ow);
            t.apply_adjoint(&y, &mut oty);
            let lhs: f64 = y.iter().zip(&ow).map(|(a, b)| a * b).sum();
            let rhs: f64 = w.iter().zip(&oty).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn lanczos_matches_dense_svd() {
        for name in ["sysA", "sysB"] {
            let sys = fixtures::system(name, 20);
            for depth in [3, 6, 8] {
                let t = TreeModel::new(&sys, depth, &TreeOutput::q_only(&sys)).unwrap();
                let dense = t.matrix().singular_values().max();
                let lan = lanczos_norm(&t, 400, 1e-13);
                assert!((dense - lan).abs() <= 1e-10 * dense, "{name} N={depth}: {dense} vs {lan}");
            }
        }
    }

    #[test]
    fn tree_guard() {
        let sys = fixtures::system("sysB", 20);
        let err = TreeModel::new(&sys, 20, &TreeOutput::q_only(&sys)).unwrap_err();
        assert!(matches!(err, Error::TooLarge { .. }));
    }

    #[test]
    fn dp_zero_fixture() {
        let sys = fixtures::system("zero", 10);
        let v = AffineFeedback::zero(sys.grid, 1, 1);
        let sol = discrete_dp_lq(&sys, &v, 8).unwrap();
        assert!(sol.p.iter().chain(&sol.pi).all(|m| m.amax() == 0.0));
        assert_eq!(sol.cost(&InitialLaw::point(&[0.0])), 0.0);
        let lq = DiscreteLq::h2(&sys, &v, 3).unwrap();
        assert_eq!(tree_exhaustive_lq(&lq, &scalar(0.0)).unwrap(), 0.0);
    }

    #[test]
    fn dp_one_step_hand_recursion() {
        // One step: u_0 only affects X_1, which carries no cost, so u_0 = 0 and
        // P_0 = dt·q².
        let sys = fixtures::system("sysA", 10);
        let v = AffineFeedback::zero(sys.grid, 1, 1);
        let sol = discrete_dp_lq(&sys, &v, 1).unwrap();
        assert!((sol.p[0][(0, 0)] - 1.0).abs() < 1e-15);
        assert!((sol.pi[0][(0, 0)] - 1.0).abs() < 1e-15);
        assert_eq!(sol.gain[0][(0, 0)], 0.0);
        assert!((sol.cost(&InitialLaw::point(&[2.0])) - 4.0).abs() < 1e-14);
    }

    #[test]
    fn dual_route_small_tree() {
        let sys = fixtures::system("sysA", 20);
        let v = AffineFeedback::zero(sys.grid, 1, 1);
        for depth in [2, 5, 8] {
            let lq = DiscreteLq::h2(&sys, &v, depth).unwrap();
            let dp = dp_solve(&lq).unwrap().cost(&InitialLaw::point(&[0.5]));
            let ex = tree_exhaustive_lq(&lq, &scalar(0.5)).unwrap();
            assert!((dp - ex).abs() <= 1e-10 * dp.abs().max(1.0), "N={depth}: {dp} vs {ex}");
        }
    }

    #[test]
    fn exhaustive_guard() {
        let sys = fixtures::system("sysA", 20);
        let lq = DiscreteLq::h2(&sys, &AffineFeedback::zero(sys.grid, 1, 1), 12).unwrap();
        assert!(matches!(tree_exhaustive_lq(&lq, &scalar(0.0)), Err(Error::TooLarge { .. })));
    }
}

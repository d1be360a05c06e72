//! Euler–Maruyama Monte Carlo for the mean-field state equation.
//!
//! Expectations inside the drift and diffusion are replaced by the mean
//! obtained from its own ODE, so each path is an independent linear SDE.
//! Path `i` draws ξ and its Brownian increments from ChaCha8 stream `i` of
//! the seed. Paths run in fixed blocks of [`BLOCK`] and block results are
//! combined in block order, so every estimate is bitwise independent of the
//! number of worker threads.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::closedloop::ClosedLoopSolution;
use crate::error::{Error, Result};
use crate::model::{AffineFeedback, InitialLaw, LawSampler, MFSystem};
use crate::numerics::{hstack, integrate_forward, Mat, MatrixTrajectory, TimeGrid};

pub const BLOCK: usize = 256;

/// One additive piece of an input policy.
#[derive(Debug, Clone)]
pub enum PolicyTerm {
    /// Deterministic input `g(s)`.
    OpenLoop(MatrixTrajectory),
    /// `G x + Ḡ E[x] + g` on the simulated state.
    Feedback(AffineFeedback),
    /// `G x_ref + Ḡ E[x_ref] + g` on the reference state.
    Shadow(AffineFeedback),
    /// `h(s)·W(s)`.
    Brownian(MatrixTrajectory),
}

/// Input process for one channel, a sum of [`PolicyTerm`]s.
#[derive(Debug, Clone)]
pub struct Policy {
    dim: usize,
    terms: Vec<PolicyTerm>,
}

impl Policy {
    pub fn zero(dim: usize) -> Self {
        Self { dim, terms: Vec::new() }
    }

    pub fn feedback(fb: AffineFeedback) -> Self {
        Self { dim: fb.rows(), terms: vec![PolicyTerm::Feedback(fb)] }
    }

    pub fn shadow(fb: AffineFeedback) -> Self {
        Self { dim: fb.rows(), terms: vec![PolicyTerm::Shadow(fb)] }
    }

    pub fn open_loop(g: MatrixTrajectory) -> Self {
        Self { dim: g.shape().0, terms: vec![PolicyTerm::OpenLoop(g)] }
    }

    pub fn with(mut self, term: PolicyTerm) -> Self {
        self.terms.push(term);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn terms(&self) -> &[PolicyTerm] {
        &self.terms
    }

    fn has_shadow(&self) -> bool {
        self.terms.iter().any(|t| matches!(t, PolicyTerm::Shadow(_)))
    }

    fn check(&self, n: usize, what: &str) -> Result<()> {
        for t in &self.terms {
            let ok = match t {
                PolicyTerm::OpenLoop(g) | PolicyTerm::Brownian(g) => g.shape() == (self.dim, 1),
                PolicyTerm::Feedback(f) | PolicyTerm::Shadow(f) => f.gain.shape() == (self.dim, n),
            };
            if !ok {
                return Err(Error::Dimension(format!("{what} policy term does not match the channel")));
            }
        }
        Ok(())
    }

    /// `E[w(s)]` given the mean of the simulated and reference states.
    fn mean_at(&self, s: f64, m: &Mat, mr: Option<&Mat>) -> Result<Mat> {
        let mut out = Mat::zeros(self.dim, 1);
        for t in &self.terms {
            match t {
                PolicyTerm::OpenLoop(g) => out += g.eval(s),
                PolicyTerm::Feedback(f) => out += f.apply(m, m, s),
                PolicyTerm::Shadow(f) => {
                    let mr = mr.ok_or_else(|| {
                        Error::UnsupportedPolicy("shadow term without a reference pair".into())
                    })?;
                    out += f.apply(mr, mr, s);
                }
                PolicyTerm::Brownian(_) => {}
            }
        }
        Ok(out)
    }
}

/// Feedback pair driving the reference state. The reference state shares ξ
/// and the Brownian path with the simulated state.
#[derive(Debug, Clone)]
pub struct Reference {
    pub u: AffineFeedback,
    pub v: AffineFeedback,
}

fn tilde_at(sys: &MFSystem, s: f64) -> (Mat, Mat, Mat, Mat) {
    (
        sys.a1.eval(s) + sys.a1bar.eval(s),
        sys.b1.eval(s) + sys.b1bar.eval(s),
        sys.c1.eval(s) + sys.c1bar.eval(s),
        sys.b.eval(s),
    )
}

fn check_policies(sys: &MFSystem, pu: &Policy, pv: &Policy, law: &InitialLaw) -> Result<()> {
    if pu.dim != sys.n_u || pv.dim != sys.n_v {
        return Err(Error::Dimension("policy dimension does not match its channel".into()));
    }
    pu.check(sys.n, "control")?;
    pv.check(sys.n, "disturbance")?;
    if law.dim() != sys.n {
        return Err(Error::Dimension("initial law dimension does not match the state".into()));
    }
    Ok(())
}

/// Mean of the simulated state and, if given, of the reference state, by RK4
/// on `ṁ = Ã1 m + B̃1 E[u] + C̃1 E[v] + b`.
fn propagate_means(
    sys: &MFSystem,
    pu: &Policy,
    pv: &Policy,
    reference: Option<&Reference>,
    law: &InitialLaw,
) -> Result<(MatrixTrajectory, Option<MatrixTrajectory>)> {
    if reference.is_none() && (pu.has_shadow() || pv.has_shadow()) {
        return Err(Error::UnsupportedPolicy("shadow term without a reference pair".into()));
    }
    let m0 = law.mean();
    let init = if reference.is_some() { hstack(&[&m0, &m0]) } else { m0 };
    let traj = integrate_forward(
        |_, s, st| {
            let (a, b1, c1, b) = tilde_at(sys, s);
            let m = st.columns(0, 1).into_owned();
            let mr = reference.map(|_| st.columns(1, 1).into_owned());
            let eu = pu.mean_at(s, &m, mr.as_ref())?;
            let ev = pv.mean_at(s, &m, mr.as_ref())?;
            let dm = &a * &m + &b1 * eu + &c1 * ev + &b;
            match (reference, mr) {
                (Some(r), Some(mr)) => {
                    let dmr = &a * &mr + &b1 * r.u.apply(&mr, &mr, s) + &c1 * r.v.apply(&mr, &mr, s) + &b;
                    Ok(hstack(&[&dm, &dmr]))
                }
                _ => Ok(dm),
            }
        },
        init,
        &sys.grid,
    )?;
    Ok(match reference {
        Some(_) => (traj.columns(0, 1), Some(traj.columns(1, 1))),
        None => (traj, None),
    })
}

/// Deterministic mean `E[X(s)]` under the policy pair.
pub fn propagate_mean(sys: &MFSystem, pu: &Policy, pv: &Policy, law: &InitialLaw) -> Result<MatrixTrajectory> {
    check_policies(sys, pu, pv, law)?;
    Ok(propagate_means(sys, pu, pv, None, law)?.0)
}

/// `out += A x` for column-major `A` with `out.len()` rows.
#[inline]
fn gemv(out: &mut [f64], a: &[f64], x: &[f64]) {
    let r = out.len();
    for (j, &xj) in x.iter().enumerate() {
        let col = &a[j * r..(j + 1) * r];
        for (o, &c) in out.iter_mut().zip(col) {
            *o += c * xj;
        }
    }
}

fn flat(m: &Mat) -> Vec<f64> {
    m.as_slice().to_vec()
}

/// Location of one field inside a packed node record.
#[derive(Debug, Clone, Copy, Default)]
struct Span {
    off: usize,
    len: usize,
}

fn pack(rec: &mut Vec<f64>, m: &Mat) -> Span {
    let off = rec.len();
    rec.extend_from_slice(m.as_slice());
    Span { off, len: m.len() }
}

#[derive(Debug, Clone, Copy, Default)]
struct ChanLayout {
    ga: Span,
    gbar: Span,
    gs: Span,
    /// Offsets, open-loop inputs and the state-independent part of shadow terms.
    c: Span,
    /// `c + Ḡ·m`.
    cdet: Span,
    h: Span,
}

/// Which terms a channel carries; the same at every node.
#[derive(Debug, Clone, Copy, Default)]
struct ChanFlags {
    ga: bool,
    gs: bool,
    h: bool,
}

impl ChanFlags {
    fn of(p: &Policy) -> Self {
        let mut f = Self::default();
        for t in &p.terms {
            match t {
                PolicyTerm::Feedback(_) => f.ga = true,
                PolicyTerm::Shadow(_) => f.gs = true,
                PolicyTerm::Brownian(_) => f.h = true,
                PolicyTerm::OpenLoop(_) => {}
            }
        }
        f
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct RefLayout {
    gu: Span,
    cu: Span,
    gv: Span,
    cv: Span,
    drift0: Span,
    diff0: Span,
}

#[derive(Debug, Clone, Default)]
struct Layout {
    stride: usize,
    m: Span,
    eu: Span,
    ev: Span,
    mr: Span,
    a1: Span,
    a2: Span,
    b1: Span,
    b2: Span,
    c1: Span,
    c2: Span,
    bars: [Span; 6],
    b: Span,
    sigma: Span,
    q: Span,
    drift0: Span,
    diff0: Span,
    u: ChanLayout,
    v: ChanLayout,
    r: RefLayout,
}

/// Append one channel's policy frozen at time `s`.
fn pack_channel(rec: &mut Vec<f64>, p: &Policy, n: usize, s: f64, m: &Mat, mr: Option<&Mat>) -> ChanLayout {
    let r = p.dim;
    let mut ga = Mat::zeros(r, n);
    let mut gs = Mat::zeros(r, n);
    let mut h = Mat::zeros(r, 1);
    let mut gbar = Mat::zeros(r, n);
    let mut c = Mat::zeros(r, 1);
    for t in &p.terms {
        match t {
            PolicyTerm::OpenLoop(g) => c += g.eval(s),
            PolicyTerm::Feedback(f) => {
                let (g, gb, g0) = f.eval(s);
                ga += g;
                gbar += gb;
                c += g0;
            }
            PolicyTerm::Shadow(f) => {
                let (g, gb, g0) = f.eval(s);
                let mr = mr.expect("reference mean for shadow term");
                gs += g;
                c += gb * mr + g0;
            }
            PolicyTerm::Brownian(hh) => h += hh.eval(s),
        }
    }
    let cdet = &c + &gbar * m;
    ChanLayout {
        ga: pack(rec, &ga),
        gbar: pack(rec, &gbar),
        gs: pack(rec, &gs),
        c: pack(rec, &c),
        cdet: pack(rec, &cdet),
        h: pack(rec, &h),
    }
}

/// Coefficients, policies and means frozen at one grid node.
#[derive(Debug, Clone, Copy)]
pub struct NodeView<'a> {
    pub s: f64,
    rec: &'a [f64],
    lay: &'a Layout,
}

impl<'a> NodeView<'a> {
    #[inline]
    fn get(&self, sp: Span) -> &'a [f64] {
        &self.rec[sp.off..sp.off + sp.len]
    }

    /// `E[X(s)]`.
    pub fn m(&self) -> &'a [f64] {
        self.get(self.lay.m)
    }

    /// `E[u(s)]`.
    pub fn eu(&self) -> &'a [f64] {
        self.get(self.lay.eu)
    }

    /// `E[v(s)]`.
    pub fn ev(&self) -> &'a [f64] {
        self.get(self.lay.ev)
    }

    /// Mean of the reference state (empty without a reference).
    pub fn mr(&self) -> &'a [f64] {
        self.get(self.lay.mr)
    }

    #[inline]
    fn channel(&self, cl: &ChanLayout, fl: ChanFlags, base: &[f64], out: &mut [f64], x: &[f64], xr: &[f64], w: f64) {
        out.copy_from_slice(base);
        if fl.ga {
            gemv(out, self.get(cl.ga), x);
        }
        if fl.gs {
            gemv(out, self.get(cl.gs), xr);
        }
        if fl.h {
            for (o, hi) in out.iter_mut().zip(self.get(cl.h)) {
                *o += hi * w;
            }
        }
    }
}

/// State of one path at one node, handed to an [`Observer`].
#[derive(Debug)]
pub struct StepView<'a> {
    pub k: usize,
    pub node: NodeView<'a>,
    pub x: &'a [f64],
    pub u: &'a [f64],
    pub v: &'a [f64],
    /// Diffusion coefficient at this node; multiplies the next increment.
    pub diffusion: &'a [f64],
    /// Brownian motion `W(s)`.
    pub w: f64,
    /// Reference state and its inputs (empty without a reference).
    pub xr: &'a [f64],
    pub ur: &'a [f64],
    pub vr: &'a [f64],
}

/// Per-block path visitor. One observer is created per block; the engine
/// returns their outputs in block order.
pub trait Observer: Send {
    type Output: Send;
    fn start_path(&mut self, _path: usize) {}
    fn visit(&mut self, step: &StepView<'_>);
    fn end_path(&mut self) {}
    fn finish(self) -> Self::Output;
}

#[derive(Default)]
struct Scratch {
    x: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    drift: Vec<f64>,
    diff: Vec<f64>,
    xr: Vec<f64>,
    ur: Vec<f64>,
    vr: Vec<f64>,
    drift_r: Vec<f64>,
    diff_r: Vec<f64>,
}

/// Compiled simulation of the state equation under a policy pair.
#[derive(Debug, Clone)]
pub struct Simulator {
    grid: TimeGrid,
    n: usize,
    n_u: usize,
    n_v: usize,
    n_q: usize,
    gamma: f64,
    data: Vec<f64>,
    layout: Layout,
    flags: (ChanFlags, ChanFlags),
    sampler: LawSampler,
    mean: MatrixTrajectory,
    has_reference: bool,
}

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

impl Simulator {
    pub fn new(
        sys: &MFSystem,
        pu: &Policy,
        pv: &Policy,
        reference: Option<&Reference>,
        law: &InitialLaw,
    ) -> Result<Self> {
        check_policies(sys, pu, pv, law)?;
        law.validate()?;
        if let Some(r) = reference {
            if r.u.gain.shape() != (sys.n_u, sys.n) || r.v.gain.shape() != (sys.n_v, sys.n) {
                return Err(Error::Dimension("reference feedback has the wrong shape".into()));
            }
        }
        let (mean, mean_ref) = propagate_means(sys, pu, pv, reference, law)?;
        let grid = sys.grid;
        let mut data = Vec::new();
        let mut layout = Layout::default();
        let empty = Mat::zeros(0, 1);
        for k in 0..grid.n_nodes() {
            let s = grid.node(k);
            let c = sys.node(k);
            let m = mean.at(k);
            let mr = mean_ref.as_ref().map(|t| t.at(k));
            let eu = pu.mean_at(s, m, mr)?;
            let ev = pv.mean_at(s, m, mr)?;
            let drift0 = &c.a1bar * m + &c.b1bar * &eu + &c.c1bar * &ev + &c.b;
            let diff0 = &c.a2bar * m + &c.b2bar * &eu + &c.c2bar * &ev + &c.sigma;
            let mut rec = Vec::with_capacity(layout.stride);
            let mut lay = Layout {
                m: pack(&mut rec, m),
                eu: pack(&mut rec, &eu),
                ev: pack(&mut rec, &ev),
                mr: pack(&mut rec, mr.unwrap_or(&empty)),
                a1: pack(&mut rec, &c.a1),
                a2: pack(&mut rec, &c.a2),
                b1: pack(&mut rec, &c.b1),
                b2: pack(&mut rec, &c.b2),
                c1: pack(&mut rec, &c.c1),
                c2: pack(&mut rec, &c.c2),
                bars: [&c.a1bar, &c.a2bar, &c.b1bar, &c.b2bar, &c.c1bar, &c.c2bar].map(|b| pack(&mut rec, b)),
                b: pack(&mut rec, &c.b),
                sigma: pack(&mut rec, &c.sigma),
                q: pack(&mut rec, &c.q),
                drift0: pack(&mut rec, &drift0),
                diff0: pack(&mut rec, &diff0),
                u: pack_channel(&mut rec, pu, sys.n, s, m, mr),
                v: pack_channel(&mut rec, pv, sys.n, s, m, mr),
                ..Layout::default()
            };
            if let (Some(r), Some(mr)) = (reference, mr) {
                let (gu, gbu, gu0) = r.u.eval(s);
                let (gv, gbv, gv0) = r.v.eval(s);
                let eur = (&gu + &gbu) * mr + &gu0;
                let evr = (&gv + &gbv) * mr + &gv0;
                lay.r = RefLayout {
                    gu: pack(&mut rec, &gu),
                    cu: pack(&mut rec, &(gbu * mr + gu0)),
                    gv: pack(&mut rec, &gv),
                    cv: pack(&mut rec, &(gbv * mr + gv0)),
                    drift0: pack(&mut rec, &(&c.a1bar * mr + &c.b1bar * &eur + &c.c1bar * &evr + &c.b)),
                    diff0: pack(&mut rec, &(&c.a2bar * mr + &c.b2bar * &eur + &c.c2bar * &evr + &c.sigma)),
                };
            }
            lay.stride = rec.len();
            if k == 0 {
                layout = lay;
            }
            data.extend_from_slice(&rec);
        }
        Ok(Self {
            grid,
            n: sys.n,
            n_u: sys.n_u,
            n_v: sys.n_v,
            n_q: sys.n_q(),
            gamma: sys.gamma,
            data,
            layout,
            flags: (ChanFlags::of(pu), ChanFlags::of(pv)),
            sampler: law.sampler(),
            mean,
            has_reference: reference.is_some(),
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn mean(&self) -> &MatrixTrajectory {
        &self.mean
    }

    pub fn node(&self, k: usize) -> NodeView<'_> {
        let st = self.layout.stride;
        NodeView { s: self.grid.node(k), rec: &self.data[k * st..(k + 1) * st], lay: &self.layout }
    }

    fn scratch(&self) -> Scratch {
        let (n, nu, nv) = (self.n, self.n_u, self.n_v);
        let r = if self.has_reference { 1 } else { 0 };
        Scratch {
            x: vec![0.0; n],
            u: vec![0.0; nu],
            v: vec![0.0; nv],
            drift: vec![0.0; n],
            diff: vec![0.0; n],
            xr: vec![0.0; n * r],
            ur: vec![0.0; nu * r],
            vr: vec![0.0; nv * r],
            drift_r: vec![0.0; n * r],
            diff_r: vec![0.0; n * r],
        }
    }

    fn run_path<O: Observer>(&self, path: usize, seed: u64, sc: &mut Scratch, obs: &mut O) {
        let mut rng = path_rng(seed, path);
        self.sampler.draw(&mut rng, &mut sc.x);
        if self.has_reference {
            sc.xr.copy_from_slice(&sc.x);
        }
        let dt = self.grid.dt();
        let sq = dt.sqrt();
        let steps = self.grid.steps();
        let (fu, fv) = self.flags;
        let l = &self.layout;
        let mut w = 0.0;
        obs.start_path(path);
        for k in 0..=steps {
            let nd = self.node(k);
            nd.channel(&l.u, fu, nd.get(l.u.cdet), &mut sc.u, &sc.x, &sc.xr, w);
            nd.channel(&l.v, fv, nd.get(l.v.cdet), &mut sc.v, &sc.x, &sc.xr, w);
            sc.drift.copy_from_slice(nd.get(l.drift0));
            gemv(&mut sc.drift, nd.get(l.a1), &sc.x);
            gemv(&mut sc.drift, nd.get(l.b1), &sc.u);
            gemv(&mut sc.drift, nd.get(l.c1), &sc.v);
            sc.diff.copy_from_slice(nd.get(l.diff0));
            gemv(&mut sc.diff, nd.get(l.a2), &sc.x);
            gemv(&mut sc.diff, nd.get(l.b2), &sc.u);
            gemv(&mut sc.diff, nd.get(l.c2), &sc.v);
            if self.has_reference {
                let r = &l.r;
                sc.ur.copy_from_slice(nd.get(r.cu));
                gemv(&mut sc.ur, nd.get(r.gu), &sc.xr);
                sc.vr.copy_from_slice(nd.get(r.cv));
                gemv(&mut sc.vr, nd.get(r.gv), &sc.xr);
                sc.drift_r.copy_from_slice(nd.get(r.drift0));
                gemv(&mut sc.drift_r, nd.get(l.a1), &sc.xr);
                gemv(&mut sc.drift_r, nd.get(l.b1), &sc.ur);
                gemv(&mut sc.drift_r, nd.get(l.c1), &sc.vr);
                sc.diff_r.copy_from_slice(nd.get(r.diff0));
                gemv(&mut sc.diff_r, nd.get(l.a2), &sc.xr);
                gemv(&mut sc.diff_r, nd.get(l.b2), &sc.ur);
                gemv(&mut sc.diff_r, nd.get(l.c2), &sc.vr);
            }
            obs.visit(&StepView {
                k,
                node: nd,
                x: &sc.x,
                u: &sc.u,
                v: &sc.v,
                diffusion: &sc.diff,
                w,
                xr: &sc.xr,
                ur: &sc.ur,
                vr: &sc.vr,
            });
            if k == steps {
                break;
            }
            let z: f64 = rng.sample(StandardNormal);
            let dw = sq * z;
            for i in 0..self.n {
                sc.x[i] += sc.drift[i] * dt + sc.diff[i] * dw;
            }
            if self.has_reference {
                for i in 0..self.n {
                    sc.xr[i] += sc.drift_r[i] * dt + sc.diff_r[i] * dw;
                }
            }
            w += dw;
        }
        obs.end_path();
    }

    /// Run `n_paths` paths and return one observer output per block, in
    /// block order.
    pub fn run<O, F>(&self, n_paths: usize, seed: u64, make: F) -> Vec<O::Output>
    where
        O: Observer,
        F: Fn() -> O + Sync,
    {
        let blocks = n_paths.div_ceil(BLOCK);
        (0..blocks)
            .into_par_iter()
            .map(|b| {
                let mut obs = make();
                let mut sc = self.scratch();
                for p in b * BLOCK..((b + 1) * BLOCK).min(n_paths) {
                    self.run_path(p, seed, &mut sc, &mut obs);
                }
                obs.finish()
            })
            .collect()
    }

    fn weight(&self, k: usize) -> f64 {
        let dt = self.grid.dt();
        if k == 0 || k == self.grid.steps() {
            0.5 * dt
        } else {
            dt
        }
    }

    /// `Q x` into `qx`.
    #[inline]
    fn output(&self, nd: &NodeView<'_>, x: &[f64], qx: &mut [f64]) {
        qx.iter_mut().for_each(|e| *e = 0.0);
        gemv(qx, nd.get(self.layout.q), x);
    }

    /// Running costs `(γ²|v|² − |Qx|² − |u|², |Qx|² + |u|²)`.
    #[inline]
    fn integrands(&self, nd: &NodeView<'_>, x: &[f64], u: &[f64], v: &[f64], qx: &mut [f64]) -> (f64, f64) {
        self.output(nd, x, qx);
        let zq: f64 = qx.iter().map(|e| e * e).sum();
        let uu: f64 = u.iter().map(|e| e * e).sum();
        let vv: f64 = v.iter().map(|e| e * e).sum();
        (self.gamma * self.gamma * vv - zq - uu, zq + uu)
    }
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        if xs.len() < 2 {
            return Self { value: mean, se: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        Self { value: mean, se: (var / n).sqrt() }
    }

    /// `|value − target| ≤ k·se`, with a rounding allowance when `se = 0`.
    pub fn agrees_with(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.se + 1e-12 * (1.0 + target.abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    J1,
    J2,
}

/// Monte Carlo summary of one simulation.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub grid: TimeGrid,
    pub n: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub gamma: f64,
    /// Deterministic mean from the mean ODE.
    pub mean: MatrixTrajectory,
    /// Empirical mean and variance per node, `n` entries per node.
    pub path_mean: Vec<f64>,
    pub path_var: Vec<f64>,
    /// Empirical mean of the running costs per node.
    pub j1_integrand: Vec<f64>,
    pub j2_integrand: Vec<f64>,
    /// Per-path costs and `sup_s |X(s)|²`.
    pub j1: Vec<f64>,
    pub j2: Vec<f64>,
    pub sup_sq: Vec<f64>,
    /// Per-path costs of the reference state, when simulated.
    pub j1_ref: Option<Vec<f64>>,
    pub j2_ref: Option<Vec<f64>>,
}

impl Ensemble {
    pub fn path_mean_at(&self, k: usize) -> &[f64] {
        &self.path_mean[k * self.n..(k + 1) * self.n]
    }

    pub fn path_var_at(&self, k: usize) -> &[f64] {
        &self.path_var[k * self.n..(k + 1) * self.n]
    }

    /// Standard error of the empirical mean of component `i` at node `k`.
    pub fn mean_se(&self, k: usize, i: usize) -> f64 {
        (self.path_var_at(k)[i] / self.n_paths as f64).sqrt()
    }

    pub fn sup_sq(&self) -> Estimate {
        Estimate::from_samples(&self.sup_sq)
    }

    /// Columns `node, s, mean_i, var_i, j1_integrand, j2_integrand`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("node,s");
        for i in 1..=self.n {
            write!(out, ",mean_{i}").unwrap();
        }
        for i in 1..=self.n {
            write!(out, ",var_{i}").unwrap();
        }
        out.push_str(",j1_integrand,j2_integrand\n");
        for k in 0..self.grid.n_nodes() {
            write!(out, "{k},{:.16e}", self.grid.node(k)).unwrap();
            for v in self.path_mean_at(k).iter().chain(self.path_var_at(k)) {
                write!(out, ",{v:.16e}").unwrap();
            }
            writeln!(out, ",{:.16e},{:.16e}", self.j1_integrand[k], self.j2_integrand[k]).unwrap();
        }
        out
    }
}

/// Estimate of `J1` or `J2` with its standard error.
pub fn evaluate_cost(ens: &Ensemble, kind: CostKind) -> Estimate {
    Estimate::from_samples(match kind {
        CostKind::J1 => &ens.j1,
        CostKind::J2 => &ens.j2,
    })
}

/// Common-random-number estimate of `J(simulated) − J(reference)`.
pub fn paired_difference(ens: &Ensemble, kind: CostKind) -> Result<Estimate> {
    let (a, b) = match kind {
        CostKind::J1 => (&ens.j1, &ens.j1_ref),
        CostKind::J2 => (&ens.j2, &ens.j2_ref),
    };
    let b = b.as_ref().ok_or_else(|| Error::InvalidInput("ensemble has no reference state".into()))?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    Ok(Estimate::from_samples(&d))
}

struct EnsembleObs<'a> {
    sim: &'a Simulator,
    sum: Vec<f64>,
    sq: Vec<f64>,
    l1: Vec<f64>,
    l2: Vec<f64>,
    j1: Vec<f64>,
    j2: Vec<f64>,
    sup: Vec<f64>,
    j1r: Vec<f64>,
    j2r: Vec<f64>,
    cur: [f64; 5],
    qx: Vec<f64>,
}

struct EnsembleBlock {
    sum: Vec<f64>,
    sq: Vec<f64>,
    l1: Vec<f64>,
    l2: Vec<f64>,
    j1: Vec<f64>,
    j2: Vec<f64>,
    sup: Vec<f64>,
    j1r: Vec<f64>,
    j2r: Vec<f64>,
}

impl<'a> EnsembleObs<'a> {
    fn new(sim: &'a Simulator) -> Self {
        let nn = sim.grid.n_nodes();
        Self {
            sim,
            sum: vec![0.0; nn * sim.n],
            sq: vec![0.0; nn * sim.n],
            l1: vec![0.0; nn],
            l2: vec![0.0; nn],
            j1: Vec::new(),
            j2: Vec::new(),
            sup: Vec::new(),
            j1r: Vec::new(),
            j2r: Vec::new(),
            cur: [0.0; 5],
            qx: vec![0.0; sim.n_q],
        }
    }
}

impl Observer for EnsembleObs<'_> {
    type Output = EnsembleBlock;

    fn start_path(&mut self, _path: usize) {
        self.cur = [0.0; 5];
    }

    fn visit(&mut self, st: &StepView<'_>) {
        let sim = self.sim;
        let n = sim.n;
        let k = st.k;
        let mut norm = 0.0;
        for i in 0..n {
            let d = st.x[i] - st.node.m()[i];
            self.sum[k * n + i] += d;
            self.sq[k * n + i] += d * d;
            norm += st.x[i] * st.x[i];
        }
        self.cur[2] = self.cur[2].max(norm);
        let (l1, l2) = sim.integrands(&st.node, st.x, st.u, st.v, &mut self.qx);
        self.l1[k] += l1;
        self.l2[k] += l2;
        let w = sim.weight(k);
        self.cur[0] += w * l1;
        self.cur[1] += w * l2;
        if sim.has_reference {
            let (r1, r2) = sim.integrands(&st.node, st.xr, st.ur, st.vr, &mut self.qx);
            self.cur[3] += w * r1;
            self.cur[4] += w * r2;
        }
    }

    fn end_path(&mut self) {
        self.j1.push(self.cur[0]);
        self.j2.push(self.cur[1]);
        self.sup.push(self.cur[2]);
        self.j1r.push(self.cur[3]);
        self.j2r.push(self.cur[4]);
    }

    fn finish(self) -> EnsembleBlock {
        EnsembleBlock {
            sum: self.sum,
            sq: self.sq,
            l1: self.l1,
            l2: self.l2,
            j1: self.j1,
            j2: self.j2,
            sup: self.sup,
            j1r: self.j1r,
            j2r: self.j2r,
        }
    }
}

fn check_paths(n_paths: usize) -> Result<()> {
    if n_paths < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 paths, got {n_paths}")));
    }
    Ok(())
}

impl Simulator {
    /// Run and summarize into an [`Ensemble`].
    pub fn ensemble(&self, n_paths: usize, seed: u64) -> Result<Ensemble> {
        check_paths(n_paths)?;
        let blocks = self.run(n_paths, seed, || EnsembleObs::new(self));
        let nn = self.grid.n_nodes();
        let n = self.n;
        let mut sum = vec![0.0; nn * n];
        let mut sq = vec![0.0; nn * n];
        let mut l1 = vec![0.0; nn];
        let mut l2 = vec![0.0; nn];
        let (mut j1, mut j2, mut sup, mut j1r, mut j2r) = (vec![], vec![], vec![], vec![], vec![]);
        for b in blocks {
            sum.iter_mut().zip(&b.sum).for_each(|(a, x)| *a += x);
            sq.iter_mut().zip(&b.sq).for_each(|(a, x)| *a += x);
            l1.iter_mut().zip(&b.l1).for_each(|(a, x)| *a += x);
            l2.iter_mut().zip(&b.l2).for_each(|(a, x)| *a += x);
            j1.extend(b.j1);
            j2.extend(b.j2);
            sup.extend(b.sup);
            j1r.extend(b.j1r);
            j2r.extend(b.j2r);
        }
        let np = n_paths as f64;
        let mut path_mean = vec![0.0; nn * n];
        let mut path_var = vec![0.0; nn * n];
        for k in 0..nn {
            for i in 0..n {
                let idx = k * n + i;
                path_mean[idx] = self.node(k).m()[i] + sum[idx] / np;
                path_var[idx] = ((sq[idx] - sum[idx] * sum[idx] / np) / (np - 1.0)).max(0.0);
            }
        }
        Ok(Ensemble {
            grid: self.grid,
            n,
            n_paths,
            seed,
            gamma: self.gamma,
            mean: self.mean.clone(),
            path_mean,
            path_var,
            j1_integrand: l1.iter().map(|x| x / np).collect(),
            j2_integrand: l2.iter().map(|x| x / np).collect(),
            j1,
            j2,
            sup_sq: sup,
            j1_ref: self.has_reference.then_some(j1r),
            j2_ref: self.has_reference.then_some(j2r),
        })
    }
}

/// Simulate `n_paths` paths of the state under `(u, v)`.
pub fn simulate(sys: &MFSystem, pu: &Policy, pv: &Policy, law: &InitialLaw, n_paths: usize, seed: u64) -> Result<Ensemble> {
    Simulator::new(sys, pu, pv, None, law)?.ensemble(n_paths, seed)
}

/// As [`simulate`], also tracking the reference state driven by `reference`
/// on the same noise.
pub fn simulate_with_reference(
    sys: &MFSystem,
    pu: &Policy,
    pv: &Policy,
    reference: &Reference,
    law: &InitialLaw,
    n_paths: usize,
    seed: u64,
) -> Result<Ensemble> {
    Simulator::new(sys, pu, pv, Some(reference), law)?.ensemble(n_paths, seed)
}

/// Interacting-particle variant: every expectation is replaced by the
/// average over the `n_particles` simulated particles. Particle `i` uses the
/// same random stream as path `i` of [`simulate`].
pub fn simulate_particles(
    sys: &MFSystem,
    pu: &Policy,
    pv: &Policy,
    law: &InitialLaw,
    n_particles: usize,
    seed: u64,
) -> Result<Ensemble> {
    check_paths(n_particles)?;
    let sim = Simulator::new(sys, pu, pv, None, law)?;
    let (n, nu, nv) = (sim.n, sim.n_u, sim.n_v);
    let np = n_particles;
    let dt = sim.grid.dt();
    let sq = dt.sqrt();
    let steps = sim.grid.steps();
    let nn = sim.grid.n_nodes();
    let mut rngs: Vec<ChaCha8Rng> = (0..np).map(|p| path_rng(seed, p)).collect();
    let mut xs = vec![0.0; np * n];
    for (p, rng) in rngs.iter_mut().enumerate() {
        sim.sampler.draw(rng, &mut xs[p * n..(p + 1) * n]);
    }
    let mut ws = vec![0.0; np];
    let mut us = vec![0.0; np * nu];
    let mut vs = vec![0.0; np * nv];
    let mut j1 = vec![0.0; np];
    let mut j2 = vec![0.0; np];
    let mut sup = vec![0.0f64; np];
    let mut path_mean = vec![0.0; nn * n];
    let mut path_var = vec![0.0; nn * n];
    let mut l1m = vec![0.0; nn];
    let mut l2m = vec![0.0; nn];
    let mut qx = vec![0.0; sim.n_q];
    let (mut base_u, mut base_v) = (vec![0.0; nu], vec![0.0; nv]);
    let (mut drift, mut diff) = (vec![0.0; n], vec![0.0; n]);
    let empty: [f64; 0] = [];
    let avg = |v: &[f64], d: usize| -> Vec<f64> {
        let mut out = vec![0.0; d];
        for row in v.chunks(d.max(1)).take(np) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= np as f64);
        out
    };
    let l = &sim.layout;
    let (fu, fv) = sim.flags;
    for k in 0..nn {
        let nd = sim.node(k);
        let mhat = avg(&xs, n);
        for (chan, base) in [(&l.u, &mut base_u), (&l.v, &mut base_v)] {
            base.copy_from_slice(nd.get(chan.c));
            gemv(base, nd.get(chan.gbar), &mhat);
        }
        for p in 0..np {
            let x = &xs[p * n..(p + 1) * n];
            nd.channel(&l.u, fu, &base_u, &mut us[p * nu..(p + 1) * nu], x, &empty, ws[p]);
            nd.channel(&l.v, fv, &base_v, &mut vs[p * nv..(p + 1) * nv], x, &empty, ws[p]);
        }
        let uhat = avg(&us, nu);
        let vhat = avg(&vs, nv);
        let mut drift0 = nd.get(l.b).to_vec();
        let mut diff0 = nd.get(l.sigma).to_vec();
        gemv(&mut drift0, nd.get(l.bars[0]), &mhat);
        gemv(&mut drift0, nd.get(l.bars[2]), &uhat);
        gemv(&mut drift0, nd.get(l.bars[4]), &vhat);
        gemv(&mut diff0, nd.get(l.bars[1]), &mhat);
        gemv(&mut diff0, nd.get(l.bars[3]), &uhat);
        gemv(&mut diff0, nd.get(l.bars[5]), &vhat);
        let w = sim.weight(k);
        for p in 0..np {
            let (x, u, v) = (&xs[p * n..(p + 1) * n], &us[p * nu..(p + 1) * nu], &vs[p * nv..(p + 1) * nv]);
            let (l1, l2) = sim.integrands(&nd, x, u, v, &mut qx);
            l1m[k] += l1;
            l2m[k] += l2;
            j1[p] += w * l1;
            j2[p] += w * l2;
            sup[p] = sup[p].max(x.iter().map(|e| e * e).sum());
            for i in 0..n {
                let d = x[i] - nd.m()[i];
                path_mean[k * n + i] += d;
                path_var[k * n + i] += d * d;
            }
        }
        if k < steps {
            for p in 0..np {
                drift.copy_from_slice(&drift0);
                diff.copy_from_slice(&diff0);
                let (u, v) = (&us[p * nu..(p + 1) * nu], &vs[p * nv..(p + 1) * nv]);
                let x = &xs[p * n..(p + 1) * n];
                gemv(&mut drift, nd.get(l.a1), x);
                gemv(&mut drift, nd.get(l.b1), u);
                gemv(&mut drift, nd.get(l.c1), v);
                gemv(&mut diff, nd.get(l.a2), x);
                gemv(&mut diff, nd.get(l.b2), u);
                gemv(&mut diff, nd.get(l.c2), v);
                let z: f64 = rngs[p].sample(StandardNormal);
                let dw = sq * z;
                for i in 0..n {
                    xs[p * n + i] += drift[i] * dt + diff[i] * dw;
                }
                ws[p] += dw;
            }
        }
    }
    let npf = np as f64;
    for k in 0..nn {
        for i in 0..n {
            let idx = k * n + i;
            let (s1, s2) = (path_mean[idx], path_var[idx]);
            path_mean[idx] = sim.node(k).m()[i] + s1 / npf;
            path_var[idx] = ((s2 - s1 * s1 / npf) / (npf - 1.0)).max(0.0);
        }
    }
    Ok(Ensemble {
        grid: sim.grid,
        n,
        n_paths: np,
        seed,
        gamma: sim.gamma,
        mean: sim.mean.clone(),
        path_mean,
        path_var,
        j1_integrand: l1m.iter().map(|x| x / npf).collect(),
        j2_integrand: l2m.iter().map(|x| x / npf).collect(),
        j1,
        j2,
        sup_sq: sup,
        j1_ref: None,
        j2_ref: None,
    })
}

/// Paired cost differences for a family of perturbation sizes.
///
/// The simulated state is run at unit perturbation. Since the dynamics are
/// affine and both states share the noise, the state at size ε is exactly
/// `x_ref + ε (x − x_ref)`, so each path's difference is `ε L + ε² M`.
struct DeltaObs<'a> {
    sim: &'a Simulator,
    kind: CostKind,
    cur: [f64; 2],
    out: Vec<[f64; 2]>,
    qx: Vec<f64>,
    qr: Vec<f64>,
}

impl Observer for DeltaObs<'_> {
    type Output = Vec<[f64; 2]>;

    fn start_path(&mut self, _path: usize) {
        self.cur = [0.0; 2];
    }

    fn visit(&mut self, st: &StepView<'_>) {
        let sim = self.sim;
        let w = sim.weight(st.k);
        sim.output(&st.node, st.x, &mut self.qx);
        sim.output(&st.node, st.xr, &mut self.qr);
        let cross = |a: &[f64], b: &[f64]| -> (f64, f64) {
            a.iter().zip(b).fold((0.0, 0.0), |(l, m), (x, r)| {
                let d = x - r;
                (l + 2.0 * r * d, m + d * d)
            })
        };
        let (lq, mq) = cross(&self.qx, &self.qr);
        let (lu, mu) = cross(st.u, st.ur);
        let (l, m) = match self.kind {
            CostKind::J1 => {
                let (lv, mv) = cross(st.v, st.vr);
                let g2 = sim.gamma * sim.gamma;
                (g2 * lv - lq - lu, g2 * mv - mq - mu)
            }
            CostKind::J2 => (lq + lu, mq + mu),
        };
        self.cur[0] += w * l;
        self.cur[1] += w * m;
    }

    fn end_path(&mut self) {
        self.out.push(self.cur);
    }

    fn finish(self) -> Vec<[f64; 2]> {
        self.out
    }
}

fn paired_deltas(sim: &Simulator, kind: CostKind, eps: &[f64], n_paths: usize, seed: u64) -> Vec<Estimate> {
    let blocks = sim.run(n_paths, seed, || DeltaObs {
        sim,
        kind,
        cur: [0.0; 2],
        out: Vec::with_capacity(BLOCK),
        qx: vec![0.0; sim.n_q],
        qr: vec![0.0; sim.n_q],
    });
    eps.iter()
        .map(|&e| {
            let d: Vec<f64> = blocks.iter().flatten().map(|[l, m]| e * l + e * e * m).collect();
            Estimate::from_samples(&d)
        })
        .collect()
}

/// Random adapted input `g(s) + h(s)·W(s)` with smooth deterministic `g`, `h`.
pub fn random_probe(grid: TimeGrid, dim: usize, rng: &mut impl Rng) -> [PolicyTerm; 2] {
    let coef: Vec<f64> = (0..5 * dim).map(|_| rng.sample(StandardNormal)).collect();
    let span = grid.t_end() - grid.t0();
    let g = MatrixTrajectory::from_fn(grid, |_, s| {
        let t = std::f64::consts::PI * (s - grid.t0()) / span;
        Mat::from_fn(dim, 1, |i, _| coef[5 * i] + coef[5 * i + 1] * t.cos() + coef[5 * i + 2] * t.sin())
    })
    .expect("probe on its own grid");
    let h = MatrixTrajectory::from_fn(grid, |_, s| {
        let t = (s - grid.t0()) / span;
        Mat::from_fn(dim, 1, |i, _| coef[5 * i + 3] + coef[5 * i + 4] * t)
    })
    .expect("probe on its own grid");
    [PolicyTerm::OpenLoop(g), PolicyTerm::Brownian(h)]
}

#[derive(Debug, Clone)]
pub struct NashOptions {
    pub n_perturb: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub eps: Vec<f64>,
    /// Simulation grid steps; the feedback laws are interpolated onto it.
    pub steps: usize,
    /// Which inequalities to probe.
    pub players: Vec<u8>,
    /// The non-deviating player keeps its equilibrium process rather than
    /// its feedback law, as open-loop equilibria require.
    pub open_loop: bool,
}

impl Default for NashOptions {
    fn default() -> Self {
        Self {
            n_perturb: 100,
            n_paths: 10_000,
            seed: 0,
            eps: vec![0.1, -0.1, 0.5, -0.5],
            steps: 250,
            players: vec![1, 2],
            open_loop: false,
        }
    }
}

/// One perturbation of one player.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NashProbe {
    /// 1 for the disturbance (`J1`), 2 for the control (`J2`).
    pub player: u8,
    pub index: usize,
    pub eps: f64,
    pub delta: Estimate,
}

impl NashProbe {
    pub fn passed(&self) -> bool {
        self.delta.value >= -3.0 * self.delta.se
    }
}

#[derive(Debug, Clone)]
pub struct NashReport {
    pub probes: Vec<NashProbe>,
}

impl NashReport {
    pub fn passed(&self) -> bool {
        self.probes.iter().all(NashProbe::passed)
    }

    /// Probe with the smallest `ΔJ + 3·SE` for `player`.
    pub fn worst(&self, player: u8) -> Option<&NashProbe> {
        let score = |p: &NashProbe| p.delta.value + 3.0 * p.delta.se;
        self.probes
            .iter()
            .filter(|p| p.player == player)
            .min_by(|a, b| score(a).total_cmp(&score(b)))
    }
}

/// Probe both Nash inequalities of a closed-loop solution.
pub fn verify_nash(sys: &MFSystem, sol: &ClosedLoopSolution, law: &InitialLaw, opts: &NashOptions) -> Result<NashReport> {
    verify_nash_laws(sys, &sol.control_law(), &sol.disturbance_law(), law, opts)
}

/// Probe the pair `u = U x + Ū E[x] + U0`, `v = V x + V̄ E[x] + V0`.
///
/// For player 1 the disturbance becomes `v*(X*) + ε δv` with `X*` the
/// equilibrium state on the same noise, while `u` keeps its feedback law on
/// the perturbed state (or its equilibrium process with
/// [`NashOptions::open_loop`]); `ΔJ1` is estimated pathwise against `X*`.
/// Player 2 is symmetric.
pub fn verify_nash_laws(
    sys: &MFSystem,
    u_law: &AffineFeedback,
    v_law: &AffineFeedback,
    law: &InitialLaw,
    opts: &NashOptions,
) -> Result<NashReport> {
    check_paths(opts.n_paths)?;
    let sys = sys.resample(opts.steps)?;
    let reference = Reference { u: u_law.clone(), v: v_law.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(u64::MAX);
    let fixed = |l: &AffineFeedback| {
        if opts.open_loop {
            Policy::shadow(l.clone())
        } else {
            Policy::feedback(l.clone())
        }
    };
    let mut probes = Vec::new();
    for index in 0..opts.n_perturb {
        let dv = random_probe(sys.grid, sys.n_v, &mut rng);
        let du = random_probe(sys.grid, sys.n_u, &mut rng);
        for &player in &opts.players {
            let (pu, pv, kind) = match player {
                1 => (
                    fixed(u_law),
                    Policy::shadow(v_law.clone()).with(dv[0].clone()).with(dv[1].clone()),
                    CostKind::J1,
                ),
                2 => (
                    Policy::shadow(u_law.clone()).with(du[0].clone()).with(du[1].clone()),
                    fixed(v_law),
                    CostKind::J2,
                ),
                p => return Err(Error::InvalidInput(format!("no player {p}"))),
            };
            let sim = Simulator::new(&sys, &pu, &pv, Some(&reference), law)?;
            let deltas = paired_deltas(&sim, kind, &opts.eps, opts.n_paths, opts.seed);
            for (&eps, delta) in opts.eps.iter().zip(deltas) {
                probes.push(NashProbe { player, index, eps, delta });
            }
        }
    }
    Ok(NashReport { probes })
}

#[derive(Debug, Clone)]
pub struct GainRatio {
    /// Largest estimated `‖z‖ / ‖v‖` over the probes.
    pub max_ratio: f64,
    /// Standard error of the maximizing estimate.
    pub se: f64,
    pub ratios: Vec<Estimate>,
}

struct RatioObs<'a> {
    sim: &'a Simulator,
    dev: &'a [Vec<f64>],
    mean: &'a [Vec<f64>],
    zbuf: Vec<f64>,
    d: Vec<f64>,
    cur: (f64, f64),
    out: Vec<(f64, f64)>,
}

impl Observer for RatioObs<'_> {
    type Output = Vec<(f64, f64)>;

    fn start_path(&mut self, _path: usize) {
        self.cur = (0.0, 0.0);
    }

    fn visit(&mut self, st: &StepView<'_>) {
        let k = st.k;
        for (d, (x, m)) in self.d.iter_mut().zip(st.x.iter().zip(st.node.m())) {
            *d = x - m;
        }
        self.zbuf.iter_mut().for_each(|e| *e = 0.0);
        gemv(&mut self.zbuf, &self.dev[k], &self.d);
        gemv(&mut self.zbuf, &self.mean[k], st.node.m());
        let w = self.sim.weight(k);
        self.cur.0 += w * self.zbuf.iter().map(|e| e * e).sum::<f64>();
        self.cur.1 += w * st.v.iter().map(|e| e * e).sum::<f64>();
    }

    fn end_path(&mut self) {
        self.out.push(self.cur);
    }

    fn finish(self) -> Vec<(f64, f64)> {
        self.out
    }
}

/// Monte Carlo lower estimate of the norm of `v ↦ z` for a closed-loop
/// system with zero initial state and zero affine terms, where
/// `z = out_dev·(X − E[X]) + out_mean·E[X]`. Each probe is a random
/// `g(s) + h(s)W(s)` disturbance.
pub fn estimate_gain_ratio(
    sys_closed: &MFSystem,
    out_dev: &MatrixTrajectory,
    out_mean: &MatrixTrajectory,
    n_probe: usize,
    n_paths: usize,
    seed: u64,
) -> Result<GainRatio> {
    check_paths(n_paths)?;
    let sys = sys_closed.without_affine();
    let grid = sys.grid;
    if out_dev.shape().1 != sys.n || out_mean.shape() != out_dev.shape() {
        return Err(Error::Dimension("output matrices do not match the state".into()));
    }
    let dev: Vec<Vec<f64>> = grid.nodes().map(|s| flat(&out_dev.eval(s))).collect();
    let mean: Vec<Vec<f64>> = grid.nodes().map(|s| flat(&out_mean.eval(s))).collect();
    let law = InitialLaw::point(&vec![0.0; sys.n]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut ratios = Vec::with_capacity(n_probe);
    for _ in 0..n_probe {
        let [g, h] = random_probe(grid, sys.n_v, &mut rng);
        let pv = Policy::zero(sys.n_v).with(g).with(h);
        let sim = Simulator::new(&sys, &Policy::zero(sys.n_u), &pv, None, &law)?;
        let per_path: Vec<(f64, f64)> = sim
            .run(n_paths, seed, || RatioObs {
                sim: &sim,
                dev: &dev,
                mean: &mean,
                zbuf: vec![0.0; out_dev.shape().0],
                d: vec![0.0; sys.n],
                cur: (0.0, 0.0),
                out: Vec::with_capacity(BLOCK),
            })
            .concat();
        let np = per_path.len() as f64;
        let za = per_path.iter().map(|p| p.0).sum::<f64>() / np;
        let vb = per_path.iter().map(|p| p.1).sum::<f64>() / np;
        if vb <= 0.0 {
            return Err(Error::InvalidInput("probe disturbance has zero energy".into()));
        }
        let r2 = za / vb;
        // delta method on the ratio of means
        let resid: Vec<f64> = per_path.iter().map(|p| (p.0 - r2 * p.1) / vb).collect();
        let se_r2 = Estimate::from_samples(&resid).se;
        let r = r2.sqrt();
        let se = if r > 0.0 { se_r2 / (2.0 * r) } else { 0.0 };
        ratios.push(Estimate { value: r, se });
    }
    let best = ratios
        .iter()
        .copied()
        .max_by(|a, b| a.value.total_cmp(&b.value))
        .unwrap_or(Estimate { value: 0.0, se: 0.0 });
    Ok(GainRatio { max_ratio: best.value, se: best.se, ratios })
}

/// Result of the completion-of-squares check for player 1.
#[derive(Debug, Clone, Copy)]
pub struct IdentityCheck {
    /// `J1(u*, v) − E∫ |v − E v − V(X − E X)|²_Λ + |E v − Ṽ E X − V0|²_Λ̄`.
    pub lhs: Estimate,
    /// `J1*` from the closed-form cost.
    pub constant: f64,
}

impl IdentityCheck {
    pub fn passed(&self) -> bool {
        self.lhs.agrees_with(self.constant, 3.0)
    }
}

struct IdentityObs<'a> {
    sim: &'a Simulator,
    sol: &'a ClosedLoopSolution,
    qx: Vec<f64>,
    cur: f64,
    out: Vec<f64>,
}

impl Observer for IdentityObs<'_> {
    type Output = Vec<f64>;

    fn start_path(&mut self, _path: usize) {
        self.cur = 0.0;
    }

    fn visit(&mut self, st: &StepView<'_>) {
        let k = st.k;
        let g = &self.sol.riccati.gains[k];
        let v0 = self.sol.affine.v0.at(k);
        let nv = st.v.len();
        let m = st.node.m();
        let mut d1 = Mat::zeros(nv, 1);
        let mut d2 = Mat::zeros(nv, 1);
        for i in 0..nv {
            let mut a = st.v[i] - st.node.ev()[i];
            let mut b = st.node.ev()[i] - v0[i];
            for j in 0..m.len() {
                a -= g.v[(i, j)] * (st.x[j] - m[j]);
                b -= g.vt[(i, j)] * m[j];
            }
            d1[i] = a;
            d2[i] = b;
        }
        let sq = (d1.transpose() * &g.lambda * &d1)[0] + (d2.transpose() * &g.lambda_bar * &d2)[0];
        let (l1, _) = self.sim.integrands(&st.node, st.x, st.u, st.v, &mut self.qx);
        self.cur += self.sim.weight(k) * (l1 - sq);
    }

    fn end_path(&mut self) {
        self.out.push(self.cur);
    }

    fn finish(self) -> Vec<f64> {
        self.out
    }
}

/// Check `J1(u*, v) = J1* + E∫ (squares)` for an arbitrary disturbance
/// policy `v` while `u` follows the synthesized feedback.
pub fn completion_identity(
    sys: &MFSystem,
    sol: &ClosedLoopSolution,
    v: &Policy,
    law: &InitialLaw,
    n_paths: usize,
    seed: u64,
) -> Result<IdentityCheck> {
    check_paths(n_paths)?;
    if sol.grid() != &sys.grid {
        return Err(Error::InvalidInput("solution and system grids differ".into()));
    }
    let sim = Simulator::new(sys, &Policy::feedback(sol.control_law()), v, None, law)?;
    let per_path = sim
        .run(n_paths, seed, || IdentityObs {
            sim: &sim,
            sol,
            qx: vec![0.0; sim.n_q],
            cur: 0.0,
            out: Vec::with_capacity(BLOCK),
        })
        .concat();
    Ok(IdentityCheck { lhs: Estimate::from_samples(&per_path), constant: sol.j1star })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closedloop::{synthesize, ClosedLoopOptions};
    use crate::model::fixtures;

    fn zero_policies(sys: &MFSystem) -> (Policy, Policy) {
        (Policy::zero(sys.n_u), Policy::zero(sys.n_v))
    }

    #[test]
    fn zero_fixture_is_static() {
        let sys = fixtures::system("zero", 50);
        let (pu, pv) = zero_policies(&sys);
        let law = InitialLaw::Gaussian { mean: Mat::from_element(1, 1, 0.3), cov: Mat::from_element(1, 1, 0.1) };
        let ens = simulate(&sys, &pu, &pv, &law, 300, 1).unwrap();
        for k in 0..=50 {
            assert_eq!(ens.mean.at(k)[0], 0.3);
        }
        let sim = Simulator::new(&sys, &pu, &pv, None, &law).unwrap();
        struct Still(Vec<f64>, bool);
        impl Observer for Still {
            type Output = bool;
            fn visit(&mut self, st: &StepView<'_>) {
                if st.k == 0 {
                    self.0 = st.x.to_vec();
                } else {
                    self.1 &= st.x == self.0.as_slice();
                }
            }
            fn finish(self) -> bool {
                self.1
            }
        }
        assert!(sim.run(300, 1, || Still(vec![], true)).into_iter().all(|b| b));
        let z = simulate(&sys, &pu, &pv, &InitialLaw::point(&[0.0]), 10, 0).unwrap();
        assert_eq!(evaluate_cost(&z, CostKind::J1).value, 0.0);
        assert_eq!(evaluate_cost(&z, CostKind::J2).value, 0.0);
    }

    #[test]
    fn exponential_mean() {
        let mut sys = fixtures::system("zero", 200);
        sys.a1 = MatrixTrajectory::constant(sys.grid, Mat::from_element(1, 1, -0.7));
        sys.a1bar = MatrixTrajectory::constant(sys.grid, Mat::from_element(1, 1, 0.2));
        let (pu, pv) = zero_policies(&sys);
        let m = propagate_mean(&sys, &pu, &pv, &InitialLaw::point(&[1.3])).unwrap();
        assert!((m.terminal()[0] - 1.3 * (-0.5f64).exp()).abs() <= 1e-8);
    }

    #[test]
    fn unit_cost() {
        let mut sys = fixtures::system("zero", 10);
        sys.q = MatrixTrajectory::constant(sys.grid, Mat::from_element(1, 1, 1.0));
        let (pu, pv) = zero_policies(&sys);
        let ens = simulate(&sys, &pu, &pv, &InitialLaw::point(&[1.0]), 4, 0).unwrap();
        let j2 = evaluate_cost(&ens, CostKind::J2);
        assert!((j2.value - 1.0).abs() < 1e-14 && j2.se == 0.0);
    }

    #[test]
    fn noiseless_paths_follow_the_mean() {
        let mut sys = fixtures::system("sysA", 400);
        for f in [&mut sys.a2, &mut sys.a2bar, &mut sys.b2, &mut sys.b2bar, &mut sys.c2, &mut sys.c2bar, &mut sys.sigma] {
            *f = MatrixTrajectory::zeros(sys.grid, 1, 1);
        }
        let pv = Policy::open_loop(MatrixTrajectory::constant(sys.grid, Mat::from_element(1, 1, 0.3)));
        let ens = simulate(&sys, &Policy::zero(1), &pv, &InitialLaw::point(&[0.5]), 8, 3).unwrap();
        for k in 0..=400 {
            assert!(ens.path_var_at(k)[0] <= 1e-20);
            // Euler against RK4
            assert!((ens.path_mean_at(k)[0] - ens.mean.at(k)[0]).abs() < 2e-3);
        }
    }

    #[test]
    fn moments_match_odes() {
        let sys = fixtures::system("sysA", 1000);
        let (pu, pv) = zero_policies(&sys);
        let law = fixtures::law("sysA");
        let ens = simulate(&sys, &pu, &pv, &law, 20_000, 11).unwrap();
        let c = sys.node(0);
        // variance ODE: V̇ = (2a1 + a2²)V + (ã2 m + σ)²
        let (a1, a2, a2t, sig) = (c.a1[0], c.a2[0], c.a2t[0], c.sigma[0]);
        let var = integrate_forward(
            |k, _, v| {
                let m = ens.mean.at(k.min(999))[0];
                Ok(Mat::from_element(1, 1, (2.0 * a1 + a2 * a2) * v[0] + (a2t * m + sig).powi(2)))
            },
            Mat::from_element(1, 1, 0.04),
            &sys.grid,
        )
        .unwrap();
        let np = ens.n_paths as f64;
        for k in (0..=1000).step_by(100) {
            let se = ens.mean_se(k, 0);
            assert!((ens.path_mean_at(k)[0] - ens.mean.at(k)[0]).abs() <= 5.0 * se, "mean at {k}");
            let v = var.at(k)[0];
            assert!((ens.path_var_at(k)[0] - v).abs() <= 5.0 * v * (2.0 / np).sqrt(), "var at {k}");
        }
    }

    #[test]
    fn reproducible_across_thread_counts() {
        let sys = fixtures::system("sysB", 100);
        let (pu, pv) = zero_policies(&sys);
        let law = fixtures::law("sysB");
        let run = |t: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .unwrap()
                .install(|| simulate(&sys, &pu, &pv, &law, 1000, 9).unwrap().to_csv())
        };
        let a = run(1);
        assert_eq!(a, run(3));
        assert_eq!(a, run(8));
        assert_ne!(a, simulate(&sys, &pu, &pv, &law, 1000, 10).unwrap().to_csv());
    }

    #[test]
    fn a_priori_bound_scales_quadratically() {
        let sys = fixtures::system("sysA", 200);
        let g = MatrixTrajectory::constant(sys.grid, Mat::from_element(1, 1, 0.2));
        let law = fixtures::law("sysA");
        let base = simulate(&sys, &Policy::open_loop(g.clone()), &Policy::open_loop(g.clone()), &law, 2000, 4).unwrap();
        let mut big = sys.clone();
        big.b = sys.b.map(|_, m| m * 2.0).unwrap();
        big.sigma = sys.sigma.map(|_, m| m * 2.0).unwrap();
        let g2 = g.map(|_, m| m * 2.0).unwrap();
        let law2 = InitialLaw::Gaussian { mean: Mat::from_element(1, 1, 1.0), cov: Mat::from_element(1, 1, 0.16) };
        let scaled = simulate(&big, &Policy::open_loop(g2.clone()), &Policy::open_loop(g2), &law2, 2000, 4).unwrap();
        let r = scaled.sup_sq().value / base.sup_sq().value;
        assert!((3.0..=5.0).contains(&r), "ratio {r}");
        assert!(base.sup_sq().value.is_finite());
    }

    #[test]
    fn particles_agree_with_exact_mean() {
        let sys = fixtures::system("sysA", 200);
        let sol = synthesize(&sys, 2.0, &fixtures::law("sysA"), &ClosedLoopOptions::default()).unwrap();
        let pu = Policy::feedback(sol.control_law());
        let pv = Policy::feedback(sol.disturbance_law());
        let law = fixtures::law("sysA");
        let exact = simulate(&sys, &pu, &pv, &law, 10_000, 2).unwrap();
        let part = simulate_particles(&sys, &pu, &pv, &law, 10_000, 2).unwrap();
        for k in (0..=200).step_by(20) {
            let se = exact.mean_se(k, 0);
            assert!((exact.path_mean_at(k)[0] - part.path_mean_at(k)[0]).abs() <= 5.0 * se);
        }
        let (a, b) = (evaluate_cost(&exact, CostKind::J2), evaluate_cost(&part, CostKind::J2));
        assert!((a.value - b.value).abs() <= 5.0 * a.se.hypot(b.se));
    }

    #[test]
    fn shadow_requires_reference() {
        let sys = fixtures::system("sysA", 10);
        let fb = AffineFeedback::zero(sys.grid, 1, 1);
        let r = simulate(&sys, &Policy::zero(1), &Policy::shadow(fb), &fixtures::law("sysA"), 10, 0);
        assert!(matches!(r, Err(Error::UnsupportedPolicy(_))));
    }

    #[test]
    fn reference_reproduces_itself() {
        let sys = fixtures::system("sysB", 100);
        let sol = synthesize(&sys, sys.gamma, &fixtures::law("sysB"), &ClosedLoopOptions::default()).unwrap();
        let reference = Reference { u: sol.control_law(), v: sol.disturbance_law() };
        let ens = simulate_with_reference(
            &sys,
            &Policy::feedback(sol.control_law()),
            &Policy::shadow(sol.disturbance_law()),
            &reference,
            &fixtures::law("sysB"),
            500,
            5,
        )
        .unwrap();
        for kind in [CostKind::J1, CostKind::J2] {
            let d = paired_difference(&ens, kind).unwrap();
            assert!(d.value.abs() < 1e-12 && d.se < 1e-12);
        }
    }

    #[test]
    fn interpolated_perturbation_matches_direct_run() {
        let sys = fixtures::system("sysB", 100);
        let law = fixtures::law("sysB");
        let sol = synthesize(&sys, sys.gamma, &law, &ClosedLoopOptions::default()).unwrap();
        let reference = Reference { u: sol.control_law(), v: sol.disturbance_law() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let [g, h] = random_probe(sys.grid, 1, &mut rng);
        let pu = Policy::feedback(sol.control_law());
        let unit = Policy::shadow(sol.disturbance_law()).with(g.clone()).with(h.clone());
        let sim = Simulator::new(&sys, &pu, &unit, Some(&reference), &law).unwrap();
        let eps = [0.5, -0.1];
        let fast = paired_deltas(&sim, CostKind::J1, &eps, 300, 8);
        for (e, f) in eps.iter().zip(fast) {
            let scale = |t: &PolicyTerm| match t {
                PolicyTerm::OpenLoop(x) => PolicyTerm::OpenLoop(x.map(|_, m| m * *e).unwrap()),
                PolicyTerm::Brownian(x) => PolicyTerm::Brownian(x.map(|_, m| m * *e).unwrap()),
                _ => unreachable!(),
            };
            let pv = Policy::shadow(sol.disturbance_law()).with(scale(&g)).with(scale(&h));
            let ens = simulate_with_reference(&sys, &pu, &pv, &reference, &law, 300, 8).unwrap();
            let d = paired_difference(&ens, CostKind::J1).unwrap();
            assert!((d.value - f.value).abs() <= 1e-10 * (1.0 + d.value.abs()));
            assert!((d.se - f.se).abs() <= 1e-8 * (1.0 + d.se));
        }
    }

    #[test]
    fn zero_fixture_nash_deltas_vanish_at_zero_eps() {
        let sys = fixtures::system("zero", 20);
        let sol = synthesize(&sys, 2.0, &InitialLaw::point(&[0.0]), &ClosedLoopOptions::default()).unwrap();
        let opts = NashOptions { n_perturb: 3, n_paths: 50, eps: vec![0.0], steps: 20, ..Default::default() };
        let rep = verify_nash(&sys, &sol, &InitialLaw::point(&[0.0]), &opts).unwrap();
        assert!(rep.probes.iter().all(|p| p.delta.value == 0.0));
        assert!(rep.passed());
    }

    #[test]
    fn gain_ratio_zero_without_output() {
        let sys = fixtures::system("zero", 50);
        let z = MatrixTrajectory::zeros(sys.grid, 2, 1);
        let r = estimate_gain_ratio(&sys, &z, &z, 3, 20, 0).unwrap();
        assert_eq!(r.max_ratio, 0.0);
    }
}

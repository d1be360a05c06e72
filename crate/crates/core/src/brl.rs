//! Bounded real lemma for the disturbance-to-output operator with `u = 0`.
//!
//! For a level γ the deviation/mean Riccati pair
//!
//! ```text
//! Ṗ = −(P A1 + A1ᵀP + A2ᵀP A2 − W_dev − Φ Λ⁻¹ Φᵀ),           Φ = P C1 + A2ᵀP C2,  Λ = γ²I + C2ᵀP C2
//! Π̇ = −(Π Ã1 + Ã1ᵀΠ + Ã2ᵀP Ã2 − W_mean − Φ̄ Λ̄⁻¹ Φ̄ᵀ),          Φ̄ = Π C̃1 + Ã2ᵀP C̃2, Λ̄ = γ²I + C̃2ᵀP C̃2
//! ```
//!
//! with `P(T) = Π(T) = 0` is integrated backward. `W_dev = W_mean = QᵀQ`
//! unless other output weights are supplied. The operator norm is below γ
//! exactly when the solution exists with Λ and Λ̄ uniformly positive.

use crate::error::{Error, InfeasibleReason, Result};
use crate::model::{AffineFeedback, InitialLaw, MFSystem, NodeCoefficients};
use crate::numerics::{
    dot, hstack, integrate_backward, max_abs, min_eig_sym, quad_form, trapezoid, Mat,
    MatrixTrajectory, Symmetry, TimeGrid,
};

#[derive(Debug, Clone)]
pub struct BrlOptions {
    /// Required lower bound on the eigenvalues of Λ and Λ̄.
    pub delta: f64,
    /// Output matrices `(Q_dev, Q_mean)` replacing `(Q, Q)`.
    pub weights: Option<(MatrixTrajectory, MatrixTrajectory)>,
}

impl Default for BrlOptions {
    fn default() -> Self {
        Self { delta: 1e-8, weights: None }
    }
}

impl BrlOptions {
    pub fn with_delta(delta: f64) -> Self {
        Self { delta, weights: None }
    }
}

#[derive(Debug, Clone)]
pub struct BrlKernels {
    pub lambda: MatrixTrajectory,
    pub lambda_bar: MatrixTrajectory,
    pub phi: MatrixTrajectory,
    pub phi_bar: MatrixTrajectory,
    /// Affine kernel of the deviation part; zero for deterministic affine terms.
    pub phi_aff: MatrixTrajectory,
    /// `φ̄ = C̃1ᵀη̄ + C̃2ᵀPσ`.
    pub phi_aff_bar: MatrixTrajectory,
}

#[derive(Debug, Clone)]
pub struct BrlSolution {
    pub gamma: f64,
    pub p: MatrixTrajectory,
    pub pi: MatrixTrajectory,
    pub kernels: BrlKernels,
    pub eta: MatrixTrajectory,
    pub eta_bar: MatrixTrajectory,
    pub feasible: bool,
    /// Smallest eigenvalue of Λ and Λ̄ over all nodes.
    pub delta: f64,
    /// `F = −Λ⁻¹Φᵀ`.
    pub gain: MatrixTrajectory,
    /// `F̄ = −Λ̄⁻¹Φ̄ᵀ`.
    pub gain_bar: MatrixTrajectory,
    /// `f = −Λ̄⁻¹φ̄` (the deviation offset vanishes).
    pub offset: MatrixTrajectory,
    w_dev: Vec<Mat>,
    w_mean: Vec<Mat>,
}

fn weight_matrices(sys: &MFSystem, opts: &BrlOptions) -> Result<(Vec<Mat>, Vec<Mat>)> {
    let gram = |t: &MatrixTrajectory| -> Result<Vec<Mat>> {
        if t.grid() != &sys.grid {
            return Err(Error::Dimension("output weights live on a different grid".into()));
        }
        if t.shape().1 != sys.n {
            return Err(Error::Dimension(format!("output weights need {} columns", sys.n)));
        }
        Ok(t.values().iter().map(|h| h.transpose() * h).collect())
    };
    match &opts.weights {
        Some((dev, mean)) => Ok((gram(dev)?, gram(mean)?)),
        None => {
            let w = gram(&sys.q)?;
            Ok((w.clone(), w))
        }
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

/// `Λ⁻¹·x` for a symmetric positive Λ.
fn spd_solve(lambda: &Mat, x: &Mat, time: f64) -> Result<Mat> {
    match lambda.clone().cholesky() {
        Some(ch) => Ok(ch.solve(x)),
        None => Err(Error::Infeasible { reason: InfeasibleReason::PositivityViolated, time }),
    }
}

struct Kernels {
    lambda: Mat,
    lambda_bar: Mat,
    phi: Mat,
    phi_bar: Mat,
}

fn kernels(c: &NodeCoefficients, gamma: f64, p: &Mat, pi: &Mat) -> Kernels {
    let g2 = gamma * gamma;
    let nv = c.c1.ncols();
    let id = Mat::identity(nv, nv);
    let pc2 = p * &c.c2;
    let pc2t = p * &c.c2t;
    Kernels {
        lambda: &id * g2 + c.c2.transpose() * &pc2,
        lambda_bar: &id * g2 + c.c2t.transpose() * &pc2t,
        phi: p * &c.c1 + c.a2.transpose() * pc2,
        phi_bar: pi * &c.c1t + c.a2t.transpose() * pc2t,
    }
}

/// Right-hand sides `(Ṗ, Π̇)` of the Riccati pair with frozen coefficients.
pub fn brl_rhs(
    c: &NodeCoefficients,
    gamma: f64,
    w_dev: &Mat,
    w_mean: &Mat,
    delta: f64,
    p: &Mat,
    pi: &Mat,
    time: f64,
) -> Result<(Mat, Mat)> {
    let k = kernels(c, gamma, p, pi);
    check_positive(&k.lambda, delta, time)?;
    check_positive(&k.lambda_bar, delta, time)?;
    let li_phit = spd_solve(&k.lambda, &k.phi.transpose(), time)?;
    let lbi_phibt = spd_solve(&k.lambda_bar, &k.phi_bar.transpose(), time)?;
    let dp = -(p * &c.a1 + c.a1.transpose() * p + c.a2.transpose() * p * &c.a2 - w_dev
        - &k.phi * li_phit);
    let dpi = -(pi * &c.a1t + c.a1t.transpose() * pi + c.a2t.transpose() * p * &c.a2t - w_mean
        - &k.phi_bar * lbi_phibt);
    Ok((dp, dpi))
}

/// Solve the Riccati pair at level γ together with the affine corrections.
pub fn brl_cdre_solve(sys: &MFSystem, gamma: f64, opts: &BrlOptions) -> Result<BrlSolution> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidInput(format!("gamma must be positive, got {gamma}")));
    }
    let n = sys.n;
    let grid = sys.grid;
    let coeffs = sys.nodes();
    let (w_dev, w_mean) = weight_matrices(sys, opts)?;
    let state = integrate_backward(
        |k, s, m| {
            let p = m.columns(0, n).into_owned();
            let pi = m.columns(n, n).into_owned();
            let (dp, dpi) = brl_rhs(&coeffs[k], gamma, &w_dev[k], &w_mean[k], opts.delta, &p, &pi, s)?;
            Ok(hstack(&[&dp, &dpi]))
        },
        Mat::zeros(n, 2 * n),
        &grid,
        Symmetry::Blocks(n),
    )
    .map_err(|e| match e {
        Error::NonFinite { time } => Error::Infeasible { reason: InfeasibleReason::Blowup, time },
        e => e,
    })?;
    let p = state.columns(0, n);
    let pi = state.columns(n, n);

    let mut lambda = Vec::with_capacity(grid.n_nodes());
    let mut lambda_bar = Vec::with_capacity(grid.n_nodes());
    let mut phi = Vec::with_capacity(grid.n_nodes());
    let mut phi_bar = Vec::with_capacity(grid.n_nodes());
    let mut gain = Vec::with_capacity(grid.n_nodes());
    let mut gain_bar = Vec::with_capacity(grid.n_nodes());
    let mut margin = f64::INFINITY;
    for k in 0..grid.n_nodes() {
        let s = grid.node(k);
        let kk = kernels(&coeffs[k], gamma, p.at(k), pi.at(k));
        margin = margin.min(min_eig_sym(&kk.lambda)).min(min_eig_sym(&kk.lambda_bar));
        check_positive(&kk.lambda, opts.delta, s)?;
        check_positive(&kk.lambda_bar, opts.delta, s)?;
        gain.push(-spd_solve(&kk.lambda, &kk.phi.transpose(), s)?);
        gain_bar.push(-spd_solve(&kk.lambda_bar, &kk.phi_bar.transpose(), s)?);
        lambda.push(kk.lambda);
        lambda_bar.push(kk.lambda_bar);
        phi.push(kk.phi);
        phi_bar.push(kk.phi_bar);
    }
    let nv = sys.n_v;
    let mut sol = BrlSolution {
        gamma,
        kernels: BrlKernels {
            lambda: MatrixTrajectory::new(grid, lambda)?,
            lambda_bar: MatrixTrajectory::new(grid, lambda_bar)?,
            phi: MatrixTrajectory::new(grid, phi)?,
            phi_bar: MatrixTrajectory::new(grid, phi_bar)?,
            phi_aff: MatrixTrajectory::zeros(grid, nv, 1),
            phi_aff_bar: MatrixTrajectory::zeros(grid, nv, 1),
        },
        p,
        pi,
        eta: MatrixTrajectory::zeros(grid, n, 1),
        eta_bar: MatrixTrajectory::zeros(grid, n, 1),
        feasible: true,
        delta: margin,
        gain: MatrixTrajectory::new(grid, gain)?,
        gain_bar: MatrixTrajectory::new(grid, gain_bar)?,
        offset: MatrixTrajectory::zeros(grid, nv, 1),
        w_dev,
        w_mean,
    };
    let (eta, eta_bar) = brl_affine_solve(sys, &sol)?;
    let mut phi_aff_bar = Vec::with_capacity(grid.n_nodes());
    let mut offset = Vec::with_capacity(grid.n_nodes());
    for k in 0..grid.n_nodes() {
        let c = &coeffs[k];
        let pb = c.c1t.transpose() * eta_bar.at(k) + c.c2t.transpose() * sol.p.at(k) * &c.sigma;
        offset.push(-spd_solve(sol.kernels.lambda_bar.at(k), &pb, grid.node(k))?);
        phi_aff_bar.push(pb);
    }
    sol.kernels.phi_aff_bar = MatrixTrajectory::new(grid, phi_aff_bar)?;
    sol.offset = MatrixTrajectory::new(grid, offset)?;
    sol.eta = eta;
    sol.eta_bar = eta_bar;
    Ok(sol)
}

/// Affine corrections `(η, η̄)`.
///
/// The deviation correction is driven only by the centered parts of `b` and
/// `σ`, which vanish for deterministic affine terms, so `η ≡ 0`. The mean
/// correction solves
///
/// ```text
/// η̄̇ = −[(Ã1 + C̃1F̄)ᵀη̄ + (Ã2 + C̃2F̄)ᵀPσ + Πb],   η̄(T) = 0.
/// ```
pub fn brl_affine_solve(sys: &MFSystem, sol: &BrlSolution) -> Result<(MatrixTrajectory, MatrixTrajectory)> {
    let grid = sys.grid;
    let n = sys.n;
    let coeffs = sys.nodes();
    let dt = grid.dt();
    // Stage values of P, Π and F̄ come from the Hermite interpolant of the
    // Riccati solution so that the affine solve keeps fourth-order accuracy.
    let eta_bar = integrate_backward(
        |k, s, e| {
            let c = &coeffs[k];
            let theta = (s - grid.node(k)) / dt;
            let p = sol.p.eval_in_interval(k, theta);
            let pi = sol.pi.eval_in_interval(k, theta);
            let kk = kernels(c, sol.gamma, &p, &pi);
            let fbar = -spd_solve(&kk.lambda_bar, &kk.phi_bar.transpose(), s)?;
            let a = &c.a1t + &c.c1t * &fbar;
            let d = &c.a2t + &c.c2t * &fbar;
            Ok(-(a.transpose() * e + d.transpose() * (&p * &c.sigma) + &pi * &c.b))
        },
        Mat::zeros(n, 1),
        &grid,
        Symmetry::None,
    )?;
    Ok((MatrixTrajectory::zeros(grid, n, 1), eta_bar))
}

impl BrlSolution {
    pub fn grid(&self) -> &TimeGrid {
        self.p.grid()
    }

    /// Worst-case disturbance `v* = F(x − m) + F̄m + f` at time `s`.
    pub fn worst_disturbance(&self, x: &Mat, m: &Mat, s: f64) -> Mat {
        self.gain.eval(s) * (x - m) + self.gain_bar.eval(s) * m + self.offset.eval(s)
    }

    /// The worst-case disturbance as `V x + V̄ E[x] + V0` with `V = F`,
    /// `V̄ = F̄ − F`, `V0 = f`.
    pub fn disturbance_law(&self) -> AffineFeedback {
        AffineFeedback {
            gain: self.gain.clone(),
            gain_bar: self.gain_bar.zip_map(&self.gain, |a, b| a - b).expect("same grid"),
            offset: self.offset.clone(),
        }
    }

    /// Optimal cost
    /// `tr(P(t0)Σξ) + ⟨Π(t0)Eξ, Eξ⟩ + 2⟨η̄(t0), Eξ⟩ + ∫ σᵀPσ + 2⟨η̄, b⟩ − φ̄ᵀΛ̄⁻¹φ̄ ds`.
    pub fn optimal_cost(&self, sys: &MFSystem, law: &InitialLaw) -> f64 {
        let grid = self.grid();
        let mean = law.mean();
        let cov = law.covariance();
        let head = (self.p.initial() * &cov).trace()
            + quad_form(self.pi.initial(), &mean)
            + 2.0 * dot(self.eta_bar.initial(), &mean);
        let integrand: Vec<f64> = (0..grid.n_nodes())
            .map(|k| {
                let sigma = sys.sigma.at(k);
                let pb = self.kernels.phi_aff_bar.at(k);
                // −φ̄ᵀΛ̄⁻¹φ̄ = φ̄ᵀf
                quad_form(self.p.at(k), sigma) + 2.0 * dot(self.eta_bar.at(k), sys.b.at(k))
                    + dot(pb, self.offset.at(k))
            })
            .collect();
        head + trapezoid(&integrand, grid.dt())
    }

    /// Relative mismatch between the central-difference derivative of
    /// `(P, Π)` at interior node `k` and the Riccati right-hand side.
    pub fn riccati_residual(&self, sys: &MFSystem, k: usize) -> f64 {
        let grid = self.grid();
        assert!(k > 0 && k < grid.steps(), "interior node required");
        let h = grid.dt();
        let c = sys.node(k);
        let (dp, dpi) = brl_rhs(
            &c,
            self.gamma,
            &self.w_dev[k],
            &self.w_mean[k],
            f64::NEG_INFINITY,
            self.p.at(k),
            self.pi.at(k),
            grid.node(k),
        )
        .expect("feasible solution");
        let cd_p = (self.p.at(k + 1) - self.p.at(k - 1)) / (2.0 * h);
        let cd_pi = (self.pi.at(k + 1) - self.pi.at(k - 1)) / (2.0 * h);
        relative_mismatch(&[(&cd_p, &dp), (&cd_pi, &dpi)])
    }

    /// Largest `‖M − Mᵀ‖∞` over P and Π at every node.
    pub fn asymmetry(&self) -> f64 {
        self.p
            .values()
            .iter()
            .chain(self.pi.values())
            .map(|m| max_abs(&(m - m.transpose())))
            .fold(0.0, f64::max)
    }
}

/// `max ‖a − b‖∞ / max ‖b‖∞` over the pairs; zero when everything vanishes.
pub fn relative_mismatch(pairs: &[(&Mat, &Mat)]) -> f64 {
    let diff = pairs.iter().map(|(a, b)| max_abs(&(*a - *b))).fold(0.0, f64::max);
    let scale = pairs.iter().map(|(_, b)| max_abs(b)).fold(0.0, f64::max);
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(1e-12)
    }
}

/// Whether the Riccati pair is solvable at γ. Errors other than
/// infeasibility are propagated.
pub fn brl_feasible(sys: &MFSystem, gamma: f64, opts: &BrlOptions) -> Result<bool> {
    match brl_cdre_solve(sys, gamma, opts) {
        Ok(_) => Ok(true),
        Err(e) if e.is_infeasible() => Ok(false),
        Err(e) => Err(e),
    }
}

/// Upper end of the doubling search.
pub const GAMMA_CEILING: f64 = 1_048_576.0;

/// Smallest feasible γ up to `tol`, by doubling from 1 and bisecting on
/// `[0, γ_hi]`.
pub fn hinf_norm(sys: &MFSystem, tol: f64, opts: &BrlOptions) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("bisection tolerance must be positive, got {tol}")));
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut min_feasible = f64::INFINITY;
    let mut max_infeasible = 0.0f64;
    let probe = |g: f64, min_feasible: &mut f64, max_infeasible: &mut f64| -> Result<bool> {
        let ok = brl_feasible(sys, g, opts)?;
        if ok {
            *min_feasible = min_feasible.min(g);
        } else {
            *max_infeasible = max_infeasible.max(g);
        }
        if *max_infeasible >= *min_feasible {
            return Err(Error::NonMonotone { feasible: *min_feasible, infeasible: *max_infeasible });
        }
        Ok(ok)
    };
    while !probe(hi, &mut min_feasible, &mut max_infeasible)? {
        lo = hi;
        hi *= 2.0;
        if hi > GAMMA_CEILING {
            return Err(Error::NoUpperBound { gamma_hi: GAMMA_CEILING });
        }
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if probe(mid, &mut min_feasible, &mut max_infeasible)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{fixtures, ConstantCoefficients};

    fn scalar(x: f64) -> Mat {
        Mat::from_element(1, 1, x)
    }

    #[test]
    fn zero_weight_gives_zero_solution() {
        let sys = fixtures::system("zero", 200);
        for gamma in [0.5, 2.0] {
            let sol = brl_cdre_solve(&sys, gamma, &BrlOptions::default()).unwrap();
            assert_eq!(sol.p.max_abs(), 0.0);
            assert_eq!(sol.pi.max_abs(), 0.0);
            assert!((sol.kernels.lambda.at(0)[(0, 0)] - gamma * gamma).abs() < 1e-15);
            assert_eq!(sol.gain.max_abs() + sol.gain_bar.max_abs() + sol.offset.max_abs(), 0.0);
            assert_eq!(sol.optimal_cost(&sys, &InitialLaw::point(&[0.0])), 0.0);
        }
    }

    #[test]
    fn pure_integration_closed_form() {
        let g = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let mut c = ConstantCoefficients::zeros(1, 1, 1);
        c.q = scalar(1.0);
        let sys = MFSystem::constant(c, g, 1.0).unwrap();
        let sol = brl_cdre_solve(&sys, 1.0, &BrlOptions::default()).unwrap();
        for (k, s) in g.nodes().enumerate() {
            assert!((sol.p.at(k)[(0, 0)] + (1.0 - s)).abs() < 1e-13);
            assert!((sol.pi.at(k)[(0, 0)] - sol.p.at(k)[(0, 0)]).abs() < 1e-13);
        }
    }

    #[test]
    fn zero_plant_with_drift_keeps_affine_zero() {
        let mut sys = fixtures::system("zero", 100);
        sys.b = MatrixTrajectory::constant(sys.grid, scalar(1.0));
        let sol = brl_cdre_solve(&sys, 1.0, &BrlOptions::default()).unwrap();
        assert_eq!(sol.eta.max_abs() + sol.eta_bar.max_abs(), 0.0);
    }

    #[test]
    fn no_affine_terms_no_corrections() {
        let sys = fixtures::system("sysA", 500).without_affine();
        let sol = brl_cdre_solve(&sys, 2.0, &BrlOptions::default()).unwrap();
        assert_eq!(sol.eta_bar.max_abs(), 0.0);
        let law = InitialLaw::point(&[0.7]);
        let expect = 0.49 * sol.pi.initial()[(0, 0)];
        assert!((sol.optimal_cost(&sys, &law) - expect).abs() < 1e-15);
    }

    #[test]
    fn worst_disturbance_on_the_mean() {
        let sys = fixtures::system("sysA", 400).without_affine();
        let sol = brl_cdre_solve(&sys, 2.0, &BrlOptions::default()).unwrap();
        let m = scalar(0.3);
        let v = sol.worst_disturbance(&m, &m, 0.25);
        assert!((v - sol.gain_bar.eval(0.25) * &m).amax() < 1e-15);
    }

    #[test]
    fn sys_a_terminal_symmetry_and_residual() {
        let sys = fixtures::system("sysA", 2000);
        let sol = brl_cdre_solve(&sys, 2.0, &BrlOptions::default()).unwrap();
        assert_eq!(sol.p.terminal().amax(), 0.0);
        assert_eq!(sol.pi.terminal().amax(), 0.0);
        assert!(sol.asymmetry() <= 1e-10);
        for k in [1, 100, 777, 1500, 1999] {
            assert!(sol.riccati_residual(&sys, k) <= 1e-6);
        }
        assert!(sol.delta >= 1e-8);
    }

    #[test]
    fn planar_symmetry_and_residual() {
        let sys = fixtures::system("sysB", 1000);
        let sol = brl_cdre_solve(&sys, sys.gamma, &BrlOptions::default()).unwrap();
        assert!(sol.asymmetry() <= 1e-10);
        for k in [3, 400, 999] {
            assert!(sol.riccati_residual(&sys, k) <= 1e-6);
        }
    }

    #[test]
    fn mean_field_collapse() {
        let sys = fixtures::system("nomf", 2000);
        let sol = brl_cdre_solve(&sys, 2.0, &BrlOptions::default()).unwrap();
        assert!(sol.p.max_abs_diff(&sol.pi) <= 1e-8);
    }

    #[test]
    fn affine_corrections_step_halving() {
        let a = brl_cdre_solve(&fixtures::system("sysA", 2000), 2.0, &BrlOptions::default()).unwrap();
        let b = brl_cdre_solve(&fixtures::system("sysA", 4000), 2.0, &BrlOptions::default()).unwrap();
        assert!((a.eta_bar.initial() - b.eta_bar.initial()).amax() <= 1e-8);
        assert!((a.p.initial() - b.p.initial()).amax() <= 1e-8);
        assert!(a.eta_bar.initial().amax() > 0.0);
    }

    #[test]
    fn small_gamma_is_infeasible() {
        let sys = fixtures::system("sysA", 500);
        let err = brl_cdre_solve(&sys, 0.01, &BrlOptions::default()).unwrap_err();
        assert!(err.is_infeasible(), "{err:?}");
    }

    #[test]
    fn zero_output_has_zero_norm() {
        let sys = fixtures::system("zero", 100);
        assert!(hinf_norm(&sys, 1e-3, &BrlOptions::default()).unwrap() <= 1e-3);
        let mut decoupled = fixtures::system("sysA", 200);
        for c in [&mut decoupled.c1, &mut decoupled.c2, &mut decoupled.c1bar, &mut decoupled.c2bar] {
            *c = MatrixTrajectory::zeros(decoupled.grid, 1, 1);
        }
        assert!(hinf_norm(&decoupled, 1e-3, &BrlOptions::default()).unwrap() <= 1e-3);
    }

    #[test]
    fn hinf_norm_brackets() {
        let sys = fixtures::system("sysA", 500);
        let tol = 1e-4;
        let g = hinf_norm(&sys, tol, &BrlOptions::default()).unwrap();
        assert!(brl_feasible(&sys, g + tol, &BrlOptions::default()).unwrap());
        assert!(!brl_feasible(&sys, g - tol, &BrlOptions::default()).unwrap());
    }

    #[test]
    fn weights_replace_output() {
        let sys = fixtures::system("sysA", 300);
        let q = sys.q.clone();
        let opts = BrlOptions { delta: 1e-8, weights: Some((q.clone(), q)) };
        let a = brl_cdre_solve(&sys, 2.0, &opts).unwrap();
        let b = brl_cdre_solve(&sys, 2.0, &BrlOptions::default()).unwrap();
        assert_eq!(a.p.max_abs_diff(&b.p), 0.0);
        let doubled = sys.q.map(|_, m| m * 2.0).unwrap();
        let opts = BrlOptions { delta: 1e-8, weights: Some((doubled.clone(), doubled)) };
        let c = brl_cdre_solve(&sys, 4.0, &opts).unwrap();
        // Scaling the output by 2 and γ by 2 scales (P, Π) by 4.
        assert!((c.p.initial() - b.p.initial() * 4.0).amax() < 1e-10);
    }
}

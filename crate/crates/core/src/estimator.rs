//! Penalized maximum-likelihood estimation of the VECM by alternating block
//! updates, plus Johansen's closed-form reduced-rank estimator.
//!
//! The penalized negative log-likelihood is
//!
//! ```text
//! (1/n) tr(R Ω R') − log|Ω| + Σⱼ λ₁ⱼ Σᵢ wᵢⱼ|βᵢⱼ| + λ₂‖Γ‖² + λ₃ Σ_{k≠k'} |Ω_kk'|
//! ```
//!
//! with `R = Y − XΓ − Zβα'`, `n = T − p` and the normalization `α'Ωα = I_r`.
//! One outer iteration updates Γ (ridge), α (weighted Procrustes), β (lasso)
//! and Ω (graphical lasso) in that order.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen, SVD};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::solvers::{
    graphical_lasso, lasso_multivariate, log_det_spd, matrix_inv_sqrt_spd, matrix_sqrt_spd,
    pseudo_inverse, ridge_multivariate, symmetrize, GlassoOptions, LassoOptions, LassoWeights,
    DEFAULT_RANK_TOL,
};
use crate::vecm::{demean_columns, BetaPenalty, PenaltyConfig, VecmDesign};

/// Estimated VECM parameters.
///
/// `alpha` and `beta` are stored in the `α'Ωα = I` normalization used by the
/// algorithm; [`CointegrationFit::normalized`] gives the leading-one form used
/// for reporting.
#[derive(Debug, Clone, Serialize)]
pub struct CointegrationFit {
    pub alpha: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    pub rank: usize,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when a cointegrating vector was penalized to zero.
    pub degenerate: bool,
    /// λ₁ actually used per vector (after any degenerate-column relaxation).
    pub lambda1: Vec<f64>,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Objective value after every block update.
    #[serde(skip)]
    pub trace: Vec<BlockRecord>,
}

impl CointegrationFit {
    /// `Π = αβ'`.
    pub fn pi(&self) -> DMatrix<f64> {
        &self.alpha * self.beta.transpose()
    }

    /// `(α, β)` rescaled so the first nonzero entry of every β column is one;
    /// Π is unchanged.
    pub fn normalized(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        normalize_leading_one(&self.alpha, &self.beta)
    }

    /// Residuals `Y − XΓ − ZΠ'`.
    pub fn residuals(&self, design: &VecmDesign) -> DMatrix<f64> {
        residuals(design, &self.gamma, &self.alpha, &self.beta)
    }
}

/// Estimation method for the cointegrating vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Johansen,
    SparseLasso,
    SparseAdaptiveLasso,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Johansen, Method::SparseLasso, Method::SparseAdaptiveLasso];

    pub fn name(self) -> &'static str {
        match self {
            Method::Johansen => "johansen",
            Method::SparseLasso => "sparse_lasso",
            Method::SparseAdaptiveLasso => "sparse_adaptive_lasso",
        }
    }

    /// Penalty on β for the sparse methods.
    pub fn beta_penalty(self) -> Option<BetaPenalty> {
        match self {
            Method::Johansen => None,
            Method::SparseLasso => Some(BetaPenalty::Lasso),
            Method::SparseAdaptiveLasso => Some(BetaPenalty::AdaptiveLasso),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which update produced a [`BlockRecord`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Block {
    Start,
    Gamma,
    Alpha,
    Beta,
    Omega,
}

/// Which pass of the estimator produced a [`BlockRecord`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Pass {
    /// Ridge penalty on β, used for starting values.
    WarmStart,
    Lasso,
    AdaptiveLasso,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BlockRecord {
    pub pass: Pass,
    /// Index of the pass instance; a new instance starts whenever the
    /// objective changes (new weights or relaxed λ₁).
    pub segment: usize,
    pub iteration: usize,
    pub block: Block,
    pub objective: f64,
}

#[derive(Debug, Clone)]
struct State {
    gamma: DMatrix<f64>,
    alpha: DMatrix<f64>,
    beta: DMatrix<f64>,
    omega: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy)]
enum BetaStep<'a> {
    Ridge(f64),
    Lasso {
        lambda1: &'a [f64],
        weights: Option<&'a LassoWeights>,
    },
}

struct Penalties<'a> {
    beta: BetaStep<'a>,
    lambda2: f64,
    lambda3: f64,
    penalize_intercept: bool,
}

struct PassOutcome {
    iterations: usize,
    converged: bool,
}

/// Γ-step: minimizes `(1/n) tr((Ỹ − XΓ)Ω(Ỹ − XΓ)') + λ₂‖Γ‖²` with `Ỹ = Y − ZΠ'`.
///
/// The stationarity condition `X'X Γ Ω + nλ₂Γ = X'ỸΩ` is solved exactly by
/// diagonalizing `X'X` and `Ω`; this is the same linear system as the
/// nq-dimensional Kronecker ridge regression. When `penalize_intercept` is
/// false and the design has an intercept, the constant row is profiled out.
pub fn solve_gamma(
    design: &VecmDesign,
    pi: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    lambda2: f64,
    penalize_intercept: bool,
) -> Result<DMatrix<f64>> {
    let q = design.nseries();
    if design.n_short_run() == 0 {
        return Ok(DMatrix::zeros(0, q));
    }
    let target = &design.y - &design.z * pi.transpose();
    let exempt = design.intercept && !penalize_intercept;
    ridge_gamma(&design.x, &target, omega, lambda2, exempt)
}

/// Weighted ridge regression of `target` on `x` with error precision Ω,
/// `min (1/n) tr((T − XΓ)Ω(T − XΓ)') + λ₂‖Γ‖²`. With `exempt_last` the last
/// column of `x` is a constant whose coefficient row is not penalized.
pub fn ridge_gamma(
    x: &DMatrix<f64>,
    target: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    lambda2: f64,
    exempt_last: bool,
) -> Result<DMatrix<f64>> {
    let (n, k) = (x.nrows(), x.ncols());
    let q = target.ncols();
    if k == 0 {
        return Ok(DMatrix::zeros(0, q));
    }
    let nf = n as f64;
    if exempt_last {
        let k0 = k - 1;
        let means_t = column_means(target);
        if k0 == 0 {
            let mut g = DMatrix::zeros(1, q);
            g.set_row(0, &means_t);
            return Ok(g);
        }
        let xo = x.columns(0, k0).into_owned();
        let means_x = column_means(&xo);
        let xc = center(&xo, &means_x);
        let tc = center(target, &means_t);
        let go = sylvester_ridge(&xc.tr_mul(&xc), &xc.tr_mul(&tc), omega, nf * lambda2)?;
        let c = &means_t - &means_x * &go;
        let mut g = DMatrix::zeros(k, q);
        g.rows_mut(0, k0).copy_from(&go);
        g.set_row(k0, &c);
        return Ok(g);
    }
    sylvester_ridge(&x.tr_mul(x), &x.tr_mul(target), omega, nf * lambda2)
}

/// Solves `A G Ω + λG = B Ω` for symmetric PSD `A` and SPD `Ω`.
fn sylvester_ridge(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    if lambda == 0.0 {
        return Ok(pseudo_inverse(a, DEFAULT_RANK_TOL) * b);
    }
    let ea = SymmetricEigen::new(symmetrize(a));
    let eo = SymmetricEigen::new(symmetrize(omega));
    let (u, d) = (&ea.eigenvectors, &ea.eigenvalues);
    let (v, e) = (&eo.eigenvectors, &eo.eigenvalues);
    if e.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::NotPositiveDefinite("Ω in Γ-step".into()));
    }
    let c = u.transpose() * b * omega * v;
    let g = DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| {
        c[(i, j)] / (d[i].max(0.0) * e[j] + lambda)
    });
    Ok(u * g * v.transpose())
}

/// α-step: the weighted Procrustes problem
/// `min (1/n) tr((Ỹ − Zβα')Ω(Ỹ − Zβα')')` subject to `α'Ωα = I`.
///
/// Returns `Ω^{-1/2} P Q'` where `Ω^{1/2} Ỹ'Zβ = P D Q'`, and a flag set when
/// the cross-product is rank deficient (the solution is then not unique).
pub fn solve_alpha(
    design: &VecmDesign,
    gamma: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    beta: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, bool)> {
    alpha_with_hint(design, gamma, omega, beta, None)
}

/// α-step that keeps the columns of `current` where β is exactly zero: the
/// objective does not depend on them, and an arbitrary completion would steer
/// the next β-step.
fn alpha_with_hint(
    design: &VecmDesign,
    gamma: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    current: Option<&DMatrix<f64>>,
) -> Result<(DMatrix<f64>, bool)> {
    let y_tilde = short_run_residual(design, gamma);
    let sqrt_omega = matrix_sqrt_spd(omega)?;
    let inv_sqrt_omega = matrix_inv_sqrt_spd(omega)?;
    let m = &sqrt_omega * y_tilde.tr_mul(&(&design.z * beta));
    let r = beta.ncols();
    let zero: Vec<usize> = (0..r).filter(|&j| beta.column(j).iter().all(|&v| v == 0.0)).collect();
    let Some(current) = current.filter(|c| !zero.is_empty() && c.iter().any(|&v| v != 0.0)) else {
        let (orth, degenerate) = procrustes_factor(&m);
        return Ok((inv_sqrt_omega * orth, degenerate));
    };
    let live: Vec<usize> = (0..r).filter(|j| !zero.contains(j)).collect();
    let q = m.nrows();
    let mut orth = DMatrix::zeros(q, r);
    let mut degenerate = true;
    if !live.is_empty() {
        let (sub, deg) = procrustes_factor(&m.select_columns(&live));
        degenerate = deg;
        for (k, &j) in live.iter().enumerate() {
            orth.set_column(j, &sub.column(k));
        }
    }
    let star = &sqrt_omega * current;
    let mut seed = orth.select_columns(&live);
    for &j in &zero {
        let with = DMatrix::from_columns(
            &seed.column_iter().chain(std::iter::once(star.column(j))).collect::<Vec<_>>(),
        );
        let done = complete_orthonormal(&with, q, seed.ncols() + 1);
        orth.set_column(j, &done.column(seed.ncols()));
        seed = done;
    }
    Ok((inv_sqrt_omega * orth, degenerate))
}

/// Orthonormal `P Q'` maximizing `tr(A'M)` over q×r matrices with orthonormal
/// columns.
fn procrustes_factor(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let (q, r) = m.shape();
    let svd = SVD::new(m.clone(), true, true);
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > 1e-12 * smax.max(f64::MIN_POSITIVE))
        .count();
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let mut orth = u * vt;
    let degenerate = rank < r;
    if degenerate || (orth.tr_mul(&orth) - DMatrix::identity(r, r)).amax() > 1e-8 {
        orth = complete_orthonormal(&orth, q, r);
    }
    (orth, degenerate)
}

/// Gram–Schmidt over the columns of `a` followed by unit vectors, keeping r.
fn complete_orthonormal(a: &DMatrix<f64>, q: usize, r: usize) -> DMatrix<f64> {
    let mut basis: Vec<nalgebra::DVector<f64>> = Vec::with_capacity(r);
    let candidates = (0..a.ncols())
        .map(|j| a.column(j).into_owned())
        .chain((0..q).map(|i| {
            let mut e = nalgebra::DVector::zeros(q);
            e[i] = 1.0;
            e
        }));
    for mut v in candidates {
        if basis.len() == r {
            break;
        }
        for b in &basis {
            let proj = b.dot(&v);
            v.axpy(-proj, b, 1.0);
        }
        let norm = v.norm();
        if norm > 1e-8 {
            basis.push(v / norm);
        }
    }
    DMatrix::from_columns(&basis)
}

/// β-step: the (adaptive) lasso regression of `ỸΩα` on `Z`.
///
/// Requires `α'Ωα = I` for the reduction to hold. Returns the new β and
/// whether the inner solver converged.
#[allow(clippy::too_many_arguments)]
pub fn solve_beta(
    design: &VecmDesign,
    gamma: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    alpha: &DMatrix<f64>,
    lambda1: &[f64],
    penalty: BetaPenalty,
    weights: Option<&LassoWeights>,
    init: Option<&DMatrix<f64>>,
    opts: LassoOptions,
) -> Result<(DMatrix<f64>, bool)> {
    let target = short_run_residual(design, gamma) * omega * alpha;
    match penalty {
        BetaPenalty::Ridge => {
            let lambda = lambda1.first().copied().unwrap_or(0.0);
            let n = design.nobs() as f64;
            Ok((ridge_multivariate(&design.z, &target, n * lambda)?, true))
        }
        BetaPenalty::Lasso | BetaPenalty::AdaptiveLasso => {
            let fit = lasso_multivariate(&design.z, &target, lambda1, weights, init, opts)?;
            Ok((fit.coef, fit.converged))
        }
    }
}

/// Ω-step without reparametrization: graphical lasso of the residual covariance.
pub fn solve_omega(
    design: &VecmDesign,
    gamma: &DMatrix<f64>,
    pi: &DMatrix<f64>,
    lambda3: f64,
) -> Result<DMatrix<f64>> {
    let r = &design.y - &design.x * gamma - &design.z * pi.transpose();
    let s = r.tr_mul(&r) / design.nobs() as f64;
    graphical_lasso(&s, lambda3, GlassoOptions::default())
}

/// Value of the penalized negative log-likelihood.
#[allow(clippy::too_many_arguments)]
pub fn penalized_objective(
    design: &VecmDesign,
    gamma: &DMatrix<f64>,
    alpha: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    lambda1: &[f64],
    weights: Option<&LassoWeights>,
    lambda2: f64,
    lambda3: f64,
    penalize_intercept: bool,
) -> Result<f64> {
    let st = State {
        gamma: gamma.clone(),
        alpha: alpha.clone(),
        beta: beta.clone(),
        omega: omega.clone(),
    };
    let pens = Penalties {
        beta: BetaStep::Lasso { lambda1, weights },
        lambda2,
        lambda3,
        penalize_intercept,
    };
    objective(design, &st, &pens)
}

fn objective(design: &VecmDesign, st: &State, pens: &Penalties) -> Result<f64> {
    let r = residuals(design, &st.gamma, &st.alpha, &st.beta);
    let n = design.nobs() as f64;
    let fit = (&r * &st.omega).component_mul(&r).sum() / n;
    let logdet = log_det_spd(&st.omega)?;

    let beta_pen = match pens.beta {
        BetaStep::Ridge(l) => l * st.beta.norm_squared(),
        BetaStep::Lasso { lambda1, weights } => {
            let mut acc = 0.0;
            for j in 0..st.beta.ncols() {
                for i in 0..st.beta.nrows() {
                    let b = st.beta[(i, j)];
                    if b == 0.0 {
                        continue;
                    }
                    let w = weights.map_or(1.0, |w| w.matrix()[(i, j)]);
                    acc += lambda1[j] * w * b.abs();
                }
            }
            acc
        }
    };

    let gamma_rows = if design.intercept && !pens.penalize_intercept {
        st.gamma.nrows().saturating_sub(1)
    } else {
        st.gamma.nrows()
    };
    let gamma_pen = pens.lambda2 * st.gamma.rows(0, gamma_rows).norm_squared();

    let q = st.omega.nrows();
    let mut off = 0.0;
    for i in 0..q {
        for j in 0..q {
            if i != j {
                off += st.omega[(i, j)].abs();
            }
        }
    }
    Ok(fit - logdet + beta_pen + gamma_pen + pens.lambda3 * off)
}

fn residuals(
    design: &VecmDesign,
    gamma: &DMatrix<f64>,
    alpha: &DMatrix<f64>,
    beta: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut r = short_run_residual(design, gamma);
    r -= (&design.z * beta) * alpha.transpose();
    r
}

fn short_run_residual(design: &VecmDesign, gamma: &DMatrix<f64>) -> DMatrix<f64> {
    if design.x.ncols() == 0 {
        design.y.clone()
    } else {
        &design.y - &design.x * gamma
    }
}

/// Rescales `(α, β)` to `(αK^{-1/2}, βK^{1/2})` with `K = α'Ωα`, leaving Π intact.
fn renormalize(
    alpha: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    omega: &DMatrix<f64>,
) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let k = alpha.tr_mul(&(omega * alpha));
    let k_half = matrix_sqrt_spd(&k).ok()?;
    let k_inv_half = matrix_inv_sqrt_spd(&k).ok()?;
    Some((alpha * k_inv_half, beta * k_half))
}

struct Engine<'d> {
    design: &'d VecmDesign,
    config: &'d PenaltyConfig,
    trace: Vec<BlockRecord>,
    segment: usize,
}

impl<'d> Engine<'d> {
    fn new(design: &'d VecmDesign, config: &'d PenaltyConfig) -> Self {
        Self {
            design,
            config,
            trace: Vec::new(),
            segment: 0,
        }
    }

    fn record(&mut self, pass: Pass, iteration: usize, block: Block, value: f64) {
        self.trace.push(BlockRecord {
            pass,
            segment: self.segment,
            iteration,
            block,
            objective: value,
        });
    }

    fn gamma_step(&self, st: &mut State, pens: &Penalties) -> Result<()> {
        let pi = &st.alpha * st.beta.transpose();
        st.gamma = solve_gamma(self.design, &pi, &st.omega, pens.lambda2, pens.penalize_intercept)?;
        Ok(())
    }

    fn alpha_step(&self, st: &mut State) -> Result<bool> {
        let (alpha, degenerate) = alpha_with_hint(self.design, &st.gamma, &st.omega, &st.beta, Some(&st.alpha))?;
        st.alpha = alpha;
        Ok(degenerate)
    }

    fn beta_step(&self, st: &mut State, pens: &Penalties) -> Result<bool> {
        let opts = LassoOptions {
            tol: self.config.tol_inner,
            max_iter: self.config.max_inner_iter,
        };
        let (beta, ok) = match pens.beta {
            BetaStep::Ridge(l) => solve_beta(
                self.design,
                &st.gamma,
                &st.omega,
                &st.alpha,
                &[l],
                BetaPenalty::Ridge,
                None,
                None,
                opts,
            )?,
            BetaStep::Lasso { lambda1, weights } => solve_beta(
                self.design,
                &st.gamma,
                &st.omega,
                &st.alpha,
                lambda1,
                BetaPenalty::Lasso,
                weights,
                Some(&st.beta),
                opts,
            )?,
        };
        st.beta = beta;
        Ok(ok)
    }

    /// Graphical lasso followed by the Π-preserving renormalization of (α, β).
    ///
    /// Under the normalization the β penalty depends on Ω, so the move towards
    /// the graphical-lasso solution is backtracked until the full objective
    /// does not increase.
    fn omega_step(&self, st: &mut State, pens: &Penalties) -> Result<()> {
        let pi = &st.alpha * st.beta.transpose();
        let target = solve_omega(self.design, &st.gamma, &pi, pens.lambda3)?;
        let current = objective(self.design, st, pens)?;
        let slack = 1e-12 * current.abs().max(1.0);
        let mut t = 1.0;
        for _ in 0..30 {
            let omega = if t == 1.0 {
                target.clone()
            } else {
                &st.omega * (1.0 - t) + &target * t
            };
            if let Some((alpha, beta)) = renormalize(&st.alpha, &st.beta, &omega) {
                let cand = State {
                    gamma: st.gamma.clone(),
                    alpha,
                    beta,
                    omega,
                };
                if objective(self.design, &cand, pens)? <= current + slack {
                    *st = cand;
                    return Ok(());
                }
            } else if t == 1.0 {
                // α is rank deficient: plain update, Π does not depend on the scale
                st.omega = omega;
                return Ok(());
            }
            t *= 0.5;
        }
        Ok(())
    }

    /// Runs outer iterations until the cointegration space stabilizes.
    fn run_pass(
        &mut self,
        st: &mut State,
        pens: &Penalties,
        pass: Pass,
        skip_first_gamma: bool,
    ) -> Result<PassOutcome> {
        self.segment += 1;
        if !skip_first_gamma {
            let v = objective(self.design, st, pens)?;
            self.record(pass, 0, Block::Start, v);
        }
        let mut converged = false;
        let mut iterations = 0;
        for iter in 1..=self.config.max_outer_iter {
            iterations = iter;
            let beta_prev = st.beta.clone();
            let pi_prev = &st.alpha * st.beta.transpose();
            if !(iter == 1 && skip_first_gamma) {
                self.gamma_step(st, pens)?;
                let v = objective(self.design, st, pens)?;
                self.record(pass, iter, Block::Gamma, v);
            }
            self.alpha_step(st)?;
            let v = objective(self.design, st, pens)?;
            self.record(pass, iter, Block::Alpha, v);
            if !self.beta_step(st, pens)? {
                log::debug!("inner lasso did not converge at outer iteration {iter}");
            }
            let v = objective(self.design, st, pens)?;
            self.record(pass, iter, Block::Beta, v);
            self.omega_step(st, pens)?;
            let v = objective(self.design, st, pens)?;
            self.record(pass, iter, Block::Omega, v);

            // an iteration without a Γ step cannot certify convergence
            let moved = if iter == 1 && skip_first_gamma {
                f64::INFINITY
            } else if st.beta.ncols() == st.beta.nrows() {
                // β spans everything at full rank; track Π instead
                let pi = &st.alpha * st.beta.transpose();
                (&pi - &pi_prev).norm() / pi.norm().max(f64::MIN_POSITIVE)
            } else {
                beta_space_angle(&beta_prev, &st.beta)
            };
            if moved < self.config.tol_outer {
                converged = true;
                break;
            }
        }
        Ok(PassOutcome {
            iterations,
            converged,
        })
    }
}

/// Angle between successive β estimates, tolerant of zero columns.
fn beta_space_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let za = a.iter().all(|&v| v == 0.0);
    let zb = b.iter().all(|&v| v == 0.0);
    match (za, zb) {
        (true, true) => 0.0,
        (true, false) | (false, true) => std::f64::consts::FRAC_PI_2,
        _ => subspace_angle(a, b).unwrap_or(std::f64::consts::FRAC_PI_2),
    }
}

fn initial_state(design: &VecmDesign, r: usize) -> State {
    let q = design.nseries();
    let k = design.n_short_run();
    let gamma = DMatrix::from_fn(k, q, |i, j| {
        if i < q * (design.lag - 1) && i % q == j {
            1.0
        } else {
            0.0
        }
    });
    State {
        gamma,
        alpha: DMatrix::zeros(q, r),
        beta: DMatrix::from_element(q, r, 1.0),
        omega: DMatrix::identity(q, q),
    }
}

/// Ridge weight on β for the starting pass: λ₂ for the ridge method,
/// otherwise a small multiple of the average squared level so that the pass
/// stays close to the unrestricted reduced-rank solution.
fn warm_start_ridge(design: &VecmDesign, config: &PenaltyConfig) -> f64 {
    if config.beta_penalty == BetaPenalty::Ridge {
        return config.lambda2;
    }
    let z = &design.z;
    let scale = z.norm_squared() / (z.nrows() * z.ncols().max(1)) as f64;
    WARM_START_RIDGE * scale
}

const WARM_START_RIDGE: f64 = 1e-4;

fn check_rank(design: &VecmDesign, r: usize) -> Result<()> {
    let q = design.nseries();
    if r == 0 || r > q {
        return Err(Error::InvalidInput(format!(
            "cointegration rank must be in 1..={q}, got {r}"
        )));
    }
    Ok(())
}

/// Runs only the ridge-on-β pass used for starting values.
///
/// The ridge weight on β is λ₂ when `config` asks for the ridge method and a
/// small scale-aware value otherwise, as in the first pass of
/// [`fit_sparse_vecm`].
pub fn fit_warm_start(design: &VecmDesign, r: usize, config: &PenaltyConfig) -> Result<CointegrationFit> {
    fit_core(design, r, config, None, true)
}

/// Sparse penalized ML estimate of a rank-`r` VECM with fixed tuning parameters.
///
/// Starts from `Ω = I`, `Γ_k = I` and β of all ones, runs a pass with a small
/// scale-aware ridge penalty on β for starting values, then the lasso pass.
/// With [`BetaPenalty::Ridge`] the ridge pass uses λ₂ and is the whole fit. For the
/// adaptive lasso the lasso estimate supplies weights `1/|β̂|` for a final pass.
pub fn fit_sparse_vecm(design: &VecmDesign, r: usize, config: &PenaltyConfig) -> Result<CointegrationFit> {
    fit_core(design, r, config, None, false)
}

/// Warm start followed by a single weighted lasso pass with the given weights
/// (infinite weights fix coefficients at zero).
pub fn fit_with_weights(
    design: &VecmDesign,
    r: usize,
    config: &PenaltyConfig,
    weights: &LassoWeights,
) -> Result<CointegrationFit> {
    if weights.matrix().shape() != (design.nseries(), r) {
        return Err(Error::InvalidInput("weight matrix must be q×r".into()));
    }
    let cfg = PenaltyConfig {
        beta_penalty: BetaPenalty::AdaptiveLasso,
        ..config.clone()
    };
    fit_core(design, r, &cfg, Some(weights), false)
}

fn fit_core(
    design: &VecmDesign,
    r: usize,
    config: &PenaltyConfig,
    preset: Option<&LassoWeights>,
    warm_only: bool,
) -> Result<CointegrationFit> {
    config.validate()?;
    check_rank(design, r)?;
    if let Some(centered) = profiled_design(design, config) {
        let mut fit = fit_core(&centered, r, config, preset, warm_only)?;
        fit.gamma = restore_intercept(design, &fit);
        return Ok(fit);
    }
    let lambda1 = config.lambda1_for_rank(r)?;
    let mut engine = Engine::new(design, config);
    let mut st = initial_state(design, r);

    let ridge = Penalties {
        beta: BetaStep::Ridge(warm_start_ridge(design, config)),
        lambda2: config.lambda2,
        lambda3: config.lambda3,
        penalize_intercept: config.penalize_intercept,
    };
    let mut outcome = engine.run_pass(&mut st, &ridge, Pass::WarmStart, true)?;
    let mut total_iter = outcome.iterations;
    let mut used_lambda1 = lambda1.clone();
    let mut weights: Option<LassoWeights> = None;

    let sparse = !warm_only && config.beta_penalty != BetaPenalty::Ridge;
    if let (false, Some(w)) = (warm_only, preset) {
        outcome = lasso_with_relaxation(&mut engine, &mut st, &mut used_lambda1, Some(w), Pass::AdaptiveLasso)?;
        total_iter += outcome.iterations;
        weights = Some(w.clone());
    } else if sparse {
        outcome = lasso_with_relaxation(&mut engine, &mut st, &mut used_lambda1, None, Pass::Lasso)?;
        total_iter += outcome.iterations;
        if config.beta_penalty == BetaPenalty::AdaptiveLasso {
            let w = LassoWeights::adaptive(&st.beta);
            outcome = lasso_with_relaxation(&mut engine, &mut st, &mut used_lambda1, Some(&w), Pass::AdaptiveLasso)?;
            total_iter += outcome.iterations;
            weights = Some(w);
        }
    }

    let final_pens = match (warm_only, config.beta_penalty) {
        (true, _) | (_, BetaPenalty::Ridge) => ridge,
        _ => Penalties {
            beta: BetaStep::Lasso {
                lambda1: &used_lambda1,
                weights: weights.as_ref(),
            },
            lambda2: config.lambda2,
            lambda3: config.lambda3,
            penalize_intercept: config.penalize_intercept,
        },
    };
    let value = objective(design, &st, &final_pens)?;
    let degenerate = (0..r).any(|j| st.beta.column(j).iter().all(|&v| v == 0.0));
    if degenerate {
        log::warn!("a cointegrating vector was penalized to zero; fit is rank deficient");
    }
    Ok(CointegrationFit {
        alpha: st.alpha,
        beta: st.beta,
        gamma: st.gamma,
        omega: st.omega,
        rank: r,
        objective: value,
        iterations: total_iter,
        converged: outcome.converged,
        degenerate,
        lambda1: used_lambda1,
        lambda2: config.lambda2,
        lambda3: config.lambda3,
        trace: engine.trace,
    })
}

/// The design with a free intercept concentrated out.
///
/// An unpenalized constant is optimal at the column means of the other
/// residual terms, so demeaning `Y`, `Z` and the lagged differences and
/// dropping the constant leaves the same minimizer for every other block.
/// Alternating the constant against β instead converges very slowly, since
/// levels of integrated series are nearly collinear with it.
fn profiled_design(design: &VecmDesign, config: &PenaltyConfig) -> Option<VecmDesign> {
    if !design.intercept || (config.penalize_intercept && config.lambda2 > 0.0) {
        return None;
    }
    let k = design.x.ncols() - 1;
    Some(VecmDesign {
        y: demean_columns(&design.y),
        x: demean_columns(&design.x.columns(0, k).into_owned()),
        z: demean_columns(&design.z),
        lag: design.lag,
        intercept: false,
    })
}

/// Γ on the original layout: the profiled Γ with the optimal constant row
/// `ȳ − x̄Γ − z̄Π'` appended.
fn restore_intercept(design: &VecmDesign, fit: &CointegrationFit) -> DMatrix<f64> {
    let (k, q) = fit.gamma.shape();
    let xbar = design.x.columns(0, k).row_mean();
    let c = design.y.row_mean() - xbar * &fit.gamma - design.z.row_mean() * fit.pi().transpose();
    let mut gamma = fit.gamma.clone().insert_row(k, 0.0);
    gamma.row_mut(k).copy_from(&c);
    debug_assert_eq!(gamma.shape(), (k + 1, q));
    gamma
}

/// Lasso pass; all-zero β columns are refit with λ₁ halved, down to λ₁/32.
fn lasso_with_relaxation(
    engine: &mut Engine,
    st: &mut State,
    lambda1: &mut [f64],
    weights: Option<&LassoWeights>,
    pass: Pass,
) -> Result<PassOutcome> {
    let floor: Vec<f64> = lambda1.iter().map(|l| l / 32.0).collect();
    let config = engine.config;
    loop {
        let pens = Penalties {
            beta: BetaStep::Lasso {
                lambda1,
                weights,
            },
            lambda2: config.lambda2,
            lambda3: config.lambda3,
            penalize_intercept: config.penalize_intercept,
        };
        let outcome = engine.run_pass(st, &pens, pass, false)?;
        let mut relaxed = false;
        for j in 0..lambda1.len() {
            let zero = st.beta.column(j).iter().all(|&v| v == 0.0);
            if zero && lambda1[j] > 0.0 && lambda1[j] / 2.0 >= floor[j] {
                lambda1[j] /= 2.0;
                relaxed = true;
            }
        }
        if !relaxed {
            return Ok(outcome);
        }
    }
}

/// Γ estimate at a given rank from the ridge warm-start pass; rank 0 fits the
/// short-run dynamics alone.
pub fn short_run_at_rank(design: &VecmDesign, r: usize, config: &PenaltyConfig) -> Result<DMatrix<f64>> {
    if r > 0 {
        return Ok(fit_warm_start(design, r, config)?.gamma);
    }
    let q = design.nseries();
    let zero_pi = DMatrix::zeros(q, q);
    let mut omega = DMatrix::identity(q, q);
    let mut gamma = solve_gamma(design, &zero_pi, &omega, config.lambda2, config.penalize_intercept)?;
    if config.lambda2 > 0.0 {
        for _ in 0..config.max_outer_iter {
            omega = solve_omega(design, &gamma, &zero_pi, config.lambda3)?;
            let next = solve_gamma(design, &zero_pi, &omega, config.lambda2, config.penalize_intercept)?;
            let change = (&next - &gamma).amax();
            gamma = next;
            if change < config.tol_inner * gamma.amax().max(1.0) {
                break;
            }
        }
    }
    Ok(gamma)
}

/// Johansen's maximum-likelihood estimator via the generalized eigenproblem
/// `|λS₁₁ − S₁₀S₀₀⁻¹S₀₁| = 0`.
pub fn johansen_ml(design: &VecmDesign, r: usize) -> Result<CointegrationFit> {
    check_rank(design, r)?;
    let (n, q) = (design.nobs(), design.nseries());
    let k = design.n_short_run();
    if n <= k + q {
        return Err(Error::Singular(format!(
            "{n} observations are too few for {q} series with {k} short-run regressors; \
             use the penalized estimator"
        )));
    }
    let nf = n as f64;
    let (r0, r1, xtx_inv) = if k == 0 {
        (design.y.clone(), design.z.clone(), None)
    } else {
        let xtx = design.x.tr_mul(&design.x);
        let inv = Cholesky::new(xtx)
            .ok_or_else(|| Error::Singular("X'X is singular".into()))?
            .inverse();
        let proj = |m: &DMatrix<f64>| m - &design.x * (&inv * design.x.tr_mul(m));
        (proj(&design.y), proj(&design.z), Some(inv))
    };
    let s00 = r0.tr_mul(&r0) / nf;
    let s01 = r0.tr_mul(&r1) / nf;
    let s11 = r1.tr_mul(&r1) / nf;
    let singular = || Error::Singular("moment matrices are singular; use the penalized estimator".into());
    let c00 = Cholesky::new(s00.clone()).ok_or_else(singular)?;
    let c11 = Cholesky::new(s11).ok_or_else(singular)?;
    let l_inv = c11
        .l()
        .solve_lower_triangular(&DMatrix::identity(q, q))
        .ok_or_else(singular)?;
    let s10_s00inv_s01 = s01.transpose() * c00.solve(&s01);
    let a = symmetrize(&(&l_inv * s10_s00inv_s01 * l_inv.transpose()));
    let eig = SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let top = eig.eigenvectors.select_columns(&order[..r]);
    let beta = l_inv.transpose() * top;
    let alpha = &s01 * &beta;
    let pi = &alpha * beta.transpose();

    let target = &design.y - &design.z * pi.transpose();
    let gamma = match &xtx_inv {
        Some(inv) => inv * design.x.tr_mul(&target),
        None => DMatrix::zeros(0, q),
    };
    let resid = residuals(design, &gamma, &alpha, &beta);
    let sigma = resid.tr_mul(&resid) / nf;
    let omega = symmetrize(
        &Cholesky::new(sigma)
            .ok_or_else(|| Error::Singular("residual covariance is singular".into()))?
            .inverse(),
    );
    let (alpha, beta) = renormalize(&alpha, &beta, &omega)
        .ok_or_else(|| Error::Numerical("adjustment matrix is rank deficient".into()))?;
    let st = State {
        gamma,
        alpha,
        beta,
        omega,
    };
    let pens = Penalties {
        beta: BetaStep::Ridge(0.0),
        lambda2: 0.0,
        lambda3: 0.0,
        penalize_intercept: true,
    };
    let value = objective(design, &st, &pens)?;
    Ok(CointegrationFit {
        alpha: st.alpha,
        beta: st.beta,
        gamma: st.gamma,
        omega: st.omega,
        rank: r,
        objective: value,
        iterations: 0,
        converged: true,
        degenerate: false,
        lambda1: vec![0.0; r],
        lambda2: 0.0,
        lambda3: 0.0,
        trace: Vec::new(),
    })
}

/// Largest principal angle (radians, in `[0, π/2]`) between two column spaces.
pub fn subspace_angle(b1: &DMatrix<f64>, b2: &DMatrix<f64>) -> Result<f64> {
    if b1.nrows() != b2.nrows() {
        return Err(Error::InvalidInput("subspaces live in different dimensions".into()));
    }
    let q1 = orthonormal_basis(b1)?;
    let q2 = orthonormal_basis(b2)?;
    // sines of the angles come from projecting the smaller basis off the larger
    let (big, small) = if q1.ncols() >= q2.ncols() { (q1, q2) } else { (q2, q1) };
    let cross = big.tr_mul(&small);
    let cos_min = SVD::new(cross.clone(), false, false).singular_values.min();
    let off = &small - &big * cross;
    let sin_max = SVD::new(off, false, false).singular_values.max();
    let angle = if sin_max < std::f64::consts::FRAC_1_SQRT_2 {
        sin_max.clamp(0.0, 1.0).asin()
    } else {
        cos_min.clamp(0.0, 1.0).acos()
    };
    Ok(angle)
}

/// Orthonormal basis of the column space (rank-revealing SVD).
pub fn orthonormal_basis(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b.ncols() == 0 || b.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidInput("zero matrix has no column space".into()));
    }
    let svd = SVD::new(b.clone(), true, false);
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 1e-12 * smax)
        .map(|(i, _)| i)
        .collect();
    Ok(svd.u.expect("u requested").select_columns(&keep))
}

/// Rescales each β column so its first nonzero entry equals one and
/// compensates α so that `αβ'` is unchanged.
pub fn normalize_leading_one(alpha: &DMatrix<f64>, beta: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut a = alpha.clone();
    let mut b = beta.clone();
    for j in 0..b.ncols() {
        let col_max = b.column(j).amax();
        if col_max == 0.0 {
            continue;
        }
        let lead = b
            .column(j)
            .iter()
            .copied()
            .find(|v| v.abs() > 1e-10 * col_max)
            .unwrap_or(1.0);
        b.column_mut(j).iter_mut().for_each(|v| *v /= lead);
        a.column_mut(j).scale_mut(lead);
    }
    (a, b)
}

fn column_means(m: &DMatrix<f64>) -> nalgebra::RowDVector<f64> {
    let n = m.nrows().max(1) as f64;
    m.row_sum() / n
}

fn center(m: &DMatrix<f64>, means: &nalgebra::RowDVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        row -= means;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{design, generate_sample};
    use crate::vecm::{build_design, TimeSeriesMatrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    fn random_spd(rng: &mut ChaCha8Rng, q: usize) -> DMatrix<f64> {
        let a = randn(rng, q, q);
        &a * a.transpose() / q as f64 + DMatrix::identity(q, q) * 0.5
    }

    fn random_design(rng: &mut ChaCha8Rng, n: usize, q: usize, k: usize, intercept: bool) -> VecmDesign {
        let mut x = randn(rng, n, k);
        if intercept {
            x.column_mut(k - 1).fill(1.0);
        }
        VecmDesign {
            y: randn(rng, n, q),
            x,
            z: randn(rng, n, q),
            lag: 1 + (k - intercept as usize) / q,
            intercept,
        }
    }

    fn sim_design(name: &str, a: f64, seed: u64) -> VecmDesign {
        let d = design(name, a).unwrap();
        build_design(&generate_sample(&d, seed), 2, false).unwrap()
    }

    fn weighted_fit(design: &VecmDesign, target: &DMatrix<f64>, gamma: &DMatrix<f64>, omega: &DMatrix<f64>) -> f64 {
        let r = target - &design.x * gamma;
        (&r * omega).component_mul(&r).sum() / design.nobs() as f64
    }

    /// Minimizes the Γ objective through the explicit nq-dimensional system
    /// `vec(Γ) = (A'A + nΛ)⁻¹A'b`, `A = Ω^{1/2} ⊗ X`, `b = vec(Ỹ Ω^{1/2})`.
    fn kronecker_gamma(design: &VecmDesign, pi: &DMatrix<f64>, omega: &DMatrix<f64>, lambda2: f64, exempt_last: bool) -> DMatrix<f64> {
        let (n, q, k) = (design.nobs(), design.nseries(), design.n_short_run());
        let half = matrix_sqrt_spd(omega).unwrap();
        let target = &design.y - &design.z * pi.transpose();
        let a = half.kronecker(&design.x);
        let bmat = &target * &half;
        let b = DVector::from_column_slice(bmat.as_slice());
        let mut pen = DMatrix::identity(k * q, k * q) * (n as f64 * lambda2);
        if exempt_last {
            for j in 0..q {
                pen[(j * k + k - 1, j * k + k - 1)] = 0.0;
            }
        }
        let lhs = a.transpose() * &a + pen;
        let sol = lhs.lu().solve(&(a.transpose() * b)).unwrap();
        DMatrix::from_column_slice(k, q, sol.as_slice())
    }
    use nalgebra::DVector;

    #[test]
    fn gamma_matches_kronecker_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &intercept in &[false, true] {
            let d = random_design(&mut rng, 40, 3, 4, intercept);
            let pi = randn(&mut rng, 3, 3) * 0.3;
            let omega = random_spd(&mut rng, 3);
            for &lambda in &[0.0, 0.05, 0.7] {
                let got = solve_gamma(&d, &pi, &omega, lambda, true).unwrap();
                let want = kronecker_gamma(&d, &pi, &omega, lambda, false);
                assert!((&got - &want).amax() < 1e-8, "λ={lambda}: {}", (&got - &want).amax());
            }
            if intercept {
                let got = solve_gamma(&d, &pi, &omega, 0.4, false).unwrap();
                let want = kronecker_gamma(&d, &pi, &omega, 0.4, true);
                assert!((&got - &want).amax() < 1e-8);
            }
        }
    }

    #[test]
    fn gamma_depends_on_omega_under_ridge() {
        // the isotropic closed form (X'X + λI)⁻¹X'Ỹ ignores Ω and is not the minimizer
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = random_design(&mut rng, 40, 3, 4, false);
        let pi = DMatrix::zeros(3, 3);
        let omega = random_spd(&mut rng, 3);
        let lambda = 0.5;
        let exact = solve_gamma(&d, &pi, &omega, lambda, true).unwrap();
        let n = d.nobs() as f64;
        let naive = (d.x.tr_mul(&d.x) + DMatrix::identity(4, 4) * (n * lambda))
            .lu()
            .solve(&d.x.tr_mul(&d.y))
            .unwrap();
        let f = |g: &DMatrix<f64>| weighted_fit(&d, &d.y, g, &omega) + lambda * g.norm_squared();
        assert!(f(&exact) < f(&naive) - 1e-6);
    }

    #[test]
    fn gamma_ols_and_empty_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = random_design(&mut rng, 30, 2, 3, false);
        let g = solve_gamma(&d, &DMatrix::zeros(2, 2), &DMatrix::identity(2, 2), 0.0, true).unwrap();
        let ols = d.x.tr_mul(&d.x).lu().solve(&d.x.tr_mul(&d.y)).unwrap();
        assert!((g - ols).amax() < 1e-10);

        let empty = VecmDesign { x: DMatrix::zeros(30, 0), lag: 1, ..d };
        let g = solve_gamma(&empty, &DMatrix::zeros(2, 2), &DMatrix::identity(2, 2), 0.3, true).unwrap();
        assert_eq!(g.shape(), (0, 2));
    }

    fn alpha_objective(d: &VecmDesign, y_tilde: &DMatrix<f64>, beta: &DMatrix<f64>, alpha: &DMatrix<f64>, omega: &DMatrix<f64>) -> f64 {
        let r = y_tilde - (&d.z * beta) * alpha.transpose();
        (&r * omega).component_mul(&r).sum() / d.nobs() as f64
    }

    #[test]
    fn alpha_beats_random_feasible_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let d = random_design(&mut rng, 60, 4, 4, false);
        let gamma = randn(&mut rng, 4, 4) * 0.1;
        let omega = random_spd(&mut rng, 4);
        let beta = randn(&mut rng, 4, 2);
        let (alpha, degenerate) = solve_alpha(&d, &gamma, &omega, &beta).unwrap();
        assert!(!degenerate);
        let k = alpha.tr_mul(&(&omega * &alpha));
        assert!((k - DMatrix::identity(2, 2)).amax() < 1e-8);
        let y_tilde = &d.y - &d.x * &gamma;
        let best = alpha_objective(&d, &y_tilde, &beta, &alpha, &omega);
        for _ in 0..10_000 {
            let a = randn(&mut rng, 4, 2);
            let cand = &a * matrix_inv_sqrt_spd(&a.tr_mul(&(&omega * &a))).unwrap();
            assert!(best <= alpha_objective(&d, &y_tilde, &beta, &cand, &omega) + 1e-12);
        }
    }

    #[test]
    fn alpha_rank_one_identity_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random_design(&mut rng, 50, 3, 3, false);
        let gamma = DMatrix::zeros(3, 3);
        let beta = randn(&mut rng, 3, 1);
        let (alpha, _) = solve_alpha(&d, &gamma, &DMatrix::identity(3, 3), &beta).unwrap();
        let dir = d.y.tr_mul(&(&d.z * &beta));
        let want = &dir / dir.norm();
        assert!((alpha - want).amax() < 1e-10);
    }

    #[test]
    fn alpha_recovers_orthogonal_factor() {
        // with cross-product M = Q·diag, the maximizer of tr(A'M) is Q
        let q = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let qr = randn(&mut rng, q, q).qr();
        let orth = qr.q();
        let m = &orth * DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let (got, degenerate) = procrustes_factor(&m);
        assert!(!degenerate);
        assert!((got - orth).amax() < 1e-10);
    }

    #[test]
    fn alpha_degenerate_cross_product_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = random_design(&mut rng, 20, 3, 3, false);
        let omega = random_spd(&mut rng, 3);
        let (alpha, degenerate) = solve_alpha(&d, &DMatrix::zeros(3, 3), &omega, &DMatrix::zeros(3, 2)).unwrap();
        assert!(degenerate);
        assert!((alpha.tr_mul(&(&omega * &alpha)) - DMatrix::identity(2, 2)).amax() < 1e-8);
    }

    #[test]
    fn alpha_keeps_columns_of_zero_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = random_design(&mut rng, 30, 3, 3, false);
        let omega = random_spd(&mut rng, 3);
        let gamma = DMatrix::zeros(3, 3);
        let (current, _) = solve_alpha(&d, &gamma, &omega, &randn(&mut rng, 3, 2)).unwrap();
        let mut beta = randn(&mut rng, 3, 2);
        beta.column_mut(1).fill(0.0);
        let (alpha, degenerate) = alpha_with_hint(&d, &gamma, &omega, &beta, Some(&current)).unwrap();
        assert!(!degenerate);
        assert!((alpha.tr_mul(&(&omega * &alpha)) - DMatrix::identity(2, 2)).amax() < 1e-8);
        // the live column is the rank-one Procrustes solution
        let (single, _) = solve_alpha(&d, &gamma, &omega, &beta.columns(0, 1).into_owned()).unwrap();
        assert!((alpha.column(0) - single.column(0)).amax() < 1e-10);
        // the free column stays as close to the current one as orthogonality allows
        let half = matrix_sqrt_spd(&omega).unwrap();
        let (a, c) = (&half * &alpha, &half * &current);
        let kept = a.column(1).dot(&c.column(1));
        let resid = c.column(1) - a.column(0) * a.column(0).dot(&c.column(1));
        assert!((kept - resid.norm()).abs() < 1e-10);
    }

    #[test]
    fn beta_reduction_identity() {
        // full weighted loss = reduced regression loss + ‖ỸΩ^{1/2}α*⊥‖²/n
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let d = random_design(&mut rng, 50, 4, 4, false);
        let gamma = randn(&mut rng, 4, 4) * 0.2;
        let omega = random_spd(&mut rng, 4);
        let (alpha, _) = solve_alpha(&d, &gamma, &omega, &randn(&mut rng, 4, 2)).unwrap();
        let (beta_hat, _) = solve_beta(&d, &gamma, &omega, &alpha, &[0.05, 0.02], BetaPenalty::Lasso, None, None, LassoOptions::default()).unwrap();
        let half = matrix_sqrt_spd(&omega).unwrap();
        let a_star = &half * &alpha;
        let svd = SVD::new(a_star.clone(), true, false);
        let full_u = complete_orthonormal(&svd.u.unwrap(), 4, 4);
        let perp = full_u.columns(2, 2).into_owned();
        let y_tilde = &d.y - &d.x * &gamma;
        let n = d.nobs() as f64;
        let constant = (&y_tilde * &half * &perp).norm_squared() / n;
        for beta in [beta_hat, randn(&mut rng, 4, 2)] {
            let full = alpha_objective(&d, &y_tilde, &beta, &alpha, &omega);
            let reduced = (&y_tilde * &half * &a_star - &d.z * &beta).norm_squared() / n;
            assert!((full - reduced - constant).abs() < 1e-8, "{full} vs {}", reduced + constant);
        }
    }

    #[test]
    fn beta_unpenalized_full_rank_is_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = random_design(&mut rng, 40, 3, 3, false);
        let gamma = DMatrix::zeros(3, 3);
        let eye = DMatrix::identity(3, 3);
        let (beta, _) = solve_beta(&d, &gamma, &eye, &eye, &[0.0; 3], BetaPenalty::Lasso, None, None, LassoOptions::default()).unwrap();
        let ols = d.z.tr_mul(&d.z).lu().solve(&d.z.tr_mul(&d.y)).unwrap();
        assert!((beta - ols).amax() < 1e-8);
    }

    #[test]
    fn beta_column_killed_above_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = random_design(&mut rng, 40, 3, 3, false);
        let gamma = DMatrix::zeros(3, 3);
        let eye = DMatrix::identity(3, 3);
        let alpha = eye.columns(0, 2).into_owned();
        let target = &d.y * &alpha;
        let kill = 2.0 * (d.z.tr_mul(&target) / d.nobs() as f64).column(1).amax();
        let (beta, _) = solve_beta(&d, &gamma, &eye, &alpha, &[0.0, kill * 1.01], BetaPenalty::Lasso, None, None, LassoOptions::default()).unwrap();
        assert!(beta.column(1).iter().all(|&v| v == 0.0));
        assert!(beta.column(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn omega_step_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = random_design(&mut rng, 8, 5, 5, false);
        let g = DMatrix::zeros(5, 5);
        let pi = DMatrix::zeros(5, 5);
        // fewer observations than series: the penalty still yields an SPD estimate
        let small = VecmDesign { y: d.y.rows(0, 3).into_owned(), x: d.x.rows(0, 3).into_owned(), z: d.z.rows(0, 3).into_owned(), ..d.clone() };
        let om = solve_omega(&small, &g, &pi, 0.1).unwrap();
        assert!(Cholesky::new(om).is_some());
        let om = solve_omega(&d, &g, &pi, 1e6).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    assert_eq!(om[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn angle_examples() {
        let e1 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let e2 = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let diag = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        assert_eq!(subspace_angle(&e1, &e1).unwrap(), 0.0);
        assert!((subspace_angle(&e1, &e2).unwrap() - FRAC_PI_2).abs() < 1e-14);
        assert!((subspace_angle(&e1, &diag).unwrap() - FRAC_PI_4).abs() < 1e-14);
        assert!(subspace_angle(&e1, &DMatrix::zeros(2, 1)).is_err());
        // tiny angles keep full relative precision
        let tilt = DMatrix::from_column_slice(2, 1, &[1.0, 1e-9]);
        assert!((subspace_angle(&e1, &tilt).unwrap() - 1e-9).abs() < 1e-20);
    }

    fn noiseless_design(seed: u64) -> (VecmDesign, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, q, r) = (100, 4, 2);
        let z = randn(&mut rng, n, q);
        let beta = randn(&mut rng, q, r);
        let alpha = randn(&mut rng, q, r);
        let e = randn(&mut rng, n, q);
        let e_perp = &e - &z * z.tr_mul(&z).lu().solve(&z.tr_mul(&e)).unwrap();
        let y = &z * &beta * alpha.transpose() + e_perp;
        (VecmDesign { y, x: DMatrix::zeros(n, 0), z, lag: 1, intercept: false }, beta)
    }

    #[test]
    fn johansen_identifies_noiseless_space() {
        let (d, beta) = noiseless_design(31);
        let fit = johansen_ml(&d, 2).unwrap();
        assert!(subspace_angle(&fit.beta, &beta).unwrap() < 1e-8);
        let k = fit.alpha.tr_mul(&(&fit.omega * &fit.alpha));
        assert!((k - DMatrix::identity(2, 2)).amax() < 1e-8);
    }

    #[test]
    fn johansen_too_few_observations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random_design(&mut rng, 10, 4, 8, false);
        assert!(matches!(johansen_ml(&d, 1), Err(Error::Singular(_))));
    }

    #[test]
    fn johansen_scale_equivariance() {
        let sim = design("low_sparse_r2", -0.4).unwrap();
        let y = generate_sample(&sim, 4);
        let scaled = TimeSeriesMatrix::new(y.values() * 3.7, None).unwrap();
        let a = johansen_ml(&build_design(&y, 2, true).unwrap(), 2).unwrap();
        let b = johansen_ml(&build_design(&scaled, 2, true).unwrap(), 2).unwrap();
        assert!(subspace_angle(&a.beta, &b.beta).unwrap() < 1e-8);
    }

    fn permute(y: &TimeSeriesMatrix, perm: &[usize]) -> TimeSeriesMatrix {
        TimeSeriesMatrix::new(y.values().select_columns(perm), None).unwrap()
    }

    #[test]
    fn permutation_equivariance() {
        let sim = design("low_sparse_r1", -0.4).unwrap();
        let y = generate_sample(&sim, 6);
        let perm = [2usize, 0, 3, 1];
        let yp = permute(&y, &perm);
        let d = build_design(&y, 2, false).unwrap();
        let dp = build_design(&yp, 2, false).unwrap();

        let a = johansen_ml(&d, 1).unwrap();
        let b = johansen_ml(&dp, 1).unwrap();
        assert!(subspace_angle(&a.beta.select_rows(&perm), &b.beta).unwrap() < 1e-8);

        let cfg = PenaltyConfig {
            lambda1: vec![0.02],
            lambda2: 0.01,
            lambda3: 0.01,
            tol_outer: 1e-8,
            tol_inner: 1e-12,
            ..PenaltyConfig::default()
        };
        let a = fit_sparse_vecm(&d, 1, &cfg).unwrap();
        let b = fit_sparse_vecm(&dp, 1, &cfg).unwrap();
        let (_, ba) = a.normalized();
        let (_, bb) = normalize_leading_one(&b.alpha, &b.beta);
        assert!(subspace_angle(&ba.select_rows(&perm), &bb).unwrap() < 1e-6);
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(a.beta[(src, 0)] == 0.0, b.beta[(i, 0)] == 0.0);
        }
    }

    #[test]
    fn unpenalized_fit_matches_johansen() {
        let d = sim_design("low_sparse_r1", -0.4, 21);
        let sparse = fit_sparse_vecm(&d, 1, &PenaltyConfig::unpenalized()).unwrap();
        let ml = johansen_ml(&d, 1).unwrap();
        assert!(sparse.converged);
        assert!(subspace_angle(&sparse.beta, &ml.beta).unwrap() < 1e-3);
        assert!((sparse.alpha.tr_mul(&(&sparse.omega * &sparse.alpha)) - DMatrix::identity(1, 1)).amax() < 1e-8);
    }

    #[test]
    fn free_intercept_is_profiled_exactly() {
        let d = design("low_sparse_r1", -0.6).unwrap();
        let des = build_design(&generate_sample(&d, 6), 2, true).unwrap();
        let cfg = PenaltyConfig {
            lambda2: 0.3,
            penalize_intercept: false,
            ..PenaltyConfig::unpenalized()
        };
        let fit = fit_sparse_vecm(&des, 1, &cfg).unwrap();
        let ml = johansen_ml(&des, 1).unwrap();
        assert_eq!(fit.gamma.shape(), (des.x.ncols(), 4));
        // the constant row is the mean of what the other terms leave over
        let k = des.x.ncols() - 1;
        let rest = &des.y - des.x.columns(0, k) * fit.gamma.rows(0, k) - &des.z * fit.pi().transpose();
        assert!((rest.row_mean() - fit.gamma.row(k)).amax() < 1e-10);
        assert!(fit.residuals(&des).row_mean().amax() < 1e-10);
        // with the Γ ridge the fit is near, not equal to, Johansen
        assert!(subspace_angle(&fit.beta, &ml.beta).unwrap() < 0.05);
    }

    #[test]
    fn full_rank_fit_is_unrestricted_least_squares() {
        let d = design("low_sparse_r2", -0.4).unwrap();
        let des = build_design(&generate_sample(&d, 2), 2, true).unwrap();
        let cfg = PenaltyConfig {
            tol_outer: 1e-10,
            max_outer_iter: 10_000,
            ..PenaltyConfig::unpenalized()
        };
        let fit = fit_sparse_vecm(&des, 4, &cfg).unwrap();
        let (k, q) = (des.x.ncols(), 4);
        let w = DMatrix::from_fn(des.nobs(), k + q, |i, j| if j < k { des.x[(i, j)] } else { des.z[(i, j - k)] });
        let ols = (w.transpose() * &w).lu().solve(&(w.transpose() * &des.y)).unwrap();
        assert!((&fit.gamma - ols.rows(0, k)).amax() < 1e-6);
        assert!((fit.pi().transpose() - ols.rows(k, q)).amax() < 1e-6);
    }

    #[test]
    fn blocks_never_increase_objective() {
        for seed in 0..4 {
            let d = sim_design("low_sparse_r2", -0.4, seed);
            let cfg = PenaltyConfig {
                lambda1: vec![0.05, 0.02],
                lambda2: 0.05,
                lambda3: 0.02,
                beta_penalty: BetaPenalty::AdaptiveLasso,
                ..PenaltyConfig::default()
            };
            let fit = fit_sparse_vecm(&d, 2, &cfg).unwrap();
            for w in fit.trace.windows(2) {
                if w[0].segment != w[1].segment {
                    continue;
                }
                let slack = 1e-8 * w[0].objective.abs().max(1.0);
                assert!(w[1].objective <= w[0].objective + slack, "{:?} -> {:?}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn converged_fit_is_a_fixed_point() {
        let d = sim_design("low_sparse_r1", -0.6, 3);
        let cfg = PenaltyConfig { lambda1: vec![0.05], lambda2: 0.01, lambda3: 0.01, ..PenaltyConfig::default() };
        let a = fit_sparse_vecm(&d, 1, &cfg).unwrap();
        assert!(a.converged);
        let doubled = PenaltyConfig { max_outer_iter: 2 * cfg.max_outer_iter, ..cfg };
        let b = fit_sparse_vecm(&d, 1, &doubled).unwrap();
        assert_eq!(a.beta, b.beta);
    }

    #[test]
    fn adaptive_keeps_pilot_zeros() {
        let d = sim_design("low_sparse_r1", -0.4, 13);
        let cfg = PenaltyConfig { lambda1: vec![0.3], lambda2: 0.01, lambda3: 0.01, ..PenaltyConfig::default() };
        let pilot = fit_sparse_vecm(&d, 1, &cfg).unwrap();
        assert!(pilot.beta.iter().any(|&v| v == 0.0));
        assert!(!pilot.degenerate);
        let adaptive = fit_sparse_vecm(&d, 1, &PenaltyConfig { beta_penalty: BetaPenalty::AdaptiveLasso, ..cfg }).unwrap();
        for (p, a) in pilot.beta.iter().zip(adaptive.beta.iter()) {
            if *p == 0.0 {
                assert_eq!(*a, 0.0);
            }
        }
    }

    #[test]
    fn huge_penalty_flags_degenerate_vector() {
        let d = sim_design("low_sparse_r1", -0.4, 1);
        let cfg = PenaltyConfig { lambda1: vec![1e6], ..PenaltyConfig::default() };
        let fit = fit_sparse_vecm(&d, 1, &cfg).unwrap();
        assert!(fit.degenerate);
        assert!((fit.lambda1[0] - 1e6 / 32.0).abs() < 1e-6);
    }

    #[test]
    fn normalization_preserves_pi() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut beta = randn(&mut rng, 4, 2);
        beta[(0, 1)] = 0.0;
        let alpha = randn(&mut rng, 4, 2);
        let (a, b) = normalize_leading_one(&alpha, &beta);
        assert!((&a * b.transpose() - &alpha * beta.transpose()).amax() < 1e-12);
        assert_eq!(b[(0, 0)], 1.0);
        assert_eq!(b[(1, 1)], 1.0);
    }

    #[test]
    fn rejects_bad_rank() {
        let d = sim_design("low_sparse_r1", -0.4, 1);
        assert!(fit_sparse_vecm(&d, 0, &PenaltyConfig::default()).is_err());
        assert!(johansen_ml(&d, 5).is_err());
    }
}

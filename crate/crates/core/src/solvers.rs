//! Penalized regression and covariance solvers.
//!
//! These are the black boxes the alternating estimator calls: ridge and
//! (adaptive) lasso multivariate regression, the graphical lasso, and a few
//! matrix utilities.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen, SVD};

use crate::error::{Error, Result};

/// Default relative cut-off for singular values in [`pseudo_inverse`].
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Nonnegative adaptive-lasso weights, one per coefficient of a k×m matrix.
///
/// An infinite weight pins the coefficient to exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoWeights {
    w: DMatrix<f64>,
}

impl LassoWeights {
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if w.iter().any(|&v| v.is_nan() || v < 0.0) {
            return Err(Error::InvalidInput("lasso weights must be >= 0".into()));
        }
        Ok(Self { w })
    }

    /// Unit weights (plain lasso).
    pub fn ones(k: usize, m: usize) -> Self {
        Self {
            w: DMatrix::from_element(k, m, 1.0),
        }
    }

    /// Adaptive weights `1/|b|`, infinite where the pilot estimate is zero.
    pub fn adaptive(pilot: &DMatrix<f64>) -> Self {
        Self {
            w: pilot.map(|b| if b == 0.0 { f64::INFINITY } else { 1.0 / b.abs() }),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.w.column(j).iter().copied().collect()
    }
}

/// Stopping rules for the coordinate-descent lasso.
#[derive(Debug, Clone, Copy)]
pub struct LassoOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 10_000,
        }
    }
}

/// Result of a multivariate lasso solve.
#[derive(Debug, Clone)]
pub struct LassoFit {
    pub coef: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Ridge regression `(X'X + λI)⁻¹ X'Y`, minimizing `‖Y − XB‖² + λ‖B‖²`.
pub fn ridge_multivariate(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda2: f64) -> Result<DMatrix<f64>> {
    check_rows(x, y)?;
    if lambda2 < 0.0 {
        return Err(Error::InvalidInput("lambda2 must be >= 0".into()));
    }
    let k = x.ncols();
    if k == 0 {
        return Ok(DMatrix::zeros(0, y.ncols()));
    }
    let mut gram = x.tr_mul(x);
    for i in 0..k {
        gram[(i, i)] += lambda2;
    }
    let chol = Cholesky::new(gram)
        .ok_or_else(|| Error::Singular("X'X + λ₂I is not invertible".into()))?;
    Ok(chol.solve(&x.tr_mul(y)))
}

/// Column-wise (adaptive) lasso by cyclic coordinate descent.
///
/// Column `j` minimizes `(1/n)‖Y_j − X B_j‖² + λ₁ⱼ Σᵢ wᵢⱼ |Bᵢⱼ|`. A zero λ₁ⱼ
/// returns the minimum-norm least-squares solution over the coefficients with
/// finite weight. Non-convergence is reported in the result, not as an error.
pub fn lasso_multivariate(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lambda1: &[f64],
    weights: Option<&LassoWeights>,
    init: Option<&DMatrix<f64>>,
    opts: LassoOptions,
) -> Result<LassoFit> {
    check_rows(x, y)?;
    let (n, k) = x.shape();
    let m = y.ncols();
    if lambda1.len() != m {
        return Err(Error::InvalidInput(format!(
            "{} lambda values for {} response columns",
            lambda1.len(),
            m
        )));
    }
    if lambda1.iter().any(|&l| !(l >= 0.0)) {
        return Err(Error::InvalidInput("lambda1 must be >= 0".into()));
    }
    if let Some(w) = weights {
        if w.matrix().shape() != (k, m) {
            return Err(Error::InvalidInput("weight matrix has wrong shape".into()));
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("response must be finite".into()));
    }
    let nf = n.max(1) as f64;
    let gram = x.tr_mul(x) / nf;
    let xty = x.tr_mul(y) / nf;

    let mut coef = DMatrix::zeros(k, m);
    let mut converged = true;
    let mut iterations = 0;
    for j in 0..m {
        let w = match weights {
            Some(w) => w.column(j),
            None => vec![1.0; k],
        };
        let mut b = match init {
            Some(b0) => b0.column(j).into_owned(),
            None => DVector::zeros(k),
        };
        let c = xty.column(j).into_owned();
        let out = lasso_gram(&gram, &c, lambda1[j], &w, &mut b, opts);
        converged &= out.converged;
        iterations = iterations.max(out.iterations);
        coef.set_column(j, &b);
    }
    Ok(LassoFit {
        coef,
        converged,
        iterations,
    })
}

pub(crate) struct CdOutcome {
    pub converged: bool,
    pub iterations: usize,
}

/// Lasso in covariance form: minimizes `b'Gb − 2c'b + λ Σ wᵢ|bᵢ|` starting
/// from `b`. Coordinates with infinite weight are forced to zero.
pub(crate) fn lasso_gram(
    gram: &DMatrix<f64>,
    c: &DVector<f64>,
    lambda: f64,
    w: &[f64],
    b: &mut DVector<f64>,
    opts: LassoOptions,
) -> CdOutcome {
    let k = c.len();
    for i in 0..k {
        if w[i].is_infinite() {
            b[i] = 0.0;
        }
    }
    if lambda == 0.0 {
        least_squares_gram(gram, c, w, b);
        return CdOutcome {
            converged: true,
            iterations: 0,
        };
    }
    let scale = 1.0_f64.max(2.0 * c.amax());
    let mut gb = gram * &*b;
    for iter in 1..=opts.max_iter {
        let mut max_delta = 0.0_f64;
        for i in 0..k {
            if w[i].is_infinite() || gram[(i, i)] <= 0.0 {
                if b[i] != 0.0 {
                    let delta = -b[i];
                    b[i] = 0.0;
                    gb.axpy(delta, &gram.column(i), 1.0);
                }
                continue;
            }
            let gii = gram[(i, i)];
            let rho = c[i] - gb[i] + gii * b[i];
            let new = soft_threshold(rho, 0.5 * lambda * w[i]) / gii;
            let delta = new - b[i];
            if delta != 0.0 {
                b[i] = new;
                gb.axpy(delta, &gram.column(i), 1.0);
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta < opts.tol && kkt_violation_gram(gram, c, lambda, w, b) <= opts.tol * scale {
            return CdOutcome {
                converged: true,
                iterations: iter,
            };
        }
    }
    CdOutcome {
        converged: false,
        iterations: opts.max_iter,
    }
}

fn least_squares_gram(gram: &DMatrix<f64>, c: &DVector<f64>, w: &[f64], b: &mut DVector<f64>) {
    let active: Vec<usize> = (0..c.len()).filter(|&i| w[i].is_finite()).collect();
    b.fill(0.0);
    if active.is_empty() {
        return;
    }
    let g = gram.select_rows(&active).select_columns(&active);
    let ca = DVector::from_iterator(active.len(), active.iter().map(|&i| c[i]));
    let sol = pseudo_inverse(&g, DEFAULT_RANK_TOL) * ca;
    for (pos, &i) in active.iter().enumerate() {
        b[i] = sol[pos];
    }
}

/// Largest violation of the lasso optimality conditions in covariance form.
pub(crate) fn kkt_violation_gram(
    gram: &DMatrix<f64>,
    c: &DVector<f64>,
    lambda: f64,
    w: &[f64],
    b: &DVector<f64>,
) -> f64 {
    let grad = (gram * b - c) * 2.0;
    let mut worst = 0.0_f64;
    for i in 0..c.len() {
        if w[i].is_infinite() {
            continue;
        }
        let pen = lambda * w[i];
        let v = if b[i] != 0.0 {
            (grad[i] + pen * b[i].signum()).abs()
        } else {
            (grad[i].abs() - pen).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// Largest KKT violation of a column of [`lasso_multivariate`].
pub fn lasso_kkt_violation(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
    weights: &[f64],
    b: &DVector<f64>,
) -> f64 {
    let nf = x.nrows().max(1) as f64;
    let gram = x.tr_mul(x) / nf;
    let c = x.tr_mul(y) / nf;
    kkt_violation_gram(&gram, &c, lambda, weights, b)
}

pub(crate) fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Stopping rules for the graphical lasso.
#[derive(Debug, Clone, Copy)]
pub struct GlassoOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for GlassoOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 2_000,
        }
    }
}

/// Graphical lasso with an unpenalized diagonal.
///
/// Minimizes `tr(SΩ) − log|Ω| + λ₃ Σ_{k≠k'} |Ω_kk'|` by block coordinate
/// descent on the covariance `W = Ω⁻¹`. With `λ₃ = 0` the inverse of `S` is
/// returned directly.
pub fn graphical_lasso(s: &DMatrix<f64>, lambda3: f64, opts: GlassoOptions) -> Result<DMatrix<f64>> {
    let q = s.nrows();
    if s.ncols() != q {
        return Err(Error::InvalidInput("covariance matrix must be square".into()));
    }
    if !(lambda3 >= 0.0) {
        return Err(Error::InvalidInput("lambda3 must be >= 0".into()));
    }
    let s = symmetrize(s);
    if lambda3 == 0.0 {
        let chol = Cholesky::new(s)
            .ok_or_else(|| Error::Singular("sample covariance is singular; use lambda3 > 0".into()))?;
        return Ok(symmetrize(&chol.inverse()));
    }
    if (0..q).any(|k| !(s[(k, k)] > 0.0)) {
        return Err(Error::Singular("sample covariance has a zero variance".into()));
    }
    if q == 1 {
        return Ok(DMatrix::from_element(1, 1, 1.0 / s[(0, 0)]));
    }

    let mut w = s.clone();
    // betas[j] holds the lasso coefficients of column j against the others
    let mut betas = vec![DVector::<f64>::zeros(q - 1); q];
    let off_scale = {
        let mut acc = 0.0;
        for i in 0..q {
            for j in 0..q {
                if i != j {
                    acc += s[(i, j)].abs();
                }
            }
        }
        (acc / (q * (q - 1)) as f64).max(1e-12 * s.diagonal().max())
    };

    let mut converged = false;
    for _ in 0..opts.max_iter {
        let mut change = 0.0;
        for j in 0..q {
            let others: Vec<usize> = (0..q).filter(|&i| i != j).collect();
            let w11 = w.select_rows(&others).select_columns(&others);
            let s12 = DVector::from_iterator(q - 1, others.iter().map(|&i| s[(i, j)]));
            let b = &mut betas[j];
            glasso_inner(&w11, &s12, lambda3, b, opts.tol * 1e-2, 10 * opts.max_iter);
            let w12 = &w11 * &*b;
            for (pos, &i) in others.iter().enumerate() {
                change += (w[(i, j)] - w12[pos]).abs();
                w[(i, j)] = w12[pos];
                w[(j, i)] = w12[pos];
            }
        }
        let mean_change = change / (q * (q - 1)) as f64;
        if mean_change < opts.tol * off_scale {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("graphical lasso did not converge in {} sweeps", opts.max_iter);
    }

    let mut omega = DMatrix::zeros(q, q);
    for j in 0..q {
        let others: Vec<usize> = (0..q).filter(|&i| i != j).collect();
        let b = &betas[j];
        let w12 = DVector::from_iterator(q - 1, others.iter().map(|&i| w[(i, j)]));
        let denom = w[(j, j)] - w12.dot(b);
        if !(denom > 0.0) {
            return Err(Error::Numerical("graphical lasso lost positive definiteness".into()));
        }
        let theta_jj = 1.0 / denom;
        omega[(j, j)] = theta_jj;
        for (pos, &i) in others.iter().enumerate() {
            omega[(i, j)] = -b[pos] * theta_jj;
        }
    }
    let omega = symmetrize(&omega);
    if Cholesky::new(omega.clone()).is_none() {
        return Err(Error::Numerical("graphical lasso estimate is not positive definite".into()));
    }
    Ok(omega)
}

/// Coordinate descent for `min ½b'Vb − b's + λ‖b‖₁`.
fn glasso_inner(v: &DMatrix<f64>, s: &DVector<f64>, lambda: f64, b: &mut DVector<f64>, tol: f64, max_iter: usize) {
    let k = s.len();
    let mut vb = v * &*b;
    for _ in 0..max_iter {
        let mut max_delta = 0.0_f64;
        for i in 0..k {
            let vii = v[(i, i)];
            let rho = s[i] - vb[i] + vii * b[i];
            let new = soft_threshold(rho, lambda) / vii;
            let delta = new - b[i];
            if delta != 0.0 {
                b[i] = new;
                vb.axpy(delta, &v.column(i), 1.0);
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta < tol {
            break;
        }
    }
}

/// Symmetric square root of an SPD matrix via its eigendecomposition.
pub fn matrix_sqrt_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spd_power(m, 0.5)
}

/// Inverse symmetric square root of an SPD matrix.
pub fn matrix_inv_sqrt_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spd_power(m, -0.5)
}

fn spd_power(m: &DMatrix<f64>, power: f64) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::InvalidInput("matrix must be square".into()));
    }
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let max = eig.eigenvalues.amax();
    let tol = 1e-12 * max.max(f64::MIN_POSITIVE);
    if eig.eigenvalues.iter().any(|&e| !(e > tol)) {
        return Err(Error::NotPositiveDefinite(format!(
            "minimum eigenvalue {:e}",
            eig.eigenvalues.min()
        )));
    }
    let d = eig.eigenvalues.map(|e| e.powf(power));
    let u = &eig.eigenvectors;
    Ok(symmetrize(&(u * DMatrix::from_diagonal(&d) * u.transpose())))
}

/// Moore–Penrose pseudo-inverse via the SVD.
///
/// Singular values below `rank_tol · σ_max` are treated as zero.
pub fn pseudo_inverse(m: &DMatrix<f64>, rank_tol: f64) -> DMatrix<f64> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(c, r);
    }
    let svd = SVD::new(m.clone(), true, true);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return DMatrix::zeros(c, r);
    }
    let cut = rank_tol * smax;
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut out = DMatrix::zeros(c, r);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cut {
            out += vt.row(i).transpose() * u.column(i).transpose() / s;
        }
    }
    out
}

/// Numerical rank with the same relative cut-off as [`pseudo_inverse`].
pub fn numerical_rank(m: &DMatrix<f64>, rank_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = SVD::new(m.clone(), false, false).singular_values;
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rank_tol * smax).count()
}

/// `log|M|` of an SPD matrix.
pub fn log_det_spd(m: &DMatrix<f64>) -> Result<f64> {
    let chol = Cholesky::new(m.clone())
        .ok_or_else(|| Error::NotPositiveDefinite("log-determinant of non-SPD matrix".into()))?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn check_rows(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(Error::InvalidInput(format!(
            "row mismatch: X has {} rows, Y has {}",
            x.nrows(),
            y.nrows()
        )));
    }
    Ok(())
}

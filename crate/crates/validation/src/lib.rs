//! Random instances shared by the acceptance checks.

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sparsecoint::VecmDesign;

/// Matrix of independent standard normals.
pub fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

/// Well-conditioned symmetric positive definite matrix.
pub fn random_spd(rng: &mut ChaCha8Rng, q: usize) -> DMatrix<f64> {
    let a = randn(rng, q + 3, q);
    a.tr_mul(&a) / (q + 3) as f64 + DMatrix::identity(q, q) * 0.1
}

/// Design with Gaussian Y and X and random-walk levels Z.
pub fn random_design(rng: &mut ChaCha8Rng, n: usize, q: usize, k: usize) -> VecmDesign {
    let walk = |rng: &mut ChaCha8Rng| {
        let mut z = randn(rng, n, q);
        for i in 1..n {
            let prev = z.row(i - 1).into_owned();
            let next = z.row(i) + prev;
            z.set_row(i, &next);
        }
        z
    };
    VecmDesign {
        y: randn(rng, n, q),
        x: randn(rng, n, k),
        z: walk(rng),
        lag: 1,
        intercept: false,
    }
}

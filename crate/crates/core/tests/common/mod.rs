#![allow(dead_code)]

use ksym::exprlang::{parse, Ast, Side};
use ksym::geometry::{Dims, PhaseKVector};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STRING_H: &str = "0.5*(p1_1^2/4 - p2_1^2/1)";
pub const STRING_L: &str = "(4/2)*v1_1^2 - (1/2)*v1_2^2";

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn d12() -> Dims {
    Dims::new(1, 2).unwrap()
}

pub fn ham(src: &str, dims: Dims) -> Ast {
    parse(src, dims.env(Side::Hamiltonian)).unwrap()
}

pub fn lag(src: &str, dims: Dims) -> Ast {
    parse(src, dims.env(Side::Lagrangian)).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Exact decimal text of a float, parenthesized so signs parse as unary minus.
pub fn lit(x: f64) -> String {
    format!("({x:?})")
}

/// A regular quadratic Lagrangian
/// `1/2 v^T M v + sum B_{i,alpha} q^i v^alpha + sum c_alpha v^alpha - sum d_i (q^i)^2`
/// with `M` symmetric, eigenvalues of magnitude in `[0.5, 2]` and random signs.
/// Returns the expression and `M` in A-major velocity order.
pub fn random_quadratic_lagrangian(rng: &mut ChaCha8Rng, dims: Dims) -> (Ast, DMatrix<f64>) {
    let n = dims.n;
    let m = dims.n * dims.k;
    let raw = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
    let q = raw.qr().q();
    let lambda = DVector::from_fn(m, |_, _| {
        let mag = rng.gen_range(0.5..2.0);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    });
    let mut hess = &q * DMatrix::from_diagonal(&lambda) * q.transpose();
    hess = (&hess + hess.transpose()) * 0.5;
    let env = dims.env(Side::Lagrangian);
    let v = |alpha: usize| env.name(n + alpha);
    let mut terms = Vec::new();
    for a in 0..m {
        terms.push(format!("0.5*{}*{}^2", lit(hess[(a, a)]), v(a)));
        for b in a + 1..m {
            terms.push(format!("{}*{}*{}", lit(hess[(a, b)]), v(a), v(b)));
        }
    }
    for i in 0..n {
        for a in 0..m {
            terms.push(format!("{}*q{}*{}", lit(rng.gen_range(-1.0..1.0)), i + 1, v(a)));
        }
        terms.push(format!("-{}*q{}^2", lit(rng.gen_range(0.0..1.0)), i + 1));
    }
    for a in 0..m {
        terms.push(format!("{}*{}", lit(rng.gen_range(-1.0..1.0)), v(a)));
    }
    let src = terms.join(" + ");
    (parse(&src, env).unwrap(), hess)
}

/// Random element of ker(flat): zero base part, fiber traces cancelled on
/// the last leg so the sum is exactly zero.
pub fn random_flat_kernel(rng: &mut ChaCha8Rng, dims: Dims) -> PhaseKVector {
    let Dims { n, k } = dims;
    let mut z = PhaseKVector::zeros(dims);
    for v in z.fiber.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    for i in 0..n {
        let partial: f64 = (0..k - 1).map(|a| z.fiber_at(a, a, i)).sum();
        // the trace sums legs in order, so it evaluates to partial + (-partial) = 0
        z.set_fiber(k - 1, k - 1, i, -partial);
    }
    z
}

/// Matrix of the fiber contraction `sum_{A,j,B} H[(A,i),(B,j)] (Z_A)^j_B`
/// acting on the fiber vector layout `(a * k + b) * n + j`.
pub fn lagrangian_contraction(hess: &DMatrix<f64>, dims: Dims) -> DMatrix<f64> {
    let Dims { n, k } = dims;
    DMatrix::from_fn(n, k * k * n, |i, c| {
        let a = c / (k * n);
        let bj = c % (k * n);
        hess[(a * n + i, bj)]
    })
}

//! Lagrangian side: Legendre map, energy, the musical map built from the
//! Poincaré-Cartan forms, Euler-Lagrange field equations and the Lagrangian
//! Hamilton-Jacobi checks on the k-velocity bundle.
//!
//! Velocity Hessians ("big Hessians") are `(n*k) x (n*k)` matrices indexed
//! by `a * n + i` for `v^i_A`, i.e. A-major, matching the coordinate layout.

use nalgebra::{DMatrix, DVector};

use crate::exprlang::{Ast, Side};
use crate::geometry::{
    closedness_defects, lattice_derivative, prolong, BaseField, Covector, Dims, GridDefect, GridSolution,
    KVectorFieldQ, PhaseKVector, PhasePointH, PhasePointL, Section,
};
use crate::hamiltonian::HjCheck;
use crate::scalars::{grad, seed, value_grad, value_grad_hess, DomainError, Dual1, Dual2, Scalar, ScalarFn};
use crate::{Error, Result};

/// Relative pivot threshold used by [`regularity`].
pub const PIVOT_THRESHOLD: f64 = 1e-10;
pub const NEWTON_TOLERANCE: f64 = 1e-12;
pub const NEWTON_MAX_ITER: usize = 50;

/// A Lagrangian with an optional candidate section `X` of the base bundle.
#[derive(Debug, Clone)]
pub struct LagrangianProblem {
    pub dims: Dims,
    pub lagrangian: Ast,
    pub section: Option<KVectorFieldQ>,
}

impl LagrangianProblem {
    pub fn new(dims: Dims, lagrangian: Ast, section: Option<KVectorFieldQ>) -> Result<Self> {
        if *lagrangian.env() != dims.env(Side::Lagrangian) {
            return Err(Error::Shape(format!(
                "Lagrangian must be an expression over the (q, v) coordinates of n={}, k={}",
                dims.n, dims.k
            )));
        }
        if let Some(x) = &section {
            if x.dims() != dims {
                return Err(Error::Shape("section dimensions do not match the problem".into()));
            }
        }
        Ok(Self {
            dims,
            lagrangian,
            section,
        })
    }
}

fn dims_of(l: &Ast) -> Result<Dims> {
    let env = l.env();
    if env.side != Side::Lagrangian {
        return Err(Error::Shape(
            "Lagrangian must be written over q and v coordinates".into(),
        ));
    }
    Dims::new(env.n, env.k)
}

fn check_point(l: &Ast, x: &PhasePointL) -> Result<Dims> {
    let dims = dims_of(l)?;
    if x.dims() != dims {
        return Err(Error::Shape("point does not match the Lagrangian dimensions".into()));
    }
    Ok(dims)
}

/// Value, gradient and full Hessian of `L` at a point.
fn second_order(l: &Ast, x: &PhasePointL) -> Result<Dual2> {
    check_point(l, x)?;
    Ok(value_grad_hess(l, &x.coords())?)
}

fn velocity_block(d: &Dual2, dims: Dims) -> DMatrix<f64> {
    let n = dims.n;
    let m = dims.n * dims.k;
    d.hessian.view((n, n), (m, m)).into_owned()
}

/// `d^2 L / dv^i_A dv^j_B` at a point.
pub fn big_hessian(l: &Ast, x: &PhasePointL) -> Result<DMatrix<f64>> {
    let d = second_order(l, x)?;
    Ok(velocity_block(&d, x.dims()))
}

/// Legendre map `(q, v) -> (q, dL/dv)`.
pub fn legendre(l: &Ast, x: &PhasePointL) -> Result<PhasePointH> {
    let dims = check_point(l, x)?;
    let g = grad(l, &x.coords())?;
    let mut coords = x.q.as_slice().to_vec();
    coords.extend_from_slice(&g[dims.n..]);
    Ok(PhasePointH::from_coords(dims, &coords))
}

/// Pivot diagnostics of the velocity Hessian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularityReport {
    pub min_pivot: f64,
    pub max_pivot: f64,
    /// `max |pivot| / min |pivot|` (infinite when singular).
    pub condition_estimate: f64,
    pub threshold: f64,
    pub regular: bool,
}

/// Full-pivot elimination on `m`; regular when every pivot magnitude exceeds
/// `PIVOT_THRESHOLD * |m|_inf`.
pub fn matrix_regularity(m: &DMatrix<f64>) -> RegularityReport {
    let norm = m
        .row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let threshold = PIVOT_THRESHOLD * norm;
    let lu = m.clone().full_piv_lu();
    let u = lu.u();
    let pivots: Vec<f64> = (0..m.nrows().min(m.ncols())).map(|i| u[(i, i)].abs()).collect();
    let min_pivot = pivots.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_pivot = pivots.iter().cloned().fold(0.0, f64::max);
    let regular = norm > 0.0 && pivots.iter().all(|&p| p > threshold);
    RegularityReport {
        min_pivot,
        max_pivot,
        condition_estimate: if min_pivot > 0.0 {
            max_pivot / min_pivot
        } else {
            f64::INFINITY
        },
        threshold,
        regular,
    }
}

pub fn regularity(l: &Ast, x: &PhasePointL) -> Result<RegularityReport> {
    Ok(matrix_regularity(&big_hessian(l, x)?))
}

fn require_regular(h: &DMatrix<f64>) -> Result<()> {
    let report = matrix_regularity(h);
    if !report.regular {
        return Err(Error::Regularity {
            min_pivot: report.min_pivot,
            threshold: report.threshold,
        });
    }
    Ok(())
}

/// `E_L = v^i_A dL/dv^i_A - L` as a function on the velocity bundle.
#[derive(Debug, Clone, Copy)]
pub struct EnergyFn<'a> {
    lagrangian: &'a Ast,
}

impl<'a> EnergyFn<'a> {
    pub fn new(lagrangian: &'a Ast) -> Self {
        Self { lagrangian }
    }
}

impl ScalarFn for EnergyFn<'_> {
    fn eval_at<S: Scalar>(&self, x: &[S]) -> std::result::Result<S, DomainError> {
        let n = self.lagrangian.env().n;
        let m = x.len() - n;
        let coords: Vec<Dual1<S>> = x
            .iter()
            .enumerate()
            .map(|(j, v)| {
                if j < n {
                    Dual1::new(v.clone(), Vec::new())
                } else {
                    Dual1::variable(v.clone(), j - n, m)
                }
            })
            .collect();
        let l = self.lagrangian.eval_at(&coords)?;
        let mut e = -l.value.clone();
        for j in 0..m {
            e = e + x[n + j].clone() * l.partial(j);
        }
        Ok(e)
    }
}

pub fn energy(l: &Ast, x: &PhasePointL) -> Result<f64> {
    check_point(l, x)?;
    let e = EnergyFn::new(l).eval_at(&x.coords())?;
    if !e.is_finite() {
        return Err(DomainError::NonFinite { index: None }.into());
    }
    Ok(e)
}

/// `dE_L` at a point.
pub fn energy_differential(l: &Ast, x: &PhasePointL) -> Result<Covector> {
    let dims = check_point(l, x)?;
    let g = grad(&EnergyFn::new(l), &x.coords())?;
    Ok(Covector::from_gradient(dims, &g))
}

/// Inverts the Legendre map at `y` by Newton iteration on
/// `F(v) = dL/dv(q, v) - p`, starting from `v_init` (zero if `None`).
/// A step that fails to decrease `|F|_inf` is halved until it does.
pub fn legendre_inverse(l: &Ast, y: &PhasePointH, v_init: Option<&DMatrix<f64>>) -> Result<PhasePointL> {
    let dims = dims_of(l)?;
    if y.dims() != dims {
        return Err(Error::Shape("point does not match the Lagrangian dimensions".into()));
    }
    let Dims { n, k } = dims;
    let target: Vec<f64> = y.coords()[n..].to_vec();
    let scale = target.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let tolerance = NEWTON_TOLERANCE * scale;
    let mut x = PhasePointL {
        q: y.q.clone(),
        v: v_init.cloned().unwrap_or_else(|| DMatrix::zeros(n, k)),
    };
    if x.v.shape() != (n, k) {
        return Err(Error::Shape(format!("initial guess must be {n} x {k}")));
    }
    let residual_at = |x: &PhasePointL| -> Result<(Dual2, DVector<f64>)> {
        let d = second_order(l, x)?;
        let f = DVector::from_fn(n * k, |j, _| d.gradient[n + j] - target[j]);
        Ok((d, f))
    };
    let (mut d, mut f) = residual_at(&x)?;
    for _ in 0..NEWTON_MAX_ITER {
        let norm = f.amax();
        if norm < tolerance {
            return Ok(x);
        }
        let hess = velocity_block(&d, dims);
        require_regular(&hess)?;
        let step = hess.full_piv_lu().solve(&(-&f)).ok_or(Error::Regularity {
            min_pivot: 0.0,
            threshold: 0.0,
        })?;
        let mut factor = 1.0;
        loop {
            let mut trial = x.clone();
            for a in 0..k {
                for i in 0..n {
                    trial.v[(i, a)] += factor * step[a * n + i];
                }
            }
            let (td, tf) = residual_at(&trial)?;
            if tf.amax() < norm || factor < 1e-8 {
                x = trial;
                d = td;
                f = tf;
                break;
            }
            factor *= 0.5;
        }
    }
    let residual = f.amax();
    if residual < tolerance {
        return Ok(x);
    }
    Err(Error::Iteration {
        iterations: NEWTON_MAX_ITER,
        residual,
    })
}

/// `flat_L(Z)` at `x`:
/// `[(L_{q^i v^j_A} - L_{q^j v^i_A}) Z^j_A - L_{v^j_B v^i_A} (Z_A)^j_B] dq^i
///  + L_{v^j_B v^i_A} Z^i_A dv^j_B`.
pub fn flat_l(z: &PhaseKVector, l: &Ast, x: &PhasePointL) -> Result<Covector> {
    let dims = check_point(l, x)?;
    if z.dims != dims {
        return Err(Error::Shape("k-vector does not match the Lagrangian dimensions".into()));
    }
    let d = second_order(l, x)?;
    let Dims { n, k } = dims;
    let hq = |i: usize, a: usize, j: usize| d.hessian[(i, n + a * n + j)];
    let hv = |a: usize, i: usize, b: usize, j: usize| d.hessian[(n + a * n + i, n + b * n + j)];
    let mut out = Covector::zeros(dims);
    for i in 0..n {
        let mut acc = 0.0;
        for a in 0..k {
            for j in 0..n {
                acc += (hq(i, a, j) - hq(j, a, i)) * z.base_at(a, j);
            }
        }
        for a in 0..k {
            for b in 0..k {
                for j in 0..n {
                    acc -= hv(b, j, a, i) * z.fiber_at(a, b, j);
                }
            }
        }
        out.base[i] = acc;
    }
    for b in 0..k {
        for j in 0..n {
            let mut acc = 0.0;
            for a in 0..k {
                for i in 0..n {
                    acc += hv(b, j, a, i) * z.base_at(a, i);
                }
            }
            out.fiber[(b, j)] = acc;
        }
    }
    Ok(out)
}

/// Which solution of the underdetermined fiber equations to return.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LagrangianGauge {
    /// Minimum Euclidean norm over all fiber components.
    #[default]
    MinNorm,
    /// Minimum norm with all fiber components outside leg `A = 1` set to zero.
    FirstLeg,
}

/// Solution of `flat_L(Z) = dE_L` with `Z^i_A = v^i_A`.
#[derive(Debug, Clone)]
pub struct LagrangianField {
    lagrangian: Ast,
    dims: Dims,
    gauge: LagrangianGauge,
}

impl LagrangianField {
    pub fn with_gauge(mut self, gauge: LagrangianGauge) -> Self {
        self.gauge = gauge;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Evaluates the field at a regular point.
    ///
    /// The fiber components solve the n equations
    /// `sum_{A,j,B} L_{v^i_A v^j_B} (Z_A)^j_B = L_{q^i} - L_{q^j v^i_A} v^j_A`.
    pub fn eval(&self, x: &PhasePointL) -> Result<PhaseKVector> {
        let d = second_order(&self.lagrangian, x)?;
        let Dims { n, k } = self.dims;
        let hv = velocity_block(&d, self.dims);
        require_regular(&hv)?;
        let mut z = PhaseKVector::zeros(self.dims);
        for a in 0..k {
            for i in 0..n {
                z.base[a * n + i] = x.v[(i, a)];
            }
        }
        let rhs = DVector::from_fn(n, |i, _| {
            let mut r = d.gradient[i];
            for a in 0..k {
                for j in 0..n {
                    r -= d.hessian[(j, n + a * n + i)] * x.v[(j, a)];
                }
            }
            r
        });
        let legs = match self.gauge {
            LagrangianGauge::MinNorm => k,
            LagrangianGauge::FirstLeg => 1,
        };
        // unknown (a, b, j) for a < legs sits in column (a * k + b) * n + j
        let cols = legs * k * n;
        let m = DMatrix::from_fn(n, cols, |i, c| {
            let a = c / (k * n);
            let bj = c % (k * n);
            hv[(a * n + i, bj)]
        });
        let gram = &m * m.transpose();
        let y = gram.lu().solve(&rhs).ok_or(Error::Regularity {
            min_pivot: 0.0,
            threshold: 0.0,
        })?;
        let sol = m.transpose() * y;
        z.fiber[..cols].copy_from_slice(sol.as_slice());
        Ok(z)
    }
}

/// Lagrangian k-vector field of `l` in the minimum-norm gauge.
pub fn build_lagrangian_kvf(l: &Ast) -> Result<LagrangianField> {
    Ok(LagrangianField {
        lagrangian: l.clone(),
        dims: dims_of(l)?,
        gauge: LagrangianGauge::MinNorm,
    })
}

/// The one-forms `X^* theta_L^A`, with coefficients `dL/dv^i_A (q, X(q))`.
#[derive(Debug, Clone)]
pub struct PullbackTheta<X> {
    lagrangian: Ast,
    section: X,
}

impl<X: BaseField> Section for PullbackTheta<X> {
    fn dims(&self) -> Dims {
        self.section.dims()
    }

    fn eval_forms<S: Scalar>(&self, q: &[S]) -> Result<Vec<S>> {
        let v = self.section.eval_field(q)?;
        let m = v.len();
        let mut coords: Vec<Dual1<S>> = q.iter().map(|c| Dual1::new(c.clone(), Vec::new())).collect();
        coords.extend(v.into_iter().enumerate().map(|(j, c)| Dual1::variable(c, j, m)));
        let out = self.lagrangian.eval(&coords)?;
        Ok((0..m).map(|j| out.partial(j)).collect())
    }
}

pub fn pullback_theta_l<X: BaseField + Clone>(x: &X, l: &Ast) -> Result<PullbackTheta<X>> {
    if dims_of(l)? != x.dims() {
        return Err(Error::Shape("section and Lagrangian dimensions differ".into()));
    }
    Ok(PullbackTheta {
        lagrangian: l.clone(),
        section: x.clone(),
    })
}

/// `sup |d(E_L o X)|` over the sample. Requires every `X^* theta_L^A` to
/// be closed within `closed_tolerance`.
pub fn lagrangian_hj_residual<X: BaseField + Clone>(
    l: &Ast,
    x: &X,
    sample: &[Vec<f64>],
    closed_tolerance: f64,
) -> Result<HjCheck> {
    let theta = pullback_theta_l(x, l)?;
    let defects = closedness_defects(&theta, sample)?;
    if let Some((a, &defect)) = defects.iter().enumerate().find(|(_, &d)| d > closed_tolerance) {
        return Err(Error::Precondition {
            what: format!("X^*omega_L^{} does not vanish", a + 1),
            defect,
            tolerance: closed_tolerance,
        });
    }
    let closedness = defects.iter().cloned().fold(0.0, f64::max);
    let n = x.dims().n;
    let energy_fn = EnergyFn::new(l);
    let mut residual = 0.0_f64;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for q in sample {
        let qd = seed(q);
        let mut coords = qd.clone();
        coords.extend(x.eval_field(&qd)?);
        let e = energy_fn.eval_at(&coords)?;
        if !e.all_finite() {
            return Err(DomainError::NonFinite { index: None }.into());
        }
        for j in 0..n {
            residual = residual.max(e.partial(j).abs());
        }
        lo = lo.min(e.value);
        hi = hi.max(e.value);
    }
    Ok(HjCheck {
        residual,
        spread: hi - lo,
        closedness,
    })
}

/// Residual of the Euler-Lagrange field equations
/// `sum_A d/dt^A (dL/dv^i_A) = dL/dq^i` along the prolongation of `g`.
///
/// The sup runs over nodes whose divergence stencil only touches centrally
/// differenced velocities, i.e. two nodes away from every face on axes with
/// at least five nodes (one node away otherwise). Next to a face the
/// one-sided velocities would degrade the nested difference to first order.
pub fn el_residual(g: &GridSolution, l: &Ast) -> Result<GridDefect> {
    let jet = prolong(g)?;
    let dims = dims_of(l)?;
    if dims != jet.dims {
        return Err(Error::Shape(format!(
            "grid has (n, k) = ({}, {}) but the Lagrangian expects ({}, {})",
            jet.dims.n, jet.dims.k, dims.n, dims.k
        )));
    }
    let Dims { n, k } = dims;
    let lattice = &g.lattice;
    let width = n * k;
    let mut momenta = Vec::with_capacity(lattice.len() * width);
    let mut forces = Vec::with_capacity(lattice.len() * n);
    for node in 0..lattice.len() {
        let d = value_grad(l, jet.coords_at(node)).map_err(|e| lattice.locate(node, e.into()))?;
        forces.extend((0..n).map(|i| d.partial(i)));
        momenta.extend((0..width).map(|j| d.partial(n + j)));
    }
    let mut out = GridDefect::zero();
    for node in 0..lattice.len() {
        let multi = lattice.multi(node);
        let inside = multi.iter().zip(lattice.steps()).all(|(&j, &s)| {
            let margin = if s >= 4 { 2 } else { 1 };
            j >= margin && j + margin <= s
        });
        if !inside {
            continue;
        }
        for i in 0..n {
            let divergence: f64 = (0..k)
                .map(|a| lattice_derivative(lattice, &momenta, width, a * n + i, &multi, a))
                .sum();
            out.update((divergence - forces[node * n + i]).abs(), node);
        }
    }
    Ok(out)
}

/// `sup |H(FL(x)) - E_L(x)|` over the sample.
pub fn consistency_h_el(l: &Ast, h: &Ast, sample: &[PhasePointL]) -> Result<f64> {
    let mut sup = 0.0_f64;
    for x in sample {
        require_regular(&big_hessian(l, x)?)?;
        let y = legendre(l, x)?;
        let hv = h.eval(&y.coords())?;
        sup = sup.max((hv - energy(l, x)?).abs());
    }
    Ok(sup)
}

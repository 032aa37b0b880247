//! Integral sections of k-vector fields on the base: the characteristics
//! step of the Hamilton-Jacobi method.
//!
//! The grid is filled by an axis-ordered sweep. Starting from `q0` at
//! `t_min`, fixed-step RK4 along the first axis fills one line, then every
//! node of that line is continued along the second axis, and so on. For an
//! integrable field the result does not depend on the axis order, which
//! [`path_independence_defect`] measures.

use crate::geometry::{BaseField, Dims, GridSolution, Lattice, PhaseGrid, Section};
use crate::scalars::{seed, DomainError, Scalar};
use crate::{Error, Result};

/// Default bound on the commutator defect accepted by [`solve_characteristics`].
pub const DEFAULT_INTEGRABILITY_TOL: f64 = 1e-9;

/// Cap on the number of solved nodes at which integrability is re-checked.
pub const INTEGRABILITY_SAMPLE_CAP: usize = 2_000;

/// Parameter box, step counts and initial point.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub lattice: Lattice,
    pub q0: Vec<f64>,
}

impl GridSpec {
    pub fn new(lattice: Lattice, q0: Vec<f64>) -> Result<Self> {
        lattice.require_three_nodes()?;
        if q0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("initial point must be finite".into()));
        }
        Ok(Self { lattice, q0 })
    }

    fn check(&self, dims: Dims) -> Result<()> {
        if self.lattice.k() != dims.k || self.q0.len() != dims.n {
            return Err(Error::Shape(format!(
                "grid has k={} and q0 of length {}, field has (n, k) = ({}, {})",
                self.lattice.k(),
                self.q0.len(),
                dims.n,
                dims.k
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub integrability_tol: f64,
    /// Keep the solution even when the commutator defect exceeds the tolerance.
    pub override_integrability: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            integrability_tol: DEFAULT_INTEGRABILITY_TOL,
            override_integrability: false,
        }
    }
}

/// `sup |[X_A, X_B]^i|` over the sample and all pairs `A < B`.
pub fn commutator_defect<X: BaseField>(x: &X, sample: &[Vec<f64>]) -> Result<f64> {
    let Dims { n, k } = x.dims();
    if k < 2 {
        return Ok(0.0);
    }
    let mut sup = 0.0_f64;
    for q in sample {
        if q.len() != n {
            return Err(Error::Shape(format!(
                "sample point has {} coordinates, expected {n}",
                q.len()
            )));
        }
        let f = x.eval_field(&seed(q))?;
        for a in 0..k {
            for b in a + 1..k {
                for i in 0..n {
                    let mut bracket = 0.0;
                    for j in 0..n {
                        bracket +=
                            f[a * n + j].value * f[b * n + i].partial(j) - f[b * n + j].value * f[a * n + i].partial(j);
                    }
                    if !bracket.is_finite() {
                        return Err(DomainError::NonFinite { index: Some(i) }.into());
                    }
                    sup = sup.max(bracket.abs());
                }
            }
        }
    }
    Ok(sup)
}

fn rk4_step<X: BaseField>(x: &X, a: usize, q: &[f64], h: f64) -> Result<Vec<f64>> {
    let shift = |base: &[f64], k: &[f64], c: f64| -> Vec<f64> { base.iter().zip(k).map(|(b, d)| b + c * d).collect() };
    let k1 = x.eval_leg(a, q)?;
    let k2 = x.eval_leg(a, &shift(q, &k1, 0.5 * h))?;
    let k3 = x.eval_leg(a, &shift(q, &k2, 0.5 * h))?;
    let k4 = x.eval_leg(a, &shift(q, &k3, h))?;
    Ok((0..q.len())
        .map(|i| q[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Axis-ordered RK4 sweep with an explicit axis order (a permutation of
/// `0..k`). No integrability check.
pub fn sweep<X: BaseField>(x: &X, spec: &GridSpec, order: &[usize]) -> Result<GridSolution> {
    let dims = x.dims();
    spec.check(dims)?;
    let lattice = &spec.lattice;
    let k = lattice.k();
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..k).collect::<Vec<_>>() {
        return Err(Error::Argument(format!("{order:?} is not an ordering of the {k} axes")));
    }
    let n = dims.n;
    let mut values = vec![f64::NAN; lattice.len() * n];
    values[..n].copy_from_slice(&spec.q0);
    for (pos, &axis) in order.iter().enumerate() {
        let pending = &order[pos..];
        let h = lattice.spacing(axis);
        let stride = lattice.stride(axis);
        for start in 0..lattice.len() {
            let multi = lattice.multi(start);
            if pending.iter().any(|&b| multi[b] != 0) {
                continue;
            }
            let mut node = start;
            let mut q = values[node * n..(node + 1) * n].to_vec();
            for _ in 0..lattice.steps()[axis] {
                let blow_up = |node: usize| {
                    let multi = lattice.multi(node);
                    let t = lattice.t_at(&multi);
                    Error::BlowUp { node: multi, t }
                };
                let next = match rk4_step(x, axis, &q, h) {
                    Ok(next) => next,
                    Err(Error::Domain(DomainError::NonFinite { .. })) => return Err(blow_up(node + stride)),
                    Err(e) => return Err(lattice.locate(node, e)),
                };
                node += stride;
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(blow_up(node));
                }
                values[node * n..(node + 1) * n].copy_from_slice(&next);
                q = next;
            }
        }
    }
    GridSolution::new(lattice.clone(), n, values)
}

/// Up to `cap` solved node values, evenly strided.
pub fn traversed_sample(g: &GridSolution, cap: usize) -> Vec<Vec<f64>> {
    let len = g.lattice.len();
    let stride = len.div_ceil(cap.max(1)).max(1);
    (0..len).step_by(stride).map(|node| g.point(node).to_vec()).collect()
}

/// Integral section of `x` through `q0` on the grid.
///
/// After solving, the commutator defect is evaluated on (a subsample of)
/// the solved nodes; above `opts.integrability_tol` the result is rejected
/// unless `opts.override_integrability` is set.
pub fn solve_characteristics<X: BaseField>(x: &X, spec: &GridSpec, opts: SolveOptions) -> Result<GridSolution> {
    let order: Vec<usize> = (0..spec.lattice.k()).collect();
    let g = sweep(x, spec, &order)?;
    if !opts.override_integrability {
        let defect = commutator_defect(x, &traversed_sample(&g, INTEGRABILITY_SAMPLE_CAP))?;
        if defect > opts.integrability_tol {
            return Err(Error::Integrability {
                defect,
                tolerance: opts.integrability_tol,
            });
        }
    }
    Ok(g)
}

/// Sup node-wise distance between the sweeps in axis order and in reversed
/// axis order.
pub fn path_independence_defect<X: BaseField>(x: &X, spec: &GridSpec) -> Result<f64> {
    let k = spec.lattice.k();
    if k < 2 {
        spec.check(x.dims())?;
        return Ok(0.0);
    }
    let forward: Vec<usize> = (0..k).collect();
    let reversed: Vec<usize> = (0..k).rev().collect();
    let a = sweep(x, spec, &forward)?;
    let b = sweep(x, spec, &reversed)?;
    Ok(a.values
        .iter()
        .zip(&b.values)
        .fold(0.0_f64, |m, (u, v)| m.max((u - v).abs())))
}

/// Node-wise `(psi(t), gamma(psi(t)))`.
pub fn compose_solution<G: Section>(gamma: &G, g: &GridSolution) -> Result<PhaseGrid> {
    let dims = gamma.dims();
    if g.n != dims.n || g.lattice.k() != dims.k {
        return Err(Error::Shape(format!(
            "grid has (n, k) = ({}, {}) but the section expects ({}, {})",
            g.n,
            g.lattice.k(),
            dims.n,
            dims.k
        )));
    }
    let mut coords = Vec::with_capacity(g.lattice.len() * dims.bundle_len());
    for node in 0..g.lattice.len() {
        let q = g.point(node);
        let p = gamma.eval_forms(q).map_err(|e| g.lattice.locate(node, e))?;
        if let Some(i) = p.iter().position(|v| !v.all_finite()) {
            return Err(g.lattice.locate(node, DomainError::NonFinite { index: Some(i) }.into()));
        }
        coords.extend_from_slice(q);
        coords.extend(p);
    }
    PhaseGrid::new(g.lattice.clone(), dims, coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprlang::{parse, Side};
    use crate::geometry::{integral_section_residual, sample_box, KVectorFieldQ, SectionGamma};
    use crate::hamiltonian::{build_hamiltonian_kvf, project_gamma};

    fn d12() -> Dims {
        Dims::new(1, 2).unwrap()
    }

    fn string_field() -> KVectorFieldQ {
        KVectorFieldQ::parse(d12(), &["0.5*q1", "-q1"]).unwrap()
    }

    fn unit_spec(steps: usize, q0: Vec<f64>) -> GridSpec {
        let lattice = Lattice::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![steps, steps]).unwrap();
        GridSpec::new(lattice, q0).unwrap()
    }

    fn max_relative_error(g: &GridSolution) -> f64 {
        (0..g.lattice.len())
            .map(|node| {
                let t = g.lattice.t_at(&g.lattice.multi(node));
                let exact = (0.5 * t[0] - t[1]).exp();
                ((g.point(node)[0] - exact) / exact).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn commutator_examples() {
        let line = sample_box(1, -1.0, 1.0, 101, 100_000);
        assert_eq!(commutator_defect(&string_field(), &line).unwrap(), 0.0);
        let constant = KVectorFieldQ::parse(d12(), &["3", "-2"]).unwrap();
        assert_eq!(commutator_defect(&constant, &line).unwrap(), 0.0);
        let d22 = Dims::new(2, 2).unwrap();
        let pair = KVectorFieldQ::parse(d22, &["1", "0", "0", "q1"]).unwrap();
        let plane = sample_box(2, -1.0, 1.0, 11, 1000);
        assert_eq!(commutator_defect(&pair, &plane).unwrap(), 1.0);
        let d11 = Dims::new(1, 1).unwrap();
        let single = KVectorFieldQ::parse(d11, &["q1^2"]).unwrap();
        assert_eq!(commutator_defect(&single, &line).unwrap(), 0.0);
    }

    #[test]
    fn string_characteristics_match_closed_form() {
        let g = solve_characteristics(&string_field(), &unit_spec(100, vec![1.0]), SolveOptions::default()).unwrap();
        assert!(max_relative_error(&g) < 1e-8);
    }

    #[test]
    fn rk4_error_ratio() {
        let coarse = sweep(&string_field(), &unit_spec(10, vec![1.0]), &[0, 1]).unwrap();
        let fine = sweep(&string_field(), &unit_spec(20, vec![1.0]), &[0, 1]).unwrap();
        let ratio = max_relative_error(&coarse) / max_relative_error(&fine);
        assert!((14.0..=18.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn trivial_fields() {
        let zero = KVectorFieldQ::parse(d12(), &["0", "0"]).unwrap();
        let g = solve_characteristics(&zero, &unit_spec(4, vec![0.7]), SolveOptions::default()).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.7));

        let constant = KVectorFieldQ::parse(d12(), &["0.5", "-0.25"]).unwrap();
        let g = solve_characteristics(&constant, &unit_spec(8, vec![1.0]), SolveOptions::default()).unwrap();
        for node in 0..g.lattice.len() {
            let t = g.lattice.t_at(&g.lattice.multi(node));
            assert_eq!(g.point(node)[0], 1.0 + 0.5 * t[0] - 0.25 * t[1]);
        }
        assert!(integral_section_residual(&g, &constant).unwrap().sup < 1e-14);
    }

    #[test]
    fn non_commuting_pair() {
        let d22 = Dims::new(2, 2).unwrap();
        let pair = KVectorFieldQ::parse(d22, &["1", "0", "0", "q1"]).unwrap();
        let spec = unit_spec(10, vec![0.0, 0.0]);
        let err = solve_characteristics(&pair, &spec, SolveOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Integrability { defect, .. } if defect == 1.0));
        let forced = SolveOptions {
            override_integrability: true,
            ..SolveOptions::default()
        };
        assert!(solve_characteristics(&pair, &spec, forced).is_ok());
        // the two orders differ by t1 * t2 in the second coordinate
        let small = path_independence_defect(&pair, &unit_spec(10, vec![0.0, 0.0])).unwrap();
        assert!((small - 1.0).abs() < 1e-12);
        let lattice = Lattice::new(vec![0.0, 0.0], vec![2.0, 2.0], vec![10, 10]).unwrap();
        let large = path_independence_defect(&pair, &GridSpec::new(lattice, vec![0.0, 0.0]).unwrap()).unwrap();
        assert!((large - 4.0).abs() < 1e-12);
    }

    #[test]
    fn string_is_path_independent() {
        assert!(path_independence_defect(&string_field(), &unit_spec(100, vec![1.0])).unwrap() < 1e-8);
        let d11 = Dims::new(1, 1).unwrap();
        let single = KVectorFieldQ::parse(d11, &["q1"]).unwrap();
        let lattice = Lattice::new(vec![0.0], vec![1.0], vec![5]).unwrap();
        assert_eq!(
            path_independence_defect(&single, &GridSpec::new(lattice, vec![1.0]).unwrap()).unwrap(),
            0.0
        );
    }

    #[test]
    fn blow_up_is_located() {
        let d11 = Dims::new(1, 1).unwrap();
        let riccati = KVectorFieldQ::parse(d11, &["q1^2"]).unwrap();
        let lattice = Lattice::new(vec![0.0], vec![3.0], vec![30]).unwrap();
        let err = sweep(&riccati, &GridSpec::new(lattice, vec![1.0]).unwrap(), &[0]).unwrap_err();
        assert!(matches!(err, Error::BlowUp { .. }), "{err}");
    }

    #[test]
    fn evaluation_errors_carry_the_node() {
        let d11 = Dims::new(1, 1).unwrap();
        let root = KVectorFieldQ::parse(d11, &["-sqrt(q1)"]).unwrap();
        let lattice = Lattice::new(vec![0.0], vec![5.0], vec![10]).unwrap();
        let err = sweep(&root, &GridSpec::new(lattice, vec![1.0]).unwrap(), &[0]).unwrap_err();
        assert!(matches!(err, Error::AtNode { .. }), "{err}");
    }

    #[test]
    fn grid_spec_validation() {
        let lattice = Lattice::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![1, 4]).unwrap();
        assert!(GridSpec::new(lattice, vec![0.0]).is_err());
        let spec = unit_spec(4, vec![0.0, 0.0]);
        assert!(matches!(sweep(&string_field(), &spec, &[0, 1]), Err(Error::Shape(_))));
        assert!(sweep(&string_field(), &unit_spec(4, vec![1.0]), &[0, 0]).is_err());
    }

    #[test]
    fn composition_examples() {
        let h = parse("0.5*(p1_1^2/4 - p2_1^2/1)", d12().env(Side::Hamiltonian)).unwrap();
        let gamma = SectionGamma::parse(d12(), &["2*q1", "q1"]).unwrap();
        let projected = project_gamma(&build_hamiltonian_kvf(&h).unwrap(), &gamma).unwrap();
        let g = solve_characteristics(&projected, &unit_spec(20, vec![1.0]), SolveOptions::default()).unwrap();
        let phase = compose_solution(&gamma, &g).unwrap();
        for node in 0..g.lattice.len() {
            let psi = g.point(node)[0];
            assert_eq!(phase.coords_at(node), &[psi, 2.0 * psi, psi]);
        }

        let zero = SectionGamma::parse(d12(), &["0", "0"]).unwrap();
        let phase = compose_solution(&zero, &g).unwrap();
        assert_eq!(phase.coords_at(7)[1..], [0.0, 0.0]);

        let d22 = Dims::new(2, 2).unwrap();
        let wrong = SectionGamma::parse(d22, &["0", "0", "0", "0"]).unwrap();
        assert!(matches!(compose_solution(&wrong, &g), Err(Error::Shape(_))));
    }

    #[test]
    fn compose_commutes_with_restriction() {
        let gamma = SectionGamma::parse(d12(), &["2*q1", "sin(q1)"]).unwrap();
        let g = sweep(&string_field(), &unit_spec(12, vec![1.0]), &[0, 1]).unwrap();
        let (lo, hi) = ([2, 3], [9, 7]);
        let a = compose_solution(&gamma, &g).unwrap().restrict(&lo, &hi).unwrap();
        let b = compose_solution(&gamma, &g.restrict(&lo, &hi).unwrap()).unwrap();
        assert_eq!(a.coords, b.coords);
    }
}

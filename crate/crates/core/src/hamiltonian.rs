//! Hamiltonian side: the musical map of the canonical k-symplectic structure
//! on the k-covelocity bundle, Hamilton field equations, projection of a
//! Hamiltonian k-vector field through a section, and the Hamilton-Jacobi
//! checks.

use crate::exprlang::{Ast, Side};
use crate::geometry::{
    closedness_defect, lattice_derivative, BaseField, Covector, Dims, GridDefect, PhaseGrid, PhaseKVector, PhasePointH,
    Section, SectionGamma,
};
use crate::scalars::{grad, seed, Dual1, Scalar};
use crate::{Error, Result};

/// Default absolute tolerance for AD-exact quantities (closedness, HJ residual).
pub const DEFAULT_AD_TOLERANCE: f64 = 1e-9;

/// A Hamiltonian with an optional candidate section.
#[derive(Debug, Clone)]
pub struct HamiltonianProblem {
    pub dims: Dims,
    pub hamiltonian: Ast,
    pub gamma: Option<SectionGamma>,
}

impl HamiltonianProblem {
    pub fn new(dims: Dims, hamiltonian: Ast, gamma: Option<SectionGamma>) -> Result<Self> {
        if *hamiltonian.env() != dims.env(Side::Hamiltonian) {
            return Err(Error::Shape(format!(
                "Hamiltonian must be an expression over the (q, p) coordinates of n={}, k={}",
                dims.n, dims.k
            )));
        }
        if let Some(g) = &gamma {
            if g.dims() != dims {
                return Err(Error::Shape("section dimensions do not match the problem".into()));
            }
        }
        Ok(Self {
            dims,
            hamiltonian,
            gamma,
        })
    }
}

/// A k-vector field on the k-covelocity bundle, evaluated pointwise.
pub trait PhaseField {
    fn dims(&self) -> Dims;
    fn eval(&self, x: &PhasePointH) -> Result<PhaseKVector>;
}

/// `flat(Z) = sum_A i_{Z_A} omega^A` with `omega^A = dq^i ^ dp^A_i`:
/// the `dq^i` coefficient is `-sum_A (Z_A)^A_i`, the `dp^A_i` coefficient
/// is `Z^i_A`.
pub fn flat(z: &PhaseKVector) -> Covector {
    let Dims { n, k } = z.dims;
    let mut out = Covector::zeros(z.dims);
    for i in 0..n {
        out.base[i] = -z.fiber_trace(i);
        for a in 0..k {
            out.fiber[(a, i)] = z.base_at(a, i);
        }
    }
    out
}

/// Outcome of a kernel membership test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelCheck {
    pub in_kernel: bool,
    pub defect: f64,
}

/// Whether `Z` lies in the kernel of [`flat`] up to `tolerance`.
pub fn in_ker_flat(z: &PhaseKVector, tolerance: f64) -> KernelCheck {
    let defect = flat(z).sup_norm();
    KernelCheck {
        in_kernel: defect < tolerance,
        defect,
    }
}

/// `dH` at a point.
pub fn differential(h: &Ast, x: &PhasePointH) -> Result<Covector> {
    let g = grad(h, &x.coords())?;
    Ok(Covector::from_gradient(x.dims(), &g))
}

/// How the fiber components of a Hamiltonian k-vector field are fixed.
///
/// The field equations only constrain the trace `sum_A (Z_A)^A_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Gauge {
    /// `(Z_A)^B_i = -(delta_A^B / k) dH/dq^i`.
    #[default]
    Symmetric,
    /// `(Z_1)^1_i = -dH/dq^i`, every other fiber component zero.
    FirstLeg,
}

/// Solution of `flat(Z) = dH` in a chosen [`Gauge`].
#[derive(Debug, Clone)]
pub struct HamiltonianField {
    hamiltonian: Ast,
    dims: Dims,
    gauge: Gauge,
}

impl HamiltonianField {
    pub fn hamiltonian(&self) -> &Ast {
        &self.hamiltonian
    }

    pub fn gauge(&self) -> Gauge {
        self.gauge
    }

    pub fn with_gauge(mut self, gauge: Gauge) -> Self {
        self.gauge = gauge;
        self
    }

    /// `Z^i_A = dH/dp^A_i` at `(q, p)` for any scalar type, flattened A-major.
    pub fn base_components<S: Scalar>(&self, q: &[S], p: &[S]) -> Result<Vec<S>> {
        let m = p.len();
        let mut coords: Vec<Dual1<S>> = q.iter().map(|v| Dual1::new(v.clone(), Vec::new())).collect();
        coords.extend(p.iter().enumerate().map(|(j, v)| Dual1::variable(v.clone(), j, m)));
        let out = self.hamiltonian.eval(&coords)?;
        Ok((0..m).map(|j| out.partial(j)).collect())
    }
}

impl PhaseField for HamiltonianField {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn eval(&self, x: &PhasePointH) -> Result<PhaseKVector> {
        let Dims { n, k } = self.dims;
        if x.dims() != self.dims {
            return Err(Error::Shape("phase point does not match the field dimensions".into()));
        }
        let g = grad(&self.hamiltonian, &x.coords())?;
        let mut z = PhaseKVector::zeros(self.dims);
        z.base.copy_from_slice(&g[n..]);
        for (i, gi) in g[..n].iter().enumerate() {
            match self.gauge {
                Gauge::Symmetric => {
                    let share = -gi / k as f64;
                    for a in 0..k {
                        z.set_fiber(a, a, i, share);
                    }
                }
                Gauge::FirstLeg => z.set_fiber(0, 0, i, -gi),
            }
        }
        Ok(z)
    }
}

/// Hamiltonian k-vector field of `h` in the symmetric gauge.
pub fn build_hamiltonian_kvf(h: &Ast) -> Result<HamiltonianField> {
    let env = *h.env();
    if env.side != Side::Hamiltonian {
        return Err(Error::Shape(
            "Hamiltonian must be written over q and p coordinates".into(),
        ));
    }
    Ok(HamiltonianField {
        hamiltonian: h.clone(),
        dims: Dims::new(env.n, env.k)?,
        gauge: Gauge::Symmetric,
    })
}

/// `Z^gamma = T Pi o Z o gamma`: the base components of `Z` along `gamma`.
#[derive(Debug, Clone)]
pub struct ProjectedField<G> {
    field: HamiltonianField,
    gamma: G,
}

impl<G: Section> BaseField for ProjectedField<G> {
    fn dims(&self) -> Dims {
        self.field.dims
    }

    fn eval_field<S: Scalar>(&self, q: &[S]) -> Result<Vec<S>> {
        let p = self.gamma.eval_forms(q)?;
        self.field.base_components(q, &p)
    }
}

pub fn project_gamma<G: Section + Clone>(z: &HamiltonianField, gamma: &G) -> Result<ProjectedField<G>> {
    if gamma.dims() != z.dims {
        return Err(Error::Shape("section and field dimensions differ".into()));
    }
    Ok(ProjectedField {
        field: z.clone(),
        gamma: gamma.clone(),
    })
}

/// Result of a Hamilton-Jacobi check on a sample of base points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HjCheck {
    /// Sup over the sample of `|d(H o gamma)|_inf` (or `d(E_L o X)`).
    pub residual: f64,
    /// `max - min` of the composed function over the sample.
    pub spread: f64,
    /// Closedness defect observed while checking the precondition.
    pub closedness: f64,
}

pub(crate) fn require_closed<G: Section>(gamma: &G, sample: &[Vec<f64>], tolerance: f64) -> Result<f64> {
    let defect = closedness_defect(gamma, sample)?;
    if defect > tolerance {
        return Err(Error::Precondition {
            what: "section is not closed".into(),
            defect,
            tolerance,
        });
    }
    Ok(defect)
}

/// `sup |d(H o gamma)|` over the sample, differentiating through the
/// composition. Requires `gamma` closed within `closed_tolerance`.
pub fn hj_residual<G: Section>(h: &Ast, gamma: &G, sample: &[Vec<f64>], closed_tolerance: f64) -> Result<HjCheck> {
    let closedness = require_closed(gamma, sample, closed_tolerance)?;
    let dims = gamma.dims();
    if *h.env() != dims.env(Side::Hamiltonian) {
        return Err(Error::Shape("Hamiltonian and section dimensions differ".into()));
    }
    let mut residual = 0.0_f64;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for q in sample {
        let qd = seed(q);
        let mut coords = qd.clone();
        coords.extend(gamma.eval_forms(&qd)?);
        let composed = h.eval(&coords)?;
        for j in 0..dims.n {
            residual = residual.max(composed.partial(j).abs());
        }
        lo = lo.min(composed.value);
        hi = hi.max(composed.value);
    }
    Ok(HjCheck {
        residual,
        spread: hi - lo,
        closedness,
    })
}

/// The fiber defect `(Y_A)^B_i = (Z_A)^B_i o gamma - (Z^j_A o gamma) d gamma^B_i / dq^j`
/// of `Z o gamma - T gamma (Z^gamma)` at one base point. Its base
/// components vanish by construction.
pub fn relatedness_vector<Z: PhaseField, G: Section>(z: &Z, gamma: &G, q: &[f64]) -> Result<PhaseKVector> {
    let dims = z.dims();
    let Dims { n, k } = dims;
    let forms = gamma.eval_forms(&seed(q))?;
    let p: Vec<f64> = forms.iter().map(|f| f.value).collect();
    let mut coords = q.to_vec();
    coords.extend_from_slice(&p);
    let zx = z.eval(&PhasePointH::from_coords(dims, &coords))?;
    let mut y = PhaseKVector::zeros(dims);
    for a in 0..k {
        for b in 0..k {
            for i in 0..n {
                let transport: f64 = (0..n).map(|j| zx.base_at(a, j) * forms[b * n + i].partial(j)).sum();
                y.set_fiber(a, b, i, zx.fiber_at(a, b, i) - transport);
            }
        }
    }
    Ok(y)
}

/// Sup over the sample of the kernel defect of `Z o gamma - T gamma(Z^gamma)`.
pub fn relatedness_defect<Z: PhaseField, G: Section>(
    z: &Z,
    gamma: &G,
    sample: &[Vec<f64>],
    closed_tolerance: f64,
    kernel_tolerance: f64,
) -> Result<KernelCheck> {
    require_closed(gamma, sample, closed_tolerance)?;
    if gamma.dims() != z.dims() {
        return Err(Error::Shape("section and field dimensions differ".into()));
    }
    let mut defect = 0.0_f64;
    for q in sample {
        let y = relatedness_vector(z, gamma, q)?;
        defect = defect.max(in_ker_flat(&y, kernel_tolerance).defect);
    }
    Ok(KernelCheck {
        in_kernel: defect < kernel_tolerance,
        defect,
    })
}

/// Residual of the Hamilton field equations on a phase grid, using the
/// field `z` for the right-hand sides:
/// `d sigma^i/dt^A = Z^i_A` and `sum_A d sigma^A_i/dt^A = sum_A (Z_A)^A_i`.
/// Derivatives in `t` are second-order differences; sup over interior nodes.
pub fn hamilton_residual_with<Z: PhaseField>(grid: &PhaseGrid, z: &Z) -> Result<GridDefect> {
    let dims = grid.dims;
    if z.dims() != dims {
        return Err(Error::Shape("phase grid and field dimensions differ".into()));
    }
    grid.lattice.require_three_nodes()?;
    let Dims { n, k } = dims;
    let width = grid.width();
    let mut out = GridDefect::zero();
    for node in 0..grid.lattice.len() {
        let multi = grid.lattice.multi(node);
        if !grid.lattice.is_interior(&multi) {
            continue;
        }
        let zx = z.eval(&grid.point(node)).map_err(|e| grid.lattice.locate(node, e))?;
        for i in 0..n {
            for a in 0..k {
                let dq = lattice_derivative(&grid.lattice, &grid.coords, width, i, &multi, a);
                out.update((dq - zx.base_at(a, i)).abs(), node);
            }
            let divergence: f64 = (0..k)
                .map(|a| lattice_derivative(&grid.lattice, &grid.coords, width, n + a * n + i, &multi, a))
                .sum();
            out.update((divergence - zx.fiber_trace(i)).abs(), node);
        }
    }
    Ok(out)
}

/// [`hamilton_residual_with`] for the symmetric-gauge field of `h`.
pub fn hamilton_residual(grid: &PhaseGrid, h: &Ast) -> Result<GridDefect> {
    hamilton_residual_with(grid, &build_hamiltonian_kvf(h)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprlang::parse;
    use crate::geometry::{sample_box, GridSolution, Lattice};
    use nalgebra::{DMatrix, DVector};

    fn string_h() -> Ast {
        parse(
            "0.5*(p1_1^2/4 - p2_1^2/1)",
            Dims::new(1, 2).unwrap().env(Side::Hamiltonian),
        )
        .unwrap()
    }

    fn string_gamma(a: f64, b: f64) -> SectionGamma {
        SectionGamma::parse(Dims::new(1, 2).unwrap(), &[&format!("{a}*q1"), &format!("{b}*q1")]).unwrap()
    }

    fn line() -> Vec<Vec<f64>> {
        sample_box(1, -1.0, 1.0, 101, 100_000)
    }

    #[test]
    fn flat_expansion() {
        let dims = Dims::new(1, 2).unwrap();
        let mut z = PhaseKVector::zeros(dims);
        assert_eq!(flat(&z).sup_norm(), 0.0);
        z.base = vec![2.0, 7.0];
        z.fiber = vec![3.0, 5.0, 11.0, 13.0];
        let c = flat(&z);
        assert_eq!(c.base[0], -16.0);
        assert_eq!(c.fiber[(0, 0)], 2.0);
        assert_eq!(c.fiber[(1, 0)], 7.0);
    }

    #[test]
    fn kernel_membership() {
        let dims = Dims::new(1, 2).unwrap();
        let mut z = PhaseKVector::zeros(dims);
        assert!(in_ker_flat(&z, 1e-12).in_kernel);
        z.set_fiber(0, 0, 0, 1.0);
        z.set_fiber(1, 1, 0, -1.0);
        z.set_fiber(0, 1, 0, 4.0);
        let check = in_ker_flat(&z, 1e-12);
        assert!(check.in_kernel);
        assert_eq!(check.defect, 0.0);

        let mut w = PhaseKVector::zeros(dims);
        w.base[0] = 1.0;
        let check = in_ker_flat(&w, 1e-12);
        assert!(!check.in_kernel);
        assert_eq!(check.defect, 1.0);
    }

    #[test]
    fn hamiltonian_field_examples() {
        let dims = Dims::new(1, 2).unwrap();
        let zero = build_hamiltonian_kvf(&Ast::constant(0.0, dims.env(Side::Hamiltonian))).unwrap();
        let x = PhasePointH::from_coords(dims, &[1.0, 2.0, 1.0]);
        assert_eq!(zero.eval(&x).unwrap(), PhaseKVector::zeros(dims));

        let z = build_hamiltonian_kvf(&string_h()).unwrap().eval(&x).unwrap();
        assert_eq!(z.base, vec![0.5, -1.0]);
        assert!(z.fiber.iter().all(|v| *v == 0.0));

        let d1 = Dims::new(1, 1).unwrap();
        let h = parse("q1*p1_1", d1.env(Side::Hamiltonian)).unwrap();
        let z = build_hamiltonian_kvf(&h)
            .unwrap()
            .eval(&PhasePointH::from_coords(d1, &[3.0, -2.0]))
            .unwrap();
        assert_eq!(z.base, vec![3.0]);
        assert_eq!(z.fiber, vec![2.0]);
    }

    #[test]
    fn flat_of_hamiltonian_field_is_dh() {
        let dims = Dims::new(2, 2).unwrap();
        let h = parse(
            "sin(q1)*p1_1^2 + q2*p2_2 - exp(0.3*q1*q2) + p1_2*p2_1",
            dims.env(Side::Hamiltonian),
        )
        .unwrap();
        let x = PhasePointH::new(
            DVector::from_vec(vec![0.4, -1.2]),
            DMatrix::from_row_slice(2, 2, &[0.5, 1.5, -0.7, 2.0]),
        )
        .unwrap();
        for gauge in [Gauge::Symmetric, Gauge::FirstLeg] {
            let field = build_hamiltonian_kvf(&h).unwrap().with_gauge(gauge);
            let z = field.eval(&x).unwrap();
            let dh = differential(&h, &x).unwrap();
            assert!(flat(&z).sup_distance(&dh) < 1e-12);
        }
    }

    #[test]
    fn projection_examples() {
        let field = build_hamiltonian_kvf(&string_h()).unwrap();
        let proj = project_gamma(&field, &string_gamma(2.0, 1.0)).unwrap();
        assert_eq!(proj.eval_field(&[0.8]).unwrap(), vec![0.5 * 0.8, -0.8]);

        let dims = Dims::new(1, 2).unwrap();
        let harmonic = parse("0.5*(p1_1^2 + p2_1^2)", dims.env(Side::Hamiltonian)).unwrap();
        let gamma = SectionGamma::parse(dims, &["1.5", "-0.25"]).unwrap();
        let proj = project_gamma(&build_hamiltonian_kvf(&harmonic).unwrap(), &gamma).unwrap();
        assert_eq!(proj.eval_field(&[3.0]).unwrap(), vec![1.5, -0.25]);

        let zero = build_hamiltonian_kvf(&Ast::constant(0.0, dims.env(Side::Hamiltonian))).unwrap();
        let proj = project_gamma(&zero, &string_gamma(2.0, 1.0)).unwrap();
        assert_eq!(proj.eval_field(&[0.3]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn hj_residual_examples() {
        let h = string_h();
        let ok = hj_residual(&h, &string_gamma(2.0, 1.0), &line(), 1e-9).unwrap();
        assert!(ok.residual < 1e-15);
        assert!(ok.spread < 1e-15);

        let bad = hj_residual(&h, &string_gamma(2.0, 1.1), &line(), 1e-9).unwrap();
        assert!((bad.residual - 0.21).abs() < 1e-12, "{}", bad.residual);

        let dims = Dims::new(2, 1).unwrap();
        let constant = Ast::constant(4.0, dims.env(Side::Hamiltonian));
        let gamma = SectionGamma::parse(dims, &["q2", "q1"]).unwrap();
        let sample = sample_box(2, -1.0, 1.0, 5, 100);
        assert_eq!(hj_residual(&constant, &gamma, &sample, 1e-9).unwrap().residual, 0.0);

        let open = SectionGamma::parse(dims, &["q2", "-q1"]).unwrap();
        assert!(matches!(
            hj_residual(&constant, &open, &sample, 1e-9),
            Err(Error::Precondition { .. })
        ));
    }

    #[test]
    fn relatedness_examples() {
        let field = build_hamiltonian_kvf(&string_h()).unwrap();
        let ok = relatedness_defect(&field, &string_gamma(2.0, 1.0), &line(), 1e-9, 1e-9).unwrap();
        assert!(ok.in_kernel);
        let bad = relatedness_defect(&field, &string_gamma(2.0, 1.1), &line(), 1e-9, 1e-9).unwrap();
        assert!(!bad.in_kernel);
        assert!((bad.defect - 0.21).abs() < 1e-12);
    }

    /// A field whose fiber part is, by construction, the transport of its
    /// base part along gamma.
    struct Related {
        inner: HamiltonianField,
        gamma: SectionGamma,
    }

    impl PhaseField for Related {
        fn dims(&self) -> Dims {
            self.inner.dims
        }

        fn eval(&self, x: &PhasePointH) -> Result<PhaseKVector> {
            let Dims { n, k } = self.inner.dims;
            let mut z = self.inner.eval(x)?;
            let forms = self.gamma.eval_forms(&seed(x.q.as_slice()))?;
            for a in 0..k {
                for b in 0..k {
                    for i in 0..n {
                        let t: f64 = (0..n).map(|j| z.base_at(a, j) * forms[b * n + i].partial(j)).sum();
                        z.set_fiber(a, b, i, t);
                    }
                }
            }
            Ok(z)
        }
    }

    #[test]
    fn related_construction_has_zero_defect() {
        let dims = Dims::new(2, 2).unwrap();
        let h = parse("p1_1*p2_2 + q1*p1_2^2 - q2", dims.env(Side::Hamiltonian)).unwrap();
        let gamma = SectionGamma::parse(dims, &["q1", "q2^2", "q1*q2", "0.5*q1^2"]).unwrap();
        let related = Related {
            inner: build_hamiltonian_kvf(&h).unwrap(),
            gamma: gamma.clone(),
        };
        let sample = sample_box(2, -1.0, 1.0, 7, 100);
        for q in &sample {
            let y = relatedness_vector(&related, &gamma, q).unwrap();
            assert_eq!(flat(&y).sup_norm(), 0.0);
        }
    }

    #[test]
    fn hamilton_residual_examples() {
        let dims = Dims::new(1, 2).unwrap();
        let lattice = Lattice::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![100, 100]).unwrap();
        let phase = |b: f64| {
            let psi = GridSolution::from_fn(lattice.clone(), 1, |t| vec![(0.5 * t[0] - t[1]).exp()]).unwrap();
            let coords = (0..lattice.len())
                .flat_map(|f| {
                    let v = psi.point(f)[0];
                    vec![v, 2.0 * v, b * v]
                })
                .collect();
            PhaseGrid::new(lattice.clone(), dims, coords).unwrap()
        };
        let r = hamilton_residual(&phase(1.0), &string_h()).unwrap();
        assert!(r.sup < 1e-4, "{}", r.sup);
        let r = hamilton_residual(&phase(1.1), &string_h()).unwrap();
        assert!(r.sup > 0.1);

        let constant = PhaseGrid::new(lattice.clone(), dims, [0.3, 1.0, -2.0].repeat(lattice.len())).unwrap();
        let zero = Ast::constant(0.0, dims.env(Side::Hamiltonian));
        assert_eq!(hamilton_residual(&constant, &zero).unwrap().sup, 0.0);
    }
}

//! Chart-level objects: points of the velocity and covelocity bundles,
//! sections, k-vector fields on the base, parameter lattices and grids of
//! integral sections.
//!
//! All matrices indexed by a parameter `A` and a coordinate `i` are stored
//! flat in A-major order (`a * n + i`), the same layout used by
//! [`CoordEnv`] for fiber coordinates.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::exprlang::{parse, Ast, CoordEnv, Side};
use crate::scalars::{seed, Scalar};
use crate::{Error, Result};

/// Number of quadrature nodes used by [`potential_recover`].
pub const SIMPSON_NODES: usize = 101;

/// Dimension `n` of the base and number `k` of parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub n: usize,
    pub k: usize,
}

impl Dims {
    pub fn new(n: usize, k: usize) -> Result<Self> {
        if n == 0 || k == 0 {
            return Err(Error::Argument(format!(
                "dimensions must be positive, got n={n}, k={k}"
            )));
        }
        Ok(Self { n, k })
    }

    pub fn env(&self, side: Side) -> CoordEnv {
        CoordEnv::new(self.n, self.k, side)
    }

    /// Coordinates per point of either bundle: `n + k*n`.
    pub fn bundle_len(&self) -> usize {
        self.n * (1 + self.k)
    }
}

/// Point `(q^i, p^A_i)` of the k-covelocity bundle. `p[(A, i)] = p^A_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePointH {
    pub q: DVector<f64>,
    pub p: DMatrix<f64>,
}

impl PhasePointH {
    pub fn new(q: DVector<f64>, p: DMatrix<f64>) -> Result<Self> {
        if p.ncols() != q.len() {
            return Err(Error::Shape(format!(
                "momenta have {} columns, expected n = {}",
                p.ncols(),
                q.len()
            )));
        }
        Ok(Self { q, p })
    }

    pub fn dims(&self) -> Dims {
        Dims {
            n: self.q.len(),
            k: self.p.nrows(),
        }
    }

    /// Flat coordinates in [`CoordEnv`] order.
    pub fn coords(&self) -> Vec<f64> {
        let Dims { n, k } = self.dims();
        let mut out = self.q.as_slice().to_vec();
        for a in 0..k {
            for i in 0..n {
                out.push(self.p[(a, i)]);
            }
        }
        out
    }

    pub fn from_coords(dims: Dims, x: &[f64]) -> Self {
        let Dims { n, k } = dims;
        assert_eq!(x.len(), dims.bundle_len());
        Self {
            q: DVector::from_column_slice(&x[..n]),
            p: DMatrix::from_fn(k, n, |a, i| x[n + a * n + i]),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.q.iter().chain(self.p.iter()).all(|v| v.is_finite())
    }
}

/// Point `(q^i, v^i_A)` of the k-velocity bundle. `v[(i, A)] = v^i_A`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePointL {
    pub q: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl PhasePointL {
    pub fn new(q: DVector<f64>, v: DMatrix<f64>) -> Result<Self> {
        if v.nrows() != q.len() {
            return Err(Error::Shape(format!(
                "velocities have {} rows, expected n = {}",
                v.nrows(),
                q.len()
            )));
        }
        Ok(Self { q, v })
    }

    pub fn dims(&self) -> Dims {
        Dims {
            n: self.q.len(),
            k: self.v.ncols(),
        }
    }

    pub fn coords(&self) -> Vec<f64> {
        let Dims { n, k } = self.dims();
        let mut out = self.q.as_slice().to_vec();
        for a in 0..k {
            for i in 0..n {
                out.push(self.v[(i, a)]);
            }
        }
        out
    }

    pub fn from_coords(dims: Dims, x: &[f64]) -> Self {
        let Dims { n, k } = dims;
        assert_eq!(x.len(), dims.bundle_len());
        Self {
            q: DVector::from_column_slice(&x[..n]),
            v: DMatrix::from_fn(n, k, |i, a| x[n + a * n + i]),
        }
    }
}

/// Value of a k-vector field on either bundle at one point.
///
/// Leg `A` is `Z_A = Z^i_A d/dq^i + (Z_A)^B_i d/dy^B_i`, where `y` are the
/// fiber coordinates (`p^B_i` or `v^i_B`).
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseKVector {
    pub dims: Dims,
    /// `base[a * n + i] = Z^i_A`.
    pub base: Vec<f64>,
    /// `fiber[(a * k + b) * n + i] = (Z_A)^B_i`.
    pub fiber: Vec<f64>,
}

impl PhaseKVector {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            base: vec![0.0; dims.n * dims.k],
            fiber: vec![0.0; dims.n * dims.k * dims.k],
        }
    }

    pub fn base_at(&self, a: usize, i: usize) -> f64 {
        self.base[a * self.dims.n + i]
    }

    pub fn fiber_at(&self, a: usize, b: usize, i: usize) -> f64 {
        self.fiber[(a * self.dims.k + b) * self.dims.n + i]
    }

    pub fn set_fiber(&mut self, a: usize, b: usize, i: usize, value: f64) {
        let idx = (a * self.dims.k + b) * self.dims.n + i;
        self.fiber[idx] = value;
    }

    /// Trace of the fiber part, `sum_A (Z_A)^A_i`, summed in increasing `A`.
    pub fn fiber_trace(&self, i: usize) -> f64 {
        (0..self.dims.k).map(|a| self.fiber_at(a, a, i)).sum()
    }
}

/// One-form on either bundle: `base_i dq^i + fiber[(B, i)] dy^B_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Covector {
    pub base: DVector<f64>,
    /// k x n; entry `(B, i)` multiplies `dp^B_i` (or `dv^i_B`).
    pub fiber: DMatrix<f64>,
}

impl Covector {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            base: DVector::zeros(dims.n),
            fiber: DMatrix::zeros(dims.k, dims.n),
        }
    }

    /// From a gradient over [`CoordEnv`] coordinates.
    pub fn from_gradient(dims: Dims, g: &[f64]) -> Self {
        let Dims { n, k } = dims;
        Self {
            base: DVector::from_column_slice(&g[..n]),
            fiber: DMatrix::from_fn(k, n, |a, i| g[n + a * n + i]),
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.base
            .iter()
            .chain(self.fiber.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sup_distance(&self, other: &Covector) -> f64 {
        (&self.base - &other.base)
            .iter()
            .chain((&self.fiber - &other.fiber).iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// A family of `k` one-forms on the base, `q -> gamma^A_i(q)`.
pub trait Section {
    fn dims(&self) -> Dims;

    /// Coefficients `gamma^A_i(q)` flattened A-major.
    fn eval_forms<S: Scalar>(&self, q: &[S]) -> Result<Vec<S>>;
}

/// A k-vector field on the base, `q -> X^i_A(q)`.
pub trait BaseField {
    fn dims(&self) -> Dims;

    /// Components `X^i_A(q)` flattened A-major.
    fn eval_field<S: Scalar>(&self, q: &[S]) -> Result<Vec<S>>;

    /// The single vector field `X_A` (0-based `a`).
    fn eval_leg(&self, a: usize, q: &[f64]) -> Result<Vec<f64>> {
        let n = self.dims().n;
        let mut all = self.eval_field(q)?;
        all.truncate((a + 1) * n);
        Ok(all.split_off(a * n))
    }
}

fn parse_base_entries(dims: Dims, sources: &[&str]) -> Result<Vec<Ast>> {
    if sources.len() != dims.n * dims.k {
        return Err(Error::Shape(format!(
            "expected {} component expressions, got {}",
            dims.n * dims.k,
            sources.len()
        )));
    }
    let env = dims.env(Side::Base);
    sources.iter().map(|s| parse(s, env).map_err(Error::from)).collect()
}

fn check_base_entries(dims: Dims, entries: &[Ast]) -> Result<()> {
    if entries.len() != dims.n * dims.k {
        return Err(Error::Shape(format!(
            "expected {} component expressions, got {}",
            dims.n * dims.k,
            entries.len()
        )));
    }
    let env = dims.env(Side::Base);
    if let Some(bad) = entries.iter().find(|e| *e.env() != env) {
        return Err(Error::Shape(format!(
            "component '{bad}' is not an expression over q1..q{}",
            dims.n
        )));
    }
    Ok(())
}

fn eval_entries<S: Scalar>(entries: &[Ast], n: usize, q: &[S]) -> Result<Vec<S>> {
    if q.len() != n {
        return Err(Error::Shape(format!(
            "base point has {} coordinates, expected {n}",
            q.len()
        )));
    }
    entries.iter().map(|e| e.eval(q)).collect()
}

/// Section given by expressions; entry `a * n + i` is `gamma^{a+1}_{i+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SectionGamma {
    dims: Dims,
    entries: Vec<Ast>,
}

impl SectionGamma {
    pub fn new(dims: Dims, entries: Vec<Ast>) -> Result<Self> {
        check_base_entries(dims, &entries)?;
        Ok(Self { dims, entries })
    }

    /// Parses `gamma^A_i` sources given A-major.
    pub fn parse(dims: Dims, sources: &[&str]) -> Result<Self> {
        Self::new(dims, parse_base_entries(dims, sources)?)
    }

    pub fn entry(&self, a: usize, i: usize) -> &Ast {
        &self.entries[a * self.dims.n + i]
    }
}

impl Section for SectionGamma {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn eval_forms<S: Scalar>(&self, q: &[S]) -> Result<Vec<S>> {
        eval_entries(&self.entries, self.dims.n, q)
    }
}

/// k-vector field on the base given by expressions; entry `a * n + i` is
/// `X^{i+1}_{a+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct KVectorFieldQ {
    dims: Dims,
    entries: Vec<Ast>,
}

impl KVectorFieldQ {
    pub fn new(dims: Dims, entries: Vec<Ast>) -> Result<Self> {
        check_base_entries(dims, &entries)?;
        Ok(Self { dims, entries })
    }

    /// Parses `X^i_A` sources given A-major.
    pub fn parse(dims: Dims, sources: &[&str]) -> Result<Self> {
        Self::new(dims, parse_base_entries(dims, sources)?)
    }

    pub fn entry(&self, a: usize, i: usize) -> &Ast {
        &self.entries[a * self.dims.n + i]
    }
}

impl BaseField for KVectorFieldQ {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn eval_field<S: Scalar>(&self, q: &[S]) -> Result<Vec<S>> {
        eval_entries(&self.entries, self.dims.n, q)
    }

    fn eval_leg(&self, a: usize, q: &[f64]) -> Result<Vec<f64>> {
        let n = self.dims.n;
        eval_entries(&self.entries[a * n..(a + 1) * n], n, q)
    }
}

/// Uniform lattice over a box in parameter space. Axis 0 varies slowest.
///
/// `steps[a]` counts intervals, so axis `a` carries `steps[a] + 1` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    t_min: Vec<f64>,
    t_max: Vec<f64>,
    steps: Vec<usize>,
}

impl Lattice {
    pub fn new(t_min: Vec<f64>, t_max: Vec<f64>, steps: Vec<usize>) -> Result<Self> {
        let k = t_min.len();
        if k == 0 || t_max.len() != k || steps.len() != k {
            return Err(Error::Shape(format!(
                "box bounds and steps must all have length k >= 1 (got {}, {}, {})",
                t_min.len(),
                t_max.len(),
                steps.len()
            )));
        }
        for a in 0..k {
            if !(t_min[a].is_finite() && t_max[a].is_finite() && t_max[a] > t_min[a]) {
                return Err(Error::Argument(format!(
                    "axis {}: need finite t_min < t_max, got [{}, {}]",
                    a + 1,
                    t_min[a],
                    t_max[a]
                )));
            }
            if steps[a] == 0 {
                return Err(Error::Argument(format!("axis {}: steps must be positive", a + 1)));
            }
        }
        Ok(Self { t_min, t_max, steps })
    }

    pub fn k(&self) -> usize {
        self.steps.len()
    }

    pub fn t_min(&self) -> &[f64] {
        &self.t_min
    }

    pub fn t_max(&self) -> &[f64] {
        &self.t_max
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn nodes_on_axis(&self, axis: usize) -> usize {
        self.steps[axis] + 1
    }

    pub fn len(&self) -> usize {
        self.steps.iter().map(|s| s + 1).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.t_max[axis] - self.t_min[axis]) / self.steps[axis] as f64
    }

    pub fn max_spacing(&self) -> f64 {
        (0..self.k()).map(|a| self.spacing(a)).fold(0.0, f64::max)
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.steps[axis + 1..].iter().map(|s| s + 1).product()
    }

    pub fn flat(&self, multi: &[usize]) -> usize {
        multi.iter().enumerate().map(|(a, &j)| j * self.stride(a)).sum()
    }

    pub fn multi(&self, mut flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.k()];
        for a in (0..self.k()).rev() {
            let m = self.steps[a] + 1;
            out[a] = flat % m;
            flat /= m;
        }
        out
    }

    pub fn t_at(&self, multi: &[usize]) -> Vec<f64> {
        multi
            .iter()
            .enumerate()
            .map(|(a, &j)| {
                if j == self.steps[a] {
                    self.t_max[a]
                } else {
                    self.t_min[a] + j as f64 * self.spacing(a)
                }
            })
            .collect()
    }

    pub fn is_interior(&self, multi: &[usize]) -> bool {
        multi.iter().zip(&self.steps).all(|(&j, &s)| j > 0 && j < s)
    }

    /// Sub-lattice on node ranges `lo[a]..=hi[a]`.
    pub fn restrict(&self, lo: &[usize], hi: &[usize]) -> Result<Lattice> {
        let k = self.k();
        if lo.len() != k || hi.len() != k || (0..k).any(|a| lo[a] >= hi[a] || hi[a] > self.steps[a]) {
            return Err(Error::Argument(format!("invalid sub-box {lo:?}..={hi:?}")));
        }
        Lattice::new(self.t_at(lo), self.t_at(hi), (0..k).map(|a| hi[a] - lo[a]).collect())
    }

    /// Flat indices of the nodes of `self.restrict(lo, hi)`, in its order.
    pub fn restrict_indices(&self, lo: &[usize], hi: &[usize]) -> Result<Vec<usize>> {
        let sub = self.restrict(lo, hi)?;
        Ok((0..sub.len())
            .map(|f| {
                let m: Vec<usize> = sub.multi(f).iter().zip(lo).map(|(j, l)| j + l).collect();
                self.flat(&m)
            })
            .collect())
    }

    pub(crate) fn require_three_nodes(&self) -> Result<()> {
        if let Some(a) = (0..self.k()).find(|&a| self.steps[a] < 2) {
            return Err(Error::Argument(format!(
                "axis {} has {} nodes; at least 3 are required",
                a + 1,
                self.steps[a] + 1
            )));
        }
        Ok(())
    }

    pub(crate) fn locate(&self, flat: usize, source: Error) -> Error {
        let node = self.multi(flat);
        let t = self.t_at(&node);
        Error::AtNode {
            node,
            t,
            source: Box::new(source),
        }
    }
}

/// First derivative along `axis` of component `comp` of a node-major array
/// with `width` values per node. Central differences inside, one-sided
/// three-point stencils on the boundary; all second order.
pub fn lattice_derivative(
    lattice: &Lattice,
    data: &[f64],
    width: usize,
    comp: usize,
    multi: &[usize],
    axis: usize,
) -> f64 {
    let h = lattice.spacing(axis);
    let stride = lattice.stride(axis) * width;
    let at = lattice.flat(multi) * width + comp;
    let j = multi[axis];
    let last = lattice.steps()[axis];
    if j == 0 {
        (-3.0 * data[at] + 4.0 * data[at + stride] - data[at + 2 * stride]) / (2.0 * h)
    } else if j == last {
        (3.0 * data[at] - 4.0 * data[at - stride] + data[at - 2 * stride]) / (2.0 * h)
    } else {
        (data[at + stride] - data[at - stride]) / (2.0 * h)
    }
}

/// Central second difference along `axis`; `multi` must be interior on it.
pub fn lattice_second_derivative(
    lattice: &Lattice,
    data: &[f64],
    width: usize,
    comp: usize,
    multi: &[usize],
    axis: usize,
) -> f64 {
    let h = lattice.spacing(axis);
    let stride = lattice.stride(axis) * width;
    let at = lattice.flat(multi) * width + comp;
    (data[at + stride] - 2.0 * data[at] + data[at - stride]) / (h * h)
}

/// Supremum of a defect over grid nodes together with where it occurs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridDefect {
    pub sup: f64,
    /// Flat index of the maximizing node, if any node was examined.
    pub node: Option<usize>,
}

impl GridDefect {
    pub fn zero() -> Self {
        Self { sup: 0.0, node: None }
    }

    pub(crate) fn update(&mut self, value: f64, node: usize) {
        if self.node.is_none() || value > self.sup || value.is_nan() {
            self.sup = value;
            self.node = Some(node);
        }
    }
}

/// Values of a map `psi: box in R^k -> R^n` on a lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSolution {
    pub lattice: Lattice,
    pub n: usize,
    /// Node-major: `values[node * n + i] = psi^i(t_node)`.
    pub values: Vec<f64>,
}

impl GridSolution {
    pub fn new(lattice: Lattice, n: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || values.len() != lattice.len() * n {
            return Err(Error::Shape(format!(
                "grid of {} nodes with n = {n} needs {} values, got {}",
                lattice.len(),
                lattice.len() * n,
                values.len()
            )));
        }
        Ok(Self { lattice, n, values })
    }

    /// Samples `f(t)` at every node.
    pub fn from_fn(lattice: Lattice, n: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        let mut values = Vec::with_capacity(lattice.len() * n);
        for node in 0..lattice.len() {
            let v = f(&lattice.t_at(&lattice.multi(node)));
            if v.len() != n {
                return Err(Error::Shape(format!(
                    "sampler returned {} values, expected {n}",
                    v.len()
                )));
            }
            values.extend(v);
        }
        Self::new(lattice, n, values)
    }

    pub fn point(&self, node: usize) -> &[f64] {
        &self.values[node * self.n..(node + 1) * self.n]
    }

    pub fn restrict(&self, lo: &[usize], hi: &[usize]) -> Result<Self> {
        let lattice = self.lattice.restrict(lo, hi)?;
        let values = self
            .lattice
            .restrict_indices(lo, hi)?
            .into_iter()
            .flat_map(|f| self.point(f).to_vec())
            .collect();
        Self::new(lattice, self.n, values)
    }

    /// `d psi^i / d t^A` at a node.
    pub fn derivative(&self, multi: &[usize], axis: usize, i: usize) -> f64 {
        lattice_derivative(&self.lattice, &self.values, self.n, i, multi, axis)
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = (1..=self.lattice.k()).map(|a| format!("t{a}")).collect();
        h.extend((1..=self.n).map(|i| format!("q{i}")));
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        write_lattice_csv(out, &self.lattice, &self.header(), &self.values, self.n)
    }

    pub fn read_csv<R: Read>(input: R, n: usize, k: usize) -> Result<Self> {
        let table = read_lattice_csv(input, k)?;
        let expected: Vec<String> = (1..=n).map(|i| format!("q{i}")).collect();
        check_columns(&table.columns, &expected)?;
        Self::new(table.lattice, n, table.data)
    }
}

/// A map from the lattice into the k-covelocity bundle, e.g. `gamma o psi`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseGrid {
    pub lattice: Lattice,
    pub dims: Dims,
    /// Node-major, [`CoordEnv`] order per node (`q` then `p` A-major).
    pub coords: Vec<f64>,
}

impl PhaseGrid {
    pub fn new(lattice: Lattice, dims: Dims, coords: Vec<f64>) -> Result<Self> {
        if lattice.k() != dims.k {
            return Err(Error::Shape(format!(
                "lattice has {} axes but k = {}",
                lattice.k(),
                dims.k
            )));
        }
        if coords.len() != lattice.len() * dims.bundle_len() {
            return Err(Error::Shape(format!(
                "phase grid needs {} values, got {}",
                lattice.len() * dims.bundle_len(),
                coords.len()
            )));
        }
        Ok(Self { lattice, dims, coords })
    }

    pub fn width(&self) -> usize {
        self.dims.bundle_len()
    }

    pub fn coords_at(&self, node: usize) -> &[f64] {
        let w = self.width();
        &self.coords[node * w..(node + 1) * w]
    }

    pub fn point(&self, node: usize) -> PhasePointH {
        PhasePointH::from_coords(self.dims, self.coords_at(node))
    }

    pub fn restrict(&self, lo: &[usize], hi: &[usize]) -> Result<Self> {
        let lattice = self.lattice.restrict(lo, hi)?;
        let coords = self
            .lattice
            .restrict_indices(lo, hi)?
            .into_iter()
            .flat_map(|f| self.coords_at(f).to_vec())
            .collect();
        Self::new(lattice, self.dims, coords)
    }

    /// The base part `psi` of the grid.
    pub fn base(&self) -> GridSolution {
        let n = self.dims.n;
        let values = (0..self.lattice.len())
            .flat_map(|f| self.coords_at(f)[..n].to_vec())
            .collect();
        GridSolution {
            lattice: self.lattice.clone(),
            n,
            values,
        }
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = (1..=self.lattice.k()).map(|a| format!("t{a}")).collect();
        h.extend(self.dims.env(Side::Hamiltonian).names());
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        write_lattice_csv(out, &self.lattice, &self.header(), &self.coords, self.width())
    }

    pub fn read_csv<R: Read>(input: R, dims: Dims) -> Result<Self> {
        let table = read_lattice_csv(input, dims.k)?;
        check_columns(&table.columns, &dims.env(Side::Hamiltonian).names())?;
        Self::new(table.lattice, dims, table.data)
    }
}

/// First prolongation `(psi^i, d psi^i / d t^A)` on the lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct JetGrid {
    pub lattice: Lattice,
    pub dims: Dims,
    /// Node-major, Lagrangian [`CoordEnv`] order per node.
    pub coords: Vec<f64>,
}

impl JetGrid {
    pub fn coords_at(&self, node: usize) -> &[f64] {
        let w = self.dims.bundle_len();
        &self.coords[node * w..(node + 1) * w]
    }

    pub fn point(&self, node: usize) -> PhasePointL {
        PhasePointL::from_coords(self.dims, self.coords_at(node))
    }
}

/// First prolongation of a grid solution.
pub fn prolong(g: &GridSolution) -> Result<JetGrid> {
    g.lattice.require_three_nodes()?;
    let dims = Dims::new(g.n, g.lattice.k())?;
    let Dims { n, k } = dims;
    let mut coords = Vec::with_capacity(g.lattice.len() * dims.bundle_len());
    for node in 0..g.lattice.len() {
        let multi = g.lattice.multi(node);
        coords.extend_from_slice(g.point(node));
        for a in 0..k {
            for i in 0..n {
                coords.push(g.derivative(&multi, a, i));
            }
        }
    }
    Ok(JetGrid {
        lattice: g.lattice.clone(),
        dims,
        coords,
    })
}

/// Sup over interior nodes of `|d psi^i/d t^A - X^i_A(psi)|`.
pub fn integral_section_residual<X: BaseField>(g: &GridSolution, x: &X) -> Result<GridDefect> {
    g.lattice.require_three_nodes()?;
    let dims = x.dims();
    if dims.n != g.n || dims.k != g.lattice.k() {
        return Err(Error::Shape(format!(
            "field has (n, k) = ({}, {}) but grid has ({}, {})",
            dims.n,
            dims.k,
            g.n,
            g.lattice.k()
        )));
    }
    let mut out = GridDefect::zero();
    for node in 0..g.lattice.len() {
        let multi = g.lattice.multi(node);
        if !g.lattice.is_interior(&multi) {
            continue;
        }
        let field = x.eval_field(g.point(node)).map_err(|e| g.lattice.locate(node, e))?;
        for a in 0..dims.k {
            for i in 0..dims.n {
                let d = (g.derivative(&multi, a, i) - field[a * dims.n + i]).abs();
                out.update(d, node);
            }
        }
    }
    Ok(out)
}

/// Sup over the sample of `|d gamma^A_i/dq^j - d gamma^A_j/dq^i|`, i < j.
pub fn closedness_defect<G: Section>(gamma: &G, sample: &[Vec<f64>]) -> Result<f64> {
    Ok(closedness_defects(gamma, sample)?.into_iter().fold(0.0, f64::max))
}

/// Closedness defect of each one-form `gamma^A` separately.
pub fn closedness_defects<G: Section>(gamma: &G, sample: &[Vec<f64>]) -> Result<Vec<f64>> {
    if sample.is_empty() {
        return Err(Error::Argument(
            "closedness check needs at least one sample point".into(),
        ));
    }
    let Dims { n, k } = gamma.dims();
    let mut sup = vec![0.0_f64; k];
    for q in sample {
        let forms = gamma.eval_forms(&seed(q))?;
        for a in 0..k {
            for i in 0..n {
                for j in i + 1..n {
                    let d = forms[a * n + i].partial(j) - forms[a * n + j].partial(i);
                    if !d.is_finite() {
                        return Err(crate::scalars::DomainError::NonFinite { index: Some(j) }.into());
                    }
                    sup[a] = sup[a].max(d.abs());
                }
            }
        }
    }
    Ok(sup)
}

/// Points of the straight segment used by [`potential_recover`].
fn segment_nodes(base: &[f64], target: &[f64], nodes: usize) -> Vec<Vec<f64>> {
    (0..nodes)
        .map(|m| {
            let s = m as f64 / (nodes - 1) as f64;
            base.iter().zip(target).map(|(b, t)| b + s * (t - b)).collect()
        })
        .collect()
}

/// `W^A(target) - W^A(base)` for a closed section, by composite Simpson
/// quadrature of `gamma^A` along the straight segment.
///
/// Fails with a precondition error when the closedness defect on the
/// segment exceeds `tolerance`.
pub fn potential_recover<G: Section>(gamma: &G, base: &[f64], target: &[f64], tolerance: f64) -> Result<Vec<f64>> {
    let Dims { n, k } = gamma.dims();
    if base.len() != n || target.len() != n {
        return Err(Error::Shape(format!("endpoints must have {n} coordinates")));
    }
    let nodes = segment_nodes(base, target, SIMPSON_NODES);
    let defect = closedness_defect(gamma, &nodes)?;
    if defect > tolerance {
        return Err(Error::Precondition {
            what: "section is not closed along the integration path".into(),
            defect,
            tolerance,
        });
    }
    let delta: Vec<f64> = base.iter().zip(target).map(|(b, t)| t - b).collect();
    let intervals = SIMPSON_NODES - 1;
    let mut acc = vec![0.0; k];
    for (m, q) in nodes.iter().enumerate() {
        let weight = if m == 0 || m == intervals {
            1.0
        } else if m % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let forms = gamma.eval_forms(q)?;
        for (a, slot) in acc.iter_mut().enumerate() {
            let pairing: f64 = (0..n).map(|i| forms[a * n + i] * delta[i]).sum();
            *slot += weight * pairing;
        }
    }
    let scale = 1.0 / (3.0 * intervals as f64);
    Ok(acc.into_iter().map(|v| v * scale).collect())
}

/// Tensor grid on `[lo, hi]^n` with `per_axis` points per axis, reduced so
/// the total stays within `cap`.
pub fn sample_box(n: usize, lo: f64, hi: f64, per_axis: usize, cap: usize) -> Vec<Vec<f64>> {
    let mut m = per_axis.max(1);
    while m > 1 && (m as f64).powi(n as i32) > cap as f64 {
        m -= 1;
    }
    let coord = |j: usize| {
        if m == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * j as f64 / (m - 1) as f64
        }
    };
    let total = m.pow(n as u32);
    (0..total)
        .map(|mut f| {
            let mut p = vec![0.0; n];
            for slot in p.iter_mut().rev() {
                *slot = coord(f % m);
                f /= m;
            }
            p
        })
        .collect()
}

fn write_lattice_csv<W: Write>(
    out: W,
    lattice: &Lattice,
    header: &[String],
    data: &[f64],
    width: usize,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for node in 0..lattice.len() {
        let t = lattice.t_at(&lattice.multi(node));
        let row = t
            .iter()
            .chain(&data[node * width..(node + 1) * width])
            .map(|v| v.to_string());
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

struct LatticeTable {
    lattice: Lattice,
    columns: Vec<String>,
    data: Vec<f64>,
}

fn check_columns(found: &[String], expected: &[String]) -> Result<()> {
    if found != expected {
        return Err(Error::Shape(format!(
            "data columns [{}] do not match expected [{}]",
            found.join(","),
            expected.join(",")
        )));
    }
    Ok(())
}

/// Reads a lattice CSV with leading `t1..tk` columns in row-major order and
/// reconstructs the lattice from the distinct parameter values.
fn read_lattice_csv<R: Read>(input: R, k: usize) -> Result<LatticeTable> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::Shape(format!("unreadable CSV header: {e}")))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let t_cols: Vec<String> = (1..=k).map(|a| format!("t{a}")).collect();
    if header.len() < k || header[..k] != t_cols[..] {
        return Err(Error::Shape(format!(
            "expected leading columns [{}], found [{}]",
            t_cols.join(","),
            header.join(",")
        )));
    }
    let mut ts: Vec<Vec<f64>> = Vec::new();
    let mut data = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Shape(format!("CSV row {}: {e}", row + 2)))?;
        if rec.len() != header.len() {
            return Err(Error::Shape(format!(
                "CSV row {} has {} fields, expected {}",
                row + 2,
                rec.len(),
                header.len()
            )));
        }
        let mut vals = Vec::with_capacity(rec.len());
        for (col, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Shape(format!(
                    "CSV row {}, column '{}': not a number: '{field}'",
                    row + 2,
                    header[col]
                ))
            })?;
            vals.push(v);
        }
        ts.push(vals[..k].to_vec());
        data.extend_from_slice(&vals[k..]);
    }
    if ts.is_empty() {
        return Err(Error::Shape("grid CSV has no rows".into()));
    }
    let mut axes: Vec<Vec<f64>> = vec![Vec::new(); k];
    for t in &ts {
        for a in 0..k {
            if !axes[a].contains(&t[a]) {
                axes[a].push(t[a]);
            }
        }
    }
    for (a, axis) in axes.iter_mut().enumerate() {
        axis.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
        if axis.len() < 2 {
            return Err(Error::Shape(format!(
                "column t{} has fewer than 2 distinct values",
                a + 1
            )));
        }
    }
    let lattice = Lattice::new(
        axes.iter().map(|v| v[0]).collect(),
        axes.iter().map(|v| *v.last().unwrap()).collect(),
        axes.iter().map(|v| v.len() - 1).collect(),
    )?;
    if lattice.len() != ts.len() {
        return Err(Error::Shape(format!(
            "{} rows do not form a full lattice of {} nodes",
            ts.len(),
            lattice.len()
        )));
    }
    for (node, t) in ts.iter().enumerate() {
        let expected = lattice.t_at(&lattice.multi(node));
        for a in 0..k {
            let tol = 1e-9 * lattice.spacing(a);
            if (expected[a] - t[a]).abs() > tol {
                return Err(Error::Shape(format!(
                    "row {} has t{} = {} but a uniform row-major lattice expects {}",
                    node + 2,
                    a + 1,
                    t[a],
                    expected[a]
                )));
            }
        }
    }
    Ok(LatticeTable {
        lattice,
        columns: header[k..].to_vec(),
        data,
    })
}

//! Scalar types used to evaluate expressions together with their derivatives.
//!
//! [`Dual1`] is a forward-mode dual number carrying a value and a vector of
//! partial derivatives. It is generic over its component type, so nesting
//! `Dual1<Dual1<f64>>` yields exact second derivatives; [`hess`] evaluates
//! through that nesting and materializes the result as a [`Dual2`].
//! [`fd_grad`] is an independent central-difference oracle.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::DMatrix;
use thiserror::Error;

use crate::Error;

/// Default step for [`fd_grad`].
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Arithmetic that leaves the real line or produces a non-finite number.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("logarithm of non-positive value {0}")]
    LogNonPositive(f64),
    #[error("square root of negative value {0}")]
    SqrtNegative(f64),
    #[error("square root of zero has no derivative")]
    SqrtZeroDerivative,
    #[error("non-integer power {exponent} of non-positive base {base}")]
    PowNonPositiveBase { base: f64, exponent: f64 },
    #[error("non-finite result{}", .index.map(|i| format!(" in coordinate {i}")).unwrap_or_default())]
    NonFinite { index: Option<usize> },
}

/// Operations shared by plain reals and dual numbers.
///
/// Fallible operations report a [`DomainError`] instead of producing NaN.
pub trait Scalar:
    Clone + fmt::Debug + Send + Sync + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self>
{
    fn constant(c: f64) -> Self;

    /// The underlying real value (innermost value for nested duals).
    fn real(&self) -> f64;

    /// True when every derivative component, at every nesting level, is zero.
    fn is_constant(&self) -> bool;

    fn all_finite(&self) -> bool;

    fn try_div(self, rhs: Self) -> Result<Self, DomainError>;
    fn exp(self) -> Self;
    fn try_ln(self) -> Result<Self, DomainError>;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn try_sqrt(self) -> Result<Self, DomainError>;
    fn powi(self, n: i32) -> Self;

    /// General power `self ^ exponent`.
    ///
    /// Constant integral exponents use [`Scalar::powi`] and accept any base
    /// (a negative exponent still needs a nonzero base). Anything else
    /// requires a strictly positive base.
    fn try_pow(self, exponent: Self) -> Result<Self, DomainError>;

    fn zero() -> Self {
        Self::constant(0.0)
    }

    fn is_zero(&self) -> bool {
        self.real() == 0.0 && self.is_constant()
    }
}

fn integral_exponent(e: f64) -> Option<i32> {
    if e.fract() == 0.0 && e.abs() <= i32::MAX as f64 {
        Some(e as i32)
    } else {
        None
    }
}

impl Scalar for f64 {
    fn constant(c: f64) -> Self {
        c
    }

    fn real(&self) -> f64 {
        *self
    }

    fn is_constant(&self) -> bool {
        true
    }

    fn all_finite(&self) -> bool {
        self.is_finite()
    }

    fn try_div(self, rhs: Self) -> Result<Self, DomainError> {
        if rhs == 0.0 {
            return Err(DomainError::DivisionByZero);
        }
        Ok(self / rhs)
    }

    fn exp(self) -> Self {
        f64::exp(self)
    }

    fn try_ln(self) -> Result<Self, DomainError> {
        if self <= 0.0 {
            return Err(DomainError::LogNonPositive(self));
        }
        Ok(self.ln())
    }

    fn sin(self) -> Self {
        f64::sin(self)
    }

    fn cos(self) -> Self {
        f64::cos(self)
    }

    fn try_sqrt(self) -> Result<Self, DomainError> {
        if self < 0.0 {
            return Err(DomainError::SqrtNegative(self));
        }
        Ok(self.sqrt())
    }

    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }

    fn try_pow(self, exponent: Self) -> Result<Self, DomainError> {
        match integral_exponent(exponent) {
            Some(n) if n < 0 && self == 0.0 => Err(DomainError::DivisionByZero),
            Some(n) => Ok(self.powi(n)),
            None if self <= 0.0 => Err(DomainError::PowNonPositiveBase { base: self, exponent }),
            None => Ok(self.powf(exponent)),
        }
    }
}

/// First-order forward-mode dual number.
///
/// `partials` may be shorter than the number of active variables; missing
/// trailing entries are zero. Constants carry an empty vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Dual1<T = f64> {
    pub value: T,
    pub partials: Vec<T>,
}

impl<T: Scalar> Dual1<T> {
    pub fn new(value: T, partials: Vec<T>) -> Self {
        Self { value, partials }
    }

    /// Independent variable number `index` out of `dim`.
    pub fn variable(value: T, index: usize, dim: usize) -> Self {
        let mut partials = vec![T::zero(); dim];
        partials[index] = T::constant(1.0);
        Self { value, partials }
    }

    /// Partial derivative with respect to variable `index` (zero if absent).
    pub fn partial(&self, index: usize) -> T {
        self.partials.get(index).cloned().unwrap_or_else(T::zero)
    }

    fn map_partials(&self, factor: &T) -> Vec<T> {
        self.partials.iter().map(|p| p.clone() * factor.clone()).collect()
    }
}

fn zip_longest<T: Scalar>(a: Vec<T>, b: Vec<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    let len = a.len().max(b.len());
    let mut a = a.into_iter();
    let mut b = b.into_iter();
    (0..len)
        .map(|_| f(a.next().unwrap_or_else(T::zero), b.next().unwrap_or_else(T::zero)))
        .collect()
}

impl<T: Scalar> Add for Dual1<T> {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        let partials = if rhs.partials.is_empty() {
            self.partials
        } else if self.partials.is_empty() {
            rhs.partials
        } else {
            zip_longest(self.partials, rhs.partials, |a, b| a + b)
        };
        Self {
            value: self.value + rhs.value,
            partials,
        }
    }
}

impl<T: Scalar> Sub for Dual1<T> {
    type Output = Self;

    fn sub(self, rhs: Self) -> Self {
        let partials = if rhs.partials.is_empty() {
            self.partials
        } else {
            zip_longest(self.partials, rhs.partials, |a, b| a - b)
        };
        Self {
            value: self.value - rhs.value,
            partials,
        }
    }
}

impl<T: Scalar> Mul for Dual1<T> {
    type Output = Self;

    // product rule
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn mul(self, rhs: Self) -> Self {
        let left = self.map_partials(&rhs.value);
        let right = rhs.map_partials(&self.value);
        let partials = if right.is_empty() {
            left
        } else if left.is_empty() {
            right
        } else {
            zip_longest(left, right, |a, b| a + b)
        };
        Self {
            value: self.value * rhs.value,
            partials,
        }
    }
}

impl<T: Scalar> Neg for Dual1<T> {
    type Output = Self;

    fn neg(self) -> Self {
        Self {
            value: -self.value,
            partials: self.partials.into_iter().map(|p| -p).collect(),
        }
    }
}

impl<T: Scalar> Scalar for Dual1<T> {
    fn constant(c: f64) -> Self {
        Self {
            value: T::constant(c),
            partials: Vec::new(),
        }
    }

    fn real(&self) -> f64 {
        self.value.real()
    }

    fn is_constant(&self) -> bool {
        self.value.is_constant() && self.partials.iter().all(|p| p.is_zero())
    }

    fn all_finite(&self) -> bool {
        self.value.all_finite() && self.partials.iter().all(|p| p.all_finite())
    }

    fn try_div(self, rhs: Self) -> Result<Self, DomainError> {
        if rhs.real() == 0.0 {
            return Err(DomainError::DivisionByZero);
        }
        let quotient = self.value.clone().try_div(rhs.value.clone())?;
        let partials = if rhs.partials.is_empty() {
            self.partials
                .into_iter()
                .map(|p| p.try_div(rhs.value.clone()))
                .collect::<Result<_, _>>()?
        } else {
            let numer = zip_longest(self.partials, rhs.partials, |a, b| a - quotient.clone() * b);
            numer
                .into_iter()
                .map(|p| p.try_div(rhs.value.clone()))
                .collect::<Result<_, _>>()?
        };
        Ok(Self {
            value: quotient,
            partials,
        })
    }

    fn exp(self) -> Self {
        let value = self.value.clone().exp();
        let partials = self.map_partials(&value);
        Self { value, partials }
    }

    fn try_ln(self) -> Result<Self, DomainError> {
        if self.real() <= 0.0 {
            return Err(DomainError::LogNonPositive(self.real()));
        }
        let partials = self
            .partials
            .into_iter()
            .map(|p| p.try_div(self.value.clone()))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            value: self.value.try_ln()?,
            partials,
        })
    }

    fn sin(self) -> Self {
        let slope = self.value.clone().cos();
        let partials = self.map_partials(&slope);
        Self {
            value: self.value.sin(),
            partials,
        }
    }

    fn cos(self) -> Self {
        let slope = -self.value.clone().sin();
        let partials = self.map_partials(&slope);
        Self {
            value: self.value.cos(),
            partials,
        }
    }

    fn try_sqrt(self) -> Result<Self, DomainError> {
        let root = self.value.clone().try_sqrt()?;
        if root.real() == 0.0 {
            if self.partials.iter().all(|p| p.is_zero()) {
                return Ok(Self {
                    value: root,
                    partials: Vec::new(),
                });
            }
            return Err(DomainError::SqrtZeroDerivative);
        }
        let twice = root.clone() * T::constant(2.0);
        let partials = self
            .partials
            .into_iter()
            .map(|p| p.try_div(twice.clone()))
            .collect::<Result<_, _>>()?;
        Ok(Self { value: root, partials })
    }

    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Self::constant(1.0);
        }
        let slope = self.value.clone().powi(n - 1) * T::constant(n as f64);
        let partials = self.map_partials(&slope);
        Self {
            value: self.value.powi(n),
            partials,
        }
    }

    fn try_pow(self, exponent: Self) -> Result<Self, DomainError> {
        if exponent.is_constant() {
            if let Some(n) = integral_exponent(exponent.real()) {
                if n < 0 && self.real() == 0.0 {
                    return Err(DomainError::DivisionByZero);
                }
                return Ok(self.powi(n));
            }
        }
        if self.real() <= 0.0 {
            return Err(DomainError::PowNonPositiveBase {
                base: self.real(),
                exponent: exponent.real(),
            });
        }
        let value = self.value.clone().try_pow(exponent.value.clone())?;
        let base_slope =
            exponent.value.clone() * self.value.clone().try_pow(exponent.value.clone() - T::constant(1.0))?;
        let mut partials = self.map_partials(&base_slope);
        if !exponent.partials.is_empty() {
            let exp_slope = value.clone() * self.value.try_ln()?;
            partials = zip_longest(partials, exponent.map_partials(&exp_slope), |a, b| a + b);
        }
        Ok(Self { value, partials })
    }
}

/// Value, gradient and symmetric Hessian of a scalar function at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct Dual2 {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: DMatrix<f64>,
}

impl Dual2 {
    /// Collapses a nested dual produced by seeding `dim` variables at both
    /// levels. The lower triangle is mirrored so the Hessian is exactly
    /// symmetric.
    pub fn from_nested(nested: &Dual1<Dual1<f64>>, dim: usize) -> Self {
        let gradient: Vec<f64> = (0..dim).map(|i| nested.value.partial(i)).collect();
        let mut hessian = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            let row = nested.partial(i);
            for j in 0..=i {
                let h = row.partial(j);
                hessian[(i, j)] = h;
                hessian[(j, i)] = h;
            }
        }
        Self {
            value: nested.value.value,
            gradient,
            hessian,
        }
    }

    /// Drops the second-order information.
    pub fn to_dual1(&self) -> Dual1<f64> {
        Dual1::new(self.value, self.gradient.clone())
    }
}

/// A real function of several variables that can be evaluated over any
/// [`Scalar`].
pub trait ScalarFn {
    fn eval_at<S: Scalar>(&self, x: &[S]) -> Result<S, DomainError>;
}

/// Seeds every coordinate of `x` as an independent first-order variable.
pub fn seed<T: Scalar>(x: &[T]) -> Vec<Dual1<T>> {
    let d = x.len();
    x.iter()
        .enumerate()
        .map(|(i, v)| Dual1::variable(v.clone(), i, d))
        .collect()
}

/// Seeds `x` for second-order evaluation (a variable at both nesting levels).
pub fn seed2(x: &[f64]) -> Vec<Dual1<Dual1<f64>>> {
    let d = x.len();
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut partials = vec![Dual1::constant(0.0); d];
            partials[i] = Dual1::constant(1.0);
            Dual1::new(Dual1::variable(v, i, d), partials)
        })
        .collect()
}

fn check_dual1(d: &Dual1<f64>, dim: usize) -> Result<(), DomainError> {
    if !d.value.is_finite() {
        return Err(DomainError::NonFinite { index: None });
    }
    if let Some(i) = (0..dim).find(|&i| !d.partial(i).is_finite()) {
        return Err(DomainError::NonFinite { index: Some(i) });
    }
    Ok(())
}

/// Value and exact gradient of `f` at `x`.
pub fn value_grad<F: ScalarFn + ?Sized>(f: &F, x: &[f64]) -> Result<Dual1<f64>, DomainError> {
    let out = f.eval_at(&seed(x))?;
    check_dual1(&out, x.len())?;
    Ok(out)
}

/// Exact gradient of `f` at `x`.
pub fn grad<F: ScalarFn + ?Sized>(f: &F, x: &[f64]) -> Result<Vec<f64>, DomainError> {
    let out = value_grad(f, x)?;
    Ok((0..x.len()).map(|i| out.partial(i)).collect())
}

/// Value, gradient and Hessian of `f` at `x`.
pub fn value_grad_hess<F: ScalarFn + ?Sized>(f: &F, x: &[f64]) -> Result<Dual2, DomainError> {
    let d = x.len();
    let nested = f.eval_at(&seed2(x))?;
    let out = Dual2::from_nested(&nested, d);
    if !out.value.is_finite() {
        return Err(DomainError::NonFinite { index: None });
    }
    if let Some(i) = out.gradient.iter().position(|g| !g.is_finite()) {
        return Err(DomainError::NonFinite { index: Some(i) });
    }
    for i in 0..d {
        if (0..d).any(|j| !out.hessian[(i, j)].is_finite()) {
            return Err(DomainError::NonFinite { index: Some(i) });
        }
    }
    Ok(out)
}

/// Exact, symmetric Hessian of `f` at `x`.
pub fn hess<F: ScalarFn + ?Sized>(f: &F, x: &[f64]) -> Result<DMatrix<f64>, DomainError> {
    Ok(value_grad_hess(f, x)?.hessian)
}

/// Central-difference gradient with step `h`.
pub fn fd_grad<F: ScalarFn + ?Sized>(f: &F, x: &[f64], h: f64) -> Result<Vec<f64>, Error> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Argument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let forward = f.eval_at(&probe)?;
        probe[i] = x[i] - h;
        let backward = f.eval_at(&probe)?;
        probe[i] = x[i];
        let g = (forward - backward) / (2.0 * h);
        if !g.is_finite() {
            return Err(DomainError::NonFinite { index: Some(i) }.into());
        }
        out.push(g);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Product;
    impl ScalarFn for Product {
        fn eval_at<S: Scalar>(&self, x: &[S]) -> Result<S, DomainError> {
            Ok(x[0].clone() * x[1].clone())
        }
    }

    struct Square;
    impl ScalarFn for Square {
        fn eval_at<S: Scalar>(&self, x: &[S]) -> Result<S, DomainError> {
            Ok(x[0].clone() * x[0].clone())
        }
    }

    struct Sine;
    impl ScalarFn for Sine {
        fn eval_at<S: Scalar>(&self, x: &[S]) -> Result<S, DomainError> {
            Ok(x[0].clone().sin())
        }
    }

    struct Const;
    impl ScalarFn for Const {
        fn eval_at<S: Scalar>(&self, _x: &[S]) -> Result<S, DomainError> {
            Ok(S::constant(3.5))
        }
    }

    struct LogOf;
    impl ScalarFn for LogOf {
        fn eval_at<S: Scalar>(&self, x: &[S]) -> Result<S, DomainError> {
            x[0].clone().try_ln()
        }
    }

    /// 1/(x0 - x1): finite value, infinite derivative nowhere, but a pole.
    struct Reciprocal;
    impl ScalarFn for Reciprocal {
        fn eval_at<S: Scalar>(&self, x: &[S]) -> Result<S, DomainError> {
            S::constant(1.0).try_div(x[0].clone() - x[1].clone())
        }
    }

    /// Composition exercising every operation.
    struct Mixed;
    impl ScalarFn for Mixed {
        fn eval_at<S: Scalar>(&self, x: &[S]) -> Result<S, DomainError> {
            let (a, b) = (x[0].clone(), x[1].clone());
            let s = (a.clone() * b.clone()).sin() + b.clone().cos() * a.clone().exp();
            let t = (a.clone() * a.clone() + S::constant(1.0)).try_sqrt()?;
            let u = (b.clone() * b.clone() + S::constant(2.0)).try_ln()?;
            let w = a.clone().try_pow(S::constant(3.0))?
                - b.clone().try_pow(a.clone() * S::constant(0.0) + S::constant(-2.0))?;
            let v = (S::constant(2.0) + a.clone() * a).try_pow(b)?;
            Ok((s * t - u).try_div(v)? + w)
        }
    }

    #[test]
    fn gradient_of_bilinear_form() {
        assert_eq!(grad(&Product, &[3.0, 4.0]).unwrap(), vec![4.0, 3.0]);
    }

    #[test]
    fn gradient_at_critical_point() {
        assert_eq!(grad(&Square, &[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn gradient_of_string_hamiltonian() {
        struct StringH;
        impl ScalarFn for StringH {
            fn eval_at<S: Scalar>(&self, p: &[S]) -> Result<S, DomainError> {
                let a = p[0].clone().powi(2).try_div(S::constant(4.0))?;
                let b = p[1].clone().powi(2).try_div(S::constant(1.0))?;
                Ok(S::constant(0.5) * (a - b))
            }
        }
        assert_eq!(grad(&StringH, &[2.0, 1.0]).unwrap(), vec![0.5, -1.0]);
    }

    #[test]
    fn hessians() {
        let h = hess(&Product, &[0.3, -1.2]).unwrap();
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        assert_eq!(hess(&Const, &[1.0, 2.0]).unwrap(), DMatrix::zeros(2, 2));

        struct StringL;
        impl ScalarFn for StringL {
            fn eval_at<S: Scalar>(&self, v: &[S]) -> Result<S, DomainError> {
                Ok(S::constant(2.0) * v[0].clone().powi(2) - S::constant(0.5) * v[1].clone().powi(2))
            }
        }
        let h = hess(&StringL, &[3.0, 5.0]).unwrap();
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, -1.0]));
    }

    #[test]
    fn hessian_is_exactly_symmetric() {
        let h = hess(&Mixed, &[0.7, 1.3]).unwrap();
        assert_eq!(h[(0, 1)], h[(1, 0)]);
    }

    #[test]
    fn dual2_degenerates_to_dual1() {
        let x = [0.7, 1.3];
        let second = value_grad_hess(&Mixed, &x).unwrap();
        let first = value_grad(&Mixed, &x).unwrap();
        assert_eq!(second.to_dual1().value, first.value);
        for i in 0..2 {
            assert!((second.gradient[i] - first.partial(i)).abs() <= 1e-14 * first.partial(i).abs().max(1.0));
        }
    }

    #[test]
    fn fd_examples() {
        let g = fd_grad(&Square, &[1.0], 1e-4).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-7);
        let g = fd_grad(&Sine, &[0.0], 1e-4).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn fd_rejects_bad_step() {
        assert!(matches!(fd_grad(&Square, &[1.0], 0.0), Err(Error::Argument(_))));
        assert!(matches!(fd_grad(&Square, &[1.0], -1e-3), Err(Error::Argument(_))));
    }

    #[test]
    fn chain_rule_matches_fd() {
        for x in [[0.7, 1.3], [-0.4, 0.9], [1.1, -2.0]] {
            let ad = grad(&Mixed, &x).unwrap();
            let fd = fd_grad(&Mixed, &x, DEFAULT_FD_STEP).unwrap();
            for (a, f) in ad.iter().zip(&fd) {
                assert!((a - f).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {f}");
            }
        }
    }

    #[test]
    fn domain_errors() {
        assert_eq!(grad(&LogOf, &[-1.0]), Err(DomainError::LogNonPositive(-1.0)));
        assert_eq!(grad(&Reciprocal, &[1.0, 1.0]), Err(DomainError::DivisionByZero));
        let half = Dual1::<f64>::constant(0.5);
        assert!(matches!(
            Dual1::variable(-2.0, 0, 1).try_pow(half),
            Err(DomainError::PowNonPositiveBase { .. })
        ));
        // integral exponents accept negative bases
        let cube = Dual1::variable(-2.0, 0, 1).try_pow(Dual1::constant(3.0)).unwrap();
        assert_eq!(cube.value, -8.0);
        assert_eq!(cube.partial(0), 12.0);
    }

    #[test]
    fn constants_have_zero_partials() {
        let c = Dual1::<f64>::constant(2.5);
        assert!(c.is_constant());
        assert_eq!(c.partial(3), 0.0);
        let x = Dual1::variable(2.0, 0, 2);
        let y = x.clone() * c;
        assert_eq!(y.partials, vec![2.5, 0.0]);
    }

    #[test]
    fn product_rule_is_exact() {
        let x = Dual1::new(1.5, vec![0.25, -3.0]);
        let y = Dual1::new(-0.75, vec![2.0, 0.125]);
        let z = x.clone() * y.clone();
        for i in 0..2 {
            assert_eq!(z.partials[i], x.value * y.partials[i] + y.value * x.partials[i]);
        }
    }
}

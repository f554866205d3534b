//! Forward-mode automatic differentiation over space-time.
//!
//! [`Dual<T>`] carries a value and its partial derivatives with respect to the
//! three space-time coordinates `(t, x, y)`. Because `Dual<T>` is itself a
//! [`Scalar`] whenever `T` is, nesting gives exact higher derivatives:
//! `Dual<Dual<f64>>` holds the Hessian, `Dual<Dual<Dual<f64>>>` third
//! derivatives, and so on. The Carleman fields need up to fourth derivatives
//! of the weight, which this provides without hand-expanded formulas.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Number of space-time coordinates tracked by [`Dual`]: `t`, `x`, `y`.
pub const NVARS: usize = 3;

/// Real-like numeric type used by every analytic evaluator.
pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn cst(v: f64) -> Self;
    /// The underlying real value with all derivative parts dropped.
    fn re(&self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn powf(self, p: f64) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }
    fn one() -> Self {
        Self::cst(1.0)
    }
    fn scale(self, s: f64) -> Self {
        self * Self::cst(s)
    }
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn re(&self) -> f64 {
        *self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    fn powf(self, p: f64) -> Self {
        f64::powf(self, p)
    }
    fn scale(self, s: f64) -> Self {
        self * s
    }
}

/// Value plus gradient with respect to `(t, x, y)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<T> {
    pub v: T,
    pub d: [T; NVARS],
}

impl<T: Scalar> Dual<T> {
    pub fn constant(v: T) -> Self {
        Self { v, d: [T::zero(); NVARS] }
    }

    /// Independent variable number `k` with value `v`.
    pub fn var(v: T, k: usize) -> Self {
        let mut d = [T::zero(); NVARS];
        d[k] = T::one();
        Self { v, d }
    }

    /// Applies a scalar function with known value `f` and derivative `df` at `self.v`.
    fn chain(self, f: T, df: T) -> Self {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x = *x * df;
        }
        Self { v: f, d }
    }
}

impl<T: Scalar> Add for Dual<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut d = self.d;
        for k in 0..NVARS {
            d[k] += o.d[k];
        }
        Self { v: self.v + o.v, d }
    }
}

impl<T: Scalar> Sub for Dual<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        let mut d = self.d;
        for k in 0..NVARS {
            d[k] -= o.d[k];
        }
        Self { v: self.v - o.v, d }
    }
}

impl<T: Scalar> Mul for Dual<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut d = [T::zero(); NVARS];
        for k in 0..NVARS {
            d[k] = self.d[k] * o.v + self.v * o.d[k];
        }
        Self { v: self.v * o.v, d }
    }
}

impl<T: Scalar> Div for Dual<T> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = T::one() / o.v;
        let q = self.v * inv;
        let mut d = [T::zero(); NVARS];
        for k in 0..NVARS {
            d[k] = (self.d[k] - q * o.d[k]) * inv;
        }
        Self { v: q, d }
    }
}

impl<T: Scalar> Neg for Dual<T> {
    type Output = Self;
    fn neg(self) -> Self {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x = -*x;
        }
        Self { v: -self.v, d }
    }
}

impl<T: Scalar> AddAssign for Dual<T> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Scalar> SubAssign for Dual<T> {
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl<T: Scalar> MulAssign for Dual<T> {
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

impl<T: Scalar> Scalar for Dual<T> {
    fn cst(v: f64) -> Self {
        Self::constant(T::cst(v))
    }
    fn re(&self) -> f64 {
        self.v.re()
    }
    fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    fn ln(self) -> Self {
        self.chain(self.v.ln(), T::one() / self.v)
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, T::cst(0.5) / s)
    }
    fn tanh(self) -> Self {
        let th = self.v.tanh();
        self.chain(th, T::one() - th * th)
    }
    fn abs(self) -> Self {
        let sign = if self.v.re() < 0.0 { -1.0 } else { 1.0 };
        self.chain(self.v.abs(), T::cst(sign))
    }
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Self::one();
        }
        self.chain(self.v.powi(n), self.v.powi(n - 1).scale(n as f64))
    }
    fn powf(self, p: f64) -> Self {
        self.chain(self.v.powf(p), self.v.powf(p - 1.0).scale(p))
    }
    fn scale(self, s: f64) -> Self {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x = x.scale(s);
        }
        Self { v: self.v.scale(s), d }
    }
}

/// A scalar function of `(t, x)` that can be evaluated on any [`Scalar`],
/// which makes it differentiable to any order by nesting [`Dual`].
pub trait SpaceTimeFn {
    fn eval<S: Scalar>(&self, t: S, x: [S; 2]) -> S;
}

/// Value, gradient and Hessian of a function with respect to `(t, x, y)`.
#[derive(Clone, Copy, Debug)]
pub struct Jet2<S> {
    pub v: S,
    pub g: [S; NVARS],
    pub h: [[S; NVARS]; NVARS],
}

/// Value and gradient of `f` at `(t, x)`.
pub fn jet1<F: SpaceTimeFn + ?Sized, S: Scalar>(f: &F, t: S, x: [S; 2]) -> (S, [S; NVARS]) {
    let r = f.eval(Dual::var(t, 0), [Dual::var(x[0], 1), Dual::var(x[1], 2)]);
    (r.v, r.d)
}

/// Value, gradient and Hessian of `f` at `(t, x)`.
pub fn jet2<F: SpaceTimeFn + ?Sized, S: Scalar>(f: &F, t: S, x: [S; 2]) -> Jet2<S> {
    let lift = |v: S, k: usize| -> Dual<Dual<S>> {
        Dual { v: Dual::var(v, k), d: std::array::from_fn(|m| Dual::constant(if m == k { S::one() } else { S::zero() })) }
    };
    let r = f.eval(lift(t, 0), [lift(x[0], 1), lift(x[1], 2)]);
    Jet2 { v: r.v.v, g: r.v.d, h: std::array::from_fn(|a| r.d[a].d) }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Probe;
    impl SpaceTimeFn for Probe {
        fn eval<S: Scalar>(&self, t: S, x: [S; 2]) -> S {
            (x[0] * t).sin() * x[1].exp() + x[0].powi(3)
        }
    }

    #[test]
    fn jets_match_hand_derivatives() {
        let (t, x, y) = (0.3, 0.7, -0.2);
        let j = jet2(&Probe, t, [x, y]);
        let s = (x * t).sin();
        let c = (x * t).cos();
        let e = f64::exp(y);
        assert!((j.v - (s * e + x * x * x)).abs() < 1e-14);
        assert!((j.g[0] - c * x * e).abs() < 1e-14);
        assert!((j.g[1] - (c * t * e + 3.0 * x * x)).abs() < 1e-14);
        assert!((j.g[2] - s * e).abs() < 1e-14);
        // f_tx = (cos(xt) - xt sin(xt)) e^y
        assert!((j.h[0][1] - (c - x * t * s) * e).abs() < 1e-14);
        assert!((j.h[1][0] - j.h[0][1]).abs() < 1e-14);
        assert!((j.h[1][1] - (-s * t * t * e + 6.0 * x)).abs() < 1e-13);
    }

    #[test]
    fn nested_third_derivative() {
        struct Cube;
        impl SpaceTimeFn for Cube {
            fn eval<S: Scalar>(&self, _t: S, x: [S; 2]) -> S {
                x[0].powi(4)
            }
        }
        // third derivative via jet2 of a jet1 component
        struct Dx;
        impl SpaceTimeFn for Dx {
            fn eval<S: Scalar>(&self, t: S, x: [S; 2]) -> S {
                jet1(&Cube, t, x).1[1]
            }
        }
        let j = jet2(&Dx, 0.0, [2.0, 0.0]);
        assert!((j.v - 32.0).abs() < 1e-12);
        assert!((j.g[1] - 48.0).abs() < 1e-12);
        assert!((j.h[1][1] - 48.0).abs() < 1e-12);
    }
}

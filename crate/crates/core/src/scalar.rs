//! Scalar types the autodiff graph is generic over.
//!
//! `f64` gives plain values and gradients. [`Dual`] carries a tangent along a
//! fixed direction; running the reverse pass in dual arithmetic yields the
//! gradient in the real part and the directional derivative of the gradient
//! (a Hessian-vector product) in the tangent part.

use core::fmt::Debug;
use core::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

pub trait Scalar:
    Copy
    + Debug
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + 'static
{
    fn constant(value: f64) -> Self;
    /// A value with an attached tangent. `f64` drops the tangent.
    fn seeded(value: f64, tangent: f64) -> Self;
    fn value(self) -> f64;
    fn tangent(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn scale(self, c: f64) -> Self;

    #[inline]
    fn zero() -> Self {
        Self::constant(0.0)
    }
}

impl Scalar for f64 {
    #[inline]
    fn constant(value: f64) -> Self {
        value
    }
    #[inline]
    fn seeded(value: f64, _tangent: f64) -> Self {
        value
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn tangent(self) -> f64 {
        0.0
    }
    #[inline]
    fn exp(self) -> Self {
        libm::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        libm::log(self)
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        self * c
    }
}

/// First-order dual number `re + du·ε` with `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    pub const fn new(re: f64, du: f64) -> Self {
        Dual { re, du }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.du + o.du)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.du - o.du)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.du + self.du * o.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        let q = self.re / o.re;
        Dual::new(q, (self.du - q * o.du) / o.re)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.du)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        self.re += o.re;
        self.du += o.du;
    }
}

impl Scalar for Dual {
    #[inline]
    fn constant(value: f64) -> Self {
        Dual::new(value, 0.0)
    }
    #[inline]
    fn seeded(value: f64, tangent: f64) -> Self {
        Dual::new(value, tangent)
    }
    #[inline]
    fn value(self) -> f64 {
        self.re
    }
    #[inline]
    fn tangent(self) -> f64 {
        self.du
    }
    #[inline]
    fn exp(self) -> Self {
        let e = libm::exp(self.re);
        Dual::new(e, e * self.du)
    }
    #[inline]
    fn ln(self) -> Self {
        Dual::new(libm::log(self.re), self.du / self.re)
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        Dual::new(self.re * c, self.du * c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_product_rule() {
        let x = Dual::new(3.0, 1.0);
        let y = x * x * x;
        assert_eq!(y.re, 27.0);
        assert_eq!(y.du, 27.0);
    }

    #[test]
    fn dual_quotient_and_transcendentals() {
        let x = Dual::new(2.0, 1.0);
        let q = Dual::constant(1.0) / x;
        assert!((q.du + 0.25).abs() < 1e-15);
        let e = x.exp();
        assert!((e.du - libm::exp(2.0)).abs() < 1e-12);
        let l = x.ln();
        assert!((l.du - 0.5).abs() < 1e-15);
    }
}

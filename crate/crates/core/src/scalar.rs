//! Scalar abstraction shared by the physics right-hand sides and the
//! Runge–Kutta kernels, so the same code runs on plain `f64` and on
//! forward-mode dual numbers when a state Jacobian is needed.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Scalar:
    Copy
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(x: f64) -> Self;
    fn value(self) -> f64;
    fn powf(self, e: f64) -> Self;

    fn scale(self, c: f64) -> Self {
        self * Self::cst(c)
    }
}

impl Scalar for f64 {
    #[inline]
    fn cst(x: f64) -> Self {
        x
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn powf(self, e: f64) -> Self {
        f64::powf(self, e)
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        self * c
    }
}

/// Dual number carrying two tangent directions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual2 {
    pub v: f64,
    pub d: [f64; 2],
}

impl Dual2 {
    pub fn new(v: f64, d: [f64; 2]) -> Self {
        Self { v, d }
    }

    /// Seed variable `i` of a two-variable input.
    pub fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 2];
        d[i] = 1.0;
        Self { v, d }
    }
}

impl Add for Dual2 {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.v + o.v, [self.d[0] + o.d[0], self.d[1] + o.d[1]])
    }
}

impl Sub for Dual2 {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.v - o.v, [self.d[0] - o.d[0], self.d[1] - o.d[1]])
    }
}

impl Mul for Dual2 {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Self::new(
            self.v * o.v,
            [
                self.d[0] * o.v + self.v * o.d[0],
                self.d[1] * o.v + self.v * o.d[1],
            ],
        )
    }
}

impl Div for Dual2 {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let q = self.v * inv;
        Self::new(
            q,
            [
                (self.d[0] - q * o.d[0]) * inv,
                (self.d[1] - q * o.d[1]) * inv,
            ],
        )
    }
}

impl Neg for Dual2 {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.v, [-self.d[0], -self.d[1]])
    }
}

impl Scalar for Dual2 {
    #[inline]
    fn cst(x: f64) -> Self {
        Self::new(x, [0.0; 2])
    }
    #[inline]
    fn value(self) -> f64 {
        self.v
    }
    #[inline]
    fn powf(self, e: f64) -> Self {
        let p = self.v.powf(e);
        let dp = e * p / self.v;
        Self::new(p, [dp * self.d[0], dp * self.d[1]])
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        Self::new(self.v * c, [self.d[0] * c, self.d[1] * c])
    }
}

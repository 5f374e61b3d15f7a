//! Second-order multivariate dual numbers for closed-form solutions.
//!
//! Used to differentiate analytic solutions and forcing terms; independent
//! of the network jet code.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub const MAX_DIM: usize = 4;

/// Scalar type closed-form solutions are written against.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(c: f64) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn value(&self) -> f64;
}

impl Real for f64 {
    fn cst(c: f64) -> Self {
        c
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
    fn value(&self) -> f64 {
        *self
    }
}

/// Value, gradient and Hessian of a function of up to [`MAX_DIM`] inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual2 {
    pub v: f64,
    pub g: [f64; MAX_DIM],
    pub h: [[f64; MAX_DIM]; MAX_DIM],
}

impl Dual2 {
    pub fn constant(v: f64) -> Self {
        Dual2 {
            v,
            g: [0.0; MAX_DIM],
            h: [[0.0; MAX_DIM]; MAX_DIM],
        }
    }

    /// The `i`-th independent variable evaluated at `v`.
    pub fn variable(v: f64, i: usize) -> Self {
        let mut d = Dual2::constant(v);
        d.g[i] = 1.0;
        d
    }

    /// Seeds every coordinate of `x` as an independent variable.
    pub fn variables(x: &[f64]) -> Vec<Dual2> {
        assert!(x.len() <= MAX_DIM, "at most {MAX_DIM} inputs");
        x.iter()
            .enumerate()
            .map(|(i, &v)| Dual2::variable(v, i))
            .collect()
    }

    fn chain(self, f0: f64, f1: f64, f2: f64) -> Self {
        let mut out = Dual2::constant(f0);
        for i in 0..MAX_DIM {
            out.g[i] = f1 * self.g[i];
            for j in 0..MAX_DIM {
                out.h[i][j] = f1 * self.h[i][j] + f2 * self.g[i] * self.g[j];
            }
        }
        out
    }

    pub fn recip(self) -> Self {
        let x = self.v;
        self.chain(1.0 / x, -1.0 / (x * x), 2.0 / (x * x * x))
    }
}

impl Add for Dual2 {
    type Output = Dual2;
    fn add(mut self, o: Dual2) -> Dual2 {
        self.v += o.v;
        for i in 0..MAX_DIM {
            self.g[i] += o.g[i];
            for j in 0..MAX_DIM {
                self.h[i][j] += o.h[i][j];
            }
        }
        self
    }
}

impl Neg for Dual2 {
    type Output = Dual2;
    fn neg(mut self) -> Dual2 {
        self.v = -self.v;
        for i in 0..MAX_DIM {
            self.g[i] = -self.g[i];
            for j in 0..MAX_DIM {
                self.h[i][j] = -self.h[i][j];
            }
        }
        self
    }
}

impl Sub for Dual2 {
    type Output = Dual2;
    fn sub(self, o: Dual2) -> Dual2 {
        self + (-o)
    }
}

impl Mul for Dual2 {
    type Output = Dual2;
    fn mul(self, o: Dual2) -> Dual2 {
        let mut out = Dual2::constant(self.v * o.v);
        for i in 0..MAX_DIM {
            out.g[i] = self.v * o.g[i] + o.v * self.g[i];
            for j in 0..MAX_DIM {
                out.h[i][j] = self.v * o.h[i][j]
                    + o.v * self.h[i][j]
                    + self.g[i] * o.g[j]
                    + o.g[i] * self.g[j];
            }
        }
        out
    }
}

impl Div for Dual2 {
    type Output = Dual2;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn div(self, o: Dual2) -> Dual2 {
        self * o.recip()
    }
}

impl Real for Dual2 {
    fn cst(c: f64) -> Self {
        Dual2::constant(c)
    }
    fn sin(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(s, c, -s)
    }
    fn cos(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(c, -s, -c)
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }
    fn value(&self) -> f64 {
        self.v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule_on_sin_times_exp() {
        // f(x, y) = sin(x) * exp(2y)
        let v = Dual2::variables(&[0.4, -0.3]);
        let f = v[0].sin() * (Dual2::cst(2.0) * v[1]).exp();
        let (x, y) = (0.4f64, -0.3f64);
        let e = (2.0 * y).exp();
        assert!((f.v - x.sin() * e).abs() < 1e-15);
        assert!((f.g[0] - x.cos() * e).abs() < 1e-15);
        assert!((f.g[1] - 2.0 * x.sin() * e).abs() < 1e-15);
        assert!((f.h[0][0] + x.sin() * e).abs() < 1e-15);
        assert!((f.h[0][1] - 2.0 * x.cos() * e).abs() < 1e-15);
        assert!((f.h[1][0] - f.h[0][1]).abs() < 1e-15);
        assert!((f.h[1][1] - 4.0 * x.sin() * e).abs() < 1e-14);
    }

    #[test]
    fn quotient_matches_closed_form() {
        let v = Dual2::variables(&[1.5]);
        let f = Dual2::cst(1.0) / v[0];
        assert!((f.g[0] + 1.0 / 2.25).abs() < 1e-15);
        assert!((f.h[0][0] - 2.0 / 3.375).abs() < 1e-15);
    }
}

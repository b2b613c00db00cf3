//! Truncated Taylor series in one variable.
//!
//! Used to differentiate lattice operators of smooth families exactly:
//! every coefficient field is promoted to a series in the family parameter
//! and the usual arithmetic is carried out order by order.

use std::ops::{Add, Mul, Neg, Sub};

#[derive(Clone, Debug, PartialEq)]
pub struct Taylor {
    /// Coefficients `c[k]` of `t^k`.
    pub c: Vec<f64>,
}

impl Taylor {
    pub fn constant(v: f64, order: usize) -> Self {
        let mut c = vec![0.0; order + 1];
        c[0] = v;
        Taylor { c }
    }

    pub fn from_coeffs(mut c: Vec<f64>, order: usize) -> Self {
        c.resize(order + 1, 0.0);
        Taylor { c }
    }

    pub fn order(&self) -> usize {
        self.c.len() - 1
    }

    pub fn value(&self) -> f64 {
        self.c[0]
    }

    /// Evaluates the truncated polynomial at `t`.
    pub fn eval(&self, t: f64) -> f64 {
        self.c.iter().rev().fold(0.0, |acc, &x| acc * t + x)
    }

    /// n-th derivative at zero.
    pub fn derivative(&self, n: usize) -> f64 {
        if n > self.order() {
            return 0.0;
        }
        let fact: f64 = (1..=n).map(|k| k as f64).product();
        self.c[n] * fact
    }

    pub fn scale(&self, s: f64) -> Self {
        Taylor { c: self.c.iter().map(|x| x * s).collect() }
    }

    /// `self^alpha`, requires a positive constant term.
    pub fn powf(&self, alpha: f64) -> Self {
        let g = &self.c;
        let n = g.len();
        assert!(g[0] > 0.0, "powf of a series with non-positive constant term");
        let mut f = vec![0.0; n];
        f[0] = g[0].powf(alpha);
        for k in 1..n {
            let mut acc = 0.0;
            for j in 1..=k {
                acc += (alpha * j as f64 - (k - j) as f64) * g[j] * f[k - j];
            }
            f[k] = acc / (k as f64 * g[0]);
        }
        Taylor { c: f }
    }

    pub fn recip(&self) -> Self {
        let g = &self.c;
        let n = g.len();
        assert!(g[0] != 0.0, "reciprocal of a series with zero constant term");
        let mut f = vec![0.0; n];
        f[0] = 1.0 / g[0];
        for k in 1..n {
            let mut acc = 0.0;
            for j in 1..=k {
                acc += g[j] * f[k - j];
            }
            f[k] = -acc / g[0];
        }
        Taylor { c: f }
    }
}

impl Add for &Taylor {
    type Output = Taylor;
    fn add(self, o: &Taylor) -> Taylor {
        Taylor { c: self.c.iter().zip(&o.c).map(|(a, b)| a + b).collect() }
    }
}

impl Sub for &Taylor {
    type Output = Taylor;
    fn sub(self, o: &Taylor) -> Taylor {
        Taylor { c: self.c.iter().zip(&o.c).map(|(a, b)| a - b).collect() }
    }
}

impl Neg for &Taylor {
    type Output = Taylor;
    fn neg(self) -> Taylor {
        self.scale(-1.0)
    }
}

impl Mul for &Taylor {
    type Output = Taylor;
    fn mul(self, o: &Taylor) -> Taylor {
        let n = self.c.len().min(o.c.len());
        let mut c = vec![0.0; n];
        for i in 0..n {
            if self.c[i] == 0.0 {
                continue;
            }
            for j in 0..n - i {
                c[i + j] += self.c[i] * o.c[j];
            }
        }
        Taylor { c }
    }
}

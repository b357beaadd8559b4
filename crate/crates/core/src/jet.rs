//! Truncated Taylor arithmetic for derivatives with respect to network inputs.
//!
//! A [`DiffScalar`] carries the normalized Taylor coefficients
//! `c[i][j] = ∂ⁱ⁺ʲf / ∂xⁱ∂tʲ / (i! j!)` of a quantity in the two inputs
//! `x` and `t`, truncated at total order `K ≤ 4`. Smooth functions are
//! applied by composing with their own Taylor series, so the result is exact
//! (to rounding) rather than a finite-difference estimate.

use crate::error::{Error, Result};
use std::ops::{Add, Div, Mul, Neg, Sub};

pub const MAX_ORDER: usize = 4;
const NCOEF: usize = (MAX_ORDER + 1) * (MAX_ORDER + 2) / 2;

/// Flat index of the `x^i t^j` coefficient.
const fn idx(i: usize, j: usize) -> usize {
    // coefficients grouped by total degree d = i + j, ordered by j
    let d = i + j;
    d * (d + 1) / 2 + j
}

/// Scalar types that network and PDE code can be written against, so the
/// same expression evaluates plainly (`f64`) or with input derivatives
/// ([`DiffScalar`]).
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn constant(v: f64) -> Self;
    fn value(&self) -> f64;
    fn scale(self, c: f64) -> Self;
    fn offset(self, c: f64) -> Self;
    fn tanh(self) -> Self;
    fn sigmoid(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn cosh(self) -> Self;
    fn sech(self) -> Self {
        Self::constant(1.0) / self.cosh()
    }
}

impl Scalar for f64 {
    fn constant(v: f64) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
    fn scale(self, c: f64) -> Self {
        self * c
    }
    fn offset(self, c: f64) -> Self {
        self + c
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sigmoid(self) -> Self {
        1.0 / (1.0 + (-self).exp())
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
    fn cosh(self) -> Self {
        f64::cosh(self)
    }
}

/// Polynomial in `y` with coefficients in increasing degree.
type Poly = Vec<f64>;

fn poly_eval(p: &[f64], y: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, &c| acc * y + c)
}

fn poly_mul(a: &[f64], b: &[f64]) -> Poly {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_deriv(p: &[f64]) -> Poly {
    if p.len() <= 1 {
        return vec![0.0];
    }
    p.iter().enumerate().skip(1).map(|(i, &c)| i as f64 * c).collect()
}

/// For `g` with `g' = q(g)`, returns polynomials `P_k` with `g⁽ᵏ⁾ = P_k(g)`.
fn derivative_polys(q: &[f64], max: usize) -> Vec<Poly> {
    let mut polys = vec![vec![0.0, 1.0]];
    for k in 1..=max {
        let next = poly_mul(&poly_deriv(&polys[k - 1]), q);
        polys.push(next);
    }
    polys
}

const FACTORIAL: [f64; 7] = [1.0, 1.0, 2.0, 6.0, 24.0, 120.0, 720.0];

pub fn factorial(k: usize) -> f64 {
    FACTORIAL[k]
}

/// Normalized derivatives `g⁽ᵏ⁾(z)/k!`, `k = 0..=5`, of an activation.
pub trait SeriesTable {
    fn series(z: f64) -> [f64; 6];
}

pub struct TanhSeries;
pub struct SigmoidSeries;

thread_local! {
    static TANH_POLYS: Vec<Poly> = derivative_polys(&[1.0, 0.0, -1.0], 5);
    static SIGMOID_POLYS: Vec<Poly> = derivative_polys(&[0.0, 1.0, -1.0], 5);
}

fn series_from_polys(polys: &[Poly], y: f64) -> [f64; 6] {
    let mut out = [0.0; 6];
    for k in 0..6 {
        out[k] = poly_eval(&polys[k], y) / FACTORIAL[k];
    }
    out
}

impl SeriesTable for TanhSeries {
    #[inline]
    fn series(z: f64) -> [f64; 6] {
        let g = z.tanh();
        let g2 = g * g;
        let s = 1.0 - g2;
        [
            g,
            s,
            -g * s,
            s * (6.0 * g2 - 2.0) / 6.0,
            g * s * (16.0 - 24.0 * g2) / 24.0,
            (s * (s - 2.0 * g2) * (16.0 - 24.0 * g2) - 48.0 * g2 * s * s) / 120.0,
        ]
    }
}

/// [`TanhSeries`] through the generic derivative polynomials.
#[cfg(test)]
fn tanh_series_generic(z: f64) -> [f64; 6] {
    TANH_POLYS.with(|p| series_from_polys(p, z.tanh()))
}

impl SeriesTable for SigmoidSeries {
    fn series(z: f64) -> [f64; 6] {
        let y = 1.0 / (1.0 + (-z).exp());
        SIGMOID_POLYS.with(|p| series_from_polys(p, y))
    }
}

/// Truncated bivariate Taylor polynomial in (x, t).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffScalar {
    order: usize,
    c: [f64; NCOEF],
}

impl DiffScalar {
    pub fn constant_with_order(v: f64, order: usize) -> Self {
        assert!(order <= MAX_ORDER, "jet order {order} > {MAX_ORDER}");
        let mut c = [0.0; NCOEF];
        c[0] = v;
        DiffScalar { order, c }
    }

    /// The input `x` itself at the given point.
    pub fn var_x(x: f64, order: usize) -> Self {
        let mut s = Self::constant_with_order(x, order);
        if order >= 1 {
            s.c[idx(1, 0)] = 1.0;
        }
        s
    }

    pub fn var_t(t: f64, order: usize) -> Self {
        let mut s = Self::constant_with_order(t, order);
        if order >= 1 {
            s.c[idx(0, 1)] = 1.0;
        }
        s
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Normalized coefficient of `x^i t^j`.
    pub fn coeff(&self, i: usize, j: usize) -> f64 {
        if i + j > self.order {
            0.0
        } else {
            self.c[idx(i, j)]
        }
    }

    /// `∂ⁱ⁺ʲ / ∂xⁱ∂tʲ` at the expansion point.
    pub fn derivative(&self, i: usize, j: usize) -> f64 {
        self.coeff(i, j) * FACTORIAL[i] * FACTORIAL[j]
    }

    fn merged_order(&self, other: &Self) -> usize {
        // constants built by `Scalar::constant` have order 0 and adopt the other's
        self.order.max(other.order)
    }

    /// `Σ_k d[k] (self − self₀)^k`, i.e. `g(self)` given `d[k] = g⁽ᵏ⁾(self₀)/k!`.
    fn compose(self, d: &[f64]) -> Self {
        let mut delta = self;
        delta.c[0] = 0.0;
        let mut out = Self::constant_with_order(d[0], self.order);
        let mut power = Self::constant_with_order(1.0, self.order);
        for &dk in d.iter().take(self.order + 1).skip(1) {
            power = power * delta;
            for (o, p) in out.c.iter_mut().zip(&power.c) {
                *o += dk * p;
            }
        }
        out
    }
}

impl Add for DiffScalar {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let mut c = self.c;
        for (a, b) in c.iter_mut().zip(&rhs.c) {
            *a += b;
        }
        DiffScalar {
            order: self.merged_order(&rhs),
            c,
        }
    }
}

impl Sub for DiffScalar {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        let mut c = self.c;
        for (a, b) in c.iter_mut().zip(&rhs.c) {
            *a -= b;
        }
        DiffScalar {
            order: self.merged_order(&rhs),
            c,
        }
    }
}

impl Neg for DiffScalar {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-1.0)
    }
}

impl Mul for DiffScalar {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let order = self.merged_order(&rhs);
        let mut c = [0.0; NCOEF];
        for d in 0..=order {
            for j in 0..=d {
                let i = d - j;
                let mut s = 0.0;
                for i1 in 0..=i {
                    for j1 in 0..=j {
                        s += self.c[idx(i1, j1)] * rhs.c[idx(i - i1, j - j1)];
                    }
                }
                c[idx(i, j)] = s;
            }
        }
        DiffScalar { order, c }
    }
}

impl Div for DiffScalar {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let z = rhs.c[0];
        let mut d = [0.0; MAX_ORDER + 1];
        // 1/z series: (-1)^k / z^(k+1)
        let mut p = 1.0 / z;
        for dk in d.iter_mut() {
            *dk = p;
            p *= -1.0 / z;
        }
        let mut r = rhs;
        r.order = self.merged_order(&rhs);
        self * r.compose(&d)
    }
}

impl Scalar for DiffScalar {
    fn constant(v: f64) -> Self {
        Self::constant_with_order(v, 0)
    }
    fn value(&self) -> f64 {
        self.c[0]
    }
    fn scale(mut self, k: f64) -> Self {
        self.c.iter_mut().for_each(|v| *v *= k);
        self
    }
    fn offset(mut self, k: f64) -> Self {
        self.c[0] += k;
        self
    }
    fn tanh(self) -> Self {
        self.compose(&TanhSeries::series(self.c[0]))
    }
    fn sigmoid(self) -> Self {
        self.compose(&SigmoidSeries::series(self.c[0]))
    }
    fn sin(self) -> Self {
        let (s, c) = self.c[0].sin_cos();
        self.compose(&[s, c, -s / 2.0, -c / 6.0, s / 24.0])
    }
    fn cos(self) -> Self {
        let (s, c) = self.c[0].sin_cos();
        self.compose(&[c, -s, -c / 2.0, s / 6.0, c / 24.0])
    }
    fn exp(self) -> Self {
        let e = self.c[0].exp();
        self.compose(&[e, e, e / 2.0, e / 6.0, e / 24.0])
    }
    fn cosh(self) -> Self {
        let (sh, ch) = (self.c[0].sinh(), self.c[0].cosh());
        self.compose(&[ch, sh, ch / 2.0, sh / 6.0, ch / 24.0])
    }
}

/// Exact mixed partial derivative `∂^{order_x + order_t} f / ∂x^{order_x} ∂t^{order_t}`
/// of a scalar field at `(x, t)`.
pub fn input_derivative<F>(f: F, x: f64, t: f64, order_x: usize, order_t: usize) -> Result<f64>
where
    F: Fn(DiffScalar, DiffScalar) -> DiffScalar,
{
    if order_x > 4 || order_t > 2 || order_x + order_t > MAX_ORDER {
        return Err(Error::argument(format!(
            "unsupported derivative order (x: {order_x}, t: {order_t})"
        )));
    }
    let k = order_x + order_t;
    let out = f(DiffScalar::var_x(x, k), DiffScalar::var_t(t, k));
    let v = out.derivative(order_x, order_t);
    if !v.is_finite() {
        return Err(Error::numeric("input_derivative", v));
    }
    Ok(v)
}

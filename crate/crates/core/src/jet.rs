//! Truncated multivariate Taylor arithmetic.
//!
//! A [`Jet`] holds the Taylor coefficients of a smooth function of `m`
//! variables around a base point, truncated at some total degree. Arithmetic
//! on jets propagates every partial derivative up to that degree exactly, so
//! evaluating a formula once on jets yields its value together with its
//! sensitivities, without finite differences.
//!
//! Coefficients are stored in graded order (all monomials of degree 0, then
//! degree 1, ...). A jet of order `k` is therefore a prefix of a jet of any
//! higher order, and truncation is a slice.
//!
//! Coefficients are Taylor coefficients, not derivatives: the coefficient of
//! the monomial `v^β` is `∂^β f / β!`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::Arc;

struct MulTable {
    row_start: Vec<u32>,
    entries: Vec<(u32, u32)>,
}

/// Multiplication and differentiation tables for jets over a fixed number of
/// variables and a maximum total degree.
pub struct JetSpace {
    nvars: usize,
    max_order: usize,
    // counts[k] = number of monomials of total degree <= k
    counts: Vec<usize>,
    exponents: Vec<Vec<u8>>,
    // mul[k]: products whose output degree is <= k, grouped by first factor
    mul: Vec<MulTable>,
    deriv: Vec<Vec<(u32, u32, f64)>>,
    deriv_counts: Vec<Vec<usize>>,
}

impl fmt::Debug for JetSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("JetSpace")
            .field("nvars", &self.nvars)
            .field("max_order", &self.max_order)
            .field("len", &self.counts[self.max_order])
            .finish()
    }
}

impl JetSpace {
    pub fn new(nvars: usize, max_order: usize) -> Arc<Self> {
        // enumerate monomials in graded order
        let mut exponents: Vec<Vec<u8>> = vec![vec![0; nvars]];
        let mut counts = vec![1usize];
        let mut prev_start = 0usize;
        for _deg in 1..=max_order {
            let prev_end = exponents.len();
            let mut next = Vec::new();
            for idx in prev_start..prev_end {
                let e = &exponents[idx];
                // extend by a variable at or after the last non-zero slot to
                // visit each monomial exactly once
                let last = e.iter().rposition(|&p| p > 0).unwrap_or(0);
                for v in last..nvars {
                    let mut ne = e.clone();
                    ne[v] += 1;
                    next.push(ne);
                }
            }
            prev_start = prev_end;
            exponents.extend(next);
            counts.push(exponents.len());
        }
        let index: HashMap<Vec<u8>, u32> = exponents
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), i as u32))
            .collect();
        let degree = |e: &[u8]| e.iter().map(|&p| p as usize).sum::<usize>();

        let mul = (0..=max_order)
            .map(|k| {
                let mut row_start = vec![0u32];
                let mut entries = Vec::new();
                for ei in &exponents[..counts[k]] {
                    for (j, ej) in exponents[..counts[k]].iter().enumerate() {
                        if degree(ei) + degree(ej) <= k {
                            let sum: Vec<u8> = ei.iter().zip(ej).map(|(a, b)| a + b).collect();
                            entries.push((j as u32, index[&sum]));
                        }
                    }
                    row_start.push(entries.len() as u32);
                }
                MulTable { row_start, entries }
            })
            .collect();

        let mut deriv = Vec::with_capacity(nvars);
        let mut deriv_counts = Vec::with_capacity(nvars);
        for v in 0..nvars {
            let mut table = Vec::new();
            for (src, e) in exponents.iter().enumerate() {
                if e[v] == 0 {
                    continue;
                }
                let mut de = e.clone();
                de[v] -= 1;
                table.push((index[&de], src as u32, e[v] as f64));
            }
            table.sort_by_key(|&(d, _, _)| d);
            let dc = (0..max_order.max(1))
                .map(|k| {
                    let lim = counts[k.min(max_order)];
                    table.partition_point(|&(d, _, _)| (d as usize) < lim)
                })
                .collect();
            deriv.push(table);
            deriv_counts.push(dc);
        }

        Arc::new(JetSpace {
            nvars,
            max_order,
            counts,
            exponents,
            mul,
            deriv,
            deriv_counts,
        })
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    /// Number of coefficients of a jet of the given order.
    pub fn len(&self, order: usize) -> usize {
        self.counts[order]
    }

    /// Exponent tuple of the coefficient at `index`.
    pub fn exponents(&self, index: usize) -> &[u8] {
        &self.exponents[index]
    }

    /// Index of the degree-one coefficient for variable `v`.
    #[inline]
    pub fn linear_index(&self, v: usize) -> usize {
        1 + v
    }
}

thread_local! {
    static POOL: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
}

const POOL_LIMIT: usize = 512;

fn buffer(len: usize) -> Vec<f64> {
    let mut v = POOL.with(|p| p.borrow_mut().pop()).unwrap_or_default();
    v.clear();
    v.resize(len, 0.0);
    v
}

fn buffer_from(src: &[f64]) -> Vec<f64> {
    let mut v = POOL.with(|p| p.borrow_mut().pop()).unwrap_or_default();
    v.clear();
    v.extend_from_slice(src);
    v
}

/// A truncated multivariate Taylor expansion.
pub struct Jet {
    space: Arc<JetSpace>,
    order: usize,
    c: Vec<f64>,
}

impl Clone for Jet {
    fn clone(&self) -> Self {
        Jet {
            space: Arc::clone(&self.space),
            order: self.order,
            c: buffer_from(&self.c),
        }
    }
}

impl Drop for Jet {
    fn drop(&mut self) {
        let v = std::mem::take(&mut self.c);
        if v.capacity() > 0 {
            // ignore the pool while the thread is shutting down
            let _ = POOL.try_with(|p| {
                let mut p = p.borrow_mut();
                if p.len() < POOL_LIMIT {
                    p.push(v);
                }
            });
        }
    }
}

impl fmt::Debug for Jet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Jet")
            .field("order", &self.order)
            .field("value", &self.c[0])
            .field("coefficients", &self.c)
            .finish()
    }
}

impl Jet {
    pub fn constant(space: &Arc<JetSpace>, order: usize, value: f64) -> Self {
        assert!(order <= space.max_order, "jet order exceeds its space");
        let mut c = buffer(space.counts[order]);
        c[0] = value;
        Jet {
            space: Arc::clone(space),
            order,
            c,
        }
    }

    /// The independent variable `v` at the base value `value`.
    pub fn variable(space: &Arc<JetSpace>, order: usize, v: usize, value: f64) -> Self {
        assert!(v < space.nvars, "variable index out of range");
        let mut j = Self::constant(space, order, value);
        if order >= 1 {
            j.c[space.linear_index(v)] = 1.0;
        }
        j
    }

    pub fn space(&self) -> &Arc<JetSpace> {
        &self.space
    }

    pub fn order(&self) -> usize {
        self.order
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.c[0]
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.c
    }

    /// A constant with the same space and order as `self`.
    pub fn constant_like(&self, value: f64) -> Self {
        Self::constant(&self.space, self.order, value)
    }

    /// First partial derivatives at the base point.
    pub fn gradient(&self) -> Vec<f64> {
        if self.order == 0 {
            return vec![0.0; self.space.nvars];
        }
        self.c[1..=self.space.nvars].to_vec()
    }

    pub fn is_finite(&self) -> bool {
        self.c.iter().all(|v| v.is_finite())
    }

    /// Drops every coefficient above `order`.
    pub fn truncate(&self, order: usize) -> Self {
        if order >= self.order {
            return self.clone();
        }
        Jet {
            space: Arc::clone(&self.space),
            order,
            c: buffer_from(&self.c[..self.space.counts[order]]),
        }
    }

    /// Partial derivative with respect to variable `v`; the result is one
    /// order lower.
    pub fn derivative(&self, v: usize) -> Self {
        assert!(self.order >= 1, "cannot differentiate an order-0 jet");
        let order = self.order - 1;
        let mut c = buffer(self.space.counts[order]);
        let n = self.space.deriv_counts[v][order];
        for &(dst, src, f) in &self.space.deriv[v][..n] {
            c[dst as usize] = f * self.c[src as usize];
        }
        Jet {
            space: Arc::clone(&self.space),
            order,
            c,
        }
    }

    /// `self += k · other`, truncating `self` to the lower of the two orders.
    pub fn add_scaled(&mut self, k: f64, other: &Jet) {
        debug_assert!(Arc::ptr_eq(&self.space, &other.space), "mixed jet spaces");
        if other.order < self.order {
            self.order = other.order;
            self.c.truncate(self.space.counts[other.order]);
        }
        for (a, b) in self.c.iter_mut().zip(&other.c) {
            *a += k * b;
        }
    }

    pub fn scale(&self, k: f64) -> Self {
        Jet {
            space: Arc::clone(&self.space),
            order: self.order,
            c: {
                let mut c = buffer_from(&self.c);
                c.iter_mut().for_each(|v| *v *= k);
                c
            },
        }
    }

    fn zip_with(&self, other: &Jet, f: impl Fn(f64, f64) -> f64) -> Jet {
        debug_assert!(Arc::ptr_eq(&self.space, &other.space), "mixed jet spaces");
        let order = self.order.min(other.order);
        let n = self.space.counts[order];
        let mut c = buffer_from(&self.c[..n]);
        for (a, &b) in c.iter_mut().zip(&other.c[..n]) {
            *a = f(*a, b);
        }
        Jet {
            space: Arc::clone(&self.space),
            order,
            c,
        }
    }

    fn product(&self, other: &Jet) -> Jet {
        debug_assert!(Arc::ptr_eq(&self.space, &other.space), "mixed jet spaces");
        let order = self.order.min(other.order);
        let sp = &self.space;
        let len = sp.counts[order];
        let mut c = buffer(len);
        let (a, b) = (&self.c[..len], &other.c[..len]);
        let nnz = |v: &[f64]| v.iter().filter(|x| **x != 0.0).count();
        let (a, b) = if nnz(a) <= nnz(b) { (a, b) } else { (b, a) };
        let table = &sp.mul[order];
        for (i, &ai) in a.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            let row = &table.entries[table.row_start[i] as usize..table.row_start[i + 1] as usize];
            for &(j, o) in row {
                // SAFETY: table indices are below counts[order] == len
                unsafe {
                    *c.get_unchecked_mut(o as usize) += ai * b.get_unchecked(j as usize);
                }
            }
        }
        Jet {
            space: Arc::clone(sp),
            order,
            c,
        }
    }

    /// `f(self)` for a univariate `f` given its derivatives at the base value:
    /// `derivs[k] = f^(k)(self.value())`, at least `order + 1` entries.
    pub fn compose(&self, derivs: &[f64]) -> Jet {
        assert!(derivs.len() > self.order, "not enough derivatives supplied");
        let mut out = self.constant_like(derivs[0]);
        if self.order == 0 {
            return out;
        }
        let mut delta = self.clone();
        delta.c[0] = 0.0;
        let mut power = delta.clone();
        let mut factorial = 1.0;
        for (k, d) in derivs.iter().enumerate().take(self.order + 1).skip(1) {
            factorial *= k as f64;
            let coef = d / factorial;
            for (o, p) in out.c.iter_mut().zip(&power.c) {
                *o += coef * p;
            }
            if k < self.order {
                power = power.product(&delta);
            }
        }
        out
    }

    pub fn recip(&self) -> Jet {
        let a = self.value();
        let mut d = Vec::with_capacity(self.order + 1);
        let mut f = 1.0 / a;
        for k in 0..=self.order {
            d.push(f);
            f *= -((k + 1) as f64) / a;
        }
        self.compose(&d)
    }

    pub fn exp(&self) -> Jet {
        let e = self.value().exp();
        self.compose(&vec![e; self.order + 1])
    }

    pub fn sin(&self) -> Jet {
        let (s, c) = self.value().sin_cos();
        let cycle = [s, c, -s, -c];
        let d: Vec<f64> = (0..=self.order).map(|k| cycle[k % 4]).collect();
        self.compose(&d)
    }

    pub fn cos(&self) -> Jet {
        let (s, c) = self.value().sin_cos();
        let cycle = [c, -s, -c, s];
        let d: Vec<f64> = (0..=self.order).map(|k| cycle[k % 4]).collect();
        self.compose(&d)
    }

    /// Real power `self^p`; the base value must be positive unless `p` is a
    /// non-negative integer.
    pub fn powf(&self, p: f64) -> Jet {
        let a = self.value();
        let mut d = Vec::with_capacity(self.order + 1);
        let mut coef = 1.0;
        for k in 0..=self.order {
            d.push(coef * a.powf(p - k as f64));
            coef *= p - k as f64;
        }
        self.compose(&d)
    }

    pub fn sqrt(&self) -> Jet {
        self.powf(0.5)
    }

    pub fn powi(&self, n: i32) -> Jet {
        match n {
            0 => self.constant_like(1.0),
            n if n < 0 => self.powi(-n).recip(),
            _ => {
                let mut acc = self.clone();
                for _ in 1..n {
                    acc = acc.product(self);
                }
                acc
            }
        }
    }
}

macro_rules! jet_binop {
    ($tr:ident, $method:ident, $body:expr) => {
        impl $tr<&Jet> for &Jet {
            type Output = Jet;
            fn $method(self, rhs: &Jet) -> Jet {
                let f: fn(&Jet, &Jet) -> Jet = $body;
                f(self, rhs)
            }
        }
        impl $tr<Jet> for Jet {
            type Output = Jet;
            fn $method(self, rhs: Jet) -> Jet {
                self.$method(&rhs)
            }
        }
        impl $tr<Jet> for &Jet {
            type Output = Jet;
            fn $method(self, rhs: Jet) -> Jet {
                self.$method(&rhs)
            }
        }
    };
}

jet_binop!(Add, add, |a, b| a.zip_with(b, |x, y| x + y));
jet_binop!(Sub, sub, |a, b| a.zip_with(b, |x, y| x - y));
jet_binop!(Mul, mul, |a, b| a.product(b));
jet_binop!(Div, div, |a, b| a.product(&b.recip()));

impl Add<&Jet> for Jet {
    type Output = Jet;
    fn add(mut self, rhs: &Jet) -> Jet {
        self.add_scaled(1.0, rhs);
        self
    }
}

impl Sub<&Jet> for Jet {
    type Output = Jet;
    fn sub(mut self, rhs: &Jet) -> Jet {
        self.add_scaled(-1.0, rhs);
        self
    }
}

impl Mul<&Jet> for Jet {
    type Output = Jet;
    fn mul(self, rhs: &Jet) -> Jet {
        self.product(rhs)
    }
}

impl Div<&Jet> for Jet {
    type Output = Jet;
    fn div(self, rhs: &Jet) -> Jet {
        self.product(&rhs.recip())
    }
}

impl Neg for &Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(mut self) -> Jet {
        self.c.iter_mut().for_each(|v| *v = -*v);
        self
    }
}

impl Add<f64> for Jet {
    type Output = Jet;
    fn add(mut self, rhs: f64) -> Jet {
        self.c[0] += rhs;
        self
    }
}

impl Add<f64> for &Jet {
    type Output = Jet;
    fn add(self, rhs: f64) -> Jet {
        self.clone() + rhs
    }
}

impl Sub<f64> for Jet {
    type Output = Jet;
    fn sub(mut self, rhs: f64) -> Jet {
        self.c[0] -= rhs;
        self
    }
}

impl Sub<f64> for &Jet {
    type Output = Jet;
    fn sub(self, rhs: f64) -> Jet {
        self.clone() - rhs
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(mut self, rhs: f64) -> Jet {
        self.c.iter_mut().for_each(|v| *v *= rhs);
        self
    }
}

impl Mul<f64> for &Jet {
    type Output = Jet;
    fn mul(self, rhs: f64) -> Jet {
        self.scale(rhs)
    }
}

impl Div<f64> for Jet {
    type Output = Jet;
    fn div(self, rhs: f64) -> Jet {
        self * (1.0 / rhs)
    }
}

/// Arithmetic shared by `f64` and [`Jet`], so that regressors and other
/// user formulas can be written once and evaluated either way.
pub trait Scalar:
    Clone
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
{
    /// A constant compatible with `self` (same jet space and order).
    fn lift(&self, v: f64) -> Self;
    fn value(&self) -> f64;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn exp(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn powi(&self, n: i32) -> Self;
}

impl Scalar for f64 {
    fn lift(&self, v: f64) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn powi(&self, n: i32) -> Self {
        f64::powi(*self, n)
    }
}

impl Scalar for Jet {
    fn lift(&self, v: f64) -> Self {
        self.constant_like(v)
    }
    fn value(&self) -> f64 {
        Jet::value(self)
    }
    fn sin(&self) -> Self {
        Jet::sin(self)
    }
    fn cos(&self) -> Self {
        Jet::cos(self)
    }
    fn exp(&self) -> Self {
        Jet::exp(self)
    }
    fn sqrt(&self) -> Self {
        Jet::sqrt(self)
    }
    fn powi(&self, n: i32) -> Self {
        Jet::powi(self, n)
    }
}

/// Value and gradient of `f` at `point`, by first-order sensitivity
/// propagation.
///
/// `f` receives one seeded jet per coordinate of `point`.
pub fn propagate_sensitivities<F>(f: F, point: &[f64]) -> (f64, Vec<f64>)
where
    F: FnOnce(&[Jet]) -> Jet,
{
    let space = JetSpace::new(point.len(), 1);
    let vars: Vec<Jet> = point
        .iter()
        .enumerate()
        .map(|(i, &p)| Jet::variable(&space, 1, i, p))
        .collect();
    let out = f(&vars);
    (out.value(), out.gradient())
}

use std::rc::Rc;

use crate::element::Float;
use crate::error::{shape_err, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

/// How the two operands of a binary op line up. The smaller operand must be a
/// trailing suffix of the larger one; its values repeat over the leading dims.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Layout {
    Same,
    RhsRepeats,
    LhsRepeats,
}

fn layout(op: &'static str, a: &[usize], b: &[usize]) -> Result<Layout> {
    if a == b {
        Ok(Layout::Same)
    } else if b.len() < a.len() && a.ends_with(b) {
        Ok(Layout::RhsRepeats)
    } else if a.len() < b.len() && b.ends_with(a) {
        Ok(Layout::LhsRepeats)
    } else {
        Err(shape_err(op, a, b))
    }
}

/// Sums a broadcast gradient back down to `len` repeating elements.
fn fold_repeats<T: Float>(full: &[T], shape: &[usize]) -> Tensor<T> {
    let len: usize = shape.iter().product();
    let mut out = vec![T::zero(); len];
    for chunk in full.chunks(len) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::new(shape, out).expect("folded shape")
}

fn binary<'g, T: Float>(
    op: &'static str,
    a: Var<'g, T>,
    b: Var<'g, T>,
    f: fn(T, T) -> T,
    // (grad_out, a, b) -> (d/da, d/db) elementwise
    df: fn(T, T, T) -> (T, T),
) -> Result<Var<'g, T>> {
    let av = a.value();
    let bv = b.value();
    let lay = layout(op, av.shape(), bv.shape())?;
    let out_shape = if lay == Layout::LhsRepeats {
        bv.shape().to_vec()
    } else {
        av.shape().to_vec()
    };
    let n: usize = out_shape.iter().product();
    let (na, nb) = (av.numel(), bv.numel());
    let (ad, bd) = (av.data(), bv.data());
    let data: Vec<T> = match lay {
        Layout::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        _ => (0..n).map(|i| f(ad[i % na], bd[i % nb])).collect(),
    };
    let value = Tensor::new(&out_shape, data)?;
    Ok(a.graph().record(value, &[a, b], move |g| {
        let gd = g.data();
        let mut ga = Vec::with_capacity(n);
        let mut gb = Vec::with_capacity(n);
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..n {
            let (x, y) = df(gd[i], ad[i % na], bd[i % nb]);
            ga.push(x);
            gb.push(y);
        }
        vec![
            Some(fold_repeats(&ga, av.shape())),
            Some(fold_repeats(&gb, bv.shape())),
        ]
    }))
}

fn unary<'g, T: Float>(
    x: Var<'g, T>,
    f: impl Fn(T) -> T,
    // (x, y) -> dy/dx
    df: impl Fn(T, T) -> T + 'static,
) -> Var<'g, T> {
    let xv = x.value();
    let yv = Rc::new(xv.map(f));
    let y_saved = yv.clone();
    x.graph().record(yv, &[x], move |g| {
        let data = g
            .data()
            .iter()
            .zip(xv.data())
            .zip(y_saved.data())
            .map(|((&gi, &xi), &yi)| gi * df(xi, yi))
            .collect();
        vec![Some(Tensor::new(xv.shape(), data).expect("same shape"))]
    })
}

impl<'g, T: Float> Var<'g, T> {
    /// Elementwise sum. The smaller operand may broadcast over leading dims.
    pub fn add(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        binary("add", self, rhs, |a, b| a + b, |g, _, _| (g, g))
    }

    pub fn sub(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        binary("sub", self, rhs, |a, b| a - b, |g, _, _| (g, -g))
    }

    pub fn mul(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        binary("mul", self, rhs, |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    pub fn div(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        binary(
            "div",
            self,
            rhs,
            |a, b| a / b,
            |g, a, b| (g / b, -g * a / (b * b)),
        )
    }

    pub fn scale(self, s: T) -> Var<'g, T> {
        unary(self, move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: T) -> Var<'g, T> {
        unary(self, move |x| x + s, |_, _| T::one())
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    /// `1 - x`
    pub fn one_minus(self) -> Var<'g, T> {
        unary(self, |x| T::one() - x, |_, _| -T::one())
    }

    pub fn exp(self) -> Var<'g, T> {
        unary(self, |x| x.exp(), |_, y| y)
    }

    /// Natural log. Nonpositive inputs yield `-inf`/NaN; callers that can see
    /// them validate first.
    pub fn ln(self) -> Var<'g, T> {
        unary(self, |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn square(self) -> Var<'g, T> {
        unary(self, |x| x * x, |x, _| x + x)
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        unary(
            self,
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn relu(self) -> Var<'g, T> {
        unary(
            self,
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Gaussian error linear unit, exact `x * Phi(x)` form.
    pub fn gelu(self) -> Var<'g, T> {
        let half = T::lit(0.5);
        let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = T::lit(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
        unary(
            self,
            move |x| half * x * (T::one() + (x * inv_sqrt2).erf()),
            move |x, _| {
                let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                cdf + x * pdf
            },
        )
    }

    /// Clamps into `[lo, hi]`; the gradient passes only inside the interval.
    pub fn clamp(self, lo: T, hi: T) -> Var<'g, T> {
        unary(
            self,
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x >= lo && x <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }
}

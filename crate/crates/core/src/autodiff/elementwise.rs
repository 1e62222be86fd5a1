//! Unary maps and broadcasting binary arithmetic.

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

use super::graph::Var;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus_scalar<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

/// Broadcast shape of two same-rank shapes, numpy style.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(op, a, b)),
        })
        .collect()
}

/// Row-major strides of `shape` viewed inside `out`, with zero stride on
/// broadcast dimensions.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_pair(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    if a == out && b == out {
        (0..out.iter().product()).for_each(|i| f(i, i, i));
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let total: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..total {
        f(i, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

impl<'g, S: Scalar> Var<'g, S> {
    /// Elementwise map with derivative `df(x, y)` (y is the output).
    pub fn map_unary(
        self,
        op: &'static str,
        f: impl Fn(S) -> S,
        df: impl Fn(S, S) -> S + 'static,
    ) -> Var<'g, S> {
        let (shape, value) = {
            let x = self.data();
            (self.shape(), x.iter().map(|&v| f(v)).collect::<Vec<_>>())
        };
        self.graph().apply(
            op,
            &[self],
            shape,
            value,
            Box::new(move |ctx| {
                let x = ctx.inputs[0];
                let g = x
                    .iter()
                    .zip(ctx.output)
                    .zip(ctx.grad)
                    .map(|((&x, &y), &g)| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    fn broadcast_binary(
        self,
        rhs: Var<'g, S>,
        op: &'static str,
        f: fn(S, S) -> S,
        // (a, b, g) -> contribution to da, db
        da: fn(S, S, S) -> S,
        db: fn(S, S, S) -> S,
    ) -> Result<Var<'g, S>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        let out_shape = broadcast_shape(op, &sa, &sb)?;
        let value = {
            let (a, b) = (self.data(), rhs.data());
            let mut out = vec![S::zero(); out_shape.iter().product()];
            for_each_pair(&out_shape, &sa, &sb, |i, ia, ib| out[i] = f(a[ia], b[ib]));
            out
        };
        Ok(self.graph().apply(
            op,
            &[self, rhs],
            out_shape,
            value,
            Box::new(move |ctx| {
                let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
                let mut ga = ctx.needs[0].then(|| vec![S::zero(); a.len()]);
                let mut gb = ctx.needs[1].then(|| vec![S::zero(); b.len()]);
                for_each_pair(ctx.output_shape, ctx.input_shapes[0], ctx.input_shapes[1], |i, ia, ib| {
                    let g = ctx.grad[i];
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] = ga[ia] + da(a[ia], b[ib], g);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] = gb[ib] + db(a[ia], b[ib], g);
                    }
                });
                vec![ga, gb]
            }),
        ))
    }

    #[allow(clippy::should_implement_trait)] // fallible, so not an operator impl
    pub fn add(self, rhs: Var<'g, S>) -> Result<Var<'g, S>> {
        self.broadcast_binary(rhs, "add", |a, b| a + b, |_, _, g| g, |_, _, g| g)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, rhs: Var<'g, S>) -> Result<Var<'g, S>> {
        self.broadcast_binary(rhs, "sub", |a, b| a - b, |_, _, g| g, |_, _, g| -g)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, rhs: Var<'g, S>) -> Result<Var<'g, S>> {
        self.broadcast_binary(rhs, "mul", |a, b| a * b, |_, b, g| g * b, |a, _, g| g * a)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn div(self, rhs: Var<'g, S>) -> Result<Var<'g, S>> {
        self.broadcast_binary(
            rhs,
            "div",
            |a, b| a / b,
            |_, b, g| g / b,
            |a, b, g| -g * a / (b * b),
        )
    }

    /// Binary cross-entropy on logits `self` against probabilities
    /// `target`, elementwise and numerically stable.
    pub fn bce_with_logits(self, target: Var<'g, S>) -> Result<Var<'g, S>> {
        if self.shape() != target.shape() {
            return Err(Error::shape("bce_with_logits", &self.shape(), &target.shape()));
        }
        self.broadcast_binary(
            target,
            "bce_with_logits",
            |x, y| softplus_scalar(x) - x * y,
            |x, y, g| g * (sigmoid_scalar(x) - y),
            |x, _, g| -g * x,
        )
    }

    #[allow(clippy::should_implement_trait)]
    pub fn neg(self) -> Var<'g, S> {
        self.map_unary("neg", |x| -x, |_, _| -S::one())
    }

    pub fn scale(self, c: S) -> Var<'g, S> {
        self.map_unary("scale", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: S) -> Var<'g, S> {
        self.map_unary("add_scalar", move |x| x + c, |_, _| S::one())
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'g, S> {
        self.map_unary("one_minus", |x| S::one() - x, |_, _| -S::one())
    }

    pub fn square(self) -> Var<'g, S> {
        self.map_unary("square", |x| x * x, |x, _| x + x)
    }

    pub fn sqrt(self) -> Var<'g, S> {
        self.map_unary("sqrt", |x| x.sqrt(), |_, y| lit::<S>(0.5) / y)
    }

    pub fn exp(self) -> Var<'g, S> {
        self.map_unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'g, S> {
        self.map_unary("ln", |x| x.ln(), |x, _| S::one() / x)
    }

    pub fn sigmoid(self) -> Var<'g, S> {
        self.map_unary("sigmoid", sigmoid_scalar, |_, y| y * (S::one() - y))
    }

    pub fn tanh(self) -> Var<'g, S> {
        self.map_unary("tanh", |x| x.tanh(), |_, y| S::one() - y * y)
    }

    pub fn relu(self) -> Var<'g, S> {
        self.map_unary(
            "relu",
            |x| x.max(S::zero()),
            |x, _| if x > S::zero() { S::one() } else { S::zero() },
        )
    }

    /// GELU, tanh approximation (smooth everywhere).
    pub fn gelu(self) -> Var<'g, S> {
        let c: S = lit(GELU_C);
        let a: S = lit(GELU_A);
        let half: S = lit(0.5);
        self.map_unary(
            "gelu",
            move |x| half * x * (S::one() + (c * (x + a * x * x * x)).tanh()),
            move |x, _| {
                let t = (c * (x + a * x * x * x)).tanh();
                let three: S = lit(3.0);
                half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
            },
        )
    }
}

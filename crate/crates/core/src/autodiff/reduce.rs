//! Reductions and softmax.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::graph::Var;
use super::shape::split_axis;

impl<'g, S: Scalar> Var<'g, S> {
    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Var<'g, S> {
        let value = vec![self.data().iter().copied().sum()];
        self.graph().apply(
            "sum",
            &[self],
            vec![1],
            value,
            Box::new(|ctx| vec![Some(vec![ctx.grad[0]; ctx.inputs[0].len()])]),
        )
    }

    pub fn mean(self) -> Var<'g, S> {
        let n = S::from_usize(self.numel()).unwrap();
        self.sum().scale(S::one() / n)
    }

    /// Sum along `axis`, keeping it as size 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g, S>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("sum over axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let value = {
            let x = self.data();
            let mut out = vec![S::zero(); outer * inner];
            for o in 0..outer {
                for a in 0..len {
                    let row = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                    for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
            }
            out
        };
        let mut out_shape = shape;
        out_shape[axis] = 1;
        Ok(self.graph().apply(
            "sum_axis",
            &[self],
            out_shape,
            value,
            Box::new(move |ctx| {
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        gx.extend_from_slice(&ctx.grad[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'g, S>> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::invalid(format!("mean over axis {axis}")))?;
        Ok(self.sum_axis(axis)?.scale(S::one() / S::from_usize(len).unwrap()))
    }

    /// Channel-wise average of a `C×H×W` map, giving `1×H×W`.
    pub fn channel_mean(self) -> Result<Var<'g, S>> {
        if self.shape().len() != 3 {
            return Err(Error::invalid(format!("channel_mean needs C×H×W, got {:?}", self.shape())));
        }
        self.mean_axis(0)
    }

    /// Global average pooling of a `C×H×W` map, giving `C×1×1`.
    pub fn global_avg_pool(self) -> Result<Var<'g, S>> {
        let shape = self.shape();
        let [c, h, w] = shape[..] else {
            return Err(Error::invalid(format!("global_avg_pool needs C×H×W, got {shape:?}")));
        };
        self.reshape(&[c, h * w])?.mean_axis(1)?.reshape(&[c, 1, 1])
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'g, S>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("softmax over axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let value = {
            let x = self.data();
            let mut y = vec![S::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let max = (0..len).map(|a| x[at(a)]).fold(S::neg_infinity(), S::max);
                    let mut total = S::zero();
                    for a in 0..len {
                        let e = (x[at(a)] - max).exp();
                        y[at(a)] = e;
                        total = total + e;
                    }
                    for a in 0..len {
                        y[at(a)] = y[at(a)] / total;
                    }
                }
            }
            y
        };
        Ok(self.graph().apply(
            "softmax",
            &[self],
            shape,
            value,
            Box::new(move |ctx| {
                let (y, g) = (ctx.output, ctx.grad);
                let mut gx = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot = (0..len).fold(S::zero(), |acc, a| acc + g[at(a)] * y[at(a)]);
                        for a in 0..len {
                            gx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::graph::Graph;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    #[test]
    fn softmax_symmetric() {
        let g = Graph::<f64>::new();
        let y = g.constant(Tensor::zeros(&[3])).softmax(0).unwrap().value();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_powers_of_two() {
        let g = Graph::<f64>::new();
        let x = Tensor::from_f64(&[3], &[0.0, 2f64.ln(), 4f64.ln()]).unwrap();
        let y = g.constant(x).softmax(0).unwrap().value();
        for (v, e) in y.data().iter().zip([1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0]) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn channel_mean_of_two_channels() {
        let g = Graph::<f64>::new();
        let mut v = vec![1.0; 4];
        v.extend([3.0; 4]);
        let x = g.constant(Tensor::from_f64(&[2, 2, 2], &v).unwrap());
        let m = x.channel_mean().unwrap();
        assert_eq!(m.shape(), vec![1, 2, 2]);
        assert_eq!(m.value().data(), &[2.0; 4]);
    }

    #[test]
    fn gap_of_constant() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[3, 4, 5], 2.5));
        let p = x.global_avg_pool().unwrap();
        assert_eq!(p.shape(), vec![3, 1, 1]);
        assert!(p.value().data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    proptest! {
        #[test]
        fn softmax_rows_normalized(vals in proptest::collection::vec(-30.0f64..30.0, 12), axis in 0usize..2) {
            let g = Graph::<f64>::new();
            let x = g.constant(Tensor::from_f64(&[3, 4], &vals).unwrap());
            let y = x.softmax(axis).unwrap();
            let sums = y.sum_axis(axis).unwrap().value();
            for s in sums.data() {
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
            for v in y.value().data() {
                prop_assert!(*v > 0.0 && *v <= 1.0);
            }
        }
    }
}

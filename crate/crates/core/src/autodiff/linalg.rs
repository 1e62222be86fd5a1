use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::graph::Var;

/// `a (m×k) · b (k×n)`.
pub(crate) fn mm<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (c, &b) in row.iter_mut().zip(brow) {
                *c = *c + aip * b;
            }
        }
    }
    c
}

/// `a (m×n) · bᵀ` with `b (k×n)`, giving `m×k`.
pub(crate) fn mm_bt<S: Scalar>(a: &[S], b: &[S], m: usize, n: usize, k: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            c[i * k + j] = arow.iter().zip(brow).fold(S::zero(), |acc, (&x, &y)| acc + x * y);
        }
    }
    c
}

/// `aᵀ · b` with `a (m×k)`, `b (m×n)`, giving `k×n`.
pub(crate) fn mm_at<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let row = &mut c[p * n..(p + 1) * n];
            for (c, &b) in row.iter_mut().zip(brow) {
                *c = *c + aip * b;
            }
        }
    }
    c
}

impl<'g, S: Scalar> Var<'g, S> {
    /// Matrix product of two rank-2 tensors.
    pub fn matmul(self, rhs: Var<'g, S>) -> Result<Var<'g, S>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        let (m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let value = mm(&self.data(), &rhs.data(), m, k, n);
        Ok(self.graph().apply(
            "matmul",
            &[self, rhs],
            vec![m, n],
            value,
            Box::new(move |ctx| {
                let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                // dA = dOut·Bᵀ, dB = Aᵀ·dOut
                let ga = ctx.needs[0].then(|| mm_bt(g, b, m, n, k));
                let gb = ctx.needs[1].then(|| mm_at(a, g, m, k, n));
                vec![ga, gb]
            }),
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(self) -> Result<Var<'g, S>> {
        let shape = self.shape();
        let [r, c] = shape[..] else {
            return Err(Error::invalid(format!("transpose needs a matrix, got {shape:?}")));
        };
        let indices = (0..r * c).map(|i| (i % r) * c + i / r).collect();
        self.gather(indices, vec![c, r])
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn identity_product() {
        let g = Graph::<f64>::new();
        let i = g.constant(Tensor::eye(2));
        let b = g.constant(Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
        assert_eq!(i.matmul(b).unwrap().value().data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn hand_product() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[2, 2], &[1., 0., 0., 0.]).unwrap());
        let b = g.constant(Tensor::from_f64(&[2, 2], &[5., 6., 7., 8.]).unwrap());
        assert_eq!(a.matmul(b).unwrap().value().data(), &[5., 6., 0., 0.]);
    }

    #[test]
    fn grad_of_sum_wrt_lhs() {
        let g = Graph::<f64>::new();
        let a = g.variable(Tensor::from_f64(&[1, 2], &[1., 1.]).unwrap());
        let b = g.constant(Tensor::from_f64(&[2, 1], &[2., 3.]).unwrap());
        a.matmul(b).unwrap().sum().backward().unwrap();
        assert_eq!(a.grad().unwrap().data(), &[2., 3.]);
    }

    #[test]
    fn mismatch_reports_both_shapes() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn transpose_layout() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let t = a.transpose().unwrap();
        assert_eq!(t.shape(), vec![3, 2]);
        assert_eq!(t.value().data(), &[1., 4., 2., 5., 3., 6.]);
    }
}

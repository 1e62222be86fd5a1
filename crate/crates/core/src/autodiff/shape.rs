//! Layout operations: reshape, gather/scatter, concat, slicing, patching.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::numel;

use super::graph::Var;

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'g, S: Scalar> Var<'g, S> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, S>> {
        let from = self.shape();
        if numel(shape) != numel(&from) {
            return Err(Error::shape("reshape", &from, shape));
        }
        let value = self.data().to_vec();
        Ok(self.graph().apply(
            "reshape",
            &[self],
            shape.to_vec(),
            value,
            Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    /// `out[i] = self[indices[i]]` (flat indices).
    pub fn gather(self, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var<'g, S>> {
        let n = self.numel();
        if numel(&shape) != indices.len() {
            return Err(Error::shape("gather", &shape, &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("gather index {bad} out of range {n}")));
        }
        let value = {
            let x = self.data();
            indices.iter().map(|&i| x[i]).collect()
        };
        Ok(self.graph().apply(
            "gather",
            &[self],
            shape,
            value,
            Box::new(move |ctx| {
                let mut gx = vec![S::zero(); ctx.inputs[0].len()];
                for (&i, &g) in indices.iter().zip(ctx.grad) {
                    gx[i] = gx[i] + g;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `out[indices[i]] += self[i]` into a zero tensor of `shape`.
    pub fn scatter(self, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var<'g, S>> {
        let n = numel(&shape);
        if indices.len() != self.numel() {
            return Err(Error::shape("scatter", &self.shape(), &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("scatter index {bad} out of range {n}")));
        }
        let value = {
            let x = self.data();
            let mut out = vec![S::zero(); n];
            for (&i, &v) in indices.iter().zip(x.iter()) {
                out[i] = out[i] + v;
            }
            out
        };
        Ok(self.graph().apply(
            "scatter",
            &[self],
            shape,
            value,
            Box::new(move |ctx| vec![Some(indices.iter().map(|&i| ctx.grad[i]).collect())]),
        ))
    }

    /// Picks flat elements into a rank-1 tensor.
    pub fn index_select(self, indices: &[usize]) -> Result<Var<'g, S>> {
        self.gather(indices.to_vec(), vec![indices.len()])
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, S>> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let mut indices = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for a in start..start + len {
                let base = (o * full + a) * inner;
                indices.extend(base..base + inner);
            }
        }
        let mut out = shape.clone();
        out[axis] = len;
        self.gather(indices, out)
    }

    /// Space-to-depth: `C×H×W -> (C·p·p)×(H/p)×(W/p)`; output channel
    /// `c·p² + dy·p + dx` holds pixel `(y·p+dy, x·p+dx)` of channel `c`.
    pub fn patchify(self, p: usize) -> Result<Var<'g, S>> {
        let shape = self.shape();
        let [c, h, w] = shape[..] else {
            return Err(Error::invalid(format!("patchify needs C×H×W, got {shape:?}")));
        };
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::invalid(format!("patchify: {h}×{w} not divisible by {p}")));
        }
        let (oh, ow) = (h / p, w / p);
        let mut indices = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for dy in 0..p {
                for dx in 0..p {
                    for y in 0..oh {
                        for x in 0..ow {
                            indices.push(ch * h * w + (y * p + dy) * w + x * p + dx);
                        }
                    }
                }
            }
        }
        self.gather(indices, vec![c * p * p, oh, ow])
    }
}

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat<'g, S: Scalar>(parts: &[Var<'g, S>], axis: usize) -> Result<Var<'g, S>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let base = first.shape();
    if axis >= base.len() {
        return Err(Error::invalid(format!("concat axis {axis} for rank {}", base.len())));
    }
    let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
    for s in &shapes[1..] {
        let compatible = s.len() == base.len()
            && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
        if !compatible {
            return Err(Error::shape("concat", &base, s));
        }
    }
    let (outer, _, inner) = split_axis(&base, axis);
    let lens: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut out_shape = base.clone();
    out_shape[axis] = total;

    let value = {
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (d, &len) in datas.iter().zip(&lens) {
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        out
    };
    Ok(first.graph().apply(
        "concat",
        parts,
        out_shape,
        value,
        Box::new(move |ctx| {
            let mut grads: Vec<Option<Vec<S>>> = lens
                .iter()
                .zip(ctx.needs)
                .map(|(&len, &need)| need.then(|| Vec::with_capacity(outer * len * inner)))
                .collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (g, &len) in grads.iter_mut().zip(&lens) {
                    let span = len * inner;
                    if let Some(g) = g {
                        g.extend_from_slice(&ctx.grad[offset..offset + span]);
                    }
                    offset += span;
                }
            }
            grads
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn concat_channels_and_split_grads() {
        let g = Graph::<f64>::new();
        let a = g.variable(Tensor::from_f64(&[1, 2, 2], &[1., 2., 3., 4.]).unwrap());
        let b = g.variable(Tensor::from_f64(&[2, 2, 2], &[5., 6., 7., 8., 9., 10., 11., 12.]).unwrap());
        let c = concat(&[a, b], 0).unwrap();
        assert_eq!(c.shape(), vec![3, 2, 2]);
        let w = g.constant(Tensor::from_f64(&[3, 1, 1], &[1., 2., 3.]).unwrap());
        c.mul(w).unwrap().sum().backward().unwrap();
        assert_eq!(a.grad().unwrap().data(), &[1.; 4]);
        assert_eq!(b.grad().unwrap().data(), &[2., 2., 2., 2., 3., 3., 3., 3.]);
    }

    #[test]
    fn concat_rejects_mismatch_outside_axis() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 2]));
        let b = g.constant(Tensor::zeros(&[1, 3, 2]));
        assert!(concat(&[a, b], 0).is_err());
        assert!(concat(&[a, b], 1).is_ok());
    }

    #[test]
    fn patchify_groups_pixels() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, 2, 2], &[1., 2., 3., 4.]).unwrap());
        let p = x.patchify(2).unwrap();
        assert_eq!(p.shape(), vec![4, 1, 1]);
        assert_eq!(p.value().data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn scatter_then_gather_roundtrip() {
        let g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_f64(&[2], &[0.25, 0.75]).unwrap());
        let full = x.scatter(vec![2, 0], vec![3]).unwrap();
        assert_eq!(full.value().data(), &[0.75, 0., 0.25]);
        full.index_select(&[2]).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1., 0.]);
    }
}

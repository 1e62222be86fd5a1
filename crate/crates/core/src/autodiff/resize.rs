//! Bilinear resampling with half-pixel centers (corners not aligned).

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::graph::Var;

/// Per-output-coordinate taps `(i0, i1, w0, w1)` along one axis.
fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

impl<'g, S: Scalar> Var<'g, S> {
    /// Resizes a `C×H×W` map to `C×out_h×out_w`.
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Result<Var<'g, S>> {
        let shape = self.shape();
        let [c, h, w] = shape[..] else {
            return Err(Error::invalid(format!("resize needs C×H×W, got {shape:?}")));
        };
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("resize to an empty map"));
        }
        if (h, w) == (out_h, out_w) {
            return Ok(self);
        }
        let ys = axis_taps(h, out_h);
        let xs = axis_taps(w, out_w);
        let weights = |(y0, y1, wy0, wy1): (usize, usize, f64, f64), (x0, x1, wx0, wx1): (usize, usize, f64, f64)| {
            [
                (y0 * w + x0, S::from_f64_lossy(wy0 * wx0)),
                (y0 * w + x1, S::from_f64_lossy(wy0 * wx1)),
                (y1 * w + x0, S::from_f64_lossy(wy1 * wx0)),
                (y1 * w + x1, S::from_f64_lossy(wy1 * wx1)),
            ]
        };
        let taps: Vec<[(usize, S); 4]> = ys
            .iter()
            .flat_map(|&ty| xs.iter().map(move |&tx| (ty, tx)))
            .map(|(ty, tx)| weights(ty, tx))
            .collect();
        let (plane_in, plane_out) = (h * w, out_h * out_w);
        let value = {
            let x = self.data();
            let mut out = Vec::with_capacity(c * plane_out);
            for ch in 0..c {
                let src = &x[ch * plane_in..(ch + 1) * plane_in];
                out.extend(
                    taps.iter()
                        .map(|t| t.iter().fold(S::zero(), |acc, &(i, wt)| acc + wt * src[i])),
                );
            }
            out
        };
        Ok(self.graph().apply(
            "resize_bilinear",
            &[self],
            vec![c, out_h, out_w],
            value,
            Box::new(move |ctx| {
                let mut gx = vec![S::zero(); c * plane_in];
                for ch in 0..c {
                    let g = &ctx.grad[ch * plane_out..(ch + 1) * plane_out];
                    let dst = &mut gx[ch * plane_in..(ch + 1) * plane_in];
                    for (t, &go) in taps.iter().zip(g) {
                        for &(i, wt) in t {
                            dst[i] = dst[i] + wt * go;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

//! Direct 2-D cross-correlation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::graph::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvSpec {
    /// Stride 1 with "same" padding for an odd kernel.
    pub fn same(kernel: usize) -> Self {
        Self::same_dilated(kernel, 1)
    }

    pub fn same_dilated(kernel: usize, dilation: usize) -> Self {
        Self {
            padding: dilation * (kernel / 2),
            dilation,
            ..Self::default()
        }
    }

    pub fn with_groups(self, groups: usize) -> Self {
        Self { groups, ..self }
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn cin_per_group(&self) -> usize {
        self.cin / self.spec.groups
    }

    fn cout_per_group(&self) -> usize {
        self.cout / self.spec.groups
    }

    /// Output index range `[lo, hi)` whose input coordinate
    /// `o·stride + offset` falls inside `[0, extent)`.
    fn valid_range(&self, offset: isize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.spec.stride as isize;
        let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
        let last = extent as isize - 1 - offset;
        let hi = if last < 0 { 0 } else { last / s + 1 };
        (lo as usize, (hi as usize).min(out).max(lo as usize))
    }

    /// Visits every (input index, weight index, output index) triple that
    /// contributes, grouped so the innermost loop is contiguous in x.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let ConvSpec {
            stride,
            padding,
            dilation,
            ..
        } = self.spec;
        let (cig, cog) = (self.cin_per_group(), self.cout_per_group());
        for co in 0..self.cout {
            let group = co / cog;
            for cil in 0..cig {
                let ci = group * cig + cil;
                for ky in 0..self.k {
                    let yoff = (ky * dilation) as isize - padding as isize;
                    let (ylo, yhi) = self.valid_range(yoff, self.h, self.oh);
                    for kx in 0..self.k {
                        let xoff = (kx * dilation) as isize - padding as isize;
                        let (xlo, xhi) = self.valid_range(xoff, self.w, self.ow);
                        if xlo >= xhi {
                            continue;
                        }
                        let widx = ((co * cig + cil) * self.k + ky) * self.k + kx;
                        for oy in ylo..yhi {
                            let iy = (oy * stride) as isize + yoff;
                            let in_row = ci * self.h * self.w + iy as usize * self.w;
                            let out_row = co * self.oh * self.ow + oy * self.ow;
                            // (input base for ox=xlo, weight, output base, count, ...)
                            let ix0 = (xlo * stride) as isize + xoff;
                            f(in_row + ix0 as usize, widx, out_row + xlo, xhi - xlo, stride);
                        }
                    }
                }
            }
        }
    }
}

fn forward<S: Scalar>(x: &[S], w: &[S], bias: Option<&[S]>, geo: &Geometry) -> Vec<S> {
    let plane = geo.oh * geo.ow;
    let mut out = vec![S::zero(); geo.cout * plane];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b[co]);
        }
    }
    geo.for_each_tap(|in_base, widx, out_base, count, stride| {
        let wv = w[widx];
        if wv == S::zero() {
            return;
        }
        let dst = &mut out[out_base..out_base + count];
        if stride == 1 {
            for (o, &i) in dst.iter_mut().zip(&x[in_base..in_base + count]) {
                *o = *o + wv * i;
            }
        } else {
            for (j, o) in dst.iter_mut().enumerate() {
                *o = *o + wv * x[in_base + j * stride];
            }
        }
    });
    out
}

impl<'g, S: Scalar> Var<'g, S> {
    /// Cross-correlation of a `C_in×H×W` map with `C_out×(C_in/groups)×k×k`
    /// weights and optional per-output-channel bias.
    pub fn conv2d(self, weight: Var<'g, S>, bias: Option<Var<'g, S>>, spec: ConvSpec) -> Result<Var<'g, S>> {
        let (xs, ws) = (self.shape(), weight.shape());
        let (&[cin, h, w], &[cout, cig, k, k2]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(Error::shape("conv2d", &xs, &ws));
        };
        if k != k2 || k % 2 == 0 {
            return Err(Error::invalid(format!("conv2d kernel must be square and odd, got {ws:?}")));
        }
        if spec.groups == 0 || spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::invalid(format!("conv2d: degenerate spec {spec:?}")));
        }
        if cin % spec.groups != 0 || cout % spec.groups != 0 || cig * spec.groups != cin {
            return Err(Error::Shape {
                op: "conv2d (channels/groups)",
                lhs: xs,
                rhs: ws,
            });
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::shape("conv2d bias", &b.shape(), &[cout]));
            }
        }
        let span = spec.dilation * (k - 1) + 1;
        if h + 2 * spec.padding < span || w + 2 * spec.padding < span {
            return Err(Error::invalid(format!("conv2d: kernel span {span} exceeds padded {h}×{w}")));
        }
        let oh = (h + 2 * spec.padding - span) / spec.stride + 1;
        let ow = (w + 2 * spec.padding - span) / spec.stride + 1;
        let geo = Geometry {
            cin,
            h,
            w,
            cout,
            k,
            oh,
            ow,
            spec,
        };
        let value = {
            let b = bias.map(|b| b.data());
            forward(&self.data(), &weight.data(), b.as_deref(), &geo)
        };
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(self.graph().apply(
            "conv2d",
            &inputs,
            vec![cout, oh, ow],
            value,
            Box::new(move |ctx| {
                let (x, w, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let mut gx = ctx.needs[0].then(|| vec![S::zero(); x.len()]);
                let mut gw = ctx.needs[1].then(|| vec![S::zero(); w.len()]);
                geo.for_each_tap(|in_base, widx, out_base, count, stride| {
                    let gout = &g[out_base..out_base + count];
                    if let Some(gx) = gx.as_mut() {
                        let wv = w[widx];
                        for (j, &go) in gout.iter().enumerate() {
                            let i = in_base + j * stride;
                            gx[i] = gx[i] + wv * go;
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        let acc = gout
                            .iter()
                            .enumerate()
                            .fold(S::zero(), |acc, (j, &go)| acc + go * x[in_base + j * stride]);
                        gw[widx] = gw[widx] + acc;
                    }
                });
                let mut grads = vec![gx, gw];
                if ctx.inputs.len() == 3 {
                    let plane = geo.oh * geo.ow;
                    grads.push(ctx.needs[2].then(|| g.chunks(plane).map(|c| c.iter().copied().sum()).collect()));
                }
                grads
            }),
        ))
    }
}

//! Structure loss, Sobel pseudo-edges, multi-level auxiliary supervision
//! and the total loss.

use crate::autodiff::Var;
use crate::decoder::{DecoderOutputs, SUPERVISED_LEVELS};
use crate::error::{Error, Result};
use crate::params::Session;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Box window of the boundary weight.
pub const WEIGHT_WINDOW: usize = 15;
/// Default weight of the load-balancing term.
pub const MOE_LAMBDA: f64 = 1e-2;

fn check_binary<S: Scalar>(gt: &Tensor<S>) -> Result<()> {
    match gt.data().iter().find(|&&v| v != S::zero() && v != S::one()) {
        Some(v) => Err(Error::NonBinaryTarget(v.to_f64_lossy())),
        None => Ok(()),
    }
}

/// `1 + 5·|avgpool(gt) − gt|` with a 15×15 window, stride 1, zero padding
/// 7 and the padded cells counted in the average.
pub fn boundary_weights<S: Scalar>(gt: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, w) = gt.hw()?;
    let c = gt.shape()[0];
    let r = (WEIGHT_WINDOW / 2) as isize;
    let area = (WEIGHT_WINDOW * WEIGHT_WINDOW) as f64;
    let src = gt.to_f64_vec();
    // Summed-area table with a zero border row/column.
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let mut sat = vec![0.0; (h + 1) * (w + 1)];
        for y in 0..h {
            for x in 0..w {
                sat[(y + 1) * (w + 1) + x + 1] =
                    plane[y * w + x] + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x] - sat[y * (w + 1) + x];
            }
        }
        let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize) as usize;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (y0, y1) = (clamp(y - r, h), clamp(y + r + 1, h));
                let (x0, x1) = (clamp(x - r, w), clamp(x + r + 1, w));
                let sum = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0] + sat[y0 * (w + 1) + x0];
                let v = plane[y as usize * w + x as usize];
                out.push(S::from_f64_lossy(1.0 + 5.0 * (sum / area - v).abs()));
            }
        }
    }
    Tensor::new(gt.shape(), out)
}

/// Boundary-weighted BCE plus boundary-weighted soft IoU on logits.
pub fn structure_loss<'g, S: Scalar>(s: &Session<'g, S>, logits: Var<'g, S>, gt: &Tensor<S>) -> Result<Var<'g, S>> {
    if logits.shape() != gt.shape() {
        return Err(Error::shape("structure_loss", &logits.shape(), gt.shape()));
    }
    check_binary(gt)?;
    let weights = boundary_weights(gt)?;
    let total_weight = weights.sum();
    let wt = s.constant(weights);
    let target = s.constant(gt.clone());
    let wbce = logits
        .bce_with_logits(target)?
        .mul(wt)?
        .sum()
        .scale(S::one() / total_weight);
    let prob = logits.sigmoid();
    let inter = prob.mul(target)?.mul(wt)?.sum();
    let union = prob.add(target)?.mul(wt)?.sum();
    let wiou = inter
        .add_scalar(S::one())
        .div(union.sub(inter)?.add_scalar(S::one()))?
        .one_minus();
    wbce.add(wiou)
}

/// Binary edge map of a binary mask: Sobel magnitude with replicated
/// borders, divided by its maximum, thresholded at 0.5.
pub fn sobel_edges<S: Scalar>(gt: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, w) = gt.hw()?;
    let c = gt.shape()[0];
    let src = gt.to_f64_vec();
    let mut mag = vec![0.0f64; c * h * w];
    for ch in 0..c {
        let at = |y: isize, x: isize| {
            let y = y.clamp(0, h as isize - 1) as usize;
            let x = x.clamp(0, w as isize - 1) as usize;
            src[ch * h * w + y * w + x]
        };
        for y in 0..h as isize {
            for x in 0..w as isize {
                let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                    - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
                let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                    - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
                mag[ch * h * w + y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
            }
        }
    }
    let max = mag.iter().copied().fold(0.0, f64::max);
    let edges = mag
        .iter()
        .map(|&m| if max > 0.0 && m / max >= 0.5 { S::one() } else { S::zero() })
        .collect();
    Tensor::new(gt.shape(), edges)
}

/// Ground truth at a coarser level: area average, then `>= 0.5`.
pub fn downsample_mask<S: Scalar>(gt: &Tensor<S>, h: usize, w: usize) -> Result<Tensor<S>> {
    let (gh, gw) = gt.hw()?;
    if h == 0 || gh % h != 0 || gw % w != 0 || gh / h != gw / w {
        return Err(Error::invalid(format!("cannot downsample {gh}×{gw} mask to {h}×{w}")));
    }
    Ok(gt.area_downsample(gh / h)?.threshold(lit(0.5)))
}

/// Mean elementwise BCE on logits.
pub fn mean_bce<'g, S: Scalar>(s: &Session<'g, S>, logits: Var<'g, S>, target: &Tensor<S>) -> Result<Var<'g, S>> {
    if logits.shape() != target.shape() {
        return Err(Error::shape("bce", &logits.shape(), target.shape()));
    }
    Ok(logits.bce_with_logits(s.constant(target.clone()))?.mean())
}

/// Per-level auxiliary terms.
#[derive(Clone, Debug)]
pub struct AuxLoss<'g, S: Scalar> {
    pub coarse: Vec<Var<'g, S>>,
    pub edge: Vec<Var<'g, S>>,
    pub total: Var<'g, S>,
}

/// Structure loss on each coarse head and BCE on each edge head against
/// Sobel edges of the downsampled mask, summed over levels 1..3.
pub fn aux_loss<'g, S: Scalar>(s: &Session<'g, S>, decoder: &DecoderOutputs<'g, S>, gt: &Tensor<S>) -> Result<AuxLoss<'g, S>> {
    if decoder.coarse.len() != SUPERVISED_LEVELS || decoder.edges.len() != SUPERVISED_LEVELS {
        return Err(Error::invalid(format!("auxiliary loss needs {SUPERVISED_LEVELS} heads of each kind")));
    }
    check_binary(gt)?;
    let (mut coarse, mut edge) = (Vec::new(), Vec::new());
    let mut total: Option<Var<'g, S>> = None;
    for (c, e) in decoder.coarse.iter().zip(&decoder.edges) {
        let shape = c.shape();
        let level_gt = downsample_mask(gt, shape[1], shape[2])?;
        let lc = structure_loss(s, *c, &level_gt)?;
        let le = mean_bce(s, *e, &sobel_edges(&level_gt)?)?;
        let sum = lc.add(le)?;
        total = Some(match total {
            Some(t) => t.add(sum)?,
            None => sum,
        });
        coarse.push(lc);
        edge.push(le);
    }
    Ok(AuxLoss {
        coarse,
        edge,
        total: total.expect("three levels"),
    })
}

/// Loss components as graph values.
#[derive(Clone, Debug)]
pub struct LossBreakdown<'g, S: Scalar> {
    pub pred: Var<'g, S>,
    pub aux: Var<'g, S>,
    /// Per-level coarse and edge terms, averaged over frames.
    pub aux_coarse: Vec<Var<'g, S>>,
    pub aux_edge: Vec<Var<'g, S>>,
    pub moe: Var<'g, S>,
    pub total: Var<'g, S>,
}

/// Plain-number copy of a [`LossBreakdown`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub pred: f64,
    pub aux: f64,
    pub moe: f64,
}

impl<S: Scalar> LossBreakdown<'_, S> {
    pub fn values(&self) -> LossValues {
        LossValues {
            total: self.total.item().to_f64_lossy(),
            pred: self.pred.item().to_f64_lossy(),
            aux: self.aux.item().to_f64_lossy(),
            moe: self.moe.item().to_f64_lossy(),
        }
    }
}

/// Frame-averaged prediction and auxiliary losses plus the balance term:
/// `frames` pairs each frame's final logits with its decoder outputs.
pub fn total_loss<'g, S: Scalar>(
    s: &Session<'g, S>,
    frames: &[(Var<'g, S>, &DecoderOutputs<'g, S>)],
    gt: &[Tensor<S>],
    moe: Var<'g, S>,
) -> Result<LossBreakdown<'g, S>> {
    if frames.is_empty() || frames.len() != gt.len() {
        return Err(Error::invalid(format!("{} predictions for {} masks", frames.len(), gt.len())));
    }
    let inv: S = lit(1.0 / frames.len() as f64);
    let mean = |xs: Vec<Var<'g, S>>| -> Result<Var<'g, S>> {
        let mut it = xs.into_iter();
        let first = it.next().expect("nonempty");
        Ok(it.try_fold(first, |a, b| a.add(b))?.scale(inv))
    };
    let mut preds = Vec::new();
    let mut auxes = Vec::new();
    for ((logits, decoder), g) in frames.iter().zip(gt) {
        preds.push(structure_loss(s, *logits, g)?);
        auxes.push(aux_loss(s, decoder, g)?);
    }
    let pred = mean(preds)?;
    let aux = mean(auxes.iter().map(|a| a.total).collect())?;
    let aux_coarse = (0..SUPERVISED_LEVELS)
        .map(|i| mean(auxes.iter().map(|a| a.coarse[i]).collect()))
        .collect::<Result<Vec<_>>>()?;
    let aux_edge = (0..SUPERVISED_LEVELS)
        .map(|i| mean(auxes.iter().map(|a| a.edge[i]).collect()))
        .collect::<Result<Vec<_>>>()?;
    let total = pred.add(aux)?.add(moe)?;
    Ok(LossBreakdown {
        pred,
        aux,
        aux_coarse,
        aux_edge,
        moe,
        total,
    })
}

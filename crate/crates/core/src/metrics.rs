//! Saliency metrics: MAE, F-measure, S-measure and E-measure.
//!
//! Maps are row-major `h×w` slices of `f64`; predictions lie in `[0, 1]`
//! and ground truth is binary. Threshold sweeps use the 255 thresholds
//! `k/255`, `k = 1..=255`, binarizing with `pred >= t`.

use crate::error::{Error, Result};

pub const BETA_SQ: f64 = 0.3;
pub const ALPHA: f64 = 0.5;
pub const THRESHOLDS: usize = 255;
const EPS: f64 = f64::EPSILON;

pub fn threshold(k: usize) -> f64 {
    k as f64 / THRESHOLDS as f64
}

fn check(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<()> {
    if pred.len() != gt.len() || pred.len() != h * w || pred.is_empty() {
        return Err(Error::shape("metric", &[pred.len()], &[gt.len(), h, w]));
    }
    if let Some(&v) = gt.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::NonBinaryTarget(v));
    }
    Ok(())
}

pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape("mae", &[pred.len()], &[gt.len()]));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64)
}

/// Number of thresholds `k/255` (k >= 1) that `v` reaches.
fn thresholds_reached(v: f64) -> usize {
    let mut k = (v * THRESHOLDS as f64).floor().clamp(0.0, THRESHOLDS as f64) as usize;
    while k < THRESHOLDS && threshold(k + 1) <= v {
        k += 1;
    }
    while k > 0 && threshold(k) > v {
        k -= 1;
    }
    k
}

/// Per threshold `k = 1..=255`: (predicted-positive count, true-positive
/// count). Built from a histogram and a suffix sum.
fn positive_counts(pred: &[f64], gt: &[f64]) -> Vec<(usize, usize)> {
    let mut hist = vec![(0usize, 0usize); THRESHOLDS + 1];
    for (&p, &g) in pred.iter().zip(gt) {
        let bin = thresholds_reached(p);
        hist[bin].0 += 1;
        if g == 1.0 {
            hist[bin].1 += 1;
        }
    }
    // pred >= k/255 exactly when the pixel reached at least k thresholds.
    let mut out = vec![(0, 0); THRESHOLDS];
    let (mut pp, mut tp) = (0, 0);
    for k in (1..=THRESHOLDS).rev() {
        pp += hist[k].0;
        tp += hist[k].1;
        out[k - 1] = (pp, tp);
    }
    out
}

fn f_beta(precision: f64, recall: f64) -> f64 {
    let denom = BETA_SQ * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + BETA_SQ) * precision * recall / denom
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FMeasure {
    pub max: f64,
    pub mean: f64,
    /// Ground truth had no foreground; both values are 0.
    pub degenerate: bool,
}

pub fn f_measure(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<FMeasure> {
    check(pred, gt, h, w)?;
    let positives = gt.iter().filter(|&&g| g == 1.0).count();
    if positives == 0 {
        return Ok(FMeasure {
            max: 0.0,
            mean: 0.0,
            degenerate: true,
        });
    }
    let scores: Vec<f64> = positive_counts(pred, gt)
        .into_iter()
        .map(|(pp, tp)| {
            let precision = if pp == 0 { 0.0 } else { tp as f64 / pp as f64 };
            f_beta(precision, tp as f64 / positives as f64)
        })
        .collect();
    Ok(FMeasure {
        max: scores.iter().copied().fold(0.0, f64::max),
        mean: scores.iter().sum::<f64>() / THRESHOLDS as f64,
        degenerate: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub value: f64,
    /// Constant ground truth; the fallback definition was used.
    pub degenerate: bool,
}

/// Enhanced-alignment value of one pixel pair of demeaned values.
fn enhanced(phi_pred: f64, phi_gt: f64) -> f64 {
    let align = 2.0 * phi_pred * phi_gt / (phi_pred * phi_pred + phi_gt * phi_gt + EPS);
    (align + 1.0).powi(2) / 4.0
}

/// Mean over thresholds of the per-pixel mean enhanced alignment. A
/// binarized map takes two values, so each threshold needs only the four
/// (pred, gt) cell counts.
pub fn e_measure(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<Scored> {
    check(pred, gt, h, w)?;
    let n = pred.len();
    let gt_fg = gt.iter().filter(|&&g| g == 1.0).count();
    let degenerate = gt_fg == 0 || gt_fg == n;
    let mut total = 0.0;
    for (pp, tp) in positive_counts(pred, gt) {
        let fg_bg = pp - tp;
        let bg_fg = gt_fg - tp;
        let bg_bg = n - pp - bg_fg;
        let sum = if gt_fg == 0 {
            (n - pp) as f64
        } else if gt_fg == n {
            pp as f64
        } else {
            let mp = pp as f64 / n as f64;
            let mg = gt_fg as f64 / n as f64;
            tp as f64 * enhanced(1.0 - mp, 1.0 - mg)
                + fg_bg as f64 * enhanced(1.0 - mp, -mg)
                + bg_fg as f64 * enhanced(-mp, 1.0 - mg)
                + bg_bg as f64 * enhanced(-mp, -mg)
        };
        total += sum / n as f64;
    }
    Ok(Scored {
        value: total / THRESHOLDS as f64,
        degenerate,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `2x̄ / (x̄² + 1 + σ + ε)` of one region's values; σ is the sample
/// deviation (0 below two pixels).
fn object_similarity(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = mean(values);
    let sd = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
    };
    2.0 * m / (m * m + 1.0 + sd + EPS)
}

fn object_score(pred: &[f64], gt: &[f64]) -> f64 {
    let fg: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| g == 1.0).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| g == 0.0).map(|(&p, _)| 1.0 - p).collect();
    let u = mean(gt);
    u * object_similarity(&fg) + (1.0 - u) * object_similarity(&bg)
}

/// Structural similarity of one quadrant, sample statistics with the
/// `N − 1` denominator floored at 1.
fn quadrant_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    let (x, y) = (mean(pred), mean(gt));
    let d = (n.max(2) - 1) as f64;
    let sx = pred.iter().map(|p| (p - x).powi(2)).sum::<f64>() / d;
    let sy = gt.iter().map(|g| (g - y).powi(2)).sum::<f64>() / d;
    let sxy = pred.iter().zip(gt).map(|(p, g)| (p - x) * (g - y)).sum::<f64>() / d;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Foreground centroid as 1-based split coordinates `(x, y)`, rounding
/// half to even.
fn centroid(gt: &[f64], h: usize, w: usize) -> (usize, usize) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if gt[y * w + x] == 1.0 {
                sx += x as f64;
                sy += y as f64;
                n += 1;
            }
        }
    }
    let (cx, cy) = if n == 0 {
        ((w as f64 / 2.0).round_ties_even(), (h as f64 / 2.0).round_ties_even())
    } else {
        ((sx / n as f64).round_ties_even(), (sy / n as f64).round_ties_even())
    };
    (cx as usize + 1, cy as usize + 1)
}

fn region_score(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    let (cx, cy) = centroid(gt, h, w);
    let (cx, cy) = (cx.min(w), cy.min(h));
    let area = (h * w) as f64;
    let mut score = 0.0;
    for (y0, y1) in [(0, cy), (cy, h)] {
        for (x0, x1) in [(0, cx), (cx, w)] {
            let cells = (y1 - y0) * (x1 - x0);
            if cells == 0 {
                continue;
            }
            let mut p = Vec::with_capacity(cells);
            let mut g = Vec::with_capacity(cells);
            for y in y0..y1 {
                p.extend_from_slice(&pred[y * w + x0..y * w + x1]);
                g.extend_from_slice(&gt[y * w + x0..y * w + x1]);
            }
            score += cells as f64 / area * quadrant_ssim(&p, &g);
        }
    }
    score
}

/// `0.5·S_object + 0.5·S_region`, clamped at 0.
pub fn s_measure(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<Scored> {
    check(pred, gt, h, w)?;
    let y = mean(gt);
    let (value, degenerate) = if y == 0.0 {
        (1.0 - mean(pred), true)
    } else if y == 1.0 {
        (mean(pred), true)
    } else {
        let v = ALPHA * object_score(pred, gt) + (1.0 - ALPHA) * region_score(pred, gt, h, w);
        (v.max(0.0), false)
    };
    Ok(Scored { value, degenerate })
}

/// All four metrics for one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameMetrics {
    pub e: f64,
    pub s: f64,
    pub f_max: f64,
    pub f_mean: f64,
    pub mae: f64,
    pub degenerate: bool,
}

pub fn evaluate(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<FrameMetrics> {
    let f = f_measure(pred, gt, h, w)?;
    let s = s_measure(pred, gt, h, w)?;
    let e = e_measure(pred, gt, h, w)?;
    Ok(FrameMetrics {
        e: e.value,
        s: s.value,
        f_max: f.max,
        f_mean: f.mean,
        mae: mae(pred, gt)?,
        degenerate: f.degenerate || s.degenerate || e.degenerate,
    })
}

/// Field-wise mean over frames.
pub fn mean_metrics(frames: &[FrameMetrics]) -> Option<FrameMetrics> {
    if frames.is_empty() {
        return None;
    }
    let n = frames.len() as f64;
    let avg = |f: fn(&FrameMetrics) -> f64| frames.iter().map(f).sum::<f64>() / n;
    Some(FrameMetrics {
        e: avg(|m| m.e),
        s: avg(|m| m.s),
        f_max: avg(|m| m.f_max),
        f_mean: avg(|m| m.f_mean),
        mae: avg(|m| m.mae),
        degenerate: frames.iter().any(|m| m.degenerate),
    })
}

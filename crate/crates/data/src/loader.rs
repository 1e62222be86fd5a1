//! Clip loading, pseudo-depth substitution and epoch sampling.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vsod_core::{Scalar, Tensor, VideoClip};

use crate::error::{DataError, Result};
use crate::pnm::Image;
use crate::synth::{frame_name, ManifestEntry};

/// Bilinear resize of one `h×w` plane with half-pixel centers.
pub fn resize_plane(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    if (h, w) == (out_h, out_w) {
        return src.to_vec();
    }
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let p = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = p.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), p - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Channel-major planes of an image scaled to `[0, 1]` and resized.
fn planes(img: &Image, size: usize) -> Vec<Vec<f64>> {
    (0..img.channels)
        .map(|c| {
            let plane: Vec<f64> = img.data.iter().skip(c).step_by(img.channels).map(|&v| v as f64 / 255.0).collect();
            resize_plane(&plane, img.height, img.width, size, size)
        })
        .collect()
}

/// `(d − min)/(max − min)`; a constant map becomes all zeros.
pub fn normalize_depth(plane: &mut [f64]) {
    let (lo, hi) = plane
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    for v in plane.iter_mut() {
        *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
    }
}

fn replicate3<S: Scalar>(plane: &[f64], size: usize) -> Result<Tensor<S>> {
    let data: Vec<f64> = plane.iter().chain(plane).chain(plane).copied().collect();
    Ok(Tensor::from_f64(&[3, size, size], &data)?)
}

/// Loads frames `start..start + len` of `root/sequence`, resized to
/// `size×size`. Depth is min-max normalized per frame and replicated to
/// three channels; masks are thresholded at 0.5.
pub fn load_clip<S: Scalar>(root: &Path, sequence: &str, start: usize, len: usize, size: usize) -> Result<VideoClip<S>> {
    load_frames(root, sequence, start, len, size, true)
}

/// Like [`load_clip`] but never opens `gt/`; the clip's masks are all-zero
/// placeholders. Inference goes through this loader.
pub fn load_unlabeled_clip<S: Scalar>(root: &Path, sequence: &str, start: usize, len: usize, size: usize) -> Result<VideoClip<S>> {
    load_frames(root, sequence, start, len, size, false)
}

fn load_frames<S: Scalar>(root: &Path, sequence: &str, start: usize, len: usize, size: usize, labeled: bool) -> Result<VideoClip<S>> {
    if len == 0 || size == 0 {
        return Err(DataError::Invalid("clip length and size must be positive".into()));
    }
    let dir = root.join(sequence);
    let (mut rgb, mut depth, mut gt) = (Vec::new(), Vec::new(), Vec::new());
    for t in start..start + len {
        let color = Image::read_channels(&dir.join("rgb").join(frame_name(t, "ppm")), 3)?;
        let rgb_planes: Vec<f64> = planes(&color, size).concat();
        rgb.push(Tensor::from_f64(&[3, size, size], &rgb_planes)?);

        let mut d = planes(&Image::read_channels(&dir.join("depth").join(frame_name(t, "pgm")), 1)?, size).remove(0);
        normalize_depth(&mut d);
        depth.push(replicate3(&d, size)?);

        if labeled {
            let mask = planes(&Image::read_channels(&dir.join("gt").join(frame_name(t, "pgm")), 1)?, size).remove(0);
            let mask: Vec<f64> = mask.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
            gt.push(Tensor::from_f64(&[1, size, size], &mask)?);
        } else {
            gt.push(Tensor::zeros(&[1, size, size]));
        }
    }
    Ok(VideoClip::new(sequence, (start..start + len).collect(), rgb, depth, gt)?)
}

/// Replacement depth for the pseudo-depth ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PseudoDepth {
    /// Luma of the RGB frame.
    Copy,
    /// All zeros.
    Black,
}

impl PseudoDepth {
    pub fn as_str(self) -> &'static str {
        match self {
            PseudoDepth::Copy => "copy",
            PseudoDepth::Black => "black",
        }
    }
}

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Returns a copy of `clip` whose depth is replaced according to `mode`.
pub fn pseudo_depth<S: Scalar>(clip: &VideoClip<S>, mode: PseudoDepth) -> VideoClip<S> {
    let mut out = clip.clone();
    for (depth, rgb) in out.depth.iter_mut().zip(&clip.rgb) {
        let n = rgb.len() / 3;
        let src = rgb.data();
        let dst = depth.data_mut();
        for i in 0..n {
            let v = match mode {
                PseudoDepth::Black => S::zero(),
                PseudoDepth::Copy => S::from_f64_lossy(
                    LUMA[0] * src[i].to_f64_lossy() + LUMA[1] * src[n + i].to_f64_lossy() + LUMA[2] * src[2 * n + i].to_f64_lossy(),
                ),
            };
            for c in 0..3 {
                dst[c * n + i] = v;
            }
        }
    }
    out
}

/// Mirrors every frame left to right.
pub fn flip_horizontal<S: Scalar>(clip: &VideoClip<S>) -> VideoClip<S> {
    let flip = |t: &Tensor<S>| {
        let (h, w) = t.hw().expect("clip tensors are C×H×W");
        let mut out = t.clone();
        let src = t.data();
        for (row, dst) in src.chunks(w).zip(out.data_mut().chunks_mut(w)) {
            for x in 0..w {
                dst[x] = row[w - 1 - x];
            }
        }
        debug_assert_eq!(src.len() % (h * w), 0);
        out
    };
    VideoClip {
        sequence: clip.sequence.clone(),
        frames: clip.frames.clone(),
        rgb: clip.rgb.iter().map(flip).collect(),
        depth: clip.depth.iter().map(flip).collect(),
        gt: clip.gt.iter().map(flip).collect(),
    }
}

/// A clip position: sequence name and first frame.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Window {
    pub sequence: String,
    pub start: usize,
}

/// Enumerates every `len`-frame window of every sequence and visits each
/// exactly once per epoch in a seeded order.
#[derive(Clone, Debug)]
pub struct ClipSampler {
    windows: Vec<Window>,
    seed: u64,
}

impl ClipSampler {
    pub fn new(entries: &[ManifestEntry], len: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(DataError::Invalid("clip length must be positive".into()));
        }
        let windows: Vec<Window> = entries
            .iter()
            .filter(|e| e.length >= len)
            .flat_map(|e| {
                (0..=e.length - len).map(|start| Window {
                    sequence: e.sequence.clone(),
                    start,
                })
            })
            .collect();
        if windows.is_empty() {
            return Err(DataError::Invalid(format!("no sequence has {len} frames")));
        }
        Ok(Self { windows, seed })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// The visiting order of `epoch`.
    pub fn epoch(&self, epoch: u64) -> Vec<Window> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order = self.windows.clone();
        order.shuffle(&mut rng);
        order
    }

    /// An endless stream of windows, epoch after epoch.
    pub fn stream(&self) -> impl Iterator<Item = Window> + '_ {
        (0u64..).flat_map(move |e| self.epoch(e))
    }
}

/// Frames `start..start + len` of an already loaded clip.
pub fn sub_clip<S: Scalar>(clip: &VideoClip<S>, start: usize, len: usize) -> Result<VideoClip<S>> {
    if len == 0 || start + len > clip.len() {
        return Err(DataError::Invalid(format!(
            "window {start}..{} outside a {}-frame clip",
            start + len,
            clip.len()
        )));
    }
    let range = start..start + len;
    Ok(VideoClip::new(
        clip.sequence.clone(),
        clip.frames[range.clone()].to_vec(),
        clip.rgb[range.clone()].to_vec(),
        clip.depth[range.clone()].to_vec(),
        clip.gt[range].to_vec(),
    )?)
}

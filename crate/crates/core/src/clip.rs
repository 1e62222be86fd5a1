//! The training and inference unit: aligned RGB, depth and mask frames.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `T` consecutive frames of one sequence. RGB and depth are `3×H×W` in
/// `[0, 1]`; masks are `1×H×W` binary.
#[derive(Clone, Debug)]
pub struct VideoClip<S> {
    pub sequence: String,
    pub frames: Vec<usize>,
    pub rgb: Vec<Tensor<S>>,
    pub depth: Vec<Tensor<S>>,
    pub gt: Vec<Tensor<S>>,
}

impl<S: Scalar> VideoClip<S> {
    pub fn new(
        sequence: impl Into<String>,
        frames: Vec<usize>,
        rgb: Vec<Tensor<S>>,
        depth: Vec<Tensor<S>>,
        gt: Vec<Tensor<S>>,
    ) -> Result<Self> {
        let t = frames.len();
        if t == 0 {
            return Err(Error::invalid("clip has no frames"));
        }
        if rgb.len() != t || depth.len() != t || gt.len() != t {
            return Err(Error::invalid(format!(
                "clip frame counts disagree: {t} indices, {} rgb, {} depth, {} gt",
                rgb.len(),
                depth.len(),
                gt.len()
            )));
        }
        let (h, w) = rgb[0].hw()?;
        for i in 0..t {
            for (what, tensor, ch) in [("rgb", &rgb[i], 3), ("depth", &depth[i], 3), ("gt", &gt[i], 1)] {
                if tensor.shape() != [ch, h, w] {
                    return Err(Error::shape(what, tensor.shape(), &[ch, h, w]));
                }
            }
        }
        Ok(Self {
            sequence: sequence.into(),
            frames,
            rgb,
            depth,
            gt,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn size(&self) -> (usize, usize) {
        self.rgb[0].hw().expect("validated on construction")
    }

    pub fn cast<T: Scalar>(&self) -> VideoClip<T> {
        let cast = |v: &[Tensor<S>]| v.iter().map(|t| t.cast()).collect();
        VideoClip {
            sequence: self.sequence.clone(),
            frames: self.frames.clone(),
            rgb: cast(&self.rgb),
            depth: cast(&self.depth),
            gt: cast(&self.gt),
        }
    }
}

//! Moving-shape RGB-D sequences with same-colored distractors that only
//! depth can tell apart from the salient object.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DataError, Result};
use crate::pnm::{to_byte, Image};

/// Frames are rejected unless their side is a multiple of this.
pub const SIZE_MULTIPLE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Disk,
    /// A square with its top-right quadrant removed.
    LShape,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Disk, Shape::LShape];

    /// Whether the pixel at integer coordinates `(x, y)` belongs to a shape
    /// of side `size` centered at `(cx, cy)`.
    pub fn contains(self, x: f64, y: f64, cx: f64, cy: f64, size: f64) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        let half = size / 2.0;
        match self {
            Shape::Square => dx.abs() < half && dy.abs() < half,
            Shape::Disk => dx * dx + dy * dy < half * half,
            Shape::LShape => dx.abs() < half && dy.abs() < half && !(dx >= 0.0 && dy < 0.0),
        }
    }
}

/// Parameters of one synthetic scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub shape: Shape,
    /// Side (or diameter) in pixels.
    pub object_size: f64,
    /// Object center at frame 0, `(x, y)`.
    pub start: (f64, f64),
    /// Pixels per frame, `(x, y)`.
    pub velocity: (f64, f64),
    /// Largest per-frame rotation of the heading, radians.
    pub jitter: f64,
    pub object_color: [f64; 3],
    /// Object depth; larger is nearer.
    pub object_depth: f64,
    /// Background depth ramps linearly between these along `depth_angle`.
    pub background_depth: (f64, f64),
    pub depth_angle: f64,
    /// Required gap between the object depth and the nearest background.
    pub min_contrast: f64,
    pub texture_seed: u64,
    /// Global brightness multiplier of the RGB frame.
    pub illumination: f64,
    /// Static copies of the object placed at background depth.
    pub distractors: usize,
}

impl SceneSpec {
    /// A centered, motionless gray square on a flat background.
    pub fn still(size: usize) -> Self {
        let c = size as f64 / 2.0;
        Self {
            shape: Shape::Square,
            object_size: size as f64 / 4.0,
            start: (c, c),
            velocity: (0.0, 0.0),
            jitter: 0.0,
            object_color: [0.8, 0.3, 0.2],
            object_depth: 0.9,
            background_depth: (0.2, 0.4),
            depth_angle: 0.0,
            min_contrast: 0.2,
            texture_seed: 0,
            illumination: 1.0,
            distractors: 0,
        }
    }

    /// A random scene for a `size×size` frame.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Self {
        let s = size as f64;
        let object_size = rng.gen_range(0.22..0.32) * s;
        let margin = object_size / 2.0 + 1.0;
        let speed = rng.gen_range(0.5..2.5) * s / 64.0;
        let heading = rng.gen_range(0.0..2.0 * PI);
        let hue = rng.gen_range(0.0..1.0);
        let far = rng.gen_range(0.05..0.25);
        Self {
            shape: Shape::ALL[rng.gen_range(0..3)],
            object_size,
            start: (rng.gen_range(margin..s - margin), rng.gen_range(margin..s - margin)),
            velocity: (speed * heading.cos(), speed * heading.sin()),
            jitter: rng.gen_range(0.0..0.3),
            object_color: hue_to_rgb(hue),
            object_depth: rng.gen_range(0.75..0.95),
            background_depth: (far, far + rng.gen_range(0.1..0.3)),
            depth_angle: rng.gen_range(0.0..2.0 * PI),
            min_contrast: 0.15,
            texture_seed: rng.gen(),
            illumination: rng.gen_range(0.8..1.1),
            distractors: rng.gen_range(1..=2),
        }
    }

    pub fn validate(&self, size: usize) -> Result<()> {
        if size == 0 || !size.is_multiple_of(SIZE_MULTIPLE) {
            return Err(DataError::Invalid(format!("frame size {size} is not a positive multiple of {SIZE_MULTIPLE}")));
        }
        let s = size as f64;
        if !(self.object_size >= 1.0 && self.object_size + 2.0 <= s) {
            return Err(DataError::Invalid(format!("object size {} does not fit a {size}px frame", self.object_size)));
        }
        let nearest_bg = self.background_depth.0.max(self.background_depth.1);
        if self.object_depth - nearest_bg < self.min_contrast {
            return Err(DataError::Invalid(format!(
                "depth contrast {:.3} below minimum {:.3}",
                self.object_depth - nearest_bg,
                self.min_contrast
            )));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.object_depth) || !unit(self.background_depth.0) || !unit(self.background_depth.1) {
            return Err(DataError::Invalid("depth values must lie in [0, 1]".into()));
        }
        if self.illumination.is_nan() || self.illumination <= 0.0 {
            return Err(DataError::Invalid("illumination must be positive".into()));
        }
        Ok(())
    }

    /// Object centers for `length` frames. Each step moves by the current
    /// velocity, optionally turned by up to `jitter` radians, and bounces
    /// off the walls so the shape stays at least one pixel inside.
    pub fn trajectory<R: Rng + ?Sized>(&self, length: usize, size: usize, rng: &mut R) -> Vec<(f64, f64)> {
        let lo = self.object_size / 2.0 + 1.0;
        let hi = size as f64 - self.object_size / 2.0 - 1.0;
        let reflect = |p: f64, v: f64| -> (f64, f64) {
            if p < lo {
                ((2.0 * lo - p).min(hi), -v)
            } else if p > hi {
                ((2.0 * hi - p).max(lo), -v)
            } else {
                (p, v)
            }
        };
        let (mut x, mut y) = (self.start.0.clamp(lo, hi), self.start.1.clamp(lo, hi));
        let (mut vx, mut vy) = self.velocity;
        let mut out = Vec::with_capacity(length);
        for _ in 0..length {
            out.push((x, y));
            if self.jitter > 0.0 {
                let a = rng.gen_range(-self.jitter..=self.jitter);
                (vx, vy) = (vx * a.cos() - vy * a.sin(), vx * a.sin() + vy * a.cos());
            }
            (x, vx) = reflect(x + vx, vx);
            (y, vy) = reflect(y + vy, vy);
        }
        out
    }
}

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let channel = |offset: f64| {
        let k = (h * 6.0 + offset) % 6.0;
        let v = (k.min(4.0 - k)).clamp(0.0, 1.0);
        0.25 + 0.7 * v
    };
    [channel(5.0), channel(3.0), channel(1.0)]
}

/// Smooth color field: a few random low-frequency waves per channel plus
/// fine per-pixel noise.
struct Texture {
    waves: Vec<[f64; 5]>,
    base: [f64; 3],
    noise: Vec<f64>,
}

impl Texture {
    fn new(seed: u64, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..6)
            .map(|_| {
                [
                    rng.gen_range(0.0..3.0),
                    rng.gen_range(0.5..3.0) * 2.0 * PI / size as f64,
                    rng.gen_range(0.0..2.0 * PI),
                    rng.gen_range(0.0..2.0 * PI),
                    rng.gen_range(0.04..0.12),
                ]
            })
            .collect();
        let base = [rng.gen_range(0.3..0.6), rng.gen_range(0.3..0.6), rng.gen_range(0.3..0.6)];
        let noise = (0..size * size * 3).map(|_| rng.gen_range(-0.03..0.03)).collect();
        Self { waves, base, noise }
    }

    fn at(&self, x: usize, y: usize, size: usize) -> [f64; 3] {
        let mut c = self.base;
        for w in &self.waves {
            let ch = (w[0] as usize).min(2);
            let t = x as f64 * w[2].cos() + y as f64 * w[2].sin();
            c[ch] += w[4] * (w[1] * t + w[3]).sin();
        }
        let i = (y * size + x) * 3;
        [c[0] + self.noise[i], c[1] + self.noise[i + 1], c[2] + self.noise[i + 2]]
    }
}

/// One rendered frame as 8-bit images.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub rgb: Image,
    pub depth: Image,
    pub gt: Image,
}

/// A rendered sequence kept in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Frame>,
    pub centers: Vec<(f64, f64)>,
}

/// Renders `length` frames deterministically from `seed`.
pub fn render_sequence(spec: &SceneSpec, length: usize, size: usize, seed: u64) -> Result<Sequence> {
    spec.validate(size)?;
    if length == 0 {
        return Err(DataError::Invalid("sequence length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = spec.trajectory(length, size, &mut rng);
    let s = size as f64;
    let half = spec.object_size / 2.0 + 1.0;
    let distractors: Vec<(f64, f64)> = (0..spec.distractors)
        .map(|_| (rng.gen_range(half..s - half), rng.gen_range(half..s - half)))
        .collect();
    let texture = Texture::new(spec.texture_seed, size);
    let (dir_x, dir_y) = (spec.depth_angle.cos(), spec.depth_angle.sin());
    let (far, near) = spec.background_depth;
    let mut frames = Vec::with_capacity(length);
    for &(cx, cy) in &centers {
        let mut rgb = Vec::with_capacity(size * size * 3);
        let mut depth = Vec::with_capacity(size * size);
        let mut gt = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64, y as f64);
                let on_object = spec.shape.contains(fx, fy, cx, cy, spec.object_size);
                let on_distractor = distractors
                    .iter()
                    .any(|&(dx, dy)| spec.shape.contains(fx, fy, dx, dy, spec.object_size));
                // Ramp position in [0, 1] along the depth direction.
                let ramp = ((fx / s - 0.5) * dir_x + (fy / s - 0.5) * dir_y) / std::f64::consts::SQRT_2 + 0.5;
                let bg_depth = far + (near - far) * ramp;
                let color = if on_object || on_distractor {
                    spec.object_color
                } else {
                    texture.at(x, y, size)
                };
                for c in color {
                    rgb.push(to_byte(c * spec.illumination));
                }
                depth.push(to_byte(if on_object { spec.object_depth } else { bg_depth }));
                gt.push(if on_object { 255 } else { 0 });
            }
        }
        frames.push(Frame {
            rgb: Image::new(size, size, 3, rgb)?,
            depth: Image::new(size, size, 1, depth)?,
            gt: Image::new(size, size, 1, gt)?,
        });
    }
    Ok(Sequence { frames, centers })
}

/// Frame file name, `NNNN.ext`.
pub fn frame_name(index: usize, ext: &str) -> String {
    format!("{index:04}.{ext}")
}

/// Renders a sequence and writes `rgb/NNNN.ppm`, `depth/NNNN.pgm` and
/// `gt/NNNN.pgm` under `dir`.
pub fn generate_sequence(spec: &SceneSpec, length: usize, size: usize, seed: u64, dir: &Path) -> Result<Sequence> {
    let seq = render_sequence(spec, length, size, seed)?;
    for (i, frame) in seq.frames.iter().enumerate() {
        frame.rgb.write(&dir.join("rgb").join(frame_name(i, "ppm")))?;
        frame.depth.write(&dir.join("depth").join(frame_name(i, "pgm")))?;
        frame.gt.write(&dir.join("gt").join(frame_name(i, "pgm")))?;
    }
    Ok(seq)
}

/// One `sequence length seed` manifest line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sequence: String,
    pub length: usize,
    pub seed: u64,
}

pub const MANIFEST: &str = "manifest.txt";

pub fn write_manifest(dir: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let text: String = entries
        .iter()
        .map(|e| format!("{} {} {}\n", e.sequence, e.length, e.seed))
        .collect();
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| DataError::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || DataError::format(&path, format!("line {}: expected `sequence length seed`", i + 1));
            let mut parts = line.split_whitespace();
            let (Some(seq), Some(len), Some(seed), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                return Err(bad());
            };
            Ok(ManifestEntry {
                sequence: seq.to_string(),
                length: len.parse().map_err(|_| bad())?,
                seed: seed.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Sizes of a generated train/validation suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteSpec {
    pub train: usize,
    pub val: usize,
    pub length: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            train: 40,
            val: 10,
            length: 8,
            size: 64,
            seed: 7,
        }
    }
}

/// Writes `root/train` and `root/val`, each holding one directory per
/// sequence and a manifest. Scenes are drawn from `seed`; every sequence
/// gets its own render seed.
pub fn generate_suite(root: &Path, suite: &SuiteSpec) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(suite.seed);
    for (split, count) in [("train", suite.train), ("val", suite.val)] {
        let dir = root.join(split);
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let spec = SceneSpec::random(&mut rng, suite.size);
            let seed: u64 = rng.gen();
            let name = format!("{split}{i:03}");
            generate_sequence(&spec, suite.length, suite.size, seed, &dir.join(&name))?;
            entries.push(ManifestEntry {
                sequence: name,
                length: suite.length,
                seed,
            });
        }
        write_manifest(&dir, &entries)?;
    }
    Ok(())
}

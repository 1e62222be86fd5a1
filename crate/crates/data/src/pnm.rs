//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{DataError, Result};

/// An 8-bit image with `channels` interleaved samples per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !matches!(channels, 1 | 3) || width == 0 || height == 0 || data.len() != width * height * channels {
            return Err(DataError::Invalid(format!(
                "{width}×{height}×{channels} image with {} samples",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    fn magic(&self) -> &'static [u8] {
        if self.channels == 3 {
            b"P6"
        } else {
            b"P5"
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() + 20);
        out.extend_from_slice(self.magic());
        out.extend_from_slice(format!("\n{} {}\n255\n", self.width, self.height).as_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    /// Parses a P5 or P6 file. `#` comments in the header are skipped.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |msg: &str| DataError::format(path, msg);
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err(err("not a binary PGM/PPM (expected P5 or P6)")),
        };
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in &mut fields {
            loop {
                match bytes.get(pos) {
                    Some(c) if c.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(_) => break,
                    None => return Err(err("truncated header")),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err("malformed header number"))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(err(&format!("unsupported maxval {maxval}")));
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(err("missing separator after header"));
        }
        let body = &bytes[pos + 1..];
        let need = width * height * channels;
        if width == 0 || height == 0 || body.len() < need {
            return Err(err(&format!("expected {need} samples, found {}", body.len())));
        }
        Self::new(width, height, channels, body[..need].to_vec())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| DataError::io(path, e))
    }

    /// Reads a file and checks it has the expected channel count.
    pub fn read_channels(path: &Path, channels: usize) -> Result<Self> {
        let img = Self::read(path)?;
        if img.channels != channels {
            return Err(DataError::format(
                path,
                format!("expected {channels} channel(s), found {}", img.channels),
            ));
        }
        Ok(img)
    }
}

/// Quantizes a value in `[0, 1]` to a byte.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

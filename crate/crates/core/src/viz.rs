//! Grayscale PGM rendering of per-frame maps. A sequence of frames shares
//! one min-max intensity scale so frames stay comparable; the scale lands in
//! a sidecar text file next to the images.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::tensor::Tensor5D;
use crate::{Error, Result};

/// Writes one binary PGM (P5, 8-bit) image.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// One grayscale video with a shared intensity scale.
#[derive(Clone, Debug)]
pub struct FrameSequence {
    pub stem: String,
    pub height: usize,
    pub width: usize,
    /// Row-major h×w values, one entry per frame.
    pub frames: Vec<Vec<f64>>,
}

impl FrameSequence {
    /// Per-frame mean over all channels of a single-sequence map tensor.
    pub fn from_channel_mean(stem: &str, map: &Tensor5D<f64>) -> Result<Self> {
        let s = map.shape();
        if s.n != 1 {
            return Err(Error::InvalidArgument(format!(
                "expected a single sequence, got batch {}",
                s.n
            )));
        }
        let plane = s.h * s.w;
        let mut frames = vec![vec![0.0f64; plane]; s.t];
        for c in 0..s.c {
            let chan = map.channel(0, c);
            for t in 0..s.t {
                for i in 0..plane {
                    frames[t][i] += chan[t * plane + i] / s.c as f64;
                }
            }
        }
        Ok(FrameSequence { stem: stem.to_string(), height: s.h, width: s.w, frames })
    }

    /// Like [`FrameSequence::from_channel_mean`] but over absolute values,
    /// for signed maps such as displacements.
    pub fn from_channel_mean_abs(stem: &str, map: &Tensor5D<f64>) -> Result<Self> {
        let rectified = Tensor5D::from_vec_allow_non_finite(
            map.shape(),
            map.iter_f64().map(f64::abs).collect(),
        )?;
        Self::from_channel_mean(stem, &rectified)
    }

    /// Hard 0/1 frames from a probability map.
    pub fn from_threshold(stem: &str, probs: &Tensor5D<f64>, threshold: f64) -> Result<Self> {
        let masked = Tensor5D::from_vec_allow_non_finite(
            probs.shape(),
            probs
                .iter_f64()
                .map(|p| if p > threshold { 1.0 } else { 0.0 })
                .collect(),
        )?;
        Self::from_channel_mean(stem, &masked)
    }

    /// Global min/max over every frame.
    pub fn value_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for frame in &self.frames {
            for &v in frame {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        (lo, hi)
    }

    /// Writes `<stem>_f<idx>.pgm` per frame plus `<stem>_scale.txt`, and
    /// returns the image paths. Black maps to the sequence minimum, white
    /// to its maximum; a constant sequence renders black.
    pub fn save_pgm_series(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        if self.frames.is_empty() {
            return Err(Error::InvalidArgument("no frames to render".into()));
        }
        std::fs::create_dir_all(dir)?;
        let (lo, hi) = self.value_range();
        let span = hi - lo;
        let mut paths = Vec::with_capacity(self.frames.len());
        for (t, frame) in self.frames.iter().enumerate() {
            let bytes: Vec<u8> = frame
                .iter()
                .map(|&v| {
                    if span > 0.0 {
                        ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
                    } else {
                        0
                    }
                })
                .collect();
            let path = dir.join(format!("{}_f{t:03}.pgm", self.stem));
            write_pgm(&path, self.width, self.height, &bytes)?;
            paths.push(path);
        }
        let scale = format!(
            "frames {}\nwidth {}\nheight {}\nblack {lo}\nwhite {hi}\n",
            self.frames.len(),
            self.width,
            self.height,
        );
        std::fs::write(dir.join(format!("{}_scale.txt", self.stem)), scale)?;
        Ok(paths)
    }
}

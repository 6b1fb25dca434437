use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facegeom::CANONICAL_SIZE;
use crate::fatm::FACE_SIZE;
use crate::image::{Image, CHANNELS};
use crate::rng::{self, Rng};

/// Augmentation magnitudes. Symmetric ranges are given by their half-width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rotation_deg: f64,
    pub scale: (f64, f64),
    pub mirror_probability: f64,
    /// Largest crop offset from center, in pixels.
    pub crop_jitter: usize,
    pub brightness: f64,
    pub contrast: (f64, f64),
    /// Per-channel gain range.
    pub channel_gain: (f64, f64),
    /// Unsharp-mask amount half-width.
    pub sharpness: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_deg: 10.0,
            scale: (0.95, 1.05),
            mirror_probability: 0.5,
            crop_jitter: (CANONICAL_SIZE - FACE_SIZE) / 2,
            brightness: 0.2,
            contrast: (0.8, 1.25),
            channel_gain: (0.9, 1.1),
            sharpness: 0.3,
        }
    }
}

impl AugmentConfig {
    /// Center crop only.
    pub fn none() -> Self {
        AugmentConfig {
            rotation_deg: 0.0,
            scale: (1.0, 1.0),
            mirror_probability: 0.0,
            crop_jitter: 0,
            brightness: 0.0,
            contrast: (1.0, 1.0),
            channel_gain: (1.0, 1.0),
            sharpness: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let half = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("augment.{name} must be a non-negative half-width, got {v}")))
            }
        };
        let range = |name: &str, (lo, hi): (f64, f64)| {
            if lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("augment.{name} must be a positive interval, got [{lo}, {hi}]")))
            }
        };
        half("rotation_deg", self.rotation_deg)?;
        half("brightness", self.brightness)?;
        half("sharpness", self.sharpness)?;
        range("scale", self.scale)?;
        range("contrast", self.contrast)?;
        range("channel_gain", self.channel_gain)?;
        if !(0.0..=1.0).contains(&self.mirror_probability) {
            return Err(Error::InvalidConfig(format!(
                "augment.mirror_probability {} outside [0, 1]",
                self.mirror_probability
            )));
        }
        if self.crop_jitter > (CANONICAL_SIZE - FACE_SIZE) / 2 {
            return Err(Error::InvalidConfig(format!("augment.crop_jitter {} exceeds the margin", self.crop_jitter)));
        }
        Ok(())
    }
}

struct Draw {
    rotation: f64,
    scale: f64,
    mirror: bool,
    offset: [usize; 2],
    brightness: f64,
    contrast: f64,
    gain: [f64; 3],
    sharpness: f64,
}

fn draw(cfg: &AugmentConfig, r: &mut Rng) -> Draw {
    let margin = (CANONICAL_SIZE - FACE_SIZE) / 2;
    let mut offset = || {
        let j = cfg.crop_jitter as f64;
        margin - cfg.crop_jitter + rng::uniform(r, 0.0, 2.0 * j + 1.0).floor().min(2.0 * j) as usize
    };
    let offset = [offset(), offset()];
    let sym = |r: &mut Rng, h: f64| rng::uniform(r, -h, h);
    Draw {
        rotation: sym(r, cfg.rotation_deg),
        scale: rng::uniform(r, cfg.scale.0, cfg.scale.1),
        mirror: rng::uniform(r, 0.0, 1.0) < cfg.mirror_probability,
        offset,
        brightness: sym(r, cfg.brightness),
        contrast: rng::uniform(r, cfg.contrast.0, cfg.contrast.1),
        gain: std::array::from_fn(|_| rng::uniform(r, cfg.channel_gain.0, cfg.channel_gain.1)),
        sharpness: sym(r, cfg.sharpness),
    }
}

fn box_blur3(data: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for dy in [-1isize, 0, 1] {
                    for dx in [-1isize, 0, 1] {
                        let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        acc += data[(sy * w + sx) * CHANNELS + c];
                    }
                }
                out[(y * w + x) * CHANNELS + c] = acc / 9.0;
            }
        }
    }
    out
}

/// Random rotation, scale, mirror and 64x64 crop of an 80x80 face, then
/// brightness, contrast, per-channel gain and sharpness jitter. The result is
/// clamped to `[0, 1]`.
pub fn augment(face: &Image, cfg: &AugmentConfig, r: &mut Rng) -> Image {
    let d = draw(cfg, r);
    let c = (face.width() as f64 - 1.0) / 2.0;
    let cy = (face.height() as f64 - 1.0) / 2.0;
    let (sin, cos) = d.rotation.to_radians().sin_cos();
    let last = face.width() as f64 - 1.0;
    let identity_geometry = d.rotation == 0.0 && d.scale == 1.0;
    let img = Image::from_fn(FACE_SIZE, FACE_SIZE, |x, y| {
        let mut px = (x + d.offset[0]) as f64;
        let py = (y + d.offset[1]) as f64;
        if d.mirror {
            px = last - px;
        }
        if identity_geometry {
            return face.sample_bilinear(px, py);
        }
        let (qx, qy) = ((px - c) / d.scale, (py - cy) / d.scale);
        // Inverse of the counter-clockwise rotation.
        face.sample_bilinear(c + cos * qx - sin * qy, cy + sin * qx + cos * qy)
    });

    jitter_color(img, &d)
}

fn jitter_color(img: Image, d: &Draw) -> Image {
    if d.brightness == 0.0 && d.contrast == 1.0 && d.gain == [1.0; 3] && d.sharpness == 0.0 {
        return img;
    }
    let (w, h) = img.dims();
    let mut v: Vec<f64> = img.data().iter().map(|&p| p as f64 + d.brightness).collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    for (i, p) in v.iter_mut().enumerate() {
        *p = (mean + d.contrast * (*p - mean)) * d.gain[i % CHANNELS];
    }
    if d.sharpness != 0.0 {
        let blur = box_blur3(&v, w, h);
        v.iter_mut().zip(blur).for_each(|(p, b)| *p += d.sharpness * (*p - b));
    }
    let data = v.into_iter().map(|p| p.clamp(0.0, 1.0) as f32).collect();
    Image::from_raw(w, h, data).expect("same dimensions")
}

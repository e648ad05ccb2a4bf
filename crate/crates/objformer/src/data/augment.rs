//! Geometric augmentation and registration-error simulation. One transform
//! is drawn per call and applied identically to every raster, label image,
//! and guiding map of the pair; rotations are multiples of 90 degrees so no
//! label is ever interpolated.

use std::collections::BTreeMap;

use super::{LabelImage, Raster, SamplePair};
use crate::error::{Error, Result};
use crate::segmentation::RegionMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    /// Square random-crop size; `None` keeps the full extent.
    pub crop: Option<usize>,
    pub flips: bool,
    pub rot90: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { crop: None, flips: true, rot90: true }
    }
}

/// The sampled transform: crop window, then flips, then quarter turns.
#[derive(Debug, Clone, Copy)]
struct Geom {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    flip_h: bool,
    flip_v: bool,
    quarter_turns: u8,
}

impl Geom {
    fn out_dims(&self) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (self.h, self.w)
        } else {
            (self.w, self.h)
        }
    }

    /// Source pixel (within the crop window) of output position (x, y).
    fn source(&self, x: usize, y: usize) -> (usize, usize) {
        let (ow, oh) = self.out_dims();
        // invert the rotation first, then the flips
        let (mut cx, mut cy) = match self.quarter_turns % 4 {
            0 => (x, y),
            1 => (y, oh - 1 - x),          // 90 degrees counterclockwise inverse
            2 => (ow - 1 - x, oh - 1 - y), // 180
            _ => (ow - 1 - y, x),          // 270
        };
        if self.flip_h {
            cx = self.w - 1 - cx;
        }
        if self.flip_v {
            cy = self.h - 1 - cy;
        }
        (self.x0 + cx, self.y0 + cy)
    }

    fn apply_plane<T: Copy>(&self, src: &[T], src_w: usize, channels: usize) -> Vec<T> {
        let (ow, oh) = self.out_dims();
        let mut out = Vec::with_capacity(ow * oh * channels);
        for y in 0..oh {
            for x in 0..ow {
                let (sx, sy) = self.source(x, y);
                let base = (sy * src_w + sx) * channels;
                out.extend_from_slice(&src[base..base + channels]);
            }
        }
        out
    }
}

fn transform_sample(sample: &SamplePair, g: &Geom) -> Result<SamplePair> {
    let (ow, oh) = g.out_dims();
    let sw = sample.width();
    let raster = |r: &Raster| Raster::new(ow, oh, g.apply_plane(r.data(), sw, 3));
    let label = |l: &LabelImage| LabelImage::new(ow, oh, g.apply_plane(l.data(), sw, 1));
    let region = |m: &RegionMap| RegionMap::from_raw(&g.apply_plane(m.labels(), sw, 1), ow, oh);

    let mut object_maps = BTreeMap::new();
    for (&scale, m) in &sample.object_maps {
        object_maps.insert(scale, region(m)?);
    }
    let out = SamplePair {
        id: sample.id.clone(),
        x_osm: raster(&sample.x_osm)?,
        x_opt: raster(&sample.x_opt)?,
        y_osm: label(&sample.y_osm)?,
        y_bcd: label(&sample.y_bcd)?,
        y_opt_partial: label(&sample.y_opt_partial)?,
        y_opt_full: sample.y_opt_full.as_ref().map(&label).transpose()?,
        object_maps,
        instance_map: sample.instance_map.as_ref().map(&region).transpose()?,
    };
    out.validate()?;
    Ok(out)
}

/// Random crop / flips / quarter turns, all drawn from `rng`.
pub fn augment(sample: &SamplePair, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<SamplePair> {
    let (w, h) = (sample.width(), sample.height());
    let (cw, ch) = match cfg.crop {
        Some(c) => {
            if c > w || c > h || c == 0 {
                return Err(Error::Config(format!("crop {c} larger than sample {w}x{h}")));
            }
            (c, c)
        }
        None => (w, h),
    };
    let g = Geom {
        x0: if cw < w { rng.gen_range(0..=w - cw) } else { 0 },
        y0: if ch < h { rng.gen_range(0..=h - ch) } else { 0 },
        w: cw,
        h: ch,
        flip_h: cfg.flips && rng.gen_bool(0.5),
        flip_v: cfg.flips && rng.gen_bool(0.5),
        quarter_turns: if cfg.rot90 { rng.gen_range(0..4) } else { 0 },
    };
    transform_sample(sample, &g)
}

/// Seed-addressed wrapper around [`augment`].
pub fn augment_seeded(sample: &SamplePair, cfg: &AugmentConfig, seed: u64) -> Result<SamplePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    augment(sample, cfg, &mut rng)
}

/// Deterministic crop at a given window, no flips or rotation.
pub fn crop(sample: &SamplePair, x0: usize, y0: usize, size: usize) -> Result<SamplePair> {
    if x0 + size > sample.width() || y0 + size > sample.height() || size == 0 {
        return Err(Error::Config(format!(
            "crop window {size} at ({x0},{y0}) outside sample {}x{}",
            sample.width(),
            sample.height()
        )));
    }
    let g = Geom { x0, y0, w: size, h: size, flip_h: false, flip_v: false, quarter_turns: 0 };
    transform_sample(sample, &g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftDirection {
    Horizontal,
    Vertical,
    Diag45,
}

impl ShiftDirection {
    pub const ALL: [ShiftDirection; 3] =
        [ShiftDirection::Horizontal, ShiftDirection::Vertical, ShiftDirection::Diag45];

    pub fn name(self) -> &'static str {
        match self {
            ShiftDirection::Horizontal => "horizontal",
            ShiftDirection::Vertical => "vertical",
            ShiftDirection::Diag45 => "diag45",
        }
    }

    fn deltas(self, offset: usize) -> (usize, usize) {
        match self {
            ShiftDirection::Horizontal => (offset, 0),
            ShiftDirection::Vertical => (0, offset),
            ShiftDirection::Diag45 => (offset, offset),
        }
    }
}

/// Simulate a registration error: translate the optical raster (and its
/// object maps, which are tied to it) by `offset_px` with edge replication.
/// Labels and the instance map stay untouched.
pub fn apply_registration_offset(
    sample: &SamplePair,
    offset_px: usize,
    direction: ShiftDirection,
) -> Result<SamplePair> {
    let (w, h) = (sample.width(), sample.height());
    if offset_px >= w.min(h) {
        return Err(Error::Config(format!(
            "offset {offset_px} exceeds sample extent {w}x{h}"
        )));
    }
    if offset_px == 0 {
        return Ok(sample.clone());
    }
    let (dx, dy) = direction.deltas(offset_px);
    let shift_plane = |src: &[u8], channels: usize| -> Vec<u8> {
        let mut out = Vec::with_capacity(src.len());
        for y in 0..h {
            let sy = y.saturating_sub(dy);
            for x in 0..w {
                let sx = x.saturating_sub(dx);
                let base = (sy * w + sx) * channels;
                out.extend_from_slice(&src[base..base + channels]);
            }
        }
        out
    };
    let mut object_maps = BTreeMap::new();
    for (&scale, m) in &sample.object_maps {
        let mut shifted = Vec::with_capacity(m.labels().len());
        for y in 0..h {
            let sy = y.saturating_sub(dy);
            for x in 0..w {
                shifted.push(m.labels()[sy * w + x.saturating_sub(dx)]);
            }
        }
        object_maps.insert(scale, RegionMap::from_raw(&shifted, w, h)?);
    }
    let mut out = sample.clone();
    out.x_opt = Raster::new(w, h, shift_plane(sample.x_opt.data(), 3))?;
    out.object_maps = object_maps;
    Ok(out)
}

//! Synthetic paired samples: a planar layout of labeled shapes rendered as
//! flat palette colors on the map side and as class-conditioned noisy
//! texture on the optical side.
//!
//! Two optical classes (building and developed) share nearly identical base
//! colors, so color alone cannot separate them; knowing what a changed area
//! is *not* carries real signal, as it does in the real task.

use super::{generate_change_labels, generate_partial_labels, CategoryPalette, LabelImage, Raster, SamplePair};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-class optical base colors (index = class id, 0 unused).
pub const OPTICAL_BASE_COLORS: [[u8; 3]; 8] = [
    [0, 0, 0],
    [150, 132, 108], // bareland
    [156, 150, 88],  // cropland
    [66, 105, 58],   // vegetation
    [52, 76, 112],   // water
    [104, 104, 108], // road
    [128, 116, 110], // building
    [124, 114, 112], // developed: nearly the same appearance as building
];

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SynthParams {
    pub n_shapes: usize,
    /// Fraction of shapes (including the base canvas) whose class changes
    /// between the map layout and the optical layout.
    pub change_rate: f64,
    /// Standard deviation of the per-pixel optical noise, in 8-bit units.
    pub texture_strength: f64,
    /// Approximate fraction of the canvas marked as unedited basemap.
    pub background_fraction: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_shapes: 14,
            change_rate: 0.3,
            texture_strength: 8.0,
            background_fraction: 0.1,
        }
    }
}

#[derive(Clone, Copy)]
enum ShapeKind {
    Rect { x0: i64, y0: i64, x1: i64, y1: i64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Road { x0: f64, y0: f64, x1: f64, y1: f64, half_width: f64 },
}

#[derive(Clone, Copy)]
struct Shape {
    kind: ShapeKind,
    class: u8,
}

impl Shape {
    fn covers(&self, x: usize, y: usize) -> bool {
        let (xf, yf) = (x as f64, y as f64);
        match self.kind {
            ShapeKind::Rect { x0, y0, x1, y1 } => {
                (x as i64) >= x0 && (x as i64) <= x1 && (y as i64) >= y0 && (y as i64) <= y1
            }
            ShapeKind::Ellipse { cx, cy, rx, ry } => {
                let dx = (xf - cx) / rx;
                let dy = (yf - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
            ShapeKind::Road { x0, y0, x1, y1, half_width } => {
                let (vx, vy) = (x1 - x0, y1 - y0);
                let len2 = vx * vx + vy * vy;
                let t = if len2 == 0.0 {
                    0.0
                } else {
                    (((xf - x0) * vx + (yf - y0) * vy) / len2).clamp(0.0, 1.0)
                };
                let (px, py) = (x0 + t * vx, y0 + t * vy);
                let (dx, dy) = (xf - px, yf - py);
                (dx * dx + dy * dy).sqrt() <= half_width
            }
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, w: usize, h: usize, n_fg: u8) -> Shape {
    let class = rng.gen_range(1..=n_fg);
    // structures stay resolvable at the 1/4-resolution prediction head
    let kind = match rng.gen_range(0..3) {
        0 => {
            let x0 = rng.gen_range(0..w) as i64;
            let y0 = rng.gen_range(0..h) as i64;
            let x1 = x0 + rng.gen_range(w as i64 / 6..=w as i64 / 2);
            let y1 = y0 + rng.gen_range(h as i64 / 6..=h as i64 / 2);
            ShapeKind::Rect { x0, y0, x1, y1 }
        }
        1 => ShapeKind::Ellipse {
            cx: rng.gen_range(0.0..w as f64),
            cy: rng.gen_range(0.0..h as f64),
            rx: rng.gen_range(w as f64 / 8.0..w as f64 / 3.0),
            ry: rng.gen_range(h as f64 / 8.0..h as f64 / 3.0),
        },
        _ => {
            // a road crossing the whole canvas
            let vertical = rng.gen_bool(0.5);
            let (x0, y0, x1, y1) = if vertical {
                (rng.gen_range(0.0..w as f64), 0.0, rng.gen_range(0.0..w as f64), h as f64 - 1.0)
            } else {
                (0.0, rng.gen_range(0.0..h as f64), w as f64 - 1.0, rng.gen_range(0.0..h as f64))
            };
            ShapeKind::Road {
                x0,
                y0,
                x1,
                y1,
                half_width: rng.gen_range(2.0..(w.min(h) as f64 / 12.0).max(3.0)),
            }
        }
    };
    Shape { kind, class }
}

fn rasterize(shapes: &[Shape], w: usize, h: usize) -> (LabelImage, Vec<u16>) {
    let mut labels = vec![0u8; w * h];
    let mut owner = vec![0u16; w * h];
    for (idx, s) in shapes.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                if s.covers(x, y) {
                    labels[y * w + x] = s.class;
                    owner[y * w + x] = idx as u16;
                }
            }
        }
    }
    (LabelImage { width: w, height: h, data: labels }, owner)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Deterministic synthetic sample with the default background fraction.
pub fn synth_generate(
    seed: u64,
    height: usize,
    width: usize,
    n_shapes: usize,
    change_rate: f64,
    texture_strength: f64,
) -> Result<SamplePair> {
    synth_generate_with(
        seed,
        height,
        width,
        SynthParams { n_shapes, change_rate, texture_strength, ..SynthParams::default() },
    )
}

pub fn synth_generate_with(
    seed: u64,
    height: usize,
    width: usize,
    params: SynthParams,
) -> Result<SamplePair> {
    if width < 8 || height < 8 {
        return Err(Error::Config(format!("degenerate canvas {width}x{height}")));
    }
    if !(0.0..=1.0).contains(&params.change_rate) {
        return Err(Error::Config("change_rate must be in [0,1]".into()));
    }
    let palette = CategoryPalette::default();
    let n_fg = palette.n_foreground() as u8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // layout A: base canvas plus shapes, later shapes on top
    let canvas = Shape {
        kind: ShapeKind::Rect { x0: 0, y0: 0, x1: width as i64 - 1, y1: height as i64 - 1 },
        class: rng.gen_range(1..=n_fg),
    };
    let mut shapes_a = vec![canvas];
    for _ in 0..params.n_shapes {
        shapes_a.push(random_shape(&mut rng, width, height, n_fg));
    }

    // layout B: remap the class of a change_rate fraction of shapes
    let n_total = shapes_a.len();
    let n_changed = (params.change_rate * n_total as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..n_total).collect();
    for i in (1..n_total).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut shapes_b = shapes_a.clone();
    for &idx in order.iter().take(n_changed.min(n_total)) {
        let old = shapes_b[idx].class;
        let mut new = rng.gen_range(1..=n_fg - 1);
        if new >= old {
            new += 1;
        }
        shapes_b[idx].class = new;
    }

    let (mut y_osm, _) = rasterize(&shapes_a, width, height);
    let (y_opt_full, owner) = rasterize(&shapes_b, width, height);

    // unedited basemap region on the map side only
    if params.background_fraction > 0.0 {
        let area = params.background_fraction * (width * height) as f64;
        let bw = (area.sqrt() as usize).clamp(1, width);
        let bh = ((area / bw as f64) as usize).clamp(1, height);
        let bx = rng.gen_range(0..=width - bw);
        let by = rng.gen_range(0..=height - bh);
        for y in by..by + bh {
            for x in bx..bx + bw {
                y_osm.data_mut()[y * width + x] = 0;
            }
        }
    }

    let x_osm = palette.render(&y_osm);

    // optical rendering: per-class base, per-shape brightness, pixel noise
    let jitter: Vec<f64> = (0..n_total).map(|_| gaussian(&mut rng) * 6.0).collect();
    let mut opt = Vec::with_capacity(width * height * 3);
    for p in 0..width * height {
        let class = y_opt_full.data()[p] as usize;
        let base = OPTICAL_BASE_COLORS[class];
        let shape_shift = jitter[owner[p] as usize];
        for &ch in &base {
            let v = ch as f64 + shape_shift + gaussian(&mut rng) * params.texture_strength;
            opt.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    let x_opt = Raster::new(width, height, opt)?;

    let y_bcd = generate_change_labels(&y_osm, &y_opt_full)?;
    let y_opt_partial = generate_partial_labels(&y_osm, &y_bcd)?;
    let sample = SamplePair {
        id: format!("synth_{seed:08}"),
        x_osm,
        x_opt,
        y_osm,
        y_bcd,
        y_opt_partial,
        y_opt_full: Some(y_opt_full),
        object_maps: Default::default(),
        instance_map: None,
    };
    sample.validate()?;
    Ok(sample)
}

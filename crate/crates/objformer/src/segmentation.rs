//! Guiding maps: SLIC object maps for optical images, connected-component
//! instance maps for rasterized map data, and the nearest-neighbor label
//! resampling performed before every attention block.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Integer partition of a raster into regions: labels are contiguous in
/// `[0, n_regions)`, every label occurs at least once, and regions jointly
/// cover all pixels.
///
/// Produced by [`slic`] it acts as an object map; produced by
/// [`connected_components`] it acts as an instance map.
#[derive(Debug, Clone)]
pub struct RegionMap {
    width: usize,
    height: usize,
    n_regions: usize,
    labels: Arc<Vec<u32>>,
}

pub type ObjectMap = RegionMap;
pub type InstanceMap = RegionMap;

impl RegionMap {
    /// Validate the partition invariants: contiguous labels, all present.
    pub fn new(labels: Vec<u32>, width: usize, height: usize) -> Result<Self> {
        if labels.len() != width * height || labels.is_empty() {
            return Err(Error::shape(
                "RegionMap::new",
                format!("{} labels for {width}x{height} grid", labels.len()),
            ));
        }
        let n = (*labels.iter().max().unwrap() as usize) + 1;
        let mut seen = vec![false; n];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::Usage("region labels are not contiguous".into()));
        }
        Ok(RegionMap { width, height, n_regions: n, labels: Arc::new(labels) })
    }

    /// Build from arbitrary labels, relabeling contiguously in row-major
    /// first-occurrence order.
    pub fn from_raw(labels: &[u32], width: usize, height: usize) -> Result<Self> {
        if labels.len() != width * height || labels.is_empty() {
            return Err(Error::shape(
                "RegionMap::from_raw",
                format!("{} labels for {width}x{height} grid", labels.len()),
            ));
        }
        let (relabeled, n) = relabel_first_occurrence(labels);
        Ok(RegionMap { width, height, n_regions: n, labels: Arc::new(relabeled) })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn labels_arc(&self) -> Arc<Vec<u32>> {
        self.labels.clone()
    }

    /// Nearest-neighbor resample to `target_h` x `target_w` (each at most the
    /// source extent), then contiguous relabel. Regions may vanish at coarse
    /// scales; the count shrinks accordingly.
    pub fn downsample(&self, target_h: usize, target_w: usize) -> Result<RegionMap> {
        if target_h == 0 || target_w == 0 {
            return Err(Error::Config("downsample target dimension is zero".into()));
        }
        if target_h > self.height || target_w > self.width {
            return Err(Error::Config(format!(
                "downsample target {target_h}x{target_w} exceeds source {}x{}",
                self.height, self.width
            )));
        }
        let sy = self.height as f64 / target_h as f64;
        let sx = self.width as f64 / target_w as f64;
        let mut out = Vec::with_capacity(target_h * target_w);
        for y in 0..target_h {
            let src_y = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
            for x in 0..target_w {
                let src_x = (((x as f64 + 0.5) * sx) as usize).min(self.width - 1);
                out.push(self.labels[src_y * self.width + src_x]);
            }
        }
        RegionMap::from_raw(&out, target_w, target_h)
    }

    /// Pixel count per region.
    pub fn region_sizes(&self) -> Vec<u32> {
        let mut sizes = vec![0u32; self.n_regions];
        for &l in self.labels.iter() {
            sizes[l as usize] += 1;
        }
        sizes
    }
}

fn relabel_first_occurrence(labels: &[u32]) -> (Vec<u32>, usize) {
    let max = *labels.iter().max().unwrap() as usize;
    let mut remap = vec![u32::MAX; max + 1];
    let mut next = 0u32;
    let mut out = Vec::with_capacity(labels.len());
    for &l in labels {
        let slot = &mut remap[l as usize];
        if *slot == u32::MAX {
            *slot = next;
            next += 1;
        }
        out.push(*slot);
    }
    (out, next as usize)
}

// ── connected components ───────────────────────────────────────────────────

/// Label 4-connected regions of equal values; ids follow row-major
/// first-encounter order.
fn components_of<T: PartialEq + Copy>(values: &[T], width: usize, height: usize) -> (Vec<u32>, usize) {
    const UNSET: u32 = u32::MAX;
    let mut labels = vec![UNSET; values.len()];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..values.len() {
        if labels[start] != UNSET {
            continue;
        }
        let id = next;
        next += 1;
        labels[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / width, p % width);
            let v = values[p];
            let mut try_push = |q: usize| {
                if labels[q] == UNSET && values[q] == v {
                    labels[q] = id;
                    stack.push(q);
                }
            };
            if x > 0 {
                try_push(p - 1);
            }
            if x + 1 < width {
                try_push(p + 1);
            }
            if y > 0 {
                try_push(p - width);
            }
            if y + 1 < height {
                try_push(p + width);
            }
        }
    }
    (labels, next as usize)
}

/// Instance map of a label image: two pixels share an instance iff they are
/// joined by a 4-connected path of equal source labels.
pub fn connected_components(label_image: &[u8], width: usize, height: usize) -> Result<InstanceMap> {
    if label_image.len() != width * height || label_image.is_empty() {
        return Err(Error::shape(
            "connected_components",
            format!("{} labels for {width}x{height} grid", label_image.len()),
        ));
    }
    let (labels, n) = components_of(label_image, width, height);
    Ok(RegionMap { width, height, n_regions: n, labels: Arc::new(labels) })
}

// ── SLIC ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub(crate) struct Center {
    pub(crate) x: f64,
    pub(crate) y: f64,
    rgb: [f64; 3],
}

/// SLIC parameters. Distance is
/// `D^2 = d_color^2 + (d_xy / S)^2 * m^2` with `S = sqrt(H*W / n_segments)`,
/// colors in raw RGB scaled to `[0,1]`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SlicParams {
    pub compactness: f64,
    pub iters: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        SlicParams { compactness: 10.0, iters: 10 }
    }
}

/// Superpixel object map of an interleaved 8-bit RGB raster.
///
/// Centers start on a regular grid and the whole procedure is deterministic;
/// `seed` is accepted for interface stability but does not influence the
/// result. After connectivity enforcement the region count never exceeds
/// `2 * n_segments`.
pub fn slic(
    rgb: &[u8],
    width: usize,
    height: usize,
    n_segments: usize,
    params: SlicParams,
    seed: u64,
) -> Result<ObjectMap> {
    let _ = seed;
    if rgb.len() != width * height * 3 {
        return Err(Error::shape(
            "slic",
            format!("{} bytes for {width}x{height} rgb raster", rgb.len()),
        ));
    }
    if n_segments == 0 || params.iters == 0 {
        return Err(Error::Config("slic requires n_segments >= 1 and iters >= 1".into()));
    }
    if n_segments > width * height {
        return Err(Error::Config(format!(
            "n_segments {n_segments} exceeds pixel count {}",
            width * height
        )));
    }
    let (assign, _centers) = slic_assign(rgb, width, height, n_segments, params);
    let enforced = enforce_connectivity(&assign, width, height, n_segments);
    RegionMap::from_raw(&enforced, width, height)
}

/// Raw k-means phase: per-pixel center assignment after the final update.
/// Exposed within the crate so tests can check optimality exhaustively.
pub(crate) fn slic_assign(
    rgb: &[u8],
    width: usize,
    height: usize,
    n_segments: usize,
    params: SlicParams,
) -> (Vec<u32>, Vec<Center>) {
    let hw = (width * height) as f64;
    let spacing = (hw / n_segments as f64).sqrt();
    let grid_h = ((n_segments as f64 * height as f64 / width as f64).sqrt().round() as usize)
        .clamp(1, height);
    let grid_w = ((n_segments as f64 / grid_h as f64).round() as usize).clamp(1, width);
    let step_x = width as f64 / grid_w as f64;
    let step_y = height as f64 / grid_h as f64;

    let color = |p: usize| {
        [rgb[p * 3] as f64 / 255.0, rgb[p * 3 + 1] as f64 / 255.0, rgb[p * 3 + 2] as f64 / 255.0]
    };

    let mut centers = Vec::with_capacity(grid_w * grid_h);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let cx = (gx as f64 + 0.5) * step_x - 0.5;
            let cy = (gy as f64 + 0.5) * step_y - 0.5;
            let px = (cx.round().max(0.0) as usize).min(width - 1);
            let py = (cy.round().max(0.0) as usize).min(height - 1);
            centers.push(Center { x: cx, y: cy, rgb: color(py * width + px) });
        }
    }

    let m2 = params.compactness * params.compactness;
    let inv_s2 = 1.0 / (spacing * spacing);
    let win_x = (2.0 * spacing).max(step_x) + 1.0;
    let win_y = (2.0 * spacing).max(step_y) + 1.0;

    let mut labels = vec![0u32; width * height];
    let mut best = vec![f64::INFINITY; width * height];

    let assign_pass = |centers: &[Center], labels: &mut [u32], best: &mut [f64]| {
        best.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (ci, c) in centers.iter().enumerate() {
            let x0 = ((c.x - win_x).floor().max(0.0)) as usize;
            let x1 = (((c.x + win_x).ceil()) as usize).min(width - 1);
            let y0 = ((c.y - win_y).floor().max(0.0)) as usize;
            let y1 = (((c.y + win_y).ceil()) as usize).min(height - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = y * width + x;
                    let rgbp = color(p);
                    let dc2 = (rgbp[0] - c.rgb[0]).powi(2)
                        + (rgbp[1] - c.rgb[1]).powi(2)
                        + (rgbp[2] - c.rgb[2]).powi(2);
                    let dxy2 = (x as f64 - c.x).powi(2) + (y as f64 - c.y).powi(2);
                    let d = dc2 + dxy2 * inv_s2 * m2;
                    if d < best[p] {
                        best[p] = d;
                        labels[p] = ci as u32;
                    }
                }
            }
        }
    };

    for _ in 0..params.iters {
        assign_pass(&centers, &mut labels, &mut best);
        // recompute centers as the centroid of their pixels
        let mut acc = vec![(0.0f64, 0.0f64, [0.0f64; 3], 0usize); centers.len()];
        for (p, &l) in labels.iter().enumerate() {
            let a = &mut acc[l as usize];
            a.0 += (p % width) as f64;
            a.1 += (p / width) as f64;
            let c = color(p);
            a.2[0] += c[0];
            a.2[1] += c[1];
            a.2[2] += c[2];
            a.3 += 1;
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a.3 > 0 {
                let n = a.3 as f64;
                c.x = a.0 / n;
                c.y = a.1 / n;
                c.rgb = [a.2[0] / n, a.2[1] / n, a.2[2] / n];
            }
        }
    }
    assign_pass(&centers, &mut labels, &mut best);
    (labels, centers)
}

#[cfg(test)]
pub(crate) fn slic_distance2(
    rgb: &[u8],
    width: usize,
    p: usize,
    c: &Center,
    spacing: f64,
    compactness: f64,
) -> f64 {
    let rgbp =
        [rgb[p * 3] as f64 / 255.0, rgb[p * 3 + 1] as f64 / 255.0, rgb[p * 3 + 2] as f64 / 255.0];
    let dc2 = (rgbp[0] - c.rgb[0]).powi(2)
        + (rgbp[1] - c.rgb[1]).powi(2)
        + (rgbp[2] - c.rgb[2]).powi(2);
    let x = (p % width) as f64;
    let y = (p / width) as f64;
    let dxy2 = (x - c.x).powi(2) + (y - c.y).powi(2);
    dc2 + dxy2 / (spacing * spacing) * compactness * compactness
}

/// Merge orphan fragments into their dominant neighbor. A fragment survives
/// if it is the largest piece of its cluster or at least `S^2 / 4` pixels;
/// if more than `2 * n_segments` survive, the smallest extras are demoted
/// until the bound holds.
fn enforce_connectivity(
    assign: &[u32],
    width: usize,
    height: usize,
    n_segments: usize,
) -> Vec<u32> {
    let (comp, n_comp) = components_of(assign, width, height);
    let mut sizes = vec![0u32; n_comp];
    let mut cluster_of = vec![0u32; n_comp];
    for (p, &c) in comp.iter().enumerate() {
        sizes[c as usize] += 1;
        cluster_of[c as usize] = assign[p];
    }
    let n_clusters = assign.iter().map(|&a| a as usize).max().unwrap() + 1;
    let mut main_comp = vec![u32::MAX; n_clusters];
    for c in 0..n_comp {
        let cl = cluster_of[c] as usize;
        if main_comp[cl] == u32::MAX || sizes[c] > sizes[main_comp[cl] as usize] {
            main_comp[cl] = c as u32;
        }
    }
    let min_size = ((width * height) as f64 / (4.0 * n_segments as f64)).ceil() as u32;
    let mut keep: Vec<bool> = (0..n_comp)
        .map(|c| main_comp[cluster_of[c] as usize] == c as u32 || sizes[c] >= min_size)
        .collect();

    let kept: Vec<usize> = (0..n_comp).filter(|&c| keep[c]).collect();
    if kept.len() > 2 * n_segments {
        let mut extras: Vec<usize> = kept
            .iter()
            .copied()
            .filter(|&c| main_comp[cluster_of[c] as usize] != c as u32)
            .collect();
        extras.sort_by_key(|&c| (sizes[c], c));
        let excess = kept.len() - 2 * n_segments;
        for &c in extras.iter().take(excess) {
            keep[c] = false;
        }
    }

    // assign new ids to kept fragments in first-encounter order
    let mut new_id = vec![u32::MAX; n_comp];
    let mut next = 0u32;
    for &c in comp.iter() {
        if keep[c as usize] && new_id[c as usize] == u32::MAX {
            new_id[c as usize] = next;
            next += 1;
        }
    }

    let mut out: Vec<u32> = comp
        .iter()
        .map(|&c| if keep[c as usize] { new_id[c as usize] } else { u32::MAX })
        .collect();

    // absorb demoted fragments into the neighboring region they touch most;
    // repeat until everything is assigned (the grid is connected, so this
    // terminates)
    loop {
        let mut changed = false;
        let mut any_unset = false;
        let mut votes: std::collections::HashMap<(u32, u32), u32> = std::collections::HashMap::new();
        for p in 0..out.len() {
            if out[p] != u32::MAX {
                continue;
            }
            any_unset = true;
            let frag = comp[p];
            let (y, x) = (p / width, p % width);
            let mut cast = |q: usize| {
                if out[q] != u32::MAX {
                    *votes.entry((frag, out[q])).or_insert(0) += 1;
                }
            };
            if x > 0 {
                cast(p - 1);
            }
            if x + 1 < width {
                cast(p + 1);
            }
            if y > 0 {
                cast(p - width);
            }
            if y + 1 < height {
                cast(p + width);
            }
        }
        if !any_unset {
            break;
        }
        let mut target = vec![(0u32, u32::MAX); n_comp];
        for (&(frag, neigh), &count) in votes.iter() {
            let t = &mut target[frag as usize];
            if count > t.0 || (count == t.0 && neigh < t.1) {
                *t = (count, neigh);
            }
        }
        for p in 0..out.len() {
            if out[p] == u32::MAX {
                let t = target[comp[p] as usize];
                if t.1 != u32::MAX {
                    out[p] = t.1;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    out
}

/// One object map per requested scale; scales are `n_segments` values.
pub fn multiscale_objects(
    rgb: &[u8],
    width: usize,
    height: usize,
    scales: &[usize],
    params: SlicParams,
    seed: u64,
) -> Result<Vec<ObjectMap>> {
    if scales.is_empty() {
        return Err(Error::Config("multiscale_objects requires at least one scale".into()));
    }
    scales.iter().map(|&n| slic(rgb, width, height, n, params, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn check_partition(map: &RegionMap) {
        // Every label in range occurs; labels cover all pixels by construction.
        let sizes = map.region_sizes();
        assert!(sizes.iter().all(|&s| s > 0), "empty region in partition");
        assert!(map.labels().iter().all(|&l| (l as usize) < map.n_regions()));
    }

    #[test]
    fn constant_image_gives_equal_grid_blocks() {
        let rgb = vec![120u8; 64 * 64 * 3];
        let map = slic(&rgb, 64, 64, 16, SlicParams::default(), 0).unwrap();
        assert_eq!(map.n_regions(), 16);
        for y in 0..64 {
            for x in 0..64 {
                let want = (y / 16) * 4 + x / 16;
                assert_eq!(map.labels()[y * 64 + x], want as u32, "at ({x},{y})");
            }
        }
    }

    #[test]
    fn single_segment_covers_image() {
        let rgb: Vec<u8> = (0..32 * 32 * 3).map(|i| (i % 251) as u8).collect();
        let map = slic(&rgb, 32, 32, 1, SlicParams::default(), 0).unwrap();
        assert_eq!(map.n_regions(), 1);
    }

    #[test]
    fn slic_rejects_too_many_segments() {
        let rgb = vec![0u8; 4 * 4 * 3];
        assert!(slic(&rgb, 4, 4, 17, SlicParams::default(), 0).is_err());
    }

    #[test]
    fn slic_partition_invariants_random_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let (w, h) = (rng.gen_range(8..40), rng.gen_range(8..40));
            let rgb: Vec<u8> = (0..w * h * 3).map(|_| rng.gen()).collect();
            let n = rng.gen_range(1..=(w * h / 4).max(1));
            let map = slic(&rgb, w, h, n, SlicParams::default(), 0).unwrap();
            check_partition(&map);
            assert!(map.n_regions() <= 2 * n, "{} regions for n_segments {n}", map.n_regions());
        }
    }

    #[test]
    fn slic_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let rgb: Vec<u8> = (0..24 * 24 * 3).map(|_| rng.gen()).collect();
        let a = slic(&rgb, 24, 24, 9, SlicParams::default(), 7).unwrap();
        let b = slic(&rgb, 24, 24, 9, SlicParams::default(), 7).unwrap();
        assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn slic_assignment_is_nearest_center_on_toy() {
        // On an 8x8 image the search windows cover everything, so after the
        // final assignment every pixel must hold the exhaustive argmin.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let rgb: Vec<u8> = (0..8 * 8 * 3).map(|_| rng.gen()).collect();
        let params = SlicParams::default();
        let n = 4;
        let (labels, centers) = slic_assign(&rgb, 8, 8, n, params);
        let spacing = (64.0 / n as f64).sqrt();
        for p in 0..64 {
            let assigned = slic_distance2(&rgb, 8, p, &centers[labels[p] as usize], spacing, params.compactness);
            for c in &centers {
                let d = slic_distance2(&rgb, 8, p, c, spacing, params.compactness);
                assert!(assigned <= d + 1e-12, "pixel {p} not assigned to nearest center");
            }
        }
    }

    #[test]
    fn components_simple_cases() {
        // [[1,1,2],[1,2,2]] has two instances
        let img = [1u8, 1, 2, 1, 2, 2];
        let m = connected_components(&img, 3, 2).unwrap();
        assert_eq!(m.n_regions(), 2);

        // checkerboard: every pixel its own instance under 4-connectivity
        let mut img = vec![0u8; 16];
        for y in 0..4 {
            for x in 0..4 {
                img[y * 4 + x] = ((x + y) % 2) as u8;
            }
        }
        let m = connected_components(&img, 4, 4).unwrap();
        assert_eq!(m.n_regions(), 16);
    }

    fn flood_fill_oracle(values: &[u8], width: usize, height: usize) -> Vec<u32> {
        const UNSET: u32 = u32::MAX;
        fn fill(
            values: &[u8],
            labels: &mut [u32],
            width: usize,
            height: usize,
            p: usize,
            id: u32,
        ) {
            labels[p] = id;
            let (y, x) = (p / width, p % width);
            let mut visit = |q: usize| {
                if labels[q] == u32::MAX && values[q] == values[p] {
                    fill(values, labels, width, height, q, id);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
        }
        let mut labels = vec![UNSET; values.len()];
        let mut next = 0;
        for p in 0..values.len() {
            if labels[p] == UNSET {
                fill(values, &mut labels, width, height, p, next);
                next += 1;
            }
        }
        labels
    }

    #[test]
    fn components_match_flood_fill_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(400);
        for _ in 0..200 {
            let img: Vec<u8> = (0..16 * 16).map(|_| rng.gen_range(0..4)).collect();
            let m = connected_components(&img, 16, 16).unwrap();
            let oracle = flood_fill_oracle(&img, 16, 16);
            assert_eq!(m.labels(), &oracle[..]);
        }
    }

    #[test]
    fn downsample_identity_and_blocks() {
        let labels = vec![0u32, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3];
        let map = RegionMap::new(labels.clone(), 4, 4).unwrap();
        let same = map.downsample(4, 4).unwrap();
        assert_eq!(same.labels(), &labels[..]);
        let half = map.downsample(2, 2).unwrap();
        assert_eq!(half.n_regions(), 4);
        assert_eq!(half.labels(), &[0, 1, 2, 3]);
    }

    #[test]
    fn downsample_rejects_zero_target() {
        let map = RegionMap::new(vec![0, 1, 1, 0], 2, 2).unwrap();
        assert!(map.downsample(0, 2).is_err());
    }

    #[test]
    fn downsample_label_subset_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let raw: Vec<u32> = (0..12 * 12).map(|_| rng.gen_range(0..9)).collect();
            let map = RegionMap::from_raw(&raw, 12, 12).unwrap();
            let th = rng.gen_range(1..=12);
            let tw = rng.gen_range(1..=12);
            let down = map.downsample(th, tw).unwrap();
            check_partition(&down);
            assert!(down.n_regions() <= map.n_regions());
        }
    }

    #[test]
    fn multiscale_counts_track_requested_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        let rgb: Vec<u8> = (0..48 * 48 * 3).map(|_| rng.gen()).collect();
        let maps =
            multiscale_objects(&rgb, 48, 48, &[4, 16, 64], SlicParams::default(), 0).unwrap();
        assert_eq!(maps.len(), 3);
        for m in &maps {
            check_partition(m);
        }
        assert!(maps[0].n_regions() <= maps[1].n_regions());
        assert!(maps[1].n_regions() <= maps[2].n_regions());
    }

    #[test]
    fn multiscale_duplicate_scales_identical() {
        let rgb: Vec<u8> = (0..20 * 20 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let maps = multiscale_objects(&rgb, 20, 20, &[5, 5], SlicParams::default(), 3).unwrap();
        assert_eq!(maps[0].labels(), maps[1].labels());
    }

    #[test]
    fn multiscale_single_segment() {
        let rgb = vec![9u8; 10 * 10 * 3];
        let maps = multiscale_objects(&rgb, 10, 10, &[1], SlicParams::default(), 0).unwrap();
        assert_eq!(maps.len(), 1);
        assert_eq!(maps[0].n_regions(), 1);
    }
}

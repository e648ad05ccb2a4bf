//! Datasets of paired map/optical samples: label construction, the on-disk
//! format, synthetic generation, augmentation, and registration-error
//! simulation.

mod augment;
pub mod pnm;
mod synth;

pub use augment::{apply_registration_offset, augment, augment_seeded, crop, AugmentConfig, ShiftDirection};
pub use synth::{synth_generate, synth_generate_with, OPTICAL_BASE_COLORS, SynthParams};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::BCD_BACKGROUND;
use crate::segmentation::{InstanceMap, ObjectMap, RegionMap};
use serde::{Deserialize, Serialize};

/// Interleaved 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(
                "Raster::new",
                format!("{} bytes for {width}x{height} rgb", data.len()),
            ));
        }
        Ok(Raster { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Raster { width, height, data }
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let p = (y * self.width + x) * 3;
        [self.data[p], self.data[p + 1], self.data[p + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let p = (y * self.width + x) * 3;
        self.data[p..p + 3].copy_from_slice(&rgb);
    }

    /// Channel-first floats in [0,1], the network input layout.
    pub fn to_chw_f32(&self) -> Vec<f32> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = self.data[p * 3 + c] as f32 / 255.0;
            }
        }
        out
    }
}

/// Single-channel 8-bit label image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    pub width: usize,
    pub height: usize,
    data: Vec<u8>,
}

impl LabelImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(
                "LabelImage::new",
                format!("{} labels for {width}x{height}", data.len()),
            ));
        }
        Ok(LabelImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, v: u8) -> Self {
        LabelImage { width, height, data: vec![v; width * height] }
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// Land-cover classes and their canonical colors in rasterized map data.
/// Class 0 is the unedited basemap.
#[derive(Debug, Clone)]
pub struct CategoryPalette {
    names: Vec<&'static str>,
    colors: Vec<[u8; 3]>,
}

impl Default for CategoryPalette {
    fn default() -> Self {
        CategoryPalette {
            names: vec![
                "background",
                "bareland",
                "cropland",
                "vegetation",
                "water",
                "road",
                "building",
                "developed",
            ],
            colors: vec![
                [255, 255, 255],
                [181, 156, 124],
                [238, 232, 150],
                [116, 188, 100],
                [96, 152, 218],
                [128, 128, 128],
                [212, 96, 82],
                [226, 160, 222],
            ],
        }
    }
}

impl CategoryPalette {
    pub fn n_classes(&self) -> usize {
        self.names.len()
    }

    /// Foreground land-cover classes, excluding the basemap.
    pub fn n_foreground(&self) -> usize {
        self.names.len() - 1
    }

    pub fn name(&self, class: u8) -> &'static str {
        self.names[class as usize]
    }

    pub fn color(&self, class: u8) -> [u8; 3] {
        self.colors[class as usize]
    }

    /// Inverse of [`Self::color`]; the mapping is bijective on defined classes.
    pub fn class_of_color(&self, rgb: [u8; 3]) -> Option<u8> {
        self.colors.iter().position(|&c| c == rgb).map(|i| i as u8)
    }

    /// Render a label image as flat palette colors.
    pub fn render(&self, labels: &LabelImage) -> Raster {
        let mut data = Vec::with_capacity(labels.data.len() * 3);
        for &l in labels.data() {
            data.extend_from_slice(&self.colors[l as usize]);
        }
        Raster { width: labels.width, height: labels.height, data }
    }
}

/// One training/evaluation unit.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub id: String,
    pub x_osm: Raster,
    pub x_opt: Raster,
    pub y_osm: LabelImage,
    pub y_bcd: LabelImage,
    /// Partial optical labels: map label on unchanged pixels, otherwise 0.
    pub y_opt_partial: LabelImage,
    /// Full optical ground truth; synthetic data only.
    pub y_opt_full: Option<LabelImage>,
    /// Object maps of the optical image, keyed by segmentation scale.
    pub object_maps: BTreeMap<u32, ObjectMap>,
    pub instance_map: Option<InstanceMap>,
}

impl SamplePair {
    pub fn width(&self) -> usize {
        self.x_osm.width
    }

    pub fn height(&self) -> usize {
        self.x_osm.height
    }

    /// Check every cross-field invariant of the pair.
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.width(), self.height());
        let dims_ok = self.x_opt.width == w
            && self.x_opt.height == h
            && [&self.y_osm, &self.y_bcd, &self.y_opt_partial]
                .iter()
                .all(|l| l.width == w && l.height == h)
            && self.y_opt_full.as_ref().map_or(true, |l| l.width == w && l.height == h);
        if !dims_ok {
            return Err(Error::Usage(format!("sample '{}': raster dims disagree", self.id)));
        }
        for p in 0..w * h {
            let osm = self.y_osm.data()[p];
            let bcd = self.y_bcd.data()[p];
            let partial = self.y_opt_partial.data()[p];
            if (osm == 0) != (bcd == BCD_BACKGROUND) {
                return Err(Error::Usage(format!(
                    "sample '{}': background mismatch between y_osm and y_bcd at pixel {p}",
                    self.id
                )));
            }
            if bcd != 0 && bcd != 1 && bcd != BCD_BACKGROUND {
                return Err(Error::Usage(format!("sample '{}': invalid change label", self.id)));
            }
            let want = if bcd == 0 { osm } else { 0 };
            if partial != want {
                return Err(Error::Usage(format!(
                    "sample '{}': partial label violates (1 - change) * map rule at pixel {p}",
                    self.id
                )));
            }
        }
        for (scale, m) in &self.object_maps {
            if m.width() != w || m.height() != h {
                return Err(Error::Usage(format!(
                    "sample '{}': object map at scale {scale} has wrong dims",
                    self.id
                )));
            }
        }
        if let Some(m) = &self.instance_map {
            if m.width() != w || m.height() != h {
                return Err(Error::Usage(format!("sample '{}': instance map dims", self.id)));
            }
        }
        Ok(())
    }
}

// ── label construction ─────────────────────────────────────────────────────

/// Change labels from a map/optical label pair: background where the map is
/// unedited, otherwise changed exactly where the classes differ.
pub fn generate_change_labels(y_osm: &LabelImage, y_opt_full: &LabelImage) -> Result<LabelImage> {
    if y_osm.width != y_opt_full.width || y_osm.height != y_opt_full.height {
        return Err(Error::shape("generate_change_labels", "label dims differ".to_string()));
    }
    let data = y_osm
        .data()
        .iter()
        .zip(y_opt_full.data())
        .map(|(&a, &b)| if a == 0 { BCD_BACKGROUND } else { u8::from(a != b) })
        .collect();
    LabelImage::new(y_osm.width, y_osm.height, data)
}

/// Partial optical labels `(1 - change) * map`: map label on unchanged
/// pixels, 0 (ignore) on changed and background pixels.
pub fn generate_partial_labels(y_osm: &LabelImage, y_bcd: &LabelImage) -> Result<LabelImage> {
    if y_osm.width != y_bcd.width || y_osm.height != y_bcd.height {
        return Err(Error::shape("generate_partial_labels", "label dims differ".to_string()));
    }
    let data = y_osm
        .data()
        .iter()
        .zip(y_bcd.data())
        .map(|(&o, &b)| if b == 0 { o } else { 0 })
        .collect();
    LabelImage::new(y_osm.width, y_osm.height, data)
}

// ── on-disk dataset ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub region: String,
    pub object_scales: Vec<u32>,
    pub has_instance_map: bool,
    pub has_full_labels: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub samples: Vec<ManifestRecord>,
}

pub const MANIFEST_VERSION: u32 = 1;

/// A dataset rooted at a directory: `manifest.json` plus one
/// `pairs/<id>/` directory per sample.
pub struct Dataset {
    root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("pairs")).map_err(|e| Error::io(&root, e))?;
        Ok(Dataset {
            root,
            manifest: DatasetManifest { format_version: MANIFEST_VERSION, samples: Vec::new() },
        })
    }

    /// Open and validate: every referenced file must exist.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let mpath = root.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("manifest decode: {e}")))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported manifest version {}",
                manifest.format_version
            )));
        }
        let ds = Dataset { root, manifest };
        for rec in &ds.manifest.samples {
            for f in ds.expected_files(rec) {
                if !f.exists() {
                    return Err(Error::Manifest(format!("missing file {}", f.display())));
                }
            }
        }
        Ok(ds)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn pair_dir(&self, id: &str) -> PathBuf {
        self.root.join("pairs").join(id)
    }

    fn expected_files(&self, rec: &ManifestRecord) -> Vec<PathBuf> {
        let dir = self.pair_dir(&rec.id);
        let mut files = vec![
            dir.join("osm.ppm"),
            dir.join("opt.ppm"),
            dir.join("y_osm.pgm"),
            dir.join("y_bcd.pgm"),
        ];
        if rec.has_full_labels {
            files.push(dir.join("y_opt_full.pgm"));
        }
        if rec.has_instance_map {
            files.push(dir.join("inst.pgm"));
        }
        for s in &rec.object_scales {
            files.push(dir.join(format!("obj_{s}.pgm")));
        }
        files
    }

    /// Write a sample's files and append its manifest record. The partial
    /// labels are not stored; they are a pure function of the stored labels.
    pub fn add_sample(&mut self, sample: &SamplePair, split: Split, region: &str) -> Result<()> {
        sample.validate()?;
        if self.manifest.samples.iter().any(|r| r.id == sample.id) {
            return Err(Error::Manifest(format!("duplicate sample id '{}'", sample.id)));
        }
        let dir = self.pair_dir(&sample.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (w, h) = (sample.width(), sample.height());
        pnm::write_ppm(&dir.join("osm.ppm"), w, h, sample.x_osm.data())?;
        pnm::write_ppm(&dir.join("opt.ppm"), w, h, sample.x_opt.data())?;
        pnm::write_pgm8(&dir.join("y_osm.pgm"), w, h, sample.y_osm.data())?;
        pnm::write_pgm8(&dir.join("y_bcd.pgm"), w, h, sample.y_bcd.data())?;
        if let Some(full) = &sample.y_opt_full {
            pnm::write_pgm8(&dir.join("y_opt_full.pgm"), w, h, full.data())?;
        }
        if let Some(inst) = &sample.instance_map {
            write_region_map(&dir.join("inst.pgm"), inst)?;
        }
        for (scale, map) in &sample.object_maps {
            write_region_map(&dir.join(format!("obj_{scale}.pgm")), map)?;
        }
        self.manifest.samples.push(ManifestRecord {
            id: sample.id.clone(),
            split,
            region: region.to_string(),
            object_scales: sample.object_maps.keys().copied().collect(),
            has_instance_map: sample.instance_map.is_some(),
            has_full_labels: sample.y_opt_full.is_some(),
        });
        Ok(())
    }

    /// Persist guiding maps for an existing sample and update its record.
    pub fn store_maps(
        &mut self,
        id: &str,
        object_maps: &BTreeMap<u32, ObjectMap>,
        instance_map: Option<&InstanceMap>,
    ) -> Result<()> {
        let dir = self.pair_dir(id);
        let rec = self
            .manifest
            .samples
            .iter_mut()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::Manifest(format!("unknown sample id '{id}'")))?;
        for (scale, map) in object_maps {
            write_region_map(&dir.join(format!("obj_{scale}.pgm")), map)?;
            if !rec.object_scales.contains(scale) {
                rec.object_scales.push(*scale);
            }
        }
        rec.object_scales.sort_unstable();
        if let Some(inst) = instance_map {
            write_region_map(&dir.join("inst.pgm"), inst)?;
            rec.has_instance_map = true;
        }
        Ok(())
    }

    pub fn save_manifest(&self) -> Result<()> {
        let mpath = self.root.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Manifest(format!("manifest encode: {e}")))?;
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.manifest.samples.len())
            .filter(|&i| self.manifest.samples[i].split == split)
            .collect()
    }

    /// Optional curation filter: drop samples whose unedited-basemap share
    /// exceeds `max_fraction`. Off by default; pass `None` to keep everything.
    pub fn indices_filtered(&self, split: Split, max_background: Option<f64>) -> Result<Vec<usize>> {
        let base = self.indices(split);
        let Some(limit) = max_background else { return Ok(base) };
        let mut keep = Vec::new();
        for i in base {
            let s = self.load_sample(i)?;
            let bg = s.y_osm.data().iter().filter(|&&l| l == 0).count() as f64
                / s.y_osm.data().len() as f64;
            if bg <= limit {
                keep.push(i);
            }
        }
        Ok(keep)
    }

    pub fn load_sample(&self, index: usize) -> Result<SamplePair> {
        let rec = self
            .manifest
            .samples
            .get(index)
            .ok_or_else(|| Error::Manifest(format!("sample index {index} out of range")))?;
        let dir = self.pair_dir(&rec.id);
        let x_osm = read_raster(&dir.join("osm.ppm"))?;
        let x_opt = read_raster(&dir.join("opt.ppm"))?;
        let y_osm = read_label(&dir.join("y_osm.pgm"))?;
        let y_bcd = read_label(&dir.join("y_bcd.pgm"))?;
        let y_opt_full = if rec.has_full_labels {
            Some(read_label(&dir.join("y_opt_full.pgm"))?)
        } else {
            None
        };
        let instance_map = if rec.has_instance_map {
            Some(read_region_map(&dir.join("inst.pgm"))?)
        } else {
            None
        };
        let mut object_maps = BTreeMap::new();
        for &scale in &rec.object_scales {
            object_maps.insert(scale, read_region_map(&dir.join(format!("obj_{scale}.pgm")))?);
        }
        let y_opt_partial = generate_partial_labels(&y_osm, &y_bcd)?;
        let sample = SamplePair {
            id: rec.id.clone(),
            x_osm,
            x_opt,
            y_osm,
            y_bcd,
            y_opt_partial,
            y_opt_full,
            object_maps,
            instance_map,
        };
        sample.validate()?;
        Ok(sample)
    }
}

fn write_region_map(path: &Path, map: &RegionMap) -> Result<()> {
    if map.n_regions() > 65536 {
        return Err(Error::Config(format!(
            "region map with {} regions exceeds the 16-bit container",
            map.n_regions()
        )));
    }
    let gray: Vec<u16> = map.labels().iter().map(|&l| l as u16).collect();
    pnm::write_pgm16(path, map.width(), map.height(), &gray)
}

fn read_region_map(path: &Path) -> Result<RegionMap> {
    match pnm::read_pnm(path)? {
        pnm::PnmImage::Gray16 { width, height, data } => {
            let labels: Vec<u32> = data.iter().map(|&v| v as u32).collect();
            RegionMap::new(labels, width, height)
        }
        pnm::PnmImage::Gray8 { width, height, data } => {
            let labels: Vec<u32> = data.iter().map(|&v| v as u32).collect();
            RegionMap::new(labels, width, height)
        }
        _ => Err(Error::Manifest(format!("{} is not a grayscale region map", path.display()))),
    }
}

fn read_raster(path: &Path) -> Result<Raster> {
    match pnm::read_pnm(path)? {
        pnm::PnmImage::Rgb8 { width, height, data } => Raster::new(width, height, data),
        _ => Err(Error::Manifest(format!("{} is not an 8-bit rgb raster", path.display()))),
    }
}

fn read_label(path: &Path) -> Result<LabelImage> {
    match pnm::read_pnm(path)? {
        pnm::PnmImage::Gray8 { width, height, data } => LabelImage::new(width, height, data),
        _ => Err(Error::Manifest(format!("{} is not an 8-bit label image", path.display()))),
    }
}

#[cfg(test)]
mod tests;

//! Experiment orchestration: dataset generation, segmentation precompute,
//! training, evaluation, complexity benchmarking, and robustness sweeps.
//! Every run directory carries its exact configuration, seed, and source
//! revision so runs re-execute bit-identically.

mod bench;
mod eval;
mod sweep;
mod train;

pub use bench::{bench_attention, BenchRow};
pub use eval::{evaluate, predict_sample, write_prediction_maps, EvalOptions, EvalSummary, SamplePrediction};
pub use sweep::{pooling_rows_csv, pooling_sweep, registration_sweep, PoolingSweepRow, RegSweepReport, RegSweepRow};
pub use train::{write_csv, EvalPoint, TrainOutcome, Trainer};

use std::path::{Path, PathBuf};

use crate::data::{synth_generate_with, Dataset, Split, SynthParams};
use crate::error::{Error, Result};
use crate::net::Task;
use crate::segmentation::{connected_components, multiscale_objects, SlicParams};
use crate::tensor::ops::PoolFusion;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// How multi-scale object maps are used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MultiscaleMode {
    Off,
    /// Random scale each training iteration; single-scale test.
    Train,
    /// Single-scale training; probabilities fused over scales at test.
    Test,
    /// Both of the above.
    Both,
}

impl MultiscaleMode {
    pub fn random_at_train(self) -> bool {
        matches!(self, MultiscaleMode::Train | MultiscaleMode::Both)
    }

    pub fn fuse_at_test(self) -> bool {
        matches!(self, MultiscaleMode::Test | MultiscaleMode::Both)
    }
}

impl std::str::FromStr for MultiscaleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(MultiscaleMode::Off),
            "train" => Ok(MultiscaleMode::Train),
            "test" => Ok(MultiscaleMode::Test),
            "both" => Ok(MultiscaleMode::Both),
            other => Err(Error::Config(format!("unknown multiscale mode '{other}'"))),
        }
    }
}

/// Everything one training/evaluation run needs; serialized verbatim into
/// the run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub preset: String,
    pub n_classes: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub seed: u64,
    pub object_scales: Vec<u32>,
    pub fusion: PoolFusion,
    pub cce: bool,
    pub multiscale: MultiscaleMode,
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    pub eval_every: u64,
    pub crop: Option<usize>,
    pub flips: bool,
    pub rot90: bool,
    /// Train-time registration augmentation: random offsets up to this many
    /// pixels applied to the optical image.
    pub reg_augment_max: Option<usize>,
    /// Linear learning-rate warmup over this many iterations.
    #[serde(default)]
    pub warmup_iters: u64,
    pub resume: Option<PathBuf>,
}

impl RunConfig {
    /// Paper training protocol for BCD: AdamW, lr 1e-4, weight decay 5e-3,
    /// batch 16, 7500 iterations.
    pub fn paper_bcd(data_root: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            task: Task::Bcd,
            preset: "paper".into(),
            n_classes: 7,
            lr: 1e-4,
            weight_decay: 5e-3,
            batch_size: 16,
            iterations: 7500,
            seed: 0,
            object_scales: vec![1000, 1500, 2000],
            fusion: PoolFusion::Mean,
            cce: true,
            multiscale: MultiscaleMode::Both,
            data_root: data_root.into(),
            out_dir: out_dir.into(),
            eval_every: 500,
            crop: Some(512),
            flips: true,
            rot90: true,
            reg_augment_max: None,
            warmup_iters: 0,
            resume: None,
        }
    }

    /// Same protocol with the SCD iteration budget.
    pub fn paper_scd(data_root: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        RunConfig { task: Task::Scd, iterations: 10_000, ..Self::paper_bcd(data_root, out_dir) }
    }

    /// Desk-scale defaults: tiny preset on 64x64 synthetic pairs, minutes on
    /// a laptop CPU.
    pub fn desk(task: Task, data_root: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            task,
            preset: "tiny".into(),
            n_classes: 7,
            lr: 1e-3,
            weight_decay: 5e-3,
            batch_size: 4,
            iterations: 1500,
            seed: 0,
            object_scales: vec![16, 24, 32],
            fusion: PoolFusion::Mean,
            cce: true,
            multiscale: MultiscaleMode::Both,
            data_root: data_root.into(),
            out_dir: out_dir.into(),
            eval_every: 100,
            crop: None,
            flips: true,
            rot90: true,
            reg_augment_max: None,
            warmup_iters: 100,
            resume: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch size, iterations, eval_every must be positive".into()));
        }
        if self.object_scales.is_empty() {
            return Err(Error::Config("at least one object scale is required".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("lr must be positive, weight decay nonnegative".into()));
        }
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be positive".into()));
        }
        crate::net::ModelConfig::preset(&self.preset, self.n_classes)?.validate()
    }
}

pub(crate) fn resolve_out_dir(dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.to_path_buf())
}

/// Generate a synthetic dataset: `n` deterministic pairs at `h` x `w`, the
/// last `test_fraction` of them tagged as the test split.
pub fn cmd_synth(
    out_dir: &Path,
    n: usize,
    h: usize,
    w: usize,
    params: SynthParams,
    seed: u64,
    test_fraction: f64,
) -> Result<Dataset> {
    if n == 0 || !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::Config("need n >= 1 and test_fraction in [0,1]".into()));
    }
    let mut ds = Dataset::create(out_dir)?;
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let samples: Vec<_> = (0..n)
        .into_par_iter()
        .map(|i| synth_generate_with(seed.wrapping_add(i as u64), h, w, params))
        .collect::<Result<_>>()?;
    for (i, mut s) in samples.into_iter().enumerate() {
        s.id = format!("pair_{i:05}");
        let split = if i >= n - n_test { Split::Test } else { Split::Train };
        ds.add_sample(&s, split, "synthetic")?;
    }
    ds.save_manifest()?;
    Ok(ds)
}

/// Precompute guiding maps for every sample: SLIC object maps at each scale
/// from the optical raster, a connected-component instance map from the map
/// labels.
pub fn cmd_segment(
    data_root: &Path,
    scales: &[usize],
    slic_params: SlicParams,
    seed: u64,
) -> Result<()> {
    let mut ds = Dataset::open(data_root)?;
    let jobs: Vec<usize> = (0..ds.len()).collect();
    let computed: Vec<_> = jobs
        .par_iter()
        .map(|&i| -> Result<_> {
            let s = ds.load_sample(i)?;
            let (w, h) = (s.width(), s.height());
            let maps = multiscale_objects(s.x_opt.data(), w, h, scales, slic_params, seed)?;
            let inst = connected_components(s.y_osm.data(), w, h)?;
            let keyed: std::collections::BTreeMap<u32, _> =
                scales.iter().map(|&sc| sc as u32).zip(maps).collect();
            Ok((s.id.clone(), keyed, inst))
        })
        .collect::<Result<_>>()?;
    for (id, maps, inst) in computed {
        ds.store_maps(&id, &maps, Some(&inst))?;
    }
    ds.save_manifest()
}

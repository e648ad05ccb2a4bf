//! Command-line front end. Each subcommand is a thin wrapper over the
//! library; the `examples/` directory shows the same flows as code.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use objformer::data::{Dataset, Split, SynthParams};
use objformer::harness::{
    bench_attention, cmd_segment, cmd_synth, evaluate, pooling_rows_csv, pooling_sweep,
    predict_sample, registration_sweep, write_prediction_maps, BenchRow, EvalOptions,
    RunConfig, Trainer,
};
use objformer::net::{load_checkpoint, ObjFormer, Task};
use objformer::segmentation::SlicParams;
use objformer::Result;

#[derive(Parser)]
#[command(name = "objformer", about = "Object-guided change detection between map data and optical imagery", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic dataset.
    Synth(SynthArgs),
    /// Precompute object maps (SLIC) and instance maps (connected components).
    Segment(SegmentArgs),
    /// Train a detector; config comes from a JSON file, flags override.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Closed-form and measured attention complexity comparison.
    BenchAttn(BenchArgs),
    /// Metrics under simulated registration errors.
    RegSweep(RegSweepArgs),
    /// Train once per token-fusion statistic and tabulate the results.
    PoolSweep(PoolSweepArgs),
    /// Summarize a checkpoint or a dataset directory.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 14)]
    n_shapes: usize,
    #[arg(long, default_value_t = 0.3)]
    change_rate: f64,
    #[arg(long, default_value_t = 8.0)]
    texture: f64,
    #[arg(long, default_value_t = 0.1)]
    background: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.25)]
    test_fraction: f64,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated n_segments values.
    #[arg(long, value_delimiter = ',', default_values_t = [16usize, 24, 32])]
    scales: Vec<usize>,
    #[arg(long, default_value_t = 10.0)]
    compactness: f64,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<u32>>,
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    cce: Option<bool>,
    #[arg(long)]
    multiscale: Option<String>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    reg_augment: Option<usize>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<u32>>,
    /// Average per-scale class probabilities before the argmax.
    #[arg(long, default_value_t = false)]
    fuse: bool,
    #[arg(long, default_value = "mean")]
    fusion: String,
    /// Write prediction maps and update heat-maps here.
    #[arg(long)]
    write_maps: Option<PathBuf>,
    /// Drop samples whose basemap share exceeds this fraction.
    #[arg(long)]
    max_background: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    /// Cells as HxWxCxheads, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = ["128x128x64x1".to_string()])]
    dims: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [500usize, 1000, 1500])]
    tokens: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    sr_ratio: usize,
    /// Also time the real kernels.
    #[arg(long, default_value_t = false)]
    measure: bool,
    /// Skip the vanilla measurement above this many pixels.
    #[arg(long, default_value_t = 16384)]
    measure_pixel_cap: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RegSweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0usize, 4, 8, 12, 16])]
    offsets: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<u32>>,
    #[arg(long, default_value_t = false)]
    fuse: bool,
    #[arg(long, default_value = "mean")]
    fusion: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PoolSweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    path: PathBuf,
}

fn load_run_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| objformer::Error::io(path, e))?;
            serde_json::from_str(&text)
                .map_err(|e| objformer::Error::Config(format!("run config decode: {e}")))?
        }
        None => RunConfig::desk(
            args.task.unwrap_or(Task::Bcd),
            args.data.clone().unwrap_or_else(|| PathBuf::from("data")),
            args.out.clone().unwrap_or_else(|| PathBuf::from("runs/run")),
        ),
    };
    if let Some(v) = &args.data {
        cfg.data_root = v.clone();
    }
    if let Some(v) = &args.out {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = args.task {
        cfg.task = v;
    }
    if let Some(v) = &args.preset {
        cfg.preset = v.clone();
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = &args.scales {
        cfg.object_scales = v.clone();
    }
    if let Some(v) = &args.fusion {
        cfg.fusion = v.parse()?;
    }
    if let Some(v) = args.cce {
        cfg.cce = v;
    }
    if let Some(v) = &args.multiscale {
        cfg.multiscale = v.parse()?;
    }
    if let Some(v) = args.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = args.crop {
        cfg.crop = Some(v);
    }
    if let Some(v) = args.reg_augment {
        cfg.reg_augment_max = Some(v);
    }
    if let Some(v) = args.warmup {
        cfg.warmup_iters = v;
    }
    if let Some(v) = &args.resume {
        cfg.resume = Some(v.clone());
    }
    Ok(cfg)
}

fn parse_dims(spec: &str) -> Result<(usize, usize, usize, usize)> {
    let parts: Vec<usize> = spec
        .split('x')
        .map(|p| p.parse().map_err(|_| objformer::Error::Config(format!("bad dims '{spec}'"))))
        .collect::<Result<_>>()?;
    if parts.len() != 4 {
        return Err(objformer::Error::Config(format!("dims '{spec}' need HxWxCxheads")));
    }
    Ok((parts[0], parts[1], parts[2], parts[3]))
}

fn load_split_samples(
    data: &PathBuf,
    split: &str,
    max_background: Option<f64>,
) -> Result<Vec<objformer::data::SamplePair>> {
    let ds = Dataset::open(data)?;
    let split: Split = split.parse()?;
    ds.indices_filtered(split, max_background)?
        .into_iter()
        .map(|i| ds.load_sample(i))
        .collect()
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(a) => {
            let params = SynthParams {
                n_shapes: a.n_shapes,
                change_rate: a.change_rate,
                texture_strength: a.texture,
                background_fraction: a.background,
            };
            let ds = cmd_synth(&a.out, a.n, a.size, a.size, params, a.seed, a.test_fraction)?;
            println!(
                "wrote {} pairs ({} train / {} test) to {}",
                ds.len(),
                ds.indices(Split::Train).len(),
                ds.indices(Split::Test).len(),
                a.out.display()
            );
        }
        Command::Segment(a) => {
            let params = SlicParams { compactness: a.compactness, iters: a.iters };
            cmd_segment(&a.data, &a.scales, params, a.seed)?;
            println!("segmented {} at scales {:?}", a.data.display(), a.scales);
        }
        Command::Train(a) => {
            let cfg = load_run_config(&a)?;
            let mut trainer = Trainer::<f32>::new(cfg)?;
            let outcome = trainer.run()?;
            println!(
                "done after {} iterations; best {:.4} at iteration {}; run dir {}",
                outcome.iterations,
                outcome.best_metric,
                outcome.best_iteration,
                outcome.run_dir.display()
            );
            let b = outcome.final_eval.bcd;
            println!("final: rec {:.4} pre {:.4} f1 {:.4} oa {:.4} kc {:.4}", b.rec, b.pre, b.f1, b.oa, b.kc);
            if let Some(s) = outcome.final_eval.scd {
                println!(
                    "scd: clfOA {:.4} clfKC {:.4} cdKC {:.4} trOA {:.4} trKC {:.4}",
                    s.clf_oa, s.clf_kc, s.cd_kc, s.tr_oa, s.tr_kc
                );
            }
        }
        Command::Eval(a) => {
            let (model, _) = ObjFormer::<f32>::load(&a.checkpoint)?;
            let samples = load_split_samples(&a.data, &a.split, a.max_background)?;
            let scales = match a.scales {
                Some(s) => s,
                None => samples
                    .first()
                    .map(|s| s.object_maps.keys().copied().collect())
                    .unwrap_or_default(),
            };
            let opts = EvalOptions { scales, fuse: a.fuse, fusion_stat: a.fusion.parse()? };
            let summary = evaluate(&model, &samples, &opts)?;
            println!("{}", serde_json::to_string_pretty(&summary).unwrap());
            if let Some(dir) = a.write_maps {
                for s in &samples {
                    let pred = predict_sample(&model, s, &opts)?;
                    write_prediction_maps(&dir, s, &pred)?;
                }
                println!("prediction maps written to {}", dir.display());
            }
        }
        Command::BenchAttn(a) => {
            let dims: Vec<_> = a.dims.iter().map(|d| parse_dims(d)).collect::<Result<_>>()?;
            let rows = bench_attention(&dims, &a.tokens, a.sr_ratio, a.measure, a.measure_pixel_cap)?;
            println!("{}", BenchRow::csv_header());
            for r in &rows {
                println!("{}", r.csv_row());
            }
            if let Some(path) = a.out {
                let body: Vec<String> = rows.iter().map(|r| r.csv_row()).collect();
                objformer::harness::write_csv(&path, BenchRow::csv_header(), &body)?;
                println!("wrote {}", path.display());
            }
        }
        Command::RegSweep(a) => {
            let (model, _) = ObjFormer::<f32>::load(&a.checkpoint)?;
            let samples = load_split_samples(&a.data, "test", None)?;
            let scales = match a.scales {
                Some(s) => s,
                None => samples
                    .first()
                    .map(|s| s.object_maps.keys().copied().collect())
                    .unwrap_or_default(),
            };
            let opts = EvalOptions { scales, fuse: a.fuse, fusion_stat: a.fusion.parse()? };
            let report = registration_sweep(&model, &samples, &a.offsets, &opts)?;
            report.write_csv(&a.out)?;
            for off in &a.offsets {
                let row = report.averaged(*off);
                let b = row.summary.bcd;
                println!(
                    "offset {:>2}: rec {:.4} pre {:.4} f1 {:.4} oa {:.4} kc {:.4}",
                    off, b.rec, b.pre, b.f1, b.oa, b.kc
                );
            }
            println!("wrote {}", a.out.display());
        }
        Command::PoolSweep(a) => {
            let text = std::fs::read_to_string(&a.config)
                .map_err(|e| objformer::Error::io(&a.config, e))?;
            let cfg: RunConfig = serde_json::from_str(&text)
                .map_err(|e| objformer::Error::Config(format!("run config decode: {e}")))?;
            let rows = pooling_sweep::<f32>(&cfg)?;
            let (header, body) = pooling_rows_csv(&rows);
            println!("{header}");
            for line in &body {
                println!("{line}");
            }
            if let Some(path) = a.out {
                objformer::harness::write_csv(&path, &header, &body)?;
            }
        }
        Command::Inspect(a) => {
            if a.path.is_dir() {
                let ds = Dataset::open(&a.path)?;
                let train = ds.indices(Split::Train).len();
                let test = ds.indices(Split::Test).len();
                println!("dataset {}: {} pairs ({train} train / {test} test)", a.path.display(), ds.len());
                if let Some(rec) = ds.manifest.samples.first() {
                    println!(
                        "first pair '{}': scales {:?}, instance map: {}, full labels: {}",
                        rec.id, rec.object_scales, rec.has_instance_map, rec.has_full_labels
                    );
                }
            } else {
                let (meta, entries) = load_checkpoint::<f32>(&a.path)?;
                let params: usize = entries
                    .iter()
                    .filter(|e| !e.name.starts_with("opt."))
                    .map(|e| e.data.len())
                    .sum();
                println!("checkpoint {}", a.path.display());
                println!("task: {}  entries: {}  parameters: {params}", meta.task, entries.len());
                println!("config: {}", serde_json::to_string_pretty(&meta.config).unwrap());
                if !meta.extra.is_null() {
                    println!("extra: {}", serde_json::to_string_pretty(&meta.extra).unwrap());
                }
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

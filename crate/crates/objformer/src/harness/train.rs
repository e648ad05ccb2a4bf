//! The training loop: seeded batching and augmentation, multi-scale object
//! selection, per-sample forward/backward in parallel with deterministic
//! gradient reduction, AdamW updates, loss/eval logging, and checkpoints
//! that resume bit-exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::eval::{evaluate, EvalOptions, EvalSummary};
use super::{resolve_out_dir, RunConfig};
use crate::data::{augment, AugmentConfig, Dataset, SamplePair, ShiftDirection, Split};
use crate::error::{Error, Result};
use crate::losses::{bcd_loss, scd_total, LossValues};
use crate::net::{load_checkpoint, save_checkpoint, CheckpointMeta, ModelConfig, ObjFormer, Task};
use crate::tensor::{AdamW, Element, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize)]
pub struct EvalPoint {
    pub iteration: u64,
    pub summary: EvalSummary,
}

#[derive(Debug, Serialize)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub iterations: u64,
    pub best_iteration: u64,
    pub best_metric: f64,
    pub final_eval: EvalSummary,
    pub eval_history: Vec<EvalPoint>,
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    iteration: u64,
    rng_seed: [u8; 32],
    rng_word_pos: String,
    best_metric: f64,
    best_iteration: u64,
}

pub struct Trainer<E: Element> {
    cfg: RunConfig,
    run_dir: PathBuf,
    model: ObjFormer<E>,
    opt: AdamW<E>,
    rng: ChaCha8Rng,
    iteration: u64,
    best_metric: f64,
    best_iteration: u64,
    train_samples: Vec<SamplePair>,
    test_samples: Vec<SamplePair>,
    loss_log: Vec<(u64, LossValues, f64, f64)>,
    eval_history: Vec<EvalPoint>,
}

struct SampleResult<E> {
    grads: Vec<Option<Vec<E>>>,
    losses: LossValues,
    /// Mapping cross-entropy against the full optical labels on changed and
    /// unchanged pixels, when full labels exist; training diagnostics only.
    lcm_changed: f64,
    lcm_unchanged: f64,
}

impl<E: Element> Trainer<E> {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = Dataset::open(&cfg.data_root)?;
        let load = |split: Split| -> Result<Vec<SamplePair>> {
            dataset.indices(split).into_iter().map(|i| dataset.load_sample(i)).collect()
        };
        let train_samples = load(Split::Train)?;
        let test_samples = load(Split::Test)?;
        if train_samples.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        for s in train_samples.iter().chain(&test_samples) {
            if s.instance_map.is_none() {
                return Err(Error::Config(format!(
                    "sample '{}' has no instance map; run segmentation first",
                    s.id
                )));
            }
            for &scale in &cfg.object_scales {
                if !s.object_maps.contains_key(&scale) {
                    return Err(Error::Config(format!(
                        "sample '{}' has no object map at scale {scale}; run segmentation first",
                        s.id
                    )));
                }
            }
        }

        let run_dir = resolve_out_dir(&cfg.out_dir)?;
        let model_cfg = ModelConfig::preset(&cfg.preset, cfg.n_classes)?;
        let (model, opt, rng, iteration, best_metric, best_iteration) =
            if let Some(ckpt) = &cfg.resume {
                Self::restore(ckpt, &cfg)?
            } else {
                let model = ObjFormer::new(model_cfg, cfg.task, cfg.seed)?;
                let opt = AdamW::new(cfg.lr, cfg.weight_decay);
                let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                (model, opt, rng, 0, f64::NEG_INFINITY, 0)
            };

        let trainer = Trainer {
            cfg,
            run_dir,
            model,
            opt,
            rng,
            iteration,
            best_metric,
            best_iteration,
            train_samples,
            test_samples,
            loss_log: Vec::new(),
            eval_history: Vec::new(),
        };
        trainer.write_config()?;
        Ok(trainer)
    }

    pub fn model(&self) -> &ObjFormer<E> {
        &self.model
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    fn write_config(&self) -> Result<()> {
        let path = self.run_dir.join("config.json");
        let record = serde_json::json!({
            "config": self.cfg,
            "git_describe": git_describe(),
            "dtype": format!("{:?}", E::DTYPE),
        });
        fs::write(&path, serde_json::to_string_pretty(&record).unwrap())
            .map_err(|e| Error::io(&path, e))
    }

    fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            scales: self.cfg.object_scales.clone(),
            fuse: self.cfg.multiscale.fuse_at_test(),
            fusion_stat: self.cfg.fusion,
        }
    }

    /// One optimization step. Scale choice, batch sampling, and per-sample
    /// augmentation seeds all come from the trainer rng in a fixed order, so
    /// a restored rng reproduces the step bit-exactly.
    pub fn step(&mut self) -> Result<LossValues> {
        let scale_pool: &[u32] = if self.cfg.multiscale.random_at_train() {
            &self.cfg.object_scales
        } else {
            &self.cfg.object_scales[..1]
        };
        let scale = scale_pool[self.rng.gen_range(0..scale_pool.len())];
        let batch: Vec<(usize, u64)> = (0..self.cfg.batch_size)
            .map(|_| {
                let idx = self.rng.gen_range(0..self.train_samples.len());
                (idx, self.rng.gen::<u64>())
            })
            .collect();

        let cfg = &self.cfg;
        let model = &self.model;
        let samples = &self.train_samples;
        let results: Vec<Result<SampleResult<E>>> = batch
            .par_iter()
            .map(|&(idx, sub_seed)| train_one(model, cfg, &samples[idx], scale, sub_seed))
            .collect();

        let n_params = self.model.weights().len();
        let inv_batch = E::from_f64(1.0 / self.cfg.batch_size as f64);
        let mut grads: Vec<Vec<E>> = (0..n_params)
            .map(|i| vec![E::zero(); self.model.weights().tensor(i).numel()])
            .collect();
        let mut losses = LossValues { bcd: 0.0, lcm_osm: 0.0, lcm_opt: 0.0, cce: 0.0, total: 0.0 };
        let mut diag_changed = 0.0;
        let mut diag_unchanged = 0.0;
        for r in results {
            let r = r?;
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                if let Some(g) = g {
                    for (a, &v) in acc.iter_mut().zip(g) {
                        *a = *a + v * inv_batch;
                    }
                }
            }
            let b = self.cfg.batch_size as f64;
            losses.bcd += r.losses.bcd / b;
            losses.lcm_osm += r.losses.lcm_osm / b;
            losses.lcm_opt += r.losses.lcm_opt / b;
            losses.cce += r.losses.cce / b;
            losses.total += r.losses.total / b;
            diag_changed += r.lcm_changed / b;
            diag_unchanged += r.lcm_unchanged / b;
        }

        if !losses.total.is_finite() {
            return Err(Error::Diverged {
                iteration: self.iteration,
                details: format!(
                    "non-finite loss; components bcd={} lcm_osm={} lcm_opt={} cce={}, batch={:?}, scale={scale}",
                    losses.bcd, losses.lcm_osm, losses.lcm_opt, losses.cce,
                    batch.iter().map(|&(i, _)| &samples[i].id).collect::<Vec<_>>()
                ),
            });
        }

        // linear warmup, then the configured rate
        self.opt.lr = if self.iteration < self.cfg.warmup_iters {
            self.cfg.lr * (self.iteration + 1) as f64 / self.cfg.warmup_iters as f64
        } else {
            self.cfg.lr
        };
        self.opt.begin_step();
        for i in 0..n_params {
            self.opt.update(i, self.model.weights_mut().tensor_mut(i).data_mut(), &grads[i]);
        }
        self.iteration += 1;
        self.loss_log.push((self.iteration, losses, diag_changed, diag_unchanged));
        Ok(losses)
    }

    pub fn evaluate_test(&self) -> Result<EvalSummary> {
        evaluate(&self.model, &self.test_samples, &self.eval_options())
    }

    fn selection_metric(&self, summary: &EvalSummary) -> f64 {
        match self.cfg.task {
            Task::Bcd => summary.bcd.kc,
            Task::Scd => summary.scd.map(|s| s.tr_kc).unwrap_or(summary.bcd.kc),
        }
    }

    /// Run to `cfg.iterations`, evaluating and checkpointing on the way.
    pub fn run(&mut self) -> Result<TrainOutcome> {
        while self.iteration < self.cfg.iterations {
            self.step()?;
            if self.iteration % self.cfg.eval_every == 0 || self.iteration == self.cfg.iterations {
                let summary = self.evaluate_test()?;
                let metric = self.selection_metric(&summary);
                self.eval_history.push(EvalPoint { iteration: self.iteration, summary });
                if metric > self.best_metric {
                    self.best_metric = metric;
                    self.best_iteration = self.iteration;
                    self.save_checkpoint(&self.run_dir.join("checkpoint_best.objf"))?;
                }
            }
        }
        self.save_checkpoint(&self.run_dir.join("checkpoint_final.objf"))?;
        self.flush_logs()?;
        let final_eval = self.evaluate_test()?;
        let outcome = TrainOutcome {
            run_dir: self.run_dir.clone(),
            iterations: self.iteration,
            best_iteration: self.best_iteration,
            best_metric: self.best_metric,
            final_eval,
            eval_history: std::mem::take(&mut self.eval_history),
        };
        let report = self.run_dir.join("report.json");
        fs::write(&report, serde_json::to_string_pretty(&outcome).unwrap())
            .map_err(|e| Error::io(&report, e))?;
        Ok(outcome)
    }

    /// Weights, optimizer moments, rng position, and progress in one file.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let state = TrainerState {
            iteration: self.iteration,
            rng_seed: self.rng.get_seed(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            best_metric: self.best_metric,
            best_iteration: self.best_iteration,
        };
        let meta = CheckpointMeta {
            config: self.model.config().clone(),
            task: self.model.task(),
            extra: serde_json::json!({
                "trainer": state,
                "run_config": self.cfg,
                "opt_step": self.opt.step_count(),
            }),
        };
        let weights = self.model.weights();
        let (m, v, _) = self.opt.state();
        let mut entries: Vec<(String, Vec<usize>, Vec<E>)> = Vec::new();
        for i in 0..weights.len() {
            if i < m.len() && !m[i].is_empty() {
                entries.push((format!("opt.m.{}", weights.name(i)), vec![m[i].len()], m[i].clone()));
                entries.push((format!("opt.v.{}", weights.name(i)), vec![v[i].len()], v[i].clone()));
            }
        }
        save_checkpoint(
            path,
            &meta,
            weights
                .iter()
                .map(|(n, t)| (n, t.shape(), t.data()))
                .chain(entries.iter().map(|(n, s, d)| (n.as_str(), s.as_slice(), d.as_slice()))),
        )
    }

    #[allow(clippy::type_complexity)]
    fn restore(
        path: &Path,
        cfg: &RunConfig,
    ) -> Result<(ObjFormer<E>, AdamW<E>, ChaCha8Rng, u64, f64, u64)> {
        let (meta, entries) = load_checkpoint::<E>(path)?;
        if meta.task != cfg.task {
            return Err(Error::Config(format!(
                "checkpoint task {} does not match run task {}",
                meta.task, cfg.task
            )));
        }
        let mut model = ObjFormer::new(meta.config.clone(), meta.task, 0)?;
        model.restore_entries(&entries)?;
        let state: TrainerState = serde_json::from_value(meta.extra["trainer"].clone())
            .map_err(|e| Error::Checkpoint(format!("trainer state decode: {e}")))?;
        let opt_step: u64 = serde_json::from_value(meta.extra["opt_step"].clone())
            .map_err(|e| Error::Checkpoint(format!("opt step decode: {e}")))?;

        let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
        let n = model.weights().len();
        let mut m = vec![Vec::new(); n];
        let mut v = vec![Vec::new(); n];
        for e in &entries {
            if let Some(name) = e.name.strip_prefix("opt.m.") {
                if let Some(i) = model.weights().index_of(name) {
                    m[i] = e.data.clone();
                }
            } else if let Some(name) = e.name.strip_prefix("opt.v.") {
                if let Some(i) = model.weights().index_of(name) {
                    v[i] = e.data.clone();
                }
            }
        }
        opt.restore_state(m, v, opt_step);

        let mut rng = ChaCha8Rng::from_seed(state.rng_seed);
        let pos: u128 = state
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Checkpoint("bad rng word position".into()))?;
        rng.set_word_pos(pos);
        Ok((model, opt, rng, state.iteration, state.best_metric, state.best_iteration))
    }

    pub fn flush_logs(&self) -> Result<()> {
        let path = self.run_dir.join("loss_log.csv");
        let mut out = String::from(
            "iteration,l_bcd,l_lcm_osm,l_lcm_opt,l_cce,l_total,lcm_changed,lcm_unchanged\n",
        );
        for (it, l, c, u) in &self.loss_log {
            out.push_str(&format!(
                "{it},{},{},{},{},{},{c},{u}\n",
                l.bcd, l.lcm_osm, l.lcm_opt, l.cce, l.total
            ));
        }
        fs::write(&path, out).map_err(|e| Error::io(&path, e))?;

        let path = self.run_dir.join("eval_log.csv");
        let mut out = String::from(
            "iteration,rec,pre,f1,oa,kc,clf_oa,clf_kc,cd_kc,tr_oa,tr_kc,clf_kc_changed,clf_kc_unchanged\n",
        );
        for p in &self.eval_history {
            let b = &p.summary.bcd;
            let s = p.summary.scd;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                p.iteration,
                b.rec,
                b.pre,
                b.f1,
                b.oa,
                b.kc,
                s.map_or(f64::NAN, |s| s.clf_oa),
                s.map_or(f64::NAN, |s| s.clf_kc),
                s.map_or(f64::NAN, |s| s.cd_kc),
                s.map_or(f64::NAN, |s| s.tr_oa),
                s.map_or(f64::NAN, |s| s.tr_kc),
                p.summary.clf_kc_changed,
                p.summary.clf_kc_unchanged,
            ));
        }
        fs::write(&path, out).map_err(|e| Error::io(&path, e))
    }

    pub fn eval_history(&self) -> &[EvalPoint] {
        &self.eval_history
    }

    /// Fingerprint of the parameters, for determinism checks.
    pub fn weight_digest(&self) -> u64 {
        let mut h = 1469598103934665603u64; // FNV offset basis
        for (_, t) in self.model.weights().iter() {
            for &v in t.data() {
                for b in v.to_f64().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(1099511628211);
                }
            }
        }
        h
    }
}

/// Forward/backward of one augmented sample. Everything random comes from
/// `sub_seed`, which the trainer drew from its own stream.
fn train_one<E: Element>(
    model: &ObjFormer<E>,
    cfg: &RunConfig,
    sample: &SamplePair,
    scale: u32,
    sub_seed: u64,
) -> Result<SampleResult<E>> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
    let aug_cfg = AugmentConfig { crop: cfg.crop, flips: cfg.flips, rot90: cfg.rot90 };
    let mut s = augment(sample, &aug_cfg, &mut rng)?;
    if let Some(max_off) = cfg.reg_augment_max {
        let off = rng.gen_range(0..=max_off);
        let dir = ShiftDirection::ALL[rng.gen_range(0..3)];
        s = crate::data::apply_registration_offset(&s, off, dir)?;
    }
    let (h, w) = (s.height(), s.width());
    let obj = s
        .object_maps
        .get(&scale)
        .ok_or_else(|| Error::Config(format!("no object map at scale {scale}")))?;
    let inst = s.instance_map.as_ref().expect("validated at load");
    let obj_stage = model.stage_maps(obj, h, w)?;
    let inst_stage = model.stage_maps(inst, h, w)?;

    let mut tape = Tape::new();
    let xo = tape.constant(to_e::<E>(&s.x_osm.to_chw_f32()), &[3, h, w])?;
    let xp = tape.constant(to_e::<E>(&s.x_opt.to_chw_f32()), &[3, h, w])?;
    let bound = model.bind(&mut tape);

    let (loss_id, losses, lcm_logits) = match cfg.task {
        Task::Bcd => {
            let logits =
                model.forward_bcd(&mut tape, &bound, xo, xp, &inst_stage, &obj_stage, cfg.fusion)?;
            let l = bcd_loss(&mut tape, logits, s.y_bcd.data())?;
            let v = tape.scalar_value(l.loss).to_f64();
            (
                l.loss,
                LossValues { bcd: v, lcm_osm: 0.0, lcm_opt: 0.0, cce: 0.0, total: v },
                None,
            )
        }
        Task::Scd => {
            let out =
                model.forward_scd(&mut tape, &bound, xo, xp, &inst_stage, &obj_stage, cfg.fusion)?;
            let bundle = scd_total(
                &mut tape,
                out.bcd,
                out.lcm_osm,
                out.lcm_opt,
                s.y_osm.data(),
                s.y_bcd.data(),
                s.y_opt_partial.data(),
                cfg.cce,
            )?;
            let values = bundle.values(&tape);
            (bundle.l_total, values, Some(out.lcm_opt))
        }
    };

    let grads_store = tape.backward(loss_id)?;
    let mut grads = Vec::with_capacity(bound.ids().len());
    let mut store = grads_store;
    for &id in bound.ids() {
        grads.push(store.take(id));
    }

    // changed/unchanged mapping diagnostics against the full labels
    let (mut lcm_changed, mut lcm_unchanged) = (0.0, 0.0);
    if let (Some(logits), Some(full)) = (lcm_logits, &s.y_opt_full) {
        lcm_changed = masked_lcm_ce(&tape, logits, full.data(), s.y_bcd.data(), 1);
        lcm_unchanged = masked_lcm_ce(&tape, logits, full.data(), s.y_bcd.data(), 0);
    }

    Ok(SampleResult { grads, losses, lcm_changed, lcm_unchanged })
}

/// Cross-entropy of the foreground-class softmax against full labels,
/// restricted to pixels with the given change state. Diagnostic only.
fn masked_lcm_ce<E: Element>(
    tape: &Tape<E>,
    logits: crate::tensor::TensorId,
    y_full: &[u8],
    y_bcd: &[u8],
    state: u8,
) -> f64 {
    let shape = tape.shape(logits);
    let (c1, hw) = (shape[0], shape[1] * shape[2]);
    let data = tape.data(logits);
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..hw {
        if y_bcd[p] != state || y_full[p] == 0 {
            continue;
        }
        let mut mx = f64::NEG_INFINITY;
        for ch in 1..c1 {
            mx = mx.max(data[ch * hw + p].to_f64());
        }
        let mut z = 0.0;
        for ch in 1..c1 {
            z += (data[ch * hw + p].to_f64() - mx).exp();
        }
        let zt = data[y_full[p] as usize * hw + p].to_f64();
        total += z.ln() + mx - zt;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn to_e<E: Element>(v: &[f32]) -> Vec<E> {
    v.iter().map(|&x| E::from_f64(x as f64)).collect()
}

pub(crate) fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

impl<E: Element> Trainer<E> {
    /// Direct access for harness commands that evaluate mid-training.
    pub fn test_samples(&self) -> &[SamplePair] {
        &self.test_samples
    }
}

/// Write a run's loss log to a writer in CSV form; used by the sweep
/// commands which aggregate several runs.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(f, "{r}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

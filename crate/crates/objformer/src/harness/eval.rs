//! Evaluation: per-sample prediction with optional multi-scale fusion,
//! global confusion accumulation, and prediction-map/heat-map emission.

use std::path::Path;

use crate::data::{pnm, CategoryPalette, SamplePair};
use crate::error::{Error, Result};
use crate::losses::BCD_BACKGROUND;
use crate::metrics::{
    binary_metrics_from, kappa, BinaryMetrics, ConfusionMatrix, ScdAccumulator, ScdMetrics,
};
use crate::net::{ObjFormer, Task};
use crate::tensor::ops::PoolFusion;
use crate::tensor::{Element, Tape, TensorId};
use rayon::prelude::*;
use serde::Serialize;

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Object-map scales to run; with `fuse` the per-scale class
    /// probabilities are averaged before the argmax.
    pub scales: Vec<u32>,
    pub fuse: bool,
    pub fusion_stat: PoolFusion,
}

impl EvalOptions {
    pub fn single(scale: u32, fusion_stat: PoolFusion) -> Self {
        EvalOptions { scales: vec![scale], fuse: false, fusion_stat }
    }

    fn active_scales(&self) -> &[u32] {
        if self.fuse {
            &self.scales
        } else {
            &self.scales[..1]
        }
    }
}

/// Dense per-sample outputs.
pub struct SamplePrediction {
    pub bcd: Vec<u8>,
    /// Foreground class ids (1-based); present for SCD models.
    pub lcm_opt: Option<Vec<u8>>,
    /// Averaged probability of "changed" per pixel.
    pub p_changed: Vec<f32>,
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct EvalSummary {
    pub bcd: BinaryMetrics,
    pub scd: Option<ScdMetrics>,
    /// Land-cover kappa restricted to changed / unchanged reference pixels;
    /// meaningful only when full optical labels exist.
    pub clf_kc_changed: f64,
    pub clf_kc_unchanged: f64,
    pub n_samples: usize,
}

fn softmax_plane<E: Element>(tape: &Tape<E>, logits: TensorId, from_ch: usize) -> Vec<Vec<f32>> {
    let shape = tape.shape(logits);
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    let data = tape.data(logits);
    let k = c - from_ch;
    let mut planes = vec![vec![0.0f32; hw]; k];
    for p in 0..hw {
        let mut mx = f64::NEG_INFINITY;
        for ch in from_ch..c {
            mx = mx.max(data[ch * hw + p].to_f64());
        }
        let mut z = 0.0;
        for ch in from_ch..c {
            z += (data[ch * hw + p].to_f64() - mx).exp();
        }
        for ch in from_ch..c {
            planes[ch - from_ch][p] = ((data[ch * hw + p].to_f64() - mx).exp() / z) as f32;
        }
    }
    planes
}

/// Forward one sample at the requested scales and fuse the probabilities.
pub fn predict_sample<E: Element>(
    model: &ObjFormer<E>,
    sample: &SamplePair,
    opts: &EvalOptions,
) -> Result<SamplePrediction> {
    let (h, w) = (sample.height(), sample.width());
    let hw = h * w;
    let inst = sample
        .instance_map
        .as_ref()
        .ok_or_else(|| Error::Usage(format!("sample '{}' has no instance map", sample.id)))?;
    let scales = opts.active_scales();
    if scales.is_empty() {
        return Err(Error::Config("evaluation needs at least one scale".into()));
    }

    let mut p_changed_acc = vec![0.0f32; hw];
    let n_fg = model.config().n_classes_lcm;
    let scd = model.task() == Task::Scd;
    let mut lcm_acc = if scd { vec![vec![0.0f32; hw]; n_fg] } else { Vec::new() };

    let inst_stage = model.stage_maps(inst, h, w)?;
    for &scale in scales {
        let obj = sample.object_maps.get(&scale).ok_or_else(|| {
            Error::Config(format!("sample '{}' has no object map at scale {scale}", sample.id))
        })?;
        let obj_stage = model.stage_maps(obj, h, w)?;
        let mut tape = Tape::new();
        let xo = tape.constant(to_e::<E>(&sample.x_osm.to_chw_f32()), &[3, h, w])?;
        let xp = tape.constant(to_e::<E>(&sample.x_opt.to_chw_f32()), &[3, h, w])?;
        let bound = model.bind_frozen(&mut tape);
        if scd {
            let out = model.forward_scd(
                &mut tape,
                &bound,
                xo,
                xp,
                &inst_stage,
                &obj_stage,
                opts.fusion_stat,
            )?;
            let pb = softmax_plane(&tape, out.bcd, 0);
            for p in 0..hw {
                p_changed_acc[p] += pb[1][p];
            }
            let pl = softmax_plane(&tape, out.lcm_opt, 1);
            for (acc, plane) in lcm_acc.iter_mut().zip(&pl) {
                for p in 0..hw {
                    acc[p] += plane[p];
                }
            }
        } else {
            let logits = model.forward_bcd(
                &mut tape,
                &bound,
                xo,
                xp,
                &inst_stage,
                &obj_stage,
                opts.fusion_stat,
            )?;
            let pb = softmax_plane(&tape, logits, 0);
            for p in 0..hw {
                p_changed_acc[p] += pb[1][p];
            }
        }
    }
    let n = scales.len() as f32;
    for v in p_changed_acc.iter_mut() {
        *v /= n;
    }
    let bcd: Vec<u8> = p_changed_acc.iter().map(|&p| u8::from(p > 0.5)).collect();
    let lcm_opt = if scd {
        let mut out = vec![0u8; hw];
        for p in 0..hw {
            let mut best = 0usize;
            for c in 1..n_fg {
                if lcm_acc[c][p] > lcm_acc[best][p] {
                    best = c;
                }
            }
            out[p] = best as u8 + 1;
        }
        Some(out)
    } else {
        None
    };
    Ok(SamplePrediction { bcd, lcm_opt, p_changed: p_changed_acc })
}

struct PerSample {
    bin: ConfusionMatrix,
    scd: Option<ScdAccumulator>,
    clf_changed: ConfusionMatrix,
    clf_unchanged: ConfusionMatrix,
}

fn accumulate<E: Element>(
    model: &ObjFormer<E>,
    sample: &SamplePair,
    opts: &EvalOptions,
) -> Result<PerSample> {
    let n_fg = model.config().n_classes_lcm;
    let pred = predict_sample(model, sample, opts)?;
    let mut bin = ConfusionMatrix::new(vec!["unchanged".into(), "changed".into()]);
    for (p, (&pr, &rf)) in pred.bcd.iter().zip(sample.y_bcd.data()).enumerate() {
        let _ = p;
        if rf == BCD_BACKGROUND {
            bin.ignored += 1;
            continue;
        }
        bin.add(rf as usize, pr as usize);
    }
    let clf_names: Vec<String> = (1..=n_fg).map(|c| format!("class{c}")).collect();
    let mut clf_changed = ConfusionMatrix::new(clf_names.clone());
    let mut clf_unchanged = ConfusionMatrix::new(clf_names);
    let mut scd_acc = None;
    if let (Some(lcm), Some(full)) = (&pred.lcm_opt, &sample.y_opt_full) {
        let mut acc = ScdAccumulator::new(n_fg);
        acc.add_sample(
            lcm,
            full.data(),
            &pred.bcd,
            sample.y_bcd.data(),
            sample.y_osm.data(),
        )?;
        for p in 0..lcm.len() {
            let rf = sample.y_bcd.data()[p];
            if rf == BCD_BACKGROUND || full.data()[p] == 0 {
                continue;
            }
            let target = if rf == 1 { &mut clf_changed } else { &mut clf_unchanged };
            target.add(full.data()[p] as usize - 1, lcm[p] as usize - 1);
        }
        scd_acc = Some(acc);
    }
    Ok(PerSample { bin, scd: scd_acc, clf_changed, clf_unchanged })
}

/// Evaluate a set of samples with one global confusion matrix. Samples run
/// in parallel; partial matrices merge in index order so results are
/// bit-reproducible.
pub fn evaluate<E: Element>(
    model: &ObjFormer<E>,
    samples: &[SamplePair],
    opts: &EvalOptions,
) -> Result<EvalSummary> {
    if samples.is_empty() {
        return Err(Error::Usage("evaluation over an empty sample set".into()));
    }
    let partials: Vec<Result<PerSample>> =
        samples.par_iter().map(|s| accumulate(model, s, opts)).collect();
    let mut bin = ConfusionMatrix::new(vec!["unchanged".into(), "changed".into()]);
    let n_fg = model.config().n_classes_lcm;
    let clf_names: Vec<String> = (1..=n_fg).map(|c| format!("class{c}")).collect();
    let mut clf_changed = ConfusionMatrix::new(clf_names.clone());
    let mut clf_unchanged = ConfusionMatrix::new(clf_names);
    let mut scd: Option<ScdAccumulator> = None;
    for part in partials {
        let part = part?;
        bin.merge(&part.bin);
        clf_changed.merge(&part.clf_changed);
        clf_unchanged.merge(&part.clf_unchanged);
        if let Some(acc) = part.scd {
            match &mut scd {
                None => scd = Some(acc),
                Some(total) => total.merge(&acc),
            }
        }
    }
    Ok(EvalSummary {
        bcd: binary_metrics_from(&bin),
        scd: scd.as_ref().map(|a| a.finish()),
        clf_kc_changed: kappa(&clf_changed).0,
        clf_kc_unchanged: kappa(&clf_unchanged).0,
        n_samples: samples.len(),
    })
}

/// Write the prediction maps of one sample: binary change map, optional
/// land-cover map (raw ids and palette colors), and the 16-bit update
/// heat-map holding the per-pixel changed confidence.
pub fn write_prediction_maps(
    dir: &Path,
    sample: &SamplePair,
    pred: &SamplePrediction,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (w, h) = (sample.width(), sample.height());
    let bcd_vis: Vec<u8> = pred.bcd.iter().map(|&v| v * 255).collect();
    pnm::write_pgm8(&dir.join(format!("{}_bcd.pgm", sample.id)), w, h, &bcd_vis)?;
    if let Some(lcm) = &pred.lcm_opt {
        pnm::write_pgm8(&dir.join(format!("{}_lcm.pgm", sample.id)), w, h, lcm)?;
        let palette = CategoryPalette::default();
        let img = crate::data::LabelImage::new(w, h, lcm.clone())?;
        let rgb = palette.render(&img);
        pnm::write_ppm(&dir.join(format!("{}_lcm.ppm", sample.id)), w, h, rgb.data())?;
    }
    let heat: Vec<u16> =
        pred.p_changed.iter().map(|&p| (p.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    pnm::write_pgm16(&dir.join(format!("{}_heat.pgm", sample.id)), w, h, &heat)?;
    Ok(())
}

fn to_e<E: Element>(v: &[f32]) -> Vec<E> {
    v.iter().map(|&x| E::from_f64(x as f64)).collect()
}

//! Robustness sweeps: evaluation under simulated registration errors and the
//! token-fusion-statistic comparison.

use std::path::Path;

use super::eval::{evaluate, EvalOptions, EvalSummary};
use super::train::{write_csv, TrainOutcome, Trainer};
use super::RunConfig;
use crate::data::{apply_registration_offset, SamplePair, ShiftDirection};
use crate::error::Result;
use crate::net::ObjFormer;
use crate::tensor::ops::PoolFusion;
use crate::tensor::Element;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct RegSweepRow {
    pub offset: usize,
    /// `None` marks the average over the three directions.
    pub direction: Option<ShiftDirection>,
    pub summary: EvalSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegSweepReport {
    pub rows: Vec<RegSweepRow>,
}

impl RegSweepReport {
    pub fn averaged(&self, offset: usize) -> &RegSweepRow {
        self.rows
            .iter()
            .find(|r| r.offset == offset && r.direction.is_none())
            .expect("averaged row exists for every offset")
    }

    pub fn csv_header() -> &'static str {
        "offset,direction,rec,pre,f1,oa,kc"
    }

    pub fn to_csv_rows(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| {
                let b = &r.summary.bcd;
                format!(
                    "{},{},{},{},{},{},{}",
                    r.offset,
                    r.direction.map_or("average", |d| d.name()),
                    b.rec,
                    b.pre,
                    b.f1,
                    b.oa,
                    b.kc
                )
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, Self::csv_header(), &self.to_csv_rows())
    }
}

fn mean_summary(parts: &[EvalSummary]) -> EvalSummary {
    let n = parts.len() as f64;
    let mut out = parts[0];
    let mut rec = 0.0;
    let mut pre = 0.0;
    let mut f1 = 0.0;
    let mut oa = 0.0;
    let mut kc = 0.0;
    for p in parts {
        rec += p.bcd.rec / n;
        pre += p.bcd.pre / n;
        f1 += p.bcd.f1 / n;
        oa += p.bcd.oa / n;
        kc += p.bcd.kc / n;
    }
    out.bcd.rec = rec;
    out.bcd.pre = pre;
    out.bcd.f1 = f1;
    out.bcd.oa = oa;
    out.bcd.kc = kc;
    out
}

/// Evaluate a trained model at each registration offset along all three
/// directions. Per-direction rows are emitted for completeness together with
/// the per-offset average, which is the headline number. Offset 0 runs the
/// unmodified evaluation exactly once per direction, so the averaged row
/// equals the plain evaluation bit-for-bit.
pub fn registration_sweep<E: Element>(
    model: &ObjFormer<E>,
    samples: &[SamplePair],
    offsets: &[usize],
    opts: &EvalOptions,
) -> Result<RegSweepReport> {
    let mut rows = Vec::new();
    for &offset in offsets {
        let mut per_dir = Vec::new();
        for dir in ShiftDirection::ALL {
            let shifted: Vec<SamplePair> = samples
                .iter()
                .map(|s| apply_registration_offset(s, offset, dir))
                .collect::<Result<_>>()?;
            let summary = evaluate(model, &shifted, opts)?;
            per_dir.push(summary);
            rows.push(RegSweepRow { offset, direction: Some(dir), summary });
        }
        rows.push(RegSweepRow { offset, direction: None, summary: mean_summary(&per_dir) });
    }
    Ok(RegSweepReport { rows })
}

#[derive(Debug, Serialize)]
pub struct PoolingSweepRow {
    pub fusion: PoolFusion,
    pub outcome_best_metric: f64,
    pub final_eval: EvalSummary,
    pub run_dir: std::path::PathBuf,
}

/// Train one short run per token-fusion statistic and tabulate the final
/// metrics. No ordering is asserted anywhere; the table is the product.
pub fn pooling_sweep<E: Element>(base: &RunConfig) -> Result<Vec<PoolingSweepRow>> {
    let mut rows = Vec::new();
    for fusion in PoolFusion::ALL {
        let mut cfg = base.clone();
        cfg.fusion = fusion;
        cfg.out_dir = base.out_dir.join(format!("fusion_{}", fusion.name().replace('+', "_")));
        let mut trainer = Trainer::<E>::new(cfg)?;
        let outcome: TrainOutcome = trainer.run()?;
        rows.push(PoolingSweepRow {
            fusion,
            outcome_best_metric: outcome.best_metric,
            final_eval: outcome.final_eval,
            run_dir: outcome.run_dir,
        });
    }
    Ok(rows)
}

pub fn pooling_rows_csv(rows: &[PoolingSweepRow]) -> (String, Vec<String>) {
    let header = "fusion,best_metric,rec,pre,f1,oa,kc,tr_kc".to_string();
    let body = rows
        .iter()
        .map(|r| {
            let b = &r.final_eval.bcd;
            format!(
                "{},{},{},{},{},{},{},{}",
                r.fusion.name(),
                r.outcome_best_metric,
                b.rec,
                b.pre,
                b.f1,
                b.oa,
                b.kc,
                r.final_eval.scd.map_or(f64::NAN, |s| s.tr_kc)
            )
        })
        .collect();
    (header, body)
}

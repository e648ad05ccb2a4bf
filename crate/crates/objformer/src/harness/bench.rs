//! Attention complexity benchmark: closed-form MAC counts across modes plus
//! optional measured wall-clock of the actual kernels. The vanilla
//! measurement reuses the object-guided path with one region per pixel,
//! which is exactly the degenerate case.

use std::time::Instant;

use crate::attention::{
    count_attention_macs, object_self_attention, AttentionMode, SelfAttentionParams,
};
use crate::error::Result;
use crate::segmentation::RegionMap;
use crate::tensor::ops::PoolFusion;
use crate::tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub heads: usize,
    pub n_tokens: usize,
    pub sr_ratio: usize,
    pub vanilla_macs: u64,
    pub spatial_reduction_macs: u64,
    pub object_macs: u64,
    pub vanilla_ms: Option<f64>,
    pub object_ms: Option<f64>,
}

impl BenchRow {
    pub fn mac_ratio(&self) -> f64 {
        self.vanilla_macs as f64 / self.object_macs as f64
    }

    pub fn measured_ratio(&self) -> Option<f64> {
        match (self.vanilla_ms, self.object_ms) {
            (Some(v), Some(o)) if o > 0.0 => Some(v / o),
            _ => None,
        }
    }

    pub fn csv_header() -> &'static str {
        "h,w,c,heads,n_tokens,sr_ratio,vanilla_macs,spatial_reduction_macs,object_macs,mac_ratio,vanilla_ms,object_ms,measured_ratio"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{:.3},{},{},{}",
            self.h,
            self.w,
            self.c,
            self.heads,
            self.n_tokens,
            self.sr_ratio,
            self.vanilla_macs,
            self.spatial_reduction_macs,
            self.object_macs,
            self.mac_ratio(),
            self.vanilla_ms.map_or(String::new(), |v| format!("{v:.2}")),
            self.object_ms.map_or(String::new(), |v| format!("{v:.2}")),
            self.measured_ratio().map_or(String::new(), |v| format!("{v:.2}")),
        )
    }
}

fn grid_regions(h: usize, w: usize, n: usize) -> RegionMap {
    // roughly n rectangular regions
    let rows = ((n as f64).sqrt().round() as usize).clamp(1, h);
    let cols = n.div_ceil(rows).clamp(1, w);
    let raw: Vec<u32> = (0..h * w)
        .map(|p| {
            let (y, x) = (p / w, p % w);
            ((y * rows / h) * cols + x * cols / w) as u32
        })
        .collect();
    RegionMap::from_raw(&raw, w, h).unwrap()
}

fn pixel_regions(h: usize, w: usize) -> RegionMap {
    RegionMap::from_raw(&(0..(h * w) as u32).collect::<Vec<_>>(), w, h).unwrap()
}

fn time_attention(h: usize, w: usize, c: usize, heads: usize, map: &RegionMap) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let feat: Vec<f32> = (0..c * h * w).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let mut tape = Tape::<f32>::new();
    let f = tape.constant(feat, &[c, h, w])?;
    let mk = |tape: &mut Tape<f32>, rng: &mut ChaCha8Rng, ic: usize, oc: usize| {
        let data: Vec<f32> = (0..ic * oc).map(|_| rng.gen_range(-0.1f32..0.1)).collect();
        tape.constant(data, &[ic, oc]).unwrap()
    };
    let zeros = |tape: &mut Tape<f32>, n: usize| tape.constant(vec![0.0; n], &[n]).unwrap();
    let params = SelfAttentionParams {
        wq: mk(&mut tape, &mut rng, c, c),
        bq: zeros(&mut tape, c),
        wk: mk(&mut tape, &mut rng, c, c),
        bk: zeros(&mut tape, c),
        wv: mk(&mut tape, &mut rng, c, c),
        bv: zeros(&mut tape, c),
        wo: mk(&mut tape, &mut rng, c, c),
        bo: zeros(&mut tape, c),
        heads,
    };
    let start = Instant::now();
    let out = object_self_attention(&mut tape, f, map, &params, PoolFusion::Mean)?;
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    std::hint::black_box(tape.data(out));
    Ok(elapsed)
}

/// Cost one self-attention block per (resolution, channels, heads) cell and
/// token count. With `measure`, also time the real kernels; the vanilla
/// measurement is skipped above `measure_pixel_cap` pixels to bound the
/// score-matrix allocation.
pub fn bench_attention(
    dims: &[(usize, usize, usize, usize)],
    token_counts: &[usize],
    sr_ratio: usize,
    measure: bool,
    measure_pixel_cap: usize,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &(h, w, c, heads) in dims {
        for &n in token_counts {
            let n = n.min(h * w);
            let vanilla = count_attention_macs(AttentionMode::Vanilla, h, w, c, heads, 0);
            let sr = count_attention_macs(AttentionMode::SpatialReduction(sr_ratio), h, w, c, heads, 0);
            let object = count_attention_macs(AttentionMode::ObjectGuided, h, w, c, heads, n);
            let (mut vanilla_ms, mut object_ms) = (None, None);
            if measure {
                let map = grid_regions(h, w, n);
                object_ms = Some(time_attention(h, w, c, heads, &map)?);
                if h * w <= measure_pixel_cap {
                    let pmap = pixel_regions(h, w);
                    vanilla_ms = Some(time_attention(h, w, c, heads, &pmap)?);
                }
            }
            rows.push(BenchRow {
                h,
                w,
                c,
                heads,
                n_tokens: n,
                sr_ratio,
                vanilla_macs: vanilla.total(),
                spatial_reduction_macs: sr.total(),
                object_macs: object.total(),
                vanilla_ms,
                object_ms,
            });
        }
    }
    Ok(rows)
}


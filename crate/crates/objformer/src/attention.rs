//! Object-guided attention: pool pixel features into per-region tokens, run
//! multi-head attention over the tokens, and scatter the results back onto
//! the raster grid. The score matrix is `N x N` over regions, never
//! `(H*W) x (H*W)` over pixels.

use crate::error::{Error, Result};
use crate::segmentation::RegionMap;
use crate::tensor::ops::PoolFusion;
use crate::tensor::{Element, Tape, Tensor, TensorId};
use rand::Rng;

/// Per-region tokens pooled from a feature map.
pub struct TokenSet {
    /// `[N, C]` token matrix on the tape.
    pub tokens: TensorId,
    /// Region label of each token; identity because labels are contiguous.
    pub object_of_token: Vec<u32>,
    /// Spatial extent of the feature map the tokens came from.
    pub source_shape: (usize, usize),
}

/// Fuse all pixels inside each region of `feat` (`[C, H, W]`) into one token.
pub fn pool_tokens<E: Element>(
    tape: &mut Tape<E>,
    feat: TensorId,
    map: &RegionMap,
    fusion: PoolFusion,
) -> Result<TokenSet> {
    let shape = tape.shape(feat);
    if shape.len() != 3 || shape[1] != map.height() || shape[2] != map.width() {
        return Err(Error::shape(
            "pool_tokens",
            format!(
                "feature map {shape:?} does not match region map {}x{}",
                map.height(),
                map.width()
            ),
        ));
    }
    let (h, w) = (shape[1], shape[2]);
    let tokens = tape.pool_regions(feat, map.labels_arc(), map.n_regions(), fusion)?;
    Ok(TokenSet {
        tokens,
        object_of_token: (0..map.n_regions() as u32).collect(),
        source_shape: (h, w),
    })
}

/// Scatter `[N, C]` tokens back to a `[C, H, W]` map: every pixel takes the
/// token of its region.
pub fn reassign<E: Element>(
    tape: &mut Tape<E>,
    tokens: TensorId,
    map: &RegionMap,
) -> Result<TensorId> {
    let n = tape.shape(tokens)[0];
    if n != map.n_regions() {
        return Err(Error::shape(
            "reassign",
            format!("{n} tokens for {} regions", map.n_regions()),
        ));
    }
    tape.reassign_regions(tokens, map.labels_arc(), map.height(), map.width())
}

// ── multi-head attention over tokens ───────────────────────────────────────

/// Tape handles of one self-attention block's projections.
#[derive(Debug, Clone, Copy)]
pub struct SelfAttentionParams {
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
    pub heads: usize,
}

/// Tape handles of one cross-attention block. Queries and one value path come
/// from the map branch, keys and the other value path from the optical
/// branch; each refined output has its own projection.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttentionParams {
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv_map: TensorId,
    pub bv_map: TensorId,
    pub wv_opt: TensorId,
    pub bv_opt: TensorId,
    pub wo_map: TensorId,
    pub bo_map: TensorId,
    pub wo_opt: TensorId,
    pub bo_opt: TensorId,
    pub heads: usize,
}

/// Attention matrices recorded during a forward pass, one per head.
pub struct AttentionTrace {
    pub per_head: Vec<TensorId>,
}

fn check_heads(op: &'static str, dim: usize, heads: usize) -> Result<usize> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "{op}: attention dim {dim} not divisible by {heads} heads"
        )));
    }
    Ok(dim / heads)
}

/// Scaled dot-product attention per head: softmax(Q Kᵀ / sqrt(d_h)) V.
/// Returns the concatenated head outputs and the per-head attention maps.
fn heads_attend<E: Element>(
    tape: &mut Tape<E>,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    heads: usize,
) -> Result<(TensorId, Vec<TensorId>)> {
    let d = tape.shape(q)[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_axis(q, 1, h * dh, dh)?;
        let kh = tape.slice_axis(k, 1, h * dh, dh)?;
        let vh = tape.slice_axis(v, 1, h * dh, dh)?;
        let kt = tape.transpose2(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax(scores, 1)?;
        maps.push(attn);
        ctx.push(tape.matmul(attn, vh)?);
    }
    let merged = if ctx.len() == 1 { ctx[0] } else { tape.concat(&ctx, 1)? };
    Ok((merged, maps))
}

/// Self-attention over object tokens, scattered back to the grid. Output has
/// the channel count of `wo`'s second axis and is constant within each region.
pub fn object_self_attention<E: Element>(
    tape: &mut Tape<E>,
    feat: TensorId,
    map: &RegionMap,
    params: &SelfAttentionParams,
    fusion: PoolFusion,
) -> Result<TensorId> {
    Ok(object_self_attention_traced(tape, feat, map, params, fusion)?.0)
}

pub fn object_self_attention_traced<E: Element>(
    tape: &mut Tape<E>,
    feat: TensorId,
    map: &RegionMap,
    params: &SelfAttentionParams,
    fusion: PoolFusion,
) -> Result<(TensorId, AttentionTrace)> {
    let set = pool_tokens(tape, feat, map, fusion)?;
    let d = tape.shape(params.wq)[1];
    check_heads("object_self_attention", d, params.heads)?;
    let q = tape.linear(set.tokens, params.wq, Some(params.bq))?;
    let k = tape.linear(set.tokens, params.wk, Some(params.bk))?;
    let v = tape.linear(set.tokens, params.wv, Some(params.bv))?;
    let (ctx, maps) = heads_attend(tape, q, k, v, params.heads)?;
    let out = tape.linear(ctx, params.wo, Some(params.bo))?;
    let grid = reassign(tape, out, map)?;
    Ok((grid, AttentionTrace { per_head: maps }))
}

/// Heterogeneous cross-attention between map-branch instance tokens and
/// optical-branch object tokens.
///
/// One score matrix `A = softmax(Q Kᵀ / sqrt(d_h))` of shape
/// `N_ins x N_obj` weights the optical values into the refined map feature;
/// the transposed score, re-normalized per row, weights the map values into
/// the refined optical feature. Both refined features are scattered back
/// through their own guiding maps.
pub fn object_cross_attention<E: Element>(
    tape: &mut Tape<E>,
    feat_map: TensorId,
    instance_map: &RegionMap,
    feat_opt: TensorId,
    object_map: &RegionMap,
    params: &CrossAttentionParams,
    fusion: PoolFusion,
) -> Result<(TensorId, TensorId)> {
    let (m, o, _) =
        object_cross_attention_traced(tape, feat_map, instance_map, feat_opt, object_map, params, fusion)?;
    Ok((m, o))
}

pub fn object_cross_attention_traced<E: Element>(
    tape: &mut Tape<E>,
    feat_map: TensorId,
    instance_map: &RegionMap,
    feat_opt: TensorId,
    object_map: &RegionMap,
    params: &CrossAttentionParams,
    fusion: PoolFusion,
) -> Result<(TensorId, TensorId, AttentionTrace)> {
    if instance_map.height() != object_map.height() || instance_map.width() != object_map.width() {
        return Err(Error::shape(
            "object_cross_attention",
            "guiding maps must share the feature resolution".to_string(),
        ));
    }
    let d = tape.shape(params.wq)[1];
    let dh = check_heads("object_cross_attention", d, params.heads)?;
    let scale = 1.0 / (dh as f64).sqrt();

    let map_tokens = pool_tokens(tape, feat_map, instance_map, fusion)?;
    let opt_tokens = pool_tokens(tape, feat_opt, object_map, fusion)?;

    let q = tape.linear(map_tokens.tokens, params.wq, Some(params.bq))?;
    let k = tape.linear(opt_tokens.tokens, params.wk, Some(params.bk))?;
    let v_map = tape.linear(map_tokens.tokens, params.wv_map, Some(params.bv_map))?;
    let v_opt = tape.linear(opt_tokens.tokens, params.wv_opt, Some(params.bv_opt))?;

    let mut ctx_map = Vec::with_capacity(params.heads);
    let mut ctx_opt = Vec::with_capacity(params.heads);
    let mut traces = Vec::with_capacity(2 * params.heads);
    for h in 0..params.heads {
        let qh = tape.slice_axis(q, 1, h * dh, dh)?;
        let kh = tape.slice_axis(k, 1, h * dh, dh)?;
        let vmh = tape.slice_axis(v_map, 1, h * dh, dh)?;
        let voh = tape.slice_axis(v_opt, 1, h * dh, dh)?;

        let kt = tape.transpose2(kh)?;
        let s = tape.matmul(qh, kt)?;
        let s = tape.scale(s, scale)?;
        let attn = tape.softmax(s, 1)?; // N_ins x N_obj
        traces.push(attn);
        ctx_map.push(tape.matmul(attn, voh)?);

        let qt = tape.transpose2(qh)?;
        let s2 = tape.matmul(kh, qt)?;
        let s2 = tape.scale(s2, scale)?;
        let attn2 = tape.softmax(s2, 1)?; // N_obj x N_ins
        traces.push(attn2);
        ctx_opt.push(tape.matmul(attn2, vmh)?);
    }
    let merged_map = if ctx_map.len() == 1 { ctx_map[0] } else { tape.concat(&ctx_map, 1)? };
    let merged_opt = if ctx_opt.len() == 1 { ctx_opt[0] } else { tape.concat(&ctx_opt, 1)? };
    let out_map = tape.linear(merged_map, params.wo_map, Some(params.bo_map))?;
    let out_opt = tape.linear(merged_opt, params.wo_opt, Some(params.bo_opt))?;
    let refined_map = reassign(tape, out_map, instance_map)?;
    let refined_opt = reassign(tape, out_opt, object_map)?;
    Ok((refined_map, refined_opt, AttentionTrace { per_head: traces }))
}

// ── owned weights for standalone use ───────────────────────────────────────

/// Owned projection weights of a self-attention block.
#[derive(Debug, Clone)]
pub struct SelfAttentionWeights<E: Element> {
    pub wq: Tensor<E>,
    pub bq: Tensor<E>,
    pub wk: Tensor<E>,
    pub bk: Tensor<E>,
    pub wv: Tensor<E>,
    pub bv: Tensor<E>,
    pub wo: Tensor<E>,
    pub bo: Tensor<E>,
    pub heads: usize,
}

impl<E: Element> SelfAttentionWeights<E> {
    pub fn random(c: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / c as f64).sqrt();
        SelfAttentionWeights {
            wq: Tensor::randn(&[c, c], std, rng),
            bq: Tensor::zeros(&[c]),
            wk: Tensor::randn(&[c, c], std, rng),
            bk: Tensor::zeros(&[c]),
            wv: Tensor::randn(&[c, c], std, rng),
            bv: Tensor::zeros(&[c]),
            wo: Tensor::randn(&[c, c], std, rng),
            bo: Tensor::zeros(&[c]),
            heads,
        }
    }

    pub fn bind(&self, tape: &mut Tape<E>) -> SelfAttentionParams {
        SelfAttentionParams {
            wq: tape.bind(&self.wq),
            bq: tape.bind(&self.bq),
            wk: tape.bind(&self.wk),
            bk: tape.bind(&self.bk),
            wv: tape.bind(&self.wv),
            bv: tape.bind(&self.bv),
            wo: tape.bind(&self.wo),
            bo: tape.bind(&self.bo),
            heads: self.heads,
        }
    }
}

// ── complexity accounting ──────────────────────────────────────────────────

/// Attention flavor being costed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Pixel tokens: the score matrix is (H*W)².
    Vanilla,
    /// Pixel queries against keys/values spatially reduced by R².
    SpatialReduction(usize),
    /// Region tokens from the guiding map.
    ObjectGuided,
}

/// Multiply-accumulate counts split by term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct MacCount {
    pub projections: u64,
    pub scores: u64,
    pub values: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.projections + self.scores + self.values
    }
}

impl std::ops::Add for MacCount {
    type Output = MacCount;
    fn add(self, rhs: MacCount) -> MacCount {
        MacCount {
            projections: self.projections + rhs.projections,
            scores: self.scores + rhs.scores,
            values: self.values + rhs.values,
        }
    }
}

/// Closed-form MAC count of one multi-head self-attention block at feature
/// resolution `h_l` x `w_l` with `c` channels. `n_tokens` applies to the
/// object-guided mode; with `n_tokens = h_l * w_l` it degenerates to the
/// vanilla count.
pub fn count_attention_macs(
    mode: AttentionMode,
    h_l: usize,
    w_l: usize,
    c: usize,
    heads: usize,
    n_tokens: usize,
) -> MacCount {
    let _ = heads; // head splitting does not change the MAC totals
    let hw = (h_l * w_l) as u64;
    let c = c as u64;
    match mode {
        AttentionMode::Vanilla => MacCount {
            projections: 4 * hw * c * c,
            scores: hw * hw * c,
            values: hw * hw * c,
        },
        AttentionMode::ObjectGuided => {
            let n = n_tokens as u64;
            MacCount { projections: 4 * n * c * c, scores: n * n * c, values: n * n * c }
        }
        AttentionMode::SpatialReduction(r) => {
            let r = r.max(1) as u64;
            let nkv = ((h_l as u64) / r).max(1) * ((w_l as u64) / r).max(1);
            MacCount {
                // Q and O at full length, K/V reduced, plus the reduction conv
                projections: 2 * hw * c * c + 2 * nkv * c * c + nkv * c * c * r * r,
                scores: hw * nkv * c,
                values: hw * nkv * c,
            }
        }
    }
}

/// Closed-form MAC count of one object-guided cross-attention block with the
/// two-output design: both score directions and both value paths.
#[allow(clippy::too_many_arguments)]
pub fn count_cross_attention_macs(
    mode: AttentionMode,
    h_l: usize,
    w_l: usize,
    c_map: usize,
    c_opt: usize,
    d: usize,
    n_ins: usize,
    n_obj: usize,
) -> MacCount {
    let hw = h_l * w_l;
    let (n_ins, n_obj, extra) = match mode {
        AttentionMode::Vanilla => (hw as u64, hw as u64, 0u64),
        AttentionMode::ObjectGuided => (n_ins as u64, n_obj as u64, 0),
        AttentionMode::SpatialReduction(r) => {
            let r = r.max(1) as u64;
            let nkv = ((h_l as u64) / r).max(1) * ((w_l as u64) / r).max(1);
            // reduction convs on both token streams
            (hw as u64, nkv, nkv * (c_map * c_map + c_opt * c_opt) as u64 * r * r)
        }
    };
    let (c_map, c_opt, d) = (c_map as u64, c_opt as u64, d as u64);
    MacCount {
        projections: n_ins * c_map * d      // Q
            + n_obj * c_opt * d             // K
            + n_ins * c_map * d             // V_map
            + n_obj * c_opt * d             // V_opt
            + n_ins * d * c_map             // out projection, map side
            + n_obj * d * c_opt             // out projection, optical side
            + extra,
        scores: 2 * n_ins * n_obj * d,
        values: 2 * n_ins * n_obj * d,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_grads;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Three-nested-loop multi-head attention in plain f64, sharing no code
    /// with the tape ops.
    struct NaiveAttention {
        heads: usize,
    }

    impl NaiveAttention {
        fn project(x: &[Vec<f64>], w: &[f64], b: &[f64], d: usize) -> Vec<Vec<f64>> {
            x.iter()
                .map(|row| {
                    (0..d)
                        .map(|j| {
                            b[j] + row.iter().enumerate().map(|(i, v)| v * w[i * d + j]).sum::<f64>()
                        })
                        .collect()
                })
                .collect()
        }

        fn attend(
            &self,
            q: &[Vec<f64>],
            k: &[Vec<f64>],
            v: &[Vec<f64>],
        ) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
            let d = q[0].len();
            let dh = d / self.heads;
            let mut out = vec![vec![0.0; d]; q.len()];
            let mut attns = Vec::new();
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                let mut attn = vec![vec![0.0; k.len()]; q.len()];
                for (i, qi) in q.iter().enumerate() {
                    let mut scores = Vec::with_capacity(k.len());
                    for kj in k {
                        let mut s = 0.0;
                        for c in cols.clone() {
                            s += qi[c] * kj[c];
                        }
                        scores.push(s / (dh as f64).sqrt());
                    }
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for (j, e) in exps.iter().enumerate() {
                        attn[i][j] = e / z;
                    }
                    for c in cols.clone() {
                        out[i][c] = (0..k.len()).map(|j| attn[i][j] * v[j][c]).sum();
                    }
                }
                attns.push(attn);
            }
            (out, attns)
        }
    }

    fn tokens_of(feat: &[f64], c: usize, labels: &[u32], n: usize) -> Vec<Vec<f64>> {
        // mean pooling oracle
        let hw = labels.len();
        let mut sums = vec![vec![0.0; c]; n];
        let mut cnt = vec![0usize; n];
        for (p, &l) in labels.iter().enumerate() {
            cnt[l as usize] += 1;
            for ch in 0..c {
                sums[l as usize][ch] += feat[ch * hw + p];
            }
        }
        for (row, &k) in sums.iter_mut().zip(&cnt) {
            for v in row.iter_mut() {
                *v /= k as f64;
            }
        }
        sums
    }

    #[test]
    fn single_object_attention_is_projection_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = 4;
        let map = RegionMap::new(vec![0; 9], 3, 3).unwrap();
        let w = SelfAttentionWeights::<f64>::random(c, 2, &mut rng);
        let mut tape = Tape::new();
        let feat = tape.constant(randv(&mut rng, c * 9), &[c, 3, 3]).unwrap();
        let params = w.bind(&mut tape);
        let (out, trace) =
            object_self_attention_traced(&mut tape, feat, &map, &params, PoolFusion::Mean).unwrap();
        for attn in &trace.per_head {
            assert_eq!(tape.data(*attn), &[1.0]); // softmax over one element
        }
        // output constant over the grid and equal to wo.(v token) + bo
        let od = tape.data(out);
        let naive = NaiveAttention { heads: 2 };
        let toks = tokens_of(tape.data(feat), c, map.labels(), 1);
        let v = NaiveAttention::project(&toks, w.wv.data(), w.bv.data(), c);
        let o = NaiveAttention::project(&v, w.wo.data(), w.bo.data(), c);
        let _ = naive;
        for ch in 0..c {
            for p in 0..9 {
                assert!((od[ch * 9 + p] - o[0][ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_tokens_attend_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = 4;
        // two regions with identical content
        let map = RegionMap::new(vec![0, 0, 1, 1], 2, 2).unwrap();
        let mut feat = vec![0.0; c * 4];
        for ch in 0..c {
            let v = rng.gen_range(-1.0..1.0);
            for p in 0..4 {
                feat[ch * 4 + p] = v;
            }
        }
        let w = SelfAttentionWeights::<f64>::random(c, 2, &mut rng);
        let mut tape = Tape::new();
        let f = tape.constant(feat, &[c, 2, 2]).unwrap();
        let params = w.bind(&mut tape);
        let (_, trace) =
            object_self_attention_traced(&mut tape, f, &map, &params, PoolFusion::Mean).unwrap();
        for attn in &trace.per_head {
            for &v in tape.data(*attn) {
                assert!((v - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn self_attention_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 6;
        let heads = 3;
        let labels = vec![0u32, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3];
        let map = RegionMap::new(labels.clone(), 4, 3).unwrap();
        let feat = randv(&mut rng, c * 12);
        let w = SelfAttentionWeights::<f64>::random(c, heads, &mut rng);

        let mut tape = Tape::new();
        let f = tape.constant(feat.clone(), &[c, 3, 4]).unwrap();
        let params = w.bind(&mut tape);
        let (out, trace) =
            object_self_attention_traced(&mut tape, f, &map, &params, PoolFusion::Mean).unwrap();

        let naive = NaiveAttention { heads };
        let toks = tokens_of(&feat, c, &labels, 4);
        let q = NaiveAttention::project(&toks, w.wq.data(), w.bq.data(), c);
        let k = NaiveAttention::project(&toks, w.wk.data(), w.bk.data(), c);
        let v = NaiveAttention::project(&toks, w.wv.data(), w.bv.data(), c);
        let (ctx, attns) = naive.attend(&q, &k, &v);
        let o = NaiveAttention::project(&ctx, w.wo.data(), w.bo.data(), c);

        // attention maps match and rows sum to one
        for (h, attn) in trace.per_head.iter().enumerate() {
            let got = tape.data(*attn);
            for i in 0..4 {
                let mut row_sum = 0.0;
                for j in 0..4 {
                    assert!((got[i * 4 + j] - attns[h][i][j]).abs() <= 1e-9);
                    row_sum += got[i * 4 + j];
                }
                assert!((row_sum - 1.0).abs() <= 1e-6);
            }
        }
        // reassigned output matches token values
        let od = tape.data(out);
        for (p, &l) in labels.iter().enumerate() {
            for ch in 0..c {
                assert!(
                    (od[ch * 12 + p] - o[l as usize][ch]).abs() <= 1e-6,
                    "mismatch at pixel {p} channel {ch}"
                );
            }
        }
    }

    #[test]
    fn cross_attention_single_pair_broadcasts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (cm, co, d) = (3, 4, 4);
        let inst = RegionMap::new(vec![0; 4], 2, 2).unwrap();
        let obj = RegionMap::new(vec![0; 4], 2, 2).unwrap();
        let mut tape = Tape::<f64>::new();
        let fm = tape.constant(randv(&mut rng, cm * 4), &[cm, 2, 2]).unwrap();
        let fo = tape.constant(randv(&mut rng, co * 4), &[co, 2, 2]).unwrap();
        let params = random_cross_params(&mut tape, cm, co, d, 2, &mut rng);
        let (rm, ro, trace) = object_cross_attention_traced(
            &mut tape,
            fm,
            &inst,
            fo,
            &obj,
            &params,
            PoolFusion::Mean,
        )
        .unwrap();
        for attn in &trace.per_head {
            assert_eq!(tape.data(*attn), &[1.0]);
        }
        assert_eq!(tape.shape(rm), &[cm, 2, 2]);
        assert_eq!(tape.shape(ro), &[co, 2, 2]);
        // both outputs constant across the grid
        for ch in 0..cm {
            let d0 = tape.data(rm)[ch * 4];
            for p in 1..4 {
                assert_eq!(tape.data(rm)[ch * 4 + p], d0);
            }
        }
    }

    fn random_cross_params<E: Element>(
        tape: &mut Tape<E>,
        c_map: usize,
        c_opt: usize,
        d: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> CrossAttentionParams {
        let mut t = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data: Vec<E> =
                (0..n).map(|_| E::from_f64(rng.gen_range(-0.5..0.5))).collect();
            tape.constant(data, shape).unwrap()
        };
        CrossAttentionParams {
            wq: t(&[c_map, d]),
            bq: t(&[d]),
            wk: t(&[c_opt, d]),
            bk: t(&[d]),
            wv_map: t(&[c_map, d]),
            bv_map: t(&[d]),
            wv_opt: t(&[c_opt, d]),
            bv_opt: t(&[d]),
            wo_map: t(&[d, c_map]),
            bo_map: t(&[c_map]),
            wo_opt: t(&[d, c_opt]),
            bo_opt: t(&[c_opt]),
            heads,
        }
    }

    #[test]
    fn cross_attention_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (cm, co, d, heads) = (3, 5, 4, 2);
        // 2 instances x 3 objects on a 2x3 grid
        let inst = RegionMap::new(vec![0, 0, 0, 1, 1, 1], 3, 2).unwrap();
        let obj = RegionMap::new(vec![0, 1, 2, 0, 1, 2], 3, 2).unwrap();
        let fm_data = randv(&mut rng, cm * 6);
        let fo_data = randv(&mut rng, co * 6);

        let mut tape = Tape::<f64>::new();
        let fm = tape.constant(fm_data.clone(), &[cm, 2, 3]).unwrap();
        let fo = tape.constant(fo_data.clone(), &[co, 2, 3]).unwrap();
        let params = random_cross_params(&mut tape, cm, co, d, heads, &mut rng);
        let (rm, ro, trace) = object_cross_attention_traced(
            &mut tape,
            fm,
            &inst,
            fo,
            &obj,
            &params,
            PoolFusion::Mean,
        )
        .unwrap();

        // naive recomputation
        let tm = tokens_of(&fm_data, cm, inst.labels(), 2);
        let to = tokens_of(&fo_data, co, obj.labels(), 3);
        let g = |id: TensorId| tape.data(id).to_vec();
        let q = NaiveAttention::project(&tm, &g(params.wq), &g(params.bq), d);
        let k = NaiveAttention::project(&to, &g(params.wk), &g(params.bk), d);
        let vm = NaiveAttention::project(&tm, &g(params.wv_map), &g(params.bv_map), d);
        let vo = NaiveAttention::project(&to, &g(params.wv_opt), &g(params.bv_opt), d);
        let naive = NaiveAttention { heads };
        let (ctx_m, a1) = naive.attend(&q, &k, &vo);
        let (ctx_o, a2) = naive.attend(&k, &q, &vm);
        let om = NaiveAttention::project(&ctx_m, &g(params.wo_map), &g(params.bo_map), cm);
        let oo = NaiveAttention::project(&ctx_o, &g(params.wo_opt), &g(params.bo_opt), co);

        // traces alternate A, A2 per head
        for h in 0..heads {
            let a = tape.data(trace.per_head[2 * h]);
            let b = tape.data(trace.per_head[2 * h + 1]);
            for i in 0..2 {
                for j in 0..3 {
                    assert!((a[i * 3 + j] - a1[h][i][j]).abs() <= 1e-9);
                }
            }
            for i in 0..3 {
                let row: f64 = (0..2).map(|j| b[i * 2 + j]).sum();
                assert!((row - 1.0).abs() <= 1e-6);
                for j in 0..2 {
                    assert!((b[i * 2 + j] - a2[h][i][j]).abs() <= 1e-9);
                }
            }
        }
        for (p, &l) in inst.labels().iter().enumerate() {
            for ch in 0..cm {
                assert!((tape.data(rm)[ch * 6 + p] - om[l as usize][ch]).abs() <= 1e-6);
            }
        }
        for (p, &l) in obj.labels().iter().enumerate() {
            for ch in 0..co {
                assert!((tape.data(ro)[ch * 6 + p] - oo[l as usize][ch]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn cross_attention_uniform_when_keys_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (cm, co, d) = (2, 3, 4);
        let inst = RegionMap::new(vec![0, 1, 0, 1], 2, 2).unwrap();
        let obj = RegionMap::new(vec![0, 0, 1, 1], 2, 2).unwrap();
        // optical features constant everywhere: identical K rows
        let mut tape = Tape::<f64>::new();
        let fm = tape.constant(randv(&mut rng, cm * 4), &[cm, 2, 2]).unwrap();
        let fo = tape.constant(vec![0.7; co * 4], &[co, 2, 2]).unwrap();
        let params = random_cross_params(&mut tape, cm, co, d, 2, &mut rng);
        let (_, _, trace) = object_cross_attention_traced(
            &mut tape,
            fm,
            &inst,
            fo,
            &obj,
            &params,
            PoolFusion::Mean,
        )
        .unwrap();
        // A rows must be uniform 1/N_obj
        for h in 0..2 {
            let a = tape.data(trace.per_head[2 * h]);
            for &v in a {
                assert!((v - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_path_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = 4;
        let labels = vec![0u32, 1, 1, 2, 2, 0, 0, 1, 2];
        let map = RegionMap::new(labels, 3, 3).unwrap();
        let sizes: Vec<(Vec<usize>, Vec<f64>)> = vec![
            (vec![c, 3, 3], randv(&mut rng, c * 9)),
            (vec![c, c], randv(&mut rng, c * c)),
            (vec![c], randv(&mut rng, c)),
            (vec![c, c], randv(&mut rng, c * c)),
            (vec![c], randv(&mut rng, c)),
            (vec![c, c], randv(&mut rng, c * c)),
            (vec![c], randv(&mut rng, c)),
            (vec![c, c], randv(&mut rng, c * c)),
            (vec![c], randv(&mut rng, c)),
        ];
        let err = check_grads(&sizes, move |t, ids| {
            let params = SelfAttentionParams {
                wq: ids[1],
                bq: ids[2],
                wk: ids[3],
                bk: ids[4],
                wv: ids[5],
                bv: ids[6],
                wo: ids[7],
                bo: ids[8],
                heads: 2,
            };
            object_self_attention(t, ids[0], &map, &params, PoolFusion::Mean)
        })
        .unwrap();
        assert!(err <= 1e-4, "attention path rel err {err}");
    }

    #[test]
    fn permuting_labels_and_tokens_is_invisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = 3;
        let labels = vec![0u32, 1, 2, 1, 0, 2];
        let perm = [2u32, 0, 1]; // new label of old region i
        let permuted: Vec<u32> = labels.iter().map(|&l| perm[l as usize]).collect();
        let tokens: Vec<f64> = randv(&mut rng, 3 * c);
        let mut permuted_tokens = vec![0.0; 3 * c];
        for old in 0..3 {
            for ch in 0..c {
                permuted_tokens[perm[old] as usize * c + ch] = tokens[old * c + ch];
            }
        }
        let mut tape = Tape::<f64>::new();
        let t1 = tape.constant(tokens, &[3, c]).unwrap();
        let t2 = tape.constant(permuted_tokens, &[3, c]).unwrap();
        let m1 = RegionMap::new(labels, 3, 2).unwrap();
        let m2 = RegionMap::new(permuted, 3, 2).unwrap();
        let r1 = reassign(&mut tape, t1, &m1).unwrap();
        let r2 = reassign(&mut tape, t2, &m2).unwrap();
        assert_eq!(tape.data(r1), tape.data(r2));
    }

    #[test]
    fn reassign_rejects_count_mismatch() {
        let mut tape = Tape::<f64>::new();
        let t = tape.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let map = RegionMap::new(vec![0, 1, 2, 2], 2, 2).unwrap();
        assert!(reassign(&mut tape, t, &map).is_err());
    }

    #[test]
    fn object_mode_with_all_pixels_degenerates_to_vanilla() {
        let v = count_attention_macs(AttentionMode::Vanilla, 16, 16, 32, 4, 0);
        let o = count_attention_macs(AttentionMode::ObjectGuided, 16, 16, 32, 4, 256);
        assert_eq!(v, o);
    }

    #[test]
    fn score_term_ratio_matches_closed_form() {
        let v = count_attention_macs(AttentionMode::Vanilla, 128, 128, 64, 1, 0);
        let o = count_attention_macs(AttentionMode::ObjectGuided, 128, 128, 64, 1, 1500);
        let ratio = v.scores as f64 / o.scores as f64;
        assert!((ratio - (16384.0f64 / 1500.0).powi(2)).abs() < 1e-9);
        assert!((ratio - 119.3).abs() < 0.1);
    }
}

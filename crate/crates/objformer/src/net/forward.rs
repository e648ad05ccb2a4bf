//! Forward passes. One sample at a time: the guiding maps differ per sample,
//! so batching happens across tapes, not inside one.

use super::{ModelConfig, ObjFormer, Task, LAYER_NORM_EPS, PATCH_PADS};
use crate::attention::{
    object_cross_attention, object_self_attention, CrossAttentionParams, SelfAttentionParams,
};
use crate::error::{Error, Result};
use crate::segmentation::RegionMap;
use crate::tensor::ops::PoolFusion;
use crate::tensor::{Element, Tape, TensorId};

/// Tape handles of every model parameter, aligned with the weight store.
pub struct BoundWeights {
    ids: Vec<TensorId>,
}

impl BoundWeights {
    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}

/// The three SCD outputs, each at input resolution.
pub struct ScdLogits {
    pub bcd: TensorId,
    pub lcm_osm: TensorId,
    pub lcm_opt: TensorId,
}

struct Fwd<'m, 't, E: Element> {
    model: &'m ObjFormer<E>,
    tape: &'t mut Tape<E>,
    bound: &'m BoundWeights,
    fusion: PoolFusion,
}

impl<E: Element> ObjFormer<E> {
    /// Copy every parameter onto a tape; the returned handles align with the
    /// weight store so gradients can be read back by index.
    pub fn bind<'t>(&self, tape: &mut Tape<E>) -> BoundWeights {
        let ids = (0..self.weights().len()).map(|i| tape.bind(self.weights().tensor(i))).collect();
        BoundWeights { ids }
    }

    /// Like [`Self::bind`] but without gradient tracking; forward passes skip
    /// all backward bookkeeping.
    pub fn bind_frozen(&self, tape: &mut Tape<E>) -> BoundWeights {
        let ids = (0..self.weights().len())
            .map(|i| {
                let t = self.weights().tensor(i);
                tape.constant(t.data().to_vec(), t.shape()).expect("weight shapes are valid")
            })
            .collect();
        BoundWeights { ids }
    }

    /// Change logits `[2, H, W]` from one sample pair. `inst_maps` and
    /// `obj_maps` hold the guiding maps at the four stage resolutions.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_bcd(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundWeights,
        x_osm: TensorId,
        x_opt: TensorId,
        inst_maps: &[RegionMap],
        obj_maps: &[RegionMap],
        fusion: PoolFusion,
    ) -> Result<TensorId> {
        let mut f = Fwd { model: self, tape, bound, fusion };
        let (fused, _, _) = f.trunk(x_osm, x_opt, inst_maps, obj_maps)?;
        let feat = f.fusion_chain("dec", &fused)?;
        let logits = f.conv(feat, "dec.cls", 1, 0)?;
        f.tape.bilinear_upsample(logits, 4)
    }

    /// BCD logits plus the two land-cover mapping logits (`C_lcm + 1`
    /// channels, class 0 = background).
    #[allow(clippy::too_many_arguments)]
    pub fn forward_scd(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundWeights,
        x_osm: TensorId,
        x_opt: TensorId,
        inst_maps: &[RegionMap],
        obj_maps: &[RegionMap],
        fusion: PoolFusion,
    ) -> Result<ScdLogits> {
        if self.task() != Task::Scd {
            return Err(Error::Usage("forward_scd on a bcd-only model".into()));
        }
        let mut f = Fwd { model: self, tape, bound, fusion };
        let (fused, refined_map, refined_opt) = f.trunk(x_osm, x_opt, inst_maps, obj_maps)?;

        let feat = f.fusion_chain("dec", &fused)?;
        let bcd = f.conv(feat, "dec.cls", 1, 0)?;
        let bcd = f.tape.bilinear_upsample(bcd, 4)?;

        let osm_feat = f.fusion_chain("sem.osm", &refined_map)?;
        let lcm_osm = f.conv(osm_feat, "sem.osm.cls", 1, 0)?;
        let lcm_osm = f.tape.bilinear_upsample(lcm_osm, 4)?;

        let opt_feat = f.fusion_chain("sem.opt", &refined_opt)?;
        let lcm_opt = f.conv(opt_feat, "sem.opt.cls", 1, 0)?;
        let lcm_opt = f.tape.bilinear_upsample(lcm_opt, 4)?;

        Ok(ScdLogits { bcd, lcm_osm, lcm_opt })
    }
}

impl<E: Element> Fwd<'_, '_, E> {
    fn id(&self, name: &str) -> TensorId {
        let idx = self
            .model
            .weights()
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        self.bound.ids[idx]
    }

    fn conv(&mut self, x: TensorId, name: &str, stride: usize, pad: usize) -> Result<TensorId> {
        let w = self.id(&format!("{name}.w"));
        let b = self.model.weights().index_of(&format!("{name}.b")).map(|i| self.bound.ids[i]);
        self.tape.conv2d(x, w, b, stride, pad)
    }

    fn norm_chw(&mut self, x: TensorId, name: &str) -> Result<TensorId> {
        let g = self.id(&format!("{name}.g"));
        let b = self.id(&format!("{name}.b"));
        self.tape.layer_norm(x, g, b, LAYER_NORM_EPS, 0)
    }

    /// Validate shapes and run both encoder branches and the per-level
    /// cross-attention fusion. Returns (fused, refined_map, refined_opt),
    /// each indexed by pyramid level, finest first.
    fn trunk(
        &mut self,
        x_osm: TensorId,
        x_opt: TensorId,
        inst_maps: &[RegionMap],
        obj_maps: &[RegionMap],
    ) -> Result<(Vec<TensorId>, Vec<TensorId>, Vec<TensorId>)> {
        let so = self.tape.shape(x_osm).to_vec();
        let sp = self.tape.shape(x_opt).to_vec();
        if so.len() != 3 || so[0] != 3 || so != sp {
            return Err(Error::shape(
                "forward",
                format!("paired rasters must both be [3,H,W], got {so:?} and {sp:?}"),
            ));
        }
        let (h, w) = (so[1], so[2]);
        let dims = self.model.config().stage_dims(h, w)?;
        if inst_maps.len() != 4 || obj_maps.len() != 4 {
            return Err(Error::shape("forward", "need one guiding map per stage".to_string()));
        }
        for (s, &(sh, sw)) in dims.iter().enumerate() {
            for (kind, m) in [("instance", &inst_maps[s]), ("object", &obj_maps[s])] {
                if m.height() != sh || m.width() != sw {
                    return Err(Error::shape(
                        "forward",
                        format!(
                            "{kind} map at stage {s} is {}x{}, expected {sh}x{sw}",
                            m.height(),
                            m.width()
                        ),
                    ));
                }
            }
        }

        let cfg = self.model.config().clone();
        let pyr_map = self.encoder_branch("enc.map", x_osm, inst_maps, &cfg, true)?;
        let pyr_opt = self.encoder_branch("enc.opt", x_opt, obj_maps, &cfg, false)?;

        let mut fused = Vec::with_capacity(4);
        let mut refined_map_all = Vec::with_capacity(4);
        let mut refined_opt_all = Vec::with_capacity(4);
        for l in 0..4 {
            let params = self.cross_params(&format!("dec.l{l}.cross"), cfg.decoder_heads_at_level(l));
            let (a_map, a_opt) = object_cross_attention(
                self.tape,
                pyr_map[l],
                &inst_maps[l],
                pyr_opt[l],
                &obj_maps[l],
                &params,
                self.fusion,
            )?;
            // residual around the cross-attention: with the attention output
            // projections zeroed this reduces to plain concat fusion of the
            // encoder features
            let r_map = self.tape.add(pyr_map[l], a_map)?;
            let r_opt = self.tape.add(pyr_opt[l], a_opt)?;
            let cat = self.tape.concat(&[r_map, r_opt], 0)?;
            let fuse = self.conv(cat, &format!("dec.l{l}.fuse"), 1, 0)?;
            // the change decision is a disagreement test between the two
            // branches, which no purely linear head can express
            let fuse = self.tape.gelu(fuse)?;
            fused.push(fuse);
            refined_map_all.push(r_map);
            refined_opt_all.push(r_opt);
        }
        Ok((fused, refined_map_all, refined_opt_all))
    }

    fn encoder_branch(
        &mut self,
        prefix: &str,
        x: TensorId,
        maps: &[RegionMap],
        cfg: &ModelConfig,
        is_map_branch: bool,
    ) -> Result<Vec<TensorId>> {
        let blocks = if is_map_branch { cfg.map_blocks } else { cfg.opt_blocks };
        let mut feat = x;
        let mut pyramid = Vec::with_capacity(4);
        for s in 0..4 {
            feat = self.conv(
                feat,
                &format!("{prefix}.s{s}.embed"),
                cfg.patch_strides[s],
                PATCH_PADS[s],
            )?;
            feat = self.norm_chw(feat, &format!("{prefix}.s{s}.embed.norm"))?;
            for blk in 0..blocks[s] {
                let base = format!("{prefix}.s{s}.blk{blk}");
                let normed = self.norm_chw(feat, &format!("{base}.n1"))?;
                let params = self.attn_params(&format!("{base}.attn"), cfg.encoder_heads[s]);
                let attn = object_self_attention(
                    self.tape,
                    normed,
                    &maps[s],
                    &params,
                    self.fusion,
                )?;
                feat = self.tape.add(feat, attn)?;
                let normed = self.norm_chw(feat, &format!("{base}.n2"))?;
                let ffn = self.feedforward(normed, &base)?;
                feat = self.tape.add(feat, ffn)?;
            }
            feat = self.norm_chw(feat, &format!("{prefix}.s{s}.norm"))?;
            pyramid.push(feat);
        }
        Ok(pyramid)
    }

    /// Pointwise expansion, depthwise 3x3 (the positional pathway), GELU,
    /// pointwise contraction.
    fn feedforward(&mut self, x: TensorId, base: &str) -> Result<TensorId> {
        let h = self.conv(x, &format!("{base}.ffn.fc1"), 1, 0)?;
        let w = self.id(&format!("{base}.ffn.dw.w"));
        let b = self.id(&format!("{base}.ffn.dw.b"));
        let h = self.tape.depthwise_conv3x3(h, w, Some(b))?;
        let h = self.tape.gelu(h)?;
        self.conv(h, &format!("{base}.ffn.fc2"), 1, 0)
    }

    /// Coarse-to-fine chain of fusion blocks: upsample the running coarse
    /// feature, align channels with a bias-free pointwise projection, add the
    /// finer feature, smooth with a 3x3 conv.
    fn fusion_chain(&mut self, prefix: &str, per_level: &[TensorId]) -> Result<TensorId> {
        let mut coarse = per_level[3];
        for l in (0..3).rev() {
            let up = self.tape.bilinear_upsample(coarse, 2)?;
            let proj = self.conv(up, &format!("{prefix}.l{l}.up.proj"), 1, 0)?;
            let sum = self.tape.add(proj, per_level[l])?;
            coarse = self.conv(sum, &format!("{prefix}.l{l}.up.smooth"), 1, 1)?;
        }
        Ok(coarse)
    }

    fn attn_params(&self, base: &str, heads: usize) -> SelfAttentionParams {
        SelfAttentionParams {
            wq: self.id(&format!("{base}.wq")),
            bq: self.id(&format!("{base}.bq")),
            wk: self.id(&format!("{base}.wk")),
            bk: self.id(&format!("{base}.bk")),
            wv: self.id(&format!("{base}.wv")),
            bv: self.id(&format!("{base}.bv")),
            wo: self.id(&format!("{base}.wo")),
            bo: self.id(&format!("{base}.bo")),
            heads,
        }
    }

    fn cross_params(&self, base: &str, heads: usize) -> CrossAttentionParams {
        CrossAttentionParams {
            wq: self.id(&format!("{base}.wq")),
            bq: self.id(&format!("{base}.bq")),
            wk: self.id(&format!("{base}.wk")),
            bk: self.id(&format!("{base}.bk")),
            wv_map: self.id(&format!("{base}.wvm")),
            bv_map: self.id(&format!("{base}.bvm")),
            wv_opt: self.id(&format!("{base}.wvo")),
            bv_opt: self.id(&format!("{base}.bvo")),
            wo_map: self.id(&format!("{base}.wom")),
            bo_map: self.id(&format!("{base}.bom")),
            wo_opt: self.id(&format!("{base}.woo")),
            bo_opt: self.id(&format!("{base}.boo")),
            heads,
        }
    }
}

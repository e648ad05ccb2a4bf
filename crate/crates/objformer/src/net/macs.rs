//! Closed-form multiply-accumulate accounting for the whole model, split by
//! component so the attention terms can be compared across modes.

use super::{ModelConfig, ObjFormer, Task, PATCH_KERNELS};
use crate::attention::{count_attention_macs, count_cross_attention_macs, AttentionMode, MacCount};
use crate::tensor::Element;

/// Token counts per pyramid level (finest first) used when costing the
/// object-guided mode. Counts are clamped to the pixel count of each level.
#[derive(Debug, Clone, Copy)]
pub struct TokenCounts {
    pub objects: usize,
    pub instances: usize,
}

impl TokenCounts {
    pub fn at(&self, pixels: usize) -> (usize, usize) {
        (self.objects.min(pixels), self.instances.min(pixels))
    }
}

#[derive(Debug, Clone, Copy, Default, serde::Serialize)]
pub struct MacBreakdown {
    pub patch_embeds: u64,
    pub encoder_attention: MacCount,
    pub encoder_ffn: u64,
    pub decoder_attention: MacCount,
    pub decoder_convs: u64,
    pub semantic_decoders: u64,
    pub classifiers: u64,
}

impl MacBreakdown {
    pub fn total(&self) -> u64 {
        self.patch_embeds
            + self.encoder_attention.total()
            + self.encoder_ffn
            + self.decoder_attention.total()
            + self.decoder_convs
            + self.semantic_decoders
            + self.classifiers
    }

    /// The attention score-matrix term alone, encoder plus decoder.
    pub fn score_macs(&self) -> u64 {
        self.encoder_attention.scores + self.decoder_attention.scores
    }
}

/// Full-model MAC count at input `h` x `w` for one sample pair.
pub fn model_macs(
    cfg: &ModelConfig,
    task: Task,
    h: usize,
    w: usize,
    mode: AttentionMode,
    tokens: TokenCounts,
) -> MacBreakdown {
    let dims = cfg
        .stage_dims(h, w)
        .expect("model_macs requires dims divisible by the cumulative stride");
    let mut out = MacBreakdown::default();

    for (branch_blocks, branch_channels, is_map) in [
        (cfg.map_blocks, cfg.map_channels, true),
        (cfg.opt_blocks, cfg.opt_channels, false),
    ] {
        for s in 0..4 {
            let (sh, sw) = dims[s];
            let hw = (sh * sw) as u64;
            let c = branch_channels[s] as u64;
            let ic = if s == 0 { 3 } else { branch_channels[s - 1] } as u64;
            let k = PATCH_KERNELS[s] as u64;
            out.patch_embeds += hw * c * ic * k * k;
            let (n_obj, n_ins) = tokens.at(sh * sw);
            let n_tok = if is_map { n_ins } else { n_obj };
            let attn = count_attention_macs(mode, sh, sw, branch_channels[s], cfg.encoder_heads[s], n_tok);
            let r = cfg.mlp_ratio as u64;
            let ffn = 2 * hw * c * (c * r) + hw * (c * r) * 9;
            for _ in 0..branch_blocks[s] {
                out.encoder_attention = out.encoder_attention + attn;
                out.encoder_ffn += ffn;
            }
        }
    }

    for l in 0..4 {
        let (sh, sw) = dims[l];
        let hw = (sh * sw) as u64;
        let cm = cfg.map_channels[l];
        let co = cfg.opt_channels[l];
        let (n_obj, n_ins) = tokens.at(sh * sw);
        out.decoder_attention = out.decoder_attention
            + count_cross_attention_macs(mode, sh, sw, cm, co, co, n_ins, n_obj);
        // concat + pointwise fuse
        out.decoder_convs += hw * co as u64 * (cm + co) as u64;
    }
    for l in 0..3 {
        let (sh, sw) = dims[l];
        let hw = (sh * sw) as u64;
        let cl = cfg.opt_channels[l] as u64;
        let cc = cfg.opt_channels[l + 1] as u64;
        out.decoder_convs += hw * cl * cc + hw * cl * cl * 9;
    }
    let hw0 = (dims[0].0 * dims[0].1) as u64;
    out.classifiers += hw0 * 2 * cfg.opt_channels[0] as u64;

    if task == Task::Scd {
        for widths in [cfg.map_channels, cfg.opt_channels] {
            for l in 0..3 {
                let (sh, sw) = dims[l];
                let hw = (sh * sw) as u64;
                let cl = widths[l] as u64;
                let cc = widths[l + 1] as u64;
                out.semantic_decoders += hw * cl * cc + hw * cl * cl * 9;
            }
            out.classifiers += hw0 * (cfg.n_classes_lcm as u64 + 1) * widths[0] as u64;
        }
    }
    out
}

impl<E: Element> ObjFormer<E> {
    pub fn model_macs(&self, h: usize, w: usize, mode: AttentionMode, tokens: TokenCounts) -> MacBreakdown {
        model_macs(self.config(), self.task(), h, w, mode, tokens)
    }
}

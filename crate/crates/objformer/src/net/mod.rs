//! The full ObjFormer: pseudo-siamese hierarchical encoder, heterogeneous
//! information fusion decoder, change classifier, and the auxiliary semantic
//! decoders used for semantic change detection.

mod checkpoint;
mod forward;
mod macs;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, RawEntry};
pub use forward::{BoundWeights, ScdLogits};
pub use macs::{MacBreakdown, TokenCounts};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::segmentation::RegionMap;
use crate::tensor::{Element, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which heads the model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Binary change detection only.
    Bcd,
    /// Binary change detection plus the two land-cover mapping decoders.
    Scd,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Bcd => "bcd",
            Task::Scd => "scd",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bcd" => Ok(Task::Bcd),
            "scd" => Ok(Task::Scd),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

/// Stage/channel/head/block layout of the two encoder branches and the
/// decoder. Decoder heads are listed in decode order, coarsest level first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub map_blocks: [usize; 4],
    pub opt_blocks: [usize; 4],
    pub map_channels: [usize; 4],
    pub opt_channels: [usize; 4],
    pub patch_strides: [usize; 4],
    pub encoder_heads: [usize; 4],
    pub decoder_heads: [usize; 4],
    pub mlp_ratio: usize,
    pub n_classes_lcm: usize,
}

pub const PATCH_KERNELS: [usize; 4] = [7, 3, 3, 3];
pub const PATCH_PADS: [usize; 4] = [3, 1, 1, 1];
pub const LAYER_NORM_EPS: f64 = 1e-6;

impl ModelConfig {
    pub fn paper(n_classes_lcm: usize) -> Self {
        ModelConfig {
            map_blocks: [2, 2, 2, 2],
            opt_blocks: [3, 4, 6, 3],
            map_channels: [32, 64, 160, 256],
            opt_channels: [64, 128, 320, 512],
            patch_strides: [4, 2, 2, 2],
            encoder_heads: [1, 2, 5, 8],
            decoder_heads: [8, 5, 2, 1],
            mlp_ratio: 4,
            n_classes_lcm,
        }
    }

    /// Desk-scale preset so full experiments finish in minutes on a CPU.
    pub fn tiny(n_classes_lcm: usize) -> Self {
        ModelConfig {
            map_blocks: [1, 1, 1, 1],
            opt_blocks: [1, 1, 2, 1],
            map_channels: [8, 16, 24, 32],
            opt_channels: [16, 32, 48, 64],
            patch_strides: [4, 2, 2, 2],
            encoder_heads: [1, 2, 4, 8],
            decoder_heads: [8, 4, 2, 1],
            mlp_ratio: 4,
            n_classes_lcm,
        }
    }

    pub fn preset(name: &str, n_classes_lcm: usize) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper(n_classes_lcm)),
            "tiny" => Ok(Self::tiny(n_classes_lcm)),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }

    /// Heads of the decoder cross-attention at pyramid level `l` (0 = finest).
    pub fn decoder_heads_at_level(&self, l: usize) -> usize {
        self.decoder_heads[3 - l]
    }

    pub fn validate(&self) -> Result<()> {
        if self.mlp_ratio == 0 || self.n_classes_lcm == 0 {
            return Err(Error::Config("mlp_ratio and n_classes_lcm must be positive".into()));
        }
        for s in 0..4 {
            if self.map_blocks[s] + self.opt_blocks[s] == 0 && s > 0 {
                // zero blocks at a stage is allowed; the stage reduces to its embedding
            }
            if self.map_channels[s] % self.encoder_heads[s] != 0
                || self.opt_channels[s] % self.encoder_heads[s] != 0
            {
                return Err(Error::Config(format!(
                    "stage {s}: channels {}/{} not divisible by {} heads",
                    self.map_channels[s], self.opt_channels[s], self.encoder_heads[s]
                )));
            }
            let hd = self.decoder_heads_at_level(s);
            if self.opt_channels[s] % hd != 0 {
                return Err(Error::Config(format!(
                    "level {s}: decoder dim {} not divisible by {hd} heads",
                    self.opt_channels[s]
                )));
            }
            if self.patch_strides[s] == 0 {
                return Err(Error::Config("zero patch stride".into()));
            }
        }
        Ok(())
    }

    /// Cumulative downsampling factor at each stage output: 4, 8, 16, 32 for
    /// the default strides.
    pub fn stage_factors(&self) -> [usize; 4] {
        let mut f = [0; 4];
        let mut acc = 1;
        for s in 0..4 {
            acc *= self.patch_strides[s];
            f[s] = acc;
        }
        f
    }

    /// Spatial dims of the four stage outputs; errors when the input is not
    /// divisible by the cumulative stride.
    pub fn stage_dims(&self, h: usize, w: usize) -> Result<[(usize, usize); 4]> {
        let mut out = [(0, 0); 4];
        for (s, f) in self.stage_factors().iter().enumerate() {
            if h % f != 0 || w % f != 0 {
                return Err(Error::Config(format!(
                    "input {h}x{w} not divisible by cumulative stride {f} at stage {s}"
                )));
            }
            out[s] = (h / f, w / f);
        }
        Ok(out)
    }
}

/// Named parameter store with stable creation order.
#[derive(Debug, Clone)]
pub struct ModelWeights<E: Element> {
    entries: Vec<(String, Tensor<E>)>,
    by_name: HashMap<String, usize>,
}

impl<E: Element> Default for ModelWeights<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ModelWeights<E> {
    pub fn new() -> Self {
        ModelWeights { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<E>) -> Result<usize> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name '{name}'")));
        }
        let idx = self.entries.len();
        self.by_name.insert(name.clone(), idx);
        self.entries.push((name, t.with_grad()));
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn tensor(&self, idx: usize) -> &Tensor<E> {
        &self.entries[idx].1
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor<E> {
        &mut self.entries[idx].1
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.index_of(name).map(|i| self.tensor(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// The assembled network.
pub struct ObjFormer<E: Element> {
    config: ModelConfig,
    task: Task,
    weights: ModelWeights<E>,
}

struct Builder<'r, E: Element> {
    weights: ModelWeights<E>,
    rng: &'r mut ChaCha8Rng,
}

impl<E: Element> Builder<'_, E> {
    /// Kaiming init, for convs feeding a GELU.
    fn conv(&mut self, name: String, oc: usize, ic: usize, k: usize, bias: bool) -> Result<()> {
        let std = (2.0 / (ic * k * k) as f64).sqrt();
        self.conv_std(name, oc, ic, k, bias, std)
    }

    /// Variance-preserving init, for the purely linear decoder convs.
    fn conv_linear(&mut self, name: String, oc: usize, ic: usize, k: usize, bias: bool) -> Result<()> {
        let std = (1.0 / (ic * k * k) as f64).sqrt();
        self.conv_std(name, oc, ic, k, bias, std)
    }

    fn conv_std(
        &mut self,
        name: String,
        oc: usize,
        ic: usize,
        k: usize,
        bias: bool,
        std: f64,
    ) -> Result<()> {
        self.weights.add(format!("{name}.w"), Tensor::randn(&[oc, ic, k, k], std, self.rng))?;
        if bias {
            self.weights.add(format!("{name}.b"), Tensor::zeros(&[oc]))?;
        }
        Ok(())
    }

    fn norm(&mut self, name: String, c: usize) -> Result<()> {
        self.weights.add(format!("{name}.g"), Tensor::full(&[c], 1.0))?;
        self.weights.add(format!("{name}.b"), Tensor::zeros(&[c]))?;
        Ok(())
    }

    fn attention(&mut self, name: String, c: usize) -> Result<()> {
        for proj in ["wq", "wk", "wv", "wo"] {
            self.weights.add(format!("{name}.{proj}"), Tensor::randn(&[c, c], 0.02, self.rng))?;
            let bias = proj.replace('w', "b");
            self.weights.add(format!("{name}.{bias}"), Tensor::zeros(&[c]))?;
        }
        Ok(())
    }

    fn cross_attention(&mut self, name: String, c_map: usize, c_opt: usize, d: usize) -> Result<()> {
        let pairs: [(&str, usize, usize); 6] = [
            ("q", c_map, d),
            ("k", c_opt, d),
            ("vm", c_map, d),
            ("vo", c_opt, d),
            ("om", d, c_map),
            ("oo", d, c_opt),
        ];
        for (tag, ic, oc) in pairs {
            self.weights.add(format!("{name}.w{tag}"), Tensor::randn(&[ic, oc], 0.02, self.rng))?;
            self.weights.add(format!("{name}.b{tag}"), Tensor::zeros(&[oc]))?;
        }
        Ok(())
    }
}

impl<E: Element> ObjFormer<E> {
    /// Build the network with deterministic, creation-order-stable
    /// initialization from `seed`.
    pub fn new(config: ModelConfig, task: Task, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { weights: ModelWeights::new(), rng: &mut rng };

        for (prefix, blocks, channels, lightweight) in [
            ("enc.map", config.map_blocks, config.map_channels, true),
            ("enc.opt", config.opt_blocks, config.opt_channels, false),
        ] {
            let _ = lightweight;
            for s in 0..4 {
                let ic = if s == 0 { 3 } else { channels[s - 1] };
                let c = channels[s];
                b.conv(format!("{prefix}.s{s}.embed"), c, ic, PATCH_KERNELS[s], true)?;
                b.norm(format!("{prefix}.s{s}.embed.norm"), c)?;
                for blk in 0..blocks[s] {
                    let base = format!("{prefix}.s{s}.blk{blk}");
                    b.norm(format!("{base}.n1"), c)?;
                    b.attention(format!("{base}.attn"), c)?;
                    b.norm(format!("{base}.n2"), c)?;
                    let hidden = c * config.mlp_ratio;
                    b.conv(format!("{base}.ffn.fc1"), hidden, c, 1, true)?;
                    b.weights.add(
                        format!("{base}.ffn.dw.w"),
                        Tensor::randn(&[hidden, 3, 3], (2.0 / 9.0f64).sqrt(), b.rng),
                    )?;
                    b.weights.add(format!("{base}.ffn.dw.b"), Tensor::zeros(&[hidden]))?;
                    b.conv(format!("{base}.ffn.fc2"), c, hidden, 1, true)?;
                }
                b.norm(format!("{prefix}.s{s}.norm"), c)?;
            }
        }

        for l in 0..4 {
            let cm = config.map_channels[l];
            let co = config.opt_channels[l];
            b.cross_attention(format!("dec.l{l}.cross"), cm, co, co)?;
            b.conv(format!("dec.l{l}.fuse"), co, cm + co, 1, true)?;
        }
        for l in 0..3 {
            // aligns the upsampled coarser feature, so no bias: a zero coarse
            // input must contribute exactly nothing
            b.conv_linear(format!("dec.l{l}.up.proj"), config.opt_channels[l], config.opt_channels[l + 1], 1, false)?;
            b.conv_linear(format!("dec.l{l}.up.smooth"), config.opt_channels[l], config.opt_channels[l], 3, true)?;
        }
        b.conv_std("dec.cls".to_string(), 2, config.opt_channels[0], 1, true, 0.01)?;

        if task == Task::Scd {
            for (branch, widths) in
                [("sem.osm", config.map_channels), ("sem.opt", config.opt_channels)]
            {
                for l in 0..3 {
                    b.conv_linear(format!("{branch}.l{l}.up.proj"), widths[l], widths[l + 1], 1, false)?;
                    b.conv_linear(format!("{branch}.l{l}.up.smooth"), widths[l], widths[l], 3, true)?;
                }
                b.conv_std(format!("{branch}.cls"), config.n_classes_lcm + 1, widths[0], 1, true, 0.01)?;
            }
        }

        Ok(ObjFormer { config, task, weights: b.weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn weights(&self) -> &ModelWeights<E> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut ModelWeights<E> {
        &mut self.weights
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    /// Downsample a guiding map to every stage resolution.
    pub fn stage_maps(&self, map: &RegionMap, h: usize, w: usize) -> Result<Vec<RegionMap>> {
        let dims = self.config.stage_dims(h, w)?;
        dims.iter().map(|&(sh, sw)| map.downsample(sh, sw)).collect()
    }
}

#[cfg(test)]
mod tests;

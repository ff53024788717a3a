use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompting::{prompt_width, AblationVariant};

pub const STAGES: usize = 4;

/// Architecture of the frozen hierarchical transformer and its prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Transformer blocks per stage. The reference large model uses 3, 8, 27, 3.
    pub stage_depths: [usize; STAGES],
    /// Token width `C_seg` per stage.
    pub stage_widths: [usize; STAGES],
    /// Patch-embedding stride per stage; kernel is `2·stride − 1`.
    pub patch_strides: [usize; STAGES],
    /// Attention width of the frozen blocks per stage.
    pub head_dims: [usize; STAGES],
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    /// 1-based stages that receive prompts.
    pub tuned_stages: Vec<usize>,
    /// Prompt width divisor: `c = C_seg / gamma`.
    pub gamma: usize,
    /// `d_h` of the attention prompt.
    pub prompt_attn_dim: usize,
    pub ablation_variant: AblationVariant,
    pub superpixels: usize,
    pub superpixel_iters: usize,
    pub superpixel_temp: f64,
    pub pos_scale: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_depths: [2, 2, 2, 2],
            stage_widths: [16, 32, 64, 128],
            patch_strides: [4, 2, 2, 2],
            head_dims: [16, 32, 64, 128],
            mlp_ratio: 2,
            decoder_dim: 32,
            tuned_stages: vec![1, 2, 3, 4],
            gamma: 4,
            prompt_attn_dim: 32,
            ablation_variant: AblationVariant::Full,
            superpixels: 16,
            superpixel_iters: crate::superpixel::DEFAULT_ITERS,
            superpixel_temp: crate::superpixel::DEFAULT_TEMP,
            pos_scale: 1.0,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, values: &[usize]| -> Result<()> {
            if values.iter().any(|&v| v == 0) {
                Err(Error::config(field, "all entries must be positive"))
            } else {
                Ok(())
            }
        };
        positive("stage_depths", &self.stage_depths)?;
        positive("stage_widths", &self.stage_widths)?;
        positive("patch_strides", &self.patch_strides)?;
        positive("head_dims", &self.head_dims)?;
        positive("mlp_ratio", &[self.mlp_ratio])?;
        positive("decoder_dim", &[self.decoder_dim])?;
        positive("prompt_attn_dim", &[self.prompt_attn_dim])?;
        positive("superpixel_iters", &[self.superpixel_iters])?;
        positive("superpixels", &[self.superpixels])?;
        for &w in &self.stage_widths {
            prompt_width(w, self.gamma)?;
        }
        let mut seen = [false; STAGES];
        for &s in &self.tuned_stages {
            if !(1..=STAGES).contains(&s) {
                return Err(Error::config("tuned_stages", format!("stage {s} outside 1..=4")));
            }
            if std::mem::replace(&mut seen[s - 1], true) {
                return Err(Error::config("tuned_stages", format!("stage {s} listed twice")));
            }
        }
        if !(self.superpixel_temp > 0.0 && self.superpixel_temp.is_finite()) {
            return Err(Error::config("superpixel_temp", "must be positive"));
        }
        if !(self.pos_scale > 0.0 && self.pos_scale.is_finite()) {
            return Err(Error::config("pos_scale", "must be positive"));
        }
        Ok(())
    }

    /// Product of strides up to and including each stage.
    pub fn cumulative_strides(&self) -> [usize; STAGES] {
        let mut out = [1; STAGES];
        let mut acc = 1;
        for (o, s) in out.iter_mut().zip(&self.patch_strides) {
            acc *= s;
            *o = acc;
        }
        out
    }

    pub fn check_image(&self, height: usize, width: usize) -> Result<()> {
        let total = self.cumulative_strides()[STAGES - 1];
        if height == 0 || width == 0 || height % total != 0 || width % total != 0 {
            return Err(Error::config(
                "image",
                format!("{height}x{width} is not divisible by the total stride {total}"),
            ));
        }
        Ok(())
    }

    /// Token grid of each stage for an input of the given size.
    pub fn stage_grids(&self, height: usize, width: usize) -> [(usize, usize); STAGES] {
        self.cumulative_strides().map(|c| (height / c, width / c))
    }

    pub fn is_tuned(&self, stage: usize) -> bool {
        self.ablation_variant.layout().enabled && self.tuned_stages.contains(&stage)
    }
}

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use indexmap::IndexMap;

use super::config::{BackboneConfig, STAGES};
use super::params::{ModelParams, Role};
use crate::error::{Error, Result};
use crate::image::{build_xylab, BinaryMask, ImageRGB};
use crate::prompting::{
    adapter_prompt, attention_prompt, combine, iegp_project, project_xsp, AdapterParams,
    AttentionVars, IegpParams, LinearVars, PromptBundle,
};
use crate::superpixel;
use crate::tensor::{sigmoid, GatherMap, RowMix, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-6;

/// Constant resampling maps for one stage at a fixed input size.
#[derive(Debug)]
pub struct StageGeometry {
    pub grid: (usize, usize),
    pub cumulative_stride: usize,
    /// Overlapping patch gather from the previous stage's grid.
    pub embed: Arc<GatherMap>,
    /// Non-overlapping raw-image patches, one per stage token.
    pub patchify: Arc<GatherMap>,
    /// Full-resolution → stage grid block means.
    pub pool: Arc<RowMix>,
    /// Stage grid → stage-1 grid, bilinear.
    pub to_first: Arc<RowMix>,
}

#[derive(Debug)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub stages: Vec<StageGeometry>,
    /// Stage-1 grid → full resolution, bilinear.
    pub to_full: Arc<RowMix>,
}

impl Geometry {
    pub fn new(cfg: &BackboneConfig, height: usize, width: usize) -> Result<Self> {
        cfg.check_image(height, width)?;
        let grids = cfg.stage_grids(height, width);
        let cum = cfg.cumulative_strides();
        let mut stages = Vec::with_capacity(STAGES);
        let (mut h_in, mut w_in, mut c_in) = (height, width, 3);
        for s in 0..STAGES {
            let stride = cfg.patch_strides[s];
            let embed = GatherMap::im2col(h_in, w_in, c_in, 2 * stride - 1, stride, stride - 1)?;
            debug_assert_eq!(embed.out_shape()[0], grids[s].0 * grids[s].1);
            stages.push(StageGeometry {
                grid: grids[s],
                cumulative_stride: cum[s],
                embed: Arc::new(embed),
                patchify: Arc::new(GatherMap::im2col(height, width, 3, cum[s], cum[s], 0)?),
                pool: Arc::new(RowMix::block_mean(height, width, cum[s])?),
                to_first: Arc::new(RowMix::bilinear(grids[s].0, grids[s].1, grids[0].0, grids[0].1)),
            });
            (h_in, w_in, c_in) = (grids[s].0, grids[s].1, cfg.stage_widths[s]);
        }
        Ok(Self {
            height,
            width,
            stages,
            to_full: Arc::new(RowMix::bilinear(grids[0].0, grids[0].1, height, width)),
        })
    }
}

/// Per-image inputs that do not depend on tunable weights.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    pub geometry: Arc<Geometry>,
    /// `[n×3]` normalized pixels.
    pub pixels: Arc<Tensor>,
    /// `[n×C_1]` super-pixelated stage-1 embedding, when the variant uses it.
    pub xsp_raw: Option<Arc<Tensor>>,
}

/// Tape handles for every parameter.
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    /// Puts every parameter on the tape; only tunable ones receive gradients.
    pub fn register(tape: &mut Tape, params: &ModelParams) -> Self {
        let vars = params
            .iter()
            .map(|(name, p)| {
                let v = tape.leaf_shared(Arc::clone(&p.tensor), p.role == Role::Tunable);
                (name.to_string(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Incompatible(format!("missing parameter `{name}`")))
    }

    pub fn linear(&self, prefix: &str) -> Result<LinearVars> {
        Ok(LinearVars {
            weight: self.get(&format!("{prefix}.weight"))?,
            bias: self.get(&format!("{prefix}.bias"))?,
        })
    }

    fn norm(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let g = self.get(&format!("{prefix}.gamma"))?;
        let b = self.get(&format!("{prefix}.beta"))?;
        Ok(tape.layer_norm(x, g, b, LN_EPS)?)
    }

    /// Substitutes the handle for one parameter, e.g. a probe variable.
    pub fn replace(&mut self, name: &str, var: Var) -> Result<()> {
        let slot = self
            .vars
            .get_mut(name)
            .ok_or_else(|| Error::Incompatible(format!("missing parameter `{name}`")))?;
        *slot = var;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Whether [`Segmenter::forward`] injects prompts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prompting {
    On,
    Off,
}

pub struct ForwardOutput {
    /// `[h·w × 1]` per-pixel logits.
    pub logits: Var,
    /// Prompts per stage (index 0 is stage 1); `None` for untuned stages.
    pub prompts: Vec<Option<PromptBundle>>,
    /// Token features at the output of each stage.
    pub stage_outputs: Vec<Var>,
}

/// The frozen hierarchical transformer with prompt injection and an
/// all-MLP decoder.
pub struct Segmenter {
    cfg: BackboneConfig,
    geometries: Mutex<HashMap<(usize, usize), Arc<Geometry>>>,
}

impl Segmenter {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            geometries: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn geometry(&self, height: usize, width: usize) -> Result<Arc<Geometry>> {
        let mut cache = self.geometries.lock().expect("geometry cache poisoned");
        if let Some(g) = cache.get(&(height, width)) {
            return Ok(Arc::clone(g));
        }
        let g = Arc::new(Geometry::new(&self.cfg, height, width)?);
        cache.insert((height, width), Arc::clone(&g));
        Ok(g)
    }

    fn uses_superpixels(&self) -> bool {
        let layout = self.cfg.ablation_variant.layout();
        layout.enabled && layout.superpixel && !self.cfg.tuned_stages.is_empty()
    }

    /// Stage-1 patch embedding `[tokens×C_1]` (frozen weights only).
    fn first_embedding(&self, tape: &mut Tape, vars: &ParamVars, geom: &Geometry, pixels: Var) -> Result<Var> {
        let cols = tape.gather(&geom.stages[0].embed, pixels)?;
        let e = vars.linear("stage1.embed")?.apply(tape, cols)?;
        vars.norm(tape, "stage1.embed_norm", e)
    }

    /// Normalizes pixels and, for superpixel variants, computes the
    /// super-pixelated stage-1 features.
    pub fn prepare(&self, params: &ModelParams, img: &ImageRGB) -> Result<PreparedImage> {
        let geometry = self.geometry(img.height, img.width)?;
        let pixels = Arc::new(img.to_unit_tensor().map(|v| (v - 0.5) / 0.25));
        let xsp_raw = if self.uses_superpixels() {
            let feats = build_xylab(img, self.cfg.pos_scale)?;
            let (assoc, _) = superpixel::iterate(
                &feats,
                self.cfg.superpixels,
                self.cfg.superpixel_iters,
                self.cfg.superpixel_temp,
            )?;
            let mut tape = Tape::new();
            let mut frozen = params.clone();
            for name in frozen.names(Role::Tunable) {
                frozen.set_role(&name, Role::Frozen);
            }
            let vars = ParamVars::register(&mut tape, &frozen);
            let px = tape.leaf_shared(Arc::clone(&pixels), false);
            let emb = self.first_embedding(&mut tape, &vars, &geometry, px)?;
            let x = tape.mix_rows(&geometry.to_full, emb)?;
            Some(Arc::new(superpixel::superpixelate(&assoc, tape.value(x))?))
        } else {
            None
        };
        Ok(PreparedImage {
            geometry,
            pixels,
            xsp_raw,
        })
    }

    fn stage_prompts(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        stage: usize,
        patch_embed: Var,
        prep: &PreparedImage,
        pixels: Var,
    ) -> Result<PromptBundle> {
        let layout = self.cfg.ablation_variant.layout();
        let geom = &prep.geometry.stages[stage - 1];
        let depth = self.cfg.stage_depths[stage - 1];
        let p = format!("prompt{stage}");
        let iegp = IegpParams::new(vars.linear(&format!("{p}.l_pe"))?, self.cfg.stage_widths[stage - 1], self.cfg.gamma)?;
        let x_pe = iegp_project(tape, patch_embed, &iegp)?;
        let x_sp = if layout.superpixel {
            let raw = prep
                .xsp_raw
                .as_ref()
                .ok_or_else(|| Error::Incompatible("image prepared without superpixel features".into()))?;
            let raw = tape.leaf_shared(Arc::clone(raw), false);
            Some(project_xsp(tape, raw, &geom.pool, &vars.linear(&format!("{p}.xsp"))?)?)
        } else {
            None
        };
        let per_block = |kind: &str, shared: bool| -> Result<Vec<LinearVars>> {
            if shared {
                Ok(vec![vars.linear(&format!("{p}.{kind}"))?])
            } else {
                (0..depth).map(|b| vars.linear(&format!("{p}.{kind}{b}"))).collect()
            }
        };
        let attention = if layout.attention {
            Some(AttentionVars {
                q: vars.get(&format!("{p}.attn.q.weight"))?,
                k: vars.get(&format!("{p}.attn.k.weight"))?,
                v: vars.get(&format!("{p}.attn.v.weight"))?,
                out: vars.linear(&format!("{p}.attn.o"))?,
            })
        } else {
            None
        };
        let adapters = AdapterParams {
            tune: per_block("tune", layout.shared_tune)?,
            up: per_block("up", !layout.per_block_up)?,
            attention,
            depth,
        };
        let p_j = match &adapters.attention {
            Some(attn) => {
                let tokens = tape.gather(&geom.patchify, pixels)?;
                Some(attention_prompt(tape, tokens, attn)?)
            }
            None => None,
        };
        let mut p_i = Vec::with_capacity(depth);
        let mut p_k = Vec::with_capacity(depth);
        for b in 0..depth {
            let pi = adapter_prompt(tape, x_pe, x_sp, b, &adapters)?;
            p_i.push(pi);
            p_k.push(match p_j {
                Some(pj) => combine(tape, pi, pj)?,
                None => pi,
            });
        }
        Ok(PromptBundle { p_i, p_j, p_k })
    }

    fn block(&self, tape: &mut Tape, vars: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
        let h = vars.norm(tape, &format!("{prefix}.norm1"), x)?;
        let q = vars.linear(&format!("{prefix}.attn.q"))?.apply(tape, h)?;
        let k = vars.linear(&format!("{prefix}.attn.k"))?.apply(tape, h)?;
        let v = vars.linear(&format!("{prefix}.attn.v"))?.apply(tape, h)?;
        let d = tape.value(q).cols() as f64;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / d.sqrt());
        let w = tape.softmax_rows(scores)?;
        let mixed = tape.matmul(w, v)?;
        let attn = vars.linear(&format!("{prefix}.attn.o"))?.apply(tape, mixed)?;
        let x = tape.add(x, attn)?;
        let h = vars.norm(tape, &format!("{prefix}.norm2"), x)?;
        let h = vars.linear(&format!("{prefix}.mlp.fc1"))?.apply(tape, h)?;
        let h = tape.gelu(h);
        let h = vars.linear(&format!("{prefix}.mlp.fc2"))?.apply(tape, h)?;
        Ok(tape.add(x, h)?)
    }

    /// Records the full forward pass and returns per-pixel logits.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        prep: &PreparedImage,
        prompting: Prompting,
    ) -> Result<ForwardOutput> {
        let geom = &prep.geometry;
        let pixels = tape.leaf_shared(Arc::clone(&prep.pixels), false);
        let mut x = pixels;
        let mut stage_outputs = Vec::with_capacity(STAGES);
        let mut prompts = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let stage = s + 1;
            let cols = tape.gather(&geom.stages[s].embed, x)?;
            let e = vars.linear(&format!("stage{stage}.embed"))?.apply(tape, cols)?;
            let patch_embed = vars.norm(tape, &format!("stage{stage}.embed_norm"), e)?;
            let bundle = if prompting == Prompting::On && self.cfg.is_tuned(stage) {
                Some(self.stage_prompts(tape, vars, stage, patch_embed, prep, pixels)?)
            } else {
                None
            };
            let mut tokens = patch_embed;
            for b in 0..self.cfg.stage_depths[s] {
                if let Some(bundle) = &bundle {
                    tokens = tape.add(tokens, bundle.p_k[b])?;
                }
                tokens = self.block(tape, vars, &format!("stage{stage}.block{b}"), tokens)?;
            }
            tokens = vars.norm(tape, &format!("stage{stage}.norm"), tokens)?;
            stage_outputs.push(tokens);
            prompts.push(bundle);
            x = tokens;
        }
        let mut fused_inputs = Vec::with_capacity(STAGES);
        for (s, &out) in stage_outputs.iter().enumerate() {
            let proj = vars.linear(&format!("decoder.proj{}", s + 1))?.apply(tape, out)?;
            fused_inputs.push(tape.mix_rows(&geom.stages[s].to_first, proj)?);
        }
        let cat = tape.concat_cols(&fused_inputs)?;
        let fused = vars.linear("decoder.fuse")?.apply(tape, cat)?;
        let fused = tape.gelu(fused);
        let low = vars.linear("decoder.pred")?.apply(tape, fused)?;
        let logits = tape.mix_rows(&geom.to_full, low)?;
        Ok(ForwardOutput {
            logits,
            prompts,
            stage_outputs,
        })
    }

    /// Logits `[h·w × 1]` for one image without recording gradients.
    pub fn logits(&self, params: &ModelParams, prep: &PreparedImage, prompting: Prompting) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut frozen = params.clone();
        for name in frozen.names(Role::Tunable) {
            frozen.set_role(&name, Role::Frozen);
        }
        let vars = ParamVars::register(&mut tape, &frozen);
        let out = self.forward(&mut tape, &vars, prep, prompting)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Sigmoid probability map `[h·w]` for an image.
    pub fn predict(&self, params: &ModelParams, img: &ImageRGB) -> Result<Vec<f64>> {
        let prep = self.prepare(params, img)?;
        let logits = self.logits(params, &prep, Prompting::On)?;
        Ok(logits.data().iter().map(|&z| sigmoid(z)).collect())
    }

    /// Balanced BCE loss of one image and its gradient for every tunable tensor.
    pub fn loss_and_grads(
        &self,
        params: &ModelParams,
        prep: &PreparedImage,
        mask: &BinaryMask,
    ) -> Result<(f64, IndexMap<String, Tensor>)> {
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, params);
        let out = self.forward(&mut tape, &vars, prep, Prompting::On)?;
        let loss = crate::train::bbce_loss(&mut tape, out.logits, mask)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let mut out = IndexMap::new();
        for (name, p) in params.iter() {
            if p.role == Role::Tunable {
                let v = vars.get(name)?;
                let g = grads.get(v).unwrap_or_else(|| Tensor::zeros(p.tensor.shape()));
                out.insert(name.to_string(), g);
            }
        }
        Ok((value, out))
    }
}

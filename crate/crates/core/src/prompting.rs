//! Prompt generators that hold every trainable weight outside the decoder.
//!
//! Per tuned stage:
//!
//! * the frozen patch embedding `X^p [tokens×C_seg]` is projected to
//!   `X_pe [tokens×c]` by a tunable linear map, `c = C_seg / γ`;
//! * super-pixelated features are pooled onto the stage grid and projected to
//!   width `c` so they can be added to `X_pe`;
//! * each transformer block `i` gets `P_i = up(GELU(tune_i(X_pe + X_sp)))`,
//!   with `up` shared by all blocks of the stage;
//! * a single-head attention over raw image patches gives `P_j`;
//! * the block input receives `P_k = P_i + P_j`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RowMix, Tape, TensorError, Var};

/// Which prompt components exist. Mirrors the architecture ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// No prompting; only the decoder trains.
    DecoderOnly,
    /// One `tune` map shared by every block, no superpixel input.
    SharedTune,
    /// Separate `up` map per block, no superpixel input.
    PerBlockUp,
    /// Adapters and attention prompt without superpixel input.
    NoSuperpixel,
    /// Superpixel input and adapters without the attention prompt.
    NoAttention,
    /// Superpixel input, per-block adapters, shared `up`, attention prompt.
    #[default]
    Full,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::DecoderOnly,
        AblationVariant::SharedTune,
        AblationVariant::PerBlockUp,
        AblationVariant::NoSuperpixel,
        AblationVariant::NoAttention,
        AblationVariant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::DecoderOnly => "decoder_only",
            AblationVariant::SharedTune => "shared_tune",
            AblationVariant::PerBlockUp => "per_block_up",
            AblationVariant::NoSuperpixel => "no_superpixel",
            AblationVariant::NoAttention => "no_attention",
            AblationVariant::Full => "full",
        }
    }

    pub fn layout(self) -> PromptLayout {
        let base = PromptLayout {
            enabled: true,
            superpixel: false,
            shared_tune: false,
            per_block_up: false,
            attention: true,
        };
        match self {
            AblationVariant::DecoderOnly => PromptLayout {
                enabled: false,
                attention: false,
                ..base
            },
            AblationVariant::SharedTune => PromptLayout {
                shared_tune: true,
                ..base
            },
            AblationVariant::PerBlockUp => PromptLayout {
                per_block_up: true,
                ..base
            },
            AblationVariant::NoSuperpixel => base,
            AblationVariant::NoAttention => PromptLayout {
                superpixel: true,
                attention: false,
                ..base
            },
            AblationVariant::Full => PromptLayout {
                superpixel: true,
                ..base
            },
        }
    }
}

impl std::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("ablation_variant", format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptLayout {
    pub enabled: bool,
    pub superpixel: bool,
    pub shared_tune: bool,
    pub per_block_up: bool,
    pub attention: bool,
}

/// Prompt width `c = C_seg / γ`.
pub fn prompt_width(c_seg: usize, gamma: usize) -> Result<usize> {
    if gamma == 0 || c_seg % gamma != 0 {
        return Err(Error::config(
            "gamma",
            format!("scale factor {gamma} must divide stage width {c_seg}"),
        ));
    }
    Ok(c_seg / gamma)
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/√fan_in`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Sizes that determine one stage's prompt parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StagePromptDims {
    pub stage: usize,
    pub c_seg: usize,
    pub gamma: usize,
    pub depth: usize,
    /// Width of the super-pixelated features before projection.
    pub xsp_dim: usize,
    /// Flattened raw patch length fed to the attention prompt.
    pub token_dim: usize,
    pub attn_dim: usize,
}

fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize, zero: bool) {
    let w_init = if zero { Init::Zeros } else { Init::Uniform { fan_in } };
    out.push(ParamSpec::new(format!("{prefix}.weight"), &[fan_in, fan_out], w_init));
    out.push(ParamSpec::new(format!("{prefix}.bias"), &[fan_out], Init::Zeros));
}

/// Parameter shapes for one stage's prompt generators, in creation order.
/// The upward projection and the attention output map start at zero.
pub fn stage_prompt_specs(dims: &StagePromptDims, layout: PromptLayout) -> Result<Vec<ParamSpec>> {
    if !layout.enabled {
        return Ok(Vec::new());
    }
    let c = prompt_width(dims.c_seg, dims.gamma)?;
    let p = format!("prompt{}", dims.stage);
    let mut specs = Vec::new();
    linear_specs(&mut specs, &format!("{p}.l_pe"), dims.c_seg, c, false);
    if layout.superpixel {
        linear_specs(&mut specs, &format!("{p}.xsp"), dims.xsp_dim, c, false);
    }
    if layout.shared_tune {
        linear_specs(&mut specs, &format!("{p}.tune"), c, c, false);
    } else {
        for b in 0..dims.depth {
            linear_specs(&mut specs, &format!("{p}.tune{b}"), c, c, false);
        }
    }
    if layout.per_block_up {
        for b in 0..dims.depth {
            linear_specs(&mut specs, &format!("{p}.up{b}"), c, dims.c_seg, true);
        }
    } else {
        linear_specs(&mut specs, &format!("{p}.up"), c, dims.c_seg, true);
    }
    if layout.attention {
        let t = dims.token_dim;
        let d = dims.attn_dim;
        for name in ["q", "k", "v"] {
            specs.push(ParamSpec::new(
                format!("{p}.attn.{name}.weight"),
                &[t, d],
                Init::Uniform { fan_in: t },
            ));
        }
        linear_specs(&mut specs, &format!("{p}.attn.o"), d, dims.c_seg, true);
    }
    Ok(specs)
}

/// A linear map recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(tape.linear(x, self.weight, self.bias)?)
    }
}

/// The tunable patch-embedding projection of one stage.
#[derive(Clone, Copy, Debug)]
pub struct IegpParams {
    pub l_pe: LinearVars,
    pub c_seg: usize,
    pub gamma: usize,
}

impl IegpParams {
    pub fn new(l_pe: LinearVars, c_seg: usize, gamma: usize) -> Result<Self> {
        prompt_width(c_seg, gamma)?;
        Ok(Self { l_pe, c_seg, gamma })
    }

    pub fn c(&self) -> usize {
        self.c_seg / self.gamma
    }
}

/// Projects the frozen patch embedding `[tokens×C_seg]` to `X_pe [tokens×c]`.
pub fn iegp_project(tape: &mut Tape, frozen_patch_embed: Var, params: &IegpParams) -> Result<Var> {
    let width = tape.value(frozen_patch_embed).cols();
    if width != params.c_seg {
        return Err(TensorError::Shape {
            op: "iegp_project",
            lhs: tape.value(frozen_patch_embed).shape().to_vec(),
            rhs: vec![params.c_seg, params.c()],
        }
        .into());
    }
    params.l_pe.apply(tape, frozen_patch_embed)
}

/// Pools full-resolution super-pixelated features onto the stage grid, then
/// maps them to the prompt width.
pub fn project_xsp(tape: &mut Tape, xsp_raw: Var, pool: &Arc<RowMix>, proj: &LinearVars) -> Result<Var> {
    let rows = tape.value(xsp_raw).rows();
    if rows != pool.in_rows() {
        return Err(TensorError::Shape {
            op: "project_xsp",
            lhs: tape.value(xsp_raw).shape().to_vec(),
            rhs: vec![pool.in_rows(), pool.out_rows()],
        }
        .into());
    }
    let pooled = tape.mix_rows(pool, xsp_raw)?;
    proj.apply(tape, pooled)
}

/// Single-head attention weights for the raw-image prompt.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub out: LinearVars,
}

/// Adapter weights for one stage.
#[derive(Clone, Debug)]
pub struct AdapterParams {
    /// One entry when shared across blocks, otherwise one per block.
    pub tune: Vec<LinearVars>,
    /// One entry when shared across blocks, otherwise one per block.
    pub up: Vec<LinearVars>,
    pub attention: Option<AttentionVars>,
    pub depth: usize,
}

impl AdapterParams {
    fn pick<'a>(maps: &'a [LinearVars], block: usize, depth: usize, what: &str) -> Result<&'a LinearVars> {
        if block >= depth {
            return Err(Error::config(
                "block_index",
                format!("{what}: block {block} outside stage depth {depth}"),
            ));
        }
        Ok(if maps.len() == 1 { &maps[0] } else { &maps[block] })
    }
}

/// `P_i = up(GELU(tune_i(X_pe + X_sp)))`. Without superpixel input the sum
/// reduces to `X_pe`.
pub fn adapter_prompt(
    tape: &mut Tape,
    x_pe: Var,
    x_sp: Option<Var>,
    block: usize,
    params: &AdapterParams,
) -> Result<Var> {
    let tune = AdapterParams::pick(&params.tune, block, params.depth, "tune")?;
    let up = AdapterParams::pick(&params.up, block, params.depth, "up")?;
    let input = match x_sp {
        Some(sp) => tape.add(x_pe, sp)?,
        None => x_pe,
    };
    let hidden = tune.apply(tape, input)?;
    let act = tape.gelu(hidden);
    up.apply(tape, act)
}

/// `P_j = softmax(Q·Kᵀ/√d_h)·V·W_o + b_o` over raw image patch tokens.
pub fn attention_prompt(tape: &mut Tape, tokens: Var, attn: &AttentionVars) -> Result<Var> {
    let q = tape.matmul(tokens, attn.q)?;
    let k = tape.matmul(tokens, attn.k)?;
    let v = tape.matmul(tokens, attn.v)?;
    let d_h = tape.value(q).cols() as f64;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / d_h.sqrt());
    let weights = tape.softmax_rows(scaled)?;
    let mixed = tape.matmul(weights, v)?;
    attn.out.apply(tape, mixed)
}

/// `P_k = P_i + P_j`.
pub fn combine(tape: &mut Tape, p_i: Var, p_j: Var) -> Result<Var> {
    Ok(tape.add(p_i, p_j)?)
}

/// Prompts produced for one stage.
#[derive(Clone, Debug)]
pub struct PromptBundle {
    pub p_i: Vec<Var>,
    pub p_j: Option<Var>,
    /// One per block: `P_i + P_j`, or `P_i` when there is no attention prompt.
    pub p_k: Vec<Var>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn gamma_must_divide_width() {
        assert_eq!(prompt_width(64, 4).unwrap(), 16);
        assert!(matches!(prompt_width(30, 4), Err(Error::Config { .. })));
        assert!(prompt_width(16, 0).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in AblationVariant::ALL {
            assert_eq!(v.name().parse::<AblationVariant>().unwrap(), v);
        }
        assert!("nope".parse::<AblationVariant>().is_err());
    }

    #[test]
    fn decoder_only_has_no_prompt_params() {
        let dims = StagePromptDims {
            stage: 1,
            c_seg: 16,
            gamma: 4,
            depth: 2,
            xsp_dim: 16,
            token_dim: 48,
            attn_dim: 8,
        };
        assert!(stage_prompt_specs(&dims, AblationVariant::DecoderOnly.layout())
            .unwrap()
            .is_empty());
        let full = stage_prompt_specs(&dims, AblationVariant::Full.layout()).unwrap();
        let names: Vec<_> = full.iter().map(|s| s.name.as_str()).collect();
        assert!(names.contains(&"prompt1.tune1.weight"));
        assert!(names.contains(&"prompt1.up.weight"));
        assert!(!names.contains(&"prompt1.up1.weight"));
        let zeroed: Vec<_> = full.iter().filter(|s| s.init == Init::Zeros).map(|s| s.name.as_str()).collect();
        assert!(zeroed.contains(&"prompt1.up.weight") && zeroed.contains(&"prompt1.attn.o.weight"));
    }

    fn lin(tape: &mut Tape, w: Tensor, b: Tensor) -> LinearVars {
        LinearVars {
            weight: tape.param(w),
            bias: tape.param(b),
        }
    }

    #[test]
    fn iegp_zero_weight_gives_bias_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[3, 8], |i| i as f64 * 0.1));
        let l = lin(&mut tape, Tensor::zeros(&[8, 2]), Tensor::new(vec![2], vec![0.5, -1.0]).unwrap());
        let p = IegpParams::new(l, 8, 4).unwrap();
        let y = iegp_project(&mut tape, x, &p).unwrap();
        for r in 0..3 {
            assert_eq!(tape.value(y).row(r), &[0.5, -1.0]);
        }
    }

    #[test]
    fn iegp_identity_with_unit_gamma() {
        let mut tape = Tape::new();
        let xt = Tensor::from_fn(&[3, 4], |i| (i as f64).sin());
        let x = tape.constant(xt.clone());
        let l = lin(&mut tape, Tensor::identity(4), Tensor::zeros(&[4]));
        let p = IegpParams::new(l, 4, 1).unwrap();
        let y = iegp_project(&mut tape, x, &p).unwrap();
        assert_eq!(tape.value(y), &xt);
    }

    #[test]
    fn adapter_zero_input_gives_zero_prompt() {
        let mut tape = Tape::new();
        let x_pe = tape.constant(Tensor::zeros(&[4, 2]));
        let tune = lin(&mut tape, Tensor::from_fn(&[2, 2], |i| i as f64 + 1.0), Tensor::zeros(&[2]));
        let up = lin(&mut tape, Tensor::from_fn(&[2, 6], |i| i as f64 - 3.0), Tensor::zeros(&[6]));
        let params = AdapterParams {
            tune: vec![tune],
            up: vec![up],
            attention: None,
            depth: 2,
        };
        let p = adapter_prompt(&mut tape, x_pe, None, 1, &params).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| v == 0.0));
        assert!(adapter_prompt(&mut tape, x_pe, None, 2, &params).is_err());
    }

    #[test]
    fn attention_with_zero_values_is_bias() {
        let mut tape = Tape::new();
        let tokens = tape.constant(Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.37).cos()));
        let attn = AttentionVars {
            q: tape.param(Tensor::from_fn(&[5, 2], |i| i as f64 * 0.1)),
            k: tape.param(Tensor::from_fn(&[5, 2], |i| 0.3 - i as f64 * 0.05)),
            v: tape.param(Tensor::zeros(&[5, 2])),
            out: lin(&mut tape, Tensor::from_fn(&[2, 4], |i| i as f64), Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
        };
        let p = attention_prompt(&mut tape, tokens, &attn).unwrap();
        for r in 0..3 {
            assert_eq!(tape.value(p).row(r), &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn combine_cancels() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5));
        let b = tape.constant(Tensor::from_fn(&[2, 3], |i| 2.5 - i as f64));
        let k = combine(&mut tape, a, b).unwrap();
        assert!(tape.value(k).data().iter().all(|&v| v == 0.0));
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let k = combine(&mut tape, a, z).unwrap();
        assert_eq!(tape.value(k), tape.value(a));
        let bad = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(combine(&mut tape, a, bad).is_err());
    }
}

use std::sync::Arc;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{BackboneConfig, STAGES};
use crate::error::{Error, Result};
use crate::prompting::{stage_prompt_specs, Init, ParamSpec, StagePromptDims};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Frozen,
    Tunable,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub tensor: Arc<Tensor>,
    pub role: Role,
}

/// Named parameter tree in a fixed insertion order.
#[derive(Clone, Debug, Default)]
pub struct ModelParams {
    entries: IndexMap<String, Param>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, role: Role) {
        self.entries.insert(
            name.into(),
            Param {
                tensor: Arc::new(tensor),
                role,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Arc<Tensor>> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Incompatible(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self, role: Role) -> Vec<String> {
        self.iter()
            .filter(|(_, p)| p.role == role)
            .map(|(n, _)| n.to_string())
            .collect()
    }

    /// Replaces a tensor's values; the shape must stay the same.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Incompatible(format!("missing parameter `{name}`")))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::Incompatible(format!(
                "`{name}` has shape {:?}, got {:?}",
                entry.tensor.shape(),
                tensor.shape()
            )));
        }
        entry.tensor = Arc::new(tensor);
        Ok(())
    }

    /// Mutable access for in-place updates; clones only if the tensor is shared.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| Arc::make_mut(&mut p.tensor))
    }

    pub fn set_role(&mut self, name: &str, role: Role) {
        if let Some(p) = self.entries.get_mut(name) {
            p.role = role;
        }
    }

    /// True when names, order, roles, shapes and every bit of data agree.
    pub fn bit_identical(&self, other: &ModelParams) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|((na, a), (nb, b))| {
                na == nb
                    && a.role == b.role
                    && a.tensor.shape() == b.tensor.shape()
                    && a.tensor
                        .data()
                        .iter()
                        .zip(b.tensor.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Stage index (1-based) that owns a prompt parameter name.
fn prompt_stage(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("prompt")?;
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

/// Splits parameter names into (frozen, tunable): decoder weights and the
/// prompt weights of `tuned_stages` are tunable, everything else is frozen.
pub fn partition(params: &ModelParams, tuned_stages: &[usize]) -> (Vec<String>, Vec<String>) {
    let mut frozen = Vec::new();
    let mut tunable = Vec::new();
    for (name, _) in params.iter() {
        let tune = name.starts_with("decoder.")
            || prompt_stage(name).is_some_and(|s| tuned_stages.contains(&s));
        if tune {
            tunable.push(name.to_string());
        } else {
            frozen.push(name.to_string());
        }
    }
    (frozen, tunable)
}

/// Total element count of the named tensors.
pub fn count_params<S: AsRef<str>>(params: &ModelParams, names: &[S]) -> usize {
    names
        .iter()
        .filter_map(|n| params.get(n.as_ref()))
        .map(|p| p.tensor.len())
        .sum()
}

fn linear(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize) {
    out.push(ParamSpec::new(format!("{prefix}.weight"), &[fan_in, fan_out], Init::Uniform { fan_in }));
    out.push(ParamSpec::new(format!("{prefix}.bias"), &[fan_out], Init::Zeros));
}

fn norm(out: &mut Vec<ParamSpec>, prefix: &str, width: usize) {
    out.push(ParamSpec::new(format!("{prefix}.gamma"), &[width], Init::Ones));
    out.push(ParamSpec::new(format!("{prefix}.beta"), &[width], Init::Zeros));
}

/// Frozen transformer parameters.
pub fn backbone_specs(cfg: &BackboneConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut c_in = 3;
    for s in 0..STAGES {
        let c = cfg.stage_widths[s];
        let k = 2 * cfg.patch_strides[s] - 1;
        let d = cfg.head_dims[s];
        let hidden = cfg.mlp_ratio * c;
        let p = format!("stage{}", s + 1);
        linear(&mut specs, &format!("{p}.embed"), k * k * c_in, c);
        norm(&mut specs, &format!("{p}.embed_norm"), c);
        for b in 0..cfg.stage_depths[s] {
            let bp = format!("{p}.block{b}");
            norm(&mut specs, &format!("{bp}.norm1"), c);
            linear(&mut specs, &format!("{bp}.attn.q"), c, d);
            linear(&mut specs, &format!("{bp}.attn.k"), c, d);
            linear(&mut specs, &format!("{bp}.attn.v"), c, d);
            linear(&mut specs, &format!("{bp}.attn.o"), d, c);
            norm(&mut specs, &format!("{bp}.norm2"), c);
            linear(&mut specs, &format!("{bp}.mlp.fc1"), c, hidden);
            linear(&mut specs, &format!("{bp}.mlp.fc2"), hidden, c);
        }
        norm(&mut specs, &format!("{p}.norm"), c);
        c_in = c;
    }
    specs
}

/// All-MLP decoder parameters.
pub fn decoder_specs(cfg: &BackboneConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let d = cfg.decoder_dim;
    for s in 0..STAGES {
        linear(&mut specs, &format!("decoder.proj{}", s + 1), cfg.stage_widths[s], d);
    }
    linear(&mut specs, "decoder.fuse", STAGES * d, d);
    linear(&mut specs, "decoder.pred", d, 1);
    specs
}

pub fn stage_prompt_dims(cfg: &BackboneConfig, stage: usize) -> StagePromptDims {
    let cum = cfg.cumulative_strides()[stage - 1];
    StagePromptDims {
        stage,
        c_seg: cfg.stage_widths[stage - 1],
        gamma: cfg.gamma,
        depth: cfg.stage_depths[stage - 1],
        xsp_dim: cfg.stage_widths[0],
        token_dim: cum * cum * 3,
        attn_dim: cfg.prompt_attn_dim,
    }
}

/// Prompt parameters for every tuned stage.
pub fn prompt_specs(cfg: &BackboneConfig) -> Result<Vec<ParamSpec>> {
    let layout = cfg.ablation_variant.layout();
    let mut specs = Vec::new();
    for stage in 1..=STAGES {
        if cfg.is_tuned(stage) {
            specs.extend(stage_prompt_specs(&stage_prompt_dims(cfg, stage), layout)?);
        }
    }
    Ok(specs)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Each tensor draws from its own stream keyed by (seed, name), so adding or
/// removing prompt tensors never shifts the frozen weights.
fn init_tensor(spec: &ParamSpec, seed: u64) -> Tensor {
    match spec.init {
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::Ones => Tensor::filled(&spec.shape, 1.0),
        Init::Uniform { fan_in } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(spec.name.as_bytes()));
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(&spec.shape, |_| rng.random_range(-bound..bound))
        }
    }
}

/// Builds and initializes every parameter from `cfg.seed`.
pub fn build_model(cfg: &BackboneConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut params = ModelParams::new();
    let specs = backbone_specs(cfg)
        .into_iter()
        .chain(decoder_specs(cfg))
        .chain(prompt_specs(cfg)?);
    for spec in specs {
        let t = init_tensor(&spec, cfg.seed);
        params.insert(spec.name, t, Role::Frozen);
    }
    let (_, tunable) = partition(&params, &cfg.tuned_stages);
    for name in tunable {
        params.set_role(&name, Role::Tunable);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::AblationVariant;

    #[test]
    fn same_seed_same_tree() {
        let cfg = BackboneConfig::default();
        let a = build_model(&cfg).unwrap();
        let b = build_model(&cfg).unwrap();
        assert!(a.bit_identical(&b));
        let c = build_model(&BackboneConfig { seed: 1, ..cfg }).unwrap();
        assert!(!a.bit_identical(&c));
    }

    #[test]
    fn no_tuned_stages_leaves_decoder_only() {
        let cfg = BackboneConfig {
            tuned_stages: vec![],
            ..Default::default()
        };
        let p = build_model(&cfg).unwrap();
        let tunable = p.names(Role::Tunable);
        assert!(!tunable.is_empty());
        assert!(tunable.iter().all(|n| n.starts_with("decoder.")));
    }

    #[test]
    fn frozen_weights_independent_of_variant() {
        let full = build_model(&BackboneConfig::default()).unwrap();
        let dec = build_model(&BackboneConfig {
            ablation_variant: AblationVariant::DecoderOnly,
            ..Default::default()
        })
        .unwrap();
        for name in dec.names(Role::Frozen) {
            assert_eq!(full.get(&name).unwrap().tensor, dec.get(&name).unwrap().tensor, "{name}");
        }
    }

    #[test]
    fn partition_is_exact() {
        let p = build_model(&BackboneConfig::default()).unwrap();
        let (frozen, tunable) = partition(&p, &[2]);
        assert_eq!(frozen.len() + tunable.len(), p.len());
        assert!(tunable.iter().all(|n| n.starts_with("decoder.") || n.starts_with("prompt2.")));
        assert!(frozen.iter().any(|n| n.starts_with("prompt1.")));
    }

    #[test]
    fn count_basics() {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::zeros(&[3, 4]), Role::Tunable);
        assert_eq!(count_params(&p, &["w"]), 12);
        assert_eq!(count_params::<&str>(&p, &[]), 0);
    }

    #[test]
    fn set_checks_shape() {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::zeros(&[2, 2]), Role::Frozen);
        assert!(p.set("w", Tensor::zeros(&[4])).is_err());
        assert!(p.set("x", Tensor::zeros(&[2, 2])).is_err());
        p.set("w", Tensor::filled(&[2, 2], 1.0)).unwrap();
    }
}

//! Loss, optimizer, training loop, synthetic data and the ablation harness.

use std::sync::Arc;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_model, BackboneConfig, ModelParams, PreparedImage, Role, Segmenter};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, ImageRGB, Sample};
use crate::metrics::{evaluate, MetricReport};
use crate::prompting::AblationVariant;
use crate::tensor::{Tape, Tensor, Var};

/// Balanced BCE of logits `[n×1]` against a mask with `β = #background / #pixels`.
pub fn bbce_loss(tape: &mut Tape, logits: Var, mask: &BinaryMask) -> Result<Var> {
    let n = mask.data.len();
    if n == 0 {
        return Err(Error::config("mask", "mask has no pixels"));
    }
    let beta = (n - mask.foreground()) as f64 / n as f64;
    Ok(tape.balanced_bce(logits, Arc::new(mask.to_tensor()), beta)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Shuffle seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 4,
            max_epochs: 50,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be a finite non-negative number"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be a finite non-negative number"));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps", "must be positive"));
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam over the tunable tensors of a [`ModelParams`].
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `grads` must name exactly the tunable tensors.
    pub fn step(&mut self, params: &mut ModelParams, grads: &IndexMap<String, Tensor>) -> Result<()> {
        let tunable = params.names(Role::Tunable);
        if tunable.len() != grads.len() {
            return Err(Error::Training(format!(
                "{} gradients for {} tunable tensors",
                grads.len(),
                tunable.len()
            )));
        }
        for name in grads.keys() {
            match params.get(name) {
                Some(p) if p.role == Role::Tunable => {}
                Some(_) => return Err(Error::Training(format!("gradient supplied for frozen `{name}`"))),
                None => return Err(Error::Incompatible(format!("unknown parameter `{name}`"))),
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.tensor_mut(name).expect("checked above");
            if g.shape() != p.shape() {
                return Err(Error::Training(format!(
                    "gradient shape {:?} for `{name}` of shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w *= 1.0 - self.lr * self.weight_decay;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Result of [`train`].
#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainReport {
    /// Mean per-sample loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Prepares every sample once; the frozen preprocessing does not change
/// during training.
pub fn prepare_all(model: &Segmenter, params: &ModelParams, samples: &[Sample]) -> Result<Vec<PreparedImage>> {
    samples.iter().map(|s| model.prepare(params, &s.image)).collect()
}

/// Mini-batch AdamW over `samples`. Each epoch reshuffles with a seeded RNG;
/// per-batch gradients are summed in batch order and averaged.
pub fn train(
    model: &Segmenter,
    params: &mut ModelParams,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Training("empty dataset".into()));
    }
    let prepared = prepare_all(model, params, samples)?;
    let mut opt = AdamW::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut sum: Option<IndexMap<String, Tensor>> = None;
            for &i in batch {
                let (loss, grads) = model.loss_and_grads(params, &prepared[i], &samples[i].mask)?;
                if !loss.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss {loss} at epoch {epoch}, sample `{}`",
                        samples[i].name
                    )));
                }
                epoch_loss += loss;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (name, g) in grads {
                            let a = acc.get_mut(&name).expect("same parameter set");
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for g in grads.values_mut() {
                for x in g.data_mut() {
                    *x *= scale;
                }
                if !g.is_finite() {
                    return Err(Error::Training(format!("non-finite gradient at epoch {epoch}")));
                }
            }
            opt.step(params, &grads)?;
        }
        let mean = epoch_loss / samples.len() as f64;
        report.epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }
    report.steps = opt.steps();
    Ok(report)
}

/// Runs the model over `samples` in parallel and scores each prediction.
pub fn evaluate_dataset(model: &Segmenter, params: &ModelParams, samples: &[Sample]) -> Result<Vec<MetricReport>> {
    samples
        .par_iter()
        .map(|s| {
            let pred = model.predict(params, &s.image)?;
            evaluate(&pred, &s.mask)
        })
        .collect()
}

/// Synthetic corpus parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    pub min_fraction: f64,
    pub max_fraction: f64,
    /// Minimum mean-intensity gap between foreground and background.
    pub min_gap: f64,
    /// Standard deviation of the per-pixel Gaussian texture.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            min_blobs: 1,
            max_blobs: 3,
            min_fraction: 0.05,
            max_fraction: 0.6,
            min_gap: 0.2,
            noise: 0.08,
        }
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Mean gray intensity in `[0, 1]` of foreground and background pixels.
pub fn intensity_gap(image: &ImageRGB, mask: &BinaryMask) -> f64 {
    let (mut fg, mut bg, mut nf, mut nb) = (0.0, 0.0, 0usize, 0usize);
    for (i, &m) in mask.data.iter().enumerate() {
        let px = &image.data[3 * i..3 * i + 3];
        let gray = px.iter().map(|&c| c as f64).sum::<f64>() / (3.0 * 255.0);
        if m == 1 {
            fg += gray;
            nf += 1;
        } else {
            bg += gray;
            nb += 1;
        }
    }
    if nf == 0 || nb == 0 {
        return 0.0;
    }
    (fg / nf as f64 - bg / nb as f64).abs()
}

fn blob_sample(rng: &mut ChaCha8Rng, cfg: &SynthConfig, name: String) -> Sample {
    let (h, w) = (cfg.height, cfg.width);
    let normal = Normal::new(0.0, cfg.noise).expect("noise is finite");
    loop {
        let blobs = rng.random_range(cfg.min_blobs..=cfg.max_blobs);
        let mut mask = vec![0u8; h * w];
        for _ in 0..blobs {
            let cy = rng.random_range(0.15..0.85) * h as f64;
            let cx = rng.random_range(0.15..0.85) * w as f64;
            let ry = rng.random_range(0.1..0.3) * h as f64;
            let rx = rng.random_range(0.1..0.3) * w as f64;
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let (s, c) = theta.sin_cos();
            for r in 0..h {
                for col in 0..w {
                    let dy = r as f64 + 0.5 - cy;
                    let dx = col as f64 + 0.5 - cx;
                    let u = dx * c + dy * s;
                    let v = -dx * s + dy * c;
                    if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                        mask[r * w + col] = 1;
                    }
                }
            }
        }
        let bg: f64 = rng.random_range(0.15..0.85);
        let direction = if bg < 0.5 { 1.0 } else { -1.0 };
        let fg = bg + direction * rng.random_range(0.3..0.5);
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
        let mut data = Vec::with_capacity(h * w * 3);
        for &m in &mask {
            let level = if m == 1 { fg } else { bg };
            for t in tint {
                data.push(to_u8(level + t + normal.sample(rng)));
            }
        }
        let image = ImageRGB::new(h, w, data).expect("sized buffer");
        let mask = BinaryMask::new(h, w, mask).expect("binary values");
        let frac = mask.foreground_fraction();
        if frac < cfg.min_fraction || frac > cfg.max_fraction || intensity_gap(&image, &mask) < cfg.min_gap {
            continue;
        }
        return Sample { name, image, mask };
    }
}

/// `n` seeded images with 1–3 elliptical foreground blobs on a textured
/// background. Samples violating the area or contrast bounds are redrawn.
pub fn synth_dataset(n: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::config("n", "need at least one sample"));
    }
    if cfg.height == 0 || cfg.width == 0 {
        return Err(Error::config("size", "height and width must be positive"));
    }
    if cfg.min_blobs == 0 || cfg.min_blobs > cfg.max_blobs {
        return Err(Error::config("min_blobs", "need 1 ≤ min_blobs ≤ max_blobs"));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::config("noise", "must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|i| blob_sample(&mut rng, cfg, format!("synth_{i:04}"))).collect())
}

/// A textured image with no foreground and its empty mask.
pub fn synth_background(cfg: &SynthConfig, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, cfg.noise).expect("noise is finite");
    let bg: f64 = rng.random_range(0.15..0.85);
    let data = (0..cfg.height * cfg.width * 3)
        .map(|_| to_u8(bg + normal.sample(&mut rng)))
        .collect();
    Sample {
        name: "background".into(),
        image: ImageRGB::new(cfg.height, cfg.width, data).expect("sized buffer"),
        mask: BinaryMask::zeros(cfg.height, cfg.width),
    }
}

/// Outcome of training and scoring one variant.
#[derive(Clone, Debug, Serialize)]
pub struct VariantResult {
    pub variant: AblationVariant,
    pub tunable_params: usize,
    pub epoch_losses: Vec<f64>,
    pub summary: MetricReport,
    pub per_sample: Vec<MetricReport>,
}

/// Trains and evaluates one variant from a fresh initialization.
pub fn run_variant(
    backbone: &BackboneConfig,
    train_cfg: &TrainConfig,
    variant: AblationVariant,
    train_set: &[Sample],
    test_set: &[Sample],
) -> Result<(VariantResult, ModelParams)> {
    let cfg = BackboneConfig {
        ablation_variant: variant,
        ..backbone.clone()
    };
    let model = Segmenter::new(cfg.clone())?;
    let mut params = build_model(&cfg)?;
    let tunable_params = crate::backbone::count_params(&params, &params.names(Role::Tunable));
    let report = train(&model, &mut params, train_set, train_cfg, |_, _| {})?;
    let per_sample = evaluate_dataset(&model, &params, test_set)?;
    Ok((
        VariantResult {
            variant,
            tunable_params,
            epoch_losses: report.epoch_losses,
            summary: MetricReport::mean(&per_sample),
            per_sample,
        },
        params,
    ))
}

/// Every variant in [`AblationVariant::ALL`] with the same data and settings.
pub fn run_ablation(
    backbone: &BackboneConfig,
    train_cfg: &TrainConfig,
    train_set: &[Sample],
    test_set: &[Sample],
) -> Result<Vec<VariantResult>> {
    AblationVariant::ALL
        .iter()
        .map(|&v| run_variant(backbone, train_cfg, v, train_set, test_set).map(|(r, _)| r))
        .collect()
}

/// `epoch,loss` lines.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{},{l:.17e}\n", i + 1));
    }
    out
}

/// One row per sample followed by a `mean` row.
pub fn metrics_csv(names: &[String], reports: &[MetricReport]) -> String {
    let mut out = format!("sample,{}\n", MetricReport::FIELDS.join(","));
    let row = |name: &str, r: &MetricReport| {
        let vals: Vec<String> = r.values().iter().map(|v| format!("{v:.6}")).collect();
        format!("{name},{}\n", vals.join(","))
    };
    for (n, r) in names.iter().zip(reports) {
        out.push_str(&row(n, r));
    }
    out.push_str(&row("mean", &MetricReport::mean(reports)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbce_saturated_logits() {
        let mask = BinaryMask::new(1, 4, vec![1; 4]).unwrap();
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::filled(&[4, 1], 30.0), true);
        let l = bbce_loss(&mut tape, z, &mask).unwrap();
        assert!(tape.value(l).item() <= 1e-9);
    }

    #[test]
    fn bbce_zero_logits_balanced() {
        let mask = BinaryMask::new(1, 4, vec![1, 0, 1, 0]).unwrap();
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[4, 1]), true);
        let l = bbce_loss(&mut tape, z, &mask).unwrap();
        assert!((tape.value(l).item() - 0.5 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bbce_shape_mismatch() {
        let mask = BinaryMask::zeros(2, 2);
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[3, 1]), true);
        assert!(bbce_loss(&mut tape, z, &mask).is_err());
    }

    fn scalar_params(value: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::new(vec![1], vec![value]).unwrap(), Role::Tunable);
        p.insert("frozen", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), Role::Frozen);
        p
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_identity() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = scalar_params(0.7);
        let before = p.clone();
        let mut opt = AdamW::new(&cfg);
        let grads = IndexMap::from([("w".to_string(), Tensor::zeros(&[1]))]);
        opt.step(&mut p, &grads).unwrap();
        assert!(p.bit_identical(&before));
    }

    #[test]
    fn adamw_first_step_is_minus_lr() {
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = scalar_params(0.0);
        let mut opt = AdamW::new(&cfg);
        let grads = IndexMap::from([("w".to_string(), Tensor::filled(&[1], 1.0))]);
        opt.step(&mut p, &grads).unwrap();
        let w = p.tensor("w").unwrap().data()[0];
        assert!((w + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15, "{w}");
    }

    #[test]
    fn adamw_rejects_frozen_gradient() {
        let mut p = scalar_params(0.0);
        let mut opt = AdamW::new(&TrainConfig::default());
        let grads = IndexMap::from([("frozen".to_string(), Tensor::zeros(&[2]))]);
        assert!(opt.step(&mut p, &grads).is_err());
    }

    #[test]
    fn synth_respects_bounds() {
        let cfg = SynthConfig::default();
        let data = synth_dataset(20, &cfg, 3).unwrap();
        for s in &data {
            let f = s.mask.foreground_fraction();
            assert!((0.05..=0.6).contains(&f), "{f}");
            assert!(intensity_gap(&s.image, &s.mask) >= 0.2);
        }
        let again = synth_dataset(20, &cfg, 3).unwrap();
        assert!(data.iter().zip(&again).all(|(a, b)| a.image == b.image && a.mask == b.mask));
    }

    #[test]
    fn loss_csv_format() {
        assert_eq!(loss_csv(&[0.5]).lines().next(), Some("epoch,loss"));
        assert_eq!(loss_csv(&[0.5, 0.25]).lines().count(), 3);
    }

    #[test]
    fn train_config_rejects_zero_batch() {
        let cfg = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("`batch_size`"));
    }
}

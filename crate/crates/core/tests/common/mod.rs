//! Independent reference implementations used by the integration tests.
//! Nothing here calls into the library's numerical code paths.

#![allow(dead_code)]

use promptpix::backbone::{BackboneConfig, STAGES};
use promptpix::image::{BinaryMask, ImageRGB};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageRGB {
    let data = (0..h * w * 3).map(|_| rng.random::<u8>()).collect();
    ImageRGB::new(h, w, data).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> BinaryMask {
    let data = (0..h * w).map(|_| u8::from(rng.random_bool(density))).collect();
    BinaryMask::new(h, w, data).unwrap()
}

/// Small model for 16×16 inputs.
pub fn tiny_config() -> BackboneConfig {
    BackboneConfig {
        stage_depths: [1, 2, 1, 1],
        stage_widths: [8, 8, 16, 16],
        patch_strides: [2, 2, 2, 2],
        head_dims: [8, 8, 8, 8],
        decoder_dim: 8,
        prompt_attn_dim: 4,
        superpixels: 4,
        ..Default::default()
    }
}

// ---------------------------------------------------------------- Lloyd

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean features of a `gh × gw` tiling with bands `k·extent/parts`.
pub fn grid_means(feats: &[Vec<f64>], h: usize, w: usize, gh: usize, gw: usize) -> Vec<Vec<f64>> {
    let k = feats[0].len();
    let mut centers = Vec::new();
    for cy in 0..gh {
        for cx in 0..gw {
            let mut sum = vec![0.0; k];
            let mut count = 0.0;
            for r in cy * h / gh..(cy + 1) * h / gh {
                for c in cx * w / gw..(cx + 1) * w / gw {
                    for (s, v) in sum.iter_mut().zip(&feats[r * w + c]) {
                        *s += v;
                    }
                    count += 1.0;
                }
            }
            centers.push(sum.into_iter().map(|s| s / count).collect());
        }
    }
    centers
}

pub fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    for i in 1..centers.len() {
        if sq(p, &centers[i]) < sq(p, &centers[best]) {
            best = i;
        }
    }
    best
}

/// Hard k-means: `iters` assign/update rounds, empty clusters keep their
/// center, then a final nearest-center labeling.
pub fn lloyd(feats: &[Vec<f64>], init: Vec<Vec<f64>>, iters: usize) -> Vec<usize> {
    let mut centers = init;
    let k = feats[0].len();
    for _ in 0..iters {
        let labels: Vec<usize> = feats.iter().map(|p| nearest(p, &centers)).collect();
        let mut sums = vec![vec![0.0; k]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (p, &l) in feats.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for i in 0..centers.len() {
            if counts[i] > 0 {
                centers[i] = sums[i].iter().map(|s| s / counts[i] as f64).collect();
            }
        }
    }
    feats.iter().map(|p| nearest(p, &centers)).collect()
}

// ---------------------------------------------------------------- metrics

pub struct Counts {
    pub tp: f64,
    pub fp: f64,
    pub fn_: f64,
    pub tn: f64,
}

pub fn counts(pred: &[f64], gt: &[u8]) -> Counts {
    let mut c = Counts {
        tp: 0.0,
        fp: 0.0,
        fn_: 0.0,
        tn: 0.0,
    };
    for i in 0..pred.len() {
        let p = pred[i] >= 0.5;
        let g = gt[i] == 1;
        if p && g {
            c.tp += 1.0;
        } else if p {
            c.fp += 1.0;
        } else if g {
            c.fn_ += 1.0;
        } else {
            c.tn += 1.0;
        }
    }
    c
}

pub fn oracle_dice(c: &Counts) -> f64 {
    let den = 2.0 * c.tp + c.fp + c.fn_;
    if den == 0.0 {
        1.0
    } else {
        2.0 * c.tp / den
    }
}

pub fn oracle_miou(c: &Counts) -> f64 {
    let iou = |i: f64, u: f64| if u == 0.0 { 1.0 } else { i / u };
    (iou(c.tp, c.tp + c.fp + c.fn_) + iou(c.tn, c.tn + c.fp + c.fn_)) / 2.0
}

pub fn oracle_accuracy(c: &Counts) -> f64 {
    (c.tp + c.tn) / (c.tp + c.tn + c.fp + c.fn_)
}

pub fn oracle_mae(pred: &[f64], gt: &[u8]) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        s += (pred[i] - gt[i] as f64).abs();
    }
    s / pred.len() as f64
}

const EPS: f64 = 2.220446049250313e-16;

fn grid(v: &[f64], h: usize, w: usize) -> Vec<Vec<f64>> {
    (0..h).map(|r| v[r * w..(r + 1) * w].to_vec()).collect()
}

fn block(m: &[Vec<f64>], r0: usize, r1: usize, c0: usize, c1: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for row in &m[r0..r1] {
        out.extend_from_slice(&row[c0..c1]);
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Object similarity of one side: `2x̄ / (x̄² + 1 + σ + eps)` with the
/// sample standard deviation.
fn obj(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = mean(v);
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    2.0 * m / (m * m + 1.0 + sd + EPS)
}

fn region_ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let x = mean(p);
    let y = mean(g);
    let d = if n > 1.0 { n - 1.0 } else { 1.0 };
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cxy = 0.0;
    for i in 0..p.len() {
        vx += (p[i] - x) * (p[i] - x);
        vy += (g[i] - y) * (g[i] - y);
        cxy += (p[i] - x) * (g[i] - y);
    }
    let (vx, vy, cxy) = (vx / d, vy / d, cxy / d);
    let a = 4.0 * x * y * cxy;
    let b = (x * x + y * y) * (vx + vy);
    if a != 0.0 {
        a / (b + EPS)
    } else if b == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure, α = 0.5, on a continuous prediction.
pub fn reference_s_measure(pred: &[f64], gt: &[u8], h: usize, w: usize) -> f64 {
    let g: Vec<f64> = gt.iter().map(|&v| v as f64).collect();
    let gm = mean(&g);
    if gm == 0.0 {
        return 1.0 - mean(pred);
    }
    if gm == 1.0 {
        return mean(pred);
    }
    let fg: Vec<f64> = (0..pred.len()).filter(|&i| gt[i] == 1).map(|i| pred[i]).collect();
    let bg: Vec<f64> = (0..pred.len()).filter(|&i| gt[i] == 0).map(|i| 1.0 - pred[i]).collect();
    let s_obj = gm * obj(&fg) + (1.0 - gm) * obj(&bg);

    let (mut ry, mut rx, mut k) = (0.0, 0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            if gt[r * w + c] == 1 {
                ry += r as f64;
                rx += c as f64;
                k += 1.0;
            }
        }
    }
    let y = ((ry / k).round_ties_even() as usize + 1).min(h);
    let x = ((rx / k).round_ties_even() as usize + 1).min(w);
    let pg = grid(pred, h, w);
    let gg = grid(&g, h, w);
    let total = (h * w) as f64;
    let mut s_reg = 0.0;
    for (r0, r1, c0, c1) in [(0, y, 0, x), (0, y, x, w), (y, h, 0, x), (y, h, x, w)] {
        if r1 > r0 && c1 > c0 {
            let weight = ((r1 - r0) * (c1 - c0)) as f64 / total;
            s_reg += weight * region_ssim(&block(&pg, r0, r1, c0, c1), &block(&gg, r0, r1, c0, c1));
        }
    }
    (0.5 * s_obj + 0.5 * s_reg).clamp(0.0, 1.0)
}

/// Enhanced-alignment measure of the prediction binarized at 0.5.
pub fn reference_e_measure(pred: &[f64], gt: &[u8]) -> f64 {
    let n = pred.len() as f64;
    let f: Vec<f64> = pred.iter().map(|&p| if p >= 0.5 { 1.0 } else { 0.0 }).collect();
    let g: Vec<f64> = gt.iter().map(|&v| v as f64).collect();
    let gsum: f64 = g.iter().sum();
    let mut phi = 0.0;
    if gsum == 0.0 {
        for v in &f {
            phi += 1.0 - v;
        }
    } else if gsum == n {
        for v in &f {
            phi += v;
        }
    } else {
        let mf = mean(&f);
        let mg = mean(&g);
        for i in 0..f.len() {
            let a = f[i] - mf;
            let b = g[i] - mg;
            let xi = 2.0 * a * b / (a * a + b * b + EPS);
            phi += (1.0 + xi) * (1.0 + xi) / 4.0;
        }
    }
    phi / n
}

// ---------------------------------------------------------------- counts

/// Closed-form tunable parameter count: decoder plus full-variant prompts
/// of every tuned stage.
pub fn closed_form_tunable(cfg: &BackboneConfig, tuned: &[usize]) -> usize {
    let d = cfg.decoder_dim;
    let widths = cfg.stage_widths;
    let decoder: usize = widths.iter().map(|c| c * d + d).sum::<usize>() + (STAGES * d * d + d) + (d + 1);
    let mut cum = 1;
    let mut total = decoder;
    for s in 0..STAGES {
        cum *= cfg.patch_strides[s];
        if !tuned.contains(&(s + 1)) {
            continue;
        }
        let big_c = widths[s];
        let c = big_c / cfg.gamma;
        let t = cum * cum * 3;
        let a = cfg.prompt_attn_dim;
        total += big_c * c + c // image-embedding projection
            + widths[0] * c + c // superpixel feature projection
            + cfg.stage_depths[s] * (c * c + c) // per-block tune
            + c * big_c + big_c // shared up
            + 3 * t * a + a * big_c + big_c; // attention prompt
    }
    total
}

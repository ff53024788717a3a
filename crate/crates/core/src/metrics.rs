//! Binary segmentation quality measures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::BinaryMask;

/// Threshold for the binarized metrics; `pred ≥ 0.5` counts as foreground.
pub const THRESHOLD: f64 = 0.5;

/// Weight of the object term in the S-measure.
pub const S_ALPHA: f64 = 0.5;

const EPS: f64 = f64::EPSILON;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: f64,
    pub miou: f64,
    pub mae: f64,
    pub accuracy: f64,
    pub s_measure: f64,
    pub e_measure: f64,
}

impl MetricReport {
    pub const FIELDS: [&'static str; 6] = ["dice", "miou", "mae", "accuracy", "s_measure", "e_measure"];

    pub fn values(&self) -> [f64; 6] {
        [self.dice, self.miou, self.mae, self.accuracy, self.s_measure, self.e_measure]
    }

    /// Field-wise mean. An empty slice gives all zeros.
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        if reports.is_empty() {
            return MetricReport::default();
        }
        let n = reports.len() as f64;
        let mut acc = [0.0; 6];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        let [dice, miou, mae, accuracy, s_measure, e_measure] = acc.map(|a| a / n);
        MetricReport {
            dice,
            miou,
            mae,
            accuracy,
            s_measure,
            e_measure,
        }
    }
}

/// Confusion counts at [`THRESHOLD`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn new(pred: &[f64], gt: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p >= THRESHOLD, g == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn dice(&self) -> f64 {
        Self::ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn iou_foreground(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn iou_background(&self) -> f64 {
        Self::ratio(self.tn, self.tn + self.fp + self.fn_)
    }

    pub fn miou(&self) -> f64 {
        0.5 * (self.iou_foreground() + self.iou_background())
    }

    pub fn accuracy(&self) -> f64 {
        Self::ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_)
    }
}

fn check(pred: &[f64], mask: &BinaryMask) -> Result<()> {
    if pred.len() != mask.data.len() {
        return Err(Error::Image(crate::image::ImageError::Dimensions(format!(
            "prediction has {} values, mask has {}",
            pred.len(),
            mask.data.len()
        ))));
    }
    if pred.is_empty() {
        return Err(Error::Image(crate::image::ImageError::Dimensions("empty prediction".into())));
    }
    if pred.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::config("prediction", "values must lie in [0, 1]"));
    }
    Ok(())
}

pub fn mae(pred: &[f64], gt: &[u8]) -> f64 {
    let total: f64 = pred.iter().zip(gt).map(|(&p, &g)| (p - g as f64).abs()).sum();
    total / pred.len() as f64
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0, n);
    }
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt(), n)
}

fn object_score(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (mean, std, _) = mean_std(values);
    2.0 * mean / (mean * mean + 1.0 + std + EPS)
}

fn s_object(pred: &[f64], gt: &[u8]) -> f64 {
    let fg = pred.iter().zip(gt).filter(|(_, &g)| g == 1).map(|(&p, _)| p);
    let bg = pred.iter().zip(gt).filter(|(_, &g)| g == 0).map(|(&p, _)| 1.0 - p);
    let u = gt.iter().filter(|&&g| g == 1).count() as f64 / gt.len() as f64;
    u * object_score(fg) + (1.0 - u) * object_score(bg)
}

/// Region SSIM of one rectangular block.
fn ssim(pred: &[f64], gt: &[u8], width: usize, rows: (usize, usize), cols: (usize, usize)) -> f64 {
    let mut p = Vec::new();
    let mut g = Vec::new();
    for r in rows.0..rows.1 {
        for c in cols.0..cols.1 {
            p.push(pred[r * width + c]);
            g.push(gt[r * width + c] as f64);
        }
    }
    let n = p.len() as f64;
    let mx = p.iter().sum::<f64>() / n;
    let my = g.iter().sum::<f64>() / n;
    let den = (n - 1.0).max(1.0);
    let sx = p.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / den;
    let sy = g.iter().map(|v| (v - my).powi(2)).sum::<f64>() / den;
    let sxy = p.iter().zip(&g).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / den;
    let alpha = 4.0 * mx * my * sxy;
    let beta = (mx * mx + my * my) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Foreground centroid as a split point: the rounded (ties to even) mean
/// position plus one.
fn centroid(gt: &[u8], height: usize, width: usize) -> (usize, usize) {
    let mut count = 0usize;
    let (mut sr, mut sc) = (0.0, 0.0);
    for r in 0..height {
        for c in 0..width {
            if gt[r * width + c] == 1 {
                count += 1;
                sr += r as f64;
                sc += c as f64;
            }
        }
    }
    let (y, x) = if count == 0 {
        (height as f64 / 2.0, width as f64 / 2.0)
    } else {
        (sr / count as f64, sc / count as f64)
    };
    let y = y.round_ties_even() as usize + 1;
    let x = x.round_ties_even() as usize + 1;
    (y.min(height), x.min(width))
}

fn s_region(pred: &[f64], gt: &[u8], height: usize, width: usize) -> f64 {
    let (y, x) = centroid(gt, height, width);
    let area = (height * width) as f64;
    let blocks = [
        ((0, y), (0, x)),
        ((0, y), (x, width)),
        ((y, height), (0, x)),
        ((y, height), (x, width)),
    ];
    blocks
        .iter()
        .filter(|(r, c)| r.1 > r.0 && c.1 > c.0)
        .map(|&(r, c)| {
            let weight = ((r.1 - r.0) * (c.1 - c.0)) as f64 / area;
            weight * ssim(pred, gt, width, r, c)
        })
        .sum()
}

/// Structure measure on the continuous map.
pub fn s_measure(pred: &[f64], mask: &BinaryMask) -> Result<f64> {
    check(pred, mask)?;
    let gt = &mask.data;
    let y = mask.foreground_fraction();
    let mean_pred = pred.iter().sum::<f64>() / pred.len() as f64;
    Ok(if y == 0.0 {
        1.0 - mean_pred
    } else if y == 1.0 {
        mean_pred
    } else {
        let s = S_ALPHA * s_object(pred, gt) + (1.0 - S_ALPHA) * s_region(pred, gt, mask.height, mask.width);
        s.clamp(0.0, 1.0)
    })
}

/// Enhanced-alignment measure on the map binarized at [`THRESHOLD`].
pub fn e_measure(pred: &[f64], mask: &BinaryMask) -> Result<f64> {
    check(pred, mask)?;
    let n = pred.len() as f64;
    let fm: Vec<f64> = pred.iter().map(|&p| if p >= THRESHOLD { 1.0 } else { 0.0 }).collect();
    let gt: Vec<f64> = mask.data.iter().map(|&g| g as f64).collect();
    let fg = mask.foreground();
    let total: f64 = if fg == 0 {
        fm.iter().map(|f| 1.0 - f).sum()
    } else if fg == mask.data.len() {
        fm.iter().sum()
    } else {
        let mf = fm.iter().sum::<f64>() / n;
        let mg = gt.iter().sum::<f64>() / n;
        fm.iter()
            .zip(&gt)
            .map(|(f, g)| {
                let (a, b) = (f - mf, g - mg);
                let align = 2.0 * a * b / (a * a + b * b + EPS);
                (align + 1.0).powi(2) / 4.0
            })
            .sum()
    };
    Ok(total / n)
}

/// All six measures for one prediction map in `[0, 1]`.
pub fn evaluate(pred: &[f64], mask: &BinaryMask) -> Result<MetricReport> {
    check(pred, mask)?;
    let c = Confusion::new(pred, &mask.data);
    Ok(MetricReport {
        dice: c.dice(),
        miou: c.miou(),
        mae: mae(pred, &mask.data),
        accuracy: c.accuracy(),
        s_measure: s_measure(pred, mask)?,
        e_measure: e_measure(pred, mask)?,
    })
}

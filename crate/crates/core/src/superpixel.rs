//! Differentiable soft-SLIC superpixels.
//!
//! Pixels and centers live in XYLab space. Each iteration computes squared
//! distances `D[p, i] = ‖I_p − S_i‖²`, turns them into a per-pixel soft
//! membership `Q = softmax_i(−D / temp)`, column-normalizes it into `Q̂`, and
//! moves the centers to `S = Q̂ᵀ · I`. Every step is recorded on a [`Tape`]
//! so gradients flow back into both the pixel features and any features
//! pushed through [`superpixelate`].

use crate::error::{Error, Result};
use crate::image::PixelFeatures;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_ITERS: usize = 5;
pub const DEFAULT_TEMP: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Centers {
    /// `[m×5]` superpixel centers.
    pub s: Tensor,
    pub iteration: usize,
}

impl Centers {
    pub fn m(&self) -> usize {
        self.s.rows()
    }
}

/// Soft pixel–superpixel association for `n` pixels and `m` superpixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Association {
    /// Unnormalized kernel `exp(−D / temp)`; 1 where a pixel sits on a center.
    pub affinity: Tensor,
    /// Row-normalized affinity: each pixel's mixture over superpixels.
    pub q: Tensor,
    /// Column-normalized `q`; every column sums to 1.
    pub qhat: Tensor,
}

impl Association {
    pub fn n(&self) -> usize {
        self.q.rows()
    }

    pub fn m(&self) -> usize {
        self.q.cols()
    }

    /// Largest deviation of a `qhat` column sum from 1.
    pub fn column_sum_error(&self) -> f64 {
        let (n, m) = (self.n(), self.m());
        (0..m)
            .map(|i| ((0..n).map(|p| self.qhat.get(p, i)).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Nearest-center label per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardAssignment {
    pub labels: Vec<usize>,
}

/// Tape handles for an association recorded by [`soft_assign_on`].
#[derive(Clone, Copy, Debug)]
pub struct AssociationVars {
    pub q: Var,
    pub qhat: Var,
}

/// Picks the `gh × gw = m` factorization closest to the image aspect ratio
/// that fits inside the image. Ties go to the smaller `gh`.
pub fn grid_shape(height: usize, width: usize, m: usize) -> Result<(usize, usize)> {
    let n = height * width;
    if m == 0 || m > n {
        return Err(Error::InvalidCount {
            m,
            n,
            reason: "need 1 <= m <= n".into(),
        });
    }
    let aspect = (height as f64 / width as f64).ln();
    (1..=m)
        .filter(|gh| m % gh == 0)
        .map(|gh| (gh, m / gh))
        .filter(|&(gh, gw)| gh <= height && gw <= width)
        .min_by(|a, b| {
            let da = ((a.0 as f64 / a.1 as f64).ln() - aspect).abs();
            let db = ((b.0 as f64 / b.1 as f64).ln() - aspect).abs();
            da.total_cmp(&db).then(a.0.cmp(&b.0))
        })
        .ok_or_else(|| Error::InvalidCount {
            m,
            n,
            reason: format!("no grid factorization fits a {height}x{width} image"),
        })
}

/// Band `k` of `parts` equal-ish bands over `extent` cells.
fn band(k: usize, parts: usize, extent: usize) -> std::ops::Range<usize> {
    (k * extent / parts)..((k + 1) * extent / parts)
}

/// Initial centers: mean features of the `gh × gw` rectangular cells tiling
/// the image.
pub fn init_centers(feats: &PixelFeatures, m: usize) -> Result<Centers> {
    let (h, w) = (feats.height, feats.width);
    let (gh, gw) = grid_shape(h, w, m)?;
    let dims = feats.matrix.cols();
    let mut s = Tensor::zeros(&[m, dims]);
    for cy in 0..gh {
        for cx in 0..gw {
            let i = cy * gw + cx;
            let mut count = 0.0;
            for r in band(cy, gh, h) {
                for c in band(cx, gw, w) {
                    let row = feats.matrix.row(r * w + c);
                    for (d, v) in row.iter().enumerate() {
                        s.set(i, d, s.get(i, d) + v);
                    }
                    count += 1.0;
                }
            }
            for d in 0..dims {
                s.set(i, d, s.get(i, d) / count);
            }
        }
    }
    Ok(Centers { s, iteration: 0 })
}

fn check_temp(temp: f64) -> Result<()> {
    if temp > 0.0 && temp.is_finite() {
        Ok(())
    } else {
        Err(Error::config("temp", format!("must be positive, got {temp}")))
    }
}

/// Records the soft association of `feats [n×k]` to `centers [m×k]`.
pub fn soft_assign_on(tape: &mut Tape, feats: Var, centers: Var, temp: f64) -> Result<AssociationVars> {
    check_temp(temp)?;
    let d = tape.sq_dist(feats, centers)?;
    let logits = tape.scale(d, -1.0 / temp);
    let log_q = tape.log_softmax_rows(logits)?;
    let q = tape.exp(log_q);
    // softmax over pixels of log q is q / Σ_p q, computed without underflow
    let log_q_t = tape.transpose(log_q)?;
    let qhat_t = tape.softmax_rows(log_q_t)?;
    let qhat = tape.transpose(qhat_t)?;
    Ok(AssociationVars { q, qhat })
}

/// Records `S = Q̂ᵀ · I`.
pub fn update_centers_on(tape: &mut Tape, assoc: &AssociationVars, feats: Var) -> Result<Var> {
    let qt = tape.transpose(assoc.qhat)?;
    Ok(tape.matmul(qt, feats)?)
}

/// Records `X_sp = Q · (Q̂ᵀ · X)`: pool pixel features into superpixel
/// descriptors, then spread them back by each pixel's membership.
pub fn superpixelate_on(tape: &mut Tape, assoc: &AssociationVars, x: Var) -> Result<Var> {
    let n = tape.value(assoc.q).rows();
    if tape.value(x).rows() != n {
        return Err(crate::tensor::TensorError::Shape {
            op: "superpixelate",
            lhs: tape.value(assoc.q).shape().to_vec(),
            rhs: tape.value(x).shape().to_vec(),
        }
        .into());
    }
    let qt = tape.transpose(assoc.qhat)?;
    let pooled = tape.matmul(qt, x)?;
    Ok(tape.matmul(assoc.q, pooled)?)
}

/// Records `t` alternating assign/update steps from `init` and returns the
/// last association plus the center variables after every update.
pub fn iterate_on(
    tape: &mut Tape,
    feats: Var,
    init: Var,
    iters: usize,
    temp: f64,
) -> Result<(AssociationVars, Vec<Var>)> {
    if iters == 0 {
        return Err(Error::config("iters", "must be at least 1"));
    }
    let mut centers = init;
    let mut history = Vec::with_capacity(iters);
    let mut assoc = None;
    for _ in 0..iters {
        let a = soft_assign_on(tape, feats, centers, temp)?;
        centers = update_centers_on(tape, &a, feats)?;
        history.push(centers);
        assoc = Some(a);
    }
    Ok((assoc.expect("iters >= 1"), history))
}

fn affinity(feats: &Tensor, centers: &Tensor, temp: f64) -> Tensor {
    let (n, m) = (feats.rows(), centers.rows());
    let mut out = Tensor::zeros(&[n, m]);
    for p in 0..n {
        for i in 0..m {
            let d: f64 = feats
                .row(p)
                .iter()
                .zip(centers.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out.set(p, i, (-d / temp).exp());
        }
    }
    out
}

/// Soft association of pixels to fixed centers.
pub fn soft_assign(feats: &PixelFeatures, centers: &Centers, temp: f64) -> Result<Association> {
    let mut tape = Tape::new();
    let f = tape.constant(feats.matrix.clone());
    let c = tape.constant(centers.s.clone());
    let vars = soft_assign_on(&mut tape, f, c, temp)?;
    Ok(Association {
        affinity: affinity(&feats.matrix, &centers.s, temp),
        q: tape.value(vars.q).clone(),
        qhat: tape.value(vars.qhat).clone(),
    })
}

pub fn update_centers(assoc: &Association, feats: &PixelFeatures, iteration: usize) -> Result<Centers> {
    if assoc.n() != feats.n() {
        return Err(crate::tensor::TensorError::Shape {
            op: "update_centers",
            lhs: assoc.qhat.shape().to_vec(),
            rhs: feats.matrix.shape().to_vec(),
        }
        .into());
    }
    let mut tape = Tape::new();
    let qhat = tape.constant(assoc.qhat.clone());
    let q = tape.constant(assoc.q.clone());
    let f = tape.constant(feats.matrix.clone());
    let s = update_centers_on(&mut tape, &AssociationVars { q, qhat }, f)?;
    Ok(Centers {
        s: tape.value(s).clone(),
        iteration,
    })
}

/// Runs `iters` soft-SLIC iterations from the grid initialization.
pub fn iterate(feats: &PixelFeatures, m: usize, iters: usize, temp: f64) -> Result<(Association, Centers)> {
    if iters == 0 {
        return Err(Error::config("iters", "must be at least 1"));
    }
    let mut centers = init_centers(feats, m)?;
    let mut assoc = None;
    for t in 1..=iters {
        let a = soft_assign(feats, &centers, temp)?;
        centers = update_centers(&a, feats, t)?;
        assoc = Some(a);
    }
    Ok((assoc.expect("iters >= 1"), centers))
}

/// Nearest center per pixel under squared Euclidean distance; ties go to
/// the lowest center index.
pub fn hard_assign(feats: &PixelFeatures, centers: &Centers) -> HardAssignment {
    let labels = (0..feats.n())
        .map(|p| {
            let px = feats.matrix.row(p);
            let mut best = (0, f64::INFINITY);
            for i in 0..centers.m() {
                let d: f64 = px
                    .iter()
                    .zip(centers.s.row(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.1 {
                    best = (i, d);
                }
            }
            best.0
        })
        .collect();
    HardAssignment { labels }
}

/// Super-pixelated features `Q · (Q̂ᵀ · X)` for `X [n×d]`.
pub fn superpixelate(assoc: &Association, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let q = tape.constant(assoc.q.clone());
    let qhat = tape.constant(assoc.qhat.clone());
    let xv = tape.constant(x.clone());
    let out = superpixelate_on(&mut tape, &AssociationVars { q, qhat }, xv)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{build_xylab, ImageRGB};

    fn feats_from_rows(rows: &[[f64; 5]], h: usize, w: usize) -> PixelFeatures {
        PixelFeatures {
            height: h,
            width: w,
            pos_scale: 1.0,
            matrix: Tensor::from_rows(rows).unwrap(),
        }
    }

    #[test]
    fn grid_shape_follows_aspect() {
        assert_eq!(grid_shape(4, 4, 4).unwrap(), (2, 2));
        assert_eq!(grid_shape(8, 16, 8).unwrap(), (2, 4));
        assert_eq!(grid_shape(4, 4, 16).unwrap(), (4, 4));
        assert!(matches!(grid_shape(2, 2, 5), Err(Error::InvalidCount { .. })));
        assert!(matches!(grid_shape(4, 4, 7), Err(Error::InvalidCount { .. })));
    }

    #[test]
    fn single_center_is_global_mean() {
        let img = ImageRGB::new(2, 2, vec![0, 0, 0, 50, 60, 70, 200, 10, 30, 255, 255, 255]).unwrap();
        let f = build_xylab(&img, 1.0).unwrap();
        let c = init_centers(&f, 1).unwrap();
        for d in 0..5 {
            let mean: f64 = (0..4).map(|p| f.matrix.get(p, d)).sum::<f64>() / 4.0;
            assert!((c.s.get(0, d) - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn one_center_per_pixel() {
        let img = ImageRGB::new(2, 2, vec![0, 0, 0, 50, 60, 70, 200, 10, 30, 255, 255, 255]).unwrap();
        let f = build_xylab(&img, 1.0).unwrap();
        let c = init_centers(&f, 4).unwrap();
        assert_eq!(c.s, f.matrix);
    }

    #[test]
    fn pixel_on_center_has_unit_affinity() {
        let f = feats_from_rows(&[[0.2, 0.3, 0.5, 0.0, 0.1], [1.0, 1.0, 0.0, 0.0, 0.0]], 1, 2);
        let c = Centers {
            s: Tensor::from_rows(&[[0.2, 0.3, 0.5, 0.0, 0.1]]).unwrap(),
            iteration: 0,
        };
        let a = soft_assign(&f, &c, 1.0).unwrap();
        assert_eq!(a.affinity.get(0, 0), 1.0);
        assert!(a.affinity.get(1, 0) < 1.0);
    }

    #[test]
    fn single_pixel_single_superpixel() {
        let f = feats_from_rows(&[[0.0, 0.0, 0.4, 0.1, 0.1]], 1, 1);
        let c = init_centers(&f, 1).unwrap();
        let a = soft_assign(&f, &c, 1.0).unwrap();
        assert_eq!(a.qhat.data(), &[1.0]);
        assert_eq!(a.q.data(), &[1.0]);
    }

    #[test]
    fn symmetric_pixels_share_equally() {
        let f = feats_from_rows(&[[0.0, 0.0, 0.5, 0.0, 0.0], [1.0, 0.0, 0.5, 0.0, 0.0]], 1, 2);
        let c = Centers {
            s: Tensor::from_rows(&[[0.5, 0.0, 0.5, 0.0, 0.0]]).unwrap(),
            iteration: 0,
        };
        let a = soft_assign(&f, &c, 1.0).unwrap();
        assert!((a.qhat.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((a.qhat.get(1, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identical_pixels_collapse_centers() {
        let row = [0.3, 0.3, 0.7, 0.1, -0.2];
        let f = feats_from_rows(&[row; 6], 2, 3);
        let c = Centers {
            s: Tensor::from_rows(&[[0.0; 5], [1.0; 5]]).unwrap(),
            iteration: 0,
        };
        let a = soft_assign(&f, &c, 1.0).unwrap();
        let s = update_centers(&a, &f, 1).unwrap();
        for i in 0..2 {
            for d in 0..5 {
                assert!((s.s.get(i, d) - row[d]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hard_assign_exact_and_tie() {
        let f = feats_from_rows(&[[3.0, 0.0, 0.0, 0.0, 0.0], [1.5, 0.0, 0.0, 0.0, 0.0]], 1, 2);
        let c = Centers {
            s: Tensor::from_rows(&[
                [0.0; 5],
                [1.0, 0.0, 0.0, 0.0, 0.0],
                [2.0, 0.0, 0.0, 0.0, 0.0],
                [3.0, 0.0, 0.0, 0.0, 0.0],
            ])
            .unwrap(),
            iteration: 0,
        };
        assert_eq!(hard_assign(&f, &c).labels, vec![3, 1]);
    }

    #[test]
    fn superpixelate_rejects_row_mismatch() {
        let f = feats_from_rows(&[[0.0; 5], [1.0; 5]], 1, 2);
        let (a, _) = iterate(&f, 1, 1, 1.0).unwrap();
        assert!(superpixelate(&a, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn zero_iterations_rejected() {
        let f = feats_from_rows(&[[0.0; 5]], 1, 1);
        assert!(iterate(&f, 1, 0, 1.0).is_err());
        assert!(iterate(&f, 1, 1, 0.0).is_err());
    }
}

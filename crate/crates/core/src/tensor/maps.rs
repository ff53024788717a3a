use super::{Result, TensorError};

/// A constant sparse linear map over rows: `out[r, :] = Σ w · in[j, :]`.
///
/// Used for bilinear resizing and block-mean pooling of token grids, where
/// rows are grid positions in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMix {
    in_rows: usize,
    entries: Vec<Vec<(usize, f64)>>,
}

impl RowMix {
    pub fn new(in_rows: usize, entries: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        for row in &entries {
            if let Some(&(j, _)) = row.iter().find(|(j, _)| *j >= in_rows) {
                return Err(TensorError::Invalid(format!(
                    "row mix references input row {j} of {in_rows}"
                )));
            }
        }
        Ok(Self { in_rows, entries })
    }

    pub fn in_rows(&self) -> usize {
        self.in_rows
    }

    pub fn out_rows(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[Vec<(usize, f64)>] {
        &self.entries
    }

    /// Bilinear resampling with half-pixel centers (`align_corners = false`).
    pub fn bilinear(h_in: usize, w_in: usize, h_out: usize, w_out: usize) -> Self {
        let axis = |n_in: usize, n_out: usize, dst: usize| -> (usize, usize, f64) {
            let scale = n_in as f64 / n_out as f64;
            let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        };
        let mut entries = Vec::with_capacity(h_out * w_out);
        for y in 0..h_out {
            let (y0, y1, fy) = axis(h_in, h_out, y);
            for x in 0..w_out {
                let (x0, x1, fx) = axis(w_in, w_out, x);
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
                let mut push = |j: usize, w: f64| {
                    if w == 0.0 {
                        return;
                    }
                    if let Some(e) = row.iter_mut().find(|e| e.0 == j) {
                        e.1 += w;
                    } else {
                        row.push((j, w));
                    }
                };
                push(y0 * w_in + x0, (1.0 - fy) * (1.0 - fx));
                push(y0 * w_in + x1, (1.0 - fy) * fx);
                push(y1 * w_in + x0, fy * (1.0 - fx));
                push(y1 * w_in + x1, fy * fx);
                entries.push(row);
            }
        }
        Self {
            in_rows: h_in * w_in,
            entries,
        }
    }

    /// Averages non-overlapping `factor × factor` blocks of an `h × w` grid.
    pub fn block_mean(h: usize, w: usize, factor: usize) -> Result<Self> {
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(TensorError::Invalid(format!(
                "grid {h}x{w} is not divisible by pooling factor {factor}"
            )));
        }
        let (ho, wo) = (h / factor, w / factor);
        let weight = 1.0 / (factor * factor) as f64;
        let mut entries = Vec::with_capacity(ho * wo);
        for by in 0..ho {
            for bx in 0..wo {
                let mut row = Vec::with_capacity(factor * factor);
                for dy in 0..factor {
                    for dx in 0..factor {
                        row.push(((by * factor + dy) * w + bx * factor + dx, weight));
                    }
                }
                entries.push(row);
            }
        }
        Ok(Self {
            in_rows: h * w,
            entries,
        })
    }
}

/// A constant gather: each output element copies one input element or is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct GatherMap {
    out_shape: Vec<usize>,
    in_len: usize,
    index: Vec<Option<usize>>,
}

impl GatherMap {
    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn index(&self) -> &[Option<usize>] {
        &self.index
    }

    /// Unfolds `kernel × kernel` windows of a `[h·w, channels]` grid into rows
    /// of length `kernel²·channels`, ordered (ky, kx, channel). Out-of-range
    /// taps read zero padding.
    pub fn im2col(
        h: usize,
        w: usize,
        channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(TensorError::Invalid(format!(
                "im2col: kernel {kernel} stride {stride} pad {pad} on {h}x{w}"
            )));
        }
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (w + 2 * pad - kernel) / stride + 1;
        let cols = kernel * kernel * channels;
        let mut index = Vec::with_capacity(ho * wo * cols);
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                        for c in 0..channels {
                            index.push(
                                inside.then(|| (iy as usize * w + ix as usize) * channels + c),
                            );
                        }
                    }
                }
            }
        }
        Ok(Self {
            out_shape: vec![ho * wo, cols],
            in_len: h * w * channels,
            index,
        })
    }

    /// Output grid extents of [`GatherMap::im2col`] with the same arguments.
    pub fn im2col_grid(h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> (usize, usize) {
        (
            (h + 2 * pad - kernel) / stride + 1,
            (w + 2 * pad - kernel) / stride + 1,
        )
    }
}

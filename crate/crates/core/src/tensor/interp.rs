//! Corner-aligned bilinear sampling.
//!
//! Output index `o` of an axis with `n_out` samples maps to the source
//! coordinate `start + o * (end - start) / (n_out - 1)`, so the first and last
//! output samples land exactly on `start` and `end`. Upsampling by a factor
//! uses `start = 0, end = n - 1`; crops use the first and last source pixel of
//! the crop rectangle. Every resize in the crate goes through these taps so a
//! crop followed by its inverse remap is consistent.

use super::Tensor;
use crate::error::{Error, Result};

/// Source taps `(lo, hi, weight_of_hi)` for every output index along one axis.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisTaps {
    taps: Vec<(usize, usize, f64)>,
    n_src: usize,
}

impl AxisTaps {
    pub fn linspace(start: f64, end: f64, n_out: usize, n_src: usize) -> Self {
        assert!(n_src > 0, "empty source axis");
        let step = if n_out > 1 {
            (end - start) / (n_out - 1) as f64
        } else {
            0.0
        };
        let last = (n_src - 1) as f64;
        let taps = (0..n_out)
            .map(|o| {
                let src = (start + o as f64 * step).clamp(0.0, last);
                let lo = (src.floor() as usize).min(n_src - 1);
                let hi = (lo + 1).min(n_src - 1);
                (lo, hi, src - lo as f64)
            })
            .collect();
        AxisTaps { taps, n_src }
    }

    /// Taps for scaling an axis of length `n` to `n * factor` samples.
    pub fn upsample(n: usize, factor: usize) -> Self {
        Self::linspace(0.0, (n - 1) as f64, n * factor, n)
    }

    /// Taps for resizing a full axis of length `n_src` to `n_out` samples.
    pub fn resize(n_src: usize, n_out: usize) -> Self {
        Self::linspace(0.0, (n_src - 1) as f64, n_out, n_src)
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn src_len(&self) -> usize {
        self.n_src
    }
}

/// Bilinear resample of a `channels × rows.src_len() × cols.src_len()` buffer.
pub fn resample(data: &[f64], channels: usize, rows: &AxisTaps, cols: &AxisTaps) -> Vec<f64> {
    let (h, w) = (rows.n_src, cols.n_src);
    debug_assert_eq!(data.len(), channels * h * w);
    let mut out = Vec::with_capacity(channels * rows.len() * cols.len());
    for c in 0..channels {
        let plane = &data[c * h * w..(c + 1) * h * w];
        for &(r0, r1, wr) in &rows.taps {
            let top = &plane[r0 * w..(r0 + 1) * w];
            let bot = &plane[r1 * w..(r1 + 1) * w];
            for &(c0, c1, wc) in &cols.taps {
                let a = (1.0 - wc) * top[c0] + wc * top[c1];
                let b = (1.0 - wc) * bot[c0] + wc * bot[c1];
                out.push((1.0 - wr) * a + wr * b);
            }
        }
    }
    out
}

/// Adjoint of [`resample`]: scatters output gradients back onto the source grid.
pub fn resample_adjoint(grad: &[f64], channels: usize, rows: &AxisTaps, cols: &AxisTaps) -> Vec<f64> {
    let (h, w) = (rows.n_src, cols.n_src);
    let (oh, ow) = (rows.len(), cols.len());
    debug_assert_eq!(grad.len(), channels * oh * ow);
    let mut out = vec![0.0; channels * h * w];
    for c in 0..channels {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        let g = &grad[c * oh * ow..(c + 1) * oh * ow];
        for (i, &(r0, r1, wr)) in rows.taps.iter().enumerate() {
            for (j, &(c0, c1, wc)) in cols.taps.iter().enumerate() {
                let v = g[i * ow + j];
                plane[r0 * w + c0] += (1.0 - wr) * (1.0 - wc) * v;
                plane[r0 * w + c1] += (1.0 - wr) * wc * v;
                plane[r1 * w + c0] += wr * (1.0 - wc) * v;
                plane[r1 * w + c1] += wr * wc * v;
            }
        }
    }
    out
}

/// Corner-aligned bilinear upsampling of a C×H×W tensor by an integer factor.
pub fn upsample(t: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(Error::Argument(format!("upsample factor must be ≥ 1, got {factor}")));
    }
    let (c, h, w) = t.dims3("upsample")?;
    let rows = AxisTaps::upsample(h, factor);
    let cols = AxisTaps::upsample(w, factor);
    Tensor::new([c, h * factor, w * factor], resample(t.data(), c, &rows, &cols))
}

/// Corner-aligned bilinear resize of a C×H×W tensor to `out_h × out_w`.
pub fn resize(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = t.dims3("resize")?;
    let rows = AxisTaps::resize(h, out_h);
    let cols = AxisTaps::resize(w, out_w);
    Tensor::new([c, out_h, out_w], resample(t.data(), c, &rows, &cols))
}

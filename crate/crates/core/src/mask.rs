use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary H×W mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinMask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl BinMask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape {
                op: "bin_mask",
                detail: format!("{h}×{w} mask needs {} values, got {}", h * w, data.len()),
            });
        }
        Ok(BinMask { h, w, data })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        BinMask {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        BinMask { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.w + c] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub(crate) fn check_same(&self, other: &BinMask, op: &'static str) -> Result<()> {
        if self.h != other.h {
            return Err(Error::Dimension {
                op,
                axis: "height",
                expected: self.h,
                got: other.h,
            });
        }
        if self.w != other.w {
            return Err(Error::Dimension {
                op,
                axis: "width",
                expected: self.w,
                got: other.w,
            });
        }
        Ok(())
    }

    /// Tight bounding box `(top, left, bottom_exclusive, right_exclusive)`.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for (i, _) in self.data.iter().enumerate().filter(|(_, &b)| b) {
            let (r, c) = (i / self.w, i % self.w);
            bb = Some(match bb {
                None => (r, c, r + 1, c + 1),
                Some((t, l, b, rr)) => (t.min(r), l.min(c), b.max(r + 1), rr.max(c + 1)),
            });
        }
        bb
    }

    pub fn to_prob(&self) -> ProbMask {
        ProbMask {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Run-length encoding of a [`BinMask`]: alternating run lengths in row-major
/// order, starting with a (possibly empty) background run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<usize>,
    pub order: String,
}

pub const RLE_ORDER: &str = "row-major";

impl BinMask {
    pub fn to_rle(&self) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0;
        for &b in &self.data {
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        counts.push(run);
        Rle {
            height: self.h,
            width: self.w,
            counts,
            order: RLE_ORDER.into(),
        }
    }

    pub fn from_rle(rle: &Rle) -> Result<Self> {
        if rle.order != RLE_ORDER {
            return Err(Error::Argument(format!("unsupported run order {:?}", rle.order)));
        }
        let total: usize = rle.counts.iter().sum();
        if total != rle.height * rle.width {
            return Err(Error::Argument(format!(
                "runs cover {total} pixels, mask has {}",
                rle.height * rle.width
            )));
        }
        let mut data = Vec::with_capacity(total);
        for (i, &n) in rle.counts.iter().enumerate() {
            data.extend(std::iter::repeat_n(i % 2 == 1, n));
        }
        BinMask::new(rle.height, rle.width, data)
    }
}

/// Per-pixel foreground probability, H×W row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbMask {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl ProbMask {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape {
                op: "prob_mask",
                detail: format!("{h}×{w} map needs {} values, got {}", h * w, data.len()),
            });
        }
        Ok(ProbMask { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self::constant(h, w, 0.0)
    }

    pub fn constant(h: usize, w: usize, v: f64) -> Self {
        ProbMask {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    /// Views a 1×H×W (or H×W) tensor as a probability map.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[1, h, w] | &[h, w] => Self::new(h, w, t.data().to_vec()),
            s => Err(Error::Shape {
                op: "prob_mask",
                detail: format!("expected 1×H×W, got {s:?}"),
            }),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, self.h, self.w], self.data.clone()).expect("consistent dims")
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }

    /// Foreground where `p >= threshold`.
    pub fn binarize(&self, threshold: f64) -> BinMask {
        BinMask {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&p| p >= threshold).collect(),
        }
    }
}

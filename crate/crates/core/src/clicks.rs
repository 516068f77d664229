//! Clicks, disk guidance maps and the robot user.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::cascade::ZoomRegion;
use crate::error::{Error, Result};
use crate::mask::BinMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

/// A user annotation at pixel `(row, col)`. `step` is the 1-based interaction
/// index at which it was placed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Click {
    pub row: usize,
    pub col: usize,
    pub polarity: Polarity,
    pub step: usize,
}

impl Click {
    pub fn new(row: usize, col: usize, polarity: Polarity, step: usize) -> Self {
        Click {
            row,
            col,
            polarity,
            step,
        }
    }

    pub fn positive(row: usize, col: usize) -> Self {
        Self::new(row, col, Polarity::Positive, 1)
    }

    pub fn negative(row: usize, col: usize) -> Self {
        Self::new(row, col, Polarity::Negative, 1)
    }

    pub fn same_pixel(&self, other: &Click) -> bool {
        self.row == other.row && self.col == other.col
    }
}

/// Ordered clicks of one episode; serializes as a JSON array of clicks.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClickSet(pub Vec<Click>);

impl ClickSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Click] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Click> {
        self.0.iter()
    }

    pub fn push(&mut self, c: Click) {
        self.0.push(c);
    }

    pub fn pop(&mut self) -> Option<Click> {
        self.0.pop()
    }

    pub fn contains_pixel(&self, row: usize, col: usize) -> bool {
        self.0.iter().any(|c| c.row == row && c.col == col)
    }

    pub fn next_step(&self) -> usize {
        self.0.iter().map(|c| c.step).max().unwrap_or(0) + 1
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("clicks serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

impl FromIterator<Click> for ClickSet {
    fn from_iter<I: IntoIterator<Item = Click>>(iter: I) -> Self {
        ClickSet(iter.into_iter().collect())
    }
}

/// Disk radius used for guidance maps.
pub const DEFAULT_DISK_RADIUS: usize = 5;

/// Binary positive/negative click heatmaps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GuidanceMaps {
    pub pos: BinMask,
    pub neg: BinMask,
}

fn check_bounds(c: &Click, h: usize, w: usize) -> Result<()> {
    if c.row >= h || c.col >= w {
        return Err(Error::Argument(format!(
            "click at ({}, {}) outside {h}×{w} image",
            c.row, c.col
        )));
    }
    Ok(())
}

/// Union of radius-`radius` disks (Euclidean, inclusive) around the clicks of
/// each polarity, clipped at the image border.
pub fn encode_clicks(clicks: &[Click], h: usize, w: usize, radius: usize) -> Result<GuidanceMaps> {
    let mut pos = BinMask::empty(h, w);
    let mut neg = BinMask::empty(h, w);
    let r2 = (radius * radius) as isize;
    for c in clicks {
        check_bounds(c, h, w)?;
        let target = match c.polarity {
            Polarity::Positive => &mut pos,
            Polarity::Negative => &mut neg,
        };
        let r0 = c.row.saturating_sub(radius);
        let r1 = (c.row + radius).min(h - 1);
        let c0 = c.col.saturating_sub(radius);
        let c1 = (c.col + radius).min(w - 1);
        for r in r0..=r1 {
            let dr = r as isize - c.row as isize;
            for col in c0..=c1 {
                let dc = col as isize - c.col as isize;
                if dr * dr + dc * dc <= r2 {
                    target.set(r, col, true);
                }
            }
        }
    }
    Ok(GuidanceMaps { pos, neg })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// Predicted foreground on ground-truth background.
    FalsePositive,
    /// Missed ground-truth foreground.
    FalseNegative,
}

impl ErrorKind {
    /// Polarity of the click that corrects this kind of error.
    pub fn corrective_polarity(self) -> Polarity {
        match self {
            ErrorKind::FalseNegative => Polarity::Positive,
            ErrorKind::FalsePositive => Polarity::Negative,
        }
    }
}

/// A 4-connected region of same-kind error pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ErrorRegion {
    pub kind: ErrorKind,
    /// Flat row-major pixel indices, ascending.
    pub pixels: Vec<usize>,
    /// `(min_row, min_col)` of the bounding box.
    pub top_left: (usize, usize),
}

impl ErrorRegion {
    pub fn size(&self) -> usize {
        self.pixels.len()
    }
}

/// 4-connected components of `pred XOR gt`, split by error kind, largest
/// first; equal sizes are ordered by bounding-box top-left `(row, col)`.
pub fn error_regions(pred: &BinMask, gt: &BinMask) -> Result<Vec<ErrorRegion>> {
    pred.check_same(gt, "error_regions")?;
    let (h, w) = gt.dims();
    let kind_at = |i: usize| -> Option<ErrorKind> {
        match (pred.data()[i], gt.data()[i]) {
            (true, false) => Some(ErrorKind::FalsePositive),
            (false, true) => Some(ErrorKind::FalseNegative),
            _ => None,
        }
    };
    let mut seen = vec![false; h * w];
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        let Some(kind) = kind_at(start) else { continue };
        if seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            pixels.push(i);
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if !seen[j] && kind_at(j) == Some(kind) {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        pixels.sort_unstable();
        let top = pixels[0] / w;
        let left = pixels.iter().map(|&i| i % w).min().expect("nonempty");
        regions.push(ErrorRegion {
            kind,
            pixels,
            top_left: (top, left),
        });
    }
    regions.sort_by(|a, b| {
        b.size()
            .cmp(&a.size())
            .then(a.top_left.cmp(&b.top_left))
            .then(a.pixels[0].cmp(&b.pixels[0]))
    });
    Ok(regions)
}

/// Squared Euclidean distance from every pixel to the nearest pixel outside
/// `inside`, where everything beyond the image border counts as outside.
/// Exact, separable lower-envelope transform.
pub fn squared_distance_to_outside(inside: &[bool], h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2, w + 2);
    let inf = ((ph * ph + pw * pw) as f64) * 4.0;
    let mut grid = vec![0.0; ph * pw];
    for r in 0..h {
        for c in 0..w {
            if inside[r * w + c] {
                grid[(r + 1) * pw + c + 1] = inf;
            }
        }
    }
    let mut buf = vec![0.0; ph.max(pw)];
    let mut out = vec![0.0; ph.max(pw)];
    for c in 0..pw {
        for r in 0..ph {
            buf[r] = grid[r * pw + c];
        }
        lower_envelope_1d(&buf[..ph], &mut out[..ph]);
        for r in 0..ph {
            grid[r * pw + c] = out[r];
        }
    }
    for r in 0..ph {
        buf[..pw].copy_from_slice(&grid[r * pw..(r + 1) * pw]);
        lower_envelope_1d(&buf[..pw], &mut out[..pw]);
        grid[r * pw..(r + 1) * pw].copy_from_slice(&out[..pw]);
    }
    let mut d = Vec::with_capacity(h * w);
    for r in 0..h {
        d.extend_from_slice(&grid[(r + 1) * pw + 1..(r + 1) * pw + 1 + w]);
    }
    d
}

/// Squared Euclidean distance from every pixel to the nearest pixel of `set`
/// (no border effect). All values are huge when `set` is empty.
pub fn squared_distance_to_set(set: &[bool], h: usize, w: usize) -> Vec<f64> {
    let inf = ((h * h + w * w) as f64) * 4.0;
    let mut grid: Vec<f64> = set.iter().map(|&b| if b { 0.0 } else { inf }).collect();
    let mut buf = vec![0.0; h.max(w)];
    let mut out = vec![0.0; h.max(w)];
    for c in 0..w {
        for r in 0..h {
            buf[r] = grid[r * w + c];
        }
        lower_envelope_1d(&buf[..h], &mut out[..h]);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        buf[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        lower_envelope_1d(&buf[..w], &mut out[..w]);
        grid[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// `out[q] = min_p (q - p)² + f[p]` via the lower envelope of parabolas.
/// `f` must be finite.
fn lower_envelope_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let sq = |x: usize| (x * x) as f64;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Robot user: clicks the deepest interior point (distance-transform argmax)
/// of the largest error region. Polarity follows the error kind; ties go to
/// the smallest `(row, col)`; pixels already in `existing` are skipped in
/// favour of the next-deepest point.
pub fn simulate_next_click(pred: &BinMask, gt: &BinMask, existing: &ClickSet) -> Result<Click> {
    let regions = error_regions(pred, gt)?;
    if regions.is_empty() {
        return Err(Error::NoError);
    }
    let (h, w) = gt.dims();
    let step = existing.next_step();
    for region in &regions {
        let mut inside = vec![false; h * w];
        for &i in &region.pixels {
            inside[i] = true;
        }
        let dist = squared_distance_to_outside(&inside, h, w);
        let mut order: Vec<usize> = region.pixels.clone();
        // pixels are ascending, so a stable sort keeps (row, col) order among ties
        order.sort_by(|&a, &b| dist[b].partial_cmp(&dist[a]).expect("finite distances"));
        if let Some(&i) = order.iter().find(|&&i| !existing.contains_pixel(i / w, i % w)) {
            return Ok(Click::new(i / w, i % w, region.kind.corrective_polarity(), step));
        }
    }
    Err(Error::ClicksExhausted)
}

/// Clicks mapped into crop pixel coordinates plus the clicks that fell
/// outside the crop rectangle.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MappedClicks {
    pub inside: ClickSet,
    pub dropped: ClickSet,
}

/// Maps full-image clicks into the crop grid of `region` (rounded to the
/// nearest crop pixel). Clicks outside the source rectangle are dropped.
pub fn map_clicks_to_crop(clicks: &[Click], region: &ZoomRegion) -> MappedClicks {
    let mut out = MappedClicks::default();
    for c in clicks {
        match region.to_crop(c.row, c.col) {
            Some((r, col)) => out.inside.push(Click { row: r, col, ..*c }),
            None => out.dropped.push(*c),
        }
    }
    out
}

/// Inverse of [`map_clicks_to_crop`] for a single crop-space click.
pub fn unmap_click(c: &Click, region: &ZoomRegion) -> Click {
    let (row, col) = region.to_source(c.row, c.col);
    Click { row, col, ..*c }
}

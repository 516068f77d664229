//! Per-click orchestration: coarse prediction on the full frame, adaptive
//! zoom-in around the estimated target, fine prediction on the crop, and
//! remapping back onto the full frame.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clicks::{map_clicks_to_crop, Click, ClickSet, MappedClicks};
use crate::error::{Error, Result};
use crate::mask::ProbMask;
use crate::tensor::interp::{resample, AxisTaps};
use crate::tensor::Tensor;

/// Smallest crop side in source pixels.
pub const MIN_REGION_SIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZoomConfig {
    pub threshold: f64,
    pub margin_scale: f64,
    pub margin_min: f64,
    pub margin_max: f64,
    pub target_h: usize,
    pub target_w: usize,
}

impl Default for ZoomConfig {
    fn default() -> Self {
        ZoomConfig {
            threshold: 0.5,
            margin_scale: 0.4,
            margin_min: 0.1,
            margin_max: 0.8,
            target_h: 96,
            target_w: 144,
        }
    }
}

impl ZoomConfig {
    /// Relative margin for a box covering fraction `s` of the frame:
    /// `clamp(margin_scale · (1 - s), margin_min, margin_max)`.
    pub fn margin(&self, s: f64) -> f64 {
        (self.margin_scale * (1.0 - s)).clamp(self.margin_min, self.margin_max)
    }
}

/// Source rectangle and the resolution it is resampled to. The rectangle is
/// stretched to `target_h × target_w` with corner-aligned bilinear sampling;
/// aspect ratio is not preserved and there is no letterboxing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ZoomRegion {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub target_h: usize,
    pub target_w: usize,
}

impl ZoomRegion {
    pub fn full(h: usize, w: usize, target_h: usize, target_w: usize) -> Self {
        ZoomRegion {
            top: 0,
            left: 0,
            height: h,
            width: w,
            target_h,
            target_w,
        }
    }

    /// Checks the region lies inside an `h × w` frame and meets the size floor.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.top + self.height > h || self.left + self.width > w {
            return Err(Error::Contract(format!("zoom region {self:?} exceeds {h}×{w} frame")));
        }
        if self.height < MIN_REGION_SIDE || self.width < MIN_REGION_SIDE {
            return Err(Error::Contract(format!(
                "zoom region {}×{} below minimum side {MIN_REGION_SIDE}",
                self.height, self.width
            )));
        }
        if self.target_h < 2 || self.target_w < 2 {
            return Err(Error::Contract("zoom target resolution must be at least 2×2".into()));
        }
        Ok(())
    }

    fn row_scale(&self) -> f64 {
        (self.target_h - 1) as f64 / (self.height - 1) as f64
    }

    fn col_scale(&self) -> f64 {
        (self.target_w - 1) as f64 / (self.width - 1) as f64
    }

    /// Source pixel → nearest crop pixel, or `None` outside the rectangle.
    pub fn to_crop(&self, row: usize, col: usize) -> Option<(usize, usize)> {
        if row < self.top || row >= self.top + self.height || col < self.left || col >= self.left + self.width {
            return None;
        }
        let r = ((row - self.top) as f64 * self.row_scale()).round() as usize;
        let c = ((col - self.left) as f64 * self.col_scale()).round() as usize;
        Some((r.min(self.target_h - 1), c.min(self.target_w - 1)))
    }

    /// Crop pixel → nearest source pixel.
    pub fn to_source(&self, row: usize, col: usize) -> (usize, usize) {
        let r = self.top + (row as f64 / self.row_scale()).round() as usize;
        let c = self.left + (col as f64 / self.col_scale()).round() as usize;
        (
            r.min(self.top + self.height - 1),
            c.min(self.left + self.width - 1),
        )
    }

    fn crop_taps(&self, h: usize, w: usize) -> (AxisTaps, AxisTaps) {
        (
            AxisTaps::linspace(
                self.top as f64,
                (self.top + self.height - 1) as f64,
                self.target_h,
                h,
            ),
            AxisTaps::linspace(
                self.left as f64,
                (self.left + self.width - 1) as f64,
                self.target_w,
                w,
            ),
        )
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

fn grow_to_min(lo: usize, hi: usize, n: usize, min: usize) -> (usize, usize) {
    let (mut lo, mut hi) = (lo, hi);
    while hi - lo < min && (lo > 0 || hi < n) {
        lo = lo.saturating_sub(1);
        if hi - lo < min && hi < n {
            hi += 1;
        }
    }
    (lo, hi)
}

/// Bounding box of `{p ≥ threshold}` expanded on every side by
/// `margin(s) · max(box_h, box_w)`, with `s` the box's fraction of the frame,
/// then clipped to the frame and grown to the minimum side.
pub fn adaptive_box(coarse: &ProbMask, cfg: &ZoomConfig) -> Result<ZoomRegion> {
    let (h, w) = coarse.dims();
    if h < MIN_REGION_SIDE || w < MIN_REGION_SIDE {
        return Err(Error::Argument(format!("frame {h}×{w} smaller than minimum zoom side")));
    }
    let (t, l, b, r) = coarse.binarize(cfg.threshold).bbox().ok_or(Error::EmptyForeground)?;
    let (bh, bw) = (b - t, r - l);
    let s = (bh * bw) as f64 / (h * w) as f64;
    let e = cfg.margin(s) * bh.max(bw) as f64;
    let top = (t as f64 - e).floor().max(0.0) as usize;
    let left = (l as f64 - e).floor().max(0.0) as usize;
    let bottom = ((b as f64 + e).ceil() as usize).min(h);
    let right = ((r as f64 + e).ceil() as usize).min(w);
    let (top, bottom) = grow_to_min(top, bottom, h, MIN_REGION_SIDE);
    let (left, right) = grow_to_min(left, right, w, MIN_REGION_SIDE);
    Ok(ZoomRegion {
        top,
        left,
        height: bottom - top,
        width: right - left,
        target_h: cfg.target_h,
        target_w: cfg.target_w,
    })
}

/// Resamples the source rectangle of `region` from a C×H×W tensor.
pub fn crop_tensor(t: &Tensor, region: &ZoomRegion) -> Result<Tensor> {
    let (c, h, w) = t.dims3("crop")?;
    region.validate(h, w)?;
    let (rows, cols) = region.crop_taps(h, w);
    Tensor::new([c, region.target_h, region.target_w], resample(t.data(), c, &rows, &cols))
}

pub fn crop_prob(p: &ProbMask, region: &ZoomRegion) -> Result<ProbMask> {
    ProbMask::from_tensor(&crop_tensor(&p.to_tensor(), region)?)
}

/// Output of the zoom-in step.
#[derive(Clone, Debug)]
pub struct Zoomed {
    pub image: Tensor,
    pub prob: ProbMask,
    pub clicks: MappedClicks,
    pub region: ZoomRegion,
}

/// Crops image, coarse probability and clicks around the coarse estimate.
pub fn zoom_in(image: &Tensor, coarse: &ProbMask, clicks: &[Click], cfg: &ZoomConfig) -> Result<Zoomed> {
    let region = adaptive_box(coarse, cfg)?;
    zoom_to(image, coarse, clicks, region)
}

/// Crops image, probability and clicks to a given region.
pub fn zoom_to(image: &Tensor, prob: &ProbMask, clicks: &[Click], region: ZoomRegion) -> Result<Zoomed> {
    Ok(Zoomed {
        image: crop_tensor(image, &region)?,
        prob: crop_prob(prob, &region)?,
        clicks: map_clicks_to_crop(clicks, &region),
        region,
    })
}

/// Pastes a crop-resolution probability map back into its source rectangle;
/// pixels outside the rectangle keep `background`.
pub fn remap_to_full(
    crop: &ProbMask,
    region: &ZoomRegion,
    full_h: usize,
    full_w: usize,
    background: &ProbMask,
) -> Result<ProbMask> {
    region.validate(full_h, full_w)?;
    if crop.dims() != (region.target_h, region.target_w) {
        return Err(Error::Dimension {
            op: "remap_to_full",
            axis: "crop height",
            expected: region.target_h,
            got: crop.height(),
        });
    }
    if background.dims() != (full_h, full_w) {
        return Err(Error::Dimension {
            op: "remap_to_full",
            axis: "background height",
            expected: full_h,
            got: background.height(),
        });
    }
    let rows = AxisTaps::linspace(0.0, (region.target_h - 1) as f64, region.height, region.target_h);
    let cols = AxisTaps::linspace(0.0, (region.target_w - 1) as f64, region.width, region.target_w);
    let patch = resample(crop.data(), 1, &rows, &cols);
    let mut out = background.clone();
    for r in 0..region.height {
        let dst = (region.top + r) * full_w + region.left;
        out.data_mut()[dst..dst + region.width].copy_from_slice(&patch[r * region.width..(r + 1) * region.width]);
    }
    Ok(out)
}

/// A network mapping (image, previous probability, clicks) to a probability map
/// at the image's resolution.
pub trait Segmenter: Send + Sync {
    fn predict(&self, image: &Tensor, prev: &ProbMask, clicks: &[Click]) -> Result<ProbMask>;
}

/// How the two levels of the cascade see the image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Both levels on the full frame; no zoom-in.
    CoarseToCoarse,
    /// Both levels on crops; the first level crops around the previous prediction.
    FineToFine,
    /// Full-frame coarse level, zoomed fine level.
    #[default]
    CoarseToFine,
}

/// Coarse network, optional fine network, and the zoom settings joining them.
/// Without a fine network the coarse output is the final prediction.
#[derive(Clone)]
pub struct Pipeline {
    pub coarse: Arc<dyn Segmenter>,
    pub fine: Option<Arc<dyn Segmenter>>,
    pub strategy: Strategy,
    pub zoom: ZoomConfig,
}

impl Pipeline {
    pub fn coarse_only(coarse: Arc<dyn Segmenter>, zoom: ZoomConfig) -> Self {
        Pipeline {
            coarse,
            fine: None,
            strategy: Strategy::CoarseToFine,
            zoom,
        }
    }

    pub fn cascade(coarse: Arc<dyn Segmenter>, fine: Arc<dyn Segmenter>, strategy: Strategy, zoom: ZoomConfig) -> Self {
        Pipeline {
            coarse,
            fine: Some(fine),
            strategy,
            zoom,
        }
    }

    /// Coarse-level estimate for the current clicks.
    pub fn coarse_estimate(&self, image: &Tensor, prev: &ProbMask, clicks: &[Click]) -> Result<ProbMask> {
        if self.strategy != Strategy::FineToFine || self.fine.is_none() {
            return self.coarse.predict(image, prev, clicks);
        }
        let (_, h, w) = image.dims3("coarse_estimate")?;
        let region = match adaptive_box(prev, &self.zoom) {
            Ok(r) => r,
            Err(Error::EmptyForeground) => ZoomRegion::full(h, w, self.zoom.target_h, self.zoom.target_w),
            Err(e) => return Err(e),
        };
        let z = zoom_to(image, prev, clicks, region)?;
        let crop = self.coarse.predict(&z.image, &z.prob, z.clicks.inside.as_slice())?;
        remap_to_full(&crop, &region, h, w, prev)
    }

    /// One full cascade pass.
    pub fn run(&self, image: &Tensor, prev: &ProbMask, clicks: &[Click]) -> Result<StepOutput> {
        let (_, h, w) = image.dims3("interactive_step")?;
        let coarse = self.coarse_estimate(image, prev, clicks)?;
        let Some(fine) = &self.fine else {
            return Ok(StepOutput {
                prob: coarse.clone(),
                coarse,
                region: None,
            });
        };
        if self.strategy == Strategy::CoarseToCoarse {
            let prob = fine.predict(image, &coarse, clicks)?;
            return Ok(StepOutput {
                prob,
                coarse,
                region: None,
            });
        }
        match zoom_in(image, &coarse, clicks, &self.zoom) {
            Ok(z) => {
                let crop = fine.predict(&z.image, &z.prob, z.clicks.inside.as_slice())?;
                let prob = remap_to_full(&crop, &z.region, h, w, &coarse)?;
                Ok(StepOutput {
                    prob,
                    coarse,
                    region: Some(z.region),
                })
            }
            Err(Error::EmptyForeground) => Ok(StepOutput {
                prob: coarse.clone(),
                coarse,
                region: None,
            }),
            Err(e) => Err(e),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Final prediction `P^t`.
    pub prob: ProbMask,
    /// Coarse-level prediction `P_c^t`.
    pub coarse: ProbMask,
    /// Zoom region used by the fine level, if any.
    pub region: Option<ZoomRegion>,
}

/// One interactive episode.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionState {
    pub image: Tensor,
    pub clicks: ClickSet,
    pub prev_prob: ProbMask,
    pub step: usize,
    pub last_region: Option<ZoomRegion>,
}

impl SessionState {
    pub fn new(image: Tensor) -> Result<Self> {
        let (c, h, w) = image.dims3("session")?;
        if c != 3 {
            return Err(Error::Dimension {
                op: "session",
                axis: "channels",
                expected: 3,
                got: c,
            });
        }
        Ok(SessionState {
            image,
            clicks: ClickSet::new(),
            prev_prob: ProbMask::zeros(h, w),
            step: 0,
            last_region: None,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.prev_prob.dims()
    }
}

/// Adds `click` to the session and runs the cascade. On success the session's
/// previous prediction, step counter and last region are updated; on error the
/// session is left untouched.
pub fn interactive_step(session: &mut SessionState, click: Click, pipeline: &Pipeline) -> Result<StepOutput> {
    let (h, w) = session.dims();
    if click.row >= h || click.col >= w {
        return Err(Error::OutOfBounds {
            row: click.row,
            col: click.col,
            height: h,
            width: w,
        });
    }
    if session.clicks.contains_pixel(click.row, click.col) {
        return Err(Error::DuplicateClick {
            row: click.row,
            col: click.col,
        });
    }
    let mut clicks = session.clicks.clone();
    clicks.push(Click {
        step: session.step + 1,
        ..click
    });
    let out = pipeline.run(&session.image, &session.prev_prob, clicks.as_slice())?;
    session.clicks = clicks;
    session.prev_prob = out.prob.clone();
    session.step += 1;
    session.last_region = out.region;
    Ok(out)
}

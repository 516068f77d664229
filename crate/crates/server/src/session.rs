//! Session bookkeeping independent of HTTP.

use std::time::Instant;

use intseg::cascade::{interactive_step, Pipeline, SessionState, ZoomRegion};
use intseg::clicks::{Click, ClickSet, Polarity};
use intseg::evalbench::iou;
use intseg::mask::{BinMask, ProbMask, Rle};
use intseg::tensor::Tensor;
use serde::Serialize;

use crate::error::ApiError;

/// Smallest side the cascade accepts.
const MIN_SIDE: usize = 8;

pub struct Session {
    state: SessionState,
    history: Vec<SessionState>,
    max_history: usize,
    gt: Option<BinMask>,
    height: usize,
    width: usize,
    pub last_active: Instant,
}

/// Snapshot returned after every mutation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepView {
    pub step: usize,
    pub mask: Rle,
    pub iou: Option<f64>,
    pub region: Option<ZoomRegion>,
    pub clicks: ClickSet,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionInfo {
    pub width: usize,
    pub height: usize,
    pub step: usize,
    pub has_gt: bool,
    pub clicks: ClickSet,
    pub region: Option<ZoomRegion>,
}

fn padded(n: usize) -> usize {
    n.max(MIN_SIDE).div_ceil(4) * 4
}

/// Pads a 3×H×W image on the bottom and right by edge replication.
fn pad_image(image: &Tensor, ph: usize, pw: usize) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    Tensor::from_fn([3, ph, pw], |i| {
        let ch = i / (ph * pw);
        let (r, c) = ((i / pw) % ph, i % pw);
        image.data()[ch * h * w + r.min(h - 1) * w + c.min(w - 1)]
    })
}

fn crop_prob(p: &ProbMask, h: usize, w: usize) -> ProbMask {
    let pw = p.width();
    let data = (0..h * w).map(|i| p.data()[(i / w) * pw + i % w]).collect();
    ProbMask::new(h, w, data).expect("crop within bounds")
}

impl Session {
    /// Starts a session on a 3×H×W image. Images are padded to the stride-4
    /// grid the networks need; masks are reported at the original size.
    pub fn new(image: Tensor, gt: Option<BinMask>, max_history: usize) -> Result<Self, ApiError> {
        let (c, h, w) = image.dims3("session").map_err(|e| ApiError::BadRequest(e.to_string()))?;
        if c != 3 || h == 0 || w == 0 {
            return Err(ApiError::BadRequest(format!("expected a non-empty RGB image, got {c}×{h}×{w}")));
        }
        let state = SessionState::new(pad_image(&image, padded(h), padded(w))).map_err(ApiError::from)?;
        Ok(Session {
            state,
            history: Vec::new(),
            max_history,
            gt,
            height: h,
            width: w,
            last_active: Instant::now(),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn step(&self) -> usize {
        self.state.step
    }

    pub fn info(&self) -> SessionInfo {
        SessionInfo {
            width: self.width,
            height: self.height,
            step: self.state.step,
            has_gt: self.gt.is_some(),
            clicks: self.state.clicks.clone(),
            region: self.state.last_region,
        }
    }

    /// Current prediction at the original image size.
    pub fn prob(&self) -> ProbMask {
        crop_prob(&self.state.prev_prob, self.height, self.width)
    }

    pub fn view(&self, threshold: f64) -> StepView {
        let mask = self.prob().binarize(threshold);
        StepView {
            step: self.state.step,
            iou: self.gt.as_ref().map(|g| iou(&mask, g).expect("same dims")),
            mask: mask.to_rle(),
            region: self.state.last_region,
            clicks: self.state.clicks.clone(),
        }
    }

    pub fn click(&mut self, row: usize, col: usize, polarity: Polarity, pipeline: &Pipeline) -> Result<(), ApiError> {
        if row >= self.height || col >= self.width {
            return Err(ApiError::Unprocessable(format!(
                "click at ({row}, {col}) outside {}×{} image",
                self.height, self.width
            )));
        }
        if self.history.len() >= self.max_history {
            return Err(ApiError::Conflict(format!("session holds the maximum of {} clicks", self.max_history)));
        }
        let before = self.state.clone();
        interactive_step(&mut self.state, Click::new(row, col, polarity, 0), pipeline)?;
        self.history.push(before);
        Ok(())
    }

    pub fn undo(&mut self) -> Result<(), ApiError> {
        match self.history.pop() {
            Some(prev) => {
                self.state = prev;
                Ok(())
            }
            None => Err(ApiError::Conflict("nothing to undo at step 0".into())),
        }
    }
}

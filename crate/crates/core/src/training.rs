//! Stage-wise training: coarse network on full frames, then the fine network
//! on zoomed crops with the coarse network frozen. Also the click sampler,
//! augmentation and the ablation runner.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{adaptive_box, crop_prob, zoom_to, Pipeline, Segmenter, Strategy, ZoomConfig};
use crate::clicks::{
    simulate_next_click, squared_distance_to_outside, squared_distance_to_set, Click, ClickSet, Polarity,
};
use crate::data_io::{splitmix64, LabeledImage};
use crate::error::{Error, Result};
use crate::evalbench::{evaluate, noc, nof, EvalConfig, EvalItem};
use crate::mask::{BinMask, ProbMask};
use crate::model::{EncodedInput, FpmVariant, Model, ModelConfig};
use crate::tensor::interp::resize;
use crate::tensor::{Adam, AdamConfig, Tensor};

/// Which of the two components are switched on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Neither click propagation nor the zoomed fine level.
    Baseline,
    Fpm,
    Iaf,
    #[default]
    Full,
}

impl Ablation {
    pub fn uses_fpm(self) -> bool {
        matches!(self, Ablation::Fpm | Ablation::Full)
    }

    pub fn uses_iaf(self) -> bool {
        matches!(self, Ablation::Iaf | Ablation::Full)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_coarse: usize,
    pub epochs_fine: usize,
    pub lr_coarse: f64,
    pub lr_fine: f64,
    pub batch_size: usize,
    pub max_sim_clicks: usize,
    /// Focal exponent of the normalized focal loss.
    pub gamma: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub strategy: Strategy,
    /// Epoch fractions at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    /// Chance that the clicks after the first are random rather than corrective.
    pub random_click_prob: f64,
    /// Minimum distance of random negative clicks from the object.
    pub negative_margin: f64,
    /// First clicks land on object pixels at least this fraction of the
    /// deepest interior distance from the boundary.
    pub first_click_depth: f64,
    pub augment: bool,
    pub vertical_flip: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Set from the `[model]` and `[zoom]` sections.
    #[serde(skip)]
    pub model: ModelConfig,
    #[serde(skip)]
    pub zoom: ZoomConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_coarse: 30,
            epochs_fine: 10,
            lr_coarse: 1e-3,
            lr_fine: 1e-5,
            batch_size: 8,
            max_sim_clicks: 6,
            gamma: 2.0,
            seed: 0,
            ablation: Ablation::Full,
            strategy: Strategy::CoarseToFine,
            lr_milestones: vec![0.8, 0.95],
            lr_decay: 0.1,
            random_click_prob: 0.5,
            negative_margin: 5.0,
            first_click_depth: 0.5,
            augment: true,
            vertical_flip: false,
            scale_min: 0.75,
            scale_max: 1.25,
            model: ModelConfig::default(),
            zoom: ZoomConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_coarse", self.lr_coarse),
            ("lr_fine", self.lr_fine),
            ("lr_decay", self.lr_decay),
            ("scale_min", self.scale_min),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 || self.max_sim_clicks == 0 {
            return Err(Error::Config("batch_size and max_sim_clicks must be at least 1".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.random_click_prob) || !(0.0..=1.0).contains(&self.first_click_depth) {
            return Err(Error::Config("click sampler probabilities must lie in [0, 1]".into()));
        }
        if self.scale_max < self.scale_min {
            return Err(Error::Config("scale_max must be at least scale_min".into()));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config("lr milestones are epoch fractions in [0, 1]".into()));
        }
        Ok(())
    }

    /// Model architecture after applying the ablation switch.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model;
        if !self.ablation.uses_fpm() {
            m.fpm = FpmVariant::None;
        }
        m
    }

    /// Learning rate for a 0-based epoch under the milestone schedule.
    pub fn lr_at(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| epoch >= (m * epochs as f64).floor() as usize)
            .count();
        base * self.lr_decay.powi(passed as i32)
    }
}

/// Image, simulated clicks and previous prediction for one training pass.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub image: Tensor,
    pub gt: BinMask,
    pub clicks: ClickSet,
    pub prev_prob: ProbMask,
}

fn pick<T: Copy>(xs: &[T], rng: &mut impl Rng) -> Option<T> {
    xs.choose(rng).copied()
}

/// Positive first click on a deep interior pixel of `gt`.
fn first_click(gt: &BinMask, depth: f64, rng: &mut impl Rng) -> Option<Click> {
    let (h, w) = gt.dims();
    let d = squared_distance_to_outside(gt.data(), h, w);
    let best = d.iter().copied().fold(0.0, f64::max);
    if best <= 0.0 {
        return None;
    }
    let min = depth * depth * best;
    let deep: Vec<usize> = (0..h * w).filter(|&i| gt.data()[i] && d[i] >= min).collect();
    pick(&deep, rng).map(|i| Click::new(i / w, i % w, Polarity::Positive, 1))
}

/// Draws `k ~ U{1..max_clicks}` clicks for one training sample. The first is
/// positive and deep inside the object. The rest are either random (positive
/// inside the object, negative at least `negative_margin` px away from it) or
/// corrective clicks on the model's own errors. Returns the clicks and the
/// prediction the model made before the last click (zeros without a model
/// pass).
pub fn sample_training_clicks(
    gt: &BinMask,
    image: &Tensor,
    model: Option<&dyn Segmenter>,
    rng: &mut impl Rng,
    max_clicks: usize,
    cfg: &TrainConfig,
) -> Result<(ClickSet, ProbMask)> {
    if max_clicks == 0 {
        return Err(Error::Argument("max_clicks must be at least 1".into()));
    }
    let (h, w) = gt.dims();
    let first = first_click(gt, cfg.first_click_depth, rng)
        .ok_or_else(|| Error::Argument("ground truth has no foreground".into()))?;
    let k = rng.gen_range(1..=max_clicks);
    let mut clicks = ClickSet::new();
    clicks.push(first);
    let mut prev = ProbMask::zeros(h, w);
    if k == 1 {
        return Ok((clicks, prev));
    }
    let corrective = model.filter(|_| !rng.gen_bool(cfg.random_click_prob));
    if let Some(model) = corrective {
        for _ in 1..k {
            let p = model.predict(image, &prev, clicks.as_slice())?;
            match simulate_next_click(&p.binarize(0.5), gt, &clicks) {
                Ok(c) => {
                    prev = p;
                    clicks.push(c);
                }
                Err(Error::NoError | Error::ClicksExhausted) => break,
                Err(e) => return Err(e),
            }
        }
        return Ok((clicks, prev));
    }
    let far = squared_distance_to_set(gt.data(), h, w);
    let margin2 = cfg.negative_margin * cfg.negative_margin;
    let positives: Vec<usize> = (0..h * w).filter(|&i| gt.data()[i]).collect();
    let negatives: Vec<usize> = (0..h * w).filter(|&i| !gt.data()[i] && far[i] >= margin2).collect();
    for step in 2..=k {
        let want_neg = rng.gen_bool(0.5) && !negatives.is_empty();
        let pool = if want_neg { &negatives } else { &positives };
        let polarity = if want_neg { Polarity::Negative } else { Polarity::Positive };
        // a handful of retries keeps clicks on distinct pixels
        for _ in 0..8 {
            let i = pick(pool, rng).expect("nonempty pool");
            if !clicks.contains_pixel(i / w, i % w) {
                clicks.push(Click::new(i / w, i % w, polarity, step));
                break;
            }
        }
    }
    Ok((clicks, prev))
}

/// One augmentation draw. The output pixel `(r, c)` reads the flipped and
/// rescaled scene at `(r + dy, c + dx)`; reads outside it are padding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flip_h: bool,
    pub flip_v: bool,
    pub scale: f64,
    pub dy: i64,
    pub dx: i64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        flip_h: false,
        flip_v: false,
        scale: 1.0,
        dy: 0,
        dx: 0,
    };

    pub fn random(h: usize, w: usize, cfg: &TrainConfig, rng: &mut impl Rng) -> Self {
        let flip_h = rng.gen_bool(0.5);
        let flip_v = cfg.vertical_flip && rng.gen_bool(0.5);
        let scale = if cfg.scale_max > cfg.scale_min {
            rng.gen_range(cfg.scale_min..=cfg.scale_max)
        } else {
            cfg.scale_min
        };
        let (sh, sw) = scaled_dims(h, w, scale);
        let mut offset = |n: usize, sn: usize| {
            let (a, b) = ((sn as i64 - n as i64).min(0), (sn as i64 - n as i64).max(0));
            rng.gen_range(a..=b)
        };
        let dy = offset(h, sh);
        let dx = offset(w, sw);
        AugmentDraw {
            flip_h,
            flip_v,
            scale,
            dy,
            dx,
        }
    }
}

fn scaled_dims(h: usize, w: usize, scale: f64) -> (usize, usize) {
    (
        ((h as f64 * scale).round() as usize).max(2),
        ((w as f64 * scale).round() as usize).max(2),
    )
}

fn flip(data: &mut [f64], channels: usize, h: usize, w: usize, horizontal: bool) {
    for ch in 0..channels {
        let plane = &mut data[ch * h * w..(ch + 1) * h * w];
        if horizontal {
            plane.chunks_mut(w).for_each(|row| row.reverse());
        } else {
            for r in 0..h / 2 {
                for c in 0..w {
                    plane.swap(r * w + c, (h - 1 - r) * w + c);
                }
            }
        }
    }
}

/// Applies a draw to an image and its mask, keeping the canonical size.
pub fn apply_augment(image: &Tensor, gt: &BinMask, d: &AugmentDraw) -> Result<(Tensor, BinMask)> {
    let (c, h, w) = image.dims3("augment")?;
    image_mask_match(image, gt)?;
    let mut img = image.data().to_vec();
    let mut msk: Vec<f64> = gt.data().iter().map(|&b| f64::from(u8::from(b))).collect();
    for (on, horizontal) in [(d.flip_h, true), (d.flip_v, false)] {
        if on {
            flip(&mut img, c, h, w, horizontal);
            flip(&mut msk, 1, h, w, horizontal);
        }
    }
    let (sh, sw) = scaled_dims(h, w, d.scale);
    let (img, msk) = if (sh, sw) == (h, w) {
        (img, msk)
    } else {
        (
            resize(&Tensor::new([c, h, w], img)?, sh, sw)?.into_data(),
            resize(&Tensor::new([1, h, w], msk)?, sh, sw)?.into_data(),
        )
    };
    let fill: Vec<f64> = (0..c)
        .map(|ch| {
            let p = &image.data()[ch * h * w..(ch + 1) * h * w];
            let border: f64 = (0..w).map(|x| p[x] + p[(h - 1) * w + x]).sum::<f64>()
                + (0..h).map(|y| p[y * w] + p[y * w + w - 1]).sum::<f64>();
            border / (2 * (h + w)) as f64
        })
        .collect();
    let mut out = vec![0.0; c * h * w];
    let mut mask = vec![false; h * w];
    for r in 0..h {
        for col in 0..w {
            let (sr, sc) = (r as i64 + d.dy, col as i64 + d.dx);
            let inside = sr >= 0 && sc >= 0 && (sr as usize) < sh && (sc as usize) < sw;
            for ch in 0..c {
                out[(ch * h + r) * w + col] = if inside {
                    img[(ch * sh + sr as usize) * sw + sc as usize]
                } else {
                    fill[ch]
                };
            }
            mask[r * w + col] = inside && msk[sr as usize * sw + sc as usize] >= 0.5;
        }
    }
    Ok((Tensor::new([c, h, w], out)?, BinMask::new(h, w, mask)?))
}

fn image_mask_match(image: &Tensor, gt: &BinMask) -> Result<()> {
    let (_, h, w) = image.dims3("augment")?;
    if gt.dims() != (h, w) {
        return Err(Error::Shape {
            op: "augment",
            detail: format!("mask {:?} vs image {h}×{w}", gt.dims()),
        });
    }
    Ok(())
}

/// Random flip, rescale and crop. Draws that lose the whole object are
/// redrawn a few times before falling back to the unchanged input.
pub fn augment(image: &Tensor, gt: &BinMask, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<(Tensor, BinMask)> {
    let (_, h, w) = image.dims3("augment")?;
    for _ in 0..10 {
        let d = AugmentDraw::random(h, w, cfg, rng);
        let (img, m) = apply_augment(image, gt, &d)?;
        if !m.is_empty() {
            return Ok((img, m));
        }
    }
    image_mask_match(image, gt)?;
    Ok((image.clone(), gt.clone()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepLog>,
}

/// Writes one JSON object per step.
pub fn write_jsonl(log: &[StepLog], mut out: impl Write) -> std::io::Result<()> {
    for rec in log {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn sample_rng(seed: u64, stage: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let s = splitmix64(splitmix64(splitmix64(seed ^ stage) ^ epoch as u64) ^ index as u64);
    ChaCha8Rng::seed_from_u64(s)
}

/// Builds one sample's network input and target from the model being
/// trained, or `None` to skip it.
type Prepare<'a> = dyn Fn(&Model, &LabeledImage, &mut ChaCha8Rng) -> Result<Option<(EncodedInput, ClickSet, BinMask)>> + Sync + 'a;

fn run_stage(
    mut model: Model,
    data: &[LabeledImage],
    cfg: &TrainConfig,
    epochs: usize,
    base_lr: f64,
    stage: u64,
    prepare: &Prepare<'_>,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Argument("training needs a nonempty dataset".into()));
    }
    let mut adam = Adam::new(
        &model.params,
        AdamConfig {
            lr: base_lr,
            ..Default::default()
        },
    );
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..epochs {
        let lr = cfg.lr_at(base_lr, epoch, epochs);
        adam.set_lr(lr);
        order.shuffle(&mut sample_rng(cfg.seed, stage, epoch, usize::MAX));
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<Option<(f64, Vec<Tensor>, String)>>> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = sample_rng(cfg.seed, stage, epoch, i);
                    let Some((x, clicks, target)) = prepare(&model, &data[i], &mut rng)? else {
                        return Ok(None);
                    };
                    let (loss, grads) = model.loss_and_grads(&x, clicks.as_slice(), &target, cfg.gamma)?;
                    Ok(Some((loss, grads, format!("{} clicks={}", data[i].id, clicks.to_json()))))
                })
                .collect();
            let mut sum: Option<Vec<Tensor>> = None;
            let (mut total, mut n) = (0.0, 0usize);
            for r in results {
                let Some((loss, grads, what)) = r? else { continue };
                if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Training(format!(
                        "non-finite loss or gradient at step {step} (epoch {epoch}) on sample {what}"
                    )));
                }
                total += loss;
                n += 1;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(grads) {
                            a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let Some(mut grads) = sum else { continue };
            let inv = 1.0 / n as f64;
            let mut sq = 0.0;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= inv;
                    sq += *v * *v;
                }
            }
            adam.step(&mut model.params, &grads.into_iter().map(Some).collect::<Vec<_>>())?;
            log.push(StepLog {
                step,
                epoch,
                loss: total * inv,
                grad_norm: sq.sqrt(),
                lr,
            });
            step += 1;
        }
        if let Some(last) = log.last() {
            log::info!("stage {stage} epoch {epoch}: loss {:.5} lr {:.2e}", last.loss, lr);
        }
    }
    Ok(TrainOutcome { model, log })
}

fn augmented(item: &LabeledImage, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<(Tensor, BinMask)> {
    if cfg.augment {
        augment(&item.image, &item.gt, cfg, rng)
    } else {
        Ok((item.image.clone(), item.gt.clone()))
    }
}

/// Trains a coarse network from its seeded initialization.
pub fn train_coarse(data: &[LabeledImage], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_coarse_from(Model::init(cfg.model_config(), cfg.seed), data, cfg)
}

/// Coarse training from given parameters. Corrective clicks come from the
/// parameters as they stand at the start of each batch.
pub fn train_coarse_from(init: Model, data: &[LabeledImage], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let prepare = |model: &Model, item: &LabeledImage, rng: &mut ChaCha8Rng| {
        let (image, gt) = augmented(item, cfg, rng)?;
        if gt.is_empty() {
            log::warn!("skipping {}: empty ground truth", item.id);
            return Ok(None);
        }
        let (clicks, prev) = sample_training_clicks(&gt, &image, Some(model), rng, cfg.max_sim_clicks, cfg)?;
        let x = EncodedInput::new(&image, &prev, clicks.as_slice(), model.cfg.disk_radius)?;
        Ok(Some((x, clicks, gt)))
    };
    run_stage(init, data, cfg, cfg.epochs_coarse, cfg.lr_coarse, 1, &prepare)
}

/// Fine-level input for one sample: the coarse network's estimate decides the
/// zoom region (the ground-truth box stands in when the estimate is empty);
/// under coarse-to-coarse the fine level sees the full frame.
fn fine_input(
    coarse: &Model,
    image: &Tensor,
    gt: &BinMask,
    clicks: &ClickSet,
    prev: &ProbMask,
    cfg: &TrainConfig,
) -> Result<(EncodedInput, ClickSet, BinMask)> {
    let pc = coarse.predict(image, prev, clicks.as_slice())?;
    let radius = coarse.cfg.disk_radius;
    if cfg.strategy == Strategy::CoarseToCoarse {
        let x = EncodedInput::new(image, &pc, clicks.as_slice(), radius)?;
        return Ok((x, clicks.clone(), gt.clone()));
    }
    let region = match adaptive_box(&pc, &cfg.zoom) {
        Ok(r) => r,
        Err(Error::EmptyForeground) => adaptive_box(&gt.to_prob(), &cfg.zoom)?,
        Err(e) => return Err(e),
    };
    let z = zoom_to(image, &pc, clicks.as_slice(), region)?;
    let target = crop_prob(&gt.to_prob(), &region)?.binarize(0.5);
    let x = EncodedInput::new(&z.image, &z.prob, z.clicks.inside.as_slice(), radius)?;
    Ok((x, z.clicks.inside, target))
}

/// Fine-tunes a copy of the coarse network on zoomed crops. The coarse
/// network only runs forward; its checksum is compared before and after.
pub fn train_fine(coarse: &Model, data: &[LabeledImage], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let before = coarse.params.checksum();
    let prepare = |_: &Model, item: &LabeledImage, rng: &mut ChaCha8Rng| {
        let (image, gt) = augmented(item, cfg, rng)?;
        if gt.is_empty() {
            log::warn!("skipping {}: empty ground truth", item.id);
            return Ok(None);
        }
        let (clicks, prev) = sample_training_clicks(&gt, &image, Some(coarse), rng, cfg.max_sim_clicks, cfg)?;
        fine_input(coarse, &image, &gt, &clicks, &prev, cfg).map(Some)
    };
    let out = run_stage(coarse.clone(), data, cfg, cfg.epochs_fine, cfg.lr_fine, 2, &prepare)?;
    if coarse.params.checksum() != before {
        return Err(Error::Training("coarse parameters changed during fine training".into()));
    }
    Ok(out)
}

/// Which ablation table to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationGrid {
    /// Baseline, +FPM, +IAF, full.
    Components,
    /// Propagation-module variants without the fine level.
    Fpm,
    /// Cascade strategies of the full model.
    Strategy,
}

impl AblationGrid {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(AblationGrid::Components),
            "fpm" => Ok(AblationGrid::Fpm),
            "strategy" => Ok(AblationGrid::Strategy),
            other => Err(Error::Argument(format!("unknown ablation grid `{other}`"))),
        }
    }

    pub fn cells(self) -> Vec<AblationCell> {
        use FpmVariant as F;
        let cell = |name: &str, fpm, iaf, strategy| AblationCell {
            name: name.into(),
            fpm,
            iaf,
            strategy,
        };
        match self {
            AblationGrid::Components => vec![
                cell("baseline", F::None, false, Strategy::CoarseToFine),
                cell("+fpm", F::SgmHsgm, false, Strategy::CoarseToFine),
                cell("+iaf", F::None, true, Strategy::CoarseToFine),
                cell("full", F::SgmHsgm, true, Strategy::CoarseToFine),
            ],
            AblationGrid::Fpm => vec![
                cell("sgm", F::Sgm, false, Strategy::CoarseToFine),
                cell("sgm+fuse", F::SgmFuse, false, Strategy::CoarseToFine),
                cell("sgm+fuse+sgm", F::SgmFuseSgm, false, Strategy::CoarseToFine),
                cell("sgm+hsgm", F::SgmHsgm, false, Strategy::CoarseToFine),
            ],
            AblationGrid::Strategy => vec![
                cell("coarse_to_coarse", F::SgmHsgm, true, Strategy::CoarseToCoarse),
                cell("fine_to_fine", F::SgmHsgm, true, Strategy::FineToFine),
                cell("coarse_to_fine", F::SgmHsgm, true, Strategy::CoarseToFine),
            ],
        }
    }
}

/// One trained-and-evaluated configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub fpm: FpmVariant,
    /// Zoomed fine level on or off.
    pub iaf: bool,
    pub strategy: Strategy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub fpm: FpmVariant,
    pub iaf: bool,
    pub seed: u64,
    pub noc: f64,
    pub nof: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub tau: f64,
    pub max_clicks: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Cell names in first-seen order.
    pub fn cells(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.cell.as_str()) {
                names.push(&r.cell);
            }
        }
        names
    }

    /// `(mean NoC, mean NoF)` of a cell across seeds.
    pub fn mean(&self, cell: &str) -> Option<(f64, f64)> {
        let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.cell == cell).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((
            rows.iter().map(|r| r.noc).sum::<f64>() / n,
            rows.iter().map(|r| r.nof as f64).sum::<f64>() / n,
        ))
    }

    /// Per-seed rows: `cell,fpm,iaf,seed,noc,nof`.
    pub fn rows_csv(&self) -> String {
        let mut s = String::from("cell,fpm,iaf,seed,noc,nof\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{:.4},{}\n",
                r.cell,
                fpm_name(r.fpm),
                r.iaf,
                r.seed,
                r.noc,
                r.nof
            ));
        }
        s
    }

    /// One line per cell with seed means: `cell,fpm,iaf,noc@<tau>,nof@<tau>`.
    pub fn table_csv(&self) -> String {
        let pct = (self.tau * 100.0).round();
        let mut s = format!("cell,fpm,iaf,noc@{pct},nof@{pct}\n");
        for name in self.cells() {
            let r = self.rows.iter().find(|r| r.cell == name).expect("cell has rows");
            let (noc, nof) = self.mean(name).expect("cell has rows");
            s.push_str(&format!("{name},{},{},{noc:.4},{nof:.2}\n", fpm_name(r.fpm), r.iaf));
        }
        s
    }
}

fn fpm_name(f: FpmVariant) -> &'static str {
    match f {
        FpmVariant::None => "none",
        FpmVariant::Sgm => "sgm",
        FpmVariant::SgmFuse => "sgm_fuse",
        FpmVariant::SgmFuseSgm => "sgm_fuse_sgm",
        FpmVariant::SgmHsgm => "sgm_hsgm",
    }
}

/// Trains and evaluates every cell for every seed. Coarse networks are shared
/// between cells with the same propagation variant and seed, fine networks
/// between cells that also share how the fine level is trained.
pub fn run_cells(
    cells: &[AblationCell],
    train: &[LabeledImage],
    eval: &[LabeledImage],
    base: &TrainConfig,
    eval_cfg: &EvalConfig,
    seeds: &[u64],
) -> Result<AblationReport> {
    run_cells_with(cells, train, eval, base, eval_cfg, seeds, &mut |_, _, _| {})
}

/// [`run_cells`], handing every evaluated pipeline to `observe`.
pub fn run_cells_with(
    cells: &[AblationCell],
    train: &[LabeledImage],
    eval: &[LabeledImage],
    base: &TrainConfig,
    eval_cfg: &EvalConfig,
    seeds: &[u64],
    observe: &mut dyn FnMut(&AblationCell, u64, &Pipeline),
) -> Result<AblationReport> {
    eval_cfg.validate()?;
    if seeds.is_empty() || eval.is_empty() {
        return Err(Error::Argument("ablation needs at least one seed and one eval sample".into()));
    }
    let items: Vec<EvalItem<'_>> = eval
        .iter()
        .map(|e| EvalItem {
            id: &e.id,
            image: &e.image,
            gt: &e.gt,
        })
        .collect();
    let mut coarse_cache: HashMap<(FpmVariant, u64), Arc<Model>> = HashMap::new();
    let mut fine_cache: HashMap<(FpmVariant, u64, bool), Arc<Model>> = HashMap::new();
    let mut rows = Vec::new();
    for &seed in seeds {
        for cell in cells {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.model.fpm = cell.fpm;
            cfg.ablation = if cell.fpm == FpmVariant::None { Ablation::Baseline } else { Ablation::Fpm };
            cfg.strategy = cell.strategy;
            let coarse = match coarse_cache.get(&(cell.fpm, seed)) {
                Some(m) => m.clone(),
                None => {
                    log::info!("training coarse {:?} seed {seed}", cell.fpm);
                    let m = Arc::new(train_coarse(train, &cfg)?.model);
                    coarse_cache.insert((cell.fpm, seed), m.clone());
                    m
                }
            };
            let pipeline = if cell.iaf {
                let key = (cell.fpm, seed, cell.strategy == Strategy::CoarseToCoarse);
                let fine = match fine_cache.get(&key) {
                    Some(m) => m.clone(),
                    None => {
                        log::info!("training fine {:?} seed {seed}", cell.fpm);
                        let m = Arc::new(train_fine(&coarse, train, &cfg)?.model);
                        fine_cache.insert(key, m.clone());
                        m
                    }
                };
                Pipeline::cascade(coarse, fine, cell.strategy, cfg.zoom)
            } else {
                Pipeline::coarse_only(coarse, cfg.zoom)
            };
            let records = evaluate(&pipeline, &items, eval_cfg)?;
            observe(cell, seed, &pipeline);
            rows.push(AblationRow {
                cell: cell.name.clone(),
                fpm: cell.fpm,
                iaf: cell.iaf,
                seed,
                noc: noc(&records, eval_cfg)?,
                nof: nof(&records)?,
            });
        }
    }
    Ok(AblationReport {
        tau: eval_cfg.tau,
        max_clicks: eval_cfg.max_clicks,
        rows,
    })
}

pub fn run_ablation(
    grid: AblationGrid,
    train: &[LabeledImage],
    eval: &[LabeledImage],
    base: &TrainConfig,
    eval_cfg: &EvalConfig,
    seeds: &[u64],
) -> Result<AblationReport> {
    run_cells(&grid.cells(), train, eval, base, eval_cfg, seeds)
}

pub const COARSE_CHECKPOINT: &str = "coarse.ckpt";
pub const FINE_CHECKPOINT: &str = "fine.ckpt";

/// Builds a pipeline from a checkpoint file (coarse only) or from a directory
/// holding `coarse.ckpt` and optionally `fine.ckpt`.
pub fn load_pipeline(path: &Path, strategy: Strategy, zoom: ZoomConfig) -> Result<Pipeline> {
    if !path.is_dir() {
        return Ok(Pipeline::coarse_only(Arc::new(Model::load(path)?), zoom));
    }
    let coarse = Arc::new(Model::load(&path.join(COARSE_CHECKPOINT))?);
    let fine_path = path.join(FINE_CHECKPOINT);
    if fine_path.exists() {
        Ok(Pipeline::cascade(coarse, Arc::new(Model::load(&fine_path)?), strategy, zoom))
    } else {
        Ok(Pipeline::coarse_only(coarse, zoom))
    }
}

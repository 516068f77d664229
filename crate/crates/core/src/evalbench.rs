//! Robot-user evaluation: NoC / NoF, mIoU@k curves, click histograms and
//! seconds-per-click timing.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{interactive_step, Pipeline, SessionState};
use crate::clicks::simulate_next_click;
use crate::error::{Error, Result};
use crate::mask::BinMask;
use crate::tensor::Tensor;

/// Published NoC@90 of a full-scale model on DAVIS (ResNet-101 backbone).
/// Reference only; not reproducible with the toy networks here.
pub const REFERENCE_NOC90_DAVIS: f64 = 5.8;
/// Published share and count of DAVIS samples finished within 5 clicks.
pub const REFERENCE_WITHIN5_FRACTION: f64 = 0.713;
pub const REFERENCE_WITHIN5_COUNT: usize = 246;
/// Published seconds per click on a Titan RTX with a ResNet-50 backbone.
pub const REFERENCE_SPC_SECONDS: f64 = 0.217;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// IoU threshold.
    pub tau: f64,
    pub max_clicks: usize,
    pub binarize_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tau: 0.85,
            max_clicks: 20,
            binarize_threshold: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if self.max_clicks == 0 {
            return Err(Error::Config("max_clicks must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.binarize_threshold) {
            return Err(Error::Config(format!(
                "binarize_threshold must lie in [0, 1], got {}",
                self.binarize_threshold
            )));
        }
        Ok(())
    }
}

/// One evaluation sample.
#[derive(Clone, Copy, Debug)]
pub struct EvalItem<'a> {
    pub id: &'a str,
    pub image: &'a Tensor,
    pub gt: &'a BinMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    /// IoU after each click.
    pub ious: Vec<f64>,
    pub clicks_used: usize,
    pub success: bool,
    pub wall_ms: Vec<f64>,
    /// Set when the pipeline failed on this sample.
    pub error: Option<String>,
}

impl EvalRecord {
    pub fn final_iou(&self) -> f64 {
        self.ious.last().copied().unwrap_or(0.0)
    }

    pub fn mean_ms(&self) -> f64 {
        if self.wall_ms.is_empty() {
            0.0
        } else {
            self.wall_ms.iter().sum::<f64>() / self.wall_ms.len() as f64
        }
    }
}

/// `|pred ∧ gt| / |pred ∨ gt|`, with two empty masks scoring 1.
pub fn iou(pred: &BinMask, gt: &BinMask) -> Result<f64> {
    pred.check_same(gt, "iou")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Runs the robot user on one sample until IoU reaches `tau` or the click
/// budget is spent. Pipeline failures end the episode as a failed record.
pub fn evaluate_one(pipeline: &Pipeline, item: EvalItem<'_>, cfg: &EvalConfig) -> EvalRecord {
    let mut rec = EvalRecord {
        id: item.id.to_string(),
        ious: Vec::new(),
        clicks_used: 0,
        success: false,
        wall_ms: Vec::new(),
        error: None,
    };
    let mut session = match SessionState::new(item.image.clone()) {
        Ok(s) => s,
        Err(e) => {
            rec.error = Some(e.to_string());
            return rec;
        }
    };
    let mut pred = session.prev_prob.binarize(cfg.binarize_threshold);
    while rec.clicks_used < cfg.max_clicks {
        let step = simulate_next_click(&pred, item.gt, &session.clicks).and_then(|click| {
            let t = Instant::now();
            let out = interactive_step(&mut session, click, pipeline)?;
            Ok((out, t.elapsed().as_secs_f64() * 1e3))
        });
        let (out, ms) = match step {
            Ok(v) => v,
            Err(e) => {
                rec.error = Some(e.to_string());
                return rec;
            }
        };
        pred = out.prob.binarize(cfg.binarize_threshold);
        let score = match iou(&pred, item.gt) {
            Ok(s) => s,
            Err(e) => {
                rec.error = Some(e.to_string());
                return rec;
            }
        };
        rec.ious.push(score);
        rec.wall_ms.push(ms);
        rec.clicks_used += 1;
        if score >= cfg.tau {
            rec.success = true;
            break;
        }
    }
    rec
}

/// Evaluates every item; records come back in input order.
pub fn evaluate(pipeline: &Pipeline, items: &[EvalItem<'_>], cfg: &EvalConfig) -> Result<Vec<EvalRecord>> {
    cfg.validate()?;
    Ok(items.par_iter().map(|&it| evaluate_one(pipeline, it, cfg)).collect())
}

/// Mean clicks to success, with failures charged `max_clicks`.
pub fn noc(records: &[EvalRecord], cfg: &EvalConfig) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Argument("NoC of an empty record list".into()));
    }
    let total: usize = records
        .iter()
        .map(|r| if r.success { r.clicks_used } else { cfg.max_clicks })
        .sum();
    Ok(total as f64 / records.len() as f64)
}

pub fn nof(records: &[EvalRecord]) -> Result<usize> {
    if records.is_empty() {
        return Err(Error::Argument("NoF of an empty record list".into()));
    }
    Ok(records.iter().filter(|r| !r.success).count())
}

/// Mean IoU after k = 1..=k_max clicks; finished episodes hold their last IoU.
pub fn miou_at_k(records: &[EvalRecord], k_max: usize) -> Vec<f64> {
    if records.is_empty() {
        return vec![0.0; k_max];
    }
    (0..k_max)
        .map(|k| {
            let sum: f64 = records
                .iter()
                .map(|r| r.ious.get(k).or(r.ious.last()).copied().unwrap_or(0.0))
                .sum();
            sum / records.len() as f64
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickHistogram {
    pub bins: Vec<HistogramBin>,
    pub failures: usize,
}

impl ClickHistogram {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum::<usize>() + self.failures
    }
}

/// Successful episodes binned by clicks used into `[1, width]`,
/// `[width + 1, 2·width]`, … up to `max_clicks`; failures get their own bin.
pub fn click_histogram(records: &[EvalRecord], width: usize, max_clicks: usize) -> Result<ClickHistogram> {
    if width == 0 || max_clicks == 0 {
        return Err(Error::Argument("histogram bin width and click budget must be positive".into()));
    }
    let mut bins: Vec<HistogramBin> = (0..max_clicks.div_ceil(width))
        .map(|i| HistogramBin {
            lo: i * width + 1,
            hi: ((i + 1) * width).min(max_clicks),
            count: 0,
        })
        .collect();
    let mut failures = 0;
    for r in records {
        if r.success && (1..=max_clicks).contains(&r.clicks_used) {
            bins[(r.clicks_used - 1) / width].count += 1;
        } else {
            failures += 1;
        }
    }
    Ok(ClickHistogram { bins, failures })
}

/// `sample,clicks,success,final_iou,ms_per_click`
pub fn records_csv(records: &[EvalRecord]) -> String {
    let mut s = String::from("sample,clicks,success,final_iou,ms_per_click\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{:.6},{:.3}\n",
            r.id,
            r.clicks_used,
            r.success,
            r.final_iou(),
            r.mean_ms()
        ));
    }
    s
}

/// Tab-separated `k` and mIoU columns.
pub fn curve_tsv(curve: &[f64]) -> String {
    let mut s = String::from("k\tmiou\n");
    for (k, v) in curve.iter().enumerate() {
        s.push_str(&format!("{}\t{v:.6}\n", k + 1));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub noc: f64,
    pub nof: usize,
    pub tau: f64,
    pub max_clicks: usize,
    pub curve: Vec<f64>,
    pub histogram: ClickHistogram,
}

pub fn summarize(records: &[EvalRecord], cfg: &EvalConfig) -> Result<EvalSummary> {
    Ok(EvalSummary {
        noc: noc(records, cfg)?,
        nof: nof(records)?,
        tau: cfg.tau,
        max_clicks: cfg.max_clicks,
        curve: miou_at_k(records, cfg.max_clicks),
        histogram: click_histogram(records, 5, cfg.max_clicks)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpcStats {
    pub median_s: f64,
    pub mean_s: f64,
    pub steps: usize,
    pub machine: String,
    pub reference_s: f64,
}

fn machine_descriptor() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{}-{}, {threads} hardware threads", std::env::consts::OS, std::env::consts::ARCH)
}

/// Wall time per `interactive_step` over robot-user episodes, after one
/// untimed warm-up step. Runs serially so timings do not contend.
pub fn spc_benchmark(pipeline: &Pipeline, items: &[EvalItem<'_>], cfg: &EvalConfig) -> Result<SpcStats> {
    cfg.validate()?;
    let first = items
        .first()
        .ok_or_else(|| Error::Argument("SPC benchmark needs at least one sample".into()))?;
    let mut warm = SessionState::new(first.image.clone())?;
    let pred = warm.prev_prob.binarize(cfg.binarize_threshold);
    let click = simulate_next_click(&pred, first.gt, &warm.clicks)?;
    interactive_step(&mut warm, click, pipeline)?;

    let mut times: Vec<f64> = items
        .iter()
        .flat_map(|&it| evaluate_one(pipeline, it, cfg).wall_ms)
        .map(|ms| ms / 1e3)
        .collect();
    if times.is_empty() {
        return Err(Error::Argument("no interactive step completed".into()));
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = times.len();
    let median_s = if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    };
    Ok(SpcStats {
        median_s,
        mean_s: times.iter().sum::<f64>() / n as f64,
        steps: n,
        machine: machine_descriptor(),
        reference_s: REFERENCE_SPC_SECONDS,
    })
}

//! Wall-clock scaling of the sparse graph against the dense non-local oracle.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{dense_nonlocal_oracle, sgm_forward, ClickIndexSet, SgmParams};
use crate::clicks::Polarity;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MIN_SAMPLE_MS: f64 = 20.0;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub m: usize,
    pub c: usize,
    pub sparse_ms: f64,
    pub dense_ms: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub runs: usize,
    /// Least-squares slope of log(time) against log(N).
    pub sparse_slope: f64,
    pub dense_slope: f64,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,m,c,sparse_ms,dense_ms\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{:.6},{:.6}\n", r.n, r.m, r.c, r.sparse_ms, r.dense_ms));
        }
        s
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "runs": self.runs,
            "sparse_slope": self.sparse_slope,
            "dense_slope": self.dense_slope,
            "rows": self.rows,
        })
    }

    /// Time ratios between consecutive sizes, `(sparse, dense)`.
    pub fn ratios(&self) -> Vec<(f64, f64)> {
        self.rows
            .windows(2)
            .map(|w| (w[1].sparse_ms / w[0].sparse_ms, w[1].dense_ms / w[0].dense_ms))
            .collect()
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Calls per timed sample so that one sample spans at least `MIN_SAMPLE_MS`.
fn reps_for(warmup: usize, f: &mut dyn FnMut()) -> usize {
    let t = Instant::now();
    for _ in 0..warmup.max(1) {
        f();
    }
    let per_call = t.elapsed().as_secs_f64() * 1e3 / warmup.max(1) as f64;
    ((MIN_SAMPLE_MS / per_call.max(1e-6)).ceil() as usize).clamp(1, 10_000)
}

/// Median milliseconds per call for each closure. Samples are taken round-robin
/// across the closures so slow drifts in machine load hit every size alike.
fn time_interleaved(warmup: usize, runs: usize, fs: &mut [Box<dyn FnMut() + '_>]) -> Vec<f64> {
    let reps: Vec<usize> = fs.iter_mut().map(|f| reps_for(warmup, f.as_mut())).collect();
    let mut samples = vec![Vec::with_capacity(runs); fs.len()];
    for _ in 0..runs {
        for ((f, &r), out) in fs.iter_mut().zip(&reps).zip(samples.iter_mut()) {
            let t = Instant::now();
            for _ in 0..r {
                f();
            }
            out.push(t.elapsed().as_secs_f64() * 1e3 / r as f64);
        }
    }
    samples.into_iter().map(median).collect()
}

pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.max(1e-12).ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if var == 0.0 {
        0.0
    } else {
        cov / var
    }
}

/// Grid `h × w` with `h · w = n`, as close to square as the divisors allow.
fn grid_for(n: usize) -> (usize, usize) {
    let mut h = (n as f64).sqrt() as usize;
    while h > 1 && !n.is_multiple_of(h) {
        h -= 1;
    }
    (h.max(1), n / h.max(1))
}

/// Times the sparse graph and the dense oracle (over all N keys) for every
/// size in `sizes` (ascending), `runs` timed repetitions after `warmup`
/// untimed ones, reporting medians.
pub fn benchmark_scaling(c: usize, m: usize, sizes: &[usize], runs: usize, warmup: usize, seed: u64) -> Result<BenchReport> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Argument("benchmark sizes must be strictly ascending".into()));
    }
    if runs == 0 {
        return Err(Error::Argument("benchmark needs at least one timed run".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 1.0 / (c as f64).sqrt();
    let params = SgmParams {
        w_c: Tensor::randn([c, c], std, &mut rng),
        theta: Tensor::randn([c, c], std, &mut rng),
        phi: Tensor::randn([c, c], std, &mut rng),
        polarity: None,
    };
    let mut inputs = Vec::with_capacity(sizes.len());
    for &n in sizes {
        if n < m.max(1) {
            return Err(Error::Argument(format!("grid of {n} cells cannot hold {m} clicks")));
        }
        let (h, w) = grid_for(n);
        let feats = Tensor::randn([c, h, w], 1.0, &mut rng);
        let mut picks = Vec::new();
        while picks.len() < m {
            let i = rng.gen_range(0..n);
            if !picks.contains(&i) {
                picks.push(i);
            }
        }
        let clicks = ClickIndexSet::new(picks.into_iter().map(|i| (i, Polarity::Positive)), n)?;
        inputs.push((feats, clicks));
    }
    let params = &params;
    let sparse_ms = time_interleaved(
        warmup,
        runs,
        &mut inputs
            .iter()
            .map(|(f, cl)| -> Box<dyn FnMut()> {
                Box::new(move || {
                    std::hint::black_box(sgm_forward(f, cl, params).expect("sparse forward"));
                })
            })
            .collect::<Vec<_>>(),
    );
    let dense_ms = time_interleaved(
        warmup,
        runs,
        &mut inputs
            .iter()
            .map(|(f, _)| -> Box<dyn FnMut()> {
                Box::new(move || {
                    std::hint::black_box(dense_nonlocal_oracle(f, params, None).expect("dense forward"));
                })
            })
            .collect::<Vec<_>>(),
    );
    let rows: Vec<BenchRow> = sizes
        .iter()
        .zip(sparse_ms.into_iter().zip(dense_ms))
        .map(|(&n, (sparse_ms, dense_ms))| BenchRow {
            n,
            m,
            c,
            sparse_ms,
            dense_ms,
        })
        .collect();
    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let sparse: Vec<f64> = rows.iter().map(|r| r.sparse_ms).collect();
    let dense: Vec<f64> = rows.iter().map(|r| r.dense_ms).collect();
    Ok(BenchReport {
        sparse_slope: log_log_slope(&ns, &sparse),
        dense_slope: log_log_slope(&ns, &dense),
        rows,
        runs,
    })
}

//! Finite-difference verification of every differentiable op and of whole
//! models.
//!
//! Each check builds a scalar `L = Σ w ⊙ op(inputs)` with fixed random `w`,
//! then compares reverse-mode gradients against central differences.
//! Perturbations that move a value across a ReLU or clamp boundary are
//! redrawn, since the difference quotient is meaningless there.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::clicks::{Click, Polarity};
use crate::error::{Error, Result};
use crate::graph_prop::{fuse_on, hsgm_forward_on, sgm_forward_on, ClickIndexSet, HsgmVars, SgmVars};
use crate::mask::ProbMask;
use crate::model::{EncodedInput, FpmVariant, Model, ModelConfig};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Magnitude below which gradients are compared absolutely.
    pub floor: f64,
    pub instances: usize,
    /// Entries probed per instance (all of them when fewer exist).
    pub entries: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-4,
            instances: 20,
            entries: 24,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    pub checked: usize,
    /// Probes redrawn because they straddled a kink.
    pub redrawn: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Names accepted by [`check_op`].
pub const OPS: &[&str] = &[
    "conv2d",
    "conv2d_stride2",
    "conv2d_dilated",
    "conv2d_1x1",
    "add_channel_bias",
    "upsample",
    "resize",
    "matmul",
    "matmul_ta",
    "matmul_tb",
    "matmul_ta_tb",
    "relu",
    "sigmoid",
    "concat",
    "add",
    "mul",
    "scale",
    "sum",
    "sum_channels",
    "softmax_rows",
    "gather_cols",
    "reshape",
    "nfl_gamma0",
    "nfl_gamma2",
    "sgm",
    "fuse",
    "hsgm",
    "model_baseline",
    "model_sgm",
    "model_sgm_fuse",
    "model_sgm_fuse_sgm",
    "model_full",
];

/// One random problem: inputs and a builder producing the op's output.
struct Instance {
    inputs: Vec<Tensor>,
    build: Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>,
}

/// Values bounded away from zero so ReLU inputs rarely sit on the kink.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

fn random_clicks(n: usize, gh: usize, gw: usize, rng: &mut ChaCha8Rng) -> Result<ClickIndexSet> {
    let picks = sample(rng, gh * gw, n).into_vec();
    let entries: Vec<(usize, Polarity)> = picks
        .into_iter()
        .map(|i| (i, if rng.gen_bool(0.5) { Polarity::Positive } else { Polarity::Negative }))
        .collect();
    ClickIndexSet::new(entries, gh * gw)
}

fn conv_instance(rng: &mut ChaCha8Rng, k: usize, stride: usize, dilation: usize) -> Instance {
    let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let (h, w) = (rng.gen_range(5..=8), rng.gen_range(5..=8));
    let pad = dilation * (k / 2);
    Instance {
        inputs: vec![randn(&[cin, h, w], rng), randn(&[cout, cin, k, k], rng)],
        build: Box::new(move |t, v| t.conv2d(v[0], v[1], stride, dilation, pad)),
    }
}

fn matmul_instance(rng: &mut ChaCha8Rng, ta: bool, tb: bool) -> Instance {
    let (m, k, n) = (rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=5));
    let a = if ta { [k, m] } else { [m, k] };
    let b = if tb { [n, k] } else { [k, n] };
    Instance {
        inputs: vec![randn(&a, rng), randn(&b, rng)],
        build: Box::new(move |t, v| t.matmul_t(v[0], v[1], ta, tb)),
    }
}

fn small_model(fpm: FpmVariant, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let cfg = ModelConfig {
        low_channels: 3,
        high_channels: 4,
        fpm,
        polarity_embedding: true,
        disk_radius: 2,
    };
    let mut model = Model::init(cfg, rng.gen());
    // give the zero-initialised entries some signal so their gradients are probed too
    for t in model.params.values_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            *t = Tensor::randn(t.shape().to_vec(), 0.3, rng);
        }
    }
    let (h, w) = (8, 12);
    let image = Tensor::rand_uniform([3, h, w], 0.0, 1.0, rng);
    let prev = ProbMask::new(h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let clicks = vec![
        Click::positive(rng.gen_range(0..h), rng.gen_range(0..w)),
        Click::new(rng.gen_range(0..h), rng.gen_range(0..w), Polarity::Negative, 2),
    ];
    let x = EncodedInput::new(&image, &prev, &clicks, cfg.disk_radius)?;
    let target: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.4)).collect();
    let inputs = model.params.values().to_vec();
    Ok(Instance {
        inputs,
        build: Box::new(move |t, v| {
            let pv = crate::model::ParamVars::from_vars(v.to_vec());
            let p = model.forward_on(t, &pv, &x, &clicks)?;
            t.nfl_loss(p, &target, 2.0)
        }),
    })
}

fn instance(op: &str, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let dims = |rng: &mut ChaCha8Rng| (rng.gen_range(1..=3), rng.gen_range(2..=5), rng.gen_range(2..=5));
    Ok(match op {
        "conv2d" => conv_instance(rng, 3, 1, 1),
        "conv2d_stride2" => conv_instance(rng, 3, 2, 1),
        "conv2d_dilated" => conv_instance(rng, 3, 1, 2),
        "conv2d_1x1" => conv_instance(rng, 1, 1, 1),
        "add_channel_bias" => {
            let (c, h, w) = dims(rng);
            Instance {
                inputs: vec![randn(&[c, h, w], rng), randn(&[c], rng)],
                build: Box::new(|t, v| t.add_channel_bias(v[0], v[1])),
            }
        }
        "upsample" => {
            let (c, h, w) = dims(rng);
            let f = rng.gen_range(1..=3);
            Instance {
                inputs: vec![randn(&[c, h, w], rng)],
                build: Box::new(move |t, v| t.upsample(v[0], f)),
            }
        }
        "resize" => {
            let (c, h, w) = dims(rng);
            let (oh, ow) = (rng.gen_range(1..=7), rng.gen_range(1..=7));
            Instance {
                inputs: vec![randn(&[c, h, w], rng)],
                build: Box::new(move |t, v| t.resize(v[0], oh, ow)),
            }
        }
        "matmul" => matmul_instance(rng, false, false),
        "matmul_ta" => matmul_instance(rng, true, false),
        "matmul_tb" => matmul_instance(rng, false, true),
        "matmul_ta_tb" => matmul_instance(rng, true, true),
        "relu" | "sigmoid" | "scale" | "sum" | "sum_channels" | "softmax_rows" | "reshape" => {
            let (c, h, w) = dims(rng);
            let x = if op == "relu" { away_from_zero(&[c, h, w], rng) } else { randn(&[c, h, w], rng) };
            let s: f64 = rng.gen_range(-2.0..2.0);
            let name = op.to_string();
            Instance {
                inputs: vec![x],
                build: Box::new(move |t, v| match name.as_str() {
                    "relu" => Ok(t.relu(v[0])),
                    "sigmoid" => Ok(t.sigmoid(v[0])),
                    "scale" => Ok(t.scale(v[0], s)),
                    "sum" => Ok(t.sum(v[0])),
                    "sum_channels" => t.sum_channels(v[0]),
                    "softmax_rows" => {
                        let r = t.reshape(v[0], [c * h, w])?;
                        t.softmax_rows(r)
                    }
                    _ => t.reshape(v[0], [h, c * w]),
                }),
            }
        }
        "concat" => {
            let (h, w) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
            let n = rng.gen_range(2..=3);
            Instance {
                inputs: (0..n).map(|_| randn(&[rng.gen_range(1..=3), h, w], rng)).collect(),
                build: Box::new(|t, v| t.concat(v)),
            }
        }
        "add" | "mul" => {
            let (c, h, w) = dims(rng);
            let mul = op == "mul";
            Instance {
                inputs: vec![randn(&[c, h, w], rng), randn(&[c, h, w], rng)],
                build: Box::new(move |t, v| if mul { t.mul(v[0], v[1]) } else { t.add(v[0], v[1]) }),
            }
        }
        "gather_cols" => {
            let (r, n) = (rng.gen_range(1..=4), rng.gen_range(2..=6));
            // repeated indices exercise gradient accumulation
            let idx: Vec<usize> = (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(0..n)).collect();
            Instance {
                inputs: vec![randn(&[r, n], rng)],
                build: Box::new(move |t, v| t.gather_cols(v[0], &idx)),
            }
        }
        "nfl_gamma0" | "nfl_gamma2" => {
            let n = rng.gen_range(4..=30);
            let gamma = if op == "nfl_gamma0" { 0.0 } else { 2.0 };
            let p = Tensor::from_fn([1, 1, n], |_| rng.gen_range(0.05..0.95));
            let target: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            Instance {
                inputs: vec![p],
                build: Box::new(move |t, v| t.nfl_loss(v[0], &target, gamma)),
            }
        }
        "sgm" => {
            let (c, h, w) = (rng.gen_range(2..=4), rng.gen_range(3..=5), rng.gen_range(3..=5));
            let m = rng.gen_range(1..=3);
            let clicks = random_clicks(m, h, w, rng)?;
            Instance {
                inputs: vec![
                    randn(&[c, h, w], rng),
                    randn(&[c, c], rng),
                    randn(&[c, c], rng),
                    randn(&[c, c], rng),
                    randn(&[c, 2], rng),
                ],
                build: Box::new(move |t, v| {
                    let vars = SgmVars {
                        w_c: v[1],
                        theta: v[2],
                        phi: v[3],
                        polarity: Some(v[4]),
                    };
                    sgm_forward_on(t, v[0], &clicks, &vars)
                }),
            }
        }
        "fuse" | "hsgm" => {
            let (cl, ch) = (rng.gen_range(2..=3), rng.gen_range(2..=4));
            let (h, w) = (rng.gen_range(3..=5), rng.gen_range(3..=5));
            let m = rng.gen_range(1..=3);
            let clicks = random_clicks(m, h, w, rng)?;
            let hsgm = op == "hsgm";
            Instance {
                inputs: vec![
                    away_from_zero(&[cl, h, w], rng),
                    away_from_zero(&[ch, h, w], rng),
                    randn(&[cl, cl + ch, 1, 1], rng),
                    randn(&[cl], rng),
                    randn(&[cl, cl], rng),
                    randn(&[ch, ch], rng),
                    randn(&[ch, ch], rng),
                    randn(&[ch, 2], rng),
                ],
                build: Box::new(move |t, v| {
                    if !hsgm {
                        return fuse_on(t, v[0], v[1], v[2], v[3]);
                    }
                    let vars = HsgmVars {
                        sigma_w: v[2],
                        sigma_b: v[3],
                        w_f: v[4],
                        theta_g: v[5],
                        phi_g: v[6],
                        polarity: Some(v[7]),
                    };
                    hsgm_forward_on(t, v[0], v[1], &clicks, &vars)
                }),
            }
        }
        "model_baseline" => small_model(FpmVariant::None, rng)?,
        "model_sgm" => small_model(FpmVariant::Sgm, rng)?,
        "model_sgm_fuse" => small_model(FpmVariant::SgmFuse, rng)?,
        "model_sgm_fuse_sgm" => small_model(FpmVariant::SgmFuseSgm, rng)?,
        "model_full" => small_model(FpmVariant::SgmHsgm, rng)?,
        other => return Err(Error::Argument(format!("unknown gradcheck op `{other}`"))),
    })
}

/// Scalar `Σ w ⊙ out` and the tape's kink signature.
fn evaluate(inst: &Instance, inputs: &[Tensor], weights: &Tensor, grad: bool) -> Result<(f64, Vec<bool>, Option<Vec<Tensor>>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (inst.build)(&mut tape, &vars)?;
    let w = tape.constant(weights.clone().reshape(tape.value(out).shape().to_vec())?);
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod);
    let sig = tape.kink_signature();
    let value = tape.value(loss).item();
    let grads = if grad {
        let mut g = tape.backward(loss)?;
        Some(
            vars.iter()
                .zip(inputs)
                .map(|(&v, t)| g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
                .collect(),
        )
    } else {
        None
    };
    Ok((value, sig, grads))
}

/// Checks one op over `cfg.instances` random instances.
pub fn check_op(op: &str, cfg: &GradcheckConfig) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ op.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(u64::from(b))));
    let mut report = OpReport {
        op: op.to_string(),
        instances: 0,
        checked: 0,
        redrawn: 0,
        max_rel_err: 0.0,
        passed: true,
    };
    for _ in 0..cfg.instances {
        let inst = instance(op, &mut rng)?;
        let probe = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inst.inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let out = (inst.build)(&mut tape, &vars)?;
            tape.value(out).len()
        };
        let weights = Tensor::randn([probe], 1.0, &mut rng);
        let (_, sig0, grads) = evaluate(&inst, &inst.inputs, &weights, true)?;
        let grads = grads.expect("requested");
        let sizes: Vec<usize> = inst.inputs.iter().map(Tensor::len).collect();
        let total: usize = sizes.iter().sum();
        let picks: Vec<usize> = if total <= cfg.entries {
            (0..total).collect()
        } else {
            sample(&mut rng, total, cfg.entries).into_vec()
        };
        for flat in picks {
            let (mut which, mut idx) = (0, flat);
            while idx >= sizes[which] {
                idx -= sizes[which];
                which += 1;
            }
            let mut plus = inst.inputs.clone();
            plus[which].data_mut()[idx] += cfg.step;
            let mut minus = inst.inputs.clone();
            minus[which].data_mut()[idx] -= cfg.step;
            let (lp, sp, _) = evaluate(&inst, &plus, &weights, false)?;
            let (lm, sm, _) = evaluate(&inst, &minus, &weights, false)?;
            if sp != sig0 || sm != sig0 {
                report.redrawn += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * cfg.step);
            let analytic = grads[which].data()[idx];
            let denom = analytic.abs().max(numeric.abs()).max(cfg.floor);
            let rel = (analytic - numeric).abs() / denom;
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
        report.instances += 1;
    }
    report.passed = report.max_rel_err < cfg.tolerance && report.checked > 0;
    Ok(report)
}

/// Runs [`check_op`] for every name; `["all"]` expands to [`OPS`].
pub fn run_suite(ops: &[String], cfg: &GradcheckConfig) -> Result<Vec<OpReport>> {
    let names: Vec<String> = if ops.iter().any(|o| o == "all") {
        OPS.iter().map(|s| s.to_string()).collect()
    } else {
        ops.to_vec()
    };
    names.iter().map(|op| check_op(op, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_op_rejected() {
        assert!(check_op("frobnicate", &GradcheckConfig::default()).is_err());
    }

    #[test]
    fn elementwise_ops_pass() {
        let cfg = GradcheckConfig {
            instances: 5,
            ..Default::default()
        };
        for op in ["add", "mul", "sigmoid", "softmax_rows"] {
            let r = check_op(op, &cfg).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }
}

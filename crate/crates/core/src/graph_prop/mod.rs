//! Feature propagation from click locations to every feature location.
//!
//! The low-resolution sparse graph updates each feature `f_n` with messages
//! from the `M` click-located features,
//!
//! ```text
//! f̂_n = f_n + Σ_j α(f_n, f_{u_j}) · W_cᵀ f_{u_j}
//! α(f_n, f_{u_j}) = exp(θ f_n · Φ f_{u_j}) / Σ_k exp(θ f_n · Φ f_{u_k})
//! ```
//!
//! The high-resolution graph fuses low-level features with the upsampled
//! output of the first graph, `s_n = σ(f^h_n ⊕ ĝ_n)`, and passes messages
//! `W_fᵀ s_{u_j}` weighted by attention computed on `ĝ` only.
//!
//! Both cost O(M·N·C). [`dense_nonlocal_oracle`] is the O(N²·C) fully
//! connected counterpart used for equivalence tests and the scaling benchmark.

pub mod bench;

use serde::{Deserialize, Serialize};

use crate::clicks::{Click, Polarity};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Click positions on a feature grid, as flat indices with their polarity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClickIndexSet {
    entries: Vec<(usize, Polarity)>,
}

impl ClickIndexSet {
    /// Validates indices against a grid of `n` cells. Later duplicates of a
    /// cell are dropped; the earliest click on a cell wins.
    pub fn new(entries: impl IntoIterator<Item = (usize, Polarity)>, n: usize) -> Result<Self> {
        let mut out: Vec<(usize, Polarity)> = Vec::new();
        for (idx, pol) in entries {
            if idx >= n {
                return Err(Error::Argument(format!("click index {idx} outside grid of {n} cells")));
            }
            if !out.iter().any(|&(i, _)| i == idx) {
                out.push((idx, pol));
            }
        }
        Ok(ClickIndexSet { entries: out })
    }

    /// Maps pixel clicks onto a `grid_h × grid_w` feature grid whose cells
    /// each cover `stride × stride` pixels (row and column floor-divided by
    /// the stride).
    pub fn from_clicks(clicks: &[Click], stride: usize, grid_h: usize, grid_w: usize) -> Result<Self> {
        let entries = clicks.iter().map(|c| {
            let r = (c.row / stride).min(grid_h.saturating_sub(1));
            let col = (c.col / stride).min(grid_w.saturating_sub(1));
            (r * grid_w + col, c.polarity)
        });
        Self::new(entries, grid_h * grid_w)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|&(i, _)| i).collect()
    }

    pub fn entries(&self) -> &[(usize, Polarity)] {
        &self.entries
    }

    /// 2×M one-hot polarity matrix (row 0 positive, row 1 negative).
    fn polarity_onehot(&self) -> Tensor {
        let m = self.len();
        let mut t = Tensor::zeros([2, m]);
        for (j, &(_, pol)) in self.entries.iter().enumerate() {
            let row = match pol {
                Polarity::Positive => 0,
                Polarity::Negative => 1,
            };
            t.data_mut()[row * m + j] = 1.0;
        }
        t
    }
}

/// Parameters of the low-resolution sparse graph.
#[derive(Clone, Debug, PartialEq)]
pub struct SgmParams {
    /// C×C message transform.
    pub w_c: Tensor,
    /// C×C query transform.
    pub theta: Tensor,
    /// C×C key transform.
    pub phi: Tensor,
    /// Optional C×2 polarity embedding added to the keys. `None` is the plain
    /// attention with polarity entering only through the features.
    pub polarity: Option<Tensor>,
}

impl SgmParams {
    pub fn channels(&self) -> usize {
        self.w_c.shape()[0]
    }

    fn validate(&self) -> Result<usize> {
        let c = self.w_c.shape().first().copied().unwrap_or(0);
        for (name, t) in [("w_c", &self.w_c), ("theta", &self.theta), ("phi", &self.phi)] {
            if t.shape() != [c, c] {
                return Err(Error::Shape {
                    op: "sgm",
                    detail: format!("{name} must be {c}×{c}, got {:?}", t.shape()),
                });
            }
        }
        if let Some(e) = &self.polarity {
            if e.shape() != [c, 2] {
                return Err(Error::Shape {
                    op: "sgm",
                    detail: format!("polarity embedding must be {c}×2, got {:?}", e.shape()),
                });
            }
        }
        Ok(c)
    }
}

/// Parameters of the high-resolution sparse graph.
#[derive(Clone, Debug, PartialEq)]
pub struct HsgmParams {
    /// 1×1 fusion kernel, C'×(C'+C)×1×1.
    pub sigma_w: Tensor,
    /// Fusion bias, `[C']`.
    pub sigma_b: Tensor,
    /// C'×C' message transform.
    pub w_f: Tensor,
    /// C×C query transform over the upsampled high-level features.
    pub theta_g: Tensor,
    /// C×C key transform over the upsampled high-level features.
    pub phi_g: Tensor,
    /// Optional C×2 polarity key embedding.
    pub polarity: Option<Tensor>,
}

/// Tape handles for [`SgmParams`].
#[derive(Clone, Copy, Debug)]
pub struct SgmVars {
    pub w_c: Var,
    pub theta: Var,
    pub phi: Var,
    pub polarity: Option<Var>,
}

impl SgmVars {
    pub fn constants(tape: &mut Tape, p: &SgmParams) -> Self {
        SgmVars {
            w_c: tape.constant(p.w_c.clone()),
            theta: tape.constant(p.theta.clone()),
            phi: tape.constant(p.phi.clone()),
            polarity: p.polarity.as_ref().map(|e| tape.constant(e.clone())),
        }
    }
}

/// Tape handles for [`HsgmParams`].
#[derive(Clone, Copy, Debug)]
pub struct HsgmVars {
    pub sigma_w: Var,
    pub sigma_b: Var,
    pub w_f: Var,
    pub theta_g: Var,
    pub phi_g: Var,
    pub polarity: Option<Var>,
}

impl HsgmVars {
    pub fn constants(tape: &mut Tape, p: &HsgmParams) -> Self {
        HsgmVars {
            sigma_w: tape.constant(p.sigma_w.clone()),
            sigma_b: tape.constant(p.sigma_b.clone()),
            w_f: tape.constant(p.w_f.clone()),
            theta_g: tape.constant(p.theta_g.clone()),
            phi_g: tape.constant(p.phi_g.clone()),
            polarity: p.polarity.as_ref().map(|e| tape.constant(e.clone())),
        }
    }
}

/// Attention of every column of `feats` (C×N) over the click columns:
/// an N×M row-stochastic matrix.
pub fn attention_on(
    tape: &mut Tape,
    feats: Var,
    clicks: &ClickIndexSet,
    theta: Var,
    phi: Var,
    polarity: Option<Var>,
) -> Result<Var> {
    if clicks.is_empty() {
        return Err(Error::EmptyClicks);
    }
    let q = tape.matmul(theta, feats)?;
    let fu = tape.gather_cols(feats, &clicks.indices())?;
    let mut k = tape.matmul(phi, fu)?;
    if let Some(e) = polarity {
        let onehot = tape.constant(clicks.polarity_onehot());
        let pe = tape.matmul(e, onehot)?;
        k = tape.add(k, pe)?;
    }
    let logits = tape.matmul_t(q, k, true, false)?;
    tape.softmax_rows(logits)
}

/// Message term `Σ_j α_nj · Wᵀ v_{u_j}` laid out as C_v×N, for values `vals`
/// (C_v×N) and attention `attn` (N×M).
fn messages_on(tape: &mut Tape, vals: Var, clicks: &ClickIndexSet, w: Var, attn: Var) -> Result<Var> {
    let vu = tape.gather_cols(vals, &clicks.indices())?;
    let v = tape.matmul_t(w, vu, true, false)?;
    tape.matmul_t(v, attn, false, true)
}

fn flatten(tape: &mut Tape, x: Var, op: &'static str) -> Result<(Var, usize, usize, usize)> {
    let (c, h, w) = tape.value(x).dims3(op)?;
    Ok((tape.reshape(x, [c, h * w])?, c, h, w))
}

fn check_grid(clicks: &ClickIndexSet, n: usize) -> Result<()> {
    match clicks.entries.iter().find(|&&(i, _)| i >= n) {
        Some(&(i, _)) => Err(Error::Argument(format!("click index {i} outside grid of {n} cells"))),
        None => Ok(()),
    }
}

/// Low-resolution sparse graph on a C×H×W feature map. With no clicks the
/// input handle is returned unchanged.
pub fn sgm_forward_on(tape: &mut Tape, f: Var, clicks: &ClickIndexSet, p: &SgmVars) -> Result<Var> {
    let (c, h, w) = tape.value(f).dims3("sgm_forward")?;
    check_grid(clicks, h * w)?;
    if clicks.is_empty() {
        return Ok(f);
    }
    let (flat, ..) = flatten(tape, f, "sgm_forward")?;
    let attn = attention_on(tape, flat, clicks, p.theta, p.phi, p.polarity)?;
    let msg = messages_on(tape, flat, clicks, p.w_c, attn)?;
    let out = tape.add(flat, msg)?;
    tape.reshape(out, [c, h, w])
}

/// `σ(f^h ⊕ ĝ)`: channel concat, 1×1 conv with bias, relu.
pub fn fuse_on(tape: &mut Tape, fh: Var, g_up: Var, sigma_w: Var, sigma_b: Var) -> Result<Var> {
    let (_, hh, wh) = tape.value(fh).dims3("hsgm_forward")?;
    let (_, hg, wg) = tape.value(g_up).dims3("hsgm_forward")?;
    if hh != hg {
        return Err(Error::Dimension {
            op: "hsgm_forward",
            axis: "height",
            expected: hh,
            got: hg,
        });
    }
    if wh != wg {
        return Err(Error::Dimension {
            op: "hsgm_forward",
            axis: "width",
            expected: wh,
            got: wg,
        });
    }
    let cat = tape.concat(&[fh, g_up])?;
    let z = tape.conv2d(cat, sigma_w, 1, 1, 0)?;
    let z = tape.add_channel_bias(z, sigma_b)?;
    Ok(tape.relu(z))
}

/// High-resolution sparse graph. `g_up` must already be upsampled to the
/// grid of `fh`; attention is computed from `g_up` alone.
pub fn hsgm_forward_on(tape: &mut Tape, fh: Var, g_up: Var, clicks: &ClickIndexSet, p: &HsgmVars) -> Result<Var> {
    let s = fuse_on(tape, fh, g_up, p.sigma_w, p.sigma_b)?;
    let (cs, h, w) = tape.value(s).dims3("hsgm_forward")?;
    check_grid(clicks, h * w)?;
    if clicks.is_empty() {
        return Ok(s);
    }
    let (s_flat, ..) = flatten(tape, s, "hsgm_forward")?;
    let (g_flat, ..) = flatten(tape, g_up, "hsgm_forward")?;
    let attn = attention_on(tape, g_flat, clicks, p.theta_g, p.phi_g, p.polarity)?;
    let msg = messages_on(tape, s_flat, clicks, p.w_f, attn)?;
    let out = tape.add(s_flat, msg)?;
    tape.reshape(out, [cs, h, w])
}

/// N×M attention weights of the low-resolution graph.
pub fn sgm_attention(f: &Tensor, clicks: &ClickIndexSet, p: &SgmParams) -> Result<Tensor> {
    p.validate()?;
    let (_, h, w) = f.dims3("sgm_attention")?;
    check_grid(clicks, h * w)?;
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let (flat, ..) = flatten(&mut tape, fv, "sgm_attention")?;
    let vars = SgmVars::constants(&mut tape, p);
    let a = attention_on(&mut tape, flat, clicks, vars.theta, vars.phi, vars.polarity)?;
    Ok(tape.value(a).clone())
}

pub fn sgm_forward(f: &Tensor, clicks: &ClickIndexSet, p: &SgmParams) -> Result<Tensor> {
    let c = p.validate()?;
    let (fc, h, w) = f.dims3("sgm_forward")?;
    check_grid(clicks, h * w)?;
    if clicks.is_empty() {
        return Ok(f.clone());
    }
    if fc != c {
        return Err(Error::Dimension {
            op: "sgm_forward",
            axis: "channels",
            expected: c,
            got: fc,
        });
    }
    Tensor::new([c, h, w], sgm_direct(f.data(), c, h * w, clicks, p))
}

/// Tape-free [`sgm_forward`]. The query transform is folded into the keys
/// (`θf_n · k_j = f_n · θᵀk_j`), so the feature map is streamed twice and no
/// C×N intermediate is materialised.
fn sgm_direct(fd: &[f64], c: usize, n: usize, clicks: &ClickIndexSet, p: &SgmParams) -> Vec<f64> {
    let m = clicks.len();
    let at = |t: &Tensor, r: usize, k: usize| t.data()[r * c + k];
    // keys, query-folded keys and values, each C×M
    let mut keys = vec![0.0; c * m];
    let mut vals = vec![0.0; c * m];
    for (j, &(u, pol)) in clicks.entries.iter().enumerate() {
        for r in 0..c {
            let mut k = 0.0;
            let mut v = 0.0;
            for q in 0..c {
                let x = fd[q * n + u];
                k += at(&p.phi, r, q) * x;
                v += at(&p.w_c, q, r) * x;
            }
            if let Some(e) = &p.polarity {
                k += e.data()[r * 2 + usize::from(pol == Polarity::Negative)];
            }
            keys[r * m + j] = k;
            vals[r * m + j] = v;
        }
    }
    let mut folded = vec![0.0; c * m];
    for q in 0..c {
        for r in 0..c {
            let t = at(&p.theta, r, q);
            for j in 0..m {
                folded[q * m + j] += t * keys[r * m + j];
            }
        }
    }
    let mut attn = vec![0.0; n * m];
    for q in 0..c {
        let row = &fd[q * n..(q + 1) * n];
        let fk = &folded[q * m..(q + 1) * m];
        for (x, logits) in row.iter().zip(attn.chunks_exact_mut(m)) {
            for (l, k) in logits.iter_mut().zip(fk) {
                *l += x * k;
            }
        }
    }
    for logits in attn.chunks_exact_mut(m) {
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - top).exp();
            z += *l;
        }
        for l in logits.iter_mut() {
            *l /= z;
        }
    }
    let mut out = fd.to_vec();
    for r in 0..c {
        let v = &vals[r * m..(r + 1) * m];
        for (o, a) in out[r * n..(r + 1) * n].iter_mut().zip(attn.chunks_exact(m)) {
            *o += a.iter().zip(v).map(|(a, v)| a * v).sum::<f64>();
        }
    }
    out
}

/// N×M attention weights of the high-resolution graph (depends on `g_up` only).
pub fn hsgm_attention(g_up: &Tensor, clicks: &ClickIndexSet, p: &HsgmParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let gv = tape.constant(g_up.clone());
    let (flat, ..) = flatten(&mut tape, gv, "hsgm_attention")?;
    check_grid(clicks, tape.value(flat).shape()[1])?;
    let vars = HsgmVars::constants(&mut tape, p);
    let a = attention_on(&mut tape, flat, clicks, vars.theta_g, vars.phi_g, vars.polarity)?;
    Ok(tape.value(a).clone())
}

pub fn hsgm_forward(fh: &Tensor, g_up: &Tensor, clicks: &ClickIndexSet, p: &HsgmParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let fv = tape.constant(fh.clone());
    let gv = tape.constant(g_up.clone());
    let vars = HsgmVars::constants(&mut tape, p);
    let out = hsgm_forward_on(&mut tape, fv, gv, clicks, &vars)?;
    Ok(tape.value(out).clone())
}

/// Fully connected non-local update `f_n + Σ_m softmax_m(θf_n · Φf_m) W_cᵀ f_m`
/// computed with explicit loops in O(N²·C). With `restrict_cols` the keys and
/// values are limited to those columns (and carry the polarity embedding),
/// which reproduces [`sgm_forward`].
pub fn dense_nonlocal_oracle(f: &Tensor, p: &SgmParams, restrict_cols: Option<&ClickIndexSet>) -> Result<Tensor> {
    let c = p.validate()?;
    let (fc, h, w) = f.dims3("dense_nonlocal_oracle")?;
    if fc != c {
        return Err(Error::Dimension {
            op: "dense_nonlocal_oracle",
            axis: "channels",
            expected: c,
            got: fc,
        });
    }
    let n = h * w;
    let fd = f.data();
    let feat = |ch: usize, i: usize| fd[ch * n + i];
    let keys: Vec<(usize, Option<Polarity>)> = match restrict_cols {
        Some(cols) => {
            check_grid(cols, n)?;
            cols.entries.iter().map(|&(i, pol)| (i, Some(pol))).collect()
        }
        None => (0..n).map(|i| (i, None)).collect(),
    };
    if keys.is_empty() {
        return Ok(f.clone());
    }
    let mat = |m: &Tensor, r: usize, k: usize| m.data()[r * c + k];
    let transform = |m: &Tensor, i: usize, transpose: bool| -> Vec<f64> {
        (0..c)
            .map(|r| {
                (0..c)
                    .map(|k| if transpose { mat(m, k, r) } else { mat(m, r, k) } * feat(k, i))
                    .sum()
            })
            .collect()
    };
    let key_vecs: Vec<Vec<f64>> = keys
        .iter()
        .map(|&(i, pol)| {
            let mut k = transform(&p.phi, i, false);
            if let (Some(e), Some(pol)) = (&p.polarity, pol) {
                let col = usize::from(pol == Polarity::Negative);
                for (r, kr) in k.iter_mut().enumerate() {
                    *kr += e.data()[r * 2 + col];
                }
            }
            k
        })
        .collect();
    let val_vecs: Vec<Vec<f64>> = keys.iter().map(|&(i, _)| transform(&p.w_c, i, true)).collect();
    let mut out = fd.to_vec();
    let mut logits = vec![0.0; keys.len()];
    for i in 0..n {
        let q = transform(&p.theta, i, false);
        for (l, k) in logits.iter_mut().zip(&key_vecs) {
            *l = q.iter().zip(k).map(|(a, b)| a * b).sum();
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            z += *l;
        }
        for (a, v) in logits.iter().zip(&val_vecs) {
            let a = a / z;
            for ch in 0..c {
                out[ch * n + i] += a * v[ch];
            }
        }
    }
    Tensor::new([c, h, w], out)
}

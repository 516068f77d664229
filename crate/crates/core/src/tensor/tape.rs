use super::interp::{self, AxisTaps};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
        /// im2col buffer; `None` when the input already is the column matrix (1×1, stride 1, no pad).
        cols: Option<Vec<f64>>,
    },
    AddChannelBias { x: Var, b: Var },
    Resample { x: Var, rows: AxisTaps, cols: AxisTaps },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Relu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SumAll(Var),
    SumChannels(Var),
    SoftmaxRows(Var),
    GatherCols { x: Var, idx: Vec<usize> },
    Reshape(Var),
    Nfl { p: Var, target: Vec<bool>, gamma: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run record of executed ops. Values are computed eagerly when an
/// op is pushed; [`Tape::backward`] replays the record in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the trainable leaves of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Probability clamp used by the focal loss so `log` stays finite.
pub const NFL_EPS: f64 = 1e-7;
const NFL_DENOM_FLOOR: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf; [`Tape::backward`] reports its gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, dilation: usize, pad: usize) -> Result<Var> {
        let (cin, h, w) = self.value(x).dims3("conv2d")?;
        let ks = self.value(k).shape().to_vec();
        let [cout, kcin, kh, kw] = ks[..] else {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("kernel must be Cout×Cin×K×K, got {ks:?}"),
            });
        };
        if kcin != cin {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "input channels",
                expected: kcin,
                got: cin,
            });
        }
        if kh != kw {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "kernel width",
                expected: kh,
                got: kw,
            });
        }
        if kh % 2 == 0 {
            return Err(Error::Argument(format!("conv2d kernel size must be odd, got {kh}")));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::Argument("conv2d stride and dilation must be ≥ 1".into()));
        }
        let span = dilation * (kh - 1) + 1;
        if h + 2 * pad < span {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "height",
                expected: span,
                got: h + 2 * pad,
            });
        }
        if w + 2 * pad < span {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "width",
                expected: span,
                got: w + 2 * pad,
            });
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            dilation,
            pad,
            oh: (h + 2 * pad - span) / stride + 1,
            ow: (w + 2 * pad - span) / stride + 1,
        };
        let pointwise = geom.k == 1 && stride == 1 && pad == 0;
        let cols = (!pointwise).then(|| im2col(self.value(x).data(), &geom));
        let p = geom.oh * geom.ow;
        let mut out = vec![0.0; cout * p];
        {
            let colmat = cols.as_deref().unwrap_or(self.value(x).data());
            gemm(
                Mat::new(self.value(k).data(), cout, cin * geom.k * geom.k),
                Mat::new(colmat, cin * geom.k * geom.k, p),
                &mut out,
            );
        }
        let needs = self.needs(x) || self.needs(k);
        Ok(self.push(
            Tensor::new([cout, geom.oh, geom.ow], out)?,
            Op::Conv2d { x, k, geom, cols },
            needs,
        ))
    }

    /// Adds a per-channel bias `b` (shape `[C]`) to a C×H×W tensor.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3("add_channel_bias")?;
        if self.value(b).shape() != [c] {
            return Err(Error::Dimension {
                op: "add_channel_bias",
                axis: "channels",
                expected: c,
                got: self.value(b).len(),
            });
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for (ch, plane) in out.chunks_mut(h * w).enumerate() {
            plane.iter_mut().for_each(|v| *v += bias[ch]);
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(Tensor::new([c, h, w], out)?, Op::AddChannelBias { x, b }, needs))
    }

    /// Corner-aligned bilinear upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::Argument(format!("upsample factor must be ≥ 1, got {factor}")));
        }
        let (_, h, w) = self.value(x).dims3("upsample")?;
        self.resample(x, AxisTaps::upsample(h, factor), AxisTaps::upsample(w, factor))
    }

    /// Corner-aligned bilinear resize to `out_h × out_w`.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (_, h, w) = self.value(x).dims3("resize")?;
        self.resample(x, AxisTaps::resize(h, out_h), AxisTaps::resize(w, out_w))
    }

    fn resample(&mut self, x: Var, rows: AxisTaps, cols: AxisTaps) -> Result<Var> {
        let (c, _, _) = self.value(x).dims3("resample")?;
        let out = interp::resample(self.value(x).data(), c, &rows, &cols);
        let t = Tensor::new([c, rows.len(), cols.len()], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Resample { x, rows, cols }, needs))
    }

    /// `op(a) · op(b)` where `op` optionally transposes a matrix.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let ma = Mat::from_tensor(self.value(a), "matmul")?.t_if(ta);
        let mb = Mat::from_tensor(self.value(b), "matmul")?.t_if(tb);
        if ma.cols != mb.rows {
            return Err(Error::Dimension {
                op: "matmul",
                axis: "inner",
                expected: ma.cols,
                got: mb.rows,
            });
        }
        let (m, n) = (ma.rows, mb.cols);
        let mut out = vec![0.0; m * n];
        gemm(ma, mb, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b, ta, tb }, needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(t, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(t, Op::Sigmoid(x), needs)
    }

    /// Concatenation along the leading (channel) axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Argument("concat of zero tensors".into()));
        };
        let tail = self.value(first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.value(x).shape();
            if s[1..] != tail[..] {
                return Err(Error::Shape {
                    op: "concat",
                    detail: format!("trailing dims {:?} vs {tail:?}", &s[1..]),
                });
            }
            lead += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(xs.to_vec()), needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v * s);
        let needs = self.needs(x);
        self.push(t, Op::Scale(x, s), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(t, Op::SumAll(x), needs)
    }

    /// C×H×W → 1×H×W.
    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3("sum_channels")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; h * w];
        for ch in 0..c {
            for (o, v) in out.iter_mut().zip(&src[ch * h * w..(ch + 1) * h * w]) {
                *o += v;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new([1, h, w], out)?, Op::SumChannels(x), needs))
    }

    /// Row-wise softmax of a matrix (normalizes over the last axis).
    /// Logits are max-subtracted per row before exponentiation.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("softmax_rows")?;
        if c == 0 {
            return Err(Error::EmptyClicks);
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new([r, c], out)?, Op::SoftmaxRows(x), needs))
    }

    /// Selects columns `idx` of a C×N matrix, giving C×M.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (c, n) = self.value(x).dims2("gather_cols")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Argument(format!("column index {bad} out of range for {n} columns")));
        }
        let src = self.value(x).data();
        let m = idx.len();
        let mut out = Vec::with_capacity(c * m);
        for ch in 0..c {
            out.extend(idx.iter().map(|&i| src[ch * n + i]));
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new([c, m], out)?,
            Op::GatherCols {
                x,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// Normalized focal loss of probabilities `p` against a binary target:
    /// `Σ (1-p_t)^γ · (-ln p_t) / max(Σ (1-p_t)^γ, 1e-12)` with `p_t = p` on
    /// foreground and `1-p` on background, `p_t` clamped to `[1e-7, 1-1e-7]`.
    pub fn nfl_loss(&mut self, p: Var, target: &[bool], gamma: f64) -> Result<Var> {
        if self.value(p).len() != target.len() {
            return Err(Error::Dimension {
                op: "nfl_loss",
                axis: "pixels",
                expected: self.value(p).len(),
                got: target.len(),
            });
        }
        if gamma < 0.0 {
            return Err(Error::Argument(format!("focal gamma must be ≥ 0, got {gamma}")));
        }
        let (num, den) = nfl_sums(self.value(p).data(), target, gamma);
        let needs = self.needs(p);
        Ok(self.push(
            Tensor::scalar(num / den.max(NFL_DENOM_FLOOR)),
            Op::Nfl {
                p,
                target: target.to_vec(),
                gamma,
            },
            needs,
        ))
    }

    /// Which side of every non-differentiable point the recorded values sit
    /// on: ReLU input signs and focal-loss clamp activity. Two evaluations with
    /// equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => sig.extend(self.value(*x).data().iter().map(|&v| v > 0.0)),
                Op::Nfl { p, target, .. } => sig.extend(self.value(*p).data().iter().zip(target).map(|(&pi, &fg)| {
                    let raw = if fg { pi } else { 1.0 - pi };
                    raw <= NFL_EPS || raw >= 1.0 - NFL_EPS
                })),
                _ => {}
            }
        }
        sig
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate additively into
    /// every trainable leaf reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.needs_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let mut acc = |v: Var, delta: &[f64]| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(delta).for_each(|(b, d)| *b += d),
                slot @ None => *slot = Some(delta.to_vec()),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, geom, cols } => {
                let ckk = geom.cin * geom.k * geom.k;
                let p = geom.oh * geom.ow;
                let dout = Mat::new(g, geom.cout, p);
                if self.needs(*k) {
                    let colmat = cols.as_deref().unwrap_or(self.value(*x).data());
                    let mut dk = vec![0.0; geom.cout * ckk];
                    gemm(dout, Mat::new(colmat, ckk, p).t(), &mut dk);
                    acc(*k, &dk);
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; ckk * p];
                    gemm(Mat::new(self.value(*k).data(), geom.cout, ckk).t(), dout, &mut dcols);
                    if cols.is_some() {
                        acc(*x, &col2im(&dcols, geom));
                    } else {
                        acc(*x, &dcols);
                    }
                }
            }
            Op::AddChannelBias { x, b } => {
                acc(*x, g);
                if self.needs(*b) {
                    let (c, h, w) = self.value(*x).dims3("add_channel_bias")?;
                    let db: Vec<f64> = (0..c).map(|ch| g[ch * h * w..(ch + 1) * h * w].iter().sum()).collect();
                    acc(*b, &db);
                }
            }
            Op::Resample { x, rows, cols } => {
                let (c, _, _) = self.value(*x).dims3("resample")?;
                acc(*x, &interp::resample_adjoint(g, c, rows, cols));
            }
            Op::MatMul { a, b, ta, tb } => {
                let va = Mat::from_tensor(self.value(*a), "matmul")?;
                let vb = Mat::from_tensor(self.value(*b), "matmul")?;
                let opa = va.t_if(*ta);
                let opb = vb.t_if(*tb);
                let dc = Mat::new(g, opa.rows, opb.cols);
                if self.needs(*a) {
                    let mut da = vec![0.0; va.rows * va.cols];
                    if *ta {
                        gemm(opb, dc.t(), &mut da);
                    } else {
                        gemm(dc, opb.t(), &mut da);
                    }
                    acc(*a, &da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; vb.rows * vb.cols];
                    if *tb {
                        gemm(dc.t(), opa, &mut db);
                    } else {
                        gemm(opa.t(), dc, &mut db);
                    }
                    acc(*b, &db);
                }
            }
            Op::Relu(x) => {
                let d: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                    .collect();
                acc(*x, &d);
            }
            Op::Sigmoid(x) => {
                let d: Vec<f64> = node.value.data().iter().zip(g).map(|(&y, &gi)| gi * y * (1.0 - y)).collect();
                acc(*x, &d);
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    acc(x, &g[off..off + n]);
                    off += n;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g);
                acc(*b, g);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = self.value(*b).data().iter().zip(g).map(|(v, gi)| v * gi).collect();
                let db: Vec<f64> = self.value(*a).data().iter().zip(g).map(|(v, gi)| v * gi).collect();
                acc(*a, &da);
                acc(*b, &db);
            }
            Op::Scale(x, s) => {
                let d: Vec<f64> = g.iter().map(|gi| gi * s).collect();
                acc(*x, &d);
            }
            Op::SumAll(x) => {
                let d = vec![g[0]; self.value(*x).len()];
                acc(*x, &d);
            }
            Op::SumChannels(x) => {
                let c = self.value(*x).shape()[0];
                let d: Vec<f64> = (0..c).flat_map(|_| g.iter().copied()).collect();
                acc(*x, &d);
            }
            Op::SoftmaxRows(x) => {
                let cols = node.value.shape()[1];
                let mut d = Vec::with_capacity(g.len());
                for (y, gy) in node.value.data().chunks(cols).zip(g.chunks(cols)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    d.extend(y.iter().zip(gy).map(|(yi, gi)| yi * (gi - dot)));
                }
                acc(*x, &d);
            }
            Op::GatherCols { x, idx } => {
                let (c, n) = self.value(*x).dims2("gather_cols")?;
                let m = idx.len();
                let mut d = vec![0.0; c * n];
                for ch in 0..c {
                    for (j, &i) in idx.iter().enumerate() {
                        d[ch * n + i] += g[ch * m + j];
                    }
                }
                acc(*x, &d);
            }
            Op::Reshape(x) => acc(*x, g),
            Op::Nfl { p, target, gamma } => {
                let d = nfl_grad(self.value(*p).data(), target, *gamma, g[0]);
                acc(*p, &d);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn nfl_pt(p: f64, fg: bool) -> f64 {
    let pt = if fg { p } else { 1.0 - p };
    pt.clamp(NFL_EPS, 1.0 - NFL_EPS)
}

fn nfl_sums(p: &[f64], target: &[bool], gamma: f64) -> (f64, f64) {
    p.iter().zip(target).fold((0.0, 0.0), |(num, den), (&pi, &fg)| {
        let pt = nfl_pt(pi, fg);
        let w = (1.0 - pt).powf(gamma);
        (num - w * pt.ln(), den + w)
    })
}

fn nfl_grad(p: &[f64], target: &[bool], gamma: f64, upstream: f64) -> Vec<f64> {
    let (num, den) = nfl_sums(p, target, gamma);
    let floored = den < NFL_DENOM_FLOOR;
    let den = den.max(NFL_DENOM_FLOOR);
    p.iter()
        .zip(target)
        .map(|(&pi, &fg)| {
            let raw = if fg { pi } else { 1.0 - pi };
            if raw <= NFL_EPS || raw >= 1.0 - NFL_EPS {
                return 0.0;
            }
            let pt = raw;
            let one_m = 1.0 - pt;
            let w = one_m.powf(gamma);
            let dw = if gamma == 0.0 { 0.0 } else { -gamma * one_m.powf(gamma - 1.0) };
            let l = -pt.ln();
            let dl = -1.0 / pt;
            let dnum = dw * l + w * dl;
            let dden = if floored { 0.0 } else { dw };
            let dpt = (dnum * den - num * dden) / (den * den);
            let sign = if fg { 1.0 } else { -1.0 };
            upstream * dpt * sign
        })
        .collect()
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.oh * g.ow;
    let mut cols = vec![0.0; g.cin * g.k * g.k * p];
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.oh * g.ow;
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> Mat<'a> {
    fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Mat {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    fn from_tensor(t: &'a Tensor, op: &'static str) -> Result<Self> {
        let (r, c) = t.dims2(op)?;
        Ok(Self::new(t.data(), r, c))
    }

    fn t(self) -> Self {
        Mat {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn t_if(self, flag: bool) -> Self {
        if flag {
            self.t()
        } else {
            self
        }
    }
}

/// `c += a · b` with `c` row-major `a.rows × b.cols`.
fn gemm(a: Mat, b: Mat, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(c.len(), a.rows * b.cols);
    if a.rows == 0 || b.cols == 0 || a.cols == 0 {
        return;
    }
    // SAFETY: the views cover their backing slices for the given strides and
    // extents (checked by construction), and `c` has exactly rows×cols entries.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            1.0,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

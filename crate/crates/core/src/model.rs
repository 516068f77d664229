//! Toy segmentation network used for both cascade levels.
//!
//! ```text
//! image ─ conv s2 ─ conv ─┐
//!                         + ─ F^h (1/2) ─ conv s2 ─ conv ─ mini-ASPP ─ F (1/4)
//! [prev,pos,neg] ─ conv s2 ─ conv1×1 ─┘
//! F ─ SGM ─ upsample×2 ─ ĝ ;  (F^h, ĝ) ─ HSGM ─ head ─ upsample×2 ─ sigmoid
//! ```

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::Segmenter;
use crate::clicks::{encode_clicks, Click, GuidanceMaps, DEFAULT_DISK_RADIUS};
use crate::error::{Error, Result};
use crate::graph_prop::{fuse_on, hsgm_forward_on, sgm_forward_on, ClickIndexSet, HsgmVars, SgmVars};
use crate::mask::{BinMask, ProbMask};
use crate::tensor::{load_checkpoint, save_checkpoint, ParamSet, Tape, Tensor, Var};

/// Which parts of the feature propagation module are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpmVariant {
    /// No click propagation; the head sees projected high-level features only.
    None,
    /// Low-resolution sparse graph only.
    Sgm,
    /// Sparse graph, then plain fusion with the high-resolution features.
    SgmFuse,
    /// Sparse graph, fusion, then a second sparse graph on the fused features.
    SgmFuseSgm,
    /// Sparse graph followed by the high-resolution sparse graph.
    #[default]
    SgmHsgm,
}

impl FpmVariant {
    pub fn uses_sgm(self) -> bool {
        self != FpmVariant::None
    }

    /// Whether the head consumes fused low/high-level features.
    pub fn fuses(self) -> bool {
        matches!(self, FpmVariant::SgmFuse | FpmVariant::SgmFuseSgm | FpmVariant::SgmHsgm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channels of the 1/2-scale features (C').
    pub low_channels: usize,
    /// Channels of the 1/4-scale features (C).
    pub high_channels: usize,
    pub fpm: FpmVariant,
    /// Learned polarity embedding on attention keys.
    pub polarity_embedding: bool,
    pub disk_radius: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            low_channels: 16,
            high_channels: 32,
            fpm: FpmVariant::SgmHsgm,
            polarity_embedding: true,
            disk_radius: DEFAULT_DISK_RADIUS,
        }
    }
}

const ASPP_DILATIONS: [usize; 3] = [1, 2, 4];

/// Image, guidance maps and previous prediction, spatially aligned.
#[derive(Clone, Debug)]
pub struct EncodedInput {
    pub image: Tensor,
    pub guidance: GuidanceMaps,
    pub prev_prob: ProbMask,
}

impl EncodedInput {
    pub fn new(image: &Tensor, prev_prob: &ProbMask, clicks: &[Click], radius: usize) -> Result<Self> {
        let (c, h, w) = image.dims3("encode_input")?;
        if c != 3 {
            return Err(Error::Dimension {
                op: "encode_input",
                axis: "channels",
                expected: 3,
                got: c,
            });
        }
        if prev_prob.dims() != (h, w) {
            return Err(Error::Shape {
                op: "encode_input",
                detail: format!("previous prediction {:?} vs image {h}×{w}", prev_prob.dims()),
            });
        }
        Ok(EncodedInput {
            image: image.clone(),
            guidance: encode_clicks(clicks, h, w, radius)?,
            prev_prob: prev_prob.clone(),
        })
    }

    fn guidance_tensor(&self) -> Tensor {
        let (h, w) = self.prev_prob.dims();
        let mut data = Vec::with_capacity(3 * h * w);
        data.extend_from_slice(self.prev_prob.data());
        data.extend(self.guidance.pos.data().iter().map(|&b| f64::from(u8::from(b))));
        data.extend(self.guidance.neg.data().iter().map(|&b| f64::from(u8::from(b))));
        Tensor::new([3, h, w], data).expect("consistent dims")
    }
}

/// Parameters and architecture of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

/// Tape handles for every parameter, aligned with `Model::params`.
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    /// Wraps handles already recorded in layout order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        ParamVars(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// `(name, shape, fan_in)` for every parameter of an architecture. `fan_in`
/// of zero marks tensors that start at zero.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, usize)> {
    let (cl, ch) = (cfg.low_channels, cfg.high_channels);
    let mut v: Vec<(String, Vec<usize>, usize)> = Vec::new();
    let mut conv = |name: &str, cout: usize, cin: usize, k: usize| {
        v.push((format!("{name}.w"), vec![cout, cin, k, k], cin * k * k));
        v.push((format!("{name}.b"), vec![cout], 0));
    };
    conv("img.conv1", cl, 3, 3);
    conv("img.conv2", cl, cl, 3);
    conv("fuse.conv1", cl, 3, 3);
    conv("fuse.conv2", cl, cl, 1);
    conv("enc.conv3", ch, cl, 3);
    conv("enc.conv4", ch, ch, 3);
    for d in ASPP_DILATIONS {
        conv(&format!("aspp.d{d}"), ch, ch, 3);
    }
    conv("aspp.proj", ch, ch * ASPP_DILATIONS.len(), 1);
    if cfg.fpm.fuses() {
        conv("hsgm.sigma", cl, cl + ch, 1);
    } else {
        conv("dec.proj", cl, ch, 1);
    }
    conv("head.conv1", cl, cl, 3);
    conv("head.conv2", 1, cl, 1);
    let square = |v: &mut Vec<(String, Vec<usize>, usize)>, prefix: &str, c: usize, names: &[&str]| {
        for n in names {
            v.push((format!("{prefix}.{n}"), vec![c, c], c));
        }
        if cfg.polarity_embedding {
            v.push((format!("{prefix}.pol"), vec![c, 2], 0));
        }
    };
    if cfg.fpm.uses_sgm() {
        square(&mut v, "sgm", ch, &["w_c", "theta", "phi"]);
    }
    match cfg.fpm {
        FpmVariant::SgmHsgm => {
            v.push(("hsgm.w_f".into(), vec![cl, cl], cl));
            square(&mut v, "hsgm", ch, &["theta_g", "phi_g"]);
        }
        FpmVariant::SgmFuseSgm => square(&mut v, "sgm2", cl, &["w_c", "theta", "phi"]),
        _ => {}
    }
    v
}

impl Model {
    /// He-normal weights from a seeded generator, zero biases, zero polarity embeddings.
    pub fn init(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape, fan_in) in layout(&cfg) {
            let t = if fan_in == 0 {
                Tensor::zeros(shape)
            } else if shape.len() == 2 {
                Tensor::randn(shape, (1.0 / fan_in as f64).sqrt(), &mut rng)
            } else {
                Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
            };
            params.insert(name, t);
        }
        Model { cfg, params }
    }

    /// All-zero parameters.
    pub fn zeros(cfg: ModelConfig) -> Self {
        let mut params = ParamSet::new();
        for (name, shape, _) in layout(&cfg) {
            params.insert(name, Tensor::zeros(shape));
        }
        Model { cfg, params }
    }

    /// Rebuilds a model from loaded parameters, checking them against the architecture.
    pub fn from_params(cfg: ModelConfig, params: ParamSet) -> Result<Self> {
        let expected = layout(&cfg);
        if expected.len() != params.len() {
            return Err(Error::Contract(format!(
                "architecture expects {} tensors, checkpoint has {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == &shape[..] => {}
                Some(t) => {
                    return Err(Error::Contract(format!(
                        "`{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Contract(format!("checkpoint lacks `{name}`"))),
            }
        }
        Ok(Model { cfg, params })
    }

    pub fn scalar_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Records every parameter on the tape, trainable or not.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        ParamVars(
            self.params
                .values()
                .iter()
                .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
                .collect(),
        )
    }

    fn var(&self, pv: &ParamVars, name: &str) -> Var {
        let i = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from layout"));
        pv.0[i]
    }

    fn opt_var(&self, pv: &ParamVars, name: &str) -> Option<Var> {
        self.params.index_of(name).map(|i| pv.0[i])
    }

    fn conv(&self, tape: &mut Tape, pv: &ParamVars, name: &str, x: Var, stride: usize, dilation: usize) -> Result<Var> {
        let w = self.var(pv, &format!("{name}.w"));
        let k = tape.value(w).shape()[2];
        let y = tape.conv2d(x, w, stride, dilation, dilation * (k / 2))?;
        tape.add_channel_bias(y, self.var(pv, &format!("{name}.b")))
    }

    fn conv_relu(&self, tape: &mut Tape, pv: &ParamVars, name: &str, x: Var, stride: usize, dilation: usize) -> Result<Var> {
        let y = self.conv(tape, pv, name, x, stride, dilation)?;
        Ok(tape.relu(y))
    }

    /// Image branch first block plus the fused guidance branch, at 1/2 scale.
    pub fn fuse_guidance_on(&self, tape: &mut Tape, pv: &ParamVars, x: &EncodedInput) -> Result<Var> {
        let (_, h, w) = x.image.dims3("fuse_guidance")?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Argument(format!("input {h}×{w} must be divisible by 4")));
        }
        let img = tape.constant(x.image.map(|v| v - 0.5));
        let a = self.conv_relu(tape, pv, "img.conv1", img, 2, 1)?;
        let a = self.conv_relu(tape, pv, "img.conv2", a, 1, 1)?;
        let g = tape.constant(x.guidance_tensor());
        let b = self.conv_relu(tape, pv, "fuse.conv1", g, 2, 1)?;
        let b = self.conv(tape, pv, "fuse.conv2", b, 1, 1)?;
        tape.add(a, b)
    }

    /// `(F^h, F)`: the fused 1/2-scale map and the 1/4-scale map after the mini-ASPP.
    pub fn backbone_on(&self, tape: &mut Tape, pv: &ParamVars, fused: Var) -> Result<(Var, Var)> {
        let (_, h, w) = tape.value(fused).dims3("backbone_features")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Argument(format!("half-scale features {h}×{w} must be even")));
        }
        let f = self.conv_relu(tape, pv, "enc.conv3", fused, 2, 1)?;
        let f = self.conv_relu(tape, pv, "enc.conv4", f, 1, 1)?;
        let branches = ASPP_DILATIONS
            .iter()
            .map(|&d| self.conv_relu(tape, pv, &format!("aspp.d{d}"), f, 1, d))
            .collect::<Result<Vec<_>>>()?;
        let cat = tape.concat(&branches)?;
        let f = self.conv_relu(tape, pv, "aspp.proj", cat, 1, 1)?;
        Ok((fused, f))
    }

    fn sgm_vars(&self, pv: &ParamVars, prefix: &str) -> SgmVars {
        SgmVars {
            w_c: self.var(pv, &format!("{prefix}.w_c")),
            theta: self.var(pv, &format!("{prefix}.theta")),
            phi: self.var(pv, &format!("{prefix}.phi")),
            polarity: self.opt_var(pv, &format!("{prefix}.pol")),
        }
    }

    /// Full forward pass to a 1×H×W probability map.
    pub fn forward_on(&self, tape: &mut Tape, pv: &ParamVars, x: &EncodedInput, clicks: &[Click]) -> Result<Var> {
        let (_, h, w) = x.image.dims3("forward")?;
        let fused = self.fuse_guidance_on(tape, pv, x)?;
        let (fh, f) = self.backbone_on(tape, pv, fused)?;
        let (hl, wl) = (h / 4, w / 4);
        let (hh, wh) = (h / 2, w / 2);
        let mut g = f;
        if self.cfg.fpm.uses_sgm() {
            let low = ClickIndexSet::from_clicks(clicks, 4, hl, wl)?;
            g = sgm_forward_on(tape, f, &low, &self.sgm_vars(pv, "sgm"))?;
        }
        let g_up = tape.upsample(g, 2)?;
        let high = || ClickIndexSet::from_clicks(clicks, 2, hh, wh);
        let sigma = |tape: &mut Tape| fuse_on(tape, fh, g_up, self.var(pv, "hsgm.sigma.w"), self.var(pv, "hsgm.sigma.b"));
        let dec = match self.cfg.fpm {
            FpmVariant::None | FpmVariant::Sgm => self.conv_relu(tape, pv, "dec.proj", g_up, 1, 1)?,
            FpmVariant::SgmFuse => sigma(tape)?,
            FpmVariant::SgmFuseSgm => {
                let s = sigma(tape)?;
                sgm_forward_on(tape, s, &high()?, &self.sgm_vars(pv, "sgm2"))?
            }
            FpmVariant::SgmHsgm => {
                let vars = HsgmVars {
                    sigma_w: self.var(pv, "hsgm.sigma.w"),
                    sigma_b: self.var(pv, "hsgm.sigma.b"),
                    w_f: self.var(pv, "hsgm.w_f"),
                    theta_g: self.var(pv, "hsgm.theta_g"),
                    phi_g: self.var(pv, "hsgm.phi_g"),
                    polarity: self.opt_var(pv, "hsgm.pol"),
                };
                hsgm_forward_on(tape, fh, g_up, &high()?, &vars)?
            }
        };
        let y = self.conv_relu(tape, pv, "head.conv1", dec, 1, 1)?;
        let logits = self.conv(tape, pv, "head.conv2", y, 1, 1)?;
        let logits = tape.upsample(logits, 2)?;
        Ok(tape.sigmoid(logits))
    }

    pub fn forward(&self, x: &EncodedInput, clicks: &[Click]) -> Result<ProbMask> {
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape, false);
        let out = self.forward_on(&mut tape, &pv, x, clicks)?;
        ProbMask::from_tensor(tape.value(out))
    }

    /// Fused first-block features, C'×H/2×W/2.
    pub fn fuse_guidance(&self, x: &EncodedInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape, false);
        let v = self.fuse_guidance_on(&mut tape, &pv, x)?;
        Ok(tape.value(v).clone())
    }

    /// `(F^h, F)` for a fused first-block map.
    pub fn backbone_features(&self, fused: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape, false);
        let x = tape.constant(fused.clone());
        let (fh, f) = self.backbone_on(&mut tape, &pv, x)?;
        Ok((tape.value(fh).clone(), tape.value(f).clone()))
    }

    /// Focal loss of one sample and its gradient for every parameter
    /// (parameters the loss does not reach get zeros).
    pub fn loss_and_grads(&self, x: &EncodedInput, clicks: &[Click], gt: &BinMask, gamma: f64) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape, true);
        let p = self.forward_on(&mut tape, &pv, x, clicks)?;
        let loss = tape.nfl_loss(p, gt.data(), gamma)?;
        let mut grads = tape.backward(loss)?;
        let value = tape.value(loss).item();
        let gs = pv
            .0
            .iter()
            .zip(self.params.values())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        Ok((value, gs))
    }
}

impl Segmenter for Model {
    fn predict(&self, image: &Tensor, prev: &ProbMask, clicks: &[Click]) -> Result<ProbMask> {
        let x = EncodedInput::new(image, prev, clicks, self.cfg.disk_radius)?;
        self.forward(&x, clicks)
    }
}

/// Architecture and integrity record written next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub model: ModelConfig,
    /// SHA-256 over parameter names, shapes and values.
    pub params_sha256: String,
    /// Hash of the configuration the model was trained under, if known.
    pub config_hash: Option<String>,
}

/// `<checkpoint>.json`
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Model {
    /// Writes the parameters as a checkpoint plus its JSON sidecar.
    pub fn save(&self, path: &Path, config_hash: Option<String>) -> Result<()> {
        save_checkpoint(&self.params, path)?;
        let side = CheckpointSidecar {
            model: self.cfg,
            params_sha256: self.params.checksum(),
            config_hash,
        };
        let sp = sidecar_path(path);
        std::fs::write(&sp, serde_json::to_string_pretty(&side)?).map_err(|e| Error::io(&sp, e))
    }

    /// Loads a checkpoint, taking the architecture from its sidecar and
    /// verifying the parameter hash.
    pub fn load(path: &Path) -> Result<Self> {
        let params = load_checkpoint(path)?;
        let sp = sidecar_path(path);
        let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        let side: CheckpointSidecar =
            serde_json::from_str(&text).map_err(|e| Error::format(&sp, format!("bad sidecar: {e}")))?;
        if params.checksum() != side.params_sha256 {
            return Err(Error::format(path, "parameter hash does not match sidecar"));
        }
        Model::from_params(side.model, params)
    }
}

/// Focal loss value of a probability map against a binary target.
pub fn nfl_loss(p: &ProbMask, y: &BinMask, gamma: f64) -> Result<f64> {
    if p.dims() != y.dims() {
        return Err(Error::Shape {
            op: "nfl_loss",
            detail: format!("{:?} vs {:?}", p.dims(), y.dims()),
        });
    }
    let mut tape = Tape::new();
    let v = tape.constant(p.to_tensor());
    let l = tape.nfl_loss(v, y.data(), gamma)?;
    Ok(tape.value(l).item())
}

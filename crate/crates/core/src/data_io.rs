//! Synthetic scenes, PNG image/mask files and dataset manifests.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mask::{BinMask, ProbMask};
use crate::tensor::Tensor;

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];
const MAX_ATTEMPTS: usize = 100;
const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// One step of the splitmix64 generator, used to derive per-scene seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of scene `index` in `split`. Distinct `(split, index)` pairs map to
/// distinct seeds for a fixed master seed.
pub fn scene_seed(master: u64, split: Split, index: usize) -> u64 {
    let slot = (index as u64) << 1 | u64::from(split == Split::Eval);
    splitmix64(master.wrapping_add(slot.wrapping_mul(GOLDEN)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Blob,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::Blob, ShapeKind::Ring];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "disk" => Ok(ShapeKind::Disk),
            "rectangle" => Ok(ShapeKind::Rectangle),
            "blob" => Ok(ShapeKind::Blob),
            "ring" => Ok(ShapeKind::Ring),
            other => Err(Error::Argument(format!("unknown shape kind `{other}`"))),
        }
    }
}

/// Geometry of one shape in pixel coordinates (pixel centres at integers).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Disk { cy: f64, cx: f64, r: f64 },
    Rectangle { cy: f64, cx: f64, half_h: f64, half_w: f64, angle: f64 },
    Blob { disks: Vec<(f64, f64, f64)> },
    Ring { cy: f64, cx: f64, r_in: f64, r_out: f64 },
}

impl Shape {
    pub fn kind(&self) -> ShapeKind {
        match self {
            Shape::Disk { .. } => ShapeKind::Disk,
            Shape::Rectangle { .. } => ShapeKind::Rectangle,
            Shape::Blob { .. } => ShapeKind::Blob,
            Shape::Ring { .. } => ShapeKind::Ring,
        }
    }

    pub fn contains(&self, row: f64, col: f64) -> bool {
        match *self {
            Shape::Disk { cy, cx, r } => (row - cy).powi(2) + (col - cx).powi(2) <= r * r,
            Shape::Rectangle {
                cy,
                cx,
                half_h,
                half_w,
                angle,
            } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (row - cy, col - cx);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                u.abs() <= half_w && v.abs() <= half_h
            }
            Shape::Blob { ref disks } => disks
                .iter()
                .any(|&(cy, cx, r)| (row - cy).powi(2) + (col - cx).powi(2) <= r * r),
            Shape::Ring { cy, cx, r_in, r_out } => {
                let d2 = (row - cy).powi(2) + (col - cx).powi(2);
                d2 <= r_out * r_out && d2 >= r_in * r_in
            }
        }
    }

    pub fn raster(&self, h: usize, w: usize) -> BinMask {
        BinMask::from_fn(h, w, |r, c| self.contains(r as f64, c as f64))
    }

    /// Random shape of `kind` whose nominal radius is `scale` pixels.
    fn random(kind: ShapeKind, h: usize, w: usize, scale: f64, rng: &mut impl Rng) -> Shape {
        let cy = rng.gen_range(0.15..0.85) * (h - 1) as f64;
        let cx = rng.gen_range(0.15..0.85) * (w - 1) as f64;
        match kind {
            ShapeKind::Disk => Shape::Disk { cy, cx, r: scale },
            ShapeKind::Rectangle => {
                let aspect: f64 = rng.gen_range(0.4..1.0);
                Shape::Rectangle {
                    cy,
                    cx,
                    half_h: scale * aspect,
                    half_w: scale,
                    angle: rng.gen_range(0.0..std::f64::consts::PI),
                }
            }
            ShapeKind::Blob => {
                let n = rng.gen_range(2..=4);
                let disks = (0..n)
                    .map(|_| {
                        let r = scale * rng.gen_range(0.5..0.9);
                        let a = rng.gen_range(0.0..std::f64::consts::TAU);
                        let d = scale * rng.gen_range(0.0..0.6);
                        (cy + d * a.sin(), cx + d * a.cos(), r)
                    })
                    .collect();
                Shape::Blob { disks }
            }
            ShapeKind::Ring => {
                let r_out = scale.max(6.0);
                let thickness = (r_out * rng.gen_range(0.3..0.5)).max(3.0);
                Shape::Ring {
                    cy,
                    cx,
                    r_in: r_out - thickness,
                    r_out,
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub min_area: f64,
    pub max_area: f64,
    pub max_distractors: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 96,
            width: 144,
            noise_sigma: 0.05,
            min_area: 0.01,
            max_area: 0.6,
            max_distractors: 3,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 64 || self.width < 96 {
            return Err(Error::Config(format!(
                "scene size {}×{} below the 64×96 minimum",
                self.height, self.width
            )));
        }
        if !(0.0 < self.min_area && self.min_area < self.max_area && self.max_area <= 1.0) {
            return Err(Error::Config("scene area bounds must satisfy 0 < min < max ≤ 1".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub shape: Shape,
    pub seed: u64,
    pub distractors: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// 3×H×W, values in [0, 1].
    pub image: Tensor,
    pub gt: BinMask,
    pub meta: SceneMeta,
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn color_gap(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Color at least `gap` away (max-norm) from every color in `avoid`.
fn distinct_color(avoid: &[[f64; 3]], gap: f64, rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let c = random_color(rng);
        if avoid.iter().all(|a| color_gap(&c, a) >= gap) {
            return c;
        }
    }
}

/// One scene: a target shape over a shaded background with up to
/// `max_distractors` other shapes drawn beneath it, plus Gaussian noise.
/// `kind` forces the target's shape.
pub fn generate_scene(seed: u64, cfg: &SceneConfig, kind: Option<ShapeKind>) -> Result<SyntheticScene> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = kind.unwrap_or_else(|| ShapeKind::ALL[rng.gen_range(0..4)]);
    let frame = (h * w) as f64;
    let max_scale = 0.45 * h.min(w) as f64;
    let min_scale = (cfg.min_area * frame / std::f64::consts::PI).sqrt();
    let mut target = None;
    for _ in 0..MAX_ATTEMPTS {
        let s = Shape::random(kind, h, w, rng.gen_range(min_scale..max_scale.max(min_scale + 1.0)), &mut rng);
        let gt = s.raster(h, w);
        let area = gt.count() as f64 / frame;
        if area >= cfg.min_area && area <= cfg.max_area {
            target = Some((s, gt));
            break;
        }
    }
    let (shape, gt) = target.ok_or_else(|| {
        Error::Contract(format!("no {kind:?} target met the area bounds after {MAX_ATTEMPTS} attempts"))
    })?;

    let bg = random_color(&mut rng);
    let fg = distinct_color(&[bg], 0.3, &mut rng);
    let shade: [f64; 2] = [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)];
    let mut img = vec![0.0; 3 * h * w];
    for ch in 0..3 {
        for r in 0..h {
            for c in 0..w {
                let g = shade[0] * (r as f64 / h as f64 - 0.5) + shade[1] * (c as f64 / w as f64 - 0.5);
                img[(ch * h + r) * w + c] = bg[ch] + g;
            }
        }
    }
    let distractors = rng.gen_range(0..=cfg.max_distractors);
    for _ in 0..distractors {
        let k = ShapeKind::ALL[rng.gen_range(0..4)];
        let d = Shape::random(k, h, w, rng.gen_range(min_scale..(0.6 * max_scale).max(min_scale + 1.0)), &mut rng);
        let col = distinct_color(&[bg], 0.2, &mut rng);
        paint(&mut img, h, w, &d.raster(h, w), &col);
    }
    paint(&mut img, h, w, &gt, &fg);
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("finite sigma");
        for v in &mut img {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    } else {
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Ok(SyntheticScene {
        image: Tensor::new([3, h, w], img)?,
        gt,
        meta: SceneMeta {
            shape,
            seed,
            distractors,
        },
    })
}

fn paint(img: &mut [f64], h: usize, w: usize, mask: &BinMask, color: &[f64; 3]) {
    for (i, _) in mask.data().iter().enumerate().filter(|(_, &b)| b) {
        for (ch, &v) in color.iter().enumerate() {
            img[ch * h * w + i] = v;
        }
    }
}

/// `n` scenes of one split, generated in parallel and returned in index order.
pub fn generate_split(master: u64, split: Split, n: usize, cfg: &SceneConfig) -> Result<Vec<SyntheticScene>> {
    use rayon::prelude::*;
    (0..n)
        .into_par_iter()
        .map(|i| generate_scene(scene_seed(master, split, i), cfg, None))
        .collect()
}

fn read_png(path: &Path) -> Result<DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes, path)
}

fn decode_png(bytes: &[u8], origin: &Path) -> Result<DynamicImage> {
    if bytes.len() < PNG_SIGNATURE.len() || bytes[..8] != PNG_SIGNATURE {
        return Err(Error::format(origin, "not a PNG file (bad signature)"));
    }
    image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::format(origin, format!("corrupt PNG: {e}")))
}

/// Decodes PNG bytes of any colour type into a 3×H×W tensor in [0, 1]. Images
/// with a side longer than `max_side` are rejected from the header alone.
pub fn decode_upload(bytes: &[u8], max_side: usize) -> Result<Tensor> {
    let origin = Path::new("<upload>");
    if bytes.len() < PNG_SIGNATURE.len() || bytes[..8] != PNG_SIGNATURE {
        return Err(Error::format(origin, "not a PNG file (bad signature)"));
    }
    let (w, h) = image::ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png)
        .into_dimensions()
        .map_err(|e| Error::format(origin, format!("corrupt PNG: {e}")))?;
    let (w, h) = (w as usize, h as usize);
    if w > max_side || h > max_side {
        return Err(Error::ImageTooLarge {
            height: h,
            width: w,
            max_side,
        });
    }
    let rgb = decode_png(bytes, origin)?.to_rgb8();
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in rgb.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for ch in 0..3 {
            data[ch * h * w + i] = f64::from(p[ch]) / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

/// PNG bytes of a 3×H×W image tensor, as written by [`save_image`].
pub fn image_to_png(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3("image_to_png")?;
    if c != 3 {
        return Err(Error::Dimension {
            op: "image_to_png",
            axis: "channels",
            expected: 3,
            got: c,
        });
    }
    let d = image.data();
    let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([quantize(d[i]), quantize(d[h * w + i]), quantize(d[2 * h * w + i])])
    });
    encode_png(DynamicImage::ImageRgb8(rgb))
}

fn write_png(path: &Path, img: DynamicImage) -> Result<()> {
    let bytes = encode_png(img)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode_png(img: DynamicImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::format("<memory>", format!("PNG encoding failed: {e}")))?;
    Ok(buf.into_inner())
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 3×H×W tensor with values in [0, 1] as 8-bit RGB.
pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = image_to_png(image)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit RGB PNG into a 3×H×W tensor with values in [0, 1].
pub fn load_image(path: &Path) -> Result<Tensor> {
    let rgb = match read_png(path)? {
        DynamicImage::ImageRgb8(i) => i,
        other => {
            return Err(Error::format(
                path,
                format!("expected 8-bit RGB, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in rgb.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for ch in 0..3 {
            data[ch * h * w + i] = f64::from(p[ch]) / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

/// Writes a mask as single-channel 8-bit, 0 or 255.
pub fn save_mask(path: &Path, mask: &BinMask) -> Result<()> {
    write_png(path, DynamicImage::ImageLuma8(mask_to_gray(mask)))
}

fn mask_to_gray(mask: &BinMask) -> GrayImage {
    let (h, w) = mask.dims();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    })
}

/// Reads a single-channel 8-bit PNG whose pixels are all 0 or 255.
pub fn load_mask(path: &Path) -> Result<BinMask> {
    let gray = match read_png(path)? {
        DynamicImage::ImageLuma8(i) => i,
        other => {
            return Err(Error::format(
                path,
                format!("expected 8-bit grayscale mask, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut data = Vec::with_capacity(h * w);
    for p in gray.pixels() {
        match p[0] {
            0 => data.push(false),
            255 => data.push(true),
            v => return Err(Error::format(path, format!("mask value {v} is neither 0 nor 255"))),
        }
    }
    BinMask::new(h, w, data)
}

/// 8-bit grayscale PNG of a probability map (p · 255, rounded).
pub fn prob_to_png(p: &ProbMask) -> Result<Vec<u8>> {
    let (h, w) = p.dims();
    let gray = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([quantize(p.get(y as usize, x as usize))]));
    encode_png(DynamicImage::ImageLuma8(gray))
}

pub fn mask_to_png(mask: &BinMask) -> Result<Vec<u8>> {
    encode_png(DynamicImage::ImageLuma8(mask_to_gray(mask)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
    pub seed: u64,
    pub kind: ShapeKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// SHA-256 of the manifest JSON and every referenced file, in entry order.
    pub fn content_hash(&self, root: &Path) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self)?);
        for e in &self.entries {
            for p in [&e.image, &e.mask] {
                let path = root.join(p);
                h.update(fs::read(&path).map_err(|err| Error::io(&path, err))?);
            }
        }
        Ok(format!("{:x}", h.finalize()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads a manifest and checks that splits use disjoint seeds.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(path, format!("bad manifest: {e}")))?;
        let train: std::collections::HashSet<u64> = m.split(Split::Train).map(|e| e.seed).collect();
        if m.split(Split::Eval).any(|e| train.contains(&e.seed)) {
            return Err(Error::format(path, "train and eval splits share a scene seed"));
        }
        Ok(m)
    }
}

/// A decoded dataset entry.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub id: String,
    pub image: Tensor,
    pub gt: BinMask,
}

impl From<(usize, SyntheticScene)> for LabeledImage {
    fn from((i, s): (usize, SyntheticScene)) -> Self {
        LabeledImage {
            id: format!("scene_{i:04}"),
            image: s.image,
            gt: s.gt,
        }
    }
}

/// Loads and decodes every entry of `split`, checking sizes against the manifest.
pub fn load_split(manifest_path: &Path, split: Split) -> Result<Vec<LabeledImage>> {
    let m = DatasetManifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    m.split(split)
        .map(|e| {
            let image = load_image(&root.join(&e.image))?;
            let gt = load_mask(&root.join(&e.mask))?;
            let (_, h, w) = image.dims3("load_split")?;
            if (h, w) != (m.height, m.width) || gt.dims() != (m.height, m.width) {
                return Err(Error::format(
                    root.join(&e.image),
                    format!("size {h}×{w} differs from manifest {}×{}", m.height, m.width),
                ));
            }
            let id = e
                .image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok(LabeledImage { id, image, gt })
        })
        .collect()
}

/// Generates and writes both splits under `out_dir` with a `manifest.json`.
pub fn build_dataset(n_train: usize, n_eval: usize, seed: u64, out_dir: &Path, cfg: &SceneConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut entries = Vec::with_capacity(n_train + n_eval);
    for (split, n) in [(Split::Train, n_train), (Split::Eval, n_eval)] {
        let tag = match split {
            Split::Train => "train",
            Split::Eval => "eval",
        };
        for (i, scene) in generate_split(seed, split, n, cfg)?.into_iter().enumerate() {
            let image = PathBuf::from("images").join(format!("{tag}_{i:04}.png"));
            let mask = PathBuf::from("masks").join(format!("{tag}_{i:04}.png"));
            save_image(&out_dir.join(&image), &scene.image)?;
            save_mask(&out_dir.join(&mask), &scene.gt)?;
            entries.push(ManifestEntry {
                image,
                mask,
                split,
                seed: scene.meta.seed,
                kind: scene.meta.shape.kind(),
            });
        }
    }
    let m = DatasetManifest {
        height: cfg.height,
        width: cfg.width,
        seed,
        entries,
    };
    m.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(m)
}

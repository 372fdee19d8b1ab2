//! Synthetic datasets, MVTec-style loading, augmentation and map files.
//!
//! Directory layout:
//!
//! ```text
//! <root>/<category>/train/good/*.png
//! <root>/<category>/test/good/*.png
//! <root>/<category>/test/<defect>/*.png
//! <root>/<category>/ground_truth/<defect>/<stem>_mask.png
//! ```

use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ddm::Label;
use crate::error::{HdmError, Result};
use crate::grid::{Grid, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    Stripes,
    Checker,
    SmoothNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefectKind {
    Blob,
    Scratch,
    IntensityShift,
}

impl DefectKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            DefectKind::Blob => "blob",
            DefectKind::Scratch => "scratch",
            DefectKind::IntensityShift => "intensity_shift",
        }
    }
}

/// What [`gen_synthetic`] produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub category: String,
    pub resolution: usize,
    pub n_train_normal: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    pub texture: Texture,
    pub defects: Vec<DefectKind>,
    /// Accepted defect area fraction.
    pub area_band: [f64; 2],
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            category: "stripes".into(),
            resolution: 64,
            n_train_normal: 60,
            n_test_normal: 20,
            n_test_anomalous: 30,
            texture: Texture::Stripes,
            defects: vec![DefectKind::Blob, DefectKind::Scratch, DefectKind::IntensityShift],
            area_band: [0.02, 0.30],
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(HdmError::param("resolution must be at least 8"));
        }
        if self.category.is_empty() || self.category.contains(['/', '\\']) {
            return Err(HdmError::param("category must be a plain directory name"));
        }
        if self.n_test_anomalous > 0 && self.defects.is_empty() {
            return Err(HdmError::param("anomalous samples need at least one defect kind"));
        }
        let [lo, hi] = self.area_band;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(HdmError::param("area band must satisfy 0 < lo < hi < 1"));
        }
        Ok(())
    }
}

/// An image with its label and pixel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Grid,
    pub label: Label,
    /// Single-channel, 1 on defect pixels.
    pub mask: Grid,
    /// Path relative to the category directory, or a generator id.
    pub id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Per-dataset texture parameters; images vary only in phase and noise.
struct TextureStyle {
    texture: Texture,
    angle: f64,
    period: f64,
    contrast: f64,
}

fn texture_image<R: Rng + ?Sized>(style: &TextureStyle, n: usize, rng: &mut R) -> Vec<f64> {
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let jitter = rng.random_range(-0.03..0.03);
    let (s, c) = (style.angle + jitter).sin_cos();
    let mut img = vec![0.0; n * n];
    match style.texture {
        Texture::Stripes => {
            for y in 0..n {
                for x in 0..n {
                    let u = x as f64 * c + y as f64 * s;
                    img[y * n + x] = 0.5 + style.contrast * (std::f64::consts::TAU * u / style.period + phase).sin();
                }
            }
        }
        Texture::Checker => {
            let off = phase / std::f64::consts::TAU * 2.0 * style.period;
            for y in 0..n {
                for x in 0..n {
                    let u = ((x as f64 + off) / style.period).floor() as i64;
                    let v = ((y as f64 + off) / style.period).floor() as i64;
                    let sign = if (u + v).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                    img[y * n + x] = 0.5 + style.contrast * sign;
                }
            }
        }
        Texture::SmoothNoise => {
            let cells = (n as f64 / style.period).ceil() as usize + 2;
            let coarse: Vec<f64> = (0..cells * cells).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            for y in 0..n {
                let fy = y as f64 / style.period;
                let (y0, ty) = (fy.floor() as usize, fy.fract());
                for x in 0..n {
                    let fx = x as f64 / style.period;
                    let (x0, tx) = (fx.floor() as usize, fx.fract());
                    let at = |yy: usize, xx: usize| coarse[yy * cells + xx];
                    let a = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                    let b = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                    img[y * n + x] = 0.5 + 0.5 * style.contrast * (a * (1.0 - ty) + b * ty);
                }
            }
        }
    }
    for v in img.iter_mut() {
        *v = (*v + 0.02 * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0);
    }
    img
}

fn blob_stencil<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<bool> {
    let cy = rng.random_range(0.2..0.8) * n as f64;
    let cx = rng.random_range(0.2..0.8) * n as f64;
    let r = rng.random_range(0.08..0.2) * n as f64;
    let (a1, a2) = (rng.random_range(0.0..0.25), rng.random_range(0.0..0.25));
    let (p1, p2) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU));
    (0..n * n)
        .map(|i| {
            let (dy, dx) = ((i / n) as f64 + 0.5 - cy, (i % n) as f64 + 0.5 - cx);
            let th = dy.atan2(dx);
            let rr = r * (1.0 + a1 * (2.0 * th + p1).sin() + a2 * (3.0 * th + p2).sin());
            (dy * dy + dx * dx).sqrt() <= rr
        })
        .collect()
}

fn scratch_stencil<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<bool> {
    let nf = n as f64;
    let (y0, x0) = (rng.random_range(0.15..0.85) * nf, rng.random_range(0.15..0.85) * nf);
    let th = rng.random_range(0.0..std::f64::consts::PI);
    let len = rng.random_range(0.4..0.8) * nf;
    let half_w = rng.random_range(0.9..1.6);
    let bend = rng.random_range(-0.15..0.15);
    let (s, c) = th.sin_cos();
    (0..n * n)
        .map(|i| {
            let (py, px) = ((i / n) as f64 + 0.5 - y0, (i % n) as f64 + 0.5 - x0);
            let along = px * c + py * s;
            let across = -px * s + py * c - bend * along * along / nf;
            along.abs() <= len / 2.0 && across.abs() <= half_w
        })
        .collect()
}

/// Draws a defect stencil within the area band and paints it into `img`.
fn inject_defect<R: Rng + ?Sized>(img: &mut [f64], n: usize, kind: DefectKind, band: [f64; 2], rng: &mut R) -> Vec<bool> {
    let stencil = loop {
        let st = match kind {
            DefectKind::Scratch => scratch_stencil(n, rng),
            DefectKind::Blob | DefectKind::IntensityShift => blob_stencil(n, rng),
        };
        let frac = st.iter().filter(|b| **b).count() as f64 / (n * n) as f64;
        if frac >= band[0] && frac <= band[1] {
            break st;
        }
    };
    let bright = rng.random_bool(0.5);
    for (v, _) in img.iter_mut().zip(&stencil).filter(|(_, s)| **s) {
        *v = match kind {
            DefectKind::Blob => {
                let target = if bright { 0.92 } else { 0.08 };
                0.3 * *v + 0.7 * target + 0.03 * rng.sample::<f64, _>(StandardNormal)
            }
            DefectKind::Scratch => {
                if bright {
                    0.95
                } else {
                    0.05
                }
            }
            DefectKind::IntensityShift => *v + if bright { 0.3 } else { -0.3 },
        }
        .clamp(0.0, 1.0);
    }
    stencil
}

/// Writes a seeded synthetic dataset under `root/<category>`.
pub fn gen_synthetic(spec: &DatasetSpec, root: &Path) -> Result<PathBuf> {
    spec.validate()?;
    let n = spec.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let style = TextureStyle {
        texture: spec.texture,
        angle: rng.random_range(0.0..std::f64::consts::PI),
        period: rng.random_range(7.0..10.0) * n as f64 / 64.0,
        contrast: 0.25,
    };
    let cat = root.join(&spec.category);
    let write_set = |dir: &Path, count: usize, rng: &mut ChaCha8Rng| -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for i in 0..count {
            let img = texture_image(&style, n, rng);
            save_image(&Grid::from_rows(n, n, img)?, &dir.join(format!("{i:03}.png")))?;
        }
        Ok(())
    };
    write_set(&cat.join("train/good"), spec.n_train_normal, &mut rng)?;
    write_set(&cat.join("test/good"), spec.n_test_normal, &mut rng)?;
    let mut counters = vec![0usize; spec.defects.len()];
    for i in 0..spec.n_test_anomalous {
        let k = i % spec.defects.len();
        let kind = spec.defects[k];
        let mut img = texture_image(&style, n, &mut rng);
        let stencil = inject_defect(&mut img, n, kind, spec.area_band, &mut rng);
        let idx = counters[k];
        counters[k] += 1;
        let img_dir = cat.join("test").join(kind.dir_name());
        let gt_dir = cat.join("ground_truth").join(kind.dir_name());
        std::fs::create_dir_all(&img_dir)?;
        std::fs::create_dir_all(&gt_dir)?;
        save_image(&Grid::from_rows(n, n, img)?, &img_dir.join(format!("{idx:03}.png")))?;
        let mask = Grid::from_rows(n, n, stencil.iter().map(|b| f64::from(u8::from(*b))).collect())?;
        save_image(&mask, &gt_dir.join(format!("{idx:03}_mask.png")))?;
    }
    Ok(cat)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Saves a 1- or 3-channel grid in `[0, 1]` as an 8-bit PNG.
pub fn save_image(img: &Grid, path: &Path) -> Result<()> {
    let (h, w) = (img.height() as u32, img.width() as u32);
    match img.channels() {
        1 => {
            let buf: Vec<u8> = img.data().iter().map(|v| to_u8(*v)).collect();
            image::GrayImage::from_raw(w, h, buf)
                .expect("buffer sized from grid")
                .save(path)?;
        }
        3 => {
            let n = img.shape().pixels();
            let buf: Vec<u8> = (0..n).flat_map(|p| (0..3).map(move |c| (c, p))).map(|(c, p)| to_u8(img.channel(c)[p])).collect();
            image::RgbImage::from_raw(w, h, buf)
                .expect("buffer sized from grid")
                .save(path)?;
        }
        c => return Err(HdmError::contract(format!("cannot save a {c}-channel image"))),
    }
    Ok(())
}

/// Decodes an image to `[0, 1]` with 1 (luma) or 3 (RGB) channels.
pub fn load_image(path: &Path, channels: usize) -> Result<Grid> {
    let img = image::open(path).map_err(|e| HdmError::load(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match channels {
        1 => {
            let g = img.to_luma8();
            Grid::from_rows(h, w, g.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect())
        }
        3 => {
            let rgb = img.to_rgb8().into_raw();
            let n = w * h;
            let data = (0..3)
                .flat_map(|c| (0..n).map(move |p| (c, p)))
                .map(|(c, p)| f64::from(rgb[p * 3 + c]) / 255.0)
                .collect();
            Grid::from_vec(Shape::new(3, h, w), data)
        }
        c => Err(HdmError::param(format!("unsupported channel count {c}"))),
    }
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| HdmError::load(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| HdmError::load(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn rel_id(cat: &Path, path: &Path) -> String {
    path.strip_prefix(cat).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

/// Loads `root/category` (or `root` itself when `category` is empty).
pub fn load_dataset(root: &Path, category: &str, channels: usize) -> Result<Dataset> {
    let cat = if category.is_empty() { root.to_path_buf() } else { root.join(category) };
    let empty_mask = |img: &Grid| Grid::zeros(Shape::new(1, img.height(), img.width()));
    let mut train = Vec::new();
    for p in sorted_pngs(&cat.join("train/good"))? {
        let image = load_image(&p, channels)?;
        train.push(Sample {
            mask: empty_mask(&image),
            image,
            label: Label::Normal,
            id: rel_id(&cat, &p),
        });
    }
    let mut test = Vec::new();
    let test_dir = cat.join("test");
    if test_dir.is_dir() {
        for d in sorted_dirs(&test_dir)? {
            let defect = d.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            for p in sorted_pngs(&d)? {
                let image = load_image(&p, channels)?;
                let (label, mask) = if defect == "good" {
                    (Label::Normal, empty_mask(&image))
                } else {
                    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    let mp = cat.join("ground_truth").join(&defect).join(format!("{stem}_mask.png"));
                    if !mp.is_file() {
                        return Err(HdmError::load(&mp, "missing mask for anomalous test image"));
                    }
                    let m = load_image(&mp, 1)?.map(|v| f64::from(u8::from(v >= 0.5)));
                    if m.height() != image.height() || m.width() != image.width() {
                        return Err(HdmError::load(&mp, "mask and image sizes differ"));
                    }
                    (Label::Anomalous, m)
                };
                test.push(Sample {
                    image,
                    label,
                    mask,
                    id: rel_id(&cat, &p),
                });
            }
        }
    }
    Ok(Dataset { train, test })
}

fn to_f32_planes(g: &Grid) -> Vec<ImageBuffer<Luma<f32>, Vec<f32>>> {
    (0..g.channels())
        .map(|c| {
            ImageBuffer::from_raw(
                g.width() as u32,
                g.height() as u32,
                g.channel(c).iter().map(|v| *v as f32).collect(),
            )
            .expect("plane sized from grid")
        })
        .collect()
}

fn from_f32_planes(planes: &[ImageBuffer<Luma<f32>, Vec<f32>>]) -> Grid {
    let (w, h) = planes[0].dimensions();
    let data = planes.iter().flat_map(|p| p.as_raw().iter().map(|v| f64::from(*v))).collect();
    Grid::from_vec(Shape::new(planes.len(), h as usize, w as usize), data).expect("planes share a size")
}

/// Bilinear resize; identity when the size already matches.
pub fn resize(img: &Grid, height: usize, width: usize) -> Grid {
    if img.height() == height && img.width() == width {
        return img.clone();
    }
    let planes: Vec<_> = to_f32_planes(img)
        .iter()
        .map(|p| imageops::resize(p, width as u32, height as u32, FilterType::Triangle))
        .collect();
    from_f32_planes(&planes).map(|v| v.clamp(0.0, 1.0))
}

/// Nearest-neighbour resize of a binary mask.
pub fn resize_mask(mask: &Grid, height: usize, width: usize) -> Grid {
    if mask.height() == height && mask.width() == width {
        return mask.clone();
    }
    let planes: Vec<_> = to_f32_planes(mask)
        .iter()
        .map(|p| imageops::resize(p, width as u32, height as u32, FilterType::Nearest))
        .collect();
    from_f32_planes(&planes).map(|v| f64::from(u8::from(v >= 0.5)))
}

pub fn hflip(img: &Grid) -> Grid {
    let mut out = img.clone();
    let w = img.width();
    for c in 0..img.channels() {
        for y in 0..img.height() {
            for x in 0..w {
                out.set(c, y, x, img.get(c, y, w - 1 - x));
            }
        }
    }
    out
}

pub fn crop(img: &Grid, top: usize, left: usize, height: usize, width: usize) -> Result<Grid> {
    if top + height > img.height() || left + width > img.width() {
        return Err(HdmError::param("crop window exceeds the image"));
    }
    let mut out = Grid::zeros(Shape::new(img.channels(), height, width));
    for c in 0..img.channels() {
        for y in 0..height {
            for x in 0..width {
                out.set(c, y, x, img.get(c, top + y, left + x));
            }
        }
    }
    Ok(out)
}

pub fn gaussian_blur(img: &Grid, sigma: f64) -> Grid {
    if sigma <= 0.0 {
        return img.clone();
    }
    let planes: Vec<_> = to_f32_planes(img)
        .iter()
        .map(|p| imageops::blur(p, sigma as f32))
        .collect();
    from_f32_planes(&planes).map(|v| v.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub crop_prob: f64,
    /// Side of the square crop window, resized back to the target afterwards.
    pub crop_size: usize,
    pub flip_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_prob: 0.0,
            crop_size: 56,
            flip_prob: 0.5,
            blur_prob: 0.0,
            blur_sigma: 0.6,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("crop_prob", self.crop_prob), ("flip_prob", self.flip_prob), ("blur_prob", self.blur_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(HdmError::param(format!("{name} {p} outside [0, 1]")));
            }
        }
        if self.crop_size == 0 || !(self.blur_sigma >= 0.0) {
            return Err(HdmError::param("crop_size must be positive and blur_sigma non-negative"));
        }
        Ok(())
    }
}

/// Resize to `target`, then random crop (resized back), horizontal flip and
/// Gaussian blur. The mask follows every spatial step and is never blurred.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, target: (usize, usize), rng: &mut R, cfg: &AugmentConfig) -> Result<Sample> {
    cfg.validate()?;
    let (th, tw) = target;
    let mut image = resize(&sample.image, th, tw);
    let mut mask = resize_mask(&sample.mask, th, tw);
    if rng.random_bool(cfg.crop_prob) {
        if cfg.crop_size > th || cfg.crop_size > tw {
            return Err(HdmError::param(format!("crop {} larger than image {th}x{tw}", cfg.crop_size)));
        }
        let top = rng.random_range(0..=th - cfg.crop_size);
        let left = rng.random_range(0..=tw - cfg.crop_size);
        image = resize(&crop(&image, top, left, cfg.crop_size, cfg.crop_size)?, th, tw);
        mask = resize_mask(&crop(&mask, top, left, cfg.crop_size, cfg.crop_size)?, th, tw);
    }
    if rng.random_bool(cfg.flip_prob) {
        image = hflip(&image);
        mask = hflip(&mask);
    }
    if rng.random_bool(cfg.blur_prob) {
        image = gaussian_blur(&image, cfg.blur_sigma);
    }
    Ok(Sample {
        image,
        mask,
        label: sample.label,
        id: sample.id.clone(),
    })
}

pub const MAP_MAGIC: &[u8; 8] = b"HDMF32\0\0";

/// Path of the raw sidecar next to a map PNG.
pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("f32")
}

/// Writes a single-channel map in `[0, 1]` as a 16-bit PNG plus its exact
/// `f32` sidecar.
pub fn write_map(map: &Grid, png: &Path) -> Result<()> {
    if map.channels() != 1 {
        return Err(HdmError::contract("maps are single-channel"));
    }
    let (h, w) = (map.height(), map.width());
    let px: Vec<u16> = map.data().iter().map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, px)
        .expect("buffer sized from grid")
        .save(png)?;
    let mut bytes = Vec::with_capacity(16 + 4 * map.len());
    bytes.extend_from_slice(MAP_MAGIC);
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    for v in map.data() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(sidecar_path(png), bytes)?;
    Ok(())
}

/// Reads a map sidecar (`.f32`).
pub fn read_map(path: &Path) -> Result<Grid> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAP_MAGIC {
        return Err(HdmError::format(format!("{} is not a map sidecar", path.display())));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() != 4 * h * w {
        return Err(HdmError::format(format!("{}: expected {} values", path.display(), h * w)));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Grid::from_rows(h, w, data)
}

/// Reads the 16-bit PNG form of a map.
pub fn read_map_png(path: &Path) -> Result<Grid> {
    let img = image::open(path).map_err(|e| HdmError::load(path, e.to_string()))?.to_luma16();
    let (w, h) = img.dimensions();
    Grid::from_rows(
        h as usize,
        w as usize,
        img.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_is_an_involution() {
        let g = Grid::from_rows(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(hflip(&hflip(&g)), g);
        assert_eq!(hflip(&g).data()[..3], [3.0, 2.0, 1.0]);
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let s = Sample {
            image: Grid::from_rows(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
            label: Label::Normal,
            mask: Grid::zeros(Shape::new(1, 2, 2)),
            id: "x".into(),
        };
        let cfg = AugmentConfig {
            flip_prob: 0.0,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&s, (2, 2), &mut rng, &cfg).unwrap(), s);
        let big = AugmentConfig {
            crop_prob: 1.0,
            crop_size: 5,
            ..cfg
        };
        assert!(augment(&s, (2, 2), &mut rng, &big).is_err());
    }

    #[test]
    fn map_endpoint_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = Grid::from_rows(1, 3, vec![0.0, 0.25, 1.0]).unwrap();
        write_map(&m, &p).unwrap();
        assert_eq!(read_map(&sidecar_path(&p)).unwrap(), m);
        let png = read_map_png(&p).unwrap();
        assert_eq!(png.data()[2], 1.0);
        assert!((png.data()[1] - 0.25).abs() <= 1.0 / 65535.0);
    }
}

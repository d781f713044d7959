//! Novelty injection: appearance classes, letter/style, pen and background
//! manipulations, composable pipelines and novel-pool generation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    Appearance, CorpusError, Difficulty, LineImage, LineSample, Manifest, ManifestRecord,
    NoveltyType,
};
use crate::ontology::{self, KnownWriterSpace, OntologyError};
use crate::seed;
use crate::style_metrics::{self, ForegroundMask, StyleError};
use crate::synth::shear_rows;

pub const DEFAULT_NOISE_SIGMA: f64 = 25.0;
pub const DEFAULT_BLUR_SIGMA: f64 = 1.5;
pub const BIG_SLANT: f64 = 45.0;
pub const SMALL_SLANT: f64 = 15.0;
pub const INCREASE_SIZE: f64 = 1.5;

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("invalid transform parameter: {0}")]
    InvalidParameter(String),
    #[error("missing {kind} asset {id:?}")]
    MissingAsset { kind: &'static str, id: String },
    #[error("asset {id:?} is {asset_w}x{asset_h}, smaller than the {line_w}x{line_h} line, and not tileable")]
    AssetTooSmall {
        id: String,
        asset_w: u32,
        asset_h: u32,
        line_w: u32,
        line_h: u32,
    },
    #[error("sample {0:?}: background replacement could not preserve the ink mask")]
    MaskNotPreserved(String),
    #[error("pipeline replaces the background more than once")]
    IncompatibleBackgrounds,
    #[error("pipeline is empty")]
    EmptyPipeline,
    #[error("{novelty_type} entry needs {needed} base samples, only {available} available")]
    InsufficientBase {
        novelty_type: NoveltyType,
        needed: usize,
        available: usize,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
}

/// One image manipulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transform {
    GaussianNoise {
        #[serde(default = "default_noise")]
        sigma: f64,
    },
    AntiqueBackground {
        asset: String,
    },
    /// Flip upside down.
    ReflectHorizontalAxis,
    /// Mirror left to right.
    ReflectVerticalAxis,
    GaussianBlur {
        #[serde(default = "default_blur")]
        sigma: f64,
    },
    InvertColor,
    Dilate {
        radius: u32,
    },
    Erode {
        radius: u32,
    },
    Shear {
        degrees: f64,
    },
    Resize {
        scale: f64,
    },
    PenColor {
        value: u8,
        #[serde(default)]
        label: Option<String>,
    },
    PenTexture {
        asset: String,
    },
    BackgroundTexture {
        asset: String,
    },
}

fn default_noise() -> f64 {
    DEFAULT_NOISE_SIGMA
}

fn default_blur() -> f64 {
    DEFAULT_BLUR_SIGMA
}

impl Transform {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |msg: String| Err(AugmentError::InvalidParameter(msg));
        match *self {
            Transform::GaussianNoise { sigma } | Transform::GaussianBlur { sigma }
                if !(sigma > 0.0 && sigma.is_finite()) =>
            {
                bad(format!("sigma must be positive, got {sigma}"))
            }
            Transform::Dilate { radius } | Transform::Erode { radius } if radius < 1 => {
                bad("radius must be at least 1".into())
            }
            Transform::Shear { degrees } if degrees.is_nan() || degrees.abs() > 60.0 => {
                bad(format!("shear must be within ±60°, got {degrees}"))
            }
            Transform::Resize { scale } if !(scale > 0.0 && scale.is_finite()) => {
                bad(format!("scale must be positive, got {scale}"))
            }
            _ => Ok(()),
        }
    }

    fn replaces_background(&self) -> bool {
        matches!(
            self,
            Transform::AntiqueBackground { .. } | Transform::BackgroundTexture { .. }
        )
    }

    /// Novelty category the transform introduces by default.
    pub fn novelty_type(&self) -> NoveltyType {
        match self {
            Transform::InvertColor
            | Transform::Dilate { .. }
            | Transform::Erode { .. }
            | Transform::Shear { .. }
            | Transform::Resize { .. } => NoveltyType::Letter,
            Transform::PenColor { .. } | Transform::PenTexture { .. } => NoveltyType::Pen,
            _ => NoveltyType::Background,
        }
    }

    /// Appearance class after the transform, if it changes it.
    pub fn appearance(&self) -> Option<Appearance> {
        match self {
            Transform::GaussianNoise { .. } => Some(Appearance::Noise),
            Transform::AntiqueBackground { .. } => Some(Appearance::Antique),
            Transform::ReflectHorizontalAxis => Some(Appearance::Reflect0),
            Transform::ReflectVerticalAxis => Some(Appearance::Reflect1),
            Transform::GaussianBlur { .. } => Some(Appearance::Blur),
            Transform::InvertColor => Some(Appearance::InvertColor),
            Transform::BackgroundTexture { asset } => Some(Appearance::Other(asset.clone())),
            _ => None,
        }
    }

    /// Human-readable subtype name.
    pub fn subtype(&self) -> String {
        match self {
            Transform::GaussianNoise { .. } => "Gaussian Noise".into(),
            Transform::AntiqueBackground { asset }
            | Transform::PenTexture { asset }
            | Transform::BackgroundTexture { asset } => asset.clone(),
            Transform::ReflectHorizontalAxis => "Reflect_0".into(),
            Transform::ReflectVerticalAxis => "Reflect_1".into(),
            Transform::GaussianBlur { .. } => "Blur".into(),
            Transform::InvertColor => "Inverted".into(),
            Transform::Dilate { .. } => "Dilate".into(),
            Transform::Erode { .. } => "Erode".into(),
            Transform::Shear { degrees } => {
                if degrees.abs() >= 30.0 {
                    if *degrees > 0.0 { "Big Right Slant" } else { "Big Left Slant" }.into()
                } else if *degrees == 0.0 {
                    "Zero Slant".into()
                } else {
                    "Small Slant".into()
                }
            }
            Transform::Resize { scale } => {
                if *scale >= 1.0 { "Increase Size" } else { "Decrease Size" }.into()
            }
            Transform::PenColor { value, label } => {
                label.clone().unwrap_or_else(|| format!("Pen {value}"))
            }
        }
    }
}

/// Texture supplied by the user.
#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundAsset {
    pub id: String,
    pub image: LineImage,
    pub provenance: String,
    pub tileable: bool,
}

/// Background and pen textures keyed by id.
#[derive(Clone, Debug, Default)]
pub struct AssetStore {
    pub background: BTreeMap<String, BackgroundAsset>,
    pub pen: BTreeMap<String, BackgroundAsset>,
}

impl AssetStore {
    /// Loads `background/*.png` and `pen/*.png`; ids are file stems.
    pub fn load(dir: &Path) -> Result<Self, AugmentError> {
        let mut store = AssetStore::default();
        for (sub, map) in [("background", &mut store.background), ("pen", &mut store.pen)] {
            let d = dir.join(sub);
            if !d.is_dir() {
                continue;
            }
            let mut paths: Vec<PathBuf> = fs::read_dir(&d)
                .map_err(|source| AugmentError::Io {
                    path: d.clone(),
                    source,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("pgm"))
                })
                .collect();
            paths.sort();
            for p in paths {
                let id = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let image = LineImage::load(&p)?;
                map.insert(
                    id.clone(),
                    BackgroundAsset {
                        id,
                        image,
                        provenance: p.display().to_string(),
                        tileable: true,
                    },
                );
            }
        }
        Ok(store)
    }

    /// Small procedural textures for demos and self-tests.
    pub fn synthetic(seed_value: u64) -> Self {
        let mut rng = seed::rng(seed::derive(seed_value, "augment.synthetic_assets"));
        let noise = Normal::new(0.0, 10.0).expect("valid normal");
        let mut make = |id: &str, base: f64, amp: f64, period: f64| {
            let image = LineImage::from_fn(96, 96, |x, y| {
                let wave = (f64::from(x) / period).sin() * (f64::from(y) / (period * 1.7)).cos();
                (base + amp * wave + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8
            });
            (
                id.to_string(),
                BackgroundAsset {
                    id: id.to_string(),
                    image,
                    provenance: "procedural".into(),
                    tileable: true,
                },
            )
        };
        let background = [
            make("Brown Paper", 175.0, 20.0, 9.0),
            make("Coffee Stain", 200.0, 35.0, 23.0),
            make("Vintage Paper", 215.0, 12.0, 5.0),
        ]
        .into_iter()
        .collect();
        let pen = [
            make("Gold Texture", 140.0, 40.0, 4.0),
            make("Brown Texture", 90.0, 25.0, 7.0),
            make("Rainbow", 128.0, 100.0, 11.0),
        ]
        .into_iter()
        .collect();
        AssetStore { background, pen }
    }

    fn get(&self, kind: &'static str, id: &str) -> Result<&BackgroundAsset, AugmentError> {
        let map = if kind == "pen" { &self.pen } else { &self.background };
        map.get(id).ok_or_else(|| AugmentError::MissingAsset {
            kind,
            id: id.to_string(),
        })
    }
}

/// A line-sized patch of the asset: random crop when large enough, random
/// tiling when smaller and tileable.
pub fn fit_asset(
    asset: &BackgroundAsset,
    width: u32,
    height: u32,
    rng: &mut impl Rng,
) -> Result<LineImage, AugmentError> {
    let (aw, ah) = (asset.image.width(), asset.image.height());
    if aw >= width && ah >= height {
        let ox = rng.random_range(0..=aw - width);
        let oy = rng.random_range(0..=ah - height);
        return Ok(LineImage::from_fn(width, height, |x, y| {
            asset.image.get(x + ox, y + oy)
        }));
    }
    if !asset.tileable {
        return Err(AugmentError::AssetTooSmall {
            id: asset.id.clone(),
            asset_w: aw,
            asset_h: ah,
            line_w: width,
            line_h: height,
        });
    }
    let ox = rng.random_range(0..aw);
    let oy = rng.random_range(0..ah);
    Ok(LineImage::from_fn(width, height, |x, y| {
        asset.image.get((x + ox) % aw, (y + oy) % ah)
    }))
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn region_mean(image: &LineImage, mask: &ForegroundMask, ink: bool) -> Option<u8> {
    let (s, n) = image
        .pixels()
        .iter()
        .zip(mask.bits())
        .filter(|(_, &b)| b == ink)
        .fold((0u64, 0u64), |(s, n), (&v, _)| (s + u64::from(v), n + 1));
    (n > 0).then(|| clamp_u8(s as f64 / n as f64))
}

fn background_fill(image: &LineImage) -> u8 {
    let mask = style_metrics::foreground_mask(image);
    region_mean(image, &mask, false).unwrap_or(255)
}

pub fn reflect_horizontal_axis(image: &LineImage) -> LineImage {
    let h = image.height();
    LineImage::from_fn(image.width(), h, |x, y| image.get(x, h - 1 - y))
}

pub fn reflect_vertical_axis(image: &LineImage) -> LineImage {
    let w = image.width();
    LineImage::from_fn(w, image.height(), |x, y| image.get(w - 1 - x, y))
}

pub fn invert(image: &LineImage) -> LineImage {
    image.map(|v| 255 - v)
}

pub fn gaussian_noise(image: &LineImage, sigma: f64, rng: &mut impl Rng) -> LineImage {
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    image.map(|v| clamp_u8(f64::from(v) + normal.sample(rng)))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(image: &LineImage, sigma: f64) -> LineImage {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let (w, h) = (image.width() as i64, image.height() as i64);
    let mut tmp = vec![0.0f64; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            tmp[(y * w + x) as usize] = kernel
                .iter()
                .enumerate()
                .map(|(k, &c)| {
                    let sx = (x + k as i64 - r).clamp(0, w - 1);
                    c * f64::from(image.get(sx as u32, y as u32))
                })
                .sum();
        }
    }
    LineImage::from_fn(w as u32, h as u32, |x, y| {
        let v: f64 = kernel
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let sy = (i64::from(y) + k as i64 - r).clamp(0, h - 1);
                c * tmp[(sy * w + i64::from(x)) as usize]
            })
            .sum();
        clamp_u8(v)
    })
}

/// L1 distance transform: distance from each pixel to the nearest seed,
/// with `init` giving the starting value of non-seed pixels.
fn l1_distance(w: usize, h: usize, mut d: Vec<u32>) -> Vec<u32> {
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x > 0 {
                d[i] = d[i].min(d[i - 1].saturating_add(1));
            }
            if y > 0 {
                d[i] = d[i].min(d[i - w].saturating_add(1));
            }
        }
    }
    for y in (0..h).rev() {
        for x in (0..w).rev() {
            let i = y * w + x;
            if x + 1 < w {
                d[i] = d[i].min(d[i + 1].saturating_add(1));
            }
            if y + 1 < h {
                d[i] = d[i].min(d[i + w].saturating_add(1));
            }
        }
    }
    d
}

/// Dilation by the L1 ball (4-connected diamond) of `radius`.
pub fn dilate_mask(mask: &ForegroundMask, radius: u32) -> ForegroundMask {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let init = mask.bits().iter().map(|&b| if b { 0 } else { u32::MAX }).collect();
    let d = l1_distance(w, h, init);
    ForegroundMask::new(mask.width(), mask.height(), d.iter().map(|&v| v <= radius).collect())
}

/// Erosion by the L1 ball of `radius`; pixels outside the image count as background.
pub fn erode_mask(mask: &ForegroundMask, radius: u32) -> ForegroundMask {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let mut init = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let border = (x + 1).min(y + 1).min(w - x).min(h - y) as u32;
            init.push(if mask.bits()[y * w + x] { border } else { 0 });
        }
    }
    let d = l1_distance(w, h, init);
    ForegroundMask::new(mask.width(), mask.height(), d.iter().map(|&v| v > radius).collect())
}

/// Re-renders `image` with a new ink mask: added ink takes the mean ink
/// level, removed ink the mean background level.
fn rerender(image: &LineImage, old: &ForegroundMask, new: &ForegroundMask) -> LineImage {
    let ink = region_mean(image, old, true).unwrap_or(0);
    let bg = region_mean(image, old, false).unwrap_or(255);
    let mut out = image.clone();
    for ((v, &o), &n) in out.pixels_mut().iter_mut().zip(old.bits()).zip(new.bits()) {
        match (o, n) {
            (false, true) => *v = ink,
            (true, false) => *v = bg,
            _ => {}
        }
    }
    out
}

pub fn dilate(image: &LineImage, radius: u32) -> LineImage {
    let mask = style_metrics::foreground_mask(image);
    rerender(image, &mask, &dilate_mask(&mask, radius))
}

pub fn erode(image: &LineImage, radius: u32) -> LineImage {
    let mask = style_metrics::foreground_mask(image);
    rerender(image, &mask, &erode_mask(&mask, radius))
}

pub fn shear(image: &LineImage, degrees: f64) -> LineImage {
    shear_rows(image, degrees, background_fill(image))
}

fn bilinear(image: &LineImage, fx: f64, fy: f64) -> f64 {
    let (w, h) = (image.width() as i64, image.height() as i64);
    let x0 = fx.floor();
    let y0 = fy.floor();
    let (tx, ty) = (fx - x0, fy - y0);
    let px = |x: i64, y: i64| f64::from(image.get(x.clamp(0, w - 1) as u32, y.clamp(0, h - 1) as u32));
    let (x0, y0) = (x0 as i64, y0 as i64);
    let top = px(x0, y0) * (1.0 - tx) + px(x0 + 1, y0) * tx;
    let bottom = px(x0, y0 + 1) * (1.0 - tx) + px(x0 + 1, y0 + 1) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Bilinear resampling to an explicit size (pixel-centre aligned).
pub fn resample(image: &LineImage, width: u32, height: u32) -> LineImage {
    let sx = f64::from(image.width()) / f64::from(width);
    let sy = f64::from(image.height()) / f64::from(height);
    LineImage::from_fn(width, height, |x, y| {
        let fx = (f64::from(x) + 0.5) * sx - 0.5;
        let fy = (f64::from(y) + 0.5) * sy - 0.5;
        clamp_u8(bilinear(image, fx, fy))
    })
}

/// Aspect-preserving scale, then centred crop or pad back to the original height.
pub fn resize(image: &LineImage, scale: f64) -> LineImage {
    let fill = background_fill(image);
    let w = ((f64::from(image.width()) * scale).round() as u32).max(1);
    let h = ((f64::from(image.height()) * scale).round() as u32).max(1);
    let scaled = resample(image, w, h);
    let target = image.height();
    LineImage::from_fn(w, target, |x, y| {
        let sy = i64::from(y) + (i64::from(h) - i64::from(target)) / 2;
        if (0..i64::from(h)).contains(&sy) {
            scaled.get(x, sy as u32)
        } else {
            fill
        }
    })
}

/// Pen replacement weighted by pen pressure: `w*c + (1-w)*v` with
/// `w = (255 - v) / 255`, on ink pixels only.
pub fn pen_blend(image: &LineImage, pen: &LineImage) -> LineImage {
    let mask = style_metrics::foreground_mask(image);
    let mut out = image.clone();
    for (i, (v, &ink)) in out.pixels_mut().iter_mut().zip(mask.bits()).enumerate() {
        if ink {
            let orig = f64::from(*v);
            let w = (255.0 - orig) / 255.0;
            *v = clamp_u8(w * f64::from(pen.pixels()[i]) + (1.0 - w) * orig);
        }
    }
    out
}

/// Lays the ink of `image` over `patch`, remapping the patch into the band
/// above the ink threshold and narrowing the band until the Otsu mask of
/// the result equals the original mask.
pub fn composite_background(
    image: &LineImage,
    patch: &LineImage,
    id: &str,
) -> Result<LineImage, AugmentError> {
    let mask = style_metrics::foreground_mask(image);
    let floor = style_metrics::otsu_threshold(image).map_or(128.0, |t| f64::from(t) + 1.0);
    let (pmin, pmax) = patch
        .pixels()
        .iter()
        .fold((u8::MAX, u8::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = f64::from(pmax) - f64::from(pmin);
    const ATTEMPTS: i32 = 8;
    for attempt in 0..=ATTEMPTS {
        let lo = if attempt == ATTEMPTS {
            255.0
        } else {
            255.0 - (255.0 - floor) * 0.5f64.powi(attempt)
        };
        let mut out = image.clone();
        for ((v, &ink), &p) in out.pixels_mut().iter_mut().zip(mask.bits()).zip(patch.pixels()) {
            if !ink {
                let t = if span > 0.0 {
                    (f64::from(p) - f64::from(pmin)) / span
                } else {
                    1.0
                };
                *v = clamp_u8(lo + t * (255.0 - lo));
            }
        }
        if style_metrics::foreground_mask(&out) == mask {
            return Ok(out);
        }
    }
    Err(AugmentError::MaskNotPreserved(id.to_string()))
}

/// Applies one transform to an image.
pub fn apply_image(
    image: &LineImage,
    transform: &Transform,
    assets: &AssetStore,
    seed_value: u64,
    id: &str,
) -> Result<LineImage, AugmentError> {
    transform.validate()?;
    let mut rng = seed::rng(seed_value);
    Ok(match transform {
        Transform::GaussianNoise { sigma } => gaussian_noise(image, *sigma, &mut rng),
        Transform::ReflectHorizontalAxis => reflect_horizontal_axis(image),
        Transform::ReflectVerticalAxis => reflect_vertical_axis(image),
        Transform::GaussianBlur { sigma } => gaussian_blur(image, *sigma),
        Transform::InvertColor => invert(image),
        Transform::Dilate { radius } => dilate(image, *radius),
        Transform::Erode { radius } => erode(image, *radius),
        Transform::Shear { degrees } => shear(image, *degrees),
        Transform::Resize { scale } => resize(image, *scale),
        Transform::PenColor { value, .. } => {
            pen_blend(image, &LineImage::filled(image.width(), image.height(), *value))
        }
        Transform::PenTexture { asset } => {
            let a = assets.get("pen", asset)?;
            let patch = fit_asset(a, image.width(), image.height(), &mut rng)?;
            pen_blend(image, &patch)
        }
        Transform::AntiqueBackground { asset } | Transform::BackgroundTexture { asset } => {
            let a = assets.get("background", asset)?;
            let patch = fit_asset(a, image.width(), image.height(), &mut rng)?;
            composite_background(image, &patch, id)?
        }
    })
}

/// Applies one transform to a sample, returning a relabelled copy.
pub fn apply(
    sample: &LineSample,
    transform: &Transform,
    assets: &AssetStore,
    seed_value: u64,
) -> Result<LineSample, AugmentError> {
    Pipeline::new(vec![transform.clone()])?.apply(sample, assets, seed_value)
}

/// Ordered transforms applied in sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub transforms: Vec<Transform>,
    /// Overrides the category implied by the first transform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub novelty_type: Option<NoveltyType>,
}

impl Pipeline {
    pub fn new(transforms: Vec<Transform>) -> Result<Self, AugmentError> {
        let p = Pipeline {
            transforms,
            novelty_type: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.transforms.is_empty() {
            return Err(AugmentError::EmptyPipeline);
        }
        if self.transforms.iter().filter(|t| t.replaces_background()).count() > 1 {
            return Err(AugmentError::IncompatibleBackgrounds);
        }
        self.transforms.iter().try_for_each(Transform::validate)
    }

    /// "Slant w/ Dilate" style name; slants are abbreviated inside compositions.
    pub fn subtype(&self) -> String {
        if self.transforms.len() == 1 {
            return self.transforms[0].subtype();
        }
        self.transforms
            .iter()
            .map(|t| match t {
                Transform::Shear { .. } => "Slant".to_string(),
                other => other.subtype(),
            })
            .collect::<Vec<_>>()
            .join(" w/ ")
    }

    pub fn novelty_type(&self) -> NoveltyType {
        self.novelty_type
            .unwrap_or_else(|| self.transforms[0].novelty_type())
    }

    pub fn apply_image(
        &self,
        image: &LineImage,
        assets: &AssetStore,
        seed_value: u64,
        id: &str,
    ) -> Result<LineImage, AugmentError> {
        self.validate()?;
        let mut current = image.clone();
        for (i, t) in self.transforms.iter().enumerate() {
            let s = seed::derive_indexed(seed_value, "augment.step", i as u64);
            current = apply_image(&current, t, assets, s, id)?;
        }
        Ok(current)
    }

    pub fn apply(
        &self,
        sample: &LineSample,
        assets: &AssetStore,
        seed_value: u64,
    ) -> Result<LineSample, AugmentError> {
        let image = self.apply_image(&sample.image, assets, seed_value, &sample.id)?;
        let mut labels = sample.labels.clone();
        for t in &self.transforms {
            if let Some(a) = t.appearance() {
                labels.appearance = Some(a);
            }
        }
        labels.novelty_type = self.novelty_type();
        labels.novelty_subtype = self.subtype();
        labels.difficulty = Difficulty::Unassigned;
        Ok(LineSample {
            id: sample.id.clone(),
            image,
            labels,
        })
    }
}

/// Sequential composition of transforms.
pub fn compose(transforms: Vec<Transform>) -> Result<Pipeline, AugmentError> {
    Pipeline::new(transforms)
}

/// Pool entry: `count` samples of one novelty type, cycling through the
/// listed pipelines. Writer entries with no pipelines copy novel-writer lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeEntry {
    pub novelty_type: NoveltyType,
    pub count: usize,
    #[serde(default)]
    pub subtypes: Vec<Vec<Transform>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub entries: Vec<RecipeEntry>,
    /// Allow reusing a base sample within one entry.
    #[serde(default)]
    pub replacement: bool,
}

impl Recipe {
    /// One entry per non-writer novelty type with the standard subtypes.
    pub fn standard(background: usize, pen: usize, letter: usize, assets: &AssetStore) -> Self {
        let bg_assets: Vec<Vec<Transform>> = assets
            .background
            .keys()
            .map(|id| vec![Transform::BackgroundTexture { asset: id.clone() }])
            .chain([
                vec![Transform::GaussianNoise {
                    sigma: DEFAULT_NOISE_SIGMA,
                }],
                vec![Transform::GaussianBlur {
                    sigma: DEFAULT_BLUR_SIGMA,
                }],
            ])
            .collect();
        let pen_subtypes: Vec<Vec<Transform>> = [
            Transform::PenColor {
                value: 29,
                label: Some("Blue Color".into()),
            },
            Transform::PenColor {
                value: 76,
                label: Some("Red Color".into()),
            },
        ]
        .into_iter()
        .map(|t| vec![t])
        .chain(
            assets
                .pen
                .keys()
                .map(|id| vec![Transform::PenTexture { asset: id.clone() }]),
        )
        .collect();
        let letter_subtypes = vec![
            vec![Transform::Dilate { radius: 1 }],
            vec![Transform::Erode { radius: 1 }],
            vec![Transform::Resize {
                scale: INCREASE_SIZE,
            }],
            vec![Transform::Shear { degrees: BIG_SLANT }],
            vec![Transform::Shear { degrees: 30.0 }, Transform::Dilate { radius: 1 }],
            vec![Transform::Shear { degrees: -BIG_SLANT }],
            vec![Transform::Shear {
                degrees: SMALL_SLANT,
            }],
            vec![Transform::InvertColor],
        ];
        Recipe {
            entries: vec![
                RecipeEntry {
                    novelty_type: NoveltyType::Background,
                    count: background,
                    subtypes: bg_assets,
                },
                RecipeEntry {
                    novelty_type: NoveltyType::Pen,
                    count: pen,
                    subtypes: pen_subtypes,
                },
                RecipeEntry {
                    novelty_type: NoveltyType::Letter,
                    count: letter,
                    subtypes: letter_subtypes,
                },
            ],
            replacement: false,
        }
    }
}

struct Job {
    base: usize,
    entry: usize,
    /// Index within the entry, part of the output id.
    k: usize,
    /// Whether the base line comes from the novel-writer pool.
    novel_source: bool,
    pipeline: Option<Pipeline>,
}

/// Generates novel samples from a base manifest and writes them as PNGs
/// plus `manifest.jsonl` under `out_dir`. Difficulty is assigned by
/// tertiles within each novelty type.
pub fn build_novel_pool(
    base: &Manifest,
    recipe: &Recipe,
    assets: &AssetStore,
    seed_value: u64,
    out_dir: &Path,
) -> Result<Manifest, AugmentError> {
    let is_known_clean = |r: &ManifestRecord| {
        r.labels.novelty_type == NoveltyType::None
            && r.labels
                .writer
                .as_deref()
                .is_some_and(|w| base.known_writers.contains(w))
    };
    let known_idx: Vec<usize> = (0..base.len()).filter(|&i| is_known_clean(&base.records[i])).collect();
    let novel_idx: Vec<usize> = (0..base.len())
        .filter(|&i| {
            base.records[i]
                .labels
                .writer
                .as_deref()
                .is_some_and(|w| base.novel_writers.contains(w))
        })
        .collect();

    let mut rng = seed::rng(seed::derive(seed_value, "augment.pool"));
    let mut jobs = Vec::new();
    for (ei, entry) in recipe.entries.iter().enumerate() {
        let pipelines = entry
            .subtypes
            .iter()
            .map(|ts| {
                let mut p = Pipeline::new(ts.clone())?;
                p.novelty_type = Some(entry.novelty_type);
                Ok(p)
            })
            .collect::<Result<Vec<_>, AugmentError>>()?;
        let source = if entry.novelty_type == NoveltyType::Writer && pipelines.is_empty() {
            &novel_idx
        } else {
            &known_idx
        };
        let picks: Vec<usize> = if recipe.replacement {
            if source.is_empty() && entry.count > 0 {
                return Err(AugmentError::InsufficientBase {
                    novelty_type: entry.novelty_type,
                    needed: entry.count,
                    available: 0,
                });
            }
            (0..entry.count)
                .map(|_| source[rng.random_range(0..source.len())])
                .collect()
        } else {
            if source.len() < entry.count {
                return Err(AugmentError::InsufficientBase {
                    novelty_type: entry.novelty_type,
                    needed: entry.count,
                    available: source.len(),
                });
            }
            let mut s = source.clone();
            s.shuffle(&mut rng);
            s.truncate(entry.count);
            s
        };
        let novel_source = std::ptr::eq(source, &novel_idx);
        for (k, b) in picks.into_iter().enumerate() {
            let pipeline = (!pipelines.is_empty()).then(|| pipelines[k % pipelines.len()].clone());
            jobs.push(Job {
                base: b,
                entry: ei,
                k,
                novel_source,
                pipeline,
            });
        }
    }

    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|source| AugmentError::Io {
        path: img_dir.clone(),
        source,
    })?;

    // style reference for writer/letter difficulty
    let needs_styles = jobs.iter().any(|j| {
        matches!(
            recipe.entries[j.entry].novelty_type,
            NoveltyType::Writer | NoveltyType::Letter
        )
    });
    let known_space = if needs_styles {
        let styles: Vec<(String, style_metrics::StyleVector)> = known_idx
            .par_iter()
            .filter_map(|&i| {
                let r = &base.records[i];
                let s = base.load_sample(r).ok()?;
                let v = style_metrics::style_vector(&s.image).ok()?;
                Some((r.labels.writer.clone().unwrap_or_default(), v))
            })
            .collect();
        let mut groups: BTreeMap<String, Vec<style_metrics::StyleVector>> = BTreeMap::new();
        for (w, v) in styles {
            groups.entry(w).or_default().push(v);
        }
        Some(KnownWriterSpace::fit(&groups)?)
    } else {
        None
    };

    // A transform can erase thin strokes entirely (erosion). Such a job
    // moves on to the following lines of its source pool, in index order.
    let results: Vec<(ManifestRecord, f64)> = jobs
        .par_iter()
        .enumerate()
        .map(|(ji, job)| -> Result<(ManifestRecord, f64), AugmentError> {
            let novelty = recipe.entries[job.entry].novelty_type;
            let source = if job.novel_source { &novel_idx } else { &known_idx };
            let start = source.binary_search(&job.base).unwrap_or(0);
            let mut last_err = None;
            for &b in source.iter().cycle().skip(start).take(source.len()) {
                let record = &base.records[b];
                let sample = base.load_sample(record)?;
                let mut out = match &job.pipeline {
                    Some(p) => p.apply(&sample, assets, seed::derive_indexed(seed_value, "augment.sample", ji as u64))?,
                    None => {
                        let mut s = sample.clone();
                        s.labels.novelty_type = novelty;
                        s.labels.novelty_subtype = "Novel Writer".into();
                        s
                    }
                };
                let score = match ontology::difficulty_score(novelty, &out.image, known_space.as_ref()) {
                    Ok(v) => v,
                    Err(e @ OntologyError::Style(StyleError::NoInk { .. })) => {
                        last_err = Some(e);
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
                out.id = format!("{}~{}-{:05}", record.id, novelty.to_string().to_lowercase(), job.k);
                let rel = Path::new("images").join(format!("{}.png", out.id));
                out.image.save_png(&out_dir.join(&rel))?;
                return Ok((
                    ManifestRecord {
                        id: out.id,
                        image: rel,
                        labels: out.labels,
                    },
                    score,
                ));
            }
            Err(last_err.map_or(
                AugmentError::InsufficientBase {
                    novelty_type: novelty,
                    needed: 1,
                    available: 0,
                },
                AugmentError::from,
            ))
        })
        .collect::<Result<_, _>>()?;

    let mut records: Vec<ManifestRecord> = Vec::with_capacity(results.len());
    let mut by_type: BTreeMap<NoveltyType, Vec<usize>> = BTreeMap::new();
    for (i, (r, _)) in results.iter().enumerate() {
        by_type.entry(r.labels.novelty_type).or_default().push(i);
    }
    let mut difficulty = vec![Difficulty::Unassigned; results.len()];
    for idx in by_type.values() {
        let scores: Vec<f64> = idx.iter().map(|&i| results[i].1).collect();
        for (&i, d) in idx.iter().zip(ontology::assign_difficulty(&scores)) {
            difficulty[i] = d;
        }
    }
    for ((mut r, _), d) in results.into_iter().zip(difficulty) {
        r.labels.difficulty = d;
        records.push(r);
    }
    let manifest = Manifest::new(
        records,
        base.alphabet.clone(),
        base.known_writers.clone(),
        base.novel_writers.clone(),
    )?
    .with_base_dir(out_dir);
    crate::corpus::write_manifest(&manifest, &out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, LineStyle};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(seed_value: u64, w: u32, h: u32) -> LineImage {
        let mut rng = seed::rng(seed_value);
        LineImage::from_fn(w, h, |_, _| rng.random())
    }

    fn sample(seed_value: u64) -> LineSample {
        let style = LineStyle::random(&mut seed::rng(seed_value));
        LineSample {
            id: format!("s{seed_value}"),
            image: synth::text_line(&style, 3, seed_value),
            labels: Default::default(),
        }
    }

    /// Brute-force diamond dilation/erosion.
    fn brute(mask: &ForegroundMask, r: u32, dilate: bool) -> ForegroundMask {
        let (w, h) = (mask.width() as i64, mask.height() as i64);
        let r = i64::from(r);
        let mut bits = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let mut any = false;
                let mut all = true;
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx.abs() + dy.abs() > r {
                            continue;
                        }
                        let (sx, sy) = (x + dx, y + dy);
                        let v = (0..w).contains(&sx)
                            && (0..h).contains(&sy)
                            && mask.get(sx as u32, sy as u32);
                        any |= v;
                        all &= v;
                    }
                }
                bits.push(if dilate { any } else { all });
            }
        }
        ForegroundMask::new(mask.width(), mask.height(), bits)
    }

    fn random_mask(seed_value: u64, w: u32, h: u32, p: f64) -> ForegroundMask {
        let mut rng = seed::rng(seed_value);
        ForegroundMask::new(w, h, (0..w * h).map(|_| rng.random_bool(p)).collect())
    }

    #[test]
    fn morphology_matches_brute_force() {
        for s in 0..60 {
            let m = random_mask(s, 7 + (s % 9) as u32, 5 + (s % 7) as u32, 0.3 + (s % 5) as f64 * 0.1);
            for r in 1..=3 {
                assert_eq!(dilate_mask(&m, r), brute(&m, r, true), "dilate seed {s} r {r}");
                assert_eq!(erode_mask(&m, r), brute(&m, r, false), "erode seed {s} r {r}");
            }
        }
    }

    #[test]
    fn dilate_grows_non_full_masks() {
        for s in 0..40 {
            let m = random_mask(s, 12, 9, 0.2);
            if m.is_empty() || m.count() == 108 {
                continue;
            }
            assert!(dilate_mask(&m, 1).count() > m.count());
        }
        let s = sample(3);
        let before = style_metrics::foreground_mask(&s.image).count();
        let after = style_metrics::foreground_mask(&dilate(&s.image, 1)).count();
        assert!(after > before);
    }

    #[test]
    fn closing_contains_original() {
        for s in 0..30 {
            let m = random_mask(s, 16, 12, 0.35);
            let closed = erode_mask(&dilate_mask(&m, 1), 1);
            assert_eq!(closed, brute(&brute(&m, 1, true), 1, false));
            // extensive away from the border, where outside pixels count as background
            for y in 1..11 {
                for x in 1..15 {
                    assert!(!m.get(x, y) || closed.get(x, y));
                }
            }
        }
    }

    #[test]
    fn involutions() {
        for s in 0..20 {
            let img = random_image(s, 13, 7);
            assert_eq!(reflect_horizontal_axis(&reflect_horizontal_axis(&img)), img);
            assert_eq!(reflect_vertical_axis(&reflect_vertical_axis(&img)), img);
            assert_eq!(invert(&invert(&img)), img);
            let inv = invert(&img);
            for (a, b) in img.pixels().iter().zip(inv.pixels()) {
                assert_eq!(*a, 255 - b);
            }
        }
    }

    #[test]
    fn shear_round_trip_on_interior() {
        let img = synth::stroke_image(0.0, 7);
        for deg in [5.0, 20.0, -30.0, 45.0] {
            let back = shear(&shear(&img, deg), -deg);
            let h = img.height();
            let max_off = shear_offset_max(h, deg);
            for y in 0..h {
                for x in max_off..img.width() - max_off {
                    assert_eq!(back.get(x, y), img.get(x, y));
                }
            }
        }
    }

    fn shear_offset_max(h: u32, deg: f64) -> u32 {
        style_metrics::shear_offset(0, h, deg).unsigned_abs() as u32
    }

    #[test]
    fn composition_names_and_identity() {
        let p = compose(vec![Transform::Shear { degrees: 30.0 }, Transform::Dilate { radius: 1 }]).unwrap();
        assert_eq!(p.subtype(), "Slant w/ Dilate");
        assert_eq!(p.novelty_type(), NoveltyType::Letter);

        let s = sample(1);
        let assets = AssetStore::default();
        let same = compose(vec![Transform::Shear { degrees: 0.0 }]).unwrap();
        assert_eq!(same.apply(&s, &assets, 0).unwrap().image, s.image);
        let twice = compose(vec![Transform::ReflectVerticalAxis, Transform::ReflectVerticalAxis]).unwrap();
        assert_eq!(twice.apply(&s, &assets, 0).unwrap().image, s.image);

        let two_bg = compose(vec![
            Transform::BackgroundTexture { asset: "a".into() },
            Transform::AntiqueBackground { asset: "b".into() },
        ]);
        assert!(matches!(two_bg, Err(AugmentError::IncompatibleBackgrounds)));
    }

    #[test]
    fn labels_follow_the_transform() {
        let s = sample(2);
        let assets = AssetStore::synthetic(0);
        let out = apply(&s, &Transform::ReflectHorizontalAxis, &assets, 0).unwrap();
        assert_eq!(out.labels.appearance, Some(Appearance::Reflect0));
        assert_eq!(out.labels.novelty_subtype, "Reflect_0");
        let out = apply(&s, &Transform::PenTexture { asset: "Gold Texture".into() }, &assets, 0).unwrap();
        assert_eq!(out.labels.novelty_type, NoveltyType::Pen);
        assert_eq!(out.labels.novelty_subtype, "Gold Texture");
        assert_eq!(s.labels.novelty_type, NoveltyType::None);
        assert!(matches!(
            apply(&s, &Transform::PenTexture { asset: "nope".into() }, &assets, 0),
            Err(AugmentError::MissingAsset { .. })
        ));
    }

    #[test]
    fn invalid_parameters_rejected() {
        for t in [
            Transform::Dilate { radius: 0 },
            Transform::GaussianBlur { sigma: 0.0 },
            Transform::Resize { scale: -1.0 },
            Transform::Shear { degrees: 61.0 },
        ] {
            assert!(matches!(t.validate(), Err(AugmentError::InvalidParameter(_))));
        }
    }

    #[test]
    fn small_non_tileable_asset_is_rejected() {
        let asset = BackgroundAsset {
            id: "tiny".into(),
            image: LineImage::filled(4, 4, 200),
            provenance: String::new(),
            tileable: false,
        };
        let mut rng = seed::rng(0);
        assert!(matches!(
            fit_asset(&asset, 10, 10, &mut rng),
            Err(AugmentError::AssetTooSmall { .. })
        ));
        let tiled = BackgroundAsset {
            tileable: true,
            ..asset
        };
        assert_eq!(fit_asset(&tiled, 10, 10, &mut rng).unwrap().width(), 10);
    }

    #[test]
    fn background_replacement_preserves_pen_pressure() {
        let assets = AssetStore::synthetic(3);
        for s in 0..15 {
            let smp = sample(100 + s);
            let mask = style_metrics::foreground_mask(&smp.image);
            let before = style_metrics::pen_pressure(&smp.image, &mask).unwrap();
            for id in assets.background.keys() {
                let out = apply(&smp, &Transform::BackgroundTexture { asset: id.clone() }, &assets, s).unwrap();
                let m2 = style_metrics::foreground_mask(&out.image);
                assert_eq!(m2, mask);
                assert_eq!(style_metrics::pen_pressure(&out.image, &m2).unwrap(), before);
            }
        }
    }

    #[test]
    fn resize_keeps_height() {
        let s = sample(4);
        let out = resize(&s.image, 1.5);
        assert_eq!(out.height(), s.image.height());
        assert_eq!(out.width(), (f64::from(s.image.width()) * 1.5).round() as u32);
    }

    #[test]
    fn pool_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let base = synth::demo_corpus(&dir.path().join("base"), 6, 2, 30, 5).unwrap();
        let assets = AssetStore::synthetic(1);
        let mut recipe = Recipe::standard(100, 50, 0, &assets);
        recipe.entries.retain(|e| e.count > 0);
        let a = build_novel_pool(&base, &recipe, &assets, 9, &dir.path().join("a")).unwrap();
        let b = build_novel_pool(&base, &recipe, &assets, 9, &dir.path().join("b")).unwrap();
        let count = |m: &Manifest, t| m.records.iter().filter(|r| r.labels.novelty_type == t).count();
        assert_eq!(count(&a, NoveltyType::Background), 100);
        assert_eq!(count(&a, NoveltyType::Pen), 50);
        let ma = fs::read(dir.path().join("a/manifest.jsonl")).unwrap();
        let mb = fs::read(dir.path().join("b/manifest.jsonl")).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(a, b.clone().with_base_dir(a.base_dir()));
        assert!(a.records.iter().all(|r| r.labels.difficulty != Difficulty::Unassigned));

        let too_many = Recipe {
            entries: vec![RecipeEntry {
                novelty_type: NoveltyType::Pen,
                count: 1000,
                subtypes: vec![vec![Transform::InvertColor]],
            }],
            replacement: false,
        };
        assert!(matches!(
            build_novel_pool(&base, &too_many, &assets, 9, &dir.path().join("c")),
            Err(AugmentError::InsufficientBase { .. })
        ));
    }

    #[test]
    fn full_scale_counts_are_accepted() {
        let assets = AssetStore::synthetic(0);
        let recipe = Recipe::standard(17_662, 11_289, 0, &assets);
        let json = serde_json::to_string(&recipe).unwrap();
        let back: Recipe = serde_json::from_str(&json).unwrap();
        assert_eq!(back.entries[0].count, 17_662);
        assert_eq!(back.entries[1].count, 11_289);
    }

    proptest! {
        #[test]
        fn transforms_stay_in_range_and_reflect_is_involutive(seed_value in any::<u64>(), w in 2u32..30, h in 2u32..20) {
            let img = random_image(seed_value, w, h);
            prop_assert_eq!(reflect_horizontal_axis(&reflect_horizontal_axis(&img)), img.clone());
            prop_assert_eq!(reflect_vertical_axis(&reflect_vertical_axis(&img)), img.clone());
            let assets = AssetStore::default();
            for t in [
                Transform::GaussianNoise { sigma: 25.0 },
                Transform::GaussianBlur { sigma: 1.5 },
                Transform::Resize { scale: 1.5 },
                Transform::Shear { degrees: 20.0 },
                Transform::PenColor { value: 200, label: None },
            ] {
                let out = apply_image(&img, &t, &assets, seed_value, "x").unwrap();
                prop_assert!(out.width() > 0 && out.height() > 0);
            }
        }
    }
}

//! View generation: the basic photometric/geometric augmentations, CutMix
//! masks, and same-crop multi-resolution rendering.
//!
//! A [`CropSpec`] records the realized source rectangle so the identical crop
//! can be re-rendered at any output side. All resampling is bilinear with
//! half-pixel-centre alignment and edge clamping inside the source rectangle.

use serde::{Deserialize, Serialize};

use crate::dataset::Image;
use crate::error::{ClimError, Result};
use crate::numerics::{sample_beta, BetaParams, Rng};

/// Rec. 601 luma of an RGB triple, written so that `r == g == b` maps to
/// exactly that value.
#[inline]
pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    g + 0.299 * (r - g) + 0.114 * (b - g)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Bilinear sample of the rectangle `[top, top+ch) x [left, left+cw)` of a
/// row-major `h×w×c` buffer onto an `out_h×out_w` grid.
#[allow(clippy::too_many_arguments)]
fn sample_rect(
    src: &[f64],
    w: usize,
    c: usize,
    top: usize,
    left: usize,
    ch: usize,
    cw: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let sy = ch as f64 / out_h as f64;
    let sx = cw as f64 / out_w as f64;
    let ymax = (ch - 1) as f64;
    let xmax = (cw - 1) as f64;
    let xs: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|x| {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, xmax);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(cw - 1);
            (left + x0, left + x1, fx - x0 as f64)
        })
        .collect();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, ymax);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(ch - 1);
        let ty = fy - y0 as f64;
        let r0 = (top + y0) * w;
        let r1 = (top + y1) * w;
        for &(x0, x1, tx) in &xs {
            for k in 0..c {
                let p00 = src[(r0 + x0) * c + k];
                let p01 = src[(r0 + x1) * c + k];
                let p10 = src[(r1 + x0) * c + k];
                let p11 = src[(r1 + x1) * c + k];
                out.push(lerp(lerp(p00, p01, tx), lerp(p10, p11, tx), ty));
            }
        }
    }
    out
}

/// Resizes a whole `h×w×c` buffer (values unrestricted) to `out_h×out_w`.
pub fn resize_bilinear(
    src: &[f64],
    h: usize,
    w: usize,
    c: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    sample_rect(src, w, c, 0, 0, h, w, out_h, out_w)
}

pub fn resize_image(img: &Image, out_side: usize) -> Image {
    if img.height() == out_side && img.width() == out_side {
        return img.clone();
    }
    let px = resize_bilinear(
        img.pixels(),
        img.height(),
        img.width(),
        img.channels(),
        out_side,
        out_side,
    );
    Image::from_raw(out_side, out_side, img.channels(), px)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    /// Realized crop area as a fraction of the source area.
    pub sigma: f64,
    /// Realized width / height of the crop rectangle.
    pub aspect: f64,
    pub top: usize,
    pub left: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub out_side: usize,
}

impl CropSpec {
    /// Whole-image crop rendered at `out_side`.
    pub fn full(h: usize, w: usize, out_side: usize) -> Self {
        Self {
            sigma: 1.0,
            aspect: w as f64 / h as f64,
            top: 0,
            left: 0,
            crop_h: h,
            crop_w: w,
            out_side,
        }
    }

    fn from_rect(h: usize, w: usize, top: usize, left: usize, ch: usize, cw: usize, out: usize) -> Self {
        Self {
            sigma: (ch * cw) as f64 / (h * w) as f64,
            aspect: cw as f64 / ch as f64,
            top,
            left,
            crop_h: ch,
            crop_w: cw,
            out_side: out,
        }
    }

    pub fn check(&self, img: &Image) -> Result<()> {
        if self.crop_h == 0
            || self.crop_w == 0
            || self.out_side == 0
            || self.top + self.crop_h > img.height()
            || self.left + self.crop_w > img.width()
        {
            return Err(ClimError::invalid(format!(
                "crop {self:?} outside a {}x{} image",
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    pub crop_scale_range: (f64, f64),
    pub aspect_range: (f64, f64),
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_radius_range: (f64, f64),
    /// Output sides of the multi-resolution views; the first is the base grid
    /// on which crops are sized and masks are drawn.
    pub resolutions: Vec<usize>,
    /// Beta(α, α) parameter for CutMix.
    pub alpha: f64,
    /// Beta(α, α) parameter for the Mixup ablation.
    pub mixup_alpha: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            crop_scale_range: (0.2, 1.0),
            aspect_range: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_radius_range: (0.1, 2.0),
            resolutions: vec![32, 24],
            alpha: 2.0,
            mixup_alpha: 0.2,
        }
    }
}

impl AugConfig {
    /// Every augmentation disabled except the crop, which covers the whole image.
    pub fn identity(resolutions: Vec<usize>) -> Self {
        Self {
            crop_scale_range: (1.0, 1.0),
            aspect_range: (1.0, 1.0),
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            resolutions,
            ..Default::default()
        }
    }

    pub fn base_resolution(&self) -> usize {
        self.resolutions[0]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| ClimError::Config {
            key: format!("augment.{key}"),
            reason: reason.into(),
        };
        for (key, p) in [
            ("flip_prob", self.flip_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(bad(key, "probability must be in [0, 1]"));
            }
        }
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(bad("crop_scale_range", "need 0 < lo <= hi <= 1"));
        }
        let (lo, hi) = self.aspect_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(bad("aspect_range", "need 0 < lo <= hi"));
        }
        let (lo, hi) = self.blur_radius_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(bad("blur_radius_range", "need 0 < lo <= hi"));
        }
        for (key, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(bad(key, "strength must be >= 0"));
            }
        }
        if self.resolutions.is_empty() || self.resolutions.contains(&0) {
            return Err(bad("resolutions", "need at least one positive resolution"));
        }
        BetaParams::new(self.alpha).map_err(|_| bad("alpha", "must be > 0"))?;
        BetaParams::new(self.mixup_alpha).map_err(|_| bad("mixup_alpha", "must be > 0"))?;
        Ok(())
    }
}

/// Samples an in-bounds crop rectangle: up to ten area/aspect proposals, then
/// a centre crop clamped to the aspect range.
pub fn sample_crop(rng: &mut Rng, h: usize, w: usize, cfg: &AugConfig, out_side: usize) -> CropSpec {
    let area = (h * w) as f64;
    let (lo, hi) = cfg.crop_scale_range;
    let (alo, ahi) = cfg.aspect_range;
    for _ in 0..10 {
        let target = area * rng.uniform_range(lo, hi);
        let aspect = rng.uniform_range(alo.ln(), ahi.ln()).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.below(h - ch + 1);
            let left = rng.below(w - cw + 1);
            return CropSpec::from_rect(h, w, top, left, ch, cw, out_side);
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < alo {
        (((w as f64 / alo).round() as usize).clamp(1, h), w)
    } else if in_ratio > ahi {
        (h, ((h as f64 * ahi).round() as usize).clamp(1, w))
    } else {
        (h, w)
    };
    CropSpec::from_rect(h, w, (h - ch) / 2, (w - cw) / 2, ch, cw, out_side)
}

pub fn rerender(img: &Image, spec: &CropSpec, out_side: usize) -> Result<Image> {
    spec.check(img)?;
    if out_side == 0 {
        return Err(ClimError::invalid("output side must be positive"));
    }
    let px = sample_rect(
        img.pixels(),
        img.width(),
        img.channels(),
        spec.top,
        spec.left,
        spec.crop_h,
        spec.crop_w,
        out_side,
        out_side,
    );
    Ok(Image::from_raw(out_side, out_side, img.channels(), px))
}

pub fn random_resized_crop(rng: &mut Rng, img: &Image, cfg: &AugConfig) -> Result<(Image, CropSpec)> {
    if img.is_empty() {
        return Err(ClimError::invalid("cannot crop an empty image"));
    }
    let spec = sample_crop(rng, img.height(), img.width(), cfg, cfg.base_resolution());
    let out = rerender(img, &spec, spec.out_side)?;
    Ok((out, spec))
}

/// `(1/σ)·(K_train/√(H·W))`: the magnification a crop is rendered at.
pub fn scale_factor(spec: &CropSpec, h: usize, w: usize) -> f64 {
    (1.0 / spec.sigma) * (spec.out_side as f64 / ((h * w) as f64).sqrt())
}

pub fn flip_image(img: &Image) -> Image {
    let (h, w, c) = img.shape();
    let mut px = Vec::with_capacity(img.pixels().len());
    for y in 0..h {
        for x in (0..w).rev() {
            for k in 0..c {
                px.push(img.get(y, x, k));
            }
        }
    }
    Image::from_raw(h, w, c, px)
}

pub fn horizontal_flip(rng: &mut Rng, img: &Image, prob: f64) -> Image {
    if rng.bernoulli(prob) {
        flip_image(img)
    } else {
        img.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl JitterFactors {
    pub const IDENTITY: JitterFactors = JitterFactors {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
    };

    pub fn sample(rng: &mut Rng, cfg: &AugConfig) -> Self {
        let mut draw = |s: f64| {
            if s == 0.0 {
                1.0
            } else {
                rng.uniform_range((1.0 - s).max(0.0), 1.0 + s)
            }
        };
        Self {
            brightness: draw(cfg.brightness),
            contrast: draw(cfg.contrast),
            saturation: draw(cfg.saturation),
        }
    }
}

fn require_rgb(img: &Image) -> Result<()> {
    if img.channels() != 3 {
        return Err(ClimError::invalid(format!(
            "operation needs 3 channels, image has {}",
            img.channels()
        )));
    }
    Ok(())
}

/// Brightness, then contrast against the mean luma, then saturation against
/// per-pixel luma; clamped to `[0, 1]` after each stage.
pub fn apply_color_jitter(img: &Image, f: JitterFactors) -> Result<Image> {
    require_rgb(img)?;
    let mut out = img.clone();
    let px = out.pixels_mut();
    if f.brightness != 1.0 {
        for v in px.iter_mut() {
            *v = (*v * f.brightness).clamp(0.0, 1.0);
        }
    }
    if f.contrast != 1.0 {
        let n = px.len() / 3;
        let m = px
            .chunks_exact(3)
            .map(|p| luma(p[0], p[1], p[2]))
            .sum::<f64>()
            / n.max(1) as f64;
        for v in px.iter_mut() {
            *v = lerp(m, *v, f.contrast).clamp(0.0, 1.0);
        }
    }
    if f.saturation != 1.0 {
        for p in px.chunks_exact_mut(3) {
            let l = luma(p[0], p[1], p[2]);
            for v in p.iter_mut() {
                *v = lerp(l, *v, f.saturation).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

pub fn color_jitter(rng: &mut Rng, img: &Image, cfg: &AugConfig) -> Result<Image> {
    require_rgb(img)?;
    let f = JitterFactors::sample(rng, cfg);
    apply_color_jitter(img, f)
}

/// Replaces RGB with luma in every channel. Single-channel images pass through.
pub fn grayscale(img: &Image) -> Image {
    if img.channels() != 3 {
        return img.clone();
    }
    let mut out = img.clone();
    for p in out.pixels_mut().chunks_exact_mut(3) {
        let l = luma(p[0], p[1], p[2]);
        p.fill(l);
    }
    out
}

pub fn to_grayscale(rng: &mut Rng, img: &Image, prob: f64) -> Image {
    if rng.bernoulli(prob) {
        grayscale(img)
    } else {
        img.clone()
    }
}

/// Normalized Gaussian taps for `sigma = radius`, half-width `ceil(2·radius)`.
pub fn gaussian_kernel(radius: f64) -> Vec<f64> {
    let half = (2.0 * radius).ceil().max(1.0) as i64;
    let taps: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * radius * radius)).exp())
        .collect();
    let z: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / z).collect()
}

/// Separable Gaussian blur with edge-clamp padding.
pub fn blur_with_radius(img: &Image, radius: f64) -> Image {
    let (h, w, c) = img.shape();
    let k = gaussian_kernel(radius);
    let half = (k.len() / 2) as i64;
    let src = img.pixels();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = 0.0;
                for (t, wt) in k.iter().enumerate() {
                    let xx = (x as i64 + t as i64 - half).clamp(0, w as i64 - 1) as usize;
                    s += wt * src[(y * w + xx) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = s;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = 0.0;
                for (t, wt) in k.iter().enumerate() {
                    let yy = (y as i64 + t as i64 - half).clamp(0, h as i64 - 1) as usize;
                    s += wt * tmp[(yy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = s.clamp(0.0, 1.0);
            }
        }
    }
    Image::from_raw(h, w, c, out)
}

pub fn gaussian_blur(rng: &mut Rng, img: &Image, cfg: &AugConfig) -> Image {
    if rng.bernoulli(cfg.blur_prob) {
        let (lo, hi) = cfg.blur_radius_range;
        blur_with_radius(img, rng.uniform_range(lo, hi))
    } else {
        img.clone()
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub const EMPTY: BBox = BBox {
        x0: 0,
        y0: 0,
        x1: 0,
        y1: 0,
    };

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// CutMix box on a `side×side` grid. Pixels inside the box come from the
/// positive; `lambda_realized` is the fraction kept from the anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixMask {
    pub side: usize,
    pub bbox: BBox,
    pub lambda_realized: f64,
}

impl MixMask {
    pub fn new(side: usize, bbox: BBox) -> Self {
        let total = side * side;
        Self {
            side,
            bbox,
            lambda_realized: 1.0 - bbox.area() as f64 / total as f64,
        }
    }

    /// Same geometry on a `to_side` grid. Box edges are scaled and the
    /// width/height rounding is chosen to best preserve the area fraction.
    pub fn rescale(&self, to_side: usize) -> MixMask {
        if to_side == self.side {
            return *self;
        }
        if self.bbox.area() == 0 {
            return MixMask::new(to_side, BBox::EMPTY);
        }
        let s = to_side as f64 / self.side as f64;
        let target = self.bbox.area() as f64 / (self.side * self.side) as f64;
        let cands = |len: usize| {
            let v = len as f64 * s;
            let lo = (v.floor() as usize).min(to_side);
            let hi = (v.ceil() as usize).min(to_side);
            [lo, hi]
        };
        let total = (to_side * to_side) as f64;
        let mut best = (0usize, 0usize, f64::INFINITY);
        for w in cands(self.bbox.width()) {
            for h in cands(self.bbox.height()) {
                let err = ((w * h) as f64 / total - target).abs();
                if err < best.2 {
                    best = (w, h, err);
                }
            }
        }
        let (w, h, _) = best;
        let place = |start: usize, end: usize, len: usize| {
            if end == self.side {
                to_side - len
            } else {
                ((start as f64 * s).round() as usize).min(to_side - len)
            }
        };
        let x0 = place(self.bbox.x0, self.bbox.x1, w);
        let y0 = place(self.bbox.y0, self.bbox.y1, h);
        MixMask::new(
            to_side,
            BBox {
                x0,
                y0,
                x1: x0 + w,
                y1: y0 + h,
            },
        )
    }
}

/// Box of side `round(side·√(1−lam))` centred at `(cx, cy)`, clipped.
pub fn cutmix_mask_at(side: usize, lam: f64, cx: usize, cy: usize) -> MixMask {
    let lam = lam.clamp(0.0, 1.0);
    let cut = ((side as f64) * (1.0 - lam).sqrt()).round() as i64;
    let clip = |v: i64| v.clamp(0, side as i64) as usize;
    let x0 = cx as i64 - cut / 2;
    let y0 = cy as i64 - cut / 2;
    let bbox = BBox {
        x0: clip(x0),
        y0: clip(y0),
        x1: clip(x0 + cut),
        y1: clip(y0 + cut),
    };
    MixMask::new(side, bbox)
}

pub fn cutmix_mask(rng: &mut Rng, side: usize, lam: f64) -> MixMask {
    let cx = rng.below(side);
    let cy = rng.below(side);
    cutmix_mask_at(side, lam, cx, cy)
}

fn require_same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(ClimError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn cutmix_apply(anchor: &Image, positive: &Image, mask: &MixMask) -> Result<Image> {
    require_same_shape(anchor, positive)?;
    if anchor.height() != mask.side || anchor.width() != mask.side {
        return Err(ClimError::ShapeMismatch(format!(
            "mask grid {} vs image {}x{}",
            mask.side,
            anchor.height(),
            anchor.width()
        )));
    }
    let mut out = anchor.clone();
    let c = anchor.channels();
    let b = mask.bbox;
    for y in b.y0..b.y1 {
        let start = anchor.index(y, b.x0, 0);
        let end = start + b.width() * c;
        out.pixels_mut()[start..end].copy_from_slice(&positive.pixels()[start..end]);
    }
    Ok(out)
}

/// Convex pixel blend `lam·anchor + (1−lam)·positive`.
pub fn mixup_apply(anchor: &Image, positive: &Image, lam: f64) -> Result<Image> {
    require_same_shape(anchor, positive)?;
    let mut out = anchor.clone();
    for (o, p) in out.pixels_mut().iter_mut().zip(positive.pixels()) {
        *o = lerp(*p, *o, lam).clamp(0.0, 1.0);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    #[default]
    Cutmix,
    Mixup,
    None,
}

impl std::str::FromStr for Mixing {
    type Err = ClimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cutmix" => Ok(Mixing::Cutmix),
            "mixup" => Ok(Mixing::Mixup),
            "none" => Ok(Mixing::None),
            other => Err(ClimError::invalid(format!(
                "unknown mixing {other:?} (expected cutmix|mixup|none)"
            ))),
        }
    }
}

impl std::fmt::Display for Mixing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mixing::Cutmix => "cutmix",
            Mixing::Mixup => "mixup",
            Mixing::None => "none",
        })
    }
}

/// One realization of the basic augmentation stack, reusable across images
/// and output resolutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugParams {
    pub crop: CropSpec,
    pub flip: bool,
    pub jitter: Option<JitterFactors>,
    pub gray: bool,
    /// Blur radius in pixels of the base grid.
    pub blur_radius: Option<f64>,
}

impl AugParams {
    /// Draws in pipeline order: crop, flip, jitter, grayscale, blur.
    pub fn sample(rng: &mut Rng, h: usize, w: usize, cfg: &AugConfig, channels: usize) -> Self {
        let crop = sample_crop(rng, h, w, cfg, cfg.base_resolution());
        let flip = rng.bernoulli(cfg.flip_prob);
        let rgb = channels == 3;
        let jitter = rgb.then(|| JitterFactors::sample(rng, cfg));
        let gray = rgb && rng.bernoulli(cfg.grayscale_prob);
        let blur_radius = rng.bernoulli(cfg.blur_prob).then(|| {
            let (lo, hi) = cfg.blur_radius_range;
            rng.uniform_range(lo, hi)
        });
        Self {
            crop,
            flip,
            jitter,
            gray,
            blur_radius,
        }
    }

    /// Deterministic whole-image view at `out_side`.
    pub fn center(h: usize, w: usize, out_side: usize) -> Self {
        Self {
            crop: CropSpec::full(h, w, out_side),
            flip: false,
            jitter: None,
            gray: false,
            blur_radius: None,
        }
    }

    pub fn apply(&self, img: &Image, out_side: usize) -> Result<Image> {
        let mut v = rerender(img, &self.crop, out_side)?;
        if self.flip {
            v = flip_image(&v);
        }
        if let Some(f) = self.jitter {
            if img.channels() == 3 && f != JitterFactors::IDENTITY {
                v = apply_color_jitter(&v, f)?;
            }
        }
        if self.gray {
            v = grayscale(&v);
        }
        if let Some(r) = self.blur_radius {
            let scaled = r * out_side as f64 / self.crop.out_side as f64;
            v = blur_with_radius(&v, scaled);
        }
        Ok(v)
    }
}

/// Mixed query view at one output resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedView {
    pub image: Image,
    pub resolution: usize,
    pub mask: Option<MixMask>,
    /// Weight of the anchor term: realized kept-area fraction for CutMix,
    /// the blend weight for Mixup, 1 when nothing was mixed.
    pub lambda: f64,
    /// The raw Beta draw before any pixel rounding.
    pub lambda_raw: f64,
    pub anchor: usize,
    pub positive: usize,
}

/// Renders `anchor` mixed with `positive` at every configured resolution.
///
/// One set of augmentation parameters is drawn and applied to both images, so
/// mixing an image with itself reproduces the plain augmented view. The mask
/// is drawn on the base grid and rescaled for the others.
pub fn make_views(
    rng: &mut Rng,
    anchor: &Image,
    positive: &Image,
    cfg: &AugConfig,
    mixing: Mixing,
    sources: (usize, usize),
) -> Result<Vec<MixedView>> {
    require_same_shape(anchor, positive)?;
    if anchor.is_empty() {
        return Err(ClimError::invalid("cannot augment an empty image"));
    }
    let params = AugParams::sample(rng, anchor.height(), anchor.width(), cfg, anchor.channels());
    let base = cfg.base_resolution();
    let (lambda_raw, base_mask) = match mixing {
        Mixing::Cutmix => {
            let lam = sample_beta(rng, BetaParams::new(cfg.alpha)?);
            (lam, Some(cutmix_mask(rng, base, lam)))
        }
        Mixing::Mixup => (sample_beta(rng, BetaParams::new(cfg.mixup_alpha)?), None),
        Mixing::None => (1.0, None),
    };
    let same = anchor == positive;
    cfg.resolutions
        .iter()
        .map(|&r| {
            let a = params.apply(anchor, r)?;
            let (image, mask, lambda) = match mixing {
                Mixing::Cutmix => {
                    let m = base_mask.expect("cutmix mask").rescale(r);
                    let img = if same { a } else { cutmix_apply(&a, &params.apply(positive, r)?, &m)? };
                    (img, Some(m), m.lambda_realized)
                }
                Mixing::Mixup => {
                    let img = if same { a } else { mixup_apply(&a, &params.apply(positive, r)?, lambda_raw)? };
                    (img, None, lambda_raw)
                }
                Mixing::None => (a, None, 1.0),
            };
            Ok(MixedView {
                image,
                resolution: r,
                mask,
                lambda,
                lambda_raw,
                anchor: sources.0,
                positive: sources.1,
            })
        })
        .collect()
}

/// Independently augmented, unmixed view of one image at every resolution
/// (same crop across resolutions).
pub fn plain_views(rng: &mut Rng, img: &Image, cfg: &AugConfig) -> Result<Vec<Image>> {
    let params = AugParams::sample(rng, img.height(), img.width(), cfg, img.channels());
    cfg.resolutions.iter().map(|&r| params.apply(img, r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(side: usize, c: usize) -> Image {
        let px = (0..side * side * c)
            .map(|i| (i % 97) as f64 / 96.0)
            .collect();
        Image::new(side, side, c, px).unwrap()
    }

    #[test]
    fn full_crop_is_resize_of_whole_image() {
        let img = ramp(8, 3);
        let spec = CropSpec::full(8, 8, 8);
        assert_eq!(rerender(&img, &spec, 8).unwrap(), img);
        let cfg = AugConfig::identity(vec![8]);
        let (out, spec) = random_resized_crop(&mut Rng::new(1), &img, &cfg).unwrap();
        assert_eq!(spec.sigma, 1.0);
        assert_eq!((spec.crop_h, spec.crop_w), (8, 8));
        assert_eq!(out, img);
    }

    #[test]
    fn crop_at_native_side_copies_pixels() {
        let img = ramp(10, 1);
        let spec = CropSpec::from_rect(10, 10, 2, 3, 4, 4, 4);
        let out = rerender(&img, &spec, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(out.get(y, x, 0), img.get(y + 2, x + 3, 0));
            }
        }
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::filled(9, 9, 3, 0.3);
        let cfg = AugConfig::default();
        let mut rng = Rng::new(4);
        for _ in 0..20 {
            let (out, spec) = random_resized_crop(&mut rng, &img, &cfg).unwrap();
            assert!(out.pixels().iter().all(|&v| v == 0.3));
            for side in [3, 7, 31] {
                let r = rerender(&img, &spec, side).unwrap();
                assert!(r.pixels().iter().all(|&v| v == 0.3));
            }
        }
    }

    #[test]
    fn checkerboard_downsample_is_half() {
        let px: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
        let img = Image::new(4, 4, 1, px).unwrap();
        let out = rerender(&img, &CropSpec::full(4, 4, 4), 2).unwrap();
        assert_eq!(out.pixels(), &[0.5; 4]);
    }

    #[test]
    fn crops_stay_in_bounds_and_in_range() {
        let cfg = AugConfig::default();
        let mut rng = Rng::new(8);
        for _ in 0..500 {
            let spec = sample_crop(&mut rng, 12, 17, &cfg, 16);
            assert!(spec.top + spec.crop_h <= 12 && spec.left + spec.crop_w <= 17);
            assert!(spec.crop_h > 0 && spec.crop_w > 0);
        }
        let img = ramp(12, 1);
        assert!(rerender(&img, &CropSpec::from_rect(12, 12, 10, 0, 4, 4, 4), 4).is_err());
    }

    #[test]
    fn scale_factor_examples() {
        let s = |sigma: f64, side: usize, out: usize| {
            let spec = CropSpec {
                sigma,
                aspect: 1.0,
                top: 0,
                left: 0,
                crop_h: 1,
                crop_w: 1,
                out_side: out,
            };
            scale_factor(&spec, side, side)
        };
        assert_eq!(s(0.5, 448, 224), 1.0);
        assert_eq!(s(1.0, 224, 224), 1.0);
        assert_eq!(s(1.0, 224, 112), 0.5);
    }

    #[test]
    fn flip_examples() {
        let img = Image::new(1, 2, 1, vec![0.1, 0.9]).unwrap();
        let mut rng = Rng::new(0);
        assert_eq!(horizontal_flip(&mut rng, &img, 0.0), img);
        let f = horizontal_flip(&mut rng, &img, 1.0);
        assert_eq!(f.pixels(), &[0.9, 0.1]);
        assert_eq!(horizontal_flip(&mut rng, &f, 1.0), img);
    }

    #[test]
    fn jitter_examples() {
        let img = ramp(5, 3);
        let zero = AugConfig {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            ..Default::default()
        };
        assert_eq!(color_jitter(&mut Rng::new(1), &img, &zero).unwrap(), img);

        let dark = apply_color_jitter(
            &img,
            JitterFactors {
                brightness: 0.0,
                ..JitterFactors::IDENTITY
            },
        )
        .unwrap();
        assert!(dark.pixels().iter().all(|&v| v == 0.0));

        let flat = apply_color_jitter(
            &img,
            JitterFactors {
                contrast: 0.0,
                ..JitterFactors::IDENTITY
            },
        )
        .unwrap();
        let lumas: Vec<f64> = img.pixels().chunks(3).map(|p| luma(p[0], p[1], p[2])).collect();
        let m = lumas.iter().sum::<f64>() / lumas.len() as f64;
        assert!(flat.pixels().iter().all(|&v| (v - m.clamp(0.0, 1.0)).abs() < 1e-12));

        assert!(color_jitter(&mut Rng::new(1), &ramp(4, 1), &AugConfig::default()).is_err());
    }

    #[test]
    fn grayscale_examples() {
        let gray = Image::new(1, 1, 3, vec![0.4, 0.4, 0.4]).unwrap();
        assert_eq!(grayscale(&gray), gray);
        let red = Image::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(grayscale(&red).pixels(), &[0.299, 0.299, 0.299]);
        let img = ramp(4, 3);
        assert_eq!(to_grayscale(&mut Rng::new(2), &img, 0.0), img);
    }

    #[test]
    fn blur_examples() {
        let flat = Image::filled(6, 6, 3, 0.7);
        let b = blur_with_radius(&flat, 1.3);
        assert!(b.pixels().iter().all(|&v| (v - 0.7).abs() < 1e-12));

        let img = ramp(6, 3);
        let cfg = AugConfig {
            blur_prob: 0.0,
            ..Default::default()
        };
        assert_eq!(gaussian_blur(&mut Rng::new(3), &img, &cfg), img);

        let impulse = Image::new(1, 3, 1, vec![0.0, 1.0, 0.0]).unwrap();
        let out = blur_with_radius(&impulse, 0.5);
        let p = out.pixels();
        assert!(p[1] > p[0] && p[1] > p[2]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        // analytic taps for sigma 0.5: exp(-2) relative to the centre
        let k = gaussian_kernel(0.5);
        let e = (-2.0f64).exp();
        assert!((k[0] - e / (1.0 + 2.0 * e)).abs() < 1e-15);
        assert!((k[1] - 1.0 / (1.0 + 2.0 * e)).abs() < 1e-15);
    }

    #[test]
    fn cutmix_mask_examples() {
        let m = cutmix_mask(&mut Rng::new(1), 32, 1.0);
        assert_eq!(m.bbox.area(), 0);
        assert_eq!(m.lambda_realized, 1.0);

        let m = cutmix_mask_at(32, 0.75, 16, 16);
        assert_eq!((m.bbox.width(), m.bbox.height()), (16, 16));
        assert_eq!(m.lambda_realized, 0.75);

        let m = cutmix_mask_at(32, 0.75, 0, 0);
        assert_eq!(m.bbox, BBox { x0: 0, y0: 0, x1: 8, y1: 8 });
        assert_eq!(m.lambda_realized, 1.0 - 64.0 / 1024.0);
        assert_eq!(m.lambda_realized, 0.9375);
    }

    #[test]
    fn cutmix_apply_examples() {
        let a = Image::filled(32, 32, 1, 0.0);
        let p = Image::filled(32, 32, 1, 1.0);
        assert_eq!(cutmix_apply(&a, &p, &MixMask::new(32, BBox::EMPTY)).unwrap(), a);
        let full = MixMask::new(32, BBox { x0: 0, y0: 0, x1: 32, y1: 32 });
        assert_eq!(cutmix_apply(&a, &p, &full).unwrap(), p);
        let m = cutmix_mask_at(32, 0.75, 16, 16);
        let out = cutmix_apply(&a, &p, &m).unwrap();
        assert_eq!(out.pixels().iter().filter(|&&v| v == 1.0).count(), 256);
        assert!(cutmix_apply(&a, &Image::filled(16, 16, 1, 1.0), &m).is_err());
    }

    #[test]
    fn make_views_counts_and_self_mix() {
        let img = ramp(16, 3);
        let other = Image::filled(16, 16, 3, 0.2);
        let cfg = AugConfig {
            resolutions: vec![16],
            ..Default::default()
        };
        let views = make_views(&mut Rng::new(5), &img, &other, &cfg, Mixing::Cutmix, (0, 1)).unwrap();
        assert_eq!(views.len(), 1);

        let cfg = AugConfig {
            resolutions: vec![16, 12],
            ..Default::default()
        };
        let mixed = make_views(&mut Rng::new(5), &img, &img, &cfg, Mixing::Cutmix, (0, 0)).unwrap();
        let plain = make_views(&mut Rng::new(5), &img, &img, &cfg, Mixing::None, (0, 0)).unwrap();
        for (m, p) in mixed.iter().zip(&plain) {
            assert_eq!(m.image, p.image);
        }
    }

    #[test]
    fn mask_area_fractions_agree_across_grids() {
        let cfg = AugConfig {
            resolutions: vec![32, 24],
            ..Default::default()
        };
        let beta = BetaParams::new(cfg.alpha).unwrap();
        let mut worst: f64 = 0.0;
        for seed in 0..10_000u64 {
            let mut rng = Rng::new(seed);
            let lam = sample_beta(&mut rng, beta);
            let m32 = cutmix_mask(&mut rng, 32, lam);
            let m24 = m32.rescale(24);
            assert_eq!(m24.lambda_realized, 1.0 - m24.bbox.area() as f64 / 576.0);
            assert!(m24.bbox.x1 <= 24 && m24.bbox.y1 <= 24);
            worst = worst.max((m32.lambda_realized - m24.lambda_realized).abs());
        }
        assert!(worst < 0.02, "worst area-fraction gap {worst}");
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let img = ramp(16, 3);
        let other = Image::filled(16, 16, 3, 0.9);
        let cfg = AugConfig {
            brightness: 2.0,
            contrast: 2.0,
            saturation: 2.0,
            resolutions: vec![16, 12],
            ..Default::default()
        };
        for seed in 0..50 {
            for mixing in [Mixing::Cutmix, Mixing::Mixup, Mixing::None] {
                let views = make_views(&mut Rng::new(seed), &img, &other, &cfg, mixing, (0, 1)).unwrap();
                for v in views {
                    assert!(v.image.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
                }
            }
        }
    }

    #[test]
    fn views_are_deterministic() {
        let img = ramp(16, 3);
        let other = Image::filled(16, 16, 3, 0.9);
        let cfg = AugConfig {
            resolutions: vec![16, 12],
            ..Default::default()
        };
        let a = make_views(&mut Rng::new(3), &img, &other, &cfg, Mixing::Cutmix, (0, 1)).unwrap();
        let b = make_views(&mut Rng::new(3), &img, &other, &cfg, Mixing::Cutmix, (0, 1)).unwrap();
        assert_eq!(a, b);
    }

    proptest::proptest! {
        #[test]
        fn mask_accounting_is_exact(seed in 0u64..5000, side in 1usize..40) {
            let mut rng = Rng::new(seed);
            let lam = rng.uniform();
            let m = cutmix_mask(&mut rng, side, lam);
            proptest::prop_assert_eq!(m.lambda_realized, 1.0 - m.bbox.area() as f64 / (side * side) as f64);
            proptest::prop_assert!(m.bbox.x1 <= side && m.bbox.y1 <= side);
        }

        #[test]
        fn self_cutmix_is_identity(seed in 0u64..1000) {
            let img = ramp(8, 3);
            let m = cutmix_mask(&mut Rng::new(seed), 8, 0.5);
            proptest::prop_assert_eq!(cutmix_apply(&img, &img, &m).unwrap(), img);
        }

        #[test]
        fn rerender_at_native_side_is_bit_exact(seed in 0u64..1000) {
            let img = ramp(13, 3);
            let cfg = AugConfig { resolutions: vec![11], ..Default::default() };
            let (out, spec) = random_resized_crop(&mut Rng::new(seed), &img, &cfg).unwrap();
            proptest::prop_assert_eq!(rerender(&img, &spec, spec.out_side).unwrap(), out);
        }
    }
}

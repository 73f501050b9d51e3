use rand::Rng as _;

use crate::error::{invalid, Result};
use crate::rng::{purpose, rng_for, Rng};
use crate::scenes::Image;

/// Crop rectangle in source pixels (fractional).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl CropBox {
    pub fn full(size: usize) -> Self {
        Self { x: 0.0, y: 0.0, w: size as f64, h: size as f64 }
    }

    pub fn area_fraction(&self, size: usize) -> f64 {
        self.w * self.h / (size * size) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    /// Area-fraction range of the random resized crop; `None` disables it.
    pub crop_scale: Option<(f64, f64)>,
    pub hflip: bool,
    pub jitter: Option<ColorJitter>,
    /// Sigma range in pixels, applied with probability 0.5.
    pub blur: Option<(f64, f64)>,
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self { crop_scale: None, hflip: false, jitter: None, blur: None }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.crop_scale {
            check_scale("pixel_augment", s)?;
        }
        if let Some((lo, hi)) = self.blur {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(invalid("pixel_augment", "blur sigma range must satisfy 0 < lo <= hi"));
            }
        }
        if let Some(j) = self.jitter {
            if [j.brightness, j.contrast, j.saturation].iter().any(|v| !(0.0..1.0).contains(v)) {
                return Err(invalid("pixel_augment", "jitter strengths must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

impl Default for AugmentPolicy {
    /// Jitter and blur only. Flips are off because they turn left-of into right-of, and the
    /// crop stage is left to the multi-crop sampler.
    fn default() -> Self {
        Self {
            crop_scale: None,
            hflip: false,
            jitter: Some(ColorJitter { brightness: 0.2, contrast: 0.2, saturation: 0.2 }),
            blur: Some((0.1, 0.8)),
        }
    }
}

pub(crate) fn check_scale(op: &'static str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(invalid(op, format!("crop scale ({lo}, {hi}) outside (0, 1]")));
    }
    Ok(())
}

/// Square crop whose area fraction is drawn uniformly from `scale`, placed uniformly.
pub(crate) fn sample_crop(rng: &mut Rng, size: usize, (lo, hi): (f64, f64)) -> CropBox {
    let frac = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let side = size as f64 * frac.sqrt();
    let slack = size as f64 - side;
    let (x, y) = if slack > 0.0 { (rng.random_range(0.0..=slack), rng.random_range(0.0..=slack)) } else { (0.0, 0.0) };
    CropBox { x, y, w: side, h: side }
}

/// Bilinear resampling of `b` to `out × out`. The full box at the source size is a copy.
pub fn crop_resize(img: &Image, b: CropBox, out: usize) -> Image {
    if b == CropBox::full(img.height) && out == img.height && img.height == img.width {
        return img.clone();
    }
    let mut dst = Image::filled(out, out, [0.0; 3]);
    let (sx, sy) = (b.w / out as f64, b.h / out as f64);
    let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
    for y in 0..out {
        let fy = clamp(b.y + (y as f64 + 0.5) * sy - 0.5, img.height);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(img.height - 1);
        for x in 0..out {
            let fx = clamp(b.x + (x as f64 + 0.5) * sx - 0.5, img.width);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(img.width - 1);
            let (a, bb, c, d) = (img.pixel(y0, x0), img.pixel(y0, x1), img.pixel(y1, x0), img.pixel(y1, x1));
            let px = [0, 1, 2].map(|k| {
                let top = a[k] as f64 * (1.0 - tx) + bb[k] as f64 * tx;
                let bot = c[k] as f64 * (1.0 - tx) + d[k] as f64 * tx;
                (top * (1.0 - ty) + bot * ty) as f32
            });
            dst.set(y, x, px);
        }
    }
    dst
}

fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            out.set(y, x, img.pixel(y, img.width - 1 - x));
        }
    }
    out
}

fn luma(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn jitter(img: &mut Image, j: ColorJitter, rng: &mut Rng) {
    let mut factor = |s: f64| if s == 0.0 { 1.0 } else { rng.random_range(1.0 - s..=1.0 + s) as f32 };
    let (fb, fc, fs) = (factor(j.brightness), factor(j.contrast), factor(j.saturation));
    for v in img.data.iter_mut() {
        *v = (*v * fb).clamp(0.0, 1.0);
    }
    let n = (img.height * img.width) as f32;
    let mean = img.data.chunks_exact(3).map(|p| luma([p[0], p[1], p[2]])).sum::<f32>() / n;
    for v in img.data.iter_mut() {
        *v = ((*v - mean) * fc + mean).clamp(0.0, 1.0);
    }
    for p in img.data.chunks_exact_mut(3) {
        let l = luma([p[0], p[1], p[2]]);
        for v in p.iter_mut() {
            *v = ((*v - l) * fs + l).clamp(0.0, 1.0);
        }
    }
}

fn blur(img: &Image, sigma: f64) -> Image {
    let r = (2.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    let k: Vec<f32> = k.iter().map(|v| (v / total) as f32).collect();
    let (h, w) = (img.height as isize, img.width as isize);
    let pass = |src: &Image, horizontal: bool| {
        let mut out = src.clone();
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0f32; 3];
                for (i, &kv) in k.iter().enumerate() {
                    let d = i as isize - r;
                    let (yy, xx) = if horizontal { (y, (x + d).clamp(0, w - 1)) } else { ((y + d).clamp(0, h - 1), x) };
                    let p = src.pixel(yy as usize, xx as usize);
                    (0..3).for_each(|c| acc[c] += kv * p[c]);
                }
                out.set(y as usize, x as usize, acc.map(|v| v.clamp(0.0, 1.0)));
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Random resized crop, horizontal flip (p = 0.5), colour jitter, Gaussian blur (p = 0.5),
/// in that order, each only when enabled. Output size equals input size.
pub fn pixel_augment(img: &Image, policy: &AugmentPolicy, seed: u64) -> Result<Image> {
    policy.validate()?;
    let mut rng = rng_for(&[seed, purpose::CROP, 1]);
    let mut out = match policy.crop_scale {
        Some(s) => crop_resize(img, sample_crop(&mut rng, img.height, s), img.height),
        None => img.clone(),
    };
    if policy.hflip && rng.random_bool(0.5) {
        out = hflip(&out);
    }
    if let Some(j) = policy.jitter {
        jitter(&mut out, j, &mut rng);
    }
    if let Some((lo, hi)) = policy.blur {
        if rng.random_bool(0.5) {
            out = blur(&out, rng.random_range(lo..=hi));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiCrop {
    pub n_global: usize,
    pub n_local: usize,
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub local_size: usize,
}

impl Default for MultiCrop {
    fn default() -> Self {
        Self { n_global: 2, n_local: 2, global_scale: (0.4, 1.0), local_scale: (0.05, 0.4), local_size: 16 }
    }
}

/// Image part of a view set, with the crop geometry of every view.
#[derive(Debug, Clone, PartialEq)]
pub struct CropViews {
    pub globals: Vec<Image>,
    pub locals: Vec<Image>,
    pub global_boxes: Vec<CropBox>,
    pub local_boxes: Vec<CropBox>,
}

/// Global crops at the source resolution and local crops at `local_size`, each followed
/// by `pixel_augment` (its own crop stage skipped).
pub fn multicrop(img: &Image, mc: &MultiCrop, policy: &AugmentPolicy, patch: usize, seed: u64) -> Result<CropViews> {
    if mc.n_global < 2 {
        return Err(invalid("multicrop", "at least two global views are required"));
    }
    if mc.local_size == 0 || mc.local_size % patch != 0 {
        return Err(invalid("multicrop", format!("local size {} is not a multiple of patch {patch}", mc.local_size)));
    }
    check_scale("multicrop", mc.global_scale)?;
    check_scale("multicrop", mc.local_scale)?;
    let post = AugmentPolicy { crop_scale: None, ..policy.clone() };
    let mut rng = rng_for(&[seed, purpose::CROP, 2]);
    let size = img.height;
    let mut out = CropViews { globals: vec![], locals: vec![], global_boxes: vec![], local_boxes: vec![] };
    for k in 0..mc.n_global + mc.n_local {
        let global = k < mc.n_global;
        let b = sample_crop(&mut rng, size, if global { mc.global_scale } else { mc.local_scale });
        let view = crop_resize(img, b, if global { size } else { mc.local_size });
        let view = pixel_augment(&view, &post, crate::rng::mix(&[seed, k as u64]))?;
        if global {
            out.globals.push(view);
            out.global_boxes.push(b);
        } else {
            out.locals.push(view);
            out.local_boxes.push(b);
        }
    }
    Ok(out)
}

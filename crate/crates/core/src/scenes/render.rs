use rand::Rng as _;

use super::{SceneSpec, Shape};
use crate::error::{Error, Result};

/// RGB image, row-major `height × width × 3`, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let k = (y * self.width + x) * 3;
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let k = (y * self.width + x) * 3;
        self.data[k..k + 3].copy_from_slice(&rgb);
    }

    /// Binary PPM (P6, 8-bit).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Scene(format!("ppm: {m}"));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?.to_string());
        }
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(bad("expected P6 with maxval 255"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("height"))?;
        let body = bytes.get(pos + 1..).ok_or_else(|| bad("missing body"))?;
        if body.len() != width * height * 3 {
            return Err(bad("body length"));
        }
        Ok(Self {
            height,
            width,
            data: body.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }
}

/// Free render parameters: image side, background shade and jitter stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderParams {
    pub size: usize,
    pub background: f32,
    pub seed: u64,
}

impl RenderParams {
    pub fn from_seed(size: usize, seed: u64) -> Self {
        let mut rng = crate::rng::rng_for(&[seed, crate::rng::purpose::RENDER, 0]);
        Self { size, background: rng.random_range(0.15..0.35), seed }
    }
}

pub const MIN_SIZE: usize = 32;
const SUPERSAMPLE: usize = 3;
/// Smallest shape radius (pixels) that still reads as a shape.
const MIN_RADIUS: f32 = 1.5;

struct Placed {
    shape: Shape,
    rgb: [f32; 3],
    cx: f32,
    cy: f32,
    r: f32,
}

impl Placed {
    fn contains(&self, x: f32, y: f32) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= self.r * self.r,
            Shape::Square => {
                let h = self.r * 0.85;
                dx.abs() <= h && dy.abs() <= h
            }
            Shape::Triangle => {
                // Apex up, base at cy + 0.8 r.
                let top = -self.r;
                let base = 0.8 * self.r;
                dy >= top && dy <= base && dx.abs() <= (dy - top) / (base - top) * self.r
            }
        }
    }
}

fn layout(spec: &SceneSpec, p: &RenderParams) -> Result<Vec<Placed>> {
    let cell = p.size as f32 / 2.0;
    let slot = cell / 2.0;
    let mut out = Vec::new();
    for (gi, g) in spec.groups.iter().enumerate() {
        // All four slots get positions regardless of count, so adding an object never
        // moves the existing ones.
        let mut rng = crate::rng::rng_for(&[p.seed, crate::rng::purpose::RENDER, 1 + gi as u64]);
        let r = slot * rng.random_range(0.3..0.4);
        if r < MIN_RADIUS {
            return Err(Error::Scene(format!("cell too small for {} shapes at size {}", g.count, p.size)));
        }
        let mut slots = [0usize, 1, 2, 3];
        for k in (1..4).rev() {
            slots.swap(k, rng.random_range(0..=k));
        }
        let slack = (slot / 2.0 - r - 0.5).max(0.0);
        let jitter: Vec<(f32, f32)> = (0..4)
            .map(|_| (rng.random_range(-1.0..=1.0) * slack, rng.random_range(-1.0..=1.0) * slack))
            .collect();
        let (cr, cc) = ((g.cell / 2) as f32, (g.cell % 2) as f32);
        for (k, &s) in slots.iter().take(g.count as usize).enumerate() {
            let (sr, sc) = ((s / 2) as f32, (s % 2) as f32);
            out.push(Placed {
                shape: g.shape,
                rgb: g.color.rgb(),
                cx: cc * cell + sc * slot + slot / 2.0 + jitter[k].0,
                cy: cr * cell + sr * slot + slot / 2.0 + jitter[k].1,
                r,
            });
        }
    }
    Ok(out)
}

/// Rasterizes with 3×3 supersampling.
pub fn render_with(spec: &SceneSpec, p: &RenderParams) -> Result<Image> {
    spec.validate()?;
    if p.size < MIN_SIZE {
        return Err(Error::Scene(format!("image size {} below {MIN_SIZE}", p.size)));
    }
    let objects = layout(spec, p)?;
    let bg = p.background;
    let mut img = Image::filled(p.size, p.size, [bg; 3]);
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
    for o in &objects {
        let (x0, x1) = ((o.cx - o.r - 1.0).floor().max(0.0) as usize, ((o.cx + o.r + 1.0).ceil() as usize).min(p.size));
        let (y0, y1) = ((o.cy - o.r - 1.0).floor().max(0.0) as usize, ((o.cy + o.r + 1.0).ceil() as usize).min(p.size));
        for y in y0..y1 {
            for x in x0..x1 {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let fx = x as f32 + (sx as f32 + 0.5) / SUPERSAMPLE as f32;
                        let fy = y as f32 + (sy as f32 + 0.5) / SUPERSAMPLE as f32;
                        hits += o.contains(fx, fy) as usize;
                    }
                }
                if hits > 0 {
                    let a = hits as f32 * inv;
                    let old = img.pixel(y, x);
                    img.set(y, x, [0, 1, 2].map(|c| old[c] * (1.0 - a) + o.rgb[c] * a));
                }
            }
        }
    }
    Ok(img)
}

pub fn render(spec: &SceneSpec, size: usize, seed: u64) -> Result<Image> {
    render_with(spec, &RenderParams::from_seed(size, seed))
}

/// Same scene, new jitter and background: a semantics-preserving image view.
pub fn positive_image_view(spec: &SceneSpec, size: usize, seed: u64) -> Result<Image> {
    render(spec, size, crate::rng::mix(&[seed, crate::rng::purpose::GECO, 1]))
}

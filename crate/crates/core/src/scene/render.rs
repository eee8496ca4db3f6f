use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Combination, Shape};
use crate::Error;

/// Size interval of an object (circumscribed-circle diameter) at 128 px.
pub const SIZE_RANGE: (f64, f64) = (28.0, 40.0);
pub const REFERENCE_SIZE: usize = 128;
const MAX_PLACEMENT_TRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub image_size: usize,
    /// Standard deviation of the per-channel pixel noise. The default 4
    /// reads "N(0, 16)" as variance 16; set 16 for the std reading.
    pub noise_std: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { image_size: REFERENCE_SIZE, noise_std: 4.0 }
    }
}

impl GeneratorConfig {
    pub fn with_size(image_size: usize) -> Self {
        Self { image_size, ..Self::default() }
    }

    /// Factor applied to every pixel interval.
    pub fn scale(&self) -> f64 {
        self.image_size as f64 / REFERENCE_SIZE as f64
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.image_size < 64 {
            return Err(Error::Config { path: "image_size".into(), message: format!("must be >= 64, got {}", self.image_size) });
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config { path: "noise_std".into(), message: format!("must be >= 0, got {}", self.noise_std) });
        }
        Ok(())
    }
}

/// Square RGB image stored row-major as `[y][x][channel]`, values in [0, 255].
#[derive(Clone, Debug, PartialEq)]
pub struct SceneImage {
    size: usize,
    pixels: Vec<f32>,
}

impl SceneImage {
    pub fn black(size: usize) -> Self {
        Self { size, pixels: vec![0.0; size * size * 3] }
    }

    /// Uniform image, every channel set to `value`.
    pub fn filled(size: usize, value: f32) -> Self {
        Self { size, pixels: vec![value; size * size * 3] }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize, channel: usize) -> f32 {
        self.pixels[(y * self.size + x) * 3 + channel]
    }

    /// Channel-major copy scaled into [0, 1], ready for the encoder.
    pub fn to_chw_unit(&self) -> Vec<f32> {
        let n = self.size * self.size;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c] / 255.0;
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect()
    }
}

/// Every sampled quantity behind one render. Coordinates are pixel-space
/// object centers with y pointing down; `dx`, `dy` are A minus B with y up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub size_a: f64,
    pub size_b: f64,
    pub rotation_a: u16,
    pub rotation_b: u16,
    pub dx: f64,
    pub dy: f64,
    pub center_a: (f64, f64),
    pub center_b: (f64, f64),
}

fn scaled(interval: (f64, f64), s: f64) -> (f64, f64) {
    (interval.0 * s, interval.1 * s)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Feasible interval for B's center on one axis; A sits at `B + offset`.
fn anchor_interval(extent: f64, r_a: f64, r_b: f64, offset: f64) -> Option<(f64, f64)> {
    let lo = r_b.max(r_a - offset);
    let hi = (extent - r_b).min(extent - r_a - offset);
    if lo <= hi {
        Some((lo, hi))
    } else if lo - hi < 1e-9 {
        Some((lo, lo))
    } else {
        None
    }
}

fn sample_params<R: Rng + ?Sized>(combo: Combination, cfg: &GeneratorConfig, rng: &mut R) -> Result<RenderParams, Error> {
    let s = cfg.scale();
    let extent = cfg.image_size as f64;
    let size_a = uniform(rng, scaled(SIZE_RANGE, s));
    let size_b = uniform(rng, scaled(SIZE_RANGE, s));
    let rotation_a = rng.random_range(0..360u16);
    let rotation_b = rng.random_range(0..360u16);
    let (dx_range, dy_range) = combo.relation.displacement_intervals();
    let (r_a, r_b) = (size_a / 2.0, size_b / 2.0);
    for _ in 0..MAX_PLACEMENT_TRIES {
        let dx = uniform(rng, scaled(dx_range, s));
        let dy = uniform(rng, scaled(dy_range, s));
        let (Some(xs), Some(ys)) =
            (anchor_interval(extent, r_a, r_b, dx), anchor_interval(extent, r_a, r_b, -dy))
        else {
            continue;
        };
        let bx = uniform(rng, xs);
        let by = uniform(rng, ys);
        return Ok(RenderParams {
            size_a,
            size_b,
            rotation_a,
            rotation_b,
            dx,
            dy,
            center_a: (bx + dx, by - dy),
            center_b: (bx, by),
        });
    }
    Err(Error::PlacementFailure(combo))
}

/// Fixed-dataset parameters: mid-interval size and displacement, no
/// rotation, pair centered on the canvas.
pub fn canonical_params(combo: Combination, cfg: &GeneratorConfig) -> RenderParams {
    let s = cfg.scale();
    let size = 34.0 * s;
    let mid = |(lo, hi): (f64, f64)| (lo + hi) / 2.0 * s;
    let (dxr, dyr) = combo.relation.displacement_intervals();
    let (dx, dy) = (mid(dxr), mid(dyr));
    let c = cfg.image_size as f64 / 2.0;
    let center_b = (c - dx / 2.0, c + dy / 2.0);
    RenderParams {
        size_a: size,
        size_b: size,
        rotation_a: 0,
        rotation_b: 0,
        dx,
        dy,
        center_a: (center_b.0 + dx, center_b.1 - dy),
        center_b,
    }
}

fn inside_polygon(u: f64, v: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn regular_points(radii: &[f64], count: usize) -> Vec<(f64, f64)> {
    (0..count)
        .map(|k| {
            let a = std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::TAU / count as f64;
            let r = radii[k % radii.len()];
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

/// Membership test of a shape template inscribed in the unit circle, in
/// coordinates with y pointing up.
fn shape_contains(shape: Shape, u: f64, v: f64) -> bool {
    match shape.id() {
        0 => u * u + v * v <= 1.0,
        1 => u.abs().max(v.abs()) <= std::f64::consts::FRAC_1_SQRT_2,
        2 => inside_polygon(u, v, &regular_points(&[1.0], 3)),
        3 => inside_polygon(u, v, &regular_points(&[1.0, 0.45], 10)),
        _ => (u.abs() <= 0.3 && v.abs() <= 0.9) || (v.abs() <= 0.3 && u.abs() <= 0.9),
    }
}

fn draw(image: &mut SceneImage, shape: Shape, center: (f64, f64), size: f64, rotation: u16) {
    let r = size / 2.0;
    let (sin, cos) = (rotation as f64).to_radians().sin_cos();
    let n = image.size;
    let x0 = (center.0 - r).floor().max(0.0) as usize;
    let x1 = ((center.0 + r).ceil() as usize).min(n);
    let y0 = (center.1 - r).floor().max(0.0) as usize;
    let y1 = ((center.1 + r).ceil() as usize).min(n);
    for py in y0..y1 {
        for px in x0..x1 {
            let du = px as f64 + 0.5 - center.0;
            let dv = -(py as f64 + 0.5 - center.1);
            let u = (du * cos + dv * sin) / r;
            let v = (-du * sin + dv * cos) / r;
            if shape_contains(shape, u, v) {
                let base = (py * n + px) * 3;
                image.pixels[base..base + 3].fill(255.0);
            }
        }
    }
}

/// Noise-free render from explicit parameters.
pub fn render_with_params(combo: Combination, params: &RenderParams, image_size: usize) -> SceneImage {
    let mut image = SceneImage::black(image_size);
    draw(&mut image, combo.shape_a, params.center_a, params.size_a, params.rotation_a);
    draw(&mut image, combo.shape_b, params.center_b, params.size_b, params.rotation_b);
    image
}

/// Adds independent `N(0, std²)` noise to every channel, clamped to [0, 255].
pub fn add_noise<R: Rng + ?Sized>(image: &SceneImage, noise_std: f64, rng: &mut R) -> SceneImage {
    let mut out = image.clone();
    if noise_std == 0.0 {
        return out;
    }
    for p in out.pixels.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *p = (*p as f64 + noise_std * z).clamp(0.0, 255.0) as f32;
    }
    out
}

/// Randomized render of `combo`: sizes, rotations, displacement and anchor
/// are sampled, then noise is added.
pub fn render<R: Rng + ?Sized>(
    combo: Combination,
    rng: &mut R,
    cfg: &GeneratorConfig,
) -> Result<(SceneImage, RenderParams), Error> {
    cfg.validate()?;
    let params = sample_params(combo, cfg, rng)?;
    let clean = render_with_params(combo, &params, cfg.image_size);
    Ok((add_noise(&clean, cfg.noise_std, rng), params))
}

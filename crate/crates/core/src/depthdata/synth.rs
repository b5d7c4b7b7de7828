//! Analytic synthetic scenes: depth is a closed-form function of the pixel
//! coordinates, colour is a shading of depth plus seeded texture.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, DepthMap, Result, RgbImage, SamplePair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    /// Linear in x from `near` (left) to `far` (right).
    Ramp,
    /// Spherical bump centred in the frame, `near` at its apex.
    SphereCap,
    /// Radial profile around a seeded centre, clamped at unit offset.
    LumenTube,
}

impl Primitive {
    pub const ALL: [Primitive; 3] = [Primitive::Ramp, Primitive::SphereCap, Primitive::LumenTube];

    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Ramp => "ramp",
            Primitive::SphereCap => "sphere-cap",
            Primitive::LumenTube => "lumen-tube",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        Primitive::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| DataError::InvalidScene(format!("unknown primitive `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneSpec {
    pub primitive: Primitive,
    pub near: f64,
    pub far: f64,
    pub texture_seed: u64,
    /// (height, width)
    pub size: (usize, usize),
}

impl SyntheticSceneSpec {
    pub fn new(
        primitive: Primitive,
        near: f64,
        far: f64,
        texture_seed: u64,
        size: (usize, usize),
    ) -> Result<Self> {
        let spec = Self { primitive, near, far, texture_seed, size };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near.is_finite() && self.far.is_finite()) {
            return Err(DataError::InvalidScene(format!(
                "near {} and far {} must be positive and finite",
                self.near, self.far
            )));
        }
        if self.near >= self.far {
            return Err(DataError::InvalidScene(format!(
                "near {} must be below far {}",
                self.near, self.far
            )));
        }
        if self.size.0 == 0 || self.size.1 == 0 {
            return Err(DataError::InvalidScene(format!("empty size {:?}", self.size)));
        }
        Ok(())
    }
}

fn lerp(near: f64, far: f64, t: f64) -> f64 {
    // exact at both endpoints
    near * (1.0 - t) + far * t
}

fn depth_field(spec: &SyntheticSceneSpec, seed: u64) -> Vec<f64> {
    let (h, w) = spec.size;
    let (near, far) = (spec.near, spec.far);
    let mut out = Vec::with_capacity(h * w);
    match spec.primitive {
        Primitive::Ramp => {
            for _ in 0..h {
                for x in 0..w {
                    let t = if w > 1 { x as f64 / (w - 1) as f64 } else { 0.0 };
                    out.push(lerp(near, far, t));
                }
            }
        }
        Primitive::SphereCap => {
            let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
            let radius = (h.min(w) as f64 / 2.0).max(1.0);
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = ((y as f64 - cy) / radius, (x as f64 - cx) / radius);
                    let r2 = dy * dy + dx * dx;
                    let d = if r2 < 1.0 { lerp(near, far, 1.0 - (1.0 - r2).sqrt()) } else { far };
                    out.push(d);
                }
            }
        }
        Primitive::LumenTube => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cy = h as f64 / 2.0 + rng.gen_range(-1.0..1.0) * h as f64 / 6.0;
            let cx = w as f64 / 2.0 + rng.gen_range(-1.0..1.0) * w as f64 / 6.0;
            let radius = (h.min(w) as f64 / 2.0).max(1.0);
            for y in 0..h {
                for x in 0..w {
                    let r = (y as f64 - cy).hypot(x as f64 - cx) / radius;
                    out.push(lerp(near, far, r.clamp(0.0, 1.0)));
                }
            }
        }
    }
    out
}

/// Smooth procedural texture in `[0, 1]`: a few seeded oriented sinusoids.
fn texture(h: usize, w: usize, texture_seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(texture_seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let freq = rng.gen_range(0.05..0.4);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = rng.gen_range(0.5..1.0);
            (angle.cos() * freq, angle.sin() * freq, phase, amp)
        })
        .collect();
    let total: f64 = waves.iter().map(|w| w.3).sum();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let s: f64 = waves
                .iter()
                .map(|(fx, fy, ph, a)| a * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum();
            out.push(0.5 + 0.5 * s / total);
        }
    }
    out
}

/// Generates a deterministic sample; identical `(spec, seed)` yield
/// bit-identical pairs.
pub fn generate_synthetic(spec: &SyntheticSceneSpec, seed: u64) -> Result<SamplePair> {
    spec.validate()?;
    let (h, w) = spec.size;
    let depth = depth_field(spec, seed);
    let tex = texture(h, w, spec.texture_seed);
    const TINT: [f64; 3] = [0.92, 0.52, 0.46];
    let mut rgb = Vec::with_capacity(h * w * 3);
    for (d, t) in depth.iter().zip(&tex) {
        let shade = spec.near / d;
        let detail = 0.75 + 0.25 * t;
        for tint in TINT {
            rgb.push((tint * shade * detail).clamp(0.0, 1.0));
        }
    }
    let id = format!("{}-{seed}", spec.primitive);
    SamplePair::new(id, RgbImage::new(h, w, rgb)?, DepthMap::new(h, w, depth)?)
}

/// A reproducible mixed set of `n` scenes. When `primitive` is `None` the
/// shapes cycle through all primitives. Ids are `"{index:04}-{primitive}"`.
pub fn synthetic_dataset(
    n: usize,
    primitive: Option<Primitive>,
    size: (usize, usize),
    seed: u64,
) -> Result<Vec<SamplePair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let prim = primitive.unwrap_or(Primitive::ALL[i % Primitive::ALL.len()]);
            let near = rng.gen_range(0.5..1.5);
            let far = near * rng.gen_range(1.5..3.0);
            let texture_seed = rng.gen::<u64>();
            let scene_seed = rng.gen::<u64>();
            let spec = SyntheticSceneSpec::new(prim, near, far, texture_seed, size)?;
            let mut pair = generate_synthetic(&spec, scene_seed)?;
            pair.id = format!("{i:04}-{prim}");
            Ok(pair)
        })
        .collect()
}

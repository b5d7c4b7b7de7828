use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{PerturbationSpec, Result, SemisupError};
use crate::depthdata::{DepthMap, RgbImage};

const COLOR_SALT: u64 = 0x636f_6c6f_7200_0001;
const CUTMIX_SALT: u64 = 0x6375_746d_6978_0002;

/// Independent random stream for one (seed, purpose, draw) triple.
pub(crate) fn stream(seed: u64, salt: u64, draw_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(draw_index);
    rng
}

fn luma(p: &[f64]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// Multiplicative factors applied by `color_distort`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl ColorFactors {
    pub const IDENTITY: Self = Self { brightness: 1.0, contrast: 1.0, saturation: 1.0 };

    /// Factors for one draw, each uniform in `[1 - jitter, 1 + jitter]`.
    pub fn draw(spec: &PerturbationSpec, draw_index: u64) -> Self {
        let mut rng = stream(spec.seed, COLOR_SALT, draw_index);
        let mut factor = |j: f64| if j == 0.0 { 1.0 } else { 1.0 + j * rng.gen_range(-1.0..=1.0) };
        Self {
            brightness: factor(spec.brightness_jitter),
            contrast: factor(spec.contrast_jitter),
            saturation: factor(spec.saturation_jitter),
        }
    }
}

/// Brightness (scale), then contrast (blend with the mean luma of the
/// image), then saturation (blend with each pixel's luma). Values are
/// clamped to `[0, 1]` after every stage; a factor of exactly 1 skips its
/// stage.
pub fn apply_color_factors(image: &RgbImage, f: ColorFactors) -> RgbImage {
    let mut out = image.clone();
    let data = out.data_mut();
    if f.brightness != 1.0 {
        for v in data.iter_mut() {
            *v = (*v * f.brightness).clamp(0.0, 1.0);
        }
    }
    if f.contrast != 1.0 {
        let n = (data.len() / 3) as f64;
        let mean = data.chunks_exact(3).map(luma).sum::<f64>() / n;
        for v in data.iter_mut() {
            *v = (mean + f.contrast * (*v - mean)).clamp(0.0, 1.0);
        }
    }
    if f.saturation != 1.0 {
        for px in data.chunks_exact_mut(3) {
            let y = luma(px);
            for v in px.iter_mut() {
                *v = (y + f.saturation * (*v - y)).clamp(0.0, 1.0);
            }
        }
    }
    out
}

pub fn color_distort(image: &RgbImage, spec: &PerturbationSpec, draw_index: u64) -> RgbImage {
    apply_color_factors(image, ColorFactors::draw(spec, draw_index))
}

/// Axis-aligned rectangle `(top, left, h, w)` inside a `height x width` frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutMixMask {
    pub height: usize,
    pub width: usize,
    pub rect: (usize, usize, usize, usize),
}

impl CutMixMask {
    pub fn new(shape: (usize, usize), rect: (usize, usize, usize, usize)) -> Result<Self> {
        let (top, left, h, w) = rect;
        if top + h > shape.0 || left + w > shape.1 {
            return Err(SemisupError::InvalidMask(format!(
                "rectangle {rect:?} exceeds {shape:?}"
            )));
        }
        Ok(Self { height: shape.0, width: shape.1, rect })
    }

    pub fn empty(shape: (usize, usize)) -> Self {
        Self { height: shape.0, width: shape.1, rect: (0, 0, 0, 0) }
    }

    pub fn full(shape: (usize, usize)) -> Self {
        Self { height: shape.0, width: shape.1, rect: (0, 0, shape.0, shape.1) }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn area(&self) -> usize {
        self.rect.2 * self.rect.3
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (top, left, h, w) = self.rect;
        y >= top && y < top + h && x >= left && x < left + w
    }
}

/// Draws a rectangle whose area fraction targets a uniform draw from
/// `spec.cutmix_area_range`. The pixel size is the feasible `(h, w)` whose
/// area is closest to the target, preferring the image's aspect ratio; the
/// position is uniform over all placements.
pub fn sample_cutmix_mask(
    shape: (usize, usize),
    spec: &PerturbationSpec,
    draw_index: u64,
) -> Result<CutMixMask> {
    let (height, width) = shape;
    if height < 2 || width < 2 {
        return Err(SemisupError::Infeasible(format!("image {shape:?} is smaller than 2x2")));
    }
    let (lo, hi) = spec.cutmix_area_range;
    let total = (height * width) as f64;
    let mut rng = stream(spec.seed, CUTMIX_SALT, draw_index);
    let frac = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let target = frac * total;
    let mut best: Option<((f64, f64), (usize, usize))> = None;
    for h in 1..=height {
        for w in 1..=width {
            let area = (h * w) as f64;
            let f = area / total;
            if f < lo || f > hi {
                continue;
            }
            let aspect = ((h as f64 / height as f64) / (w as f64 / width as f64)).ln().abs();
            let key = ((area - target).abs(), aspect);
            if best.is_none_or(|(k, _)| key < k) {
                best = Some((key, (h, w)));
            }
        }
    }
    let (_, (h, w)) = best.ok_or_else(|| {
        SemisupError::Infeasible(format!("no rectangle in {shape:?} has area fraction in [{lo}, {hi}]"))
    })?;
    let top = rng.gen_range(0..=height - h);
    let left = rng.gen_range(0..=width - w);
    CutMixMask::new(shape, (top, left, h, w))
}

fn check_mask(a: (usize, usize), b: (usize, usize), mask: &CutMixMask) -> Result<()> {
    if a != b || a != mask.shape() {
        return Err(SemisupError::ShapeMismatch(format!(
            "sources {a:?} and {b:?}, mask {:?}",
            mask.shape()
        )));
    }
    Ok(())
}

/// Pixels of `b` inside the rectangle, pixels of `a` elsewhere.
pub fn cutmix_apply(a: &RgbImage, b: &RgbImage, mask: &CutMixMask) -> Result<RgbImage> {
    check_mask(a.shape(), b.shape(), mask)?;
    let mut out = a.clone();
    let (top, left, h, w) = mask.rect;
    let width = mask.width;
    let data = out.data_mut();
    for y in top..top + h {
        let row = (y * width + left) * 3..(y * width + left + w) * 3;
        data[row.clone()].copy_from_slice(&b.data()[row]);
    }
    Ok(out)
}

/// Label variant of `cutmix_apply`; values and validity both come from the
/// selected source.
pub fn cutmix_apply_depth(a: &DepthMap, b: &DepthMap, mask: &CutMixMask) -> Result<DepthMap> {
    check_mask(a.shape(), b.shape(), mask)?;
    let mut values = a.values().to_vec();
    let mut valid = a.valid().to_vec();
    let (top, left, h, w) = mask.rect;
    for y in top..top + h {
        let row = y * mask.width + left..y * mask.width + left + w;
        values[row.clone()].copy_from_slice(&b.values()[row.clone()]);
        valid[row.clone()].copy_from_slice(&b.valid()[row]);
    }
    Ok(DepthMap::with_mask(mask.height, mask.width, values, valid)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn spec() -> PerturbationSpec {
        PerturbationSpec { seed: 3, ..Default::default() }
    }

    fn noise_image(h: usize, w: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::new(h, w, (0..h * w * 3).map(|_| rng.gen_range(0.0..=1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_jitter_is_identity() {
        let img = noise_image(5, 7, 1);
        let s = PerturbationSpec {
            brightness_jitter: 0.0,
            contrast_jitter: 0.0,
            saturation_jitter: 0.0,
            ..spec()
        };
        for d in 0..10 {
            assert_eq!(color_distort(&img, &s, d), img);
        }
    }

    #[test]
    fn brightness_by_hand() {
        let gray = RgbImage::filled(3, 3, [0.5; 3]).unwrap();
        let f = ColorFactors { brightness: 1.5, ..ColorFactors::IDENTITY };
        let out = apply_color_factors(&gray, f);
        assert!(out.data().iter().all(|v| *v == 0.75));
        let f = ColorFactors { brightness: 3.0, ..ColorFactors::IDENTITY };
        assert!(apply_color_factors(&gray, f).data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn contrast_and_saturation_by_hand() {
        // two gray pixels 0.2 and 0.6: mean luma 0.4, contrast 2 -> 0.0 and 0.8
        let img = RgbImage::new(1, 2, vec![0.2, 0.2, 0.2, 0.6, 0.6, 0.6]).unwrap();
        let f = ColorFactors { contrast: 2.0, ..ColorFactors::IDENTITY };
        let out = apply_color_factors(&img, f);
        for (got, want) in out.data().iter().zip([0.0, 0.0, 0.0, 0.8, 0.8, 0.8]) {
            assert!((got - want).abs() < 1e-12);
        }
        // saturation 0 collapses a pixel onto its luma
        let red = RgbImage::new(1, 1, vec![1.0, 0.0, 0.0]).unwrap();
        let f = ColorFactors { saturation: 0.0, ..ColorFactors::IDENTITY };
        let out = apply_color_factors(&red, f);
        assert!(out.data().iter().all(|v| (*v - 0.299).abs() < 1e-12));
    }

    #[test]
    fn factors_in_range_and_deterministic() {
        let s = PerturbationSpec { brightness_jitter: 0.3, contrast_jitter: 0.2, saturation_jitter: 0.1, ..spec() };
        for d in 0..200 {
            let f = ColorFactors::draw(&s, d);
            assert_eq!(f, ColorFactors::draw(&s, d));
            assert!((0.7..=1.3).contains(&f.brightness));
            assert!((0.8..=1.2).contains(&f.contrast));
            assert!((0.9..=1.1).contains(&f.saturation));
        }
        assert_ne!(ColorFactors::draw(&s, 0), ColorFactors::draw(&s, 1));
    }

    #[test]
    fn quarter_area_on_8x8() {
        let s = PerturbationSpec { cutmix_area_range: (0.25, 0.25), ..spec() };
        for d in 0..20 {
            let m = sample_cutmix_mask((8, 8), &s, d).unwrap();
            assert_eq!(m.area(), 16);
            assert_eq!(m, sample_cutmix_mask((8, 8), &s, d).unwrap());
        }
    }

    #[test]
    fn infeasible_shapes() {
        assert!(matches!(sample_cutmix_mask((1, 1), &spec(), 0), Err(SemisupError::Infeasible(_))));
        let s = PerturbationSpec { cutmix_area_range: (0.3, 0.32), ..spec() };
        // 2x2 offers fractions 0.25, 0.5, 0.75, 1 only
        assert!(matches!(sample_cutmix_mask((2, 2), &s, 0), Err(SemisupError::Infeasible(_))));
    }

    #[test]
    fn empty_and_full_masks() {
        let a = noise_image(4, 6, 1);
        let b = noise_image(4, 6, 2);
        assert_eq!(cutmix_apply(&a, &b, &CutMixMask::empty((4, 6))).unwrap(), a);
        assert_eq!(cutmix_apply(&a, &b, &CutMixMask::full((4, 6))).unwrap(), b);
        let small = noise_image(3, 6, 2);
        assert!(matches!(
            cutmix_apply(&a, &small, &CutMixMask::full((4, 6))),
            Err(SemisupError::ShapeMismatch(_))
        ));
        assert!(CutMixMask::new((4, 6), (2, 0, 3, 1)).is_err());
    }

    proptest! {
        #[test]
        fn masks_stay_inside(h in 2usize..20, w in 2usize..20, d in 0u64..1000) {
            let s = PerturbationSpec { cutmix_area_range: (0.1, 0.6), ..spec() };
            let m = sample_cutmix_mask((h, w), &s, d).unwrap();
            let (top, left, rh, rw) = m.rect;
            prop_assert!(top + rh <= h && left + rw <= w);
            let f = m.area() as f64 / (h * w) as f64;
            prop_assert!((0.1..=0.6).contains(&f));
        }

        #[test]
        fn composite_is_pixel_selection(seed in 0u64..500) {
            let a = noise_image(9, 11, seed);
            let b = noise_image(9, 11, seed + 1000);
            let s = PerturbationSpec { cutmix_area_range: (0.05, 0.9), ..spec() };
            let m = sample_cutmix_mask((9, 11), &s, seed).unwrap();
            let out = cutmix_apply(&a, &b, &m).unwrap();
            for y in 0..9 {
                for x in 0..11 {
                    let src = if m.contains(y, x) { &b } else { &a };
                    prop_assert_eq!(out.pixel(y, x), src.pixel(y, x));
                }
            }
            prop_assert_eq!(cutmix_apply(&a, &a, &m).unwrap(), a.clone());
            let da = DepthMap::filled(9, 11, 1.0).unwrap();
            let db = DepthMap::filled(9, 11, 2.0).unwrap();
            let dm = cutmix_apply_depth(&da, &db, &m).unwrap();
            for y in 0..9 {
                for x in 0..11 {
                    prop_assert_eq!(dm.get(y, x) == 2.0, m.contains(y, x));
                }
            }
        }

        #[test]
        fn distortion_stays_in_unit_range(seed in 0u64..200) {
            let s = PerturbationSpec { brightness_jitter: 0.9, contrast_jitter: 0.9, saturation_jitter: 0.9, ..spec() };
            let out = color_distort(&noise_image(4, 4, seed), &s, seed);
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

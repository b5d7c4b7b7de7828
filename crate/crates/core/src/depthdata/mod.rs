//! Image and depth containers, dataset ingestion, resizing and the analytic
//! synthetic-scene generator.

mod io;
mod synth;

use std::path::PathBuf;

pub use io::{
    load_dataset, load_sample, read_depth, read_manifest, read_rgb, save_dataset, write_depth, write_manifest,
    write_rgb, DatasetManifest, DepthFormat, ManifestEntry, WriteReport, MANIFEST_FILE,
};
pub use synth::{generate_synthetic, synthetic_dataset, Primitive, SyntheticSceneSpec};

use crate::resample::Resampler;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("truncated data in {0}")]
    Truncated(PathBuf),
    #[error("shape mismatch for `{id}`: rgb {rgb:?} vs depth {depth:?}")]
    ShapeMismatch {
        id: String,
        rgb: (usize, usize),
        depth: (usize, usize),
    },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid depth map: {0}")]
    InvalidDepth(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("invalid synthetic scene: {0}")]
    InvalidScene(String),
    #[error("zero-size resize target {0}x{1}")]
    ZeroTarget(usize, usize),
    #[error("unsupported format for {0}")]
    Unsupported(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error on {path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Row-major, channel-interleaved RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(DataError::InvalidImage(format!("empty shape {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(DataError::InvalidImage(format!(
                "expected {} values for {height}x{width}x3, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::InvalidImage(format!("channel value {bad} outside [0,1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = std::iter::repeat(rgb).take(height * width).flatten().collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Callers must keep values inside `[0, 1]`; every mutation path in this
    /// crate clamps before writing.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Per-pixel relative depth with a validity mask.
///
/// A pixel is valid only if its value is finite and strictly positive.
/// Invalid pixels carry a value of `0.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Builds a map, deriving validity from the values themselves.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_shape(height, width, values.len())?;
        let valid: Vec<bool> = values.iter().map(|v| is_valid_depth(*v)).collect();
        let values = values
            .into_iter()
            .zip(&valid)
            .map(|(v, ok)| if *ok { v } else { 0.0 })
            .collect();
        Ok(Self { height, width, values, valid })
    }

    /// Builds a map with an explicit mask. Pixels flagged valid must hold a
    /// finite positive value.
    pub fn with_mask(
        height: usize,
        width: usize,
        values: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        check_shape(height, width, values.len())?;
        if valid.len() != values.len() {
            return Err(DataError::InvalidDepth(format!(
                "mask has {} entries for {} values",
                valid.len(),
                values.len()
            )));
        }
        let mut values = values;
        for (v, ok) in values.iter_mut().zip(&valid) {
            if *ok {
                if !is_valid_depth(*v) {
                    return Err(DataError::InvalidDepth(format!(
                        "pixel flagged valid holds {v}"
                    )));
                }
            } else {
                *v = 0.0;
            }
        }
        Ok(Self { height, width, values, valid })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Multiplies every valid pixel by `factor` (which must be positive and finite).
    pub fn scaled(&self, factor: f64) -> Self {
        let values = self
            .values
            .iter()
            .zip(&self.valid)
            .map(|(v, ok)| if *ok { v * factor } else { 0.0 })
            .collect();
        Self {
            height: self.height,
            width: self.width,
            values,
            valid: self.valid.clone(),
        }
    }
}

pub(crate) fn is_valid_depth(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

fn check_shape(height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(DataError::InvalidDepth(format!("empty shape {height}x{width}")));
    }
    if len != height * width {
        return Err(DataError::InvalidDepth(format!(
            "expected {} values for {height}x{width}, got {len}",
            height * width
        )));
    }
    Ok(())
}

/// One RGB frame with its ground-truth depth.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub image: RgbImage,
    pub depth: DepthMap,
}

impl SamplePair {
    pub fn new(id: impl Into<String>, image: RgbImage, depth: DepthMap) -> Result<Self> {
        let id = id.into();
        if image.shape() != depth.shape() {
            return Err(DataError::ShapeMismatch {
                id,
                rgb: image.shape(),
                depth: depth.shape(),
            });
        }
        Ok(Self { id, image, depth })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.image.shape()
    }
}

/// Stretches an image to `target` (height, width) with bilinear interpolation.
pub fn resize_image(image: &RgbImage, target: (usize, usize)) -> Result<RgbImage> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(DataError::ZeroTarget(th, tw));
    }
    let r = Resampler::new(image.shape(), target);
    let mut data = r.forward(image.data(), 3);
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    RgbImage::new(th, tw, data)
}

/// Stretches a depth map to `target`. Values are interpolated bilinearly over
/// valid neighbours only; the mask is resampled by nearest neighbour.
pub fn resize_depth(depth: &DepthMap, target: (usize, usize)) -> Result<DepthMap> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(DataError::ZeroTarget(th, tw));
    }
    let r = Resampler::new(depth.shape(), target);
    let valid = r.nearest(depth.valid());
    let weights: Vec<f64> = depth.valid().iter().map(|v| f64::from(u8::from(*v))).collect();
    let num = r.forward(depth.values(), 1);
    let den = r.forward(&weights, 1);
    let values = num
        .iter()
        .zip(&den)
        .zip(&valid)
        .map(|((n, d), ok)| {
            if !*ok {
                0.0
            } else if *d == 1.0 {
                *n
            } else {
                n / d
            }
        })
        .collect();
    DepthMap::with_mask(th, tw, values, valid)
}

/// Resizes both halves of a sample pair to `target`; the aspect ratio is not
/// preserved.
pub fn resize(sample: &SamplePair, target: (usize, usize)) -> Result<SamplePair> {
    SamplePair::new(
        sample.id.clone(),
        resize_image(&sample.image, target)?,
        resize_depth(&sample.depth, target)?,
    )
}

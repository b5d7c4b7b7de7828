//! Depth colour maps: red for the nearest valid pixel, blue for the farthest.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::ImageFormat;
use surgidepth::depthdata::DepthMap;

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("depth map has no valid pixels")]
    NoValidPixels,
    #[error("cannot encode {path}: {source}")]
    Codec { path: PathBuf, source: image::ImageError },
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Fully saturated HSV colour for a hue in degrees, `h` in `[0, 240]`.
fn hue_rgb(h: f64) -> [f64; 3] {
    let s = h / 60.0;
    match s {
        s if s < 1.0 => [1.0, s, 0.0],
        s if s < 2.0 => [2.0 - s, 1.0, 0.0],
        s if s < 3.0 => [0.0, 1.0, s - 2.0],
        s => [0.0, (4.0 - s).max(0.0), 1.0],
    }
}

/// Row-major 8-bit RGB. Hue runs linearly from 0° at the minimum valid
/// depth to 240° at the maximum; a constant map is all red and invalid
/// pixels are black.
pub fn colormap(depth: &DepthMap) -> Result<Vec<[u8; 3]>, RenderError> {
    let valid = depth.values().iter().zip(depth.valid()).filter(|(_, ok)| **ok).map(|(v, _)| *v);
    let (lo, hi) = valid.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        return Err(RenderError::NoValidPixels);
    }
    let span = hi - lo;
    Ok(depth
        .values()
        .iter()
        .zip(depth.valid())
        .map(|(v, ok)| {
            if !*ok {
                return [0, 0, 0];
            }
            let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
            hue_rgb(240.0 * t).map(|c| (c * 255.0).round() as u8)
        })
        .collect())
}

/// Writes the colour map of `depth` as an 8-bit RGB PNG.
pub fn render_colormap(depth: &DepthMap, path: impl AsRef<Path>) -> Result<(), RenderError> {
    let path = path.as_ref();
    let pixels = colormap(depth)?;
    let raw: Vec<u8> = pixels.into_iter().flatten().collect();
    let buf = image::RgbImage::from_raw(depth.width() as u32, depth.height() as u32, raw)
        .expect("buffer length matches the map shape");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)
        .map_err(|source| RenderError::Codec { path: path.to_path_buf(), source })?;
    surgidepth::write_atomic(path, out.get_ref())
        .map_err(|source| RenderError::Io { path: path.to_path_buf(), source })
}

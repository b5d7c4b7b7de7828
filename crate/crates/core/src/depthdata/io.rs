use std::collections::HashSet;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageFormat, Luma, Rgb};

use super::{DataError, DepthMap, Result, RgbImage, SamplePair};
use crate::fsutil::write_atomic;

pub const MANIFEST_FILE: &str = "manifest.csv";

const MANIFEST_HEADER: [&str; 4] = ["id", "rgb_path", "depth_path", "depth_scale"];

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest root.
    pub rgb_path: String,
    /// Relative to the manifest root.
    pub depth_path: String,
    /// Physical units per stored unit.
    pub depth_scale: f64,
}

/// Ordered list of samples under a dataset root. The entry order is the
/// canonical iteration order.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(DataError::InvalidManifest(format!("duplicate id `{}`", e.id)));
            }
            if !(e.depth_scale > 0.0 && e.depth_scale.is_finite()) {
                return Err(DataError::InvalidManifest(format!(
                    "depth_scale {} for `{}` must be positive",
                    e.depth_scale, e.id
                )));
            }
        }
        Ok(Self { root: root.into(), entries })
    }

    pub fn load(&self, index: usize) -> Result<SamplePair> {
        load_sample(&self.root, &self.entries[index])
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path.to_path_buf())
        } else {
            DataError::Io { path: path.to_path_buf(), source }
        }
    }
}

pub fn read_manifest(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let path = root.join(MANIFEST_FILE);
    let text = std::fs::read(&path).map_err(io_err(&path))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_slice());
    let bad = |reason: String| DataError::InvalidManifest(format!("{}: {reason}", path.display()));
    let header = reader.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(bad(format!("expected header {}", MANIFEST_HEADER.join(","))));
    }
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let depth_scale = record[3]
            .parse::<f64>()
            .map_err(|e| bad(format!("depth_scale `{}`: {e}", &record[3])))?;
        entries.push(ManifestEntry {
            id: record[0].to_string(),
            rgb_path: record[1].to_string(),
            depth_path: record[2].to_string(),
            depth_scale,
        });
    }
    DatasetManifest::new(root, entries)
}

pub fn write_manifest(manifest: &DatasetManifest) -> Result<()> {
    let path = manifest.root.join(MANIFEST_FILE);
    let mut writer = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| DataError::InvalidManifest(e.to_string());
    writer.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for e in &manifest.entries {
        writer
            .write_record([
                e.id.as_str(),
                e.rgb_path.as_str(),
                e.depth_path.as_str(),
                &e.depth_scale.to_string(),
            ])
            .map_err(csv_err)?;
    }
    let bytes = writer.into_inner().map_err(|e| DataError::InvalidManifest(e.to_string()))?;
    write_atomic(&path, &bytes).map_err(io_err(&path))
}

/// Writes `samples` under `root` as `rgb/<id>.png` and `depth/<id>.<ext>`
/// plus a manifest, in the given order.
pub fn save_dataset(
    root: impl AsRef<Path>,
    samples: &[SamplePair],
    format: DepthFormat,
) -> Result<DatasetManifest> {
    let root = root.as_ref();
    for sub in ["rgb", "depth"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let rgb_path = format!("rgb/{}.png", s.id);
        let depth_path = format!("depth/{}.{}", s.id, format.extension());
        write_rgb(&s.image, root.join(&rgb_path))?;
        write_depth(&s.depth, root.join(&depth_path), format)?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            rgb_path,
            depth_path,
            depth_scale: format.manifest_scale(),
        });
    }
    let manifest = DatasetManifest::new(root, entries)?;
    write_manifest(&manifest)?;
    Ok(manifest)
}

/// Loads every entry of the manifest in canonical order.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<SamplePair>> {
    let manifest = read_manifest(root)?;
    (0..manifest.entries.len()).map(|i| manifest.load(i)).collect()
}

pub fn load_sample(root: &Path, entry: &ManifestEntry) -> Result<SamplePair> {
    let image = read_rgb(root.join(&entry.rgb_path))?;
    let depth = read_depth(root.join(&entry.depth_path), entry.depth_scale)?;
    SamplePair::new(entry.id.clone(), image, depth)
}

pub fn read_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|source| DataError::Codec { path: path.to_path_buf(), source })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    RgbImage::new(h as usize, w as usize, data)
}

pub fn write_rgb(image: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u8> = image.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    let buf: ImageBuffer<Rgb<u8>, _> =
        ImageBuffer::from_raw(image.width() as u32, image.height() as u32, raw)
            .expect("buffer length matches shape");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)
        .map_err(|source| DataError::Codec { path: path.to_path_buf(), source })?;
    write_atomic(path, out.get_ref()).map_err(io_err(path))
}

/// Storage format for depth files.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DepthFormat {
    /// Lossless 32-bit float PFM.
    Pfm,
    /// 16-bit grayscale PNG storing `round(value / depth_scale)`.
    Png16 { depth_scale: f64 },
}

impl DepthFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            DepthFormat::Pfm => "pfm",
            DepthFormat::Png16 { .. } => "png",
        }
    }

    /// Scale to record in a manifest next to a file of this format.
    pub fn manifest_scale(&self) -> f64 {
        match self {
            DepthFormat::Pfm => 1.0,
            DepthFormat::Png16 { depth_scale } => *depth_scale,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WriteReport {
    /// Valid pixels whose quantized value fell outside the storable range.
    pub clamped: usize,
}

/// Writes a depth map. Invalid pixels are stored as zero so they read back
/// invalid.
pub fn write_depth(
    depth: &DepthMap,
    path: impl AsRef<Path>,
    format: DepthFormat,
) -> Result<WriteReport> {
    let path = path.as_ref();
    match format {
        DepthFormat::Pfm => {
            let bytes = encode_pfm(depth);
            write_atomic(path, &bytes).map_err(io_err(path))?;
            Ok(WriteReport::default())
        }
        DepthFormat::Png16 { depth_scale } => {
            if !(depth_scale > 0.0 && depth_scale.is_finite()) {
                return Err(DataError::InvalidManifest(format!(
                    "depth_scale {depth_scale} must be positive"
                )));
            }
            let mut clamped = 0;
            let raw: Vec<u16> = depth
                .values()
                .iter()
                .zip(depth.valid())
                .map(|(v, ok)| {
                    if !*ok {
                        return 0;
                    }
                    let q = (v / depth_scale).round();
                    // a valid pixel must not collapse onto the invalid code 0
                    if q > 65535.0 || q < 1.0 {
                        clamped += 1;
                    }
                    q.clamp(1.0, 65535.0) as u16
                })
                .collect();
            if clamped > 0 {
                log::warn!(
                    "{}: {clamped} depth values clamped to the 16-bit range at scale {depth_scale}",
                    path.display()
                );
            }
            let buf: ImageBuffer<Luma<u16>, _> =
                ImageBuffer::from_raw(depth.width() as u32, depth.height() as u32, raw)
                    .expect("buffer length matches shape");
            let mut out = Cursor::new(Vec::new());
            buf.write_to(&mut out, ImageFormat::Png)
                .map_err(|source| DataError::Codec { path: path.to_path_buf(), source })?;
            write_atomic(path, out.get_ref()).map_err(io_err(path))?;
            Ok(WriteReport { clamped })
        }
    }
}

/// Reads a `.pfm` or 16-bit `.png` depth file and multiplies by `depth_scale`.
/// Non-finite or non-positive values become invalid pixels.
pub fn read_depth(path: impl AsRef<Path>, depth_scale: f64) -> Result<DepthMap> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let (h, w, stored) = match ext.as_str() {
        "pfm" => decode_pfm(&bytes, path)?,
        "png" => decode_png16(&bytes, path)?,
        _ => return Err(DataError::Unsupported(path.to_path_buf())),
    };
    let values = stored.into_iter().map(|v| v * depth_scale).collect();
    DepthMap::new(h, w, values)
}

fn encode_pfm(depth: &DepthMap) -> Vec<u8> {
    let (h, w) = depth.shape();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(h * w * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            let v = if depth.is_valid(y, x) { depth.get(y, x) as f32 } else { 0.0 };
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

type Decoded = (usize, usize, Vec<f64>);

fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Decoded> {
    let malformed = |reason: &str| DataError::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    // three whitespace-separated header tokens, then one whitespace byte
    let mut tokens = Vec::with_capacity(4);
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos || pos - start > 32 {
            return Err(malformed("incomplete header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| malformed("non-ascii header"))?);
    }
    pos += 1;
    match tokens[0] {
        "Pf" => {}
        "PF" => return Err(malformed("three-channel PFM is not a depth map")),
        _ => return Err(malformed("missing `Pf` magic")),
    }
    let w: usize = tokens[1].parse().map_err(|_| malformed("bad width"))?;
    let h: usize = tokens[2].parse().map_err(|_| malformed("bad height"))?;
    let scale: f32 = tokens[3].parse().map_err(|_| malformed("bad scale"))?;
    if w == 0 || h == 0 {
        return Err(malformed("zero dimension"));
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(malformed("scale must be non-zero"));
    }
    let little = scale < 0.0;
    let payload = bytes.get(pos..).unwrap_or_default();
    if payload.len() < w * h * 4 {
        return Err(DataError::Truncated(path.to_path_buf()));
    }
    let mut values = vec![0.0; w * h];
    for (i, chunk) in payload.chunks_exact(4).take(w * h).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, x) = (i / w, i % w);
        values[(h - 1 - row) * w + x] = f64::from(v);
    }
    Ok((h, w, values))
}

fn decode_png16(bytes: &[u8], path: &Path) -> Result<Decoded> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|source| DataError::Codec { path: path.to_path_buf(), source })?;
    let img = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        _ => {
            return Err(DataError::MalformedHeader {
                path: path.to_path_buf(),
                reason: "depth PNG must be 16-bit grayscale".into(),
            })
        }
    };
    let (w, h) = img.dimensions();
    let values = img.into_raw().into_iter().map(f64::from).collect();
    Ok((h as usize, w as usize, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(id: &str, rgb: &str, depth: &str, scale: f64) -> ManifestEntry {
        ManifestEntry {
            id: id.into(),
            rgb_path: rgb.into(),
            depth_path: depth.into(),
            depth_scale: scale,
        }
    }

    #[test]
    fn load_applies_depth_scale() {
        let dir = tempfile::tempdir().unwrap();
        write_rgb(&RgbImage::filled(4, 4, [0.5; 3]).unwrap(), dir.path().join("a.png")).unwrap();
        write_depth(&DepthMap::filled(4, 4, 1.0).unwrap(), dir.path().join("a.pfm"), DepthFormat::Pfm)
            .unwrap();
        let s = load_sample(dir.path(), &entry("a", "a.png", "a.pfm", 2.0)).unwrap();
        assert!(s.depth.values().iter().all(|v| *v == 2.0));
        assert_eq!(s.depth.valid_count(), 16);
    }

    #[test]
    fn zero_stored_pixel_is_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let mut values = vec![1.5; 16];
        values[6] = 0.0;
        let d = DepthMap::new(4, 4, values).unwrap();
        write_rgb(&RgbImage::filled(4, 4, [0.5; 3]).unwrap(), dir.path().join("a.png")).unwrap();
        write_depth(&d, dir.path().join("a.pfm"), DepthFormat::Pfm).unwrap();
        let s = load_sample(dir.path(), &entry("a", "a.png", "a.pfm", 1.0)).unwrap();
        assert_eq!(s.depth.valid_count(), 15);
        assert!(!s.depth.is_valid(1, 2));
        assert_eq!(s.depth.get(0, 0), 1.5);
    }

    #[test]
    fn rgb_depth_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_rgb(&RgbImage::filled(8, 8, [0.5; 3]).unwrap(), dir.path().join("a.png")).unwrap();
        write_depth(&DepthMap::filled(4, 4, 1.0).unwrap(), dir.path().join("a.pfm"), DepthFormat::Pfm)
            .unwrap();
        let err = load_sample(dir.path(), &entry("a", "a.png", "a.pfm", 1.0)).unwrap_err();
        assert!(matches!(err, DataError::ShapeMismatch { .. }));
    }

    #[test]
    fn missing_and_malformed_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_depth(dir.path().join("nope.pfm"), 1.0).unwrap_err();
        assert!(matches!(err, DataError::MissingFile(_)));
        std::fs::write(dir.path().join("bad.pfm"), b"P6\n4 4\n-1.0\n").unwrap();
        let err = read_depth(dir.path().join("bad.pfm"), 1.0).unwrap_err();
        assert!(matches!(err, DataError::MalformedHeader { .. }));
        std::fs::write(dir.path().join("short.pfm"), b"Pf\n4 4\n-1.0\n\0\0\0\0").unwrap();
        let err = read_depth(dir.path().join("short.pfm"), 1.0).unwrap_err();
        assert!(matches!(err, DataError::Truncated(_)));
    }

    #[test]
    fn pfm_rows_are_bottom_up_and_big_endian_readable() {
        let mut bytes = b"Pf\n2 2\n1.0\n".to_vec();
        for v in [3.0f32, 4.0, 1.0, 2.0] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        let (h, w, values) = decode_pfm(&bytes, Path::new("x.pfm")).unwrap();
        assert_eq!((h, w), (2, 2));
        assert_eq!(values, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn png16_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let d = DepthMap::new(1, 2, vec![1.234, 0.5]).unwrap();
        let report = write_depth(&d, &path, DepthFormat::Png16 { depth_scale: 0.001 }).unwrap();
        assert_eq!(report.clamped, 0);
        let bytes = std::fs::read(&path).unwrap();
        let (_, _, stored) = decode_png16(&bytes, &path).unwrap();
        assert_eq!(stored, vec![1234.0, 500.0]);
        let back = read_depth(&path, 0.001).unwrap();
        assert!((back.get(0, 0) - 1.234).abs() < 1e-12);
    }

    #[test]
    fn png16_clamps_and_reports() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let d = DepthMap::new(1, 2, vec![70.0, 1.0]).unwrap();
        let report = write_depth(&d, &path, DepthFormat::Png16 { depth_scale: 0.001 }).unwrap();
        assert_eq!(report.clamped, 1);
        let back = read_depth(&path, 0.001).unwrap();
        assert!((back.get(0, 0) - 65.535).abs() < 1e-9);
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new(
            dir.path(),
            vec![entry("a", "rgb/a.png", "depth/a.pfm", 1.0), entry("b", "b.png", "b.png", 0.001)],
        )
        .unwrap();
        write_manifest(&m).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), m);
        assert!(DatasetManifest::new(dir.path(), vec![entry("a", "x", "y", 1.0), entry("a", "x", "y", 1.0)]).is_err());
        assert!(DatasetManifest::new(dir.path(), vec![entry("a", "x", "y", 0.0)]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn pfm_round_trip_bit_exact(
            h in 1usize..12,
            w in 1usize..12,
            seed in proptest::collection::vec(1e-6f32..1e6f32, 144),
        ) {
            let values: Vec<f64> = seed.iter().take(h * w).map(|v| f64::from(*v)).collect();
            prop_assume!(values.len() == h * w);
            let d = DepthMap::new(h, w, values).unwrap();
            let bytes = encode_pfm(&d);
            let (rh, rw, back) = decode_pfm(&bytes, Path::new("m.pfm")).unwrap();
            prop_assert_eq!((rh, rw), (h, w));
            for (a, b) in d.values().iter().zip(&back) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

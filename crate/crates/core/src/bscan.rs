//! Domain types for B-scans and shadow masks, grayscale raster I/O, and the
//! geometric/intensity normalizations shared by every other module.
//!
//! Intensities are floating point in [0,1] everywhere in memory; conversion to
//! and from integer sample values happens only at the file boundary.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Minimum height/width accepted for scans entering the pipeline from disk or
/// the phantom generator. In-memory arrays may be smaller (toy inputs in tests
/// and calibration probes go through the same operations).
pub const MIN_SCAN_DIM: usize = 32;

/// Provenance of a scan within the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanKind {
    Clean,
    Noisy,
    Processed,
    Multiframe,
}

/// A grayscale B-scan with intensities in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct BScan {
    pub pixels: Array2<f32>,
    pub id: String,
    pub kind: ScanKind,
}

impl BScan {
    /// Wraps an intensity array, validating the [0,1] range.
    pub fn new(pixels: Array2<f32>, id: impl Into<String>, kind: ScanKind) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::Argument("scan must be non-empty".into()));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Argument(format!(
                "scan intensities must lie in [0,1], found {v}"
            )));
        }
        Ok(BScan { pixels, id: id.into(), kind })
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    /// Same pixels, different provenance tag.
    pub fn with_kind(mut self, kind: ScanKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }
}

/// Per-pixel shadow probability or binary label aligned to a B-scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowMask {
    pub values: Array2<f32>,
    pub binary: bool,
}

impl ShadowMask {
    pub fn new(values: Array2<f32>, binary: bool) -> Result<Self> {
        if binary {
            if let Some(v) = values.iter().find(|v| **v != 0.0 && **v != 1.0) {
                return Err(Error::Argument(format!(
                    "binary mask values must be 0 or 1, found {v}"
                )));
            }
        } else if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Argument(format!(
                "mask probabilities must lie in [0,1], found {v}"
            )));
        }
        Ok(ShadowMask { values, binary })
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    /// Thresholds a probabilistic mask at 0.5 into a binary one.
    pub fn binarize(&self) -> ShadowMask {
        ShadowMask {
            values: self.values.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
            binary: true,
        }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }
}

/// A clean scan with its ground-truth shadow mask and an optional degraded
/// companion; the record unit of every dataset.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub clean: BScan,
    pub mask: ShadowMask,
    pub noisy: Option<BScan>,
}

impl ImagePair {
    pub fn new(clean: BScan, mask: ShadowMask, noisy: Option<BScan>) -> Result<Self> {
        let dims = clean.pixels.dim();
        if mask.values.dim() != dims {
            return Err(Error::Argument(format!(
                "mask shape {:?} does not match scan shape {:?}",
                mask.values.dim(),
                dims
            )));
        }
        if let Some(n) = &noisy {
            if n.pixels.dim() != dims {
                return Err(Error::Argument(format!(
                    "noisy shape {:?} does not match clean shape {:?}",
                    n.pixels.dim(),
                    dims
                )));
            }
        }
        Ok(ImagePair { clean, mask, noisy })
    }

    pub fn id(&self) -> &str {
        &self.clean.id
    }
}

/// Loads an 8- or 16-bit grayscale PNG/TIFF, mapping samples to [0,1] by
/// dividing by the format's maximum representable value.
pub fn load_image(path: &Path) -> Result<BScan> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let pixels = match img {
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
                buf.get_pixel(c as u32, r as u32)[0] as f32 / u8::MAX as f32
            })
        }
        image::DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
                buf.get_pixel(c as u32, r as u32)[0] as f32 / u16::MAX as f32
            })
        }
        other => {
            return Err(Error::Format(format!(
                "{}: expected 8- or 16-bit grayscale, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (h, w) = pixels.dim();
    if h < MIN_SCAN_DIM || w < MIN_SCAN_DIM {
        return Err(Error::Format(format!(
            "{}: scan is {h}x{w}, minimum is {MIN_SCAN_DIM}x{MIN_SCAN_DIM}",
            path.display()
        )));
    }
    BScan::new(pixels, id, ScanKind::Clean)
}

/// Sample width for [`save_image`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

/// Writes a scan as a grayscale PNG or TIFF (by extension), rounding
/// intensities to the requested sample width.
pub fn save_image(scan: &BScan, path: &Path, depth: BitDepth) -> Result<()> {
    let (h, w) = scan.pixels.dim();
    let result = match depth {
        BitDepth::Eight => {
            let mut buf = image::GrayImage::new(w as u32, h as u32);
            for ((r, c), &v) in scan.pixels.indexed_iter() {
                buf.put_pixel(c as u32, r as u32, image::Luma([(v * u8::MAX as f32).round() as u8]));
            }
            buf.save(path)
        }
        BitDepth::Sixteen => {
            let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
            for ((r, c), &v) in scan.pixels.indexed_iter() {
                buf.put_pixel(c as u32, r as u32, image::Luma([(v * u16::MAX as f32).round() as u16]));
            }
            buf.save(path)
        }
    };
    result.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })
}

/// Bilinear resize (half-pixel centers, edge clamp). Output intensities stay
/// within the input's value envelope.
pub fn resize(image: &BScan, target_h: usize, target_w: usize) -> Result<BScan> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::Argument("resize target dims must be positive".into()));
    }
    let (h, w) = image.pixels.dim();
    if (target_h, target_w) == (h, w) {
        return Ok(image.clone());
    }
    let out = resize_array(&image.pixels, target_h, target_w);
    Ok(BScan {
        pixels: out,
        id: image.id.clone(),
        kind: image.kind,
    })
}

/// Bilinear resize on a bare array; used for scans and probability masks alike.
pub fn resize_array(pixels: &Array2<f32>, target_h: usize, target_w: usize) -> Array2<f32> {
    let (h, w) = pixels.dim();
    let scale_y = h as f32 / target_h as f32;
    let scale_x = w as f32 / target_w as f32;
    Array2::from_shape_fn((target_h, target_w), |(i, j)| {
        let sy = ((i as f32 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f32);
        let sx = ((j as f32 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f32);
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let ty = sy - y0 as f32;
        let tx = sx - x0 as f32;
        let top = pixels[[y0, x0]] * (1.0 - tx) + pixels[[y0, x1]] * tx;
        let bot = pixels[[y1, x0]] * (1.0 - tx) + pixels[[y1, x1]] * tx;
        (top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0)
    })
}

/// Linearly rescales intensities to span [0,1]; a constant image maps to all
/// zeros so the division is always defined.
pub fn min_max_scale(image: &BScan) -> BScan {
    BScan {
        pixels: min_max_scale_array(&image.pixels),
        id: image.id.clone(),
        kind: image.kind,
    }
}

pub fn min_max_scale_array(pixels: &Array2<f32>) -> Array2<f32> {
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &v in pixels.iter() {
        min = min.min(v);
        max = max.max(v);
    }
    let range = max - min;
    if range <= 0.0 {
        return Array2::zeros(pixels.dim());
    }
    pixels.mapv(|v| ((v - min) / range).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scan(pixels: Array2<f32>) -> BScan {
        BScan::new(pixels, "t", ScanKind::Clean).unwrap()
    }

    #[test]
    fn rejects_out_of_range_intensities() {
        assert!(BScan::new(array![[0.0, 1.1]], "t", ScanKind::Clean).is_err());
        assert!(BScan::new(array![[-0.1, 0.5]], "t", ScanKind::Clean).is_err());
        assert!(BScan::new(array![[f32::NAN]], "t", ScanKind::Clean).is_err());
    }

    #[test]
    fn binary_mask_rejects_intermediate_values() {
        assert!(ShadowMask::new(array![[0.0, 0.5]], true).is_err());
        assert!(ShadowMask::new(array![[0.0, 0.5]], false).is_ok());
    }

    #[test]
    fn pair_requires_matching_shapes() {
        let clean = scan(Array2::zeros((4, 4)));
        let mask = ShadowMask::new(Array2::zeros((4, 5)), true).unwrap();
        assert!(ImagePair::new(clean, mask, None).is_err());
    }

    #[test]
    fn min_max_scale_hand_value() {
        // min 0.2, max 0.6: pixel 0.4 maps to 0.5
        let s = scan(array![[0.2, 0.4], [0.6, 0.2]]);
        let out = min_max_scale(&s);
        assert!((out.pixels[[0, 1]] - 0.5).abs() < 1e-7);
        assert_eq!(out.pixels[[0, 0]], 0.0);
        assert_eq!(out.pixels[[1, 0]], 1.0);
    }

    #[test]
    fn min_max_scale_identity_when_already_full_range() {
        let s = scan(array![[0.0, 0.25], [0.75, 1.0]]);
        let out = min_max_scale(&s);
        assert_eq!(out.pixels, s.pixels);
    }

    #[test]
    fn min_max_scale_constant_maps_to_zeros() {
        let s = scan(Array2::from_elem((3, 3), 0.3));
        let out = min_max_scale(&s);
        assert!(out.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn min_max_scale_idempotent() {
        let s = scan(array![[0.1, 0.4], [0.9, 0.3]]);
        let once = min_max_scale(&s);
        let twice = min_max_scale(&once);
        assert_eq!(once.pixels, twice.pixels);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let s = scan(Array2::from_elem((4, 4), 0.7));
        let out = resize(&s, 7, 9).unwrap();
        assert!(out.pixels.iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn resize_identity_is_bit_exact() {
        let s = scan(array![[0.1, 0.2], [0.3, 0.4]]);
        let out = resize(&s, 2, 2).unwrap();
        assert_eq!(out.pixels, s.pixels);
    }

    #[test]
    fn resize_row_interpolates_monotonically() {
        // Half-pixel centers on [[0,1],[0,1]] widened to 4 columns:
        // source x = {-0.25, 0.25, 0.75, 1.25} -> values {0, 0.25, 0.75, 1}.
        let s = scan(array![[0.0, 1.0], [0.0, 1.0]]);
        let out = resize(&s, 2, 4).unwrap();
        let expected = [0.0, 0.25, 0.75, 1.0];
        for (j, &e) in expected.iter().enumerate() {
            assert!((out.pixels[[0, j]] - e).abs() < 1e-6, "col {j}");
            assert!((out.pixels[[1, j]] - e).abs() < 1e-6, "col {j}");
        }
    }

    #[test]
    fn resize_rejects_zero_target() {
        let s = scan(Array2::zeros((4, 4)));
        assert!(resize(&s, 0, 4).is_err());
        assert!(resize(&s, 4, 0).is_err());
    }

    #[test]
    fn resize_preserves_value_envelope() {
        let s = scan(array![[0.2, 0.8, 0.5], [0.4, 0.6, 0.3], [0.9, 0.1, 0.7]]);
        let out = resize(&s, 8, 5).unwrap();
        let eps = 1e-6;
        for &v in out.pixels.iter() {
            assert!(v >= 0.1 - eps && v <= 0.9 + eps);
        }
    }

    #[test]
    fn save_load_roundtrip_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.png");
        // quantized 8-bit values so the round trip is exact
        let pixels = Array2::from_shape_fn((MIN_SCAN_DIM, MIN_SCAN_DIM), |(r, c)| {
            ((r * MIN_SCAN_DIM + c) % 256) as f32 / 255.0
        });
        let s = scan(pixels);
        save_image(&s, &path, BitDepth::Eight).unwrap();
        let loaded = load_image(&path).unwrap();
        assert_eq!(loaded.pixels, s.pixels);
    }

    #[test]
    fn load_maps_extremes_and_midpoint() {
        let dir = tempfile::tempdir().unwrap();
        for (value, expected) in [(255u8, 1.0f32), (0, 0.0), (128, 128.0 / 255.0)] {
            let path = dir.path().join(format!("v{value}.png"));
            let buf = image::GrayImage::from_pixel(
                MIN_SCAN_DIM as u32,
                MIN_SCAN_DIM as u32,
                image::Luma([value]),
            );
            buf.save(&path).unwrap();
            let loaded = load_image(&path).unwrap();
            assert!(loaded.pixels.iter().all(|&v| (v - expected).abs() < 1e-7));
        }
    }

    #[test]
    fn load_rejects_color_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        let buf = image::RgbImage::from_pixel(
            MIN_SCAN_DIM as u32,
            MIN_SCAN_DIM as u32,
            image::Rgb([10, 200, 30]),
        );
        buf.save(&path).unwrap();
        match load_image(&path) {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_missing_file() {
        match load_image(Path::new("/nonexistent/scan.png")) {
            Err(Error::Io { .. }) => {}
            other => panic!("expected i/o error, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_undersized_scan() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.png");
        image::GrayImage::new(8, 8).save(&path).unwrap();
        assert!(load_image(&path).is_err());
    }

    #[test]
    fn save_load_roundtrip_16bit_tiff() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.tiff");
        let pixels = Array2::from_shape_fn((MIN_SCAN_DIM, MIN_SCAN_DIM), |(r, c)| {
            ((r * 2048 + c * 17) % 65536) as f32 / 65535.0
        });
        let s = scan(pixels);
        save_image(&s, &path, BitDepth::Sixteen).unwrap();
        let loaded = load_image(&path).unwrap();
        assert_eq!(loaded.pixels, s.pixels);
    }
}

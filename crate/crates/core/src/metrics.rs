//! Image-quality metrics and the ROI protocols that feed them, plus the
//! per-image/aggregate report structure.
//!
//! Two PSNR variants are reported side by side: `psnr_paper` normalizes the
//! error energy by the reference signal energy, while `psnr_std` is the
//! conventional peak-intensity form (L = 1). They differ and must not be
//! compared across conventions, so both carry explicit names everywhere.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bscan::BScan;
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiLabel {
    Tissue,
    Background,
    Shadowed,
    ShadowFree,
}

/// A rectangular region of interest, fully inside its image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
    pub label: RoiLabel,
}

impl Roi {
    pub fn new(row: usize, col: usize, height: usize, width: usize, label: RoiLabel) -> Self {
        Roi { row, col, height, width, label }
    }

    pub fn validate(&self, image: &Array2<f32>) -> Result<()> {
        let (h, w) = image.dim();
        if self.height == 0 || self.width == 0 {
            return Err(Error::Argument("ROI must be non-degenerate".into()));
        }
        if self.row + self.height > h || self.col + self.width > w {
            return Err(Error::Argument(format!(
                "ROI {}x{}+{}+{} leaves the {}x{} image",
                self.height, self.width, self.row, self.col, h, w
            )));
        }
        Ok(())
    }

    fn pixels<'a>(&self, image: &'a Array2<f32>) -> impl Iterator<Item = f64> + 'a {
        let r0 = self.row;
        let c0 = self.col;
        let (rh, rw) = (self.height, self.width);
        (0..rh).flat_map(move |r| (0..rw).map(move |c| image[[r0 + r, c0 + c]] as f64))
    }

    pub fn mean(&self, image: &Array2<f32>) -> f64 {
        let n = (self.height * self.width) as f64;
        self.pixels(image).sum::<f64>() / n
    }

    /// Population variance of the ROI intensities.
    pub fn variance(&self, image: &Array2<f32>) -> f64 {
        let n = (self.height * self.width) as f64;
        let mean = self.mean(image);
        self.pixels(image).map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
    }
}

/// Average gradient magnitude: mean over pixels of |G|/sqrt(2), gradients by
/// central differences with replicated edges.
pub fn agm(image: &BScan) -> f64 {
    let p = &image.pixels;
    let (h, w) = p.dim();
    if h < 2 || w < 2 {
        return 0.0;
    }
    let at = |r: isize, c: isize| -> f64 {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        p[[r, c]] as f64
    };
    let mut total = 0.0;
    for r in 0..h as isize {
        for c in 0..w as isize {
            let gx = (at(r, c + 1) - at(r, c - 1)) / 2.0;
            let gy = (at(r + 1, c) - at(r - 1, c)) / 2.0;
            total += (gx * gx + gy * gy).sqrt();
        }
    }
    total / (h * w) as f64 / std::f64::consts::SQRT_2
}

/// Signal-energy-normalized PSNR: -10 log10( sum (f0 - f~)^2 / sum f0^2 ).
/// Identical images report +inf.
pub fn psnr_paper(processed: &BScan, reference: &BScan) -> Result<f64> {
    if processed.pixels.dim() != reference.pixels.dim() {
        return Err(Error::Argument("psnr shape mismatch".into()));
    }
    let mut err = 0.0f64;
    let mut sig = 0.0f64;
    for (&f, &f0) in processed.pixels.iter().zip(reference.pixels.iter()) {
        err += (f0 as f64 - f as f64).powi(2);
        sig += (f0 as f64).powi(2);
    }
    if sig == 0.0 {
        return Err(Error::Argument("psnr reference is all zero".into()));
    }
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * (err / sig).log10())
}

/// Conventional peak-intensity PSNR with L = 1: -10 log10(MSE).
pub fn psnr_standard(processed: &BScan, reference: &BScan) -> Result<f64> {
    if processed.pixels.dim() != reference.pixels.dim() {
        return Err(Error::Argument("psnr shape mismatch".into()));
    }
    let n = processed.pixels.len() as f64;
    let mse: f64 = processed
        .pixels
        .iter()
        .zip(reference.pixels.iter())
        .map(|(&f, &f0)| (f0 as f64 - f as f64).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

/// Contrast-to-noise ratio: mean over tissue ROIs of
/// |mu_r - mu_b| / sqrt(0.5 (var_r + var_b)) against one background ROI.
pub fn cnr(image: &BScan, tissue_rois: &[Roi], background_roi: &Roi) -> Result<f64> {
    if tissue_rois.is_empty() {
        return Err(Error::Argument("cnr needs at least one tissue ROI".into()));
    }
    background_roi.validate(&image.pixels)?;
    let mu_b = background_roi.mean(&image.pixels);
    let var_b = background_roi.variance(&image.pixels);
    let mut total = 0.0;
    for roi in tissue_rois {
        roi.validate(&image.pixels)?;
        let mu_r = roi.mean(&image.pixels);
        let var_r = roi.variance(&image.pixels);
        let denom = (0.5 * (var_r + var_b)).sqrt();
        if denom == 0.0 {
            return Err(Error::UndefinedMetric(
                "cnr undefined: zero variance in both tissue and background ROIs".into(),
            ));
        }
        total += (mu_r - mu_b).abs() / denom;
    }
    Ok(total / tissue_rois.len() as f64)
}

/// Windowed SSIM: 7x7 uniform windows over valid positions, sample-covariance
/// normalization, stabilizers C1 = (0.01 L)^2, C2 = (0.03 L)^2 with L = 1.
pub fn ssim(x: &BScan, y: &BScan) -> Result<f64> {
    if x.pixels.dim() != y.pixels.dim() {
        return Err(Error::Argument("ssim shape mismatch".into()));
    }
    let (h, w) = x.pixels.dim();
    let win = SSIM_WINDOW;
    if h < win || w < win {
        return Err(Error::Argument(format!(
            "image {h}x{w} smaller than the {win}x{win} SSIM window"
        )));
    }
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let np = (win * win) as f64;
    let cov_norm = np / (np - 1.0);

    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=(h - win) {
        for c0 in 0..=(w - win) {
            let mut sx = 0.0;
            let mut sy = 0.0;
            let mut sxx = 0.0;
            let mut syy = 0.0;
            let mut sxy = 0.0;
            for r in r0..r0 + win {
                for c in c0..c0 + win {
                    let a = x.pixels[[r, c]] as f64;
                    let b = y.pixels[[r, c]] as f64;
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let ux = sx / np;
            let uy = sy / np;
            let vx = cov_norm * (sxx / np - ux * ux);
            let vy = cov_norm * (syy / np - uy * uy);
            let vxy = cov_norm * (sxy / np - ux * uy);
            let s = ((2.0 * ux * uy + c1) * (2.0 * vxy + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Intra-layer contrast |(I1 - I2) / (I1 + I2)| between pooled shadow-free
/// and shadowed ROI intensities of one layer.
pub fn ilc(image: &BScan, shadow_free_rois: &[Roi], shadowed_rois: &[Roi]) -> Result<f64> {
    if shadow_free_rois.is_empty() || shadowed_rois.is_empty() {
        return Err(Error::Argument("ilc needs ROIs on both sides".into()));
    }
    let pooled_mean = |rois: &[Roi]| -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0.0;
        for roi in rois {
            roi.validate(&image.pixels)?;
            sum += roi.mean(&image.pixels) * (roi.height * roi.width) as f64;
            n += (roi.height * roi.width) as f64;
        }
        Ok(sum / n)
    };
    let i1 = pooled_mean(shadow_free_rois)?;
    let i2 = pooled_mean(shadowed_rois)?;
    if i1 + i2 == 0.0 {
        return Err(Error::UndefinedMetric("ilc undefined: both regions are black".into()));
    }
    Ok(((i1 - i2) / (i1 + i2)).abs())
}

/// Layer-wise pixel-intensity profile along a per-column path, with a
/// flatness score (std / mean); flat profiles mean no residual shadow.
#[derive(Debug, Clone, PartialEq)]
pub struct LpiProfile {
    pub values: Vec<f64>,
    pub flatness: f64,
}

pub fn lpi_profile(image: &BScan, layer_path: &[usize], band_halfwidth: usize) -> Result<LpiProfile> {
    let (h, w) = image.pixels.dim();
    if layer_path.len() != w {
        return Err(Error::Argument(format!(
            "layer path has {} entries for width {w}",
            layer_path.len()
        )));
    }
    for (c, &r) in layer_path.iter().enumerate() {
        if r < band_halfwidth || r + band_halfwidth >= h {
            return Err(Error::Argument(format!(
                "layer path leaves the image at column {c} (row {r}, halfwidth {band_halfwidth})"
            )));
        }
    }
    let values: Vec<f64> = layer_path
        .iter()
        .enumerate()
        .map(|(c, &r)| {
            let band = 2 * band_halfwidth + 1;
            (r - band_halfwidth..=r + band_halfwidth)
                .map(|rr| image.pixels[[rr, c]] as f64)
                .sum::<f64>()
                / band as f64
        })
        .collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    let flatness = if mean == 0.0 { 0.0 } else { var.sqrt() / mean };
    Ok(LpiProfile { values, flatness })
}

/// Uniformly samples `count` distinct size x size ROIs whose every pixel lies
/// in `region`; deterministic per seed.
pub fn sample_rois(
    region: &[(usize, usize)],
    count: usize,
    size: usize,
    label: RoiLabel,
    seed: u64,
) -> Result<Vec<Roi>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if size == 0 {
        return Err(Error::Argument("ROI size must be positive".into()));
    }
    let (mut max_r, mut max_c) = (0usize, 0usize);
    for &(r, c) in region {
        max_r = max_r.max(r);
        max_c = max_c.max(c);
    }
    let (rows, cols) = (max_r + 1, max_c + 1);
    let mut member = vec![false; rows * cols];
    for &(r, c) in region {
        member[r * cols + c] = true;
    }
    // Prefix sums over the membership mask to test block containment.
    let mut prefix = vec![0u32; (rows + 1) * (cols + 1)];
    for r in 0..rows {
        for c in 0..cols {
            prefix[(r + 1) * (cols + 1) + (c + 1)] = prefix[r * (cols + 1) + (c + 1)]
                + prefix[(r + 1) * (cols + 1) + c]
                - prefix[r * (cols + 1) + c]
                + member[r * cols + c] as u32;
        }
    }
    let block_sum = |r: usize, c: usize| -> u32 {
        // Grouped so the unsigned arithmetic never dips below zero.
        (prefix[(r + size) * (cols + 1) + (c + size)] + prefix[r * (cols + 1) + c])
            - (prefix[r * (cols + 1) + (c + size)] + prefix[(r + size) * (cols + 1) + c])
    };
    let mut anchors = Vec::new();
    if rows >= size && cols >= size {
        for r in 0..=(rows - size) {
            for c in 0..=(cols - size) {
                if block_sum(r, c) == (size * size) as u32 {
                    anchors.push((r, c));
                }
            }
        }
    }
    if anchors.len() < count {
        return Err(Error::Sampling(format!(
            "region admits {} placements of {size}x{size} ROIs, need {count}",
            anchors.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    anchors.shuffle(&mut rng);
    Ok(anchors
        .into_iter()
        .take(count)
        .map(|(r, c)| Roi::new(r, c, size, size, label))
        .collect())
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// One metric value for one image variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    /// Which rendition was measured: "noisy", "processed", "reference", ...
    pub variant: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Per-image metric rows plus the provenance of any normalization applied.
/// Aggregates are always recomputed from the rows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub normalization: Option<String>,
}

impl MetricReport {
    pub fn push(&mut self, id: &str, variant: &str, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            id: id.into(),
            variant: variant.into(),
            metric: metric.into(),
            value,
        });
    }

    /// Mean and sample standard deviation per (variant, metric), over finite
    /// values only; rows are consumed in sorted-id order so aggregation is
    /// deterministic.
    pub fn aggregate(&self) -> BTreeMap<(String, String), MeanStd> {
        let mut buckets: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        let mut rows: Vec<&MetricRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| (&a.id, &a.variant, &a.metric).cmp(&(&b.id, &b.variant, &b.metric)));
        for row in rows {
            if row.value.is_finite() {
                buckets
                    .entry((row.variant.clone(), row.metric.clone()))
                    .or_default()
                    .push(row.value);
            }
        }
        buckets
            .into_iter()
            .map(|(key, values)| {
                let n = values.len() as f64;
                let mean = values.iter().sum::<f64>() / n;
                let std = if values.len() > 1 {
                    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                (key, MeanStd { mean, std, count: values.len() })
            })
            .collect()
    }

    /// Mean of one (variant, metric) pair, when present.
    pub fn mean_of(&self, variant: &str, metric: &str) -> Option<f64> {
        self.aggregate()
            .get(&(variant.to_string(), metric.to_string()))
            .map(|m| m.mean)
    }

    /// CSV with one row per image per metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,variant,metric,value\n");
        let mut rows: Vec<&MetricRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| (&a.id, &a.variant, &a.metric).cmp(&(&b.id, &b.variant, &b.metric)));
        for row in rows {
            out.push_str(&format!("{},{},{},{}\n", row.id, row.variant, row.metric, row.value));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<MetricReport> {
        let mut report = MetricReport::default();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::Format(format!("bad metric CSV line {}: {line}", i + 1)));
            }
            let value = match parts[3] {
                "inf" => f64::INFINITY,
                "-inf" => f64::NEG_INFINITY,
                v => v
                    .parse()
                    .map_err(|_| Error::Format(format!("bad metric value on line {}", i + 1)))?,
            };
            report.push(parts[0], parts[1], parts[2], value);
        }
        Ok(report)
    }

    /// JSON summary: mean ± std per (variant, metric).
    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Entry {
            variant: String,
            metric: String,
            mean: f64,
            std: f64,
            count: usize,
        }
        let entries: Vec<Entry> = self
            .aggregate()
            .into_iter()
            .map(|((variant, metric), m)| Entry {
                variant,
                metric,
                mean: m.mean,
                std: m.std,
                count: m.count,
            })
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({
            "normalization": self.normalization,
            "metrics": entries,
        }))
        .expect("summary encode")
    }
}

fn is_noise_metric(name: &str) -> bool {
    name == "agm" || name == "ssim" || name.starts_with("psnr") || name.starts_with("cnr")
}

/// Divides each noise-removal metric by its multi-frame counterpart (matched
/// on image id and metric name); shadow metrics pass through unchanged.
pub fn normalize_report(report: &MetricReport, multiframe: &MetricReport) -> Result<MetricReport> {
    let mut reference: BTreeMap<(String, String), f64> = BTreeMap::new();
    for row in &multiframe.rows {
        reference.insert((row.id.clone(), row.metric.clone()), row.value);
    }
    let mut out = MetricReport {
        rows: Vec::with_capacity(report.rows.len()),
        normalization: Some("multiframe".into()),
    };
    for row in &report.rows {
        let mut row = row.clone();
        if is_noise_metric(&row.metric) {
            let key = (row.id.clone(), row.metric.clone());
            let mf = reference.get(&key).ok_or_else(|| {
                Error::Argument(format!(
                    "no multiframe counterpart for image {} metric {}",
                    row.id, row.metric
                ))
            })?;
            row.value = if mf.is_finite() && *mf != 0.0 && row.value.is_finite() {
                row.value / mf
            } else {
                f64::NAN
            };
        }
        out.rows.push(row);
    }
    Ok(out)
}

//! Synthetic layered-retina phantoms with exact vessel-shadow ground truth.
//!
//! A phantom is a stack of smooth tissue interfaces with per-layer base
//! intensities, low-amplitude band-limited texture, and a set of vertical
//! vessel shadows whose attenuation is known exactly. Phantoms stand in for
//! clinical scans everywhere a ground-truth mask or layer geometry is needed.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bscan::{BScan, ImagePair, ScanKind, ShadowMask};
use crate::error::{Error, Result};

/// A vertical vessel: its shadow occupies columns `center - half_width ..=
/// center + half_width` below the first tissue interface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vessel {
    pub center: usize,
    pub half_width: usize,
    /// Multiplicative signal attenuation inside the shadow, in (0,1).
    pub attenuation: f32,
}

impl Vessel {
    pub fn columns(&self) -> std::ops::RangeInclusive<usize> {
        self.center.saturating_sub(self.half_width)..=self.center + self.half_width
    }
}

/// How attenuation behaves with depth inside a shadow.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShadowDepthMode {
    /// One attenuation factor per vessel, uniform in depth. Keeps the
    /// intra-layer-contrast ground truth analytically checkable.
    #[default]
    Constant,
    /// Attenuation deepens linearly with normalized depth below the first
    /// interface: factor a * (1 - gain * t), clamped to stay positive.
    LinearDeepening { gain: f32 },
}

/// Full description of one synthetic scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    /// One smooth depth curve per tissue interface, sampled per column,
    /// strictly ordered top to bottom at every column.
    pub layer_boundaries: Vec<Vec<f32>>,
    /// Base intensity per layer; one more entry than there are boundaries.
    pub layer_intensities: Vec<f32>,
    /// Amplitude of the band-limited texture added to the base intensities.
    pub texture_amplitude: f32,
    pub vessels: Vec<Vessel>,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::Argument(format!(
                "phantom dims {}x{} below the 32x32 scan minimum",
                self.height, self.width
            )));
        }
        if self.layer_intensities.len() != self.layer_boundaries.len() + 1 {
            return Err(Error::Argument(format!(
                "expected {} layer intensities for {} boundaries, got {}",
                self.layer_boundaries.len() + 1,
                self.layer_boundaries.len(),
                self.layer_intensities.len()
            )));
        }
        for (i, curve) in self.layer_boundaries.iter().enumerate() {
            if curve.len() != self.width {
                return Err(Error::Argument(format!(
                    "boundary {i} has {} samples, expected width {}",
                    curve.len(),
                    self.width
                )));
            }
            if curve.iter().any(|d| !d.is_finite() || *d < 0.0 || *d > self.height as f32) {
                return Err(Error::Argument(format!("boundary {i} leaves the image")));
            }
        }
        for c in 0..self.width {
            for i in 1..self.layer_boundaries.len() {
                if self.layer_boundaries[i - 1][c] >= self.layer_boundaries[i][c] {
                    return Err(Error::Argument(format!(
                        "boundaries {} and {} are not strictly ordered at column {c}",
                        i - 1,
                        i
                    )));
                }
            }
        }
        if self.layer_intensities.iter().any(|v| *v < 0.0 || *v > 1.0) {
            return Err(Error::Argument("layer intensities must lie in [0,1]".into()));
        }
        if !(0.0..=0.2).contains(&self.texture_amplitude) {
            return Err(Error::Argument(format!(
                "texture amplitude {} outside [0, 0.2]",
                self.texture_amplitude
            )));
        }
        for v in &self.vessels {
            if v.attenuation <= 0.0 || v.attenuation >= 1.0 {
                return Err(Error::Argument(format!(
                    "vessel attenuation {} outside (0,1)",
                    v.attenuation
                )));
            }
            if v.center < v.half_width || v.center + v.half_width >= self.width {
                return Err(Error::Argument(format!(
                    "vessel interval around column {} leaves [0,{})",
                    v.center, self.width
                )));
            }
        }
        Ok(())
    }

    /// Number of layers (regions between and around the boundaries).
    pub fn layer_count(&self) -> usize {
        self.layer_boundaries.len() + 1
    }

    /// Layer index containing pixel (row, col): the number of boundaries at or
    /// above that row.
    pub fn layer_index_at(&self, row: usize, col: usize) -> usize {
        let r = row as f32;
        self.layer_boundaries
            .iter()
            .take_while(|curve| curve[col] <= r)
            .count()
    }

    /// Draws a randomized desk-scale retina layout: five interfaces, bright/
    /// dark alternating layers, one to three non-overlapping vessels.
    pub fn sample(height: usize, width: usize, rng: &mut impl Rng) -> PhantomSpec {
        let h = height as f32;
        let base_depths = [0.18, 0.33, 0.55, 0.70, 0.82];
        let base_intensities = [0.06, 0.72, 0.38, 0.65, 0.85, 0.48];
        let layer_boundaries = base_depths
            .iter()
            .map(|d| {
                let base = (d + rng.gen_range(-0.015..0.015)) * h;
                let amp = rng.gen_range(0.003..0.012) * h;
                let period = rng.gen_range(0.6..1.6) * width as f32;
                let phase = rng.gen_range(0.0..std::f32::consts::TAU);
                smooth_boundary(width, base, amp, period, phase)
            })
            .collect();
        let layer_intensities = base_intensities
            .iter()
            .map(|v| (v + rng.gen_range(-0.04..0.04f32)).clamp(0.02, 0.98))
            .collect();

        let vessel_count = rng.gen_range(1..=3);
        let mut vessels: Vec<Vessel> = Vec::new();
        let mut attempts = 0;
        while vessels.len() < vessel_count && attempts < 64 {
            attempts += 1;
            let half_width = rng.gen_range(2..=4usize);
            let center = rng.gen_range(half_width + 4..width - half_width - 4);
            let candidate = Vessel {
                center,
                half_width,
                attenuation: rng.gen_range(0.30..0.60),
            };
            let clear = vessels.iter().all(|v| {
                let gap = v.center.abs_diff(candidate.center);
                gap > v.half_width + candidate.half_width + 4
            });
            if clear {
                vessels.push(candidate);
            }
        }
        vessels.sort_by_key(|v| v.center);

        PhantomSpec {
            height,
            width,
            layer_boundaries,
            layer_intensities,
            texture_amplitude: 0.03,
            vessels,
        }
    }
}

/// Sinusoidal interface depth curve sampled per column.
pub fn smooth_boundary(width: usize, base: f32, amplitude: f32, period: f32, phase: f32) -> Vec<f32> {
    (0..width)
        .map(|c| base + amplitude * (std::f32::consts::TAU * c as f32 / period + phase).sin())
        .collect()
}

/// Renders the clean scan and its exact shadow mask. Deterministic for a fixed
/// (spec, seed); the seed drives only the texture field.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<ImagePair> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);

    let texture = band_limited_noise(h, w, seed);
    let mut pixels = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let base = spec.layer_intensities[spec.layer_index_at(r, c)];
            pixels[[r, c]] = (base + spec.texture_amplitude * texture[[r, c]]).clamp(0.0, 1.0);
        }
    }

    let mut mask = Array2::zeros((h, w));
    if let Some(first) = spec.layer_boundaries.first() {
        for vessel in &spec.vessels {
            for c in vessel.columns() {
                for r in 0..h {
                    if r as f32 >= first[c] {
                        mask[[r, c]] = 1.0;
                    }
                }
            }
        }
    }

    let id = format!("phantom_{seed:016x}");
    let clean = BScan::new(pixels, id, ScanKind::Clean)?;
    let mask = ShadowMask::new(mask, true)?;
    ImagePair::new(clean, mask, None)
}

/// Smooth unit-variance-ish noise: white Gaussian samples on a coarse grid,
/// bilinearly upsampled so shadowed and unshadowed regions share texture
/// statistics.
fn band_limited_noise(h: usize, w: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ch = (h / 8).max(2) + 1;
    let cw = (w / 8).max(2) + 1;
    let coarse = Array2::from_shape_fn((ch, cw), |_| {
        let v: f32 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
        v
    });
    Array2::from_shape_fn((h, w), |(r, c)| {
        let sy = r as f32 / h as f32 * (ch - 1) as f32;
        let sx = c as f32 / w as f32 * (cw - 1) as f32;
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(ch - 1);
        let x1 = (x0 + 1).min(cw - 1);
        let ty = sy - y0 as f32;
        let tx = sx - x0 as f32;
        let top = coarse[[y0, x0]] * (1.0 - tx) + coarse[[y0, x1]] * tx;
        let bot = coarse[[y1, x0]] * (1.0 - tx) + coarse[[y1, x1]] * tx;
        top * (1.0 - ty) + bot * ty
    })
}

/// Multiplies clean intensities by each vessel's attenuation inside the masked
/// columns; pixels outside the mask pass through unchanged. Overlapping
/// vessels compound multiplicatively.
pub fn apply_shadow(
    clean: &BScan,
    mask: &ShadowMask,
    vessels: &[Vessel],
    mode: ShadowDepthMode,
) -> Result<BScan> {
    if mask.values.dim() != clean.pixels.dim() {
        return Err(Error::Argument(format!(
            "mask shape {:?} does not match scan shape {:?}",
            mask.values.dim(),
            clean.pixels.dim()
        )));
    }
    if !mask.binary {
        return Err(Error::Argument("apply_shadow requires a binary mask".into()));
    }
    for v in vessels {
        if v.attenuation <= 0.0 || v.attenuation > 1.0 {
            return Err(Error::Argument(format!(
                "attenuation {} outside (0,1]",
                v.attenuation
            )));
        }
    }
    let (h, w) = clean.pixels.dim();

    // Per-column compound attenuation and first masked row (for depth mode).
    let mut column_factor = vec![1.0f32; w];
    for v in vessels {
        for c in v.columns() {
            if c < w {
                column_factor[c] *= v.attenuation;
            }
        }
    }
    let mut shadow_top = vec![h; w];
    for c in 0..w {
        for r in 0..h {
            if mask.values[[r, c]] == 1.0 {
                shadow_top[c] = r;
                break;
            }
        }
    }

    let mut pixels = clean.pixels.clone();
    for c in 0..w {
        if column_factor[c] == 1.0 {
            continue;
        }
        for r in 0..h {
            if mask.values[[r, c]] == 1.0 {
                let a = match mode {
                    ShadowDepthMode::Constant => column_factor[c],
                    ShadowDepthMode::LinearDeepening { gain } => {
                        let span = (h - 1 - shadow_top[c]).max(1) as f32;
                        let t = (r - shadow_top[c]) as f32 / span;
                        (column_factor[c] * (1.0 - gain * t)).clamp(0.0, 1.0)
                    }
                };
                pixels[[r, c]] *= a;
            }
        }
    }
    Ok(BScan {
        pixels,
        id: clean.id.clone(),
        kind: clean.kind,
    })
}

/// Pixel coordinates of one layer: everything between boundaries
/// `layer_index - 1` and `layer_index` (image edges at the extremes).
pub fn layer_region(spec: &PhantomSpec, layer_index: usize) -> Result<Vec<(usize, usize)>> {
    if layer_index > spec.layer_boundaries.len() {
        return Err(Error::Argument(format!(
            "layer index {layer_index} out of range, phantom has {} layers",
            spec.layer_count()
        )));
    }
    let mut pixels = Vec::new();
    for c in 0..spec.width {
        let top = if layer_index == 0 {
            0.0
        } else {
            spec.layer_boundaries[layer_index - 1][c]
        };
        let bottom = if layer_index == spec.layer_boundaries.len() {
            spec.height as f32
        } else {
            spec.layer_boundaries[layer_index][c]
        };
        for r in 0..spec.height {
            let rf = r as f32;
            if rf >= top && rf < bottom {
                pixels.push((r, c));
            }
        }
    }
    Ok(pixels)
}

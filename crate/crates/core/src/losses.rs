//! Training losses: shadow score, perceptual content and style terms, their
//! weighted total, and the two-stage weight balancing procedure.
//!
//! Content compares feature maps tap-by-tap as a per-element mean of squared
//! differences. Style compares unnormalized channel Gram matrices under a
//! squared Frobenius distance; the small style weights absorb the Gram
//! magnitudes. The shadow term is the detector response on a processed image
//! normalized by the ground-truth mask mass, and enters the total unweighted.

use ndarray::{ArrayD, Ix3};

use crate::autodiff::{c, Real, Tape, Var};
use crate::bscan::{BScan, ShadowMask};
use crate::error::{Error, Result};

/// Per-extractor weights of the weighted total loss, in ensemble order
/// (efficientnet_b4, wide_resnet101_2, resnext101_32x8d).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// Content weights w.
    pub content: [f64; 3],
    /// Style weights k.
    pub style: [f64; 3],
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            content: [2.86, 4.0, 6.67],
            style: [6.67e-5, 1.8e-5, 2.1e-5],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.content.iter().chain(self.style.iter()).any(|w| *w <= 0.0 || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Detector response normalized by the ground-truth shadow mass:
/// sum(pred) / sum(gt).
pub fn shadow_loss(pred: &ShadowMask, gt: &ShadowMask) -> Result<f64> {
    if pred.values.dim() != gt.values.dim() {
        return Err(Error::Argument(format!(
            "prediction shape {:?} does not match ground truth {:?}",
            pred.values.dim(),
            gt.values.dim()
        )));
    }
    let gt_sum = gt.sum();
    if gt_sum == 0.0 {
        return Err(Error::DegenerateMask(
            "ground-truth mask is empty; image excluded from the shadow term".into(),
        ));
    }
    Ok(pred.sum() / gt_sum)
}

/// Zeroes the pixels under the ground-truth shadow mask so shadow removal
/// cannot leak into the content comparison.
pub fn mask_out_shadows(image: &BScan, gt: &ShadowMask) -> Result<BScan> {
    if gt.values.dim() != image.pixels.dim() {
        return Err(Error::Argument(format!(
            "mask shape {:?} does not match image {:?}",
            gt.values.dim(),
            image.pixels.dim()
        )));
    }
    if !gt.binary {
        return Err(Error::Argument("mask_out_shadows requires a binary mask".into()));
    }
    let pixels = ndarray::Zip::from(&image.pixels)
        .and(&gt.values)
        .map_collect(|&p, &m| if m == 1.0 { 0.0 } else { p });
    Ok(BScan { pixels, id: image.id.clone(), kind: image.kind })
}

/// Sum over taps of per-element mean squared feature differences.
pub fn content_loss(feats_d: &[ArrayD<f64>], feats_c: &[ArrayD<f64>]) -> Result<f64> {
    if feats_d.len() != feats_c.len() {
        return Err(Error::Argument(format!(
            "tap count mismatch: {} vs {}",
            feats_d.len(),
            feats_c.len()
        )));
    }
    let mut total = 0.0;
    for (d, cf) in feats_d.iter().zip(feats_c.iter()) {
        if d.shape() != cf.shape() {
            return Err(Error::Argument(format!(
                "tap shape mismatch: {:?} vs {:?}",
                d.shape(),
                cf.shape()
            )));
        }
        let n = d.len() as f64;
        let sq: f64 = d.iter().zip(cf.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        total += sq / n;
    }
    Ok(total)
}

/// Channel Gram matrix of a (C,H,W) feature map; no normalization.
pub fn gram(feature: &ArrayD<f64>) -> ndarray::Array2<f64> {
    let f = feature.view().into_dimensionality::<Ix3>().expect("gram input CHW");
    let (ch, h, w) = f.dim();
    let p = feature.to_shape((ch, h * w)).expect("gram reshape");
    let mut g = ndarray::Array2::<f64>::zeros((ch, ch));
    ndarray::linalg::general_mat_mul(1.0, &p, &p.t(), 0.0, &mut g);
    g
}

/// Sum over taps of squared Frobenius distances between Gram matrices.
pub fn style_loss(feats_d: &[ArrayD<f64>], feats_c: &[ArrayD<f64>]) -> Result<f64> {
    if feats_d.len() != feats_c.len() {
        return Err(Error::Argument(format!(
            "tap count mismatch: {} vs {}",
            feats_d.len(),
            feats_c.len()
        )));
    }
    let mut total = 0.0;
    for (d, cf) in feats_d.iter().zip(feats_c.iter()) {
        if d.shape() != cf.shape() {
            return Err(Error::Argument(format!(
                "tap shape mismatch: {:?} vs {:?}",
                d.shape(),
                cf.shape()
            )));
        }
        let gd = gram(d);
        let gc = gram(cf);
        total += gd
            .iter()
            .zip(gc.iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total)
}

/// Weighted total: sum_j (w_j content_j + k_j style_j) + shadow.
pub fn total_loss(
    content: &[f64],
    style: &[f64],
    shadow: f64,
    weights: &LossWeights,
) -> Result<f64> {
    if content.len() != weights.content.len() || style.len() != weights.style.len() {
        return Err(Error::Config(format!(
            "expected {} content and {} style terms, got {} and {}",
            weights.content.len(),
            weights.style.len(),
            content.len(),
            style.len()
        )));
    }
    let mut total = shadow;
    for j in 0..content.len() {
        total += weights.content[j] * content[j] + weights.style[j] * style[j];
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Tape-side terms used during training.
// ---------------------------------------------------------------------------

/// Content term for one tap pair on the tape: mean squared difference.
pub fn tape_content_term<F: Real>(tape: &mut Tape<F>, feat_d: Var, feat_c: Var) -> Var {
    let n = tape.value(feat_d).len();
    let diff = tape.sub(feat_d, feat_c);
    let sq = tape.mul(diff, diff);
    let s = tape.sum(sq);
    tape.scale(s, c::<F>(1.0 / n as f64))
}

/// Style term for one tap pair on the tape: squared Frobenius distance of
/// Gram matrices.
pub fn tape_style_term<F: Real>(tape: &mut Tape<F>, feat_d: Var, feat_c: Var) -> Var {
    let gd = tape.gram(feat_d);
    let gc = tape.gram(feat_c);
    let diff = tape.sub(gd, gc);
    let sq = tape.mul(diff, diff);
    tape.sum(sq)
}

/// Shadow term on the tape: sum of detector probabilities over the processed
/// image divided by the fixed ground-truth mask mass.
pub fn tape_shadow_term<F: Real>(tape: &mut Tape<F>, pred_probs: Var, gt_sum: f64) -> Var {
    debug_assert!(gt_sum > 0.0);
    let s = tape.sum(pred_probs);
    tape.scale(s, c::<F>(1.0 / gt_sum))
}

// ---------------------------------------------------------------------------
// Weight calibration arithmetic.
// ---------------------------------------------------------------------------

/// Stage 1: choose w_j so each weighted content stream matches the shadow
/// stream's running-mean magnitude.
pub fn balance_content_weights(content_means: &[f64; 3], shadow_mean: f64) -> Result<[f64; 3]> {
    if shadow_mean <= 0.0 || !shadow_mean.is_finite() {
        return Err(Error::Calibration(format!(
            "shadow loss stream has non-positive mean {shadow_mean}"
        )));
    }
    let mut w = [0.0; 3];
    for (j, &m) in content_means.iter().enumerate() {
        if m <= 0.0 || !m.is_finite() {
            return Err(Error::Calibration(format!(
                "content stream {j} has non-positive mean {m}"
            )));
        }
        w[j] = shadow_mean / m;
    }
    Ok(w)
}

/// Stage 2: choose k_j so each weighted style stream matches its weighted
/// content stream.
pub fn balance_style_weights(
    style_means: &[f64; 3],
    weighted_content_means: &[f64; 3],
) -> Result<[f64; 3]> {
    let mut k = [0.0; 3];
    for j in 0..3 {
        let s = style_means[j];
        let target = weighted_content_means[j];
        if s <= 0.0 || !s.is_finite() {
            return Err(Error::Calibration(format!(
                "style stream {j} has non-positive mean {s}"
            )));
        }
        if target <= 0.0 || !target.is_finite() {
            return Err(Error::Calibration(format!(
                "content target {j} has non-positive mean {target}"
            )));
        }
        k[j] = target / s;
    }
    Ok(k)
}

/// Windowed running mean used by the calibration stages.
#[derive(Debug, Clone)]
pub struct RunningMean {
    window: usize,
    values: std::collections::VecDeque<f64>,
}

impl RunningMean {
    pub fn new(window: usize) -> Self {
        RunningMean { window: window.max(1), values: std::collections::VecDeque::new() }
    }

    pub fn push(&mut self, value: f64) {
        if self.values.len() == self.window {
            self.values.pop_front();
        }
        self.values.push_back(value);
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

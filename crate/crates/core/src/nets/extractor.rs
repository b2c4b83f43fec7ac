//! Frozen perceptual feature extractors.
//!
//! Three extractors form the ensemble: two residual towers tapped after
//! blocks 2, 4, 6 and 8, and one plain tower tapped at its final convolution
//! only. Weights are immutable during all training. `frozen_random` fills the
//! same topology with seeded random weights so everything runs without
//! downloaded checkpoints; `imagenet_pretrained` loads exported blobs from a
//! weights directory and is the default for full-scale training.

use std::path::Path;

use ndarray::{Array1, Array4, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{c, Real, Tape, Var};
use crate::error::{Error, Result};

pub const EXTRACTOR_NAMES: [&str; 3] = ["efficientnet_b4", "wide_resnet101_2", "resnext101_32x8d"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsSource {
    /// Load exported parameter blobs from the configured weights directory.
    ImagenetPretrained,
    /// Seeded random weights in the same topology; for desk-scale runs.
    FrozenRandom,
}

/// One convolution stage of a tower.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub out_channels: usize,
    pub stride: usize,
    /// Residual stages add a (projected) identity path around two convs.
    pub residual: bool,
}

/// Declared layout of a feature extractor: topology, tap points, and the
/// input statistics the extractor expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractorSpec {
    pub name: String,
    pub weights_source: WeightsSource,
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    /// 1-indexed stages whose outputs are tapped.
    pub tap_points: Vec<usize>,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
    /// Input size the declared tap shapes refer to.
    pub reference_input: (usize, usize),
}

impl FeatureExtractorSpec {
    /// Spec for one of the three ensemble extractors; errors on unknown names.
    pub fn by_name(
        name: &str,
        weights_source: WeightsSource,
        reference_input: (usize, usize),
    ) -> Result<Self> {
        let residual_stages = |widths: [usize; 4]| -> Vec<StageSpec> {
            let mut stages = Vec::new();
            for (i, &wch) in widths.iter().enumerate() {
                // Two residual blocks per width; the first one downsamples.
                stages.push(StageSpec { out_channels: wch, stride: if i == 0 { 1 } else { 2 }, residual: true });
                stages.push(StageSpec { out_channels: wch, stride: 1, residual: true });
            }
            stages
        };
        let imagenet_mean = [0.485, 0.456, 0.406];
        let imagenet_std = [0.229, 0.224, 0.225];
        let (mean, std) = match weights_source {
            WeightsSource::ImagenetPretrained => (imagenet_mean, imagenet_std),
            WeightsSource::FrozenRandom => ([0.5; 3], [0.5; 3]),
        };
        let spec = match name {
            // Plain tower; the single tap is its final convolutional layer.
            "efficientnet_b4" => FeatureExtractorSpec {
                name: name.into(),
                weights_source,
                stem_channels: 8,
                stages: vec![
                    StageSpec { out_channels: 12, stride: 1, residual: false },
                    StageSpec { out_channels: 16, stride: 2, residual: false },
                    StageSpec { out_channels: 24, stride: 1, residual: false },
                    StageSpec { out_channels: 32, stride: 2, residual: false },
                ],
                tap_points: vec![4],
                norm_mean: mean,
                norm_std: std,
                reference_input,
            },
            "wide_resnet101_2" => FeatureExtractorSpec {
                name: name.into(),
                weights_source,
                stem_channels: 12,
                stages: residual_stages([12, 24, 48, 96]),
                tap_points: vec![2, 4, 6, 8],
                norm_mean: mean,
                norm_std: std,
                reference_input,
            },
            "resnext101_32x8d" => FeatureExtractorSpec {
                name: name.into(),
                weights_source,
                stem_channels: 8,
                stages: residual_stages([8, 16, 32, 64]),
                tap_points: vec![2, 4, 6, 8],
                norm_mean: mean,
                norm_std: std,
                reference_input,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown extractor '{other}'; known extractors: {EXTRACTOR_NAMES:?}"
                )))
            }
        };
        Ok(spec)
    }

    /// Declared (C, H, W) of each tap for the reference input size.
    pub fn tap_shapes(&self) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = self.reference_input;
        // Stem stride 2.
        h /= 2;
        w /= 2;
        let mut shapes = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            h /= stage.stride;
            w /= stage.stride;
            if self.tap_points.contains(&(i + 1)) {
                shapes.push((stage.out_channels, h, w));
            }
        }
        shapes
    }
}

/// An instantiated, frozen extractor.
#[derive(Clone)]
pub struct Extractor<F: Real> {
    pub spec: FeatureExtractorSpec,
    names: Vec<String>,
    params: Vec<ArrayD<F>>,
}

impl<F: Real> Extractor<F> {
    /// Builds the extractor, drawing seeded random weights (frozen_random) or
    /// loading exported blobs from `weights_dir` (imagenet_pretrained).
    pub fn build(spec: FeatureExtractorSpec, seed: u64, weights_dir: Option<&Path>) -> Result<Self> {
        let (names, mut params) = Self::init_random(&spec, seed);
        if spec.weights_source == WeightsSource::ImagenetPretrained {
            let dir = weights_dir.ok_or_else(|| pretrained_missing(&spec.name, None))?;
            let file = dir.join(format!("{}.bin", spec.name));
            if !file.is_file() {
                return Err(pretrained_missing(&spec.name, Some(&file)));
            }
            let blobs = crate::checkpoint::read_named_tensors::<F>(&file)?;
            for (name, param) in names.iter().zip(params.iter_mut()) {
                let loaded = blobs.get(name).ok_or_else(|| {
                    Error::Config(format!("weights file {} is missing tensor {name}", file.display()))
                })?;
                if loaded.shape() != param.shape() {
                    return Err(Error::Config(format!(
                        "tensor {name} in {} has shape {:?}, expected {:?}",
                        file.display(),
                        loaded.shape(),
                        param.shape()
                    )));
                }
                *param = loaded.clone();
            }
        }
        Ok(Extractor { spec, names, params })
    }

    fn init_random(spec: &FeatureExtractorSpec, seed: u64) -> (Vec<String>, Vec<ArrayD<F>>) {
        // Mix the name into the seed so the ensemble members differ even with
        // one global seed.
        let mut mixed = seed ^ 0xfeed_face_cafe_beef;
        for b in spec.name.as_bytes() {
            mixed = mixed.wrapping_mul(0x100_0000_01b3) ^ *b as u64;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mixed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        let push_conv = |name: String, co: usize, ci: usize, k: usize, rng: &mut ChaCha8Rng,
                             names: &mut Vec<String>, params: &mut Vec<ArrayD<F>>| {
            let std = (2.0 / (ci * k * k) as f64).sqrt();
            let w = Array4::from_shape_fn((co, ci, k, k), |_| {
                let g: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                c::<F>(g * std)
            });
            names.push(format!("{name}.weight"));
            params.push(w.into_dyn());
            names.push(format!("{name}.bias"));
            params.push(Array1::<F>::zeros(co).into_dyn());
        };

        push_conv("stem".into(), spec.stem_channels, 3, 3, &mut rng, &mut names, &mut params);
        let mut prev = spec.stem_channels;
        for (i, stage) in spec.stages.iter().enumerate() {
            push_conv(format!("stage{i}.a"), stage.out_channels, prev, 3, &mut rng, &mut names, &mut params);
            push_conv(
                format!("stage{i}.b"),
                stage.out_channels,
                stage.out_channels,
                3,
                &mut rng,
                &mut names,
                &mut params,
            );
            if stage.residual && (stage.out_channels != prev || stage.stride != 1) {
                push_conv(format!("stage{i}.proj"), stage.out_channels, prev, 1, &mut rng, &mut names, &mut params);
            }
            prev = stage.out_channels;
        }
        (names, params)
    }

    /// Replicates a (1,H,W) image to three channels and normalizes with the
    /// extractor's expected statistics.
    fn normalize_input(&self, tape: &mut Tape<F>, image: Var) -> Var {
        let mut channels = Vec::with_capacity(3);
        for ch in 0..3 {
            let std = self.spec.norm_std[ch];
            let mean = self.spec.norm_mean[ch];
            let scaled = tape.scale(image, c::<F>(1.0 / std));
            channels.push(tape.offset(scaled, c::<F>(-mean / std)));
        }
        let ab = tape.concat_c(channels[0], channels[1]);
        tape.concat_c(ab, channels[2])
    }

    /// Tape forward pass; returns one feature map per tap point, in tap
    /// order. Parameters enter the tape as frozen leaves, so gradients flow
    /// to `image` but never into the extractor.
    pub fn extract(&self, tape: &mut Tape<F>, image: Var) -> Vec<Var> {
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let mut pi = 0usize;
        let mut next = || {
            let pair = (vars[pi], vars[pi + 1]);
            pi += 2;
            pair
        };

        let x3 = self.normalize_input(tape, image);
        let (w, b) = next();
        let mut x = tape.conv2d(x3, w, b, 2);
        x = tape.relu(x);

        let mut prev_channels = self.spec.stem_channels;
        let mut taps = Vec::new();
        for (i, stage) in self.spec.stages.iter().enumerate() {
            let input = x;
            let (w, b) = next();
            x = tape.conv2d(x, w, b, stage.stride);
            x = tape.relu(x);
            let (w, b) = next();
            x = tape.conv2d(x, w, b, 1);
            if stage.residual {
                let identity = if stage.out_channels != prev_channels || stage.stride != 1 {
                    let (w, b) = next();
                    tape.conv2d(input, w, b, stage.stride)
                } else {
                    input
                };
                x = tape.add(x, identity);
            }
            x = tape.relu(x);
            if self.spec.tap_points.contains(&(i + 1)) {
                taps.push(x);
            }
            prev_channels = stage.out_channels;
        }
        debug_assert_eq!(pi, vars.len());
        taps
    }

    /// No-grad feature evaluation on a scratch tape.
    pub fn eval(&self, image: &ArrayD<F>) -> Vec<ArrayD<F>> {
        let mut tape = Tape::new();
        let input = tape.constant(image.clone());
        self.extract(&mut tape, input)
            .into_iter()
            .map(|v| tape.value(v).clone())
            .collect()
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.params.iter()).map(|(n, p)| (n, p))
    }
}

fn pretrained_missing(name: &str, path: Option<&Path>) -> Error {
    let location = path
        .map(|p| format!(" at {}", p.display()))
        .unwrap_or_else(|| " (no weights directory configured)".into());
    Error::Config(format!(
        "pretrained weights for extractor '{name}' not found{location}; \
         export them as named-tensor blobs into the extractors.weights_dir directory \
         (see README, 'Pretrained extractor weights'), or set \
         extractors.weights_source = \"frozen_random\""
    ))
}

/// The three-extractor ensemble plus its per-extractor loss weighting order.
pub struct ExtractorEnsemble<F: Real> {
    pub members: Vec<Extractor<F>>,
}

impl<F: Real> ExtractorEnsemble<F> {
    pub fn build(
        weights_source: WeightsSource,
        reference_input: (usize, usize),
        seed: u64,
        weights_dir: Option<&Path>,
    ) -> Result<Self> {
        let members = EXTRACTOR_NAMES
            .iter()
            .map(|name| {
                let spec = FeatureExtractorSpec::by_name(name, weights_source, reference_input)?;
                Extractor::build(spec, seed, weights_dir)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ExtractorEnsemble { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use ndarray::IxDyn;

    fn test_image(h: usize, w: usize) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(&[1, h, w]), |ix| {
            ((ix[1] * 13 + ix[2] * 7) % 50) as f64 / 50.0
        })
    }

    #[test]
    fn residual_extractors_tap_four_blocks() {
        for name in ["wide_resnet101_2", "resnext101_32x8d"] {
            let spec = FeatureExtractorSpec::by_name(name, WeightsSource::FrozenRandom, (64, 64)).unwrap();
            let ex = Extractor::<f64>::build(spec, 0, None).unwrap();
            let feats = ex.eval(&test_image(64, 64));
            assert_eq!(feats.len(), 4, "{name}");
        }
    }

    #[test]
    fn final_conv_extractor_taps_once() {
        let spec =
            FeatureExtractorSpec::by_name("efficientnet_b4", WeightsSource::FrozenRandom, (64, 64)).unwrap();
        let ex = Extractor::<f64>::build(spec, 0, None).unwrap();
        let feats = ex.eval(&test_image(64, 64));
        assert_eq!(feats.len(), 1);
    }

    #[test]
    fn tap_shapes_match_declaration() {
        for name in EXTRACTOR_NAMES {
            let spec = FeatureExtractorSpec::by_name(name, WeightsSource::FrozenRandom, (64, 64)).unwrap();
            let declared = spec.tap_shapes();
            let ex = Extractor::<f64>::build(spec, 0, None).unwrap();
            let feats = ex.eval(&test_image(64, 64));
            for (feat, decl) in feats.iter().zip(declared.iter()) {
                assert_eq!(feat.shape(), [decl.0, decl.1, decl.2], "{name}");
            }
        }
    }

    #[test]
    fn frozen_features_are_reproducible() {
        let spec =
            FeatureExtractorSpec::by_name("resnext101_32x8d", WeightsSource::FrozenRandom, (32, 32)).unwrap();
        let ex = Extractor::<f64>::build(spec, 9, None).unwrap();
        let img = test_image(32, 32);
        assert_eq!(ex.eval(&img), ex.eval(&img));
    }

    #[test]
    fn unknown_extractor_name_is_a_config_error() {
        match FeatureExtractorSpec::by_name("vgg19", WeightsSource::FrozenRandom, (64, 64)) {
            Err(Error::Config(msg)) => assert!(msg.contains("unknown extractor")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn pretrained_without_weights_names_the_fetch_step() {
        let spec =
            FeatureExtractorSpec::by_name("efficientnet_b4", WeightsSource::ImagenetPretrained, (64, 64))
                .unwrap();
        let dir = tempfile::tempdir().unwrap();
        match Extractor::<f64>::build(spec, 0, Some(dir.path())) {
            Err(Error::Config(msg)) => {
                assert!(msg.contains("README"), "{msg}");
                assert!(msg.contains("frozen_random"), "{msg}");
            }
            Err(other) => panic!("expected config error, got {other:?}"),
            Ok(_) => panic!("expected config error, got an extractor"),
        }
    }

    #[test]
    fn gradients_reach_image_but_not_extractor() {
        let spec =
            FeatureExtractorSpec::by_name("wide_resnet101_2", WeightsSource::FrozenRandom, (32, 32)).unwrap();
        let ex = Extractor::<f64>::build(spec, 4, None).unwrap();
        let mut tape = Tape::new();
        let image = tape.leaf(test_image(32, 32), true);
        let taps = ex.extract(&mut tape, image);
        // Sum of squares over every tap.
        let mut loss = None;
        for t in taps {
            let sq = tape.mul(t, t);
            let s = tape.sum(sq);
            loss = Some(match loss {
                None => s,
                Some(acc) => tape.add(acc, s),
            });
        }
        let grads = tape.backward(loss.unwrap());
        let g = grads.wrt(image).expect("image gradient");
        assert!(g.iter().any(|&v| v != 0.0));
    }
}

//! Network definitions: the shadow-detector / image-processor UNet topology
//! and the frozen perceptual feature extractors.

mod extractor;
mod unet;

pub use extractor::{Extractor, ExtractorEnsemble, FeatureExtractorSpec, WeightsSource};
pub use unet::{BoundUNet, FinalActivation, UNet, UNetConfig};

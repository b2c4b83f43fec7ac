//! Encoder-decoder UNet with skip connections.
//!
//! One topology serves both roles: per level two 3x3 stride-1 convolutions
//! with ReLU, 2x2 max pooling down the contracting tower, nearest-neighbor
//! upsampling plus convolution up the expanding tower, skip concatenation at
//! every level, and a 1x1 projection head. The detector finishes with a
//! sigmoid (per-pixel classifier); the processor finishes with whole-image
//! min-max scaling.

use ndarray::{Array1, Array2, Array4, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{c, Real, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalActivation {
    /// Per-pixel sigmoid; the detector head.
    Sigmoid,
    /// Whole-image (x-min)/(max-min); the processor head.
    MinMaxScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Number of downsamplings.
    pub depth: usize,
    pub base_channels: usize,
    /// Feature maps per encoder level; doubles at each level.
    pub channel_schedule: Vec<usize>,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub pool_kernel: usize,
    pub final_activation: FinalActivation,
}

impl UNetConfig {
    /// Full-scale layout: four downsamplings at 64/128/256/512 feature maps.
    pub fn full_scale(final_activation: FinalActivation) -> Self {
        Self::with_depth(4, 64, final_activation)
    }

    /// Reduced layout for CPU-scale experiments; same topology class.
    pub fn desk_scale(final_activation: FinalActivation) -> Self {
        Self::with_depth(3, 8, final_activation)
    }

    pub fn with_depth(depth: usize, base_channels: usize, final_activation: FinalActivation) -> Self {
        UNetConfig {
            in_channels: 1,
            depth,
            base_channels,
            channel_schedule: (0..depth).map(|i| base_channels << i).collect(),
            conv_kernel: 3,
            conv_stride: 1,
            pool_kernel: 2,
            final_activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.channel_schedule.len() != self.depth {
            return Err(Error::Config(format!(
                "channel schedule length {} must equal depth {}",
                self.channel_schedule.len(),
                self.depth
            )));
        }
        if self.channel_schedule[0] != self.base_channels {
            return Err(Error::Config("channel schedule must start at base_channels".into()));
        }
        for i in 1..self.depth {
            if self.channel_schedule[i] != 2 * self.channel_schedule[i - 1] {
                return Err(Error::Config(format!(
                    "channel schedule must double per level, got {:?}",
                    self.channel_schedule
                )));
            }
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config("conv kernel must be odd".into()));
        }
        if self.conv_stride != 1 || self.pool_kernel != 2 {
            return Err(Error::Config("supported layout is stride-1 convs with 2x2 pooling".into()));
        }
        Ok(())
    }

    /// Input dims must be divisible by this for the towers to line back up.
    pub fn down_factor(&self) -> usize {
        1 << self.depth
    }

    pub fn validate_input(&self, h: usize, w: usize) -> Result<()> {
        let f = self.down_factor();
        if h % f != 0 || w % f != 0 {
            return Err(Error::Argument(format!(
                "input {h}x{w} not divisible by {f}; resize to a multiple of {f} first"
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count for this layout.
    pub fn parameter_count(&self) -> usize {
        let k2 = self.conv_kernel * self.conv_kernel;
        let sched = &self.channel_schedule;
        let mut count = 0;
        let mut prev = self.in_channels;
        for &ch in sched {
            count += ch * (prev * k2 + 1); // encoder conv a
            count += ch * (ch * k2 + 1); // encoder conv b
            prev = ch;
        }
        let bottom = sched[self.depth - 1];
        count += 2 * (bottom * (bottom * k2 + 1)); // bottleneck pair
        for i in (0..self.depth).rev() {
            let ch = sched[i];
            let below = if i == self.depth - 1 { bottom } else { sched[i + 1] };
            count += ch * (below * k2 + 1); // post-upsample conv
            count += ch * (2 * ch * k2 + 1); // decoder conv a on the concat
            count += ch * (ch * k2 + 1); // decoder conv b
        }
        count += self.in_channels * (sched[0] + 1); // 1x1 head
        count
    }
}

/// Tape handles for one bound parameter set.
pub struct BoundUNet {
    pub vars: Vec<Var>,
}

/// A UNet instance: configuration plus named parameter tensors.
#[derive(Clone)]
pub struct UNet<F: Real> {
    pub config: UNetConfig,
    pub names: Vec<String>,
    pub params: Vec<ArrayD<F>>,
}

impl<F: Real> UNet<F> {
    /// Kaiming-initialized network, deterministic for a fixed seed.
    pub fn init(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        let k = config.conv_kernel;
        let sched = config.channel_schedule.clone();

        let push_conv = |name: String,
                             co: usize,
                             ci: usize,
                             kk: usize,
                             rng: &mut ChaCha8Rng,
                             names: &mut Vec<String>,
                             params: &mut Vec<ArrayD<F>>| {
            let fan_in = (ci * kk * kk) as f64;
            let std = (2.0 / fan_in).sqrt();
            let w = Array4::from_shape_fn((co, ci, kk, kk), |_| {
                let g: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                c::<F>(g * std)
            });
            names.push(format!("{name}.weight"));
            params.push(w.into_dyn());
            names.push(format!("{name}.bias"));
            params.push(Array1::<F>::zeros(co).into_dyn());
        };

        let mut prev = config.in_channels;
        for (i, &ch) in sched.iter().enumerate() {
            push_conv(format!("enc{i}.a"), ch, prev, k, &mut rng, &mut names, &mut params);
            push_conv(format!("enc{i}.b"), ch, ch, k, &mut rng, &mut names, &mut params);
            prev = ch;
        }
        let bottom = sched[config.depth - 1];
        push_conv("bottleneck.a".into(), bottom, bottom, k, &mut rng, &mut names, &mut params);
        push_conv("bottleneck.b".into(), bottom, bottom, k, &mut rng, &mut names, &mut params);
        for i in (0..config.depth).rev() {
            let ch = sched[i];
            let below = if i == config.depth - 1 { bottom } else { sched[i + 1] };
            push_conv(format!("dec{i}.up"), ch, below, k, &mut rng, &mut names, &mut params);
            push_conv(format!("dec{i}.a"), ch, 2 * ch, k, &mut rng, &mut names, &mut params);
            push_conv(format!("dec{i}.b"), ch, ch, k, &mut rng, &mut names, &mut params);
        }
        push_conv("head".into(), config.in_channels, sched[0], 1, &mut rng, &mut names, &mut params);

        Ok(UNet { config, names, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Inserts the parameters into a tape as leaves.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> BoundUNet {
        BoundUNet {
            vars: self.params.iter().map(|p| tape.leaf(p.clone(), trainable)).collect(),
        }
    }

    /// Pre-activation forward pass on a (1,H,W) input. `ablate_skip` zeroes
    /// one skip connection (diagnostics only).
    pub fn forward_logits(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundUNet,
        input: Var,
        ablate_skip: Option<usize>,
    ) -> Var {
        let depth = self.config.depth;
        let mut pi = 0usize;
        let mut next = || {
            let pair = (bound.vars[pi], bound.vars[pi + 1]);
            pi += 2;
            pair
        };

        let mut skips = Vec::with_capacity(depth);
        let mut x = input;
        for _ in 0..depth {
            let (w, b) = next();
            x = tape.conv2d(x, w, b, 1);
            x = tape.relu(x);
            let (w, b) = next();
            x = tape.conv2d(x, w, b, 1);
            x = tape.relu(x);
            skips.push(x);
            x = tape.max_pool2(x);
        }
        let (w, b) = next();
        x = tape.conv2d(x, w, b, 1);
        x = tape.relu(x);
        let (w, b) = next();
        x = tape.conv2d(x, w, b, 1);
        x = tape.relu(x);

        for i in (0..depth).rev() {
            x = tape.upsample2(x);
            let (w, b) = next();
            x = tape.conv2d(x, w, b, 1);
            x = tape.relu(x);
            let mut skip = skips[i];
            if ablate_skip == Some(i) {
                skip = tape.scale(skip, F::zero());
            }
            x = tape.concat_c(x, skip);
            let (w, b) = next();
            x = tape.conv2d(x, w, b, 1);
            x = tape.relu(x);
            let (w, b) = next();
            x = tape.conv2d(x, w, b, 1);
            x = tape.relu(x);
        }
        let (w, b) = next();
        debug_assert_eq!(pi, bound.vars.len());
        tape.conv2d(x, w, b, 1)
    }

    /// Applies the configured head activation to forward logits.
    pub fn apply_final(&self, tape: &mut Tape<F>, logits: Var) -> Var {
        match self.config.final_activation {
            FinalActivation::Sigmoid => tape.sigmoid(logits),
            FinalActivation::MinMaxScale => tape.min_max_span(logits),
        }
    }

    /// No-grad forward on a bare image, returning the activated (H,W) output.
    pub fn infer(&self, image: &Array2<F>) -> Result<Array2<F>> {
        let (h, w) = image.dim();
        self.config.validate_input(h, w)?;
        let mut tape = Tape::new();
        let input = tape.constant(
            image
                .clone()
                .into_shape_with_order((1, h, w))
                .expect("input reshape")
                .into_dyn(),
        );
        let bound = self.bind(&mut tape, false);
        let logits = self.forward_logits(&mut tape, &bound, input, None);
        let out = self.apply_final(&mut tape, logits);
        let out = tape.value(out);
        Ok(out
            .to_shape((h, w))
            .expect("output reshape")
            .to_owned())
    }
}

use std::ops::Range;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;
pub const PADDING: usize = 1;
pub const CONV_LAYERS: usize = 3;

/// Prior foreground probability used to initialize the class-logit biases.
const PRIOR_PROB: f64 = 0.01;

/// Three stride-2 3x3 conv + ReLU layers followed by a 1x1 head that predicts
/// `num_classes` logits and 4 box offsets per feature cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyDetArch {
    pub input_size: usize,
    pub in_channels: usize,
    /// Output channels of the three conv layers.
    pub channels: [usize; CONV_LAYERS],
    pub num_classes: usize,
}

/// Where one layer's weights and biases live in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlot {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

impl LayerSlot {
    /// Elements per output channel in the weight matrix (`in * k * k`).
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub convs: Vec<LayerSlot>,
    pub head: LayerSlot,
    pub total: usize,
}

impl ToyDetArch {
    /// 64x64 RGB input, 3 -> 16 -> 32 -> 64 channels, 3 classes.
    pub fn desk(input_size: usize) -> Self {
        Self {
            input_size,
            in_channels: 3,
            channels: [16, 32, 64],
            num_classes: 3,
        }
    }

    /// A sub-500-parameter variant for finite-difference checks.
    pub fn tiny(input_size: usize) -> Self {
        Self {
            input_size,
            in_channels: 3,
            channels: [4, 4, 4],
            num_classes: 3,
        }
    }

    pub fn total_stride(&self) -> usize {
        STRIDE.pow(CONV_LAYERS as u32)
    }

    pub fn feature_side(&self) -> usize {
        self.input_size / self.total_stride()
    }

    pub fn feature_channels(&self) -> usize {
        self.channels[CONV_LAYERS - 1]
    }

    pub fn head_outputs(&self) -> usize {
        self.num_classes + 4
    }

    pub fn arch_id(&self) -> String {
        format!(
            "toydet-in{}x{}-c{}-{}-{}-{}-k{}",
            self.input_size,
            self.input_size,
            self.in_channels,
            self.channels[0],
            self.channels[1],
            self.channels[2],
            self.num_classes
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels.contains(&0) || self.num_classes == 0 {
            return Err(Error::invalid("channel and class counts must be positive"));
        }
        let s = self.total_stride();
        if self.input_size == 0 || !self.input_size.is_multiple_of(s) {
            return Err(Error::invalid(format!(
                "input size {} is not a positive multiple of the total stride {s}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Checks that both the image and the feature map split into `tiles_per_axis` tiles.
    pub fn check_tiles(&self, tiles_per_axis: usize) -> Result<()> {
        if tiles_per_axis == 0 {
            return Err(Error::invalid("tiles_per_axis must be positive"));
        }
        if !self.feature_side().is_multiple_of(tiles_per_axis) {
            return Err(Error::shape(format!(
                "feature side {} (input {} / stride {}) is not divisible by tiles_per_axis {tiles_per_axis}",
                self.feature_side(),
                self.input_size,
                self.total_stride()
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        let mut offset = 0;
        let mut slot = |cin: usize, cout: usize, k: usize| {
            let w = offset..offset + cout * cin * k * k;
            offset = w.end;
            let b = offset..offset + cout;
            offset = b.end;
            LayerSlot {
                in_channels: cin,
                out_channels: cout,
                kernel: k,
                weight: w,
                bias: b,
            }
        };
        let mut convs = Vec::with_capacity(CONV_LAYERS);
        let mut cin = self.in_channels;
        for &cout in &self.channels {
            convs.push(slot(cin, cout, KERNEL));
            cin = cout;
        }
        let head = slot(cin, self.head_outputs(), 1);
        ParamLayout {
            convs,
            head,
            total: offset,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    /// He-normal conv weights, small head weights, class biases at the foreground prior.
    pub fn init_params(&self, rng: &mut Rng) -> Vec<f32> {
        let layout = self.layout();
        let mut p = vec![0.0f32; layout.total];
        for slot in &layout.convs {
            let std = (2.0 / slot.fan_in() as f64).sqrt();
            for v in &mut p[slot.weight.clone()] {
                *v = (std * rng.sample::<f64, _>(StandardNormal)) as f32;
            }
        }
        for v in &mut p[layout.head.weight.clone()] {
            *v = (0.01 * rng.sample::<f64, _>(StandardNormal)) as f32;
        }
        let prior_bias = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln() as f32;
        let head_bias = layout.head.bias.clone();
        for v in &mut p[head_bias.start..head_bias.start + self.num_classes] {
            *v = prior_bias;
        }
        p
    }
}

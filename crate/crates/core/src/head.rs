//! Age estimation head: concatenate low-level features with the FPA output,
//! reduce with a 1×1 convolution, run four pre-activation residual blocks,
//! global-average-pool, and map to `K` logits followed by a softmax.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::AgeDistribution;
use crate::error::{Error, Result};
use crate::nn::{
    relu, relu_backward, softmax, Conv3x3, Dense, FeatureMap, Norm, NormCache, Parameters, Slot,
    SlotMut,
};

pub const NUM_RES_BLOCKS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeHeadConfig {
    pub low_channels: usize,
    /// Width of the FPA output, `C·⌊high / C⌋`.
    pub attended_channels: usize,
    /// Trunk width after the fusion convolution.
    pub width: usize,
    pub num_classes: usize,
}

impl AgeHeadConfig {
    pub fn new(low_channels: usize, attended_channels: usize, num_classes: usize) -> Self {
        Self {
            low_channels,
            attended_channels,
            width: 256,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.low_channels + self.attended_channels == 0 || self.width == 0 || self.num_classes < 2 {
            return Err(Error::Config(format!("invalid head configuration {self:?}")));
        }
        Ok(())
    }
}

/// `x + conv2(relu(norm2(conv1(relu(norm1(x))))))`, stride 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResBlock {
    pub norm1: Norm,
    pub conv1: Conv3x3,
    pub norm2: Norm,
    pub conv2: Conv3x3,
}

impl ResBlock {
    fn zeros(width: usize) -> Self {
        Self {
            norm1: Norm::zeros(width),
            conv1: Conv3x3::zeros(width, width),
            norm2: Norm::zeros(width),
            conv2: Conv3x3::zeros(width, width),
        }
    }

    fn init<R: Rng>(width: usize, rng: &mut R) -> Self {
        Self {
            norm1: Norm::new(width),
            conv1: Conv3x3::init_uniform(rng, width, width),
            norm2: Norm::new(width),
            conv2: Conv3x3::init_uniform(rng, width, width),
        }
    }
}

struct ResCache {
    input: FeatureMap,
    norm1: NormCache,
    pre1: Array2<f64>,
    cols1: Array2<f64>,
    norm2: NormCache,
    pre2: Array2<f64>,
    cols2: Array2<f64>,
}

impl ResBlock {
    fn forward(&self, x: &FeatureMap) -> (FeatureMap, ResCache) {
        let (n1, norm1) = self.norm1.forward(&x.data);
        let a1 = FeatureMap {
            height: x.height,
            width: x.width,
            data: relu(&n1),
        };
        let (c1, cols1) = self.conv1.forward(&a1);
        let (n2, norm2) = self.norm2.forward(&c1.data);
        let a2 = FeatureMap {
            height: x.height,
            width: x.width,
            data: relu(&n2),
        };
        let (c2, cols2) = self.conv2.forward(&a2);
        let out = FeatureMap {
            height: x.height,
            width: x.width,
            data: &x.data + &c2.data,
        };
        (
            out,
            ResCache {
                input: x.clone(),
                norm1,
                pre1: n1,
                cols1,
                norm2,
                pre2: n2,
                cols2,
            },
        )
    }

    fn backward(&self, cache: &ResCache, dy: &Array2<f64>, grad: &mut ResBlock) -> Array2<f64> {
        let (h, w) = (cache.input.height, cache.input.width);
        let d_a2 = self.conv2.backward(&cache.cols2, h, w, dy, &mut grad.conv2);
        let d_n2 = relu_backward(&cache.pre2, &d_a2);
        let d_c1 = self.norm2.backward(&cache.norm2, &d_n2, &mut grad.norm2);
        let d_a1 = self.conv1.backward(&cache.cols1, h, w, &d_c1, &mut grad.conv1);
        let d_n1 = relu_backward(&cache.pre1, &d_a1);
        let d_x = self.norm1.backward(&cache.norm1, &d_n1, &mut grad.norm1);
        d_x + dy
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeHeadParams {
    pub config: AgeHeadConfig,
    /// `low + attended → width`
    pub fuse_conv: Dense,
    pub res_blocks: Vec<ResBlock>,
    /// `width → K`
    pub fc: Dense,
}

impl AgeHeadParams {
    pub fn zeros(config: AgeHeadConfig) -> Self {
        Self {
            fuse_conv: Dense::zeros(config.low_channels + config.attended_channels, config.width),
            res_blocks: (0..NUM_RES_BLOCKS).map(|_| ResBlock::zeros(config.width)).collect(),
            fc: Dense::zeros(config.width, config.num_classes),
            config,
        }
    }

    pub fn init<R: Rng>(config: AgeHeadConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            fuse_conv: Dense::init_uniform(
                rng,
                config.low_channels + config.attended_channels,
                config.width,
            ),
            res_blocks: (0..NUM_RES_BLOCKS)
                .map(|_| ResBlock::init(config.width, rng))
                .collect(),
            fc: Dense::init_uniform(rng, config.width, config.num_classes),
            config,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.res_blocks.len() != NUM_RES_BLOCKS {
            return Err(Error::Config(format!(
                "head must have {NUM_RES_BLOCKS} residual blocks, found {}",
                self.res_blocks.len()
            )));
        }
        if self.fc.outputs() != self.config.num_classes {
            return Err(Error::Config(format!(
                "fc width {} does not match K = {}",
                self.fc.outputs(),
                self.config.num_classes
            )));
        }
        Ok(())
    }
}

impl Parameters for AgeHeadParams {
    fn slots(&self) -> Vec<Slot<'_>> {
        let mut out = Vec::new();
        self.fuse_conv.push_slots("head.fuse_conv.", &mut out);
        for (i, b) in self.res_blocks.iter().enumerate() {
            b.norm1.push_slots(&format!("head.res{i}.norm1."), &mut out);
            b.conv1.push_slots(&format!("head.res{i}.conv1."), &mut out);
            b.norm2.push_slots(&format!("head.res{i}.norm2."), &mut out);
            b.conv2.push_slots(&format!("head.res{i}.conv2."), &mut out);
        }
        self.fc.push_slots("head.fc.", &mut out);
        out
    }

    fn slots_mut(&mut self) -> Vec<SlotMut<'_>> {
        let mut out = Vec::new();
        self.fuse_conv.push_slots_mut("head.fuse_conv.", &mut out);
        for (i, b) in self.res_blocks.iter_mut().enumerate() {
            b.norm1.push_slots_mut(&format!("head.res{i}.norm1."), &mut out);
            b.conv1.push_slots_mut(&format!("head.res{i}.conv1."), &mut out);
            b.norm2.push_slots_mut(&format!("head.res{i}.norm2."), &mut out);
            b.conv2.push_slots_mut(&format!("head.res{i}.conv2."), &mut out);
        }
        self.fc.push_slots_mut("head.fc.", &mut out);
        out
    }
}

pub struct HeadCache {
    concat: Array2<f64>,
    height: usize,
    width: usize,
    blocks: Vec<ResCache>,
    pooled: Array1<f64>,
    pub probs: Array1<f64>,
}

pub fn head_forward(
    low: &FeatureMap,
    attended: &FeatureMap,
    params: &AgeHeadParams,
) -> Result<(AgeDistribution, HeadCache)> {
    let cfg = &params.config;
    if (low.height, low.width) != (attended.height, attended.width) {
        return Err(Error::Shape {
            context: "head inputs",
            expected: format!("attended features at {}x{}", low.height, low.width),
            actual: format!("{}x{}", attended.height, attended.width),
        });
    }
    if low.channels() != cfg.low_channels || attended.channels() != cfg.attended_channels {
        return Err(Error::Shape {
            context: "head input channels",
            expected: format!("{} + {}", cfg.low_channels, cfg.attended_channels),
            actual: format!("{} + {}", low.channels(), attended.channels()),
        });
    }
    let concat = concatenate(Axis(1), &[low.data.view(), attended.data.view()])
        .expect("row counts match");
    let mut x = FeatureMap {
        height: low.height,
        width: low.width,
        data: params.fuse_conv.forward(concat.view()),
    };
    let mut blocks = Vec::with_capacity(params.res_blocks.len());
    for block in &params.res_blocks {
        let (y, cache) = block.forward(&x);
        blocks.push(cache);
        x = y;
    }
    let pooled = x.data.mean_axis(Axis(0)).expect("non-empty map");
    let logits = params.fc.forward_vec(&pooled);
    let probs = softmax(&logits);
    Ok((
        AgeDistribution::from_normalized(probs.to_vec()),
        HeadCache {
            concat,
            height: low.height,
            width: low.width,
            blocks,
            pooled,
            probs,
        },
    ))
}

/// Backpropagates `d_logits` (gradient w.r.t. the pre-softmax logits) and
/// returns the gradient w.r.t. the attended (FPA output) features.
pub fn head_backward(
    params: &AgeHeadParams,
    cache: &HeadCache,
    d_logits: &Array1<f64>,
    grad: &mut AgeHeadParams,
) -> Array2<f64> {
    let d_pooled = params.fc.backward_vec(&cache.pooled, d_logits, &mut grad.fc);
    let pixels = cache.height * cache.width;
    let mut d_x = Array2::from_shape_fn((pixels, params.config.width), |(_, c)| {
        d_pooled[c] / pixels as f64
    });
    for (i, block) in params.res_blocks.iter().enumerate().rev() {
        d_x = block.backward(&cache.blocks[i], &d_x, &mut grad.res_blocks[i]);
    }
    let d_concat = params
        .fuse_conv
        .backward(cache.concat.view(), d_x.view(), &mut grad.fuse_conv);
    d_concat
        .slice(s![.., params.config.low_channels..])
        .to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_everything_gives_uniform() {
        let cfg = AgeHeadConfig {
            width: 8,
            ..AgeHeadConfig::new(4, 6, 10)
        };
        let params = AgeHeadParams::zeros(cfg);
        let low = FeatureMap::zeros(3, 3, 4);
        let att = FeatureMap::zeros(3, 3, 6);
        let (dist, _) = head_forward(&low, &att, &params).unwrap();
        assert!(dist.probs().iter().all(|&p| p == 0.1));
    }

    #[test]
    fn output_is_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = AgeHeadConfig {
            width: 6,
            ..AgeHeadConfig::new(3, 4, 7)
        };
        let params = AgeHeadParams::init(cfg, &mut rng).unwrap();
        params.validate().unwrap();
        let low = FeatureMap::new(2, 3, normal(&mut rng, 6, 3, 1.0)).unwrap();
        let att = FeatureMap::new(2, 3, normal(&mut rng, 6, 4, 1.0)).unwrap();
        let (dist, _) = head_forward(&low, &att, &params).unwrap();
        let sum: f64 = dist.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(dist.probs().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn rejects_spatial_mismatch() {
        let cfg = AgeHeadConfig {
            width: 4,
            ..AgeHeadConfig::new(2, 2, 3)
        };
        let params = AgeHeadParams::zeros(cfg);
        let err = head_forward(&FeatureMap::zeros(2, 2, 2), &FeatureMap::zeros(2, 3, 2), &params);
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn validate_checks_block_count_and_width() {
        let cfg = AgeHeadConfig {
            width: 4,
            ..AgeHeadConfig::new(2, 2, 3)
        };
        let mut params = AgeHeadParams::zeros(cfg);
        params.res_blocks.pop();
        assert!(params.validate().is_err());
        let mut params = AgeHeadParams::zeros(cfg);
        params.fc = Dense::zeros(4, 5);
        assert!(params.validate().is_err());
    }
}

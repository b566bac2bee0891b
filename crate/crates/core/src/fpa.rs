//! Face parsing attention.
//!
//! The high-level features go through a 1×1 convolution into `C` contiguous
//! groups of `g = ⌊channels / C⌋` channels, one group per face region. Each
//! group is gated by its region mask, and a squeeze-excitation style block
//! (average pool, FC, ReLU, FC, sigmoid) produces one attention weight per
//! region that rescales the whole group.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{normal, sigmoid, Dense, FeatureMap, Parameters, Slot, SlotMut};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FpaConfig {
    pub num_classes: usize,
    pub high_channels: usize,
    pub hidden: usize,
    /// Restrict the grouping convolution to per-group blocks of the input.
    pub block_diagonal: bool,
    /// Gate with the one-hot argmax of the masks instead of soft values.
    pub hard_masks: bool,
}

impl FpaConfig {
    pub fn new(num_classes: usize, high_channels: usize) -> Self {
        Self {
            num_classes,
            high_channels,
            hidden: 2 * num_classes,
            block_diagonal: false,
            hard_masks: false,
        }
    }

    pub fn group_width(&self) -> usize {
        self.high_channels / self.num_classes
    }

    pub fn grouped_channels(&self) -> usize {
        self.group_width() * self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.hidden == 0 || self.group_width() == 0 {
            return Err(Error::Config(format!(
                "FPA needs C >= 1, hidden >= 1 and at least C input channels \
                 (C = {}, channels = {}, hidden = {})",
                self.num_classes, self.high_channels, self.hidden
            )));
        }
        Ok(())
    }

    /// Input channel range feeding group `k` in block-diagonal mode.
    pub fn input_block(&self, k: usize) -> std::ops::Range<usize> {
        let c = self.num_classes;
        (k * self.high_channels / c)..((k + 1) * self.high_channels / c)
    }
}

impl Default for FpaConfig {
    fn default() -> Self {
        Self::new(11, 512)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpaParams {
    pub config: FpaConfig,
    /// `high_channels → C·g`
    pub group_conv: Dense,
    /// `C·g → hidden`
    pub attn_fc1: Dense,
    /// `hidden → C`
    pub attn_fc2: Dense,
}

impl FpaParams {
    pub fn zeros(config: FpaConfig) -> Self {
        let cg = config.grouped_channels();
        Self {
            group_conv: Dense::zeros(config.high_channels, cg),
            attn_fc1: Dense::zeros(cg, config.hidden),
            attn_fc2: Dense::zeros(config.hidden, config.num_classes),
            config,
        }
    }

    pub fn init<R: Rng>(config: FpaConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let cg = config.grouped_channels();
        let mut group_conv = if config.block_diagonal {
            let fan_in = config.high_channels.div_ceil(config.num_classes);
            Dense {
                weight: crate::nn::uniform_fan_in(rng, config.high_channels, cg, fan_in),
                bias: Array1::zeros(cg),
            }
        } else {
            Dense::init_uniform(rng, config.high_channels, cg)
        };
        if config.block_diagonal {
            group_conv.weight *= &block_mask(&config);
        }
        Ok(Self {
            group_conv,
            attn_fc1: Dense {
                weight: normal(rng, cg, config.hidden, 0.01),
                bias: Array1::zeros(config.hidden),
            },
            attn_fc2: Dense {
                weight: normal(rng, config.hidden, config.num_classes, 0.01),
                bias: Array1::zeros(config.num_classes),
            },
            config,
        })
    }

    /// Zeroes gradient entries outside the block structure, if any.
    pub fn constrain_gradient(&self, grad: &mut FpaParams) {
        if self.config.block_diagonal {
            grad.group_conv.weight *= &block_mask(&self.config);
        }
    }
}

/// 1 where input channel `i` may feed output channel `j` in block-diagonal mode.
pub fn block_mask(config: &FpaConfig) -> Array2<f64> {
    let g = config.group_width();
    let mut mask = Array2::zeros((config.high_channels, config.grouped_channels()));
    for k in 0..config.num_classes {
        mask.slice_mut(s![config.input_block(k), k * g..(k + 1) * g])
            .fill(1.0);
    }
    mask
}

impl Parameters for FpaParams {
    fn slots(&self) -> Vec<Slot<'_>> {
        let mut out = Vec::new();
        self.group_conv.push_slots("fpa.group_conv.", &mut out);
        self.attn_fc1.push_slots("fpa.attn_fc1.", &mut out);
        self.attn_fc2.push_slots("fpa.attn_fc2.", &mut out);
        out
    }

    fn slots_mut(&mut self) -> Vec<SlotMut<'_>> {
        let mut out = Vec::new();
        self.group_conv.push_slots_mut("fpa.group_conv.", &mut out);
        self.attn_fc1.push_slots_mut("fpa.attn_fc1.", &mut out);
        self.attn_fc2.push_slots_mut("fpa.attn_fc2.", &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpaActivations {
    /// Grouped features after the 1×1 convolution.
    pub grouped: FeatureMap,
    /// Mask-gated groups.
    pub gated: FeatureMap,
    /// One weight per region, each in (0, 1).
    pub attention: Array1<f64>,
    pub output: FeatureMap,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FpaCache {
    masks: Array2<f64>,
    pooled: Array1<f64>,
    hidden_pre: Array1<f64>,
    hidden: Array1<f64>,
}

fn check_inputs(high: &FeatureMap, masks: &FeatureMap, cfg: &FpaConfig) -> Result<()> {
    if high.channels() != cfg.high_channels {
        return Err(Error::Shape {
            context: "FPA high-level features",
            expected: format!("{} channels", cfg.high_channels),
            actual: format!("{} channels", high.channels()),
        });
    }
    if masks.channels() != cfg.num_classes {
        return Err(Error::Shape {
            context: "FPA masks",
            expected: format!("{} classes", cfg.num_classes),
            actual: format!("{} classes", masks.channels()),
        });
    }
    if (high.height, high.width) != (masks.height, masks.width) {
        return Err(Error::Shape {
            context: "FPA inputs",
            expected: format!("masks at {}x{}", high.height, high.width),
            actual: format!("{}x{}", masks.height, masks.width),
        });
    }
    Ok(())
}

fn effective_masks(masks: &FeatureMap, hard: bool) -> Array2<f64> {
    if !hard {
        return masks.data.clone();
    }
    let mut out = Array2::zeros(masks.data.raw_dim());
    for (p, row) in masks.data.rows().into_iter().enumerate() {
        let k = (0..row.len())
            .fold(0, |best, k| if row[k] > row[best] { k } else { best });
        out[[p, k]] = 1.0;
    }
    out
}

/// Broadcasts per-(pixel, class) scalars over each class's `g` channels.
fn expand_groups(per_class: &Array2<f64>, g: usize) -> Array2<f64> {
    let (n, c) = per_class.dim();
    Array2::from_shape_fn((n, c * g), |(p, ch)| per_class[[p, ch / g]])
}

pub fn fpa_forward(
    high: &FeatureMap,
    masks: &FeatureMap,
    params: &FpaParams,
) -> Result<(FpaActivations, FpaCache)> {
    let cfg = &params.config;
    check_inputs(high, masks, cfg)?;
    let g = cfg.group_width();
    let (h, w) = (high.height, high.width);

    let grouped = params.group_conv.forward(high.data.view());
    let m = effective_masks(masks, cfg.hard_masks);
    let gated = &grouped * &expand_groups(&m, g);
    let pooled = gated.mean_axis(Axis(0)).expect("non-empty map");
    let hidden_pre = params.attn_fc1.forward_vec(&pooled);
    let hidden = hidden_pre.mapv(|v| v.max(0.0));
    let logits = params.attn_fc2.forward_vec(&hidden);
    let attention = logits.mapv(sigmoid);
    let scale = Array1::from_shape_fn(cfg.grouped_channels(), |ch| attention[ch / g]);
    let output = &gated * &scale;

    Ok((
        FpaActivations {
            grouped: FeatureMap::new(h, w, grouped)?,
            gated: FeatureMap::new(h, w, gated)?,
            attention,
            output: FeatureMap::new(h, w, output)?,
        },
        FpaCache {
            masks: m,
            pooled,
            hidden_pre,
            hidden,
        },
    ))
}

/// Accumulates parameter gradients given `d_output = ∂loss/∂V`. The
/// backbone is frozen, so no input gradient is produced.
pub fn fpa_backward(
    high: &FeatureMap,
    params: &FpaParams,
    acts: &FpaActivations,
    cache: &FpaCache,
    d_output: &Array2<f64>,
    grad: &mut FpaParams,
) {
    let cfg = &params.config;
    let g = cfg.group_width();
    let c = cfg.num_classes;
    let pixels = high.pixels() as f64;

    let scale = Array1::from_shape_fn(cfg.grouped_channels(), |ch| acts.attention[ch / g]);
    let mut d_gated = d_output * &scale;

    let prod = (d_output * &acts.gated.data).sum_axis(Axis(0));
    let d_attention = Array1::from_shape_fn(c, |k| prod.slice(s![k * g..(k + 1) * g]).sum());
    let d_logits = &d_attention * &acts.attention.mapv(|a| a * (1.0 - a));
    let d_hidden = params
        .attn_fc2
        .backward_vec(&cache.hidden, &d_logits, &mut grad.attn_fc2);
    let mut d_hidden_pre = d_hidden;
    d_hidden_pre.zip_mut_with(&cache.hidden_pre, |d, &z| {
        if z <= 0.0 {
            *d = 0.0;
        }
    });
    let d_pooled = params
        .attn_fc1
        .backward_vec(&cache.pooled, &d_hidden_pre, &mut grad.attn_fc1);
    d_gated += &(d_pooled / pixels);

    let d_grouped = d_gated * &expand_groups(&cache.masks, g);
    params
        .group_conv
        .backward(high.data.view(), d_grouped.view(), &mut grad.group_conv);
    params.constrain_gradient(grad);
}

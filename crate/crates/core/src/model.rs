//! Trainable part of the network (FPA + head), checkpoints and inference.

use std::fs;
use std::path::Path;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BBox, Backbone, FeatureBundle, Image, ToyBackboneConfig};
use crate::codec::{AgeDistribution, LabelCodecConfig};
use crate::error::{io_err, Error, Result};
use crate::fpa::{fpa_backward, fpa_forward, FpaActivations, FpaCache, FpaConfig, FpaParams};
use crate::head::{head_backward, head_forward, AgeHeadConfig, AgeHeadParams, HeadCache};
use crate::loss::{logit_gradient, loss, LossConfig, LossValue};
use crate::nn::{Parameters, Slot, SlotMut};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeModel {
    pub fpa: FpaParams,
    pub head: AgeHeadParams,
}

pub struct ForwardPass {
    pub dist: AgeDistribution,
    pub fpa: FpaActivations,
    fpa_cache: FpaCache,
    head_cache: HeadCache,
}

impl ForwardPass {
    pub fn attention(&self) -> &Array1<f64> {
        &self.fpa.attention
    }
}

impl AgeModel {
    pub fn init(fpa: FpaConfig, head_width: usize, num_age_classes: usize, low_channels: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fpa = FpaParams::init(fpa, &mut rng)?;
        let head_cfg = AgeHeadConfig {
            width: head_width,
            ..AgeHeadConfig::new(low_channels, fpa.config.grouped_channels(), num_age_classes)
        };
        let head = AgeHeadParams::init(head_cfg, &mut rng)?;
        Ok(Self { fpa, head })
    }

    /// Sizes the model to a backbone's channel widths and class count.
    pub fn for_backbone(
        backbone: &dyn Backbone,
        codec: &LabelCodecConfig,
        head_width: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::init(
            FpaConfig::new(backbone.num_classes(), backbone.high_channels()),
            head_width,
            codec.num_classes,
            backbone.low_channels(),
            seed,
        )
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            fpa: FpaParams::zeros(self.fpa.config),
            head: AgeHeadParams::zeros(self.head.config),
        }
    }

    pub fn num_age_classes(&self) -> usize {
        self.head.config.num_classes
    }

    pub fn forward(&self, bundle: &FeatureBundle) -> Result<ForwardPass> {
        let (fpa, fpa_cache) = fpa_forward(&bundle.high, &bundle.masks, &self.fpa)?;
        let (dist, head_cache) = head_forward(&bundle.low, &fpa.output, &self.head)?;
        Ok(ForwardPass {
            dist,
            fpa,
            fpa_cache,
            head_cache,
        })
    }

    /// Runs forward and backward for one example, accumulating into `grad`.
    pub fn accumulate_gradient(
        &self,
        bundle: &FeatureBundle,
        target: &AgeDistribution,
        age: i64,
        loss_cfg: &LossConfig,
        grad: &mut AgeModel,
    ) -> Result<LossValue> {
        let pass = self.forward(bundle)?;
        let value = loss(&pass.dist, target, age, loss_cfg)?;
        let d_logits = logit_gradient(pass.dist.probs(), target.probs(), age, loss_cfg);
        let d_attended = head_backward(&self.head, &pass.head_cache, &d_logits, &mut grad.head);
        fpa_backward(
            &bundle.high,
            &self.fpa,
            &pass.fpa,
            &pass.fpa_cache,
            &d_attended,
            &mut grad.fpa,
        );
        Ok(value)
    }

    pub fn check_backbone(&self, backbone: &dyn Backbone) -> Result<()> {
        let cfg = &self.fpa.config;
        if backbone.num_classes() != cfg.num_classes
            || backbone.high_channels() != cfg.high_channels
            || backbone.low_channels() != self.head.config.low_channels
        {
            return Err(Error::Config(format!(
                "model expects C={} high={} low={}, backbone {} provides C={} high={} low={}",
                cfg.num_classes,
                cfg.high_channels,
                self.head.config.low_channels,
                backbone.id(),
                backbone.num_classes(),
                backbone.high_channels(),
                backbone.low_channels()
            )));
        }
        Ok(())
    }
}

impl Parameters for AgeModel {
    fn slots(&self) -> Vec<Slot<'_>> {
        let mut s = self.fpa.slots();
        s.extend(self.head.slots());
        s
    }

    fn slots_mut(&mut self) -> Vec<SlotMut<'_>> {
        let mut s = self.fpa.slots_mut();
        s.extend(self.head.slots_mut());
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub val_mae: f64,
    pub seed: u64,
}

/// Self-describing model archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub version: u32,
    pub model: AgeModel,
    pub codec: LabelCodecConfig,
    pub class_names: Vec<String>,
    pub backbone_id: String,
    /// Present when the backbone is the toy provider and can be rebuilt.
    pub toy_backbone: Option<ToyBackboneConfig>,
    pub training_meta: TrainingMeta,
}

impl ModelCheckpoint {
    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        self.codec.validate()?;
        self.model.head.validate()?;
        if self.codec.num_classes != self.model.num_age_classes() {
            return Err(Error::Config(format!(
                "codec K = {} but head emits {} bins",
                self.codec.num_classes,
                self.model.num_age_classes()
            )));
        }
        if self.class_names.len() != self.model.fpa.config.num_classes {
            return Err(Error::Config(format!(
                "{} class names for {} mask classes",
                self.class_names.len(),
                self.model.fpa.config.num_classes
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self)?;
        fs::write(path, json).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let ckpt: Self = serde_json::from_slice(&bytes)?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn check_backbone(&self, backbone: &dyn Backbone) -> Result<()> {
        self.model.check_backbone(backbone)?;
        if backbone.class_names() != self.class_names.as_slice() {
            return Err(Error::Config(format!(
                "class order mismatch: checkpoint {:?}, backbone {:?}",
                self.class_names,
                backbone.class_names()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub age: f64,
    pub dist: AgeDistribution,
    /// Attention weights from the unflipped pass.
    pub attention: Array1<f64>,
}

/// Backbone → FPA → head, optionally averaging with the mirrored input.
pub fn predict(
    image: &Image,
    bbox: &BBox,
    checkpoint: &ModelCheckpoint,
    backbone: &dyn Backbone,
    flip_tta: bool,
) -> Result<Prediction> {
    checkpoint.validate()?;
    checkpoint.check_backbone(backbone)?;
    let bundle = backbone.extract_features(image, bbox)?;
    let pass = checkpoint.model.forward(&bundle)?;
    let dist = if flip_tta {
        let mirrored = backbone.extract_features(&image.flip_horizontal(), &bbox.mirror(image.width()))?;
        let flipped = checkpoint.model.forward(&mirrored)?;
        pass.dist.average(&flipped.dist)?
    } else {
        pass.dist.clone()
    };
    Ok(Prediction {
        age: dist.expectation(),
        dist,
        attention: pass.fpa.attention,
    })
}

pub fn predict_age(
    image: &Image,
    bbox: &BBox,
    checkpoint: &ModelCheckpoint,
    backbone: &dyn Backbone,
    flip_tta: bool,
) -> Result<(f64, AgeDistribution)> {
    let p = predict(image, bbox, checkpoint, backbone, flip_tta)?;
    Ok((p.age, p.dist))
}

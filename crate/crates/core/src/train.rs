//! Mini-batch SGD with momentum and weight decay over the FPA and head
//! parameters, with warmup/decay learning rate, per-epoch validation and
//! early stopping on validation MAE.
//!
//! Runs are deterministic for a given seed: batch order, augmentation draws
//! and gradient reduction order depend only on the seed, never on thread
//! scheduling.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::backbone::{read_manifest, Backbone, DatasetRecord, FeatureBundle, Image, ToyBackbone};
use crate::codec::{encode_label, AgeDistribution, LabelCodecConfig};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::{AgeModel, ModelCheckpoint, TrainingMeta, CHECKPOINT_VERSION};
use crate::nn::Parameters;
use crate::schedule::lr_at;

/// Samples per gradient task. Fixed so the reduction tree does not depend
/// on the thread count.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub warmup_epochs: usize,
    /// Multiplicative learning-rate factor per epoch after warmup.
    pub decay_gamma: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Trunk width of the age head.
    pub head_width: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 80,
            weight_decay: 0.0005,
            momentum: 0.9,
            lr_start: 0.0001,
            lr_peak: 0.01,
            warmup_epochs: 5,
            decay_gamma: 0.9,
            patience: 10,
            max_epochs: 90,
            seed: 0,
            head_width: 256,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.max_epochs == 0 || self.head_width == 0 {
            return fail("batch_size, max_epochs and head_width must be positive".into());
        }
        if self.patience < 1 {
            return fail("patience must be >= 1".into());
        }
        if !(self.decay_gamma > 0.0 && self.decay_gamma < 1.0) {
            return fail(format!("decay_gamma must be in (0, 1), got {}", self.decay_gamma));
        }
        if !(self.lr_start >= 0.0 && self.lr_start <= self.lr_peak && self.lr_peak.is_finite()) {
            return fail(format!(
                "need 0 <= lr_start <= lr_peak, got {} and {}",
                self.lr_start, self.lr_peak
            ));
        }
        if !(self.weight_decay >= 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return fail("weight_decay must be >= 0 and momentum in [0, 1)".into());
        }
        Ok(())
    }
}

/// One progress-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mae: f64,
    pub wall_seconds: f64,
}

/// A decoded training or validation example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub record: DatasetRecord,
    pub image: Image,
}

pub fn load_samples(records: Vec<DatasetRecord>, codec: &LabelCodecConfig) -> Result<Vec<Sample>> {
    records
        .into_par_iter()
        .map(|record| {
            record.validate(codec)?;
            let image = Image::open(Path::new(&record.image_path))?;
            Ok(Sample { record, image })
        })
        .collect()
}

pub fn load_manifest_samples(path: &Path, codec: &LabelCodecConfig) -> Result<Vec<Sample>> {
    load_samples(read_manifest(path)?, codec)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub history: Vec<EpochLog>,
}

/// SGD step: `v ← μv + (g + λ_wd·w)`, `w ← w − lr·v`; decay only on weights.
pub fn sgd_step(
    model: &mut AgeModel,
    grad: &AgeModel,
    velocity: &mut AgeModel,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let grads = grad.slots();
    for ((param, g), v) in model
        .slots_mut()
        .into_iter()
        .zip(grads)
        .zip(velocity.slots_mut())
    {
        let wd = if param.decay { weight_decay } else { 0.0 };
        for ((w, &g), v) in param.values.iter_mut().zip(g.values).zip(v.values.iter_mut()) {
            *v = momentum * *v + g + wd * *w;
            *w -= lr * *v;
        }
    }
}

pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the combined words
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn extract(backbone: &dyn Backbone, sample: &Sample) -> Result<FeatureBundle> {
    backbone.extract_features(&sample.image, &sample.record.bbox)
}

/// Mean absolute error of expectation-decoded predictions, no flip averaging.
pub fn validation_mae(model: &AgeModel, bundles: &[(FeatureBundle, i64)]) -> Result<f64> {
    let errs: Vec<f64> = bundles
        .par_iter()
        .map(|(b, age)| Ok((model.forward(b)?.dist.expectation() - *age as f64).abs()))
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

pub fn train(
    train_set: &[Sample],
    val_set: &[Sample],
    backbone: &dyn Backbone,
    codec: &LabelCodecConfig,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    codec.validate()?;
    loss_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training manifest"));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("validation manifest"));
    }
    for s in train_set.iter().chain(val_set) {
        s.record.validate(codec)?;
    }

    let targets: Vec<AgeDistribution> = train_set
        .iter()
        .map(|s| encode_label(s.record.age, codec))
        .collect::<Result<_>>()?;
    let val_bundles: Vec<(FeatureBundle, i64)> = val_set
        .par_iter()
        .map(|s| Ok((extract(backbone, s)?, s.record.age)))
        .collect::<Result<_>>()?;
    let cached: Option<Vec<FeatureBundle>> = if cfg.augment.is_identity() {
        Some(
            train_set
                .par_iter()
                .map(|s| extract(backbone, s))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let mut model = AgeModel::for_backbone(backbone, codec, cfg.head_width, cfg.seed)?;
    let mut velocity = model.zeros_like();
    let mut best: Option<(usize, f64, AgeModel)> = None;
    let mut stale = 0;
    let mut history = Vec::new();
    let start = Instant::now();
    let num_batches = train_set.len().div_ceil(cfg.batch_size);

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64, 0)));
        let mut loss_sum = 0.0;
        let mut lr = lr_at(epoch as f64, cfg);

        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            lr = lr_at(epoch as f64 + b as f64 / num_batches as f64, cfg);
            let partials: Vec<(AgeModel, f64)> = batch
                .par_chunks(GRAD_CHUNK)
                .map(|chunk| {
                    let mut grad = model.zeros_like();
                    let mut total = 0.0;
                    for &i in chunk {
                        let sample = &train_set[i];
                        let owned;
                        let bundle = match &cached {
                            Some(c) => &c[i],
                            None => {
                                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                                    cfg.seed,
                                    epoch as u64 + 1,
                                    i as u64 + 1,
                                ));
                                let (img, bbox) =
                                    augment(&sample.image, &sample.record.bbox, &cfg.augment, &mut rng);
                                owned = backbone.extract_features(&img, &bbox)?;
                                &owned
                            }
                        };
                        total += model
                            .accumulate_gradient(bundle, &targets[i], sample.record.age, loss_cfg, &mut grad)?
                            .total;
                    }
                    Ok((grad, total))
                })
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    Error::InfiniteKl { .. } => {
                        Error::NonFinite(format!("loss in epoch {epoch}, batch {b}: {e}"))
                    }
                    other => other,
                })?;

            let mut grad = model.zeros_like();
            let mut batch_loss = 0.0;
            for (g, l) in &partials {
                grad.add_scaled(g, 1.0);
                batch_loss += l;
            }
            let scale = 1.0 / batch.len() as f64;
            if !batch_loss.is_finite() || !grad.all_finite() {
                return Err(Error::NonFinite(format!(
                    "loss or gradient in epoch {epoch}, batch {b}"
                )));
            }
            let avg = {
                let mut g = model.zeros_like();
                g.add_scaled(&grad, scale);
                g
            };
            sgd_step(&mut model, &avg, &mut velocity, lr, cfg.momentum, cfg.weight_decay);
            loss_sum += batch_loss;
        }

        let val_mae = validation_mae(&model, &val_bundles)?;
        if !val_mae.is_finite() {
            return Err(Error::NonFinite(format!("validation MAE in epoch {epoch}")));
        }
        let log = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            val_mae,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: lr {:.6} train loss {:.4} val MAE {:.4}",
            log.lr,
            log.train_loss,
            log.val_mae
        );
        on_epoch(&log);
        history.push(log);

        // strict improvement; ties keep the earlier epoch
        if best.as_ref().is_none_or(|(_, m, _)| val_mae < *m) {
            best = Some((epoch, val_mae, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let (epoch, val_mae, model) = best.expect("at least one epoch ran");
    let checkpoint = ModelCheckpoint {
        version: CHECKPOINT_VERSION,
        model,
        codec: *codec,
        class_names: backbone.class_names().to_vec(),
        backbone_id: backbone.id(),
        toy_backbone: None,
        training_meta: TrainingMeta {
            epoch,
            val_mae,
            seed: cfg.seed,
        },
    };
    Ok(TrainOutcome {
        checkpoint,
        history,
    })
}

/// [`train`] with the toy backbone, recording its configuration in the
/// checkpoint so inference can rebuild it.
pub fn train_with_toy(
    train_set: &[Sample],
    val_set: &[Sample],
    backbone: &ToyBackbone,
    codec: &LabelCodecConfig,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let mut out = train(train_set, val_set, backbone, codec, cfg, loss_cfg, on_epoch)?;
    out.checkpoint.toy_backbone = Some(backbone.config().clone());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ToyBackboneConfig;
    use crate::synth::{FaceGenerator, FaceGeneratorConfig};

    fn tiny_setup() -> (ToyBackbone, LabelCodecConfig, Vec<Sample>) {
        let bb = ToyBackbone::build(ToyBackboneConfig {
            low_channels: 4,
            high_channels: 11,
            ..ToyBackboneConfig::small(0)
        })
        .unwrap();
        let codec = LabelCodecConfig::new(30, 2.0).unwrap();
        let gen = FaceGenerator::new(
            &bb,
            FaceGeneratorConfig {
                min_age: 5,
                max_age: 25,
                ..FaceGeneratorConfig::default()
            },
        );
        let samples = gen.samples(24, 3, &codec);
        (bb, codec, samples)
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            max_epochs: 3,
            warmup_epochs: 1,
            head_width: 4,
            augment: AugmentConfig::none(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_stops_after_patience() {
        let (bb, codec, samples) = tiny_setup();
        let cfg = TrainConfig {
            lr_start: 0.0,
            lr_peak: 0.0,
            patience: 1,
            max_epochs: 10,
            ..tiny_cfg()
        };
        let initial = AgeModel::for_backbone(&bb, &codec, cfg.head_width, cfg.seed).unwrap();
        let out = train(&samples, &samples, &bb, &codec, &cfg, &LossConfig::default(), |_| {}).unwrap();
        assert_eq!(out.history.len(), 2);
        assert_eq!(out.checkpoint.model, initial);
        assert_eq!(out.history[0].val_mae, out.history[1].val_mae);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (bb, codec, samples) = tiny_setup();
        let cfg = TrainConfig {
            augment: AugmentConfig::default(),
            ..tiny_cfg()
        };
        let a = train(&samples, &samples[..8], &bb, &codec, &cfg, &LossConfig::default(), |_| {}).unwrap();
        let b = train(&samples, &samples[..8], &bb, &codec, &cfg, &LossConfig::default(), |_| {}).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        let c = train(
            &samples,
            &samples[..8],
            &bb,
            &codec,
            &TrainConfig { seed: 1, ..cfg },
            &LossConfig::default(),
            |_| {},
        )
        .unwrap();
        assert_ne!(a.checkpoint.model, c.checkpoint.model);
    }

    #[test]
    fn weight_decay_changes_trajectory_but_not_biases_directly() {
        let (bb, codec, samples) = tiny_setup();
        let with = train(&samples, &samples, &bb, &codec, &tiny_cfg(), &LossConfig::default(), |_| {}).unwrap();
        let without = train(
            &samples,
            &samples,
            &bb,
            &codec,
            &TrainConfig {
                weight_decay: 0.0,
                ..tiny_cfg()
            },
            &LossConfig::default(),
            |_| {},
        )
        .unwrap();
        assert_ne!(with.checkpoint.model, without.checkpoint.model);

        // With zero gradient, decay shrinks weights and leaves biases alone.
        let mut model = AgeModel::for_backbone(&bb, &codec, 4, 0).unwrap();
        model.head.fc.bias.fill(0.5);
        let before = model.clone();
        let zero = model.zeros_like();
        let mut vel = model.zeros_like();
        sgd_step(&mut model, &zero, &mut vel, 0.1, 0.9, 0.01);
        assert_eq!(model.head.fc.bias, before.head.fc.bias);
        assert_ne!(model.head.fc.weight, before.head.fc.weight);
    }

    #[test]
    fn rejects_empty_and_invalid_inputs() {
        let (bb, codec, samples) = tiny_setup();
        let cfg = tiny_cfg();
        assert!(matches!(
            train(&[], &samples, &bb, &codec, &cfg, &LossConfig::default(), |_| {}),
            Err(Error::Empty(_))
        ));
        let mut bad = samples.clone();
        bad[0].record.age = 99;
        assert!(train(&bad, &samples, &bb, &codec, &cfg, &LossConfig::default(), |_| {}).is_err());
        let bad_cfg = TrainConfig {
            decay_gamma: 1.5,
            ..cfg
        };
        assert!(bad_cfg.validate().is_err());
    }

    #[test]
    fn non_finite_loss_aborts_with_batch_index() {
        let (bb, codec, samples) = tiny_setup();
        let cfg = TrainConfig {
            lr_start: 1e6,
            lr_peak: 1e9,
            max_epochs: 5,
            ..tiny_cfg()
        };
        match train(&samples, &samples, &bb, &codec, &cfg, &LossConfig::default(), |_| {}) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("batch") || msg.contains("validation"), "{msg}"),
            other => panic!("expected a numerical failure, got {:?}", other.map(|o| o.history.len())),
        }
    }
}

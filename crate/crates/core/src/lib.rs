//! Age estimation with face-parsing attention and label distribution
//! learning, plus dataset cleaning, evaluation and review tooling.

pub mod augment;
pub mod backbone;
pub mod cleaning;
pub mod codec;
pub mod error;
pub mod eval;
pub mod fpa;
pub mod head;
pub mod loss;
pub mod model;
pub mod nn;
pub mod probe;
pub mod review;
pub mod schedule;
pub mod synth;
pub mod train;

pub use backbone::{Backbone, BBox, DatasetRecord, FeatureBundle, Image, ToyBackbone, ToyBackboneConfig};
pub use codec::{decode_expectation, encode_label, AgeDistribution, LabelCodecConfig};
pub use error::{Error, Result};
pub use model::{predict, predict_age, AgeModel, ModelCheckpoint};
pub use train::{train, TrainConfig};

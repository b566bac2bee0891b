//! Trains on a synthetic age-coded set and prints the per-epoch log.

use std::time::Instant;

use fpage_core::augment::AugmentConfig;
use fpage_core::loss::LossConfig;
use fpage_core::synth::{FaceGenerator, FaceGeneratorConfig};
use fpage_core::train::train_with_toy;
use fpage_core::{LabelCodecConfig, ToyBackbone, ToyBackboneConfig, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_train: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let n_val: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(500);
    let head_width: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(16);
    let env = |k: &str, d: f64| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let bb = ToyBackbone::build(ToyBackboneConfig {
        signal_gain: env("GAIN", ToyBackboneConfig::default().signal_gain),
        ..ToyBackboneConfig::small(0)
    })
    .unwrap();
    let codec = LabelCodecConfig::default();
    let gen = FaceGenerator::new(&bb, FaceGeneratorConfig::default());
    let train = gen.samples(n_train, 1, &codec);
    let val = gen.samples(n_val, 2, &codec);
    let cfg = TrainConfig {
        batch_size: 32,
        max_epochs: 30,
        head_width,
        seed: env("SEED", 0.0) as u64,
        lr_peak: env("LR", 0.01),
        augment: match args.get(4).map(String::as_str) {
            Some("aug") => AugmentConfig::default(),
            Some("flip") => AugmentConfig { horizontal_flip: true, ..AugmentConfig::none() },
            _ => AugmentConfig::none(),
        },
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = train_with_toy(&train, &val, &bb, &codec, &cfg, &LossConfig::default(), |log| {
        println!("{}", serde_json::to_string(log).unwrap());
    });
    let out = match out {
        Ok(o) => o,
        Err(e) => {
            println!("failed: {e}");
            return;
        }
    };
    println!(
        "best epoch {} val_mae {:.4} in {:.1}s",
        out.checkpoint.training_meta.epoch,
        out.checkpoint.training_meta.val_mae,
        start.elapsed().as_secs_f64()
    );
}

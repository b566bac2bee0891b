//! Learning-rate schedule: linear warmup from `lr_start` to `lr_peak`, then
//! exponential decay by `decay_gamma` per epoch.

use crate::train::TrainConfig;

/// Learning rate at a (possibly fractional) epoch.
pub fn lr_at(epoch: f64, cfg: &TrainConfig) -> f64 {
    let epoch = epoch.max(0.0);
    let warmup = cfg.warmup_epochs as f64;
    if cfg.warmup_epochs > 0 && epoch <= warmup {
        if epoch == warmup {
            return cfg.lr_peak;
        }
        cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * (epoch / warmup)
    } else {
        cfg.lr_peak * cfg.decay_gamma.powf(epoch - warmup)
    }
}

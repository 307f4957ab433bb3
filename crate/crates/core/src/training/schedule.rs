use std::f64::consts::PI;

use super::TrainConfig;

/// Linear warmup from 0 to `max_lr` over `warmup_steps`, then cosine decay to
/// `min_lr` at `total_steps`. Steps past the end stay at `min_lr`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let (w, t) = (cfg.warmup_steps, cfg.total_steps);
    if step < w {
        return cfg.max_lr * step as f64 / w as f64;
    }
    if t <= w {
        return cfg.max_lr;
    }
    let progress = ((step - w) as f64 / (t - w) as f64).min(1.0);
    cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + (PI * progress).cos())
}

use std::f64::consts::PI;

/// Learning rate for 0-based `epoch` of `total` epochs.
///
/// Linear warm-up `lr_max·(e+1)/W` for `e < W`, then cosine annealing
/// `0.5·lr_max·(1 + cos(π·(e−W)/(T−W)))`, which reaches 0 at `e = T`.
pub fn cosine_lr(epoch: usize, total: usize, warmup: usize, lr_max: f64) -> f64 {
    debug_assert!(warmup < total, "warm-up must be shorter than the run");
    if epoch < warmup {
        return lr_max * (epoch + 1) as f64 / warmup as f64;
    }
    let progress = (epoch - warmup) as f64 / (total - warmup) as f64;
    0.5 * lr_max * (1.0 + (PI * progress).cos())
}

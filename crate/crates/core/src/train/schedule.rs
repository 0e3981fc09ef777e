use std::f64::consts::PI;

/// Linear warmup to `base` over `warmup` epochs (`base·(e+1)/warmup` for
/// `e < warmup`), then cosine decay reaching zero at `epochs`.
pub fn lr_at(epoch: usize, base: f64, warmup: usize, epochs: usize) -> f64 {
    if epoch < warmup {
        return base * (epoch + 1) as f64 / warmup as f64;
    }
    let span = epochs.saturating_sub(warmup).max(1) as f64;
    let progress = (epoch - warmup) as f64 / span;
    base * 0.5 * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_and_boundary() {
        assert_eq!(lr_at(0, 1.0, 5, 20), 0.2);
        assert_eq!(lr_at(4, 1.0, 5, 20), 1.0);
        assert_eq!(lr_at(5, 1.0, 5, 20), 1.0);
        let last = lr_at(19, 1.0, 5, 20);
        assert!((last - 0.5 * (1.0 + (PI * 14.0 / 15.0).cos())).abs() < 1e-15);
    }

    #[test]
    fn non_increasing_after_warmup() {
        let lrs: Vec<f64> = (3..50).map(|e| lr_at(e, 1e-3, 3, 50)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}

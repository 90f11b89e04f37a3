//! Linear warm-up followed by linear decay.

/// `max_lr·t/W` for `t ≤ W`, then `max_lr·(T + 1 − t)/(T + 1 − W)` so the
/// last of the `T` iterations still takes a nonzero step.
pub fn lr_schedule(t: u64, warmup: u64, total: u64, max_lr: f64) -> f64 {
    if t > total {
        return 0.0;
    }
    if warmup > 0 && t <= warmup {
        return max_lr * t as f64 / warmup as f64;
    }
    max_lr * (total + 1 - t) as f64 / (total + 1 - warmup) as f64
}

/// Warm-up length when the config leaves it at 0: 5% of the run, at least 1.
pub fn default_warmup(total: u64) -> u64 {
    ((total as f64 * 0.05).round() as u64).clamp(1, total.saturating_sub(1).max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape() {
        assert_eq!(lr_schedule(10, 10, 100, 2.0), 2.0);
        assert_eq!(lr_schedule(100, 10, 100, 2.0), 2.0 / 91.0);
        assert_eq!(lr_schedule(101, 10, 100, 2.0), 0.0);
        assert_eq!(lr_schedule(5, 10, 100, 2.0), 1.0);
        assert_eq!(lr_schedule(56, 10, 100, 2.0), 2.0 * 45.0 / 91.0);
        assert_eq!(lr_schedule(0, 10, 100, 2.0), 0.0);
    }

    #[test]
    fn warmup_default() {
        assert_eq!(default_warmup(200), 10);
        assert_eq!(default_warmup(3), 1);
    }

    proptest::proptest! {
        #[test]
        fn bounded_and_unimodal(w in 1u64..50, extra in 1u64..500, max in 1e-6f64..1.0) {
            let total = w + extra;
            let mut prev = 0.0;
            for t in 0..=total + 1 {
                let lr = lr_schedule(t, w, total, max);
                proptest::prop_assert!((0.0..=max * (1.0 + 1e-12)).contains(&lr));
                proptest::prop_assert!((lr > 0.0) == (1..=total).contains(&t));
                if t <= w { proptest::prop_assert!(lr >= prev); } else { proptest::prop_assert!(lr <= prev); }
                prev = lr;
            }
        }
    }
}

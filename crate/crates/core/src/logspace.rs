//! Log-domain arithmetic helpers.

/// `ln(exp(a) + exp(b))`, exact when either side is `-inf`.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Numerically stable log-sum-exp of a slice. Empty input yields `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Replaces `xs` by its log-softmax and returns the normalizer.
pub fn log_softmax_in_place(xs: &mut [f64]) -> f64 {
    let norm = log_sum_exp(xs);
    for x in xs.iter_mut() {
        *x -= norm;
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_add_handles_neg_inf() {
        assert_eq!(log_add(f64::NEG_INFINITY, -3.0), -3.0);
        assert_eq!(log_add(-3.0, f64::NEG_INFINITY), -3.0);
        assert_eq!(log_add(f64::NEG_INFINITY, f64::NEG_INFINITY), f64::NEG_INFINITY);
        assert!((log_add(0.5f64.ln(), 0.5f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn lse_is_shift_stable() {
        let xs = [1000.0, 1000.0];
        assert!((log_sum_exp(&xs) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn softmax_normalizes() {
        let mut xs = [0.3, -1.2, 4.0, 0.0];
        log_softmax_in_place(&mut xs);
        assert!(log_sum_exp(&xs).abs() < 1e-12);
    }
}

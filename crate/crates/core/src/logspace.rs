//! Small log-domain helpers shared by the backward recursions.

/// `log(sum(exp(xs)))`, returning `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Natural log with `ln(0) = -inf` and no NaN for exact zeros.
#[inline]
pub fn ln0(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else {
        p.ln()
    }
}

/// `p * ln(p)` with the `0 ln 0 = 0` convention.
#[inline]
pub fn xlogx(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * p.ln()
    }
}

/// Normalizes log-weights into probabilities in place of `out`. Equal
/// logits give exactly `1 / n`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.fill(f64::NAN);
        return;
    }
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// `sum(p * v)` over the pairs with `p > 0`, accumulated relative to the
/// first such value so a constant `v` comes back exactly.
pub fn expectation(pairs: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    let mut base = None;
    let mut acc = 0.0;
    for (p, v) in pairs {
        if p > 0.0 {
            let b = *base.get_or_insert(v);
            acc += p * (v - b);
        }
    }
    base.map_or(0.0, |b| b + acc)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_is_stable_for_large_inputs() {
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn softmax_handles_zero_mass_entries() {
        let p = softmax(&[0.0, f64::NEG_INFINITY]);
        assert_eq!(p, vec![1.0, 0.0]);
        assert_eq!(softmax(&[-7.25; 3]), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn expectation_of_a_constant_is_exact() {
        let p = [0.1, 0.2, 0.3, 0.4, 0.0];
        let v = [0.7 * 3.0, 0.7 * 3.0, 0.7 * 3.0, 0.7 * 3.0, f64::NAN];
        assert_eq!(expectation(p.iter().copied().zip(v)), 0.7 * 3.0);
        assert!((expectation([(0.25, 1.0), (0.75, 3.0)]) - 2.5).abs() < 1e-15);
        assert_eq!(expectation([(0.0, 5.0)]), 0.0);
    }
}

//! Diagonal-Gaussian densities, sampling, and log-domain helpers.
//!
//! Variances are carried as log-variances everywhere so densities stay
//! positive by construction; [`clamp_log_var`] bounds them to keep `exp`
//! calls sane, and the returned mask tells backward passes which entries
//! were saturated.

/// Bounds for network-predicted log-variances: variance between e^-10 and
/// e^10 (about 4.5e-5 to 2.2e4).
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

fn ln_2pi() -> f64 {
    (2.0 * std::f64::consts::PI).ln()
}

/// Log-density of a diagonal Gaussian, summed over dimensions.
pub fn diag_log_pdf(x: &[f64], mean: &[f64], log_var: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), mean.len());
    debug_assert_eq!(x.len(), log_var.len());
    let mut acc = 0.0;
    for i in 0..x.len() {
        let diff = x[i] - mean[i];
        acc += -0.5 * (ln_2pi() + log_var[i] + diff * diff * (-log_var[i]).exp());
    }
    acc
}

/// Log-density of a standard normal, summed over dimensions.
pub fn std_normal_log_pdf(x: &[f64]) -> f64 {
    x.iter().map(|&v| -0.5 * (ln_2pi() + v * v)).sum()
}

/// Reparameterized draw: `mean + exp(log_var / 2) * noise`, where `noise`
/// holds standard-normal values.
pub fn sample_diag(mean: &[f64], log_var: &[f64], noise: &[f64]) -> Vec<f64> {
    debug_assert_eq!(mean.len(), log_var.len());
    debug_assert_eq!(mean.len(), noise.len());
    (0..mean.len())
        .map(|i| mean[i] + (0.5 * log_var[i]).exp() * noise[i])
        .collect()
}

/// KL divergence from a diagonal Gaussian to the standard normal, in closed
/// form: `0.5 * sum(mean^2 + var - 1 - log_var)`. Zero exactly at the
/// standard normal, positive elsewhere.
pub fn kl_to_std_normal(mean: &[f64], log_var: &[f64]) -> f64 {
    debug_assert_eq!(mean.len(), log_var.len());
    let mut acc = 0.0;
    for i in 0..mean.len() {
        acc += 0.5 * (mean[i] * mean[i] + log_var[i].exp() - 1.0 - log_var[i]);
    }
    acc
}

/// `ln(sum(exp(x)))` computed against the running maximum so no single term
/// overflows. Returns negative infinity for an empty slice or when every
/// term is negative infinity.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Clamps each log-variance into `[LOG_VAR_MIN, LOG_VAR_MAX]` in place. The
/// returned mask is `true` where the raw value was strictly inside the
/// bounds, i.e. where gradients should still flow.
pub fn clamp_log_var(log_var: &mut [f64]) -> Vec<bool> {
    log_var
        .iter_mut()
        .map(|lv| {
            let inside = *lv > LOG_VAR_MIN && *lv < LOG_VAR_MAX;
            *lv = lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX);
            inside
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn std_normal_log_pdf_at_origin() {
        // One dimension: -0.5 ln(2 pi).
        let expected = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((std_normal_log_pdf(&[0.0]) - expected).abs() < 1e-15);
        assert!((std_normal_log_pdf(&[0.0, 0.0]) - 2.0 * expected).abs() < 1e-15);
    }

    #[test]
    fn diag_log_pdf_matches_std_normal_special_case() {
        let x = [0.3, -1.2, 0.8];
        let mean = [0.0; 3];
        let log_var = [0.0; 3];
        assert!((diag_log_pdf(&x, &mean, &log_var) - std_normal_log_pdf(&x)).abs() < 1e-15);
    }

    #[test]
    fn diag_log_pdf_hand_value() {
        // N(x=2; mean=1, var=e): -0.5 (ln 2pi + 1 + 1/e).
        let expected = -0.5 * ((2.0 * std::f64::consts::PI).ln() + 1.0 + (-1.0f64).exp());
        assert!((diag_log_pdf(&[2.0], &[1.0], &[1.0]) - expected).abs() < 1e-15);
    }

    #[test]
    fn kl_zero_at_standard_normal() {
        assert_eq!(kl_to_std_normal(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn kl_hand_value() {
        // mean 1, var 2: 0.5 (1 + 2 - 1 - ln 2).
        let expected = 0.5 * (2.0 - (2.0f64).ln());
        assert!((kl_to_std_normal(&[1.0], &[(2.0f64).ln()]) - expected).abs() < 1e-15);
    }

    #[test]
    fn log_sum_exp_agrees_with_naive() {
        let xs = [0.1, -0.4, 1.2, 0.0];
        let naive = xs.iter().map(|&x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - naive).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_survives_large_inputs() {
        let xs = [1000.0, 1000.0];
        assert!((log_sum_exp(&xs) - (1000.0 + (2.0f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_degenerate_cases() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            f64::NEG_INFINITY
        );
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, 3.0]), 3.0);
    }

    #[test]
    fn clamp_masks_saturated_entries() {
        let mut lv = [-20.0, 0.0, 20.0, LOG_VAR_MAX];
        let mask = clamp_log_var(&mut lv);
        assert_eq!(lv, [LOG_VAR_MIN, 0.0, LOG_VAR_MAX, LOG_VAR_MAX]);
        assert_eq!(mask, vec![false, true, false, false]);
    }

    proptest! {
        #[test]
        fn zero_noise_sample_is_the_mean(
            mean in proptest::collection::vec(-5.0f64..5.0, 1..8),
            log_var in proptest::collection::vec(-4.0f64..4.0, 1..8),
        ) {
            let n = mean.len().min(log_var.len());
            let sample = sample_diag(&mean[..n], &log_var[..n], &vec![0.0; n]);
            prop_assert_eq!(sample, mean[..n].to_vec());
        }

        #[test]
        fn kl_is_nonnegative(
            mean in proptest::collection::vec(-5.0f64..5.0, 1..8),
            log_var in proptest::collection::vec(-4.0f64..4.0, 1..8),
        ) {
            let n = mean.len().min(log_var.len());
            prop_assert!(kl_to_std_normal(&mean[..n], &log_var[..n]) >= 0.0);
        }

        #[test]
        fn log_pdf_peaks_at_the_mean(
            x in proptest::collection::vec(-5.0f64..5.0, 3),
            mean in proptest::collection::vec(-5.0f64..5.0, 3),
            log_var in proptest::collection::vec(-4.0f64..4.0, 3),
        ) {
            let at_mean = diag_log_pdf(&mean, &mean, &log_var);
            let elsewhere = diag_log_pdf(&x, &mean, &log_var);
            prop_assert!(elsewhere <= at_mean + 1e-12);
        }
    }
}

//! Bradley-Terry pairwise preference probabilities.
//!
//! Raw similarity scores can be negative, so they go through softplus before
//! the ratio `p_i / (p_i + p_j)`.

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(softplus(x))`, accurate for very negative `x`.
pub fn log_softplus(x: f64) -> f64 {
    if x < -30.0 {
        // softplus(x) = e^x (1 - e^x / 2 + ...)
        x - 0.5 * x.exp()
    } else {
        softplus(x).ln()
    }
}

/// `d/dx ln(softplus(x)) = sigmoid(x) / softplus(x)`.
pub(crate) fn log_softplus_grad(x: f64) -> f64 {
    if x < -30.0 {
        1.0 - 0.5 * x.exp()
    } else {
        let s = if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        };
        s / softplus(x)
    }
}

/// Preference probability from two strictly positive strengths.
pub fn bt_ratio(p_i: f64, p_j: f64) -> f64 {
    p_i / (p_i + p_j)
}

/// Probability that the item scored `score_i` beats the one scored `score_j`.
pub fn bt_probability(score_i: f64, score_j: f64) -> f64 {
    bt_ratio(softplus(score_i), softplus(score_j))
}

/// `ln bt_probability(score_i, score_j)`, stable for extreme scores.
pub fn log_bt_probability(score_i: f64, score_j: f64) -> f64 {
    let (a, b) = (log_softplus(score_i), log_softplus(score_j));
    let m = a.max(b);
    a - (m + ((a - m).exp() + (b - m).exp()).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fixed_examples() {
        assert_eq!(bt_probability(0.3, 0.3), 0.5);
        assert_eq!(bt_probability(-7.0, -7.0), 0.5);
        assert_eq!(bt_ratio(3.0, 1.0), 0.75);
    }

    #[test]
    fn log_matches_direct_form() {
        for (a, b) in [(0.0, 1.0), (-3.0, 2.0), (10.0, -10.0), (-40.0, -41.0)] {
            let direct = bt_probability(a, b).ln();
            assert!((log_bt_probability(a, b) - direct).abs() < 1e-12);
        }
        // still finite when softplus underflows
        assert!(log_bt_probability(-800.0, 5.0).is_finite());
    }

    #[test]
    fn log_softplus_grad_matches_finite_differences() {
        for x in [-50.0, -31.0, -5.0, 0.0, 2.0, 40.0] {
            let h = 1e-6;
            let fd = (log_softplus(x + h) - log_softplus(x - h)) / (2.0 * h);
            assert!((fd - log_softplus_grad(x)).abs() < 1e-6, "{x}");
        }
    }

    proptest! {
        #[test]
        fn complementary(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            prop_assert!((bt_probability(a, b) + bt_probability(b, a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn monotone_in_both_scores(a in -20.0f64..20.0, b in -20.0f64..20.0, d in 0.01f64..5.0) {
            prop_assert!(bt_probability(a + d, b) > bt_probability(a, b));
            prop_assert!(bt_probability(a, b + d) < bt_probability(a, b));
        }
    }
}

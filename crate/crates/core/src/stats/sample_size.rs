use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SampleSizeError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

fn z_two_sided(confidence: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - (1.0 - confidence) / 2.0)
}

fn check(p: f64, confidence: f64, relative_error: f64, deff: f64) -> Result<(), SampleSizeError> {
    let bad = |m: &str| Err(SampleSizeError::InvalidParams(m.to_string()));
    if !(p > 0.0 && p < 1.0) {
        return bad("expected accuracy must lie in (0, 1)");
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return bad("confidence must lie in (0, 1)");
    }
    if !(relative_error > 0.0 && relative_error.is_finite()) {
        return bad("relative error must be positive");
    }
    if !(deff > 0.0 && deff.is_finite()) {
        return bad("design effect must be positive");
    }
    Ok(())
}

/// Unrounded sampling units: deff · z² · (1 − p) / (r² · p).
pub fn sample_size_raw(p: f64, confidence: f64, relative_error: f64, deff: f64) -> Result<f64, SampleSizeError> {
    check(p, confidence, relative_error, deff)?;
    let z = z_two_sided(confidence);
    Ok(deff * z * z * (1.0 - p) / (relative_error * relative_error * p))
}

/// Sampling units needed to estimate accuracy `p` within a relative error
/// at the given two-sided confidence.
pub fn sample_size(p: f64, confidence: f64, relative_error: f64, deff: f64) -> Result<u64, SampleSizeError> {
    // absorb float noise so exact integers are not bumped up
    Ok((sample_size_raw(p, confidence, relative_error, deff)? - 1e-9).ceil() as u64)
}

/// Design effect at which the formula reaches `target` units.
pub fn implied_design_effect(target: f64, p: f64, confidence: f64, relative_error: f64) -> Result<f64, SampleSizeError> {
    Ok(target / sample_size_raw(p, confidence, relative_error, 1.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_values() {
        assert_eq!(sample_size(0.9, 0.95, 0.1, 1.0).unwrap(), 43);
        assert_eq!(sample_size(0.99, 0.95, 0.1, 1.0).unwrap(), 4);
        let deff = implied_design_effect(7600.0, 0.9, 0.95, 0.1).unwrap();
        assert!((deff - 178.06).abs() < 0.01, "{deff}");
    }

    #[test]
    fn invalid() {
        assert!(sample_size(1.0, 0.95, 0.1, 1.0).is_err());
        assert!(sample_size(0.9, 0.95, 0.0, 1.0).is_err());
        assert!(sample_size(0.9, 1.0, 0.1, 1.0).is_err());
        assert!(sample_size(0.9, 0.95, 0.1, -2.0).is_err());
    }

    proptest! {
        #[test]
        fn monotone(p in 0.05f64..0.9, dp in 0.01f64..0.09, r in 0.02f64..0.5, deff in 1.0f64..50.0) {
            let n = |p, r, d| sample_size(p, 0.95, r, d).unwrap();
            prop_assert!(n(p + dp, r, deff) <= n(p, r, deff));
            prop_assert!(n(p, r, deff + 1.0) >= n(p, r, deff));
            prop_assert!(n(p, r * 1.5, deff) <= n(p, r, deff));
        }
    }
}

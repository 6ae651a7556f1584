use crate::error::{ensure, Result};

/// Normalized difference between the two conversion experiments,
/// `(eer_b - eer_a) / eer_c`.
pub fn nd_metric(eer_a: f64, eer_b: f64, eer_c: f64) -> Result<f64> {
    ensure!(eer_a.is_finite() && eer_b.is_finite(), "EER inputs must be finite");
    ensure!(eer_c > 0.0 && eer_c.is_finite(), "baseline EER must be positive, got {eer_c}");
    Ok((eer_b - eer_a) / eer_c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_cells() {
        assert!((nd_metric(24.61, 39.45, 4.17).unwrap() - 3.56).abs() <= 0.01);
        assert!((nd_metric(25.00, 42.19, 8.33).unwrap() - 2.06).abs() <= 0.01);
        assert_eq!(nd_metric(30.0, 30.0, 4.0).unwrap(), 0.0);
        assert!(nd_metric(1.0, 2.0, 0.0).is_err());
    }
}

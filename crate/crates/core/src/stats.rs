//! Descriptive statistics. Standard deviations use the sample (n - 1)
//! convention throughout.

use serde::{Deserialize, Serialize};

use crate::math::sqrt;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; `None` below two values.
    pub sd: Option<f64>,
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn sample_sd(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    Some(sqrt(ss / (values.len() - 1) as f64))
}

pub fn summarize(values: &[f64]) -> Summary {
    Summary { n: values.len(), mean: if values.is_empty() { 0.0 } else { mean(values) }, sd: sample_sd(values) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_sd_of_two() {
        let s = summarize(&[7.0, 9.0]);
        assert_eq!(s.mean, 8.0);
        assert!((s.sd.unwrap() - core::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn single_value_has_no_sd() {
        assert_eq!(summarize(&[3.0]).sd, None);
        assert_eq!(summarize(&[]).n, 0);
    }
}

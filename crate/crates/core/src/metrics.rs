//! Regression metrics for the evaluation reports: MSE, Pearson correlation,
//! the multiplicative error MeanMult = exp(mean |ln(est/target)|), and the
//! variance ratio var(estimates)/var(targets).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum MetricError {
    #[error("no pairs to aggregate")]
    Empty,
    #[error("correlation undefined: {0} sequence has zero variance")]
    ZeroVariance(&'static str),
    #[error("MeanMult needs positive values, got target {target}, estimate {estimate}")]
    NonPositiveRatio { target: f64, estimate: f64 },
}

/// (target, estimate) pair.
pub type Pair = (f64, f64);

pub fn mse(pairs: &[Pair]) -> Result<f64, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(pairs.iter().map(|(y, y_hat)| (y_hat - y) * (y_hat - y)).sum::<f64>() / pairs.len() as f64)
}

fn population_var(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Sample Pearson correlation between targets and estimates.
pub fn pearson(pairs: &[Pair]) -> Result<f64, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty);
    }
    let (mean_y, var_y) = population_var(pairs.iter().map(|p| p.0));
    let (mean_e, var_e) = population_var(pairs.iter().map(|p| p.1));
    if var_y <= 0.0 {
        return Err(MetricError::ZeroVariance("target"));
    }
    if var_e <= 0.0 {
        return Err(MetricError::ZeroVariance("estimate"));
    }
    let cov = pairs
        .iter()
        .map(|(y, e)| (y - mean_y) * (e - mean_e))
        .sum::<f64>()
        / pairs.len() as f64;
    Ok(cov / (var_y.sqrt() * var_e.sqrt()))
}

/// exp(mean |ln(estimate/target)|) over pairs in physical units.
pub fn mean_mult(pairs: &[Pair]) -> Result<f64, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut acc = 0.0;
    for &(y, y_hat) in pairs {
        if y <= 0.0 || y_hat <= 0.0 {
            return Err(MetricError::NonPositiveRatio { target: y, estimate: y_hat });
        }
        acc += (y_hat / y).ln().abs();
    }
    Ok((acc / pairs.len() as f64).exp())
}

/// Population variance ratio var(estimates)/var(targets). Near zero means
/// the model collapsed to a constant prediction; near one means it covers
/// the target spread.
pub fn variance_ratio(pairs: &[Pair]) -> Result<f64, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty);
    }
    let (_, var_y) = population_var(pairs.iter().map(|p| p.0));
    let (_, var_e) = population_var(pairs.iter().map(|p| p.1));
    if var_y <= 0.0 {
        return Err(MetricError::ZeroVariance("target"));
    }
    Ok(var_e / var_y)
}

/// Aggregate report for one (target kind, split) evaluation.
///
/// MSE, Pearson and VR are computed in log-label space (the training space);
/// MeanMult is a ratio metric and uses physical units. `mean_mult_log` is
/// additionally reported when all log labels are positive, since ratio
/// metrics on log values are only defined there.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub target: String,
    pub split: String,
    pub n: usize,
    pub mse: f64,
    pub pearson_rho: f64,
    pub mean_mult: f64,
    pub mean_mult_log: Option<f64>,
    pub variance_ratio: f64,
    pub metric_spaces: MetricSpaces,
    pub checkpoint_sha256: String,
    pub manifest_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_snr: Option<Vec<SnrGroupReport>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSpaces {
    pub mse: String,
    pub pearson_rho: String,
    pub mean_mult: String,
    pub variance_ratio: String,
}

impl Default for MetricSpaces {
    fn default() -> Self {
        Self {
            mse: "log-label".into(),
            pearson_rho: "log-label".into(),
            mean_mult: "physical".into(),
            variance_ratio: "log-label (population variance)".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnrGroupReport {
    pub snr: String,
    pub n: usize,
    pub mse: f64,
    pub pearson_rho: Option<f64>,
}

/// Builds the aggregate block from log-space and physical pairs.
pub fn aggregate(
    target: &str,
    split: &str,
    log_pairs: &[Pair],
    physical_pairs: &[Pair],
) -> Result<EvalReport, MetricError> {
    let mean_mult_log = if log_pairs.iter().all(|(y, e)| *y > 0.0 && *e > 0.0) {
        Some(mean_mult(log_pairs)?)
    } else {
        None
    };
    Ok(EvalReport {
        target: target.to_string(),
        split: split.to_string(),
        n: log_pairs.len(),
        mse: mse(log_pairs)?,
        pearson_rho: pearson(log_pairs)?,
        mean_mult: mean_mult(physical_pairs)?,
        mean_mult_log,
        variance_ratio: variance_ratio(log_pairs)?,
        metric_spaces: MetricSpaces::default(),
        checkpoint_sha256: String::new(),
        manifest_sha256: String::new(),
        per_snr: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn mse_reference_values() {
        assert_abs_diff_eq!(mse(&[(1.0, 1.0), (2.0, 2.0)]).unwrap(), 0.0);
        assert_abs_diff_eq!(mse(&[(0.0, 1.0), (0.0, -1.0)]).unwrap(), 1.0);
        assert_abs_diff_eq!(mse(&[(1.0, 2.0), (3.0, 3.0), (5.0, 4.0)]).unwrap(), 2.0 / 3.0);
        assert!(matches!(mse(&[]), Err(MetricError::Empty)));
    }

    #[test]
    fn pearson_affine_and_errors() {
        let pairs: Vec<Pair> = (0..10).map(|i| (i as f64, 2.0 * i as f64 + 3.0)).collect();
        assert_abs_diff_eq!(pearson(&pairs).unwrap(), 1.0, epsilon = 1e-12);
        let pairs: Vec<Pair> = (0..10).map(|i| (i as f64, -(i as f64))).collect();
        assert_abs_diff_eq!(pearson(&pairs).unwrap(), -1.0, epsilon = 1e-12);
        let constant: Vec<Pair> = (0..10).map(|i| (i as f64, 7.0)).collect();
        assert!(matches!(pearson(&constant), Err(MetricError::ZeroVariance("estimate"))));
    }

    #[test]
    fn pearson_invariant_under_positive_affine_maps() {
        let pairs: Vec<Pair> =
            (0..20).map(|i| ((i as f64).sin(), (i as f64).sin() + 0.1 * (i as f64).cos())).collect();
        let base = pearson(&pairs).unwrap();
        let mapped: Vec<Pair> = pairs.iter().map(|(y, e)| (3.0 * y - 1.0, 0.5 * e + 4.0)).collect();
        assert_abs_diff_eq!(pearson(&mapped).unwrap(), base, epsilon = 1e-12);
    }

    #[test]
    fn mean_mult_reference_values() {
        assert_abs_diff_eq!(mean_mult(&[(5.0, 5.0), (2.0, 2.0)]).unwrap(), 1.0);
        assert_abs_diff_eq!(mean_mult(&[(100.0, 200.0)]).unwrap(), 2.0, epsilon = 1e-12);
        // Ratios {2, 0.5}: exp((ln 2 + ln 2)/2) = 2.
        assert_abs_diff_eq!(
            mean_mult(&[(1.0, 2.0), (2.0, 1.0)]).unwrap(),
            2.0,
            epsilon = 1e-12
        );
        assert!(matches!(
            mean_mult(&[(1.0, -2.0)]),
            Err(MetricError::NonPositiveRatio { .. })
        ));
    }

    #[test]
    fn mean_mult_symmetric_under_ratio_inversion() {
        let pairs = vec![(1.0, 3.0), (2.0, 1.0), (5.0, 4.0)];
        let inverted: Vec<Pair> = pairs.iter().map(|(y, e)| (*e, *y)).collect();
        assert_abs_diff_eq!(
            mean_mult(&pairs).unwrap(),
            mean_mult(&inverted).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn variance_ratio_reference_values() {
        let pairs: Vec<Pair> = (0..10).map(|i| (i as f64, i as f64)).collect();
        assert_abs_diff_eq!(variance_ratio(&pairs).unwrap(), 1.0, epsilon = 1e-12);
        let constant: Vec<Pair> = (0..10).map(|i| (i as f64, 3.0)).collect();
        assert_abs_diff_eq!(variance_ratio(&constant).unwrap(), 0.0);
        let double: Vec<Pair> = (0..10).map(|i| (i as f64, 2.0 * i as f64)).collect();
        assert_abs_diff_eq!(variance_ratio(&double).unwrap(), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        // Up to float summation order, which perturbs the last couple of ulps.
        let pairs = vec![(1.0, 1.5), (2.0, 1.8), (3.0, 3.3), (4.0, 4.1)];
        let mut shuffled = pairs.clone();
        shuffled.swap(0, 3);
        shuffled.swap(1, 2);
        assert_abs_diff_eq!(mse(&pairs).unwrap(), mse(&shuffled).unwrap(), epsilon = 1e-12);
        assert_abs_diff_eq!(pearson(&pairs).unwrap(), pearson(&shuffled).unwrap(), epsilon = 1e-12);
        assert_abs_diff_eq!(
            mean_mult(&pairs).unwrap(),
            mean_mult(&shuffled).unwrap(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            variance_ratio(&pairs).unwrap(),
            variance_ratio(&shuffled).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn perfect_oracle_is_consistent_across_metrics() {
        let log_pairs: Vec<Pair> = (1..20).map(|i| (i as f64 / 7.0, i as f64 / 7.0)).collect();
        let phys: Vec<Pair> = log_pairs.iter().map(|(y, e)| (10f64.powf(*y), 10f64.powf(*e))).collect();
        let report = aggregate("volume", "test", &log_pairs, &phys).unwrap();
        assert_abs_diff_eq!(report.mse, 0.0);
        assert_abs_diff_eq!(report.pearson_rho, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.mean_mult, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.variance_ratio, 1.0, epsilon = 1e-12);
    }
}

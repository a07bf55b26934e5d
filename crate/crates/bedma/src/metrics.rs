//! Forecast quality indicators: RMSE, SMAPE, and Pearson correlation.
//!
//! All three are computed on denormalized values so RMSE carries the
//! series' physical units. SMAPE uses the denominator `(y_hat + |y|) / 2`
//! with the prediction deliberately not wrapped in an absolute value; the
//! forecasting pipeline guarantees non-negative predictions through its
//! relu head, and a zero denominator is an error naming the offending
//! index rather than a silent division.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("length mismatch: predictions {predictions} vs actuals {actuals}")]
    LengthMismatch { predictions: usize, actuals: usize },
    #[error("empty input")]
    Empty,
    #[error("need at least {need} samples, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("zero SMAPE denominator at index {index} (prediction {prediction}, actual {actual})")]
    ZeroDenominator {
        index: usize,
        prediction: f64,
        actual: f64,
    },
    #[error("{which} input is constant; correlation is undefined")]
    ConstantInput { which: &'static str },
}

/// Summary of one evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    /// Root mean squared error, in series units.
    pub rmse: f64,
    /// Symmetric mean absolute percentage error as a fraction (0.5 = 50%).
    pub smape: f64,
    /// Pearson correlation coefficient.
    pub r: f64,
    /// Number of scored points.
    pub count: usize,
    pub mean_actual: f64,
    pub mean_predicted: f64,
}

impl MetricsReport {
    /// SMAPE scaled to percent, the conventional reporting unit.
    pub fn smape_percent(&self) -> f64 {
        self.smape * 100.0
    }
}

fn check_lengths(y_hat: &[f64], y: &[f64]) -> Result<(), MetricsError> {
    if y_hat.len() != y.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: y_hat.len(),
            actuals: y.len(),
        });
    }
    if y.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Root mean squared error.
pub fn rmse(y_hat: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_lengths(y_hat, y)?;
    let mse = y_hat
        .iter()
        .zip(y)
        .map(|(p, a)| (p - a) * (p - a))
        .sum::<f64>()
        / y.len() as f64;
    Ok(mse.sqrt())
}

/// Symmetric mean absolute percentage error, as a fraction.
///
/// Denominator per pair: `(y_hat + |y|) / 2`. Fails with the index of the
/// first pair whose denominator is zero.
pub fn smape(y_hat: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_lengths(y_hat, y)?;
    let mut acc = 0.0;
    for (index, (&p, &a)) in y_hat.iter().zip(y).enumerate() {
        let denom = (p + a.abs()) / 2.0;
        if denom == 0.0 {
            return Err(MetricsError::ZeroDenominator {
                index,
                prediction: p,
                actual: a,
            });
        }
        acc += (p - a).abs() / denom;
    }
    Ok(acc / y.len() as f64)
}

/// Pearson correlation coefficient.
///
/// Needs at least two samples, and both inputs must vary: a constant
/// argument has zero variance and the coefficient is undefined.
pub fn pearson_r(y_hat: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_lengths(y_hat, y)?;
    if y.len() < 2 {
        return Err(MetricsError::TooFew {
            need: 2,
            got: y.len(),
        });
    }
    let n = y.len() as f64;
    let mean_p = y_hat.iter().sum::<f64>() / n;
    let mean_a = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_p = 0.0;
    let mut var_a = 0.0;
    for (&p, &a) in y_hat.iter().zip(y) {
        let dp = p - mean_p;
        let da = a - mean_a;
        cov += dp * da;
        var_p += dp * dp;
        var_a += da * da;
    }
    if var_p == 0.0 {
        return Err(MetricsError::ConstantInput {
            which: "prediction",
        });
    }
    if var_a == 0.0 {
        return Err(MetricsError::ConstantInput { which: "actual" });
    }
    Ok(cov / (var_p.sqrt() * var_a.sqrt()))
}

/// Computes all three indicators plus audit fields in one pass.
pub fn report(y_hat: &[f64], y: &[f64]) -> Result<MetricsReport, MetricsError> {
    let rmse = rmse(y_hat, y)?;
    let smape = smape(y_hat, y)?;
    let r = pearson_r(y_hat, y)?;
    let n = y.len() as f64;
    Ok(MetricsReport {
        rmse,
        smape,
        r,
        count: y.len(),
        mean_actual: y.iter().sum::<f64>() / n,
        mean_predicted: y_hat.iter().sum::<f64>() / n,
    })
}

/// One line of an evaluation table.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EvalRow {
    pub model: String,
    pub horizon_steps: usize,
    pub horizon_minutes: u32,
    #[serde(flatten)]
    pub report: MetricsReport,
}

/// Renders evaluation rows as CSV (header included, SMAPE in percent).
pub fn render_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("model,horizon_steps,horizon_minutes,rmse,smape_percent,r,count\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{}\n",
            row.model,
            row.horizon_steps,
            row.horizon_minutes,
            row.report.rmse,
            row.report.smape_percent(),
            row.report.r,
            row.report.count
        ));
    }
    out
}

/// Renders evaluation rows as an aligned text table, one line per model
/// and horizon.
pub fn render_table(rows: &[EvalRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>10} {:>10} {:>9} {:>8}\n",
        "model", "horizon", "rmse", "smape%", "r"
    ));
    for row in rows {
        out.push_str(&format!(
            "{:<10} {:>7} min {:>10.4} {:>9.3} {:>8.4}\n",
            row.model,
            row.horizon_minutes,
            row.report.rmse,
            row.report.smape_percent(),
            row.report.r
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_of_perfect_forecast_is_zero() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn rmse_known_value() {
        let v = rmse(&[3.0, 4.0], &[0.0, 0.0]).unwrap();
        assert!((v - 3.535_533_905_932_737_8).abs() < 1e-15);
    }

    #[test]
    fn rmse_is_symmetric() {
        let a = [1.0, 5.0, -2.0];
        let b = [0.5, 4.0, 1.0];
        assert_eq!(rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
    }

    #[test]
    fn smape_known_values() {
        assert_eq!(smape(&[3.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(smape(&[3.0, 1.0], &[1.0, 1.0]).unwrap(), 0.5);
        assert_eq!(smape(&[2.0, 2.0], &[2.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn smape_zero_denominator_names_the_index() {
        match smape(&[1.0, 0.0], &[1.0, 0.0]) {
            Err(MetricsError::ZeroDenominator { index: 1, .. }) => {}
            other => panic!("expected zero denominator at 1, got {other:?}"),
        }
    }

    #[test]
    fn smape_stays_within_two_for_nonnegative_inputs() {
        let y_hat = [0.0, 1.0, 10.0, 3.0];
        let y = [5.0, 0.0, 0.1, 3.0];
        let v = smape(&y_hat, &y).unwrap();
        assert!((0.0..=2.0).contains(&v));
    }

    #[test]
    fn pearson_of_identical_series_is_one() {
        let y = [1.0, 2.0, 4.0, 8.0];
        assert!((pearson_r(&y, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_of_negated_series_is_minus_one() {
        let y = [1.0, 2.0, 4.0, 8.0];
        let neg: Vec<f64> = y.iter().map(|v| -v + 3.0).collect();
        assert!((pearson_r(&neg, &y).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_is_invariant_under_positive_affine_maps() {
        let y = [0.3, -1.0, 2.5, 0.8, -0.1];
        let y_hat = [0.1, -0.7, 2.0, 1.1, 0.2];
        let mapped: Vec<f64> = y_hat.iter().map(|v| 3.5 * v + 11.0).collect();
        let r1 = pearson_r(&y_hat, &y).unwrap();
        let r2 = pearson_r(&mapped, &y).unwrap();
        assert!((r1 - r2).abs() < 1e-12);
    }

    #[test]
    fn pearson_rejects_constant_inputs() {
        assert!(matches!(
            pearson_r(&[1.0, 1.0], &[1.0, 2.0]),
            Err(MetricsError::ConstantInput {
                which: "prediction"
            })
        ));
        assert!(matches!(
            pearson_r(&[1.0, 2.0], &[5.0, 5.0]),
            Err(MetricsError::ConstantInput { which: "actual" })
        ));
    }

    #[test]
    fn length_mismatch_and_empty_are_rejected() {
        assert!(matches!(
            rmse(&[1.0], &[1.0, 2.0]),
            Err(MetricsError::LengthMismatch { .. })
        ));
        assert!(matches!(rmse(&[], &[]), Err(MetricsError::Empty)));
    }

    // Brute-force reference implementations sharing no code with the
    // library path.
    fn ref_rmse(p: &[f64], a: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..p.len() {
            s += (p[i] - a[i]).powi(2);
        }
        (s / p.len() as f64).powf(0.5)
    }

    fn ref_smape(p: &[f64], a: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..p.len() {
            s += (p[i] - a[i]).abs() / ((p[i] + a[i].abs()) / 2.0);
        }
        s / p.len() as f64
    }

    fn ref_pearson(p: &[f64], a: &[f64]) -> f64 {
        let n = p.len() as f64;
        let (sp, sa): (f64, f64) = (p.iter().sum(), a.iter().sum());
        let spa: f64 = p.iter().zip(a).map(|(x, y)| x * y).sum();
        let spp: f64 = p.iter().map(|x| x * x).sum();
        let saa: f64 = a.iter().map(|x| x * x).sum();
        (n * spa - sp * sa) / ((n * spp - sp * sp).sqrt() * (n * saa - sa * sa).sqrt())
    }

    #[test]
    fn all_metrics_match_independent_evaluation_on_random_vectors() {
        let mut noise = crate::variational::NoiseSource::seeded(20);
        for case in 0..100 {
            let len = 2 + (case % 19);
            let y_hat: Vec<f64> = noise
                .standard_normal("p", len)
                .iter()
                .map(|v| v.abs() + 0.1)
                .collect();
            let y: Vec<f64> = noise
                .standard_normal("a", len)
                .iter()
                .map(|v| v.abs() + 0.1)
                .collect();
            assert!((rmse(&y_hat, &y).unwrap() - ref_rmse(&y_hat, &y)).abs() < 1e-12);
            assert!((smape(&y_hat, &y).unwrap() - ref_smape(&y_hat, &y)).abs() < 1e-12);
            let lib = pearson_r(&y_hat, &y).unwrap();
            let brute = ref_pearson(&y_hat, &y);
            assert!((lib - brute).abs() < 1e-12, "case {case}: {lib} vs {brute}");
        }
    }

    #[test]
    fn report_collects_all_fields() {
        let rep = report(&[1.0, 2.0, 3.0], &[1.5, 2.5, 2.0]).unwrap();
        assert_eq!(rep.count, 3);
        assert!((rep.mean_actual - 2.0).abs() < 1e-15);
        assert!((rep.mean_predicted - 2.0).abs() < 1e-15);
        assert!(rep.rmse > 0.0);
        assert_eq!(rep.smape_percent(), rep.smape * 100.0);
    }

    #[test]
    fn csv_rendering_has_one_line_per_row_plus_header() {
        let rep = report(&[1.0, 2.0], &[1.1, 1.9]).unwrap();
        let rows = vec![
            EvalRow {
                model: "gru-ed".into(),
                horizon_steps: 1,
                horizon_minutes: 10,
                report: rep,
            },
            EvalRow {
                model: "bedma".into(),
                horizon_steps: 6,
                horizon_minutes: 60,
                report: rep,
            },
        ];
        let csv = render_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("model,"));
        let table = render_table(&rows);
        assert!(table.contains("gru-ed"));
        assert!(table.contains("60 min"));
    }
}

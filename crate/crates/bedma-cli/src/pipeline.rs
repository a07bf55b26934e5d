//! Shared plumbing between the subcommands: loading a series, cutting
//! train and test windows, and scoring forecasts.

use bedma::data::{
    impute_missing, load_csv, sliding_windows, synth_series, test_windows, train_split_len,
    NormStats, WindowConfig, WindowedDataset,
};
use bedma::metrics::{report, EvalRow};
use bedma::model::Model;
use bedma::variational::NoiseSource;
use sha2::{Digest, Sha256};

use crate::config::{DataConfig, SourceKind};
use crate::CliError;

/// A loaded, imputed, unnormalized series plus its split point.
pub struct PreparedData {
    /// Road id or synthetic kind, for report labels.
    pub label: String,
    pub step_minutes: u32,
    pub values: Vec<f64>,
    /// Samples before this index train the model; the rest are held out.
    pub train_len: usize,
    /// SHA-256 of the value bytes, for comparing runs.
    pub hash: String,
}

/// Loads the configured source and fixes the chronological split.
///
/// `seed` only matters for synthetic sources, where it drives the noise.
pub fn prepare(data: &DataConfig, seed: u64) -> Result<PreparedData, CliError> {
    let series = match data.source {
        SourceKind::Synthetic => {
            synth_series(data.kind, data.length, data.period, data.noise_std, seed)?
        }
        SourceKind::Csv => {
            let path = data
                .path
                .as_ref()
                .ok_or_else(|| CliError::Config("data.path is required".into()))?;
            let road = data
                .road
                .as_ref()
                .ok_or_else(|| CliError::Config("data.road is required".into()))?;
            load_csv(path, road)?
        }
    };
    let step_minutes = series.step_minutes;
    let values = impute_missing(&series)?.dense()?;
    let train_len = train_split_len(values.len(), data.train_num, data.train_den);

    let mut hasher = Sha256::new();
    for v in &values {
        hasher.update(v.to_le_bytes());
    }
    let hash: String = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();

    Ok(PreparedData {
        label: data.label(),
        step_minutes,
        values,
        train_len,
        hash,
    })
}

impl PreparedData {
    /// Min-max stats over the training span only, so nothing about the
    /// held-out data leaks into the model.
    pub fn fit_train_stats(&self) -> Result<NormStats, CliError> {
        Ok(NormStats::fit(&self.values[..self.train_len])?)
    }

    /// Normalized training windows for the given shape.
    pub fn train_windows(
        &self,
        stats: &NormStats,
        cfg: WindowConfig,
    ) -> Result<WindowedDataset, CliError> {
        let normalized = stats.normalize_slice(&self.values[..self.train_len]);
        let mut ds = sliding_windows(&normalized, cfg)?;
        ds.stats = Some(*stats);
        Ok(ds)
    }

    /// Normalized held-out windows; targets lie entirely in the test span.
    pub fn eval_windows(
        &self,
        stats: &NormStats,
        cfg: WindowConfig,
    ) -> Result<WindowedDataset, CliError> {
        let normalized = stats.normalize_slice(&self.values);
        let mut ds = test_windows(&normalized, self.train_len, cfg)?;
        ds.stats = Some(*stats);
        Ok(ds)
    }
}

/// One point forecast per window, in normalized units.
///
/// `n_mc == 1` runs a single pass with all weights at their posterior
/// means; larger values average that many stochastic draws, seeded per
/// window so reruns match.
pub fn point_forecasts(
    model: &Model,
    windows: &WindowedDataset,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, CliError> {
    let mut out = Vec::with_capacity(windows.len());
    for (i, input) in windows.inputs.iter().enumerate() {
        let window = model.input_window(input)?;
        let forecast = if n_mc <= 1 || !model.cfg.variant.is_variational() {
            let (y, _kl) = model.forward_values(&window, &mut NoiseSource::zero())?;
            y.data().to_vec()
        } else {
            let result = model.predict_mc(&window, n_mc, seed.wrapping_add(i as u64))?;
            result.mean.data().to_vec()
        };
        out.push(forecast);
    }
    Ok(out)
}

/// Scores denormalized forecasts against denormalized targets at each
/// requested horizon step.
pub fn score_horizons(
    model: &Model,
    windows: &WindowedDataset,
    forecasts: &[Vec<f64>],
    horizons: &[usize],
    stats: &NormStats,
    step_minutes: u32,
) -> Result<Vec<EvalRow>, CliError> {
    let trained = model.cfg.horizon;
    let mut rows = Vec::with_capacity(horizons.len());
    for &hz in horizons {
        if hz == 0 || hz > trained {
            return Err(CliError::Config(format!(
                "requested horizon {hz} exceeds the trained horizon {trained}"
            )));
        }
        let mut predicted = Vec::with_capacity(forecasts.len());
        let mut actual = Vec::with_capacity(forecasts.len());
        for (forecast, target) in forecasts.iter().zip(&windows.targets) {
            predicted.push(stats.denormalize_value(forecast[hz - 1]));
            actual.push(stats.denormalize_value(target[hz - 1]));
        }
        let metrics = report(&predicted, &actual)?;
        rows.push(EvalRow {
            model: model.cfg.variant.as_str().to_string(),
            horizon_steps: hz,
            horizon_minutes: hz as u32 * step_minutes,
            report: metrics,
        });
    }
    Ok(rows)
}

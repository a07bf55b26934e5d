//! Series ingestion, imputation, normalization, and windowing.
//!
//! The pipeline runs: load (or synthesize) a series, fill gaps, fit
//! min-max statistics on the training portion only, normalize into
//! `[0, 1]`, then cut sliding windows. Min-max rather than z-scoring is
//! deliberate: the forecaster's output head is a relu, so targets must be
//! non-negative.

use std::path::Path;

use chrono::NaiveDateTime;
use thiserror::Error;

use crate::variational::NoiseSource;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("series has no observed values")]
    AllMissing,
    #[error("series still has a missing value at index {index}; impute first")]
    MissingValues { index: usize },
    #[error("empty value slice")]
    Empty,
    #[error("constant series (every value is {value}); min-max range is undefined")]
    ConstantSeries { value: f64 },
    #[error("series length {len} is shorter than one window ({need})")]
    TooShort { len: usize, need: usize },
    #[error("bad window config: {detail}")]
    BadWindowConfig { detail: String },
    #[error("line {line}: {detail}")]
    MalformedRow { line: u64, detail: String },
    #[error("duplicate timestamp {timestamp}")]
    DuplicateTimestamp { timestamp: String },
    #[error("timestamp {timestamp} is not on the {step_minutes}-minute grid")]
    OffGridTimestamp { timestamp: String, step_minutes: u32 },
    #[error("no rows found for road id {road_id:?}")]
    EmptySelection { road_id: String },
    #[error("bad synthetic series spec: {detail}")]
    BadSynthSpec { detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// A regularly sampled univariate series; `None` marks a missing reading.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub road_id: String,
    /// Timestamp of the first sample, when known.
    pub start: Option<NaiveDateTime>,
    /// Fixed sampling interval.
    pub step_minutes: u32,
    pub values: Vec<Option<f64>>,
}

impl Series {
    /// A fully observed series without calendar anchoring.
    pub fn from_values(road_id: impl Into<String>, step_minutes: u32, values: Vec<f64>) -> Self {
        Series {
            road_id: road_id.into(),
            start: None,
            step_minutes,
            values: values.into_iter().map(Some).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    /// Unwraps into plain values; fails on any remaining gap.
    pub fn dense(&self) -> Result<Vec<f64>, DataError> {
        self.values
            .iter()
            .enumerate()
            .map(|(index, v)| v.ok_or(DataError::MissingValues { index }))
            .collect()
    }
}

/// Fills gaps: interior runs by linear interpolation between the nearest
/// observed neighbors, leading and trailing runs with the nearest
/// observed value.
pub fn impute_missing(series: &Series) -> Result<Series, DataError> {
    let n = series.len();
    let observed: Vec<usize> = (0..n).filter(|&i| series.values[i].is_some()).collect();
    if observed.is_empty() {
        return Err(DataError::AllMissing);
    }
    let mut values = Vec::with_capacity(n);
    let mut next_obs = 0;
    for i in 0..n {
        if let Some(v) = series.values[i] {
            values.push(Some(v));
            continue;
        }
        while next_obs < observed.len() && observed[next_obs] < i {
            next_obs += 1;
        }
        let right = observed.get(next_obs).copied();
        let left = if next_obs > 0 {
            Some(observed[next_obs - 1])
        } else {
            None
        };
        let filled = match (left, right) {
            (Some(l), Some(r)) => {
                let lv = series.values[l].expect("observed");
                let rv = series.values[r].expect("observed");
                let frac = (i - l) as f64 / (r - l) as f64;
                lv + frac * (rv - lv)
            }
            (Some(l), None) => series.values[l].expect("observed"),
            (None, Some(r)) => series.values[r].expect("observed"),
            (None, None) => unreachable!("observed is non-empty"),
        };
        values.push(Some(filled));
    }
    Ok(Series {
        road_id: series.road_id.clone(),
        start: series.start,
        step_minutes: series.step_minutes,
        values,
    })
}

/// Min-max statistics fitted on the training portion of a series.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub min: f64,
    pub max: f64,
}

impl NormStats {
    /// Fits on a slice; a constant slice is an error rather than a later
    /// division by zero.
    pub fn fit(values: &[f64]) -> Result<Self, DataError> {
        if values.is_empty() {
            return Err(DataError::Empty);
        }
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if min == max {
            return Err(DataError::ConstantSeries { value: min });
        }
        Ok(NormStats { min, max })
    }

    pub fn normalize_value(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }

    pub fn denormalize_value(&self, v: f64) -> f64 {
        self.min + v * (self.max - self.min)
    }

    pub fn normalize_slice(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.normalize_value(v)).collect()
    }

    pub fn denormalize_slice(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.denormalize_value(v)).collect()
    }
}

/// Normalizes a slice into `[0, 1]` with stats fitted on that same slice.
///
/// When training and test portions differ, fit [`NormStats`] on the
/// training slice instead and apply it to both.
pub fn normalize(values: &[f64]) -> Result<(Vec<f64>, NormStats), DataError> {
    let stats = NormStats::fit(values)?;
    Ok((stats.normalize_slice(values), stats))
}

pub fn denormalize(values: &[f64], stats: &NormStats) -> Vec<f64> {
    stats.denormalize_slice(values)
}

/// Window geometry: input length `t`, target horizon `r`, stride `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct WindowConfig {
    pub t: usize,
    pub r: usize,
    pub s: usize,
}

impl WindowConfig {
    pub fn new(t: usize, r: usize, s: usize) -> Result<Self, DataError> {
        if t < 1 || r < 1 || s < 1 {
            return Err(DataError::BadWindowConfig {
                detail: format!("t={t}, r={r}, s={s} must all be at least 1"),
            });
        }
        Ok(WindowConfig { t, r, s })
    }

    /// Number of windows a series of length `len` yields.
    pub fn count(&self, len: usize) -> usize {
        if len < self.t + self.r {
            0
        } else {
            (len - self.t - self.r) / self.s + 1
        }
    }
}

/// Input/target window pairs cut from one series.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    /// `inputs[i]` has length `t`.
    pub inputs: Vec<Vec<f64>>,
    /// `targets[i]` has length `r` and directly follows `inputs[i]` in the
    /// source series.
    pub targets: Vec<Vec<f64>>,
    pub cfg: WindowConfig,
    /// Present when the windows were cut from a normalized series.
    pub stats: Option<NormStats>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Cuts every stride-aligned window from `values`.
///
/// Window `i` (0-based) covers inputs `values[s*i .. s*i + t]` and targets
/// `values[s*i + t .. s*i + t + r]`.
pub fn sliding_windows(values: &[f64], cfg: WindowConfig) -> Result<WindowedDataset, DataError> {
    let need = cfg.t + cfg.r;
    if values.len() < need {
        return Err(DataError::TooShort {
            len: values.len(),
            need,
        });
    }
    let n = cfg.count(values.len());
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let a = cfg.s * i;
        inputs.push(values[a..a + cfg.t].to_vec());
        targets.push(values[a + cfg.t..a + cfg.t + cfg.r].to_vec());
    }
    Ok(WindowedDataset {
        inputs,
        targets,
        cfg,
        stats: None,
    })
}

/// Windows whose targets lie entirely beyond `train_len`, at stride 1.
///
/// Inputs may reach back across the boundary; this is the evaluation
/// protocol, where the model may condition on the most recent training
/// observations but is scored only on unseen targets.
pub fn test_windows(
    values: &[f64],
    train_len: usize,
    cfg: WindowConfig,
) -> Result<WindowedDataset, DataError> {
    let need = cfg.t + cfg.r;
    if values.len() < need {
        return Err(DataError::TooShort {
            len: values.len(),
            need,
        });
    }
    let eval_cfg = WindowConfig { s: 1, ..cfg };
    let first = train_len.saturating_sub(cfg.t);
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for a in first..=values.len().saturating_sub(need) {
        if a + cfg.t < train_len {
            continue;
        }
        inputs.push(values[a..a + cfg.t].to_vec());
        targets.push(values[a + cfg.t..a + cfg.t + cfg.r].to_vec());
    }
    Ok(WindowedDataset {
        inputs,
        targets,
        cfg: eval_cfg,
        stats: None,
    })
}

/// Training-portion length for a fractional split, `len * num / den`.
pub fn train_split_len(len: usize, num: usize, den: usize) -> usize {
    assert!(den > 0 && num <= den, "fraction must be within [0, 1]");
    len * num / den
}

/// Kinds of synthetic benchmark series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SynthKind {
    #[serde(rename = "sine")]
    Sine,
    #[serde(rename = "sine+trend")]
    SineTrend,
    #[serde(rename = "sine+noise")]
    SineNoise,
}

impl std::fmt::Display for SynthKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SynthKind::Sine => "sine",
            SynthKind::SineTrend => "sine+trend",
            SynthKind::SineNoise => "sine+noise",
        })
    }
}

impl std::str::FromStr for SynthKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "sine" => Ok(SynthKind::Sine),
            "sine+trend" => Ok(SynthKind::SineTrend),
            "sine+noise" => Ok(SynthKind::SineNoise),
            other => Err(DataError::BadSynthSpec {
                detail: format!("unknown kind {other:?}; expected sine, sine+trend, sine+noise"),
            }),
        }
    }
}

/// Deterministic synthetic series on a 10-minute grid.
///
/// The base signal is `0.5 + 0.4 sin(2 pi k / period)` at sample `k`.
/// `sine+trend` adds a linear ramp of 0.2 across the full length;
/// `sine+noise` adds i.i.d. Gaussian noise with standard deviation
/// `noise_std`. Everything derives from `seed`, so the same arguments
/// always produce the same series.
pub fn synth_series(
    kind: SynthKind,
    length: usize,
    period: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Series, DataError> {
    if length < 1 {
        return Err(DataError::BadSynthSpec {
            detail: "length must be at least 1".into(),
        });
    }
    if period < 2 {
        return Err(DataError::BadSynthSpec {
            detail: format!("period {period} must be at least 2"),
        });
    }
    if noise_std < 0.0 || !noise_std.is_finite() {
        return Err(DataError::BadSynthSpec {
            detail: format!("noise_std {noise_std} must be finite and non-negative"),
        });
    }
    let mut values: Vec<f64> = (0..length)
        .map(|k| 0.5 + 0.4 * (2.0 * std::f64::consts::PI * k as f64 / period as f64).sin())
        .collect();
    match kind {
        SynthKind::Sine => {}
        SynthKind::SineTrend => {
            let denom = (length.max(2) - 1) as f64;
            for (k, v) in values.iter_mut().enumerate() {
                *v += 0.2 * k as f64 / denom;
            }
        }
        SynthKind::SineNoise => {
            let mut noise = NoiseSource::seeded(seed);
            let eps = noise.standard_normal("synth", length);
            for (v, e) in values.iter_mut().zip(eps) {
                *v += noise_std * e;
            }
        }
    }
    Ok(Series::from_values("synthetic", 10, values))
}

/// Loads one road's series from a `timestamp,road_id,speed` CSV.
///
/// Rows are filtered to `road_id` and sorted by timestamp; the sampling
/// interval is inferred as the smallest gap between consecutive readings,
/// and grid slots without a reading become missing markers. An empty
/// speed field is an in-place missing marker.
pub fn load_csv(path: &Path, road_id: &str) -> Result<Series, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected = ["timestamp", "road_id", "speed"];
    let header_fields: Vec<&str> = headers.iter().collect();
    if header_fields != expected {
        return Err(DataError::MalformedRow {
            line: 1,
            detail: format!("header {header_fields:?}, expected {expected:?}"),
        });
    }

    let mut rows: Vec<(NaiveDateTime, Option<f64>)> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or(0);
        let ts_str = record.get(0).unwrap_or("");
        let road = record.get(1).unwrap_or("");
        if road != road_id {
            continue;
        }
        let timestamp = parse_timestamp(ts_str).ok_or_else(|| DataError::MalformedRow {
            line,
            detail: format!("unparseable timestamp {ts_str:?}"),
        })?;
        let speed_str = record.get(2).unwrap_or("").trim();
        let speed = if speed_str.is_empty() {
            None
        } else {
            Some(
                speed_str
                    .parse::<f64>()
                    .map_err(|e| DataError::MalformedRow {
                        line,
                        detail: format!("bad speed {speed_str:?}: {e}"),
                    })?,
            )
        };
        rows.push((timestamp, speed));
    }
    if rows.is_empty() {
        return Err(DataError::EmptySelection {
            road_id: road_id.to_string(),
        });
    }
    rows.sort_by_key(|(ts, _)| *ts);

    for pair in rows.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(DataError::DuplicateTimestamp {
                timestamp: pair[0].0.to_string(),
            });
        }
    }

    let step_minutes = infer_step_minutes(&rows)?;
    let start = rows[0].0;
    let step = chrono::Duration::minutes(step_minutes as i64);
    let span = rows.last().expect("non-empty").0 - start;
    let slots = (span.num_minutes() / step.num_minutes()) as usize + 1;
    let mut values: Vec<Option<f64>> = vec![None; slots];
    for (ts, speed) in &rows {
        let offset = (*ts - start).num_minutes();
        if offset % step.num_minutes() != 0 {
            return Err(DataError::OffGridTimestamp {
                timestamp: ts.to_string(),
                step_minutes,
            });
        }
        values[(offset / step.num_minutes()) as usize] = *speed;
    }
    Ok(Series {
        road_id: road_id.to_string(),
        start: Some(start),
        step_minutes,
        values,
    })
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .ok()
}

fn infer_step_minutes(rows: &[(NaiveDateTime, Option<f64>)]) -> Result<u32, DataError> {
    if rows.len() < 2 {
        return Ok(10);
    }
    let mut smallest = i64::MAX;
    for pair in rows.windows(2) {
        let gap = (pair[1].0 - pair[0].0).num_minutes();
        if gap > 0 {
            smallest = smallest.min(gap);
        }
    }
    if smallest <= 0 || smallest == i64::MAX || smallest > u32::MAX as i64 {
        return Err(DataError::MalformedRow {
            line: 0,
            detail: "cannot infer a sampling interval".into(),
        });
    }
    Ok(smallest as u32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn series_of(values: Vec<Option<f64>>) -> Series {
        Series {
            road_id: "r".into(),
            start: None,
            step_minutes: 10,
            values,
        }
    }

    #[test]
    fn interior_gap_is_linearly_interpolated() {
        let s = series_of(vec![Some(10.0), None, Some(20.0)]);
        let out = impute_missing(&s).unwrap();
        assert_eq!(out.dense().unwrap(), vec![10.0, 15.0, 20.0]);
    }

    #[test]
    fn leading_gap_takes_nearest_value() {
        let s = series_of(vec![None, None, Some(7.0), Some(9.0)]);
        let out = impute_missing(&s).unwrap();
        assert_eq!(out.dense().unwrap(), vec![7.0, 7.0, 7.0, 9.0]);
    }

    #[test]
    fn trailing_gap_takes_nearest_value() {
        let s = series_of(vec![Some(3.0), None, None]);
        let out = impute_missing(&s).unwrap();
        assert_eq!(out.dense().unwrap(), vec![3.0, 3.0, 3.0]);
    }

    #[test]
    fn fully_observed_series_is_unchanged() {
        let s = series_of(vec![Some(1.0), Some(2.0)]);
        assert_eq!(impute_missing(&s).unwrap(), s);
    }

    #[test]
    fn all_missing_is_an_error() {
        let s = series_of(vec![None, None]);
        assert!(matches!(impute_missing(&s), Err(DataError::AllMissing)));
    }

    #[test]
    fn long_interior_gap_interpolates_all_points() {
        let s = series_of(vec![Some(0.0), None, None, None, Some(8.0)]);
        let out = impute_missing(&s).unwrap();
        assert_eq!(out.dense().unwrap(), vec![0.0, 2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn normalize_maps_to_unit_interval() {
        let (normed, stats) = normalize(&[0.0, 5.0, 10.0]).unwrap();
        assert_eq!(normed, vec![0.0, 0.5, 1.0]);
        assert_eq!(stats, NormStats { min: 0.0, max: 10.0 });
    }

    #[test]
    fn normalize_roundtrips_exactly_enough() {
        let values = vec![3.7, -1.2, 8.8, 0.01, 4.4];
        let (normed, stats) = normalize(&values).unwrap();
        for (orig, back) in values.iter().zip(denormalize(&normed, &stats)) {
            assert!((orig - back).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_series_cannot_be_normalized() {
        assert!(matches!(
            normalize(&[2.0, 2.0, 2.0]),
            Err(DataError::ConstantSeries { .. })
        ));
    }

    #[test]
    fn stats_fitted_on_train_ignore_test_values() {
        let mut values: Vec<f64> = (0..100).map(|i| (i as f64 * 0.3).sin()).collect();
        let train_len = train_split_len(values.len(), 48, 61);
        let before = NormStats::fit(&values[..train_len]).unwrap();
        for v in values[train_len..].iter_mut() {
            *v += 1000.0;
        }
        let after = NormStats::fit(&values[..train_len]).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn window_enumeration_matches_contract() {
        let values = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ds = sliding_windows(&values, WindowConfig::new(2, 1, 1).unwrap()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.inputs[0], vec![1.0, 2.0]);
        assert_eq!(ds.targets[0], vec![3.0]);
        assert_eq!(ds.inputs[2], vec![3.0, 4.0]);
        assert_eq!(ds.targets[2], vec![5.0]);
    }

    #[test]
    fn exact_length_gives_one_window() {
        let ds = sliding_windows(&[1.0, 2.0, 3.0], WindowConfig::new(2, 1, 1).unwrap()).unwrap();
        assert_eq!(ds.len(), 1);
    }

    #[test]
    fn strided_count_matches_formula() {
        let values: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ds = sliding_windows(&values, WindowConfig::new(3, 2, 2).unwrap()).unwrap();
        assert_eq!(ds.len(), 3);
    }

    #[test]
    fn too_short_series_is_rejected() {
        assert!(matches!(
            sliding_windows(&[1.0, 2.0], WindowConfig::new(2, 1, 1).unwrap()),
            Err(DataError::TooShort { .. })
        ));
    }

    #[test]
    fn window_count_formula_exhaustive_small_lengths() {
        for len in 2..=30usize {
            let values: Vec<f64> = (0..len).map(|i| i as f64).collect();
            for t in 1..len {
                for r in 1..=(len - t) {
                    for s in 1..=4 {
                        let cfg = WindowConfig::new(t, r, s).unwrap();
                        let ds = sliding_windows(&values, cfg).unwrap();
                        let expected = (len - t - r) / s + 1;
                        assert_eq!(ds.len(), expected, "len={len} t={t} r={r} s={s}");
                    }
                }
            }
        }
    }

    #[test]
    fn windows_are_verbatim_slices() {
        let values: Vec<f64> = (0..40).map(|i| (i as f64).sqrt()).collect();
        let cfg = WindowConfig::new(5, 3, 2).unwrap();
        let ds = sliding_windows(&values, cfg).unwrap();
        for i in 0..ds.len() {
            let a = cfg.s * i;
            assert_eq!(ds.inputs[i], &values[a..a + cfg.t]);
            assert_eq!(ds.targets[i], &values[a + cfg.t..a + cfg.t + cfg.r]);
        }
    }

    #[test]
    fn test_windows_cover_every_test_target() {
        let values: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let cfg = WindowConfig::new(4, 2, 3).unwrap();
        let train_len = 20;
        let ds = test_windows(&values, train_len, cfg).unwrap();
        // First window's targets start exactly at the boundary.
        assert_eq!(ds.inputs[0], &values[16..20]);
        assert_eq!(ds.targets[0], &values[20..22]);
        // Last window's targets end at the series end.
        assert_eq!(ds.targets.last().unwrap(), &values[28..30]);
        // Stride 1 regardless of the training stride.
        assert_eq!(ds.len(), 9);
    }

    #[test]
    fn sine_peak_matches_formula() {
        let s = synth_series(SynthKind::Sine, 200, 144, 0.0, 1).unwrap();
        let v = s.dense().unwrap();
        assert!((v[36] - 0.9).abs() < 1e-12);
        assert!((v[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn synth_is_deterministic_per_seed() {
        let a = synth_series(SynthKind::SineNoise, 500, 144, 0.05, 7).unwrap();
        let b = synth_series(SynthKind::SineNoise, 500, 144, 0.05, 7).unwrap();
        let c = synth_series(SynthKind::SineNoise, 500, 144, 0.05, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn noise_level_matches_requested_std() {
        let n = 10_000;
        let noisy = synth_series(SynthKind::SineNoise, n, 144, 0.05, 3).unwrap();
        let clean = synth_series(SynthKind::Sine, n, 144, 0.0, 3).unwrap();
        let residuals: Vec<f64> = noisy
            .dense()
            .unwrap()
            .iter()
            .zip(clean.dense().unwrap())
            .map(|(a, b)| a - b)
            .collect();
        let mean = residuals.iter().sum::<f64>() / n as f64;
        let var = residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let std = var.sqrt();
        assert!((0.04..=0.06).contains(&std), "sample std {std}");
    }

    #[test]
    fn trend_kind_ramps_linearly() {
        let s = synth_series(SynthKind::SineTrend, 101, 4, 0.0, 1).unwrap();
        let v = s.dense().unwrap();
        // Samples 0 and 100 share the sine phase, so they differ by the ramp.
        assert!((v[100] - v[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn bad_synth_specs_are_rejected() {
        assert!(synth_series(SynthKind::Sine, 0, 144, 0.0, 1).is_err());
        assert!(synth_series(SynthKind::Sine, 10, 1, 0.0, 1).is_err());
        assert!(synth_series(SynthKind::SineNoise, 10, 144, -0.1, 1).is_err());
    }

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_roundtrip_for_one_road() {
        let f = write_csv(
            "timestamp,road_id,speed\n\
             2016-08-01T00:00:00,R1,31.5\n\
             2016-08-01T00:10:00,R2,99.0\n\
             2016-08-01T00:10:00,R1,30.0\n\
             2016-08-01T00:20:00,R1,28.25\n",
        );
        let s = load_csv(f.path(), "R1").unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.step_minutes, 10);
        assert_eq!(s.dense().unwrap(), vec![31.5, 30.0, 28.25]);
    }

    #[test]
    fn out_of_order_rows_are_sorted() {
        let f = write_csv(
            "timestamp,road_id,speed\n\
             2016-08-01T00:20:00,R1,3.0\n\
             2016-08-01T00:00:00,R1,1.0\n\
             2016-08-01T00:10:00,R1,2.0\n",
        );
        let s = load_csv(f.path(), "R1").unwrap();
        assert_eq!(s.dense().unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn grid_gaps_become_missing_markers() {
        let f = write_csv(
            "timestamp,road_id,speed\n\
             2016-08-01T00:00:00,R1,1.0\n\
             2016-08-01T00:30:00,R1,4.0\n\
             2016-08-01T00:40:00,R1,5.0\n",
        );
        let s = load_csv(f.path(), "R1").unwrap();
        assert_eq!(s.step_minutes, 10);
        assert_eq!(s.len(), 5);
        assert_eq!(s.missing_count(), 2);
        assert_eq!(s.values[1], None);
        assert_eq!(s.values[2], None);
    }

    #[test]
    fn malformed_speed_reports_line_number() {
        let f = write_csv(
            "timestamp,road_id,speed\n\
             2016-08-01T00:00:00,R1,1.0\n\
             2016-08-01T00:10:00,R1,not-a-number\n",
        );
        match load_csv(f.path(), "R1") {
            Err(DataError::MalformedRow { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected malformed row, got {other:?}"),
        }
    }

    #[test]
    fn unknown_road_is_an_empty_selection() {
        let f = write_csv("timestamp,road_id,speed\n2016-08-01T00:00:00,R1,1.0\n");
        assert!(matches!(
            load_csv(f.path(), "R9"),
            Err(DataError::EmptySelection { .. })
        ));
    }

    #[test]
    fn empty_speed_field_is_a_missing_marker() {
        let f = write_csv(
            "timestamp,road_id,speed\n\
             2016-08-01T00:00:00,R1,1.0\n\
             2016-08-01T00:10:00,R1,\n\
             2016-08-01T00:20:00,R1,3.0\n",
        );
        let s = load_csv(f.path(), "R1").unwrap();
        assert_eq!(s.values[1], None);
        let filled = impute_missing(&s).unwrap();
        assert_eq!(filled.dense().unwrap(), vec![1.0, 2.0, 3.0]);
    }
}

//! The five subcommands, as plain functions over [`RunConfig`].
//!
//! Each function returns its human-readable output as a string and
//! leaves printing to the caller, so tests can assert on the exact
//! bytes. Files land only inside the configured output directory.

use std::fs;
use std::path::{Path, PathBuf};

use bedma::check::{run_gradcheck, CheckReport, Fault};
use bedma::data::WindowConfig;
use bedma::metrics::{render_csv, render_table, EvalRow};
use bedma::model::checkpoint::{load_checkpoint, save_checkpoint};
use bedma::model::Model;
use bedma::training::train;
use bedma::{build_model, Variant};

use crate::config::{RunConfig, SeedMode};
use crate::pipeline::{point_forecasts, prepare, score_horizons, PreparedData};
use crate::CliError;

/// Artifacts written by one training run.
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub model: Model,
    pub summary: String,
}

fn window_config(cfg: &RunConfig) -> Result<WindowConfig, CliError> {
    WindowConfig::new(cfg.model.window, cfg.model.horizon, 1).map_err(CliError::from)
}

/// Trains one model per the resolved config and writes `model.bsfc`,
/// `history.csv`, `timing.csv`, and `manifest.toml` into `cfg.out`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    let prepared = prepare(&cfg.data, cfg.seed)?;
    let stats = prepared.fit_train_stats()?;
    let dataset = prepared.train_windows(&stats, window_config(cfg)?)?;
    if dataset.is_empty() {
        return Err(CliError::Data(format!(
            "training span of {} samples yields no {}+{} windows",
            prepared.train_len, cfg.model.window, cfg.model.horizon
        )));
    }

    let mut model = build_model(&cfg.model, cfg.seed)?;
    model.stats = Some(stats);
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    let history = train(&mut model, &dataset, &train_cfg)?;

    fs::create_dir_all(&cfg.out)?;
    let checkpoint = cfg.out.join("model.bsfc");
    save_checkpoint(&model, &checkpoint)?;
    let history_path = cfg.out.join("history.csv");
    fs::write(&history_path, history.to_csv())?;
    fs::write(cfg.out.join("timing.csv"), history.timing_csv())?;
    fs::write(cfg.out.join("manifest.toml"), cfg.to_toml()?)?;

    let info = model.train_info.as_ref().expect("set by train");
    let summary = format!(
        "trained {} on {} ({} windows, seed {})\n\
         epochs run {}, best epoch {}, train loss {:.6}, val loss {:.6}\n\
         wrote {}\n",
        cfg.model.variant.as_str(),
        prepared.label,
        dataset.len(),
        cfg.seed,
        info.epochs_run,
        info.best_epoch,
        info.final_train_loss,
        info.final_val_loss,
        checkpoint.display(),
    );
    Ok(TrainOutcome {
        checkpoint,
        history: history_path,
        model,
        summary,
    })
}

/// Inputs for `evaluate`, after flag merging.
pub struct EvaluateSpec {
    pub checkpoint: PathBuf,
    pub cfg: RunConfig,
    /// Horizon steps to score; empty means every step up to the trained
    /// horizon.
    pub horizons: Vec<usize>,
    /// Stochastic draws per forecast; 1 evaluates at the posterior means.
    pub n_mc: usize,
    /// Where to write `report.csv` and `report.txt`; stdout-only if unset.
    pub out: Option<PathBuf>,
}

/// Scores a checkpoint on the held-out span at each requested horizon.
pub fn cmd_evaluate(spec: &EvaluateSpec) -> Result<String, CliError> {
    let model = load_checkpoint(&spec.checkpoint)?;
    let rows = evaluate_model(&model, &spec.cfg, &spec.horizons, spec.n_mc)?;
    let table = render_table(&rows);
    if let Some(dir) = &spec.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), render_csv(&rows))?;
        fs::write(dir.join("report.txt"), &table)?;
    }
    Ok(table)
}

/// Evaluation core shared with `benchmark`: forecast the held-out
/// windows and score the requested horizon steps.
pub fn evaluate_model(
    model: &Model,
    cfg: &RunConfig,
    horizons: &[usize],
    n_mc: usize,
) -> Result<Vec<EvalRow>, CliError> {
    let horizons: Vec<usize> = if horizons.is_empty() {
        (1..=model.cfg.horizon).collect()
    } else {
        horizons.to_vec()
    };
    for &hz in &horizons {
        if hz == 0 || hz > model.cfg.horizon {
            return Err(CliError::Config(format!(
                "requested horizon {hz} exceeds the trained horizon {}",
                model.cfg.horizon
            )));
        }
    }
    let stats = model.stats.ok_or_else(|| {
        CliError::Data("checkpoint carries no normalization stats; retrain first".into())
    })?;
    let prepared = prepare(&cfg.data, cfg.seed)?;
    let wcfg = WindowConfig::new(model.cfg.window, model.cfg.horizon, 1)?;
    let windows = prepared.eval_windows(&stats, wcfg)?;
    if windows.is_empty() {
        return Err(CliError::Data(
            "held-out span is shorter than one window".into(),
        ));
    }
    let forecasts = point_forecasts(model, &windows, n_mc, cfg.seed)?;
    score_horizons(
        model,
        &windows,
        &forecasts,
        &horizons,
        &stats,
        prepared.step_minutes,
    )
}

/// Inputs for `predict`, after flag merging.
pub struct PredictSpec {
    pub checkpoint: PathBuf,
    pub cfg: RunConfig,
    pub n_mc: usize,
    pub out: Option<PathBuf>,
}

/// Forecasts the next horizon from the latest observations, with a
/// two-sigma band from `n_mc` posterior draws.
pub fn cmd_predict(spec: &PredictSpec) -> Result<String, CliError> {
    let model = load_checkpoint(&spec.checkpoint)?;
    let stats = model.stats.ok_or_else(|| {
        CliError::Data("checkpoint carries no normalization stats; retrain first".into())
    })?;
    let prepared = prepare(&spec.cfg.data, spec.cfg.seed)?;
    let t = model.cfg.window;
    if prepared.values.len() < t {
        return Err(CliError::Data(format!(
            "series has {} samples but the model needs {t}",
            prepared.values.len()
        )));
    }
    let latest = &prepared.values[prepared.values.len() - t..];
    let normalized = stats.normalize_slice(latest);
    let window = model.input_window(&normalized)?;
    let result = model.predict_mc(&window, spec.n_mc, spec.cfg.seed)?;

    let mean = stats.denormalize_slice(result.mean.data());
    let lower = stats.denormalize_slice(result.interval.0.data());
    let upper = stats.denormalize_slice(result.interval.1.data());

    let mut text = format!(
        "{:>5} {:>8} {:>10} {:>10} {:>10}\n",
        "step", "minutes", "mean", "lower", "upper"
    );
    let mut csv = String::from("step,minutes,mean,lower,upper\n");
    for i in 0..mean.len() {
        let minutes = (i as u32 + 1) * prepared.step_minutes;
        text.push_str(&format!(
            "{:>5} {:>8} {:>10.4} {:>10.4} {:>10.4}\n",
            i + 1,
            minutes,
            mean[i],
            lower[i],
            upper[i]
        ));
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            i + 1,
            minutes,
            mean[i],
            lower[i],
            upper[i]
        ));
    }
    if let Some(dir) = &spec.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("predictions.csv"), &csv)?;
    }
    Ok(text)
}

/// One trained-and-scored grid cell.
pub struct BenchCell {
    pub variant: Variant,
    pub repeat: usize,
    pub result: Result<Vec<EvalRow>, String>,
}

/// Outcome of the full variant grid.
pub struct BenchOutcome {
    pub cells: Vec<BenchCell>,
    pub table: String,
    pub failed: usize,
}

/// Trains every variant `repeats` times on one shared dataset and
/// reports mean metrics per variant and horizon.
pub fn cmd_benchmark(cfg: &RunConfig) -> Result<BenchOutcome, CliError> {
    cfg.validate()?;
    let prepared = prepare(&cfg.data, cfg.seed)?;
    let stats = prepared.fit_train_stats()?;
    let dataset = prepared.train_windows(&stats, window_config(cfg)?)?;
    if dataset.is_empty() {
        return Err(CliError::Data(
            "training span yields no windows for the configured shape".into(),
        ));
    }

    let repeats = cfg.benchmark.repeats;
    let horizons = cfg.benchmark.resolved_horizons(cfg.model.horizon);
    let mut cells = Vec::with_capacity(Variant::ALL.len() * repeats);
    for &variant in &Variant::ALL {
        for repeat in 0..repeats {
            let train_seed = match cfg.benchmark.seed_mode {
                SeedMode::Vary => cfg.seed.wrapping_add(repeat as u64),
                SeedMode::Fixed => cfg.seed,
            };
            let result = bench_cell(cfg, &prepared, variant, train_seed, &horizons);
            cells.push(BenchCell {
                variant,
                repeat,
                result: result.map_err(|e| e.to_string()),
            });
        }
    }

    let failed = cells.iter().filter(|c| c.result.is_err()).count();
    let mut table = format!(
        "dataset {} ({} samples, sha256 {})\n",
        prepared.label,
        prepared.values.len(),
        &prepared.hash[..16],
    );
    table.push_str(&format!(
        "{} repeats per variant, seed {} ({:?} per repeat)\n\n",
        repeats, cfg.seed, cfg.benchmark.seed_mode
    ));
    table.push_str(&render_grid(cfg, &horizons, &cells));
    for cell in cells.iter().filter(|c| c.result.is_err()) {
        if let Err(msg) = &cell.result {
            table.push_str(&format!(
                "failed: {} repeat {}: {}\n",
                cell.variant.as_str(),
                cell.repeat,
                msg
            ));
        }
    }

    if let Some(parent) = non_empty_dir(&cfg.out) {
        fs::create_dir_all(parent)?;
        fs::write(parent.join("benchmark.txt"), &table)?;
        fs::write(parent.join("benchmark.csv"), render_cells_csv(&cells))?;
    }

    Ok(BenchOutcome {
        failed,
        table,
        cells,
    })
}

fn non_empty_dir(p: &Path) -> Option<&Path> {
    if p.as_os_str().is_empty() {
        None
    } else {
        Some(p)
    }
}

fn bench_cell(
    cfg: &RunConfig,
    prepared: &PreparedData,
    variant: Variant,
    train_seed: u64,
    horizons: &[usize],
) -> Result<Vec<EvalRow>, CliError> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.variant = variant;
    let stats = prepared.fit_train_stats()?;
    let dataset = prepared.train_windows(&stats, WindowConfig::new(model_cfg.window, model_cfg.horizon, 1)?)?;

    let mut model = build_model(&model_cfg, train_seed)?;
    model.stats = Some(stats);
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = train_seed;
    train(&mut model, &dataset, &train_cfg)?;

    let wcfg = WindowConfig::new(model_cfg.window, model_cfg.horizon, 1)?;
    let windows = prepared.eval_windows(&stats, wcfg)?;
    let forecasts = point_forecasts(&model, &windows, 1, train_seed)?;
    score_horizons(
        &model,
        &windows,
        &forecasts,
        horizons,
        &stats,
        prepared.step_minutes,
    )
}

/// Mean metrics per variant and horizon, variants as rows.
fn render_grid(cfg: &RunConfig, horizons: &[usize], cells: &[BenchCell]) -> String {
    let mut out = String::from("variant   ");
    for &hz in horizons {
        let minutes = hz as u32 * cfg.data.step_minutes;
        out.push_str(&format!(
            " | {:>9} {:>8} {:>7}",
            format!("rmse@{minutes}m"),
            "smape%",
            "r"
        ));
    }
    out.push('\n');
    for &variant in &Variant::ALL {
        out.push_str(&format!("{:<10}", variant.as_str()));
        for (i, _hz) in horizons.iter().enumerate() {
            let rows: Vec<&EvalRow> = cells
                .iter()
                .filter(|c| c.variant == variant)
                .filter_map(|c| c.result.as_ref().ok())
                .map(|rows| &rows[i])
                .collect();
            if rows.is_empty() {
                out.push_str(&format!(" | {:>9} {:>8} {:>7}", "-", "-", "-"));
            } else {
                let n = rows.len() as f64;
                let rmse = rows.iter().map(|r| r.report.rmse).sum::<f64>() / n;
                let smape = rows.iter().map(|r| r.report.smape_percent()).sum::<f64>() / n;
                let r = rows.iter().map(|r| r.report.r).sum::<f64>() / n;
                out.push_str(&format!(" | {rmse:>9.4} {smape:>8.3} {r:>7.4}"));
            }
        }
        out.push('\n');
    }
    out
}

/// Every cell row, unaggregated, for downstream analysis.
fn render_cells_csv(cells: &[BenchCell]) -> String {
    let mut out = String::from(
        "variant,repeat,horizon_steps,horizon_minutes,rmse,smape_percent,r,count,status\n",
    );
    for cell in cells {
        match &cell.result {
            Ok(rows) => {
                for row in rows {
                    out.push_str(&format!(
                        "{},{},{},{},{:.6},{:.6},{:.6},{},ok\n",
                        cell.variant.as_str(),
                        cell.repeat,
                        row.horizon_steps,
                        row.horizon_minutes,
                        row.report.rmse,
                        row.report.smape_percent(),
                        row.report.r,
                        row.report.count
                    ));
                }
            }
            Err(_) => {
                out.push_str(&format!(
                    "{},{},,,,,,,failed\n",
                    cell.variant.as_str(),
                    cell.repeat
                ));
            }
        }
    }
    out
}

/// Runs the finite-difference gradient checks.
///
/// Returns the rendered report; the error carries the first failing
/// component for the exit-5 path.
pub fn cmd_gradcheck(fault: Fault) -> (CheckReport, Result<(), CliError>) {
    let report = run_gradcheck(fault);
    let status = match report.first_failure() {
        None => Ok(()),
        Some(c) => Err(CliError::Gradcheck {
            component: c.name.to_string(),
            case: c.worst_case.clone(),
            err: c.worst_rel_err,
        }),
    };
    (report, status)
}

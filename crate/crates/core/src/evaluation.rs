//! Metrics, ablation runs and report tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encode::{LevelMask, MULTILEVEL_ARMS};
use crate::forecast::{train, EpochLog, ForecastError, ForecastModel, NormalizationStats, SplitSamples, TrainConfig, WindowSample, CHANNELS};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn same_len(pred: &[f64], truth: &[f64]) -> Result<(), EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::Usage(format!("shape mismatch: {} vs {}", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(EvalError::Usage("metric over zero elements".into()));
    }
    Ok(())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    same_len(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    same_len(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// `(x - min) / (max - min)`; all-equal input maps to zeros.
pub fn minmax_normalize(values: &[f64]) -> Result<Vec<f64>, EvalError> {
    if values.len() < 2 {
        return Err(EvalError::Usage("min-max normalization needs at least 2 values".into()));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    Ok(values
        .iter()
        .map(|x| if range > 0.0 { (x - min) / range } else { 0.0 })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    /// Level-masked text; the empty mask is the no-text arm.
    Levels(LevelMask),
    /// Full record rebuilt with retrieval size N.
    TopN(usize),
    /// Target slot filled from keyword-matched articles.
    Keyword,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arm::Levels(m) if m.is_empty() => f.write_str("no-text"),
            Arm::Levels(m) => write!(f, "{m}"),
            Arm::TopN(n) => write!(f, "N={n}"),
            Arm::Keyword => f.write_str("keyword"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblationPlan {
    pub name: String,
    pub arms: Vec<Arm>,
}

pub const RETRIEVAL_SIZES: [usize; 4] = [0, 10, 15, 20];

impl AblationPlan {
    pub fn new(name: impl Into<String>, arms: Vec<Arm>) -> Result<Self, EvalError> {
        if arms.is_empty() {
            return Err(EvalError::Usage("ablation plan has no arms".into()));
        }
        if arms.iter().collect::<BTreeSet<_>>().len() != arms.len() {
            return Err(EvalError::Usage("ablation plan repeats an arm".into()));
        }
        Ok(Self { name: name.into(), arms })
    }

    /// The seven level combinations.
    pub fn multilevel() -> Self {
        Self::new("multilevel", MULTILEVEL_ARMS.iter().map(|m| Arm::Levels(*m)).collect()).unwrap()
    }

    /// Retrieval sizes 0, 10, 15 and 20.
    pub fn retrieval_sweep() -> Self {
        Self::new("retrieval", RETRIEVAL_SIZES.iter().map(|n| Arm::TopN(*n)).collect()).unwrap()
    }

    /// No text, keyword pairing, semantic multi-level pairing.
    pub fn pairing() -> Self {
        Self::new(
            "pairing",
            vec![Arm::Levels(LevelMask::NONE), Arm::Keyword, Arm::Levels(LevelMask::ALL)],
        )
        .unwrap()
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "multilevel" => Some(Self::multilevel()),
            "retrieval" => Some(Self::retrieval_sweep()),
            "pairing" => Some(Self::pairing()),
            _ => None,
        }
    }
}

/// A forecasting configuration; the fusion ratio is chosen per run on
/// validation MSE from `fusion_grid`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_grid")]
    pub fusion_grid: Vec<f64>,
}

fn default_grid() -> Vec<f64> {
    crate::forecast::FUSION_GRID.to_vec()
}

impl ModelSpec {
    pub fn linear() -> Self {
        Self {
            name: "linear".into(),
            train: TrainConfig::default(),
            fusion_grid: default_grid(),
        }
    }

    pub fn dlinear() -> Self {
        Self {
            name: "dlinear".into(),
            train: TrainConfig {
                decompose: true,
                ..Default::default()
            },
            fusion_grid: default_grid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetric {
    pub model: String,
    pub arm: String,
    pub seed: u64,
    /// Empty when the run failed.
    pub mse: Option<f64>,
    pub mae: Option<f64>,
}

/// Test metrics of `model` over all outputs of all samples.
pub fn evaluate_model(model: &ForecastModel, samples: &[WindowSample]) -> Result<(f64, f64), ForecastError> {
    let pred: Vec<f64> = model.predict(samples)?.into_iter().flatten().collect();
    let truth: Vec<f64> = samples.iter().flat_map(|s| s.target.iter().copied()).collect();
    let to_usage = |e: EvalError| ForecastError::Usage(e.to_string());
    Ok((mse(&pred, &truth).map_err(to_usage)?, mae(&pred, &truth).map_err(to_usage)?))
}

/// A model chosen on validation MSE, with the training log of its run.
pub struct Fitted {
    pub model: ForecastModel,
    pub val_mse: f64,
    pub log: Vec<EpochLog>,
}

/// Trains once per fusion ratio and keeps the lowest validation MSE (ties go
/// to the earlier ratio).
pub fn fit_with_grid(data: &SplitSamples, spec: &ModelSpec, seed: u64) -> Result<Fitted, ForecastError> {
    let grid: &[f64] = if spec.fusion_grid.is_empty() {
        std::slice::from_ref(&spec.train.fusion_ratio)
    } else {
        &spec.fusion_grid
    };
    let mut best: Option<Fitted> = None;
    for &ratio in grid {
        let cfg = TrainConfig {
            fusion_ratio: ratio,
            ..spec.train.clone()
        };
        let (model, log) = train(&data.train, &data.val, &cfg, seed)?;
        let (val_mse, _) = evaluate_model(&model, &data.val)?;
        if best.as_ref().is_none_or(|b| val_mse < b.val_mse) {
            best = Some(Fitted { model, val_mse, log });
        }
    }
    Ok(best.expect("non-empty grid"))
}

fn cell_file(model: &str, arm_index: usize, seed: u64) -> String {
    format!("{model}__{arm_index:02}__{seed}.csv")
}

/// Runs every (model, arm, seed) cell in parallel. `inputs` holds the
/// windowed data of each arm in plan order. A failing cell is logged and
/// left empty. With `cell_dir`, every cell also writes its own one-row CSV.
pub fn run_ablation(
    plan: &AblationPlan,
    inputs: &[SplitSamples],
    models: &[ModelSpec],
    seeds: &[u64],
    cell_dir: Option<&Path>,
) -> Result<MetricReport, EvalError> {
    if inputs.len() != plan.arms.len() {
        return Err(EvalError::Usage(format!(
            "{} arm inputs for {} arms",
            inputs.len(),
            plan.arms.len()
        )));
    }
    if models.is_empty() || seeds.is_empty() {
        return Err(EvalError::Usage("need at least one model and one seed".into()));
    }
    if let Some(dir) = cell_dir {
        fs::create_dir_all(dir)?;
    }
    let cells: Vec<(&ModelSpec, usize, u64)> = models
        .iter()
        .flat_map(|m| (0..plan.arms.len()).flat_map(move |a| seeds.iter().map(move |s| (m, a, *s))))
        .collect();
    let runs: Vec<RunMetric> = cells
        .par_iter()
        .map(|&(spec, a, seed)| {
            let arm = plan.arms[a].to_string();
            let outcome = fit_with_grid(&inputs[a], spec, seed)
                .and_then(|fit| evaluate_model(&fit.model, &inputs[a].test));
            let run = match outcome {
                Ok((mse, mae)) => RunMetric {
                    model: spec.name.clone(),
                    arm,
                    seed,
                    mse: Some(mse),
                    mae: Some(mae),
                },
                Err(e) => {
                    log::error!("cell {} / {arm} / seed {seed} failed: {e}", spec.name);
                    RunMetric {
                        model: spec.name.clone(),
                        arm,
                        seed,
                        mse: None,
                        mae: None,
                    }
                }
            };
            if let Some(dir) = cell_dir {
                write_metrics_csv(&dir.join(cell_file(&spec.name, a, seed)), std::slice::from_ref(&run))?;
            }
            Ok(run)
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(aggregate(runs))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub model: String,
    pub arm: String,
    /// Successful seeds.
    pub n: usize,
    pub mse_mean: Option<f64>,
    pub mse_std: Option<f64>,
    pub mae_mean: Option<f64>,
    pub mae_std: Option<f64>,
    /// Min-max normalized mean MSE across this model's arms.
    pub norm_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub models: Vec<String>,
    pub arms: Vec<String>,
    pub runs: Vec<RunMetric>,
    pub cells: Vec<CellSummary>,
}

impl MetricReport {
    pub fn cell(&self, model: &str, arm: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.model == model && c.arm == arm)
    }

    /// Mean test MSE of an arm over seeds and models.
    pub fn arm_mse(&self, arm: &str) -> Option<f64> {
        let means: Vec<f64> = self.cells.iter().filter(|c| c.arm == arm).filter_map(|c| c.mse_mean).collect();
        (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64)
    }
}

fn first_seen<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    items.filter(|x| seen.insert(*x)).map(str::to_string).collect()
}

/// Population mean and standard deviation.
fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Groups runs by (model, arm). Models and arms keep first-seen order; seeds
/// are sorted before summing so the result does not depend on run order.
pub fn aggregate(runs: Vec<RunMetric>) -> MetricReport {
    let models = first_seen(runs.iter().map(|r| r.model.as_str()));
    let arms = first_seen(runs.iter().map(|r| r.arm.as_str()));
    let mut cells = Vec::new();
    for model in &models {
        let mut row = Vec::new();
        for arm in &arms {
            let mut mine: Vec<&RunMetric> = runs.iter().filter(|r| &r.model == model && &r.arm == arm).collect();
            if mine.is_empty() {
                continue;
            }
            mine.sort_by_key(|r| r.seed);
            let ok: Vec<&RunMetric> = mine.iter().copied().filter(|r| r.mse.is_some() && r.mae.is_some()).collect();
            let mse = mean_std(&ok.iter().map(|r| r.mse.unwrap()).collect::<Vec<_>>());
            let mae = mean_std(&ok.iter().map(|r| r.mae.unwrap()).collect::<Vec<_>>());
            row.push(CellSummary {
                model: model.clone(),
                arm: arm.clone(),
                n: ok.len(),
                mse_mean: mse.map(|m| m.0),
                mse_std: mse.map(|m| m.1),
                mae_mean: mae.map(|m| m.0),
                mae_std: mae.map(|m| m.1),
                norm_mse: None,
            });
        }
        let present: Vec<f64> = row.iter().filter_map(|c| c.mse_mean).collect();
        if present.len() == row.len() {
            if let Ok(norm) = minmax_normalize(&present) {
                for (c, v) in row.iter_mut().zip(norm) {
                    c.norm_mse = Some(v);
                }
            }
        }
        cells.extend(row);
    }
    MetricReport {
        models,
        arms,
        runs,
        cells,
    }
}

fn fmt_opt(v: Option<f64>, decimals: usize) -> String {
    v.map(|x| format!("{x:.decimals$}")).unwrap_or_default()
}

/// `model,arm,seed,mse,mae` with eight decimals.
pub fn write_metrics_csv(path: &Path, runs: &[RunMetric]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "arm", "seed", "mse", "mae"])?;
    for r in runs {
        w.write_record([
            r.model.clone(),
            r.arm.clone(),
            r.seed.to_string(),
            fmt_opt(r.mse, 8),
            fmt_opt(r.mae, 8),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<RunMetric>, EvalError> {
    Ok(csv::Reader::from_path(path)?.deserialize().collect::<Result<_, _>>()?)
}

/// Merges per-cell files in the order given by `names`.
pub fn merge_cell_files(dir: &Path, names: &[String]) -> Result<Vec<RunMetric>, EvalError> {
    let mut out = Vec::new();
    for name in names {
        out.extend(read_metrics_csv(&dir.join(name))?);
    }
    Ok(out)
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const TABLE_FILE: &str = "table.csv";
pub const CELLS_FILE: &str = "cells.csv";
pub const PLOT_FILE: &str = "plot_data.csv";

/// Writes the report tables:
///
/// - `table.csv`: one MSE and one MAE row per model, one column per arm,
///   means over seeds at four decimals, plus a normalized MSE row;
/// - `cells.csv`: long form with standard deviations;
/// - `plot_data.csv`: normalized MSE mean and std per arm, per model (over
///   seeds, each seed normalized across arms) and across models.
pub fn write_report(report: &MetricReport, dir: &Path) -> Result<(), EvalError> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(TABLE_FILE))?;
    let mut header = vec!["model".to_string(), "metric".to_string()];
    header.extend(report.arms.iter().cloned());
    w.write_record(&header)?;
    for model in &report.models {
        let rows: [(&str, fn(&CellSummary) -> Option<f64>); 3] = [
            ("MSE", |c| c.mse_mean),
            ("MAE", |c| c.mae_mean),
            ("MSE (normalized)", |c| c.norm_mse),
        ];
        for (metric, get) in rows {
            let mut rec = vec![model.clone(), metric.to_string()];
            rec.extend(report.arms.iter().map(|a| fmt_opt(report.cell(model, a).and_then(get), 4)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(CELLS_FILE))?;
    w.write_record(["model", "arm", "n", "mse_mean", "mse_std", "mae_mean", "mae_std", "norm_mse"])?;
    for c in &report.cells {
        w.write_record([
            c.model.clone(),
            c.arm.clone(),
            c.n.to_string(),
            fmt_opt(c.mse_mean, 4),
            fmt_opt(c.mse_std, 4),
            fmt_opt(c.mae_mean, 4),
            fmt_opt(c.mae_std, 4),
            fmt_opt(c.norm_mse, 4),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(PLOT_FILE))?;
    w.write_record(["scope", "model", "arm_index", "arm", "norm_mse_mean", "norm_mse_std"])?;
    let per_model = plot_points(report);
    for (model, points) in &per_model {
        for (i, (arm, p)) in report.arms.iter().zip(points).enumerate() {
            w.write_record([
                "model".to_string(),
                model.clone(),
                i.to_string(),
                arm.clone(),
                fmt_opt(p.map(|x| x.0), 4),
                fmt_opt(p.map(|x| x.1), 4),
            ])?;
        }
    }
    for (i, arm) in report.arms.iter().enumerate() {
        let means: Vec<f64> = per_model.values().filter_map(|pts| pts[i].map(|p| p.0)).collect();
        let agg = mean_std(&means);
        w.write_record([
            "all".to_string(),
            String::new(),
            i.to_string(),
            arm.clone(),
            fmt_opt(agg.map(|x| x.0), 4),
            fmt_opt(agg.map(|x| x.1), 4),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per model and arm: mean and std over seeds of the seed's MSE normalized
/// across arms. Seeds missing any arm are skipped.
fn plot_points(report: &MetricReport) -> BTreeMap<String, Vec<Option<(f64, f64)>>> {
    let mut out = BTreeMap::new();
    for model in &report.models {
        let seeds: BTreeSet<u64> = report.runs.iter().filter(|r| &r.model == model).map(|r| r.seed).collect();
        let mut per_arm: Vec<Vec<f64>> = vec![Vec::new(); report.arms.len()];
        for seed in seeds {
            let row: Option<Vec<f64>> = report
                .arms
                .iter()
                .map(|a| {
                    report
                        .runs
                        .iter()
                        .find(|r| &r.model == model && &r.arm == a && r.seed == seed)
                        .and_then(|r| r.mse)
                })
                .collect();
            if let Some(norm) = row.and_then(|r| minmax_normalize(&r).ok()) {
                for (slot, v) in per_arm.iter_mut().zip(norm) {
                    slot.push(v);
                }
            }
        }
        out.insert(model.clone(), per_arm.iter().map(|v| mean_std(v)).collect());
    }
    out
}

/// Rebuilds every report file from a metrics CSV.
pub fn regenerate_report(metrics: &Path, dir: &Path) -> Result<MetricReport, EvalError> {
    let report = aggregate(read_metrics_csv(metrics)?);
    write_report(&report, dir)?;
    Ok(report)
}

/// A rate as integer tenths of a percent.
pub fn pct_tenths(rate: f64) -> i64 {
    (rate * 1000.0).round() as i64
}

fn tenths(t: i64) -> String {
    format!("{}.{}", t.abs() / 10, t.abs() % 10)
}

/// `"67.6% / 73.5% / +5.9%p"`. The improvement is computed from the
/// rounded percentages.
pub fn format_hit_rate(base: f64, tuned: f64) -> String {
    let (b, t) = (pct_tenths(base), pct_tenths(tuned));
    let d = t - b;
    let sign = if d < 0 { '-' } else { '+' };
    format!("{}% / {}% / {sign}{}%p", tenths(b), tenths(t), tenths(d))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRateRow {
    pub ticker: String,
    pub base: f64,
    pub tuned: f64,
}

/// `ticker,base,fine_tuned,imp` with the formatted cells.
pub fn write_hit_rate_table(rows: &[HitRateRow], path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["ticker", "base", "fine_tuned", "imp"])?;
    for r in rows {
        let cells: Vec<String> = format_hit_rate(r.base, r.tuned).split(" / ").map(str::to_string).collect();
        w.write_record([r.ticker.as_str(), &cells[0], &cells[1], &cells[2]])?;
    }
    w.flush()?;
    Ok(())
}

/// Rolling one-step-ahead close forecasts of one ticker under several arms.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseStudy {
    pub ticker: String,
    pub arms: Vec<String>,
    /// (target day, actual close, forecast close per arm), in price units.
    pub rows: Vec<(NaiveDate, f64, Vec<f64>)>,
    pub mae: Vec<f64>,
}

const CLOSE: usize = CHANNELS - 1;

/// `arms` pairs a label and a trained model with that arm's test windows of
/// one ticker; the first `days` windows are used.
pub fn case_study(
    ticker: &str,
    arms: &[(String, ForecastModel, Vec<WindowSample>)],
    stats: &NormalizationStats,
    days: usize,
) -> Result<CaseStudy, ForecastError> {
    let Some(first) = arms.first() else {
        return Err(ForecastError::Usage("case study needs at least one arm".into()));
    };
    let denorm = |z: f64| z * stats.std[CLOSE] + stats.mean[CLOSE];
    let n = first.2.len().min(days);
    if arms.iter().any(|a| a.2.len() < n) {
        return Err(ForecastError::Usage("arms have different test windows".into()));
    }
    let mut rows: Vec<(NaiveDate, f64, Vec<f64>)> = first.2[..n]
        .iter()
        .map(|s| (s.target_days[0], denorm(s.target[CLOSE]), Vec::new()))
        .collect();
    for (_, model, samples) in arms {
        for (row, s) in rows.iter_mut().zip(&samples[..n]) {
            row.2.push(denorm(model.forward(s)?[CLOSE]));
        }
    }
    let mae = (0..arms.len())
        .map(|a| rows.iter().map(|r| (r.2[a] - r.1).abs()).sum::<f64>() / n.max(1) as f64)
        .collect();
    Ok(CaseStudy {
        ticker: ticker.to_string(),
        arms: arms.iter().map(|a| a.0.clone()).collect(),
        rows,
        mae,
    })
}

/// `day,actual,<arm>...` and a closing `mae` row.
pub fn write_case_study(study: &CaseStudy, path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["day".to_string(), "actual".to_string()];
    header.extend(study.arms.iter().cloned());
    w.write_record(&header)?;
    for (day, actual, preds) in &study.rows {
        let mut rec = vec![day.to_string(), format!("{actual:.4}")];
        rec.extend(preds.iter().map(|p| format!("{p:.4}")));
        w.write_record(&rec)?;
    }
    let mut rec = vec!["mae".to_string(), String::new()];
    rec.extend(study.mae.iter().map(|m| format!("{m:.4}")));
    w.write_record(&rec)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_metrics() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 4.0]).unwrap(), 2.0);
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 4.0]).unwrap(), 1.0);
        assert_eq!(mse(&[3.0, 5.0], &[3.0, 5.0]).unwrap(), 0.0);
        assert!(matches!(mse(&[1.0], &[1.0, 2.0]), Err(EvalError::Usage(_))));
    }

    #[test]
    fn minmax_degenerate_and_short() {
        assert_eq!(minmax_normalize(&[0.3, 0.3, 0.3]).unwrap(), vec![0.0; 3]);
        assert!(minmax_normalize(&[1.0]).is_err());
    }

    #[test]
    fn hit_rate_formatting() {
        assert_eq!(format_hit_rate(0.676, 0.735), "67.6% / 73.5% / +5.9%p");
        assert_eq!(format_hit_rate(0.668, 0.668), "66.8% / 66.8% / +0.0%p");
        assert_eq!(format_hit_rate(0.70, 0.651), "70.0% / 65.1% / -4.9%p");
        assert_eq!(format_hit_rate(0.05, 0.041), "5.0% / 4.1% / -0.9%p");
    }

    #[test]
    fn plans_have_expected_sizes() {
        assert_eq!(AblationPlan::multilevel().arms.len(), 7);
        assert_eq!(AblationPlan::retrieval_sweep().arms.len(), 4);
        assert!(AblationPlan::new("x", vec![]).is_err());
        assert!(AblationPlan::new("x", vec![Arm::Keyword, Arm::Keyword]).is_err());
        let labels: Vec<String> = AblationPlan::pairing().arms.iter().map(|a| a.to_string()).collect();
        assert_eq!(labels, ["no-text", "keyword", "①②③④"]);
    }

    fn run(model: &str, arm: &str, seed: u64, mse: f64) -> RunMetric {
        RunMetric {
            model: model.into(),
            arm: arm.into(),
            seed,
            mse: Some(mse),
            mae: Some(mse.sqrt()),
        }
    }

    #[test]
    fn aggregate_normalizes_per_model() {
        let runs = vec![
            run("m", "a", 1, 1.0),
            run("m", "a", 2, 3.0),
            run("m", "b", 1, 4.0),
            run("m", "b", 2, 4.0),
            run("m", "c", 1, 3.0),
            run("m", "c", 2, 3.0),
        ];
        let r = aggregate(runs);
        assert_eq!(r.cell("m", "a").unwrap().mse_mean, Some(2.0));
        assert_eq!(r.cell("m", "a").unwrap().mse_std, Some(1.0));
        assert_eq!(r.cell("m", "a").unwrap().norm_mse, Some(0.0));
        assert_eq!(r.cell("m", "b").unwrap().norm_mse, Some(1.0));
        assert_eq!(r.cell("m", "c").unwrap().norm_mse, Some(0.5));
    }

    #[test]
    fn failed_runs_are_excluded_from_means() {
        let mut bad = run("m", "a", 3, 0.0);
        bad.mse = None;
        bad.mae = None;
        let r = aggregate(vec![run("m", "a", 1, 1.0), bad, run("m", "b", 1, 2.0)]);
        let c = r.cell("m", "a").unwrap();
        assert_eq!((c.n, c.mse_mean), (1, Some(1.0)));
    }

    #[test]
    fn report_regenerates_identically() {
        let dir = tempfile::tempdir().unwrap();
        let runs = vec![run("m", "①", 1, 0.5), run("m", "④", 1, 0.25), run("k", "①", 1, 0.1), run("k", "④", 1, 0.2)];
        let metrics = dir.path().join(METRICS_FILE);
        write_metrics_csv(&metrics, &runs).unwrap();
        regenerate_report(&metrics, &dir.path().join("a")).unwrap();
        regenerate_report(&metrics, &dir.path().join("b")).unwrap();
        for f in [TABLE_FILE, CELLS_FILE, PLOT_FILE] {
            let a = fs::read(dir.path().join("a").join(f)).unwrap();
            let b = fs::read(dir.path().join("b").join(f)).unwrap();
            assert_eq!(a, b, "{f}");
        }
        let table = fs::read_to_string(dir.path().join("a").join(TABLE_FILE)).unwrap();
        assert!(table.starts_with("model,metric,①,④\nm,MSE,0.5000,0.2500\n"));
    }
}

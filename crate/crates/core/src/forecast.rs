//! Windowed OHLC forecasting with a linear backbone and a fused text head.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{PriceSeries, TradingCalendar};
use crate::optim::Adam;

pub const LOOKBACK: usize = 64;
pub const HORIZON: usize = 3;
pub const CHANNELS: usize = 4;
pub const MA_KERNEL: usize = 25;
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum ForecastError {
    #[error("split: {0}")]
    Split(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("checkpoint: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Splits {
    pub train: Vec<NaiveDate>,
    pub val: Vec<NaiveDate>,
    pub test: Vec<NaiveDate>,
}

impl Splits {
    pub fn segment_of(&self, day: NaiveDate) -> Option<usize> {
        [&self.train, &self.val, &self.test]
            .iter()
            .position(|seg| seg.binary_search(&day).is_ok())
    }
}

/// First three calendar years train, the fourth validates, the fifth tests.
/// Later years are dropped with a warning.
pub fn split_by_years(calendar: &TradingCalendar) -> Result<Splits, ForecastError> {
    let years: BTreeSet<i32> = calendar.days().iter().map(|d| d.year()).collect();
    if years.len() < 5 {
        return Err(ForecastError::Split(format!(
            "need 5 calendar years, calendar spans {}",
            years.len()
        )));
    }
    let years: Vec<i32> = years.into_iter().collect();
    if years.len() > 5 {
        log::warn!("calendar spans {} years; years after {} are unused", years.len(), years[4]);
    }
    let pick = |range: &[i32]| -> Vec<NaiveDate> {
        calendar
            .days()
            .iter()
            .copied()
            .filter(|d| range.contains(&d.year()))
            .collect()
    };
    Ok(Splits {
        train: pick(&years[..3]),
        val: pick(&years[3..4]),
        test: pick(&years[4..5]),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

/// Population mean and standard deviation per channel, std floored at 1e-8.
pub fn zscore_fit(rows: &[[f64; CHANNELS]]) -> Result<NormalizationStats, ForecastError> {
    if rows.is_empty() {
        return Err(ForecastError::Usage("cannot fit normalization on zero rows".into()));
    }
    let n = rows.len() as f64;
    let mut mean = [0.0; CHANNELS];
    let mut std = [0.0; CHANNELS];
    for c in 0..CHANNELS {
        mean[c] = rows.iter().map(|r| r[c]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / n;
        std[c] = var.sqrt().max(STD_FLOOR);
    }
    Ok(NormalizationStats { mean, std })
}

pub fn zscore_apply(rows: &[[f64; CHANNELS]], stats: &NormalizationStats) -> Vec<[f64; CHANNELS]> {
    rows.iter()
        .map(|r| std::array::from_fn(|c| (r[c] - stats.mean[c]) / stats.std[c]))
        .collect()
}

pub fn zscore_invert(rows: &[[f64; CHANNELS]], stats: &NormalizationStats) -> Vec<[f64; CHANNELS]> {
    rows.iter()
        .map(|r| std::array::from_fn(|c| r[c] * stats.std[c] + stats.mean[c]))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    pub ticker: String,
    /// Trading day of the last input row.
    pub anchor_day: NaiveDate,
    pub target_days: Vec<NaiveDate>,
    /// `lookback × channels`, time-major.
    pub input: Vec<f64>,
    /// `horizon × channels`, time-major.
    pub target: Vec<f64>,
    pub text: Vec<f64>,
}

/// Stride-1 windows over one contiguous segment. The text vector comes from
/// the anchor day.
pub fn make_windows(
    ticker: &str,
    rows: &[(NaiveDate, [f64; CHANNELS])],
    lookback: usize,
    horizon: usize,
    text_for: &dyn Fn(NaiveDate) -> Vec<f64>,
) -> Vec<WindowSample> {
    if rows.len() < lookback + horizon {
        log::warn!(
            "{ticker}: segment of {} rows is shorter than {}; no windows",
            rows.len(),
            lookback + horizon
        );
        return Vec::new();
    }
    (0..=rows.len() - lookback - horizon)
        .map(|start| {
            let input_rows = &rows[start..start + lookback];
            let target_rows = &rows[start + lookback..start + lookback + horizon];
            let anchor_day = input_rows[lookback - 1].0;
            WindowSample {
                ticker: ticker.to_string(),
                anchor_day,
                target_days: target_rows.iter().map(|r| r.0).collect(),
                input: input_rows.iter().flat_map(|r| r.1).collect(),
                target: target_rows.iter().flat_map(|r| r.1).collect(),
                text: text_for(anchor_day),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct SplitSamples {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

impl SplitSamples {
    pub fn extend(&mut self, other: SplitSamples) {
        self.train.extend(other.train);
        self.val.extend(other.val);
        self.test.extend(other.test);
    }
}

/// Normalizes one ticker with train-only statistics and windows each split
/// segment separately, so no window crosses a boundary.
pub fn windows_for_ticker(
    series: &PriceSeries,
    splits: &Splits,
    lookback: usize,
    horizon: usize,
    text_for: &dyn Fn(NaiveDate) -> Vec<f64>,
) -> Result<(SplitSamples, NormalizationStats), ForecastError> {
    let mut segments: [Vec<(NaiveDate, [f64; CHANNELS])>; 3] = Default::default();
    for bar in &series.bars {
        if let Some(seg) = splits.segment_of(bar.date) {
            segments[seg].push((bar.date, bar.channels()));
        }
    }
    let train_rows: Vec<[f64; CHANNELS]> = segments[0].iter().map(|r| r.1).collect();
    let stats = zscore_fit(&train_rows)?;
    let normalize = |seg: &[(NaiveDate, [f64; CHANNELS])]| -> Vec<(NaiveDate, [f64; CHANNELS])> {
        let rows: Vec<[f64; CHANNELS]> = seg.iter().map(|r| r.1).collect();
        seg.iter().map(|r| r.0).zip(zscore_apply(&rows, &stats)).collect()
    };
    let windows = |i: usize| make_windows(&series.ticker, &normalize(&segments[i]), lookback, horizon, text_for);
    Ok((
        SplitSamples {
            train: windows(0),
            val: windows(1),
            test: windows(2),
        },
        stats,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelShape {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub text_dim: usize,
    /// Split each channel into moving-average trend and remainder, each with
    /// its own weight matrix.
    pub decompose: bool,
}

impl ModelShape {
    pub fn new(text_dim: usize, decompose: bool) -> Self {
        Self {
            lookback: LOOKBACK,
            horizon: HORIZON,
            channels: CHANNELS,
            text_dim,
            decompose,
        }
    }

    fn branches(&self) -> usize {
        if self.decompose {
            2
        } else {
            1
        }
    }

    fn backbone_weights(&self) -> usize {
        self.channels * self.branches() * self.horizon * self.lookback
    }

    fn backbone_bias(&self) -> usize {
        self.channels * self.horizon
    }

    fn outputs(&self) -> usize {
        self.horizon * self.channels
    }

    pub fn n_params(&self) -> usize {
        self.backbone_weights() + self.backbone_bias() + self.outputs() * self.text_dim + self.outputs()
    }

    /// Offsets of backbone weights, backbone bias, text weights, text bias.
    fn offsets(&self) -> [usize; 4] {
        let a = self.backbone_weights();
        let b = a + self.backbone_bias();
        let c = b + self.outputs() * self.text_dim;
        [0, a, b, c]
    }

    pub fn backbone_range(&self) -> std::ops::Range<usize> {
        0..self.offsets()[2]
    }

    pub fn text_range(&self) -> std::ops::Range<usize> {
        self.offsets()[2]..self.n_params()
    }
}

/// Centered moving average with edge replication.
pub fn moving_average(x: &[f64], kernel: usize) -> Vec<f64> {
    let pad = (kernel - 1) / 2;
    let n = x.len() as isize;
    (0..x.len())
        .map(|i| {
            (0..kernel)
                .map(|k| {
                    let j = (i as isize + k as isize - pad as isize).clamp(0, n - 1);
                    x[j as usize]
                })
                .sum::<f64>()
                / kernel as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastModel {
    pub shape: ModelShape,
    pub ratio: f64,
    pub params: Vec<f64>,
}

/// Per-sample backbone inputs: one row of `lookback` values per channel and
/// branch, taken relative to the channel's last observed value (`anchor`).
struct Features {
    rows: Vec<f64>,
    anchor: Vec<f64>,
}

impl ForecastModel {
    /// All-zero start, which forecasts persistence: every horizon step
    /// repeats the last input row.
    pub fn new(shape: ModelShape, ratio: f64) -> Result<Self, ForecastError> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(ForecastError::Usage(format!("fusion ratio {ratio} outside [0, 1]")));
        }
        Ok(Self::zeros(shape, ratio))
    }

    pub fn zeros(shape: ModelShape, ratio: f64) -> Self {
        Self {
            shape,
            ratio,
            params: vec![0.0; shape.n_params()],
        }
    }

    fn check(&self, sample: &WindowSample) -> Result<(), ForecastError> {
        let s = &self.shape;
        if sample.input.len() != s.lookback * s.channels
            || sample.target.len() != s.horizon * s.channels
            || sample.text.len() != s.text_dim
        {
            return Err(ForecastError::Usage(format!(
                "sample shapes input {} target {} text {} do not match model {:?}",
                sample.input.len(),
                sample.target.len(),
                sample.text.len(),
                s
            )));
        }
        Ok(())
    }

    fn features(&self, sample: &WindowSample) -> Features {
        let s = &self.shape;
        let anchor = sample.input[(s.lookback - 1) * s.channels..].to_vec();
        let mut out = Vec::with_capacity(s.channels * s.branches() * s.lookback);
        for c in 0..s.channels {
            let x: Vec<f64> = (0..s.lookback)
                .map(|t| sample.input[t * s.channels + c] - anchor[c])
                .collect();
            if s.decompose {
                let trend = moving_average(&x, MA_KERNEL);
                out.extend_from_slice(&trend);
                out.extend(x.iter().zip(&trend).map(|(v, t)| v - t));
            } else {
                out.extend_from_slice(&x);
            }
        }
        Features { rows: out, anchor }
    }

    /// Backbone output relative to the anchor, horizon-major like the targets.
    fn backbone(&self, f: &Features) -> Vec<f64> {
        let s = &self.shape;
        let [_, bias_at, _, _] = s.offsets();
        let (l, h, nb) = (s.lookback, s.horizon, s.branches());
        let mut out = vec![0.0; h * s.channels];
        for c in 0..s.channels {
            for step in 0..h {
                let mut acc = self.params[bias_at + c * h + step];
                for b in 0..nb {
                    let row = (c * nb + b) * h * l + step * l;
                    let w = &self.params[row..row + l];
                    let x = &f.rows[(c * nb + b) * l..(c * nb + b + 1) * l];
                    acc += w.iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
                }
                out[step * s.channels + c] = acc;
            }
        }
        out
    }

    /// Embedding coordinates are O(1/sqrt(d)) for unit vectors; the head sees
    /// them rescaled to O(1).
    fn text_scale(&self) -> f64 {
        (self.shape.text_dim.max(1) as f64).sqrt()
    }

    fn text_head(&self, text: &[f64]) -> Vec<f64> {
        let s = &self.shape;
        let [_, _, tw, tb] = s.offsets();
        let k_scale = self.text_scale();
        (0..s.outputs())
            .map(|k| {
                let w = &self.params[tw + k * s.text_dim..tw + (k + 1) * s.text_dim];
                self.params[tb + k] + k_scale * w.iter().zip(text).map(|(p, q)| p * q).sum::<f64>()
            })
            .collect()
    }

    fn output(&self, sample: &WindowSample, f: &Features) -> Vec<f64> {
        let backbone = self.backbone(f);
        let text = self.text_head(&sample.text);
        let channels = self.shape.channels;
        backbone
            .iter()
            .zip(&text)
            .enumerate()
            .map(|(k, (b, t))| (1.0 - self.ratio) * b + self.ratio * t + f.anchor[k % channels])
            .collect()
    }

    /// `horizon × channels` forecast.
    pub fn forward(&self, sample: &WindowSample) -> Result<Vec<f64>, ForecastError> {
        self.check(sample)?;
        Ok(self.output(sample, &self.features(sample)))
    }

    /// Backbone alone, before fusion, with the anchor added back.
    pub fn backbone_forward(&self, sample: &WindowSample) -> Result<Vec<f64>, ForecastError> {
        self.check(sample)?;
        let f = self.features(sample);
        let channels = self.shape.channels;
        Ok(self
            .backbone(&f)
            .iter()
            .enumerate()
            .map(|(k, b)| b + f.anchor[k % channels])
            .collect())
    }

    fn accumulate(&self, sample: &WindowSample, f: &Features, dy: &[f64], grad: &mut [f64]) {
        let s = &self.shape;
        let [_, bias_at, tw, tb] = s.offsets();
        let (l, h, nb) = (s.lookback, s.horizon, s.branches());
        let r = self.ratio;
        let k_scale = self.text_scale();
        for c in 0..s.channels {
            for step in 0..h {
                let g = (1.0 - r) * dy[step * s.channels + c];
                if g == 0.0 {
                    continue;
                }
                grad[bias_at + c * h + step] += g;
                for b in 0..nb {
                    let row = (c * nb + b) * h * l + step * l;
                    let x = &f.rows[(c * nb + b) * l..(c * nb + b + 1) * l];
                    for (gw, xv) in grad[row..row + l].iter_mut().zip(x) {
                        *gw += g * xv;
                    }
                }
            }
        }
        for k in 0..s.outputs() {
            let g = r * dy[k];
            if g == 0.0 {
                continue;
            }
            grad[tb + k] += g;
            for (gw, t) in grad[tw + k * s.text_dim..tw + (k + 1) * s.text_dim].iter_mut().zip(&sample.text) {
                *gw += g * k_scale * t;
            }
        }
    }

    /// Mean squared error over all samples and outputs, with its gradient.
    pub fn loss_and_grad(&self, samples: &[WindowSample]) -> Result<(f64, Vec<f64>), ForecastError> {
        let features: Vec<Features> = samples
            .iter()
            .map(|s| self.check(s).map(|_| self.features(s)))
            .collect::<Result<_, _>>()?;
        let refs: Vec<(&WindowSample, &Features)> = samples.iter().zip(&features).collect();
        Ok(self.loss_and_grad_prepared(&refs))
    }

    fn loss_and_grad_prepared(&self, batch: &[(&WindowSample, &Features)]) -> (f64, Vec<f64>) {
        let n = (batch.len() * self.shape.outputs()) as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for (sample, f) in batch {
            let y = self.output(sample, f);
            let dy: Vec<f64> = y
                .iter()
                .zip(&sample.target)
                .map(|(p, t)| {
                    loss += (p - t) * (p - t);
                    2.0 * (p - t) / n
                })
                .collect();
            self.accumulate(sample, f, &dy, &mut grad);
        }
        (loss / n, grad)
    }

    fn mse_prepared(&self, batch: &[(&WindowSample, &Features)]) -> f64 {
        let n = (batch.len() * self.shape.outputs()) as f64;
        batch
            .iter()
            .map(|(sample, f)| {
                let y = self.output(sample, f);
                y.iter().zip(&sample.target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>()
            })
            .sum::<f64>()
            / n
    }

    pub fn predict(&self, samples: &[WindowSample]) -> Result<Vec<Vec<f64>>, ForecastError> {
        samples.iter().map(|s| self.forward(s)).collect()
    }

    /// Shape header (lookback, horizon, channels, text_dim, decompose as
    /// u32 LE), the fusion ratio, then each parameter group as
    /// `rows, cols` (u32 LE) and row-major f64 LE values.
    pub fn save(&self, path: &Path) -> Result<(), ForecastError> {
        let s = &self.shape;
        let mut out = Vec::new();
        out.extend_from_slice(b"TSFM");
        for v in [s.lookback, s.horizon, s.channels, s.text_dim, s.decompose as usize] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.ratio.to_le_bytes());
        let [_, a, b, c] = s.offsets();
        let groups = [
            (s.channels * s.branches() * s.horizon, s.lookback, 0..a),
            (s.channels, s.horizon, a..b),
            (s.outputs(), s.text_dim, b..c),
            (1, s.outputs(), c..s.n_params()),
        ];
        for (rows, cols, range) in groups {
            out.extend_from_slice(&(rows as u32).to_le_bytes());
            out.extend_from_slice(&(cols as u32).to_le_bytes());
            for v in &self.params[range] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ForecastError> {
        let bytes = fs::read(path)?;
        let bad = |m: &str| ForecastError::Usage(format!("{}: {m}", path.display()));
        if bytes.len() < 4 + 20 + 8 || &bytes[..4] != b"TSFM" {
            return Err(bad("not a model checkpoint"));
        }
        let u = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let shape = ModelShape {
            lookback: u(4),
            horizon: u(8),
            channels: u(12),
            text_dim: u(16),
            decompose: u(20) != 0,
        };
        let ratio = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
        let mut at = 32;
        let mut params = Vec::with_capacity(shape.n_params());
        for _ in 0..4 {
            if at + 8 > bytes.len() {
                return Err(bad("truncated group header"));
            }
            let n = u(at) * u(at + 4);
            at += 8;
            if at + 8 * n > bytes.len() {
                return Err(bad("truncated group"));
            }
            params.extend(
                bytes[at..at + 8 * n]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap())),
            );
            at += 8 * n;
        }
        if params.len() != shape.n_params() || at != bytes.len() {
            return Err(bad("parameter count does not match shape"));
        }
        Ok(Self { shape, ratio, params })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_ratio")]
    pub fusion_ratio: f64,
    #[serde(default)]
    pub decompose: bool,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_max_epochs() -> usize {
    100
}
fn default_patience() -> usize {
    5
}
fn default_batch() -> usize {
    32
}
fn default_ratio() -> f64 {
    0.3
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            batch_size: default_batch(),
            fusion_ratio: default_ratio(),
            decompose: false,
        }
    }
}

/// Fusion ratios searched per model.
pub const FUSION_GRID: [f64; 3] = [0.2, 0.3, 0.4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

/// Mini-batch Adam on MSE with early stopping on validation MSE. Returns the
/// best-validation model.
pub fn train(
    train_set: &[WindowSample],
    val_set: &[WindowSample],
    config: &TrainConfig,
    seed: u64,
) -> Result<(ForecastModel, Vec<EpochLog>), ForecastError> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(ForecastError::Usage("train and validation sets must be non-empty".into()));
    }
    if !(config.learning_rate > 0.0) || config.max_epochs == 0 || config.batch_size == 0 {
        return Err(ForecastError::Usage("learning rate, epochs and batch size must be positive".into()));
    }
    let shape = ModelShape {
        lookback: train_set[0].input.len() / CHANNELS,
        horizon: train_set[0].target.len() / CHANNELS,
        channels: CHANNELS,
        text_dim: train_set[0].text.len(),
        decompose: config.decompose,
    };
    let mut model = ForecastModel::new(shape, config.fusion_ratio)?;
    let prepare = |set: &[WindowSample], model: &ForecastModel| -> Result<Vec<Features>, ForecastError> {
        set.iter().map(|s| model.check(s).map(|_| model.features(s))).collect()
    };
    let train_f = prepare(train_set, &model)?;
    let val_f = prepare(val_set, &model)?;
    let val_batch: Vec<(&WindowSample, &Features)> = val_set.iter().zip(&val_f).collect();

    let mut adam = Adam::new(model.params.len(), config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = (model.mse_prepared(&val_batch), model.params.clone());
    let mut since_best = 0;
    let mut log = Vec::new();
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&WindowSample, &Features)> =
                chunk.iter().map(|&i| (&train_set[i], &train_f[i])).collect();
            let (loss, grad) = model.loss_and_grad_prepared(&batch);
            if !loss.is_finite() {
                return Err(ForecastError::Diverged { epoch });
            }
            total += loss * chunk.len() as f64;
            adam.step(&mut model.params, &grad);
        }
        let train_mse = total / train_set.len() as f64;
        let val_mse = model.mse_prepared(&val_batch);
        if !val_mse.is_finite() || model.params.iter().any(|p| !p.is_finite()) {
            return Err(ForecastError::Diverged { epoch });
        }
        log.push(EpochLog {
            epoch,
            train_mse,
            val_mse,
        });
        if val_mse < best.0 {
            best = (val_mse, model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    model.params = best.1;
    Ok((model, log))
}

pub fn write_training_log(path: &Path, log: &[EpochLog]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_mse", "val_mse"])?;
    for row in log {
        w.write_record([
            row.epoch.to_string(),
            format!("{:.10}", row.train_mse),
            format!("{:.10}", row.val_mse),
        ])?;
    }
    w.flush()
}

/// Largest relative gap between analytic and central-difference gradients
/// of the MSE over `samples`.
pub fn grad_check(model: &ForecastModel, samples: &[WindowSample], eps: f64) -> Result<f64, ForecastError> {
    let (_, analytic) = model.loss_and_grad(samples)?;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..model.params.len() {
        let orig = probe.params[i];
        probe.params[i] = orig + eps;
        let (up, _) = probe.loss_and_grad(samples)?;
        probe.params[i] = orig - eps;
        let (down, _) = probe.loss_and_grad(samples)?;
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn days(n: usize) -> Vec<NaiveDate> {
        let start: NaiveDate = "2019-01-01".parse().unwrap();
        (0..n).map(|i| start + chrono::Days::new(i as u64)).collect()
    }

    fn rows(n: usize) -> Vec<(NaiveDate, [f64; CHANNELS])> {
        days(n)
            .into_iter()
            .enumerate()
            .map(|(i, d)| (d, [i as f64; CHANNELS]))
            .collect()
    }

    #[test]
    fn window_counts() {
        let none = |_: NaiveDate| vec![0.0];
        assert_eq!(make_windows("X", &rows(67), 64, 3, &none).len(), 1);
        assert_eq!(make_windows("X", &rows(70), 64, 3, &none).len(), 4);
        assert!(make_windows("X", &rows(66), 64, 3, &none).is_empty());
    }

    #[test]
    fn zscore_values() {
        let data = [[1.0; 4], [2.0; 4], [3.0; 4]];
        let stats = zscore_fit(&data).unwrap();
        assert!((stats.mean[0] - 2.0).abs() < 1e-12);
        assert!((stats.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let z = zscore_apply(&data, &stats);
        assert!((z[0][0] + 1.2247).abs() < 1e-4);
        assert_eq!(z[1][0], 0.0);
        assert!((z[2][0] - 1.2247).abs() < 1e-4);
        let back = zscore_invert(&z, &stats);
        for (a, b) in back.iter().zip(&data) {
            assert!((a[0] - b[0]).abs() < 1e-9);
        }
        let flat = zscore_apply(&[[5.0; 4], [5.0; 4]], &zscore_fit(&[[5.0; 4], [5.0; 4]]).unwrap());
        assert!(flat.iter().all(|r| r.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn split_boundaries_2019_2023() {
        let start: NaiveDate = "2019-01-01".parse().unwrap();
        let end: NaiveDate = "2023-12-31".parse().unwrap();
        let all: Vec<NaiveDate> = start.iter_days().take_while(|d| *d <= end).collect();
        let cal = TradingCalendar::new(all).unwrap();
        let s = split_by_years(&cal).unwrap();
        let b1: NaiveDate = "2022-01-01".parse().unwrap();
        let b2: NaiveDate = "2023-01-01".parse().unwrap();
        assert!(s.train.iter().all(|d| *d < b1));
        assert_eq!(s.val.first(), Some(&b1));
        assert_eq!(s.test.first(), Some(&b2));
        assert!(s.val.iter().all(|d| *d < b2));
    }

    #[test]
    fn toy_split_and_short_calendar() {
        let mut ds = Vec::new();
        for year in 2019..2024 {
            let start = NaiveDate::from_ymd_opt(year, 3, 1).unwrap();
            ds.extend((0..10).map(|i| start + chrono::Days::new(i)));
        }
        let s = split_by_years(&TradingCalendar::new(ds.clone()).unwrap()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (30, 10, 10));
        let four = TradingCalendar::new(ds[..40].to_vec()).unwrap();
        assert!(matches!(split_by_years(&four), Err(ForecastError::Split(_))));
    }

    fn sample(l: usize, h: usize, d: usize, seed: u64) -> WindowSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        WindowSample {
            ticker: "X".into(),
            anchor_day: days(1)[0],
            target_days: vec![],
            input: v(l * CHANNELS),
            target: v(h * CHANNELS),
            text: v(d),
        }
    }

    #[test]
    fn ratio_zero_is_pure_backbone() {
        let shape = ModelShape::new(5, true);
        let mut m = ForecastModel::new(shape, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand::Rng;
        m.params.iter_mut().for_each(|p| *p = rng.random_range(-1.0..1.0));
        let s = sample(LOOKBACK, HORIZON, 5, 1);
        assert_eq!(m.forward(&s).unwrap(), m.backbone_forward(&s).unwrap());
    }

    #[test]
    fn hand_sized_instance() {
        let shape = ModelShape {
            lookback: 2,
            horizon: 1,
            channels: CHANNELS,
            text_dim: 1,
            decompose: false,
        };
        let mut m = ForecastModel::zeros(shape, 0.25);
        m.params.iter_mut().for_each(|p| *p = 1.0);
        let mut s = sample(2, 1, 1, 0);
        // Channel c sees inputs [c, 2c], so relative inputs [-c, 0]; text is 3.
        s.input = (0..2).flat_map(|t| (0..CHANNELS).map(move |c| (c * (t + 1)) as f64)).collect();
        s.text = vec![3.0];
        let y = m.forward(&s).unwrap();
        for c in 0..CHANNELS {
            let c = c as f64;
            let backbone = -c + 0.0 + 1.0;
            let text = 3.0 + 1.0;
            assert!((y[c as usize] - (0.75 * backbone + 0.25 * text + 2.0 * c)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_text_scales_backbone() {
        let shape = ModelShape::new(4, false);
        let mut m = ForecastModel::new(shape, 0.3).unwrap();
        let mut s = sample(LOOKBACK, HORIZON, 4, 2);
        s.text = vec![0.0; 4];
        let y = m.forward(&s).unwrap();
        // Persistence start: the fused output repeats the last input row.
        for step in 0..HORIZON {
            for c in 0..CHANNELS {
                assert!((y[step * CHANNELS + c] - s.input[(LOOKBACK - 1) * CHANNELS + c]).abs() < 1e-12);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        use rand::Rng;
        m.params[shape.backbone_range()].iter_mut().for_each(|p| *p = rng.random_range(-0.1..0.1));
        let y = m.forward(&s).unwrap();
        let b = m.backbone_forward(&s).unwrap();
        for (k, (a, bb)) in y.iter().zip(&b).enumerate() {
            let last = s.input[(LOOKBACK - 1) * CHANNELS + k % CHANNELS];
            assert!((a - last - 0.7 * (bb - last)).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for decompose in [false, true] {
            let shape = ModelShape {
                lookback: 8,
                horizon: 2,
                channels: CHANNELS,
                text_dim: 3,
                decompose,
            };
            let mut m = ForecastModel::new(shape, 0.35).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            use rand::Rng;
            m.params.iter_mut().for_each(|p| *p += rng.random_range(-0.5..0.5));
            let samples: Vec<WindowSample> = (0..3).map(|i| sample(8, 2, 3, 20 + i)).collect();
            assert!(grad_check(&m, &samples, 1e-5).unwrap() < 1e-4);
        }
    }

    #[test]
    fn zero_model_zero_sample_has_zero_gradient() {
        let shape = ModelShape::new(2, false);
        let m = ForecastModel::zeros(shape, 0.5);
        let mut s = sample(LOOKBACK, HORIZON, 2, 0);
        s.input.iter_mut().for_each(|v| *v = 0.0);
        s.target.iter_mut().for_each(|v| *v = 0.0);
        s.text.iter_mut().for_each(|v| *v = 0.0);
        let (loss, grad) = m.loss_and_grad(&[s]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn ratio_one_leaves_backbone_untouched() {
        let shape = ModelShape::new(3, true);
        let m = ForecastModel::new(shape, 1.0).unwrap();
        let s = sample(LOOKBACK, HORIZON, 3, 5);
        let (_, grad) = m.loss_and_grad(&[s]).unwrap();
        assert!(grad[shape.backbone_range()].iter().all(|g| *g == 0.0));
        assert!(grad[shape.text_range()].iter().any(|g| *g != 0.0));
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        let m = ForecastModel::zeros(ModelShape::new(3, false), 0.2);
        let s = sample(LOOKBACK, HORIZON, 2, 0);
        assert!(matches!(m.forward(&s), Err(ForecastError::Usage(_))));
    }

    #[test]
    fn moving_average_replicates_edges() {
        let x = [1.0, 2.0, 3.0];
        let ma = moving_average(&x, 3);
        assert!((ma[0] - 4.0 / 3.0).abs() < 1e-12);
        assert!((ma[1] - 2.0).abs() < 1e-12);
        assert!((ma[2] - 8.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = ForecastModel::new(ModelShape::new(6, true), 0.2).unwrap();
        m.params[7] = -3.5;
        let path = dir.path().join("m.bin");
        m.save(&path).unwrap();
        assert_eq!(ForecastModel::load(&path).unwrap(), m);
    }

    #[test]
    fn one_sample_one_epoch_does_not_increase_loss() {
        let s = vec![sample(LOOKBACK, HORIZON, 4, 9)];
        let before = ForecastModel::new(ModelShape::new(4, false), 0.3).unwrap();
        let (l0, _) = before.loss_and_grad(&s).unwrap();
        let cfg = TrainConfig {
            max_epochs: 1,
            ..Default::default()
        };
        let (after, log) = train(&s, &s, &cfg, 0).unwrap();
        let (l1, _) = after.loss_and_grad(&s).unwrap();
        assert!(l1 <= l0);
        assert_eq!(log.len(), 1);
    }
}
